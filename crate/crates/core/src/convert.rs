//! GEO Prolog-style and ATIS lambda-style logical forms, and their
//! conversion into block sequences.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::blocks::{AggrOp, BlockSequence, JoinOp, SemanticBlock};
use crate::kg::{KnowledgeGraph, Literal, LiteralKind, ID_ATTR};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConvertError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unmapped predicate '{0}'")]
    UnmappedPredicate(String),
    #[error("free variable {0}")]
    FreeVariable(String),
    #[error("unsupported logical form: {0}")]
    Unsupported(String),
    #[error("predicate table line {line}: {message}")]
    Table { line: usize, message: String },
}

type Result<T> = std::result::Result<T, ConvertError>;

// ---------------------------------------------------------------- GEO

#[derive(Clone, Debug, PartialEq)]
pub enum GeoTerm {
    Var(String),
    Atom(String),
    Number(String),
    Compound { functor: String, args: Vec<GeoTerm> },
    Conj(Vec<GeoTerm>),
}

impl fmt::Display for GeoTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |ts: &[GeoTerm]| ts.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",");
        match self {
            GeoTerm::Var(v) | GeoTerm::Number(v) => f.write_str(v),
            GeoTerm::Atom(a) if a.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') => {
                f.write_str(a)
            }
            GeoTerm::Atom(a) => write!(f, "'{a}'"),
            GeoTerm::Compound { functor, args } => write!(f, "{functor}({})", join(args)),
            GeoTerm::Conj(ts) => write!(f, "({})", join(ts)),
        }
    }
}

struct Scanner<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Scanner<'_> {
    fn ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.ws();
        self.src.get(self.pos).copied()
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(ConvertError::Syntax {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn eat(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else if self.pos >= self.src.len() {
            self.err(format!("expected '{}' but input ended", c as char))
        } else {
            self.err(format!("expected '{}'", c as char))
        }
    }

    fn run(&mut self, ok: impl Fn(u8) -> bool) -> String {
        let start = self.pos;
        while self.pos < self.src.len() && ok(self.src[self.pos]) {
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.src[start..self.pos]).into_owned()
    }

    fn quoted(&mut self) -> Result<String> {
        let start = self.pos;
        self.pos += 1;
        let s = self.run(|c| c != b'\'');
        if self.pos >= self.src.len() {
            self.pos = start;
            return self.err("unterminated quoted atom");
        }
        self.pos += 1;
        Ok(s)
    }
}

fn word_char(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'_'
}

pub fn parse_geo(text: &str) -> Result<GeoTerm> {
    let mut sc = Scanner {
        src: text.as_bytes(),
        pos: 0,
    };
    let t = geo_term(&mut sc)?;
    if sc.peek().is_some() {
        return sc.err("trailing input");
    }
    Ok(t)
}

fn geo_term(sc: &mut Scanner<'_>) -> Result<GeoTerm> {
    match sc.peek() {
        None => sc.err("unexpected end of input"),
        Some(b'(') => {
            sc.pos += 1;
            let mut items = vec![geo_term(sc)?];
            while sc.peek() == Some(b',') {
                sc.pos += 1;
                items.push(geo_term(sc)?);
            }
            sc.eat(b')')?;
            Ok(if items.len() == 1 {
                items.pop().expect("one item")
            } else {
                GeoTerm::Conj(items)
            })
        }
        Some(b'\'') => Ok(GeoTerm::Atom(sc.quoted()?.to_lowercase())),
        Some(c) if c.is_ascii_digit() || c == b'-' => {
            let start = sc.pos;
            sc.pos += 1;
            let rest = sc.run(|c| c.is_ascii_digit() || c == b'.');
            let s = format!("{}{rest}", c as char);
            if s.parse::<f64>().is_err() {
                sc.pos = start;
                return sc.err("bad number");
            }
            Ok(GeoTerm::Number(s))
        }
        Some(c) if c.is_ascii_uppercase() || c == b'_' => Ok(GeoTerm::Var(sc.run(word_char))),
        Some(c) if c.is_ascii_lowercase() || c == b'\\' => {
            let name = if c == b'\\' {
                sc.pos += 1;
                if sc.src.get(sc.pos) != Some(&b'+') {
                    return sc.err("expected '\\+'");
                }
                sc.pos += 1;
                "\\+".to_string()
            } else {
                sc.run(word_char)
            };
            if sc.peek() == Some(b'(') {
                sc.pos += 1;
                let mut args = vec![geo_term(sc)?];
                while sc.peek() == Some(b',') {
                    sc.pos += 1;
                    args.push(geo_term(sc)?);
                }
                sc.eat(b')')?;
                Ok(GeoTerm::Compound { functor: name, args })
            } else if name == "\\+" {
                Ok(GeoTerm::Compound {
                    functor: name,
                    args: vec![geo_term(sc)?],
                })
            } else {
                Ok(GeoTerm::Atom(name))
            }
        }
        Some(c) => sc.err(format!("unexpected '{}'", c as char)),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PredKind {
    Type(String),
    Adjective(String),
    Relation(String),
    Superlative(String),
    Aggregate(AggrOp),
    Attribute(String),
    Const(String),
}

/// Functor table driving GEO conversion: `geo-pred <functor> <kind> <mapping>`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredicateTable {
    preds: HashMap<String, PredKind>,
}

impl PredicateTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut preds = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| ConvertError::Table {
                line: i + 1,
                message: m,
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 || f[0] != "geo-pred" {
                return Err(err("expected `geo-pred <functor> <kind> <mapping>`".into()));
            }
            let m = f[3].to_string();
            let kind = match f[2] {
                "type" => PredKind::Type(m),
                "adjective" => PredKind::Adjective(m),
                "relation" => PredKind::Relation(m),
                "superlative" => PredKind::Superlative(m),
                "aggregate" => PredKind::Aggregate(
                    AggrOp::from_name(&m).ok_or_else(|| err(format!("unknown aggregate {m}")))?,
                ),
                "attribute" => PredKind::Attribute(m),
                "const" => PredKind::Const(m),
                k => return Err(err(format!("unknown kind {k}"))),
            };
            preds.insert(f[1].to_string(), kind);
        }
        Ok(PredicateTable { preds })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConvertError::Table {
            line: 0,
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, functor: &str) -> Option<&PredKind> {
        self.preds.get(functor)
    }
}

#[derive(Debug)]
enum Goal {
    Type(String, String),
    Adj(String, String),
    Rel { rel: String, a: String, b: String },
    Const(String, String, String),
    Sup { op: String, var: String, inner: Vec<Goal> },
    Aggr { op: AggrOp, var: String, inner: Vec<Goal>, result: String },
    Attr { attr: String, subj: String, result: String },
}

fn var_of(t: &GeoTerm) -> Result<String> {
    match t {
        GeoTerm::Var(v) => Ok(v.clone()),
        other => Err(ConvertError::Unsupported(format!("expected a variable, got {other}"))),
    }
}

fn const_text(t: &GeoTerm) -> Result<String> {
    match t {
        GeoTerm::Atom(a) | GeoTerm::Number(a) => Ok(a.replace('_', " ")),
        other => Err(ConvertError::Unsupported(format!("expected a constant, got {other}"))),
    }
}

fn goals(term: &GeoTerm, table: &PredicateTable) -> Result<Vec<Goal>> {
    let (functor, args) = match term {
        GeoTerm::Conj(ts) => {
            let mut out = Vec::new();
            for t in ts {
                out.extend(goals(t, table)?);
            }
            return Ok(out);
        }
        GeoTerm::Compound { functor, args } => (functor.as_str(), args.as_slice()),
        GeoTerm::Atom(a) => (a.as_str(), &[][..]),
        other => return Err(ConvertError::Unsupported(format!("goal {other}"))),
    };
    if functor == "const" {
        let [v, c] = args else {
            return Err(ConvertError::Unsupported(format!("{term}")));
        };
        let GeoTerm::Compound { functor: kind, args: cargs } = c else {
            return Err(ConvertError::Unsupported(format!("constant {c}")));
        };
        let Some(PredKind::Const(ty)) = table.get(kind) else {
            return Err(ConvertError::UnmappedPredicate(kind.clone()));
        };
        let value = const_text(cargs.first().ok_or_else(|| {
            ConvertError::Unsupported(format!("empty constant {c}"))
        })?)?;
        return Ok(vec![Goal::Const(var_of(v)?, ty.clone(), value)]);
    }
    let kind = table
        .get(functor)
        .ok_or_else(|| ConvertError::UnmappedPredicate(functor.to_string()))?;
    let bad = || ConvertError::Unsupported(format!("{term}"));
    Ok(vec![match (kind, args) {
        (PredKind::Type(t), [v]) => Goal::Type(var_of(v)?, t.clone()),
        (PredKind::Adjective(a), [v]) => Goal::Adj(var_of(v)?, a.clone()),
        (PredKind::Relation(r), [a, b]) => Goal::Rel {
            rel: r.clone(),
            a: var_of(a)?,
            b: var_of(b)?,
        },
        (PredKind::Superlative(op), [v, inner]) => Goal::Sup {
            op: op.clone(),
            var: var_of(v)?,
            inner: goals(inner, table)?,
        },
        (PredKind::Aggregate(op), [v, inner, r]) => Goal::Aggr {
            op: *op,
            var: var_of(v)?,
            inner: goals(inner, table)?,
            result: var_of(r)?,
        },
        (PredKind::Attribute(a), [s, r]) => Goal::Attr {
            attr: a.clone(),
            subj: var_of(s)?,
            result: var_of(r)?,
        },
        _ => return Err(bad()),
    }])
}

fn all_goals<'a>(gs: &'a [Goal], out: &mut Vec<&'a Goal>) {
    for g in gs {
        out.push(g);
        match g {
            Goal::Sup { inner, .. } | Goal::Aggr { inner, .. } => all_goals(inner, out),
            _ => {}
        }
    }
}

struct GeoBuilder<'a> {
    kg: &'a KnowledgeGraph,
    types: HashMap<String, String>,
    // result var of an attribute goal -> subject var
    value_of: HashMap<String, String>,
    used: HashSet<*const Goal>,
}

impl GeoBuilder<'_> {
    fn infer_types(&mut self, flat: &[&Goal]) {
        for g in flat {
            match g {
                Goal::Type(v, t) | Goal::Const(v, t, _) => {
                    self.types.entry(v.clone()).or_insert_with(|| t.clone());
                }
                Goal::Attr { subj, result, .. } => {
                    self.value_of.insert(result.clone(), subj.clone());
                }
                _ => {}
            }
        }
        loop {
            let mut changed = false;
            for g in flat {
                let Goal::Rel { rel, a, b } = g else { continue };
                let sigs: Vec<(String, String)> = self
                    .kg
                    .entity_signatures(rel)
                    .map(|s| (s.domain.clone(), s.range_type().unwrap_or_default().to_string()))
                    .collect();
                let (ta, tb) = (self.types.get(a).cloned(), self.types.get(b).cloned());
                let pick = |known: &str, from_domain: bool| -> Option<String> {
                    let cands: HashSet<&String> = sigs
                        .iter()
                        .filter(|(d, r)| if from_domain { d == known } else { r == known })
                        .map(|(d, r)| if from_domain { r } else { d })
                        .collect();
                    (cands.len() == 1).then(|| cands.into_iter().next().expect("one").clone())
                };
                if let (Some(t), None) = (&ta, &tb) {
                    if let Some(u) = pick(t, true) {
                        self.types.insert(b.clone(), u);
                        changed = true;
                    }
                } else if let (None, Some(t)) = (&ta, &tb) {
                    if let Some(u) = pick(t, false) {
                        self.types.insert(a.clone(), u);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
    }

    fn ty(&self, v: &str) -> Result<String> {
        self.types
            .get(v)
            .cloned()
            .ok_or_else(|| ConvertError::FreeVariable(v.to_string()))
    }

    fn take(&mut self, g: &Goal) -> bool {
        self.used.insert(g as *const Goal)
    }

    fn is_used(&self, g: &Goal) -> bool {
        self.used.contains(&(g as *const Goal))
    }

    fn build(&mut self, var: &str, scope: &[Goal], visited: &mut HashSet<String>) -> Result<BlockSequence> {
        visited.insert(var.to_string());
        let wrapper = scope.iter().find(|g| {
            !self.is_used(g)
                && match g {
                    Goal::Sup { var: v, .. } => v == var,
                    Goal::Aggr { result, .. } | Goal::Attr { result, .. } => result == var,
                    _ => false,
                }
        });
        if let Some(w) = wrapper {
            self.take(w);
            for g in scope {
                if let Goal::Type(v, _) = g {
                    if v == var {
                        self.take(g);
                    }
                }
            }
            return match w {
                Goal::Sup { op, inner, .. } => {
                    let mut out = vec![SemanticBlock::Ordinal {
                        op: op.clone(),
                        ty: self.ty(var)?,
                    }];
                    out.extend(self.build(var, inner, visited)?);
                    Ok(out)
                }
                Goal::Aggr {
                    op: AggrOp::Count,
                    var: inner_var,
                    inner,
                    ..
                } => {
                    let mut out = vec![SemanticBlock::Aggr {
                        op: AggrOp::Count,
                        ty: self.ty(inner_var)?,
                    }];
                    out.extend(self.build(inner_var, inner, visited)?);
                    Ok(out)
                }
                Goal::Aggr {
                    op: AggrOp::Average,
                    var: inner_var,
                    inner,
                    ..
                } => {
                    let subj = self
                        .value_of
                        .get(inner_var)
                        .cloned()
                        .ok_or_else(|| ConvertError::Unsupported("average over entities".into()))?;
                    let mut out = vec![SemanticBlock::Aggr {
                        op: AggrOp::Average,
                        ty: self.ty(&subj)?,
                    }];
                    out.extend(self.build(inner_var, inner, visited)?);
                    Ok(out)
                }
                Goal::Attr { attr, subj, .. } => {
                    let mut out = vec![SemanticBlock::Literal {
                        attr: attr.clone(),
                        ty: self.ty(subj)?,
                    }];
                    out.extend(self.build(subj, scope, visited)?);
                    Ok(out)
                }
                _ => unreachable!("wrapper kinds"),
            };
        }

        let ty = self.ty(var)?;
        let mut out = Vec::new();
        let mut branches: Vec<BlockSequence> = Vec::new();
        for g in scope {
            if self.is_used(g) {
                continue;
            }
            match g {
                Goal::Type(v, _) if v == var => {
                    self.take(g);
                }
                Goal::Adj(v, a) if v == var => {
                    self.take(g);
                    out.push(SemanticBlock::Literal {
                        attr: a.clone(),
                        ty: ty.clone(),
                    });
                }
                Goal::Const(v, _, value) if v == var => {
                    self.take(g);
                    branches.push(vec![SemanticBlock::Entity {
                        ty: ty.clone(),
                        constraint: Some((ID_ATTR.to_string(), Literal::Text(value.clone()))),
                    }]);
                }
                Goal::Rel { rel, a, b } if (a == var) != (b == var) || (a == var && b == var) => {
                    let other = if a == var { b } else { a };
                    if visited.contains(other) {
                        continue;
                    }
                    self.take(g);
                    let mut br = vec![SemanticBlock::Relation {
                        out: ty.clone(),
                        rel: rel.clone(),
                        input: self.ty(other)?,
                    }];
                    br.extend(self.build(other, scope, visited)?);
                    branches.push(br);
                }
                _ => {}
            }
        }
        match branches.len() {
            0 => out.push(SemanticBlock::Entity {
                ty: ty.clone(),
                constraint: None,
            }),
            n => {
                for (i, br) in branches.into_iter().enumerate() {
                    if i + 1 < n {
                        out.push(SemanticBlock::Join {
                            op: JoinOp::Intersection,
                            ty: ty.clone(),
                        });
                    }
                    out.extend(br);
                }
            }
        }
        Ok(out)
    }
}

/// Converts `answer(A, Body)` into blocks by a preorder walk of the
/// variable-dependency tree rooted at `A`.
pub fn geo_to_blocks(term: &GeoTerm, kg: &KnowledgeGraph, table: &PredicateTable) -> Result<BlockSequence> {
    let GeoTerm::Compound { functor, args } = term else {
        return Err(ConvertError::Unsupported("root must be answer/2".into()));
    };
    let [ans, body] = args.as_slice() else {
        return Err(ConvertError::Unsupported("root must be answer/2".into()));
    };
    if functor != "answer" {
        return Err(ConvertError::Unsupported("root must be answer/2".into()));
    }
    let ans = var_of(ans)?;
    let scope = goals(body, table)?;
    let mut flat = Vec::new();
    all_goals(&scope, &mut flat);
    let mut b = GeoBuilder {
        kg,
        types: HashMap::new(),
        value_of: HashMap::new(),
        used: HashSet::new(),
    };
    b.infer_types(&flat);
    if !flat.iter().any(|g| mentions(g, &ans)) {
        return Err(ConvertError::FreeVariable(ans));
    }
    let out = b.build(&ans, &scope, &mut HashSet::new())?;
    if let Some(g) = flat.iter().find(|g| !b.is_used(g)) {
        return Err(ConvertError::Unsupported(format!("goal not connected to the answer: {g:?}")));
    }
    Ok(out)
}

fn mentions(g: &Goal, v: &str) -> bool {
    match g {
        Goal::Type(x, _) | Goal::Adj(x, _) | Goal::Const(x, _, _) => x == v,
        Goal::Rel { a, b, .. } => a == v || b == v,
        Goal::Sup { var, .. } => var == v,
        Goal::Aggr { result, .. } => result == v,
        Goal::Attr { subj, result, .. } => subj == v || result == v,
    }
}

// ---------------------------------------------------------------- ATIS

#[derive(Clone, Debug, PartialEq)]
pub enum LambdaTerm {
    Lambda { var: String, body: Box<LambdaTerm> },
    And(Vec<LambdaTerm>),
    Pred { name: String, args: Vec<LambdaTerm> },
    Var(String),
    Const { value: String, sort: String },
}

pub fn parse_atis(text: &str) -> Result<LambdaTerm> {
    let mut sc = Scanner {
        src: text.as_bytes(),
        pos: 0,
    };
    let t = lambda_term(&mut sc)?;
    if sc.peek().is_some() {
        return sc.err("trailing input");
    }
    Ok(t)
}

fn lambda_var(sc: &mut Scanner<'_>) -> Result<String> {
    sc.eat(b'$')?;
    sc.ws();
    let n = sc.run(|c| c.is_ascii_digit());
    if n.is_empty() {
        return sc.err("expected variable number");
    }
    Ok(format!("${n}"))
}

fn lambda_term(sc: &mut Scanner<'_>) -> Result<LambdaTerm> {
    match sc.peek() {
        None => sc.err("unexpected end of input"),
        Some(b'$') => Ok(LambdaTerm::Var(lambda_var(sc)?)),
        Some(b'(') => {
            sc.pos += 1;
            sc.ws();
            let name = sc.run(|c| word_char(c) || c == b'.');
            if name.is_empty() {
                return sc.err("expected predicate name");
            }
            let bare = name.trim_start_matches('_').to_string();
            match bare.as_str() {
                "lambda" => {
                    let var = lambda_var(sc)?;
                    sc.ws();
                    sc.run(|c| c.is_ascii_alphabetic());
                    let body = lambda_term(sc)?;
                    sc.eat(b')')?;
                    Ok(LambdaTerm::Lambda {
                        var,
                        body: Box::new(body),
                    })
                }
                "and" => {
                    let mut items = Vec::new();
                    while sc.peek() != Some(b')') {
                        if sc.peek().is_none() {
                            return sc.err("expected ')' but input ended");
                        }
                        items.push(lambda_term(sc)?);
                    }
                    sc.pos += 1;
                    Ok(LambdaTerm::And(items))
                }
                _ => {
                    let mut args = Vec::new();
                    while sc.peek() != Some(b')') {
                        if sc.peek().is_none() {
                            return sc.err("expected ')' but input ended");
                        }
                        args.push(lambda_term(sc)?);
                    }
                    sc.pos += 1;
                    Ok(LambdaTerm::Pred { name: bare, args })
                }
            }
        }
        Some(c) if word_char(c) => {
            let value = sc.run(|c| word_char(c) || c == b'.');
            if sc.peek() != Some(b':') {
                return sc.err("expected ':' and a sort after constant");
            }
            sc.pos += 1;
            sc.ws();
            let sort = sc.run(word_char);
            if sort.is_empty() {
                return sc.err("expected sort");
            }
            Ok(LambdaTerm::Const {
                value: value.to_lowercase(),
                sort: sort.trim_start_matches('_').to_string(),
            })
        }
        Some(c) => sc.err(format!("unexpected '{}'", c as char)),
    }
}

fn atis_value(value: &str, sort: &str, kind: LiteralKind) -> Result<Literal> {
    let v = value.replace('_', " ");
    let v = if sort == "dn" && v.chars().all(|c| c.is_ascii_digit()) && v.len() < 2 {
        format!("{v:0>2}")
    } else {
        v
    };
    match kind {
        LiteralKind::Text => Ok(Literal::Text(v)),
        k => k
            .parse_value(&v)
            .ok_or_else(|| ConvertError::Unsupported(format!("{value}:{sort} is not {k}"))),
    }
}

pub fn atis_to_blocks(term: &LambdaTerm, kg: &KnowledgeGraph) -> Result<BlockSequence> {
    let LambdaTerm::Lambda { var, body } = term else {
        return Err(ConvertError::Unsupported("root must be a lambda".into()));
    };
    let conjuncts: Vec<&LambdaTerm> = match body.as_ref() {
        LambdaTerm::And(items) => items.iter().collect(),
        other => vec![other],
    };
    let on_var = |t: &LambdaTerm| matches!(t, LambdaTerm::Var(v) if v == var);
    let head = conjuncts.iter().find_map(|c| match c {
        LambdaTerm::Pred { name, args } if args.len() == 1 && on_var(&args[0]) && kg.has_type(name) => {
            Some(name.clone())
        }
        _ => None,
    });
    let Some(head) = head else {
        return Err(ConvertError::Unsupported(
            "lambda without a type predicate on its variable".into(),
        ));
    };
    let mut out = vec![SemanticBlock::Entity {
        ty: head.clone(),
        constraint: None,
    }];
    let mut seen_head = false;
    for c in conjuncts {
        let LambdaTerm::Pred { name, args } = c else {
            return Err(ConvertError::Unsupported(format!("conjunct {c:?}")));
        };
        match args.as_slice() {
            [v] if on_var(v) && *name == head && !seen_head => seen_head = true,
            [v] if on_var(v) => match kg.literal_kind(name, &head) {
                Some(LiteralKind::Boolean) => out.push(SemanticBlock::Entity {
                    ty: head.clone(),
                    constraint: Some((name.clone(), Literal::Integer(1))),
                }),
                _ => return Err(ConvertError::UnmappedPredicate(name.clone())),
            },
            [v, LambdaTerm::Const { value, sort }] if on_var(v) => {
                if let Some(sig) = kg.entity_signatures(name).find(|s| s.domain == head) {
                    let range = sig.range_type().expect("entity relation").to_string();
                    out.push(SemanticBlock::Relation {
                        out: head.clone(),
                        rel: name.clone(),
                        input: range.clone(),
                    });
                    out.push(SemanticBlock::Entity {
                        ty: range,
                        constraint: Some((ID_ATTR.into(), atis_value(value, sort, LiteralKind::Text)?)),
                    });
                } else if let Some(kind) = kg.literal_kind(name, &head) {
                    out.push(SemanticBlock::Entity {
                        ty: head.clone(),
                        constraint: Some((name.clone(), atis_value(value, sort, kind)?)),
                    });
                } else {
                    return Err(ConvertError::UnmappedPredicate(name.clone()));
                }
            }
            _ => return Err(ConvertError::Unsupported(format!("conjunct '{name}'"))),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- lengths

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LengthReport {
    pub question_tokens: usize,
    pub logical_form_tokens: usize,
    pub block_count: usize,
}

/// Logical-form token count: each identifier or number, quoted constant,
/// parenthesis, comma and other punctuation mark is one token.
pub fn logical_form_tokens(lf: &str) -> usize {
    let b = lf.as_bytes();
    let (mut i, mut n) = (0, 0);
    while i < b.len() {
        let c = b[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        n += 1;
        if word_char(c) || c == b'.' {
            while i < b.len() && (word_char(b[i]) || b[i] == b'.') {
                i += 1;
            }
        } else if c == b'\'' {
            i += 1;
            while i < b.len() && b[i] != b'\'' {
                i += 1;
            }
            i += 1;
        } else {
            i += 1;
        }
    }
    n
}

pub fn length_report(question: &str, logical_form: &str, blocks: &[SemanticBlock]) -> LengthReport {
    LengthReport {
        question_tokens: question.split_whitespace().count(),
        logical_form_tokens: logical_form_tokens(logical_form),
        block_count: blocks.len(),
    }
}

/// `blocks / logical_form` as a percentage rounded to one decimal.
pub fn length_ratio_percent(blocks: f64, logical_form: f64) -> f64 {
    (blocks / logical_form * 1000.0).round() / 10.0
}
