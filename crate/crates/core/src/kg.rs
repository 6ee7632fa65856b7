//! Typed knowledge graph: types, relation signatures, entities with literal
//! attributes, and entity-to-entity facts.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use indexmap::IndexSet;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KgError {
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: schema error: {message}")]
    Schema { line: usize, message: String },
    #[error("unknown type '{0}'")]
    UnknownType(String),
    #[error("unknown relation '{0}'")]
    UnknownRelation(String),
    #[error("relation '{0}' is literal-valued")]
    LiteralRelation(String),
    #[error("relation '{0}' is entity-valued")]
    EntityRelation(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, KgError>;

/// Attribute name every entity answers with its own id.
pub const ID_ATTR: &str = "id";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LiteralKind {
    Text,
    Integer,
    Decimal,
    Boolean,
}

impl LiteralKind {
    pub fn name(self) -> &'static str {
        match self {
            LiteralKind::Text => "text",
            LiteralKind::Integer => "integer",
            LiteralKind::Decimal => "decimal",
            LiteralKind::Boolean => "boolean",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "text" => LiteralKind::Text,
            "integer" => LiteralKind::Integer,
            "decimal" => LiteralKind::Decimal,
            "boolean" => LiteralKind::Boolean,
            _ => return None,
        })
    }

    pub fn is_numeric(self) -> bool {
        matches!(self, LiteralKind::Integer | LiteralKind::Decimal)
    }

    /// Parses a value written in the file syntax of this kind.
    pub fn parse_value(self, s: &str) -> Option<Literal> {
        match self {
            LiteralKind::Text => {
                let inner = s.strip_prefix('\'')?.strip_suffix('\'')?;
                (!inner.contains('\'')).then(|| Literal::Text(inner.to_lowercase()))
            }
            LiteralKind::Integer => s.parse().ok().map(Literal::Integer),
            LiteralKind::Decimal => s
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .map(Literal::Decimal),
            LiteralKind::Boolean => match s {
                "0" => Some(Literal::Boolean(false)),
                "1" => Some(Literal::Boolean(true)),
                _ => None,
            },
        }
    }
}

impl fmt::Display for LiteralKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Values compare by [`Literal::loosely_eq`].
#[derive(Clone, Debug)]
pub enum Literal {
    Text(String),
    Integer(i64),
    Decimal(f64),
    Boolean(bool),
}

impl Literal {
    pub fn kind(&self) -> LiteralKind {
        match self {
            Literal::Text(_) => LiteralKind::Text,
            Literal::Integer(_) => LiteralKind::Integer,
            Literal::Decimal(_) => LiteralKind::Decimal,
            Literal::Boolean(_) => LiteralKind::Boolean,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Literal::Integer(i) => Some(*i as f64),
            Literal::Decimal(x) => Some(*x),
            Literal::Boolean(b) => Some(f64::from(u8::from(*b))),
            Literal::Text(_) => None,
        }
    }

    /// Equality across the lexical forms a value can take in block text:
    /// `1` matches `true`, `3` matches `3.0`, text ignores case.
    pub fn loosely_eq(&self, other: &Literal) -> bool {
        match (self, other) {
            (Literal::Text(a), Literal::Text(b)) => a.eq_ignore_ascii_case(b),
            (Literal::Text(_), _) | (_, Literal::Text(_)) => false,
            (a, b) => a.as_f64() == b.as_f64(),
        }
    }

    /// Converts to `kind` when the value is representable there.
    pub fn coerce(&self, kind: LiteralKind) -> Option<Literal> {
        if self.kind() == kind {
            return Some(self.clone());
        }
        match (self, kind) {
            (Literal::Integer(i), LiteralKind::Decimal) => Some(Literal::Decimal(*i as f64)),
            (Literal::Integer(0), LiteralKind::Boolean) => Some(Literal::Boolean(false)),
            (Literal::Integer(1), LiteralKind::Boolean) => Some(Literal::Boolean(true)),
            (Literal::Decimal(x), LiteralKind::Integer) if x.fract() == 0.0 => {
                Some(Literal::Integer(*x as i64))
            }
            _ => None,
        }
    }
}

impl PartialEq for Literal {
    fn eq(&self, other: &Self) -> bool {
        self.loosely_eq(other)
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Text(s) => write!(f, "'{s}'"),
            Literal::Integer(i) => write!(f, "{i}"),
            Literal::Decimal(x) => write!(f, "{x:?}"),
            Literal::Boolean(b) => write!(f, "{}", u8::from(*b)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Range {
    Type(String),
    Literal(LiteralKind),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RelationSignature {
    pub name: String,
    pub domain: String,
    pub range: Range,
}

impl RelationSignature {
    pub fn is_entity(&self) -> bool {
        matches!(self.range, Range::Type(_))
    }

    pub fn range_type(&self) -> Option<&str> {
        match &self.range {
            Range::Type(t) => Some(t),
            Range::Literal(_) => None,
        }
    }

    pub fn literal_kind(&self) -> Option<LiteralKind> {
        match self.range {
            Range::Literal(k) => Some(k),
            Range::Type(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    pub id: String,
    pub ty: String,
    pub attrs: Vec<(String, Literal)>,
}

impl Entity {
    pub fn attr(&self, name: &str) -> Option<&Literal> {
        self.attrs.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Subjects of facts whose object is in the input set.
    Forward,
    /// Objects of facts whose subject is in the input set.
    Inverse,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Indexes {
    entity: HashMap<String, usize>,
    by_type: BTreeMap<String, BTreeSet<String>>,
    // rel -> object -> subjects
    forward: HashMap<String, HashMap<String, BTreeSet<String>>>,
    // rel -> subject -> objects
    inverse: HashMap<String, HashMap<String, BTreeSet<String>>>,
    // (attr, canonical value) -> entities
    by_value: HashMap<(String, String), BTreeSet<String>>,
}

/// In-memory typed knowledge graph. Immutable once loaded.
#[derive(Clone, Debug, Default)]
pub struct KnowledgeGraph {
    types: IndexSet<String>,
    relations: Vec<RelationSignature>,
    entities: Vec<Entity>,
    facts: Vec<(String, String, String)>,
    idx: Indexes,
}

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        let set = |k: &KnowledgeGraph| {
            (
                k.types.iter().cloned().collect::<BTreeSet<_>>(),
                k.facts.iter().cloned().collect::<BTreeSet<_>>(),
            )
        };
        set(self) == set(other)
            && self.relations.len() == other.relations.len()
            && self.relations.iter().all(|r| other.relations.contains(r))
            && self.entities.len() == other.entities.len()
            && self
                .entities
                .iter()
                .all(|e| other.entity(&e.id).is_some_and(|o| o == e))
    }
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | ' ' | '.' | '-'))
        && !s.starts_with(' ')
        && !s.ends_with(' ')
}

pub fn load_kg(path: impl AsRef<Path>) -> Result<KnowledgeGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| KgError::Io(e.to_string()))?;
    KnowledgeGraph::parse(&text)
}

impl KnowledgeGraph {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kg = KnowledgeGraph::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<String> = trimmed.split('\t').map(|f| f.trim().to_string()).collect();
            kg.record(line, &fields)?;
        }
        kg.rebuild_indexes();
        Ok(kg)
    }

    fn record(&mut self, line: usize, f: &[String]) -> Result<()> {
        let parse = |m: String| KgError::Parse { line, message: m };
        let schema = |m: String| KgError::Schema { line, message: m };
        let ident = |s: &str| -> Result<String> {
            let s = s.to_lowercase();
            if is_ident(&s) {
                Ok(s)
            } else {
                Err(parse(format!("bad identifier {s:?}")))
            }
        };
        match f[0].as_str() {
            "type" => {
                if f.len() != 2 {
                    return Err(parse("expected `type <name>`".into()));
                }
                let t = ident(&f[1])?;
                if !self.types.insert(t.clone()) {
                    return Err(schema(format!("duplicate type '{t}'")));
                }
            }
            kw @ ("rel" | "attr") => {
                if f.len() != 5 || f[3] != "->" {
                    return Err(parse(format!("expected `{kw} <name> <domain> -> <range>`")));
                }
                let (name, domain) = (ident(&f[1])?, ident(&f[2])?);
                if name == ID_ATTR {
                    return Err(schema("'id' is reserved".into()));
                }
                if !self.types.contains(&domain) {
                    return Err(schema(format!("undeclared type '{domain}'")));
                }
                let range = if kw == "rel" {
                    let r = ident(&f[4])?;
                    if !self.types.contains(&r) {
                        return Err(schema(format!("undeclared type '{r}'")));
                    }
                    Range::Type(r)
                } else {
                    Range::Literal(
                        LiteralKind::from_name(&f[4])
                            .ok_or_else(|| parse(format!("unknown literal kind '{}'", f[4])))?,
                    )
                };
                let sig = RelationSignature {
                    name: name.clone(),
                    domain,
                    range,
                };
                for other in self.relations.iter().filter(|r| r.name == name) {
                    if other.is_entity() != sig.is_entity() {
                        return Err(schema(format!(
                            "'{name}' declared both as entity and literal relation"
                        )));
                    }
                    let clash = if sig.is_entity() {
                        other == &sig
                    } else {
                        other.domain == sig.domain
                    };
                    if clash {
                        return Err(schema(format!("duplicate relation '{name}'")));
                    }
                }
                self.relations.push(sig);
            }
            "ent" => {
                if f.len() < 3 {
                    return Err(parse("expected `ent <id> <type> [attr=value]...`".into()));
                }
                let (id, ty) = (ident(&f[1])?, ident(&f[2])?);
                if !self.types.contains(&ty) {
                    return Err(schema(format!("undeclared type '{ty}'")));
                }
                if self.idx.entity.contains_key(&id) {
                    return Err(schema(format!("duplicate entity id '{id}'")));
                }
                let mut attrs: Vec<(String, Literal)> = Vec::new();
                for a in &f[3..] {
                    let (k, v) = a
                        .split_once('=')
                        .ok_or_else(|| parse(format!("expected attr=value, got {a:?}")))?;
                    let k = ident(k)?;
                    let kind = self.literal_kind(&k, &ty).ok_or_else(|| {
                        schema(format!("'{k}' is not a literal relation on '{ty}'"))
                    })?;
                    let val = kind
                        .parse_value(v)
                        .ok_or_else(|| schema(format!("value {v:?} is not {kind} for '{k}'")))?;
                    if attrs.iter().any(|(n, _)| n == &k) {
                        return Err(schema(format!("duplicate attribute '{k}'")));
                    }
                    attrs.push((k, val));
                }
                self.idx.entity.insert(id.clone(), self.entities.len());
                self.entities.push(Entity { id, ty, attrs });
            }
            "fact" => {
                if f.len() != 4 {
                    return Err(parse("expected `fact <rel> <subj> <obj>`".into()));
                }
                let (rel, s, o) = (ident(&f[1])?, ident(&f[2])?, ident(&f[3])?);
                let sigs: Vec<&RelationSignature> =
                    self.relations.iter().filter(|r| r.name == rel).collect();
                if sigs.is_empty() {
                    return Err(schema(format!("undeclared relation '{rel}'")));
                }
                if !sigs[0].is_entity() {
                    return Err(schema(format!("'{rel}' is a literal relation")));
                }
                let ty_of = |id: &str| -> Result<String> {
                    self.idx
                        .entity
                        .get(id)
                        .map(|&i| self.entities[i].ty.clone())
                        .ok_or_else(|| schema(format!("unknown entity '{id}'")))
                };
                let (ts, to) = (ty_of(&s)?, ty_of(&o)?);
                if !sigs
                    .iter()
                    .any(|r| r.domain == ts && r.range_type() == Some(to.as_str()))
                {
                    return Err(schema(format!("'{rel}' has no signature {ts} -> {to}")));
                }
                self.facts.push((rel, s, o));
            }
            other => return Err(parse(format!("unknown record kind '{other}'"))),
        }
        Ok(())
    }

    fn rebuild_indexes(&mut self) {
        self.idx = Self::compute_indexes(&self.types, &self.entities, &self.facts);
    }

    fn compute_indexes(
        types: &IndexSet<String>,
        entities: &[Entity],
        facts: &[(String, String, String)],
    ) -> Indexes {
        let mut idx = Indexes::default();
        for t in types {
            idx.by_type.insert(t.clone(), BTreeSet::new());
        }
        for (i, e) in entities.iter().enumerate() {
            idx.entity.insert(e.id.clone(), i);
            idx.by_type.entry(e.ty.clone()).or_default().insert(e.id.clone());
            for (k, v) in &e.attrs {
                idx.by_value
                    .entry((k.clone(), v.to_string()))
                    .or_default()
                    .insert(e.id.clone());
            }
        }
        for (r, s, o) in facts {
            idx.forward
                .entry(r.clone())
                .or_default()
                .entry(o.clone())
                .or_default()
                .insert(s.clone());
            idx.inverse
                .entry(r.clone())
                .or_default()
                .entry(s.clone())
                .or_default()
                .insert(o.clone());
        }
        idx
    }

    /// True when the stored indexes equal ones rebuilt from the raw records.
    pub fn indexes_consistent(&self) -> bool {
        Self::compute_indexes(&self.types, &self.entities, &self.facts) == self.idx
    }

    /// Canonical text form: types, relations, entities, facts.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for t in &self.types {
            out.push_str(&format!("type\t{t}\n"));
        }
        for r in &self.relations {
            match &r.range {
                Range::Type(t) => out.push_str(&format!("rel\t{}\t{}\t->\t{t}\n", r.name, r.domain)),
                Range::Literal(k) => {
                    out.push_str(&format!("attr\t{}\t{}\t->\t{k}\n", r.name, r.domain))
                }
            }
        }
        for e in &self.entities {
            out.push_str(&format!("ent\t{}\t{}", e.id, e.ty));
            for (k, v) in &e.attrs {
                out.push_str(&format!("\t{k}={v}"));
            }
            out.push('\n');
        }
        for (r, s, o) in &self.facts {
            out.push_str(&format!("fact\t{r}\t{s}\t{o}\n"));
        }
        out
    }

    pub fn types(&self) -> impl Iterator<Item = &str> {
        self.types.iter().map(String::as_str)
    }

    pub fn has_type(&self, t: &str) -> bool {
        self.types.contains(t)
    }

    pub fn relations(&self) -> &[RelationSignature] {
        &self.relations
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn facts(&self) -> &[(String, String, String)] {
        &self.facts
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.idx.entity.get(id).map(|&i| &self.entities[i])
    }

    pub fn entity_signatures<'a>(&'a self, rel: &'a str) -> impl Iterator<Item = &'a RelationSignature> {
        self.relations
            .iter()
            .filter(move |r| r.name == rel && r.is_entity())
    }

    pub fn is_entity_relation(&self, rel: &str) -> bool {
        self.entity_signatures(rel).next().is_some()
    }

    pub fn is_literal_relation(&self, rel: &str) -> bool {
        rel == ID_ATTR || self.relations.iter().any(|r| r.name == rel && !r.is_entity())
    }

    /// Kind of attribute `attr` on entities of `ty`; `id` is text everywhere.
    pub fn literal_kind(&self, attr: &str, ty: &str) -> Option<LiteralKind> {
        if attr == ID_ATTR {
            return self.has_type(ty).then_some(LiteralKind::Text);
        }
        self.relations
            .iter()
            .find(|r| r.name == attr && r.domain == ty)
            .and_then(RelationSignature::literal_kind)
    }

    /// Literal relations declared on `ty`, in declaration order (without `id`).
    pub fn attributes_of<'a>(&'a self, ty: &'a str) -> impl Iterator<Item = (&'a str, LiteralKind)> {
        self.relations.iter().filter_map(move |r| match r.range {
            Range::Literal(k) if r.domain == ty => Some((r.name.as_str(), k)),
            _ => None,
        })
    }

    pub fn entities_of_type(&self, t: &str) -> Result<&BTreeSet<String>> {
        self.idx
            .by_type
            .get(t)
            .ok_or_else(|| KgError::UnknownType(t.to_string()))
    }

    pub fn type_of(&self, id: &str) -> Option<&str> {
        self.entity(id).map(|e| e.ty.as_str())
    }

    fn check_entity_rel(&self, rel: &str) -> Result<()> {
        if self.is_entity_relation(rel) {
            Ok(())
        } else if self.relations.iter().any(|r| r.name == rel) {
            Err(KgError::LiteralRelation(rel.to_string()))
        } else {
            Err(KgError::UnknownRelation(rel.to_string()))
        }
    }

    pub fn neighbors(
        &self,
        rel: &str,
        objects: &BTreeSet<String>,
        dir: Direction,
    ) -> Result<BTreeSet<String>> {
        self.check_entity_rel(rel)?;
        let map = match dir {
            Direction::Forward => self.idx.forward.get(rel),
            Direction::Inverse => self.idx.inverse.get(rel),
        };
        let mut out = BTreeSet::new();
        if let Some(map) = map {
            for o in objects {
                if let Some(s) = map.get(o) {
                    out.extend(s.iter().cloned());
                }
            }
        }
        Ok(out)
    }

    /// Values of `attr` over `entities` in set order; entities lacking it
    /// contribute nothing.
    pub fn attr_values(&self, attr: &str, entities: &BTreeSet<String>) -> Result<Vec<Literal>> {
        if attr != ID_ATTR && !self.relations.iter().any(|r| r.name == attr) {
            return Err(KgError::UnknownRelation(attr.to_string()));
        }
        if !self.is_literal_relation(attr) {
            return Err(KgError::EntityRelation(attr.to_string()));
        }
        Ok(entities
            .iter()
            .filter_map(|id| self.attr(id, attr))
            .collect())
    }

    pub fn attr(&self, id: &str, attr: &str) -> Option<Literal> {
        let e = self.entity(id)?;
        if attr == ID_ATTR {
            return Some(Literal::Text(e.id.clone()));
        }
        e.attr(attr).cloned()
    }

    /// Entities whose `attr` equals `value` (after coercion to the stored kind).
    pub fn entities_with(&self, ty: &str, attr: &str, value: &Literal) -> BTreeSet<String> {
        if attr == ID_ATTR {
            return match value {
                Literal::Text(id) => self
                    .entity(&id.to_lowercase())
                    .filter(|e| e.ty == ty)
                    .map(|e| BTreeSet::from([e.id.clone()]))
                    .unwrap_or_default(),
                _ => BTreeSet::new(),
            };
        }
        let Some(kind) = self.literal_kind(attr, ty) else {
            return BTreeSet::new();
        };
        let Some(v) = value.coerce(kind) else {
            return BTreeSet::new();
        };
        let v = match v {
            Literal::Text(s) => Literal::Text(s.to_lowercase()),
            other => other,
        };
        self.idx
            .by_value
            .get(&(attr.to_string(), v.to_string()))
            .map(|s| {
                s.iter()
                    .filter(|id| self.type_of(id) == Some(ty))
                    .cloned()
                    .collect()
            })
            .unwrap_or_default()
    }
}
