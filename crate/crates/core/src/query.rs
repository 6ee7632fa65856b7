//! Assembly of block sequences into query graphs, the legality controller,
//! and execution against a knowledge graph.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::blocks::{
    block_output_type, fills, AggrOp, JoinOp, OutputType, SemanticBlock, SlotType,
};
use crate::kg::{Direction, KgError, KnowledgeGraph, Literal, LiteralKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssemblyError {
    #[error("empty block sequence")]
    Empty,
    #[error("block {index} ({block}) does not type-check against the schema")]
    Untyped { index: usize, block: String },
    #[error("block {index} outputs {found} but the open slot needs {expected}")]
    TypeMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("block {index} outputs {found} and cannot join the root conjunction of {root}")]
    ConjunctionMismatch {
        index: usize,
        root: String,
        found: String,
    },
    #[error("incomplete: {open} open slot(s) remain")]
    Incomplete { open: usize },
}

/// Where a block went when it was pushed onto an [`AssemblyState`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    Root,
    Child { parent: usize, slot: usize },
    Conjunction,
}

/// Stack-based assembly state: open slots with the leftmost on top.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssemblyState {
    stack: Vec<(usize, usize, SlotType)>,
    root: Option<OutputType>,
    nodes: usize,
}

impl AssemblyState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_complete(&self) -> bool {
        self.root.is_some() && self.stack.is_empty()
    }

    pub fn open_slots(&self) -> usize {
        self.stack.len()
    }

    pub fn top(&self) -> Option<&SlotType> {
        self.stack.last().map(|(_, _, s)| s)
    }

    pub fn root_output(&self) -> Option<&OutputType> {
        self.root.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes
    }

    pub fn is_empty(&self) -> bool {
        self.nodes == 0
    }

    /// Open slots from the bottom of the stack to the top.
    pub fn open_slot_types(&self) -> impl Iterator<Item = &SlotType> {
        self.stack.iter().map(|(_, _, s)| s)
    }

    /// Fewest further blocks needed to close every open slot.
    pub fn min_completion(&self) -> usize {
        self.stack
            .iter()
            .map(|(_, _, s)| match s {
                SlotType::Entities(_) => 1,
                SlotType::Values(_) => 2,
            })
            .sum()
    }

    /// Places `block` given its output type, as node number `self.len()`.
    pub fn push_typed<V>(
        &mut self,
        block: &SemanticBlock<V>,
        out: OutputType,
    ) -> Result<Placement, AssemblyError>
    where
        V: fmt::Display,
    {
        let index = self.nodes;
        let placement = if self.root.is_none() {
            self.root = Some(out);
            Placement::Root
        } else if let Some((parent, slot, ty)) = self.stack.last().cloned() {
            if !fills(&ty, &out) {
                return Err(AssemblyError::TypeMismatch {
                    index,
                    expected: ty.to_string(),
                    found: out.to_string(),
                });
            }
            self.stack.pop();
            Placement::Child { parent, slot }
        } else {
            let root = self.root.as_ref().expect("root set");
            match root {
                OutputType::EntitySet(_) if *root == out => Placement::Conjunction,
                _ => {
                    return Err(AssemblyError::ConjunctionMismatch {
                        index,
                        root: root.to_string(),
                        found: out.to_string(),
                    })
                }
            }
        };
        for (i, s) in block.slots().into_iter().enumerate().rev() {
            self.stack.push((index, i, s));
        }
        self.nodes += 1;
        Ok(placement)
    }

    pub fn push<V: fmt::Display>(
        &mut self,
        block: &SemanticBlock<V>,
        kg: &KnowledgeGraph,
    ) -> Result<Placement, AssemblyError> {
        let out = block_output_type(block, kg).ok_or_else(|| AssemblyError::Untyped {
            index: self.nodes,
            block: block.to_string(),
        })?;
        self.push_typed(block, out)
    }
}

/// The set of acceptable next blocks for an assembly state.
#[derive(Clone, Debug, PartialEq)]
pub enum LegalNext {
    /// Nothing placed yet: any schema-valid block.
    Start,
    /// The open slot on top of the stack.
    Slot(SlotType),
    /// Stack empty under an entity-set root: blocks producing that set.
    Conjunction(String),
    /// Stack empty under a non-entity root: only end of sequence.
    Closed,
}

impl LegalNext {
    pub fn admits(&self, out: &OutputType) -> bool {
        match self {
            LegalNext::Start => true,
            LegalNext::Slot(s) => fills(s, out),
            LegalNext::Conjunction(t) => matches!(out, OutputType::EntitySet(u) if u == t),
            LegalNext::Closed => false,
        }
    }

    /// Whether the sequence may end here.
    pub fn allows_end(&self) -> bool {
        matches!(self, LegalNext::Conjunction(_) | LegalNext::Closed)
    }
}

pub fn legal_next(state: &AssemblyState) -> LegalNext {
    match (&state.root, state.top()) {
        (None, _) => LegalNext::Start,
        (Some(_), Some(slot)) => LegalNext::Slot(slot.clone()),
        (Some(OutputType::EntitySet(t)), None) => LegalNext::Conjunction(t.clone()),
        (Some(_), None) => LegalNext::Closed,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryNode {
    pub block: SemanticBlock,
    pub output: OutputType,
    /// Child node per slot, left to right.
    pub children: Vec<usize>,
}

/// A rooted operator graph. Node 0 is the root; `conjuncts` are nodes whose
/// entity sets intersect with the root's.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticQueryGraph {
    pub nodes: Vec<QueryNode>,
    pub conjuncts: Vec<usize>,
}

pub fn assemble(seq: &[SemanticBlock], kg: &KnowledgeGraph) -> Result<SemanticQueryGraph, AssemblyError> {
    if seq.is_empty() {
        return Err(AssemblyError::Empty);
    }
    let mut state = AssemblyState::new();
    let mut nodes: Vec<QueryNode> = Vec::with_capacity(seq.len());
    let mut conjuncts = Vec::new();
    for block in seq {
        let output = block_output_type(block, kg).ok_or_else(|| AssemblyError::Untyped {
            index: nodes.len(),
            block: block.to_string(),
        })?;
        let placement = state.push_typed(block, output.clone())?;
        let me = nodes.len();
        match placement {
            Placement::Root => {}
            Placement::Child { parent, slot } => nodes[parent].children[slot] = me,
            Placement::Conjunction => conjuncts.push(me),
        }
        nodes.push(QueryNode {
            children: vec![usize::MAX; block.slots().len()],
            block: block.clone(),
            output,
        });
    }
    if !state.is_complete() {
        return Err(AssemblyError::Incomplete {
            open: state.open_slots(),
        });
    }
    Ok(SemanticQueryGraph { nodes, conjuncts })
}

impl SemanticQueryGraph {
    pub fn root(&self) -> &QueryNode {
        &self.nodes[0]
    }

    /// Indented tree rendering; conjuncts are marked with `&`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_node(0, 0, "", &mut out);
        for &c in &self.conjuncts {
            self.render_node(c, 1, "& ", &mut out);
        }
        out
    }

    fn render_node(&self, n: usize, depth: usize, mark: &str, out: &mut String) {
        let node = &self.nodes[n];
        out.push_str(&format!(
            "{}{mark}[{n}] {}  -> {}\n",
            "  ".repeat(depth),
            node.block,
            node.output
        ));
        for &c in &node.children {
            self.render_node(c, depth + 1, "", out);
        }
    }

    /// Bracketed shape such as `aggr(join(entity, relation(entity)))`.
    pub fn shape(&self) -> String {
        fn go(g: &SemanticQueryGraph, n: usize) -> String {
            let node = &g.nodes[n];
            let name = node.block.pattern().name();
            if node.children.is_empty() {
                name.to_string()
            } else {
                let kids: Vec<String> = node.children.iter().map(|&c| go(g, c)).collect();
                format!("{name}({})", kids.join(", "))
            }
        }
        let mut s = go(self, 0);
        for &c in &self.conjuncts {
            s.push_str(" & ");
            s.push_str(&go(self, c));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extreme {
    Max,
    Min,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrdinalEntry {
    pub surface: String,
    pub ty: String,
    pub attr: String,
    pub extreme: Extreme,
}

/// Maps (surface superlative, type) to a key attribute and direction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrdinalLexicon {
    entries: Vec<OrdinalEntry>,
}

impl Default for OrdinalLexicon {
    fn default() -> Self {
        Self::parse(DEFAULT_ORDINALS).expect("default ordinal lexicon")
    }
}

pub const DEFAULT_ORDINALS: &str = "\
ordinal smallest state area min
ordinal largest state area max
ordinal smallest city population min
ordinal biggest city population max
ordinal longest river len max
ordinal shortest river len min
";

#[derive(Debug, Error, Clone, PartialEq)]
#[error("ordinal lexicon line {line}: {message}")]
pub struct OrdinalLexiconError {
    pub line: usize,
    pub message: String,
}

impl OrdinalLexicon {
    pub fn parse(text: &str) -> Result<Self, OrdinalLexiconError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let err = |m: &str| OrdinalLexiconError {
                line: i + 1,
                message: m.to_string(),
            };
            if f.len() != 5 || f[0] != "ordinal" {
                return Err(err("expected `ordinal <surface> <type> <attr> max|min`"));
            }
            let extreme = match f[4] {
                "max" => Extreme::Max,
                "min" => Extreme::Min,
                _ => return Err(err("direction must be max or min")),
            };
            entries.push(OrdinalEntry {
                surface: f[1].to_lowercase(),
                ty: f[2].to_lowercase(),
                attr: f[3].to_lowercase(),
                extreme,
            });
        }
        Ok(OrdinalLexicon { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, OrdinalLexiconError> {
        let text = std::fs::read_to_string(path).map_err(|e| OrdinalLexiconError {
            line: 0,
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn lookup(&self, surface: &str, ty: &str) -> Option<&OrdinalEntry> {
        self.entries.iter().find(|e| e.surface == surface && e.ty == ty)
    }

    pub fn entries(&self) -> &[OrdinalEntry] {
        &self.entries
    }

    /// Surface names usable on `ty`.
    pub fn surfaces_for<'a>(&'a self, ty: &'a str) -> impl Iterator<Item = &'a str> {
        self.entries
            .iter()
            .filter(move |e| e.ty == ty)
            .map(|e| e.surface.as_str())
    }
}

/// Result of executing a query graph.
#[derive(Clone, Debug)]
pub enum AnswerSet {
    Entities(BTreeSet<String>),
    Values(Vec<Literal>),
    Scalar(f64),
}

const VALUE_TOL: f64 = 1e-9;

fn sorted_values(v: &[Literal]) -> Vec<Literal> {
    let mut v = v.to_vec();
    v.sort_by(|a, b| match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.to_string().cmp(&b.to_string()),
    });
    v
}

impl PartialEq for AnswerSet {
    /// Entity sets as sets, values as sorted lists within 1e-9, scalars
    /// within 1e-9 (counts are exact integers).
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (AnswerSet::Entities(a), AnswerSet::Entities(b)) => a == b,
            (AnswerSet::Values(a), AnswerSet::Values(b)) => {
                a.len() == b.len()
                    && sorted_values(a)
                        .iter()
                        .zip(sorted_values(b).iter())
                        .all(|(x, y)| match (x.as_f64(), y.as_f64()) {
                            (Some(p), Some(q)) => (p - q).abs() <= VALUE_TOL,
                            _ => x == y,
                        })
            }
            (AnswerSet::Scalar(a), AnswerSet::Scalar(b)) => (a - b).abs() <= VALUE_TOL,
            _ => false,
        }
    }
}

impl fmt::Display for AnswerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnswerSet::Entities(s) => {
                let v: Vec<&str> = s.iter().map(String::as_str).collect();
                write!(f, "{{{}}}", v.join(", "))
            }
            AnswerSet::Values(v) => {
                let v: Vec<String> = sorted_values(v).iter().map(|x| x.to_string()).collect();
                write!(f, "[{}]", v.join(", "))
            }
            AnswerSet::Scalar(x) if x.fract() == 0.0 && x.abs() < 1e15 => write!(f, "{}", *x as i64),
            AnswerSet::Scalar(x) => write!(f, "{x}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("no ordinal lexicon entry for '{op}' on {ty}")]
    MissingOrdinal { op: String, ty: String },
    #[error("average needs a numeric value projection")]
    AverageOfEntities,
    #[error("average of an empty set")]
    EmptyAverage,
    #[error("ordinal key '{attr}' on {ty} is not numeric")]
    NonNumericKey { attr: String, ty: String },
    #[error(transparent)]
    Kg(#[from] KgError),
}

fn entities_of(a: AnswerSet) -> BTreeSet<String> {
    match a {
        AnswerSet::Entities(s) => s,
        _ => unreachable!("slot typing guarantees an entity set"),
    }
}

/// Evaluates every node bottom-up; returns each node's own answer (before
/// conjunction) and the final answer at the root.
pub fn execute_traced(
    graph: &SemanticQueryGraph,
    kg: &KnowledgeGraph,
    ordinals: &OrdinalLexicon,
) -> Result<(Vec<AnswerSet>, AnswerSet), ExecError> {
    let mut results: Vec<Option<AnswerSet>> = vec![None; graph.nodes.len()];
    // Children always have larger indices than their parents.
    for n in (0..graph.nodes.len()).rev() {
        let node = &graph.nodes[n];
        let child = |i: usize| results[node.children[i]].clone().expect("child evaluated");
        let value = match &node.block {
            SemanticBlock::Entity { ty, constraint: None } => {
                AnswerSet::Entities(kg.entities_of_type(ty)?.clone())
            }
            SemanticBlock::Entity {
                ty,
                constraint: Some((attr, v)),
            } => AnswerSet::Entities(kg.entities_with(ty, attr, v)),
            SemanticBlock::Relation { out, rel, input } => {
                let set = entities_of(child(0));
                let forward = kg
                    .entity_signatures(rel)
                    .any(|s| s.domain == *out && s.range_type() == Some(input.as_str()));
                let dir = if forward {
                    Direction::Forward
                } else {
                    Direction::Inverse
                };
                let found = kg.neighbors(rel, &set, dir)?;
                AnswerSet::Entities(
                    found
                        .into_iter()
                        .filter(|e| kg.type_of(e) == Some(out.as_str()))
                        .collect(),
                )
            }
            SemanticBlock::Literal { attr, ty } => {
                let set = entities_of(child(0));
                if kg.literal_kind(attr, ty) == Some(LiteralKind::Boolean) {
                    AnswerSet::Entities(
                        set.into_iter()
                            .filter(|e| matches!(kg.attr(e, attr), Some(Literal::Boolean(true))))
                            .collect(),
                    )
                } else {
                    AnswerSet::Values(kg.attr_values(attr, &set)?)
                }
            }
            SemanticBlock::Ordinal { op, ty } => {
                let entry = ordinals.lookup(op, ty).ok_or_else(|| ExecError::MissingOrdinal {
                    op: op.clone(),
                    ty: ty.clone(),
                })?;
                if !kg.literal_kind(&entry.attr, ty).is_some_and(LiteralKind::is_numeric) {
                    return Err(ExecError::NonNumericKey {
                        attr: entry.attr.clone(),
                        ty: ty.clone(),
                    });
                }
                let set = entities_of(child(0));
                let mut best: Option<(f64, &String)> = None;
                for e in &set {
                    let Some(x) = kg.attr(e, &entry.attr).and_then(|v| v.as_f64()) else {
                        continue;
                    };
                    let better = match best {
                        None => true,
                        Some((b, _)) => match entry.extreme {
                            Extreme::Max => x > b,
                            Extreme::Min => x < b,
                        },
                    };
                    if better {
                        best = Some((x, e));
                    }
                }
                AnswerSet::Entities(best.map(|(_, e)| e.clone()).into_iter().collect())
            }
            SemanticBlock::Aggr { op: AggrOp::Count, .. } => {
                AnswerSet::Scalar(entities_of(child(0)).len() as f64)
            }
            SemanticBlock::Aggr { op: AggrOp::Average, .. } => match child(0) {
                AnswerSet::Values(v) => {
                    let xs: Vec<f64> = v.iter().filter_map(Literal::as_f64).collect();
                    if xs.is_empty() {
                        return Err(ExecError::EmptyAverage);
                    }
                    AnswerSet::Scalar(xs.iter().sum::<f64>() / xs.len() as f64)
                }
                _ => return Err(ExecError::AverageOfEntities),
            },
            SemanticBlock::Join { op, .. } => {
                let a = entities_of(child(0));
                let b = entities_of(child(1));
                AnswerSet::Entities(match op {
                    JoinOp::Intersection => a.intersection(&b).cloned().collect(),
                    JoinOp::Union => a.union(&b).cloned().collect(),
                    JoinOp::Exclude => a.difference(&b).cloned().collect(),
                })
            }
        };
        results[n] = Some(value);
    }
    let results: Vec<AnswerSet> = results.into_iter().map(|r| r.expect("evaluated")).collect();
    let mut answer = results[0].clone();
    if let AnswerSet::Entities(root) = &mut answer {
        for &c in &graph.conjuncts {
            if let AnswerSet::Entities(s) = &results[c] {
                root.retain(|e| s.contains(e));
            }
        }
    }
    Ok((results, answer))
}

pub fn execute(
    graph: &SemanticQueryGraph,
    kg: &KnowledgeGraph,
    ordinals: &OrdinalLexicon,
) -> Result<AnswerSet, ExecError> {
    execute_traced(graph, kg, ordinals).map(|(_, a)| a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::parse_blocks;

    fn kg() -> KnowledgeGraph {
        KnowledgeGraph::parse(
            "type\tstate\ntype\tcity\ntype\tcountry\n\
             rel\tloc\tcity\t->\tstate\nrel\tloc\tstate\t->\tcountry\nrel\tnext_to\tstate\t->\tstate\n\
             attr\tarea\tstate\t->\tdecimal\nattr\tpopulation\tcity\t->\tinteger\nattr\tmajor\tcity\t->\tboolean\n\
             ent\tusa\tcountry\n\
             ent\ta\tstate\tarea=10.0\nent\tb\tstate\tarea=5.0\nent\tc\tstate\tarea=5.0\n\
             ent\tx\tcity\tpopulation=100\tmajor=1\nent\ty\tcity\tpopulation=50\tmajor=0\nent\tz\tcity\tpopulation=70\tmajor=1\n\
             fact\tloc\ta\tusa\nfact\tloc\tb\tusa\nfact\tloc\tc\tusa\n\
             fact\tloc\tx\ta\nfact\tloc\ty\tb\nfact\tloc\tz\tc\n\
             fact\tnext_to\ta\tb\nfact\tnext_to\tb\ta\n",
        )
        .unwrap()
    }

    fn run(s: &str) -> AnswerSet {
        let k = kg();
        let g = assemble(&parse_blocks(s).unwrap(), &k).unwrap();
        execute(&g, &k, &OrdinalLexicon::default()).unwrap()
    }

    fn ents(v: &[&str]) -> AnswerSet {
        AnswerSet::Entities(v.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn chain_executes_with_tie_break() {
        // b and c tie on area; the smaller id wins.
        assert_eq!(
            run("literal(major, :city) relation(city, loc, :state) ordinal(smallest, :state) relation(state, loc, :country) entity(country, id, 'usa')"),
            ents(&[])
        );
        assert_eq!(
            run("relation(city, loc, :state) ordinal(smallest, :state) entity(state)"),
            ents(&["y"])
        );
    }

    #[test]
    fn conjunction_intersects_with_root() {
        assert_eq!(run("entity(city) entity(city, major, 1)"), ents(&["x", "z"]));
        assert_eq!(
            run("entity(city) entity(city, major, 1) relation(city, loc, :state) entity(state, id, 'a')"),
            ents(&["x"])
        );
    }

    #[test]
    fn joins_and_aggregates() {
        assert_eq!(
            run("join(exclude, :city, :city) entity(city) entity(city, major, 1)"),
            ents(&["y"])
        );
        assert_eq!(
            run("aggr(count, :city) join(union, :city, :city) entity(city, id, 'x') entity(city, id, 'y')"),
            AnswerSet::Scalar(2.0)
        );
        assert_eq!(
            run("aggr(average, :city) literal(population, :city) entity(city)"),
            AnswerSet::Scalar(220.0 / 3.0)
        );
        assert_eq!(
            run("literal(area, :state) relation(state, next_to, :state) entity(state, id, 'a')"),
            AnswerSet::Values(vec![Literal::Decimal(5.0)])
        );
    }

    #[test]
    fn errors() {
        let k = kg();
        let asm = |s: &str| assemble(&parse_blocks(s).unwrap(), &k);
        assert!(matches!(asm("literal(major, :city) entity(state)"), Err(AssemblyError::TypeMismatch { .. })));
        assert!(matches!(asm("relation(city, loc, :state)"), Err(AssemblyError::Incomplete { open: 1 })));
        assert!(matches!(asm("entity(city) entity(state)"), Err(AssemblyError::ConjunctionMismatch { .. })));
        assert!(matches!(
            asm("aggr(count, :city) entity(city) entity(city)"),
            Err(AssemblyError::ConjunctionMismatch { .. })
        ));
        assert!(matches!(asm("aggr(average, :city) entity(city)"), Err(AssemblyError::TypeMismatch { .. })));
        let g = asm("ordinal(tallest, :city) entity(city)").unwrap();
        assert!(matches!(
            execute(&g, &k, &OrdinalLexicon::default()),
            Err(ExecError::MissingOrdinal { .. })
        ));
        let g = asm("ordinal(smallest, :state) relation(state, next_to, :state) entity(state, id, 'c')").unwrap();
        assert_eq!(execute(&g, &k, &OrdinalLexicon::default()).unwrap(), ents(&[]));
    }

    #[test]
    fn legal_next_tracks_the_stack() {
        let k = kg();
        let mut st = AssemblyState::new();
        assert_eq!(legal_next(&st), LegalNext::Start);
        for b in parse_blocks("literal(major, :city) relation(city, loc, :state)").unwrap() {
            st.push(&b, &k).unwrap();
        }
        assert_eq!(legal_next(&st), LegalNext::Slot(SlotType::Entities("state".into())));
        assert_eq!(st.min_completion(), 1);
        st.push(&parse_blocks("entity(state)").unwrap()[0], &k).unwrap();
        assert_eq!(legal_next(&st), LegalNext::Conjunction("city".into()));
        assert!(legal_next(&st).allows_end());
    }

    #[test]
    fn ordinal_lexicon_file() {
        let lex = OrdinalLexicon::default();
        assert_eq!(lex.entries().len(), 6);
        assert_eq!(lex.lookup("longest", "river").unwrap().extreme, Extreme::Max);
        assert!(OrdinalLexicon::parse("ordinal big city population up").is_err());
    }
}
