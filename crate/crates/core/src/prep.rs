//! Question preprocessing: tokens, stems, lexicon linking, the context
//! dictionary and the encoder's input graph.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{KnowledgeGraph, Literal, LiteralKind};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("lexicon line {line}: {message}")]
pub struct LexiconError {
    pub line: usize,
    pub message: String,
}

/// Lowercases and splits on anything that is not a letter or digit.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

thread_local! {
    static STEMMER: Stemmer = Stemmer::create(Algorithm::English);
}

/// English Porter2 stem, reapplied until it stops changing.
pub fn stem(word: &str) -> String {
    STEMMER.with(|s| {
        let mut cur = word.to_lowercase();
        for _ in 0..8 {
            let next = s.stem(&cur).into_owned();
            if next == cur {
                break;
            }
            cur = next;
        }
        cur
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum LexTarget {
    Entity(String),
    Value { ty: String, attr: String, value: Literal },
}

/// Surface n-gram → KG entity (or attribute value) table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    entries: HashMap<Vec<String>, LexTarget>,
    max_len: usize,
}

impl Lexicon {
    /// Every entity id is its own surface form.
    pub fn from_kg(kg: &KnowledgeGraph) -> Self {
        let mut lex = Lexicon::default();
        for e in kg.entities() {
            lex.insert(&e.id, LexTarget::Entity(e.id.clone()));
        }
        lex
    }

    /// `alias <surface> <entity-id>` or `value <surface> <type> <attr> <literal>`,
    /// tab separated, on top of [`Lexicon::from_kg`].
    pub fn parse(text: &str, kg: &KnowledgeGraph) -> Result<Self, LexiconError> {
        let mut lex = Self::from_kg(kg);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| LexiconError { line: i + 1, message: m };
            let f: Vec<&str> = line.split('\t').map(str::trim).collect();
            match f.as_slice() {
                ["alias", surface, id] => {
                    let id = id.to_lowercase();
                    if kg.entity(&id).is_none() {
                        return Err(err(format!("unknown entity '{id}'")));
                    }
                    lex.insert(surface, LexTarget::Entity(id));
                }
                ["value", surface, ty, attr, lit] => {
                    let kind = kg
                        .literal_kind(attr, ty)
                        .ok_or_else(|| err(format!("{ty} has no attribute {attr}")))?;
                    let raw = match kind {
                        LiteralKind::Text => lit,
                        _ => lit.trim_matches('\''),
                    };
                    let value = kind
                        .parse_value(raw)
                        .ok_or_else(|| err(format!("{raw} is not {}", kind.name())))?;
                    lex.insert(
                        surface,
                        LexTarget::Value {
                            ty: ty.to_string(),
                            attr: attr.to_string(),
                            value,
                        },
                    );
                }
                _ => return Err(err("expected `alias` or `value` entry".into())),
            }
        }
        Ok(lex)
    }

    pub fn load(path: impl AsRef<Path>, kg: &KnowledgeGraph) -> Result<Self, LexiconError> {
        let text = std::fs::read_to_string(path).map_err(|e| LexiconError {
            line: 0,
            message: e.to_string(),
        })?;
        Self::parse(&text, kg)
    }

    fn insert(&mut self, surface: &str, target: LexTarget) {
        let key = tokenize(surface);
        if key.is_empty() {
            return;
        }
        self.max_len = self.max_len.max(key.len());
        self.entries.insert(key, target);
    }

    pub fn get(&self, tokens: &[String]) -> Option<&LexTarget> {
        self.entries.get(tokens)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Half-open token range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn last(&self) -> usize {
        self.end - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Candidate {
    Entity { span: Span, id: String, ty: String },
    Value { span: Span, ty: String, attr: String, value: Literal },
}

impl Candidate {
    pub fn span(&self) -> Span {
        match self {
            Candidate::Entity { span, .. } | Candidate::Value { span, .. } => *span,
        }
    }

    pub fn ty(&self) -> &str {
        match self {
            Candidate::Entity { ty, .. } | Candidate::Value { ty, .. } => ty,
        }
    }

    /// The value an `entity(...)` block takes when pointing here.
    pub fn constraint(&self) -> (&str, Literal) {
        match self {
            Candidate::Entity { id, .. } => (crate::kg::ID_ATTR, Literal::Text(id.clone())),
            Candidate::Value { attr, value, .. } => (attr, value.clone()),
        }
    }
}

/// Longest match first, scanning left to right; matches never overlap.
pub fn link_entities(tokens: &[String], kg: &KnowledgeGraph, lexicon: &Lexicon) -> Vec<Candidate> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let longest = (1..=lexicon.max_len.min(tokens.len() - i))
            .rev()
            .find_map(|n| lexicon.get(&tokens[i..i + n]).map(|t| (n, t)));
        let Some((n, target)) = longest else {
            i += 1;
            continue;
        };
        let span = Span { start: i, end: i + n };
        match target {
            LexTarget::Entity(id) => {
                if let Some(ty) = kg.type_of(id) {
                    out.push(Candidate::Entity {
                        span,
                        id: id.clone(),
                        ty: ty.to_string(),
                    });
                }
            }
            LexTarget::Value { ty, attr, value } => out.push(Candidate::Value {
                span,
                ty: ty.clone(),
                attr: attr.clone(),
                value: value.clone(),
            }),
        }
        i += n;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TypeSource {
    LinkedEntity,
    SurfaceType,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct CandidateRelation {
    pub rel: String,
    pub domain: String,
    pub range: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuestionContext {
    pub words: Vec<String>,
    pub tokens: Vec<String>,
    pub candidate_types: BTreeMap<String, TypeSource>,
    pub candidate_relations: Vec<CandidateRelation>,
    /// (token index, type) pairs tying a mention to its type node.
    pub is_a: Vec<(usize, String)>,
    pub candidates: Vec<Candidate>,
}

impl QuestionContext {
    pub fn entity_candidates(&self) -> impl Iterator<Item = (Span, &str, &str)> {
        self.candidates.iter().filter_map(|c| match c {
            Candidate::Entity { span, id, ty } => Some((*span, id.as_str(), ty.as_str())),
            _ => None,
        })
    }
}

pub fn build_context(question: &str, kg: &KnowledgeGraph, lexicon: &Lexicon) -> QuestionContext {
    let words = tokenize(question);
    let tokens: Vec<String> = words.iter().map(|w| stem(w)).collect();
    let candidates = link_entities(&words, kg, lexicon);

    let mut candidate_types = BTreeMap::new();
    let mut is_a = Vec::new();
    for c in &candidates {
        if let Candidate::Entity { span, ty, .. } = c {
            candidate_types.entry(ty.clone()).or_insert(TypeSource::LinkedEntity);
            is_a.push((span.last(), ty.clone()));
        }
    }
    let type_stems: Vec<(String, &str)> = kg.types().map(|t| (stem(t), t)).collect();
    for (i, tok) in tokens.iter().enumerate() {
        for (s, t) in &type_stems {
            if s == tok {
                candidate_types.entry(t.to_string()).or_insert(TypeSource::SurfaceType);
                is_a.push((i, t.to_string()));
            }
        }
    }
    let candidate_relations = kg
        .relations()
        .iter()
        .filter_map(|sig| {
            let range = sig.range_type()?;
            (candidate_types.contains_key(&sig.domain) && candidate_types.contains_key(range)).then(|| {
                CandidateRelation {
                    rel: sig.name.clone(),
                    domain: sig.domain.clone(),
                    range: range.to_string(),
                }
            })
        })
        .collect();
    QuestionContext {
        words,
        tokens,
        candidate_types,
        candidate_relations,
        is_a,
        candidates,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphMode {
    #[default]
    Chain,
    Full,
}

impl std::str::FromStr for GraphMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "chain" => Ok(GraphMode::Chain),
            "full" => Ok(GraphMode::Full),
            _ => Err(format!("unknown graph mode '{s}' (chain|full)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Word,
    Type,
    Relation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    Word,
    IsA,
    Relation,
}

/// Undirected graph; token nodes come first, then type nodes, then relation nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct QuestionGraph {
    pub labels: Vec<String>,
    pub kinds: Vec<NodeKind>,
    pub edges: Vec<(usize, usize, EdgeKind)>,
    pub num_tokens: usize,
}

impl QuestionGraph {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count_edges(&self, kind: EdgeKind) -> usize {
        self.edges.iter().filter(|e| e.2 == kind).count()
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.len()];
        for &(a, b, _) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        if self.is_empty() {
            return true;
        }
        let adj = self.adjacency();
        let mut seen = vec![false; self.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(n) = stack.pop() {
            for &m in &adj[n] {
                if !seen[m] {
                    seen[m] = true;
                    stack.push(m);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (i, l) in self.labels.iter().enumerate() {
            s.push_str(&format!("{i}\t{l}\n"));
        }
        for (a, b, k) in &self.edges {
            let k = match k {
                EdgeKind::Word => "next",
                EdgeKind::IsA => "isA",
                EdgeKind::Relation => "rel",
            };
            s.push_str(&format!("{a} -{k}- {b}\n"));
        }
        s
    }
}

pub fn type_label(t: &str) -> String {
    format!("type:{t}")
}

pub fn relation_label(r: &str) -> String {
    format!("rel:{r}")
}

pub fn to_question_graph(ctx: &QuestionContext, mode: GraphMode) -> QuestionGraph {
    let n = ctx.tokens.len();
    let mut labels: Vec<String> = ctx.tokens.clone();
    let mut kinds = vec![NodeKind::Word; n];
    let mut edges = Vec::new();
    match mode {
        GraphMode::Chain => edges.extend((1..n).map(|i| (i - 1, i, EdgeKind::Word))),
        GraphMode::Full => {
            for i in 0..n {
                for j in i + 1..n {
                    edges.push((i, j, EdgeKind::Word));
                }
            }
        }
    }
    let mut type_node = HashMap::new();
    for t in ctx.candidate_types.keys() {
        type_node.insert(t.as_str(), labels.len());
        labels.push(type_label(t));
        kinds.push(NodeKind::Type);
    }
    for (tok, t) in &ctx.is_a {
        edges.push((*tok, type_node[t.as_str()], EdgeKind::IsA));
    }
    for r in &ctx.candidate_relations {
        let node = labels.len();
        labels.push(relation_label(&r.rel));
        kinds.push(NodeKind::Relation);
        edges.push((type_node[r.domain.as_str()], node, EdgeKind::Relation));
        edges.push((node, type_node[r.range.as_str()], EdgeKind::Relation));
    }
    QuestionGraph {
        labels,
        kinds,
        edges,
        num_tokens: n,
    }
}

pub const UNK: &str = "<unk>";

/// Symbol table with the unknown symbol at index 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            symbols: Vec::new(),
            index: HashMap::new(),
        };
        v.add(UNK);
        v
    }

    pub fn build<'a>(symbols: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::new();
        for s in symbols {
            v.add(s);
        }
        v
    }

    pub fn add(&mut self, s: &str) -> usize {
        if let Some(&i) = self.index.get(s) {
            return i;
        }
        self.symbols.push(s.to_string());
        self.index.insert(s.to_string(), self.symbols.len() - 1);
        self.symbols.len() - 1
    }

    pub fn id(&self, s: &str) -> usize {
        self.index.get(s).copied().unwrap_or(0)
    }

    pub fn get(&self, s: &str) -> Option<usize> {
        self.index.get(s).copied()
    }

    pub fn symbol(&self, i: usize) -> &str {
        &self.symbols[i]
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geo() -> (KnowledgeGraph, Lexicon) {
        let kg = KnowledgeGraph::parse(include_str!("../data/geo.kg")).unwrap();
        let lex = Lexicon::parse(include_str!("../data/geo.lexicon"), &kg).unwrap();
        (kg, lex)
    }

    #[test]
    fn stems() {
        assert_eq!(stem("cities"), "citi");
        assert_eq!(stem("city"), "citi");
        assert_eq!(stem("usa"), "usa");
        assert_eq!(stem("Rivers"), "river");
    }

    #[test]
    fn tokenizer_drops_punctuation() {
        assert_eq!(tokenize("How many rivers does Alaska have?"), ["how", "many", "rivers", "does", "alaska", "have"]);
    }

    #[test]
    fn links_longest_match() {
        let (kg, lex) = geo();
        let toks = tokenize("what is the population of new york city");
        let c = link_entities(&toks, &kg, &lex);
        assert_eq!(c.len(), 1);
        assert_eq!(
            c[0],
            Candidate::Entity {
                span: Span { start: 5, end: 8 },
                id: "new york city".into(),
                ty: "city".into()
            }
        );
        let c = link_entities(&tokenize("rivers in rhode island"), &kg, &lex);
        assert!(matches!(&c[0], Candidate::Entity { id, ty, span } if id == "rhode island" && ty == "state" && *span == Span { start: 2, end: 4 }));
        assert!(link_entities(&tokenize("what is this"), &kg, &lex).is_empty());
        let c = link_entities(&tokenize("cities in the united states"), &kg, &lex);
        assert!(matches!(&c[..], [Candidate::Entity { id, .. }] if id == "usa"));
    }

    #[test]
    fn context_for_alaska_rivers() {
        let (kg, lex) = geo();
        let ctx = build_context("how many rivers does alaska have?", &kg, &lex);
        assert_eq!(ctx.candidate_types.get("state"), Some(&TypeSource::LinkedEntity));
        assert_eq!(ctx.candidate_types.get("river"), Some(&TypeSource::SurfaceType));
        assert!(ctx.candidate_relations.contains(&CandidateRelation {
            rel: "loc".into(),
            domain: "river".into(),
            range: "state".into()
        }));
        for r in &ctx.candidate_relations {
            assert!(ctx.candidate_types.contains_key(&r.domain) && ctx.candidate_types.contains_key(&r.range));
        }
        let g = to_question_graph(&ctx, GraphMode::Chain);
        assert_eq!(g.len(), 6 + ctx.candidate_types.len() + ctx.candidate_relations.len());
        assert!(g.is_connected());
    }

    #[test]
    fn empty_context() {
        let (kg, lex) = geo();
        let ctx = build_context("what is this", &kg, &lex);
        assert!(ctx.candidate_types.is_empty() && ctx.candidate_relations.is_empty());
        assert!(build_context("", &kg, &lex).tokens.is_empty());
    }

    #[test]
    fn surface_type_from_stem() {
        let (kg, lex) = geo();
        let ctx = build_context("what are the major cities in texas", &kg, &lex);
        assert_eq!(ctx.candidate_types.get("city"), Some(&TypeSource::SurfaceType));
    }

    #[test]
    fn graph_edge_counts() {
        let (kg, lex) = geo();
        let ctx = build_context("what is this thing", &kg, &lex);
        assert_eq!(to_question_graph(&ctx, GraphMode::Chain).count_edges(EdgeKind::Word), 3);
        assert_eq!(to_question_graph(&ctx, GraphMode::Full).count_edges(EdgeKind::Word), 6);
        let ctx = build_context("where is dallas", &kg, &lex);
        let g = to_question_graph(&ctx, GraphMode::Chain);
        assert!(g.labels.contains(&type_label("city")));
        assert_eq!(g.count_edges(EdgeKind::IsA), 1);
    }

    #[test]
    fn value_aliases_link() {
        let kg = KnowledgeGraph::parse(include_str!("../data/atis.kg")).unwrap();
        let lex = Lexicon::parse(include_str!("../data/atis.lexicon"), &kg).unwrap();
        let ctx = build_context("flights from dallas to pittsburgh on july eighth", &kg, &lex);
        let values: Vec<_> = ctx
            .candidates
            .iter()
            .filter_map(|c| match c {
                Candidate::Value { attr, value, .. } => Some(format!("{attr}={value}")),
                _ => None,
            })
            .collect();
        assert_eq!(values, ["month='july'", "day_number='08'"]);
    }

    #[test]
    fn lexicon_errors() {
        let (kg, _) = geo();
        let e = Lexicon::parse("alias\tx\tnowhere\n", &kg).unwrap_err();
        assert_eq!(e.line, 1);
        assert!(Lexicon::parse("alias x\n", &kg).is_err());
    }

    #[test]
    fn vocab_unknown() {
        let v = Vocab::build(["a", "b", "a"]);
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("zzz"), 0);
        assert_eq!(v.symbol(v.id("b")), "b");
    }

    #[test]
    fn stem_idempotent_on_corpus_words() {
        use crate::corpus::{generate, Fixture, GEO_LEXICON, ATIS_LEXICON};
        let mut words: Vec<String> = [GEO_LEXICON, ATIS_LEXICON].iter().flat_map(|t| tokenize(t)).collect();
        for fx in [Fixture::geo(), Fixture::atis()] {
            words.extend(fx.kg.types().flat_map(tokenize));
            for e in generate(&fx, 1, 200) {
                words.extend(tokenize(&e.question));
            }
        }
        for w in words {
            let s = stem(&w);
            assert_eq!(stem(&s), s, "{w}");
        }
    }

    proptest! {
        #[test]
        fn graph_size_formula(words in proptest::collection::vec("[a-z]{1,8}", 0..12), full in any::<bool>()) {
            let (kg, lex) = geo();
            let ctx = build_context(&words.join(" "), &kg, &lex);
            let mode = if full { GraphMode::Full } else { GraphMode::Chain };
            let g = to_question_graph(&ctx, mode);
            let n = ctx.tokens.len();
            prop_assert_eq!(g.len(), n + ctx.candidate_types.len() + ctx.candidate_relations.len());
            let words_expected = if full { n * n.saturating_sub(1) / 2 } else { n.saturating_sub(1) };
            prop_assert_eq!(g.count_edges(EdgeKind::Word), words_expected);
            prop_assert_eq!(g.count_edges(EdgeKind::Relation), 2 * ctx.candidate_relations.len());
            prop_assert_eq!(&ctx, &build_context(&words.join(" "), &kg, &lex));
        }
    }
}
