//! Dataset files, the bundled fixtures and the templated mini-corpora.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::blocks::{block_output_type, parse_blocks, print_blocks, validate_blocks, BlockSequence, SemanticBlock};
use crate::convert::{atis_to_blocks, geo_to_blocks, parse_atis, parse_geo, ConvertError, PredicateTable};
use crate::graph2seq::{catalog, ValueSlot};
use crate::kg::{KnowledgeGraph, Literal, ID_ATTR};
use crate::prep::{build_context, Lexicon, QuestionContext};
use crate::query::{assemble, execute, legal_next, AnswerSet, AssemblyState, OrdinalLexicon};

pub const GEO_KG: &str = include_str!("../data/geo.kg");
pub const GEO_LEXICON: &str = include_str!("../data/geo.lexicon");
pub const GEO_PREDICATES: &str = include_str!("../data/geo.preds");
pub const ATIS_KG: &str = include_str!("../data/atis.kg");
pub const ATIS_LEXICON: &str = include_str!("../data/atis.lexicon");
pub const ORDINALS: &str = include_str!("../data/ordinals.txt");

#[derive(Debug, Error, Clone, PartialEq)]
#[error("dataset line {line}: {message}")]
pub struct DatasetError {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Example {
    pub question: String,
    pub logical_form: Option<String>,
    pub blocks: Option<BlockSequence>,
    pub answer: Option<String>,
}

impl Example {
    pub fn new(question: impl Into<String>) -> Self {
        Example {
            question: question.into(),
            ..Default::default()
        }
    }
}

/// `question [TAB logical_form [TAB blocks [TAB answer]]]`; empty fields are absent.
pub fn parse_dataset(text: &str) -> Result<Vec<Example>, DatasetError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() > 4 {
            return Err(DatasetError {
                line: i + 1,
                message: format!("expected at most 4 fields, found {}", f.len()),
            });
        }
        let opt = |k: usize| f.get(k).map(|s| s.trim()).filter(|s| !s.is_empty());
        let blocks = match opt(2) {
            Some(b) => Some(parse_blocks(b).map_err(|e| DatasetError {
                line: i + 1,
                message: e.to_string(),
            })?),
            None => None,
        };
        out.push(Example {
            question: f[0].trim().to_string(),
            logical_form: opt(1).map(str::to_string),
            blocks,
            answer: opt(3).map(str::to_string),
        });
    }
    Ok(out)
}

pub fn write_dataset(examples: &[Example]) -> String {
    let mut s = String::new();
    for e in examples {
        let blocks = e.blocks.as_deref().map(print_blocks).unwrap_or_default();
        let mut fields = vec![
            e.question.as_str(),
            e.logical_form.as_deref().unwrap_or(""),
            blocks.as_str(),
            e.answer.as_deref().unwrap_or(""),
        ];
        while fields.len() > 1 && fields.last().is_some_and(|f| f.is_empty()) {
            fields.pop();
        }
        let _ = writeln!(s, "{}", fields.join("\t"));
    }
    s
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Example>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError {
        line: 0,
        message: e.to_string(),
    })?;
    parse_dataset(&text)
}

pub fn save_dataset(path: impl AsRef<Path>, examples: &[Example]) -> std::io::Result<()> {
    std::fs::write(path, write_dataset(examples))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Geo,
    Atis,
}

/// Everything needed to link, convert and execute questions over one KG.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub domain: Domain,
    pub kg: KnowledgeGraph,
    pub lexicon: Lexicon,
    pub ordinals: OrdinalLexicon,
    pub predicates: PredicateTable,
}

impl Fixture {
    pub fn geo() -> Self {
        let kg = KnowledgeGraph::parse(GEO_KG).expect("bundled geo kg");
        Fixture {
            domain: Domain::Geo,
            lexicon: Lexicon::parse(GEO_LEXICON, &kg).expect("bundled geo lexicon"),
            ordinals: OrdinalLexicon::parse(ORDINALS).expect("bundled ordinals"),
            predicates: PredicateTable::parse(GEO_PREDICATES).expect("bundled predicates"),
            kg,
        }
    }

    pub fn atis() -> Self {
        let kg = KnowledgeGraph::parse(ATIS_KG).expect("bundled atis kg");
        Fixture {
            domain: Domain::Atis,
            lexicon: Lexicon::parse(ATIS_LEXICON, &kg).expect("bundled atis lexicon"),
            ordinals: OrdinalLexicon::parse(ORDINALS).expect("bundled ordinals"),
            predicates: PredicateTable::default(),
            kg,
        }
    }

    pub fn convert(&self, logical_form: &str) -> Result<BlockSequence, ConvertError> {
        match self.domain {
            Domain::Geo => geo_to_blocks(&parse_geo(logical_form)?, &self.kg, &self.predicates),
            Domain::Atis => atis_to_blocks(&parse_atis(logical_form)?, &self.kg),
        }
    }

    pub fn context(&self, question: &str) -> QuestionContext {
        build_context(question, &self.kg, &self.lexicon)
    }

    /// Validates, assembles and executes; `None` on any failure.
    pub fn answer(&self, blocks: &[SemanticBlock]) -> Option<AnswerSet> {
        if !validate_blocks(blocks, &self.kg).is_empty() {
            return None;
        }
        let g = assemble(blocks, &self.kg).ok()?;
        execute(&g, &self.kg, &self.ordinals).ok()
    }

    /// Fills in missing blocks (from the logical form) and answers.
    pub fn annotate(&self, ex: &mut Example) -> Result<(), ConvertError> {
        if ex.blocks.is_none() {
            if let Some(lf) = &ex.logical_form {
                ex.blocks = Some(self.convert(lf)?);
            }
        }
        if ex.answer.is_none() {
            ex.answer = ex.blocks.as_deref().and_then(|b| self.answer(b)).map(|a| a.to_string());
        }
        Ok(())
    }
}

/// Every constrained `entity` block's value matches one of the question's
/// linked candidates.
pub fn values_linked(blocks: &[SemanticBlock], ctx: &QuestionContext) -> bool {
    blocks.iter().all(|b| match b {
        SemanticBlock::Entity {
            ty,
            constraint: Some((attr, value)),
        } => ctx.candidates.iter().any(|c| {
            let (a, v) = c.constraint();
            c.ty() == ty && a == attr && v == *value
        }),
        _ => true,
    })
}

struct Template {
    questions: &'static [&'static str],
    logical_form: &'static str,
}

const GEO_TEMPLATES: &[Template] = &[
    Template {
        questions: &["what is the capital of {s}", "name the capital of {s}"],
        logical_form: "answer(A,(capital(A),loc(A,B),const(B,stateid({s}))))",
    },
    Template {
        questions: &["which states border {s}", "what states are next to {s}"],
        logical_form: "answer(A,(state(A),next_to(A,B),const(B,stateid({s}))))",
    },
    Template {
        questions: &["how many states border {s}", "how many states are next to {s}"],
        logical_form: "answer(A,count(B,(state(B),next_to(B,C),const(C,stateid({s}))),A))",
    },
    Template {
        questions: &["what is the population of {s}", "how many people live in {s}"],
        logical_form: "answer(A,(population(B,A),const(B,stateid({s}))))",
    },
    Template {
        questions: &["what is the area of {s}", "how big is {s}"],
        logical_form: "answer(A,(area(B,A),const(B,stateid({s}))))",
    },
    Template {
        questions: &["what rivers are in {s}", "which rivers run through {s}"],
        logical_form: "answer(A,(river(A),loc(A,B),const(B,stateid({s}))))",
    },
    Template {
        questions: &["how many rivers are in {s}", "how many rivers does {s} have"],
        logical_form: "answer(A,count(B,(river(B),loc(B,C),const(C,stateid({s}))),A))",
    },
    Template {
        questions: &["what is the longest river in {s}"],
        logical_form: "answer(A,longest(A,(river(A),loc(A,B),const(B,stateid({s})))))",
    },
    Template {
        questions: &["what are the major cities in {s}", "name the major cities of {s}"],
        logical_form: "answer(A,(major(A),city(A),loc(A,B),const(B,stateid({s}))))",
    },
    Template {
        questions: &["how many major cities are in {s}"],
        logical_form: "answer(A,count(B,(major(B),city(B),loc(B,C),const(C,stateid({s}))),A))",
    },
    Template {
        questions: &["what is the biggest city in {s}"],
        logical_form: "answer(A,biggest(A,(city(A),loc(A,B),const(B,stateid({s})))))",
    },
    Template {
        questions: &["what is the smallest city in {s}"],
        logical_form: "answer(A,smallest(A,(city(A),loc(A,B),const(B,stateid({s})))))",
    },
    Template {
        questions: &["what is the population of the city {c}", "how many people live in the city {c}"],
        logical_form: "answer(A,(population(B,A),const(B,cityid({c},_))))",
    },
    Template {
        questions: &["what state is {c} in", "in which state is {c}"],
        logical_form: "answer(A,(state(A),loc(B,A),const(B,cityid({c},_))))",
    },
    Template {
        questions: &["what states does the {r} river run through", "which states does the {r} river flow through"],
        logical_form: "answer(A,(state(A),const(B,riverid({r})),traverse(B,A)))",
    },
    Template {
        questions: &["how long is the {r} river", "what is the length of the {r} river"],
        logical_form: "answer(A,(len(B,A),const(B,riverid({r}))))",
    },
    Template {
        questions: &["what is the largest state bordering {s}"],
        logical_form: "answer(A,largest(A,(state(A),next_to(A,B),const(B,stateid({s})))))",
    },
    Template {
        questions: &["what are the populations of the states that border {s}"],
        logical_form: "answer(A,(population(B,A),state(B),next_to(B,C),const(C,stateid({s}))))",
    },
    Template {
        questions: &["which rivers run through states bordering {s}"],
        logical_form: "answer(A,(river(A),loc(A,B),state(B),next_to(B,C),const(C,stateid({s}))))",
    },
    Template {
        questions: &["what are the major cities in states bordering {s}"],
        logical_form: "answer(A,(major(A),city(A),loc(A,B),state(B),next_to(B,C),const(C,stateid({s}))))",
    },
    Template {
        questions: &["what is the average population of the major cities in {s}"],
        logical_form: "answer(A,average(B,(population(C,B),major(C),city(C),loc(C,D),const(D,stateid({s}))),A))",
    },
    Template {
        questions: &["which rivers run through {s} and {t}"],
        logical_form: "answer(A,(river(A),loc(A,B),const(B,stateid({s})),loc(A,C),const(C,stateid({t}))))",
    },
    Template {
        questions: &["what is the smallest state", "which state is the smallest"],
        logical_form: "answer(A,smallest(A,state(A)))",
    },
    Template {
        questions: &["what is the largest state", "which state is the largest"],
        logical_form: "answer(A,largest(A,state(A)))",
    },
    Template {
        questions: &["what is the longest river", "which river is the longest"],
        logical_form: "answer(A,longest(A,river(A)))",
    },
    Template {
        questions: &["what is the biggest city", "which city is the biggest"],
        logical_form: "answer(A,biggest(A,city(A)))",
    },
];

const ATIS_TEMPLATES: &[Template] = &[
    Template {
        questions: &["show me flights from {a} to {b}", "what flights go from {a} to {b}", "flights from {a} to {b}"],
        logical_form: "(_lambda $0 e (_and (_flight $0) (_from $0 {a}:_ci) (_to $0 {b}:_ci)))",
    },
    Template {
        questions: &["flights from {a} to {b} on {m} {d}", "show me flights from {a} to {b} on {m} {d}"],
        logical_form: "(_lambda $0 e (_and (_flight $0) (_from $0 {a}:_ci) (_to $0 {b}:_ci) (_day_number $0 {n}:_dn) (_month $0 {m}:_mn)))",
    },
    Template {
        questions: &["{l} flights from {a} to {b}", "show me {l} flights from {a} to {b}"],
        logical_form: "(_lambda $0 e (_and (_flight $0) (_from $0 {a}:_ci) (_to $0 {b}:_ci) (_airline $0 {al}:_al)))",
    },
    Template {
        questions: &["flights to {b}", "what flights arrive in {b}"],
        logical_form: "(_lambda $0 e (_and (_flight $0) (_to $0 {b}:_ci)))",
    },
    Template {
        questions: &["flights leaving {a}", "what flights depart from {a}"],
        logical_form: "(_lambda $0 e (_and (_flight $0) (_from $0 {a}:_ci)))",
    },
    Template {
        questions: &["flights from {a} to {b} in {m}"],
        logical_form: "(_lambda $0 e (_and (_flight $0) (_from $0 {a}:_ci) (_to $0 {b}:_ci) (_month $0 {m}:_mn)))",
    },
    Template {
        questions: &["{l} flights to {b}"],
        logical_form: "(_lambda $0 e (_and (_flight $0) (_to $0 {b}:_ci) (_airline $0 {al}:_al)))",
    },
];

const MONTHS: &[&str] = &[
    "january", "february", "march", "april", "may", "june", "july", "august", "september", "october",
    "november", "december",
];
const DAY_WORDS: &[&str] = &[
    "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth", "eleventh",
    "twelfth",
];
const AIRLINES: &[(&str, &str)] = &[
    ("american", "aa"),
    ("continental", "co"),
    ("delta", "dl"),
    ("northwest", "nw"),
    ("united", "ua"),
];

fn prolog_const(id: &str) -> String {
    if id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        id.to_string()
    } else {
        format!("'{id}'")
    }
}

fn pick<'a, R: Rng>(rng: &mut R, items: &'a [String]) -> &'a str {
    items.choose(rng).expect("nonempty fixture")
}

fn fill(text: &str, slots: &[(&str, String)]) -> String {
    let mut s = text.to_string();
    for (k, v) in slots {
        s = s.replace(&format!("{{{k}}}"), v);
    }
    s
}

fn ids(kg: &KnowledgeGraph, ty: &str) -> Vec<String> {
    kg.entities_of_type(ty).map(|s| s.iter().cloned().collect()).unwrap_or_default()
}

fn sample_geo<R: Rng>(fx: &Fixture, rng: &mut R) -> (String, String) {
    let states = ids(&fx.kg, "state");
    let cities = ids(&fx.kg, "city");
    let rivers = ids(&fx.kg, "river");
    let t = GEO_TEMPLATES.choose(rng).expect("templates");
    let q = t.questions.choose(rng).expect("questions");
    let s = pick(rng, &states).to_string();
    let mut s2 = pick(rng, &states).to_string();
    while s2 == s {
        s2 = pick(rng, &states).to_string();
    }
    let c = pick(rng, &cities).to_string();
    let r = pick(rng, &rivers).to_string();
    let question = fill(q, &[("s", s.clone()), ("t", s2.clone()), ("c", c.clone()), ("r", r.clone())]);
    let lf = fill(
        t.logical_form,
        &[
            ("s", prolog_const(&s)),
            ("t", prolog_const(&s2)),
            ("c", prolog_const(&c)),
            ("r", prolog_const(&r)),
        ],
    );
    (question, lf)
}

fn sample_atis<R: Rng>(fx: &Fixture, rng: &mut R) -> (String, String) {
    let cities = ids(&fx.kg, "city");
    let t = ATIS_TEMPLATES.choose(rng).expect("templates");
    let q = t.questions.choose(rng).expect("questions");
    let a = pick(rng, &cities).to_string();
    let mut b = pick(rng, &cities).to_string();
    while b == a {
        b = pick(rng, &cities).to_string();
    }
    let m = MONTHS.choose(rng).expect("months").to_string();
    let n = rng.gen_range(1..=DAY_WORDS.len());
    let d = if rng.gen_bool(0.5) {
        DAY_WORDS[n - 1].to_string()
    } else {
        n.to_string()
    };
    let (l, al) = *AIRLINES.choose(rng).expect("airlines");
    let question = fill(
        q,
        &[("a", a.clone()), ("b", b.clone()), ("m", m.clone()), ("d", d), ("l", l.to_string())],
    );
    let lf = fill(
        t.logical_form,
        &[
            ("a", a.replace(' ', "_")),
            ("b", b.replace(' ', "_")),
            ("m", m),
            ("n", n.to_string()),
            ("al", al.to_string()),
        ],
    );
    (question, lf)
}

/// `n` distinct annotated questions drawn template-first. GEO samples with
/// an empty entity or value answer are redrawn.
pub fn generate(fx: &Fixture, seed: u64, n: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n && attempts < 1000 * n.max(1) {
        attempts += 1;
        let (question, lf) = match fx.domain {
            Domain::Geo => sample_geo(fx, &mut rng),
            Domain::Atis => sample_atis(fx, &mut rng),
        };
        if seen.contains(&question) {
            continue;
        }
        let Ok(blocks) = fx.convert(&lf) else { continue };
        let Some(answer) = fx.answer(&blocks) else { continue };
        let empty = match &answer {
            AnswerSet::Entities(s) => s.is_empty(),
            AnswerSet::Values(v) => v.is_empty(),
            AnswerSet::Scalar(_) => false,
        };
        if fx.domain == Domain::Geo && empty {
            continue;
        }
        if !values_linked(&blocks, &fx.context(&question)) {
            continue;
        }
        seen.insert(question.clone());
        out.push(Example {
            question,
            logical_form: Some(lf),
            blocks: Some(blocks),
            answer: Some(answer.to_string()),
        });
    }
    out
}

/// Disjoint train/test splits drawn from one generated pool.
pub fn split(fx: &Fixture, seed: u64, train: usize, test: usize) -> (Vec<Example>, Vec<Example>) {
    let mut all = generate(fx, seed, train + test);
    let rest = all.split_off(train.min(all.len()));
    (all, rest)
}

fn sample_value<R: Rng>(kg: &KnowledgeGraph, ty: &str, attr: &str, rng: &mut R) -> Option<Literal> {
    let mut pool: Vec<&String> = kg.entities_of_type(ty).ok()?.iter().collect();
    pool.shuffle(rng);
    pool.into_iter().find_map(|e| {
        if attr == ID_ATTR {
            Some(Literal::Text(e.clone()))
        } else {
            kg.attr(e, attr)
        }
    })
}

/// A random complete, schema-valid block sequence: every block is drawn
/// uniformly from those the assembly state admits, with values taken from
/// real entities. Past `soft_limit` blocks the walk closes open slots as
/// directly as it can and stops as soon as ending is legal.
pub fn random_sequence<R: Rng>(kg: &KnowledgeGraph, ordinals: &OrdinalLexicon, rng: &mut R, soft_limit: usize) -> BlockSequence {
    let shapes = catalog(kg, ordinals, 1);
    let outs: Vec<_> = shapes
        .iter()
        .map(|b| block_output_type(b, kg).expect("catalog blocks type-check"))
        .collect();
    let mut st = AssemblyState::new();
    let mut seq = Vec::new();
    loop {
        let next = legal_next(&st);
        if next.allows_end() && (seq.len() >= soft_limit || rng.gen_bool(0.5)) {
            break;
        }
        let mut pool: Vec<usize> = (0..shapes.len()).filter(|&i| next.admits(&outs[i])).collect();
        if seq.len() + st.min_completion() >= soft_limit {
            let fewest = pool.iter().map(|&i| shapes[i].slots().len()).min().unwrap_or(0);
            pool.retain(|&i| shapes[i].slots().len() == fewest);
        }
        let mut placed = false;
        while !pool.is_empty() && !placed {
            let i = pool.swap_remove(rng.gen_range(0..pool.len()));
            let block = match &shapes[i] {
                SemanticBlock::Entity {
                    ty,
                    constraint: Some((attr, ValueSlot::Pointer(_))),
                } => match sample_value(kg, ty, attr, rng) {
                    Some(v) => SemanticBlock::Entity {
                        ty: ty.clone(),
                        constraint: Some((attr.clone(), v)),
                    },
                    None => continue,
                },
                other => other.map_value(|_| Literal::Integer(0)),
            };
            st.push_typed(&block, outs[i].clone()).expect("admitted block places");
            seq.push(block);
            placed = true;
        }
        if !placed {
            break;
        }
    }
    seq
}

pub const GEO_SPLIT: (usize, usize) = (120, 30);
pub const ATIS_SPLIT: (usize, usize) = (200, 50);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_sequences_assemble() {
        for fx in [Fixture::geo(), Fixture::atis()] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for _ in 0..300 {
                let seq = random_sequence(&fx.kg, &fx.ordinals, &mut rng, 6);
                assert!(validate_blocks(&seq, &fx.kg).is_empty(), "{}", print_blocks(&seq));
                assert!(assemble(&seq, &fx.kg).is_ok(), "{}", print_blocks(&seq));
            }
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let text = "what is texas\nhow many rivers\tanswer(A,river(A))\tentity(river)\t{a, b}\nq\t\tentity(state)\n";
        let ex = parse_dataset(text).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[0].logical_form, None);
        assert_eq!(ex[1].answer.as_deref(), Some("{a, b}"));
        assert_eq!(ex[2].logical_form, None);
        assert!(ex[2].blocks.is_some());
        assert_eq!(write_dataset(&ex), text);
        assert_eq!(parse_dataset("a\tb\tnot blocks(").unwrap_err().line, 1);
    }

    #[test]
    fn geo_corpus_is_clean() {
        let fx = Fixture::geo();
        let ex = generate(&fx, 7, 150);
        assert_eq!(ex.len(), 150);
        for e in &ex {
            let b = e.blocks.as_ref().unwrap();
            assert!(fx.answer(b).is_some(), "{}", e.question);
            assert!(values_linked(b, &fx.context(&e.question)));
        }
        let again = generate(&fx, 7, 150);
        assert_eq!(ex, again);
    }

    #[test]
    fn atis_corpus_is_clean() {
        let fx = Fixture::atis();
        let ex = generate(&fx, 3, 250);
        assert_eq!(ex.len(), 250);
        assert!(ex.iter().all(|e| fx.answer(e.blocks.as_ref().unwrap()).is_some()));
    }

    #[test]
    fn every_template_converts() {
        let fx = Fixture::geo();
        let ex = generate(&fx, 11, 400);
        let mut shapes: HashSet<String> = HashSet::new();
        for e in &ex {
            let b = e.blocks.as_ref().unwrap();
            let skeleton: Vec<SemanticBlock<&str>> = b.iter().map(|x| x.map_value(|_| "v")).collect();
            shapes.insert(print_blocks(&skeleton));
        }
        assert_eq!(shapes.len(), GEO_TEMPLATES.len(), "{shapes:?}");
    }

    #[test]
    fn splits_are_disjoint() {
        let fx = Fixture::geo();
        let (tr, te) = split(&fx, 1, 120, 30);
        assert_eq!((tr.len(), te.len()), (120, 30));
        let qs: HashSet<_> = tr.iter().map(|e| &e.question).collect();
        assert!(te.iter().all(|e| !qs.contains(&e.question)));
    }
}
