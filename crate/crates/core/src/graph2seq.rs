//! Graph-to-sequence parser: a mean-aggregating graph encoder over the
//! question graph and an attentive GRU decoder emitting block symbols.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::{block_output_type, AggrOp, BlockSequence, JoinOp, OutputType, SemanticBlock, SlotType};
use crate::kg::{KnowledgeGraph, Literal, LiteralKind, ID_ATTR};
use crate::prep::{to_question_graph, Candidate, GraphMode, QuestionContext, QuestionGraph, Vocab};
use crate::query::{legal_next, AssemblyState, OrdinalLexicon};
use crate::tensor::{
    load_checkpoint, save_checkpoint, ParamId, ParameterStore, Tape, Tensor, TensorError, Var,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("question graph is empty")]
    EmptyGraph,
    #[error("gold block {0} is not expressible in the output vocabulary")]
    OutOfVocabulary(String),
    #[error("model metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hops: usize,
    pub node_dim: usize,
    pub hidden: usize,
    pub pooling: Pooling,
    /// Component symbols with block-embedding input feeding (+MP).
    pub decomposed: bool,
    /// Legality masking during decoding.
    pub controller: bool,
    pub beam: usize,
    pub dropout: f64,
    pub graph_mode: GraphMode,
    pub max_pointers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hops: 3,
            node_dim: 100,
            hidden: 256,
            pooling: Pooling::Max,
            decomposed: true,
            controller: true,
            beam: 5,
            dropout: 0.2,
            graph_mode: GraphMode::Chain,
            max_pointers: 4,
        }
    }
}

impl ModelConfig {
    pub fn base() -> Self {
        ModelConfig {
            decomposed: false,
            controller: false,
            ..Default::default()
        }
    }

    pub fn mp() -> Self {
        ModelConfig {
            controller: false,
            ..Default::default()
        }
    }

    pub fn mp_controller() -> Self {
        Self::default()
    }

    pub fn mode_name(&self) -> &'static str {
        match (self.decomposed, self.controller) {
            (false, false) => "base",
            (false, true) => "base+controller",
            (true, false) => "+mp",
            (true, true) => "+mp+controller",
        }
    }
}

/// Value slot of a decoder block template.
#[derive(Clone, Debug, PartialEq)]
pub enum ValueSlot {
    /// Index into the question's linked candidates.
    Pointer(usize),
    Const(Literal),
}

impl fmt::Display for ValueSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValueSlot::Pointer(i) => write!(f, "@{i}"),
            ValueSlot::Const(l) => write!(f, "{l}"),
        }
    }
}

pub type BlockTemplate = SemanticBlock<ValueSlot>;

pub const START: &str = "<s>";
pub const END: &str = "</s>";
pub const BOUNDARY: &str = "<b>";
const UNK_ID: usize = 0;
const START_ID: usize = 1;
const END_ID: usize = 2;
const BOUNDARY_ID: usize = 3;

/// Component symbols of a template, in emission order.
pub fn components(t: &BlockTemplate) -> Vec<String> {
    match t {
        SemanticBlock::Entity { ty, constraint: None } => vec!["p:entity".into(), format!("t:{ty}")],
        SemanticBlock::Entity {
            ty,
            constraint: Some((a, v)),
        } => {
            let v = match v {
                ValueSlot::Pointer(i) => format!("@{i}"),
                ValueSlot::Const(l) => format!("v:{l}"),
            };
            vec!["p:entity".into(), format!("t:{ty}"), format!("a:{a}"), v]
        }
        SemanticBlock::Relation { out, rel, input } => vec![
            "p:relation".into(),
            format!("t:{out}"),
            format!("r:{rel}"),
            format!("t:{input}"),
        ],
        SemanticBlock::Literal { attr, ty } => vec!["p:literal".into(), format!("a:{attr}"), format!("t:{ty}")],
        SemanticBlock::Ordinal { op, ty } => vec!["p:ordinal".into(), format!("o:{op}"), format!("t:{ty}")],
        SemanticBlock::Aggr { op, ty } => vec!["p:aggr".into(), format!("g:{}", op.name()), format!("t:{ty}")],
        SemanticBlock::Join { op, ty } => vec!["p:join".into(), format!("j:{}", op.name()), format!("t:{ty}")],
    }
}

fn parse_const(s: &str) -> Option<Literal> {
    if let Some(inner) = s.strip_prefix('\'').and_then(|x| x.strip_suffix('\'')) {
        return Some(Literal::Text(inner.to_string()));
    }
    if let Ok(i) = s.parse::<i64>() {
        return Some(Literal::Integer(i));
    }
    s.parse::<f64>().ok().map(Literal::Decimal)
}

/// Inverse of [`components`].
pub fn template_from_components<S: AsRef<str>>(c: &[S]) -> Option<BlockTemplate> {
    let c: Vec<&str> = c.iter().map(AsRef::as_ref).collect();
    let strip = |s: &str, p: &str| s.strip_prefix(p).map(str::to_string);
    Some(match c.as_slice() {
        ["p:entity", t] => SemanticBlock::Entity {
            ty: strip(t, "t:")?,
            constraint: None,
        },
        ["p:entity", t, a, v] => {
            let value = if let Some(i) = v.strip_prefix('@') {
                ValueSlot::Pointer(i.parse().ok()?)
            } else {
                ValueSlot::Const(parse_const(v.strip_prefix("v:")?)?)
            };
            SemanticBlock::Entity {
                ty: strip(t, "t:")?,
                constraint: Some((strip(a, "a:")?, value)),
            }
        }
        ["p:relation", o, r, i] => SemanticBlock::Relation {
            out: strip(o, "t:")?,
            rel: strip(r, "r:")?,
            input: strip(i, "t:")?,
        },
        ["p:literal", a, t] => SemanticBlock::Literal {
            attr: strip(a, "a:")?,
            ty: strip(t, "t:")?,
        },
        ["p:ordinal", o, t] => SemanticBlock::Ordinal {
            op: strip(o, "o:")?,
            ty: strip(t, "t:")?,
        },
        ["p:aggr", g, t] => SemanticBlock::Aggr {
            op: AggrOp::from_name(g.strip_prefix("g:")?)?,
            ty: strip(t, "t:")?,
        },
        ["p:join", j, t] => SemanticBlock::Join {
            op: JoinOp::from_name(j.strip_prefix("j:")?)?,
            ty: strip(t, "t:")?,
        },
        _ => return None,
    })
}

/// Every schema-valid block shape, with entity values as pointers.
pub fn catalog(kg: &KnowledgeGraph, ordinals: &OrdinalLexicon, max_pointers: usize) -> Vec<BlockTemplate> {
    let mut out: Vec<BlockTemplate> = Vec::new();
    let mut push = |t: BlockTemplate| {
        if !out.contains(&t) {
            out.push(t);
        }
    };
    let types: Vec<String> = kg.types().map(str::to_string).collect();
    for ty in &types {
        push(SemanticBlock::Entity {
            ty: ty.clone(),
            constraint: None,
        });
        let attrs: Vec<String> = std::iter::once(ID_ATTR.to_string())
            .chain(kg.attributes_of(ty).map(|(a, _)| a.to_string()))
            .collect();
        for a in &attrs {
            for i in 0..max_pointers {
                push(SemanticBlock::Entity {
                    ty: ty.clone(),
                    constraint: Some((a.clone(), ValueSlot::Pointer(i))),
                });
            }
        }
    }
    for sig in kg.relations() {
        let Some(range) = sig.range_type() else { continue };
        for (o, i) in [(&sig.domain, range), (&range.to_string(), sig.domain.as_str())] {
            push(SemanticBlock::Relation {
                out: o.to_string(),
                rel: sig.name.clone(),
                input: i.to_string(),
            });
        }
    }
    for ty in &types {
        for (a, _) in kg.attributes_of(ty) {
            push(SemanticBlock::Literal {
                attr: a.to_string(),
                ty: ty.clone(),
            });
        }
    }
    for e in ordinals.entries() {
        if kg.literal_kind(&e.attr, &e.ty).is_some_and(LiteralKind::is_numeric) {
            push(SemanticBlock::Ordinal {
                op: e.surface.clone(),
                ty: e.ty.clone(),
            });
        }
    }
    for ty in &types {
        push(SemanticBlock::Aggr {
            op: AggrOp::Count,
            ty: ty.clone(),
        });
        if kg.attributes_of(ty).any(|(_, k)| k.is_numeric()) {
            push(SemanticBlock::Aggr {
                op: AggrOp::Average,
                ty: ty.clone(),
            });
        }
    }
    for op in JoinOp::ALL {
        for ty in &types {
            push(SemanticBlock::Join { op, ty: ty.clone() });
        }
    }
    out
}

/// Output symbols and the block templates they spell.
#[derive(Clone, Debug)]
pub struct OutputSpace {
    pub decomposed: bool,
    pub vocab: Vocab,
    pub templates: Vec<BlockTemplate>,
    outputs: Vec<OutputType>,
    /// Symbol ids spelling each template (one id in atomic mode).
    spelling: Vec<Vec<usize>>,
    by_spelling: HashMap<Vec<usize>, usize>,
}

impl OutputSpace {
    pub fn new(kg: &KnowledgeGraph, templates: Vec<BlockTemplate>, decomposed: bool) -> Result<Self> {
        let mut vocab = Vocab::build([START, END, BOUNDARY]);
        let mut outputs = Vec::with_capacity(templates.len());
        let mut spelling = Vec::with_capacity(templates.len());
        let mut by_spelling = HashMap::new();
        for (i, t) in templates.iter().enumerate() {
            let out = block_output_type(t, kg)
                .ok_or_else(|| ModelError::Metadata(format!("template {t} does not type-check")))?;
            outputs.push(out);
            let s: Vec<usize> = if decomposed {
                components(t).iter().map(|c| vocab.add(c)).collect()
            } else {
                vec![vocab.add(&t.to_string())]
            };
            by_spelling.insert(s.clone(), i);
            spelling.push(s);
        }
        Ok(OutputSpace {
            decomposed,
            vocab,
            templates,
            outputs,
            spelling,
            by_spelling,
        })
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn spelling(&self, template: usize) -> &[usize] {
        &self.spelling[template]
    }

    pub fn output(&self, template: usize) -> &OutputType {
        &self.outputs[template]
    }

    /// Symbols emitted for a template, including the block boundary.
    pub fn cost(&self, template: usize) -> usize {
        self.spelling[template].len() + usize::from(self.decomposed)
    }

    fn slot_cost(&self, s: &SlotType) -> usize {
        match (s, self.decomposed) {
            (SlotType::Entities(_), true) => 3,
            (SlotType::Values(_), true) => 7,
            (SlotType::Entities(_), false) => 1,
            (SlotType::Values(_), false) => 2,
        }
    }

    /// Fewest symbols (without the end symbol) that close every open slot.
    pub fn min_completion(&self, asm: &AssemblyState) -> usize {
        asm.open_slot_types().map(|s| self.slot_cost(s)).sum()
    }

    pub fn find(&self, t: &BlockTemplate) -> Option<usize> {
        self.templates.iter().position(|x| x == t)
    }

    /// Gold symbols for a block sequence, ending with the end symbol.
    /// Values prefer a pointer to a matching candidate over a constant.
    pub fn encode(&self, blocks: &[SemanticBlock], cands: &[Candidate], max_pointers: usize) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for b in blocks {
            let t = self
                .template_for(b, cands, max_pointers)
                .ok_or_else(|| ModelError::OutOfVocabulary(b.to_string()))?;
            out.extend_from_slice(&self.spelling[t]);
            if self.decomposed {
                out.push(BOUNDARY_ID);
            }
        }
        out.push(END_ID);
        Ok(out)
    }

    fn template_for(&self, b: &SemanticBlock, cands: &[Candidate], max_pointers: usize) -> Option<usize> {
        if let SemanticBlock::Entity {
            ty,
            constraint: Some((attr, value)),
        } = b
        {
            let ptr = cands.iter().take(max_pointers).position(|c| {
                let (a, v) = c.constraint();
                c.ty() == ty && a == attr && v == *value
            });
            if let Some(i) = ptr {
                let t = b.map_value(|_| ValueSlot::Pointer(i));
                if let Some(k) = self.find(&t) {
                    return Some(k);
                }
            }
            return self.find(&b.map_value(|v| ValueSlot::Const(v.clone())));
        }
        self.find(&b.map_value(|_| ValueSlot::Pointer(0)))
    }

    /// Groups emitted symbols into blocks and resolves pointers.
    pub fn to_blocks(&self, symbols: &[usize], cands: &[Candidate]) -> std::result::Result<BlockSequence, DecodeError> {
        let body = match symbols.iter().position(|&s| s == END_ID) {
            Some(e) => &symbols[..e],
            None => return Err(DecodeError::Unfinished),
        };
        let groups: Vec<Vec<usize>> = if self.decomposed {
            if body.last().is_some_and(|&s| s != BOUNDARY_ID) {
                return Err(DecodeError::Malformed("symbols after the last block boundary".into()));
            }
            body.split(|&s| s == BOUNDARY_ID)
                .filter(|g| !g.is_empty())
                .map(<[usize]>::to_vec)
                .collect()
        } else {
            body.iter().map(|&s| vec![s]).collect()
        };
        if self.decomposed && body.windows(2).any(|w| w[0] == BOUNDARY_ID && w[1] == BOUNDARY_ID) || body.first() == Some(&BOUNDARY_ID) {
            return Err(DecodeError::Malformed("empty block".into()));
        }
        groups
            .iter()
            .map(|g| {
                let t = self.by_spelling.get(g).ok_or_else(|| {
                    DecodeError::Malformed(g.iter().map(|&s| self.vocab.symbol(s)).collect::<Vec<_>>().join(" "))
                })?;
                resolve(&self.templates[*t], cands)
            })
            .collect()
    }
}

pub fn resolve(t: &BlockTemplate, cands: &[Candidate]) -> std::result::Result<SemanticBlock, DecodeError> {
    match t {
        SemanticBlock::Entity {
            ty,
            constraint: Some((attr, v)),
        } => {
            let value = match v {
                ValueSlot::Const(l) => l.clone(),
                ValueSlot::Pointer(i) => cands.get(*i).ok_or(DecodeError::DanglingPointer(*i))?.constraint().1,
            };
            Ok(SemanticBlock::Entity {
                ty: ty.clone(),
                constraint: Some((attr.clone(), value)),
            })
        }
        other => Ok(other.map_value(|_| Literal::Integer(0))),
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("no end symbol within the step limit")]
    Unfinished,
    #[error("malformed block: {0}")]
    Malformed(String),
    #[error("pointer @{0} has no linked candidate")]
    DanglingPointer(usize),
}

/// One aggregation hop: `relu([h ; adj h] W + b)`, where `adj` holds mean
/// weights over each node's neighbours (zero rows for isolated nodes).
pub fn aggregate_hop(tape: &mut Tape<'_>, h: Var, adj: Var, w: Var, b: Var) -> std::result::Result<Var, TensorError> {
    let mean = tape.matmul(adj, h)?;
    let cat = tape.concat_cols(&[h, mean])?;
    let lin = tape.matmul(cat, w)?;
    let lin = tape.add_row(lin, b)?;
    Ok(tape.relu(lin))
}

#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    pub w_zr: Var,
    pub u_zr: Var,
    pub b_zr: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

/// GRU update: gates `[z ; r] = sigmoid(x Wzr + h Uzr + bzr)`,
/// `h' = (1 - z) h + z tanh(x Wh + (r h) Uh + bh)`.
pub fn gru_cell(tape: &mut Tape<'_>, x: Var, h: Var, w: &GruWeights) -> std::result::Result<Var, TensorError> {
    let hs = tape.value(h).cols();
    let a = tape.matmul(x, w.w_zr)?;
    let b = tape.matmul(h, w.u_zr)?;
    let zr = tape.add(a, b)?;
    let zr = tape.add(zr, w.b_zr)?;
    let zr = tape.sigmoid(zr);
    let z = tape.slice_cols(zr, 0, hs)?;
    let r = tape.slice_cols(zr, hs, hs)?;
    let rh = tape.mul(r, h)?;
    let a = tape.matmul(x, w.w_h)?;
    let b = tape.matmul(rh, w.u_h)?;
    let cand = tape.add(a, b)?;
    let cand = tape.add(cand, w.b_h)?;
    let cand = tape.tanh(cand);
    let keep = tape.one_minus(z);
    let old = tape.mul(keep, h)?;
    let new = tape.mul(z, cand)?;
    tape.add(old, new)
}

/// A question ready for the encoder.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub ctx: QuestionContext,
    pub graph: QuestionGraph,
    node_ids: Vec<usize>,
    mean_adj: Tensor,
}

#[derive(Clone, Debug)]
struct Ids {
    node_emb: ParamId,
    hop_w: Vec<ParamId>,
    hop_b: Vec<ParamId>,
    graph_w: ParamId,
    graph_b: ParamId,
    sym_emb: ParamId,
    w_zr: ParamId,
    u_zr: ParamId,
    b_zr: ParamId,
    w_h: ParamId,
    u_h: ParamId,
    b_h: ParamId,
    att_w: ParamId,
    att_u: ParamId,
    att_v: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl Ids {
    fn lookup(store: &ParameterStore, hops: usize) -> Result<Self> {
        let id = |n: &str| store.id(n).ok_or_else(|| ModelError::Tensor(TensorError::UnknownParameter(n.to_string())));
        Ok(Ids {
            node_emb: id("node_emb")?,
            hop_w: (0..hops).map(|k| id(&format!("hop{k}.w"))).collect::<Result<_>>()?,
            hop_b: (0..hops).map(|k| id(&format!("hop{k}.b"))).collect::<Result<_>>()?,
            graph_w: id("graph.w")?,
            graph_b: id("graph.b")?,
            sym_emb: id("sym_emb")?,
            w_zr: id("gru.w_zr")?,
            u_zr: id("gru.u_zr")?,
            b_zr: id("gru.b_zr")?,
            w_h: id("gru.w_h")?,
            u_h: id("gru.u_h")?,
            b_h: id("gru.b_h")?,
            att_w: id("att.w")?,
            att_u: id("att.u")?,
            att_v: id("att.v")?,
            out_w: id("out.w")?,
            out_b: id("out.b")?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    node_symbols: Vec<String>,
    templates: Vec<Vec<String>>,
    step_limit: usize,
}

pub struct Graph2Seq {
    pub config: ModelConfig,
    pub nodes: Vocab,
    pub space: OutputSpace,
    pub step_limit: usize,
    pub params: ParameterStore,
    ids: Ids,
}

struct Encoded {
    nodes: Var,
    proj: Var,
    init: Var,
}

#[derive(Clone, Copy)]
struct DecState {
    h: Var,
    c: Var,
    prev: usize,
    blk: Option<Var>,
}

/// Controller bookkeeping for one hypothesis.
#[derive(Clone, Debug, Default)]
struct CtrlState {
    asm: AssemblyState,
    partial: Vec<usize>,
    legal: Vec<usize>,
}

#[derive(Clone)]
struct Hyp {
    symbols: Vec<usize>,
    logp: f64,
    st: DecState,
    ctrl: CtrlState,
    last_block: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub symbols: Vec<String>,
    pub blocks: std::result::Result<BlockSequence, DecodeError>,
    pub log_prob: f64,
    pub score: f64,
}

impl Graph2Seq {
    /// Builds vocabularies from `train` (question context and gold blocks) and
    /// initialises parameters from `seed`.
    pub fn new(
        config: ModelConfig,
        kg: &KnowledgeGraph,
        ordinals: &OrdinalLexicon,
        train: &[(QuestionContext, BlockSequence)],
        seed: u64,
    ) -> Result<Self> {
        let mut templates = catalog(kg, ordinals, config.max_pointers);
        for (ctx, gold) in train {
            for b in gold {
                if let SemanticBlock::Entity {
                    ty,
                    constraint: Some((attr, value)),
                } = b
                {
                    let linked = ctx.candidates.iter().take(config.max_pointers).any(|c| {
                        let (a, v) = c.constraint();
                        c.ty() == ty && a == attr && v == *value
                    });
                    let t = b.map_value(|v| ValueSlot::Const(v.clone()));
                    if !linked && !templates.contains(&t) {
                        templates.push(t);
                    }
                }
            }
        }
        let space = OutputSpace::new(kg, templates, config.decomposed)?;
        let mut nodes = Vocab::new();
        let mut total = 0usize;
        for (ctx, gold) in train {
            for l in &to_question_graph(ctx, config.graph_mode).labels {
                nodes.add(l);
            }
            total += space.encode(gold, &ctx.candidates, config.max_pointers)?.len();
        }
        let avg = if train.is_empty() { 4.0 } else { total as f64 / train.len() as f64 };
        let step_limit = (8.0 * avg).ceil() as usize;
        let params = Self::init_params(&config, nodes.len(), space.len(), seed)?;
        let ids = Ids::lookup(&params, config.hops)?;
        Ok(Graph2Seq {
            config,
            nodes,
            space,
            step_limit,
            params,
            ids,
        })
    }

    fn init_params(cfg: &ModelConfig, n_nodes: usize, n_syms: usize, seed: u64) -> Result<ParameterStore> {
        let (d, h) = (cfg.node_dim, cfg.hidden);
        let input = d + if cfg.decomposed { d } else { 0 } + d;
        let mut s = ParameterStore::new(seed);
        s.normal("node_emb", n_nodes, d, 0.1)?;
        for k in 0..cfg.hops {
            s.xavier(format!("hop{k}.w"), 2 * d, d)?;
            s.zeros(format!("hop{k}.b"), 1, d)?;
        }
        s.xavier("graph.w", d, h)?;
        s.zeros("graph.b", 1, h)?;
        s.normal("sym_emb", n_syms, d, 0.1)?;
        s.xavier("gru.w_zr", input, 2 * h)?;
        s.xavier("gru.u_zr", h, 2 * h)?;
        s.zeros("gru.b_zr", 1, 2 * h)?;
        s.xavier("gru.w_h", input, h)?;
        s.xavier("gru.u_h", h, h)?;
        s.zeros("gru.b_h", 1, h)?;
        s.xavier("att.w", d, h)?;
        s.xavier("att.u", h, h)?;
        s.xavier("att.v", h, 1)?;
        s.xavier("out.w", h + d, n_syms)?;
        s.zeros("out.b", 1, n_syms)?;
        Ok(s)
    }

    /// Replaces every parameter (e.g. after loading a checkpoint).
    pub fn set_params(&mut self, params: ParameterStore) -> Result<()> {
        self.ids = Ids::lookup(&params, self.config.hops)?;
        self.params = params;
        Ok(())
    }

    pub fn prepare(&self, ctx: QuestionContext) -> Prepared {
        let graph = to_question_graph(&ctx, self.config.graph_mode);
        let node_ids = graph.labels.iter().map(|l| self.nodes.id(l)).collect();
        let n = graph.len();
        let mut mean_adj = Tensor::zeros(n, n);
        for (i, nb) in graph.adjacency().iter().enumerate() {
            for &j in nb {
                mean_adj.data_mut()[i * n + j] += 1.0 / nb.len() as f64;
            }
        }
        Prepared {
            ctx,
            graph,
            node_ids,
            mean_adj,
        }
    }

    pub fn encode_gold(&self, p: &Prepared, gold: &[SemanticBlock]) -> Result<Vec<usize>> {
        self.space.encode(gold, &p.ctx.candidates, self.config.max_pointers)
    }

    fn encode(&self, tape: &mut Tape<'_>, p: &Prepared) -> Result<Encoded> {
        if p.graph.is_empty() {
            return Err(ModelError::EmptyGraph);
        }
        let emb = tape.param(self.ids.node_emb);
        let mut h = tape.gather(emb, &p.node_ids)?;
        let adj = tape.constant(p.mean_adj.clone());
        for k in 0..self.config.hops {
            let (w, b) = (tape.param(self.ids.hop_w[k]), tape.param(self.ids.hop_b[k]));
            h = aggregate_hop(tape, h, adj, w, b)?;
        }
        let pooled = match self.config.pooling {
            Pooling::Max => tape.max_rows(h)?,
            Pooling::Mean => tape.mean_rows(h),
        };
        let (gw, gb) = (tape.param(self.ids.graph_w), tape.param(self.ids.graph_b));
        let init = tape.matmul(pooled, gw)?;
        let init = tape.add(init, gb)?;
        let aw = tape.param(self.ids.att_w);
        let proj = tape.matmul(h, aw)?;
        Ok(Encoded { nodes: h, proj, init })
    }

    fn block_embedding_var(&self, tape: &mut Tape<'_>, comps: &[usize]) -> Result<Var> {
        let emb = tape.param(self.ids.sym_emb);
        let rows = tape.gather(emb, comps)?;
        Ok(tape.mean_rows(rows))
    }

    fn step(&self, tape: &mut Tape<'_>, enc: &Encoded, st: &DecState) -> Result<(Var, Var, Var)> {
        let d = self.config.node_dim;
        let emb = tape.param(self.ids.sym_emb);
        let e = tape.gather(emb, &[st.prev])?;
        let mut parts = vec![e];
        if self.config.decomposed {
            let blk = match st.blk {
                Some(b) => b,
                None => tape.constant(Tensor::zeros(1, d)),
            };
            parts.push(blk);
        }
        parts.push(st.c);
        let x = tape.concat_cols(&parts)?;
        let w = GruWeights {
            w_zr: tape.param(self.ids.w_zr),
            u_zr: tape.param(self.ids.u_zr),
            b_zr: tape.param(self.ids.b_zr),
            w_h: tape.param(self.ids.w_h),
            u_h: tape.param(self.ids.u_h),
            b_h: tape.param(self.ids.b_h),
        };
        let h = gru_cell(tape, x, st.h, &w)?;
        let c = self.attend(tape, enc, h)?;
        let hc = tape.concat_cols(&[h, c])?;
        let hc = tape.dropout(hc, self.config.dropout);
        let (ow, ob) = (tape.param(self.ids.out_w), tape.param(self.ids.out_b));
        let logits = tape.matmul(hc, ow)?;
        let logits = tape.add(logits, ob)?;
        Ok((h, c, logits))
    }

    fn attention_weights(&self, tape: &mut Tape<'_>, enc: &Encoded, h: Var) -> Result<Var> {
        let (au, av) = (tape.param(self.ids.att_u), tape.param(self.ids.att_v));
        let q = tape.matmul(h, au)?;
        let e = tape.add_row(enc.proj, q)?;
        let e = tape.tanh(e);
        let s = tape.matmul(e, av)?;
        let s = tape.transpose(s);
        Ok(tape.softmax(s))
    }

    fn attend(&self, tape: &mut Tape<'_>, enc: &Encoded, h: Var) -> Result<Var> {
        let alpha = self.attention_weights(tape, enc, h)?;
        Ok(tape.matmul(alpha, enc.nodes)?)
    }

    fn initial(&self, tape: &mut Tape<'_>, enc: &Encoded) -> DecState {
        let c = tape.constant(Tensor::zeros(1, self.config.node_dim));
        DecState {
            h: enc.init,
            c,
            prev: START_ID,
            blk: None,
        }
    }

    /// Summed teacher-forced negative log-likelihood of `gold` symbols.
    pub fn loss(&self, tape: &mut Tape<'_>, p: &Prepared, gold: &[usize]) -> Result<Var> {
        let enc = self.encode(tape, p)?;
        let mut st = self.initial(tape, &enc);
        let mut rows = Vec::with_capacity(gold.len());
        let mut partial = Vec::new();
        for &y in gold {
            let (h, c, logits) = self.step(tape, &enc, &st)?;
            rows.push(logits);
            st.h = h;
            st.c = c;
            st.prev = y;
            if self.config.decomposed {
                if y == BOUNDARY_ID {
                    st.blk = Some(self.block_embedding_var(tape, &partial)?);
                    partial.clear();
                } else {
                    partial.push(y);
                }
            }
        }
        let all = tape.concat_rows(&rows)?;
        Ok(tape.cross_entropy(all, gold)?)
    }

    /// Sum of per-step log-probabilities of `gold` under teacher forcing.
    pub fn sequence_log_prob(&self, p: &Prepared, gold: &[SemanticBlock]) -> Result<f64> {
        let syms = self.encode_gold(p, gold)?;
        let mut tape = Tape::with_params(&self.params);
        let l = self.loss(&mut tape, p, &syms)?;
        Ok(-tape.value(l).item())
    }

    /// Attention weights for the first decoding step.
    pub fn first_attention(&self, p: &Prepared) -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(&self.params);
        let enc = self.encode(&mut tape, p)?;
        let a = self.attention_weights(&mut tape, &enc, enc.init)?;
        Ok(tape.value(a).data().to_vec())
    }

    /// Mean component embedding of a template.
    pub fn block_embedding(&self, template: usize) -> Vec<f64> {
        let emb = self.params.get(self.ids.sym_emb);
        let comps = self.space.spelling(template);
        let d = emb.cols();
        let mut out = vec![0.0; d];
        for &c in comps {
            for (o, x) in out.iter_mut().zip(emb.row_slice(c)) {
                *o += x / comps.len() as f64;
            }
        }
        out
    }

    fn legal_templates(&self, asm: &AssemblyState, cands: &[Candidate], used: usize) -> Vec<usize> {
        let next = legal_next(asm);
        (0..self.space.templates.len())
            .filter(|&t| {
                if !next.admits(self.space.output(t)) {
                    return false;
                }
                if let SemanticBlock::Entity {
                    ty,
                    constraint: Some((attr, ValueSlot::Pointer(i))),
                } = &self.space.templates[t]
                {
                    match cands.get(*i) {
                        Some(c) if c.ty() == ty && c.constraint().0 == attr => {}
                        _ => return false,
                    }
                }
                let mut after = asm.clone();
                if after.push_typed(&self.space.templates[t], self.space.output(t).clone()).is_err() {
                    return false;
                }
                used + self.space.cost(t) + self.space.min_completion(&after) < self.step_limit
            })
            .collect()
    }

    /// Allowed next symbols; caches the legal templates at block starts.
    fn mask(&self, cs: &mut CtrlState, cands: &[Candidate], used: usize) -> Vec<bool> {
        let mut allowed = vec![false; self.space.len()];
        if !self.config.controller {
            allowed.iter_mut().for_each(|a| *a = true);
            allowed[UNK_ID] = false;
            allowed[START_ID] = false;
            if !self.space.decomposed {
                allowed[BOUNDARY_ID] = false;
            }
            return allowed;
        }
        if cs.partial.is_empty() {
            cs.legal = self.legal_templates(&cs.asm, cands, used);
            if legal_next(&cs.asm).allows_end() {
                allowed[END_ID] = true;
            }
        }
        let k = cs.partial.len();
        for &t in &cs.legal {
            let s = self.space.spelling(t);
            if s.len() >= k && s[..k] == cs.partial[..] {
                match s.get(k) {
                    Some(&next) => allowed[next] = true,
                    None => allowed[BOUNDARY_ID] = true,
                }
            }
        }
        allowed
    }

    fn advance_ctrl(&self, cs: &mut CtrlState, sym: usize) {
        if !self.config.controller || sym == END_ID {
            return;
        }
        let done = if self.space.decomposed {
            if sym == BOUNDARY_ID {
                true
            } else {
                cs.partial.push(sym);
                false
            }
        } else {
            cs.partial.push(sym);
            true
        };
        if done {
            if let Some(&t) = self.space.by_spelling.get(&cs.partial) {
                let _ = cs.asm.push_typed(&self.space.templates[t], self.space.output(t).clone());
            }
            cs.partial.clear();
        }
    }

    /// Samples symbols uniformly among those the controller allows.
    pub fn controller_walk<R: rand::Rng>(&self, cands: &[Candidate], rng: &mut R) -> Vec<usize> {
        let mut cs = CtrlState::default();
        let mut out = Vec::new();
        while out.len() < self.step_limit {
            let allowed = self.mask(&mut cs, cands, out.len());
            let opts: Vec<usize> = (0..allowed.len()).filter(|&s| allowed[s]).collect();
            if opts.is_empty() {
                break;
            }
            let s = opts[rng.gen_range(0..opts.len())];
            out.push(s);
            if s == END_ID {
                break;
            }
            self.advance_ctrl(&mut cs, s);
        }
        out
    }

    /// Index of the first gold symbol the controller would mask, if any.
    pub fn first_masked_gold(&self, p: &Prepared, gold: &[usize]) -> Option<usize> {
        let mut cs = CtrlState::default();
        for (i, &y) in gold.iter().enumerate() {
            if !self.mask(&mut cs, &p.ctx.candidates, i)[y] {
                return Some(i);
            }
            self.advance_ctrl(&mut cs, y);
        }
        None
    }

    /// Length-normalised beam search; beam 1 is greedy decoding.
    pub fn decode(&self, p: &Prepared, beam: usize) -> Result<Decoded> {
        let beam = beam.max(1);
        let mut tape = Tape::with_params(&self.params);
        let enc = self.encode(&mut tape, p)?;
        let cands = &p.ctx.candidates;
        let mut live = vec![Hyp {
            symbols: Vec::new(),
            logp: 0.0,
            st: self.initial(&mut tape, &enc),
            ctrl: CtrlState::default(),
            last_block: Vec::new(),
        }];
        let mut finished: Vec<Hyp> = Vec::new();
        for t in 0..self.step_limit {
            let mut pool: Vec<(f64, usize, usize, Var, Var)> = Vec::new();
            let mut ctrls = Vec::with_capacity(live.len());
            for (hi, hyp) in live.iter().enumerate() {
                let (h, c, logits) = self.step(&mut tape, &enc, &hyp.st)?;
                let mut cs = hyp.ctrl.clone();
                let allowed = self.mask(&mut cs, cands, t);
                ctrls.push(cs);
                let row = tape.value(logits).data();
                let max = row
                    .iter()
                    .zip(&allowed)
                    .filter(|(_, &a)| a)
                    .map(|(x, _)| *x)
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let lse = max
                    + row
                        .iter()
                        .zip(&allowed)
                        .filter(|(_, &a)| a)
                        .map(|(x, _)| (x - max).exp())
                        .sum::<f64>()
                        .ln();
                let mut local: Vec<(f64, usize)> = row
                    .iter()
                    .enumerate()
                    .filter(|(s, _)| allowed[*s])
                    .map(|(s, x)| (x - lse, s))
                    .collect();
                local.sort_by(|a, b| b.0.total_cmp(&a.0));
                local.truncate(beam);
                for (lp, s) in local {
                    pool.push((hyp.logp + lp, hi, s, h, c));
                }
            }
            if pool.is_empty() {
                break;
            }
            pool.sort_by(|a, b| b.0.total_cmp(&a.0));
            pool.truncate(beam - finished.len().min(beam - 1));
            let mut next = Vec::with_capacity(pool.len());
            for (logp, hi, s, h, c) in pool {
                let parent = &live[hi];
                let mut symbols = parent.symbols.clone();
                symbols.push(s);
                let mut ctrl = ctrls[hi].clone();
                self.advance_ctrl(&mut ctrl, s);
                let mut st = DecState { h, c, prev: s, blk: parent.st.blk };
                let mut last_block = parent.last_block.clone();
                if self.config.decomposed && s != END_ID {
                    if s == BOUNDARY_ID {
                        st.blk = Some(self.block_embedding_var(&mut tape, &last_block)?);
                        last_block.clear();
                    } else {
                        last_block.push(s);
                    }
                }
                let hyp = Hyp {
                    symbols,
                    logp,
                    st,
                    ctrl,
                    last_block,
                };
                if s == END_ID {
                    finished.push(hyp);
                } else {
                    next.push(hyp);
                }
            }
            live = next;
            if finished.len() >= beam || live.is_empty() {
                break;
            }
        }
        let norm = |h: &Hyp| h.logp / h.symbols.len().max(1) as f64;
        let best = finished
            .iter()
            .fold(None::<&Hyp>, |b, h| match b {
                Some(b) if norm(b) >= norm(h) => Some(b),
                _ => Some(h),
            })
            .or_else(|| live.first())
            .cloned();
        let Some(best) = best else {
            return Ok(Decoded {
                symbols: Vec::new(),
                blocks: Err(DecodeError::Unfinished),
                log_prob: f64::NEG_INFINITY,
                score: f64::NEG_INFINITY,
            });
        };
        Ok(Decoded {
            symbols: best.symbols.iter().map(|&s| self.space.vocab.symbol(s).to_string()).collect(),
            blocks: self.space.to_blocks(&best.symbols, cands),
            log_prob: best.logp,
            score: norm(&best),
        })
    }

    /// Argmax decoding, independent of the beam search code path.
    pub fn greedy(&self, p: &Prepared) -> Result<Decoded> {
        let mut tape = Tape::with_params(&self.params);
        let enc = self.encode(&mut tape, p)?;
        let cands = &p.ctx.candidates;
        let mut st = self.initial(&mut tape, &enc);
        let mut cs = CtrlState::default();
        let mut symbols = Vec::new();
        let mut logp = 0.0;
        let mut block = Vec::new();
        for t in 0..self.step_limit {
            let (h, c, logits) = self.step(&mut tape, &enc, &st)?;
            let allowed = self.mask(&mut cs, cands, t);
            let row = tape.value(logits).data();
            let mut best: Option<usize> = None;
            for s in 0..row.len() {
                if allowed[s] && best.is_none_or(|b| row[s] > row[b]) {
                    best = Some(s);
                }
            }
            let Some(s) = best else { break };
            let max = row[s];
            let lse = max
                + row
                    .iter()
                    .zip(&allowed)
                    .filter(|(_, &a)| a)
                    .map(|(x, _)| (x - max).exp())
                    .sum::<f64>()
                    .ln();
            logp += row[s] - lse;
            symbols.push(s);
            self.advance_ctrl(&mut cs, s);
            st = DecState { h, c, prev: s, blk: st.blk };
            if s == END_ID {
                break;
            }
            if self.config.decomposed {
                if s == BOUNDARY_ID {
                    st.blk = Some(self.block_embedding_var(&mut tape, &block)?);
                    block.clear();
                } else {
                    block.push(s);
                }
            }
        }
        Ok(Decoded {
            symbols: symbols.iter().map(|&s| self.space.vocab.symbol(s).to_string()).collect(),
            blocks: self.space.to_blocks(&symbols, cands),
            log_prob: logp,
            score: logp / symbols.len().max(1) as f64,
        })
    }

    fn meta_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".meta.json");
        PathBuf::from(p)
    }

    /// Writes the parameter checkpoint at `path` and vocabularies beside it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_checkpoint(&self.params, path)?;
        let meta = Metadata {
            config: self.config.clone(),
            node_symbols: self.nodes.symbols()[1..].to_vec(),
            templates: self.space.templates.iter().map(components).collect(),
            step_limit: self.step_limit,
        };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| ModelError::Metadata(e.to_string()))?;
        std::fs::write(Self::meta_path(path), json).map_err(|e| ModelError::Metadata(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>, kg: &KnowledgeGraph) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(Self::meta_path(path)).map_err(|e| ModelError::Metadata(e.to_string()))?;
        let meta: Metadata = serde_json::from_str(&text).map_err(|e| ModelError::Metadata(e.to_string()))?;
        let templates = meta
            .templates
            .iter()
            .map(|c| template_from_components(c).ok_or_else(|| ModelError::Metadata(format!("bad template {c:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let space = OutputSpace::new(kg, templates, meta.config.decomposed)?;
        let nodes = Vocab::build(meta.node_symbols.iter().map(String::as_str));
        let params = load_checkpoint(path)?;
        let ids = Ids::lookup(&params, meta.config.hops)?;
        Ok(Graph2Seq {
            config: meta.config,
            nodes,
            space,
            step_limit: meta.step_limit,
            params,
            ids,
        })
    }
}
