//! Contextual token encoder: n-gram embeddings, absolute and relative
//! multi-head attention, BiLSTM, gated fusion and a linear-chain CRF, wired
//! together as a B/I/O mention tagger.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::KnowledgeGraph;
use crate::prep::{tokenize, Candidate, LexTarget, Lexicon, QuestionContext, Span, Vocab};
use crate::tensor::{
    load_checkpoint, save_checkpoint, Adam, AdamConfig, CustomOp, ParamId, ParameterStore, Tape, Tensor,
    TensorError, Var,
};

type Result<T> = std::result::Result<T, TensorError>;

const LN_EPS: f64 = 1e-6;
const BOUNDARY: &str = "</w>";

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `PE(t)[2i] = sin(t / 10000^(2i/d))`, `PE(t)[2i+1] = cos(...)`.
pub fn sinusoidal_pe(t: f64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|k| {
            let angle = t / 10000f64.powf((k - k % 2) as f64 / d as f64);
            if k % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

pub fn positional_table(n: usize, d: usize) -> Tensor {
    Tensor::matrix(n, d, (0..n).flat_map(|t| sinusoidal_pe(t as f64, d)).collect())
}

/// Relative-offset table for query position `t`: row `j` holds the encoding
/// of `positions[t] - positions[j]`.
pub fn relative_table(positions: &[i64], t: usize, dk: usize) -> Tensor {
    let rows = positions
        .iter()
        .flat_map(|&pj| sinusoidal_pe((positions[t] - pj) as f64, dk))
        .collect();
    Tensor::matrix(positions.len(), dk, rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Absolute,
    Relative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub model_dim: usize,
    pub head_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub lstm_hidden: usize,
    pub labels: Vec<String>,
    pub fusion: bool,
    pub attention: AttentionKind,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            model_dim: 32,
            head_dim: 8,
            heads: 4,
            ffn_dim: 64,
            lstm_hidden: 16,
            labels: BioLabel::ALL.iter().map(|l| l.to_string()).collect(),
            fusion: true,
            attention: AttentionKind::Relative,
        }
    }
}

impl EncoderConfig {
    pub fn check(&self) -> std::result::Result<(), TaggerError> {
        let dims = [self.model_dim, self.head_dim, self.heads, self.ffn_dim, self.lstm_hidden];
        if dims.contains(&0) || self.labels.is_empty() {
            return Err(TaggerError::Config("dimensions and label set must be non-empty".into()));
        }
        if self.model_dim != self.heads * self.head_dim {
            return Err(TaggerError::Config(format!(
                "model dim {} != {} heads x {}",
                self.model_dim, self.heads, self.head_dim
            )));
        }
        if self.fusion && 2 * self.lstm_hidden != self.model_dim {
            return Err(TaggerError::Config("fusion needs 2 x lstm hidden = model dim".into()));
        }
        Ok(())
    }
}

pub struct AttentionOutput {
    pub output: Var,
    /// One `n x n` weight matrix per head.
    pub weights: Vec<Var>,
}

/// Scaled dot-product multi-head attention with output projection.
/// Weight matrices are `d x d`; head `i` uses columns `i*dk..(i+1)*dk`.
pub fn absolute_attention(
    tape: &mut Tape<'_>,
    h: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_m: Var,
    heads: usize,
) -> Result<AttentionOutput> {
    let d = tape.value(h).cols();
    if !d.is_multiple_of(heads) {
        return Err(TensorError::Invalid {
            op: "absolute_attention",
            message: format!("{d} columns do not split into {heads} heads"),
        });
    }
    let dk = d / heads;
    let q = tape.matmul(h, w_q)?;
    let k = tape.matmul(h, w_k)?;
    let v = tape.matmul(h, w_v)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for i in 0..heads {
        let qi = tape.slice_cols(q, i * dk, dk)?;
        let ki = tape.slice_cols(k, i * dk, dk)?;
        let vi = tape.slice_cols(v, i * dk, dk)?;
        let kt = tape.transpose(ki);
        let s = tape.matmul(qi, kt)?;
        let s = tape.scale(s, 1.0 / (dk as f64).sqrt());
        let a = tape.softmax(s);
        outs.push(tape.matmul(a, vi)?);
        weights.push(a);
    }
    let cat = tape.concat_cols(&outs)?;
    Ok(AttentionOutput {
        output: tape.matmul(cat, w_m)?,
        weights,
    })
}

/// Unscaled relative scores for one head:
/// `A[t,j] = q_t k_j + q_t r_{t-j} + u k_j + v r_{t-j}`.
/// `rel[t]` is the `n x dk` table of offsets from `t`.
pub fn relative_scores(tape: &mut Tape<'_>, q: Var, k: Var, u: Var, v: Var, rel: &[Tensor]) -> Result<Var> {
    let n = tape.value(q).rows();
    let qu = tape.add_row(q, u)?;
    let kt = tape.transpose(k);
    let content = tape.matmul(qu, kt)?;
    let qv = tape.add_row(q, v)?;
    let mut rows = Vec::with_capacity(n);
    for (t, r) in rel.iter().enumerate().take(n) {
        let qt = tape.row(qv, t)?;
        let rt = tape.constant(r.transpose());
        rows.push(tape.matmul(qt, rt)?);
    }
    let position = tape.concat_rows(&rows)?;
    tape.add(content, position)
}

/// Relative multi-head attention. Keys are untransformed per-head slices of
/// `h`; `u` and `v` are `1 x d` rows holding every head's biases.
#[allow(clippy::too_many_arguments)]
pub fn relative_attention(
    tape: &mut Tape<'_>,
    h: Var,
    w_q: Var,
    w_v: Var,
    u: Var,
    v: Var,
    heads: usize,
    positions: &[i64],
) -> Result<AttentionOutput> {
    let (n, d) = tape.value(h).dims();
    if d % heads != 0 || positions.len() != n {
        return Err(TensorError::Invalid {
            op: "relative_attention",
            message: format!("{n}x{d} input, {heads} heads, {} positions", positions.len()),
        });
    }
    let dk = d / heads;
    let rel: Vec<Tensor> = (0..n).map(|t| relative_table(positions, t, dk)).collect();
    let q = tape.matmul(h, w_q)?;
    let val = tape.matmul(h, w_v)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for i in 0..heads {
        let qi = tape.slice_cols(q, i * dk, dk)?;
        let ki = tape.slice_cols(h, i * dk, dk)?;
        let vi = tape.slice_cols(val, i * dk, dk)?;
        let ui = tape.slice_cols(u, i * dk, dk)?;
        let bi = tape.slice_cols(v, i * dk, dk)?;
        let s = relative_scores(tape, qi, ki, ui, bi, &rel)?;
        let a = tape.softmax(s);
        outs.push(tape.matmul(a, vi)?);
        weights.push(a);
    }
    Ok(AttentionOutput {
        output: tape.concat_cols(&outs)?,
        weights,
    })
}

/// Row-wise layer normalisation with gain and bias.
pub fn layer_norm(tape: &mut Tape<'_>, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.row_norm(x, LN_EPS);
    let n = tape.mul_row(n, gain)?;
    tape.add_row(n, bias)
}

/// `max(0, x W1 + b1) W2 + b2`.
pub fn feed_forward(tape: &mut Tape<'_>, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let a = tape.matmul(x, w1)?;
    let a = tape.add_row(a, b1)?;
    let a = tape.relu(a);
    let o = tape.matmul(a, w2)?;
    tape.add_row(o, b2)
}

#[derive(Clone, Copy)]
pub struct LstmWeights {
    /// `in x 4H`, gates in the order input, forget, output, candidate.
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

fn lstm_run(tape: &mut Tape<'_>, rows: &[Var], p: LstmWeights, hidden: usize) -> Result<Vec<Var>> {
    let mut h = tape.constant(Tensor::zeros(1, hidden));
    let mut c = tape.constant(Tensor::zeros(1, hidden));
    let mut out = Vec::with_capacity(rows.len());
    for &x in rows {
        let a = tape.matmul(x, p.w)?;
        let r = tape.matmul(h, p.u)?;
        let g = tape.add(a, r)?;
        let g = tape.add(g, p.b)?;
        let i = tape.slice_cols(g, 0, hidden)?;
        let f = tape.slice_cols(g, hidden, hidden)?;
        let o = tape.slice_cols(g, 2 * hidden, hidden)?;
        let cand = tape.slice_cols(g, 3 * hidden, hidden)?;
        let (i, f, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.sigmoid(o));
        let cand = tape.tanh(cand);
        let keep = tape.mul(f, c)?;
        let add = tape.mul(i, cand)?;
        c = tape.add(keep, add)?;
        let tc = tape.tanh(c);
        h = tape.mul(o, tc)?;
        out.push(h);
    }
    Ok(out)
}

/// Forward and backward LSTMs; row `t` is `[fwd_t ; bwd_t]`.
pub fn bilstm(tape: &mut Tape<'_>, x: Var, fwd: LstmWeights, bwd: LstmWeights) -> Result<Var> {
    let hidden = tape.value(fwd.u).rows();
    let n = tape.value(x).rows();
    let rows: Vec<Var> = (0..n).map(|t| tape.row(x, t)).collect::<Result<_>>()?;
    let f = lstm_run(tape, &rows, fwd, hidden)?;
    let rev: Vec<Var> = rows.iter().rev().copied().collect();
    let mut b = lstm_run(tape, &rev, bwd, hidden)?;
    b.reverse();
    let paired: Vec<Var> = f
        .into_iter()
        .zip(b)
        .map(|(a, b)| tape.concat_cols(&[a, b]))
        .collect::<Result<_>>()?;
    tape.concat_rows(&paired)
}

/// Gate `z = sigmoid(tanh(x_t W1 + x_b W2) W3)`; returns `z*x_t + (1-z)*x_b`
/// and the gate.
pub fn fuse(tape: &mut Tape<'_>, xt: Var, xb: Var, w1: Var, w2: Var, w3: Var) -> Result<(Var, Var)> {
    if tape.value(xt).shape() != tape.value(xb).shape() {
        return Err(mismatch("fuse", tape.value(xt), tape.value(xb)));
    }
    let a = tape.matmul(xt, w1)?;
    let b = tape.matmul(xb, w2)?;
    let s = tape.add(a, b)?;
    let s = tape.tanh(s);
    let z = tape.matmul(s, w3)?;
    let z = tape.sigmoid(z);
    let left = tape.mul(z, xt)?;
    let nz = tape.one_minus(z);
    let right = tape.mul(nz, xb)?;
    Ok((tape.add(left, right)?, z))
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Linear-chain CRF scores. `transitions` is `(L+2) x (L+2)`: row/column `L`
/// is the start state and `L+1` the stop state.
pub struct Crf;

impl Crf {
    fn labels(emissions: &Tensor) -> (usize, usize, usize) {
        let l = emissions.cols();
        (l, l, l + 1)
    }

    pub fn score(emissions: &Tensor, transitions: &Tensor, labels: &[usize]) -> f64 {
        let (_, start, stop) = Self::labels(emissions);
        let mut prev = start;
        let mut s = 0.0;
        for (t, &y) in labels.iter().enumerate() {
            s += transitions.at(prev, y) + emissions.at(t, y);
            prev = y;
        }
        s + transitions.at(prev, stop)
    }

    fn alphas(emissions: &Tensor, transitions: &Tensor) -> Vec<Vec<f64>> {
        let (l, start, _) = Self::labels(emissions);
        let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(emissions.rows());
        for t in 0..emissions.rows() {
            let row = (0..l)
                .map(|y| {
                    let e = emissions.at(t, y);
                    if t == 0 {
                        transitions.at(start, y) + e
                    } else {
                        log_sum_exp((0..l).map(|p| alpha[t - 1][p] + transitions.at(p, y))) + e
                    }
                })
                .collect();
            alpha.push(row);
        }
        alpha
    }

    fn betas(emissions: &Tensor, transitions: &Tensor) -> Vec<Vec<f64>> {
        let (l, _, stop) = Self::labels(emissions);
        let n = emissions.rows();
        let mut beta = vec![vec![0.0; l]; n];
        for t in (0..n).rev() {
            for y in 0..l {
                beta[t][y] = if t + 1 == n {
                    transitions.at(y, stop)
                } else {
                    log_sum_exp((0..l).map(|nx| transitions.at(y, nx) + emissions.at(t + 1, nx) + beta[t + 1][nx]))
                };
            }
        }
        beta
    }

    /// Log partition function by the forward algorithm.
    pub fn log_partition(emissions: &Tensor, transitions: &Tensor) -> f64 {
        let (l, _, stop) = Self::labels(emissions);
        if emissions.rows() == 0 {
            return transitions.at(l, stop);
        }
        let alpha = Self::alphas(emissions, transitions);
        let last = alpha.last().expect("non-empty");
        log_sum_exp((0..l).map(|y| last[y] + transitions.at(y, stop)))
    }

    pub fn log_likelihood_value(emissions: &Tensor, transitions: &Tensor, labels: &[usize]) -> f64 {
        Self::score(emissions, transitions, labels) - Self::log_partition(emissions, transitions)
    }

    /// Per-position label marginals and expected transition counts.
    pub fn marginals(emissions: &Tensor, transitions: &Tensor) -> (Tensor, Tensor) {
        let (l, start, stop) = Self::labels(emissions);
        let n = emissions.rows();
        let z = Self::log_partition(emissions, transitions);
        let alpha = Self::alphas(emissions, transitions);
        let beta = Self::betas(emissions, transitions);
        let mut unary = Tensor::zeros(n, l);
        let mut pair = Tensor::zeros(l + 2, l + 2);
        for t in 0..n {
            for y in 0..l {
                let p = (alpha[t][y] + beta[t][y] - z).exp();
                unary.data_mut()[t * l + y] = p;
                if t == 0 {
                    pair.data_mut()[start * (l + 2) + y] += p;
                }
                if t + 1 == n {
                    pair.data_mut()[y * (l + 2) + stop] += p;
                }
            }
            if t > 0 {
                for a in 0..l {
                    for b in 0..l {
                        let p = (alpha[t - 1][a] + transitions.at(a, b) + emissions.at(t, b) + beta[t][b] - z).exp();
                        pair.data_mut()[a * (l + 2) + b] += p;
                    }
                }
            }
        }
        (unary, pair)
    }

    /// Highest-scoring label sequence and its score.
    pub fn viterbi(emissions: &Tensor, transitions: &Tensor) -> (Vec<usize>, f64) {
        let (l, start, stop) = Self::labels(emissions);
        let n = emissions.rows();
        if n == 0 {
            return (Vec::new(), transitions.at(start, stop));
        }
        let mut best = vec![vec![0.0; l]; n];
        let mut back = vec![vec![0usize; l]; n];
        for y in 0..l {
            best[0][y] = transitions.at(start, y) + emissions.at(0, y);
        }
        for t in 1..n {
            for y in 0..l {
                let (arg, s) = (0..l)
                    .map(|p| (p, best[t - 1][p] + transitions.at(p, y)))
                    .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
                best[t][y] = s + emissions.at(t, y);
                back[t][y] = arg;
            }
        }
        let (mut y, score) = (0..l)
            .map(|y| (y, best[n - 1][y] + transitions.at(y, stop)))
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        let mut path = vec![y; n];
        for t in (1..n).rev() {
            y = back[t][y];
            path[t - 1] = y;
        }
        (path, score)
    }
}

struct CrfLikelihood {
    labels: Vec<usize>,
}

impl CustomOp for CrfLikelihood {
    fn name(&self) -> &'static str {
        "crf_log_likelihood"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (emissions, transitions) = (inputs[0], inputs[1]);
        let g = grad.item();
        let (l, start, stop) = Crf::labels(emissions);
        let (mut ge, mut gt) = Crf::marginals(emissions, transitions);
        ge.scale_assign(-g);
        gt.scale_assign(-g);
        let mut prev = start;
        for (t, &y) in self.labels.iter().enumerate() {
            ge.data_mut()[t * l + y] += g;
            gt.data_mut()[prev * (l + 2) + y] += g;
            prev = y;
        }
        gt.data_mut()[prev * (l + 2) + stop] += g;
        vec![ge, gt]
    }
}

/// `log P(labels | emissions)` as a differentiable scalar.
pub fn crf_log_likelihood(tape: &mut Tape<'_>, emissions: Var, transitions: Var, labels: &[usize]) -> Result<Var> {
    let (e, tr) = (tape.value(emissions), tape.value(transitions));
    let l = e.cols();
    if tr.dims() != (l + 2, l + 2) || labels.len() != e.rows() || labels.iter().any(|&y| y >= l) {
        return Err(mismatch("crf_log_likelihood", e, tr));
    }
    let v = Crf::log_likelihood_value(e, tr, labels);
    Ok(tape.custom(
        &[emissions, transitions],
        Tensor::scalar(v),
        Box::new(CrfLikelihood { labels: labels.to_vec() }),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BioLabel {
    O,
    B,
    I,
}

impl BioLabel {
    pub const ALL: [BioLabel; 3] = [BioLabel::O, BioLabel::B, BioLabel::I];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "O" => Some(BioLabel::O),
            "B-ENT" => Some(BioLabel::B),
            "I-ENT" => Some(BioLabel::I),
            _ => None,
        }
    }
}

impl fmt::Display for BioLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BioLabel::O => "O",
            BioLabel::B => "B-ENT",
            BioLabel::I => "I-ENT",
        })
    }
}

/// Spans covered by B/I runs; a stray I starts a new span.
pub fn bio_spans(labels: &[BioLabel]) -> Vec<Span> {
    let mut out: Vec<Span> = Vec::new();
    let mut open: Option<usize> = None;
    for (i, l) in labels.iter().enumerate() {
        match l {
            BioLabel::O => {
                if let Some(s) = open.take() {
                    out.push(Span { start: s, end: i });
                }
            }
            BioLabel::B => {
                if let Some(s) = open.replace(i) {
                    out.push(Span { start: s, end: i });
                }
            }
            BioLabel::I => {
                open.get_or_insert(i);
            }
        }
    }
    if let Some(s) = open {
        out.push(Span { start: s, end: labels.len() });
    }
    out
}

/// B/I/O labels marking the linked mentions of a question.
pub fn mention_labels(ctx: &QuestionContext) -> Vec<BioLabel> {
    let mut labels = vec![BioLabel::O; ctx.words.len()];
    for c in &ctx.candidates {
        let s = c.span();
        labels[s.start] = BioLabel::B;
        for l in &mut labels[s.start + 1..s.end] {
            *l = BioLabel::I;
        }
    }
    labels
}

#[derive(Debug, Error)]
pub enum TaggerError {
    #[error("line {line}: {message}")]
    Data { line: usize, message: String },
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("tagger checkpoint {0}: {1}")]
    Checkpoint(String, String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Parses `question<TAB>labels` lines.
pub fn parse_tag_data(text: &str) -> std::result::Result<Vec<(Vec<String>, Vec<BioLabel>)>, TaggerError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| TaggerError::Data { line: i + 1, message };
        let (q, l) = line.split_once('\t').ok_or_else(|| err("expected question<TAB>labels".into()))?;
        let words = tokenize(q);
        let labels = l
            .split_whitespace()
            .map(|s| BioLabel::parse(s).ok_or_else(|| err(format!("unknown label '{s}'"))))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if labels.len() != words.len() {
            return Err(err(format!("{} tokens but {} labels", words.len(), labels.len())));
        }
        out.push((words, labels));
    }
    Ok(out)
}

pub fn write_tag_line(words: &[String], labels: &[BioLabel]) -> String {
    let l: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
    format!("{}\t{}", words.join(" "), l.join(" "))
}

#[derive(Serialize, Deserialize)]
struct TaggerMeta {
    config: EncoderConfig,
    unigrams: Vec<String>,
    bigrams: Vec<String>,
}

/// Mention tagger: embeddings, a relative (or absolute) attention block,
/// optionally fused with a BiLSTM view, and a CRF output layer.
pub struct Tagger {
    pub config: EncoderConfig,
    pub unigrams: Vocab,
    pub bigrams: Vocab,
    pub params: ParameterStore,
}

fn bigram(words: &[String], i: usize) -> String {
    format!("{} {}", words[i], words.get(i + 1).map_or(BOUNDARY, String::as_str))
}

impl Tagger {
    pub fn new(
        config: EncoderConfig,
        data: &[(Vec<String>, Vec<BioLabel>)],
        seed: u64,
    ) -> std::result::Result<Self, TaggerError> {
        config.check()?;
        let mut unigrams = Vocab::new();
        let mut bigrams = Vocab::new();
        for (w, _) in data {
            for i in 0..w.len() {
                unigrams.add(&w[i]);
                bigrams.add(&bigram(w, i));
            }
        }
        let d = config.model_dim;
        let l = config.labels.len();
        let hl = config.lstm_hidden;
        let mut p = ParameterStore::new(seed);
        p.normal("emb.uni", unigrams.len(), d / 2, 0.1)?;
        p.normal("emb.bi", bigrams.len(), d - d / 2, 0.1)?;
        p.xavier("att.q", d, d)?;
        p.xavier("att.k", d, d)?;
        p.xavier("att.v", d, d)?;
        p.xavier("att.m", d, d)?;
        p.zeros("att.u", 1, d)?;
        p.zeros("att.b", 1, d)?;
        for ln in ["ln1", "ln2"] {
            p.insert(format!("{ln}.g"), Tensor::full(1, d, 1.0))?;
            p.zeros(format!("{ln}.b"), 1, d)?;
        }
        p.xavier("ffn.w1", d, config.ffn_dim)?;
        p.zeros("ffn.b1", 1, config.ffn_dim)?;
        p.xavier("ffn.w2", config.ffn_dim, d)?;
        p.zeros("ffn.b2", 1, d)?;
        if config.fusion {
            for dir in ["fwd", "bwd"] {
                p.xavier(format!("lstm.{dir}.w"), d, 4 * hl)?;
                p.xavier(format!("lstm.{dir}.u"), hl, 4 * hl)?;
                p.zeros(format!("lstm.{dir}.b"), 1, 4 * hl)?;
            }
            for w in ["fuse.w1", "fuse.w2", "fuse.w3"] {
                p.xavier(w, d, d)?;
            }
        }
        p.xavier("emit.w", d, l)?;
        p.zeros("emit.b", 1, l)?;
        p.zeros("crf.trans", l + 2, l + 2)?;
        Ok(Tagger {
            config,
            unigrams,
            bigrams,
            params: p,
        })
    }

    fn id(&self, name: &str) -> Result<ParamId> {
        self.params
            .id(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    fn p(&self, tape: &mut Tape<'_>, name: &str) -> Result<Var> {
        Ok(tape.param(self.id(name)?))
    }

    /// `[unigram ; bigram]` embedding rows.
    pub fn embed(&self, tape: &mut Tape<'_>, words: &[String]) -> Result<Var> {
        let uni: Vec<usize> = words.iter().map(|w| self.unigrams.id(w)).collect();
        let bi: Vec<usize> = (0..words.len()).map(|i| self.bigrams.id(&bigram(words, i))).collect();
        let (eu, eb) = (self.p(tape, "emb.uni")?, self.p(tape, "emb.bi")?);
        let u = tape.gather(eu, &uni)?;
        let b = tape.gather(eb, &bi)?;
        tape.concat_cols(&[u, b])
    }

    /// Per-token label scores, `n x L`. `words` must be non-empty.
    pub fn emissions(&self, tape: &mut Tape<'_>, words: &[String]) -> Result<Var> {
        let x = self.embed(tape, words)?;
        let heads = self.config.heads;
        let att = match self.config.attention {
            AttentionKind::Absolute => {
                let pe = tape.constant(positional_table(words.len(), self.config.model_dim));
                let xp = tape.add(x, pe)?;
                let (q, k, v, m) = (
                    self.p(tape, "att.q")?,
                    self.p(tape, "att.k")?,
                    self.p(tape, "att.v")?,
                    self.p(tape, "att.m")?,
                );
                absolute_attention(tape, xp, q, k, v, m, heads)?.output
            }
            AttentionKind::Relative => {
                let (q, v, u, b) = (
                    self.p(tape, "att.q")?,
                    self.p(tape, "att.v")?,
                    self.p(tape, "att.u")?,
                    self.p(tape, "att.b")?,
                );
                let pos: Vec<i64> = (0..words.len() as i64).collect();
                relative_attention(tape, x, q, v, u, b, heads, &pos)?.output
            }
        };
        let r = tape.add(x, att)?;
        let (g1, b1) = (self.p(tape, "ln1.g")?, self.p(tape, "ln1.b")?);
        let h = layer_norm(tape, r, g1, b1)?;
        let (w1, c1, w2, c2) = (
            self.p(tape, "ffn.w1")?,
            self.p(tape, "ffn.b1")?,
            self.p(tape, "ffn.w2")?,
            self.p(tape, "ffn.b2")?,
        );
        let f = feed_forward(tape, h, w1, c1, w2, c2)?;
        let r = tape.add(h, f)?;
        let (g2, b2) = (self.p(tape, "ln2.g")?, self.p(tape, "ln2.b")?);
        let mut feats = layer_norm(tape, r, g2, b2)?;
        if self.config.fusion {
            let mut dirs = Vec::new();
            for dir in ["fwd", "bwd"] {
                dirs.push(LstmWeights {
                    w: self.p(tape, &format!("lstm.{dir}.w"))?,
                    u: self.p(tape, &format!("lstm.{dir}.u"))?,
                    b: self.p(tape, &format!("lstm.{dir}.b"))?,
                });
            }
            let xb = bilstm(tape, x, dirs[0], dirs[1])?;
            let (f1, f2, f3) = (self.p(tape, "fuse.w1")?, self.p(tape, "fuse.w2")?, self.p(tape, "fuse.w3")?);
            feats = fuse(tape, feats, xb, f1, f2, f3)?.0;
        }
        let (ew, eb) = (self.p(tape, "emit.w")?, self.p(tape, "emit.b")?);
        let e = tape.matmul(feats, ew)?;
        tape.add_row(e, eb)
    }

    /// Negative log-likelihood of `labels`.
    pub fn loss(&self, tape: &mut Tape<'_>, words: &[String], labels: &[BioLabel]) -> Result<Var> {
        let e = self.emissions(tape, words)?;
        let tr = self.p(tape, "crf.trans")?;
        let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        let ll = crf_log_likelihood(tape, e, tr, &idx)?;
        Ok(tape.scale(ll, -1.0))
    }

    pub fn tag(&self, words: &[String]) -> Result<Vec<BioLabel>> {
        if words.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::with_params(&self.params);
        let e = self.emissions(&mut tape, words)?;
        let tr = self.params.get(self.id("crf.trans")?);
        let (path, _) = Crf::viterbi(tape.value(e), tr);
        Ok(path.into_iter().map(|i| BioLabel::ALL[i]).collect())
    }

    /// Adam over shuffled single examples; returns the mean loss per epoch.
    pub fn fit(&mut self, data: &[(Vec<String>, Vec<BioLabel>)], epochs: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
        let mut opt = Adam::new(AdamConfig { lr, ..AdamConfig::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..data.len()).filter(|&i| !data[i].0.is_empty()).collect();
        let mut curve = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for &i in &order {
                let grads = {
                    let mut tape = Tape::with_params(&self.params);
                    let l = self.loss(&mut tape, &data[i].0, &data[i].1)?;
                    total += tape.value(l).item();
                    tape.backward(l).param_grads()
                };
                opt.step(&mut self.params, grads);
            }
            curve.push(total / order.len().max(1) as f64);
        }
        Ok(curve)
    }

    fn meta_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".meta.json");
        PathBuf::from(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::result::Result<(), TaggerError> {
        let path = path.as_ref();
        let ck = |e: String| TaggerError::Checkpoint(path.display().to_string(), e);
        save_checkpoint(&self.params, path).map_err(|e| ck(e.to_string()))?;
        let meta = TaggerMeta {
            config: self.config.clone(),
            unigrams: self.unigrams.symbols()[1..].to_vec(),
            bigrams: self.bigrams.symbols()[1..].to_vec(),
        };
        let json = serde_json::to_string(&meta).map_err(|e| ck(e.to_string()))?;
        std::fs::write(Self::meta_path(path), json).map_err(|e| ck(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> std::result::Result<Self, TaggerError> {
        let path = path.as_ref();
        let ck = |e: String| TaggerError::Checkpoint(path.display().to_string(), e);
        let params = load_checkpoint(path).map_err(|e| ck(e.to_string()))?;
        let text = std::fs::read_to_string(Self::meta_path(path)).map_err(|e| ck(e.to_string()))?;
        let meta: TaggerMeta = serde_json::from_str(&text).map_err(|e| ck(e.to_string()))?;
        Ok(Tagger {
            config: meta.config,
            unigrams: Vocab::build(meta.unigrams.iter().map(String::as_str)),
            bigrams: Vocab::build(meta.bigrams.iter().map(String::as_str)),
            params,
        })
    }
}

/// Linker candidates for tagged spans not already covered by `ctx`.
/// Each span is looked up whole, then by its longest lexicon sub-span.
pub fn tagged_candidates(ctx: &QuestionContext, spans: &[Span], kg: &KnowledgeGraph, lexicon: &Lexicon) -> Vec<Candidate> {
    let covered = |s: &Span| {
        ctx.candidates
            .iter()
            .any(|c| c.span().start < s.end && s.start < c.span().end)
    };
    let mut out = Vec::new();
    for s in spans.iter().filter(|s| !covered(s)) {
        let mut found = None;
        'outer: for len in (1..=s.end - s.start).rev() {
            for start in s.start..=s.end - len {
                if let Some(t) = lexicon.get(&ctx.words[start..start + len]) {
                    found = Some((Span { start, end: start + len }, t));
                    break 'outer;
                }
            }
        }
        match found {
            Some((span, LexTarget::Entity(id))) => {
                if let Some(ty) = kg.type_of(id) {
                    out.push(Candidate::Entity {
                        span,
                        id: id.clone(),
                        ty: ty.to_string(),
                    });
                }
            }
            Some((span, LexTarget::Value { ty, attr, value })) => out.push(Candidate::Value {
                span,
                ty: ty.clone(),
                attr: attr.clone(),
                value: value.clone(),
            }),
            None => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn brute(emissions: &Tensor, transitions: &Tensor) -> (f64, Vec<usize>, f64) {
        let (n, l) = emissions.dims();
        let mut z = Vec::new();
        let (mut best, mut arg) = (f64::NEG_INFINITY, Vec::new());
        for code in 0..l.pow(n as u32) {
            let y: Vec<usize> = (0..n).map(|t| code / l.pow(t as u32) % l).collect();
            let s = Crf::score(emissions, transitions, &y);
            z.push(s);
            if s > best {
                best = s;
                arg = y;
            }
        }
        (z.iter().map(|s| s.exp()).sum::<f64>().ln(), arg, best)
    }

    #[test]
    fn pe_at_zero_alternates() {
        assert_eq!(sinusoidal_pe(0.0, 6), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let d = 16;
        let t = 3.7;
        let pe = sinusoidal_pe(t, d);
        assert_eq!(pe[4], (t / 10000f64.powf(4.0 / 16.0)).sin());
        let period = 2.0 * std::f64::consts::PI * 10000f64.powf(4.0 / 16.0);
        assert!((sinusoidal_pe(t + period, d)[4] - pe[4]).abs() < 1e-9);
    }

    #[test]
    fn crf_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for l in 1..=4 {
            for n in 1..=6 {
                let e = rand_tensor(&mut rng, n, l);
                let tr = rand_tensor(&mut rng, l + 2, l + 2);
                let (z, arg, best) = brute(&e, &tr);
                assert!((Crf::log_partition(&e, &tr) - z).abs() < 1e-6);
                let (path, score) = Crf::viterbi(&e, &tr);
                assert_eq!(path, arg);
                assert!((score - best).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn uniform_crf_log_likelihood() {
        for (l, n) in [(3, 5), (4, 2), (2, 6)] {
            let ll = Crf::log_likelihood_value(&Tensor::zeros(n, l), &Tensor::zeros(l + 2, l + 2), &vec![0; n]);
            assert!((ll + n as f64 * (l as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_o_emissions_give_all_o() {
        let mut e = Tensor::zeros(5, 3);
        for t in 0..5 {
            e.data_mut()[t * 3] = 20.0;
        }
        let tr = rand_tensor(&mut ChaCha8Rng::seed_from_u64(1), 5, 5);
        assert_eq!(Crf::viterbi(&e, &tr).0, vec![BioLabel::O.index(); 5]);
    }

    #[test]
    fn crf_gradient_is_gold_minus_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (n, l) in [(1, 2), (3, 3), (5, 4)] {
            let e = rand_tensor(&mut rng, n, l);
            let tr = rand_tensor(&mut rng, l + 2, l + 2);
            let gold: Vec<usize> = (0..n).map(|t| (t * 7 + 1) % l).collect();
            let r = grad_check(|tape, v| crf_log_likelihood(tape, v[0], v[1], &gold), &[e, tr]).unwrap();
            assert!(r.passes(1e-4), "{r:?}");
        }
    }

    #[test]
    fn relative_scores_reduce_to_content_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, dk) = (4, 3);
        let q = rand_tensor(&mut rng, n, dk);
        let k = rand_tensor(&mut rng, n, dk);
        let mut tape = Tape::new();
        let (qv, kv) = (tape.leaf(q.clone()), tape.leaf(k.clone()));
        let z = tape.constant(Tensor::zeros(1, dk));
        let rel = vec![Tensor::zeros(n, dk); n];
        let s = relative_scores(&mut tape, qv, kv, z, z, &rel).unwrap();
        assert_eq!(tape.value(s), &q.matmul(&k.transpose()).unwrap());
    }

    #[test]
    fn relative_attention_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d, heads) = (5, 6, 2);
        let h = rand_tensor(&mut rng, n, d);
        let ws: Vec<Tensor> = (0..2).map(|_| rand_tensor(&mut rng, d, d)).collect();
        let u = rand_tensor(&mut rng, 1, d);
        let v = rand_tensor(&mut rng, 1, d);
        let run = |shift: i64| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = [&h, &ws[0], &ws[1], &u, &v].iter().map(|t| tape.leaf((*t).clone())).collect();
            let pos: Vec<i64> = (0..n as i64).map(|p| p + shift).collect();
            let o = relative_attention(&mut tape, vars[0], vars[1], vars[2], vars[3], vars[4], heads, &pos).unwrap();
            for w in &o.weights {
                for r in 0..n {
                    assert!((tape.value(*w).row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
            tape.value(o.output).clone()
        };
        let base = run(0);
        for s in [1, 17, -40, 1000] {
            assert_eq!(run(s), base);
        }
    }

    #[test]
    fn single_position_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 4;
        let h = rand_tensor(&mut rng, 1, d);
        let w: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, d, d)).collect();
        let mut tape = Tape::new();
        let hv = tape.leaf(h.clone());
        let wv: Vec<Var> = w.iter().map(|t| tape.leaf(t.clone())).collect();
        let o = absolute_attention(&mut tape, hv, wv[0], wv[1], wv[2], wv[3], 2).unwrap();
        for a in &o.weights {
            assert_eq!(tape.value(*a).data(), &[1.0]);
        }
        let z = tape.constant(Tensor::zeros(1, d));
        let r = relative_attention(&mut tape, hv, wv[0], wv[2], z, z, 2, &[0]).unwrap();
        let expect = h.matmul(&w[2]).unwrap();
        assert_eq!(tape.value(r.output), &expect);
    }

    #[test]
    fn identical_rows_attend_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 4;
        let row = rand_tensor(&mut rng, 1, d);
        let h = Tensor::stack_rows(&[row.clone(), row.clone(), row]).unwrap();
        let mut tape = Tape::new();
        let hv = tape.leaf(h);
        let wv: Vec<Var> = (0..4).map(|_| tape.leaf(rand_tensor(&mut rng, d, d))).collect();
        let o = absolute_attention(&mut tape, hv, wv[0], wv[1], wv[2], wv[3], 2).unwrap();
        for a in &o.weights {
            assert!(tape.value(*a).data().iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
        }
    }

    fn lstm_inputs(rng: &mut ChaCha8Rng, n: usize, d: usize, hl: usize) -> Vec<Tensor> {
        vec![
            rand_tensor(rng, n, d),
            rand_tensor(rng, d, 4 * hl),
            rand_tensor(rng, hl, 4 * hl),
            rand_tensor(rng, 1, 4 * hl),
            rand_tensor(rng, d, 4 * hl),
            rand_tensor(rng, hl, 4 * hl),
            rand_tensor(rng, 1, 4 * hl),
        ]
    }

    fn run_bilstm(tape: &mut Tape<'_>, v: &[Var]) -> Result<Var> {
        bilstm(
            tape,
            v[0],
            LstmWeights { w: v[1], u: v[2], b: v[3] },
            LstmWeights { w: v[4], u: v[5], b: v[6] },
        )
    }

    #[test]
    fn bilstm_reversal_swaps_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, d, hl) = (4, 3, 2);
        let inputs = lstm_inputs(&mut rng, n, d, hl);
        let mut rev = inputs.clone();
        let rows: Vec<Tensor> = (0..n).rev().map(|r| Tensor::row(inputs[0].row_slice(r).to_vec())).collect();
        rev[0] = Tensor::stack_rows(&rows).unwrap();
        rev.swap(1, 4);
        rev.swap(2, 5);
        rev.swap(3, 6);
        let eval = |xs: &[Tensor]| {
            let mut tape = Tape::new();
            let v: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
            let o = run_bilstm(&mut tape, &v).unwrap();
            tape.value(o).clone()
        };
        let (a, b) = (eval(&inputs), eval(&rev));
        for t in 0..n {
            let ra = a.row_slice(t);
            let rb = b.row_slice(n - 1 - t);
            assert_eq!(&ra[..hl], &rb[hl..]);
            assert_eq!(&ra[hl..], &rb[..hl]);
        }
        let zero: Vec<Tensor> = inputs.iter().enumerate().map(|(i, t)| if i == 0 { t.clone() } else { t.map(|_| 0.0) }).collect();
        assert!(eval(&zero).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fusion_identity_and_gate_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let ws: Vec<Var> = (0..3).map(|_| tape.leaf(rand_tensor(&mut rng, 4, 4))).collect();
        let (out, z) = fuse(&mut tape, xv, xv, ws[0], ws[1], ws[2]).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(tape.value(z).data().iter().all(|&g| g > 0.0 && g < 1.0));
        let y = tape.leaf(Tensor::zeros(3, 2));
        assert!(fuse(&mut tape, xv, y, ws[0], ws[1], ws[2]).is_err());
    }

    #[test]
    fn layers_pass_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (n, d) = (3, 4);
        let abs = grad_check(
            |t, v| {
                let o = absolute_attention(t, v[0], v[1], v[2], v[3], v[4], 2)?;
                Ok(t.sum(o.output))
            },
            &(0..5).map(|i| rand_tensor(&mut rng, if i == 0 { n } else { d }, d)).collect::<Vec<_>>(),
        )
        .unwrap();
        assert!(abs.passes(1e-4), "{abs:?}");
        let rel_inputs = vec![
            rand_tensor(&mut rng, n, d),
            rand_tensor(&mut rng, d, d),
            rand_tensor(&mut rng, d, d),
            rand_tensor(&mut rng, 1, d),
            rand_tensor(&mut rng, 1, d),
        ];
        let rel = grad_check(
            |t, v| {
                let o = relative_attention(t, v[0], v[1], v[2], v[3], v[4], 2, &[0, 1, 2])?;
                let s = t.tanh(o.output);
                Ok(t.sum(s))
            },
            &rel_inputs,
        )
        .unwrap();
        assert!(rel.passes(1e-4), "{rel:?}");
        let lstm = grad_check(
            |t, v| {
                let o = run_bilstm(t, v)?;
                Ok(t.sum(o))
            },
            &lstm_inputs(&mut rng, 3, 2, 2),
        )
        .unwrap();
        assert!(lstm.passes(1e-4), "{lstm:?}");
        let fusion = grad_check(
            |t, v| {
                let (o, _) = fuse(t, v[0], v[1], v[2], v[3], v[4])?;
                let s = t.mul(o, o)?;
                Ok(t.sum(s))
            },
            &[
                rand_tensor(&mut rng, 2, 3),
                rand_tensor(&mut rng, 2, 3),
                rand_tensor(&mut rng, 3, 3),
                rand_tensor(&mut rng, 3, 3),
                rand_tensor(&mut rng, 3, 3),
            ],
        )
        .unwrap();
        assert!(fusion.passes(1e-4), "{fusion:?}");
    }

    #[test]
    fn embedding_is_local() {
        let data = vec![(tokenize("a b c d e"), vec![BioLabel::O; 5])];
        let cfg = EncoderConfig {
            model_dim: 4,
            head_dim: 2,
            heads: 2,
            lstm_hidden: 2,
            ..EncoderConfig::default()
        };
        let t = Tagger::new(cfg, &data, 0).unwrap();
        let emb = |w: &str| {
            let mut tape = Tape::with_params(&t.params);
            let v = t.embed(&mut tape, &tokenize(w)).unwrap();
            tape.value(v).clone()
        };
        let a = emb("a b c d e");
        assert_eq!(a, emb("a b c d e"));
        let b = emb("d b c a e");
        let changed: Vec<usize> = (0..5).filter(|&r| a.row_slice(r) != b.row_slice(r)).collect();
        assert_eq!(changed, vec![0, 2, 3]);
        assert_eq!(emb("a").dims(), (1, 4));
    }

    #[test]
    fn tagger_learns_and_roundtrips() {
        let raw = "show texas\tO B-ENT\nshow new york\tO B-ENT I-ENT\nshow me ohio\tO O B-ENT\nlist the rivers\tO O O\n";
        let data = parse_tag_data(raw).unwrap();
        let cfg = EncoderConfig {
            model_dim: 8,
            head_dim: 4,
            heads: 2,
            lstm_hidden: 4,
            ffn_dim: 8,
            ..EncoderConfig::default()
        };
        let mut t = Tagger::new(cfg, &data, 1).unwrap();
        let curve = t.fit(&data, 40, 0.05, 2).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        for (w, l) in &data {
            assert_eq!(&t.tag(w).unwrap(), l);
        }
        assert!(t.tag(&[]).unwrap().is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tagger.ckpt");
        t.save(&path).unwrap();
        let back = Tagger::load(&path).unwrap();
        assert_eq!(back.params, t.params);
        assert!(matches!(Tagger::load(dir.path().join("none")), Err(TaggerError::Checkpoint(..))));
        assert!(parse_tag_data("a b\tO").is_err());
        assert_eq!(write_tag_line(&data[1].0, &data[1].1), "show new york\tO B-ENT I-ENT");
    }

    #[test]
    fn config_is_checked() {
        let bad = EncoderConfig {
            model_dim: 10,
            ..EncoderConfig::default()
        };
        assert!(matches!(bad.check(), Err(TaggerError::Config(_))));
        assert!(EncoderConfig::default().check().is_ok());
    }

    proptest! {
        #[test]
        fn pe_dot_products_are_shift_invariant(t in 0.0f64..500.0, k in 0.0f64..50.0, half in 1usize..16) {
            let d = half * 2;
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let lhs = dot(&sinusoidal_pe(t, d), &sinusoidal_pe(t + k, d));
            let rhs = dot(&sinusoidal_pe(0.0, d), &sinusoidal_pe(k, d));
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn bio_spans_cover_only_mentions(labels in proptest::collection::vec(0usize..3, 0..12)) {
            let ls: Vec<BioLabel> = labels.iter().map(|&i| BioLabel::ALL[i]).collect();
            let spans = bio_spans(&ls);
            let mut covered = vec![false; ls.len()];
            for s in &spans {
                prop_assert!(s.start < s.end);
                for c in &mut covered[s.start..s.end] { *c = true; }
            }
            for (l, c) in ls.iter().zip(&covered) {
                prop_assert_eq!(*l != BioLabel::O, *c);
            }
        }
    }
}
