//! Mini-batch training with per-epoch held-out evaluation, and corpus metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::{print_blocks, validate_blocks, BlockSequence, Pattern};
use crate::convert::logical_form_tokens;
use crate::corpus::{Example, Fixture};
use crate::graph2seq::{Graph2Seq, ModelConfig, ModelError, Prepared};
use crate::query::assemble;
use crate::tensor::{Adam, AdamConfig, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub beam: usize,
    pub seed: u64,
    pub clip: f64,
    pub model: ModelConfig,
    /// Stop once held-out exact match reaches 1.
    pub stop_on_perfect: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            batch: 30,
            epochs: 80,
            beam: 5,
            seed: 1,
            clip: 5.0,
            model: ModelConfig::default(),
            stop_on_perfect: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid gold annotations: {}", .0.iter().map(|(i, m)| format!("#{i} {m}")).collect::<Vec<_>>().join("; "))]
    InvalidGold(Vec<(usize, String)>),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub em: f64,
    pub exec: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} loss={:.4} em={:.4} exec={:.4}",
            self.epoch, self.loss, self.em, self.exec
        )
    }
}

pub struct TrainOutcome {
    /// Holds the parameters of the best held-out epoch.
    pub model: Graph2Seq,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Problems with gold examples, by index: missing blocks, schema violations
/// or sequences that do not assemble.
pub fn gold_problems(examples: &[Example], fx: &Fixture) -> Vec<(usize, String)> {
    let mut out = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let Some(b) = &ex.blocks else {
            out.push((i, "no block sequence".to_string()));
            continue;
        };
        let v = validate_blocks(b, &fx.kg);
        if let Some(first) = v.first() {
            out.push((i, first.to_string()));
        } else if let Err(e) = assemble(b, &fx.kg) {
            out.push((i, e.to_string()));
        }
    }
    out
}

fn prepared(model: &Graph2Seq, fx: &Fixture, examples: &[Example]) -> Vec<Prepared> {
    examples.iter().map(|e| model.prepare(fx.context(&e.question))).collect()
}

/// Trains on `train`, evaluating on `held_out` after each epoch and keeping
/// the parameters with the best exact match.
pub fn train(
    fx: &Fixture,
    train: &[Example],
    held_out: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    let mut bad = gold_problems(train, fx);
    if !bad.is_empty() {
        return Err(TrainError::InvalidGold(bad));
    }
    let data: Vec<_> = train
        .iter()
        .map(|e| (fx.context(&e.question), e.blocks.clone().expect("checked")))
        .collect();
    let mut model = Graph2Seq::new(cfg.model.clone(), &fx.kg, &fx.ordinals, &data, cfg.seed)?;
    let inputs = prepared(&model, fx, train);
    let mut gold = Vec::with_capacity(train.len());
    for (i, (p, (_, b))) in inputs.iter().zip(&data).enumerate() {
        match model.encode_gold(p, b) {
            Ok(g) => gold.push(g),
            Err(e) => bad.push((i, e.to_string())),
        }
    }
    if !bad.is_empty() {
        return Err(TrainError::InvalidGold(bad));
    }
    let eval_inputs = prepared(&model, fx, held_out);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        clip_norm: Some(cfg.clip),
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, _)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, batch) in order.chunks(cfg.batch.max(1)).enumerate() {
            let grads = {
                let mut tape = Tape::with_params(&model.params).train(cfg.seed ^ ((epoch as u64) << 32) ^ bi as u64);
                let mut losses = Vec::with_capacity(batch.len());
                for &i in batch {
                    losses.push(model.loss(&mut tape, &inputs[i], &gold[i])?);
                }
                let all = tape.concat_rows(&losses).map_err(ModelError::from)?;
                let sum = tape.sum(all);
                total += tape.value(sum).item();
                tape.backward(sum).param_grads()
            };
            opt.step(&mut model.params, grads);
        }
        let report = evaluate_prepared(&model, fx, held_out, &eval_inputs, cfg.beam)?;
        let log = EpochLog {
            epoch,
            loss: total / train.len().max(1) as f64,
            em: report.exact_match,
            exec: report.execution,
        };
        on_epoch(&log);
        history.push(log);
        if best.as_ref().is_none_or(|(em, _, _)| report.exact_match > *em) {
            best = Some((report.exact_match, epoch, model.params.clone()));
        }
        if cfg.stop_on_perfect && report.exact_match >= 1.0 {
            break;
        }
    }
    let mut best_epoch = 0;
    if let Some((_, epoch, params)) = best {
        model.set_params(params)?;
        best_epoch = epoch;
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

/// Trains, then writes the best parameters to `ckpt`.
pub fn train_to(
    fx: &Fixture,
    train_set: &[Example],
    held_out: &[Example],
    cfg: &TrainConfig,
    ckpt: &Path,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    let out = train(fx, train_set, held_out, cfg, on_epoch)?;
    out.model.save(ckpt)?;
    Ok(out)
}

/// Scores for one question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Judgement {
    pub question: String,
    pub predicted: Option<String>,
    pub gold: Option<String>,
    pub exact: bool,
    pub executes_same: bool,
    pub assemblable: bool,
}

/// Compares a predicted sequence with gold.
pub fn judge(fx: &Fixture, question: &str, predicted: Option<&BlockSequence>, gold: Option<&BlockSequence>) -> Judgement {
    let p = predicted.map(|b| print_blocks(b));
    let g = gold.map(|b| print_blocks(b));
    let assemblable = predicted.is_some_and(|b| validate_blocks(b, &fx.kg).is_empty() && assemble(b, &fx.kg).is_ok());
    let executes_same = match (predicted.and_then(|b| fx.answer(b)), gold.and_then(|b| fx.answer(b))) {
        (Some(a), Some(b)) => a == b,
        _ => false,
    };
    Judgement {
        question: question.to_string(),
        exact: p.is_some() && p == g,
        predicted: p,
        gold: g,
        executes_same,
        assemblable,
    }
}

/// Corpus-level length and pattern statistics over gold annotations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub examples: usize,
    pub pattern_counts: BTreeMap<String, usize>,
    pub block_lengths: BTreeMap<usize, usize>,
    pub mean_question_tokens: f64,
    pub mean_logical_form_tokens: f64,
    pub mean_blocks: f64,
}

pub fn corpus_stats(examples: &[Example]) -> CorpusStats {
    let mut s = CorpusStats {
        examples: examples.len(),
        ..Default::default()
    };
    if examples.is_empty() {
        return s;
    }
    let (mut q, mut lf, mut nlf, mut nb, mut blocks) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for e in examples {
        q += e.question.split_whitespace().count();
        if let Some(l) = &e.logical_form {
            lf += logical_form_tokens(l);
            nlf += 1;
        }
        if let Some(b) = &e.blocks {
            nb += 1;
            blocks += b.len();
            *s.block_lengths.entry(b.len()).or_default() += 1;
            for blk in b {
                *s.pattern_counts.entry(blk.pattern().name().to_string()).or_default() += 1;
            }
        }
    }
    s.mean_question_tokens = q as f64 / examples.len() as f64;
    s.mean_logical_form_tokens = if nlf == 0 { 0.0 } else { lf as f64 / nlf as f64 };
    s.mean_blocks = if nb == 0 { 0.0 } else { blocks as f64 / nb as f64 };
    s
}

impl CorpusStats {
    /// Patterns ordered by descending frequency.
    pub fn ranked_patterns(&self) -> Vec<(Pattern, usize)> {
        let mut v: Vec<_> = self
            .pattern_counts
            .iter()
            .filter_map(|(k, &n)| Pattern::from_name(k).map(|p| (p, n)))
            .collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    pub fn kv_lines(&self) -> Vec<String> {
        let mut out = vec![
            format!("examples={}", self.examples),
            format!("mean_question_tokens={:.2}", self.mean_question_tokens),
            format!("mean_logical_form_tokens={:.2}", self.mean_logical_form_tokens),
            format!("mean_blocks={:.2}", self.mean_blocks),
        ];
        for (p, n) in &self.pattern_counts {
            out.push(format!("pattern.{p}={n}"));
        }
        for (l, n) in &self.block_lengths {
            out.push(format!("blocks.{l}={n}"));
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub exact_match: f64,
    pub execution: f64,
    pub assemblable: f64,
    pub stats: CorpusStats,
    pub judgements: Vec<Judgement>,
}

impl EvalReport {
    pub fn from_judgements(judgements: Vec<Judgement>, gold: &[Example]) -> Self {
        let n = judgements.len();
        let frac = |f: fn(&Judgement) -> bool| {
            if n == 0 {
                0.0
            } else {
                judgements.iter().filter(|j| f(j)).count() as f64 / n as f64
            }
        };
        EvalReport {
            examples: n,
            exact_match: frac(|j| j.exact),
            execution: frac(|j| j.executes_same),
            assemblable: frac(|j| j.assemblable),
            stats: corpus_stats(gold),
            judgements,
        }
    }

    pub fn kv_lines(&self) -> Vec<String> {
        let mut out = vec![
            format!("examples={}", self.examples),
            format!("em={:.4}", self.exact_match),
            format!("exec={:.4}", self.execution),
            format!("assemblable={:.4}", self.assemblable),
        ];
        out.extend(self.stats.kv_lines().into_iter().skip(1));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

fn evaluate_prepared(
    model: &Graph2Seq,
    fx: &Fixture,
    examples: &[Example],
    inputs: &[Prepared],
    beam: usize,
) -> Result<EvalReport, ModelError> {
    let one = |e: &Example, p: &Prepared| -> Result<Judgement, ModelError> {
        let pred = match model.decode(p, beam) {
            Ok(d) => d.blocks.ok(),
            Err(ModelError::EmptyGraph) => None,
            Err(e) => return Err(e),
        };
        Ok(judge(fx, &e.question, pred.as_ref(), e.blocks.as_ref()))
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(examples.len().max(1));
    let chunk = examples.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<Judgement>, ModelError>> = std::thread::scope(|s| {
        let handles: Vec<_> = examples
            .chunks(chunk)
            .zip(inputs.chunks(chunk))
            .map(|(es, ps)| s.spawn(move || es.iter().zip(ps).map(|(e, p)| one(e, p)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker")).collect()
    });
    let mut js = Vec::with_capacity(examples.len());
    for part in parts {
        js.extend(part?);
    }
    Ok(EvalReport::from_judgements(js, examples))
}

/// Decodes every question and scores it against its gold annotation.
pub fn evaluate(model: &Graph2Seq, fx: &Fixture, examples: &[Example], beam: usize) -> Result<EvalReport, ModelError> {
    let inputs = prepared(model, fx, examples);
    evaluate_prepared(model, fx, examples, &inputs, beam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::parse_blocks;
    use crate::corpus::generate;

    fn tiny(decomposed: bool, controller: bool) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch: 4,
            beam: 2,
            model: ModelConfig {
                hops: 1,
                node_dim: 8,
                hidden: 12,
                decomposed,
                controller,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn empty_corpus_reports_zeros() {
        let r = EvalReport::from_judgements(Vec::new(), &[]);
        assert_eq!(r, EvalReport::default());
        assert_eq!(corpus_stats(&[]), CorpusStats::default());
    }

    #[test]
    fn reordered_isomorphic_sequence_executes_same() {
        let fx = Fixture::geo();
        let gold = parse_blocks(
            "join(intersection, :city, :city) literal(major, :city) entity(city) relation(city, loc, :state) entity(state, id, 'texas')",
        )
        .unwrap();
        let pred = parse_blocks(
            "join(intersection, :city, :city) relation(city, loc, :state) entity(state, id, 'texas') literal(major, :city) entity(city)",
        )
        .unwrap();
        let j = judge(&fx, "major cities in texas", Some(&pred), Some(&gold));
        assert!(!j.exact);
        assert!(j.executes_same);
        assert!(j.assemblable);
    }

    #[test]
    fn mini_geo_is_dominated_by_entity_and_relation() {
        let fx = Fixture::geo();
        let s = corpus_stats(&generate(&fx, 3, 150));
        let top: Vec<Pattern> = s.ranked_patterns().iter().take(2).map(|(p, _)| *p).collect();
        assert!(top.contains(&Pattern::Entity) && top.contains(&Pattern::Relation), "{top:?}");
        assert_eq!(s.block_lengths.values().sum::<usize>(), 150);
    }

    #[test]
    fn invalid_gold_is_rejected_before_training() {
        let fx = Fixture::geo();
        let mut ex = generate(&fx, 1, 4);
        ex[2].blocks = Some(parse_blocks("entity(planet)").unwrap());
        ex[3].blocks = None;
        match train(&fx, &ex, &[], &tiny(true, true), |_| {}) {
            Err(TrainError::InvalidGold(v)) => assert_eq!(v.iter().map(|(i, _)| *i).collect::<Vec<_>>(), vec![2, 3]),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let fx = Fixture::geo();
        let ex = generate(&fx, 1, 8);
        let cfg = TrainConfig { lr: 0.0, epochs: 2, ..tiny(true, true) };
        let out = train(&fx, &ex, &ex[..2], &cfg, |_| {}).unwrap();
        let data: Vec<_> = ex.iter().map(|e| (fx.context(&e.question), e.blocks.clone().unwrap())).collect();
        let fresh = Graph2Seq::new(cfg.model.clone(), &fx.kg, &fx.ordinals, &data, cfg.seed).unwrap();
        assert_eq!(out.model.params, fresh.params);
    }

    #[test]
    fn same_seed_same_curve() {
        let fx = Fixture::geo();
        let ex = generate(&fx, 2, 10);
        let cfg = tiny(true, false);
        let a = train(&fx, &ex, &ex[..3], &cfg, |_| {}).unwrap().history;
        let b = train(&fx, &ex, &ex[..3], &cfg, |_| {}).unwrap().history;
        assert_eq!(a, b);
        assert!(a[2].loss < a[0].loss);
        assert!(a[0].to_string().starts_with("epoch=1 loss="));
    }

    #[test]
    fn report_lines_and_json() {
        let fx = Fixture::geo();
        let ex = generate(&fx, 2, 5);
        let js = ex
            .iter()
            .map(|e| judge(&fx, &e.question, e.blocks.as_ref(), e.blocks.as_ref()))
            .collect();
        let r = EvalReport::from_judgements(js, &ex);
        assert_eq!((r.exact_match, r.execution, r.assemblable), (1.0, 1.0, 1.0));
        assert!(r.kv_lines().contains(&"em=1.0000".to_string()));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
