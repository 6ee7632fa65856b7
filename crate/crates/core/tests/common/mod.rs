//! Reference denotation evaluator working straight from block sequences by
//! linear scans over the entity and fact lists.

#![allow(dead_code)]

use std::collections::BTreeSet;

use spedn::query::Extreme;
use spedn::{AggrOp, AnswerSet, JoinOp, KnowledgeGraph, Literal, LiteralKind, OrdinalLexicon, SemanticBlock};

#[derive(Debug, Clone)]
enum Den {
    Set(BTreeSet<String>),
    Vals(Vec<Literal>),
    Num(f64),
}

struct Eval<'a> {
    kg: &'a KnowledgeGraph,
    ordinals: &'a OrdinalLexicon,
    seq: &'a [SemanticBlock],
    pos: usize,
}

impl Eval<'_> {
    fn set(&mut self) -> Option<BTreeSet<String>> {
        match self.node()? {
            Den::Set(s) => Some(s),
            _ => None,
        }
    }

    fn typed(&self, ty: &str) -> BTreeSet<String> {
        self.kg.entities().iter().filter(|e| e.ty == ty).map(|e| e.id.clone()).collect()
    }

    fn value(&self, id: &str, attr: &str) -> Option<Literal> {
        if attr == "id" {
            return Some(Literal::Text(id.to_string()));
        }
        let e = self.kg.entities().iter().find(|e| e.id == id)?;
        e.attrs.iter().find(|(a, _)| a == attr).map(|(_, v)| v.clone())
    }

    fn node(&mut self) -> Option<Den> {
        let b = self.seq.get(self.pos)?.clone();
        self.pos += 1;
        Some(match b {
            SemanticBlock::Entity { ty, constraint: None } => Den::Set(self.typed(&ty)),
            SemanticBlock::Entity {
                ty,
                constraint: Some((attr, v)),
            } => Den::Set(
                self.typed(&ty)
                    .into_iter()
                    .filter(|e| {
                        if attr == "id" {
                            matches!(&v, Literal::Text(t) if t.eq_ignore_ascii_case(e))
                        } else {
                            self.value(e, &attr).is_some_and(|x| same(&x, &v))
                        }
                    })
                    .collect(),
            ),
            SemanticBlock::Relation { out, rel, input } => {
                let s = self.set()?;
                let forward = self
                    .kg
                    .relations()
                    .iter()
                    .any(|r| r.name == rel && r.domain == out && r.range_type() == Some(input.as_str()));
                Den::Set(
                    self.typed(&out)
                        .into_iter()
                        .filter(|x| {
                            self.kg.facts().iter().any(|(r, a, b)| {
                                r == &rel && if forward { a == x && s.contains(b) } else { b == x && s.contains(a) }
                            })
                        })
                        .collect(),
                )
            }
            SemanticBlock::Literal { attr, ty } => {
                let s = self.set()?;
                if self.kg.literal_kind(&attr, &ty) == Some(LiteralKind::Boolean) {
                    Den::Set(
                        s.into_iter()
                            .filter(|e| self.value(e, &attr).and_then(|v| v.as_f64()) == Some(1.0))
                            .collect(),
                    )
                } else {
                    Den::Vals(s.iter().filter_map(|e| self.value(e, &attr)).collect())
                }
            }
            SemanticBlock::Ordinal { op, ty } => {
                let entry = self.ordinals.entries().iter().find(|e| e.surface == op && e.ty == ty)?.clone();
                let numeric_key = self.kg.relations().iter().any(|r| {
                    r.name == entry.attr && r.domain == ty && r.literal_kind().is_some_and(|k| k.is_numeric())
                });
                let s = self.set()?;
                if !numeric_key {
                    return None;
                }
                let scored: Vec<(f64, String)> = s
                    .into_iter()
                    .filter_map(|e| self.value(&e, &entry.attr).and_then(|v| v.as_f64()).map(|x| (x, e)))
                    .collect();
                let target = match entry.extreme {
                    Extreme::Max => scored.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
                    Extreme::Min => scored.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
                };
                let mut winners: Vec<String> = scored.into_iter().filter(|p| p.0 == target).map(|p| p.1).collect();
                winners.sort();
                Den::Set(winners.into_iter().take(1).collect())
            }
            SemanticBlock::Aggr { op: AggrOp::Count, .. } => Den::Num(self.set()?.len() as f64),
            SemanticBlock::Aggr { op: AggrOp::Average, .. } => match self.node()? {
                Den::Vals(v) if !v.is_empty() => {
                    let xs: Vec<f64> = v.iter().filter_map(|x| x.as_f64()).collect();
                    if xs.is_empty() {
                        return None;
                    }
                    Den::Num(xs.iter().sum::<f64>() / xs.len() as f64)
                }
                _ => return None,
            },
            SemanticBlock::Join { op, .. } => {
                let a = self.set()?;
                let b = self.set()?;
                Den::Set(match op {
                    JoinOp::Intersection => a.intersection(&b).cloned().collect(),
                    JoinOp::Union => a.union(&b).cloned().collect(),
                    JoinOp::Exclude => a.difference(&b).cloned().collect(),
                })
            }
        })
    }
}

fn same(a: &Literal, b: &Literal) -> bool {
    match (a, b) {
        (Literal::Text(x), Literal::Text(y)) => x.eq_ignore_ascii_case(y),
        (Literal::Text(_), _) | (_, Literal::Text(_)) => false,
        _ => a.as_f64() == b.as_f64(),
    }
}

/// Denotation of a complete sequence, or `None` where evaluation is
/// undefined (missing ordinal entry, average of nothing).
pub fn brute_force(seq: &[SemanticBlock], kg: &KnowledgeGraph, ordinals: &OrdinalLexicon) -> Option<AnswerSet> {
    let mut ev = Eval { kg, ordinals, seq, pos: 0 };
    let root = ev.node()?;
    let mut extra = Vec::new();
    while ev.pos < seq.len() {
        extra.push(ev.set()?);
    }
    Some(match root {
        Den::Set(mut s) => {
            for e in extra {
                s.retain(|x| e.contains(x));
            }
            AnswerSet::Entities(s)
        }
        Den::Vals(v) => AnswerSet::Values(v),
        Den::Num(x) => AnswerSet::Scalar(x),
    })
}
