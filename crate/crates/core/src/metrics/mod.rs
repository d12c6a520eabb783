//! Entity grounding (FGT), edit sensitivity (ESR), the single-entity graph
//! edit generator, and BLEU.

mod bleu;

pub use bleu::bleu;

use crate::alignment::{expand_aliases, link_tokens, AliasTable};
use crate::error::{Error, Result};
use crate::kg::{normalize_label, tokenize, ElementKind, KnowledgeGraph, Triple};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Default FGT penalty weights.
pub const DEFAULT_LAMBDAS: [f64; 3] = [0.0, 0.5, 1.0];

/// Alias table with the graph's own elements first, then the lexicon entities.
pub fn entity_table<'a>(g: &KnowledgeGraph, lexicon: impl IntoIterator<Item = &'a str>, k: usize) -> AliasTable {
    let mut table = expand_aliases(g, k, &[]);
    table.extend_entities(lexicon, k);
    table
}

/// Normalized labels of all entities of `table` mentioned in `text`.
pub fn text_entities(text: &str, table: &AliasTable) -> BTreeSet<String> {
    link_tokens(&tokenize(text), table)
        .links
        .iter()
        .map(|l| &table.entries[l.element])
        .filter(|e| e.kind == ElementKind::Entity)
        .map(|e| e.normalized.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySets {
    pub u_g: BTreeSet<String>,
    pub u_s: BTreeSet<String>,
    pub h_s: BTreeSet<String>,
    /// Whitespace word count of the text.
    pub n: usize,
}

/// Splits the entities detected in `s` into graph entities (`U_S`) and
/// out-of-graph lexicon entities (`H_S`).
pub fn extract_entity_sets(g: &KnowledgeGraph, s: &str, table: &AliasTable) -> EntitySets {
    let u_g: BTreeSet<String> = g.entity_set().into_iter().collect();
    let (u_s, h_s) = text_entities(s, table).into_iter().partition(|e| u_g.contains(e));
    EntitySets { u_g, u_s, h_s, n: s.split_whitespace().count() }
}

/// `F1 · (1 − λ·h/N)` with a possibly fractional (averaged) hallucination count.
pub fn fgt_from_parts(f1: f64, h: f64, n: f64, lambda: f64) -> Result<f64> {
    if !(n > 0.0) {
        return Err(Error::OutOfRange("FGT needs a positive word count N".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::OutOfRange(format!("lambda {lambda} must be non-negative")));
    }
    Ok(f1 * (1.0 - lambda * h / n))
}

/// Entity precision, recall and F1 between `U_G` and `U_S`.
pub fn entity_prf(sets: &EntitySets) -> (f64, f64, f64) {
    let hit = sets.u_g.intersection(&sets.u_s).count() as f64;
    let ratio = |den: usize| if den == 0 { 0.0 } else { hit / den as f64 };
    let denom = sets.u_g.len() + sets.u_s.len();
    let f1 = if denom == 0 { 0.0 } else { 2.0 * hit / denom as f64 };
    (ratio(sets.u_s.len()), ratio(sets.u_g.len()), f1)
}

pub fn fgt(sets: &EntitySets, lambda: f64) -> Result<f64> {
    let (_, _, f1) = entity_prf(sets);
    fgt_from_parts(f1, sets.h_s.len() as f64, sets.n as f64, lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FgtReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub h_count: usize,
    /// FGT per λ, keyed by the λ's decimal form.
    pub fgt: BTreeMap<String, f64>,
}

pub fn fgt_report(sets: &EntitySets, lambdas: &[f64]) -> Result<FgtReport> {
    let (precision, recall, f1) = entity_prf(sets);
    let fgt = lambdas.iter().map(|&l| Ok((l.to_string(), fgt(sets, l)?))).collect::<Result<_>>()?;
    Ok(FgtReport { precision, recall, f1, h_count: sets.h_s.len(), fgt })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsrReport {
    pub delta_g: BTreeSet<String>,
    pub delta_t: BTreeSet<String>,
    pub score: f64,
}

/// Edit sensitivity between `(g, s)` and `(g2, s2)`; all texts are read with one
/// shared alias table.
pub fn esr(g: &KnowledgeGraph, s: &str, g2: &KnowledgeGraph, s2: &str, table: &AliasTable) -> EsrReport {
    let ug: BTreeSet<String> = g.entity_set().into_iter().collect();
    let ug2: BTreeSet<String> = g2.entity_set().into_iter().collect();
    let delta_g: BTreeSet<String> = ug.symmetric_difference(&ug2).cloned().collect();
    let (t1, t2) = (text_entities(s, table), text_entities(s2, table));
    let delta_t: BTreeSet<String> = t1.symmetric_difference(&t2).cloned().collect();
    let score = if delta_t.is_empty() {
        if delta_g.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        delta_g.intersection(&delta_t).count() as f64 / delta_t.len() as f64
    };
    EsrReport { delta_g, delta_t, score }
}

/// Table covering both graphs (first graph's elements first) and the lexicon.
pub fn esr_table<'a>(g: &KnowledgeGraph, g2: &KnowledgeGraph, lexicon: impl IntoIterator<Item = &'a str>, k: usize) -> AliasTable {
    let mut table = expand_aliases(g, k, &[]);
    let extra: Vec<String> = g2.entity_set();
    table.extend_entities(extra.iter().map(String::as_str), k);
    table.extend_entities(lexicon, k);
    table
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Head,
    Tail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphEdit {
    pub triple: usize,
    pub slot: Slot,
    pub old: String,
    pub new: String,
}

/// Replaces the head or tail of one uniformly chosen triple with a different
/// lexicon entity. Other occurrences of the old entity are left as they are.
pub fn make_edit(g: &KnowledgeGraph, lexicon: &[String], rng: &mut impl Rng) -> Result<(KnowledgeGraph, GraphEdit)> {
    if g.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let distinct: BTreeSet<String> = lexicon.iter().map(|l| normalize_label(l)).collect();
    if distinct.len() < 2 {
        return Err(Error::Config("edit lexicon needs at least two distinct entities".into()));
    }
    let idx = rng.random_range(0..g.triples.len());
    let slot = if rng.random_bool(0.5) { Slot::Head } else { Slot::Tail };
    let t = &g.triples[idx];
    let old = match slot {
        Slot::Head => t.head.clone(),
        Slot::Tail => t.tail.clone(),
    };
    let old_norm = normalize_label(&old);
    let candidates: Vec<&String> = lexicon.iter().filter(|l| normalize_label(l) != old_norm).collect();
    let new = (*candidates.choose(rng).expect("at least one other entity")).clone();
    let replaced = match slot {
        Slot::Head => Triple::new(new.as_str(), t.rel.as_str(), t.tail.as_str())?,
        Slot::Tail => Triple::new(t.head.as_str(), t.rel.as_str(), new.as_str())?,
    };
    let mut triples = g.triples.clone();
    triples[idx] = replaced;
    Ok((KnowledgeGraph::new(triples), GraphEdit { triple: idx, slot, old, new }))
}

/// One line of the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub example_id: usize,
    pub fgt: BTreeMap<String, f64>,
    pub recall: f64,
    pub f1: f64,
    pub h_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub esr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu: Option<f64>,
}

/// Means over records; ESR and BLEU only over records that carry them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub summary: bool,
    pub count: usize,
    pub fgt: BTreeMap<String, f64>,
    pub recall: f64,
    pub f1: f64,
    pub h_count: f64,
    pub esr: Option<f64>,
    pub bleu: Option<f64>,
}

pub fn summarize(records: &[EvalRecord]) -> EvalSummary {
    let n = records.len().max(1) as f64;
    let mean = |f: &dyn Fn(&EvalRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let opt_mean = |f: &dyn Fn(&EvalRecord) -> Option<f64>| {
        let vals: Vec<f64> = records.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let mut fgt = BTreeMap::new();
    for r in records {
        for (k, v) in &r.fgt {
            *fgt.entry(k.clone()).or_insert(0.0) += v;
        }
    }
    fgt.values_mut().for_each(|v| *v /= n);
    EvalSummary {
        summary: true,
        count: records.len(),
        fgt,
        recall: mean(&|r| r.recall),
        f1: mean(&|r| r.f1),
        h_count: mean(&|r| r.h_count as f64),
        esr: opt_mean(&|r| r.esr),
        bleu: opt_mean(&|r| r.bleu),
    }
}
