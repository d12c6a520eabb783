//! Knowledge-graph data model, triple serialization and the corpus vocabulary.

mod dataset;
mod vocab;

pub use dataset::{parse_dataset, parse_record, DatasetParse, Example};
pub use vocab::{encode, tokenize, TokenSequence, Vocab, PAD_ID, UNK_ID, UNK_TOKEN};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

pub const HEAD: &str = "[HEAD]";
pub const REL: &str = "[REL]";
pub const TAIL: &str = "[TAIL]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";

/// Marker tokens in id order. `[PAD]` comes first so that its id is 0.
pub const RESERVED: [&str; 5] = [PAD, HEAD, REL, TAIL, SEP];

/// A directed `(head, relation, tail)` fact.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub rel: String,
    pub tail: String,
}

fn check_label(label: &str) -> Result<()> {
    if label.is_empty() {
        return Err(Error::InvalidLabel(label.into(), "empty label"));
    }
    let upper = label.to_uppercase();
    if RESERVED.iter().any(|m| upper.contains(m)) {
        return Err(Error::InvalidLabel(label.into(), "contains a reserved marker"));
    }
    if label.trim() != label || label.split(' ').any(str::is_empty) {
        return Err(Error::InvalidLabel(label.into(), "irregular whitespace"));
    }
    if label.chars().any(|c| c.is_whitespace() && c != ' ') {
        return Err(Error::InvalidLabel(label.into(), "irregular whitespace"));
    }
    Ok(())
}

impl Triple {
    pub fn new(head: impl Into<String>, rel: impl Into<String>, tail: impl Into<String>) -> Result<Self> {
        let t = Triple { head: head.into(), rel: rel.into(), tail: tail.into() };
        check_label(&t.head)?;
        check_label(&t.rel)?;
        check_label(&t.tail)?;
        Ok(t)
    }
}

/// Whether a graph element is an entity (head/tail) or a relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ElementKind {
    Entity,
    Relation,
}

/// A distinct entity or relation of a graph, in first-occurrence order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Element {
    pub label: String,
    pub normalized: String,
    pub kind: ElementKind,
}

/// Lowercases, turns underscores into spaces and strips punctuation surrounding
/// each word. `Washington_D.C.` and `Washington, D.C.` both become `washington d.c`.
pub fn normalize_label(label: &str) -> String {
    normalized_words(label).join(" ")
}

pub(crate) fn normalized_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .replace('_', " ")
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

/// An ordered list of triples. Order is the dataset order and is never re-sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub triples: Vec<Triple>,
}

impl KnowledgeGraph {
    pub fn new(triples: Vec<Triple>) -> Self {
        KnowledgeGraph { triples }
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Distinct entities and relations in triple order (head, rel, tail of each triple).
    pub fn elements(&self) -> Vec<Element> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for t in &self.triples {
            for (label, kind) in [
                (&t.head, ElementKind::Entity),
                (&t.rel, ElementKind::Relation),
                (&t.tail, ElementKind::Entity),
            ] {
                let normalized = normalize_label(label);
                if seen.insert((kind, normalized.clone())) {
                    out.push(Element { label: label.clone(), normalized, kind });
                }
            }
        }
        out
    }

    /// U_G: normalized entity labels, deduplicated, first-occurrence order.
    pub fn entity_set(&self) -> Vec<String> {
        self.elements()
            .into_iter()
            .filter(|e| e.kind == ElementKind::Entity)
            .map(|e| e.normalized)
            .collect()
    }

    pub fn relation_set(&self) -> Vec<String> {
        self.elements()
            .into_iter()
            .filter(|e| e.kind == ElementKind::Relation)
            .map(|e| e.normalized)
            .collect()
    }

    /// `[HEAD] h [REL] r [TAIL] t` blocks joined by `[SEP]`, labels verbatim.
    pub fn serialize(&self) -> Result<String> {
        if self.triples.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let blocks: Vec<String> = self
            .triples
            .iter()
            .map(|t| format!("{HEAD} {} {REL} {} {TAIL} {}", t.head, t.rel, t.tail))
            .collect();
        Ok(blocks.join(&format!(" {SEP} ")))
    }

    /// Inverse of [`KnowledgeGraph::serialize`].
    pub fn parse_serialized(s: &str) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("serialized graph: {m}"));
        let mut triples = Vec::new();
        let mut toks = s.split_whitespace().peekable();
        if toks.peek().is_none() {
            return Err(Error::EmptyGraph);
        }
        loop {
            let mut slots: [Vec<&str>; 3] = Default::default();
            for (slot, marker) in slots.iter_mut().zip([HEAD, REL, TAIL]) {
                match toks.next() {
                    Some(m) if m == marker => {}
                    other => return Err(fmt(&format!("expected {marker}, found {other:?}"))),
                }
                while let Some(&tok) = toks.peek() {
                    if RESERVED.contains(&tok) {
                        break;
                    }
                    slot.push(tok);
                    toks.next();
                }
            }
            let [h, r, t] = slots.map(|s| s.join(" "));
            triples.push(Triple::new(h, r, t)?);
            match toks.next() {
                None => break,
                Some(SEP) => continue,
                Some(other) => return Err(fmt(&format!("expected {SEP}, found {other:?}"))),
            }
        }
        Ok(KnowledgeGraph { triples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn usa_graph() -> KnowledgeGraph {
        KnowledgeGraph::new(vec![
            Triple::new("USA", "hosted", "1994_FIFA_World_Cup").unwrap(),
            Triple::new("USA", "capital", "Washington_D.C.").unwrap(),
            Triple::new("1994_FIFA_World_Cup", "top_scorer", "Hristo_Stoichkov").unwrap(),
        ])
    }

    #[test]
    fn serializes_usa_example() {
        assert_eq!(
            usa_graph().serialize().unwrap(),
            "[HEAD] USA [REL] hosted [TAIL] 1994_FIFA_World_Cup [SEP] \
             [HEAD] USA [REL] capital [TAIL] Washington_D.C. [SEP] \
             [HEAD] 1994_FIFA_World_Cup [REL] top_scorer [TAIL] Hristo_Stoichkov"
        );
    }

    #[test]
    fn single_triple_has_no_separator() {
        let g = KnowledgeGraph::new(vec![Triple::new("a", "b", "c").unwrap()]);
        assert_eq!(g.serialize().unwrap(), "[HEAD] a [REL] b [TAIL] c");
    }

    #[test]
    fn empty_graph_is_rejected() {
        assert!(matches!(KnowledgeGraph::default().serialize(), Err(Error::EmptyGraph)));
        assert!(matches!(KnowledgeGraph::parse_serialized("  "), Err(Error::EmptyGraph)));
    }

    #[test]
    fn parse_back_recovers_triples() {
        let g = usa_graph();
        assert_eq!(KnowledgeGraph::parse_serialized(&g.serialize().unwrap()).unwrap(), g);
        let spaced = KnowledgeGraph::new(vec![Triple::new("New York", "located in", "United States").unwrap()]);
        assert_eq!(KnowledgeGraph::parse_serialized(&spaced.serialize().unwrap()).unwrap(), spaced);
    }

    #[test]
    fn malformed_serialization_is_an_error() {
        assert!(KnowledgeGraph::parse_serialized("[HEAD] a [TAIL] c").is_err());
        assert!(KnowledgeGraph::parse_serialized("[HEAD] a [REL] b [TAIL] c [HEAD]").is_err());
        assert!(KnowledgeGraph::parse_serialized("[HEAD] a [REL] b [TAIL] c [SEP]").is_err());
        assert!(KnowledgeGraph::parse_serialized("[HEAD] [REL] b [TAIL] c").is_err());
    }

    #[test]
    fn labels_reject_markers_and_empty() {
        assert!(Triple::new("", "r", "t").is_err());
        assert!(Triple::new("a[SEP]b", "r", "t").is_err());
        assert!(Triple::new("a", "[pad]", "t").is_err());
        assert!(Triple::new(" a", "r", "t").is_err());
        assert!(Triple::new("a  b", "r", "t").is_err());
    }

    #[test]
    fn entity_set_is_deduplicated() {
        let g = usa_graph();
        assert_eq!(
            g.entity_set(),
            vec!["usa", "1994 fifa world cup", "washington d.c", "hristo stoichkov"]
        );
        assert_eq!(g.relation_set(), vec!["hosted", "capital", "top scorer"]);
        assert_eq!(g.elements().len(), 7);
    }

    #[test]
    fn normalization_matches_surface_variants() {
        assert_eq!(normalize_label("Washington_D.C."), normalize_label("Washington, D.C."));
        assert_eq!(normalize_label("  Hristo   Stoichkov''"), "hristo stoichkov");
    }

    fn label() -> impl proptest::strategy::Strategy<Value = String> {
        use proptest::prelude::*;
        prop::collection::vec("[A-Za-z0-9_.,']{1,6}", 1..3).prop_map(|w| w.join(" "))
    }

    proptest::proptest! {
        #[test]
        fn serialize_parse_round_trip(raw in proptest::collection::vec((label(), label(), label()), 1..5)) {
            let triples: Vec<Triple> = raw.into_iter().map(|(h, r, t)| Triple::new(h, r, t).unwrap()).collect();
            let g = KnowledgeGraph::new(triples);
            let s = g.serialize().unwrap();
            let back = KnowledgeGraph::parse_serialized(&s).unwrap();
            proptest::prop_assert_eq!(&back, &g);
            proptest::prop_assert_eq!(back.serialize().unwrap(), s);
        }

        #[test]
        fn serialization_is_injective(
            a in proptest::collection::vec((label(), label(), label()), 1..4),
            b in proptest::collection::vec((label(), label(), label()), 1..4),
        ) {
            let mk = |v: &[(String, String, String)]| {
                KnowledgeGraph::new(v.iter().map(|(h, r, t)| Triple::new(h.clone(), r.clone(), t.clone()).unwrap()).collect())
            };
            let (ga, gb) = (mk(&a), mk(&b));
            proptest::prop_assert_eq!(ga == gb, ga.serialize().unwrap() == gb.serialize().unwrap());
        }
    }
}

