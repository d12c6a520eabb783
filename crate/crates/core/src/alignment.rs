//! Alias expansion, dictionary-based mention linking and alignment scoring.
//!
//! Mentions are found by a greedy, left-to-right longest-match scan over the
//! normalized words of a token sequence. When one surface form belongs to
//! several elements the earliest element (triple order) wins.

use crate::error::{Error, Result};
use crate::kg::{normalize_label, normalized_words, ElementKind, KnowledgeGraph, TokenSequence, Vocab};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

/// One linkable element and its surface forms, canonical form first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AliasEntry {
    pub label: String,
    pub normalized: String,
    pub kind: ElementKind,
    pub aliases: Vec<String>,
}

/// Per-element alias lists. Element ids are indices into `entries`; for a table
/// built with [`expand_aliases`] they coincide with `KnowledgeGraph::elements()`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AliasTable {
    pub entries: Vec<AliasEntry>,
}

fn normalize_alias(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn strip_punctuation(s: &str) -> String {
    let kept: String = s.chars().filter(|c| c.is_alphanumeric() || c.is_whitespace()).collect();
    normalize_alias(&kept)
}

fn push_alias(list: &mut Vec<String>, alias: String, k: usize) {
    if list.len() < k && !alias.is_empty() && !list.contains(&alias) {
        list.push(alias);
    }
}

impl AliasTable {
    /// Canonical, underscore→space and punctuation-stripped forms of each label.
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = (&'a str, ElementKind)>, k: usize) -> Self {
        let k = k.max(1);
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for (label, kind) in labels {
            let normalized = normalize_label(label);
            if !seen.insert((kind, normalized.clone())) {
                continue;
            }
            let mut aliases = Vec::new();
            let canonical = normalize_alias(label);
            let spaced = normalize_alias(&label.replace('_', " "));
            let stripped = strip_punctuation(&spaced);
            for a in [canonical, spaced, stripped] {
                push_alias(&mut aliases, a, k);
            }
            entries.push(AliasEntry { label: label.to_string(), normalized, kind, aliases });
        }
        AliasTable { entries }
    }

    /// Appends entries for labels not yet present (used to add an entity lexicon
    /// after the graph's own elements, so graph elements keep tie-break priority).
    pub fn extend_entities<'a>(&mut self, labels: impl IntoIterator<Item = &'a str>, k: usize) {
        let present: HashSet<(ElementKind, String)> =
            self.entries.iter().map(|e| (e.kind, e.normalized.clone())).collect();
        let fresh: Vec<&str> = labels
            .into_iter()
            .filter(|l| !present.contains(&(ElementKind::Entity, normalize_label(l))))
            .collect();
        let more = AliasTable::from_labels(fresh.into_iter().map(|l| (l, ElementKind::Entity)), k);
        self.entries.extend(more.entries);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, label: &str) -> Option<usize> {
        let n = normalize_label(label);
        self.entries.iter().position(|e| e.normalized == n)
    }
}

/// Parses an alias file of `element<TAB>alias` lines.
pub fn parse_alias_file(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_once('\t')
                .map(|(e, a)| (e.to_string(), a.to_string()))
                .ok_or_else(|| Error::Record { line: i + 1, msg: "expected element<TAB>alias".into() })
        })
        .collect()
}

/// Builds the alias table of `g` with at most `k` aliases per element.
/// User aliases for unknown elements are dropped with a warning.
pub fn expand_aliases(g: &KnowledgeGraph, k: usize, extra: &[(String, String)]) -> AliasTable {
    let k = k.max(1);
    let elements = g.elements();
    let mut table = AliasTable::from_labels(elements.iter().map(|e| (e.label.as_str(), e.kind)), k);
    for (element, alias) in extra {
        match table.find(element) {
            Some(i) => push_alias(&mut table.entries[i].aliases, normalize_alias(alias), k),
            None => log::warn!("alias for unknown element {element:?} ignored"),
        }
    }
    table
}

/// A mention `[start, end)` over token positions linked to an element id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Link {
    pub start: usize,
    pub end: usize,
    pub element: usize,
}

impl Link {
    pub fn overlaps(&self, other: &Link) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Non-overlapping links sorted by start position.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AlignmentSet {
    pub links: Vec<Link>,
}

impl AlignmentSet {
    /// Token positions covered by some link.
    pub fn positions(&self) -> Vec<usize> {
        self.links.iter().flat_map(|l| l.start..l.end).collect()
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    /// Checks spans against the sequence length and element count.
    pub fn validate(&self, n_tokens: usize, n_elements: usize) -> Result<()> {
        for l in &self.links {
            if l.start >= l.end || l.end > n_tokens {
                return Err(Error::OutOfRange(format!("span [{}, {}) outside 0..{n_tokens}", l.start, l.end)));
            }
            if l.element >= n_elements {
                return Err(Error::OutOfRange(format!("element {} of {n_elements}", l.element)));
            }
        }
        Ok(())
    }
}

/// Longest-match linking over raw tokens (no padding).
pub fn link_tokens<S: AsRef<str>>(tokens: &[S], table: &AliasTable) -> AlignmentSet {
    let mut keys: HashMap<Vec<String>, usize> = HashMap::new();
    let mut max_words = 0;
    for (id, entry) in table.entries.iter().enumerate() {
        for alias in &entry.aliases {
            let key = normalized_words(alias);
            if key.is_empty() {
                continue;
            }
            max_words = max_words.max(key.len());
            keys.entry(key).or_insert(id);
        }
    }
    // flatten to words; remember which token each word came from
    let mut words = Vec::new();
    let mut owner = Vec::new();
    let mut first_word = Vec::with_capacity(tokens.len());
    for (ti, tok) in tokens.iter().enumerate() {
        first_word.push(words.len());
        for w in normalized_words(tok.as_ref()) {
            words.push(w);
            owner.push(ti);
        }
    }
    let ends_token = |wi: usize| wi + 1 == words.len() || owner[wi + 1] != owner[wi];

    let mut links = Vec::new();
    let mut ti = 0;
    while ti < tokens.len() {
        let w0 = first_word[ti];
        let starts_here = w0 < words.len() && owner[w0] == ti;
        let mut found = None;
        if starts_here {
            let longest = max_words.min(words.len() - w0);
            for n in (1..=longest).rev() {
                let last = w0 + n - 1;
                if !ends_token(last) {
                    continue;
                }
                if let Some(&element) = keys.get(&words[w0..=last]) {
                    found = Some((owner[last] + 1, element));
                    break;
                }
            }
        }
        match found {
            Some((end, element)) => {
                links.push(Link { start: ti, end, element });
                ti = end;
            }
            None => ti += 1,
        }
    }
    AlignmentSet { links }
}

/// Links mentions in the non-`[PAD]` prefix of `s`.
pub fn detect_and_link(s: &TokenSequence, vocab: &Vocab, table: &AliasTable) -> AlignmentSet {
    let real: Vec<u32> = s.ids.iter().zip(&s.mask).filter(|(_, m)| **m).map(|(id, _)| *id).collect();
    link_tokens(&vocab.decode_ids(&real), table)
}

/// Span-level precision/recall/F1 plus coverage. Counts are kept so that
/// reports over several examples can be merged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub pred_links: usize,
    pub pred_correct: usize,
    pub gold_links: usize,
    pub gold_found: usize,
    pub covered_tokens: usize,
    pub total_tokens: usize,
    pub linked_nodes: usize,
    pub total_nodes: usize,
    pub examples: usize,
}

fn rate(num: usize, den: usize, other_empty: bool) -> f64 {
    if den == 0 {
        if other_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

impl AlignmentReport {
    pub fn precision(&self) -> f64 {
        rate(self.pred_correct, self.pred_links, self.gold_links == 0)
    }

    pub fn recall(&self) -> f64 {
        rate(self.gold_found, self.gold_links, self.pred_links == 0)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn token_coverage(&self) -> f64 {
        rate(self.covered_tokens, self.total_tokens, false)
    }

    pub fn node_coverage(&self) -> f64 {
        rate(self.linked_nodes, self.total_nodes, false)
    }

    pub fn mean_links(&self) -> f64 {
        rate(self.pred_links, self.examples, false)
    }

    pub fn merge(&self, other: &AlignmentReport) -> AlignmentReport {
        AlignmentReport {
            pred_links: self.pred_links + other.pred_links,
            pred_correct: self.pred_correct + other.pred_correct,
            gold_links: self.gold_links + other.gold_links,
            gold_found: self.gold_found + other.gold_found,
            covered_tokens: self.covered_tokens + other.covered_tokens,
            total_tokens: self.total_tokens + other.total_tokens,
            linked_nodes: self.linked_nodes + other.linked_nodes,
            total_nodes: self.total_nodes + other.total_nodes,
            examples: self.examples + other.examples,
        }
    }
}

/// A predicted link is correct when it overlaps a gold span linked to the same element.
pub fn score_alignment(
    pred: &AlignmentSet,
    gold: &AlignmentSet,
    s: &TokenSequence,
    g: &KnowledgeGraph,
) -> Result<AlignmentReport> {
    let n_tokens = s.len();
    let n_nodes = g.elements().len();
    gold.validate(n_tokens, n_nodes)?;
    pred.validate(n_tokens, n_nodes)?;
    let hit = |a: &Link, set: &AlignmentSet| set.links.iter().any(|b| a.element == b.element && a.overlaps(b));
    let covered: HashSet<usize> = pred.positions().into_iter().collect();
    let nodes: HashSet<usize> = pred.links.iter().map(|l| l.element).collect();
    Ok(AlignmentReport {
        pred_links: pred.len(),
        pred_correct: pred.links.iter().filter(|l| hit(l, gold)).count(),
        gold_links: gold.len(),
        gold_found: gold.links.iter().filter(|l| hit(l, pred)).count(),
        covered_tokens: covered.len(),
        total_tokens: n_tokens,
        linked_nodes: nodes.len(),
        total_nodes: n_nodes,
        examples: 1,
    })
}

/// Line-delimited gold/predicted alignment record. `element` holds the element label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub example_id: usize,
    pub links: Vec<LabeledLink>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledLink {
    pub start: usize,
    pub end: usize,
    pub element: String,
}

impl AlignmentRecord {
    pub fn from_set(example_id: usize, set: &AlignmentSet, g: &KnowledgeGraph) -> Self {
        let elements = g.elements();
        AlignmentRecord {
            example_id,
            links: set
                .links
                .iter()
                .map(|l| LabeledLink { start: l.start, end: l.end, element: elements[l.element].label.clone() })
                .collect(),
        }
    }

    /// Resolves labels against `g`; unknown labels are an error.
    pub fn to_set(&self, g: &KnowledgeGraph) -> Result<AlignmentSet> {
        let elements = g.elements();
        let mut links = self
            .links
            .iter()
            .map(|l| {
                let n = normalize_label(&l.element);
                elements
                    .iter()
                    .position(|e| e.normalized == n)
                    .map(|element| Link { start: l.start, end: l.end, element })
                    .ok_or_else(|| Error::OutOfRange(format!("unknown element {:?}", l.element)))
            })
            .collect::<Result<Vec<_>>>()?;
        links.sort();
        Ok(AlignmentSet { links })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{encode, Triple};

    fn g1(h: &str, r: &str, t: &str) -> KnowledgeGraph {
        KnowledgeGraph::new(vec![Triple::new(h, r, t).unwrap()])
    }

    #[test]
    fn washington_variants() {
        let g = g1("USA", "capital", "Washington_D.C.");
        let t = expand_aliases(&g, 5, &[]);
        let w = &t.entries[t.find("Washington_D.C.").unwrap()].aliases;
        assert!(w.contains(&"washington d.c.".to_string()));
        assert!(w.contains(&"washington dc".to_string()));
    }

    #[test]
    fn k_one_keeps_canonical_only() {
        let g = g1("New_York", "in", "USA");
        let t = expand_aliases(&g, 1, &[("USA".into(), "United States".into())]);
        for e in &t.entries {
            assert_eq!(e.aliases, vec![e.label.to_lowercase()]);
        }
    }

    #[test]
    fn duplicate_user_alias_stored_once() {
        let g = g1("USA", "in", "x");
        let extra = vec![("USA".into(), "United States".into()), ("usa".into(), "united  STATES".into())];
        let t = expand_aliases(&g, 5, &extra);
        assert_eq!(t.entries[0].aliases, vec!["usa", "united states"]);
    }

    #[test]
    fn unknown_alias_element_is_ignored() {
        let g = g1("a", "b", "c");
        let t = expand_aliases(&g, 5, &[("zzz".into(), "q".into())]);
        assert!(t.entries.iter().all(|e| !e.aliases.contains(&"q".to_string())));
    }

    #[test]
    fn empty_table_links_nothing() {
        let set = link_tokens(&["a", "b"], &AliasTable::default());
        assert!(set.is_empty());
    }

    #[test]
    fn longest_match_wins() {
        let table = AliasTable::from_labels(
            [("New_York", ElementKind::Entity), ("New_York_City", ElementKind::Entity)],
            5,
        );
        let set = link_tokens(&["new", "york", "city"], &table);
        assert_eq!(set.links, vec![Link { start: 0, end: 3, element: 1 }]);
        let set = link_tokens(&["new", "york", "town"], &table);
        assert_eq!(set.links, vec![Link { start: 0, end: 2, element: 0 }]);
    }

    #[test]
    fn shared_surface_form_goes_to_earliest_element() {
        let g = KnowledgeGraph::new(vec![
            Triple::new("Paris", "twin", "Paris_(Texas)").unwrap(),
        ]);
        let t = expand_aliases(&g, 5, &[("Paris_(Texas)".into(), "Paris".into())]);
        let set = link_tokens(&["paris"], &t);
        assert_eq!(set.links[0].element, 0);
    }

    #[test]
    fn spans_skip_punctuation_tokens_and_respect_padding() {
        let v = Vocab::build(&["visit washington , d.c. today"], 1);
        let table = AliasTable::from_labels([("Washington_D.C.", ElementKind::Entity)], 5);
        let s = encode("visit washington , d.c. today", &v, 8);
        let set = detect_and_link(&s, &v, &table);
        assert_eq!(set.links, vec![Link { start: 1, end: 4, element: 0 }]);
        assert!(set.links.iter().all(|l| l.end <= s.len()));
    }

    #[test]
    fn scoring_half_correct() {
        let g = KnowledgeGraph::new(vec![Triple::new("a", "r", "b").unwrap()]);
        let v = Vocab::build(&["a x b y"], 1);
        let s = encode("a x b y", &v, 4);
        let gold = AlignmentSet { links: vec![Link { start: 0, end: 1, element: 0 }, Link { start: 2, end: 3, element: 2 }] };
        let pred = AlignmentSet { links: vec![Link { start: 0, end: 1, element: 0 }, Link { start: 3, end: 4, element: 2 }] };
        let r = score_alignment(&pred, &gold, &s, &g).unwrap();
        assert_eq!((r.precision(), r.recall(), r.f1()), (0.5, 0.5, 0.5));
        let same = score_alignment(&gold, &gold, &s, &g).unwrap();
        assert_eq!((same.precision(), same.recall(), same.f1()), (1.0, 1.0, 1.0));
    }

    #[test]
    fn gold_out_of_range_is_an_error() {
        let g = g1("a", "r", "b");
        let v = Vocab::build(&["a b"], 1);
        let s = encode("a b", &v, 6);
        let gold = AlignmentSet { links: vec![Link { start: 1, end: 4, element: 0 }] };
        assert!(score_alignment(&AlignmentSet::default(), &gold, &s, &g).is_err());
    }

    #[test]
    fn record_round_trip() {
        let g = g1("a", "r", "b");
        let set = AlignmentSet { links: vec![Link { start: 0, end: 1, element: 0 }, Link { start: 2, end: 3, element: 2 }] };
        let rec = AlignmentRecord::from_set(7, &set, &g);
        let json = serde_json::to_string(&rec).unwrap();
        let back: AlignmentRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_set(&g).unwrap(), set);
    }

    use proptest::prelude::*;

    const POOL: [&str; 6] = ["red", "blue", "green", "fox", "owl", "ant"];

    fn scenario() -> impl Strategy<Value = (KnowledgeGraph, Vec<(String, String)>, String)> {
        let word = || prop::sample::select(POOL.to_vec());
        let phrase = move || prop::collection::vec(word(), 1..3).prop_map(|w| w.join(" "));
        (
            prop::collection::vec((phrase(), phrase(), phrase()), 1..4),
            prop::collection::vec((0usize..3, phrase()), 0..6),
            prop::collection::vec(word(), 0..14),
        )
            .prop_map(|(raw, extra, text)| {
                let g = KnowledgeGraph::new(raw.into_iter().map(|(h, r, t)| Triple::new(h, r, t).unwrap()).collect());
                let labels: Vec<String> = g.elements().into_iter().map(|e| e.label).collect();
                let extra = extra.into_iter().map(|(i, a)| (labels[i % labels.len()].clone(), a)).collect();
                (g, extra, text.join(" "))
            })
    }

    /// One triple whose elements use single words from disjoint pools. Multi-word
    /// aliases can shadow other mentions under longest-match, so recall is only
    /// monotone in `k` on this restricted domain.
    fn disjoint_scenario() -> impl Strategy<Value = (KnowledgeGraph, Vec<(String, String)>, String)> {
        const POOLS: [[&str; 2]; 3] = [["red", "blue"], ["fox", "owl"], ["ant", "bee"]];
        let phrase = |i: usize| prop::sample::select(POOLS[i].to_vec()).prop_map(String::from);
        let extra = (0usize..3).prop_flat_map(move |i| (Just(i), phrase(i)));
        (
            (phrase(0), phrase(1), phrase(2)),
            prop::collection::vec(extra, 0..6),
            prop::collection::vec(prop::sample::select(POOLS.concat()), 0..14),
        )
            .prop_map(|((h, r, t), extra, text)| {
                let labels = [h.clone(), r.clone(), t.clone()];
                let g = KnowledgeGraph::new(vec![Triple::new(h, r, t).unwrap()]);
                let extra = extra.into_iter().map(|(i, a)| (labels[i].clone(), a)).collect();
                (g, extra, text.join(" "))
            })
    }

    proptest! {
        #[test]
        fn links_are_disjoint_valid_and_deterministic((g, extra, text) in scenario(), k in 1usize..6, pad in 0usize..4) {
            let table = expand_aliases(&g, k, &extra);
            prop_assert!(table.entries.iter().all(|e| !e.aliases.is_empty() && e.aliases.len() <= k));
            let v = Vocab::build(&[text.as_str()], 1);
            let s = encode(&text, &v, text.split_whitespace().count() + pad);
            let a = detect_and_link(&s, &v, &table);
            prop_assert_eq!(&a, &detect_and_link(&s, &v, &table));
            prop_assert!(a.validate(s.len(), table.len()).is_ok());
            prop_assert!(a.links.windows(2).all(|w| w[0].end <= w[1].start));
        }

        #[test]
        fn swapping_pred_and_gold_swaps_precision_and_recall((g, extra, text) in scenario(), k in 1usize..6) {
            let v = Vocab::build(&[text.as_str()], 1);
            let s = encode(&text, &v, 16);
            let pred = detect_and_link(&s, &v, &expand_aliases(&g, k, &extra));
            let gold = detect_and_link(&s, &v, &expand_aliases(&g, 1, &[]));
            let ab = score_alignment(&pred, &gold, &s, &g).unwrap();
            let ba = score_alignment(&gold, &pred, &s, &g).unwrap();
            prop_assert_eq!(ab.precision(), ba.recall());
            prop_assert_eq!(ab.recall(), ba.precision());
            for r in [ab.precision(), ab.recall(), ab.f1(), ab.token_coverage(), ab.node_coverage()] {
                prop_assert!((0.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn more_aliases_never_lower_recall((g, extra, text) in disjoint_scenario(), k in 1usize..5) {
            let v = Vocab::build(&[text.as_str()], 1);
            let s = encode(&text, &v, 16);
            let gold = detect_and_link(&s, &v, &expand_aliases(&g, 6, &extra));
            let recall = |k| {
                let pred = detect_and_link(&s, &v, &expand_aliases(&g, k, &extra));
                score_alignment(&pred, &gold, &s, &g).unwrap().recall()
            };
            prop_assert!(recall(k + 1) >= recall(k));
        }
    }
}

