//! A small templated graph/text corpus for smoke tests and demos.

use crate::error::Result;
use crate::kg::{Example, KnowledgeGraph, Triple};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PEOPLE: &[&str] = &[
    "alice", "bruno", "carla", "dmitri", "elena", "farid", "greta", "hiro", "ines", "jonas", "kemal", "lucia",
    "marek", "nadia", "oskar", "priya", "quentin", "rosa", "sven", "tamara", "umar", "vera", "wendel", "ximena",
    "yusuf", "zelda",
];
const CITIES: &[&str] = &["oslo", "lima", "porto", "kyoto", "dakar", "quito", "riga", "tunis", "perth", "malmo", "cusco", "bergen"];
const COUNTRIES: &[&str] = &["norway", "peru", "portugal", "japan", "senegal", "ecuador", "latvia", "tunisia", "australia", "sweden"];
const CLUBS: &[&str] = &["rovers", "comets", "falcons", "pioneers", "mariners", "wolves"];

/// Relations, the head pool, the tail pool and the sentence template.
const RELATIONS: &[(&str, Pool, &[&str], &str)] = &[
    ("born_in", Pool::People, CITIES, "{h} was born in {t}"),
    ("lives_in", Pool::People, COUNTRIES, "{h} lives in {t}"),
    ("plays_for", Pool::People, CLUBS, "{h} plays for the {t}"),
    ("located_in", Pool::Cities, COUNTRIES, "{h} is located in {t}"),
];

#[derive(Clone, Copy, PartialEq, Eq)]
enum Pool {
    People,
    Cities,
}

impl Pool {
    fn labels(self) -> &'static [&'static str] {
        match self {
            Pool::People => PEOPLE,
            Pool::Cities => CITIES,
        }
    }
}

/// Every entity label the generator can emit.
pub fn toy_lexicon() -> Vec<&'static str> {
    PEOPLE.iter().chain(CITIES).chain(COUNTRIES).chain(CLUBS).copied().collect()
}

/// `n` distinct pairs with one or two triples each. Two-triple graphs share
/// the head and are realized as two clauses joined by "and".
pub fn toy_corpus(n: usize, seed: u64) -> Result<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Example> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n && attempts < 100 * n.max(1) {
        attempts += 1;
        let two = out.len() % 2 == 1;
        let (r1, heads, tails1, tpl1) = *RELATIONS.choose(&mut rng).expect("non-empty");
        let h = *heads.labels().choose(&mut rng).expect("non-empty");
        let t1 = *tails1.choose(&mut rng).expect("non-empty");
        let mut triples = vec![Triple::new(h, r1, t1)?];
        let mut text = tpl1.replace("{h}", h).replace("{t}", t1);
        if two {
            let mut others: Vec<_> = RELATIONS.iter().filter(|r| r.0 != r1 && r.1 == heads).collect();
            others.shuffle(&mut rng);
            if let Some(&&(r2, _, tails2, tpl2)) = others.first() {
                let t2 = *tails2.choose(&mut rng).expect("non-empty");
                triples.push(Triple::new(h, r2, t2)?);
                let clause = tpl2.replace("{h} ", "").replace("{t}", t2);
                text = format!("{text} and {clause}");
            }
        }
        let ex = Example { graph: KnowledgeGraph::new(triples), text: format!("{text} .") };
        if !out.iter().any(|e| e.graph == ex.graph) {
            out.push(ex);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{tokenize, Vocab};

    #[test]
    fn corpus_is_seeded_distinct_and_small() {
        let a = toy_corpus(50, 1).unwrap();
        assert_eq!(a, toy_corpus(50, 1).unwrap());
        assert_eq!(a.len(), 50);
        let mut corpus: Vec<String> = a.iter().map(|e| e.text.clone()).collect();
        corpus.extend(a.iter().map(|e| e.graph.serialize().unwrap()));
        let vocab = Vocab::build(&corpus, 1);
        assert!(vocab.len() <= 200, "{}", vocab.len());
        assert!(a.iter().all(|e| tokenize(&e.text).len() <= 16));
    }
}
