//! Templated relation corpora for desk-scale experiments.
//!
//! Every word is a pseudo-word drawn from one pool. A record reads
//! `f1 .. fj X L Y .` where `L` is the relation's label word and `X`, `Y`
//! are entities; label words of every dataset also appear as entities
//! elsewhere, so a model can learn to emit any pool word. Label sets of
//! different datasets are disjoint.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, EntitySpan, RERecord, RelationLabel, RelationalTriple, Split};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub meta_datasets: usize,
    pub heldout_datasets: usize,
    pub relations_per_meta: usize,
    pub relations_per_heldout: usize,
    pub records_per_relation_meta: usize,
    pub records_per_relation_heldout: usize,
    /// Filler words before the triple: 0 to this many.
    pub max_filler: usize,
    pub filler_vocabulary: usize,
    pub entity_vocabulary: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            meta_datasets: 8,
            heldout_datasets: 2,
            relations_per_meta: 6,
            relations_per_heldout: 8,
            records_per_relation_meta: 50,
            records_per_relation_heldout: 40,
            max_filler: 3,
            filler_vocabulary: 24,
            entity_vocabulary: 400,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSuite {
    /// Training-split bundles for meta-training.
    pub meta: Vec<DatasetBundle>,
    /// Test-split bundles with labels unseen in `meta`.
    pub heldout: Vec<DatasetBundle>,
}

fn pseudo_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::with_capacity(2 * syllables);
        for _ in 0..syllables {
            w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

struct Builder {
    text: String,
    chars: usize,
}

impl Builder {
    fn push(&mut self, word: &str) -> EntitySpan {
        if !self.text.is_empty() {
            self.text.push(' ');
            self.chars += 1;
        }
        let start = self.chars;
        self.text.push_str(word);
        self.chars += word.chars().count();
        EntitySpan::new(word, start, self.chars)
    }
}

fn record(
    id: String,
    dataset: &str,
    label: &str,
    fillers: &[String],
    entities: &[String],
    cfg: &SyntheticConfig,
    rng: &mut ChaCha8Rng,
) -> RERecord {
    let mut b = Builder {
        text: String::new(),
        chars: 0,
    };
    for _ in 0..rng.gen_range(0..=cfg.max_filler) {
        b.push(fillers.choose(rng).expect("fillers"));
    }
    let pick = |rng: &mut ChaCha8Rng, avoid: &[&str]| loop {
        let e = entities.choose(rng).expect("entities");
        if !avoid.contains(&e.as_str()) {
            break e.clone();
        }
    };
    let x = pick(rng, &[label]);
    let y = pick(rng, &[label, &x]);
    let subject = b.push(&x);
    b.push(label);
    let object = b.push(&y);
    b.push(".");
    RERecord::new(
        id,
        b.text,
        vec![RelationalTriple {
            subject,
            predicate: RelationLabel::new(label),
            object,
        }],
        dataset,
    )
    .expect("generated spans are consistent")
}

fn bundle(
    name: String,
    labels: &[String],
    per_relation: usize,
    split: Split,
    fillers: &[String],
    entities: &[String],
    cfg: &SyntheticConfig,
    rng: &mut ChaCha8Rng,
) -> DatasetBundle {
    let mut records = Vec::with_capacity(labels.len() * per_relation);
    for label in labels {
        for i in 0..per_relation {
            let id = format!("{name}-{label}-{i}");
            records.push((split, record(id, &name, label, fillers, entities, cfg, rng)));
        }
    }
    records.shuffle(rng);
    DatasetBundle::from_records(name, records)
}

/// Generates meta-training and held-out bundles.
pub fn generate(cfg: &SyntheticConfig) -> SyntheticSuite {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let label_count =
        cfg.meta_datasets * cfg.relations_per_meta + cfg.heldout_datasets * cfg.relations_per_heldout;
    assert!(
        cfg.entity_vocabulary >= label_count + 3,
        "entity vocabulary must exceed the number of labels"
    );
    let words = pseudo_words(cfg.filler_vocabulary + cfg.entity_vocabulary, &mut rng);
    let (fillers, entities) = words.split_at(cfg.filler_vocabulary);
    let mut label_words: Vec<String> = entities.to_vec();
    label_words.shuffle(&mut rng);
    let mut labels = label_words.into_iter();
    let mut take = |n: usize| -> Vec<String> {
        let mut v: Vec<String> = labels.by_ref().take(n).collect();
        v.sort();
        v
    };
    let meta_labels: Vec<Vec<String>> = (0..cfg.meta_datasets).map(|_| take(cfg.relations_per_meta)).collect();
    let held_labels: Vec<Vec<String>> =
        (0..cfg.heldout_datasets).map(|_| take(cfg.relations_per_heldout)).collect();
    let meta = meta_labels
        .iter()
        .enumerate()
        .map(|(i, ls)| {
            bundle(
                format!("meta{i}"),
                ls,
                cfg.records_per_relation_meta,
                Split::Train,
                fillers,
                entities,
                cfg,
                &mut rng,
            )
        })
        .collect();
    let heldout = held_labels
        .iter()
        .enumerate()
        .map(|(i, ls)| {
            bundle(
                format!("heldout{i}"),
                ls,
                cfg.records_per_relation_heldout,
                Split::Test,
                fillers,
                entities,
                cfg,
                &mut rng,
            )
        })
        .collect();
    SyntheticSuite { meta, heldout }
}
