//! Determinism and invariance of predictions under a mock backend.

use std::sync::OnceLock;

use micre::backend::{FixtureEntry, MockBackend};
use micre::codec::{render_row, HeaderOrder};
use micre::data::{DatasetBundle, RERecord, RelationLabel};
use micre::episode::sample_fewshot_episode;
use micre::inference::{few_shot_rc, zero_shot_rc, zero_shot_rte, InferenceOptions, Prediction};
use micre::synthetic::{generate, SyntheticConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bundle() -> &'static DatasetBundle {
    static B: OnceLock<DatasetBundle> = OnceLock::new();
    B.get_or_init(|| {
        generate(&SyntheticConfig {
            meta_datasets: 1,
            heldout_datasets: 1,
            records_per_relation_heldout: 8,
            ..Default::default()
        })
        .heldout
        .remove(0)
    })
}

/// Scores drawn from a handful of values so ties are common.
fn score(rng: &mut ChaCha8Rng, shift: f64) -> f64 {
    -(rng.gen_range(0..4) as f64) * 0.5 + shift
}

struct Fixture {
    entries: Vec<FixtureEntry>,
    zero_rc: Vec<(String, String, f64)>,
}

/// Entries for zero-shot RC/RTE over `records` and few-shot RC over the
/// same records as queries, every score offset by `shift`.
fn fixture(records: &[RERecord], labels: &[RelationLabel], seed: u64, shift: f64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut zero_rc = Vec::new();
    for r in records {
        let t = r.designated();
        for l in labels {
            let suffix = format!("|{}|{}|", l.display(), t.subject.text);
            let cont = format!("{}|", t.object.text);
            let lp = score(&mut rng, shift);
            zero_rc.push((r.id.clone(), l.raw().to_string(), lp));
            entries.push(FixtureEntry::score(&suffix, &cont, lp));
            let gen_suffix = format!("{}\n{}\n|{}|", r.sentence, HeaderOrder::Pso.header(), l.display());
            let text = format!("{}|{}|", t.subject.text, t.object.text);
            entries.push(FixtureEntry::generation(&gen_suffix, &text, score(&mut rng, shift)));
            let query_suffix = format!("{}\n{}\n|", r.sentence, HeaderOrder::Pso.header());
            let row = render_row(&[l.display(), &t.subject.text, &t.object.text])[1..].to_string();
            entries.push(FixtureEntry::score(&query_suffix, &row, score(&mut rng, shift)));
        }
    }
    entries.sort_by(|a, b| format!("{:?}", a.matcher).cmp(&format!("{:?}", b.matcher)));
    entries.dedup_by(|a, b| a.matcher == b.matcher);
    Fixture { entries, zero_rc }
}

fn answers(ps: &[Prediction]) -> Vec<Option<String>> {
    ps.iter().map(|p| p.predicted.as_ref().map(|c| c.key())).collect()
}

fn run_all(
    backend: &MockBackend,
    records: &[RERecord],
    labels: &[RelationLabel],
    episode: &micre::episode::FewShotEpisode,
    opts: &InferenceOptions,
) -> (Vec<Option<String>>, Vec<Option<String>>, Vec<Option<String>>) {
    let pso = HeaderOrder::Pso;
    let zrc: Vec<Prediction> = records
        .iter()
        .map(|r| zero_shot_rc(backend, r, labels, pso, opts).unwrap())
        .collect();
    let zrte: Vec<Prediction> = records
        .iter()
        .map(|r| zero_shot_rte(backend, r, labels, pso, opts).unwrap())
        .collect();
    let frc = few_shot_rc(backend, episode, pso, opts).unwrap();
    (answers(&zrc), answers(&zrte), answers(&frc))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn predictions_are_deterministic_and_invariant(
        seed in any::<u64>(),
        shift in -50.0f64..50.0,
        jobs in 1usize..4,
    ) {
        let b = bundle();
        let episode = sample_fewshot_episode(b, 5, 1, 10, seed).unwrap();
        let records = episode.queries.clone();
        let labels = episode.candidate_relations.clone();
        let base = fixture(&records, &labels, seed, 0.0);
        let backend = MockBackend::new(base.entries.clone()).unwrap();
        let opts = InferenceOptions::default();
        let first = run_all(&backend, &records, &labels, &episode, &opts);
        prop_assert_eq!(&first, &run_all(&backend, &records, &labels, &episode, &opts));

        let parallel = InferenceOptions { jobs, ..opts };
        prop_assert_eq!(&first, &run_all(&backend, &records, &labels, &episode, &parallel));

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut permuted = labels.clone();
        permuted.shuffle(&mut rng);
        let mut ep2 = episode.clone();
        ep2.candidate_relations.shuffle(&mut rng);
        prop_assert_eq!(&first, &run_all(&backend, &records, &permuted, &ep2, &opts));

        let shifted = MockBackend::new(fixture(&records, &labels, seed, shift).entries).unwrap();
        prop_assert_eq!(&first, &run_all(&shifted, &records, &labels, &episode, &opts));

        // Brute force: highest fixture score, ties to the smallest label.
        for (r, got) in records.iter().zip(&first.0) {
            let best = base
                .zero_rc
                .iter()
                .filter(|(id, _, _)| *id == r.id)
                .max_by(|a, b| a.2.total_cmp(&b.2).then_with(|| b.1.cmp(&a.1)))
                .map(|(_, l, _)| l.clone());
            prop_assert_eq!(got, &best);
        }
    }
}
