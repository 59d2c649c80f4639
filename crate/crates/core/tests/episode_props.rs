use micre::data::MetaCorpus;
use micre::episode::{
    sample_fewshot_episode, sample_meta_episode, sample_zeroshot_tasks, tokenize_with_mask,
    HeaderPolicy, MetaTrainConfig, Tokenizer,
};
use micre::synthetic::{generate, SyntheticConfig, SyntheticSuite};
use micre::toy::vocab_for;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::sync::OnceLock;

fn suite() -> &'static SyntheticSuite {
    static S: OnceLock<SyntheticSuite> = OnceLock::new();
    S.get_or_init(|| {
        generate(&SyntheticConfig {
            meta_datasets: 4,
            records_per_relation_meta: 10,
            ..Default::default()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn mask_selects_exactly_the_target(
        seed in any::<u64>(),
        k in 0usize..24,
        block_size in 48usize..400,
        random_header in any::<bool>(),
    ) {
        let s = suite();
        let corpus = MetaCorpus { bundles: s.meta.clone(), cap: 10_000 };
        let vocab = vocab_for(&corpus.bundles);
        let cfg = MetaTrainConfig {
            k,
            block_size,
            header_policy: if random_header {
                HeaderPolicy::PerEpisodeRandom
            } else {
                HeaderPolicy::Fixed(Default::default())
            },
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ep = sample_meta_episode(&corpus, &cfg, &mut rng).unwrap();
        prop_assert_eq!(ep.demonstrations.len(), k);
        let inst = tokenize_with_mask(&ep, &vocab, block_size).unwrap();
        prop_assert!(inst.tokens.len() <= block_size);
        prop_assert_eq!(inst.tokens.len(), inst.mask.len());
        prop_assert_eq!(vocab.decode(&inst.masked_tokens()), ep.target.clone());
        let target = vocab.encode(&ep.target);
        prop_assert!(inst.tokens.ends_with(&target));
        let first = inst.mask.iter().position(|&m| m).unwrap();
        prop_assert!(inst.mask[first..].iter().all(|&m| m));
        let kept = &ep.demonstrations[inst.dropped..];
        let context = micre::codec::join_blocks(&kept.iter().chain([&ep.query]).collect::<Vec<_>>());
        prop_assert_eq!(vocab.decode(&inst.tokens[..first]), vocab.decode(&vocab.encode(&context)));
    }

    #[test]
    fn fewshot_support_and_queries_are_disjoint(
        seed in any::<u64>(),
        n in 1usize..=8,
        k in 1usize..=5,
    ) {
        let b = &suite().heldout[0];
        let ep = sample_fewshot_episode(b, n, k, 5 * n, seed).unwrap();
        prop_assert_eq!(ep.support.len(), n * k);
        let ids: BTreeSet<&str> = ep.support.iter().map(|r| r.id.as_str()).collect();
        prop_assert!(ep.queries.iter().all(|q| !ids.contains(q.id.as_str())));
        let rels: BTreeSet<&str> = ep.candidate_relations.iter().map(|l| l.raw()).collect();
        prop_assert_eq!(rels.len(), n);
        for r in ep.support.iter().chain(&ep.queries) {
            prop_assert!(rels.contains(r.relation().raw()));
        }
        for l in &rels {
            prop_assert_eq!(ep.support.iter().filter(|r| r.relation().raw() == *l).count(), k);
        }
        prop_assert_eq!(&sample_fewshot_episode(b, n, k, 5 * n, seed).unwrap(), &ep);
    }

    #[test]
    fn zeroshot_records_follow_chosen_relations(seed in any::<u64>(), m in 1usize..=8) {
        let b = &suite().heldout[1];
        let tasks = sample_zeroshot_tasks(b, m, 3, seed).unwrap();
        prop_assert_eq!(tasks.len(), 3);
        for t in &tasks {
            prop_assert_eq!(t.relations.len(), m);
            let chosen: BTreeSet<&str> = t.relations.iter().map(|l| l.raw()).collect();
            let expected = b.eval_records().iter().filter(|r| chosen.contains(r.relation().raw())).count();
            prop_assert_eq!(t.eval_records.len(), expected);
        }
    }
}
