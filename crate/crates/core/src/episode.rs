//! Meta-training episodes, loss-masked tokenization and evaluation sampling.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{join_blocks, render_block, BlockMode, HeaderOrder, RowSelection};
use crate::data::{DatasetBundle, MetaCorpus, RERecord, RelationLabel};

pub type TokenId = u32;

/// Text to token ids and back.
pub trait Tokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId>;
    fn decode(&self, ids: &[TokenId]) -> String;
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EpisodeError {
    #[error("bundle {bundle} has {available} training records, need {needed}")]
    BundleTooSmall {
        bundle: String,
        available: usize,
        needed: usize,
    },
    #[error("corpus has no bundles")]
    EmptyCorpus,
    #[error("instance needs {needed} tokens with no demonstrations, block size is {block_size}")]
    UnsatisfiableBudget { needed: usize, block_size: usize },
    #[error("{0}")]
    Config(String),
    #[error("relation {relation} has {available} examples, need {needed}")]
    InsufficientExamples {
        relation: String,
        available: usize,
        needed: usize,
    },
    #[error("requested {requested} relations but only {available} are available")]
    TooFewRelations { requested: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeaderPolicy {
    PerEpisodeRandom,
    Fixed(HeaderOrder),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetWeighting {
    Uniform,
    SizeProportional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaTrainConfig {
    /// In-context examples per instance.
    pub k: usize,
    pub block_size: usize,
    pub header_policy: HeaderPolicy,
    pub weighting: DatasetWeighting,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            k: 16,
            block_size: 512,
            header_policy: HeaderPolicy::PerEpisodeRandom,
            weighting: DatasetWeighting::Uniform,
            seed: 0,
            steps: 100_000,
            batch_size: 4,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<(), EpisodeError> {
        if self.block_size < 32 {
            return Err(EpisodeError::Config(format!(
                "block_size must be at least 32, got {}",
                self.block_size
            )));
        }
        if self.batch_size == 0 {
            return Err(EpisodeError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// A rendered meta-training instance: `k` demonstrations, then the query
/// block up to its header; `target` holds the query's rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeText {
    pub demonstrations: Vec<String>,
    /// Query block rendered input-only (ends with the header line).
    pub query: String,
    /// Query rows followed by a newline.
    pub target: String,
    pub order: HeaderOrder,
    pub bundle_index: usize,
}

impl EpisodeText {
    pub fn context(&self) -> String {
        context_with(&self.demonstrations, &self.query)
    }
}

fn context_with(demos: &[String], query: &str) -> String {
    if demos.is_empty() {
        query.to_string()
    } else {
        let mut s = join_blocks(demos);
        s.push_str(crate::codec::BLOCK_SEPARATOR);
        s.push_str(query);
        s
    }
}

/// Renders a query/target pair from one record (all gold rows).
pub fn query_and_target(record: &RERecord, order: HeaderOrder) -> (String, String) {
    let query = render_block(record, order, &BlockMode::InputOnly, RowSelection::All).text;
    let full = render_block(record, order, &BlockMode::Full, RowSelection::All).text;
    let mut target = full[query.len()..].to_string();
    target.push('\n');
    (query, target)
}

fn choose_bundle<R: Rng + ?Sized>(
    corpus: &MetaCorpus,
    weighting: DatasetWeighting,
    rng: &mut R,
) -> usize {
    match weighting {
        DatasetWeighting::Uniform => rng.gen_range(0..corpus.bundles.len()),
        DatasetWeighting::SizeProportional => {
            let total: usize = corpus.bundles.iter().map(|b| b.train().len()).sum();
            let mut pick = rng.gen_range(0..total.max(1));
            for (i, b) in corpus.bundles.iter().enumerate() {
                if pick < b.train().len() {
                    return i;
                }
                pick -= b.train().len();
            }
            corpus.bundles.len() - 1
        }
    }
}

/// Draws one meta-training instance: a bundle, then `k + 1` of its training
/// records without replacement, all rendered under one header order.
pub fn sample_meta_episode<R: Rng + ?Sized>(
    corpus: &MetaCorpus,
    cfg: &MetaTrainConfig,
    rng: &mut R,
) -> Result<EpisodeText, EpisodeError> {
    if corpus.bundles.is_empty() {
        return Err(EpisodeError::EmptyCorpus);
    }
    let bundle_index = choose_bundle(corpus, cfg.weighting, rng);
    let bundle = &corpus.bundles[bundle_index];
    let train = bundle.train();
    let needed = cfg.k + 1;
    if train.len() < needed {
        return Err(EpisodeError::BundleTooSmall {
            bundle: bundle.name.clone(),
            available: train.len(),
            needed,
        });
    }
    let order = match cfg.header_policy {
        HeaderPolicy::Fixed(o) => o,
        HeaderPolicy::PerEpisodeRandom => {
            if rng.gen_bool(0.5) {
                HeaderOrder::Pso
            } else {
                HeaderOrder::Sop
            }
        }
    };
    let picks = rand::seq::index::sample(rng, train.len(), needed).into_vec();
    let (last, demos) = picks.split_last().expect("k + 1 >= 1");
    let demonstrations = demos
        .iter()
        .map(|&i| render_block(&train[i], order, &BlockMode::Full, RowSelection::All).text)
        .collect();
    let (query, target) = query_and_target(&train[*last], order);
    Ok(EpisodeText {
        demonstrations,
        query,
        target,
        order,
        bundle_index,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedInstance {
    pub tokens: Vec<TokenId>,
    /// True exactly on target tokens.
    pub mask: Vec<bool>,
    /// Demonstrations dropped to fit the block.
    pub dropped: usize,
}

impl TokenizedInstance {
    pub fn masked_tokens(&self) -> Vec<TokenId> {
        self.tokens
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect()
    }
}

/// Fits a context (demonstrations + query) into `budget` tokens by dropping
/// whole demonstrations from the front. Returns the number dropped and the
/// tokenized context.
pub fn fit_demonstrations<T: Tokenizer + ?Sized>(
    tok: &T,
    demos: &[String],
    query: &str,
    budget: usize,
) -> Result<(usize, Vec<TokenId>), EpisodeError> {
    let query_len = tok.encode(query).len();
    if query_len > budget {
        return Err(EpisodeError::UnsatisfiableBudget {
            needed: query_len,
            block_size: budget,
        });
    }
    let sep_len = tok.encode(crate::codec::BLOCK_SEPARATOR).len();
    let demo_lens: Vec<usize> = demos.iter().map(|d| tok.encode(d).len() + sep_len).collect();
    // Estimate assuming tokenization composes across block boundaries, then
    // verify on the real string.
    let mut total: usize = query_len + demo_lens.iter().sum::<usize>();
    let mut drop = 0;
    while total > budget && drop < demos.len() {
        total -= demo_lens[drop];
        drop += 1;
    }
    loop {
        let tokens = tok.encode(&context_with(&demos[drop..], query));
        if tokens.len() <= budget || drop == demos.len() {
            if tokens.len() > budget {
                return Err(EpisodeError::UnsatisfiableBudget {
                    needed: tokens.len(),
                    block_size: budget,
                });
            }
            return Ok((drop, tokens));
        }
        drop += 1;
    }
}

/// Tokenizes context ++ target with a mask on the target tokens, dropping
/// leading demonstrations until the instance fits in `block_size`.
pub fn tokenize_with_mask<T: Tokenizer + ?Sized>(
    ep: &EpisodeText,
    tok: &T,
    block_size: usize,
) -> Result<TokenizedInstance, EpisodeError> {
    let target = tok.encode(&ep.target);
    let budget = block_size.checked_sub(target.len()).ok_or(
        EpisodeError::UnsatisfiableBudget {
            needed: target.len(),
            block_size,
        },
    )?;
    let (dropped, mut tokens) = fit_demonstrations(tok, &ep.demonstrations, &ep.query, budget)
        .map_err(|e| match e {
            EpisodeError::UnsatisfiableBudget { needed, .. } => EpisodeError::UnsatisfiableBudget {
                needed: needed + target.len(),
                block_size,
            },
            e => e,
        })?;
    let mut mask = vec![false; tokens.len()];
    mask.resize(tokens.len() + target.len(), true);
    tokens.extend(target);
    Ok(TokenizedInstance {
        tokens,
        mask,
        dropped,
    })
}

/// An N-way K-shot evaluation episode. Every record's designated triple is
/// the one the episode is about.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotEpisode {
    pub n: usize,
    pub k: usize,
    pub support: Vec<RERecord>,
    pub queries: Vec<RERecord>,
    pub candidate_relations: Vec<RelationLabel>,
}

fn group_by_relation(records: &[RERecord]) -> BTreeMap<&str, Vec<&RERecord>> {
    let mut groups: BTreeMap<&str, Vec<&RERecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.relation().raw()).or_default().push(r);
    }
    groups
}

/// Default number of queries per episode.
pub fn default_queries(n: usize) -> usize {
    5 * n
}

/// Samples an N-way K-shot episode from the bundle's evaluation records.
pub fn sample_fewshot_episode(
    bundle: &DatasetBundle,
    n: usize,
    k: usize,
    q: usize,
    seed: u64,
) -> Result<FewShotEpisode, EpisodeError> {
    if n == 0 {
        return Err(EpisodeError::Config("N must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = group_by_relation(bundle.eval_records());
    let relations: Vec<&RelationLabel> = bundle
        .schema
        .iter()
        .filter(|l| groups.contains_key(l.raw()))
        .collect();
    if relations.len() < n {
        return Err(EpisodeError::TooFewRelations {
            requested: n,
            available: relations.len(),
        });
    }
    let mut chosen: Vec<&RelationLabel> = relations.choose_multiple(&mut rng, n).copied().collect();
    chosen.sort();
    let needed = k + q.div_ceil(n);
    let mut support = Vec::with_capacity(n * k);
    let mut rest = Vec::new();
    for label in &chosen {
        let group = &groups[label.raw()];
        if group.len() < needed {
            return Err(EpisodeError::InsufficientExamples {
                relation: label.raw().to_string(),
                available: group.len(),
                needed,
            });
        }
        let mut idx: Vec<usize> = (0..group.len()).collect();
        idx.shuffle(&mut rng);
        support.extend(idx[..k].iter().map(|&i| group[i].clone()));
        rest.extend(idx[k..].iter().map(|&i| group[i]));
    }
    support.shuffle(&mut rng);
    let queries = rest
        .choose_multiple(&mut rng, q.min(rest.len()))
        .map(|r| (*r).clone())
        .collect();
    Ok(FewShotEpisode {
        n,
        k,
        support,
        queries,
        candidate_relations: chosen.into_iter().cloned().collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotTask {
    pub m: usize,
    pub relations: Vec<RelationLabel>,
    pub eval_records: Vec<RERecord>,
    pub seed: u64,
}

/// Samples `repeats` zero-shot tasks with seeds `base_seed + i`.
pub fn sample_zeroshot_tasks(
    bundle: &DatasetBundle,
    m: usize,
    repeats: usize,
    base_seed: u64,
) -> Result<Vec<ZeroShotTask>, EpisodeError> {
    let schema: Vec<&RelationLabel> = bundle.schema.iter().collect();
    if m > schema.len() || m == 0 {
        return Err(EpisodeError::TooFewRelations {
            requested: m,
            available: schema.len(),
        });
    }
    (0..repeats as u64)
        .map(|i| {
            let seed = base_seed.wrapping_add(i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut relations: Vec<RelationLabel> =
                schema.choose_multiple(&mut rng, m).map(|l| (*l).clone()).collect();
            relations.sort();
            let chosen: BTreeSet<&str> = relations.iter().map(|l| l.raw()).collect();
            let eval_records = bundle
                .eval_records()
                .iter()
                .filter(|r| chosen.contains(r.relation().raw()))
                .cloned()
                .collect();
            Ok(ZeroShotTask {
                m,
                relations,
                eval_records,
                seed,
            })
        })
        .collect()
}
