//! Seeded synthetic taxonomies and engagement logs.
//!
//! Every synthetic query has a true intent node. Each engagement event
//! reports that node, or with probability `p_browse` a nearby node the user
//! wandered to (a node in a sibling's subtree, an ancestor, or anything at
//! all). Labels from the `model` source may additionally be cut short by one
//! or two levels, which skews the mined label depths shallower than the truth.

use std::collections::HashSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EngagementRecord, LabelSource};
use crate::hash::{fnv1a64, splitmix64};
use crate::taxonomy::{CategoryPath, NodeSpec, Taxonomy, MAX_DEPTH};

const BASE_TIMESTAMP: i64 = 1_650_000_000;
const LOG_WINDOW_SECS: i64 = 14 * 24 * 3600;
const PRODUCTS_PER_NODE: u64 = 8;

/// Common query and title modifiers that carry no category signal.
const MODIFIERS: &[&str] = &[
    "used", "new", "cheap", "black", "white", "red", "blue", "large", "small", "vintage", "free",
    "sale", "best", "mini", "pro", "kids", "set", "lot", "2019", "2020", "brand", "near", "me",
    "for", "with", "old", "good", "great", "like", "original",
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrowseKindWeights {
    pub sibling: f64,
    pub ancestor: f64,
    pub uniform_random: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub p_browse: f64,
    pub browse_kind_weights: BrowseKindWeights,
    pub truncation_prob: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            p_browse: 0.3,
            browse_kind_weights: BrowseKindWeights {
                sibling: 0.5,
                ancestor: 0.5,
                uniform_random: 0.0,
            },
            truncation_prob: 0.3,
        }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        NoiseModel {
            p_browse: 0.0,
            truncation_prob: 0.0,
            ..NoiseModel::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(SynthError::InvalidNoise(format!("{name} = {p} outside [0, 1]")))
            }
        };
        prob("p_browse", self.p_browse)?;
        prob("truncation_prob", self.truncation_prob)?;
        let w = &self.browse_kind_weights;
        let ws = [w.sibling, w.ancestor, w.uniform_random];
        if ws.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(SynthError::InvalidNoise("browse weights must be non-negative".into()));
        }
        if (ws.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SynthError::InvalidNoise("browse weights must sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_queries: usize,
    pub events_per_query: usize,
    pub noise: NoiseModel,
    /// Relative frequency of seller / model / both label sources.
    pub label_source_weights: [f64; 3],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_queries: 5_000,
            events_per_query: 20,
            noise: NoiseModel::default(),
            label_source_weights: [0.3, 0.5, 0.2],
            seed: 0,
        }
    }
}

/// Generated log plus what a perfect labeler would have said.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLog {
    pub records: Vec<EngagementRecord>,
    /// True intent path of each query, in generation order.
    pub ground_truth: Vec<(String, CategoryPath)>,
}

impl SyntheticLog {
    /// `(query, product title)` for every record, in record order.
    pub fn product_pairs(&self, taxonomy: &Taxonomy, seed: u64) -> Vec<(String, String)> {
        self.records
            .iter()
            .map(|r| (r.query.clone(), product_title(taxonomy, &r.product_id, seed)))
            .collect()
    }
}

/// Shape of a generated taxonomy: number of root nodes and, for each deeper
/// level, the inclusive range of children per parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyShape {
    pub roots: usize,
    pub branching: Vec<(usize, usize)>,
}

impl TaxonomyShape {
    /// Roughly six thousand nodes over six levels.
    pub fn large() -> Self {
        TaxonomyShape {
            roots: 10,
            branching: vec![(4, 6), (3, 5), (2, 4), (2, 4), (1, 3)],
        }
    }
}

fn pseudo_word(rng: &mut impl Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*CONSONANTS.choose(rng).unwrap() as char);
        w.push(*VOWELS.choose(rng).unwrap() as char);
    }
    w
}

/// Random tree with globally unique pseudo-word names. Ids are assigned in
/// breadth-first order starting at 1.
pub fn synthetic_taxonomy(shape: &TaxonomyShape, seed: u64) -> Result<Taxonomy, SynthError> {
    if shape.roots == 0 || shape.branching.len() + 1 > MAX_DEPTH {
        return Err(SynthError::InvalidConfig(format!(
            "need at least one root and at most {MAX_DEPTH} levels"
        )));
    }
    if shape.branching.iter().any(|&(lo, hi)| lo > hi) {
        return Err(SynthError::InvalidConfig("branching range lo > hi".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used: HashSet<String> = MODIFIERS.iter().map(|s| s.to_string()).collect();
    let mut fresh_name = |rng: &mut ChaCha8Rng| loop {
        let w = pseudo_word(rng);
        if used.insert(w.clone()) {
            return w;
        }
    };
    let mut specs = Vec::new();
    let mut frontier = Vec::new();
    for _ in 0..shape.roots {
        let id = specs.len() as u32 + 1;
        specs.push(NodeSpec {
            id,
            parent: None,
            name: fresh_name(&mut rng),
            line: id as usize,
        });
        frontier.push(id);
    }
    for &(lo, hi) in &shape.branching {
        let mut next = Vec::new();
        for &parent in &frontier {
            for _ in 0..rng.gen_range(lo..=hi) {
                let id = specs.len() as u32 + 1;
                specs.push(NodeSpec {
                    id,
                    parent: Some(parent),
                    name: fresh_name(&mut rng),
                    line: id as usize,
                });
                next.push(id);
            }
        }
        frontier = next;
    }
    Taxonomy::from_specs(specs).map_err(|e| SynthError::InvalidConfig(e.to_string()))
}

/// Deterministic title of a synthetic product: the names of its category's
/// last two levels plus a modifier. Product ids look like `p<node_id>-<k>`.
pub fn product_title(taxonomy: &Taxonomy, product_id: &str, seed: u64) -> String {
    let node = product_id
        .strip_prefix('p')
        .and_then(|s| s.split('-').next())
        .and_then(|s| s.parse::<u32>().ok())
        .and_then(|id| taxonomy.index_of(crate::taxonomy::NodeId(id)));
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a64(0, product_id.as_bytes())));
    let mut tokens: Vec<String> = Vec::new();
    if let Some(idx) = node {
        let path = taxonomy.path_of_index(idx);
        for id in path.ids().iter().rev().take(2) {
            tokens.push(taxonomy.get(*id).unwrap().name.to_lowercase());
        }
    }
    tokens.push(MODIFIERS.choose(&mut rng).unwrap().to_string());
    tokens.shuffle(&mut rng);
    tokens.join(" ")
}

struct Generator<'a> {
    taxonomy: &'a Taxonomy,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn sample_intent(&mut self, depth_dist: &WeightedIndex<f64>) -> usize {
        let depth = depth_dist.sample(&mut self.rng) + 1;
        *self.taxonomy.level(depth).choose(&mut self.rng).unwrap()
    }

    fn siblings(&self, idx: usize) -> Vec<usize> {
        let pool = match self.taxonomy.parent_index(idx) {
            Some(p) => self.taxonomy.children_indices(p),
            None => self.taxonomy.roots(),
        };
        pool.iter().copied().filter(|&s| s != idx).collect()
    }

    fn ancestor(&mut self, idx: usize) -> usize {
        let mut ancestors = Vec::new();
        let mut cur = self.taxonomy.parent_index(idx);
        while let Some(a) = cur {
            ancestors.push(a);
            cur = self.taxonomy.parent_index(a);
        }
        ancestors.choose(&mut self.rng).copied().unwrap_or(idx)
    }

    /// A node in a sibling's subtree: the sibling itself, or one level below it.
    fn sibling_subtree(&mut self, idx: usize) -> usize {
        let sibs = self.siblings(idx);
        match sibs.choose(&mut self.rng).copied() {
            None => self.ancestor(idx),
            Some(s) => {
                let kids = self.taxonomy.children_indices(s);
                if !kids.is_empty() && self.rng.gen_bool(0.5) {
                    *kids.choose(&mut self.rng).unwrap()
                } else {
                    s
                }
            }
        }
    }

    fn query_text(&mut self, intent: usize) -> String {
        let tax = self.taxonomy;
        let mut tokens = vec![tax.node(intent).name.to_lowercase()];
        let mut cur = tax.parent_index(intent);
        while let Some(a) = cur {
            if self.rng.gen_bool(0.3) {
                tokens.push(tax.node(a).name.to_lowercase());
            }
            cur = tax.parent_index(a);
        }
        for _ in 0..self.rng.gen_range(0..=2) {
            tokens.push(MODIFIERS.choose(&mut self.rng).unwrap().to_string());
        }
        tokens.shuffle(&mut self.rng);
        tokens.join(" ")
    }
}

/// Seeded engagement log over `taxonomy`. Identical inputs give identical output.
pub fn generate_synthetic_log(taxonomy: &Taxonomy, config: &SynthConfig) -> Result<SyntheticLog, SynthError> {
    config.noise.validate()?;
    if config.label_source_weights.iter().any(|w| w.is_nan() || *w < 0.0) || config.label_source_weights.iter().sum::<f64>() <= 0.0 {
        return Err(SynthError::InvalidConfig("label source weights".into()));
    }
    let mut g = Generator {
        taxonomy,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let max_depth = taxonomy.max_depth();
    // Favor the middle of the tree: weight d * (D + 1 - d).
    let depth_weights: Vec<f64> = (1..=max_depth)
        .map(|d| (d * (max_depth + 1 - d)) as f64)
        .collect();
    let depth_dist = WeightedIndex::new(&depth_weights).expect("positive weights");
    let w = &config.noise.browse_kind_weights;
    let kind_dist = WeightedIndex::new([w.sibling, w.ancestor, w.uniform_random]).ok();
    let source_dist = WeightedIndex::new(config.label_source_weights).expect("validated");

    let mut seen = HashSet::new();
    let mut ground_truth = Vec::with_capacity(config.n_queries);
    let mut records = Vec::with_capacity(config.n_queries * config.events_per_query);
    for qi in 0..config.n_queries {
        let intent = g.sample_intent(&depth_dist);
        let mut query = g.query_text(intent);
        let mut attempts = 0;
        while !seen.insert(query.clone()) {
            attempts += 1;
            query = if attempts < 20 {
                g.query_text(intent)
            } else {
                format!("{} {qi}", g.query_text(intent))
            };
        }
        let truth = taxonomy.path_of_index(intent);
        for _ in 0..config.events_per_query {
            let engaged = if g.rng.gen_bool(config.noise.p_browse) {
                match kind_dist.as_ref().map(|d| d.sample(&mut g.rng)) {
                    Some(0) => g.sibling_subtree(intent),
                    Some(1) => g.ancestor(intent),
                    _ => g.rng.gen_range(0..taxonomy.len()),
                }
            } else {
                intent
            };
            let label_source = [LabelSource::Seller, LabelSource::Model, LabelSource::Both]
                [source_dist.sample(&mut g.rng)];
            let mut label = taxonomy.path_of_index(engaged);
            if label_source == LabelSource::Model && g.rng.gen_bool(config.noise.truncation_prob) {
                let cut = g.rng.gen_range(1..=2);
                let depth = label.depth().saturating_sub(cut).max(1);
                label = label.truncate(depth).unwrap();
            }
            let product = g.rng.gen_range(0..PRODUCTS_PER_NODE);
            records.push(EngagementRecord {
                query: query.clone(),
                product_id: format!("p{}-{product}", taxonomy.node(engaged).id),
                category_path: taxonomy.render(&label),
                label_source,
                timestamp: BASE_TIMESTAMP + g.rng.gen_range(0..LOG_WINDOW_SECS),
            });
        }
        ground_truth.push((query, truth));
    }
    Ok(SyntheticLog {
        records,
        ground_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weak::write_log;

    fn small_tax() -> Taxonomy {
        synthetic_taxonomy(
            &TaxonomyShape {
                roots: 4,
                branching: vec![(2, 3), (2, 3), (1, 2)],
            },
            1,
        )
        .unwrap()
    }

    fn cfg(noise: NoiseModel) -> SynthConfig {
        SynthConfig {
            n_queries: 60,
            events_per_query: 5,
            noise,
            seed: 9,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn taxonomy_is_valid_and_deterministic() {
        let a = small_tax();
        assert_eq!(a.max_depth(), 4);
        assert_eq!(a.to_tsv(), small_tax().to_tsv());
        let large = synthetic_taxonomy(&TaxonomyShape::large(), 0).unwrap();
        assert!((4_000..9_000).contains(&large.len()), "{}", large.len());
        assert_eq!(large.max_depth(), 6);
    }

    #[test]
    fn noiseless_log_matches_truth() {
        let t = small_tax();
        let log = generate_synthetic_log(&t, &cfg(NoiseModel::noiseless())).unwrap();
        assert_eq!(log.records.len(), 300);
        for (i, r) in log.records.iter().enumerate() {
            let (q, truth) = &log.ground_truth[i / 5];
            assert_eq!(&r.query, q);
            assert_eq!(t.parse_path(&r.category_path).unwrap(), *truth);
        }
    }

    #[test]
    fn ancestor_only_browsing_gives_ancestors() {
        let t = small_tax();
        let noise = NoiseModel {
            p_browse: 1.0,
            browse_kind_weights: BrowseKindWeights {
                sibling: 0.0,
                ancestor: 1.0,
                uniform_random: 0.0,
            },
            truncation_prob: 0.0,
        };
        let log = generate_synthetic_log(&t, &cfg(noise)).unwrap();
        for (i, r) in log.records.iter().enumerate() {
            let truth = &log.ground_truth[i / 5].1;
            let got = t.parse_path(&r.category_path).unwrap();
            if truth.depth() == 1 {
                assert_eq!(got.depth(), 1);
            } else {
                assert!(got.depth() < truth.depth());
                assert_eq!(truth.truncate(got.depth()).unwrap(), got);
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let t = small_tax();
        let bytes = |c: &SynthConfig| {
            let mut buf = Vec::new();
            write_log(&generate_synthetic_log(&t, c).unwrap().records, &mut buf).unwrap();
            buf
        };
        let c = cfg(NoiseModel::default());
        assert_eq!(bytes(&c), bytes(&c));
        let other = SynthConfig { seed: 10, ..c.clone() };
        assert_ne!(bytes(&c), bytes(&other));
    }

    #[test]
    fn queries_are_unique() {
        let t = small_tax();
        let log = generate_synthetic_log(&t, &SynthConfig { n_queries: 400, ..cfg(NoiseModel::default()) }).unwrap();
        let set: HashSet<_> = log.ground_truth.iter().map(|(q, _)| q).collect();
        assert_eq!(set.len(), 400);
    }

    #[test]
    fn truncation_shifts_label_depths() {
        let t = small_tax();
        let noise = NoiseModel {
            p_browse: 0.0,
            truncation_prob: 0.5,
            ..NoiseModel::default()
        };
        let log = generate_synthetic_log(&t, &cfg(noise)).unwrap();
        let label_mean: f64 = log
            .records
            .iter()
            .map(|r| t.parse_path(&r.category_path).unwrap().depth() as f64)
            .sum::<f64>()
            / log.records.len() as f64;
        let truth_mean: f64 = log
            .records
            .iter()
            .enumerate()
            .map(|(i, _)| log.ground_truth[i / 5].1.depth() as f64)
            .sum::<f64>()
            / log.records.len() as f64;
        assert!(label_mean < truth_mean);
    }

    #[test]
    fn invalid_noise_rejected() {
        let mut n = NoiseModel::default();
        n.p_browse = 1.5;
        assert!(n.validate().is_err());
        let mut n = NoiseModel::default();
        n.browse_kind_weights.sibling = 0.9;
        assert!(n.validate().is_err());
    }

    #[test]
    fn product_titles_are_stable() {
        let t = small_tax();
        let id = format!("p{}-3", t.node(t.len() - 1).id);
        let a = product_title(&t, &id, 4);
        assert_eq!(a, product_title(&t, &id, 4));
        assert!(a.split(' ').count() >= 2);
    }
}
