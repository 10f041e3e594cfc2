//! Dual-encoder scorer.
//!
//! The query tower mean-pools two embedding-bag channels (character trigrams
//! and words) and merges them with a single learned attention vector: each
//! channel is scored by `dot(attn, channel)`, the two scores are softmaxed, and
//! the output is the weighted sum. The category tower is one trigram
//! embedding bag over the full path text of a node. Both towers emit
//! L2-normalized vectors, so a dot product between them is a cosine.

mod checkpoint;
mod table;

pub use checkpoint::{CheckpointError, CHECKPOINT_MAGIC};
pub use table::EmbeddingTable;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{normalize, trigram_features, word_features, FeatureConfig};
use crate::hash::{splitmix64, Fnv1a};
use crate::infer::ScoreMap;
use crate::taxonomy::{NodeId, Taxonomy};

/// Norms below this are treated as a zero vector.
const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("taxonomy fingerprint {found:016x} does not match model ({expected:016x})")]
    FingerprintMismatch { expected: u64, found: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub features: FeatureConfig,
    /// Multiplier on cosine logits inside softmaxes. Stored scores stay raw.
    pub logit_scale: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 128,
            features: FeatureConfig::default(),
            logit_scale: 16.0,
            init_seed: 0,
        }
    }
}

/// Learned softmax weighting over the two query channels.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionFusion {
    pub attn: Vec<f32>,
}

impl AttentionFusion {
    /// Softmax weights for the trigram and word channels.
    pub fn weights(&self, trigram: &[f64], word: &[f64]) -> [f64; 2] {
        let s_t = dot_f32(&self.attn, trigram);
        let s_w = dot_f32(&self.attn, word);
        let m = s_t.max(s_w);
        let (e_t, e_w) = ((s_t - m).exp(), (s_w - m).exp());
        let z = e_t + e_w;
        [e_t / z, e_w / z]
    }

    pub fn fuse(&self, trigram: &[f64], word: &[f64]) -> (Vec<f64>, [f64; 2]) {
        let w = self.weights(trigram, word);
        let out = trigram
            .iter()
            .zip(word)
            .map(|(t, v)| w[0] * t + w[1] * v)
            .collect();
        (out, w)
    }
}

/// Query side of the model; the only part needed at serving time.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTower {
    pub trigram: EmbeddingTable,
    pub word: EmbeddingTable,
    pub fusion: AttentionFusion,
}

/// Output of the query tower with the intermediates needed for backprop.
#[derive(Debug, Clone)]
pub struct QueryForward {
    pub trigram_ids: Vec<u32>,
    pub word_ids: Vec<u32>,
    pub trigram_mean: Vec<f64>,
    pub word_mean: Vec<f64>,
    pub channel_weights: [f64; 2],
    /// Fused vector before normalization.
    pub fused: Vec<f64>,
    pub norm: f64,
    /// Unit vector, or zeros when degenerate.
    pub vector: Vec<f64>,
    pub degenerate: bool,
}

/// A query embedding. Degenerate encodings (empty query) are the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding {
    pub vector: Vec<f64>,
    pub degenerate: bool,
    pub channel_weights: [f64; 2],
}

impl QueryTower {
    /// Forward pass over already-normalized text.
    pub fn forward_normalized(&self, text: &str, features: &FeatureConfig) -> QueryForward {
        let trigram_ids = trigram_features(text, features).ids;
        let word_ids = word_features(text, features).ids;
        let trigram_mean = self.trigram.mean_pool(&trigram_ids);
        let word_mean = self.word.mean_pool(&word_ids);
        let (fused, channel_weights) = self.fusion.fuse(&trigram_mean, &word_mean);
        let norm = l2_norm(&fused);
        let degenerate = norm < DEGENERATE_NORM;
        let vector = if degenerate {
            vec![0.0; fused.len()]
        } else {
            fused.iter().map(|x| x / norm).collect()
        };
        QueryForward {
            trigram_ids,
            word_ids,
            trigram_mean,
            word_mean,
            channel_weights,
            fused,
            norm,
            vector,
            degenerate,
        }
    }

    pub fn encode(&self, query_text: &str, features: &FeatureConfig) -> QueryEmbedding {
        let f = self.forward_normalized(&normalize(query_text), features);
        QueryEmbedding {
            vector: f.vector,
            degenerate: f.degenerate,
            channel_weights: f.channel_weights,
        }
    }
}

/// Category side: one trigram embedding bag.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryTower {
    pub table: EmbeddingTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderModel {
    pub config: ModelConfig,
    pub query: QueryTower,
    pub category: CategoryTower,
    pub taxonomy_fingerprint: u64,
}

/// Normalized full-path text of a node, e.g. `home//furniture//sofa`.
pub fn category_text(taxonomy: &Taxonomy, idx: usize) -> String {
    normalize(&taxonomy.render(&taxonomy.path_of_index(idx)))
}

/// Trigram feature ids of every node's category text, by dense index.
pub fn category_feature_ids(taxonomy: &Taxonomy, features: &FeatureConfig) -> Vec<Vec<u32>> {
    (0..taxonomy.len())
        .map(|i| trigram_features(&category_text(taxonomy, i), features).ids)
        .collect()
}

impl DualEncoderModel {
    /// Fresh model bound to `taxonomy`, parameters uniform in ±1/sqrt(dim).
    pub fn new(config: ModelConfig, taxonomy: &Taxonomy) -> Self {
        let seed = |tag: u64| splitmix64(config.init_seed ^ splitmix64(tag));
        let dim = config.dim;
        let attn_table = EmbeddingTable::new(1, dim, seed(3));
        let attn = (0..dim).map(|c| attn_table.init_value(0, c)).collect();
        DualEncoderModel {
            query: QueryTower {
                trigram: EmbeddingTable::new(config.features.trigram_buckets, dim, seed(1)),
                word: EmbeddingTable::new(config.features.word_buckets, dim, seed(2)),
                fusion: AttentionFusion { attn },
            },
            category: CategoryTower {
                table: EmbeddingTable::new(config.features.trigram_buckets, dim, seed(4)),
            },
            taxonomy_fingerprint: taxonomy.fingerprint(),
            config,
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn check_taxonomy(&self, taxonomy: &Taxonomy) -> Result<(), ModelError> {
        if taxonomy.fingerprint() != self.taxonomy_fingerprint {
            return Err(ModelError::FingerprintMismatch {
                expected: self.taxonomy_fingerprint,
                found: taxonomy.fingerprint(),
            });
        }
        Ok(())
    }

    pub fn encode_query(&self, query_text: &str) -> QueryEmbedding {
        self.query.encode(query_text, &self.config.features)
    }

    /// Unit vector for a category given its trigram ids.
    pub fn encode_category_ids(&self, ids: &[u32]) -> Vec<f64> {
        let mut v = self.category.table.mean_pool(ids);
        let n = l2_norm(&v);
        if n >= DEGENERATE_NORM {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }

    pub fn encode_category(&self, taxonomy: &Taxonomy, node: NodeId) -> Result<Vec<f64>, ModelError> {
        let idx = taxonomy.index_of(node).ok_or(ModelError::UnknownNode(node))?;
        let ids = trigram_features(&category_text(taxonomy, idx), &self.config.features).ids;
        Ok(self.encode_category_ids(&ids))
    }

    /// Precomputes the unit embedding of every taxonomy node.
    pub fn category_table(&self, taxonomy: &Taxonomy) -> CategoryEmbeddingTable {
        let dim = self.dim();
        let mut vectors = Vec::with_capacity(taxonomy.len() * dim);
        for ids in category_feature_ids(taxonomy, &self.config.features) {
            vectors.extend(self.encode_category_ids(&ids));
        }
        CategoryEmbeddingTable {
            dim,
            vectors,
            model_version: self.model_version(),
            taxonomy_fingerprint: taxonomy.fingerprint(),
        }
    }

    /// Raw cosine between the query and every node, uncached.
    pub fn score_all(&self, taxonomy: &Taxonomy, query_text: &str) -> ScoreMap {
        let q = self.encode_query(query_text);
        let values = category_feature_ids(taxonomy, &self.config.features)
            .iter()
            .map(|ids| dot(&q.vector, &self.encode_category_ids(ids)))
            .collect();
        ScoreMap::raw(values)
    }

    /// Content hash of all parameters and configuration, hex-encoded.
    pub fn model_version(&self) -> String {
        let mut h = Fnv1a::new(0);
        h.write(&checkpoint::to_bytes(self));
        format!("{:016x}", h.finish())
    }
}

/// Unit category vectors for every node, row-major by dense node index.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryEmbeddingTable {
    pub dim: usize,
    pub vectors: Vec<f64>,
    pub model_version: String,
    pub taxonomy_fingerprint: u64,
}

impl CategoryEmbeddingTable {
    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        &self.vectors[idx * self.dim..(idx + 1) * self.dim]
    }

    /// Cosine of a unit query vector against every row.
    pub fn scores(&self, query: &[f64]) -> ScoreMap {
        ScoreMap::raw(
            self.vectors
                .chunks_exact(self.dim)
                .map(|row| dot(query, row))
                .collect(),
        )
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dot_f32(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
