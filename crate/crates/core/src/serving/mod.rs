//! Online categorization: precomputed category embeddings, a query-result
//! cache, retrieval-term emission and a newline-delimited JSON service.

mod cache;
mod server;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CacheKey, CacheStats, QueryCache, DEFAULT_CACHE_CAPACITY};
pub use server::{handle_line, request_stop, serve, ServerConfig, ServerHandle, BAD_REQUEST};

use crate::features::{normalize, FeatureConfig};
use crate::infer::{beam_search, hier_infer, BeamConfig, InferError, Prediction};
use crate::model::{CategoryEmbeddingTable, CheckpointError, DualEncoderModel, ModelError, QueryTower};
use crate::taxonomy::{CategoryPath, Taxonomy};

#[derive(Error, Debug)]
pub enum ServingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error("embedding table built for taxonomy {table:016x}, bundle taxonomy is {taxonomy:016x}")]
    StaleTable { table: u64, taxonomy: u64 },
    #[error("embedding table built for model {table}, bundle model is {model}")]
    StaleModel { table: String, model: String },
}

/// Retrieval boosts for depths 1, 2 and 3.
pub const DEFAULT_BOOSTS: [f64; 3] = [2.0, 1.5, 1.2];

/// Optional retrieval term `cat_l<depth>:<node_id>` with its boost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTerm {
    pub term: String,
    pub depth: usize,
    pub boost: f64,
}

/// One term per path node at depths 1 through `min(3, depth)`.
pub fn emit_retrieval_terms(path: &CategoryPath, boosts: &[f64; 3]) -> Vec<RetrievalTerm> {
    path.ids()
        .iter()
        .zip(boosts)
        .enumerate()
        .map(|(i, (id, &boost))| RetrievalTerm {
            term: format!("cat_l{}:{}", i + 1, id.0),
            depth: i + 1,
            boost,
        })
        .collect()
}

/// Everything needed to answer queries: the query tower, precomputed
/// category vectors, the taxonomy and beam settings. Immutable once built.
#[derive(Debug, Clone)]
pub struct ServingBundle {
    query: QueryTower,
    features: FeatureConfig,
    logit_scale: f64,
    table: CategoryEmbeddingTable,
    taxonomy: Taxonomy,
    beam: BeamConfig,
    boosts: [f64; 3],
    model_version: String,
}

impl ServingBundle {
    pub fn build(model: &DualEncoderModel, taxonomy: Taxonomy, beam: BeamConfig) -> Result<Self, ServingError> {
        model.check_taxonomy(&taxonomy)?;
        let table = model.category_table(&taxonomy);
        Self::from_parts(model, taxonomy, table, beam)
    }

    /// Assembles a bundle from a previously computed table, rejecting tables
    /// built for another taxonomy or model.
    pub fn from_parts(
        model: &DualEncoderModel,
        taxonomy: Taxonomy,
        table: CategoryEmbeddingTable,
        beam: BeamConfig,
    ) -> Result<Self, ServingError> {
        model.check_taxonomy(&taxonomy)?;
        if table.taxonomy_fingerprint != taxonomy.fingerprint() {
            return Err(ServingError::StaleTable {
                table: table.taxonomy_fingerprint,
                taxonomy: taxonomy.fingerprint(),
            });
        }
        let model_version = model.model_version();
        if table.model_version != model_version {
            return Err(ServingError::StaleModel {
                table: table.model_version,
                model: model_version,
            });
        }
        if beam.width == 0 {
            return Err(InferError::InvalidWidth.into());
        }
        Ok(ServingBundle {
            query: model.query.clone(),
            features: model.config.features.clone(),
            logit_scale: model.config.logit_scale,
            table,
            taxonomy,
            beam,
            boosts: DEFAULT_BOOSTS,
            model_version,
        })
    }

    pub fn load(checkpoint: impl AsRef<Path>, taxonomy: Taxonomy, beam: BeamConfig) -> Result<Self, ServingError> {
        let model = DualEncoderModel::load_checkpoint_file(checkpoint)?;
        Self::build(&model, taxonomy, beam)
    }

    pub fn with_boosts(mut self, boosts: [f64; 3]) -> Self {
        self.boosts = boosts;
        self
    }

    pub fn model_version(&self) -> &str {
        &self.model_version
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn beam(&self) -> &BeamConfig {
        &self.beam
    }

    pub fn boosts(&self) -> &[f64; 3] {
        &self.boosts
    }

    pub fn table(&self) -> &CategoryEmbeddingTable {
        &self.table
    }

    /// Uncached inference on already-normalized text.
    fn infer_normalized(&self, normalized: &str, width: usize) -> Vec<Prediction> {
        if width == 0 {
            return Vec::new();
        }
        let q = self.query.forward_normalized(normalized, &self.features);
        if q.degenerate {
            return Vec::new();
        }
        let raw = self.table.scores(&q.vector);
        let probs = hier_infer(&self.taxonomy, &raw, self.beam.alpha, self.logit_scale)
            .expect("bundle table matches taxonomy");
        let beam = BeamConfig {
            width,
            ..self.beam.clone()
        };
        beam_search(&self.taxonomy, &probs, &beam).expect("width is positive")
    }

    /// Bypasses the query cache.
    pub fn categorize_uncached(&self, query: &str) -> Vec<Prediction> {
        self.infer_normalized(&normalize(query), self.beam.width)
    }
}

/// Result of one categorize call.
#[derive(Debug, Clone)]
pub struct Categorized {
    pub predictions: Arc<Vec<Prediction>>,
    pub cache_hit: bool,
}

/// Cached categorization with an explicit beam width. Empty queries return
/// no predictions and are never cached.
pub fn categorize_top_k(bundle: &ServingBundle, cache: &QueryCache, query: &str, width: usize) -> Categorized {
    let normalized = normalize(query);
    if normalized.is_empty() {
        return Categorized {
            predictions: Arc::new(Vec::new()),
            cache_hit: false,
        };
    }
    let key = CacheKey {
        model_version: bundle.model_version.clone(),
        query: normalized,
        width,
    };
    if let Some(hit) = cache.get(&key) {
        return Categorized {
            predictions: hit,
            cache_hit: true,
        };
    }
    let predictions = Arc::new(bundle.infer_normalized(&key.query, width));
    cache.insert(key, Arc::clone(&predictions));
    Categorized {
        predictions,
        cache_hit: false,
    }
}

/// Cached categorization with the bundle's beam width.
pub fn categorize(bundle: &ServingBundle, cache: &QueryCache, query: &str) -> Arc<Vec<Prediction>> {
    categorize_top_k(bundle, cache, query, bundle.beam.width).predictions
}

/// Reference path: scores every node from scratch with the full model.
pub fn categorize_offline(
    model: &DualEncoderModel,
    taxonomy: &Taxonomy,
    beam: &BeamConfig,
    query: &str,
) -> Result<Vec<Prediction>, ServingError> {
    model.check_taxonomy(taxonomy)?;
    if model.encode_query(query).degenerate {
        return Ok(Vec::new());
    }
    let raw = model.score_all(taxonomy, query);
    let probs = hier_infer(taxonomy, &raw, beam.alpha, model.config.logit_scale)?;
    Ok(beam_search(taxonomy, &probs, beam)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::taxonomy::NodeId;

    fn tax() -> Taxonomy {
        Taxonomy::from_tsv(
            "1\t\tElectronics\n2\t1\tCell Phones\n3\t2\tAccessories\n4\t3\tCases\n5\t\tHome\n6\t5\tSofa\n",
        )
        .unwrap()
    }

    fn model(t: &Taxonomy) -> DualEncoderModel {
        let mut c = ModelConfig::default();
        c.dim = 16;
        c.features.trigram_buckets = 5000;
        c.features.word_buckets = 1000;
        DualEncoderModel::new(c, t)
    }

    #[test]
    fn terms_stop_at_depth_three() {
        let t = tax();
        let cases = t.parse_path("Electronics//Cell Phones//Accessories//Cases").unwrap();
        let terms = emit_retrieval_terms(&cases, &DEFAULT_BOOSTS);
        let names: Vec<&str> = terms.iter().map(|t| t.term.as_str()).collect();
        assert_eq!(names, ["cat_l1:1", "cat_l2:2", "cat_l3:3"]);
        let one = emit_retrieval_terms(&t.path_to(NodeId(5)).unwrap(), &[1.0, 0.5, 0.25]);
        assert_eq!(one.len(), 1);
        let w: Vec<f64> = emit_retrieval_terms(&cases, &[1.0, 0.5, 0.25]).iter().map(|t| t.boost).collect();
        assert_eq!(w, [1.0, 0.5, 0.25]);
    }

    #[test]
    fn cache_hit_returns_stored_value() {
        let t = tax();
        let m = model(&t);
        let b = ServingBundle::build(&m, t.clone(), BeamConfig::with_width(3)).unwrap();
        let cache = QueryCache::new(8);
        let first = categorize_top_k(&b, &cache, "Phone  Case", 3);
        let second = categorize_top_k(&b, &cache, "phone case", 3);
        assert!(!first.cache_hit && second.cache_hit);
        assert!(Arc::ptr_eq(&first.predictions, &second.predictions));
        assert_eq!(cache.stats().hits, 1);
        assert_eq!(*first.predictions, b.categorize_uncached("phone case"));
    }

    #[test]
    fn empty_query_not_cached() {
        let t = tax();
        let b = ServingBundle::build(&model(&t), t.clone(), BeamConfig::default()).unwrap();
        let cache = QueryCache::new(8);
        assert!(categorize(&b, &cache, "   ").is_empty());
        assert_eq!(cache.stats().len, 0);
    }

    #[test]
    fn matches_offline_path() {
        let t = tax();
        let m = model(&t);
        let beam = BeamConfig::with_width(4);
        let b = ServingBundle::build(&m, t.clone(), beam.clone()).unwrap();
        let cache = QueryCache::default();
        for q in ["sofa", "iphone cases", "x", "cell phone accessories"] {
            assert_eq!(*categorize(&b, &cache, q), categorize_offline(&m, &t, &beam, q).unwrap());
        }
    }

    #[test]
    fn stale_inputs_rejected() {
        let t = tax();
        let m = model(&t);
        let tampered = Taxonomy::from_tsv("1\t\tElectronics\n").unwrap();
        assert!(matches!(
            ServingBundle::build(&m, tampered.clone(), BeamConfig::default()),
            Err(ServingError::Model(ModelError::FingerprintMismatch { .. }))
        ));
        let mut other = m.clone();
        other.query.fusion.attn[0] += 1.0;
        let table = other.category_table(&t);
        let mut m2 = m.clone();
        m2.category.table.set(0, 0, 0.5);
        assert!(matches!(
            ServingBundle::from_parts(&m2, t.clone(), table, BeamConfig::default()),
            Err(ServingError::StaleModel { .. })
        ));
        let mut stale = m.category_table(&t);
        stale.taxonomy_fingerprint ^= 1;
        assert!(matches!(
            ServingBundle::from_parts(&m, t, stale, BeamConfig::default()),
            Err(ServingError::StaleTable { .. })
        ));
    }

    #[test]
    fn table_has_one_row_per_node() {
        let t = tax();
        let b = ServingBundle::build(&model(&t), t.clone(), BeamConfig::default()).unwrap();
        assert_eq!(b.table().len(), t.len());
    }
}
