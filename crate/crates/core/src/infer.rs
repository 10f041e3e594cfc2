//! Hierarchical inference and beam search over a taxonomy.
//!
//! `hier_infer` walks the taxonomy from the deepest level to the root level.
//! At each depth every node's logit becomes `alpha * scale * cosine` plus the
//! already-normalized probability mass of its children, and the logits of all
//! nodes at that depth are softmaxed together. With `alpha = 1, scale = 1`
//! this is the plain up-propagate-then-normalize recurrence.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::DualEncoderModel;
use crate::taxonomy::{CategoryPath, NodeId, Taxonomy};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum InferError {
    #[error("score map has {found} entries, taxonomy has {expected} nodes")]
    MissingEntries { expected: usize, found: usize },
    #[error("score map is in phase {found:?}, expected {expected:?}")]
    WrongPhase { expected: Phase, found: Phase },
    #[error("beam width must be at least 1")]
    InvalidWidth,
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("percentile {0} outside [0, 100]")]
    InvalidPercentile(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    RawCosine,
    Normalized,
}

/// Per-node scalar field, indexed by the taxonomy's dense node index.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    values: Vec<f64>,
    phase: Phase,
}

impl ScoreMap {
    pub fn raw(values: Vec<f64>) -> Self {
        ScoreMap {
            values,
            phase: Phase::RawCosine,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, taxonomy: &Taxonomy, id: NodeId) -> Option<f64> {
        taxonomy.index_of(id).and_then(|i| self.values.get(i).copied())
    }

    fn expect(&self, taxonomy: &Taxonomy, phase: Phase) -> Result<(), InferError> {
        if self.phase != phase {
            return Err(InferError::WrongPhase {
                expected: phase,
                found: self.phase,
            });
        }
        if self.values.len() != taxonomy.len() {
            return Err(InferError::MissingEntries {
                expected: taxonomy.len(),
                found: self.values.len(),
            });
        }
        Ok(())
    }
}

/// Numerically stable softmax in place.
pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in xs.iter_mut() {
        *x /= z;
    }
}

/// Up-propagates child mass and softmaxes each level, deepest first.
pub fn hier_infer(
    taxonomy: &Taxonomy,
    raw: &ScoreMap,
    alpha: f64,
    logit_scale: f64,
) -> Result<ScoreMap, InferError> {
    raw.expect(taxonomy, Phase::RawCosine)?;
    let mut p = vec![0.0; taxonomy.len()];
    let mut logits = Vec::new();
    for depth in (1..=taxonomy.max_depth()).rev() {
        let level = taxonomy.level(depth);
        logits.clear();
        logits.extend(level.iter().map(|&n| {
            let child_mass: f64 = taxonomy.children_indices(n).iter().map(|&c| p[c]).sum();
            alpha * logit_scale * raw.values[n] + child_mass
        }));
        softmax_in_place(&mut logits);
        for (&n, &v) in level.iter().zip(&logits) {
            p[n] = v;
        }
    }
    Ok(ScoreMap {
        values: p,
        phase: Phase::Normalized,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    /// Minimum child probability per 1-based depth, indexed `depth - 1`.
    /// Missing entries mean no threshold. Depth 1 is never thresholded.
    pub thresholds: Vec<f64>,
    pub alpha: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            width: 1,
            thresholds: Vec::new(),
            alpha: 1.0,
        }
    }
}

impl BeamConfig {
    pub fn with_width(width: usize) -> Self {
        BeamConfig {
            width,
            ..BeamConfig::default()
        }
    }

    pub fn threshold(&self, depth: usize) -> f64 {
        self.thresholds
            .get(depth - 1)
            .copied()
            .unwrap_or(f64::NEG_INFINITY)
    }

    /// Same config with every threshold disabled.
    pub fn without_thresholds(&self) -> Self {
        BeamConfig {
            thresholds: Vec::new(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub path: CategoryPath,
    pub per_level_probs: Vec<f64>,
    pub path_score: f64,
}

#[derive(Debug, Clone)]
struct Partial {
    nodes: Vec<usize>,
    probs: Vec<f64>,
    score: f64,
}

/// Higher score first; ties by ascending node sequence.
fn rank(a: &Partial, b: &Partial) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.nodes.cmp(&b.nodes))
}

/// Level-by-level beam search over normalized probabilities.
///
/// A partial path is finalized when none of its children reaches the
/// threshold of the child depth (leaves finalize immediately). Returns at most
/// `width` finalized paths ranked by the product of their level probabilities.
pub fn beam_search(
    taxonomy: &Taxonomy,
    normalized: &ScoreMap,
    config: &BeamConfig,
) -> Result<Vec<Prediction>, InferError> {
    normalized.expect(taxonomy, Phase::Normalized)?;
    if config.width == 0 {
        return Err(InferError::InvalidWidth);
    }
    let p = &normalized.values;
    let mut active: Vec<Partial> = taxonomy
        .roots()
        .iter()
        .map(|&r| Partial {
            nodes: vec![r],
            probs: vec![p[r]],
            score: p[r],
        })
        .collect();
    active.sort_by(rank);
    active.truncate(config.width);

    let mut finalized = Vec::new();
    while !active.is_empty() {
        let mut candidates = Vec::new();
        for path in active {
            let last = *path.nodes.last().unwrap();
            let threshold = config.threshold(path.nodes.len() + 1);
            let mut extended = false;
            for &c in taxonomy.children_indices(last) {
                if p[c] < threshold {
                    continue;
                }
                extended = true;
                let mut next = path.clone();
                next.nodes.push(c);
                next.probs.push(p[c]);
                next.score *= p[c];
                candidates.push(next);
            }
            if !extended {
                finalized.push(path);
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(config.width);
        active = candidates;
    }
    finalized.sort_by(rank);
    finalized.truncate(config.width);
    Ok(finalized
        .into_iter()
        .map(|part| Prediction {
            path: CategoryPath::from_ids_unchecked(
                part.nodes.iter().map(|&i| taxonomy.node(i).id).collect(),
            ),
            per_level_probs: part.probs,
            path_score: part.score,
        })
        .collect())
}

/// Flat baseline: the `k` highest-scoring nodes anywhere in the tree, each
/// expanded to its root path. Level probabilities come from one softmax over
/// all nodes of the scaled raw scores.
pub fn flat_top_k(
    taxonomy: &Taxonomy,
    raw: &ScoreMap,
    k: usize,
    logit_scale: f64,
) -> Result<Vec<Prediction>, InferError> {
    raw.expect(taxonomy, Phase::RawCosine)?;
    let mut probs: Vec<f64> = raw.values.iter().map(|v| v * logit_scale).collect();
    softmax_in_place(&mut probs);
    let mut order: Vec<usize> = (0..taxonomy.len()).collect();
    order.sort_by(|&a, &b| raw.values[b].total_cmp(&raw.values[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| {
            let path = taxonomy.path_of_index(i);
            let per_level_probs: Vec<f64> = path
                .ids()
                .iter()
                .map(|id| probs[taxonomy.index_of(*id).unwrap()])
                .collect();
            Prediction {
                path,
                per_level_probs,
                path_score: probs[i],
            }
        })
        .collect())
}

/// Linear-interpolated percentile (`pct` in [0, 100]) of a non-empty sample.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Per-depth thresholds from already-normalized score maps: at each depth,
/// the given percentile of the probability of the node chosen by a width-1,
/// unthresholded beam. Depths never reached get no threshold.
pub fn calibrate_from_maps<'a>(
    taxonomy: &Taxonomy,
    maps: impl IntoIterator<Item = &'a ScoreMap>,
    pct: f64,
) -> Result<Vec<f64>, InferError> {
    if !(0.0..=100.0).contains(&pct) {
        return Err(InferError::InvalidPercentile(pct));
    }
    let mut per_depth: Vec<Vec<f64>> = vec![Vec::new(); taxonomy.max_depth()];
    let greedy = BeamConfig::with_width(1);
    let mut seen = 0usize;
    for map in maps {
        seen += 1;
        if let Some(top) = beam_search(taxonomy, map, &greedy)?.into_iter().next() {
            for (d, &prob) in top.per_level_probs.iter().enumerate() {
                per_depth[d].push(prob);
            }
        }
    }
    if seen == 0 {
        return Err(InferError::EmptyCalibration);
    }
    Ok(per_depth
        .iter()
        .map(|v| {
            if v.is_empty() {
                f64::NEG_INFINITY
            } else {
                percentile(v, pct)
            }
        })
        .collect())
}

/// Runs scoring and hierarchical inference over calibration queries and
/// derives per-depth beam thresholds. Degenerate (empty) queries are skipped.
pub fn calibrate_thresholds(
    taxonomy: &Taxonomy,
    model: &DualEncoderModel,
    queries: &[String],
    pct: f64,
    alpha: f64,
) -> Result<Vec<f64>, InferError> {
    let table = model.category_table(taxonomy);
    let mut maps = Vec::with_capacity(queries.len());
    for q in queries {
        let e = model.encode_query(q);
        if e.degenerate {
            continue;
        }
        maps.push(hier_infer(
            taxonomy,
            &table.scores(&e.vector),
            alpha,
            model.config.logit_scale,
        )?);
    }
    calibrate_from_maps(taxonomy, &maps, pct)
}
