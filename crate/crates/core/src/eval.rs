//! Per-level micro-F1 and acc@5, level-distribution histograms and
//! de-biasing reports.
//!
//! At depth `d` a query is evaluable when its true path reaches `d`. The top-1
//! prediction either reaches `d` (a prediction, correct or not) or stops above
//! it (an abstention). Abstentions lower recall but not precision.

use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infer::{beam_search, flat_top_k, hier_infer, BeamConfig, InferError, Prediction};
use crate::model::{DualEncoderModel, ModelError};
use crate::taxonomy::{CategoryPath, PathError, Taxonomy, MAX_DEPTH};

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("no labeled queries")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error("line {line}: {source}")]
    Path { line: usize, source: PathError },
    #[error("line {line}: expected query<TAB>path[<TAB>locale]")]
    Malformed { line: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledQuery {
    pub query: String,
    pub true_path: CategoryPath,
}

/// Reads `query<TAB>path_text[<TAB>locale]`; the locale column is ignored.
pub fn read_labeled(reader: impl BufRead, taxonomy: &Taxonomy) -> Result<Vec<LabeledQuery>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(query), Some(path)) = (fields.next(), fields.next()) else {
            return Err(EvalError::Malformed { line: i + 1 });
        };
        if fields.count() > 1 {
            return Err(EvalError::Malformed { line: i + 1 });
        }
        let true_path = taxonomy
            .parse_path(path)
            .map_err(|source| EvalError::Path { line: i + 1, source })?;
        out.push(LabeledQuery {
            query: query.to_string(),
            true_path,
        });
    }
    Ok(out)
}

pub fn write_labeled(labeled: &[LabeledQuery], taxonomy: &Taxonomy, mut out: impl std::io::Write) -> std::io::Result<()> {
    for l in labeled {
        writeln!(out, "{}\t{}", l.query, taxonomy.render(&l.true_path))?;
    }
    Ok(())
}

/// What a system predicted for one query: a ranked candidate list (used for
/// acc@k) and the single path scored for precision and recall.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryOutcome {
    pub top_k: Vec<CategoryPath>,
    pub top1: Option<CategoryPath>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub depth: usize,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub acc_at_1: f64,
    pub acc_at_5: f64,
    pub evaluated: usize,
    pub predicted: usize,
    pub correct: usize,
    pub abstained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub queries: usize,
    /// Index `d - 1` holds depth `d`; depths no truth reaches are omitted.
    pub per_depth: Vec<DepthMetrics>,
}

impl MetricsReport {
    pub fn depth(&self, d: usize) -> Option<&DepthMetrics> {
        self.per_depth.iter().find(|m| m.depth == d)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    evaluated: usize,
    predicted: usize,
    correct: usize,
    hit1: usize,
    hit5: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Scores outcomes against truths. `outcomes[i]` belongs to `labeled[i]`;
/// acc@5 looks at the first five entries of `top_k`.
pub fn score_outcomes(labeled: &[LabeledQuery], outcomes: &[QueryOutcome]) -> Result<MetricsReport, EvalError> {
    if labeled.is_empty() {
        return Err(EvalError::Empty);
    }
    assert_eq!(labeled.len(), outcomes.len());
    let mut counts = [Counts::default(); MAX_DEPTH];
    for (l, o) in labeled.iter().zip(outcomes) {
        for (d, c) in counts.iter_mut().enumerate().map(|(i, c)| (i + 1, c)) {
            let Some(truth) = l.true_path.truncate(d) else { break };
            c.evaluated += 1;
            if let Some(pred) = o.top1.as_ref().and_then(|p| p.truncate(d)) {
                c.predicted += 1;
                c.correct += usize::from(pred == truth);
            }
            let hit = |p: &CategoryPath| p.truncate(d).as_ref() == Some(&truth);
            c.hit1 += usize::from(o.top_k.first().is_some_and(hit));
            c.hit5 += usize::from(o.top_k.iter().take(5).any(hit));
        }
    }
    let per_depth = counts
        .iter()
        .enumerate()
        .filter(|(_, c)| c.evaluated > 0)
        .map(|(i, c)| {
            let p = ratio(c.correct, c.predicted);
            let r = ratio(c.correct, c.evaluated);
            DepthMetrics {
                depth: i + 1,
                micro_precision: p,
                micro_recall: r,
                micro_f1: f1(p, r),
                acc_at_1: ratio(c.hit1, c.evaluated),
                acc_at_5: ratio(c.hit5, c.evaluated),
                evaluated: c.evaluated,
                predicted: c.predicted,
                correct: c.correct,
                abstained: c.evaluated - c.predicted,
            }
        })
        .collect();
    Ok(MetricsReport {
        queries: labeled.len(),
        per_depth,
    })
}

/// Runs a predictor over every query and scores the results.
pub fn evaluate_with(
    labeled: &[LabeledQuery],
    mut predict: impl FnMut(&str) -> Result<QueryOutcome, EvalError>,
) -> Result<MetricsReport, EvalError> {
    let outcomes = labeled
        .iter()
        .map(|l| predict(&l.query))
        .collect::<Result<Vec<_>, _>>()?;
    score_outcomes(labeled, &outcomes)
}

fn paths(preds: Vec<Prediction>) -> Vec<CategoryPath> {
    preds.into_iter().map(|p| p.path).collect()
}

/// Hierarchical system: acc@k from a width-5 unthresholded beam, top-1 from
/// a width-1 beam with the configured thresholds.
pub fn hierarchical_outcome(
    taxonomy: &Taxonomy,
    model: &DualEncoderModel,
    table: &crate::model::CategoryEmbeddingTable,
    beam: &BeamConfig,
    query: &str,
) -> Result<QueryOutcome, EvalError> {
    let q = model.encode_query(query);
    if q.degenerate {
        return Ok(QueryOutcome::default());
    }
    let probs = hier_infer(taxonomy, &table.scores(&q.vector), beam.alpha, model.config.logit_scale)?;
    let wide = BeamConfig {
        width: 5,
        ..beam.without_thresholds()
    };
    let top1_cfg = BeamConfig {
        width: 1,
        ..beam.clone()
    };
    Ok(QueryOutcome {
        top_k: paths(beam_search(taxonomy, &probs, &wide)?),
        top1: beam_search(taxonomy, &probs, &top1_cfg)?.into_iter().next().map(|p| p.path),
    })
}

/// Flat baseline: the five highest raw-scoring nodes; top-1 is the argmax.
pub fn flat_outcome(
    taxonomy: &Taxonomy,
    model: &DualEncoderModel,
    table: &crate::model::CategoryEmbeddingTable,
    query: &str,
) -> Result<QueryOutcome, EvalError> {
    let q = model.encode_query(query);
    if q.degenerate {
        return Ok(QueryOutcome::default());
    }
    let top_k = paths(flat_top_k(taxonomy, &table.scores(&q.vector), 5, model.config.logit_scale)?);
    Ok(QueryOutcome {
        top1: top_k.first().cloned(),
        top_k,
    })
}

/// Hierarchical-inference evaluation of a model.
pub fn evaluate(
    model: &DualEncoderModel,
    taxonomy: &Taxonomy,
    labeled: &[LabeledQuery],
    beam: &BeamConfig,
) -> Result<MetricsReport, EvalError> {
    model.check_taxonomy(taxonomy)?;
    let table = model.category_table(taxonomy);
    evaluate_with(labeled, |q| hierarchical_outcome(taxonomy, model, &table, beam, q))
}

/// Flat-argmax evaluation of a model.
pub fn evaluate_flat(model: &DualEncoderModel, taxonomy: &Taxonomy, labeled: &[LabeledQuery]) -> Result<MetricsReport, EvalError> {
    model.check_taxonomy(taxonomy)?;
    let table = model.category_table(taxonomy);
    evaluate_with(labeled, |q| flat_outcome(taxonomy, model, &table, q))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistogramSource {
    TrainingLabels,
    Predictions,
    GroundTruth,
}

/// Relative frequency of terminal depths; `freqs[d - 1]` is depth `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelHistogram {
    pub source: HistogramSource,
    pub freqs: [f64; MAX_DEPTH],
}

impl LevelHistogram {
    pub fn freq(&self, depth: usize) -> f64 {
        self.freqs[depth - 1]
    }
}

/// Histogram of terminal depths, optionally weighted per path.
pub fn weighted_level_distribution<'a>(
    paths: impl IntoIterator<Item = (&'a CategoryPath, f64)>,
    source: HistogramSource,
) -> Result<LevelHistogram, EvalError> {
    let mut freqs = [0.0; MAX_DEPTH];
    for (p, w) in paths {
        freqs[p.depth() - 1] += w;
    }
    let total: f64 = freqs.iter().sum();
    if total <= 0.0 {
        return Err(EvalError::Empty);
    }
    freqs.iter_mut().for_each(|f| *f /= total);
    Ok(LevelHistogram { source, freqs })
}

pub fn level_distribution(paths: &[CategoryPath], source: HistogramSource) -> Result<LevelHistogram, EvalError> {
    weighted_level_distribution(paths.iter().map(|p| (p, 1.0)), source)
}

/// `0.5 * sum |p - q|`.
pub fn total_variation(a: &LevelHistogram, b: &LevelHistogram) -> f64 {
    0.5 * a.freqs.iter().zip(&b.freqs).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasReport {
    pub tv_predictions_truth: f64,
    pub tv_training_truth: f64,
    pub csv: String,
}

impl DebiasReport {
    /// Whether predictions sit closer to the truth than the training labels.
    pub fn debiased(&self) -> bool {
        self.tv_predictions_truth < self.tv_training_truth
    }
}

pub fn debias_report(training: &LevelHistogram, predictions: &LevelHistogram, truth: &LevelHistogram) -> DebiasReport {
    let mut csv = String::from("depth,train_freq,pred_freq,truth_freq\n");
    for d in 1..=MAX_DEPTH {
        csv.push_str(&format!("{},{},{},{}\n", d, training.freq(d), predictions.freq(d), truth.freq(d)));
    }
    DebiasReport {
        tv_predictions_truth: total_variation(predictions, truth),
        tv_training_truth: total_variation(training, truth),
        csv,
    }
}
