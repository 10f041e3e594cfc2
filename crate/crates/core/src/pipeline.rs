//! End-to-end synthetic benchmark: taxonomy, engagement log, train/test split,
//! mining, optional pre-training, training, threshold calibration and
//! evaluation of both hierarchical inference and the flat baseline.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{
    debias_report, evaluate, evaluate_flat, hierarchical_outcome, level_distribution, weighted_level_distribution,
    DebiasReport, EvalError, HistogramSource, LabeledQuery, MetricsReport,
};
use crate::features::FeatureConfig;
use crate::hash::{fnv1a64, splitmix64};
use crate::infer::{calibrate_thresholds, BeamConfig, InferError};
use crate::model::{DualEncoderModel, ModelConfig};
use crate::taxonomy::{CategoryPath, Taxonomy};
use crate::train::{pretrain_query_tower, train_categorizer, PretrainPair, TrainConfig, TrainError};
use crate::weak::synthetic::{generate_synthetic_log, synthetic_taxonomy, SynthConfig, SynthError, SyntheticLog, TaxonomyShape};
use crate::weak::{mine_pairs, write_log, write_pairs, MinedPairs, TrainingPair, WeakError};

#[derive(Error, Debug)]
pub enum PipelineError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Weak(#[from] WeakError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("split left no {0} queries")]
    EmptySplit(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub shape: TaxonomyShape,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Query-tower pre-training before categorization training.
    pub pretrain: Option<TrainConfig>,
    pub min_frequency: u64,
    /// Fraction of synthetic queries held out for evaluation.
    pub test_fraction: f64,
    /// Fraction of synthetic queries held out, unlabeled, for threshold
    /// calibration.
    pub calibration_fraction: f64,
    /// Percentile used to calibrate beam thresholds.
    pub calibration_percentile: f64,
    pub alpha: f64,
    /// Master seed; every stage derives its own seed from it.
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let model = ModelConfig {
            dim: 32,
            features: FeatureConfig {
                trigram_buckets: 50_000,
                word_buckets: 20_000,
                ..FeatureConfig::default()
            },
            ..ModelConfig::default()
        };
        BenchmarkConfig {
            shape: TaxonomyShape {
                roots: 20,
                branching: vec![(2, 4), (0, 3), (0, 3), (0, 3)],
            },
            synth: SynthConfig {
                n_queries: 3_000,
                events_per_query: 20,
                ..SynthConfig::default()
            },
            model,
            train: TrainConfig {
                epochs: 5,
                batch_size: 32,
                learning_rate: 1.0,
                momentum: 0.9,
                seed: 0,
            },
            pretrain: None,
            min_frequency: 2,
            test_fraction: 0.2,
            calibration_fraction: 0.1,
            calibration_percentile: 20.0,
            alpha: 1.0,
            seed: 0,
        }
    }
}

/// Stage seeds derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSeeds {
    pub taxonomy: u64,
    pub synth: u64,
    pub split: u64,
    pub init: u64,
    pub pretrain: u64,
    pub train: u64,
}

impl StageSeeds {
    pub fn derive(seed: u64) -> Self {
        let s = |tag: u64| splitmix64(seed ^ splitmix64(0x5eed_0000 + tag));
        StageSeeds {
            taxonomy: s(1),
            synth: s(2),
            split: s(3),
            init: s(4),
            pretrain: s(5),
            train: s(6),
        }
    }
}

/// Queries of a benchmark run, partitioned by a seeded hash of the text.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QuerySplit {
    pub train: Vec<LabeledQuery>,
    pub calibration: Vec<LabeledQuery>,
    pub test: Vec<LabeledQuery>,
}

/// Deterministic hash split of the ground-truth queries: the first
/// `test_fraction` of hash space is test, the next `calibration_fraction`
/// is calibration, the rest is training.
pub fn split_queries(
    ground_truth: &[(String, CategoryPath)],
    test_fraction: f64,
    calibration_fraction: f64,
    seed: u64,
) -> QuerySplit {
    let mut split = QuerySplit::default();
    for (q, p) in ground_truth {
        let u = (fnv1a64(seed, q.as_bytes()) >> 11) as f64 / (1u64 << 53) as f64;
        let l = LabeledQuery {
            query: q.clone(),
            true_path: p.clone(),
        };
        if u < test_fraction {
            split.test.push(l);
        } else if u < test_fraction + calibration_fraction {
            split.calibration.push(l);
        } else {
            split.train.push(l);
        }
    }
    split
}

/// Distinct `(query, product title)` pairs from the training split's records.
pub fn pretrain_corpus(log: &SyntheticLog, taxonomy: &Taxonomy, train_queries: &HashSet<&str>, seed: u64) -> Vec<PretrainPair> {
    let mut seen = HashSet::new();
    log.product_pairs(taxonomy, seed)
        .into_iter()
        .filter(|(q, _)| train_queries.contains(q.as_str()))
        .filter_map(|(q, t)| PretrainPair::new(&q, &t))
        .filter(|p| seen.insert(p.clone()))
        .collect()
}

/// Everything a benchmark run produced, in serialized form where the stage
/// emits a file.
#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub taxonomy: Taxonomy,
    pub log: SyntheticLog,
    pub split: QuerySplit,
    pub mined: MinedPairs,
    pub model: DualEncoderModel,
    pub pretrain_loss: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub beam: BeamConfig,
    pub hierarchical: MetricsReport,
    pub flat: MetricsReport,
    pub debias: DebiasReport,
    pub artifacts: Artifacts,
}

/// Byte images of each stage's output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    pub taxonomy_tsv: Vec<u8>,
    pub log_jsonl: Vec<u8>,
    pub pairs_tsv: Vec<u8>,
    pub pretrained_checkpoint: Option<Vec<u8>>,
    pub checkpoint: Vec<u8>,
    pub metrics_json: Vec<u8>,
    pub debias_csv: Vec<u8>,
}

/// Generates the taxonomy and log for a config.
pub fn synthesize(config: &BenchmarkConfig) -> Result<(Taxonomy, SyntheticLog), PipelineError> {
    let seeds = StageSeeds::derive(config.seed);
    let taxonomy = synthetic_taxonomy(&config.shape, seeds.taxonomy)?;
    let synth = SynthConfig {
        seed: seeds.synth,
        ..config.synth.clone()
    };
    let log = generate_synthetic_log(&taxonomy, &synth)?;
    Ok((taxonomy, log))
}

pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkRun, PipelineError> {
    let seeds = StageSeeds::derive(config.seed);
    let (taxonomy, log) = synthesize(config)?;
    let split = split_queries(
        &log.ground_truth,
        config.test_fraction,
        config.calibration_fraction,
        seeds.split,
    );
    for (part, name) in [(&split.train, "training"), (&split.calibration, "calibration"), (&split.test, "test")] {
        if part.is_empty() {
            return Err(PipelineError::EmptySplit(name));
        }
    }
    let test_queries = &split.test;
    let train_set: HashSet<&str> = split.train.iter().map(|l| l.query.as_str()).collect();
    let mined = mine_pairs(
        log.records.iter().filter(|r| train_set.contains(r.query.as_str())),
        &taxonomy,
        config.min_frequency,
    )?;

    let model_config = ModelConfig {
        init_seed: seeds.init,
        ..config.model.clone()
    };
    let mut model = DualEncoderModel::new(model_config, &taxonomy);
    let mut pretrain_loss = Vec::new();
    let mut pretrained_checkpoint = None;
    if let Some(pt) = &config.pretrain {
        let corpus = pretrain_corpus(&log, &taxonomy, &train_set, seeds.pretrain);
        let pt = TrainConfig {
            seed: seeds.pretrain,
            ..pt.clone()
        };
        pretrain_loss = pretrain_query_tower(&mut model, &corpus, &pt)?.loss_curve;
        pretrained_checkpoint = Some(model.to_checkpoint_bytes());
    }
    let train = TrainConfig {
        seed: seeds.train,
        ..config.train.clone()
    };
    let report = train_categorizer(&mut model, &mined.pairs, &taxonomy, &train)?;

    let calibration: Vec<String> = split.calibration.iter().map(|l| l.query.clone()).collect();
    let thresholds = calibrate_thresholds(&taxonomy, &model, &calibration, config.calibration_percentile, config.alpha)?;
    let beam = BeamConfig {
        width: 1,
        thresholds,
        alpha: config.alpha,
    };
    let hierarchical = evaluate(&model, &taxonomy, test_queries, &beam)?;
    let flat = evaluate_flat(&model, &taxonomy, test_queries)?;

    let table = model.category_table(&taxonomy);
    let mut predicted: Vec<CategoryPath> = Vec::with_capacity(test_queries.len());
    for l in test_queries {
        if let Some(p) = hierarchical_outcome(&taxonomy, &model, &table, &beam, &l.query)?.top1 {
            predicted.push(p);
        }
    }
    let training_hist = weighted_level_distribution(
        mined.pairs.iter().map(|p| (&p.path, p.weight as f64)),
        HistogramSource::TrainingLabels,
    )?;
    let pred_hist = level_distribution(&predicted, HistogramSource::Predictions)?;
    let truth: Vec<CategoryPath> = test_queries.iter().map(|l| l.true_path.clone()).collect();
    let truth_hist = level_distribution(&truth, HistogramSource::GroundTruth)?;
    let debias = debias_report(&training_hist, &pred_hist, &truth_hist);

    let mut log_jsonl = Vec::new();
    write_log(&log.records, &mut log_jsonl).expect("write to memory");
    let mut pairs_tsv = Vec::new();
    write_pairs(&mined.pairs, &taxonomy, &mut pairs_tsv).expect("write to memory");
    let artifacts = Artifacts {
        taxonomy_tsv: taxonomy.to_tsv().into_bytes(),
        log_jsonl,
        pairs_tsv,
        pretrained_checkpoint,
        checkpoint: model.to_checkpoint_bytes(),
        metrics_json: hierarchical.to_json().into_bytes(),
        debias_csv: debias.csv.clone().into_bytes(),
    };
    Ok(BenchmarkRun {
        taxonomy,
        log,
        split,
        mined,
        model,
        pretrain_loss,
        train_loss: report.loss_curve,
        beam,
        hierarchical,
        flat,
        debias,
        artifacts,
    })
}

/// Linearly separable toy problem: `n_categories` root-level categories, each
/// with a private vocabulary, and `queries_per_category` distinct queries per
/// category built from that vocabulary. A seeded quarter of each category's
/// queries is held out.
#[derive(Debug, Clone)]
pub struct SeparableSet {
    pub taxonomy: Taxonomy,
    pub train: Vec<TrainingPair>,
    pub test: Vec<LabeledQuery>,
}

pub fn separable_set(n_categories: usize, queries_per_category: usize, seed: u64) -> SeparableSet {
    const VOCAB: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tsv: String = (1..=n_categories).map(|i| format!("{i}\t\tcategory {i}\n")).collect();
    let taxonomy = Taxonomy::from_tsv(&tsv).expect("flat taxonomy");
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..n_categories {
        let vocab: Vec<String> = (0..VOCAB).map(|k| format!("w{c}x{k}")).collect();
        let path = taxonomy.path_of_index(c);
        let mut seen = HashSet::new();
        let mut queries = Vec::new();
        while queries.len() < queries_per_category {
            let n = rng.gen_range(2..=3);
            let q = vocab.choose_multiple(&mut rng, n).cloned().collect::<Vec<_>>().join(" ");
            if seen.insert(q.clone()) {
                queries.push(q);
            }
        }
        let held_out = queries_per_category / 4;
        for (k, query) in queries.into_iter().enumerate() {
            if k < held_out {
                test.push(LabeledQuery {
                    query,
                    true_path: path.clone(),
                });
            } else {
                train.push(TrainingPair {
                    query,
                    path: path.clone(),
                    weight: 1,
                });
            }
        }
    }
    SeparableSet { taxonomy, train, test }
}
