//! `hiercat` command-line tool: synthetic data generation, mining, training,
//! calibration, evaluation, one-shot inference and the categorization service.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hiercat::eval::{evaluate, evaluate_flat, read_labeled, write_labeled, LabeledQuery};
use hiercat::features::FeatureConfig;
use hiercat::infer::{calibrate_thresholds, BeamConfig};
use hiercat::model::{DualEncoderModel, ModelConfig};
use hiercat::pipeline::{pretrain_corpus, split_queries, StageSeeds};
use hiercat::serving::{handle_line, request_stop, serve, QueryCache, ServerConfig, ServingBundle};
use hiercat::taxonomy::Taxonomy;
use hiercat::train::{
    loss_curve_csv, pretrain_query_tower, read_pretrain_pairs, train_categorizer, write_pretrain_pairs, TrainConfig,
};
use hiercat::weak::synthetic::{generate_synthetic_log, synthetic_taxonomy, BrowseKindWeights, NoiseModel, SynthConfig, TaxonomyShape};
use hiercat::weak::{mine_log, read_pairs, write_log, write_pairs};

#[derive(Parser, Debug)]
#[command(name = "hiercat", version, about = "Hierarchical query categorization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic taxonomy, engagement log and query splits.
    Synth(SynthArgs),
    /// Mine weighted (query, path) training pairs from an engagement log.
    Mine(MineArgs),
    /// Pre-train the query tower on (query, product title) pairs.
    Pretrain(PretrainArgs),
    /// Train the categorizer on mined pairs.
    Train(TrainArgs),
    /// Derive per-depth beam thresholds from held-out queries.
    Calibrate(CalibrateArgs),
    /// Evaluate a checkpoint on a labeled query set.
    Eval(EvalArgs),
    /// Categorize queries read from stdin, one JSON response per line.
    Infer(InferArgs),
    /// Serve the newline-delimited JSON protocol over TCP.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out_dir: PathBuf,
    /// Use this taxonomy instead of generating one.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    roots: usize,
    /// Children range per level below the roots, e.g. `2-4,0-3,0-3,0-3`.
    #[arg(long, default_value = "2-4,0-3,0-3,0-3")]
    branching: String,
    #[arg(long, default_value_t = 3000)]
    n_queries: usize,
    #[arg(long, default_value_t = 20)]
    events_per_query: usize,
    #[arg(long, default_value_t = 0.3)]
    p_browse: f64,
    #[arg(long, default_value_t = 0.5)]
    browse_sibling: f64,
    #[arg(long, default_value_t = 0.5)]
    browse_ancestor: f64,
    #[arg(long, default_value_t = 0.0)]
    browse_uniform: f64,
    #[arg(long, default_value_t = 0.3)]
    truncation_prob: f64,
    /// Relative frequency of seller, model and both label sources.
    #[arg(long, default_value = "0.3,0.5,0.2")]
    label_source_weights: String,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    calibration_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct MineArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    /// JSON-lines engagement log.
    #[arg(long)]
    log: PathBuf,
    #[arg(long, default_value_t = 2)]
    min_frequency: u64,
    /// Output TSV of `query<TAB>path<TAB>weight`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Continue from this checkpoint; model flags are then ignored.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 1_000_000)]
    trigram_buckets: u32,
    #[arg(long, default_value_t = 250_000)]
    word_buckets: u32,
    #[arg(long, default_value_t = 0)]
    hash_seed: u64,
    #[arg(long)]
    no_boundary_markers: bool,
    #[arg(long, default_value_t = 16.0)]
    logit_scale: f64,
}

impl ModelArgs {
    fn model(&self, taxonomy: &Taxonomy, seed: u64) -> Result<DualEncoderModel> {
        if let Some(path) = &self.init {
            let model = DualEncoderModel::load_checkpoint_file(path)
                .with_context(|| format!("loading {}", path.display()))?;
            model.check_taxonomy(taxonomy)?;
            return Ok(model);
        }
        let config = ModelConfig {
            dim: self.dim,
            features: FeatureConfig {
                trigram_buckets: self.trigram_buckets,
                word_buckets: self.word_buckets,
                hash_seed: self.hash_seed,
                boundary_markers: !self.no_boundary_markers,
            },
            logit_scale: self.logit_scale,
            init_seed: StageSeeds::derive(seed).init,
        };
        Ok(DualEncoderModel::new(config, taxonomy))
    }
}

#[derive(Args, Debug)]
struct OptimArgs {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
}

impl OptimArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            seed,
        }
    }
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    /// TSV of `query<TAB>product title`.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write the per-epoch loss curve as CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    /// Mined pairs TSV.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct BeamArgs {
    /// Beam config JSON written by `calibrate`.
    #[arg(long)]
    beam: Option<PathBuf>,
    /// Overrides the beam width.
    #[arg(long)]
    width: Option<usize>,
    /// Overrides the self-score weight of hierarchical inference.
    #[arg(long)]
    alpha: Option<f64>,
}

impl BeamArgs {
    fn config(&self) -> Result<BeamConfig> {
        let mut beam = match &self.beam {
            Some(path) => serde_json::from_reader(BufReader::new(open(path)?))
                .with_context(|| format!("parsing {}", path.display()))?,
            None => BeamConfig::default(),
        };
        if let Some(w) = self.width {
            beam.width = w;
        }
        if let Some(a) = self.alpha {
            beam.alpha = a;
        }
        Ok(beam)
    }
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Held-out queries, one per line (extra TSV columns are ignored).
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 20.0)]
    percentile: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1)]
    width: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// TSV of `query<TAB>path`.
    #[arg(long)]
    labeled: PathBuf,
    #[command(flatten)]
    beam: BeamArgs,
    /// Score the flat argmax baseline instead of hierarchical inference.
    #[arg(long)]
    flat: bool,
    /// Write the metrics JSON here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BundleArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    beam: BeamArgs,
    #[arg(long, default_value_t = hiercat::serving::DEFAULT_CACHE_CAPACITY)]
    cache_capacity: usize,
    /// Retrieval boosts for depths 1, 2 and 3.
    #[arg(long, default_value = "2.0,1.5,1.2")]
    boosts: String,
}

impl BundleArgs {
    fn load(&self) -> Result<(ServingBundle, QueryCache)> {
        let taxonomy = load_taxonomy(&self.taxonomy)?;
        let boosts = parse_floats(&self.boosts, 3, "--boosts")?;
        let bundle = ServingBundle::load(&self.checkpoint, taxonomy, self.beam.config()?)?
            .with_boosts([boosts[0], boosts[1], boosts[2]]);
        Ok((bundle, QueryCache::new(self.cache_capacity)))
    }
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    bundle: BundleArgs,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[command(flatten)]
    bundle: BundleArgs,
    #[arg(long, default_value = "127.0.0.1:7878")]
    addr: SocketAddr,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("opening {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn load_taxonomy(path: &Path) -> Result<Taxonomy> {
    Taxonomy::load(path).with_context(|| format!("loading taxonomy {}", path.display()))
}

fn parse_floats(text: &str, n: usize, flag: &str) -> Result<Vec<f64>> {
    let v = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .with_context(|| format!("{flag}: expected comma-separated numbers"))?;
    if v.len() != n {
        bail!("{flag}: expected {n} values, got {}", v.len());
    }
    Ok(v)
}

fn parse_branching(text: &str) -> Result<Vec<(usize, usize)>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|r| {
            let (lo, hi) = r
                .split_once('-')
                .with_context(|| format!("--branching: `{r}` is not a `min-max` range"))?;
            let (lo, hi) = (lo.trim().parse()?, hi.trim().parse()?);
            if lo > hi {
                bail!("--branching: empty range `{r}`");
            }
            Ok((lo, hi))
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_split(path: &Path, labeled: &[LabeledQuery], taxonomy: &Taxonomy) -> Result<()> {
    let mut out = create(path)?;
    write_labeled(labeled, taxonomy, &mut out)?;
    out.flush()?;
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let seeds = StageSeeds::derive(args.seed);
    let taxonomy = match &args.taxonomy {
        Some(path) => load_taxonomy(path)?,
        None => {
            let shape = TaxonomyShape {
                roots: args.roots,
                branching: parse_branching(&args.branching)?,
            };
            synthetic_taxonomy(&shape, seeds.taxonomy)?
        }
    };
    let w = parse_floats(&args.label_source_weights, 3, "--label-source-weights")?;
    let config = SynthConfig {
        n_queries: args.n_queries,
        events_per_query: args.events_per_query,
        noise: NoiseModel {
            p_browse: args.p_browse,
            browse_kind_weights: BrowseKindWeights {
                sibling: args.browse_sibling,
                ancestor: args.browse_ancestor,
                uniform_random: args.browse_uniform,
            },
            truncation_prob: args.truncation_prob,
        },
        label_source_weights: [w[0], w[1], w[2]],
        seed: seeds.synth,
    };
    let log = generate_synthetic_log(&taxonomy, &config)?;
    let split = split_queries(&log.ground_truth, args.test_fraction, args.calibration_fraction, seeds.split);
    let train: HashSet<&str> = split.train.iter().map(|l| l.query.as_str()).collect();

    let dir = &args.out_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_text(&dir.join("taxonomy.tsv"), &taxonomy.to_tsv())?;
    let records: Vec<_> = log.records.iter().filter(|r| train.contains(r.query.as_str())).cloned().collect();
    let mut out = create(&dir.join("log.jsonl"))?;
    write_log(&records, &mut out)?;
    out.flush()?;
    write_split(&dir.join("train.tsv"), &split.train, &taxonomy)?;
    write_split(&dir.join("calibration.tsv"), &split.calibration, &taxonomy)?;
    write_split(&dir.join("test.tsv"), &split.test, &taxonomy)?;
    let corpus = pretrain_corpus(&log, &taxonomy, &train, seeds.pretrain);
    let mut out = create(&dir.join("pretrain.tsv"))?;
    write_pretrain_pairs(&corpus, &mut out)?;
    out.flush()?;
    log::info!(
        "{} nodes, {} records, {} train / {} calibration / {} test queries, {} pre-training pairs",
        taxonomy.len(),
        records.len(),
        split.train.len(),
        split.calibration.len(),
        split.test.len(),
        corpus.len()
    );
    Ok(())
}

fn mine(args: MineArgs) -> Result<()> {
    let taxonomy = load_taxonomy(&args.taxonomy)?;
    let mined = mine_log(BufReader::new(open(&args.log)?), &taxonomy, args.min_frequency)?;
    let mut out = create(&args.out)?;
    write_pairs(&mined.pairs, &taxonomy, &mut out)?;
    out.flush()?;
    let s = &mined.skipped;
    eprintln!(
        "{} pairs; skipped {} unparseable paths, {} empty queries, {} malformed lines",
        mined.pairs.len(),
        s.unparseable_path,
        s.empty_query,
        s.malformed_line
    );
    Ok(())
}

fn save(model: &DualEncoderModel, out: &Path, curve: &[f64], loss_csv: Option<&Path>) -> Result<()> {
    model
        .save_checkpoint_file(out)
        .with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = loss_csv {
        write_text(path, &loss_curve_csv(curve))?;
    }
    if let Some(last) = curve.last() {
        eprintln!("final epoch loss {last:.6}");
    }
    Ok(())
}

fn pretrain(args: PretrainArgs) -> Result<()> {
    let taxonomy = load_taxonomy(&args.taxonomy)?;
    let mut model = args.model.model(&taxonomy, args.seed)?;
    let pairs = read_pretrain_pairs(BufReader::new(open(&args.pairs)?))?;
    let config = args.optim.config(StageSeeds::derive(args.seed).pretrain);
    let report = pretrain_query_tower(&mut model, &pairs, &config)?;
    save(&model, &args.out, &report.loss_curve, args.loss_csv.as_deref())
}

fn train(args: TrainArgs) -> Result<()> {
    let taxonomy = load_taxonomy(&args.taxonomy)?;
    let mut model = args.model.model(&taxonomy, args.seed)?;
    let pairs = read_pairs(BufReader::new(open(&args.pairs)?), &taxonomy)?;
    let config = args.optim.config(StageSeeds::derive(args.seed).train);
    let report = train_categorizer(&mut model, &pairs, &taxonomy, &config)?;
    if report.skipped_degenerate > 0 {
        log::warn!("skipped {} pairs with empty queries", report.skipped_degenerate);
    }
    save(&model, &args.out, &report.loss_curve, args.loss_csv.as_deref())
}

fn calibrate(args: CalibrateArgs) -> Result<()> {
    let taxonomy = load_taxonomy(&args.taxonomy)?;
    let model = DualEncoderModel::load_checkpoint_file(&args.checkpoint)?;
    model.check_taxonomy(&taxonomy)?;
    let mut queries = Vec::new();
    for line in BufReader::new(open(&args.queries)?).lines() {
        let line = line?;
        let q = line.split('\t').next().unwrap_or_default();
        if !q.trim().is_empty() {
            queries.push(q.to_string());
        }
    }
    let thresholds = calibrate_thresholds(&taxonomy, &model, &queries, args.percentile, args.alpha)?;
    let beam = BeamConfig {
        width: args.width,
        // Probabilities are non-negative, so 0 is the JSON-safe "no threshold".
        thresholds: thresholds.into_iter().map(|t| if t.is_finite() { t } else { 0.0 }).collect(),
        alpha: args.alpha,
    };
    let json = serde_json::to_string_pretty(&beam)?;
    write_text(&args.out, &json)?;
    println!("{json}");
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let taxonomy = load_taxonomy(&args.taxonomy)?;
    let model = DualEncoderModel::load_checkpoint_file(&args.checkpoint)?;
    let labeled = read_labeled(BufReader::new(open(&args.labeled)?), &taxonomy)?;
    let report = if args.flat {
        evaluate_flat(&model, &taxonomy, &labeled)?
    } else {
        evaluate(&model, &taxonomy, &labeled, &args.beam.config()?)?
    };
    let json = report.to_json();
    if let Some(path) = &args.out {
        write_text(path, &json)?;
    }
    println!("{json}");
    Ok(())
}

fn infer(args: InferArgs) -> Result<()> {
    let (bundle, cache) = args.bundle.load()?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for line in std::io::stdin().lock().lines() {
        let request = serde_json::json!({ "query": line? }).to_string();
        writeln!(out, "{}", handle_line(&bundle, &cache, &request))?;
    }
    out.flush()?;
    Ok(())
}

fn serve_cmd(args: ServeArgs) -> Result<()> {
    let (bundle, cache) = args.bundle.load()?;
    let handle = serve(Arc::new(bundle), Arc::new(cache), &ServerConfig { addr: args.addr })
        .with_context(|| format!("binding {}", args.addr))?;
    let (flag, addr) = (handle.stop_flag(), handle.local_addr());
    ctrlc::set_handler(move || request_stop(&flag, addr)).context("installing signal handler")?;
    eprintln!("listening on {addr}");
    handle.wait();
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Mine(a) => mine(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Serve(a) => serve_cmd(a),
    }
}
