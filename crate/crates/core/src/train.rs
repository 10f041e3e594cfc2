//! Training: flat categorization cross-entropy over all taxonomy nodes,
//! in-batch retrieval pre-training of the query tower, and finite-difference
//! gradient checks.
//!
//! Logits are `logit_scale * cosine(query, category)`. Gradients are derived
//! by hand through the cosine, the L2 normalizations, the attention fusion and
//! the mean pooling of each embedding bag.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{normalize, trigram_features};
use crate::hash::splitmix64;
use crate::infer::softmax_in_place;
use crate::model::{category_feature_ids, dot, l2_norm, DualEncoderModel, EmbeddingTable, ModelError, QueryForward};
use crate::taxonomy::{NodeId, Taxonomy};
use crate::weak::TrainingPair;

#[derive(Error, Debug)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("query {0:?} is empty after normalization")]
    DegenerateQuery(String),
    #[error("no usable training pairs ({skipped} degenerate)")]
    NoUsablePairs { skipped: usize },
    #[error("in-batch negatives need batch_size >= 2, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1.0,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("learning_rate must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Address of a single scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Param {
    Attn(usize),
    QueryTrigram(u32, usize),
    QueryWord(u32, usize),
    Category(u32, usize),
}

pub fn get_param(model: &DualEncoderModel, p: Param) -> f32 {
    match p {
        Param::Attn(c) => model.query.fusion.attn[c],
        Param::QueryTrigram(r, c) => model.query.trigram.get(r, c),
        Param::QueryWord(r, c) => model.query.word.get(r, c),
        Param::Category(r, c) => model.category.table.get(r, c),
    }
}

pub fn set_param(model: &mut DualEncoderModel, p: Param, v: f32) {
    match p {
        Param::Attn(c) => model.query.fusion.attn[c] = v,
        Param::QueryTrigram(r, c) => model.query.trigram.set(r, c, v),
        Param::QueryWord(r, c) => model.query.word.set(r, c, v),
        Param::Category(r, c) => model.category.table.set(r, c, v),
    }
}

type SparseGrad = HashMap<u32, Vec<f64>>;

fn add_row(map: &mut SparseGrad, id: u32, scale: f64, v: &[f64]) {
    let row = map.entry(id).or_insert_with(|| vec![0.0; v.len()]);
    for (r, x) in row.iter_mut().zip(v) {
        *r += scale * x;
    }
}

/// Sparse gradients of every model parameter touched by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub attn: Vec<f64>,
    pub query_trigram: SparseGrad,
    pub query_word: SparseGrad,
    pub category: SparseGrad,
}

impl Gradients {
    fn new(dim: usize) -> Self {
        Gradients {
            attn: vec![0.0; dim],
            ..Default::default()
        }
    }

    /// Gradient of one parameter; zero for rows the pass never reached.
    pub fn get(&self, p: Param) -> f64 {
        let row = |m: &SparseGrad, r: u32, c: usize| m.get(&r).map_or(0.0, |v| v[c]);
        match p {
            Param::Attn(c) => self.attn[c],
            Param::QueryTrigram(r, c) => row(&self.query_trigram, r, c),
            Param::QueryWord(r, c) => row(&self.query_word, r, c),
            Param::Category(r, c) => row(&self.category, r, c),
        }
    }
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Unit category vectors (row-major) with the pre-normalization norms.
struct CategoryForward {
    unit: Vec<f64>,
    norms: Vec<f64>,
}

fn category_forward(table: &EmbeddingTable, ids: &[Vec<u32>]) -> CategoryForward {
    let dim = table.dim();
    let mut unit = Vec::with_capacity(ids.len() * dim);
    let mut norms = Vec::with_capacity(ids.len());
    for bag in ids {
        let mut v = table.mean_pool(bag);
        let n = l2_norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        unit.extend(v);
        norms.push(n);
    }
    CategoryForward { unit, norms }
}

/// Back through `y = x / |x|`: `(dy - y (y . dy)) / |x|`.
fn normalize_backward(y: &[f64], dy: &[f64], norm: f64) -> Vec<f64> {
    let proj = dot(y, dy);
    y.iter().zip(dy).map(|(yi, di)| (di - yi * proj) / norm).collect()
}

/// Scatters the gradient of a mean-pooled vector onto its rows.
fn pool_backward(map: &mut SparseGrad, ids: &[u32], d_mean: &[f64]) {
    if ids.is_empty() {
        return;
    }
    let share = 1.0 / ids.len() as f64;
    for &id in ids {
        add_row(map, id, share, d_mean);
    }
}

/// Backprop of `dL/dq` (q = unit query vector) into the query tower.
fn query_backward(model: &DualEncoderModel, f: &QueryForward, dq: &[f64], grads: &mut Gradients) {
    let du = normalize_backward(&f.vector, dq, f.norm);
    let [bt, bw] = f.channel_weights;
    let d_bt = dot(&du, &f.trigram_mean);
    let d_bw = dot(&du, &f.word_mean);
    let avg = bt * d_bt + bw * d_bw;
    let ds_t = bt * (d_bt - avg);
    let ds_w = bw * (d_bw - avg);
    let attn = &model.query.fusion.attn;
    for c in 0..du.len() {
        grads.attn[c] += ds_t * f.trigram_mean[c] + ds_w * f.word_mean[c];
    }
    let dt: Vec<f64> = du.iter().zip(attn).map(|(d, &a)| bt * d + ds_t * f64::from(a)).collect();
    let dw: Vec<f64> = du.iter().zip(attn).map(|(d, &a)| bw * d + ds_w * f64::from(a)).collect();
    pool_backward(&mut grads.query_trigram, &f.trigram_ids, &dt);
    pool_backward(&mut grads.query_word, &f.word_ids, &dw);
}

/// A training example ready for the forward pass.
#[derive(Debug, Clone)]
struct Example {
    query: String,
    target: usize,
}

/// Mean loss and gradients of a batch. Degenerate queries are skipped and
/// counted; returns `None` when nothing in the batch is usable.
fn batch_loss_and_grads(
    model: &DualEncoderModel,
    category_ids: &[Vec<u32>],
    batch: &[&Example],
    with_grads: bool,
) -> Option<(f64, Gradients, usize)> {
    let dim = model.dim();
    let scale = model.config.logit_scale;
    let n_cat = category_ids.len();
    let cats = category_forward(&model.category.table, category_ids);
    let forwards: Vec<(QueryForward, usize)> = batch
        .iter()
        .map(|e| (model.query.forward_normalized(&e.query, &model.config.features), e.target))
        .filter(|(f, _)| !f.degenerate)
        .collect();
    let skipped = batch.len() - forwards.len();
    if forwards.is_empty() {
        return None;
    }
    let inv_b = 1.0 / forwards.len() as f64;
    let mut grads = Gradients::new(dim);
    let mut d_cat = vec![0.0; n_cat * dim];
    let mut loss = 0.0;
    let mut probs = vec![0.0; n_cat];
    for (f, target) in &forwards {
        for (c, p) in probs.iter_mut().enumerate() {
            *p = scale * dot(&f.vector, &cats.unit[c * dim..(c + 1) * dim]);
        }
        loss += cross_entropy(&probs, *target) * inv_b;
        if !with_grads {
            continue;
        }
        softmax_in_place(&mut probs);
        probs[*target] -= 1.0;
        let mut dq = vec![0.0; dim];
        for (c, &g) in probs.iter().enumerate() {
            let k = &cats.unit[c * dim..(c + 1) * dim];
            let gs = g * scale * inv_b;
            let dk = &mut d_cat[c * dim..(c + 1) * dim];
            for i in 0..dim {
                dq[i] += gs * k[i];
                dk[i] += gs * f.vector[i];
            }
        }
        query_backward(model, f, &dq, &mut grads);
    }
    if with_grads {
        for (c, ids) in category_ids.iter().enumerate() {
            let k = &cats.unit[c * dim..(c + 1) * dim];
            let de = normalize_backward(k, &d_cat[c * dim..(c + 1) * dim], cats.norms[c]);
            pool_backward(&mut grads.category, ids, &de);
        }
    }
    Some((loss, grads, skipped))
}

/// Scaled cosine logits of a query against every node.
pub fn logits(model: &DualEncoderModel, taxonomy: &Taxonomy, query: &str) -> Vec<f64> {
    let q = model.encode_query(query);
    let ids = category_feature_ids(taxonomy, &model.config.features);
    let cats = category_forward(&model.category.table, &ids);
    let dim = model.dim();
    (0..ids.len())
        .map(|c| model.config.logit_scale * dot(&q.vector, &cats.unit[c * dim..(c + 1) * dim]))
        .collect()
}

/// Cross-entropy of one `(query, target)` pair over all taxonomy nodes, with
/// gradients for every parameter the forward pass reached.
pub fn categorization_loss(
    model: &DualEncoderModel,
    taxonomy: &Taxonomy,
    query: &str,
    target: NodeId,
) -> Result<(f64, Gradients), TrainError> {
    model.check_taxonomy(taxonomy)?;
    let target = taxonomy.index_of(target).ok_or(ModelError::UnknownNode(target))?;
    let ex = Example {
        query: normalize(query),
        target,
    };
    let ids = category_feature_ids(taxonomy, &model.config.features);
    batch_loss_and_grads(model, &ids, &[&ex], true)
        .map(|(l, g, _)| (l, g))
        .ok_or_else(|| TrainError::DegenerateQuery(query.to_string()))
}

/// SGD with momentum on sparse tables: `v = mu v + g; w -= lr v`. Rows with
/// live velocity keep moving even in steps where they get no gradient.
#[derive(Debug, Clone, Default)]
struct SparseMomentum {
    velocity: HashMap<u32, Vec<f64>>,
}

impl SparseMomentum {
    fn step(&mut self, table: &mut EmbeddingTable, grads: &SparseGrad, lr: f64, mu: f64) {
        for (id, v) in self.velocity.iter_mut() {
            let g = grads.get(id);
            for (c, vc) in v.iter_mut().enumerate() {
                *vc = mu * *vc + g.map_or(0.0, |g| g[c]);
            }
        }
        for (id, g) in grads {
            self.velocity.entry(*id).or_insert_with(|| g.clone());
        }
        for (id, v) in &self.velocity {
            let row = table.row_mut(*id);
            for (w, vc) in row.iter_mut().zip(v) {
                *w = (f64::from(*w) - lr * vc) as f32;
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Optimizer {
    lr: f64,
    mu: f64,
    attn: Vec<f64>,
    trigram: SparseMomentum,
    word: SparseMomentum,
    category: SparseMomentum,
}

impl Optimizer {
    fn new(config: &TrainConfig, dim: usize) -> Self {
        Optimizer {
            lr: config.learning_rate,
            mu: config.momentum,
            attn: vec![0.0; dim],
            ..Default::default()
        }
    }

    fn step_query(&mut self, model: &mut DualEncoderModel, g: &Gradients) {
        for ((w, v), gi) in model.query.fusion.attn.iter_mut().zip(&mut self.attn).zip(&g.attn) {
            *v = self.mu * *v + gi;
            *w = (f64::from(*w) - self.lr * *v) as f32;
        }
        self.trigram.step(&mut model.query.trigram, &g.query_trigram, self.lr, self.mu);
        self.word.step(&mut model.query.word, &g.query_word, self.lr, self.mu);
    }

    fn step(&mut self, model: &mut DualEncoderModel, g: &Gradients) {
        self.step_query(model, g);
        self.category.step(&mut model.category.table, &g.category, self.lr, self.mu);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub loss_curve: Vec<f64>,
    pub skipped_degenerate: usize,
    pub steps: usize,
}

/// Trains the categorizer on weighted pairs. Each epoch draws as many
/// examples as there are pairs, with probability proportional to pair weight;
/// the target is the terminal node of the pair's path.
pub fn train_categorizer(
    model: &mut DualEncoderModel,
    pairs: &[TrainingPair],
    taxonomy: &Taxonomy,
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    model.check_taxonomy(taxonomy)?;
    let mut skipped = 0;
    let mut examples = Vec::new();
    let mut weights = Vec::new();
    for p in pairs {
        let query = normalize(&p.query);
        if query.is_empty() {
            skipped += 1;
            continue;
        }
        let target = taxonomy
            .index_of(p.path.terminal())
            .ok_or(ModelError::UnknownNode(p.path.terminal()))?;
        examples.push(Example { query, target });
        weights.push(p.weight as f64);
    }
    if examples.is_empty() {
        return Err(TrainError::NoUsablePairs { skipped });
    }
    let sampler = WeightedIndex::new(&weights).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let category_ids = category_feature_ids(taxonomy, &model.config.features);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config, model.dim());
    let mut curve = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    for epoch in 0..config.epochs {
        let draws: Vec<usize> = (0..examples.len()).map(|_| sampler.sample(&mut rng)).collect();
        let mut total = 0.0;
        for chunk in draws.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            if let Some((loss, grads, _)) = batch_loss_and_grads(model, &category_ids, &batch, true) {
                total += loss * batch.len() as f64;
                opt.step(model, &grads);
                steps += 1;
            }
        }
        let mean = total / draws.len() as f64;
        log::info!("epoch {} loss {:.6}", epoch + 1, mean);
        curve.push(mean);
    }
    Ok(TrainReport {
        loss_curve: curve,
        skipped_degenerate: skipped,
        steps,
    })
}

/// Fraction of examples whose argmax node is the pair's terminal node.
pub fn training_accuracy(model: &DualEncoderModel, pairs: &[TrainingPair], taxonomy: &Taxonomy) -> f64 {
    let table = model.category_table(taxonomy);
    let hits = pairs
        .iter()
        .filter(|p| {
            let s = table.scores(&model.encode_query(&p.query).vector);
            let best = (0..s.values().len())
                .max_by(|&a, &b| s.values()[a].total_cmp(&s.values()[b]).then(b.cmp(&a)))
                .unwrap();
            taxonomy.node(best).id == p.path.terminal()
        })
        .count();
    hits as f64 / pairs.len() as f64
}

/// `epoch,loss` CSV with a header row; epochs are 1-based.
pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i + 1, l));
    }
    s
}

/// Engaged `<query, product text>` pair; both sides normalized and non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PretrainPair {
    query: String,
    product: String,
}

impl PretrainPair {
    pub fn new(query: &str, product: &str) -> Option<Self> {
        let (query, product) = (normalize(query), normalize(product));
        (!query.is_empty() && !product.is_empty()).then_some(PretrainPair { query, product })
    }

    pub fn query(&self) -> &str {
        &self.query
    }

    pub fn product(&self) -> &str {
        &self.product
    }
}

/// `query<TAB>product_text` lines.
pub fn read_pretrain_pairs(reader: impl BufRead) -> Result<Vec<PretrainPair>, TrainError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (q, p) = line.split_once('\t').ok_or(TrainError::Parse {
            line: i + 1,
            reason: "expected query<TAB>product_text".into(),
        })?;
        out.push(PretrainPair::new(q, p).ok_or(TrainError::Parse {
            line: i + 1,
            reason: "empty query or product text".into(),
        })?);
    }
    Ok(out)
}

pub fn write_pretrain_pairs(pairs: &[PretrainPair], mut out: impl Write) -> std::io::Result<()> {
    for p in pairs {
        writeln!(out, "{}\t{}", p.query, p.product)?;
    }
    Ok(())
}

/// Loss and gradients of one in-batch retrieval batch: row `i` of the
/// query/product cosine matrix is softmaxed and the diagonal is the target.
/// Returns `(loss, query-tower grads, product-table grads)`.
fn pretrain_batch(
    model: &DualEncoderModel,
    product_table: &EmbeddingTable,
    batch: &[&PretrainPair],
) -> Option<(f64, Gradients, SparseGrad)> {
    let dim = model.dim();
    let scale = model.config.logit_scale;
    let feats = &model.config.features;
    let rows: Vec<(QueryForward, Vec<u32>)> = batch
        .iter()
        .map(|p| {
            (
                model.query.forward_normalized(&p.query, feats),
                trigram_features(&p.product, feats).ids,
            )
        })
        .filter(|(f, ids)| !f.degenerate && !ids.is_empty())
        .collect();
    if rows.len() < 2 {
        return None;
    }
    let b = rows.len();
    let prod_ids: Vec<Vec<u32>> = rows.iter().map(|(_, ids)| ids.clone()).collect();
    let prods = category_forward(product_table, &prod_ids);
    let inv_b = 1.0 / b as f64;
    let mut grads = Gradients::new(dim);
    let mut d_prod = vec![0.0; b * dim];
    let mut loss = 0.0;
    let mut row = vec![0.0; b];
    for (i, (f, _)) in rows.iter().enumerate() {
        for (j, r) in row.iter_mut().enumerate() {
            *r = scale * dot(&f.vector, &prods.unit[j * dim..(j + 1) * dim]);
        }
        loss += cross_entropy(&row, i) * inv_b;
        softmax_in_place(&mut row);
        row[i] -= 1.0;
        let mut dq = vec![0.0; dim];
        for (j, &g) in row.iter().enumerate() {
            let gs = g * scale * inv_b;
            let p = &prods.unit[j * dim..(j + 1) * dim];
            let dp = &mut d_prod[j * dim..(j + 1) * dim];
            for k in 0..dim {
                dq[k] += gs * p[k];
                dp[k] += gs * f.vector[k];
            }
        }
        query_backward(model, f, &dq, &mut grads);
    }
    let mut prod_grads = SparseGrad::new();
    for (j, ids) in prod_ids.iter().enumerate() {
        let p = &prods.unit[j * dim..(j + 1) * dim];
        let de = normalize_backward(p, &d_prod[j * dim..(j + 1) * dim], prods.norms[j]);
        pool_backward(&mut prod_grads, ids, &de);
    }
    Some((loss, grads, prod_grads))
}

/// Fresh product-side tower used only during pre-training.
fn product_tower(model: &DualEncoderModel, seed: u64) -> EmbeddingTable {
    EmbeddingTable::new(
        model.config.features.trigram_buckets,
        model.dim(),
        splitmix64(seed ^ 0x7072_6f64),
    )
}

/// In-batch retrieval loss of a batch at the model's current parameters,
/// with a freshly seeded product tower.
pub fn pretrain_loss(model: &DualEncoderModel, batch: &[PretrainPair], seed: u64) -> Result<f64, TrainError> {
    if batch.len() < 2 {
        return Err(TrainError::BatchTooSmall(batch.len()));
    }
    let table = product_tower(model, seed);
    let refs: Vec<&PretrainPair> = batch.iter().collect();
    pretrain_batch(model, &table, &refs)
        .map(|(l, _, _)| l)
        .ok_or(TrainError::BatchTooSmall(batch.len()))
}

/// Pre-trains the query tower on engaged query/product pairs with in-batch
/// negatives. The product tower is discarded afterwards; only query-tower
/// and fusion parameters change in `model`.
pub fn pretrain_query_tower(
    model: &mut DualEncoderModel,
    pairs: &[PretrainPair],
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if config.batch_size < 2 {
        return Err(TrainError::BatchTooSmall(config.batch_size));
    }
    if pairs.len() < 2 {
        return Err(TrainError::NoUsablePairs { skipped: 0 });
    }
    let mut products = product_tower(model, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config, model.dim());
    let mut product_opt = SparseMomentum::default();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PretrainPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            if let Some((loss, grads, prod_grads)) = pretrain_batch(model, &products, &batch) {
                total += loss * batch.len() as f64;
                seen += batch.len();
                opt.step_query(model, &grads);
                product_opt.step(&mut products, &prod_grads, config.learning_rate, config.momentum);
                steps += 1;
            }
        }
        let mean = if seen > 0 { total / seen as f64 } else { 0.0 };
        log::info!("pretrain epoch {} loss {:.6}", epoch + 1, mean);
        curve.push(mean);
    }
    Ok(TrainReport {
        loss_curve: curve,
        skipped_degenerate: 0,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub param: Param,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub probes: Vec<ProbeResult>,
}

/// `|a - n| / max(|a|, |n|)`, zero when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-12 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compares analytic gradients of the mean batch loss with central
/// differences on `n_probes` parameters, cycling through the fusion vector,
/// both query channels and the category tower. Parameters are `f32`, so the
/// step actually taken (after rounding) is used as the denominator.
pub fn grad_check(
    model: &DualEncoderModel,
    taxonomy: &Taxonomy,
    examples: &[(String, NodeId)],
    n_probes: usize,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    model.check_taxonomy(taxonomy)?;
    let exs: Vec<Example> = examples
        .iter()
        .map(|(q, t)| {
            Ok(Example {
                query: normalize(q),
                target: taxonomy.index_of(*t).ok_or(ModelError::UnknownNode(*t))?,
            })
        })
        .collect::<Result<_, TrainError>>()?;
    let refs: Vec<&Example> = exs.iter().collect();
    let category_ids = category_feature_ids(taxonomy, &model.config.features);
    let (_, grads, _) = batch_loss_and_grads(model, &category_ids, &refs, true)
        .ok_or(TrainError::NoUsablePairs { skipped: exs.len() })?;

    let mut candidates: [Vec<u32>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for e in &exs {
        let f = model.query.forward_normalized(&e.query, &model.config.features);
        candidates[0].extend(&f.trigram_ids);
        candidates[1].extend(&f.word_ids);
    }
    for ids in &category_ids {
        candidates[2].extend(ids);
    }
    let dim = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(n_probes);
    let mut scratch = model.clone();
    for k in 0..n_probes {
        let col = rng.gen_range(0..dim);
        let param = match k % 4 {
            0 => Param::Attn(col),
            1 => Param::QueryTrigram(*candidates[0].choose(&mut rng).unwrap(), col),
            2 => Param::QueryWord(*candidates[1].choose(&mut rng).unwrap(), col),
            _ => Param::Category(*candidates[2].choose(&mut rng).unwrap(), col),
        };
        let original = get_param(&scratch, param);
        let plus = (f64::from(original) + epsilon) as f32;
        let minus = (f64::from(original) - epsilon) as f32;
        let mut eval = |v: f32| {
            set_param(&mut scratch, param, v);
            batch_loss_and_grads(&scratch, &category_ids, &refs, false).unwrap().0
        };
        let (lp, lm) = (eval(plus), eval(minus));
        set_param(&mut scratch, param, original);
        let numeric = (lp - lm) / (f64::from(plus) - f64::from(minus));
        let analytic = grads.get(param);
        probes.push(ProbeResult {
            param,
            analytic,
            numeric,
            relative_error: relative_error(analytic, numeric),
        });
    }
    Ok(GradCheckReport {
        max_relative_error: probes.iter().map(|p| p.relative_error).fold(0.0, f64::max),
        probes,
    })
}
