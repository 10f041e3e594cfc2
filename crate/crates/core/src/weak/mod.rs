//! Weak supervision: turning engagement logs into weighted
//! `<query, category path>` training pairs.
//!
//! Records are grouped by normalized query and parsed path, counted, and
//! groups below a minimum frequency are dropped. A query may keep several
//! paths. Counting is done in a [`PairCounts`] accumulator whose merge is
//! plain addition, so shards can be mined independently and combined.

pub mod synthetic;

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::normalize;
use crate::taxonomy::{CategoryPath, Taxonomy};

#[derive(Error, Debug)]
pub enum WeakError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("min_frequency must be at least 1")]
    InvalidMinFrequency,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Seller,
    Model,
    Both,
}

/// One logged `<query, engaged product>` event, labeled with the product's category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngagementRecord {
    pub query: String,
    pub product_id: String,
    pub category_path: String,
    pub label_source: LabelSource,
    pub timestamp: i64,
}

/// Aggregated weak label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingPair {
    pub query: String,
    pub path: CategoryPath,
    pub weight: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SkipReport {
    /// Records whose category path did not resolve in the taxonomy.
    pub unparseable_path: usize,
    /// Records whose query normalized to the empty string.
    pub empty_query: usize,
    /// Log lines that were not valid records.
    pub malformed_line: usize,
}

impl SkipReport {
    pub fn total(&self) -> usize {
        self.unparseable_path + self.empty_query + self.malformed_line
    }

    fn merge(&mut self, other: &SkipReport) {
        self.unparseable_path += other.unparseable_path;
        self.empty_query += other.empty_query;
        self.malformed_line += other.malformed_line;
    }
}

/// Counts of `(normalized query, path)` groups.
#[derive(Debug, Clone, Default)]
pub struct PairCounts {
    counts: HashMap<(String, CategoryPath), u64>,
    pub skipped: SkipReport,
}

impl PairCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, record: &EngagementRecord, taxonomy: &Taxonomy) {
        let query = normalize(&record.query);
        if query.is_empty() {
            self.skipped.empty_query += 1;
            return;
        }
        match taxonomy.parse_path(&record.category_path) {
            Ok(path) => *self.counts.entry((query, path)).or_default() += 1,
            Err(_) => self.skipped.unparseable_path += 1,
        }
    }

    pub fn merge(&mut self, other: PairCounts) {
        for (k, v) in other.counts {
            *self.counts.entry(k).or_default() += v;
        }
        self.skipped.merge(&other.skipped);
    }

    /// Drops groups below `min_frequency` and orders by query, then path text.
    pub fn finish(self, taxonomy: &Taxonomy, min_frequency: u64) -> Result<MinedPairs, WeakError> {
        if min_frequency < 1 {
            return Err(WeakError::InvalidMinFrequency);
        }
        let mut keyed: Vec<(String, String, TrainingPair)> = self
            .counts
            .into_iter()
            .filter(|(_, w)| *w >= min_frequency)
            .map(|((query, path), weight)| {
                let text = taxonomy.render(&path);
                (query.clone(), text, TrainingPair { query, path, weight })
            })
            .collect();
        keyed.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
        Ok(MinedPairs {
            pairs: keyed.into_iter().map(|(_, _, p)| p).collect(),
            skipped: self.skipped,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinedPairs {
    pub pairs: Vec<TrainingPair>,
    pub skipped: SkipReport,
}

/// Aggregates records into frequency-filtered training pairs.
pub fn mine_pairs<'a>(
    records: impl IntoIterator<Item = &'a EngagementRecord>,
    taxonomy: &Taxonomy,
    min_frequency: u64,
) -> Result<MinedPairs, WeakError> {
    if min_frequency < 1 {
        return Err(WeakError::InvalidMinFrequency);
    }
    let mut counts = PairCounts::new();
    for r in records {
        counts.add(r, taxonomy);
    }
    counts.finish(taxonomy, min_frequency)
}

/// Mines a JSON-lines engagement log; malformed lines are counted and skipped.
pub fn mine_log(
    reader: impl BufRead,
    taxonomy: &Taxonomy,
    min_frequency: u64,
) -> Result<MinedPairs, WeakError> {
    if min_frequency < 1 {
        return Err(WeakError::InvalidMinFrequency);
    }
    let mut counts = PairCounts::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<EngagementRecord>(&line) {
            Ok(r) => counts.add(&r, taxonomy),
            Err(_) => counts.skipped.malformed_line += 1,
        }
    }
    counts.finish(taxonomy, min_frequency)
}

pub fn write_log(records: &[EngagementRecord], mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_log(reader: impl BufRead) -> Result<Vec<EngagementRecord>, WeakError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| WeakError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// `query<TAB>path_text<TAB>weight`, one pair per line.
pub fn write_pairs(pairs: &[TrainingPair], taxonomy: &Taxonomy, mut out: impl Write) -> std::io::Result<()> {
    for p in pairs {
        writeln!(out, "{}\t{}\t{}", p.query, taxonomy.render(&p.path), p.weight)?;
    }
    Ok(())
}

pub fn read_pairs(reader: impl BufRead, taxonomy: &Taxonomy) -> Result<Vec<TrainingPair>, WeakError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| WeakError::Parse { line: i + 1, reason };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        }
        let path = taxonomy.parse_path(fields[1]).map_err(|e| err(e.to_string()))?;
        let weight: u64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad weight {:?}", fields[2])))?;
        if weight == 0 {
            return Err(err("weight must be positive".into()));
        }
        out.push(TrainingPair {
            query: normalize(fields[0]),
            path,
            weight,
        });
    }
    Ok(out)
}
