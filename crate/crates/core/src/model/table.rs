//! Hashed embedding tables with procedurally initialized rows.
//!
//! A table logically holds `rows × dim` parameters. Rows that were never
//! written are derived on demand from the table seed, so a table with a
//! million buckets costs memory only for the rows training actually touched.

use std::collections::HashMap;

use crate::hash::{splitmix64, unit_interval};

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    rows: u32,
    dim: usize,
    seed: u64,
    stored: HashMap<u32, Box<[f32]>>,
}

impl EmbeddingTable {
    pub fn new(rows: u32, dim: usize, seed: u64) -> Self {
        assert!(rows > 0 && dim > 0, "empty embedding table");
        EmbeddingTable {
            rows,
            dim,
            seed,
            stored: HashMap::new(),
        }
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Initial value of a parameter: uniform in `[-1/sqrt(dim), 1/sqrt(dim)]`.
    pub fn init_value(&self, row: u32, col: usize) -> f32 {
        init_value(self.seed, self.dim, row, col)
    }

    pub fn get(&self, row: u32, col: usize) -> f32 {
        match self.stored.get(&row) {
            Some(r) => r[col],
            None => self.init_value(row, col),
        }
    }

    pub fn set(&mut self, row: u32, col: usize, value: f32) {
        self.row_mut(row)[col] = value;
    }

    /// Adds `scale * row` into `acc`.
    pub fn accumulate_row(&self, row: u32, scale: f64, acc: &mut [f64]) {
        debug_assert!(row < self.rows);
        match self.stored.get(&row) {
            Some(r) => {
                for (a, &v) in acc.iter_mut().zip(r.iter()) {
                    *a += scale * f64::from(v);
                }
            }
            None => {
                for (col, a) in acc.iter_mut().enumerate() {
                    *a += scale * f64::from(self.init_value(row, col));
                }
            }
        }
    }

    /// Mean of the rows named by `ids` (with multiplicity). Empty bag pools to zero.
    pub fn mean_pool(&self, ids: &[u32]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        if ids.is_empty() {
            return acc;
        }
        for &id in ids {
            self.accumulate_row(id, 1.0, &mut acc);
        }
        let n = ids.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Mutable access to a row, materializing it from its initial values.
    pub fn row_mut(&mut self, row: u32) -> &mut [f32] {
        assert!(row < self.rows, "row {row} out of range {}", self.rows);
        let (seed, dim) = (self.seed, self.dim);
        self.stored
            .entry(row)
            .or_insert_with(|| (0..dim).map(|c| init_value(seed, dim, row, c)).collect())
    }

    /// Row ids that hold explicitly stored values, ascending.
    pub fn stored_rows(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.stored.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn stored_row(&self, row: u32) -> Option<&[f32]> {
        self.stored.get(&row).map(|r| &r[..])
    }

    pub(crate) fn insert_row(&mut self, row: u32, values: Box<[f32]>) {
        debug_assert_eq!(values.len(), self.dim);
        self.stored.insert(row, values);
    }
}

/// Logical equality: two tables are equal when every parameter is, whether
/// or not the row happens to be stored explicitly.
impl PartialEq for EmbeddingTable {
    fn eq(&self, other: &Self) -> bool {
        if (self.rows, self.dim, self.seed) != (other.rows, other.dim, other.seed) {
            return false;
        }
        let same = |a: &Self, b: &Self| {
            a.stored
                .iter()
                .all(|(&row, vals)| vals.iter().enumerate().all(|(c, &v)| b.get(row, c) == v))
        };
        same(self, other) && same(other, self)
    }
}

fn init_value(seed: u64, dim: usize, row: u32, col: usize) -> f32 {
    let bound = 1.0 / (dim as f64).sqrt();
    let key = (u64::from(row) << 20) ^ col as u64;
    let u = unit_interval(splitmix64(seed ^ splitmix64(key)));
    ((2.0 * u - 1.0) * bound) as f32
}
