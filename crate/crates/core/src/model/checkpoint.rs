//! Checkpoint encoding.
//!
//! Layout: the 8-byte magic `HIERCAT1`, a compact JSON header terminated by
//! `\n`, then little-endian `f32` parameter rows, row-major, in the block
//! order declared by the header. Sparse tables list the ids of their stored
//! rows in the header; unlisted rows keep their seeded initial values.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AttentionFusion, CategoryTower, DualEncoderModel, EmbeddingTable, ModelConfig, QueryTower};
use crate::features::FeatureConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HIERCAT1";
const FORMAT: &str = "hiercat-checkpoint";

#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported checkpoint version (magic {0:?})")]
    Version(String),
    #[error("checkpoint truncated: expected {expected} parameter bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("header declares dim {header} but parameter rows have dim {found}")]
    DimensionMismatch { header: usize, found: usize },
    #[error("malformed header: {0}")]
    Header(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    dim: usize,
    trigram_buckets: u32,
    word_buckets: u32,
    hash_seed: u64,
    boundary_markers: bool,
    init_seed: u64,
    logit_scale: f64,
    taxonomy_fingerprint: String,
    blocks: Vec<BlockHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    /// Logical row count of the block.
    rows: u32,
    /// Seed of procedurally initialized rows; absent for dense blocks.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    seed: Option<u64>,
    /// Ids of rows present in the body; absent for dense blocks.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    stored_rows: Option<Vec<u32>>,
}

const BLOCK_ORDER: [&str; 4] = ["fusion.attn", "query.trigram", "query.word", "category.trigram"];

impl BlockHeader {
    fn body_rows(&self) -> usize {
        match &self.stored_rows {
            Some(ids) => ids.len(),
            None => self.rows as usize,
        }
    }
}

pub(super) fn to_bytes(model: &DualEncoderModel) -> Vec<u8> {
    let sparse = |name: &str, t: &EmbeddingTable| BlockHeader {
        name: name.to_string(),
        rows: t.rows(),
        seed: Some(t.seed()),
        stored_rows: Some(t.stored_rows()),
    };
    let blocks = vec![
        BlockHeader {
            name: BLOCK_ORDER[0].into(),
            rows: 1,
            seed: None,
            stored_rows: None,
        },
        sparse(BLOCK_ORDER[1], &model.query.trigram),
        sparse(BLOCK_ORDER[2], &model.query.word),
        sparse(BLOCK_ORDER[3], &model.category.table),
    ];
    let c = &model.config;
    let header = Header {
        format: FORMAT.into(),
        dim: c.dim,
        trigram_buckets: c.features.trigram_buckets,
        word_buckets: c.features.word_buckets,
        hash_seed: c.features.hash_seed,
        boundary_markers: c.features.boundary_markers,
        init_seed: c.init_seed,
        logit_scale: c.logit_scale,
        taxonomy_fingerprint: format!("{:016x}", model.taxonomy_fingerprint),
        blocks,
    };

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
    out.push(b'\n');
    let put = |out: &mut Vec<u8>, values: &[f32]| {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    put(&mut out, &model.query.fusion.attn);
    for (block, table) in header.blocks[1..]
        .iter()
        .zip([&model.query.trigram, &model.query.word, &model.category.table])
    {
        for &row in block.stored_rows.as_deref().unwrap_or(&[]) {
            put(&mut out, table.stored_row(row).expect("listed row is stored"));
        }
    }
    out
}

impl DualEncoderModel {
    pub fn save_checkpoint(&self, mut sink: impl Write) -> Result<(), CheckpointError> {
        sink.write_all(&to_bytes(self))?;
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        to_bytes(self)
    }

    pub fn save_checkpoint_file(&self, path: impl AsRef<std::path::Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, to_bytes(self))?;
        Ok(())
    }

    pub fn load_checkpoint(mut source: impl Read) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn load_checkpoint_file(path: impl AsRef<std::path::Path>) -> Result<Self, CheckpointError> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < CHECKPOINT_MAGIC.len() {
            return Err(CheckpointError::Truncated {
                expected: CHECKPOINT_MAGIC.len(),
                found: bytes.len(),
            });
        }
        let (magic, rest) = bytes.split_at(CHECKPOINT_MAGIC.len());
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Version(String::from_utf8_lossy(magic).into_owned()));
        }
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Header("missing header terminator".into()))?;
        let header: Header = serde_json::from_slice(&rest[..nl])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let body = &rest[nl + 1..];
        validate_header(&header)?;

        let dim = header.dim;
        let total_rows: usize = header.blocks.iter().map(BlockHeader::body_rows).sum();
        let expected = total_rows * dim * 4;
        if body.len() != expected {
            if total_rows > 0 && body.len() % (total_rows * 4) == 0 {
                return Err(CheckpointError::DimensionMismatch {
                    header: dim,
                    found: body.len() / (total_rows * 4),
                });
            }
            if body.len() < expected {
                return Err(CheckpointError::Truncated {
                    expected,
                    found: body.len(),
                });
            }
            return Err(CheckpointError::TrailingBytes(body.len() - expected));
        }

        let mut floats = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut take_row = || -> Box<[f32]> { floats.by_ref().take(dim).collect() };

        let attn = take_row().into_vec();
        let mut tables = Vec::with_capacity(3);
        for block in &header.blocks[1..] {
            let mut table = EmbeddingTable::new(block.rows, dim, block.seed.unwrap_or_default());
            for &row in block.stored_rows.as_deref().unwrap_or(&[]) {
                table.insert_row(row, take_row());
            }
            tables.push(table);
        }
        let category = tables.pop().expect("three tables");
        let word = tables.pop().expect("three tables");
        let trigram = tables.pop().expect("three tables");

        let fingerprint = u64::from_str_radix(&header.taxonomy_fingerprint, 16)
            .map_err(|e| CheckpointError::Header(format!("taxonomy_fingerprint: {e}")))?;
        Ok(DualEncoderModel {
            config: ModelConfig {
                dim,
                features: FeatureConfig {
                    trigram_buckets: header.trigram_buckets,
                    word_buckets: header.word_buckets,
                    hash_seed: header.hash_seed,
                    boundary_markers: header.boundary_markers,
                },
                logit_scale: header.logit_scale,
                init_seed: header.init_seed,
            },
            query: QueryTower {
                trigram,
                word,
                fusion: AttentionFusion { attn },
            },
            category: CategoryTower { table: category },
            taxonomy_fingerprint: fingerprint,
        })
    }
}

fn validate_header(h: &Header) -> Result<(), CheckpointError> {
    let bad = |m: String| Err(CheckpointError::Header(m));
    if h.format != FORMAT {
        return bad(format!("unknown format {:?}", h.format));
    }
    if h.dim == 0 || h.trigram_buckets == 0 || h.word_buckets == 0 {
        return bad("dimensions and bucket counts must be positive".into());
    }
    if !(h.logit_scale.is_finite() && h.logit_scale > 0.0) {
        return bad("logit_scale must be positive".into());
    }
    let names: Vec<&str> = h.blocks.iter().map(|b| b.name.as_str()).collect();
    if names != BLOCK_ORDER {
        return bad(format!("unexpected block list {names:?}"));
    }
    let expected_rows = [1, h.trigram_buckets, h.word_buckets, h.trigram_buckets];
    for (block, rows) in h.blocks.iter().zip(expected_rows) {
        if block.rows != rows {
            return bad(format!("block {} has {} rows, expected {rows}", block.name, block.rows));
        }
        if let Some(ids) = &block.stored_rows {
            if ids.windows(2).any(|w| w[0] >= w[1]) || ids.last().is_some_and(|&r| r >= rows) {
                return bad(format!("block {} stored rows unsorted or out of range", block.name));
            }
        }
    }
    if h.blocks[0].stored_rows.is_some() || h.blocks[1..].iter().any(|b| b.stored_rows.is_none()) {
        return bad("block storage kinds do not match layout".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::Taxonomy;

    fn model() -> DualEncoderModel {
        let tax = Taxonomy::from_tsv("1\t\tHome\n2\t1\tSofa\n").unwrap();
        let cfg = ModelConfig {
            dim: 8,
            features: FeatureConfig {
                trigram_buckets: 300,
                word_buckets: 50,
                hash_seed: 5,
                boundary_markers: true,
            },
            logit_scale: 16.0,
            init_seed: 2,
        };
        let mut m = DualEncoderModel::new(cfg, &tax);
        m.query.trigram.row_mut(17)[3] = 0.125;
        m.query.word.row_mut(4);
        m.category.table.row_mut(299)[0] = -1.5;
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = m.to_checkpoint_bytes();
        let back = DualEncoderModel::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_checkpoint_bytes(), bytes);
    }

    #[test]
    fn fresh_model_round_trip() {
        let tax = Taxonomy::from_tsv("1\t\tHome\n").unwrap();
        let m = DualEncoderModel::new(ModelConfig::default(), &tax);
        let back = DualEncoderModel::from_checkpoint_bytes(&m.to_checkpoint_bytes()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn corrupt_magic_is_version_error() {
        let mut bytes = model().to_checkpoint_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            DualEncoderModel::from_checkpoint_bytes(&bytes),
            Err(CheckpointError::Version(_))
        ));
        let mut bytes = model().to_checkpoint_bytes();
        bytes[7] = b'2';
        assert!(matches!(
            DualEncoderModel::from_checkpoint_bytes(&bytes),
            Err(CheckpointError::Version(_))
        ));
    }

    #[test]
    fn truncated_body() {
        let bytes = model().to_checkpoint_bytes();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            DualEncoderModel::from_checkpoint_bytes(cut),
            Err(CheckpointError::Truncated { .. })
        ));
        assert!(matches!(
            DualEncoderModel::from_checkpoint_bytes(&bytes[..5]),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn header_dim_disagreeing_with_rows() {
        // Write rows of dim 4 under a header claiming dim 8.
        let bytes = model().to_checkpoint_bytes();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let body_len = bytes.len() - nl - 1;
        let mut half = bytes[..nl + 1].to_vec();
        half.extend(std::iter::repeat(0u8).take(body_len / 2));
        match DualEncoderModel::from_checkpoint_bytes(&half) {
            Err(CheckpointError::DimensionMismatch { header: 8, found: 4 }) => {}
            other => panic!("expected dimension mismatch, got {other:?}"),
        }
    }

    #[test]
    fn trailing_garbage() {
        let mut bytes = model().to_checkpoint_bytes();
        bytes.push(1);
        assert!(matches!(
            DualEncoderModel::from_checkpoint_bytes(&bytes),
            Err(CheckpointError::TrailingBytes(1))
        ));
    }
}
