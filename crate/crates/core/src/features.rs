//! Text normalization and hashed sparse features for embedding-bag encoders.

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::hash::fnv1a64;

const BOUNDARY_START: char = '^';
const BOUNDARY_END: char = '$';

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub trigram_buckets: u32,
    pub word_buckets: u32,
    pub hash_seed: u64,
    pub boundary_markers: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            trigram_buckets: 1_000_000,
            word_buckets: 250_000,
            hash_seed: 0,
            boundary_markers: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Trigram,
    Word,
}

/// Hashed feature ids of one channel, multiplicity preserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureBag {
    pub channel: Channel,
    pub ids: Vec<u32>,
}

impl FeatureBag {
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }
}

/// NFKC, lowercase, collapse whitespace runs to one space, trim.
pub fn normalize(text: &str) -> String {
    let folded: String = text.nfkc().flat_map(char::to_lowercase).collect();
    // Lowercasing can produce sequences that are no longer NFKC-stable.
    let folded: String = folded.nfkc().collect();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn bucket(seed: u64, gram: &str, buckets: u32) -> u32 {
    (fnv1a64(seed, gram.as_bytes()) % u64::from(buckets)) as u32
}

/// Character trigrams per whitespace token. With boundary markers each token
/// is wrapped as `^token$` first. Without markers, tokens shorter than three
/// characters are emitted whole.
pub fn trigram_features(text: &str, config: &FeatureConfig) -> FeatureBag {
    let mut ids = Vec::new();
    let mut gram = String::with_capacity(12);
    for word in text.split_whitespace() {
        let mut chars: Vec<char> = Vec::with_capacity(word.len() + 2);
        if config.boundary_markers {
            chars.push(BOUNDARY_START);
        }
        chars.extend(word.chars());
        if config.boundary_markers {
            chars.push(BOUNDARY_END);
        }
        if chars.len() < 3 {
            ids.push(bucket(config.hash_seed, word, config.trigram_buckets));
            continue;
        }
        for w in chars.windows(3) {
            gram.clear();
            gram.extend(w);
            ids.push(bucket(config.hash_seed, &gram, config.trigram_buckets));
        }
    }
    FeatureBag {
        channel: Channel::Trigram,
        ids,
    }
}

/// One hashed id per whitespace token.
pub fn word_features(text: &str, config: &FeatureConfig) -> FeatureBag {
    // Word ids hash with a seed distinct from the trigram channel.
    let seed = config.hash_seed ^ 0x776f_7264;
    FeatureBag {
        channel: Channel::Word,
        ids: text
            .split_whitespace()
            .map(|w| bucket(seed, w, config.word_buckets))
            .collect(),
    }
}
