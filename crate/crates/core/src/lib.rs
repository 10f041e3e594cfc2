//! Hierarchical query categorization.
//!
//! A dual-encoder model scores a query against every node of a category
//! taxonomy; hierarchical inference turns those scores into per-level
//! probabilities and beam search extracts ranked category paths. Weak labels
//! are mined from engagement logs, and a serving layer adds caching and
//! retrieval-term emission.

pub mod features;
pub mod hash;
pub mod infer;
pub mod model;
pub mod taxonomy;
pub mod train;
pub mod weak;
pub mod eval;
pub mod pipeline;
pub mod serving;
