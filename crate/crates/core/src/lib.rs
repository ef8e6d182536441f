//! Desk-scale marketplace retrieval: a two-tower ("pairnn") model over
//! product text, images, and user profiles, trained with a hinge ranking
//! loss on message/impression pairs, plus the surrounding pipeline
//! (synthetic data, word2vec pretraining, indexing, geo-filtered retrieval,
//! replay evaluation, serving).
//!
//! Everything is deterministic given a seed: same inputs, same bytes out.

pub mod catalog;
pub mod cli;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod index;
pub mod manifest;
pub mod retrieval;
pub mod server;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod towers;
pub mod training;
pub mod word2vec;

pub use error::{Error, Result};

/// Fixed-size rayon pool for the operations that may fan out (index build,
/// replay). Work is partitioned deterministically; worker count never
/// changes results.
pub(crate) fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig {
            msg: format!("worker pool: {e}"),
        })
}
