//! Popularity-bias diagnosis and mitigation for sequential recommenders.
//!
//! The pipeline, end to end:
//!
//! 1. [`data`] — ingest an interaction log, k-core filter it, split it
//!    leave-one-out, and partition the catalog into head/tail items.
//! 2. [`encoder`] — train a small causal self-attention next-item model;
//!    its final-position hidden state is the user embedding.
//! 3. [`sae`] — train a TopK sparse autoencoder on those embeddings.
//! 4. [`synth`] — generate extreme-preference synthetic profiles over the
//!    head and tail item sets.
//! 5. [`neurons`] — record per-neuron activation statistics under both
//!    synthetic populations and score each neuron's popularity alignment
//!    with Cohen's d.
//! 6. [`steer`] — suppress popularity-aligned neurons and boost
//!    tail-aligned ones inside the autoencoder's hidden layer, then decode
//!    steered user embeddings and re-rank.
//! 7. [`metrics`] / [`baselines`] — measure the accuracy–fairness
//!    trade-off (nDCG, Item Coverage, Gini) against reference methods.
//!
//! The `popsteer` CLI drives the same steps from the command line; the
//! book under `book/` walks through each stage with runnable snippets.

pub mod baselines;
pub mod corpus;
pub mod data;
pub mod emit;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod metrics;
pub mod neurons;
pub mod opt;
pub mod rng;
pub mod sae;
pub mod steer;
pub mod synth;

pub use error::{Error, ErrorClass, Result};

#[cfg(doctest)]
mod book {
    //! Keeps the book's code blocks compiling; `cargo test --doc` runs them.
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data-pipeline.md")]
    mod data_pipeline {}
    #[doc = include_str!("../../../book/src/sequence-encoder.md")]
    mod sequence_encoder {}
    #[doc = include_str!("../../../book/src/sparse-autoencoder.md")]
    mod sparse_autoencoder {}
    #[doc = include_str!("../../../book/src/synthetic-profiles.md")]
    mod synthetic_profiles {}
    #[doc = include_str!("../../../book/src/neuron-diagnostics.md")]
    mod neuron_diagnostics {}
    #[doc = include_str!("../../../book/src/steering.md")]
    mod steering {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics_ch {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines_ch {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli_ch {}
}
