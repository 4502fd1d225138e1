//! ESRL: efficient sampling-based reinforcement learning for small
//! sequence-generation models.
//!
//! The crate trains a small encoder-decoder transformer on synthetic
//! sequence tasks with a policy-gradient objective built around three ideas:
//!
//! 1. **Two-stage sampling** — candidates are drawn autoregressively with no
//!    gradient state, then scored teacher-forced in a single differentiable
//!    pass, so the retained computation graph covers one forward pass instead
//!    of one per decoding step.
//! 2. **Dynamic sampling** — a per-input capability score adjusts how many
//!    candidates each input gets and at what temperature, trimming
//!    exploration the model no longer needs.
//! 3. **Fused objective** — minimum-risk training over the candidate set when
//!    an input has more than one candidate, a log-derivative policy update
//!    when it has exactly one, with a FIFO reward queue supplying the
//!    baseline value.
//!
//! Everything is seeded through [`config::RunSeed`]; two runs with the same
//! config produce byte-identical reports.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod graph;
pub mod model;
pub mod report;
pub mod rewards;
pub mod rl_loss;
pub mod sampler;
pub mod scheduler;
pub mod taskgen;
pub mod trainer;

pub use config::{derive_seed, validate_config, CapabilityEstimator, EsrlConfig, RewardMetric, RunSeed};
pub use error::{Error, Result};
