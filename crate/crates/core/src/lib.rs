//! Locally linear extrapolation for multi-objective reinforcement learning.
//!
//! The crate trains a handful of scalarized base policies with PPO, retrains
//! each briefly under a nearby preference to get parameter-space directions,
//! walks those directions without further training to generate candidate
//! policies, keeps the non-dominated ones, and fine-tunes them under their
//! matched preference weights. Fronts are scored by hypervolume, expected
//! utility and sparsity.
//!
//! Module map:
//!
//! - [`momdp`]: vector-reward environments and linear scalarization
//! - [`policy`]: Gaussian MLP policies flattened to a single parameter vector
//! - [`ppo`]: clipped-surrogate PPO with hand-written gradients
//! - [`pareto`]: dominance, non-dominated filtering and front metrics
//! - [`distance`]: Hungarian matching distance between networks
//! - [`lle`]: the five-stage extrapolation pipeline
//! - [`synth`]: closed-form objective landscapes for checking the error order
//! - [`io`]: run-directory artifacts (policy archives, tables, config, SVG)

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distance;
pub mod error;
pub mod exec;
pub mod io;
pub mod lle;
pub mod momdp;
pub mod pareto;
pub mod policy;
pub mod ppo;
pub mod synth;

pub use error::{Error, Result};
pub use exec::{derive_seed, Execution};
