//! Chance-constrained reinforcement learning for uncertain dynamic systems.
//!
//! The crate trains stochastic feedback policies by policy gradient while
//! tightening state constraints with iteratively tuned backoffs, until a
//! joint chance constraint holds with a prescribed confidence. The pieces:
//!
//! - [`stats`]: empirical CDFs and beta-distribution confidence bounds that
//!   turn Monte Carlo constraint samples into a probabilistic guarantee.
//! - [`dynamics`]: fixed-step RK4 integration and the uncertain-transition
//!   contract implemented by environments.
//! - [`bioreactor`]: the fed-batch photo-production case study (Monod
//!   kinetics, parametric uncertainty, path constraints).
//! - [`policy`]: a memory-window Gaussian policy network with exact manual
//!   gradients of the log-density.
//! - [`rollout`]: closed-loop episode generation, returns, and the penalized
//!   return used for training.
//! - [`reinforce`]: baseline policy-gradient training with adaptive-moment
//!   ascent, plus supervised hot-starting.
//! - [`backoff`]: backoff estimation and the bisection loop that drives the
//!   satisfaction lower bound to its target.
//! - [`config`] / [`checkpoint`] / [`report`]: experiment configuration,
//!   policy persistence, and CSV/JSON emission used by the CLI.

pub mod backoff;
pub mod bioreactor;
pub mod checkpoint;
pub mod config;
pub mod dynamics;
pub mod policy;
pub mod reinforce;
pub mod report;
pub mod rollout;
pub mod seeding;
pub mod stats;
pub mod toy;
