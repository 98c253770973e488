//! Topology-aware physics-informed training on the forced Duffing oscillator.
//!
//! The crate is organised around the experiment pipeline:
//!
//! * [`sim`] — RK4 trajectory generation across forcing regimes, dataset
//!   files, and a Poincaré-section regime oracle.
//! * [`autodiff`] — a second-order dual scalar plus a lane-vectorised tape
//!   giving exact reverse-mode gradients, including gradients of quantities
//!   built from first/second time derivatives of a network output.
//! * [`neural`] — LSTM encoder, conditioned MLP generator, and the baseline
//!   architectures (parametric MLP, hypernetwork, multi-output head), with
//!   deterministic initialisation and exact parameter counting.
//! * [`losses`] — data MSE, ODE residual, in-batch triplet loss, Sobolev
//!   loss, and the weighted composite.
//! * [`training`] — Adam, the phased alternating-optimisation schedule, and
//!   the per-method training loops producing checkpoints and step logs.
//! * [`evaluation`] — held-out physics residual and data MSE, gradient-norm
//!   statistics, the linear probe, and embedding export.
//! * [`config`] — flat `key = value` experiment configuration shared by the
//!   CLI subcommands.

pub mod autodiff;
pub mod config;
pub mod evaluation;
pub mod losses;
pub mod neural;
pub mod sim;
pub mod training;
