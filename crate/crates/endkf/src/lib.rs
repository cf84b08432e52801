//! Ensemble directional Kalman filtering (EnDKF) for 6-DoF pose tracking.
//!
//! This crate implements a perturbed-observations ensemble Kalman filter whose
//! state lives on a product manifold mixing Euclidean blocks with unit spheres:
//! velocity and position in `R^3`, angular velocity and attitude as unit
//! quaternions (versors) on `S^3`, with optional constant measurement-bias
//! blocks. The Kalman gain is not taken from a closed form; it is chosen by
//! stochastic minimization of a generalized posterior variance (trace variance
//! on Euclidean blocks, spherical variance on sphere blocks) over gain
//! matrices, using an Adam-style optimizer seeded at the classical ensemble
//! Kalman gain.
//!
//! Module overview:
//!
//! - [`manifold`] — exp/log/projection maps for Euclidean blocks, unit
//!   spheres, and their products.
//! - [`stats`] — Gaussian and Fisher–von Mises–Langevin (FML) sampling,
//!   per-block generalized variances, and versor (unit quaternion) algebra.
//! - [`filter`] — the estimator family, naive ensemble Kalman gain, the
//!   stochastic gain optimizer, the EnDKF analysis step, and a bootstrap
//!   particle filter baseline.
//! - [`models`] — the constant-velocity constant-angular-velocity pose model,
//!   the constant-bias extension, measurement operators, and synthetic
//!   truth/measurement generators.
//! - [`harness`] — twin-experiment orchestration, Monte Carlo sweeps, error
//!   metrics, and 3-sigma consistency diagnostics.
//! - [`io`] — pose-log ingestion (CSV and homogeneous-matrix formats),
//!   experiment configuration files, and results/trace emission.
//!
//! All randomness flows through explicitly seeded [`rand_chacha::ChaCha8Rng`]
//! streams; identical seeds and configurations produce bit-identical results
//! on a given platform.

pub mod filter;
pub mod harness;
pub mod io;
pub mod manifold;
pub mod models;
pub mod stats;
