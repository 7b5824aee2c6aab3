//! Stochastic ensemble smoothed model (SEM) defense and the machinery to
//! measure its adversarial robustness.

pub mod kernel;
pub mod nets;
pub mod par;
pub mod rng;
pub mod smoothing;
pub mod ensemble;
pub mod attacks;
pub mod threat;
pub mod evaluation;
pub mod workbench;
