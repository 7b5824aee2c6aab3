//! Gradient attacks (FGSM, BIM, MIM, PGD) and score-based black-box attacks
//! (NES, SPSA). Attacks only see the victim through an oracle, so every
//! threat scenario plugs into the same update loop.

mod blackbox;

pub use blackbox::{
    black_box_attack, nes_estimate, nes_gradient, spsa_estimate, spsa_gradient, BlackBoxRun, QueryCounter,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::EnsembleError;
use crate::kernel::Tensor;
use crate::nets::{GradTarget, NetError};
use crate::rng::RngStream;
use crate::smoothing::SmoothingError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("{method} needs a {needed} oracle")]
    WrongOracle { method: AttackMethod, needed: &'static str },
    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },
    #[error("oracle returned shape {found:?}, expected {expected:?}")]
    OracleShape { expected: Vec<usize>, found: Vec<usize> },
    #[error("query budget of {budget} exhausted")]
    BudgetExhausted { budget: usize },
    #[error("invalid score vector: {0}")]
    InvalidScores(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Smoothing(#[from] SmoothingError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

impl Norm {
    pub fn measure(self, t: &Tensor) -> f64 {
        match self {
            Norm::Linf => t.norm_linf(),
            Norm::L2 => t.norm_l2(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Norm {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "linf" => Ok(Norm::Linf),
            "l2" => Ok(Norm::L2),
            other => Err(AttackError::InvalidConfig(format!("unknown norm {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Fgsm,
    Bim,
    Mim,
    Pgd,
    Nes,
    Spsa,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 6] = [
        AttackMethod::Fgsm,
        AttackMethod::Bim,
        AttackMethod::Mim,
        AttackMethod::Pgd,
        AttackMethod::Nes,
        AttackMethod::Spsa,
    ];

    pub fn is_black_box(self) -> bool {
        matches!(self, AttackMethod::Nes | AttackMethod::Spsa)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Bim => "bim",
            AttackMethod::Mim => "mim",
            AttackMethod::Pgd => "pgd",
            AttackMethod::Nes => "nes",
            AttackMethod::Spsa => "spsa",
        }
    }
}

impl fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackMethod {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttackMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| AttackError::InvalidConfig(format!("unknown attack {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub targeted: bool,
    pub target_class: Option<usize>,
    pub norm: Norm,
    pub epsilon: f64,
    pub iterations: usize,
    /// `None` picks the default: `epsilon` for FGSM, otherwise
    /// `2.5 * epsilon / iterations` (iterations counted per estimate for black-box runs).
    pub step_size: Option<f64>,
    pub momentum_mu: f64,
    pub query_budget: usize,
    pub est_samples: usize,
    pub est_radius: f64,
}

impl AttackConfig {
    /// Untargeted linf config with the default constants.
    pub fn new(method: AttackMethod) -> Self {
        Self {
            method,
            targeted: false,
            target_class: None,
            norm: Norm::Linf,
            epsilon: 0.0,
            iterations: if method == AttackMethod::Fgsm { 1 } else { 20 },
            step_size: None,
            momentum_mu: 1.0,
            query_budget: 5000,
            est_samples: 25,
            est_radius: 0.05,
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            ..self.clone()
        }
    }

    /// Copy aimed at `target` (or untargeted for `None`).
    pub fn with_target(&self, target: Option<usize>) -> Self {
        Self {
            targeted: target.is_some(),
            target_class: target,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |s: String| Err(AttackError::InvalidConfig(s));
        if self.targeted != self.target_class.is_some() {
            return bad("targeted must come with a target class and vice versa".into());
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon {}", self.epsilon));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("step size {s}"));
            }
        }
        match self.method {
            AttackMethod::Fgsm if self.iterations != 1 => bad("fgsm runs exactly one iteration".into()),
            AttackMethod::Nes | AttackMethod::Spsa => {
                if self.query_budget == 0 || self.est_samples == 0 {
                    return bad("black-box attacks need a query budget and estimator samples".into());
                }
                if !(self.est_radius > 0.0 && self.est_radius.is_finite()) {
                    return bad(format!("estimator radius {}", self.est_radius));
                }
                Ok(())
            }
            _ if self.iterations == 0 => bad("iterations must be positive".into()),
            _ if !(self.momentum_mu >= 0.0 && self.momentum_mu.is_finite()) => bad("momentum must be >= 0".into()),
            _ => Ok(()),
        }
    }

    /// Gradient target for true label `y`.
    pub fn goal(&self, y: usize) -> GradTarget {
        match self.target_class {
            Some(t) if self.targeted => GradTarget::Target(t),
            _ => GradTarget::TrueLabel(y),
        }
    }

    fn step_for(&self, iterations: usize) -> f64 {
        match (self.step_size, self.method) {
            (Some(s), _) => s,
            (None, AttackMethod::Fgsm) => self.epsilon,
            (None, _) => 2.5 * self.epsilon / iterations.max(1) as f64,
        }
    }
}

/// White-box access: the input gradient of the attacker's loss for `target`.
pub trait WhiteBoxOracle {
    fn grad(&mut self, x: &Tensor, target: GradTarget) -> Result<Tensor, AttackError>;
}

/// Score access: the victim's class-probability vector.
pub trait ScoreOracle {
    fn scores(&mut self, x: &Tensor) -> Result<Vec<f64>, AttackError>;
}

/// The channel a scenario hands to the attacker.
pub enum GradientOracle<'a> {
    White(&'a mut dyn WhiteBoxOracle),
    Score(&'a mut dyn ScoreOracle),
}

impl GradientOracle<'_> {
    pub fn kind(&self) -> &'static str {
        match self {
            GradientOracle::White(_) => "white",
            GradientOracle::Score(_) => "score",
        }
    }
}

/// Runs `cfg.method` against the oracle. Black-box runs return only the iterate.
pub fn run_attack(
    cfg: &AttackConfig,
    oracle: GradientOracle<'_>,
    x0: &Tensor,
    y: usize,
    rng: &mut RngStream,
) -> Result<Tensor, AttackError> {
    match (cfg.method.is_black_box(), oracle) {
        (false, GradientOracle::White(o)) => iterative_gradient_attack(cfg, o, x0, y, rng),
        (true, GradientOracle::Score(o)) => Ok(black_box_attack(cfg, o, x0, y, rng)?.x_adv),
        (black, _) => Err(AttackError::WrongOracle {
            method: cfg.method,
            needed: if black { "score" } else { "white" },
        }),
    }
}

/// `sign` with `sign(0) = 0`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Nearest point to `x` in the `epsilon`-ball around `x0`, then clipped to `[0, 1]`.
pub fn project(x: &Tensor, x0: &Tensor, epsilon: f64, norm: Norm) -> Tensor {
    let mut out = x.clone();
    match norm {
        Norm::Linf => {
            for (v, &c) in out.data_mut().iter_mut().zip(x0.data()) {
                *v = v.clamp(c - epsilon, c + epsilon);
            }
        }
        Norm::L2 => {
            let d = x.sub(x0);
            let n = d.norm_l2();
            if n > epsilon {
                let s = if n > 0.0 { epsilon / n } else { 0.0 };
                for ((v, &c), &dv) in out.data_mut().iter_mut().zip(x0.data()).zip(d.data()) {
                    *v = c + dv * s;
                }
            }
        }
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Unit-step direction of `g`: its sign for linf, `g / |g|_2` for l2.
fn ascent_direction(g: &Tensor, norm: Norm) -> Tensor {
    match norm {
        Norm::Linf => g.map(sign),
        Norm::L2 => {
            let n = g.norm_l2();
            if n > 0.0 {
                g.map(|v| v / n)
            } else {
                g.map(|_| 0.0)
            }
        }
    }
}

fn random_start(x0: &Tensor, epsilon: f64, norm: Norm, rng: &mut RngStream) -> Tensor {
    let mut x = x0.clone();
    match norm {
        Norm::Linf => {
            for v in x.data_mut() {
                *v += epsilon * (2.0 * rng.uniform() - 1.0);
            }
        }
        Norm::L2 => {
            let mut dir = Tensor::zeros(x0.shape());
            rng.fill_normal(dir.data_mut(), 1.0);
            let n = dir.norm_l2();
            let r = epsilon * rng.uniform().powf(1.0 / x0.len() as f64);
            if n > 0.0 {
                x.add_scaled(&dir, r / n);
            }
        }
    }
    project(&x, x0, epsilon, norm)
}

/// One step of the shared update: move `x` along `direction` (descending for
/// targeted runs) and project back.
pub(crate) fn step_and_project(cfg: &AttackConfig, x: &mut Tensor, x0: &Tensor, grad: &Tensor, step: f64) {
    let dir = ascent_direction(grad, cfg.norm);
    let s = if cfg.targeted { -step } else { step };
    x.add_scaled(&dir, s);
    *x = project(x, x0, cfg.epsilon, cfg.norm);
}

/// FGSM, BIM, MIM and PGD. The oracle is queried once per iteration, so a
/// dynamic oracle supplies a fresh gradient every step.
pub fn iterative_gradient_attack(
    cfg: &AttackConfig,
    oracle: &mut dyn WhiteBoxOracle,
    x0: &Tensor,
    y: usize,
    rng: &mut RngStream,
) -> Result<Tensor, AttackError> {
    cfg.validate()?;
    if cfg.method.is_black_box() {
        return Err(AttackError::WrongOracle {
            method: cfg.method,
            needed: "score",
        });
    }
    let target = cfg.goal(y);
    let step = cfg.step_for(cfg.iterations);
    let mut x = if cfg.method == AttackMethod::Pgd {
        random_start(x0, cfg.epsilon, cfg.norm, rng)
    } else {
        x0.clone()
    };
    let mut velocity = Tensor::zeros(x0.shape());
    for iteration in 0..cfg.iterations {
        let g = oracle.grad(&x, target)?;
        if !g.same_shape(x0) {
            return Err(AttackError::OracleShape {
                expected: x0.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(AttackError::NonFiniteGradient { iteration });
        }
        let g = if cfg.method == AttackMethod::Mim && cfg.momentum_mu > 0.0 {
            velocity.scale(cfg.momentum_mu);
            let n1 = g.norm_l1();
            if n1 > 0.0 {
                velocity.add_scaled(&g, 1.0 / n1);
            }
            velocity.clone()
        } else {
            // with zero momentum the l1 normalization only rescales, which the
            // direction step ignores
            g
        };
        step_and_project(cfg, &mut x, x0, &g, step);
    }
    Ok(x)
}
