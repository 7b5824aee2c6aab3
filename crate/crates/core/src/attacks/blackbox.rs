use super::{step_and_project, AttackConfig, AttackError, AttackMethod, ScoreOracle};
use crate::kernel::Tensor;
use crate::nets::GradTarget;
use crate::rng::RngStream;

/// Smallest probability fed to the log in score-based losses.
const PROB_FLOOR: f64 = 1e-12;

fn check_scores(p: &[f64]) -> Result<(), AttackError> {
    if p.is_empty() || p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(AttackError::InvalidScores(format!("{p:?}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(AttackError::InvalidScores(format!("scores sum to {s}")));
    }
    Ok(())
}

/// Cross-entropy of `target`'s class under the oracle's scores.
fn score_loss(oracle: &mut dyn ScoreOracle, x: &Tensor, target: GradTarget) -> Result<f64, AttackError> {
    let p = oracle.scores(x)?;
    check_scores(&p)?;
    let c = target.class();
    let pc = *p
        .get(c)
        .ok_or_else(|| AttackError::InvalidScores(format!("class {c} outside {} scores", p.len())))?;
    Ok(-pc.max(PROB_FLOOR).ln())
}

/// Wraps a score oracle and refuses calls past `budget`.
pub struct QueryCounter<'a> {
    inner: &'a mut dyn ScoreOracle,
    budget: usize,
    used: usize,
}

impl<'a> QueryCounter<'a> {
    pub fn new(inner: &'a mut dyn ScoreOracle, budget: usize) -> Self {
        Self { inner, budget, used: 0 }
    }

    pub fn used(&self) -> usize {
        self.used
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.used
    }
}

impl ScoreOracle for QueryCounter<'_> {
    fn scores(&mut self, x: &Tensor) -> Result<Vec<f64>, AttackError> {
        if self.used >= self.budget {
            return Err(AttackError::BudgetExhausted { budget: self.budget });
        }
        self.used += 1;
        self.inner.scores(x)
    }
}

fn check_estimator(q: usize, radius: f64) -> Result<(), AttackError> {
    if q == 0 || !(radius > 0.0 && radius.is_finite()) {
        return Err(AttackError::InvalidConfig(format!("estimator q={q}, radius={radius}")));
    }
    Ok(())
}

/// Antithetic Gaussian estimate `1/(2 q r) * sum_i [L(x + r u_i) - L(x - r u_i)] u_i`.
/// Calls `loss` exactly `2 q` times.
pub fn nes_estimate<F>(mut loss: F, x: &Tensor, q: usize, radius: f64, rng: &mut RngStream) -> Result<Tensor, AttackError>
where
    F: FnMut(&Tensor) -> Result<f64, AttackError>,
{
    check_estimator(q, radius)?;
    let mut g = Tensor::zeros(x.shape());
    let mut u = Tensor::zeros(x.shape());
    for _ in 0..q {
        rng.fill_normal(u.data_mut(), 1.0);
        let mut xp = x.clone();
        xp.add_scaled(&u, radius);
        let mut xm = x.clone();
        xm.add_scaled(&u, -radius);
        let diff = loss(&xp)? - loss(&xm)?;
        g.add_scaled(&u, diff);
    }
    g.scale(1.0 / (2.0 * q as f64 * radius));
    Ok(g)
}

/// Rademacher estimate `1/q * sum_i [L(x + r d_i) - L(x - r d_i)] / (2 r) * d_i^-1`.
/// Calls `loss` exactly `2 q` times.
pub fn spsa_estimate<F>(mut loss: F, x: &Tensor, q: usize, radius: f64, rng: &mut RngStream) -> Result<Tensor, AttackError>
where
    F: FnMut(&Tensor) -> Result<f64, AttackError>,
{
    check_estimator(q, radius)?;
    let mut g = Tensor::zeros(x.shape());
    let mut delta = Tensor::zeros(x.shape());
    for _ in 0..q {
        for d in delta.data_mut() {
            *d = rng.rademacher();
        }
        let mut xp = x.clone();
        xp.add_scaled(&delta, radius);
        let mut xm = x.clone();
        xm.add_scaled(&delta, -radius);
        let diff = (loss(&xp)? - loss(&xm)?) / (2.0 * radius);
        // 1/d == d for d in {-1, +1}
        g.add_scaled(&delta, diff);
    }
    g.scale(1.0 / q as f64);
    Ok(g)
}

/// NES estimate of the cross-entropy gradient for `target`, using `2 q` score queries.
pub fn nes_gradient(
    scores: &mut dyn ScoreOracle,
    x: &Tensor,
    target: GradTarget,
    q: usize,
    radius: f64,
    rng: &mut RngStream,
) -> Result<Tensor, AttackError> {
    nes_estimate(|p| score_loss(scores, p, target), x, q, radius, rng)
}

/// SPSA estimate of the cross-entropy gradient for `target`, using `2 q` score queries.
pub fn spsa_gradient(
    scores: &mut dyn ScoreOracle,
    x: &Tensor,
    target: GradTarget,
    q: usize,
    radius: f64,
    rng: &mut RngStream,
) -> Result<Tensor, AttackError> {
    spsa_estimate(|p| score_loss(scores, p, target), x, q, radius, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlackBoxRun {
    pub x_adv: Tensor,
    pub queries: usize,
    /// Attacker objective at `x_adv`: the label loss (untargeted) or the
    /// negated target loss (targeted).
    pub objective: f64,
}

/// Score-only attack: estimate, step, project, evaluate, and keep the best
/// iterate. Each round costs `2 q + 1` queries after one initial evaluation;
/// the loop stops when a full round no longer fits in the budget.
pub fn black_box_attack(
    cfg: &AttackConfig,
    oracle: &mut dyn ScoreOracle,
    x0: &Tensor,
    y: usize,
    rng: &mut RngStream,
) -> Result<BlackBoxRun, AttackError> {
    cfg.validate()?;
    if !cfg.method.is_black_box() {
        return Err(AttackError::WrongOracle {
            method: cfg.method,
            needed: "white",
        });
    }
    let target = cfg.goal(y);
    let q = cfg.est_samples;
    let round = 2 * q + 1;
    let mut counter = QueryCounter::new(oracle, cfg.query_budget);
    let sign = if cfg.targeted { -1.0 } else { 1.0 };
    if cfg.query_budget < round {
        return Ok(BlackBoxRun {
            x_adv: x0.clone(),
            queries: 0,
            objective: f64::NAN,
        });
    }
    let mut best = (x0.clone(), sign * score_loss(&mut counter, x0, target)?);
    let rounds = (cfg.query_budget - 1) / round;
    let step = cfg.step_for(rounds);
    let mut x = x0.clone();
    while counter.remaining() >= round {
        let g = match cfg.method {
            AttackMethod::Nes => nes_gradient(&mut counter, &x, target, q, cfg.est_radius, rng)?,
            _ => spsa_gradient(&mut counter, &x, target, q, cfg.est_radius, rng)?,
        };
        step_and_project(cfg, &mut x, x0, &g, step);
        let j = sign * score_loss(&mut counter, &x, target)?;
        if j > best.1 {
            best = (x.clone(), j);
        }
    }
    Ok(BlackBoxRun {
        x_adv: best.0,
        queries: counter.used(),
        objective: best.1,
    })
}
