//! Randomized smoothing: Gaussian-noise expectation of a base classifier,
//! hard-vote Monte Carlo with abstention, the exact binomial test and the
//! approximated certified accuracy (ACA) used to grade collection entries.

use std::sync::Arc;

use thiserror::Error;

use crate::kernel::{argmax, gaussian_sample, softmax, Tensor};
use crate::nets::{LabeledSet, Model, NetError};
use crate::par::Exec;
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SmoothingError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("trial count must be at least 1")]
    NoTrials,
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("binomial test domain violation: {0}")]
    Domain(String),
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Anything that answers a hard class label, possibly at random.
pub trait Classifier: Sync {
    fn class_count(&self) -> usize;
    fn classify(&self, x: &Tensor, rng: &mut RngStream) -> Result<usize, NetError>;
}

/// Adapts a closure into a [`Classifier`].
pub struct FnClassifier<F> {
    classes: usize,
    f: F,
}

impl<F> FnClassifier<F>
where
    F: Fn(&Tensor, &mut RngStream) -> Result<usize, NetError> + Sync,
{
    pub fn new(classes: usize, f: F) -> Self {
        Self { classes, f }
    }
}

impl<F> Classifier for FnClassifier<F>
where
    F: Fn(&Tensor, &mut RngStream) -> Result<usize, NetError> + Sync,
{
    fn class_count(&self) -> usize {
        self.classes
    }

    fn classify(&self, x: &Tensor, rng: &mut RngStream) -> Result<usize, NetError> {
        (self.f)(x, rng)
    }
}

impl Classifier for Model {
    fn class_count(&self) -> usize {
        Model::class_count(self)
    }

    fn classify(&self, x: &Tensor, _rng: &mut RngStream) -> Result<usize, NetError> {
        self.predict_class(x)
    }
}

/// A base model queried under `N(0, sigma^2 I)` input noise.
#[derive(Clone, Debug)]
pub struct SmoothedModel {
    pub base: Arc<Model>,
    pub sigma: f64,
    pub default_noise_samples: usize,
}

impl SmoothedModel {
    pub fn new(base: Arc<Model>, sigma: f64) -> Self {
        Self {
            base,
            sigma,
            default_noise_samples: 1,
        }
    }

    /// `x + delta` with one fresh noise draw (or `x` itself when `sigma == 0`).
    pub fn perturb(&self, x: &Tensor, rng: &mut RngStream) -> Tensor {
        let mut xn = x.clone();
        if self.sigma > 0.0 {
            let d = gaussian_sample(x.shape(), self.sigma, rng);
            xn.add_scaled(&d, 1.0);
        }
        xn
    }

    /// Softmax output of the base model on a single noisy copy of `x`.
    pub fn noisy_proba(&self, x: &Tensor, rng: &mut RngStream) -> Result<Vec<f64>, NetError> {
        self.base.predict_proba(&self.perturb(x, rng))
    }
}

impl Classifier for SmoothedModel {
    fn class_count(&self) -> usize {
        self.base.class_count()
    }

    fn classify(&self, x: &Tensor, rng: &mut RngStream) -> Result<usize, NetError> {
        Ok(argmax(&self.noisy_proba(x, rng)?))
    }
}

/// Running per-component mean and variance (Welford). Averaging identical
/// vectors returns them unchanged.
#[derive(Clone, Debug)]
pub(crate) struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub(crate) fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub(crate) fn push(&mut self, v: &[f64]) {
        self.n += 1;
        let k = self.n as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(v) {
            let d = x - *m;
            *m += d / k;
            *s += d * (x - *m);
        }
    }

    pub(crate) fn count(&self) -> usize {
        self.n
    }

    pub(crate) fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Sample variance per component (zero for fewer than two samples).
    pub(crate) fn variance(&self) -> Vec<f64> {
        if self.n < 2 {
            return vec![0.0; self.mean.len()];
        }
        let d = (self.n - 1) as f64;
        self.m2.iter().map(|s| s / d).collect()
    }

    pub(crate) fn into_mean(self) -> Vec<f64> {
        self.mean
    }
}

/// Mean and per-component sample variance of `softmax(f(x + delta))` over `m` draws.
pub fn smoothed_soft_moments(
    sm: &SmoothedModel,
    x: &Tensor,
    m: usize,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Vec<f64>), SmoothingError> {
    if m == 0 {
        return Err(SmoothingError::NoTrials);
    }
    if sm.sigma == 0.0 {
        let p = softmax(sm.base.predict_logits(x)?.data());
        let z = vec![0.0; p.len()];
        return Ok((p, z));
    }
    let mut acc = Moments::new(sm.base.class_count());
    for _ in 0..m {
        acc.push(&sm.noisy_proba(x, rng)?);
    }
    let var = acc.variance();
    Ok((acc.into_mean(), var))
}

/// Monte-Carlo estimate of the smoothed soft prediction. `sigma == 0` returns
/// `softmax(f(x))` exactly and consumes no randomness.
pub fn smoothed_soft_predict(
    sm: &SmoothedModel,
    x: &Tensor,
    m: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>, SmoothingError> {
    Ok(smoothed_soft_moments(sm, x, m, rng)?.0)
}

/// One-hot tallies of `n_trials` hard predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteResult {
    pub counts: Vec<usize>,
    pub n_trials: usize,
    pub top_class: usize,
    pub top_fraction: f64,
    pub abstained: bool,
}

impl VoteResult {
    pub fn from_counts(counts: Vec<usize>) -> Self {
        let n_trials: usize = counts.iter().sum();
        let mut top_class = 0;
        for (i, &c) in counts.iter().enumerate() {
            if c > counts[top_class] {
                top_class = i;
            }
        }
        let top_fraction = if n_trials == 0 {
            0.0
        } else {
            counts[top_class] as f64 / n_trials as f64
        };
        Self {
            counts,
            n_trials,
            top_class,
            top_fraction,
            abstained: false,
        }
    }

    pub fn fraction(&self, class: usize) -> f64 {
        self.counts[class] as f64 / self.n_trials as f64
    }

    /// Vote mass outside the top class.
    pub fn non_top_fraction(&self) -> f64 {
        (self.n_trials - self.counts[self.top_class]) as f64 / self.n_trials as f64
    }

    /// Returns a copy with `abstained` set by [`abstain_decision`].
    pub fn judged(mut self, alpha: f64) -> Self {
        self.abstained = abstain_decision(&self, alpha);
        self
    }
}

/// Tallies `n` independent hard predictions; trial `i` uses `rng.derive(i)`.
pub fn hard_vote(
    predictor: &dyn Classifier,
    x: &Tensor,
    n: usize,
    rng: &RngStream,
    exec: Exec,
) -> Result<VoteResult, SmoothingError> {
    if n == 0 {
        return Err(SmoothingError::NoTrials);
    }
    let classes = predictor.class_count();
    let labels = exec.try_map(n, |i| predictor.classify(x, &mut rng.derive(i as u64)))?;
    let mut counts = vec![0usize; classes];
    for c in labels {
        counts[c] += 1;
    }
    Ok(VoteResult::from_counts(counts))
}

fn ln_choose(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// Exact two-sided binomial test: total probability of outcomes no more likely
/// than the observed one under `Binomial(trials, p0)`.
pub fn binomial_two_sided(successes: usize, trials: usize, p0: f64) -> Result<f64, SmoothingError> {
    if successes > trials {
        return Err(SmoothingError::Domain(format!("{successes} successes > {trials} trials")));
    }
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(SmoothingError::Domain(format!("p0 = {p0} outside (0, 1)")));
    }
    let (lp, lq) = (p0.ln(), (1.0 - p0).ln());
    let log_pmf = |k: usize| ln_choose(trials, k) + k as f64 * lp + (trials - k) as f64 * lq;
    let observed = log_pmf(successes);
    // relative slack so that mirror-image outcomes tie despite rounding
    let cutoff = observed + 1e-7f64.ln_1p();
    let p: f64 = (0..=trials)
        .map(log_pmf)
        .filter(|&l| l <= cutoff)
        .map(f64::exp)
        .sum();
    Ok(p.clamp(0.0, 1.0))
}

/// Abstain iff the vote mass outside the top class reaches `alpha`.
pub fn abstain_decision(v: &VoteResult, alpha: f64) -> bool {
    v.non_top_fraction() >= alpha
}

pub(crate) fn check_alpha(alpha: f64) -> Result<(), SmoothingError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(SmoothingError::InvalidAlpha(alpha))
    }
}

/// Fraction of samples whose vote picks the label without abstaining.
/// Sample `i` votes with `rng.derive(i)`.
pub fn approximated_certified_accuracy(
    predictor: &dyn Classifier,
    data: &LabeledSet,
    n: usize,
    alpha: f64,
    rng: &RngStream,
    exec: Exec,
) -> Result<f64, SmoothingError> {
    check_alpha(alpha)?;
    if data.is_empty() {
        return Err(SmoothingError::EmptyDataset);
    }
    let hits = exec.try_map(data.len(), |i| {
        let v = hard_vote(predictor, &data.inputs[i], n, &rng.derive(i as u64), Exec::Sequential)?.judged(alpha);
        Ok::<_, SmoothingError>(v.top_class == data.labels[i] && !v.abstained)
    })?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
}
