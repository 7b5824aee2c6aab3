//! Monte-Carlo success judgment, ASR at a fixed budget, minimal-distortion
//! search, cumulative ASR-vs-distortion curves and the two collection ablations.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{AttackConfig, AttackMethod, Norm};
use crate::ensemble::{build_collection, homogeneous_zoo, CollectionRecipe, EnsembleError, ModelCollection};
use crate::kernel::Tensor;
use crate::nets::LabeledSet;
use crate::par::Exec;
use crate::rng::RngStream;
use crate::smoothing::{check_alpha, hard_vote, Classifier, SmoothingError, VoteResult};
use crate::threat::{build_scenario, Engagement, ScenarioConfig, ScenarioId, ThreatError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("targeted judgment needs a target class")]
    MissingTarget,
    #[error("sample {index}: {source}")]
    Sample { index: usize, source: ThreatError },
    #[error("test set is empty")]
    EmptyDataset,
    #[error("invalid epsilon grid: {0}")]
    InvalidGrid(String),
    #[error("invalid search: {0}")]
    InvalidSearch(String),
    #[error("ablation needs {needed} architectures, collection has {found}")]
    InsufficientZoo { needed: usize, found: usize },
    #[error(transparent)]
    Smoothing(#[from] SmoothingError),
    #[error(transparent)]
    Threat(#[from] ThreatError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reason {
    Misclassified,
    Abstained,
    TargetHit,
    TargetMass,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuccessJudgment {
    pub success: bool,
    pub vote: VoteResult,
    pub reason: Reason,
}

/// Monte-Carlo vote settings of the success judge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    pub n_trials: usize,
    pub alpha: f64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            n_trials: 100,
            alpha: 0.3,
        }
    }
}

/// Success from an already tallied vote.
pub fn judge_vote(vote: VoteResult, y: usize, target: Option<usize>, alpha: f64) -> SuccessJudgment {
    let reason = match target {
        None if vote.top_class != y => Reason::Misclassified,
        None if vote.non_top_fraction() >= alpha => Reason::Abstained,
        Some(t) if vote.top_class == t => Reason::TargetHit,
        Some(t) if vote.fraction(t) >= alpha => Reason::TargetMass,
        _ => Reason::None,
    };
    let vote = vote.judged(alpha);
    SuccessJudgment {
        success: reason != Reason::None,
        vote,
        reason,
    }
}

/// Votes `n_trials` times on `x_adv` and applies the success rule: untargeted
/// runs succeed on a wrong top class or a non-top mass of at least `alpha`;
/// targeted runs on the target winning or holding at least `alpha` of the vote.
#[allow(clippy::too_many_arguments)]
pub fn judge_success(
    defense: &dyn Classifier,
    x_adv: &Tensor,
    y: usize,
    targeted: bool,
    y_target: Option<usize>,
    judge: &JudgeConfig,
    rng: &RngStream,
    exec: Exec,
) -> Result<SuccessJudgment, EvalError> {
    check_alpha(judge.alpha)?;
    if targeted && y_target.is_none() {
        return Err(EvalError::MissingTarget);
    }
    let vote = hard_vote(defense, x_adv, judge.n_trials, rng, exec)?;
    Ok(judge_vote(vote, y, if targeted { y_target } else { None }, judge.alpha))
}

/// Target class used for sample label `y` when the template is targeted.
pub fn target_for(template: &AttackConfig, y: usize, classes: usize) -> Option<usize> {
    template
        .targeted
        .then(|| template.target_class.unwrap_or((y + 1) % classes))
}

fn sample_config(template: &AttackConfig, y: usize, classes: usize) -> AttackConfig {
    template.with_target(target_for(template, y, classes))
}

/// One attack-and-judge probe. The attack draws from `rng.derive(0)`, the
/// vote from `rng.derive(1)`.
fn probe(
    engagement: &dyn Engagement,
    template: &AttackConfig,
    epsilon: f64,
    x: &Tensor,
    y: usize,
    judge: &JudgeConfig,
    rng: &RngStream,
) -> Result<SuccessJudgment, EvalError> {
    let classes = engagement.defense().class_count();
    let cfg = sample_config(template, y, classes).with_epsilon(epsilon);
    let x_adv = engagement.attack(&cfg, x, y, &mut rng.derive(0))?;
    judge_success(
        engagement.defense(),
        &x_adv,
        y,
        cfg.targeted,
        cfg.target_class,
        judge,
        &rng.derive(1),
        Exec::Sequential,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsrEstimate {
    pub asr: f64,
    pub se: f64,
    pub n: usize,
}

fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Attacks every sample at `template.epsilon` and reports the success rate
/// with its binomial standard error. Sample `i` uses `RngStream::new(seed).derive(i)`.
pub fn asr_at_epsilon(
    engagement: &dyn Engagement,
    template: &AttackConfig,
    data: &LabeledSet,
    judge: &JudgeConfig,
    seed: u64,
    exec: Exec,
) -> Result<AsrEstimate, EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let root = RngStream::new(seed).derive_named("asr");
    let hits = exec.try_map(data.len(), |i| {
        probe(
            engagement,
            template,
            template.epsilon,
            &data.inputs[i],
            data.labels[i],
            judge,
            &root.derive(i as u64),
        )
        .map(|j| j.success)
        .map_err(|e| sample_error(i, e))
    })?;
    let n = data.len();
    let asr = hits.iter().filter(|&&h| h).count() as f64 / n as f64;
    Ok(AsrEstimate {
        asr,
        se: binomial_se(asr, n),
        n,
    })
}

fn sample_error(index: usize, e: EvalError) -> EvalError {
    match e {
        EvalError::Threat(source) => EvalError::Sample { index, source },
        other => other,
    }
}

/// Coarse grid plus bisection settings of the distortion search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub coarse_steps: usize,
    pub binary_steps: usize,
    pub eps_max_linf: f64,
    pub eps_max_l2: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            coarse_steps: 10,
            binary_steps: 20,
            eps_max_linf: 0.5,
            eps_max_l2: 4.0,
        }
    }
}

impl SearchConfig {
    pub fn eps_max(&self, norm: Norm) -> f64 {
        match norm {
            Norm::Linf => self.eps_max_linf,
            Norm::L2 => self.eps_max_l2,
        }
    }

    /// `0, eps_max / coarse, ..., eps_max`.
    pub fn default_grid(&self, norm: Norm) -> Vec<f64> {
        let m = self.eps_max(norm);
        (0..=self.coarse_steps)
            .map(|j| m * j as f64 / self.coarse_steps as f64)
            .collect()
    }

    fn validate(&self, norm: Norm) -> Result<(), EvalError> {
        if self.coarse_steps == 0 {
            return Err(EvalError::InvalidSearch("coarse_steps must be at least 1".into()));
        }
        let m = self.eps_max(norm);
        if !(m > 0.0 && m.is_finite()) {
            return Err(EvalError::InvalidSearch(format!("eps_max {m}")));
        }
        Ok(())
    }
}

/// Smallest budget at which the attack is judged successful, or `None` if
/// even `eps_max` fails. A success at `epsilon = 0` (probe 0) returns `Some(0)`;
/// otherwise the first successful coarse point brackets a bisection and the
/// final bracket midpoint is returned. Probe `k` draws from `rng.derive(k)`.
pub fn min_distortion_search(
    engagement: &dyn Engagement,
    template: &AttackConfig,
    x: &Tensor,
    y: usize,
    search: &SearchConfig,
    judge: &JudgeConfig,
    rng: &RngStream,
) -> Result<Option<f64>, EvalError> {
    search.validate(template.norm)?;
    let mut k = 0u64;
    let mut try_eps = |eps: f64| {
        let r = rng.derive(k);
        k += 1;
        probe(engagement, template, eps, x, y, judge, &r).map(|j| j.success)
    };
    if try_eps(0.0)? {
        return Ok(Some(0.0));
    }
    let eps_max = search.eps_max(template.norm);
    let grid = |j: usize| eps_max * j as f64 / search.coarse_steps as f64;
    let mut bracket = None;
    for j in 1..=search.coarse_steps {
        if try_eps(grid(j))? {
            bracket = Some((grid(j - 1), grid(j)));
            break;
        }
    }
    let Some((mut lo, mut hi)) = bracket else {
        return Ok(None);
    };
    for _ in 0..search.binary_steps {
        let mid = 0.5 * (lo + hi);
        if try_eps(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epsilon: f64,
    pub asr: f64,
    pub se: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveMeta {
    pub scenario: String,
    pub attack: AttackMethod,
    pub targeted: bool,
    pub norm: Norm,
    pub n_trials: usize,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub points: Vec<CurvePoint>,
    pub meta: CurveMeta,
}

impl Curve {
    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| w[0].asr <= w[1].asr)
    }
}

fn check_grid(grid: &[f64]) -> Result<(), EvalError> {
    if grid.is_empty() {
        return Err(EvalError::InvalidGrid("empty".into()));
    }
    if grid.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
        return Err(EvalError::InvalidGrid(format!("{grid:?}")));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::InvalidGrid("epsilons must be strictly increasing".into()));
    }
    Ok(())
}

/// Everything a curve run needs besides the engagement.
#[derive(Clone, Debug)]
pub struct CurveJob<'d> {
    pub template: AttackConfig,
    pub data: &'d LabeledSet,
    pub grid: Vec<f64>,
    pub search: SearchConfig,
    pub judge: JudgeConfig,
    pub seed: u64,
    pub exec: Exec,
}

/// Per-sample minimal distortions; sample `i` searches with
/// `RngStream::new(seed).derive(i)`.
pub fn min_distortions(engagement: &dyn Engagement, job: &CurveJob<'_>) -> Result<Vec<Option<f64>>, EvalError> {
    if job.data.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let root = RngStream::new(job.seed).derive_named("curve");
    job.exec.try_map(job.data.len(), |i| {
        min_distortion_search(
            engagement,
            &job.template,
            &job.data.inputs[i],
            job.data.labels[i],
            &job.search,
            &job.judge,
            &root.derive(i as u64),
        )
        .map_err(|e| sample_error(i, e))
    })
}

/// Cumulative fold: `asr(eps)` is the share of samples whose minimal
/// distortion is at most `eps`; `None` never counts.
pub fn fold_curve(distortions: &[Option<f64>], grid: &[f64], meta: CurveMeta) -> Result<Curve, EvalError> {
    check_grid(grid)?;
    if distortions.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let n = distortions.len();
    let points = grid
        .iter()
        .map(|&epsilon| {
            let hits = distortions.iter().filter(|d| matches!(d, Some(v) if *v <= epsilon)).count();
            let asr = hits as f64 / n as f64;
            CurvePoint {
                epsilon,
                asr,
                se: binomial_se(asr, n),
                n,
            }
        })
        .collect();
    Ok(Curve { points, meta })
}

pub fn curve_meta(engagement: &dyn Engagement, job: &CurveJob<'_>) -> CurveMeta {
    CurveMeta {
        scenario: engagement.label(),
        attack: job.template.method,
        targeted: job.template.targeted,
        norm: job.template.norm,
        n_trials: job.judge.n_trials,
        alpha: job.judge.alpha,
        seed: job.seed,
    }
}

/// ASR-vs-distortion curve over `job.grid`.
pub fn build_curve(engagement: &dyn Engagement, job: &CurveJob<'_>) -> Result<Curve, EvalError> {
    check_grid(&job.grid)?;
    let d = min_distortions(engagement, job)?;
    fold_curve(&d, &job.grid, curve_meta(engagement, job))
}

/// Outcome of comparing two curves point by point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderingReport {
    /// Points where the error bars do not overlap.
    pub compared: usize,
    /// Compared points where `a >= b`.
    pub held: usize,
    /// Points skipped because the error bars overlap.
    pub excluded: usize,
}

impl OrderingReport {
    /// Share of compared points where the ordering held (1 when nothing was compared).
    pub fn share(&self) -> f64 {
        if self.compared == 0 {
            1.0
        } else {
            self.held as f64 / self.compared as f64
        }
    }

    pub fn holds_at(&self, min_share: f64) -> bool {
        self.share() >= min_share
    }
}

/// Checks `a.asr >= b.asr` on the points with index in `range`, skipping
/// points whose `+-se` bars overlap.
pub fn compare_curves(a: &Curve, b: &Curve, range: std::ops::Range<usize>) -> OrderingReport {
    let mut r = OrderingReport {
        compared: 0,
        held: 0,
        excluded: 0,
    };
    for i in range {
        let (Some(p), Some(q)) = (a.points.get(i), b.points.get(i)) else {
            continue;
        };
        if (p.asr - q.asr).abs() <= p.se + q.se {
            r.excluded += 1;
            continue;
        }
        r.compared += 1;
        if p.asr >= q.asr {
            r.held += 1;
        }
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    QuantityHigh,
    Homogeneous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationPlan {
    pub quantity_high: Vec<usize>,
    pub homogeneous_sigmas: Vec<f64>,
    pub homogeneous_variants: usize,
    /// Zoo member used for the single-architecture collection.
    pub homogeneous_arch: String,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self {
            quantity_high: vec![6, 7, 8],
            homogeneous_sigmas: vec![0.12, 0.15, 0.25, 0.5, 0.75, 1.0, 1.25],
            homogeneous_variants: 3,
            homogeneous_arch: "cnn-wide".into(),
        }
    }
}

/// The collection an ablation swaps in for the heterogeneous baseline.
/// Homogeneous collections keep every trained entry (no unsmoothable swap),
/// so they hold exactly `sigmas x variants` entries.
pub fn ablated_collection(
    mode: AblationMode,
    plan: &AblationPlan,
    baseline: &ModelCollection,
    recipe: &CollectionRecipe,
    train: &LabeledSet,
    holdout: &LabeledSet,
    exec: Exec,
) -> Result<ModelCollection, EvalError> {
    match mode {
        AblationMode::QuantityHigh => {
            let needed = plan.quantity_high.iter().copied().max().unwrap_or(0);
            let found = baseline.arch_ids().len();
            if needed > found {
                return Err(EvalError::InsufficientZoo { needed, found });
            }
            Ok(baseline.with_quantity_options(plan.quantity_high.clone())?)
        }
        AblationMode::Homogeneous => {
            let member = recipe
                .zoo
                .iter()
                .find(|z| z.id == plan.homogeneous_arch)
                .ok_or_else(|| EnsembleError::InvalidCollection(format!("no zoo member {:?}", plan.homogeneous_arch)))?;
            let needed = baseline.quantity_options().iter().copied().max().unwrap_or(1);
            if plan.homogeneous_variants < needed {
                return Err(EvalError::InsufficientZoo {
                    needed,
                    found: plan.homogeneous_variants,
                });
            }
            let r = CollectionRecipe {
                zoo: homogeneous_zoo(member, plan.homogeneous_variants),
                sigmas: plan.homogeneous_sigmas.clone(),
                quantity_options: baseline.quantity_options().to_vec(),
                unsmoothable_margin: None,
                seed: recipe.seed ^ 0x5EED_AB1A,
                ..recipe.clone()
            };
            Ok(build_collection(&r, train, holdout, exec)?.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub baseline: Curve,
    pub ablated: Curve,
}

/// Attacker-A curves on the baseline collection and on its ablated variant.
#[allow(clippy::too_many_arguments)]
pub fn ablation_run(
    mode: AblationMode,
    plan: &AblationPlan,
    baseline: Arc<ModelCollection>,
    recipe: &CollectionRecipe,
    train: &LabeledSet,
    holdout: &LabeledSet,
    scenario: &ScenarioConfig,
    job: &CurveJob<'_>,
) -> Result<AblationResult, EvalError> {
    let ablated = ablated_collection(mode, plan, &baseline, recipe, train, holdout, job.exec)?;
    let base = build_scenario(ScenarioId::A, baseline, scenario.clone())?;
    let abl = build_scenario(ScenarioId::A, Arc::new(ablated), scenario.clone())?;
    let baseline = build_curve(&base, job)?;
    let mut ablated = build_curve(&abl, job)?;
    ablated.meta.scenario = match mode {
        AblationMode::QuantityHigh => "A-quantity-high".into(),
        AblationMode::Homogeneous => "A-homogeneous".into(),
    };
    Ok(AblationResult { baseline, ablated })
}
