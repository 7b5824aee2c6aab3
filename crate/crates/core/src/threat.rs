//! Attacker capabilities A-E and the baseline contrasts F-M.
//!
//! A [`Scenario`] pairs what the attacker can see (a gradient or score oracle)
//! with the defense under test. The defense never reads anything from the
//! attacker side: oracles borrow the scenario immutably and keep their own
//! random streams and draw logs.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{run_attack, AttackConfig, AttackError, GradientOracle, ScoreOracle, WhiteBoxOracle};
use crate::ensemble::{sample_attributes, sem_predict, EnsembleAttributes, EnsembleError, ModelCollection};
use crate::kernel::{argmax, Tensor};
use crate::nets::{GradTarget, Model, NetError};
use crate::rng::RngStream;
use crate::smoothing::{smoothed_soft_predict, Classifier, SmoothedModel, SmoothingError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ThreatError {
    #[error("unknown scenario id {0:?}")]
    UnknownScenario(String),
    #[error("scenario {scenario} cannot run {method}: {reason}")]
    Incompatible {
        scenario: ScenarioId,
        method: String,
        reason: &'static str,
    },
    #[error("invalid scenario setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Smoothing(#[from] SmoothingError),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioId {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    H,
    I,
    J,
    K,
    L,
    M,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 13] = [
        ScenarioId::A,
        ScenarioId::B,
        ScenarioId::C,
        ScenarioId::D,
        ScenarioId::E,
        ScenarioId::F,
        ScenarioId::G,
        ScenarioId::H,
        ScenarioId::I,
        ScenarioId::J,
        ScenarioId::K,
        ScenarioId::L,
        ScenarioId::M,
    ];

    pub fn as_str(self) -> &'static str {
        const NAMES: [&str; 13] = ["A", "B", "C", "D", "E", "F", "G", "H", "I", "J", "K", "L", "M"];
        NAMES[self as usize]
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioId {
    type Err = ThreatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_uppercase();
        ScenarioId::ALL
            .into_iter()
            .find(|id| id.as_str() == t)
            .ok_or_else(|| ThreatError::UnknownScenario(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LibraryKnowledge {
    Full,
    Half,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributeAccess {
    PerIteration,
    PerAttack,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseKind {
    Sem,
    EnsembleSmoothed,
    SmoothedSingle,
    EnsemblePlain,
    SinglePlain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackFamily {
    WhiteTransfer,
    BlackScore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: ScenarioId,
    pub library_knowledge: LibraryKnowledge,
    pub attribute_access: AttributeAccess,
    pub defense: DefenseKind,
    pub attack_family: AttackFamily,
}

impl ScenarioSpec {
    pub fn of(id: ScenarioId) -> Self {
        use AttackFamily::*;
        use AttributeAccess as Acc;
        use DefenseKind::*;
        use LibraryKnowledge as Lib;
        let (library_knowledge, attribute_access, defense, attack_family) = match id {
            ScenarioId::A => (Lib::Full, Acc::PerIteration, Sem, WhiteTransfer),
            ScenarioId::B => (Lib::Full, Acc::PerAttack, Sem, WhiteTransfer),
            ScenarioId::C => (Lib::Half, Acc::PerIteration, Sem, WhiteTransfer),
            ScenarioId::D => (Lib::Half, Acc::None, Sem, WhiteTransfer),
            ScenarioId::E => (Lib::None, Acc::None, Sem, BlackScore),
            ScenarioId::F => (Lib::Full, Acc::None, EnsembleSmoothed, WhiteTransfer),
            ScenarioId::G => (Lib::Full, Acc::None, SmoothedSingle, WhiteTransfer),
            ScenarioId::H => (Lib::Full, Acc::None, EnsemblePlain, WhiteTransfer),
            ScenarioId::I => (Lib::Full, Acc::None, SinglePlain, WhiteTransfer),
            ScenarioId::J => (Lib::None, Acc::None, EnsembleSmoothed, BlackScore),
            ScenarioId::K => (Lib::None, Acc::None, SmoothedSingle, BlackScore),
            ScenarioId::L => (Lib::None, Acc::None, EnsemblePlain, BlackScore),
            ScenarioId::M => (Lib::None, Acc::None, SinglePlain, BlackScore),
        };
        Self {
            id,
            library_knowledge,
            attribute_access,
            defense,
            attack_family,
        }
    }
}

/// Noise-sample counts and the designated single model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Noise draws per smoothed member when an attacker takes a gradient.
    pub attack_noise_samples: usize,
    /// Noise draws per member in one hard prediction of the defense.
    pub vote_noise_samples: usize,
    /// Noise draws per member behind one score query.
    pub query_noise_samples: usize,
    /// Architecture of the single-model baselines; `None` picks the plain
    /// member with the highest clean accuracy.
    pub designated_arch: Option<String>,
    pub half_library_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            attack_noise_samples: 8,
            vote_noise_samples: 1,
            query_noise_samples: 8,
            designated_arch: None,
            half_library_seed: 0,
        }
    }
}

/// The attacker's share of the collection: `ceil(n_arch / 2)` architectures
/// with every one of their entries.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfLibrary {
    pub arch_indices: Vec<usize>,
    pub entry_ids: Vec<usize>,
    pub seed: u64,
}

impl HalfLibrary {
    pub fn select(c: &ModelCollection, seed: u64) -> Self {
        let n = c.arch_ids().len();
        let mut rng = RngStream::new(seed).derive_named("half-library");
        let mut arch_indices = index::sample(&mut rng, n, n.div_ceil(2)).into_vec();
        arch_indices.sort_unstable();
        let mut entry_ids: Vec<usize> = arch_indices
            .iter()
            .flat_map(|&a| c.entries_for_arch(a).iter().copied())
            .collect();
        entry_ids.sort_unstable();
        Self {
            arch_indices,
            entry_ids,
            seed,
        }
    }
}

/// Hard predictions and probability outputs of a defense under test. Every
/// call draws its own noise (and, for the SEM, its own attributes).
#[derive(Clone, Debug)]
pub enum DefensePredictor {
    Sem {
        collection: Arc<ModelCollection>,
        noise_samples: usize,
    },
    Fixed {
        members: Vec<SmoothedModel>,
        noise_samples: usize,
    },
}

impl DefensePredictor {
    /// Probability output with `m` noise draws per member.
    pub fn proba(&self, x: &Tensor, m: usize, rng: &mut RngStream) -> Result<Vec<f64>, ThreatError> {
        match self {
            DefensePredictor::Sem { collection, .. } => {
                let attrs = sample_attributes(collection, rng);
                Ok(sem_predict(collection, &attrs, x, m, rng)?)
            }
            DefensePredictor::Fixed { members, .. } => {
                let mut out = vec![0.0; members[0].base.class_count()];
                for sm in members {
                    let p = smoothed_soft_predict(sm, x, m, rng)?;
                    for (o, v) in out.iter_mut().zip(p) {
                        *o += v;
                    }
                }
                let k = members.len() as f64;
                out.iter_mut().for_each(|v| *v /= k);
                Ok(out)
            }
        }
    }

    fn noise_samples(&self) -> usize {
        match self {
            DefensePredictor::Sem { noise_samples, .. } | DefensePredictor::Fixed { noise_samples, .. } => {
                *noise_samples
            }
        }
    }

    /// True when repeated calls cannot disagree.
    pub fn is_deterministic(&self) -> bool {
        match self {
            DefensePredictor::Sem { .. } => false,
            DefensePredictor::Fixed { members, .. } => members.iter().all(|m| m.sigma == 0.0),
        }
    }
}

impl Classifier for DefensePredictor {
    fn class_count(&self) -> usize {
        match self {
            DefensePredictor::Sem { collection, .. } => collection.class_count(),
            DefensePredictor::Fixed { members, .. } => members[0].base.class_count(),
        }
    }

    fn classify(&self, x: &Tensor, rng: &mut RngStream) -> Result<usize, NetError> {
        match self.proba(x, self.noise_samples(), rng) {
            Ok(p) => Ok(argmax(&p)),
            Err(ThreatError::Net(e)) => Err(e),
            Err(ThreatError::Ensemble(EnsembleError::Net(e))) => Err(e),
            Err(ThreatError::Ensemble(EnsembleError::Smoothing(SmoothingError::Net(e)))) => Err(e),
            Err(ThreatError::Smoothing(SmoothingError::Net(e))) => Err(e),
            Err(other) => panic!("defense predictor invariant broken: {other}"),
        }
    }
}

/// Input gradient of the cross-entropy of an averaged soft output.
///
/// The output is the mean of `p(x + noise)` over members and, for smoothed
/// members, `m` noise draws each (sigma-0 members count once with weight `m`).
/// With per-draw losses `l_i = -ln p_i`, the gradient of `-ln(mean p)` is
/// `sum(p_i * grad l_i) / sum(p_i)`; weights are formed in the log domain.
pub fn soft_ensemble_grad(
    members: &[SmoothedModel],
    x: &Tensor,
    target: GradTarget,
    m: usize,
    rng: &mut RngStream,
) -> Result<Tensor, NetError> {
    let m = m.max(1);
    let class = target.class();
    let mut draws: Vec<(f64, f64, Tensor)> = Vec::new();
    for sm in members {
        if sm.sigma == 0.0 {
            let (l, g) = sm.base.loss_and_input_grad(x, class)?;
            draws.push((m as f64, l, g));
        } else {
            for _ in 0..m {
                let (l, g) = sm.base.loss_and_input_grad(&sm.perturb(x, rng), class)?;
                draws.push((1.0, l, g));
            }
        }
    }
    let l_min = draws.iter().map(|d| d.1).fold(f64::INFINITY, f64::min);
    let mut g = Tensor::zeros(x.shape());
    let mut total = 0.0;
    for (count, l, gi) in &draws {
        let w = count * (l_min - l).exp();
        g.add_scaled(gi, w);
        total += w;
    }
    g.scale(1.0 / total);
    Ok(g)
}

/// [`soft_ensemble_grad`] of a single smoothed member.
pub fn smoothed_input_grad(
    sm: &SmoothedModel,
    x: &Tensor,
    target: GradTarget,
    m: usize,
    rng: &mut RngStream,
) -> Result<Tensor, NetError> {
    soft_ensemble_grad(std::slice::from_ref(sm), x, target, m, rng)
}

enum Surrogate<'s> {
    Resample {
        collection: &'s ModelCollection,
        per_iteration: bool,
        fixed: Option<EnsembleAttributes>,
    },
    Fixed(Vec<SmoothedModel>),
}

/// The attacker's gradient channel. Attribute draws are logged so cadence
/// can be audited.
pub struct SurrogateOracle<'s> {
    source: Surrogate<'s>,
    noise_samples: usize,
    rng: RngStream,
    draws: Vec<EnsembleAttributes>,
}

impl SurrogateOracle<'_> {
    pub fn draw_log(&self) -> &[EnsembleAttributes] {
        &self.draws
    }
}

impl WhiteBoxOracle for SurrogateOracle<'_> {
    fn grad(&mut self, x: &Tensor, target: GradTarget) -> Result<Tensor, AttackError> {
        match &mut self.source {
            Surrogate::Fixed(members) => Ok(soft_ensemble_grad(members, x, target, self.noise_samples, &mut self.rng)?),
            Surrogate::Resample {
                collection,
                per_iteration,
                fixed,
            } => {
                let attrs = match fixed {
                    Some(a) if !*per_iteration => a.clone(),
                    _ => {
                        let a = sample_attributes(collection, &mut self.rng);
                        self.draws.push(a.clone());
                        *fixed = Some(a.clone());
                        a
                    }
                };
                let members: Vec<SmoothedModel> =
                    attrs.picks.iter().map(|&k| collection.entries()[k].smoothed()).collect();
                Ok(soft_ensemble_grad(&members, x, target, self.noise_samples, &mut self.rng)?)
            }
        }
    }
}

/// Score channel onto the defense.
pub struct DefenseScores<'s> {
    defense: &'s DefensePredictor,
    noise_samples: usize,
    rng: RngStream,
}

impl ScoreOracle for DefenseScores<'_> {
    fn scores(&mut self, x: &Tensor) -> Result<Vec<f64>, AttackError> {
        self.defense.proba(x, self.noise_samples, &mut self.rng).map_err(|e| match e {
            ThreatError::Attack(a) => a,
            ThreatError::Ensemble(e) => AttackError::Ensemble(e),
            ThreatError::Smoothing(e) => AttackError::Smoothing(e),
            ThreatError::Net(e) => AttackError::Net(e),
            other => AttackError::InvalidScores(other.to_string()),
        })
    }
}

/// What the evaluation harness needs from a scenario.
pub trait Engagement: Sync {
    /// One attack run on `(x, y)`.
    fn attack(&self, cfg: &AttackConfig, x: &Tensor, y: usize, rng: &mut RngStream) -> Result<Tensor, ThreatError>;
    fn defense(&self) -> &dyn Classifier;
    fn label(&self) -> String;
}

/// A wired scenario: the attacker's view plus the defense.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub config: ScenarioConfig,
    collection: Arc<ModelCollection>,
    half: Option<(HalfLibrary, ModelCollection)>,
    defense: DefensePredictor,
}

fn designated_plain(c: &ModelCollection, cfg: &ScenarioConfig) -> Result<usize, ThreatError> {
    if c.plain().is_empty() {
        return Err(ThreatError::Invalid("collection has no plain models".into()));
    }
    match &cfg.designated_arch {
        Some(id) => c
            .plain()
            .iter()
            .position(|p| p.arch_id == *id)
            .ok_or_else(|| ThreatError::Invalid(format!("designated architecture {id:?} has no plain model"))),
        None => {
            let mut best = 0;
            for (i, p) in c.plain().iter().enumerate() {
                let acc = |m: &Model| m.meta().clean_accuracy.unwrap_or(0.0);
                if acc(&p.model) > acc(&c.plain()[best].model) {
                    best = i;
                }
            }
            Ok(best)
        }
    }
}

/// The smoothed single-model baseline: the best-ACA smoothed entry of the
/// designated architecture (its plain entry if none was smoothable).
fn designated_smoothed(c: &ModelCollection, arch_id: &str) -> Result<SmoothedModel, ThreatError> {
    let a = c
        .arch_ids()
        .iter()
        .position(|id| id == arch_id)
        .ok_or_else(|| ThreatError::Invalid(format!("architecture {arch_id:?} not in collection")))?;
    let ids = c.entries_for_arch(a);
    let pick = ids
        .iter()
        .copied()
        .filter(|&k| c.entries()[k].sigma > 0.0)
        .max_by(|&p, &q| c.entries()[p].aca.total_cmp(&c.entries()[q].aca).then(q.cmp(&p)))
        .unwrap_or(ids[0]);
    Ok(c.entries()[pick].smoothed())
}

/// Wires scenario `id` over `collection`.
pub fn build_scenario(
    id: ScenarioId,
    collection: Arc<ModelCollection>,
    config: ScenarioConfig,
) -> Result<Scenario, ThreatError> {
    let spec = ScenarioSpec::of(id);
    let c = &collection;
    let vote = config.vote_noise_samples;
    if vote == 0 || config.attack_noise_samples == 0 || config.query_noise_samples == 0 {
        return Err(ThreatError::Invalid("noise sample counts must be positive".into()));
    }
    let plain = |m: &Arc<Model>| SmoothedModel::new(m.clone(), 0.0);
    let defense = match spec.defense {
        DefenseKind::Sem => DefensePredictor::Sem {
            collection: collection.clone(),
            noise_samples: vote,
        },
        DefenseKind::EnsembleSmoothed => DefensePredictor::Fixed {
            members: c.entries().iter().map(|e| e.smoothed()).collect(),
            noise_samples: vote,
        },
        DefenseKind::SmoothedSingle => {
            let p = designated_plain(c, &config)?;
            DefensePredictor::Fixed {
                members: vec![designated_smoothed(c, &c.plain()[p].arch_id)?],
                noise_samples: vote,
            }
        }
        DefenseKind::EnsemblePlain => {
            if c.plain().is_empty() {
                return Err(ThreatError::Invalid("collection has no plain models".into()));
            }
            DefensePredictor::Fixed {
                members: c.plain().iter().map(|p| plain(&p.model)).collect(),
                noise_samples: vote,
            }
        }
        DefenseKind::SinglePlain => DefensePredictor::Fixed {
            members: vec![plain(&c.plain()[designated_plain(c, &config)?].model)],
            noise_samples: vote,
        },
    };
    let half = if spec.library_knowledge == LibraryKnowledge::Half {
        let h = HalfLibrary::select(c, config.half_library_seed);
        let sub = c.restrict_to_archs(&h.arch_indices)?;
        Some((h, sub))
    } else {
        None
    };
    Ok(Scenario {
        spec,
        config,
        collection,
        half,
        defense,
    })
}

impl Scenario {
    pub fn id(&self) -> ScenarioId {
        self.spec.id
    }

    pub fn collection(&self) -> &ModelCollection {
        &self.collection
    }

    pub fn half_library(&self) -> Option<&HalfLibrary> {
        self.half.as_ref().map(|(h, _)| h)
    }

    pub fn defense_predictor(&self) -> &DefensePredictor {
        &self.defense
    }

    /// The attacker's gradient channel for one attack run.
    pub fn surrogate_oracle(&self, rng: RngStream) -> Result<SurrogateOracle<'_>, ThreatError> {
        let source = match (self.spec.id, &self.defense) {
            (ScenarioId::A, _) => Surrogate::Resample {
                collection: &self.collection,
                per_iteration: true,
                fixed: None,
            },
            (ScenarioId::B, _) => Surrogate::Resample {
                collection: &self.collection,
                per_iteration: false,
                fixed: None,
            },
            (ScenarioId::C, _) => Surrogate::Resample {
                collection: &self.half.as_ref().expect("half library").1,
                per_iteration: true,
                fixed: None,
            },
            (ScenarioId::D, _) => Surrogate::Fixed(
                self.half
                    .as_ref()
                    .expect("half library")
                    .1
                    .entries()
                    .iter()
                    .map(|e| SmoothedModel::new(e.model.clone(), 0.0))
                    .collect(),
            ),
            (ScenarioId::F | ScenarioId::G | ScenarioId::H | ScenarioId::I, DefensePredictor::Fixed { members, .. }) => {
                Surrogate::Fixed(members.clone())
            }
            (id, _) => {
                return Err(ThreatError::Incompatible {
                    scenario: id,
                    method: "gradient oracle".into(),
                    reason: "black-box scenarios expose scores only",
                })
            }
        };
        Ok(SurrogateOracle {
            source,
            noise_samples: self.config.attack_noise_samples,
            rng,
            draws: Vec::new(),
        })
    }

    /// The attacker's score channel for one attack run.
    pub fn score_oracle(&self, rng: RngStream) -> Result<DefenseScores<'_>, ThreatError> {
        if self.spec.attack_family != AttackFamily::BlackScore {
            return Err(ThreatError::Incompatible {
                scenario: self.spec.id,
                method: "score oracle".into(),
                reason: "white-box scenarios attack through a surrogate gradient",
            });
        }
        Ok(DefenseScores {
            defense: &self.defense,
            noise_samples: self.config.query_noise_samples,
            rng,
        })
    }

    /// Attack run that also returns the surrogate's attribute draw log.
    pub fn attack_logged(
        &self,
        cfg: &AttackConfig,
        x: &Tensor,
        y: usize,
        rng: &mut RngStream,
    ) -> Result<(Tensor, Vec<EnsembleAttributes>), ThreatError> {
        let white = self.spec.attack_family == AttackFamily::WhiteTransfer;
        if white == cfg.method.is_black_box() {
            return Err(ThreatError::Incompatible {
                scenario: self.spec.id,
                method: cfg.method.to_string(),
                reason: if white {
                    "white-box scenario needs a gradient attack"
                } else {
                    "black-box scenario needs a score-based attack"
                },
            });
        }
        let oracle_rng = rng.derive_named("oracle");
        if white {
            let mut o = self.surrogate_oracle(oracle_rng)?;
            let x_adv = run_attack(cfg, GradientOracle::White(&mut o), x, y, rng)?;
            Ok((x_adv, o.draws))
        } else {
            let mut o = self.score_oracle(oracle_rng)?;
            let x_adv = run_attack(cfg, GradientOracle::Score(&mut o), x, y, rng)?;
            Ok((x_adv, Vec::new()))
        }
    }
}

impl Engagement for Scenario {
    fn attack(&self, cfg: &AttackConfig, x: &Tensor, y: usize, rng: &mut RngStream) -> Result<Tensor, ThreatError> {
        Ok(self.attack_logged(cfg, x, y, rng)?.0)
    }

    fn defense(&self) -> &dyn Classifier {
        &self.defense
    }

    fn label(&self) -> String {
        self.spec.id.to_string()
    }
}
