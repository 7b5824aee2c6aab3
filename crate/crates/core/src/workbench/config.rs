//! The TOML run configuration. Every constant of the protocol lives here with
//! its default; seeds are always explicit.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::DatasetSpec;
use super::{io_err, WorkbenchError};
use crate::attacks::{AttackConfig, AttackMethod, Norm};
use crate::ensemble::CollectionRecipe;
use crate::evaluation::{AblationPlan, JudgeConfig, SearchConfig};
use crate::nets::{default_zoo, TrainConfig, ZooMember};
use crate::par::Exec;
use crate::threat::ScenarioConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectionSection {
    pub sigmas: Vec<f64>,
    pub quantity_options: Vec<usize>,
    pub aca_trials: usize,
    pub unsmoothable_margin: Option<f64>,
    pub seed: u64,
    pub training: TrainConfig,
}

impl Default for CollectionSection {
    fn default() -> Self {
        Self {
            sigmas: vec![0.25, 0.75, 1.5],
            quantity_options: vec![1, 2, 3],
            aca_trials: 100,
            unsmoothable_margin: Some(0.05),
            seed: 11,
            training: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_trials: usize,
    pub alpha: f64,
    /// Test samples attacked per curve.
    pub samples: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_trials: 100,
            alpha: 0.3,
            samples: 200,
            seed: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub norm: Norm,
    pub iterations: usize,
    pub step_size: Option<f64>,
    pub momentum_mu: f64,
    pub query_budget: usize,
    pub est_samples: usize,
    pub est_radius: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        let d = AttackConfig::new(AttackMethod::Bim);
        Self {
            norm: d.norm,
            iterations: d.iterations,
            step_size: d.step_size,
            momentum_mu: d.momentum_mu,
            query_budget: d.query_budget,
            est_samples: d.est_samples,
            est_radius: d.est_radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub exec: Exec,
    pub dataset: DatasetSpec,
    pub zoo: Vec<ZooMember>,
    pub collection: CollectionSection,
    pub eval: EvalSection,
    pub attack: AttackSection,
    pub search: SearchConfig,
    pub sem: ScenarioConfig,
    pub ablation: AblationPlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("semlab-out"),
            exec: Exec::Parallel,
            dataset: DatasetSpec::default(),
            zoo: default_zoo(),
            collection: CollectionSection::default(),
            eval: EvalSection::default(),
            attack: AttackSection::default(),
            search: SearchConfig::default(),
            sem: ScenarioConfig::default(),
            ablation: AblationPlan::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, WorkbenchError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| WorkbenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, WorkbenchError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), WorkbenchError> {
        let bad = |s: String| Err(WorkbenchError::Config(s));
        if !(self.eval.alpha > 0.0 && self.eval.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", self.eval.alpha));
        }
        if self.eval.n_trials == 0 || self.eval.samples == 0 {
            return bad("eval.n_trials and eval.samples must be positive".into());
        }
        if self.zoo.is_empty() {
            return bad("zoo is empty".into());
        }
        let mut ids: Vec<&str> = self.zoo.iter().map(|z| z.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.zoo.len() {
            return bad("duplicate zoo ids".into());
        }
        let c = &self.collection;
        if c.sigmas.is_empty() || c.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad(format!("collection.sigmas {:?}", c.sigmas));
        }
        if c.quantity_options.is_empty() || c.quantity_options.iter().any(|&q| q == 0 || q > self.zoo.len()) {
            return bad(format!(
                "collection.quantity_options {:?} must lie in 1..={}",
                c.quantity_options,
                self.zoo.len()
            ));
        }
        if c.aca_trials == 0 {
            return bad("collection.aca_trials must be positive".into());
        }
        for (what, id) in [
            ("sem.designated_arch", self.sem.designated_arch.as_deref()),
            ("ablation.homogeneous_arch", Some(self.ablation.homogeneous_arch.as_str())),
        ] {
            if let Some(id) = id {
                if !self.zoo.iter().any(|z| z.id == id) {
                    return bad(format!("{what} {id:?} is not in the zoo"));
                }
            }
        }
        if self.search.coarse_steps == 0 {
            return bad("search.coarse_steps must be at least 1".into());
        }
        self.attack_config(AttackMethod::Bim)
            .with_epsilon(0.1)
            .validate()
            .map_err(|e| WorkbenchError::Config(e.to_string()))?;
        self.attack_config(AttackMethod::Nes)
            .with_epsilon(0.1)
            .validate()
            .map_err(|e| WorkbenchError::Config(e.to_string()))?;
        Ok(())
    }

    /// Attack template for `method` (untargeted, epsilon 0).
    pub fn attack_config(&self, method: AttackMethod) -> AttackConfig {
        let a = &self.attack;
        AttackConfig {
            norm: a.norm,
            iterations: if method == AttackMethod::Fgsm { 1 } else { a.iterations },
            step_size: a.step_size,
            momentum_mu: a.momentum_mu,
            query_budget: a.query_budget,
            est_samples: a.est_samples,
            est_radius: a.est_radius,
            ..AttackConfig::new(method)
        }
    }

    pub fn judge(&self) -> JudgeConfig {
        JudgeConfig {
            n_trials: self.eval.n_trials,
            alpha: self.eval.alpha,
        }
    }

    pub fn recipe(&self) -> CollectionRecipe {
        let c = &self.collection;
        CollectionRecipe {
            zoo: self.zoo.clone(),
            sigmas: c.sigmas.clone(),
            quantity_options: c.quantity_options.clone(),
            input_shape: vec![1, super::dataset::SIDE, super::dataset::SIDE],
            class_count: self.dataset.classes,
            train: c.training.clone(),
            aca_trials: c.aca_trials,
            alpha: self.eval.alpha,
            unsmoothable_margin: c.unsmoothable_margin,
            seed: c.seed,
        }
    }

    /// Every seed the run depends on, for provenance lines in output files.
    pub fn seeds(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("dataset", self.dataset.seed),
            ("collection", self.collection.seed),
            ("eval", self.eval.seed),
            ("half_library", self.sem.half_library_seed),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_protocol_constants() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.eval.alpha, 0.3);
        assert_eq!(c.attack.iterations, 20);
        assert_eq!(c.attack.query_budget, 5000);
        assert_eq!(c.search.coarse_steps, 10);
        assert_eq!(c.search.binary_steps, 20);
        assert_eq!(c.collection.quantity_options, [1, 2, 3]);
        assert_eq!(c.ablation.quantity_high, [6, 7, 8]);
        assert_eq!(c.attack_config(AttackMethod::Mim).momentum_mu, 1.0);
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml("output_dir = \"x\"\n[eval]\nsamples = 12\n").unwrap();
        assert_eq!(c.eval.samples, 12);
        assert_eq!(c.eval.alpha, 0.3);
        assert_eq!(c.zoo.len(), 8);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("[eval]\nalpha = 1.5\n").is_err());
        assert!(RunConfig::from_toml("[collection]\nquantity_options = [9]\n").is_err());
        assert!(RunConfig::from_toml("[sem]\ndesignated_arch = \"resnet\"\n").is_err());
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[attack]\niterations = 0\n").is_err());
    }
}
