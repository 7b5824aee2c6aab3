use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{CollectionEntry, EnsembleError, ModelCollection, PlainMember};
use crate::nets::{build_model, train, ArchitectureSpec, LabeledSet, Model, TrainConfig, ZooMember};
use crate::par::Exec;
use crate::rng::RngStream;
use crate::smoothing::{approximated_certified_accuracy, SmoothedModel};

/// How to train a heterogeneous redundant collection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectionRecipe {
    pub zoo: Vec<ZooMember>,
    pub sigmas: Vec<f64>,
    pub quantity_options: Vec<usize>,
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub train: TrainConfig,
    pub aca_trials: usize,
    pub alpha: f64,
    /// Entries with ACA at or below `1/C + margin` are flagged unsmoothable.
    /// `None` keeps every entry as trained.
    pub unsmoothable_margin: Option<f64>,
    pub seed: u64,
}

/// One row of the collection's accuracy table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcaRecord {
    pub arch_id: String,
    pub sigma: f64,
    pub clean_accuracy: f64,
    pub aca: f64,
    pub unsmoothable: bool,
}

fn train_one(
    arch: &ArchitectureSpec,
    sigma: f64,
    recipe: &CollectionRecipe,
    data: &LabeledSet,
    holdout: &LabeledSet,
    rng: &RngStream,
) -> Result<Model, EnsembleError> {
    let mut r = rng.clone();
    let init_seed = r.next_u64();
    let model = build_model(arch, init_seed)?;
    let cfg = TrainConfig {
        noise_sigma: sigma,
        ..recipe.train.clone()
    };
    Ok(train(&model, data, holdout, &cfg, &mut r)?)
}

/// Trains one plain model per architecture plus one model per (architecture,
/// sigma), grades every entry by ACA on `holdout`, and swaps failed entries for
/// the architecture's plain model. Work item `(a, s)` draws from
/// `RngStream::new(seed).derive_path([a, s])`, so results do not depend on `exec`.
pub fn build_collection(
    recipe: &CollectionRecipe,
    data: &LabeledSet,
    holdout: &LabeledSet,
    exec: Exec,
) -> Result<(ModelCollection, Vec<AcaRecord>), EnsembleError> {
    if recipe.zoo.is_empty() || recipe.sigmas.is_empty() {
        return Err(EnsembleError::InvalidCollection("empty zoo or sigma grid".into()));
    }
    if recipe.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(EnsembleError::InvalidCollection(format!("sigmas {:?}", recipe.sigmas)));
    }
    let archs = recipe
        .zoo
        .iter()
        .map(|z| ArchitectureSpec::from_template(&z.id, &z.template, &recipe.input_shape, recipe.class_count))
        .collect::<Result<Vec<_>, _>>()?;
    let root = RngStream::new(recipe.seed);
    let per_arch = recipe.sigmas.len() + 1;
    // slot 0 of each architecture is its plain model
    let models = exec.try_map(archs.len() * per_arch, |i| {
        let (a, s) = (i / per_arch, i % per_arch);
        let sigma = if s == 0 { 0.0 } else { recipe.sigmas[s - 1] };
        train_one(&archs[a], sigma, recipe, data, holdout, &root.derive_path(&[a as u64, s as u64]))
    })?;
    let models: Vec<Arc<Model>> = models.into_iter().map(Arc::new).collect();

    let graded = exec.try_map(archs.len() * recipe.sigmas.len(), |i| {
        let (a, s) = (i / recipe.sigmas.len(), i % recipe.sigmas.len());
        let sm = SmoothedModel::new(models[a * per_arch + s + 1].clone(), recipe.sigmas[s]);
        approximated_certified_accuracy(
            &sm,
            holdout,
            recipe.aca_trials,
            recipe.alpha,
            &root.derive_path(&[a as u64, s as u64 + 1, 7]),
            Exec::Sequential,
        )
    })?;

    let chance = 1.0 / recipe.class_count as f64;
    let mut entries = Vec::new();
    let mut plain = Vec::new();
    let mut table = Vec::new();
    for (a, arch) in archs.iter().enumerate() {
        let plain_model = models[a * per_arch].clone();
        plain.push(PlainMember {
            arch_id: arch.arch_id.clone(),
            model: plain_model.clone(),
        });
        let mut fallback_added = false;
        for (s, &sigma) in recipe.sigmas.iter().enumerate() {
            let model = models[a * per_arch + s + 1].clone();
            let aca = graded[a * recipe.sigmas.len() + s];
            let failed = recipe.unsmoothable_margin.is_some_and(|m| aca <= chance + m);
            table.push(AcaRecord {
                arch_id: arch.arch_id.clone(),
                sigma,
                clean_accuracy: model.meta().clean_accuracy.unwrap_or(0.0),
                aca,
                unsmoothable: failed,
            });
            if !failed {
                entries.push(CollectionEntry {
                    entry_id: 0,
                    arch_id: arch.arch_id.clone(),
                    sigma,
                    model,
                    aca,
                    unsmoothable: false,
                });
            } else if !fallback_added && !recipe.sigmas.contains(&0.0) {
                fallback_added = true;
                entries.push(CollectionEntry {
                    entry_id: 0,
                    arch_id: arch.arch_id.clone(),
                    sigma: 0.0,
                    aca: plain_model.meta().clean_accuracy.unwrap_or(0.0),
                    model: plain_model.clone(),
                    unsmoothable: true,
                });
            }
        }
    }
    let collection = ModelCollection::new(entries, plain, recipe.quantity_options.clone())?;
    Ok((collection, table))
}

/// `variants` seed-varied copies of one architecture, named `id#k`.
pub fn homogeneous_zoo(member: &ZooMember, variants: usize) -> Vec<ZooMember> {
    (0..variants)
        .map(|k| ZooMember {
            id: format!("{}#{k}", member.id),
            template: member.template.clone(),
        })
        .collect()
}
