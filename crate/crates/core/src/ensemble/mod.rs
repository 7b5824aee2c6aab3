//! The heterogeneous redundant model collection and the stochastic ensemble
//! built from it.
//!
//! Every prediction request draws fresh [`EnsembleAttributes`]: a member
//! quantity, that many distinct architectures, and one smoothing sigma per
//! chosen architecture. Averaged over draws, the stochastic ensemble equals a
//! fixed weighted ensemble of smoothed models whose weights are the exact
//! occurrence probabilities of each entry; [`sem_expectation_oracle`] checks
//! that equivalence numerically.

mod build;

pub use build::{build_collection, homogeneous_zoo, AcaRecord, CollectionRecipe};

use std::sync::Arc;

use rand::seq::index;
use thiserror::Error;

use crate::kernel::Tensor;
use crate::nets::{Model, NetError};
use crate::par::Exec;
use crate::rng::RngStream;
use crate::smoothing::{smoothed_soft_moments, Moments, SmoothedModel, SmoothingError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnsembleError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Smoothing(#[from] SmoothingError),
    #[error("invalid collection: {0}")]
    InvalidCollection(String),
    #[error("attributes reference entry {0}, which is not in the collection")]
    UnknownEntry(usize),
    #[error("invalid attributes: {0}")]
    InvalidAttributes(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("sampling tree too large to enumerate ({0} leaves)")]
    TooLargeToEnumerate(u128),
}

#[derive(Clone, Debug)]
pub struct CollectionEntry {
    pub entry_id: usize,
    pub arch_id: String,
    pub sigma: f64,
    pub model: Arc<Model>,
    pub aca: f64,
    pub unsmoothable: bool,
}

impl CollectionEntry {
    pub fn smoothed(&self) -> SmoothedModel {
        SmoothedModel::new(self.model.clone(), self.sigma)
    }
}

/// A noise-free model per architecture, used by the plain baselines.
#[derive(Clone, Debug)]
pub struct PlainMember {
    pub arch_id: String,
    pub model: Arc<Model>,
}

#[derive(Clone, Debug)]
pub struct ModelCollection {
    entries: Vec<CollectionEntry>,
    plain: Vec<PlainMember>,
    quantity_options: Vec<usize>,
    arch_ids: Vec<String>,
    by_arch: Vec<Vec<usize>>,
}

impl ModelCollection {
    /// Validates and indexes a collection. Entry ids are reassigned to positions.
    pub fn new(
        mut entries: Vec<CollectionEntry>,
        plain: Vec<PlainMember>,
        quantity_options: Vec<usize>,
    ) -> Result<Self, EnsembleError> {
        let bad = |s: String| Err(EnsembleError::InvalidCollection(s));
        if entries.is_empty() {
            return bad("no entries".into());
        }
        let mut arch_ids: Vec<String> = Vec::new();
        let mut by_arch: Vec<Vec<usize>> = Vec::new();
        for (i, e) in entries.iter_mut().enumerate() {
            e.entry_id = i;
            if !(e.sigma >= 0.0 && e.sigma.is_finite()) {
                return bad(format!("entry {i}: sigma {}", e.sigma));
            }
            if e.unsmoothable && e.sigma != 0.0 {
                return bad(format!("entry {i}: unsmoothable entries must carry sigma 0"));
            }
            let a = match arch_ids.iter().position(|id| *id == e.arch_id) {
                Some(a) => a,
                None => {
                    arch_ids.push(e.arch_id.clone());
                    by_arch.push(Vec::new());
                    arch_ids.len() - 1
                }
            };
            by_arch[a].push(i);
        }
        for (a, idx) in by_arch.iter().enumerate() {
            for (j, &p) in idx.iter().enumerate() {
                for &q in &idx[j + 1..] {
                    if entries[p].sigma == entries[q].sigma {
                        return bad(format!("duplicate ({}, {})", arch_ids[a], entries[p].sigma));
                    }
                }
            }
        }
        let mut plain_ids: Vec<&str> = plain.iter().map(|p| p.arch_id.as_str()).collect();
        plain_ids.sort_unstable();
        plain_ids.dedup();
        if plain_ids.len() != plain.len() {
            return bad("duplicate plain member".into());
        }
        let mut q = quantity_options;
        q.sort_unstable();
        q.dedup();
        if q.is_empty() || q[0] == 0 {
            return bad("quantity options must be a nonempty set of positive ints".into());
        }
        if *q.last().unwrap() > arch_ids.len() {
            return bad(format!(
                "max quantity {} exceeds {} architectures",
                q.last().unwrap(),
                arch_ids.len()
            ));
        }
        Ok(Self {
            entries,
            plain,
            quantity_options: q,
            arch_ids,
            by_arch,
        })
    }

    pub fn entries(&self) -> &[CollectionEntry] {
        &self.entries
    }

    pub fn plain(&self) -> &[PlainMember] {
        &self.plain
    }

    pub fn quantity_options(&self) -> &[usize] {
        &self.quantity_options
    }

    pub fn arch_ids(&self) -> &[String] {
        &self.arch_ids
    }

    /// Entry indices of architecture `arch` (index into [`Self::arch_ids`]).
    pub fn entries_for_arch(&self, arch: usize) -> &[usize] {
        &self.by_arch[arch]
    }

    pub fn class_count(&self) -> usize {
        self.entries[0].model.class_count()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.entries[0].model.input_shape()
    }

    pub fn find(&self, arch_id: &str, sigma: f64) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.arch_id == arch_id && e.sigma == sigma)
    }

    pub fn with_quantity_options(&self, options: Vec<usize>) -> Result<Self, EnsembleError> {
        Self::new(self.entries.clone(), self.plain.clone(), options)
    }

    /// Sub-collection holding every entry (and plain member) of the listed
    /// architectures. Quantity options that no longer fit are dropped.
    pub fn restrict_to_archs(&self, archs: &[usize]) -> Result<Self, EnsembleError> {
        let keep: Vec<&str> = archs.iter().map(|&a| self.arch_ids[a].as_str()).collect();
        let entries = self
            .entries
            .iter()
            .filter(|e| keep.contains(&e.arch_id.as_str()))
            .cloned()
            .collect();
        let plain = self
            .plain
            .iter()
            .filter(|p| keep.contains(&p.arch_id.as_str()))
            .cloned()
            .collect();
        let n = keep.len();
        let mut q: Vec<usize> = self.quantity_options.iter().copied().filter(|&q| q <= n).collect();
        if q.is_empty() {
            q.push(n);
        }
        Self::new(entries, plain, q)
    }
}

/// One stochastic-ensemble draw: the member quantity and the chosen entries.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EnsembleAttributes {
    pub quantity: usize,
    pub picks: Vec<usize>,
}

impl EnsembleAttributes {
    /// `(arch_id, sigma)` of every pick.
    pub fn describe(&self, c: &ModelCollection) -> Vec<(String, f64)> {
        self.picks
            .iter()
            .map(|&k| (c.entries[k].arch_id.clone(), c.entries[k].sigma))
            .collect()
    }

    pub fn validate(&self, c: &ModelCollection) -> Result<(), EnsembleError> {
        if !c.quantity_options.contains(&self.quantity) || self.picks.len() != self.quantity {
            return Err(EnsembleError::InvalidAttributes(format!(
                "quantity {} with {} picks",
                self.quantity,
                self.picks.len()
            )));
        }
        let mut seen: Vec<&str> = Vec::with_capacity(self.picks.len());
        for &k in &self.picks {
            let e = c.entries.get(k).ok_or(EnsembleError::UnknownEntry(k))?;
            if seen.contains(&e.arch_id.as_str()) {
                return Err(EnsembleError::InvalidAttributes(format!("architecture {} picked twice", e.arch_id)));
            }
            seen.push(&e.arch_id);
        }
        Ok(())
    }
}

/// Draws attributes: quantity uniform over the options, then that many
/// distinct architectures uniformly without replacement, then one sigma per
/// architecture uniformly over the sigmas available for it.
pub fn sample_attributes(c: &ModelCollection, rng: &mut RngStream) -> EnsembleAttributes {
    let quantity = c.quantity_options[rng.below(c.quantity_options.len())];
    let archs = index::sample(rng, c.arch_ids.len(), quantity).into_vec();
    let picks = archs
        .into_iter()
        .map(|a| {
            let options = &c.by_arch[a];
            options[rng.below(options.len())]
        })
        .collect();
    EnsembleAttributes { quantity, picks }
}

/// Mean of the picked members' smoothed soft predictions (`m` noise draws each,
/// drawn from `rng` in pick order). Members with sigma 0 contribute their plain softmax.
pub fn sem_predict(
    c: &ModelCollection,
    attrs: &EnsembleAttributes,
    x: &Tensor,
    m: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>, EnsembleError> {
    attrs.validate(c)?;
    let mut acc = Moments::new(c.class_count());
    for &k in &attrs.picks {
        let (p, _) = smoothed_soft_moments(&c.entries[k].smoothed(), x, m, rng)?;
        acc.push(&p);
    }
    Ok(acc.into_mean())
}

fn check_weights(c: &ModelCollection, weights: &[f64]) -> Result<(), EnsembleError> {
    if weights.len() != c.entries.len() {
        return Err(EnsembleError::InvalidWeights(format!(
            "{} weights for {} entries",
            weights.len(),
            c.entries.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(EnsembleError::InvalidWeights("weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(EnsembleError::InvalidWeights(format!("weights sum to {total}")));
    }
    Ok(())
}

/// Weighted mean and squared standard error of a fixed smoothed ensemble.
/// Entry `k` draws its noise from `rng.derive(k)`; zero-weight entries are skipped.
fn sween_moments(
    c: &ModelCollection,
    weights: &[f64],
    x: &Tensor,
    m: usize,
    rng: &RngStream,
) -> Result<(Vec<f64>, Vec<f64>), EnsembleError> {
    check_weights(c, weights)?;
    let classes = c.class_count();
    let mut out = vec![0.0; classes];
    let mut se2 = vec![0.0; classes];
    for (k, (entry, &w)) in c.entries.iter().zip(weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let (p, var) = smoothed_soft_moments(&entry.smoothed(), x, m, &mut rng.derive(k as u64))?;
        for j in 0..classes {
            out[j] += w * p[j];
            se2[j] += w * w * var[j] / m as f64;
        }
    }
    Ok((out, se2))
}

/// `sum_k w_k * g_k(x)`: fixed weighted ensemble of smoothed entries.
pub fn sween_predict(
    c: &ModelCollection,
    weights: &[f64],
    x: &Tensor,
    m: usize,
    rng: &RngStream,
) -> Result<Vec<f64>, EnsembleError> {
    Ok(sween_moments(c, weights, x, m, rng)?.0)
}

/// Largest sampling tree [`occurrence_weights`] will walk.
const MAX_ENUMERATION: u128 = 5_000_000;

/// Exact expected share of each entry in one stochastic-ensemble prediction,
/// `E[1{k picked} / quantity]`, by walking every branch of the sampling tree.
pub fn occurrence_weights(c: &ModelCollection) -> Result<Vec<f64>, EnsembleError> {
    let n = c.arch_ids.len();
    let mut leaves: u128 = 0;
    for &q in &c.quantity_options {
        for subset in combinations(n, q) {
            leaves += subset.iter().map(|&a| c.by_arch[a].len() as u128).product::<u128>();
            if leaves > MAX_ENUMERATION {
                return Err(EnsembleError::TooLargeToEnumerate(leaves));
            }
        }
    }
    let mut w = vec![0.0; c.entries.len()];
    let p_quantity = 1.0 / c.quantity_options.len() as f64;
    for &q in &c.quantity_options {
        let subsets = combinations(n, q);
        let p_subset = p_quantity / subsets.len() as f64;
        for subset in subsets {
            let mut choice = vec![0usize; q];
            loop {
                let mut p = p_subset / q as f64;
                for (slot, &a) in subset.iter().enumerate() {
                    p /= c.by_arch[a].len() as f64;
                    let _ = slot;
                }
                for (slot, &a) in subset.iter().enumerate() {
                    w[c.by_arch[a][choice[slot]]] += p;
                }
                // odometer over the sigma choices
                let mut slot = 0;
                while slot < q {
                    choice[slot] += 1;
                    if choice[slot] < c.by_arch[subset[slot]].len() {
                        break;
                    }
                    choice[slot] = 0;
                    slot += 1;
                }
                if slot == q {
                    break;
                }
            }
        }
    }
    Ok(w)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Monte-Carlo SEM mean against the exact-weight SWEEN reference.
#[derive(Clone, Debug)]
pub struct EquivalenceReport {
    pub mean_sem: Vec<f64>,
    pub sween_ref: Vec<f64>,
    pub max_abs_gap: f64,
    /// Standard error of `mean_sem` per class, from the empirical variance across draws.
    pub sem_se: Vec<f64>,
    /// Standard error of `sween_ref` per class.
    pub sween_se: Vec<f64>,
    pub weights: Vec<f64>,
}

impl EquivalenceReport {
    pub fn combined_se(&self) -> Vec<f64> {
        self.sem_se
            .iter()
            .zip(&self.sween_se)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .collect()
    }

    /// True when every class gap is within `k` combined standard errors.
    pub fn within(&self, k: f64) -> bool {
        self.mean_sem
            .iter()
            .zip(&self.sween_ref)
            .zip(self.combined_se())
            .all(|((a, b), se)| (a - b).abs() <= k * se)
    }
}

/// Averages `draws` independent SEM predictions (draw `d` uses
/// `rng.derive_path([0, d])`) and compares them with [`sween_predict`] under the
/// exact occurrence weights. The reference spends `m * draws / entries`
/// samples per entry (at least `m`), matching the SEM side's per-entry budget.
pub fn sem_expectation_oracle(
    c: &ModelCollection,
    x: &Tensor,
    draws: usize,
    m: usize,
    rng: &RngStream,
    exec: Exec,
) -> Result<EquivalenceReport, EnsembleError> {
    if draws == 0 {
        return Err(EnsembleError::Smoothing(SmoothingError::NoTrials));
    }
    let outputs = exec.try_map(draws, |d| {
        let mut r = rng.derive_path(&[0, d as u64]);
        let attrs = sample_attributes(c, &mut r);
        sem_predict(c, &attrs, x, m, &mut r)
    })?;
    let mut acc = Moments::new(c.class_count());
    for o in &outputs {
        acc.push(o);
    }
    let sem_se = acc
        .variance()
        .iter()
        .map(|v| (v / acc.count() as f64).sqrt())
        .collect();
    let weights = occurrence_weights(c)?;
    let ref_m = (m * draws / c.entries.len()).max(m);
    let (sween_ref, se2) = sween_moments(c, &weights, x, ref_m, &rng.derive(1))?;
    let mean_sem = acc.mean().to_vec();
    let max_abs_gap = mean_sem
        .iter()
        .zip(&sween_ref)
        .fold(0.0f64, |g, (a, b)| g.max((a - b).abs()));
    Ok(EquivalenceReport {
        mean_sem,
        sween_ref,
        max_abs_gap,
        sem_se,
        sween_se: se2.iter().map(|v| v.sqrt()).collect(),
        weights,
    })
}
