//! Synthetic 8x8 pattern images and a reader for the CIFAR-10 binary layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, WorkbenchError};
use crate::kernel::Tensor;
use crate::nets::LabeledSet;
use crate::rng::RngStream;

pub const SIDE: usize = 8;
const CONTRAST: f64 = 0.35;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the per-pixel jitter.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            train_per_class: 150,
            test_per_class: 60,
            jitter: 0.15,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub train: LabeledSet,
    pub test: LabeledSet,
}

/// Number of classes the pattern family can express.
pub const MAX_CLASSES: usize = 16;

/// Walsh row `k` at position `i`: `(-1)^popcount(k & i)`.
fn walsh(k: usize, i: usize) -> f64 {
    if (k & i).count_ones().is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// Separable `+-1` pattern of class `c`: a product of a row and a column Walsh function.
pub fn class_pattern(c: usize) -> Vec<f64> {
    // pairs (a, b) ordered by a + b, skipping the constant (0, 0)
    let pairs: Vec<(usize, usize)> = (1..SIDE * 2)
        .flat_map(|s| (0..=s).map(move |a| (a, s - a)))
        .filter(|&(a, b)| a < SIDE && b < SIDE)
        .take(MAX_CLASSES)
        .collect();
    let (a, b) = pairs[c];
    (0..SIDE * SIDE).map(|p| walsh(a, p / SIDE) * walsh(b, p % SIDE)).collect()
}

fn sample(c: usize, jitter: f64, rng: &mut RngStream) -> Tensor {
    let mut px: Vec<f64> = class_pattern(c).iter().map(|v| 0.5 + CONTRAST * v).collect();
    if jitter > 0.0 {
        let mut noise = vec![0.0; px.len()];
        rng.fill_normal(&mut noise, jitter);
        for (p, n) in px.iter_mut().zip(noise) {
            *p = (*p + n).clamp(0.0, 1.0);
        }
    }
    Tensor::from_raw(vec![1, SIDE, SIDE], px)
}

fn split(spec: &DatasetSpec, per_class: usize, rng: &RngStream) -> LabeledSet {
    let mut set = LabeledSet::default();
    let mut r = rng.clone();
    // interleave classes so every prefix stays balanced
    for _ in 0..per_class {
        for c in 0..spec.classes {
            set.inputs.push(sample(c, spec.jitter, &mut r));
            set.labels.push(c);
        }
    }
    set
}

/// Deterministic train/test pattern dataset with values in `[0, 1]`.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<SyntheticDataset, WorkbenchError> {
    if spec.classes < 2 || spec.classes > MAX_CLASSES {
        return Err(WorkbenchError::Dataset(format!("classes must be in 2..={MAX_CLASSES}")));
    }
    if spec.train_per_class < 2 || spec.test_per_class < 2 {
        return Err(WorkbenchError::Dataset("need at least 2 samples per class and split".into()));
    }
    if !(spec.jitter >= 0.0 && spec.jitter.is_finite()) {
        return Err(WorkbenchError::Dataset(format!("jitter {}", spec.jitter)));
    }
    let root = RngStream::new(spec.seed);
    Ok(SyntheticDataset {
        train: split(spec, spec.train_per_class, &root.derive_named("train")),
        test: split(spec, spec.test_per_class, &root.derive_named("test")),
    })
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Reads CIFAR-10 binary records (label byte + 3072 channel-major pixels),
/// scaling pixels to `[0, 1]`. `limit` caps the number of records.
pub fn load_cifar10_bin(path: &Path, limit: Option<usize>) -> Result<LabeledSet, WorkbenchError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(WorkbenchError::Malformed {
            path: path.to_path_buf(),
            reason: format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
        });
    }
    let mut set = LabeledSet::default();
    for rec in bytes.chunks_exact(CIFAR_RECORD).take(limit.unwrap_or(usize::MAX)) {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(WorkbenchError::Malformed {
                path: path.to_path_buf(),
                reason: format!("label {label}"),
            });
        }
        let px = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
        set.inputs.push(Tensor::from_raw(vec![3, 32, 32], px));
        set.labels.push(label);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let spec = DatasetSpec::default();
        let a = gen_dataset(&spec).unwrap();
        assert_eq!(a, gen_dataset(&spec).unwrap());
        for x in a.train.inputs.iter().chain(&a.test.inputs) {
            assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(x.shape(), &[1, 8, 8]);
        }
        assert_ne!(a.train.inputs[0], a.test.inputs[0]);
    }

    #[test]
    fn balanced_classes() {
        let d = gen_dataset(&DatasetSpec::default()).unwrap();
        let mut counts = [0usize; 4];
        for &y in &d.train.labels {
            counts[y] += 1;
        }
        assert!(counts.iter().all(|&c| c == 150));
        let mut prefix = [0usize; 4];
        for &y in d.test.labels.iter().take(41) {
            prefix[y] += 1;
        }
        assert!(prefix.iter().max().unwrap() - prefix.iter().min().unwrap() <= 1);
    }

    #[test]
    fn zero_jitter_identical_within_class() {
        let spec = DatasetSpec {
            jitter: 0.0,
            ..DatasetSpec::default()
        };
        let d = gen_dataset(&spec).unwrap();
        for (x, &y) in d.train.inputs.iter().zip(&d.train.labels) {
            assert_eq!(x, &d.train.inputs[y]);
        }
    }

    #[test]
    fn patterns_are_orthogonal() {
        for a in 0..MAX_CLASSES {
            for b in 0..MAX_CLASSES {
                let dot: f64 = class_pattern(a).iter().zip(class_pattern(b)).map(|(p, q)| p * q).sum();
                assert_eq!(dot, if a == b { 64.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = DatasetSpec {
            classes: 1,
            ..DatasetSpec::default()
        };
        assert!(gen_dataset(&bad).is_err());
        let bad = DatasetSpec {
            train_per_class: 1,
            ..DatasetSpec::default()
        };
        assert!(gen_dataset(&bad).is_err());
    }

    #[test]
    fn cifar_reader() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 3;
        bytes[1] = 255;
        bytes[CIFAR_RECORD] = 9;
        std::fs::write(&p, &bytes).unwrap();
        let set = load_cifar10_bin(&p, None).unwrap();
        assert_eq!(set.labels, [3, 9]);
        assert_eq!(set.inputs[0].data()[0], 1.0);
        assert_eq!(set.inputs[0].shape(), &[3, 32, 32]);
        assert_eq!(load_cifar10_bin(&p, Some(1)).unwrap().len(), 1);
        std::fs::write(&p, &bytes[..100]).unwrap();
        assert!(matches!(load_cifar10_bin(&p, None), Err(WorkbenchError::Malformed { .. })));
    }
}
