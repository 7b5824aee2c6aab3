//! The toy heterogeneous classifier zoo: architecture specs, models, exact
//! loss/gradient queries and noisy SGD training.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{
    argmax, gaussian_sample, softmax, softmax_cross_entropy, softmax_cross_entropy_grad, KernelError, LayerCache,
    LayerDescriptor, Tensor,
};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("invalid architecture {arch}: {reason}")]
    InvalidArch { arch: String, reason: String },
    #[error("input shape {found:?} does not match architecture input {expected:?}")]
    InputShape { expected: Vec<usize>, found: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training setting: {0}")]
    InvalidTraining(String),
}

/// Which class the cross-entropy loss is taken against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    /// Untargeted attacks ascend the loss of the true label.
    TrueLabel(usize),
    /// Targeted attacks descend the loss of the target label.
    Target(usize),
}

impl GradTarget {
    pub fn class(self) -> usize {
        match self {
            GradTarget::TrueLabel(c) | GradTarget::Target(c) => c,
        }
    }

    pub fn is_targeted(self) -> bool {
        matches!(self, GradTarget::Target(_))
    }
}

/// Compact architecture description used in configuration files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "template", rename_all = "kebab-case")]
pub enum ArchTemplate {
    /// flatten, then `dense+relu` per hidden width, then the class layer.
    Mlp { hidden: Vec<usize> },
    /// `conv+relu` per channel count, optional average pool, flatten, hidden dense layers.
    Cnn {
        channels: Vec<usize>,
        kernel: usize,
        pool: usize,
        #[serde(default)]
        hidden: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZooMember {
    pub id: String,
    #[serde(flatten)]
    pub template: ArchTemplate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub arch_id: String,
    pub layers: Vec<LayerDescriptor>,
    pub input_shape: Vec<usize>,
    pub class_count: usize,
}

impl ArchitectureSpec {
    pub fn from_template(
        arch_id: &str,
        template: &ArchTemplate,
        input_shape: &[usize],
        class_count: usize,
    ) -> Result<Self, NetError> {
        let invalid = |reason: String| NetError::InvalidArch {
            arch: arch_id.to_string(),
            reason,
        };
        let mut layers = Vec::new();
        let mut shape = input_shape.to_vec();
        let mut push = |layer: LayerDescriptor, shape: &mut Vec<usize>| -> Result<(), NetError> {
            *shape = layer.output_shape(shape).map_err(|e| invalid(e.to_string()))?;
            layers.push(layer);
            Ok(())
        };
        let hidden = match template {
            ArchTemplate::Mlp { hidden } => hidden,
            ArchTemplate::Cnn {
                channels,
                kernel,
                pool,
                hidden,
            } => {
                for &ch in channels {
                    let in_channels = *shape.first().ok_or_else(|| invalid("empty input shape".into()))?;
                    push(
                        LayerDescriptor::Conv2d {
                            in_channels,
                            out_channels: ch,
                            kernel: *kernel,
                        },
                        &mut shape,
                    )?;
                    push(LayerDescriptor::Relu, &mut shape)?;
                }
                if *pool > 1 {
                    push(LayerDescriptor::AvgPool { size: *pool }, &mut shape)?;
                }
                hidden
            }
        };
        push(LayerDescriptor::Flatten, &mut shape)?;
        for &width in hidden {
            push(
                LayerDescriptor::Dense {
                    inputs: shape[0],
                    outputs: width,
                },
                &mut shape,
            )?;
            push(LayerDescriptor::Relu, &mut shape)?;
        }
        push(
            LayerDescriptor::Dense {
                inputs: shape[0],
                outputs: class_count,
            },
            &mut shape,
        )?;
        let spec = Self {
            arch_id: arch_id.to_string(),
            layers,
            input_shape: input_shape.to_vec(),
            class_count,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the shape chain end to end and returns the per-layer output shapes.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>, NetError> {
        if self.class_count < 2 {
            return Err(NetError::InvalidArch {
                arch: self.arch_id.clone(),
                reason: "need at least two classes".into(),
            });
        }
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, LayerDescriptor::SoftmaxHead { .. }) {
                return Err(NetError::InvalidArch {
                    arch: self.arch_id.clone(),
                    reason: format!("layer {i}: the softmax head is applied by the model, not listed"),
                });
            }
            shape = layer
                .output_shape(&shape)
                .map_err(|e| NetError::Kernel(e.at_layer(i)))?;
            shapes.push(shape.clone());
        }
        if shape != [self.class_count] {
            return Err(NetError::InvalidArch {
                arch: self.arch_id.clone(),
                reason: format!("final output {shape:?} != [{}]", self.class_count),
            });
        }
        Ok(shapes)
    }

    /// Number of parametric layers.
    pub fn depth(&self) -> usize {
        self.layers.iter().filter(|l| !l.param_shapes().is_empty()).count()
    }

    /// Largest hidden width (dense outputs or conv channels), excluding the class layer.
    pub fn width(&self) -> usize {
        let n = self.layers.len();
        self.layers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i + 1 != n)
            .map(|(_, l)| match *l {
                LayerDescriptor::Dense { outputs, .. } => outputs,
                LayerDescriptor::Conv2d { out_channels, .. } => out_channels,
                _ => 0,
            })
            .max()
            .unwrap_or(0)
    }
}

/// True when `specs` spans enough structural variety to count as a heterogeneous zoo.
pub fn is_heterogeneous_zoo(specs: &[ArchitectureSpec]) -> bool {
    let mut ids: Vec<&str> = specs.iter().map(|s| s.arch_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut depths: Vec<usize> = specs.iter().map(|s| s.depth()).collect();
    depths.sort_unstable();
    depths.dedup();
    let mut widths: Vec<usize> = specs.iter().map(|s| s.width()).collect();
    widths.sort_unstable();
    widths.dedup();
    ids.len() >= 6 && depths.len() >= 2 && widths.len() >= 2
}

/// The eight-member default zoo for single-channel images.
pub fn default_zoo() -> Vec<ZooMember> {
    let mlp = |id: &str, hidden: &[usize]| ZooMember {
        id: id.into(),
        template: ArchTemplate::Mlp { hidden: hidden.to_vec() },
    };
    let cnn = |id: &str, channels: &[usize], pool: usize, hidden: &[usize]| ZooMember {
        id: id.into(),
        template: ArchTemplate::Cnn {
            channels: channels.to_vec(),
            kernel: 3,
            pool,
            hidden: hidden.to_vec(),
        },
    };
    vec![
        mlp("mlp-narrow", &[16]),
        mlp("mlp-wide", &[48]),
        mlp("mlp-deep", &[32, 16]),
        mlp("mlp-deep-wide", &[48, 24]),
        cnn("cnn-narrow", &[4], 2, &[]),
        cnn("cnn-wide", &[8], 2, &[]),
        cnn("cnn-deep", &[4, 8], 2, &[]),
        cnn("cnn-dense", &[6], 2, &[16]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub noise_sigma: f64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub clean_accuracy: Option<f64>,
}

/// Input/label pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSet {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn take(&self, n: usize) -> LabeledSet {
        LabeledSet {
            inputs: self.inputs.iter().take(n).cloned().collect(),
            labels: self.labels.iter().take(n).copied().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub noise_sigma: f64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.0,
            epochs: 20,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 16,
        }
    }
}

pub type ParamGrads = Vec<Vec<Tensor>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: ArchitectureSpec,
    params: Vec<Vec<Tensor>>,
    meta: TrainMeta,
}

/// Scaled-normal initialisation: He for layers feeding a ReLU, Glorot-style
/// `1/fan_in` variance for the class layer. Biases start at zero.
pub fn build_model(arch: &ArchitectureSpec, seed: u64) -> Result<Model, NetError> {
    arch.validate()?;
    let root = RngStream::new(seed).derive_named("init");
    let last_param = arch.layers.iter().rposition(|l| !l.param_shapes().is_empty());
    let params = arch
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let shapes = layer.param_shapes();
            if shapes.is_empty() {
                return Vec::new();
            }
            let fan_in = layer.fan_in() as f64;
            let gain = if Some(i) == last_param { 1.0 } else { 2.0 };
            let mut rng = root.derive(i as u64);
            let w = gaussian_sample(&shapes[0], (gain / fan_in).sqrt(), &mut rng);
            vec![w, Tensor::zeros(&shapes[1])]
        })
        .collect();
    Ok(Model {
        arch: arch.clone(),
        params,
        meta: TrainMeta {
            noise_sigma: 0.0,
            epochs: 0,
            lr: 0.0,
            momentum: 0.0,
            seed,
            clean_accuracy: None,
        },
    })
}

impl Model {
    /// Reassembles a model from parts, checking parameter shapes against the architecture.
    pub fn from_parts(arch: ArchitectureSpec, params: Vec<Vec<Tensor>>, meta: TrainMeta) -> Result<Self, NetError> {
        arch.validate()?;
        if params.len() != arch.layers.len() {
            return Err(NetError::InvalidArch {
                arch: arch.arch_id.clone(),
                reason: format!("{} parameter groups for {} layers", params.len(), arch.layers.len()),
            });
        }
        for (i, (layer, p)) in arch.layers.iter().zip(&params).enumerate() {
            let shapes = layer.param_shapes();
            if shapes.len() != p.len() || shapes.iter().zip(p).any(|(s, t)| s.as_slice() != t.shape()) {
                return Err(NetError::Kernel(KernelError::ParamMismatch {
                    layer: i,
                    kind: layer.name(),
                    expected: shapes,
                    found: p.iter().map(|t| t.shape().to_vec()).collect(),
                }));
            }
        }
        Ok(Self { arch, params, meta })
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn params(&self) -> &[Vec<Tensor>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<Tensor>] {
        &mut self.params
    }

    pub fn meta(&self) -> &TrainMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut TrainMeta {
        &mut self.meta
    }

    pub fn class_count(&self) -> usize {
        self.arch.class_count
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.arch.input_shape
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NetError> {
        if x.shape() != self.arch.input_shape.as_slice() {
            return Err(NetError::InputShape {
                expected: self.arch.input_shape.clone(),
                found: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<(), NetError> {
        if label >= self.arch.class_count {
            return Err(NetError::LabelOutOfRange {
                label,
                classes: self.arch.class_count,
            });
        }
        Ok(())
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<LayerCache>), NetError> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.arch.layers.len());
        let mut h = x.clone();
        for (i, (layer, p)) in self.arch.layers.iter().zip(&self.params).enumerate() {
            let (out, cache) = layer.apply(p, &h).map_err(|e| e.at_layer(i))?;
            caches.push(cache);
            h = out;
        }
        Ok((h, caches))
    }

    fn backward(&self, caches: &[LayerCache], grad_logits: Tensor) -> Result<(Tensor, ParamGrads), NetError> {
        let mut g = grad_logits;
        let mut grads = vec![Vec::new(); self.arch.layers.len()];
        for i in (0..self.arch.layers.len()).rev() {
            let (gi, pg) = self.arch.layers[i]
                .backprop(&self.params[i], &caches[i], &g)
                .map_err(|e| e.at_layer(i))?;
            grads[i] = pg;
            g = gi;
        }
        Ok((g, grads))
    }

    pub fn predict_logits(&self, x: &Tensor) -> Result<Tensor, NetError> {
        Ok(self.forward(x)?.0)
    }

    pub fn predict_proba(&self, x: &Tensor) -> Result<Vec<f64>, NetError> {
        Ok(softmax(self.predict_logits(x)?.data()))
    }

    pub fn predict_class(&self, x: &Tensor) -> Result<usize, NetError> {
        Ok(argmax(self.predict_logits(x)?.data()))
    }

    /// Cross-entropy loss of `label` and exact parameter gradients.
    pub fn loss_and_param_grads(&self, x: &Tensor, label: usize) -> Result<(f64, ParamGrads), NetError> {
        self.check_label(label)?;
        let (logits, caches) = self.forward(x)?;
        let (loss, probs) = softmax_cross_entropy(logits.data(), label);
        let g = Tensor::from_raw(vec![probs.len()], softmax_cross_entropy_grad(&probs, label));
        let (_, grads) = self.backward(&caches, g)?;
        Ok((loss, grads))
    }

    /// Cross-entropy loss against `class` and its gradient with respect to the input.
    pub fn loss_and_input_grad(&self, x: &Tensor, class: usize) -> Result<(f64, Tensor), NetError> {
        self.check_label(class)?;
        let (logits, caches) = self.forward(x)?;
        let (loss, probs) = softmax_cross_entropy(logits.data(), class);
        let g = Tensor::from_raw(vec![probs.len()], softmax_cross_entropy_grad(&probs, class));
        let (gx, _) = self.backward(&caches, g)?;
        Ok((loss, gx))
    }

    /// `d/dx` of the cross-entropy against the true label (untargeted) or target label (targeted).
    pub fn input_grad(&self, x: &Tensor, target: GradTarget) -> Result<Tensor, NetError> {
        Ok(self.loss_and_input_grad(x, target.class())?.1)
    }

    pub fn loss(&self, x: &Tensor, label: usize) -> Result<f64, NetError> {
        self.check_label(label)?;
        let logits = self.predict_logits(x)?;
        Ok(softmax_cross_entropy(logits.data(), label).0)
    }

    /// Clean (noise-free) accuracy on `set`.
    pub fn accuracy(&self, set: &LabeledSet) -> Result<f64, NetError> {
        if set.is_empty() {
            return Err(NetError::EmptyDataset);
        }
        let mut correct = 0usize;
        for (x, &y) in set.inputs.iter().zip(&set.labels) {
            if self.predict_class(x)? == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / set.len() as f64)
    }
}

/// Mini-batch SGD with momentum. Every example gets fresh `N(0, noise_sigma^2)`
/// input noise each time it is visited. Clean accuracy is measured on `holdout`.
pub fn train(
    model: &Model,
    data: &LabeledSet,
    holdout: &LabeledSet,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Model, NetError> {
    if data.is_empty() || holdout.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    if cfg.lr.is_nan() || cfg.lr <= 0.0 || cfg.batch_size == 0 || cfg.noise_sigma < 0.0 || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(NetError::InvalidTraining(format!("{cfg:?}")));
    }
    for &y in &data.labels {
        model.check_label(y)?;
    }
    let mut m = model.clone();
    let mut velocity: ParamGrads = m
        .params
        .iter()
        .map(|ps| ps.iter().map(|p| Tensor::zeros(p.shape())).collect())
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<ParamGrads> = None;
            for &idx in batch {
                let mut x = data.inputs[idx].clone();
                if cfg.noise_sigma > 0.0 {
                    let noise = gaussian_sample(x.shape(), cfg.noise_sigma, rng);
                    x.add_scaled(&noise, 1.0);
                }
                let (loss, grads) = m
                    .loss_and_param_grads(&x, data.labels[idx])
                    .map_err(|_| NetError::Diverged { epoch })?;
                if !loss.is_finite() {
                    return Err(NetError::Diverged { epoch });
                }
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (al, gl) in a.iter_mut().zip(&grads) {
                            for (at, gt) in al.iter_mut().zip(gl) {
                                at.add_scaled(gt, 1.0);
                            }
                        }
                    }
                }
            }
            let Some(acc) = acc else { continue };
            let inv = 1.0 / batch.len() as f64;
            for ((pl, vl), gl) in m.params.iter_mut().zip(velocity.iter_mut()).zip(&acc) {
                for ((p, v), g) in pl.iter_mut().zip(vl.iter_mut()).zip(gl) {
                    v.scale(cfg.momentum);
                    v.add_scaled(g, inv);
                    p.add_scaled(v, -cfg.lr);
                    if !p.is_finite() {
                        return Err(NetError::Diverged { epoch });
                    }
                }
            }
        }
    }
    m.meta = TrainMeta {
        noise_sigma: cfg.noise_sigma,
        epochs: cfg.epochs,
        lr: cfg.lr,
        momentum: cfg.momentum,
        seed: model.meta.seed,
        clean_accuracy: Some(m.accuracy(holdout)?),
    };
    Ok(m)
}
