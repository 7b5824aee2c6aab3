use serde::{Deserialize, Serialize};

use super::{KernelError, Tensor};

/// The fixed layer vocabulary. Spatial layers work on `[channels, height, width]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerDescriptor {
    Dense { inputs: usize, outputs: usize },
    /// Valid padding, stride 1.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    /// Non-overlapping `size x size` average pooling; trailing rows/columns are dropped.
    AvgPool { size: usize },
    Flatten,
    /// Softmax over a logit vector. Paired with [`softmax_cross_entropy`] as the loss head.
    SoftmaxHead { classes: usize },
}

/// What a forward pass keeps for backprop.
#[derive(Clone, Debug)]
pub enum LayerCache {
    Input(Tensor),
    InputShape(Vec<usize>),
    Output(Tensor),
}

impl LayerDescriptor {
    pub fn name(&self) -> &'static str {
        match self {
            LayerDescriptor::Dense { .. } => "dense",
            LayerDescriptor::Conv2d { .. } => "conv2d",
            LayerDescriptor::Relu => "relu",
            LayerDescriptor::AvgPool { .. } => "avgpool",
            LayerDescriptor::Flatten => "flatten",
            LayerDescriptor::SoftmaxHead { .. } => "softmax-head",
        }
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerDescriptor::Dense { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            LayerDescriptor::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => vec![vec![out_channels, in_channels, kernel, kernel], vec![out_channels]],
            _ => Vec::new(),
        }
    }

    /// Fan-in used for weight initialisation.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerDescriptor::Dense { inputs, .. } => inputs,
            LayerDescriptor::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }

    fn mismatch(&self, expected: Vec<usize>, found: &[usize]) -> KernelError {
        KernelError::ShapeMismatch {
            layer: 0,
            kind: self.name(),
            expected,
            found: found.to_vec(),
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, KernelError> {
        match *self {
            LayerDescriptor::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(self.mismatch(vec![inputs], input));
                }
                Ok(vec![outputs])
            }
            LayerDescriptor::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => match *input {
                [c, h, w] if c == in_channels && h >= kernel && w >= kernel && kernel > 0 => {
                    Ok(vec![out_channels, h - kernel + 1, w - kernel + 1])
                }
                _ => Err(self.mismatch(vec![in_channels, kernel, kernel], input)),
            },
            LayerDescriptor::AvgPool { size } => match *input {
                [c, h, w] if size > 0 && h >= size && w >= size => Ok(vec![c, h / size, w / size]),
                _ => Err(self.mismatch(vec![0, size, size], input)),
            },
            LayerDescriptor::Relu => Ok(input.to_vec()),
            LayerDescriptor::Flatten => Ok(vec![input.iter().product()]),
            LayerDescriptor::SoftmaxHead { classes } => {
                if input != [classes] {
                    return Err(self.mismatch(vec![classes], input));
                }
                Ok(vec![classes])
            }
        }
    }

    fn check_params(&self, params: &[Tensor]) -> Result<(), KernelError> {
        let shapes = self.param_shapes();
        if shapes.len() != params.len()
            || shapes.iter().zip(params).any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(KernelError::ParamMismatch {
                layer: 0,
                kind: self.name(),
                expected: shapes,
                found: params.iter().map(|p| p.shape().to_vec()).collect(),
            });
        }
        Ok(())
    }

    /// Forward pass.
    pub fn apply(&self, params: &[Tensor], input: &Tensor) -> Result<(Tensor, LayerCache), KernelError> {
        self.check_params(params)?;
        let out_shape = self.output_shape(input.shape())?;
        let out = match *self {
            LayerDescriptor::Dense { inputs, outputs } => {
                let w = params[0].data();
                let b = params[1].data();
                let x = input.data();
                let y = (0..outputs)
                    .map(|o| {
                        let row = &w[o * inputs..(o + 1) * inputs];
                        b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
                    })
                    .collect();
                Tensor::from_raw(out_shape, y)
            }
            LayerDescriptor::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                let (h, w) = (input.shape()[1], input.shape()[2]);
                let (ho, wo) = (out_shape[1], out_shape[2]);
                let wt = params[0].data();
                let b = params[1].data();
                let x = input.data();
                let mut y = vec![0.0; out_channels * ho * wo];
                for o in 0..out_channels {
                    let yo = &mut y[o * ho * wo..(o + 1) * ho * wo];
                    yo.iter_mut().for_each(|v| *v = b[o]);
                    for c in 0..in_channels {
                        let xc = &x[c * h * w..(c + 1) * h * w];
                        let kbase = (o * in_channels + c) * kernel * kernel;
                        for ki in 0..kernel {
                            for kj in 0..kernel {
                                let k = wt[kbase + ki * kernel + kj];
                                for i in 0..ho {
                                    let xrow = &xc[(i + ki) * w + kj..(i + ki) * w + kj + wo];
                                    let yrow = &mut yo[i * wo..(i + 1) * wo];
                                    for (yv, xv) in yrow.iter_mut().zip(xrow) {
                                        *yv += k * xv;
                                    }
                                }
                            }
                        }
                    }
                }
                Tensor::from_raw(out_shape, y)
            }
            LayerDescriptor::Relu => input.map(|v| v.max(0.0)),
            LayerDescriptor::AvgPool { size } => {
                let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                let (ho, wo) = (out_shape[1], out_shape[2]);
                let x = input.data();
                let inv = 1.0 / (size * size) as f64;
                let mut y = vec![0.0; c * ho * wo];
                for ch in 0..c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let mut s = 0.0;
                            for di in 0..size {
                                for dj in 0..size {
                                    s += x[ch * h * w + (i * size + di) * w + j * size + dj];
                                }
                            }
                            y[ch * ho * wo + i * wo + j] = s * inv;
                        }
                    }
                }
                Tensor::from_raw(out_shape, y)
            }
            LayerDescriptor::Flatten => Tensor::from_raw(out_shape, input.data().to_vec()),
            LayerDescriptor::SoftmaxHead { .. } => Tensor::from_raw(out_shape, softmax(input.data())),
        };
        out.ensure_finite()?;
        let cache = match self {
            LayerDescriptor::Dense { .. } | LayerDescriptor::Conv2d { .. } | LayerDescriptor::Relu => {
                LayerCache::Input(input.clone())
            }
            LayerDescriptor::AvgPool { .. } | LayerDescriptor::Flatten => {
                LayerCache::InputShape(input.shape().to_vec())
            }
            LayerDescriptor::SoftmaxHead { .. } => LayerCache::Output(out.clone()),
        };
        Ok((out, cache))
    }

    /// Exact gradients of this layer given the upstream gradient of its output.
    /// Returns `(input_grad, param_grads)`.
    pub fn backprop(
        &self,
        params: &[Tensor],
        cache: &LayerCache,
        upstream: &Tensor,
    ) -> Result<(Tensor, Vec<Tensor>), KernelError> {
        self.check_params(params)?;
        let bad_cache = || KernelError::CacheMismatch {
            layer: 0,
            kind: self.name(),
        };
        let input_shape: Vec<usize> = match cache {
            LayerCache::Input(t) => t.shape().to_vec(),
            LayerCache::InputShape(s) => s.clone(),
            LayerCache::Output(t) => t.shape().to_vec(),
        };
        let out_shape = self.output_shape(&input_shape)?;
        if upstream.shape() != out_shape.as_slice() {
            return Err(self.mismatch(out_shape, upstream.shape()));
        }
        let up = upstream.data();
        let result = match (self, cache) {
            (&LayerDescriptor::Dense { inputs, outputs }, LayerCache::Input(x)) => {
                let w = params[0].data();
                let x = x.data();
                let mut dw = vec![0.0; outputs * inputs];
                let mut dx = vec![0.0; inputs];
                for o in 0..outputs {
                    let g = up[o];
                    let row = &w[o * inputs..(o + 1) * inputs];
                    let drow = &mut dw[o * inputs..(o + 1) * inputs];
                    for i in 0..inputs {
                        drow[i] = g * x[i];
                        dx[i] += g * row[i];
                    }
                }
                (
                    Tensor::from_raw(vec![inputs], dx),
                    vec![
                        Tensor::from_raw(vec![outputs, inputs], dw),
                        Tensor::from_raw(vec![outputs], up.to_vec()),
                    ],
                )
            }
            (
                &LayerDescriptor::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                },
                LayerCache::Input(x),
            ) => {
                let (h, w) = (x.shape()[1], x.shape()[2]);
                let (ho, wo) = (out_shape[1], out_shape[2]);
                let wt = params[0].data();
                let xd = x.data();
                let mut dw = vec![0.0; wt.len()];
                let mut db = vec![0.0; out_channels];
                let mut dx = vec![0.0; xd.len()];
                for o in 0..out_channels {
                    let uo = &up[o * ho * wo..(o + 1) * ho * wo];
                    db[o] = uo.iter().sum();
                    for c in 0..in_channels {
                        let base = c * h * w;
                        let kbase = (o * in_channels + c) * kernel * kernel;
                        for ki in 0..kernel {
                            for kj in 0..kernel {
                                let k = wt[kbase + ki * kernel + kj];
                                let mut acc = 0.0;
                                for i in 0..ho {
                                    let off = base + (i + ki) * w + kj;
                                    let urow = &uo[i * wo..(i + 1) * wo];
                                    let xrow = &xd[off..off + wo];
                                    for j in 0..wo {
                                        acc += urow[j] * xrow[j];
                                    }
                                    let dxrow = &mut dx[off..off + wo];
                                    for j in 0..wo {
                                        dxrow[j] += urow[j] * k;
                                    }
                                }
                                dw[kbase + ki * kernel + kj] = acc;
                            }
                        }
                    }
                }
                (
                    Tensor::from_raw(x.shape().to_vec(), dx),
                    vec![
                        Tensor::from_raw(params[0].shape().to_vec(), dw),
                        Tensor::from_raw(vec![out_channels], db),
                    ],
                )
            }
            (LayerDescriptor::Relu, LayerCache::Input(x)) => {
                let dx = x
                    .data()
                    .iter()
                    .zip(up)
                    .map(|(&xv, &u)| if xv > 0.0 { u } else { 0.0 })
                    .collect();
                (Tensor::from_raw(x.shape().to_vec(), dx), Vec::new())
            }
            (&LayerDescriptor::AvgPool { size }, LayerCache::InputShape(shape)) => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (ho, wo) = (out_shape[1], out_shape[2]);
                let inv = 1.0 / (size * size) as f64;
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let g = up[ch * ho * wo + i * wo + j] * inv;
                            for di in 0..size {
                                for dj in 0..size {
                                    dx[ch * h * w + (i * size + di) * w + j * size + dj] = g;
                                }
                            }
                        }
                    }
                }
                (Tensor::from_raw(shape.clone(), dx), Vec::new())
            }
            (LayerDescriptor::Flatten, LayerCache::InputShape(shape)) => {
                (Tensor::from_raw(shape.clone(), up.to_vec()), Vec::new())
            }
            (LayerDescriptor::SoftmaxHead { .. }, LayerCache::Output(p)) => {
                let p = p.data();
                let pu: f64 = p.iter().zip(up).map(|(a, b)| a * b).sum();
                let dx = p.iter().zip(up).map(|(&pi, &ui)| pi * (ui - pu)).collect();
                (Tensor::from_raw(out_shape, dx), Vec::new())
            }
            _ => return Err(bad_cache()),
        };
        result.0.ensure_finite()?;
        for g in &result.1 {
            g.ensure_finite()?;
        }
        Ok(result)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= s);
    e
}

/// Cross-entropy of `softmax(logits)` against `label`, computed through
/// log-sum-exp. Returns `(loss, probabilities)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    (lse - logits[label], softmax(logits))
}

/// Gradient of [`softmax_cross_entropy`] with respect to the logits: `p - onehot(label)`.
/// The label coordinate is `-sum(p_j, j != label)` so it stays nonzero when `p_label` rounds to 1.
pub fn softmax_cross_entropy_grad(probs: &[f64], label: usize) -> Vec<f64> {
    let mut g = probs.to_vec();
    g[label] = -probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, p)| p)
        .sum::<f64>();
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_identity(n: usize) -> Vec<Tensor> {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        vec![
            Tensor::new(vec![n, n], w).unwrap(),
            Tensor::zeros(&[n]),
        ]
    }

    #[test]
    fn ce_grad_survives_saturation() {
        let (_, p) = softmax_cross_entropy(&[60.0, 0.0, -5.0], 0);
        assert_eq!(p[0], 1.0);
        let g = softmax_cross_entropy_grad(&p, 0);
        assert!(g[0] < 0.0 && g[1] > 0.0);
        assert_eq!(g[0], -(g[1] + g[2]));
    }

    #[test]
    fn relu_forward_and_backward() {
        let l = LayerDescriptor::Relu;
        let (y, cache) = l.apply(&[], &Tensor::vector(vec![-1.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
        let (dx, pg) = l.backprop(&[], &cache, &Tensor::vector(vec![1.0, 1.0])).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0]);
        assert!(pg.is_empty());
    }

    #[test]
    fn dense_identity_passes_through() {
        let l = LayerDescriptor::Dense { inputs: 3, outputs: 3 };
        let x = Tensor::vector(vec![0.5, -2.0, 7.0]);
        let (y, _) = l.apply(&dense_identity(3), &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_unit_kernel_doubles_map() {
        let l = LayerDescriptor::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: 1,
        };
        let params = vec![Tensor::filled(&[1, 1, 1, 1], 2.0), Tensor::zeros(&[1])];
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect();
        let x = Tensor::new(vec![1, 3, 4], data.clone()).unwrap();
        let (y, _) = l.apply(&params, &x).unwrap();
        // direct convolution oracle: a 1x1 kernel scales every pixel.
        let expect: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(y.shape(), &[1, 3, 4]);
        assert_eq!(y.data(), expect.as_slice());
    }

    #[test]
    fn conv_matches_direct_loop() {
        let l = LayerDescriptor::Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel: 2,
        };
        let w: Vec<f64> = (0..24).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let b = vec![0.5, -1.0, 0.0];
        let x: Vec<f64> = (0..2 * 4 * 3).map(|i| ((i * 3) % 7) as f64 * 0.1).collect();
        let params = vec![
            Tensor::new(vec![3, 2, 2, 2], w.clone()).unwrap(),
            Tensor::new(vec![3], b.clone()).unwrap(),
        ];
        let (y, _) = l.apply(&params, &Tensor::new(vec![2, 4, 3], x.clone()).unwrap()).unwrap();
        assert_eq!(y.shape(), &[3, 3, 2]);
        for o in 0..3 {
            for i in 0..3 {
                for j in 0..2 {
                    let mut s = b[o];
                    for c in 0..2 {
                        for ki in 0..2 {
                            for kj in 0..2 {
                                s += w[((o * 2 + c) * 2 + ki) * 2 + kj] * x[c * 12 + (i + ki) * 3 + j + kj];
                            }
                        }
                    }
                    assert!((y.data()[o * 6 + i * 2 + j] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn avgpool_drops_remainder() {
        let l = LayerDescriptor::AvgPool { size: 2 };
        let x = Tensor::new(vec![1, 3, 3], (0..9).map(|i| i as f64).collect()).unwrap();
        let (y, _) = l.apply(&[], &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[(0.0 + 1.0 + 3.0 + 4.0) / 4.0]);
    }

    #[test]
    fn shape_mismatch_is_typed() {
        let l = LayerDescriptor::Dense { inputs: 4, outputs: 2 };
        let params = vec![Tensor::zeros(&[2, 4]), Tensor::zeros(&[2])];
        let err = l.apply(&params, &Tensor::zeros(&[3])).unwrap_err();
        match err {
            KernelError::ShapeMismatch { kind, expected, found, .. } => {
                assert_eq!(kind, "dense");
                assert_eq!(expected, vec![4]);
                assert_eq!(found, vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_cache_rejected() {
        let l = LayerDescriptor::Relu;
        let cache = LayerCache::InputShape(vec![2]);
        assert!(l.backprop(&[], &cache, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, -1000.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let (loss, _) = softmax_cross_entropy(&[0.3; 5], 2);
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }
}
