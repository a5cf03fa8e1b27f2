use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::batchnorm::{batchnorm_backward, batchnorm_forward_cached, BatchNormState, BnCache};
use super::weight_norm::{normalize, wn_backward};
use crate::error::{Error, Result};
use crate::optim::{ParamState, WeightMode};
use crate::tensor::{conv2d_backward, conv2d_forward, frobenius_norm, matmul, transpose, Tensor};

/// Static description of one layer. Only linear and convolution layers carry
/// a weight mode; batchnorm scale/shift and all biases are always plain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", from = "SpecRepr")]
pub enum LayerSpec {
    Linear {
        in_features: usize,
        out_features: usize,
        #[serde(default)]
        weight_mode: WeightMode,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        weight_mode: WeightMode,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    GradientReversal {
        alpha: f64,
    },
    Flatten,
}

fn one() -> usize {
    1
}

// Parameterless kinds as empty structs, so unknown keys on them are rejected
// too (serde ignores extra keys on unit variants).
#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum SpecRepr {
    Linear {
        in_features: usize,
        out_features: usize,
        #[serde(default)]
        weight_mode: WeightMode,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        weight_mode: WeightMode,
    },
    BatchNorm {
        channels: usize,
    },
    Relu {},
    GradientReversal {
        alpha: f64,
    },
    Flatten {},
}

impl From<SpecRepr> for LayerSpec {
    fn from(r: SpecRepr) -> Self {
        match r {
            SpecRepr::Linear {
                in_features,
                out_features,
                weight_mode,
            } => LayerSpec::Linear {
                in_features,
                out_features,
                weight_mode,
            },
            SpecRepr::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weight_mode,
            } => LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weight_mode,
            },
            SpecRepr::BatchNorm { channels } => LayerSpec::BatchNorm { channels },
            SpecRepr::Relu {} => LayerSpec::Relu,
            SpecRepr::GradientReversal { alpha } => LayerSpec::GradientReversal { alpha },
            SpecRepr::Flatten {} => LayerSpec::Flatten,
        }
    }
}

impl LayerSpec {
    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Linear {
            in_features,
            out_features,
            weight_mode: WeightMode::Plain,
        }
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight_mode: WeightMode::Plain,
        }
    }

    pub fn with_mode(mut self, mode: WeightMode) -> Self {
        self.set_mode(mode);
        self
    }

    /// Sets the weight mode; a no-op on kinds without weights.
    pub fn set_mode(&mut self, mode: WeightMode) {
        match self {
            LayerSpec::Linear { weight_mode, .. } | LayerSpec::Conv2d { weight_mode, .. } => *weight_mode = mode,
            _ => {}
        }
    }

    pub fn weight_mode(&self) -> Option<WeightMode> {
        match self {
            LayerSpec::Linear { weight_mode, .. } | LayerSpec::Conv2d { weight_mode, .. } => Some(*weight_mode),
            _ => None,
        }
    }

    pub fn is_weight_bearing(&self) -> bool {
        self.weight_mode().is_some()
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::GradientReversal { .. } => "gradient-reversal",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: usize, what: &str| {
            if v == 0 {
                Err(Error::invalid(format!("{} {what} must be positive", self.name())))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Linear { in_features, out_features, .. } => {
                positive(in_features, "in_features")?;
                positive(out_features, "out_features")
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                positive(in_channels, "in_channels")?;
                positive(out_channels, "out_channels")?;
                positive(kernel, "kernel")?;
                positive(stride, "stride")
            }
            LayerSpec::BatchNorm { channels } => positive(channels, "channels"),
            LayerSpec::GradientReversal { alpha } => {
                if alpha.is_finite() && alpha >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("gradient reversal alpha must be >= 0, got {alpha}")))
                }
            }
            LayerSpec::Relu | LayerSpec::Flatten => Ok(()),
        }
    }
}

/// Activations retained between forward and backward.
#[derive(Debug, Clone)]
enum Cache {
    Affine {
        input: Tensor,
        /// Weight actually multiplied in forward (normalized in weight-norm mode).
        effective: Tensor,
    },
    BatchNorm(BnCache),
    Relu {
        mask: Vec<bool>,
    },
    Passthrough,
    Flatten {
        shape: Vec<usize>,
    },
}

/// Mutable state of one layer.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub weight: Option<ParamState>,
    pub bias: Option<ParamState>,
    pub batchnorm: Option<BatchNormState>,
    /// Current reversal coefficient; the trainer rescales it over training.
    pub grl_alpha: f64,
    cache: Option<Cache>,
}

impl LayerState {
    fn empty() -> Self {
        LayerState {
            weight: None,
            bias: None,
            batchnorm: None,
            grl_alpha: 0.0,
            cache: None,
        }
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// A layer: its description plus its parameters and caches.
#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub state: LayerState,
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
        .map_err(|e| Error::invalid(format!("init distribution: {e}")))?;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

impl Layer {
    /// Builds a layer with He-normal weights, zero biases, unit batchnorm
    /// scale and zero shift.
    pub fn new(spec: LayerSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut state = LayerState::empty();
        match spec {
            LayerSpec::Linear {
                in_features,
                out_features,
                weight_mode,
            } => {
                state.weight = Some(ParamState::new(
                    he_normal(&[out_features, in_features], in_features, rng)?,
                    weight_mode,
                )?);
                state.bias = Some(ParamState::new(Tensor::zeros(&[out_features])?, WeightMode::Plain)?);
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                weight_mode,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                state.weight = Some(ParamState::new(
                    he_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng)?,
                    weight_mode,
                )?);
                state.bias = Some(ParamState::new(Tensor::zeros(&[out_channels])?, WeightMode::Plain)?);
            }
            LayerSpec::BatchNorm { channels } => state.batchnorm = Some(BatchNormState::new(channels)?),
            LayerSpec::GradientReversal { alpha } => state.grl_alpha = alpha,
            LayerSpec::Relu | LayerSpec::Flatten => {}
        }
        Ok(Layer { spec, state })
    }

    /// Builds a weight-bearing layer around explicit parameters.
    pub fn with_params(spec: LayerSpec, weight: Tensor, bias: Tensor) -> Result<Self> {
        spec.validate()?;
        let mode = spec
            .weight_mode()
            .ok_or_else(|| Error::invalid(format!("{} has no weight", spec.name())))?;
        let expected: Vec<usize> = match spec {
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => vec![out_features, in_features],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![out_channels, in_channels, kernel, kernel],
            _ => unreachable!(),
        };
        if weight.shape() != expected.as_slice() || bias.shape() != [expected[0]] {
            return Err(Error::invalid(format!(
                "{} expects weight {expected:?} and bias [{}], got {:?} and {:?}",
                spec.name(),
                expected[0],
                weight.shape(),
                bias.shape()
            )));
        }
        let mut state = LayerState::empty();
        state.weight = Some(ParamState::new(weight, mode)?);
        state.bias = Some(ParamState::new(bias, WeightMode::Plain)?);
        Ok(Layer { spec, state })
    }

    /// Changes the weight mode of a weight-bearing layer (spec and parameter).
    pub fn set_mode(&mut self, mode: WeightMode) {
        self.spec.set_mode(mode);
        if let Some(w) = self.state.weight.as_mut() {
            w.mode = mode;
        }
    }

    /// Weight the layer computes with: `Ω/‖Ω‖` in weight-norm mode, the raw
    /// weight otherwise.
    pub fn effective_weight(&self) -> Result<Option<Tensor>> {
        match &self.state.weight {
            None => Ok(None),
            Some(p) if p.mode == WeightMode::WeightNorm => normalize(&p.weight).map(Some),
            Some(p) => Ok(Some(p.weight.clone())),
        }
    }

    /// Forward pass. In training mode the activations needed by
    /// [`Layer::backward`] are copied into the layer's cache.
    pub fn forward(&mut self, input: &Tensor, training: bool) -> Result<Tensor> {
        let (out, cache) = match self.spec {
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => {
                if input.ndim() != 2 || input.shape()[1] != in_features {
                    return Err(Error::invalid(format!(
                        "linear({in_features}->{out_features}) cannot take input {:?}",
                        input.shape()
                    )));
                }
                let effective = self.refresh_effective()?;
                let bias = self.state.bias.as_ref().expect("linear bias");
                let mut y = matmul(input, &transpose(&effective)?)?;
                let n = input.shape()[0];
                let b = bias.weight.data();
                let yd = y.data_mut();
                for i in 0..n {
                    for j in 0..out_features {
                        yd[i * out_features + j] += b[j];
                    }
                }
                y.check_finite("linear output")?;
                (
                    y,
                    Cache::Affine {
                        input: input.clone(),
                        effective,
                    },
                )
            }
            LayerSpec::Conv2d { stride, padding, .. } => {
                let effective = self.refresh_effective()?;
                let bias = self.state.bias.as_ref().expect("conv bias");
                let mut y = conv2d_forward(input, &effective, stride, padding)?;
                let s = y.shape().to_vec();
                let plane = s[2] * s[3];
                let b = bias.weight.data();
                for (idx, v) in y.data_mut().iter_mut().enumerate() {
                    *v += b[(idx / plane) % s[1]];
                }
                y.check_finite("conv2d output")?;
                (
                    y,
                    Cache::Affine {
                        input: input.clone(),
                        effective,
                    },
                )
            }
            LayerSpec::BatchNorm { .. } => {
                let bn = self.state.batchnorm.as_mut().expect("batchnorm state");
                let (y, cache) = batchnorm_forward_cached(bn, input, training)?;
                (y, Cache::BatchNorm(cache))
            }
            LayerSpec::Relu => {
                let mask: Vec<bool> = input.data().iter().map(|&v| v > 0.0).collect();
                (input.map(|v| if v > 0.0 { v } else { 0.0 })?, Cache::Relu { mask })
            }
            LayerSpec::GradientReversal { .. } => (input.clone(), Cache::Passthrough),
            LayerSpec::Flatten => {
                if input.ndim() < 2 {
                    return Err(Error::invalid(format!("flatten needs a batch axis, got {:?}", input.shape())));
                }
                let n = input.shape()[0];
                let rest = input.len() / n;
                (
                    input.reshape(&[n, rest])?,
                    Cache::Flatten {
                        shape: input.shape().to_vec(),
                    },
                )
            }
        };
        if training {
            self.state.cache = Some(cache);
        }
        Ok(out)
    }

    fn refresh_effective(&mut self) -> Result<Tensor> {
        let p = self.state.weight.as_mut().expect("weight-bearing layer");
        let norm = p.refresh_norm()?;
        if p.mode == WeightMode::WeightNorm {
            if norm == 0.0 {
                return Err(Error::numeric("weight-normalized layer has a zero-norm weight"));
            }
            p.weight.scale(1.0 / norm)
        } else {
            Ok(p.weight.clone())
        }
    }

    /// Backward pass: returns the gradient with respect to the input and adds
    /// parameter gradients into the parameter buffers. Consumes the cache.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self
            .state
            .cache
            .take()
            .ok_or_else(|| Error::state(format!("{} backward without a cached training forward", self.spec.name())))?;
        grad_out.check_finite("incoming gradient")?;
        match (&self.spec, cache) {
            (LayerSpec::Linear { .. }, Cache::Affine { input, effective }) => {
                if grad_out.ndim() != 2 || grad_out.shape()[0] != input.shape()[0] || grad_out.shape()[1] != effective.shape()[0] {
                    return Err(Error::invalid(format!(
                        "linear backward: grad shape {:?} does not match forward output",
                        grad_out.shape()
                    )));
                }
                let grad_in = matmul(grad_out, &effective)?;
                let grad_w = matmul(&transpose(grad_out)?, &input)?;
                let out = effective.shape()[0];
                let mut grad_b = vec![0.0; out];
                for row in grad_out.data().chunks(out) {
                    grad_b.iter_mut().zip(row).for_each(|(b, g)| *b += g);
                }
                self.accumulate_affine(grad_w, Tensor::new(vec![out], grad_b)?)?;
                Ok(grad_in)
            }
            (LayerSpec::Conv2d { stride, padding, .. }, Cache::Affine { input, effective }) => {
                let (grad_in, grad_w) = conv2d_backward(&input, &effective, grad_out, *stride, *padding)?;
                let s = grad_out.shape();
                let plane = s[2] * s[3];
                let mut grad_b = vec![0.0; s[1]];
                for (idx, g) in grad_out.data().iter().enumerate() {
                    grad_b[(idx / plane) % s[1]] += g;
                }
                self.accumulate_affine(grad_w, Tensor::new(vec![s[1]], grad_b)?)?;
                Ok(grad_in)
            }
            (LayerSpec::BatchNorm { .. }, Cache::BatchNorm(cache)) => {
                let bn = self.state.batchnorm.as_mut().expect("batchnorm state");
                batchnorm_backward(bn, &cache, grad_out)
            }
            (LayerSpec::Relu, Cache::Relu { mask }) => {
                if mask.len() != grad_out.len() {
                    return Err(Error::invalid("relu backward: gradient size differs from forward"));
                }
                let data = grad_out
                    .data()
                    .iter()
                    .zip(&mask)
                    .map(|(&g, &m)| if m { g } else { 0.0 })
                    .collect();
                Tensor::new(grad_out.shape().to_vec(), data)
            }
            (LayerSpec::GradientReversal { .. }, Cache::Passthrough) => grl_backward(self.state.grl_alpha, grad_out),
            (LayerSpec::Flatten, Cache::Flatten { shape }) => grad_out.reshape(&shape),
            _ => Err(Error::state("layer cache does not match its kind")),
        }
    }

    fn accumulate_affine(&mut self, grad_effective: Tensor, grad_bias: Tensor) -> Result<()> {
        let w = self.state.weight.as_mut().expect("weight");
        let grad_w = if w.mode == WeightMode::WeightNorm {
            wn_backward(&w.weight, &grad_effective)?
        } else {
            grad_effective
        };
        w.accumulate(&grad_w)?;
        self.state.bias.as_mut().expect("bias").accumulate(&grad_bias)
    }

    /// Trainable parameters in a fixed order: weight, bias, batchnorm
    /// scale, batchnorm shift.
    pub fn params(&self) -> Vec<&ParamState> {
        let mut out = Vec::new();
        out.extend(self.state.weight.as_ref());
        out.extend(self.state.bias.as_ref());
        if let Some(bn) = &self.state.batchnorm {
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamState> {
        let mut out = Vec::new();
        out.extend(self.state.weight.as_mut());
        out.extend(self.state.bias.as_mut());
        if let Some(bn) = self.state.batchnorm.as_mut() {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out
    }

    pub fn weight_norm_of(&self) -> Option<f64> {
        self.state.weight.as_ref().and_then(|p| frobenius_norm(&p.weight).ok())
    }
}

/// Gradient of the reversal layer: `−alpha · grad_out`. Its forward is the
/// identity.
pub fn grl_backward(alpha: f64, grad_out: &Tensor) -> Result<Tensor> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("gradient reversal alpha must be >= 0, got {alpha}")));
    }
    grad_out.scale(-alpha)
}
