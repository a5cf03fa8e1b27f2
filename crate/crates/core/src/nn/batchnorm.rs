//! Per-channel batch normalization for `N×C` and `N×C×H×W` inputs.

use crate::error::{Error, Result};
use crate::optim::{ParamState, WeightMode};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: ParamState,
    pub beta: ParamState,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    /// When set, training-mode forward normalizes with the running
    /// statistics and leaves them untouched (affine parameters still learn).
    pub freeze_stats: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    /// Normalized with batch statistics (true) or fixed statistics (false).
    batch_stats: bool,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNormState {
            gamma: ParamState::new(Tensor::filled(&[channels], 1.0)?, WeightMode::Plain)?,
            beta: ParamState::new(Tensor::zeros(&[channels])?, WeightMode::Plain)?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::filled(&[channels], 1.0)?,
            freeze_stats: false,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.weight.len()
    }
}

struct Layout {
    n: usize,
    c: usize,
    spatial: usize,
}

impl Layout {
    fn of(input: &Tensor, channels: usize) -> Result<Self> {
        let s = input.shape();
        if !(s.len() == 2 || s.len() == 4) || s[1] != channels {
            return Err(Error::invalid(format!(
                "batchnorm over {channels} channels cannot take input {s:?}"
            )));
        }
        Ok(Layout {
            n: s[0],
            c: s[1],
            spatial: s[2..].iter().product(),
        })
    }

    #[inline]
    fn index(&self, n: usize, c: usize, s: usize) -> usize {
        (n * self.c + c) * self.spatial + s
    }
}

/// Standardizes each channel and applies the learned scale and shift.
///
/// In training mode the batch mean and (biased) variance are used and the
/// running statistics are blended with momentum [`BN_MOMENTUM`], the running
/// variance taking the unbiased estimate. Eval mode, and training with
/// `freeze_stats`, uses the running statistics.
pub fn batchnorm_forward(state: &mut BatchNormState, input: &Tensor, training: bool) -> Result<Tensor> {
    batchnorm_forward_cached(state, input, training).map(|(y, _)| y)
}

pub(crate) fn batchnorm_forward_cached(
    state: &mut BatchNormState,
    input: &Tensor,
    training: bool,
) -> Result<(Tensor, BnCache)> {
    let lay = Layout::of(input, state.channels())?;
    let batch_stats = training && !state.freeze_stats;
    if batch_stats && lay.n < 2 {
        return Err(Error::invalid("batchnorm in training mode needs a batch of at least 2"));
    }
    let x = input.data();
    let m = (lay.n * lay.spatial) as f64;
    let mut mean = vec![0.0; lay.c];
    let mut var = vec![0.0; lay.c];
    if batch_stats {
        for c in 0..lay.c {
            let mut acc = 0.0;
            for n in 0..lay.n {
                for s in 0..lay.spatial {
                    acc += x[lay.index(n, c, s)];
                }
            }
            mean[c] = acc / m;
            let mut sq = 0.0;
            for n in 0..lay.n {
                for s in 0..lay.spatial {
                    let d = x[lay.index(n, c, s)] - mean[c];
                    sq += d * d;
                }
            }
            var[c] = sq / m;
        }
        let unbiased = m / (m - 1.0);
        let rm = state.running_mean.data_mut();
        for c in 0..lay.c {
            rm[c] = (1.0 - BN_MOMENTUM) * rm[c] + BN_MOMENTUM * mean[c];
        }
        let rv = state.running_var.data_mut();
        for c in 0..lay.c {
            rv[c] = (1.0 - BN_MOMENTUM) * rv[c] + BN_MOMENTUM * var[c] * unbiased;
        }
    } else {
        mean.copy_from_slice(state.running_mean.data());
        var.copy_from_slice(state.running_var.data());
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let gamma = state.gamma.weight.data();
    let beta = state.beta.weight.data();
    let mut x_hat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for n in 0..lay.n {
        for c in 0..lay.c {
            for s in 0..lay.spatial {
                let i = lay.index(n, c, s);
                x_hat[i] = (x[i] - mean[c]) * inv_std[c];
                y[i] = gamma[c] * x_hat[i] + beta[c];
            }
        }
    }
    let shape = input.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        BnCache {
            x_hat: Tensor::new(shape, x_hat)?,
            inv_std,
            batch_stats,
        },
    ))
}

/// Accumulates scale/shift gradients and returns the input gradient.
pub(crate) fn batchnorm_backward(state: &mut BatchNormState, cache: &BnCache, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != cache.x_hat.shape() {
        return Err(Error::invalid(format!(
            "batchnorm backward: grad shape {:?} vs forward {:?}",
            grad_out.shape(),
            cache.x_hat.shape()
        )));
    }
    let lay = Layout::of(grad_out, state.channels())?;
    let dy = grad_out.data();
    let xh = cache.x_hat.data();
    let m = (lay.n * lay.spatial) as f64;
    let mut dgamma = vec![0.0; lay.c];
    let mut dbeta = vec![0.0; lay.c];
    for c in 0..lay.c {
        for n in 0..lay.n {
            for s in 0..lay.spatial {
                let i = lay.index(n, c, s);
                dgamma[c] += dy[i] * xh[i];
                dbeta[c] += dy[i];
            }
        }
    }
    let gamma = state.gamma.weight.data().to_vec();
    let mut dx = vec![0.0; dy.len()];
    for c in 0..lay.c {
        let k = gamma[c] * cache.inv_std[c];
        for n in 0..lay.n {
            for s in 0..lay.spatial {
                let i = lay.index(n, c, s);
                dx[i] = if cache.batch_stats {
                    // dx = γ·σ⁻¹/m · (m·dy − Σdy − x̂·Σ(dy·x̂))
                    k / m * (m * dy[i] - dbeta[c] - xh[i] * dgamma[c])
                } else {
                    k * dy[i]
                };
            }
        }
    }
    state.gamma.accumulate(&Tensor::new(vec![lay.c], dgamma)?)?;
    state.beta.accumulate(&Tensor::new(vec![lay.c], dbeta)?)?;
    Tensor::new(grad_out.shape().to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardizes_pair() {
        let mut st = BatchNormState::new(1).unwrap();
        let y = batchnorm_forward(&mut st, &Tensor::from_shape(&[2, 1], &[1.0, 3.0]), true).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-4 && (y.data()[1] - 1.0).abs() < 1e-4);
        // running stats: mean 0.9*0 + 0.1*2, var 0.9*1 + 0.1*2 (unbiased var of {1,3})
        assert!((st.running_mean.data()[0] - 0.2).abs() < 1e-15);
        assert!((st.running_var.data()[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn constant_batch_collapses_to_shift() {
        let mut st = BatchNormState::new(1).unwrap();
        st.beta.weight = Tensor::from_slice(&[0.7]);
        let y = batchnorm_forward(&mut st, &Tensor::filled(&[4, 1], 5.0).unwrap(), true).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn affine_after_standardizing() {
        let mut st = BatchNormState::new(1).unwrap();
        st.gamma.weight = Tensor::from_slice(&[2.0]);
        st.beta.weight = Tensor::from_slice(&[3.0]);
        let y = batchnorm_forward(&mut st, &Tensor::from_shape(&[2, 1], &[1.0, 3.0]), true).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-4 && (y.data()[1] - 5.0).abs() < 1e-4);
    }

    #[test]
    fn batch_of_one_rejected_in_training_only() {
        let mut st = BatchNormState::new(2).unwrap();
        let x = Tensor::from_shape(&[1, 2, 2, 2], &[1.0; 8]);
        assert!(matches!(batchnorm_forward(&mut st, &x, true), Err(Error::InvalidArgument(_))));
        assert!(batchnorm_forward(&mut st, &x, false).is_ok());
    }

    #[test]
    fn eval_uses_running_stats_and_leaves_them() {
        let mut st = BatchNormState::new(1).unwrap();
        st.running_mean = Tensor::from_slice(&[1.0]);
        st.running_var = Tensor::from_slice(&[4.0]);
        let y = batchnorm_forward(&mut st, &Tensor::from_shape(&[2, 1], &[1.0, 5.0]), false).unwrap();
        assert!((y.data()[1] - 4.0 / (4.0 + BN_EPSILON).sqrt()).abs() < 1e-15);
        assert_eq!(st.running_mean.data(), &[1.0]);
    }

    #[test]
    fn frozen_stats_do_not_move() {
        let mut st = BatchNormState::new(1).unwrap();
        st.freeze_stats = true;
        batchnorm_forward(&mut st, &Tensor::from_shape(&[2, 1], &[10.0, 30.0]), true).unwrap();
        assert_eq!(st.running_mean.data(), &[0.0]);
        assert_eq!(st.running_var.data(), &[1.0]);
    }
}
