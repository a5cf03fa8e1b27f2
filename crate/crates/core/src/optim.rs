//! Plain gradient descent and the domain-specific suppression update.
//!
//! The suppression update removes (a fraction `lambda` of) the component of
//! the gradient that lies along the current weight before stepping:
//!
//! ```text
//! W ← W − lr · (g − λ · ⟨g, W⟩ · W / ‖W‖²)
//! ```
//!
//! With `lambda = 0` it is ordinary SGD; with `lambda = 1` the step is
//! orthogonal to `W`, which is exactly the step taken by a Frobenius
//! weight-normalized layer (see [`crate::nn::wn_backward`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{frobenius_norm, inner_product, Tensor};

/// How a trainable weight is treated in forward and update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    #[default]
    Plain,
    /// Raw weight in forward, suppressed gradient in the update.
    Dss,
    /// `Ω/‖Ω‖` in forward, exact backward through the normalization, plain
    /// SGD on `Ω`.
    WeightNorm,
}

/// One trainable tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamState {
    pub weight: Tensor,
    pub grad: Tensor,
    pub mode: WeightMode,
    /// Frobenius norm of `weight` as of the last forward or step.
    pub cached_norm: f64,
}

impl ParamState {
    pub fn new(weight: Tensor, mode: WeightMode) -> Result<Self> {
        let grad = Tensor::zeros(weight.shape())?;
        let cached_norm = frobenius_norm(&weight)?;
        Ok(ParamState {
            weight,
            grad,
            mode,
            cached_norm,
        })
    }

    pub fn refresh_norm(&mut self) -> Result<f64> {
        self.cached_norm = frobenius_norm(&self.weight)?;
        Ok(self.cached_norm)
    }

    /// Adds `g` into the gradient buffer.
    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        self.grad.axpy(1.0, g)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Suppression coefficient, learning rate and the weight mode of each layer
/// group. A group mode of `None` leaves each layer's own `weight_mode`
/// untouched; `Some(mode)` overrides every weight-bearing layer in the group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DssConfig {
    pub lambda: f64,
    pub lr: f64,
    pub backbone_mode: Option<WeightMode>,
    pub head_mode: Option<WeightMode>,
    pub discriminator_mode: Option<WeightMode>,
}

impl Default for DssConfig {
    fn default() -> Self {
        DssConfig {
            lambda: 1.0,
            lr: 0.01,
            backbone_mode: None,
            head_mode: None,
            discriminator_mode: None,
        }
    }
}

impl DssConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

/// What a step actually did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// `dss_step` met a zero-norm weight and took a plain SGD step instead.
    FellBackToSgd,
}

fn check_grad(p: &ParamState) -> Result<()> {
    p.grad.check_finite("gradient")?;
    if p.grad.shape() != p.weight.shape() {
        return Err(Error::invalid(format!(
            "gradient shape {:?} differs from weight shape {:?}",
            p.grad.shape(),
            p.weight.shape()
        )));
    }
    Ok(())
}

/// `weight ← weight − lr · grad`, then clears the gradient.
pub fn sgd_step(p: &mut ParamState, lr: f64) -> Result<()> {
    check_grad(p)?;
    p.refresh_norm()?;
    p.weight.axpy(-lr, &p.grad)?;
    p.zero_grad();
    Ok(())
}

/// Splits `g` into `c · w` plus a residual orthogonal to `w`.
///
/// The residual is projected twice. A single pass leaves a component of
/// order `ε‖g‖` along `w` when `g` is nearly parallel to it; the second pass
/// removes it. If the second pass itself shrinks the residual by more than
/// `1/√2`, what is left is rounding noise (`g` lies numerically in the span
/// of `w`) and the residual is exactly zero.
pub(crate) fn split_along(g: &Tensor, w: &Tensor) -> Result<(f64, Tensor)> {
    let norm_sq = inner_product(w, w)?;
    if norm_sq == 0.0 {
        return Err(Error::numeric("projection onto a zero-norm weight"));
    }
    let mut residual = g.clone();
    let c1 = inner_product(&residual, w)? / norm_sq;
    residual.axpy(-c1, w)?;
    let first = frobenius_norm(&residual)?;
    let c2 = inner_product(&residual, w)? / norm_sq;
    residual.axpy(-c2, w)?;
    if frobenius_norm(&residual)? < first * std::f64::consts::FRAC_1_SQRT_2 {
        residual.fill(0.0);
    }
    Ok((c1 + c2, residual))
}

/// Projection of `g` onto the line spanned by `w`: `⟨g, w⟩ · w / ‖w‖²`.
pub fn project_onto_weight(g: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (coeff, _) = split_along(g, w)?;
    w.scale(coeff)
}

/// The suppressed gradient `g − λ · proj_w(g)` that [`dss_step`] applies.
pub fn suppressed_gradient(g: &Tensor, w: &Tensor, lambda: f64) -> Result<Tensor> {
    let (coeff, mut out) = split_along(g, w)?;
    if lambda != 1.0 {
        out.axpy((1.0 - lambda) * coeff, w)?;
    }
    Ok(out)
}

/// One suppression step against the pre-update weight. A zero-norm weight
/// has no direction to suppress; the step falls back to plain SGD and says
/// so in the returned outcome.
pub fn dss_step(p: &mut ParamState, cfg: &DssConfig) -> Result<StepOutcome> {
    check_grad(p)?;
    if p.refresh_norm()? == 0.0 {
        sgd_step(p, cfg.lr)?;
        return Ok(StepOutcome::FellBackToSgd);
    }
    if cfg.lambda == 0.0 {
        // Bit-identical to sgd_step, not merely close.
        sgd_step(p, cfg.lr)?;
        return Ok(StepOutcome::Applied);
    }
    let update = suppressed_gradient(&p.grad, &p.weight, cfg.lambda)?;
    p.weight.axpy(-cfg.lr, &update)?;
    p.zero_grad();
    Ok(StepOutcome::Applied)
}

/// Dispatches on the parameter's mode. Weight-normalized parameters already
/// carry the projected gradient, so they take a plain step.
pub fn step(p: &mut ParamState, cfg: &DssConfig) -> Result<StepOutcome> {
    match p.mode {
        WeightMode::Plain | WeightMode::WeightNorm => sgd_step(p, cfg.lr).map(|_| StepOutcome::Applied),
        WeightMode::Dss => dss_step(p, cfg),
    }
}

/// The direction `step` will move the weight along (before scaling by
/// `-lr`): the suppressed gradient for [`WeightMode::Dss`] parameters with a
/// nonzero weight, the stored gradient otherwise.
pub fn update_direction(p: &ParamState, cfg: &DssConfig) -> Result<Tensor> {
    if p.mode == WeightMode::Dss && cfg.lambda != 0.0 && frobenius_norm(&p.weight)? != 0.0 {
        suppressed_gradient(&p.grad, &p.weight, cfg.lambda)
    } else {
        Ok(p.grad.clone())
    }
}

/// Learning rate seen by the unit-norm weight when the raw weight has norm
/// `omega_norm`: `lr / ‖Ω‖²`.
pub fn effective_lr(lr: f64, omega_norm: f64) -> Result<f64> {
    if !(omega_norm > 0.0) {
        return Err(Error::invalid(format!("effective_lr needs a positive norm, got {omega_norm}")));
    }
    Ok(lr / (omega_norm * omega_norm))
}
