//! Frobenius weight normalization: the layer computes with `Ω̃ = Ω / ‖Ω‖`
//! while the optimizer owns `Ω`.

use crate::error::{Error, Result};
use crate::optim::{split_along, ParamState};
use crate::tensor::{frobenius_norm, Tensor};

/// `Ω / ‖Ω‖`, the unit-norm weight a weight-normalized layer computes with.
pub fn wn_effective_weight(state: &ParamState) -> Result<Tensor> {
    normalize(&state.weight)
}

pub(crate) fn normalize(omega: &Tensor) -> Result<Tensor> {
    let norm = frobenius_norm(omega)?;
    if norm == 0.0 {
        return Err(Error::numeric("weight normalization of a zero-norm weight"));
    }
    omega.scale(1.0 / norm)
}

/// Gradient with respect to the raw weight `Ω`, given the gradient `g̃` with
/// respect to the normalized weight:
///
/// ```text
/// ∂L/∂Ω = (g̃ − Ω̃ ⟨g̃, Ω̃⟩) / ‖Ω‖
/// ```
///
/// The result is orthogonal to `Ω`.
pub fn wn_backward(omega: &Tensor, grad_wrt_effective: &Tensor) -> Result<Tensor> {
    if omega.shape() != grad_wrt_effective.shape() {
        return Err(Error::invalid(format!(
            "wn_backward: weight shape {:?} vs gradient shape {:?}",
            omega.shape(),
            grad_wrt_effective.shape()
        )));
    }
    let norm = frobenius_norm(omega)?;
    if norm == 0.0 {
        return Err(Error::numeric("wn_backward at a zero-norm weight"));
    }
    let (_, tangent) = split_along(grad_wrt_effective, omega)?;
    tangent.scale(1.0 / norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::WeightMode;

    fn wn(omega: &[f64], g: &[f64]) -> Vec<f64> {
        wn_backward(&Tensor::from_slice(omega), &Tensor::from_slice(g))
            .unwrap()
            .into_data()
    }

    #[test]
    fn effective_weight_examples() {
        let p = ParamState::new(Tensor::from_slice(&[3.0, 4.0]), WeightMode::WeightNorm).unwrap();
        let e = wn_effective_weight(&p).unwrap();
        assert!((e.data()[0] - 0.6).abs() < 1e-15 && (e.data()[1] - 0.8).abs() < 1e-15);

        let p = ParamState::new(Tensor::from_slice(&[0.6, 0.8]), WeightMode::WeightNorm).unwrap();
        let e = wn_effective_weight(&p).unwrap();
        assert!(e.max_abs_diff(&p.weight).unwrap() < 1e-16);

        let p = ParamState::new(Tensor::from_slice(&[0.0, 0.0]), WeightMode::WeightNorm).unwrap();
        assert!(matches!(wn_effective_weight(&p), Err(Error::NumericFailure(_))));
    }

    #[test]
    fn backward_examples() {
        assert_eq!(wn(&[1.0, 0.0], &[2.0, 5.0]), vec![0.0, 5.0]);
        assert_eq!(wn(&[0.0, 2.0], &[3.0, 4.0]), vec![1.5, 0.0]);
        assert_eq!(wn(&[2.0, 0.0], &[5.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_errors() {
        let z = Tensor::from_slice(&[0.0, 0.0]);
        let g = Tensor::from_slice(&[1.0, 1.0]);
        assert!(matches!(wn_backward(&z, &g), Err(Error::NumericFailure(_))));
        let w = Tensor::from_slice(&[1.0, 1.0, 1.0]);
        assert!(matches!(wn_backward(&w, &g), Err(Error::InvalidArgument(_))));
    }
}
