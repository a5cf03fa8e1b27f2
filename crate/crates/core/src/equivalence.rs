//! Numerical check that training a weight-normalized parameter with plain
//! SGD traces the same directions as explicit suppression (λ = 1) on a unit
//! weight stepped at `lr / ‖Ω‖²`.
//!
//! The two agree only while `‖Ω‖` barely moves between steps. The report
//! carries the per-step relative norm drift so callers can see when that
//! premise breaks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::wn_backward;
use crate::optim::{dss_step, effective_lr, sgd_step, DssConfig, ParamState, WeightMode};
use crate::tensor::{frobenius_norm, inner_product, Tensor};

/// Relative per-step norm drift above which the two trajectories are no
/// longer expected to coincide.
pub const NORM_DRIFT_THRESHOLD: f64 = 0.05;

/// A differentiable scalar loss of the weight a layer computes with.
pub trait GradientSource {
    fn loss(&self, weight: &Tensor) -> Result<f64>;
    fn gradient(&self, weight: &Tensor) -> Result<Tensor>;
}

/// `L(w) = ½ Σ hᵢ (wᵢ − cᵢ)²` with positive curvatures `h`.
#[derive(Debug, Clone)]
pub struct QuadraticProbe {
    pub curvature: Tensor,
    pub center: Tensor,
}

impl QuadraticProbe {
    pub fn new(curvature: Tensor, center: Tensor) -> Result<Self> {
        if curvature.shape() != center.shape() {
            return Err(Error::invalid("probe curvature and center shapes differ"));
        }
        if curvature.data().iter().any(|&h| h <= 0.0) {
            return Err(Error::invalid("probe curvatures must be positive"));
        }
        Ok(QuadraticProbe { curvature, center })
    }

    /// Curvatures in `[0.5, 4)` and a center of unit norm, drawn from `seed`.
    pub fn seeded(shape: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let h: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..4.0)).collect();
        let c = Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let c = c.scale(1.0 / frobenius_norm(&c)?)?;
        QuadraticProbe::new(Tensor::new(shape.to_vec(), h)?, c)
    }
}

impl GradientSource for QuadraticProbe {
    fn loss(&self, weight: &Tensor) -> Result<f64> {
        let d = weight.sub(&self.center)?;
        Ok(0.5 * d.data().iter().zip(self.curvature.data()).map(|(x, h)| h * x * x).sum::<f64>())
    }

    fn gradient(&self, weight: &Tensor) -> Result<Tensor> {
        weight.sub(&self.center)?.zip_with(&self.curvature, "probe gradient", |d, h| d * h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub steps: usize,
    pub lr: f64,
    /// Largest angle (radians) between the normalized weight of the
    /// weight-norm run and the weight of the suppression run.
    pub max_direction_deviation: f64,
    /// `|‖Ωᵗ⁺¹‖ − ‖Ωᵗ‖| / ‖Ωᵗ‖` for each step of the weight-norm run.
    pub norm_drift: Vec<f64>,
    /// Some step drifted by more than [`NORM_DRIFT_THRESHOLD`].
    pub assumption_violated: bool,
}

/// Angle between two tensors viewed as vectors, in `[0, π]`.
pub fn angle_between(a: &Tensor, b: &Tensor) -> Result<f64> {
    let na = frobenius_norm(a)?;
    let nb = frobenius_norm(b)?;
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numeric("angle with a zero-norm tensor"));
    }
    let cos = (inner_product(a, b)? / (na * nb)).clamp(-1.0, 1.0);
    // acos loses precision near 0; use the chord length instead.
    let diff = a.scale(1.0 / na)?.sub(&b.scale(1.0 / nb)?)?;
    let chord = frobenius_norm(&diff)?;
    Ok(if cos > 0.0 { 2.0 * (chord / 2.0).min(1.0).asin() } else { cos.acos() })
}

fn at_step(run: &'static str, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NumericFailure(msg) => Error::numeric(format!("{run} diverged at step {step}: {msg}")),
        other => other,
    }
}

/// Runs (A) weight-norm training with SGD on `Ω` and (B) explicit suppression
/// with λ = 1 on the unit weight `init/‖init‖` at per-step rate
/// `lr / ‖Ω_Aᵗ‖²`, both fed by `source` evaluated at each run's own
/// effective weight.
pub fn equivalence_trace(
    init_weight: &Tensor,
    source: &dyn GradientSource,
    steps: usize,
    lr: f64,
) -> Result<EquivalenceReport> {
    if steps == 0 {
        return Err(Error::invalid("equivalence_trace needs at least one step"));
    }
    DssConfig { lr, ..DssConfig::default() }.validate()?;
    let init_norm = frobenius_norm(init_weight)?;
    if init_norm == 0.0 {
        return Err(Error::numeric("equivalence_trace from a zero-norm weight"));
    }

    let mut omega = ParamState::new(init_weight.clone(), WeightMode::WeightNorm)?;
    let mut unit = ParamState::new(init_weight.scale(1.0 / init_norm)?, WeightMode::Dss)?;
    let mut max_dev: f64 = 0.0;
    let mut drift = Vec::with_capacity(steps);

    for t in 0..steps {
        // run A: Ω̃ in forward, exact backward, SGD on Ω
        let norm_a = frobenius_norm(&omega.weight)?;
        let eff_a = omega.weight.scale(1.0 / norm_a)?;
        let fail_a = at_step("weight-norm run", t);
        omega.grad = wn_backward(&omega.weight, &source.gradient(&eff_a).map_err(&fail_a)?).map_err(&fail_a)?;
        sgd_step(&mut omega, lr).map_err(&fail_a)?;
        let next_norm = frobenius_norm(&omega.weight)?;
        drift.push((next_norm - norm_a).abs() / norm_a);

        // run B: λ = 1 suppression at the adaptive rate
        let fail_b = at_step("suppression run", t);
        unit.grad = source.gradient(&unit.weight).map_err(&fail_b)?;
        let cfg = DssConfig {
            lambda: 1.0,
            lr: effective_lr(lr, norm_a)?,
            ..DssConfig::default()
        };
        dss_step(&mut unit, &cfg).map_err(&fail_b)?;

        max_dev = max_dev.max(angle_between(&omega.weight, &unit.weight)?);
    }

    let assumption_violated = drift.iter().any(|&d| d > NORM_DRIFT_THRESHOLD);
    Ok(EquivalenceReport {
        steps,
        lr,
        max_direction_deviation: max_dev,
        norm_drift: drift,
        assumption_violated,
    })
}

/// Largest angle between a `dss_step` trajectory at `lambda` and a plain SGD
/// trajectory from the same start, each fed by `source` at its own weight.
pub fn dss_sgd_deviation(
    init_weight: &Tensor,
    source: &dyn GradientSource,
    steps: usize,
    lr: f64,
    lambda: f64,
) -> Result<f64> {
    let cfg = DssConfig {
        lambda,
        lr,
        ..DssConfig::default()
    };
    cfg.validate()?;
    let mut a = ParamState::new(init_weight.clone(), WeightMode::Dss)?;
    let mut b = ParamState::new(init_weight.clone(), WeightMode::Plain)?;
    let mut max_dev: f64 = 0.0;
    for t in 0..steps {
        let (fail_a, fail_b) = (at_step("suppression run", t), at_step("sgd run", t));
        a.grad = source.gradient(&a.weight).map_err(&fail_a)?;
        b.grad = source.gradient(&b.weight).map_err(&fail_b)?;
        dss_step(&mut a, &cfg).map_err(&fail_a)?;
        sgd_step(&mut b, lr).map_err(&fail_b)?;
        if a.weight != b.weight {
            max_dev = max_dev.max(angle_between(&a.weight, &b.weight)?);
        }
    }
    Ok(max_dev)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Tensor, QuadraticProbe) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let init = Tensor::new(vec![4, 4], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        (init, QuadraticProbe::seeded(&[4, 4], 12).unwrap())
    }

    #[test]
    fn lambda_zero_matches_sgd_exactly() {
        let (init, probe) = setup();
        assert_eq!(dss_sgd_deviation(&init, &probe, 100, 0.05, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn small_lr_stays_within_tolerance() {
        let (init, probe) = setup();
        let r = equivalence_trace(&init, &probe, 200, 1e-3).unwrap();
        assert!(r.max_direction_deviation <= 1e-3, "{}", r.max_direction_deviation);
        assert!(!r.assumption_violated);
        assert_eq!(r.norm_drift.len(), 200);
    }

    #[test]
    fn large_lr_flags_norm_drift() {
        let (init, probe) = setup();
        let r = equivalence_trace(&init.scale(0.1).unwrap(), &probe, 200, 0.5).unwrap();
        assert!(r.norm_drift.iter().any(|&d| d > NORM_DRIFT_THRESHOLD));
        assert!(r.assumption_violated);
    }

    #[test]
    fn rejects_bad_arguments() {
        let (init, probe) = setup();
        assert!(matches!(equivalence_trace(&init, &probe, 0, 1e-3), Err(Error::InvalidArgument(_))));
        assert!(matches!(equivalence_trace(&init, &probe, 5, 0.0), Err(Error::InvalidArgument(_))));
        let zero = Tensor::zeros(&[4, 4]).unwrap();
        assert!(matches!(equivalence_trace(&zero, &probe, 5, 1e-3), Err(Error::NumericFailure(_))));
    }

    #[test]
    fn divergence_reports_step() {
        let init = Tensor::from_slice(&[1.0, 0.0]);
        let probe = QuadraticProbe::new(Tensor::from_slice(&[1e200, 1e200]), Tensor::from_slice(&[0.0, 1.0])).unwrap();
        match equivalence_trace(&init, &probe, 10, 1e200) {
            Err(Error::NumericFailure(msg)) => assert!(msg.contains("step 0"), "{msg}"),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn angle_between_basics() {
        let a = Tensor::from_slice(&[1.0, 0.0]);
        assert_eq!(angle_between(&a, &a.scale(3.0).unwrap()).unwrap(), 0.0);
        let b = Tensor::from_slice(&[0.0, 2.0]);
        assert!((angle_between(&a, &b).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        let c = Tensor::from_slice(&[-1.0, 0.0]);
        assert!((angle_between(&a, &c).unwrap() - std::f64::consts::PI).abs() < 1e-15);
    }
}
