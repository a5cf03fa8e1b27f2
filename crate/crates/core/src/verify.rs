//! Self-check suite behind `dss-lab verify`.
//!
//! Every property draws its cases from one seeded generator, reports the
//! worst observed error next to its tolerance, and passes iff the error does
//! not exceed the tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analysis::build_histogram;
use crate::equivalence::{equivalence_trace, GradientSource, QuadraticProbe};
use crate::error::{Error, Result};
use crate::nn::{wn_backward, Layer, LayerSpec};
use crate::optim::{dss_step, project_onto_weight, sgd_step, suppressed_gradient, DssConfig, ParamState, WeightMode};
use crate::svd::svd_small;
use crate::tensor::{conv2d_backward, conv2d_forward, frobenius_norm, inner_product, matmul, transpose, Tensor};

/// Upper bounds on the error each property may show.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub orthogonality: f64,
    pub orthogonal_reduction: f64,
    pub interpolation: f64,
    pub wn_finite_difference: f64,
    pub wn_orthogonality: f64,
    pub norm_growth: f64,
    pub equivalence: f64,
    pub layer_finite_difference: f64,
    pub wn_scale_invariance: f64,
    pub conv_linearity: f64,
    pub conv_adjoint: f64,
    pub svd: f64,
    pub norm_identity: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            orthogonality: 1e-12,
            orthogonal_reduction: 1e-12,
            interpolation: 1e-12,
            wn_finite_difference: 1e-5,
            wn_orthogonality: 1e-12,
            norm_growth: 1e-10,
            equivalence: 1e-3,
            layer_finite_difference: 1e-5,
            wn_scale_invariance: 1e-12,
            conv_linearity: 1e-12,
            conv_adjoint: 1e-10,
            svd: 1e-9,
            norm_identity: 1e-12,
        }
    }
}

impl Tolerances {
    /// Sets one tolerance by its field name.
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        if !(value >= 0.0) {
            return Err(Error::invalid(format!("tolerance {name} must be >= 0, got {value}")));
        }
        let slot = match name {
            "orthogonality" => &mut self.orthogonality,
            "orthogonal_reduction" => &mut self.orthogonal_reduction,
            "interpolation" => &mut self.interpolation,
            "wn_finite_difference" => &mut self.wn_finite_difference,
            "wn_orthogonality" => &mut self.wn_orthogonality,
            "norm_growth" => &mut self.norm_growth,
            "equivalence" => &mut self.equivalence,
            "layer_finite_difference" => &mut self.layer_finite_difference,
            "wn_scale_invariance" => &mut self.wn_scale_invariance,
            "conv_linearity" => &mut self.conv_linearity,
            "conv_adjoint" => &mut self.conv_adjoint,
            "svd" => &mut self.svd,
            "norm_identity" => &mut self.norm_identity,
            other => return Err(Error::invalid(format!("unknown tolerance {other:?}"))),
        };
        *slot = value;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyOptions {
    pub tolerances: Tolerances,
    pub seed: u64,
    /// Suppression coefficient used by the orthogonality property. Anything
    /// but 1 should make that property fail.
    pub orthogonality_lambda: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            tolerances: Tolerances::default(),
            seed: 20_240_601,
            orthogonality_lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub cases: usize,
    pub observed: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl PropertyResult {
    fn new(name: &str, cases: usize, observed: f64, tolerance: f64) -> Self {
        PropertyResult {
            name: name.to_string(),
            cases,
            observed,
            tolerance,
            passed: observed.is_finite() && observed <= tolerance,
        }
    }
}

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("finite samples")
}

fn random_shape(rng: &mut ChaCha8Rng, max_elems: usize) -> Vec<usize> {
    loop {
        let ndim = rng.gen_range(1..=4);
        let shape: Vec<usize> = (0..ndim).map(|_| rng.gen_range(1..=6)).collect();
        if shape.iter().product::<usize>() <= max_elems {
            return shape;
        }
    }
}

fn rel(diff: f64, scale: f64) -> f64 {
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Norm-wise relative error between two tensors; 0 when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    relative_error_floor(a, b, 0.0)
}

/// Like [`relative_error`] but never divides by less than `floor`, the
/// resolution of a finite-difference estimate.
pub fn relative_error_floor(a: &Tensor, b: &Tensor, floor: f64) -> Result<f64> {
    let diff = frobenius_norm(&a.sub(b)?)?;
    let scale = frobenius_norm(a)?.max(frobenius_norm(b)?).max(floor);
    Ok(if scale < 1e-300 { 0.0 } else { diff / scale })
}

fn orthogonality(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<PropertyResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let shape = random_shape(rng, 256);
        let (g, w) = (gaussian(&shape, rng), gaussian(&shape, rng));
        let u = suppressed_gradient(&g, &w, opts.orthogonality_lambda)?;
        let scale = frobenius_norm(&u)? * frobenius_norm(&w)?;
        worst = worst.max(rel(inner_product(&u, &w)?.abs(), scale));
    }
    Ok(PropertyResult::new("orthogonality", 1000, worst, opts.tolerances.orthogonality))
}

fn lambda_zero_reduction(rng: &mut ChaCha8Rng) -> Result<PropertyResult> {
    let mut mismatches = 0;
    for _ in 0..500 {
        let shape = random_shape(rng, 64);
        let (w, g) = (gaussian(&shape, rng), gaussian(&shape, rng));
        let lr = rng.gen_range(1e-4..1.0);
        let mut a = ParamState::new(w.clone(), WeightMode::Dss)?;
        let mut b = ParamState::new(w, WeightMode::Plain)?;
        a.grad = g.clone();
        b.grad = g;
        dss_step(&mut a, &DssConfig { lambda: 0.0, lr, ..DssConfig::default() })?;
        sgd_step(&mut b, lr)?;
        if a.weight != b.weight {
            mismatches += 1;
        }
    }
    Ok(PropertyResult::new("lambda-zero-is-sgd", 500, mismatches as f64, 0.0))
}

fn orthogonal_reduction(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<PropertyResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let shape = random_shape(rng, 64);
        let w = gaussian(&shape, rng);
        let raw = gaussian(&shape, rng);
        let g = raw.sub(&project_onto_weight(&raw, &w)?)?;
        let (lr, lambda) = (rng.gen_range(1e-4..1.0), rng.gen_range(0.0..=1.0));
        let mut a = ParamState::new(w.clone(), WeightMode::Dss)?;
        let mut b = ParamState::new(w, WeightMode::Plain)?;
        a.grad = g.clone();
        b.grad = g;
        dss_step(&mut a, &DssConfig { lambda, lr, ..DssConfig::default() })?;
        sgd_step(&mut b, lr)?;
        worst = worst.max(rel(a.weight.max_abs_diff(&b.weight)?, frobenius_norm(&b.weight)?));
    }
    Ok(PropertyResult::new(
        "orthogonal-gradient-is-sgd",
        500,
        worst,
        opts.tolerances.orthogonal_reduction,
    ))
}

fn interpolation(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<PropertyResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let shape = random_shape(rng, 64);
        let (w, g) = (gaussian(&shape, rng), gaussian(&shape, rng));
        let (lr, lambda) = (rng.gen_range(1e-3..1.0), rng.gen_range(0.01..0.99));
        let mut p = ParamState::new(w.clone(), WeightMode::Dss)?;
        p.grad = g.clone();
        dss_step(&mut p, &DssConfig { lambda, lr, ..DssConfig::default() })?;
        let applied = w.sub(&p.weight)?.scale(1.0 / lr)?;
        let parallel = project_onto_weight(&g, &w)?;
        let expected = parallel.scale(1.0 - lambda)?.add(&g.sub(&parallel)?)?;
        worst = worst.max(relative_error(&applied, &expected)?);
    }
    Ok(PropertyResult::new("lambda-interpolation", 500, worst, opts.tolerances.interpolation))
}

fn wn_properties(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<[PropertyResult; 2]> {
    let (mut fd_worst, mut orth_worst): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let shape = random_shape(rng, 64);
        let omega = gaussian(&shape, rng).scale(rng.gen_range(0.2..5.0))?;
        let probe = QuadraticProbe::new(
            gaussian(&shape, rng).map(|v| 0.5 + v.abs())?,
            gaussian(&shape, rng),
        )?;
        let loss = |o: &Tensor| -> Result<f64> {
            let n = frobenius_norm(o)?;
            probe.loss(&o.scale(1.0 / n)?)
        };
        let n = frobenius_norm(&omega)?;
        let g_eff = probe.gradient(&omega.scale(1.0 / n)?)?;
        let analytic = wn_backward(&omega, &g_eff)?;
        let mut numeric = Tensor::zeros(omega.shape())?;
        for i in 0..omega.len() {
            let h = 1e-6 * omega.data()[i].abs().max(1.0);
            let (mut plus, mut minus) = (omega.clone(), omega.clone());
            plus.data_mut()[i] += h;
            minus.data_mut()[i] -= h;
            numeric.data_mut()[i] = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
        }
        // An exactly-zero gradient (one-element Ω) meets pure difference noise.
        let floor = 1e-3 * frobenius_norm(&g_eff)? / n;
        fd_worst = fd_worst.max(relative_error_floor(&analytic, &numeric, floor)?);
        let scale = frobenius_norm(&analytic)? * n;
        orth_worst = orth_worst.max(rel(inner_product(&analytic, &omega)?.abs(), scale));
    }
    Ok([
        PropertyResult::new("wn-backward-finite-difference", 100, fd_worst, opts.tolerances.wn_finite_difference),
        PropertyResult::new("wn-backward-orthogonality", 100, orth_worst, opts.tolerances.wn_orthogonality),
    ])
}

/// `Σ (aᵢ − bᵢ)(aᵢ + bᵢ)`: `‖a‖² − ‖b‖²` without cancelling two large sums.
pub fn squared_norm_change(after: &Tensor, before: &Tensor) -> Result<f64> {
    if after.shape() != before.shape() {
        return Err(Error::invalid("squared_norm_change: shapes differ"));
    }
    Ok(after
        .data()
        .iter()
        .zip(before.data())
        .map(|(a, b)| (a - b) * (a + b))
        .sum())
}

// Fresh random linear loss ⟨aₜ, Ω̃⟩ each step, so the gradient never decays
// toward the rounding floor of ‖Ω‖².
fn norm_growth(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<PropertyResult> {
    let shape = [4, 4];
    let mut p = ParamState::new(gaussian(&shape, rng), WeightMode::WeightNorm)?;
    let lr = 0.05;
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let before = p.weight.clone();
        p.grad = wn_backward(&p.weight, &gaussian(&shape, rng))?;
        let expected = lr * lr * frobenius_norm(&p.grad)?.powi(2);
        sgd_step(&mut p, lr)?;
        let growth = squared_norm_change(&p.weight, &before)?;
        worst = worst.max(rel((growth - expected).abs(), expected));
    }
    Ok(PropertyResult::new("norm-growth-law", 500, worst, opts.tolerances.norm_growth))
}

fn equivalence(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<[PropertyResult; 2]> {
    let init = gaussian(&[4, 4], rng);
    let probe = QuadraticProbe::seeded(&[4, 4], rng.gen())?;
    let dev = equivalence_trace(&init, &probe, 200, 1e-3)?.max_direction_deviation;
    let ladder = [1e-2, 5e-3, 2.5e-3]
        .iter()
        .map(|&lr| equivalence_trace(&init, &probe, 200, lr).map(|r| r.max_direction_deviation))
        .collect::<Result<Vec<_>>>()?;
    let increase = ladder.windows(2).map(|w| (w[1] - w[0]).max(0.0)).fold(0.0, f64::max);
    Ok([
        PropertyResult::new("equivalence-trace", 200, dev, opts.tolerances.equivalence),
        PropertyResult::new("equivalence-shrinks-with-lr", 3, increase, 0.0),
    ])
}

/// Kernel, stride, padding and a square input extent that tiles exactly.
fn conv_geometry(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    let k = rng.gen_range(1..=3);
    conv_geometry_with_kernel(k, rng)
}

fn conv_geometry_with_kernel(k: usize, rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    let (s, out) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
    let span = s * (out - 1) + k;
    let p = if span > 2 { rng.gen_range(0..=1) } else { 0 };
    (k, s, p, span - 2 * p)
}

/// Random layer and input shape for the finite-difference check of `kind`.
fn random_layer_case(kind: usize, case: usize, rng: &mut ChaCha8Rng) -> Result<(Layer, Vec<usize>)> {
    let modes = [WeightMode::Plain, WeightMode::Dss, WeightMode::WeightNorm];
    let mode = modes[case % 3];
    let n = rng.gen_range(2..=3);
    let (spec, shape) = match kind {
        0 => {
            let (i, o) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
            (LayerSpec::linear(i, o).with_mode(mode), vec![n, i])
        }
        1 => {
            let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (k, s, p, h) = conv_geometry(rng);
            (LayerSpec::conv2d(ci, co, k, s, p).with_mode(mode), vec![n, ci, h, h])
        }
        2 => {
            // With two samples a channel normalizes to ±1 whatever the input;
            // that degenerate gradient is all difference noise.
            let (c, n) = (rng.gen_range(1..=4), rng.gen_range(3..=4));
            let shape = if case % 2 == 0 { vec![n, c] } else { vec![n, c, 2, 3] };
            (LayerSpec::BatchNorm { channels: c }, shape)
        }
        3 => (LayerSpec::Relu, vec![n, rng.gen_range(1..=8)]),
        4 => (
            LayerSpec::GradientReversal {
                alpha: rng.gen_range(0.0..2.0),
            },
            vec![n, rng.gen_range(1..=8)],
        ),
        _ => (LayerSpec::Flatten, vec![n, 2, rng.gen_range(1..=3), 2]),
    };
    let mut layer = Layer::new(spec, rng)?;
    if let Some(bn) = layer.state.batchnorm.as_mut() {
        bn.gamma.weight = gaussian(bn.gamma.weight.shape(), rng);
        bn.beta.weight = gaussian(bn.beta.weight.shape(), rng);
        if case % 4 == 3 {
            // frozen statistics: normalize with (random) running moments
            bn.running_mean = gaussian(bn.running_mean.shape(), rng);
            bn.running_var = gaussian(bn.running_var.shape(), rng).map(|v| 0.5 + v.abs())?;
            bn.freeze_stats = true;
        }
    }
    if let Some(b) = layer.state.bias.as_mut() {
        b.weight = gaussian(b.weight.shape(), rng);
    }
    Ok((layer, shape))
}

/// Largest norm-wise relative error between a layer's backward pass and
/// central differences of `L = Σ probe ⊙ forward(x)`, over the input and
/// every parameter. Gradient reversal is compared against `−α` times the
/// finite difference of its identity forward.
pub fn layer_gradient_error(layer: &mut Layer, input: &Tensor, rng: &mut impl Rng) -> Result<f64> {
    for p in layer.params_mut() {
        p.zero_grad();
    }
    let out = layer.forward(input, true)?;
    let probe = Tensor::new(
        out.shape().to_vec(),
        (0..out.len()).map(|_| rng.sample(StandardNormal)).collect(),
    )?;
    let grad_in = layer.backward(&probe)?;
    let sign = match layer.spec {
        LayerSpec::GradientReversal { .. } => -layer.state.grl_alpha,
        _ => 1.0,
    };

    let loss = |layer: &mut Layer, x: &Tensor| -> Result<f64> {
        let y = layer.forward(x, true)?;
        layer.state.clear_cache();
        inner_product(&y, &probe)
    };
    let central = |layer: &mut Layer, x: &Tensor, i: usize| -> Result<f64> {
        let h = 1e-6 * x.data()[i].abs().max(1.0);
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        Ok((loss(layer, &plus)? - loss(layer, &minus)?) / (2.0 * h))
    };

    let mut fd_in = Tensor::zeros(input.shape())?;
    for i in 0..input.len() {
        fd_in.data_mut()[i] = sign * central(layer, input, i)?;
    }
    let mut worst = relative_error(&grad_in, &fd_in)?;

    let analytic: Vec<Tensor> = layer.params().iter().map(|p| p.grad.clone()).collect();
    for (k, analytic) in analytic.into_iter().enumerate() {
        let mut fd = Tensor::zeros(analytic.shape())?;
        for i in 0..analytic.len() {
            let original = layer.params()[k].weight.data()[i];
            let h = 1e-6 * original.abs().max(1.0);
            layer.params_mut()[k].weight.data_mut()[i] = original + h;
            let up = loss(layer, input)?;
            layer.params_mut()[k].weight.data_mut()[i] = original - h;
            let down = loss(layer, input)?;
            layer.params_mut()[k].weight.data_mut()[i] = original;
            fd.data_mut()[i] = (up - down) / (2.0 * h);
        }
        worst = worst.max(relative_error(&analytic, &fd)?);
    }
    Ok(worst)
}

/// Layer kinds covered by the finite-difference property, in check order.
pub const LAYER_KINDS: [&str; 6] = ["linear", "conv2d", "batchnorm", "relu", "gradient-reversal", "flatten"];

fn layer_finite_differences(opts: &VerifyOptions, rng: &mut ChaCha8Rng, per_kind: usize) -> Result<Vec<PropertyResult>> {
    (0..LAYER_KINDS.len())
        .map(|kind| {
            let mut worst: f64 = 0.0;
            for case in 0..per_kind {
                let (mut layer, shape) = random_layer_case(kind, case, rng)?;
                let input = gaussian(&shape, rng);
                worst = worst.max(layer_gradient_error(&mut layer, &input, rng)?);
            }
            Ok(PropertyResult::new(
                &format!("finite-difference-{}", LAYER_KINDS[kind]),
                per_kind,
                worst,
                opts.tolerances.layer_finite_difference,
            ))
        })
        .collect()
}

fn wn_scale_invariance(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<PropertyResult> {
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let spec = if case % 2 == 0 {
            LayerSpec::linear(rng.gen_range(1..=6), rng.gen_range(1..=6))
        } else {
            LayerSpec::conv2d(2, 3, 3, 1, 1)
        }
        .with_mode(WeightMode::WeightNorm);
        let mut layer = Layer::new(spec.clone(), rng)?;
        let input = match spec {
            LayerSpec::Linear { in_features, .. } => gaussian(&[3, in_features], rng),
            _ => gaussian(&[2, 2, 4, 4], rng),
        };
        let base = layer.forward(&input, false)?;
        let c = rng.gen_range(0.01..100.0);
        let w = layer.state.weight.as_mut().expect("weight");
        w.weight = w.weight.scale(c)?;
        let scaled = layer.forward(&input, false)?;
        worst = worst.max(relative_error(&scaled, &base)?);
    }
    Ok(PropertyResult::new("wn-forward-scale-invariance", 50, worst, opts.tolerances.wn_scale_invariance))
}

fn conv_properties(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<[PropertyResult; 2]> {
    let (mut lin, mut adj): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let (ci, co, k) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (k, s, p, h) = conv_geometry_with_kernel(k, rng);
        let (a, b) = (gaussian(&[2, ci, h, h], rng), gaussian(&[2, ci, h, h], rng));
        let (k1, k2) = (gaussian(&[co, ci, k, k], rng), gaussian(&[co, ci, k, k], rng));
        let f = |x: &Tensor, w: &Tensor| conv2d_forward(x, w, s, p);
        let sum_in = f(&a.add(&b)?, &k1)?;
        lin = lin.max(relative_error(&sum_in, &f(&a, &k1)?.add(&f(&b, &k1)?)?)?);
        let sum_k = f(&a, &k1.add(&k2)?)?;
        lin = lin.max(relative_error(&sum_k, &f(&a, &k1)?.add(&f(&a, &k2)?)?)?);

        let y = f(&a, &k1)?;
        let g = gaussian(y.shape(), rng);
        let (gi, gk) = conv2d_backward(&a, &k1, &g, s, p)?;
        let delta = gaussian(a.shape(), rng);
        let lhs = inner_product(&g, &f(&delta, &k1)?)?;
        let rhs = inner_product(&gi, &delta)?;
        adj = adj.max(rel((lhs - rhs).abs(), lhs.abs().max(rhs.abs())));
        let dk = gaussian(k1.shape(), rng);
        let lhs = inner_product(&g, &f(&a, &dk)?)?;
        let rhs = inner_product(&gk, &dk)?;
        adj = adj.max(rel((lhs - rhs).abs(), lhs.abs().max(rhs.abs())));
    }
    Ok([
        PropertyResult::new("conv-linearity", 100, lin, opts.tolerances.conv_linearity),
        PropertyResult::new("conv-adjoint", 100, adj, opts.tolerances.conv_adjoint),
    ])
}

fn svd_property(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<PropertyResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (r, c) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let m = gaussian(&[r, c], rng);
        let s = svd_small(&m)?;
        worst = worst.max(s.reconstruct()?.max_abs_diff(&m)?);
        let utu = matmul(&transpose(&s.u)?, &s.u)?;
        let vvt = matmul(&s.v, &transpose(&s.v)?)?;
        for (q, dim) in [(utu, r), (vvt, c)] {
            let mut id = Tensor::zeros(&[dim, dim])?;
            (0..dim).for_each(|i| id.data_mut()[i * dim + i] = 1.0);
            worst = worst.max(q.max_abs_diff(&id)?);
        }
    }
    Ok(PropertyResult::new("svd-reconstruction", 100, worst, opts.tolerances.svd))
}

fn norm_identity(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<PropertyResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let w = gaussian(&random_shape(rng, 256), rng);
        let ip = inner_product(&w, &w)?;
        worst = worst.max(rel((frobenius_norm(&w)?.powi(2) - ip).abs(), ip));
    }
    Ok(PropertyResult::new("frobenius-inner-product", 500, worst, opts.tolerances.norm_identity))
}

fn histogram_conservation(rng: &mut ChaCha8Rng) -> Result<PropertyResult> {
    let mut lost = 0u64;
    for _ in 0..200 {
        let n = rng.gen_range(0..500);
        let values: Vec<f64> = (0..n).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let h = build_histogram(&values, rng.gen_range(1..=60), (-1.0, 1.0))?;
        lost += (h.total() as i64 - n as i64).unsigned_abs();
    }
    Ok(PropertyResult::new("histogram-conservation", 200, lost as f64, 0.0))
}

/// Runs every property. Errors only on a malfunction of the checks
/// themselves; failing properties are reported in the results.
pub fn run_suite(opts: &VerifyOptions) -> Result<Vec<PropertyResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = vec![
        orthogonality(opts, &mut rng)?,
        lambda_zero_reduction(&mut rng)?,
        orthogonal_reduction(opts, &mut rng)?,
        interpolation(opts, &mut rng)?,
    ];
    out.extend(wn_properties(opts, &mut rng)?);
    out.push(norm_growth(opts, &mut rng)?);
    out.extend(equivalence(opts, &mut rng)?);
    out.extend(layer_finite_differences(opts, &mut rng, 20)?);
    out.push(wn_scale_invariance(opts, &mut rng)?);
    out.extend(conv_properties(opts, &mut rng)?);
    out.push(svd_property(opts, &mut rng)?);
    out.push(norm_identity(opts, &mut rng)?);
    out.push(histogram_conservation(&mut rng)?);
    Ok(out)
}
