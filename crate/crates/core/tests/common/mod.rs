//! Test-side oracles. The finite-difference checks here share nothing with
//! the library's own verification harness: a quadratic loss instead of a
//! linear probe, a different step rule and a separate case generator.

#![allow(dead_code)]

use dss_lab::nn::{Layer, LayerSpec};
use dss_lab::optim::WeightMode;
use dss_lab::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let s = norm(a).max(norm(b));
    if s == 0.0 {
        0.0
    } else {
        norm(&d) / s
    }
}

/// Fourth-order central difference of `f` along coordinate `i` of `x`.
pub fn fd_coord(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let h = 1e-4 * x[i].abs().max(0.1);
    let mut at = |d: f64| {
        let mut y = x.to_vec();
        y[i] += d;
        f(&y)
    };
    // paired differences first, so a locally constant f gives exactly zero
    let near = at(h) - at(-h);
    let far = at(2.0 * h) - at(-2.0 * h);
    (8.0 * near - far) / (12.0 * h)
}

/// A layer kind under test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kind {
    Linear,
    Conv,
    BatchNorm,
    Relu,
    Reversal,
    Flatten,
}

pub const KINDS: [Kind; 6] = [Kind::Linear, Kind::Conv, Kind::BatchNorm, Kind::Relu, Kind::Reversal, Kind::Flatten];

/// A random layer of `kind` with non-trivial parameters and an input for it.
///
/// Weight-normalized weights get at least two elements: a scalar `Ω/‖Ω‖` is
/// constant, and the one-ulp wobble of its computed value is all a finite
/// difference would see.
pub fn layer_case(kind: Kind, case: usize, rng: &mut ChaCha8Rng) -> (Layer, Tensor) {
    let mode = [WeightMode::Plain, WeightMode::WeightNorm, WeightMode::Dss][case % 3];
    let at_least = if mode == WeightMode::WeightNorm { 2 } else { 1 };
    let (spec, shape): (LayerSpec, Vec<usize>) = match kind {
        Kind::Linear => {
            let (n, i, o) = (rng.gen_range(1..=4), rng.gen_range(at_least..=7), rng.gen_range(1..=5));
            (LayerSpec::linear(i, o).with_mode(mode), vec![n, i])
        }
        Kind::Conv => {
            let (ci, co, k) = (rng.gen_range(1..=3), rng.gen_range(at_least..=3), rng.gen_range(1..=3));
            let s = rng.gen_range(1..=2);
            // extents that the strided kernel tiles exactly
            let mut extent = |p: usize| loop {
                let e = s * (rng.gen_range(1..=3) - 1) + k;
                if e > 2 * p {
                    return e - 2 * p;
                }
            };
            let p = usize::from(k > 1 && case % 2 == 1);
            let (h, w) = (extent(p), extent(p));
            (LayerSpec::conv2d(ci, co, k, s, p).with_mode(mode), vec![rng.gen_range(1..=2), ci, h, w])
        }
        Kind::BatchNorm => {
            let c = rng.gen_range(1..=3);
            // At least three values per channel: with two, train-mode output
            // is ±1 whatever the input.
            let shape = if case % 2 == 0 {
                vec![rng.gen_range(3..=6), c]
            } else {
                vec![rng.gen_range(2..=3), c, rng.gen_range(1..=3), 2]
            };
            (LayerSpec::BatchNorm { channels: c }, shape)
        }
        Kind::Relu => (LayerSpec::Relu, vec![rng.gen_range(1..=4), rng.gen_range(1..=9)]),
        Kind::Reversal => (
            LayerSpec::GradientReversal {
                alpha: rng.gen_range(0.1..3.0),
            },
            vec![rng.gen_range(1..=4), rng.gen_range(1..=9)],
        ),
        Kind::Flatten => (
            LayerSpec::Flatten,
            vec![rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3)],
        ),
    };
    let mut layer = Layer::new(spec, rng).unwrap();
    for p in layer.params_mut() {
        let shape = p.weight.shape().to_vec();
        p.weight = uniform(&shape, -1.5, 1.5, rng);
    }
    let mut input = uniform(&shape, -2.0, 2.0, rng);
    if kind == Kind::Relu {
        // keep every coordinate well away from the kink
        input = input.map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v }).unwrap();
    }
    (layer, input)
}

/// Largest relative error between the layer's backward pass and finite
/// differences of `½‖forward(x) − target‖²`, over the input and every
/// parameter. The reversal layer's backward is, by design, `−α` times the
/// derivative of its identity forward.
pub fn layer_fd_error(layer: &mut Layer, input: &Tensor, rng: &mut ChaCha8Rng) -> f64 {
    for p in layer.params_mut() {
        p.zero_grad();
    }
    let y = layer.forward(input, true).unwrap();
    let target = uniform(y.shape(), -1.0, 1.0, rng);
    let residual = y.sub(&target).unwrap();
    let grad_in = layer.backward(&residual).unwrap();
    let sign = match layer.spec {
        LayerSpec::GradientReversal { alpha } => -alpha,
        _ => 1.0,
    };

    let loss = |layer: &mut Layer, x: &Tensor| -> f64 {
        let y = layer.forward(x, true).unwrap();
        layer.state.clear_cache();
        0.5 * y.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    };

    let mut fd_in = Vec::with_capacity(input.len());
    {
        let layer_ref = &mut *layer;
        let mut f = |v: &[f64]| loss(layer_ref, &Tensor::new(input.shape().to_vec(), v.to_vec()).unwrap());
        for i in 0..input.len() {
            fd_in.push(sign * fd_coord(&mut f, input.data(), i));
        }
    }
    let mut worst = rel_err(grad_in.data(), &fd_in);

    let count = layer.params().len();
    for k in 0..count {
        let analytic = layer.params()[k].grad.data().to_vec();
        let start = layer.params()[k].weight.data().to_vec();
        let shape = layer.params()[k].weight.shape().to_vec();
        let mut fd = Vec::with_capacity(start.len());
        for i in 0..start.len() {
            let mut f = |v: &[f64]| {
                layer.params_mut()[k].weight = Tensor::new(shape.clone(), v.to_vec()).unwrap();
                loss(layer, input)
            };
            fd.push(fd_coord(&mut f, &start, i));
        }
        layer.params_mut()[k].weight = Tensor::new(shape, start).unwrap();
        worst = worst.max(rel_err(&analytic, &fd));
    }
    worst
}

/// `L(W̃) = ½ W̃ᵀ A W̃ + bᵀ W̃` on the flattened weight, with a random
/// symmetric `A`.
pub struct Quadratic {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub n: usize,
}

impl Quadratic {
    pub fn random(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = rng.gen_range(-1.0..1.0);
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        Quadratic {
            a,
            b: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            n,
        }
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            let row: f64 = (0..self.n).map(|j| self.a[i * self.n + j] * w[j]).sum();
            s += 0.5 * w[i] * row + self.b[i] * w[i];
        }
        s
    }

    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.a[i * self.n + j] * w[j]).sum::<f64>() + self.b[i])
            .collect()
    }
}

pub fn normalized(w: &[f64]) -> Vec<f64> {
    let n = norm(w);
    w.iter().map(|x| x / n).collect()
}
