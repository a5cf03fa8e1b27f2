use rand::Rng;

use super::layer::{Layer, LayerSpec};
use crate::error::Result;
use crate::optim::{step, DssConfig, StepOutcome, WeightMode};
use crate::tensor::Tensor;

/// Layers applied in order.
#[derive(Debug, Clone)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(specs: &[LayerSpec], rng: &mut impl Rng) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|s| Layer::new(s.clone(), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Sequential { layers })
    }

    pub fn forward(&mut self, input: &Tensor, training: bool) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x, training)?;
        }
        Ok(x)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    /// Steps every parameter according to its mode and returns how many
    /// suppression steps had to fall back to plain SGD.
    pub fn step(&mut self, cfg: &DssConfig) -> Result<usize> {
        let mut fallbacks = 0;
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                if step(p, cfg)? == StepOutcome::FellBackToSgd {
                    fallbacks += 1;
                }
            }
        }
        Ok(fallbacks)
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            layer.params_mut().into_iter().for_each(|p| p.zero_grad());
        }
    }

    /// Applies `mode` to every weight-bearing layer.
    pub fn set_mode(&mut self, mode: WeightMode) {
        for layer in &mut self.layers {
            if layer.spec.is_weight_bearing() {
                layer.set_mode(mode);
            }
        }
    }

    pub fn set_grl_alpha(&mut self, alpha: f64) {
        for layer in &mut self.layers {
            if matches!(layer.spec, LayerSpec::GradientReversal { .. }) {
                layer.state.grl_alpha = alpha;
            }
        }
    }

    pub fn freeze_batchnorm_stats(&mut self, freeze: bool) {
        for layer in &mut self.layers {
            if let Some(bn) = layer.state.batchnorm.as_mut() {
                bn.freeze_stats = freeze;
            }
        }
    }

    /// Indices of layers that own a weight tensor.
    pub fn weight_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.spec.is_weight_bearing())
            .map(|(i, _)| i)
            .collect()
    }

    /// Flat copy of every parameter value, in layer order.
    pub fn parameter_snapshot(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.params().into_iter().flat_map(|p| p.weight.data().to_vec()))
            .collect()
    }
}
