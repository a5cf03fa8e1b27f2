use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::{stack_images, DomainSample};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, LayerSpec, Sequential};
use crate::optim::{DssConfig, WeightMode};
use crate::tensor::Tensor;

/// Layer lists for the shared backbone and the two heads that sit on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: Vec<LayerSpec>,
    pub head: Vec<LayerSpec>,
    /// Must begin with a gradient-reversal layer.
    pub discriminator: Vec<LayerSpec>,
}

impl Default for ModelSpec {
    /// Three conv/batchnorm/relu blocks and a normalized 32-wide feature
    /// projection, a linear 4-way head, and a one-hidden-layer discriminator behind
    /// gradient reversal.
    fn default() -> Self {
        ModelSpec {
            backbone: vec![
                LayerSpec::conv2d(3, 8, 3, 1, 1),
                LayerSpec::BatchNorm { channels: 8 },
                LayerSpec::Relu,
                LayerSpec::conv2d(8, 16, 4, 2, 1),
                LayerSpec::BatchNorm { channels: 16 },
                LayerSpec::Relu,
                LayerSpec::conv2d(16, 16, 4, 2, 1),
                LayerSpec::BatchNorm { channels: 16 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::linear(16 * 4 * 4, 32),
                LayerSpec::Relu,
            ],
            head: vec![LayerSpec::linear(32, 4)],
            discriminator: vec![
                LayerSpec::GradientReversal { alpha: 1.0 },
                LayerSpec::linear(32, 32),
                LayerSpec::Relu,
                LayerSpec::linear(32, 2),
            ],
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        for spec in self.backbone.iter().chain(&self.head).chain(&self.discriminator) {
            spec.validate()?;
        }
        if !matches!(self.discriminator.first(), Some(LayerSpec::GradientReversal { .. })) {
            return Err(Error::invalid("the discriminator must start with a gradient-reversal layer"));
        }
        if self.head.is_empty() || self.backbone.is_empty() {
            return Err(Error::invalid("backbone and head must be non-empty"));
        }
        Ok(())
    }
}

/// Backbone, task head and domain discriminator.
#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: Sequential,
    pub head: Sequential,
    pub discriminator: Sequential,
    /// Set by a backward pass, cleared by the optimizer step.
    pub(crate) gradients_fresh: bool,
}

impl Model {
    /// Builds all three networks from one generator (backbone first), then
    /// applies the group weight modes from `dss`.
    pub fn new(spec: &ModelSpec, dss: &DssConfig, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut model = Model {
            backbone: Sequential::new(&spec.backbone, rng)?,
            head: Sequential::new(&spec.head, rng)?,
            discriminator: Sequential::new(&spec.discriminator, rng)?,
            gradients_fresh: false,
        };
        model.apply_modes(dss);
        Ok(model)
    }

    pub fn apply_modes(&mut self, dss: &DssConfig) {
        let groups: [(&mut Sequential, Option<WeightMode>); 3] = [
            (&mut self.backbone, dss.backbone_mode),
            (&mut self.head, dss.head_mode),
            (&mut self.discriminator, dss.discriminator_mode),
        ];
        for (net, mode) in groups {
            if let Some(mode) = mode {
                net.set_mode(mode);
            }
        }
    }

    pub fn logits(&mut self, images: &Tensor, training: bool) -> Result<Tensor> {
        let features = self.backbone.forward(images, training)?;
        self.head.forward(&features, training)
    }

    /// Eval-mode class predictions, in chunks of `chunk` samples.
    pub fn predict(&mut self, samples: &[DomainSample], chunk: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(samples.len());
        for part in samples.chunks(chunk.max(1)) {
            let refs: Vec<&DomainSample> = part.iter().collect();
            let logits = self.logits(&stack_images(&refs)?, false)?;
            out.extend(argmax_rows(&logits));
        }
        Ok(out)
    }

    pub fn step(&mut self, dss: &DssConfig) -> Result<usize> {
        let fallbacks = self.backbone.step(dss)? + self.head.step(dss)? + self.discriminator.step(dss)?;
        self.gradients_fresh = false;
        Ok(fallbacks)
    }

    pub fn gradients_fresh(&self) -> bool {
        self.gradients_fresh
    }

    /// Stored weights of the backbone's weight-bearing layers, shallowest
    /// first. Under weight normalization these are the raw `Ω`.
    pub fn backbone_weights(&self) -> Vec<Tensor> {
        self.backbone
            .layers
            .iter()
            .filter_map(|l| l.state.weight.as_ref().map(|p| p.weight.clone()))
            .collect()
    }

    /// Every parameter value of all three networks, in a fixed order.
    pub fn parameter_snapshot(&self) -> Vec<f64> {
        let mut v = self.backbone.parameter_snapshot();
        v.extend(self.head.parameter_snapshot());
        v.extend(self.discriminator.parameter_snapshot());
        v
    }
}
