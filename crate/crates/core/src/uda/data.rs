//! Procedural two-domain image data.
//!
//! Each class is an oriented sinusoidal grating (class `k` of `K` sits at
//! angle `πk/K`) with random frequency, phase, colors and texture noise. The
//! target domain is the same set of images pushed through a photometric
//! shift, so label marginals match by construction.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Discriminator class: source 0, target 1.
    pub fn label(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

/// One image. Training-time target samples carry no label.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSample {
    pub image: Tensor,
    pub label: Option<usize>,
    pub domain: Domain,
}

impl DomainSample {
    /// Copy with the label removed, for unlabeled target training data.
    pub fn unlabeled(&self) -> DomainSample {
        DomainSample {
            image: self.image.clone(),
            label: None,
            domain: self.domain,
        }
    }
}

/// Photometric difference applied to the target copy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    /// Added to every pixel.
    pub brightness_offset: f64,
    /// Multiplies deviations from each image's per-channel mean.
    pub contrast_scale: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_std: f64,
    /// Rotation (radians) of RGB about the gray axis.
    pub hue_rotation: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift::identity()
    }
}

impl DomainShift {
    pub fn identity() -> Self {
        DomainShift {
            brightness_offset: 0.0,
            contrast_scale: 1.0,
            noise_std: 0.0,
            hue_rotation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.brightness_offset, self.contrast_scale, self.noise_std, self.hue_rotation]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::invalid("domain shift parameters must be finite"));
        }
        if self.contrast_scale <= 0.0 {
            return Err(Error::invalid(format!("contrast_scale must be > 0, got {}", self.contrast_scale)));
        }
        if self.noise_std < 0.0 {
            return Err(Error::invalid(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDomainSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    #[serde(default)]
    pub shift: DomainShift,
    pub seed: u64,
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::invalid("samples_per_class must be positive"));
        }
        self.shift.validate()
    }
}

fn render(class: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n = IMAGE_SIZE as f64;
    let angle = PI * class as f64 / num_classes as f64 + rng.gen_range(-0.15..0.15) * PI / num_classes as f64;
    let freq = rng.gen_range(1.5..3.5);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let fg: [f64; 3] = [rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0)];
    let bg: [f64; 3] = [rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)];
    let texture = Normal::new(0.0, 0.05).expect("valid std");
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut data = vec![0.0; IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let t = (x as f64 * dx + y as f64 * dy) / n;
            let m = 0.5 + 0.5 * (2.0 * PI * freq * t + phase).sin();
            for c in 0..IMAGE_CHANNELS {
                data[(c * IMAGE_SIZE + y) * IMAGE_SIZE + x] = bg[c] + (fg[c] - bg[c]) * m + texture.sample(rng);
            }
        }
    }
    Tensor::new(vec![IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data)
}

/// Applies `shift` to one image. Each component is skipped entirely when it
/// is the identity, so a null shift returns a bit-identical copy.
pub fn apply_shift(image: &Tensor, shift: &DomainShift, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut out = image.clone();
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    if shift.hue_rotation != 0.0 {
        // Rodrigues rotation about (1,1,1)/√3.
        let (c, s) = (shift.hue_rotation.cos(), shift.hue_rotation.sin());
        let a = (1.0 - c) / 3.0;
        let b = s / 3f64.sqrt();
        let m = [[c + a, a - b, a + b], [a + b, c + a, a - b], [a - b, a + b, c + a]];
        let d = out.data_mut();
        for p in 0..plane {
            let rgb = [d[p], d[plane + p], d[2 * plane + p]];
            for ch in 0..3 {
                d[ch * plane + p] = m[ch][0] * rgb[0] + m[ch][1] * rgb[1] + m[ch][2] * rgb[2];
            }
        }
    }
    if shift.contrast_scale != 1.0 {
        let d = out.data_mut();
        for ch in 0..IMAGE_CHANNELS {
            let chan = &mut d[ch * plane..(ch + 1) * plane];
            let mean = chan.iter().sum::<f64>() / plane as f64;
            chan.iter_mut().for_each(|v| *v = mean + shift.contrast_scale * (*v - mean));
        }
    }
    if shift.brightness_offset != 0.0 {
        out.data_mut().iter_mut().for_each(|v| *v += shift.brightness_offset);
    }
    if shift.noise_std > 0.0 {
        let noise = Normal::new(0.0, shift.noise_std).map_err(|e| Error::invalid(format!("noise: {e}")))?;
        out.data_mut().iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    out.check_finite("shifted image")?;
    Ok(out)
}

/// Renders the labeled source set and its shifted target copy.
pub fn generate_domains(spec: &SyntheticDomainSpec) -> Result<(Vec<DomainSample>, Vec<DomainSample>)> {
    spec.validate()?;
    let mut render_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Separate stream so changing the shift never changes the source images.
    let mut shift_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5348_4946_5400_0000);
    let mut source = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    let mut target = Vec::with_capacity(source.capacity());
    for _ in 0..spec.samples_per_class {
        for class in 0..spec.num_classes {
            let image = render(class, spec.num_classes, &mut render_rng)?;
            let shifted = apply_shift(&image, &spec.shift, &mut shift_rng)?;
            source.push(DomainSample {
                image,
                label: Some(class),
                domain: Domain::Source,
            });
            target.push(DomainSample {
                image: shifted,
                label: Some(class),
                domain: Domain::Target,
            });
        }
    }
    Ok((source, target))
}

/// Training and held-out views of both domains.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub source_train: Vec<DomainSample>,
    /// Unlabeled: the training loop cannot read target labels.
    pub target_train: Vec<DomainSample>,
    pub source_test: Vec<DomainSample>,
    pub target_test: Vec<DomainSample>,
}

impl DomainData {
    /// Training split from `spec`; held-out split from the same spec with a
    /// derived seed and `test_per_class` samples per class.
    pub fn generate(spec: &SyntheticDomainSpec, test_per_class: usize) -> Result<Self> {
        let (source_train, target_full) = generate_domains(spec)?;
        let test_spec = SyntheticDomainSpec {
            samples_per_class: test_per_class,
            seed: spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1),
            ..spec.clone()
        };
        let (source_test, target_test) = generate_domains(&test_spec)?;
        Ok(DomainData {
            source_train,
            target_train: target_full.iter().map(DomainSample::unlabeled).collect(),
            source_test,
            target_test,
        })
    }
}

/// Stacks images into an `N×C×H×W` batch.
pub fn stack_images(samples: &[&DomainSample]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.image.shape());
    let mut data = Vec::with_capacity(samples.len() * first.image.len());
    for s in samples {
        if s.image.shape() != first.image.shape() {
            return Err(Error::invalid("images in a batch differ in shape"));
        }
        data.extend_from_slice(s.image.data());
    }
    Tensor::new(shape, data)
}

/// Fisher-Yates shuffle of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSidecar {
    /// `[N, C, H, W]` of the binary payload.
    pub shape: Vec<usize>,
    pub labels: Vec<Option<usize>>,
    pub domains: Vec<Domain>,
    pub seed: u64,
    pub spec: SyntheticDomainSpec,
}

/// Writes `samples` as little-endian `f64` pixels to `bin_path` and the
/// metadata to `json_path`.
pub fn export_dataset(
    samples: &[DomainSample],
    spec: &SyntheticDomainSpec,
    bin_path: &Path,
    json_path: &Path,
) -> Result<()> {
    let refs: Vec<&DomainSample> = samples.iter().collect();
    let stacked = stack_images(&refs)?;
    let mut bytes = Vec::with_capacity(stacked.len() * 8);
    for v in stacked.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(bin_path, bytes)?;
    let sidecar = DatasetSidecar {
        shape: stacked.shape().to_vec(),
        labels: samples.iter().map(|s| s.label).collect(),
        domains: samples.iter().map(|s| s.domain).collect(),
        seed: spec.seed,
        spec: spec.clone(),
    };
    fs::write(json_path, serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(())
}

pub fn import_dataset(bin_path: &Path, json_path: &Path) -> Result<(Vec<DomainSample>, DatasetSidecar)> {
    let sidecar: DatasetSidecar = serde_json::from_str(&fs::read_to_string(json_path)?)?;
    let bytes = fs::read(bin_path)?;
    if sidecar.shape.len() != 4 {
        return Err(Error::invalid(format!("dataset shape {:?} is not NCHW", sidecar.shape)));
    }
    let numel: usize = sidecar.shape.iter().product();
    if bytes.len() != numel * 8 {
        return Err(Error::invalid(format!(
            "payload holds {} bytes, shape {:?} needs {}",
            bytes.len(),
            sidecar.shape,
            numel * 8
        )));
    }
    let n = sidecar.shape[0];
    if sidecar.labels.len() != n || sidecar.domains.len() != n {
        return Err(Error::invalid("sidecar label/domain counts do not match the payload"));
    }
    let per = numel / n;
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let samples = values
        .chunks(per)
        .zip(sidecar.labels.iter().zip(&sidecar.domains))
        .map(|(px, (&label, &domain))| {
            Ok(DomainSample {
                image: Tensor::new(sidecar.shape[1..].to_vec(), px.to_vec())?,
                label,
                domain,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, sidecar))
}
