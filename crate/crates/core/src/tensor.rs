//! Dense row-major `f64` tensors and the exact primitives built on them.
//!
//! Storage is always contiguous; there are no views or strides. Every
//! reduction walks the data in a fixed order so results are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense multi-dimensional array of finite doubles, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl Tensor {
    /// Builds a tensor, checking that extents are positive, that the element
    /// count matches and that every entry is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("shape {shape:?} has a zero extent")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {numel} elements but {} were supplied",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// One-dimensional tensor. Panics on an empty vector or non-finite entries;
    /// meant for literals in tests and examples.
    pub fn from_slice(values: &[f64]) -> Self {
        Tensor::new(vec![values.len()], values.to_vec()).expect("valid 1-D literal")
    }

    /// Shaped literal, panicking on invalid input like [`Tensor::from_slice`].
    pub fn from_shape(shape: &[usize], values: &[f64]) -> Self {
        Tensor::new(shape.to_vec(), values.to_vec()).expect("valid shaped literal")
    }

    /// All-zero tensor. A zero extent is rejected.
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; numel])
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers that write through it are
    /// responsible for keeping entries finite; [`Tensor::check_finite`]
    /// re-validates.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(pos) => Err(Error::numeric(format!(
                "{what}: non-finite value at flat index {pos}"
            ))),
            None => Ok(()),
        }
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        self.map(|v| v * factor)
    }

    /// Elementwise map; fails if the result contains a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn zip_with(
        &self,
        other: &Tensor,
        op: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// `self += alpha * other`, in place.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        self.check_finite("axpy")
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Entry of a 2-D tensor.
    pub fn at2(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }
}

/// Square root of the sum of squared entries.
pub fn frobenius_norm(w: &Tensor) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::invalid("frobenius_norm of an empty tensor"));
    }
    Ok(w.data.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Flattened inner product `sum_i a_i * b_i`.
pub fn inner_product(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b, "inner_product")?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

/// Geometry of a 2-D convolution, validated once and shared by forward and
/// backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub padding: usize,
}

fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize, axis: &str) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::invalid(format!(
            "{axis}: kernel extent {kernel} exceeds padded input {padded}"
        )));
    }
    let span = padded - kernel;
    if span % stride != 0 {
        return Err(Error::invalid(format!(
            "{axis}: ({input} + 2*{padding} - {kernel}) is not divisible by stride {stride}"
        )));
    }
    Ok(span / stride + 1)
}

impl ConvGeometry {
    pub fn new(input_shape: &[usize], kernel_shape: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input_shape.len() != 4 || kernel_shape.len() != 4 {
            return Err(Error::invalid(format!(
                "conv2d expects NCHW input and OIKhKw kernel, got {input_shape:?} and {kernel_shape:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        let (o, ci, kh, kw) = (kernel_shape[0], kernel_shape[1], kernel_shape[2], kernel_shape[3]);
        if c != ci {
            return Err(Error::invalid(format!(
                "conv2d channel mismatch: input has {c}, kernel expects {ci}"
            )));
        }
        Ok(ConvGeometry {
            batch: n,
            in_channels: c,
            out_channels: o,
            in_h: h,
            in_w: w,
            k_h: kh,
            k_w: kw,
            out_h: output_extent(h, kh, stride, padding, "height")?,
            out_w: output_extent(w, kw, stride, padding, "width")?,
            stride,
            padding,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Input coordinate hit by output position `out` and kernel tap `k`, or
    /// `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, out: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.padding as isize;
        if pos < 0 || pos as usize >= limit {
            None
        } else {
            Some(pos as usize)
        }
    }
}

/// Cross-correlation of an NCHW input with an OIKhKw kernel.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let mut out = vec![0.0; g.batch * g.out_channels * g.out_h * g.out_w];
    let x = input.data();
    let k = kernel.data();
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0;
                    for c in 0..g.in_channels {
                        for ky in 0..g.k_h {
                            let Some(iy) = g.source(oy, ky, g.in_h) else { continue };
                            for kx in 0..g.k_w {
                                let Some(ix) = g.source(ox, kx, g.in_w) else { continue };
                                let xi = ((n * g.in_channels + c) * g.in_h + iy) * g.in_w + ix;
                                let ki = ((o * g.in_channels + c) * g.k_h + ky) * g.k_w + kx;
                                acc += x[xi] * k[ki];
                            }
                        }
                    }
                    out[((n * g.out_channels + o) * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    }
    Tensor::new(g.output_shape().to_vec(), out)
}

/// Adjoints of [`conv2d_forward`] with respect to its input and its kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if grad_out.shape() != g.output_shape() {
        return Err(Error::invalid(format!(
            "conv2d_backward: grad_out shape {:?} does not match forward output {:?}",
            grad_out.shape(),
            g.output_shape()
        )));
    }
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let d = go[((n * g.out_channels + o) * g.out_h + oy) * g.out_w + ox];
                    if d == 0.0 {
                        continue;
                    }
                    for c in 0..g.in_channels {
                        for ky in 0..g.k_h {
                            let Some(iy) = g.source(oy, ky, g.in_h) else { continue };
                            for kx in 0..g.k_w {
                                let Some(ix) = g.source(ox, kx, g.in_w) else { continue };
                                let xi = ((n * g.in_channels + c) * g.in_h + iy) * g.in_w + ix;
                                let ki = ((o * g.in_channels + c) * g.k_h + ky) * g.k_w + kx;
                                gx[xi] += d * k[ki];
                                gk[ki] += d * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
    ))
}

/// `a (m×k) · b (k×n)` for 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::invalid(format!(
            "matmul: incompatible shapes {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b.data[p * n + j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Transpose of a 2-D tensor.
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 {
        return Err(Error::invalid(format!("transpose of non-2-D shape {:?}", a.shape)));
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}
