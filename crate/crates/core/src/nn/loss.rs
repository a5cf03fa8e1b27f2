use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over a batch of logits (N×K) and its gradient
/// with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.ndim() != 2 {
        return Err(Error::invalid(format!("logits must be N×K, got {:?}", logits.shape())));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * k];
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_norm = max + sum.ln();
        loss += log_norm - row[label];
        for j in 0..k {
            let p = (row[j] - log_norm).exp();
            grad[i * k + j] = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::numeric("cross-entropy loss is not finite"));
    }
    Ok((loss, Tensor::new(vec![n, k], grad)?))
}

/// Index of the largest entry in each row (first on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_way_tie_is_ln2() {
        let (l, g) = softmax_cross_entropy(&Tensor::from_shape(&[1, 2], &[0.0, 0.0]), &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn saturated_correct_is_zero() {
        let (l, _) = softmax_cross_entropy(&Tensor::from_shape(&[1, 2], &[100.0, 0.0]), &[0]).unwrap();
        assert!(l < 1e-40);
    }

    #[test]
    fn uniform_is_ln_k() {
        for k in 2..7 {
            let logits = Tensor::filled(&[3, k], 1.25).unwrap();
            let (l, _) = softmax_cross_entropy(&logits, &[0, k - 1, 1]).unwrap();
            assert!((l - (k as f64).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn bad_labels() {
        let logits = Tensor::zeros(&[2, 3]).unwrap();
        assert!(matches!(softmax_cross_entropy(&logits, &[0, 3]), Err(Error::InvalidArgument(_))));
        assert!(matches!(softmax_cross_entropy(&logits, &[0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn argmax_first_on_ties() {
        let logits = Tensor::from_shape(&[2, 3], &[1.0, 1.0, 0.0, -1.0, 0.0, 2.0]);
        assert_eq!(argmax_rows(&logits), vec![0, 2]);
    }
}
