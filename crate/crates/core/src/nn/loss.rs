//! Classification objectives on logits, with their logit gradients.

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probability floor shared by every log of a probability.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

impl Reduction {
    fn factor(self, batch: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / batch as f64,
        }
    }
}

/// Row-wise log-softmax.
pub fn log_softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let n = logits.row_len();
    let mut out = Vec::with_capacity(logits.data.len());
    for row in logits.data.chunks(n) {
        let mut mx = row[0];
        for &v in row {
            if v.re() > mx.re() {
                mx = v;
            }
        }
        let mut s = T::zero();
        for &v in row {
            s += (v - mx).exp();
        }
        let lse = mx + s.ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor { shape: vec![logits.batch(), n], data: out }
}

pub fn softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    log_softmax(logits).map(|v| v.exp())
}

/// `Σ_rows KL(softmax(logits_r) ‖ target_r)` (scaled by `reduction`) and its
/// gradient with respect to the logits. Targets are clamped at [`PROB_FLOOR`].
pub fn kl_to_targets<T: Real>(
    logits: &Tensor<T>,
    targets: &Tensor<f64>,
    reduction: Reduction,
) -> Result<(T, Tensor<T>)> {
    if logits.batch() != targets.batch() || logits.row_len() != targets.row_len() {
        return Err(Error::Input(format!(
            "logits {:?} and soft targets {:?} disagree in shape",
            logits.shape, targets.shape
        )));
    }
    let n = logits.row_len();
    let k = reduction.factor(logits.batch());
    let logp = log_softmax(logits);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(logits.data.len());
    for (lp, q) in logp.data.chunks(n).zip(targets.data.chunks(n)) {
        let a: Vec<T> = lp
            .iter()
            .zip(q)
            .map(|(&l, &qv)| l - T::from_f64(qv.max(PROB_FLOOR).ln()))
            .collect();
        let mut kl = T::zero();
        for (&l, &ai) in lp.iter().zip(&a) {
            kl += l.exp() * ai;
        }
        total += kl;
        for (&l, &ai) in lp.iter().zip(&a) {
            grad.push((l.exp() * (ai - kl)).scale(k));
        }
    }
    Ok((total.scale(k), Tensor { shape: logits.shape.clone(), data: grad }))
}

/// Cross-entropy against hard labels and its logit gradient.
pub fn ce_to_labels<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
    reduction: Reduction,
) -> Result<(T, Tensor<T>)> {
    let n = logits.row_len();
    if labels.len() != logits.batch() {
        return Err(Error::Input(format!(
            "{} labels for a batch of {}",
            labels.len(),
            logits.batch()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::Input(format!("label {bad} out of range for {n} classes")));
    }
    let k = reduction.factor(logits.batch());
    let logp = log_softmax(logits);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(logits.data.len());
    for (lp, &y) in logp.data.chunks(n).zip(labels) {
        total -= lp[y];
        for (j, &l) in lp.iter().enumerate() {
            let p = l.exp();
            grad.push(if j == y { (p - T::one()).scale(k) } else { p.scale(k) });
        }
    }
    Ok((total.scale(k), Tensor { shape: logits.shape.clone(), data: grad }))
}

/// Gradient with respect to logits given a gradient with respect to the
/// softmax probabilities.
pub fn softmax_backward(probs: &Tensor<f64>, grad_probs: &Tensor<f64>) -> Tensor<f64> {
    let n = probs.row_len();
    let mut out = Vec::with_capacity(probs.data.len());
    for (p, g) in probs.data.chunks(n).zip(grad_probs.data.chunks(n)) {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        out.extend(p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)));
    }
    Tensor { shape: probs.shape.clone(), data: out }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&Tensor<f64>) -> (f64, Tensor<f64>), x: Tensor<f64>) {
        let (_, g) = f(&x);
        let h = 1e-6;
        for k in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[k] += h;
            let mut xm = x.clone();
            xm.data[k] -= h;
            let fd = (f(&xp).0 - f(&xm).0) / (2.0 * h);
            assert!((fd - g.data[k]).abs() < 1e-7, "{k}: {fd} vs {}", g.data[k]);
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let t = Tensor::new(vec![2, 3], vec![0.2, 0.5, 0.3, 0.9, 0.05, 0.05]).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, -0.5]).unwrap();
        fd_check(|l| kl_to_targets(l, &t, Reduction::Sum).unwrap(), x.clone());
        fd_check(|l| kl_to_targets(l, &t, Reduction::Mean).unwrap(), x);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, -0.5]).unwrap();
        fd_check(|l| ce_to_labels(l, &[2, 0], Reduction::Mean).unwrap(), x);
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let x = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(ce_to_labels(&x, &[2], Reduction::Sum).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_for_large_logits() {
        let x = Tensor::new(vec![1, 3], vec![1000.0, -1000.0, 999.0]).unwrap();
        let p = softmax(&x);
        assert!((p.data.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.is_finite());
    }
}
