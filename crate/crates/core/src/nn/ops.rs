use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Numerically stable softmax; sums are accumulated in f64.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
    let exps: Vec<f64> = logits.iter().map(|v| (v.f64() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| T::of(e / total)).collect()
}

pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
    let lse = max + logits.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v.f64() - lse).collect()
}

/// Cross-entropy against a target distribution; returns the loss and its
/// gradient with respect to the logits (`softmax - target`).
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], target: &[f64]) -> (f64, Vec<T>) {
    debug_assert_eq!(logits.len(), target.len());
    let logp = log_softmax(logits);
    let loss = -logp
        .iter()
        .zip(target)
        .filter(|(_, &t)| t != 0.0)
        .map(|(lp, t)| t * lp)
        .sum::<f64>();
    let total: f64 = target.iter().sum();
    let grad = logp
        .iter()
        .zip(target)
        .map(|(lp, t)| T::of(lp.exp() * total - t))
        .collect();
    (loss, grad)
}

/// Cross-entropy for a single hard label.
pub fn cross_entropy_index<T: Scalar>(logits: &[T], class: usize) -> (f64, Vec<T>) {
    let logp = log_softmax(logits);
    let grad = logp
        .iter()
        .enumerate()
        .map(|(i, lp)| T::of(lp.exp() - if i == class { 1.0 } else { 0.0 }))
        .collect();
    (-logp[class], grad)
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// `sum((y - target)^2)` and its gradient.
pub fn squared_error<T: Scalar>(y: &Tensor<T>, target: &[f64]) -> (f64, Tensor<T>) {
    let mut loss = 0.0;
    let grad: Vec<T> = y
        .data()
        .iter()
        .zip(target)
        .map(|(&v, &t)| {
            let d = v.f64() - t;
            loss += d * d;
            T::of(2.0 * d)
        })
        .collect();
    (loss, Tensor::new(y.shape().to_vec(), grad).expect("same shape"))
}

/// Concatenate flat tensors end to end.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::Empty("concat of zero tensors".into()));
    }
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        if p.shape().len() != 1 {
            return Err(Error::shape("concat", "1-d inputs", p.shape()));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![data.len()], data)
}

/// Inverse of [`concat`]; also used to route gradients back to the parts.
pub fn split<T: Scalar>(t: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    if t.shape().len() != 1 || sizes.iter().sum::<usize>() != t.len() {
        return Err(Error::shape("split", format!("1-d tensor of {}", sizes.iter().sum::<usize>()), t.shape()));
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &n in sizes {
        out.push(Tensor::new(vec![n], t.data()[at..at + n].to_vec())?);
        at += n;
    }
    Ok(out)
}
