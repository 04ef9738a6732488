//! Plain-number helpers over discrete distributions.

use thiserror::Error;

const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum DistError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("support mismatch: {0} vs {1}")]
    SupportMismatch(usize, usize),
    #[error("q is zero at index {0} where p is positive")]
    ZeroInQ(usize),
}

pub fn validate(p: &[f64]) -> Result<(), DistError> {
    if p.is_empty() {
        return Err(DistError::InvalidDistribution("empty".into()));
    }
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(DistError::InvalidDistribution(format!("entry {v}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOLERANCE {
        return Err(DistError::InvalidDistribution(format!("sums to {s}")));
    }
    Ok(())
}

pub fn uniform(classes: usize) -> Vec<f64> {
    vec![1.0 / classes as f64; classes]
}

/// `-ln probs[target]`.
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64, DistError> {
    validate(probs)?;
    if target >= probs.len() {
        return Err(DistError::TargetOutOfRange { target, classes: probs.len() });
    }
    Ok(-probs[target].ln())
}

/// `H(p, q) = -sum p ln q`.
pub fn cross_entropy_soft(p: &[f64], q: &[f64]) -> Result<f64, DistError> {
    validate(p)?;
    validate(q)?;
    if p.len() != q.len() {
        return Err(DistError::SupportMismatch(p.len(), q.len()));
    }
    let mut h = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi == 0.0 {
                return Err(DistError::ZeroInQ(i));
            }
            h -= pi * qi.ln();
        }
    }
    Ok(h)
}

/// `KL(p || q) = sum p ln(p / q)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, DistError> {
    validate(p)?;
    validate(q)?;
    if p.len() != q.len() {
        return Err(DistError::SupportMismatch(p.len(), q.len()));
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi == 0.0 {
                return Err(DistError::ZeroInQ(i));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl)
}

pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    super::graph::softmax_in_place(&mut out);
    out
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    super::graph::log_softmax_in_place(&mut out);
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
