use super::graph::huber_elem;
use crate::error::{LblmError, Result};

/// Mean Huber loss between `x` and `xhat`.
///
/// Quadratic for residuals up to `delta`, linear beyond, continuous with a
/// continuous first derivative at the boundary.
pub fn huber_loss(x: &[f64], xhat: &[f64], delta: f64) -> Result<f64> {
    if x.len() != xhat.len() {
        return Err(LblmError::shape(format!(
            "huber_loss operands have lengths {} and {}",
            x.len(),
            xhat.len()
        )));
    }
    if !(delta > 0.0) {
        return Err(LblmError::config(format!("huber delta must be positive, got {delta}")));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = x.iter().zip(xhat).map(|(a, b)| huber_elem(a - b, delta)).sum();
    Ok(sum / x.len() as f64)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-ln p[label]`. Probabilities are clamped away from zero.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or(LblmError::Label {
        label,
        classes: probs.len(),
    })?;
    Ok(-p.max(f64::MIN_POSITIVE).ln())
}

/// Cross-entropy computed from logits via log-sum-exp.
pub fn cross_entropy_logits(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(LblmError::Label {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huber_branches() {
        assert_eq!(huber_loss(&[0.5], &[0.0], 1.0).unwrap(), 0.125);
        assert_eq!(huber_loss(&[3.0], &[0.0], 1.0).unwrap(), 2.5);
        assert_eq!(huber_loss(&[1.0, -2.0, 7.5], &[1.0, -2.0, 7.5], 0.3).unwrap(), 0.0);
    }

    #[test]
    fn huber_rejects_mismatch() {
        assert!(matches!(huber_loss(&[1.0], &[1.0, 2.0], 1.0), Err(LblmError::Shape(_))));
    }

    #[test]
    fn cross_entropy_uniform() {
        let p6 = vec![1.0 / 6.0; 6];
        assert!((cross_entropy(&p6, 2).unwrap() - 6f64.ln()).abs() < 1e-9);
        let p24 = vec![1.0 / 24.0; 24];
        assert!((cross_entropy(&p24, 23).unwrap() - 24f64.ln()).abs() < 1e-9);
        assert!((cross_entropy_logits(&[0.0; 24], 5).unwrap() - 24f64.ln()).abs() < 1e-9);
        assert!(cross_entropy(&p6, 6).is_err());
    }

    #[test]
    fn cross_entropy_confident() {
        let l = cross_entropy_logits(&[40.0, 0.0, 0.0], 0).unwrap();
        assert!(l < 1e-15);
    }
}
