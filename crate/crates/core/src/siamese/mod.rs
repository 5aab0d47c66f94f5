//! Twin-tower similarity model.
//!
//! Both members of a pair pass through the *same* tower parameters; there is
//! only one parameter set per checkpoint. Embeddings are compared with a
//! Euclidean distance head mapped to `[0, 1]` by `exp(-d)`.

mod checkpoint;
mod train;

pub use checkpoint::{LineageEntry, ModelCheckpoint, TrainingStage};
pub use train::{refine, train_base, train_base_from, LossKind, TrainingConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to scores before taking logarithms.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        EmbeddingVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: format!("embedding of length {}", a.len()),
            got: format!("length {}", b.len()),
        });
    }
    Ok(())
}

pub fn euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// `exp(-‖a − b‖₂)`: 1 for identical embeddings, toward 0 as they separate.
pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    Ok((-euclidean(&a.values, &b.values)?).exp())
}

/// Binary cross-entropy of a similarity score against a 0/1 target.
pub fn pair_loss(score: f64, target: u8) -> f64 {
    let s = score.clamp(LOG_EPS, 1.0 - LOG_EPS);
    let t = target as f64;
    -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
}

/// Loss of the pair `(a, b)` and its gradient with respect to `a`; the
/// gradient with respect to `b` is the negation.
///
/// For cross-entropy the reported loss is the clamped [`pair_loss`], while
/// the gradient is taken through the unclamped score (with `1 - s` floored
/// at [`LOG_EPS`]), so saturated pairs still receive a push.
pub fn pair_loss_and_grad(a: &[f64], b: &[f64], target: u8, kind: LossKind) -> Result<(f64, Vec<f64>)> {
    let d = euclidean(a, b)?;
    let t = target as f64;
    let (loss, dl_dd) = match kind {
        LossKind::BinaryCrossEntropy => {
            let s = (-d).exp();
            let dl_dd = t - (1.0 - t) * s / (1.0 - s).max(LOG_EPS);
            (pair_loss(s, target), dl_dd)
        }
        LossKind::Contrastive { margin } => {
            let gap = (margin - d).max(0.0);
            (t * d * d + (1.0 - t) * gap * gap, 2.0 * t * d - 2.0 * (1.0 - t) * gap)
        }
    };
    let grad = if d > 0.0 {
        a.iter().zip(b).map(|(x, y)| dl_dd * (x - y) / d).collect()
    } else {
        vec![0.0; a.len()]
    };
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng as _;

    #[test]
    fn identity_and_half() {
        let a = EmbeddingVector::new(vec![0.3, -1.2, 4.0]);
        assert_eq!(similarity(&a, &a).unwrap(), 1.0);
        let b = EmbeddingVector::new(vec![0.3 + 2f64.ln(), -1.2, 4.0]);
        assert!((similarity(&a, &b).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn similarity_is_symmetric() {
        let mut rng = seed::rng(1);
        for _ in 0..100 {
            let a = EmbeddingVector::new((0..5).map(|_| rng.random_range(-3.0..3.0)).collect());
            let b = EmbeddingVector::new((0..5).map(|_| rng.random_range(-3.0..3.0)).collect());
            assert_eq!(similarity(&a, &b).unwrap(), similarity(&b, &a).unwrap());
        }
    }

    #[test]
    fn length_mismatch_is_a_shape_error() {
        let a = EmbeddingVector::new(vec![0.0; 3]);
        let b = EmbeddingVector::new(vec![0.0; 4]);
        assert!(matches!(similarity(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn loss_values() {
        assert!((pair_loss(0.5, 1) - 2f64.ln()).abs() < 1e-12);
        assert!((pair_loss(0.5, 0) - 2f64.ln()).abs() < 1e-12);
        assert!(pair_loss(1.0 - 1e-12, 1) < 1e-6);
        assert!(pair_loss(0.0, 1).is_finite());
        assert!(pair_loss(1.0, 0).is_finite());
    }

    #[test]
    fn contrastive_gradient_matches_differences() {
        let a = [0.2, 0.1];
        let b = [0.5, -0.3];
        let kind = LossKind::Contrastive { margin: 2.0 };
        for target in [0, 1] {
            let (_, g) = pair_loss_and_grad(&a, &b, target, kind).unwrap();
            for i in 0..2 {
                let h = 1e-6;
                let mut p = a;
                p[i] += h;
                let mut m = a;
                m[i] -= h;
                let num = (pair_loss_and_grad(&p, &b, target, kind).unwrap().0
                    - pair_loss_and_grad(&m, &b, target, kind).unwrap().0)
                    / (2.0 * h);
                assert!((num - g[i]).abs() < 1e-6);
            }
        }
    }
}
