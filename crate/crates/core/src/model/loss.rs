use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Batch loss. Each component is averaged over the examples that carry it;
/// a component no example carries is zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mlm: f64,
    pub l_rel: f64,
    pub l_occur: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn new(l_mlm: f64, l_rel: f64, l_occur: f64) -> Self {
        LossBreakdown {
            l_mlm,
            l_rel,
            l_occur,
            l_total: l_mlm + l_rel + l_occur,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_mlm.is_finite() && self.l_rel.is_finite() && self.l_occur.is_finite() && self.l_total.is_finite()
    }
}

/// Per-example terms: mean masked-LM negative log-likelihood over the masked
/// positions, summed relation negative log-likelihood, and the co-occurrence
/// negative log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InstanceLoss {
    pub mlm: Option<f64>,
    pub rel: Option<f64>,
    pub occur: Option<f64>,
}

/// Averages per-example terms into a breakdown.
pub fn combine(parts: &[InstanceLoss]) -> LossBreakdown {
    fn mean(it: impl Iterator<Item = Option<f64>>) -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for v in it.flatten() {
            sum += v;
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
    LossBreakdown::new(
        mean(parts.iter().map(|p| p.mlm)),
        mean(parts.iter().map(|p| p.rel)),
        mean(parts.iter().map(|p| p.occur)),
    )
}

/// Negative log-likelihood of `target` under `softmax(logits)`, in f64.
pub fn cross_entropy<F: Scalar>(logits: &[F], target: usize) -> f64 {
    let max = logits.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|x| (x.as_f64() - max).exp()).sum();
    max + sum.ln() - logits[target].as_f64()
}

/// `scale * (softmax(logits) - onehot(target))`
pub fn cross_entropy_grad<F: Scalar>(logits: &[F], target: usize, scale: F) -> Vec<F> {
    let mut p = logits.to_vec();
    super::tensor::softmax_in_place(&mut p);
    p[target] -= F::one();
    for x in &mut p {
        *x *= scale;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        for n in [2usize, 14, 1000] {
            let z = vec![0.0f64; n];
            assert!((cross_entropy(&z, n - 1) - (n as f64).ln()).abs() < 1e-12);
            let z32 = vec![3.5f32; n];
            assert!((cross_entropy(&z32, 0) - (n as f64).ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_at_zero_logits_is_softmax_minus_onehot() {
        let g = cross_entropy_grad(&[0.0f64; 4], 2, 1.0);
        assert_eq!(g, vec![0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn combine_skips_absent_terms() {
        let parts = [
            InstanceLoss {
                mlm: Some(1.0),
                rel: None,
                occur: Some(0.5),
            },
            InstanceLoss {
                mlm: Some(3.0),
                rel: None,
                occur: None,
            },
        ];
        let b = combine(&parts);
        assert_eq!((b.l_mlm, b.l_rel, b.l_occur), (2.0, 0.0, 0.5));
        assert_eq!(b.l_total, 2.5);
        assert_eq!(combine(&[]), LossBreakdown::default());
    }
}
