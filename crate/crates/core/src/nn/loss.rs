//! Scalar loss values outside of a training graph.

use crate::error::Result;
use crate::tensor::{Graph, Tensor};

/// Mean softmax cross-entropy of `[N, K]` logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.softmax_cross_entropy(l, labels)?;
    Ok(g.value(loss).data()[0] as f64)
}

/// `1 - dice` of soft predictions against a binary mask.
pub fn dice_loss(probs: &Tensor, mask: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let loss = g.dice_loss(p, mask)?;
    Ok(g.value(loss).data()[0] as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        let k = 5;
        let ce = softmax_cross_entropy(&Tensor::zeros(vec![3, k]), &[0, 4, 2]).unwrap();
        assert!((ce - (k as f64).ln()).abs() < 1e-6);
        let m = Tensor::ones(vec![1, 1, 2, 2]);
        assert!(dice_loss(&m, &m).unwrap().abs() < 1e-7);
        let half = Tensor::full(vec![1, 1, 2, 2], 0.5);
        assert!((dice_loss(&half, &m).unwrap() - 1.0 / 3.0).abs() < 1e-6);
        assert!(softmax_cross_entropy(&Tensor::zeros(vec![1, 2]), &[2]).is_err());
    }
}
