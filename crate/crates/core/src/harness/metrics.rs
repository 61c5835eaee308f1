use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean of per-class recalls over the classes present in `labels`.
pub fn balanced_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::config("balanced accuracy of an empty set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Dimension { op: "balanced_accuracy", lhs: vec![predictions.len()], rhs: vec![labels.len()] });
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        totals[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let (sum, present) =
        hits.iter().zip(&totals).filter(|(_, &t)| t > 0).fold((0.0, 0usize), |(s, n), (&h, &t)| (s + h as f64 / t as f64, n + 1));
    Ok(sum / present as f64)
}

/// `2|P.T| / (|P| + |T|)` of two binary masks; 1 when both are empty.
pub fn dice_score(prediction: &Tensor, truth: &Tensor) -> Result<f64> {
    prediction.expect_same_shape(truth, "dice_score")?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &t) in prediction.data().iter().zip(truth.data()) {
        let (p, t) = (p > 0.5, t > 0.5);
        inter += (p && t) as usize;
        total += p as usize + t as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Per-image dice of `probs >= threshold` against `masks`, averaged over the batch.
pub fn mean_dice(probs: &Tensor, masks: &Tensor, threshold: f32) -> Result<f64> {
    probs.expect_same_shape(masks, "mean_dice")?;
    let n = probs.batch();
    let mut sum = 0.0;
    for i in 0..n {
        let shape = vec![probs.sample_len()];
        let p = Tensor::new(shape.clone(), probs.sample(i).iter().map(|&v| (v >= threshold) as u8 as f32).collect())?;
        let t = Tensor::new(shape, masks.sample(i).to_vec())?;
        sum += dice_score(&p, &t)?;
    }
    Ok(sum / n as f64)
}

/// Index of the largest entry of each row of `[N, K]` scores (first on ties).
pub fn argmax_rows(scores: &Tensor) -> Result<Vec<usize>> {
    let [_, k] = scores.dims2("argmax_rows")?;
    Ok(scores
        .data()
        .chunks(k)
        .map(|row| row.iter().enumerate().fold((0, f32::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best }).0)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&[0, 1, 1], &[0, 1, 1]).unwrap(), 1.0);
        // class 0 recall 1.0, class 1 recall 0.5
        assert_eq!(balanced_accuracy(&[0, 0, 1, 0], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(balanced_accuracy(&[1, 1, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(balanced_accuracy(&[], &[]).is_err());
        // absent classes do not count
        assert_eq!(balanced_accuracy(&[2, 2], &[2, 2]).unwrap(), 1.0);
    }

    #[test]
    fn dice_examples() {
        let mask = |on: std::ops::Range<usize>| Tensor::from_fn(vec![20], |i| on.contains(&i) as u8 as f32);
        assert_eq!(dice_score(&mask(0..10), &mask(0..10)).unwrap(), 1.0);
        assert_eq!(dice_score(&mask(0..10), &mask(10..20)).unwrap(), 0.0);
        assert_eq!(dice_score(&mask(0..10), &mask(5..15)).unwrap(), 0.5);
        assert_eq!(dice_score(&mask(0..0), &mask(0..0)).unwrap(), 1.0);
        assert!(dice_score(&mask(0..1), &Tensor::zeros(vec![3])).is_err());
    }

    #[test]
    fn argmax_takes_first_maximum() {
        let s = Tensor::new(vec![2, 3], vec![0.1, 0.5, 0.5, 2.0, 1.0, 0.0]).unwrap();
        assert_eq!(argmax_rows(&s).unwrap(), vec![1, 0]);
    }
}
