use crate::error::{Error, Result};
use crate::nn::augment::{dihedral, dihedral_inverse, DIHEDRAL_VIEWS};
use crate::tensor::Tensor;

/// Averages `predict` over the first `views` dihedral views of `images`
/// (`[N, C, S, S]`). Class probabilities `[N, K]` are averaged directly; mask
/// probabilities `[N, 1, S, S]` are mapped back to the original orientation first.
pub fn test_time_augment<F>(mut predict: F, images: &Tensor, views: usize) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    if views == 0 || views > DIHEDRAL_VIEWS {
        return Err(Error::config(format!("views must lie in 1..={DIHEDRAL_VIEWS}, got {views}")));
    }
    let [n, c, h, w] = images.dims4("test_time_augment")?;
    if h != w {
        return Err(Error::Shape { shape: images.shape().to_vec(), reason: "dihedral views need square images".into() });
    }
    let mut sum: Option<Vec<f64>> = None;
    let mut shape = Vec::new();
    for k in 0..views {
        let data: Vec<f32> = (0..n).flat_map(|i| dihedral(images.sample(i), c, h, k)).collect();
        let probs = predict(&Tensor::new(images.shape().to_vec(), data)?)?;
        let restored: Vec<f32> = match *probs.shape() {
            [_, _] => probs.data().to_vec(),
            [_, pc, ph, pw] if ph == pw => (0..n).flat_map(|i| dihedral_inverse(probs.sample(i), pc, ph, k)).collect(),
            _ => {
                return Err(Error::Shape {
                    shape: probs.shape().to_vec(),
                    reason: "predictions must be [N, K] or square [N, C, S, S]".into(),
                })
            }
        };
        shape = probs.shape().to_vec();
        let acc = sum.get_or_insert_with(|| vec![0.0; restored.len()]);
        if acc.len() != restored.len() {
            return Err(Error::contract("prediction shape changed between views"));
        }
        for (a, &v) in acc.iter_mut().zip(&restored) {
            *a += v as f64;
        }
    }
    let acc = sum.expect("views >= 1");
    Tensor::new(shape, acc.into_iter().map(|v| (v / views as f64) as f32).collect())
}
