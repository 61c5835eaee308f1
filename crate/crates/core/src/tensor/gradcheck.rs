//! Central finite differences against the reverse-mode tape.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::seed;

/// Perturbation used by [`finite_difference`].
pub const FD_STEP: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub op: String,
    /// `‖numeric − analytic‖ / max(‖numeric‖, ‖analytic‖)` over every parameter entry.
    pub relative_error: f64,
    /// Norm of the numeric gradient; near zero means the check says nothing.
    pub numeric_norm: f64,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, so ReLU kinks are never crossed.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m: f32 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced well beyond the step, so max-pool winners never change.
fn spaced(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - n as f32 * 0.025).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v)
}

/// Compares the tape gradient of `sum(w ⊙ build(params))` with central
/// differences, for a fixed random weighting `w`.
pub fn finite_difference<F>(op: &str, params: &[Tensor], build: F, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut probe = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| probe.param(p.clone())).collect();
    let out = build(&mut probe, &ids)?;
    let mut rng = seed::rng(seed, "gradcheck-weights");
    let w = random(probe.value(out).shape(), &mut rng, -1.0, 1.0);

    let run = |ps: &[Tensor], grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = build(&mut g, &ids)?;
        let wid = g.constant(w.clone());
        let prod = g.mul(out, wid)?;
        let loss = g.sum(prod);
        let value = g.value(loss).data()[0] as f64;
        if !grads {
            return Ok((value, Vec::new()));
        }
        let gr = g.backward(loss)?;
        let list = ids
            .iter()
            .map(|&i| gr.get(i).cloned().ok_or_else(|| Error::contract(format!("{op}: no gradient reached a parameter"))))
            .collect::<Result<Vec<_>>>()?;
        Ok((value, list))
    };
    let (_, analytic) = run(params, true)?;
    let (mut num_sq, mut diff_sq, mut ana_sq) = (0.0, 0.0, 0.0);
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.len() {
            let bumped = |d: f32| -> Result<Vec<Tensor>> {
                let mut ps = params.to_vec();
                let mut v = ps[pi].data().to_vec();
                v[j] += d;
                ps[pi] = Tensor::new(ps[pi].shape().to_vec(), v)?;
                Ok(ps)
            };
            let plus = run(&bumped(FD_STEP as f32)?, false)?.0;
            let minus = run(&bumped(-FD_STEP as f32)?, false)?.0;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[pi].data()[j] as f64;
            num_sq += numeric * numeric;
            ana_sq += a * a;
            diff_sq += (numeric - a).powi(2);
        }
    }
    Ok(GradCheck {
        op: op.to_string(),
        relative_error: diff_sq.sqrt() / num_sq.sqrt().max(ana_sq.sqrt()).max(1e-12),
        numeric_norm: num_sq.sqrt(),
    })
}

/// Runs [`finite_difference`] on every differentiable op of the tape.
pub fn check_all_ops(seed: u64) -> Result<Vec<GradCheck>> {
    let mut r = seed::rng(seed, "gradcheck-inputs");
    let mut out = Vec::new();
    let mut check = |op: &str, params: Vec<Tensor>, build: &dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>| -> Result<()> {
        out.push(finite_difference(op, &params, build, seed)?);
        Ok(())
    };

    check("matmul", vec![random(&[3, 4], &mut r, -1.0, 1.0), random(&[4, 2], &mut r, -1.0, 1.0)], &|g, p| g.matmul(p[0], p[1]))?;
    check("add_bias", vec![random(&[2, 3, 2, 2], &mut r, -1.0, 1.0), random(&[3], &mut r, -1.0, 1.0)], &|g, p| {
        g.add_bias(p[0], p[1])
    })?;
    let a = random(&[2, 5], &mut r, -1.0, 1.0);
    let b = random(&[2, 5], &mut r, -1.0, 1.0);
    check("add", vec![a.clone(), b.clone()], &|g, p| g.add(p[0], p[1]))?;
    check("mul", vec![a.clone(), b], &|g, p| g.mul(p[0], p[1]))?;
    check("sigmoid", vec![random(&[2, 5], &mut r, -3.0, 3.0)], &|g, p| Ok(g.sigmoid(p[0])))?;
    check("relu", vec![off_zero(&[2, 5], &mut r)], &|g, p| Ok(g.relu(p[0])))?;
    check("reshape", vec![a], &|g, p| g.reshape(p[0], vec![5, 2]))?;
    for (stride, pad) in [(1, 1), (2, 0), (1, 0)] {
        check(
            &format!("conv2d(stride={stride},pad={pad})"),
            vec![random(&[2, 2, 5, 5], &mut r, -1.0, 1.0), random(&[3, 2, 3, 3], &mut r, -0.5, 0.5)],
            &move |g, p| g.conv2d(p[0], p[1], stride, pad),
        )?;
    }
    check("max_pool2d", vec![spaced(&[2, 2, 4, 4], &mut r)?], &|g, p| g.max_pool2d(p[0]))?;
    check("global_avg_pool", vec![random(&[2, 3, 3, 3], &mut r, -1.0, 1.0)], &|g, p| g.global_avg_pool(p[0]))?;
    check("upsample_bilinear", vec![random(&[1, 2, 3, 3], &mut r, -1.0, 1.0)], &|g, p| g.upsample_bilinear(p[0], 2))?;
    check(
        "batch_norm",
        vec![random(&[4, 3, 2, 2], &mut r, -1.0, 1.0), random(&[3], &mut r, 0.5, 1.5), random(&[3], &mut r, -0.5, 0.5)],
        &|g, p| Ok(g.batch_norm(p[0], p[1], p[2], 1e-5)?.0),
    )?;
    check("softmax_cross_entropy", vec![random(&[4, 3], &mut r, -2.0, 2.0)], &|g, p| {
        g.softmax_cross_entropy(p[0], &[0, 2, 1, 2])
    })?;
    let mask = Tensor::from_fn(vec![2, 1, 3, 3], |i| ((i * 5) % 3 == 0) as u8 as f32);
    check("bce_with_logits", vec![random(&[2, 1, 3, 3], &mut r, -2.0, 2.0)], &|g, p| g.bce_with_logits(p[0], &mask))?;
    check("dice_loss", vec![random(&[2, 1, 3, 3], &mut r, -2.0, 2.0)], &|g, p| {
        let s = g.sigmoid(p[0]);
        g.dice_loss(s, &mask)
    })?;
    Ok(out)
}
