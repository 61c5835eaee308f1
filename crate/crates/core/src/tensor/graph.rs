//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended after their inputs, so the node index order is a
//! topological order and the backward sweep is a single reverse pass.

use super::ops::{
    channel_layout, channel_moments_f64, conv2d, conv2d_backward, gemm, global_avg_pool, global_avg_pool_backward, matmul,
    max_pool2d, max_pool2d_backward, upsample_bilinear, upsample_bilinear_backward, ChannelMoments,
};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Conv2d { x: NodeId, k: NodeId, stride: usize, pad: usize },
    AddBias { x: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sum(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    MaxPool { x: NodeId, argmax: Vec<u32> },
    GlobalAvgPool(NodeId),
    Upsample { x: NodeId, factor: usize },
    Reshape(NodeId),
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor, inv_std: Vec<f64> },
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
    BceWithLogits { logits: NodeId, target: Tensor },
    Dice { probs: NodeId, mask: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn scalar(v: f64) -> Tensor {
    Tensor::vector(vec![v as f32])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf: gradients are reported for it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let v = conv2d(self.value(x), self.value(k), stride, pad)?;
        Ok(self.push(v, Op::Conv2d { x, k, stride, pad }, &[x, k]))
    }

    /// Adds a per-channel bias `[C]` to `[N, C]` or `[N, C, H, W]`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(b);
        let (_, c, plane) = channel_layout(xv, "add_bias")?;
        if bv.shape() != [c] {
            return Err(Error::Dimension { op: "add_bias", lhs: xv.shape().to_vec(), rhs: bv.shape().to_vec() });
        }
        let mut out = xv.clone();
        let bd = bv.data().to_vec();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bd[(i / plane) % c];
        }
        Ok(self.push(out, Op::AddBias { x, b }, &[x, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = super::relu(self.value(x));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = super::sigmoid(self.value(x));
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn max_pool2d(&mut self, x: NodeId) -> Result<NodeId> {
        let (v, argmax) = max_pool2d(self.value(x))?;
        Ok(self.push(v, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = global_avg_pool(self.value(x))?;
        Ok(self.push(v, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn upsample_bilinear(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let v = upsample_bilinear(self.value(x), factor)?;
        Ok(self.push(v, Op::Upsample { x, factor }, &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Training-mode batch normalization with this batch's statistics.
    ///
    /// Returns the output node and the batch moments used, so the caller can
    /// update running averages.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<(NodeId, ChannelMoments)> {
        let xv = self.value(x);
        let moments = channel_moments_f64(xv)?;
        let (_, c, plane) = channel_layout(xv, "batch_norm")?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(Error::Dimension { op: "batch_norm", lhs: xv.shape().to_vec(), rhs: self.value(p).shape().to_vec() });
            }
        }
        let inv_std: Vec<f64> = moments.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut xhat = xv.clone();
        let mut out = xv.clone();
        for (i, (h, o)) in xhat.data_mut().iter_mut().zip(out.data_mut().iter_mut()).enumerate() {
            let ci = (i / plane) % c;
            let nrm = (*h as f64 - moments.mean[ci]) * inv_std[ci];
            *h = nrm as f32;
            *o = (g[ci] as f64 * nrm + b[ci] as f64) as f32;
        }
        let id = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]);
        Ok((id, moments))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class ids.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let [n, k] = lv.dims2("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::Dimension { op: "softmax_cross_entropy", lhs: lv.shape().to_vec(), rhs: vec![labels.len()] });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0f64; n * k];
        let mut loss = 0.0f64;
        for (i, row) in lv.data().chunks(k).enumerate() {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let log_z = z.ln() + max;
            for (j, &v) in row.iter().enumerate() {
                probs[i * k + j] = (v as f64 - log_z).exp();
            }
            loss -= row[labels[i]] as f64 - log_z;
        }
        let v = scalar(loss / n as f64);
        Ok(self.push(v, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Mean binary cross-entropy of logits against a constant `{0,1}` target.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: &Tensor) -> Result<NodeId> {
        let lv = self.value(logits);
        lv.expect_same_shape(target, "bce_with_logits")?;
        let mut loss = 0.0f64;
        for (&z, &t) in lv.data().iter().zip(target.data()) {
            let z = z as f64;
            loss += z.max(0.0) - z * t as f64 + (-z.abs()).exp().ln_1p();
        }
        let v = scalar(loss / lv.len() as f64);
        Ok(self.push(v, Op::BceWithLogits { logits, target: target.clone() }, &[logits]))
    }

    /// Soft dice loss `1 - 2|P.T| / (|P| + |T|)` over the whole batch.
    pub fn dice_loss(&mut self, probs: NodeId, mask: &Tensor) -> Result<NodeId> {
        let pv = self.value(probs);
        pv.expect_same_shape(mask, "dice_loss")?;
        if pv.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::contract("dice_loss probabilities must lie in [0,1]"));
        }
        let v = scalar(1.0 - dice_terms(pv, mask).0);
        Ok(self.push(v, Op::Dice { probs, mask: mask.clone() }, &[probs]))
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (input, dg) in self.local_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(dg.data()) {
                            *a += d;
                        }
                    }
                    slot => *slot = Some(dg),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let [m, k] = av.dims2("matmul")?;
                let n = bv.shape()[1];
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, bv.data(), true, 0.0, &mut da);
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, av.data(), true, g.data(), false, 0.0, &mut db);
                vec![(*a, Tensor::new(vec![m, k], da)?), (*b, Tensor::new(vec![k, n], db)?)]
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (dx, dk) = conv2d_backward(val(*x), val(*k), g, *stride, *pad)?;
                vec![(*x, dx), (*k, dk)]
            }
            Op::AddBias { x, b } => {
                let (_, c, plane) = channel_layout(g, "add_bias")?;
                let mut db = vec![0.0f64; c];
                for (i, &v) in g.data().iter().enumerate() {
                    db[(i / plane) % c] += v as f64;
                }
                vec![(*x, g.clone()), (*b, Tensor::vector(db.into_iter().map(|v| v as f32).collect()))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![(*a, g.zip_map(val(*b), |p, q| p * q)?), (*b, g.zip_map(val(*a), |p, q| p * q)?)],
            Op::Sum(x) => {
                let gv = g.data()[0];
                vec![(*x, Tensor::full(val(*x).shape().to_vec(), gv))]
            }
            Op::Relu(x) => vec![(*x, g.zip_map(val(*x), |d, v| if v > 0.0 { d } else { 0.0 })?)],
            Op::Sigmoid(x) => vec![(*x, g.zip_map(&node.value, |d, s| d * s * (1.0 - s))?)],
            Op::MaxPool { x, argmax } => {
                vec![(*x, max_pool2d_backward(val(*x).shape(), argmax, g))]
            }
            Op::GlobalAvgPool(x) => vec![(*x, global_avg_pool_backward(val(*x).shape(), g))],
            Op::Upsample { x, factor } => {
                vec![(*x, upsample_bilinear_backward(val(*x).shape(), *factor, g))]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape().to_vec())?)],
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (_, c, plane) = channel_layout(g, "batch_norm")?;
                let count = (g.len() / c) as f64;
                let gam = val(*gamma).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for (i, (&d, &h)) in g.data().iter().zip(xhat.data()).enumerate() {
                    let ci = (i / plane) % c;
                    dgamma[ci] += d as f64 * h as f64;
                    dbeta[ci] += d as f64;
                }
                let mut dx = g.clone();
                for (i, (v, &h)) in dx.data_mut().iter_mut().zip(xhat.data()).enumerate() {
                    let ci = (i / plane) % c;
                    let gi = gam[ci] as f64;
                    // dxhat = d * gamma; sums of dxhat and dxhat*xhat are gamma*dbeta, gamma*dgamma
                    let dxhat = *v as f64 * gi;
                    let t = count * dxhat - gi * dbeta[ci] - h as f64 * gi * dgamma[ci];
                    *v = (inv_std[ci] / count * t) as f32;
                }
                vec![
                    (*x, dx),
                    (*gamma, Tensor::vector(dgamma.into_iter().map(|v| v as f32).collect())),
                    (*beta, Tensor::vector(dbeta.into_iter().map(|v| v as f32).collect())),
                ]
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let lv = val(*logits);
                let [n, k] = lv.dims2("softmax_cross_entropy")?;
                let scale = g.data()[0] as f64 / n as f64;
                let mut d: Vec<f32> = probs.iter().map(|&p| (p * scale) as f32).collect();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] -= scale as f32;
                }
                vec![(*logits, Tensor::new(vec![n, k], d)?)]
            }
            Op::BceWithLogits { logits, target } => {
                let lv = val(*logits);
                let scale = g.data()[0] as f64 / lv.len() as f64;
                let d = lv.zip_map(target, |z, t| {
                    let s = 1.0 / (1.0 + (-(z as f64)).exp());
                    ((s - t as f64) * scale) as f32
                })?;
                vec![(*logits, d)]
            }
            Op::Dice { probs, mask } => {
                let pv = val(*probs);
                let (_, inter, denom) = dice_terms(pv, mask);
                let gv = g.data()[0] as f64;
                let d = if denom == 0.0 {
                    Tensor::zeros(pv.shape().to_vec())
                } else {
                    mask.map(|m| (-gv * (2.0 * m as f64 * denom - 2.0 * inter) / (denom * denom)) as f32)
                };
                vec![(*probs, d)]
            }
        };
        Ok(out)
    }
}

/// `(dice, intersection, |P| + |T|)`, with dice 1 when both are empty.
fn dice_terms(p: &Tensor, t: &Tensor) -> (f64, f64, f64) {
    let mut inter = 0.0f64;
    let mut denom = 0.0f64;
    for (&a, &b) in p.data().iter().zip(t.data()) {
        inter += a as f64 * b as f64;
        denom += a as f64 + b as f64;
    }
    let dice = if denom == 0.0 { 1.0 } else { 2.0 * inter / denom };
    (dice, inter, denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut g = Graph::new();
        let w = g.param(Tensor::from_fn(vec![2, 3], |i| i as f32));
        let l = g.sum(w);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(w).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![3.0]));
        let sq = g.mul(w, w).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![2.0]));
        let c = g.constant(Tensor::vector(vec![5.0]));
        let p = g.mul(w, c).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[5.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut g = Graph::new();
        let z = g.param(Tensor::zeros(vec![4, 5]));
        let l = g.softmax_cross_entropy(z, &[0, 1, 2, 4]).unwrap();
        assert!((g.value(l).data()[0] as f64 - 5f64.ln()).abs() < 1e-6);
        assert!(g.softmax_cross_entropy(z, &[0, 1, 2, 5]).is_err());
    }

    #[test]
    fn dice_loss_examples() {
        let mut g = Graph::new();
        let mask = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let p = g.param(mask.clone());
        let l = g.dice_loss(p, &mask).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);

        let ones = Tensor::ones(vec![1, 1, 2, 2]);
        let half = g.param(Tensor::full(vec![1, 1, 2, 2], 0.5));
        let l = g.dice_loss(half, &ones).unwrap();
        assert!((g.value(l).data()[0] as f64 - 1.0 / 3.0).abs() < 1e-6);

        let bad = g.param(Tensor::full(vec![1, 1, 2, 2], 1.5));
        assert!(g.dice_loss(bad, &ones).is_err());
    }

    #[test]
    fn parameter_used_twice_accumulates() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![1.5, -2.0]));
        let a = g.add(w, w).unwrap();
        let b = g.add(a, w).unwrap();
        let l = g.sum(b);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 3.0]);
    }
}
