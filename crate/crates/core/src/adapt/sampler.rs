//! Batch index generators: seeded shuffles and class-stratified batches.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::TaskKind;
use crate::seed;
use crate::stainsim::CenterDataset;

fn check_batch(n: usize, batch_size: usize) -> Result<()> {
    if batch_size < 2 {
        return Err(Error::config(format!("batch size {batch_size} is degenerate: batch statistics need at least 2 samples")));
    }
    if n < batch_size {
        return Err(Error::config(format!("batch size {batch_size} exceeds the {n} available samples")));
    }
    Ok(())
}

/// Endless stream of full batches; each pass over the data uses a fresh
/// seeded permutation and drops its remainder.
pub fn shuffled_stream(n: usize, batch_size: usize, seed: u64) -> Result<impl Iterator<Item = Vec<usize>>> {
    check_batch(n, batch_size)?;
    let per_pass = n / batch_size;
    Ok((0u64..).flat_map(move |pass| {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(seed::derive_indexed(seed, "shuffle-pass", pass), "shuffle"));
        (0..per_pass).map(|b| order[b * batch_size..(b + 1) * batch_size].to_vec()).collect::<Vec<_>>()
    }))
}

/// One seeded permutation cut into batches covering every index once. A
/// trailing batch of one sample joins the previous batch.
pub fn shuffled_partition(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    check_batch(n, batch_size)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, "shuffle-partition"));
    Ok(crate::nn::chunk_batches(&order, batch_size))
}

fn class_pools(labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut pools = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        pools.get_mut(l).ok_or_else(|| Error::config(format!("label {l} outside {classes} classes")))?.push(i);
    }
    Ok(pools)
}

/// Largest-remainder allocation of `batch_size` slots to classes in proportion to `counts`.
fn quotas(counts: &[usize], batch_size: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * batch_size as f64 / total as f64).collect();
    let mut q: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - q[a] as f64, exact[b] - q[b] as f64);
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    let missing = batch_size - q.iter().sum::<usize>();
    for &c in order.iter().take(missing) {
        q[c] += 1;
    }
    q
}

/// Endless stream of stratified batches: every batch holds each class's
/// proportional share (within one sample). Class pools are drawn in seeded
/// order and reshuffled when used up.
pub fn stratified_stream(
    labels: &[usize],
    classes: usize,
    batch_size: usize,
    seed: u64,
) -> Result<impl Iterator<Item = Vec<usize>>> {
    check_batch(labels.len(), batch_size)?;
    let present = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if batch_size < present {
        return Err(Error::config(format!("batch size {batch_size} is smaller than the {present} classes present")));
    }
    let pools = class_pools(labels, classes)?;
    let q = quotas(&pools.iter().map(Vec::len).collect::<Vec<_>>(), batch_size);
    let mut cursors = vec![0usize; classes];
    let mut passes = vec![0u64; classes];
    let mut current: Vec<Vec<usize>> = pools.clone();
    for (c, p) in current.iter_mut().enumerate() {
        p.shuffle(&mut seed::rng(seed::derive_indexed(seed, "stratum", c as u64), "pass-0"));
    }
    Ok(std::iter::repeat(()).map(move |_| {
        let mut batch = Vec::with_capacity(batch_size);
        for c in 0..classes {
            for _ in 0..q[c] {
                if cursors[c] == current[c].len() {
                    passes[c] += 1;
                    current[c] = pools[c].clone();
                    let key = seed::derive_indexed(seed::derive_indexed(seed, "stratum", c as u64), "pass", passes[c]);
                    current[c].shuffle(&mut seed::rng(key, "stratum-pass"));
                    cursors[c] = 0;
                }
                batch.push(current[c][cursors[c]]);
                cursors[c] += 1;
            }
        }
        batch
    }))
}

/// Stratified batches covering every index once. Samples are grouped by class
/// (each group in seeded order) and dealt round-robin, so every batch holds
/// `floor` or `ceil` of each class's proportional share.
pub fn stratified_partition(labels: &[usize], classes: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    check_batch(labels.len(), batch_size)?;
    let mut pools = class_pools(labels, classes)?;
    for (c, p) in pools.iter_mut().enumerate() {
        p.shuffle(&mut seed::rng(seed::derive_indexed(seed, "stratum", c as u64), "partition"));
    }
    let n = labels.len();
    let batches = n.div_ceil(batch_size).max(1);
    // avoid a batch of one when n is just above a multiple of batch_size
    let batches = if n / batches < 2 { batches - 1 } else { batches };
    let mut out = vec![Vec::with_capacity(batch_size + 1); batches];
    for (pos, idx) in pools.into_iter().flatten().enumerate() {
        out[pos % batches].push(idx);
    }
    Ok(out)
}

/// Batches that represent the data distribution: stratified by class for
/// classification, a plain seeded shuffle for dense prediction.
pub fn representative_batches(
    data: &CenterDataset,
    batch_size: usize,
    seed: u64,
) -> Result<Box<dyn Iterator<Item = Vec<usize>>>> {
    match (data.task(), data.labels()) {
        (TaskKind::Classification, Some(labels)) => {
            if batch_size < data.classes() {
                return Err(Error::config(format!("batch size {batch_size} is smaller than the class count {}", data.classes())));
            }
            Ok(Box::new(stratified_stream(labels, data.classes(), batch_size, seed)?))
        }
        _ => Ok(Box::new(shuffled_stream(data.len(), batch_size, seed)?)),
    }
}
