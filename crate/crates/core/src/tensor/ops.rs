use super::Tensor;
use crate::error::{Error, Result};

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `[m, k]` and `op(b)` is `[k, n]`.
///
/// A transposed operand is stored in its untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, beta: f32, c: &mut [f32]) {
    assert_eq!(a.len(), m * k, "gemm lhs length");
    assert_eq!(b.len(), k * n, "gemm rhs length");
    assert_eq!(c.len(), m * n, "gemm output length");
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above bound every index sgemm touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.dims2("matmul")?;
    let [k2, n] = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::Dimension { op: "matmul", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
    Tensor::new(vec![m, n], out)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let [n, c, h, w] = input.dims4("conv2d")?;
        let [f, kc, kh, kw] = kernel.dims4("conv2d")?;
        if kc != c {
            return Err(Error::Dimension { op: "conv2d", lhs: input.shape().to_vec(), rhs: kernel.shape().to_vec() });
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be >= 1"));
        }
        let out_extent = |len: usize, k: usize| -> Result<usize> {
            let padded = len + 2 * pad;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(Error::config(format!("conv2d output extent ({len} + 2*{pad} - {k})/{stride} + 1 is not integral")));
            }
            Ok((padded - k) / stride + 1)
        };
        let ho = out_extent(h, kh)?;
        let wo = out_extent(w, kw)?;
        Ok(ConvGeom { n, c, h, w, f, kh, kw, stride, pad, ho, wo })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Column matrix `[C*KH*KW, N*HO*WO]`.
    fn im2col(&self, x: &[f32]) -> Vec<f32> {
        let cols = self.cols();
        let plane = self.ho * self.wo;
        let mut col = vec![0.0; self.rows() * cols];
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for ni in 0..self.n {
                        let src = &x[(ni * self.c + ci) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let srow = &src[iy as usize * self.w..][..self.w];
                            let drow = &mut dst[ni * plane + oy * self.wo..][..self.wo];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    *d = srow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f32]) -> Vec<f32> {
        let cols = self.cols();
        let plane = self.ho * self.wo;
        let mut x = vec![0.0; self.n * self.c * self.h * self.w];
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for ni in 0..self.n {
                        let dst = &mut x[(ni * self.c + ci) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let srow = &src[ni * plane + oy * self.wo..][..self.wo];
                            for (ox, &g) in srow.iter().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    dst[iy as usize * self.w + ix as usize] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// `[F, N*P]` <-> `[N, F, P]`
fn fnp_to_nfp(src: &[f32], f: usize, n: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    for fi in 0..f {
        for ni in 0..n {
            out[(ni * f + fi) * p..][..p].copy_from_slice(&src[(fi * n + ni) * p..][..p]);
        }
    }
    out
}

fn nfp_to_fnp(src: &[f32], f: usize, n: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    for ni in 0..n {
        for fi in 0..f {
            out[(fi * n + ni) * p..][..p].copy_from_slice(&src[(ni * f + fi) * p..][..p]);
        }
    }
    out
}

/// Cross-correlation of an `[N, C, H, W]` input with an `[F, C, KH, KW]` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernel, stride, padding)?;
    let col = g.im2col(input.data());
    let mut out = vec![0.0; g.f * g.cols()];
    gemm(g.f, g.rows(), g.cols(), kernel.data(), false, &col, false, 0.0, &mut out);
    let out = fnp_to_nfp(&out, g.f, g.n, g.ho * g.wo);
    Tensor::new(vec![g.n, g.f, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeom::new(input, kernel, stride, padding)?;
    if grad_out.shape() != [g.n, g.f, g.ho, g.wo] {
        return Err(Error::Dimension { op: "conv2d_backward", lhs: vec![g.n, g.f, g.ho, g.wo], rhs: grad_out.shape().to_vec() });
    }
    let gt = nfp_to_fnp(grad_out.data(), g.f, g.n, g.ho * g.wo);
    let col = g.im2col(input.data());
    let mut dk = vec![0.0; g.f * g.rows()];
    gemm(g.f, g.cols(), g.rows(), &gt, false, &col, true, 0.0, &mut dk);
    let mut dcol = vec![0.0; g.rows() * g.cols()];
    gemm(g.rows(), g.f, g.cols(), kernel.data(), true, &gt, false, 0.0, &mut dcol);
    let dx = g.col2im(&dcol);
    Ok((Tensor::new(input.shape().to_vec(), dx)?, Tensor::new(kernel.shape().to_vec(), dk)?))
}

/// `(batch, channels, plane)` for `[N, C, H, W]` (plane `H*W`) or `[N, C]` (plane 1).
pub(crate) fn channel_layout(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::Dimension { op, lhs: x.shape().to_vec(), rhs: vec![0, 0, 0, 0] }),
    }
}

/// Per-channel moments accumulated in 64-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMoments {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Elements per channel, `N*H*W`.
    pub count: usize,
}

pub fn channel_moments_f64(x: &Tensor) -> Result<ChannelMoments> {
    let (n, c, plane) = channel_layout(x, "channel_moments")?;
    let count = n * plane;
    if count < 2 {
        return Err(Error::DegenerateBatch { op: "channel_moments", count });
    }
    let data = x.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ci in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            s += data[(ni * c + ci) * plane..][..plane].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mu = s / count as f64;
        let mut ss = 0.0;
        for ni in 0..n {
            ss += data[(ni * c + ci) * plane..][..plane]
                .iter()
                .map(|&v| {
                    let d = v as f64 - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ci] = mu;
        var[ci] = ss / count as f64;
    }
    Ok(ChannelMoments { mean, var, count })
}

/// Per-channel mean and biased variance over the batch and spatial axes.
pub fn channel_moments(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let m = channel_moments_f64(x)?;
    Ok((Tensor::vector(m.mean.iter().map(|&v| v as f32).collect()), Tensor::vector(m.var.iter().map(|&v| v as f32).collect())))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let [n, k] = x.dims2("softmax")?;
    let mut out = vec![0.0; n * k];
    for (row, dst) in x.data().chunks(k).zip(out.chunks_mut(k)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f64;
        for (d, &v) in dst.iter_mut().zip(row) {
            let e = ((v - max) as f64).exp();
            z += e;
            *d = e as f32;
        }
        for d in dst.iter_mut() {
            *d = (*d as f64 / z) as f32;
        }
    }
    Tensor::new(vec![n, k], out)
}

/// 2x2 max pooling with stride 2; returns the pooled tensor and argmax offsets.
pub fn max_pool2d(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let [n, c, h, w] = x.dims4("max_pool2d")?;
    if h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2 {
        return Err(Error::config(format!("max_pool2d needs even spatial extents, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let data = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[i] > data[best] {
                        best = i;
                    }
                }
                out.push(data[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

pub(crate) fn max_pool2d_backward(input_shape: &[usize], argmax: &[u32], grad: &Tensor) -> Tensor {
    let mut dx = vec![0.0; input_shape.iter().product()];
    for (&i, &g) in argmax.iter().zip(grad.data()) {
        dx[i as usize] += g;
    }
    Tensor::new(input_shape.to_vec(), dx).expect("pool gradient shape")
}

/// `[N, C, H, W]` -> `[N, C]`
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("global_avg_pool")?;
    let plane = h * w;
    let out = x.data().chunks(plane).map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32).collect();
    Tensor::new(vec![n, c], out)
}

pub(crate) fn global_avg_pool_backward(input_shape: &[usize], grad: &Tensor) -> Tensor {
    let plane = input_shape[2] * input_shape[3];
    let scale = 1.0 / plane as f32;
    let mut dx = Vec::with_capacity(grad.len() * plane);
    for &g in grad.data() {
        dx.extend(std::iter::repeat_n(g * scale, plane));
    }
    Tensor::new(input_shape.to_vec(), dx).expect("pool gradient shape")
}

/// Two-tap linear interpolation weights per output coordinate (half-pixel centers).
fn linear_taps(len_in: usize, factor: usize) -> Vec<(usize, usize, f32)> {
    (0..len_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            let frac = (src - i0 as f64) as f32;
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear upsampling of `[N, C, H, W]` by an integer factor.
pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("upsample_bilinear")?;
    if factor == 0 {
        return Err(Error::config("upsample factor must be >= 1"));
    }
    let (ho, wo) = (h * factor, w * factor);
    let ty = linear_taps(h, factor);
    let tx = linear_taps(w, factor);
    let mut out = vec![0.0; n * c * ho * wo];
    for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * wo + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub(crate) fn upsample_bilinear_backward(input_shape: &[usize], factor: usize, grad: &Tensor) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (ho, wo) = (h * factor, w * factor);
    let ty = linear_taps(h, factor);
    let tx = linear_taps(w, factor);
    let mut dx = vec![0.0; input_shape.iter().product()];
    for (g, dst) in grad.data().chunks(ho * wo).zip(dx.chunks_mut(h * w)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * wo + ox];
                dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * w + x0] += v * fy * (1.0 - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx).expect("upsample gradient shape")
}
