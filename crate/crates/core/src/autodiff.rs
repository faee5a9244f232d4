//! Record-on-execute reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an arena of tensors. Every op appends its output; when at
//! least one input requires a gradient the op is also recorded, so the arena
//! order is a valid topological order for the backward sweep.

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_psd, Cholesky, Matrix};
use crate::tensor::Tensor;

/// Handle to a tensor living in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op {
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    AddChannelBias {
        input: Var,
        bias: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f32,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Exp {
        input: Var,
    },
    Clamp {
        input: Var,
        lo: f32,
        hi: f32,
    },
    AvgPool2 {
        input: Var,
    },
    Upsample2 {
        input: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    TileConcat {
        features: Var,
        latent: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    PadCols {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    BceWithLogits {
        logits: Var,
        target: Var,
    },
    GaussianKl {
        mu_q: Var,
        cov_q: Var,
        mu_p: Var,
        cov_p: Var,
    },
    DiagGaussianKl {
        mu_q: Var,
        log_var_q: Var,
        mu_p: Var,
        log_var_p: Var,
    },
    GaussianSample {
        mu: Var,
        cov: Var,
        noise: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Option<Op>,
}

/// Dynamic tape. Create one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// `c (m×n) = op(a) (m×k) · op(b) (k×n)`, accumulating into `c` when `accumulate`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_transposed: bool,
    b: &[f32],
    b_transposed: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_transposed {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_transposed {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m·k, k·n and m·n elements (asserted
    // above) and the strides describe row- or column-major views of them.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Column matrix for a whole batch: `(C·Kh·Kw) × (N·Ho·Wo)`, column
    /// index `b·Ho·Wo + oy·Wo + ox`.
    fn batch_im2col(&self, input: &[f32], n: usize) -> Vec<f32> {
        let spatial = self.col_cols();
        let width = n * spatial;
        let in_plane = self.channels * self.height * self.width;
        if self.is_pointwise() {
            let mut cols = vec![0.0f32; self.channels * width];
            for b in 0..n {
                for c in 0..self.channels {
                    let src = &input[b * in_plane + c * spatial..b * in_plane + (c + 1) * spatial];
                    cols[c * width + b * spatial..c * width + (b + 1) * spatial]
                        .copy_from_slice(src);
                }
            }
            return cols;
        }
        let mut cols = vec![0.0f32; self.col_rows() * width];
        let ow = self.out_w;
        for b in 0..n {
            let image = &input[b * in_plane..(b + 1) * in_plane];
            for c in 0..self.channels {
                let plane =
                    &image[c * self.height * self.width..(c + 1) * self.height * self.width];
                for ky in 0..self.kh {
                    let (oy_lo, oy_hi) = self.valid_outputs(ky, self.height, self.out_h);
                    for kx in 0..self.kw {
                        let (ox_lo, ox_hi) = self.valid_outputs(kx, self.width, ow);
                        let row = (c * self.kh + ky) * self.kw + kx;
                        let dst =
                            &mut cols[row * width + b * spatial..row * width + (b + 1) * spatial];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * self.stride + ky - self.padding;
                            let src = &plane[iy * self.width..(iy + 1) * self.width];
                            let line = &mut dst[oy * ow + ox_lo..oy * ow + ox_hi];
                            let ix0 = ox_lo * self.stride + kx - self.padding;
                            if self.stride == 1 {
                                line.copy_from_slice(&src[ix0..ix0 + line.len()]);
                            } else {
                                for (i, out) in line.iter_mut().enumerate() {
                                    *out = src[ix0 + i * self.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Output positions `[lo, hi)` along one axis whose input tap at
    /// kernel offset `k` falls inside the unpadded extent.
    fn valid_outputs(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(k).div_ceil(self.stride);
        // largest o with o·stride + k − padding ≤ extent − 1
        let hi = if extent + self.padding < k + 1 {
            0
        } else {
            ((extent + self.padding - k - 1) / self.stride + 1).min(out)
        };
        (lo.min(hi), hi)
    }

    /// Scatter-adds the columns of batch element `b` back onto its image.
    fn batch_col2im(&self, cols: &[f32], n: usize, b: usize, image: &mut [f32]) {
        let spatial = self.col_cols();
        let width = n * spatial;
        if self.is_pointwise() {
            for c in 0..self.channels {
                let src = &cols[c * width + b * spatial..c * width + (b + 1) * spatial];
                image[c * spatial..(c + 1) * spatial]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
            return;
        }
        let ow = self.out_w;
        for c in 0..self.channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                let (oy_lo, oy_hi) = self.valid_outputs(ky, self.height, self.out_h);
                for kx in 0..self.kw {
                    let (ox_lo, ox_hi) = self.valid_outputs(kx, self.width, ow);
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * width + b * spatial..row * width + (b + 1) * spatial];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * self.stride + ky - self.padding;
                        let dst = &mut plane[iy * self.width..(iy + 1) * self.width];
                        let line = &src[oy * ow + ox_lo..oy * ow + ox_hi];
                        let ix0 = ox_lo * self.stride + kx - self.padding;
                        if self.stride == 1 {
                            dst[ix0..ix0 + line.len()]
                                .iter_mut()
                                .zip(line)
                                .for_each(|(d, s)| *d += s);
                        } else {
                            for (i, s) in line.iter().enumerate() {
                                dst[ix0 + i * self.stride] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `O × (N·S)` -> `N × O × S`
fn unbatch(wide: &[f32], out_c: usize, n: usize, spatial: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; wide.len()];
    for o in 0..out_c {
        for b in 0..n {
            let src = &wide[o * n * spatial + b * spatial..o * n * spatial + (b + 1) * spatial];
            out[(b * out_c + o) * spatial..(b * out_c + o + 1) * spatial].copy_from_slice(src);
        }
    }
    out
}

/// `N × O × S` -> `O × (N·S)`
fn rebatch(g: &[f32], out_c: usize, n: usize, spatial: usize) -> Vec<f32> {
    let mut wide = vec![0.0f32; g.len()];
    for b in 0..n {
        for o in 0..out_c {
            let src = &g[(b * out_c + o) * spatial..(b * out_c + o + 1) * spatial];
            wide[o * n * spatial + b * spatial..o * n * spatial + (b + 1) * spatial]
                .copy_from_slice(src);
        }
    }
    wide
}

fn conv_geometry(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    expect_rank("conv2d", input, 4)?;
    expect_rank("conv2d", kernel, 4)?;
    let (c, h, w) = (input.shape()[1], input.shape()[2], input.shape()[3]);
    let (kc, kh, kw) = (kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]);
    if kc != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, kernel expects {kc}"),
        ));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be positive"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            ),
        ));
    }
    let out_h = (h + 2 * padding - kh) / stride + 1;
    let out_w = (w + 2 * padding - kw) / stride + 1;
    Ok(ConvGeometry {
        channels: c,
        height: h,
        width: w,
        kh,
        kw,
        stride,
        padding,
        out_h,
        out_w,
    })
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Reads row `b` of an `N×k²` tensor as a k×k matrix, symmetrized.
fn batch_matrix(t: &Tensor, b: usize, k: usize) -> Matrix {
    let row = &t.data()[b * k * k..(b + 1) * k * k];
    Matrix::from_vec(k, k, row.iter().map(|&v| v as f64).collect())
        .expect("row length is k²")
        .symmetrized()
}

fn batch_vector(t: &Tensor, b: usize, k: usize) -> Vec<f64> {
    t.data()[b * k..(b + 1) * k]
        .iter()
        .map(|&v| v as f64)
        .collect()
}

/// Batched Gaussian shapes: `mu` N×k, `cov` N×k².
fn gaussian_batch_shape(op: &'static str, mu: &Tensor, cov: &Tensor) -> Result<(usize, usize)> {
    expect_rank(op, mu, 2)?;
    expect_rank(op, cov, 2)?;
    let (n, k) = (mu.shape()[0], mu.shape()[1]);
    if cov.shape() != [n, k * k] {
        return Err(Error::shape(
            op,
            format!(
                "mean {:?} needs covariance [{n}, {}], got {:?}",
                mu.shape(),
                k * k,
                cov.shape()
            ),
        ));
    }
    Ok((n, k))
}

struct KlTerms {
    value: f64,
    chol_q: Cholesky,
    chol_p: Cholesky,
    delta: Vec<f64>,
}

fn gaussian_kl_terms(
    mu_q: &[f64],
    cov_q: &Matrix,
    mu_p: &[f64],
    cov_p: &Matrix,
) -> Result<KlTerms> {
    let k = mu_q.len();
    let chol_q = cholesky(cov_q)?;
    let chol_p = cholesky(cov_p)?;
    let delta: Vec<f64> = mu_p.iter().zip(mu_q).map(|(p, q)| p - q).collect();
    let p_inv = chol_p.inverse();
    let trace = p_inv
        .matmul(&jittered(cov_q, chol_q.jitter()))
        .expect("square")
        .trace();
    let w = chol_p.solve_lower(&delta);
    let mahalanobis: f64 = w.iter().map(|x| x * x).sum();
    let value = 0.5 * (trace + mahalanobis - k as f64 + chol_p.log_det() - chol_q.log_det());
    Ok(KlTerms {
        value,
        chol_q,
        chol_p,
        delta,
    })
}

fn jittered(a: &Matrix, jitter: f64) -> Matrix {
    if jitter == 0.0 {
        return a.clone();
    }
    let mut out = a.clone();
    for i in 0..a.rows() {
        out[(i, i)] += jitter;
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded (differentiable) ops.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| n.op.is_some()).count()
    }

    /// Adds a leaf. It participates in backward iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn variable(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let tracked = inputs.iter().any(|&i| self.requires_grad(i));
        let value = value.with_requires_grad(tracked);
        let op = tracked.then_some(op);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Cross-correlation of an NCHW input with an OIKhKw kernel and zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(kernel);
        let geo = conv_geometry(x, w, stride, padding)?;
        let n = x.shape()[0];
        let out_c = w.shape()[0];
        let (rows, spatial) = (geo.col_rows(), geo.col_cols());
        let cols = geo.batch_im2col(x.data(), n);
        let mut wide = vec![0.0f32; out_c * n * spatial];
        gemm(
            out_c,
            rows,
            n * spatial,
            w.data(),
            false,
            &cols,
            false,
            &mut wide,
            false,
        );
        let out = unbatch(&wide, out_c, n, spatial);
        let value = Tensor::new(vec![n, out_c, geo.out_h, geo.out_w], out)?;
        Ok(self.push(
            value,
            &[input, kernel],
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
        ))
    }

    /// Adds a per-channel bias `[C]` to an NCHW tensor.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let b = self.value(bias);
        expect_rank("add_channel_bias", x, 4)?;
        if b.shape() != [x.shape()[1]] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} for input {:?}", b.shape(), x.shape()),
            ));
        }
        let plane = x.shape()[2] * x.shape()[3];
        let c = x.shape()[1];
        let mut out = x.data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, &[input, bias], Op::AddChannelBias { input, bias }))
    }

    /// `input (N×F) · weight (F×G) + bias (G)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        expect_rank("linear", x, 2)?;
        expect_rank("linear", w, 2)?;
        let (n, f) = (x.shape()[0], x.shape()[1]);
        let (wf, g) = (w.shape()[0], w.shape()[1]);
        if wf != f {
            return Err(Error::shape(
                "linear",
                format!("input {:?} · weight {:?}", x.shape(), w.shape()),
            ));
        }
        if b.shape() != [g] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?}, expected [{g}]", b.shape()),
            ));
        }
        let mut out = vec![0.0f32; n * g];
        for row in out.chunks_mut(g) {
            row.copy_from_slice(b.data());
        }
        gemm(n, f, g, x.data(), false, w.data(), false, &mut out, true);
        let value = Tensor::new(vec![n, g], out)?;
        Ok(self.push(
            value,
            &[input, weight, bias],
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let x = self.value(a);
        let y = self.value(b);
        expect_rank("matmul", x, 2)?;
        expect_rank("matmul", y, 2)?;
        let (m, k) = (x.shape()[0], x.shape()[1]);
        let (k2, n) = (y.shape()[0], y.shape()[1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", x.shape(), y.shape()),
            ));
        }
        let mut out = vec![0.0f32; m * n];
        gemm(m, k, n, x.data(), false, y.data(), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, &[a, b], Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, &[input], Op::Scale { input, factor })
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let x = self.value(input);
        let data = match kind {
            Activation::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
            Activation::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
        };
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, &[input], Op::Activation { input, kind })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn exp(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v.exp()).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, &[input], Op::Exp { input })
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, input: Var, lo: f32, hi: f32) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, &[input], Op::Clamp { input, lo, hi })
    }

    /// 2×2 average pooling with stride 2 (even spatial extents required).
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        expect_rank("avg_pool2", x, 4)?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "avg_pool2",
                format!("odd spatial extent {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0f32; n * c * oh * ow];
        for (p, dst) in out.chunks_mut(oh * ow).enumerate() {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, &[input], Op::AvgPool2 { input }))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        expect_rank("upsample2", x, 4)?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; n * c * oh * ow];
        for (p, dst) in out.chunks_mut(oh * ow).enumerate() {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, &[input], Op::Upsample2 { input }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        expect_rank("concat_channels", x, 4)?;
        expect_rank("concat_channels", y, 4)?;
        let (n, ca, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let cb = y.shape()[1];
        if y.shape()[0] != n || y.shape()[2] != h || y.shape()[3] != w {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&x.data()[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&y.data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        Ok(self.push(value, &[a, b], Op::ConcatChannels { a, b }))
    }

    /// Broadcasts each latent row `[D]` over the spatial grid and appends it
    /// to the feature channels: `N×C×H×W, N×D -> N×(C+D)×H×W`.
    pub fn tile_concat(&mut self, features: Var, latent: Var) -> Result<Var> {
        let (f, z) = (self.value(features), self.value(latent));
        expect_rank("tile_concat", f, 4)?;
        expect_rank("tile_concat", z, 2)?;
        let (n, c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
        if z.shape()[0] != n {
            return Err(Error::shape(
                "tile_concat",
                format!("features {:?} vs latent {:?}", f.shape(), z.shape()),
            ));
        }
        let d = z.shape()[1];
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (c + d) * plane);
        for i in 0..n {
            out.extend_from_slice(&f.data()[i * c * plane..(i + 1) * c * plane]);
            for j in 0..d {
                let v = z.data()[i * d + j];
                out.extend(std::iter::repeat_n(v, plane));
            }
        }
        let value = Tensor::new(vec![n, c + d, h, w], out)?;
        Ok(self.push(
            value,
            &[features, latent],
            Op::TileConcat { features, latent },
        ))
    }

    /// Spatial mean: `N×C×H×W -> N×C`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        expect_rank("global_avg_pool", x, 4)?;
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let plane = x.shape()[2] * x.shape()[3];
        let out = x
            .data()
            .chunks(plane)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, &[input], Op::GlobalAvgPool { input }))
    }

    /// Columns `start..end` of an N×F matrix.
    pub fn slice_cols(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(input);
        expect_rank("slice_cols", x, 2)?;
        let (n, f) = (x.shape()[0], x.shape()[1]);
        if start > end || end > f {
            return Err(Error::shape(
                "slice_cols",
                format!("range {start}..{end} of {f} columns"),
            ));
        }
        let width = end - start;
        let mut out = Vec::with_capacity(n * width);
        for row in x.data().chunks(f) {
            out.extend_from_slice(&row[start..end]);
        }
        let value = Tensor::new(vec![n, width], out)?;
        Ok(self.push(value, &[input], Op::SliceCols { input, start }))
    }

    /// Zero-pads an N×k matrix on the right to N×width.
    pub fn pad_cols(&mut self, input: Var, width: usize) -> Result<Var> {
        let x = self.value(input);
        expect_rank("pad_cols", x, 2)?;
        let (n, k) = (x.shape()[0], x.shape()[1]);
        if width < k {
            return Err(Error::shape(
                "pad_cols",
                format!("cannot pad {k} columns to {width}"),
            ));
        }
        let mut out = vec![0.0f32; n * width];
        for (dst, src) in out.chunks_mut(width).zip(x.data().chunks(k.max(1))) {
            dst[..k].copy_from_slice(&src[..k]);
        }
        let value = Tensor::new(vec![n, width], out)?;
        Ok(self.push(value, &[input], Op::PadCols { input }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s = x.data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.push(Tensor::scalar(s), &[input], Op::Sum { input })
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let n = x.numel().max(1) as f64;
        let s = (x.data().iter().map(|&v| v as f64).sum::<f64>() / n) as f32;
        self.push(Tensor::scalar(s), &[input], Op::Mean { input })
    }

    /// Mean binary cross-entropy on logits, via the stable
    /// `max(x,0) − x·y + ln(1 + e^{−|x|})` form. Targets must be 0 or 1.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (x, y) = (self.value(logits), self.value(target));
        same_shape("bce_with_logits", x, y)?;
        if let Some(bad) = y.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::InvalidArgument(format!(
                "bce_with_logits target {bad} is not in {{0, 1}}"
            )));
        }
        let total: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&l, &t)| {
                let l = l as f64;
                l.max(0.0) - l * t as f64 + (-l.abs()).exp().ln_1p()
            })
            .sum();
        let value = Tensor::scalar((total / x.numel().max(1) as f64) as f32);
        Ok(self.push(
            value,
            &[logits, target],
            Op::BceWithLogits { logits, target },
        ))
    }

    /// Per-row KL(q ‖ p) between full-covariance Gaussians. Means are N×k,
    /// covariances N×k² (row-major k×k, symmetrized on read). Output `[N]`.
    pub fn gaussian_kl(&mut self, mu_q: Var, cov_q: Var, mu_p: Var, cov_p: Var) -> Result<Var> {
        let (n, k) = gaussian_batch_shape("gaussian_kl", self.value(mu_q), self.value(cov_q))?;
        let (np, kp) = gaussian_batch_shape("gaussian_kl", self.value(mu_p), self.value(cov_p))?;
        if (n, k) != (np, kp) {
            return Err(Error::shape(
                "gaussian_kl",
                format!("q is {n}x{k}, p is {np}x{kp}"),
            ));
        }
        let mut out = Vec::with_capacity(n);
        for b in 0..n {
            let terms = gaussian_kl_terms(
                &batch_vector(self.value(mu_q), b, k),
                &batch_matrix(self.value(cov_q), b, k),
                &batch_vector(self.value(mu_p), b, k),
                &batch_matrix(self.value(cov_p), b, k),
            )?;
            out.push(terms.value as f32);
        }
        let value = Tensor::new(vec![n], out)?;
        Ok(self.push(
            value,
            &[mu_q, cov_q, mu_p, cov_p],
            Op::GaussianKl {
                mu_q,
                cov_q,
                mu_p,
                cov_p,
            },
        ))
    }

    /// Per-row KL between diagonal Gaussians given as means and log-variances (N×D each).
    pub fn diag_gaussian_kl(
        &mut self,
        mu_q: Var,
        log_var_q: Var,
        mu_p: Var,
        log_var_p: Var,
    ) -> Result<Var> {
        let shape = self.value(mu_q).shape().to_vec();
        for v in [log_var_q, mu_p, log_var_p] {
            if self.value(v).shape() != shape.as_slice() {
                return Err(Error::shape(
                    "diag_gaussian_kl",
                    format!("{:?} vs {:?}", shape, self.value(v).shape()),
                ));
            }
        }
        if shape.len() != 2 {
            return Err(Error::shape(
                "diag_gaussian_kl",
                format!("expected N×D, got {shape:?}"),
            ));
        }
        let (n, d) = (shape[0], shape[1]);
        let (mq, lq, mp, lp) = (
            self.value(mu_q).data(),
            self.value(log_var_q).data(),
            self.value(mu_p).data(),
            self.value(log_var_p).data(),
        );
        let out = (0..n)
            .map(|b| {
                let s: f64 = (b * d..(b + 1) * d)
                    .map(|i| {
                        let (lq, lp) = (lq[i] as f64, lp[i] as f64);
                        let diff = mq[i] as f64 - mp[i] as f64;
                        lp - lq + ((lq).exp() + diff * diff) / lp.exp() - 1.0
                    })
                    .sum();
                (0.5 * s) as f32
            })
            .collect();
        let value = Tensor::new(vec![n], out)?;
        Ok(self.push(
            value,
            &[mu_q, log_var_q, mu_p, log_var_p],
            Op::DiagGaussianKl {
                mu_q,
                log_var_q,
                mu_p,
                log_var_p,
            },
        ))
    }

    /// Reparameterized draw `mu + L·noise` with `L Lᵀ` the (jittered,
    /// semidefinite-tolerant) Cholesky factor of each covariance row.
    pub fn gaussian_sample(&mut self, mu: Var, cov: Var, noise: Var) -> Result<Var> {
        let (n, k) = gaussian_batch_shape("gaussian_sample", self.value(mu), self.value(cov))?;
        if self.value(noise).shape() != [n, k] {
            return Err(Error::shape(
                "gaussian_sample",
                format!("noise {:?}, expected [{n}, {k}]", self.value(noise).shape()),
            ));
        }
        let mut out = Vec::with_capacity(n * k);
        for b in 0..n {
            let chol = cholesky_psd(&batch_matrix(self.value(cov), b, k))?;
            let eps = batch_vector(self.value(noise), b, k);
            let m = batch_vector(self.value(mu), b, k);
            out.extend(
                chol.apply(&eps)
                    .iter()
                    .zip(&m)
                    .map(|(le, m)| (m + le) as f32),
            );
        }
        let value = Tensor::new(vec![n, k], out)?;
        Ok(self.push(
            value,
            &[mu, cov, noise],
            Op::GaussianSample { mu, cov, noise },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every leaf that
    /// requires a gradient holds d(loss)/d(leaf) in its grad slot.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(op) = self.nodes[i].op.clone() else {
                continue;
            };
            let Some(g) = grads[i].take() else { continue };
            self.backprop(&op, i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, slot) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if node.op.is_none() && node.value.requires_grad() {
                let g = slot.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.requires_grad(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backprop(
        &self,
        op: &Op,
        out_index: usize,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) -> Result<()> {
        let out = &self.nodes[out_index].value;
        match *op {
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let x = self.value(input);
                let w = self.value(kernel);
                let geo = conv_geometry(x, w, stride, padding)?;
                let n = x.shape()[0];
                let out_c = w.shape()[0];
                let (rows, spatial) = (geo.col_rows(), geo.col_cols());
                let in_plane = geo.channels * geo.height * geo.width;
                let g_wide = rebatch(g, out_c, n, spatial);
                if self.requires_grad(kernel) {
                    let cols = geo.batch_im2col(x.data(), n);
                    self.accumulate(grads, kernel, |acc| {
                        gemm(
                            out_c,
                            n * spatial,
                            rows,
                            &g_wide,
                            false,
                            &cols,
                            true,
                            acc,
                            true,
                        )
                    });
                }
                if self.requires_grad(input) {
                    let mut dcols = vec![0.0f32; rows * n * spatial];
                    gemm(
                        rows,
                        out_c,
                        n * spatial,
                        w.data(),
                        true,
                        &g_wide,
                        false,
                        &mut dcols,
                        false,
                    );
                    self.accumulate(grads, input, |acc| {
                        for b in 0..n {
                            geo.batch_col2im(
                                &dcols,
                                n,
                                b,
                                &mut acc[b * in_plane..(b + 1) * in_plane],
                            );
                        }
                    });
                }
            }
            Op::AddChannelBias { input, bias } => {
                self.accumulate(grads, input, |acc| {
                    acc.iter_mut().zip(g).for_each(|(a, d)| *a += d)
                });
                let shape = out.shape();
                let (c, plane) = (shape[1], shape[2] * shape[3]);
                let mut db = vec![0.0f64; c];
                for (i, chunk) in g.chunks(plane).enumerate() {
                    db[i % c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
                }
                self.accumulate(grads, bias, |acc| {
                    acc.iter_mut().zip(&db).for_each(|(a, d)| *a += *d as f32)
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(input);
                let w = self.value(weight);
                let (n, f) = (x.shape()[0], x.shape()[1]);
                let gdim = w.shape()[1];
                self.accumulate(grads, input, |acc| {
                    gemm(n, gdim, f, g, false, w.data(), true, acc, true)
                });
                self.accumulate(grads, weight, |acc| {
                    gemm(f, n, gdim, x.data(), true, g, false, acc, true)
                });
                self.accumulate(grads, bias, |acc| {
                    for (j, a) in acc.iter_mut().enumerate() {
                        *a += (0..n).map(|r| g[r * gdim + j] as f64).sum::<f64>() as f32;
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (x, y) = (self.value(a), self.value(b));
                let (m, k) = (x.shape()[0], x.shape()[1]);
                let n = y.shape()[1];
                self.accumulate(grads, a, |acc| {
                    gemm(m, n, k, g, false, y.data(), true, acc, true)
                });
                self.accumulate(grads, b, |acc| {
                    gemm(k, m, n, x.data(), true, g, false, acc, true)
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, a, |acc| {
                    acc.iter_mut().zip(g).for_each(|(p, d)| *p += d)
                });
                self.accumulate(grads, b, |acc| {
                    acc.iter_mut().zip(g).for_each(|(p, d)| *p += d)
                });
            }
            Op::Mul { a, b } => {
                let (x, y) = (self.value(a), self.value(b));
                self.accumulate(grads, a, |acc| {
                    acc.iter_mut()
                        .zip(g)
                        .zip(y.data())
                        .for_each(|((p, d), yv)| *p += d * yv)
                });
                self.accumulate(grads, b, |acc| {
                    acc.iter_mut()
                        .zip(g)
                        .zip(x.data())
                        .for_each(|((p, d), xv)| *p += d * xv)
                });
            }
            Op::Scale { input, factor } => {
                self.accumulate(grads, input, |acc| {
                    acc.iter_mut().zip(g).for_each(|(p, d)| *p += d * factor)
                });
            }
            Op::Activation { input, kind } => {
                let x = self.value(input);
                match kind {
                    Activation::Relu => self.accumulate(grads, input, |acc| {
                        acc.iter_mut()
                            .zip(g)
                            .zip(x.data())
                            .for_each(|((p, d), &xv)| {
                                if xv > 0.0 {
                                    *p += d
                                }
                            })
                    }),
                    Activation::Sigmoid => self.accumulate(grads, input, |acc| {
                        acc.iter_mut()
                            .zip(g)
                            .zip(out.data())
                            .for_each(|((p, d), &s)| *p += d * s * (1.0 - s))
                    }),
                }
            }
            Op::Exp { input } => {
                self.accumulate(grads, input, |acc| {
                    acc.iter_mut()
                        .zip(g)
                        .zip(out.data())
                        .for_each(|((p, d), &e)| *p += d * e)
                });
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.value(input);
                self.accumulate(grads, input, |acc| {
                    acc.iter_mut()
                        .zip(g)
                        .zip(x.data())
                        .for_each(|((p, d), &xv)| {
                            if xv >= lo && xv <= hi {
                                *p += d
                            }
                        })
                });
            }
            Op::AvgPool2 { input } => {
                let x = self.value(input);
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let (oh, ow) = (h / 2, w / 2);
                self.accumulate(grads, input, |acc| {
                    for (p, src) in g.chunks(oh * ow).enumerate() {
                        let dst = &mut acc[p * h * w..(p + 1) * h * w];
                        for y in 0..oh {
                            for xx in 0..ow {
                                let v = 0.25 * src[y * ow + xx];
                                let i = 2 * y * w + 2 * xx;
                                dst[i] += v;
                                dst[i + 1] += v;
                                dst[i + w] += v;
                                dst[i + w + 1] += v;
                            }
                        }
                    }
                });
            }
            Op::Upsample2 { input } => {
                let x = self.value(input);
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let (oh, ow) = (2 * h, 2 * w);
                self.accumulate(grads, input, |acc| {
                    for (p, src) in g.chunks(oh * ow).enumerate() {
                        let dst = &mut acc[p * h * w..(p + 1) * h * w];
                        for y in 0..oh {
                            for xx in 0..ow {
                                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::ConcatChannels { a, b } => {
                let (x, y) = (self.value(a), self.value(b));
                let n = x.shape()[0];
                let plane = x.shape()[2] * x.shape()[3];
                let (sa, sb) = (x.shape()[1] * plane, y.shape()[1] * plane);
                self.accumulate(grads, a, |acc| {
                    for i in 0..n {
                        let src = &g[i * (sa + sb)..i * (sa + sb) + sa];
                        acc[i * sa..(i + 1) * sa]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(p, d)| *p += d);
                    }
                });
                self.accumulate(grads, b, |acc| {
                    for i in 0..n {
                        let src = &g[i * (sa + sb) + sa..(i + 1) * (sa + sb)];
                        acc[i * sb..(i + 1) * sb]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(p, d)| *p += d);
                    }
                });
            }
            Op::TileConcat { features, latent } => {
                let (f, z) = (self.value(features), self.value(latent));
                let (n, c) = (f.shape()[0], f.shape()[1]);
                let plane = f.shape()[2] * f.shape()[3];
                let d = z.shape()[1];
                let stride = (c + d) * plane;
                self.accumulate(grads, features, |acc| {
                    for i in 0..n {
                        let src = &g[i * stride..i * stride + c * plane];
                        acc[i * c * plane..(i + 1) * c * plane]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(p, v)| *p += v);
                    }
                });
                self.accumulate(grads, latent, |acc| {
                    for i in 0..n {
                        for j in 0..d {
                            let start = i * stride + (c + j) * plane;
                            let s: f64 = g[start..start + plane].iter().map(|&v| v as f64).sum();
                            acc[i * d + j] += s as f32;
                        }
                    }
                });
            }
            Op::GlobalAvgPool { input } => {
                let x = self.value(input);
                let plane = x.shape()[2] * x.shape()[3];
                let inv = 1.0 / plane as f32;
                self.accumulate(grads, input, |acc| {
                    for (dst, &gv) in acc.chunks_mut(plane).zip(g) {
                        dst.iter_mut().for_each(|p| *p += gv * inv);
                    }
                });
            }
            Op::SliceCols { input, start } => {
                let f = self.value(input).shape()[1];
                let width = out.shape()[1];
                self.accumulate(grads, input, |acc| {
                    for (dst, src) in acc.chunks_mut(f).zip(g.chunks(width.max(1))) {
                        dst[start..start + width]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(p, v)| *p += v);
                    }
                });
            }
            Op::PadCols { input } => {
                let k = self.value(input).shape()[1];
                let width = out.shape()[1];
                self.accumulate(grads, input, |acc| {
                    for (dst, src) in acc.chunks_mut(k.max(1)).zip(g.chunks(width)) {
                        dst.iter_mut().zip(&src[..k]).for_each(|(p, v)| *p += v);
                    }
                });
            }
            Op::Sum { input } => {
                let gv = g[0];
                self.accumulate(grads, input, |acc| acc.iter_mut().for_each(|p| *p += gv));
            }
            Op::Mean { input } => {
                let gv = g[0] / self.value(input).numel().max(1) as f32;
                self.accumulate(grads, input, |acc| acc.iter_mut().for_each(|p| *p += gv));
            }
            Op::BceWithLogits { logits, target } => {
                let (x, y) = (self.value(logits), self.value(target));
                let scale = g[0] / x.numel().max(1) as f32;
                self.accumulate(grads, logits, |acc| {
                    acc.iter_mut()
                        .zip(x.data())
                        .zip(y.data())
                        .for_each(|((p, &l), &t)| *p += scale * (sigmoid(l) - t))
                });
            }
            Op::GaussianKl {
                mu_q,
                cov_q,
                mu_p,
                cov_p,
            } => {
                let (n, k) = (self.value(mu_q).shape()[0], self.value(mu_q).shape()[1]);
                let mut d_mu_q = vec![0.0f32; n * k];
                let mut d_mu_p = vec![0.0f32; n * k];
                let mut d_cov_q = vec![0.0f32; n * k * k];
                let mut d_cov_p = vec![0.0f32; n * k * k];
                for b in 0..n {
                    let cq = batch_matrix(self.value(cov_q), b, k);
                    let terms = gaussian_kl_terms(
                        &batch_vector(self.value(mu_q), b, k),
                        &cq,
                        &batch_vector(self.value(mu_p), b, k),
                        &batch_matrix(self.value(cov_p), b, k),
                    )?;
                    let gb = g[b] as f64;
                    let p_inv = terms.chol_p.inverse();
                    let q_inv = terms.chol_q.inverse();
                    let p_delta = terms.chol_p.solve(&terms.delta);
                    let cq = jittered(&cq, terms.chol_q.jitter());
                    let p_cq_p = p_inv.matmul(&cq).and_then(|m| m.matmul(&p_inv))?;
                    for i in 0..k {
                        d_mu_q[b * k + i] = (-gb * p_delta[i]) as f32;
                        d_mu_p[b * k + i] = (gb * p_delta[i]) as f32;
                        for j in 0..k {
                            let idx = b * k * k + i * k + j;
                            d_cov_q[idx] = (gb * 0.5 * (p_inv[(i, j)] - q_inv[(i, j)])) as f32;
                            d_cov_p[idx] = (gb
                                * 0.5
                                * (p_inv[(i, j)] - p_cq_p[(i, j)] - p_delta[i] * p_delta[j]))
                                as f32;
                        }
                    }
                }
                for (v, d) in [
                    (mu_q, &d_mu_q),
                    (mu_p, &d_mu_p),
                    (cov_q, &d_cov_q),
                    (cov_p, &d_cov_p),
                ] {
                    self.accumulate(grads, v, |acc| {
                        acc.iter_mut().zip(d.iter()).for_each(|(p, x)| *p += x)
                    });
                }
            }
            Op::DiagGaussianKl {
                mu_q,
                log_var_q,
                mu_p,
                log_var_p,
            } => {
                let shape = self.value(mu_q).shape();
                let d = shape[1];
                let (mq, lq, mp, lp) = (
                    self.value(mu_q).data(),
                    self.value(log_var_q).data(),
                    self.value(mu_p).data(),
                    self.value(log_var_p).data(),
                );
                let len = mq.len();
                let mut dmq = vec![0.0f32; len];
                let mut dlq = vec![0.0f32; len];
                let mut dmp = vec![0.0f32; len];
                let mut dlp = vec![0.0f32; len];
                for i in 0..len {
                    let gb = g[i / d] as f64;
                    let inv_vp = (-(lp[i] as f64)).exp();
                    let diff = mq[i] as f64 - mp[i] as f64;
                    let vq = (lq[i] as f64).exp();
                    dmq[i] = (gb * diff * inv_vp) as f32;
                    dmp[i] = (-gb * diff * inv_vp) as f32;
                    dlq[i] = (gb * 0.5 * (vq * inv_vp - 1.0)) as f32;
                    dlp[i] = (gb * 0.5 * (1.0 - (vq + diff * diff) * inv_vp)) as f32;
                }
                for (v, dv) in [
                    (mu_q, &dmq),
                    (log_var_q, &dlq),
                    (mu_p, &dmp),
                    (log_var_p, &dlp),
                ] {
                    self.accumulate(grads, v, |acc| {
                        acc.iter_mut().zip(dv.iter()).for_each(|(p, x)| *p += x)
                    });
                }
            }
            Op::GaussianSample { mu, cov, noise } => {
                self.accumulate(grads, mu, |acc| {
                    acc.iter_mut().zip(g).for_each(|(p, d)| *p += d)
                });
                let (n, k) = (self.value(mu).shape()[0], self.value(mu).shape()[1]);
                if self.requires_grad(cov) {
                    let mut dcov = vec![0.0f32; n * k * k];
                    for b in 0..n {
                        let chol = cholesky_psd(&batch_matrix(self.value(cov), b, k))?;
                        if !chol.is_positive_definite() {
                            // degenerate direction: the factor is not differentiable there
                            continue;
                        }
                        let eps = batch_vector(self.value(noise), b, k);
                        let gz: Vec<f64> =
                            g[b * k..(b + 1) * k].iter().map(|&v| v as f64).collect();
                        let s = cholesky_backward(&chol, &gz, &eps);
                        for i in 0..k {
                            for j in 0..k {
                                dcov[b * k * k + i * k + j] = s[(i, j)] as f32;
                            }
                        }
                    }
                    self.accumulate(grads, cov, |acc| {
                        acc.iter_mut().zip(&dcov).for_each(|(p, x)| *p += x)
                    });
                }
                if self.requires_grad(noise) {
                    let mut dn = vec![0.0f32; n * k];
                    for b in 0..n {
                        let chol = cholesky_psd(&batch_matrix(self.value(cov), b, k))?;
                        let l = chol.factor();
                        for j in 0..k {
                            dn[b * k + j] =
                                (j..k).map(|i| l[(i, j)] * g[b * k + i] as f64).sum::<f64>() as f32;
                        }
                    }
                    self.accumulate(grads, noise, |acc| {
                        acc.iter_mut().zip(&dn).for_each(|(p, x)| *p += x)
                    });
                }
            }
        }
        Ok(())
    }
}

/// Gradient w.r.t. the (symmetric) covariance of `z = L·eps`, given dz.
/// With `L̄ = tril(dz epsᵀ)`, `S = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹` where Φ keeps the lower
/// triangle and halves the diagonal; the symmetric gradient is `(S + Sᵀ)/2`.
fn cholesky_backward(chol: &Cholesky, dz: &[f64], eps: &[f64]) -> Matrix {
    let k = dz.len();
    let l = chol.factor();
    let mut lbar = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            lbar[(i, j)] = dz[i] * eps[j];
        }
    }
    let mut phi = l.transpose().matmul(&lbar).expect("square");
    for i in 0..k {
        for j in (i + 1)..k {
            phi[(i, j)] = 0.0;
        }
        phi[(i, i)] *= 0.5;
    }
    let linv = chol.lower_inverse();
    let s = linv
        .transpose()
        .matmul(&phi)
        .and_then(|m| m.matmul(&linv))
        .expect("square");
    s.symmetrized()
}
