//! Forward and backward kernels over channels-last tensors.
//!
//! Every reduction runs in a fixed order (ascending reduction index), so the
//! same inputs always produce bit-identical outputs.

use serde::{Deserialize, Serialize};

use super::{shape_str, Float, Tensor};
use crate::error::{Error, Result};

/// Pointwise nonlinearity used throughout the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Gelu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::config(format!(
                "unknown activation {other:?} (expected silu or gelu)"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// matrix products

/// `c = op(a) * op(b)` for one matrix, where `op(a)` is `m x k` and `op(b)`
/// is `k x n`. `c` is overwritten. The blocking depends only on the
/// dimensions, so results are reproducible bit for bit.
pub(crate) fn gemm<T: Float>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    (m, k, n): (usize, usize, usize),
    trans_a: bool,
    trans_b: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (mi, ki, ni) = (m as isize, k as isize, n as isize);
    let av = if trans_a { (a, 1, mi) } else { (a, ki, 1) };
    let bv = if trans_b { (b, 1, ki) } else { (b, ni, 1) };
    T::gemm_strided((m, k, n), av, bv, c);
}

/// Transpose of a row-major `rows x cols` matrix.
#[cfg(test)]
pub(crate) fn transpose2<T: Float>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Operand geometry of a batched product: leading dims, then the stored
/// trailing matrix dims of each operand.
pub(crate) struct MatmulDims {
    pub batch: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

pub(crate) fn matmul_dims(
    a: &[usize],
    b: &[usize],
    trans_a: bool,
    trans_b: bool,
) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 || a.len() != b.len() {
        return Err(Error::dim(format!(
            "matmul needs operands of equal rank >= 2, got {} and {}",
            shape_str(a),
            shape_str(b)
        )));
    }
    let r = a.len();
    if a[..r - 2] != b[..r - 2] {
        return Err(Error::dim(format!(
            "matmul batch dims differ: {} vs {}",
            shape_str(a),
            shape_str(b)
        )));
    }
    let (m, ka) = if trans_a {
        (a[r - 1], a[r - 2])
    } else {
        (a[r - 2], a[r - 1])
    };
    let (kb, n) = if trans_b {
        (b[r - 1], b[r - 2])
    } else {
        (b[r - 2], b[r - 1])
    };
    if ka != kb {
        return Err(Error::dim(format!(
            "matmul inner dims differ: {} x {}",
            shape_str(a),
            shape_str(b)
        )));
    }
    Ok(MatmulDims {
        batch: a[..r - 2].to_vec(),
        m,
        k: ka,
        n,
    })
}

pub(crate) fn batched_matmul<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_a: bool,
    trans_b: bool,
) -> Result<Tensor<T>> {
    let d = matmul_dims(a.shape(), b.shape(), trans_a, trans_b)?;
    let batch: usize = d.batch.iter().product();
    let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
    let mut out = vec![T::zero(); batch * sc];
    for i in 0..batch {
        gemm(
            &a.data()[i * sa..(i + 1) * sa],
            &b.data()[i * sb..(i + 1) * sb],
            &mut out[i * sc..(i + 1) * sc],
            (d.m, d.k, d.n),
            trans_a,
            trans_b,
        );
    }
    let mut shape = d.batch;
    shape.extend([d.m, d.n]);
    Tensor::new(&shape, out)
}

/// Batched matrix product `[..., M, K] x [..., K, N] -> [..., M, N]`.
/// Leading dims must be equal.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    batched_matmul(a, b, false, false)
}

/// `x[..., K] * w[K, N] (+ bias[N])` with the leading dims of `x` flattened.
pub fn linear<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (rows, k, n) = linear_dims(x.shape(), w.shape(), bias.map(|b| b.shape()))?;
    let mut out = vec![T::zero(); rows * n];
    gemm(x.data(), w.data(), &mut out, (rows, k, n), false, false);
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(&shape, out)
}

pub(crate) fn linear_dims(
    x: &[usize],
    w: &[usize],
    bias: Option<&[usize]>,
) -> Result<(usize, usize, usize)> {
    if w.len() != 2 || x.is_empty() || x[x.len() - 1] != w[0] {
        return Err(Error::dim(format!(
            "linear layer: input {} does not match weight {}",
            shape_str(x),
            shape_str(w)
        )));
    }
    if let Some(b) = bias {
        if b != [w[1]] {
            return Err(Error::dim(format!(
                "linear layer: bias {} does not match weight {}",
                shape_str(b),
                shape_str(w)
            )));
        }
    }
    let k = w[0];
    Ok((x.iter().product::<usize>() / k, k, w[1]))
}

// ---------------------------------------------------------------------------
// softmax

/// Row-wise softmax over the last axis, stabilised by subtracting the row max.
pub fn softmax_rows<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("softmax of a rank-0 tensor"))?;
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(n) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(x.shape(), out)
}

/// Given softmax output `p` and upstream `dp`, returns `dx`.
pub(crate) fn softmax_rows_backward<T: Float>(p: &Tensor<T>, dp: &Tensor<T>) -> Tensor<T> {
    let n = *p.shape().last().unwrap();
    let mut dx = vec![T::zero(); p.numel()];
    for ((prow, grow), out) in p
        .data()
        .chunks_exact(n)
        .zip(dp.data().chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
    {
        let dot = prow
            .iter()
            .zip(grow)
            .fold(T::zero(), |acc, (&pv, &gv)| acc + pv * gv);
        for ((o, &pv), &gv) in out.iter_mut().zip(prow).zip(grow) {
            *o = pv * (gv - dot);
        }
    }
    Tensor::new(p.shape(), dx).unwrap()
}

// ---------------------------------------------------------------------------
// pooling

fn nhwc(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::dim(format!(
            "{what} expects a [B,H,W,C] feature map, got {}",
            shape_str(shape)
        ))),
    }
}

pub(crate) fn check_grid(what: &'static str, h: usize, w: usize, g: usize) -> Result<()> {
    if g == 0 || !h.is_multiple_of(g) || !w.is_multiple_of(g) {
        return Err(Error::Divisibility { what, h, w, g });
    }
    Ok(())
}

/// Non-overlapping `g x g` average pooling on `[B,H,W,C]`.
pub fn avg_pool2d<T: Float>(x: &Tensor<T>, g: usize) -> Result<Tensor<T>> {
    let (b, h, w, c) = nhwc(x.shape(), "avg_pool2d")?;
    check_grid("avg_pool2d", h, w, g)?;
    let (ho, wo) = (h / g, w / g);
    let inv = T::of((g * g) as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); b * ho * wo * c];
    for bi in 0..b {
        for i in 0..ho {
            for j in 0..wo {
                let o = ((bi * ho + i) * wo + j) * c;
                let acc = &mut out[o..o + c];
                for dy in 0..g {
                    for dx in 0..g {
                        let src = ((bi * h + i * g + dy) * w + j * g + dx) * c;
                        for (a, &v) in acc.iter_mut().zip(&xd[src..src + c]) {
                            *a += v;
                        }
                    }
                }
                acc.iter_mut().for_each(|a| *a /= inv);
            }
        }
    }
    Tensor::new(&[b, ho, wo, c], out)
}

pub(crate) fn avg_pool2d_backward<T: Float>(
    dy: &Tensor<T>,
    in_shape: &[usize],
    g: usize,
) -> Tensor<T> {
    let (b, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (h / g, w / g);
    let inv = T::of((g * g) as f64);
    let mut dx = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let src = ((bi * ho + y / g) * wo + x / g) * c;
                let dst = ((bi * h + y) * w + x) * c;
                for (d, &v) in dx[dst..dst + c].iter_mut().zip(&dy.data()[src..src + c]) {
                    *d = v / inv;
                }
            }
        }
    }
    Tensor::new(in_shape, dx).unwrap()
}

// ---------------------------------------------------------------------------
// convolution

/// Hyper-parameters of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn same(kernel: usize, stride: usize, groups: usize) -> Self {
        Self {
            stride,
            padding: kernel / 2,
            groups,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    pub(crate) fn new(x: &[usize], w: &[usize], spec: ConvSpec) -> Result<Self> {
        let (b, h, wd, cin) = nhwc(x, "conv2d")?;
        let [k, k2, cin_g, cout] = *w else {
            return Err(Error::dim(format!(
                "conv2d kernel must be [K,K,Cin/groups,Cout], got {}",
                shape_str(w)
            )));
        };
        if k != k2 {
            return Err(Error::dim(format!(
                "conv2d kernel {} is not square",
                shape_str(w)
            )));
        }
        let g = spec.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 || cin / g != cin_g {
            return Err(Error::dim(format!(
                "conv2d channel/group mismatch: input {} kernel {} groups {g}",
                shape_str(x),
                shape_str(w)
            )));
        }
        if spec.stride == 0 || h + 2 * spec.padding < k || wd + 2 * spec.padding < k {
            return Err(Error::dim(format!(
                "conv2d kernel {k} with padding {} and stride {} does not fit input {}",
                spec.padding,
                spec.stride,
                shape_str(x)
            )));
        }
        let ho = (h + 2 * spec.padding - k) / spec.stride + 1;
        let wo = (wd + 2 * spec.padding - k) / spec.stride + 1;
        Ok(Self {
            b,
            h,
            w: wd,
            cin,
            k,
            cout,
            ho,
            wo,
            cin_g,
            cout_g: cout / g,
            spec,
        })
    }

    pub(crate) fn out_shape(&self) -> [usize; 4] {
        [self.b, self.ho, self.wo, self.cout]
    }

    pub(crate) fn macs(&self) -> u64 {
        (self.b * self.ho * self.wo * self.cout * self.k * self.k * self.cin_g) as u64
    }

    fn depthwise(&self) -> bool {
        self.spec.groups == self.cin && self.cin == self.cout
    }

    /// Input coordinate for output position `o` and kernel tap `t`, if inside.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let v = (o * self.spec.stride + t) as isize - self.spec.padding as isize;
        (v >= 0 && (v as usize) < extent).then_some(v as usize)
    }

    /// Patch matrix `[B*Ho*Wo, K*K*Cin]`, columns ordered (ky, kx, ci).
    fn im2col<T: Float>(&self, x: &[T]) -> Vec<T> {
        let cols = self.k * self.k * self.cin;
        let mut out = vec![T::zero(); self.b * self.ho * self.wo * cols];
        for bi in 0..self.b {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = ((bi * self.ho + oy) * self.wo + ox) * cols;
                    for ky in 0..self.k {
                        let Some(iy) = self.src(oy, ky, self.h) else {
                            continue;
                        };
                        for kx in 0..self.k {
                            let Some(ix) = self.src(ox, kx, self.w) else {
                                continue;
                            };
                            let s = ((bi * self.h + iy) * self.w + ix) * self.cin;
                            let d = row + (ky * self.k + kx) * self.cin;
                            out[d..d + self.cin].copy_from_slice(&x[s..s + self.cin]);
                        }
                    }
                }
            }
        }
        out
    }

    fn col2im<T: Float>(&self, cols: &[T]) -> Vec<T> {
        let ncols = self.k * self.k * self.cin;
        let mut dx = vec![T::zero(); self.b * self.h * self.w * self.cin];
        for bi in 0..self.b {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = ((bi * self.ho + oy) * self.wo + ox) * ncols;
                    for ky in 0..self.k {
                        let Some(iy) = self.src(oy, ky, self.h) else {
                            continue;
                        };
                        for kx in 0..self.k {
                            let Some(ix) = self.src(ox, kx, self.w) else {
                                continue;
                            };
                            let d = ((bi * self.h + iy) * self.w + ix) * self.cin;
                            let s = row + (ky * self.k + kx) * self.cin;
                            for (a, &v) in
                                dx[d..d + self.cin].iter_mut().zip(&cols[s..s + self.cin])
                            {
                                *a += v;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// 2-D cross-correlation on `[B,H,W,Cin]` with kernel `[K,K,Cin/groups,Cout]`.
pub fn conv2d<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::dim(format!(
                "conv2d bias {} does not match {} output channels",
                shape_str(b.shape()),
                g.cout
            )));
        }
    }
    let rows = g.b * g.ho * g.wo;
    let mut out = vec![T::zero(); rows * g.cout];
    let (xd, wd) = (x.data(), w.data());
    if spec.groups == 1 {
        let cols = g.im2col(xd);
        gemm(
            &cols,
            wd,
            &mut out,
            (rows, g.k * g.k * g.cin, g.cout),
            false,
            false,
        );
    } else if g.depthwise() {
        let c = g.cin;
        for bi in 0..g.b {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let o = ((bi * g.ho + oy) * g.wo + ox) * c;
                    let acc = &mut out[o..o + c];
                    for ky in 0..g.k {
                        let Some(iy) = g.src(oy, ky, g.h) else {
                            continue;
                        };
                        for kx in 0..g.k {
                            let Some(ix) = g.src(ox, kx, g.w) else {
                                continue;
                            };
                            let s = ((bi * g.h + iy) * g.w + ix) * c;
                            let wo = (ky * g.k + kx) * c;
                            for ((a, &xv), &wv) in
                                acc.iter_mut().zip(&xd[s..s + c]).zip(&wd[wo..wo + c])
                            {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    } else {
        for bi in 0..g.b {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let o = ((bi * g.ho + oy) * g.wo + ox) * g.cout;
                    for co in 0..g.cout {
                        let grp = co / g.cout_g;
                        let mut acc = T::zero();
                        for ky in 0..g.k {
                            let Some(iy) = g.src(oy, ky, g.h) else {
                                continue;
                            };
                            for kx in 0..g.k {
                                let Some(ix) = g.src(ox, kx, g.w) else {
                                    continue;
                                };
                                let s = ((bi * g.h + iy) * g.w + ix) * g.cin + grp * g.cin_g;
                                for ci in 0..g.cin_g {
                                    acc += xd[s + ci]
                                        * wd[((ky * g.k + kx) * g.cin_g + ci) * g.cout + co];
                                }
                            }
                        }
                        out[o + co] = acc;
                    }
                }
            }
        }
    }
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(g.cout) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Tensor::new(&g.out_shape(), out)
}

/// Gradients of a convolution: `(dx, dw, dbias)`.
pub(crate) fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    spec: ConvSpec,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let g = ConvGeom::new(x.shape(), w.shape(), spec).expect("validated in forward");
    let rows = g.b * g.ho * g.wo;
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());
    let mut db = vec![T::zero(); g.cout];
    for row in gd.chunks_exact(g.cout) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    let (dx, dw) = if spec.groups == 1 {
        let kc = g.k * g.k * g.cin;
        let cols = g.im2col(xd);
        let mut dw = vec![T::zero(); kc * g.cout];
        gemm(&cols, gd, &mut dw, (kc, rows, g.cout), true, false);
        let mut dcols = vec![T::zero(); rows * kc];
        gemm(gd, wd, &mut dcols, (rows, g.cout, kc), false, true);
        (g.col2im(&dcols), dw)
    } else if g.depthwise() {
        let c = g.cin;
        let mut dx = vec![T::zero(); xd.len()];
        let mut dw = vec![T::zero(); wd.len()];
        for bi in 0..g.b {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let o = ((bi * g.ho + oy) * g.wo + ox) * c;
                    let grow = &gd[o..o + c];
                    for ky in 0..g.k {
                        let Some(iy) = g.src(oy, ky, g.h) else {
                            continue;
                        };
                        for kx in 0..g.k {
                            let Some(ix) = g.src(ox, kx, g.w) else {
                                continue;
                            };
                            let s = ((bi * g.h + iy) * g.w + ix) * c;
                            let wo = (ky * g.k + kx) * c;
                            for ch in 0..c {
                                dx[s + ch] += grow[ch] * wd[wo + ch];
                                dw[wo + ch] += grow[ch] * xd[s + ch];
                            }
                        }
                    }
                }
            }
        }
        (dx, dw)
    } else {
        let mut dx = vec![T::zero(); xd.len()];
        let mut dw = vec![T::zero(); wd.len()];
        for bi in 0..g.b {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let o = ((bi * g.ho + oy) * g.wo + ox) * g.cout;
                    for co in 0..g.cout {
                        let gv = gd[o + co];
                        let grp = co / g.cout_g;
                        for ky in 0..g.k {
                            let Some(iy) = g.src(oy, ky, g.h) else {
                                continue;
                            };
                            for kx in 0..g.k {
                                let Some(ix) = g.src(ox, kx, g.w) else {
                                    continue;
                                };
                                let s = ((bi * g.h + iy) * g.w + ix) * g.cin + grp * g.cin_g;
                                for ci in 0..g.cin_g {
                                    let wi = ((ky * g.k + kx) * g.cin_g + ci) * g.cout + co;
                                    dx[s + ci] += gv * wd[wi];
                                    dw[wi] += gv * xd[s + ci];
                                }
                            }
                        }
                    }
                }
            }
        }
        (dx, dw)
    };
    (
        Tensor::new(x.shape(), dx).unwrap(),
        Tensor::new(w.shape(), dw).unwrap(),
        Tensor::new(&[g.cout], db).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// normalization

pub const LAYER_NORM_EPS: f64 = 1e-6;

pub(crate) struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

fn check_affine(x: &[usize], gamma: &[usize], beta: &[usize]) -> Result<usize> {
    let c = *x
        .last()
        .ok_or_else(|| Error::dim("layer_norm of a rank-0 tensor"))?;
    if gamma != [c] || beta != [c] {
        return Err(Error::dim(format!(
            "layer_norm affine params {} / {} do not match input {}",
            shape_str(gamma),
            shape_str(beta),
            shape_str(x)
        )));
    }
    Ok(c)
}

pub(crate) fn layer_norm_with_stats<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    if !(eps > 0.0) {
        return Err(Error::Contract(format!(
            "layer_norm eps must be > 0, got {eps}"
        )));
    }
    let c = check_affine(x.shape(), gamma.shape(), beta.shape())?;
    let rows = x.numel() / c;
    let inv_c = T::one() / T::of(c as f64);
    let eps = T::of(eps);
    let mut out = vec![T::zero(); x.numel()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for (row, o) in x.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let mu = row.iter().fold(T::zero(), |a, &v| a + v) * inv_c;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) * inv_c;
        let r = T::one() / (var + eps).sqrt();
        for (((ov, &xv), &gv), &bv) in o.iter_mut().zip(row).zip(gamma.data()).zip(beta.data()) {
            *ov = (xv - mu) * r * gv + bv;
        }
        mean.push(mu);
        rstd.push(r);
    }
    Ok((Tensor::new(x.shape(), out)?, NormStats { mean, rstd }))
}

/// Normalizes each position over the last axis, then applies `gamma`/`beta`.
pub fn layer_norm<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

/// `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.numel();
    let inv_c = T::one() / T::of(c as f64);
    let mut dx = vec![T::zero(); x.numel()];
    let mut dg = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    let mut xhat = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); c];
    for (r, ((row, grow), out)) in x
        .data()
        .chunks_exact(c)
        .zip(dy.data().chunks_exact(c))
        .zip(dx.chunks_exact_mut(c))
        .enumerate()
    {
        let (mu, rs) = (stats.mean[r], stats.rstd[r]);
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for i in 0..c {
            xhat[i] = (row[i] - mu) * rs;
            dxhat[i] = grow[i] * gamma.data()[i];
            dg[i] += grow[i] * xhat[i];
            db[i] += grow[i];
            sum_d += dxhat[i];
            sum_dx += dxhat[i] * xhat[i];
        }
        let (md, mdx) = (sum_d * inv_c, sum_dx * inv_c);
        for i in 0..c {
            out[i] = rs * (dxhat[i] - md - xhat[i] * mdx);
        }
    }
    (
        Tensor::new(x.shape(), dx).unwrap(),
        Tensor::new(&[c], dg).unwrap(),
        Tensor::new(&[c], db).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// activations

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub(crate) fn activate_scalar<T: Float>(x: T, kind: Activation) -> T {
    match kind {
        Activation::Silu => x * sigmoid(x),
        Activation::Gelu => {
            let xf = x.as_f64();
            T::of(xf * gauss_cdf(xf))
        }
    }
}

fn activation_derivative<T: Float>(x: T, kind: Activation) -> T {
    match kind {
        Activation::Silu => {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        }
        Activation::Gelu => {
            let xf = x.as_f64();
            T::of(gauss_cdf(xf) + xf * gauss_pdf(xf))
        }
    }
}

/// SiLU (`x * sigmoid(x)`) or exact GELU (`x * Phi(x)`).
pub fn activation<T: Float>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| activate_scalar(v, kind))
}

pub(crate) fn activation_backward<T: Float>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    kind: Activation,
) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &g)| g * activation_derivative(xv, kind))
        .collect();
    Tensor::new(x.shape(), data).unwrap()
}
