use std::sync::Arc;

use super::kernels::{self, Activation, ConvGeom, ConvSpec, NormStats};
use super::{shape_str, Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Multiply-accumulate work done by one recorded product.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacEvent {
    pub label: String,
    pub macs: u64,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    Act(Var, Activation),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    AvgPool {
        x: Var,
        g: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    MeanSpatial(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
}

/// Ordered record of kernel applications. Values are kept so the tape can be
/// replayed backward from any scalar it produced.
pub struct GradTape<T> {
    nodes: Vec<Node<T>>,
    label: String,
    macs: Vec<MacEvent>,
}

impl<T: Float> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> GradTape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            label: String::new(),
            macs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Label attached to the MAC events of subsequent products.
    pub fn set_label(&mut self, label: impl Into<String>) {
        self.label = label.into();
    }

    pub fn mac_events(&self) -> &[MacEvent] {
        &self.macs
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.iter().map(|e| e.macs).sum()
    }

    fn count(&mut self, macs: u64) {
        self.macs.push(MacEvent {
            label: self.label.clone(),
            macs,
        });
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&mut self, value: Arc<Tensor<T>>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.push_shared(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product with optional transposition of either operand's
    /// trailing matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let out = kernels::batched_matmul(self.value(a), self.value(b), ta, tb)?;
        let d = kernels::matmul_dims(self.shape(a), self.shape(b), ta, tb)?;
        let batch: usize = d.batch.iter().product();
        self.count((batch * d.m * d.k * d.n) as u64);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let (rows, k, n) = kernels::linear_dims(self.shape(x), self.shape(w), None)?;
        self.count((rows * k * n) as u64);
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {} and {} differ",
                shape_str(self.shape(a)),
                shape_str(self.shape(b))
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| p + q)
            .collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| p * q)
            .collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(a))?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let out = kernels::activation(self.value(a), kind);
        self.push(out, Op::Act(a, kind))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, stats) = kernels::layer_norm_with_stats(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            eps,
        )?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let geom = ConvGeom::new(self.shape(x), self.shape(w), spec)?;
        self.count(geom.macs());
        Ok(self.push(out, Op::Conv { x, w, b, spec }))
    }

    pub fn avg_pool2d(&mut self, x: Var, g: usize) -> Result<Var> {
        let out = kernels::avg_pool2d(self.value(x), g)?;
        Ok(self.push(out, Op::AvgPool { x, g }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = Tensor::clone(self.value(x)).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let (shape, index) = permute_index(self.shape(x), axes)?;
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Gather { x, index }))
    }

    /// Mean over the two spatial axes of `[B,H,W,C]`, giving `[B,C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let [b, h, w, c] = *self.shape(x) else {
            return Err(Error::dim(format!(
                "global average pool expects [B,H,W,C], got {}",
                shape_str(self.shape(x))
            )));
        };
        let n = T::of((h * w) as f64);
        let mut out = vec![T::zero(); b * c];
        for (bi, img) in self.value(x).data().chunks_exact(h * w * c).enumerate() {
            let acc = &mut out[bi * c..(bi + 1) * c];
            for px in img.chunks_exact(c) {
                for (a, &v) in acc.iter_mut().zip(px) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= n);
        }
        let out = Tensor::new(&[b, c], out)?;
        Ok(self.push(out, Op::MeanSpatial(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::of(v.numel() as f64));
        self.push(out, Op::Mean(x))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [b, k] = *self.shape(logits) else {
            return Err(Error::dim(format!(
                "cross_entropy expects [B,K] logits, got {}",
                shape_str(self.shape(logits))
            )));
        };
        if labels.len() != b || labels.iter().any(|&l| l >= k) {
            return Err(Error::Contract(format!(
                "cross_entropy needs {b} labels in 0..{k}, got {labels:?}"
            )));
        }
        let probs = kernels::softmax_rows(self.value(logits))?.into_data();
        let mut loss = T::zero();
        for (row, &label) in probs.chunks_exact(k).zip(labels) {
            loss -= row[label].max(T::min_positive_value()).ln();
        }
        let out = Tensor::scalar(loss / T::of(b as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse pass from the scalar `loss`, visiting recorded kernels in
    /// exact reverse order of the forward pass.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(self.shape(loss))
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        let mut order = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            order.push(i);
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // C = op(A) op(B):  dop(A) = dC op(B)^T,  dop(B) = op(A)^T dC
                    let da = if *ta {
                        kernels::batched_matmul(bv, &g, *tb, true)?
                    } else {
                        kernels::batched_matmul(&g, bv, false, !*tb)?
                    };
                    let db = if *tb {
                        kernels::batched_matmul(&g, av, true, *ta)?
                    } else {
                        kernels::batched_matmul(av, &g, !*ta, false)?
                    };
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (rows, k, n) = kernels::linear_dims(xv.shape(), wv.shape(), None)?;
                    let mut dx = vec![T::zero(); rows * k];
                    kernels::gemm(g.data(), wv.data(), &mut dx, (rows, n, k), false, true);
                    let mut dw = vec![T::zero(); k * n];
                    kernels::gemm(xv.data(), g.data(), &mut dw, (k, rows, n), true, false);
                    if let Some(b) = b {
                        let mut db = vec![T::zero(); n];
                        for row in g.data().chunks_exact(n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::new(&[n], db)?);
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                    accumulate(&mut grads, *w, Tensor::new(wv.shape(), dw)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = zip_map(&g, bv, |gv, q| gv * q);
                    let db = zip_map(&g, av, |gv, p| gv * p);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|v| v * s));
                }
                Op::Softmax(a) => {
                    let dx = kernels::softmax_rows_backward(&node.value, &g);
                    accumulate(&mut grads, *a, dx);
                }
                Op::Act(a, kind) => {
                    let dx = kernels::activation_backward(self.value(*a), &g, *kind);
                    accumulate(&mut grads, *a, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    stats,
                } => {
                    let (dx, dg, db) =
                        kernels::layer_norm_backward(self.value(*x), self.value(*gamma), stats, &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, db);
                }
                Op::Conv { x, w, b, spec } => {
                    let (dx, dw, db) =
                        kernels::conv2d_backward(self.value(*x), self.value(*w), &g, *spec);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::AvgPool { x, g: k } => {
                    let dx = kernels::avg_pool2d_backward(&g, self.shape(*x), *k);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gather { x, index } => {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    let d = dx.data_mut();
                    for (&src, &v) in index.iter().zip(g.data()) {
                        d[src] += v;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Reshape(x) => {
                    let dx = g.reshape(self.shape(*x))?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanSpatial(x) => {
                    let shape = self.shape(*x);
                    let (h, w, c) = (shape[1], shape[2], shape[3]);
                    let n = T::of((h * w) as f64);
                    let mut dx = Vec::with_capacity(shape.iter().product());
                    for row in g.data().chunks_exact(c) {
                        for _ in 0..h * w {
                            dx.extend(row.iter().map(|&v| v / n));
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(shape, dx)?);
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *x, Tensor::full(self.shape(*x), gv));
                }
                Op::Mean(x) => {
                    let n = T::of(self.value(*x).numel() as f64);
                    let gv = g.data()[0] / n;
                    accumulate(&mut grads, *x, Tensor::full(self.shape(*x), gv));
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    labels,
                } => {
                    let k = self.shape(*logits)[1];
                    let scale = g.data()[0] / T::of(labels.len() as f64);
                    let mut dx = probs.clone();
                    for (row, &label) in dx.chunks_exact_mut(k).zip(labels) {
                        row[label] -= T::one();
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                    accumulate(&mut grads, *logits, Tensor::new(self.shape(*logits), dx)?);
                }
            }
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            order,
        })
    }
}

fn zip_map<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data).unwrap()
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, &x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Output shape and source offsets of an axis permutation.
pub(crate) fn permute_index(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let r = shape.len();
    let mut seen = vec![false; r];
    if axes.len() != r
        || axes
            .iter()
            .any(|&a| a >= r || std::mem::replace(&mut seen[a], true))
    {
        return Err(Error::dim(format!(
            "invalid permutation {axes:?} for shape {}",
            shape_str(shape)
        )));
    }
    let mut strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let mut counter = vec![0usize; r];
    let mut offset = 0usize;
    for _ in 0..n {
        index.push(offset);
        for ax in (0..r).rev() {
            counter[ax] += 1;
            offset += out_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= out_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    Ok((out_shape, index))
}

/// Result of [`GradTape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    order: Vec<usize>,
}

impl<T: Float> Gradients<T> {
    /// Gradient with respect to a leaf; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Tape positions in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.order
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x), Tensor::ones(&[3, 4]));
    }

    #[test]
    fn half_square_gradient_is_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xv = Tensor::<f64>::randn(&[5], 1.0, &mut rng);
        let mut tape = GradTape::new();
        let x = tape.leaf(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(x).max_abs_diff(&xv) < 1e-15);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = GradTape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let unused = tape.leaf(Tensor::ones(&[3, 3]));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(unused), Tensor::zeros(&[3, 3]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = GradTape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_visits_in_reverse_order() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2, 2]));
        let y = tape.activation(x, Activation::Silu);
        let z = tape.add(y, x).unwrap();
        let loss = tape.mean(z);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.visit_order(), &[3, 2, 1, 0]);
    }

    #[test]
    fn permutation_index_matches_manual_transpose() {
        let (shape, idx) = permute_index(&[2, 3], &[1, 0]).unwrap();
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(idx, vec![0, 3, 1, 4, 2, 5]);
        assert!(permute_index(&[2, 3], &[0, 0]).is_err());
    }
}
