//! Dense multi-head self-attention and its hierarchical variant.
//!
//! The hierarchical unit runs in three steps on a `[B,H,W,C]` map:
//!
//! 1. attention inside each `g1 x g1` grid, plus the input (`A1`);
//! 2. every token of `A1` attends to `A1` average-pooled by `g2` (`A2`);
//! 3. `(A1 + A2) * Wp + x`.
//!
//! The grid sizes carry no weights, so the same parameters run under any
//! schedule whose sizes divide the feature map.

mod complexity;

use crate::error::{Error, Result};
use crate::tensor::kernels::check_grid;
use crate::tensor::{Float, GradTape, Tensor, Var};

pub use complexity::{complexity_hmhsa, complexity_mhsa, HmhsaTerms, MhsaTerms};

/// MAC-event labels used by the attention units. Everything except
/// [`labels::PROJ`] is part of the closed-form complexity.
pub mod labels {
    pub const QKV: &str = "attn.qkv";
    pub const SCORES: &str = "attn.scores";
    pub const LOCAL_QKV: &str = "attn.local.qkv";
    pub const LOCAL_ATTN: &str = "attn.local.attn";
    pub const GLOBAL_Q: &str = "attn.global.q";
    pub const GLOBAL_KV: &str = "attn.global.kv";
    pub const GLOBAL_ATTN: &str = "attn.global.attn";
    pub const PROJ: &str = "attn.proj";
}

/// Query/key/value projections, each `[C, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QkvWeights<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bq: Option<Tensor<T>>,
    pub bk: Option<Tensor<T>>,
    pub bv: Option<Tensor<T>>,
}

impl<T: Float> QkvWeights<T> {
    pub fn new(wq: Tensor<T>, wk: Tensor<T>, wv: Tensor<T>) -> Self {
        Self {
            wq,
            wk,
            wv,
            bq: None,
            bk: None,
            bv: None,
        }
    }

    fn validate(&self, c: usize, what: &str) -> Result<()> {
        for (name, w) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)] {
            if w.shape() != [c, c] {
                return Err(Error::dim(format!(
                    "{what}.{name} must be [{c}, {c}], got {:?}",
                    w.shape()
                )));
            }
        }
        for (name, b) in [("bq", &self.bq), ("bk", &self.bk), ("bv", &self.bv)] {
            if let Some(b) = b {
                if b.shape() != [c] {
                    return Err(Error::dim(format!(
                        "{what}.{name} must be [{c}], got {:?}",
                        b.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    fn bind(&self, tape: &mut GradTape<T>) -> QkvVars {
        QkvVars {
            wq: tape.leaf(self.wq.clone()),
            wk: tape.leaf(self.wk.clone()),
            wv: tape.leaf(self.wv.clone()),
            bq: self.bq.clone().map(|b| tape.leaf(b)),
            bk: self.bk.clone().map(|b| tape.leaf(b)),
            bv: self.bv.clone().map(|b| tape.leaf(b)),
        }
    }
}

/// Weights of a dense attention unit.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub qkv: QkvWeights<T>,
    pub wp: Tensor<T>,
    pub bp: Option<Tensor<T>>,
    pub num_heads: usize,
}

impl<T: Float> AttentionParams<T> {
    pub fn channels(&self) -> usize {
        self.wp.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let c = *self.wp.shape().first().unwrap_or(&0);
        validate_heads(c, self.num_heads)?;
        self.qkv.validate(c, "attention")?;
        validate_proj(&self.wp, self.bp.as_ref(), c)
    }
}

/// Weights and grid sizes of one hierarchical unit. A single `wp` serves
/// both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct HmhsaConfig<T> {
    pub g1: usize,
    pub g2: usize,
    pub num_heads: usize,
    pub local: QkvWeights<T>,
    pub global: QkvWeights<T>,
    pub wp: Tensor<T>,
    pub bp: Option<Tensor<T>>,
}

impl<T: Float> HmhsaConfig<T> {
    pub fn channels(&self) -> usize {
        self.wp.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let c = *self.wp.shape().first().unwrap_or(&0);
        validate_heads(c, self.num_heads)?;
        if self.g1 == 0 || self.g2 == 0 {
            return Err(Error::config("grid sizes must be positive"));
        }
        self.local.validate(c, "local")?;
        self.global.validate(c, "global")?;
        validate_proj(&self.wp, self.bp.as_ref(), c)
    }

    fn bind(&self, tape: &mut GradTape<T>) -> HmhsaVars {
        HmhsaVars {
            local: self.local.bind(tape),
            global: self.global.bind(tape),
            wp: tape.leaf(self.wp.clone()),
            bp: self.bp.clone().map(|b| tape.leaf(b)),
        }
    }
}

fn validate_heads(c: usize, heads: usize) -> Result<()> {
    if heads == 0 || c == 0 || !c.is_multiple_of(heads) {
        return Err(Error::config(format!(
            "{c} channels cannot be split into {heads} heads"
        )));
    }
    Ok(())
}

fn validate_proj<T: Float>(wp: &Tensor<T>, bp: Option<&Tensor<T>>, c: usize) -> Result<()> {
    if wp.shape() != [c, c] {
        return Err(Error::dim(format!(
            "wp must be [{c}, {c}], got {:?}",
            wp.shape()
        )));
    }
    if let Some(b) = bp {
        if b.shape() != [c] {
            return Err(Error::dim(format!("bp must be [{c}], got {:?}", b.shape())));
        }
    }
    Ok(())
}

/// Tape handles for a set of query/key/value projections.
#[derive(Debug, Clone, Copy)]
pub struct QkvVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bq: Option<Var>,
    pub bk: Option<Var>,
    pub bv: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct MhsaVars {
    pub qkv: QkvVars,
    pub wp: Var,
    pub bp: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct HmhsaVars {
    pub local: QkvVars,
    pub global: QkvVars,
    pub wp: Var,
    pub bp: Option<Var>,
}

/// Grid schedule and head count of a hierarchical unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HmhsaGeometry {
    pub g1: usize,
    pub g2: usize,
    pub num_heads: usize,
}

fn feature_map(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match *shape {
        [b, h, w, c] => Ok([b, h, w, c]),
        _ => Err(Error::dim(format!(
            "{what} expects [B,H,W,C], got {shape:?}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// grid partition

fn grid_axes() -> [usize; 6] {
    [0, 1, 3, 2, 4, 5]
}

/// `[B,H,W,C] -> [B*(H/g)*(W/g), g*g, C]`; grids in row-major order, tokens
/// row-major inside each grid.
pub fn grid_partition<T: Float>(x: &Tensor<T>, g: usize) -> Result<Tensor<T>> {
    let [b, h, w, c] = feature_map(x.shape(), "grid_partition")?;
    check_grid("grid_partition", h, w, g)?;
    let (nh, nw) = (h / g, w / g);
    let (_, index) = crate::tensor::permute_index(&[b, nh, g, nw, g, c], &grid_axes())?;
    let data = index.iter().map(|&i| x.data()[i]).collect();
    Tensor::new(&[b * nh * nw, g * g, c], data)
}

/// Inverse of [`grid_partition`].
pub fn grid_merge<T: Float>(t: &Tensor<T>, g: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let [bg, gg, c] = *t.shape() else {
        return Err(Error::dim(format!(
            "grid_merge expects [B*nGrids, g*g, C], got {:?}",
            t.shape()
        )));
    };
    check_grid("grid_merge", h, w, g)?;
    let (nh, nw) = (h / g, w / g);
    if gg != g * g || bg % (nh * nw) != 0 {
        return Err(Error::dim(format!(
            "grid_merge: {:?} is not a partition of a {h}x{w} map into {g}x{g} grids ({} grids per image)",
            t.shape(),
            nh * nw
        )));
    }
    let b = bg / (nh * nw);
    let (_, index) = crate::tensor::permute_index(&[b, nh, nw, g, g, c], &grid_axes())?;
    let data = index.iter().map(|&i| t.data()[i]).collect();
    Tensor::new(&[b, h, w, c], data)
}

fn grid_partition_var<T: Float>(tape: &mut GradTape<T>, x: Var, g: usize) -> Result<Var> {
    let [b, h, w, c] = feature_map(tape.shape(x), "grid_partition")?;
    check_grid("grid_partition", h, w, g)?;
    let (nh, nw) = (h / g, w / g);
    let r = tape.reshape(x, &[b, nh, g, nw, g, c])?;
    let p = tape.permute(r, &grid_axes())?;
    tape.reshape(p, &[b * nh * nw, g * g, c])
}

fn grid_merge_var<T: Float>(
    tape: &mut GradTape<T>,
    t: Var,
    g: usize,
    b: usize,
    h: usize,
    w: usize,
) -> Result<Var> {
    let c = tape.shape(t)[2];
    let (nh, nw) = (h / g, w / g);
    let r = tape.reshape(t, &[b, nh, nw, g, g, c])?;
    let p = tape.permute(r, &grid_axes())?;
    tape.reshape(p, &[b, h, w, c])
}

// ---------------------------------------------------------------------------
// attention on the tape

fn project<T: Float>(tape: &mut GradTape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    tape.linear(x, w, b)
}

fn split_heads<T: Float>(tape: &mut GradTape<T>, x: Var, heads: usize) -> Result<Var> {
    let [g, n, c] = *tape.shape(x) else {
        unreachable!("tokens are rank 3")
    };
    let r = tape.reshape(x, &[g, n, heads, c / heads])?;
    if heads == 1 {
        return tape.reshape(r, &[g, 1, n, c]);
    }
    tape.permute(r, &[0, 2, 1, 3])
}

fn merge_heads<T: Float>(tape: &mut GradTape<T>, x: Var) -> Result<Var> {
    let [g, heads, n, d] = *tape.shape(x) else {
        unreachable!("heads are rank 4")
    };
    let p = if heads == 1 {
        x
    } else {
        tape.permute(x, &[0, 2, 1, 3])?
    };
    tape.reshape(p, &[g, n, heads * d])
}

/// `softmax(Q K^T / sqrt(d)) V` per head over `[G, N, C]` token groups;
/// keys/values may hold a different token count than queries.
pub fn attend<T: Float>(
    tape: &mut GradTape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let c = tape.shape(q)[2];
    validate_heads(c, heads)?;
    let d = c / heads;
    let (qh, kh, vh) = (
        split_heads(tape, q, heads)?,
        split_heads(tape, k, heads)?,
        split_heads(tape, v, heads)?,
    );
    let scores = tape.matmul_t(qh, kh, false, true)?;
    let scaled = tape.scale(scores, T::of(1.0 / (d as f64).sqrt()));
    let probs = tape.softmax_rows(scaled)?;
    let out = tape.matmul(probs, vh)?;
    merge_heads(tape, out)
}

fn tokens<T: Float>(tape: &mut GradTape<T>, x: Var, what: &str) -> Result<[usize; 3]> {
    match *tape.shape(x) {
        [b, n, c] => Ok([b, n, c]),
        ref s => Err(Error::dim(format!(
            "{what} expects [B,N,C] tokens, got {s:?}"
        ))),
    }
}

/// Dense unit on `[B,N,C]` tokens: `softmax(QK^T/sqrt(d))V * Wp + residual`.
pub fn mhsa_on_tape<T: Float>(
    tape: &mut GradTape<T>,
    x: Var,
    residual: Var,
    vars: &MhsaVars,
    heads: usize,
) -> Result<Var> {
    tokens(tape, x, "mhsa")?;
    tape.set_label(labels::QKV);
    let q = project(tape, x, vars.qkv.wq, vars.qkv.bq)?;
    let k = project(tape, x, vars.qkv.wk, vars.qkv.bk)?;
    let v = project(tape, x, vars.qkv.wv, vars.qkv.bv)?;
    tape.set_label(labels::SCORES);
    let a = attend(tape, q, k, v, heads)?;
    tape.set_label(labels::PROJ);
    let p = project(tape, a, vars.wp, vars.bp)?;
    tape.set_label("");
    tape.add(p, residual)
}

/// Local step: attention within each `g1 x g1` grid, merged back, plus `x`.
pub fn hmhsa_local_on_tape<T: Float>(
    tape: &mut GradTape<T>,
    x: Var,
    local: &QkvVars,
    g1: usize,
    heads: usize,
) -> Result<Var> {
    let [b, h, w, _] = feature_map(tape.shape(x), "hmhsa_local")?;
    check_grid("hmhsa local grid (g1)", h, w, g1)?;
    let grids = grid_partition_var(tape, x, g1)?;
    tape.set_label(labels::LOCAL_QKV);
    let q = project(tape, grids, local.wq, local.bq)?;
    let k = project(tape, grids, local.wk, local.bk)?;
    let v = project(tape, grids, local.wv, local.bv)?;
    tape.set_label(labels::LOCAL_ATTN);
    let a = attend(tape, q, k, v, heads)?;
    tape.set_label("");
    let merged = grid_merge_var(tape, a, g1, b, h, w)?;
    tape.add(merged, x)
}

/// Global step: every token of `a1` queries keys/values computed from `a1`
/// average-pooled by `g2`. Returns `[B, H*W, C]`.
pub fn hmhsa_global_on_tape<T: Float>(
    tape: &mut GradTape<T>,
    a1: Var,
    global: &QkvVars,
    g2: usize,
    heads: usize,
) -> Result<Var> {
    let [b, h, w, c] = feature_map(tape.shape(a1), "hmhsa_global")?;
    check_grid("hmhsa pooling (g2)", h, w, g2)?;
    let pooled = tape.avg_pool2d(a1, g2)?;
    let pooled = tape.reshape(pooled, &[b, (h / g2) * (w / g2), c])?;
    let toks = tape.reshape(a1, &[b, h * w, c])?;
    tape.set_label(labels::GLOBAL_Q);
    let q = project(tape, toks, global.wq, global.bq)?;
    tape.set_label(labels::GLOBAL_KV);
    let k = project(tape, pooled, global.wk, global.bk)?;
    let v = project(tape, pooled, global.wv, global.bv)?;
    tape.set_label(labels::GLOBAL_ATTN);
    let a = attend(tape, q, k, v, heads)?;
    tape.set_label("");
    Ok(a)
}

/// Full hierarchical unit: `(A1 + A2) * Wp + residual`, where `A1`/`A2` are
/// computed from `x`. Plain use passes `residual == x`; a pre-norm block
/// passes the normalized map as `x` and the block input as `residual`.
pub fn hmhsa_on_tape<T: Float>(
    tape: &mut GradTape<T>,
    x: Var,
    residual: Var,
    vars: &HmhsaVars,
    geom: HmhsaGeometry,
) -> Result<Var> {
    let [b, h, w, c] = feature_map(tape.shape(x), "hmhsa")?;
    check_grid("hmhsa local grid (g1)", h, w, geom.g1)?;
    check_grid("hmhsa pooling (g2)", h, w, geom.g2)?;
    let a1 = hmhsa_local_on_tape(tape, x, &vars.local, geom.g1, geom.num_heads)?;
    let a2 = hmhsa_global_on_tape(tape, a1, &vars.global, geom.g2, geom.num_heads)?;
    let a2 = tape.reshape(a2, &[b, h, w, c])?;
    let fused = tape.add(a1, a2)?;
    tape.set_label(labels::PROJ);
    let p = project(tape, fused, vars.wp, vars.bp)?;
    tape.set_label("");
    tape.add(p, residual)
}

// ---------------------------------------------------------------------------
// tensor-level entry points

/// Dense multi-head self-attention with output projection and residual.
pub fn mhsa<T: Float>(x: &Tensor<T>, p: &AttentionParams<T>) -> Result<Tensor<T>> {
    p.validate()?;
    let mut tape = GradTape::new();
    let xv = tape.leaf(x.clone());
    let vars = MhsaVars {
        qkv: p.qkv.bind(&mut tape),
        wp: tape.leaf(p.wp.clone()),
        bp: p.bp.clone().map(|b| tape.leaf(b)),
    };
    let out = mhsa_on_tape(&mut tape, xv, xv, &vars, p.num_heads)?;
    Ok(tape.value(out).clone())
}

/// `A1`: grid-local attention (no output projection) plus the input.
pub fn hmhsa_local<T: Float>(x: &Tensor<T>, cfg: &HmhsaConfig<T>) -> Result<Tensor<T>> {
    cfg.validate()?;
    let mut tape = GradTape::new();
    let xv = tape.leaf(x.clone());
    let local = cfg.local.bind(&mut tape);
    let out = hmhsa_local_on_tape(&mut tape, xv, &local, cfg.g1, cfg.num_heads)?;
    Ok(tape.value(out).clone())
}

/// `A2` as `[B, H*W, C]`, from an `A1` feature map.
pub fn hmhsa_global<T: Float>(a1: &Tensor<T>, cfg: &HmhsaConfig<T>) -> Result<Tensor<T>> {
    cfg.validate()?;
    let mut tape = GradTape::new();
    let av = tape.leaf(a1.clone());
    let global = cfg.global.bind(&mut tape);
    let out = hmhsa_global_on_tape(&mut tape, av, &global, cfg.g2, cfg.num_heads)?;
    Ok(tape.value(out).clone())
}

/// The hierarchical unit on a `[B,H,W,C]` map; output has the input's shape.
pub fn hmhsa<T: Float>(x: &Tensor<T>, cfg: &HmhsaConfig<T>) -> Result<Tensor<T>> {
    hmhsa_instrumented(x, cfg).map(|(y, _)| y)
}

/// Like [`hmhsa`], also returning the tape's multiply-accumulate events.
pub fn hmhsa_instrumented<T: Float>(
    x: &Tensor<T>,
    cfg: &HmhsaConfig<T>,
) -> Result<(Tensor<T>, Vec<crate::tensor::MacEvent>)> {
    cfg.validate()?;
    let mut tape = GradTape::new();
    let xv = tape.leaf(x.clone());
    let vars = cfg.bind(&mut tape);
    let geom = HmhsaGeometry {
        g1: cfg.g1,
        g2: cfg.g2,
        num_heads: cfg.num_heads,
    };
    let out = hmhsa_on_tape(&mut tape, xv, xv, &vars, geom)?;
    Ok((tape.value(out).clone(), tape.mac_events().to_vec()))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_qkv(c: usize, rng: &mut ChaCha8Rng) -> QkvWeights<f64> {
        QkvWeights::new(
            Tensor::randn(&[c, c], 0.5, rng),
            Tensor::randn(&[c, c], 0.5, rng),
            Tensor::randn(&[c, c], 0.5, rng),
        )
    }

    fn random_cfg(c: usize, heads: usize, g1: usize, g2: usize, seed: u64) -> HmhsaConfig<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HmhsaConfig {
            g1,
            g2,
            num_heads: heads,
            local: random_qkv(c, &mut rng),
            global: random_qkv(c, &mut rng),
            wp: Tensor::randn(&[c, c], 0.5, &mut rng),
            bp: None,
        }
    }

    #[test]
    fn partition_orders_grids_and_tokens_row_major() {
        let x = Tensor::<f64>::new(&[1, 4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
        let p = grid_partition(&x, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4, 1]);
        // (0,0),(0,1),(1,0),(1,1) -> flat 0,1,4,5
        assert_eq!(&p.data()[..4], &[0., 1., 4., 5.]);
        assert_eq!(&p.data()[4..8], &[2., 3., 6., 7.]);
        let whole = grid_partition(&x, 4).unwrap();
        assert_eq!(whole.shape(), &[1, 16, 1]);
        assert_eq!(whole.data(), x.data());
    }

    #[test]
    fn merge_inverts_partition_and_g1_is_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f32>::randn(&[2, 6, 4, 3], 1.0, &mut rng);
        assert_eq!(
            grid_merge(&grid_partition(&x, 2).unwrap(), 2, 6, 4).unwrap(),
            x
        );
        let p1 = grid_partition(&x, 1).unwrap();
        assert_eq!(p1.data(), x.data());
        assert_eq!(grid_merge(&p1, 1, 6, 4).unwrap(), x);
    }

    #[test]
    fn partition_and_merge_errors() {
        let x = Tensor::<f32>::zeros(&[1, 6, 4, 2]);
        assert!(matches!(
            grid_partition(&x, 4),
            Err(Error::Divisibility {
                h: 6,
                w: 4,
                g: 4,
                ..
            })
        ));
        let t = Tensor::<f32>::zeros(&[3, 4, 2]);
        assert!(matches!(grid_merge(&t, 2, 4, 4), Err(Error::Dimension(_))));
    }

    #[test]
    fn single_token_identity_attention_doubles_input() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 3], &[0.5, -1.0, 2.0]).unwrap();
        let p = AttentionParams {
            qkv: QkvWeights::new(Tensor::eye(3), Tensor::eye(3), Tensor::eye(3)),
            wp: Tensor::eye(3),
            bp: None,
            num_heads: 1,
        };
        let y = mhsa(&x, &p).unwrap();
        assert_eq!(y.data(), &[1.0, -2.0, 4.0]);
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let row = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
        let x = Tensor::new(&[1, 5, 4], row.data().repeat(5)).unwrap();
        let p = AttentionParams {
            qkv: random_qkv(4, &mut rng),
            wp: Tensor::randn(&[4, 4], 0.5, &mut rng),
            bp: None,
            num_heads: 2,
        };
        let y = mhsa(&x, &p).unwrap();
        for t in 1..5 {
            assert_eq!(&y.data()[t * 4..t * 4 + 4], &y.data()[..4]);
        }
    }

    #[test]
    fn mhsa_rejects_bad_head_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = AttentionParams {
            qkv: random_qkv(6, &mut rng),
            wp: Tensor::eye(6),
            bp: None,
            num_heads: 4,
        };
        assert!(matches!(
            mhsa(&Tensor::zeros(&[1, 2, 6]), &p),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_value_path_leaves_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cfg = random_cfg(4, 2, 2, 2, 5);
        cfg.local.wv = Tensor::zeros(&[4, 4]);
        let x = Tensor::<f64>::randn(&[1, 4, 4, 4], 1.0, &mut rng);
        assert_eq!(hmhsa_local(&x, &cfg).unwrap(), x);
    }

    #[test]
    fn zero_projection_returns_input_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cfg = random_cfg(8, 2, 2, 2, 6);
        cfg.wp = Tensor::zeros(&[8, 8]);
        let x = Tensor::<f64>::randn(&[2, 4, 6, 8], 1.0, &mut rng);
        assert_eq!(hmhsa(&x, &cfg).unwrap(), x);
    }

    #[test]
    fn constant_map_gives_uniform_global_rows() {
        let cfg = random_cfg(4, 1, 2, 2, 7);
        let a1 = Tensor::<f64>::from_f64(&[1, 4, 4, 4], &[0.3, -0.2, 0.9, 0.1].repeat(16)).unwrap();
        let a2 = hmhsa_global(&a1, &cfg).unwrap();
        for t in 1..16 {
            for c in 0..4 {
                assert!((a2.at(&[0, t, c]) - a2.at(&[0, 0, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hmhsa_preserves_shape_and_checks_grids() {
        let cfg = random_cfg(4, 2, 2, 4, 8);
        let x = Tensor::<f32>::zeros(&[1, 8, 4, 4]).cast::<f64>();
        assert_eq!(hmhsa(&x, &cfg).unwrap().shape(), x.shape());
        let bad = Tensor::<f64>::zeros(&[1, 6, 6, 4]);
        assert!(matches!(
            hmhsa(&bad, &cfg),
            Err(Error::Divisibility { g: 4, .. })
        ));
    }
}
