//! Coordinate-loop reference implementations shared by the test suites.
#![allow(dead_code)]

use hatnet::attention::{HmhsaConfig, QkvWeights};
use hatnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Tokens = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], std: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, std, r)
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub fn project(x: &Tokens, w: &Tensor<f64>) -> Tokens {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|t| {
            (0..cout)
                .map(|j| (0..cin).map(|i| t[i] * w.data()[i * cout + j]).sum())
                .collect()
        })
        .collect()
}

/// Multi-head scaled dot-product attention, one query at a time.
pub fn naive_attention(q: &Tokens, k: &Tokens, v: &Tokens, heads: usize) -> Tokens {
    let c = q[0].len();
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![vec![0.0; c]; q.len()];
    for h in 0..heads {
        let span = h * d..(h + 1) * d;
        for (qi, o) in q.iter().zip(&mut out) {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| span.clone().map(|ch| qi[ch] * kj[ch]).sum::<f64>() * scale)
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for ch in span.clone() {
                o[ch] = e.iter().zip(v).map(|(p, vj)| p / z * vj[ch]).sum();
            }
        }
    }
    out
}

pub fn tokens_of(x: &Tensor<f64>, b: usize) -> Tokens {
    let [_, h, w, c] = *x.shape() else { panic!() };
    x.data()[b * h * w * c..(b + 1) * h * w * c]
        .chunks(c)
        .map(<[f64]>::to_vec)
        .collect()
}

pub fn qkv(c: usize, r: &mut ChaCha8Rng) -> QkvWeights<f64> {
    QkvWeights::new(
        randn(&[c, c], 0.3, r),
        randn(&[c, c], 0.3, r),
        randn(&[c, c], 0.3, r),
    )
}

pub fn apply(x: &Tokens, w: &QkvWeights<f64>, kv: &Tokens, heads: usize) -> Tokens {
    naive_attention(
        &project(x, &w.wq),
        &project(kv, &w.wk),
        &project(kv, &w.wv),
        heads,
    )
}

/// Local step computed grid by grid from coordinates, plus the input.
pub fn naive_local(x: &Tensor<f64>, w: &QkvWeights<f64>, g: usize, heads: usize) -> Tensor<f64> {
    let [b, h, wd, c] = *x.shape() else { panic!() };
    let mut out = x.clone();
    for bi in 0..b {
        for gy in 0..h / g {
            for gx in 0..wd / g {
                let coords: Vec<(usize, usize)> = (0..g)
                    .flat_map(|dy| (0..g).map(move |dx| (gy * g + dy, gx * g + dx)))
                    .collect();
                let toks: Tokens = coords
                    .iter()
                    .map(|&(y, xx)| (0..c).map(|ch| x.at(&[bi, y, xx, ch])).collect())
                    .collect();
                let a = apply(&toks, w, &toks, heads);
                for (&(y, xx), row) in coords.iter().zip(a) {
                    for (ch, v) in row.into_iter().enumerate() {
                        let cur = out.at(&[bi, y, xx, ch]);
                        out.set(&[bi, y, xx, ch], cur + v);
                    }
                }
            }
        }
    }
    out
}

pub fn naive_pool(x: &Tensor<f64>, g: usize) -> Tensor<f64> {
    let [b, h, w, c] = *x.shape() else { panic!() };
    let mut out = Tensor::zeros(&[b, h / g, w / g, c]);
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let idx = [bi, y / g, xx / g, ch];
                    out.set(&idx, out.at(&idx) + x.at(&[bi, y, xx, ch]) / (g * g) as f64);
                }
            }
        }
    }
    out
}

/// Global step: all tokens of `a1` query keys/values of the pooled map.
pub fn naive_global(a1: &Tensor<f64>, w: &QkvWeights<f64>, g: usize, heads: usize) -> Tensor<f64> {
    let [b, h, wd, c] = *a1.shape() else { panic!() };
    let pooled = naive_pool(a1, g);
    let mut data = Vec::new();
    for bi in 0..b {
        let out = apply(&tokens_of(a1, bi), w, &tokens_of(&pooled, bi), heads);
        data.extend(out.into_iter().flatten());
    }
    Tensor::new(&[b, h * wd, c], data).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct Case {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub heads: usize,
    pub g1: usize,
    pub g2: usize,
}

pub fn random_case(r: &mut ChaCha8Rng) -> Case {
    let grids = [1usize, 2, 3, 4];
    let g1 = grids[r.gen_range(0..4)];
    let g2 = grids[r.gen_range(0..4)];
    let l = g1 * g2 / gcd(g1, g2);
    let heads = r.gen_range(1..=3);
    Case {
        b: r.gen_range(1..=2),
        h: l * r.gen_range(1..=2),
        w: l * r.gen_range(1..=2),
        c: heads * r.gen_range(1..=4),
        heads,
        g1,
        g2,
    }
}

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn config(case: Case, r: &mut ChaCha8Rng) -> HmhsaConfig<f64> {
    HmhsaConfig {
        g1: case.g1,
        g2: case.g2,
        num_heads: case.heads,
        local: qkv(case.c, r),
        global: qkv(case.c, r),
        wp: randn(&[case.c, case.c], 0.3, r),
        bp: None,
    }
}

/// The full unit: `(A1 + A2) Wp + x`, from the loop oracles.
pub fn naive_hmhsa(x: &Tensor<f64>, cfg: &HmhsaConfig<f64>) -> Tensor<f64> {
    let c = cfg.channels();
    let a1 = naive_local(x, &cfg.local, cfg.g1, cfg.num_heads);
    let a2 = naive_global(&a1, &cfg.global, cfg.g2, cfg.num_heads);
    let fused: Tokens = a1
        .data()
        .iter()
        .zip(a2.data())
        .map(|(p, q)| p + q)
        .collect::<Vec<_>>()
        .chunks(c)
        .map(<[f64]>::to_vec)
        .collect();
    let y = project(&fused, &cfg.wp)
        .into_iter()
        .flatten()
        .zip(x.data())
        .map(|(p, xi)| p + xi)
        .collect();
    Tensor::new(x.shape(), y).unwrap()
}
