//! Library kernels against straightforward loop implementations.

use hatnet::attention::{
    grid_merge, grid_partition, hmhsa, hmhsa_global, hmhsa_local, mhsa, AttentionParams,
};
use hatnet::tensor::kernels::{
    avg_pool2d, conv2d, layer_norm, linear, matmul, softmax_rows, ConvSpec,
};
use hatnet::Tensor;
use proptest::prelude::*;
use rand::Rng;

mod common;
use common::*;

#[test]
fn matmul_and_linear_match_triple_loop() {
    let mut r = rng(1);
    for _ in 0..20 {
        let (m, k, n) = (r.gen_range(1..9), r.gen_range(1..9), r.gen_range(1..9));
        let a = randn(&[m, k], 1.0, &mut r);
        let b = randn(&[k, n], 1.0, &mut r);
        let want = naive_matmul(a.data(), b.data(), m, k, n);
        let got = matmul(&a, &b).unwrap();
        assert!(got.max_abs_diff(&Tensor::new(&[m, n], want.clone()).unwrap()) < 1e-12);
        let bias = randn(&[n], 1.0, &mut r);
        let lin = linear(&a, &b, Some(&bias)).unwrap();
        for i in 0..m {
            for j in 0..n {
                assert!((lin.at(&[i, j]) - want[i * n + j] - bias.data()[j]).abs() < 1e-12);
            }
        }
    }
}

fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: &Tensor<f64>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let [b, h, wd, _] = *x.shape() else { panic!() };
    let [k, _, cpg, cout] = *w.shape() else {
        panic!()
    };
    let (ho, wo) = (
        (h + 2 * pad - k) / stride + 1,
        (wd + 2 * pad - k) / stride + 1,
    );
    let opg = cout / groups;
    let mut out = Tensor::zeros(&[b, ho, wo, cout]);
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let grp = co / opg;
                    let mut s = bias.data()[co];
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = (
                                (oy * stride + ky) as isize - pad as isize,
                                (ox * stride + kx) as isize - pad as isize,
                            );
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cpg {
                                s += x.at(&[bi, iy as usize, ix as usize, grp * cpg + ci])
                                    * w.at(&[ky, kx, ci, co]);
                            }
                        }
                    }
                    out.set(&[bi, oy, ox, co], s);
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_loops() {
    let mut r = rng(2);
    for (k, stride, groups, cin, cout) in [
        (3, 1, 1, 3, 5),
        (3, 2, 1, 4, 6),
        (1, 1, 1, 5, 2),
        (5, 1, 6, 6, 6),
        (3, 2, 6, 6, 6),
        (3, 1, 2, 4, 6),
    ] {
        let x = randn(&[2, 7, 6, cin], 1.0, &mut r);
        let w = randn(&[k, k, cin / groups, cout], 1.0, &mut r);
        let b = randn(&[cout], 1.0, &mut r);
        let spec = ConvSpec::same(k, stride, groups);
        let got = conv2d(&x, &w, Some(&b), spec).unwrap();
        let want = naive_conv(&x, &w, &b, stride, k / 2, groups);
        assert_eq!(got.shape(), want.shape());
        assert!(
            got.max_abs_diff(&want) < 1e-12,
            "k={k} s={stride} g={groups}"
        );
    }
}

#[test]
fn layer_norm_matches_formula() {
    let mut r = rng(3);
    let x = randn(&[4, 7], 2.0, &mut r);
    let g = randn(&[7], 1.0, &mut r);
    let b = randn(&[7], 1.0, &mut r);
    let y = layer_norm(&x, &g, &b, 1e-6).unwrap();
    for row in 0..4 {
        let v: Vec<f64> = (0..7).map(|j| x.at(&[row, j])).collect();
        let mean = v.iter().sum::<f64>() / 7.0;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 7.0;
        for (j, vj) in v.iter().enumerate() {
            let want = (vj - mean) / (var + 1e-6).sqrt() * g.data()[j] + b.data()[j];
            assert!((y.at(&[row, j]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn full_grid_local_step_is_dense_attention() {
    let mut r = rng(4);
    for _ in 0..10 {
        let heads = r.gen_range(1..=3);
        let (h, w, c) = (4, 4, heads * r.gen_range(1..=3));
        let x = randn(&[1, h, w, c], 1.0, &mut r);
        let mut cfg = config(
            Case {
                b: 1,
                h,
                w,
                c,
                heads,
                g1: 4,
                g2: 1,
            },
            &mut r,
        );
        cfg.g1 = h;
        let got = hmhsa_local(&x, &cfg).unwrap();
        let toks = tokens_of(&x, 0);
        let dense = apply(&toks, &cfg.local, &toks, heads);
        let want: Vec<f64> = dense
            .iter()
            .zip(&toks)
            .flat_map(|(a, t)| a.iter().zip(t).map(|(p, q)| p + q))
            .collect();
        assert!(got.max_abs_diff(&Tensor::new(&[1, h, w, c], want).unwrap()) < 1e-5);
    }
}

#[test]
fn unpooled_global_step_is_dense_cross_attention() {
    let mut r = rng(5);
    for _ in 0..10 {
        let heads = r.gen_range(1..=3);
        let (h, w, c) = (3, 5, heads * 2);
        let a1 = randn(&[2, h, w, c], 1.0, &mut r);
        let cfg = config(
            Case {
                b: 2,
                h,
                w,
                c,
                heads,
                g1: 1,
                g2: 1,
            },
            &mut r,
        );
        let got = hmhsa_global(&a1, &cfg).unwrap();
        let mut want = Vec::new();
        for b in 0..2 {
            let t = tokens_of(&a1, b);
            want.extend(apply(&t, &cfg.global, &t, heads).into_iter().flatten());
        }
        assert!(got.max_abs_diff(&Tensor::new(&[2, h * w, c], want).unwrap()) < 1e-5);
    }
}

#[test]
fn dense_mhsa_matches_naive() {
    let mut r = rng(6);
    let (n, c, heads) = (6, 6, 3);
    let x = randn(&[2, n, c], 1.0, &mut r);
    let p = AttentionParams {
        qkv: qkv(c, &mut r),
        wp: randn(&[c, c], 0.3, &mut r),
        bp: None,
        num_heads: heads,
    };
    let got = mhsa(&x, &p).unwrap();
    let mut want = Vec::new();
    for b in 0..2 {
        let t: Tokens = x.data()[b * n * c..(b + 1) * n * c]
            .chunks(c)
            .map(<[f64]>::to_vec)
            .collect();
        let a = project(&apply(&t, &p.qkv, &t, heads), &p.wp);
        want.extend(
            a.iter()
                .zip(&t)
                .flat_map(|(o, i)| o.iter().zip(i).map(|(u, v)| u + v)),
        );
    }
    assert!(got.max_abs_diff(&Tensor::new(&[2, n, c], want).unwrap()) < 1e-10);
}

/// Random shapes, heads and grid sizes: every local output, global output
/// and fused unit output agrees with the coordinate-loop oracle.
#[test]
fn hierarchical_unit_matches_oracles_on_seeded_cases() {
    let mut r = rng(7);
    for case_no in 0..120 {
        let case = random_case(&mut r);
        let x = randn(&[case.b, case.h, case.w, case.c], 1.0, &mut r);
        let cfg = config(case, &mut r);

        let a1 = hmhsa_local(&x, &cfg).unwrap();
        let want_a1 = naive_local(&x, &cfg.local, case.g1, case.heads);
        assert!(a1.max_abs_diff(&want_a1) < 1e-5, "case {case_no}: {case:?}");

        let a2 = hmhsa_global(&a1, &cfg).unwrap();
        let want_a2 = naive_global(&want_a1, &cfg.global, case.g2, case.heads);
        assert!(a2.max_abs_diff(&want_a2) < 1e-5, "case {case_no}: {case:?}");

        let y = hmhsa(&x, &cfg).unwrap();
        let fused: Vec<f64> = want_a1
            .data()
            .iter()
            .zip(want_a2.data())
            .map(|(p, q)| p + q)
            .collect();
        let fused_toks: Tokens = fused.chunks(case.c).map(<[f64]>::to_vec).collect();
        let want_y: Vec<f64> = project(&fused_toks, &cfg.wp)
            .into_iter()
            .flatten()
            .zip(x.data())
            .map(|(p, xi)| p + xi)
            .collect();
        assert!(
            y.max_abs_diff(&Tensor::new(x.shape(), want_y).unwrap()) < 1e-5,
            "case {case_no}: {case:?}"
        );
    }
}

#[test]
fn pooling_matches_block_means() {
    let mut r = rng(8);
    for g in [1, 2, 3] {
        let x = randn(&[2, 6, 6, 3], 1.0, &mut r);
        assert!(avg_pool2d(&x, g).unwrap().max_abs_diff(&naive_pool(&x, g)) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn partition_round_trips(b in 1usize..3, nh in 1usize..4, nw in 1usize..4, g in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let x = Tensor::<f64>::randn(&[b, nh * g, nw * g, c], 1.0, &mut rng(seed));
        let p = grid_partition(&x, g).unwrap();
        prop_assert_eq!(p.shape(), &[b * nh * nw, g * g, c]);
        prop_assert_eq!(grid_merge(&p, g, nh * g, nw * g).unwrap(), x);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let x = Tensor::<f64>::randn(&[rows, cols], scale, &mut rng(seed));
        let p = softmax_rows(&x).unwrap();
        for row in p.data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_row_shifts(cols in 1usize..9, shift in -100.0f64..100.0, seed in any::<u64>()) {
        let x = Tensor::<f64>::randn(&[1, cols], 1.0, &mut rng(seed));
        let shifted = x.map(|v| v + shift);
        prop_assert!(softmax_rows(&x).unwrap().max_abs_diff(&softmax_rows(&shifted).unwrap()) < 1e-12);
    }

    #[test]
    fn pooling_preserves_the_mean(nh in 1usize..4, nw in 1usize..4, g in 1usize..4, seed in any::<u64>()) {
        let x = Tensor::<f64>::randn(&[1, nh * g, nw * g, 2], 1.0, &mut rng(seed));
        let p = avg_pool2d(&x, g).unwrap();
        let mean_x = x.sum() / x.numel() as f64;
        let mean_p = p.sum() / p.numel() as f64;
        prop_assert!((mean_x - mean_p).abs() < 1e-12);
    }

    #[test]
    fn pooling_a_constant_map_is_constant(h in 1usize..4, g in 1usize..4, v in -5.0f64..5.0) {
        let x = Tensor::<f64>::full(&[1, h * g, h * g, 3], v);
        let p = avg_pool2d(&x, g).unwrap();
        prop_assert!(p.data().iter().all(|&u| (u - v).abs() < 1e-12));
    }
}
