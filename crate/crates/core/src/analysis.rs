//! Parameter and multiply-accumulate accounting.
//!
//! FLOPs here are multiply-accumulates of convolutions, fully connected
//! layers and attention products. Normalization, activations, softmax and
//! pooling are not counted.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, labels, HmhsaConfig, HmhsaTerms, MhsaTerms, QkvWeights};
use crate::error::Result;
use crate::network::{stage_name, AttentionKind, ModelConfig, ParamLayout};
use crate::tensor::{GradTape, MacEvent, Tensor};

/// Total learnable scalars of a configuration.
pub fn count_params(cfg: &ModelConfig) -> Result<u64> {
    Ok(ParamLayout::new(cfg)?.num_params() as u64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub layer: String,
    pub params: u64,
    pub flops: u128,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub input: (usize, usize),
    pub batch: usize,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn total_flops(&self) -> u128 {
        self.layers.iter().map(|l| l.flops).sum()
    }

    /// `layer,params,flops` rows followed by a `TOTAL` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,params,flops\n");
        for l in &self.layers {
            let _ = writeln!(out, "{},{},{}", l.layer, l.params, l.flops);
        }
        let _ = writeln!(out, "TOTAL,{},{}", self.total_params(), self.total_flops());
        out
    }

    /// Human-readable table with a totals line in M params and GFLOPs.
    pub fn to_table(&self) -> String {
        let width = self
            .layers
            .iter()
            .map(|l| l.layer.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = format!("{:<width$}  {:>12}  {:>16}\n", "layer", "params", "flops");
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:<width$}  {:>12}  {:>16}",
                l.layer, l.params, l.flops
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>12}  {:>16}\ninput {}x{}, batch {}: {:.3} M params, {:.3} GFLOPs",
            "TOTAL",
            self.total_params(),
            self.total_flops(),
            self.input.0,
            self.input.1,
            self.batch,
            self.total_params() as f64 / 1e6,
            self.total_flops() as f64 / 1e9,
        );
        out
    }
}

fn conv_macs(h_out: usize, w_out: usize, k: usize, cin: usize, cout: usize, groups: usize) -> u128 {
    (h_out * w_out) as u128 * (k * k) as u128 * (cin / groups) as u128 * cout as u128
}

/// Per-layer parameter and MAC counts for a `batch x h x w` input, walked
/// from the configuration without running the network.
pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize, batch: usize) -> Result<CostReport> {
    let sizes = cfg.stage_sizes(h, w)?;
    let layout = ParamLayout::new(cfg)?;
    let params_under = |prefix: &str| -> u64 {
        let p = format!("{prefix}.");
        layout
            .specs()
            .iter()
            .filter(|s| s.name.starts_with(&p))
            .map(|s| s.numel() as u64)
            .sum()
    };
    let b = batch.max(1) as u128;
    let mut layers = Vec::new();
    let mut push = |layer: String, flops: u128| {
        let params = params_under(&layer);
        layers.push(LayerCost {
            layer,
            params,
            flops: flops * b,
        });
    };

    let (mut ch, mut cw, mut cin) = (h, w, cfg.in_channels);
    let mut stem = 0;
    for s in &cfg.stem {
        ch /= s.stride;
        cw /= s.stride;
        stem += conv_macs(ch, cw, 3, cin, s.channels, 1);
        cin = s.channels;
    }
    push("stem".into(), stem);

    for (i, (s, &(sh, sw))) in cfg.stages.iter().zip(&sizes).enumerate() {
        let name = stage_name(i);
        if i > 0 {
            push(
                format!("{name}.downsample"),
                conv_macs(sh, sw, 3, cin, s.channels, 1),
            );
        }
        let (n, c) = ((sh * sw) as u128, s.channels as u128);
        let proj = n * c * c;
        let attn = match s.attention {
            AttentionKind::Hierarchical => {
                HmhsaTerms::new(sh as u64, sw as u64, c as u64, s.g1 as u64, s.g2 as u64)?.total()
            }
            AttentionKind::Dense => MhsaTerms::new(sh as u64, sw as u64, c as u64)?.total(),
        };
        let hidden = s.channels * s.expansion;
        let mlp =
            2 * n * c * hidden as u128 + conv_macs(sh, sw, s.dw_kernel, hidden, hidden, hidden);
        for j in 0..s.blocks {
            push(format!("{name}.block{j}.attn"), attn + proj);
            push(format!("{name}.block{j}.mlp"), mlp);
        }
        cin = s.channels;
    }
    push("head".into(), (cin * cfg.num_classes) as u128);

    // Block-level norms sit outside the `attn`/`mlp` prefixes; fold them in
    // so the per-layer params add up to the model total.
    let mut report = CostReport {
        input: (h, w),
        batch: batch.max(1),
        layers,
    };
    for l in &mut report.layers {
        if let Some(block) = l.layer.strip_suffix(".attn") {
            l.params += params_under(&format!("{block}.norm1"));
        } else if let Some(block) = l.layer.strip_suffix(".mlp") {
            l.params += params_under(&format!("{block}.norm2"));
        } else if l.layer == "head" {
            l.params += params_under("norm");
        }
    }
    Ok(report)
}

/// Measured versus closed-form MACs of one attention-unit shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reconciliation {
    /// Stages sharing this shape, e.g. `stage2`.
    pub stages: Vec<String>,
    pub kind: AttentionKind,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub g1: usize,
    pub g2: usize,
    /// MACs recorded on the tape under each label.
    pub measured: BTreeMap<String, u128>,
    /// Closed-form value of each label group.
    pub expected: BTreeMap<String, u128>,
}

impl Reconciliation {
    pub fn matches(&self) -> bool {
        self.measured == self.expected
    }

    /// Measured total without the output projection.
    pub fn measured_core(&self) -> u128 {
        self.measured
            .iter()
            .filter(|(k, _)| *k != labels::PROJ)
            .map(|(_, v)| v)
            .sum()
    }
}

fn group(events: &[MacEvent]) -> BTreeMap<String, u128> {
    let mut out = BTreeMap::new();
    for e in events {
        *out.entry(e.label.clone()).or_insert(0u128) += u128::from(e.macs);
    }
    out
}

/// Runs each distinct attention shape of the network once on a batch of
/// one and compares the instrumented MACs with the closed forms.
pub fn reconcile(cfg: &ModelConfig, h: usize, w: usize) -> Result<Vec<Reconciliation>> {
    let sizes = cfg.stage_sizes(h, w)?;
    let mut out: Vec<Reconciliation> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (i, (s, &(sh, sw))) in cfg.stages.iter().zip(&sizes).enumerate() {
        let key = (s.attention, sh, sw, s.channels, s.g1, s.g2);
        if let Some(r) = out
            .iter_mut()
            .find(|r| (r.kind, r.h, r.w, r.c, r.g1, r.g2) == key)
        {
            r.stages.push(stage_name(i));
            continue;
        }
        let c = s.channels;
        let heads = cfg.num_heads(i);
        let x = Tensor::<f32>::uniform(&[1, sh, sw, c], -1.0, 1.0, &mut rng);
        let mut qkv = || {
            QkvWeights::new(
                Tensor::randn(&[c, c], 0.02, &mut rng),
                Tensor::randn(&[c, c], 0.02, &mut rng),
                Tensor::randn(&[c, c], 0.02, &mut rng),
            )
        };
        let (nn, cc) = ((sh * sw) as u128, c as u128);
        let proj = nn * cc * cc;
        let (measured, expected, g1, g2) = match s.attention {
            AttentionKind::Hierarchical => {
                let hc = HmhsaConfig {
                    g1: s.g1,
                    g2: s.g2,
                    num_heads: heads,
                    local: qkv(),
                    global: qkv(),
                    wp: Tensor::randn(&[c, c], 0.02, &mut rng),
                    bp: None,
                };
                let (_, events) = attention::hmhsa_instrumented(&x, &hc)?;
                let t = HmhsaTerms::new(sh as u64, sw as u64, c as u64, s.g1 as u64, s.g2 as u64)?;
                let pooled = t.pooled_projections / 2;
                let expected = BTreeMap::from([
                    (labels::LOCAL_QKV.to_string(), 3 * t.projections / 4),
                    (labels::LOCAL_ATTN.to_string(), t.local_attention),
                    (labels::GLOBAL_Q.to_string(), t.projections / 4),
                    (labels::GLOBAL_KV.to_string(), 2 * pooled),
                    (labels::GLOBAL_ATTN.to_string(), t.global_attention),
                    (labels::PROJ.to_string(), proj),
                ]);
                (group(&events), expected, s.g1, s.g2)
            }
            AttentionKind::Dense => {
                let mut tape = GradTape::<f32>::new();
                let qw = qkv();
                let xv = tape.leaf(x.reshape(&[1, sh * sw, c])?);
                let vars = attention::MhsaVars {
                    qkv: attention::QkvVars {
                        wq: tape.leaf(qw.wq),
                        wk: tape.leaf(qw.wk),
                        wv: tape.leaf(qw.wv),
                        bq: None,
                        bk: None,
                        bv: None,
                    },
                    wp: tape.leaf(Tensor::randn(&[c, c], 0.02, &mut rng)),
                    bp: None,
                };
                attention::mhsa_on_tape(&mut tape, xv, xv, &vars, heads)?;
                let t = MhsaTerms::new(sh as u64, sw as u64, c as u64)?;
                let expected = BTreeMap::from([
                    (labels::QKV.to_string(), t.projections),
                    (labels::SCORES.to_string(), t.attention),
                    (labels::PROJ.to_string(), proj),
                ]);
                (group(tape.mac_events()), expected, 1, 1)
            }
        };
        out.push(Reconciliation {
            stages: vec![stage_name(i)],
            kind: s.attention,
            h: sh,
            w: sw,
            c,
            g1,
            g2,
            measured,
            expected,
        });
    }
    Ok(out)
}
