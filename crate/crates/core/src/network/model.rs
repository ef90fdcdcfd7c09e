use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{stage_name, AttentionKind, ModelConfig, StageConfig};
use crate::attention::{self, HmhsaGeometry, HmhsaVars, MhsaVars, QkvVars};
use crate::error::{Error, Result};
use crate::tensor::kernels::{ConvSpec, LAYER_NORM_EPS};
use crate::tensor::{Float, GradTape, Tensor, Var};

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Truncated normal, std 0.02, cut at two standard deviations.
    Linear,
    /// Normal with std `sqrt(2 / fan_out)`, `fan_out = K*K*Cout/groups`.
    Conv { fan_out: usize },
    /// Ones (layer-norm scale).
    Ones,
    /// Zeros (biases and layer-norm shift).
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvNorm {
    w: usize,
    b: usize,
    norm: Norm,
    kernel: usize,
    stride: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Qkv {
    q: Dense,
    k: Dense,
    v: Dense,
}

#[derive(Debug, Clone, Copy)]
enum AttnPlan {
    Hierarchical { local: Qkv, global: Qkv, wp: usize },
    Dense { qkv: Qkv, wp: usize },
}

#[derive(Debug, Clone, Copy)]
struct BlockPlan {
    norm1: Norm,
    attn: AttnPlan,
    norm2: Norm,
    fc1: Dense,
    dw: Dense,
    fc2: Dense,
}

#[derive(Debug, Clone)]
struct StagePlan {
    downsample: Option<ConvNorm>,
    blocks: Vec<BlockPlan>,
}

#[derive(Debug, Clone)]
struct Plan {
    stem: [ConvNorm; 2],
    stages: Vec<StagePlan>,
    norm: Norm,
    head: Dense,
}

/// Ordered parameter names and shapes of a configuration, plus the index
/// plan the forward pass uses.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    plan: Plan,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) -> usize {
        self.specs.push(ParamSpec { name, shape, kind });
        self.specs.len() - 1
    }

    fn norm(&mut self, prefix: &str, c: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{prefix}.gamma"), vec![c], ParamKind::Ones),
            beta: self.add(format!("{prefix}.beta"), vec![c], ParamKind::Zeros),
        }
    }

    fn linear(&mut self, prefix: &str, cin: usize, cout: usize, bias: bool) -> Dense {
        let w = self.add(
            format!("{prefix}.weight"),
            vec![cin, cout],
            ParamKind::Linear,
        );
        let b = bias.then(|| self.add(format!("{prefix}.bias"), vec![cout], ParamKind::Zeros));
        Dense { w, b }
    }

    fn conv(
        &mut self,
        prefix: &str,
        k: usize,
        cin_per_group: usize,
        cout: usize,
        groups: usize,
    ) -> Dense {
        let fan_out = k * k * cout / groups;
        let w = self.add(
            format!("{prefix}.weight"),
            vec![k, k, cin_per_group, cout],
            ParamKind::Conv { fan_out },
        );
        let b = Some(self.add(format!("{prefix}.bias"), vec![cout], ParamKind::Zeros));
        Dense { w, b }
    }

    fn conv_norm(
        &mut self,
        conv: &str,
        norm: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> ConvNorm {
        let d = self.conv(conv, 3, cin, cout, 1);
        ConvNorm {
            w: d.w,
            b: d.b.expect("convs carry a bias"),
            norm: self.norm(norm, cout),
            kernel: 3,
            stride,
        }
    }

    // Attention projections are `[C, C]`; the weight name has no `.weight`
    // suffix so that `attn.local.wq` reads like the math.
    fn qkv(&mut self, prefix: &str, c: usize, bias: bool) -> Qkv {
        let mut one = |n: &str| Dense {
            w: self.add(format!("{prefix}.w{n}"), vec![c, c], ParamKind::Linear),
            b: bias.then(|| self.add(format!("{prefix}.b{n}"), vec![c], ParamKind::Zeros)),
        };
        Qkv {
            q: one("q"),
            k: one("k"),
            v: one("v"),
        }
    }

    fn block(&mut self, prefix: &str, s: &StageConfig, qkv_bias: bool) -> BlockPlan {
        let c = s.channels;
        let norm1 = self.norm(&format!("{prefix}.norm1"), c);
        let attn = match s.attention {
            AttentionKind::Hierarchical => {
                let local = self.qkv(&format!("{prefix}.attn.local"), c, qkv_bias);
                let global = self.qkv(&format!("{prefix}.attn.global"), c, qkv_bias);
                let wp = self.add(format!("{prefix}.attn.wp"), vec![c, c], ParamKind::Linear);
                AttnPlan::Hierarchical { local, global, wp }
            }
            AttentionKind::Dense => {
                let qkv = self.qkv(&format!("{prefix}.attn"), c, qkv_bias);
                let wp = self.add(format!("{prefix}.attn.wp"), vec![c, c], ParamKind::Linear);
                AttnPlan::Dense { qkv, wp }
            }
        };
        let norm2 = self.norm(&format!("{prefix}.norm2"), c);
        let hidden = c * s.expansion;
        let fc1 = self.linear(&format!("{prefix}.mlp.fc1"), c, hidden, true);
        let dw = self.conv(&format!("{prefix}.mlp.dw"), s.dw_kernel, 1, hidden, hidden);
        let fc2 = self.linear(&format!("{prefix}.mlp.fc2"), hidden, c, true);
        BlockPlan {
            norm1,
            attn,
            norm2,
            fc1,
            dw,
            fc2,
        }
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { specs: Vec::new() };
        let [s0, s1] = cfg.stem;
        let stem = [
            b.conv_norm(
                "stem.conv0",
                "stem.norm0",
                cfg.in_channels,
                s0.channels,
                s0.stride,
            ),
            b.conv_norm(
                "stem.conv1",
                "stem.norm1",
                s0.channels,
                s1.channels,
                s1.stride,
            ),
        ];
        let mut cin = s1.channels;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for (i, s) in cfg.stages.iter().enumerate() {
            let name = stage_name(i);
            let downsample = (i > 0).then(|| {
                b.conv_norm(
                    &format!("{name}.downsample.conv"),
                    &format!("{name}.downsample.norm"),
                    cin,
                    s.channels,
                    2,
                )
            });
            // Stage 2 takes the stem output directly; a width change there
            // would need a projection, so it is rejected instead.
            if i == 0 && cin != s.channels {
                return Err(Error::config(format!(
                    "stem ends with {cin} channels but {name} expects {}",
                    s.channels
                )));
            }
            let blocks = (0..s.blocks)
                .map(|j| b.block(&format!("{name}.block{j}"), s, cfg.qkv_bias))
                .collect();
            stages.push(StagePlan { downsample, blocks });
            cin = s.channels;
        }
        let norm = b.norm("norm", cin);
        let head = b.linear("head", cin, cfg.num_classes, true);
        Ok(Self {
            specs: b.specs,
            plan: Plan {
                stem,
                stages,
                norm,
                head,
            },
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }
}

fn init_tensor<T: Float>(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = spec.numel();
    let data: Vec<T> = match spec.kind {
        ParamKind::Ones => vec![T::one(); n],
        ParamKind::Zeros => vec![T::zero(); n],
        ParamKind::Linear => (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break T::of(0.02 * z);
                }
            })
            .collect(),
        ParamKind::Conv { fan_out } => {
            let std = (2.0 / fan_out as f64).sqrt();
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    T::of(std * z)
                })
                .collect()
        }
    };
    Tensor::new(&spec.shape, data).expect("layout shapes are non-empty")
}

/// Handles of a forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub logits: Var,
    /// Output of each transformer stage, `[B,H,W,C]`.
    pub stages: Vec<Var>,
}

/// Loss, parameter gradients (layout order) and logits of one batch.
#[derive(Debug, Clone)]
pub struct LossAndGrads<T> {
    pub loss: T,
    pub grads: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
}

/// A configured network with its parameters.
///
/// Parameters live behind `Arc`, so cloning a model or binding it to a tape
/// does not copy weights.
#[derive(Debug, Clone)]
pub struct Model<T> {
    cfg: ModelConfig,
    layout: Arc<ParamLayout>,
    params: Vec<Arc<Tensor<T>>>,
}

impl<T: Float> Model<T> {
    /// Builds the network and draws its initial parameters from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let layout = ParamLayout::new(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .specs
            .iter()
            .map(|s| Arc::new(init_tensor(s, &mut rng)))
            .collect();
        Ok(Self {
            cfg,
            layout: Arc::new(layout),
            params,
        })
    }

    /// Wraps existing parameters, given in layout order.
    pub fn from_params(cfg: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        let layout = ParamLayout::new(&cfg)?;
        if params.len() != layout.len() {
            return Err(Error::Contract(format!(
                "configuration has {} parameter tensors, {} given",
                layout.len(),
                params.len()
            )));
        }
        for (spec, p) in layout.specs.iter().zip(&params) {
            if p.shape() != spec.shape.as_slice() {
                return Err(Error::dim(format!(
                    "{} must be {:?}, got {:?}",
                    spec.name,
                    spec.shape,
                    p.shape()
                )));
            }
        }
        Ok(Self {
            cfg,
            layout: Arc::new(layout),
            params: params.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[Arc<Tensor<T>>] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.num_params()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.layout.index_of(name).map(|i| self.params[i].as_ref())
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = self
            .layout
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        self.set_param_at(i, value)
    }

    pub fn set_param_at(&mut self, index: usize, value: Tensor<T>) -> Result<()> {
        let spec = &self.layout.specs[index];
        if value.shape() != spec.shape.as_slice() {
            return Err(Error::dim(format!(
                "{} must be {:?}, got {:?}",
                spec.name,
                spec.shape,
                value.shape()
            )));
        }
        self.params[index] = Arc::new(value);
        Ok(())
    }

    /// Mutable access for in-place optimizer updates; copies a tensor only
    /// if it is shared with another model.
    pub fn param_mut(&mut self, index: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[index])
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            layout: Arc::clone(&self.layout),
            params: self.params.iter().map(|p| Arc::new(p.cast())).collect(),
        }
    }

    /// Same weights under a different grid schedule. Only the grid sizes
    /// may differ from the current configuration.
    pub fn with_config(&self, cfg: ModelConfig) -> Result<Self> {
        let layout = ParamLayout::new(&cfg)?;
        if layout.specs != self.layout.specs {
            return Err(Error::config(
                "new configuration changes the parameter layout; only grid sizes may differ",
            ));
        }
        Ok(Self {
            cfg,
            layout: Arc::new(layout),
            params: self.params.clone(),
        })
    }

    pub fn with_grids(&self, g1: &[usize], g2: &[usize]) -> Result<Self> {
        self.with_config(self.cfg.with_grids(g1, g2)?)
    }

    /// Puts every parameter on the tape as a leaf, in layout order.
    pub fn bind(&self, tape: &mut GradTape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf_shared(Arc::clone(p)))
            .collect()
    }

    /// Checks an image batch `[B,H,W,C_in]` and returns its stage sizes.
    pub fn check_input(&self, shape: &[usize]) -> Result<Vec<(usize, usize)>> {
        let [_, h, w, c] = *shape else {
            return Err(Error::dim(format!(
                "images must be [B,H,W,C], got {shape:?}"
            )));
        };
        if c != self.cfg.in_channels {
            return Err(Error::dim(format!(
                "images have {c} channels, the network expects {}",
                self.cfg.in_channels
            )));
        }
        self.cfg.stage_sizes(h, w)
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut GradTape<T>,
        pv: &[Var],
        images: Var,
    ) -> Result<ForwardVars> {
        self.check_input(tape.shape(images))?;
        let plan = &self.layout.plan;
        tape.set_label("stem");
        let mut x = images;
        for cn in &plan.stem {
            x = self.conv_norm(tape, pv, cn, x)?;
        }
        let mut stages = Vec::with_capacity(plan.stages.len());
        for (si, sp) in plan.stages.iter().enumerate() {
            if let Some(ds) = &sp.downsample {
                tape.set_label("downsample");
                x = self.conv_norm(tape, pv, ds, x)?;
            }
            for bi in 0..sp.blocks.len() {
                x = self.block_on_tape(tape, pv, si, bi, x)?;
            }
            stages.push(x);
        }
        tape.set_label("head");
        let n = norm(tape, pv, plan.norm, x)?;
        let pooled = tape.mean_spatial(n)?;
        let logits = tape.linear(pooled, pv[plan.head.w], plan.head.b.map(|b| pv[b]))?;
        tape.set_label("");
        Ok(ForwardVars { logits, stages })
    }

    fn conv_norm(&self, tape: &mut GradTape<T>, pv: &[Var], cn: &ConvNorm, x: Var) -> Result<Var> {
        let y = tape.conv2d(
            x,
            pv[cn.w],
            Some(pv[cn.b]),
            ConvSpec::same(cn.kernel, cn.stride, 1),
        )?;
        let y = norm(tape, pv, cn.norm, y)?;
        Ok(tape.activation(y, self.cfg.activation))
    }

    /// One transformer block (`stage` counts from 0 for the first
    /// transformer stage) on a `[B,H,W,C]` map.
    pub fn block_on_tape(
        &self,
        tape: &mut GradTape<T>,
        pv: &[Var],
        stage: usize,
        block: usize,
        x: Var,
    ) -> Result<Var> {
        let (sp, sc) = self.stage_plan(stage)?;
        let bp = *sp.blocks.get(block).ok_or_else(|| {
            Error::Contract(format!("{} has no block {block}", stage_name(stage)))
        })?;
        let [b, h, w, c] = *tape.shape(x) else {
            return Err(Error::dim(format!(
                "block input must be [B,H,W,C], got {:?}",
                tape.shape(x)
            )));
        };
        if c != sc.channels {
            return Err(Error::dim(format!(
                "{} block expects {} channels, got {c}",
                stage_name(stage),
                sc.channels
            )));
        }
        let heads = sc.channels / self.cfg.head_dim;
        let n1 = norm(tape, pv, bp.norm1, x)?;
        let x1 = match bp.attn {
            AttnPlan::Hierarchical { local, global, wp } => {
                let vars = HmhsaVars {
                    local: qkv_vars(pv, local),
                    global: qkv_vars(pv, global),
                    wp: pv[wp],
                    bp: None,
                };
                let geom = HmhsaGeometry {
                    g1: sc.g1,
                    g2: sc.g2,
                    num_heads: heads,
                };
                attention::hmhsa_on_tape(tape, n1, x, &vars, geom)?
            }
            AttnPlan::Dense { qkv, wp } => {
                let vars = MhsaVars {
                    qkv: qkv_vars(pv, qkv),
                    wp: pv[wp],
                    bp: None,
                };
                let t = tape.reshape(n1, &[b, h * w, c])?;
                let r = tape.reshape(x, &[b, h * w, c])?;
                let y = attention::mhsa_on_tape(tape, t, r, &vars, heads)?;
                tape.reshape(y, &[b, h, w, c])?
            }
        };
        tape.set_label("mlp");
        let act = self.cfg.activation;
        let n2 = norm(tape, pv, bp.norm2, x1)?;
        let hdn = tape.linear(n2, pv[bp.fc1.w], bp.fc1.b.map(|i| pv[i]))?;
        let hdn = tape.activation(hdn, act);
        let hidden = sc.channels * sc.expansion;
        let hdn = tape.conv2d(
            hdn,
            pv[bp.dw.w],
            bp.dw.b.map(|i| pv[i]),
            ConvSpec::same(sc.dw_kernel, 1, hidden),
        )?;
        let hdn = tape.activation(hdn, act);
        let out = tape.linear(hdn, pv[bp.fc2.w], bp.fc2.b.map(|i| pv[i]))?;
        tape.set_label("");
        tape.add(x1, out)
    }

    fn stage_plan(&self, stage: usize) -> Result<(&StagePlan, &StageConfig)> {
        match (
            self.layout.plan.stages.get(stage),
            self.cfg.stages.get(stage),
        ) {
            (Some(p), Some(c)) => Ok((p, c)),
            _ => Err(Error::Contract(format!(
                "no transformer stage with index {stage}"
            ))),
        }
    }

    /// Logits `[B, num_classes]` for images `[B,H,W,C_in]`.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with_stages(images).map(|(l, _)| l)
    }

    /// Logits plus the shape of every stage output.
    pub fn forward_with_stages(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Vec<Vec<usize>>)> {
        self.check_input(images.shape())?;
        images.ensure_finite("input images")?;
        let mut tape = GradTape::new();
        let pv = self.bind(&mut tape);
        let x = tape.leaf(images.clone());
        let fv = self.forward_on_tape(&mut tape, &pv, x)?;
        let logits = tape.value(fv.logits).clone();
        logits.ensure_finite("forward pass")?;
        let shapes = fv.stages.iter().map(|&v| tape.shape(v).to_vec()).collect();
        Ok((logits, shapes))
    }

    /// One block applied to a tensor.
    pub fn block_forward(&self, stage: usize, block: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = GradTape::new();
        let pv = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = self.block_on_tape(&mut tape, &pv, stage, block, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Mean cross-entropy of a labelled batch and its parameter gradients.
    pub fn loss_and_grads(&self, images: &Tensor<T>, labels: &[usize]) -> Result<LossAndGrads<T>> {
        let mut tape = GradTape::new();
        let pv = self.bind(&mut tape);
        let x = tape.leaf(images.clone());
        let fv = self.forward_on_tape(&mut tape, &pv, x)?;
        let loss = tape.cross_entropy(fv.logits, labels)?;
        let mut g = tape.backward(loss)?;
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!("loss is {}", loss_value.as_f64())));
        }
        Ok(LossAndGrads {
            loss: loss_value,
            grads: pv.iter().map(|&v| g.take(v)).collect(),
            logits: tape.value(fv.logits).clone(),
        })
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, images: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let mut tape = GradTape::new();
        let pv = self.bind(&mut tape);
        let x = tape.leaf(images.clone());
        let fv = self.forward_on_tape(&mut tape, &pv, x)?;
        let loss = tape.cross_entropy(fv.logits, labels)?;
        Ok(tape.value(loss).data()[0])
    }
}

fn norm<T: Float>(tape: &mut GradTape<T>, pv: &[Var], n: Norm, x: Var) -> Result<Var> {
    tape.layer_norm(x, pv[n.gamma], pv[n.beta], LAYER_NORM_EPS)
}

fn qkv_vars(pv: &[Var], q: Qkv) -> QkvVars {
    QkvVars {
        wq: pv[q.q.w],
        wk: pv[q.k.w],
        wv: pv[q.v.w],
        bq: q.q.b.map(|i| pv[i]),
        bk: q.k.b.map(|i| pv[i]),
        bv: q.v.b.map(|i| pv[i]),
    }
}
