use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Hierarchical,
    Dense,
}

/// One of the two stride-S 3x3 convolutions at the start of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemConv {
    pub channels: usize,
    pub stride: usize,
}

/// A stage of identical transformer blocks at one resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
    pub dw_kernel: usize,
    pub expansion: usize,
    #[serde(default = "one")]
    pub g1: usize,
    #[serde(default = "one")]
    pub g2: usize,
    pub attention: AttentionKind,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stem: [StemConv; 2],
    pub stages: Vec<StageConfig>,
    pub head_dim: usize,
    pub num_classes: usize,
    pub activation: Activation,
    #[serde(default)]
    pub qkv_bias: bool,
    #[serde(default = "three")]
    pub in_channels: usize,
}

/// The four published network sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Tiny,
    Small,
    Medium,
    Large,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Tiny,
        Variant::Small,
        Variant::Medium,
        Variant::Large,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tiny => "tiny",
            Variant::Small => "small",
            Variant::Medium => "medium",
            Variant::Large => "large",
        }
    }

    /// Published parameter count, in millions.
    pub fn reported_params_m(self) -> f64 {
        match self {
            Variant::Tiny => 12.7,
            Variant::Small => 25.7,
            Variant::Medium => 42.9,
            Variant::Large => 63.1,
        }
    }

    /// Published cost at 224x224, in GFLOPs (one multiply-accumulate each).
    pub fn reported_gflops(self) -> f64 {
        match self {
            Variant::Tiny => 2.0,
            Variant::Small => 4.3,
            Variant::Medium => 8.3,
            Variant::Large => 11.5,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown variant {s:?}; expected one of tiny, small, medium, large"
                ))
            })
    }
}

/// Grid sizes for the three hierarchical stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridSchedule {
    /// `G1 = {8,7,7}`, `G2 = {8,4,2}`.
    Classification,
    /// `G1 = {8,8,8}`, `G2 = {16,8,4}`, for large dense-prediction inputs.
    Dense,
}

impl GridSchedule {
    pub fn sizes(self) -> ([usize; 3], [usize; 3]) {
        match self {
            GridSchedule::Classification => ([8, 7, 7], [8, 4, 2]),
            GridSchedule::Dense => ([8, 8, 8], [16, 8, 4]),
        }
    }
}

impl ModelConfig {
    pub fn variant(v: Variant, grids: GridSchedule) -> Self {
        // (stem C, stage C, blocks, DW kernels, head dim)
        let (stem_c, channels, blocks, kernels, head_dim) = match v {
            Variant::Tiny => (48, [48, 96, 240, 384], [2, 2, 6, 3], [3, 3, 3, 3], 48),
            Variant::Small => (64, [64, 128, 320, 512], [2, 3, 8, 3], [3, 3, 3, 3], 64),
            Variant::Medium => (64, [64, 128, 320, 512], [3, 6, 18, 3], [5, 3, 5, 3], 64),
            Variant::Large => (64, [64, 128, 320, 640], [3, 8, 27, 3], [3, 3, 3, 3], 64),
        };
        let expansion = [8, 8, 4, 4];
        let (g1, g2) = grids.sizes();
        let stages = (0..4)
            .map(|i| StageConfig {
                channels: channels[i],
                blocks: blocks[i],
                dw_kernel: kernels[i],
                expansion: expansion[i],
                g1: if i < 3 { g1[i] } else { 1 },
                g2: if i < 3 { g2[i] } else { 1 },
                attention: if i < 3 {
                    AttentionKind::Hierarchical
                } else {
                    AttentionKind::Dense
                },
            })
            .collect();
        Self {
            stem: [
                StemConv {
                    channels: 16,
                    stride: 2,
                },
                StemConv {
                    channels: stem_c,
                    stride: 2,
                },
            ],
            stages,
            head_dim,
            num_classes: 1000,
            activation: Activation::Silu,
            qkv_bias: false,
            in_channels: 3,
        }
    }

    /// Reduced network for desk-scale training on 32x32 inputs.
    ///
    /// The second stem convolution keeps stride 1, so stages run at
    /// 16/8/4/2 and every grid size divides its map.
    pub fn toy(num_classes: usize) -> Self {
        Self::small_custom(
            [16, 32, 64, 128],
            [1, 1, 2, 1],
            [4, 4, 4, 4],
            ([4, 4, 4], [4, 2, 1]),
            16,
            num_classes,
        )
    }

    /// Network under 50k parameters used for gradient checks at 16x16.
    pub fn gradcheck_toy() -> Self {
        Self::small_custom(
            [8, 16, 24, 32],
            [1, 1, 1, 1],
            [4, 4, 4, 4],
            ([4, 2, 2], [2, 2, 1]),
            8,
            3,
        )
    }

    fn small_custom(
        channels: [usize; 4],
        blocks: [usize; 4],
        expansion: [usize; 4],
        (g1, g2): ([usize; 3], [usize; 3]),
        head_dim: usize,
        num_classes: usize,
    ) -> Self {
        let stages = (0..4)
            .map(|i| StageConfig {
                channels: channels[i],
                blocks: blocks[i],
                dw_kernel: 3,
                expansion: expansion[i],
                g1: if i < 3 { g1[i] } else { 1 },
                g2: if i < 3 { g2[i] } else { 1 },
                attention: if i < 3 {
                    AttentionKind::Hierarchical
                } else {
                    AttentionKind::Dense
                },
            })
            .collect();
        Self {
            stem: [
                StemConv {
                    channels: channels[0],
                    stride: 2,
                },
                StemConv {
                    channels: channels[0],
                    stride: 1,
                },
            ],
            stages,
            head_dim,
            num_classes,
            activation: Activation::Silu,
            qkv_bias: false,
            in_channels: 3,
        }
    }

    /// Copy with new grid sizes for the hierarchical stages, in order.
    pub fn with_grids(&self, g1: &[usize], g2: &[usize]) -> Result<Self> {
        let hier: Vec<usize> = (0..self.stages.len())
            .filter(|&i| self.stages[i].attention == AttentionKind::Hierarchical)
            .collect();
        if g1.len() != hier.len() || g2.len() != hier.len() {
            return Err(Error::config(format!(
                "grid schedule needs {} entries per list, got G1={g1:?} G2={g2:?}",
                hier.len()
            )));
        }
        let mut out = self.clone();
        for (k, &i) in hier.iter().enumerate() {
            out.stages[i].g1 = g1[k];
            out.stages[i].g2 = g2[k];
        }
        out.validate()?;
        Ok(out)
    }

    pub fn with_schedule(&self, grids: GridSchedule) -> Result<Self> {
        let (g1, g2) = grids.sizes();
        self.with_grids(&g1, &g2)
    }

    pub fn num_heads(&self, stage: usize) -> usize {
        self.stages[stage].channels / self.head_dim
    }

    /// Structural checks that do not depend on the input size.
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::config(format!(
                "expected 4 stages, got {}",
                self.stages.len()
            )));
        }
        if self.head_dim == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::config(
                "head_dim, num_classes and in_channels must be positive",
            ));
        }
        for (i, s) in self.stem.iter().enumerate() {
            if s.channels == 0 || s.stride == 0 {
                return Err(Error::config(format!(
                    "stem conv {i} needs positive channels and stride"
                )));
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            let name = stage_name(i);
            if s.channels == 0 || s.blocks == 0 || s.expansion == 0 || s.g1 == 0 || s.g2 == 0 {
                return Err(Error::config(format!("{name}: sizes must be positive")));
            }
            if s.dw_kernel % 2 == 0 {
                return Err(Error::config(format!(
                    "{name}: DW-Conv kernel {} must be odd",
                    s.dw_kernel
                )));
            }
            if s.channels % self.head_dim != 0 {
                return Err(Error::config(format!(
                    "{name}: {} channels are not divisible by head_dim {}",
                    s.channels, self.head_dim
                )));
            }
        }
        Ok(())
    }

    /// Spatial size entering each stage for an input of `h x w`, checking
    /// every stride and grid divisibility along the way.
    pub fn stage_sizes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        let total: usize = self.stem.iter().map(|s| s.stride).product::<usize>() * 8;
        let fail = |detail: String| {
            Error::config(format!(
                "input {h}x{w} is incompatible with this network: {detail} (H and W must be divisible by {total} and every hierarchical stage's G1 and G2 must divide its feature map)"
            ))
        };
        if h == 0 || w == 0 {
            return Err(fail("empty input".into()));
        }
        let (mut ch, mut cw) = (h, w);
        for s in &self.stem {
            if ch % s.stride != 0 || cw % s.stride != 0 {
                return Err(fail(format!(
                    "stem stride {} does not divide {ch}x{cw}",
                    s.stride
                )));
            }
            ch /= s.stride;
            cw /= s.stride;
        }
        let mut sizes = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            if i > 0 {
                if ch % 2 != 0 || cw % 2 != 0 {
                    return Err(fail(format!(
                        "{} downsampling needs an even map, got {ch}x{cw}",
                        stage_name(i)
                    )));
                }
                ch /= 2;
                cw /= 2;
            }
            if s.attention == AttentionKind::Hierarchical {
                for (label, g) in [("G1", s.g1), ("G2", s.g2)] {
                    if ch % g != 0 || cw % g != 0 {
                        return Err(fail(format!(
                            "{} {label}={g} does not divide {ch}x{cw}",
                            stage_name(i)
                        )));
                    }
                }
            }
            sizes.push((ch, cw));
        }
        Ok(sizes)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Stages are numbered from 2; stage 1 is the convolutional stem.
pub fn stage_name(index: usize) -> String {
    format!("stage{}", index + 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_stage_sizes_at_224() {
        for v in Variant::ALL {
            let cfg = ModelConfig::variant(v, GridSchedule::Classification);
            assert_eq!(
                cfg.stage_sizes(224, 224).unwrap(),
                vec![(56, 56), (28, 28), (14, 14), (7, 7)]
            );
        }
    }

    #[test]
    fn tiny_stage2_has_48_channels_and_head_dim_48() {
        let cfg = ModelConfig::variant(Variant::Tiny, GridSchedule::Classification);
        assert_eq!(cfg.stages[0].channels, 48);
        assert_eq!(cfg.head_dim, 48);
        assert_eq!(cfg.num_heads(2), 5);
    }

    #[test]
    fn dense_schedule_needs_larger_inputs() {
        let cfg = ModelConfig::variant(Variant::Small, GridSchedule::Dense);
        assert!(matches!(cfg.stage_sizes(224, 224), Err(Error::Config(_))));
        assert_eq!(cfg.stage_sizes(512, 512).unwrap()[0], (128, 128));
    }

    #[test]
    fn input_errors_mention_required_divisibility() {
        let cfg = ModelConfig::variant(Variant::Tiny, GridSchedule::Classification);
        let msg = cfg.stage_sizes(100, 224).unwrap_err().to_string();
        assert!(msg.contains("divisible by 32"), "{msg}");
    }

    #[test]
    fn toy_schedules_divide_their_maps() {
        assert_eq!(
            ModelConfig::toy(3).stage_sizes(32, 32).unwrap(),
            vec![(16, 16), (8, 8), (4, 4), (2, 2)]
        );
        assert!(ModelConfig::gradcheck_toy().stage_sizes(16, 16).is_ok());
    }

    #[test]
    fn channels_must_divide_by_head_dim() {
        let mut cfg = ModelConfig::toy(3);
        cfg.stages[1].channels = 40;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn json_round_trip_and_unknown_keys_rejected() {
        let cfg = ModelConfig::toy(10);
        assert_eq!(ModelConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
        v["dropout"] = serde_json::json!(0.1);
        assert!(ModelConfig::from_json(&v.to_string()).is_err());
        v.as_object_mut().unwrap().remove("dropout");
        v["stages"][0]["window"] = serde_json::json!(7);
        assert!(ModelConfig::from_json(&v.to_string()).is_err());
    }
}
