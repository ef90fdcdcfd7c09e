//! Binary weights files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "HATW" | u32 version (1) | u32 count
//! count x { u16 name_len | name (UTF-8) | u8 dtype (0 = f32) | u8 ndim | ndim x u32 | f32 values }
//! u32 CRC-32 of every preceding byte
//! ```

use std::path::Path;

use super::config::ModelConfig;
use super::model::Model;
use crate::error::{Error, Result, WeightsError};
use crate::tensor::{Float, Tensor};

pub const MAGIC: [u8; 4] = *b"HATW";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Named `f32` tensors in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightsBundle {
    pub entries: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], WeightsError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(WeightsError::Truncated { context })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, context: &'static str) -> Result<u8, WeightsError> {
        Ok(self.take(1, context)?[0])
    }

    fn u16(&mut self, context: &'static str) -> Result<u16, WeightsError> {
        Ok(u16::from_le_bytes(
            self.take(2, context)?.try_into().unwrap(),
        ))
    }

    fn u32(&mut self, context: &'static str) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(
            self.take(4, context)?.try_into().unwrap(),
        ))
    }
}

impl WeightsBundle {
    pub fn from_model<T: Float>(model: &Model<T>) -> Self {
        let entries = model
            .layout()
            .specs()
            .iter()
            .zip(model.params())
            .map(|(s, p)| (s.name.clone(), p.cast::<f32>()))
            .collect();
        Self { entries }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Decodes a file, checking magic, version, structure and checksum in
    /// that order.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightsError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(WeightsError::BadMagic { found: magic });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(WeightsError::UnsupportedVersion(version));
        }
        let count = r.u32("entry count")?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| WeightsError::Malformed("parameter name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(WeightsError::Malformed(format!(
                    "{name}: unknown dtype code {dtype}"
                )));
            }
            let ndim = r.u8("rank")? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32("shape").map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0 && ndim > 0)
                .ok_or_else(|| {
                    WeightsError::Malformed(format!("{name}: invalid shape {shape:?}"))
                })?;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or(WeightsError::Truncated { context: "values" })?,
                "values",
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t =
                Tensor::new(&shape, data).map_err(|e| WeightsError::Malformed(e.to_string()))?;
            entries.push((name, t));
        }
        let body = r.pos;
        let stored = r.u32("checksum")?;
        if r.pos != bytes.len() {
            return Err(WeightsError::Malformed(format!(
                "{} trailing bytes after the checksum",
                bytes.len() - r.pos
            )));
        }
        let computed = crc32fast::hash(&bytes[..body]);
        if stored != computed {
            return Err(WeightsError::Checksum { stored, computed });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// Matches the entries against a configuration's parameter layout.
    pub fn into_model<T: Float>(self, cfg: ModelConfig) -> Result<Model<T>> {
        let probe = super::model::ParamLayout::new(&cfg)?;
        let specs = probe.specs();
        for spec in specs {
            if !self.entries.iter().any(|(n, _)| *n == spec.name) {
                return Err(
                    WeightsError::NameMismatch(format!("missing parameter {}", spec.name)).into(),
                );
            }
        }
        for (name, _) in &self.entries {
            if !specs.iter().any(|s| s.name == *name) {
                return Err(
                    WeightsError::NameMismatch(format!("unexpected parameter {name}")).into(),
                );
            }
        }
        if self.entries.len() != specs.len() {
            return Err(WeightsError::NameMismatch("duplicate parameter names".into()).into());
        }
        let mut map: std::collections::HashMap<String, Tensor<f32>> =
            self.entries.into_iter().collect();
        let mut params = Vec::with_capacity(specs.len());
        for spec in specs {
            let t = map.remove(&spec.name).expect("presence checked above");
            if t.shape() != spec.shape.as_slice() {
                return Err(WeightsError::ShapeMismatch {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                }
                .into());
            }
            params.push(t.cast::<T>());
        }
        Model::from_params(cfg, params)
    }
}

pub fn save_weights<T: Float>(model: &Model<T>, path: &Path) -> Result<()> {
    WeightsBundle::from_model(model).save(path)
}

pub fn load_weights<T: Float>(cfg: ModelConfig, path: &Path) -> Result<Model<T>> {
    WeightsBundle::load(path)?.into_model(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::config::{GridSchedule, Variant};

    fn toy_bytes() -> (Model<f32>, Vec<u8>) {
        let m = Model::<f32>::new(ModelConfig::gradcheck_toy(), 3).unwrap();
        let b = WeightsBundle::from_model(&m).to_bytes();
        (m, b)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (m, bytes) = toy_bytes();
        let back: Model<f32> = WeightsBundle::from_bytes(&bytes)
            .unwrap()
            .into_model(ModelConfig::gradcheck_toy())
            .unwrap();
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn each_corruption_has_its_own_error() {
        let (_, bytes) = toy_bytes();
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(
            WeightsBundle::from_bytes(&b),
            Err(WeightsError::BadMagic { .. })
        ));
        let mut b = bytes.clone();
        b[4] = 9;
        assert_eq!(
            WeightsBundle::from_bytes(&b),
            Err(WeightsError::UnsupportedVersion(9))
        );
        assert!(matches!(
            WeightsBundle::from_bytes(&bytes[..bytes.len() - 9]),
            Err(WeightsError::Truncated { .. })
        ));
        let mut b = bytes.clone();
        // Inside the values of the first tensor, past its 49-byte header.
        b[60] ^= 0x40;
        let r = WeightsBundle::from_bytes(&b);
        assert!(matches!(r, Err(WeightsError::Checksum { .. })), "{r:?}");
    }

    #[test]
    fn mismatched_variant_names_first_missing_block() {
        let tiny = Model::<f32>::new(
            ModelConfig::variant(Variant::Tiny, GridSchedule::Classification),
            0,
        )
        .unwrap();
        let bundle = WeightsBundle::from_model(&tiny);
        let err = bundle
            .into_model::<f32>(ModelConfig::variant(
                Variant::Small,
                GridSchedule::Classification,
            ))
            .unwrap_err();
        match err {
            Error::Weights(WeightsError::NameMismatch(msg)) => {
                assert!(msg.contains("stage3.block2"), "{msg}")
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (m, _) = toy_bytes();
        let mut bundle = WeightsBundle::from_model(&m);
        bundle.entries[0].1 = Tensor::zeros(&[1, 2, 3]);
        assert!(matches!(
            bundle.into_model::<f32>(ModelConfig::gradcheck_toy()),
            Err(Error::Weights(WeightsError::ShapeMismatch { .. }))
        ));
    }
}
