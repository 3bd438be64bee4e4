//! Binary checkpoint format.
//!
//! ```text
//! "EANT" | version u32 | tensor count u32
//! per tensor: name len u16 | UTF-8 name | rank u8 | dims u32… | f32 payload
//! RNG state (16 bytes) | config digest (32 bytes)
//! ```
//! All integers and floats are little-endian. The kernel kind travels as a
//! two-element `meta.kernel` tensor; the remaining model configuration is
//! recovered from tensor shapes.

use std::path::Path;

use eanet_autodiff::Tensor;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::KernelKind;
use crate::model::{Model, ModelConfig, ParamSet};
use crate::rng::Rng;
use crate::temporal::StackConfig;

pub const MAGIC: &[u8; 4] = b"EANT";
pub const FORMAT_VERSION: u32 = 1;
const META_KERNEL: &str = "meta.kernel";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub rng: Rng,
}

/// Canonical text of a model configuration; its SHA-256 is the checkpoint digest.
pub fn canonical_model_config(c: &ModelConfig) -> String {
    format!(
        "t_obs = {}\nt_pred = {}\nkernel = {}\nrbf_sigma = {}\nstack_layers = {}\nagent_taps = {}\n",
        c.t_obs,
        c.t_pred,
        c.kernel.code(),
        c.kernel.rbf_sigma() as f32,
        c.stack.layers,
        c.stack.agent_taps
    )
}

pub fn digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn round_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

impl Checkpoint {
    /// Snapshot of `model`; parameters are rounded to the stored precision so
    /// a loaded model predicts exactly like this snapshot.
    pub fn new(model: &Model, rng: &Rng) -> Self {
        let params = ParamSet::new(
            model
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), round_f32(t)))
                .collect(),
        );
        let mut config = model.config;
        if let KernelKind::GaussianRbf(s) = config.kernel {
            config.kernel = KernelKind::GaussianRbf(s as f32 as f64);
        }
        Self {
            config,
            params,
            rng: rng.clone(),
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.config, self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = Tensor::from_vec(vec![
            self.config.kernel.code() as f64,
            self.config.kernel.rbf_sigma(),
        ]);
        let count = u32::try_from(self.params.len() + 1)
            .map_err(|_| Error::Checkpoint("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        let entries = std::iter::once((META_KERNEL, &meta)).chain(self.params.iter());
        for (name, t) in entries {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::Checkpoint(format!("rank too large for {name}")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Checkpoint(format!("dimension too large for {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&self.rng.to_bytes());
        out.extend_from_slice(&digest(&canonical_model_config(&self.config)));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let count = r.u32()? as usize;
        let mut kernel = None;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = r
                .take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let t = Tensor::new(shape, data)?;
            if name == META_KERNEL {
                if t.numel() != 2 {
                    return Err(Error::Checkpoint("malformed meta.kernel".into()));
                }
                kernel = Some(KernelKind::from_code(t.data()[0] as u8, t.data()[1])?);
            } else {
                entries.push((name, t));
            }
        }
        let rng = Rng::from_bytes(r.take(16)?.try_into().unwrap());
        let stored: [u8; 32] = r.take(32)?.try_into().unwrap();
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let kernel = kernel.ok_or_else(|| Error::Checkpoint("missing meta.kernel".into()))?;
        let params = ParamSet::new(entries);
        let config = infer_config(&params, kernel)?;
        if digest(&canonical_model_config(&config)) != stored {
            return Err(Error::Checkpoint("config digest mismatch".into()));
        }
        params.check(&config)?;
        Ok(Self { config, params, rng })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn infer_config(params: &ParamSet, kernel: KernelKind) -> Result<ModelConfig> {
    for name in params.names() {
        let known = matches!(name.as_str(), "gcn.weight" | "expand.kernel" | "ea.theta" | "ea.bias" | "ea.alpha")
            || name
                .strip_prefix("stack.")
                .and_then(|rest| rest.split_once('.'))
                .is_some_and(|(i, field)| i.parse::<usize>().is_ok() && matches!(field, "kernel" | "slope"));
        if !known {
            return Err(Error::Checkpoint(format!("unknown tensor name {name:?}")));
        }
    }
    let expand = params
        .get("expand.kernel")
        .ok_or_else(|| Error::Checkpoint("missing expand.kernel".into()))?;
    let s = expand.shape();
    if s.len() != 4 {
        return Err(Error::Checkpoint("expand.kernel must be rank 4".into()));
    }
    let layers = params.names().iter().filter(|n| n.ends_with(".slope")).count();
    Ok(ModelConfig {
        t_obs: s[1],
        t_pred: s[0],
        kernel,
        stack: StackConfig {
            layers,
            agent_taps: s[2],
        },
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt() -> Checkpoint {
        let config = ModelConfig {
            kernel: KernelKind::GaussianRbf(0.3),
            stack: StackConfig { layers: 2, agent_taps: 3 },
            ..Default::default()
        };
        Checkpoint::new(&Model::new(config, 5).unwrap(), &Rng::new(9))
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let c = ckpt();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(&bytes[..4], b"EANT");
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = ckpt().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 1] ^= 1;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn unknown_tensor_name_is_rejected() {
        let c = ckpt();
        let mut entries: Vec<(String, Tensor)> =
            c.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        entries[0].0 = "gcn.wieght".into();
        let bad = Checkpoint { params: ParamSet::new(entries), ..c };
        let err = Checkpoint::from_bytes(&bad.to_bytes().unwrap()).unwrap_err();
        assert!(err.to_string().contains("unknown tensor"), "{err}");
    }
}
