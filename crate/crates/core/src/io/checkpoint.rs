use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foundation::{ParamSet, RngState, Tensor};
use crate::io::RunConfig;
use crate::network::DeepFlowModel;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DFCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

const GROUPS: [&str; 4] = ["raw", "ema", "adam_m", "adam_v"];

/// Complete training state: configuration, step, stream position, weights,
/// EMA weights and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub run_config: RunConfig,
    pub step: u64,
    pub rng: RngState,
    pub raw: ParamSet<f32>,
    pub ema: ParamSet<f32>,
    pub adam_m: ParamSet<f32>,
    pub adam_v: ParamSet<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    run_config: RunConfig,
    step: u64,
    rng: RngState,
}

impl Checkpoint {
    /// Layout: magic, `u32` version, `u64`-length-prefixed JSON envelope,
    /// `u32` array count, then per array a `u32`-length-prefixed name, `u32`
    /// rank, `u32` dims and little-endian `f32` data.
    pub fn to_bytes(&self) -> Vec<u8> {
        let env = Envelope {
            run_config: self.run_config.clone(),
            step: self.step,
            rng: self.rng,
        };
        let json = serde_json::to_vec(&env).expect("envelope serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let sets = [&self.raw, &self.ema, &self.adam_m, &self.adam_v];
        let count: usize = sets.iter().map(|s| s.len()).sum();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (group, set) in GROUPS.iter().zip(sets) {
            for (name, t) in set.names().iter().zip(set.tensors()) {
                let full = format!("{group}/{name}");
                out.extend_from_slice(&(full.len() as u32).to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                write_array(&mut out, t);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = r.u64()? as usize;
        let env: Envelope = serde_json::from_slice(r.take(len)?)?;
        let count = r.u32()? as usize;
        let mut sets: [ParamSet<f32>; 4] = Default::default();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let full = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let (group, name) = full
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("array {full:?} has no group prefix")))?;
            let gi = GROUPS
                .iter()
                .position(|g| *g == group)
                .ok_or_else(|| Error::Checkpoint(format!("unknown array group {group:?}")))?;
            let name = name.to_string();
            let t = read_array(&mut r)?;
            sets[gi].push(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let [raw, ema, adam_m, adam_v] = sets;
        let ckpt = Self {
            run_config: env.run_config,
            step: env.step,
            rng: env.rng,
            raw,
            ema,
            adam_m,
            adam_v,
        };
        ckpt.check_layout()?;
        Ok(ckpt)
    }

    /// Every array group matches the layout of the embedded model config.
    pub fn check_layout(&self) -> Result<()> {
        let model = DeepFlowModel::new(&self.run_config.model)?;
        for set in [&self.raw, &self.ema, &self.adam_m, &self.adam_v] {
            model.check_params(set)?;
        }
        if self.raw.numel() != self.run_config.model.param_count() {
            return Err(Error::Checkpoint("parameter count differs from the configuration".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub(crate) fn write_array(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_array(r: &mut Reader) -> Result<Tensor<f32>> {
    let rank = r.u32()? as usize;
    let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::from_vec(&shape, data)
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::foundation::RngStream;
    use crate::network::ModelConfig;

    fn sample() -> Checkpoint {
        let mut run = RunConfig::default();
        run.model = ModelConfig {
            hidden: 8,
            heads: 2,
            freq_dim: 8,
            depth_per_branch: 1,
            ..ModelConfig::default()
        };
        let model = DeepFlowModel::new(&run.model).unwrap();
        let mut s = RngStream::new(1, 1);
        let raw = model.init_params::<f32>(&mut s);
        let ema = model.init_params::<f32>(&mut s);
        Checkpoint {
            run_config: run,
            step: 17,
            rng: s.state(),
            adam_m: raw.zeros_like(),
            adam_v: ema.clone(),
            raw,
            ema,
        }
    }

    #[test]
    fn byte_identical_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn truncation_and_magic() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"DFTENS01").is_err());
    }
}
