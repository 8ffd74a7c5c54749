//! Binary checkpoint files.
//!
//! All integers are little endian.
//!
//! ```text
//! magic            8 bytes   "SGCCKPT\0"
//! version          u32       1
//! config digest    32 bytes  SHA-256 of the config text below
//! config length    u64
//! config text      UTF-8 TOML, the resolved configuration
//! step             u64       optimizer steps taken
//! epoch            u64       epochs completed
//! optimizer step   u64       bias-correction counter of the optimizer
//! seed             u64       root seed of every random stream
//! group count      u32
//! per group, in name order:
//!   name length    u16, then the name
//!   blob count     u32
//!   per blob, in name order:
//!     name length  u16, then the name
//!     dtype        u8        0 = f32, 1 = f64
//!     rank         u8
//!     dims         rank x u64
//!     values       row-major, little endian
//! ```
//!
//! Groups are `student`, `teacher`, `adam_m`, `adam_v` and `centers`.
//! Random streams are derived from the seed by name, so the seed and the
//! step/epoch counters are the complete random state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::objective::CenterState;
use crate::optim::AdamW;
use crate::params::{dtype_from_tag, dtype_tag, tensor_from_le_bytes, tensor_le_bytes, ParamSet, ParamSource};
use crate::train::{adamw_config, SslState};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SGCCKPT\0";
pub const VERSION: u32 = 1;

pub const GROUP_STUDENT: &str = "student";
pub const GROUP_TEACHER: &str = "teacher";
pub const GROUP_ADAM_M: &str = "adam_m";
pub const GROUP_ADAM_V: &str = "adam_v";
pub const GROUP_CENTERS: &str = "centers";

#[derive(Debug, Clone)]
pub struct CheckpointRecord {
    pub config_text: String,
    pub step: u64,
    pub epoch: u64,
    pub optimizer_step: u64,
    pub seed: u64,
    pub groups: BTreeMap<String, ParamSet>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format("checkpoint", &format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("checkpoint", "name is not UTF-8"))
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::format("checkpoint", "name too long"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

impl CheckpointRecord {
    pub fn from_state(cfg: &RunConfig, state: &SslState) -> Result<Self> {
        let (m, v) = state.optimizer.moments();
        let mut centers = ParamSet::new();
        centers.insert("cls_center", state.centers.cls_center.clone());
        centers.insert("sgc_center", state.centers.sgc_center.clone());
        let mut groups = BTreeMap::new();
        groups.insert(GROUP_STUDENT.to_string(), state.student.snapshot()?);
        groups.insert(GROUP_TEACHER.to_string(), state.teacher.clone());
        groups.insert(GROUP_ADAM_M.to_string(), m);
        groups.insert(GROUP_ADAM_V.to_string(), v);
        groups.insert(GROUP_CENTERS.to_string(), centers);
        Ok(Self {
            config_text: cfg.dump()?,
            step: state.step,
            epoch: state.epoch as u64,
            optimizer_step: state.optimizer.step_count(),
            seed: cfg.seed,
            groups,
        })
    }

    pub fn config_digest(&self) -> [u8; 32] {
        Sha256::digest(self.config_text.as_bytes()).into()
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config_text)
    }

    pub fn group(&self, name: &str) -> Result<&ParamSet> {
        self.groups
            .get(name)
            .ok_or_else(|| Error::format("checkpoint", &format!("missing group `{name}`")))
    }

    /// Rebuilds the training state; the architecture of `cfg` must match the
    /// one the checkpoint was written with.
    pub fn into_state(self, cfg: &RunConfig) -> Result<SslState> {
        let saved = self.config()?;
        if saved.architecture()? != cfg.architecture()? {
            return Err(Error::ConfigMismatch(
                "checkpoint was written for a different architecture or method".into(),
            ));
        }
        let student = self.group(GROUP_STUDENT)?.to_vars()?;
        let teacher = self.group(GROUP_TEACHER)?.clone();
        for (name, var) in student.iter() {
            teacher.get(name, var.as_tensor().dims())?;
        }
        let optimizer = AdamW::from_state(
            &student,
            adamw_config(cfg),
            self.optimizer_step,
            self.group(GROUP_ADAM_M)?,
            self.group(GROUP_ADAM_V)?,
        )?;
        let c = self.group(GROUP_CENTERS)?;
        let centers = CenterState {
            cls_center: c.get("cls_center", &[cfg.head.output_dim])?,
            sgc_center: c.get("sgc_center", &[cfg.head.graph_head().output_dim])?,
        };
        Ok(SslState {
            student,
            teacher,
            centers,
            optimizer,
            step: self.step,
            epoch: self.epoch as usize,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_digest());
        out.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        for v in [self.step, self.epoch, self.optimizer_step, self.seed] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        for (gname, group) in &self.groups {
            put_name(&mut out, gname)?;
            out.extend_from_slice(&(group.len() as u32).to_le_bytes());
            for (name, t) in group.iter() {
                put_name(&mut out, name)?;
                out.push(dtype_tag(t.dtype())?);
                out.push(t.rank() as u8);
                for d in t.dims() {
                    out.extend_from_slice(&(*d as u64).to_le_bytes());
                }
                out.extend_from_slice(&tensor_le_bytes(t)?);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", &format!("unsupported format version {version}")));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let len = r.u64()? as usize;
        let config_text = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "config is not UTF-8"))?;
        let record_digest: [u8; 32] = Sha256::digest(config_text.as_bytes()).into();
        if record_digest != digest {
            return Err(Error::format("checkpoint", "config digest does not match config text"));
        }
        let (step, epoch, optimizer_step, seed) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
        let mut groups = BTreeMap::new();
        for _ in 0..r.u32()? {
            let gname = r.name()?;
            let mut group = ParamSet::new();
            for _ in 0..r.u32()? {
                let name = r.name()?;
                let tag = r.u8()?;
                let dtype = dtype_from_tag(tag)
                    .ok_or_else(|| Error::format("checkpoint", &format!("unknown dtype tag {tag}")))?;
                let rank = r.u8()? as usize;
                let dims = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
                let count: usize = dims.iter().product();
                let width = if tag == 0 { 4 } else { 8 };
                let data = r.take(count * width)?;
                group.insert(name, tensor_from_le_bytes(data, dtype, &dims)?);
            }
            groups.insert(gname, group);
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self {
            config_text,
            step,
            epoch,
            optimizer_step,
            seed,
            groups,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint; keys feature caches.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_exactly() {
        let cfg = RunConfig::tiny();
        let state = SslState::new(&cfg).unwrap();
        let rec = CheckpointRecord::from_state(&cfg, &state).unwrap();
        let a = rec.to_bytes().unwrap();
        let b = CheckpointRecord::from_bytes(&a).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
        assert_eq!(&a[..8], MAGIC);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let cfg = RunConfig::tiny();
        let rec = CheckpointRecord::from_state(&cfg, &SslState::new(&cfg).unwrap()).unwrap();
        let bytes = rec.to_bytes().unwrap();
        assert!(CheckpointRecord::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(CheckpointRecord::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[60] ^= 1;
        assert!(CheckpointRecord::from_bytes(&bad).is_err());
    }

    #[test]
    fn architecture_mismatch_on_resume() {
        let cfg = RunConfig::tiny();
        let rec = CheckpointRecord::from_state(&cfg, &SslState::new(&cfg).unwrap()).unwrap();
        let mut other = cfg.clone();
        other.encoder.embed_dim = 32;
        assert!(matches!(rec.clone().into_state(&other), Err(Error::ConfigMismatch(_))));
        let mut lr_only = cfg.clone();
        lr_only.train.base_lr = 1e-3;
        assert!(rec.into_state(&lr_only).is_ok());
    }
}
