//! Named parameter collections.
//!
//! Student parameters live in a [`VarSet`] (trainable, tracked by autograd);
//! teacher parameters live in a [`ParamSet`] of plain tensors, which the
//! autograd engine never assigns gradients to.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Anything that can hand out named tensors with a checked shape.
pub trait ParamSource {
    fn tensor(&self, name: &str) -> Option<Tensor>;

    fn get(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self
            .tensor(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if t.dims() != shape {
            return Err(Error::Shape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.dims().to_vec(),
            });
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    /// Restricts to the entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.elem_count()).sum()
    }

    /// Trainable copies of every tensor (storage is copied, not shared).
    pub fn to_vars(&self) -> Result<VarSet> {
        let mut vars = BTreeMap::new();
        for (k, t) in &self.tensors {
            vars.insert(k.clone(), Var::from_tensor(&t.copy()?)?);
        }
        Ok(VarSet { vars })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (k, t) in &self.tensors {
            out.insert(k.clone(), t.to_dtype(dtype)?);
        }
        Ok(out)
    }

    /// SHA-256 over names, dtypes, shapes and raw little-endian values.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, t) in &self.tensors {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            h.update([dtype_tag(t.dtype())?]);
            for d in t.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(tensor_le_bytes(t)?);
        }
        Ok(hex::encode(h.finalize()))
    }
}

impl ParamSource for ParamSet {
    fn tensor(&self, name: &str) -> Option<Tensor> {
        self.tensors.get(name).cloned()
    }
}

#[derive(Debug, Clone, Default)]
pub struct VarSet {
    vars: BTreeMap<String, Var>,
}

impl VarSet {
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get_var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Detached snapshot of the current values.
    pub fn snapshot(&self) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_tensor().detach().copy()?);
        }
        Ok(out)
    }

    /// The live tensors (shared storage with the vars).
    pub fn tensors(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_tensor().clone());
        }
        out
    }
}

impl ParamSource for VarSet {
    fn tensor(&self, name: &str) -> Option<Tensor> {
        self.vars.get(name).map(|v| v.as_tensor().clone())
    }
}

/// Seeded parameter initializer writing into a fresh [`ParamSet`].
pub struct ParamInit {
    rng: ChaCha8Rng,
    dtype: DType,
    out: ParamSet,
}

impl ParamInit {
    pub fn new(seed: u64, label: &str, dtype: DType) -> Self {
        Self {
            rng: rng::stream(seed, label),
            dtype,
            out: ParamSet::new(),
        }
    }

    fn push(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        self.out.insert(name, t);
        Ok(())
    }

    /// Normal(0, std) truncated to [-2 std, 2 std] by resampling.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = dist.sample(&mut self.rng);
                if v.abs() <= 2.0 * std {
                    break v;
                }
            })
            .collect();
        self.push(name, shape, data)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.push(name, shape, data)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        self.push(name, shape, vec![value; n])
    }

    pub fn finish(self) -> ParamSet {
        self.out
    }
}

pub(crate) fn dtype_tag(dtype: DType) -> Result<u8> {
    match dtype {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => Err(Error::InvalidArgument(format!("unsupported dtype {other:?}"))),
    }
}

pub(crate) fn dtype_from_tag(tag: u8) -> Option<DType> {
    match tag {
        0 => Some(DType::F32),
        1 => Some(DType::F64),
        _ => None,
    }
}

pub(crate) fn tensor_le_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        DType::F64 => flat
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        other => return Err(Error::InvalidArgument(format!("unsupported dtype {other:?}"))),
    })
}

pub(crate) fn tensor_from_le_bytes(bytes: &[u8], dtype: DType, shape: &[usize]) -> Result<Tensor> {
    let t = match dtype {
        DType::F32 => {
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        DType::F64 => {
            let v: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(Error::InvalidArgument(format!("unsupported dtype {other:?}"))),
    };
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::zeros((2, 3), DType::F32, &Device::Cpu).unwrap());
        let err = p.get("w", &[3, 2]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        assert!(matches!(p.get("missing", &[1]), Err(Error::MissingParam(_))));
    }

    #[test]
    fn init_is_seeded_and_truncated() {
        let mk = || {
            let mut i = ParamInit::new(3, "x", DType::F64);
            i.trunc_normal("w", &[50, 4], 0.02).unwrap();
            i.finish()
        };
        let a = mk();
        let b = mk();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        let v = a.get("w", &[50, 4]).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| x.abs() <= 0.04));
    }

    #[test]
    fn var_snapshot_is_detached_copy() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::ones(3, DType::F32, &Device::Cpu).unwrap());
        let vars = p.to_vars().unwrap();
        let snap = vars.snapshot().unwrap();
        vars.get_var("w")
            .unwrap()
            .set(&Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap())
            .unwrap();
        let s = snap.get("w", &[3]).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(s, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn byte_roundtrip() {
        let t = Tensor::new(&[[1.5f32, -2.0], [0.25, 3.0]], &Device::Cpu).unwrap();
        let b = tensor_le_bytes(&t).unwrap();
        let u = tensor_from_le_bytes(&b, DType::F32, &[2, 2]).unwrap();
        assert_eq!(t.to_vec2::<f32>().unwrap(), u.to_vec2::<f32>().unwrap());
    }
}
