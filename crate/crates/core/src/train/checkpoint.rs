//! Binary checkpoint codec. Byte layout (all integers little-endian):
//!
//! ```text
//! "WTRK"            magic
//! u32               format version
//! u64               body length
//! body:
//!   u64             completed epochs
//!   u32 + bytes     config snapshot, UTF-8 JSON
//!   u32             tensor count
//!   per tensor:
//!     u16 + bytes   name, UTF-8
//!     u8            dtype (1 = f32, 2 = f64)
//!     u8            rank
//!     u64 * rank    dimensions
//!     bytes         elements, little-endian
//!   u32             optimiser group count
//!   per group:
//!     u16 + bytes   group name
//!     u64           Adam step count
//! u32               CRC-32 of body
//! ```
//!
//! Adam moments are ordinary tensors named `optim.<group>.m.<param>` and
//! `optim.<group>.v.<param>`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use super::step::Optimizers;
use crate::error::{Error, Result};
use crate::ndgrad::{AdamState, Array, DType, Scalar};
use crate::nn::Module;

pub const MAGIC: &[u8; 4] = b"WTRK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl TensorRecord {
    pub fn from_array<F: Scalar>(name: impl Into<String>, a: &Array<F>) -> Self {
        let mut data = Vec::with_capacity(a.len() * F::DTYPE.size());
        for &v in a.data() {
            v.write_le(&mut data);
        }
        Self { name: name.into(), dtype: F::DTYPE, shape: a.shape().to_vec(), data }
    }

    pub fn to_array<F: Scalar>(&self) -> Result<Array<F>> {
        if self.dtype != F::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` is {:?} but the model uses {:?}",
                self.name,
                self.dtype,
                F::DTYPE
            )));
        }
        let data = self.data.chunks_exact(F::DTYPE.size()).map(F::read_le).collect();
        Array::new(self.shape.clone(), data).map_err(|e| Error::Checkpoint(format!("tensor `{}`: {e}", self.name)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OptimRecord {
    pub group: String,
    pub step_count: u64,
}

/// Model shapes plus the free-form run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    #[serde(default)]
    pub run: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub config: String,
    pub tensors: Vec<TensorRecord>,
    pub optim: Vec<OptimRecord>,
}

fn moment_name(group: &str, which: &str, param: &str) -> String {
    format!("optim.{group}.{which}.{param}")
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Snapshot of `model` and, if given, its optimiser state.
    pub fn capture<F: Scalar>(
        model: &Model<F>,
        optims: Option<&Optimizers<F>>,
        epoch: u64,
        run: serde_json::Value,
    ) -> Result<Self> {
        let meta = CheckpointMeta { model: model.config().clone(), run };
        let config = serde_json::to_string(&meta).map_err(|e| ck(format!("config snapshot: {e}")))?;
        let mut tensors: Vec<TensorRecord> =
            model.tensors().into_iter().map(|(n, a)| TensorRecord::from_array(n, a)).collect();
        let mut optim = Vec::new();
        if let Some(o) = optims {
            for (g, (group, state)) in model.groups().iter().zip(&o.states).enumerate() {
                let names: Vec<String> = model.group_params(g).into_iter().map(|(n, _)| n).collect();
                for (which, arrays) in [("m", &state.first), ("v", &state.second)] {
                    for (n, a) in names.iter().zip(arrays) {
                        tensors.push(TensorRecord::from_array(moment_name(group, which, n), a));
                    }
                }
                optim.push(OptimRecord { group: group.clone(), step_count: state.step_count });
            }
        }
        Ok(Self { epoch, config, tensors, optim })
    }

    pub fn meta(&self) -> Result<CheckpointMeta> {
        serde_json::from_str(&self.config).map_err(|e| ck(format!("config snapshot: {e}")))
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn index(&self) -> HashMap<&str, &TensorRecord> {
        self.tensors.iter().map(|t| (t.name.as_str(), t)).collect()
    }

    /// Decodes `wanted` (name, shape) pairs, failing with every missing or
    /// mismatched name before anything is returned.
    fn decode<F: Scalar>(&self, wanted: &[(String, Vec<usize>)]) -> Result<Vec<Array<F>>> {
        let idx = self.index();
        let missing: Vec<&str> = wanted.iter().filter(|(n, _)| !idx.contains_key(n.as_str())).map(|(n, _)| n.as_str()).collect();
        if !missing.is_empty() {
            return Err(ck(format!("missing tensors: {}", missing.join(", "))));
        }
        let bad: Vec<String> = wanted
            .iter()
            .filter(|(n, s)| idx[n.as_str()].shape != *s)
            .map(|(n, s)| format!("{n} (expected {s:?}, found {:?})", idx[n.as_str()].shape))
            .collect();
        if !bad.is_empty() {
            return Err(ck(format!("shape mismatch: {}", bad.join(", "))));
        }
        wanted.iter().map(|(n, _)| idx[n.as_str()].to_array()).collect()
    }

    fn check_model<F: Scalar>(&self, model: &Model<F>) -> Result<()> {
        let meta = self.meta()?;
        if meta.model != *model.config() {
            return Err(ck("checkpoint was written for a different model configuration"));
        }
        Ok(())
    }

    /// Overwrites every model tensor and, if given, the optimiser state.
    /// Nothing is modified unless everything validates.
    pub fn restore<F: Scalar>(&self, model: &mut Model<F>, optims: Option<&mut Optimizers<F>>) -> Result<()> {
        self.check_model(model)?;
        let wanted: Vec<(String, Vec<usize>)> = model.tensors().into_iter().map(|(n, a)| (n, a.shape().to_vec())).collect();
        let arrays = self.decode::<F>(&wanted)?;
        let states = match &optims {
            Some(_) => Some(self.decode_optim(model)?),
            None => None,
        };
        let mut it = arrays.into_iter();
        model.for_each_tensor_mut(|_, a| *a = it.next().expect("one array per tensor"));
        if let (Some(o), Some(s)) = (optims, states) {
            o.states = s;
        }
        Ok(())
    }

    fn decode_optim<F: Scalar>(&self, model: &Model<F>) -> Result<Vec<AdamState<F>>> {
        let groups = model.groups();
        if self.optim.len() != groups.len() || self.optim.iter().zip(&groups).any(|(r, g)| &r.group != g) {
            return Err(ck(format!(
                "optimiser groups {:?} do not match model groups {groups:?}",
                self.optim.iter().map(|r| r.group.as_str()).collect::<Vec<_>>()
            )));
        }
        groups
            .iter()
            .enumerate()
            .map(|(g, group)| {
                let params = model.group_params(g);
                let want = |which: &str| -> Vec<(String, Vec<usize>)> {
                    params.iter().map(|(n, a)| (moment_name(group, which, n), a.shape().to_vec())).collect()
                };
                let (wm, wv) = (want("m"), want("v"));
                Ok(AdamState { step_count: self.optim[g].step_count, first: self.decode(&wm)?, second: self.decode(&wv)? })
            })
            .collect()
    }

    /// Copies only the trunk tensors into `model`, whose trunk
    /// configuration must match.
    pub fn restore_trunk<F: Scalar>(&self, model: &mut Model<F>) -> Result<()> {
        let meta = self.meta()?;
        if meta.model.trunk != *model.trunk_config() {
            return Err(ck(format!(
                "checkpoint trunk {:?} does not match model trunk {:?}",
                meta.model.trunk,
                model.trunk_config()
            )));
        }
        let wanted: Vec<(String, Vec<usize>)> =
            model.trunk.params().into_iter().map(|(n, a)| (format!("trunk.{n}"), a.shape().to_vec())).collect();
        let arrays = self.decode::<F>(&wanted)?;
        for ((_, dst), src) in model.trunk.params_mut().into_iter().zip(arrays) {
            *dst = src;
        }
        Ok(())
    }

    /// Rebuilds a model from the snapshot alone.
    pub fn to_model<F: Scalar>(&self) -> Result<Model<F>> {
        let meta = self.meta()?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let mut model = Model::new(meta.model, &mut rng)?;
        self.restore(&mut model, None)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend_from_slice(&self.epoch.to_le_bytes());
        body.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        body.extend_from_slice(self.config.as_bytes());
        body.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            body.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            body.extend_from_slice(t.name.as_bytes());
            body.push(t.dtype.code());
            body.push(t.shape.len() as u8);
            for &d in &t.shape {
                body.extend_from_slice(&(d as u64).to_le_bytes());
            }
            body.extend_from_slice(&t.data);
        }
        body.extend_from_slice(&(self.optim.len() as u32).to_le_bytes());
        for o in &self.optim {
            body.extend_from_slice(&(o.group.len() as u16).to_le_bytes());
            body.extend_from_slice(o.group.as_bytes());
            body.extend_from_slice(&o.step_count.to_le_bytes());
        }
        let mut out = Vec::with_capacity(body.len() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 16 || &buf[..4] != MAGIC {
            return Err(ck("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(ck(format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
        }
        let body_len = u64::from_le_bytes(buf[8..16].try_into().unwrap());
        let expected = 16u64.checked_add(body_len).and_then(|n| n.checked_add(4));
        if expected != Some(buf.len() as u64) {
            return Err(ck(format!("length mismatch: header declares {body_len} body bytes, file has {}", buf.len())));
        }
        let body = &buf[16..buf.len() - 4];
        let crc = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
        if crc32fast::hash(body) != crc {
            return Err(ck("checksum mismatch"));
        }
        let mut r = BodyReader { buf: body, at: 0 };
        let epoch = r.u64()?;
        let n = r.u32()? as usize;
        let config = r.str(n)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = r.str(n)?;
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| ck(format!("tensor `{name}` has an unknown dtype")))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let bytes = numel
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| ck(format!("tensor `{name}` is too large")))?;
            let data = r.take(bytes)?.to_vec();
            tensors.push(TensorRecord { name, dtype, shape, data });
        }
        let groups = r.u32()? as usize;
        let mut optim = Vec::with_capacity(groups.min(1 << 16));
        for _ in 0..groups {
            let n = r.u16()? as usize;
            let group = r.str(n)?;
            optim.push(OptimRecord { group, step_count: r.u64()? });
        }
        if r.at != body.len() {
            return Err(ck(format!("{} trailing bytes in body", body.len() - r.at)));
        }
        Ok(Self { epoch, config, tensors, optim })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

struct BodyReader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> BodyReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(ck(format!("body truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
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

    fn str(&mut self, n: usize) -> Result<String> {
        let at = self.at;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ck(format!("invalid UTF-8 at body byte {at}")))
    }
}
