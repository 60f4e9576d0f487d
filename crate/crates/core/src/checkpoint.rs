//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DDN1"  u32 version
//! u32 entries, then per entry: str key, str value          (metadata, sorted)
//! u32 arrays,  then per array: str name, u32 ndim, u64 dims..., f64 payload
//! ```
//!
//! where `str` is a `u32` byte length followed by UTF-8 bytes. Saving a
//! loaded checkpoint reproduces the original bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{DdnError, Result};
use crate::linalg::Matrix;
use crate::network::{NetworkConfig, NetworkParams};
use crate::shape::ShapeBasis;
use crate::trainer::{EpochRecord, TrainState};

pub const MAGIC: &[u8; 4] = b"DDN1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    arrays: Vec<Array>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn arrays(&self) -> &[Array] {
        &self.arrays
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| DdnError::Format(format!("checkpoint has no {key:?} entry")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse().map_err(|_| DdnError::Format(format!("checkpoint entry {key:?} has bad value {v:?}")))
    }

    /// Adds an array; names must be unique and `data` must fill `shape`.
    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        if self.arrays.iter().any(|a| a.name == name) {
            return Err(DdnError::Format(format!("duplicate array {name:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(DdnError::shape(format!("array {name:?}: shape {shape:?} holds {len} values, got {}", data.len())));
        }
        self.arrays.push(Array {
            name: name.to_string(),
            shape,
            data,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| DdnError::Format(format!("checkpoint has no array {name:?}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.arrays.iter().any(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            put_str(&mut out, &a.name);
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for d in &a.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(DdnError::Format("not a checkpoint: bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(DdnError::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            if ck.metadata.insert(k.clone(), v).is_some() {
                return Err(DdnError::Format(format!("duplicate metadata key {k:?}")));
            }
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| DdnError::Format("array dimension overflows".into()))?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .filter(|l| l.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| DdnError::Format(format!("array {name:?} is truncated")))?;
            let data = r
                .take(len * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            ck.push(&name, shape, data)?;
        }
        if r.remaining() != 0 {
            return Err(DdnError::Format(format!("{} trailing bytes after the last array", r.remaining())));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| DdnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| DdnError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn put_params(&mut self, prefix: &str, params: &NetworkParams) -> Result<()> {
        for t in params.tensors() {
            self.push(&format!("{prefix}.{}", t.name), t.shape, t.data.to_vec())?;
        }
        Ok(())
    }

    /// Reads tensors written by [`Checkpoint::put_params`] into a network
    /// of the given configuration and sizes.
    pub fn get_params(&self, prefix: &str, config: &NetworkConfig, landmarks: usize, rank: usize, controls: usize) -> Result<NetworkParams> {
        let mut params = NetworkParams::zeros(config, landmarks, rank, controls)?;
        let shapes: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        for ((name, shape), t) in shapes.iter().zip(params.tensors_mut()) {
            let a = self.get(&format!("{prefix}.{name}"))?;
            if &a.shape != shape {
                return Err(DdnError::Contract(format!(
                    "tensor {name} has shape {:?} in the checkpoint, network expects {shape:?}",
                    a.shape
                )));
            }
            t.data.copy_from_slice(&a.data);
        }
        Ok(params)
    }

    pub fn put_basis(&mut self, basis: &ShapeBasis) -> Result<()> {
        let b = &basis.basis;
        self.push("basis.mean", vec![basis.mean.len()], basis.mean.clone())?;
        self.push("basis.vectors", vec![b.rows(), b.cols()], b.data().to_vec())?;
        self.push("basis.eigenvalues", vec![basis.eigenvalues.len()], basis.eigenvalues.clone())?;
        self.push("basis.energy_fraction", vec![1], vec![basis.energy_fraction])
    }

    pub fn get_basis(&self) -> Result<ShapeBasis> {
        let v = self.get("basis.vectors")?;
        if v.shape.len() != 2 {
            return Err(DdnError::Format("basis.vectors must be a matrix".into()));
        }
        let basis = ShapeBasis {
            mean: self.get("basis.mean")?.data.clone(),
            basis: Matrix::from_vec(v.shape[0], v.shape[1], v.data.clone())?,
            eigenvalues: self.get("basis.eigenvalues")?.data.clone(),
            energy_fraction: self.get("basis.energy_fraction")?.data.first().copied().unwrap_or(f64::NAN),
        };
        if basis.mean.len() != basis.basis.rows() || basis.eigenvalues.len() != basis.basis.cols() {
            return Err(DdnError::Format("basis arrays disagree in size".into()));
        }
        Ok(basis)
    }

    /// Stores weights, coefficient scales, momentum, schedule position and
    /// loss curve of a stage. A missing held-out loss is stored as NaN.
    pub fn put_state(&mut self, state: &TrainState) -> Result<()> {
        self.put_params("params", &state.params)?;
        self.push("params.coeff_scale", vec![state.params.coeff_scale().len()], state.params.coeff_scale().to_vec())?;
        self.put_params("velocity", &state.velocity)?;
        self.push("state.position", vec![2], vec![state.phase as f64, state.phase_epoch as f64])?;
        let rows: Vec<f64> = state
            .curve
            .iter()
            .flat_map(|r| [r.epoch as f64, r.phase as f64, r.train_loss, r.heldout_loss.unwrap_or(f64::NAN)])
            .collect();
        self.push("state.curve", vec![state.curve.len(), 4], rows)
    }

    pub fn get_state(&self, config: &NetworkConfig, basis: &ShapeBasis, controls: usize) -> Result<TrainState> {
        let (n, k) = (basis.landmark_count(), basis.rank());
        let mut params = self.get_params("params", config, n, k, controls)?;
        params.set_coeff_scale(self.get("params.coeff_scale")?.data.clone())?;
        let velocity = self.get_params("velocity", config, n, k, controls)?;
        let pos = &self.get("state.position")?.data;
        let curve_arr = self.get("state.curve")?;
        if pos.len() != 2 || curve_arr.shape.len() != 2 || curve_arr.shape[1] != 4 {
            return Err(DdnError::Format("malformed training state".into()));
        }
        let index = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && v < 1e15 {
                Ok(v as usize)
            } else {
                Err(DdnError::Format(format!("bad index {v} in training state")))
            }
        };
        let curve = curve_arr
            .data
            .chunks_exact(4)
            .map(|r| {
                Ok(EpochRecord {
                    epoch: index(r[0])?,
                    phase: index(r[1])?,
                    train_loss: r[2],
                    heldout_loss: Some(r[3]).filter(|v| !v.is_nan()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainState {
            params,
            velocity,
            phase: index(pos[0])?,
            phase_epoch: index(pos[1])?,
            curve,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(DdnError::Format("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| DdnError::Format("metadata is not UTF-8".into()))
    }
}
