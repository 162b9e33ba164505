//! Little-endian binary checkpoints: magic, version, config text, counters,
//! then named `f64` tensors.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use tokentrack_tensor::Tensor;

use crate::error::{Error, Result};
use crate::objectives::LossBreakdown;
use crate::params::ParamStore;
use crate::train::{AdamState, TrainState};

pub const MAGIC: &[u8; 8] = b"TKTRACK\0";
pub const VERSION: u32 = 1;
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const ADAM_T: &str = "adam.t";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Effective run configuration, as flat `key = value` text.
    pub config: String,
    pub step: u64,
    pub epoch: u64,
    pub tensors: Vec<(String, Tensor)>,
}

fn ckpt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

impl Checkpoint {
    /// Parameters, plus optimizer moments when `state` is given.
    pub fn capture(config: &str, store: &ParamStore, state: Option<&TrainState>) -> Self {
        let mut tensors: Vec<(String, Tensor)> = store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        let (mut step, mut epoch) = (0, 0);
        if let Some(s) = state {
            step = s.step;
            epoch = s.epoch as u64;
            for ((_, n, _), m) in store.iter().zip(&s.adam.m) {
                tensors.push((format!("{ADAM_M}{n}"), m.clone()));
            }
            for ((_, n, _), v) in store.iter().zip(&s.adam.v) {
                tensors.push((format!("{ADAM_V}{n}"), v.clone()));
            }
            tensors.push((ADAM_T.to_string(), Tensor::scalar(s.adam.t as f64)));
        }
        Self {
            config: config.to_string(),
            step,
            epoch,
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every parameter of `store` from the checkpoint. Missing names,
    /// shape mismatches, and unexpected parameter records are errors.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in &ids {
            let name = store.name(*id).to_string();
            let Some(t) = self.get(&name) else {
                return ckpt_err(format!("missing parameter {name}"));
            };
            if t.shape() != store.get(*id).shape() {
                return ckpt_err(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(*id).shape()
                ));
            }
            *store.get_mut(*id) = t.clone();
        }
        let extra: Vec<&str> = self
            .tensors
            .iter()
            .map(|(n, _)| n.as_str())
            .filter(|n| !n.starts_with("adam.") && store.find(n).is_none())
            .collect();
        if !extra.is_empty() {
            return ckpt_err(format!(
                "checkpoint has parameters the model lacks: {}",
                extra.join(", ")
            ));
        }
        Ok(())
    }

    /// Optimizer state and counters, if the checkpoint carries them.
    pub fn restore_state(&self, store: &ParamStore) -> Result<Option<TrainState>> {
        let Some(t) = self.get(ADAM_T) else {
            return Ok(None);
        };
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for (_, n, p) in store.iter() {
            for (prefix, out) in [(ADAM_M, &mut m), (ADAM_V, &mut v)] {
                match self.get(&format!("{prefix}{n}")) {
                    Some(x) if x.shape() == p.shape() => out.push(x.clone()),
                    _ => return ckpt_err(format!("missing or misshapen optimizer moment {prefix}{n}")),
                }
            }
        }
        Ok(Some(TrainState {
            step: self.step,
            epoch: self.epoch as usize,
            adam: AdamState {
                t: t.data()[0] as u64,
                m,
                v,
            },
            running: LossBreakdown::default(),
        }))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return ckpt_err("not a checkpoint (bad magic)");
        }
        let version = r.u32()?;
        if version != VERSION {
            return ckpt_err(format!("unsupported checkpoint version {version}, expected {VERSION}"));
        }
        let len = r.len()?;
        let config =
            String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let step = r.u64()?;
        let epoch = r.u64()?;
        let count = r.len()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name =
                String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} overruns the file")))?;
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::from_vec(shape, data)));
        }
        if r.remaining() != 0 {
            return ckpt_err(format!("{} trailing bytes", r.remaining()));
        }
        Ok(Self {
            config,
            step,
            epoch,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        // write-then-rename so a crash never leaves a torn checkpoint
        let tmp = path.with_extension("tmp");
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        drop(w);
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
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
            return ckpt_err("truncated checkpoint");
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
