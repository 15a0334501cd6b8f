//! Self-describing checkpoint container. The byte layout is documented in
//! `docs/formats.md`; every multi-byte value is little-endian.

use std::path::Path;

use crate::binio::{ByteReader, ByteWriter};
use crate::engine::optim::OptimizerState;
use crate::engine::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const FLAG_TRAINABLE: u8 = 1;
const FLAG_DECAY: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Canonical configuration text of the run.
    pub config_text: String,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u64(self.config_text.len() as u64);
        w.bytes(self.config_text.as_bytes());
        w.u64(self.optimizer.step);
        w.u32(self.params.len() as u32);
        for (_, p) in self.params.iter() {
            w.str32(&p.name);
            w.u32(p.value.rows() as u32);
            w.u32(p.value.cols() as u32);
            let mut flags = 0;
            if p.trainable {
                flags |= FLAG_TRAINABLE;
            }
            if p.decay {
                flags |= FLAG_DECAY;
            }
            w.u8(flags);
            w.f64s(p.value.data());
        }
        let o = &self.optimizer;
        w.f64(o.base_lr);
        w.f64(o.weight_decay);
        w.u64(o.horizon);
        w.f64(o.beta1);
        w.f64(o.beta2);
        w.f64(o.eps);
        for (m, v) in o.first_moment.iter().zip(&o.second_moment) {
            w.f64s(m.data());
            w.f64s(v.data());
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.corrupt("bad magic bytes"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let cfg_len = r.u64()? as usize;
        let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
            .map_err(|_| r.corrupt("config text is not UTF-8"))?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.str32()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let flags = r.u8()?;
            let values = r.f64s(rows * cols)?;
            if params.find(&name).is_some() {
                return Err(r.corrupt("duplicate parameter name"));
            }
            params.add(
                name,
                Mat::from_vec(rows, cols, values),
                flags & FLAG_TRAINABLE != 0,
                flags & FLAG_DECAY != 0,
            );
        }
        let mut optimizer = OptimizerState::new(&params, r.f64()?, r.f64()?, r.u64()?);
        optimizer.step = step;
        optimizer.beta1 = r.f64()?;
        optimizer.beta2 = r.f64()?;
        optimizer.eps = r.f64()?;
        for i in 0..params.len() {
            let n = optimizer.first_moment[i].len();
            let m = r.f64s(n)?;
            let v = r.f64s(n)?;
            optimizer.first_moment[i].data_mut().copy_from_slice(&m);
            optimizer.second_moment[i].data_mut().copy_from_slice(&v);
        }
        r.finish()?;
        Ok(Self {
            config_text,
            params,
            optimizer,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies stored values into `target`, which must have the same names and
    /// shapes in the same order.
    pub fn load_into(&self, target: &mut ParamStore) -> Result<()> {
        if target.len() != self.params.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                target.len()
            )));
        }
        for ((id, want), (_, have)) in target.clone().iter().zip(self.params.iter()) {
            if want.name != have.name || want.value.shape() != have.value.shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    want.name,
                    want.value.shape(),
                    have.name,
                    have.value.shape()
                )));
            }
            target.set_value(id, have.value.clone());
        }
        Ok(())
    }
}
