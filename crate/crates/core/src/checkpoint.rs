//! Binary training checkpoints.
//!
//! Layout (little-endian): `"VDTC"`, u32 version, u64 length + UTF-8 config
//! text, u64 trainer step, RNG state (32-byte seed, u64 stream, u128 word
//! position), u64 parameter count, then per parameter: u32 name length, name,
//! u32 rank, rank × u64 extents, u64 ADAM step count, and the value, first
//! moment and second moment as f64 arrays.

use std::fs;
use std::path::Path;

use crate::config::Config;
use crate::error::{contract, Error, Result};
use crate::model::Vdtr;
use crate::param::Module;
use crate::tensor_io::{put_f64s, put_u32, put_u64, ByteReader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VDTC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn records(model: &Vdtr) -> Vec<ParamRecord> {
        model
            .parameters()
            .iter()
            .map(|p| ParamRecord {
                name: p.name().to_string(),
                shape: p.shape().to_vec(),
                data: p.data().to_vec(),
                adam_m: p.adam_m().to_vec(),
                adam_v: p.adam_v().to_vec(),
                step_count: p.step_count(),
            })
            .collect()
    }

    /// Builds the model described by the stored config and loads every
    /// parameter and moment into it.
    pub fn model(&self) -> Result<Vdtr> {
        let mut model = Vdtr::new(&self.config.model, self.config.train.seed)?;
        let mut params = model.parameters_mut();
        if params.len() != self.params.len() {
            return Err(contract(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        for (p, rec) in params.iter_mut().zip(&self.params) {
            if p.name() != rec.name || p.shape() != rec.shape.as_slice() {
                return Err(contract(format!(
                    "checkpoint parameter {} {:?} does not match model parameter {} {:?}",
                    rec.name,
                    rec.shape,
                    p.name(),
                    p.shape()
                )));
            }
            p.set_data(rec.data.clone())?;
            p.set_adam_state(rec.adam_m.clone(), rec.adam_v.clone(), rec.step_count)?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let text = self.config.to_text();
        put_u64(&mut out, text.len() as u64);
        out.extend_from_slice(text.as_bytes());
        put_u64(&mut out, self.step);
        out.extend_from_slice(&self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u64(&mut out, self.params.len() as u64);
        for p in &self.params {
            put_u32(&mut out, p.name.len() as u32);
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.shape.len() as u32);
            for &e in &p.shape {
                put_u64(&mut out, e as u64);
            }
            put_u64(&mut out, p.step_count);
            put_f64s(&mut out, &p.data);
            put_f64s(&mut out, &p.adam_m);
            put_f64s(&mut out, &p.adam_v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = ByteReader::new(bytes);
        if &r.take::<4>()? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a VDTC checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let text_len = r.len()?;
        let text = String::from_utf8(r.bytes(text_len)?)
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
        let config = Config::parse(&text)?;
        let step = r.u64()?;
        let rng = RngState {
            seed: r.take()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.take()?),
        };
        let count = r.len()?;
        let mut params = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.bytes(name_len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| Error::Format(format!("parameter {name}: extents overflow")))?;
            let step_count = r.u64()?;
            params.push(ParamRecord {
                data: r.f64s(n)?,
                adam_m: r.f64s(n)?,
                adam_v: r.f64s(n)?,
                name,
                shape,
                step_count,
            });
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            config,
            step,
            rng,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Reads the whole file before decoding; nothing is returned unless it
    /// parses completely.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}
