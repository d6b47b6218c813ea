//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `RGLA`, `u32` version, `u8` element width in
//! bytes, `u32`-prefixed config JSON, the random stream (32-byte seed, `u64`
//! stream id, `u128` word position), `u64` step, `u64` optimizer updates,
//! `u32` tensor count, then tensors as `u32` name length, name, `u32` rank,
//! `u64` dims and raw values. Optimizer moments are stored as
//! `adam.m.<name>` and `adam.v.<name>`.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regla_core::{Params, Scalar};

use crate::config::ExperimentConfig;
use crate::error::{LmError, Result};
use crate::model::Model;
use crate::optim::AdamW;
use crate::tasks::Task;
use crate::train::Trainer;

pub const MAGIC: &[u8; 4] = b"RGLA";
pub const VERSION: u32 = 1;

/// Everything needed to resume training bit-for-bit.
pub struct Checkpoint<T> {
    pub config: ExperimentConfig,
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_trainer(tr: &Trainer<T>) -> Self {
        Self {
            config: tr.config.clone(),
            model: tr.model.clone(),
            optimizer: tr.optimizer.clone(),
            rng: tr.rng.clone(),
            step: tr.step,
        }
    }

    pub fn into_trainer(self, task: Task) -> Trainer<T> {
        Trainer::restore(self.config, self.model, self.optimizer, task, self.rng, self.step)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.push(std::mem::size_of::<T>() as u8);
        let json = self.config.to_json();
        out.extend((json.len() as u32).to_le_bytes());
        out.extend(json.as_bytes());
        out.extend(self.rng.get_seed());
        out.extend(self.rng.get_stream().to_le_bytes());
        out.extend(self.rng.get_word_pos().to_le_bytes());
        out.extend((self.step as u64).to_le_bytes());
        out.extend((self.optimizer.t as u64).to_le_bytes());
        let mut tensors: Vec<(String, Vec<usize>, Vec<T>)> = Vec::new();
        self.model.visit(&mut |n, s, v| tensors.push((n.to_string(), s.to_vec(), v.to_vec())));
        for mo in &self.optimizer.moments {
            tensors.push((format!("adam.m.{}", mo.name), mo.shape.clone(), mo.m.clone()));
            tensors.push((format!("adam.v.{}", mo.name), mo.shape.clone(), mo.v.clone()));
        }
        out.extend((tensors.len() as u32).to_le_bytes());
        for (name, shape, values) in &tensors {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend((d as u64).to_le_bytes());
            }
            for &v in values {
                if std::mem::size_of::<T>() == 4 {
                    out.extend((v.as_f64() as f32).to_le_bytes());
                } else {
                    out.extend(v.as_f64().to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(4)? != MAGIC {
            return Err(bad("missing RGLA magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let width = r.take(1)?[0] as usize;
        if width != 4 && width != 8 {
            return Err(bad("element width must be 4 or 8"));
        }
        let json_len = r.u32()? as usize;
        let json = std::str::from_utf8(r.take(json_len)?).map_err(|_| bad("config is not UTF-8"))?;
        let config = ExperimentConfig::from_json(json)?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let step = r.u64()? as usize;
        let t = r.u64()? as usize;
        let n = r.u32()? as usize;
        let mut tensors = std::collections::BTreeMap::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = r.take(count.checked_mul(width).ok_or_else(|| bad("tensor too large"))?)?;
            let values: Vec<T> = raw
                .chunks_exact(width)
                .map(|c| match width {
                    4 => T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                    _ => T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
                })
                .collect();
            tensors.insert(name, (shape, values));
        }
        if !r.buf.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let mut model = Model::<T>::build(config.model.clone(), config.train.seed)?;
        let mut missing = None;
        model.visit_mut(&mut |name, shape, dst| match tensors.get(name) {
            Some((s, v)) if s == shape => dst.copy_from_slice(v),
            _ => missing = Some(name.to_string()),
        });
        if let Some(name) = missing {
            return Err(bad(&format!("tensor {name} missing or misshapen")));
        }
        let tc = &config.train;
        let mut optimizer = AdamW::new(&model, tc.lr, (tc.beta1, tc.beta2), tc.adam_eps, tc.weight_decay, tc.warmup_steps);
        optimizer.t = t;
        for mo in &mut optimizer.moments {
            for (key, dst) in [("m", &mut mo.m), ("v", &mut mo.v)] {
                let (s, v) = tensors
                    .get(&format!("adam.{key}.{}", mo.name))
                    .ok_or_else(|| bad(&format!("moment {key} of {} missing", mo.name)))?;
                if *s != mo.shape {
                    return Err(bad(&format!("moment {key} of {} misshapen", mo.name)));
                }
                dst.copy_from_slice(v);
            }
        }
        Ok(Self {
            config,
            model,
            optimizer,
            rng,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn bad(msg: &str) -> LmError {
    LmError::Checkpoint(msg.to_string())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(bad("truncated"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
