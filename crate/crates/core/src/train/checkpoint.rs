//! Binary checkpoints.
//!
//! Layout (little-endian): magic `MARTCKPT`, `u32` format version, then
//! records `name_len: u32, name: utf8, rank: u32, dims: u32[rank],
//! data: f32[∏dims]` until end of file.
//!
//! Non-tensor state is stored in the same record form: text as one `f32` per
//! byte, integers as `f32` 16-bit limbs (least significant first).

use std::path::Path;

use indexmap::IndexMap;

use super::TrainConfig;
use crate::diffcore::{AdamState, Tensor};
use crate::error::{MartError, Result};
use crate::model::ParamStore;

pub const MAGIC: &[u8; 8] = b"MARTCKPT";
pub const VERSION: u32 = 1;

/// Position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub adam: AdamState<f32>,
    pub rng: RngState,
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
}

fn limbs(x: u128, n: usize) -> Vec<f32> {
    (0..n).map(|i| ((x >> (16 * i)) & 0xFFFF) as f32).collect()
}

fn from_limbs(name: &str, v: &[f32]) -> Result<u128> {
    let mut x = 0u128;
    for (i, &l) in v.iter().enumerate() {
        if !(0.0..65536.0).contains(&l) || l.fract() != 0.0 {
            return Err(MartError::parse(0, format!("record {name}: {l} is not a 16-bit limb")));
        }
        x |= (l as u128) << (16 * i);
    }
    Ok(x)
}

struct Writer(Vec<u8>);

impl Writer {
    fn record(&mut self, name: &str, dims: &[usize], data: &[f32]) {
        let b = &mut self.0;
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in data {
            b.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn vector(&mut self, name: &str, data: &[f32]) {
        self.record(name, &[data.len()], data);
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(MAGIC.to_vec());
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    let text: Vec<f32> = ck.config.to_text().bytes().map(f32::from).collect();
    w.vector("config", &text);
    w.vector("train.step", &limbs(ck.step as u128, 4));
    w.vector("train.epoch", &limbs(ck.epoch as u128, 4));
    let seed: Vec<f32> = ck.rng.seed.iter().map(|&b| f32::from(b)).collect();
    w.vector("rng.seed", &seed);
    w.vector("rng.stream", &limbs(ck.rng.stream as u128, 4));
    w.vector("rng.word_pos", &limbs(ck.rng.word_pos, 8));
    for (k, t) in &ck.store.params {
        w.record(&format!("param/{k}"), t.shape(), t.data());
    }
    for (k, t) in &ck.store.buffers {
        w.record(&format!("buffer/{k}"), t.shape(), t.data());
    }
    let a = &ck.adam;
    w.vector("adam.step", &limbs(a.step as u128, 4));
    w.vector("adam.hyper", &[a.learning_rate, a.weight_decay, a.beta1, a.beta2, a.epsilon]);
    for (k, (m, v)) in ck.store.params.keys().zip(a.first_moment.iter().zip(&a.second_moment)) {
        w.vector(&format!("adam.m/{k}"), m);
        w.vector(&format!("adam.v/{k}"), v);
    }
    w.0
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.at < n {
            return Err(MartError::parse(
                self.at as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.at),
            ));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

type Records = IndexMap<String, (Vec<usize>, Vec<f32>)>;

fn read_records(bytes: &[u8]) -> Result<Records> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(MartError::parse(0, "not a checkpoint: bad magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(MartError::parse(8, format!("unsupported checkpoint version {version}")));
    }
    let mut out = IndexMap::new();
    while r.at < bytes.len() {
        let start = r.at as u64;
        let len = r.u32("record name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "record name")?)
            .map_err(|_| MartError::parse(start, "record name is not UTF-8"))?
            .to_string();
        let rank = r.u32("record rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("record dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| MartError::parse(start, format!("record {name}: size overflows")))?;
        let data = r
            .take(count, &format!("data of {name}"))?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if out.insert(name.clone(), (dims, data)).is_some() {
            return Err(MartError::parse(start, format!("duplicate record {name}")));
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut recs = read_records(bytes)?;
    let end = bytes.len() as u64;
    let mut take = |name: &str| {
        recs.shift_remove(name)
            .ok_or_else(|| MartError::parse(end, format!("missing record {name}")))
    };
    let text_bytes: Vec<u8> = take("config")?.1.iter().map(|&b| b as u8).collect();
    let text = String::from_utf8(text_bytes).map_err(|_| MartError::parse(end, "config record is not UTF-8"))?;
    let config = TrainConfig::parse(&text)?;
    let step = from_limbs("train.step", &take("train.step")?.1)? as u64;
    let epoch = from_limbs("train.epoch", &take("train.epoch")?.1)? as u64;
    let seed_vals = take("rng.seed")?.1;
    let seed: [u8; 32] = seed_vals
        .iter()
        .map(|&b| b as u8)
        .collect::<Vec<u8>>()
        .try_into()
        .map_err(|_| MartError::parse(end, "rng seed must have 32 bytes"))?;
    let rng = RngState {
        seed,
        stream: from_limbs("rng.stream", &take("rng.stream")?.1)? as u64,
        word_pos: from_limbs("rng.word_pos", &take("rng.word_pos")?.1)?,
    };
    let adam_step = from_limbs("adam.step", &take("adam.step")?.1)? as u64;
    let hyper = take("adam.hyper")?.1;
    if hyper.len() != 5 {
        return Err(MartError::parse(end, "adam.hyper must have 5 entries"));
    }

    let mut params = IndexMap::new();
    let mut buffers = IndexMap::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (name, (dims, data)) in recs {
        if let Some(k) = name.strip_prefix("param/") {
            params.insert(k.to_string(), Tensor::new(dims, data)?);
        } else if let Some(k) = name.strip_prefix("buffer/") {
            buffers.insert(k.to_string(), Tensor::new(dims, data)?);
        } else if let Some(k) = name.strip_prefix("adam.m/") {
            first.push((k.to_string(), data));
        } else if let Some(k) = name.strip_prefix("adam.v/") {
            second.push((k.to_string(), data));
        } else {
            return Err(MartError::parse(end, format!("unknown record {name}")));
        }
    }
    let aligned = |moments: Vec<(String, Vec<f32>)>| -> Result<Vec<Vec<f32>>> {
        if moments.is_empty() {
            return Ok(Vec::new());
        }
        if moments.len() != params.len() {
            return Err(MartError::parse(end, "optimizer moments do not cover every parameter"));
        }
        moments
            .into_iter()
            .zip(params.iter())
            .map(|((k, m), (pk, p))| {
                if &k != pk || m.len() != p.len() {
                    Err(MartError::parse(end, format!("optimizer moment {k} does not match parameter {pk}")))
                } else {
                    Ok(m)
                }
            })
            .collect()
    };
    let adam = AdamState {
        step: adam_step,
        learning_rate: hyper[0],
        weight_decay: hyper[1],
        beta1: hyper[2],
        beta2: hyper[3],
        epsilon: hyper[4],
        first_moment: aligned(first)?,
        second_moment: aligned(second)?,
    };
    Ok(Checkpoint {
        config,
        store: ParamStore { params, buffers },
        adam,
        rng,
        step,
        epoch,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_checkpoint(ck)).map_err(|e| MartError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| MartError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| MartError::io(path, e))?;
    decode_checkpoint(&bytes)
}
