use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamHyper, AdamState, HistoryRow, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::kinetics::NormMeta;
use crate::model::ChemNNEModel;
use crate::tensor::Tensor;

pub const CNCK_MAGIC: &[u8; 4] = b"CNCK";
pub const CNCK_VERSION: u32 = 1;

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub norm_meta: Option<NormMeta>,
    pub iteration: usize,
    pub history: Vec<HistoryRow>,
    pub loss_trace: Vec<f64>,
    pub best_rmse: Option<f64>,
    pub adam: AdamHyper,
    pub adam_step: u64,
    pub params: Vec<(String, Tensor)>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub rng: ChaCha8Rng,
}

// The generator is compared by stream position; its buffered block is
// an implementation detail.
impl PartialEq for Checkpoint {
    fn eq(&self, o: &Self) -> bool {
        self.config == o.config
            && self.norm_meta == o.norm_meta
            && self.iteration == o.iteration
            && self.history == o.history
            && self.loss_trace == o.loss_trace
            && self.best_rmse == o.best_rmse
            && self.adam == o.adam
            && self.adam_step == o.adam_step
            && self.params == o.params
            && self.m == o.m
            && self.v == o.v
            && self.rng.get_seed() == o.rng.get_seed()
            && self.rng.get_stream() == o.rng.get_stream()
            && self.rng.get_word_pos() == o.rng.get_word_pos()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    train: TrainConfig,
    norm_meta: Option<NormMeta>,
    iteration: usize,
    history: Vec<HistoryRow>,
    loss_trace: Vec<f64>,
    best_rmse: Option<f64>,
    adam: AdamHyper,
}

/// Unsigned integers travel as 16-bit chunks, which f32 holds exactly.
fn to_chunks(bytes: &[u8]) -> Tensor {
    let data: Vec<f64> = bytes
        .chunks(2)
        .map(|c| u16::from_le_bytes([c[0], *c.get(1).unwrap_or(&0)]) as f64)
        .collect();
    Tensor::vector(data)
}

fn from_chunks(t: &Tensor, name: &str, n_bytes: usize) -> Result<Vec<u8>> {
    if t.numel() * 2 != n_bytes {
        return Err(Error::Config(format!("tensor {name}: expected {} entries, found {}", n_bytes / 2, t.numel())));
    }
    let mut out = Vec::with_capacity(n_bytes);
    for &v in t.data() {
        if !(0.0..=65535.0).contains(&v) || v.fract() != 0.0 {
            return Err(Error::Config(format!("tensor {name}: {v} is not a 16-bit chunk")));
        }
        out.extend_from_slice(&(v as u16).to_le_bytes());
    }
    Ok(out)
}

impl Checkpoint {
    pub(super) fn from_trainer(t: &Trainer) -> Checkpoint {
        Checkpoint {
            config: t.config.clone(),
            norm_meta: t.norm_meta.clone(),
            iteration: t.iteration,
            history: t.history.clone(),
            loss_trace: t.loss_trace.clone(),
            best_rmse: t.best_rmse,
            adam: t.adam.hyper,
            adam_step: t.adam.step,
            params: t.model.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            m: t.adam.m.clone(),
            v: t.adam.v.clone(),
            rng: t.rng.clone(),
        }
    }

    /// The model alone.
    pub fn model(&self) -> Result<ChemNNEModel> {
        ChemNNEModel::from_parts(&self.config.model, self.params.clone())
    }

    pub(super) fn into_trainer(self) -> Result<Trainer> {
        self.config.validate()?;
        let model = self.model()?;
        for (p, (m, v)) in model.params.iter().zip(self.m.iter().zip(&self.v)) {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::Config(format!("adam moments of {} have the wrong shape", p.name)));
            }
        }
        let mut trainer = Trainer::new(self.config, self.norm_meta)?;
        // The best parameters themselves live in best.cnck.
        trainer.best_rmse = self.best_rmse;
        trainer.model = model;
        trainer.adam = AdamState {
            hyper: self.adam,
            step: self.adam_step,
            m: self.m,
            v: self.v,
        };
        trainer.rng = self.rng;
        trainer.iteration = self.iteration;
        trainer.history = self.history;
        trainer.loss_trace = self.loss_trace;
        Ok(trainer)
    }
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        train: ck.config.clone(),
        norm_meta: ck.norm_meta.clone(),
        iteration: ck.iteration,
        history: ck.history.clone(),
        loss_trace: ck.loss_trace.clone(),
        best_rmse: ck.best_rmse,
        adam: ck.adam,
    })?;
    let mut tensors: Vec<(String, Tensor)> = ck.params.clone();
    tensors.push(("adam.step".into(), to_chunks(&ck.adam_step.to_le_bytes())));
    for ((name, _), m) in ck.params.iter().zip(&ck.m) {
        tensors.push((format!("adam.m.{name}"), m.clone()));
    }
    for ((name, _), v) in ck.params.iter().zip(&ck.v) {
        tensors.push((format!("adam.v.{name}"), v.clone()));
    }
    tensors.push(("rng.seed".into(), to_chunks(&ck.rng.get_seed())));
    tensors.push(("rng.stream".into(), to_chunks(&ck.rng.get_stream().to_le_bytes())));
    tensors.push(("rng.word_pos".into(), to_chunks(&ck.rng.get_word_pos().to_le_bytes())));

    let mut out = Vec::new();
    out.extend_from_slice(CNCK_MAGIC);
    out.extend_from_slice(&CNCK_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        if name.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
            return Err(Error::Config(format!("tensor {name} cannot be framed")));
        }
        push_tensor(&mut out, name, t);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            msg: format!(
                "{what}: expected {n} bytes, found {}",
                self.bytes.len() - self.pos
            ),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }

    fn tensor(&mut self, index: usize) -> Result<(String, Tensor)> {
        let start = self.pos;
        let len = u16::from_le_bytes(self.take(2, &format!("tensor #{index} name length"))?.try_into().expect("two bytes"));
        let name = std::str::from_utf8(self.take(len as usize, &format!("tensor #{index} name"))?)
            .map_err(|_| Error::Format {
                offset: start as u64,
                msg: format!("tensor #{index} name is not UTF-8"),
            })?
            .to_string();
        let rank = self.take(1, &format!("tensor {name} rank"))?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32(&format!("tensor {name} dims"))? as usize);
        }
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format {
            offset: start as u64,
            msg: format!("tensor {name}: dims {shape:?} overflow"),
        })?;
        let raw = self.take(count.saturating_mul(4), &format!("tensor {name} data"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")) as f64)
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CNCK_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected \"CNCK\"".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CNCK_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported checkpoint version {version}, expected {CNCK_VERSION}"),
        });
    }
    let len = r.u32("config length")? as usize;
    let at = r.pos;
    let header: Header = serde_json::from_slice(r.take(len, "config")?).map_err(|e| Error::Format {
        offset: at as u64,
        msg: format!("invalid config: {e}"),
    })?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        tensors.push(r.tensor(i)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes after the last tensor", bytes.len() - r.pos),
        });
    }

    let mut named = tensors.into_iter();
    let mut params = Vec::new();
    let mut step = None;
    for (name, t) in named.by_ref() {
        if name == "adam.step" {
            step = Some(t);
            break;
        }
        params.push((name, t));
    }
    let step = step.ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
    let adam_step = u64::from_le_bytes(from_chunks(&step, "adam.step", 8)?.try_into().expect("eight bytes"));
    let mut expect = |want: &str| -> Result<Tensor> {
        match named.next() {
            Some((name, t)) if name == want => Ok(t),
            Some((name, _)) => Err(Error::Config(format!("expected tensor {want}, found {name}"))),
            None => Err(Error::Config(format!("checkpoint is missing tensor {want}"))),
        }
    };
    let mut m = Vec::with_capacity(params.len());
    for (name, _) in &params {
        m.push(expect(&format!("adam.m.{name}"))?);
    }
    let mut v = Vec::with_capacity(params.len());
    for (name, _) in &params {
        v.push(expect(&format!("adam.v.{name}"))?);
    }
    let seed: [u8; 32] = from_chunks(&expect("rng.seed")?, "rng.seed", 32)?.try_into().expect("32 bytes");
    let stream = u64::from_le_bytes(from_chunks(&expect("rng.stream")?, "rng.stream", 8)?.try_into().expect("8 bytes"));
    let word_pos = u128::from_le_bytes(from_chunks(&expect("rng.word_pos")?, "rng.word_pos", 16)?.try_into().expect("16 bytes"));
    if let Some((name, _)) = named.next() {
        return Err(Error::Config(format!("unexpected tensor {name} after the rng state")));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    Ok(Checkpoint {
        config: header.train,
        norm_meta: header.norm_meta,
        iteration: header.iteration,
        history: header.history,
        loss_trace: header.loss_trace,
        best_rmse: header.best_rmse,
        adam: header.adam,
        adam_step,
        params,
        m,
        v,
        rng,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    std::fs::write(path, bytes).map_err(Error::io(path))
}

/// Read a checkpoint and check that it fits the current architecture.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    let ck = decode_checkpoint(&bytes)?;
    ck.model()?;
    Ok(ck)
}
