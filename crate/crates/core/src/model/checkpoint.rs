//! Checkpoint files: a text header followed by binary tensor records.
//!
//! ```text
//! edge-transformer-checkpoint 1
//! kind=encoder
//! model.d=64
//! ...                      (every model key, sorted)
//! tensors 42
//! ```
//! Each record is `u32 name length, name bytes, u32 rank, rank x u64 extents,
//! f32 payload`, all little-endian.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::encoder::EncoderModel;
use crate::model::seq2seq::Seq2SeqModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &str = "edge-transformer-checkpoint";
const VERSION: u32 = 1;

/// Which architecture a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Encoder,
    Seq2Seq,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Encoder => "encoder",
            ModelKind::Seq2Seq => "seq2seq",
        }
    }
}

fn write_store<T: Scalar, W: Write>(mut w: W, kind: ModelKind, cfg: &ModelConfig, store: &ParamStore<T>) -> Result<()> {
    writeln!(w, "{MAGIC} {VERSION}")?;
    writeln!(w, "kind={}", kind.as_str())?;
    write!(w, "{cfg}")?;
    writeln!(w, "tensors {}", store.len())?;
    for (_, p) in store.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &e in p.value.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Header {
    kind: ModelKind,
    config: ModelConfig,
    count: usize,
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Header> {
    let mut line = String::new();
    let mut next = |r: &mut R| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("truncated header"));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    let first = next(r)?;
    if first != format!("{MAGIC} {VERSION}") {
        return Err(bad(format!("unrecognized format line {first:?}")));
    }
    let kind = match next(r)?.as_str() {
        "kind=encoder" => ModelKind::Encoder,
        "kind=seq2seq" => ModelKind::Seq2Seq,
        other => return Err(bad(format!("unknown model kind line {other:?}"))),
    };
    let mut pairs = Vec::new();
    loop {
        let l = next(r)?;
        if let Some(count) = l.strip_prefix("tensors ") {
            let count = count.parse().map_err(|_| bad(format!("bad tensor count {count:?}")))?;
            let config = ModelConfig::from_pairs(pairs.iter().map(|(k, v): &(String, String)| (k.as_str(), v.as_str())))
                .map_err(|e| bad(format!("config: {e}")))?;
            return Ok(Header { kind, config, count });
        }
        let (k, v) = l.split_once('=').ok_or_else(|| bad(format!("malformed header line {l:?}")))?;
        pairs.push((k.to_string(), v.to_string()));
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated tensor record"))?;
    Ok(u32::from_le_bytes(b))
}

/// Overwrites `store` with the records that follow the header, requiring the
/// same names in the same order with identical shapes.
fn read_tensors<T: Scalar, R: Read>(r: &mut R, count: usize, store: &mut ParamStore<T>) -> Result<()> {
    if count != store.len() {
        return Err(bad(format!("{count} tensors stored, configuration defines {}", store.len())));
    }
    for p in store.iter_mut() {
        let len = read_u32(r)? as usize;
        if len > 4096 {
            return Err(bad("implausible tensor name length"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| bad("truncated tensor name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        if name != p.name {
            return Err(bad(format!("expected tensor {:?}, found {name:?}", p.name)));
        }
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank.min(8) {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated tensor shape"))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        if shape != p.value.shape() {
            return Err(bad(format!("tensor {name:?} has shape {shape:?}, configuration expects {:?}", p.value.shape())));
        }
        let mut bytes = vec![0u8; p.value.numel() * 4];
        r.read_exact(&mut bytes).map_err(|_| bad(format!("truncated payload of {name:?}")))?;
        let data: Vec<T> = bytes.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect();
        p.value = Tensor::new(&shape, data)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after the last tensor"));
    }
    Ok(())
}

fn open(path: &Path) -> Result<(Header, BufReader<std::fs::File>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let header = read_header(&mut r)?;
    Ok((header, r))
}

/// Reads only the kind and configuration of a checkpoint.
pub fn peek(path: &Path) -> Result<(ModelKind, ModelConfig)> {
    let (h, _) = open(path)?;
    Ok((h.kind, h.config))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

impl<T: Scalar> EncoderModel<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_store(create(path)?, ModelKind::Encoder, &self.config, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, mut r) = open(path)?;
        if h.kind != ModelKind::Encoder {
            return Err(bad(format!("checkpoint holds a {} model", h.kind.as_str())));
        }
        let mut model = EncoderModel::new(h.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        read_tensors(&mut r, h.count, &mut model.store)?;
        Ok(model)
    }
}

impl<T: Scalar> Seq2SeqModel<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_store(create(path)?, ModelKind::Seq2Seq, &self.config, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, mut r) = open(path)?;
        if h.kind != ModelKind::Seq2Seq {
            return Err(bad(format!("checkpoint holds a {} model", h.kind.as_str())));
        }
        let mut model = Seq2SeqModel::new(h.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        read_tensors(&mut r, h.count, &mut model.store)?;
        Ok(model)
    }
}
