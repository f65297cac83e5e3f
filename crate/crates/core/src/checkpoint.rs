//! Versioned binary checkpoints: model parameters, hyperparameters and
//! optimizer state.
//!
//! Layout (little endian): `TFIR`, `u32` version, `u32`-prefixed
//! `key=value` text block, `u32` record count, then records of
//! `u32`-prefixed name, `u32` rank, `u64` dims, `f64` values. A trailing
//! `u64` FNV-1a hash covers everything before it.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Hyperparams, Model};
use crate::numerics::Adam;

pub const MAGIC: &[u8; 4] = b"TFIR";
pub const FORMAT_VERSION: u32 = 1;

const STEP_RECORD: &str = "optim.step";

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

struct Record {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(model: &Model, opt: &Adam) -> Vec<u8> {
    let mut header = model.hp.to_kv();
    header.push_str(&format!(
        "num_entities={}\nnum_base_relations={}\n",
        model.num_entities(),
        model.num_base_relations()
    ));
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, header.len());
    out.extend_from_slice(header.as_bytes());

    let (m, v) = opt.moments();
    let with_moments = !m.is_empty();
    let count = model.store.len() * if with_moments { 3 } else { 1 } + 1;
    put_u32(&mut out, count);
    for (name, t) in model.store.iter() {
        put_record(&mut out, name, t.shape(), t.data());
    }
    if with_moments {
        for (prefix, buf) in [("adam.m.", m), ("adam.v.", v)] {
            for ((name, t), b) in model.store.iter().zip(buf) {
                put_record(&mut out, &format!("{prefix}{name}"), t.shape(), b);
            }
        }
    }
    put_record(&mut out, STEP_RECORD, &[1], &[opt.steps_taken() as f64]);
    let hash = fnv1a(&out);
    out.extend_from_slice(&hash.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Integrity(format!("checkpoint truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn record(&mut self) -> Result<Record> {
        let len = self.u32()?;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?;
        let rank = self.u32()?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(self.u64()?).map_err(|_| Error::Integrity("dimension overflow".into()))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Integrity(format!("shape {shape:?} of {name} overflows")))?;
        let raw = self.take(numel.checked_mul(8).ok_or_else(|| Error::Integrity("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Record { name, shape, data })
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Adam)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Integrity("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    if bytes.len() < 16 {
        return Err(Error::Integrity("checkpoint truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(Error::Integrity("checksum mismatch (file corrupt or truncated)".into()));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let hlen = r.u32()?;
    let header = std::str::from_utf8(r.take(hlen)?)
        .map_err(|_| Error::Integrity("hyperparameter block is not UTF-8".into()))?;
    let mut hp_lines = String::new();
    let (mut ne, mut nr) = (None, None);
    for line in header.lines() {
        match line.split_once('=') {
            Some(("num_entities", v)) => ne = v.parse::<usize>().ok(),
            Some(("num_base_relations", v)) => nr = v.parse::<usize>().ok(),
            _ => {
                hp_lines.push_str(line);
                hp_lines.push('\n');
            }
        }
    }
    let hp = Hyperparams::from_kv(&hp_lines).map_err(|e| Error::Incompatible(format!("hyperparameter block: {e}")))?;
    let (ne, nr) = ne
        .zip(nr)
        .ok_or_else(|| Error::Integrity("header lacks vocabulary sizes".into()))?;
    let mut model = Model::build(&hp, ne, nr).map_err(|e| Error::Incompatible(e.to_string()))?;

    let count = r.u32()?;
    let mut records = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        records.push(r.record()?);
    }
    if r.pos != body.len() {
        return Err(Error::Integrity(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let mut seen = vec![false; model.store.len()];
    let ids: Vec<_> = model.store.ids().collect();
    let mut m = vec![Vec::new(); ids.len()];
    let mut v = vec![Vec::new(); ids.len()];
    let mut step = None;
    for rec in records {
        if rec.name == STEP_RECORD {
            step = rec.data.first().map(|&s| s as u64);
            continue;
        }
        let (slot, name) = if let Some(n) = rec.name.strip_prefix("adam.m.") {
            (Some(&mut m), n)
        } else if let Some(n) = rec.name.strip_prefix("adam.v.") {
            (Some(&mut v), n)
        } else {
            (None, rec.name.as_str())
        };
        let id = model
            .store
            .find(name)
            .ok_or_else(|| Error::Incompatible(format!("unexpected tensor {:?}", rec.name)))?;
        let t = model.store.get_mut(id);
        if t.shape() != rec.shape.as_slice() {
            return Err(Error::Incompatible(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                rec.name,
                rec.shape,
                t.shape()
            )));
        }
        match slot {
            Some(buf) => buf[id.index()] = rec.data,
            None => {
                t.data_mut().copy_from_slice(&rec.data);
                seen[id.index()] = true;
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Incompatible(format!("missing tensor {}", model.store.name(ids[i]))));
    }
    let mut opt = Adam::new(hp.lr);
    let has_m = m.iter().any(|b| !b.is_empty());
    if has_m {
        if m.iter().chain(&v).zip(ids.iter().chain(&ids)).any(|(b, &id)| b.len() != model.store.get(id).numel()) {
            return Err(Error::Integrity("incomplete optimizer moments".into()));
        }
        opt.restore(step.unwrap_or(0), m, v)?;
    } else {
        opt.restore(step.unwrap_or(0), Vec::new(), Vec::new())?;
    }
    Ok((model, opt))
}

pub fn save(model: &Model, opt: &Adam, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model, opt)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<(Model, Adam)> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}
