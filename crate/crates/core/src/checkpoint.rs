//! Checkpoint file format (all little-endian):
//!
//! ```text
//! magic "TNTC" | u32 version | u64 json_len | config JSON
//! u64 n_records | records: u32 name_len, name, u32 rank, u64 dims[rank], f64 data
//! u8 has_train_state
//!   [u64 step | u64 n_entries | entries: u32 name_len, name, u64 len,
//!    f64 m[len], f64 v[len]]
//! ```
//!
//! Loading validates the record names and shapes against the embedded
//! config, so a corrupted or mismatched file fails loudly instead of
//! producing a silently wrong model. Round trips are bit-exact.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::TntError;
use crate::model::{param_specs, Model, TntConfig};
use crate::tensor::Tensor;
use crate::training::{MomentEntry, OptimState};

pub const MAGIC: [u8; 4] = *b"TNTC";
pub const VERSION: u32 = 1;

/// Optimizer moments and step count as stored in a checkpoint.
#[derive(Debug, Clone)]
pub struct SavedTrainState {
    pub step: u64,
    pub moments: Vec<MomentEntry>,
}

impl SavedTrainState {
    pub fn from_optim(state: &OptimState) -> Self {
        SavedTrainState { step: state.step, moments: state.moments.clone() }
    }
}

pub fn save_model(model: &Model, path: &Path) -> Result<(), TntError> {
    save_with_state(model, None, path)
}

pub fn save_with_state(
    model: &Model,
    state: Option<&SavedTrainState>,
    path: &Path,
) -> Result<(), TntError> {
    let file = std::fs::File::create(path).map_err(|e| TntError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| TntError::io(path, e);

    w.write_all(&MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let config_json = serde_json::to_vec(&model.config)
        .map_err(|e| TntError::Format(format!("config serialization: {e}")))?;
    w.write_all(&(config_json.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&config_json).map_err(io_err)?;

    let flat = model.params.flatten();
    w.write_all(&(flat.len() as u64).to_le_bytes()).map_err(io_err)?;
    for (name, tensor) in flat {
        write_name(&mut w, &name).map_err(io_err)?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes()).map_err(io_err)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }

    match state {
        None => w.write_all(&[0u8]).map_err(io_err)?,
        Some(s) => {
            w.write_all(&[1u8]).map_err(io_err)?;
            w.write_all(&s.step.to_le_bytes()).map_err(io_err)?;
            w.write_all(&(s.moments.len() as u64).to_le_bytes()).map_err(io_err)?;
            for entry in &s.moments {
                write_name(&mut w, &entry.name).map_err(io_err)?;
                w.write_all(&(entry.m.len() as u64).to_le_bytes()).map_err(io_err)?;
                for v in &entry.m {
                    w.write_all(&v.to_le_bytes()).map_err(io_err)?;
                }
                for v in &entry.v {
                    w.write_all(&v.to_le_bytes()).map_err(io_err)?;
                }
            }
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_model(path: &Path) -> Result<Model, TntError> {
    Ok(load_full(path)?.0)
}

pub fn load_full(path: &Path) -> Result<(Model, Option<SavedTrainState>), TntError> {
    let file = std::fs::File::open(path).map_err(|e| TntError::io(path, e))?;
    let mut r = Reader { inner: BufReader::new(file) };

    let magic = r.bytes::<4>()?;
    if magic != MAGIC {
        return Err(TntError::Format(format!("bad magic {magic:02x?}, expected \"TNTC\"")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TntError::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let json_len = r.u64()? as usize;
    let config_bytes = r.vec(json_len)?;
    let config: TntConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| TntError::Format(format!("config JSON: {e}")))?;
    config.validate()?;

    let specs = param_specs(&config);
    let n_records = r.u64()? as usize;
    if n_records != specs.len() {
        return Err(TntError::Format(format!(
            "checkpoint holds {n_records} tensors, config implies {}",
            specs.len()
        )));
    }
    let mut tensors = Vec::with_capacity(n_records);
    for (expect_name, expect_shape) in &specs {
        let name = r.name()?;
        if name != *expect_name {
            return Err(TntError::Format(format!(
                "tensor order mismatch: found {name}, expected {expect_name}"
            )));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        if shape != *expect_shape {
            return Err(TntError::Format(format!(
                "{name}: shape {shape:?} disagrees with config ({expect_shape:?})"
            )));
        }
        let numel: usize = shape.iter().product();
        let data = r.f64s(numel)?;
        tensors.push(Tensor::new(shape, data).expect("validated shape"));
    }

    // Materialize the typed tree, then overwrite with the stored values.
    let mut model = Model::build(&config, 0)?;
    let mut it = tensors.into_iter();
    for (_, slot) in model.params.flatten_mut() {
        *slot = it.next().expect("record count checked");
    }

    let state = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let n = r.u64()? as usize;
            let mut moments = Vec::with_capacity(n);
            for _ in 0..n {
                let name = r.name()?;
                let len = r.u64()? as usize;
                let m = r.f64s(len)?;
                let v = r.f64s(len)?;
                moments.push(MomentEntry { name, m, v });
            }
            Some(SavedTrainState { step, moments })
        }
        other => return Err(TntError::Format(format!("bad train-state flag {other}"))),
    };
    Ok((model, state))
}

fn write_name<W: Write>(w: &mut W, name: &str) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], TntError> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| TntError::Format("checkpoint truncated".into()))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8, TntError> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32, TntError> {
        Ok(u32::from_le_bytes(self.bytes::<4>()?))
    }

    fn u64(&mut self) -> Result<u64, TntError> {
        Ok(u64::from_le_bytes(self.bytes::<8>()?))
    }

    fn vec(&mut self, len: usize) -> Result<Vec<u8>, TntError> {
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| TntError::Format("checkpoint truncated".into()))?;
        Ok(buf)
    }

    fn name(&mut self) -> Result<String, TntError> {
        let len = self.u32()? as usize;
        if len > 4096 {
            return Err(TntError::Format(format!("implausible name length {len}")));
        }
        String::from_utf8(self.vec(len)?)
            .map_err(|_| TntError::Format("tensor name is not UTF-8".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, TntError> {
        let bytes = self.vec(n * 8)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
