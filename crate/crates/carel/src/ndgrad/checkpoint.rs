//! Binary checkpoint format for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"NDG1"
//! version u32 (currently 1)
//! digest  32 bytes (caller-supplied configuration hash)
//! count   u32
//! record* name_len u32 | name utf-8 | rank u32 | dims u64* | data f64*
//! ```
//!
//! Values are stored as `f64` regardless of the runtime scalar; the scalar
//! trait converts on the way in and out.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

const MAGIC: [u8; 4] = *b"NDG1";
const VERSION: u32 = 1;

/// Named tensors plus the 32-byte configuration digest they were saved under.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub tensors: BTreeMap<String, Tensor<f64>>,
}

impl Checkpoint {
    pub fn new(digest: [u8; 32]) -> Self {
        Checkpoint {
            digest,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert<F: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<F>) {
        let data = t.data().iter().map(|v| v.to_f64_exact()).collect();
        let tensor = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.tensors.insert(name.into(), tensor);
    }

    /// Remove and convert a tensor, verifying its shape.
    pub fn extract<F: Scalar>(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<F>> {
        let t = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::contract(format!("checkpoint is missing tensor {name:?}")))?;
        if t.shape() != shape {
            return Err(Error::dimension(format!(
                "checkpoint tensor {name:?} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        let data = t.data().iter().map(|v| F::from_f64_exact(*v)).collect();
        Tensor::new(shape.to_vec(), data)
    }

    /// Convenience for scalar bookkeeping values (step counters etc.).
    pub fn insert_value(&mut self, name: impl Into<String>, v: f64) {
        self.tensors.insert(name.into(), Tensor::scalar(v));
    }

    pub fn extract_value(&mut self, name: &str) -> Result<f64> {
        let t: Tensor<f64> = self.extract(name, &[])?;
        Ok(t.data()[0])
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&ckpt.digest)?;
    let count = u32::try_from(ckpt.tensors.len())
        .map_err(|_| Error::contract("checkpoint has too many tensors"))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in &ckpt.tensors {
        let name_len = u32::try_from(name.len())
            .map_err(|_| Error::contract(format!("tensor name too long: {name:?}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(u32::try_from(t.shape().len()).unwrap()).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Version(format!(
            "not a checkpoint file (magic {magic:?})"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Version(format!(
            "checkpoint version {version} is not supported (expected {VERSION})"
        )));
    }
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest)?;

    let count = read_u32(&mut r)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Version("checkpoint tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product::<usize>().max(1);
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    Ok(Checkpoint { digest, tensors })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
