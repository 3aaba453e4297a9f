//! Binary tensor serialization.
//!
//! Tensor record: magic bytes "RSTN", u32 little-endian rank, `rank` u32
//! little-endian dims, then the raw little-endian f32 payload.
//!
//! Checkpoint container: u32 little-endian entry count, then per entry a
//! u32 length-prefixed UTF-8 name followed by a tensor record. Entries are
//! stored sorted by name so files are byte-stable.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"RSTN";

/// A named array with explicit dims, the unit of checkpoint storage.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn vector(data: Vec<f32>) -> Self {
        TensorRecord {
            dims: vec![data.len() as u32],
            data,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (n, c, h, w) = t.dims();
        TensorRecord {
            dims: vec![n as u32, c as u32, h as u32, w as u32],
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.dims.len() != 4 {
            return Err(CoreError::Format(format!(
                "expected rank-4 record, got rank {}",
                self.dims.len()
            )));
        }
        Tensor::from_vec(
            self.dims[0] as usize,
            self.dims[1] as usize,
            self.dims[2] as usize,
            self.dims[3] as usize,
            self.data.clone(),
        )
    }

    /// Stores UTF-8 text as one f32 per byte (rank 1).
    pub fn from_text(text: &str) -> Self {
        TensorRecord::vector(text.bytes().map(|b| b as f32).collect())
    }

    pub fn to_text(&self) -> Result<String> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(CoreError::Format("record is not encoded text".into()))
                }
            })
            .collect::<Result<_>>()?;
        String::from_utf8(bytes).map_err(|e| CoreError::Format(format!("bad text record: {e}")))
    }
}

pub fn write_tensor_record(w: &mut impl Write, rec: &TensorRecord) -> Result<()> {
    let numel: usize = rec.dims.iter().map(|&d| d as usize).product();
    if numel != rec.data.len() {
        return Err(CoreError::Format(format!(
            "record dims {:?} do not match data length {}",
            rec.dims,
            rec.data.len()
        )));
    }
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(rec.dims.len() as u32).to_le_bytes())?;
    for &d in &rec.dims {
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in &rec.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_record(r: &mut impl Read) -> Result<TensorRecord> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(CoreError::Format(format!(
            "bad tensor magic {:?}, expected \"RSTN\"",
            magic
        )));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(CoreError::Format(format!("unreasonable rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(r)?);
    }
    let numel: usize = dims.iter().map(|&d| d as usize).product();
    let mut buf = vec![0u8; numel * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(TensorRecord { dims, data })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// A named collection of tensor records, the on-disk checkpoint format.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, rec: TensorRecord) {
        self.entries.insert(name.into(), rec);
    }

    pub fn get(&self, name: &str) -> Result<&TensorRecord> {
        self.entries
            .get(name)
            .ok_or_else(|| CoreError::Format(format!("checkpoint missing entry \"{name}\"")))
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, rec) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            write_tensor_record(w, rec)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let count = read_u32(r)? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            let name = String::from_utf8(buf)
                .map_err(|e| CoreError::Format(format!("bad entry name: {e}")))?;
            entries.insert(name, read_tensor_record(r)?);
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        use std::io::Write as _;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Checkpoint::read(&mut f)
    }
}
