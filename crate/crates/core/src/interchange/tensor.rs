//! `.iclt` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0  magic     b"ICLT"
//! offset 4  version   u8 = 1
//! offset 5  dtype     u8 (1 = f32, 2 = f16, 3 = u8)
//! offset 6  rank      u8
//! offset 7  padding   u8 = 0
//! offset 8  extents   rank x u64
//!           payload   row-major scalars
//! ```
//!
//! f16 payloads are IEEE 754 binary16 and are widened to f32 on load. u8 is
//! used for 0/1 mask matrices.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use half::f16;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ICLT";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F16,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F16 => 2,
            DType::U8 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::F16),
            3 => Ok(DType::U8),
            other => Err(Error::format(format!("unsupported dtype code {other}"))),
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
            DType::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::U8 => "u8",
        }
    }
}

/// Dense row-major tensor. Values are held as f32 whatever the storage dtype;
/// `dtype` decides the on-disk encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<u64>,
    data: Vec<f32>,
}

fn element_count(shape: &[u64]) -> Result<usize> {
    shape.iter().try_fold(1usize, |acc, &extent| {
        usize::try_from(extent)
            .ok()
            .and_then(|e| acc.checked_mul(e))
            .ok_or_else(|| Error::format(format!("shape {shape:?} overflows the address space")))
    })
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        if shape.len() > u8::MAX as usize {
            return Err(Error::format(format!("rank {} exceeds 255", shape.len())));
        }
        let expected = element_count(&shape)?;
        if expected != data.len() {
            return Err(Error::format(format!(
                "shape {shape:?} needs {expected} scalars, got {}",
                data.len()
            )));
        }
        Ok(Self { dtype, shape, data })
    }

    pub fn from_f32(shape: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        Self::new(DType::F32, shape, data)
    }

    /// 0/1 mask tensor stored as u8.
    pub fn from_mask(shape: Vec<u64>, mask: &[bool]) -> Result<Self> {
        let data = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Self::new(DType::U8, shape, data)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Re-encode under another dtype. Values are converted on write, so a
    /// narrowing cast only takes effect after a write/read cycle.
    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    fn encode_payload(&self, out: &mut Vec<u8>) -> Result<()> {
        out.reserve(self.data.len() * self.dtype.width());
        match self.dtype {
            DType::F32 => {
                for v in &self.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            DType::F16 => {
                for v in &self.data {
                    out.extend_from_slice(&f16::from_f32(*v).to_le_bytes());
                }
            }
            DType::U8 => {
                for &v in &self.data {
                    if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                        return Err(Error::format(format!("value {v} is not representable as u8")));
                    }
                    out.push(v as u8);
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.rank() + 4 * self.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.dtype.code());
        out.push(self.rank() as u8);
        out.push(0);
        for extent in &self.shape {
            out.extend_from_slice(&extent.to_le_bytes());
        }
        self.encode_payload(&mut out)?;
        Ok(out)
    }
}

pub fn write_tensor<W: Write>(tensor: &Tensor, mut sink: W) -> Result<()> {
    let bytes = tensor.to_bytes()?;
    sink.write_all(&bytes)
        .map_err(|e| Error::format(format!("write failed: {e}")))?;
    Ok(())
}

fn read_exact_or<R: Read>(source: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(format!("truncated {what}")),
        _ => Error::format(format!("read failed in {what}: {e}")),
    })
}

pub fn read_tensor<R: Read>(mut source: R) -> Result<Tensor> {
    let mut header = [0u8; HEADER_LEN];
    read_exact_or(&mut source, &mut header, "header")?;
    if header[0..4] != MAGIC {
        return Err(Error::format(format!("bad magic {:?}", &header[0..4])));
    }
    if header[4] != VERSION {
        return Err(Error::format(format!("unsupported version {}", header[4])));
    }
    let dtype = DType::from_code(header[5])?;
    let rank = header[6] as usize;
    if header[7] != 0 {
        return Err(Error::format("nonzero padding byte"));
    }

    let mut shape = Vec::with_capacity(rank);
    let mut extent = [0u8; 8];
    for _ in 0..rank {
        read_exact_or(&mut source, &mut extent, "extents")?;
        shape.push(u64::from_le_bytes(extent));
    }
    let count = element_count(&shape)?;
    let byte_len = count
        .checked_mul(dtype.width())
        .ok_or_else(|| Error::format("payload size overflows"))?;

    // Read incrementally so a corrupt extent cannot trigger a huge allocation
    // before the stream runs dry.
    let mut payload = Vec::new();
    let got = source
        .by_ref()
        .take(byte_len as u64)
        .read_to_end(&mut payload)
        .map_err(|e| Error::format(format!("read failed in payload: {e}")))?;
    if got != byte_len {
        return Err(Error::format(format!(
            "truncated payload: expected {byte_len} bytes, got {got}"
        )));
    }

    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DType::F16 => payload
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        DType::U8 => payload.iter().map(|&b| b as f32).collect(),
    };
    Tensor::new(dtype, shape, data)
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let tensor = read_tensor(&mut reader).and_then(|t| {
        let mut extra = [0u8; 1];
        match reader.read(&mut extra) {
            Ok(0) => Ok(t),
            Ok(_) => Err(Error::format("trailing bytes after payload")),
            Err(e) => Err(Error::format(format!("read failed after payload: {e}"))),
        }
    });
    tensor.map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_tensor_file(tensor: &Tensor, path: &Path) -> Result<()> {
    let bytes = tensor.to_bytes()?;
    super::write_atomic(path, &bytes)
}
