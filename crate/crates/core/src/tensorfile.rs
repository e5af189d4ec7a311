//! Binary tensor container.
//!
//! ```text
//! "MTNTENS1" | u32 LE header length | JSON header | little-endian payload
//! ```
//!
//! The header carries `shape`, `dtype` (`"f32"` or `"f64"`), `layout`
//! (always `"row-major"`) and `activated`. Weight files reuse the container:
//! the payload is every parameter back to back, `entries` names the slices
//! and `architecture` describes the network that owns them.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridcodec::GridTensor;

pub const MAGIC: &[u8; 8] = b"MTNTENS1";
pub const LAYOUT: &str = "row-major";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A named slice of a multi-tensor payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub layout: String,
    pub activated: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entries: Vec<Entry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl Header {
    pub fn new(shape: Vec<usize>, dtype: DType, activated: bool) -> Self {
        Self { shape, dtype, layout: LAYOUT.into(), activated, entries: Vec::new(), architecture: None, meta: None }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn write<W: Write>(mut w: W, header: &Header, data: &[f64]) -> Result<()> {
    if header.len() != data.len() {
        return Err(Error::InvalidArgument(format!(
            "header shape {:?} holds {} values, payload has {}",
            header.shape,
            header.len(),
            data.len()
        )));
    }
    let json = serde_json::to_vec(header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::InvalidArgument("header too large".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(data.len() * header.dtype.width());
    match header.dtype {
        DType::F32 => data.iter().for_each(|v| buf.extend_from_slice(&(*v as f32).to_le_bytes())),
        DType::F64 => data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<(Header, Vec<f64>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic, not a tensor container".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Format(format!("tensor header: {e}")))?;
    if header.layout != LAYOUT {
        return Err(Error::Format(format!("unsupported layout {:?}", header.layout)));
    }
    let width = header.dtype.width();
    let mut bytes = vec![0u8; header.len() * width];
    r.read_exact(&mut bytes)?;
    let data = match header.dtype {
        DType::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok((header, data))
}

/// Writes a grid tensor with an `f32` payload.
pub fn write_grid<W: Write>(w: W, t: &GridTensor) -> Result<()> {
    write(w, &Header::new(t.shape().to_vec(), DType::F32, t.is_activated()), t.data())
}

pub fn read_grid<R: Read>(r: R) -> Result<GridTensor> {
    let (h, data) = read(r)?;
    let shape: [usize; 4] = h
        .shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::Format(format!("grid tensors are 4-D, got shape {:?}", h.shape)))?;
    GridTensor::from_vec(shape, data, h.activated)
}
