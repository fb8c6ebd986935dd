//! Flat binary parameter checkpoints with a plain-text manifest.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic      b"CLMP"
//! version    u32 = 1
//! n_tensors  u32
//! repeated n_tensors times:
//!     name_len u32, name (UTF-8), ndim u32, dims u64 x ndim,
//!     values f64 x prod(dims)
//! ```
//!
//! The manifest repeats the tensor table as `name rows x cols offset=.. len=..`
//! lines so a checkpoint can be inspected without parsing the binary.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::ParamLayout;

pub const MAGIC: &[u8; 4] = b"CLMP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}

/// A named tensor read back from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn write_tensors<W: Write>(
    mut out: W,
    groups: &[(&ParamLayout, &[f64])],
) -> Result<(), CheckpointError> {
    let count: usize = groups.iter().map(|(l, _)| l.specs().len()).sum();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(count as u32).to_le_bytes())?;
    for (layout, data) in groups {
        if layout.len() != data.len() {
            return Err(CheckpointError::Format(format!(
                "layout covers {} values but {} given",
                layout.len(),
                data.len()
            )));
        }
        for spec in layout.specs() {
            let name = spec.name.as_bytes();
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name)?;
            out.write_all(&2u32.to_le_bytes())?;
            out.write_all(&(spec.slot.rows as u64).to_le_bytes())?;
            out.write_all(&(spec.slot.cols as u64).to_le_bytes())?;
            for v in &data[spec.slot.range()] {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn manifest(groups: &[(&ParamLayout, &[f64])]) -> String {
    let mut s = format!("format clmarl-params v{VERSION}\ndtype f64-le\n");
    let mut base = 0;
    for (layout, _) in groups {
        for spec in layout.specs() {
            s.push_str(&format!(
                "tensor {} {}x{} offset={} len={}\n",
                spec.name,
                spec.slot.rows,
                spec.slot.cols,
                base + spec.slot.offset,
                spec.slot.len()
            ));
        }
        base += layout.len();
    }
    s.push_str(&format!("total {base}\n"));
    s
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut input: R) -> Result<Vec<StoredTensor>, CheckpointError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut input)? as usize;
        if name_len > 4096 {
            return Err(CheckpointError::Format("tensor name too long".into()));
        }
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let ndim = read_u32(&mut input)? as usize;
        if ndim > 8 {
            return Err(CheckpointError::Format(format!("{name}: ndim {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u64(&mut input)? as usize);
        }
        let len: usize = dims.iter().product();
        let mut values = Vec::with_capacity(len);
        let mut b = [0u8; 8];
        for _ in 0..len {
            input.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        out.push(StoredTensor { name, dims, values });
    }
    Ok(out)
}

/// Copies stored tensors into `data` following `layout`, by name and shape.
pub fn load_into(
    tensors: &[StoredTensor],
    layout: &ParamLayout,
    data: &mut [f64],
) -> Result<(), CheckpointError> {
    for spec in layout.specs() {
        let t = tensors
            .iter()
            .find(|t| t.name == spec.name)
            .ok_or_else(|| CheckpointError::Format(format!("missing tensor {}", spec.name)))?;
        if t.dims != [spec.slot.rows, spec.slot.cols] {
            return Err(CheckpointError::Format(format!(
                "{}: stored shape {:?}, expected {}x{}",
                spec.name, t.dims, spec.slot.rows, spec.slot.cols
            )));
        }
        data[spec.slot.range()].copy_from_slice(&t.values);
    }
    Ok(())
}
