//! The MTF1 tensor file: 4-byte magic `MTF1`, dtype code (0 = f32, 1 = f64),
//! rank, two zero bytes, `rank` little-endian u64 extents, then the row-major
//! little-endian payload. Nothing may follow the payload.

use std::path::Path;

use super::{numel, DType, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MTF1";
const HEADER: usize = 8;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let dtype = t.dtype();
    let mut out = Vec::with_capacity(HEADER + 8 * t.rank() + dtype.byte_width() * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(t.rank() as u8);
    out.extend_from_slice(&[0, 0]);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match dtype {
        DType::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, msg: msg.into() }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| format_err(4, format!("unknown dtype code {}", bytes[4])))?;
    let rank = bytes[5] as usize;
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(format_err(6, "nonzero padding"));
    }
    let mut pos = HEADER;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let chunk = bytes.get(pos..pos + 8).ok_or_else(|| format_err(bytes.len(), "truncated extents"))?;
        let e = u64::from_le_bytes(chunk.try_into().expect("8-byte slice"));
        shape.push(usize::try_from(e).map_err(|_| format_err(pos, "extent overflows usize"))?);
        pos += 8;
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| format_err(HEADER, "element count overflows"))?;
    let width = dtype.byte_width();
    let expected = count
        .checked_mul(width)
        .and_then(|b| b.checked_add(pos))
        .ok_or_else(|| format_err(pos, "payload size overflows"))?;
    if bytes.len() < expected {
        return Err(format_err(bytes.len(), format!("truncated payload: need {expected} bytes")));
    }
    if bytes.len() > expected {
        return Err(format_err(expected, "trailing bytes after payload"));
    }
    let payload = &bytes[pos..];
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    debug_assert_eq!(data.len(), numel(&shape));
    Tensor::new(data, &shape, dtype)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}
