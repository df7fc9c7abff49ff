//! `DDMPT1` tensor files: the magic line `DDMPT1\n`, an ASCII header
//! `dtype=f32|f64 shape=N,C,H,W\n`, then the raw little-endian payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"DDMPT1\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn encode(tensor: &Tensor, dtype: DType) -> Vec<u8> {
    let shape = tensor
        .shape()
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let mut out = Vec::with_capacity(64 + tensor.numel() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(format!("dtype={} shape={}\n", dtype.as_str(), shape).as_bytes());
    for &v in tensor.data() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::TensorFormat("missing DDMPT1 magic".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::TensorFormat("unterminated header".into()))?;
    let header = std::str::from_utf8(&rest[..nl])
        .map_err(|_| Error::TensorFormat("header is not ASCII".into()))?;
    let payload = &rest[nl + 1..];

    let mut dtype = None;
    let mut shape = None;
    for field in header.split_whitespace() {
        match field.split_once('=') {
            Some(("dtype", "f32")) => dtype = Some(DType::F32),
            Some(("dtype", "f64")) => dtype = Some(DType::F64),
            Some(("shape", dims)) => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    dims.split(',').map(str::parse).collect();
                shape = Some(parsed.map_err(|_| {
                    Error::TensorFormat(format!("bad shape `{dims}`"))
                })?);
            }
            _ => return Err(Error::TensorFormat(format!("unknown header field `{field}`"))),
        }
    }
    let dtype = dtype.ok_or_else(|| Error::TensorFormat("missing dtype".into()))?;
    let shape = shape.ok_or_else(|| Error::TensorFormat("missing shape".into()))?;
    let numel: usize = shape.iter().product();
    if payload.len() != numel * dtype.width() {
        return Err(Error::TensorFormat(format!(
            "payload has {} bytes, shape {:?} as {} needs {}",
            payload.len(),
            shape,
            dtype.as_str(),
            numel * dtype.width()
        )));
    }
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Tensor::new(&shape, data)
}

pub fn write_tensor(path: &Path, tensor: &Tensor, dtype: DType) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode(tensor, dtype))
        .map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[1, 2, 1, 1], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&t, DType::F64);
        assert!(bytes.starts_with(b"DDMPT1\ndtype=f64 shape=1,2,1,1\n"));
        assert_eq!(bytes.len(), 7 + 24 + 16);
    }

    #[test]
    fn rejects_truncated_payload() {
        let t = Tensor::ones(&[4]);
        let mut bytes = encode(&t, DType::F32);
        bytes.pop();
        assert!(decode(&bytes).is_err());
        assert!(decode(b"NOPE\n").is_err());
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_exact(data in prop::collection::vec(-1e6f64..1e6, 1..40)) {
            let t = Tensor::new(&[data.len()], data).unwrap();
            prop_assert_eq!(decode(&encode(&t, DType::F64)).unwrap(), t);
        }
    }
}
