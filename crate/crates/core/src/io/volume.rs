use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 4] = b"VOL1";
const DTYPE_F32: u8 = 0;

fn format_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset: offset as u64,
        message: message.into(),
    })
}

/// `VOL1`, dtype tag, ndim, u32 dims, little-endian f32 payload.
pub fn volume_to_bytes(v: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * v.ndim() + 4 * v.numel());
    out.extend_from_slice(VOLUME_MAGIC);
    out.push(DTYPE_F32);
    out.push(v.ndim() as u8);
    for &d in v.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn volume_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 6 {
        return format_err(bytes.len(), format!("header needs 6 bytes, found {}", bytes.len()));
    }
    if &bytes[..4] != VOLUME_MAGIC {
        return format_err(0, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4])));
    }
    if bytes[4] != DTYPE_F32 {
        return format_err(4, format!("unsupported dtype tag {}", bytes[4]));
    }
    let ndim = bytes[5] as usize;
    let header = 6 + 4 * ndim;
    if bytes.len() < header {
        return format_err(bytes.len(), format!("header of {ndim} dims needs {header} bytes, found {}", bytes.len()));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    if let Some(i) = shape.iter().position(|&d| d == 0) {
        return format_err(6 + 4 * i, "zero dimension");
    }
    let n: usize = shape.iter().product();
    let expected = header + 4 * n;
    if bytes.len() != expected {
        return format_err(
            header,
            format!("payload length: expected {} bytes, found {}", 4 * n, bytes.len() - header),
        );
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_volume(path: &Path, v: &Tensor) -> Result<()> {
    std::fs::write(path, volume_to_bytes(v))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Tensor> {
    volume_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let v = Tensor::new(&[1, 2, 2, 2], vec![0.5, -1.0, f32::MIN_POSITIVE, 3.25, 0.0, -0.0, 7.0, 1e-30]).unwrap();
        let b = volume_to_bytes(&v);
        assert!(volume_from_bytes(&b).unwrap().bitwise_eq(&v));

        let mut bad = b.clone();
        bad[3] = b'2';
        assert!(matches!(volume_from_bytes(&bad), Err(Error::Format { offset: 0, .. })));

        let mut dtype = b.clone();
        dtype[4] = 1;
        assert!(matches!(volume_from_bytes(&dtype), Err(Error::Format { offset: 4, .. })));

        let e = volume_from_bytes(&b[..b.len() - 6]).unwrap_err().to_string();
        assert!(e.contains("expected 32 bytes, found 26"), "{e}");
    }
}
