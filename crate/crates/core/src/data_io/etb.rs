//! ETB: a minimal little-endian binary tensor container.
//!
//! ```text
//! offset 0   magic  "ETB1"
//!        4   dtype  u8   (0 = f32, 1 = f64)
//!        5   rank   u8
//!        6   dims   rank × u64 LE
//!        ..  payload row-major LE scalars, product(dims) of them
//! ```

use std::io::Write;
use std::path::Path;

use crate::numerics::{DType, Float, Tensor};

pub const MAGIC: &[u8; 4] = b"ETB1";

#[derive(Debug, thiserror::Error)]
pub enum EtbError {
    #[error("bad magic {0:?}, expected \"ETB1\"")]
    BadMagic([u8; 4]),
    #[error("truncated ETB data: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("unknown ETB dtype code {0}")]
    UnknownDtype(u8),
    #[error("{0} trailing bytes after ETB payload")]
    Trailing(usize),
    #[error("ETB holds {found:?}, caller expected {expected:?}")]
    DtypeMismatch { expected: DType, found: DType },
    #[error("ETB dims overflow")]
    Overflow,
}

/// A decoded ETB tensor of either precision.
#[derive(Clone, Debug, PartialEq)]
pub enum EtbTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl EtbTensor {
    pub fn dtype(&self) -> DType {
        match self {
            EtbTensor::F32(_) => DType::F32,
            EtbTensor::F64(_) => DType::F64,
        }
    }
}

pub fn encode<T: Float>(t: &Tensor<T>) -> Vec<u8> {
    let dtype = T::DTYPE;
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + dtype.size() * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(u8::try_from(t.rank()).expect("rank fits u8"));
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut out);
    }
    out
}

/// Byte range of the scalar payload inside an encoded buffer.
pub fn payload_offset(bytes: &[u8]) -> Result<usize, EtbError> {
    header(bytes).map(|(_, _, off)| off)
}

fn header(bytes: &[u8]) -> Result<(DType, Vec<usize>, usize), EtbError> {
    let need = |n: usize| {
        if bytes.len() < n {
            Err(EtbError::Truncated { needed: n, have: bytes.len() })
        } else {
            Ok(())
        }
    };
    need(4)?;
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(EtbError::BadMagic(magic));
    }
    need(6)?;
    let dtype = match bytes[4] {
        0 => DType::F32,
        1 => DType::F64,
        c => return Err(EtbError::UnknownDtype(c)),
    };
    let rank = bytes[5] as usize;
    need(6 + 8 * rank)?;
    let dims: Vec<usize> = bytes[6..6 + 8 * rank]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    Ok((dtype, dims, 6 + 8 * rank))
}

pub fn decode(bytes: &[u8]) -> Result<EtbTensor, EtbError> {
    let (dtype, dims, off) = header(bytes)?;
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or(EtbError::Overflow)?;
    let size = dtype.size();
    let end = count.checked_mul(size).and_then(|n| n.checked_add(off)).ok_or(EtbError::Overflow)?;
    if bytes.len() < end {
        return Err(EtbError::Truncated { needed: end, have: bytes.len() });
    }
    if bytes.len() > end {
        return Err(EtbError::Trailing(bytes.len() - end));
    }
    let payload = &bytes[off..end];
    Ok(match dtype {
        DType::F32 => EtbTensor::F32(from_payload(dims, payload)),
        DType::F64 => EtbTensor::F64(from_payload(dims, payload)),
    })
}

fn from_payload<T: Float>(dims: Vec<usize>, payload: &[u8]) -> Tensor<T> {
    let data = payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::new(dims, data).expect("payload length checked")
}

/// Decode and require a specific element type.
pub fn decode_as<T: Float>(bytes: &[u8]) -> Result<Tensor<T>, EtbError> {
    let t = decode(bytes)?;
    let found = t.dtype();
    let mismatch = EtbError::DtypeMismatch { expected: T::DTYPE, found };
    // Same-type conversion through f64 is exact for both widths.
    match t {
        EtbTensor::F32(t) if T::DTYPE == DType::F32 => Ok(t.cast()),
        EtbTensor::F64(t) if T::DTYPE == DType::F64 => Ok(t.cast()),
        _ => Err(mismatch),
    }
}

pub fn write_etb<T: Float>(path: &Path, t: &Tensor<T>) -> crate::Result<()> {
    write_atomic(path, &encode(t))
}

pub fn read_etb(path: &Path) -> crate::Result<EtbTensor> {
    let bytes = std::fs::read(path)?;
    Ok(decode(&bytes)?)
}

pub fn read_etb_as<T: Float>(path: &Path) -> crate::Result<Tensor<T>> {
    let bytes = std::fs::read(path)?;
    Ok(decode_as(&bytes)?)
}

/// Write through a temp file in the same directory, then rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::<f64>::scalar(-2.5);
        let bytes = encode(&t);
        assert_eq!(bytes.len(), 6 + 8);
        assert_eq!(decode(&bytes).unwrap(), EtbTensor::F64(t));
    }

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::<f32>::new([2, 1], vec![1.0, -0.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..6], b"ETB1\x00\x02");
        assert_eq!(&b[6..14], &2u64.to_le_bytes());
        assert_eq!(&b[14..22], &1u64.to_le_bytes());
        assert_eq!(&b[22..26], &1.0f32.to_le_bytes());
        assert_eq!(&b[26..30], &(-0.0f32).to_le_bytes());
    }

    #[test]
    fn parse_errors_are_distinct() {
        let good = encode(&Tensor::<f32>::from_fn([3, 2], |i| i as f32));
        assert!(matches!(decode(&good[..good.len() - 1]), Err(EtbError::Truncated { .. })));
        assert!(matches!(decode(&good[..3]), Err(EtbError::Truncated { .. })));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(EtbError::BadMagic(_))));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(EtbError::UnknownDtype(9))));
        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(decode(&bad), Err(EtbError::Trailing(1))));
        assert!(matches!(decode_as::<f64>(&good), Err(EtbError::DtypeMismatch { .. })));
    }

    #[test]
    fn huge_dims_do_not_allocate() {
        let mut b = b"ETB1\x00\x02".to_vec();
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode(&b), Err(EtbError::Overflow)));
    }
}
