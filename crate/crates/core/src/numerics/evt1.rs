//! `EVT1` binary tensor files.
//!
//! Layout (little-endian): magic `EVT1`, `u8` dtype code (0 = f32, 1 = f64),
//! `u8` rank, `rank × u32` extents, then the raw scalars in row-major order.

use std::path::Path;

use crate::error::{Error, Result};

use super::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"EVT1";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::data(format!("rank {} does not fit EVT1", t.rank())));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE as u8);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::data(format!("extent {d} does not fit u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Decodes an EVT1 buffer into `T`, converting from the stored dtype if needed.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let err = |offset: usize, msg: &str| Error::Parse {
        offset,
        msg: msg.to_string(),
    };
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(err(0, "missing EVT1 magic"));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| err(4, "unknown dtype code"))?;
    let rank = bytes[5] as usize;
    let mut off = 6;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let chunk = bytes.get(off..off + 4).ok_or_else(|| err(off, "truncated extents"))?;
        dims.push(u32::from_le_bytes(chunk.try_into().unwrap()) as usize);
        off += 4;
    }
    let count: usize = dims.iter().product();
    let need = count * dtype.size();
    let payload = &bytes[off..];
    if payload.len() < need {
        return Err(err(bytes.len(), "truncated payload"));
    }
    if payload.len() > need {
        return Err(err(off + need, "trailing bytes after payload"));
    }
    let data: Vec<T> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::c(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| T::c(f64::read_le(c))).collect(),
    };
    Tensor::from_external(dims, data)
}

pub fn write_file<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_file<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(&b[..4], b"EVT1");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(&b[14..18], &1.5f32.to_le_bytes());
        assert_eq!(b.len(), 22);
    }

    #[test]
    fn rejects_truncation_and_nan() {
        let t = Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = encode(&t).unwrap();
        assert!(matches!(decode::<f64>(&b[..b.len() - 1]), Err(Error::Parse { .. })));
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode::<f64>(&extra).is_err());
        let mut nan = b.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode::<f64>(&nan), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn roundtrip(dims in proptest::collection::vec(0usize..4, 0..4), seed in any::<u64>()) {
            let count: usize = dims.iter().product();
            let data: Vec<f64> = (0..count).map(|i| ((i as u64 ^ seed) as f64).sin()).collect();
            let t = Tensor::new(dims, data).unwrap();
            prop_assert_eq!(decode::<f64>(&encode(&t).unwrap()).unwrap(), t.clone());
            let t32: Tensor<f32> = t.cast();
            prop_assert_eq!(decode::<f32>(&encode(&t32).unwrap()).unwrap(), t32);
        }
    }
}
