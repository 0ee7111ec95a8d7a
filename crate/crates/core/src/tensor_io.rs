//! Binary tensor files.
//!
//! Layout (little-endian):
//! - magic: the 7 bytes `MTNSR1\0`
//! - dtype: u8 (0 = f32, 1 = f64, 2 = i32, 3 = u8)
//! - rank: u8, at most 8
//! - dims: rank * u32
//! - payload: product(dims) values, row-major

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 7] = b"MTNSR1\0";
pub const MAX_RANK: usize = 8;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("rank {0} exceeds the maximum of 8")]
    RankTooLarge(usize),
    #[error("payload holds {found} values but dims require {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("expected dtype {expected:?}, found {found:?}")]
    DTypeMismatch { expected: DType, found: DType },
    #[error("expected dims {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("{path}: {source}")]
    File { path: String, source: Box<TensorError> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    I32 = 2,
    U8 = 3,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self, TensorError> {
        Ok(match code {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::I32,
            3 => DType::U8,
            other => return Err(TensorError::UnknownDtype(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I32(_) => DType::I32,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense row-major tensor together with its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

macro_rules! typed_access {
    ($name:ident, $into:ident, $variant:ident, $ty:ty) => {
        pub fn $name(&self) -> Result<&[$ty], TensorError> {
            match &self.data {
                TensorData::$variant(v) => Ok(v),
                other => Err(TensorError::DTypeMismatch { expected: DType::$variant, found: other.dtype() }),
            }
        }

        pub fn $into(self) -> Result<Vec<$ty>, TensorError> {
            match self.data {
                TensorData::$variant(v) => Ok(v),
                other => Err(TensorError::DTypeMismatch { expected: DType::$variant, found: other.dtype() }),
            }
        }
    };
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        if dims.len() > MAX_RANK {
            return Err(TensorError::RankTooLarge(dims.len()));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch { expected, found: data.len() });
        }
        Ok(Self { dims, data })
    }

    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn f64(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::F64(data))
    }

    pub fn i32(dims: Vec<usize>, data: Vec<i32>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::I32(data))
    }

    pub fn u8(dims: Vec<usize>, data: Vec<u8>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::U8(data))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    typed_access!(as_f32, into_f32, F32, f32);
    typed_access!(as_f64, into_f64, F64, f64);
    typed_access!(as_i32, into_i32, I32, i32);
    typed_access!(as_u8, into_u8, U8, u8);

    pub fn expect_dims(&self, expected: &[usize]) -> Result<(), TensorError> {
        if self.dims != expected {
            return Err(TensorError::ShapeMismatch { expected: expected.to_vec(), found: self.dims.clone() });
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), TensorError> {
        w.write_all(MAGIC)?;
        w.write_all(&[self.dtype() as u8, self.dims.len() as u8])?;
        for d in &self.dims {
            let d = u32::try_from(*d).map_err(|_| {
                std::io::Error::new(std::io::ErrorKind::InvalidInput, "dimension exceeds u32")
            })?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * self.dtype().size());
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => buf.extend_from_slice(v),
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, TensorError> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::BadMagic);
        }
        let mut head = [0u8; 2];
        r.read_exact(&mut head)?;
        let dtype = DType::from_code(head[0])?;
        let rank = head[1] as usize;
        if rank > MAX_RANK {
            return Err(TensorError::RankTooLarge(rank));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            dims.push(u32::from_le_bytes(b) as usize);
        }
        let count: usize = dims.iter().product();
        let mut bytes = vec![0u8; count * dtype.size()];
        r.read_exact(&mut bytes)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(TensorError::LengthMismatch { expected: count, found: count + 1 });
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect(),
            ),
            DType::I32 => TensorData::I32(
                bytes.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
            ),
            DType::U8 => TensorData::U8(bytes),
        };
        Self::new(dims, data)
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorError> {
        let wrap = |e: TensorError| TensorError::File { path: path.display().to_string(), source: Box::new(e) };
        let file = File::create(path).map_err(|e| wrap(e.into()))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(wrap)?;
        w.flush().map_err(|e| wrap(e.into()))
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        let wrap = |e: TensorError| TensorError::File { path: path.display().to_string(), source: Box::new(e) };
        let file = File::open(path).map_err(|e| wrap(e.into()))?;
        Self::read_from(&mut BufReader::new(file)).map_err(wrap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::i32(vec![2], vec![1, -1]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..7], MAGIC);
        assert_eq!(buf[7], 2);
        assert_eq!(buf[8], 1);
        assert_eq!(&buf[9..13], &2u32.to_le_bytes());
        assert_eq!(&buf[13..], &[1, 0, 0, 0, 0xff, 0xff, 0xff, 0xff]);
    }

    #[test]
    fn rejects_corrupt_input() {
        let t = Tensor::u8(vec![3], vec![1, 2, 3]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::read_from(&mut bad.as_slice()), Err(TensorError::BadMagic)));
        let mut bad = buf.clone();
        bad[7] = 9;
        assert!(matches!(Tensor::read_from(&mut bad.as_slice()), Err(TensorError::UnknownDtype(9))));
        let truncated = &buf[..buf.len() - 1];
        assert!(matches!(Tensor::read_from(&mut &truncated[..]), Err(TensorError::Io(_))));
        let mut long = buf.clone();
        long.push(0);
        assert!(Tensor::read_from(&mut long.as_slice()).is_err());
        assert!(Tensor::u8(vec![2, 2], vec![0; 3]).is_err());
        assert!(Tensor::u8(vec![1; 9], vec![0]).is_err());
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        (prop::collection::vec(1usize..4, 1..=8), 0u8..4, any::<u64>()).prop_map(|(dims, code, seed)| {
            let n: usize = dims.iter().product();
            let mut state = seed;
            let mut next = move || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                state
            };
            let data = match code {
                0 => TensorData::F32((0..n).map(|_| f32::from_bits(next() as u32)).collect()),
                1 => TensorData::F64((0..n).map(|_| f64::from_bits(next())).collect()),
                2 => TensorData::I32((0..n).map(|_| next() as i32).collect()),
                _ => TensorData::U8((0..n).map(|_| next() as u8).collect()),
            };
            Tensor::new(dims, data).unwrap()
        })
    }

    proptest! {
        // Compared bitwise so NaN payloads count as equal.
        #[test]
        fn write_read_is_lossless(t in arb_tensor()) {
            let mut buf = Vec::new();
            t.write_to(&mut buf).unwrap();
            let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            let mut again = Vec::new();
            back.write_to(&mut again).unwrap();
            prop_assert_eq!(again, buf);
        }
    }
}
