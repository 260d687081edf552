//! Self-describing little-endian tensor files.
//!
//! ```text
//! offset  size       field
//! 0       4          magic "PMPM"
//! 4       2          version (u16, currently 1)
//! 6       2          dtype (u16: 0 = f64, 1 = u32)
//! 8       4          rank (u32)
//! 12      8 * rank   dims (u64 each)
//! ...     payload    row-major, little-endian
//! ```

use std::fs;
use std::path::Path;

use crate::crf_model::{LabelMap, UnaryField};
use crate::error::{shape_err, Error, Result};
use crate::mean_field::MarginalField;
use crate::metrics::UncertaintyMap;
use crate::perturbation::SampleSet;

pub const MAGIC: &[u8; 4] = b"PMPM";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    U32 = 1,
}

impl DType {
    fn from_code(code: u16) -> Result<Self> {
        match code {
            0 => Ok(DType::F64),
            1 => Ok(DType::U32),
            c => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::U32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

fn check_len(dims: &[usize], len: usize) -> Result<()> {
    let expected: usize = dims.iter().product();
    if expected != len {
        return shape_err(format!("dims {dims:?} hold {expected} values, got {len}"));
    }
    Ok(())
}

impl Tensor {
    pub fn f64(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        check_len(&dims, values.len())?;
        Ok(Self { dims, data: TensorData::F64(values) })
    }

    pub fn u32(dims: Vec<usize>, values: Vec<u32>) -> Result<Self> {
        check_len(&dims, values.len())?;
        Ok(Self { dims, data: TensorData::U32(values) })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F64(_) => DType::F64,
            TensorData::U32(_) => DType::U32,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    fn expectation_err<T>(&self, dtype: DType, dims: &[usize]) -> Result<T> {
        shape_err(format!(
            "expected a {dtype:?} tensor with dims {dims:?}, found {:?} with dims {:?}",
            self.dtype(),
            self.dims
        ))
    }

    /// The f64 payload, provided dtype and dims match.
    pub fn expect_f64(&self, dims: &[usize]) -> Result<&[f64]> {
        match &self.data {
            TensorData::F64(v) if self.dims == dims => Ok(v),
            _ => self.expectation_err(DType::F64, dims),
        }
    }

    /// The u32 payload, provided dtype and dims match.
    pub fn expect_u32(&self, dims: &[usize]) -> Result<&[u32]> {
        match &self.data {
            TensorData::U32(v) if self.dims == dims => Ok(v),
            _ => self.expectation_err(DType::U32, dims),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n: usize = self.dims.iter().product();
        let mut out = Vec::with_capacity(12 + 8 * self.dims.len() + n * self.dtype().size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dtype() as u16).to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a PMPM tensor".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported tensor version {version}")));
        }
        let dtype = DType::from_code(u16::from_le_bytes(r.array()?))?;
        let rank = u32::from_le_bytes(r.array()?) as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(u64::from_le_bytes(r.array()?))
                .map_err(|_| Error::Format("dimension does not fit in memory".into()))?;
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
            dims.push(d);
        }
        let payload_len = count
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let payload = r.take(payload_len)?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after payload", bytes.len() - r.pos)));
        }
        let data = match dtype {
            DType::F64 => TensorData::F64(
                payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::U32 => TensorData::U32(
                payload.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        };
        Ok(Self { dims, data })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated tensor: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const K: usize>(&mut self) -> Result<[u8; K]> {
        Ok(self.take(K)?.try_into().unwrap())
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    fs::write(path, tensor.to_bytes())?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    Tensor::from_bytes(&fs::read(path)?)
}

impl From<&UnaryField> for Tensor {
    fn from(u: &UnaryField) -> Self {
        Tensor { dims: vec![u.n_voxels(), u.n_labels()], data: TensorData::F64(u.values().to_vec()) }
    }
}

impl From<&MarginalField> for Tensor {
    fn from(q: &MarginalField) -> Self {
        Tensor { dims: vec![q.n_voxels(), q.n_labels()], data: TensorData::F64(q.values().to_vec()) }
    }
}

impl From<&UncertaintyMap> for Tensor {
    fn from(u: &UncertaintyMap) -> Self {
        Tensor { dims: vec![u.len()], data: TensorData::F64(u.values().to_vec()) }
    }
}

impl From<&LabelMap> for Tensor {
    fn from(x: &LabelMap) -> Self {
        Tensor { dims: vec![x.len()], data: TensorData::U32(x.as_slice().to_vec()) }
    }
}

/// `T x N` stack of label maps.
impl From<&SampleSet> for Tensor {
    fn from(s: &SampleSet) -> Self {
        let values = s.samples().iter().flat_map(|x| x.as_slice().iter().copied()).collect();
        Tensor { dims: vec![s.len(), s.n_voxels()], data: TensorData::U32(values) }
    }
}

/// Reads unaries from a `[N, m]` f64 tensor.
pub fn unary_from_tensor(t: &Tensor, n_voxels: usize, n_labels: usize) -> Result<UnaryField> {
    UnaryField::new(n_voxels, n_labels, t.expect_f64(&[n_voxels, n_labels])?.to_vec())
}

/// Label maps are stored as rank-1 `[N]` u32 tensors; any shape with `N`
/// elements (e.g. the grid dims) is accepted.
pub fn labels_from_tensor(t: &Tensor, n_voxels: usize) -> Result<Vec<u32>> {
    match t.data() {
        TensorData::U32(v) if v.len() == n_voxels => Ok(v.clone()),
        _ => t.expect_u32(&[n_voxels]).map(<[u32]>::to_vec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let values: Vec<f64> = vec![0.0, -0.0, 1.5, f64::MIN_POSITIVE, 1e300, -7.25, 3.0, 0.1, 2.0, 9.0, -1.0, 4.5];
        let t = Tensor::f64(vec![6, 2], values).unwrap();
        let bytes = t.to_bytes();
        let back = Tensor::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        match (t.data(), back.data()) {
            (TensorData::F64(a), TensorData::F64(b)) => {
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
            }
            _ => panic!("dtype changed"),
        }
        let u = Tensor::u32(vec![2, 3], vec![0, 1, 2, 3, 4, u32::MAX]).unwrap();
        assert_eq!(Tensor::from_bytes(&u.to_bytes()).unwrap(), u);
    }

    #[test]
    fn header_layout() {
        let bytes = Tensor::u32(vec![3], vec![1, 2, 3]).unwrap().to_bytes();
        assert_eq!(&bytes[0..4], b"PMPM");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[1, 0]);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..20], &[3, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(bytes.len(), 20 + 12);
    }

    #[test]
    fn malformed_inputs_are_format_errors() {
        let bytes = Tensor::f64(vec![6, 2], vec![1.0; 12]).unwrap().to_bytes();
        assert!(matches!(Tensor::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(Tensor::from_bytes(&bytes[..10]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[6] = 9;
        assert!(matches!(Tensor::from_bytes(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Tensor::from_bytes(&long), Err(Error::Format(_))));
    }

    #[test]
    fn call_site_mismatch_names_expected_dims() {
        let t = Tensor::u32(vec![6, 2], vec![0; 12]).unwrap();
        let err = t.expect_f64(&[6, 2]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(err.to_string().contains("[6, 2]"));
        assert!(t.expect_u32(&[12]).is_err());
        assert!(Tensor::f64(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
