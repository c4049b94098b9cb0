//! Self-describing little-endian tensor files.
//!
//! Layout: `"TLBM"`, version `u16`, dtype tag `u8`, rank `u8`, `rank` dims as
//! `u32`, then the row-major payload. Tags: 0 = f32, 1 = u8, 2 = f64.

use std::path::Path;

use tulabm_core::{Image, Tensor, TumorMask};

use crate::error::{CliError, Result};
use crate::io;

pub const MAGIC: &[u8; 4] = b"TLBM";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::U8(_) => 1,
            TensorData::F64(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn elem_size(tag: u8) -> Option<usize> {
        match tag {
            0 => Some(4),
            1 => Some(1),
            2 => Some(8),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: TensorData) -> std::result::Result<Self, String> {
        if dims.len() > u8::MAX as usize {
            return Err(format!("rank {} exceeds 255", dims.len()));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err("dimension exceeds u32".into());
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(format!("dims {:?} need {} values, got {}", dims, n, data.len()));
        }
        Ok(Self { dims, data })
    }

    /// Images are stored as f32.
    pub fn from_image(img: &Image) -> Self {
        let (h, w) = img.dims();
        Self {
            dims: vec![h, w],
            data: TensorData::F32(img.data().iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn from_mask(mask: &TumorMask) -> Self {
        let (h, w) = mask.dims();
        Self {
            dims: vec![h, w],
            data: TensorData::U8(mask.data().to_vec()),
        }
    }

    /// Full-precision storage for parameters and optimizer state.
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            dims: t.shape().to_vec(),
            data: TensorData::F64(t.data().to_vec()),
        }
    }

    fn hw(&self) -> std::result::Result<(usize, usize), String> {
        match self.dims.as_slice() {
            [h, w] | [1, h, w] => Ok((*h, *w)),
            d => Err(format!("expected a 2-D image, got dims {:?}", d)),
        }
    }

    pub fn to_image(&self) -> std::result::Result<Image, String> {
        let (h, w) = self.hw()?;
        let data = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(_) => return Err("u8 tensor is a mask, not an image".into()),
        };
        Image::from_vec(h, w, data).map_err(|e| e.to_string())
    }

    pub fn to_mask(&self) -> std::result::Result<TumorMask, String> {
        let (h, w) = self.hw()?;
        match &self.data {
            TensorData::U8(v) => TumorMask::from_vec(h, w, v.clone()).map_err(|e| e.to_string()),
            _ => Err("mask tensors must be u8".into()),
        }
    }

    pub fn to_tensor(&self) -> std::result::Result<Tensor, String> {
        let data = match &self.data {
            TensorData::F64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        };
        Tensor::from_vec(&self.dims, data).map_err(|e| e.to_string())
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.data.tag());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    /// Parses one tensor from the front of `bytes`, returning it with the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> std::result::Result<(Self, usize), String> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = u16::from_le_bytes(cur.array()?);
        if version != VERSION {
            return Err(format!("unsupported tensor version {}", version));
        }
        let [tag, rank] = cur.array()?;
        let size = TensorData::elem_size(tag).ok_or_else(|| format!("unknown dtype tag {}", tag))?;
        let dims: Vec<usize> = (0..rank)
            .map(|_| cur.array().map(|b| u32::from_le_bytes(b) as usize))
            .collect::<std::result::Result<_, _>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or("dims overflow")?;
        let payload = cur.take(n.checked_mul(size).ok_or("payload size overflow")?)?;
        let data = match tag {
            0 => TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            1 => TensorData::U8(payload.to_vec()),
            _ => TensorData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok((Self { dims, data }, cur.pos))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = io::read_file(path)?;
        let (t, used) = Self::decode(&bytes).map_err(|e| CliError::format(path, e))?;
        if used != bytes.len() {
            return Err(CliError::format(path, format!("{} trailing bytes", bytes.len() - used)));
        }
        Ok(t)
    }
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated data")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = TensorFile::new(vec![2, 3], TensorData::U8(vec![0, 1, 0, 1, 1, 0])).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"TLBM");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 1);
        assert_eq!(b[7], 2);
        assert_eq!(&b[8..16], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(b.len(), 16 + 6);
    }

    #[test]
    fn rejects_corruption() {
        let t = TensorFile::from_tensor(&Tensor::full(&[2], 1.5));
        let mut b = t.to_bytes();
        assert!(TensorFile::decode(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(TensorFile::decode(&b).is_err());
        let mut b = t.to_bytes();
        b[4] = 9;
        assert!(TensorFile::decode(&b).is_err());
        let mut b = t.to_bytes();
        b[6] = 7;
        assert!(TensorFile::decode(&b).is_err());
        assert!(TensorFile::new(vec![3], TensorData::F32(vec![0.0])).is_err());
    }

    #[test]
    fn image_and_mask_conversions() {
        let img = Image::from_fn(3, 4, |r, c| (r * 4 + c) as f64 / 16.0);
        assert_eq!(TensorFile::from_image(&img).to_image().unwrap(), img);
        let mask = TumorMask::from_fn(3, 4, |r, c| r == c);
        let tf = TensorFile::from_mask(&mask);
        assert_eq!(tf.to_mask().unwrap(), mask);
        assert!(tf.to_image().is_err());
    }

    proptest! {
        #[test]
        fn round_trip(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>(), tag in 0u8..3) {
            let n: usize = dims.iter().product();
            let vals: Vec<f64> = (0..n).map(|i| ((seed.wrapping_mul(i as u64 + 1)) % 1000) as f64 / 7.0).collect();
            let data = match tag {
                0 => TensorData::F32(vals.iter().map(|&v| v as f32).collect()),
                1 => TensorData::U8(vals.iter().map(|&v| v as u8).collect()),
                _ => TensorData::F64(vals),
            };
            let t = TensorFile::new(dims, data).unwrap();
            let bytes = t.to_bytes();
            let (back, used) = TensorFile::decode(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back, t);
        }
    }
}
