//! Raw tensor dumps: `"VDT0"`, u32 rank, rank × u64 extents, then f64
//! row-major payload, all little-endian. Also the byte helpers shared with
//! checkpoints.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"VDT0";

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Little-endian cursor; running out of bytes is an `UnexpectedEof` I/O error.
pub(crate) struct ByteReader<'a> {
    rest: &'a [u8],
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { rest: bytes }
    }

    pub(crate) fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.rest.read_exact(&mut buf)?;
        Ok(buf)
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        if n > self.rest.len() {
            return Err(std::io::Error::from(std::io::ErrorKind::UnexpectedEof).into());
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head.to_vec())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    pub(crate) fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?)
            .map_err(|_| Error::Format("length does not fit in memory".into()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("payload too large".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.rest.is_empty()
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    put_u32(&mut out, t.rank() as u32);
    for &e in t.shape() {
        put_u64(&mut out, e as u64);
    }
    put_f64s(&mut out, t.data());
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes);
    if &r.take::<4>()? != TENSOR_MAGIC {
        return Err(Error::Format("not a VDT0 tensor file".into()));
    }
    let rank = r.u32()? as usize;
    let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format("tensor extents overflow".into()))?;
    let data = r.f64s(n)?;
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after tensor payload".into()));
    }
    Tensor::new(&shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_byte_exact() {
        let t = Tensor::new(&[1, 2], vec![1.0, -0.5]).unwrap();
        let bytes = encode_tensor(&t);
        let mut want = b"VDT0".to_vec();
        want.extend_from_slice(&[2, 0, 0, 0]);
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn round_trip_preserves_bits() {
        let data = vec![
            f64::MIN_POSITIVE,
            -0.0,
            1e300,
            std::f64::consts::PI,
            0.1,
            -7.25,
        ];
        let t = Tensor::new(&[3, 1, 2], data).unwrap();
        let back = decode_tensor(&encode_tensor(&t)).unwrap();
        assert_eq!(back.shape(), t.shape());
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.vdt");
        let t = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_tensor(&p, &t).unwrap();
        assert_eq!(read_tensor(&p).unwrap().data(), t.data());
    }

    #[test]
    fn bad_magic_truncation_and_trailing_bytes() {
        let mut bytes = encode_tensor(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            decode_tensor(&bytes[..bytes.len() - 1]),
            Err(Error::Io(_))
        ));
        bytes.push(0);
        assert!(matches!(decode_tensor(&bytes), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_tensor(&bytes), Err(Error::Format(_))));
    }
}
