//! On-disk tensor format.
//!
//! Layout: magic "ETNS", version u16, rank u16, one u64 per dimension, then
//! the row-major payload as 8-byte floats. All integers and floats are
//! little-endian.

use std::io::{Read, Write};

use thiserror::Error;

use super::{Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"ETNS";
pub const VERSION: u16 = 1;
const MAX_RANK: u16 = 8;
const MAX_ELEMS: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}, expected \"ETNS\"")]
    BadMagic([u8; 4]),
    #[error("unsupported tensor format version {0}")]
    UnsupportedVersion(u16),
    #[error("tensor rank {0} exceeds limit {MAX_RANK}")]
    RankTooLarge(u16),
    #[error("tensor of {0} elements exceeds limit {MAX_ELEMS}")]
    TooLarge(u64),
    #[error(transparent)]
    Shape(#[from] TensorError),
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u16).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor, TensorIoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorIoError::BadMagic(magic));
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(TensorIoError::UnsupportedVersion(version));
    }
    let rank = read_u16(r)?;
    if rank > MAX_RANK {
        return Err(TensorIoError::RankTooLarge(rank));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut elems: u64 = 1;
    for _ in 0..rank {
        let d = read_u64(r)?;
        elems = elems.saturating_mul(d.max(1));
        if elems > MAX_ELEMS {
            return Err(TensorIoError::TooLarge(elems));
        }
        shape.push(d as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Ok(Tensor::new(shape, data)?)
}

pub fn save_tensor(path: &std::path::Path, t: &Tensor) -> Result<(), TensorIoError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn load_tensor(path: &std::path::Path) -> Result<Tensor, TensorIoError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}

fn read_u16<R: Read>(r: &mut R) -> std::io::Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Binary 8-bit grayscale PGM (P5). `pixels` is row-major, `w * h` bytes.
pub fn write_pgm<W: Write>(out: &mut W, w: usize, h: usize, pixels: &[u8]) -> std::io::Result<()> {
    assert_eq!(pixels.len(), w * h, "pixel buffer does not match dimensions");
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.write_all(pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let t = Tensor::new(
            vec![2, 3],
            vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE, 1e300, -0.0],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[0..4], b"ETNS");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1); // version
        assert_eq!(u16::from_le_bytes([buf[6], buf[7]]), 2); // rank
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[16..24].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(buf[24..32].try_into().unwrap()), 1.0);
        assert_eq!(buf.len(), 24 + 16);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let t = Tensor::scalar(1.0);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_tensor(&mut bad.as_slice()),
            Err(TensorIoError::BadMagic(_))
        ));
        let mut wrong_ver = buf.clone();
        wrong_ver[4] = 9;
        assert!(matches!(
            read_tensor(&mut wrong_ver.as_slice()),
            Err(TensorIoError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let t = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(matches!(
            read_tensor(&mut buf.as_slice()),
            Err(TensorIoError::Io(_))
        ));
    }

    #[test]
    fn pgm_header_and_payload() {
        let mut buf = Vec::new();
        write_pgm(&mut buf, 3, 2, &[0, 128, 255, 1, 2, 3]).unwrap();
        assert!(buf.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&buf[buf.len() - 6..], &[0, 128, 255, 1, 2, 3]);
    }
}
