//! "MMRT" binary tensor files.
//!
//! Layout, little-endian throughout:
//!   magic "MMRT" (4 bytes) | version = 1 | dtype (1 = f64, 2 = f32) |
//!   rank | pad = 0 | rank x u64 extents | row-major payload
//!
//! f64 roundtrips bit-exactly; f32 is a lossy storage mode.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MMRT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64 = 1,
    F32 = 2,
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |bytes: &[u8]| -> Result<()> {
        w.write_all(bytes).map_err(|e| Error::io(path.display().to_string(), e))
    };
    emit(&MAGIC)?;
    emit(&[VERSION, dtype as u8, t.rank() as u8, 0])?;
    for &e in t.shape() {
        emit(&(e as u64).to_le_bytes())?;
    }
    match dtype {
        Dtype::F64 => {
            for &x in t.data() {
                emit(&x.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for &x in t.data() {
                emit(&(x as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let bad = |detail: &str| Error::BadTensorFile {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };

    let mut header = [0u8; 8];
    r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    if header[0..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    if header[4] != VERSION {
        return Err(bad(&format!("unsupported version {}", header[4])));
    }
    let dtype = match header[5] {
        1 => Dtype::F64,
        2 => Dtype::F32,
        d => return Err(bad(&format!("unsupported dtype {d}"))),
    };
    let rank = header[6] as usize;

    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf).map_err(|_| bad("truncated extents"))?;
        let e = u64::from_le_bytes(buf);
        let e_usize: usize = e.try_into().map_err(|_| bad("extent overflow"))?;
        count = count.checked_mul(e_usize).ok_or_else(|| bad("extent overflow"))?;
        shape.push(e_usize);
    }

    let mut data = Vec::with_capacity(count);
    match dtype {
        Dtype::F64 => {
            for _ in 0..count {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf).map_err(|_| bad("truncated payload"))?;
                data.push(f64::from_le_bytes(buf));
            }
        }
        Dtype::F32 => {
            for _ in 0..count {
                let mut buf = [0u8; 4];
                r.read_exact(&mut buf).map_err(|_| bad("truncated payload"))?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path.display().to_string(), e))? != 0 {
        return Err(bad("trailing bytes after payload"));
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_f64() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.mmrt");
        let t = Tensor::matrix(2, 3, vec![0., 1., 2., 3., 4., 5.]).unwrap();
        write_tensor(&p, &t, Dtype::F64).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
    }

    #[test]
    fn header_bytes_match_layout() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.mmrt");
        let t = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        write_tensor(&p, &t, Dtype::F64).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[0..8], &[0x4D, 0x4D, 0x52, 0x54, 0x01, 0x01, 0x02, 0x00]);
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &3u64.to_le_bytes());
        assert_eq!(bytes.len(), 24 + 6 * 8);
    }

    #[test]
    fn unsupported_dtype_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.mmrt");
        let t = Tensor::from_vec(vec![1.0]);
        write_tensor(&p, &t, Dtype::F64).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[5] = 3;
        std::fs::write(&p, &bytes).unwrap();
        let err = read_tensor(&p).unwrap_err();
        assert!(err.to_string().contains("unsupported dtype 3"));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.mmrt");
        std::fs::write(&p, b"NOPE\x01\x01\x00\x00").unwrap();
        assert!(read_tensor(&p).unwrap_err().to_string().contains("bad magic"));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.mmrt");
        let t = Tensor::from_vec(vec![1.0, 2.0]);
        write_tensor(&p, &t, Dtype::F64).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_tensor(&p).unwrap_err().to_string().contains("truncated payload"));
    }

    #[test]
    fn f32_mode_roundtrips_f32_representable_values() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.mmrt");
        let t = Tensor::from_vec(vec![0.5, -2.25, 1024.0]);
        write_tensor(&p, &t, Dtype::F32).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
    }

    #[test]
    fn zero_extent_tensor_roundtrips() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.mmrt");
        let t = Tensor::zeros(vec![0, 5]);
        write_tensor(&p, &t, Dtype::F64).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
    }
}
