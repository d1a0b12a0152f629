//! Flat binary tensor container used for checkpoints and pseudo-mask files.
//!
//! Layout: 4 magic bytes `MTEN`, rank as u64 little-endian, one u64 extent
//! per dimension, then the data as f64 little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{numel, Result, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"MTEN";
const MAX_RANK: u64 = 32;

pub fn write_tensor_to(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_from(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    let rank = u64::from_le_bytes(buf);
    if rank > MAX_RANK {
        return Err(TensorError::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        r.read_exact(&mut buf)?;
        let e = u64::from_le_bytes(buf);
        if e > u32::MAX as u64 {
            return Err(TensorError::Format(format!("implausible extent {e}")));
        }
        shape.push(e as usize);
    }
    let n = numel(&shape);
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::new(&shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor_to(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor_from(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        let back = read_tensor_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::scalar(-0.0);
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        let back = read_tensor_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.rank(), 0);
        assert_eq!(back.data()[0].to_bits(), t.data()[0].to_bits());
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOPE\x00\x00\x00\x00\x00\x00\x00\x00".to_vec();
        let err = read_tensor_from(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn rejects_truncated_data() {
        let t = Tensor::full(&[4], 1.5);
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor_from(&mut buf.as_slice()).is_err());
    }
}
