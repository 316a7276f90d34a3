//! `CODT` binary tensor container.
//!
//! ```text
//! magic      4 bytes   "CODT"
//! rank       u32 LE    1 or 2
//! dims       u64 LE    one per rank
//! precision  u8        0 = exact64, 1 = sim32, 2 = simbf16
//! payload    LE        f64 / f32 / bfloat16 bits, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::precision::bf16_bits;
use super::{Matrix, Precision, Vector};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CODT";

/// A tensor read back from a container.
#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    Vector(Vector),
    Matrix(Matrix),
}

impl Tensor {
    pub fn into_matrix(self) -> Result<Matrix> {
        match self {
            Tensor::Matrix(m) => Ok(m),
            Tensor::Vector(_) => Err(Error::Format("expected a rank-2 tensor".into())),
        }
    }

    pub fn into_vector(self) -> Result<Vector> {
        match self {
            Tensor::Vector(v) => Ok(v),
            Tensor::Matrix(_) => Err(Error::Format("expected a rank-1 tensor".into())),
        }
    }
}

pub fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    write_raw(w, &[m.rows() as u64, m.cols() as u64], m.precision(), m.as_slice())
}

pub fn write_vector<W: Write>(w: &mut W, v: &Vector) -> Result<()> {
    write_raw(w, &[v.len() as u64], v.precision(), v.as_slice())
}

fn write_raw<W: Write>(w: &mut W, dims: &[u64], precision: Precision, data: &[f64]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&[precision.tag()])?;
    for &v in data {
        match precision {
            Precision::Exact64 => w.write_all(&v.to_le_bytes())?,
            Precision::Sim32 => w.write_all(&(v as f32).to_le_bytes())?,
            Precision::SimBF16 => w.write_all(&bf16_bits(v as f32).to_le_bytes())?,
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let rank = u32::from_le_bytes(read_array(r)?);
    if !(1..=2).contains(&rank) {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let d = u64::from_le_bytes(read_array(r)?);
        dims.push(usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?);
    }
    let [tag] = read_array::<_, 1>(r)?;
    let precision = Precision::from_tag(tag)?;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;

    let mut payload = vec![0u8; count * precision.storage_bytes()];
    r.read_exact(&mut payload)?;
    let data: Vec<f64> = match precision {
        Precision::Exact64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Precision::Sim32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Precision::SimBF16 => payload
            .chunks_exact(2)
            .map(|c| f32::from_bits((u16::from_le_bytes(c.try_into().unwrap()) as u32) << 16) as f64)
            .collect(),
    };

    Ok(match dims.as_slice() {
        [_] => Tensor::Vector(Vector::from_vec(data, precision)),
        [m, n] => Tensor::Matrix(Matrix::from_vec(*m, *n, data, precision)?),
        _ => unreachable!(),
    })
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    Ok(buf)
}

pub fn save_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn save_vector(path: impl AsRef<Path>, v: &Vector) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_vector(&mut w, v)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_layout() {
        let m = Matrix::from_vec(1, 2, vec![1.0, -2.0], Precision::SimBF16).unwrap();
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        assert_eq!(&buf[..4], b"CODT");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(&buf[16..24], &2u64.to_le_bytes());
        assert_eq!(buf[24], 2);
        // 1.0 = 0x3F80, -2.0 = 0xC000
        assert_eq!(&buf[25..], &[0x80, 0x3F, 0x00, 0xC0]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read_tensor(&mut &b"NOPE"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        buf.extend_from_slice(b"CODT");
        buf.extend_from_slice(&3u32.to_le_bytes());
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let v = Vector::from_vec(vec![1.0, 2.0, 3.0], Precision::Exact64);
        let mut buf = Vec::new();
        write_vector(&mut buf, &v).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in 0u64..500, rows in 1usize..6, cols in 1usize..6, tag in 0u8..3) {
            let precision = Precision::from_tag(tag).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Matrix::random(rows, cols, precision, &mut rng);
            let mut buf = Vec::new();
            write_matrix(&mut buf, &m).unwrap();
            let back = read_tensor(&mut buf.as_slice()).unwrap().into_matrix().unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
