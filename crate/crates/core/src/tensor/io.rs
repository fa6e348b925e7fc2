//! DVKT tensor files.
//!
//! Layout: `b"DVKT"`, version byte (1), dtype byte (1 = f64 LE), rank byte (1..=4),
//! `rank` little-endian `u32` dims, then the row-major payload as little-endian `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Tensor, MAX_RANK};
use crate::error::{Error, Result};

pub const DVKT_MAGIC: [u8; 4] = *b"DVKT";
pub const DVKT_VERSION: u8 = 1;
const DTYPE_F64_LE: u8 = 1;

pub fn write_tensor_to<W: Write>(mut w: W, x: &Tensor) -> Result<()> {
    let mut header = Vec::with_capacity(7 + 4 * x.rank());
    header.extend_from_slice(&DVKT_MAGIC);
    header.push(DVKT_VERSION);
    header.push(DTYPE_F64_LE);
    header.push(x.rank() as u8);
    for &d in x.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Format(format!("dimension {d} does not fit in u32")))?;
        header.extend_from_slice(&d.to_le_bytes());
    }
    w.write_all(&header)?;
    let mut payload = Vec::with_capacity(8 * x.len());
    for v in x.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

/// Reads one tensor from a stream positioned at a DVKT header.
pub fn read_tensor_from<R: Read>(mut r: R) -> Result<Tensor> {
    let mut head = [0u8; 7];
    read_exact_or(&mut r, &mut head, "header")?;
    if head[..4] != DVKT_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &head[..4])));
    }
    if head[4] != DVKT_VERSION {
        return Err(Error::Version {
            found: head[4] as u32,
            expected: DVKT_VERSION as u32,
        });
    }
    if head[5] != DTYPE_F64_LE {
        return Err(Error::Format(format!("unknown dtype code {}", head[5])));
    }
    let rank = head[6] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Rank(rank));
    }
    let mut dims = vec![0u8; 4 * rank];
    read_exact_or(&mut r, &mut dims, "dimensions")?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(8).map(|_| n))
        .ok_or_else(|| Error::Format(format!("dimensions {shape:?} overflow")))?;
    if n == 0 {
        return Err(Error::Format(format!("zero-sized dimension in {shape:?}")));
    }
    // Read in bounded pieces so a corrupt header cannot trigger a huge allocation.
    let mut data = Vec::new();
    let mut buf = vec![0u8; 8 * n.min(1 << 16)];
    let mut remaining = n;
    while remaining > 0 {
        let take = remaining.min(1 << 16);
        read_exact_or(&mut r, &mut buf[..8 * take], "payload")?;
        data.extend(
            buf[..8 * take]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
        );
        remaining -= take;
    }
    Tensor::new(shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, x: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, x)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor_from(&mut r)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn encode(x: &Tensor) -> Vec<u8> {
        let mut v = Vec::new();
        write_tensor_to(&mut v, x).unwrap();
        v
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(vec![9, 9, 9], |_| rng.random_range(-1e3..1e3));
        let bytes = encode(&x);
        assert_eq!(bytes.len(), 7 + 12 + 729 * 8);
        let y = read_tensor_from(bytes.as_slice()).unwrap();
        assert_eq!(x.shape(), y.shape());
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.dvkt");
        write_tensor(&path, &x).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), x);
    }

    #[test]
    fn header_layout() {
        let x = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode(&x);
        assert_eq!(&b[..7], &[b'D', b'V', b'K', b'T', 1, 1, 2]);
        assert_eq!(&b[7..15], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[15..23], &1.0f64.to_le_bytes());
    }

    #[test]
    fn rejects_corrupt_files() {
        let x = Tensor::zeros(vec![3]);
        let mut b = encode(&x);
        b[0] = b'X';
        assert!(matches!(read_tensor_from(b.as_slice()), Err(Error::Format(_))));

        let mut b = encode(&x);
        b[4] = 2;
        assert!(matches!(
            read_tensor_from(b.as_slice()),
            Err(Error::Version { found: 2, .. })
        ));

        let mut b = encode(&x);
        b[6] = 5;
        assert!(matches!(read_tensor_from(b.as_slice()), Err(Error::Rank(5))));

        let b = encode(&x);
        assert!(matches!(
            read_tensor_from(&b[..b.len() - 1]),
            Err(Error::Format(_))
        ));

        let mut b = vec![b'D', b'V', b'K', b'T', 1, 1, 4];
        for _ in 0..4 {
            b.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(read_tensor_from(b.as_slice()), Err(Error::Format(_))));
    }
}
