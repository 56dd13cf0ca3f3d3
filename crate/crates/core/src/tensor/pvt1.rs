//! On-disk tensor blobs.
//!
//! Layout: magic `PVT1`, dtype code byte (0 = f32, 1 = f64), rank byte,
//! rank little-endian u32 extents, then the row-major payload in
//! little-endian dtype width. No padding, no alignment.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Element};

const MAGIC: [u8; 4] = *b"PVT1";
const MAX_RANK: usize = 8;

pub fn write<E: Element, W: Write>(w: &mut W, shape: &[usize], data: &[E]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if shape.is_empty() || shape.len() > MAX_RANK || shape.contains(&0) {
        return Err(Error::contract(format!("unencodable tensor shape {shape:?}")));
    }
    if numel != data.len() {
        return Err(Error::contract(format!(
            "shape {shape:?} implies {numel} elements, got {}",
            data.len()
        )));
    }
    if shape.iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::contract(format!("extent exceeds u32 in {shape:?}")));
    }
    w.write_all(&MAGIC)?;
    w.write_all(&[E::DTYPE.code(), shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(numel * E::DTYPE.size_bytes());
    match E::DTYPE {
        Dtype::F32 => {
            for &x in data {
                payload.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &x in data {
                payload.extend_from_slice(&x.to_f64().to_le_bytes());
            }
        }
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read<E: Element, R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<E>)> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if head[..4] != MAGIC {
        return Err(Error::Checkpoint(format!("bad tensor magic {:?}", &head[..4])));
    }
    let dtype = Dtype::from_code(head[4])?;
    if dtype != E::DTYPE {
        return Err(Error::Checkpoint(format!(
            "tensor dtype {dtype:?} does not match expected {:?}",
            E::DTYPE
        )));
    }
    let rank = head[5] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Checkpoint(format!("unsupported tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        let d = u32::from_le_bytes(b) as usize;
        if d == 0 {
            return Err(Error::Checkpoint("zero extent in tensor shape".into()));
        }
        shape.push(d);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * dtype.size_bytes()];
    r.read_exact(&mut payload)?;
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|b| E::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|b| {
                E::from_f64(f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
            })
            .collect(),
    };
    Ok((shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes_are_pinned() {
        let mut buf = Vec::new();
        write::<f32, _>(&mut buf, &[2, 3], &[0.0f32; 6]).unwrap();
        assert_eq!(&buf[..4], b"PVT1");
        assert_eq!(buf[4], 0, "f32 dtype code");
        assert_eq!(buf[5], 2, "rank");
        assert_eq!(&buf[6..10], &2u32.to_le_bytes());
        assert_eq!(&buf[10..14], &3u32.to_le_bytes());
        assert_eq!(buf.len(), 14 + 6 * 4);

        let mut buf = Vec::new();
        write::<f64, _>(&mut buf, &[1], &[1.5f64]).unwrap();
        assert_eq!(buf[4], 1, "f64 dtype code");
        assert_eq!(&buf[10..], &1.5f64.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_dtype_mismatch() {
        let mut buf = Vec::new();
        write::<f32, _>(&mut buf, &[2], &[1.0f32, 2.0]).unwrap();

        let mut corrupt = buf.clone();
        corrupt[0] = b'Q';
        assert!(matches!(read::<f32, _>(&mut corrupt.as_slice()), Err(Error::Checkpoint(_))));

        assert!(matches!(read::<f64, _>(&mut buf.as_slice()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut buf = Vec::new();
        write::<f32, _>(&mut buf, &[4], &[1.0f32; 4]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read::<f32, _>(&mut buf.as_slice()), Err(Error::Io(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(
            shape in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let n: usize = shape.iter().product();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let mut buf = Vec::new();
            write::<f32, _>(&mut buf, &shape, &data).unwrap();
            let (rshape, rdata) = read::<f32, _>(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(rshape, shape);
            let a: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = rdata.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
