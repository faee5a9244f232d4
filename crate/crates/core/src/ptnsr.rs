//! The `PTNSR1` binary tensor format: magic `PTNSR1\n`, little-endian `u32`
//! rank, `rank` little-endian `u32` extents, then the row-major
//! little-endian `f32` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"PTNSR1\n";

pub fn write_tensor<W: Write>(mut w: W, tensor: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &extent in tensor.shape() {
        w.write_all(&(extent as u32).to_le_bytes())?;
    }
    for v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(11 + 4 * (tensor.rank() + tensor.numel()));
    write_tensor(&mut out, tensor).expect("writing to a Vec cannot fail");
    out
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)
        .map_err(|e| Error::format("PTNSR1", format!("header: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::format("PTNSR1", "bad magic"));
    }
    let mut word = [0u8; 4];
    let mut next_u32 = |r: &mut R| -> Result<u32> {
        r.read_exact(&mut word)
            .map_err(|e| Error::format("PTNSR1", format!("truncated header: {e}")))?;
        Ok(u32::from_le_bytes(word))
    };
    let rank = next_u32(&mut r)? as usize;
    if rank > 16 {
        return Err(Error::format("PTNSR1", format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(next_u32(&mut r)? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::format("PTNSR1", "extent product overflows"))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::format("PTNSR1", format!("payload: {e}")))?;
    if bytes.len() != numel * 4 {
        return Err(Error::format(
            "PTNSR1",
            format!(
                "payload has {} bytes, shape {shape:?} needs {}",
                bytes.len(),
                numel * 4
            ),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn save(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, tensor).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&t);
        let mut expected = b"PTNSR1\n".to_vec();
        expected.extend_from_slice(&[2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0]);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_truncated_and_bad_magic() {
        let t = Tensor::zeros(&[3]);
        let bytes = encode(&t);
        assert!(read_tensor(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(read_tensor(&bad[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn(&shape, 3.0, &mut rng);
            let back = read_tensor(&encode(&t)[..]).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
