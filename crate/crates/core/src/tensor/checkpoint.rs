//! Binary checkpoint format for a [`ParamStore`].
//!
//! All integers are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "TZCK"
//! 4       4     u32 format version (currently 1)
//! 8       8     u64 config hash
//! 16      4     u32 record count
//! 20      ...   records, in parameter registration order:
//!                 u32 name length, name bytes (UTF-8)
//!                 u32 rank, rank × u32 dimensions
//!                 product(dimensions) × f32 values, row-major
//! ```
//!
//! Values are stored at 32-bit precision, so loading yields each parameter
//! rounded to the nearest `f32`. Saving a loaded store reproduces the input
//! bytes exactly.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"TZCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub fn save<W: Write>(mut w: W, params: &ParamStore, config_hash: u64) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&config_hash.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (_, name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn to_bytes(params: &ParamStore, config_hash: u64) -> Vec<u8> {
    let mut buf = Vec::new();
    save(&mut buf, params, config_hash).expect("writing to a Vec cannot fail");
    buf
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Returns the stored config hash and parameters.
pub fn load<R: Read>(mut r: R) -> Result<(u64, ParamStore), CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut hash = [0u8; 8];
    r.read_exact(&mut hash)?;
    let hash = u64::from_le_bytes(hash);
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(shape, values)
            .map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
        store.add(name, t);
    }
    Ok((hash, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip_exactly(
            values in prop::collection::vec(-1e6f64..1e6, 1..40),
            hash in any::<u64>(),
        ) {
            let mut store = ParamStore::new();
            store.add("w", Tensor::new(vec![values.len()], values.clone()).unwrap());
            store.add("b.bias", Tensor::new(vec![1, 2], vec![0.5, -0.25]).unwrap());
            let bytes = to_bytes(&store, hash);
            let (h, loaded) = load(bytes.as_slice()).unwrap();
            prop_assert_eq!(h, hash);
            prop_assert_eq!(to_bytes(&loaded, hash), bytes);
            for (i, v) in values.iter().enumerate() {
                let got = loaded.get(loaded.find("w").unwrap()).data()[i];
                prop_assert_eq!(got, *v as f32 as f64);
            }
        }
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(matches!(
            load(&b"NOPE\x01\x00\x00\x00"[..]),
            Err(CheckpointError::BadMagic)
        ));
        let mut bytes = to_bytes(&ParamStore::new(), 1);
        bytes[4] = 9;
        assert!(matches!(
            load(bytes.as_slice()),
            Err(CheckpointError::Version(9))
        ));
    }
}
