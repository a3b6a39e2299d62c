//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "IVTC"  u16 version
//! repeated until EOF:
//!     u32 name length, UTF-8 name bytes,
//!     u32 rank, rank × u64 dims,
//!     product(dims) × f64 payload
//! ```

use std::io::{self, Read, Write};

use super::{ParamStore, Tensor};
use crate::error::{IvtError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"IVTC";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, t) in store.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> IvtError {
    IvtError::Io(io::Error::new(io::ErrorKind::InvalidData, msg.into()))
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(corrupt("truncated checkpoint record")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(corrupt(format!("bad checkpoint magic {magic:?}")));
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver)?;
    let version = u16::from_le_bytes(ver);
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let mut store = ParamStore::new();
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    while read_exact_or_eof(&mut r, &mut u32buf)? {
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| corrupt(e.to_string()))?;
        r.read_exact(&mut u32buf)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u64buf)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u64buf)?;
            data.push(f64::from_le_bytes(u64buf));
        }
        store.insert(name, Tensor::new(&shape, data)?);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[2], vec![1.5, -0.0]).unwrap());
        let mut buf = Vec::new();
        write_checkpoint(&store, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"IVTC");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(&buf[6..10], &[1, 0, 0, 0]);
        assert_eq!(buf[10], b'w');
        assert_eq!(&buf[11..15], &[1, 0, 0, 0]);
        assert_eq!(&buf[15..23], &2u64.to_le_bytes());
        assert_eq!(&buf[23..31], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 39);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&b"NOPE\x01\x00"[..]).is_err());
        let mut store = ParamStore::new();
        store.insert("a", Tensor::ones(&[3]));
        let mut buf = Vec::new();
        write_checkpoint(&store, &mut buf).unwrap();
        buf.pop();
        assert!(read_checkpoint(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            entries in proptest::collection::btree_map(
                "[a-z.]{1,12}",
                (proptest::collection::vec(1usize..4, 0..3), any::<u64>()),
                0..5,
            )
        ) {
            let mut store = ParamStore::new();
            for (name, (shape, seed)) in &entries {
                let n: usize = shape.iter().product();
                // Arbitrary bit patterns, including NaN payloads and signed zeros.
                let data = (0..n as u64).map(|i| f64::from_bits(seed.wrapping_mul(i + 1))).collect();
                store.insert(name.clone(), Tensor::new(shape, data).unwrap());
            }
            let mut buf = Vec::new();
            write_checkpoint(&store, &mut buf).unwrap();
            let back = read_checkpoint(&buf[..]).unwrap();
            prop_assert!(store.bit_eq(&back));
            let mut again = Vec::new();
            write_checkpoint(&back, &mut again).unwrap();
            prop_assert_eq!(buf, again);
        }
    }
}
