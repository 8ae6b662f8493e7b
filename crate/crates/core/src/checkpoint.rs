//! Flat little-endian tensor checkpoints.
//!
//! Layout: magic `XGLB`, version `u32`, then for each tensor: name length
//! `u32`, UTF-8 name bytes, rank `u32`, `rank` dims as `u32`, and the payload
//! as `f64` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"XGLB";
pub const VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Format(format!(
            "truncated checkpoint: wanted {n} bytes, {} left",
            buf.len()
        )));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn take_u32(buf: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4)?.try_into().unwrap()))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut buf = bytes.as_slice();
    let magic = take(&mut buf, 4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            std::str::from_utf8(MAGIC).unwrap()
        )));
    }
    let version = take_u32(&mut buf)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let mut tensors = Vec::new();
    while !buf.is_empty() {
        let name_len = take_u32(&mut buf)? as usize;
        let name = String::from_utf8(take(&mut buf, name_len)?.to_vec())
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?;
        let rank = take_u32(&mut buf)? as usize;
        let shape = (0..rank)
            .map(|_| take_u32(&mut buf).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let payload = take(&mut buf, count * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(tensors)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut bytes = Vec::new();
    write_tensors(&mut bytes, tensors)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_tensors(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_unknown_magic_and_version() {
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, &[]).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'Y';
        assert!(matches!(read_tensors(bad.as_slice()), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        let err = read_tensors(bad.as_slice()).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn header_layout_is_fixed() {
        let mut bytes = Vec::new();
        let t = Tensor::new(vec![2], vec![1.0, -0.5]).unwrap();
        write_tensors(&mut bytes, &[("a".into(), t)]).unwrap();
        let mut expected = b"XGLB".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.push(b'a');
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.0f64.to_le_bytes());
        expected.extend((-0.5f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut bytes = Vec::new();
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        write_tensors(&mut bytes, &[("w".into(), t)]).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(read_tensors(bytes.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            entries in prop::collection::vec(
                ("[a-z./0-9]{1,12}", prop::collection::vec(1usize..4, 0..3), any::<u64>()),
                0..5,
            )
        ) {
            let tensors: Vec<(String, Tensor)> = entries
                .into_iter()
                .map(|(name, shape, bits)| {
                    let n: usize = shape.iter().product();
                    let data = (0..n as u64)
                        .map(|i| f64::from_bits(bits.wrapping_add(i.wrapping_mul(0x9E37_79B9))))
                        .collect();
                    (name, Tensor::new(shape, data).unwrap())
                })
                .collect();
            let mut bytes = Vec::new();
            write_tensors(&mut bytes, &tensors).unwrap();
            let back = read_tensors(bytes.as_slice()).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for ((n1, t1), (n2, t2)) in tensors.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let a: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }
}
