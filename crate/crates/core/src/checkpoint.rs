//! Binary checkpoint format.
//!
//! ```text
//! "SBNT" | u32 version | u32 count | count x record
//! record = u16 name_len | name (UTF-8) | u8 ndim | ndim x u32 dim | u8 dtype | payload
//! ```
//!
//! All integers and payload values are little-endian; dtype 0 is f32.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Module;
use crate::tensor::{Dims, Tensor};

pub const MAGIC: &[u8; 4] = b"SBNT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

pub type NamedTensor = (String, Tensor<f32>);

pub fn encode(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let payload: usize = tensors.iter().map(|(n, t)| n.len() + 24 + 4 * t.len()).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name longer than 65535 bytes: {name:.40}...")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(4);
        for d in t.dims() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("{name}: dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(DTYPE_F32);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Decodes a checkpoint. Tensors with fewer than four dims are padded with
/// leading ones.
pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    // every record needs at least 4 bytes, which bounds the preallocation
    let mut out = Vec::with_capacity(count.min(r.remaining() / 4));
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| Error::Parse {
                offset: at + 2,
                msg: format!("tensor name is not UTF-8: {e}"),
            })?
            .to_string();
        let ndim = r.u8("ndim")? as usize;
        if !(1..=4).contains(&ndim) {
            return Err(Error::Format(format!("{name}: unsupported rank {ndim}")));
        }
        let mut dims: Dims = [1; 4];
        for d in &mut dims[4 - ndim..] {
            *d = r.u32("dims")? as usize;
        }
        let dtype_at = r.pos;
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!(
                "{name}: unknown dtype tag {dtype} at byte offset {dtype_at}"
            )));
        }
        let volume = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("{name}: dims {dims:?} overflow")))?;
        let raw = r.take(volume, "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::from_vec(dims, data)?));
    }
    if r.remaining() != 0 {
        return Err(Error::Parse {
            offset: r.pos,
            msg: format!("{} trailing bytes after the last tensor", r.remaining()),
        });
    }
    Ok(out)
}

/// Every named tensor of `module`, parameters and buffers, in visit order.
pub fn collect<M: Module<f32> + ?Sized>(module: &mut M) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    module.visit("", &mut |name, _, t| out.push((name.to_string(), t.detached())));
    out
}

/// Overwrites every tensor of `module` from `tensors`. Names and dims must
/// match exactly in both directions.
pub fn restore<M: Module<f32> + ?Sized>(module: &mut M, tensors: Vec<NamedTensor>) -> Result<()> {
    let mut by_name: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for (name, t) in tensors {
        if by_name.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
    }
    let mut failure = None;
    module.visit("", &mut |name, _, t| {
        if failure.is_some() {
            return;
        }
        match by_name.remove(name) {
            None => failure = Some(Error::Format(format!("checkpoint is missing `{name}`"))),
            Some(src) if src.dims() != t.dims() => {
                failure = Some(Error::Format(format!(
                    "`{name}` has dims {:?} in the checkpoint, {:?} in the model",
                    src.dims(),
                    t.dims()
                )))
            }
            Some(src) => t.data_mut().copy_from_slice(src.data()),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format(format!("checkpoint has unknown tensor `{extra}`")));
    }
    Ok(())
}

pub fn save<M: Module<f32> + ?Sized>(module: &mut M, path: &Path) -> Result<()> {
    let bytes = encode(&collect(module))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<M: Module<f32> + ?Sized>(module: &mut M, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(module, decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedTensor> {
        vec![
            ("a.weight".into(), Tensor::from_vec([2, 1, 1, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25]).unwrap()),
            ("b".into(), Tensor::zeros([1, 1, 1, 1])),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = encode(&sample()).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
        for ((na, ta), (nb, tb)) in sample().iter().zip(&back) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"SBNT");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &8u16.to_le_bytes());
        assert_eq!(&bytes[14..22], b"a.weight");
        assert_eq!(bytes[22], 4);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode(&sample()).unwrap();
        for cut in [3, 10, 20, bytes.len() - 1] {
            match decode(&bytes[..cut]) {
                Err(Error::Parse { offset, .. }) => assert!(offset <= cut),
                Err(Error::Format(_)) => assert!(cut < 4),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn huge_count_does_not_allocate() {
        let mut bytes = b"SBNT".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Parse { .. })));
    }

    #[test]
    fn bad_dtype_and_magic() {
        let mut bytes = encode(&sample()).unwrap();
        let dtype_pos = 12 + 2 + 8 + 1 + 16;
        bytes[dtype_pos] = 7;
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode(b"NOPE\x01\0\0\0\0\0\0\0"), Err(Error::Format(_))));
    }
}
