//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "STNH"  u32 version  u32 count
//! count × { u32 name_len, name (UTF-8), u32 rank, rank × u64 extent, numel × f32 }
//! ```
//!
//! Entries keep insertion order, so save → load → save is byte-identical.

use std::fs;
use std::path::Path;

use crate::error::{format_err, Result};
use crate::numeric::{Scalar, Tensor};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 4] = b"STNH";
pub const VERSION: u32 = 1;
pub const MAX_NAME: usize = 1024;
pub const MAX_RANK: usize = 8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Append every tensor of `params` as `{prefix}{name}`.
    pub fn add_params<T: Scalar>(&mut self, prefix: &str, params: &ParamSet<T>) {
        for (name, t) in params.iter() {
            self.push(format!("{prefix}{name}"), t.cast());
        }
    }

    /// Overwrite every tensor of `params` from `{prefix}{name}` entries.
    pub fn load_params<T: Scalar>(&self, prefix: &str, params: &mut ParamSet<T>) -> Result<()> {
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let key = format!("{prefix}{}", params.name(id));
            let t = self.get(&key).ok_or_else(|| format_err!("checkpoint lacks {key}"))?;
            if t.shape() != params.get(id).shape() {
                return Err(format_err!(
                    "{key}: checkpoint shape {:?}, model expects {:?}",
                    t.shape(),
                    params.get(id).shape()
                ));
            }
            params.set(id, t.cast())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse a checkpoint, rejecting truncation, trailing bytes, duplicate
    /// names and sizes that exceed the input before allocating.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(format_err!("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err!("unsupported checkpoint version {version}"));
        }
        let count = r.u32()? as usize;
        let mut entries: Vec<(String, Tensor<f32>)> = Vec::new();
        for i in 0..count {
            let len = r.u32()? as usize;
            if len == 0 || len > MAX_NAME {
                return Err(format_err!("entry {i}: name length {len}"));
            }
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| format_err!("entry {i}: name is not UTF-8"))?
                .to_owned();
            if entries.iter().any(|(n, _)| *n == name) {
                return Err(format_err!("duplicate entry {name}"));
            }
            let rank = r.u32()? as usize;
            if rank > MAX_RANK {
                return Err(format_err!("{name}: rank {rank}"));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: u64 = 1;
            for _ in 0..rank {
                let d = r.u64()?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| format_err!("{name}: extent overflow"))?;
                shape.push(d);
            }
            let remaining = (bytes.len() - r.pos) as u64;
            if numel.checked_mul(4).is_none_or(|b| b > remaining) {
                return Err(format_err!("{name}: payload of {numel} values exceeds file"));
            }
            let payload = r.take(numel as usize * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let shape: Vec<usize> = shape.into_iter().map(|d| d as usize).collect();
            entries.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(format_err!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push(
            "gen.w",
            Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, -0.0, 7e30]).unwrap(),
        );
        c.push("meta.iter", Tensor::scalar(12.0));
        c.push("empty", Tensor::zeros(&[0, 4]));
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let a = sample().to_bytes();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back.to_bytes(), a);
        assert_eq!(back.get("meta.iter").unwrap().item(), 12.0);
    }

    #[test]
    fn rejects_corruption() {
        let good = sample().to_bytes();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let mut bad_version = good.clone();
        bad_version[4] = 9;
        let mut trailing = good.clone();
        trailing.push(0);
        let mut huge = good.clone();
        // first extent of the first entry
        let off = 12 + 4 + 5 + 4;
        huge[off..off + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        for (what, b) in [
            ("magic", bad_magic),
            ("version", bad_version),
            ("trailing", trailing),
            ("truncated", good[..good.len() - 1].to_vec()),
            ("extent", huge),
        ] {
            assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format(_))), "{what}");
        }
        let mut dup = sample();
        dup.push("gen.w", Tensor::scalar(1.0));
        assert!(Checkpoint::from_bytes(&dup.to_bytes()).is_err());
    }

    #[test]
    fn params_round_trip() {
        use crate::params::Init;
        let mut p = ParamSet::<f32>::new();
        let id = p.add("w", &[2, 2], Init::Zeros);
        p.set(id, Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let mut c = Checkpoint::default();
        c.add_params("gen.", &p);
        let mut q = ParamSet::<f32>::new();
        q.add("w", &[2, 2], Init::Zeros);
        c.load_params("gen.", &mut q).unwrap();
        assert_eq!(q.get(id), p.get(id));
        let mut wrong = ParamSet::<f32>::new();
        wrong.add("w", &[4], Init::Zeros);
        assert!(c.load_params("gen.", &mut wrong).is_err());
        assert!(c.load_params("disc.", &mut q).is_err());
    }
}
