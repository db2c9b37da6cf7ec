//! Model checkpoint container. All integers and floats are little-endian.
//!
//! ```text
//! offset  size        field
//! 0       8           magic "PFSPECTR"
//! 8       4   u32     format version (1)
//! 12      1   u8      model kind: 0 = pisa, 1 = expgen
//! 13      4   u32     l (component count; 1 for expgen)
//! 17      4   u32     M (state dimension)
//! 21      8   u64     R (grid points)
//! 29      8   u64     grid hash
//! 37      4   u32     header length H
//! 41      H           UTF-8 JSON header (architecture, options, domain)
//! ..      4   u32     metadata length J
//! ..      J           UTF-8 JSON metadata (training provenance, free-form)
//! ..      4   u32     block count B
//! then B times:
//!         2   u16     name length n
//!         n           UTF-8 block name ("theta", "gamma", "delta")
//!         8   u64     value count c
//!         8c  f64     values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::density::GridId;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PFSPECTR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Pisa,
    ExpGen,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Pisa => 0,
            ModelKind::ExpGen => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(ModelKind::Pisa),
            1 => Ok(ModelKind::ExpGen),
            _ => Err(Error::Schema(format!("unknown model kind tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Pisa => "pisa",
            ModelKind::ExpGen => "expgen",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub l: u32,
    pub dim: u32,
    pub n_grid: u64,
    pub grid_id: GridId,
    pub header: Value,
    pub metadata: Value,
    pub blocks: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn block(&self, name: &str) -> Result<&[f64]> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Schema(format!("checkpoint has no `{name}` block")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.kind.tag());
        out.extend_from_slice(&self.l.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&self.n_grid.to_le_bytes());
        out.extend_from_slice(&self.grid_id.0.to_le_bytes());
        for doc in [&self.header, &self.metadata] {
            let text = serde_json::to_vec(doc)?;
            out.extend_from_slice(&len_u32(text.len())?.to_le_bytes());
            out.extend_from_slice(&text);
        }
        out.extend_from_slice(&len_u32(self.blocks.len())?.to_le_bytes());
        for (name, values) in &self.blocks {
            let n = u16::try_from(name.len())
                .map_err(|_| Error::Schema(format!("block name `{name}` too long")))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Schema("not a pf-spectra checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let kind = ModelKind::from_tag(r.take(1)?[0])?;
        let l = r.u32()?;
        let dim = r.u32()?;
        let n_grid = r.u64()?;
        let grid_id = GridId(r.u64()?);
        let header_len = r.u32()? as usize;
        let header = serde_json::from_slice(r.take(header_len)?)?;
        let meta_len = r.u32()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?)?;
        let n_blocks = r.u32()?;
        let mut blocks = Vec::with_capacity(n_blocks as usize);
        for _ in 0..n_blocks {
            let n = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Schema("block name is not UTF-8".into()))?;
            let count = r.u64()? as usize;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Schema("block too large".into()))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blocks.push((name, values));
        }
        if r.pos != bytes.len() {
            return Err(Error::Schema(format!(
                "{} trailing bytes after the last block",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            kind,
            l,
            dim,
            n_grid,
            grid_id,
            header,
            metadata,
            blocks,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Schema(format!("section of {n} entries is too large")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Schema(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: ModelKind::Pisa,
            l: 3,
            dim: 2,
            n_grid: 64,
            grid_id: GridId(0xdead_beef),
            header: json!({"a_sizes": [64, 8, 3]}),
            metadata: json!({"epoch": 4}),
            blocks: vec![("theta".into(), vec![1.5, -0.0, f64::MIN_POSITIVE]), ("gamma".into(), vec![])],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.block("theta").unwrap()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Schema(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Schema(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Schema(_))));
    }

    #[test]
    fn missing_block() {
        assert!(sample().block("delta").is_err());
    }
}
