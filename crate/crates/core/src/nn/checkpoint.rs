//! Versioned binary parameter files.
//!
//! Layout, all little-endian:
//! `b"NFCK"`, `u32` version, 4-byte network kind, `u32` descriptor length,
//! descriptor `u64`s, `u32` block count, then per block a `u64` length and
//! that many `f64` values, in the network's block order.

use std::fs;
use std::path::Path;

use super::{Mlp, Parameterized};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NFCK";
const VERSION: u32 = 1;

pub trait Checkpointable: Parameterized + Sized {
    const KIND: [u8; 4];

    /// Integers that fully determine the architecture.
    fn descriptor(&self) -> Vec<u64>;

    /// A network with the described architecture and arbitrary parameters.
    fn from_descriptor(descriptor: &[u64]) -> Result<Self>;
}

pub fn save_checkpoint<N: Checkpointable>(net: &N, path: &Path) -> Result<()> {
    fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<N: Checkpointable>(path: &Path) -> Result<N> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub(crate) fn encode<N: Checkpointable>(net: &N) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&N::KIND);
    let desc = net.descriptor();
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    for d in desc {
        out.extend_from_slice(&d.to_le_bytes());
    }
    let blocks = net.param_blocks();
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
        for v in b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
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

pub(crate) fn decode<N: Checkpointable>(bytes: &[u8]) -> Result<N> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = r.take(4)?;
    if kind != N::KIND {
        return Err(Error::Checkpoint(format!(
            "file holds a '{}' network, expected '{}'",
            String::from_utf8_lossy(kind),
            String::from_utf8_lossy(&N::KIND)
        )));
    }
    let n_desc = r.u32()? as usize;
    let desc = (0..n_desc).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let mut net = N::from_descriptor(&desc)?;
    let n_blocks = r.u32()? as usize;
    let mut blocks = net.param_blocks_mut();
    if n_blocks != blocks.len() {
        return Err(Error::Checkpoint(format!(
            "{n_blocks} parameter blocks, architecture has {}",
            blocks.len()
        )));
    }
    for block in blocks.iter_mut() {
        let len = r.u64()? as usize;
        if len != block.len() {
            return Err(Error::Checkpoint("parameter block size mismatch".into()));
        }
        for v in block.iter_mut() {
            *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(net)
}

impl Checkpointable for Mlp {
    const KIND: [u8; 4] = *b"MLP ";

    fn descriptor(&self) -> Vec<u64> {
        let mut d = vec![
            self.input_dim() as u64,
            self.skip_at().map_or(0, |s| s as u64 + 1),
            self.depth() as u64,
        ];
        d.extend(self.layers().iter().map(|l| l.output_dim() as u64));
        d
    }

    fn from_descriptor(d: &[u64]) -> Result<Self> {
        let bad = || Error::Checkpoint("malformed network descriptor".into());
        let (&input, &skip, &depth) = match d {
            [a, b, c, ..] => (a, b, c),
            _ => return Err(bad()),
        };
        if d.len() != 3 + depth as usize {
            return Err(bad());
        }
        let widths: Vec<usize> = d[3..].iter().map(|&w| w as usize).collect();
        let skip = if skip == 0 { None } else { Some(skip as usize - 1) };
        Mlp::new(input as usize, &widths, skip).map_err(|_| bad())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let net = Mlp::random(3, &[5, 6, 7, 1], Some(2), 8).unwrap();
        let back: Mlp = decode(&encode(&net)).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let net = Mlp::random(3, &[4, 1], None, 1).unwrap();
        let bytes = encode(&net);
        assert!(decode::<Mlp>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<Mlp>(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode::<Mlp>(&long).is_err());
    }
}
