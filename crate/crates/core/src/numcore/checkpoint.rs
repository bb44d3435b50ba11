//! `MGTC` parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MGTC" | version: u16 | count: u32
//! count × ( id_len: u32 | id: UTF-8 | rank: u32 | dims: rank × u32 | values: f32 × Π dims )
//! [ manifest_len: u32 | manifest: UTF-8 "key = value" lines ]
//! ```
//!
//! The trailing manifest section is optional; readers treat end-of-file after
//! the last entry as an empty manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::array::DenseArray;
use super::error::{NumError, NumResult};

pub const MAGIC: &[u8; 4] = b"MGTC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, DenseArray>,
    pub manifest: BTreeMap<String, String>,
}

fn err(msg: impl Into<String>) -> NumError {
    NumError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(entries: BTreeMap<String, DenseArray>) -> Self {
        Self {
            entries,
            manifest: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, value) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.rank() as u32).to_le_bytes());
            for &d in value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        if !self.manifest.is_empty() {
            let text: String = self
                .manifest
                .iter()
                .map(|(k, v)| format!("{k} = {v}\n"))
                .collect();
            out.extend_from_slice(&(text.len() as u32).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> NumResult<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut bytes, &mut magic)?;
        if &magic != MAGIC {
            return Err(err("bad magic"));
        }
        let version = u16::from_le_bytes(take(&mut bytes)?);
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut bytes)?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = read_u32(&mut bytes)? as usize;
            let name = read_string(&mut bytes, len)?;
            let rank = read_u32(&mut bytes)? as usize;
            let dims = (0..rank)
                .map(|_| read_u32(&mut bytes).map(|d| d as usize))
                .collect::<NumResult<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            if bytes.len() < n * 4 {
                return Err(err(format!("truncated values for `{name}`")));
            }
            let values = (0..n)
                .map(|_| take::<4>(&mut bytes).map(|b| f64::from(f32::from_le_bytes(b))))
                .collect::<NumResult<Vec<_>>>()?;
            let value = DenseArray::new(dims, values)?;
            if entries.insert(name.clone(), value).is_some() {
                return Err(err(format!("duplicate entry `{name}`")));
            }
        }
        let mut manifest = BTreeMap::new();
        if !bytes.is_empty() {
            let len = read_u32(&mut bytes)? as usize;
            let text = read_string(&mut bytes, len)?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| err(format!("bad manifest line `{line}`")))?;
                manifest.insert(k.trim().to_string(), v.trim().to_string());
            }
            if !bytes.is_empty() {
                return Err(err("trailing bytes after manifest"));
            }
        }
        Ok(Self { entries, manifest })
    }

    pub fn save(&self, path: &Path) -> NumResult<()> {
        let mut f = fs::File::create(path).map_err(|e| err(e.to_string()))?;
        f.write_all(&self.to_bytes()).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> NumResult<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| err(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }
}

fn read_exact(bytes: &mut &[u8], out: &mut [u8]) -> NumResult<()> {
    bytes.read_exact(out).map_err(|_| err("unexpected end of data"))
}

fn take<const N: usize>(bytes: &mut &[u8]) -> NumResult<[u8; N]> {
    let mut out = [0u8; N];
    read_exact(bytes, &mut out)?;
    Ok(out)
}

fn read_u32(bytes: &mut &[u8]) -> NumResult<u32> {
    take::<4>(bytes).map(u32::from_le_bytes)
}

fn read_string(bytes: &mut &[u8], len: usize) -> NumResult<String> {
    if bytes.len() < len {
        return Err(err("truncated string"));
    }
    let (head, rest) = bytes.split_at(len);
    *bytes = rest;
    String::from_utf8(head.to_vec()).map_err(|_| err("identifier is not UTF-8"))
}
