//! Little-endian binary containers.
//!
//! Grid files (`VFFT` features, `VIMG` images):
//!
//! ```text
//! magic[4] | version u32 = 1 | n u32 | h u32 | w u32 | d u32
//! | tag_len u32 | tag utf-8 | n·h·w·d f32 (image, row, column, channel)
//! ```
//!
//! Image files append `n` u32 class labels after the payload.
//!
//! Checkpoints (`VAVK`):
//!
//! ```text
//! magic "VAVK" | version u32 = 1 | count u32
//! | count × (name_len u32 | name utf-8 | rank u32 | dims u32… | f32 data)
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const GRID_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VAVK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated at byte {offset}: needed {needed} more bytes for {what}")]
    Truncated {
        offset: usize,
        needed: usize,
        what: &'static str,
    },
    #[error("invalid data at byte {offset}: {reason}")]
    Invalid { offset: usize, reason: String },
}

/// Cursor over a byte slice that reports offsets on failure.
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, len: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if self.remaining() < len {
            return Err(FormatError::Truncated {
                offset: self.bytes.len(),
                needed: len - self.remaining(),
                what,
            });
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn string(&mut self, what: &'static str) -> Result<String, FormatError> {
        let len = self.u32(what)? as usize;
        let at = self.pos;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|e| FormatError::Invalid {
            offset: at,
            reason: format!("{what} is not UTF-8: {e}"),
        })
    }

    pub fn f32s(&mut self, count: usize, what: &'static str) -> Result<Vec<f32>, FormatError> {
        let bytes = count.checked_mul(4).ok_or(FormatError::Invalid {
            offset: self.pos,
            reason: format!("{what} length overflows"),
        })?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes via a temporary sibling and rename so readers never see half a file.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let io_err = |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io_err)?;
    f.write_all(bytes).map_err(io_err)?;
    f.sync_all().map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

/// Decoded grid container; values stay `f32` exactly as stored.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFile {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub tag: String,
    /// image-major, then row, column, channel
    pub values: Vec<f32>,
}

impl GridFile {
    pub fn encode(&self, magic: &[u8; 4]) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.tag.len() + self.values.len() * 4);
        out.extend_from_slice(magic);
        put_u32(&mut out, GRID_VERSION);
        for v in [self.n, self.h, self.w, self.d] {
            put_u32(&mut out, v as u32);
        }
        put_str(&mut out, &self.tag);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the header and payload, leaving the reader at the first byte after it.
    pub fn decode(r: &mut ByteReader<'_>, magic: &[u8; 4]) -> Result<Self, FormatError> {
        r.magic(magic)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != GRID_VERSION {
            return Err(FormatError::Invalid {
                offset: at,
                reason: format!("unsupported version {version}"),
            });
        }
        let n = r.u32("count")? as usize;
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        let d = r.u32("channels")? as usize;
        let tag = r.string("source tag")?;
        let count = n
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .and_then(|v| v.checked_mul(d))
            .ok_or(FormatError::Invalid {
                offset: 8,
                reason: "header dimensions overflow".into(),
            })?;
        let values = r.f32s(count, "payload")?;
        Ok(Self { n, h, w, d, tag, values })
    }
}

/// Ordered named tensors as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorTable {
    pub entries: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl TensorTable {
    pub fn push(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.entries
            .push((name.to_string(), shape.to_vec(), data.iter().map(|&v| v as f32).collect()));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, self.entries.len() as u32);
        for (name, shape, data) in &self.entries {
            put_str(&mut out, name);
            put_u32(&mut out, shape.len() as u32);
            for &d in shape {
                put_u32(&mut out, d as u32);
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::Invalid {
                offset: at,
                reason: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = r.u32("tensor count")? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let data = r.f32s(shape.iter().product(), "tensor data")?;
            entries.push((name, shape, data));
        }
        if r.remaining() != 0 {
            return Err(FormatError::Invalid {
                offset: r.offset(),
                reason: format!("{} trailing bytes", r.remaining()),
            });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::decode(&read_file(path)?)
    }
}
