//! Named-tensor container used for checkpoints and dataset caches.
//!
//! ```text
//! "TIMEDBIN"  u32 version  u32 count
//! count x { u16 name_len, name (UTF-8), u8 rank, rank x u32 dim, f32 data... }
//! ```
//!
//! All integers and floats are little-endian. Values are stored as 32-bit
//! floats; integers that must survive exactly (steps, rng words) are split
//! into 16-bit chunks first, see [`u64_to_f32s`].

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"TIMEDBIN";
pub const VERSION: u32 = 1;

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default)]
pub struct Container {
    entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.push((name.into(), value));
    }

    pub fn push_values(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let n = values.len();
        self.entries.push((name.into(), Tensor::new(values, &[n])?));
        Ok(())
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`Container::get`] but a missing entry is a format error.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Format {
            offset: 0,
            message: format!("missing entry `{name}`"),
        })
    }

    /// Entries whose names start with `prefix`, prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.entries
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.entries.len()).map_err(|_| too_big("tensor count"))?.to_le_bytes());
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            out.extend_from_slice(&u16::try_from(nb.len()).map_err(|_| too_big("name"))?.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(u8::try_from(t.rank()).map_err(|_| too_big("rank"))?);
            for &d in t.shape() {
                out.extend_from_slice(&u32::try_from(d).map_err(|_| too_big("dimension"))?.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Container> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, not a TIMEDBIN file".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 8,
                message: format!("unsupported version {version}, expected {VERSION}"),
            });
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format {
                    offset: at + 2,
                    message: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format {
                offset: r.pos,
                message: format!("tensor `{name}` shape {shape:?} overflows"),
            })?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| too_big("tensor"))?)?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            entries.push((name, Tensor::new(data, &shape)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Container { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Container> {
        Container::decode(&std::fs::read(path)?)
    }
}

fn too_big(what: &str) -> Error {
    Error::Format {
        offset: 0,
        message: format!("{what} too large for the container format"),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.pos,
            message: format!("truncated: wanted {n} bytes, {} left", self.bytes.len() - self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Four 16-bit chunks, low first; each is exact as an f32.
pub fn u64_to_f32s(v: u64) -> [f64; 4] {
    [0, 16, 32, 48].map(|s| ((v >> s) & 0xffff) as f64)
}

pub fn f32s_to_u64(chunks: &[f64]) -> Result<u64> {
    if chunks.len() != 4 || chunks.iter().any(|&c| !(0.0..65536.0).contains(&c) || c.fract() != 0.0) {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad integer chunks {chunks:?}"),
        });
    }
    Ok(chunks.iter().enumerate().map(|(i, &c)| (c as u64) << (16 * i)).sum())
}

/// Bytes as one value per byte.
pub fn bytes_to_values(b: &[u8]) -> Vec<f64> {
    b.iter().map(|&x| x as f64).collect()
}

pub fn values_to_bytes(v: &[f64]) -> Result<Vec<u8>> {
    v.iter()
        .map(|&x| {
            if (0.0..256.0).contains(&x) && x.fract() == 0.0 {
                Ok(x as u8)
            } else {
                Err(Error::Format {
                    offset: 0,
                    message: format!("{x} is not a byte"),
                })
            }
        })
        .collect()
}
