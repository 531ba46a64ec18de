//! `HFSF` feature files: magic `"HFSF"`, `u32` version, `u32 N`, `u32 d`, then
//! `N·d` row-major little-endian `f32` features and `N` `f32` timestamps.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"HFSF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Frame embeddings (`N×d`, row-major) with one timestamp per frame. Values
/// are stored as `f64` but always hold `f32`-representable numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub n: usize,
    pub d: usize,
    pub features: Vec<f64>,
    pub timestamps: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, features: Vec<f64>, timestamps: Vec<f64>) -> Result<Self> {
        if features.len() != n * d || timestamps.len() != n {
            return Err(Error::invalid(format!(
                "feature matrix {n}x{d} needs {} values and {n} timestamps, got {} and {}",
                n * d,
                features.len(),
                timestamps.len()
            )));
        }
        Ok(Self {
            n,
            d,
            features,
            timestamps,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 4 * self.n * self.d + 4 * self.n
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        for v in self.features.iter().chain(&self.timestamps) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    /// Decodes one record starting at `bytes[0]`; `base` is the absolute
    /// offset of `bytes` in its file, used in error messages. Returns the
    /// matrix and the number of bytes consumed.
    pub fn decode(bytes: &[u8], base: u64) -> Result<(Self, usize)> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && bytes[..4] != FEATURE_MAGIC {
                return Err(bad_magic(bytes));
            }
            return Err(Error::Truncated {
                offset: base + bytes.len() as u64,
                detail: format!("header needs {HEADER_LEN} bytes, found {}", bytes.len()),
            });
        }
        if bytes[..4] != FEATURE_MAGIC {
            return Err(bad_magic(bytes));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != FEATURE_VERSION {
            return Err(Error::BadVersion {
                found: version,
                expected: FEATURE_VERSION,
            });
        }
        let (n, d) = (word(8) as usize, word(12) as usize);
        let total = HEADER_LEN + 4 * n * d + 4 * n;
        if bytes.len() < total {
            return Err(Error::Truncated {
                offset: base + bytes.len() as u64,
                detail: format!("{n}x{d} feature record needs {total} bytes, found {}", bytes.len()),
            });
        }
        let mut values = bytes[HEADER_LEN..total]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
        let features: Vec<f64> = values.by_ref().take(n * d).collect();
        let timestamps: Vec<f64> = values.collect();
        if let Some(pos) = features.iter().chain(&timestamps).position(|v| !v.is_finite()) {
            return Err(Error::Malformed {
                location: format!("byte {}", base + (HEADER_LEN + 4 * pos) as u64),
                detail: "non-finite value".into(),
            });
        }
        Ok((Self::new(n, d, features, timestamps)?, total))
    }

    /// Reads a file holding exactly one record.
    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let (m, used) = Self::decode(&bytes, 0)?;
        if used != bytes.len() {
            return Err(Error::Malformed {
                location: format!("{} byte {used}", path.display()),
                detail: format!("{} trailing bytes after the record", bytes.len() - used),
            });
        }
        Ok(m)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }
}

fn bad_magic(bytes: &[u8]) -> Error {
    let mut found = [0u8; 4];
    found.copy_from_slice(&bytes[..4]);
    Error::BadMagic {
        expected: FEATURE_MAGIC,
        found,
    }
}

/// Rounds to the nearest `f32`, so values survive an `HFSF` round trip exactly.
pub fn to_f32_precision(v: f64) -> f64 {
    v as f32 as f64
}
