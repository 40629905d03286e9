//! Binary checkpoint container.
//!
//! Little-endian layout: `"ERSN"`, u32 version, u8 variant, u32 entry
//! count, then per entry a u16 name length, the UTF-8 name, u8 rank, u32
//! dims and the 32-bit payload words; a trailing u32 CRC-32 covers every
//! preceding byte. Integer and 64-bit state is stored bit-cast into 32-bit
//! words so the whole file keeps one entry shape.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::Variant;

pub const MAGIC: &[u8; 4] = b"ERSN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    /// Raw 32-bit payload (IEEE single bits for float arrays).
    pub words: Vec<u32>,
}

impl Entry {
    pub fn floats(name: impl Into<String>, dims: Vec<usize>, data: &[f32]) -> Self {
        Self {
            name: name.into(),
            dims,
            words: data.iter().map(|v| v.to_bits()).collect(),
        }
    }

    pub fn f64s(name: impl Into<String>, data: &[f64]) -> Self {
        let words = data
            .iter()
            .flat_map(|v| split_u64(v.to_bits()))
            .collect::<Vec<_>>();
        Self {
            name: name.into(),
            dims: vec![words.len()],
            words,
        }
    }

    pub fn u64s(name: impl Into<String>, data: &[u64]) -> Self {
        let words = data.iter().flat_map(|&v| split_u64(v)).collect::<Vec<_>>();
        Self {
            name: name.into(),
            dims: vec![words.len()],
            words,
        }
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.words.iter().map(|&w| f32::from_bits(w)).collect()
    }

    pub fn as_u64(&self) -> std::result::Result<Vec<u64>, CheckpointError> {
        if self.words.len() % 2 != 0 {
            return Err(CheckpointError::Malformed(format!(
                "`{}` holds an odd number of words",
                self.name
            )));
        }
        Ok(self
            .words
            .chunks_exact(2)
            .map(|w| w[0] as u64 | (w[1] as u64) << 32)
            .collect())
    }

    pub fn as_f64(&self) -> std::result::Result<Vec<f64>, CheckpointError> {
        Ok(self.as_u64()?.into_iter().map(f64::from_bits).collect())
    }
}

fn split_u64(v: u64) -> [u32; 2] {
    [v as u32, (v >> 32) as u32]
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Checkpoint {
    pub variant: Variant,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> std::result::Result<&Entry, CheckpointError> {
        self.get(name)
            .ok_or_else(|| CheckpointError::MissingParameter(name.to_owned()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.variant.tag());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for w in &e.words {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        if bytes.len() < 4 + 4 + 1 + 4 + 4 {
            return Err(CheckpointError::Truncated);
        }
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..body_len]);
        let mut r = Reader {
            bytes: &bytes[..body_len],
            pos: 8,
        };
        let parsed = (|| {
            let tag = r.u8()?;
            let variant = Variant::from_tag(tag)
                .map_err(|_| CheckpointError::Malformed(format!("variant tag {tag}")))?;
            let count = r.u32()? as usize;
            let mut entries = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                let len = r.u16()? as usize;
                let name = std::str::from_utf8(r.take(len)?)
                    .map_err(|_| CheckpointError::Malformed("entry name is not UTF-8".into()))?
                    .to_owned();
                let rank = r.u8()? as usize;
                let dims = (0..rank)
                    .map(|_| r.u32().map(|d| d as usize))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
                let numel = numel
                    .ok_or_else(|| CheckpointError::Malformed(format!("`{name}` dims overflow")))?;
                let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
                let words = raw
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                entries.push(Entry { name, dims, words });
            }
            if r.pos != r.bytes.len() {
                return Err(CheckpointError::Malformed(format!(
                    "{} trailing bytes",
                    r.bytes.len() - r.pos
                )));
            }
            Ok(Checkpoint { variant, entries })
        })();
        match parsed {
            Ok(c) if stored == computed => Ok(c),
            Ok(_) => Err(CheckpointError::Checksum { stored, computed }),
            Err(e) => Err(e),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&ckpt.encode())
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Checkpoint::decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            variant: Variant::EraseNet3,
            entries: vec![
                Entry::floats(
                    "a.kernel",
                    vec![2, 1, 3, 3],
                    &(0..18).map(|i| i as f32 * 0.25 - 1.0).collect::<Vec<_>>(),
                ),
                Entry::floats("a.bias", vec![2], &[f32::MIN_POSITIVE, -0.0]),
                Entry::f64s("h", &[1e-4, f64::INFINITY]),
                Entry::u64s("n", &[u64::MAX, 7]),
            ],
        }
    }

    #[test]
    fn round_trip_bit_exact() {
        let c = sample();
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
        assert_eq!(
            back.get("h").unwrap().as_f64().unwrap(),
            vec![1e-4, f64::INFINITY]
        );
        assert_eq!(back.get("n").unwrap().as_u64().unwrap(), vec![u64::MAX, 7]);
    }

    #[test]
    fn distinct_error_kinds() {
        let bytes = sample().encode();
        assert_eq!(
            Checkpoint::decode(b"NOPE0000"),
            Err(CheckpointError::BadMagic)
        );
        let mut v = bytes.clone();
        v[4] = 2;
        assert_eq!(
            Checkpoint::decode(&v),
            Err(CheckpointError::UnsupportedVersion(2))
        );
        // cut in the middle of the first array
        let cut = &bytes[..40];
        assert_eq!(Checkpoint::decode(cut), Err(CheckpointError::Truncated));
        let mut flipped = bytes.clone();
        let last_payload = bytes.len() - 5;
        flipped[last_payload] ^= 1;
        assert!(matches!(
            Checkpoint::decode(&flipped),
            Err(CheckpointError::Checksum { .. })
        ));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&sample(), &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), sample());
        assert!(!dir.path().join("m.ckpt.tmp").exists());
    }
}
