//! Single-file checkpoint archive: named `f64` arrays plus a JSON metadata
//! document (run config, step, RNG position).
//!
//! Layout: the 8-byte magic `OPPOCKP1`, a little-endian `u64` header length,
//! the JSON header, then every array's values as little-endian `f64` in
//! header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OPPOCKP1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    shapes: Vec<ShapeEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    /// Appends `entries` under `prefix.`.
    pub fn push_group(&mut self, prefix: &str, entries: Vec<(String, Tensor)>) {
        self.tensors
            .extend(entries.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
    }

    /// Entries under `prefix.`, with the prefix stripped, in archive order.
    pub fn group(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn shapes(&self) -> Vec<ShapeEntry> {
        self.tensors
            .iter()
            .map(|(name, t)| ShapeEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            shapes: self.shapes(),
        })?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (_, t) in &self.tensors {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> std::result::Result<Self, String> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| e.to_string())?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err("not a checkpoint archive".into());
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err("truncated header".into());
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| format!("bad header: {e}"))?;
        let mut blob = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.shapes.len());
        for s in header.shapes {
            let n = s
                .rows
                .checked_mul(s.cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= blob.len()))
                .ok_or_else(|| format!("array `{}` runs past the end of the archive", s.name))?;
            let data = blob[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blob = &blob[n * 8..];
            tensors.push((s.name, Tensor::from_vec(s.rows, s.cols, data)));
        }
        if !blob.is_empty() {
            return Err(format!("{} trailing bytes after the last array", blob.len()));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn archive.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = fs::File::open(path).map_err(|e| Error::load(path, e.to_string()))?;
        Self::read_from(&mut f).map_err(|e| Error::load(path, e))
    }
}

/// Checks that `found` has exactly the names and shapes of `expected`.
pub fn check_shapes(expected: &[ShapeEntry], found: &[ShapeEntry]) -> std::result::Result<(), String> {
    if expected.len() != found.len() {
        return Err(format!(
            "expected {} arrays, archive has {}",
            expected.len(),
            found.len()
        ));
    }
    for (e, f) in expected.iter().zip(found) {
        if e != f {
            return Err(format!(
                "array `{}` {}x{} does not match expected `{}` {}x{}",
                f.name, f.rows, f.cols, e.name, e.rows, e.cols
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({"step": 3}));
        c.push_group(
            "enc",
            vec![
                ("w".into(), Tensor::from_vec(2, 3, vec![1.0, -2.5, 3.0, 0.0, 1e-300, -0.0])),
                ("b".into(), Tensor::row_vector(vec![f64::MAX, 7.0])),
            ],
        );
        c.push_group("z", vec![("star".into(), Tensor::row_vector(vec![0.5]))]);
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("step_3.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.tensors.len(), 3);
        for ((n1, t1), (n2, t2)) in back.tensors.iter().zip(&c.tensors) {
            assert_eq!(n1, n2);
            let a: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(back.group("enc").len(), 2);
        assert_eq!(back.group("enc")[1].0, "b");
    }

    #[test]
    fn truncated_or_padded_archives_are_rejected() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        let short = &bytes[..bytes.len() - 1];
        assert!(Checkpoint::read_from(&mut &short[..]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::read_from(&mut &long[..]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::read_from(&mut &bad_magic[..]).is_err());
    }

    #[test]
    fn shape_table_must_match_exactly() {
        let c = sample();
        let mut other = c.shapes();
        assert!(check_shapes(&c.shapes(), &other).is_ok());
        other[1].cols = 3;
        assert!(check_shapes(&c.shapes(), &other).is_err());
        assert!(check_shapes(&c.shapes(), &other[..2]).is_err());
    }
}
