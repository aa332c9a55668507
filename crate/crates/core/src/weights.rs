//! Named weight arrays with a bit-exact on-disk format, plus seeded random
//! initialization helpers for the forward-pass networks.
//!
//! Archive layout, little-endian throughout:
//!
//! ```text
//! magic   8 bytes  "FFWA0001"
//! count   u32
//! entry*  name_len u32, name bytes (UTF-8),
//!         dtype u8 (0 = f32), ndim u32, dims u32 * ndim,
//!         payload f32 * prod(dims)
//! ```
//!
//! Write -> read round-trips are bitwise identical; readers reject a wrong
//! magic, truncated payloads, and dtype/shape surprises with distinct errors.

use crate::error::{Error, Result};
use crate::grid::Kernel;
use rand::Rng;

pub const ARCHIVE_MAGIC: &[u8; 8] = b"FFWA0001";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

/// An ordered collection of named f32 arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightArchive {
    entries: Vec<(String, Entry)>,
}

impl WeightArchive {
    pub fn new() -> WeightArchive {
        WeightArchive::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn insert(&mut self, name: &str, dims: Vec<u32>, data: Vec<f32>) -> Result<()> {
        let expect: usize = dims.iter().map(|&d| d as usize).product();
        if expect != data.len() {
            return Err(Error::WeightShape(format!(
                "entry {name}: dims {:?} imply {} values, got {}",
                dims,
                expect,
                data.len()
            )));
        }
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::WeightShape(format!("duplicate entry {name}")));
        }
        self.entries.push((name.to_string(), Entry { dims, data }));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    /// Fetch an entry that must exist with exactly the given dims.
    pub fn require(&self, name: &str, dims: &[u32]) -> Result<&Entry> {
        let e = self
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))?;
        if e.dims != dims {
            return Err(Error::WeightShape(format!(
                "entry {name}: expected dims {:?}, archive has {:?}",
                dims, e.dims
            )));
        }
        Ok(e)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(0u8); // dtype f32
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<WeightArchive> {
        let mut cur = Cursor { bytes, pos: 0, origin };
        let magic = cur.take(8)?;
        if magic != ARCHIVE_MAGIC {
            return Err(Error::BadMagic {
                path: origin.to_string(),
                detail: format!("expected {:?}", std::str::from_utf8(ARCHIVE_MAGIC).unwrap()),
            });
        }
        let count = cur.read_u32()?;
        let mut archive = WeightArchive::new();
        for _ in 0..count {
            let name_len = cur.read_u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Format {
                    path: origin.to_string(),
                    detail: "entry name is not UTF-8".into(),
                })?
                .to_string();
            let dtype = cur.take(1)?[0];
            if dtype != 0 {
                return Err(Error::Format {
                    path: origin.to_string(),
                    detail: format!("entry {name}: unknown dtype {dtype}"),
                });
            }
            let ndim = cur.read_u32()? as usize;
            if ndim > 8 {
                return Err(Error::Format {
                    path: origin.to_string(),
                    detail: format!("entry {name}: ndim {ndim} out of range"),
                });
            }
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(cur.read_u32()?);
            }
            let len: usize = dims.iter().map(|&d| d as usize).product();
            let payload = cur.take(len * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            archive.entries.push((name, Entry { dims, data }));
        }
        Ok(archive)
    }

    pub fn write_to(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: &std::path::Path) -> Result<WeightArchive> {
        let bytes = std::fs::read(path)?;
        WeightArchive::from_bytes(&bytes, &path.display().to_string())
    }

    /// Insert a kernel as `<name>.weight` (+ `<name>.bias` when present).
    pub fn insert_kernel(&mut self, name: &str, k: &Kernel) -> Result<()> {
        self.insert(
            &format!("{name}.weight"),
            vec![k.out_channels as u32, k.in_channels as u32, k.kh as u32, k.kw as u32],
            k.weights.clone(),
        )?;
        if let Some(b) = &k.bias {
            self.insert(&format!("{name}.bias"), vec![k.out_channels as u32], b.clone())?;
        }
        Ok(())
    }

    pub fn kernel(&self, name: &str) -> Result<Kernel> {
        let w = self
            .get(&format!("{name}.weight"))
            .ok_or_else(|| Error::MissingWeight(format!("{name}.weight")))?;
        if w.dims.len() != 4 {
            return Err(Error::WeightShape(format!("{name}.weight must be 4-d")));
        }
        let bias = self.get(&format!("{name}.bias")).map(|e| e.data.clone());
        Kernel::new(
            w.dims[0] as usize,
            w.dims[1] as usize,
            w.dims[2] as usize,
            w.dims[3] as usize,
            w.data.clone(),
            bias,
        )
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.origin.to_string(),
                detail: format!(
                    "needed {} bytes at offset {}, file has {}",
                    n,
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn read_u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Uniform kernel init scaled by fan-in, zero bias.
pub(crate) fn rand_kernel<R: Rng>(
    rng: &mut R,
    out_channels: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
) -> Kernel {
    let fan_in = (in_channels * kh * kw) as f32;
    let scale = 1.0 / fan_in.sqrt();
    let weights = (0..out_channels * in_channels * kh * kw)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Kernel {
        out_channels,
        in_channels,
        kh,
        kw,
        weights,
        bias: Some(vec![0.0; out_channels]),
    }
}

/// Uniform `rows x cols` matrix init scaled by fan-in (column count).
pub(crate) fn rand_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Vec<f32> {
    let scale = 1.0 / (cols as f32).sqrt();
    (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let mut a = WeightArchive::new();
        a.insert("conv.weight", vec![2, 3, 1, 1], vec![0.5; 6]).unwrap();
        a.insert("odd", vec![5], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.25e-30, 1e30]).unwrap();
        let bytes = a.to_bytes();
        let b = WeightArchive::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(a, b);
        assert_eq!(bytes, b.to_bytes());
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = WeightArchive::new().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            WeightArchive::from_bytes(&bytes, "mem"),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn truncation_rejected() {
        let mut a = WeightArchive::new();
        a.insert("w", vec![4], vec![1.0; 4]).unwrap();
        let bytes = a.to_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 5, 10, 3] {
            assert!(matches!(
                WeightArchive::from_bytes(&bytes[..cut], "mem"),
                Err(Error::Truncated { .. })
            ));
        }
    }

    #[test]
    fn require_checks_shape() {
        let mut a = WeightArchive::new();
        a.insert("w", vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(a.require("w", &[2, 2]).is_ok());
        assert!(matches!(a.require("w", &[4]), Err(Error::WeightShape(_))));
        assert!(matches!(a.require("missing", &[1]), Err(Error::MissingWeight(_))));
    }

    #[test]
    fn insert_rejects_length_mismatch_and_duplicates() {
        let mut a = WeightArchive::new();
        assert!(a.insert("w", vec![3], vec![0.0; 2]).is_err());
        a.insert("w", vec![2], vec![0.0; 2]).unwrap();
        assert!(a.insert("w", vec![2], vec![0.0; 2]).is_err());
    }
}
