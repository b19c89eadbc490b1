//! On-disk formats: DTEN tensors, 8-bit PGM previews and parameter
//! directories.
//!
//! DTEN layout (all integers little-endian):
//!
//! ```text
//! b"DTEN" | rank: u32 | rank x extent: u32 | row-major f64 values
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DTEN";

pub fn encode_dten(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn malformed(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        format: "DTEN",
        offset,
        detail: detail.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(malformed(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode_dten(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(malformed(0, "bad magic, expected \"DTEN\""));
    }
    let rank_at = cur.pos;
    let rank = cur.u32("rank")? as usize;
    if rank == 0 {
        return Err(malformed(rank_at, "rank must be positive"));
    }
    if rank > (bytes.len() - cur.pos) / 4 {
        return Err(malformed(
            rank_at,
            format!("rank {rank} exceeds the header size"),
        ));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let at = cur.pos;
        let d = cur.u32("extent")? as usize;
        if d == 0 {
            return Err(malformed(at, "zero extent"));
        }
        count = count
            .checked_mul(d)
            .filter(|&c| c <= (bytes.len() / 8))
            .ok_or_else(|| malformed(at, "extents exceed the payload size"))?;
        shape.push(d);
    }
    let payload = cur.take(8 * count, "payload")?;
    if cur.pos != bytes.len() {
        return Err(malformed(
            cur.pos,
            format!("{} trailing bytes", bytes.len() - cur.pos),
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn read_dten(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_dten(&fs::read(path)?)
}

pub fn write_dten(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_dten(t))
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let tmp = temp_sibling(path);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Binary 8-bit PGM (P5), min-max normalized. Constant maps render black.
pub fn encode_pgm(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = t.chw()?;
    if c != 1 {
        return Err(Error::shape(
            "pgm",
            format!("expected one channel, got {c}"),
        ));
    }
    let (lo, hi) = t
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_pgm(t)?)
}

pub const MANIFEST: &str = "manifest.txt";

/// Saves named tensors as `<dir>/<name>.dten` plus a manifest with one
/// `name<TAB>d0,d1,...` line per tensor, in the given order.
pub fn save_params(dir: impl AsRef<Path>, params: &[(String, Tensor)]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (name, t) in params {
        if name.is_empty() || name.contains(['/', '\\', '\t', '\n']) {
            return Err(Error::invalid(format!("unusable parameter name {name:?}")));
        }
        write_dten(dir.join(format!("{name}.dten")), t)?;
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name}\t{}\n", dims.join(",")));
    }
    write_atomic(dir.join(MANIFEST), manifest.as_bytes())
}

pub fn load_params(dir: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let dir = dir.as_ref();
    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    let mut out = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, dims) = line.split_once('\t').ok_or_else(|| {
            Error::invalid(format!(
                "manifest line {}: expected name<TAB>shape",
                lineno + 1
            ))
        })?;
        let shape = dims
            .split(',')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::invalid(format!("manifest line {}: {e}", lineno + 1)))?;
        let t = read_dten(dir.join(format!("{name}.dten")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::shape(
                "load_params",
                format!(
                    "{name}: manifest says {shape:?}, file holds {:?}",
                    t.shape()
                ),
            ));
        }
        out.push((name.to_string(), t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn huge_rank_is_rejected_without_allocating() {
        let mut bytes = b"DTEN".to_vec();
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            decode_dten(&bytes),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    proptest! {
        #[test]
        fn dten_roundtrip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = decode_dten(&encode_dten(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn dten_layout_is_little_endian() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let b = encode_dten(&t);
        assert_eq!(&b[..4], b"DTEN");
        assert_eq!(&b[4..8], &[2, 0, 0, 0]);
        assert_eq!(&b[8..16], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[16..24], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 32);
    }

    #[test]
    fn dten_rejects_malformed_input() {
        let good = encode_dten(&Tensor::zeros(&[2, 2]));
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(
            decode_dten(&trailing),
            Err(Error::Format { offset: 48, .. })
        ));
        assert!(matches!(
            decode_dten(&good[..40]),
            Err(Error::Format { .. })
        ));
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(
            decode_dten(&magic),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut huge = good;
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_dten(&huge).is_err());
    }

    #[test]
    fn pgm_is_min_max_normalized() {
        let t = Tensor::new(vec![1, 3], vec![2.0, 3.0, 4.0]).unwrap();
        let b = encode_pgm(&t).unwrap();
        assert!(b.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&b[b.len() - 3..], &[0, 128, 255]);
        let flat = encode_pgm(&Tensor::full(&[2, 2], 7.0)).unwrap();
        assert_eq!(&flat[flat.len() - 4..], &[0; 4]);
    }

    #[test]
    fn params_roundtrip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let params = vec![
            (
                "fc1.w".to_string(),
                Tensor::from_fn(&[2, 3], |i| i[0] as f64 - i[1] as f64),
            ),
            ("fc1.b".to_string(), Tensor::from_vec(vec![0.5, -0.5])),
        ];
        save_params(dir.path(), &params).unwrap();
        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(manifest, "fc1.w\t2,3\nfc1.b\t2\n");
        assert_eq!(load_params(dir.path()).unwrap(), params);
    }
}
