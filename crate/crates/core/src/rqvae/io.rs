//! Item-embedding files.
//!
//! Binary: four little-endian `u32` (magic, version, row count, dimension)
//! followed by the rows as little-endian `f32`. Text: one row per line,
//! values separated by whitespace. Row `i` belongs to item `i + 1`.

use std::path::Path;

use crate::error::{Error, Result};

pub const EMB_MAGIC: u32 = u32::from_le_bytes(*b"LEMB");
pub const EMB_VERSION: u32 = 1;

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes(b[4 * i..4 * i + 4].try_into().expect("4 bytes"))
}

pub fn read_embeddings_binary(bytes: &[u8], path: &Path) -> Result<Vec<Vec<f64>>> {
    let fmt = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 {
        return Err(fmt("truncated header".into()));
    }
    if u32_at(bytes, 0) != EMB_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let version = u32_at(bytes, 1);
    if version != EMB_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let (n, d) = (u32_at(bytes, 2) as usize, u32_at(bytes, 3) as usize);
    let body = &bytes[16..];
    if body.len() != 4 * n * d {
        return Err(fmt(format!("expected {} data bytes, found {}", 4 * n * d, body.len())));
    }
    let vals: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
        return Err(fmt(format!("non-finite value in row {}", i / d.max(1))));
    }
    Ok(vals.chunks(d.max(1)).take(n).map(|c| c.to_vec()).collect())
}

pub fn read_embeddings_text(text: &str, path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| err(format!("{t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(err(format!("{} values, expected {}", row.len(), first.len())));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Reads either format, telling them apart by the magic number.
pub fn read_embeddings(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= 4 && u32_at(&bytes, 0) == EMB_MAGIC {
        return read_embeddings_binary(&bytes, path);
    }
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Format(format!("{}: neither binary embeddings nor UTF-8 text", path.display())))?;
    read_embeddings_text(&text, path)
}

pub fn write_embeddings_binary(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("ragged embedding rows"));
    }
    let mut out = Vec::with_capacity(16 + 4 * rows.len() * d);
    for h in [EMB_MAGIC, EMB_VERSION, rows.len() as u32, d as u32] {
        out.extend_from_slice(&h.to_le_bytes());
    }
    for r in rows {
        for &v in r {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_and_text_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![vec![0.5, -1.25, 2.0], vec![3.0, 0.0, -0.125]];
        let bin = dir.path().join("e.bin");
        write_embeddings_binary(&bin, &rows).unwrap();
        assert_eq!(read_embeddings(&bin).unwrap(), rows);
        let txt = dir.path().join("e.txt");
        std::fs::write(&txt, "0.5 -1.25 2\n\n3 0 -0.125\n").unwrap();
        assert_eq!(read_embeddings(&txt).unwrap(), rows);
    }

    #[test]
    fn malformed_files() {
        let p = Path::new("x");
        assert!(read_embeddings_text("1 2\n3\n", p).is_err());
        assert!(read_embeddings_text("1 nan\n", p).is_err());
        let mut b = Vec::new();
        for h in [EMB_MAGIC, EMB_VERSION, 2, 2] {
            b.extend_from_slice(&h.to_le_bytes());
        }
        b.extend_from_slice(&[0u8; 12]);
        assert!(read_embeddings_binary(&b, p).is_err());
        b.extend_from_slice(&[0u8; 4]);
        assert_eq!(read_embeddings_binary(&b, p).unwrap(), vec![vec![0.0; 2]; 2]);
        b[4] = 9;
        assert!(read_embeddings_binary(&b, p).is_err());
    }
}
