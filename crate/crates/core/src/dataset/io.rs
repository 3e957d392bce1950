//! Point ingestion: CSV rows and a little-endian binary `[n:u64][d:u64][n·d f64]` layout.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Parses one point per row. A first line that does not parse as numbers is
/// treated as a header and skipped. Blank lines and `#` comments are ignored.
pub fn parse_csv<R: BufRead>(reader: R) -> Result<(Vec<f64>, usize)> {
    let mut data = Vec::new();
    let mut dim = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            trimmed.split(',').map(|f| f.trim().parse::<f64>()).collect();
        let row = match parsed {
            Ok(row) => row,
            Err(_) if dim.is_none() && data.is_empty() => continue,
            Err(e) => return Err(Error::Parse(format!("line {}: {e}", lineno + 1))),
        };
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("line {}: non-finite value", lineno + 1)));
        }
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::Parse(format!(
                    "line {}: expected {d} columns, found {}",
                    lineno + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        data.extend(row);
    }
    match dim {
        Some(d) => Ok((data, d)),
        None => Err(Error::Parse("no data rows".into())),
    }
}

pub fn read_csv(path: &Path) -> Result<(Vec<f64>, usize)> {
    parse_csv(BufReader::new(File::open(path)?))
}

pub fn write_csv(path: &Path, data: &[f64], dim: usize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in data.chunks(dim) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn decode_binary(bytes: &[u8]) -> Result<(Vec<f64>, usize)> {
    if bytes.len() < 16 {
        return Err(Error::Parse("binary header truncated".into()));
    }
    let n = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add(16))
        .ok_or_else(|| Error::Parse("binary header overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Parse(format!(
            "binary payload is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    if d == 0 {
        return Err(Error::Parse("dimension must be positive".into()));
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((data, d))
}

pub fn encode_binary(data: &[f64], dim: usize) -> Vec<u8> {
    let n = data.len() / dim;
    let mut out = Vec::with_capacity(16 + data.len() * 8);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_binary(path: &Path) -> Result<(Vec<f64>, usize)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_binary(&bytes)
}

pub fn write_binary(path: &Path, data: &[f64], dim: usize) -> Result<()> {
    std::fs::write(path, encode_binary(data, dim))?;
    Ok(())
}
