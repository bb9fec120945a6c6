//! Shared binary blob format: a text header line followed by little-endian
//! `f64` payload.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};

const MAGIC: &str = "SBILMC-MATRIX 1";

pub fn write_f64s<W: Write>(out: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_f64s<R: Read>(input: &mut R) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Input("binary payload is not a whole number of f64 values".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Write `values` with a JSON metadata header.
pub fn save<M: Serialize>(path: &Path, meta: &M, values: &[f64]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "{MAGIC} {}", serde_json::to_string(meta)?)?;
    write_f64s(&mut out, values)?;
    out.flush()?;
    Ok(())
}

pub fn load<M: DeserializeOwned>(path: &Path) -> Result<(M, Vec<f64>)> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let json = header
        .trim_end()
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Input(format!("{} is not a matrix blob", path.display())))?
        .trim();
    let meta = serde_json::from_str(json)?;
    let values = read_f64s(&mut reader)?;
    Ok((meta, values))
}
