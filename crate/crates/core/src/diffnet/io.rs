//! Weight persistence: a one-line text header naming the architecture,
//! followed by the raw little-endian `f64` values.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{NetSpec, NetworkWeights};
use crate::binfmt;
use crate::error::{Error, Result};

const MAGIC: &str = "SBILMC-WEIGHTS 1";

pub fn write_weights<W: Write>(mut out: W, spec: &NetSpec, w: &NetworkWeights) -> Result<()> {
    w.check(spec)?;
    writeln!(out, "{MAGIC} {}", serde_json::to_string(spec)?)?;
    binfmt::write_f64s(&mut out, w.as_slice())?;
    Ok(())
}

pub fn read_weights<R: Read>(input: R) -> Result<(NetSpec, NetworkWeights)> {
    let mut reader = BufReader::new(input);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let json = header
        .trim_end()
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Input("not a weights file".into()))?
        .trim();
    let spec: NetSpec = serde_json::from_str(json)?;
    spec.validate()?;
    let values = binfmt::read_f64s(&mut reader)?;
    let w = NetworkWeights(values);
    w.check(&spec)?;
    Ok((spec, w))
}

pub fn save_weights(path: &Path, spec: &NetSpec, w: &NetworkWeights) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    write_weights(&mut out, spec, w)?;
    out.flush()?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(NetSpec, NetworkWeights)> {
    read_weights(std::fs::File::open(path)?)
}

/// `index,value` rows for inspection.
pub fn weights_to_csv(w: &NetworkWeights) -> String {
    let mut s = String::from("index,value\n");
    for (i, v) in w.as_slice().iter().enumerate() {
        s.push_str(&format!("{i},{v}\n"));
    }
    s
}
