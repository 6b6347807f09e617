//! Region-record manifests as JSON lines.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use promptclip_core::datagen::RegionRecord;

use crate::error::{io_at, Error, Result};

/// Write one record per line. The output is byte-stable for equal input.
pub fn write_manifest(records: &[RegionRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_at(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(w, "{line}").map_err(io_at(path))?;
    }
    w.flush().map_err(io_at(path))
}

/// Read and validate every record. Blank lines are ignored; errors carry
/// the 1-based line number.
pub fn read_manifest(path: &Path) -> Result<Vec<RegionRecord>> {
    let file = std::fs::File::open(path).map_err(io_at(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_at(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let rec: RegionRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        rec.validate().map_err(|e| parse(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}
