//! Flat field dumps: little-endian f64, row-major, with a JSON sidecar.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, GridDomain, Symmetry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
    pub origin: [f64; 2],
    pub symmetry: Symmetry,
    pub epsilon: Option<f64>,
    pub population: Option<usize>,
    pub iteration: Option<usize>,
    pub name: String,
}

impl DumpHeader {
    pub fn for_grid(gd: &GridDomain, name: &str) -> DumpHeader {
        DumpHeader {
            nx: gd.nx,
            ny: gd.ny,
            h: gd.h,
            origin: gd.origin,
            symmetry: gd.symmetry,
            epsilon: None,
            population: None,
            iteration: None,
            name: name.to_string(),
        }
    }
}

fn sidecar(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes `<path>` (binary) and `<path>.json` with the extension replaced.
pub fn write_field(path: &Path, field: &Field, header: &DumpHeader) -> Result<()> {
    if field.dim() != (header.ny, header.nx) {
        return Err(Error::InvalidInput("field shape does not match the header".into()));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for &v in field.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    let json = serde_json::to_string_pretty(header).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(sidecar(path), json + "\n")?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<(Field, DumpHeader)> {
    let text = std::fs::read_to_string(sidecar(path))?;
    let header: DumpHeader = serde_json::from_str(&text).map_err(|e| Error::Io(e.to_string()))?;
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * header.nx * header.ny {
        return Err(Error::Io(format!("{}: expected {} values", path.display(), header.nx * header.ny)));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let field = Field::from_shape_vec((header.ny, header.nx), data).map_err(|e| Error::Io(e.to_string()))?;
    Ok((field, header))
}
