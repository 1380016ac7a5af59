//! The HGFD binary field format.
//!
//! Layout: magic `HGFD`, version (u32 LE), dimension d (u32 LE), d grid sizes
//! (u32 LE), then the payload as f64 LE in row-major cell order with the
//! components of tensor fields stored contiguously per cell. The component
//! count is implied by the payload length.

use crate::error::{Error, Result};
use crate::grid::{Field, TorusGrid};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"HGFD";
const VERSION: u32 = 1;

pub fn write<W: Write>(mut w: W, field: &Field) -> Result<()> {
    let grid = field.grid();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(grid.dim() as u32).to_le_bytes())?;
    for _ in 0..grid.dim() {
        w.write_all(&(grid.n() as u32).to_le_bytes())?;
    }
    let vol = grid.vol();
    let comps = field.comps();
    for idx in 0..vol {
        for c in 0..comps {
            w.write_all(&field.at(c, idx).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a field; `extent` is not stored in the format and must be supplied.
pub fn read<R: Read>(mut r: R, extent: f64) -> Result<Field> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic; not an HGFD file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported HGFD version {version}")));
    }
    let dim = read_u32(&mut r)? as usize;
    if dim == 0 || dim > 8 {
        return Err(Error::Format(format!("implausible dimension {dim}")));
    }
    let mut sizes = Vec::with_capacity(dim);
    for _ in 0..dim {
        sizes.push(read_u32(&mut r)? as usize);
    }
    if sizes.iter().any(|&s| s != sizes[0]) {
        return Err(Error::Format("only cubic grids are supported".into()));
    }
    let grid = TorusGrid::new(dim, extent, sizes[0])?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(Error::Format("payload is not a whole number of f64".into()));
    }
    let count = payload.len() / 8;
    let vol = grid.vol();
    if count % vol != 0 {
        return Err(Error::Format(format!(
            "payload of {count} values does not divide {vol} cells"
        )));
    }
    let comps = count / vol;
    let mut field = Field::zeros(grid, comps);
    for (i, chunk) in payload.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        let idx = i / comps;
        let c = i % comps;
        field.set(c, idx, v);
    }
    Ok(field)
}

pub fn write_file(path: &Path, field: &Field) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write(std::io::BufWriter::new(f), field)
}

pub fn read_file(path: &Path, extent: f64) -> Result<Field> {
    let f = std::fs::File::open(path)?;
    read(std::io::BufReader::new(f), extent)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
