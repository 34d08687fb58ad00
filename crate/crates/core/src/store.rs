//! Flat binary parameter files.
//!
//! Layout: magic `FDNK`, version as little-endian u32, then one record per
//! tensor until end of file. Each record is: name length (u16 LE), UTF-8
//! name, rank (u8), each dimension as u32 LE, then the payload as f64 LE in
//! row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::nn::Param;
use crate::{invalid, Error, Result};

pub const MAGIC: &[u8; 4] = b"FDNK";
pub const VERSION: u32 = 1;

pub fn save_params(path: &Path, params: &[Param]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for p in params {
        let name = p.name().as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(invalid(format!("parameter name too long: {}", p.name())));
        }
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name)?;
        let shape = p.shape();
        if shape.len() > u8::MAX as usize {
            return Err(invalid(format!("parameter rank too large: {}", p.name())));
        }
        out.write_all(&[shape.len() as u8])?;
        for &d in &shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.get().data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Raw records of a parameter file, in file order.
pub fn read_records(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(invalid(format!(
            "{}: not a parameter file (bad magic)",
            path.display()
        )));
    }
    let mut ver = [0u8; 4];
    input.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        return Err(invalid(format!("unsupported parameter file version {version}")));
    }
    let mut records = Vec::new();
    loop {
        let mut len2 = [0u8; 2];
        match input.read_exact(&mut len2) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(Error::Io(e)),
        }
        let name_len = u16::from_le_bytes(len2) as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| invalid("parameter name is not valid UTF-8"))?;
        let mut rank = [0u8; 1];
        input.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut d = [0u8; 4];
            input.read_exact(&mut d)?;
            shape.push(u32::from_le_bytes(d) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            input.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        records.push((name, shape, data));
    }
    Ok(records)
}

/// Load a parameter file into an existing parameter set. Every parameter
/// must be present with a matching shape; unknown records are rejected.
pub fn load_params(path: &Path, params: &[Param]) -> Result<()> {
    let records = read_records(path)?;
    let mut by_name: std::collections::HashMap<String, (Vec<usize>, Vec<f64>)> = records
        .into_iter()
        .map(|(name, shape, data)| (name, (shape, data)))
        .collect();
    for p in params {
        let Some((shape, data)) = by_name.remove(p.name()) else {
            return Err(invalid(format!("checkpoint is missing parameter {}", p.name())));
        };
        if shape != p.shape() {
            return Err(invalid(format!(
                "checkpoint shape {shape:?} for {} does not match expected {:?}",
                p.name(),
                p.shape()
            )));
        }
        p.set_data(data)?;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(invalid(format!("checkpoint has unknown parameter {extra}")));
    }
    Ok(())
}
