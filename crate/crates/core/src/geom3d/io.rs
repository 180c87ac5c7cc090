//! `VOL1` volume files and JSON transform files.
//!
//! `VOL1` layout (all little-endian): the 4 magic bytes `VOL1`, three `u32`
//! dims (nx, ny, nz), three `f32` spacings, then nx·ny·nz `f32` voxels with x
//! varying fastest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{GeomError, RigidTransform, TransformFile, Volume3};

pub const VOL1_MAGIC: &[u8; 4] = b"VOL1";

pub fn write_vol1<W: Write>(vol: &Volume3, mut w: W) -> std::io::Result<()> {
    w.write_all(VOL1_MAGIC)?;
    for d in vol.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for s in vol.spacing() {
        w.write_all(&s.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(vol.len() * 4);
    for v in vol.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_vol1<R: Read>(mut r: R) -> Result<Volume3, GeomError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != VOL1_MAGIC {
        return Err(GeomError::BadMagic(magic));
    }
    let mut word = [0u8; 4];
    let mut dims = [0usize; 3];
    for d in &mut dims {
        r.read_exact(&mut word)?;
        *d = u32::from_le_bytes(word) as usize;
    }
    let mut spacing = [0f32; 3];
    for s in &mut spacing {
        r.read_exact(&mut word)?;
        *s = f32::from_le_bytes(word);
    }
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or(GeomError::EmptyDims(dims))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume3::new(dims, spacing, data)
}

pub fn save_volume(vol: &Volume3, path: impl AsRef<Path>) -> Result<(), GeomError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_vol1(vol, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3, GeomError> {
    read_vol1(BufReader::new(File::open(path)?))
}

pub fn save_transform(t: &RigidTransform, path: impl AsRef<Path>) -> Result<(), GeomError> {
    let json = serde_json::to_string_pretty(&t.to_file())?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_transform(path: impl AsRef<Path>) -> Result<RigidTransform, GeomError> {
    let f: TransformFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    RigidTransform::from_file(&f)
}
