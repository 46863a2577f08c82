//! Binary persistence for models and feature caches.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic: 4 bytes            GMBK backbone / GMND discriminator / GMFC cache
//! version: u32 = 1
//! tensor count: u32
//! per tensor, in lexicographic name order:
//!   u16 name length, UTF-8 name
//!   u8 ndim, u32 dims...
//!   f64 values, row-major
//! sidecar: u32 byte length, bytes
//! ```
//!
//! The backbone sidecar is the newline-delimited vocabulary. The
//! discriminator sidecar is a length-prefixed attribute name followed by the
//! 64-bit FNV-1a hash of the backbone checkpoint it was trained against,
//! verified at load time. The feature-cache sidecar is the backbone hash
//! followed by the corpus hash.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::backbone::{Backbone, Vocabulary};
use crate::disc::DiscriminatorParams;
use crate::error::{Error, Result};
use crate::gated::GatedCell;
use crate::numerics::Matrix;

pub const MAGIC_BACKBONE: &[u8; 4] = b"GMBK";
pub const MAGIC_DISCRIMINATOR: &[u8; 4] = b"GMND";
pub const MAGIC_FEATURE_CACHE: &[u8; 4] = b"GMFC";
pub const FORMAT_VERSION: u32 = 1;

/// 64-bit FNV-1a over a byte stream; the crate's content hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug)]
pub struct OwnedTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl OwnedTensor {
    pub fn from_matrix(m: &Matrix) -> Self {
        OwnedTensor {
            dims: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn from_vec(v: &[f64]) -> Self {
        OwnedTensor {
            dims: vec![v.len()],
            data: v.to_vec(),
        }
    }

    pub fn into_matrix(self, what: &str) -> Result<Matrix> {
        if self.dims.len() != 2 {
            return Err(Error::BadCheckpoint(format!("{what}: expected 2-d tensor")));
        }
        Ok(Matrix::from_vec(self.dims[0], self.dims[1], self.data))
    }

    pub fn into_vector(self, what: &str) -> Result<Vec<f64>> {
        if self.dims.len() != 1 {
            return Err(Error::BadCheckpoint(format!("{what}: expected 1-d tensor")));
        }
        Ok(self.data)
    }
}

pub fn write_container<W: Write>(
    w: &mut W,
    magic: &[u8; 4],
    tensors: &BTreeMap<String, OwnedTensor>,
    sidecar: &[u8],
) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.dims.len() as u8])?;
        for &d in &t.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&(sidecar.len() as u32).to_le_bytes())?;
    w.write_all(sidecar)?;
    Ok(())
}

fn read_exact_checked<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::BadCheckpoint(format!("truncated while reading {what}")))
}

pub fn read_container<R: Read>(
    r: &mut R,
    expect_magic: &[u8; 4],
) -> Result<(BTreeMap<String, OwnedTensor>, Vec<u8>)> {
    let mut magic = [0u8; 4];
    read_exact_checked(r, &mut magic, "magic")?;
    if &magic != expect_magic {
        return Err(Error::BadCheckpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(expect_magic)
        )));
    }
    let mut u32buf = [0u8; 4];
    read_exact_checked(r, &mut u32buf, "version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(Error::BadCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    read_exact_checked(r, &mut u32buf, "tensor count")?;
    let count = u32::from_le_bytes(u32buf) as usize;

    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        read_exact_checked(r, &mut u16buf, "name length")?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact_checked(r, &mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::BadCheckpoint("tensor name is not UTF-8".into()))?;
        let mut ndim = [0u8; 1];
        read_exact_checked(r, &mut ndim, "ndim")?;
        let mut dims = Vec::with_capacity(ndim[0] as usize);
        let mut numel = 1usize;
        for _ in 0..ndim[0] {
            read_exact_checked(r, &mut u32buf, "dim")?;
            let d = u32::from_le_bytes(u32buf) as usize;
            dims.push(d);
            numel = numel.saturating_mul(d);
        }
        let mut data = Vec::with_capacity(numel);
        let mut f64buf = [0u8; 8];
        for _ in 0..numel {
            read_exact_checked(r, &mut f64buf, "tensor values")?;
            data.push(f64::from_le_bytes(f64buf));
        }
        if tensors.insert(name.clone(), OwnedTensor { dims, data }).is_some() {
            return Err(Error::BadCheckpoint(format!("duplicate tensor {name:?}")));
        }
    }

    read_exact_checked(r, &mut u32buf, "sidecar length")?;
    let side_len = u32::from_le_bytes(u32buf) as usize;
    let mut sidecar = vec![0u8; side_len];
    read_exact_checked(r, &mut sidecar, "sidecar")?;
    Ok((tensors, sidecar))
}

fn take(map: &mut BTreeMap<String, OwnedTensor>, name: &str) -> Result<OwnedTensor> {
    map.remove(name)
        .ok_or_else(|| Error::BadCheckpoint(format!("missing tensor {name:?}")))
}

fn cell_tensors(prefix: &str, cell: &GatedCell, out: &mut BTreeMap<String, OwnedTensor>) {
    out.insert(format!("{prefix}w_g"), OwnedTensor::from_matrix(&cell.w_g));
    out.insert(format!("{prefix}b_g"), OwnedTensor::from_vec(&cell.b_g));
    out.insert(format!("{prefix}w1r"), OwnedTensor::from_matrix(&cell.w1r));
    out.insert(format!("{prefix}w2r"), OwnedTensor::from_matrix(&cell.w2r));
    out.insert(format!("{prefix}b_r"), OwnedTensor::from_vec(&cell.b_r));
    out.insert(format!("{prefix}w1z"), OwnedTensor::from_matrix(&cell.w1z));
    out.insert(format!("{prefix}w2z"), OwnedTensor::from_matrix(&cell.w2z));
    out.insert(format!("{prefix}b_z"), OwnedTensor::from_vec(&cell.b_z));
    out.insert(format!("{prefix}w1n"), OwnedTensor::from_matrix(&cell.w1n));
    out.insert(format!("{prefix}w2n"), OwnedTensor::from_matrix(&cell.w2n));
    out.insert(format!("{prefix}b_1n"), OwnedTensor::from_vec(&cell.b_1n));
    out.insert(format!("{prefix}b_2n"), OwnedTensor::from_vec(&cell.b_2n));
}

fn cell_from_tensors(prefix: &str, map: &mut BTreeMap<String, OwnedTensor>) -> Result<GatedCell> {
    let w_g = take(map, &format!("{prefix}w_g"))?.into_matrix("w_g")?;
    let b_g = take(map, &format!("{prefix}b_g"))?.into_vector("b_g")?;
    let w1r = take(map, &format!("{prefix}w1r"))?.into_matrix("w1r")?;
    let w2r = take(map, &format!("{prefix}w2r"))?.into_matrix("w2r")?;
    let b_r = take(map, &format!("{prefix}b_r"))?.into_vector("b_r")?;
    let w1z = take(map, &format!("{prefix}w1z"))?.into_matrix("w1z")?;
    let w2z = take(map, &format!("{prefix}w2z"))?.into_matrix("w2z")?;
    let b_z = take(map, &format!("{prefix}b_z"))?.into_vector("b_z")?;
    let w1n = take(map, &format!("{prefix}w1n"))?.into_matrix("w1n")?;
    let w2n = take(map, &format!("{prefix}w2n"))?.into_matrix("w2n")?;
    let b_1n = take(map, &format!("{prefix}b_1n"))?.into_vector("b_1n")?;
    let b_2n = take(map, &format!("{prefix}b_2n"))?.into_vector("b_2n")?;

    let d_h = w_g.rows();
    let d_e = w1r.cols();
    let dims_ok = w_g.cols() == d_h
        && b_g.len() == d_h
        && [&w1r, &w1z, &w1n].iter().all(|m| m.rows() == d_h && m.cols() == d_e)
        && [&w2r, &w2z, &w2n].iter().all(|m| m.rows() == d_h && m.cols() == d_h)
        && [&b_r, &b_z, &b_1n, &b_2n].iter().all(|v| v.len() == d_h);
    if !dims_ok {
        return Err(Error::BadCheckpoint(
            "gated cell tensor dims are inconsistent".into(),
        ));
    }
    Ok(GatedCell {
        w_g,
        b_g,
        w1r,
        w2r,
        b_r,
        w1z,
        w2z,
        b_z,
        w1n,
        w2n,
        b_1n,
        b_2n,
    })
}

/// Serialize a backbone to its checkpoint bytes. Hashing these bytes gives
/// the backbone content hash recorded by dependent artifacts.
pub fn backbone_to_bytes(model: &Backbone) -> Vec<u8> {
    let mut tensors = BTreeMap::new();
    tensors.insert("emb".to_string(), OwnedTensor::from_matrix(model.embedding_table()));
    cell_tensors("cell.", model.cell(), &mut tensors);
    let (w_out, b_out) = model.output_head();
    tensors.insert("out.w".to_string(), OwnedTensor::from_matrix(w_out));
    tensors.insert("out.b".to_string(), OwnedTensor::from_vec(b_out));
    let sidecar = model.vocab().tokens().join("\n");
    let mut buf = Vec::new();
    write_container(&mut buf, MAGIC_BACKBONE, &tensors, sidecar.as_bytes())
        .expect("writing to Vec cannot fail");
    buf
}

pub fn backbone_hash(model: &Backbone) -> u64 {
    fnv1a64(&backbone_to_bytes(model))
}

pub fn save_backbone(path: &Path, model: &Backbone) -> Result<()> {
    fs::write(path, backbone_to_bytes(model))?;
    Ok(())
}

pub fn backbone_from_bytes(bytes: &[u8]) -> Result<Backbone> {
    let mut cursor = bytes;
    let (mut tensors, sidecar) = read_container(&mut cursor, MAGIC_BACKBONE)?;
    let emb = take(&mut tensors, "emb")?.into_matrix("emb")?;
    let cell = cell_from_tensors("cell.", &mut tensors)?;
    let w_out = take(&mut tensors, "out.w")?.into_matrix("out.w")?;
    let b_out = take(&mut tensors, "out.b")?.into_vector("out.b")?;
    if let Some(name) = tensors.keys().next() {
        return Err(Error::BadCheckpoint(format!("unexpected tensor {name:?}")));
    }
    let text = String::from_utf8(sidecar)
        .map_err(|_| Error::BadCheckpoint("vocabulary sidecar is not UTF-8".into()))?;
    let vocab = Vocabulary::new(text.lines().map(str::to_string).collect())?;
    if emb.cols() != cell.d_e() {
        return Err(Error::BadCheckpoint(format!(
            "embedding width {} does not match cell d_e {}",
            emb.cols(),
            cell.d_e()
        )));
    }
    Backbone::new(vocab, emb, cell, w_out, b_out)
}

pub fn load_backbone(path: &Path) -> Result<Backbone> {
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    backbone_from_bytes(&fs::read(path)?)
}

/// Hash of a backbone checkpoint file on disk.
pub fn backbone_file_hash(path: &Path) -> Result<u64> {
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    Ok(fnv1a64(&fs::read(path)?))
}

pub fn discriminator_to_bytes(params: &DiscriminatorParams, backbone_hash: u64) -> Vec<u8> {
    let mut tensors = BTreeMap::new();
    cell_tensors("", &params.cell, &mut tensors);
    tensors.insert("w_0".to_string(), OwnedTensor::from_vec(&params.w_0));
    let mut sidecar = Vec::new();
    let name = params.attribute.as_bytes();
    sidecar.extend_from_slice(&(name.len() as u32).to_le_bytes());
    sidecar.extend_from_slice(name);
    sidecar.extend_from_slice(&backbone_hash.to_le_bytes());
    let mut buf = Vec::new();
    write_container(&mut buf, MAGIC_DISCRIMINATOR, &tensors, &sidecar)
        .expect("writing to Vec cannot fail");
    buf
}

pub fn save_discriminator(path: &Path, params: &DiscriminatorParams, backbone_hash: u64) -> Result<()> {
    fs::write(path, discriminator_to_bytes(params, backbone_hash))?;
    Ok(())
}

/// Returns the parameters and the recorded backbone content hash.
pub fn load_discriminator(path: &Path) -> Result<(DiscriminatorParams, u64)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    let bytes = fs::read(path)?;
    let mut cursor = &bytes[..];
    let (mut tensors, sidecar) = read_container(&mut cursor, MAGIC_DISCRIMINATOR)?;
    let cell = cell_from_tensors("", &mut tensors)?;
    let w_0 = take(&mut tensors, "w_0")?.into_vector("w_0")?;
    if let Some(name) = tensors.keys().next() {
        return Err(Error::BadCheckpoint(format!("unexpected tensor {name:?}")));
    }
    if w_0.len() != cell.d_h() {
        return Err(Error::BadCheckpoint(
            "w_0 length does not match cell d_h".into(),
        ));
    }
    if sidecar.len() < 12 {
        return Err(Error::BadCheckpoint("discriminator sidecar truncated".into()));
    }
    let name_len = u32::from_le_bytes(sidecar[0..4].try_into().unwrap()) as usize;
    if sidecar.len() != 4 + name_len + 8 {
        return Err(Error::BadCheckpoint("discriminator sidecar malformed".into()));
    }
    let attribute = String::from_utf8(sidecar[4..4 + name_len].to_vec())
        .map_err(|_| Error::BadCheckpoint("attribute name is not UTF-8".into()))?;
    let hash = u64::from_le_bytes(sidecar[4 + name_len..].try_into().unwrap());
    Ok((
        DiscriminatorParams {
            attribute,
            cell,
            w_0,
        },
        hash,
    ))
}
