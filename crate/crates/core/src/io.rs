//! The `.mvol` binary volume format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MVOL"
//! 4       4     version u32 = 1
//! 8       1     dtype u8: 0 = f32 intensity, 1 = u8 label
//! 9       12    D, H, W as u32
//! 21      24    spacing (sz, sy, sx) as f64
//! 45      ...   voxel payload, z-major (D slowest)
//! ```
//!
//! Round-trips are bit-exact for every field and voxel.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Volume};

pub const MVOL_MAGIC: [u8; 4] = *b"MVOL";
pub const MVOL_VERSION: u32 = 1;
pub const MVOL_HEADER_LEN: usize = 45;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// A decoded `.mvol` file.
#[derive(Clone, Debug, PartialEq)]
pub enum MvolFile {
    Intensity(Volume),
    Labels(LabelMap),
}

fn encode_header(dtype: u8, shape: [usize; 3], spacing: [f64; 3]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(MVOL_HEADER_LEN);
    buf.extend_from_slice(&MVOL_MAGIC);
    buf.extend_from_slice(&MVOL_VERSION.to_le_bytes());
    buf.push(dtype);
    for &dim in &shape {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &s in &spacing {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf
}

/// Write either kind of grid.
pub fn write_mvol(path: &Path, file: &MvolFile) -> Result<()> {
    match file {
        MvolFile::Intensity(v) => write_volume(path, v),
        MvolFile::Labels(l) => write_labelmap(path, l),
    }
}

/// Write a volume as dtype-0 `.mvol`.
pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    let mut buf = encode_header(DTYPE_F32, vol.shape(), vol.spacing_mm());
    buf.reserve(vol.num_voxels() * 4);
    for &v in vol.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Write a label map as dtype-1 `.mvol`.
pub fn write_labelmap(path: &Path, lab: &LabelMap) -> Result<()> {
    let mut buf = encode_header(DTYPE_U8, lab.shape(), lab.spacing_mm());
    buf.extend_from_slice(lab.data());
    fs::write(path, buf)?;
    Ok(())
}

/// Raw header fields plus payload bytes, before semantic validation.
struct RawMvol {
    dtype: u8,
    shape: [usize; 3],
    spacing: [f64; 3],
    payload: Vec<u8>,
}

fn read_raw(path: &Path) -> Result<RawMvol> {
    let bytes = fs::read(path)?;
    if bytes.len() < MVOL_HEADER_LEN {
        return Err(Error::Corrupt(format!(
            "{}: file shorter than the {MVOL_HEADER_LEN}-byte header",
            path.display()
        )));
    }
    if bytes[0..4] != MVOL_MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MVOL_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let dtype = bytes[8];
    if dtype != DTYPE_F32 && dtype != DTYPE_U8 {
        return Err(Error::Validation(format!(
            "{}: unknown dtype {dtype}",
            path.display()
        )));
    }
    let mut shape = [0usize; 3];
    for (i, dim) in shape.iter_mut().enumerate() {
        let off = 9 + 4 * i;
        *dim = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let mut spacing = [0f64; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let off = 21 + 8 * i;
        *s = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    }
    let n = shape[0]
        .checked_mul(shape[1])
        .and_then(|v| v.checked_mul(shape[2]))
        .ok_or_else(|| Error::Corrupt(format!("{}: shape overflow", path.display())))?;
    let elem = if dtype == DTYPE_F32 { 4 } else { 1 };
    let expected = MVOL_HEADER_LEN + n * elem;
    if bytes.len() < expected {
        return Err(Error::Corrupt(format!(
            "{}: truncated payload ({} bytes, expected {expected})",
            path.display(),
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Corrupt(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            bytes.len() - expected
        )));
    }
    Ok(RawMvol {
        dtype,
        shape,
        spacing,
        payload: bytes[MVOL_HEADER_LEN..].to_vec(),
    })
}

/// Read any `.mvol` file, validating label payloads against the class range.
pub fn read_mvol(path: &Path) -> Result<MvolFile> {
    let raw = read_raw(path)?;
    match raw.dtype {
        DTYPE_F32 => {
            let data: Vec<f32> = raw
                .payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(MvolFile::Intensity(Volume::new(raw.shape, raw.spacing, data)?))
        }
        DTYPE_U8 => Ok(MvolFile::Labels(LabelMap::new(
            raw.shape,
            raw.spacing,
            raw.payload,
        )?)),
        _ => unreachable!(),
    }
}

/// Read a dtype-0 `.mvol` as a [`Volume`].
pub fn read_volume(path: &Path) -> Result<Volume> {
    match read_mvol(path)? {
        MvolFile::Intensity(v) => Ok(v),
        MvolFile::Labels(_) => Err(Error::Validation(format!(
            "{}: expected an intensity volume, found a label map",
            path.display()
        ))),
    }
}

/// Read a dtype-1 `.mvol` as a [`LabelMap`].
pub fn read_labelmap(path: &Path) -> Result<LabelMap> {
    match read_mvol(path)? {
        MvolFile::Labels(l) => Ok(l),
        MvolFile::Intensity(_) => Err(Error::Validation(format!(
            "{}: expected a label map, found an intensity volume",
            path.display()
        ))),
    }
}

/// Write a plain u8 grid as dtype-1 `.mvol` without the label-range check.
/// Used for MC-dropout agreement grids, whose counts run up to the sample
/// count T.
pub fn write_u8_grid(path: &Path, data: &[u8], shape: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    if data.len() != shape[0] * shape[1] * shape[2] {
        return Err(Error::Validation(format!(
            "grid length {} does not match shape {shape:?}",
            data.len()
        )));
    }
    let mut buf = encode_header(DTYPE_U8, shape, spacing);
    buf.extend_from_slice(data);
    fs::write(path, buf)?;
    Ok(())
}

/// Read a dtype-1 `.mvol` whose payload is a plain u8 grid, skipping the
/// `0..NUM_CLASSES` label check. Used for MC-dropout agreement grids, whose
/// counts run up to the sample count T.
pub fn read_agreement_grid(path: &Path) -> Result<(Vec<u8>, [usize; 3], [f64; 3])> {
    let raw = read_raw(path)?;
    if raw.dtype != DTYPE_U8 {
        return Err(Error::Validation(format!(
            "{}: expected a u8 grid, found dtype {}",
            path.display(),
            raw.dtype
        )));
    }
    Ok((raw.payload, raw.shape, raw.spacing))
}
