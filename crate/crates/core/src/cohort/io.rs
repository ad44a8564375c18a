//! DGV1 volume files, the cohort manifest, and graymap previews.
//!
//! DGV1 layout: the ASCII magic `DGV1`, three little-endian `u32` dims
//! (slices, height, width), then row-major little-endian `f32` voxels.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Domain, Volume, VolumeRecord};

const MAGIC: &[u8; 4] = b"DGV1";
const HEADER_LEN: usize = 16;
/// Refuse to allocate volumes beyond this many voxels.
const MAX_VOXELS: u64 = 1 << 31;

#[derive(Debug, Error)]
pub enum VolumeIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}: not a DGV1 volume (bad magic or short header)")]
    BadMagic(PathBuf),
    #[error("{path}: declared dims {dims:?} overflow the voxel limit")]
    DimensionOverflow { path: PathBuf, dims: [u32; 3] },
    #[error("{path}: payload holds {actual} bytes, dims require {expected}")]
    Truncated { path: PathBuf, expected: u64, actual: u64 },
    #[error("manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeIoError + '_ {
    move |source| VolumeIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_volume(volume: &Volume) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * volume.data().len());
    buf.extend_from_slice(MAGIC);
    for d in volume.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in volume.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Volume, VolumeIoError> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(VolumeIoError::BadMagic(path.to_path_buf()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let dims = [dim(0), dim(1), dim(2)];
    let voxels = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
    let voxels = match voxels {
        Some(v) if v <= MAX_VOXELS && v > 0 => v,
        _ => {
            return Err(VolumeIoError::DimensionOverflow {
                path: path.to_path_buf(),
                dims,
            })
        }
    };
    let payload = (bytes.len() - HEADER_LEN) as u64;
    if payload != 4 * voxels {
        return Err(VolumeIoError::Truncated {
            path: path.to_path_buf(),
            expected: 4 * voxels,
            actual: payload,
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Volume::new(dims.map(|d| d as usize), data).expect("checked size"))
}

pub fn save_volume(volume: &Volume, path: &Path) -> Result<(), VolumeIoError> {
    fs::write(path, encode_volume(volume)).map_err(io_err(path))
}

pub fn load_volume(path: &Path) -> Result<Volume, VolumeIoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_volume(&bytes, path)
}

/// One line of `manifest.csv`; `path` is relative to the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject_id: u32,
    pub pair_id: u32,
    pub domain: Domain,
    pub label: u8,
    pub path: String,
}

/// Writes every record as `volumes/s<subject>_<domain>.dgv` under `dir`
/// plus `dir/manifest.csv`. Returns the manifest path.
pub fn write_cohort(dir: &Path, records: &[VolumeRecord]) -> Result<PathBuf, VolumeIoError> {
    let vol_dir = dir.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(io_err(&vol_dir))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| VolumeIoError::Manifest {
        path: manifest.clone(),
        detail: e.to_string(),
    })?;
    for r in records {
        let rel = format!("volumes/s{:05}_{}.dgv", r.subject_id, r.domain.as_str());
        save_volume(&r.volume, &dir.join(&rel))?;
        w.serialize(ManifestRow {
            subject_id: r.subject_id,
            pair_id: r.pair_id,
            domain: r.domain,
            label: r.label,
            path: rel,
        })
        .map_err(|e| VolumeIoError::Manifest {
            path: manifest.clone(),
            detail: e.to_string(),
        })?;
    }
    w.flush().map_err(io_err(&manifest))?;
    Ok(manifest)
}

/// Loads every record listed in a manifest.
pub fn read_manifest(manifest: &Path) -> Result<Vec<VolumeRecord>, VolumeIoError> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let merr = |detail: String| VolumeIoError::Manifest {
        path: manifest.to_path_buf(),
        detail,
    };
    let mut rdr = csv::Reader::from_path(manifest).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => VolumeIoError::Io {
            path: manifest.to_path_buf(),
            source,
        },
        other => merr(format!("{other:?}")),
    })?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| merr(e.to_string()))?;
        if row.label > 1 {
            return Err(merr(format!("subject {} has label {}", row.subject_id, row.label)));
        }
        out.push(VolumeRecord {
            subject_id: row.subject_id,
            pair_id: row.pair_id,
            domain: row.domain,
            label: row.label,
            volume: load_volume(&base.join(&row.path))?,
        });
    }
    Ok(out)
}

/// Writes the central slice as an 8-bit binary PGM, min–max scaled.
pub fn write_pgm_center_slice(volume: &Volume, path: &Path) -> Result<(), VolumeIoError> {
    let [s, h, w] = volume.dims();
    let slice = volume.slice(s / 2);
    let lo = slice.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = slice.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(
        slice
            .iter()
            .map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}
