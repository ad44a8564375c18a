//! Synthetic two-domain case/control cohort, slice preprocessing, fold
//! construction and on-disk volume format.

mod folds;
mod io;
mod synth;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use folds::{make_folds, FoldSplit};
pub use io::{
    decode_volume, encode_volume, load_volume, read_manifest, save_volume, write_cohort, write_pgm_center_slice,
    ManifestRow, VolumeIoError,
};
pub use synth::{generate_cohort, CohortSpec, StyleSpec};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("invalid cohort configuration: {0}")]
    Config(String),
    #[error("preprocessing: {0}")]
    Contract(String),
    #[error("inconsistent cohort: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] VolumeIoError),
}

pub type Result<T> = std::result::Result<T, CohortError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(format!("unknown domain {other:?}")),
        }
    }
}

/// Single-channel volume, `slices × height × width`, row-major `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(CohortError::Contract(format!(
                "dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn slice(&self, i: usize) -> &[f32] {
        let per = self.dims[1] * self.dims[2];
        &self.data[i * per..(i + 1) * per]
    }

    /// As a `[1, 1, S, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let [s, h, w] = self.dims;
        Tensor::new(vec![1, 1, s, h, w], self.data.iter().map(|&v| v as f64).collect())
            .expect("volume dims are consistent")
    }

    /// From a tensor holding exactly one single-channel volume.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[1, 1, s, h, w] => Self::new([s, h, w], t.data().iter().map(|&v| v as f32).collect()),
            s => Err(CohortError::Contract(format!(
                "expected a [1, 1, S, H, W] tensor, got {s:?}"
            ))),
        }
    }

    fn from_slices(dims: [usize; 3], slices: impl IntoIterator<Item = Option<usize>>, src: &Volume) -> Self {
        let per = dims[1] * dims[2];
        let mut data = Vec::with_capacity(dims[0] * per);
        for s in slices {
            match s {
                Some(i) => data.extend_from_slice(src.slice(i)),
                None => data.extend(std::iter::repeat(0.0).take(per)),
            }
        }
        Self { dims, data }
    }
}

/// Keeps the central `k` slices. Shorter volumes are zero-padded with
/// `floor((k − n)/2)` slices before and the remainder after.
pub fn central_slices(volume: &Volume, k: usize) -> Result<Volume> {
    if k == 0 {
        return Err(CohortError::Contract("k must be >= 1".into()));
    }
    let [n, h, w] = volume.dims;
    let dims = [k, h, w];
    let slices: Vec<Option<usize>> = if n >= k {
        let start = (n - k) / 2;
        (start..start + k).map(Some).collect()
    } else {
        let before = (k - n) / 2;
        (0..k)
            .map(|i| (i >= before && i < before + n).then(|| i - before))
            .collect()
    };
    Ok(Volume::from_slices(dims, slices, volume))
}

/// Decimates to `target` slices by keeping indices
/// `round(i·(n−1)/(target−1))`; both end slices are always kept.
pub fn downsample_slices(volume: &Volume, target: usize) -> Result<Volume> {
    let [n, h, w] = volume.dims;
    if target < 2 {
        return Err(CohortError::Contract("target must be >= 2".into()));
    }
    if n < target {
        return Err(CohortError::Contract(format!(
            "cannot downsample {n} slices to {target}; pad with central_slices instead"
        )));
    }
    let idx = downsample_indices(n, target);
    Ok(Volume::from_slices([target, h, w], idx.into_iter().map(Some), volume))
}

pub fn downsample_indices(n: usize, target: usize) -> Vec<usize> {
    (0..target)
        .map(|i| ((i * (n - 1)) as f64 / (target - 1) as f64).round() as usize)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeRecord {
    pub subject_id: u32,
    /// Shared by a case and its matched control.
    pub pair_id: u32,
    pub domain: Domain,
    /// 0 = control, 1 = case.
    pub label: u8,
    pub volume: Volume,
}

/// Records indexed by (subject, domain).
#[derive(Debug, Clone)]
pub struct Cohort {
    records: Vec<VolumeRecord>,
    index: HashMap<(u32, Domain), usize>,
}

impl Cohort {
    pub fn new(records: Vec<VolumeRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        let mut dims = None;
        for (i, r) in records.iter().enumerate() {
            if index.insert((r.subject_id, r.domain), i).is_some() {
                return Err(CohortError::Data(format!(
                    "subject {} has two {} records",
                    r.subject_id,
                    r.domain.as_str()
                )));
            }
            match dims {
                None => dims = Some(r.volume.dims()),
                Some(d) if d != r.volume.dims() => {
                    return Err(CohortError::Data("volumes have differing dimensions".into()))
                }
                _ => {}
            }
        }
        Ok(Self { records, index })
    }

    pub fn records(&self) -> &[VolumeRecord] {
        &self.records
    }

    pub fn get(&self, subject: u32, domain: Domain) -> Option<&VolumeRecord> {
        self.index.get(&(subject, domain)).map(|&i| &self.records[i])
    }

    pub fn volume_dims(&self) -> Option<[usize; 3]> {
        self.records.first().map(|r| r.volume.dims())
    }
}
