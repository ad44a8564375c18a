//! Synthetic cohort: every subject gets a latent anatomy (a smooth field of
//! random Gaussian blobs); cases additionally carry a compact lesion. Each
//! domain renders that same anatomy through its own style: a monotone
//! intensity curve, box smoothing and additive noise.

use serde::{Deserialize, Serialize};

use super::{CohortError, Domain, Result, Volume, VolumeRecord};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSpec {
    /// Per-subject exponent of the intensity curve, drawn uniformly.
    pub gamma_range: (f64, f64),
    pub gain: f64,
    pub offset: f64,
    /// Box-filter half-width in voxels; 0 disables smoothing.
    pub smoothing_radius: usize,
    pub noise_sigma: f64,
}

impl StyleSpec {
    pub fn identity() -> Self {
        Self {
            gamma_range: (1.0, 1.0),
            gain: 1.0,
            offset: 0.0,
            smoothing_radius: 0,
            noise_sigma: 0.0,
        }
    }

    fn validate(&self, which: &str) -> Result<()> {
        let (lo, hi) = self.gamma_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(CohortError::Config(format!(
                "{which}.gamma_range must satisfy 0 < lo <= hi"
            )));
        }
        if !(self.gain > 0.0) {
            return Err(CohortError::Config(format!("{which}.gain must be > 0")));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(CohortError::Config(format!("{which}.noise_sigma must be >= 0")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub n_pairs: usize,
    /// (slices, height, width)
    pub volume_dims: [usize; 3],
    pub n_blobs: usize,
    pub blob_radius: (f64, f64),
    pub blob_amplitude: (f64, f64),
    /// Peak amplitude of the case lesion.
    pub effect_magnitude: f64,
    pub lesion_radius: f64,
    pub source_style: StyleSpec,
    pub target_style: StyleSpec,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_pairs: 70,
            volume_dims: [16, 24, 24],
            n_blobs: 6,
            blob_radius: (2.5, 5.0),
            blob_amplitude: (0.2, 0.6),
            effect_magnitude: 1.5,
            lesion_radius: 2.0,
            source_style: StyleSpec {
                gamma_range: (0.8, 1.25),
                gain: 1.0,
                offset: 0.0,
                smoothing_radius: 0,
                noise_sigma: 0.05,
            },
            target_style: StyleSpec {
                gamma_range: (0.8, 1.1),
                gain: 0.4,
                offset: 0.05,
                smoothing_radius: 0,
                noise_sigma: 0.05,
            },
            seed: 2024,
        }
    }
}

impl CohortSpec {
    /// Full validation for configured cohorts. `effect_magnitude` must be
    /// strictly positive here; [`generate_cohort`] itself also accepts 0 so
    /// null-effect cohorts can be studied.
    pub fn validate(&self) -> Result<()> {
        self.validate_generation()?;
        if !(self.effect_magnitude > 0.0) {
            return Err(CohortError::Config("effect_magnitude must be > 0".into()));
        }
        Ok(())
    }

    fn validate_generation(&self) -> Result<()> {
        if self.n_pairs < 7 {
            return Err(CohortError::Config(format!(
                "n_pairs must be >= 7, got {}",
                self.n_pairs
            )));
        }
        let [s, h, w] = self.volume_dims;
        if s < 4 || h < 8 || w < 8 {
            return Err(CohortError::Config(format!(
                "volume_dims must be at least (4, 8, 8), got {:?}",
                self.volume_dims
            )));
        }
        if !(self.effect_magnitude >= 0.0) {
            return Err(CohortError::Config("effect_magnitude must be >= 0".into()));
        }
        let (r0, r1) = self.blob_radius;
        if !(r0 > 0.0 && r0 <= r1) || !(self.lesion_radius > 0.0) {
            return Err(CohortError::Config("radii must be positive and ordered".into()));
        }
        self.source_style.validate("source_style")?;
        self.target_style.validate("target_style")
    }
}

struct Blob {
    center: [f64; 3],
    radius: f64,
    amplitude: f64,
}

fn add_blob(field: &mut [f64], dims: [usize; 3], b: &Blob) {
    let [s, h, w] = dims;
    let inv = 1.0 / (2.0 * b.radius * b.radius);
    let reach = 3.5 * b.radius;
    let lo = |c: f64| (c - reach).floor().max(0.0) as usize;
    let hi = |c: f64, n: usize| ((c + reach).ceil() as usize + 1).min(n);
    for z in lo(b.center[0])..hi(b.center[0], s) {
        let dz = z as f64 - b.center[0];
        for y in lo(b.center[1])..hi(b.center[1], h) {
            let dy = y as f64 - b.center[1];
            for x in lo(b.center[2])..hi(b.center[2], w) {
                let dx = x as f64 - b.center[2];
                field[(z * h + y) * w + x] += b.amplitude * (-(dz * dz + dy * dy + dx * dx) * inv).exp();
            }
        }
    }
}

fn anatomy(spec: &CohortSpec, rng: &mut RngStream, case: bool) -> Vec<f64> {
    let dims = spec.volume_dims;
    let mut field = vec![0.0; dims.iter().product()];
    for _ in 0..spec.n_blobs {
        let blob = Blob {
            center: dims.map(|n| rng.uniform() * (n - 1) as f64),
            radius: rng.uniform_range(spec.blob_radius.0, spec.blob_radius.1),
            amplitude: rng.uniform_range(spec.blob_amplitude.0, spec.blob_amplitude.1),
        };
        add_blob(&mut field, dims, &blob);
    }
    // The lesion position is drawn for controls too, so both members of a
    // pair consume the same number of draws.
    let center = dims.map(|n| (0.25 + 0.5 * rng.uniform()) * (n - 1) as f64);
    if case {
        add_blob(
            &mut field,
            dims,
            &Blob {
                center,
                radius: spec.lesion_radius,
                amplitude: spec.effect_magnitude,
            },
        );
    }
    field
}

fn box_smooth(field: &mut [f64], dims: [usize; 3], r: usize) {
    if r == 0 {
        return;
    }
    let [_, h, w] = dims;
    let strides = [h * w, w, 1];
    let mut tmp = vec![0.0; field.len()];
    for (axis, &len) in dims.iter().enumerate() {
        let st = strides[axis];
        for (i, t) in tmp.iter_mut().enumerate() {
            let pos = (i / st) % len;
            let a = pos.saturating_sub(r);
            let b = (pos + r).min(len - 1);
            let base = i - pos * st;
            let sum: f64 = (a..=b).map(|p| field[base + p * st]).sum();
            *t = sum / (b - a + 1) as f64;
        }
        field.copy_from_slice(&tmp);
    }
}

fn render(field: &[f64], dims: [usize; 3], style: &StyleSpec, rng: &mut RngStream) -> Volume {
    let gamma = rng.uniform_range(style.gamma_range.0, style.gamma_range.1);
    let mut v: Vec<f64> = field
        .iter()
        .map(|&a| style.gain * a.max(0.0).powf(gamma) + style.offset)
        .collect();
    box_smooth(&mut v, dims, style.smoothing_radius);
    if style.noise_sigma > 0.0 {
        v.iter_mut().for_each(|x| *x += style.noise_sigma * rng.normal());
    }
    Volume::new(dims, v.into_iter().map(|x| x as f32).collect()).expect("dims")
}

/// Generates `2 · n_pairs` subjects, each rendered in both domains. Subject
/// `2p` is the control and `2p + 1` the case of pair `p`. Records come out
/// ordered by subject, Source before Target.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<VolumeRecord>> {
    spec.validate_generation()?;
    let root = RngStream::new(spec.seed, "cohort");
    let mut out = Vec::with_capacity(4 * spec.n_pairs);
    for pair in 0..spec.n_pairs as u32 {
        for label in [0u8, 1] {
            let subject = 2 * pair + label as u32;
            let subj_rng = root.derive(format!("subject{subject}"));
            let field = anatomy(spec, &mut subj_rng.derive("anatomy"), label == 1);
            for (domain, style) in [
                (Domain::Source, &spec.source_style),
                (Domain::Target, &spec.target_style),
            ] {
                let volume = render(&field, spec.volume_dims, style, &mut subj_rng.derive(domain.as_str()));
                out.push(VolumeRecord {
                    subject_id: subject,
                    pair_id: pair,
                    domain,
                    label,
                    volume,
                });
            }
        }
    }
    Ok(out)
}
