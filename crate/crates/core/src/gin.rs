//! Global intensity non-linear (GIN) augmentation.
//!
//! A view is produced by pushing the volume through a shallow convolutional
//! network with freshly drawn random weights, rescaling the result to the
//! input's mean and standard deviation, and blending it with the original:
//! `alpha·g(x) + (1 − alpha)·x` with `alpha ~ U(lo, hi)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;
use crate::tensor::kernels::conv3d_forward;
use crate::tensor::{ConvGeom, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GinError {
    #[error("invalid GIN configuration: {0}")]
    Config(String),
    #[error("alpha {0} outside [0, 1]")]
    Alpha(f64),
    #[error("input volume contains non-finite values")]
    NonFinite,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, GinError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GinConfig {
    pub n_layers: usize,
    pub hidden_channels: usize,
    /// Cubic kernel edge; padding keeps the volume shape.
    pub kernel: usize,
    pub leaky_slope: f64,
    /// Bounds of the uniform blending coefficient.
    pub alpha_range: (f64, f64),
    pub renormalize: bool,
    pub views_per_image: usize,
}

impl Default for GinConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            hidden_channels: 2,
            kernel: 3,
            leaky_slope: 0.2,
            alpha_range: (0.0, 1.0),
            renormalize: true,
            views_per_image: 5,
        }
    }
}

impl GinConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.alpha_range;
        if self.n_layers == 0 {
            return Err(GinError::Config("n_layers must be >= 1".into()));
        }
        if self.hidden_channels == 0 {
            return Err(GinError::Config("hidden_channels must be >= 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(GinError::Config("kernel must be odd to preserve shape".into()));
        }
        if self.views_per_image == 0 {
            return Err(GinError::Config("views_per_image must be >= 1".into()));
        }
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(GinError::Config(format!("alpha_range ({lo}, {hi}) not within [0, 1]")));
        }
        Ok(())
    }
}

/// Frozen random shallow convolutional network.
#[derive(Debug, Clone, PartialEq)]
pub struct GinNetwork {
    layers: Vec<(Tensor, Tensor)>,
    slope: f64,
    kernel: usize,
}

impl GinNetwork {
    pub fn layers(&self) -> &[(Tensor, Tensor)] {
        &self.layers
    }

    /// `g(x)` for `x` of shape `[N, C, D, H, W]`. Leaky ReLU follows every
    /// layer except the last.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let geom = ConvGeom::same(self.kernel);
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = conv3d_forward(&h, w, b, geom)?;
            if i < last {
                let s = self.slope;
                h.data_mut().iter_mut().for_each(|v| {
                    if *v < 0.0 {
                        *v *= s
                    }
                });
            }
        }
        Ok(h)
    }
}

/// Draws a network mapping `channels → hidden → … → channels`, with
/// fan-in-scaled Gaussian weights and biases.
pub fn sample_gin(rng: &mut RngStream, channels: usize, config: &GinConfig) -> Result<GinNetwork> {
    config.validate()?;
    let k = config.kernel;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let cin = if i == 0 { channels } else { config.hidden_channels };
        let cout = if i + 1 == config.n_layers {
            channels
        } else {
            config.hidden_channels
        };
        let std = (1.0 / (cin * k * k * k) as f64).sqrt();
        let w = Tensor::from_fn(&[cout, cin, k, k, k], |_| std * rng.normal());
        let b = Tensor::from_fn(&[cout], |_| std * rng.normal());
        layers.push((w, b));
    }
    Ok(GinNetwork {
        layers,
        slope: config.leaky_slope,
        kernel: k,
    })
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Blends `x` with its GIN transform. Operates per sample along axis 0.
///
/// With renormalization on, `g(x)` is rescaled to the sample's mean and
/// standard deviation; if `g(x)` is constant only the mean is matched.
pub fn augment(x: &Tensor, g: &GinNetwork, alpha: f64, config: &GinConfig) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GinError::Alpha(alpha));
    }
    if !x.is_finite() {
        return Err(GinError::NonFinite);
    }
    let mut y = g.apply(x)?;
    let per = x.numel() / x.shape()[0];
    for (ys, xs) in y.data_mut().chunks_mut(per).zip(x.data().chunks(per)) {
        if config.renormalize {
            let (mx, sx) = moments(xs);
            let (my, sy) = moments(ys);
            if sy > 1e-12 {
                ys.iter_mut().for_each(|v| *v = (*v - my) / sy * sx + mx);
            } else {
                ys.iter_mut().for_each(|v| *v = *v - my + mx);
            }
        }
        for (yv, &xv) in ys.iter_mut().zip(xs) {
            *yv = alpha * *yv + (1.0 - alpha) * xv;
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GinView {
    pub volume: Tensor,
    pub alpha: f64,
}

/// `views_per_image` views of `x`, each with its own network and alpha.
/// `rng` should be specific to the image (and epoch); view `v` draws from
/// the child streams `view{v}/net` and `view{v}/alpha`.
pub fn augment_views(x: &Tensor, rng: &RngStream, config: &GinConfig) -> Result<Vec<GinView>> {
    config.validate()?;
    let channels = x.shape()[1];
    let (lo, hi) = config.alpha_range;
    (0..config.views_per_image)
        .map(|v| {
            let g = sample_gin(&mut rng.derive(format!("view{v}/net")), channels, config)?;
            let alpha = rng.derive(format!("view{v}/alpha")).uniform_range(lo, hi);
            Ok(GinView {
                volume: augment(x, &g, alpha, config)?,
                alpha,
            })
        })
        .collect()
}
