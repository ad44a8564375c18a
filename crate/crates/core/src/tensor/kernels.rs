//! Forward and backward kernels on raw buffers. Layout is NCDHW, row-major.
//! Every loop runs in a fixed sequential order so results are bit-stable.

use super::{dim_err, Result, Tensor};

/// Stride and zero-padding per spatial axis (depth, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeom {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self { stride, padding }
    }

    /// Stride 1, padding `k / 2`: shape-preserving for odd kernels.
    pub fn same(kernel: usize) -> Self {
        Self::new([1; 3], [kernel / 2; 3])
    }
}

/// Output extent of a strided window sweep.
pub(crate) fn out_len(input: usize, kernel: usize, pad: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output positions `o` whose input coordinate `o*stride + k - pad` lands
/// inside `[0, input)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, input: usize, out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if input + pad < k + 1 {
        0
    } else {
        ((input - 1 + pad - k) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

pub(crate) struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
}

pub(crate) fn conv3d_shape(x: &Tensor, w: &Tensor, b: &Tensor, g: ConvGeom) -> Result<ConvShape> {
    let [n, cin, d, h, wd] = x.dims5("conv3d")?;
    let [cout, wcin, kd, kh, kw] = w.dims5("conv3d")?;
    if cin != wcin {
        return dim_err("conv3d", format!("input has {cin} channels but weight expects {wcin}"));
    }
    if b.numel() != cout {
        return dim_err("conv3d", format!("bias has {} entries, need {cout}", b.numel()));
    }
    let input = [d, h, wd];
    let kernel = [kd, kh, kw];
    let mut output = [0; 3];
    for ax in 0..3 {
        output[ax] = out_len(input[ax], kernel[ax], g.padding[ax], g.stride[ax]).ok_or_else(|| {
            super::TensorError::Dimension {
                op: "conv3d",
                detail: format!(
                    "kernel {} does not fit axis {ax} of length {} (pad {}, stride {})",
                    kernel[ax], input[ax], g.padding[ax], g.stride[ax]
                ),
            }
        })?;
    }
    Ok(ConvShape {
        n,
        cin,
        cout,
        input,
        kernel,
        output,
    })
}

pub(crate) fn conv3d_forward(x: &Tensor, w: &Tensor, b: &Tensor, g: ConvGeom) -> Result<Tensor> {
    let s = conv3d_shape(x, w, b, g)?;
    let [d, h, wd] = s.input;
    let [kd, kh, kw] = s.kernel;
    let [od, oh, ow] = s.output;
    let (isp, osp) = (d * h * wd, od * oh * ow);
    let ksz = kd * kh * kw;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; s.n * s.cout * osp];

    for ni in 0..s.n {
        for co in 0..s.cout {
            let ob = (ni * s.cout + co) * osp;
            let oslice = &mut out[ob..ob + osp];
            oslice.fill(b.data()[co]);
            for ci in 0..s.cin {
                let xs = &xd[(ni * s.cin + ci) * isp..][..isp];
                let wbase = (co * s.cin + ci) * ksz;
                for a in 0..kd {
                    let (z0, z1) = valid_range(a, pd, sd, d, od);
                    for bb in 0..kh {
                        let (y0, y1) = valid_range(bb, ph, sh, h, oh);
                        for c in 0..kw {
                            let (x0, x1) = valid_range(c, pw, sw, wd, ow);
                            if x0 >= x1 {
                                continue;
                            }
                            let wv = wdat[wbase + (a * kh + bb) * kw + c];
                            let len = x1 - x0;
                            for oz in z0..z1 {
                                let iz = oz * sd + a - pd;
                                for oy in y0..y1 {
                                    let iy = oy * sh + bb - ph;
                                    let orow = &mut oslice[(oz * oh + oy) * ow + x0..][..len];
                                    let ix0 = x0 * sw + c - pw;
                                    let irow = &xs[(iz * h + iy) * wd..];
                                    if sw == 1 {
                                        for (o, &i) in orow.iter_mut().zip(&irow[ix0..ix0 + len]) {
                                            *o += wv * i;
                                        }
                                    } else {
                                        for (k, o) in orow.iter_mut().enumerate() {
                                            *o += wv * irow[ix0 + k * sw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![s.n, s.cout, od, oh, ow], out)
}

/// Returns (d_input, d_weight, d_bias); d_input is skipped when not needed.
pub(crate) fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    g: ConvGeom,
    dout: &[f64],
    need_input: bool,
) -> Result<(Option<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    let s = conv3d_shape(x, w, b, g)?;
    let [d, h, wd] = s.input;
    let [kd, kh, kw] = s.kernel;
    let [od, oh, ow] = s.output;
    let (isp, osp) = (d * h * wd, od * oh * ow);
    let ksz = kd * kh * kw;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let xd = x.data();
    let wdat = w.data();
    let mut dx = if need_input { Some(vec![0.0; x.numel()]) } else { None };
    let mut dw = vec![0.0; w.numel()];
    let mut db = vec![0.0; s.cout];

    for ni in 0..s.n {
        for co in 0..s.cout {
            let gs = &dout[(ni * s.cout + co) * osp..][..osp];
            db[co] += gs.iter().sum::<f64>();
            for ci in 0..s.cin {
                let xoff = (ni * s.cin + ci) * isp;
                let xs = &xd[xoff..xoff + isp];
                let wbase = (co * s.cin + ci) * ksz;
                for a in 0..kd {
                    let (z0, z1) = valid_range(a, pd, sd, d, od);
                    for bb in 0..kh {
                        let (y0, y1) = valid_range(bb, ph, sh, h, oh);
                        for c in 0..kw {
                            let (x0, x1) = valid_range(c, pw, sw, wd, ow);
                            if x0 >= x1 {
                                continue;
                            }
                            let widx = wbase + (a * kh + bb) * kw + c;
                            let wv = wdat[widx];
                            let len = x1 - x0;
                            let ix0 = x0 * sw + c - pw;
                            let mut acc = 0.0;
                            for oz in z0..z1 {
                                let iz = oz * sd + a - pd;
                                for oy in y0..y1 {
                                    let iy = oy * sh + bb - ph;
                                    let grow = &gs[(oz * oh + oy) * ow + x0..][..len];
                                    let rbase = (iz * h + iy) * wd;
                                    if sw == 1 {
                                        let irow = &xs[rbase + ix0..rbase + ix0 + len];
                                        for (&gv, &iv) in grow.iter().zip(irow) {
                                            acc += gv * iv;
                                        }
                                        if let Some(dx) = dx.as_mut() {
                                            let drow = &mut dx[xoff + rbase + ix0..xoff + rbase + ix0 + len];
                                            for (dv, &gv) in drow.iter_mut().zip(grow) {
                                                *dv += wv * gv;
                                            }
                                        }
                                    } else {
                                        for (k, &gv) in grow.iter().enumerate() {
                                            let ii = rbase + ix0 + k * sw;
                                            acc += gv * xs[ii];
                                            if let Some(dx) = dx.as_mut() {
                                                dx[xoff + ii] += wv * gv;
                                            }
                                        }
                                    }
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}

/// Max pooling without padding. Returns the pooled tensor and, per output
/// cell, the flat input index of the first maximal element in raster order.
pub(crate) fn maxpool3d_forward(x: &Tensor, window: [usize; 3], stride: [usize; 3]) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, d, h, wd] = x.dims5("maxpool3d")?;
    let input = [d, h, wd];
    let mut output = [0; 3];
    for ax in 0..3 {
        output[ax] = match out_len(input[ax], window[ax], 0, stride[ax]) {
            Some(v) => v,
            None => {
                return dim_err(
                    "maxpool3d",
                    format!(
                        "window {:?} (stride {:?}) does not fit input {:?}",
                        window, stride, input
                    ),
                )
            }
        };
    }
    let [od, oh, ow] = output;
    let (isp, osp) = (d * h * wd, od * oh * ow);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * osp);
    let mut arg = Vec::with_capacity(n * c * osp);
    for nc in 0..n * c {
        let base = nc * isp;
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for a in 0..window[0] {
                        let iz = oz * stride[0] + a;
                        for b in 0..window[1] {
                            let iy = oy * stride[1] + b;
                            for cc in 0..window[2] {
                                let ix = ox * stride[2] + cc;
                                let i = base + (iz * h + iy) * wd + ix;
                                if best_i == usize::MAX || xd[i] > best {
                                    best = xd[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, od, oh, ow], out)?, arg))
}

/// Per-channel batch statistics (biased variance) from a training-mode
/// batch-norm pass, plus the element count they were taken over.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Normalization groups: either one group per channel spanning (N, spatial),
/// or one group per (sample, channel) spanning spatial positions only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Grouping {
    PerChannel,
    PerInstance,
}

fn group_of(grouping: Grouping, ni: usize, ci: usize, c: usize) -> usize {
    match grouping {
        Grouping::PerChannel => ci,
        Grouping::PerInstance => ni * c + ci,
    }
}

/// Normalized values and per-group inverse std for `x` using statistics
/// computed from `x` itself.
pub(crate) fn normalize_stats(
    x: &Tensor,
    grouping: Grouping,
    eps: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let [n, c, d, h, w] = x.dims5("norm")?;
    let sp = d * h * w;
    let groups = match grouping {
        Grouping::PerChannel => c,
        Grouping::PerInstance => n * c,
    };
    let per_group = match grouping {
        Grouping::PerChannel => n * sp,
        Grouping::PerInstance => sp,
    } as f64;
    let xd = x.data();
    let mut mean = vec![0.0; groups];
    for ni in 0..n {
        for ci in 0..c {
            let g = group_of(grouping, ni, ci, c);
            mean[g] += xd[(ni * c + ci) * sp..][..sp].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= per_group);
    let mut var = vec![0.0; groups];
    for ni in 0..n {
        for ci in 0..c {
            let g = group_of(grouping, ni, ci, c);
            let m = mean[g];
            var[g] += xd[(ni * c + ci) * sp..][..sp]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= per_group);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let g = group_of(grouping, ni, ci, c);
            let off = (ni * c + ci) * sp;
            for k in off..off + sp {
                xhat[k] = (xd[k] - mean[g]) * inv_std[g];
            }
        }
    }
    Ok((xhat, inv_std, mean, var))
}

pub(crate) fn channel_affine(xhat: &[f64], shape: &[usize], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let c = shape[1];
    let sp: usize = shape[2..].iter().product();
    let mut y = vec![0.0; xhat.len()];
    for (chunk_i, (yc, xc)) in y.chunks_mut(sp).zip(xhat.chunks(sp)).enumerate() {
        let ci = chunk_i % c;
        for (yv, &xv) in yc.iter_mut().zip(xc) {
            *yv = gamma[ci] * xv + beta[ci];
        }
    }
    y
}

/// Backward of y = gamma * xhat + beta where xhat was normalized with
/// statistics of the batch itself. Returns (dx, dgamma, dbeta).
pub(crate) fn norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    shape: &[usize],
    grouping: Grouping,
    stats_from_input: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c) = (shape[0], shape[1]);
    let sp: usize = shape[2..].iter().product();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let groups = inv_std.len();
    let mut sum_dxhat = vec![0.0; groups];
    let mut sum_dxhat_xhat = vec![0.0; groups];
    for ni in 0..n {
        for ci in 0..c {
            let g = group_of(grouping, ni, ci, c);
            let off = (ni * c + ci) * sp;
            for k in off..off + sp {
                dgamma[ci] += dy[k] * xhat[k];
                dbeta[ci] += dy[k];
                let dxh = dy[k] * gamma[ci];
                sum_dxhat[g] += dxh;
                sum_dxhat_xhat[g] += dxh * xhat[k];
            }
        }
    }
    let per_group = match grouping {
        Grouping::PerChannel => n * sp,
        Grouping::PerInstance => sp,
    } as f64;
    let mut dx = vec![0.0; dy.len()];
    for ni in 0..n {
        for ci in 0..c {
            let g = group_of(grouping, ni, ci, c);
            let off = (ni * c + ci) * sp;
            for k in off..off + sp {
                let dxh = dy[k] * gamma[ci];
                dx[k] = if stats_from_input {
                    inv_std[g] / per_group * (per_group * dxh - sum_dxhat[g] - xhat[k] * sum_dxhat_xhat[g])
                } else {
                    inv_std[g] * dxh
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for input in 1..7 {
            for k in 0..4 {
                for pad in 0..3 {
                    for stride in 1..4 {
                        let Some(out) = out_len(input, k + 1, pad, stride) else {
                            continue;
                        };
                        let (lo, hi) = valid_range(k, pad, stride, input, out);
                        for o in 0..out {
                            let ix = (o * stride + k) as isize - pad as isize;
                            let inside = ix >= 0 && (ix as usize) < input;
                            assert_eq!(inside, o >= lo && o < hi, "in={input} k={k} p={pad} s={stride} o={o}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn out_len_formula() {
        assert_eq!(out_len(4, 3, 1, 1), Some(4));
        assert_eq!(out_len(5, 3, 1, 2), Some(3));
        assert_eq!(out_len(2, 3, 0, 1), None);
        assert_eq!(out_len(4, 2, 0, 0), None);
    }
}
