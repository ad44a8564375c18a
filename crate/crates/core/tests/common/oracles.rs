//! Independent reference implementations: direct formulas, no shared code
//! with the library beyond the types.

use kneedg::metrics::student_t_cdf;
use kneedg::tensor::Tensor;

/// Direct summation over every output cell, channel and kernel tap.
pub fn conv_direct(x: &Tensor, w: &Tensor, b: &Tensor, stride: [usize; 3], pad: [usize; 3]) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, cin, d, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (cout, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let od = (d + 2 * pad[0] - kd) / stride[0] + 1;
    let oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let ow = (wd + 2 * pad[2] - kw) / stride[2] + 1;
    let mut out = Tensor::zeros(&[n, cout, od, oh, ow]);
    let xv = |i: usize, c: usize, z: isize, y: isize, q: isize| -> f64 {
        if z < 0 || y < 0 || q < 0 || z >= d as isize || y >= h as isize || q >= wd as isize {
            return 0.0;
        }
        x.data()[(((i * cin + c) * d + z as usize) * h + y as usize) * wd + q as usize]
    };
    for i in 0..n {
        for o in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for q in 0..ow {
                        let mut acc = b.data()[o];
                        for c in 0..cin {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for cc in 0..kw {
                                        let wv = w.data()[(((o * cin + c) * kd + a) * kh + bb) * kw + cc];
                                        acc += wv
                                            * xv(
                                                i,
                                                c,
                                                (z * stride[0] + a) as isize - pad[0] as isize,
                                                (y * stride[1] + bb) as isize - pad[1] as isize,
                                                (q * stride[2] + cc) as isize - pad[2] as isize,
                                            );
                                    }
                                }
                            }
                        }
                        out.data_mut()[(((i * cout + o) * od + z) * oh + y) * ow + q] = acc;
                    }
                }
            }
        }
    }
    out
}

/// AUC by counting concordant case/control pairs, ties counting ½.
pub fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// The supervised contrastive objective evaluated literally from its
/// definition, without log-sum-exp.
pub fn supcon_direct(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let m = z.len();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..m {
        let pos: Vec<usize> = (0..m).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let denom: f64 = (0..m)
            .filter(|&a| a != i)
            .map(|a| (dot(&z[i], &z[a]) / tau).exp())
            .sum();
        let li: f64 = pos
            .iter()
            .map(|&p| ((dot(&z[i], &z[p]) / tau).exp() / denom).ln())
            .sum::<f64>()
            / pos.len() as f64;
        total -= li;
        anchors += 1;
    }
    total / anchors as f64
}

/// Γ at a positive multiple of ½ by the recurrence from Γ(½) = √π, Γ(1) = 1.
pub fn half_integer_gamma(x2: u32) -> f64 {
    let mut x = if x2 % 2 == 0 { 1.0 } else { 0.5 };
    let mut g = if x2 % 2 == 0 { 1.0 } else { std::f64::consts::PI.sqrt() };
    while 2.0 * x < x2 as f64 {
        g *= x;
        x += 1.0;
    }
    g
}

/// Largest deviation of `student_t_cdf(±t, df)` from the CDF obtained by
/// integrating the t density with composite Simpson (10⁶ intervals on
/// [0, 10]), checked at t = 0.5, 1.0, …, 10.
pub fn t_cdf_max_deviation(df: u32) -> f64 {
    const INTERVALS: usize = 1_000_000;
    const T_MAX: f64 = 10.0;
    const MARK_EVERY: usize = 50_000;
    let h = T_MAX / INTERVALS as f64;
    let nu = df as f64;
    let c = half_integer_gamma(df + 1) / ((nu * std::f64::consts::PI).sqrt() * half_integer_gamma(df));
    let density = |t: f64| c * (1.0 + t * t / nu).powf(-(nu + 1.0) / 2.0);
    let mut area = 0.0;
    let mut worst: f64 = 0.0;
    for k in (0..INTERVALS).step_by(2) {
        let t0 = k as f64 * h;
        area += h / 3.0 * (density(t0) + 4.0 * density(t0 + h) + density(t0 + 2.0 * h));
        if (k + 2) % MARK_EVERY == 0 {
            let t = (k + 2) as f64 * h;
            let oracle = 0.5 + area;
            worst = worst.max((student_t_cdf(t, nu) - oracle).abs());
            worst = worst.max((student_t_cdf(-t, nu) - (1.0 - oracle)).abs());
        }
    }
    worst
}
