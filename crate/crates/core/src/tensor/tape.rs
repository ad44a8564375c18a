use super::kernels::{self, BatchStats, ConvGeom, Grouping};
use super::{dim_err, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-norm layer obtains its statistics.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    /// Statistics from the current batch, over (N, D, H, W) per channel.
    Train,
    /// Fixed running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    MaxPool3d {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu {
        x: Var,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        grouping: Grouping,
        stats_from_input: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Sum {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax {
        x: Var,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    /// Scalar-valued function whose gradient w.r.t. `x` was computed during
    /// the forward pass.
    ScalarFn {
        x: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Wengert list of recorded operations. Nodes are appended in evaluation
/// order, so the tape is topologically sorted by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the loss does not depend on `v`.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Vec<f64> {
        let n: usize = self.shapes[v.0].iter().product();
        self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n])
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let out = kernels::conv3d_forward(self.value(x), self.value(w), self.value(b), geom)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, Op::Conv3d { x, w, b, geom }, rg))
    }

    pub fn max_pool3d(&mut self, x: Var, window: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let (out, argmax) = kernels::maxpool3d_forward(self.value(x), window, stride)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaxPool3d { x, argmax }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    fn check_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let [_, c, _, _, _] = self.value(x).dims5(op)?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return dim_err(op, format!("affine parameters must have {c} entries"));
        }
        Ok(c)
    }

    /// Batch normalization. In training mode also returns the batch
    /// statistics so the caller can fold them into running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: NormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let c = self.check_affine("batch_norm", x, gamma, beta)?;
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (xhat, inv_std, stats, from_input) = match mode {
            NormMode::Train => {
                let (xhat, inv_std, mean, var) = kernels::normalize_stats(xv, Grouping::PerChannel, eps)?;
                let count = shape[0] * shape[2..].iter().product::<usize>();
                (xhat, inv_std, Some(BatchStats { mean, var, count }), true)
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return dim_err("batch_norm", format!("running stats must have {c} entries"));
                }
                let sp: usize = shape[2..].iter().product();
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let xhat = xv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &a)| {
                        let ci = (k / sp) % c;
                        (a - mean[ci]) * inv_std[ci]
                    })
                    .collect();
                (xhat, inv_std, None, false)
            }
        };
        let y = kernels::channel_affine(&xhat, &shape, self.value(gamma).data(), self.value(beta).data());
        let out = Tensor::new(shape, y)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        let v = self.push(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                grouping: Grouping::PerChannel,
                stats_from_input: from_input,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Instance normalization: statistics per sample and channel over the
    /// spatial axes. There is no running state and no mode switch.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check_affine("instance_norm", x, gamma, beta)?;
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (xhat, inv_std, _, _) = kernels::normalize_stats(xv, Grouping::PerInstance, eps)?;
        let y = kernels::channel_affine(&xhat, &shape, self.value(gamma).data(), self.value(beta).data());
        let out = Tensor::new(shape, y)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                grouping: Grouping::PerInstance,
                stats_from_input: true,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return dim_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            );
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * c).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale { x, c }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5("global_avg_pool")?;
        let sp = d * h * w;
        let data = self
            .value(x)
            .data()
            .chunks(sp)
            .map(|ch| ch.iter().sum::<f64>() / sp as f64)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool { x }, rg))
    }

    /// `y = x Wᵀ + b` with x `[N, F]`, W `[O, F]`, b `[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, f] = self.value(x).dims2("linear")?;
        let [o, wf] = self.value(w).dims2("linear")?;
        if f != wf {
            return dim_err("linear", format!("input has {f} features, weight expects {wf}"));
        }
        if self.value(b).numel() != o {
            return dim_err(
                "linear",
                format!("bias has {} entries, need {o}", self.value(b).numel()),
            );
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; n * o];
        for i in 0..n {
            let xr = &xd[i * f..(i + 1) * f];
            for j in 0..o {
                let wr = &wd[j * f..(j + 1) * f];
                out[i * o + j] = bd[j] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let out = Tensor::new(vec![n, o], out)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let [n, k] = self.value(x).dims2("softmax")?;
        let out = Tensor::new(vec![n, k], softmax_rows(self.value(x).data(), k))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax { x }, rg))
    }

    /// Scales each row of a `[N, F]` tensor to unit Euclidean length. An
    /// all-zero row stays zero.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let [n, f] = self.value(x).dims2("l2_normalize")?;
        let xd = self.value(x).data();
        let mut norms = Vec::with_capacity(n);
        let mut out = vec![0.0; n * f];
        for i in 0..n {
            let r = &xd[i * f..(i + 1) * f];
            let norm = r.iter().map(|a| a * a).sum::<f64>().sqrt();
            norms.push(norm);
            if norm > 0.0 {
                for (o, a) in out[i * f..(i + 1) * f].iter_mut().zip(r) {
                    *o = a / norm;
                }
            }
        }
        let out = Tensor::new(vec![n, f], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::L2Normalize { x, norms }, rg))
    }

    /// Records a scalar whose gradient with respect to `x` is already known.
    /// Used by fused loss functions.
    pub fn scalar_fn(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).numel() {
            return dim_err("scalar_fn", "gradient length differs from input size");
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { x, grad }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of variables used more
    /// than once accumulate.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv3d { x, w, b, geom } => {
                    let need_x = self.requires_grad(*x);
                    let (dx, dw, db) =
                        kernels::conv3d_backward(self.value(*x), self.value(*w), self.value(*b), *geom, &g, need_x)?;
                    if let Some(dx) = dx {
                        self.accumulate(&mut grads, *x, dx);
                    }
                    self.accumulate(&mut grads, *w, dw);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::MaxPool3d { x, argmax } => {
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for (&i, &gv) in argmax.iter().zip(&g) {
                        dx[i] += gv;
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Relu { x } => {
                    let dx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&a, &gv)| if a > 0.0 { gv } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    grouping,
                    stats_from_input,
                } => {
                    let (dx, dgamma, dbeta) = kernels::norm_backward(
                        &g,
                        xhat,
                        inv_std,
                        self.value(*gamma).data(),
                        self.value(*x).shape(),
                        *grouping,
                        *stats_from_input,
                    );
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *gamma, dgamma);
                    self.accumulate(&mut grads, *beta, dbeta);
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, *b, g.clone());
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Mul { a, b } => {
                    let da = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    let db = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Scale { x, c } => {
                    let dx = g.iter().map(|v| v * c).collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Sum { x } => {
                    let dx = vec![g[0]; self.value(*x).numel()];
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::GlobalAvgPool { x } => {
                    let xv = self.value(*x);
                    let sp: usize = xv.shape()[2..].iter().product();
                    let mut dx = vec![0.0; xv.numel()];
                    for (chunk, &gv) in dx.chunks_mut(sp).zip(&g) {
                        chunk.fill(gv / sp as f64);
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, f) = (xv.shape()[0], xv.shape()[1]);
                    let o = wv.shape()[0];
                    let (xd, wd) = (xv.data(), wv.data());
                    let mut dx = vec![0.0; n * f];
                    let mut dw = vec![0.0; o * f];
                    let mut db = vec![0.0; o];
                    for i in 0..n {
                        for j in 0..o {
                            let gv = g[i * o + j];
                            db[j] += gv;
                            for k in 0..f {
                                dx[i * f + k] += gv * wd[j * f + k];
                                dw[j * f + k] += gv * xd[i * f + k];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *w, dw);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Softmax { x } => {
                    let y = node.value.data();
                    let k = node.value.shape()[1];
                    let mut dx = vec![0.0; y.len()];
                    for ((dr, yr), gr) in dx.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::L2Normalize { x, norms } => {
                    let z = node.value.data();
                    let f = node.value.shape()[1];
                    let mut dx = vec![0.0; z.len()];
                    for (i, &norm) in norms.iter().enumerate() {
                        if norm == 0.0 {
                            continue;
                        }
                        let zr = &z[i * f..(i + 1) * f];
                        let gr = &g[i * f..(i + 1) * f];
                        let dot: f64 = zr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..f {
                            dx[i * f + k] = (gr[k] - zr[k] * dot) / norm;
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::ScalarFn { x, grad } => {
                    let dx = grad.iter().map(|v| v * g[0]).collect();
                    self.accumulate(&mut grads, *x, dx);
                }
            }
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}

pub(crate) fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (orow, xrow) in out.chunks_mut(k).zip(x.chunks(k)) {
        let m = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = (v - m).exp();
            z += *o;
        }
        orow.iter_mut().for_each(|o| *o /= z);
    }
    out
}
