#![allow(dead_code)]

pub mod oracles;

use kneedg::rng::RngStream;
use kneedg::tensor::{numeric_gradient, Tape, Tensor, Var};

pub fn randn(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Distinct values spaced at least 0.01 apart, in random order. Keeps
/// max-pool argmaxes stable under finite-difference probes.
pub fn spaced(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * 0.013).collect();
    rng.shuffle(&mut v);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Compares backward() against central differences for every input of
/// `build`, which must return a scalar. Returns the worst relative error.
pub fn grad_error(inputs: &[Tensor], step: f64, build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.tensor(vars[k]);
        let numeric = numeric_gradient(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| t.param(if j == k { probe.clone() } else { x.clone() }))
                    .collect();
                let l = build(&mut t, &vs);
                t.value(l).item()
            },
            input,
            step,
        );
        worst = worst.max(grad_mismatch(analytic.data(), numeric.data()));
    }
    worst
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖)` with the denominator floored
/// at 1e-4. Gradients that vanish identically (a bias feeding batch norm)
/// would otherwise divide finite-difference round-off by zero.
pub fn grad_mismatch(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-4)
}

/// `Σ y ⊙ r` for a fixed random weight tensor `r`, so every output element
/// carries a distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let mut rng = RngStream::new(seed, "weights");
    let r = randn(&mut rng, tape.value(y).shape());
    let rv = tape.constant(r);
    let p = tape.mul(y, rv).unwrap();
    tape.sum(p)
}

/// A seconds-scale experiment: 7 pairs of 4×8×8 volumes, 3 folds, 2 epochs.
pub fn small_experiment(seed: u64, out: &std::path::Path) -> kneedg::experiment::ExperimentConfig {
    use kneedg::network::BlockSpec;
    let mut cfg = kneedg::experiment::ExperimentConfig::synthetic(seed);
    cfg.cohort.n_pairs = 7;
    cfg.cohort.volume_dims = [4, 8, 8];
    cfg.net.input_shape = [1, 4, 8, 8];
    cfg.net.stem_channels = 2;
    cfg.net.stem_stride = 1;
    cfg.net.channel_schedule = vec![
        BlockSpec { channels: 2, stride: 1 },
        BlockSpec { channels: 4, stride: 2 },
    ];
    cfg.n_folds = 3;
    cfg.source_val_size = 2;
    cfg.baseline.epochs = 2;
    cfg.proposed.epochs = 2;
    cfg.proposed.gin.as_mut().unwrap().views_per_image = 2;
    cfg.output_dir = Some(out.to_path_buf());
    cfg
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn tree(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(root: &std::path::Path, d: &std::path::Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
