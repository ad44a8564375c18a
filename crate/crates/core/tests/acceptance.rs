//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::oracles::{conv_direct, pair_count_auc, supcon_direct, t_cdf_max_deviation};
use common::{grad_error, grad_mismatch, randn, spaced, tree, weighted_sum};
use kneedg::experiment::{cmd_generate, cmd_paper_stats, cmd_run, ExperimentConfig, ModelKind, RunOptions};
use kneedg::gin::{augment, sample_gin, GinConfig};
use kneedg::losses::{cross_entropy, prediction_entropy, supcon_loss, ViewBatch};
use kneedg::metrics::{paired_t_one_sided, roc_auc};
use kneedg::network::{BlockSpec, Model, NetConfig, NormKind};
use kneedg::rng::RngStream;
use kneedg::tensor::{numeric_gradient, ConvGeom, NormMode, Tape, Tensor, Var};
use kneedg::training::{select_checkpoint, EpochLog};

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fmt_secs(d: Duration) -> String {
    let s = d.as_secs_f64();
    if s < 60.0 {
        format!("{s:.2}s")
    } else {
        format!("{}m{:02}s", (s / 60.0) as u64, (s % 60.0) as u64)
    }
}

fn criterion(id: u32, name: &str, budget: Duration, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let took = start.elapsed();
    let result = result.and_then(|d| {
        if took <= budget {
            Ok(d)
        } else {
            Err(format!("{d}; over the {} budget", fmt_secs(budget)))
        }
    });
    let (tag, detail) = match &result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} [{id}] {name}: {detail} ({})", fmt_secs(took));
    result.is_ok()
}

// 1 ---------------------------------------------------------------------

fn published_statistics() -> Check {
    let stats = cmd_paper_stats(Path::new(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/fixtures/paper_tables.csv"
    )))
    .map_err(|e| e.to_string())?;
    let printed_means = [
        ("baseline_source_val", "0.7392 ± 0.0293"),
        ("proposed_source_val", "0.7940 ± 0.0247"),
        ("baseline_target_val", "0.5216 ± 0.0275"),
        ("proposed_target_val", "0.6659 ± 0.0375"),
        ("baseline_source_test", "0.7129 ± 0.0443"),
        ("proposed_source_test", "0.7412 ± 0.0290"),
        ("baseline_target_test", "0.5287 ± 0.0317"),
        ("proposed_target_test", "0.7004 ± 0.0249"),
    ];
    for (col, want) in printed_means {
        let c = stats
            .columns
            .iter()
            .find(|c| c.name == col)
            .ok_or(format!("missing column {col}"))?;
        let got = format!("{:.4} ± {:.4}", c.mean, c.std);
        ensure(got == want, || format!("{col}: {got} != {want}"))?;
    }
    let printed_p = [
        ("source_val", 7.375096e-3),
        ("target_val", 6.664710e-6),
        ("source_test", 3.108700e-2),
        ("target_test", 6.046160e-8),
    ];
    let mut worst: f64 = 0.0;
    for (split, want) in printed_p {
        let p = stats
            .pairs
            .iter()
            .find(|p| p.name == split)
            .ok_or(format!("missing pair {split}"))?
            .test
            .p;
        let rel = (p / want - 1.0).abs();
        ensure(rel < 0.05, || format!("{split}: p {p:.4e} vs {want:.4e}"))?;
        worst = worst.max(rel);
    }
    Ok(format!(
        "8 mean ± std match to 4 decimals, 4 p-values within {:.2}% relative",
        100.0 * worst
    ))
}

// 2 ---------------------------------------------------------------------

const SEEDS: u64 = 20;

fn op_gradients() -> std::result::Result<(usize, f64), String> {
    type Build = Box<dyn Fn(&mut Tape, &[Var], u64) -> Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, bool, Build)> = vec![
        (
            "conv3d",
            vec![vec![1, 2, 5, 4, 6], vec![2, 2, 3, 3, 3], vec![2]],
            false,
            Box::new(|t, v, s| {
                let y = t
                    .conv3d(v[0], v[1], v[2], ConvGeom::new([1 + s as usize % 2; 3], [1; 3]))
                    .unwrap();
                weighted_sum(t, y, s)
            }),
        ),
        (
            "max_pool3d",
            vec![vec![1, 2, 6, 6, 6]],
            true,
            Box::new(|t, v, s| {
                let y = t.max_pool3d(v[0], [2; 3], [2; 3]).unwrap();
                weighted_sum(t, y, s)
            }),
        ),
        (
            "relu",
            vec![vec![1, 2, 3, 3, 3]],
            true,
            Box::new(|t, v, s| {
                let y = t.relu(v[0]);
                weighted_sum(t, y, s)
            }),
        ),
        (
            "batch_norm(train)",
            vec![vec![1, 2, 4, 4, 4], vec![2], vec![2]],
            false,
            Box::new(|t, v, s| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, NormMode::Train).unwrap();
                weighted_sum(t, y, s)
            }),
        ),
        (
            "batch_norm(eval)",
            vec![vec![1, 2, 4, 4, 4], vec![2], vec![2]],
            false,
            Box::new(|t, v, s| {
                let (mean, var) = ([0.3, -0.2], [1.7, 0.4]);
                let (y, _) = t
                    .batch_norm(v[0], v[1], v[2], 1e-5, NormMode::Eval { mean: &mean, var: &var })
                    .unwrap();
                weighted_sum(t, y, s)
            }),
        ),
        (
            "instance_norm",
            vec![vec![1, 2, 3, 3, 3], vec![2], vec![2]],
            false,
            Box::new(|t, v, s| {
                let y = t.instance_norm(v[0], v[1], v[2], 1e-5).unwrap();
                weighted_sum(t, y, s)
            }),
        ),
        (
            "add/mul/scale",
            vec![vec![1, 2, 2, 3, 2], vec![1, 2, 2, 3, 2]],
            false,
            Box::new(|t, v, s| {
                let a = t.add(v[0], v[1]).unwrap();
                let m = t.mul(a, v[1]).unwrap();
                let q = t.scale(m, -0.7);
                weighted_sum(t, q, s)
            }),
        ),
        (
            "mean",
            vec![vec![1, 2, 2, 3, 2]],
            false,
            Box::new(|t, v, _| {
                let sq = t.mul(v[0], v[0]).unwrap();
                t.mean(sq)
            }),
        ),
        (
            "global_avg_pool",
            vec![vec![1, 2, 2, 3, 2]],
            false,
            Box::new(|t, v, s| {
                let g = t.global_avg_pool(v[0]).unwrap();
                weighted_sum(t, g, s)
            }),
        ),
        (
            "linear",
            vec![vec![3, 4], vec![2, 4], vec![2]],
            false,
            Box::new(|t, v, s| {
                let y = t.linear(v[0], v[1], v[2]).unwrap();
                weighted_sum(t, y, s)
            }),
        ),
        (
            "softmax",
            vec![vec![3, 4]],
            false,
            Box::new(|t, v, s| {
                let y = t.softmax(v[0]).unwrap();
                weighted_sum(t, y, s)
            }),
        ),
        (
            "l2_normalize",
            vec![vec![3, 4]],
            false,
            Box::new(|t, v, s| {
                let y = t.l2_normalize(v[0]).unwrap();
                weighted_sum(t, y, s)
            }),
        ),
        (
            "cross_entropy",
            vec![vec![5, 2]],
            false,
            Box::new(|t, v, _| cross_entropy(t, v[0], &[0, 1, 1, 0, 1]).unwrap()),
        ),
        (
            "supcon_loss",
            vec![vec![6, 3]],
            false,
            Box::new(|t, v, _| {
                let batch = ViewBatch::new(vec![0, 0, 1, 1, 0, 1], vec![0, 0, 1, 1, 2, 3]).unwrap();
                let z = t.l2_normalize(v[0]).unwrap();
                supcon_loss(t, z, &batch, 0.3).unwrap()
            }),
        ),
    ];
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (name, shapes, distinct, build) in &cases {
        for seed in 0..SEEDS {
            let mut rng = RngStream::new(seed, format!("acceptance/{name}"));
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| {
                    if *distinct {
                        spaced(&mut rng, s)
                    } else {
                        randn(&mut rng, s)
                    }
                })
                .collect();
            let err = grad_error(&inputs, 1e-3, |t, v| build(t, v, seed));
            ensure(err < 1e-4, || format!("{name} seed {seed}: relative error {err:.2e}"))?;
            worst = worst.max(err);
        }
        count += 1;
    }
    Ok((count, worst))
}

fn network_gradients() -> std::result::Result<f64, String> {
    let tiny = NetConfig {
        input_shape: [1, 6, 6, 6],
        stem_channels: 2,
        n_residual_blocks: 2,
        channel_schedule: vec![
            BlockSpec { channels: 2, stride: 1 },
            BlockSpec { channels: 3, stride: 2 },
        ],
        ..NetConfig::default()
    };
    let loss = |t: &mut Tape, m: &Model, x: Var, seed: u64| {
        let out = m.forward(t, x, true).unwrap();
        let a = weighted_sum(t, out.logits, seed);
        let b = weighted_sum(t, out.embedding, seed + 100);
        (t.add(a, b).unwrap(), out.params)
    };
    let value = |m: &Model, x: &Tensor, seed: u64| {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let (l, _) = loss(&mut t, m, xv, seed);
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        for kind in [NormKind::Batch, NormKind::Instance] {
            let m = Model::build(
                &NetConfig {
                    norm_kind: kind,
                    ..tiny.clone()
                },
                &mut RngStream::new(seed, "init"),
            )
            .unwrap();
            let x = randn(&mut RngStream::new(seed, "acceptance/x"), &[1, 1, 6, 6, 6]);
            let mut t = Tape::new();
            let xv = t.param(x.clone());
            let (l, params) = loss(&mut t, &m, xv, seed);
            let grads = t.backward(l).unwrap();
            let num = numeric_gradient(|p| value(&m, p, seed), &x, 1e-6);
            let mut errs = vec![("input".to_string(), grad_mismatch(grads.tensor(xv).data(), num.data()))];
            for (i, name) in m.param_names().iter().enumerate() {
                let num = numeric_gradient(
                    |p| {
                        let mut mm = m.clone();
                        mm.params_mut()[i] = p.clone();
                        value(&mm, &x, seed)
                    },
                    &m.params()[i],
                    1e-6,
                );
                errs.push((name.clone(), grad_mismatch(grads.tensor(params[i]).data(), num.data())));
            }
            for (name, e) in errs {
                ensure(e < 1e-4, || format!("network {kind:?} seed {seed} {name}: {e:.2e}"))?;
                worst = worst.max(e);
            }
        }
    }
    Ok(worst)
}

fn gradient_suite() -> Check {
    let (ops, op_worst) = op_gradients()?;
    let net_worst = network_gradients()?;
    Ok(format!(
        "{ops} op groups and the full network (batch and instance norm), {SEEDS} seeds each; worst relative error {:.1e}",
        op_worst.max(net_worst)
    ))
}

// 3 ---------------------------------------------------------------------

fn oracle_equivalence() -> Check {
    let mut rng = RngStream::new(3, "acceptance/conv");
    let mut conv_worst: f64 = 0.0;
    for _ in 0..60 {
        let n = 1 + rng.below(2);
        let (cin, cout) = (1 + rng.below(3), 1 + rng.below(3));
        let dims: Vec<usize> = (0..3).map(|_| 1 + rng.below(5)).collect();
        let k: Vec<usize> = dims.iter().map(|&d| 1 + rng.below(d.min(3))).collect();
        let stride = [1 + rng.below(2), 1 + rng.below(2), 1 + rng.below(2)];
        let pad: [usize; 3] = std::array::from_fn(|i| rng.below(k[i].min(2)));
        let x = randn(&mut rng, &[n, cin, dims[0], dims[1], dims[2]]);
        let w = randn(&mut rng, &[cout, cin, k[0], k[1], k[2]]);
        let b = randn(&mut rng, &[cout]);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv3d(xv, wv, bv, ConvGeom::new(stride, pad)).unwrap();
        let o = conv_direct(&x, &w, &b, stride, pad);
        ensure(t.value(y).shape() == o.shape(), || "conv shape mismatch".into())?;
        for (a, b) in t.value(y).data().iter().zip(o.data()) {
            conv_worst = conv_worst.max((a - b).abs());
        }
    }
    ensure(conv_worst <= 1e-12, || format!("conv3d deviates by {conv_worst:.2e}"))?;

    let mut rng = RngStream::new(4, "acceptance/auc");
    for case in 0..2000 {
        let n = 2 + rng.below(19);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
        labels[0] = 0;
        labels[1] = 1;
        let levels = 1 + rng.below(8);
        let scores: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 * 0.25).collect();
        let (a, b) = (roc_auc(&scores, &labels).unwrap(), pair_count_auc(&scores, &labels));
        ensure(a == b, || format!("AUC case {case}: {a} vs pair count {b}"))?;
    }

    let supcon = |rows: &[Vec<f64>], labels: &[usize], tau: f64| {
        let mut t = Tape::new();
        let v = t.constant(Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap());
        let batch = ViewBatch::new(labels.to_vec(), (0..rows.len()).collect()).unwrap();
        let l = supcon_loss(&mut t, v, &batch, tau).unwrap();
        t.value(l).item()
    };
    let three = supcon(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 0, 1], 1.0);
    ensure((three - 0.313262).abs() < 1e-6, || format!("three-row case {three}"))?;
    let mut rng = RngStream::new(5, "acceptance/supcon");
    let mut sc_worst: f64 = 0.0;
    for _ in 0..100 {
        let m = 4 + rng.below(8);
        let f = 1 + rng.below(6);
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let r: Vec<f64> = (0..f).map(|_| rng.normal()).collect();
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.into_iter().map(|v| v / n).collect()
            })
            .collect();
        let mut labels: Vec<usize> = (0..m).map(|_| rng.below(2)).collect();
        labels[0] = labels[1];
        let tau = rng.uniform_range(0.2, 2.0);
        sc_worst = sc_worst.max((supcon(&rows, &labels, tau) - supcon_direct(&rows, &labels, tau)).abs());
    }
    ensure(sc_worst < 1e-6, || format!("supcon deviates by {sc_worst:.2e}"))?;

    let mut t_worst: f64 = 0.0;
    for df in 1..=10 {
        t_worst = t_worst.max(t_cdf_max_deviation(df));
    }
    ensure(t_worst < 1e-8, || format!("t CDF deviates by {t_worst:.2e}"))?;
    Ok(format!(
        "conv3d {conv_worst:.1e}, AUC exact on 2000 cases, supcon {sc_worst:.1e} (three-row {three:.6}), t CDF {t_worst:.1e}"
    ))
}

// 4 ---------------------------------------------------------------------

fn mechanism_invariants() -> Check {
    let gin = GinConfig::default();
    for seed in 0..20 {
        let x = randn(&mut RngStream::new(seed, "acceptance/gin"), &[1, 1, 6, 6, 6]);
        let g = sample_gin(&mut RngStream::new(seed, "acceptance/gin-net"), 1, &gin).unwrap();
        ensure(augment(&x, &g, 0.0, &gin).unwrap() == x, || {
            format!("GIN alpha 0 changed seed {seed}")
        })?;
    }

    let mut in_worst: f64 = 0.0;
    let mut rng = RngStream::new(6, "acceptance/in");
    for _ in 0..20 {
        let base = randn(&mut rng, &[2, 3, 2, 3, 3]);
        let mut moved = base.clone();
        for n in 0..2 {
            let (a, s) = (rng.uniform_range(0.05, 20.0), rng.uniform_range(-50.0, 50.0));
            moved.data_mut()[n * 54..(n + 1) * 54]
                .iter_mut()
                .for_each(|v| *v = a * *v + s);
        }
        let mut t = Tape::new();
        let (g, b) = (t.constant(Tensor::full(&[3], 1.0)), t.constant(Tensor::zeros(&[3])));
        let (x0, x1) = (t.constant(base), t.constant(moved));
        let y0 = t.instance_norm(x0, g, b, 0.0).unwrap();
        let y1 = t.instance_norm(x1, g, b, 0.0).unwrap();
        for (p, q) in t.value(y0).data().iter().zip(t.value(y1).data()) {
            in_worst = in_worst.max((p - q).abs());
        }
    }
    ensure(in_worst < 1e-9, || {
        format!("instance norm affine deviation {in_worst:.2e}")
    })?;

    let cfg = NetConfig {
        input_shape: [1, 6, 6, 6],
        stem_channels: 2,
        n_residual_blocks: 2,
        channel_schedule: vec![
            BlockSpec { channels: 2, stride: 1 },
            BlockSpec { channels: 3, stride: 2 },
        ],
        norm_kind: NormKind::Instance,
        ..NetConfig::default()
    };
    let logits = |m: &Model, x: &Tensor| {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let out = m.forward(&mut t, v, true).unwrap();
        t.value(out.logits).clone()
    };
    let mut batch_worst: f64 = 0.0;
    for seed in 0..10 {
        let m = Model::build(&cfg, &mut RngStream::new(seed, "init")).unwrap();
        let mut rng = RngStream::new(seed, "acceptance/batch");
        let a = randn(&mut rng, &[1, 1, 6, 6, 6]);
        let others = randn(&mut rng, &[3, 1, 6, 6, 6]);
        let alone = logits(&m, &a);
        let mixed = logits(
            &m,
            &Tensor::stack(&[others.sample(0), others.sample(1), a, others.sample(2)]).unwrap(),
        );
        for k in 0..2 {
            batch_worst = batch_worst.max((alone.data()[k] - mixed.data()[4 + k]).abs());
        }
    }
    ensure(batch_worst < 1e-9, || {
        format!("instance-norm logits depend on the batch: {batch_worst:.2e}")
    })?;

    let h = prediction_entropy(&Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap()).unwrap();
    ensure((h - std::f64::consts::LN_2).abs() < 1e-12, || {
        format!("uniform entropy {h}")
    })?;

    let log = |acc: f64, ent: f64| EpochLog {
        epoch: 0,
        train_loss: 0.0,
        source_val_accuracy: acc,
        target_val_entropy: ent,
        checkpoint: 0,
    };
    let s = select_checkpoint(&[log(0.70, 0.60), log(0.72, 0.50), log(0.60, 0.30)], 0.65).unwrap();
    ensure((s.index, s.fallback) == (1, false), || {
        format!("threshold example picked {s:?}")
    })?;
    let s = select_checkpoint(&[log(0.8, 0.4), log(0.9, 0.4), log(0.7, 0.4)], 0.65).unwrap();
    ensure(s.index == 0, || format!("tie example picked {s:?}"))?;
    let s = select_checkpoint(&[log(0.70, 0.1), log(0.72, 0.2)], 0.99).unwrap();
    ensure((s.index, s.fallback) == (1, true), || {
        format!("fallback example picked {s:?}")
    })?;

    Ok(format!(
        "GIN identity bit-exact, IN affine {in_worst:.1e}, batch composition {batch_worst:.1e}, H(uniform) = ln 2, selection examples hold"
    ))
}

// 5 ---------------------------------------------------------------------

const CLAIM_SEEDS: [u64; 3] = [1, 2, 3];

fn synthetic_claim() -> Check {
    let mut baseline = Vec::new();
    let mut proposed = Vec::new();
    let mut worst_class0: f64 = 0.0;
    for seed in CLAIM_SEEDS {
        let start = Instant::now();
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut cfg = ExperimentConfig::synthetic(seed);
        cfg.output_dir = Some(dir.path().to_path_buf());
        cmd_generate(&cfg).map_err(|e| e.to_string())?;
        let out = cmd_run(&cfg, &RunOptions::default()).map_err(|e| e.to_string())?;
        ensure(out.failures.is_empty(), || format!("seed {seed}: {:?}", out.failures))?;
        let acc = |m: ModelKind| -> Vec<f64> {
            let mut r: Vec<_> = out.results_for(m).collect();
            r.sort_by_key(|r| r.fold);
            r.iter().map(|r| r.report("target_test").accuracy).collect()
        };
        let (b, p) = (acc(ModelKind::Baseline), acc(ModelKind::Proposed));
        let c0 = out
            .results_for(ModelKind::Baseline)
            .map(|r| r.class0_rate("target_test"))
            .fold(0.0, f64::max);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "      seed {seed}: target test baseline {:.4}, proposed {:.4}, baseline max class-0 rate {c0:.2} ({})",
            mean(&b),
            mean(&p),
            fmt_secs(start.elapsed())
        );
        worst_class0 = worst_class0.max(c0);
        baseline.extend(b);
        proposed.extend(p);
    }
    ensure(baseline.len() == 21 && proposed.len() == 21, || {
        format!("{} pairs, expected 21", baseline.len())
    })?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gain = mean(&proposed) - mean(&baseline);
    let test = paired_t_one_sided(&baseline, &proposed).map_err(|e| e.to_string())?;
    let detail = format!(
        "target test {:.4} vs {:.4} (gain {gain:+.4}), paired p = {:.2e} over 21 pairs, baseline max class-0 rate {worst_class0:.2}",
        mean(&proposed),
        mean(&baseline),
        test.p
    );
    ensure(gain >= 0.05, || format!("{detail}; gain below 0.05"))?;
    ensure(test.p < 0.05, || format!("{detail}; p not below 0.05"))?;
    ensure(worst_class0 > 0.8, || format!("{detail}; no class-0 collapse"))?;
    Ok(detail)
}

// 6 ---------------------------------------------------------------------

fn determinism() -> Check {
    let run = |jobs: usize| -> std::result::Result<_, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut cfg = ExperimentConfig::synthetic(11);
        cfg.baseline.epochs = 3;
        cfg.proposed.epochs = 3;
        cfg.output_dir = Some(dir.path().to_path_buf());
        cmd_generate(&cfg).map_err(|e| e.to_string())?;
        let opts = RunOptions {
            folds: Some(vec![0, 1]),
            jobs,
            ..RunOptions::default()
        };
        cmd_run(&cfg, &opts).map_err(|e| e.to_string())?;
        Ok(tree(dir.path()))
    };
    let first = run(1)?;
    let again = run(1)?;
    let parallel = run(4)?;
    let summaries = ["baseline/summary.csv", "proposed/summary.csv", "comparison.csv"];
    for name in summaries {
        ensure(first.contains_key(name), || format!("{name} missing"))?;
        ensure(first[name] == again[name], || {
            format!("{name} differs between repeated runs")
        })?;
        ensure(first[name] == parallel[name], || {
            format!("{name} differs between --jobs 1 and --jobs 4")
        })?;
    }
    ensure(first == again && first == parallel, || {
        "some result file differs".into()
    })?;
    Ok(format!(
        "{} files byte-identical across two --jobs 1 runs and a --jobs 4 run",
        first.len()
    ))
}

fn main() {
    let minute = Duration::from_secs(60);
    let results = [
        criterion(1, "published statistics", Duration::from_secs(1), published_statistics),
        criterion(2, "gradient suite", 2 * minute, gradient_suite),
        criterion(3, "oracle equivalence", 10 * minute, oracle_equivalence),
        criterion(4, "mechanism invariants", 10 * minute, mechanism_invariants),
        criterion(5, "synthetic claim", 60 * minute, synthetic_claim),
        criterion(6, "determinism", 10 * minute, determinism),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
