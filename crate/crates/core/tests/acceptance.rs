//! Acceptance gate. Each test prints one `PASS`/`FAIL` line to stderr
//! (bypassing output capture) and then asserts its criterion.

mod common;

use std::io::Write;
use std::path::PathBuf;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::grads::{lenet_report, op_reports, TOLERANCE};
use common::trials::collapse_trial;
use common::{rng, uniform};
use kflo::kflo::KfloConfig;
use kflo::model::{build_lenet5, tl_init, Arch, ModelGraph, NodeParams};
use kflo::train::{load_mnist_idx, train, Dataset, MetricsRecord, TrainConfig};

fn report(n: usize, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "[{verdict}] criterion {n}: {title}: {detail}");
}

fn info(n: usize, line: &str) {
    let _ = writeln!(std::io::stderr().lock(), "       criterion {n}: {line}");
}

#[test]
fn criterion_1_collapse_equivalence() {
    let start = Instant::now();
    let worst = (0..500u64).map(|s| (collapse_trial(s), s)).max_by(|a, b| a.0.deviation.total_cmp(&b.0.deviation));
    let (trial, seed) = worst.unwrap();
    let elapsed = start.elapsed();
    let pass = trial.deviation <= 1e-5 && elapsed < Duration::from_secs(60);
    report(
        1,
        "collapse equivalence, 500 trials",
        pass,
        &format!("max_rel_deviation={:e} (seed {seed}) in {:.2}s", trial.deviation, elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_2_gradient_correctness() {
    let start = Instant::now();
    let mut reports = op_reports();
    reports.push(("lenet5 2x4".into(), lenet_report(KfloConfig::new(2, 4.0).unwrap(), 5e-4)));
    reports.push(("lenet5 3x2".into(), lenet_report(KfloConfig::new(3, 2.0).unwrap(), 5e-4)));
    let elapsed = start.elapsed();
    let mut pass = elapsed < Duration::from_secs(120);
    let mut worst = (0.0f64, String::new());
    for (name, r) in &reports {
        for p in &r.params {
            pass &= p.coords >= 32 || p.coords == p.numel;
            if p.max_rel_error > worst.0 || p.max_rel_error.is_nan() {
                worst = (p.max_rel_error, format!("{name}/{}", p.name));
            }
        }
        pass &= r.max_rel_error() <= TOLERANCE;
    }
    report(
        2,
        "finite-difference gradients",
        pass,
        &format!(
            "{} checks, max_rel_error={:e} at {} in {:.2}s",
            reports.len(),
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_transfer_init_identity() {
    let nets: Vec<ModelGraph<f32>> = (0..2)
        .map(|i| build_lenet5::<f32>(KfloConfig::VANILLA, 10, 1, 70 + i).unwrap().collapse_model().unwrap())
        .collect();
    let mut tl = build_lenet5::<f32>(KfloConfig::new(2, 2.0).unwrap(), 10, 1, 99).unwrap();
    tl_init(&mut tl, &nets).unwrap();

    let mut r = rng(3);
    let mut max_abs = 0.0f64;
    for _ in 0..100 {
        let x = uniform::<f32>(&[1, 1, 28, 28], &mut r);
        let (a, b) = (tl.forward(&x).unwrap(), nets[0].forward(&x).unwrap());
        for (p, q) in a.data().iter().zip(b.data()) {
            max_abs = max_abs.max((*p as f64 - *q as f64).abs());
        }
    }
    let deployed = tl.collapse_model().unwrap();
    let mut kernels_exact = true;
    for (i, node) in deployed.nodes().iter().enumerate() {
        if let (NodeParams::Plain { kernel, .. }, NodeParams::Plain { kernel: k0, .. }) =
            (node.params(), nets[0].nodes()[i].params())
        {
            let (a, b) = (deployed.params().value(*kernel), nets[0].params().value(*k0));
            kernels_exact &= a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        }
    }
    let pass = max_abs <= 1e-6 && kernels_exact;
    report(
        3,
        "stacked init reproduces network #0",
        pass,
        &format!("max_abs_logit_diff={max_abs:e} over 100 inputs, kernels bit-identical={kernels_exact}"),
    );
    assert!(pass);
}

#[test]
fn criterion_4_deployment_neutrality() {
    let mut pass = true;
    let mut checked = 0;
    for (arch, input) in [(Arch::Lenet5, [1, 28, 28]), (Arch::SmallCnn, [3, 32, 32])] {
        let base = arch.build::<f32>(KfloConfig::VANILLA, 10, input, 0).unwrap();
        let (params, macs) = (base.param_count(), base.inference_macs(&input).unwrap());
        for b in 1..=4 {
            for rho in [0.5, 1.0, 2.0, 4.0] {
                let m = arch.build::<f32>(KfloConfig::new(b, rho).unwrap(), 10, input, 0).unwrap();
                let d = m.collapse_model().unwrap();
                pass &= d.param_count() == params && m.deployed_param_count() == params;
                pass &= d.inference_macs(&input).unwrap() == macs;
                checked += 1;
            }
        }
        info(4, &format!("{arch}: deployed params={params} inference MACs={macs}"));
    }
    report(4, "deployed cost independent of (B, rho)", pass, &format!("{checked} configurations match B=1"));
    assert!(pass);
}

#[test]
fn criterion_5_training_cost() {
    let model = build_lenet5::<f32>(KfloConfig::new(2, 4.0).unwrap(), 10, 1, 0).unwrap();
    let input = [1, 28, 28];
    let batches = [8usize, 16, 32, 64, 128, 256];
    let mut kernel_totals = Vec::new();
    let mut pass = true;
    for &batch in &batches {
        let costs = model.step_costs(&input, batch).unwrap();
        let kernel: u64 = costs.iter().map(|(_, c)| c.cascade_kernel_filtering).sum();
        let feature: u64 = costs.iter().map(|(_, c)| c.cascade_feature_filtering).sum();
        let conv_kernel: u64 =
            costs.iter().filter(|(n, _)| n.starts_with("conv")).map(|(_, c)| c.cascade_kernel_filtering).sum();
        let conv_feature: u64 =
            costs.iter().filter(|(n, _)| n.starts_with("conv")).map(|(_, c)| c.cascade_feature_filtering).sum();
        let per_layer: Vec<String> = costs
            .iter()
            .map(|(n, c)| format!("{n} {}/{}", c.cascade_kernel_filtering, c.cascade_feature_filtering))
            .collect();
        info(
            5,
            &format!(
                "batch {batch}: cascade MACs kernel/feature total {kernel}/{feature} [{}]; conv layers only {conv_kernel}/{conv_feature}",
                per_layer.join(", ")
            ),
        );
        pass &= kernel < feature;
        kernel_totals.push(kernel);
    }
    let batch_independent = kernel_totals.windows(2).all(|w| w[0] == w[1]);
    pass &= batch_independent;

    // Wall-clock sanity run: collapse-then-filter versus filter-then-cascade.
    for batch in [8usize, 64] {
        let x = uniform::<f32>(&[batch, 1, 28, 28], &mut rng(batch as u64));
        let time = |f: &dyn Fn()| {
            let start = Instant::now();
            for _ in 0..5 {
                f();
            }
            start.elapsed().as_secs_f64() / 5.0 * 1e3
        };
        let kernel_ms = time(&|| {
            model.forward(&x).unwrap();
        });
        let feature_ms = time(&|| {
            model.forward_feature_filtering(&x).unwrap();
        });
        let collapse_ms = time(&|| {
            model.effective_kernels().unwrap();
        });
        info(
            5,
            &format!(
                "batch {batch}: forward with kernel filtering {kernel_ms:.2} ms (collapse alone {collapse_ms:.2} ms), with feature filtering {feature_ms:.2} ms"
            ),
        );
    }
    report(
        5,
        "kernel-filtering cascade MACs batch-independent and below feature filtering for batch >= 8",
        pass,
        &format!(
            "batch-independent={batch_independent}, kernel-filtering total {} MACs vs feature filtering {} at batch 8",
            kernel_totals[0],
            model.step_costs(&input, 8).unwrap().iter().map(|(_, c)| c.cascade_feature_filtering).sum::<u64>()
        ),
    );
    assert!(pass, "fully connected cascades cost more over the kernel than over the features at small batch");
}

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn mnist() -> &'static (Dataset, Dataset) {
    static DATA: OnceLock<(Dataset, Dataset)> = OnceLock::new();
    DATA.get_or_init(|| {
        let d = mnist_dir();
        (
            load_mnist_idx(d.join("train-images-idx3-ubyte.gz"), d.join("train-labels-idx1-ubyte.gz")).unwrap(),
            load_mnist_idx(d.join("t10k-images-idx3-ubyte.gz"), d.join("t10k-labels-idx1-ubyte.gz")).unwrap(),
        )
    })
}

fn learning_cfg() -> TrainConfig {
    TrainConfig {
        lr: 0.005,
        momentum: 0.9,
        batch_size: 16,
        epochs: 3,
        seed: 7,
        ..TrainConfig::default()
    }
}

struct Run {
    bytes: Vec<u8>,
    records: Vec<MetricsRecord>,
    seconds: f64,
}

fn learning_run(kflo: KfloConfig) -> Run {
    let (train_set, test_set) = mnist();
    let cfg = learning_cfg();
    let start = Instant::now();
    let mut model = build_lenet5::<f32>(kflo, 10, 1, cfg.seed).unwrap();
    let report = train(&mut model, train_set, Some(test_set), &cfg).unwrap();
    Run {
        bytes: model.to_bytes(),
        records: report.records,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn first_runs() -> &'static (Run, Run) {
    static RUNS: OnceLock<(Run, Run)> = OnceLock::new();
    RUNS.get_or_init(|| (learning_run(KfloConfig::VANILLA), learning_run(KfloConfig::new(2, 4.0).unwrap())))
}

#[test]
fn criterion_6_desk_scale_learning() {
    let (train_set, test_set) = mnist();
    let (vanilla, kflo) = first_runs();
    let va = vanilla.records.last().unwrap().test_acc;
    let ka = kflo.records.last().unwrap().test_acc;
    for (name, run) in [("vanilla", vanilla), ("kflo 2x4", kflo)] {
        for r in &run.records {
            info(6, &format!("{name}: {r}"));
        }
    }
    let seconds = vanilla.seconds + kflo.seconds;
    let sizes = train_set.len() == 2000 && test_set.len() == 1000;
    let pass = sizes && va >= 0.90 && ka >= va - 0.005 && seconds < 600.0;
    report(
        6,
        "LeNet-5 on 2000 MNIST samples, 3 epochs, seed 7",
        pass,
        &format!(
            "vanilla test_acc={va:.4}, kflo 2x4 test_acc={ka:.4} (kflo >= vanilla: {}), {seconds:.1}s",
            ka >= va
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_determinism() {
    let (vanilla, kflo) = first_runs();
    let mut pass = true;
    for (first, cfg) in [(vanilla, KfloConfig::VANILLA), (kflo, KfloConfig::new(2, 4.0).unwrap())] {
        let second = learning_run(cfg);
        let strip = |r: &[MetricsRecord]| r.iter().map(MetricsRecord::without_timing).collect::<Vec<_>>();
        let same = first.bytes == second.bytes && strip(&first.records) == strip(&second.records);
        info(7, &format!("{cfg}: model bytes and metrics identical={same}"));
        pass &= same;
    }
    report(7, "repeated seeded runs are bit-identical", pass, "model files and metrics (excluding wall time) compared");
    assert!(pass);
}

#[test]
fn criterion_8_ablation_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("ablation.txt");
    let out = Command::new(env!("CARGO_BIN_EXE_kflo"))
        .args(["ablate", "--data", "mnist", "--data-dir"])
        .arg(mnist_dir())
        .args(["--fraction", "0.25", "--epochs", "1", "--batch-size", "16", "--lr", "0.005", "--seed", "7"])
        .args(["--depths", "2,3", "--rhos", "1,2,4", "--out-table"])
        .arg(&table)
        .output()
        .unwrap();
    let text = std::fs::read_to_string(&table).unwrap_or_default();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    for line in text.lines() {
        info(8, line);
    }
    let expected = ["1x1", "2x1", "2x2", "2x4", "3x1", "3x2", "3x4"];
    let pass = out.status.success()
        && rows.len() == expected.len()
        && rows.iter().zip(expected).all(|(r, e)| r.split_whitespace().next() == Some(e));
    report(8, "ablation sweep emits a comparison table", pass, &format!("{} rows, exit {:?}", rows.len(), out.status.code()));
    assert!(pass);
}
