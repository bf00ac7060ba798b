//! Finite-difference checks for every taped operation.

use kflo::autodiff::{finite_diff_check, FdOptions, GradCheckReport, ParamClass, ParamStore, Tape, Var};
use kflo::kflo::{collapse_on_tape, expand, KfloConfig};
use kflo::model::build_lenet5;
use kflo::tensor::{ConvGeometry, Reduction, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{rng, uniform};

pub const TOLERANCE: f64 = 1e-3;

pub fn options() -> FdOptions {
    FdOptions {
        eps: 1e-5,
        samples_per_tensor: 32,
        seed: 5,
    }
}

/// Distinct values spaced at least `2 / n` apart, in random order, so small
/// perturbations never change a max-pool winner.
fn distinct(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| 2.0 * i as f64 / n as f64 - 1.0 + 0.5 / n as f64).collect();
    v.shuffle(&mut rng(seed));
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Values bounded away from zero so ReLU kinks are never crossed.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| {
        let m: f64 = r.gen_range(0.05..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn half_sum_squares(tape: &mut Tape<f64>, v: Var) -> Var {
    let s = tape.sum_squares(v);
    tape.scale(s, 0.5)
}

type Build = Box<dyn Fn(&ParamStore<f64>, &mut Tape<f64>) -> Var>;

fn check(params: Vec<(&str, Tensor<f64>)>, build: Build) -> GradCheckReport {
    let mut store = ParamStore::new();
    for (name, t) in params {
        store.push(name, ParamClass::Plain, t);
    }
    finite_diff_check(
        &mut store,
        |p| {
            let mut tape = Tape::new();
            let loss = build(p, &mut tape);
            Ok((tape, loss))
        },
        &options(),
    )
    .expect("gradient check runs")
}

fn id(p: &ParamStore<f64>, name: &str) -> kflo::autodiff::ParamId {
    p.find(name).unwrap()
}

fn conv_case(geom: ConvGeometry, cin: usize, cout: usize, k: usize, seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let x = uniform::<f64>(&[2, cin, 7, 6], &mut r);
    let w = uniform::<f64>(&[cout, cin / geom.groups, k, k], &mut r);
    check(
        vec![("x", x), ("w", w)],
        Box::new(move |p, t| {
            let x = t.param(p, id(p, "x"));
            let w = t.param(p, id(p, "w"));
            let y = t.conv2d(x, w, geom).unwrap();
            half_sum_squares(t, y)
        }),
    )
}

/// One report per operation, named.
pub fn op_reports() -> Vec<(String, GradCheckReport)> {
    let mut out = Vec::new();
    out.push(("conv2d".to_string(), conv_case(ConvGeometry::trivial(), 3, 4, 3, 1)));
    out.push((
        "conv2d strided padded".to_string(),
        conv_case(ConvGeometry::trivial().with_stride(2, 1).with_padding(1, 2), 2, 3, 3, 2),
    ));
    out.push((
        "conv2d grouped dilated".to_string(),
        conv_case(ConvGeometry::trivial().with_groups(2).with_dilation(2, 1), 4, 6, 2, 3),
    ));
    out.push((
        "conv2d depthwise".to_string(),
        conv_case(ConvGeometry::trivial().with_groups(3).with_padding(1, 1), 3, 3, 3, 4),
    ));

    let mut r = rng(10);
    out.push((
        "pointwise_conv1d".to_string(),
        check(
            vec![("x", uniform(&[2, 5, 9], &mut r)), ("k", uniform(&[3, 5, 1], &mut r))],
            Box::new(|p, t| {
                let x = t.param(p, id(p, "x"));
                let k = t.param(p, id(p, "k"));
                let y = t.pointwise_conv1d(x, k).unwrap();
                half_sum_squares(t, y)
            }),
        ),
    ));
    out.push((
        "fc".to_string(),
        check(
            vec![("x", uniform(&[3, 7], &mut r)), ("w", uniform(&[4, 7], &mut r))],
            Box::new(|p, t| {
                let x = t.param(p, id(p, "x"));
                let w = t.param(p, id(p, "w"));
                let y = t.fc(x, w).unwrap();
                half_sum_squares(t, y)
            }),
        ),
    ));
    out.push((
        "bias_add".to_string(),
        check(
            vec![("x", uniform(&[2, 3, 4, 2], &mut r)), ("b", uniform(&[3], &mut r))],
            Box::new(|p, t| {
                let x = t.param(p, id(p, "x"));
                let b = t.param(p, id(p, "b"));
                let y = t.bias_add(x, b).unwrap();
                half_sum_squares(t, y)
            }),
        ),
    ));
    out.push((
        "reshape".to_string(),
        check(
            vec![("x", uniform(&[2, 3, 4], &mut r)), ("w", uniform(&[5, 12], &mut r))],
            Box::new(|p, t| {
                let x = t.param(p, id(p, "x"));
                let flat = t.reshape(x, &[2, 12]).unwrap();
                let w = t.param(p, id(p, "w"));
                let y = t.fc(flat, w).unwrap();
                half_sum_squares(t, y)
            }),
        ),
    ));
    out.push((
        "relu".to_string(),
        check(
            vec![("x", away_from_zero(&[4, 9], 11))],
            Box::new(|p, t| {
                let x = t.param(p, id(p, "x"));
                let x2 = t.scale(x, 1.5);
                let y = t.relu(x2);
                half_sum_squares(t, y)
            }),
        ),
    ));
    out.push((
        "maxpool2d".to_string(),
        check(
            vec![("x", distinct(&[2, 2, 6, 4], 12))],
            Box::new(|p, t| {
                let x = t.param(p, id(p, "x"));
                let y = t.maxpool2d(x, (2, 2), (2, 2)).unwrap();
                half_sum_squares(t, y)
            }),
        ),
    ));
    out.push((
        "global_avg_pool".to_string(),
        check(
            vec![("x", uniform(&[2, 3, 4, 5], &mut r))],
            Box::new(|p, t| {
                let x = t.param(p, id(p, "x"));
                let y = t.global_avg_pool(x).unwrap();
                half_sum_squares(t, y)
            }),
        ),
    ));
    for reduction in [Reduction::Mean, Reduction::Sum] {
        out.push((
            format!("softmax_cross_entropy {reduction:?}"),
            check(
                vec![("z", uniform::<f64>(&[4, 5], &mut r).scale(3.0))],
                Box::new(move |p, t| {
                    let z = t.param(p, id(p, "z"));
                    t.softmax_cross_entropy(z, &[0, 4, 2, 2], reduction).unwrap()
                }),
            ),
        ));
    }
    out.push((
        "sum scale add".to_string(),
        check(
            vec![("a", uniform(&[3, 4], &mut r)), ("b", uniform(&[3, 4], &mut r))],
            Box::new(|p, t| {
                let a = t.param(p, id(p, "a"));
                let b = t.param(p, id(p, "b"));
                let sa = t.sum_squares(a);
                let s = t.scale(b, -2.0);
                let c = t.add(a, s).unwrap();
                let sc = t.sum_squares(c);
                let total = t.add(sa, sc).unwrap();
                let lin = t.sum(b);
                t.add(total, lin).unwrap()
            }),
        ),
    ));

    // Collapse of a grouped three-kernel block followed by convolution and a loss.
    let geom = ConvGeometry::trivial().with_groups(2).with_padding(1, 1);
    let block = expand::<f64>(4, 4, (3, 3), geom, 3, 1.5, 21).unwrap();
    let mut r2 = rng(22);
    let mut params = vec![("x", uniform::<f64>(&[2, 4, 5, 5], &mut r2)), ("w1", block.w1().clone())];
    let cascade_names = ["c2", "c3"];
    for (name, k) in cascade_names.iter().zip(block.cascade()) {
        // Perturb away from dirac so every cascade entry matters.
        params.push((name, k.axpy(0.3, &uniform(k.shape(), &mut r2)).unwrap()));
    }
    out.push((
        "collapse through loss".to_string(),
        check(
            params,
            Box::new(move |p, t| {
                let x = t.param(p, id(p, "x"));
                let w1 = t.param(p, id(p, "w1"));
                let cascade: Vec<Var> = ["c2", "c3"].iter().map(|n| t.param(p, id(p, n))).collect();
                let k = collapse_on_tape(t, w1, &cascade).unwrap();
                let y = t.conv2d(x, k, geom).unwrap();
                let y = t.global_avg_pool(y).unwrap();
                let ce = t.softmax_cross_entropy(y, &[1, 3], Reduction::Mean).unwrap();
                let wd = t.sum_squares(k);
                let wd = t.scale(wd, 0.05);
                t.add(ce, wd).unwrap()
            }),
        ),
    ));
    out
}

/// Full LeNet-5 KFLO training loss (cross-entropy plus the collapsed-kernel
/// decay term) with respect to every parameter.
pub fn lenet_report(kflo: KfloConfig, wd_collapsed: f64) -> GradCheckReport {
    let mut model = build_lenet5::<f64>(kflo, 10, 1, 31).unwrap();
    // Move the cascades away from dirac.
    let mut r = rng(32);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        if model.params().slot(id).class() == ParamClass::Cascade {
            for v in model.params_mut().value_data_mut(id) {
                *v += 0.2 * r.gen_range(-1.0..1.0);
            }
        }
    }
    let x = uniform::<f64>(&[2, 1, 28, 28], &mut r);
    let labels = [3usize, 8];
    let mut store = model.params().clone();
    finite_diff_check(
        &mut store,
        |p| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let out = model.forward_on_tape(p, &mut tape, xv).unwrap();
            let mut loss = tape.softmax_cross_entropy(out.logits, &labels, Reduction::Mean)?;
            for k in out.collapsed {
                let s = tape.sum_squares(k);
                let s = tape.scale(s, wd_collapsed / 2.0);
                loss = tape.add(loss, s)?;
            }
            Ok((tape, loss))
        },
        &options(),
    )
    .expect("gradient check runs")
}
