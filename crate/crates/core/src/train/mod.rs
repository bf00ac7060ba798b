//! Minibatch SGD over model graphs, datasets and per-epoch metrics.

mod data;

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{ParamClass, ParamStore, Tape};
use crate::model::{ModelError, ModelGraph, Mode};
use crate::tensor::{Reduction, Scalar, Tensor};

pub use data::{
    augment_batch, load_cifar10_bin, load_mnist_idx, DataError, Dataset, Split, CIFAR10_MEAN, CIFAR10_STD,
    MNIST_MEAN, MNIST_STD,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, step {step}: non-finite value in {param}")]
    Divergence { epoch: usize, step: usize, param: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Epochs (1-based) at whose start the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    /// Decay on ordinary kernels.
    pub wd_plain: f64,
    /// Decay on the pointwise cascade kernels.
    pub wd_cascade: f64,
    /// Decay on the collapsed kernel of every overparameterized layer.
    pub wd_collapsed: f64,
    pub ema_decay: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub data_fraction: f64,
    /// Random flips and crops of every training batch.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            milestones: Vec::new(),
            lr_decay: 0.1,
            momentum: 0.9,
            wd_plain: 5e-4,
            wd_cascade: 1e-9,
            wd_collapsed: 5e-4,
            ema_decay: None,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            data_fraction: 1.0,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        for (name, v) in [("wd_plain", self.wd_plain), ("wd_cascade", self.wd_cascade), ("wd_collapsed", self.wd_collapsed)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be finite and non-negative"));
            }
        }
        if let Some(d) = self.ema_decay {
            if !(d > 0.0 && d < 1.0) {
                return bad(format!("ema decay {d} outside (0, 1)"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad(format!("data fraction {} outside (0, 1]", self.data_fraction));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    /// Weight-decay coefficient applied directly to a parameter's gradient.
    pub fn decay_for(&self, class: ParamClass) -> f64 {
        match class {
            ParamClass::Cascade => self.wd_cascade,
            ParamClass::Plain => self.wd_plain,
            ParamClass::BaseKernel | ParamClass::Bias => 0.0,
        }
    }

    /// `key=value` lines describing every field, in a fixed order.
    pub fn describe(&self) -> Vec<(String, String)> {
        let milestones: Vec<String> = self.milestones.iter().map(|m| m.to_string()).collect();
        vec![
            ("lr".into(), self.lr.to_string()),
            ("milestones".into(), milestones.join(",")),
            ("lr_decay".into(), self.lr_decay.to_string()),
            ("momentum".into(), self.momentum.to_string()),
            ("wd_plain".into(), self.wd_plain.to_string()),
            ("wd_cascade".into(), self.wd_cascade.to_string()),
            ("wd_collapsed".into(), self.wd_collapsed.to_string()),
            ("ema".into(), self.ema_decay.map(|d| d.to_string()).unwrap_or_else(|| "off".into())),
            ("batch_size".into(), self.batch_size.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("fraction".into(), self.data_fraction.to_string()),
            ("augment".into(), self.augment.to_string()),
        ]
    }
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T: Scalar = f32> {
    velocity: Vec<Vec<f64>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            velocity: params.iter().map(|(_, s)| vec![0.0; s.value().numel()]).collect(),
            _marker: std::marker::PhantomData,
        }
    }
}

/// One momentum-SGD update: `v = momentum * v + g + wd * w`, `w -= lr * v`,
/// with `wd` chosen by parameter class. Fails, leaving the offending value in
/// place, when an updated value is not finite.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut SgdState<T>, cfg: &TrainConfig, epoch: usize) -> Result<()> {
    let lr = cfg.lr_at(epoch);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let class = params.slot(id).class();
        let wd = cfg.decay_for(class);
        let velocity = &mut state.velocity[id.index()];
        let (values, grad) = params.value_and_grad_mut(id);
        let mut finite = true;
        for ((w, g), v) in values.iter_mut().zip(grad.data()).zip(velocity.iter_mut()) {
            let wf = w.widen();
            *v = cfg.momentum * *v + g.widen() + wd * wf;
            *w = T::narrow(wf - lr * *v);
            finite &= w.is_finite();
        }
        if !finite {
            return Err(TrainError::Divergence {
                epoch,
                step: 0,
                param: params.slot(id).name().to_string(),
            });
        }
    }
    Ok(())
}

/// `shadow = decay * shadow + (1 - decay) * params`, elementwise.
pub fn ema_update<T: Scalar>(shadow: &mut ParamStore<T>, params: &ParamStore<T>, decay: f64) {
    for id in params.ids() {
        let src = params.value(id).data();
        for (s, p) in shadow.value_data_mut(id).iter_mut().zip(src) {
            *s = T::narrow(decay * s.widen() + (1.0 - decay) * p.widen());
        }
    }
}

/// Per-epoch summary.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub ema_test_acc: Option<f64>,
    pub wall_seconds: f64,
    /// Forward multiply-accumulates of one full-size training step, with
    /// every overparameterized layer collapsed before filtering.
    pub macs_per_step: u64,
}

impl MetricsRecord {
    /// Same record with the wall-clock time cleared, for run comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_seconds: 0.0,
            ..self.clone()
        }
    }
}

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} train_loss={} train_acc={} test_acc={}",
            self.epoch, self.train_loss, self.train_acc, self.test_acc
        )?;
        if let Some(ema) = self.ema_test_acc {
            write!(f, " ema_test_acc={ema}")?;
        }
        write!(f, " wall_seconds={:.3} macs_per_step={}", self.wall_seconds, self.macs_per_step)
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainReport<T: Scalar = f32> {
    pub records: Vec<MetricsRecord>,
    /// Mean data loss of every step, in order.
    pub step_losses: Vec<f64>,
    /// Averaged parameters when EMA is enabled.
    pub ema: Option<ParamStore<T>>,
}

/// Trains `model` in place. Each step collapses every block on the tape,
/// adds `wd_collapsed * sum ||W'||^2 / 2` to the mean cross-entropy, runs
/// backward and applies [`sgd_step`]. Deterministic in `cfg.seed`.
pub fn train<T: Scalar>(
    model: &mut ModelGraph<T>,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport<T>> {
    cfg.validate()?;
    if model.mode() != Mode::Training {
        return Err(ModelError::Mode {
            expected: Mode::Training,
            found: model.mode(),
        }
        .into());
    }
    let train_set = train_set.stratified_fraction(cfg.data_fraction, cfg.seed)?;
    let macs_per_step = model
        .step_costs(&train_set.sample_shape(), cfg.batch_size.min(train_set.len()))?
        .iter()
        .map(|(_, c)| c.kernel_filtering)
        .sum();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = SgdState::new(model.params());
    let mut ema = cfg.ema_decay.map(|_| model.params().clone());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut global_step = 0;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (mut images, labels) = train_set.batch(chunk);
            if cfg.augment {
                augment_batch(&mut images, &mut rng);
            }
            let (loss, hits) = train_step(model, &images.cast(), &labels, cfg)?;
            sgd_step(model.params_mut(), &mut state, cfg, epoch).map_err(|e| match e {
                TrainError::Divergence { param, .. } => TrainError::Divergence {
                    epoch,
                    step: global_step,
                    param,
                },
                other => other,
            })?;
            if let (Some(shadow), Some(decay)) = (ema.as_mut(), cfg.ema_decay) {
                ema_update(shadow, model.params(), decay);
            }
            if !loss.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    step: global_step,
                    param: "loss".into(),
                });
            }
            step_losses.push(loss);
            loss_sum += loss * labels.len() as f64;
            correct += hits;
            seen += labels.len();
            global_step += 1;
        }
        let test_acc = match test_set {
            Some(ds) => evaluate(model, ds)?,
            None => f64::NAN,
        };
        let ema_test_acc = match (&ema, test_set) {
            (Some(shadow), Some(ds)) => Some(evaluate(&model.with_params(shadow.clone())?, ds)?),
            _ => None,
        };
        records.push(MetricsRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_acc,
            ema_test_acc,
            wall_seconds: start.elapsed().as_secs_f64(),
            macs_per_step,
        });
    }
    Ok(TrainReport {
        records,
        step_losses,
        ema,
    })
}

/// Forward and backward on one batch. Leaves fresh gradients in the model's
/// parameter store and returns the mean data loss and the number of correct
/// predictions.
pub fn train_step<T: Scalar>(
    model: &mut ModelGraph<T>,
    images: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let out = model.forward_on_tape(model.params(), &mut tape, x)?;
    let data_loss = tape
        .softmax_cross_entropy(out.logits, labels, Reduction::Mean)
        .map_err(ModelError::from)?;
    let mut loss = data_loss;
    if cfg.wd_collapsed > 0.0 {
        for k in &out.collapsed {
            let sq = tape.sum_squares(*k);
            let term = tape.scale(sq, cfg.wd_collapsed / 2.0);
            loss = tape.add(loss, term).map_err(ModelError::from)?;
        }
    }
    let hits = count_correct(tape.value(out.logits), labels);
    let data = tape.scalar(data_loss);
    let params = model.params_mut();
    params.zero_grads();
    tape.backward(loss, params).map_err(ModelError::from)?;
    Ok((data, hits))
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

const EVAL_BATCH: usize = 250;

/// Top-1 accuracy over `dataset`, collapsing the model once.
pub fn evaluate<T: Scalar>(model: &ModelGraph<T>, dataset: &Dataset) -> Result<f64> {
    let kernels = model.effective_kernels()?;
    let mut correct = 0;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, labels) = dataset.batch(chunk);
        let logits = model.forward_with(&kernels, &images.cast())?;
        correct += count_correct(&logits, &labels);
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Logits of every sample, in dataset order.
pub fn predict<T: Scalar>(model: &ModelGraph<T>, dataset: &Dataset) -> Result<Tensor<T>> {
    let kernels = model.effective_kernels()?;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut data = Vec::new();
    let mut classes = 0;
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, _) = dataset.batch(chunk);
        let logits = model.forward_with(&kernels, &images.cast())?;
        classes = logits.shape()[1];
        data.extend_from_slice(logits.data());
    }
    Ok(Tensor::new(vec![dataset.len(), classes], data).expect("logit count"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamId;
    use crate::kflo::KfloConfig;
    use crate::model::LayerSpec;

    #[test]
    fn zero_gradient_zero_decay_is_a_no_op() {
        let mut p = ParamStore::<f32>::new();
        let id = p.push("w", ParamClass::Plain, Tensor::full(&[3], 0.7));
        let cfg = TrainConfig {
            wd_plain: 0.0,
            ..TrainConfig::default()
        };
        let mut st = SgdState::new(&p);
        sgd_step(&mut p, &mut st, &cfg, 1).unwrap();
        assert_eq!(p.value(id).data(), &[0.7; 3]);
    }

    #[test]
    fn plain_decay_scalar() {
        let mut p = ParamStore::<f64>::new();
        let id = p.push("w", ParamClass::Plain, Tensor::full(&[1], 1.0));
        let cfg = TrainConfig {
            lr: 1.0,
            momentum: 0.0,
            wd_plain: 0.1,
            ..TrainConfig::default()
        };
        let mut st = SgdState::new(&p);
        sgd_step(&mut p, &mut st, &cfg, 1).unwrap();
        assert!((p.value(id).data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = ParamStore::<f64>::new();
        let id = p.push("w", ParamClass::Bias, Tensor::full(&[1], 0.0));
        let cfg = TrainConfig {
            lr: 0.5,
            momentum: 0.9,
            ..TrainConfig::default()
        };
        let mut st = SgdState::new(&p);
        p.grad_data_mut(id)[0] = 1.0;
        sgd_step(&mut p, &mut st, &cfg, 1).unwrap();
        sgd_step(&mut p, &mut st, &cfg, 1).unwrap();
        // v1 = 1, v2 = 1.9
        assert!((p.value(id).data()[0] + 0.5 * 2.9).abs() < 1e-12);
    }

    #[test]
    fn divergence_names_the_parameter() {
        let mut p = ParamStore::<f32>::new();
        p.push("fc1.bias", ParamClass::Bias, Tensor::zeros(&[1]));
        let id = p.push("fc2.weight", ParamClass::Plain, Tensor::zeros(&[1]));
        p.grad_data_mut(id)[0] = f32::NAN;
        let mut st = SgdState::new(&p);
        let err = sgd_step(&mut p, &mut st, &TrainConfig::default(), 1).unwrap_err();
        assert!(matches!(err, TrainError::Divergence { ref param, .. } if param == "fc2.weight"), "{err}");
    }

    #[test]
    fn schedule_steps_at_milestones() {
        let cfg = TrainConfig {
            lr: 1.0,
            milestones: vec![3, 5],
            lr_decay: 0.5,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (1..=6).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 0.5, 0.5, 0.25, 0.25]);
    }

    #[test]
    fn ema_geometric_series() {
        let mut shadow = ParamStore::<f64>::new();
        shadow.push("w", ParamClass::Plain, Tensor::full(&[2], 4.0));
        let mut params = shadow.clone();
        params.value_data_mut(ParamId(0)).copy_from_slice(&[1.0, -2.0]);
        let d = 0.8f64;
        for _ in 0..5 {
            ema_update(&mut shadow, &params, d);
        }
        let k = d.powi(5);
        let expect = [k * 4.0 + (1.0 - k) * 1.0, k * 4.0 + (1.0 - k) * -2.0];
        for (s, e) in shadow.value(ParamId(0)).data().iter().zip(expect) {
            assert!((s - e).abs() < 1e-12);
        }
        ema_update(&mut shadow, &params, 0.0);
        assert_eq!(shadow.value(ParamId(0)), params.value(ParamId(0)));
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::<f32>::new(vec![3, 3], vec![0., 0., 0., 1., 2., 2., 5., 1., 5.]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1, 0]);
    }

    #[test]
    fn metrics_line_format() {
        let r = MetricsRecord {
            epoch: 2,
            train_loss: 0.25,
            train_acc: 0.5,
            test_acc: 0.75,
            ema_test_acc: None,
            wall_seconds: 1.23456,
            macs_per_step: 99,
        };
        assert_eq!(
            r.to_string(),
            "epoch=2 train_loss=0.25 train_acc=0.5 test_acc=0.75 wall_seconds=1.235 macs_per_step=99"
        );
    }

    fn toy() -> (ModelGraph<f32>, Dataset) {
        let specs = [LayerSpec::Fc {
            name: "fc".into(),
            out_features: 2,
        }];
        let model = ModelGraph::build(&[1, 1, 2], &specs, KfloConfig::VANILLA, 3).unwrap();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..16 {
            let class = i % 2;
            let s = if class == 0 { 1.0 } else { -1.0 };
            images.extend_from_slice(&[s * (1.0 + i as f32 / 16.0), s * 0.5]);
            labels.push(class);
        }
        let ds = Dataset::new(Tensor::new(vec![16, 1, 1, 2], images).unwrap(), labels, 2, Split::Train).unwrap();
        (model, ds)
    }

    #[test]
    fn separable_toy_loss_decreases() {
        let (mut model, ds) = toy();
        let cfg = TrainConfig {
            lr: 0.1,
            momentum: 0.0,
            batch_size: 16,
            epochs: 8,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &ds, Some(&ds), &cfg).unwrap();
        assert!(report.step_losses.windows(2).all(|w| w[1] < w[0]), "{:?}", report.step_losses);
        assert_eq!(report.records.last().unwrap().test_acc, 1.0);
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let (mut model, ds) = toy();
        let before = model.params().clone();
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 4,
            epochs: 2,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &ds, None, &cfg).unwrap();
        for id in before.ids() {
            assert_eq!(before.value(id), model.params().value(id));
        }
        let l = &report.records;
        assert!((l[0].train_loss - l[1].train_loss).abs() < 1e-9);
    }
}
