//! Maximum-likelihood training: Adam, a plateau step-size schedule with
//! best-checkpoint restore, and streaming evaluation.

use std::fmt::Write as _;
use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{absorb_normalizer, augment_rows, Dataset, Normalizer, SplitKind};
use crate::error::{Error, Result};
use crate::flow::{column_nll, FlowModel};
use crate::grad::{l1_accumulate, nll_and_grad_columns, GradientSet};
use crate::linalg::Mat;

const EVAL_CHUNK: usize = 256;
const MAX_CONSECUTIVE_DIVERGENCES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    /// Weight of the L1 penalty on all raw coefficients.
    pub l1_eta: f64,
    /// Epochs without a validation improvement before the step size decays.
    pub patience_epochs: usize,
    pub lr_decay: f64,
    /// Training stops once the step size falls below this.
    pub min_lr: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Kernels use fixed-order reductions regardless of thread count, so runs
    /// are reproducible either way; the flag is kept for run records.
    pub deterministic_reduction: bool,
    /// Maximum circular image shift as a fraction of the side, redrawn every
    /// epoch. Requires image data.
    pub augment_shift: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            batch_size: 64,
            l1_eta: 0.0,
            patience_epochs: 10,
            lr_decay: 0.1,
            min_lr: 1e-7,
            max_epochs: 1000,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            deterministic_reduction: true,
            augment_shift: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.min_lr > 0.0 && self.lr0 > self.min_lr && self.lr0.is_finite()) {
            return fail(format!(
                "need lr0 > min_lr > 0, got lr0 = {}, min_lr = {}",
                self.lr0, self.min_lr
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return fail(format!("lr_decay must be in (0, 1), got {}", self.lr_decay));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.patience_epochs == 0 || self.max_epochs == 0 {
            return fail("patience_epochs and max_epochs must be at least 1".into());
        }
        if !(self.l1_eta >= 0.0 && self.l1_eta.is_finite()) {
            return fail(format!("l1_eta must be non-negative, got {}", self.l1_eta));
        }
        let betas = [self.adam_beta1, self.adam_beta2];
        if betas.iter().any(|b| !(0.0..1.0).contains(b)) || !(self.adam_eps > 0.0) {
            return fail("Adam needs betas in [0, 1) and eps > 0".into());
        }
        if let Some(f) = self.augment_shift {
            if !(f >= 0.0 && f < 1.0) {
                return fail(format!("augment shift fraction must be in [0, 1), got {f}"));
            }
        }
        Ok(())
    }
}

/// Adam moments for every raw parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: GradientSet,
    pub v: GradientSet,
    pub t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(model: &FlowModel, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: GradientSet::zeros_like(model),
            v: GradientSet::zeros_like(model),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn from_config(model: &FlowModel, cfg: &TrainConfig) -> Self {
        Self::new(model, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    /// One bias-corrected update in place. On a non-finite result the model
    /// is left partially updated and must be restored by the caller.
    pub fn step(&mut self, model: &mut FlowModel, grads: &GradientSet, lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || grads.len() != model.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "gradient of {} values for {} parameters",
                grads.len(),
                model.param_count()
            )));
        }
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let mut finite = true;
        for (((p, g), m), v) in model
            .param_blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .zip(self.m.blocks_mut())
            .zip(self.v.blocks_mut())
        {
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
            finite &= p.iter().all(|v| v.is_finite());
        }
        if finite {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("Adam update at step {}", self.t)))
        }
    }
}

/// Mean NLL with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub mean: f64,
    pub std_err: f64,
    pub count: usize,
    /// False when fewer than two samples were evaluated (`std_err` is then 0).
    pub std_err_defined: bool,
}

/// Streams rows `range` of `samples` through the model and returns NLL
/// statistics in nats.
pub fn evaluate_rows(model: &FlowModel, samples: &Mat, range: Range<usize>) -> Result<EvalStats> {
    if range.is_empty() || range.end > samples.rows() {
        return Err(Error::InvalidDimensions(format!(
            "cannot evaluate rows {range:?} of {}",
            samples.rows()
        )));
    }
    // Welford
    let (mut count, mut mean, mut m2) = (0usize, 0.0, 0.0);
    let idx: Vec<usize> = range.collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (trace, logdet) = model.forward_columns(samples.gather_transposed(chunk))?;
        for v in column_nll(&trace.output, &logdet) {
            count += 1;
            let delta = v - mean;
            mean += delta / count as f64;
            m2 += delta * (v - mean);
        }
    }
    let defined = count > 1;
    let std_err = if defined {
        (m2 / (count - 1) as f64 / count as f64).sqrt()
    } else {
        0.0
    };
    Ok(EvalStats {
        mean,
        std_err,
        count,
        std_err_defined: defined,
    })
}

pub fn evaluate(model: &FlowModel, samples: &Mat) -> Result<EvalStats> {
    evaluate_rows(model, samples, 0..samples.rows())
}

pub fn evaluate_split(model: &FlowModel, data: &Dataset, split: SplitKind) -> Result<EvalStats> {
    evaluate_rows(model, data.samples(), data.split_range(split))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// NLL of the training split at the end of the epoch (without augmentation).
    pub train_nll: f64,
    pub val_nll: f64,
    /// Step size used during the epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    best: Option<usize>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,train_nll,val_nll,lr,seconds";

    pub fn best_record(&self) -> Option<&EpochRecord> {
        self.best.map(|i| &self.records[i])
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_record().map(|r| r.epoch)
    }

    pub fn best_val(&self) -> Option<f64> {
        self.best_record().map(|r| r.val_nll)
    }

    pub fn best_train(&self) -> Option<f64> {
        self.best_record().map(|r| r.train_nll)
    }

    /// Renumbers epochs to continue after `offset` earlier ones.
    pub fn offset_epochs(&mut self, offset: usize) {
        for r in &mut self.records {
            r.epoch += offset;
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.3}",
                r.epoch, r.train_nll, r.val_nll, r.lr, r.seconds
            );
        }
        s
    }
}

/// Trains on the dataset's train split, selecting on the validation split.
/// Returns the best-validation checkpoint.
pub fn fit(model: FlowModel, data: &Dataset, cfg: &TrainConfig) -> Result<(FlowModel, TrainHistory)> {
    fit_with_observer(model, data, cfg, |_| {})
}

/// Like [`fit`], calling `observe` after every completed epoch.
pub fn fit_with_observer<F>(
    model: FlowModel,
    data: &Dataset,
    cfg: &TrainConfig,
    observe: F,
) -> Result<(FlowModel, TrainHistory)>
where
    F: FnMut(&EpochRecord),
{
    fit_inner(model, data, None, cfg, observe)
}

/// Trains `model` on whitened inputs `norm(x)` while `data` stays in the
/// original coordinates, so shift augmentation moves raw pixels before they
/// are whitened. Returns the best checkpoint with the normalizer absorbed;
/// the history is reported in original-space nats (`- ln|det Gamma|`), so it
/// matches [`evaluate`] on the returned model and raw data.
pub fn fit_whitened<F>(
    model: FlowModel,
    data: &Dataset,
    norm: &Normalizer,
    cfg: &TrainConfig,
    observe: F,
) -> Result<(FlowModel, TrainHistory)>
where
    F: FnMut(&EpochRecord),
{
    let ld = norm.log_det();
    let mut observe = observe;
    let (best, mut history) = fit_inner(model, data, Some(norm), cfg, |r| {
        observe(&EpochRecord {
            train_nll: r.train_nll - ld,
            val_nll: r.val_nll - ld,
            ..r.clone()
        })
    })?;
    for r in &mut history.records {
        r.train_nll -= ld;
        r.val_nll -= ld;
    }
    Ok((absorb_normalizer(&best, norm)?, history))
}

fn fit_inner<F>(
    mut model: FlowModel,
    data: &Dataset,
    norm: Option<&Normalizer>,
    cfg: &TrainConfig,
    mut observe: F,
) -> Result<(FlowModel, TrainHistory)>
where
    F: FnMut(&EpochRecord),
{
    cfg.validate()?;
    if data.n_dim() != model.n_dim() {
        return Err(Error::ShapeMismatch(format!(
            "data has {} dimensions, model {}",
            data.n_dim(),
            model.n_dim()
        )));
    }
    let raw_train = data.split_samples(SplitKind::Train);
    let val_range = data.split_range(SplitKind::Validation);
    if raw_train.rows() == 0 || val_range.is_empty() {
        return Err(Error::Config(
            "training needs non-empty train and validation splits".into(),
        ));
    }
    let geom = match cfg.augment_shift {
        Some(_) => Some(data.image_geom().ok_or_else(|| {
            Error::Config("shift augmentation needs image data".into())
        })?),
        None => None,
    };

    let whiten = |m: &Mat| -> Result<Option<Mat>> { norm.map(|n| n.transform_rows(m)).transpose() };
    let white_train = whiten(&raw_train)?;
    let train = white_train.as_ref().unwrap_or(&raw_train);
    let white_val = whiten(&data.split_samples(SplitKind::Validation))?;
    let eval_val = |m: &FlowModel| match &white_val {
        Some(v) => evaluate(m, v),
        None => evaluate_rows(m, data.samples(), val_range.clone()),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.rows()).collect();
    let mut adam = AdamState::from_config(&model, cfg);
    let mut lr = cfg.lr0;
    let mut history = TrainHistory::default();
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;
    let mut divergences = 0usize;

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let augmented;
        let rows = match (geom, cfg.augment_shift) {
            (Some(g), Some(frac)) => {
                let seed = cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                let shifted = augment_rows(&raw_train, g, frac, seed)?;
                augmented = whiten(&shifted)?.unwrap_or(shifted);
                &augmented
            }
            _ => train,
        };
        order.shuffle(&mut rng);

        let outcome = run_epoch(&mut model, &mut adam, rows, &order, cfg, lr).and_then(|()| {
            let tr = evaluate(&model, train)?.mean;
            let va = eval_val(&model)?.mean;
            if tr.is_finite() && va.is_finite() {
                Ok((tr, va))
            } else {
                Err(Error::NonFinite(format!("epoch {epoch} evaluation")))
            }
        });

        let (train_nll, val_nll) = match outcome {
            Ok(v) => v,
            Err(e @ (Error::NonFinite(_) | Error::Diverged(_))) => {
                divergences += 1;
                if divergences >= MAX_CONSECUTIVE_DIVERGENCES {
                    return Err(Error::Diverged(format!(
                        "{divergences} consecutive divergent epochs, last at epoch {epoch}: {e}"
                    )));
                }
                model = best.clone();
                adam = AdamState::from_config(&model, cfg);
                lr *= cfg.lr_decay;
                if lr < cfg.min_lr {
                    break;
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        divergences = 0;

        let record = EpochRecord {
            epoch,
            train_nll,
            val_nll,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        observe(&record);
        history.records.push(record);

        if val_nll < best_val {
            best_val = val_nll;
            best = model.clone();
            history.best = Some(history.records.len() - 1);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience_epochs {
                lr *= cfg.lr_decay;
                model = best.clone();
                adam = AdamState::from_config(&model, cfg);
                stale = 0;
                if lr < cfg.min_lr {
                    break;
                }
            }
        }
    }

    if history.best.is_none() {
        return Err(Error::Diverged("no epoch completed".into()));
    }
    Ok((best, history))
}

fn run_epoch(
    model: &mut FlowModel,
    adam: &mut AdamState,
    rows: &Mat,
    order: &[usize],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    for batch in order.chunks(cfg.batch_size) {
        let (nll, mut grads) = nll_and_grad_columns(model, rows.gather_transposed(batch))?;
        let penalty = l1_accumulate(model, cfg.l1_eta, &mut grads);
        let loss = nll.iter().sum::<f64>() / nll.len() as f64 + penalty;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!("batch loss {loss}")));
        }
        adam.step(model, &grads, lr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Architecture;
    use crate::nonlinearity::Nonlinearity;

    fn tiny_model() -> FlowModel {
        let arch = Architecture {
            n_dim: 2,
            block_size: 2,
            n_layers: 1,
            nonlinearity: Nonlinearity::Tanh,
            flip: false,
        };
        FlowModel::init(&arch, 0).unwrap()
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { lr0: 1e-8, ..Default::default() },
            TrainConfig { min_lr: 0.0, ..Default::default() },
            TrainConfig { lr_decay: 1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { l1_eta: -1.0, ..Default::default() },
            TrainConfig { augment_shift: Some(1.5), ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn first_adam_step_is_lr_sign() {
        let mut model = tiny_model();
        let before = model.param_blocks().concat();
        let mut grads = GradientSet::zeros_like(&model);
        for (i, blk) in grads.blocks_mut().into_iter().enumerate() {
            for (j, g) in blk.iter_mut().enumerate() {
                *g = if (i + j) % 2 == 0 { 3.0 } else { -0.02 };
            }
        }
        let mut adam = AdamState::new(&model, 0.9, 0.999, 1e-8);
        adam.step(&mut model, &grads, 1e-3).unwrap();
        let after = model.param_blocks().concat();
        for ((b, a), g) in before.iter().zip(&after).zip(grads.to_flat()) {
            let expected = -1e-3 * g.signum();
            assert!(((a - b) - expected).abs() < 1e-9, "{} vs {expected}", a - b);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut model = tiny_model();
        let before = model.clone();
        let mut adam = AdamState::new(&model, 0.9, 0.999, 1e-8);
        for _ in 0..3 {
            adam.step(&mut model, &GradientSet::zeros_like(&before), 0.1).unwrap();
        }
        assert_eq!(model, before);
    }

    #[test]
    fn non_finite_update_is_reported() {
        let mut model = tiny_model();
        let mut grads = GradientSet::zeros_like(&model);
        grads.layers[0].b[0] = f64::NAN;
        let mut adam = AdamState::new(&model, 0.9, 0.999, 1e-8);
        assert!(matches!(
            adam.step(&mut model, &grads, 1e-3),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn evaluate_degenerate_and_duplicated() {
        let model = tiny_model();
        let x = Mat::from_rows(&[vec![0.3, -0.1]]).unwrap();
        let one = evaluate(&model, &x).unwrap();
        assert!(!one.std_err_defined);
        assert_eq!(one.std_err, 0.0);

        let rows: Vec<Vec<f64>> = (0..300).map(|i| vec![(i as f64 * 0.37).sin(), 0.01 * i as f64]).collect();
        let twice: Vec<Vec<f64>> = rows.iter().chain(rows.iter()).cloned().collect();
        let a = evaluate(&model, &Mat::from_rows(&rows).unwrap()).unwrap();
        let b = evaluate(&model, &Mat::from_rows(&twice).unwrap()).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-12);
        assert_eq!(b.count, 600);

        let direct = model.nll_rows(&Mat::from_rows(&rows).unwrap()).unwrap();
        let mean = direct.iter().sum::<f64>() / 300.0;
        let var = direct.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 299.0;
        assert!((a.mean - mean).abs() < 1e-12);
        assert!((a.std_err - (var / 300.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn history_csv_format() {
        let mut h = TrainHistory::default();
        h.records.push(EpochRecord {
            epoch: 0,
            train_nll: 1.5,
            val_nll: 1.25,
            lr: 1e-4,
            seconds: 0.5,
        });
        h.best = Some(0);
        h.offset_epochs(3);
        assert_eq!(h.to_csv(), "epoch,train_nll,val_nll,lr,seconds\n3,1.5,1.25,0.0001,0.500\n");
        assert_eq!(h.best_epoch(), Some(3));
    }

    #[test]
    fn fit_requires_validation_split() {
        let ds = Dataset::new(Mat::zeros(10, 2));
        assert!(fit(tiny_model(), &ds, &TrainConfig::default()).is_err());
    }
}
