//! Minibatch training with focal loss and Adam, selected on validation κ.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{focal_loss, AdamConfig, AdamState, FocalLossConfig, Graph, Tensor};
use crate::dataset::{split, Epoch, SleepState, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::model::{save_checkpoint, stack_epochs, ArchConfig, ModelParams, Prediction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub checkpoint_dir: Option<PathBuf>,
    pub class_weights: Option<Vec<f64>>,
    /// Scale inputs to unit RMS over brain pixels of the training set.
    pub fit_input_scale: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            gamma: 2.0,
            batch_size: 8,
            max_epochs: 30,
            early_stop_patience: 5,
            seed: 0,
            deterministic: true,
            checkpoint_dir: None,
            class_weights: None,
            fit_input_scale: true,
            eval_batch_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "learning rate must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::config("eval_batch_size", "must be >= 1"));
        }
        self.focal().validate()
    }

    pub fn focal(&self) -> FocalLossConfig {
        FocalLossConfig {
            gamma: self.gamma,
            class_weights: self.class_weights.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_f1: f64,
    pub val_kappa: f64,
    pub improved: bool,
    pub wall_s: f64,
}

/// Equality ignores wall-clock time.
impl PartialEq for TrainLogRow {
    fn eq(&self, o: &Self) -> bool {
        self.epoch == o.epoch
            && self.train_loss.to_bits() == o.train_loss.to_bits()
            && self.val_loss.to_bits() == o.val_loss.to_bits()
            && self.val_macro_f1.to_bits() == o.val_macro_f1.to_bits()
            && self.val_kappa.to_bits() == o.val_kappa.to_bits()
            && self.improved == o.improved
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn best(&self) -> Option<&TrainLogRow> {
        self.rows.iter().rev().find(|r| r.improved)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: ModelParams<f32>,
    pub log: TrainLog,
    pub best_epoch: Option<usize>,
}

/// `1 / RMS` of the nonzero pixels of all frames; 1 when everything is zero.
pub fn fit_input_scale<'a>(epochs: impl IntoIterator<Item = &'a Epoch>) -> f64 {
    let (mut ss, mut n) = (0.0f64, 0u64);
    for e in epochs {
        for &v in e.frames.data() {
            if v != 0.0 {
                ss += (v as f64) * (v as f64);
                n += 1;
            }
        }
    }
    if n == 0 || ss == 0.0 {
        1.0
    } else {
        1.0 / (ss / n as f64).sqrt()
    }
}

fn labels_of(epochs: &[&Epoch]) -> Result<Vec<usize>> {
    epochs
        .iter()
        .map(|e| {
            e.label.map(SleepState::index).ok_or_else(|| {
                Error::Data(format!(
                    "epoch {} of `{}` is unlabelled",
                    e.epoch_index, e.recording_id
                ))
            })
        })
        .collect()
}

/// Forward pass over many epochs in fixed-size chunks.
pub fn predict_epochs(params: &ModelParams<f32>, epochs: &[&Epoch], batch: usize) -> Result<Vec<Prediction<f32>>> {
    let mut out = Vec::with_capacity(epochs.len());
    for chunk in epochs.chunks(batch.max(1)) {
        let frames: Vec<&Tensor<f32>> = chunk.iter().map(|e| &e.frames).collect();
        out.extend(params.forward_batch(&frames)?);
    }
    Ok(out)
}

/// Predicted states for a list of epochs.
pub fn predict_states(params: &ModelParams<f32>, epochs: &[&Epoch], batch: usize) -> Result<Vec<SleepState>> {
    predict_epochs(params, epochs, batch)?
        .iter()
        .map(|p| SleepState::from_index(p.class()))
        .collect()
}

/// Metrics of `params` on labelled epochs; parameters are not modified.
pub fn evaluate_split(params: &ModelParams<f32>, epochs: &[&Epoch], batch: usize) -> Result<MetricsReport> {
    let truth: Vec<SleepState> = labels_of(epochs)?
        .into_iter()
        .map(SleepState::from_index)
        .collect::<Result<_>>()?;
    let pred = predict_states(params, epochs, batch)?;
    MetricsReport::from_labels(&truth, &pred)
}

fn evaluate_with_loss(
    params: &ModelParams<f32>,
    epochs: &[&Epoch],
    cfg: &TrainConfig,
) -> Result<(f64, MetricsReport)> {
    let targets = labels_of(epochs)?;
    let preds = predict_epochs(params, epochs, cfg.eval_batch_size)?;
    let focal = cfg.focal();
    let mut loss = 0.0;
    for (p, &t) in preds.iter().zip(&targets) {
        let probs: Vec<f64> = p.probs.iter().map(|&v| v as f64).collect();
        loss += focal_loss(&probs, t, &focal)?;
    }
    let truth: Vec<SleepState> = targets.iter().map(|&t| SleepState::from_index(t)).collect::<Result<_>>()?;
    let pred: Vec<SleepState> = preds.iter().map(|p| SleepState::from_index(p.class())).collect::<Result<_>>()?;
    Ok((loss / epochs.len() as f64, MetricsReport::from_labels(&truth, &pred)?))
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step(
    params: &mut ModelParams<f32>,
    adam: &mut AdamState<f32>,
    batch: &[&Epoch],
    cfg: &TrainConfig,
) -> Result<f64> {
    let targets = labels_of(batch)?;
    let frames = stack_epochs(&batch.iter().map(|e| &e.frames).collect::<Vec<_>>())?;
    let mut g = Graph::new();
    let vars = params.register(&mut g, true);
    let out = params.forward_graph(&mut g, &vars, frames)?;
    let loss = g.focal_loss(out.probs, &targets, cfg.gamma, cfg.class_weights.as_deref())?;
    let lv = g.value(loss).data()[0] as f64;
    if !lv.is_finite() {
        return Err(Error::Numeric(format!("loss is {lv}; {}", param_norms(params))));
    }
    let grads = g.backward(loss)?;
    let gs: Vec<Tensor<f32>> = vars
        .all()
        .iter()
        .zip(params.tensors())
        .map(|(v, t)| grads.get_or_zeros(*v, t))
        .collect();
    let names = params.names();
    adam.update(&mut params.tensors_mut(), &gs, &names)?;
    Ok(lv)
}

fn param_norms(params: &ModelParams<f32>) -> String {
    params
        .names()
        .iter()
        .zip(params.tensors())
        .map(|(n, t)| format!("{n}={:.3e}", t.l2_norm()))
        .collect::<Vec<_>>()
        .join(" ")
}

fn better(kappa: f64, loss: f64, best: Option<(f64, f64)>) -> bool {
    match best {
        None => true,
        Some((bk, bl)) => kappa > bk || (kappa == bk && loss < bl),
    }
}

/// Trains from `params` and returns the checkpoint with the best validation κ.
pub fn train(params: ModelParams<f32>, train: &[&Epoch], val: &[&Epoch], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    labels_of(train)?;
    labels_of(val)?;
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut params = params;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        params.tensors(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, f64)> = None;
    let mut best_params = params.clone();
    let mut best_epoch = None;
    let mut stale = 0;

    for epoch in 0..cfg.max_epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Epoch> = chunk.iter().map(|&i| train[i]).collect();
            let loss = train_step(&mut params, &mut adam, &batch, cfg).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch} batch {bi}: {m}")),
                other => other,
            })?;
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let (val_loss, report) = evaluate_with_loss(&params, val, cfg)?;
        let kappa = report.kappa.value;
        let improved = better(kappa, val_loss, best);
        if improved {
            best = Some((kappa, val_loss));
            best_params = params.clone();
            best_epoch = Some(epoch);
            stale = 0;
            if let Some(dir) = &cfg.checkpoint_dir {
                save_checkpoint(&dir.join("best.sscn"), &best_params)?;
            }
        } else {
            stale += 1;
        }
        let row = TrainLogRow {
            epoch,
            train_loss,
            val_loss,
            val_macro_f1: report.metrics.macro_f1,
            val_kappa: kappa,
            improved,
            wall_s: t0.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: train_loss={train_loss:.5} val_loss={val_loss:.5} val_kappa={kappa:.4} val_macro_f1={:.4}{}",
            row.val_macro_f1,
            if improved { " *" } else { "" }
        );
        log.rows.push(row);
        if stale >= cfg.early_stop_patience.max(1) {
            break;
        }
    }
    Ok(TrainOutcome {
        best: best_params,
        log,
        best_epoch,
    })
}

/// Result of split -> init -> train -> test evaluation.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub params: ModelParams<f32>,
    pub log: TrainLog,
    pub split: Split,
    pub val_report: MetricsReport,
    pub test_report: MetricsReport,
}

/// Splits `epochs`, initializes a network (seeded by `cfg.seed`), fits the
/// input scale on the training part, trains and evaluates on the test part.
pub fn run_experiment(epochs: &[Epoch], split_spec: &SplitSpec, arch: &ArchConfig, cfg: &TrainConfig) -> Result<Experiment> {
    let parts = split(epochs, split_spec)?;
    if parts.test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let pick = |ix: &[usize]| -> Vec<&Epoch> { ix.iter().map(|&i| &epochs[i]).collect() };
    let (tr, va, te) = (pick(&parts.train), pick(&parts.val), pick(&parts.test));
    let t = epochs[0].n_frames();
    let [h, w] = [epochs[0].frames.shape()[2], epochs[0].frames.shape()[3]];
    let arch = ArchConfig {
        frames_per_epoch: t,
        input_hw: [h, w],
        ..arch.clone()
    };
    let mut params = ModelParams::init(arch, cfg.seed)?;
    if cfg.fit_input_scale {
        params.input_scale = fit_input_scale(tr.iter().copied());
    }
    let out = train(params, &tr, &va, cfg)?;
    let val_report = evaluate_split(&out.best, &va, cfg.eval_batch_size)?;
    let test_report = evaluate_split(&out.best, &te, cfg.eval_batch_size)?;
    Ok(Experiment {
        params: out.best,
        log: out.log,
        split: parts,
        val_report,
        test_report,
    })
}
