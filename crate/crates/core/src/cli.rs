//! Command-line front end. Every subcommand reads an optional JSON config,
//! writes only below `--out`, and finishes by atomically writing
//! `manifest.json` next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{context_windows, epoch_stack, Epoch, LabelFile, SleepState, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::spectral::band_power_by_state;
use crate::eval::sweep::{duration_sweep, write_sweep_csv};
use crate::eval::{read_label_table, score_agreement, Hypnogram, MetricsReport};
use crate::interpret::{aggregate_attention, export_saliency, extract_attention, grad_cam, write_attention_csv, SaliencyMap};
use crate::model::{load_checkpoint, save_checkpoint, ArchConfig, ModelParams};
use crate::preprocess::{read_preprocessed, read_raw, run_pipeline, write_preprocessed, PreprocessConfig, PreprocessedStack};
use crate::synth::{generate_many, write_synth, SynthSpec};
use crate::train::{predict_states, run_experiment, TrainConfig};

pub const THREADS_ENV: &str = "WFCI_SLEEP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "wfci-sleep", version, about = "Sleep-state classification of wide-field calcium imaging")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Forces the deterministic training path.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// JSON config for the subcommand; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; nothing is written elsewhere.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for the compute kernels.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic recordings with planted state signals.
    Synth {
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Run the preprocessing pipeline on raw recording directories.
    Preprocess {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
    },
    /// Train a model on labelled preprocessed recordings.
    Train {
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
    },
    /// Predict a hypnogram for each recording.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
    },
    /// Compare predictions with reference labels.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Preprocessed recordings for per-state band power.
        #[arg(long, num_args = 1..)]
        data: Vec<PathBuf>,
    },
    /// Agreement between two label files, the first taken as reference.
    Agree {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Grad-CAM saliency maps for scored epochs.
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
    },
    /// Attention weights over context windows.
    Attention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
    },
    /// Retrain across epoch durations.
    Sweep {
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Preprocess { .. } => "preprocess",
            Command::Train { .. } => "train",
            Command::Score { .. } => "score",
            Command::Eval { .. } => "eval",
            Command::Agree { .. } => "agree",
            Command::Gradcam { .. } => "gradcam",
            Command::Attention { .. } => "attention",
            Command::Sweep { .. } => "sweep",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    /// Epoch length of the label files in seconds.
    pub epoch_s: f64,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            epoch_s: 10.0,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    /// Defaults to the checkpoint's epoch length at the recording's frame rate.
    pub epoch_s: Option<f64>,
    pub batch_size: usize,
    pub render_png: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            epoch_s: None,
            batch_size: 16,
            render_png: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub epoch_s: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { epoch_s: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcamConfig {
    pub epoch_s: Option<f64>,
    /// Class to explain; the predicted class when absent.
    pub target: Option<SleepState>,
    pub max_epochs: usize,
}

impl Default for GradcamConfig {
    fn default() -> Self {
        GradcamConfig {
            epoch_s: None,
            target: None,
            max_epochs: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub epoch_s: Option<f64>,
    pub context_s: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            epoch_s: None,
            context_s: 20.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Epoch length of the label files in seconds.
    pub base_s: f64,
    pub durations: Vec<f64>,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            base_s: 10.0,
            durations: vec![1.0, 2.0, 5.0, 10.0, 20.0],
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// SHA-256 of the canonical JSON of `config`.
    pub config_sha256: String,
    /// Effective config after defaults and flag overrides.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub threads: Option<usize>,
    pub version: String,
    pub inputs: Vec<PathBuf>,
    /// Paths relative to the output directory.
    pub outputs: Vec<PathBuf>,
    pub wall_time_s: f64,
}

/// Parses a config, reporting the JSON path of the first offending key.
pub fn parse_config<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        Error::config(key, e.into_inner().to_string())
    })
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => parse_config(&fs::read(p).map_err(|e| Error::io(p, e))?),
    }
}

/// Tracks files written below the output directory.
struct Outputs {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(root: &Path) -> Self {
        Outputs {
            root: root.to_path_buf(),
            written: Vec::new(),
        }
    }

    fn path(&mut self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.root.join(rel.as_ref());
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.written.push(rel.as_ref().to_path_buf());
        Ok(p)
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let p = self.path(rel)?;
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A directory holding `meta.json` is one recording; otherwise its
/// immediate subdirectories that do are taken in name order.
pub fn expand_recording_dirs(dirs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for d in dirs {
        if d.join("meta.json").is_file() {
            out.push(d.clone());
            continue;
        }
        let mut subs: Vec<PathBuf> = fs::read_dir(d)
            .map_err(|e| Error::io(d, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("meta.json").is_file())
            .collect();
        if subs.is_empty() {
            return Err(Error::Data(format!("{}: no recording directories found", d.display())));
        }
        subs.sort();
        out.extend(subs);
    }
    Ok(out)
}

struct Recording {
    stack: PreprocessedStack,
    labels: Option<LabelFile>,
}

fn load_recordings(dirs: &[PathBuf]) -> Result<Vec<Recording>> {
    expand_recording_dirs(dirs)?
        .iter()
        .map(|d| {
            let lp = d.join("labels.csv");
            Ok(Recording {
                stack: read_preprocessed(d)?,
                labels: if lp.is_file() { Some(LabelFile::read(&lp)?) } else { None },
            })
        })
        .collect()
}

fn labelled_epochs(recs: &[Recording], epoch_s: f64) -> Result<Vec<Epoch>> {
    let mut out = Vec::new();
    for r in recs {
        let labels = r.labels.as_ref().ok_or_else(|| {
            Error::Data(format!("recording `{}` has no labels.csv", r.stack.recording_id))
        })?;
        out.extend(epoch_stack(&r.stack, epoch_s, labels, true)?);
    }
    Ok(out)
}

fn model_epoch_s(params: &ModelParams<f32>, stack: &PreprocessedStack, given: Option<f64>) -> f64 {
    given.unwrap_or(params.arch.frames_per_epoch as f64 / stack.frame_rate_hz)
}

fn unlabelled_epochs(params: &ModelParams<f32>, stack: &PreprocessedStack, epoch_s: Option<f64>) -> Result<Vec<Epoch>> {
    epoch_stack(stack, model_epoch_s(params, stack, epoch_s), &LabelFile::default(), false)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Run<'a> {
    common: &'a CommonArgs,
    out: Outputs,
    inputs: Vec<PathBuf>,
    config: serde_json::Value,
    seed: Option<u64>,
}

fn run_synth(run: &mut Run, count: usize) -> Result<()> {
    let mut spec: SynthSpec = load_config(run.common.config.as_deref())?;
    if let Some(s) = run.common.seed {
        spec.seed = s;
    }
    spec.validate()?;
    if count == 0 {
        return Err(Error::config("count", "must be at least 1"));
    }
    run.seed = Some(spec.seed);
    run.config = serde_json::to_value(&spec)?;
    for rec in generate_many(&spec, count)? {
        let id = rec.stack.recording_id.clone();
        let dir = run.out.root.join(&id);
        write_synth(&dir, &rec)?;
        run.out.written.push(PathBuf::from(&id));
        println!("{id}: {} frames, {} epochs", rec.stack.n_frames(), rec.labels.rows.len());
    }
    Ok(())
}

fn run_preprocess(run: &mut Run, input: &[PathBuf]) -> Result<()> {
    let cfg: PreprocessConfig = load_config(run.common.config.as_deref())?;
    run.config = serde_json::to_value(&cfg)?;
    let mut all_labels = LabelFile::default();
    for dir in expand_recording_dirs(input)? {
        let raw = read_raw(&dir)?;
        let pre = run_pipeline(&raw, &cfg)?;
        let id = pre.recording_id.clone();
        write_preprocessed(&run.out.root.join(&id), &pre)?;
        run.out.written.push(PathBuf::from(&id));
        let lp = dir.join("labels.csv");
        if lp.is_file() {
            let labels = LabelFile::read(&lp)?;
            labels.write(&run.out.path(Path::new(&id).join("labels.csv"))?)?;
            all_labels.extend(labels);
        }
        println!("{id}: {} frames, {} provenance steps", pre.n_frames(), pre.provenance.len());
        run.inputs.push(dir);
    }
    if !all_labels.rows.is_empty() {
        all_labels.write(&run.out.path("labels.csv")?)?;
    }
    Ok(())
}

fn write_report(out: &mut Outputs, stem: &str, report: &MetricsReport) -> Result<()> {
    report.write_json(&out.path(format!("{stem}.json"))?)?;
    report.write_confusion_csv(&out.path(format!("{stem}_confusion.csv"))?)
}

fn apply_overrides(common: &CommonArgs, train: &mut TrainConfig, split: &mut SplitSpec) {
    if let Some(s) = common.seed {
        train.seed = s;
        split.seed = s;
    }
    if common.deterministic {
        train.deterministic = true;
    }
    // Checkpoints are written by the CLI itself so they stay below `--out`.
    train.checkpoint_dir = None;
}

fn run_train(run: &mut Run, data: &[PathBuf]) -> Result<()> {
    let mut cfg: TrainRunConfig = load_config(run.common.config.as_deref())?;
    apply_overrides(run.common, &mut cfg.train, &mut cfg.split);
    cfg.train.validate()?;
    cfg.split.validate()?;
    run.seed = Some(cfg.train.seed);
    run.config = serde_json::to_value(&cfg)?;
    let recs = load_recordings(data)?;
    let epochs = labelled_epochs(&recs, cfg.epoch_s)?;
    let exp = run_experiment(&epochs, &cfg.split, &cfg.arch, &cfg.train)?;
    save_checkpoint(&run.out.path("model.sscn")?, &exp.params)?;
    exp.log.write_csv(&run.out.path("train_log.csv")?)?;
    write_report(&mut run.out, "val_metrics", &exp.val_report)?;
    write_report(&mut run.out, "metrics", &exp.test_report)?;
    let ids = |ix: &[usize]| -> Vec<(String, usize)> {
        ix.iter().map(|&i| (epochs[i].recording_id.clone(), epochs[i].epoch_index)).collect()
    };
    run.out.json(
        "split.json",
        &serde_json::json!({
            "train": ids(&exp.split.train),
            "val": ids(&exp.split.val),
            "test": ids(&exp.split.test),
            "class_counts": exp.split.class_counts,
        }),
    )?;
    println!("test: {}", exp.test_report.summary());
    Ok(())
}

fn run_score(run: &mut Run, checkpoint: &Path, data: &[PathBuf]) -> Result<()> {
    let cfg: ScoreConfig = load_config(run.common.config.as_deref())?;
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    run.config = serde_json::to_value(&cfg)?;
    run.inputs.push(checkpoint.to_path_buf());
    let params = load_checkpoint(checkpoint)?;
    let recs = load_recordings(data)?;
    let mut predictions = LabelFile::default();
    let mut pairs: Option<(LabelFile, LabelFile)> = Some(Default::default());
    let mut epoch_len = 0.0;
    for r in &recs {
        let id = &r.stack.recording_id;
        let epoch_s = model_epoch_s(&params, &r.stack, cfg.epoch_s);
        epoch_len = epoch_s;
        let epochs = unlabelled_epochs(&params, &r.stack, cfg.epoch_s)?;
        let refs: Vec<&Epoch> = epochs.iter().collect();
        let states = predict_states(&params, &refs, cfg.batch_size)?;
        let hyp = Hypnogram::from_states(id, epoch_s, &states);
        hyp.write_csv(&run.out.path(format!("{id}.hypnogram.csv"))?)?;
        if cfg.render_png {
            hyp.write_png(&run.out.path(format!("{id}.hypnogram.png"))?)?;
        }
        let pred = LabelFile::from_sequence(id, &states);
        match (&r.labels, pairs.as_mut()) {
            (Some(l), Some((refs, preds))) => {
                let mut own = LabelFile {
                    rows: l.rows.iter().filter(|row| &row.recording_id == id).cloned().collect(),
                };
                own.rows.retain(|row| row.epoch_index < states.len());
                refs.extend(own);
                preds.extend(pred.clone());
            }
            _ => pairs = None,
        }
        predictions.extend(pred);
        println!("{id}: {} epochs scored", states.len());
    }
    predictions.write(&run.out.path("predictions.csv")?)?;
    if let Some((refs, preds)) = pairs {
        let report = score_agreement(&refs, &preds, epoch_len)?;
        write_report(&mut run.out, "metrics", &report)?;
        println!("against included labels: {}", report.summary());
    }
    Ok(())
}

fn run_eval(run: &mut Run, pred: &Path, reference: &Path, data: &[PathBuf]) -> Result<()> {
    let cfg: EvalConfig = load_config(run.common.config.as_deref())?;
    if !(cfg.epoch_s > 0.0) {
        return Err(Error::config("epoch_s", "must be > 0"));
    }
    run.config = serde_json::to_value(&cfg)?;
    run.inputs.extend([pred.to_path_buf(), reference.to_path_buf()]);
    let p = read_label_table(pred, "recording")?;
    let r = read_label_table(reference, "recording")?;
    let mut report = score_agreement(&r, &p, cfg.epoch_s)?;
    if !data.is_empty() {
        let recs = load_recordings(data)?;
        let mut traces = Vec::new();
        let mut geometry = None;
        for rec in &recs {
            let fpe = crate::dataset::frames_per_epoch(cfg.epoch_s, rec.stack.frame_rate_hz)?;
            match geometry {
                None => geometry = Some((fpe, rec.stack.frame_rate_hz)),
                Some(g) if g != (fpe, rec.stack.frame_rate_hz) => {
                    return Err(Error::Data("recordings differ in frame rate".into()));
                }
                _ => {}
            }
            traces.push((rec.stack.global_trace(), p.sequence(&rec.stack.recording_id)?));
        }
        if let Some((fpe, fs)) = geometry {
            report.band_power = Some(band_power_by_state(&traces, fpe, fs)?);
        }
    }
    write_report(&mut run.out, "metrics", &report)?;
    println!("{}", report.summary());
    Ok(())
}

fn run_agree(run: &mut Run, a: &Path, b: &Path) -> Result<()> {
    let cfg: EvalConfig = load_config(run.common.config.as_deref())?;
    run.config = serde_json::to_value(&cfg)?;
    run.inputs.extend([a.to_path_buf(), b.to_path_buf()]);
    let la = read_label_table(a, "recording")?;
    let lb = read_label_table(b, "recording")?;
    let report = score_agreement(&la, &lb, cfg.epoch_s)?;
    write_report(&mut run.out, "agreement", &report)?;
    println!("{}", report.summary());
    Ok(())
}

#[derive(Serialize)]
struct SaliencyEntry {
    recording_id: String,
    epoch_index: usize,
    label: Option<SleepState>,
    target: SleepState,
    zero: bool,
    file: String,
}

fn run_gradcam(run: &mut Run, checkpoint: &Path, data: &[PathBuf]) -> Result<()> {
    let cfg: GradcamConfig = load_config(run.common.config.as_deref())?;
    run.config = serde_json::to_value(&cfg)?;
    run.inputs.push(checkpoint.to_path_buf());
    let params = load_checkpoint(checkpoint)?;
    let mut entries = Vec::new();
    let mut mean: Option<SaliencyMap> = None;
    'outer: for r in load_recordings(data)? {
        let labels = r.labels.clone().unwrap_or_default().for_recording(&r.stack.recording_id);
        for e in unlabelled_epochs(&params, &r.stack, cfg.epoch_s)? {
            if entries.len() >= cfg.max_epochs {
                break 'outer;
            }
            let target = match cfg.target {
                Some(t) => t,
                None => SleepState::from_index(params.forward(&e.frames)?.class())?,
            };
            let map = grad_cam(&params, &e.frames, target)?;
            let stem = format!("{}_{:05}_{}", e.recording_id, e.epoch_index, target.code());
            export_saliency(&run.out.root.join("saliency"), &stem, &map)?;
            run.out.written.extend([format!("saliency/{stem}.png"), format!("saliency/{stem}.f32")].map(PathBuf::from));
            match mean.as_mut() {
                None => mean = Some(map.clone()),
                Some(m) => m.map.iter_mut().zip(&map.map).for_each(|(a, b)| *a += b),
            }
            entries.push(SaliencyEntry {
                recording_id: e.recording_id.clone(),
                epoch_index: e.epoch_index,
                label: labels.get(&e.epoch_index).copied(),
                target,
                zero: map.zero,
                file: stem,
            });
        }
    }
    if let Some(mut m) = mean {
        let n = entries.len() as f64;
        m.map.iter_mut().for_each(|v| *v /= n);
        m.frames.clear();
        export_saliency(&run.out.root.join("saliency"), "mean", &m)?;
        run.out.written.extend(["saliency/mean.png", "saliency/mean.f32"].map(PathBuf::from));
    }
    run.out.json("saliency.json", &entries)?;
    println!("{} saliency maps written", entries.len());
    Ok(())
}

fn run_attention(run: &mut Run, checkpoint: &Path, data: &[PathBuf]) -> Result<()> {
    let cfg: AttentionConfig = load_config(run.common.config.as_deref())?;
    run.config = serde_json::to_value(&cfg)?;
    run.inputs.push(checkpoint.to_path_buf());
    let params = load_checkpoint(checkpoint)?;
    let mut traces = Vec::new();
    let mut skipped = 0;
    for r in load_recordings(data)? {
        let labels = r.labels.clone().unwrap_or_default();
        let epoch_s = model_epoch_s(&params, &r.stack, cfg.epoch_s);
        let require = !labels.for_recording(&r.stack.recording_id).is_empty();
        let epochs = epoch_stack(&r.stack, epoch_s, &labels, require)?;
        let (windows, s) = context_windows(&epochs, cfg.context_s)?;
        skipped += s;
        for w in &windows {
            traces.push(extract_attention(&params, w)?);
        }
    }
    write_attention_csv(&run.out.path("attention.csv")?, &traces)?;
    run.out.json("attention_summary.json", &aggregate_attention(&traces)?)?;
    println!("{} windows, {skipped} epochs without full context", traces.len());
    Ok(())
}

fn run_sweep(run: &mut Run, data: &[PathBuf]) -> Result<()> {
    let mut cfg: SweepConfig = load_config(run.common.config.as_deref())?;
    apply_overrides(run.common, &mut cfg.train, &mut cfg.split);
    cfg.train.validate()?;
    cfg.split.validate()?;
    run.seed = Some(cfg.train.seed);
    run.config = serde_json::to_value(&cfg)?;
    let mut recs = Vec::new();
    for r in load_recordings(data)? {
        let labels = r.labels.as_ref().ok_or_else(|| {
            Error::Data(format!("recording `{}` has no labels.csv", r.stack.recording_id))
        })?;
        let seq = labels.sequence(&r.stack.recording_id)?;
        recs.push((r.stack, seq));
    }
    let rows = duration_sweep(&recs, cfg.base_s, &cfg.durations, &cfg.split, &cfg.arch, &cfg.train)?;
    write_sweep_csv(&run.out.path("sweep.csv")?, &rows)?;
    for r in &rows {
        println!(
            "{:>5.1} s: n={} macro_f1={:.4} kappa={:.4}",
            r.duration_s, r.n_epochs, r.macro_f1, r.kappa
        );
    }
    Ok(())
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::config("threads", "must be at least 1"));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Runs one parsed invocation and returns its manifest.
pub fn run(cli: &Cli) -> Result<RunManifest> {
    let start = Instant::now();
    let common = &cli.common;
    let out_dir = common
        .out
        .as_deref()
        .ok_or_else(|| Error::config("out", "--out is required"))?;
    configure_threads(common.threads)?;
    let mut run = Run {
        common,
        out: Outputs::new(out_dir),
        inputs: Vec::new(),
        config: serde_json::Value::Null,
        seed: common.seed,
    };
    if let Some(c) = &common.config {
        run.inputs.push(c.clone());
    }
    match &cli.command {
        Command::Synth { count } => run_synth(&mut run, *count)?,
        Command::Preprocess { input } => run_preprocess(&mut run, input)?,
        Command::Train { data } => {
            run.inputs.extend(data.iter().cloned());
            run_train(&mut run, data)?
        }
        Command::Score { checkpoint, data } => {
            run.inputs.extend(data.iter().cloned());
            run_score(&mut run, checkpoint, data)?
        }
        Command::Eval { pred, reference, data } => {
            run.inputs.extend(data.iter().cloned());
            run_eval(&mut run, pred, reference, data)?
        }
        Command::Agree { a, b } => run_agree(&mut run, a, b)?,
        Command::Gradcam { checkpoint, data } => {
            run.inputs.extend(data.iter().cloned());
            run_gradcam(&mut run, checkpoint, data)?
        }
        Command::Attention { checkpoint, data } => {
            run.inputs.extend(data.iter().cloned());
            run_attention(&mut run, checkpoint, data)?
        }
        Command::Sweep { data } => {
            run.inputs.extend(data.iter().cloned());
            run_sweep(&mut run, data)?
        }
    }
    let canonical = serde_json::to_vec(&run.config)?;
    let manifest = RunManifest {
        subcommand: cli.command.name().to_string(),
        config_sha256: sha256_hex(&canonical),
        config: run.config,
        seed: run.seed,
        deterministic: common.deterministic,
        threads: common.threads,
        version: env!("CARGO_PKG_VERSION").to_string(),
        inputs: run.inputs,
        outputs: run.out.written,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_atomic(&out_dir.join("manifest.json"), &bytes)?;
    Ok(manifest)
}

/// Entry point of the `wfci-sleep` binary.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(&cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
