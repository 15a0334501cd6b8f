//! AUROC, experiment configuration and the gen-data / train / score / eval
//! workflows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::anomaly::{self, DecoderConfig, DecoderMode, ScoreSeries, SMOOTHING_WINDOW};
use crate::data::{self, DatasetSpec, SequenceRecord, SyntheticConfig};
use crate::encoder::{EncoderConfig, PointCloudFrame};
use crate::engine::checkpoint::Checkpoint;
use crate::engine::gradcheck::{finite_diff_check, GradCheckReport};
use crate::engine::optim::OptimizerState;
use crate::engine::params::ParamStore;
use crate::error::{Error, Result};
use crate::model::{self, LossKind, Model, ModelConfig, TrainSettings, WindowSet};
use crate::transformer::{ForwardCtx, Space, TransformerConfig};

/// Rank-based (Mann-Whitney) AUROC with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidDimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NumericalDomain("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives stays an exact integer.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        let tied_pos = idx[i..=j].iter().filter(|&&k| labels[k] != 0).count() as u128;
        twice_rank_sum += twice_mid * tied_pos;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Experiment settings, read from `key = value` text grouped in
/// `[geometry]`, `[model]`, `[train]`, `[data]` and `[paths]` sections.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub space: Space,
    pub loss: LossKind,
    pub task: DecoderMode,

    pub layers: usize,
    pub heads: usize,
    /// Spatial channels `D`; tokens carry `D+1` coordinates.
    pub dim: usize,
    /// Input frames `T`.
    pub frames: usize,
    /// Points per frame `N`.
    pub points: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub positional: bool,
    pub epsilon: f64,
    pub detach_target: bool,

    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub dropout: f64,

    pub train_sequences: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    pub train_frames: usize,
    pub test_frames: usize,
    pub onset: (usize, usize),
    pub noise: f64,

    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub scores_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            space: Space::Hyperbolic,
            loss: LossKind::Lorentzian,
            task: DecoderMode::Prediction,
            layers: 2,
            heads: 4,
            dim: 31,
            frames: 3,
            points: 256,
            encoder_hidden: vec![16, 32],
            decoder_hidden: vec![31],
            positional: true,
            epsilon: 1.0,
            detach_target: true,
            epochs: 30,
            lr: 1e-3,
            batch_size: 8,
            seed: 42,
            weight_decay: 1e-2,
            dropout: 0.0,
            train_sequences: 200,
            test_normal: 40,
            test_anomalous: 40,
            train_frames: 8,
            test_frames: 32,
            onset: (8, 20),
            noise: 0.005,
            data_dir: None,
            checkpoint: None,
            scores_dir: None,
        }
    }
}

const SECTIONS: [(&str, &[&str]); 5] = [
    ("geometry", &["space", "loss", "task"]),
    (
        "model",
        &[
            "layers",
            "heads",
            "dim",
            "frames",
            "points",
            "encoder_hidden",
            "decoder_hidden",
            "positional",
            "epsilon",
            "detach_target",
        ],
    ),
    ("train", &["epochs", "lr", "batch_size", "seed", "weight_decay", "dropout"]),
    (
        "data",
        &["train_sequences", "test_normal", "test_anomalous", "train_frames", "test_frames", "onset", "noise"],
    ),
    ("paths", &["data", "checkpoint", "scores"]),
];

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_value(key, p.trim())).collect()
}

fn parse_range(key: &str, v: &str) -> Result<(usize, usize)> {
    let (a, b) = v
        .split_once("..")
        .ok_or_else(|| Error::InvalidConfig(format!("{key}: expected lo..hi")))?;
    Ok((parse_value(key, a.trim())?, parse_value(key, b.trim())?))
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<&str> = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                section = Some(
                    SECTIONS
                        .iter()
                        .find(|(s, _)| *s == name)
                        .map(|(s, _)| *s)
                        .ok_or_else(|| Error::InvalidConfig(format!("line {}: unknown section [{name}]", n + 1)))?,
                );
                continue;
            }
            let sec = section.ok_or_else(|| Error::InvalidConfig(format!("line {}: key outside a section", n + 1)))?;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(sec, k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let known = SECTIONS.iter().any(|(s, keys)| *s == section && keys.contains(&key));
        if !known {
            return Err(Error::InvalidConfig(format!("unknown key {key} in [{section}]")));
        }
        match key {
            "space" => self.space = v.parse()?,
            "loss" => self.loss = v.parse()?,
            "task" => {
                self.task = match v {
                    "prediction" => DecoderMode::Prediction,
                    "classification" => DecoderMode::Classification,
                    _ => return Err(Error::InvalidConfig(format!("unknown task {v:?}"))),
                }
            }
            "layers" => self.layers = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "dim" => self.dim = parse_value(key, v)?,
            "frames" => self.frames = parse_value(key, v)?,
            "points" => self.points = parse_value(key, v)?,
            "encoder_hidden" => self.encoder_hidden = parse_list(key, v)?,
            "decoder_hidden" => self.decoder_hidden = parse_list(key, v)?,
            "positional" => self.positional = parse_value(key, v)?,
            "epsilon" => self.epsilon = parse_value(key, v)?,
            "detach_target" => self.detach_target = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "dropout" => self.dropout = parse_value(key, v)?,
            "train_sequences" => self.train_sequences = parse_value(key, v)?,
            "test_normal" => self.test_normal = parse_value(key, v)?,
            "test_anomalous" => self.test_anomalous = parse_value(key, v)?,
            "train_frames" => self.train_frames = parse_value(key, v)?,
            "test_frames" => self.test_frames = parse_value(key, v)?,
            "onset" => self.onset = parse_range(key, v)?,
            "noise" => self.noise = parse_value(key, v)?,
            "data" => self.data_dir = Some(PathBuf::from(v)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "scores" => self.scores_dir = Some(PathBuf::from(v)),
            _ => unreachable!("key table and setter agree"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.layers, self.heads, self.dim, self.frames, self.points, self.batch_size];
        if sizes.contains(&0) {
            return Err(Error::InvalidConfig("all sizes must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("learning rate and weight decay".into()));
        }
        self.model_config()?.validate()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut widths = self.encoder_hidden.clone();
        widths.push(self.dim);
        Ok(ModelConfig {
            encoder: EncoderConfig::new(widths)?,
            transformer: TransformerConfig {
                dim: self.dim,
                heads: self.heads,
                layers: self.layers,
                window: self.frames,
                dropout: self.dropout,
                epsilon: self.epsilon,
                positional: self.positional,
                space: self.space,
            },
            decoder: DecoderConfig {
                hidden: self.decoder_hidden.clone(),
                mode: self.task,
            },
            loss: self.loss,
            detach_target: self.detach_target,
        })
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            train_sequences: self.train_sequences,
            test_normal: self.test_normal,
            test_anomalous: self.test_anomalous,
            train_frames: self.train_frames,
            test_frames: self.test_frames,
            scene: SyntheticConfig {
                points: self.points,
                onset: self.onset,
                noise: self.noise,
                ..SyntheticConfig::default()
            },
            seed: self.seed,
        }
    }

    /// Canonical text listing every effective setting; `parse` of the result
    /// gives back `self`.
    pub fn to_text(&self) -> String {
        let task = match self.task {
            DecoderMode::Prediction => "prediction",
            DecoderMode::Classification => "classification",
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut kv: BTreeMap<&str, String> = BTreeMap::from([
            ("space", self.space.to_string()),
            ("loss", self.loss.to_string()),
            ("task", task.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("dim", self.dim.to_string()),
            ("frames", self.frames.to_string()),
            ("points", self.points.to_string()),
            ("encoder_hidden", join(&self.encoder_hidden)),
            ("decoder_hidden", join(&self.decoder_hidden)),
            ("positional", self.positional.to_string()),
            ("epsilon", format!("{:?}", self.epsilon)),
            ("detach_target", self.detach_target.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("dropout", format!("{:?}", self.dropout)),
            ("train_sequences", self.train_sequences.to_string()),
            ("test_normal", self.test_normal.to_string()),
            ("test_anomalous", self.test_anomalous.to_string()),
            ("train_frames", self.train_frames.to_string()),
            ("test_frames", self.test_frames.to_string()),
            ("onset", format!("{}..{}", self.onset.0, self.onset.1)),
            ("noise", format!("{:?}", self.noise)),
        ]);
        for (k, v) in [
            ("data", path(&self.data_dir)),
            ("checkpoint", path(&self.checkpoint)),
            ("scores", path(&self.scores_dir)),
        ] {
            if let Some(v) = v {
                kv.insert(k, v);
            }
        }
        let mut out = String::new();
        for (section, keys) in SECTIONS {
            let present: Vec<_> = keys.iter().filter_map(|k| kv.get(k).map(|v| (k, v))).collect();
            if present.is_empty() {
                continue;
            }
            if !out.is_empty() {
                out.push('\n');
            }
            writeln!(out, "[{section}]").unwrap();
            for (k, v) in present {
                writeln!(out, "{k} = {v}").unwrap();
            }
        }
        out
    }

    /// Settings that determine parameter shapes and the forward pass.
    fn architecture(&self) -> Result<ModelConfig> {
        let mut m = self.model_config()?;
        m.transformer.dropout = 0.0;
        m.detach_target = false;
        Ok(m)
    }
}

/// Generates the synthetic train/test split described by `config` under
/// `out/train` and `out/test`.
pub fn run_gen_data(config: &ExperimentConfig, out: &Path) -> Result<(usize, usize)> {
    config.dataset_spec().write(out)
}

/// Frames of `rec` with exactly `points` points each.
pub fn prepare_frames(rec: &SequenceRecord, points: usize, seed: u64) -> Result<Vec<PointCloudFrame>> {
    rec.frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if f.len() == points {
                Ok(f.clone())
            } else {
                data::downsample_frame(f, points, seed ^ ((i as u64) << 20))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: OptimizerState,
    /// Mean loss of each epoch.
    pub history: Vec<f64>,
}

/// Trains on in-memory videos. In the prediction setting windows touching
/// an anomalous frame are left out.
pub fn train_model(
    config: &ExperimentConfig,
    videos: &[SequenceRecord],
    mut log: impl FnMut(&str),
) -> Result<Trained> {
    config.validate()?;
    let mc = config.model_config()?;
    let mut store = ParamStore::new();
    let model = Model::register(&mut store, &mc, config.seed)?;
    let prepared: Vec<(Vec<PointCloudFrame>, Vec<u8>)> = videos
        .iter()
        .enumerate()
        .map(|(v, rec)| Ok((prepare_frames(rec, config.points, config.seed ^ v as u64)?, rec.labels.clone())))
        .collect::<Result<_>>()?;
    let wf = mc.window_frames();
    let mut pieces: Vec<(&[PointCloudFrame], &[u8])> = Vec::new();
    for (frames, labels) in &prepared {
        if mc.mode() == DecoderMode::Classification {
            pieces.push((frames, labels));
            continue;
        }
        // Split at anomalous frames so no window contains one.
        let mut start = 0;
        for end in (0..=labels.len()).filter(|&i| i == labels.len() || labels[i] != 0) {
            if end - start >= wf {
                pieces.push((&frames[start..end], &labels[start..end]));
            }
            start = end + 1;
        }
    }
    let windows = WindowSet::new(pieces, wf)?;
    let horizon = config.epochs as u64 * model::steps_per_epoch(windows.len(), config.batch_size);
    let mut optimizer = OptimizerState::new(&store, config.lr, config.weight_decay, horizon);
    log(&format!(
        "training on {} windows from {} videos for {} epochs",
        windows.len(),
        videos.len(),
        config.epochs
    ));
    let settings = TrainSettings {
        epochs: config.epochs,
        batch_size: config.batch_size,
        seed: config.seed,
    };
    let history = model::train_epochs(&model, &mut store, &mut optimizer, &windows, &settings, |e, loss| {
        log(&format!("epoch {} loss {loss:.6}", e + 1))
    })?;
    Ok(Trained {
        model,
        store,
        optimizer,
        history,
    })
}

/// Trains on `data/train` and writes a checkpoint carrying the canonical
/// configuration text.
pub fn run_training(
    config: &ExperimentConfig,
    data_dir: &Path,
    checkpoint: &Path,
    log: impl FnMut(&str),
) -> Result<Trained> {
    let videos = data::load_split(&data_dir.join("train"))?;
    let trained = train_model(config, &videos, log)?;
    Checkpoint {
        config_text: config.to_text(),
        params: trained.store.clone(),
        optimizer: trained.optimizer.clone(),
    }
    .write(checkpoint)?;
    Ok(trained)
}

/// The configuration a checkpoint was trained with.
pub fn checkpoint_config(checkpoint: &Path) -> Result<ExperimentConfig> {
    let ck = Checkpoint::read(checkpoint)?;
    ExperimentConfig::parse(&ck.config_text).map_err(|e| Error::IncompatibleCheckpoint(format!("stored configuration: {e}")))
}

/// Rebuilds the model described by `config` and fills it from `checkpoint`.
pub fn load_model(config: &ExperimentConfig, checkpoint: &Path) -> Result<(Model, ParamStore)> {
    let ck = Checkpoint::read(checkpoint)?;
    let saved = ExperimentConfig::parse(&ck.config_text)
        .map_err(|e| Error::IncompatibleCheckpoint(format!("stored configuration: {e}")))?;
    if saved.architecture()? != config.architecture()? || saved.points != config.points {
        return Err(Error::IncompatibleCheckpoint(
            "model settings differ from the checkpoint's configuration".into(),
        ));
    }
    let mut store = ParamStore::new();
    let model = Model::register(&mut store, &config.model_config()?, config.seed)?;
    ck.load_into(&mut store)?;
    Ok((model, store))
}

const SCORE_CHUNK: usize = 32;

/// Raw per-frame scores of one video. Frame `t` gets the score of the
/// window ending at `t`; frames before the first full window take the
/// first computable score.
pub fn score_frames(model: &Model, store: &ParamStore, frames: &[PointCloudFrame]) -> Result<Vec<f64>> {
    let wf = model.config().window_frames();
    let starts = data::window_starts(frames.len(), wf);
    if starts.is_empty() {
        return Err(Error::InvalidDimension(format!(
            "video of {} frames is shorter than a {wf}-frame window",
            frames.len()
        )));
    }
    let mut window_scores = Vec::with_capacity(starts.len());
    for chunk in starts.chunks(SCORE_CHUNK) {
        let first = chunk[0];
        let refs: Vec<&PointCloudFrame> = frames[first..chunk[chunk.len() - 1] + wf].iter().collect();
        let local: Vec<usize> = chunk.iter().map(|s| s - first).collect();
        window_scores.extend(model.window_scores(store, &refs, &local)?);
    }
    let mut raw = vec![window_scores[0]; wf - 1];
    raw.extend(window_scores);
    Ok(raw)
}

/// Scores one video and smooths with the standard window.
pub fn score_video(model: &Model, store: &ParamStore, rec: &SequenceRecord, points: usize, seed: u64) -> Result<ScoreSeries> {
    let frames = prepare_frames(rec, points, seed)?;
    let raw = score_frames(model, store, &frames)?;
    let mut s = ScoreSeries::new(rec.video_id.clone(), raw, rec.labels.clone())?;
    s.category = rec.category().map(str::to_string);
    anomaly::moving_average(&s, SMOOTHING_WINDOW)
}

/// Scores every video in parallel; results keep the input order.
pub fn score_videos(
    model: &Model,
    store: &ParamStore,
    videos: &[SequenceRecord],
    config: &ExperimentConfig,
) -> Result<Vec<ScoreSeries>> {
    videos
        .par_iter()
        .enumerate()
        .map(|(v, rec)| score_video(model, store, rec, config.points, config.seed ^ v as u64))
        .collect()
}

/// Scores `data/test` with the checkpointed model and writes one score file
/// per video into `out`.
pub fn run_scoring(config: &ExperimentConfig, checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<Vec<ScoreSeries>> {
    let (model, store) = load_model(config, checkpoint)?;
    let videos = data::load_split(&data_dir.join("test"))?;
    let series = score_videos(&model, &store, &videos, config)?;
    std::fs::create_dir_all(out)?;
    for s in &series {
        anomaly::write_scores(s, &out.join(format!("{}.csv", s.video_id)))?;
    }
    Ok(series)
}

pub fn load_score_dir(dir: &Path) -> Result<Vec<ScoreSeries>> {
    if !dir.is_dir() {
        return Err(Error::DataNotFound(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::DataNotFound(dir.to_path_buf()));
    }
    files.iter().map(|p| anomaly::read_scores(p)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryAuroc {
    pub category: String,
    pub frames: usize,
    pub anomalous: usize,
    pub auroc_raw: f64,
    pub auroc_smoothed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub videos: usize,
    pub frames: usize,
    pub anomalous: usize,
    pub auroc_raw: f64,
    pub auroc_smoothed: f64,
    pub categories: Vec<CategoryAuroc>,
    pub warnings: Vec<String>,
    /// Configuration text echoed at the top of both report forms.
    pub config_echo: Option<String>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        if let Some(echo) = &self.config_echo {
            for line in echo.lines() {
                writeln!(s, "# {line}").unwrap();
            }
        }
        writeln!(s, "{} videos", self.videos).unwrap();
        writeln!(s, "{:<16} {:>8} {:>10} {:>10} {:>15}", "scope", "frames", "anomalous", "auroc_raw", "auroc_smoothed").unwrap();
        let row = |s: &mut String, name: &str, f: usize, a: usize, r: f64, m: f64| {
            writeln!(s, "{name:<16} {f:>8} {a:>10} {r:>10.4} {m:>15.4}").unwrap();
        };
        row(&mut s, "all", self.frames, self.anomalous, self.auroc_raw, self.auroc_smoothed);
        for c in &self.categories {
            row(&mut s, &c.category, c.frames, c.anomalous, c.auroc_raw, c.auroc_smoothed);
        }
        for w in &self.warnings {
            writeln!(s, "warning: {w}").unwrap();
        }
        s
    }

    pub fn to_delimited(&self) -> String {
        let mut s = String::new();
        if let Some(echo) = &self.config_echo {
            for line in echo.lines() {
                writeln!(s, "# {line}").unwrap();
            }
        }
        s.push_str("scope,frames,anomalous,auroc_raw,auroc_smoothed\n");
        writeln!(s, "all,{},{},{:?},{:?}", self.frames, self.anomalous, self.auroc_raw, self.auroc_smoothed).unwrap();
        for c in &self.categories {
            writeln!(s, "{},{},{},{:?},{:?}", c.category, c.frames, c.anomalous, c.auroc_raw, c.auroc_smoothed).unwrap();
        }
        s
    }

    /// Writes `report.txt` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), self.to_table())?;
        std::fs::write(dir.join("report.csv"), self.to_delimited())?;
        Ok(())
    }
}

/// Pooled frame-level AUROC over every series, plus one value per category.
/// Categories whose frames carry a single label are skipped with a warning.
pub fn run_eval(series: &[ScoreSeries]) -> Result<EvalReport> {
    let concat = |sel: &dyn Fn(&ScoreSeries) -> bool| {
        let (mut raw, mut sm, mut lab) = (Vec::new(), Vec::new(), Vec::new());
        for s in series.iter().filter(|s| sel(s)) {
            raw.extend_from_slice(&s.raw);
            sm.extend_from_slice(&s.smoothed);
            lab.extend_from_slice(&s.labels);
        }
        (raw, sm, lab)
    };
    let (raw, sm, lab) = concat(&|_| true);
    let auroc_raw = auroc(&raw, &lab)?;
    let auroc_smoothed = auroc(&sm, &lab)?;
    let mut names: Vec<&str> = series.iter().filter_map(|s| s.category.as_deref()).collect();
    names.sort_unstable();
    names.dedup();
    let mut categories = Vec::new();
    let mut warnings = Vec::new();
    for name in names {
        let (r, m, l) = concat(&|s| s.category.as_deref() == Some(name));
        match (auroc(&r, &l), auroc(&m, &l)) {
            (Ok(ar), Ok(am)) => categories.push(CategoryAuroc {
                category: name.to_string(),
                frames: l.len(),
                anomalous: l.iter().filter(|&&x| x != 0).count(),
                auroc_raw: ar,
                auroc_smoothed: am,
            }),
            (Err(Error::DegenerateLabels), _) => {
                warnings.push(format!("category {name} skipped: its frames carry a single label"))
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    Ok(EvalReport {
        videos: series.len(),
        frames: lab.len(),
        anomalous: lab.iter().filter(|&&x| x != 0).count(),
        auroc_raw,
        auroc_smoothed,
        categories,
        warnings,
        config_echo: None,
    })
}

/// Finite-difference check of the configured model's training loss on a
/// single synthetic window, for every trainable parameter whose name passes
/// `filter`. The target is kept differentiable here, since finite
/// differences cannot see a stop-gradient.
pub fn run_check_grad(config: &ExperimentConfig, step: f64, filter: impl Fn(&str) -> bool) -> Result<GradCheckReport> {
    let mut mc = config.model_config()?;
    mc.detach_target = false;
    let mut store = ParamStore::new();
    let model = Model::register(&mut store, &mc, config.seed)?;
    let video = data::generate_synthetic_video(
        &SyntheticConfig {
            frames: mc.window_frames().max(2),
            points: config.points,
            onset: (1, 1),
            seed: config.seed,
            ..SyntheticConfig::default()
        },
        "gradcheck",
    )?;
    let refs: Vec<&PointCloudFrame> = video.frames.iter().collect();
    let labels: Vec<u8> = (0..refs.len()).map(|i| (i % 2) as u8).collect();
    finite_diff_check(
        &store,
        step,
        |_, name| filter(name),
        |s, g| {
            let rows = model.window_rows(g, s, &refs, &[0], Some(&labels), &mut ForwardCtx::eval())?;
            Ok(g.mean(rows))
        },
    )
}

#[cfg(test)]
mod tests;
