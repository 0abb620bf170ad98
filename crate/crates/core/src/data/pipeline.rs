//! File-level commands: extract, train, eval and predict.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::audio::load_wav;
use crate::dataset::{ClipExample, Dataset};
use crate::ensemble::{ensemble_predict, ConfusableSet};
use crate::error::{bail, Error, Result};
use crate::eval::{evaluate_fold, format_report, FoldEvaluation};
use crate::features::{fit_global_stats, read_fbank, read_stats, write_fbank, write_stats, FbankMatrix, Frontend, FrontendConfig, GlobalNormStats};
use crate::fusion::PredictionRecord;
use crate::model::SamGcnn;
use crate::train::{validation_split, Checkpoint, EpochLog, TrainOutcome, Trainer, LOG_HEADER};

use super::config::RunConfig;
use super::manifest::{Manifest, ManifestRow, Split, CLASS_NAMES};

/// Sidecar listing every emitted feature file.
pub const FEATURE_INDEX: &str = "features.csv";
const FEATURE_INDEX_HEADER: [&str; 3] = ["clip_id", "channel", "path"];

pub fn stats_path(features_dir: &Path, fold: u8) -> PathBuf {
    features_dir.join(format!("stats_fold{fold}.txt"))
}

pub fn feature_file_name(clip_id: &str, channel: usize) -> String {
    format!("{clip_id}.ch{channel}.fbk")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractSummary {
    pub feature_files: usize,
    /// Folds with training rows and the statistics fitted on them.
    pub stats: Vec<(u8, GlobalNormStats)>,
}

/// Log-mel features of every channel of every manifest clip, plus per-fold statistics
/// fitted on that fold's training rows.
pub fn cmd_extract(manifest: &Manifest, frontend: &FrontendConfig, out_dir: impl AsRef<Path>) -> Result<ExtractSummary> {
    let out_dir = out_dir.as_ref();
    let missing: Vec<String> = manifest
        .rows
        .iter()
        .map(|r| manifest.audio_path(r))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        bail!(Data, "{} audio file(s) missing: {}", missing.len(), missing.join(", "));
    }
    fs::create_dir_all(out_dir)?;
    let front = Frontend::new(frontend.clone())?;

    let per_clip: Vec<Vec<FbankMatrix>> = manifest
        .rows
        .par_iter()
        .map(|row| {
            let mut clip = load_wav(manifest.audio_path(row))?;
            clip.clip_id = row.clip_id.clone();
            let fbanks = (0..clip.num_channels()).map(|c| front.extract(&clip, c)).collect::<Result<Vec<_>>>()?;
            for f in &fbanks {
                write_fbank(out_dir.join(feature_file_name(&row.clip_id, f.channel_index)), f)?;
            }
            Ok(fbanks)
        })
        .collect::<Result<_>>()?;

    let mut index = csv::Writer::from_writer(Vec::new());
    let mut record = |fields: &[&str]| index.write_record(fields).expect("writing to memory");
    record(&FEATURE_INDEX_HEADER);
    for (row, fbanks) in manifest.rows.iter().zip(&per_clip) {
        for f in fbanks {
            record(&[&row.clip_id, &f.channel_index.to_string(), &feature_file_name(&row.clip_id, f.channel_index)]);
        }
    }
    fs::write(out_dir.join(FEATURE_INDEX), index.into_inner().expect("flushing to memory"))?;

    let mut stats = Vec::new();
    for fold in manifest.folds() {
        let train: Vec<FbankMatrix> = manifest
            .rows
            .iter()
            .zip(&per_clip)
            .filter(|(r, _)| r.fold == fold && r.split == Split::Train)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        if train.is_empty() {
            continue;
        }
        let s = fit_global_stats(&train)?;
        write_stats(stats_path(out_dir, fold), &s)?;
        stats.push((fold, s));
    }
    Ok(ExtractSummary { feature_files: per_clip.iter().map(Vec::len).sum(), stats })
}

/// Feature files per clip, ordered by channel.
#[derive(Debug, Clone, Default)]
pub struct FeatureIndex {
    dir: PathBuf,
    files: HashMap<String, Vec<PathBuf>>,
}

impl FeatureIndex {
    pub fn load(features_dir: impl AsRef<Path>) -> Result<Self> {
        let dir = features_dir.as_ref().to_path_buf();
        let path = dir.join(FEATURE_INDEX);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("cannot read feature index {}: {e}", path.display())))?;
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut by_clip: HashMap<String, Vec<(usize, PathBuf)>> = HashMap::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 2)))?;
            let channel: usize = rec[1].parse().map_err(|_| Error::Data(format!("{} line {}: bad channel", path.display(), i + 2)))?;
            by_clip.entry(rec[0].to_string()).or_default().push((channel, dir.join(&rec[2])));
        }
        let files = by_clip
            .into_iter()
            .map(|(k, mut v)| {
                v.sort();
                (k, v.into_iter().map(|(_, p)| p).collect())
            })
            .collect();
        Ok(Self { dir, files })
    }

    pub fn fbanks(&self, clip_id: &str) -> Result<Vec<FbankMatrix>> {
        let Some(paths) = self.files.get(clip_id) else {
            bail!(Data, "no features for clip '{}' in {}", clip_id, self.dir.display());
        };
        paths.iter().map(|p| read_fbank(p, clip_id)).collect()
    }

    /// Normalized examples for `rows`, labeled through `relabel`.
    pub fn dataset(&self, rows: &[&ManifestRow], stats: &GlobalNormStats, relabel: impl Fn(usize) -> usize + Sync) -> Result<Dataset> {
        let clips: Vec<ClipExample> = rows
            .par_iter()
            .map(|r| ClipExample::from_fbanks(r.clip_id.clone(), Some(relabel(r.label)), &self.fbanks(&r.clip_id)?, stats))
            .collect::<Result<_>>()?;
        let Some(first) = self.files.get(&rows.first().map_or(String::new(), |r| r.clip_id.clone())) else {
            return Ok(Dataset::new(stats.mean.len(), 0));
        };
        let f = read_fbank(&first[0], "")?;
        let mut d = Dataset::new(f.bins(), f.frames());
        for c in clips {
            d.push(c)?;
        }
        Ok(d)
    }
}

/// Training rows of `fold` and the validation part of its test rows, after `label_subset`.
pub struct FoldData {
    pub stats: GlobalNormStats,
    pub train: Dataset,
    pub validation: Dataset,
}

fn subset_map(cfg: &RunConfig) -> impl Fn(usize) -> Option<usize> + Sync + '_ {
    move |label| match &cfg.label_subset {
        None => Some(label),
        Some(s) => s.iter().position(|&l| l == label),
    }
}

pub fn load_fold(manifest: &Manifest, fold: u8, cfg: &RunConfig, features_dir: &Path) -> Result<FoldData> {
    let stats_file = stats_path(features_dir, fold);
    if !stats_file.is_file() {
        bail!(Data, "no normalization statistics for fold {} ({})", fold, stats_file.display());
    }
    let stats = read_stats(&stats_file)?;
    let index = FeatureIndex::load(features_dir)?;
    let map = subset_map(cfg);
    let keep = |split| -> Vec<&ManifestRow> { manifest.rows_for(fold, split).into_iter().filter(|r| map(r.label).is_some()).collect() };
    let train_rows = keep(Split::Train);
    if train_rows.is_empty() {
        bail!(Data, "fold {} has no training rows", fold);
    }
    let test_rows = keep(Split::Test);
    let relabel = |l| map(l).expect("filtered");
    let val_rows: Vec<&ManifestRow> = if test_rows.is_empty() {
        Vec::new()
    } else {
        let labels: Vec<usize> = test_rows.iter().map(|r| relabel(r.label)).collect();
        let (val, _) = validation_split(&labels, cfg.train.validation_fraction, cfg.train.seed)?;
        val.into_iter().map(|i| test_rows[i]).collect()
    };
    let train = index.dataset(&train_rows, &stats, relabel)?;
    let mut validation = index.dataset(&val_rows, &stats, relabel)?;
    if validation.is_empty() {
        validation = Dataset::new(train.bins, train.frames);
    }
    Ok(FoldData { stats, train, validation })
}

/// Trains on `fold`, writes the best checkpoint and a per-epoch log at `<checkpoint>.log`.
pub fn cmd_train(
    manifest: &Manifest,
    fold: u8,
    cfg: &RunConfig,
    features_dir: impl AsRef<Path>,
    checkpoint: impl AsRef<Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_fold(manifest, fold, cfg, features_dir.as_ref())?;
    let model_cfg = cfg.model_config(data.train.bins, data.train.frames);
    let model = SamGcnn::new(model_cfg, cfg.train.seed)?;
    let mut lines = vec![LOG_HEADER.to_string()];
    let outcome = Trainer::new(model, cfg.train.clone(), &data.train, &data.validation)?
        .with_norm(data.stats)
        .run(|l| {
            lines.push(l.to_line());
            on_epoch(l);
        })?;
    let checkpoint = checkpoint.as_ref();
    outcome.best.save(checkpoint)?;
    let mut log_path = checkpoint.as_os_str().to_owned();
    log_path.push(".log");
    fs::write(PathBuf::from(log_path), lines.join("\n") + "\n")?;
    Ok(outcome)
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub evaluation: FoldEvaluation,
    pub records: Vec<PredictionRecord>,
    pub report: String,
}

fn require_norm(ckpt: &Checkpoint) -> Result<&GlobalNormStats> {
    ckpt.norm.as_ref().ok_or_else(|| Error::Config("checkpoint carries no normalization statistics".into()))
}

fn check_pair(first: &Checkpoint, second: Option<&Checkpoint>) -> Result<()> {
    if first.model.num_classes() != CLASS_NAMES.len() {
        bail!(Config, "primary checkpoint has {} classes, expected {}", first.model.num_classes(), CLASS_NAMES.len());
    }
    if let Some(s) = second {
        if s.norm != first.norm {
            bail!(Config, "the two checkpoints were trained with different normalization statistics");
        }
        if s.model.config.input_shape() != first.model.config.input_shape() {
            bail!(Config, "the two checkpoints expect different feature geometry");
        }
    }
    Ok(())
}

fn predict_one(clip: &ClipExample, first: &SamGcnn, second: Option<&SamGcnn>) -> Result<PredictionRecord> {
    match second {
        Some(s) => ensemble_predict(clip, first, s, &ConfusableSet::default()),
        None => Ok(PredictionRecord::new(first.score_clip(clip)?)),
    }
}

/// Scores the held-out test rows of `fold` (validation clips excluded) and writes
/// `report.txt`, `confusion.csv` and `predictions.csv` to `out_dir`.
pub fn cmd_eval(
    manifest: &Manifest,
    fold: u8,
    first: &Checkpoint,
    second: Option<&Checkpoint>,
    features_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
) -> Result<EvalOutcome> {
    check_pair(first, second)?;
    let stats = require_norm(first)?;
    let index = FeatureIndex::load(features_dir)?;
    let held_out: HashSet<&str> = first.validation_clips.iter().map(String::as_str).collect();
    let rows: Vec<&ManifestRow> =
        manifest.rows_for(fold, Split::Test).into_iter().filter(|r| !held_out.contains(r.clip_id.as_str())).collect();
    if rows.is_empty() {
        bail!(Data, "fold {} has no held-out test rows", fold);
    }
    let data = index.dataset(&rows, stats, |l| l)?;
    let records: Vec<PredictionRecord> = data
        .clips
        .par_iter()
        .map(|c| predict_one(c, &first.model, second.map(|s| &s.model)))
        .collect::<Result<_>>()?;
    let evaluation = evaluate_fold(&records, rows.iter().map(|r| (r.clip_id.as_str(), r.label)), CLASS_NAMES.len())?;
    let report = format_report(&[(format!("fold{fold}"), evaluation.report.clone())], &CLASS_NAMES)?;

    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.txt"), &report)?;
    fs::write(out_dir.join("confusion.csv"), evaluation.confusion.to_csv(&CLASS_NAMES))?;
    let lines: Vec<String> = records.iter().map(PredictionRecord::to_line).collect();
    fs::write(out_dir.join("predictions.csv"), lines.join("\n") + "\n")?;
    Ok(EvalOutcome { evaluation, records, report })
}

/// Classifies one WAV file; channels beyond the first are averaged in.
pub fn cmd_predict(audio: impl AsRef<Path>, frontend: &FrontendConfig, first: &Checkpoint, second: Option<&Checkpoint>) -> Result<PredictionRecord> {
    check_pair(first, second)?;
    let stats = require_norm(first)?;
    let clip = load_wav(audio)?;
    if clip.sample_rate != frontend.sample_rate {
        bail!(Data, "{} is sampled at {} Hz, expected {} Hz", clip.clip_id, clip.sample_rate, frontend.sample_rate);
    }
    let front = Frontend::new(frontend.clone())?;
    let fbanks = (0..clip.num_channels()).map(|c| front.extract(&clip, c)).collect::<Result<Vec<_>>>()?;
    let [bins, frames] = first.model.config.input_shape();
    if fbanks[0].bins() != bins || fbanks[0].frames() != frames {
        bail!(Data, "clip gives {}x{} features, the model expects {}x{}", fbanks[0].bins(), fbanks[0].frames(), bins, frames);
    }
    let example = ClipExample::from_fbanks(clip.clip_id.clone(), None, &fbanks, stats)?;
    predict_one(&example, &first.model, second.map(|s| &s.model))
}
