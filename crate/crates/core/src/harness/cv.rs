use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{average, confusion, metrics, ConfusionMatrix, MetricsReport};
use super::train::{evaluate, train, EpochRecord, History, TrainConfig};
use super::HarnessError;
use crate::augment::augment_dataset;
use crate::dataio::{
    coil_labels, leave_coils_out_folds, load_sequences, resolve_data_path, stratified_split, window_sequences,
    CoilSequence, CoilSplit, DataError, Fold, Label, Normalizer, Window,
};
use crate::models::{Model, ModelSpec};
use crate::numerics::{Element, Precision};
use crate::seed;

/// A loaded dataset file and its checksum.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Path as given by the caller.
    pub path: String,
    pub sha256: String,
    pub sequences: Vec<CoilSequence>,
}

impl Dataset {
    /// Loads a data file, or `coils.csv` / `coils.jsonl` inside a directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let (file, format) = resolve_data_path(path)?;
        let bytes = fs::read(&file).map_err(|source| DataError::Io {
            path: file.display().to_string(),
            source,
        })?;
        Ok(Dataset {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            sequences: load_sequences(&file, format)?,
        })
    }

    pub fn from_sequences(sequences: Vec<CoilSequence>) -> Self {
        Dataset {
            path: String::new(),
            sha256: String::new(),
            sequences,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvConfig {
    pub k: usize,
    /// Master seed; every fold's streams derive from it.
    pub seed: u64,
    /// Broken fraction the training windows are raised to, if any.
    pub augment_target: Option<f64>,
    pub window_stride: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            k: 10,
            seed: 1,
            augment_target: None,
            window_stride: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSeeds {
    pub split: u64,
    pub init: u64,
    pub train: u64,
    pub augment: u64,
}

impl FoldSeeds {
    pub fn derive(master: u64, fold: usize) -> Self {
        let i = fold as u64;
        FoldSeeds {
            split: seed::derive(master, "split", i),
            init: seed::derive(master, "init", i),
            train: seed::derive(master, "train", i),
            augment: seed::derive(master, "augment", i),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldCounts {
    /// Training windows after augmentation.
    pub train_windows: usize,
    pub train_broken: usize,
    pub synthetic_added: usize,
    pub validation_windows: usize,
    pub test_windows: usize,
    pub test_broken: usize,
    pub synthetic_in_eval: usize,
    pub dropped_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub index: usize,
    pub seeds: FoldSeeds,
    pub test_coils: Vec<String>,
    pub train_coils: Vec<String>,
    pub validation_coils: Vec<String>,
    pub normalizer: Normalizer,
    pub counts: FoldCounts,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: String,
    pub sha256: String,
    pub coils: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub dataset: DatasetRef,
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub cv: CvConfig,
    pub folds: Vec<FoldReport>,
    /// Per-fold metrics averaged arithmetically.
    pub mean: MetricsReport,
    pub pooled_confusion: ConfusionMatrix,
    /// Metrics of the summed confusion matrix.
    pub pooled: MetricsReport,
}

fn sequences_for<'a>(by_id: &HashMap<&str, &'a CoilSequence>, ids: &[String]) -> Vec<CoilSequence> {
    ids.iter().map(|id| by_id[id.as_str()].clone()).collect()
}

fn windows_for(
    by_id: &HashMap<&str, &CoilSequence>,
    ids: &[String],
    spec: &ModelSpec,
    stride: usize,
    normalizer: &Normalizer,
) -> Result<(Vec<Window>, usize), HarnessError> {
    let (mut windows, report) = window_sequences(&sequences_for(by_id, ids), spec.sequence_length, stride)?;
    normalizer.apply_windows(&mut windows)?;
    Ok((windows, report.dropped_records))
}

fn broken(windows: &[Window]) -> usize {
    windows.iter().filter(|w| w.label == Label::Broken).count()
}

fn run_fold<T: Element>(
    by_id: &HashMap<&str, &CoilSequence>,
    labels: &[(String, Label)],
    fold: &Fold,
    spec: &ModelSpec,
    config: &TrainConfig,
    cv: &CvConfig,
) -> Result<FoldReport, HarnessError> {
    let seeds = FoldSeeds::derive(cv.seed, fold.index);
    let rest: BTreeSet<&str> = fold.rest.iter().map(String::as_str).collect();
    let rest_labels: Vec<(String, Label)> = labels.iter().filter(|(id, _)| rest.contains(id.as_str())).cloned().collect();
    let split = stratified_split(&rest_labels, config.train_fraction, seeds.split)?;
    let excluded: BTreeSet<String> = fold.test.iter().chain(&split.validation).cloned().collect();
    let normalizer = Normalizer::fit(&sequences_for(by_id, &split.train), &excluded)?;

    let (train_windows, d1) = windows_for(by_id, &split.train, spec, cv.window_stride, &normalizer)?;
    let (val_windows, d2) = windows_for(by_id, &split.validation, spec, cv.window_stride, &normalizer)?;
    let (test_windows, d3) = windows_for(by_id, &fold.test, spec, cv.window_stride, &normalizer)?;

    let (train_windows, added) = match cv.augment_target {
        Some(target) => {
            let mut rng = seed::rng(seeds.augment);
            let out = augment_dataset(&train_windows, target, &mut rng)?;
            (out.windows, out.added)
        }
        None => (train_windows, 0),
    };

    let mut model = Model::<T>::build(spec, seeds.init)?;
    let history: History = train(&mut model, &train_windows, &val_windows, config, seeds.train)?;
    let (_, preds) = evaluate(&mut model, &test_windows, config.batch_size)?;
    let predicted: Vec<Label> = preds.iter().map(|p| p.label).collect();
    let actual: Vec<Label> = test_windows.iter().map(|w| w.label).collect();
    let cm = confusion(&predicted, &actual)?;
    let m = metrics(&cm)?;
    log::info!(
        "fold {}: acc {:.4} f {:.4} (tp {} fp {} fn {} tn {})",
        fold.index,
        m.accuracy,
        m.f_score,
        cm.tp,
        cm.fp,
        cm.fn_,
        cm.tn
    );
    Ok(FoldReport {
        index: fold.index,
        seeds,
        test_coils: fold.test.clone(),
        train_coils: split.train,
        validation_coils: split.validation,
        counts: FoldCounts {
            train_windows: train_windows.len(),
            train_broken: broken(&train_windows),
            synthetic_added: added,
            validation_windows: val_windows.len(),
            test_windows: test_windows.len(),
            test_broken: broken(&test_windows),
            synthetic_in_eval: val_windows.iter().chain(&test_windows).filter(|w| w.synthetic).count(),
            dropped_records: d1 + d2 + d3,
        },
        normalizer,
        best_epoch: history.best_epoch,
        best_val_loss: history.best_val_loss,
        history: history.epochs,
        confusion: cm,
        metrics: m,
    })
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Invalid(format!("thread pool: {e}")))
}

/// k-fold leave-coils-out cross-validation. Folds run on up to `jobs`
/// threads; results do not depend on `jobs`.
pub fn cross_validate(
    dataset: &Dataset,
    spec: &ModelSpec,
    config: &TrainConfig,
    cv: &CvConfig,
    jobs: usize,
) -> Result<CvReport, HarnessError> {
    spec.validate()?;
    config.validate()?;
    if cv.k < 2 {
        return Err(HarnessError::Invalid(format!("k = {}; at least 2 folds are required", cv.k)));
    }
    if cv.window_stride == 0 {
        return Err(HarnessError::Invalid("window stride must be positive".into()));
    }
    let labels = coil_labels(&dataset.sequences);
    let folds = leave_coils_out_folds(&labels, cv.k, seed::derive(cv.seed, "folds", 0))?;
    let by_id: HashMap<&str, &CoilSequence> = dataset.sequences.iter().map(|s| (s.coil_id.as_str(), s)).collect();
    let reports: Vec<FoldReport> = pool(jobs)?.install(|| {
        folds
            .par_iter()
            .map(|fold| match config.precision {
                Precision::F32 => run_fold::<f32>(&by_id, &labels, fold, spec, config, cv),
                Precision::F64 => run_fold::<f64>(&by_id, &labels, fold, spec, config, cv),
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let pooled_confusion = reports.iter().fold(ConfusionMatrix::default(), |acc, r| acc.add(&r.confusion));
    let fold_metrics: Vec<MetricsReport> = reports.iter().map(|r| r.metrics).collect();
    let report = CvReport {
        dataset: DatasetRef {
            path: dataset.path.clone(),
            sha256: dataset.sha256.clone(),
            coils: dataset.sequences.len(),
        },
        spec: spec.clone(),
        train: config.clone(),
        cv: cv.clone(),
        mean: average(&fold_metrics).expect("k >= 2 folds"),
        pooled: metrics(&pooled_confusion)?,
        pooled_confusion,
        folds: reports,
    };
    let all: Vec<String> = labels.into_iter().map(|(id, _)| id).collect();
    let violations = audit_cv(&report, Some(&all));
    if !violations.is_empty() {
        return Err(HarnessError::Protocol(violations.join("; ")));
    }
    Ok(report)
}

/// Protocol and metric-identity checks over a finished run. Returns one
/// message per violation.
pub fn audit_cv(report: &CvReport, all_coils: Option<&[String]>) -> Vec<String> {
    let mut out = Vec::new();
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for f in &report.folds {
        let test: BTreeSet<&str> = f.test_coils.iter().map(String::as_str).collect();
        let train: BTreeSet<&str> = f.train_coils.iter().map(String::as_str).collect();
        let val: BTreeSet<&str> = f.validation_coils.iter().map(String::as_str).collect();
        if let Some(id) = test.intersection(&train).chain(test.intersection(&val)).next() {
            out.push(format!("fold {}: test coil {id} also used for fitting", f.index));
        }
        if let Some(id) = train.intersection(&val).next() {
            out.push(format!("fold {}: coil {id} in both train and validation", f.index));
        }
        let fitted: BTreeSet<&str> = f.normalizer.fitted_on.iter().map(String::as_str).collect();
        if fitted != train {
            out.push(format!("fold {}: normalizer not fitted on exactly the training coils", f.index));
        }
        if f.counts.synthetic_in_eval != 0 {
            out.push(format!("fold {}: {} synthetic windows in evaluation", f.index, f.counts.synthetic_in_eval));
        }
        if f.confusion.total() != f.counts.test_windows {
            out.push(format!("fold {}: confusion total differs from test windows", f.index));
        }
        for id in &test {
            if !seen.insert(id) {
                out.push(format!("coil {id} held out in more than one fold"));
            }
        }
        let m = &f.metrics;
        let pi = m.prevalence;
        let checks = [
            ("accuracy identity", (m.accuracy - (m.tn_rate * (1.0 - pi) + m.tp_rate * pi)).abs()),
            ("tn_rate + fp_rate", if m.undefined.negative_rates { 0.0 } else { (m.tn_rate + m.fp_rate - 1.0).abs() }),
            ("fn_rate + tp_rate", if m.undefined.recall { 0.0 } else { (m.fn_rate + m.tp_rate - 1.0).abs() }),
            (
                "harmonic mean",
                if m.undefined.f_score {
                    0.0
                } else {
                    (m.f_score - 2.0 * m.precision * m.recall / (m.precision + m.recall)).abs()
                },
            ),
        ];
        for (name, err) in checks {
            if !(err <= 1e-12) {
                out.push(format!("fold {}: {name} off by {err:e}", f.index));
            }
        }
    }
    if let Some(all) = all_coils {
        let all: BTreeSet<&str> = all.iter().map(String::as_str).collect();
        if all != seen {
            out.push("held-out coils do not cover the dataset exactly".into());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepArm {
    pub target: Option<f64>,
    /// Mean training broken windows per fold and their share, e.g. `"41 (2.2%)"`.
    pub label: String,
    pub train_windows: usize,
    pub train_broken: usize,
    pub report: CvReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub arms: Vec<SweepArm>,
}

/// One cross-validation per target with identical folds and seeds; `None`
/// leaves the training windows as they are.
pub fn augmentation_sweep(
    dataset: &Dataset,
    spec: &ModelSpec,
    config: &TrainConfig,
    cv: &CvConfig,
    targets: &[Option<f64>],
    jobs: usize,
) -> Result<SweepReport, HarnessError> {
    let mut arms = Vec::with_capacity(targets.len());
    for &target in targets {
        let arm_cv = CvConfig {
            augment_target: target,
            ..cv.clone()
        };
        let report = cross_validate(dataset, spec, config, &arm_cv, jobs)?;
        let train_windows: usize = report.folds.iter().map(|f| f.counts.train_windows).sum();
        let train_broken: usize = report.folds.iter().map(|f| f.counts.train_broken).sum();
        let per_fold = train_broken as f64 / report.folds.len() as f64;
        arms.push(SweepArm {
            target,
            label: format!("{per_fold:.0} ({:.1}%)", 100.0 * train_broken as f64 / train_windows as f64),
            train_windows,
            train_broken,
            report,
        });
    }
    if let Some(first) = arms.first() {
        let folds = |a: &SweepArm| a.report.folds.iter().map(|f| f.test_coils.clone()).collect::<Vec<_>>();
        if arms.iter().any(|a| folds(a) != folds(first)) {
            return Err(HarnessError::Protocol("sweep arms used different folds".into()));
        }
    }
    Ok(SweepReport { arms })
}

/// Outcome of a single stratified 70/30 training run.
#[derive(Debug, Clone)]
pub struct SingleFit<T: Element> {
    pub model: Model<T>,
    pub history: History,
    pub normalizer: Normalizer,
    pub split: CoilSplit,
    pub seeds: FoldSeeds,
    pub validation_loss: f64,
    pub confusion: ConfusionMatrix,
    pub metrics: Option<MetricsReport>,
}

/// Trains one model on a stratified coil split of the whole dataset and
/// evaluates it on the validation coils.
pub fn fit_single<T: Element>(
    dataset: &Dataset,
    spec: &ModelSpec,
    config: &TrainConfig,
    master_seed: u64,
    stride: usize,
) -> Result<SingleFit<T>, HarnessError> {
    spec.validate()?;
    config.validate()?;
    let labels = coil_labels(&dataset.sequences);
    let seeds = FoldSeeds::derive(master_seed, 0);
    let split = stratified_split(&labels, config.train_fraction, seeds.split)?;
    let by_id: HashMap<&str, &CoilSequence> = dataset.sequences.iter().map(|s| (s.coil_id.as_str(), s)).collect();
    let excluded: BTreeSet<String> = split.validation.iter().cloned().collect();
    let normalizer = Normalizer::fit(&sequences_for(&by_id, &split.train), &excluded)?;
    let (train_windows, _) = windows_for(&by_id, &split.train, spec, stride, &normalizer)?;
    let (val_windows, _) = windows_for(&by_id, &split.validation, spec, stride, &normalizer)?;
    let mut model = Model::<T>::build(spec, seeds.init)?;
    let history = train(&mut model, &train_windows, &val_windows, config, seeds.train)?;
    let (validation_loss, preds) = evaluate(&mut model, &val_windows, config.batch_size)?;
    let predicted: Vec<Label> = preds.iter().map(|p| p.label).collect();
    let actual: Vec<Label> = val_windows.iter().map(|w| w.label).collect();
    let cm = confusion(&predicted, &actual)?;
    Ok(SingleFit {
        model,
        history,
        normalizer,
        split,
        seeds,
        validation_loss,
        metrics: metrics(&cm).ok(),
        confusion: cm,
    })
}
