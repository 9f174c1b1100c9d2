use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::manifest::{
    read_experiment, read_manifest_value, sha256_hex, to_json, CvCommandConfig, EvaluateCommandConfig,
    ExperimentManifest, SweepCommandConfig, TrainCommandConfig, MANIFEST_FILE,
};
use super::{CliError, CvArgs, EvaluateArgs, GenerateArgs, SweepArgs, TrainArgs, TrainOptions, DATA_ENV};
use crate::augment::{generate_corpus, CorpusConfig, CorpusManifest};
use crate::dataio::{window_sequences, Format, Label, Normalizer, WINDOW_LENGTH};
use crate::harness::{
    audit_cv, augmentation_sweep, confusion, cross_validate, evaluate as evaluate_windows, fit_single,
    metrics, metrics_csv, render_sweep_table, render_table, CvConfig, CvReport, Dataset, TableRow, TrainConfig,
};
use crate::models::{load_checkpoint, peek_checkpoint, save_checkpoint, ModelKind, ModelSpec};
use crate::numerics::{Element, Precision};

const DEFAULT_TARGETS: [Option<f64>; 3] = [None, Some(0.024), Some(0.026)];

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Files written by one command, with their checksums for the manifest.
struct Outputs {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl Outputs {
    fn create(dir: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(Outputs {
            dir,
            files: BTreeMap::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Records a file some other routine already wrote.
    fn record(&mut self, name: &str) -> Result<(), CliError> {
        let path = self.path(name);
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        self.files.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn finish<C: Serialize, R: Serialize>(self, command: &str, config: &C, results: &R) -> Result<(), CliError> {
        let manifest = ExperimentManifest {
            command: command.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            results: serde_json::to_value(results).expect("results serialize"),
            outputs: self.files,
        };
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, to_json(&manifest)).map_err(|e| io_err(&path, e))
    }
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    match manifest.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn out_dir(out: Option<PathBuf>, from_manifest: Option<&Path>) -> Option<PathBuf> {
    out.or_else(|| from_manifest.map(manifest_dir))
}

fn data_arg(data: Option<PathBuf>) -> Result<String, CliError> {
    data.map(|p| p.display().to_string())
        .ok_or_else(|| CliError::Usage(format!("no dataset given: pass --data or set {DATA_ENV}")))
}

impl TrainOptions {
    fn apply(&self, base: TrainConfig) -> Result<TrainConfig, CliError> {
        let mut c = base;
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.patience {
            c.patience = v;
        }
        if let Some(v) = self.lr {
            c.adam.lr = v;
        }
        if let Some(v) = self.precision {
            c.precision = v;
        }
        if let Some(v) = self.train_fraction {
            c.train_fraction = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn resolve_spec(model: Option<ModelKind>, spec: Option<&Path>) -> Result<ModelSpec, CliError> {
    match spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            let spec = ModelSpec::from_canonical(&text)?;
            if let Some(kind) = model {
                if kind != spec.kind() {
                    return Err(CliError::Usage(format!(
                        "--model {kind} disagrees with the {} spec in {}",
                        spec.kind(),
                        path.display()
                    )));
                }
            }
            Ok(spec)
        }
        None => model
            .map(ModelSpec::new)
            .ok_or_else(|| CliError::Usage("pass --model or --spec".into())),
    }
}

fn load_dataset(path: &str) -> Result<Dataset, CliError> {
    Ok(Dataset::load(Path::new(path))?)
}

pub fn generate(a: GenerateArgs) -> Result<(), CliError> {
    let (mut config, mut format) = match &a.from_manifest {
        Some(path) => {
            let (command, value) = read_manifest_value(path)?;
            if command != "generate" {
                return Err(CliError::Usage(format!("{} was written by '{command}'", path.display())));
            }
            let m: CorpusManifest =
                serde_json::from_value(value).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let format: Format = m.format.parse().map_err(CliError::Usage)?;
            (m.config, format)
        }
        None => {
            let config = match &a.config {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
                }
                None => CorpusConfig::default(),
            };
            (config, Format::Csv)
        }
    };
    if a.from_manifest.is_none() {
        if let Some(f) = &a.format {
            format = f.parse().map_err(CliError::Usage)?;
        }
        if let Some(v) = a.coils {
            config.coils = v;
        }
        if let Some(v) = a.days {
            config.days = v;
        }
        if let Some(v) = a.records_per_day {
            config.records_per_day = v;
        }
        if let Some(v) = a.broken_frac {
            config.broken_fraction = v;
        }
        if let Some(v) = a.shift_sigmas {
            config.shift_sigmas = v;
        }
        if let Some(v) = a.seed {
            config.seed = v;
        }
    }
    config.validate()?;
    let out = out_dir(a.out, a.from_manifest.as_deref()).ok_or_else(|| CliError::Usage("--out is required".into()))?;
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let m = generate_corpus(&config, format, &out)?;
    println!(
        "{} coils: {} broken, {} normal, {} records -> {}",
        m.counts.coils,
        m.counts.broken,
        m.counts.normal,
        m.counts.records,
        out.join(&m.data_file).display()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let config = match &a.from_manifest {
        Some(path) => read_experiment(path, "train")?.config_as::<TrainCommandConfig>()?,
        None => TrainCommandConfig {
            data: data_arg(a.data.clone())?,
            seed: a.seed,
            spec: resolve_spec(a.model, a.spec.as_deref())?,
            train: a.train.apply(TrainConfig::default())?,
            window_stride: WINDOW_LENGTH,
        },
    };
    config.spec.validate()?;
    config.train.validate()?;
    let out = out_dir(a.out, a.from_manifest.as_deref()).ok_or_else(|| CliError::Usage("--out is required".into()))?;
    match config.train.precision {
        Precision::F32 => run_train::<f32>(&config, out),
        Precision::F64 => run_train::<f64>(&config, out),
    }
}

fn run_train<T: Element>(config: &TrainCommandConfig, out: PathBuf) -> Result<(), CliError> {
    let dataset = load_dataset(&config.data)?;
    let fit = fit_single::<T>(&dataset, &config.spec, &config.train, config.seed, config.window_stride)?;
    let mut outputs = Outputs::create(out)?;
    let meta = json!({
        "normalizer": fit.normalizer,
        "window_stride": config.window_stride,
        "seeds": fit.seeds,
        "best_epoch": fit.history.best_epoch,
        "best_val_loss": fit.history.best_val_loss,
        "dataset_sha256": dataset.sha256,
    });
    save_checkpoint(&outputs.path("model.ckpt"), &fit.model, &meta)?;
    outputs.record("model.ckpt")?;
    outputs.write("history.csv", fit.history.to_csv().as_bytes())?;
    let mut coils = fit.split.validation.join("\n");
    coils.push('\n');
    outputs.write("validation_coils.txt", coils.as_bytes())?;
    let results = json!({
        "dataset": {"path": dataset.path, "sha256": dataset.sha256, "coils": dataset.sequences.len()},
        "split": fit.split,
        "seeds": fit.seeds,
        "normalizer": fit.normalizer,
        "best_epoch": fit.history.best_epoch,
        "best_val_loss": fit.history.best_val_loss,
        "validation_loss": fit.validation_loss,
        "confusion": fit.confusion,
        "metrics": fit.metrics,
    });
    match fit.history.best_epoch {
        Some(e) => println!(
            "{}: best epoch {e}, validation loss {:.6}",
            config.spec.kind().label(),
            fit.validation_loss
        ),
        None => println!(
            "{}: untrained, validation loss {:.6}",
            config.spec.kind().label(),
            fit.validation_loss
        ),
    }
    if let Some(m) = fit.metrics {
        print!(
            "{}",
            render_table(
                "Model",
                &[TableRow {
                    label: config.spec.kind().label().into(),
                    metrics: m
                }]
            )
        );
    }
    outputs.finish("train", config, &results)
}

fn file_stem(spec: &ModelSpec) -> &'static str {
    spec.kind().name()
}

fn history_csv(report: &CvReport) -> String {
    let mut out = String::from("fold,epoch,train_loss,val_loss,val_accuracy,val_f_score\n");
    for f in &report.folds {
        for e in &f.history {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                f.index, e.epoch, e.train_loss, e.val_loss, e.val_accuracy, e.val_f_score
            ));
        }
    }
    out
}

fn summary_json(report: &CvReport) -> serde_json::Value {
    json!({
        "model": report.spec.kind().name(),
        "mean": report.mean,
        "pooled": report.pooled,
        "pooled_confusion": report.pooled_confusion,
        "folds": report.folds.iter().map(|f| json!({
            "index": f.index,
            "confusion": f.confusion,
            "metrics": f.metrics,
        })).collect::<Vec<_>>(),
    })
}

fn cv_tables(reports: &[CvReport]) -> String {
    let rows = |pick: fn(&CvReport) -> crate::harness::MetricsReport| {
        reports
            .iter()
            .map(|r| TableRow {
                label: r.spec.kind().label().into(),
                metrics: pick(r),
            })
            .collect::<Vec<_>>()
    };
    let k = reports.first().map_or(0, |r| r.cv.k);
    format!(
        "Mean over {k} folds\n{}\nPooled over {k} folds\n{}",
        render_table("Model", &rows(|r| r.mean)),
        render_table("Model", &rows(|r| r.pooled))
    )
}

pub fn cv(a: CvArgs) -> Result<(), CliError> {
    let config = match &a.from_manifest {
        Some(path) => read_experiment(path, "cv")?.config_as::<CvCommandConfig>()?,
        None => {
            let specs = if a.all_models {
                ModelKind::ALL.iter().map(|&k| ModelSpec::new(k)).collect()
            } else if a.model.is_none() && a.spec.is_none() {
                return Err(CliError::Usage("pass --model, --spec or --all-models".into()));
            } else {
                vec![resolve_spec(a.model, a.spec.as_deref())?]
            };
            CvCommandConfig {
                data: data_arg(a.data.clone())?,
                specs,
                train: a.train.apply(TrainConfig::default())?,
                cv: CvConfig {
                    k: a.k,
                    seed: a.seed,
                    augment_target: a.augment_target,
                    window_stride: WINDOW_LENGTH,
                },
            }
        }
    };
    if config.cv.k < 2 {
        return Err(CliError::Usage(format!("--k {}: at least 2 folds are required", config.cv.k)));
    }
    let kinds: BTreeSet<ModelKind> = config.specs.iter().map(ModelSpec::kind).collect();
    if kinds.len() != config.specs.len() || config.specs.is_empty() {
        return Err(CliError::Usage("each architecture may appear once per cv run".into()));
    }
    let dataset = load_dataset(&config.data)?;
    let mut reports = Vec::with_capacity(config.specs.len());
    for spec in &config.specs {
        log::info!("cross-validating {}", spec.kind().label());
        reports.push(cross_validate(&dataset, spec, &config.train, &config.cv, a.jobs)?);
    }
    let tables = cv_tables(&reports);
    print!("{tables}");
    let mut outputs = match out_dir(a.out, a.from_manifest.as_deref()) {
        Some(dir) => Outputs::create(dir)?,
        None => return Ok(()),
    };
    outputs.write("table.txt", tables.as_bytes())?;
    for r in &reports {
        let stem = file_stem(&r.spec);
        outputs.write(&format!("metrics_{stem}.csv"), metrics_csv(r).as_bytes())?;
        outputs.write(&format!("history_{stem}.csv"), history_csv(r).as_bytes())?;
    }
    let summary: Vec<_> = reports.iter().map(summary_json).collect();
    outputs.write("metrics.json", to_json(&summary).as_bytes())?;
    outputs.finish("cv", &config, &json!({ "reports": reports }))
}

fn parse_target(token: &str) -> Result<Option<f64>, CliError> {
    match token.trim() {
        "current" | "none" => Ok(None),
        t => {
            let v: f64 = t
                .parse()
                .map_err(|_| CliError::Usage(format!("bad target '{t}': expected a fraction or 'current'")))?;
            if !(v > 0.0 && v < 1.0) {
                return Err(CliError::Usage(format!("target {v} must lie in (0, 1)")));
            }
            Ok(Some(v))
        }
    }
}

pub fn sweep(a: SweepArgs) -> Result<(), CliError> {
    let config = match &a.from_manifest {
        Some(path) => read_experiment(path, "sweep")?.config_as::<SweepCommandConfig>()?,
        None => SweepCommandConfig {
            data: data_arg(a.data.clone())?,
            spec: resolve_spec(a.model, a.spec.as_deref())?,
            train: a.train.apply(TrainConfig::default())?,
            cv: CvConfig {
                k: a.k,
                seed: a.seed,
                augment_target: None,
                window_stride: WINDOW_LENGTH,
            },
            targets: match &a.targets {
                Some(t) => t.iter().map(|s| parse_target(s)).collect::<Result<_, _>>()?,
                None => DEFAULT_TARGETS.to_vec(),
            },
        },
    };
    if config.targets.is_empty() {
        return Err(CliError::Usage("no sweep targets".into()));
    }
    if config.cv.k < 2 {
        return Err(CliError::Usage(format!("--k {}: at least 2 folds are required", config.cv.k)));
    }
    let dataset = load_dataset(&config.data)?;
    let sweep = augmentation_sweep(&dataset, &config.spec, &config.train, &config.cv, &config.targets, a.jobs)?;

    let first = &sweep.arms[0].report;
    let same_folds = sweep.arms.iter().all(|arm| {
        arm.report
            .folds
            .iter()
            .zip(&first.folds)
            .all(|(x, y)| x.test_coils == y.test_coils && x.seeds == y.seeds)
    });
    let mut audit: Vec<String> = sweep
        .arms
        .iter()
        .flat_map(|arm| audit_cv(&arm.report, None))
        .collect();
    if !same_folds {
        audit.push("arms differ in folds or seeds".into());
    }
    let mut table = render_sweep_table(&sweep);
    table.push_str(&format!(
        "audit: {} arms, identical folds and seeds: {}, violations: {}\n",
        sweep.arms.len(),
        same_folds,
        audit.len()
    ));
    print!("{table}");

    let mut outputs = match out_dir(a.out, a.from_manifest.as_deref()) {
        Some(dir) => Outputs::create(dir)?,
        None => return Ok(()),
    };
    outputs.write("table.txt", table.as_bytes())?;
    let mut arms_json = Vec::new();
    for (i, arm) in sweep.arms.iter().enumerate() {
        outputs.write(&format!("metrics_arm{i}.csv"), metrics_csv(&arm.report).as_bytes())?;
        arms_json.push(json!({
            "target": arm.target,
            "label": arm.label,
            "train_windows": arm.train_windows,
            "train_broken": arm.train_broken,
            "synthetic_added": arm.report.folds.iter().map(|f| f.counts.synthetic_added).collect::<Vec<_>>(),
            "mean": arm.report.mean,
            "pooled": arm.report.pooled,
        }));
    }
    outputs.write("metrics.json", to_json(&arms_json).as_bytes())?;
    let results = json!({
        "identical_folds_and_seeds": same_folds,
        "audit": audit,
        "arms": sweep.arms,
    });
    outputs.finish("sweep", &config, &results)
}

fn read_coil_list(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let config = match &a.from_manifest {
        Some(path) => read_experiment(path, "evaluate")?.config_as::<EvaluateCommandConfig>()?,
        None => EvaluateCommandConfig {
            checkpoint: a
                .checkpoint
                .as_ref()
                .map(|p| p.display().to_string())
                .ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?,
            data: data_arg(a.data.clone())?,
            coils: a.coils.as_deref().map(read_coil_list).transpose()?,
            batch_size: a.batch_size,
        },
    };
    if config.batch_size == 0 {
        return Err(CliError::Usage("batch size must be positive".into()));
    }
    let out = out_dir(a.out, a.from_manifest.as_deref());
    match peek_checkpoint(Path::new(&config.checkpoint))?.precision {
        Precision::F32 => run_evaluate::<f32>(&config, out),
        Precision::F64 => run_evaluate::<f64>(&config, out),
    }
}

fn run_evaluate<T: Element>(config: &EvaluateCommandConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let (mut model, info) = load_checkpoint::<T>(Path::new(&config.checkpoint))?;
    let normalizer: Normalizer = info
        .meta
        .get("normalizer")
        .cloned()
        .ok_or_else(|| CliError::Runtime("checkpoint carries no normalizer".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| CliError::Runtime(format!("checkpoint normalizer: {e}"))))?;
    let stride = info
        .meta
        .get("window_stride")
        .and_then(|v| v.as_u64())
        .map_or(WINDOW_LENGTH, |v| v as usize);
    let dataset = load_dataset(&config.data)?;
    let sequences: Vec<_> = match &config.coils {
        Some(ids) => {
            let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
            let present: BTreeSet<&str> = dataset.sequences.iter().map(|s| s.coil_id.as_str()).collect();
            if let Some(missing) = wanted.difference(&present).next() {
                return Err(CliError::Usage(format!("coil {missing} is not in the dataset")));
            }
            dataset
                .sequences
                .iter()
                .filter(|s| wanted.contains(s.coil_id.as_str()))
                .cloned()
                .collect()
        }
        None => dataset.sequences.clone(),
    };
    let (mut windows, _) = window_sequences(&sequences, model.spec().sequence_length, stride)?;
    normalizer.apply_windows(&mut windows)?;
    let kind = model.kind();

    let results = if windows.is_empty() {
        log::warn!("no windows to evaluate; metrics are undefined");
        println!("{}: 0 windows, metrics undefined", kind.label());
        json!({ "model": kind.name(), "windows": 0, "undefined": true })
    } else {
        let (loss, preds) = evaluate_windows(&mut model, &windows, config.batch_size)?;
        let predicted: Vec<Label> = preds.iter().map(|p| p.label).collect();
        let actual: Vec<Label> = windows.iter().map(|w| w.label).collect();
        let cm = confusion(&predicted, &actual)?;
        let m = metrics(&cm)?;
        println!("{}: {} windows, loss {loss:.6}", kind.label(), windows.len());
        print!(
            "{}",
            render_table(
                "Model",
                &[TableRow {
                    label: kind.label().into(),
                    metrics: m
                }]
            )
        );
        json!({
            "model": kind.name(),
            "windows": windows.len(),
            "undefined": m.undefined.any(),
            "loss": loss,
            "confusion": cm,
            "metrics": m,
        })
    };
    if let Some(dir) = out {
        let mut outputs = Outputs::create(dir)?;
        outputs.write("metrics.json", to_json(&results).as_bytes())?;
        outputs.finish("evaluate", config, &results)?;
    }
    Ok(())
}
