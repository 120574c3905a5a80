//! The four subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use forgetkit::checkpoint;
use forgetkit::data::{build_scenario, generate_synthetic, Dataset, SyntheticSpec};
use forgetkit::engine::{run_sequence, RunOptions, TaskResult};
use forgetkit::metrics::{accuracy, mask_head, recovery_probe, RecoveryConfig};
use forgetkit::model::{MicroTransformer, PretrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::csvio::{self, MetricsRow};
use crate::UserError;

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(e) = self.epochs {
            cfg.pretrain.epochs = e;
            cfg.recovery.epochs = e;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
    }
}

fn load_config(path: &Path, ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    ov.apply(&mut cfg);
    Ok(cfg)
}

/// What a pretrained checkpoint records about its origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PretrainMeta {
    seed: u64,
    dataset: SyntheticSpec,
    pretrain: PretrainConfig,
    test_accuracy: f64,
}

/// What a forgotten model records, enough to rebuild its data and find the
/// model it started from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ForgetMeta {
    seed: u64,
    dataset: SyntheticSpec,
    method: String,
    forgotten: Vec<usize>,
    origin: PathBuf,
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

fn pretrained_root(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join(&cfg.name).join("pretrained")
}

fn train_one(cfg: &RunConfig, seed: u64, train: &Dataset, test: &Dataset, dir: &Path) -> Result<MicroTransformer> {
    let mut model = MicroTransformer::new(cfg.model_config(), seed)?;
    log::info!("seed {seed}: pretraining on {} samples", train.len());
    let log = model.pretrain(train, &cfg.pretrain, seed)?;
    if let Some(w) = &log.warning {
        log::warn!("seed {seed}: {w}");
    }
    let test_accuracy = accuracy(&model, test, None)?;
    log::info!(
        "seed {seed}: {} epochs, test accuracy {test_accuracy:.2}",
        log.epochs.len()
    );
    let meta = PretrainMeta {
        seed,
        dataset: cfg.dataset.clone(),
        pretrain: cfg.pretrain.clone(),
        test_accuracy,
    };
    checkpoint::save(&model, dir, serde_json::to_value(&meta)?)?;
    csvio::write_pretrain_log(&dir.join("pretrain_log.csv"), &log)?;
    Ok(model)
}

/// Pretrains one model per seed; returns the checkpoint directories.
pub fn pretrain(config: &Path, ov: &Overrides) -> Result<Vec<PathBuf>> {
    let cfg = load_config(config, ov)?;
    let root = pretrained_root(&cfg);
    let mut dirs = Vec::new();
    for &seed in &cfg.seeds {
        let (train, test) = generate_synthetic(&cfg.dataset, seed)?;
        let dir = seed_dir(&root, seed);
        train_one(&cfg, seed, &train, &test, &dir)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Finds the starting model for `seed`: from `--checkpoint` when given,
/// else a matching cached one under the experiment, else a fresh pretrain.
fn starting_model(
    cfg: &RunConfig,
    checkpoint_arg: Option<&Path>,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
) -> Result<(MicroTransformer, PathBuf)> {
    let explicit = checkpoint_arg.map(|p| {
        if p.join("manifest.json").is_file() {
            p.to_path_buf()
        } else {
            seed_dir(p, seed)
        }
    });
    let dir = match explicit {
        Some(d) => d,
        None => {
            let d = seed_dir(&pretrained_root(cfg), seed);
            if !reusable(cfg, &d, seed) {
                let model = train_one(cfg, seed, train, test, &d)?;
                return Ok((model, d));
            }
            log::info!("seed {seed}: reusing {}", d.display());
            d
        }
    };
    if !dir.join("manifest.json").is_file() {
        bail!(UserError(format!("no checkpoint for seed {seed} at {}", dir.display())));
    }
    let (model, meta) = checkpoint::load(&dir)?;
    if model.config() != &cfg.model_config() {
        bail!(UserError(format!(
            "checkpoint {} has geometry {:?}, config expects {:?}",
            dir.display(),
            model.config(),
            cfg.model_config()
        )));
    }
    let meta: PretrainMeta = serde_json::from_value(meta)
        .map_err(|e| UserError(format!("checkpoint {} is not a pretrained model: {e}", dir.display())))?;
    if meta.dataset != cfg.dataset || meta.seed != seed {
        bail!(UserError(format!(
            "checkpoint {} was trained on dataset seed {} {:?}, not seed {seed} {:?}",
            dir.display(),
            meta.seed,
            meta.dataset,
            cfg.dataset
        )));
    }
    Ok((model, dir))
}

fn reusable(cfg: &RunConfig, dir: &Path, seed: u64) -> bool {
    let Ok((model_cfg, meta)) = checkpoint::read_meta(dir) else {
        return false;
    };
    let Ok(meta) = serde_json::from_value::<PretrainMeta>(meta) else {
        return false;
    };
    model_cfg == cfg.model_config() && meta.seed == seed && meta.dataset == cfg.dataset && meta.pretrain == cfg.pretrain
}

struct PointRun {
    cfg: RunConfig,
    dir: PathBuf,
    label: String,
    rows: Vec<MetricsRow>,
    losses: Vec<(u64, Vec<TaskResult>)>,
}

/// Runs the forgetting scenario for every seed and sweep point; returns the
/// run directories, each holding metrics.csv, loss_log.csv and run.json.
pub fn forget(config: &Path, checkpoint_arg: Option<&Path>, ov: &Overrides) -> Result<Vec<PathBuf>> {
    let cfg = load_config(config, ov)?;
    let base_dir = cfg.output_dir.join(&cfg.name);
    let mut runs: Vec<PointRun> = Vec::new();
    for point in cfg.sweep_points() {
        let label = point.label();
        let dir = if label.is_empty() {
            base_dir.clone()
        } else {
            base_dir.join(&label)
        };
        runs.push(PointRun {
            cfg: point.apply(&cfg)?,
            dir,
            label,
            rows: Vec::new(),
            losses: Vec::new(),
        });
    }

    for &seed in &cfg.seeds {
        let (train, test) = generate_synthetic(&cfg.dataset, seed)?;
        let (origin, origin_dir) = starting_model(&cfg, checkpoint_arg, seed, &train, &test)?;
        let origin_dir = fs::canonicalize(&origin_dir).unwrap_or(origin_dir);
        for run in &mut runs {
            let scenario = build_scenario(&train, &run.cfg.scenario, seed)?;
            let opts = RunOptions {
                method: run.cfg.method,
                seed,
                record_timing: run.cfg.record_timing,
            };
            let ckpt_root = run.dir.join("checkpoints").join(format!("seed-{seed}"));
            let per_task = run.cfg.checkpoints.per_task;
            let mut save_task = |r: &TaskResult, m: &MicroTransformer| -> forgetkit::Result<()> {
                checkpoint::save(
                    m,
                    &ckpt_root.join(format!("task-{}", r.task_id)),
                    json!({ "seed": seed }),
                )
            };
            let observer: Option<&mut forgetkit::engine::TaskObserver<'_>> =
                if per_task { Some(&mut save_task) } else { None };
            let mut model = origin.clone();
            log::info!(
                "seed {seed}: {} with {} over {} task(s){}",
                run.cfg.name,
                run.cfg.method,
                scenario.len(),
                if run.label.is_empty() {
                    String::new()
                } else {
                    format!(" [{}]", run.label)
                }
            );
            let out = run_sequence(&mut model, &scenario, &test, &run.cfg.task, &opts, observer)?;
            run.rows.extend(out.records.iter().map(MetricsRow::from));
            let meta = ForgetMeta {
                seed,
                dataset: cfg.dataset.clone(),
                method: run.cfg.method.name().to_string(),
                forgotten: scenario.all_forgotten(),
                origin: origin_dir.clone(),
            };
            checkpoint::save(
                &model,
                &seed_dir(&run.dir.join("models"), seed),
                serde_json::to_value(&meta)?,
            )?;
            run.losses.push((seed, out.results));
        }
    }

    let mut dirs = Vec::new();
    for run in runs {
        fs::create_dir_all(&run.dir).with_context(|| format!("cannot create {}", run.dir.display()))?;
        csvio::write_metrics(&run.dir.join("metrics.csv"), &run.rows)?;
        csvio::write_loss_log(&run.dir.join("loss_log.csv"), &run.losses)?;
        let scenario = if run.label.is_empty() {
            run.cfg.name.clone()
        } else {
            format!("{}/{}", run.cfg.name, run.label)
        };
        let info = RunInfo {
            scenario,
            config: run.cfg,
        };
        fs::write(run.dir.join("run.json"), serde_json::to_string_pretty(&info)? + "\n")?;
        dirs.push(run.dir);
    }
    Ok(dirs)
}

/// Contents of run.json.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunInfo {
    pub scenario: String,
    pub config: RunConfig,
}

/// Fine-tunes the head of a forgotten model and of the masked comparator;
/// returns the directory holding the two curve files.
pub fn recover(checkpoint_dir: &Path, config: Option<&Path>, ov: &Overrides) -> Result<PathBuf> {
    let mut rcfg = match config {
        Some(p) => load_config(p, ov)?.recovery,
        None => RecoveryConfig::default(),
    };
    if let Some(e) = ov.epochs {
        rcfg.epochs = e;
    }
    let (subject, meta) = checkpoint::load(checkpoint_dir)?;
    let meta: ForgetMeta = serde_json::from_value(meta).map_err(|e| {
        UserError(format!(
            "checkpoint {} was not written by `forget`: {e}",
            checkpoint_dir.display()
        ))
    })?;
    let (origin, _) = checkpoint::load(&meta.origin)?;
    if origin.config() != subject.config() {
        bail!(UserError(format!(
            "origin {} has a different geometry",
            meta.origin.display()
        )));
    }
    let seed = ov.seed.unwrap_or(meta.seed);
    let (train, test) = generate_synthetic(&meta.dataset, meta.seed)?;
    let masked = mask_head(&origin, &meta.forgotten, rcfg.mask_bias)?;
    log::info!(
        "recovering {} forgotten classes for {} epochs",
        meta.forgotten.len(),
        rcfg.epochs
    );
    let subject_curve = recovery_probe(&subject, &train, &test, &meta.forgotten, &rcfg, seed)?;
    let masked_curve = recovery_probe(&masked, &train, &test, &meta.forgotten, &rcfg, seed)?;
    let out = ov.out.clone().unwrap_or_else(|| checkpoint_dir.join("recovery"));
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    csvio::write_curve(&out.join("recovery_subject.csv"), &subject_curve)?;
    csvio::write_curve(&out.join("recovery_masked.csv"), &masked_curve)?;
    Ok(out)
}

/// One row of the consolidated table.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub scenario: String,
    pub row: MetricsRow,
}

/// Mean and sample standard deviation over seeds of one column.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    fn of(values: &[f64]) -> Option<Spread> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Spread { mean, std })
    }
}

pub const SUMMARY_COLUMNS: [&str; 7] = [
    "acc_r",
    "acc_f",
    "acc_o",
    "acc_m",
    "h_mean",
    "zero_group_ratio",
    "tunable_ratio",
];

/// Final-task statistics of one (method, scenario) group.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub scenario: String,
    pub seeds: usize,
    pub columns: [Option<Spread>; 7],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub runs: Vec<RunRow>,
    pub summary: Vec<SummaryRow>,
}

fn scenario_of(dir: &Path) -> String {
    fs::read_to_string(dir.join("run.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<RunInfo>(&t).ok())
        .map(|i| i.scenario)
        .unwrap_or_else(|| {
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| dir.display().to_string())
        })
}

/// Merges the metrics of `dirs` into report_runs.csv, report.csv and
/// report.txt under `out`.
pub fn report(dirs: &[PathBuf], out: &Path) -> Result<Report> {
    if dirs.is_empty() {
        bail!(UserError("report needs at least one run directory".into()));
    }
    let mut runs = Vec::new();
    for dir in dirs {
        let path = dir.join("metrics.csv");
        if !path.is_file() {
            bail!(UserError(format!("{} does not exist", path.display())));
        }
        let scenario = scenario_of(dir);
        for row in csvio::read_metrics(&path)? {
            runs.push(RunRow {
                scenario: scenario.clone(),
                row,
            });
        }
    }
    runs.sort_by(|a, b| {
        (&a.row.method, &a.scenario, a.row.seed, a.row.task_id).cmp(&(
            &b.row.method,
            &b.scenario,
            b.row.seed,
            b.row.task_id,
        ))
    });

    // Last task of each seed, grouped by (method, scenario).
    let mut finals: BTreeMap<(String, String), BTreeMap<u64, &MetricsRow>> = BTreeMap::new();
    for r in &runs {
        finals
            .entry((r.row.method.clone(), r.scenario.clone()))
            .or_default()
            .insert(r.row.seed, &r.row);
    }
    let summary = finals
        .into_iter()
        .map(|((method, scenario), by_seed)| {
            let rows: Vec<&MetricsRow> = by_seed.into_values().collect();
            let col = |f: &dyn Fn(&MetricsRow) -> Option<f64>| {
                Spread::of(&rows.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            SummaryRow {
                method,
                scenario,
                seeds: rows.len(),
                columns: [
                    col(&|r| Some(r.acc_r)),
                    col(&|r| Some(r.acc_f)),
                    col(&|r| r.acc_o),
                    col(&|r| r.acc_m),
                    col(&|r| Some(r.h_mean)),
                    col(&|r| Some(r.zero_group_ratio)),
                    col(&|r| Some(r.tunable_ratio)),
                ],
            }
        })
        .collect();
    let report = Report { runs, summary };

    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    write_report_runs(&out.join("report_runs.csv"), &report.runs)?;
    write_summary(&out.join("report.csv"), &report.summary)?;
    fs::write(out.join("report.txt"), render_text(&report.summary))?;
    Ok(report)
}

fn write_report_runs(path: &Path, runs: &[RunRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    let mut header = vec!["scenario"];
    header.extend(csvio::METRICS_HEADER);
    w.write_record(&header)?;
    for r in runs {
        w.serialize((&r.scenario, &r.row))?;
    }
    w.flush()?;
    Ok(())
}

fn write_summary(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["method".to_string(), "scenario".to_string(), "seeds".to_string()];
    for c in SUMMARY_COLUMNS {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_std"));
    }
    w.write_record(&header)?;
    for s in summary {
        let mut rec = vec![s.method.clone(), s.scenario.clone(), s.seeds.to_string()];
        for c in &s.columns {
            match c {
                Some(sp) => {
                    rec.push(sp.mean.to_string());
                    rec.push(sp.std.to_string());
                }
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Aligned plain-text table of the summary, `mean ± std` per cell.
pub fn render_text(summary: &[SummaryRow]) -> String {
    let mut table: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["method".to_string(), "scenario".to_string(), "seeds".to_string()];
    header.extend(SUMMARY_COLUMNS.iter().map(|c| c.to_string()));
    table.push(header);
    for s in summary {
        let mut row = vec![s.method.clone(), s.scenario.clone(), s.seeds.to_string()];
        for (i, c) in s.columns.iter().enumerate() {
            let digits = if i >= 5 { 3 } else { 2 };
            row.push(match c {
                Some(sp) => format!("{:.*} ± {:.*}", digits, sp.mean, digits, sp.std),
                None => "-".to_string(),
            });
        }
        table.push(row);
    }
    let ncol = table[0].len();
    let widths: Vec<usize> = (0..ncol)
        .map(|j| table.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (c, &w))| {
                let pad = w - c.chars().count();
                if j < 2 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (ncol - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}
