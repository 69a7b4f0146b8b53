use std::path::{Path, PathBuf};

use gsglab_core::data::Split;
use gsglab_core::eval;
use gsglab_core::nn::{format_f64, EncoderStack};
use gsglab_core::objective::LossStrategy;
use gsglab_core::train::{self, MetricsRecord};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::output::{optional, write_csv, write_metrics};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const THREADS_ENV: &str = "GSGLAB_THREADS";

/// Outputs of one finished run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub metrics: Vec<MetricsRecord>,
    pub stack: EncoderStack,
}

impl RunOutcome {
    pub fn final_knn(&self) -> Option<f64> {
        self.metrics.last().and_then(|m| m.knn_acc)
    }

    pub fn final_collapse(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.collapse)
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

/// Trains `config` and writes the manifest, metrics and final checkpoint into
/// `out_dir`. The manifest is written before training starts.
pub fn run(config: &RunConfig, out_dir: &Path) -> Result<RunOutcome, CliError> {
    config.validate()?;
    let ds = config.dataset()?;
    let manifest = RunManifest::new(config, &ds)?;
    create_dir(out_dir)?;
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    let (stack, metrics) = train::train_run(&config.train_config(), &ds)?;
    write_metrics(&out_dir.join(METRICS_FILE), &metrics)?;
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    stack.save_checkpoint(&ckpt).map_err(|e| match e {
        gsglab_core::nn::NnError::Io(source) => CliError::Io {
            path: ckpt.clone(),
            source,
        },
        other => other.into(),
    })?;
    Ok(RunOutcome {
        manifest,
        metrics,
        stack,
    })
}

pub fn cmd_train(config_path: &Path, out_dir: &Path) -> Result<RunOutcome, CliError> {
    run(&RunConfig::load(config_path)?, out_dir)
}

/// One line of `gsglab eval` output.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub knn_acc: f64,
    pub probe_acc: f64,
    pub collapse: f64,
}

impl EvalReport {
    pub const HEADER: &'static str = "k,knn_acc,probe_acc,collapse";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.k,
            format_f64(self.knn_acc),
            format_f64(self.probe_acc),
            format_f64(self.collapse)
        )
    }
}

/// kNN and linear-probe accuracy on the test split, and the collapse
/// statistic of the train split, for a saved checkpoint.
pub fn cmd_eval(checkpoint: &Path, config_path: &Path, k: usize) -> Result<EvalReport, CliError> {
    let config = RunConfig::load(config_path)?;
    let stack = EncoderStack::load_checkpoint(checkpoint)?;
    let ds = config.dataset()?;
    let width = stack.arch().input_dim();
    if ds.dim() != width {
        return Err(CliError::Usage(format!(
            "checkpoint expects {width} input features but the dataset has {}",
            ds.dim()
        )));
    }
    let train_bank = eval::extract_features(&stack, &ds, Split::Train)?;
    let test_bank = eval::extract_features(&stack, &ds, Split::Test)?;
    if k == 0 || k > train_bank.len() {
        return Err(CliError::Usage(format!(
            "k must lie in 1..={}, got {k}",
            train_bank.len()
        )));
    }
    Ok(EvalReport {
        k,
        knn_acc: eval::knn_accuracy(&train_bank, &test_bank, k)?,
        probe_acc: eval::linear_probe(&train_bank, &test_bank, &config.probe_config())?,
        collapse: eval::collapse_statistic(&train_bank)?,
    })
}

/// Thread pool sized by `GSGLAB_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            CliError::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))
        })?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| CliError::Usage(e.to_string()))
}

/// Mean of the evaluated kNN accuracies over the run.
pub fn knn_auc(metrics: &[MetricsRecord]) -> Option<f64> {
    let vals: Vec<f64> = metrics.iter().filter_map(|m| m.knn_acc).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// One ablation cell and how it ended.
#[derive(Debug, Clone)]
pub struct Cell {
    pub strategy: LossStrategy,
    pub predictor: bool,
    pub seed: u64,
    pub dir: PathBuf,
    pub result: Result<RunOutcome, String>,
}

impl Cell {
    pub fn status(&self) -> &'static str {
        if self.result.is_ok() {
            "ok"
        } else {
            "failed"
        }
    }
}

pub const ABLATION_HEADER: [&str; 8] = [
    "strategy",
    "predictor",
    "seed",
    "status",
    "final_knn",
    "final_collapse",
    "knn_auc",
    "error",
];

/// Runs {symmetric, gsg, random, reverse} x {predictor on, off} x `seeds`
/// runs of the base config. Seeds are `train.seed + i`. Rows of
/// `summary.csv` are ordered by strategy, then predictor (on first), then seed.
pub fn cmd_ablate(config_path: &Path, out_dir: &Path, seeds: usize) -> Result<Vec<Cell>, CliError> {
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let base = RunConfig::load(config_path)?;
    base.validate()?;
    create_dir(out_dir)?;
    let mut plan = Vec::new();
    for strategy in LossStrategy::ALL {
        for predictor in [true, false] {
            for i in 0..seeds as u64 {
                let mut cfg = base.clone();
                cfg.train.strategy = strategy;
                cfg.model.predictor = predictor;
                cfg.train.seed = base.train.seed.wrapping_add(i);
                let name = format!(
                    "{strategy}_pred-{}_seed-{}",
                    if predictor { "on" } else { "off" },
                    cfg.train.seed
                );
                plan.push((strategy, predictor, cfg, out_dir.join(name)));
            }
        }
    }
    let pool = thread_pool()?;
    let cells: Vec<Cell> = pool.install(|| {
        plan.into_par_iter()
            .map(|(strategy, predictor, cfg, dir)| Cell {
                strategy,
                predictor,
                seed: cfg.train.seed,
                result: run(&cfg, &dir).map_err(|e| e.to_string()),
                dir,
            })
            .collect()
    });
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            let (knn, collapse, auc, err) = match &c.result {
                Ok(r) => (
                    r.final_knn(),
                    r.final_collapse(),
                    knn_auc(&r.metrics),
                    String::new(),
                ),
                Err(e) => (None, None, None, e.clone()),
            };
            vec![
                c.strategy.to_string(),
                if c.predictor { "on" } else { "off" }.to_string(),
                c.seed.to_string(),
                c.status().to_string(),
                optional(knn),
                optional(collapse),
                optional(auc),
                err,
            ]
        })
        .collect();
    write_csv(&out_dir.join(SUMMARY_FILE), &ABLATION_HEADER, &rows)?;
    if cells.iter().all(|c| c.result.is_err()) {
        return Err(CliError::AllCellsFailed(cells.len()));
    }
    Ok(cells)
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub batch_size: usize,
    pub dir: PathBuf,
    pub result: Result<RunOutcome, String>,
}

pub const SWEEP_HEADER: [&str; 5] = [
    "batch_size",
    "status",
    "final_knn",
    "total_updates",
    "error",
];

/// Parses `16,32,64`.
pub fn parse_sizes(text: &str) -> Result<Vec<usize>, CliError> {
    let sizes: Vec<usize> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad batch size `{}`", s.trim())))
        })
        .collect::<Result<_, _>>()?;
    if sizes.is_empty() || sizes.iter().any(|&b| b < 2) {
        return Err(CliError::Usage(format!(
            "batch sizes must be at least 2, got {text}"
        )));
    }
    Ok(sizes)
}

/// One run per batch size. Every run takes the number of steps per epoch that
/// the largest size gets from the train split, so all runs make the same
/// number of updates.
pub fn cmd_sweep_batch(
    config_path: &Path,
    sizes: &[usize],
    out_dir: &Path,
) -> Result<Vec<SweepPoint>, CliError> {
    if sizes.is_empty() || sizes.iter().any(|&b| b < 2) {
        return Err(CliError::Usage("batch sizes must be at least 2".into()));
    }
    let base = RunConfig::load(config_path)?;
    base.validate()?;
    let ds = base.dataset()?;
    let largest = *sizes.iter().max().expect("non-empty");
    let steps = ds.train_indices().len() / largest;
    if steps == 0 {
        return Err(CliError::Usage(format!(
            "batch size {largest} exceeds the {} train samples",
            ds.train_indices().len()
        )));
    }
    create_dir(out_dir)?;
    let plan: Vec<_> = sizes
        .iter()
        .map(|&b| {
            let mut cfg = base.clone();
            cfg.train.batch_size = b;
            cfg.train.steps_per_epoch = Some(steps);
            (b, cfg, out_dir.join(format!("batch-{b}")))
        })
        .collect();
    let pool = thread_pool()?;
    let points: Vec<SweepPoint> = pool.install(|| {
        plan.into_par_iter()
            .map(|(batch_size, cfg, dir)| SweepPoint {
                batch_size,
                result: run(&cfg, &dir).map_err(|e| e.to_string()),
                dir,
            })
            .collect()
    });
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| match &p.result {
            Ok(r) => vec![
                p.batch_size.to_string(),
                "ok".into(),
                optional(r.final_knn()),
                r.manifest.total_updates.to_string(),
                String::new(),
            ],
            Err(e) => vec![
                p.batch_size.to_string(),
                "failed".into(),
                String::new(),
                String::new(),
                e.clone(),
            ],
        })
        .collect();
    write_csv(&out_dir.join(SUMMARY_FILE), &SWEEP_HEADER, &rows)?;
    if points.iter().all(|p| p.result.is_err()) {
        return Err(CliError::AllCellsFailed(points.len()));
    }
    Ok(points)
}
