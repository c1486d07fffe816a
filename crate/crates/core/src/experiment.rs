//! Named experiment presets, run/grid execution and table reports.
//!
//! A run directory looks like
//!
//! ```text
//! <out>/<preset>/seed-<n>/history.csv
//! <out>/<preset>/seed-<n>/metrics.csv
//! <out>/<preset>/seed-<n>/model.tuck
//! <out>/<preset>/metrics.csv         per-run rows plus mean/std
//! <out>/table<k>.csv                 written by the grid
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::clahe::ClaheParams;
use crate::data::dataset::{split, training_subset, Dataset, PrepConfig, Sample, VALIDATION_COUNT};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate, metrics_csv, RunMetrics, Stat};
use crate::model::checkpoint;
use crate::model::{count_params, UNet, UNetConfig, Variant};
use crate::train::{train, History, StopReason, TrainConfig};

pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub const PRESET_NAMES: [&str; 16] = [
    "U",
    "Ures",
    "Uden",
    "Uside",
    "U-lin",
    "U-1C",
    "levels-2",
    "levels-1",
    "filters-8",
    "filters-4",
    "filters-2",
    "filters-1",
    "subset-8",
    "subset-4",
    "subset-2",
    "subset-1",
];

pub const CHECKPOINT_FILE: &str = "model.tuck";

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: String,
    pub net: UNetConfig,
    /// Training cases drawn from the pool; `None` uses all of them.
    pub subset: Option<usize>,
}

pub fn preset(name: &str) -> Result<Preset> {
    let u = UNetConfig::default();
    let net = match name {
        "U" => u,
        "Ures" => u.with_variant(Variant::Residual),
        "Uden" => u.with_variant(Variant::Dense),
        "Uside" => u.with_variant(Variant::SideOutput),
        "U-lin" => u.with_relu(false),
        "U-1C" => u.with_convs(1),
        "levels-2" => UNetConfig { levels: 2, ..u },
        "levels-1" => UNetConfig { levels: 1, ..u },
        "filters-8" => UNetConfig { base_filters: 8, ..u },
        "filters-4" => UNetConfig { base_filters: 4, ..u },
        "filters-2" => UNetConfig { base_filters: 2, ..u },
        "filters-1" => UNetConfig { base_filters: 1, ..u },
        "subset-8" | "subset-4" | "subset-2" | "subset-1" => u,
        _ => return Err(Error::Config(format!("unknown preset '{name}'; valid presets: {}", PRESET_NAMES.join(", ")))),
    };
    let subset = name.strip_prefix("subset-").map(|n| n.parse().expect("preset subset size"));
    Ok(Preset { name: name.to_string(), net, subset })
}

/// Presets reported together in table `k`.
pub fn table_presets(table: u8) -> Result<&'static [&'static str]> {
    match table {
        1 => Ok(&["U", "Ures", "Uden", "Uside", "U-lin", "U-1C"]),
        2 => Ok(&["levels-2", "levels-1"]),
        3 => Ok(&["filters-8", "filters-4", "filters-2", "filters-1"]),
        4 => Ok(&["subset-8", "subset-4", "subset-2", "subset-1"]),
        _ => Err(Error::Config(format!("table must be 1, 2, 3 or 4, got {table}"))),
    }
}

/// Everything a run needs besides the preset and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    pub prep: PrepConfig,
    /// Seed of the train/validation split, shared by all runs.
    pub split_seed: u64,
    /// Concurrent runs in a grid.
    pub workers: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings { train: TrainConfig::default(), prep: PrepConfig::default(), split_seed: 0, workers: 1 }
    }
}

pub const SETTING_KEYS: [&str; 24] = [
    "lr0",
    "decay",
    "lr_floor",
    "batch_size",
    "patch",
    "batches_per_epoch",
    "gamma",
    "lambda",
    "patience",
    "max_epochs",
    "seed",
    "subset",
    "beta1",
    "beta2",
    "eps",
    "rotation",
    "shear",
    "noise",
    "shift",
    "aug_prob",
    "clahe_tiles",
    "clahe_clip",
    "split_seed",
    "workers",
];

fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "lr0" => t.lr0 = num(key, value)?,
            "decay" => t.decay = num(key, value)?,
            "lr_floor" => t.lr_floor = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "patch" => t.patch = num(key, value)?,
            "batches_per_epoch" => t.batches_per_epoch = num(key, value)?,
            "gamma" => t.gamma = num(key, value)?,
            "lambda" => t.lambda = num(key, value)?,
            "patience" => t.patience = num(key, value)?,
            "max_epochs" => t.max_epochs = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "subset" => t.subset = Some(num(key, value)?),
            "beta1" => t.adam.beta1 = num(key, value)?,
            "beta2" => t.adam.beta2 = num(key, value)?,
            "eps" => t.adam.eps = num(key, value)?,
            "rotation" => t.augment.rotation_deg = num(key, value)?,
            "shear" => t.augment.shear = num(key, value)?,
            "noise" => t.augment.noise_sigma = num(key, value)?,
            "shift" => t.augment.shift = num(key, value)?,
            "aug_prob" => t.augment.probability = num(key, value)?,
            "clahe_tiles" => {
                let n: usize = num(key, value)?;
                self.prep.clahe = ClaheParams { tiles_x: n, tiles_y: n, ..self.prep.clahe };
            }
            "clahe_clip" => self.prep.clahe.clip_limit = num(key, value)?,
            "split_seed" => self.split_seed = num(key, value)?,
            "workers" => self.workers = num(key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown setting '{key}'; known settings: {}",
                    SETTING_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        self.train.validate()
    }
}

/// Flat `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected 'key = value', got '{line}'", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn run_dir(out: &Path, preset: &str, seed: u64) -> PathBuf {
    out.join(preset).join(format!("seed-{seed}"))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub preset: String,
    pub seed: u64,
    pub history: History,
    /// `None` when training diverged.
    pub metrics: Option<RunMetrics>,
    pub params: usize,
}

/// Cases used by one run: (train, validation, test).
pub fn run_cases(
    ds: &Dataset,
    subset: Option<usize>,
    seed: u64,
    split_seed: u64,
) -> Result<(Vec<&Sample>, Vec<&Sample>, Vec<&Sample>)> {
    let sp = split(&ds.manifest, VALIDATION_COUNT, split_seed)?;
    let train_ids = match subset {
        Some(n) => training_subset(&sp.train, n, seed)?,
        None => sp.train.clone(),
    };
    Ok((ds.get(&train_ids)?, ds.get(&sp.validation)?, ds.get(&sp.test)?))
}

/// Train and evaluate one (preset, seed) pair, writing its run directory.
pub fn run_one(p: &Preset, seed: u64, ds: &Dataset, settings: &Settings, out: &Path) -> Result<RunOutcome> {
    let dir = run_dir(out, &p.name, seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut cfg = settings.train.clone();
    cfg.seed = seed;
    if p.subset.is_some() {
        cfg.subset = p.subset;
    }
    let (tr, va, te) = run_cases(ds, cfg.subset, seed, settings.split_seed)?;
    let mut net = UNet::<f32>::build(p.net, seed)?;
    log::info!("{} seed {seed}: {} parameters, {} training cases", p.name, net.num_params(), tr.len());
    let history = train(&mut net, &tr, &va, &cfg, |r| {
        log::info!("{} seed {seed} epoch {}: train {:.5} val {:.5}", p.name, r.epoch, r.train_loss, r.val_loss)
    })?;
    history.write_csv(&dir.join("history.csv"))?;

    let mut meta = BTreeMap::new();
    meta.insert("preset".to_string(), p.name.clone());
    meta.insert("seed".to_string(), seed.to_string());
    meta.insert("split_seed".to_string(), settings.split_seed.to_string());
    meta.insert("train_ids".to_string(), tr.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join(","));
    meta.insert("best_epoch".to_string(), history.best_epoch.map_or("none".into(), |e| e.to_string()));
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &net, &meta)?;

    let metrics = if history.diverged() {
        log::warn!("{} seed {seed}: training diverged ({:?})", p.name, history.stop);
        None
    } else {
        let m = evaluate(&mut net, &te, &va)?;
        let rep = aggregate(&[m], net.num_params())?;
        let f = dir.join("metrics.csv");
        fs::write(&f, metrics_csv(&[m], &rep)).map_err(|e| Error::io(&f, e))?;
        Some(m)
    };
    Ok(RunOutcome { preset: p.name.clone(), seed, history, metrics, params: net.num_params() })
}

/// Run every (preset, seed) pair on a pool of `settings.workers` threads.
pub fn run_many(
    presets: &[Preset],
    seeds: &[u64],
    ds: &Dataset,
    settings: &Settings,
    out: &Path,
) -> Result<Vec<RunOutcome>> {
    settings.validate()?;
    let jobs: Vec<(&Preset, u64)> = presets.iter().flat_map(|p| seeds.iter().map(move |&s| (p, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let outcomes =
        pool.install(|| jobs.par_iter().map(|&(p, s)| run_one(p, s, ds, settings, out)).collect::<Result<Vec<_>>>())?;
    for p in presets {
        let runs: Vec<RunMetrics> = outcomes.iter().filter(|o| o.preset == p.name).filter_map(|o| o.metrics).collect();
        if !runs.is_empty() {
            let rep = aggregate(&runs, count_params(&p.net))?;
            let f = out.join(&p.name).join("metrics.csv");
            fs::write(&f, metrics_csv(&runs, &rep)).map_err(|e| Error::io(&f, e))?;
        }
    }
    Ok(outcomes)
}

pub fn any_diverged(outcomes: &[RunOutcome]) -> bool {
    outcomes.iter().any(|o| matches!(o.history.stop, StopReason::Diverged { .. }))
}

/// One table row; `stats` is `None` when no run of the preset finished.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub preset: String,
    pub params: usize,
    /// AUC, specificity, sensitivity, F1, accuracy.
    pub stats: Option<[Stat; 5]>,
}

pub const REPORT_HEADER: &str =
    "preset,params,auc_mean,auc_std,spec_mean,spec_std,sens_mean,sens_std,f1_mean,f1_std,acc_mean,acc_std";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        let _ = write!(s, "{},{}", r.preset, r.params);
        match &r.stats {
            Some(st) => st.iter().for_each(|x| {
                let _ = write!(s, ",{:.6},{:.6}", x.mean, x.std);
            }),
            None => s.push_str(",,,,,,,,,,"),
        }
        s.push('\n');
    }
    s
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::Data("report CSV header does not match".into()));
    }
    let bad = |l: &str| Error::Data(format!("malformed report row '{l}'"));
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 12 {
                return Err(bad(l));
            }
            let params = f[1].parse().map_err(|_| bad(l))?;
            let stats = if f[2..].iter().all(|v| v.is_empty()) {
                None
            } else {
                let v: Vec<f64> = f[2..].iter().map(|x| x.parse::<f64>().map_err(|_| bad(l))).collect::<Result<_>>()?;
                Some(std::array::from_fn(|i| Stat { mean: v[2 * i], std: v[2 * i + 1] }))
            };
            Ok(ReportRow { preset: f[0].to_string(), params, stats })
        })
        .collect()
}

/// Metrics of a single run from its `metrics.csv`.
pub fn parse_run_metrics(text: &str) -> Result<RunMetrics> {
    let row = text.lines().nth(1).ok_or_else(|| Error::Data("empty run metrics file".into()))?;
    let v: Vec<f64> = row
        .split(',')
        .skip(1)
        .map(|x| x.parse::<f64>().map_err(|_| Error::Data(format!("malformed metrics row '{row}'"))))
        .collect::<Result<_>>()?;
    if v.len() != 6 {
        return Err(Error::Data(format!("malformed metrics row '{row}'")));
    }
    Ok(RunMetrics { threshold: v[0], auc: v[1], specificity: v[2], sensitivity: v[3], f1: v[4], accuracy: v[5] })
}

/// Table rows from finished run directories, plus a text summary that
/// names every missing run.
pub fn collect_report(out: &Path, presets: &[&str], seeds: &[u64]) -> Result<(Vec<ReportRow>, String)> {
    let mut rows = Vec::new();
    let mut summary = String::new();
    for &name in presets {
        let p = preset(name)?;
        let mut runs = Vec::new();
        let mut missing = Vec::new();
        for &seed in seeds {
            let f = run_dir(out, name, seed).join("metrics.csv");
            match fs::read_to_string(&f) {
                Ok(text) => runs.push(parse_run_metrics(&text)?),
                Err(_) => missing.push(seed),
            }
        }
        let params = count_params(&p.net);
        let stats = if runs.is_empty() {
            None
        } else {
            let r = aggregate(&runs, params)?;
            Some([r.auc, r.specificity, r.sensitivity, r.f1, r.accuracy])
        };
        match &stats {
            Some(s) => {
                let _ = write!(
                    summary,
                    "{name:<10} {params:>9} params  AUC {:.4} ± {:.4}  ({} runs)",
                    s[0].mean,
                    s[0].std,
                    runs.len()
                );
            }
            None => {
                let _ = write!(summary, "{name:<10} {params:>9} params  no finished runs");
            }
        }
        if !missing.is_empty() {
            let m: Vec<String> = missing.iter().map(|s| s.to_string()).collect();
            let _ = write!(summary, "  missing seeds: {}", m.join(", "));
        }
        summary.push('\n');
        rows.push(ReportRow { preset: name.to_string(), params, stats });
    }
    Ok((rows, summary))
}
