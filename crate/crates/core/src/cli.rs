//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::dataset::{load_dataset, save_preprocessed, Sample};
use crate::data::image::read_image;
use crate::data::synth::{write_synthetic, SyntheticConfig};
use crate::error::{Error, Result};
use crate::experiment::{
    any_diverged, collect_report, preset, read_config, report_csv, run_cases, run_many, table_presets, Settings, SEEDS,
};
use crate::metrics::{aggregate, evaluate, metrics_csv, probability_maps, write_probability_map};
use crate::model::checkpoint;
use crate::model::{count_params, UNet, UNetConfig, Variant};

pub const DATA_ENV: &str = "TINYUNET_DATA";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "tinyunet", version, about = "Small U-Net family for retinal vessel segmentation")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Preprocess a raw dataset directory into samples/ + manifest.
    Preprocess {
        raw: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        clahe_tiles: usize,
        #[arg(long, default_value_t = 2.0)]
        clahe_clip: f64,
    },
    /// Write a synthetic dataset in the raw layout.
    Synth {
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Cases (taken from the end) that form the test set.
        #[arg(long, default_value_t = 8)]
        test: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Train a preset (all five seeds unless --seed is given).
    Train {
        #[arg(long)]
        preset: String,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Evaluate a checkpoint on the test cases of a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArg,
        /// Write the metrics CSV here instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write one probability map per test case into this directory.
        #[arg(long)]
        maps: Option<PathBuf>,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Run every preset of a results table and write table<k>.csv.
    Grid {
        #[arg(long)]
        table: u8,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        /// Seeds to run (comma separated).
        #[arg(long, value_delimiter = ',', default_values_t = SEEDS)]
        seeds: Vec<u64>,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Summarize finished runs of a table without training.
    Report {
        run_dir: PathBuf,
        #[arg(long)]
        table: u8,
        #[arg(long, value_delimiter = ',', default_values_t = SEEDS)]
        seeds: Vec<u64>,
    },
    /// Print the exact trainable parameter count of a configuration.
    Params {
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long, default_value_t = 16)]
        filters: usize,
        #[arg(long, default_value_t = 2)]
        convs: usize,
        #[arg(long, default_value_t = Variant::Plain)]
        variant: Variant,
        #[arg(long)]
        no_relu: bool,
    },
    /// Write the vessel probability map of one image.
    Probmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Field-of-view mask; the whole image when omitted.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset directory (raw or preprocessed).
    #[arg(long = "data", env = DATA_ENV)]
    dir: PathBuf,
}

/// Settings overrides; later sources win: defaults < --config < flags < --set.
#[derive(Args, Debug, Default)]
struct TrainOpts {
    /// Flat `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` setting (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

impl TrainOpts {
    fn settings(&self) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(p) = &self.config {
            s.apply(&read_config(p)?)?;
        }
        let flags: [(&str, Option<String>); 12] = [
            ("lr0", self.lr0.map(|v| v.to_string())),
            ("decay", self.decay.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("patch", self.patch.map(|v| v.to_string())),
            ("batches_per_epoch", self.batches_per_epoch.map(|v| v.to_string())),
            ("max_epochs", self.max_epochs.map(|v| v.to_string())),
            ("patience", self.patience.map(|v| v.to_string())),
            ("gamma", self.gamma.map(|v| v.to_string())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("subset", self.subset.map(|v| v.to_string())),
            ("split_seed", self.split_seed.map(|v| v.to_string())),
            ("workers", self.workers.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                s.set(k, &v)?;
            }
        }
        for kv in &self.set {
            let (k, v) =
                kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            s.set(k.trim(), v.trim())?;
        }
        s.validate()?;
        Ok(s)
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Diverged { .. } => EXIT_DIVERGED,
        _ => EXIT_DATA,
    }
}

/// Parse `argv` (program name first), run, and return the exit code.
pub fn run<I, A>(argv: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Preprocess { raw, out, clahe_tiles, clahe_clip } => {
            let mut s = Settings::default();
            s.set("clahe_tiles", &clahe_tiles.to_string())?;
            s.set("clahe_clip", &clahe_clip.to_string())?;
            let ds = load_dataset(&raw, &s.prep)?;
            create_dir(&out)?;
            save_preprocessed(&out, &ds)?;
            println!("preprocessed {} cases into {}", ds.samples.len(), out.display());
        }
        Command::Synth { out, seed, count, test, size } => {
            let cfg = SyntheticConfig { seed, count, width: size, height: size, ..Default::default() };
            create_dir(&out)?;
            write_synthetic(&out, &cfg, test)?;
            println!("wrote {count} synthetic cases to {}", out.display());
        }
        Command::Train { preset: name, data, out, seed, opts } => {
            let p = preset(&name)?;
            let settings = opts.settings()?;
            let ds = load_dataset(&data.dir, &settings.prep)?;
            let seeds = seed.map_or(SEEDS.to_vec(), |s| vec![s]);
            create_dir(&out)?;
            let outcomes = run_many(std::slice::from_ref(&p), &seeds, &ds, &settings, &out)?;
            for o in &outcomes {
                match &o.metrics {
                    Some(m) => println!(
                        "{} seed {}: AUC {:.4} F1 {:.4} (threshold {:.3}, {} epochs)",
                        o.preset,
                        o.seed,
                        m.auc,
                        m.f1,
                        m.threshold,
                        o.history.records.len()
                    ),
                    None => println!("{} seed {}: diverged ({:?})", o.preset, o.seed, o.history.stop),
                }
            }
            if any_diverged(&outcomes) {
                return Ok(EXIT_DIVERGED);
            }
        }
        Command::Evaluate { checkpoint: ck, data, out, maps, opts } => {
            let (mut net, meta) = checkpoint::load::<f32>(&ck)?;
            let mut settings = opts.settings()?;
            if let (None, Some(s)) = (opts.split_seed, meta.get("split_seed")) {
                settings.set("split_seed", s)?;
            }
            let ds = load_dataset(&data.dir, &settings.prep)?;
            let seed = meta.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
            let (_, va, te) = run_cases(&ds, None, seed, settings.split_seed)?;
            if let Some(dir) = &maps {
                create_dir(dir)?;
                write_maps(&mut net, &te, dir)?;
            }
            let m = evaluate(&mut net, &te, &va)?;
            let csv = metrics_csv(&[m], &aggregate(&[m], net.num_params())?);
            match out {
                Some(p) => fs::write(&p, &csv).map_err(|e| Error::io(&p, e))?,
                None => print!("{csv}"),
            }
        }
        Command::Grid { table, data, out, seeds, opts } => {
            let names = table_presets(table)?;
            let settings = opts.settings()?;
            let presets = names.iter().map(|n| preset(n)).collect::<Result<Vec<_>>>()?;
            let ds = load_dataset(&data.dir, &settings.prep)?;
            create_dir(&out)?;
            let outcomes = run_many(&presets, &seeds, &ds, &settings, &out)?;
            let (rows, summary) = collect_report(&out, names, &seeds)?;
            let f = out.join(format!("table{table}.csv"));
            fs::write(&f, report_csv(&rows)).map_err(|e| Error::io(&f, e))?;
            print!("{summary}");
            if any_diverged(&outcomes) {
                return Ok(EXIT_DIVERGED);
            }
        }
        Command::Report { run_dir, table, seeds } => {
            let (rows, summary) = collect_report(&run_dir, table_presets(table)?, &seeds)?;
            print!("{}", report_csv(&rows));
            eprint!("{summary}");
        }
        Command::Params { levels, filters, convs, variant, no_relu } => {
            let cfg = UNetConfig::new(levels, filters).with_convs(convs).with_variant(variant).with_relu(!no_relu);
            cfg.validate()?;
            println!("{}", count_params(&cfg));
        }
        Command::Probmap { checkpoint: ck, image, mask, out } => {
            let (mut net, _) = checkpoint::load::<f32>(&ck)?;
            let rgb = read_image(&image)?;
            let fov = match &mask {
                Some(p) => read_image(p)?,
                None => {
                    crate::data::image::Image8::from_mask(rgb.width, rgb.height, &vec![true; rgb.width * rgb.height])
                }
            };
            let label =
                crate::data::image::Image8::from_mask(rgb.width, rgb.height, &vec![false; rgb.width * rgb.height]);
            let s = Sample::from_raw("probmap", &rgb, &label, &fov, &Settings::default().prep)?;
            let map = probability_maps(&mut net, &[&s])?.remove(0);
            write_probability_map(&out, &map, s.width, s.height)?;
        }
    }
    Ok(EXIT_OK)
}

fn write_maps(net: &mut UNet<f32>, samples: &[&Sample], dir: &Path) -> Result<()> {
    let maps = probability_maps(net, samples)?;
    for (m, s) in maps.iter().zip(samples) {
        write_probability_map(&dir.join(format!("{}.png", s.id)), m, s.width, s.height)?;
    }
    Ok(())
}
