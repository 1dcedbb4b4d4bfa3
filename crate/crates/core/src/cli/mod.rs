//! The `gkg` command-line front end.
//!
//! Exit codes: 0 success, 1 gradient check failed, 2 bad config or input,
//! 3 non-finite loss during training.

pub mod checkpoint;
pub mod config;
pub mod export;
pub mod train;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{class_names, generate_shapes_dataset, image_from_bytes, read_dataset, read_ppm, write_dataset};
use crate::error::{Error, Result};
use crate::losses::total_loss;
use crate::model::{GkgModel, ModelConfig};
use crate::numerics::{finite_difference_gradcheck, GradcheckOptions, GradcheckReport, Tape, Tensor};

use checkpoint::Checkpoint;
use config::{Precision, RunConfig};
use export::export_connections;
use train::{evaluate_model, fit, EpochRecord, TrainSummary};

/// Pass threshold of the gradient check.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "gkg", version, about = "Group KNN graph network for multi-label recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the shapes dataset; writes log.jsonl and checkpoints to --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; prints the metrics report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the validation split of the checkpoint's config.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Compare analytic and central-difference gradients of the batch loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Fraction of scalar parameters to check.
        #[arg(long, default_value_t = 1.0)]
        subset: f64,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Train one model per axis value with a shared seed; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
    /// Print the connection record of one image as JSON.
    ExportGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Binary PPM (P6) or raw little-endian f32 [H, W, 3].
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a shapes dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum Axis {
    #[value(name = "G")]
    G,
    #[value(name = "K")]
    K,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return 2;
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("GKG_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config("GKG_THREADS", format!("expected a positive integer, got `{v}`")))?;
    // Already built means an earlier call in this process set it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = common.precision {
        cfg.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Command) -> Result<i32> {
    let stdout = std::io::stdout();
    match cmd {
        Command::Train { common, out } => {
            let cfg = load_config(&common)?;
            let summary = train_run(&cfg, &out)?;
            let last = summary.records.last().expect("records");
            serde_json::to_writer(stdout.lock(), last)?;
            println!();
        }
        Command::Eval { checkpoint, dataset } => {
            let report = eval_run(&checkpoint, dataset.as_deref())?;
            serde_json::to_writer_pretty(stdout.lock(), &report)?;
            println!();
        }
        Command::Gradcheck {
            common,
            subset,
            batch,
            h,
            corrupt_backward,
        } => {
            let mut cfg = match &common.config {
                Some(_) => load_config(&common)?,
                None => RunConfig {
                    model: ModelConfig::micro(),
                    seed: common.seed.unwrap_or(0),
                    ..RunConfig::default()
                },
            };
            cfg.precision = Precision::F64;
            let opts = GradcheckOptions {
                h,
                subset,
                seed: cfg.seed,
                inject_fault: corrupt_backward,
            };
            let report = gradcheck_run(&cfg, batch, &opts)?;
            let pass = report.max_rel_error <= GRADCHECK_TOLERANCE;
            println!(
                "{}",
                serde_json::json!({
                    "max_rel_error": report.max_rel_error,
                    "worst_param": report.worst_param,
                    "worst_index": report.worst_index,
                    "analytic": report.analytic,
                    "numeric": report.numeric,
                    "checked": report.checked,
                    "pass": pass,
                })
            );
            if !pass {
                eprintln!(
                    "gradcheck failed: max rel error {:.3e} at {}[{}]",
                    report.max_rel_error, report.worst_param, report.worst_index
                );
                return Ok(1);
            }
        }
        Command::Sweep {
            common,
            axis,
            values,
            out,
        } => {
            let cfg = load_config(&common)?;
            sweep_run(&cfg, axis, &values, &out)?;
            print!("{}", fs::read_to_string(out.join("sweep.csv"))?);
        }
        Command::ExportGraph { checkpoint, image, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.build_model()?;
            let img = load_image(&image, &model.config)?;
            let rec = export_connections(&model, &img)?;
            let json = serde_json::to_string_pretty(&rec)?;
            match out {
                Some(p) => fs::write(p, json)?,
                None => println!("{json}"),
            }
        }
        Command::GenData { common, split, out } => {
            let cfg = load_config(&common)?;
            let shapes = match split {
                Split::Train => cfg.train_data(),
                Split::Val => cfg.val_data(),
            };
            let samples = generate_shapes_dataset(&shapes)?;
            write_dataset(&out, &samples, &class_names(cfg.model.num_classes))?;
        }
    }
    Ok(0)
}

/// Trains the configured model, writing `log.jsonl`, `config.json`,
/// `final.ckpt.json` and `best.ckpt.json` under `out`.
pub fn train_run(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let train = generate_shapes_dataset(&cfg.train_data())?;
    let val = generate_shapes_dataset(&cfg.val_data())?;
    let mut model = GkgModel::new(cfg.model.clone(), cfg.seed)?;
    let mut log = BufWriter::new(File::create(out.join("log.jsonl"))?);
    let mut final_ck = None;
    let summary = fit(
        &mut model,
        cfg,
        &train,
        &val,
        &mut |m: &GkgModel, rec: &EpochRecord, rng: &checkpoint::RngState, is_best: bool| -> Result<()> {
            serde_json::to_writer(&mut log, rec)?;
            log.write_all(b"\n")?;
            log.flush()?;
            let ck = Checkpoint::capture(cfg, &m.params, rec.step, rec.epoch, rng.clone())?;
            if is_best {
                ck.save(&out.join("best.ckpt.json"))?;
            }
            final_ck = Some(ck);
            Ok(())
        },
    )?;
    final_ck.expect("epoch 0 always reported").save(&out.join("final.ckpt.json"))?;
    Ok(summary)
}

pub fn eval_run(checkpoint: &Path, dataset: Option<&Path>) -> Result<crate::metrics::MetricsReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.build_model()?;
    let mc = &model.config;
    let samples = match dataset {
        Some(dir) => {
            let (index, samples) = read_dataset(dir)?;
            if [index.height, index.width, index.channels] != [mc.image_size, mc.image_size, mc.channels] {
                return Err(Error::config(
                    "dataset",
                    format!(
                        "images are {}x{}x{}, model expects {s}x{s}x{}",
                        index.height, index.width, index.channels, mc.channels,
                        s = mc.image_size
                    ),
                ));
            }
            if index.class_names.len() != mc.num_classes {
                return Err(Error::config(
                    "dataset",
                    format!("{} classes, model has {}", index.class_names.len(), mc.num_classes),
                ));
            }
            samples
        }
        None => generate_shapes_dataset(&ck.config.val_data())?,
    };
    if samples.is_empty() {
        return Err(Error::config("dataset", "no samples"));
    }
    evaluate_model(&model, &samples)
}

/// Gradient check of the mean total loss over the first `batch` training samples.
pub fn gradcheck_run(cfg: &RunConfig, batch: usize, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if batch == 0 {
        return Err(Error::config("batch", "must be >= 1"));
    }
    let mut data_cfg = cfg.train_data();
    data_cfg.n_samples = batch;
    let samples = generate_shapes_dataset(&data_cfg)?;
    let model = GkgModel::new(cfg.model.clone(), cfg.seed)?;
    let loss_cfg = cfg.loss.clone();
    let objective = |tape: &mut Tape, store: &crate::numerics::ParamStore| {
        let mut total = None;
        for s in &samples {
            let out = model.forward_with(store, tape, &s.image, false)?;
            let l = total_loss(tape, out.logits, &s.targets(), &loss_cfg)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        Ok(tape.scale(total.expect("batch >= 1"), 1.0 / samples.len() as f64))
    };
    finite_difference_gradcheck(objective, &model.params, opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub map: f64,
    pub cf1: f64,
    pub of1: f64,
    pub wall_s: f64,
}

/// Subdirectory of a sweep run, e.g. `G_2`.
pub fn sweep_dir(out: &Path, axis: Axis, value: usize) -> PathBuf {
    out.join(format!("{axis:?}_{value}"))
}

/// One training run per value; writes `sweep.csv` (header `value,map,cf1,of1,wall_s`).
/// Every value is validated before any training starts.
pub fn sweep_run(cfg: &RunConfig, axis: Axis, values: &[usize], out: &Path) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::config("values", "at least one value required"));
    }
    let configs: Vec<RunConfig> = values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            match axis {
                Axis::G => c.model.groups = v,
                Axis::K => c.model.k = v,
            }
            c.validate().map(|_| c)
        })
        .collect::<Result<_>>()?;
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for (c, &v) in configs.iter().zip(values) {
        let start = Instant::now();
        let summary = train_run(c, &sweep_dir(out, axis, v))?;
        let m = &summary.final_val;
        rows.push(SweepRow {
            value: v,
            map: m.map,
            cf1: m.cf1,
            of1: m.of1,
            wall_s: start.elapsed().as_secs_f64(),
        });
        if axis == Axis::K {
            let clamped: Vec<String> = c
                .model
                .stage_plans()
                .iter()
                .enumerate()
                .filter(|(_, p)| p.grid.0 * p.grid.1 < v)
                .map(|(s, p)| format!("stage {} (k={})", s + 1, p.grid.0 * p.grid.1))
                .collect();
            if !clamped.is_empty() {
                notes.push(format!("# K={v} clamped at {}", clamped.join(", ")));
            }
        }
    }
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::Writer::from_path(out.join("sweep.csv")).map_err(csv_err)?;
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    drop(w);
    if !notes.is_empty() {
        let mut f = fs::OpenOptions::new().append(true).open(out.join("sweep.csv"))?;
        for n in &notes {
            writeln!(f, "{n}")?;
        }
    }
    Ok(rows)
}

/// Reads a PPM or raw f32 image and checks it against the model's input size.
pub fn load_image(path: &Path, cfg: &ModelConfig) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let shape = [cfg.image_size, cfg.image_size, cfg.channels];
    let img = if bytes.starts_with(b"P6") {
        read_ppm(&bytes)?
    } else {
        image_from_bytes(&bytes, &shape)?
    };
    if img.shape() != shape {
        return Err(Error::config(
            "image",
            format!("shape {:?}, model expects {shape:?}", img.shape()),
        ));
    }
    Ok(img)
}
