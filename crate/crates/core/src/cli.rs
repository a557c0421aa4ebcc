//! The `moticomp` command line.
//!
//! Exit codes: 0 on success, 1 on a usage error (nothing is written), 2 on a
//! runtime or numeric failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use crate::config::RunConfig;
use crate::datagen::{build_dataset, ActionPart};
use crate::error::{Error, Result};
use crate::exit::count_flops;
use crate::io;
use crate::motion::{MotionSequence, PartLayout};
use crate::predictor::{ExitChoice, Predictor};
use crate::train::{evaluate, loss_history_csv, train_predictor};
use crate::vae::{reconstruction_mpjpe, synthesize_composite, train_cag, BodyMask};

#[derive(Debug, Parser)]
#[command(name = "moticomp", version, about = "Composite human motion prediction with early-exit graph networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat JSON run configuration.
    #[arg(long, alias = "manifest")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the train, val and test splits as motion files.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the composite-generation VAE on atomic sequences.
    TrainCag {
        #[command(flatten)]
        common: Common,
        /// Directory of atomic training sequences.
        #[arg(long)]
        data: PathBuf,
    },
    /// Synthesize composite sequences from pairs of atomic ones.
    Synth {
        #[command(flatten)]
        common: Common,
        /// VAE checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Directory of atomic sequences to pair up.
        #[arg(long)]
        data: PathBuf,
        /// Decode the latent mean instead of a sampled latent.
        #[arg(long)]
        deterministic: bool,
    },
    /// Train the multi-branch predictor.
    TrainPredictor {
        #[command(flatten)]
        common: Common,
        /// Dataset root holding train/ and val/.
        #[arg(long)]
        data: PathBuf,
        /// Extra training sequences, such as synthesized composites.
        #[arg(long)]
        extra: Vec<PathBuf>,
    },
    /// Evaluate a predictor checkpoint against the zero-velocity baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Directory of test sequences.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated 1-based future frames.
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
    },
    /// Multiply-accumulate counts per branch and exit.
    Flops {
        #[command(flatten)]
        common: Common,
        /// Predictor checkpoint; the configured shape is used without one.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Sequences to route through the policies for the average.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::TrainCag { common, .. }
            | Command::Synth { common, .. }
            | Command::TrainPredictor { common, .. }
            | Command::Eval { common, .. }
            | Command::Flops { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainCag { .. } => "train-cag",
            Command::Synth { .. } => "synth",
            Command::TrainPredictor { .. } => "train-predictor",
            Command::Eval { .. } => "eval",
            Command::Flops { .. } => "flops",
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("moticomp {}: {e}", cli.command.name());
            2
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_run_info(out: &Path, command: &str, cfg: &RunConfig, extra: serde_json::Value) -> Result<()> {
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let info = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed(),
        "config": cfg.to_json(),
        "formats": {
            "motion": io::MOTION_FORMAT,
            "checkpoint": io::CHECKPOINT_VERSION,
        },
        "outputs": extra,
        "timestamp_unix": stamp,
    });
    let text = serde_json::to_string_pretty(&info).expect("run info serializes");
    write_text(&out.join("run-info.json"), &format!("{text}\n"))
}

fn execute(cmd: &Command) -> Result<()> {
    let common = cmd.common();
    let cfg = load_config(common)?;
    let out = &common.out;
    let outputs = match cmd {
        Command::GenData { .. } => gen_data(&cfg, out)?,
        Command::TrainCag { data, .. } => run_train_cag(&cfg, data, out)?,
        Command::Synth {
            model,
            data,
            deterministic,
            ..
        } => synth(&cfg, model, data, *deterministic, out)?,
        Command::TrainPredictor { data, extra, .. } => run_train_predictor(&cfg, data, extra, out)?,
        Command::Eval {
            model, data, horizons, ..
        } => eval(&cfg, model, data, horizons.clone(), out)?,
        Command::Flops { model, data, .. } => flops(&cfg, model.as_deref(), data.as_deref(), out)?,
    };
    write_run_info(out, cmd.name(), &cfg, outputs)
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<serde_json::Value> {
    let mut manifest = cfg.manifest()?;
    let shift = cfg.seed();
    for s in [&mut manifest.train, &mut manifest.val, &mut manifest.test] {
        s.seed_base = s
            .seed_base
            .checked_add(shift)
            .ok_or_else(|| Error::Config("seed overflows the split seed range".into()))?;
    }
    manifest.validate()?;
    let ds = build_dataset(&manifest)?;
    create_dir(out)?;
    io::save_motion_dir(&out.join("train"), &ds.train)?;
    io::save_motion_dir(&out.join("val"), &ds.val)?;
    io::save_motion_dir(&out.join("test"), &ds.test)?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_text(&out.join("manifest.json"), &format!("{text}\n"))?;
    Ok(json!({"train": ds.train.len(), "val": ds.val.len(), "test": ds.test.len()}))
}

fn load_nonempty(dir: &Path) -> Result<Vec<MotionSequence>> {
    let seqs = io::load_motion_dir(dir)?;
    if seqs.is_empty() {
        return Err(Error::Contract(format!("no .motion files in {}", dir.display())));
    }
    Ok(seqs)
}

fn run_train_cag(cfg: &RunConfig, data: &Path, out: &Path) -> Result<serde_json::Value> {
    let train = load_nonempty(data)?;
    let (model, report) = train_cag(&train, &cfg.cag())?;
    let recon = reconstruction_mpjpe(&model, &train)?;
    create_dir(out)?;
    io::save_vae(&out.join("cag.ckpt"), &model)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in report.loss_history.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.17e}\n"));
    }
    write_text(&out.join("cag_loss.csv"), &csv)?;
    Ok(json!({"checkpoint": "cag.ckpt", "sequences": train.len(), "reconstruction_mpjpe_mm": recon}))
}

fn synth(cfg: &RunConfig, model: &Path, data: &Path, deterministic: bool, out: &Path) -> Result<serde_json::Value> {
    let manifest = cfg.manifest()?;
    let vae = io::load_vae(model)?;
    let atomic = load_nonempty(data)?;
    let layout = PartLayout::from_parts(&manifest.skeleton.parts);
    let mask = BodyMask::upper(&layout);
    let of = |name: &str| -> Vec<&MotionSequence> { atomic.iter().filter(|s| s.label() == name).collect() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
    let latent = vae.config().latent_dim;
    let mut made = Vec::new();
    for up in manifest.actions_of(ActionPart::Upper) {
        for low in manifest.actions_of(ActionPart::Lower) {
            let (ups, lows) = (of(&up.name), of(&low.name));
            if ups.is_empty() || lows.is_empty() {
                continue;
            }
            for _ in 0..cfg.synth_per_pair() {
                let a = ups.choose(&mut rng).expect("non-empty");
                let b = lows.choose(&mut rng).expect("non-empty");
                let noise: Vec<f64> = if deterministic {
                    vec![0.0; latent]
                } else {
                    (0..latent).map(|_| StandardNormal.sample(&mut rng)).collect()
                };
                let s = synthesize_composite(&vae, a, b, &mask, &noise)?;
                made.push(s.with_label(format!("{}+{}", up.name, low.name))?);
            }
        }
    }
    if made.is_empty() {
        return Err(Error::Contract("no (upper, lower) action pair found in the data".into()));
    }
    io::save_motion_dir(out, &made)?;
    Ok(json!({"composites": made.len()}))
}

fn run_train_predictor(cfg: &RunConfig, data: &Path, extra: &[PathBuf], out: &Path) -> Result<serde_json::Value> {
    let manifest = cfg.manifest()?;
    let tc = cfg.train()?;
    let pc = cfg.predictor(manifest.skeleton.parts.clone())?;
    let mut train = load_nonempty(&data.join("train"))?;
    for dir in extra {
        train.extend(load_nonempty(dir)?);
    }
    let val_dir = data.join("val");
    let val = if val_dir.is_dir() { io::load_motion_dir(&val_dir)? } else { Vec::new() };
    let model = Predictor::new(pc, cfg.seed())?;
    let outcome = train_predictor(model, &train, &val, &tc)?;
    create_dir(out)?;
    io::save_predictor(&out.join("predictor.ckpt"), &outcome.model)?;
    io::save_predictor(&out.join("best.ckpt"), &outcome.best)?;
    write_text(&out.join("loss_history.csv"), &loss_history_csv(&outcome.history))?;
    Ok(json!({
        "checkpoint": "predictor.ckpt",
        "best_checkpoint": "best.ckpt",
        "best_epoch": outcome.best_epoch,
        "train_sequences": train.len(),
        "val_sequences": val.len(),
    }))
}

fn eval(cfg: &RunConfig, model: &Path, data: &Path, horizons: Option<Vec<usize>>, out: &Path) -> Result<serde_json::Value> {
    let model = io::load_predictor(model)?;
    let test = load_nonempty(data)?;
    let horizons = horizons.unwrap_or_else(|| cfg.horizons());
    let report = evaluate(&model, &test, &horizons)?;
    create_dir(out)?;
    write_text(&out.join("report.csv"), &report.to_csv())?;
    write_text(&out.join("summary.txt"), &report.summary())?;
    Ok(json!({"report": "report.csv", "summary": "summary.txt", "horizons": horizons, "sequences": test.len()}))
}

fn flops(cfg: &RunConfig, model: Option<&Path>, data: Option<&Path>, out: &Path) -> Result<serde_json::Value> {
    let model = match model {
        Some(p) => io::load_predictor(p)?,
        None => Predictor::new(cfg.predictor(cfg.manifest()?.skeleton.parts)?, cfg.seed())?,
    };
    let report = count_flops(model.config());
    let exits = match data {
        Some(d) => load_nonempty(d)?
            .iter()
            .map(|s| {
                let (n, t) = (model.config().input_frames, model.config().output_frames);
                if s.frames() < n + t {
                    return Err(Error::shape(format!("sequence {} has {} frames, need {}", s.label(), s.frames(), n + t)));
                }
                let hist = s.slice(0, n)?;
                model.predict(&hist, ExitChoice::Policy).map(|(_, e)| e)
            })
            .collect::<Result<Vec<_>>>()?,
        None => vec![[3, 3, 3]],
    };
    create_dir(out)?;
    write_text(&out.join("flops.csv"), &report.to_csv(&exits))?;
    Ok(json!({"flops": "flops.csv", "full_depth_macs": report.full_depth(), "routed_samples": exits.len()}))
}
