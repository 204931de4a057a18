//! Command-line front end. Exit codes: 0 success, 2 contract or
//! configuration error, 3 numerical abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dynquery::detector::{read_checkpoint, write_checkpoint, Detector};
use dynquery::harness::{
    ablate, ablation_csv, dump_coefficients, evaluate, load_scenes, perturbation_study, train, AblationAxis, Precision,
    RunConfig, Split,
};
use dynquery::scenes::{read_dataset, write_dataset};
use dynquery::tensor::Real;
use dynquery::Result;

#[derive(Parser)]
#[command(name = "dynquery", version, about = "Dynamic-query set-prediction detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run config (`key = value` lines); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's `seed` (for gen-data: the split seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write generated train.txt and val.txt datasets.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes checkpoint.bin, config.txt, history.csv, final_ap.csv, report.txt.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint; writes ap.txt and ap.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; defaults to the config's validation split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluation threads (overrides `eval.workers`).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Fixed-combination study of a static checkpoint; writes perturbation.csv.
    Perturb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        ratio: usize,
        #[arg(long, default_value_t = 6)]
        trials: usize,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one model per axis value; writes ablation_<axis>.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// beta, ratio, nonmodulated, direct_mlp, epochs or tint_off.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; defaults depend on the axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Dump per-scene combination coefficients; writes coefficients.csv and coefficients_pca.csv.
    DumpCoeffs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(dir.join(name), contents)?;
    eprintln!("wrote {}", dir.join(name).display());
    Ok(())
}

/// Scenes of `--data`, or the config's validation split.
fn eval_split<T: Real>(cfg: &RunConfig, data: Option<&Path>) -> Result<Split<T>> {
    let scenes = match data {
        Some(p) => read_dataset(p)?,
        None => load_scenes(cfg)?.1,
    };
    Ok(Split::render(scenes, cfg.scene_params().num_types(), &cfg.render_options()))
}

fn load_model<T: Real>(cfg: &RunConfig, checkpoint: &Path) -> Result<(Detector, dynquery::nn::ParamStore<T>)> {
    let (det, mut store) = Detector::new::<T>(cfg.model.clone(), cfg.seed)?;
    read_checkpoint(checkpoint, &mut store)?;
    Ok((det, store))
}

fn run<T: Real>(command: Command) -> Result<()> {
    match command {
        Command::GenData { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.data.train_seed = seed;
                cfg.data.val_seed = seed.wrapping_add(1);
            }
            cfg.data.train_path = None;
            cfg.data.val_path = None;
            let (train, val) = load_scenes(&cfg)?;
            std::fs::create_dir_all(&common.out)?;
            write_dataset(&common.out.join("train.txt"), &train)?;
            write_dataset(&common.out.join("val.txt"), &val)?;
            eprintln!("wrote {} train and {} val scenes to {}", train.len(), val.len(), common.out.display());
        }
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            let trained = train::<T>(&cfg, |r| match r.val_map {
                Some(m) => eprintln!("epoch {:>3}  lr {:.2e}  loss {:.6}  val mAP {:.4}", r.epoch, r.lr, r.train_loss, m),
                None => eprintln!("epoch {:>3}  lr {:.2e}  loss {:.6}", r.epoch, r.lr, r.train_loss),
            })?;
            std::fs::create_dir_all(&common.out)?;
            write_checkpoint(&common.out.join("checkpoint.bin"), &trained.store)?;
            let report = &trained.report;
            write(&common.out, "config.txt", &report.config)?;
            write(&common.out, "history.csv", report.history_csv())?;
            write(&common.out, "final_ap.csv", report.final_ap.to_csv())?;
            write(&common.out, "report.txt", report.to_kv())?;
            println!("{}", report.to_kv().trim_end());
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            workers,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(w) = workers {
                cfg.eval.workers = w;
            }
            cfg.validate()?;
            let (det, store) = load_model::<T>(&cfg, &checkpoint)?;
            let split = eval_split::<T>(&cfg, data.as_deref())?;
            let ap = evaluate(&det, &store, &split, &cfg.eval, cfg.schedule.batch_size)?;
            std::fs::create_dir_all(&common.out)?;
            write(&common.out, "ap.txt", ap.to_kv())?;
            write(&common.out, "ap.csv", ap.to_csv())?;
            println!("{}", ap.to_kv().trim_end());
        }
        Command::Perturb {
            common,
            checkpoint,
            ratio,
            trials,
            data,
        } => {
            let cfg = load_config(&common)?;
            let (det, store) = load_model::<T>(&cfg, &checkpoint)?;
            let split = eval_split::<T>(&cfg, data.as_deref())?;
            let study = perturbation_study(&cfg, &det, &store, &split, ratio, trials, cfg.seed)?;
            std::fs::create_dir_all(&common.out)?;
            write(&common.out, "perturbation.csv", study.to_csv())?;
            print!("{}", study.to_csv());
        }
        Command::Ablate { common, axis, values } => {
            let cfg = load_config(&common)?;
            let axis: AblationAxis = axis.parse()?;
            let values = if values.is_empty() { axis.default_values(&cfg) } else { values };
            let rows = ablate::<T>(&cfg, axis, &values, |r| {
                eprintln!("{} = {}: val mAP {:.4}", axis.name(), r.value, r.val_map)
            })?;
            std::fs::create_dir_all(&common.out)?;
            let csv = ablation_csv(axis, &rows);
            write(&common.out, &format!("ablation_{}.csv", axis.name()), &csv)?;
            print!("{csv}");
        }
        Command::DumpCoeffs {
            common,
            checkpoint,
            data,
        } => {
            let cfg = load_config(&common)?;
            let (det, store) = load_model::<T>(&cfg, &checkpoint)?;
            let split = eval_split::<T>(&cfg, data.as_deref())?;
            let dump = dump_coefficients(&det, &store, &split, cfg.schedule.batch_size)?;
            std::fs::create_dir_all(&common.out)?;
            write(&common.out, "coefficients.csv", dump.to_csv())?;
            write(&common.out, "coefficients_pca.csv", dump.pca_csv())?;
            let (inter, intra) = dump.separation()?;
            println!("inter_type_centroid_distance = {inter:.6}");
            println!("intra_type_distance = {intra:.6}");
        }
    }
    Ok(())
}

fn precision_of(command: &Command) -> Result<Precision> {
    let common = match command {
        Command::GenData { common }
        | Command::Train { common }
        | Command::Eval { common, .. }
        | Command::Perturb { common, .. }
        | Command::Ablate { common, .. }
        | Command::DumpCoeffs { common, .. } => common,
    };
    Ok(load_config(common)?.precision)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = precision_of(&cli.command).and_then(|p| match p {
        Precision::F32 => run::<f32>(cli.command),
        Precision::F64 => run::<f64>(cli.command),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
