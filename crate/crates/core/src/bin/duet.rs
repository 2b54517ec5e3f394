use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use duet::arena::{
    default_scripts, generate_dataset, oracle_probe, read_dataset, write_dataset, write_metadata,
};
use duet::autodiff::load_checkpoint;
use duet::harness::{
    ablate, evaluate, export_attention, gradcheck_cmd, train, AblationAxis, GradcheckConfig,
    RunConfig,
};
use duet::model::{PathVariant, SceneFusion};
use duet::{Error, Result};

#[derive(Parser)]
#[command(name = "duet", version, about = "Spatial and temporal actor-relation transformers on a synthetic group-activity benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fraction of the training split to use, in (0, 1].
    #[arg(long, global = true)]
    data_ratio: Option<f64>,
    /// SS, TT, ST, TS or DUAL.
    #[arg(long, global = true)]
    variant: Option<PathVariant>,
    /// none, early, middle or late.
    #[arg(long, global = true)]
    scene_fusion: Option<SceneFusion>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory with train.bin and test.bin.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/test dataset files and print the oracle probe.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes_per_class: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train a model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every cell of one ablation axis: variant, mac, scene or ratio.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: AblationAxis,
    },
    /// Finite-difference check of the full training loss on a small model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Dump attention weights of both paths for one test episode.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        episode: usize,
    },
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(r) = c.data_ratio {
        cfg.data_ratio = r;
    }
    if let Some(v) = c.variant {
        cfg.model.variant = v;
    }
    if let Some(f) = c.scene_fusion {
        cfg.model.scene_fusion = f;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(d) = &c.data {
        cfg.data_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate {
            common,
            episodes_per_class,
            noise,
        } => {
            let cfg = resolve(&common)?;
            let mut arena = cfg.arena.clone();
            if let Some(n) = episodes_per_class {
                arena.episodes_per_class = n;
            }
            if let Some(n) = noise {
                arena.noise = n;
            }
            if let Some(s) = common.seed {
                arena.seed = s;
            }
            let dir = common.out.unwrap_or(cfg.data_dir);
            mkdir(&dir)?;
            let scripts = default_scripts();
            let (train_ds, test_ds) = generate_dataset(&arena, &scripts)?;
            for (name, ds) in [("train", &train_ds), ("test", &test_ds)] {
                write_dataset(ds, &dir.join(format!("{name}.bin")))?;
                write_metadata(&ds.header, &scripts, arena.noise, &dir.join(format!("{name}.meta.json")))?;
            }
            println!("{}", json(&oracle_probe(&test_ds, &scripts)?));
        }
        Command::Train { common, epochs } => {
            let mut cfg = resolve(&common)?;
            if let Some(e) = epochs {
                cfg.epochs = e;
                cfg.schedule.decay_epochs.retain(|&d| d < e);
                cfg.validate()?;
            }
            let train_ds = read_dataset(&cfg.train_path())?;
            let test_ds = read_dataset(&cfg.test_path())?;
            let outcome = train(&cfg, &train_ds, Some(&test_ds), Some(&cfg.out_dir))?;
            if let Some(ev) = outcome.final_eval() {
                println!("{}", serde_json::to_string(&ev.record).expect("serializable"));
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = resolve(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir.join("model.ckpt"));
            let params = load_checkpoint(&ckpt)?;
            let test_ds = read_dataset(&cfg.test_path())?;
            let ev = evaluate(&params, &cfg, &test_ds, 0)?;
            let doc = serde_json::json!({ "metrics": ev.record, "confusion": ev.confusion });
            println!("{}", json(&doc));
        }
        Command::Ablate { common, axis } => {
            let cfg = resolve(&common)?;
            let train_ds = read_dataset(&cfg.train_path())?;
            let test_ds = read_dataset(&cfg.test_path())?;
            let table = ablate(&cfg, axis, &train_ds, &test_ds)?;
            mkdir(&cfg.out_dir)?;
            let stem = format!("ablation_{}", format!("{axis:?}").to_lowercase());
            write(&cfg.out_dir.join(format!("{stem}.txt")), &table.to_text())?;
            write(&cfg.out_dir.join(format!("{stem}.json")), &json(&table))?;
            write(&cfg.out_dir.join(format!("{stem}_per_class.csv")), &table.per_class_csv())?;
            print!("{}", table.to_text());
        }
        Command::Gradcheck { common } => {
            let mut gc = GradcheckConfig::default();
            if let Some(s) = common.seed {
                gc.seed = s;
            }
            let report = gradcheck_cmd(&gc, None)?;
            println!("{}", json(&report));
            if !report.passed() {
                return Err(Error::NonFinite(format!(
                    "gradient check failed, max relative error {:.3e}",
                    report.max_rel_err()
                )));
            }
        }
        Command::ExportAttention {
            common,
            checkpoint,
            episode,
        } => {
            let cfg = resolve(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir.join("model.ckpt"));
            let params = load_checkpoint(&ckpt)?;
            let test_ds = read_dataset(&cfg.test_path())?;
            let traces = export_attention(&params, &cfg, &test_ds, episode)?;
            mkdir(&cfg.out_dir)?;
            let path = cfg.out_dir.join(format!("attention_{episode}.json"));
            write(&path, &json(&traces))?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
