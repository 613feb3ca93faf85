use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hallux::datasets::{synth_generate, write_manifest, SynthConfig};
use hallux::experiment::{config_from_value, config_value, run_experiment, DatasetSource, Experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "hallux", version, about = "Modality hallucination experiments on inertial data")]
struct Cli {
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Flags {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Restrict to one protocol.
    #[arg(long, global = true, value_parser = ["original", "loso", "class-subset"])]
    protocol: Option<String>,
    #[arg(long, global = true, value_parser = ["late", "mid-concat", "mid-dense"])]
    fusion: Option<String>,
    #[arg(long, global = true, value_parser = ["individual", "integrated"])]
    hall_mode: Option<String>,
    #[arg(long, global = true, value_parser = ["triplet", "regression"])]
    loss: Option<String>,
    /// Triplet margin [default: 0.2, or the config's value].
    #[arg(long, global = true)]
    margin: Option<f32>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (manifest plus payload files) to --out.
    Synth,
    /// Load the dataset and check every configured modality is present.
    Ingest,
    /// Train every stream of every fold.
    TrainStreams,
    /// Train fusion models over the frozen streams.
    TrainFusion,
    /// Precompute the frozen target features.
    CacheFeatures,
    /// Train hallucination networks and assemble the bundles.
    TrainHallucination,
    /// Score every configuration on the test splits.
    Evaluate,
    /// Time per-clip inference of every mode.
    Benchmark {
        #[arg(long, default_value_t = 50)]
        reps: usize,
    },
    /// Write CSV tables and summary.md from evaluated protocols.
    Report,
    /// Every stage in order.
    RunAll,
}

fn load_config(flags: &Flags) -> Result<ExperimentConfig> {
    let text = match &flags.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => "{}".to_string(),
    };
    let mut value = if flags.config.is_some() { config_value(&text)? } else { serde_json::json!({}) };
    let obj = value.as_object_mut().expect("config_value returns an object");
    let mut set = |k: &str, v: serde_json::Value| {
        obj.insert(k.to_string(), v);
    };
    if let Some(s) = flags.seed {
        set("seed", s.into());
    }
    if let Some(o) = &flags.out {
        set("out", o.display().to_string().into());
    }
    if let Some(p) = &flags.protocol {
        set("protocols", serde_json::json!([p]));
    }
    if let Some(f) = &flags.fusion {
        set("fusion", f.as_str().into());
    }
    if let Some(m) = &flags.hall_mode {
        set("hall_mode", m.as_str().into());
    }
    if let Some(l) = &flags.loss {
        set("loss", l.as_str().into());
    }
    let mut cfg = config_from_value(value)?;
    if let Some(m) = flags.margin {
        cfg.hallucination_training.margin = m;
        cfg.validate()?;
    }
    if let Ok(t) = std::env::var("HALLUX_THREADS") {
        let n: usize = t.parse().with_context(|| format!("HALLUX_THREADS={t} is not a count"))?;
        cfg.threads = Some(n.max(1));
    }
    Ok(cfg)
}

fn synth(flags: &Flags) -> Result<()> {
    let Some(out) = &flags.out else { bail!("synth needs --out") };
    let mut sc = match &flags.config {
        Some(_) => match load_config(flags)?.dataset {
            DatasetSource::Synth(sc) => sc,
            DatasetSource::Manifest(_) => bail!("config dataset is a manifest, not synthetic parameters"),
        },
        None => SynthConfig::default(),
    };
    if let Some(s) = flags.seed {
        sc.seed = s;
    }
    let manifest = write_manifest(&synth_generate(&sc)?, out)?;
    println!("wrote {} samples to {}", manifest.samples.len(), out.join("manifest.json").display());
    Ok(())
}

fn for_each_fold(exp: &Experiment, f: impl Fn(&hallux::experiment::Fold) -> hallux::Result<()>) -> Result<()> {
    for &p in &exp.cfg.protocols {
        for fold in exp.training_folds(p)? {
            f(&fold)?;
            println!("{p}/{}: done", fold.name);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Synth = cli.command {
        return synth(&cli.flags);
    }
    let cfg = load_config(&cli.flags)?;
    if let Command::RunAll = cli.command {
        for r in run_experiment(cfg)? {
            print!("{}", r.markdown());
        }
        return Ok(());
    }
    let exp = Experiment::open(cfg)?;
    match cli.command {
        Command::Ingest => {
            let m = &exp.manifest;
            println!(
                "{} samples, {} classes, {} subjects; modalities {:?}",
                m.samples.len(),
                m.num_classes,
                m.subjects().len(),
                exp.cfg.stream_modalities()?.iter().map(|m| m.as_str()).collect::<Vec<_>>()
            );
        }
        Command::TrainStreams => for_each_fold(&exp, |f| exp.train_streams(f).map(drop))?,
        Command::TrainFusion => for_each_fold(&exp, |f| exp.train_fusion(f).map(drop))?,
        Command::CacheFeatures => for_each_fold(&exp, |f| exp.cache_features(f).map(drop))?,
        Command::TrainHallucination => for_each_fold(&exp, |f| exp.train_hallucination(f).map(drop))?,
        Command::Evaluate => {
            for &p in &exp.cfg.protocols {
                print!("{}", exp.evaluate(p)?.markdown());
            }
        }
        Command::Benchmark { reps } => {
            for row in exp.benchmark(reps)? {
                println!("{:<48} {:>8.3} ms/clip", row.mode, row.ms_per_clip);
            }
        }
        Command::Report => {
            for p in exp.report()? {
                println!("{}", p.display());
            }
        }
        Command::Synth | Command::RunAll => unreachable!(),
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
