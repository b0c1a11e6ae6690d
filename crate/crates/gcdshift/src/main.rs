//! Command-line entry points: dataset generation, training, evaluation.
//! Exit codes: 0 success, 1 I/O, 2 configuration/usage, 3 training abort
//! on a non-finite loss.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use gcdshift::blob::write_file_atomic;
use gcdshift::config::{resolve_gen_config, resolve_run_config, sha256_hex};
use gcdshift::error::{Error, Result};
use gcdshift::synthdata;
use gcdshift::trainer::{write_history_line, Method, Trainer};

#[derive(Parser)]
#[command(name = "gcdshift", about = "Category discovery under domain shift, desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a two-domain glyph dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override a config key: `--set K=8 --set labelled_fraction=0.5`.
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Train a method and write checkpoint + history + config echo.
    Train {
        #[arg(long)]
        method: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset's unlabelled pool.
    Eval {
        #[arg(long)]
        method: String,
        #[arg(long)]
        data: PathBuf,
        /// Directory holding checkpoint.gcdt + checkpoint.json + echo.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output path for the report; `-` streams JSON to stdout.
        #[arg(long)]
        out: String,
    },
}

fn cmd_gen_data(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    set: &[String],
) -> Result<()> {
    let cfg = resolve_gen_config(config, seed, set)?;
    let dataset =
        synthdata::make_dataset(&cfg.gen_config(), &cfg.split_spec(), &cfg.dataset_name)?;
    synthdata::persist(&dataset, out)?;
    let labelled = dataset
        .manifest
        .records
        .iter()
        .filter(|r| r.is_labelled)
        .count();
    println!(
        "wrote {} records (K={}, {} labelled, shape {:?}) to {}",
        dataset.len(),
        dataset.manifest.k,
        labelled,
        dataset.manifest.image_shape,
        out.display()
    );
    Ok(())
}

fn cmd_train(
    method: &str,
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    set: &[String],
) -> Result<()> {
    let method = Method::parse(method)?;
    let cfg = resolve_run_config(method, config, seed, set)?;
    let dataset = synthdata::load(data)?;

    std::fs::create_dir_all(out)?;
    let echo = serde_json::json!({
        "data": data.to_string_lossy(),
        "config": cfg,
    });
    let echo_bytes = serde_json::to_vec_pretty(&echo)?;
    write_file_atomic(&out.join("config.echo.json"), |f| {
        f.write_all(&echo_bytes)?;
        Ok(())
    })?;

    let mut trainer = Trainer::new(
        method,
        cfg.train.clone(),
        cfg.vit.clone(),
        cfg.affinity.clone(),
        cfg.curriculum,
        &dataset,
        cfg.seed,
    )?;
    if let Some(state) = &trainer.curriculum {
        let dump = serde_json::to_vec_pretty(&state.dump_json())?;
        write_file_atomic(&out.join("curriculum.json"), |f| {
            f.write_all(&dump)?;
            Ok(())
        })?;
    }

    // history streams to a staging file renamed on success, so an abort
    // never leaves a partial artifact behind
    let staging = out.join(".history.jsonl.tmp");
    let result = {
        let mut hist = std::io::BufWriter::new(std::fs::File::create(&staging)?);
        let mut sink_err = None;
        let r = trainer.train(&dataset, |rec| {
            if sink_err.is_none() {
                if let Err(e) = write_history_line(&mut hist, rec) {
                    sink_err = Some(e);
                }
            }
        });
        hist.flush()?;
        if let Some(e) = sink_err {
            Err(e)
        } else {
            r.map(|_| ())
        }
    };
    match result {
        Ok(()) => {
            std::fs::rename(&staging, out.join("history.jsonl"))?;
        }
        Err(e) => {
            let _ = std::fs::remove_file(&staging);
            return Err(e);
        }
    }
    trainer.save_checkpoint(out)?;
    println!(
        "trained {} for {} epochs ({} steps); artifacts in {}",
        method.name(),
        cfg.train.epochs,
        trainer.iteration,
        out.display()
    );
    Ok(())
}

fn cmd_eval(method: &str, data: &Path, checkpoint: &Path, out: &str) -> Result<()> {
    let method = Method::parse(method)?;
    let dataset = synthdata::load(data)?;
    // the echoed config reproduces the exact model geometry
    let echo: serde_json::Value =
        serde_json::from_slice(&std::fs::read(checkpoint.join("config.echo.json"))?)?;
    let cfg: gcdshift::config::RunConfig = serde_json::from_value(echo["config"].clone())
        .map_err(|e| Error::Config(format!("bad config echo: {e}")))?;
    if cfg.method != method {
        return Err(Error::Config(format!(
            "checkpoint was trained as '{}', asked to evaluate as '{}'",
            cfg.method.name(),
            method.name()
        )));
    }
    let trainer = Trainer::load_checkpoint(
        checkpoint,
        method,
        cfg.train.clone(),
        cfg.vit.clone(),
        cfg.affinity.clone(),
        cfg.curriculum,
        &dataset,
    )?;
    let mut report = trainer.evaluate(&dataset)?;
    report.config_hash = sha256_hex(&serde_json::to_vec(&cfg)?);
    report.checkpoint_id = sha256_hex(&std::fs::read(checkpoint.join("checkpoint.gcdt"))?);

    let fmt = |x: Option<f64>| x.map_or("   -  ".to_string(), |v| format!("{v:.4}"));
    for (d, acc) in report.per_domain.iter().enumerate() {
        println!(
            "domain {d}: All {} | Old {} | New {}",
            fmt(acc.all),
            fmt(acc.old),
            fmt(acc.new)
        );
    }

    let json = serde_json::to_vec_pretty(&report)?;
    if out == "-" {
        std::io::stdout().write_all(&json)?;
        println!();
    } else {
        let path = PathBuf::from(out);
        write_file_atomic(&path, |f| {
            f.write_all(&json)?;
            Ok(())
        })?;
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData {
            config,
            out,
            seed,
            set,
        } => cmd_gen_data(config.as_deref(), out, *seed, set),
        Command::Train {
            method,
            data,
            out,
            config,
            seed,
            set,
        } => cmd_train(method, data, out, config.as_deref(), *seed, set),
        Command::Eval {
            method,
            data,
            checkpoint,
            out,
        } => cmd_eval(method, data, checkpoint, out),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
