//! Command-line interface.
//!
//! Subcommands: `synth`, `train`, `infer`, `eval`, `gradcheck`. Every
//! command takes `--config <json>` (defaults apply when omitted) and
//! `--seed`; flags override the file. Exit codes: 0 success, 1 usage or
//! configuration error, 2 data/runtime error.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Error;
use crate::model::Model;

use super::Config;

#[derive(Parser, Debug)]
#[command(
    name = "centermask",
    about = "Insulator instance segmentation and defect detection (CPU, deterministic)",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a deterministic synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of images.
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 96)]
        height: usize,
        #[arg(long, default_value_t = 96)]
        width: usize,
        /// Split file to list the generated ids in.
        #[arg(long, default_value = "train.txt")]
        split: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model on a dataset split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train.txt")]
        split: String,
        /// Checkpoint output path.
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
        /// Loss log path (CSV).
        #[arg(long, default_value = "loss.csv")]
        log: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Run inference: emits VOC XML, predictions.json and overlay PNGs.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val.txt")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Skip the mask branch (detections are unaffected).
        #[arg(long)]
        no_masks: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate predictions against a dataset split.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val.txt")]
        split: String,
        /// Also write the report (table + key-value lines) to a file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the finite-difference gradient suites.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Entry point used by the binary; returns the process exit code.
pub fn cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(args) {
        Ok(p) => p,
        Err(e) => {
            // clap prints help/version through this path too; those are
            // successes.
            let code = if e.exit_code() == 0 { 0 } else { 1 };
            let _ = e.print();
            return code;
        }
    };
    match run(parsed.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        _ => 2,
    }
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> crate::Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(command: Command) -> crate::Result<()> {
    match command {
        Command::Synth {
            out,
            n,
            seed,
            height,
            width,
            split,
            config,
        } => {
            let cfg = load_config(&config, seed)?;
            let records = crate::data::synth_generate(cfg.seed, n, (height, width))?;
            crate::data::save_dataset(&out, &records, &split)?;
            println!(
                "wrote {} images to {} (split {})",
                records.len(),
                out.display(),
                split
            );
            Ok(())
        }
        Command::Train {
            data,
            split,
            out,
            log,
            config,
            seed,
            iterations,
            learning_rate,
            batch_size,
        } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(v) = iterations {
                cfg.train.iterations = v;
            }
            if let Some(v) = learning_rate {
                cfg.train.learning_rate = v;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = v;
            }
            cfg.validate()?;
            let records = crate::data::load_dataset(&data, &split)?;
            let (_, report) = super::train(&cfg, &records, &out, &log)?;
            let [cls, reg, ctr, mask, total] = report.final_losses;
            println!(
                "trained {} iterations; final losses cls {cls:.4} reg {reg:.4} ctr {ctr:.4} mask {mask:.4} total {total:.4}",
                report.iterations
            );
            println!("checkpoint: {}", report.checkpoint_path.display());
            println!("loss log:   {}", report.log_path.display());
            Ok(())
        }
        Command::Infer {
            checkpoint,
            data,
            split,
            out,
            no_masks,
            config,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let model = Model::load(cfg.model, &checkpoint)?;
            let records = crate::data::load_dataset(&data, &split)?;
            let results = super::infer(&model, &records, !no_masks)?;
            super::write_outputs(&out, &results)?;
            super::write_overlays(&out, &results, &records)?;
            let n_dets: usize = results.iter().map(|r| r.detections.len()).sum();
            let n_masks: usize = results.iter().map(|r| r.masks.len()).sum();
            println!(
                "{} images, {} detections, {} masks -> {}",
                results.len(),
                n_dets,
                n_masks,
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            predictions,
            data,
            split,
            out,
            config,
            seed,
        } => {
            let _ = load_config(&config, seed)?;
            let records = crate::data::load_dataset(&data, &split)?;
            let gt: Vec<crate::eval::ImageGroundTruth> =
                records.iter().map(crate::eval::ImageGroundTruth::from).collect();
            let preds = crate::eval::load_predictions(&predictions)?;
            let table = crate::eval::metric_table(&preds, &gt)?;
            let report = format!("{}\n{}", table.to_text(), table.to_kv());
            print!("{report}");
            if let Some(path) = out {
                crate::io_util::write_atomic(&path, report.as_bytes())?;
            }
            Ok(())
        }
        Command::Gradcheck { seed, config } => {
            let cfg = load_config(&config, seed)?;
            let reports = crate::gradcheck::run_all(cfg.seed);
            let mut all_pass = true;
            for r in &reports {
                println!("{r}");
                all_pass &= r.passed();
            }
            if all_pass {
                println!("all {} gradient suites passed", reports.len());
                Ok(())
            } else {
                Err(Error::Data("gradient checks failed".into()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<String> {
        std::iter::once("centermask")
            .chain(list.iter().copied())
            .map(String::from)
            .collect()
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(cli(args(&["synth", "--bogus"])), 1);
        assert_eq!(cli(args(&["no-such-command"])), 1);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(cli(args(&["--help"])), 0);
    }

    #[test]
    fn synth_rerun_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d");
        let a = cli(args(&[
            "synth",
            "--seed",
            "7",
            "--n",
            "3",
            "--height",
            "64",
            "--width",
            "64",
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_eq!(a, 0);
        let list = |root: &std::path::Path| {
            let mut files = Vec::new();
            for entry in walk(root) {
                files.push((entry.clone(), std::fs::read(entry).unwrap()));
            }
            files.sort();
            files
        };
        let first = list(&out);
        assert_eq!(
            cli(args(&[
                "synth", "--seed", "7", "--n", "3", "--height", "64", "--width", "64", "--out",
                out.to_str().unwrap(),
            ])),
            0
        );
        let second = list(&out);
        assert_eq!(first, second);
        assert!(first.iter().any(|(p, _)| p.ends_with("train.txt")));
    }

    fn walk(root: &std::path::Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    out.push(path);
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn missing_data_dir_is_data_error() {
        assert_eq!(
            cli(args(&[
                "train",
                "--data",
                "/nonexistent-path",
                "--out",
                "/tmp/x.ckpt",
                "--log",
                "/tmp/x.csv"
            ])),
            2
        );
    }
}
