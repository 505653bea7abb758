//! The `lam` command line.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lam_core::annotations::dataset_stats;
use lam_core::metrics::ApVariant;
use lam_core::synth::Split;
use lam_core::windowing::windows_for_tracks;

use crate::annotations::read_annotations;
use crate::config::RunConfig;
use crate::dataset::{generate_dataset, load_tracks, manifest_line, parse_split};
use crate::error::{Error, IoContext, Result};
use crate::evaluate::{balance_line, evaluate, read_predictions, write_predictions, PredictionRecord};
use crate::frames::DiskFrameStore;
use crate::train::{self, finetune, load_model, predict_windows, thread_pool, FinetuneOptions};

#[derive(Debug, Parser)]
#[command(name = "lam", version, about = "Looking-at-me classification of face sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration file (TOML).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set schedule.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for data and gradient stages.
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(w) = self.workers {
            overrides.push(format!("run.workers={w}"));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic gaze dataset into `data.root`.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Print class balance for one split or all of them.
    Stats {
        #[command(flatten)]
        common: Common,
        /// Split name, or `all`.
        #[arg(long, default_value = "all")]
        split: String,
        /// Read this annotation file instead of a dataset split.
        #[arg(long, value_name = "FILE")]
        annotations: Option<PathBuf>,
    },
    /// Write the window manifest for a split.
    Windows {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: String,
        /// Center stride; defaults to the split's configured stride.
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, value_name = "FILE")]
        annotations: Option<PathBuf>,
        /// Output file; stdout when absent.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Masked-autoencoder pretraining on the training split.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune the classifier; writes checkpoints and metric history to `run.out_dir`.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Initialize the encoder from a pretraining checkpoint.
        #[arg(long, value_name = "CKPT")]
        init: Option<PathBuf>,
        /// Continue from a `last.ckpt`.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
        /// Stop after this many epochs (resume later with --resume).
        #[arg(long, value_name = "N")]
        stop_after: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Score every window of a split with a checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<run.out_dir>/best.ckpt`.
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        stride: Option<usize>,
        /// Defaults to `<run.out_dir>/predictions_<split>.csv`.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Score a predictions file against a split's annotations.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<run.out_dir>/predictions_<split>.csv`.
        #[arg(long, value_name = "FILE")]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Average AP over both classes instead of the looking class only.
        #[arg(long = "macro")]
        macro_ap: bool,
        /// Defaults to `run.threshold`.
        #[arg(long)]
        threshold: Option<f64>,
        /// Metrics CSV; defaults to `<run.out_dir>/metrics_<split>.csv`.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

fn split_stride(cfg: &RunConfig, split: Split) -> usize {
    match split {
        Split::Train => cfg.windowing.train_stride,
        Split::Val => cfg.windowing.val_stride,
        Split::Test => cfg.windowing.test_stride,
    }
}

fn write_with_echo(cfg: &RunConfig, path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    cfg.write_echo(dir)?;
    fs::write(path, contents).at(path)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth { common } => {
            let cfg = common.load()?;
            let root = &cfg.data.root;
            let generated = generate_dataset(&cfg.synth_spec(), root)?;
            cfg.write_echo(root)?;
            for (split, records) in &generated.records {
                let tracks = lam_core::annotations::group_tracks(records.clone());
                println!("{:<5} {}", split.name(), balance_line(&dataset_stats(&tracks)?));
            }
            println!("wrote {} frames to {}", generated.n_frames, root.display());
        }
        Command::Stats {
            common,
            split,
            annotations,
        } => {
            let cfg = common.load()?;
            let targets: Vec<(String, PathBuf)> = match (&annotations, split.as_str()) {
                (Some(path), _) => vec![(path.display().to_string(), path.clone())],
                (None, "all") => Split::ALL
                    .iter()
                    .map(|s| (s.name().to_string(), cfg.annotations_path(s.name())))
                    .collect(),
                (None, name) => vec![(name.to_string(), cfg.annotations_path(parse_split(name)?.name()))],
            };
            for (name, path) in targets {
                let report = dataset_stats(&load_tracks(&path)?)?;
                println!("{name:<5} {}", balance_line(&report));
            }
        }
        Command::Windows {
            common,
            split,
            stride,
            annotations,
            out,
        } => {
            let cfg = common.load()?;
            let (path, default_stride) = match &annotations {
                Some(p) => (p.clone(), cfg.windowing.test_stride),
                None => {
                    let s = parse_split(&split)?;
                    (cfg.annotations_path(s.name()), split_stride(&cfg, s))
                }
            };
            let stride = stride.unwrap_or(default_stride);
            if stride == 0 {
                return Err(Error::invalid("--stride must be >= 1"));
            }
            let windows = windows_for_tracks(&load_tracks(&path)?, &cfg.sampling(stride));
            let mut text = String::new();
            for w in &windows {
                text.push_str(&manifest_line(w));
                text.push('\n');
            }
            match out {
                Some(p) => {
                    write_with_echo(&cfg, &p, &text)?;
                    eprintln!("wrote {} windows to {}", windows.len(), p.display());
                }
                None => print!("{text}"),
            }
        }
        Command::Pretrain { common } => {
            let cfg = common.load()?;
            let rows = train::pretrain(&cfg, false)?;
            let last = rows.last().expect("initial row");
            println!(
                "pretrain: probe loss {:.5} -> {:.5}; checkpoint {}",
                rows[0].probe_loss,
                last.probe_loss,
                cfg.run.out_dir.join(train::PRETRAIN_CHECKPOINT).display()
            );
        }
        Command::Finetune {
            common,
            init,
            resume,
            stop_after,
            quiet,
        } => {
            let cfg = common.load()?;
            let outcome = finetune(
                &cfg,
                &FinetuneOptions {
                    init,
                    resume,
                    max_epochs: stop_after,
                    quiet,
                },
            )?;
            let best = outcome.best_map.map_or_else(|| "NA".into(), |m| format!("{m:.4}"));
            println!(
                "finetune: {} epochs, best val mAP {best}; outputs in {}",
                outcome.history.len(),
                outcome.out_dir.display()
            );
        }
        Command::Predict {
            common,
            checkpoint,
            split,
            stride,
            out,
        } => {
            let cfg = common.load()?;
            let s = parse_split(&split)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.run.out_dir.join(train::BEST_CHECKPOINT));
            let (model, _) = load_model(&cfg, &ckpt)?;
            let sampling = cfg.sampling(stride.unwrap_or_else(|| split_stride(&cfg, s)));
            let windows = windows_for_tracks(&load_tracks(&cfg.annotations_path(s.name()))?, &sampling);
            let store = DiskFrameStore::new(cfg.frames_dir());
            let scores = predict_windows(&model, &store, &sampling, &windows, &thread_pool(cfg.run.workers)?)?;
            let preds: Vec<PredictionRecord> = windows
                .iter()
                .zip(scores)
                .map(|(w, score)| PredictionRecord {
                    clip_id: w.clip_id.clone(),
                    frame_index: w.center_frame_index,
                    face_id: w.face_id.clone(),
                    score,
                })
                .collect();
            let path = out.unwrap_or_else(|| cfg.run.out_dir.join(format!("predictions_{}.csv", s.name())));
            if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                cfg.write_echo(dir)?;
            }
            write_predictions(&path, &preds)?;
            println!("wrote {} predictions to {}", preds.len(), path.display());
        }
        Command::Evaluate {
            common,
            predictions,
            split,
            macro_ap,
            threshold,
            out,
        } => {
            let cfg = common.load()?;
            let s = parse_split(&split)?;
            let pred_path =
                predictions.unwrap_or_else(|| cfg.run.out_dir.join(format!("predictions_{}.csv", s.name())));
            let preds = read_predictions(&pred_path)?;
            let annotations = read_annotations(&cfg.annotations_path(s.name()))?;
            let threshold = threshold.unwrap_or(cfg.run.threshold);
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Error::invalid("--threshold must lie in [0, 1]"));
            }
            let variant = if macro_ap { ApVariant::Macro } else { ApVariant::Positive };
            let report = evaluate(s.name(), &preds, &annotations, threshold, variant)?;
            let csv_path = out.unwrap_or_else(|| cfg.run.out_dir.join(format!("metrics_{}.csv", s.name())));
            write_with_echo(&cfg, &csv_path, &report.to_csv())?;
            print!("{}", report.to_text());
            println!("{}", report.to_json());
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
