//! Fine-tuning, masked pretraining and batch inference.
//!
//! Gradients are computed per sample (optionally on several threads) and
//! summed in batch order, so results do not depend on the worker count.
//! Every random stream is derived from the root seed and the epoch, which
//! makes a resumed run continue exactly like an uninterrupted one.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lam_core::augment::{apply_augment, sample_window_augment, window_seed, AugmentPolicy};
use lam_core::metrics::{accuracy, average_precision};
use lam_core::model::{generate_tube_mask, VideoMae};
use lam_core::nn::{Grads, ParamGroup};
use lam_core::optim::AdamW;
use lam_core::schedule::lr_at_step;
use lam_core::seed;
use lam_core::windowing::{materialize_window, windows_for_tracks, FrameStore, SamplingSpec, WindowSample};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::checkpoint::{copy_params, Checkpoint, Header, HistoryRow};
use crate::config::RunConfig;
use crate::dataset::load_tracks;
use crate::error::{Error, IoContext, Result};
use crate::frames::DiskFrameStore;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const HISTORY_CSV: &str = "history.csv";
pub const LR_TRACE_CSV: &str = "lr_trace.csv";
pub const PRETRAIN_HISTORY_CSV: &str = "pretrain_history.csv";

const FINETUNE_GROUPS: [ParamGroup; 2] = [ParamGroup::Encoder, ParamGroup::Head];
const PRETRAIN_GROUPS: [ParamGroup; 2] = [ParamGroup::Encoder, ParamGroup::Decoder];

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::runtime(format!("thread pool: {e}")))
}

/// Materializes a window, optionally augments it, and normalizes it for `model`.
///
/// Blank slots stay black after augmentation so the fill remains
/// distinguishable from real frames.
pub fn model_input<S: FrameStore + ?Sized>(
    model: &VideoMae<f32>,
    store: &S,
    sampling: &SamplingSpec,
    window: &WindowSample,
    augment: Option<(&AugmentPolicy, u64)>,
) -> Result<Vec<f32>> {
    let mut tensor = materialize_window(window, store, sampling)?;
    if let Some((policy, run_seed)) = augment {
        let s = window_seed(run_seed, &window.clip_id, &window.face_id, window.center_frame_index);
        let state = sample_window_augment(s, policy, tensor.height, tensor.width);
        tensor = apply_augment(&state, &tensor, sampling.resolution)?;
        for (t, slot) in window.slots.iter().enumerate() {
            if slot.is_blank() {
                tensor.frame_slice_mut(t).fill(0.0);
            }
        }
    }
    Ok(model.normalize(&tensor)?)
}

/// `p(looking)` for every window, in input order.
pub fn predict_windows<S: FrameStore + Sync + ?Sized>(
    model: &VideoMae<f32>,
    store: &S,
    sampling: &SamplingSpec,
    windows: &[WindowSample],
    pool: &rayon::ThreadPool,
) -> Result<Vec<f64>> {
    pool.install(|| {
        windows
            .par_iter()
            .map(|w| {
                let x = model_input(model, store, sampling, w, None)?;
                Ok(model.classify(&x)?.p_looking())
            })
            .collect()
    })
}

/// Sums per-sample gradients in sample order and averages them.
fn reduce_grads(model: &VideoMae<f32>, parts: Vec<(f32, Grads<f32>)>) -> (f64, Grads<f32>) {
    let n = parts.len();
    let mut total = model.params.zero_grads();
    let mut loss = 0.0f64;
    for (l, g) in parts {
        loss += f64::from(l);
        total.add_assign(&g);
    }
    total.scale(1.0 / n as f32);
    (loss / n as f64, total)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

/// The epoch `best.ckpt` holds: highest val mAP, ties broken by val accuracy,
/// earliest epoch on a full tie.
pub fn best_row(history: &[HistoryRow]) -> Option<&HistoryRow> {
    let better = |r: &HistoryRow, b: &HistoryRow| match (r.val_map, b.val_map) {
        (Some(m), Some(bm)) => m > bm || (m == bm && r.val_acc > b.val_acc),
        (Some(_), None) => true,
        (None, Some(_)) => false,
        (None, None) => r.val_acc > b.val_acc,
    };
    history.iter().fold(None, |best, r| match best {
        Some(b) if !better(r, b) => Some(b),
        _ => Some(r),
    })
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,train_loss,val_mAP,val_acc,lr\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.epoch, r.train_loss, fmt_opt(r.val_map), fmt_opt(r.val_acc), r.lr).unwrap();
    }
    out
}

fn lr_trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("step,lr\n");
    for (s, lr) in trace.iter().enumerate() {
        writeln!(out, "{s},{lr}").unwrap();
    }
    out
}

fn read_lr_trace(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).at(path)?;
    text.lines()
        .skip(1)
        .map(|l| {
            l.split_once(',')
                .and_then(|(_, v)| v.parse().ok())
                .ok_or_else(|| Error::runtime(format!("{}: malformed line `{l}`", path.display())))
        })
        .collect()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).at(path)
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneOptions {
    /// Pretrained checkpoint whose encoder initializes the model.
    pub init: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs in this invocation.
    pub max_epochs: Option<usize>,
    pub quiet: bool,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub history: Vec<HistoryRow>,
    pub best_map: Option<f64>,
    pub out_dir: PathBuf,
}

fn build_model(cfg: &RunConfig, label: &str) -> Result<VideoMae<f32>> {
    Ok(VideoMae::new(cfg.model_config(), seed::derive(cfg.seed, label))?)
}

/// Loads a checkpoint's parameters into a model built from `cfg`.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<(VideoMae<f32>, Checkpoint)> {
    let ck = Checkpoint::load(path, cfg.optimizer_spec())?;
    let mut model = build_model(cfg, "init")?;
    let all = [ParamGroup::Encoder, ParamGroup::Head, ParamGroup::Decoder];
    copy_params(&mut model.params, &ck.params, &all)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    Ok((model, ck))
}

pub fn finetune(cfg: &RunConfig, opts: &FinetuneOptions) -> Result<FinetuneOutcome> {
    let out_dir = cfg.run.out_dir.clone();
    let store = DiskFrameStore::new(cfg.frames_dir());
    let train_sampling = cfg.sampling(cfg.windowing.train_stride);
    let val_sampling = cfg.sampling(cfg.windowing.val_stride);
    let train = windows_for_tracks(&load_tracks(&cfg.annotations_path("train"))?, &train_sampling);
    let val = windows_for_tracks(&load_tracks(&cfg.annotations_path("val"))?, &val_sampling);
    let val_labels: Vec<u8> = val.iter().map(|w| w.label).collect();
    let batch = cfg.schedule.batch_size;
    let steps_per_epoch = train.len() / batch;
    if steps_per_epoch == 0 {
        return Err(Error::invalid(format!(
            "{} training windows do not fill one batch of {batch}",
            train.len()
        )));
    }
    let sched = cfg.schedule_spec(steps_per_epoch);
    let policy = cfg.augment.enabled.then(|| cfg.augment_policy()).transpose()?;
    let pool = thread_pool(cfg.run.workers)?;

    let mut model = build_model(cfg, "init")?;
    let mut opt = AdamW::new(cfg.optimizer_spec(), &model.params);
    let mut start_epoch = 0;
    let mut global_step = 0u64;
    let mut history = Vec::new();
    let mut best_map: Option<f64> = None;
    let mut lr_trace = Vec::new();

    if let Some(path) = &opts.resume {
        let (m, ck) = load_model(cfg, path)?;
        if ck.header.kind != "finetune" {
            return Err(Error::invalid(format!("{}: not a fine-tuning checkpoint", path.display())));
        }
        model = m;
        opt = ck
            .optimizer
            .ok_or_else(|| Error::invalid(format!("{}: checkpoint has no optimizer state", path.display())))?;
        start_epoch = ck.header.epoch;
        global_step = ck.header.global_step;
        history = ck.header.history;
        best_map = ck.header.best_map;
        let trace_path = out_dir.join(LR_TRACE_CSV);
        if trace_path.exists() {
            lr_trace = read_lr_trace(&trace_path)?;
            lr_trace.truncate(global_step as usize);
        }
    } else if let Some(path) = &opts.init {
        let ck = Checkpoint::load(path, cfg.optimizer_spec())?;
        copy_params(&mut model.params, &ck.params, &[ParamGroup::Encoder])
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    }
    cfg.write_echo(&out_dir)?;

    let end_epoch = match opts.max_epochs {
        Some(n) => (start_epoch + n).min(cfg.schedule.epochs),
        None => cfg.schedule.epochs,
    };
    for epoch in start_epoch..end_epoch {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive_index(seed::derive(cfg.seed, "order"), epoch as u64)));
        let aug_seed = seed::derive_index(seed::derive(cfg.seed, "augment"), epoch as u64);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for step in 0..steps_per_epoch {
            let idx = &order[step * batch..(step + 1) * batch];
            let parts: Vec<(f32, Grads<f32>)> = pool.install(|| {
                idx.par_iter()
                    .map(|&i| {
                        let w = &train[i];
                        let x = model_input(&model, &store, &train_sampling, w, policy.as_ref().map(|p| (p, aug_seed)))?;
                        let mut g = model.params.zero_grads();
                        let (loss, _) = model.classification_grad(&x, w.label, &mut g)?;
                        Ok((loss, g))
                    })
                    .collect::<Result<_>>()
            })?;
            let (loss, grads) = reduce_grads(&model, parts);
            if !loss.is_finite() {
                return Err(Error::runtime(format!(
                    "non-finite training loss at epoch {epoch}, step {step} (global step {global_step})"
                )));
            }
            lr = lr_at_step(&sched, global_step as usize);
            opt.step(&mut model.params, &grads, lr, &FINETUNE_GROUPS)?;
            lr_trace.push(lr);
            global_step += 1;
            loss_sum += loss;
        }
        let scores = predict_windows(&model, &store, &val_sampling, &val, &pool)?;
        let val_map = average_precision(&scores, &val_labels)?;
        let val_acc = accuracy(&scores, &val_labels, cfg.run.threshold)?;
        let row = HistoryRow {
            epoch: epoch + 1,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_map,
            val_acc: Some(val_acc),
            lr,
        };
        if !opts.quiet {
            eprintln!(
                "epoch {:>3}  train_loss {:.5}  val_mAP {}  val_acc {:.4}  lr {:.3e}",
                row.epoch,
                row.train_loss,
                val_map.map_or_else(|| "NA".into(), |m| format!("{m:.4}")),
                val_acc,
                lr
            );
        }
        history.push(row);
        let improved = best_row(&history).is_some_and(|b| b.epoch == epoch + 1);
        let header = |best: Option<f64>| Header {
            kind: "finetune".into(),
            epoch: epoch + 1,
            global_step,
            seed: cfg.seed,
            best_map: best,
            history: history.clone(),
            config: cfg.to_toml(),
            optimizer_step: None,
        };
        if improved {
            best_map = val_map;
            Checkpoint {
                header: header(best_map),
                params: model.params.clone(),
                optimizer: None,
            }
            .save(&out_dir.join(BEST_CHECKPOINT))?;
        }
        Checkpoint {
            header: header(best_map),
            params: model.params.clone(),
            optimizer: Some(opt.clone()),
        }
        .save(&out_dir.join(LAST_CHECKPOINT))?;
        write_file(&out_dir.join(HISTORY_CSV), &history_csv(&history))?;
        write_file(&out_dir.join(LR_TRACE_CSV), &lr_trace_csv(&lr_trace))?;
    }
    Ok(FinetuneOutcome {
        history,
        best_map,
        out_dir,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainRow {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    /// Reconstruction loss on a fixed probe set with fixed masks.
    pub probe_loss: f64,
    pub lr: f64,
}

/// Masked-autoencoder pretraining on the training split's windows
/// (labels unused). Writes `pretrain.ckpt` and `pretrain_history.csv`.
pub fn pretrain(cfg: &RunConfig, quiet: bool) -> Result<Vec<PretrainRow>> {
    cfg.validate_pretrain()?;
    let out_dir = cfg.run.out_dir.clone();
    let store = DiskFrameStore::new(cfg.frames_dir());
    let sampling = cfg.sampling(cfg.windowing.train_stride);
    let windows = windows_for_tracks(&load_tracks(&cfg.annotations_path("train"))?, &sampling);
    let batch = cfg.pretrain.batch_size;
    let steps_per_epoch = windows.len() / batch;
    if steps_per_epoch == 0 {
        return Err(Error::invalid(format!(
            "{} pretraining windows do not fill one batch of {batch}",
            windows.len()
        )));
    }
    let sched = cfg.pretrain_schedule_spec(steps_per_epoch);
    let pool = thread_pool(cfg.run.workers)?;
    let mut model = build_model(cfg, "pretrain-init")?;
    let mut opt = AdamW::new(cfg.optimizer_spec(), &model.params);
    let ratio = cfg.model.mask_ratio;
    let grid = model.grid();
    cfg.write_echo(&out_dir)?;

    let probe: Vec<&WindowSample> = windows.iter().take(64).collect();
    let probe_seed = seed::derive(cfg.seed, "probe-mask");
    let probe_loss = |model: &VideoMae<f32>| -> Result<f64> {
        let losses: Vec<f64> = pool.install(|| {
            probe
                .par_iter()
                .map(|w| {
                    let x = model_input(model, &store, &sampling, w, None)?;
                    let s = window_seed(probe_seed, &w.clip_id, &w.face_id, w.center_frame_index);
                    let mask = generate_tube_mask(s, &grid, ratio)?;
                    Ok(f64::from(model.mae_loss(&x, &mask)?))
                })
                .collect::<Result<_>>()
        })?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    };

    let mut rows = vec![PretrainRow {
        epoch: 0,
        train_loss: None,
        probe_loss: probe_loss(&model)?,
        lr: 0.0,
    }];
    let mut global_step = 0u64;
    for epoch in 0..cfg.pretrain.epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive_index(seed::derive(cfg.seed, "pretrain-order"), epoch as u64)));
        let mask_seed = seed::derive_index(seed::derive(cfg.seed, "mask"), epoch as u64);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for step in 0..steps_per_epoch {
            let idx = &order[step * batch..(step + 1) * batch];
            let parts: Vec<(f32, Grads<f32>)> = pool.install(|| {
                idx.par_iter()
                    .map(|&i| {
                        let w = &windows[i];
                        let x = model_input(&model, &store, &sampling, w, None)?;
                        let s = window_seed(mask_seed, &w.clip_id, &w.face_id, w.center_frame_index);
                        let mask = generate_tube_mask(s, &grid, ratio)?;
                        let mut g = model.params.zero_grads();
                        let loss = model.mae_grad(&x, &mask, &mut g)?;
                        Ok((loss, g))
                    })
                    .collect::<Result<_>>()
            })?;
            let (loss, grads) = reduce_grads(&model, parts);
            if !loss.is_finite() {
                return Err(Error::runtime(format!(
                    "non-finite reconstruction loss at epoch {epoch}, step {step}"
                )));
            }
            lr = lr_at_step(&sched, global_step as usize);
            opt.step(&mut model.params, &grads, lr, &PRETRAIN_GROUPS)?;
            global_step += 1;
            loss_sum += loss;
        }
        let row = PretrainRow {
            epoch: epoch + 1,
            train_loss: Some(loss_sum / steps_per_epoch as f64),
            probe_loss: probe_loss(&model)?,
            lr,
        };
        if !quiet {
            eprintln!(
                "pretrain epoch {:>3}  train_loss {:.5}  probe_loss {:.5}  lr {:.3e}",
                row.epoch,
                row.train_loss.unwrap_or(f64::NAN),
                row.probe_loss,
                lr
            );
        }
        rows.push(row);
        Checkpoint {
            header: Header {
                kind: "pretrain".into(),
                epoch: epoch + 1,
                global_step,
                seed: cfg.seed,
                best_map: None,
                history: Vec::new(),
                config: cfg.to_toml(),
                optimizer_step: None,
            },
            params: model.params.clone(),
            optimizer: Some(opt.clone()),
        }
        .save(&out_dir.join(PRETRAIN_CHECKPOINT))?;
        let mut csv = String::from("epoch,train_loss,probe_loss,lr\n");
        for r in &rows {
            writeln!(csv, "{},{},{},{}", r.epoch, fmt_opt(r.train_loss), r.probe_loss, r.lr).unwrap();
        }
        write_file(&out_dir.join(PRETRAIN_HISTORY_CSV), &csv)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, val_map: Option<f64>, val_acc: f64) -> HistoryRow {
        HistoryRow {
            epoch,
            train_loss: 0.0,
            val_map,
            val_acc: Some(val_acc),
            lr: 0.0,
        }
    }

    #[test]
    fn best_row_breaks_map_ties_by_accuracy() {
        let h = [row(1, Some(0.9), 0.97), row(2, Some(1.0), 0.93), row(3, Some(1.0), 0.99), row(4, Some(1.0), 0.99)];
        assert_eq!(best_row(&h).unwrap().epoch, 3);
        assert_eq!(best_row(&h[..2]).unwrap().epoch, 2);
        assert!(best_row(&[]).is_none());
    }

    #[test]
    fn best_row_without_positives_uses_accuracy() {
        let h = [row(1, None, 0.5), row(2, None, 0.8), row(3, None, 0.7)];
        assert_eq!(best_row(&h).unwrap().epoch, 2);
        let h = [row(1, None, 0.9), row(2, Some(0.1), 0.2)];
        assert_eq!(best_row(&h).unwrap().epoch, 2);
    }
}
