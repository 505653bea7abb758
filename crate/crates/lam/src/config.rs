//! TOML run configuration.
//!
//! Sections mirror the pipeline stages. The fine-tuning recipe keys use
//! the names of the published settings table (`start_learning_rate`,
//! `warmup_epoch`, `jitter_aspect_ratio`, ...). Every field has a default,
//! so a config file only needs the keys it changes; unknown keys are
//! rejected.

use std::fs;
use std::path::{Path, PathBuf};

use lam_core::augment::{decode_randaugment_spec, AugmentPolicy};
use lam_core::model::{masked_count, ModelConfig, IMAGENET_MEAN, IMAGENET_STD};
use lam_core::optim::OptimizerSpec;
use lam_core::schedule::ScheduleSpec;
use lam_core::synth::SynthSpec;
use lam_core::windowing::SamplingSpec;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, IoContext, Result};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every random stream is derived from it.
    pub seed: u64,
    pub data: DataConfig,
    pub windowing: WindowingConfig,
    pub augment: AugmentConfig,
    pub model: ModelSection,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub pretrain: PretrainConfig,
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory: `frames/`, `annotations_<split>.jsonl`, `splits/`.
    pub root: PathBuf,
    pub n_clips: usize,
    pub frames_per_clip: usize,
    pub image_size: usize,
    pub imbalance_ratio: f64,
    pub motion_jitter_px: f64,
    pub label_flip_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowingConfig {
    pub resolution: usize,
    pub half_window: usize,
    pub train_stride: usize,
    pub val_stride: usize,
    pub test_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub scale: [f64; 2],
    pub jitter_aspect_ratio: [f64; 2],
    pub color_jitter: f64,
    pub rand_augment: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: String,
    pub patch_size: usize,
    pub tubelet_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mask_ratio: f64,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub optimizer: String,
    pub momentum: [f64; 2],
    pub weight_decay: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub learning_rate_schedule: String,
    pub start_learning_rate: f64,
    pub learning_rate: f64,
    pub end_learning_rate: f64,
    /// Global batch size (samples per optimizer step).
    pub batch_size: usize,
    pub warmup_epoch: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub start_learning_rate: f64,
    pub learning_rate: f64,
    pub end_learning_rate: f64,
    pub batch_size: usize,
    pub warmup_epoch: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Directory for checkpoints, histories and predictions.
    pub out_dir: PathBuf,
    pub workers: usize,
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            windowing: WindowingConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelSection::default(),
            optim: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
            pretrain: PretrainConfig::default(),
            run: RunSection::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthSpec::default();
        Self {
            root: "data/toy".into(),
            n_clips: s.n_clips,
            frames_per_clip: s.frames_per_clip,
            image_size: s.image_size,
            imbalance_ratio: s.imbalance_ratio,
            motion_jitter_px: s.motion_jitter_px,
            label_flip_prob: s.label_flip_prob,
        }
    }
}

impl Default for WindowingConfig {
    fn default() -> Self {
        Self {
            resolution: 24,
            half_window: 3,
            train_stride: 13,
            val_stride: 4,
            test_stride: 1,
        }
    }
}

/// The toy policy: the full recipe's aspect and color ranges with a
/// narrower crop scale and two milder RandAugment ops, which the small
/// from-scratch model can fit in ten epochs. The B/L configs carry the full
/// recipe.
impl Default for AugmentConfig {
    fn default() -> Self {
        let p = AugmentPolicy::default();
        Self {
            enabled: true,
            scale: [0.5, 1.0],
            jitter_aspect_ratio: [p.ratio.0, p.ratio.1],
            color_jitter: p.color_jitter,
            rand_augment: "rand-m5-n2-mstd0.5-inc1".into(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::toy();
        Self {
            variant: m.variant,
            patch_size: m.patch_size,
            tubelet_size: m.tubelet_size,
            embed_dim: m.embed_dim,
            depth: m.depth,
            heads: m.heads,
            decoder_dim: m.decoder_dim,
            decoder_depth: m.decoder_depth,
            decoder_heads: m.decoder_heads,
            mask_ratio: m.mask_ratio,
            pixel_mean: IMAGENET_MEAN,
            pixel_std: IMAGENET_STD,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        let o = OptimizerSpec::default();
        Self {
            optimizer: "AdamW".into(),
            momentum: [o.beta1, o.beta2],
            weight_decay: o.weight_decay,
            epsilon: o.eps,
        }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            learning_rate_schedule: "cosine".into(),
            start_learning_rate: 1e-5,
            learning_rate: 5e-4,
            end_learning_rate: 1e-5,
            batch_size: 16,
            warmup_epoch: 3,
            epochs: 10,
        }
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            start_learning_rate: 1e-5,
            learning_rate: 5e-4,
            end_learning_rate: 1e-5,
            batch_size: 16,
            warmup_epoch: 1,
            epochs: 5,
        }
    }
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            out_dir: "runs/toy".into(),
            workers: 1,
            threshold: 0.5,
        }
    }
}

/// Parses a `--set` value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Applies one `section.key=value` override to a raw config table.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override `{assignment}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::invalid(format!("override `{assignment}` has an empty key")));
    }
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::invalid(format!("override `{key}`: `{part}` is not a section")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads an optional config file, applies overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).at(p)?;
                text.parse::<Table>()
                    .map_err(|e| Error::invalid(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::invalid(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the resolved config next to a run's outputs.
    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).at(dir)?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()).at(&path)?;
        Ok(path)
    }

    pub fn window_len(&self) -> usize {
        2 * self.windowing.half_window + 1
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            variant: m.variant.clone(),
            image_size: self.windowing.resolution,
            patch_size: m.patch_size,
            frames: self.window_len(),
            tubelet_size: m.tubelet_size,
            embed_dim: m.embed_dim,
            depth: m.depth,
            heads: m.heads,
            decoder_dim: m.decoder_dim,
            decoder_depth: m.decoder_depth,
            decoder_heads: m.decoder_heads,
            mask_ratio: m.mask_ratio,
            num_classes: 2,
            pixel_mean: m.pixel_mean,
            pixel_std: m.pixel_std,
        }
    }

    pub fn sampling(&self, stride: usize) -> SamplingSpec {
        SamplingSpec {
            stride,
            half_window: self.windowing.half_window,
            resolution: self.windowing.resolution,
        }
    }

    pub fn augment_policy(&self) -> Result<AugmentPolicy> {
        let a = &self.augment;
        Ok(AugmentPolicy {
            scale: (a.scale[0], a.scale[1]),
            ratio: (a.jitter_aspect_ratio[0], a.jitter_aspect_ratio[1]),
            color_jitter: a.color_jitter,
            rand_augment: decode_randaugment_spec(&a.rand_augment)?,
        })
    }

    pub fn optimizer_spec(&self) -> OptimizerSpec {
        OptimizerSpec {
            beta1: self.optim.momentum[0],
            beta2: self.optim.momentum[1],
            weight_decay: self.optim.weight_decay,
            eps: self.optim.epsilon,
        }
    }

    pub fn schedule_spec(&self, steps_per_epoch: usize) -> ScheduleSpec {
        let s = &self.schedule;
        ScheduleSpec {
            start_lr: s.start_learning_rate,
            peak_lr: s.learning_rate,
            end_lr: s.end_learning_rate,
            warmup_epochs: s.warmup_epoch,
            total_epochs: s.epochs,
            steps_per_epoch,
        }
    }

    pub fn pretrain_schedule_spec(&self, steps_per_epoch: usize) -> ScheduleSpec {
        let p = &self.pretrain;
        ScheduleSpec {
            start_lr: p.start_learning_rate,
            peak_lr: p.learning_rate,
            end_lr: p.end_learning_rate,
            warmup_epochs: p.warmup_epoch,
            total_epochs: p.epochs,
            steps_per_epoch,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let d = &self.data;
        SynthSpec {
            n_clips: d.n_clips,
            frames_per_clip: d.frames_per_clip,
            image_size: d.image_size,
            imbalance_ratio: d.imbalance_ratio,
            motion_jitter_px: d.motion_jitter_px,
            label_flip_prob: d.label_flip_prob,
            seed: lam_core::seed::derive(self.seed, "synth"),
        }
    }

    pub fn frames_dir(&self) -> PathBuf {
        self.data.root.join("frames")
    }

    pub fn annotations_path(&self, split: &str) -> PathBuf {
        self.data.root.join(format!("annotations_{split}.jsonl"))
    }

    /// Checks every section; called before any work starts.
    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::invalid(m));
        let w = &self.windowing;
        for (name, v) in [
            ("windowing.train_stride", w.train_stride),
            ("windowing.val_stride", w.val_stride),
            ("windowing.test_stride", w.test_stride),
            ("windowing.resolution", w.resolution),
            ("schedule.batch_size", self.schedule.batch_size),
            ("schedule.epochs", self.schedule.epochs),
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("run.workers", self.run.workers),
        ] {
            if v == 0 {
                return invalid(format!("{name} must be >= 1"));
            }
        }
        if self.optim.optimizer != "AdamW" {
            return invalid(format!("optim.optimizer `{}` unsupported (only AdamW)", self.optim.optimizer));
        }
        if self.schedule.learning_rate_schedule != "cosine" {
            return invalid(format!(
                "schedule.learning_rate_schedule `{}` unsupported (only cosine)",
                self.schedule.learning_rate_schedule
            ));
        }
        if !(0.0..=1.0).contains(&self.run.threshold) {
            return invalid("run.threshold must lie in [0, 1]".into());
        }
        self.optimizer_spec().validate()?;
        self.schedule_spec(1).validate()?;
        self.pretrain_schedule_spec(1).validate()?;
        self.augment_policy()?.validate()?;
        self.model_config().validate()?;
        self.synth_spec().validate()?;
        Ok(())
    }

    /// Extra check for masked pretraining: at least one token must stay visible.
    pub fn validate_pretrain(&self) -> Result<()> {
        let grid = self.model_config().grid();
        if masked_count(grid.spatial(), self.model.mask_ratio) >= grid.spatial() {
            return Err(Error::invalid(format!(
                "mask_ratio {} hides all {} spatial cells; use a finer patch grid or a lower ratio",
                self.model.mask_ratio,
                grid.spatial()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn echo_reproduces_config() {
        let cfg = RunConfig::load(None, &["schedule.epochs=4".into(), "data.root=\"x/y\"".into()]).unwrap();
        assert_eq!(cfg.schedule.epochs, 4);
        assert_eq!(cfg.data.root, PathBuf::from("x/y"));
        let dir = tempfile::tempdir().unwrap();
        let path = cfg.write_echo(dir.path()).unwrap();
        assert_eq!(RunConfig::load(Some(&path), &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides_accept_bare_strings_and_arrays() {
        let cfg = RunConfig::load(
            None,
            &[
                "augment.rand_augment=rand-m9-n2-mstd0.5-inc1".into(),
                "augment.scale=[0.5, 1.0]".into(),
                "run.out_dir=runs/a".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.augment.rand_augment, "rand-m9-n2-mstd0.5-inc1");
        assert_eq!(cfg.augment.scale, [0.5, 1.0]);
        assert_eq!(cfg.run.out_dir, PathBuf::from("runs/a"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::load(None, &["schedule.epoch=4".into()]).unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");
        assert_eq!(err.exit_code(), 1);
        assert!(RunConfig::load(None, &["nosuch.key=1".into()]).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        for o in [
            "schedule.warmup_epoch=20",
            "model.patch_size=5",
            "optim.optimizer=\"SGD\"",
            "augment.rand_augment=rand-mX-n4-mstd0.5",
            "model.mask_ratio=0.0",
            "schedule.batch_size=0",
        ] {
            assert!(RunConfig::load(None, &[o.into()]).is_err(), "{o}");
        }
    }

    #[test]
    fn fully_masked_grid_cannot_pretrain() {
        RunConfig::default().validate_pretrain().unwrap();
        // 2x2 cells at ratio 0.9: floor(3.6 + 0.5) = 4 of 4 masked
        let coarse = RunConfig::load(None, &["model.patch_size=12".into()]).unwrap();
        assert!(coarse.validate_pretrain().is_err());
        let finer = RunConfig::load(None, &["model.patch_size=12".into(), "model.mask_ratio=0.75".into()]).unwrap();
        finer.validate_pretrain().unwrap();
    }
}
