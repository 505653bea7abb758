//! Training-loop behavior on a miniature dataset and model.

use std::fs;
use std::path::{Path, PathBuf};

use lam::checkpoint::Checkpoint;
use lam::config::{RunConfig, RESOLVED_CONFIG};
use lam::dataset::generate_dataset;
use lam::train::{finetune, pretrain, FinetuneOptions, HISTORY_CSV, LAST_CHECKPOINT, LR_TRACE_CSV, PRETRAIN_CHECKPOINT};
use lam_core::schedule::lr_at_step;

fn mini_config(root: &Path, out: &Path, extra: &[&str]) -> RunConfig {
    let mut overrides: Vec<String> = [
        "data.n_clips=33",
        "data.frames_per_clip=14",
        "data.image_size=32",
        "model.embed_dim=16",
        "model.depth=1",
        "model.heads=2",
        "model.decoder_dim=16",
        "model.decoder_depth=1",
        "model.decoder_heads=2",
        "model.mask_ratio=0.75",
        "schedule.batch_size=4",
        "schedule.warmup_epoch=1",
        "schedule.epochs=3",
        "pretrain.batch_size=4",
        "pretrain.warmup_epoch=1",
        "pretrain.epochs=3",
        "pretrain.learning_rate=2e-3",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    overrides.push(format!("data.root={}", root.display()));
    overrides.push(format!("run.out_dir={}", out.display()));
    overrides.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::load(None, &overrides).unwrap()
}

fn setup(dir: &Path) -> PathBuf {
    let root = dir.join("data");
    let cfg = mini_config(&root, &dir.join("unused"), &[]);
    generate_dataset(&cfg.synth_spec(), &root).unwrap();
    root
}

fn param_values(path: &Path, cfg: &RunConfig) -> Vec<Vec<f32>> {
    let ck = Checkpoint::load(path, cfg.optimizer_spec()).unwrap();
    ck.params.params.into_iter().map(|p| p.value).collect()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let root = setup(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg_a = mini_config(&root, &a, &[]);
    let cfg_b = mini_config(&root, &b, &[]);

    let full = finetune(&cfg_a, &FinetuneOptions { quiet: true, ..Default::default() }).unwrap();
    assert_eq!(full.history.len(), 3);

    let first = finetune(&cfg_b, &FinetuneOptions { max_epochs: Some(1), quiet: true, ..Default::default() }).unwrap();
    assert_eq!(first.history.len(), 1);
    let rest = finetune(
        &cfg_b,
        &FinetuneOptions {
            resume: Some(b.join(LAST_CHECKPOINT)),
            quiet: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(rest.history, full.history);
    for f in [HISTORY_CSV, LR_TRACE_CSV] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(param_values(&a.join(LAST_CHECKPOINT), &cfg_a), param_values(&b.join(LAST_CHECKPOINT), &cfg_b));
}

#[test]
fn lr_trace_follows_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let root = setup(dir.path());
    let out = dir.path().join("run");
    let cfg = mini_config(&root, &out, &["schedule.epochs=2"]);
    finetune(&cfg, &FinetuneOptions { quiet: true, ..Default::default() }).unwrap();

    let trace: Vec<(usize, f64)> = fs::read_to_string(out.join(LR_TRACE_CSV))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let (s, v) = l.split_once(',').unwrap();
            (s.parse().unwrap(), v.parse().unwrap())
        })
        .collect();
    // 23 train clips x 2 centers (frames 0 and 13), batch 4
    let steps_per_epoch = 46 / 4;
    assert_eq!(trace.len(), 2 * steps_per_epoch);
    let sched = cfg.schedule_spec(steps_per_epoch);
    for (i, &(step, lr)) in trace.iter().enumerate() {
        assert_eq!(step, i);
        assert_eq!(lr, lr_at_step(&sched, step));
    }
    assert_eq!(trace[0].1, cfg.schedule.start_learning_rate);
    assert_eq!(trace[steps_per_epoch].1, cfg.schedule.learning_rate);
}

#[test]
fn config_echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let root = setup(dir.path());
    let a = dir.path().join("a");
    let cfg = mini_config(&root, &a, &["schedule.epochs=1"]);
    finetune(&cfg, &FinetuneOptions { quiet: true, ..Default::default() }).unwrap();

    let echoed = RunConfig::load(Some(&a.join(RESOLVED_CONFIG)), &[]).unwrap();
    assert_eq!(echoed, cfg);
    let b = dir.path().join("b");
    let again = RunConfig::load(Some(&a.join(RESOLVED_CONFIG)), &[format!("run.out_dir={}", b.display())]).unwrap();
    finetune(&again, &FinetuneOptions { quiet: true, ..Default::default() }).unwrap();
    assert_eq!(fs::read(a.join(HISTORY_CSV)).unwrap(), fs::read(b.join(HISTORY_CSV)).unwrap());
}

#[test]
fn pretraining_reduces_probe_loss_and_initializes_finetuning() {
    let dir = tempfile::tempdir().unwrap();
    let root = setup(dir.path());
    let out = dir.path().join("pre");
    let cfg = mini_config(&root, &out, &[]);
    let rows = pretrain(&cfg, true).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows[3].probe_loss < rows[0].probe_loss, "{rows:?}");

    let ck = Checkpoint::load(&out.join(PRETRAIN_CHECKPOINT), cfg.optimizer_spec()).unwrap();
    assert_eq!(ck.header.kind, "pretrain");
    let ft = mini_config(&root, &dir.path().join("ft"), &["schedule.epochs=1"]);
    let outcome = finetune(
        &ft,
        &FinetuneOptions {
            init: Some(out.join(PRETRAIN_CHECKPOINT)),
            quiet: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(outcome.history.len(), 1);
}

#[test]
fn pretraining_rejects_fully_masked_grid() {
    let dir = tempfile::tempdir().unwrap();
    let root = setup(dir.path());
    // 24px frames with 12px patches: 2x2 cells, and 0.9 of 4 rounds to all 4
    let cfg = mini_config(&root, &dir.path().join("pre"), &["model.patch_size=12", "model.mask_ratio=0.9"]);
    assert!(pretrain(&cfg, true).is_err());
}

#[test]
fn shipped_configs_load_and_validate() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&configs).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = RunConfig::load(Some(&path), &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(toml_round_trip(&cfg.to_toml()), cfg, "{}", path.display());
            seen += 1;
        }
    }
    assert!(seen >= 3, "found {seen} configs");
}

fn toml_round_trip(text: &str) -> RunConfig {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    fs::write(&p, text).unwrap();
    RunConfig::load(Some(&p), &[]).unwrap()
}
