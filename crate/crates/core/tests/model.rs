use lam_core::image::WindowTensor;
use lam_core::model::{
    cross_entropy, generate_tube_mask, masked_count, masked_mse, ModelConfig, TokenGrid, TubeMask, VideoMae,
};
use lam_core::nn::ParamGroup;
use lam_core::optim::{AdamW, OptimizerSpec};
use lam_core::seed;
use proptest::prelude::*;
use rand::Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        variant: "tiny".into(),
        image_size: 32,
        patch_size: 16,
        frames: 7,
        tubelet_size: 1,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        decoder_dim: 16,
        decoder_depth: 1,
        decoder_heads: 2,
        mask_ratio: 0.5,
        ..ModelConfig::toy()
    }
}

fn random_window(cfg: &ModelConfig, s: u64) -> WindowTensor {
    let mut rng = seed::rng(s);
    let mut w = WindowTensor::zeros(cfg.frames, cfg.image_size, cfg.image_size);
    for v in &mut w.data {
        *v = rng.gen();
    }
    w
}

proptest! {
    #[test]
    fn mask_count_and_tube_property(
        temporal in 1usize..9,
        h in 1usize..16,
        w in 1usize..16,
        ratio in 0.01f64..0.99,
        s in any::<u64>(),
    ) {
        let grid = TokenGrid { temporal, height: h, width: w };
        let mask = generate_tube_mask(s, &grid, ratio).unwrap();
        let spatial = h * w;
        prop_assert_eq!(mask.masked_cells(), ((ratio * spatial as f64) + 0.5).floor() as usize);
        prop_assert_eq!(mask.masked_cells(), masked_count(spatial, ratio));
        let full = mask.expand();
        prop_assert_eq!(full.len(), temporal * spatial);
        for t in 0..temporal {
            prop_assert_eq!(&full[t * spatial..(t + 1) * spatial], &full[..spatial]);
            prop_assert_eq!(mask.slice(t), &full[..spatial]);
        }
        prop_assert_eq!(generate_tube_mask(s, &grid, ratio).unwrap(), mask);
    }
}

#[test]
fn invalid_mask_ratio_rejected() {
    let grid = TokenGrid { temporal: 7, height: 2, width: 2 };
    assert!(generate_tube_mask(0, &grid, 0.0).is_err());
    assert!(generate_tube_mask(0, &grid, 1.0).is_err());
}

/// Patch extraction written directly from the `(T, H, W, 3)` layout.
fn gather_voxels(cfg: &ModelConfig, x: &[f64], token: usize) -> Vec<f64> {
    let g = cfg.image_size / cfg.patch_size;
    let (tt, rest) = (token / (g * g), token % (g * g));
    let (gy, gx) = (rest / g, rest % g);
    let side = cfg.image_size;
    let mut out = Vec::new();
    for dt in 0..cfg.tubelet_size {
        for py in 0..cfg.patch_size {
            for px in 0..cfg.patch_size {
                for c in 0..3 {
                    let t = tt * cfg.tubelet_size + dt;
                    let y = gy * cfg.patch_size + py;
                    let xx = gx * cfg.patch_size + px;
                    out.push(x[((t * side + y) * side + xx) * 3 + c]);
                }
            }
        }
    }
    out
}

#[test]
fn masked_loss_matches_gather_and_average() {
    let mut cfg = tiny_config();
    cfg.image_size = 48;
    let model = VideoMae::<f64>::new(cfg.clone(), 3).unwrap();
    let x = model.normalize(&random_window(&cfg, 5)).unwrap();
    let mask = generate_tube_mask(11, &model.grid(), 0.6).unwrap();
    let r = model.reconstruct(&x, &mask).unwrap();
    let v = cfg.voxel_len();
    let mut sum = 0.0;
    let mut count = 0;
    for (t, &m) in mask.expand().iter().enumerate() {
        let target = gather_voxels(&cfg, &x, t);
        assert_eq!(&r.target[t * v..(t + 1) * v], &target[..]);
        if m {
            for (p, q) in r.pred[t * v..(t + 1) * v].iter().zip(&target) {
                sum += (p - q) * (p - q);
                count += 1;
            }
        }
    }
    let oracle = sum / count as f64;
    let loss = model.mae_loss(&x, &mask).unwrap();
    assert!(((loss - oracle) / oracle).abs() < 1e-6, "{loss} vs {oracle}");
}

#[test]
fn unmasked_predictions_do_not_affect_loss() {
    let mask = [true, false, true, false];
    let target: Vec<f64> = (0..8).map(|i| i as f64).collect();
    let mut pred = target.clone();
    pred[0] += 1.0;
    let base = masked_mse(&pred, &target, &mask, 2).unwrap();
    pred[2] += 100.0;
    pred[7] -= 5.0;
    assert_eq!(masked_mse(&pred, &target, &mask, 2).unwrap(), base);
    assert_eq!(base, 0.25);
}

/// Central differences on 50 random scalars of the given groups.
fn gradient_check<L>(model: &mut VideoMae<f64>, groups: &[ParamGroup], analytic: &[Vec<f64>], loss: L, s: u64)
where
    L: Fn(&VideoMae<f64>) -> f64,
{
    let candidates: Vec<(usize, usize)> = model
        .params
        .params
        .iter()
        .enumerate()
        .filter(|(_, p)| groups.contains(&p.group))
        .flat_map(|(i, p)| (0..p.value.len()).map(move |j| (i, j)))
        .collect();
    let mut rng = seed::rng(s);
    let h = 1e-5;
    let mut checked = 0;
    for _ in 0..50 {
        let (i, j) = candidates[rng.gen_range(0..candidates.len())];
        let orig = model.params.params[i].value[j];
        model.params.params[i].value[j] = orig + h;
        let up = loss(model);
        model.params.params[i].value[j] = orig - h;
        let down = loss(model);
        model.params.params[i].value[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i][j];
        let scale = a.abs().max(numeric.abs());
        if scale < 1e-7 {
            continue;
        }
        let rel = (a - numeric).abs() / scale;
        assert!(rel < 1e-3, "{}[{j}]: analytic {a} numeric {numeric} rel {rel}", model.params.params[i].name);
        checked += 1;
    }
    assert!(checked >= 40, "only {checked} parameters had measurable gradients");
}

#[test]
fn classification_gradient_matches_finite_differences() {
    let cfg = tiny_config();
    let mut model = VideoMae::<f64>::new(cfg.clone(), 21).unwrap();
    let x = model.normalize(&random_window(&cfg, 22)).unwrap();
    let mut grads = model.params.zero_grads();
    model.classification_grad(&x, 1, &mut grads).unwrap();
    let groups = [ParamGroup::Encoder, ParamGroup::Head];
    gradient_check(&mut model, &groups, &grads.tensors, |m| m.classification_loss(&x, 1).unwrap(), 23);
}

#[test]
fn reconstruction_gradient_matches_finite_differences() {
    let cfg = tiny_config();
    let mut model = VideoMae::<f64>::new(cfg.clone(), 31).unwrap();
    let x = model.normalize(&random_window(&cfg, 32)).unwrap();
    let mask = generate_tube_mask(33, &model.grid(), 0.5).unwrap();
    let mut grads = model.params.zero_grads();
    model.mae_grad(&x, &mask, &mut grads).unwrap();
    let groups = [ParamGroup::Encoder, ParamGroup::Decoder];
    gradient_check(&mut model, &groups, &grads.tensors, |m| m.mae_loss(&x, &mask).unwrap(), 34);
}

#[test]
fn batch_loss_is_order_invariant() {
    let cfg = tiny_config();
    let model = VideoMae::<f64>::new(cfg.clone(), 41).unwrap();
    let batch: Vec<(Vec<f64>, u8)> = (0..6)
        .map(|i| (model.normalize(&random_window(&cfg, 100 + i)).unwrap(), (i % 2) as u8))
        .collect();
    let mean = |order: &[usize]| {
        order.iter().map(|&i| model.classification_loss(&batch[i].0, batch[i].1).unwrap()).sum::<f64>() / order.len() as f64
    };
    let a = mean(&[0, 1, 2, 3, 4, 5]);
    let b = mean(&[4, 2, 5, 0, 3, 1]);
    assert!((a - b).abs() < 1e-12);
    let (l, g) = cross_entropy(&[0.3f64, -1.2], 0);
    let (l2, g2) = cross_entropy(&[-1.2f64, 0.3], 1);
    assert_eq!(l, l2);
    assert_eq!((g[0], g[1]), (g2[1], g2[0]));
}

#[test]
fn softmax_of_logits_sums_to_one() {
    let cfg = tiny_config();
    let model = VideoMae::<f32>::new(cfg.clone(), 5).unwrap();
    for s in 0..5 {
        let x = model.normalize(&random_window(&cfg, s)).unwrap();
        let p = model.classify(&x).unwrap().softmax();
        assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
        assert!((0.0..=1.0).contains(&p[1]));
    }
}

fn train_fixed_batch(init_seed: u64) -> (f32, f32) {
    let cfg = ModelConfig::toy();
    let mut model = VideoMae::<f32>::new(cfg.clone(), init_seed).unwrap();
    let batch: Vec<(Vec<f32>, u8)> = (0..4)
        .map(|i| (model.normalize(&random_window(&cfg, init_seed * 10 + i)).unwrap(), (i % 2) as u8))
        .collect();
    let groups = [ParamGroup::Encoder, ParamGroup::Head];
    let mut opt = AdamW::new(OptimizerSpec::default(), &model.params);
    let batch_loss = |m: &VideoMae<f32>| {
        batch.iter().map(|(x, l)| m.classification_loss(x, *l).unwrap()).sum::<f32>() / 4.0
    };
    let first = batch_loss(&model);
    for _ in 0..50 {
        let mut grads = model.params.zero_grads();
        for (x, l) in &batch {
            model.classification_grad(x, *l, &mut grads).unwrap();
        }
        grads.scale(0.25);
        opt.step(&mut model.params, &grads, 1e-3, &groups).unwrap();
    }
    (first, batch_loss(&model))
}

#[test]
fn fixed_batch_loss_decreases_over_fifty_steps() {
    let mut drops: Vec<f32> = (1..=3)
        .map(|s| {
            let (first, last) = train_fixed_batch(s);
            first - last
        })
        .collect();
    drops.sort_by(f32::total_cmp);
    assert!(drops[1] > 0.0, "{drops:?}");
}

#[test]
fn mismatched_mask_rejected() {
    let cfg = tiny_config();
    let model = VideoMae::<f64>::new(cfg.clone(), 1).unwrap();
    let x = model.normalize(&random_window(&cfg, 1)).unwrap();
    let bad = TubeMask { cells: vec![true; 9], temporal: 7 };
    assert!(model.mae_loss(&x, &bad).is_err());
}
