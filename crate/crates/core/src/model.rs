//! Video transformer with tubelet embedding, tube masking, an MAE
//! reconstruction decoder and a linear two-way classification head.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::image::{WindowTensor, CHANNELS};
use crate::nn::{normal_init, Block, BlockCache, Grads, LayerNorm, LayerNormCache, Linear, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::seed;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: String,
    pub image_size: usize,
    pub patch_size: usize,
    /// Frames per input window.
    pub frames: usize,
    pub tubelet_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mask_ratio: f64,
    pub num_classes: usize,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

impl ModelConfig {
    /// CPU-sized configuration used for the synthetic task.
    pub fn toy() -> Self {
        Self {
            variant: "toy".into(),
            image_size: 24,
            patch_size: 8,
            frames: 7,
            tubelet_size: 1,
            embed_dim: 64,
            depth: 3,
            heads: 4,
            decoder_dim: 32,
            decoder_depth: 2,
            decoder_heads: 4,
            mask_ratio: 0.9,
            num_classes: 2,
            pixel_mean: IMAGENET_MEAN,
            pixel_std: IMAGENET_STD,
        }
    }

    /// ViT-B sized encoder.
    pub fn base() -> Self {
        Self {
            variant: "B".into(),
            image_size: 224,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            decoder_dim: 384,
            decoder_depth: 4,
            decoder_heads: 6,
            ..Self::toy()
        }
    }

    /// ViT-L sized encoder.
    pub fn large() -> Self {
        Self {
            variant: "L".into(),
            image_size: 224,
            embed_dim: 1024,
            depth: 24,
            heads: 16,
            decoder_dim: 512,
            decoder_depth: 4,
            decoder_heads: 8,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(alloc::format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.tubelet_size == 0 || self.frames % self.tubelet_size != 0 {
            return bad(alloc::format!(
                "frames {} not divisible by tubelet_size {}",
                self.frames, self.tubelet_size
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(alloc::format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return bad(alloc::format!(
                "decoder_dim {} not divisible by decoder_heads {}",
                self.decoder_dim, self.decoder_heads
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::MaskRatio(self.mask_ratio));
        }
        if self.num_classes != 2 {
            return bad(alloc::format!("num_classes must be 2, got {}", self.num_classes));
        }
        if self.pixel_std.iter().any(|&s| !(s > 0.0)) {
            return bad("pixel_std must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> TokenGrid {
        let side = self.image_size / self.patch_size;
        TokenGrid {
            temporal: self.frames / self.tubelet_size,
            height: side,
            width: side,
        }
    }

    /// Values per tubelet voxel: `τ·P·P·3`.
    pub fn voxel_len(&self) -> usize {
        self.tubelet_size * self.patch_size * self.patch_size * CHANNELS
    }
}

/// Token geometry: temporal-major, then row-major over spatial cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub temporal: usize,
    pub height: usize,
    pub width: usize,
}

impl TokenGrid {
    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.temporal * self.spatial()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Spatial mask shared by every temporal token position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TubeMask {
    /// `true` = hidden from the encoder.
    pub cells: Vec<bool>,
    pub temporal: usize,
}

impl TubeMask {
    pub fn masked_cells(&self) -> usize {
        self.cells.iter().filter(|&&m| m).count()
    }

    /// Per-token mask over the full grid.
    pub fn expand(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.temporal * self.cells.len());
        for _ in 0..self.temporal {
            out.extend_from_slice(&self.cells);
        }
        out
    }

    /// The temporal slice `t` of the expanded mask.
    pub fn slice(&self, t: usize) -> &[bool] {
        assert!(t < self.temporal);
        &self.cells
    }
}

/// Number of masked cells for `spatial` cells at `ratio`: `floor(ratio·S + 0.5)`.
pub fn masked_count(spatial: usize, ratio: f64) -> usize {
    libm::floor(ratio * spatial as f64 + 0.5) as usize
}

/// Draws a uniformly random set of exactly `masked_count` spatial cells.
pub fn generate_tube_mask(rng_seed: u64, grid: &TokenGrid, ratio: f64) -> Result<TubeMask> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::MaskRatio(ratio));
    }
    let s = grid.spatial();
    let count = masked_count(s, ratio).min(s);
    let mut rng = seed::rng(rng_seed);
    let mut cells = vec![false; s];
    for i in index::sample(&mut rng, s, count).iter() {
        cells[i] = true;
    }
    Ok(TubeMask {
        cells,
        temporal: grid.temporal,
    })
}

/// Two class scores; index 1 is "looking at the camera-wearer".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Logits(pub [f64; 2]);

impl Logits {
    pub fn softmax(&self) -> [f64; 2] {
        let m = self.0[0].max(self.0[1]);
        let e0 = libm::exp(self.0[0] - m);
        let e1 = libm::exp(self.0[1] - m);
        let s = e0 + e1;
        [e0 / s, e1 / s]
    }

    pub fn p_looking(&self) -> f64 {
        self.softmax()[1]
    }
}

/// Softmax cross-entropy for one sample and its gradient w.r.t. the logits.
pub fn cross_entropy<F: Scalar>(logits: &[F], label: usize) -> (F, Vec<F>) {
    let m = logits.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<F> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum = exps.iter().fold(F::zero(), |a, &b| a + b);
    let loss = sum.ln() - (logits[label] - m);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| e / sum - if i == label { F::one() } else { F::zero() })
        .collect();
    (loss, grad)
}

/// Mean squared error over the voxels of masked tokens only.
///
/// `pred` and `target` are `(N, voxel_len)`; `mask` has one entry per token.
pub fn masked_mse<F: Scalar>(pred: &[F], target: &[F], mask: &[bool], voxel_len: usize) -> Result<F> {
    if pred.len() != target.len() || pred.len() != mask.len() * voxel_len {
        return Err(Error::Shape(alloc::format!(
            "pred {} / target {} values for {} tokens of {voxel_len}",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    let n_masked = mask.iter().filter(|&&m| m).count();
    if n_masked == 0 {
        return Err(Error::Shape("mask hides no tokens".into()));
    }
    let mut sum = F::zero();
    for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let p = &pred[t * voxel_len..(t + 1) * voxel_len];
        let q = &target[t * voxel_len..(t + 1) * voxel_len];
        for (&a, &b) in p.iter().zip(q) {
            sum += (a - b) * (a - b);
        }
    }
    Ok(sum / F::from_f64((n_masked * voxel_len) as f64))
}

/// Decoder output for every token next to the normalized pixel targets.
#[derive(Debug, Clone)]
pub struct Reconstruction<F> {
    pub pred: Vec<F>,
    pub target: Vec<F>,
    pub mask: Vec<bool>,
}

struct EncoderCache<F> {
    patches: Vec<F>,
    tokens: Vec<usize>,
    blocks: Vec<BlockCache<F>>,
    norm: LayerNormCache<F>,
}

#[derive(Debug, Clone)]
struct Layout {
    patch_embed: Linear,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
    dec_embed: Linear,
    mask_token: ParamId,
    dec_pos: ParamId,
    dec_blocks: Vec<Block>,
    dec_norm: LayerNorm,
    dec_head: Linear,
}

#[derive(Debug, Clone)]
pub struct VideoMae<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    layout: Layout,
}

impl<F: Scalar> VideoMae<F> {
    /// Builds a model with freshly initialized parameters.
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(init_seed);
        let mut ps = ParamStore::new();
        let n = config.grid().len();
        let d = config.embed_dim;
        let dd = config.decoder_dim;
        let v = config.voxel_len();
        use ParamGroup::*;

        let patch_embed = Linear::new(&mut ps, &mut rng, "patch_embed", v, d, Encoder);
        let pos_embed = ps.add("pos_embed".into(), vec![n, d], normal_init(&mut rng, n * d, 0.02), false, Encoder);
        let blocks = (0..config.depth)
            .map(|i| Block::new(&mut ps, &mut rng, &alloc::format!("blocks.{i}"), d, config.heads, Encoder))
            .collect();
        let norm = LayerNorm::new(&mut ps, "norm", d, Encoder);
        let head = Linear::new(&mut ps, &mut rng, "head", d, config.num_classes, Head);
        let dec_embed = Linear::new(&mut ps, &mut rng, "decoder_embed", d, dd, Decoder);
        let mask_token = ps.add("mask_token".into(), vec![dd], normal_init(&mut rng, dd, 0.02), false, Decoder);
        let dec_pos = ps.add("decoder_pos_embed".into(), vec![n, dd], normal_init(&mut rng, n * dd, 0.02), false, Decoder);
        let dec_blocks = (0..config.decoder_depth)
            .map(|i| {
                Block::new(&mut ps, &mut rng, &alloc::format!("decoder_blocks.{i}"), dd, config.decoder_heads, Decoder)
            })
            .collect();
        let dec_norm = LayerNorm::new(&mut ps, "decoder_norm", dd, Decoder);
        let dec_head = Linear::new(&mut ps, &mut rng, "decoder_head", dd, v, Decoder);

        Ok(Self {
            config,
            params: ps,
            layout: Layout {
                patch_embed,
                pos_embed,
                blocks,
                norm,
                head,
                dec_embed,
                mask_token,
                dec_pos,
                dec_blocks,
                dec_norm,
                dec_head,
            },
        })
    }

    pub fn grid(&self) -> TokenGrid {
        self.config.grid()
    }

    /// Scales a `[0, 1]` window to the model's normalized pixel space.
    pub fn normalize(&self, window: &WindowTensor) -> Result<Vec<F>> {
        let c = &self.config;
        if window.frames != c.frames || window.height != c.image_size || window.width != c.image_size {
            return Err(Error::Shape(alloc::format!(
                "window ({}, {}, {}) does not match model input ({}, {}, {})",
                window.frames, window.height, window.width, c.frames, c.image_size, c.image_size
            )));
        }
        Ok(window
            .data
            .chunks_exact(CHANNELS)
            .flat_map(|px| (0..CHANNELS).map(move |ch| (px[ch] as f64 - c.pixel_mean[ch]) / c.pixel_std[ch]))
            .map(F::from_f64)
            .collect())
    }

    fn check_input(&self, x: &[F]) -> Result<()> {
        let c = &self.config;
        let expect = c.frames * c.image_size * c.image_size * CHANNELS;
        if x.len() != expect {
            return Err(Error::Shape(alloc::format!("input has {} values, expected {expect}", x.len())));
        }
        Ok(())
    }

    /// Rearranges a normalized `(T, H, W, 3)` input into `(N, voxel_len)`
    /// rows, temporal-major then row-major; each voxel is ordered
    /// `(dt, py, px, channel)`.
    pub fn patchify(&self, x: &[F]) -> Vec<F> {
        let c = &self.config;
        let grid = c.grid();
        let (p, tau, side) = (c.patch_size, c.tubelet_size, c.image_size);
        let v = c.voxel_len();
        let mut out = vec![F::zero(); grid.len() * v];
        let frame_len = side * side * CHANNELS;
        for tt in 0..grid.temporal {
            for gy in 0..grid.height {
                for gx in 0..grid.width {
                    let tok = (tt * grid.height + gy) * grid.width + gx;
                    let mut o = tok * v;
                    for dt in 0..tau {
                        let f = tt * tau + dt;
                        for py in 0..p {
                            let row = gy * p + py;
                            let src = f * frame_len + (row * side + gx * p) * CHANNELS;
                            out[o..o + p * CHANNELS].copy_from_slice(&x[src..src + p * CHANNELS]);
                            o += p * CHANNELS;
                        }
                    }
                }
            }
        }
        out
    }

    /// Token embeddings (patch projection plus position encoding) for the
    /// tokens listed in `tokens`; `patches` holds exactly those rows.
    fn embed_rows(&self, patches: &[F], tokens: &[usize]) -> Vec<F> {
        let d = self.config.embed_dim;
        let mut h = self.layout.patch_embed.forward(&self.params, patches, tokens.len());
        let pos = self.params.get(self.layout.pos_embed);
        for (r, &t) in tokens.iter().enumerate() {
            for (a, &b) in h[r * d..(r + 1) * d].iter_mut().zip(&pos[t * d..(t + 1) * d]) {
                *a += b;
            }
        }
        h
    }

    /// Embeddings of every token of a normalized input.
    pub fn tubelet_embed(&self, x: &[F]) -> Result<Vec<F>> {
        self.check_input(x)?;
        let patches = self.patchify(x);
        let tokens: Vec<usize> = (0..self.grid().len()).collect();
        Ok(self.embed_rows(&patches, &tokens))
    }

    fn encode(&self, patches: Vec<F>, tokens: Vec<usize>) -> EncoderCache<F> {
        let n = tokens.len();
        let mut h = self.embed_rows(&patches, &tokens);
        let blocks = self
            .layout
            .blocks
            .iter()
            .map(|b| b.forward(&self.params, &mut h, n))
            .collect();
        let norm = self.layout.norm.forward(&self.params, &h, n);
        EncoderCache {
            patches,
            tokens,
            blocks,
            norm,
        }
    }

    /// Backward through norm, blocks and embedding given `d(norm output)`.
    fn encode_backward(&self, cache: &EncoderCache<F>, dout: &[F], grads: &mut Grads<F>) {
        let n = cache.tokens.len();
        let d = self.config.embed_dim;
        let mut dh = self.layout.norm.backward(&self.params, &cache.norm, dout, n, grads);
        for (b, c) in self.layout.blocks.iter().zip(&cache.blocks).rev() {
            b.backward(&self.params, c, &mut dh, n, grads);
        }
        {
            let dpos = grads.get_mut(self.layout.pos_embed);
            for (r, &t) in cache.tokens.iter().enumerate() {
                for (g, &v) in dpos[t * d..(t + 1) * d].iter_mut().zip(&dh[r * d..(r + 1) * d]) {
                    *g += v;
                }
            }
        }
        self.layout
            .patch_embed
            .backward(&self.params, &cache.patches, &dh, n, grads, false);
    }

    fn pooled(&self, enc: &[F], n: usize) -> Vec<F> {
        let d = self.config.embed_dim;
        let mut feat = vec![F::zero(); d];
        for row in enc.chunks_exact(d) {
            for (a, &b) in feat.iter_mut().zip(row) {
                *a += b;
            }
        }
        let inv = F::from_f64(1.0 / n as f64);
        for a in feat.iter_mut() {
            *a *= inv;
        }
        feat
    }

    /// Logits in the model's float type for a normalized input.
    pub fn forward_logits(&self, x: &[F]) -> Result<Vec<F>> {
        self.check_input(x)?;
        let n = self.grid().len();
        let cache = self.encode(self.patchify(x), (0..n).collect());
        let feat = self.pooled(&cache.norm.out, n);
        Ok(self.layout.head.forward(&self.params, &feat, 1))
    }

    /// Full token sequence → encoder → mean pool → linear head.
    pub fn classify(&self, x: &[F]) -> Result<Logits> {
        let z = self.forward_logits(x)?;
        Ok(Logits([z[0].to_f64(), z[1].to_f64()]))
    }

    /// Cross-entropy of one sample; adds its gradient into `grads`.
    pub fn classification_grad(&self, x: &[F], label: u8, grads: &mut Grads<F>) -> Result<(F, Logits)> {
        self.check_input(x)?;
        let n = self.grid().len();
        let d = self.config.embed_dim;
        let cache = self.encode(self.patchify(x), (0..n).collect());
        let feat = self.pooled(&cache.norm.out, n);
        let z = self.layout.head.forward(&self.params, &feat, 1);
        let (loss, dz) = cross_entropy(&z, usize::from(label));
        let dfeat = self
            .layout
            .head
            .backward(&self.params, &feat, &dz, 1, grads, true)
            .unwrap();
        let inv = F::from_f64(1.0 / n as f64);
        let mut dout = vec![F::zero(); n * d];
        for row in dout.chunks_exact_mut(d) {
            for (a, &b) in row.iter_mut().zip(&dfeat) {
                *a = b * inv;
            }
        }
        self.encode_backward(&cache, &dout, grads);
        Ok((loss, Logits([z[0].to_f64(), z[1].to_f64()])))
    }

    /// Cross-entropy without gradients.
    pub fn classification_loss(&self, x: &[F], label: u8) -> Result<F> {
        let z = self.forward_logits(x)?;
        Ok(cross_entropy(&z, usize::from(label)).0)
    }

    fn check_mask(&self, mask: &TubeMask) -> Result<()> {
        let g = self.grid();
        if mask.cells.len() != g.spatial() || mask.temporal != g.temporal {
            return Err(Error::Shape(alloc::format!(
                "mask ({} x {} cells) does not match token grid ({} x {})",
                mask.temporal,
                mask.cells.len(),
                g.temporal,
                g.spatial()
            )));
        }
        Ok(())
    }

    fn decode(&self, enc: &EncoderCache<F>, mask: &[bool]) -> DecoderCache<F> {
        let l = &self.layout;
        let n_all = mask.len();
        let nv = enc.tokens.len();
        let dd = self.config.decoder_dim;
        let emb = l.dec_embed.forward(&self.params, &enc.norm.out, nv);
        let mut full = vec![F::zero(); n_all * dd];
        let mt = self.params.get(l.mask_token);
        let pos = self.params.get(l.dec_pos);
        let mut vis = 0;
        for t in 0..n_all {
            let row = &mut full[t * dd..(t + 1) * dd];
            if mask[t] {
                row.copy_from_slice(mt);
            } else {
                row.copy_from_slice(&emb[vis * dd..(vis + 1) * dd]);
                vis += 1;
            }
            for (a, &b) in row.iter_mut().zip(&pos[t * dd..(t + 1) * dd]) {
                *a += b;
            }
        }
        let blocks = l
            .dec_blocks
            .iter()
            .map(|b| b.forward(&self.params, &mut full, n_all))
            .collect();
        let norm = l.dec_norm.forward(&self.params, &full, n_all);
        let pred = l.dec_head.forward(&self.params, &norm.out, n_all);
        DecoderCache { blocks, norm, pred }
    }

    fn visible_tokens(mask: &[bool]) -> Vec<usize> {
        mask.iter().enumerate().filter(|(_, &m)| !m).map(|(i, _)| i).collect()
    }

    fn gather_rows(&self, patches: &[F], tokens: &[usize]) -> Vec<F> {
        let v = self.config.voxel_len();
        let mut out = Vec::with_capacity(tokens.len() * v);
        for &t in tokens {
            out.extend_from_slice(&patches[t * v..(t + 1) * v]);
        }
        out
    }

    /// Encodes only the visible tokens and decodes a prediction for every
    /// token position.
    pub fn reconstruct(&self, x: &[F], mask: &TubeMask) -> Result<Reconstruction<F>> {
        self.check_input(x)?;
        self.check_mask(mask)?;
        let expanded = mask.expand();
        let patches = self.patchify(x);
        let vis = Self::visible_tokens(&expanded);
        let enc = self.encode(self.gather_rows(&patches, &vis), vis);
        let dec = self.decode(&enc, &expanded);
        Ok(Reconstruction {
            pred: dec.pred,
            target: patches,
            mask: expanded,
        })
    }

    pub fn mae_loss(&self, x: &[F], mask: &TubeMask) -> Result<F> {
        let r = self.reconstruct(x, mask)?;
        masked_mse(&r.pred, &r.target, &r.mask, self.config.voxel_len())
    }

    /// Masked reconstruction loss of one sample; adds its gradient into `grads`.
    pub fn mae_grad(&self, x: &[F], mask: &TubeMask, grads: &mut Grads<F>) -> Result<F> {
        self.check_input(x)?;
        self.check_mask(mask)?;
        let l = &self.layout;
        let v = self.config.voxel_len();
        let dd = self.config.decoder_dim;
        let expanded = mask.expand();
        let n_all = expanded.len();
        let patches = self.patchify(x);
        let vis = Self::visible_tokens(&expanded);
        let nv = vis.len();
        let enc = self.encode(self.gather_rows(&patches, &vis), vis);
        let dec = self.decode(&enc, &expanded);
        let loss = masked_mse(&dec.pred, &patches, &expanded, v)?;

        let n_masked = n_all - nv;
        let scale = F::from_f64(2.0 / (n_masked * v) as f64);
        let mut dpred = vec![F::zero(); n_all * v];
        for t in (0..n_all).filter(|&t| expanded[t]) {
            for i in t * v..(t + 1) * v {
                dpred[i] = scale * (dec.pred[i] - patches[i]);
            }
        }
        let dnorm = l
            .dec_head
            .backward(&self.params, &dec.norm.out, &dpred, n_all, grads, true)
            .unwrap();
        let mut dfull = l.dec_norm.backward(&self.params, &dec.norm, &dnorm, n_all, grads);
        for (b, c) in l.dec_blocks.iter().zip(&dec.blocks).rev() {
            b.backward(&self.params, c, &mut dfull, n_all, grads);
        }
        {
            let dpos = grads.get_mut(l.dec_pos);
            for (g, &d) in dpos.iter_mut().zip(&dfull) {
                *g += d;
            }
        }
        let mut demb = vec![F::zero(); nv * dd];
        {
            let mut vis_row = 0;
            let dmt = grads.get_mut(l.mask_token);
            for t in 0..n_all {
                let row = &dfull[t * dd..(t + 1) * dd];
                if expanded[t] {
                    for (g, &d) in dmt.iter_mut().zip(row) {
                        *g += d;
                    }
                } else {
                    demb[vis_row * dd..(vis_row + 1) * dd].copy_from_slice(row);
                    vis_row += 1;
                }
            }
        }
        let denc = l
            .dec_embed
            .backward(&self.params, &enc.norm.out, &demb, nv, grads, true)
            .unwrap();
        self.encode_backward(&enc, &denc, grads);
        Ok(loss)
    }
}

struct DecoderCache<F> {
    blocks: Vec<BlockCache<F>>,
    norm: LayerNormCache<F>,
    pred: Vec<F>,
}
