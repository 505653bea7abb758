//! Transformer building blocks with hand-written backward passes.
//!
//! Parameters live in a flat [`ParamStore`]; layers only hold indices into
//! it. Every forward pass returns a cache that its backward pass consumes,
//! and backward passes accumulate into a [`Grads`] buffer laid out like the
//! store.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::linalg::{matmul, matmul_at_acc, matmul_bt};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Head,
    Decoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    /// Whether weight decay applies. Biases, norm parameters and
    /// position encodings are exempt.
    pub decay: bool,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<F> {
    pub params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: String,
        shape: Vec<usize>,
        value: Vec<F>,
        decay: bool,
        group: ParamGroup,
    ) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.params.push(Param {
            name,
            shape,
            value,
            decay,
            group,
        });
        ParamId(self.params.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[F] {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<F> {
        Grads {
            tensors: self.params.iter().map(|p| vec![F::zero(); p.value.len()]).collect(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<F> {
    pub tensors: Vec<Vec<F>>,
}

impl<F: Scalar> Grads<F> {
    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.tensors[id.0]
    }

    pub fn zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(F::zero());
        }
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Grads<F>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for t in &mut self.tensors {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }
}

fn xavier_uniform<F: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Vec<F> {
    let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    (0..fan_in * fan_out)
        .map(|_| F::from_f64(rng.gen_range(-a..a)))
        .collect()
}

pub(crate) fn normal_init<F: Scalar, R: Rng>(rng: &mut R, len: usize, std: f64) -> Vec<F> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..len).map(|_| F::from_f64(dist.sample(rng))).collect()
}

/// Affine map `y = x·W + b` with `W` stored as `(d_in, d_out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        group: ParamGroup,
    ) -> Self {
        let w = store.add(
            alloc::format!("{name}.weight"),
            vec![d_in, d_out],
            xavier_uniform(rng, d_in, d_out),
            true,
            group,
        );
        let b = store.add(
            alloc::format!("{name}.bias"),
            vec![d_out],
            vec![F::zero(); d_out],
            false,
            group,
        );
        Self { w, b, d_in, d_out }
    }

    pub fn forward<F: Scalar>(&self, ps: &ParamStore<F>, x: &[F], n: usize) -> Vec<F> {
        let mut y = vec![F::zero(); n * self.d_out];
        matmul(x, ps.get(self.w), &mut y, n, self.d_in, self.d_out);
        let b = ps.get(self.b);
        for row in y.chunks_exact_mut(self.d_out) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        y
    }

    /// Accumulates parameter gradients; returns `dx` when `need_dx`.
    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &[F],
        dy: &[F],
        n: usize,
        grads: &mut Grads<F>,
        need_dx: bool,
    ) -> Option<Vec<F>> {
        matmul_at_acc(x, dy, grads.get_mut(self.w), n, self.d_in, self.d_out);
        let db = grads.get_mut(self.b);
        for row in dy.chunks_exact(self.d_out) {
            for (g, &v) in db.iter_mut().zip(row) {
                *g += v;
            }
        }
        need_dx.then(|| {
            let mut dx = vec![F::zero(); n * self.d_in];
            matmul_bt(dy, ps.get(self.w), &mut dx, n, self.d_out, self.d_in);
            dx
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

pub struct LayerNormCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
    pub out: Vec<F>,
}

const LN_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize, group: ParamGroup) -> Self {
        let gamma = store.add(
            alloc::format!("{name}.weight"),
            vec![dim],
            vec![F::one(); dim],
            false,
            group,
        );
        let beta = store.add(
            alloc::format!("{name}.bias"),
            vec![dim],
            vec![F::zero(); dim],
            false,
            group,
        );
        Self { gamma, beta, dim }
    }

    pub fn forward<F: Scalar>(&self, ps: &ParamStore<F>, x: &[F], n: usize) -> LayerNormCache<F> {
        let d = self.dim;
        let inv_d = F::from_f64(1.0 / d as f64);
        let eps = F::from_f64(LN_EPS);
        let gamma = ps.get(self.gamma);
        let beta = ps.get(self.beta);
        let mut xhat = vec![F::zero(); n * d];
        let mut out = vec![F::zero(); n * d];
        let mut rstd = vec![F::zero(); n];
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().fold(F::zero(), |a, &v| a + v) * inv_d;
            let var = row.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gamma[c] + beta[c];
            }
        }
        LayerNormCache { xhat, rstd, out }
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        cache: &LayerNormCache<F>,
        dy: &[F],
        n: usize,
        grads: &mut Grads<F>,
    ) -> Vec<F> {
        let d = self.dim;
        let inv_d = F::from_f64(1.0 / d as f64);
        let gamma = ps.get(self.gamma);
        {
            let dg = grads.get_mut(self.gamma);
            for r in 0..n {
                for c in 0..d {
                    dg[c] += dy[r * d + c] * cache.xhat[r * d + c];
                }
            }
        }
        {
            let db = grads.get_mut(self.beta);
            for r in 0..n {
                for c in 0..d {
                    db[c] += dy[r * d + c];
                }
            }
        }
        let mut dx = vec![F::zero(); n * d];
        let mut dxhat = vec![F::zero(); d];
        for r in 0..n {
            let mut sum = F::zero();
            let mut sum_xh = F::zero();
            for c in 0..d {
                let g = dy[r * d + c] * gamma[c];
                dxhat[c] = g;
                sum += g;
                sum_xh += g * cache.xhat[r * d + c];
            }
            let mean = sum * inv_d;
            let mean_xh = sum_xh * inv_d;
            let rs = cache.rstd[r];
            for c in 0..d {
                dx[r * d + c] = rs * (dxhat[c] - mean - cache.xhat[r * d + c] * mean_xh);
            }
        }
        dx
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
fn tanh<F: Scalar>(x: F) -> F {
    // libm's tanh is several times slower than exp
    let two = F::from_f64(2.0);
    if x.abs() > F::from_f64(20.0) {
        return x.signum();
    }
    F::one() - two / ((two * x).exp() + F::one())
}

#[inline]
fn gelu<F: Scalar>(x: F) -> F {
    let k = F::from_f64(GELU_K);
    let c = F::from_f64(GELU_C);
    let half = F::from_f64(0.5);
    half * x * (F::one() + tanh(k * (x + c * x * x * x)))
}

#[inline]
fn gelu_grad<F: Scalar>(x: F) -> F {
    let k = F::from_f64(GELU_K);
    let c = F::from_f64(GELU_C);
    let half = F::from_f64(0.5);
    let t = tanh(k * (x + c * x * x * x));
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + F::from_f64(3.0) * c * x * x)
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache<F> {
    pre: Vec<F>,
    act: Vec<F>,
}

impl Mlp {
    pub fn forward<F: Scalar>(&self, ps: &ParamStore<F>, x: &[F], n: usize) -> (Vec<F>, MlpCache<F>) {
        let pre = self.fc1.forward(ps, x, n);
        let act: Vec<F> = pre.iter().map(|&v| gelu(v)).collect();
        let out = self.fc2.forward(ps, &act, n);
        (out, MlpCache { pre, act })
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &[F],
        cache: &MlpCache<F>,
        dy: &[F],
        n: usize,
        grads: &mut Grads<F>,
    ) -> Vec<F> {
        let mut dact = self.fc2.backward(ps, &cache.act, dy, n, grads, true).unwrap();
        for (g, &p) in dact.iter_mut().zip(&cache.pre) {
            *g *= gelu_grad(p);
        }
        self.fc1.backward(ps, x, &dact, n, grads, true).unwrap()
    }
}

/// Multi-head self-attention over all tokens of a sequence.
#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionCache<F> {
    qkv: Vec<F>,
    probs: Vec<F>,
    merged: Vec<F>,
}

fn take_head<F: Scalar>(qkv: &[F], n: usize, dim: usize, offset: usize, dh: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * dh];
    for r in 0..n {
        out[r * dh..(r + 1) * dh].copy_from_slice(&qkv[r * 3 * dim + offset..r * 3 * dim + offset + dh]);
    }
    out
}

impl Attention {
    pub fn forward<F: Scalar>(&self, ps: &ParamStore<F>, x: &[F], n: usize) -> (Vec<F>, AttentionCache<F>) {
        let d = self.dim;
        let dh = d / self.heads;
        let scale = F::from_f64(1.0 / libm::sqrt(dh as f64));
        let qkv = self.qkv.forward(ps, x, n);
        let mut probs = vec![F::zero(); self.heads * n * n];
        let mut merged = vec![F::zero(); n * d];
        let mut head_out = vec![F::zero(); n * dh];
        for h in 0..self.heads {
            let q = take_head(&qkv, n, d, h * dh, dh);
            let k = take_head(&qkv, n, d, d + h * dh, dh);
            let v = take_head(&qkv, n, d, 2 * d + h * dh, dh);
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            matmul_bt(&q, &k, p, n, dh, n);
            for row in p.chunks_exact_mut(n) {
                let mut max = F::neg_infinity();
                for s in row.iter_mut() {
                    *s *= scale;
                    if *s > max {
                        max = *s;
                    }
                }
                let mut sum = F::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let inv = F::one() / sum;
                for s in row.iter_mut() {
                    *s *= inv;
                }
            }
            matmul(p, &v, &mut head_out, n, n, dh);
            for r in 0..n {
                merged[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&head_out[r * dh..(r + 1) * dh]);
            }
        }
        let out = self.proj.forward(ps, &merged, n);
        (out, AttentionCache { qkv, probs, merged })
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &[F],
        cache: &AttentionCache<F>,
        dy: &[F],
        n: usize,
        grads: &mut Grads<F>,
    ) -> Vec<F> {
        let d = self.dim;
        let dh = d / self.heads;
        let scale = F::from_f64(1.0 / libm::sqrt(dh as f64));
        let dmerged = self.proj.backward(ps, &cache.merged, dy, n, grads, true).unwrap();
        let mut dqkv = vec![F::zero(); n * 3 * d];
        let mut dp = vec![F::zero(); n * n];
        let mut dq = vec![F::zero(); n * dh];
        for h in 0..self.heads {
            let q = take_head(&cache.qkv, n, d, h * dh, dh);
            let k = take_head(&cache.qkv, n, d, d + h * dh, dh);
            let v = take_head(&cache.qkv, n, d, 2 * d + h * dh, dh);
            let mut dout = vec![F::zero(); n * dh];
            for r in 0..n {
                dout[r * dh..(r + 1) * dh].copy_from_slice(&dmerged[r * d + h * dh..r * d + (h + 1) * dh]);
            }
            let p = &cache.probs[h * n * n..(h + 1) * n * n];
            matmul_bt(&dout, &v, &mut dp, n, dh, n);
            let mut dv = vec![F::zero(); n * dh];
            matmul_at_acc(p, &dout, &mut dv, n, n, dh);
            // softmax backward, folded with the score scale
            for r in 0..n {
                let prow = &p[r * n..(r + 1) * n];
                let drow = &mut dp[r * n..(r + 1) * n];
                let inner = prow.iter().zip(drow.iter()).fold(F::zero(), |a, (&pp, &dd)| a + pp * dd);
                for (dd, &pp) in drow.iter_mut().zip(prow) {
                    *dd = pp * (*dd - inner) * scale;
                }
            }
            matmul(&dp, &k, &mut dq, n, n, dh);
            let mut dk = vec![F::zero(); n * dh];
            matmul_at_acc(&dp, &q, &mut dk, n, n, dh);
            for r in 0..n {
                let base = r * 3 * d;
                dqkv[base + h * dh..base + (h + 1) * dh].copy_from_slice(&dq[r * dh..(r + 1) * dh]);
                dqkv[base + d + h * dh..base + d + (h + 1) * dh].copy_from_slice(&dk[r * dh..(r + 1) * dh]);
                dqkv[base + 2 * d + h * dh..base + 2 * d + (h + 1) * dh]
                    .copy_from_slice(&dv[r * dh..(r + 1) * dh]);
            }
        }
        self.qkv.backward(ps, x, &dqkv, n, grads, true).unwrap()
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

pub struct BlockCache<F> {
    ln1: LayerNormCache<F>,
    attn: AttentionCache<F>,
    ln2: LayerNormCache<F>,
    mlp: MlpCache<F>,
}

impl Block {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        group: ParamGroup,
    ) -> Self {
        let norm1 = LayerNorm::new(store, &alloc::format!("{name}.norm1"), dim, group);
        let qkv = Linear::new(store, rng, &alloc::format!("{name}.attn.qkv"), dim, 3 * dim, group);
        let proj = Linear::new(store, rng, &alloc::format!("{name}.attn.proj"), dim, dim, group);
        let norm2 = LayerNorm::new(store, &alloc::format!("{name}.norm2"), dim, group);
        let fc1 = Linear::new(store, rng, &alloc::format!("{name}.mlp.fc1"), dim, 4 * dim, group);
        let fc2 = Linear::new(store, rng, &alloc::format!("{name}.mlp.fc2"), 4 * dim, dim, group);
        Self {
            norm1,
            attn: Attention { qkv, proj, heads, dim },
            norm2,
            mlp: Mlp { fc1, fc2 },
        }
    }

    /// Runs the block in place on `x` (shape `n × dim`).
    pub fn forward<F: Scalar>(&self, ps: &ParamStore<F>, x: &mut [F], n: usize) -> BlockCache<F> {
        let ln1 = self.norm1.forward(ps, x, n);
        let (a, attn) = self.attn.forward(ps, &ln1.out, n);
        for (xv, av) in x.iter_mut().zip(a) {
            *xv += av;
        }
        let ln2 = self.norm2.forward(ps, x, n);
        let (m, mlp) = self.mlp.forward(ps, &ln2.out, n);
        for (xv, mv) in x.iter_mut().zip(m) {
            *xv += mv;
        }
        BlockCache { ln1, attn, ln2, mlp }
    }

    /// Forward pass without keeping activations.
    pub fn infer<F: Scalar>(&self, ps: &ParamStore<F>, x: &mut [F], n: usize) {
        let _ = self.forward(ps, x, n);
    }

    /// Takes the gradient w.r.t. the block output and overwrites it with
    /// the gradient w.r.t. the block input.
    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        cache: &BlockCache<F>,
        dx: &mut [F],
        n: usize,
        grads: &mut Grads<F>,
    ) {
        let dln2 = self.mlp.backward(ps, &cache.ln2.out, &cache.mlp, dx, n, grads);
        let d = self.norm2.backward(ps, &cache.ln2, &dln2, n, grads);
        for (g, v) in dx.iter_mut().zip(d) {
            *g += v;
        }
        let dln1 = self.attn.backward(ps, &cache.ln1.out, &cache.attn, dx, n, grads);
        let d = self.norm1.backward(ps, &cache.ln1, &dln1, n, grads);
        for (g, v) in dx.iter_mut().zip(d) {
            *g += v;
        }
    }
}
