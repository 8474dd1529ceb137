//! Transformer weights, forward pass and hand-written backward pass.
//!
//! Shapes, with `F` frames, `P` = `max_pose_dim`, `d` = `model_dim` and `m`
//! conditioning-memory rows:
//!
//! ```text
//! x      F x (P+3)   centered, zero-padded frames + category one-hot
//! h      F x d       x W_in + b_in + pos[0..F]
//! block  h += SelfAttn(LN1 h); h += CrossAttn(LN2 h, mem); h += FFN(LN3 h)
//! y      F x P       LN_f(h) W_out + b_out
//! out    F x pose    input + y[.., ..pose_dim]
//! ```
//!
//! The output is a residual correction of the raw input; centering removes
//! the per-channel sequence mean before projection so the network sees
//! placement-independent motion.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::config::{PmpConfig, MAX_TOKENS, STRENGTH_FEATURES};
use super::PmpError;
use crate::motion::{Category, MotionSequence};
use crate::rng;

const LN_EPS: f64 = 1e-5;

/// Conditioning for one sequence. Tokens form an unordered memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub tokens: Vec<usize>,
    pub strength: f64,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
    pub cq: Array2<f64>,
    pub cbq: Array2<f64>,
    pub ck: Array2<f64>,
    pub cv: Array2<f64>,
    pub cbv: Array2<f64>,
    pub co: Array2<f64>,
    pub cbo: Array2<f64>,
    pub ln3_g: Array2<f64>,
    pub ln3_b: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl LayerParams {
    fn tensors(&self) -> [&Array2<f64>; 24] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.wv, &self.bv, &self.wo,
            &self.bo, &self.ln2_g, &self.ln2_b, &self.cq, &self.cbq, &self.ck, &self.cv, &self.cbv,
            &self.co, &self.cbo, &self.ln3_g, &self.ln3_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Array2<f64>; 24] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_g, &mut self.ln2_b, &mut self.cq, &mut self.cbq, &mut self.ck,
            &mut self.cv, &mut self.cbv, &mut self.co, &mut self.cbo,
            &mut self.ln3_g, &mut self.ln3_b, &mut self.w1, &mut self.b1, &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Every trainable tensor. Key projections carry no bias: a key bias only
/// shifts each query's scores by a constant, which softmax ignores. Gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub w_in: Array2<f64>,
    pub b_in: Array2<f64>,
    pub pos: Array2<f64>,
    pub tokens: Array2<f64>,
    pub w_strength: Array2<f64>,
    pub b_strength: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array2<f64>,
    pub lnf_b: Array2<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array2<f64>,
}

impl Params {
    /// Tensors in declaration order (the checkpoint order).
    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out = vec![&self.w_in, &self.b_in, &self.pos, &self.tokens, &self.w_strength, &self.b_strength];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.w_out, &self.b_out]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![
            &mut self.w_in,
            &mut self.b_in,
            &mut self.pos,
            &mut self.tokens,
            &mut self.w_strength,
            &mut self.b_strength,
        ];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.w_out, &mut self.b_out]);
        out
    }

    pub fn zeros_like(&self) -> Params {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += other`, tensor by tensor in a fixed order.
    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.mapv_inplace(|v| v * k);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.iter().map(|v| v * v).sum::<f64>()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmpModel {
    pub config: PmpConfig,
    pub params: Params,
}

fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut rng::Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

fn weight(fan_in: usize, fan_out: usize, rng: &mut rng::Rng) -> Array2<f64> {
    uniform(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng)
}

fn zeros(cols: usize) -> Array2<f64> {
    Array2::zeros((1, cols))
}

fn ones(cols: usize) -> Array2<f64> {
    Array2::ones((1, cols))
}

impl PmpModel {
    /// Scaled-uniform initialization: weights in `+-1/sqrt(fan_in)`,
    /// embedding tables in `+-1/sqrt(model_dim)`, biases zero, layer-norm
    /// gains one. The output projection is further scaled by
    /// `output_init_gain`.
    pub fn init(config: PmpConfig, seed: u64) -> Result<Self, PmpError> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let d = config.model_dim;
        let emb = 1.0 / (d as f64).sqrt();
        let w_in = weight(config.input_dim(), d, &mut rng);
        let pos = uniform(config.max_frames, d, emb, &mut rng);
        let tokens = uniform(config.vocab.len(), d, emb, &mut rng);
        let w_strength = weight(STRENGTH_FEATURES, d, &mut rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_g: ones(d),
                ln1_b: zeros(d),
                wq: weight(d, d, &mut rng),
                bq: zeros(d),
                wk: weight(d, d, &mut rng),
                wv: weight(d, d, &mut rng),
                bv: zeros(d),
                wo: weight(d, d, &mut rng),
                bo: zeros(d),
                ln2_g: ones(d),
                ln2_b: zeros(d),
                cq: weight(d, d, &mut rng),
                cbq: zeros(d),
                ck: weight(d, d, &mut rng),
                cv: weight(d, d, &mut rng),
                cbv: zeros(d),
                co: weight(d, d, &mut rng),
                cbo: zeros(d),
                ln3_g: ones(d),
                ln3_b: zeros(d),
                w1: weight(d, config.ffn_dim, &mut rng),
                b1: zeros(config.ffn_dim),
                w2: weight(config.ffn_dim, d, &mut rng),
                b2: zeros(d),
            })
            .collect();
        let w_out = weight(d, config.max_pose_dim, &mut rng) * config.output_init_gain;
        let params = Params {
            w_in,
            b_in: zeros(d),
            pos,
            tokens,
            w_strength,
            b_strength: zeros(d),
            layers,
            lnf_g: ones(d),
            lnf_b: zeros(d),
            w_out,
            b_out: zeros(config.max_pose_dim),
        };
        Ok(Self { config, params })
    }

    pub fn check_inputs(&self, frames: usize, pose_dim: usize, cond: &Conditioning) -> Result<(), PmpError> {
        if frames > self.config.max_frames {
            return Err(PmpError::TooManyFrames { frames, max: self.config.max_frames });
        }
        if frames == 0 {
            return Err(PmpError::ShapeMismatch("sequence has no frames".into()));
        }
        if pose_dim > self.config.max_pose_dim {
            return Err(PmpError::PoseDimExceedsMax { pose_dim, max: self.config.max_pose_dim });
        }
        if cond.tokens.len() > MAX_TOKENS {
            return Err(PmpError::TooManyTokens(cond.tokens.len()));
        }
        if let Some(&index) = cond.tokens.iter().find(|&&t| t >= self.config.vocab.len()) {
            return Err(PmpError::TokenOutOfRange { index, vocab: self.config.vocab.len() });
        }
        if !cond.strength.is_finite() || cond.strength < 0.0 {
            return Err(PmpError::ShapeMismatch(format!("strength {} must be finite and >= 0", cond.strength)));
        }
        Ok(())
    }

    /// Runs the prior on one sequence: output has the input's length and
    /// pose_dim. Applies `refinement_iterations` passes.
    pub fn refine(&self, seq: &MotionSequence, cond: &Conditioning) -> Result<MotionSequence, PmpError> {
        seq.ensure_valid()?;
        self.check_inputs(seq.len(), seq.pose_dim(), cond)?;
        let mut frames = seq.frames.clone();
        for _ in 0..self.config.refinement_iterations {
            frames = self.forward(&frames, cond).output;
        }
        Ok(seq.with_frames(frames))
    }

    /// Single forward pass, keeping activations for [`Self::backward`].
    /// Inputs must already satisfy [`Self::check_inputs`].
    pub fn forward(&self, frames: &[Vec<f64>], cond: &Conditioning) -> ForwardCache {
        let p = &self.params;
        let cfg = &self.config;
        let f = frames.len();
        let pose_dim = frames[0].len();

        let mut x = Array2::<f64>::zeros((f, cfg.input_dim()));
        for c in 0..pose_dim {
            let mean = frames.iter().map(|r| r[c]).sum::<f64>() / f as f64;
            for (i, row) in frames.iter().enumerate() {
                x[[i, c]] = row[c] - mean;
            }
        }
        for i in 0..f {
            x[[i, cfg.max_pose_dim + cond.category.index()]] = 1.0;
        }

        let phi = strength_features(cond.strength);
        let mut memory = Array2::<f64>::zeros((cond.tokens.len() + 1, cfg.model_dim));
        for (i, &t) in cond.tokens.iter().enumerate() {
            memory.row_mut(i).assign(&p.tokens.row(t));
        }
        let strength_row = phi.dot(&p.w_strength) + &p.b_strength;
        memory.row_mut(cond.tokens.len()).assign(&strength_row.row(0));

        let mut h = x.dot(&p.w_in) + &p.b_in + &p.pos.slice(s![0..f, ..]);
        let mut layers = Vec::with_capacity(p.layers.len());
        for lp in &p.layers {
            let ln1 = layer_norm(&h, &lp.ln1_g, &lp.ln1_b);
            let q = ln1.y.dot(&lp.wq) + &lp.bq;
            let k = ln1.y.dot(&lp.wk);
            let v = ln1.y.dot(&lp.wv) + &lp.bv;
            let (ctx1, p_self) = attention(&q, &k, &v, cfg.heads);
            h = h + ctx1.dot(&lp.wo) + &lp.bo;

            let ln2 = layer_norm(&h, &lp.ln2_g, &lp.ln2_b);
            let q2 = ln2.y.dot(&lp.cq) + &lp.cbq;
            let k2 = memory.dot(&lp.ck);
            let v2 = memory.dot(&lp.cv) + &lp.cbv;
            let (ctx2, p_cross) = attention(&q2, &k2, &v2, cfg.heads);
            h = h + ctx2.dot(&lp.co) + &lp.cbo;

            let ln3 = layer_norm(&h, &lp.ln3_g, &lp.ln3_b);
            let z = ln3.y.dot(&lp.w1) + &lp.b1;
            let g = z.mapv(gelu);
            h = h + g.dot(&lp.w2) + &lp.b2;

            layers.push(LayerCache { ln1, q, k, v, p_self, ctx1, ln2, q2, k2, v2, p_cross, ctx2, ln3, z, g });
        }
        let lnf = layer_norm(&h, &p.lnf_g, &p.lnf_b);
        let y = lnf.y.dot(&p.w_out) + &p.b_out;
        let output = frames
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().enumerate().map(|(c, v)| v + y[[i, c]]).collect())
            .collect();
        ForwardCache { x, phi, memory, tokens: cond.tokens.clone(), layers, lnf, output, pose_dim }
    }

    /// Accumulates into `grads` the gradient of `sum(d_out * out)` given the
    /// upstream gradient `d_out` (`F x pose_dim`) of a forward pass.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Array2<f64>, grads: &mut Params) {
        let p = &self.params;
        let cfg = &self.config;
        let f = cache.x.nrows();

        let mut dy = Array2::<f64>::zeros((f, cfg.max_pose_dim));
        dy.slice_mut(s![.., 0..cache.pose_dim]).assign(d_out);
        grads.w_out += &cache.lnf.y.t().dot(&dy);
        grads.b_out += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d_lnf = dy.dot(&p.w_out.t());
        let mut dh = layer_norm_backward(&d_lnf, &cache.lnf, &p.lnf_g, &mut grads.lnf_g, &mut grads.lnf_b);

        let mut d_memory = Array2::<f64>::zeros(cache.memory.raw_dim());
        for (li, lc) in cache.layers.iter().enumerate().rev() {
            let lp = &p.layers[li];
            let lg = &mut grads.layers[li];

            // Feed-forward.
            lg.w2 += &lc.g.t().dot(&dh);
            lg.b2 += &dh.sum_axis(Axis(0)).insert_axis(Axis(0));
            let dg = dh.dot(&lp.w2.t());
            let dz = dg * &lc.z.mapv(gelu_grad);
            lg.w1 += &lc.ln3.y.t().dot(&dz);
            lg.b1 += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));
            let d_ln3 = dz.dot(&lp.w1.t());
            dh += &layer_norm_backward(&d_ln3, &lc.ln3, &lp.ln3_g, &mut lg.ln3_g, &mut lg.ln3_b);

            // Cross-attention.
            lg.co += &lc.ctx2.t().dot(&dh);
            lg.cbo += &dh.sum_axis(Axis(0)).insert_axis(Axis(0));
            let d_ctx2 = dh.dot(&lp.co.t());
            let (dq2, dk2, dv2) = attention_backward(&d_ctx2, &lc.q2, &lc.k2, &lc.v2, &lc.p_cross, cfg.heads);
            lg.cq += &lc.ln2.y.t().dot(&dq2);
            lg.cbq += &dq2.sum_axis(Axis(0)).insert_axis(Axis(0));
            lg.ck += &cache.memory.t().dot(&dk2);
            lg.cv += &cache.memory.t().dot(&dv2);
            lg.cbv += &dv2.sum_axis(Axis(0)).insert_axis(Axis(0));
            d_memory += &dk2.dot(&lp.ck.t());
            d_memory += &dv2.dot(&lp.cv.t());
            let d_ln2 = dq2.dot(&lp.cq.t());
            dh += &layer_norm_backward(&d_ln2, &lc.ln2, &lp.ln2_g, &mut lg.ln2_g, &mut lg.ln2_b);

            // Self-attention.
            lg.wo += &lc.ctx1.t().dot(&dh);
            lg.bo += &dh.sum_axis(Axis(0)).insert_axis(Axis(0));
            let d_ctx1 = dh.dot(&lp.wo.t());
            let (dq, dk, dv) = attention_backward(&d_ctx1, &lc.q, &lc.k, &lc.v, &lc.p_self, cfg.heads);
            lg.wq += &lc.ln1.y.t().dot(&dq);
            lg.bq += &dq.sum_axis(Axis(0)).insert_axis(Axis(0));
            lg.wk += &lc.ln1.y.t().dot(&dk);
            lg.wv += &lc.ln1.y.t().dot(&dv);
            lg.bv += &dv.sum_axis(Axis(0)).insert_axis(Axis(0));
            let d_ln1 = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
            dh += &layer_norm_backward(&d_ln1, &lc.ln1, &lp.ln1_g, &mut lg.ln1_g, &mut lg.ln1_b);
        }

        grads.w_in += &cache.x.t().dot(&dh);
        grads.b_in += &dh.sum_axis(Axis(0)).insert_axis(Axis(0));
        {
            let mut pos = grads.pos.slice_mut(s![0..f, ..]);
            pos += &dh;
        }
        let n_tok = cache.tokens.len();
        for (i, &t) in cache.tokens.iter().enumerate() {
            let mut row = grads.tokens.row_mut(t);
            row += &d_memory.row(i);
        }
        let d_strength = d_memory.slice(s![n_tok..n_tok + 1, ..]);
        grads.w_strength += &cache.phi.t().dot(&d_strength);
        grads.b_strength += &d_strength;
    }
}

/// Activations kept from a forward pass.
pub struct ForwardCache {
    x: Array2<f64>,
    phi: Array2<f64>,
    memory: Array2<f64>,
    tokens: Vec<usize>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    /// Corrected frames, `F x pose_dim`.
    pub output: Vec<Vec<f64>>,
    pose_dim: usize,
}

struct LayerCache {
    ln1: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    p_self: Vec<Array2<f64>>,
    ctx1: Array2<f64>,
    ln2: LnCache,
    q2: Array2<f64>,
    k2: Array2<f64>,
    v2: Array2<f64>,
    p_cross: Vec<Array2<f64>>,
    ctx2: Array2<f64>,
    ln3: LnCache,
    z: Array2<f64>,
    g: Array2<f64>,
}

/// `[sin(2^k s), cos(2^k s)]` for k = 0..8, as a `1 x 16` row.
pub fn strength_features(strength: f64) -> Array2<f64> {
    let mut phi = Array2::<f64>::zeros((1, STRENGTH_FEATURES));
    for k in 0..STRENGTH_FEATURES / 2 {
        let w = (1u32 << k) as f64;
        phi[[0, 2 * k]] = (w * strength).sin();
        phi[[0, 2 * k + 1]] = (w * strength).cos();
    }
    phi
}

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    y: Array2<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> LnCache {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::<f64>::zeros(x.nrows());
    for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mean = row.sum() / n;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        let s = 1.0 / (var + LN_EPS).sqrt();
        row *= s;
        inv_std[i] = s;
    }
    let y = &xhat * g + b;
    LnCache { xhat, inv_std, y }
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array2<f64>,
    dg: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let n = dy.ncols() as f64;
    let dxhat = dy * g;
    let mut dx = Array2::<f64>::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dr = dxhat.row(i);
        let xr = cache.xhat.row(i);
        let sum_d = dr.sum();
        let sum_dx = dr.dot(&xr);
        let s = cache.inv_std[i] / n;
        for j in 0..dy.ncols() {
            dx[[i, j]] = s * (n * dr[j] - sum_d - xr[j] * sum_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Multi-head scaled dot-product attention without masking.
fn attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, heads: usize) -> (Array2<f64>, Vec<Array2<f64>>) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::<f64>::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut scores);
        ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    (ctx, probs)
}

fn attention_backward(
    d_ctx: &Array2<f64>,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    probs: &[Array2<f64>],
    heads: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::<f64>::zeros(q.raw_dim());
    let mut dk = Array2::<f64>::zeros(k.raw_dim());
    let mut dv = Array2::<f64>::zeros(v.raw_dim());
    for (h, p) in probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dc: ArrayView2<f64> = d_ctx.slice(cols);
        let dp = dc.dot(&v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dc));
        let mut ds = dp * p;
        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot = row.sum();
            // ds = p * (dp - sum(dp * p)); row currently holds dp * p.
            row.zip_mut_with(&prow, |x, &pv| *x -= pv * dot);
        }
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&q.slice(cols)));
    }
    (dq, dk, dv)
}
