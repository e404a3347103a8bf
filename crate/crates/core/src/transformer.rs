//! Prompt-guided decision transformer: modality embeddings, a pre-norm causal
//! decoder stack, the decision head, MSE loss, hand-written reverse-mode
//! gradients and Adam.
//!
//! All parameters live in one flat `Vec<f64>`; [`TensorInfo`] records the
//! name, shape and offset of each tensor. Matrices are stored row-major with
//! shape `(fan_in, fan_out)` and applied as `x·W + b`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;

const LN_EPS: f64 = 1e-5;
/// √(2/π), for the tanh form of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub state_dim: usize,
    pub action_dim: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    /// Maximum number of prompt tuples, `T⋆ + 1`.
    pub prompt_tuples: usize,
    /// Maximum number of recent tuples, `L`.
    pub context_len: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            self.state_dim,
            self.action_dim,
            self.embed_dim,
            self.heads,
            self.ff_dim,
            self.context_len,
        ];
        if positive.contains(&0) {
            return Err(ModelError::Shape(format!("zero-sized dimension in {self:?}")));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(ModelError::Shape(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Training hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Recent-trajectory window `L`.
    pub context_len: usize,
    /// Prompt length `T⋆`; prompts hold `T⋆ + 1` tuples.
    pub prompt_len: usize,
    /// Inputs per scene minibatch `G`.
    pub minibatch: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale values: 12 decoders, `L = 20`, `T⋆ = 10`, `G = 16`, `β = 1e-4`.
    pub fn table_one() -> Self {
        Self {
            embed_dim: 64,
            heads: 4,
            layers: 12,
            context_len: 20,
            prompt_len: 10,
            minibatch: 16,
            learning_rate: 1e-4,
            epochs: 100,
            seed: 0,
        }
    }

    /// Small model for single-core runs.
    pub fn desk() -> Self {
        Self {
            embed_dim: 32,
            heads: 4,
            layers: 2,
            learning_rate: 1e-3,
            epochs: 60,
            ..Self::table_one()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(ModelError::Shape(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.context_len == 0 || self.minibatch == 0 || self.epochs == 0 {
            return Err(ModelError::Shape("context_len, minibatch and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Shape("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn dims(&self, state_dim: usize, action_dim: usize, with_prompt: bool) -> ModelDims {
        ModelDims {
            state_dim,
            action_dim,
            embed_dim: self.embed_dim,
            heads: self.heads,
            layers: self.layers,
            ff_dim: 4 * self.embed_dim,
            prompt_tuples: if with_prompt { self.prompt_len + 1 } else { 0 },
            context_len: self.context_len,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Weight,
    Bias,
    Scale,
    Position,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub kind: TensorKind,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Tensor order of the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
struct Layout {
    tensors: Vec<TensorInfo>,
    total: usize,
    rtg_w: usize,
    rtg_b: usize,
    state_w: usize,
    state_b: usize,
    dec_w: usize,
    dec_b: usize,
    pos_prompt: usize,
    pos_traj: usize,
    layers: Vec<LayerIdx>,
    head_w: usize,
    head_b: usize,
}

impl Layout {
    fn new(d: &ModelDims) -> Self {
        let mut tensors: Vec<TensorInfo> = Vec::new();
        let mut total = 0;
        let mut push = |name: String, rows: usize, cols: usize, kind: TensorKind| {
            tensors.push(TensorInfo {
                name,
                rows,
                cols,
                offset: total,
                kind,
            });
            total += rows * cols;
            tensors.len() - 1
        };
        use TensorKind::*;
        let e = d.embed_dim;
        let rtg_w = push("embed.rtg.w".into(), 1, e, Weight);
        let rtg_b = push("embed.rtg.b".into(), 1, e, Bias);
        let state_w = push("embed.state.w".into(), d.state_dim, e, Weight);
        let state_b = push("embed.state.b".into(), 1, e, Bias);
        let dec_w = push("embed.decision.w".into(), d.action_dim, e, Weight);
        let dec_b = push("embed.decision.b".into(), 1, e, Bias);
        let pos_prompt = push("pos.prompt".into(), d.prompt_tuples, e, Position);
        let pos_traj = push("pos.trajectory".into(), d.context_len, e, Position);
        let layers = (0..d.layers)
            .map(|l| {
                let mut p = |n: &str, r: usize, c: usize, k: TensorKind| push(format!("layer{l}.{n}"), r, c, k);
                LayerIdx {
                    ln1_g: p("ln1.g", 1, e, Scale),
                    ln1_b: p("ln1.b", 1, e, Bias),
                    wq: p("attn.wq", e, e, Weight),
                    bq: p("attn.bq", 1, e, Bias),
                    wk: p("attn.wk", e, e, Weight),
                    bk: p("attn.bk", 1, e, Bias),
                    wv: p("attn.wv", e, e, Weight),
                    bv: p("attn.bv", 1, e, Bias),
                    wo: p("attn.wo", e, e, Weight),
                    bo: p("attn.bo", 1, e, Bias),
                    ln2_g: p("ln2.g", 1, e, Scale),
                    ln2_b: p("ln2.b", 1, e, Bias),
                    w1: p("ff.w1", e, d.ff_dim, Weight),
                    b1: p("ff.b1", 1, d.ff_dim, Bias),
                    w2: p("ff.w2", d.ff_dim, e, Weight),
                    b2: p("ff.b2", 1, e, Bias),
                }
            })
            .collect();
        let head_w = push("head.w".into(), e, d.action_dim, Weight);
        let head_b = push("head.b".into(), 1, d.action_dim, Bias);
        Self {
            tensors,
            total,
            rtg_w,
            rtg_b,
            state_w,
            state_b,
            dec_w,
            dec_b,
            pos_prompt,
            pos_traj,
            layers,
            head_w,
            head_b,
        }
    }

    fn mat<'a>(&self, data: &'a [f64], i: usize) -> ArrayView2<'a, f64> {
        let t = &self.tensors[i];
        ArrayView2::from_shape((t.rows, t.cols), &data[t.range()]).expect("layout shape")
    }

    fn vec<'a>(&self, data: &'a [f64], i: usize) -> ArrayView1<'a, f64> {
        ArrayView1::from(&data[self.tensors[i].range()])
    }
}

/// Trainable tensors, Adam moments and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub seed: u64,
    pub values: Vec<f64>,
    pub moment1: Vec<f64>,
    pub moment2: Vec<f64>,
    pub step: u64,
    layout: Layout,
}

/// Gradient with the same layout as [`ModelParams::values`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    fn add(&mut self, layout: &Layout, i: usize, g: ArrayView2<'_, f64>) {
        let t = &layout.tensors[i];
        debug_assert_eq!(g.dim(), (t.rows, t.cols));
        for (dst, src) in self.values[t.range()].iter_mut().zip(g.iter()) {
            *dst += src;
        }
    }

    fn add_vec(&mut self, layout: &Layout, i: usize, g: ArrayView1<'_, f64>) {
        for (dst, src) in self.values[layout.tensors[i].range()].iter_mut().zip(g.iter()) {
            *dst += src;
        }
    }

    fn add_row(&mut self, layout: &Layout, i: usize, row: usize, g: ArrayView1<'_, f64>) {
        let t = &layout.tensors[i];
        let start = t.offset + row * t.cols;
        for (dst, src) in self.values[start..start + t.cols].iter_mut().zip(g.iter()) {
            *dst += src;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Weights `U(±1/√fan_in)`, biases 0, layer-norm scales 1, positional
/// tables `U(±1/√d)`; moments zero.
pub fn init_params(dims: ModelDims, seed: u64) -> Result<ModelParams, ModelError> {
    dims.validate()?;
    let layout = Layout::new(&dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; layout.total];
    for t in &layout.tensors {
        let slot = &mut values[t.range()];
        match t.kind {
            TensorKind::Bias => {}
            TensorKind::Scale => slot.fill(1.0),
            TensorKind::Weight | TensorKind::Position => {
                let fan_in = if t.kind == TensorKind::Weight { t.rows } else { dims.embed_dim };
                let bound = 1.0 / (fan_in as f64).sqrt();
                for x in slot.iter_mut() {
                    *x = rng.random_range(-bound..=bound);
                }
            }
        }
    }
    Ok(ModelParams {
        dims,
        seed,
        moment1: vec![0.0; layout.total],
        moment2: vec![0.0; layout.total],
        values,
        step: 0,
        layout,
    })
}

impl ModelParams {
    pub fn tensors(&self) -> &[TensorInfo] {
        &self.layout.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<ArrayView2<'_, f64>> {
        let i = self.layout.tensors.iter().position(|t| t.name == name)?;
        Some(self.layout.mat(&self.values, i))
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients::zeros(self.layout.total)
    }
}

/// One (RTG, state, decision) tuple in model units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tuple {
    pub rtg: f64,
    pub state: Vec<f64>,
    pub decision: Vec<f64>,
}

/// Prompt tuples followed by a recent-trajectory window. Recent tuples with
/// `valid[j] == false` are padding: they are dropped before embedding and
/// produce no prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub prompt: Vec<Tuple>,
    pub recent: Vec<Tuple>,
    pub valid: Vec<bool>,
}

impl ModelInput {
    pub fn unpadded(prompt: Vec<Tuple>, recent: Vec<Tuple>) -> Self {
        let valid = vec![true; recent.len()];
        Self { prompt, recent, valid }
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// `3·(prompt tuples + valid recent tuples)`.
    pub fn token_count(&self) -> usize {
        3 * (self.prompt.len() + self.num_valid())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Modality {
    Rtg,
    State,
    Decision,
}

#[derive(Clone, Copy, Debug)]
struct TokenRef<'a> {
    modality: Modality,
    tuple: &'a Tuple,
    /// Positional table and row.
    table: usize,
    pos: usize,
}

fn plan<'a>(params: &ModelParams, input: &'a ModelInput) -> Result<Vec<TokenRef<'a>>, ModelError> {
    let d = &params.dims;
    let l = &params.layout;
    if input.valid.len() != input.recent.len() {
        return Err(ModelError::Shape("validity mask length differs from window".into()));
    }
    if input.prompt.len() > d.prompt_tuples {
        return Err(ModelError::Shape(format!(
            "{} prompt tuples, model holds {}",
            input.prompt.len(),
            d.prompt_tuples
        )));
    }
    let recent: Vec<&Tuple> = input.recent.iter().zip(&input.valid).filter(|(_, v)| **v).map(|(t, _)| t).collect();
    if recent.len() > d.context_len {
        return Err(ModelError::Shape(format!(
            "{} recent tuples, context is {}",
            recent.len(),
            d.context_len
        )));
    }
    let mut out = Vec::with_capacity(3 * (input.prompt.len() + recent.len()));
    let segments = [(l.pos_prompt, input.prompt.iter().collect::<Vec<_>>()), (l.pos_traj, recent)];
    for (table, tuples) in segments {
        for (pos, tuple) in tuples.into_iter().enumerate() {
            if tuple.state.len() != d.state_dim || tuple.decision.len() != d.action_dim {
                return Err(ModelError::Shape(format!(
                    "tuple has state {} / decision {}, expected {} / {}",
                    tuple.state.len(),
                    tuple.decision.len(),
                    d.state_dim,
                    d.action_dim
                )));
            }
            for modality in [Modality::Rtg, Modality::State, Modality::Decision] {
                out.push(TokenRef {
                    modality,
                    tuple,
                    table,
                    pos,
                });
            }
        }
    }
    Ok(out)
}

fn embed_planned(params: &ModelParams, tokens: &[TokenRef<'_>]) -> Array2<f64> {
    let l = &params.layout;
    let v = &params.values;
    let mut x = Array2::<f64>::zeros((tokens.len(), params.dims.embed_dim));
    for (row, tok) in x.rows_mut().into_iter().zip(tokens) {
        let mut row = row;
        match tok.modality {
            Modality::Rtg => {
                row.scaled_add(tok.tuple.rtg, &l.mat(v, l.rtg_w).row(0));
                row += &l.vec(v, l.rtg_b);
            }
            Modality::State => {
                row += &ArrayView1::from(&tok.tuple.state[..]).dot(&l.mat(v, l.state_w));
                row += &l.vec(v, l.state_b);
            }
            Modality::Decision => {
                row += &ArrayView1::from(&tok.tuple.decision[..]).dot(&l.mat(v, l.dec_w));
                row += &l.vec(v, l.dec_b);
            }
        }
        row += &l.mat(v, tok.table).row(tok.pos);
    }
    x
}

/// Token matrix of shape `3·(prompt + valid recent) × d`, prompt first.
pub fn embed_tokens(params: &ModelParams, input: &ModelInput) -> Result<Array2<f64>, ModelError> {
    let tokens = plan(params, input)?;
    Ok(embed_planned(params, &tokens))
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> (Array2<f64>, LnCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|a| a - mean);
        let var = row.mapv(|a| a * a).sum() / n;
        *s = 1.0 / (var + LN_EPS).sqrt();
        let scale = *s;
        row.mapv_inplace(|a| a * scale);
    }
    let y = &xhat * &g + &b;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<'_, f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let n = dy.ncols() as f64;
    let dg = (dy * &cache.xhat).sum_axis(Axis(0));
    let db = dy.sum_axis(Axis(0));
    let dxhat = dy * &g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / n;
        let mean_dhx = dh.dot(&xh) / n;
        let s = cache.inv_std[i];
        let mut out = dx.row_mut(i);
        for j in 0..dh.len() {
            out[j] = s * (dh[j] - mean_dh - xh[j] * mean_dhx);
        }
    }
    (dx, dg, db)
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

fn affine(x: &Array2<f64>, w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    x.dot(&w) + &b
}

struct LayerCache {
    x_in: Array2<f64>,
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention weights per head, lower-triangular.
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    bn: Array2<f64>,
    u: Array2<f64>,
    gu: Array2<f64>,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    x_out: Array2<f64>,
    state_rows: Vec<usize>,
}

fn attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, heads: usize) -> (Array2<f64>, Vec<Array2<f64>>) {
    let (t, d) = q.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut o = Array2::zeros((t, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let scores = qh.dot(&kh.t());
        let mut p = Array2::zeros((t, t));
        for i in 0..t {
            let row = scores.row(i);
            let top = (0..=i).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..=i {
                let e = ((row[j] - top) * scale).exp();
                p[(i, j)] = e;
                z += e;
            }
            for j in 0..=i {
                p[(i, j)] /= z;
            }
        }
        o.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    (o, probs)
}

fn forward_cached(params: &ModelParams, input: &ModelInput) -> Result<(Array2<f64>, ForwardCache, Vec<usize>), ModelError> {
    let tokens = plan(params, input)?;
    let l = &params.layout;
    let v = &params.values;
    let mut x = embed_planned(params, &tokens);
    let mut caches = Vec::with_capacity(l.layers.len());
    for li in &l.layers {
        let (a, ln1) = layer_norm(&x, l.vec(v, li.ln1_g), l.vec(v, li.ln1_b));
        let q = affine(&a, l.mat(v, li.wq), l.vec(v, li.bq));
        let k = affine(&a, l.mat(v, li.wk), l.vec(v, li.bk));
        let vv = affine(&a, l.mat(v, li.wv), l.vec(v, li.bv));
        let (o, probs) = attention(&q, &k, &vv, params.dims.heads);
        let x_mid = &x + &affine(&o, l.mat(v, li.wo), l.vec(v, li.bo));
        let (bn, ln2) = layer_norm(&x_mid, l.vec(v, li.ln2_g), l.vec(v, li.ln2_b));
        let u = affine(&bn, l.mat(v, li.w1), l.vec(v, li.b1));
        let gu = u.mapv(gelu);
        let x_out = &x_mid + &affine(&gu, l.mat(v, li.w2), l.vec(v, li.b2));
        caches.push(LayerCache {
            x_in: std::mem::replace(&mut x, x_out),
            ln1,
            a,
            q,
            k,
            v: vv,
            probs,
            o,
            ln2,
            bn,
            u,
            gu,
        });
    }
    let prompt_tokens = 3 * input.prompt.len();
    let state_rows: Vec<usize> = (0..tokens.len())
        .filter(|&i| i >= prompt_tokens && tokens[i].modality == Modality::State)
        .collect();
    let hidden = x.select(Axis(0), &state_rows);
    let pred = affine(&hidden, l.mat(v, l.head_w), l.vec(v, l.head_b));
    let token_pos = tokens.iter().map(|t| t.pos).collect();
    Ok((
        pred,
        ForwardCache {
            layers: caches,
            x_out: x,
            state_rows,
        },
        token_pos,
    ))
}

/// Raw-action predictions, one row per valid recent tuple, read at the
/// state-token positions.
pub fn forward(params: &ModelParams, input: &ModelInput) -> Result<Array2<f64>, ModelError> {
    Ok(forward_cached(params, input)?.0)
}

/// Mean of squared differences over all entries.
pub fn mse_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64, ModelError> {
    if pred.dim() != target.dim() {
        return Err(ModelError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok((pred - target).mapv(|e| e * e).sum() / pred.len() as f64)
}

/// Accumulates into `grads` the gradient of `Σ weight·(pred − target)²`.
fn backward_into(
    params: &ModelParams,
    input: &ModelInput,
    target: &Array2<f64>,
    weight: f64,
    grads: &mut Gradients,
) -> Result<f64, ModelError> {
    let (pred, cache, _) = forward_cached(params, input)?;
    if pred.dim() != target.dim() {
        return Err(ModelError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let l = &params.layout;
    let v = &params.values;
    let diff = &pred - target;
    let sq_sum = diff.mapv(|e| e * e).sum();
    let dpred = diff * (2.0 * weight);

    let hidden = cache.x_out.select(Axis(0), &cache.state_rows);
    grads.add(l, l.head_w, hidden.t().dot(&dpred).view());
    grads.add_vec(l, l.head_b, dpred.sum_axis(Axis(0)).view());
    let dhidden = dpred.dot(&l.mat(v, l.head_w).t());
    let mut dx = Array2::<f64>::zeros(cache.x_out.raw_dim());
    for (r, &row) in cache.state_rows.iter().enumerate() {
        dx.row_mut(row).assign(&dhidden.row(r));
    }

    let heads = params.dims.heads;
    let dh = params.dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for (li, c) in l.layers.iter().zip(&cache.layers).rev() {
        // feed-forward block
        grads.add(l, li.w2, c.gu.t().dot(&dx).view());
        grads.add_vec(l, li.b2, dx.sum_axis(Axis(0)).view());
        let dgu = dx.dot(&l.mat(v, li.w2).t());
        let du = dgu * &c.u.mapv(gelu_grad);
        grads.add(l, li.w1, c.bn.t().dot(&du).view());
        grads.add_vec(l, li.b1, du.sum_axis(Axis(0)).view());
        let dbn = du.dot(&l.mat(v, li.w1).t());
        let (dxm, dg2, db2) = layer_norm_backward(&dbn, &c.ln2, l.vec(v, li.ln2_g));
        grads.add_vec(l, li.ln2_g, dg2.view());
        grads.add_vec(l, li.ln2_b, db2.view());
        let dx_mid = &dx + &dxm;

        // attention block
        grads.add(l, li.wo, c.o.t().dot(&dx_mid).view());
        grads.add_vec(l, li.bo, dx_mid.sum_axis(Axis(0)).view());
        let do_ = dx_mid.dot(&l.mat(v, li.wo).t());
        let t = do_.nrows();
        let mut dq = Array2::<f64>::zeros((t, params.dims.embed_dim));
        let mut dk = dq.clone();
        let mut dv = dq.clone();
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &c.probs[h];
            let doh = do_.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&doh));
            let dp = doh.dot(&c.v.slice(cols).t());
            let mut ds = Array2::<f64>::zeros((t, t));
            for i in 0..t {
                let dot: f64 = (0..=i).map(|j| p[(i, j)] * dp[(i, j)]).sum();
                for j in 0..=i {
                    ds[(i, j)] = p[(i, j)] * (dp[(i, j)] - dot) * scale;
                }
            }
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let mut da = Array2::<f64>::zeros(c.a.raw_dim());
        for (dz, w, b) in [(&dq, li.wq, li.bq), (&dk, li.wk, li.bk), (&dv, li.wv, li.bv)] {
            grads.add(l, w, c.a.t().dot(dz).view());
            grads.add_vec(l, b, dz.sum_axis(Axis(0)).view());
            da += &dz.dot(&l.mat(v, w).t());
        }
        let (dxa, dg1, db1) = layer_norm_backward(&da, &c.ln1, l.vec(v, li.ln1_g));
        grads.add_vec(l, li.ln1_g, dg1.view());
        grads.add_vec(l, li.ln1_b, db1.view());
        dx = dx_mid + dxa;
        debug_assert_eq!(dx.dim(), c.x_in.dim());
    }

    // embeddings
    let tokens = plan(params, input)?;
    for (row, tok) in dx.rows().into_iter().zip(&tokens) {
        grads.add_row(l, tok.table, tok.pos, row);
        match tok.modality {
            Modality::Rtg => {
                grads.add_row(l, l.rtg_w, 0, (&row * tok.tuple.rtg).view());
                grads.add_vec(l, l.rtg_b, row);
            }
            Modality::State => {
                let outer = outer(&tok.tuple.state, row);
                grads.add(l, l.state_w, outer.view());
                grads.add_vec(l, l.state_b, row);
            }
            Modality::Decision => {
                let outer = outer(&tok.tuple.decision, row);
                grads.add(l, l.dec_w, outer.view());
                grads.add_vec(l, l.dec_b, row);
            }
        }
    }
    Ok(sq_sum)
}

fn outer(a: &[f64], b: ArrayView1<'_, f64>) -> Array2<f64> {
    let col = ArrayView2::from_shape((a.len(), 1), a).expect("column");
    col.dot(&b.insert_axis(Axis(0)))
}

/// Exact gradient of `mse_loss(forward(input), target)`.
pub fn backward(params: &ModelParams, input: &ModelInput, target: &Array2<f64>) -> Result<Gradients, ModelError> {
    let mut grads = params.zero_gradients();
    let count = target.len().max(1) as f64;
    backward_into(params, input, target, 1.0 / count, &mut grads)?;
    Ok(grads)
}

/// Loss and gradient of the mean squared error over every entry of every
/// example in the batch.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    batch: &[(ModelInput, Array2<f64>)],
) -> Result<(f64, Gradients), ModelError> {
    let count: usize = batch.iter().map(|(_, t)| t.len()).sum();
    let mut grads = params.zero_gradients();
    if count == 0 {
        return Ok((0.0, grads));
    }
    let weight = 1.0 / count as f64;
    let mut total = 0.0;
    for (input, target) in batch {
        total += backward_into(params, input, target, weight, &mut grads)?;
    }
    Ok((total / count as f64, grads))
}

/// Adam with bias correction; increments the step counter.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, learning_rate: f64) -> Result<(), ModelError> {
    if grads.values.len() != params.values.len() {
        return Err(ModelError::Shape(format!(
            "{} gradients for {} parameters",
            grads.values.len(),
            params.values.len()
        )));
    }
    params.step += 1;
    let t = params.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((x, m), v), g) in params
        .values
        .iter_mut()
        .zip(params.moment1.iter_mut())
        .zip(params.moment2.iter_mut())
        .zip(&grads.values)
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        *x -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Per-dimension state standardization and RTG scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub rtg_scale: f64,
}

impl Normalizer {
    pub fn identity(state_dim: usize) -> Self {
        Self {
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
            rtg_scale: 1.0,
        }
    }

    /// Fits the statistics; constant dimensions get unit scale.
    pub fn fit<'a>(states: impl IntoIterator<Item = &'a [f64]>, rtg_scale: f64) -> Self {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sumsq: Vec<f64> = Vec::new();
        for s in states {
            if sum.is_empty() {
                sum = vec![0.0; s.len()];
                sumsq = vec![0.0; s.len()];
            }
            for (i, x) in s.iter().enumerate() {
                sum[i] += x;
                sumsq[i] += x * x;
            }
            n += 1;
        }
        let nf = n.max(1) as f64;
        let state_mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let state_std = sumsq
            .iter()
            .zip(&state_mean)
            .map(|(q, m)| {
                let sd = (q / nf - m * m).max(0.0).sqrt();
                if sd > 1e-12 * m.abs().max(1e-300) && sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            state_mean,
            state_std,
            rtg_scale: if rtg_scale > 0.0 { rtg_scale } else { 1.0 },
        }
    }

    pub fn state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(x, (m, sd))| (x - m) / sd)
            .collect()
    }

    pub fn rtg(&self, r: f64) -> f64 {
        r / self.rtg_scale
    }

    pub fn tuple(&self, rtg: f64, state: &[f64], decision: &[f64]) -> Tuple {
        Tuple {
            rtg: self.rtg(rtg),
            state: self.state(state),
            decision: decision.to_vec(),
        }
    }
}

/// A model together with the input normalization it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionModel {
    pub params: ModelParams,
    pub normalizer: Normalizer,
}

impl DecisionModel {
    pub fn uses_prompt(&self) -> bool {
        self.params.dims.prompt_tuples > 0
    }
}

pub const CHECKPOINT_FORMAT: &str = "risdt-decision-transformer/1";

/// Contents of `<stem>.json`. The companion `<stem>.bin` holds
/// `values ‖ moment1 ‖ moment2` as little-endian `f64`, each in tensor order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub dims: ModelDims,
    pub seed: u64,
    pub step: u64,
    pub num_params: usize,
    pub tensors: Vec<TensorInfo>,
    pub normalizer: Normalizer,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

pub fn save_checkpoint(model: &DecisionModel, tags: &BTreeMap<String, String>, stem: &Path) -> Result<(), ModelError> {
    let p = &model.params;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        dims: p.dims,
        seed: p.seed,
        step: p.step,
        num_params: p.num_params(),
        tensors: p.layout.tensors.clone(),
        normalizer: model.normalizer.clone(),
        tags: tags.clone(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    fs::write(with_ext(stem, ".json"), json + "\n")?;
    let mut blob = Vec::with_capacity(24 * p.num_params());
    for x in p.values.iter().chain(&p.moment1).chain(&p.moment2) {
        blob.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(with_ext(stem, ".bin"), blob)?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<(DecisionModel, BTreeMap<String, String>), ModelError> {
    let text = fs::read_to_string(with_ext(stem, ".json"))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(ModelError::Checkpoint(format!("unknown format {:?}", meta.format)));
    }
    let mut params = init_params(meta.dims, meta.seed)?;
    if params.layout.tensors != meta.tensors || params.num_params() != meta.num_params {
        return Err(ModelError::Checkpoint("tensor layout does not match dimensions".into()));
    }
    let blob = fs::read(with_ext(stem, ".bin"))?;
    let n = params.num_params();
    if blob.len() != 24 * n {
        return Err(ModelError::Checkpoint(format!(
            "parameter blob has {} bytes, expected {}",
            blob.len(),
            24 * n
        )));
    }
    let mut words = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for dst in [&mut params.values, &mut params.moment1, &mut params.moment2] {
        for x in dst.iter_mut() {
            *x = words.next().expect("length checked");
        }
    }
    params.step = meta.step;
    Ok((
        DecisionModel {
            params,
            normalizer: meta.normalizer,
        },
        meta.tags,
    ))
}
