//! A one-layer autoregressive model over a sliding window of `W` tokens.
//!
//! The window ending at position `i - 1` predicts token `i`. Windows are
//! right-aligned: the newest token always sits in slot `W - 1`, so position
//! embeddings encode distance from the prediction point. Slots before the
//! start of the sequence are padding.
//!
//! Attention arch:
//!
//! ```text
//! x_s    = E[t_s] + P[s]
//! a      = softmax_s((x_c Wq) · (x_s Wk) / sqrt(d))      over non-pad slots
//! r      = x_c + (sum_s a_s x_s Wv) Wo
//! u      = r + tanh(r W1 + b1) W2 + b2
//! logits = u Wout + bout
//! ```
//!
//! Windowed-MLP arch: `logits = tanh([E[t_0] .. E[t_{W-1}]] Wh + bh) Wout + bout`.
//!
//! The projections `E Wq`, `P Wq` (and likewise for keys and values) are
//! linear in the embeddings, so they are computed once per parameter set and
//! gathered per slot; gradients are accumulated per token and projected back
//! when a batch is finished.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tensor::{add_outer, axpy, dot, log_softmax, mat_vec_acc, softmax, vec_mat_acc, Matrix};
use super::vocab::{EOS, PAD};
use crate::episode::{TokenId, TokenizedInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Attention,
    WindowedMlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyLMConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Context window `W` in tokens.
    pub window: usize,
    pub arch: Arch,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Initialization seed.
    pub seed: u64,
    pub init_std: f64,
}

impl Default for ToyLMConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden_dim: 256,
            window: 64,
            arch: Arch::Attention,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            init_std: 0.02,
        }
    }
}

impl ToyLMConfig {
    pub fn validate(&self, block_size: usize) -> Result<(), ModelError> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.window == 0 {
            return Err(ModelError::Config("dimensions must be at least 1".into()));
        }
        if self.window > block_size {
            return Err(ModelError::Config(format!(
                "window {} exceeds block size {block_size}",
                self.window
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(ModelError::Config(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("loss mask selects position 0, which has no context")]
    MaskAtStart,
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Body {
    Attention {
        pos: Matrix,
        wq: Matrix,
        wk: Matrix,
        wv: Matrix,
        wo: Matrix,
        w1: Matrix,
        b1: Matrix,
        w2: Matrix,
        b2: Matrix,
    },
    WindowedMlp {
        wh: Matrix,
        bh: Matrix,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub config: ToyLMConfig,
    pub vocab_size: usize,
    pub embed: Matrix,
    pub body: Body,
    pub w_out: Matrix,
    pub b_out: Matrix,
}

impl Parameters {
    /// Gaussian initialization (biases zero), seeded by `cfg.seed`.
    pub fn init(cfg: &ToyLMConfig, vocab_size: usize) -> Result<Self, ModelError> {
        if cfg.embed_dim == 0 || cfg.hidden_dim == 0 || cfg.window == 0 || vocab_size == 0 {
            return Err(ModelError::Config("dimensions must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let std = cfg.init_std;
        let (d, h, w, v) = (cfg.embed_dim, cfg.hidden_dim, cfg.window, vocab_size);
        let mut g = |r, c| Matrix::gaussian(r, c, std, &mut rng);
        let embed = g(v, d);
        let (body, out_rows) = match cfg.arch {
            Arch::Attention => (
                Body::Attention {
                    pos: g(w, d),
                    wq: g(d, d),
                    wk: g(d, d),
                    wv: g(d, d),
                    wo: g(d, d),
                    w1: g(d, h),
                    b1: Matrix::zeros(1, h),
                    w2: g(h, d),
                    b2: Matrix::zeros(1, d),
                },
                d,
            ),
            Arch::WindowedMlp => (
                Body::WindowedMlp {
                    wh: g(w * d, h),
                    bh: Matrix::zeros(1, h),
                },
                h,
            ),
        };
        let w_out = g(out_rows, v);
        Ok(Self {
            config: cfg.clone(),
            vocab_size,
            embed,
            body,
            w_out,
            b_out: Matrix::zeros(1, v),
        })
    }

    /// Same shapes, all entries zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = vec![("embed", &self.embed)];
        match &self.body {
            Body::Attention {
                pos,
                wq,
                wk,
                wv,
                wo,
                w1,
                b1,
                w2,
                b2,
            } => out.extend([
                ("pos", pos),
                ("wq", wq),
                ("wk", wk),
                ("wv", wv),
                ("wo", wo),
                ("w1", w1),
                ("b1", b1),
                ("w2", w2),
                ("b2", b2),
            ]),
            Body::WindowedMlp { wh, bh } => out.extend([("wh", wh), ("bh", bh)]),
        }
        out.extend([("w_out", &self.w_out), ("b_out", &self.b_out)]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = vec![("embed", &mut self.embed)];
        match &mut self.body {
            Body::Attention {
                pos,
                wq,
                wk,
                wv,
                wo,
                w1,
                b1,
                w2,
                b2,
            } => out.extend([
                ("pos", pos),
                ("wq", wq),
                ("wk", wk),
                ("wv", wv),
                ("wo", wo),
                ("w1", w1),
                ("b1", b1),
                ("w2", w2),
                ("b2", b2),
            ]),
            Body::WindowedMlp { wh, bh } => out.extend([("wh", wh), ("bh", bh)]),
        }
        out.extend([("w_out", &mut self.w_out), ("b_out", &mut self.b_out)]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Checks every tensor shape against the config and vocabulary size.
    pub fn check_shapes(&self) -> Result<(), ModelError> {
        let c = &self.config;
        let (d, h, w, v) = (c.embed_dim, c.hidden_dim, c.window, self.vocab_size);
        let mut expected = vec![("embed", (v, d))];
        match (&self.body, c.arch) {
            (Body::Attention { .. }, Arch::Attention) => expected.extend([
                ("pos", (w, d)),
                ("wq", (d, d)),
                ("wk", (d, d)),
                ("wv", (d, d)),
                ("wo", (d, d)),
                ("w1", (d, h)),
                ("b1", (1, h)),
                ("w2", (h, d)),
                ("b2", (1, d)),
                ("w_out", (d, v)),
            ]),
            (Body::WindowedMlp { .. }, Arch::WindowedMlp) => {
                expected.extend([("wh", (w * d, h)), ("bh", (1, h)), ("w_out", (h, v))])
            }
            _ => return Err(ModelError::ShapeMismatch("body does not match arch".into())),
        }
        expected.push(("b_out", (1, v)));
        let actual = self.tensors();
        if actual.len() != expected.len() {
            return Err(ModelError::ShapeMismatch("tensor count".into()));
        }
        for ((name, t), (ename, (r, cc))) in actual.iter().zip(&expected) {
            if name != ename || t.rows != *r || t.cols != *cc || t.data.len() != r * cc {
                return Err(ModelError::ShapeMismatch(format!(
                    "{name}: {}x{} (expected {ename} {r}x{cc})",
                    t.rows, t.cols
                )));
            }
        }
        Ok(())
    }
}

/// Per-token and per-slot query/key/value projections.
#[derive(Debug, Clone)]
pub struct Projected {
    qe: Matrix,
    ke: Matrix,
    ve: Matrix,
    qp: Matrix,
    kp: Matrix,
    vp: Matrix,
}

impl Parameters {
    pub fn project(&self) -> Option<Projected> {
        match &self.body {
            Body::Attention { pos, wq, wk, wv, .. } => Some(Projected {
                qe: self.embed.matmul(wq),
                ke: self.embed.matmul(wk),
                ve: self.embed.matmul(wv),
                qp: pos.matmul(wq),
                kp: pos.matmul(wk),
                vp: pos.matmul(wv),
            }),
            Body::WindowedMlp { .. } => None,
        }
    }
}

/// Parameters paired with their projections, ready for repeated forwards.
pub struct Prepared<'a> {
    pub params: &'a Parameters,
    proj: Option<&'a Projected>,
}

struct AttnCache {
    tokens: Vec<TokenId>,
    slots: Vec<usize>,
    q: Vec<f64>,
    attn: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    f: Vec<f64>,
    u: Vec<f64>,
}

struct MlpCache {
    tokens: Vec<TokenId>,
    x: Vec<f64>,
    f: Vec<f64>,
}

enum Cache {
    Attn(AttnCache),
    Mlp(MlpCache),
}

impl<'a> Prepared<'a> {
    pub fn new(params: &'a Parameters, proj: Option<&'a Projected>) -> Self {
        assert_eq!(
            proj.is_some(),
            matches!(params.body, Body::Attention { .. }),
            "projections required exactly for the attention arch"
        );
        Self { params, proj }
    }

    fn check_window(&self, window: &[TokenId]) -> Result<(), ModelError> {
        let w = self.params.config.window;
        if window.is_empty() || window.len() > w {
            return Err(ModelError::ShapeMismatch(format!(
                "window of {} tokens, expected 1..={w}",
                window.len()
            )));
        }
        if let Some(&id) = window.iter().find(|&&t| t as usize >= self.params.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.params.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits for the token following `window`.
    pub fn logits(&self, window: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        self.check_window(window)?;
        Ok(self.forward_cached(window).0)
    }

    fn forward_cached(&self, window: &[TokenId]) -> (Vec<f64>, Cache) {
        let p = self.params;
        let c = &p.config;
        let (d, h, w) = (c.embed_dim, c.hidden_dim, c.window);
        let mut logits = p.b_out.data.clone();
        match (&p.body, self.proj) {
            (
                Body::Attention {
                    pos, wo, w1, b1, w2, b2, ..
                },
                Some(proj),
            ) => {
                let offset = w - window.len();
                let slots: Vec<usize> = (0..window.len()).map(|j| offset + j).collect();
                let cur_tok = *window.last().expect("nonempty window") as usize;
                let cur_slot = w - 1;
                let mut q = proj.qe.row(cur_tok).to_vec();
                axpy(1.0, proj.qp.row(cur_slot), &mut q);
                let scale = 1.0 / (d as f64).sqrt();
                let valid: Vec<usize> = (0..window.len()).filter(|&j| window[j] != PAD).collect();
                let mut scores = Vec::with_capacity(valid.len());
                for &j in &valid {
                    let t = window[j] as usize;
                    let s = slots[j];
                    scores.push(scale * (dot(&q, proj.ke.row(t)) + dot(&q, proj.kp.row(s))));
                }
                let a = softmax(&scores);
                let mut attn = vec![0.0; window.len()];
                let mut z = vec![0.0; d];
                for (&j, &aj) in valid.iter().zip(&a) {
                    attn[j] = aj;
                    axpy(aj, proj.ve.row(window[j] as usize), &mut z);
                    axpy(aj, proj.vp.row(slots[j]), &mut z);
                }
                let mut r = p.embed.row(cur_tok).to_vec();
                axpy(1.0, pos.row(cur_slot), &mut r);
                vec_mat_acc(&z, wo, &mut r);
                let mut g = b1.data.clone();
                vec_mat_acc(&r, w1, &mut g);
                let f: Vec<f64> = g.iter().map(|x| x.tanh()).collect();
                let mut u = r.clone();
                axpy(1.0, &b2.data, &mut u);
                vec_mat_acc(&f, w2, &mut u);
                vec_mat_acc(&u, &p.w_out, &mut logits);
                let cache = AttnCache {
                    tokens: window.to_vec(),
                    slots,
                    q,
                    attn,
                    z,
                    r,
                    f,
                    u,
                };
                (logits, Cache::Attn(cache))
            }
            (Body::WindowedMlp { wh, bh }, None) => {
                let mut tokens = vec![PAD; w - window.len()];
                tokens.extend_from_slice(window);
                let mut x = Vec::with_capacity(w * d);
                for &t in &tokens {
                    x.extend_from_slice(p.embed.row(t as usize));
                }
                let mut g = bh.data.clone();
                vec_mat_acc(&x, wh, &mut g);
                let f: Vec<f64> = g.iter().map(|x| x.tanh()).collect();
                debug_assert_eq!(f.len(), h);
                vec_mat_acc(&f, &p.w_out, &mut logits);
                (logits, Cache::Mlp(MlpCache { tokens, x, f }))
            }
            _ => unreachable!("checked in Prepared::new"),
        }
    }
}

/// Logits for the token that follows `window` (at most `W` tokens).
pub fn forward(params: &Parameters, window: &[TokenId]) -> Result<Vec<f64>, ModelError> {
    params.check_shapes()?;
    let proj = params.project();
    Prepared::new(params, proj.as_ref()).logits(window)
}

/// Context window used to predict `tokens[i]`.
pub fn window_before(tokens: &[TokenId], i: usize, w: usize) -> &[TokenId] {
    &tokens[i.saturating_sub(w)..i]
}

/// Gradient accumulator, including per-token projection gradients.
struct GradAccum {
    grads: Parameters,
    dqe: Matrix,
    dke: Matrix,
    dve: Matrix,
    dqp: Matrix,
    dkp: Matrix,
    dvp: Matrix,
}

impl GradAccum {
    fn new(params: &Parameters) -> Self {
        let (v, d, w) = (
            params.vocab_size,
            params.config.embed_dim,
            params.config.window,
        );
        let has_attn = matches!(params.body, Body::Attention { .. });
        let (pv, pw) = if has_attn { (v, w) } else { (0, 0) };
        Self {
            grads: params.zeros_like(),
            dqe: Matrix::zeros(pv, d),
            dke: Matrix::zeros(pv, d),
            dve: Matrix::zeros(pv, d),
            dqp: Matrix::zeros(pw, d),
            dkp: Matrix::zeros(pw, d),
            dvp: Matrix::zeros(pw, d),
        }
    }

    fn backward_window(&mut self, prep: &Prepared<'_>, cache: &Cache, dlogits: &[f64]) {
        let p = prep.params;
        let g = &mut self.grads;
        match (cache, &p.body, &mut g.body, prep.proj) {
            (
                Cache::Attn(c),
                Body::Attention { wo, w1, w2, .. },
                Body::Attention {
                    pos: dpos,
                    wo: dwo,
                    w1: dw1,
                    b1: db1,
                    w2: dw2,
                    b2: db2,
                    ..
                },
                Some(proj),
            ) => {
                let d = p.config.embed_dim;
                let h = p.config.hidden_dim;
                add_outer(&mut g.w_out, &c.u, dlogits);
                axpy(1.0, dlogits, &mut g.b_out.data);
                let mut du = vec![0.0; d];
                mat_vec_acc(&p.w_out, dlogits, &mut du);
                let mut dr = du.clone();
                add_outer(dw2, &c.f, &du);
                axpy(1.0, &du, &mut db2.data);
                let mut df = vec![0.0; h];
                mat_vec_acc(w2, &du, &mut df);
                let dg: Vec<f64> = df.iter().zip(&c.f).map(|(d, f)| d * (1.0 - f * f)).collect();
                add_outer(dw1, &c.r, &dg);
                axpy(1.0, &dg, &mut db1.data);
                mat_vec_acc(w1, &dg, &mut dr);
                // Residual path into the current token's embedding and slot.
                let cur_tok = *c.tokens.last().expect("nonempty") as usize;
                let cur_slot = p.config.window - 1;
                axpy(1.0, &dr, g.embed.row_mut(cur_tok));
                axpy(1.0, &dr, dpos.row_mut(cur_slot));
                add_outer(dwo, &c.z, &dr);
                let mut dz = vec![0.0; d];
                mat_vec_acc(wo, &dr, &mut dz);
                let scale = 1.0 / (d as f64).sqrt();
                let mut da = vec![0.0; c.tokens.len()];
                let mut weighted = 0.0;
                for (j, &t) in c.tokens.iter().enumerate() {
                    let aj = c.attn[j];
                    if t == PAD {
                        continue;
                    }
                    let s = c.slots[j];
                    da[j] = dot(&dz, proj.ve.row(t as usize)) + dot(&dz, proj.vp.row(s));
                    weighted += aj * da[j];
                    axpy(aj, &dz, self.dve.row_mut(t as usize));
                    axpy(aj, &dz, self.dvp.row_mut(s));
                }
                let mut dq = vec![0.0; d];
                for (j, &t) in c.tokens.iter().enumerate() {
                    if t == PAD {
                        continue;
                    }
                    let ds = c.attn[j] * (da[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let s = c.slots[j];
                    axpy(ds, proj.ke.row(t as usize), &mut dq);
                    axpy(ds, proj.kp.row(s), &mut dq);
                    axpy(ds, &c.q, self.dke.row_mut(t as usize));
                    axpy(ds, &c.q, self.dkp.row_mut(s));
                }
                axpy(1.0, &dq, self.dqe.row_mut(cur_tok));
                axpy(1.0, &dq, self.dqp.row_mut(cur_slot));
            }
            (Cache::Mlp(c), Body::WindowedMlp { wh, .. }, Body::WindowedMlp { wh: dwh, bh: dbh }, None) => {
                let d = p.config.embed_dim;
                let h = p.config.hidden_dim;
                add_outer(&mut g.w_out, &c.f, dlogits);
                axpy(1.0, dlogits, &mut g.b_out.data);
                let mut df = vec![0.0; h];
                mat_vec_acc(&p.w_out, dlogits, &mut df);
                let dg: Vec<f64> = df.iter().zip(&c.f).map(|(d, f)| d * (1.0 - f * f)).collect();
                add_outer(dwh, &c.x, &dg);
                axpy(1.0, &dg, &mut dbh.data);
                let mut dx = vec![0.0; c.x.len()];
                mat_vec_acc(wh, &dg, &mut dx);
                for (s, &t) in c.tokens.iter().enumerate() {
                    axpy(1.0, &dx[s * d..(s + 1) * d], g.embed.row_mut(t as usize));
                }
            }
            _ => unreachable!("cache matches arch"),
        }
    }

    /// Folds projection gradients back into embeddings and weights.
    fn finish(mut self, params: &Parameters) -> Parameters {
        if let (
            Body::Attention {
                pos, wq, wk, wv, ..
            },
            Body::Attention {
                pos: dpos,
                wq: dwq,
                wk: dwk,
                wv: dwv,
                ..
            },
        ) = (&params.body, &mut self.grads.body)
        {
            let pairs = [
                (&self.dqe, &self.dqp, wq, dwq),
                (&self.dke, &self.dkp, wk, dwk),
                (&self.dve, &self.dvp, wv, dwv),
            ];
            for (de, dp, w, dw) in pairs {
                for t in 0..de.rows {
                    let row = de.row(t);
                    if row.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    add_outer(dw, params.embed.row(t), row);
                    mat_vec_acc(w, row, self.grads.embed.row_mut(t));
                }
                for s in 0..dp.rows {
                    let row = dp.row(s);
                    if row.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    add_outer(dw, pos.row(s), row);
                    mat_vec_acc(w, row, dpos.row_mut(s));
                }
            }
        }
        self.grads
    }
}

fn masked_positions(inst: &TokenizedInstance) -> Result<Vec<usize>, ModelError> {
    if inst.tokens.len() != inst.mask.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} tokens but {} mask entries",
            inst.tokens.len(),
            inst.mask.len()
        )));
    }
    let positions: Vec<usize> = (0..inst.mask.len()).filter(|&i| inst.mask[i]).collect();
    if positions.is_empty() {
        return Err(ModelError::EmptyMask);
    }
    if positions[0] == 0 {
        return Err(ModelError::MaskAtStart);
    }
    Ok(positions)
}

fn check_tokens(params: &Parameters, tokens: &[TokenId]) -> Result<(), ModelError> {
    match tokens.iter().find(|&&t| t as usize >= params.vocab_size) {
        Some(&id) => Err(ModelError::TokenOutOfRange {
            id,
            vocab: params.vocab_size,
        }),
        None => Ok(()),
    }
}

/// Mean negative log-likelihood over the masked positions.
pub fn masked_nll(params: &Parameters, inst: &TokenizedInstance) -> Result<f64, ModelError> {
    let positions = masked_positions(inst)?;
    check_tokens(params, &inst.tokens)?;
    let proj = params.project();
    let prep = Prepared::new(params, proj.as_ref());
    let w = params.config.window;
    let mut total = 0.0;
    for &i in &positions {
        let (logits, _) = prep.forward_cached(window_before(&inst.tokens, i, w));
        total -= log_softmax(&logits)[inst.tokens[i] as usize];
    }
    Ok(total / positions.len() as f64)
}

fn accumulate(
    prep: &Prepared<'_>,
    inst: &TokenizedInstance,
    weight: f64,
    acc: &mut GradAccum,
) -> Result<f64, ModelError> {
    let positions = masked_positions(inst)?;
    check_tokens(prep.params, &inst.tokens)?;
    let w = prep.params.config.window;
    let per = weight / positions.len() as f64;
    let mut total = 0.0;
    for &i in &positions {
        let (logits, cache) = prep.forward_cached(window_before(&inst.tokens, i, w));
        let mut probs = softmax(&logits);
        let y = inst.tokens[i] as usize;
        total -= probs[y].max(f64::MIN_POSITIVE).ln();
        probs[y] -= 1.0;
        for p in &mut probs {
            *p *= per;
        }
        acc.backward_window(prep, &cache, &probs);
    }
    Ok(total / positions.len() as f64)
}

/// Loss and exact gradients of [`masked_nll`] for one instance.
pub fn backward(
    params: &Parameters,
    inst: &TokenizedInstance,
) -> Result<(f64, Parameters), ModelError> {
    batch_loss_and_grad(params, std::slice::from_ref(inst))
}

/// Mean loss over a batch and the gradient of that mean. Instances are
/// reduced in order, so the result is bit-reproducible.
pub fn batch_loss_and_grad(
    params: &Parameters,
    batch: &[TokenizedInstance],
) -> Result<(f64, Parameters), ModelError> {
    assert!(!batch.is_empty(), "empty batch");
    let proj = params.project();
    let prep = Prepared::new(params, proj.as_ref());
    let mut acc = GradAccum::new(params);
    let weight = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for inst in batch {
        loss += weight * accumulate(&prep, inst, weight, &mut acc)?;
    }
    Ok((loss, acc.finish(params)))
}

/// Log-probabilities of the next token after `context` (last `W` tokens;
/// an empty context is treated as a lone EOS).
pub fn next_token_logprobs(prep: &Prepared<'_>, context: &[TokenId]) -> Vec<f64> {
    let w = prep.params.config.window;
    let window = if context.is_empty() {
        &[EOS][..]
    } else {
        &context[context.len().saturating_sub(w)..]
    };
    log_softmax(&prep.forward_cached(window).0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(arch: Arch) -> ToyLMConfig {
        ToyLMConfig {
            embed_dim: 6,
            hidden_dim: 5,
            window: 4,
            arch,
            init_std: 0.5,
            seed: 3,
            ..Default::default()
        }
    }

    fn instance() -> TokenizedInstance {
        TokenizedInstance {
            tokens: vec![5, 6, 7, 3, 8, 9, 3, 4, 5],
            mask: vec![false, false, false, false, true, true, true, false, true],
            dropped: 0,
        }
    }

    #[test]
    fn zero_params_give_uniform() {
        for arch in [Arch::Attention, Arch::WindowedMlp] {
            let p = Parameters::init(&cfg(arch), 12).unwrap().zeros_like();
            let lp = log_softmax(&forward(&p, &[5, 6]).unwrap());
            for l in lp {
                assert!((l + (12f64).ln()).abs() < 1e-12);
            }
            let loss = masked_nll(&p, &instance()).unwrap();
            assert!((loss - (12f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn window_shape_errors() {
        let p = Parameters::init(&cfg(Arch::Attention), 12).unwrap();
        assert!(matches!(forward(&p, &[1, 2, 3, 4, 5]), Err(ModelError::ShapeMismatch(_))));
        assert!(matches!(forward(&p, &[]), Err(ModelError::ShapeMismatch(_))));
        assert!(matches!(forward(&p, &[40]), Err(ModelError::TokenOutOfRange { .. })));
    }

    #[test]
    fn mask_errors() {
        let p = Parameters::init(&cfg(Arch::Attention), 12).unwrap();
        let mut inst = instance();
        inst.mask.iter_mut().for_each(|m| *m = false);
        assert_eq!(masked_nll(&p, &inst), Err(ModelError::EmptyMask));
        inst.mask[0] = true;
        assert_eq!(masked_nll(&p, &inst), Err(ModelError::MaskAtStart));
    }

    #[test]
    fn certain_prediction_has_zero_loss() {
        let mut p = Parameters::init(&cfg(Arch::Attention), 12).unwrap().zeros_like();
        p.b_out.data[7] = 1e6;
        let inst = TokenizedInstance {
            tokens: vec![5, 7],
            mask: vec![false, true],
            dropped: 0,
        };
        assert!(masked_nll(&p, &inst).unwrap().abs() < 1e-12);
    }

    #[test]
    fn output_row_permutation_permutes_logits() {
        let p = Parameters::init(&cfg(Arch::Attention), 12).unwrap();
        let base = forward(&p, &[5, 6, 7]).unwrap();
        let mut q = p.clone();
        for r in 0..q.w_out.rows {
            q.w_out.data.swap(r * 12 + 2, r * 12 + 9);
        }
        let swapped = forward(&q, &[5, 6, 7]).unwrap();
        assert!((base[2] - swapped[9]).abs() < 1e-12);
        assert!((base[9] - swapped[2]).abs() < 1e-12);
        assert!((base[4] - swapped[4]).abs() < 1e-12);
    }

    #[test]
    fn unmasked_tokens_do_not_enter_loss_targets() {
        let p = Parameters::init(&cfg(Arch::Attention), 12).unwrap();
        let inst = instance();
        let base = masked_nll(&p, &inst).unwrap();
        // Position 7 is unmasked and is never a target; changing it only
        // alters the context of position 8, so compare a mask that excludes 8.
        let mut a = inst.clone();
        a.mask[8] = false;
        let mut b = a.clone();
        b.tokens[7] = 10;
        assert_eq!(masked_nll(&p, &a).unwrap(), masked_nll(&p, &b).unwrap());
        assert!(base.is_finite());
    }

    #[test]
    fn unused_embedding_rows_get_zero_gradient() {
        for arch in [Arch::Attention, Arch::WindowedMlp] {
            let p = Parameters::init(&cfg(arch), 12).unwrap();
            let (_, g) = backward(&p, &instance()).unwrap();
            for t in [10usize, 11] {
                assert!(g.embed.row(t).iter().all(|&x| x == 0.0), "{arch:?} row {t}");
            }
        }
    }

    #[test]
    fn gradient_is_deterministic() {
        let p = Parameters::init(&cfg(Arch::Attention), 12).unwrap();
        assert_eq!(backward(&p, &instance()).unwrap(), backward(&p, &instance()).unwrap());
    }

    fn finite_difference_check(arch: Arch) {
        let p = Parameters::init(&cfg(arch), 12).unwrap();
        let inst = instance();
        let (_, g) = backward(&p, &inst).unwrap();
        let h = 1e-4;
        for (ti, (name, t)) in p.tensors().iter().enumerate() {
            for idx in 0..t.data.len() {
                let mut plus = p.clone();
                plus.tensors_mut()[ti].1.data[idx] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[ti].1.data[idx] -= h;
                let fd = (masked_nll(&plus, &inst).unwrap() - masked_nll(&minus, &inst).unwrap())
                    / (2.0 * h);
                let an = g.tensors()[ti].1.data[idx];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-3 || (fd - an).abs() < 1e-8,
                    "{arch:?} {name}[{idx}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_attention() {
        finite_difference_check(Arch::Attention);
    }

    #[test]
    fn gradients_match_finite_differences_mlp() {
        finite_difference_check(Arch::WindowedMlp);
    }

    #[test]
    fn shape_check_catches_corruption() {
        let mut p = Parameters::init(&cfg(Arch::Attention), 12).unwrap();
        assert!(p.check_shapes().is_ok());
        p.b_out = Matrix::zeros(1, 11);
        assert!(p.check_shapes().is_err());
    }
}
