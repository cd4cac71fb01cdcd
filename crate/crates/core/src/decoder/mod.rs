//! Tokenizer, hard text prompt, and a small pre-LN transformer decoder.
//!
//! Each block runs causal self-attention, cross-attention over the fused
//! patch features `V'`, then a GELU MLP. The output head is tied to the
//! token embeddings. Only the cross-attention projections are trainable
//! once the backbone is frozen.

mod generate;
pub mod prompt;
pub mod vocab;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use generate::{generate_beam, generate_greedy, Generation, StepModel};
pub use prompt::{bare_prompt, build_prompt, TextPrompt, PROMPT_HEAD, PROMPT_TAIL};
pub use vocab::{detokenize, tokenize, Vocabulary, BOS, EOS, PAD, UNK};

use crate::error::{Error, Result};
use crate::numerics::ops::{self, AttentionCache, LayerNormCache};
use crate::numerics::{cross_entropy, gemm, rng, softmax_in_place, Matrix, Parameter, ParameterSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub max_ctx: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 2,
            d_ff: 128,
            max_ctx: 96,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.layers == 0 || self.d_ff == 0 || self.max_ctx < 2 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

const TOK: usize = 0;
const POS: usize = 1;
const PER_BLOCK: usize = 12;
const W_QKV: usize = 0;
const B_QKV: usize = 1;
const W_O: usize = 2;
const B_O: usize = 3;
const X_Q: usize = 4;
const X_K: usize = 5;
const X_V: usize = 6;
const X_O: usize = 7;
const W_1: usize = 8;
const B_1: usize = 9;
const W_2: usize = 10;
const B_2: usize = 11;

fn slot(layer: usize, which: usize) -> usize {
    2 + layer * PER_BLOCK + which
}

fn is_cross(idx: usize) -> bool {
    idx >= 2 && (X_Q..=X_O).contains(&((idx - 2) % PER_BLOCK))
}

#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: DecoderConfig,
    d_vision: usize,
    params: Vec<Parameter>,
    generation: u64,
}

struct BlockCache {
    ln1: LayerNormCache,
    h1: Matrix,
    attn: AttentionCache,
    a: Matrix,
    ln2: LayerNormCache,
    cross: Option<(Matrix, AttentionCache, Matrix)>,
    ln3: LayerNormCache,
    h3: Matrix,
    u: Matrix,
    g: Matrix,
}

/// Saved activations of a teacher-forced forward pass.
pub struct DecoderCache {
    generation: u64,
    tokens: Vec<usize>,
    rows: Vec<usize>,
    vprime: Option<Matrix>,
    blocks: Vec<BlockCache>,
    lnf: LayerNormCache,
    hf: Matrix,
}

/// Gradients of one backward pass: one matrix per non-frozen parameter in
/// visiting order, and the gradient with respect to `V'`.
pub struct DecoderGrads {
    pub params: Vec<Matrix>,
    pub d_vprime: Option<Matrix>,
}

/// Teacher-forcing layout of `[BOS] prompt target`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub inputs: Vec<usize>,
    pub rows: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Sequence {
    /// Loss rows cover the target only; PAD labels are skipped.
    pub fn captioning(prompt: &[usize], target: &[usize]) -> Result<Self> {
        if target.is_empty() {
            return Err(Error::Input("target caption is empty".into()));
        }
        let mut full = Vec::with_capacity(prompt.len() + target.len() + 1);
        full.push(BOS);
        full.extend_from_slice(prompt);
        full.extend_from_slice(target);
        Ok(Self::with_first_row(full, prompt.len()))
    }

    /// Loss rows cover every position (language-model pretraining).
    pub fn language_model(tokens: &[usize]) -> Self {
        let mut full = Vec::with_capacity(tokens.len() + 1);
        full.push(BOS);
        full.extend_from_slice(tokens);
        Self::with_first_row(full, 0)
    }

    fn with_first_row(full: Vec<usize>, first: usize) -> Self {
        let inputs = full[..full.len() - 1].to_vec();
        let (rows, labels) = (first..inputs.len())
            .filter(|&j| full[j + 1] != PAD)
            .map(|j| (j, full[j + 1]))
            .unzip();
        Self { inputs, rows, labels }
    }
}

impl Decoder {
    pub fn new(cfg: DecoderConfig, vocab_size: usize, d_vision: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if vocab_size <= UNK || d_vision == 0 {
            return Err(Error::Config("decoder needs a vocabulary and a positive vision width".into()));
        }
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let mut r = rng::stream(seed, "decoder");
        let g = |r: &mut rng::Rng, rows: usize, cols: usize| rng::gaussian_matrix(r, rows, cols, 1.0 / (rows as f64).sqrt());
        let mut params = vec![
            Parameter::frozen("decoder.tok_emb", rng::gaussian_matrix(&mut r, vocab_size, d, 0.1)),
            Parameter::frozen("decoder.pos_emb", rng::gaussian_matrix(&mut r, cfg.max_ctx, d, 0.1)),
        ];
        for l in 0..cfg.layers {
            let n = |s: &str| format!("decoder.block{l}.{s}");
            params.extend([
                Parameter::frozen(n("attn.w_qkv"), g(&mut r, d, 3 * d)),
                Parameter::frozen(n("attn.b_qkv"), Matrix::zeros(1, 3 * d)),
                Parameter::frozen(n("attn.w_o"), g(&mut r, d, d)),
                Parameter::frozen(n("attn.b_o"), Matrix::zeros(1, d)),
                Parameter::trainable(n("cross.w_q"), g(&mut r, d, d)),
                Parameter::trainable(n("cross.w_k"), g(&mut r, d_vision, d)),
                Parameter::trainable(n("cross.w_v"), g(&mut r, d_vision, d)),
                Parameter::trainable(n("cross.w_o"), Matrix::zeros(d, d)),
                Parameter::frozen(n("mlp.w_1"), g(&mut r, d, f)),
                Parameter::frozen(n("mlp.b_1"), Matrix::zeros(1, f)),
                Parameter::frozen(n("mlp.w_2"), g(&mut r, f, d)),
                Parameter::frozen(n("mlp.b_2"), Matrix::zeros(1, d)),
            ]);
        }
        Ok(Self {
            cfg,
            d_vision,
            params,
            generation: 0,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.params[TOK].value.rows()
    }

    pub fn d_vision(&self) -> usize {
        self.d_vision
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.generation += 1;
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Sets which side trains: the backbone (embeddings, self-attention,
    /// MLPs) or the cross-attention layers.
    pub fn set_trainable(&mut self, backbone: bool, cross: bool) {
        self.generation += 1;
        for (i, p) in self.params.iter_mut().enumerate() {
            p.frozen = if is_cross(i) { !cross } else { !backbone };
        }
    }

    /// Replaces zero-initialized cross-attention output projections with
    /// small random values so every gradient path is active.
    pub fn randomize_zero_init(&mut self, seed: u64) {
        let mut r = rng::stream(seed, "decoder/randomize");
        for l in 0..self.cfg.layers {
            let p = &mut self.params[slot(l, X_O)];
            if p.value.data().iter().all(|x| *x == 0.0) {
                let (rows, cols) = p.value.shape();
                p.value = rng::gaussian_matrix(&mut r, rows, cols, 0.5 / (rows as f64).sqrt());
            }
        }
        self.generation += 1;
    }

    fn w(&self, idx: usize) -> &Matrix {
        &self.params[idx].value
    }

    fn check(&self, tokens: &[usize], vprime: Option<&Matrix>) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_ctx {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds the context limit of {}",
                tokens.len(),
                self.cfg.max_ctx
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::Input(format!("token id {t} outside vocabulary of {}", self.vocab_size())));
        }
        if let Some(v) = vprime {
            if v.cols() != self.d_vision || v.rows() == 0 {
                return Err(Error::Dimension(format!(
                    "fused features are {}x{}, decoder expects N x {}",
                    v.rows(),
                    v.cols(),
                    self.d_vision
                )));
            }
        }
        Ok(())
    }

    /// Logits for every position of `tokens`.
    pub fn logits(&self, tokens: &[usize], vprime: Option<&Matrix>) -> Result<Matrix> {
        let rows: Vec<usize> = (0..tokens.len()).collect();
        Ok(self.forward(tokens, vprime, &rows)?.0)
    }

    /// Teacher-forced forward pass returning logits at `rows` only.
    /// Without `vprime` the cross-attention sublayers are skipped, which
    /// equals a zero cross-attention contribution.
    pub fn forward(&self, tokens: &[usize], vprime: Option<&Matrix>, rows: &[usize]) -> Result<(Matrix, DecoderCache)> {
        self.check(tokens, vprime)?;
        if let Some(&r) = rows.iter().find(|&&r| r >= tokens.len()) {
            return Err(Error::Input(format!("logit row {r} beyond sequence of {}", tokens.len())));
        }
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (t, &tok) in tokens.iter().enumerate() {
            let e = self.w(TOK).row(tok);
            let p = self.w(POS).row(t);
            for ((o, a), b) in x.row_mut(t).iter_mut().zip(e).zip(p) {
                *o = a + b;
            }
        }
        let mut blocks = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let (h1, ln1) = ops::layer_norm(&x);
            let mut qkv = gemm(&h1, false, self.w(slot(l, W_QKV)), false);
            ops::add_row_bias(&mut qkv, self.w(slot(l, B_QKV)));
            let (a, attn) = ops::attention(
                qkv.column_block(0, d),
                qkv.column_block(d, d),
                qkv.column_block(2 * d, d),
                heads,
                true,
            );
            let mut o = gemm(&a, false, self.w(slot(l, W_O)), false);
            ops::add_row_bias(&mut o, self.w(slot(l, B_O)));
            x.add_assign(&o);

            let (h2, ln2) = ops::layer_norm(&x);
            let cross = match vprime {
                Some(v) => {
                    let cq = gemm(&h2, false, self.w(slot(l, X_Q)), false);
                    let ck = gemm(v, false, self.w(slot(l, X_K)), false);
                    let cv = gemm(v, false, self.w(slot(l, X_V)), false);
                    let (ca, cc) = ops::attention(cq, ck, cv, heads, false);
                    x.add_assign(&gemm(&ca, false, self.w(slot(l, X_O)), false));
                    Some((h2, cc, ca))
                }
                None => None,
            };

            let (h3, ln3) = ops::layer_norm(&x);
            let mut u = gemm(&h3, false, self.w(slot(l, W_1)), false);
            ops::add_row_bias(&mut u, self.w(slot(l, B_1)));
            let mut g = u.clone();
            g.data_mut().iter_mut().for_each(|v| *v = ops::gelu(*v));
            let mut m = gemm(&g, false, self.w(slot(l, W_2)), false);
            ops::add_row_bias(&mut m, self.w(slot(l, B_2)));
            x.add_assign(&m);
            blocks.push(BlockCache {
                ln1,
                h1,
                attn,
                a,
                ln2,
                cross,
                ln3,
                h3,
                u,
                g,
            });
        }
        let (hf, lnf) = ops::layer_norm(&x.select_rows(rows));
        let logits = gemm(&hf, false, self.w(TOK), true);
        Ok((
            logits,
            DecoderCache {
                generation: self.generation,
                tokens: tokens.to_vec(),
                rows: rows.to_vec(),
                vprime: vprime.cloned(),
                blocks,
                lnf,
                hf,
            },
        ))
    }

    /// Backpropagates `d_logits` (one row per cached logit row). Weight
    /// gradients are produced only for non-frozen parameters, and the
    /// pass stops early once nothing below is trainable.
    pub fn backward(&self, cache: &DecoderCache, d_logits: &Matrix) -> Result<DecoderGrads> {
        if cache.generation != self.generation {
            return Err(Error::Internal(
                "decoder cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        if d_logits.shape() != (cache.rows.len(), self.vocab_size()) {
            return Err(Error::Dimension("logit gradient shape does not match the cache".into()));
        }
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let trainable: Vec<bool> = self.params.iter().map(|p| !p.frozen).collect();
        let lowest = trainable.iter().position(|&t| t);
        let mut grads: Vec<Option<Matrix>> = vec![None; self.params.len()];
        let mut add = |i: usize, m: Matrix| {
            if trainable[i] {
                match &mut grads[i] {
                    Some(g) => g.add_assign(&m),
                    None => grads[i] = Some(m),
                }
            }
        };

        let d_hf = gemm(d_logits, false, self.w(TOK), false);
        if trainable[TOK] {
            add(TOK, gemm(d_logits, true, &cache.hf, false));
        }
        let d_sel = ops::layer_norm_backward(&cache.lnf, &d_hf);
        let mut dx = Matrix::zeros(cache.tokens.len(), d);
        for (i, &r) in cache.rows.iter().enumerate() {
            for (o, v) in dx.row_mut(r).iter_mut().zip(d_sel.row(i)) {
                *o += v;
            }
        }
        let mut d_vprime = cache.vprime.as_ref().map(|v| Matrix::zeros(v.rows(), v.cols()));
        for l in (0..self.cfg.layers).rev() {
            let b = &cache.blocks[l];
            if lowest.is_none_or(|lo| lo > slot(l, B_2)) {
                break;
            }
            // MLP
            if trainable[slot(l, W_2)] {
                add(slot(l, W_2), gemm(&b.g, true, &dx, false));
                add(slot(l, B_2), ops::column_sums(&dx));
            }
            let mut du = gemm(&dx, false, self.w(slot(l, W_2)), true);
            for (g, u) in du.data_mut().iter_mut().zip(b.u.data()) {
                *g *= ops::gelu_grad(*u);
            }
            if trainable[slot(l, W_1)] {
                add(slot(l, W_1), gemm(&b.h3, true, &du, false));
                add(slot(l, B_1), ops::column_sums(&du));
            }
            let dh3 = gemm(&du, false, self.w(slot(l, W_1)), true);
            dx.add_assign(&ops::layer_norm_backward(&b.ln3, &dh3));

            // cross-attention
            if let (Some((h2, cc, ca)), Some(v)) = (&b.cross, &cache.vprime) {
                add(slot(l, X_O), gemm(ca, true, &dx, false));
                let dca = gemm(&dx, false, self.w(slot(l, X_O)), true);
                let (dcq, dck, dcv) = ops::attention_backward(cc, &dca, heads);
                add(slot(l, X_Q), gemm(h2, true, &dcq, false));
                add(slot(l, X_K), gemm(v, true, &dck, false));
                add(slot(l, X_V), gemm(v, true, &dcv, false));
                if let Some(dv) = &mut d_vprime {
                    dv.add_assign(&gemm(&dck, false, self.w(slot(l, X_K)), true));
                    dv.add_assign(&gemm(&dcv, false, self.w(slot(l, X_V)), true));
                }
                if lowest.is_none_or(|lo| lo >= slot(l, X_Q)) {
                    break;
                }
                let dh2 = gemm(&dcq, false, self.w(slot(l, X_Q)), true);
                dx.add_assign(&ops::layer_norm_backward(&b.ln2, &dh2));
            } else if lowest.is_none_or(|lo| lo >= slot(l, X_Q)) {
                break;
            }

            // causal self-attention
            if trainable[slot(l, W_O)] {
                add(slot(l, W_O), gemm(&b.a, true, &dx, false));
                add(slot(l, B_O), ops::column_sums(&dx));
            }
            let da = gemm(&dx, false, self.w(slot(l, W_O)), true);
            let (dq, dk, dv) = ops::attention_backward(&b.attn, &da, heads);
            let mut dqkv = Matrix::zeros(dq.rows(), 3 * d);
            dqkv.add_to_column_block(0, &dq);
            dqkv.add_to_column_block(d, &dk);
            dqkv.add_to_column_block(2 * d, &dv);
            if trainable[slot(l, W_QKV)] {
                add(slot(l, W_QKV), gemm(&b.h1, true, &dqkv, false));
                add(slot(l, B_QKV), ops::column_sums(&dqkv));
            }
            let dh1 = gemm(&dqkv, false, self.w(slot(l, W_QKV)), true);
            dx.add_assign(&ops::layer_norm_backward(&b.ln1, &dh1));
        }
        if trainable[TOK] || trainable[POS] {
            let mut dtok = Matrix::zeros(self.vocab_size(), d);
            let mut dpos = Matrix::zeros(self.cfg.max_ctx, d);
            for (t, &tok) in cache.tokens.iter().enumerate() {
                for (o, v) in dtok.row_mut(tok).iter_mut().zip(dx.row(t)) {
                    *o += v;
                }
                for (o, v) in dpos.row_mut(t).iter_mut().zip(dx.row(t)) {
                    *o += v;
                }
            }
            add(TOK, dtok);
            add(POS, dpos);
        }
        let params = grads
            .into_iter()
            .enumerate()
            .filter(|(i, _)| trainable[*i])
            .map(|(i, g)| g.unwrap_or_else(|| Matrix::zeros(self.params[i].value.rows(), self.params[i].value.cols())))
            .collect();
        Ok(DecoderGrads { params, d_vprime })
    }

    /// Mean token NLL of `seq` and its gradients.
    pub fn loss_and_grads(&self, seq: &Sequence, vprime: Option<&Matrix>) -> Result<(f64, DecoderGrads)> {
        let (logits, cache) = self.forward(&seq.inputs, vprime, &seq.rows)?;
        let (loss, d_logits) = cross_entropy(&logits, &seq.labels)?;
        Ok((loss, self.backward(&cache, &d_logits)?))
    }

    /// Mean NLL over target positions of `[BOS] prompt target`.
    pub fn loss(&self, prompt: &[usize], target: &[usize], vprime: Option<&Matrix>) -> Result<f64> {
        let seq = Sequence::captioning(prompt, target)?;
        let (logits, _) = self.forward(&seq.inputs, vprime, &seq.rows)?;
        Ok(cross_entropy(&logits, &seq.labels)?.0)
    }

    fn row_attention(q: &[f64], keys: &[f64], values: &[f64], n: usize, heads: usize, out: &mut [f64]) {
        let d = q.len();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut s = vec![0.0; n];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for (t, st) in s.iter_mut().enumerate() {
                let k = &keys[t * d..(t + 1) * d];
                *st = q[cols.clone()].iter().zip(&k[cols.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(&mut s);
            for (t, p) in s.iter().enumerate() {
                let v = &values[t * d..(t + 1) * d];
                for (o, x) in out[cols.clone()].iter_mut().zip(&v[cols.clone()]) {
                    *o += p * x;
                }
            }
        }
    }

    /// Feeds one token through the incremental decoding path and returns
    /// the next-token logits.
    fn step_logits(&self, state: &mut DecodeState, token: usize) -> Result<Vec<f64>> {
        if state.pos >= self.cfg.max_ctx {
            return Err(Error::Input(format!("decoding exceeds the context limit of {}", self.cfg.max_ctx)));
        }
        if token >= self.vocab_size() {
            return Err(Error::Input(format!("token id {token} outside vocabulary")));
        }
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let mut x = Matrix::zeros(1, d);
        for ((o, a), b) in x.row_mut(0).iter_mut().zip(self.w(TOK).row(token)).zip(self.w(POS).row(state.pos)) {
            *o = a + b;
        }
        let n = state.pos + 1;
        for l in 0..self.cfg.layers {
            let (h1, _) = ops::layer_norm(&x);
            let mut qkv = gemm(&h1, false, self.w(slot(l, W_QKV)), false);
            ops::add_row_bias(&mut qkv, self.w(slot(l, B_QKV)));
            let row = qkv.row(0);
            state.keys[l].extend_from_slice(&row[d..2 * d]);
            state.values[l].extend_from_slice(&row[2 * d..]);
            let mut a = Matrix::zeros(1, d);
            Self::row_attention(&row[..d], &state.keys[l], &state.values[l], n, heads, a.row_mut(0));
            let mut o = gemm(&a, false, self.w(slot(l, W_O)), false);
            ops::add_row_bias(&mut o, self.w(slot(l, B_O)));
            x.add_assign(&o);

            if let Some(cross) = &state.cross {
                let (ck, cv) = &cross[l];
                let (h2, _) = ops::layer_norm(&x);
                let cq = gemm(&h2, false, self.w(slot(l, X_Q)), false);
                let mut ca = Matrix::zeros(1, d);
                Self::row_attention(cq.row(0), ck.data(), cv.data(), ck.rows(), heads, ca.row_mut(0));
                x.add_assign(&gemm(&ca, false, self.w(slot(l, X_O)), false));
            }

            let (h3, _) = ops::layer_norm(&x);
            let mut u = gemm(&h3, false, self.w(slot(l, W_1)), false);
            ops::add_row_bias(&mut u, self.w(slot(l, B_1)));
            u.data_mut().iter_mut().for_each(|v| *v = ops::gelu(*v));
            let mut m = gemm(&u, false, self.w(slot(l, W_2)), false);
            ops::add_row_bias(&mut m, self.w(slot(l, B_2)));
            x.add_assign(&m);
        }
        state.pos += 1;
        let (hf, _) = ops::layer_norm(&x);
        Ok(gemm(&hf, false, self.w(TOK), true).into_data())
    }
}

impl ParameterSet for Decoder {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.params.iter().for_each(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.generation += 1;
        self.params.iter_mut().for_each(f)
    }
}

/// Key/value caches of an in-progress decode.
#[derive(Clone, Debug)]
pub struct DecodeState {
    pos: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    cross: Option<Arc<Vec<(Matrix, Matrix)>>>,
}

impl DecodeState {
    pub fn position(&self) -> usize {
        self.pos
    }
}

fn log_softmax(mut logits: Vec<f64>) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter_mut().for_each(|x| *x -= lse);
    logits
}

impl StepModel for Decoder {
    type State = DecodeState;

    fn start(&self, prompt: &[usize], vprime: Option<&Matrix>) -> Result<(DecodeState, Vec<f64>)> {
        self.check(&[BOS], vprime)?;
        let cross = vprime.map(|v| {
            Arc::new(
                (0..self.cfg.layers)
                    .map(|l| {
                        (
                            gemm(v, false, self.w(slot(l, X_K)), false),
                            gemm(v, false, self.w(slot(l, X_V)), false),
                        )
                    })
                    .collect(),
            )
        });
        let mut state = DecodeState {
            pos: 0,
            keys: vec![Vec::new(); self.cfg.layers],
            values: vec![Vec::new(); self.cfg.layers],
            cross,
        };
        let mut logits = self.step_logits(&mut state, BOS)?;
        for &t in prompt {
            logits = self.step_logits(&mut state, t)?;
        }
        Ok((state, log_softmax(logits)))
    }

    fn advance(&self, state: &mut DecodeState, token: usize) -> Result<Vec<f64>> {
        Ok(log_softmax(self.step_logits(state, token)?))
    }

    fn remaining(&self, state: &DecodeState) -> usize {
        self.cfg.max_ctx.saturating_sub(state.pos)
    }
}
