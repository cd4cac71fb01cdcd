//! Feature fusion network.
//!
//! Patch features query scene-keyword embeddings through multi-head
//! cross-attention; the concatenated heads are projected back to the
//! vision width to form the visual prompt `Z`, which is added residually
//! to the patches. The simpler fusion baselines live here too.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{self, AttentionCache};
use crate::numerics::{gemm, rng, Matrix, Parameter, ParameterSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    CrossAttention,
    Sum,
    Concat,
    ConcatMlp,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::CrossAttention,
        FusionMode::Sum,
        FusionMode::Concat,
        FusionMode::ConcatMlp,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::CrossAttention => "cross_attention",
            FusionMode::Sum => "sum",
            FusionMode::Concat => "concat",
            FusionMode::ConcatMlp => "concat_mlp",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SfnConfig {
    pub heads: usize,
    pub d_k: usize,
    pub d_vision: usize,
    pub d_text: usize,
}

impl Default for SfnConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            d_k: 16,
            d_vision: 64,
            d_text: 48,
        }
    }
}

impl SfnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_k == 0 || self.d_vision == 0 || self.d_text == 0 {
            return Err(Error::Config("fusion dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Trainable fusion parameters for one of the fusion modes.
///
/// Cross-attention stores the per-head query/key/value projections as
/// column blocks of single matrices, followed by the output projection.
/// Every mode zero-initializes the projection that produces `Z`.
#[derive(Clone, Debug)]
pub struct Sfn {
    mode: FusionMode,
    cfg: SfnConfig,
    params: Vec<Parameter>,
    generation: u64,
}

/// Saved activations of one forward pass.
pub struct SfnCache {
    generation: u64,
    n_patches: usize,
    inner: CacheInner,
}

enum CacheInner {
    Empty,
    Cross {
        v: Matrix,
        e: Matrix,
        attn: AttentionCache,
        heads_out: Matrix,
    },
    Pooled {
        n_keywords: usize,
        pooled: Matrix,
    },
    Concat {
        x: Matrix,
        n_keywords: usize,
    },
    ConcatMlp {
        x: Matrix,
        n_keywords: usize,
        hidden: Matrix,
    },
}

/// Gradients of one backward pass. `params` follows the visiting order.
pub struct SfnGrads {
    pub params: Vec<Matrix>,
    pub d_v: Matrix,
    pub d_e: Matrix,
}

impl Sfn {
    pub fn new(mode: FusionMode, cfg: SfnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, &format!("sfn/{mode}"));
        let (dv, dt, hk) = (cfg.d_vision, cfg.d_text, cfg.heads * cfg.d_k);
        let g = |r: &mut rng::Rng, rows: usize, cols: usize| rng::gaussian_matrix(r, rows, cols, 1.0 / (rows as f64).sqrt());
        let params = match mode {
            FusionMode::CrossAttention => vec![
                Parameter::trainable("sfn.w_q", g(&mut r, dv, hk)),
                Parameter::trainable("sfn.w_k", g(&mut r, dt, hk)),
                Parameter::trainable("sfn.w_v", g(&mut r, dt, hk)),
                Parameter::trainable("sfn.w_o", Matrix::zeros(hk, dv)),
            ],
            FusionMode::Sum => vec![Parameter::trainable("sfn.w_s", Matrix::zeros(dt, dv))],
            FusionMode::Concat => vec![Parameter::trainable("sfn.w_c", Matrix::zeros(dv + dt, dv))],
            FusionMode::ConcatMlp => vec![
                Parameter::trainable("sfn.w_1", g(&mut r, dv + dt, dv)),
                Parameter::trainable("sfn.b_1", Matrix::zeros(1, dv)),
                Parameter::trainable("sfn.w_2", Matrix::zeros(dv, dv)),
            ],
        };
        Ok(Self {
            mode,
            cfg,
            params,
            generation: 0,
        })
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn config(&self) -> &SfnConfig {
        &self.cfg
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Replaces the zero-initialized output projections with small random
    /// values so every gradient path is active (used by gradient checks).
    pub fn randomize_zero_init(&mut self, seed: u64) {
        let mut r = rng::stream(seed, "sfn/randomize");
        self.visit_mut(&mut |p| {
            if p.value.data().iter().all(|x| *x == 0.0) {
                let (rows, cols) = p.value.shape();
                p.value = rng::gaussian_matrix(&mut r, rows, cols, 0.5 / (rows as f64).sqrt());
            }
        });
    }

    fn check_inputs(&self, v: &Matrix, e: &Matrix) -> Result<()> {
        if v.cols() != self.cfg.d_vision {
            return Err(Error::Dimension(format!(
                "patch features have {} columns, fusion expects {}",
                v.cols(),
                self.cfg.d_vision
            )));
        }
        if e.rows() > 0 && e.cols() != self.cfg.d_text {
            return Err(Error::Dimension(format!(
                "keyword embeddings have {} columns, fusion expects {}",
                e.cols(),
                self.cfg.d_text
            )));
        }
        Ok(())
    }

    fn w(&self, i: usize) -> &Matrix {
        &self.params[i].value
    }

    /// Computes the visual prompt `Z` (same shape as `v`). An empty keyword
    /// matrix yields `Z = 0`.
    pub fn forward(&self, v: &Matrix, e: &Matrix) -> Result<(Matrix, SfnCache)> {
        self.check_inputs(v, e)?;
        let n = v.rows();
        let cache = |inner| SfnCache {
            generation: self.generation,
            n_patches: n,
            inner,
        };
        if e.rows() == 0 {
            return Ok((Matrix::zeros(n, self.cfg.d_vision), cache(CacheInner::Empty)));
        }
        match self.mode {
            FusionMode::CrossAttention => {
                let q = gemm(v, false, self.w(0), false);
                let k = gemm(e, false, self.w(1), false);
                let val = gemm(e, false, self.w(2), false);
                let (heads_out, attn) = ops::attention(q, k, val, self.cfg.heads, false);
                let z = gemm(&heads_out, false, self.w(3), false);
                Ok((
                    z,
                    cache(CacheInner::Cross {
                        v: v.clone(),
                        e: e.clone(),
                        attn,
                        heads_out,
                    }),
                ))
            }
            FusionMode::Sum => {
                let pooled = e.mean_rows();
                let row = gemm(&pooled, false, self.w(0), false);
                let z = broadcast_row(&row, n);
                Ok((
                    z,
                    cache(CacheInner::Pooled {
                        n_keywords: e.rows(),
                        pooled,
                    }),
                ))
            }
            FusionMode::Concat => {
                let x = concat_pooled(v, e);
                let z = gemm(&x, false, self.w(0), false);
                Ok((
                    z,
                    cache(CacheInner::Concat {
                        x,
                        n_keywords: e.rows(),
                    }),
                ))
            }
            FusionMode::ConcatMlp => {
                let x = concat_pooled(v, e);
                let mut hidden = gemm(&x, false, self.w(0), false);
                ops::add_row_bias(&mut hidden, self.w(1));
                hidden.data_mut().iter_mut().for_each(|h| *h = h.max(0.0));
                let z = gemm(&hidden, false, self.w(2), false);
                Ok((
                    z,
                    cache(CacheInner::ConcatMlp {
                        x,
                        n_keywords: e.rows(),
                        hidden,
                    }),
                ))
            }
        }
    }

    /// Fused features `V' = V + Z`.
    pub fn fuse_features(&self, v: &Matrix, e: &Matrix) -> Result<Matrix> {
        let (z, _) = self.forward(v, e)?;
        fuse(v, &z)
    }

    pub fn backward(&self, cache: &SfnCache, d_z: &Matrix) -> Result<SfnGrads> {
        if cache.generation != self.generation {
            return Err(Error::Internal(
                "fusion cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        if d_z.shape() != (cache.n_patches, self.cfg.d_vision) {
            return Err(Error::Dimension(format!(
                "visual prompt gradient is {}x{}, expected {}x{}",
                d_z.rows(),
                d_z.cols(),
                cache.n_patches,
                self.cfg.d_vision
            )));
        }
        let (dv, dt) = (self.cfg.d_vision, self.cfg.d_text);
        let zeros_like = |s: &Self| s.params.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        match &cache.inner {
            CacheInner::Empty => Ok(SfnGrads {
                params: zeros_like(self),
                d_v: Matrix::zeros(cache.n_patches, dv),
                d_e: Matrix::zeros(0, dt),
            }),
            CacheInner::Cross { v, e, attn, heads_out } => {
                let d_wo = gemm(heads_out, true, d_z, false);
                let d_heads = gemm(d_z, false, self.w(3), true);
                let (dq, dk, dval) = ops::attention_backward(attn, &d_heads, self.cfg.heads);
                let d_wq = gemm(v, true, &dq, false);
                let d_wk = gemm(e, true, &dk, false);
                let d_wv = gemm(e, true, &dval, false);
                let d_v = gemm(&dq, false, self.w(0), true);
                let mut d_e = gemm(&dk, false, self.w(1), true);
                d_e.add_assign(&gemm(&dval, false, self.w(2), true));
                Ok(SfnGrads {
                    params: vec![d_wq, d_wk, d_wv, d_wo],
                    d_v,
                    d_e,
                })
            }
            CacheInner::Pooled { n_keywords, pooled } => {
                let col = ops::column_sums(d_z);
                let d_ws = gemm(pooled, true, &col, false);
                let d_pooled = gemm(&col, false, self.w(0), true);
                Ok(SfnGrads {
                    params: vec![d_ws],
                    d_v: Matrix::zeros(cache.n_patches, dv),
                    d_e: unpool(&d_pooled, *n_keywords),
                })
            }
            CacheInner::Concat { x, n_keywords } => {
                let d_wc = gemm(x, true, d_z, false);
                let d_x = gemm(d_z, false, self.w(0), true);
                let (d_v, d_e) = split_concat_grad(&d_x, dv, *n_keywords);
                Ok(SfnGrads {
                    params: vec![d_wc],
                    d_v,
                    d_e,
                })
            }
            CacheInner::ConcatMlp { x, n_keywords, hidden } => {
                let d_w2 = gemm(hidden, true, d_z, false);
                let mut d_h = gemm(d_z, false, self.w(2), true);
                for (g, h) in d_h.data_mut().iter_mut().zip(hidden.data()) {
                    if *h <= 0.0 {
                        *g = 0.0;
                    }
                }
                let d_w1 = gemm(x, true, &d_h, false);
                let d_b1 = ops::column_sums(&d_h);
                let d_x = gemm(&d_h, false, self.w(0), true);
                let (d_v, d_e) = split_concat_grad(&d_x, dv, *n_keywords);
                Ok(SfnGrads {
                    params: vec![d_w1, d_b1, d_w2],
                    d_v,
                    d_e,
                })
            }
        }
    }

    /// Per-head attention weights of a cross-attention forward pass.
    pub fn attention_weights(cache: &SfnCache) -> Option<&[Matrix]> {
        match &cache.inner {
            CacheInner::Cross { attn, .. } => Some(&attn.probs),
            _ => None,
        }
    }
}

impl ParameterSet for Sfn {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.params.iter().for_each(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.generation += 1;
        self.params.iter_mut().for_each(f)
    }
}

/// Residual fusion `V' = V + Z`.
pub fn fuse(v: &Matrix, z: &Matrix) -> Result<Matrix> {
    if v.shape() != z.shape() {
        return Err(Error::Dimension(format!(
            "cannot fuse {}x{} features with a {}x{} prompt",
            v.rows(),
            v.cols(),
            z.rows(),
            z.cols()
        )));
    }
    v.add(z)
}

fn broadcast_row(row: &Matrix, n: usize) -> Matrix {
    Matrix::from_fn(n, row.cols(), |_, c| row.get(0, c))
}

/// `[V_n ; mean(E)]` for every patch row.
fn concat_pooled(v: &Matrix, e: &Matrix) -> Matrix {
    let pooled = e.mean_rows();
    let dv = v.cols();
    Matrix::from_fn(v.rows(), dv + e.cols(), |r, c| if c < dv { v.get(r, c) } else { pooled.get(0, c - dv) })
}

fn unpool(d_pooled: &Matrix, n_keywords: usize) -> Matrix {
    let s = 1.0 / n_keywords as f64;
    Matrix::from_fn(n_keywords, d_pooled.cols(), |_, c| d_pooled.get(0, c) * s)
}

fn split_concat_grad(d_x: &Matrix, dv: usize, n_keywords: usize) -> (Matrix, Matrix) {
    let d_v = d_x.column_block(0, dv);
    let d_pooled = ops::column_sums(&d_x.column_block(dv, d_x.cols() - dv));
    (d_v, unpool(&d_pooled, n_keywords))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradcheck, Coords};

    fn cfg() -> SfnConfig {
        SfnConfig {
            heads: 2,
            d_k: 3,
            d_vision: 5,
            d_text: 4,
        }
    }

    fn inputs(seed: u64, n: usize, k: usize) -> (Matrix, Matrix) {
        let mut r = rng::seeded(seed);
        let v = rng::gaussian_matrix(&mut r, n, 5, 1.0);
        let e = rng::gaussian_matrix(&mut r, k, 4, 1.0);
        (v, e)
    }

    /// Weighted sum of `Z` with fixed weights, plus its gradient hook.
    fn probe(sfn: &mut Sfn, v: &Matrix, e: &Matrix, w: &Matrix) -> Result<f64> {
        let (z, cache) = sfn.forward(v, e)?;
        let loss = z.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        let g = sfn.backward(&cache, w)?;
        sfn.accumulate_grads(&g.params);
        Ok(loss)
    }

    #[test]
    fn zero_output_projection_gives_zero_prompt() {
        let sfn = Sfn::new(FusionMode::CrossAttention, cfg(), 1).unwrap();
        let (v, e) = inputs(2, 6, 3);
        let (z, _) = sfn.forward(&v, &e).unwrap();
        assert!(z.data().iter().all(|x| *x == 0.0));
        assert_eq!(sfn.fuse_features(&v, &e).unwrap(), v);
    }

    #[test]
    fn empty_keywords_give_zero_prompt() {
        for mode in FusionMode::ALL {
            let mut sfn = Sfn::new(mode, cfg(), 1).unwrap();
            sfn.randomize_zero_init(3);
            let (v, _) = inputs(2, 6, 1);
            let (z, cache) = sfn.forward(&v, &Matrix::zeros(0, 4)).unwrap();
            assert_eq!(z, Matrix::zeros(6, 5));
            let g = sfn.backward(&cache, &Matrix::from_fn(6, 5, |r, c| (r + c) as f64)).unwrap();
            assert!(g.params.iter().all(|m| m.frobenius_norm() == 0.0));
        }
    }

    #[test]
    fn single_keyword_gives_identical_rows() {
        let mut sfn = Sfn::new(FusionMode::CrossAttention, cfg(), 4).unwrap();
        sfn.randomize_zero_init(5);
        let (v, e) = inputs(6, 7, 1);
        let (z, cache) = sfn.forward(&v, &e).unwrap();
        for p in Sfn::attention_weights(&cache).unwrap() {
            assert!(p.data().iter().all(|x| *x == 1.0));
        }
        let expected = gemm(&gemm(&e, false, sfn.w(2), false), false, sfn.w(3), false);
        for r in 0..7 {
            for c in 0..5 {
                assert!((z.get(r, c) - expected.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut sfn = Sfn::new(FusionMode::CrossAttention, cfg(), 7).unwrap();
        sfn.randomize_zero_init(8);
        let (v, e) = inputs(9, 10, 6);
        let (_, cache) = sfn.forward(&v, &e).unwrap();
        for p in Sfn::attention_weights(&cache).unwrap() {
            for r in 0..p.rows() {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn keyword_permutation_invariance() {
        let mut sfn = Sfn::new(FusionMode::CrossAttention, cfg(), 10).unwrap();
        sfn.randomize_zero_init(11);
        let (v, e) = inputs(12, 8, 7);
        let (z, _) = sfn.forward(&v, &e).unwrap();
        let mut r = rng::seeded(13);
        for _ in 0..5 {
            let mut idx: Vec<usize> = (0..7).collect();
            rng::shuffle(&mut r, &mut idx);
            let (zp, _) = sfn.forward(&v, &e.select_rows(&idx)).unwrap();
            assert!(z.max_abs_diff(&zp) < 1e-12);
        }
    }

    #[test]
    fn residual_identity_is_exact() {
        // integer-valued entries below 2^50 keep every sum representable
        let mut r = rng::seeded(14);
        let mut int = || (rng::uniform(&mut r) * 2f64.powi(50)).floor() - 2f64.powi(49);
        let v = Matrix::from_fn(9, 5, |_, _| int());
        let z = Matrix::from_fn(9, 5, |_, _| int());
        let fused = fuse(&v, &z).unwrap();
        assert_eq!(fused.sub(&z).unwrap(), v);
        assert_eq!(fuse(&Matrix::zeros(9, 5), &z).unwrap(), z);
        assert!(fuse(&v, &Matrix::zeros(9, 4)).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        for mode in FusionMode::ALL {
            let mut sfn = Sfn::new(mode, cfg(), 15).unwrap();
            sfn.randomize_zero_init(16);
            let (v, e) = inputs(17, 4, 3);
            let (_, cache) = sfn.forward(&v, &e).unwrap();
            let g = sfn.backward(&cache, &Matrix::zeros(4, 5)).unwrap();
            assert!(g.params.iter().all(|m| m.frobenius_norm() == 0.0));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for mode in FusionMode::ALL {
            let mut sfn = Sfn::new(mode, cfg(), 18).unwrap();
            sfn.randomize_zero_init(19);
            let (v, e) = inputs(20, 6, 4);
            let w = rng::gaussian_matrix(&mut rng::seeded(21), 6, 5, 1.0);
            let rep = gradcheck(&mut sfn, 1e-5, Coords::All, |s| probe(s, &v, &e, &w)).unwrap();
            assert!(rep.max_rel_error < 1e-6, "{mode}: {rep:?}");
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let mut sfn = Sfn::new(FusionMode::CrossAttention, cfg(), 22).unwrap();
        sfn.randomize_zero_init(23);
        let (v, e) = inputs(24, 5, 3);
        let w = rng::gaussian_matrix(&mut rng::seeded(25), 5, 5, 1.0);
        let f = |e: &Matrix| {
            let (z, _) = sfn.forward(&v, e).unwrap();
            z.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = sfn.forward(&v, &e).unwrap();
        let d_e = sfn.backward(&cache, &w).unwrap().d_e;
        for i in 0..e.data().len() {
            let mut p = e.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = e.clone();
            m.data_mut()[i] -= 1e-6;
            let num = (f(&p) - f(&m)) / 2e-6;
            assert!((num - d_e.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn saturated_attention_with_dead_value_path() {
        // Keys far apart so every patch attends to keyword 0 only; keyword 0
        // is zero so its value row vanishes. Then the key and value
        // projections receive no gradient.
        let mut sfn = Sfn::new(FusionMode::CrossAttention, cfg(), 26).unwrap();
        sfn.randomize_zero_init(27);
        let v = Matrix::from_fn(3, 5, |_, c| if c == 0 { 1.0 } else { 0.0 });
        let e = Matrix::from_fn(2, 4, |r, _| if r == 0 { 0.0 } else { 1.0 });
        // Saturate: make keyword 1 score hugely negative for every query.
        let mut wq = Matrix::zeros(5, 6);
        for c in 0..6 {
            wq.set(0, c, 1.0);
        }
        let wk = Matrix::from_fn(4, 6, |_, _| -1e3);
        sfn.params[0].value = wq;
        sfn.params[1].value = wk;
        let w = Matrix::from_fn(3, 5, |r, c| (r * 5 + c) as f64 * 0.1);
        let (_, cache) = sfn.forward(&v, &e).unwrap();
        for p in Sfn::attention_weights(&cache).unwrap() {
            for r in 0..3 {
                assert_eq!(p.get(r, 0), 1.0);
            }
        }
        let g = sfn.backward(&cache, &w).unwrap();
        assert!(g.params[1].frobenius_norm() < 1e-12);
        assert!(g.params[2].frobenius_norm() < 1e-12);
        let rep = gradcheck(&mut sfn, 1e-5, Coords::All, |s| probe(s, &v, &e, &w)).unwrap();
        assert!(rep.max_rel_error < 1e-6);
    }

    #[test]
    fn stale_cache_is_internal_error() {
        let mut sfn = Sfn::new(FusionMode::CrossAttention, cfg(), 28).unwrap();
        let (v, e) = inputs(29, 3, 2);
        let (_, cache) = sfn.forward(&v, &e).unwrap();
        sfn.zero_grads();
        assert!(matches!(sfn.backward(&cache, &Matrix::zeros(3, 5)), Err(Error::Internal(_))));
    }

    #[test]
    fn alternative_modes_shape_and_zero_init() {
        let mut r = rng::seeded(30);
        for mode in [FusionMode::Sum, FusionMode::Concat, FusionMode::ConcatMlp] {
            let sfn = Sfn::new(mode, cfg(), 31).unwrap();
            for k in 1..=12 {
                let v = rng::gaussian_matrix(&mut r, 6, 5, 1.0);
                let e = rng::gaussian_matrix(&mut r, k, 4, 1.0);
                let fused = sfn.fuse_features(&v, &e).unwrap();
                assert_eq!(fused.shape(), (6, 5));
                assert_eq!(fused, v);
            }
        }
        assert!("mlp".parse::<FusionMode>().is_err());
        assert_eq!("concat_mlp".parse::<FusionMode>().unwrap(), FusionMode::ConcatMlp);
    }

    #[test]
    fn twelve_heads_of_width_32_are_accepted() {
        let c = SfnConfig {
            heads: 12,
            d_k: 32,
            d_vision: 64,
            d_text: 64,
        };
        let sfn = Sfn::new(FusionMode::CrossAttention, c, 1).unwrap();
        assert_eq!(sfn.param("sfn.w_q").unwrap().value.shape(), (64, 384));
        assert_eq!(sfn.param("sfn.w_o").unwrap().value.shape(), (384, 64));
    }

    #[test]
    fn wrong_dimensions_rejected() {
        let sfn = Sfn::new(FusionMode::CrossAttention, cfg(), 1).unwrap();
        let (v, e) = inputs(2, 3, 2);
        assert!(matches!(sfn.forward(&v.transpose(), &e), Err(Error::Dimension(_))));
        assert!(matches!(sfn.forward(&v, &e.transpose()), Err(Error::Dimension(_))));
    }
}
