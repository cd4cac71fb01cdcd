use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::data::Example;
use crate::decoder::{generate_beam, generate_greedy, Decoder, Generation, Sequence};
use crate::error::{Error, Result};
use crate::numerics::{rng, Matrix, Parameter, ParameterSet};
use crate::sfn::{fuse, Sfn};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    Greedy,
    Beam(usize),
}

/// Optional fusion network in front of the decoder.
#[derive(Clone, Debug)]
pub struct Captioner {
    pub fusion: Option<Sfn>,
    pub decoder: Decoder,
}

impl ParameterSet for Captioner {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        if let Some(s) = &self.fusion {
            s.visit(f);
        }
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        if let Some(s) = &mut self.fusion {
            s.visit_mut(f);
        }
        self.decoder.visit_mut(f);
    }
}

impl Captioner {
    /// Fresh model for `cfg`; the decoder backbone is untrained.
    pub fn new(cfg: &TrainConfig, vocab_size: usize, d_vision: usize) -> Result<Self> {
        let decoder = Decoder::new(cfg.decoder, vocab_size, d_vision, rng::derive_seed(cfg.seed, "decoder"))?;
        Self::with_decoder(cfg, decoder)
    }

    /// Wraps an existing decoder, adding a fusion network if `cfg` asks
    /// for one.
    pub fn with_decoder(cfg: &TrainConfig, decoder: Decoder) -> Result<Self> {
        let fusion = if cfg.toggles.use_sfn {
            let sfn_cfg = cfg.sfn_config(decoder.d_vision());
            Some(Sfn::new(cfg.fusion_mode, sfn_cfg, rng::derive_seed(cfg.seed, "sfn"))?)
        } else {
            None
        };
        Ok(Self { fusion, decoder })
    }

    /// `V' = V + Z`, or `V` without a fusion network.
    pub fn fused(&self, patches: &Matrix, keyword_emb: &Matrix) -> Result<Matrix> {
        match &self.fusion {
            Some(s) => s.fuse_features(patches, keyword_emb),
            None => Ok(patches.clone()),
        }
    }

    /// Teacher-forced loss on one target and the gradients of every
    /// non-frozen parameter in visiting order.
    pub fn loss_and_grads(&self, patches: &Matrix, keyword_emb: &Matrix, seq: &Sequence) -> Result<(f64, Vec<Matrix>)> {
        match &self.fusion {
            None => {
                let (loss, g) = self.decoder.loss_and_grads(seq, Some(patches))?;
                Ok((loss, g.params))
            }
            Some(s) => {
                let (z, cache) = s.forward(patches, keyword_emb)?;
                let vprime = fuse(patches, &z)?;
                let (loss, g) = self.decoder.loss_and_grads(seq, Some(&vprime))?;
                let d_v = g
                    .d_vprime
                    .ok_or_else(|| Error::Internal("decoder returned no feature gradient".into()))?;
                let mut sg = s.backward(&cache, &d_v)?;
                let mut out = Vec::new();
                let mut frozen = Vec::new();
                s.visit(&mut |p| frozen.push(p.frozen));
                for (f, m) in frozen.into_iter().zip(sg.params.drain(..)) {
                    if !f {
                        out.push(m);
                    }
                }
                out.extend(g.params);
                Ok((loss, out))
            }
        }
    }

    /// Loss of one example against one of its references.
    pub fn example_loss_grads(&self, ex: &Example, reference: usize) -> Result<(f64, Vec<Matrix>)> {
        let target = ex
            .targets
            .get(reference)
            .ok_or_else(|| Error::Input(format!("{} has no reference {reference}", ex.id)))?;
        let seq = Sequence::captioning(&ex.prompt.ids, target)?;
        self.loss_and_grads(&ex.patches, &ex.keyword_emb, &seq)
    }

    pub fn generate(&self, ex: &Example, decoding: Decoding, max_len: usize) -> Result<Generation> {
        let v = self.fused(&ex.patches, &ex.keyword_emb)?;
        match decoding {
            Decoding::Greedy => generate_greedy(&self.decoder, &ex.prompt.ids, Some(&v), max_len),
            Decoding::Beam(b) => generate_beam(&self.decoder, &ex.prompt.ids, Some(&v), b, max_len),
        }
    }

    /// Writes summed per-example gradients, scaled by `scale`, into the
    /// non-frozen parameters' grad buffers.
    pub fn set_grads(&mut self, grads: Vec<Matrix>, scale: f64) -> Result<()> {
        let mut it = grads.into_iter();
        let mut err = None;
        self.visit_mut(&mut |p| {
            if p.frozen || err.is_some() {
                return;
            }
            match it.next() {
                Some(g) if g.shape() == p.value.shape() => p.grad = g.scale(scale),
                _ => err = Some(Error::Internal(format!("gradient for {} missing or misshapen", p.name))),
            }
        });
        if err.is_none() && it.next().is_some() {
            err = Some(Error::Internal("more gradients than trainable parameters".into()));
        }
        err.map_or(Ok(()), Err)
    }
}
