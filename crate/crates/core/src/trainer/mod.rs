//! Training loop: retrieval, prompt and keyword preparation, fusion,
//! decoder cross-attention training, and best-validation-CIDEr selection.
//!
//! The toy decoder backbone has no pretrained weights to load, so each
//! training seed first fits it as a plain language model over retrieval
//! prompts and captions, then freezes it. Only the fusion network and the
//! decoder cross-attention train afterwards.

mod ablation;
mod config;
mod data;
mod model;

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ablation::{fusion_rows, run_ablation, component_rows, AblationRow, AblationTable, RowResult, MIN_SEEDS};
pub use config::{Toggles, TrainConfig};
pub use data::{Example, Retrieval, Workspace};
pub use model::{Captioner, Decoding};

use crate::checkpoint::{tensor_hash, Checkpoint};
use crate::decoder::{bare_prompt, build_prompt, Decoder, Sequence};
use crate::error::{Error, Result};
use crate::evalmetrics::{score, EvalBatch, Scores};
use crate::numerics::{adamw_step, rng, Matrix, OptimizerState, ParameterSet};
use crate::synthdata::Split;

/// Per-run training summary, stored next to the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub fingerprint: String,
    pub variant: String,
    pub epoch_losses: Vec<f64>,
    pub val_cider: Vec<f64>,
    pub val_bleu4: Vec<f64>,
    /// 1-based epoch whose weights were kept.
    pub selected_epoch: usize,
    pub steps: u64,
    pub step_losses: Vec<f64>,
    pub pretrain_losses: Vec<f64>,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("bad report {}: {e}", path.display())))
    }
}

pub struct TrainOutcome {
    pub model: Captioner,
    pub optimizer: OptimizerState,
    pub report: TrainReport,
}

impl TrainOutcome {
    pub fn checkpoint(&self, vocab: &[String]) -> Checkpoint {
        Checkpoint::capture(&self.model, Some(&self.optimizer), &self.report.fingerprint, vocab)
    }
}

/// One generated caption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionOutput {
    pub id: String,
    pub caption: String,
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub normalized: f64,
}

fn index_argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_workspace(cfg: &TrainConfig, ws: &Workspace) -> Result<usize> {
    cfg.validate()?;
    if ws.encoder.d_text() != cfg.d_text {
        return Err(Error::Config(format!(
            "config d_text {} differs from the text encoder's {}",
            cfg.d_text,
            ws.encoder.d_text()
        )));
    }
    let (_, d_vision, _) = ws
        .corpus
        .dims()
        .ok_or_else(|| Error::Data("corpus is empty".into()))?;
    Ok(d_vision)
}

/// Sums per-example gradients in index order.
fn sum_grads(parts: Vec<(f64, Vec<Matrix>)>) -> (f64, Vec<Matrix>) {
    let mut it = parts.into_iter();
    let (mut loss, mut acc) = it.next().expect("non-empty batch");
    for (l, g) in it {
        loss += l;
        for (a, b) in acc.iter_mut().zip(&g) {
            a.add_assign(b);
        }
    }
    (loss, acc)
}

/// Fits the decoder backbone as a language model over
/// `[prompt] [caption] EOS` sequences, then freezes it with only the
/// cross-attention left trainable. Returns the decoder and per-epoch mean
/// losses.
pub fn pretrain_backbone(ws: &Workspace, cfg: &TrainConfig, train: &[Retrieval]) -> Result<(Decoder, Vec<f64>)> {
    let d_vision = check_workspace(cfg, ws)?;
    let records = ws.records(Split::Train);
    let mut decoder = Decoder::new(cfg.decoder, ws.vocab.len(), d_vision, rng::derive_seed(cfg.seed, "decoder"))?;
    decoder.set_trainable(true, false);
    let prompts: Vec<Vec<usize>> = train
        .iter()
        .map(|r| build_prompt_quiet(ws, &r.i2t.texts().into_iter().take(cfg.k).collect::<Vec<_>>(), cfg))
        .collect();
    let bare = bare_prompt(&ws.vocab).ids;
    let mut opt = OptimizerState::new(cfg.pretrain_lr, 0.0);
    let mut losses = Vec::new();
    for epoch in 0..cfg.pretrain_epochs {
        let mut r = rng::stream(cfg.seed, &format!("pretrain/epoch{epoch}"));
        let mut order: Vec<usize> = (0..records.len()).collect();
        rng::shuffle(&mut r, &mut order);
        let picks: Vec<(usize, bool)> = order
            .iter()
            .map(|&i| {
                let refi = rng::uniform_index(&mut r, records[i].captions.len());
                (refi, rng::uniform(&mut r) < cfg.pretrain_bare_fraction)
            })
            .collect();
        let mut total = 0.0;
        for (chunk, pick) in order.chunks(cfg.batch_size).zip(picks.chunks(cfg.batch_size)) {
            let parts = chunk
                .par_iter()
                .zip(pick)
                .map(|(&i, &(refi, use_bare))| {
                    let mut toks = if use_bare { bare.clone() } else { prompts[i].clone() };
                    toks.extend(ws.vocab.encode(&records[i].captions[refi]));
                    toks.push(crate::decoder::EOS);
                    let (l, g) = decoder.loss_and_grads(&Sequence::language_model(&toks), None)?;
                    Ok((l, g.params))
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = sum_grads(parts);
            total += loss;
            let n = chunk.len() as f64;
            let mut it = grads.into_iter();
            decoder.visit_mut(&mut |p| {
                if !p.frozen {
                    p.grad = it.next().expect("one gradient per trainable tensor").scale(1.0 / n);
                }
            });
            adamw_step(&mut decoder, &mut opt)?;
        }
        let mean = total / records.len() as f64;
        log::info!("pretrain epoch {}: loss {mean:.4}", epoch + 1);
        losses.push(mean);
    }
    decoder.set_trainable(false, true);
    Ok((decoder, losses))
}

fn build_prompt_quiet(ws: &Workspace, captions: &[String], cfg: &TrainConfig) -> Vec<usize> {
    if captions.is_empty() {
        bare_prompt(&ws.vocab).ids
    } else {
        build_prompt(&ws.vocab, captions, cfg.prompt_budget()).ids
    }
}

/// Captions every example, in parallel with results in input order.
pub fn caption_all(model: &Captioner, examples: &[Example], decoding: Decoding, max_len: usize, ws: &Workspace) -> Result<Vec<CaptionOutput>> {
    examples
        .par_iter()
        .map(|ex| {
            let g = model.generate(ex, decoding, max_len)?;
            Ok(CaptionOutput {
                id: ex.id.clone(),
                caption: ws.vocab.decode(&g.tokens),
                normalized: g.normalized(),
                logprob: g.logprob,
                tokens: g.tokens,
            })
        })
        .collect()
}

/// Captions and scores a split against its references.
pub fn evaluate(model: &Captioner, examples: &[Example], decoding: Decoding, max_len: usize, ws: &Workspace) -> Result<(Scores, Vec<CaptionOutput>)> {
    let outs = caption_all(model, examples, decoding, max_len, ws)?;
    let mut batch = EvalBatch::default();
    for (o, ex) in outs.iter().zip(examples) {
        batch.push(&o.caption, &ex.references);
    }
    Ok((score(&batch)?, outs))
}

/// Full run: retrieval, backbone pretraining, then training.
pub fn train(cfg: &TrainConfig, ws: &Workspace) -> Result<TrainOutcome> {
    check_workspace(cfg, ws)?;
    let train_ret = ws.retrieve(Split::Train, cfg.k, cfg.m)?;
    let val_ret = ws.retrieve(Split::Val, cfg.k, cfg.m)?;
    let start = Instant::now();
    let (backbone, pre_losses) = pretrain_backbone(ws, cfg, &train_ret)?;
    let train_ex = ws.prepare(Split::Train, &train_ret, cfg)?;
    let val_ex = ws.prepare(Split::Val, &val_ret, cfg)?;
    let mut out = train_with(cfg, ws, &train_ex, &val_ex, backbone)?;
    out.report.pretrain_losses = pre_losses;
    out.report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Trains the fusion network and decoder cross-attention on top of a
/// frozen `backbone`, keeping the epoch with the best greedy validation
/// CIDEr (earliest on ties).
pub fn train_with(cfg: &TrainConfig, ws: &Workspace, train: &[Example], val: &[Example], backbone: Decoder) -> Result<TrainOutcome> {
    check_workspace(cfg, ws)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    let start = Instant::now();
    let mut backbone = backbone;
    backbone.set_trainable(false, true);
    let mut model = Captioner::with_decoder(cfg, backbone)?;
    let frozen_hash_before = tensor_hash(&model, true);
    let mut opt = OptimizerState::new(cfg.lr, cfg.weight_decay);
    let mut report = TrainReport {
        fingerprint: cfg.fingerprint(),
        variant: cfg.toggles.label(),
        epoch_losses: Vec::new(),
        val_cider: Vec::new(),
        val_bleu4: Vec::new(),
        selected_epoch: 0,
        steps: 0,
        step_losses: Vec::new(),
        pretrain_losses: Vec::new(),
        frozen_hash_before,
        frozen_hash_after: String::new(),
        wall_seconds: 0.0,
    };
    let mut best: Option<(f64, Captioner, OptimizerState)> = None;
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, &format!("train/epoch{epoch}"));
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng::shuffle(&mut r, &mut order);
        let refs: Vec<usize> = order
            .iter()
            .map(|&i| rng::uniform_index(&mut r, train[i].targets.len()))
            .collect();
        let mut total = 0.0;
        for (chunk, rchunk) in order.chunks(cfg.batch_size).zip(refs.chunks(cfg.batch_size)) {
            let parts = chunk
                .par_iter()
                .zip(rchunk)
                .map(|(&i, &refi)| model.example_loss_grads(&train[i], refi))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = sum_grads(parts);
            let n = chunk.len() as f64;
            if !loss.is_finite() {
                return Err(Error::Internal(format!("non-finite training loss at step {}", opt.step + 1)));
            }
            model.set_grads(grads, 1.0 / n)?;
            adamw_step(&mut model, &mut opt)?;
            report.step_losses.push(loss / n);
            total += loss;
        }
        let mean = total / train.len() as f64;
        let (val_scores, _) = evaluate(&model, val, Decoding::Greedy, cfg.max_gen_len, ws)?;
        log::info!(
            "{} epoch {}: loss {mean:.4}, val CIDEr {:.4}, BLEU4 {:.2}",
            report.variant,
            epoch + 1,
            val_scores.cider,
            val_scores.bleu4
        );
        report.epoch_losses.push(mean);
        report.val_cider.push(val_scores.cider);
        report.val_bleu4.push(val_scores.bleu4);
        if best.as_ref().map_or(true, |(c, _, _)| val_scores.cider > *c) {
            best = Some((val_scores.cider, model.clone(), opt.clone()));
        }
    }
    let (_, model, optimizer) = best.expect("at least one epoch");
    report.selected_epoch = index_argmax_first(&report.val_cider) + 1;
    report.steps = opt.step;
    report.frozen_hash_after = tensor_hash(&model, true);
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        model,
        optimizer,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::synthdata::GenConfig;

    fn tiny() -> (Workspace, TrainConfig) {
        let gen = GenConfig {
            train: 64,
            val: 8,
            test: 8,
            ..GenConfig::default()
        };
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            lr: 1e-3,
            pretrain_epochs: 1,
            decoder: DecoderConfig {
                d_model: 32,
                heads: 2,
                layers: 1,
                d_ff: 32,
                max_ctx: 80,
            },
            ..TrainConfig::default()
        };
        (Workspace::generate(5, &gen, 48).unwrap(), cfg)
    }

    #[test]
    fn run_is_deterministic_and_keeps_frozen_weights() {
        let (ws, cfg) = tiny();
        let a = train(&cfg, &ws).unwrap();
        let b = train(&cfg, &ws).unwrap();
        let vocab = ws.vocab.tokens();
        assert_eq!(a.checkpoint(vocab).to_bytes(), b.checkpoint(vocab).to_bytes());
        assert_eq!(a.report.frozen_hash_before, a.report.frozen_hash_after);
        assert_eq!(a.report.epoch_losses.len(), 2);
        assert!(a.report.step_losses.iter().all(|l| l.is_finite()));
        assert_eq!(a.report.steps, 8);
        let best = index_argmax_first(&a.report.val_cider) + 1;
        assert_eq!(a.report.selected_epoch, best);
    }

    #[test]
    fn selection_prefers_earliest_tie() {
        assert_eq!(index_argmax_first(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(index_argmax_first(&[0.0, 0.0]), 0);
    }

    #[test]
    fn mismatched_text_width_rejected() {
        let (ws, mut cfg) = tiny();
        cfg.d_text = 32;
        assert!(matches!(train(&cfg, &ws), Err(Error::Config(_))));
    }
}
