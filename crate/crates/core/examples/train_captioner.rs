//! Trains the full model on a small corpus and captions a few test images.
//!
//! cargo run --release --example train_captioner

use dualcap::synthdata::{GenConfig, Split};
use dualcap::trainer::{evaluate, train, Decoding, TrainConfig, Workspace};

fn main() -> dualcap::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let gen = GenConfig {
        train: 600,
        val: 50,
        test: 50,
        ..GenConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 4,
        lr: 1e-3,
        pretrain_epochs: 3,
        ..TrainConfig::default()
    };
    let ws = Workspace::generate(0, &gen, cfg.d_text)?;
    let outcome = train(&cfg, &ws)?;
    let test = ws.examples(Split::Test, &cfg)?;
    let (scores, outs) = evaluate(&outcome.model, &test, Decoding::Beam(cfg.beam), cfg.max_gen_len, &ws)?;
    println!("test BLEU@4 {:.2}  CIDEr-D {:.4}", scores.bleu4, scores.cider);
    for (ex, o) in test.iter().zip(&outs).take(5) {
        println!("{}\n  generated: {}\n  reference: {}", ex.id, o.caption, ex.references[0]);
    }
    Ok(())
}
