//! Saves a captioner checkpoint, reloads it, and compares tensor hashes.
//!
//! cargo run --example checkpoint_roundtrip

use dualcap::checkpoint::{tensor_hash, Checkpoint};
use dualcap::numerics::OptimizerState;
use dualcap::trainer::{Captioner, TrainConfig};

fn main() -> dualcap::Result<()> {
    let cfg = TrainConfig::default();
    let mut model = Captioner::new(&cfg, 50, 64)?;
    model.decoder.set_trainable(false, true);
    let vocab: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
    let opt = OptimizerState::new(cfg.lr, cfg.weight_decay);
    let ck = Checkpoint::capture(&model, Some(&opt), &cfg.fingerprint(), &vocab);

    let dir = std::env::temp_dir().join(format!("dualcap-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| dualcap::Error::io(&dir, e))?;
    let path = dir.join("model.ckpt");
    ck.save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    loaded.check_fingerprint(&cfg.fingerprint(), false)?;

    let mut fresh = Captioner::new(&TrainConfig { seed: 99, ..cfg.clone() }, 50, 64)?;
    fresh.decoder.set_trainable(false, true);
    loaded.restore_into(&mut fresh)?;
    println!("{} tensors, {} bytes", loaded.manifest.tensors.len(), ck.to_bytes().len());
    for frozen in [true, false] {
        println!(
            "{} hash matches: {}",
            if frozen { "frozen" } else { "trainable" },
            tensor_hash(&model, frozen) == tensor_hash(&fresh, frozen)
        );
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
