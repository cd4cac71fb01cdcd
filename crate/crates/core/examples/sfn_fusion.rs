//! Runs every fusion mode on random patches and keyword embeddings, and
//! shows that the cross-attention prompt ignores keyword order.
//!
//! cargo run --example sfn_fusion

use dualcap::numerics::rng::{gaussian_matrix, stream};
use dualcap::sfn::{FusionMode, Sfn, SfnConfig};

fn main() -> dualcap::Result<()> {
    let cfg = SfnConfig::default();
    let mut r = stream(5, "example");
    let v = gaussian_matrix(&mut r, 16, cfg.d_vision, 1.0);
    let e = gaussian_matrix(&mut r, 6, cfg.d_text, 1.0);
    let reversed = e.select_rows(&[5, 4, 3, 2, 1, 0]);

    for mode in [FusionMode::CrossAttention, FusionMode::Sum, FusionMode::Concat, FusionMode::ConcatMlp] {
        let mut sfn = Sfn::new(mode, cfg, 11)?;
        let (z0, _) = sfn.forward(&v, &e)?;
        sfn.randomize_zero_init(11);
        let (z, cache) = sfn.forward(&v, &e)?;
        let (zr, _) = sfn.forward(&v, &reversed)?;
        println!(
            "{:<16} |Z| at init {:.1e}, after randomizing {:.3}, order change {:.1e}",
            mode.as_str(),
            z0.frobenius_norm(),
            z.frobenius_norm(),
            z.max_abs_diff(&zr)
        );
        if let Some(heads) = Sfn::attention_weights(&cache) {
            let row: Vec<String> = heads[0].row(0).iter().map(|w| format!("{w:.3}")).collect();
            println!("{:<16} head 0, patch 0 attends: {}", "", row.join(" "));
        }
    }
    Ok(())
}
