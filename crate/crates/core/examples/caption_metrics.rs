//! Scores candidate captions with BLEU@4 and CIDEr-D.
//!
//! cargo run --example caption_metrics

use dualcap::evalmetrics::{bleu4, cider_per_image, score, CiderStats, EvalBatch};

fn main() -> dualcap::Result<()> {
    let refs = |v: &[&'static str]| v.to_vec();
    let batch = EvalBatch::from_texts(&[
        ("a red bus parked near the road", refs(&["a red bus parked near the road", "there is a red bus near the road"])),
        ("a dog on the grass", refs(&["a small dog playing on the grass", "a small dog on the grass"])),
        ("a cat", refs(&["a black cat sitting on the bed", "a cat that is black on the bed"])),
    ]);
    let s = score(&batch)?;
    println!("BLEU@4 {:.4}  CIDEr-D {:.4}", s.bleu4, s.cider);
    let stats = CiderStats::from_references(&batch)?;
    for (item, c) in batch.items.iter().zip(cider_per_image(&batch, &stats)?) {
        println!("  {:<40} {c:.4}", item.candidate.join(" "));
    }

    let copies = EvalBatch::from_texts(&[("a red bus parked near the road", refs(&["a red bus parked near the road"]))]);
    println!("perfect copy BLEU@4 {:.4}", bleu4(&copies)?);
    Ok(())
}
