//! Greedy against beam decoding on an untrained decoder.
//!
//! cargo run --example beam_decoding

use dualcap::decoder::{generate_beam, generate_greedy, Decoder, DecoderConfig, Vocabulary};
use dualcap::numerics::rng::{gaussian_matrix, stream};

fn main() -> dualcap::Result<()> {
    let vocab = Vocabulary::build(["a red bus parked near the road", "a small dog on the grass"]);
    let mut dec = Decoder::new(DecoderConfig::default(), vocab.len(), 64, 1)?;
    dec.randomize_zero_init(1);
    let v = gaussian_matrix(&mut stream(1, "patches"), 16, 64, 1.0);
    let prompt = vocab.encode("similar images show a red bus. this image shows");

    let greedy = generate_greedy(&dec, &prompt, Some(&v), 8)?;
    println!(
        "greedy   {:>8.4} per token: {}",
        greedy.normalized(),
        vocab.decode(greedy.caption_ids())
    );
    for beam in [1, 3, 5] {
        let g = generate_beam(&dec, &prompt, Some(&v), beam, 8)?;
        println!(
            "beam {beam}   {:>8.4} per token: {}",
            g.normalized(),
            vocab.decode(g.caption_ids())
        );
    }
    Ok(())
}
