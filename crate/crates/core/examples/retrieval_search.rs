//! Builds a datastore from the train split and runs both retrieval
//! streams for one test image.
//!
//! cargo run --example retrieval_search

use dualcap::encoders::TextEncoder;
use dualcap::keywords::Lexicon;
use dualcap::retrieval::FeatureDatastore;
use dualcap::synthdata::{gen_corpus_in, GenConfig, Split, World};

fn main() -> dualcap::Result<()> {
    let cfg = GenConfig {
        train: 500,
        val: 10,
        test: 10,
        ..GenConfig::default()
    };
    let world = World::new(3, &cfg)?;
    let corpus = gen_corpus_in(&world, 3)?;
    let encoder = TextEncoder::new(3, 48, &world, &Lexicon::builtin())?;
    let store = FeatureDatastore::from_corpus(&corpus, &encoder)?;
    println!(
        "datastore: {} images, {} captions, dim {}",
        store.images().len(),
        store.captions().len(),
        store.dim()
    );

    let query = corpus.split(Split::Test).next().expect("test split is not empty");
    println!("query {}: {}", query.id, query.captions[0]);
    println!("image to text, k = 4");
    for c in &store.retrieve_i2t(&query.global_feature, 4, None)?.0 {
        println!("  {:.4} {:<16} {}", c.score, c.caption_id, c.text);
    }
    println!("image to image, m = 3");
    for im in &store.retrieve_i2i(&query.global_feature, 3, None)?.0 {
        println!("  {:.4} {:<16} {}", im.score, im.image_id, im.captions[0]);
    }
    Ok(())
}
