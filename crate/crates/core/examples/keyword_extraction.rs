//! Tags, chunks and deduplicates retrieved captions into scene keywords.
//!
//! cargo run --example keyword_extraction

use dualcap::keywords::{chunk, extract_keywords, pos_tag, tokenize, Lexicon};

fn main() {
    let lexicon = Lexicon::builtin();
    let captions: Vec<String> = [
        "a red bus parked near the road",
        "there is a red bus parked near the road",
        "a small dog and a red bus on the street",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();

    let tagged = pos_tag(&lexicon, &tokenize(&captions[2]));
    let tags: Vec<String> = tagged.iter().map(|t| format!("{}/{}", t.word, t.tag.as_str())).collect();
    println!("tagged: {}", tags.join(" "));
    for c in chunk(&tagged) {
        println!("chunk: {c:?}");
    }
    for p in [3, 12] {
        let kws = extract_keywords(&lexicon, &captions, p);
        let list: Vec<&str> = kws.iter().map(String::as_str).collect();
        println!("keywords (p = {p}): {}", list.join("; "));
    }
}
