//! Corpus BLEU@4 and CIDEr-D.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::decoder::tokenize;
use crate::error::{Error, Result};

const MAX_N: usize = 4;
const BLEU_EPSILON: f64 = 1e-9;
const CIDER_SIGMA: f64 = 6.0;
const CIDER_SCALE: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalItem {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvalBatch {
    pub items: Vec<EvalItem>,
}

impl EvalBatch {
    /// Tokenizes candidate and reference texts with the caption tokenizer.
    pub fn from_texts<S: AsRef<str>>(pairs: &[(S, Vec<S>)]) -> Self {
        Self {
            items: pairs
                .iter()
                .map(|(c, refs)| EvalItem {
                    candidate: tokenize(c.as_ref()),
                    references: refs.iter().map(|r| tokenize(r.as_ref())).collect(),
                })
                .collect(),
        }
    }

    pub fn push(&mut self, candidate: &str, references: &[String]) {
        self.items.push(EvalItem {
            candidate: tokenize(candidate),
            references: references.iter().map(|r| tokenize(r)).collect(),
        });
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Input("evaluation batch is empty".into()));
        }
        if let Some(i) = self.items.iter().position(|it| it.references.is_empty()) {
            return Err(Error::Input(format!("image {i} has no references")));
        }
        Ok(())
    }
}

type Ngram = Vec<String>;

/// Ordered so floating-point sums over n-grams are reproducible.
fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU@4 in `[0, 100]`.
///
/// Clipped n-gram matches and candidate n-gram totals are summed over the
/// corpus. A zero precision becomes `1e-9 / total` (or `1e-9` when there
/// are no candidate n-grams of that order). The brevity penalty uses the
/// reference length closest to each candidate, shorter on ties.
pub fn bleu4(batch: &EvalBatch) -> Result<f64> {
    batch.validate()?;
    let mut matches = [0usize; MAX_N];
    let mut totals = [0usize; MAX_N];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for it in &batch.items {
        let c = it.candidate.len();
        cand_len += c;
        ref_len += it
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(c), l))
            .expect("validated non-empty");
        for n in 1..=MAX_N {
            let cand = ngram_counts(&it.candidate, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &it.references {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            matches[n - 1] += cand.iter().map(|(g, k)| (*k).min(*max_ref.get(g).unwrap_or(&0))).sum::<usize>();
            totals[n - 1] += c.saturating_sub(n - 1);
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..MAX_N)
        .map(|i| {
            let p = match (matches[i], totals[i]) {
                (0, 0) => BLEU_EPSILON,
                (0, t) => BLEU_EPSILON / t as f64,
                (m, t) => m as f64 / t as f64,
            };
            p.ln()
        })
        .sum::<f64>()
        / MAX_N as f64;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok((100.0 * bp * log_p.exp()).min(100.0))
}

/// Document frequencies over the reference sets of an evaluated split.
#[derive(Clone, Debug, PartialEq)]
pub struct CiderStats {
    df: HashMap<Ngram, f64>,
    log_images: f64,
}

impl CiderStats {
    pub fn from_references(batch: &EvalBatch) -> Result<Self> {
        batch.validate()?;
        let mut df: HashMap<Ngram, f64> = HashMap::new();
        for it in &batch.items {
            let mut seen: HashSet<&[String]> = HashSet::new();
            for r in &it.references {
                for n in 1..=MAX_N {
                    seen.extend(ngram_counts(r, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g.to_vec()).or_insert(0.0) += 1.0;
            }
        }
        Ok(Self {
            df,
            log_images: (batch.items.len() as f64).ln(),
        })
    }

    pub fn document_frequency(&self, ngram: &[&str]) -> f64 {
        let key: Ngram = ngram.iter().map(|s| s.to_string()).collect();
        self.df.get(&key).copied().unwrap_or(0.0)
    }
}

struct TfIdf<'a> {
    vecs: [BTreeMap<&'a [String], f64>; MAX_N],
    norms: [f64; MAX_N],
    bigrams: usize,
}

fn tfidf<'a>(tokens: &'a [String], stats: &CiderStats) -> TfIdf<'a> {
    let mut vecs: [BTreeMap<&[String], f64>; MAX_N] = Default::default();
    let mut norms = [0.0; MAX_N];
    let mut bigrams = 0;
    for n in 1..=MAX_N {
        for (g, tf) in ngram_counts(tokens, n) {
            let df = stats.df.get(g).copied().unwrap_or(0.0).max(1.0);
            let w = tf as f64 * (stats.log_images - df.ln());
            norms[n - 1] += w * w;
            vecs[n - 1].insert(g, w);
            if n == 2 {
                bigrams += tf;
            }
        }
    }
    norms.iter_mut().for_each(|x| *x = x.sqrt());
    TfIdf { vecs, norms, bigrams }
}

fn cider_sim(hyp: &TfIdf, r: &TfIdf) -> f64 {
    let delta = hyp.bigrams as f64 - r.bigrams as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    (0..MAX_N)
        .map(|n| {
            let mut val: f64 = hyp.vecs[n]
                .iter()
                .map(|(g, h)| {
                    let rv = r.vecs[n].get(g).copied().unwrap_or(0.0);
                    h.min(rv) * rv
                })
                .sum();
            if hyp.norms[n] != 0.0 && r.norms[n] != 0.0 {
                val /= hyp.norms[n] * r.norms[n];
            }
            val * penalty
        })
        .sum::<f64>()
        / MAX_N as f64
}

/// CIDEr-D score of each image.
pub fn cider_per_image(batch: &EvalBatch, stats: &CiderStats) -> Result<Vec<f64>> {
    batch.validate()?;
    Ok(batch
        .items
        .iter()
        .map(|it| {
            let hyp = tfidf(&it.candidate, stats);
            let total: f64 = it.references.iter().map(|r| cider_sim(&hyp, &tfidf(r, stats))).sum();
            CIDER_SCALE * total / it.references.len() as f64
        })
        .collect())
}

/// Corpus CIDEr-D: the mean of per-image scores.
pub fn cider(batch: &EvalBatch, stats: &CiderStats) -> Result<f64> {
    let scores = cider_per_image(batch, stats)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu4: f64,
    pub cider: f64,
}

/// BLEU@4 and CIDEr-D with document frequencies from the batch's own
/// references.
pub fn score(batch: &EvalBatch) -> Result<Scores> {
    let stats = CiderStats::from_references(batch)?;
    Ok(Scores {
        bleu4: bleu4(batch)?,
        cider: cider(batch, &stats)?,
    })
}

/// One `NAME<TAB>value` line per metric, six decimals.
pub fn format_scores(s: &Scores) -> String {
    format!("BLEU4\t{:.6}\nCIDEr\t{:.6}\n", s.bleu4, s.cider)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(pairs: &[(&str, &[&str])]) -> EvalBatch {
        let owned: Vec<(String, Vec<String>)> = pairs
            .iter()
            .map(|(c, r)| (c.to_string(), r.iter().map(|s| s.to_string()).collect()))
            .collect();
        EvalBatch::from_texts(&owned)
    }

    #[test]
    fn perfect_copy_is_one_hundred() {
        let b = batch(&[
            ("a black cat sitting on the floor", &["a black cat sitting on the floor"]),
            ("there is a red bus near the road", &["there is a red bus near the road"]),
        ]);
        assert_eq!(format!("{:.6}", bleu4(&b).unwrap()), "100.000000");
    }

    #[test]
    fn disjoint_vocabulary_is_near_zero() {
        let b = batch(&[("zebra yak okapi llama", &["a black cat sitting on the floor"])]);
        assert!(bleu4(&b).unwrap() < 1e-6);
    }

    // Worksheet: clipped matches 18/19, 10/16, 5/13, 2/10; candidate and
    // closest reference lengths both 19, so no brevity penalty.
    #[test]
    fn three_sentence_worksheet() {
        let b = batch(&[
            ("the cat is on the mat", &["the cat sat on the mat", "there is a cat on the mat"]),
            ("a dog runs in the park", &["a brown dog running in the park", "the dog runs through a park"]),
            ("a red bus parked near a road", &["a red bus parked near the road"]),
        ]);
        let expected = 100.0 * (18.0 / 19.0 * 10.0 / 16.0 * 5.0 / 13.0 * 2.0 / 10.0f64).powf(0.25);
        assert!((expected - 46.19701261544702).abs() < 1e-12);
        assert!((bleu4(&b).unwrap() - 46.19701261544702).abs() < 1e-6);
    }

    // Same worksheet with no 4-gram match: p4 = 1e-9 / 6, brevity 14 vs 19.
    #[test]
    fn zero_precision_is_smoothed() {
        let b = batch(&[
            ("the cat is on the mat", &["the cat sat on the mat", "there is a cat on the mat"]),
            ("a dog runs in the park", &["a brown dog running in the park", "the dog runs through a park"]),
            ("red bus", &["a red bus parked near the road"]),
        ]);
        assert!((bleu4(&b).unwrap() - 0.15876996760752526).abs() < 1e-9);
    }

    #[test]
    fn empty_candidate_counts_without_matches() {
        let b = batch(&[("", &["a cat"]), ("a cat", &["a cat"])]);
        let v = bleu4(&b).unwrap();
        assert!(v > 0.0 && v < 100.0);
        assert!(bleu4(&EvalBatch::default()).is_err());
    }

    fn fixture_refs() -> Vec<(&'static str, &'static [&'static str])> {
        vec![
            ("", &["a cat on the mat", "the cat sits on the mat"][..]),
            ("a dog on the grass", &["a dog on the grass", "the dog runs on the grass"][..]),
            ("a bus on the road", &["a bus on the road", "the bus parked on the road"][..]),
        ]
    }

    fn fixture_scores(first: &'static str) -> Vec<f64> {
        let mut pairs = fixture_refs();
        pairs[0].0 = first;
        let b = batch(&pairs);
        cider_per_image(&b, &CiderStats::from_references(&b).unwrap()).unwrap()
    }

    #[test]
    fn stopwords_score_below_content_words() {
        let stop = fixture_scores("on the on the");
        let content = fixture_scores("cat mat cat");
        assert_eq!(stop[0], 0.0);
        assert!((content[0] - 1.31749592511878).abs() < 1e-12);
        assert!((stop[1] - 6.718277104046029).abs() < 1e-12);
    }

    #[test]
    fn reference_copy_is_maximal() {
        let best = fixture_scores("a cat on the mat")[0];
        assert!((best - 6.718277104046029).abs() < 1e-12);
        for c in ["a cat on the", "the cat sits on the mat", "a cat", "cat mat cat", "on the mat"] {
            assert!(fixture_scores(c)[0] <= best);
        }
    }

    #[test]
    fn duplicating_corpus_keeps_scores() {
        // every candidate n-gram occurs in some reference set
        let pairs = vec![
            ("cat on the mat", vec!["a cat on the mat", "the cat sits on the mat"]),
            ("the dog runs on", vec!["a dog on the grass", "the dog runs on the grass"]),
            ("bus parked on the road", vec!["a bus on the road", "the bus parked on the road"]),
        ];
        let b = EvalBatch::from_texts(&pairs);
        let mut doubled = b.clone();
        doubled.items.extend(b.items.clone());
        let s1 = cider_per_image(&b, &CiderStats::from_references(&b).unwrap()).unwrap();
        let s2 = cider_per_image(&doubled, &CiderStats::from_references(&doubled).unwrap()).unwrap();
        for (i, s) in s1.iter().enumerate() {
            assert!((s - s2[i]).abs() < 1e-9);
            assert!((s - s2[i + 3]).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_references_rejected() {
        let b = EvalBatch {
            items: vec![EvalItem {
                candidate: vec!["a".into()],
                references: vec![],
            }],
        };
        assert!(CiderStats::from_references(&b).is_err());
    }

    #[test]
    fn output_format() {
        let s = Scores { bleu4: 12.5, cider: 3.0 };
        assert_eq!(format_scores(&s), "BLEU4\t12.500000\nCIDEr\t3.000000\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn bounded_pure_and_order_invariant(seed in any::<u64>()) {
            use crate::numerics::rng;
            let words = ["a", "cat", "dog", "on", "the", "mat", "red", "bus"];
            let mut r = rng::seeded(seed);
            let sent = |r: &mut rng::Rng| {
                let n = 1 + rng::uniform_index(r, 7);
                (0..n).map(|_| words[rng::uniform_index(r, words.len())]).collect::<Vec<_>>().join(" ")
            };
            let pairs: Vec<(String, Vec<String>)> = (0..5)
                .map(|_| (sent(&mut r), (0..3).map(|_| sent(&mut r)).collect()))
                .collect();
            let b = EvalBatch::from_texts(&pairs);
            let s = score(&b).unwrap();
            prop_assert!((0.0..=100.0).contains(&s.bleu4));
            prop_assert!(s.cider >= 0.0);
            prop_assert_eq!(score(&b).unwrap(), s);
            let mut rev = b.clone();
            rev.items.reverse();
            let t = score(&rev).unwrap();
            prop_assert!((t.bleu4 - s.bleu4).abs() < 1e-9);
            prop_assert!((t.cider - s.cider).abs() < 1e-9);
        }
    }
}
