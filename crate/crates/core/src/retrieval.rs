//! Exact cosine retrieval over an immutable feature datastore.
//!
//! The store backs both streams: image-to-text queries rank caption
//! vectors, image-to-image queries rank image vectors. Ties are broken by
//! ascending id so results are platform independent.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::serial;
use crate::synthdata::{Corpus, ImageRecord, Split};

pub const DATASTORE_VERSION: u32 = 1;

/// Default number of captions for the text prompt.
pub const DEFAULT_K: usize = 4;
/// Default number of similar images for keyword extraction.
pub const DEFAULT_M: usize = 3;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine of vectors with {} and {} entries",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Input("cosine of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEntry {
    pub id: String,
    pub vector: Vec<f64>,
    pub caption_ids: Vec<String>,
    caption_rows: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionEntry {
    pub id: String,
    pub vector: Vec<f64>,
    pub text: String,
    pub image_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDatastore {
    version: u32,
    dim: usize,
    images: Vec<ImageEntry>,
    captions: Vec<CaptionEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievedCaption {
    pub caption_id: String,
    pub text: String,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievedCaptions(pub Vec<RetrievedCaption>);

impl RetrievedCaptions {
    pub fn texts(&self) -> Vec<String> {
        self.0.iter().map(|c| c.text.clone()).collect()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.0.iter().map(|c| c.caption_id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievedImage {
    pub image_id: String,
    pub score: f64,
    pub captions: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievedImages(pub Vec<RetrievedImage>);

impl RetrievedImages {
    /// All attached captions, image by image in rank order.
    pub fn captions(&self) -> Vec<String> {
        self.0.iter().flat_map(|i| i.captions.iter().cloned()).collect()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.0.iter().map(|i| i.image_id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn rank_order(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Exact top-`k` of `(score, id, row)` candidates.
fn top_k<'a>(mut scored: Vec<(f64, &'a str, usize)>, k: usize) -> Vec<(f64, &'a str, usize)> {
    let cmp = |a: &(f64, &str, usize), b: &(f64, &str, usize)| rank_order(&(a.0, a.1), &(b.0, b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    scored
}

impl FeatureDatastore {
    /// Builds a store from records and per-record caption vectors. Vectors
    /// are normalized here; entry order is input order.
    pub fn build(records: &[ImageRecord], caption_vectors: &[Vec<Vec<f64>>]) -> Result<Self> {
        if records.len() != caption_vectors.len() {
            return Err(Error::Input(format!(
                "{} records but {} caption vector lists",
                records.len(),
                caption_vectors.len()
            )));
        }
        let dim = records.first().map_or(0, |r| r.global_feature.len());
        let mut seen = HashSet::new();
        let mut images = Vec::with_capacity(records.len());
        let mut captions = Vec::new();
        for (rec, vecs) in records.iter().zip(caption_vectors) {
            if !seen.insert(rec.id.clone()) {
                return Err(Error::Data(format!("duplicate image id {}", rec.id)));
            }
            if vecs.len() != rec.captions.len() {
                return Err(Error::Input(format!(
                    "image {} has {} captions but {} caption vectors",
                    rec.id,
                    rec.captions.len(),
                    vecs.len()
                )));
            }
            let mut caption_ids = Vec::with_capacity(vecs.len());
            let mut caption_rows = Vec::with_capacity(vecs.len());
            for (j, (text, v)) in rec.captions.iter().zip(vecs).enumerate() {
                let id = format!("{}#{}", rec.id, j);
                if !seen.insert(id.clone()) {
                    return Err(Error::Data(format!("duplicate caption id {id}")));
                }
                caption_rows.push(captions.len());
                caption_ids.push(id.clone());
                captions.push(CaptionEntry {
                    id,
                    vector: unit(v, dim)?,
                    text: text.clone(),
                    image_id: rec.id.clone(),
                });
            }
            images.push(ImageEntry {
                id: rec.id.clone(),
                vector: unit(&rec.global_feature, dim)?,
                caption_ids,
                caption_rows,
            });
        }
        Ok(Self {
            version: DATASTORE_VERSION,
            dim,
            images,
            captions,
        })
    }

    /// Store over the training split of `corpus`, with caption vectors
    /// from the frozen caption encoder.
    pub fn from_corpus(corpus: &Corpus, encoder: &TextEncoder) -> Result<Self> {
        let train = corpus.split_records(Split::Train);
        let vectors = train
            .iter()
            .map(|r| {
                r.captions
                    .iter()
                    .map(|c| encoder.encode_caption(c))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::build(&train, &vectors)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn images(&self) -> &[ImageEntry] {
        &self.images
    }

    pub fn captions(&self) -> &[CaptionEntry] {
        &self.captions
    }

    pub fn contains_image(&self, id: &str) -> bool {
        self.images.iter().any(|e| e.id == id)
    }

    fn check_query(&self, query: &[f64], count: usize) -> Result<Option<f64>> {
        if count == 0 {
            return Err(Error::Input("retrieval count must be at least 1".into()));
        }
        if self.images.is_empty() {
            return Ok(None);
        }
        if query.len() != self.dim {
            return Err(Error::Dimension(format!(
                "query has {} entries, store dim is {}",
                query.len(),
                self.dim
            )));
        }
        let n = norm(query);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Input("query vector must be nonzero and finite".into()));
        }
        Ok(Some(n))
    }

    /// Top-`k` captions by cosine to `query`, skipping captions attached
    /// to `exclude`.
    pub fn retrieve_i2t(&self, query: &[f64], k: usize, exclude: Option<&str>) -> Result<RetrievedCaptions> {
        let Some(qn) = self.check_query(query, k)? else {
            return Ok(RetrievedCaptions::default());
        };
        let scored: Vec<(f64, &str, usize)> = self
            .captions
            .iter()
            .enumerate()
            .filter(|(_, c)| Some(c.image_id.as_str()) != exclude)
            .map(|(i, c)| (dot(query, &c.vector) / qn, c.id.as_str(), i))
            .collect();
        Ok(RetrievedCaptions(
            top_k(scored, k)
                .into_iter()
                .map(|(score, _, i)| RetrievedCaption {
                    caption_id: self.captions[i].id.clone(),
                    text: self.captions[i].text.clone(),
                    score,
                })
                .collect(),
        ))
    }

    /// Top-`m` images by cosine to `query`, skipping `exclude`.
    pub fn retrieve_i2i(&self, query: &[f64], m: usize, exclude: Option<&str>) -> Result<RetrievedImages> {
        let Some(qn) = self.check_query(query, m)? else {
            return Ok(RetrievedImages::default());
        };
        let scored: Vec<(f64, &str, usize)> = self
            .images
            .iter()
            .enumerate()
            .filter(|(_, e)| Some(e.id.as_str()) != exclude)
            .map(|(i, e)| (dot(query, &e.vector) / qn, e.id.as_str(), i))
            .collect();
        Ok(RetrievedImages(
            top_k(scored, m)
                .into_iter()
                .map(|(score, _, i)| {
                    let e = &self.images[i];
                    RetrievedImage {
                        image_id: e.id.clone(),
                        score,
                        captions: e
                            .caption_rows
                            .iter()
                            .map(|&r| self.captions[r].text.clone())
                            .collect(),
                    }
                })
                .collect(),
        ))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{{\"version\":{},\"dim\":{},\"counts\":{{\"images\":{},\"captions\":{}}}}}\n",
            self.version,
            self.dim,
            self.images.len(),
            self.captions.len()
        ));
        for e in &self.images {
            out.push_str("{\"id\":");
            serial::write_str(&mut out, &e.id);
            out.push_str(",\"vector\":");
            serial::write_f64_array(&mut out, &e.vector);
            out.push_str(",\"caption_ids\":");
            serial::write_str_array(&mut out, &e.caption_ids);
            out.push_str("}\n");
        }
        for c in &self.captions {
            out.push_str("{\"id\":");
            serial::write_str(&mut out, &c.id);
            out.push_str(",\"vector\":");
            serial::write_f64_array(&mut out, &c.vector);
            out.push_str(",\"text\":");
            serial::write_str(&mut out, &c.text);
            out.push_str(",\"image_id\":");
            serial::write_str(&mut out, &c.image_id);
            out.push_str("}\n");
        }
        out
    }

    pub fn read(reader: impl BufRead) -> Result<Self> {
        #[derive(Serialize, Deserialize)]
        struct Counts {
            images: usize,
            captions: usize,
        }
        #[derive(Deserialize)]
        struct Header {
            version: u32,
            dim: usize,
            counts: Counts,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct ImageLine {
            id: String,
            vector: Vec<f64>,
            caption_ids: Vec<String>,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct CaptionLine {
            id: String,
            vector: Vec<f64>,
            text: String,
            image_id: String,
        }
        let bad = |no: usize, e: &dyn std::fmt::Display| Error::Data(format!("datastore line {no}: {e}"));
        let mut lines = reader.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Data("empty datastore file".into()))?;
        let header = header.map_err(|e| bad(1, &e))?;
        let header: Header = serde_json::from_str(&header).map_err(|e| bad(1, &e))?;
        if header.version != DATASTORE_VERSION {
            return Err(Error::Data(format!(
                "datastore version {} unsupported (expected {DATASTORE_VERSION})",
                header.version
            )));
        }
        let mut images = Vec::with_capacity(header.counts.images);
        let mut captions = Vec::with_capacity(header.counts.captions);
        for (i, line) in lines {
            let no = i + 1;
            let line = line.map_err(|e| bad(no, &e))?;
            if line.trim().is_empty() {
                continue;
            }
            if images.len() < header.counts.images {
                let l: ImageLine = serde_json::from_str(&line).map_err(|e| bad(no, &e))?;
                check_unit(&l.vector, header.dim).map_err(|e| bad(no, &e))?;
                images.push(ImageEntry {
                    id: l.id,
                    vector: l.vector,
                    caption_ids: l.caption_ids,
                    caption_rows: Vec::new(),
                });
            } else {
                let l: CaptionLine = serde_json::from_str(&line).map_err(|e| bad(no, &e))?;
                check_unit(&l.vector, header.dim).map_err(|e| bad(no, &e))?;
                captions.push(CaptionEntry {
                    id: l.id,
                    vector: l.vector,
                    text: l.text,
                    image_id: l.image_id,
                });
            }
        }
        if images.len() != header.counts.images || captions.len() != header.counts.captions {
            return Err(Error::Data(format!(
                "datastore header promises {} images / {} captions, file has {} / {}",
                header.counts.images,
                header.counts.captions,
                images.len(),
                captions.len()
            )));
        }
        let rows: std::collections::HashMap<&str, usize> = captions
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id.as_str(), i))
            .collect();
        let mut resolved = Vec::with_capacity(images.len());
        for e in &images {
            let mut r = Vec::with_capacity(e.caption_ids.len());
            for cid in &e.caption_ids {
                let row = *rows
                    .get(cid.as_str())
                    .ok_or_else(|| Error::Data(format!("image {} references unknown caption {cid}", e.id)))?;
                if captions[row].image_id != e.id {
                    return Err(Error::Data(format!("caption {cid} belongs to another image")));
                }
                r.push(row);
            }
            resolved.push(r);
        }
        for (e, r) in images.iter_mut().zip(resolved) {
            e.caption_rows = r;
        }
        Ok(Self {
            version: header.version,
            dim: header.dim,
            images,
            captions,
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::read(BufReader::new(text.as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(f))
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

fn unit(v: &[f64], dim: usize) -> Result<Vec<f64>> {
    if v.len() != dim {
        return Err(Error::Dimension(format!(
            "vector with {} entries in a store of dim {dim}",
            v.len()
        )));
    }
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Data("zero or non-finite vector".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn check_unit(v: &[f64], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(Error::Dimension(format!("vector of {} in dim {dim}", v.len())));
    }
    if (norm(v) - 1.0).abs() > 1e-9 {
        return Err(Error::Data("stored vector is not unit norm".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{rng, Matrix};
    use proptest::prelude::*;

    fn record(id: &str, v: Vec<f64>, caps: &[&str]) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            split: Split::Train,
            global_feature: v,
            patch_features: Matrix::zeros(1, 1),
            captions: caps.iter().map(|s| s.to_string()).collect(),
            scene: None,
        }
    }

    /// Store of `n` random images, each with one caption whose vector is
    /// an independent random direction.
    fn random_store(seed: u64, n: usize, dim: usize) -> FeatureDatastore {
        let mut r = rng::seeded(seed);
        let recs: Vec<ImageRecord> = (0..n)
            .map(|i| record(&format!("img-{i:05}"), rng::gaussian_vec(&mut r, dim, 1.0), &["x"]))
            .collect();
        let vecs: Vec<Vec<Vec<f64>>> = (0..n).map(|_| vec![rng::gaussian_vec(&mut r, dim, 1.0)]).collect();
        FeatureDatastore::build(&recs, &vecs).unwrap()
    }

    fn oracle_i2i(store: &FeatureDatastore, q: &[f64], m: usize, exclude: Option<&str>) -> Vec<String> {
        let mut all: Vec<(f64, String)> = store
            .images()
            .iter()
            .filter(|e| Some(e.id.as_str()) != exclude)
            .map(|e| (cosine(q, &e.vector).unwrap(), e.id.clone()))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().take(m).map(|(_, id)| id).collect()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let x = [0.3, -2.0, 5.5];
        assert!((cosine(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.70710678).abs() < 1e-8);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn empty_store_returns_nothing() {
        let s = FeatureDatastore::build(&[], &[]).unwrap();
        assert!(s.retrieve_i2t(&[1.0, 0.0], 4, None).unwrap().is_empty());
        assert!(s.retrieve_i2i(&[1.0, 0.0], 3, None).unwrap().is_empty());
    }

    #[test]
    fn counts_are_conserved() {
        let recs = vec![
            record("a", vec![1.0, 0.0], &["one", "two"]),
            record("b", vec![0.0, 1.0], &["three"]),
            record("c", vec![1.0, 1.0], &["four", "five", "six"]),
        ];
        let vecs = vec![
            vec![vec![1.0, 0.0], vec![0.5, 0.5]],
            vec![vec![0.0, 2.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]],
        ];
        let s = FeatureDatastore::build(&recs, &vecs).unwrap();
        assert_eq!(s.images().len(), 3);
        assert_eq!(s.captions().len(), 6);
        assert_eq!(s.captions()[2].vector, vec![0.0, 1.0]);
    }

    #[test]
    fn duplicate_id_is_build_error() {
        let recs = vec![record("a", vec![1.0], &["x"]), record("a", vec![1.0], &["y"])];
        let vecs = vec![vec![vec![1.0]], vec![vec![1.0]]];
        assert!(matches!(FeatureDatastore::build(&recs, &vecs), Err(Error::Data(_))));
    }

    #[test]
    fn exact_caption_hit_scores_one() {
        let s = random_store(1, 50, 8);
        let target = s.captions()[17].clone();
        let got = s.retrieve_i2t(&target.vector, 1, None).unwrap();
        assert_eq!(got.0[0].caption_id, target.id);
        assert!((got.0[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn large_k_returns_everything_sorted() {
        let s = random_store(2, 20, 6);
        let q = rng::gaussian_vec(&mut rng::seeded(3), 6, 1.0);
        let got = s.retrieve_i2t(&q, 100, None).unwrap();
        assert_eq!(got.len(), 20);
        assert!(got.0.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn self_exclusion_returns_best_other() {
        let s = random_store(4, 30, 6);
        let me = s.images()[5].clone();
        let got = s.retrieve_i2i(&me.vector, 3, Some(&me.id)).unwrap();
        assert!(!got.ids().contains(&me.id.as_str()));
        assert_eq!(got.ids(), oracle_i2i(&s, &me.vector, 3, Some(&me.id)));
        let caps = s.retrieve_i2t(&me.vector, 30, Some(&me.id)).unwrap();
        assert!(caps.0.iter().all(|c| !c.caption_id.starts_with(&format!("{}#", me.id))));
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let recs = vec![
            record("b", vec![1.0, 0.0], &["x"]),
            record("a", vec![1.0, 0.0], &["y"]),
            record("c", vec![0.0, 1.0], &["z"]),
        ];
        let vecs = vec![vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]];
        let s = FeatureDatastore::build(&recs, &vecs).unwrap();
        assert_eq!(s.retrieve_i2i(&[1.0, 0.0], 2, None).unwrap().ids(), vec!["a", "b"]);
        assert_eq!(s.retrieve_i2t(&[1.0, 0.0], 1, None).unwrap().ids(), vec!["a#0"]);
    }

    #[test]
    fn query_dimension_checked() {
        let s = random_store(5, 5, 4);
        assert!(matches!(s.retrieve_i2t(&[1.0; 3], 1, None), Err(Error::Dimension(_))));
        assert!(matches!(s.retrieve_i2i(&[1.0; 5], 1, None), Err(Error::Dimension(_))));
        assert!(s.retrieve_i2i(&[1.0; 4], 0, None).is_err());
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let s = random_store(6, 40, 7);
        let text = s.to_text();
        let back = FeatureDatastore::from_text(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_text(), text);
        assert!(text.starts_with("{\"version\":1,\"dim\":7,\"counts\":{\"images\":40,\"captions\":40}}"));
    }

    #[test]
    fn agrees_with_full_sort_oracle() {
        let s = random_store(7, 1000, 16);
        let mut r = rng::seeded(8);
        for _ in 0..50 {
            let q = rng::gaussian_vec(&mut r, 16, 1.0);
            assert_eq!(s.retrieve_i2i(&q, 3, None).unwrap().ids(), oracle_i2i(&s, &q, 3, None));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn ranking_properties(seed in any::<u64>(), scale in 1e-3f64..1e3, k in 1usize..8) {
            let s = random_store(99, 60, 5);
            let hash = s.content_hash();
            let q = rng::gaussian_vec(&mut rng::seeded(seed), 5, 1.0);
            let qs: Vec<f64> = q.iter().map(|x| x * scale).collect();
            let a = s.retrieve_i2t(&q, k, None).unwrap();
            let b = s.retrieve_i2t(&qs, k, None).unwrap();
            prop_assert_eq!(a.ids(), b.ids());
            let longer = s.retrieve_i2t(&q, k + 1, None).unwrap();
            prop_assert_eq!(&longer.ids()[..k], &a.ids()[..]);
            let imgs = s.retrieve_i2i(&q, k, None).unwrap();
            let imgs_s = s.retrieve_i2i(&qs, k, None).unwrap();
            prop_assert_eq!(imgs.ids(), imgs_s.ids());
            for c in &a.0 {
                let v = &s.captions().iter().find(|e| e.id == c.caption_id).unwrap().vector;
                prop_assert!((c.score - cosine(&q, v).unwrap()).abs() < 1e-12);
            }
            prop_assert_eq!(s.content_hash(), hash);
        }
    }
}
