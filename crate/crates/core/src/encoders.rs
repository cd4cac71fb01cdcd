//! Frozen toy text encoders.
//!
//! One seeded embedding table maps keywords into the `d_text` space the
//! fusion network attends over. A second table, aligned with the corpus
//! world, maps whole captions into the global image-feature space so that
//! captions can be retrieved with an image query.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::keywords::{tokenize, KeywordSet, Lexicon};
use crate::numerics::rng;
use crate::numerics::{Matrix, Parameter, ParameterSet};
use crate::synthdata::{normalize, World};

pub const UNK: &str = "<unk>";

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    words: Vec<String>,
    index: HashMap<String, usize>,
    keyword_table: Parameter,
    caption_table: Parameter,
}

impl TextEncoder {
    /// Builds the encoder over the lexicon's words. Row 0 is the reserved
    /// unknown-word row.
    pub fn new(seed: u64, d_text: usize, world: &World, lexicon: &Lexicon) -> Result<Self> {
        if d_text == 0 {
            return Err(Error::Config("d_text must be positive".into()));
        }
        let mut words = vec![UNK.to_string()];
        words.extend(lexicon.words().map(String::from));
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        let mut r = rng::stream(seed, "text-encoder");
        let keyword_table = rng::gaussian_matrix(&mut r, words.len(), d_text, 1.0 / (d_text as f64).sqrt());
        let d_feat = world.config().d_feat;
        let mut caption_table = Matrix::zeros(words.len(), d_feat);
        for (i, w) in words.iter().enumerate() {
            if let Some(dir) = world.text_alignment(w) {
                caption_table.row_mut(i).copy_from_slice(&dir);
            }
        }
        Ok(Self {
            words,
            index,
            keyword_table: Parameter::frozen("encoder.keyword_table", keyword_table),
            caption_table: Parameter::frozen("encoder.caption_table", caption_table),
        })
    }

    pub fn d_text(&self) -> usize {
        self.keyword_table.value.cols()
    }

    pub fn d_feat(&self) -> usize {
        self.caption_table.value.cols()
    }

    fn token_rows(&self, text: &str) -> Result<Vec<usize>> {
        let toks = tokenize(text);
        if toks.is_empty() {
            return Err(Error::Input(format!("nothing to encode in {text:?}")));
        }
        Ok(toks
            .iter()
            .map(|t| self.index.get(t).copied().unwrap_or(0))
            .collect())
    }

    fn mean_rows(table: &Matrix, rows: &[usize]) -> Vec<f64> {
        let mut v = vec![0.0; table.cols()];
        for &r in rows {
            for (o, x) in v.iter_mut().zip(table.row(r)) {
                *o += x;
            }
        }
        v.iter_mut().for_each(|x| *x /= rows.len() as f64);
        v
    }

    /// Unit-norm mean of the keyword's token embeddings. Unknown tokens map
    /// to the reserved unknown row.
    pub fn encode_keyword(&self, keyword: &str) -> Result<Vec<f64>> {
        let rows = self.token_rows(keyword)?;
        let mut v = Self::mean_rows(&self.keyword_table.value, &rows);
        normalize(&mut v);
        Ok(v)
    }

    /// One row per keyword, in keyword order.
    pub fn encode_keyword_set(&self, keywords: &KeywordSet) -> Result<Matrix> {
        if keywords.is_empty() {
            return Err(Error::EmptyKeywords);
        }
        let rows = keywords
            .iter()
            .map(|k| self.encode_keyword(k))
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    }

    /// Unit-norm caption vector in the global image-feature space.
    pub fn encode_caption(&self, caption: &str) -> Result<Vec<f64>> {
        let rows = self.token_rows(caption)?;
        let mut v = Self::mean_rows(&self.caption_table.value, &rows);
        if v.iter().all(|x| *x == 0.0) {
            return Err(Error::Data(format!(
                "caption {caption:?} has no words the caption encoder recognizes"
            )));
        }
        normalize(&mut v);
        Ok(v)
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update([0]);
        }
        h.update(self.keyword_table.value.to_le_bytes());
        h.update(self.caption_table.value.to_le_bytes());
        hex::encode(h.finalize())
    }
}

impl ParameterSet for TextEncoder {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.keyword_table);
        f(&self.caption_table);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.keyword_table);
        f(&mut self.caption_table);
    }
}
