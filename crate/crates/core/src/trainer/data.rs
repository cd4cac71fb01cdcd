use rayon::prelude::*;

use super::config::{Toggles, TrainConfig};
use crate::decoder::{bare_prompt, build_prompt, TextPrompt, Vocabulary, EOS};
use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::keywords::{extract_keywords, KeywordSet, Lexicon};
use crate::numerics::Matrix;
use crate::retrieval::{FeatureDatastore, RetrievedCaptions, RetrievedImages};
use crate::synthdata::{gen_corpus_in, grammar_words, Corpus, GenConfig, ImageRecord, Split, World};

/// Everything a run reads but never changes: corpus, datastore, frozen
/// text encoder, tagger lexicon and the decoder vocabulary.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub corpus: Corpus,
    pub datastore: FeatureDatastore,
    pub encoder: TextEncoder,
    pub lexicon: Lexicon,
    pub vocab: Vocabulary,
}

/// Both retrieval results for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    pub i2t: RetrievedCaptions,
    pub i2i: RetrievedImages,
}

/// One image ready for training or decoding under a fixed set of toggles.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub patches: Matrix,
    pub retrieval: Retrieval,
    /// Captions placed in the text prompt, in prompt order.
    pub prompt_captions: Vec<String>,
    pub prompt: TextPrompt,
    pub keywords: KeywordSet,
    /// One row per keyword; zero rows when the fusion network is off or no
    /// keyword was found.
    pub keyword_emb: Matrix,
    pub references: Vec<String>,
    /// Tokenized references, each ending in EOS.
    pub targets: Vec<Vec<usize>>,
}

impl Workspace {
    /// Checks that the datastore holds no validation or test image.
    pub fn new(corpus: Corpus, datastore: FeatureDatastore, encoder: TextEncoder, lexicon: Lexicon) -> Result<Self> {
        if let Some(r) = corpus
            .records
            .iter()
            .find(|r| r.split != Split::Train && datastore.contains_image(&r.id))
        {
            return Err(Error::Config(format!(
                "datastore contains {} image {}; it must be built from the train split only",
                r.split, r.id
            )));
        }
        let grammar = grammar_words().join(" ");
        let train_caps: Vec<&str> = corpus
            .split(Split::Train)
            .flat_map(|r| r.captions.iter().map(String::as_str))
            .collect();
        let vocab = Vocabulary::build(std::iter::once(grammar.as_str()).chain(train_caps));
        Ok(Self {
            corpus,
            datastore,
            encoder,
            lexicon,
            vocab,
        })
    }

    /// Generates the corpus, encoder and datastore from one data seed.
    pub fn generate(seed: u64, gen: &GenConfig, d_text: usize) -> Result<Self> {
        let world = World::new(seed, gen)?;
        let corpus = gen_corpus_in(&world, seed)?;
        let lexicon = Lexicon::builtin();
        let encoder = TextEncoder::new(seed, d_text, &world, &lexicon)?;
        let datastore = FeatureDatastore::from_corpus(&corpus, &encoder)?;
        Self::new(corpus, datastore, encoder, lexicon)
    }

    pub fn records(&self, split: Split) -> Vec<&ImageRecord> {
        self.corpus.split(split).collect()
    }

    /// Top-`k` captions and top-`m` images for every record of `split`.
    /// A query image is never retrieved for itself.
    pub fn retrieve(&self, split: Split, k: usize, m: usize) -> Result<Vec<Retrieval>> {
        self.records(split)
            .par_iter()
            .map(|r| {
                Ok(Retrieval {
                    i2t: self.datastore.retrieve_i2t(&r.global_feature, k, Some(&r.id))?,
                    i2i: self.datastore.retrieve_i2i(&r.global_feature, m, Some(&r.id))?,
                })
            })
            .collect()
    }

    /// Builds examples for `split` from precomputed retrievals.
    pub fn prepare(&self, split: Split, retrievals: &[Retrieval], cfg: &TrainConfig) -> Result<Vec<Example>> {
        let records = self.records(split);
        if records.len() != retrievals.len() {
            return Err(Error::Input(format!(
                "{} records but {} retrievals",
                records.len(),
                retrievals.len()
            )));
        }
        records
            .par_iter()
            .zip(retrievals)
            .map(|(r, ret)| self.example(r, ret, cfg))
            .collect()
    }

    /// Retrieves and prepares in one go.
    pub fn examples(&self, split: Split, cfg: &TrainConfig) -> Result<Vec<Example>> {
        let ret = self.retrieve(split, cfg.k, cfg.m)?;
        self.prepare(split, &ret, cfg)
    }

    fn example(&self, record: &ImageRecord, retrieval: &Retrieval, cfg: &TrainConfig) -> Result<Example> {
        let Toggles {
            use_i2t,
            use_i2i,
            use_sfn,
        } = cfg.toggles;
        let i2t: Vec<String> = retrieval.i2t.texts().into_iter().take(cfg.k).collect();
        let i2i: Vec<&crate::retrieval::RetrievedImage> = retrieval.i2i.0.iter().take(cfg.m).collect();
        let mut prompt_captions = Vec::new();
        if use_i2t {
            prompt_captions.extend(i2t.iter().cloned());
        }
        if use_i2i && !use_sfn {
            prompt_captions.extend(i2i.iter().filter_map(|im| im.captions.first().cloned()));
        }
        let prompt = if prompt_captions.is_empty() {
            bare_prompt(&self.vocab)
        } else {
            build_prompt(&self.vocab, &prompt_captions, cfg.prompt_budget())
        };
        let keywords = if use_sfn {
            let source: Vec<String> = if use_i2i {
                i2i.iter().flat_map(|im| im.captions.iter().cloned()).collect()
            } else {
                i2t.clone()
            };
            extract_keywords(&self.lexicon, &source, cfg.p)
        } else {
            KeywordSet::new(Vec::new())
        };
        let keyword_emb = if keywords.is_empty() {
            Matrix::zeros(0, self.encoder.d_text())
        } else {
            self.encoder.encode_keyword_set(&keywords)?
        };
        let targets = record
            .captions
            .iter()
            .map(|c| {
                let mut ids = self.vocab.encode(c);
                ids.push(EOS);
                ids
            })
            .collect();
        Ok(Example {
            id: record.id.clone(),
            patches: record.patch_features.clone(),
            retrieval: retrieval.clone(),
            prompt_captions,
            prompt,
            keywords,
            keyword_emb,
            references: record.captions.clone(),
            targets,
        })
    }
}
