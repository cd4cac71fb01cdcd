//! Scene-keyword distillation: tokenize, tag with a closed-lexicon rule
//! tagger, chunk into noun phrases and verbs, then keep the most widely
//! shared chunks.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Committed lexicon: every grammar word plus a small exception table of
/// ambiguous entries.
pub const LEXICON_TSV: &str = include_str!("../data/lexicon.tsv");

/// Default keyword budget.
pub const DEFAULT_MAX_KEYWORDS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tag {
    Noun,
    Adj,
    Verb,
    Det,
    Adp,
    Other,
}

impl Tag {
    pub fn as_str(&self) -> &'static str {
        match self {
            Tag::Noun => "NOUN",
            Tag::Adj => "ADJ",
            Tag::Verb => "VERB",
            Tag::Det => "DET",
            Tag::Adp => "ADP",
            Tag::Other => "OTHER",
        }
    }

    /// Head tags whose chunks are kept as keywords.
    pub fn is_keyword_head(&self) -> bool {
        matches!(self, Tag::Noun | Tag::Adj | Tag::Verb)
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "NOUN" => Tag::Noun,
            "ADJ" => Tag::Adj,
            "VERB" => Tag::Verb,
            "DET" => Tag::Det,
            "ADP" => Tag::Adp,
            "OTHER" => Tag::Other,
            _ => return Err(Error::Data(format!("unknown POS tag {s:?}"))),
        })
    }
}

/// Word to candidate tags, in preference order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<Tag>>,
}

impl Lexicon {
    pub fn builtin() -> Self {
        Self::from_tsv(LEXICON_TSV).expect("committed lexicon parses")
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, tags) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("lexicon line {}: missing tab", no + 1)))?;
            let tags = tags
                .split(',')
                .map(|t| t.trim().parse())
                .collect::<Result<Vec<Tag>>>()?;
            if tags.is_empty() {
                return Err(Error::Data(format!("lexicon line {}: no tags", no + 1)));
            }
            entries.insert(word.to_lowercase(), tags);
        }
        Ok(Self { entries })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (w, tags) in &self.entries {
            let tags: Vec<&str> = tags.iter().map(Tag::as_str).collect();
            out.push_str(&format!("{}\t{}\n", w, tags.join(",")));
        }
        out
    }

    /// Candidate tags for a word; unknown words are `OTHER`.
    pub fn tags(&self, word: &str) -> &[Tag] {
        self.entries
            .get(word)
            .map(Vec::as_slice)
            .unwrap_or(&[Tag::Other])
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(word)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Lowercases and splits on whitespace and punctuation.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .split(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '\''))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tagged {
    pub word: String,
    pub tag: Tag,
}

/// Lexicon lookup plus two disambiguation rules for NOUN/VERB ambiguous
/// words: after a determiner they are nouns, after a noun they are verbs.
/// Otherwise the first listed tag wins.
pub fn pos_tag(lexicon: &Lexicon, tokens: &[String]) -> Vec<Tagged> {
    let mut out: Vec<Tagged> = Vec::with_capacity(tokens.len());
    for word in tokens {
        let cands = lexicon.tags(word);
        let ambiguous = cands.contains(&Tag::Noun) && cands.contains(&Tag::Verb);
        let prev = out.last().map(|t| t.tag);
        let tag = match (ambiguous, prev) {
            (true, Some(Tag::Det)) => Tag::Noun,
            (true, Some(Tag::Noun)) => Tag::Verb,
            _ => cands[0],
        };
        out.push(Tagged {
            word: word.clone(),
            tag,
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub text: String,
    pub head: Tag,
    /// Token span `[start, end)` in the tagged sequence.
    pub start: usize,
    pub end: usize,
}

/// Greedy left-to-right chunker for `NP := ADJ* NOUN+` and single-word
/// `V := VERB` chunks, taking the longest match at each position.
pub fn chunk(tagged: &[Tagged]) -> Vec<Chunk> {
    let mut chunks = Vec::new();
    let mut i = 0;
    while i < tagged.len() {
        match tagged[i].tag {
            Tag::Adj | Tag::Noun => {
                let mut j = i;
                while j < tagged.len() && tagged[j].tag == Tag::Adj {
                    j += 1;
                }
                let nouns_start = j;
                while j < tagged.len() && tagged[j].tag == Tag::Noun {
                    j += 1;
                }
                if j > nouns_start {
                    chunks.push(make_chunk(tagged, i, j, Tag::Noun));
                    i = j;
                } else {
                    // adjectives with no noun to attach to
                    i = nouns_start;
                }
            }
            Tag::Verb => {
                chunks.push(make_chunk(tagged, i, i + 1, Tag::Verb));
                i += 1;
            }
            _ => i += 1,
        }
    }
    chunks
}

fn make_chunk(tagged: &[Tagged], start: usize, end: usize, head: Tag) -> Chunk {
    let text = tagged[start..end]
        .iter()
        .map(|t| t.word.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    Chunk {
        text,
        head,
        start,
        end,
    }
}

/// Ordered, deduplicated scene keywords.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeywordSet(Vec<String>);

impl KeywordSet {
    pub fn new(keywords: Vec<String>) -> Self {
        let mut seen = std::collections::HashSet::new();
        Self(
            keywords
                .into_iter()
                .map(|k| k.to_lowercase())
                .filter(|k| seen.insert(k.clone()))
                .collect(),
        )
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &String> {
        self.0.iter()
    }
}

/// Union of keyword-bearing chunks over all captions, ranked by the number
/// of captions containing each chunk (descending) and then by first
/// occurrence, truncated to `max_keywords`.
pub fn extract_keywords(lexicon: &Lexicon, captions: &[String], max_keywords: usize) -> KeywordSet {
    let mut stats: HashMap<String, (usize, usize)> = HashMap::new();
    let mut order = 0usize;
    for caption in captions {
        let tagged = pos_tag(lexicon, &tokenize(caption));
        let mut in_caption = std::collections::HashSet::new();
        for c in chunk(&tagged) {
            if !c.head.is_keyword_head() {
                continue;
            }
            let key = c.text.to_lowercase();
            if !in_caption.insert(key.clone()) {
                continue;
            }
            let entry = stats.entry(key).or_insert((0, order));
            entry.0 += 1;
            order += 1;
        }
    }
    let mut ranked: Vec<(String, usize, usize)> =
        stats.into_iter().map(|(k, (n, first))| (k, n, first)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    ranked.truncate(max_keywords);
    KeywordSet(ranked.into_iter().map(|(k, _, _)| k).collect())
}
