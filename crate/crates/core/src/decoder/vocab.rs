use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Words the prompt template needs even if no caption uses them.
pub const TEMPLATE_WORDS: [&str; 8] = ["similar", "images", "show", "this", "image", "shows", ",", "."];

fn is_separator(c: char) -> bool {
    matches!(c, ',' | '.' | ';' | ':' | '!' | '?')
}

/// Lowercases and splits on whitespace; sentence punctuation becomes its
/// own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.to_lowercase().split_whitespace() {
        let mut cur = String::new();
        for c in word.chars() {
            if is_separator(c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Joins tokens with spaces, attaching punctuation to the preceding word.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        let t = t.as_ref();
        let attach = t.chars().count() == 1 && t.chars().all(is_separator);
        if !out.is_empty() && !attach {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials first, then every caption and template token in
    /// lexicographic order.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: BTreeSet<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
        for c in captions {
            words.extend(tokenize(c));
        }
        for s in SPECIALS {
            words.remove(s);
        }
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::Data("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIALS[UNK], |s| s.as_str())
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Text of `ids` up to the first EOS, skipping PAD and BOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i))
            .collect();
        detokenize(&toks)
    }

    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first_then_sorted() {
        let v = Vocabulary::build(["a dog", "the cat, sitting."]);
        assert_eq!(&v.tokens()[..4], &SPECIALS.map(String::from));
        let rest = &v.tokens()[4..];
        assert!(rest.windows(2).all(|w| w[0] < w[1]));
        assert!(rest.contains(&"similar".to_string()));
        assert_eq!(v.id("dog"), v.tokens().iter().position(|t| t == "dog").unwrap());
        assert_eq!(v.id("zebra"), UNK);
    }

    #[test]
    fn punctuation_is_split_and_reattached() {
        let t = tokenize("Similar images show a cat, a dog. This image shows");
        assert_eq!(
            t,
            vec!["similar", "images", "show", "a", "cat", ",", "a", "dog", ".", "this", "image", "shows"]
        );
        assert_eq!(detokenize(&t), "similar images show a cat, a dog. this image shows");
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = Vocabulary::build(["a dog"]);
        let mut ids = vec![BOS];
        ids.extend(v.encode("a dog"));
        ids.extend([EOS, v.id("a")]);
        assert_eq!(v.decode(&ids), "a dog");
    }

    #[test]
    fn from_tokens_validates() {
        assert!(Vocabulary::from_tokens(vec!["x".into()]).is_err());
        let mut t: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        t.extend(["a".into(), "a".into()]);
        assert!(Vocabulary::from_tokens(t).is_err());
    }
}
