use super::vocab::{tokenize, Vocabulary};

pub const PROMPT_HEAD: &str = "similar images show";
pub const PROMPT_TAIL: &str = "this image shows";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextPrompt {
    pub text: String,
    pub ids: Vec<usize>,
}

/// Template text for already-tokenized captions.
fn render(captions: &[Vec<String>]) -> String {
    if captions.is_empty() {
        return PROMPT_TAIL.to_string();
    }
    let joined: Vec<String> = captions.iter().map(|c| c.join(" ")).collect();
    format!("{PROMPT_HEAD} {}. {PROMPT_TAIL}", joined.join(", "))
}

/// Fills the hard prompt template with `captions` in the given order.
///
/// If the prompt would exceed `max_tokens`, every caption is cut to a
/// share of the budget proportional to its length (at least one token);
/// trailing captions are dropped if that is still too long. With no
/// captions the bare tail is used and a warning is logged.
pub fn build_prompt(vocab: &Vocabulary, captions: &[String], max_tokens: usize) -> TextPrompt {
    if captions.is_empty() {
        log::warn!("no retrieved captions; using the bare prompt template");
        return bare_prompt(vocab);
    }
    let mut toks: Vec<Vec<String>> = captions
        .iter()
        .map(|c| tokenize(c).into_iter().filter(|t| t != "," && t != ".").collect())
        .filter(|t: &Vec<String>| !t.is_empty())
        .collect();
    let fixed = tokenize(PROMPT_HEAD).len() + tokenize(PROMPT_TAIL).len();
    let overhead = |n: usize| fixed + n;
    let total: usize = toks.iter().map(Vec::len).sum();
    if total + overhead(toks.len()) > max_tokens {
        let budget = max_tokens.saturating_sub(overhead(toks.len()));
        for t in &mut toks {
            let keep = (t.len() * budget / total).max(1);
            t.truncate(keep);
        }
        while !toks.is_empty() && toks.iter().map(Vec::len).sum::<usize>() + overhead(toks.len()) > max_tokens {
            toks.pop();
        }
    }
    if toks.is_empty() {
        return bare_prompt(vocab);
    }
    let text = render(&toks);
    TextPrompt {
        ids: vocab.encode(&text),
        text,
    }
}

/// The template with no retrieved examples.
pub fn bare_prompt(vocab: &Vocabulary) -> TextPrompt {
    TextPrompt {
        text: PROMPT_TAIL.to_string(),
        ids: vocab.encode(PROMPT_TAIL),
    }
}
