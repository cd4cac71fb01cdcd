//! Greedy and beam decoding over any step-wise language model.

use std::cmp::Ordering;

use super::vocab::{BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// The single interface decoding needs from a model.
pub trait StepModel {
    type State: Clone;

    /// Consumes `BOS` and the prompt; returns next-token log-probabilities.
    fn start(&self, prompt: &[usize], vprime: Option<&Matrix>) -> Result<(Self::State, Vec<f64>)>;

    /// Appends `token`; returns next-token log-probabilities.
    fn advance(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>>;

    /// Positions left before the context limit.
    fn remaining(&self, state: &Self::State) -> usize;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Generated ids, ending in EOS unless the length limit was hit.
    pub tokens: Vec<usize>,
    pub logprob: f64,
}

impl Generation {
    /// Log-probability per generated token.
    pub fn normalized(&self) -> f64 {
        self.logprob / self.tokens.len().max(1) as f64
    }

    /// Tokens without the trailing EOS.
    pub fn caption_ids(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

fn allowed(token: usize) -> bool {
    !matches!(token, PAD | BOS | UNK)
}

/// Token ids ordered by descending log-probability, lowest id first on
/// ties.
fn ranked(logprobs: &[f64], take: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..logprobs.len()).filter(|&t| allowed(t)).collect();
    let cmp = |a: &usize, b: &usize| logprobs[*b].total_cmp(&logprobs[*a]).then(a.cmp(b));
    if take < ids.len() {
        ids.select_nth_unstable_by(take, cmp);
        ids.truncate(take);
    }
    ids.sort_by(cmp);
    ids
}

fn limit<M: StepModel>(model: &M, state: &M::State, max_len: usize) -> usize {
    // every generated token but the last is fed back into the model
    max_len.min(model.remaining(state) + 1)
}

/// Argmax decoding until EOS or `max_len` tokens.
pub fn generate_greedy<M: StepModel>(model: &M, prompt: &[usize], vprime: Option<&Matrix>, max_len: usize) -> Result<Generation> {
    if max_len == 0 {
        return Err(Error::Input("max_len must be at least 1".into()));
    }
    let (mut state, mut lp) = model.start(prompt, vprime)?;
    let max_len = limit(model, &state, max_len);
    let mut out = Generation {
        tokens: Vec::new(),
        logprob: 0.0,
    };
    loop {
        let t = ranked(&lp, 1)[0];
        out.tokens.push(t);
        out.logprob += lp[t];
        if t == EOS || out.tokens.len() == max_len {
            return Ok(out);
        }
        lp = model.advance(&mut state, t)?;
    }
}

struct Hyp<S> {
    tokens: Vec<usize>,
    logprob: f64,
    state: S,
    next: Vec<f64>,
}

fn by_score_then_tokens(a: &(f64, Vec<usize>), b: &(f64, Vec<usize>)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
}

/// Length-normalized beam search.
///
/// Each step keeps the `beam` best extensions by cumulative
/// log-probability (ties: lexicographically smaller token sequence).
/// Extensions ending in EOS, and all survivors at the length limit, move
/// to the finished pool; the finished hypothesis with the highest
/// log-probability per token wins. The greedy path joins the pool, so the
/// result never scores below greedy decoding.
pub fn generate_beam<M: StepModel>(
    model: &M,
    prompt: &[usize],
    vprime: Option<&Matrix>,
    beam: usize,
    max_len: usize,
) -> Result<Generation> {
    if beam == 0 || max_len == 0 {
        return Err(Error::Input("beam and max_len must be at least 1".into()));
    }
    let (state, next) = model.start(prompt, vprime)?;
    let max_len = limit(model, &state, max_len);
    let mut active = vec![Hyp {
        tokens: Vec::new(),
        logprob: 0.0,
        state,
        next,
    }];
    let mut finished: Vec<Generation> = Vec::new();
    while !active.is_empty() {
        let mut cands: Vec<(f64, Vec<usize>, usize)> = Vec::new();
        for (h, hyp) in active.iter().enumerate() {
            for t in ranked(&hyp.next, beam) {
                let mut toks = hyp.tokens.clone();
                toks.push(t);
                cands.push((hyp.logprob + hyp.next[t], toks, h));
            }
        }
        cands.sort_by(|a, b| by_score_then_tokens(&(a.0, a.1.clone()), &(b.0, b.1.clone())));
        cands.truncate(beam);
        let mut survivors = Vec::with_capacity(beam);
        for (score, toks, h) in cands {
            let last = *toks.last().expect("extension has a token");
            if last == EOS || toks.len() == max_len {
                finished.push(Generation {
                    tokens: toks,
                    logprob: score,
                });
                continue;
            }
            let mut state = active[h].state.clone();
            let next = model.advance(&mut state, last)?;
            survivors.push(Hyp {
                tokens: toks,
                logprob: score,
                state,
                next,
            });
        }
        active = survivors;
    }
    if beam > 1 {
        finished.push(generate_greedy(model, prompt, vprime, max_len)?);
    }
    finished
        .into_iter()
        .min_by(|a, b| {
            b.normalized()
                .total_cmp(&a.normalized())
                .then_with(|| a.tokens.cmp(&b.tokens))
        })
        .ok_or_else(|| Error::Internal("beam search finished without hypotheses".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed next-token tables keyed by the last token.
    struct Table {
        rows: Vec<Vec<f64>>,
    }

    impl StepModel for Table {
        type State = usize;

        fn start(&self, _: &[usize], _: Option<&Matrix>) -> Result<(usize, Vec<f64>)> {
            Ok((0, self.rows[0].clone()))
        }

        fn advance(&self, state: &mut usize, token: usize) -> Result<Vec<f64>> {
            *state += 1;
            Ok(self.rows[token].clone())
        }

        fn remaining(&self, _: &usize) -> usize {
            100
        }
    }

    fn ln(ps: &[f64]) -> Vec<f64> {
        ps.iter().map(|p| p.ln()).collect()
    }

    /// Vocabulary of 7: specials 0-3, then tokens 4, 5, 6.
    fn table() -> Table {
        let z = 1e-12;
        Table {
            rows: vec![
                ln(&[z, z, z, z, 0.5, 0.4, 0.1 - 4.0 * z]),
                ln(&[z; 7]),
                ln(&[z; 7]),
                ln(&[z; 7]),
                // after 4: flat, EOS only 0.3
                ln(&[z, z, 0.3, z, 0.35, 0.35, 0.0]),
                // after 5: EOS almost certain
                ln(&[z, z, 0.99, z, 0.005, 0.005, 0.0]),
                ln(&[z, z, 1.0, z, 0.0, 0.0, 0.0]),
            ],
        }
    }

    #[test]
    fn greedy_picks_argmax_with_low_id_ties() {
        let g = generate_greedy(&table(), &[], None, 3).unwrap();
        // 4 (0.5), then 4 vs 5 tie at 0.35 -> 4, then again 4: hits the limit
        assert_eq!(g.tokens, vec![4, 4, 4]);
    }

    #[test]
    fn beam_one_equals_greedy() {
        for max_len in 1..6 {
            let g = generate_greedy(&table(), &[], None, max_len).unwrap();
            let b = generate_beam(&table(), &[], None, 1, max_len).unwrap();
            assert_eq!(g, b);
        }
    }

    #[test]
    fn wider_beam_finds_better_normalized_score() {
        let g = generate_greedy(&table(), &[], None, 5).unwrap();
        let b = generate_beam(&table(), &[], None, 3, 5).unwrap();
        assert_eq!(b.tokens, vec![5, EOS]);
        assert!(b.normalized() >= g.normalized());
    }

    /// Next-token tables keyed by the whole generated prefix.
    struct Tree {
        rows: Vec<(Vec<usize>, Vec<f64>)>,
        fallback: Vec<f64>,
    }

    impl StepModel for Tree {
        type State = Vec<usize>;

        fn start(&self, _: &[usize], _: Option<&Matrix>) -> Result<(Vec<usize>, Vec<f64>)> {
            Ok((Vec::new(), self.row(&[])))
        }

        fn advance(&self, state: &mut Vec<usize>, token: usize) -> Result<Vec<f64>> {
            state.push(token);
            Ok(self.row(state))
        }

        fn remaining(&self, _: &Vec<usize>) -> usize {
            100
        }
    }

    impl Tree {
        fn row(&self, prefix: &[usize]) -> Vec<f64> {
            let found = self.rows.iter().find(|(p, _)| p == prefix);
            found.map_or_else(|| self.fallback.clone(), |(_, r)| r.clone())
        }
    }

    #[test]
    fn pruned_greedy_path_still_bounds_the_beam() {
        let z = 1e-12;
        // greedy 4 7 EOS has cumulative 0.12; beam 2 keeps 5 4 and 5 5
        // (0.175 each) instead and both run into a flat tail
        let t = Tree {
            rows: vec![
                (vec![], ln(&[z, z, z, z, 0.4, 0.35, 0.25, z])),
                (vec![4], ln(&[z, z, z, z, 0.24, 0.23, 0.23, 0.3])),
                (vec![4, 7], ln(&[z, z, 1.0, z, z, z, z, z])),
                (vec![5], ln(&[z, z, z, z, 0.5, 0.5, z, z])),
            ],
            fallback: ln(&[z, z, 0.01, z, 0.2475, 0.2475, 0.2475, 0.2475]),
        };
        let g = generate_greedy(&t, &[], None, 3).unwrap();
        assert_eq!(g.tokens, vec![4, 7, EOS]);
        let b = generate_beam(&t, &[], None, 2, 3).unwrap();
        assert!(b.normalized() >= g.normalized());
    }

    #[test]
    fn zero_sizes_rejected() {
        assert!(generate_greedy(&table(), &[], None, 0).is_err());
        assert!(generate_beam(&table(), &[], None, 0, 3).is_err());
    }
}
