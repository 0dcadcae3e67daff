//! Reference decoders over the same oracle interface: beam search, greedy
//! descent and brute-force enumeration.

use thiserror::Error;

use crate::oracle::{checked_query, Oracle, OracleError, OracleQuery, Token};
use crate::search::{SearchResult, Termination};

/// Largest number of leaves `exhaustive_optimum` will enumerate.
pub const MAX_EXHAUSTIVE_LEAVES: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("oracle does not report a vocabulary size")]
    UnknownVocabulary,
    #[error("tree has about {leaves:.3e} leaves, more than the enumeration limit")]
    TreeTooLarge { leaves: f64 },
    #[error("oracle failed expanding prefix {prefix:?}")]
    Oracle {
        prefix: Vec<Token>,
        #[source]
        source: OracleError,
    },
}

fn query<O: Oracle + ?Sized>(
    oracle: &O,
    prefix: &[Token],
    k: usize,
) -> Result<crate::oracle::OracleReply, BaselineError> {
    checked_query(oracle, &OracleQuery::new(prefix.to_vec(), k)).map_err(|source| {
        BaselineError::Oracle {
            prefix: prefix.to_vec(),
            source,
        }
    })
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<Token>,
    loglik: f64,
}

fn better(a: &Hypothesis, b: &Hypothesis) -> bool {
    a.loglik > b.loglik
}

/// Beam search keeping the `beam_width` best prefixes per level.
///
/// Each live prefix is expanded with its top `beam_width` children. Children
/// carrying `terminal_token` (or flagged terminal when a terminal token is
/// set) move to a completed set and compete by total log-likelihood.
pub fn beam_search<O: Oracle + ?Sized>(
    oracle: &O,
    beam_width: usize,
    depth: usize,
    terminal_token: Option<Token>,
) -> Result<SearchResult, BaselineError> {
    if beam_width == 0 {
        return Err(BaselineError::InvalidArgument(
            "beam width must be >= 1".into(),
        ));
    }
    let mut beam = vec![Hypothesis {
        tokens: Vec::new(),
        loglik: 0.0,
    }];
    let mut completed: Option<Hypothesis> = None;
    let mut queries = 0;
    for _ in 0..depth {
        // (hypothesis, token) in expansion order, so a stable sort keeps
        // insertion order among equal keys
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for h in &beam {
            let reply = query(oracle, &h.tokens, beam_width)?;
            queries += 1;
            for ((&tok, &lp), &flag) in reply
                .tokens
                .iter()
                .zip(&reply.logprobs)
                .zip(&reply.terminal)
            {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                let child = Hypothesis {
                    tokens,
                    loglik: h.loglik + lp,
                };
                if terminal_token.is_some_and(|t| t == tok || flag) {
                    if completed.as_ref().is_none_or(|c| better(&child, c)) {
                        completed = Some(child);
                    }
                } else {
                    candidates.push(child);
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.loglik
                .total_cmp(&a.loglik)
                .then_with(|| a.tokens.last().cmp(&b.tokens.last()))
        });
        candidates.truncate(beam_width);
        beam = candidates;
        if beam.is_empty() {
            break;
        }
    }
    // survivors of the last level are complete at the depth cap
    for h in beam {
        if completed.as_ref().is_none_or(|c| better(&h, c)) {
            completed = Some(h);
        }
    }
    let best = completed
        .ok_or_else(|| BaselineError::InvalidArgument("oracle returned no children".into()))?;
    Ok(SearchResult {
        tokens: best.tokens,
        best_loglik: best.loglik,
        nodes_expanded: queries,
        iterations: queries,
        termination: Termination::Completed,
    })
}

/// Greedy descent: beam search with width 1.
pub fn greedy<O: Oracle + ?Sized>(
    oracle: &O,
    depth: usize,
    terminal_token: Option<Token>,
) -> Result<SearchResult, BaselineError> {
    beam_search(oracle, 1, depth, terminal_token)
}

/// Exact optimum of a fixed-depth tree by full enumeration.
/// Ties go to the lexicographically smallest token sequence.
pub fn exhaustive_optimum<O: Oracle + ?Sized>(
    oracle: &O,
    depth: usize,
) -> Result<(f64, Vec<Token>), BaselineError> {
    exhaustive_optimum_with(oracle, depth, None)
}

/// As [`exhaustive_optimum`], with sequences ending early at `terminal_token`.
pub fn exhaustive_optimum_with<O: Oracle + ?Sized>(
    oracle: &O,
    depth: usize,
    terminal_token: Option<Token>,
) -> Result<(f64, Vec<Token>), BaselineError> {
    let vocab = oracle
        .vocab_size()
        .ok_or(BaselineError::UnknownVocabulary)?;
    let leaves = (vocab as f64).powi(depth as i32);
    if leaves > MAX_EXHAUSTIVE_LEAVES {
        return Err(BaselineError::TreeTooLarge { leaves });
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    if depth == 0 {
        return Ok((0.0, Vec::new()));
    }
    let mut prefix = Vec::with_capacity(depth);
    enumerate(
        oracle,
        vocab,
        depth,
        terminal_token,
        &mut prefix,
        0.0,
        &mut best,
    )?;
    Ok(best)
}

fn enumerate<O: Oracle + ?Sized>(
    oracle: &O,
    vocab: usize,
    depth: usize,
    terminal_token: Option<Token>,
    prefix: &mut Vec<Token>,
    loglik: f64,
    best: &mut (f64, Vec<Token>),
) -> Result<(), BaselineError> {
    let reply = query(oracle, prefix, vocab)?;
    let mut children: Vec<(Token, f64, bool)> = reply
        .tokens
        .iter()
        .zip(&reply.logprobs)
        .zip(&reply.terminal)
        .map(|((&t, &lp), &f)| (t, lp, terminal_token.is_some_and(|e| e == t || f)))
        .collect();
    children.sort_by_key(|c| c.0);
    for (tok, lp, terminal) in children {
        let value = loglik + lp;
        prefix.push(tok);
        if terminal || prefix.len() == depth {
            if value > best.0 {
                *best = (value, prefix.clone());
            }
        } else {
            enumerate(oracle, vocab, depth, terminal_token, prefix, value, best)?;
        }
        prefix.pop();
    }
    Ok(())
}
