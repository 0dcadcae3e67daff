//! Sources of next-token distributions behind a single interface.

mod external;
mod synthetic;
mod trace;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use external::{ExternalOracle, Frame, DEFAULT_TIMEOUT, PROTOCOL_VERSION};
pub use synthetic::SyntheticOracle;
pub use trace::{TraceEntry, TraceOracle, TraceRecorder};

pub type Token = u32;

const MASS_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: Token, vocab: usize },
    #[error("prefix {0:?} not present in trace")]
    PrefixNotInTrace(Vec<Token>),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend reported error: {0}")]
    Backend(String),
    #[error("backend did not answer within {0:?}")]
    Timeout(std::time::Duration),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleQuery {
    pub prefix: Vec<Token>,
    pub top_k: usize,
}

impl OracleQuery {
    pub fn new(prefix: Vec<Token>, top_k: usize) -> Self {
        OracleQuery { prefix, top_k }
    }
}

/// The `top_k` most likely next tokens, in descending log-probability.
///
/// Log-probabilities are relative to the full categorical; truncation does not
/// renormalize them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReply {
    pub tokens: Vec<Token>,
    pub logprobs: Vec<f64>,
    #[serde(rename = "terminal")]
    pub terminal: Vec<bool>,
}

impl OracleReply {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks the reply invariants against the query that produced it.
    pub fn validate(&self, top_k: usize) -> Result<(), OracleError> {
        let bad = |m: String| Err(OracleError::ProtocolViolation(m));
        let n = self.tokens.len();
        if self.logprobs.len() != n || self.terminal.len() != n {
            return bad(format!(
                "reply lists differ in length: {} tokens, {} logprobs, {} flags",
                n,
                self.logprobs.len(),
                self.terminal.len()
            ));
        }
        if n > top_k {
            return bad(format!("{n} tokens returned for top_k = {top_k}"));
        }
        if let Some(lp) = self.logprobs.iter().find(|lp| lp.is_nan() || **lp > 1e-9) {
            return bad(format!("log-probability {lp} is not <= 0"));
        }
        if self.logprobs.windows(2).any(|w| w[1] > w[0]) {
            return bad("log-probabilities are not in descending order".into());
        }
        let mass: f64 = self.logprobs.iter().map(|lp| lp.exp()).sum();
        if mass > 1.0 + MASS_TOL {
            return bad(format!("probabilities sum to {mass}"));
        }
        let mut seen = self.tokens.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate tokens in reply".into());
        }
        Ok(())
    }

    /// Keeps the first `k` entries.
    pub fn truncated(mut self, k: usize) -> Self {
        self.tokens.truncate(k);
        self.logprobs.truncate(k);
        self.terminal.truncate(k);
        self
    }
}

/// A token-distribution source. Implementations must be deterministic for a
/// given prefix.
pub trait Oracle {
    fn query(&self, q: &OracleQuery) -> Result<OracleReply, OracleError>;

    /// Full vocabulary size, when known. Exhaustive enumeration needs it.
    fn vocab_size(&self) -> Option<usize> {
        None
    }

    fn eos_token(&self) -> Option<Token> {
        None
    }
}

impl<O: Oracle + ?Sized> Oracle for &O {
    fn query(&self, q: &OracleQuery) -> Result<OracleReply, OracleError> {
        (**self).query(q)
    }
    fn vocab_size(&self) -> Option<usize> {
        (**self).vocab_size()
    }
    fn eos_token(&self) -> Option<Token> {
        (**self).eos_token()
    }
}

impl<O: Oracle + ?Sized> Oracle for Box<O> {
    fn query(&self, q: &OracleQuery) -> Result<OracleReply, OracleError> {
        (**self).query(q)
    }
    fn vocab_size(&self) -> Option<usize> {
        (**self).vocab_size()
    }
    fn eos_token(&self) -> Option<Token> {
        (**self).eos_token()
    }
}

/// Queries `oracle` and validates the reply.
pub fn checked_query<O: Oracle + ?Sized>(
    oracle: &O,
    q: &OracleQuery,
) -> Result<OracleReply, OracleError> {
    if q.top_k == 0 {
        return Err(OracleError::InvalidQuery("top_k must be >= 1".into()));
    }
    let reply = oracle.query(q)?;
    reply.validate(q.top_k)?;
    Ok(reply)
}

/// Counts queries passed through to the inner oracle.
#[derive(Debug)]
pub struct CountingOracle<O> {
    inner: O,
    count: AtomicUsize,
}

impl<O> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        CountingOracle {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn queries(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }

    pub fn into_inner(self) -> O {
        self.inner
    }
}

impl<O: Oracle> Oracle for CountingOracle<O> {
    fn query(&self, q: &OracleQuery) -> Result<OracleReply, OracleError> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.query(q)
    }
    fn vocab_size(&self) -> Option<usize> {
        self.inner.vocab_size()
    }
    fn eos_token(&self) -> Option<Token> {
        self.inner.eos_token()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reply(logprobs: Vec<f64>) -> OracleReply {
        let n = logprobs.len();
        OracleReply {
            tokens: (0..n as u32).collect(),
            logprobs,
            terminal: vec![false; n],
        }
    }

    #[test]
    fn validation_catches_bad_replies() {
        assert!(reply(vec![-0.2, -2.0]).validate(2).is_ok());
        assert!(reply(vec![-2.0, -0.1]).validate(2).is_err());
        assert!(reply(vec![-0.2, -2.0]).validate(1).is_err());
        assert!(reply(vec![0.5]).validate(1).is_err());
        assert!(reply(vec![f64::NAN]).validate(1).is_err());
        assert!(reply(vec![-0.1, -0.2]).validate(2).is_err()); // mass > 1
        let mut r = reply(vec![-1.0, -2.0]);
        r.terminal.pop();
        assert!(r.validate(2).is_err());
        let mut r = reply(vec![-1.0, -2.0]);
        r.tokens = vec![4, 4];
        assert!(r.validate(2).is_err());
    }

    proptest! {
        // Arbitrary lists pass validation exactly when they are descending,
        // non-positive and sub-normalized.
        #[test]
        fn validation_matches_invariants(lps in prop::collection::vec(-20.0f64..0.5, 0..8), k in 1usize..10) {
            let r = reply(lps.clone());
            let ok = lps.len() <= k
                && lps.iter().all(|x| *x <= 1e-9)
                && lps.windows(2).all(|w| w[1] <= w[0])
                && lps.iter().map(|x| x.exp()).sum::<f64>() <= 1.0 + MASS_TOL;
            prop_assert_eq!(r.validate(k).is_ok(), ok);
        }
    }
}
