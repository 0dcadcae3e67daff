use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Oracle, OracleError, OracleQuery, OracleReply, Token};
use crate::sampling::log_dirichlet;

/// Lazily materialized on-model tree: the categorical at every node is an
/// independent symmetric Dirichlet(`alpha`) draw seeded by `(seed, prefix)`.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    seed: u64,
    alpha: f64,
    branching: usize,
    depth: Option<usize>,
    terminal_token: Option<Token>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SyntheticOracle {
    pub fn new(seed: u64, alpha: f64, branching: usize) -> Self {
        assert!(alpha > 0.0 && alpha.is_finite(), "alpha must be positive");
        assert!(branching >= 1, "branching must be >= 1");
        SyntheticOracle {
            seed,
            alpha,
            branching,
            depth: None,
            terminal_token: None,
        }
    }

    /// Rejects prefixes of length `>= depth`.
    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = Some(depth);
        self
    }

    /// Flags `token` as terminal in every reply.
    pub fn with_terminal_token(mut self, token: Token) -> Self {
        self.terminal_token = Some(token);
        self
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    fn node_seed(&self, prefix: &[Token]) -> u64 {
        let mut h = splitmix(self.seed ^ 0x5u64.rotate_left(61));
        h = splitmix(h ^ prefix.len() as u64);
        for &t in prefix {
            h = splitmix(h ^ u64::from(t));
        }
        h
    }

    fn check_prefix(&self, prefix: &[Token]) -> Result<(), OracleError> {
        if let Some(&token) = prefix.iter().find(|&&t| t as usize >= self.branching) {
            return Err(OracleError::TokenOutOfRange {
                token,
                vocab: self.branching,
            });
        }
        if let Some(d) = self.depth {
            if prefix.len() >= d {
                return Err(OracleError::InvalidQuery(format!(
                    "prefix length {} reaches depth {d}",
                    prefix.len()
                )));
            }
        }
        Ok(())
    }

    /// Log-probabilities of the full categorical at `prefix`, indexed by token.
    pub fn log_categorical(&self, prefix: &[Token]) -> Result<Vec<f64>, OracleError> {
        self.check_prefix(prefix)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.node_seed(prefix));
        Ok(log_dirichlet(self.alpha, self.branching, &mut rng))
    }
}

impl Oracle for SyntheticOracle {
    fn query(&self, q: &OracleQuery) -> Result<OracleReply, OracleError> {
        let logs = self.log_categorical(&q.prefix)?;
        let mut order: Vec<usize> = (0..logs.len()).collect();
        order.sort_by(|&a, &b| logs[b].total_cmp(&logs[a]).then(a.cmp(&b)));
        order.truncate(q.top_k);
        let tokens: Vec<Token> = order.iter().map(|&i| i as Token).collect();
        Ok(OracleReply {
            logprobs: order.iter().map(|&i| logs[i].min(0.0)).collect(),
            terminal: tokens
                .iter()
                .map(|&t| Some(t) == self.terminal_token)
                .collect(),
            tokens,
        })
    }

    fn vocab_size(&self) -> Option<usize> {
        Some(self.branching)
    }

    fn eos_token(&self) -> Option<Token> {
        self.terminal_token
    }
}
