//! Uncertainty-guided likelihood-tree search.
//!
//! Decoding is treated as search for the most likely root-to-leaf path in a
//! tree whose transition probabilities are revealed one node at a time by an
//! [`Oracle`]. A prior over those categoricals ([`CategoricalPrior`]) yields a
//! per-level belief over the best likelihood still reachable below a node
//! ([`DeltaTable`]). The search expands the node most likely to lie on the
//! optimal path and stops once it is confident that no unexplored path beats
//! the best leaf found.
//!
//! ```
//! use rand::SeedableRng;
//! use ults::{precompute_delta_table, ults_search, CategoricalPrior, SyntheticOracle, UltsConfig};
//!
//! let prior = CategoricalPrior::dirichlet(0.2).unwrap();
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
//! let table = precompute_delta_table(4, 5, &prior, 1000, &mut rng).unwrap();
//! let oracle = SyntheticOracle::new(7, 0.2, 5);
//! let result = ults_search(&oracle, &table, &UltsConfig::new(4, 5)).unwrap();
//! assert_eq!(result.tokens.len(), 4);
//! ```

pub mod baselines;
pub mod belief;
pub mod exec;
pub mod experiment;
pub mod oracle;
mod sampling;
pub mod search;
pub mod tree;

pub use baselines::{
    beam_search, exhaustive_optimum, exhaustive_optimum_with, greedy, BaselineError,
};
pub use belief::{
    delta_samples, fit_beta_mle, precompute_delta_table, precompute_delta_table_with, read_pool,
    sample_categorical, write_pool, BeliefError, BetaParams, CategoricalPrior, DeltaTable,
    PoolEntry,
};
pub use exec::Execution;
pub use oracle::{
    ExternalOracle, Oracle, OracleError, OracleQuery, OracleReply, SyntheticOracle, Token,
    TraceEntry, TraceOracle, TraceRecorder,
};
pub use search::{
    decode_variable_length, termination_probability, ults_search, SearchError, SearchResult,
    Searcher, Selection, Termination, UltsConfig,
};
pub use tree::{acquisition, posterior_samples, NodeId, NodeStatus, SearchTree, Strategy};
