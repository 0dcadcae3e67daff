//! The search loop: select a boundary node by acquisition, expand it through
//! the oracle, draw posterior samples for the new children, back them up and
//! stop once the belief that an unseen path beats the best leaf is small.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{DeltaTable, DEFAULT_SAMPLES};
use crate::oracle::{checked_query, Oracle, OracleError, OracleQuery, Token};
use crate::tree::{
    argmax, backup, posterior_samples, NodeId, NodeStatus, SearchTree, Strategy, TreeError,
};

/// Stopping threshold used when none is given.
pub const DEFAULT_EPSILON: f64 = 0.1;

/// How the next node to expand is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Descend from the root, taking the highest-acquisition child at each
    /// level until a boundary node is reached.
    #[default]
    Recursive,
    /// Take the boundary node most likely to hold the best value among all
    /// open boundary nodes and found leaves. Costs a pass over the boundary
    /// per iteration, so it suits small trees.
    FullBoundary,
}

impl std::str::FromStr for Selection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "recursive" => Ok(Selection::Recursive),
            "full-boundary" | "boundary" => Ok(Selection::FullBoundary),
            other => Err(format!(
                "unknown selection `{other}` (expected recursive or full-boundary)"
            )),
        }
    }
}

impl std::fmt::Display for Selection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Selection::Recursive => "recursive",
            Selection::FullBoundary => "full-boundary",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no boundary node can be expanded")]
    NoEligibleBoundary,
    #[error("node {0:?} is already expanded")]
    AlreadyExpanded(NodeId),
    #[error("level {level} already has {cap} expansions")]
    LevelCapReached { level: usize, cap: usize },
    #[error("oracle failed expanding prefix {prefix:?}")]
    Oracle {
        prefix: Vec<Token>,
        #[source]
        source: OracleError,
        /// Best leaf found before the failure, if any.
        partial: Option<Box<SearchResult>>,
    },
    #[error("search ended without reaching a terminal leaf")]
    NoLeafFound,
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UltsConfig {
    /// Maximum sequence length.
    pub depth: usize,
    /// Children requested per expansion.
    pub branching: usize,
    /// Posterior samples per node.
    pub samples: usize,
    pub epsilon: f64,
    /// Cap on expansions per level and on terminal leaves; `None` is unbounded.
    pub k_max: Option<usize>,
    pub strategy: Strategy,
    #[serde(default)]
    pub selection: Selection,
    pub terminal_token: Option<Token>,
    pub seed: u64,
}

impl UltsConfig {
    pub fn new(depth: usize, branching: usize) -> Self {
        UltsConfig {
            depth,
            branching,
            samples: DEFAULT_SAMPLES,
            epsilon: DEFAULT_EPSILON,
            k_max: None,
            strategy: Strategy::default(),
            selection: Selection::default(),
            terminal_token: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::InvalidConfig(m.to_string()));
        if self.depth == 0 {
            return bad("depth must be >= 1");
        }
        if self.branching == 0 {
            return bad("branching must be >= 1");
        }
        if self.samples == 0 {
            return bad("samples must be >= 1");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if self.k_max == Some(0) {
            return bad("k_max must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// Belief that a better leaf exists dropped to epsilon.
    Confidence,
    /// `k_max` terminal leaves were found.
    LeafBudget,
    /// No expandable boundary node remained.
    TreeExhausted,
    /// A fixed-schedule decoder ran to completion.
    Completed,
    /// The oracle failed; the result is the best leaf found before that.
    Interrupted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub tokens: Vec<Token>,
    #[serde(rename = "loglik")]
    pub best_loglik: f64,
    pub nodes_expanded: usize,
    pub iterations: usize,
    pub termination: Termination,
}

/// Fraction of root samples strictly above `c_star`.
///
/// After a backup the samples along the best leaf's branch equal `c_star`
/// exactly, so ties count as "no better path".
pub fn termination_probability(root_samples: &[f64], c_star: f64) -> f64 {
    if root_samples.is_empty() {
        return 1.0;
    }
    let above = root_samples.iter().filter(|&&v| v > c_star).count();
    above as f64 / root_samples.len() as f64
}

/// Descends from the root along the highest-acquisition children that still
/// lead to an expandable boundary node.
pub fn select(tree: &SearchTree, k_max: Option<usize>) -> Result<NodeId, SearchError> {
    let eligible = tree.eligibility(k_max);
    let mut cur = tree.root();
    if !eligible[cur.0] {
        return Err(SearchError::NoEligibleBoundary);
    }
    loop {
        let node = tree.node(cur);
        if node.status == NodeStatus::Boundary {
            return Ok(cur);
        }
        let scores = tree.child_acquisition(cur)?;
        let masked: Vec<f64> = node
            .children
            .iter()
            .zip(&scores)
            .map(|(c, s)| if eligible[c.0] { *s } else { f64::NEG_INFINITY })
            .collect();
        let best = argmax(&masked).expect("eligible node has children");
        cur = node.children[best];
    }
}

/// Per-sample maximum over the samples of `nodes`.
fn coordinate_max(tree: &SearchTree, nodes: &[NodeId]) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; tree.n_samples()];
    for id in nodes {
        for (o, v) in out.iter_mut().zip(&tree.node(*id).v_samples) {
            if *v > *o {
                *o = *v;
            }
        }
    }
    out
}

/// Picks, among the expandable nodes of `open`, the one that most often holds
/// the per-sample maximum over `open` and the best leaf value `c_star`.
/// When no open node ever beats `c_star` the one with the largest sample wins.
pub fn select_full_boundary(
    tree: &SearchTree,
    open: &[NodeId],
    k_max: Option<usize>,
    c_star: f64,
) -> Result<NodeId, SearchError> {
    let eligible: Vec<NodeId> = open
        .iter()
        .copied()
        .filter(|id| {
            k_max.is_none_or(|cap| tree.expansions_per_level()[tree.node(*id).level] < cap)
        })
        .collect();
    if eligible.is_empty() {
        return Err(SearchError::NoEligibleBoundary);
    }
    let mut wins = vec![0usize; eligible.len()];
    for n in 0..tree.n_samples() {
        let mut best: Option<usize> = None;
        let mut best_v = c_star;
        for (i, id) in eligible.iter().enumerate() {
            let v = tree.node(*id).v_samples[n];
            if v > best_v {
                best = Some(i);
                best_v = v;
            }
        }
        if let Some(i) = best {
            wins[i] += 1;
        }
    }
    let scores: Vec<f64> = if wins.iter().any(|&w| w > 0) {
        wins.iter().map(|&w| w as f64).collect()
    } else {
        eligible
            .iter()
            .map(|id| {
                tree.node(*id)
                    .v_samples
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    };
    Ok(eligible[argmax(&scores).expect("non-empty")])
}

fn is_terminal(token: Token, flagged: bool, terminal_token: Option<Token>) -> bool {
    terminal_token.is_some_and(|t| t == token || flagged)
}

/// Queries the oracle for `node`'s top-`k` children and adds them to the tree.
///
/// Children at the depth limit, or carrying `terminal_token` (or flagged
/// terminal by the oracle when a terminal token is configured), are terminal
/// leaves. Boundary children are returned without samples.
pub fn expand<O: Oracle + ?Sized>(
    tree: &mut SearchTree,
    node: NodeId,
    oracle: &O,
    k: usize,
    terminal_token: Option<Token>,
    k_max: Option<usize>,
) -> Result<Vec<NodeId>, SearchError> {
    let n = tree.node(node);
    if n.status != NodeStatus::Boundary {
        return Err(SearchError::AlreadyExpanded(node));
    }
    if let Some(cap) = k_max {
        if tree.expansions_per_level()[n.level] >= cap {
            return Err(SearchError::LevelCapReached {
                level: n.level,
                cap,
            });
        }
    }
    let prefix = tree.tokens_to(node);
    let reply = checked_query(oracle, &OracleQuery::new(prefix.clone(), k)).map_err(|source| {
        SearchError::Oracle {
            prefix,
            source,
            partial: None,
        }
    })?;
    tree.mark_expanded(node);
    let children = reply
        .tokens
        .iter()
        .zip(&reply.logprobs)
        .zip(&reply.terminal)
        .map(|((&tok, &lp), &flag)| {
            tree.add_child(node, tok, lp, is_terminal(tok, flag, terminal_token))
        })
        .collect();
    Ok(children)
}

/// Maps a tree level onto the table level holding the same number of
/// remaining steps. A shallower table clamps to its deepest fitted level.
fn table_level(table: &DeltaTable, horizon: usize, level: usize) -> usize {
    if table.depth >= horizon {
        table.depth - (horizon - level)
    } else {
        level.min(table.depth.saturating_sub(1)).max(1)
    }
}

/// Samples of the root's optimal value used by the stopping rule. Under the
/// descendant strategy each root child carries its best descendant's samples,
/// and the root value is their per-sample maximum.
fn termination_samples(tree: &SearchTree, strategy: Strategy) -> Vec<f64> {
    let root = tree.node(tree.root());
    match strategy {
        Strategy::PosteriorDescendant if !root.children.is_empty() => {
            coordinate_max(tree, &root.children)
        }
        _ => root.v_samples.clone(),
    }
}

/// One search over an oracle. Holds the tree so callers can inspect it
/// after [`Searcher::run`].
pub struct Searcher<'a, O: ?Sized> {
    oracle: &'a O,
    table: &'a DeltaTable,
    config: UltsConfig,
    tree: SearchTree,
    rng: ChaCha8Rng,
    best: Option<NodeId>,
    /// unexpanded non-leaf nodes, in creation order
    open: Vec<NodeId>,
    iterations: usize,
    /// best leaf log-likelihood after every iteration
    history: Vec<f64>,
}

impl<'a, O: Oracle + ?Sized> Searcher<'a, O> {
    pub fn new(
        oracle: &'a O,
        table: &'a DeltaTable,
        config: UltsConfig,
    ) -> Result<Self, SearchError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let root_samples = if config.depth == 1 {
            vec![0.0; config.samples]
        } else {
            posterior_samples(
                0.0,
                table_level(table, config.depth, 1),
                table,
                config.samples,
                &mut rng,
            )?
        };
        Ok(Searcher {
            tree: SearchTree::new(config.depth, config.branching, root_samples),
            oracle,
            table,
            config,
            rng,
            best: None,
            open: vec![NodeId(0)],
            iterations: 0,
            history: Vec::new(),
        })
    }

    pub fn tree(&self) -> &SearchTree {
        &self.tree
    }

    pub fn best_loglik(&self) -> f64 {
        self.best
            .map(|b| self.tree.node(b).path_loglik)
            .unwrap_or(f64::NEG_INFINITY)
    }

    /// Best leaf log-likelihood recorded after each iteration.
    pub fn history(&self) -> &[f64] {
        &self.history
    }

    /// Belief that some unexplored path beats the best leaf found so far.
    pub fn termination_probability(&self) -> Result<f64, SearchError> {
        let c_star = self.best_loglik();
        match self.config.selection {
            Selection::Recursive => {
                let samples = termination_samples(&self.tree, self.config.strategy);
                Ok(termination_probability(&samples, c_star))
            }
            Selection::FullBoundary => {
                if self.open.is_empty() {
                    return Ok(0.0);
                }
                Ok(termination_probability(
                    &coordinate_max(&self.tree, &self.open),
                    c_star,
                ))
            }
        }
    }

    fn result(&self, termination: Termination) -> Option<SearchResult> {
        self.best.map(|b| SearchResult {
            tokens: self.tree.tokens_to(b),
            best_loglik: self.tree.node(b).path_loglik,
            nodes_expanded: self.tree.nodes_expanded(),
            iterations: self.iterations,
            termination,
        })
    }

    /// Reason to stop before the next iteration, if any.
    fn stop_reason(&self) -> Result<Option<Termination>, SearchError> {
        if let Some(cap) = self.config.k_max {
            if self.tree.terminal_leaves() >= cap {
                return Ok(Some(Termination::LeafBudget));
            }
        }
        if self.termination_probability()? <= self.config.epsilon {
            return Ok(Some(Termination::Confidence));
        }
        Ok(None)
    }

    /// Runs one select/expand/backup iteration.
    pub fn step(&mut self) -> Result<(), SearchError> {
        let node = match self.config.selection {
            Selection::Recursive => select(&self.tree, self.config.k_max)?,
            Selection::FullBoundary => select_full_boundary(
                &self.tree,
                &self.open,
                self.config.k_max,
                self.best_loglik(),
            )?,
        };
        let children = expand(
            &mut self.tree,
            node,
            self.oracle,
            self.config.branching,
            self.config.terminal_token,
            self.config.k_max,
        )?;
        self.open.retain(|&id| id != node);
        for &child in &children {
            let c = self.tree.node(child);
            if c.status == NodeStatus::TerminalLeaf {
                if c.path_loglik > self.best_loglik() {
                    self.best = Some(child);
                }
            } else {
                let level = table_level(self.table, self.config.depth, c.level);
                let samples = posterior_samples(
                    c.path_loglik,
                    level,
                    self.table,
                    self.config.samples,
                    &mut self.rng,
                )?;
                self.tree.set_samples(child, samples);
                self.open.push(child);
            }
        }
        let path = self.tree.path_to(node);
        backup(&mut self.tree, &path, self.config.strategy)?;
        self.iterations += 1;
        self.history.push(self.best_loglik());
        Ok(())
    }

    pub fn run(&mut self) -> Result<SearchResult, SearchError> {
        let termination = loop {
            if let Some(reason) = self.stop_reason()? {
                break reason;
            }
            match self.step() {
                Ok(()) => {}
                Err(SearchError::NoEligibleBoundary) => break Termination::TreeExhausted,
                Err(SearchError::Oracle { prefix, source, .. }) => {
                    return Err(SearchError::Oracle {
                        prefix,
                        source,
                        partial: self.result(Termination::Interrupted).map(Box::new),
                    })
                }
                Err(e) => return Err(e),
            }
        };
        self.result(termination).ok_or(SearchError::NoLeafFound)
    }
}

/// Fixed-length search. The table must cover at least `config.depth` levels.
pub fn ults_search<O: Oracle + ?Sized>(
    oracle: &O,
    table: &DeltaTable,
    config: &UltsConfig,
) -> Result<SearchResult, SearchError> {
    if table.depth < config.depth {
        return Err(SearchError::InvalidConfig(format!(
            "prior table covers depth {}, search needs {}",
            table.depth, config.depth
        )));
    }
    Searcher::new(oracle, table, config.clone())?.run()
}

/// Search that ends sequences at `config.terminal_token`, with `config.depth`
/// as a hard cap. Levels beyond the table clamp to its deepest fitted level.
pub fn decode_variable_length<O: Oracle + ?Sized>(
    oracle: &O,
    table: &DeltaTable,
    config: &UltsConfig,
) -> Result<SearchResult, SearchError> {
    if config.terminal_token.is_none() {
        return Err(SearchError::InvalidConfig(
            "variable-length decoding needs a terminal token".into(),
        ));
    }
    Searcher::new(oracle, table, config.clone())?.run()
}
