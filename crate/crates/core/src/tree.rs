//! Explored part of the decoding tree and the per-node beliefs over optimal
//! values.
//!
//! Every value lives in log space: `path_loglik` is `ln c(root -> x)` and
//! `v_samples` are draws of `ln v_x`, the best total log-likelihood reachable
//! through `x`.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::belief::{delta_log_samples, BeliefError, DeltaTable};
use crate::oracle::Token;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("acquisition needs at least one child")]
    NoChildren,
    #[error("child {child} has {found} samples, expected {expected}")]
    SampleLengthMismatch {
        child: usize,
        found: usize,
        expected: usize,
    },
    #[error("backup path must start at the root and follow parent links")]
    PathNotRootAnchored,
    #[error(transparent)]
    Belief(#[from] BeliefError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeStatus {
    Boundary,
    Expanded,
    TerminalLeaf,
}

/// Which samples are propagated towards the root after an expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Every node on the path takes the coordinate-wise maximum over its children.
    Posterior,
    /// The best new child's samples are copied up the path unchanged.
    #[default]
    PosteriorDescendant,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "posterior" => Ok(Strategy::Posterior),
            "posterior-descendant" | "descendant" => Ok(Strategy::PosteriorDescendant),
            other => Err(format!(
                "unknown strategy {other:?} (expected posterior | posterior-descendant)"
            )),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Posterior => "posterior",
            Strategy::PosteriorDescendant => "posterior-descendant",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    /// `None` only for the root.
    pub token: Option<Token>,
    pub edge_loglik: f64,
    pub path_loglik: f64,
    pub level: usize,
    pub status: NodeStatus,
    pub v_samples: Vec<f64>,
    /// In the order the oracle returned them (descending edge probability).
    pub children: Vec<NodeId>,
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeDump {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub token: Option<Token>,
    pub edge_loglik: f64,
    pub path_loglik: f64,
    pub level: usize,
    pub status: NodeStatus,
}

#[derive(Debug, Clone)]
pub struct SearchTree {
    nodes: Vec<Node>,
    depth_limit: usize,
    branching: usize,
    n_samples: usize,
    expansions_per_level: Vec<usize>,
    terminal_leaves: usize,
}

impl SearchTree {
    /// A tree holding only the root, with the given root samples.
    pub fn new(depth_limit: usize, branching: usize, root_samples: Vec<f64>) -> Self {
        let root = Node {
            id: NodeId(0),
            parent: None,
            token: None,
            edge_loglik: 0.0,
            path_loglik: 0.0,
            level: 0,
            status: if depth_limit == 0 {
                NodeStatus::TerminalLeaf
            } else {
                NodeStatus::Boundary
            },
            v_samples: root_samples.clone(),
            children: Vec::new(),
        };
        SearchTree {
            n_samples: root_samples.len(),
            nodes: vec![root],
            depth_limit,
            branching,
            expansions_per_level: vec![0; depth_limit.max(1)],
            terminal_leaves: usize::from(depth_limit == 0),
        }
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn depth_limit(&self) -> usize {
        self.depth_limit
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn expansions_per_level(&self) -> &[usize] {
        &self.expansions_per_level
    }

    pub fn nodes_expanded(&self) -> usize {
        self.expansions_per_level.iter().sum()
    }

    pub fn terminal_leaves(&self) -> usize {
        self.terminal_leaves
    }

    pub fn set_samples(&mut self, id: NodeId, samples: Vec<f64>) {
        debug_assert_eq!(samples.len(), self.n_samples);
        self.nodes[id.0].v_samples = samples;
    }

    /// Appends a child. It becomes a terminal leaf at the depth limit or when
    /// `terminal` is set; terminal leaves get constant samples at their
    /// path log-likelihood, other children start with no samples.
    pub fn add_child(
        &mut self,
        parent: NodeId,
        token: Token,
        edge_loglik: f64,
        terminal: bool,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        let p = &self.nodes[parent.0];
        let level = p.level + 1;
        let path_loglik = p.path_loglik + edge_loglik;
        let leaf = terminal || level >= self.depth_limit;
        self.nodes.push(Node {
            id,
            parent: Some(parent),
            token: Some(token),
            edge_loglik,
            path_loglik,
            level,
            status: if leaf {
                NodeStatus::TerminalLeaf
            } else {
                NodeStatus::Boundary
            },
            v_samples: if leaf {
                vec![path_loglik; self.n_samples]
            } else {
                Vec::new()
            },
            children: Vec::new(),
        });
        if leaf {
            self.terminal_leaves += 1;
        }
        self.nodes[parent.0].children.push(id);
        id
    }

    /// Marks a boundary node expanded and counts it against its level.
    pub(crate) fn mark_expanded(&mut self, id: NodeId) {
        let node = &mut self.nodes[id.0];
        debug_assert_eq!(node.status, NodeStatus::Boundary);
        node.status = NodeStatus::Expanded;
        self.expansions_per_level[node.level] += 1;
    }

    /// Node ids from the root down to `id`, inclusive.
    pub fn path_to(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur.0].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Token sequence from the root to `id`.
    pub fn tokens_to(&self, id: NodeId) -> Vec<Token> {
        self.path_to(id)
            .iter()
            .filter_map(|n| self.nodes[n.0].token)
            .collect()
    }

    pub fn children_samples(&self, id: NodeId) -> Vec<&[f64]> {
        self.nodes[id.0]
            .children
            .iter()
            .map(|c| self.nodes[c.0].v_samples.as_slice())
            .collect()
    }

    /// Acquisition of every child of `id`.
    pub fn child_acquisition(&self, id: NodeId) -> Result<Vec<f64>, TreeError> {
        acquisition(&self.children_samples(id))
    }

    /// Whether each node has an expandable boundary node in its subtree,
    /// under an optional per-level expansion cap.
    pub fn eligibility(&self, k_max: Option<usize>) -> Vec<bool> {
        let mut has = vec![false; self.nodes.len()];
        // children always have larger ids than their parent
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if node.status == NodeStatus::Boundary
                && node.level < self.depth_limit
                && k_max.is_none_or(|cap| self.expansions_per_level[node.level] < cap)
            {
                has[i] = true;
            }
            if has[i] {
                if let Some(p) = node.parent {
                    has[p.0] = true;
                }
            }
        }
        has
    }

    /// Structural dump for visualization tooling.
    pub fn dump(&self) -> Vec<NodeDump> {
        self.nodes
            .iter()
            .map(|n| NodeDump {
                id: n.id,
                parent: n.parent,
                token: n.token,
                edge_loglik: n.edge_loglik,
                path_loglik: n.path_loglik,
                level: n.level,
                status: n.status,
            })
            .collect()
    }
}

/// `path_loglik + ln Δ_n` for `count` draws of `Δ` at table `level`.
pub fn posterior_samples<R: Rng + ?Sized>(
    path_loglik: f64,
    level: usize,
    table: &DeltaTable,
    count: usize,
    rng: &mut R,
) -> Result<Vec<f64>, TreeError> {
    let mut logs = delta_log_samples(table, level, count, rng)?;
    for x in &mut logs {
        *x += path_loglik;
    }
    Ok(logs)
}

/// Scales `Δ` draws by an observed path likelihood, in log space.
pub fn scale_deltas(path_loglik: f64, deltas: &[f64]) -> Vec<f64> {
    deltas.iter().map(|d| path_loglik + d.ln()).collect()
}

/// Per-child counts of how often each child holds the per-sample maximum.
/// Ties go to the lowest child index.
pub fn acquisition_counts(children: &[&[f64]]) -> Result<Vec<usize>, TreeError> {
    let first = children.first().ok_or(TreeError::NoChildren)?;
    let n = first.len();
    if let Some((child, s)) = children.iter().enumerate().find(|(_, s)| s.len() != n) {
        return Err(TreeError::SampleLengthMismatch {
            child,
            found: s.len(),
            expected: n,
        });
    }
    let mut counts = vec![0usize; children.len()];
    for i in 0..n {
        let mut best = 0;
        let mut best_v = children[0][i];
        for (c, s) in children.iter().enumerate().skip(1) {
            if s[i] > best_v {
                best = c;
                best_v = s[i];
            }
        }
        counts[best] += 1;
    }
    Ok(counts)
}

/// Empirical probability that each child is the best child.
pub fn acquisition(children: &[&[f64]]) -> Result<Vec<f64>, TreeError> {
    let counts = acquisition_counts(children)?;
    let n = children[0].len();
    if n == 0 {
        // no evidence: all mass on the first child, as the tie rule would do
        let mut v = vec![0.0; children.len()];
        v[0] = 1.0;
        return Ok(v);
    }
    Ok(counts.iter().map(|&c| c as f64 / n as f64).collect())
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

fn coordinate_max(children: &[&[f64]], n: usize) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; n];
    for s in children {
        for (o, v) in out.iter_mut().zip(s.iter()) {
            if *v > *o {
                *o = *v;
            }
        }
    }
    out
}

/// Propagates the beliefs of a freshly expanded node's children up `path`
/// (root first, expanded node last).
pub fn backup(tree: &mut SearchTree, path: &[NodeId], strategy: Strategy) -> Result<(), TreeError> {
    if path.first() != Some(&tree.root()) {
        return Err(TreeError::PathNotRootAnchored);
    }
    if path
        .windows(2)
        .any(|w| tree.node(w[1]).parent != Some(w[0]))
    {
        return Err(TreeError::PathNotRootAnchored);
    }
    let expanded = *path.last().expect("non-empty path");
    let n = tree.n_samples();
    if tree.node(expanded).children.is_empty() {
        // dead end: nothing below can be reached
        tree.set_samples(expanded, vec![f64::NEG_INFINITY; n]);
        if strategy == Strategy::PosteriorDescendant {
            return Ok(());
        }
    }
    match strategy {
        Strategy::Posterior => {
            for &id in path.iter().rev() {
                let samples = {
                    let children = tree.children_samples(id);
                    if children.is_empty() {
                        continue;
                    }
                    coordinate_max(&children, n)
                };
                tree.set_samples(id, samples);
            }
        }
        Strategy::PosteriorDescendant => {
            let scores = tree.child_acquisition(expanded)?;
            let best = argmax(&scores).expect("non-empty children");
            let best_id = tree.node(expanded).children[best];
            let samples = tree.node(best_id).v_samples.clone();
            for &id in path {
                tree.set_samples(id, samples.clone());
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::Rng;

    #[test]
    fn acquisition_examples() {
        assert_eq!(acquisition(&[&[-1.0, -2.0]]).unwrap(), vec![1.0]);
        let a = [-1.0, -2.0, -3.0];
        assert_eq!(acquisition(&[&a, &a]).unwrap(), vec![1.0, 0.0]);
        let a = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0, -1.0, -1.0];
        let b = [-0.5, -0.5, -0.5, -0.5, -0.5, -0.5, -0.5, 0.0, 0.0, 0.0];
        let acq = acquisition(&[&a, &b]).unwrap();
        assert!((acq[0] - 0.7).abs() < 1e-15 && (acq[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn acquisition_errors() {
        assert_eq!(acquisition(&[]), Err(TreeError::NoChildren));
        assert!(matches!(
            acquisition(&[&[0.0, 1.0], &[0.0]]),
            Err(TreeError::SampleLengthMismatch { child: 1, .. })
        ));
    }

    #[test]
    fn posterior_scaling() {
        assert_eq!(
            scale_deltas(-2.0, &[0.5, 0.25]),
            vec![-2.0 + 0.5f64.ln(), -2.0 + 0.25f64.ln()]
        );
        assert_eq!(scale_deltas(0.0, &[0.5]), vec![0.5f64.ln()]);
    }

    fn tree_with_two_children(a: Vec<f64>, b: Vec<f64>) -> (SearchTree, NodeId) {
        let mut t = SearchTree::new(3, 2, vec![0.0; a.len()]);
        let root = t.root();
        t.mark_expanded(root);
        let x = t.add_child(root, 0, -0.1, false);
        t.set_samples(x, vec![-0.5; a.len()]);
        t.mark_expanded(x);
        let ca = t.add_child(x, 0, -0.2, false);
        let cb = t.add_child(x, 1, -0.3, false);
        t.set_samples(ca, a);
        t.set_samples(cb, b);
        (t, x)
    }

    #[test]
    fn posterior_backup_takes_coordinate_max() {
        let (mut t, x) = tree_with_two_children(vec![-1.0, -3.0], vec![-2.0, -2.0]);
        let path = t.path_to(x);
        backup(&mut t, &path, Strategy::Posterior).unwrap();
        assert_eq!(t.node(x).v_samples, vec![-1.0, -2.0]);
        // the root's only child is x
        assert_eq!(t.node(t.root()).v_samples, vec![-1.0, -2.0]);
    }

    #[test]
    fn descendant_backup_copies_best_child() {
        let (mut t, x) = tree_with_two_children(vec![-1.0, -3.0], vec![-2.0, -2.0]);
        let path = t.path_to(x);
        backup(&mut t, &path, Strategy::PosteriorDescendant).unwrap();
        assert_eq!(t.node(x).v_samples, vec![-1.0, -3.0]);
        assert_eq!(t.node(t.root()).v_samples, vec![-1.0, -3.0]);
    }

    #[test]
    fn backup_rejects_unanchored_path() {
        let (mut t, x) = tree_with_two_children(vec![-1.0], vec![-2.0]);
        assert_eq!(
            backup(&mut t, &[x], Strategy::Posterior),
            Err(TreeError::PathNotRootAnchored)
        );
        let root = t.root();
        let c = t.node(x).children[0];
        assert_eq!(
            backup(&mut t, &[root, c], Strategy::Posterior),
            Err(TreeError::PathNotRootAnchored)
        );
    }

    #[test]
    fn leaves_and_eligibility() {
        let mut t = SearchTree::new(2, 2, vec![0.0; 4]);
        let root = t.root();
        t.mark_expanded(root);
        let a = t.add_child(root, 0, -0.1, false);
        let b = t.add_child(root, 1, -2.0, true);
        assert_eq!(t.node(b).status, NodeStatus::TerminalLeaf);
        assert_eq!(t.node(b).v_samples, vec![-2.0; 4]);
        assert_eq!(t.eligibility(None), vec![true, true, false]);
        assert_eq!(t.eligibility(Some(1)), vec![true, true, false]);
        t.mark_expanded(a);
        let l = t.add_child(a, 1, -0.5, false);
        assert_eq!(t.node(l).status, NodeStatus::TerminalLeaf);
        assert_eq!(t.node(l).path_loglik, -0.1 + -0.5);
        assert_eq!(t.eligibility(None), vec![false; 4]);
        assert_eq!(t.terminal_leaves(), 2);
        assert_eq!(t.nodes_expanded(), 2);
        assert_eq!(t.tokens_to(l), vec![0, 1]);
    }

    proptest! {
        #[test]
        fn acquisition_is_a_distribution(
            n in 1usize..50,
            k in 1usize..6,
            seed in any::<u64>(),
            shift in -100.0f64..100.0,
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // coarse values so ties actually occur
            let lists: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..n).map(|_| -(rng.random_range(0..4) as f64)).collect())
                .collect();
            let refs: Vec<&[f64]> = lists.iter().map(|v| v.as_slice()).collect();
            let counts = acquisition_counts(&refs).unwrap();
            prop_assert_eq!(counts.iter().sum::<usize>(), n);
            let acq = acquisition(&refs).unwrap();
            prop_assert!((acq.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(acq.iter().all(|a| (0.0..=1.0).contains(a)));

            let shifted: Vec<Vec<f64>> = lists.iter().map(|v| v.iter().map(|x| x + shift.round()).collect()).collect();
            let refs2: Vec<&[f64]> = shifted.iter().map(|v| v.as_slice()).collect();
            prop_assert_eq!(acquisition_counts(&refs2).unwrap(), counts);
        }

        #[test]
        fn posterior_backup_is_coordinate_max(
            n in 1usize..20,
            k in 1usize..5,
            seed in any::<u64>(),
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut t = SearchTree::new(3, k, vec![0.0; n]);
            let root = t.root();
            t.mark_expanded(root);
            let mut kids = vec![];
            for c in 0..k {
                let id = t.add_child(root, c as u32, -(c as f64), false);
                t.set_samples(id, (0..n).map(|_| -rng.random::<f64>() * 5.0).collect());
                kids.push(id);
            }
            let x = kids[0];
            t.mark_expanded(x);
            for c in 0..k {
                let id = t.add_child(x, c as u32, -(c as f64) - 0.5, false);
                t.set_samples(id, (0..n).map(|_| -rng.random::<f64>() * 5.0).collect());
            }
            let path = t.path_to(x);
            backup(&mut t, &path, Strategy::Posterior).unwrap();
            for id in path {
                let node = t.node(id);
                for i in 0..n {
                    let m = node.children.iter().map(|c| t.node(*c).v_samples[i]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert_eq!(node.v_samples[i], m);
                }
            }
        }
    }
}
