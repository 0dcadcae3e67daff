//! Desk-scale experiments: the on-model benchmark against beam search,
//! max-of-categorical histograms for choosing a prior, and pool recording.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{beam_search, exhaustive_optimum, BaselineError};
use crate::belief::{
    precompute_delta_table_with, BeliefError, CategoricalPrior, DeltaTable, PoolEntry,
    DEFAULT_SAMPLES,
};
use crate::exec::Execution;
use crate::oracle::{checked_query, Oracle, OracleError, OracleQuery, SyntheticOracle, Token};
use crate::search::{ults_search, SearchError, Selection, UltsConfig};
use crate::tree::Strategy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyBenchConfig {
    pub branching: usize,
    pub depth: usize,
    pub alphas: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub beam_widths: Vec<usize>,
    pub trees: usize,
    pub seed: u64,
    /// Posterior samples per node.
    pub samples: usize,
    /// Monte Carlo size for fitting the prior table.
    pub table_samples: usize,
    pub k_max: Option<usize>,
    pub strategy: Strategy,
    pub selection: Selection,
    /// Compute the exact optimum and regret for every tree.
    pub exhaustive: bool,
}

impl Default for ToyBenchConfig {
    fn default() -> Self {
        ToyBenchConfig {
            branching: 8,
            depth: 5,
            alphas: vec![0.1, 0.2, 0.5, 0.8],
            epsilons: vec![0.05, 0.1, 0.3],
            beam_widths: (1..=7).collect(),
            trees: 200,
            seed: 0,
            samples: DEFAULT_SAMPLES,
            table_samples: DEFAULT_SAMPLES,
            k_max: None,
            strategy: Strategy::default(),
            selection: Selection::FullBoundary,
            exhaustive: true,
        }
    }
}

/// One (method, hyperparameters, tree) result. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub alpha: f64,
    pub epsilon: Option<f64>,
    pub beam_width: Option<usize>,
    pub strategy: Option<String>,
    pub selection: Option<String>,
    pub k_max: Option<usize>,
    pub tree_seed: u64,
    pub nodes_expanded: usize,
    pub best_loglik: f64,
    pub optimum_loglik: Option<f64>,
    pub regret: Option<f64>,
}

/// Seed of the `i`-th tree of a benchmark.
pub fn tree_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

/// Fits the on-model table used for benchmark trees of prior `alpha`.
pub fn on_model_table(
    cfg: &ToyBenchConfig,
    alpha: f64,
    exec: Execution,
) -> Result<DeltaTable, ExperimentError> {
    let prior = CategoricalPrior::dirichlet(alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ alpha.to_bits());
    Ok(precompute_delta_table_with(
        cfg.depth,
        cfg.branching,
        &prior,
        cfg.table_samples,
        &mut rng,
        exec,
    )?)
}

fn tree_rows(
    cfg: &ToyBenchConfig,
    alpha: f64,
    table: Option<&DeltaTable>,
    seed: u64,
) -> Result<Vec<BenchRow>, ExperimentError> {
    let oracle = SyntheticOracle::new(seed, alpha, cfg.branching).with_depth(cfg.depth);
    let optimum = if cfg.exhaustive {
        Some(exhaustive_optimum(&oracle, cfg.depth)?.0)
    } else {
        None
    };
    let row = |method: &str,
               epsilon,
               beam_width,
               strategy: Option<Strategy>,
               k_max,
               nodes,
               loglik: f64| BenchRow {
        method: method.to_string(),
        alpha,
        epsilon,
        beam_width,
        strategy: strategy.map(|s| s.to_string()),
        selection: strategy.map(|_| cfg.selection.to_string()),
        k_max,
        tree_seed: seed,
        nodes_expanded: nodes,
        best_loglik: loglik,
        optimum_loglik: optimum,
        regret: optimum.map(|o| o - loglik),
    };
    let mut rows = Vec::with_capacity(cfg.epsilons.len() + cfg.beam_widths.len());
    for &epsilon in &cfg.epsilons {
        let table = table.expect("table is fitted whenever epsilons are given");
        let config = UltsConfig {
            depth: cfg.depth,
            branching: cfg.branching,
            samples: cfg.samples,
            epsilon,
            k_max: cfg.k_max,
            strategy: cfg.strategy,
            selection: cfg.selection,
            terminal_token: None,
            seed,
        };
        let r = ults_search(&oracle, table, &config)?;
        rows.push(row(
            "ults",
            Some(epsilon),
            None,
            Some(cfg.strategy),
            cfg.k_max,
            r.nodes_expanded,
            r.best_loglik,
        ));
    }
    for &k in &cfg.beam_widths {
        let r = beam_search(&oracle, k, cfg.depth, None)?;
        rows.push(row(
            "beam",
            None,
            Some(k),
            None,
            None,
            r.nodes_expanded,
            r.best_loglik,
        ));
    }
    Ok(rows)
}

/// Runs every method on `cfg.trees` synthetic trees per `alpha`. Rows come
/// back grouped by alpha, then tree, then method, whatever the execution mode.
pub fn run_toy_bench(
    cfg: &ToyBenchConfig,
    exec: Execution,
) -> Result<Vec<BenchRow>, ExperimentError> {
    if cfg.depth == 0 || cfg.branching == 0 {
        return Err(ExperimentError::InvalidArgument(
            "depth and branching must be >= 1".into(),
        ));
    }
    let mut rows = Vec::new();
    for &alpha in &cfg.alphas {
        let table = if cfg.epsilons.is_empty() {
            None
        } else {
            Some(on_model_table(cfg, alpha, exec)?)
        };
        let per_tree = exec.map_indexed(cfg.trees, |i| {
            tree_rows(cfg, alpha, table.as_ref(), tree_seed(cfg.seed, i))
        });
        for r in per_tree {
            rows.extend(r?);
        }
    }
    Ok(rows)
}

/// Mean and standard error of one method's results at one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub alpha: f64,
    pub epsilon: Option<f64>,
    pub beam_width: Option<usize>,
    pub runs: usize,
    pub mean_nodes: f64,
    pub sem_nodes: f64,
    pub mean_loglik: f64,
    pub sem_loglik: f64,
    pub mean_regret: Option<f64>,
}

/// Mean and standard error of the mean.
pub fn mean_sem(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// (method, alpha bits, epsilon bits, beam width)
type GroupKey = (String, u64, Option<u64>, Option<usize>);

/// Groups rows by (method, alpha, epsilon, beam width) in first-seen order.
pub fn summarize(rows: &[BenchRow]) -> Vec<MethodSummary> {
    let mut order: Vec<GroupKey> = Vec::new();
    let mut groups: BTreeMap<GroupKey, Vec<&BenchRow>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.method.clone(),
            r.alpha.to_bits(),
            r.epsilon.map(f64::to_bits),
            r.beam_width,
        );
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let nodes: Vec<f64> = g.iter().map(|r| r.nodes_expanded as f64).collect();
            let ll: Vec<f64> = g.iter().map(|r| r.best_loglik).collect();
            let regrets: Option<Vec<f64>> = g.iter().map(|r| r.regret).collect();
            let (mean_nodes, sem_nodes) = mean_sem(&nodes);
            let (mean_loglik, sem_loglik) = mean_sem(&ll);
            MethodSummary {
                method: key.0.clone(),
                alpha: g[0].alpha,
                epsilon: g[0].epsilon,
                beam_width: g[0].beam_width,
                runs: g.len(),
                mean_nodes,
                sem_nodes,
                mean_loglik,
                sem_loglik,
                mean_regret: regrets.map(|r| mean_sem(&r).0),
            }
        })
        .collect()
}

/// Beam points that beat `ults` on both axes: no more expansions and a mean
/// log-likelihood at least one ULTS standard error higher.
pub fn dominating_beams<'a>(
    ults: &MethodSummary,
    beams: &'a [MethodSummary],
) -> Vec<&'a MethodSummary> {
    beams
        .iter()
        .filter(|b| {
            b.mean_nodes <= ults.mean_nodes && b.mean_loglik >= ults.mean_loglik + ults.sem_loglik
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSeries {
    pub label: String,
    pub alpha: Option<f64>,
    pub count: usize,
    pub mean: f64,
    /// Density per bin; integrates to 1 over `[0, 1]`.
    pub density: Vec<f64>,
}

/// Histograms of `max_j c_j` on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorHistogram {
    pub bins: usize,
    pub edges: Vec<f64>,
    pub series: Vec<HistogramSeries>,
}

impl PriorHistogram {
    /// Fraction of a series' mass at or above `threshold`, rounded to bins.
    pub fn mass_above(&self, series: usize, threshold: f64) -> f64 {
        let width = 1.0 / self.bins as f64;
        self.series[series]
            .density
            .iter()
            .enumerate()
            .filter(|(i, _)| self.edges[*i] >= threshold - 1e-12)
            .map(|(_, d)| d * width)
            .sum()
    }
}

fn histogram_series(
    label: String,
    alpha: Option<f64>,
    values: &[f64],
    bins: usize,
) -> HistogramSeries {
    let mut counts = vec![0usize; bins];
    for &v in values {
        let i = ((v * bins as f64) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let n = values.len().max(1) as f64;
    HistogramSeries {
        label,
        alpha,
        count: values.len(),
        mean: values.iter().sum::<f64>() / n,
        density: counts.iter().map(|&c| c as f64 * bins as f64 / n).collect(),
    }
}

/// Compares the empirical max-of-categorical distribution of `pool` (when
/// given) against Dirichlet(α) draws of dimension `branching`.
pub fn prior_histogram(
    pool: Option<&[PoolEntry]>,
    alphas: &[f64],
    branching: usize,
    samples: usize,
    bins: usize,
    seed: u64,
    exec: Execution,
) -> Result<PriorHistogram, ExperimentError> {
    if bins == 0 || branching == 0 {
        return Err(ExperimentError::InvalidArgument(
            "bins and branching must be >= 1".into(),
        ));
    }
    let mut series = Vec::new();
    if let Some(pool) = pool {
        if pool.is_empty() {
            return Err(BeliefError::EmptyPool.into());
        }
        let maxes: Vec<f64> = pool
            .iter()
            .map(|e| e.probs.first().copied().unwrap_or(0.0))
            .collect();
        series.push(histogram_series("empirical".into(), None, &maxes, bins));
    }
    for (i, &alpha) in alphas.iter().enumerate() {
        let prior = CategoricalPrior::dirichlet(alpha)?;
        let maxes = exec.monte_carlo(seed.wrapping_add(i as u64), samples, |rng| {
            let logs = prior.sample_log_unchecked(branching, rng);
            logs.into_iter().fold(f64::NEG_INFINITY, f64::max).exp()
        });
        series.push(histogram_series(
            format!("dirichlet(alpha={alpha})"),
            Some(alpha),
            &maxes,
            bins,
        ));
    }
    Ok(PriorHistogram {
        bins,
        edges: (0..bins).map(|i| i as f64 / bins as f64).collect(),
        series,
    })
}

/// Outcome of [`collect_pool`]: every recorded step, plus per-prompt failures.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolCollection {
    pub entries: Vec<PoolEntry>,
    pub failures: Vec<(usize, OracleError)>,
}

/// Greedy-decodes each prompt for `steps` tokens, recording the top `top_t`
/// probabilities of every step. A failing prompt keeps the steps recorded
/// before the failure.
pub fn collect_pool<O: Oracle + ?Sized>(
    oracle: &O,
    prompts: &[Vec<Token>],
    steps: usize,
    top_t: usize,
) -> PoolCollection {
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let mut prefix = prompt.clone();
        for _ in 0..steps {
            let reply = match checked_query(oracle, &OracleQuery::new(prefix.clone(), top_t)) {
                Ok(r) if !r.is_empty() => r,
                Ok(_) => {
                    failures.push((i, OracleError::ProtocolViolation("empty reply".into())));
                    break;
                }
                Err(e) => {
                    failures.push((i, e));
                    break;
                }
            };
            let probs: Vec<f64> = reply.logprobs.iter().map(|l| l.exp().min(1.0)).collect();
            let kept: f64 = probs.iter().sum();
            entries.push(PoolEntry {
                probs,
                tail_mass: (1.0 - kept).max(0.0),
            });
            if reply.terminal[0] {
                break;
            }
            prefix.push(reply.tokens[0]);
        }
    }
    PoolCollection { entries, failures }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ToyBenchConfig {
        ToyBenchConfig {
            branching: 3,
            depth: 3,
            alphas: vec![0.3],
            epsilons: vec![0.1],
            beam_widths: vec![1, 2],
            trees: 6,
            table_samples: 2000,
            samples: 200,
            ..ToyBenchConfig::default()
        }
    }

    #[test]
    fn bench_is_deterministic_across_modes() {
        let cfg = small_cfg();
        let a = run_toy_bench(&cfg, Execution::Sequential).unwrap();
        let b = run_toy_bench(&cfg, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6 * 3);
        assert!(a.iter().all(|r| r.regret.unwrap() >= 0.0));
    }

    #[test]
    fn single_greedy_row() {
        let cfg = ToyBenchConfig {
            epsilons: vec![],
            beam_widths: vec![1],
            trees: 1,
            ..small_cfg()
        };
        let rows = run_toy_bench(&cfg, Execution::Sequential).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].nodes_expanded, cfg.depth);
    }

    #[test]
    fn mean_sem_values() {
        let (m, s) = mean_sem(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn one_hot_pool_in_top_bin() {
        let pool = vec![PoolEntry {
            probs: vec![1.0, 0.0],
            tail_mass: 0.0,
        }];
        let h = prior_histogram(Some(&pool), &[], 8, 100, 10, 0, Execution::Sequential).unwrap();
        assert_eq!(h.series.len(), 1);
        assert_eq!(h.series[0].density[9], 10.0);
        assert!((h.mass_above(0, 0.9) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_dirichlet_max_near_one_over_b() {
        let h =
            prior_histogram(None, &[10.0, 0.1], 8, 20_000, 20, 3, Execution::Sequential).unwrap();
        assert_eq!(h.series.len(), 2);
        let m = h.series[0].mean;
        assert!((1.0 / 8.0..=3.0 / 8.0).contains(&m), "{m}");
        assert!(h.series[1].mean > m);
        assert!(matches!(
            prior_histogram(Some(&[]), &[0.1], 8, 10, 10, 0, Execution::Sequential),
            Err(ExperimentError::Belief(BeliefError::EmptyPool))
        ));
    }

    #[test]
    fn pool_counts_steps() {
        let o = SyntheticOracle::new(2, 0.2, 6);
        let c = collect_pool(&o, &[vec![0], vec![1, 2]], 5, 4);
        assert_eq!(c.entries.len(), 10);
        assert!(c.failures.is_empty());
        for e in &c.entries {
            assert_eq!(e.probs.len(), 4);
            assert!((e.probs.iter().sum::<f64>() + e.tail_mass - 1.0).abs() < 1e-6);
        }
    }
}
