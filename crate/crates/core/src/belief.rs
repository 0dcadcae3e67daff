//! Priors over categorical transition distributions and the per-level Beta
//! approximations of the optimal remaining likelihood `Δ`.
//!
//! `Δ` at a node is the best likelihood still obtainable below it: `1` at a
//! leaf, otherwise `max_j c_j · Δ_j` over its children. Under an iid prior on
//! the categoricals `c` its law only depends on the level, so one Beta fit per
//! level is computed bottom-up and reused for every search.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

use crate::exec::Execution;
use crate::sampling::{log_beta_variate, log_dirichlet};

/// Default number of entries kept per recorded categorical.
pub const DEFAULT_POOL_TOP_T: usize = 32;
/// Default Monte Carlo size for table fitting and posterior samples.
pub const DEFAULT_SAMPLES: usize = 1000;

const CLAMP: f64 = 1e-9;
const MIN_VARIANCE: f64 = 1e-12;
const MIN_FIT_SAMPLES: usize = 10;
const NEWTON_TOL: f64 = 1e-8;
const NEWTON_MAX_ITERS: usize = 200;
const POOL_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeliefError {
    #[error("empirical pool is empty")]
    EmptyPool,
    #[error("pool entry {index} stores {stored} probabilities, need {needed}")]
    PoolEntryTooShort {
        index: usize,
        stored: usize,
        needed: usize,
    },
    #[error("invalid pool entry {index}: {reason}")]
    InvalidPoolEntry { index: usize, reason: String },
    #[error("Dirichlet concentration must be positive and finite, got {0}")]
    NonPositiveAlpha(f64),
    #[error("need at least {MIN_FIT_SAMPLES} samples with variance above {MIN_VARIANCE:e}")]
    DegenerateSamples,
    #[error("Beta MLE did not converge after {iterations} iterations")]
    NonConvergence {
        iterations: usize,
        fallback: BetaParams,
    },
    #[error("fitting level {level}")]
    LevelFit {
        level: usize,
        #[source]
        source: Box<BeliefError>,
    },
    #[error("level {level} outside 1..={depth}")]
    LevelOutOfRange { level: usize, depth: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{0}")]
    Io(String),
}

impl From<std::io::Error> for BeliefError {
    fn from(e: std::io::Error) -> Self {
        BeliefError::Io(e.to_string())
    }
}

/// One recorded categorical, truncated to its largest entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub probs: Vec<f64>,
    pub tail_mass: f64,
}

impl PoolEntry {
    /// Sorts a full distribution, keeps the `top_t` largest entries and records
    /// the remaining mass.
    pub fn from_distribution(probs: &[f64], top_t: usize) -> Self {
        let mut sorted = probs.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = sorted.iter().sum();
        sorted.truncate(top_t);
        let kept: f64 = sorted.iter().sum();
        PoolEntry {
            probs: sorted,
            tail_mass: (total - kept).max(0.0),
        }
    }

    fn validate(&self, index: usize) -> Result<(), BeliefError> {
        let bad = |reason: &str| BeliefError::InvalidPoolEntry {
            index,
            reason: reason.to_string(),
        };
        if self.probs.is_empty() {
            return Err(bad("no probabilities"));
        }
        if self.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(bad("probability outside [0, 1]"));
        }
        if self.probs.windows(2).any(|w| w[1] > w[0]) {
            return Err(bad("probabilities not in descending order"));
        }
        if !(0.0..=1.0 + POOL_SUM_TOL).contains(&self.tail_mass) {
            return Err(bad("tail mass outside [0, 1]"));
        }
        let total = self.probs.iter().sum::<f64>() + self.tail_mass;
        if (total - 1.0).abs() > POOL_SUM_TOL {
            return Err(bad(&format!("mass sums to {total}")));
        }
        Ok(())
    }
}

/// Reads a JSON-lines pool file, validating every entry.
pub fn read_pool(path: &Path) -> Result<Vec<PoolEntry>, BeliefError> {
    let file = std::fs::File::open(path)?;
    let mut pool = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: PoolEntry =
            serde_json::from_str(&line).map_err(|e| BeliefError::InvalidPoolEntry {
                index: i,
                reason: e.to_string(),
            })?;
        entry.validate(pool.len())?;
        pool.push(entry);
    }
    Ok(pool)
}

pub fn write_pool<W: Write>(mut out: W, pool: &[PoolEntry]) -> Result<(), BeliefError> {
    for entry in pool {
        serde_json::to_writer(&mut out, entry).map_err(|e| BeliefError::Io(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Generative belief over the transition probabilities at a node.
#[derive(Debug, Clone, PartialEq)]
pub enum CategoricalPrior {
    /// Symmetric Dirichlet with concentration `alpha`.
    Dirichlet { alpha: f64 },
    /// Uniform over a recorded pool of categoricals.
    Empirical { pool: Vec<PoolEntry> },
}

/// Serializable summary of a prior, stored alongside fitted tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorDescriptor {
    Dirichlet { alpha: f64 },
    Empirical { pool_size: usize, min_stored: usize },
}

impl CategoricalPrior {
    pub fn dirichlet(alpha: f64) -> Result<Self, BeliefError> {
        let prior = CategoricalPrior::Dirichlet { alpha };
        prior.validate()?;
        Ok(prior)
    }

    pub fn empirical(pool: Vec<PoolEntry>) -> Result<Self, BeliefError> {
        let prior = CategoricalPrior::Empirical { pool };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<(), BeliefError> {
        match self {
            CategoricalPrior::Dirichlet { alpha } => {
                if !(*alpha > 0.0 && alpha.is_finite()) {
                    return Err(BeliefError::NonPositiveAlpha(*alpha));
                }
            }
            CategoricalPrior::Empirical { pool } => {
                if pool.is_empty() {
                    return Err(BeliefError::EmptyPool);
                }
                for (i, entry) in pool.iter().enumerate() {
                    entry.validate(i)?;
                }
            }
        }
        Ok(())
    }

    pub fn descriptor(&self) -> PriorDescriptor {
        match self {
            CategoricalPrior::Dirichlet { alpha } => PriorDescriptor::Dirichlet { alpha: *alpha },
            CategoricalPrior::Empirical { pool } => PriorDescriptor::Empirical {
                pool_size: pool.len(),
                min_stored: pool.iter().map(|e| e.probs.len()).min().unwrap_or(0),
            },
        }
    }

    fn check_branching(&self, branching: usize) -> Result<(), BeliefError> {
        if branching == 0 {
            return Err(BeliefError::InvalidArgument(
                "branching must be >= 1".into(),
            ));
        }
        match self {
            CategoricalPrior::Dirichlet { alpha } => {
                if !(*alpha > 0.0 && alpha.is_finite()) {
                    return Err(BeliefError::NonPositiveAlpha(*alpha));
                }
            }
            CategoricalPrior::Empirical { pool } => {
                if pool.is_empty() {
                    return Err(BeliefError::EmptyPool);
                }
                if let Some((index, e)) = pool
                    .iter()
                    .enumerate()
                    .find(|(_, e)| e.probs.len() < branching)
                {
                    return Err(BeliefError::PoolEntryTooShort {
                        index,
                        stored: e.probs.len(),
                        needed: branching,
                    });
                }
            }
        }
        Ok(())
    }

    /// Log-probabilities of one draw; callers must have checked `branching`.
    pub(crate) fn sample_log_unchecked<R: Rng + ?Sized>(
        &self,
        branching: usize,
        rng: &mut R,
    ) -> Vec<f64> {
        match self {
            CategoricalPrior::Dirichlet { alpha } => log_dirichlet(*alpha, branching, rng),
            CategoricalPrior::Empirical { pool } => {
                let entry = &pool[rng.random_range(0..pool.len())];
                entry.probs[..branching].iter().map(|p| p.ln()).collect()
            }
        }
    }

    /// Log-probabilities of one categorical draw of dimension `branching`.
    pub fn sample_log<R: Rng + ?Sized>(
        &self,
        branching: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>, BeliefError> {
        self.check_branching(branching)?;
        Ok(self.sample_log_unchecked(branching, rng))
    }
}

/// Draws one probability vector of length `branching` from `prior`.
///
/// Dirichlet draws lie on the simplex; empirical draws are the top-`branching`
/// entries of a uniformly chosen pool element, in descending order.
pub fn sample_categorical<R: Rng + ?Sized>(
    prior: &CategoricalPrior,
    branching: usize,
    rng: &mut R,
) -> Result<Vec<f64>, BeliefError> {
    Ok(prior
        .sample_log(branching, rng)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub a: f64,
    pub b: f64,
}

impl BetaParams {
    pub fn new(a: f64, b: f64) -> Result<Self, BeliefError> {
        if a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() {
            Ok(BetaParams { a, b })
        } else {
            Err(BeliefError::InvalidArgument(format!(
                "Beta shapes must be positive and finite, got ({a}, {b})"
            )))
        }
    }

    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }

    pub fn variance(&self) -> f64 {
        let s = self.a + self.b;
        self.a * self.b / (s * s * (s + 1.0))
    }

    /// Mean log-density over samples summarized by `(mean ln x, mean ln(1-x))`.
    fn mean_log_likelihood(&self, stats: &LogStats) -> f64 {
        (self.a - 1.0) * stats.ln_x + (self.b - 1.0) * stats.ln_1mx - ln_beta(self.a, self.b)
    }

    /// Mean log-density of raw samples, clamped the same way the fitter clamps them.
    pub fn mean_log_likelihood_of(&self, samples: &[f64]) -> f64 {
        let clamped: Vec<f64> = samples.iter().map(|&x| clamp_unit(x)).collect();
        self.mean_log_likelihood(&LogStats::of(&clamped))
    }
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

fn clamp_unit(x: f64) -> f64 {
    x.clamp(CLAMP, 1.0 - CLAMP)
}

/// Polygamma of order one.
pub(crate) fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 12.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv
        + 0.5 * inv2
        + inv * inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 / 30.0)))
}

struct LogStats {
    ln_x: f64,
    ln_1mx: f64,
}

impl LogStats {
    fn of(clamped: &[f64]) -> Self {
        let n = clamped.len() as f64;
        LogStats {
            ln_x: clamped.iter().map(|x| x.ln()).sum::<f64>() / n,
            ln_1mx: clamped.iter().map(|x| (-x).ln_1p()).sum::<f64>() / n,
        }
    }
}

fn method_of_moments(clamped: &[f64]) -> Result<BetaParams, BeliefError> {
    let n = clamped.len() as f64;
    let mean = clamped.iter().sum::<f64>() / n;
    let var = clamped.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    if var.is_nan() || var <= MIN_VARIANCE {
        return Err(BeliefError::DegenerateSamples);
    }
    let common = (mean * (1.0 - mean) / var - 1.0).max(1e-6);
    Ok(BetaParams {
        a: (mean * common).max(1e-9),
        b: ((1.0 - mean) * common).max(1e-9),
    })
}

/// Maximum-likelihood Beta fit.
///
/// Samples are clamped into `[1e-9, 1 - 1e-9]`. Starts from the method of
/// moments and runs Newton's method on the digamma score equations
/// `ψ(a) - ψ(a+b) = mean ln x`, `ψ(b) - ψ(a+b) = mean ln(1-x)`.
pub fn fit_beta_mle(samples: &[f64]) -> Result<BetaParams, BeliefError> {
    if samples.len() < MIN_FIT_SAMPLES || samples.iter().any(|x| x.is_nan()) {
        return Err(BeliefError::DegenerateSamples);
    }
    let clamped: Vec<f64> = samples.iter().map(|&x| clamp_unit(x)).collect();
    let start = method_of_moments(&clamped)?;
    let stats = LogStats::of(&clamped);

    let (mut a, mut b) = (start.a, start.b);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < NEWTON_MAX_ITERS {
        iterations += 1;
        let psi_ab = digamma(a + b);
        let g1 = digamma(a) - psi_ab - stats.ln_x;
        let g2 = digamma(b) - psi_ab - stats.ln_1mx;
        let t_ab = trigamma(a + b);
        let j11 = trigamma(a) - t_ab;
        let j22 = trigamma(b) - t_ab;
        let j12 = -t_ab;
        let det = j11 * j22 - j12 * j12;
        if !(det.is_finite() && det != 0.0) {
            break;
        }
        let mut da = (j22 * g1 - j12 * g2) / det;
        let mut db = (j11 * g2 - j12 * g1) / det;
        // keep the iterate inside the positive quadrant
        let mut halvings = 0;
        while (a - da <= 0.0 || b - db <= 0.0) && halvings < 60 {
            da *= 0.5;
            db *= 0.5;
            halvings += 1;
        }
        if a - da <= 0.0 || b - db <= 0.0 || !da.is_finite() || !db.is_finite() {
            break;
        }
        a -= da;
        b -= db;
        if da.abs() < NEWTON_TOL * a.max(1.0) && db.abs() < NEWTON_TOL * b.max(1.0) {
            converged = true;
            break;
        }
    }

    if !converged {
        log::debug!("beta MLE fell back to moments after {iterations} iterations");
        return Err(BeliefError::NonConvergence {
            iterations,
            fallback: start,
        });
    }
    let fitted = BetaParams { a, b };
    // Newton found a stationary point; keep whichever candidate scores better.
    if fitted.mean_log_likelihood(&stats) + 1e-12 < start.mean_log_likelihood(&stats) {
        return Ok(start);
    }
    Ok(fitted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelParams {
    pub level: usize,
    pub a: f64,
    pub b: f64,
}

/// Fitted `Δ` Beta parameters for levels `1..depth`; level `depth` is the
/// constant-one leaf case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub depth: usize,
    pub branching: usize,
    pub prior: PriorDescriptor,
    pub n_samples: usize,
    /// Ascending by level.
    pub levels: Vec<LevelParams>,
}

impl DeltaTable {
    /// Beta parameters of `Δ` at `level`; `None` at `level == depth`.
    pub fn params(&self, level: usize) -> Result<Option<BetaParams>, BeliefError> {
        if level == 0 || level > self.depth {
            return Err(BeliefError::LevelOutOfRange {
                level,
                depth: self.depth,
            });
        }
        if level == self.depth {
            return Ok(None);
        }
        let p = &self.levels[level - 1];
        debug_assert_eq!(p.level, level);
        Ok(Some(BetaParams { a: p.a, b: p.b }))
    }

    pub fn validate(&self) -> Result<(), BeliefError> {
        if self.depth == 0 || self.branching == 0 {
            return Err(BeliefError::InvalidArgument(
                "depth and branching must be >= 1".into(),
            ));
        }
        if self.levels.len() != self.depth - 1 {
            return Err(BeliefError::InvalidArgument(format!(
                "table of depth {} must have {} levels, found {}",
                self.depth,
                self.depth - 1,
                self.levels.len()
            )));
        }
        for (i, p) in self.levels.iter().enumerate() {
            if p.level != i + 1 {
                return Err(BeliefError::InvalidArgument(format!(
                    "level {} listed at position {}",
                    p.level, i
                )));
            }
            BetaParams::new(p.a, p.b)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BeliefError> {
        let text = std::fs::read_to_string(path)?;
        let table: DeltaTable = serde_json::from_str(&text)
            .map_err(|e| BeliefError::Io(format!("{}: {e}", path.display())))?;
        table.validate()?;
        Ok(table)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("table serializes");
        s.push('\n');
        s
    }
}

/// Monte Carlo draws of `ln max_j (c_j · Δ_j)` with `c ~ prior` and
/// `Δ_j ~ next` (`Δ_j = 1` when `next` is `None`).
pub fn sample_log_max_product(
    prior: &CategoricalPrior,
    branching: usize,
    next: Option<BetaParams>,
    count: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<f64>, BeliefError> {
    prior.check_branching(branching)?;
    Ok(exec.monte_carlo(seed, count, |rng| {
        let logc = prior.sample_log_unchecked(branching, rng);
        logc.into_iter()
            .map(|lc| match next {
                Some(p) => lc + log_beta_variate(p.a, p.b, rng),
                None => lc,
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }))
}

/// Fits the `Δ` table bottom-up from level `depth - 1` to level 1.
pub fn precompute_delta_table<R: Rng + ?Sized>(
    depth: usize,
    branching: usize,
    prior: &CategoricalPrior,
    n_samples: usize,
    rng: &mut R,
) -> Result<DeltaTable, BeliefError> {
    precompute_delta_table_with(
        depth,
        branching,
        prior,
        n_samples,
        rng,
        Execution::default(),
    )
}

pub fn precompute_delta_table_with<R: Rng + ?Sized>(
    depth: usize,
    branching: usize,
    prior: &CategoricalPrior,
    n_samples: usize,
    rng: &mut R,
    exec: Execution,
) -> Result<DeltaTable, BeliefError> {
    if depth == 0 {
        return Err(BeliefError::InvalidArgument("depth must be >= 1".into()));
    }
    if n_samples < 100 {
        return Err(BeliefError::InvalidArgument(
            "need at least 100 samples per level".into(),
        ));
    }
    prior.check_branching(branching)?;

    let mut fitted: Vec<LevelParams> = Vec::with_capacity(depth - 1);
    let mut next: Option<BetaParams> = None;
    for level in (1..depth).rev() {
        let seed = rng.next_u64();
        let logs = sample_log_max_product(prior, branching, next, n_samples, seed, exec)?;
        let samples: Vec<f64> = logs.iter().map(|l| l.exp()).collect();
        let params = fit_beta_mle(&samples).map_err(|e| BeliefError::LevelFit {
            level,
            source: Box::new(e),
        })?;
        log::debug!("level {level}: Beta({:.6}, {:.6})", params.a, params.b);
        fitted.push(LevelParams {
            level,
            a: params.a,
            b: params.b,
        });
        next = Some(params);
    }
    fitted.reverse();
    Ok(DeltaTable {
        depth,
        branching,
        prior: prior.descriptor(),
        n_samples,
        levels: fitted,
    })
}

/// `ln Δ` draws at `level`; all zeros at `level == depth`.
pub fn delta_log_samples<R: Rng + ?Sized>(
    table: &DeltaTable,
    level: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<f64>, BeliefError> {
    Ok(match table.params(level)? {
        None => vec![0.0; count],
        Some(p) => (0..count)
            .map(|_| log_beta_variate(p.a, p.b, rng))
            .collect(),
    })
}

/// `Δ` draws in `(0, 1]` at `level`.
pub fn delta_samples<R: Rng + ?Sized>(
    table: &DeltaTable,
    level: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<f64>, BeliefError> {
    Ok(delta_log_samples(table, level, count, rng)?
        .into_iter()
        .map(|l| l.exp().max(f64::MIN_POSITIVE))
        .collect())
}
