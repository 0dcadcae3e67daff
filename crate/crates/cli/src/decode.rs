use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use ults::oracle::{Token, DEFAULT_TIMEOUT};
use ults::{
    beam_search, decode_variable_length, greedy, ults_search, DeltaTable, Oracle, SearchError,
    SearchResult, Selection, Strategy, TraceRecorder, UltsConfig,
};

use crate::oracle_spec::OracleSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ults,
    Beam,
    Greedy,
}

/// Every setting is optional here so that flags, the config file and
/// defaults can be layered in that order.
#[derive(Debug, Default, Clone, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct DecodeArgs {
    /// TOML file with any of the settings below (flags take precedence).
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// trace:FILE | synthetic:seed=S,alpha=A,branching=B | cmd:COMMAND | tcp:HOST:PORT
    #[arg(long)]
    pub oracle: Option<String>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Fitted table from `precompute-prior`; required for ULTS.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Beam width.
    #[arg(long)]
    pub k: Option<usize>,
    /// Maximum sequence length.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Children requested per ULTS expansion [default: the prior's branching].
    #[arg(long)]
    pub branching: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Posterior samples per node.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub selection: Option<Selection>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Token that ends a sequence early.
    #[arg(long)]
    pub terminal_token: Option<Token>,
    /// Seconds to wait for each backend reply.
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Run ULTS and beam search and report the differences.
    #[arg(long)]
    #[serde(skip)]
    pub compare: bool,
    /// Write every oracle reply seen to this trace file.
    #[arg(long)]
    pub record: Option<PathBuf>,
}

macro_rules! layer {
    ($flags:ident, $file:ident, $($field:ident),+) => {
        DecodeArgs {
            config: $flags.config,
            compare: $flags.compare,
            $($field: $flags.$field.or($file.$field),)+
        }
    };
}

impl DecodeArgs {
    /// Flags over the config file named by `--config`.
    pub fn resolve(self) -> Result<DecodeArgs> {
        let file = match &self.config {
            Some(path) => load_config(path)?,
            None => DecodeArgs::default(),
        };
        let flags = self;
        Ok(layer!(
            flags,
            file,
            oracle,
            method,
            prior,
            k,
            depth,
            branching,
            epsilon,
            samples,
            k_max,
            strategy,
            selection,
            seed,
            terminal_token,
            timeout,
            record
        ))
    }

    pub fn ults_config(&self, table: &DeltaTable, depth: usize) -> UltsConfig {
        let mut cfg = UltsConfig::new(depth, self.branching.unwrap_or(table.branching));
        cfg.epsilon = self.epsilon.unwrap_or(cfg.epsilon);
        cfg.samples = self.samples.unwrap_or(cfg.samples);
        cfg.k_max = self.k_max;
        cfg.strategy = self.strategy.unwrap_or_default();
        cfg.selection = self.selection.unwrap_or_default();
        cfg.seed = self.seed.unwrap_or(0);
        cfg.terminal_token = self.terminal_token;
        cfg
    }
}

fn load_config(path: &Path) -> Result<DecodeArgs> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run_ults<O: Oracle + ?Sized>(
    oracle: &O,
    table: &DeltaTable,
    cfg: &UltsConfig,
) -> Result<SearchResult> {
    let out = if cfg.terminal_token.is_some() {
        decode_variable_length(oracle, table, cfg)
    } else {
        ults_search(oracle, table, cfg)
    };
    out.map_err(|e| {
        if let SearchError::Oracle {
            partial: Some(partial),
            ..
        } = &e
        {
            eprintln!(
                "partial result: {}",
                serde_json::to_string(partial).unwrap_or_default()
            );
        }
        e.into()
    })
}

/// Runs the decode command; returns the JSON document to print.
pub fn run(args: DecodeArgs, table: Option<DeltaTable>) -> Result<serde_json::Value> {
    let spec: OracleSpec = args
        .oracle
        .as_deref()
        .context("--oracle is required")?
        .parse()?;
    let timeout = args
        .timeout
        .map(Duration::from_secs_f64)
        .unwrap_or(DEFAULT_TIMEOUT);
    let oracle = TraceRecorder::new(spec.open(timeout)?);
    let method = args.method.unwrap_or(Method::Ults);
    let k = args.k.unwrap_or(5);
    let depth = args
        .depth
        .or(table.as_ref().map(|t| t.depth))
        .context("--depth is required without a prior table")?;

    let beam = |width| beam_search(&oracle, width, depth, args.terminal_token);
    let doc = if args.compare {
        let table = table.as_ref().context("--compare needs --prior")?;
        let u = run_ults(&oracle, table, &args.ults_config(table, depth))?;
        let b = beam(k)?;
        json!({
            "ults": u,
            "beam": b,
            "beam_width": k,
            "delta_nodes_expanded": u.nodes_expanded as i64 - b.nodes_expanded as i64,
            "delta_loglik": u.best_loglik - b.best_loglik,
        })
    } else {
        let r = match method {
            Method::Ults => {
                let table = table.as_ref().context("--prior is required for ULTS")?;
                run_ults(&oracle, table, &args.ults_config(table, depth))?
            }
            Method::Beam => beam(k)?,
            Method::Greedy => greedy(&oracle, depth, args.terminal_token)?,
        };
        serde_json::to_value(r)?
    };
    if let Some(path) = &args.record {
        let file =
            std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        oracle.write_jsonl(std::io::BufWriter::new(file))?;
    }
    Ok(doc)
}
