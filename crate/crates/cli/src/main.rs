mod decode;
mod oracle_spec;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ults::belief::DEFAULT_SAMPLES;
use ults::experiment::{collect_pool, prior_histogram, run_toy_bench, summarize, ToyBenchConfig};
use ults::oracle::{Token, DEFAULT_TIMEOUT};
use ults::{
    precompute_delta_table_with, read_pool, write_pool, CategoricalPrior, DeltaTable, Execution,
    Selection, Strategy,
};

use crate::decode::{DecodeArgs, Method};
use crate::oracle_spec::OracleSpec;

#[derive(Debug, Parser)]
#[command(
    name = "ults",
    version,
    about = "Likelihood-tree search decoding, prior fitting and benchmarks"
)]
struct Cli {
    /// Run Monte Carlo and benchmark work on the current thread only.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the per-level Beta table for a Dirichlet or empirical prior.
    PrecomputePrior(PrecomputeArgs),
    /// On-model benchmark of ULTS against beam search; writes CSV rows.
    ToyBench(ToyBenchArgs),
    /// Histograms of the largest categorical entry, empirical vs Dirichlet.
    PriorHist(PriorHistArgs),
    /// Decode one sequence against an oracle.
    Decode(DecodeArgs),
    /// Record a categorical pool by greedy decoding through a backend.
    CollectPool(CollectPoolArgs),
}

#[derive(Debug, Args)]
struct PrecomputeArgs {
    /// Symmetric Dirichlet concentration.
    #[arg(long, required_unless_present = "pool", conflicts_with = "pool")]
    alpha: Option<f64>,
    /// JSON-lines pool of recorded categoricals.
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    depth: usize,
    #[arg(long)]
    branching: usize,
    /// Monte Carlo draws per level.
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ToyBenchArgs {
    /// TOML file with benchmark settings (flags take precedence).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    branching: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// ULTS thresholds; the bare flag runs no ULTS.
    #[arg(long, value_delimiter = ',', num_args = 0..=1)]
    epsilons: Option<Vec<f64>>,
    /// Beam widths; the bare flag runs no beam search.
    #[arg(long, value_delimiter = ',', num_args = 0..=1)]
    beams: Option<Vec<usize>>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Posterior samples per node.
    #[arg(long)]
    samples: Option<usize>,
    /// Monte Carlo draws per level of the on-model table.
    #[arg(long)]
    table_samples: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    selection: Option<Selection>,
    /// Skip the exact optimum and regret columns.
    #[arg(long)]
    no_exhaustive: bool,
    /// CSV output [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-method means and standard errors as JSON.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PriorHistArgs {
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Dirichlet concentrations to compare against.
    #[arg(long = "alpha", value_delimiter = ',')]
    alphas: Vec<f64>,
    /// Dimension of the Dirichlet draws.
    #[arg(long)]
    branching: Option<usize>,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON output [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CollectPoolArgs {
    /// Backend, as for `decode --oracle`.
    #[arg(long)]
    oracle: String,
    /// JSON-lines file, one array of prompt token ids per line.
    #[arg(long)]
    prompts: PathBuf,
    /// Greedy steps recorded per prompt.
    #[arg(long, default_value_t = 32)]
    steps: usize,
    /// Entries kept per categorical.
    #[arg(long, default_value_t = 64)]
    top_t: usize,
    /// Seconds to wait for each backend reply.
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn precompute_prior(args: PrecomputeArgs, exec: Execution) -> Result<()> {
    let prior = match (&args.pool, args.alpha) {
        (Some(path), _) => CategoricalPrior::empirical(read_pool(path)?)?,
        (None, Some(alpha)) => CategoricalPrior::dirichlet(alpha)?,
        (None, None) => unreachable!("clap requires --alpha or --pool"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let table = precompute_delta_table_with(
        args.depth,
        args.branching,
        &prior,
        args.samples,
        &mut rng,
        exec,
    )?;
    output(args.out.as_deref())?.write_all(table.to_json().as_bytes())?;
    // keep stdout clean for the table itself when no file is given
    let mut report: Box<dyn Write> = if args.out.is_some() {
        Box::new(std::io::stdout())
    } else {
        Box::new(std::io::stderr())
    };
    for l in &table.levels {
        let mean = l.a / (l.a + l.b);
        writeln!(
            report,
            "level {:>3}: a = {:.6e}  b = {:.6e}  mean = {mean:.6}",
            l.level, l.a, l.b
        )?;
    }
    writeln!(report, "{} fitted levels", table.levels.len())?;
    Ok(())
}

fn toy_bench(args: ToyBenchArgs, exec: Execution) -> Result<()> {
    let mut cfg: ToyBenchConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ToyBenchConfig::default(),
    };
    macro_rules! set {
        ($($field:ident <- $flag:expr),+) => { $(if let Some(v) = $flag { cfg.$field = v; })+ };
    }
    set!(
        branching <- args.branching,
        depth <- args.depth,
        alphas <- args.alphas,
        epsilons <- args.epsilons,
        beam_widths <- args.beams,
        trees <- args.trees,
        seed <- args.seed,
        samples <- args.samples,
        table_samples <- args.table_samples,
        strategy <- args.strategy,
        selection <- args.selection
    );
    if args.k_max.is_some() {
        cfg.k_max = args.k_max;
    }
    if args.no_exhaustive {
        cfg.exhaustive = false;
    }
    let rows = run_toy_bench(&cfg, exec)?;
    let mut w = csv::Writer::from_writer(output(args.out.as_deref())?);
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let summary = summarize(&rows);
    for s in &summary {
        let what = match (s.epsilon, s.beam_width) {
            (Some(e), _) => format!("ults(eps={e})"),
            (_, Some(k)) => format!("beam(k={k})"),
            _ => s.method.clone(),
        };
        eprintln!(
            "alpha={:<5} {what:<16} nodes {:>7.2}  loglik {:>9.4} ± {:.4}",
            s.alpha, s.mean_nodes, s.mean_loglik, s.sem_loglik
        );
    }
    if let Some(path) = &args.summary {
        serde_json::to_writer_pretty(output(Some(path))?, &summary)?;
    }
    Ok(())
}

fn prior_hist(args: PriorHistArgs, exec: Execution) -> Result<()> {
    if args.pool.is_none() && args.alphas.is_empty() {
        bail!("nothing to histogram: give --pool and/or --alpha");
    }
    let pool = args.pool.as_deref().map(read_pool).transpose()?;
    let branching = match (args.branching, &pool) {
        (Some(b), _) => b,
        (None, _) if args.alphas.is_empty() => 1,
        (None, Some(pool)) => pool.iter().map(|e| e.probs.len()).min().unwrap_or(1),
        (None, None) => bail!("--branching is required for Dirichlet series without a pool"),
    };
    let hist = prior_histogram(
        pool.as_deref(),
        &args.alphas,
        branching,
        args.samples,
        args.bins,
        args.seed,
        exec,
    )?;
    let mut out = output(args.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &hist)?;
    writeln!(out)?;
    Ok(())
}

fn read_prompts(path: &Path) -> Result<Vec<Vec<Token>>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut prompts = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        prompts.push(
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?,
        );
    }
    Ok(prompts)
}

fn collect(args: CollectPoolArgs) -> Result<()> {
    let spec: OracleSpec = args.oracle.parse()?;
    let timeout = args
        .timeout
        .map(Duration::from_secs_f64)
        .unwrap_or(DEFAULT_TIMEOUT);
    let oracle = spec.open(timeout)?;
    let prompts = read_prompts(&args.prompts)?;
    let pool = collect_pool(&oracle, &prompts, args.steps, args.top_t);
    write_pool(output(Some(&args.out))?, &pool.entries)?;
    eprintln!(
        "recorded {} categoricals from {} prompts",
        pool.entries.len(),
        prompts.len()
    );
    for (i, e) in &pool.failures {
        eprintln!("prompt {i}: {e}");
    }
    if !pool.failures.is_empty() {
        bail!(
            "{} of {} prompts failed",
            pool.failures.len(),
            prompts.len()
        );
    }
    Ok(())
}

fn decode(args: DecodeArgs) -> Result<()> {
    let args = args.resolve()?;
    let needs_prior = args.compare || args.method.unwrap_or(Method::Ults) == Method::Ults;
    let table = match &args.prior {
        Some(path) => Some(DeltaTable::load(path)?),
        None if needs_prior => Cli::command()
            .error(
                ErrorKind::MissingRequiredArgument,
                "--prior is required for ULTS decoding and --compare",
            )
            .exit(),
        None => None,
    };
    let doc = decode::run(args, table)?;
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let result = match cli.command {
        Command::PrecomputePrior(a) => precompute_prior(a, exec),
        Command::ToyBench(a) => toy_bench(a, exec),
        Command::PriorHist(a) => prior_hist(a, exec),
        Command::Decode(a) => decode(a),
        Command::CollectPool(a) => collect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
