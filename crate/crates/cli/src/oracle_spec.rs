//! `--oracle` argument parsing: `trace:FILE`, `synthetic:seed=S,alpha=A,branching=B`,
//! `cmd:COMMAND` or `tcp:HOST:PORT`.

use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use ults::{ExternalOracle, Oracle, SyntheticOracle, TraceOracle};

#[derive(Debug, Clone, PartialEq)]
pub enum OracleSpec {
    Trace(PathBuf),
    Synthetic {
        seed: u64,
        alpha: f64,
        branching: usize,
    },
    Command(String),
    Tcp(String),
}

impl FromStr for OracleSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s
            .split_once(':')
            .with_context(|| format!("oracle {s:?} must look like KIND:ARGS"))?;
        match kind {
            "trace" => Ok(OracleSpec::Trace(rest.into())),
            "cmd" => Ok(OracleSpec::Command(rest.to_string())),
            "tcp" => Ok(OracleSpec::Tcp(rest.to_string())),
            "synthetic" => {
                let (mut seed, mut alpha, mut branching) = (0u64, 0.5f64, 8usize);
                for kv in rest.split(',').filter(|kv| !kv.is_empty()) {
                    let (k, v) = kv
                        .split_once('=')
                        .with_context(|| format!("expected key=value, got {kv:?}"))?;
                    match k {
                        "seed" => seed = v.parse()?,
                        "alpha" => alpha = v.parse()?,
                        "branching" | "b" => branching = v.parse()?,
                        other => bail!("unknown synthetic oracle key {other:?}"),
                    }
                }
                if !(alpha > 0.0 && alpha.is_finite()) || branching == 0 {
                    bail!("synthetic oracle needs alpha > 0 and branching >= 1");
                }
                Ok(OracleSpec::Synthetic {
                    seed,
                    alpha,
                    branching,
                })
            }
            other => {
                bail!("unknown oracle kind {other:?} (expected trace | synthetic | cmd | tcp)")
            }
        }
    }
}

impl OracleSpec {
    pub fn open(&self, timeout: Duration) -> Result<Box<dyn Oracle>> {
        Ok(match self {
            OracleSpec::Trace(path) => Box::new(TraceOracle::load(path)?),
            OracleSpec::Synthetic {
                seed,
                alpha,
                branching,
            } => Box::new(SyntheticOracle::new(*seed, *alpha, *branching)),
            OracleSpec::Command(cmd) => Box::new(ExternalOracle::spawn_shell(cmd, timeout)?),
            OracleSpec::Tcp(addr) => Box::new(ExternalOracle::connect_tcp(addr, timeout)?),
        })
    }
}
