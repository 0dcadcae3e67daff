use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Oracle, OracleError, OracleQuery, OracleReply, Token};

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub prefix: Vec<Token>,
    pub tokens: Vec<Token>,
    pub logprobs: Vec<f64>,
    pub terminal: Vec<bool>,
}

impl TraceEntry {
    fn into_parts(self) -> (Vec<Token>, OracleReply) {
        (
            self.prefix,
            OracleReply {
                tokens: self.tokens,
                logprobs: self.logprobs,
                terminal: self.terminal,
            },
        )
    }
}

/// Replays stored replies keyed by exact prefix.
#[derive(Debug, Clone, Default)]
pub struct TraceOracle {
    replies: HashMap<Vec<Token>, OracleReply>,
    vocab_size: Option<usize>,
    eos_token: Option<Token>,
}

impl TraceOracle {
    pub fn from_entries<I: IntoIterator<Item = TraceEntry>>(
        entries: I,
    ) -> Result<Self, OracleError> {
        let mut replies = HashMap::new();
        for entry in entries {
            let (prefix, reply) = entry.into_parts();
            reply.validate(reply.len().max(1))?;
            if replies.insert(prefix.clone(), reply).is_some() {
                return Err(OracleError::ProtocolViolation(format!(
                    "duplicate trace prefix {prefix:?}"
                )));
            }
        }
        Ok(TraceOracle {
            replies,
            vocab_size: None,
            eos_token: None,
        })
    }

    pub fn load(path: &Path) -> Result<Self, OracleError> {
        let file = std::fs::File::open(path)
            .map_err(|e| OracleError::Io(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| OracleError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TraceEntry = serde_json::from_str(&line).map_err(|e| {
                OracleError::ProtocolViolation(format!("trace line {}: {e}", i + 1))
            })?;
            entries.push(entry);
        }
        Self::from_entries(entries)
    }

    pub fn with_vocab_size(mut self, vocab: usize) -> Self {
        self.vocab_size = Some(vocab);
        self
    }

    pub fn with_eos_token(mut self, eos: Token) -> Self {
        self.eos_token = Some(eos);
        self
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }
}

impl Oracle for TraceOracle {
    fn query(&self, q: &OracleQuery) -> Result<OracleReply, OracleError> {
        self.replies
            .get(&q.prefix)
            .map(|r| r.clone().truncated(q.top_k))
            .ok_or_else(|| OracleError::PrefixNotInTrace(q.prefix.clone()))
    }

    fn vocab_size(&self) -> Option<usize> {
        self.vocab_size
    }

    fn eos_token(&self) -> Option<Token> {
        self.eos_token
    }
}

/// Wraps an oracle and records every successful reply.
#[derive(Debug)]
pub struct TraceRecorder<O> {
    inner: O,
    recorded: Mutex<BTreeMap<Vec<Token>, OracleReply>>,
}

impl<O: Oracle> TraceRecorder<O> {
    pub fn new(inner: O) -> Self {
        TraceRecorder {
            inner,
            recorded: Mutex::new(BTreeMap::new()),
        }
    }

    /// Recorded entries in prefix order.
    pub fn entries(&self) -> Vec<TraceEntry> {
        let map = self.recorded.lock().expect("recorder poisoned");
        map.iter()
            .map(|(prefix, r)| TraceEntry {
                prefix: prefix.clone(),
                tokens: r.tokens.clone(),
                logprobs: r.logprobs.clone(),
                terminal: r.terminal.clone(),
            })
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in self.entries() {
            serde_json::to_writer(&mut out, &e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_trace(&self) -> TraceOracle {
        let mut t = TraceOracle::from_entries(self.entries())
            .expect("recorded replies were validated by the source");
        t.vocab_size = self.inner.vocab_size();
        t.eos_token = self.inner.eos_token();
        t
    }
}

impl<O: Oracle> Oracle for TraceRecorder<O> {
    fn query(&self, q: &OracleQuery) -> Result<OracleReply, OracleError> {
        let reply = self.inner.query(q)?;
        let mut map = self.recorded.lock().expect("recorder poisoned");
        // keep the widest reply seen for a prefix
        let keep = map.get(&q.prefix).is_none_or(|old| old.len() < reply.len());
        if keep {
            map.insert(q.prefix.clone(), reply.clone());
        }
        Ok(reply)
    }

    fn vocab_size(&self) -> Option<usize> {
        self.inner.vocab_size()
    }

    fn eos_token(&self) -> Option<Token> {
        self.inner.eos_token()
    }
}
