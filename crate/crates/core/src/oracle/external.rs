//! Newline-delimited JSON client for an out-of-process model backend.
//!
//! ```text
//! -> {"type":"init","protocol":1}
//! <- {"type":"init_ok","vocab_size":50257,"eos_token":50256}
//! -> {"type":"query","id":1,"prefix":[464,3290],"top_k":5}
//! <- {"type":"reply","id":1,"tokens":[...],"logprobs":[...],"terminal":[...]}
//! <- {"type":"error","id":1,"message":"..."}
//! ```

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Oracle, OracleError, OracleQuery, OracleReply, Token};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Frame {
    Init {
        protocol: u32,
    },
    InitOk {
        vocab_size: usize,
        eos_token: Option<Token>,
    },
    Query {
        id: u64,
        prefix: Vec<Token>,
        top_k: usize,
    },
    Reply {
        id: u64,
        tokens: Vec<Token>,
        logprobs: Vec<f64>,
        terminal: Vec<bool>,
    },
    Error {
        id: Option<u64>,
        message: String,
    },
}

impl Frame {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("frame serializes");
        s.push('\n');
        s
    }
}

struct Session {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
}

impl Session {
    fn send(&mut self, frame: &Frame) -> Result<(), OracleError> {
        self.writer
            .write_all(frame.to_line().as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| OracleError::BackendUnavailable(e.to_string()))
    }

    fn recv(&mut self, deadline: Instant, timeout: Duration) -> Result<Frame, OracleError> {
        let remaining = deadline.saturating_duration_since(Instant::now());
        match self.lines.recv_timeout(remaining) {
            Ok(Ok(line)) => serde_json::from_str(line.trim()).map_err(|e| {
                OracleError::ProtocolViolation(format!("malformed frame {line:?}: {e}"))
            }),
            Ok(Err(e)) => Err(OracleError::BackendUnavailable(e.to_string())),
            Err(RecvTimeoutError::Timeout) => Err(OracleError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(OracleError::BackendUnavailable(
                "backend closed its output".into(),
            )),
        }
    }
}

/// Oracle backed by a subprocess or socket speaking the line protocol.
///
/// Requests are serialized: one query is in flight at a time.
pub struct ExternalOracle {
    session: Mutex<Session>,
    child: Mutex<Option<Child>>,
    vocab_size: usize,
    eos_token: Option<Token>,
    timeout: Duration,
}

impl std::fmt::Debug for ExternalOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalOracle")
            .field("vocab_size", &self.vocab_size)
            .field("eos_token", &self.eos_token)
            .field("timeout", &self.timeout)
            .finish_non_exhaustive()
    }
}

fn spawn_reader<R: Read + Send + 'static>(reader: R) -> Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut reader = BufReader::new(reader);
        loop {
            let mut line = String::new();
            match reader.read_line(&mut line) {
                Ok(0) => break,
                Ok(_) => {
                    if line.trim().is_empty() {
                        continue;
                    }
                    if tx.send(Ok(line)).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let _ = tx.send(Err(e));
                    break;
                }
            }
        }
    });
    rx
}

impl ExternalOracle {
    /// Runs `command` through `sh -c` and talks to it over stdin/stdout.
    pub fn spawn_shell(command: &str, timeout: Duration) -> Result<Self, OracleError> {
        let mut cmd = Command::new("sh");
        cmd.arg("-c").arg(command);
        Self::spawn(cmd, timeout)
    }

    pub fn spawn(mut command: Command, timeout: Duration) -> Result<Self, OracleError> {
        let mut child = command
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| OracleError::BackendUnavailable(format!("spawning backend: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut oracle = Self::from_streams(stdout, stdin, timeout);
        match &mut oracle {
            Ok(o) => *o.child.get_mut().expect("fresh mutex") = Some(child),
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
        oracle
    }

    pub fn connect_tcp(addr: &str, timeout: Duration) -> Result<Self, OracleError> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| OracleError::BackendUnavailable(format!("{addr}: {e}")))?;
        let reader = stream
            .try_clone()
            .map_err(|e| OracleError::BackendUnavailable(e.to_string()))?;
        Self::from_streams(reader, stream, timeout)
    }

    /// Performs the handshake over arbitrary byte streams.
    pub fn from_streams<R, W>(reader: R, writer: W, timeout: Duration) -> Result<Self, OracleError>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let mut session = Session {
            writer: Box::new(writer),
            lines: spawn_reader(reader),
            next_id: 1,
        };
        session.send(&Frame::Init {
            protocol: PROTOCOL_VERSION,
        })?;
        let deadline = Instant::now() + timeout;
        let (vocab_size, eos_token) = match session.recv(deadline, timeout)? {
            Frame::InitOk {
                vocab_size,
                eos_token,
            } => (vocab_size, eos_token),
            Frame::Error { message, .. } => return Err(OracleError::BackendUnavailable(message)),
            other => {
                return Err(OracleError::ProtocolViolation(format!(
                    "expected init_ok, got {other:?}"
                )))
            }
        };
        Ok(ExternalOracle {
            session: Mutex::new(session),
            child: Mutex::new(None),
            vocab_size,
            eos_token,
            timeout,
        })
    }

    fn attempt(
        &self,
        session: &mut Session,
        q: &OracleQuery,
        abandoned: &HashSet<u64>,
    ) -> Result<(u64, Result<OracleReply, OracleError>), OracleError> {
        let id = session.next_id;
        session.next_id += 1;
        session.send(&Frame::Query {
            id,
            prefix: q.prefix.clone(),
            top_k: q.top_k,
        })?;
        let deadline = Instant::now() + self.timeout;
        loop {
            match session.recv(deadline, self.timeout) {
                Err(OracleError::Timeout(t)) => return Ok((id, Err(OracleError::Timeout(t)))),
                Err(e) => return Err(e),
                Ok(Frame::Reply {
                    id: rid,
                    tokens,
                    logprobs,
                    terminal,
                }) => {
                    if rid == id {
                        let reply = OracleReply {
                            tokens,
                            logprobs,
                            terminal,
                        };
                        reply.validate(q.top_k)?;
                        return Ok((id, Ok(reply)));
                    }
                    if !abandoned.contains(&rid) {
                        return Err(OracleError::ProtocolViolation(format!(
                            "reply id {rid}, expected {id}"
                        )));
                    }
                }
                Ok(Frame::Error { id: rid, message }) => {
                    if rid == Some(id) || rid.is_none() {
                        return Err(OracleError::Backend(message));
                    }
                    if !rid.is_some_and(|r| abandoned.contains(&r)) {
                        return Err(OracleError::ProtocolViolation(format!(
                            "error frame for id {rid:?}, expected {id}"
                        )));
                    }
                }
                Ok(other) => {
                    return Err(OracleError::ProtocolViolation(format!(
                        "unexpected frame {other:?}"
                    )))
                }
            }
        }
    }
}

impl Oracle for ExternalOracle {
    /// One retry after a timeout; a late reply to the abandoned request is discarded.
    fn query(&self, q: &OracleQuery) -> Result<OracleReply, OracleError> {
        let mut session = self.session.lock().expect("session poisoned");
        let mut abandoned = HashSet::new();
        let (id, first) = self.attempt(&mut session, q, &abandoned)?;
        match first {
            Err(OracleError::Timeout(_)) => {
                log::warn!("backend timed out on request {id}, retrying once");
                abandoned.insert(id);
                self.attempt(&mut session, q, &abandoned)?.1
            }
            other => other,
        }
    }

    fn vocab_size(&self) -> Option<usize> {
        Some(self.vocab_size)
    }

    fn eos_token(&self) -> Option<Token> {
        self.eos_token
    }
}

impl Drop for ExternalOracle {
    fn drop(&mut self) {
        if let Ok(session) = self.session.get_mut() {
            // closing the pipe lets a well-behaved backend exit
            session.writer = Box::new(std::io::sink());
        }
        if let Some(mut child) = self.child.get_mut().ok().and_then(Option::take) {
            let deadline = Instant::now() + Duration::from_millis(500);
            while Instant::now() < deadline {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
