mod common;

use std::io::Write;
use std::path::Path;
use std::time::Duration;

use proptest::prelude::*;

use common::dirichlet_table;
use ults::oracle::{checked_query, CountingOracle, OracleQuery, OracleReply, Token};
use ults::{
    beam_search, ults_search, ExternalOracle, Oracle, OracleError, SearchError, Searcher,
    Selection, SyntheticOracle, Termination, TraceOracle, TraceRecorder, UltsConfig,
};

/// Replays a trace file over the line protocol.
/// Arguments: trace path, vocabulary size, optional query limit before exiting.
const MOCK_BRIDGE: &str = r#"
import json, sys
trace, vocab = sys.argv[1], int(sys.argv[2])
limit = int(sys.argv[3]) if len(sys.argv) > 3 else None
replies = {}
with open(trace) as f:
    for line in f:
        if line.strip():
            e = json.loads(line)
            replies[tuple(e["prefix"])] = e
served = 0
for line in sys.stdin:
    msg = json.loads(line)
    if msg["type"] == "init":
        out = {"type": "init_ok", "vocab_size": vocab, "eos_token": None}
    elif limit is not None and served >= limit:
        sys.exit(1)
    else:
        served += 1
        e = replies.get(tuple(msg["prefix"]))
        if e is None:
            out = {"type": "error", "id": msg["id"], "message": "unknown prefix"}
        else:
            k = msg["top_k"]
            out = {"type": "reply", "id": msg["id"], "tokens": e["tokens"][:k],
                   "logprobs": e["logprobs"][:k], "terminal": e["terminal"][:k]}
    sys.stdout.write(json.dumps(out) + "\n")
    sys.stdout.flush()
"#;

fn spawn_bridge(dir: &Path, trace: &Path, args: &str) -> ExternalOracle {
    let script = dir.join("bridge.py");
    std::fs::write(&script, MOCK_BRIDGE).unwrap();
    let cmd = format!("python3 {} {} {args}", script.display(), trace.display());
    ExternalOracle::spawn_shell(&cmd, Duration::from_secs(30)).unwrap()
}

/// Records every node a full-width enumeration of depth `d` touches.
fn record_full_tree(oracle: SyntheticOracle, d: usize, path: &Path) {
    let b = oracle.branching();
    let rec = TraceRecorder::new(oracle);
    let mut frontier: Vec<Vec<Token>> = vec![vec![]];
    for _ in 0..d {
        let mut next = Vec::new();
        for p in frontier {
            let r = rec.query(&OracleQuery::new(p.clone(), b)).unwrap();
            for t in r.tokens {
                let mut c = p.clone();
                c.push(t);
                next.push(c);
            }
        }
        frontier = next;
    }
    let mut f = std::fs::File::create(path).unwrap();
    rec.write_jsonl(&mut f).unwrap();
    f.flush().unwrap();
}

fn config(d: usize, b: usize, seed: u64) -> UltsConfig {
    let mut c = UltsConfig::new(d, b);
    c.seed = seed;
    c.samples = 300;
    c
}

#[test]
fn subprocess_bridge_is_transparent() {
    let dir = tempfile::tempdir().unwrap();
    let (d, b) = (4, 5);
    let table = dirichlet_table(0.3, d, b, 1000, 1);
    for seed in 0..3 {
        let trace = dir.path().join(format!("trace{seed}.jsonl"));
        let live = SyntheticOracle::new(seed, 0.3, b);
        record_full_tree(live.clone(), d, &trace);

        let external = spawn_bridge(dir.path(), &trace, &b.to_string());
        let expected = ults_search(&live, &table, &config(d, b, seed)).unwrap();
        let bridged = ults_search(&external, &table, &config(d, b, seed)).unwrap();
        assert_eq!(bridged, expected);
        assert_eq!(
            bridged.best_loglik.to_bits(),
            expected.best_loglik.to_bits()
        );

        let replay = TraceOracle::load(&trace).unwrap();
        assert_eq!(
            ults_search(&replay, &table, &config(d, b, seed)).unwrap(),
            expected
        );
        assert_eq!(
            beam_search(&replay, 3, d, None).unwrap(),
            beam_search(&live, 3, d, None).unwrap()
        );
    }
}

#[test]
fn backend_crash_returns_partial_result() {
    let dir = tempfile::tempdir().unwrap();
    let (d, b) = (4, 5);
    let table = dirichlet_table(0.3, d, b, 1000, 2);
    let mut cfg = config(d, b, 0);
    cfg.epsilon = 1e-9;
    cfg.selection = Selection::FullBoundary;
    // a tree where the search keeps going well past its first leaf
    let (seed, full) = (0..100)
        .map(|s| {
            (
                s,
                ults_search(&SyntheticOracle::new(s, 0.3, b), &table, &cfg).unwrap(),
            )
        })
        .find(|(_, r)| r.nodes_expanded >= d + 3)
        .unwrap();
    let limit = full.nodes_expanded - 1;
    let live = SyntheticOracle::new(seed, 0.3, b);
    let mut searcher = Searcher::new(&live, &table, cfg.clone()).unwrap();
    for _ in 0..limit {
        searcher.step().unwrap();
    }

    let trace = dir.path().join("trace.jsonl");
    record_full_tree(live.clone(), d, &trace);
    let external = spawn_bridge(dir.path(), &trace, &format!("{b} {limit}"));
    match ults_search(&external, &table, &cfg) {
        Err(SearchError::Oracle {
            source, partial, ..
        }) => {
            assert!(
                matches!(source, OracleError::BackendUnavailable(_)),
                "{source:?}"
            );
            let partial = partial.expect("a leaf was found before the crash");
            assert_eq!(partial.termination, Termination::Interrupted);
            assert_eq!(partial.nodes_expanded, limit);
            assert_eq!(partial.best_loglik, searcher.best_loglik());
            assert!(partial.best_loglik <= full.best_loglik);
        }
        other => panic!("expected an oracle error, got {other:?}"),
    }

    // crashing before the first leaf leaves nothing to report
    let external = spawn_bridge(dir.path(), &trace, &format!("{b} 1"));
    assert!(matches!(
        ults_search(&external, &table, &cfg),
        Err(SearchError::Oracle { partial: None, .. })
    ));
}

#[test]
fn unknown_prefix_is_a_backend_error() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    record_full_tree(SyntheticOracle::new(1, 0.3, 3), 1, &trace);
    let external = spawn_bridge(dir.path(), &trace, "8");
    assert_eq!(external.vocab_size(), Some(8));
    assert!(external.query(&OracleQuery::new(vec![], 2)).is_ok());
    assert!(matches!(
        external.query(&OracleQuery::new(vec![0], 2)),
        Err(OracleError::Backend(_))
    ));
}

#[test]
fn queries_equal_expansions() {
    let (d, b) = (5, 6);
    let table = dirichlet_table(0.2, d, b, 1000, 3);
    for seed in 0..20 {
        let counting = CountingOracle::new(SyntheticOracle::new(seed, 0.2, b));
        let r = ults_search(&counting, &table, &config(d, b, seed)).unwrap();
        assert_eq!(counting.queries(), r.nodes_expanded);
        let counting = CountingOracle::new(SyntheticOracle::new(seed, 0.2, b));
        let r = beam_search(&counting, 3, d, None).unwrap();
        assert_eq!(counting.queries(), r.nodes_expanded);
    }
}

/// Returns whatever reply it was built with.
struct Adversary(OracleReply);

impl Oracle for Adversary {
    fn query(&self, _: &OracleQuery) -> Result<OracleReply, OracleError> {
        Ok(self.0.clone())
    }
}

fn arbitrary_reply() -> impl Strategy<Value = OracleReply> {
    (0usize..6).prop_flat_map(|n| {
        (
            proptest::collection::vec(0u32..10, n),
            proptest::collection::vec(
                prop_oneof![
                    -5.0f64..0.5,
                    Just(f64::NAN),
                    Just(f64::INFINITY),
                    Just(f64::NEG_INFINITY)
                ],
                n,
            ),
            proptest::collection::vec(any::<bool>(), 0..7),
        )
            .prop_map(|(tokens, logprobs, terminal)| OracleReply {
                tokens,
                logprobs,
                terminal,
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn malformed_replies_never_reach_the_search(reply in arbitrary_reply(), k in 1usize..5) {
        let oracle = Adversary(reply.clone());
        let q = OracleQuery::new(vec![], k);
        if checked_query(&oracle, &q).is_ok() {
            // accepted replies respect every reply invariant
            prop_assert!(reply.tokens.len() <= k);
            prop_assert_eq!(reply.tokens.len(), reply.logprobs.len());
            prop_assert_eq!(reply.tokens.len(), reply.terminal.len());
            prop_assert!(reply.logprobs.iter().all(|l| *l <= 1e-9 && !l.is_nan()));
            prop_assert!(reply.logprobs.windows(2).all(|w| w[0] >= w[1]));
            let mut t = reply.tokens.clone();
            t.sort();
            t.dedup();
            prop_assert_eq!(t.len(), reply.tokens.len());
            let mass: f64 = reply.logprobs.iter().map(|l| l.exp()).sum();
            prop_assert!(mass <= 1.0 + 1e-6);
        }
        // the search finishes, reports the oracle error or finds no leaf; it never panics
        let table = dirichlet_table(0.5, 3, 4, 200, 0);
        let mut cfg = UltsConfig::new(3, 4);
        cfg.samples = 50;
        match ults_search(&oracle, &table, &cfg) {
            Ok(r) => prop_assert!(r.best_loglik <= 0.0),
            Err(SearchError::Oracle { .. } | SearchError::NoLeafFound) => {}
            Err(e) => prop_assert!(false, "unexpected error {:?}", e),
        }
    }
}
