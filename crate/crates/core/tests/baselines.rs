use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ults::oracle::{OracleQuery, OracleReply, Token};
use ults::{beam_search, exhaustive_optimum, greedy, Oracle, OracleError, SyntheticOracle};

/// Presents `inner` under the token permutation `perm` (inner token i is shown as perm[i]).
struct Relabeled<O> {
    inner: O,
    perm: Vec<Token>,
}

impl<O: Oracle> Oracle for Relabeled<O> {
    fn query(&self, q: &OracleQuery) -> Result<OracleReply, OracleError> {
        let inverse = |t: Token| self.perm.iter().position(|&p| p == t).unwrap() as Token;
        let prefix = q.prefix.iter().map(|&t| inverse(t)).collect();
        let mut r = self.inner.query(&OracleQuery::new(prefix, q.top_k))?;
        r.tokens = r.tokens.iter().map(|&t| self.perm[t as usize]).collect();
        Ok(r)
    }

    fn vocab_size(&self) -> Option<usize> {
        self.inner.vocab_size()
    }
}

#[test]
fn beam_never_beats_the_optimum_and_wide_beams_match_it() {
    let (b, d) = (4, 4);
    for seed in 0..50 {
        let o = SyntheticOracle::new(seed, 0.4, b);
        let (opt, path) = exhaustive_optimum(&o, d).unwrap();
        for k in 1..=8 {
            assert!(beam_search(&o, k, d, None).unwrap().best_loglik <= opt);
        }
        let wide = beam_search(&o, b.pow(d as u32 - 1), d, None).unwrap();
        assert_eq!(wide.best_loglik.to_bits(), opt.to_bits());
        assert_eq!(wide.tokens, path);
    }
}

#[test]
fn mean_beam_quality_grows_with_width() {
    let (b, d) = (6, 5);
    let means: Vec<f64> = (1..=6)
        .map(|k| {
            (0..300)
                .map(|seed| {
                    beam_search(&SyntheticOracle::new(seed, 0.3, b), k, d, None)
                        .unwrap()
                        .best_loglik
                })
                .sum::<f64>()
                / 300.0
        })
        .collect();
    assert!(means.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{means:?}");
}

#[test]
fn expansion_counts() {
    let (b, d) = (5, 4);
    let o = SyntheticOracle::new(1, 0.5, b);
    assert_eq!(greedy(&o, d, None).unwrap().nodes_expanded, d);
    // level l holds min(k, b^l) hypotheses
    for k in 1..=10 {
        let expected: usize = (0..d).map(|l| k.min(b.pow(l as u32))).sum();
        assert_eq!(
            beam_search(&o, k, d, None).unwrap().nodes_expanded,
            expected,
            "k={k}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn optimum_is_invariant_under_relabeling(seed in any::<u64>(), alpha in 0.05f64..2.0, shuffle in any::<u64>()) {
        let (b, d) = (4, 3);
        let o = SyntheticOracle::new(seed, alpha, b);
        let mut perm: Vec<Token> = (0..b as Token).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let (opt, path) = exhaustive_optimum(&o, d).unwrap();
        let relabeled = Relabeled { inner: o, perm: perm.clone() };
        let (opt2, path2) = exhaustive_optimum(&relabeled, d).unwrap();
        prop_assert_eq!(opt.to_bits(), opt2.to_bits());
        // paths agree up to ties, which do not occur for continuous draws
        prop_assert_eq!(path.iter().map(|&t| perm[t as usize]).collect::<Vec<_>>(), path2);
        let g = greedy(&relabeled, d, None).unwrap();
        prop_assert!(g.best_loglik <= opt2);
    }
}
