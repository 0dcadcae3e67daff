#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ults::oracle::{OracleError, OracleQuery, OracleReply, Token};
use ults::{precompute_delta_table, CategoricalPrior, DeltaTable, Oracle};

pub fn dirichlet_table(
    alpha: f64,
    depth: usize,
    branching: usize,
    n: usize,
    seed: u64,
) -> DeltaTable {
    let prior = CategoricalPrior::dirichlet(alpha).unwrap();
    precompute_delta_table(
        depth,
        branching,
        &prior,
        n,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap()
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A confident mock language model: one token per prefix gets a logit
/// `gap` above the rest, so the top probability is usually above 0.9.
pub struct PeakedModel {
    pub vocab: usize,
    pub gap: f64,
}

impl PeakedModel {
    pub fn logits(&self, prefix: &[Token]) -> Vec<f64> {
        let mut h = mix(prefix.len() as u64);
        for &t in prefix {
            h = mix(h ^ u64::from(t));
        }
        let top = (h % self.vocab as u64) as usize;
        (0..self.vocab)
            .map(|i| {
                let noise = (mix(h ^ (i as u64 + 1)) >> 11) as f64 / (1u64 << 53) as f64;
                noise + if i == top { self.gap } else { 0.0 }
            })
            .collect()
    }
}

impl Oracle for PeakedModel {
    fn query(&self, q: &OracleQuery) -> Result<OracleReply, OracleError> {
        let z = self.logits(&q.prefix);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let mut order: Vec<usize> = (0..z.len()).collect();
        order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
        order.truncate(q.top_k);
        Ok(OracleReply {
            tokens: order.iter().map(|&i| i as Token).collect(),
            logprobs: order.iter().map(|&i| (z[i] - lse).min(0.0)).collect(),
            terminal: vec![false; order.len()],
        })
    }

    fn vocab_size(&self) -> Option<usize> {
        Some(self.vocab)
    }
}
