//! Log-space Gamma, Beta and Dirichlet draws.
//!
//! Concentrations as small as 1e-4 push Gamma variates far below the
//! smallest positive `f64`, so every draw here is produced as a logarithm.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Open01};

/// `ln(e^a + e^b)` without overflow; handles `-inf` operands.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln` of a Gamma(shape, 1) variate.
///
/// For `shape < 1` uses `G(s) = G(s + 1) * U^(1/s)`.
pub fn log_gamma_variate<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0 && shape.is_finite());
    if shape >= 1.0 {
        let g = Gamma::new(shape, 1.0)
            .expect("valid gamma shape")
            .sample(rng);
        g.ln()
    } else {
        let g = Gamma::new(shape + 1.0, 1.0)
            .expect("valid gamma shape")
            .sample(rng);
        let u: f64 = Open01.sample(rng);
        g.ln() + u.ln() / shape
    }
}

/// Log-probabilities of one symmetric Dirichlet(`alpha`) draw of dimension `dim`.
pub fn log_dirichlet<R: Rng + ?Sized>(alpha: f64, dim: usize, rng: &mut R) -> Vec<f64> {
    let mut logs: Vec<f64> = (0..dim).map(|_| log_gamma_variate(alpha, rng)).collect();
    let norm = logs
        .iter()
        .fold(f64::NEG_INFINITY, |acc, &x| log_add_exp(acc, x));
    for x in &mut logs {
        *x -= norm;
    }
    logs
}

/// `ln X` for `X ~ Beta(a, b)`, always `<= 0`.
pub fn log_beta_variate<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let ga = log_gamma_variate(a, rng);
    let gb = log_gamma_variate(b, rng);
    // ln(ga / (ga + gb)) = -ln(1 + e^(gb - ga))
    let d = gb - ga;
    let v = if d > 0.0 {
        -(d + (-d).exp().ln_1p())
    } else {
        -d.exp().ln_1p()
    };
    v.min(0.0)
}
