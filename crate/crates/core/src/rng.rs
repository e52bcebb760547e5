//! Seeded random streams and a few variates that need log-scale care.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Open01, StandardNormal};

pub type ChainRng = ChaCha8Rng;

/// Independent stream `stream` of the generator seeded by `seed`.
pub fn stream(seed: u64, stream: u64) -> ChainRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id for a (replicate, purpose) pair.
pub fn stream_id(replicate: u64, purpose: u64) -> u64 {
    (replicate << 8) | (purpose & 0xff)
}

pub fn open01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    Open01.sample(rng)
}

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Gamma(shape, rate) draw.
pub fn gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("gamma parameters are positive and finite")
        .sample(rng)
}

/// log of a Gamma(shape, 1) draw; stays finite for very small shapes where
/// the draw itself underflows.
pub fn ln_gamma_variate<R: Rng + ?Sized>(rng: &mut R, shape: f64) -> f64 {
    if shape >= 1.0 {
        gamma(rng, shape, 1.0).ln()
    } else {
        gamma(rng, shape + 1.0, 1.0).ln() + open01(rng).ln() / shape
    }
}

/// Beta(a, b) draw returned as (nu, log(1 - nu)).
pub fn beta_with_log1m<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> (f64, f64) {
    let la = ln_gamma_variate(rng, a);
    let lb = ln_gamma_variate(rng, b);
    let top = la.max(lb);
    let lse = top + ((la - top).exp() + (lb - top).exp()).ln();
    let nu = (la - lse).exp();
    (nu, lb - lse)
}

/// log(sum exp(v)).
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let top = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return top;
    }
    top + v.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
}

/// Draw an index with probability proportional to exp(logw). Returns `None`
/// when no weight is usable (all -inf or any NaN).
pub fn categorical_log<R: Rng + ?Sized>(rng: &mut R, logw: &[f64]) -> Option<usize> {
    let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() || logw.iter().any(|v| v.is_nan()) {
        return None;
    }
    let total: f64 = logw.iter().map(|v| (v - top).exp()).sum();
    let mut target = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, v) in logw.iter().enumerate() {
        let w = (v - top).exp();
        if w > 0.0 {
            last = i;
            if target < w {
                return Some(i);
            }
            target -= w;
        }
    }
    Some(last)
}
