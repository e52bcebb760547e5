//! Posterior summaries and autocorrelation of retained draws.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::Draws;

pub const ACF_LAGS: [usize; 5] = [1, 5, 10, 25, 50];
pub const MIN_DRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub names: Vec<String>,
    pub draws: usize,
    pub mip: Vec<f64>,
    /// Model-averaged coefficients (excluded draws count as zero).
    pub beta_hat: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    /// Predictors with MIP > 0.5.
    pub median_probability_model: Vec<bool>,
    /// Per predictor, autocorrelation of the coefficient draws at [`ACF_LAGS`].
    pub autocorr: Vec<Vec<f64>>,
    pub phi_hat: f64,
    pub g_hat: f64,
    pub m_hat: f64,
    pub intercept_hat: f64,
    pub mean_clusters: f64,
}

/// Sample autocorrelation at `lag` (mean-centred, normalised by N). A series
/// with zero variance has autocorrelation 1.
pub fn autocorrelation(series: &[f64], lag: usize) -> Result<f64> {
    let n = series.len();
    if n <= lag {
        return Err(Error::TooFewDraws { needed: lag + 1, have: n });
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let c0: f64 = series.iter().map(|v| (v - mean).powi(2)).sum();
    if c0 == 0.0 {
        return Ok(1.0);
    }
    let ck: f64 = series
        .iter()
        .zip(&series[lag..])
        .map(|(a, b)| (a - mean) * (b - mean))
        .sum();
    Ok((ck / c0).clamp(-1.0, 1.0))
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn summarize(draws: &Draws, names: &[String]) -> Result<PosteriorSummary> {
    let k = draws.len();
    if k < MIN_DRAWS {
        return Err(Error::TooFewDraws { needed: MIN_DRAWS, have: k });
    }
    let p = draws.beta[0].len();
    if names.len() != p {
        return Err(Error::Shape { expected: p, got: names.len() });
    }
    let mut mip = Vec::with_capacity(p);
    let mut beta_hat = Vec::with_capacity(p);
    let mut ci_low = Vec::with_capacity(p);
    let mut ci_high = Vec::with_capacity(p);
    let mut autocorr = Vec::with_capacity(p);
    for j in 0..p {
        let col: Vec<f64> = draws.beta.iter().map(|b| b[j]).collect();
        mip.push(draws.gamma.iter().filter(|g| g[j]).count() as f64 / k as f64);
        beta_hat.push(mean(&col));
        let mut sorted = col.clone();
        sorted.sort_by(f64::total_cmp);
        ci_low.push(quantile_sorted(&sorted, 0.025));
        ci_high.push(quantile_sorted(&sorted, 0.975));
        autocorr.push(
            ACF_LAGS
                .iter()
                .map(|&l| autocorrelation(&col, l))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(PosteriorSummary {
        names: names.to_vec(),
        draws: k,
        median_probability_model: mip.iter().map(|&m| m > 0.5).collect(),
        mip,
        beta_hat,
        ci_low,
        ci_high,
        autocorr,
        phi_hat: mean(&draws.phi),
        g_hat: mean(&draws.g),
        m_hat: mean(&draws.dp_mass),
        intercept_hat: mean(&draws.intercept),
        mean_clusters: draws.clusters.iter().sum::<usize>() as f64 / k as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{std_normal, stream};

    fn draws_from(beta: Vec<Vec<f64>>) -> Draws {
        let k = beta.len();
        Draws {
            gamma: beta.iter().map(|b| b.iter().map(|v| *v != 0.0).collect()).collect(),
            beta,
            phi: vec![2.0; k],
            g: vec![3.0; k],
            dp_mass: vec![0.5; k],
            clusters: vec![2; k],
            intercept: vec![0.1; k],
            mixtures: vec![],
        }
    }

    #[test]
    fn lag_zero_and_alternating() {
        let s: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(autocorrelation(&s, 0).unwrap(), 1.0);
        assert!((autocorrelation(&s, 1).unwrap() + 0.99).abs() < 1e-12);
        assert_eq!(autocorrelation(&[2.0; 10], 3).unwrap(), 1.0);
        assert!(autocorrelation(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn ar1_lag_one() {
        let mut rng = stream(1, 0);
        let mut x = 0.0;
        let s: Vec<f64> = (0..1_000_000)
            .map(|_| {
                x = 0.5 * x + std_normal(&mut rng);
                x
            })
            .collect();
        assert!((autocorrelation(&s, 1).unwrap() - 0.5).abs() < 5e-3);
    }

    #[test]
    fn white_noise_chain() {
        let mut rng = stream(2, 0);
        let k = 100_000;
        let beta: Vec<Vec<f64>> = (0..k).map(|_| vec![std_normal(&mut rng)]).collect();
        let s = summarize(&draws_from(beta), &["a".into()]).unwrap();
        let bound = 3.0 / (k as f64).sqrt();
        assert!(s.autocorr[0].iter().all(|r| r.abs() < bound));
    }

    #[test]
    fn constant_chain() {
        let s = summarize(&draws_from(vec![vec![1.5, 0.0]; 200]), &["a".into(), "b".into()]).unwrap();
        assert_eq!(s.autocorr[0], vec![1.0; 5]);
        assert_eq!(s.ci_low[0], 1.5);
        assert_eq!(s.ci_high[0], 1.5);
        assert_eq!(s.mip, vec![1.0, 0.0]);
        assert_eq!(s.median_probability_model, vec![true, false]);
        assert_eq!(s.mean_clusters, 2.0);
    }

    #[test]
    fn too_few_draws() {
        assert!(matches!(
            summarize(&draws_from(vec![vec![1.0]; 99]), &["a".into()]),
            Err(Error::TooFewDraws { needed: 100, have: 99 })
        ));
    }

    #[test]
    fn type7_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert!((quantile_sorted(&v, 0.975) - 4.9).abs() < 1e-12);
    }

    /// A coefficient that is almost always excluded but large when included:
    /// the model-averaged mean can sit above the 97.5% point.
    #[test]
    fn averaged_mean_can_leave_interval() {
        let mut beta = vec![vec![0.0]; 990];
        beta.extend(vec![vec![100.0]; 10]);
        let s = summarize(&draws_from(beta), &["a".into()]).unwrap();
        assert_eq!(s.ci_high[0], 0.0);
        assert!(s.beta_hat[0] > s.ci_high[0]);
    }

    #[test]
    fn permutation_invariant_except_acf() {
        let mut rng = stream(3, 0);
        let beta: Vec<Vec<f64>> = (0..500).map(|_| vec![std_normal(&mut rng), 0.0]).collect();
        let mut rev = beta.clone();
        rev.reverse();
        let names = vec!["a".to_string(), "b".to_string()];
        let a = summarize(&draws_from(beta), &names).unwrap();
        let b = summarize(&draws_from(rev), &names).unwrap();
        assert!((a.beta_hat[0] - b.beta_hat[0]).abs() < 1e-12);
        assert_eq!(a.ci_low, b.ci_low);
        assert_eq!(a.mip, b.mip);
    }
}
