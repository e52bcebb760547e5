//! Synthetic data generators and the replicate runner comparing the
//! DP-residual model with the normal linear model.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::summarize;
use crate::error::{Error, Result};
use crate::rng::{std_normal, stream, stream_id};
use crate::sampler::Sampler;
use crate::types::{Dataset, ResidualModel, SamplerConfig};

/// Stream purposes within a replicate.
pub const PURPOSE_DATA: u64 = 1;
pub const PURPOSE_SLM: u64 = 2;
pub const PURPOSE_NLM: u64 = 3;

/// Coefficients of the bimodal and Gaussian simulation designs.
pub const DESIGN_BETA: [f64; 10] = [3.0, 2.0, -1.0, 0.0, 1.5, 1.0, 0.0, -4.0, -1.5, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum ResidualLaw {
    Gaussian {
        mean: f64,
        var: f64,
    },
    TwoComponent {
        weight: f64,
        mean1: f64,
        var1: f64,
        mean2: f64,
        var2: f64,
    },
}

impl ResidualLaw {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ResidualLaw::Gaussian { mean, var } => mean.is_finite() && var > 0.0 && var.is_finite(),
            ResidualLaw::TwoComponent { weight, mean1, var1, mean2, var2 } => {
                weight > 0.0
                    && weight < 1.0
                    && mean1.is_finite()
                    && mean2.is_finite()
                    && var1 > 0.0
                    && var2 > 0.0
                    && var1.is_finite()
                    && var2.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid residual law {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ResidualLaw::Gaussian { mean, var } => mean + var.sqrt() * std_normal(rng),
            ResidualLaw::TwoComponent { weight, mean1, var1, mean2, var2 } => {
                if rng.random::<f64>() < weight {
                    mean1 + var1.sqrt() * std_normal(rng)
                } else {
                    mean2 + var2.sqrt() * std_normal(rng)
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            ResidualLaw::Gaussian { mean, .. } => mean,
            ResidualLaw::TwoComponent { weight, mean1, mean2, .. } => weight * mean1 + (1.0 - weight) * mean2,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            ResidualLaw::Gaussian { var, .. } => var,
            ResidualLaw::TwoComponent { weight, mean1, var1, mean2, var2 } => {
                let mu = self.mean();
                weight * (var1 + (mean1 - mu).powi(2)) + (1.0 - weight) * (var2 + (mean2 - mu).powi(2))
            }
        }
    }
}

/// Covariates are independent Uniform(-1, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub beta_true: Vec<f64>,
    pub residual: ResidualLaw,
    pub n: usize,
    pub test_n: usize,
}

impl GeneratorSpec {
    /// Bimodal residuals 0.5 N(2.5, 1) + 0.5 N(-2.5, 1).
    pub fn case_one(n: usize) -> Self {
        Self {
            beta_true: DESIGN_BETA.to_vec(),
            residual: ResidualLaw::TwoComponent {
                weight: 0.5,
                mean1: 2.5,
                var1: 1.0,
                mean2: -2.5,
                var2: 1.0,
            },
            n,
            test_n: 25,
        }
    }

    /// Gaussian residuals with intercept 1.
    pub fn case_two(n: usize) -> Self {
        Self {
            beta_true: DESIGN_BETA.to_vec(),
            residual: ResidualLaw::Gaussian { mean: 1.0, var: 1.0 },
            n,
            test_n: 25,
        }
    }

    pub fn p(&self) -> usize {
        self.beta_true.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.residual.validate()?;
        if self.beta_true.is_empty() || self.beta_true.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidConfig("beta_true must be nonempty and finite".into()));
        }
        if self.n < 2 || self.test_n < 1 {
            return Err(Error::InvalidConfig("need n >= 2 and test_n >= 1".into()));
        }
        Ok(())
    }

    /// True-support indicators.
    pub fn support(&self) -> Vec<bool> {
        self.beta_true.iter().map(|b| *b != 0.0).collect()
    }

    fn draw<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Result<Dataset> {
        let p = self.p();
        let mut x = DMatrix::zeros(rows, p);
        // row-major draw order so a dataset prefix does not depend on `rows`
        for i in 0..rows {
            for j in 0..p {
                x[(i, j)] = rng.random_range(-1.0..1.0);
            }
        }
        let y = (0..rows)
            .map(|i| {
                let fit: f64 = (0..p).map(|j| x[(i, j)] * self.beta_true[j]).sum();
                fit + self.residual.sample(rng)
            })
            .collect();
        let names = (1..=p).map(|j| format!("x{j}")).collect();
        Dataset::new(y, x, names)
    }
}

/// Training and test sets drawn from the same design.
pub fn generate<R: Rng + ?Sized>(spec: &GeneratorSpec, rng: &mut R) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let train = spec.draw(spec.n, rng)?;
    let test = spec.draw(spec.test_n, rng)?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// DP-residual semiparametric model.
    Slm,
    /// Normal linear model: allocation pinned to one cluster.
    Nlm,
}

impl Baseline {
    pub fn residual_model(self) -> ResidualModel {
        match self {
            Baseline::Slm => ResidualModel::Dp,
            Baseline::Nlm => ResidualModel::Single,
        }
    }

    fn purpose(self) -> u64 {
        match self {
            Baseline::Slm => PURPOSE_SLM,
            Baseline::Nlm => PURPOSE_NLM,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Slm => "slm",
            Baseline::Nlm => "nlm",
        }
    }
}

/// How point predictions are formed for the out-of-sample error.
pub const PREDICTION_RULE: &str =
    "x' beta_hat + posterior mean of the stick-weighted mean intercept sum_j w_j alpha_j / sum_j w_j";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub baseline: Baseline,
    pub n: usize,
    pub replicate: usize,
    pub mip: Vec<f64>,
    pub beta_hat: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub intercept_hat: f64,
    pub oos_mse: f64,
    /// ||beta_hat - beta_true||_2 / p.
    pub beta_mse: f64,
    pub median_model_correct: bool,
    pub mean_clusters: f64,
    /// Set when the chain failed; metrics are then NaN.
    pub diverged: Option<String>,
}

/// Seed for one sample size, so grids over n draw independent data.
pub fn seed_for_n(seed: u64, n: usize) -> u64 {
    seed.wrapping_add((n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn run_one(
    spec: &GeneratorSpec,
    config: &SamplerConfig,
    baseline: Baseline,
    replicate: usize,
    seed: u64,
) -> Result<ReplicateResult> {
    let seed = seed_for_n(seed, spec.n);
    let mut data_rng = stream(seed, stream_id(replicate as u64, PURPOSE_DATA));
    let (train, test) = generate(spec, &mut data_rng)?;
    let mut chain_rng = stream(seed, stream_id(replicate as u64, baseline.purpose()));
    let cfg = SamplerConfig {
        residual_model: baseline.residual_model(),
        ..config.clone()
    };
    let sampler = Sampler::new(&train, cfg)?;
    let p = spec.p();
    let failed = |msg: String| ReplicateResult {
        baseline,
        n: spec.n,
        replicate,
        mip: vec![f64::NAN; p],
        beta_hat: vec![f64::NAN; p],
        ci_low: vec![f64::NAN; p],
        ci_high: vec![f64::NAN; p],
        intercept_hat: f64::NAN,
        oos_mse: f64::NAN,
        beta_mse: f64::NAN,
        median_model_correct: false,
        mean_clusters: f64::NAN,
        diverged: Some(msg),
    };
    let out = match sampler.run_with(&mut chain_rng) {
        Ok(o) => o,
        Err(e @ (Error::Diverged { .. } | Error::Singular { .. } | Error::StickCap { .. })) => {
            return Ok(failed(e.to_string()))
        }
        Err(e) => return Err(e),
    };
    let s = summarize(&out.draws, train.names())?;
    let oos_mse = (0..test.n())
        .map(|i| {
            let pred: f64 = s.intercept_hat
                + (0..p).map(|j| test.x()[(i, j)] * s.beta_hat[j]).sum::<f64>();
            (test.y()[i] - pred).powi(2)
        })
        .sum::<f64>()
        / test.n() as f64;
    let beta_mse = s
        .beta_hat
        .iter()
        .zip(&spec.beta_true)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt()
        / p as f64;
    Ok(ReplicateResult {
        baseline,
        n: spec.n,
        replicate,
        median_model_correct: s.median_probability_model == spec.support(),
        mip: s.mip,
        beta_hat: s.beta_hat,
        ci_low: s.ci_low,
        ci_high: s.ci_high,
        intercept_hat: s.intercept_hat,
        oos_mse,
        beta_mse,
        mean_clusters: s.mean_clusters,
        diverged: None,
    })
}

/// Run `replicates` datasets through each baseline. Both baselines see the
/// same data within a replicate. Output is ordered by replicate, then by
/// baseline, and is identical for equal inputs regardless of thread count.
pub fn run_replicates(
    spec: &GeneratorSpec,
    config: &SamplerConfig,
    baselines: &[Baseline],
    replicates: usize,
    seed: u64,
) -> Result<Vec<ReplicateResult>> {
    spec.validate()?;
    config.validate()?;
    if replicates == 0 {
        return Err(Error::InvalidConfig("replicates must be positive".into()));
    }
    let jobs: Vec<(usize, Baseline)> = (0..replicates)
        .flat_map(|r| baselines.iter().map(move |&b| (r, b)))
        .collect();
    jobs.par_iter()
        .map(|&(r, b)| run_one(spec, config, b, r, seed))
        .collect()
}

/// Replicate-averaged MIP per predictor and baseline across sample sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MipCurves {
    pub ns: Vec<usize>,
    pub rows: Vec<MipCurveRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MipCurveRow {
    pub baseline: Baseline,
    pub predictor: usize,
    /// Mean MIP at each entry of `ns`; NaN when no replicate finished.
    pub mean_mip: Vec<f64>,
}

pub fn mip_curves(results: &[ReplicateResult]) -> MipCurves {
    let mut ns: Vec<usize> = results.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let mut baselines: Vec<Baseline> = Vec::new();
    for r in results {
        if !baselines.contains(&r.baseline) {
            baselines.push(r.baseline);
        }
    }
    let p = results.first().map(|r| r.mip.len()).unwrap_or(0);
    let mut rows = Vec::new();
    for &b in &baselines {
        for j in 0..p {
            let mean_mip = ns
                .iter()
                .map(|&n| {
                    let v: Vec<f64> = results
                        .iter()
                        .filter(|r| r.baseline == b && r.n == n && r.diverged.is_none())
                        .map(|r| r.mip[j])
                        .collect();
                    if v.is_empty() {
                        f64::NAN
                    } else {
                        v.iter().sum::<f64>() / v.len() as f64
                    }
                })
                .collect();
            rows.push(MipCurveRow { baseline: b, predictor: j, mean_mip });
        }
    }
    MipCurves { ns, rows }
}

/// Least-squares slope of `values` against `xs`.
pub fn trend_slope(xs: &[f64], values: &[f64]) -> f64 {
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = values.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(values).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config() -> SamplerConfig {
        SamplerConfig {
            iterations: 600,
            burn_in: 100,
            rng_seed: 1,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn zero_beta_gives_standard_normal_response() {
        let spec = GeneratorSpec {
            beta_true: vec![0.0; 2],
            residual: ResidualLaw::Gaussian { mean: 0.0, var: 1.0 },
            n: 100_000,
            test_n: 2,
        };
        let (d, _) = generate(&spec, &mut stream(1, 0)).unwrap();
        let m = d.y().iter().sum::<f64>() / d.n() as f64;
        let v = d.y().iter().map(|y| (y - m).powi(2)).sum::<f64>() / d.n() as f64;
        assert!(m.abs() < 0.01);
        assert!((v - 1.0).abs() < 0.02);
    }

    #[test]
    fn bimodal_residual_moments() {
        let law = GeneratorSpec::case_one(10).residual;
        assert!((law.variance() - 7.25).abs() < 1e-12);
        assert_eq!(law.mean(), 0.0);
        let mut rng = stream(2, 0);
        let e: Vec<f64> = (0..100_000).map(|_| law.sample(&mut rng)).collect();
        let m = e.iter().sum::<f64>() / e.len() as f64;
        let v = e.iter().map(|x| (x - m).powi(2)).sum::<f64>() / e.len() as f64;
        assert!(m.abs() < 0.02 * 7.25f64.sqrt());
        assert!((v / 7.25 - 1.0).abs() < 2e-2);
    }

    #[test]
    fn gaussian_design_intercept() {
        let spec = GeneratorSpec::case_two(100_000);
        let (d, _) = generate(&spec, &mut stream(3, 0)).unwrap();
        let resid: f64 = (0..d.n())
            .map(|i| d.y()[i] - (0..10).map(|j| d.x()[(i, j)] * DESIGN_BETA[j]).sum::<f64>())
            .sum::<f64>()
            / d.n() as f64;
        assert!((resid - 1.0).abs() < 2e-2);
    }

    #[test]
    fn covariates_are_uniform() {
        let spec = GeneratorSpec::case_one(5000);
        let (d, t) = generate(&spec, &mut stream(4, 0)).unwrap();
        assert_eq!(t.n(), 25);
        assert!(d.x().iter().all(|v| (-1.0..1.0).contains(v)));
        let m = d.x().iter().sum::<f64>() / d.x().len() as f64;
        assert!(m.abs() < 0.02);
    }

    #[test]
    fn invalid_laws_are_rejected() {
        assert!(ResidualLaw::Gaussian { mean: 0.0, var: 0.0 }.validate().is_err());
        let bad = ResidualLaw::TwoComponent { weight: 1.0, mean1: 0.0, var1: 1.0, mean2: 0.0, var2: 1.0 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn replicates_are_reproducible_and_ordered() {
        let spec = GeneratorSpec { n: 30, ..GeneratorSpec::case_one(30) };
        let both = [Baseline::Slm, Baseline::Nlm];
        let a = run_replicates(&spec, &quick_config(), &both, 2, 9).unwrap();
        let b = run_replicates(&spec, &quick_config(), &both, 2, 9).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!((a[0].replicate, a[0].baseline), (0, Baseline::Slm));
        assert_eq!((a[3].replicate, a[3].baseline), (1, Baseline::Nlm));
        for r in &a {
            assert!(r.mip.iter().all(|m| (0.0..=1.0).contains(m)));
            assert!(r.oos_mse >= 0.0);
        }
        assert!(a.iter().filter(|r| r.baseline == Baseline::Nlm).all(|r| r.mean_clusters == 1.0));
    }

    #[test]
    fn zero_replicates_is_an_error() {
        let spec = GeneratorSpec::case_one(20);
        assert!(run_replicates(&spec, &quick_config(), &[Baseline::Slm], 0, 1).is_err());
    }

    #[test]
    fn curves_shape() {
        let mk = |n, r, mip: Vec<f64>| ReplicateResult {
            baseline: Baseline::Slm,
            n,
            replicate: r,
            mip,
            beta_hat: vec![],
            ci_low: vec![],
            ci_high: vec![],
            intercept_hat: 0.0,
            oos_mse: 0.0,
            beta_mse: 0.0,
            median_model_correct: true,
            mean_clusters: 1.0,
            diverged: None,
        };
        let res = vec![mk(100, 0, vec![0.2, 1.0]), mk(100, 1, vec![0.4, 1.0])];
        let c = mip_curves(&res);
        assert_eq!(c.ns, vec![100]);
        assert_eq!(c.rows.len(), 2);
        assert!((c.rows[0].mean_mip[0] - 0.3).abs() < 1e-12);
        let res = vec![mk(100, 0, vec![0.2]), mk(300, 0, vec![0.6])];
        let c = mip_curves(&res);
        assert_eq!(c.ns, vec![100, 300]);
        assert!(trend_slope(&[100.0, 300.0], &c.rows[0].mean_mip) > 0.0);
    }
}
