//! Bayes-factor trajectories over growing sample sizes.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::quantile_sorted;
use crate::error::{Error, Result};
use crate::evidence::{conditional_log_marginal_with, r2_tilde, ExactEvaluator, GIntegrator};
use crate::rng::{std_normal, stream, stream_id};
use crate::ssvs::HyperG;
use crate::types::{Allocation, Dataset, InclusionVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixedAllocation {
    Identity,
    Single,
}

impl FixedAllocation {
    pub fn build(self, n: usize) -> Allocation {
        match self {
            FixedAllocation::Identity => Allocation::identity(n),
            FixedAllocation::Single => Allocation::single(n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum TrajectoryMode {
    /// Allocation summed out by enumeration; data y = X beta + N(0, 1/phi).
    Exact { dp_mass: f64 },
    /// Fixed allocation A; data y = X beta + A eta + eps with eta and eps
    /// both N(0, 1/phi), so Sigma_A^{-1/2} y has identity error covariance.
    Conditional { allocation: FixedAllocation },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    /// Generating coefficients over all candidate predictors (covariates are
    /// Uniform(-1, 1)).
    pub beta_true: Vec<f64>,
    pub phi: f64,
    pub model1: Vec<usize>,
    pub model2: Vec<usize>,
    pub mode: TrajectoryMode,
    pub hyper_g_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub n: usize,
    pub replicate: usize,
    /// log BF of model 2 against model 1.
    pub log_bf: f64,
    pub r2_model1: f64,
    pub r2_model2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub n: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub mean_r2_model1: f64,
    pub mean_r2_model2: f64,
    /// Almost-sure limit of R2 for a model containing the true support, in
    /// conditional mode.
    pub r2_limit: Option<f64>,
}

impl TrajectorySpec {
    fn validate(&self) -> Result<()> {
        let p = self.beta_true.len();
        if p == 0 || !(self.phi > 0.0 && self.phi.is_finite()) {
            return Err(Error::InvalidConfig("need nonempty beta_true and phi > 0".into()));
        }
        for &j in self.model1.iter().chain(&self.model2) {
            if j >= p {
                return Err(Error::InvalidModel(format!("predictor index {j} out of range for p = {p}")));
            }
        }
        if let TrajectoryMode::Exact { dp_mass } = self.mode {
            if !(dp_mass > 0.0 && dp_mass.is_finite()) {
                return Err(Error::InvalidConfig("DP mass must be positive".into()));
            }
        }
        HyperG::new(self.hyper_g_a)?;
        Ok(())
    }

    /// Limit of beta' X' Sigma_A^-1 X beta / n for Uniform(-1, 1) covariates
    /// (variance 1/3): half of beta'beta/3 under the identity allocation, and
    /// the centred Gram beta'beta/3 under a single cluster.
    pub fn signal_limit(&self) -> Option<f64> {
        let bb: f64 = self.beta_true.iter().map(|b| b * b).sum();
        match self.mode {
            TrajectoryMode::Conditional { allocation: FixedAllocation::Identity } => Some(bb / 6.0),
            TrajectoryMode::Conditional { allocation: FixedAllocation::Single } => Some(bb / 3.0),
            TrajectoryMode::Exact { .. } => None,
        }
    }

    /// b / (1/phi + b).
    pub fn r2_limit(&self) -> Option<f64> {
        self.signal_limit().map(|b| b / (1.0 / self.phi + b))
    }

    fn generate<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Dataset> {
        let p = self.beta_true.len();
        let mut x = DMatrix::zeros(n, p);
        for i in 0..n {
            for j in 0..p {
                x[(i, j)] = rng.random_range(-1.0..1.0);
            }
        }
        let sd = 1.0 / self.phi.sqrt();
        let shared = match self.mode {
            TrajectoryMode::Conditional { allocation: FixedAllocation::Single } => sd * std_normal(rng),
            _ => 0.0,
        };
        let y = (0..n)
            .map(|i| {
                let fit: f64 = (0..p).map(|j| x[(i, j)] * self.beta_true[j]).sum();
                let eta = match self.mode {
                    TrajectoryMode::Conditional { allocation: FixedAllocation::Identity } => sd * std_normal(rng),
                    TrajectoryMode::Conditional { allocation: FixedAllocation::Single } => shared,
                    TrajectoryMode::Exact { .. } => 0.0,
                };
                fit + eta + sd * std_normal(rng)
            })
            .collect();
        Dataset::from_parts(y, x)
    }
}

const PURPOSE_TRAJECTORY: u64 = 7;

/// Per-replicate rows and per-n summaries of log BF(model 2 : model 1).
pub fn bf_trajectory(
    spec: &TrajectorySpec,
    n_grid: &[usize],
    replicates: usize,
    seed: u64,
) -> Result<(Vec<TrajectoryRow>, Vec<TrajectorySummary>)> {
    spec.validate()?;
    if replicates == 0 || n_grid.is_empty() {
        return Err(Error::InvalidConfig("need at least one replicate and one sample size".into()));
    }
    let p = spec.beta_true.len();
    let integ = GIntegrator::new(HyperG::new(spec.hyper_g_a)?);
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (ni, &n) in n_grid.iter().enumerate() {
        let g1 = InclusionVector::from_indices(p, &spec.model1, n)?;
        let g2 = InclusionVector::from_indices(p, &spec.model2, n)?;
        let mut bfs = Vec::with_capacity(replicates);
        let (mut r1s, mut r2s) = (0.0, 0.0);
        for r in 0..replicates {
            let mut rng = stream(seed, stream_id(((ni as u64) << 24) | r as u64, PURPOSE_TRAJECTORY));
            let data = spec.generate(n, &mut rng)?;
            let (log_bf, r1, r2) = match spec.mode {
                TrajectoryMode::Exact { dp_mass } => {
                    let ev = ExactEvaluator::new(&data, &integ, dp_mass)?.evaluate(&[g1.clone(), g2.clone()])?;
                    (ev[1].log_marginal - ev[0].log_marginal, ev[0].mean_r2, ev[1].mean_r2)
                }
                TrajectoryMode::Conditional { allocation } => {
                    let a = allocation.build(n);
                    let l1 = conditional_log_marginal_with(&integ, &a, &g1, &data)?;
                    let l2 = conditional_log_marginal_with(&integ, &a, &g2, &data)?;
                    (l2 - l1, r2_tilde(&a, &g1, &data)?, r2_tilde(&a, &g2, &data)?)
                }
            };
            bfs.push(log_bf);
            r1s += r1;
            r2s += r2;
            rows.push(TrajectoryRow { n, replicate: r, log_bf, r2_model1: r1, r2_model2: r2 });
        }
        bfs.sort_by(f64::total_cmp);
        summaries.push(TrajectorySummary {
            n,
            median: quantile_sorted(&bfs, 0.5),
            q25: quantile_sorted(&bfs, 0.25),
            q75: quantile_sorted(&bfs, 0.75),
            mean_r2_model1: r1s / replicates as f64,
            mean_r2_model2: r2s / replicates as f64,
            r2_limit: spec.r2_limit(),
        });
    }
    Ok((rows, summaries))
}
