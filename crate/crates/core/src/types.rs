//! Domain types shared by the sampler, the evidence engine and the harness.
//!
//! Notation: the residual scale is carried as a *precision* `phi`; residuals
//! are `N(0, 1/phi)` and cluster intercepts share the same precision.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Response vector plus predictor matrix (no intercept column).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    x: DMatrix<f64>,
    names: Vec<String>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, x: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(Error::InvalidDataset(format!("need n >= 2, got {n}")));
        }
        if x.nrows() != n {
            return Err(Error::Shape {
                expected: n,
                got: x.nrows(),
            });
        }
        let p = x.ncols();
        if p == 0 {
            return Err(Error::InvalidDataset("need at least one predictor".into()));
        }
        if names.len() != p {
            return Err(Error::Shape {
                expected: p,
                got: names.len(),
            });
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite entry".into()));
        }
        for (j, col) in x.column_iter().enumerate() {
            if col.iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidDataset(format!(
                    "predictor {:?} is identically zero",
                    names[j]
                )));
            }
        }
        Ok(Self { y, x, names })
    }

    /// Build with default names `x1..xp`.
    pub fn from_parts(y: Vec<f64>, x: DMatrix<f64>) -> Result<Self> {
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Self::new(y, x, names)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Columns selected by `idx`, in order.
    pub fn x_cols(&self, idx: &[usize]) -> DMatrix<f64> {
        self.x.select_columns(idx)
    }

    /// Center and scale every predictor to mean 0 and unit (population)
    /// standard deviation. The response is left untouched.
    pub fn standardized(&self) -> Result<Self> {
        let n = self.n() as f64;
        let mut x = self.x.clone();
        for mut col in x.column_iter_mut() {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if var <= 0.0 {
                return Err(Error::InvalidDataset(
                    "cannot standardize a constant predictor".into(),
                ));
            }
            let sd = var.sqrt();
            col.iter_mut().for_each(|v| *v = (*v - mean) / sd);
        }
        Self::new(self.y.clone(), x, self.names.clone())
    }
}

/// Header plus string cells; `None` marks a missing cell.
#[derive(Debug, Clone, Default)]
pub struct RawTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Option<String>>>,
}

/// A cleaned dataset and the number of incomplete rows that were dropped.
#[derive(Debug, Clone)]
pub struct Validated {
    pub dataset: Dataset,
    pub dropped: usize,
}

fn is_missing(cell: &Option<String>) -> bool {
    match cell {
        None => true,
        Some(s) => {
            let t = s.trim();
            t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
        }
    }
}

/// Drop incomplete rows, parse the rest and split off the response column.
/// Predictors are every other column, in header order.
pub fn validate_dataset(raw: &RawTable, response: &str) -> Result<Validated> {
    let resp_idx = raw
        .header
        .iter()
        .position(|h| h == response)
        .ok_or_else(|| Error::MissingColumn(response.to_string()))?;
    let pred_idx: Vec<usize> = (0..raw.header.len()).filter(|&j| j != resp_idx).collect();
    let width = raw.header.len();

    let mut dropped = 0;
    let mut y = Vec::new();
    let mut cells = Vec::new();
    for (r, row) in raw.rows.iter().enumerate() {
        if row.len() < width || row.iter().take(width).any(is_missing) {
            dropped += 1;
            continue;
        }
        let parse = |j: usize| -> Result<f64> {
            let s = row[j].as_deref().unwrap_or_default().trim();
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    row: r + 1,
                    column: raw.header[j].clone(),
                    value: s.to_string(),
                })
        };
        y.push(parse(resp_idx)?);
        for &j in &pred_idx {
            cells.push(parse(j)?);
        }
    }
    if y.is_empty() {
        return Err(Error::EmptyDataset { dropped });
    }
    let n = y.len();
    let x = DMatrix::from_row_slice(n, pred_idx.len(), &cells);
    let names = pred_idx.iter().map(|&j| raw.header[j].clone()).collect();
    Ok(Validated {
        dataset: Dataset::new(y, x, names)?,
        dropped,
    })
}

/// Which predictors enter the model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InclusionVector {
    gamma: Vec<bool>,
    p_gamma: usize,
}

impl InclusionVector {
    /// Models with `n` or more predictors carry zero prior mass and are rejected.
    pub fn new(gamma: Vec<bool>, n: usize) -> Result<Self> {
        let p_gamma = gamma.iter().filter(|&&g| g).count();
        if p_gamma >= n {
            return Err(Error::InvalidModel(format!(
                "{p_gamma} included predictors with n = {n}"
            )));
        }
        Ok(Self { gamma, p_gamma })
    }

    pub fn empty(p: usize) -> Self {
        Self {
            gamma: vec![false; p],
            p_gamma: 0,
        }
    }

    pub fn from_indices(p: usize, idx: &[usize], n: usize) -> Result<Self> {
        let mut gamma = vec![false; p];
        for &j in idx {
            if j >= p {
                return Err(Error::InvalidModel(format!("predictor index {j} >= p = {p}")));
            }
            gamma[j] = true;
        }
        Self::new(gamma, n)
    }

    pub fn p(&self) -> usize {
        self.gamma.len()
    }

    pub fn p_gamma(&self) -> usize {
        self.p_gamma
    }

    pub fn get(&self, j: usize) -> bool {
        self.gamma[j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.gamma
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.gamma.len()).filter(|&j| self.gamma[j]).collect()
    }

    /// Compact key, e.g. `"1,0,1"`.
    pub fn key(&self) -> String {
        self.gamma
            .iter()
            .map(|&b| if b { "1" } else { "0" })
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Cluster membership of the n subjects; stands in for the n x k matrix A.
/// Labels are zero-based and contiguous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    labels: Vec<usize>,
    sizes: Vec<usize>,
}

impl Allocation {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidAllocation("no subjects".into()));
        }
        let k = labels.iter().max().map_or(0, |&m| m + 1);
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            sizes[l] += 1;
        }
        if let Some(j) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidAllocation(format!("cluster {j} is empty")));
        }
        Ok(Self { labels, sizes })
    }

    /// Relabel arbitrary (possibly gappy) cluster ids to 0..k, preserving the
    /// order of the ids.
    pub fn from_ids(ids: &[usize]) -> Result<Self> {
        let max = ids.iter().copied().max().unwrap_or(0);
        let mut map = vec![usize::MAX; max + 1];
        for &s in ids {
            map[s] = 0;
        }
        let mut next = 0;
        for m in map.iter_mut() {
            if *m == 0 {
                *m = next;
                next += 1;
            }
        }
        Self::new(ids.iter().map(|&s| map[s]).collect())
    }

    /// Every subject in its own cluster (A = I).
    pub fn identity(n: usize) -> Self {
        Self {
            labels: (0..n).collect(),
            sizes: vec![1; n],
        }
    }

    /// All subjects in one cluster (A = 1_n).
    pub fn single(n: usize) -> Self {
        Self {
            labels: vec![0; n],
            sizes: vec![n],
        }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn check(&self) -> Result<()> {
        let rebuilt = Self::new(self.labels.clone())?;
        if rebuilt.sizes != self.sizes {
            return Err(Error::Invariant("allocation sizes disagree with labels".into()));
        }
        Ok(())
    }
}

/// Instantiated part of the stick-breaking representation.
///
/// Weights and slices are held on the log scale: with a small DP mass the
/// sticks can leave remaining mass far below `f64::EPSILON`.
#[derive(Debug, Clone, PartialEq)]
pub struct StickState {
    /// Stick fractions nu_j.
    pub nu: Vec<f64>,
    /// log(1 - nu_j), kept separately for accuracy near nu = 1.
    pub log1m_nu: Vec<f64>,
    /// log w_j.
    pub log_weights: Vec<f64>,
    /// Cluster intercepts alpha_j.
    pub atoms: Vec<f64>,
    /// log u_i, one per subject.
    pub log_slices: Vec<f64>,
    /// Stick index S_i of each subject.
    pub assignments: Vec<usize>,
}

impl StickState {
    pub fn active_count(&self) -> usize {
        self.nu.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    pub fn slices(&self) -> Vec<f64> {
        self.log_slices.iter().map(|l| l.exp()).collect()
    }

    /// log of the stick mass not yet instantiated, log prod (1 - nu_j).
    pub fn log_remaining(&self) -> f64 {
        self.log1m_nu.iter().sum()
    }

    /// Recompute log weights from the stick fractions.
    pub fn refresh_weights(&mut self) {
        let mut acc = 0.0;
        self.log_weights.clear();
        for (nu, l1m) in self.nu.iter().zip(&self.log1m_nu) {
            self.log_weights.push(nu.ln() + acc);
            acc += l1m;
        }
    }

    /// Occupancy count per instantiated stick.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.nu.len()];
        for &s in &self.assignments {
            c[s] += 1;
        }
        c
    }

    /// Checks weights, coverage and slice bounds. `check_slices` is false
    /// between the allocation step and the next slice refresh.
    pub fn check(&self, check_slices: bool) -> Result<()> {
        let m = self.nu.len();
        if self.log1m_nu.len() != m || self.log_weights.len() != m || self.atoms.len() != m {
            return Err(Error::Invariant("stick vectors have unequal lengths".into()));
        }
        if self.log_weights.iter().any(|l| !l.is_finite()) {
            return Err(Error::Invariant("zero or non-finite stick weight".into()));
        }
        if !(self.log_remaining() < 0.0) {
            return Err(Error::Invariant("instantiated weights sum to one or more".into()));
        }
        if self.assignments.iter().any(|&s| s >= m) {
            return Err(Error::Invariant("subject assigned beyond instantiated sticks".into()));
        }
        if check_slices {
            let min_u = self
                .log_slices
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            if !(self.log_remaining() < min_u) {
                return Err(Error::Invariant("slice coverage condition violated".into()));
            }
            for (i, &lu) in self.log_slices.iter().enumerate() {
                if !(lu < self.log_weights[self.assignments[i]]) {
                    return Err(Error::Invariant(format!("slice of subject {i} not below its weight")));
                }
            }
        }
        Ok(())
    }
}

/// Full Gibbs state of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub inclusion: InclusionVector,
    /// Coefficients of the included predictors, in index order.
    pub beta: Vec<f64>,
    /// Residual precision.
    pub phi: f64,
    pub g: f64,
    pub dp_mass: f64,
    pub sticks: StickState,
    /// Nonempty clusters, derived from `sticks.assignments`.
    pub alloc: Allocation,
}

impl ChainState {
    /// Rebuild `alloc` from the stick assignments.
    pub fn sync_alloc(&mut self) {
        self.alloc = Allocation::from_ids(&self.sticks.assignments)
            .expect("assignments always describe a valid allocation");
    }

    /// Coefficients expanded to length p, zero for excluded predictors.
    pub fn full_beta(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.inclusion.p()];
        for (b, j) in self.beta.iter().zip(self.inclusion.indices()) {
            out[j] = *b;
        }
        out
    }

    /// Subject-level intercepts alpha_{S_i}.
    pub fn subject_intercepts(&self) -> Vec<f64> {
        self.sticks
            .assignments
            .iter()
            .map(|&s| self.sticks.atoms[s])
            .collect()
    }

    /// Stick-weighted mean atom over the instantiated sticks.
    pub fn mean_intercept(&self) -> f64 {
        let w = self.sticks.weights();
        let tot: f64 = w.iter().sum();
        w.iter()
            .zip(&self.sticks.atoms)
            .map(|(w, a)| w * a)
            .sum::<f64>()
            / tot
    }

    pub fn check(&self, check_slices: bool) -> Result<()> {
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return Err(Error::Invariant(format!("phi = {}", self.phi)));
        }
        if !(self.g > 0.0 && self.g.is_finite()) {
            return Err(Error::Invariant(format!("g = {}", self.g)));
        }
        if !(self.dp_mass > 0.0 && self.dp_mass.is_finite()) {
            return Err(Error::Invariant(format!("dp mass = {}", self.dp_mass)));
        }
        if self.beta.len() != self.inclusion.p_gamma() {
            return Err(Error::Invariant("beta length differs from p_gamma".into()));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Invariant("non-finite coefficient".into()));
        }
        self.alloc.check()?;
        self.sticks.check(check_slices)
    }
}

/// How the residual distribution is modelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualModel {
    /// Dirichlet-process location mixture (semiparametric model).
    Dp,
    /// Allocation pinned to a single cluster: the normal linear model.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Hyper-g parameter a; g/(1+g) ~ Beta(1, a/2 - 1).
    pub hyper_g_a: f64,
    pub m_prior_shape: f64,
    pub m_prior_rate: f64,
    pub g_grid_size: usize,
    pub prior_inclusion: f64,
    pub rng_seed: u64,
    pub residual_model: ResidualModel,
    /// Hold the DP mass fixed instead of sampling it.
    pub fixed_dp_mass: Option<f64>,
    /// Label-swap moves between neighbouring sticks after the allocation step.
    pub label_swap: bool,
    /// Gamma(shape, rate) prior on phi; `None` is the improper 1/phi prior.
    pub precision_prior: Option<(f64, f64)>,
    /// Instantiated sticks may not exceed this multiple of n.
    pub stick_cap_factor: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            iterations: 50_000,
            burn_in: 5_000,
            thin: 1,
            hyper_g_a: 4.0,
            m_prior_shape: 0.1,
            m_prior_rate: 1.0,
            g_grid_size: 1000,
            prior_inclusion: 0.5,
            rng_seed: 0,
            residual_model: ResidualModel::Dp,
            fixed_dp_mass: None,
            label_swap: true,
            precision_prior: None,
            stick_cap_factor: 10,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.iterations <= self.burn_in {
            return bad("iterations must exceed burn_in");
        }
        if self.thin == 0 {
            return bad("thin must be positive");
        }
        if !(self.hyper_g_a > 2.0) {
            return bad("hyper_g_a must exceed 2");
        }
        if self.stick_cap_factor == 0 {
            return bad("stick cap factor must be positive");
        }
        if self.g_grid_size < 10 {
            return bad("g grid needs at least 10 nodes");
        }
        if !(self.m_prior_shape > 0.0 && self.m_prior_rate > 0.0) {
            return bad("DP mass prior parameters must be positive");
        }
        if !(self.prior_inclusion > 0.0 && self.prior_inclusion < 1.0) {
            return bad("prior inclusion probability must lie in (0, 1)");
        }
        if let Some(m) = self.fixed_dp_mass {
            if !(m > 0.0 && m.is_finite()) {
                return bad("fixed DP mass must be positive");
            }
        }
        if let Some((a, b)) = self.precision_prior {
            if !(a > 0.0 && b > 0.0) {
                return bad("precision prior parameters must be positive");
            }
        }
        Ok(())
    }

    /// Number of draws kept after burn-in and thinning.
    pub fn retained(&self) -> usize {
        (self.iterations - self.burn_in).div_ceil(self.thin)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(rows: &[&[&str]]) -> RawTable {
        RawTable {
            header: vec!["y".into(), "a".into(), "b".into()],
            rows: rows
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|c| if c.is_empty() { None } else { Some(c.to_string()) })
                        .collect()
                })
                .collect(),
        }
    }

    #[test]
    fn trims_incomplete_rows() {
        let t = raw(&[&["1", "2", "3"], &["4", "", "6"], &["7", "8", "9.5"]]);
        let v = validate_dataset(&t, "y").unwrap();
        assert_eq!(v.dropped, 1);
        assert_eq!(v.dataset.n(), 2);
        assert_eq!(v.dataset.y(), &[1.0, 7.0]);
        assert_eq!(v.dataset.x()[(1, 1)], 9.5);
        assert_eq!(v.dataset.names(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn complete_rows_pass_through() {
        let t = raw(&[&["1", "2", "3"], &["4", "5", "6"]]);
        let v = validate_dataset(&t, "y").unwrap();
        assert_eq!(v.dropped, 0);
        assert_eq!(v.dataset.n(), 2);
        assert_eq!(v.dataset.p(), 2);
    }

    #[test]
    fn na_tokens_count_as_missing() {
        let t = raw(&[&["1", "NA", "3"], &["4", "5", "6"], &["1", "2", "NaN"], &["2", "1", "1"]]);
        let v = validate_dataset(&t, "y").unwrap();
        assert_eq!(v.dropped, 2);
    }

    #[test]
    fn all_dropped_is_an_error() {
        let t = raw(&[&["1", "", "3"]]);
        assert!(matches!(
            validate_dataset(&t, "y"),
            Err(Error::EmptyDataset { dropped: 1 })
        ));
    }

    #[test]
    fn parse_error_names_row_and_column() {
        let t = raw(&[&["1", "2", "3"], &["4", "abc", "6"]]);
        match validate_dataset(&t, "y") {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "a");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_response_column() {
        let t = raw(&[&["1", "2", "3"]]);
        assert!(matches!(validate_dataset(&t, "z"), Err(Error::MissingColumn(c)) if c == "z"));
    }

    #[test]
    fn dataset_rejects_zero_column_and_nan() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 2.0, 0.0]);
        assert!(Dataset::from_parts(vec![1.0, 2.0], x).is_err());
        let x = DMatrix::from_row_slice(2, 1, &[1.0, f64::NAN]);
        assert!(Dataset::from_parts(vec![1.0, 2.0], x).is_err());
        let x = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert!(Dataset::from_parts(vec![1.0], x).is_err());
    }

    #[test]
    fn inclusion_rejects_saturated_models() {
        assert!(InclusionVector::new(vec![true, true, true], 3).is_err());
        let g = InclusionVector::new(vec![true, false, true], 4).unwrap();
        assert_eq!(g.p_gamma(), 2);
        assert_eq!(g.indices(), vec![0, 2]);
        assert_eq!(g.key(), "1,0,1");
    }

    #[test]
    fn allocation_relabels_gaps() {
        let a = Allocation::from_ids(&[4, 1, 4, 7]).unwrap();
        assert_eq!(a.labels(), &[1, 0, 1, 2]);
        assert_eq!(a.sizes(), &[1, 2, 1]);
        assert!(Allocation::new(vec![0, 2]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = SamplerConfig::default();
        assert!(c.validate().is_ok());
        c.hyper_g_a = 2.0;
        assert!(c.validate().is_err());
        c = SamplerConfig { burn_in: 50_000, ..Default::default() };
        assert!(c.validate().is_err());
        c = SamplerConfig { g_grid_size: 5, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn standardize_columns() {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let d = Dataset::from_parts(vec![0.0, 1.0, 2.0], x).unwrap().standardized().unwrap();
        let c = d.x().column(0);
        assert!(c.sum().abs() < 1e-12);
        assert!((c.iter().map(|v| v * v).sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
    }
}
