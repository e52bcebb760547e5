//! Updates for the regression part of the chain: residual precision, g,
//! inclusion indicators and coefficients.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inv_quad, spd_cholesky, SigmaOps};
use crate::rng::{categorical_log, gamma, open01, std_normal};
use crate::types::{ChainState, Dataset, InclusionVector};

/// Hyper-g prior: t = g/(1+g) ~ Beta(1, a/2 - 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperG {
    pub a: f64,
}

impl HyperG {
    pub fn new(a: f64) -> Result<Self> {
        if !(a > 2.0 && a.is_finite()) {
            return Err(Error::InvalidConfig(format!("hyper-g parameter a = {a} must exceed 2")));
        }
        Ok(Self { a })
    }

    fn b(&self) -> f64 {
        0.5 * self.a - 1.0
    }

    /// t at prior probability level q.
    pub fn t_quantile(&self, q: f64) -> f64 {
        -(self.b().recip() * (-q).ln_1p()).exp_m1()
    }

    /// log(1 - t) at prior probability level q.
    pub fn log1m_t_quantile(&self, q: f64) -> f64 {
        (-q).ln_1p() / self.b()
    }

    /// g at prior probability level q.
    pub fn g_quantile(&self, q: f64) -> f64 {
        (-self.log1m_t_quantile(q)).exp_m1()
    }

    /// log prior density of g.
    pub fn log_density(&self, g: f64) -> f64 {
        self.b().ln() - 0.5 * self.a * g.ln_1p()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.g_quantile(open01(rng))
    }
}

/// Grid of g values at equally spaced prior quantiles (i + 1/2)/G, so every
/// node carries the same prior mass.
#[derive(Debug, Clone)]
pub struct GGrid {
    pub nodes: Vec<f64>,
    log_nodes: Vec<f64>,
}

impl GGrid {
    pub fn new(prior: HyperG, size: usize) -> Self {
        let nodes: Vec<f64> = (0..size)
            .map(|i| prior.g_quantile((i as f64 + 0.5) / size as f64))
            .collect();
        let log_nodes = nodes.iter().map(|g| g.ln()).collect();
        Self { nodes, log_nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Log weights -(p/2) log g - phi * q / (2 g) on the grid.
    pub fn log_weights(&self, p_gamma: usize, phi: f64, quad: f64) -> Vec<f64> {
        let half_p = 0.5 * p_gamma as f64;
        self.nodes
            .iter()
            .zip(&self.log_nodes)
            .map(|(g, lg)| -half_p * lg - 0.5 * phi * quad / g)
            .collect()
    }
}

/// Included-column design and X_g' Sigma^-1 X_g for the current state.
fn included_gram(state: &ChainState, data: &Dataset, ops: &SigmaOps) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let xg = data.x_cols(&state.inclusion.indices());
    let m = ops.inv_quadform(&xg)?;
    Ok((xg, m))
}

fn beta_vec(state: &ChainState) -> DVector<f64> {
    DVector::from_column_slice(&state.beta)
}

/// phi ~ Gamma((n + p_g)/2 + a0, [(y - X b)' Sigma^-1 (y - X b) + b' M b / g]/2 + b0),
/// with (a0, b0) = (0, 0) under the 1/phi prior.
pub fn update_precision<R: Rng + ?Sized>(
    state: &mut ChainState,
    data: &Dataset,
    ops: &SigmaOps,
    prior: Option<(f64, f64)>,
    rng: &mut R,
) -> Result<()> {
    let (shape, rate) = precision_conditional(state, data, ops, prior)?;
    let phi = gamma(rng, shape, rate);
    if !(phi > 0.0 && phi.is_finite()) {
        return Err(Error::Invariant(format!("precision draw {phi}")));
    }
    state.phi = phi;
    Ok(())
}

/// Shape and rate of the precision full conditional.
pub fn precision_conditional(
    state: &ChainState,
    data: &Dataset,
    ops: &SigmaOps,
    prior: Option<(f64, f64)>,
) -> Result<(f64, f64)> {
    let (xg, m) = included_gram(state, data, ops)?;
    let b = beta_vec(state);
    let fit = &xg * &b;
    let resid: Vec<f64> = data.y().iter().zip(fit.iter()).map(|(y, f)| y - f).collect();
    let q1 = ops.inv_inner(&resid, &resid)?;
    let q2 = if b.is_empty() { 0.0 } else { b.dot(&(&m * &b)) / state.g };
    let (a0, b0) = prior.unwrap_or((0.0, 0.0));
    let shape = 0.5 * (data.n() + state.inclusion.p_gamma()) as f64 + a0;
    let rate = 0.5 * (q1 + q2) + b0;
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Invariant(format!("precision rate {rate}")));
    }
    Ok((shape, rate))
}

/// Griddy-Gibbs draw of g. Returns true when every weight underflowed and the
/// arg-max node was taken instead.
pub fn update_g<R: Rng + ?Sized>(
    state: &mut ChainState,
    data: &Dataset,
    ops: &SigmaOps,
    grid: &GGrid,
    rng: &mut R,
) -> Result<bool> {
    let quad = if state.beta.is_empty() {
        0.0
    } else {
        let (_, m) = included_gram(state, data, ops)?;
        let b = beta_vec(state);
        b.dot(&(&m * &b))
    };
    let logw = grid.log_weights(state.inclusion.p_gamma(), state.phi, quad);
    match categorical_log(rng, &logw) {
        Some(i) => {
            state.g = grid.nodes[i];
            Ok(false)
        }
        None => {
            let i = logw
                .iter()
                .enumerate()
                .filter(|(_, v)| !v.is_nan())
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(grid.len() / 2);
            state.g = grid.nodes[i];
            Ok(true)
        }
    }
}

/// Relative pivot below which an included block counts as collinear.
pub const COLLINEARITY_TOL: f64 = 1e-9;

/// X' Sigma^-1 X and X' Sigma^-1 y over all p predictors.
pub struct FullGram {
    pub p: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl FullGram {
    pub fn new(data: &Dataset, ops: &SigmaOps) -> Result<Self> {
        Ok(Self {
            p: ops.inv_quadform(data.x())?,
            b: ops.inv_cross(data.x(), data.y())?,
        })
    }

    /// b_S' P_SS^-1 b_S, or `None` when P_SS is numerically singular.
    pub fn explained(&self, idx: &[usize]) -> Option<f64> {
        if idx.is_empty() {
            return Some(0.0);
        }
        let pss = self.p.select_rows(idx).select_columns(idx);
        let bs = self.b.select_rows(idx);
        let chol = spd_cholesky(&pss, "inclusion update").ok()?;
        // squared pivot = residual variance of a column given the earlier ones
        let l = chol.l_dirty();
        if (0..idx.len()).any(|i| l[(i, i)].powi(2) < COLLINEARITY_TOL * pss[(i, i)]) {
            return None;
        }
        Some(inv_quad(&chol, &bs))
    }
}

/// Log of the inclusion conditional, coefficients integrated out, up to terms
/// that do not depend on the model.
pub fn inclusion_log_score(
    gram: &FullGram,
    idx: &[usize],
    prior_incl: f64,
    p_total: usize,
    g: f64,
    phi: f64,
) -> Option<f64> {
    let q = idx.len() as f64;
    let explained = gram.explained(idx)?;
    let log_prior = q * prior_incl.ln() + (p_total as f64 - q) * (-prior_incl).ln_1p();
    Some(log_prior - 0.5 * q * g.ln_1p() + 0.5 * phi * g / (1.0 + g) * explained)
}

/// Single-site Gibbs over the inclusion indicators with the coefficients
/// integrated out. Models with p_g >= n, or whose included Gram block is not
/// positive definite, get zero weight. Leaves `beta` zeroed at the new length;
/// the caller draws it next. Returns the number of zero-weighted proposals.
pub fn update_inclusion<R: Rng + ?Sized>(
    state: &mut ChainState,
    data: &Dataset,
    ops: &SigmaOps,
    prior_incl: f64,
    rng: &mut R,
) -> Result<usize> {
    let gram = FullGram::new(data, ops)?;
    let p = data.p();
    let n = data.n();
    let mut excluded = 0;
    let mut gamma = state.inclusion.as_slice().to_vec();
    for j in 0..p {
        let mut scores = [f64::NEG_INFINITY; 2];
        for v in [false, true] {
            gamma[j] = v;
            let idx: Vec<usize> = (0..p).filter(|&k| gamma[k]).collect();
            if idx.len() >= n {
                continue;
            }
            match inclusion_log_score(&gram, &idx, prior_incl, p, state.g, state.phi) {
                Some(s) => scores[v as usize] = s,
                None => excluded += 1,
            }
        }
        gamma[j] = match categorical_log(rng, &scores) {
            Some(k) => k == 1,
            None => false,
        };
    }
    state.inclusion = InclusionVector::new(gamma, n)?;
    state.beta = vec![0.0; state.inclusion.p_gamma()];
    Ok(excluded)
}

/// beta ~ N(m, V) given the Cholesky factor of V^-1 = scale * M.
fn draw_gaussian<R: Rng + ?Sized>(
    prec: &DMatrix<f64>,
    rhs: &DVector<f64>,
    context: &str,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let chol = spd_cholesky(prec, context)?;
    let mean = chol.solve(rhs);
    let z = DVector::from_iterator(rhs.len(), (0..rhs.len()).map(|_| std_normal(rng)));
    let dev = chol
        .l_dirty()
        .tr_solve_lower_triangular(&z)
        .ok_or_else(|| Error::Invariant(format!("triangular solve failed ({context})")))?;
    Ok((mean + dev).iter().copied().collect())
}

/// Coefficients drawn with the cluster intercepts integrated out:
/// beta ~ N(g/(1+g) M^-1 X' Sigma^-1 y, g/(phi (1+g)) M^-1).
pub fn update_beta_collapsed<R: Rng + ?Sized>(
    state: &mut ChainState,
    data: &Dataset,
    ops: &SigmaOps,
    rng: &mut R,
) -> Result<()> {
    if state.inclusion.p_gamma() == 0 {
        state.beta.clear();
        return Ok(());
    }
    let (xg, m) = included_gram(state, data, ops)?;
    let scale = state.phi * (1.0 + state.g) / state.g;
    let prec = &m * scale;
    let rhs = ops.inv_cross(&xg, data.y())? * state.phi;
    state.beta = draw_gaussian(&prec, &rhs, "collapsed coefficient draw", rng)?;
    Ok(())
}

/// Mean and precision of beta given the cluster intercepts:
/// V^-1 = (phi/g) M + phi X'X, E = V phi X'(y - alpha).
pub fn beta_conditional(
    state: &ChainState,
    data: &Dataset,
    ops: &SigmaOps,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (xg, m) = included_gram(state, data, ops)?;
    let prec = m * (state.phi / state.g) + xg.tr_mul(&xg) * state.phi;
    let alpha = state.subject_intercepts();
    let r = DVector::from_iterator(data.n(), data.y().iter().zip(&alpha).map(|(y, a)| y - a));
    let rhs = xg.tr_mul(&r) * state.phi;
    Ok((prec, rhs))
}

/// Coefficients given the cluster intercepts.
pub fn update_beta<R: Rng + ?Sized>(
    state: &mut ChainState,
    data: &Dataset,
    ops: &SigmaOps,
    rng: &mut R,
) -> Result<()> {
    if state.inclusion.p_gamma() == 0 {
        state.beta.clear();
        return Ok(());
    }
    let (prec, rhs) = beta_conditional(state, data, ops)?;
    state.beta = draw_gaussian(&prec, &rhs, "coefficient draw", rng)?;
    Ok(())
}
