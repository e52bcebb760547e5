//! Marginal likelihoods and Bayes factors.
//!
//! Conditional on an allocation A, with Z = Sigma_A^{-1/2} y and the
//! transformed coefficient of determination R2 of Z on Sigma_A^{-1/2} X_g,
//!
//!   log L(y | g-model, A) = -(n/2) log Z'Z
//!       + log int (1+g)^{-p/2} [1 - g/(1+g) R2]^{-n/2} pi(dg)
//!
//! up to a constant shared by every model and allocation. The integral is a
//! midpoint rule on the prior-probability scale of t = g/(1+g). Marginalizing
//! over A adds the partition weight and -1/2 log det Sigma_A per partition.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{inv_quad, spd_cholesky, SigmaOps};
use crate::partitions::{check_size, for_each_rgs, rgs_list};
use crate::rng::log_sum_exp;
use crate::ssvs::{HyperG, COLLINEARITY_TOL};
use crate::types::{Allocation, Dataset, InclusionVector};

/// Midpoint nodes of the g integral.
pub const QUAD_NODES: usize = 10_000;

/// R2 at or above this is treated as a saturated fit.
const SATURATION: f64 = 1.0 - 1e-14;

/// Interpolation table over x = -log(1 - R2) on [0, TABLE_XMAX].
const TABLE_XMAX: f64 = 27.6;
const TABLE_INTERVALS: usize = 4096;

/// Evaluates the g integral by quadrature and caches interpolation tables
/// for repeated use at fixed (n, p).
#[derive(Debug)]
pub struct GIntegrator {
    prior: HyperG,
    t: Vec<f64>,
    log1m_t: Vec<f64>,
    tables: Mutex<HashMap<(usize, usize), Arc<Vec<f64>>>>,
}

impl GIntegrator {
    pub fn new(prior: HyperG) -> Self {
        let nodes = QUAD_NODES;
        let q = |i: usize| (i as f64 + 0.5) / nodes as f64;
        Self {
            prior,
            t: (0..nodes).map(|i| prior.t_quantile(q(i))).collect(),
            log1m_t: (0..nodes).map(|i| prior.log1m_t_quantile(q(i))).collect(),
            tables: Mutex::new(HashMap::new()),
        }
    }

    pub fn prior(&self) -> HyperG {
        self.prior
    }

    /// log of E_g[(1+g)^{-p/2} (1 - t R2)^{-n/2}] under the prior, by direct
    /// quadrature.
    pub fn log_integral(&self, n: usize, p: usize, r2: f64) -> Result<f64> {
        if p == 0 {
            return Ok(0.0);
        }
        if !(r2 < SATURATION) {
            return Err(Error::Saturated);
        }
        let r2 = r2.max(0.0);
        let one_m_r2 = 1.0 - r2;
        Ok(self.integral_at(n, p, |t, l1m| (l1m.exp() + t * one_m_r2).ln()))
    }

    fn integral_at(&self, n: usize, p: usize, log_gap: impl Fn(f64, f64) -> f64) -> f64 {
        let hp = 0.5 * p as f64;
        let hn = 0.5 * n as f64;
        let mut top = f64::NEG_INFINITY;
        let terms: Vec<f64> = self
            .t
            .iter()
            .zip(&self.log1m_t)
            .map(|(&t, &l1m)| {
                let v = hp * l1m - hn * log_gap(t, l1m);
                top = top.max(v);
                v
            })
            .collect();
        top + terms.iter().map(|v| (v - top).exp()).sum::<f64>().ln() - (self.t.len() as f64).ln()
    }

    /// Same integral at x = -log(1 - R2); stays accurate when R2 is within
    /// rounding of one.
    fn log_integral_x(&self, n: usize, p: usize, x: f64) -> f64 {
        let one_m_r2 = (-x).exp();
        self.integral_at(n, p, |t, l1m| (l1m.exp() + t * one_m_r2).ln())
    }

    fn table(&self, n: usize, p: usize) -> Arc<Vec<f64>> {
        if p == 0 {
            return Arc::new(Vec::new());
        }
        if let Some(t) = self.tables.lock().expect("table cache").get(&(n, p)) {
            return t.clone();
        }
        let h = TABLE_XMAX / TABLE_INTERVALS as f64;
        // one extra node on each side for the 4-point stencil
        let vals: Vec<f64> = (0..TABLE_INTERVALS + 3)
            .map(|i| self.log_integral_x(n, p, (i as f64 - 1.0) * h))
            .collect();
        let vals = Arc::new(vals);
        self.tables
            .lock()
            .expect("table cache")
            .insert((n, p), vals.clone());
        vals
    }

    /// Table-interpolated version of [`GIntegrator::log_integral`], falling
    /// back to direct quadrature beyond the table range.
    pub fn log_integral_fast(&self, n: usize, p: usize, r2: f64) -> Result<f64> {
        let table = self.table(n, p);
        self.lookup(&table, n, p, r2)
    }

    fn lookup(&self, table: &[f64], n: usize, p: usize, r2: f64) -> Result<f64> {
        if p == 0 {
            return Ok(0.0);
        }
        if !(r2 < SATURATION) {
            return Err(Error::Saturated);
        }
        let x = -(-r2.max(0.0)).ln_1p();
        if x >= TABLE_XMAX {
            return self.log_integral(n, p, r2);
        }
        let h = TABLE_XMAX / TABLE_INTERVALS as f64;
        let u = x / h;
        let i = (u.floor() as usize).min(TABLE_INTERVALS - 1);
        let s = u - i as f64;
        // nodes at s = -1, 0, 1, 2 are table[i..i+4]
        let f = &table[i..i + 4];
        let l0 = -s * (s - 1.0) * (s - 2.0) / 6.0;
        let l1 = (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0;
        let l2 = -(s + 1.0) * s * (s - 2.0) / 2.0;
        let l3 = (s + 1.0) * s * (s - 1.0) / 6.0;
        Ok(l0 * f[0] + l1 * f[1] + l2 * f[2] + l3 * f[3])
    }
}

/// Squared multiple correlation of Z = Sigma^{-1/2} y on Sigma^{-1/2} X_g.
pub fn r2_tilde(alloc: &Allocation, gamma: &InclusionVector, data: &Dataset) -> Result<f64> {
    let ops = SigmaOps::new(alloc);
    r2_with(&ops, gamma, data).map(|(r2, _)| r2)
}

/// (R2, Z'Z).
fn r2_with(ops: &SigmaOps, gamma: &InclusionVector, data: &Dataset) -> Result<(f64, f64)> {
    if gamma.p() != data.p() {
        return Err(Error::Shape { expected: data.p(), got: gamma.p() });
    }
    let zz = ops.inv_inner(data.y(), data.y())?;
    if gamma.p_gamma() == 0 {
        return Ok((0.0, zz));
    }
    let xg = data.x_cols(&gamma.indices());
    let pm = ops.inv_quadform(&xg)?;
    let b = ops.inv_cross(&xg, data.y())?;
    let chol = spd_cholesky(&pm, "transformed design")?;
    let l = chol.l_dirty();
    if (0..pm.nrows()).any(|i| l[(i, i)].powi(2) < COLLINEARITY_TOL * pm[(i, i)]) {
        return Err(Error::Singular {
            context: "transformed design".into(),
            condition: crate::linalg::condition_estimate(&pm),
        });
    }
    let r2 = inv_quad(&chol, &b) / zz;
    Ok((r2.clamp(0.0, 1.0), zz))
}

/// Log marginal likelihood of a model given an allocation, up to a constant
/// shared by all models and allocations.
pub fn conditional_log_marginal(
    alloc: &Allocation,
    gamma: &InclusionVector,
    data: &Dataset,
    prior: HyperG,
) -> Result<f64> {
    conditional_log_marginal_with(&GIntegrator::new(prior), alloc, gamma, data)
}

pub fn conditional_log_marginal_with(
    integ: &GIntegrator,
    alloc: &Allocation,
    gamma: &InclusionVector,
    data: &Dataset,
) -> Result<f64> {
    let ops = SigmaOps::new(alloc);
    let (r2, zz) = r2_with(&ops, gamma, data)?;
    let n = data.n();
    Ok(-0.5 * n as f64 * zz.ln() + integ.log_integral(n, gamma.p_gamma(), r2)?)
}

/// log BF of model 2 against model 1 given the allocation.
pub fn conditional_log_bf(
    alloc: &Allocation,
    data: &Dataset,
    gamma1: &InclusionVector,
    gamma2: &InclusionVector,
    prior: HyperG,
) -> Result<f64> {
    let integ = GIntegrator::new(prior);
    Ok(conditional_log_marginal_with(&integ, alloc, gamma2, data)?
        - conditional_log_marginal_with(&integ, alloc, gamma1, data)?)
}

/// Per-model output of the exhaustive partition sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelEvidence {
    /// log sum over partitions of weight * det^-1/2 * conditional marginal.
    pub log_marginal: f64,
    /// Posterior mean of R2 over partitions.
    pub mean_r2: f64,
}

/// Streaming log-sum-exp with an R2-weighted companion sum.
#[derive(Debug, Clone, Copy)]
struct Acc {
    top: f64,
    sum: f64,
    r2: f64,
}

impl Acc {
    const EMPTY: Acc = Acc {
        top: f64::NEG_INFINITY,
        sum: 0.0,
        r2: 0.0,
    };

    fn add(&mut self, v: f64, r2: f64) {
        if v > self.top {
            let scale = (self.top - v).exp();
            self.sum = self.sum * scale + 1.0;
            self.r2 = self.r2 * scale + r2;
            self.top = v;
        } else {
            let w = (v - self.top).exp();
            self.sum += w;
            self.r2 += w * r2;
        }
    }

    fn merge(&mut self, o: &Acc) {
        if o.top == f64::NEG_INFINITY {
            return;
        }
        if o.top > self.top {
            let scale = (self.top - o.top).exp();
            self.sum = self.sum * scale + o.sum;
            self.r2 = self.r2 * scale + o.r2;
            self.top = o.top;
        } else {
            let w = (o.top - self.top).exp();
            self.sum += w * o.sum;
            self.r2 += w * o.r2;
        }
    }

    fn finish(&self) -> ModelEvidence {
        ModelEvidence {
            log_marginal: self.top + self.sum.ln(),
            mean_r2: self.r2 / self.sum,
        }
    }
}

/// Small dense Cholesky on a row-major q x q buffer; returns b' P^-1 b, or
/// `None` on a (relatively) non-positive pivot.
fn small_quad(p: &mut [f64], b: &mut [f64], q: usize) -> Option<f64> {
    for j in 0..q {
        let mut d = p[j * q + j];
        for k in 0..j {
            d -= p[j * q + k] * p[j * q + k];
        }
        let diag = p[j * q + j];
        if !(d > COLLINEARITY_TOL * diag) {
            return None;
        }
        let d = d.sqrt();
        p[j * q + j] = d;
        for i in j + 1..q {
            let mut s = p[i * q + j];
            for k in 0..j {
                s -= p[i * q + k] * p[j * q + k];
            }
            p[i * q + j] = s / d;
        }
    }
    let mut acc = 0.0;
    for i in 0..q {
        let mut s = b[i];
        for k in 0..i {
            s -= p[i * q + k] * b[k];
        }
        b[i] = s / p[i * q + i];
        acc += b[i] * b[i];
    }
    Some(acc)
}

/// Exhaustive partition sum for several models at once.
pub struct ExactEvaluator<'a> {
    data: &'a Dataset,
    integ: &'a GIntegrator,
    m: f64,
}

impl<'a> ExactEvaluator<'a> {
    pub fn new(data: &'a Dataset, integ: &'a GIntegrator, m: f64) -> Result<Self> {
        check_size(data.n())?;
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::InvalidConfig(format!("DP mass {m} must be positive")));
        }
        Ok(Self { data, integ, m })
    }

    pub fn evaluate(&self, models: &[InclusionVector]) -> Result<Vec<ModelEvidence>> {
        let data = self.data;
        let n = data.n();
        let p = data.p();
        for g in models {
            if g.p() != p {
                return Err(Error::Shape { expected: p, got: g.p() });
            }
        }
        // union of included columns, and each model's positions within it
        let union: Vec<usize> = (0..p).filter(|&j| models.iter().any(|g| g.get(j))).collect();
        let q = union.len();
        let pos: Vec<Vec<usize>> = models
            .iter()
            .map(|g| g.indices().iter().map(|j| union.iter().position(|u| u == j).unwrap()).collect())
            .collect();
        let xu: Vec<f64> = (0..n)
            .flat_map(|i| union.iter().map(move |&j| data.x()[(i, j)]))
            .collect();
        let y = data.y();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let mut xy = vec![0.0; q];
        let mut xx = vec![0.0; q * q];
        for i in 0..n {
            for a in 0..q {
                xy[a] += xu[i * q + a] * y[i];
                for b in 0..q {
                    xx[a * q + b] += xu[i * q + a] * xu[i * q + b];
                }
            }
        }
        let tables: Vec<Arc<Vec<f64>>> = pos
            .iter()
            .map(|ps| self.integ.table(n, ps.len()))
            .collect();
        let ln_m = self.m.ln();
        let base = ln_gamma(self.m) - ln_gamma(self.m + n as f64);
        let lg: Vec<f64> = (0..=n).map(|s| if s == 0 { 0.0 } else { ln_gamma(s as f64) }).collect();
        let ld: Vec<f64> = (0..=n).map(|s| (1.0 + s as f64).ln()).collect();
        let inv: Vec<f64> = (0..=n).map(|s| 1.0 / (1.0 + s as f64)).collect();
        let half_n = 0.5 * n as f64;
        let nmod = models.len();

        let prefix_len = n.min(5);
        let prefixes = rgs_list(prefix_len);
        let partial: Vec<Result<Vec<Acc>>> = prefixes
            .par_iter()
            .map(|pre| {
                let mut accs = vec![Acc::EMPTY; nmod];
                let mut sizes = vec![0usize; n];
                let mut sy = vec![0.0; n];
                let mut sx = vec![0.0; n * q];
                let mut bu = vec![0.0; q];
                let mut pu = vec![0.0; q * q];
                let mut pb = vec![0.0; q * q];
                let mut bb = vec![0.0; q];
                let mut err = None;
                for_each_rgs(n, pre, |a, k| {
                    if err.is_some() {
                        return;
                    }
                    sizes[..k].iter_mut().for_each(|v| *v = 0);
                    sy[..k].iter_mut().for_each(|v| *v = 0.0);
                    sx[..k * q].iter_mut().for_each(|v| *v = 0.0);
                    for i in 0..n {
                        let c = a[i] as usize;
                        sizes[c] += 1;
                        sy[c] += y[i];
                        for u in 0..q {
                            sx[c * q + u] += xu[i * q + u];
                        }
                    }
                    let mut zz = yy;
                    let mut logw = base + k as f64 * ln_m;
                    let mut logdet = 0.0;
                    bu.copy_from_slice(&xy);
                    pu.copy_from_slice(&xx);
                    for c in 0..k {
                        let s = sizes[c];
                        let d = inv[s];
                        zz -= d * sy[c] * sy[c];
                        logw += lg[s];
                        logdet += ld[s];
                        for u in 0..q {
                            let su = sx[c * q + u];
                            bu[u] -= d * su * sy[c];
                            for v in 0..q {
                                pu[u * q + v] -= d * su * sx[c * q + v];
                            }
                        }
                    }
                    let common = logw - 0.5 * logdet - half_n * zz.ln();
                    for (mi, ps) in pos.iter().enumerate() {
                        let qm = ps.len();
                        let r2 = if qm == 0 {
                            0.0
                        } else {
                            for (ii, &u) in ps.iter().enumerate() {
                                bb[ii] = bu[u];
                                for (jj, &v) in ps.iter().enumerate() {
                                    pb[ii * qm + jj] = pu[u * q + v];
                                }
                            }
                            match small_quad(&mut pb[..qm * qm], &mut bb[..qm], qm) {
                                Some(e) => (e / zz).clamp(0.0, 1.0),
                                None => {
                                    err = Some(Error::Singular {
                                        context: "transformed design in partition sum".into(),
                                        condition: f64::INFINITY,
                                    });
                                    return;
                                }
                            }
                        };
                        match self.integ.lookup(&tables[mi], n, qm, r2) {
                            Ok(li) => accs[mi].add(common + li, r2),
                            Err(e) => {
                                err = Some(e);
                                return;
                            }
                        }
                    }
                });
                match err {
                    Some(e) => Err(e),
                    None => Ok(accs),
                }
            })
            .collect();
        let mut total = vec![Acc::EMPTY; nmod];
        for part in partial {
            for (t, a) in total.iter_mut().zip(part?) {
                t.merge(&a);
            }
        }
        Ok(total.iter().map(Acc::finish).collect())
    }
}

/// Log marginal likelihood of one model with the allocation summed out.
pub fn exact_log_marginal(data: &Dataset, gamma: &InclusionVector, m: f64, prior: HyperG) -> Result<f64> {
    let integ = GIntegrator::new(prior);
    let ev = ExactEvaluator::new(data, &integ, m)?.evaluate(std::slice::from_ref(gamma))?;
    Ok(ev[0].log_marginal)
}

/// log BF of model 2 against model 1 with the allocation summed out.
pub fn unconditional_log_bf(
    data: &Dataset,
    gamma1: &InclusionVector,
    gamma2: &InclusionVector,
    m: f64,
    prior: HyperG,
) -> Result<f64> {
    let integ = GIntegrator::new(prior);
    let ev = ExactEvaluator::new(data, &integ, m)?.evaluate(&[gamma1.clone(), gamma2.clone()])?;
    Ok(ev[1].log_marginal - ev[0].log_marginal)
}

/// Posterior probabilities of every model with p_g <= n - 1 under independent
/// Bernoulli(prior_incl) inclusion priors, with the allocation summed out.
pub fn exact_model_posterior(
    data: &Dataset,
    m: f64,
    prior: HyperG,
    prior_incl: f64,
) -> Result<Vec<(InclusionVector, f64)>> {
    let p = data.p();
    if p > 20 {
        return Err(Error::InvalidModel(format!("{p} predictors is too many to enumerate models")));
    }
    let n = data.n();
    let models: Vec<InclusionVector> = (0u32..1 << p)
        .filter(|mask| (mask.count_ones() as usize) < n)
        .map(|mask| InclusionVector::new((0..p).map(|j| mask >> j & 1 == 1).collect(), n))
        .collect::<Result<_>>()?;
    let integ = GIntegrator::new(prior);
    let ev = ExactEvaluator::new(data, &integ, m)?.evaluate(&models)?;
    let logpost: Vec<f64> = models
        .iter()
        .zip(&ev)
        .map(|(g, e)| {
            let k = g.p_gamma() as f64;
            e.log_marginal + k * prior_incl.ln() + (p as f64 - k) * (-prior_incl).ln_1p()
        })
        .collect();
    let z = log_sum_exp(&logpost);
    Ok(models.into_iter().zip(logpost.iter().map(|l| (l - z).exp())).collect())
}

/// Evidence for a model pair under one fixed allocation, and optionally with
/// the allocation summed out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceResult {
    pub allocation: String,
    pub model1: String,
    pub model2: String,
    pub log_cond_marginal: [f64; 2],
    pub r2_tilde: [f64; 2],
    pub log_bf_conditional: f64,
    pub log_bf_unconditional: Option<f64>,
}

/// Evidence for (gamma1, gamma2) under each named allocation; the
/// unconditional Bayes factor is attached when `dp_mass` is given.
pub fn evidence(
    data: &Dataset,
    gamma1: &InclusionVector,
    gamma2: &InclusionVector,
    allocations: &[(String, Allocation)],
    dp_mass: Option<f64>,
    prior: HyperG,
) -> Result<Vec<EvidenceResult>> {
    let integ = GIntegrator::new(prior);
    let unconditional = match dp_mass {
        Some(m) => {
            let ev = ExactEvaluator::new(data, &integ, m)?.evaluate(&[gamma1.clone(), gamma2.clone()])?;
            Some(ev[1].log_marginal - ev[0].log_marginal)
        }
        None => None,
    };
    allocations
        .iter()
        .map(|(name, alloc)| {
            let l1 = conditional_log_marginal_with(&integ, alloc, gamma1, data)?;
            let l2 = conditional_log_marginal_with(&integ, alloc, gamma2, data)?;
            Ok(EvidenceResult {
                allocation: name.clone(),
                model1: gamma1.key(),
                model2: gamma2.key(),
                log_cond_marginal: [l1, l2],
                r2_tilde: [r2_tilde(alloc, gamma1, data)?, r2_tilde(alloc, gamma2, data)?],
                log_bf_conditional: l2 - l1,
                log_bf_unconditional: unconditional,
            })
        })
        .collect()
}

/// Dense projection R2, used as an independent check in tests.
#[cfg(test)]
pub(crate) fn dense_r2(alloc: &Allocation, gamma: &InclusionVector, data: &Dataset) -> f64 {
    let n = data.n();
    let sigma = nalgebra::DMatrix::from_fn(n, n, |i, j| {
        (i == j) as u8 as f64 + (alloc.labels()[i] == alloc.labels()[j]) as u8 as f64
    });
    let e = sigma.symmetric_eigen();
    let isq = &e.eigenvectors
        * nalgebra::DMatrix::from_diagonal(&e.eigenvalues.map(|v| 1.0 / v.sqrt()))
        * e.eigenvectors.transpose();
    let z = &isq * nalgebra::DVector::from_column_slice(data.y());
    let xt = &isq * data.x_cols(&gamma.indices());
    let h = &xt * (xt.transpose() * &xt).try_inverse().unwrap() * xt.transpose();
    z.dot(&(&h * &z)) / z.dot(&z)
}
