//! Dirichlet-process residual machinery: slice-sampled stick breaking,
//! allocations, atoms and the DP mass.
//!
//! Conditioning structure (all conditionals of the joint posterior):
//!
//! * sticks | allocations, with the slice variables integrated out;
//! * slices | sticks, allocations, followed by stick extension until the
//!   uninstantiated mass drops below every slice;
//! * allocation of subject i | slices, atoms, coefficients. The coefficient
//!   prior N(0, (g/phi)(X' Sigma_A^-1 X)^-1) depends on the partition, so its
//!   density enters this conditional alongside the Gaussian kernel;
//! * atoms | allocations, coefficients, phi (conjugate normal);
//! * DP mass | instantiated sticks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::spd_cholesky;
use crate::rng::{beta_with_log1m, categorical_log, gamma, open01, std_normal};
use crate::types::{ChainState, Dataset};

/// Redraw nu_h ~ Beta(1 + n_h, m + sum_{j>h} n_j) for every stick up to the
/// last occupied one. Sticks beyond it are dropped; they are regenerated from
/// the prior by [`update_slices_and_extend`].
pub fn update_sticks<R: Rng + ?Sized>(state: &mut ChainState, rng: &mut R) {
    let m = state.dp_mass;
    let st = &mut state.sticks;
    let last = st.assignments.iter().copied().max().unwrap_or(0);
    st.nu.truncate(last + 1);
    st.log1m_nu.truncate(last + 1);
    st.atoms.truncate(last + 1);
    let counts = st.counts();
    let mut tail = 0usize;
    for h in (0..=last).rev() {
        let (nu, l1m) = beta_with_log1m(rng, 1.0 + counts[h] as f64, m + tail as f64);
        st.nu[h] = nu;
        st.log1m_nu[h] = l1m;
        tail += counts[h];
    }
    st.refresh_weights();
    st.log_slices.clear();
}

/// Draw u_i ~ Uniform(0, w_{S_i}) and instantiate sticks (nu ~ Beta(1, m),
/// alpha ~ N(0, 1/phi)) until sum_j w_j > 1 - min_i u_i.
pub fn update_slices_and_extend<R: Rng + ?Sized>(
    state: &mut ChainState,
    cap_factor: usize,
    rng: &mut R,
) -> Result<()> {
    let m = state.dp_mass;
    let sd = 1.0 / state.phi.sqrt();
    let st = &mut state.sticks;
    let n = st.assignments.len();
    st.log_slices = st
        .assignments
        .iter()
        .map(|&s| st.log_weights[s] + open01(rng).ln())
        .collect();
    let min_u = st.log_slices.iter().copied().fold(f64::INFINITY, f64::min);
    let cap = cap_factor * n;
    let mut rem = st.log_remaining();
    while rem >= min_u {
        if st.nu.len() >= cap {
            return Err(Error::StickCap { cap });
        }
        let (nu, l1m) = beta_with_log1m(rng, 1.0, m);
        st.nu.push(nu);
        st.log1m_nu.push(l1m);
        st.log_weights.push(nu.ln() + rem);
        st.atoms.push(sd * std_normal(rng));
        rem += l1m;
    }
    Ok(())
}

/// Running per-stick sums used to evaluate the coefficient-prior density for
/// each candidate allocation of one subject.
struct PriorCoupling {
    q: usize,
    /// Included predictor rows, row-major n x q.
    xg: Vec<f64>,
    /// x_i' beta.
    xb: Vec<f64>,
    phi_over_g: f64,
    /// Per-stick column sums s_h (q each), stacked.
    sums: Vec<f64>,
    /// Per-stick s_h' beta.
    dots: Vec<f64>,
    /// X' Sigma_A^-1 X for the current partition.
    gram: DMatrix<f64>,
}

impl PriorCoupling {
    fn new(state: &ChainState, data: &Dataset, counts: &[usize]) -> Option<Self> {
        let idx = state.inclusion.indices();
        let q = idx.len();
        if q == 0 {
            return None;
        }
        let n = data.n();
        let m = state.sticks.nu.len();
        let mut xg = Vec::with_capacity(n * q);
        for i in 0..n {
            for &j in &idx {
                xg.push(data.x()[(i, j)]);
            }
        }
        let xb: Vec<f64> = (0..n)
            .map(|i| (0..q).map(|a| xg[i * q + a] * state.beta[a]).sum())
            .collect();
        let mut sums = vec![0.0; m * q];
        let mut dots = vec![0.0; m];
        for (i, &s) in state.sticks.assignments.iter().enumerate() {
            for a in 0..q {
                sums[s * q + a] += xg[i * q + a];
            }
            dots[s] += xb[i];
        }
        let mut gram = DMatrix::zeros(q, q);
        for i in 0..n {
            for a in 0..q {
                for b in 0..q {
                    gram[(a, b)] += xg[i * q + a] * xg[i * q + b];
                }
            }
        }
        for h in 0..m {
            if counts[h] > 0 {
                let d = 1.0 / (1.0 + counts[h] as f64);
                for a in 0..q {
                    for b in 0..q {
                        gram[(a, b)] -= d * sums[h * q + a] * sums[h * q + b];
                    }
                }
            }
        }
        Some(Self {
            q,
            xg,
            xb,
            phi_over_g: state.phi / state.g,
            sums,
            dots,
            gram,
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.xg[i * self.q..(i + 1) * self.q]
    }

    /// gram += coef * v v'
    fn rank_one(&mut self, v: &[f64], coef: f64) {
        for a in 0..self.q {
            for b in 0..self.q {
                self.gram[(a, b)] += coef * v[a] * v[b];
            }
        }
    }

    /// Move subject `i` out of stick `h` (which had `n_h` members).
    fn remove(&mut self, i: usize, h: usize, n_h: usize) {
        let q = self.q;
        let s: Vec<f64> = self.sums[h * q..(h + 1) * q].to_vec();
        self.rank_one(&s, 1.0 / (1.0 + n_h as f64));
        let x = self.row(i).to_vec();
        for a in 0..q {
            self.sums[h * q + a] -= x[a];
        }
        self.dots[h] -= self.xb[i];
        if n_h > 1 {
            let s: Vec<f64> = self.sums[h * q..(h + 1) * q].to_vec();
            self.rank_one(&s, -1.0 / n_h as f64);
        }
    }

    /// Add subject `i` to stick `h` (which has `n_h` members before the move).
    fn insert(&mut self, i: usize, h: usize, n_h: usize) {
        let q = self.q;
        if n_h > 0 {
            let s: Vec<f64> = self.sums[h * q..(h + 1) * q].to_vec();
            self.rank_one(&s, 1.0 / (1.0 + n_h as f64));
        }
        let x = self.row(i).to_vec();
        for a in 0..q {
            self.sums[h * q + a] += x[a];
        }
        self.dots[h] += self.xb[i];
        let s: Vec<f64> = self.sums[h * q..(h + 1) * q].to_vec();
        self.rank_one(&s, -1.0 / (2.0 + n_h as f64));
    }

    /// Log prior-density change for joining each candidate stick, relative to
    /// the partition with subject `i` removed (the current `gram`).
    fn scores(&self, i: usize, candidates: &[usize], counts: &[usize]) -> Result<Vec<f64>> {
        let q = self.q;
        let chol = spd_cholesky(&self.gram, "coefficient prior in allocation step")?;
        let l = chol.l_dirty();
        let x = self.row(i);
        let xb = self.xb[i];
        candidates
            .iter()
            .map(|&h| {
                let nh = counts[h] as f64;
                let s = &self.sums[h * q..(h + 1) * q];
                let u1 = DVector::from_column_slice(s);
                let u2 = DVector::from_iterator(q, s.iter().zip(x).map(|(a, b)| a + b));
                let w1 = l.solve_lower_triangular(&u1).expect("positive pivots");
                let w2 = l.solve_lower_triangular(&u2).expect("positive pivots");
                let (g11, g12, g22) = (w1.dot(&w1), w1.dot(&w2), w2.dot(&w2));
                let d1 = 1.0 / (1.0 + nh);
                let d2 = -1.0 / (2.0 + nh);
                let det = (1.0 + d1 * g11) * (1.0 + d2 * g22) - d1 * d2 * g12 * g12;
                let c = self.dots[h];
                let dquad = c * c * d1 + (c + xb) * (c + xb) * d2;
                Ok(0.5 * det.max(f64::MIN_POSITIVE).ln() - 0.5 * self.phi_over_g * dquad)
            })
            .collect()
    }
}

/// Reallocate every subject among the sticks whose weight exceeds its slice.
pub fn update_allocations<R: Rng + ?Sized>(
    state: &mut ChainState,
    data: &Dataset,
    rng: &mut R,
) -> Result<()> {
    let n = data.n();
    let mut counts = state.sticks.counts();
    let mut coupling = PriorCoupling::new(state, data, &counts);
    let full_beta = state.full_beta();
    let resid: Vec<f64> = (0..n)
        .map(|i| {
            data.y()[i]
                - full_beta
                    .iter()
                    .enumerate()
                    .map(|(j, b)| data.x()[(i, j)] * b)
                    .sum::<f64>()
        })
        .collect();
    let half_phi = 0.5 * state.phi;
    let mut candidates = Vec::new();
    let mut logw = Vec::new();
    for i in 0..n {
        let lu = state.sticks.log_slices[i];
        candidates.clear();
        candidates.extend(
            (0..state.sticks.nu.len()).filter(|&h| state.sticks.log_weights[h] > lu),
        );
        if candidates.is_empty() {
            return Err(Error::Invariant(format!("no candidate stick for subject {i}")));
        }
        let h0 = state.sticks.assignments[i];
        if let Some(c) = coupling.as_mut() {
            c.remove(i, h0, counts[h0]);
        }
        counts[h0] -= 1;
        logw.clear();
        logw.extend(candidates.iter().map(|&h| {
            let e = resid[i] - state.sticks.atoms[h];
            -half_phi * e * e
        }));
        if let Some(c) = coupling.as_ref() {
            for (lw, extra) in logw.iter_mut().zip(c.scores(i, &candidates, &counts)?) {
                *lw += extra;
            }
        }
        let pick = categorical_log(rng, &logw)
            .ok_or_else(|| Error::Invariant(format!("allocation weights unusable for subject {i}")))?;
        let h = candidates[pick];
        if let Some(c) = coupling.as_mut() {
            c.insert(i, h, counts[h]);
        }
        counts[h] += 1;
        state.sticks.assignments[i] = h;
    }
    state.sync_alloc();
    Ok(())
}

/// Metropolis label swaps between neighbouring sticks, with the slice
/// variables integrated out: swapping the contents of sticks j and j+1
/// is accepted with probability min(1, (w_{j+1}/w_j)^(n_j - n_{j+1})).
/// Returns the number of accepted swaps.
pub fn label_swap<R: Rng + ?Sized>(state: &mut ChainState, rng: &mut R) -> usize {
    let st = &mut state.sticks;
    let m = st.nu.len();
    if m < 2 {
        return 0;
    }
    let mut counts = st.counts();
    let mut perm: Vec<usize> = (0..m).collect();
    let mut pos: Vec<usize> = (0..m).collect();
    let mut accepted = 0;
    for j in 0..m - 1 {
        if counts[j] == counts[j + 1] {
            continue;
        }
        let log_ratio =
            (counts[j] as f64 - counts[j + 1] as f64) * (st.log_weights[j + 1] - st.log_weights[j]);
        if log_ratio >= 0.0 || open01(rng).ln() < log_ratio {
            counts.swap(j, j + 1);
            st.atoms.swap(j, j + 1);
            pos.swap(j, j + 1);
            accepted += 1;
        }
    }
    // pos[new] = old  ->  perm[old] = new
    for (new, &old) in pos.iter().enumerate() {
        perm[old] = new;
    }
    for s in st.assignments.iter_mut() {
        *s = perm[*s];
    }
    state.sync_alloc();
    accepted
}

/// Conjugate atom update: occupied stick h draws from
/// N(sum_{i in h} r_i / (n_h + 1), 1 / (phi (n_h + 1))) with r = y - X beta;
/// empty sticks draw from the base measure N(0, 1/phi).
pub fn update_atoms<R: Rng + ?Sized>(state: &mut ChainState, data: &Dataset, rng: &mut R) {
    let full_beta = state.full_beta();
    let m = state.sticks.nu.len();
    let mut sum = vec![0.0; m];
    let mut cnt = vec![0usize; m];
    for (i, &s) in state.sticks.assignments.iter().enumerate() {
        let fit: f64 = full_beta
            .iter()
            .enumerate()
            .map(|(j, b)| data.x()[(i, j)] * b)
            .sum();
        sum[s] += data.y()[i] - fit;
        cnt[s] += 1;
    }
    for h in 0..m {
        let w = cnt[h] as f64 + 1.0;
        let mean = sum[h] / w;
        let sd = 1.0 / (state.phi * w).sqrt();
        state.sticks.atoms[h] = mean + sd * std_normal(rng);
    }
}

/// m ~ Gamma(a_m + M, b_m - sum_{l<=M} log(1 - nu_l)) over the M instantiated
/// sticks.
pub fn update_dp_mass<R: Rng + ?Sized>(state: &mut ChainState, shape: f64, rate: f64, rng: &mut R) {
    let (a, b) = dp_mass_conditional(state, shape, rate);
    state.dp_mass = gamma(rng, a, b).max(f64::MIN_POSITIVE);
}

/// Shape and rate of the DP-mass full conditional.
pub fn dp_mass_conditional(state: &ChainState, shape: f64, rate: f64) -> (f64, f64) {
    let st = &state.sticks;
    (shape + st.nu.len() as f64, rate - st.log1m_nu.iter().sum::<f64>())
}

/// One retained draw of the residual mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDraw {
    pub weights: Vec<f64>,
    pub atoms: Vec<f64>,
    pub phi: f64,
}

impl MixtureDraw {
    pub fn from_state(state: &ChainState) -> Self {
        Self {
            weights: state.sticks.weights(),
            atoms: state.sticks.atoms.clone(),
            phi: state.phi,
        }
    }

    /// Mixture density at `e`, renormalised over the instantiated sticks.
    pub fn density(&self, e: f64) -> f64 {
        let norm = (self.phi / (2.0 * std::f64::consts::PI)).sqrt();
        let tot: f64 = self.weights.iter().sum();
        self.weights
            .iter()
            .zip(&self.atoms)
            .map(|(w, a)| w * norm * (-0.5 * self.phi * (e - a).powi(2)).exp())
            .sum::<f64>()
            / tot
    }
}

/// Pointwise posterior mean of the residual density on `grid`.
pub fn residual_density_estimate(draws: &[MixtureDraw], grid: &[f64]) -> Result<Vec<f64>> {
    if draws.is_empty() {
        return Err(Error::TooFewDraws { needed: 1, have: 0 });
    }
    let mut out = vec![0.0; grid.len()];
    for d in draws {
        for (o, &e) in out.iter_mut().zip(grid) {
            *o += d.density(e);
        }
    }
    let k = draws.len() as f64;
    out.iter_mut().for_each(|v| *v /= k);
    Ok(out)
}
