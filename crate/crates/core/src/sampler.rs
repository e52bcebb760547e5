//! The Gibbs sweep and chain driver.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dp::{
    label_swap, update_allocations, update_atoms, update_dp_mass, update_slices_and_extend,
    update_sticks, MixtureDraw,
};
use crate::error::{Error, Result};
use crate::linalg::SigmaOps;
use crate::rng::{stream, ChainRng};
use crate::ssvs::{
    update_beta, update_beta_collapsed, update_g, update_inclusion, update_precision, GGrid,
    HyperG,
};
use crate::types::{
    Allocation, ChainState, Dataset, InclusionVector, ResidualModel, SamplerConfig, StickState,
};

/// Counters accumulated over a chain.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub sweeps: usize,
    /// Inclusion proposals given zero weight because the Gram block was
    /// numerically singular.
    pub collinearity_exclusions: usize,
    /// g draws where every grid weight underflowed.
    pub g_fallbacks: usize,
    pub label_swaps: usize,
    pub max_sticks: usize,
}

/// Retained draws, one entry per kept iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Draws {
    pub gamma: Vec<Vec<bool>>,
    /// Length-p coefficients with zeros for excluded predictors.
    pub beta: Vec<Vec<f64>>,
    pub phi: Vec<f64>,
    pub g: Vec<f64>,
    pub dp_mass: Vec<f64>,
    /// Number of nonempty clusters.
    pub clusters: Vec<usize>,
    /// Stick-weighted mean intercept.
    pub intercept: Vec<f64>,
    /// Residual mixtures; empty unless requested.
    pub mixtures: Vec<MixtureDraw>,
}

impl Draws {
    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    fn push(&mut self, s: &ChainState, keep_mixture: bool) {
        self.gamma.push(s.inclusion.as_slice().to_vec());
        self.beta.push(s.full_beta());
        self.phi.push(s.phi);
        self.g.push(s.g);
        self.dp_mass.push(s.dp_mass);
        self.clusters.push(s.alloc.k());
        self.intercept.push(s.mean_intercept());
        if keep_mixture {
            self.mixtures.push(MixtureDraw::from_state(s));
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub draws: Draws,
    pub stats: ChainStats,
    pub final_state: ChainState,
}

/// Upper bound on the number of starting clusters.
pub const INITIAL_CLUSTERS: usize = 10;

/// Residuals of y on X by least squares, or y itself when p is too large
/// for the fit to leave informative residuals.
fn initial_residuals(data: &Dataset) -> Vec<f64> {
    let (n, p) = (data.n(), data.p());
    let y = DVector::from_column_slice(data.y());
    if 2 * p < n {
        if let Ok(b) = data.x().clone().svd(true, true).solve(&y, 1e-12) {
            let r = &y - data.x() * b;
            if r.iter().all(|v| v.is_finite()) {
                return r.iter().copied().collect();
            }
        }
    }
    y.iter().copied().collect()
}

/// Equal-count groups of sorted residuals with their group means as atoms.
fn residual_groups(data: &Dataset, k: usize) -> (Vec<usize>, Vec<f64>) {
    let n = data.n();
    let r = initial_residuals(data);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| r[a].total_cmp(&r[b]));
    let mut labels = vec![0; n];
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (rank, &i) in order.iter().enumerate() {
        let h = rank * k / n;
        labels[i] = h;
        sums[h] += r[i];
        counts[h] += 1;
    }
    let atoms = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    (labels, atoms)
}

/// Gibbs sampler for one dataset and configuration.
#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    data: &'a Dataset,
    config: SamplerConfig,
    grid: GGrid,
    keep_mixtures: bool,
}

#[cfg(debug_assertions)]
fn debug_check(state: &ChainState, slices: bool, step: &str) {
    if let Err(e) = state.check(slices) {
        panic!("state invariant broken after {step}: {e}");
    }
}

#[cfg(not(debug_assertions))]
fn debug_check(_: &ChainState, _: bool, _: &str) {}

impl<'a> Sampler<'a> {
    pub fn new(data: &'a Dataset, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let grid = GGrid::new(HyperG::new(config.hyper_g_a)?, config.g_grid_size);
        Ok(Self {
            data,
            config,
            grid,
            keep_mixtures: false,
        })
    }

    /// Also store the residual mixture of every retained draw.
    pub fn keep_mixtures(mut self, keep: bool) -> Self {
        self.keep_mixtures = keep;
        self
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn grid(&self) -> &GGrid {
        &self.grid
    }

    /// Empty model, phi = 1/var(y), g at the prior median. Under the DP the
    /// subjects start in up to [`INITIAL_CLUSTERS`] equal-count groups of
    /// least-squares residuals; from a single cluster a small DP mass leaves
    /// almost no stick mass for the slices to reach.
    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> ChainState {
        let n = self.data.n();
        let y = self.data.y();
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let phi = if var > 0.0 { 1.0 / var } else { 1.0 };
        let dp_mass = self
            .config
            .fixed_dp_mass
            .unwrap_or(self.config.m_prior_shape / self.config.m_prior_rate);
        let (assignments, atoms) = match self.config.residual_model {
            ResidualModel::Dp => residual_groups(self.data, INITIAL_CLUSTERS.min(n)),
            ResidualModel::Single => (vec![0; n], vec![mean]),
        };
        let k = atoms.len();
        let sticks = StickState {
            nu: vec![0.5; k],
            log1m_nu: vec![0.5f64.ln(); k],
            log_weights: vec![],
            atoms,
            log_slices: vec![],
            assignments,
        };
        let mut state = ChainState {
            inclusion: InclusionVector::empty(self.data.p()),
            beta: vec![],
            phi,
            g: self.grid.nodes[self.grid.len() / 2],
            dp_mass,
            sticks,
            alloc: Allocation::single(n),
        };
        match self.config.residual_model {
            ResidualModel::Dp => update_sticks(&mut state, rng),
            ResidualModel::Single => state.sticks.refresh_weights(),
        }
        state.sync_alloc();
        state
    }

    /// One full sweep in the fixed order: sticks, slices, allocations, DP
    /// mass, precision, g, inclusion, then coefficients and atoms.
    pub fn sweep<R: Rng + ?Sized>(
        &self,
        state: &mut ChainState,
        stats: &mut ChainStats,
        rng: &mut R,
    ) -> Result<()> {
        let cfg = &self.config;
        let data = self.data;
        if cfg.residual_model == ResidualModel::Dp {
            update_sticks(state, rng);
            debug_check(state, false, "stick update");
            update_slices_and_extend(state, cfg.stick_cap_factor, rng)?;
            debug_check(state, true, "slice update");
            stats.max_sticks = stats.max_sticks.max(state.sticks.nu.len());
            update_allocations(state, data, rng)?;
            debug_check(state, true, "allocation update");
            if cfg.label_swap {
                stats.label_swaps += label_swap(state, rng);
                debug_check(state, false, "label swap");
            }
            if cfg.fixed_dp_mass.is_none() {
                update_dp_mass(state, cfg.m_prior_shape, cfg.m_prior_rate, rng);
                debug_check(state, false, "DP mass update");
            }
        }
        let alloc = state.alloc.clone();
        let ops = SigmaOps::new(&alloc);
        update_precision(state, data, &ops, cfg.precision_prior, rng)?;
        debug_check(state, false, "precision update");
        stats.g_fallbacks += update_g(state, data, &ops, &self.grid, rng)? as usize;
        debug_check(state, false, "g update");
        stats.collinearity_exclusions +=
            update_inclusion(state, data, &ops, cfg.prior_inclusion, rng)?;
        update_beta_collapsed(state, data, &ops, rng)?;
        debug_check(state, false, "inclusion update");
        update_atoms(state, data, rng);
        update_beta(state, data, &ops, rng)?;
        debug_check(state, false, "coefficient update");
        stats.sweeps += 1;
        Ok(())
    }

    /// Run a chain on the given generator.
    pub fn run_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ChainOutput> {
        let mut state = self.initial_state(rng);
        self.run_from(&mut state, rng)
    }

    /// Run a chain on stream 0 of the configured seed.
    pub fn run(&self) -> Result<ChainOutput> {
        let mut rng: ChainRng = stream(self.config.rng_seed, 0);
        self.run_with(&mut rng)
    }

    fn run_from<R: Rng + ?Sized>(
        &self,
        state: &mut ChainState,
        rng: &mut R,
    ) -> Result<ChainOutput> {
        let cfg = &self.config;
        let mut stats = ChainStats::default();
        let mut draws = Draws::default();
        for it in 0..cfg.iterations {
            self.sweep(state, &mut stats, rng).map_err(|e| match e {
                Error::Invariant(_) => Error::Diverged { iteration: it },
                other => other,
            })?;
            if !(state.phi.is_finite() && state.beta.iter().all(|b| b.is_finite())) {
                return Err(Error::Diverged { iteration: it });
            }
            if it >= cfg.burn_in && (it - cfg.burn_in) % cfg.thin == 0 {
                draws.push(state, self.keep_mixtures);
            }
        }
        Ok(ChainOutput {
            draws,
            stats,
            final_state: state.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn toy(n: usize) -> Dataset {
        let x = DMatrix::from_fn(n, 3, |i, j| ((i * 3 + j * 7 + 1) as f64 * 0.77).sin());
        let y = (0..n)
            .map(|i| 2.0 * x[(i, 0)] + if i % 2 == 0 { 2.0 } else { -2.0 } + 0.1 * (i as f64).cos())
            .collect();
        Dataset::from_parts(y, x).unwrap()
    }

    fn cfg(model: ResidualModel) -> SamplerConfig {
        SamplerConfig {
            iterations: 400,
            burn_in: 100,
            thin: 3,
            rng_seed: 5,
            residual_model: model,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn retained_count_and_shapes() {
        let d = toy(30);
        let out = Sampler::new(&d, cfg(ResidualModel::Dp)).unwrap().run().unwrap();
        assert_eq!(out.draws.len(), 100);
        assert!(out.draws.beta.iter().all(|b| b.len() == 3));
        assert!(out.draws.mixtures.is_empty());
        assert_eq!(out.stats.sweeps, 400);
        out.final_state.check(false).unwrap();
    }

    #[test]
    fn same_seed_same_chain() {
        let d = toy(20);
        let a = Sampler::new(&d, cfg(ResidualModel::Dp)).unwrap().run().unwrap();
        let b = Sampler::new(&d, cfg(ResidualModel::Dp)).unwrap().run().unwrap();
        assert_eq!(a.draws, b.draws);
        let mut c2 = cfg(ResidualModel::Dp);
        c2.rng_seed = 6;
        let c = Sampler::new(&d, c2).unwrap().run().unwrap();
        assert_ne!(a.draws.phi, c.draws.phi);
    }

    #[test]
    fn initial_groups_follow_residual_order() {
        let d = toy(30);
        let s = Sampler::new(&d, cfg(ResidualModel::Dp)).unwrap();
        let st = s.initial_state(&mut stream(1, 0));
        st.check(false).unwrap();
        assert_eq!(st.alloc.k(), INITIAL_CLUSTERS);
        assert!(st.alloc.sizes().iter().all(|&c| c == 3));
        let atoms = &st.sticks.atoms;
        assert!(atoms.windows(2).all(|w| w[0] <= w[1]));
        let single = Sampler::new(&d, cfg(ResidualModel::Single)).unwrap().initial_state(&mut stream(1, 0));
        assert_eq!(single.alloc.k(), 1);
        let tiny = toy(4);
        let st = Sampler::new(&tiny, cfg(ResidualModel::Dp)).unwrap().initial_state(&mut stream(1, 0));
        assert_eq!(st.alloc.k(), 4);
    }

    #[test]
    fn single_model_keeps_one_cluster() {
        let d = toy(20);
        let out = Sampler::new(&d, cfg(ResidualModel::Single)).unwrap().run().unwrap();
        assert!(out.draws.clusters.iter().all(|&k| k == 1));
        assert_eq!(out.stats.label_swaps, 0);
    }

    #[test]
    fn strong_signal_is_selected() {
        let d = toy(40);
        let out = Sampler::new(&d, cfg(ResidualModel::Dp)).unwrap().run().unwrap();
        let mip0 = out.draws.gamma.iter().filter(|g| g[0]).count() as f64 / out.draws.len() as f64;
        assert!(mip0 > 0.9);
    }

    #[test]
    fn fixed_mass_is_held() {
        let d = toy(20);
        let mut c = cfg(ResidualModel::Dp);
        c.fixed_dp_mass = Some(0.7);
        let out = Sampler::new(&d, c).unwrap().run().unwrap();
        assert!(out.draws.dp_mass.iter().all(|&m| m == 0.7));
    }

    #[test]
    fn mixtures_on_request() {
        let d = toy(20);
        let out = Sampler::new(&d, cfg(ResidualModel::Dp))
            .unwrap()
            .keep_mixtures(true)
            .run()
            .unwrap();
        assert_eq!(out.draws.mixtures.len(), out.draws.len());
    }

    #[test]
    fn bad_config_is_rejected() {
        let d = toy(10);
        let mut c = cfg(ResidualModel::Dp);
        c.burn_in = c.iterations;
        assert!(matches!(Sampler::new(&d, c), Err(Error::InvalidConfig(_))));
    }
}
