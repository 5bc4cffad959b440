//! Domain types and elementary likelihood evaluations shared by every
//! sampler step.
//!
//! Observation model: `y_it ~ NB(r_i, μ_it)` with
//! `log μ_it = d_i + μ_t^(z_i) + c_i' x_t^(z_i)`. Writing
//! `x̃_t = (μ_t, x_t')'` and `c̃_i = (1, c_i')'`, the log-mean is
//! `d_i + c̃_i' x̃_t^(z_i)`. Blocks stack across live clusters into the
//! state vector of a switching linear dynamical system.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::numeric::{ln_gamma, softplus};
use crate::{Error, Result};

/// Observation model flavor. The Poisson variant reuses the NB machinery
/// as a proposal and corrects with a Metropolis-Hastings step; `tuning_r`
/// plays the dispersion's role as the proposal tuning parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ModelFlavor {
    NegBinomial,
    Poisson { tuning_r: f64 },
}

/// Observed spike counts: N neurons × T time bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountMatrix {
    pub counts: DMatrix<u32>,
    pub neuron_ids: Vec<String>,
    /// Bin width in seconds; metadata only.
    pub bin_width: f64,
}

impl CountMatrix {
    pub fn new(counts: DMatrix<u32>, neuron_ids: Vec<String>, bin_width: f64) -> Result<Self> {
        if counts.nrows() < 1 || counts.ncols() < 2 {
            return Err(Error::Shape(format!(
                "count matrix must be at least 1x2, got {}x{}",
                counts.nrows(),
                counts.ncols()
            )));
        }
        if neuron_ids.len() != counts.nrows() {
            return Err(Error::Shape(format!(
                "{} neuron ids for {} rows",
                neuron_ids.len(),
                counts.nrows()
            )));
        }
        Ok(CountMatrix {
            counts,
            neuron_ids,
            bin_width,
        })
    }

    pub fn n(&self) -> usize {
        self.counts.nrows()
    }

    pub fn t(&self) -> usize {
        self.counts.ncols()
    }

    pub fn mean_count(&self, i: usize) -> f64 {
        self.counts.row(i).iter().map(|&y| y as f64).sum::<f64>() / self.t() as f64
    }
}

/// Per-neuron observation parameters and cluster labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectParams {
    /// Per-neuron log-scale baselines d_i.
    pub baselines: DVector<f64>,
    /// N×p loading matrix; row i is c_i.
    pub loadings: DMatrix<f64>,
    /// Per-neuron dispersions r_i, each > 0.
    pub dispersions: DVector<f64>,
    /// Cluster labels, contiguous in 0..k.
    pub labels: Vec<usize>,
}

impl SubjectParams {
    pub fn n(&self) -> usize {
        self.baselines.len()
    }

    pub fn p(&self) -> usize {
        self.loadings.ncols()
    }

    /// c̃_i = (1, c_i')'.
    pub fn c_tilde(&self, i: usize) -> DVector<f64> {
        let p = self.p();
        let mut v = DVector::zeros(p + 1);
        v[0] = 1.0;
        for j in 0..p {
            v[j + 1] = self.loadings[(i, j)];
        }
        v
    }

    pub fn validate(&self, n_clusters: usize) -> Result<()> {
        if self.loadings.nrows() != self.n()
            || self.dispersions.len() != self.n()
            || self.labels.len() != self.n()
        {
            return Err(Error::Shape("subject parameter lengths disagree".into()));
        }
        if self.dispersions.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Domain("dispersions must be positive".into()));
        }
        if self.labels.iter().any(|&z| z >= n_clusters) {
            return Err(Error::Domain("label indexes a dead cluster".into()));
        }
        Ok(())
    }
}

/// Per-cluster latent trajectories. Block j is (p+1)×T with row 0 the
/// population baseline μ^(j) and rows 1..p the latent factors x^(j).
/// Stacking order is ascending cluster id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub blocks: BTreeMap<usize, DMatrix<f64>>,
}

impl LatentState {
    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    pub fn t(&self) -> usize {
        self.blocks.values().next().map(|b| b.ncols()).unwrap_or(0)
    }

    /// Latent factor dimension p (rows per block minus the baseline row).
    pub fn p(&self) -> usize {
        self.blocks
            .values()
            .next()
            .map(|b| b.nrows() - 1)
            .unwrap_or(0)
    }

    /// Stacked dimension D = k(p+1).
    pub fn dim(&self) -> usize {
        self.k() * (self.p() + 1)
    }

    /// Row offset of a cluster's block in the stacked state vector.
    pub fn offset(&self, cluster: usize) -> Option<usize> {
        let rows = self.p() + 1;
        self.blocks
            .keys()
            .position(|&id| id == cluster)
            .map(|pos| pos * rows)
    }

    /// Stack blocks into a D×T matrix in ascending cluster-id order.
    pub fn stack(&self) -> DMatrix<f64> {
        let rows = self.p() + 1;
        let t = self.t();
        let mut out = DMatrix::zeros(self.dim(), t);
        for (pos, block) in self.blocks.values().enumerate() {
            out.view_mut((pos * rows, 0), (rows, t)).copy_from(block);
        }
        out
    }

    /// Split a stacked D×T matrix back into blocks under the same ids.
    pub fn unstack(&self, stacked: &DMatrix<f64>) -> Result<LatentState> {
        let rows = self.p() + 1;
        let t = self.t();
        if stacked.nrows() != self.dim() || stacked.ncols() != t {
            return Err(Error::Shape(format!(
                "stacked latents are {}x{}, expected {}x{}",
                stacked.nrows(),
                stacked.ncols(),
                self.dim(),
                t
            )));
        }
        let mut blocks = BTreeMap::new();
        for (pos, &id) in self.blocks.keys().enumerate() {
            blocks.insert(id, stacked.view((pos * rows, 0), (rows, t)).into_owned());
        }
        Ok(LatentState { blocks })
    }
}

/// Sticky HDP-HMM hyperparameters (weak-limit truncation at `max_states`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HmmHypers {
    /// GEM / top-level Dirichlet concentration η.
    pub eta: f64,
    /// Transition DP concentration α.
    pub alpha: f64,
    /// Sticky self-transition mass m ≥ 0.
    pub sticky_mass: f64,
    /// Weak-limit truncation L_max ≥ 1.
    pub max_states: usize,
}

impl Default for HmmHypers {
    fn default() -> Self {
        HmmHypers {
            eta: 1.0,
            alpha: 1.0,
            sticky_mass: 10.0,
            max_states: 10,
        }
    }
}

/// Discrete state labels with their sticky HDP-HMM weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateChain {
    /// Length-T state labels in 0..max_states.
    pub xi: Vec<usize>,
    /// Global state weights β (sums to 1).
    pub beta: DVector<f64>,
    /// Row-stochastic transition matrix ψ.
    pub psi: DMatrix<f64>,
    pub hypers: HmmHypers,
}

impl StateChain {
    pub fn validate(&self) -> Result<()> {
        let l = self.hypers.max_states;
        if l < 1 || self.hypers.sticky_mass < 0.0 {
            return Err(Error::Domain("invalid sticky-HMM hyperparameters".into()));
        }
        if self.beta.len() != l || self.psi.nrows() != l || self.psi.ncols() != l {
            return Err(Error::Shape("state weights sized off max_states".into()));
        }
        if (self.beta.sum() - 1.0).abs() > 1e-12 {
            return Err(Error::Numerical("beta does not sum to 1".into()));
        }
        for l in 0..self.psi.nrows() {
            if (self.psi.row(l).sum() - 1.0).abs() > 1e-12 {
                return Err(Error::Numerical(format!("psi row {l} does not sum to 1")));
            }
        }
        if self.xi.iter().any(|&s| s >= l) {
            return Err(Error::Domain("state label out of range".into()));
        }
        Ok(())
    }

    /// Number of distinct states currently occupied by xi.
    pub fn occupied(&self) -> usize {
        let mut seen = vec![false; self.hypers.max_states];
        for &s in &self.xi {
            seen[s] = true;
        }
        seen.iter().filter(|&&b| b).count()
    }
}

/// One state's linear dynamics X̃_{t+1} = b + A X̃_t + N(0, Q).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDynamics {
    pub bias: DVector<f64>,
    pub transition: DMatrix<f64>,
    pub noise_cov: DMatrix<f64>,
}

/// Scalar hyperparameters of the matrix-normal inverse-Wishart dynamics
/// prior; materialized at the current stacked dimension D.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NiwHypers {
    /// Ψ0 = psi0_scale · I_D.
    pub psi0_scale: f64,
    /// γ0 = D + dof_extra (must keep γ0 > D + 1).
    pub dof_extra: f64,
    /// Γ0 = prec_scale · I_{D+1}.
    pub prec_scale: f64,
}

impl Default for NiwHypers {
    fn default() -> Self {
        NiwHypers {
            psi0_scale: 0.01,
            dof_extra: 2.0,
            prec_scale: 0.01,
        }
    }
}

/// Concrete prior matrices at a fixed dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiwPrior {
    pub psi0: DMatrix<f64>,
    pub gamma0: f64,
    /// (D+1)×D prior mean of (b, A')'; defaults to b = 0, A = I.
    pub b0: DMatrix<f64>,
    /// (D+1)×(D+1) prior precision Γ0.
    pub prec0: DMatrix<f64>,
}

impl NiwHypers {
    pub fn materialize(&self, dim: usize) -> NiwPrior {
        let mut b0 = DMatrix::zeros(dim + 1, dim);
        for j in 0..dim {
            b0[(j + 1, j)] = 1.0;
        }
        NiwPrior {
            psi0: DMatrix::identity(dim, dim) * self.psi0_scale,
            gamma0: dim as f64 + self.dof_extra,
            b0,
            prec0: DMatrix::identity(dim + 1, dim + 1) * self.prec_scale,
        }
    }
}

/// Per-state dynamics over the stacked latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSet {
    pub states: Vec<LinearDynamics>,
    pub prior: NiwPrior,
}

impl DynamicsSet {
    pub fn dim(&self) -> usize {
        self.prior.psi0.nrows()
    }
}

/// Model hyperparameters and numeric tolerances for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Latent factor dimension p ≥ 0, fixed for the run.
    pub p: usize,
    /// Symmetric Dirichlet weight γ of the MFM mixture.
    pub gamma: f64,
    /// Geometric success probability ζ of the prior on the cluster count.
    pub zeta: f64,
    /// Dispersion prior shape a0 (r_i ~ Gamma(a0, 1/h)).
    pub disp_shape: f64,
    /// Dispersion prior rate h.
    pub disp_rate: f64,
    /// Prior variance σ_d² of the subject baselines.
    pub baseline_var: f64,
    /// Series length of the general-b Pólya-Gamma sampler.
    pub pg_terms: usize,
    /// Diagonal jitter added before Cholesky in the FFBS.
    pub ffbs_jitter: f64,
    pub hmm: HmmHypers,
    pub dynamics: NiwHypers,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            p: 2,
            gamma: 1.0,
            zeta: zeta_for_expected_clusters(3),
            disp_shape: 1.0,
            disp_rate: 1.0,
            baseline_var: 1.0,
            pg_terms: 200,
            ffbs_jitter: 1e-10,
            hmm: HmmHypers::default(),
            dynamics: NiwHypers::default(),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.gamma <= 0.0 {
            return Err(Error::Domain("gamma must be positive".into()));
        }
        if !(self.zeta > 0.0 && self.zeta <= 1.0) {
            return Err(Error::Domain("zeta must lie in (0, 1]".into()));
        }
        if self.disp_shape <= 0.0 || self.disp_rate <= 0.0 {
            return Err(Error::Domain("dispersion prior must be positive".into()));
        }
        if self.baseline_var <= 0.0 {
            return Err(Error::Domain("baseline variance must be positive".into()));
        }
        if self.pg_terms < 1 {
            return Err(Error::Domain("pg_terms must be >= 1".into()));
        }
        Ok(())
    }
}

/// ζ such that the geometric prior puts P(k ≤ expected) = 0.8.
pub fn zeta_for_expected_clusters(expected: usize) -> f64 {
    1.0 - 0.2f64.powf(1.0 / expected.max(1) as f64)
}

/// Negative-binomial log-pmf with the mean supplied on log scale.
/// Assumes r > 0; no validation.
pub fn nb_log_pmf_ln(y: u64, r: f64, ln_mu: f64) -> f64 {
    let yf = y as f64;
    // log((r+μ)/r) computed without forming μ
    let s = softplus(ln_mu - r.ln());
    ln_gamma(r + yf) - ln_gamma(yf + 1.0) - ln_gamma(r) - r * s + yf * (ln_mu - r.ln() - s)
}

/// log f_NB(y | r, μ) for the mean/dispersion parameterization
/// (mean μ, variance μ + μ²/r).
pub fn nb_log_pmf(y: u64, r: f64, mu: f64) -> Result<f64> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Domain(format!("nb_log_pmf: r = {r} not positive")));
    }
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(Error::Domain(format!("nb_log_pmf: mu = {mu} not positive")));
    }
    Ok(nb_log_pmf_ln(y, r, mu.ln()))
}

/// log μ_it = d_i + c̃_i' x̃_t.
pub fn log_mean(d_i: f64, c_tilde: &DVector<f64>, x_tilde: &DVector<f64>) -> Result<f64> {
    if c_tilde.len() != x_tilde.len() {
        return Err(Error::Shape(format!(
            "loading length {} vs latent length {}",
            c_tilde.len(),
            x_tilde.len()
        )));
    }
    Ok(d_i + c_tilde.dot(x_tilde))
}

/// Sum of the NB log-pmf over all (i, t); used by diagnostics and MH steps.
pub fn full_log_likelihood(
    data: &CountMatrix,
    params: &SubjectParams,
    latents: &LatentState,
) -> Result<f64> {
    let n = data.n();
    let t = data.t();
    if params.n() != n {
        return Err(Error::Shape("subject params sized off data".into()));
    }
    if latents.t() != t {
        return Err(Error::Shape("latents sized off data".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let r = params.dispersions[i];
        if !(r > 0.0) {
            return Err(Error::Domain(format!("dispersion r_{i} not positive")));
        }
        let block = latents
            .blocks
            .get(&params.labels[i])
            .ok_or_else(|| Error::Domain(format!("neuron {i} labels a dead cluster")))?;
        let c_tilde = params.c_tilde(i);
        for t_idx in 0..t {
            let ln_mu = params.baselines[i] + c_tilde.dot(&block.column(t_idx).into_owned());
            total += nb_log_pmf_ln(data.counts[(i, t_idx)] as u64, r, ln_mu);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::poisson_log_pmf_ln;
    use approx::assert_abs_diff_eq;

    #[test]
    fn nb_log_pmf_closed_forms() {
        // (r/(r+μ))^r at y = 0
        assert_abs_diff_eq!(nb_log_pmf(0, 1.0, 1.0).unwrap(), 0.5f64.ln(), epsilon = 1e-12);
        // Γ(2)/[1!Γ(1)]·(1/2)(1/2)
        assert_abs_diff_eq!(nb_log_pmf(1, 1.0, 1.0).unwrap(), 0.25f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn nb_log_pmf_poisson_limit() {
        let pois = poisson_log_pmf_ln(2, 2f64.ln());
        assert!((nb_log_pmf(2, 1000.0, 2.0).unwrap() - pois).abs() < 1e-2);
        // monotone convergence in r
        let errs: Vec<f64> = [10.0, 100.0, 1000.0]
            .iter()
            .map(|&r| (nb_log_pmf(2, r, 2.0).unwrap() - pois).abs())
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2]);
    }

    #[test]
    fn nb_log_pmf_sums_to_one() {
        let total: f64 = (0..=500u64)
            .map(|y| nb_log_pmf(y, 2.0, 3.0).unwrap().exp())
            .sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn nb_log_pmf_rejects_bad_domain() {
        assert!(nb_log_pmf(0, 0.0, 1.0).is_err());
        assert!(nb_log_pmf(0, -1.0, 1.0).is_err());
        assert!(nb_log_pmf(0, 1.0, 0.0).is_err());
    }

    #[test]
    fn log_mean_examples() {
        let c = DVector::from_row_slice(&[1.0, 0.0]);
        let x = DVector::from_row_slice(&[0.0, 5.0]);
        assert_abs_diff_eq!(log_mean(0.0, &c, &x).unwrap(), 0.0, epsilon = 1e-15);

        let c = DVector::from_row_slice(&[1.0, 2.0]);
        let x = DVector::from_row_slice(&[0.5, -0.25]);
        assert_abs_diff_eq!(log_mean(1.0, &c, &x).unwrap(), 1.0, epsilon = 1e-15);

        let bad = DVector::from_row_slice(&[1.0]);
        assert!(log_mean(0.0, &bad, &x).is_err());
    }

    #[test]
    fn log_mean_matches_naive_dot() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let len = rng.random_range(1..8);
            let c = DVector::from_fn(len, |_, _| rng.random::<f64>() - 0.5);
            let x = DVector::from_fn(len, |_, _| rng.random::<f64>() - 0.5);
            let d: f64 = rng.random::<f64>();
            let naive: f64 = d + (0..len).map(|j| c[j] * x[j]).sum::<f64>();
            assert_abs_diff_eq!(log_mean(d, &c, &x).unwrap(), naive, epsilon = 1e-12);
        }
    }

    fn tiny_setup() -> (CountMatrix, SubjectParams, LatentState) {
        let counts = DMatrix::from_row_slice(2, 3, &[0, 1, 2, 3, 0, 1]);
        let data = CountMatrix::new(counts, vec!["a".into(), "b".into()], 1.0).unwrap();
        let params = SubjectParams {
            baselines: DVector::from_row_slice(&[0.1, -0.2]),
            loadings: DMatrix::from_row_slice(2, 1, &[0.5, -1.0]),
            dispersions: DVector::from_row_slice(&[2.0, 3.0]),
            labels: vec![0, 0],
        };
        let mut blocks = BTreeMap::new();
        blocks.insert(
            0,
            DMatrix::from_row_slice(2, 3, &[0.2, -0.1, 0.0, 0.3, 0.1, -0.4]),
        );
        (data, params, LatentState { blocks })
    }

    #[test]
    fn full_log_likelihood_matches_brute_force() {
        let (data, params, latents) = tiny_setup();
        let got = full_log_likelihood(&data, &params, &latents).unwrap();
        let mut want = 0.0;
        for i in 0..2 {
            for t in 0..3 {
                let block = &latents.blocks[&params.labels[i]];
                let mu = (params.baselines[i]
                    + params.c_tilde(i).dot(&block.column(t).into_owned()))
                .exp();
                want += nb_log_pmf(data.counts[(i, t)] as u64, params.dispersions[i], mu).unwrap();
            }
        }
        assert_abs_diff_eq!(got, want, epsilon = 1e-10);
    }

    #[test]
    fn full_log_likelihood_constant_case() {
        // 1 neuron, T = 2, counts 0, r = 1, mean 1 → 2·log(1/2)
        let counts = DMatrix::from_row_slice(1, 2, &[0, 0]);
        let data = CountMatrix::new(counts, vec!["a".into()], 1.0).unwrap();
        let params = SubjectParams {
            baselines: DVector::zeros(1),
            loadings: DMatrix::zeros(1, 0),
            dispersions: DVector::from_row_slice(&[1.0]),
            labels: vec![0],
        };
        let mut blocks = BTreeMap::new();
        blocks.insert(0, DMatrix::zeros(1, 2));
        let latents = LatentState { blocks };
        assert_abs_diff_eq!(
            full_log_likelihood(&data, &params, &latents).unwrap(),
            2.0 * 0.5f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn full_log_likelihood_row_permutation_invariant() {
        let (data, params, latents) = tiny_setup();
        let base = full_log_likelihood(&data, &params, &latents).unwrap();
        // swap the two neurons everywhere
        let counts = DMatrix::from_fn(2, 3, |i, j| data.counts[(1 - i, j)]);
        let data2 = CountMatrix::new(counts, vec!["b".into(), "a".into()], 1.0).unwrap();
        let params2 = SubjectParams {
            baselines: DVector::from_row_slice(&[params.baselines[1], params.baselines[0]]),
            loadings: DMatrix::from_row_slice(
                2,
                1,
                &[params.loadings[(1, 0)], params.loadings[(0, 0)]],
            ),
            dispersions: DVector::from_row_slice(&[
                params.dispersions[1],
                params.dispersions[0],
            ]),
            labels: vec![0, 0],
        };
        let perm = full_log_likelihood(&data2, &params2, &latents).unwrap();
        assert_abs_diff_eq!(base, perm, epsilon = 1e-12);
    }

    #[test]
    fn stack_unstack_roundtrip() {
        let mut blocks = BTreeMap::new();
        blocks.insert(2, DMatrix::from_row_slice(2, 3, &[1., 2., 3., 4., 5., 6.]));
        blocks.insert(5, DMatrix::from_row_slice(2, 3, &[7., 8., 9., 1., 2., 3.]));
        let latents = LatentState { blocks };
        assert_eq!(latents.dim(), 4);
        assert_eq!(latents.offset(5), Some(2));
        let stacked = latents.stack();
        let back = latents.unstack(&stacked).unwrap();
        assert_eq!(latents, back);
    }

    #[test]
    fn zeta_default_matches_three_cluster_rule() {
        // P(k ≤ 3) = 1 − (1 − ζ)³ = 0.8
        let z = zeta_for_expected_clusters(3);
        assert_abs_diff_eq!(1.0 - (1.0 - z).powi(3), 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(z, 0.415, epsilon = 5e-4);
    }

    #[test]
    fn count_matrix_rejects_bad_shapes() {
        assert!(CountMatrix::new(DMatrix::zeros(1, 1), vec!["a".into()], 1.0).is_err());
        assert!(CountMatrix::new(DMatrix::zeros(1, 2), vec![], 1.0).is_err());
    }
}
