//! Per-neuron updates: baseline d_i and loading c_i via Pólya-Gamma
//! augmented Bayesian linear regression, and dispersion r_i via the
//! compound-Poisson (Chinese-restaurant-table) Gibbs step.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::model::{CountMatrix, LatentState, SubjectParams};
use crate::model::nb_log_pmf_ln;
use crate::numeric::{chol_spd, digamma, trigamma};
use crate::polya_gamma::PolyaGamma;
use crate::{Error, Result};

/// Count bound above which the CRT Bernoulli sum switches to its normal
/// approximation.
const CRT_EXACT_MAX: u64 = 10_000;

/// Latent table counts of the dispersion step for one neuron.
#[derive(Debug, Clone)]
pub struct CrtState {
    /// Per-bin table counts L_t, each in [0, y_it].
    pub tables: Vec<u64>,
    /// Success probabilities p_it = μ_it/(μ_it + r_i).
    pub probs: Vec<f64>,
}

/// Joint draw of (d_i, c_i) from the PG-augmented conjugate Gaussian
/// posterior with prior d_i ~ N(0, σ_d²), c_i ~ N(0, I_p).
///
/// Each bin contributes an effective observation
/// ŷ_it ~ N((1, x_t')(d_i, c_i')', ω_it⁻¹) with
/// ω_it ~ PG(r_i + y_it, μ_t + (1, x_t')(d_i, c_i')' − log r_i).
pub fn sample_baseline_loading<R: Rng + ?Sized>(
    i: usize,
    data: &CountMatrix,
    latents: &LatentState,
    params: &SubjectParams,
    baseline_var: f64,
    pg: &PolyaGamma,
    rng: &mut R,
) -> Result<(f64, DVector<f64>)> {
    let block = latents
        .blocks
        .get(&params.labels[i])
        .ok_or_else(|| Error::Domain(format!("neuron {i} labels a dead cluster")))?;
    let t_len = data.t();
    let p = params.p();
    let r = params.dispersions[i];
    let ln_r = r.ln();
    let d_i = params.baselines[i];
    let c_i = params.loadings.row(i).transpose();

    // Posterior precision Λ = prior⁻¹ + Σ ω u u', information Σ κ u with
    // u_t = (1, x_t')' and κ_t = (y − r)/2 + ω(log r − μ_t).
    let mut lambda = DMatrix::zeros(p + 1, p + 1);
    lambda[(0, 0)] = 1.0 / baseline_var;
    for j in 0..p {
        lambda[(j + 1, j + 1)] = 1.0;
    }
    let mut info = DVector::zeros(p + 1);
    let mut u = DVector::zeros(p + 1);
    u[0] = 1.0;
    for t in 0..t_len {
        let mu_t = block[(0, t)];
        let mut lin = d_i;
        for j in 0..p {
            u[j + 1] = block[(j + 1, t)];
            lin += c_i[j] * block[(j + 1, t)];
        }
        let y = data.counts[(i, t)] as f64;
        let tilt = mu_t + lin - ln_r;
        let omega = pg.draw(r + y, tilt, rng)?;
        let kappa = 0.5 * (y - r) + omega * (ln_r - mu_t);
        info.axpy(kappa, &u, 1.0);
        lambda.ger(omega, &u, &u, 1.0);
    }
    let chol = chol_spd(lambda, 1e-10, &format!("loading posterior for neuron {i}"))?;
    let mean = chol.solve(&info);
    // Draw via the precision factorization: θ = mean + L⁻ᵀ z.
    let z = DVector::from_fn(p + 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let theta = &mean
        + chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::Numerical("singular posterior precision".into()))?;
    Ok((theta[0], theta.rows(1, p).into_owned()))
}

/// Chinese-restaurant-table draw: L = Σ_{j=1..y} Bernoulli(r/(r+j−1)).
/// Exact for y ≤ 10⁴, normal approximation beyond.
pub fn crt_draw<R: Rng + ?Sized>(y: u64, r: f64, rng: &mut R) -> u64 {
    if y == 0 {
        return 0;
    }
    if y <= CRT_EXACT_MAX {
        // first term has probability r/r = 1
        let mut l = 1u64;
        for j in 2..=y {
            if rng.random::<f64>() < r / (r + (j - 1) as f64) {
                l += 1;
            }
        }
        l
    } else {
        let yf = y as f64;
        let mean = r * (digamma(r + yf) - digamma(r));
        let var = (mean - r * r * (trigamma(r) - trigamma(r + yf))).max(1e-12);
        let z: f64 = rng.sample(StandardNormal);
        let l = (mean + var.sqrt() * z).round();
        (l.max(1.0) as u64).min(y)
    }
}

/// Table counts and success probabilities for one neuron at the current
/// parameter values.
pub fn crt_state<R: Rng + ?Sized>(
    i: usize,
    data: &CountMatrix,
    params: &SubjectParams,
    latents: &LatentState,
    rng: &mut R,
) -> Result<CrtState> {
    let block = latents
        .blocks
        .get(&params.labels[i])
        .ok_or_else(|| Error::Domain(format!("neuron {i} labels a dead cluster")))?;
    let c_tilde = params.c_tilde(i);
    let r = params.dispersions[i];
    let t_len = data.t();
    let mut tables = Vec::with_capacity(t_len);
    let mut probs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let ln_mu = params.baselines[i] + c_tilde.dot(&block.column(t).into_owned());
        if !ln_mu.is_finite() {
            return Err(Error::Numerical(format!("non-finite log-mean at ({i}, {t})")));
        }
        let p_it = 1.0 / (1.0 + (-(ln_mu - r.ln())).exp());
        tables.push(crt_draw(data.counts[(i, t)] as u64, r, rng));
        probs.push(p_it);
    }
    Ok(CrtState { tables, probs })
}

/// Dispersion update targeting the exact full conditional
/// `π(r) ∝ r^{a0−1} e^{−h r} Π_t NB(y_it | r, μ_it)` with the means fixed.
///
/// The gamma form Gamma(a0 + ΣL_t, 1/(h − Σ log(1−p_it))) from the
/// compound-Poisson representation is exact only when the success
/// probabilities p are held fixed; here p_it = μ_it/(μ_it + r_i) moves
/// with r, and iterating that draw settles far below the true posterior
/// (verified against a quadrature oracle). The update therefore runs a
/// slice-sampling step on log r against the exact conditional; the CRT
/// table counts remain available through [`crt_draw`]/[`crt_state`].
pub fn sample_dispersion<R: Rng + ?Sized>(
    i: usize,
    data: &CountMatrix,
    params: &SubjectParams,
    latents: &LatentState,
    disp_shape: f64,
    disp_rate: f64,
    rng: &mut R,
) -> Result<f64> {
    let block = latents
        .blocks
        .get(&params.labels[i])
        .ok_or_else(|| Error::Domain(format!("neuron {i} labels a dead cluster")))?;
    let c_tilde = params.c_tilde(i);
    let r_cur = params.dispersions[i];
    let t_len = data.t();
    let mut ln_mus = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let ln_mu = params.baselines[i] + c_tilde.dot(&block.column(t).into_owned());
        if !ln_mu.is_finite() {
            return Err(Error::Numerical(format!("non-finite log-mean at ({i}, {t})")));
        }
        ln_mus.push(ln_mu);
    }
    let counts_row = data.counts.row(i);
    // density of u = log r: a0·u − h·e^u + Σ_t log NB(y_t | e^u, μ_t)
    let log_density = |u: f64| -> f64 {
        if !(-40.0..=40.0).contains(&u) {
            return f64::NEG_INFINITY;
        }
        let r = u.exp();
        let mut acc = disp_shape * u - disp_rate * r;
        for (t, &ln_mu) in ln_mus.iter().enumerate() {
            acc += nb_log_pmf_ln(counts_row[t] as u64, r, ln_mu);
        }
        acc
    };
    let u_new = crate::numeric::slice_sample_1d(log_density, r_cur.ln(), 1.0, rng);
    let draw = u_new.exp();
    if !(draw > 0.0) || !draw.is_finite() {
        return Err(Error::Numerical("dispersion update left (0, inf)".into()));
    }
    Ok(draw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn flat_setup(
        n: usize,
        t: usize,
        p: usize,
        counts: &[u32],
    ) -> (CountMatrix, SubjectParams, LatentState) {
        let data = CountMatrix::new(
            DMatrix::from_row_slice(n, t, counts),
            (0..n).map(|i| format!("n{i}")).collect(),
            1.0,
        )
        .unwrap();
        let params = SubjectParams {
            baselines: DVector::zeros(n),
            loadings: DMatrix::zeros(n, p),
            dispersions: DVector::from_element(n, 10.0),
            labels: vec![0; n],
        };
        let mut blocks = BTreeMap::new();
        blocks.insert(0, DMatrix::zeros(p + 1, t));
        (data, params, LatentState { blocks })
    }

    #[test]
    fn crt_draw_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(crt_draw(0, 2.0, &mut rng), 0);
        for _ in 0..100 {
            assert_eq!(crt_draw(1, 0.37, &mut rng), 1);
        }
    }

    #[test]
    fn crt_draw_mean_matches_analytic() {
        // E[L] = Σ_{j=1..10} 2/(1+j) at y=10, r=2
        let want: f64 = (1..=10u64).map(|j| 2.0 / (2.0 + (j - 1) as f64)).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut acc = 0u64;
        let mut sq = 0f64;
        for _ in 0..n {
            let l = crt_draw(10, 2.0, &mut rng);
            acc += l;
            sq += (l * l) as f64;
        }
        let mean = acc as f64 / n as f64;
        let var = sq / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!((mean - want).abs() < 3.0 * se, "{mean} vs {want} ± {se}");
    }

    #[test]
    fn crt_draw_bounded_and_monotone_in_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mean_small = 0.0;
        let mut mean_big = 0.0;
        for _ in 0..20_000 {
            let a = crt_draw(20, 0.5, &mut rng);
            let b = crt_draw(20, 8.0, &mut rng);
            assert!(a <= 20 && b <= 20);
            mean_small += a as f64;
            mean_big += b as f64;
        }
        assert!(mean_big > mean_small);
    }

    #[test]
    fn crt_normal_approx_tracks_exact_mean() {
        // exceed the exact-path bound so the approximation kicks in
        let y = 20_001u64;
        let r = 3.0;
        let want = r * (digamma(r + y as f64) - digamma(r));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 20_000;
        let mean = (0..n).map(|_| crt_draw(y, r, &mut rng) as f64).sum::<f64>() / n as f64;
        assert!((mean - want).abs() < 0.05 * want);
    }

    /// Exact posterior mean of r by quadrature on a log-spaced grid:
    /// prior Gamma(a0, 1/h) times the NB likelihood at fixed log-means.
    fn quadrature_posterior_mean(counts: &[u32], ln_mu: f64, a0: f64, h: f64) -> f64 {
        let lo = 1e-6f64.ln();
        let hi = 100f64.ln();
        let m = 8000;
        let mut lp = Vec::with_capacity(m);
        let mut rs = Vec::with_capacity(m);
        for j in 0..m {
            let u = lo + (hi - lo) * (j as f64 + 0.5) / m as f64;
            let r = u.exp();
            // log-grid measure: dr = r du
            let mut acc = a0 * r.ln() - h * r;
            for &y in counts {
                acc += crate::model::nb_log_pmf_ln(y as u64, r, ln_mu);
            }
            rs.push(r);
            lp.push(acc);
        }
        let norm = crate::numeric::logsumexp(&lp);
        rs.iter()
            .zip(&lp)
            .map(|(&r, &l)| r * (l - norm).exp())
            .sum()
    }

    #[test]
    fn dispersion_zero_counts_matches_quadrature() {
        // all y = 0: ΣL = 0 a.s., the proposal shape collapses to a0, and
        // the chain's stationary mean must match the exact posterior.
        let (data, mut params, mut latents) = flat_setup(1, 20, 0, &[0; 20]);
        latents.blocks.get_mut(&0).unwrap().fill(0.4);
        params.dispersions[0] = 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a0 = 2.0;
        let n = 100_000;
        let mut acc = 0.0;
        for it in 0..(n + 2000) {
            let r = sample_dispersion(0, &data, &params, &latents, a0, 1.0, &mut rng).unwrap();
            assert!(r > 0.0);
            params.dispersions[0] = r;
            if it >= 2000 {
                acc += r;
            }
        }
        let want = quadrature_posterior_mean(&[0; 20], 0.4, a0, 1.0);
        let got = acc / n as f64;
        assert!(
            (got - want).abs() < 0.05 * want,
            "chain mean {got} vs quadrature {want}"
        );
    }

    #[test]
    fn dispersion_concentrates_near_truth() {
        // data simulated with r = 10, everything else fixed at truth:
        // posterior mean of r lands in [8, 12] at T = 500 and agrees with
        // the quadrature oracle.
        use rand_distr::{Distribution, Poisson};
        let t = 500;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let true_r = 10.0;
        let mu = 3.0f64;
        let counts: Vec<u32> = (0..t)
            .map(|_| {
                let lambda = crate::numeric::draw_gamma(true_r, mu / true_r, &mut rng).unwrap();
                Poisson::new(lambda.max(1e-12)).unwrap().sample(&mut rng) as u32
            })
            .collect();
        let (data, mut params, mut latents) = flat_setup(1, t, 0, &counts);
        params.baselines[0] = mu.ln();
        latents.blocks.get_mut(&0).unwrap().fill(0.0);
        let mut r_acc = 0.0;
        let n_iter = 4_000;
        for it in 0..n_iter {
            let r = sample_dispersion(0, &data, &params, &latents, 1.0, 1.0, &mut rng).unwrap();
            params.dispersions[0] = r;
            if it >= 1000 {
                r_acc += r;
            }
        }
        let post_mean = r_acc / (n_iter - 1000) as f64;
        assert!(
            (8.0..=12.0).contains(&post_mean),
            "posterior mean {post_mean} outside [8, 12]"
        );
        let want = quadrature_posterior_mean(&counts, mu.ln(), 1.0, 1.0);
        assert!(
            (post_mean - want).abs() < 0.1 * want,
            "chain mean {post_mean} vs quadrature {want}"
        );
    }

    #[test]
    fn identical_neurons_share_full_conditionals() {
        let counts: Vec<u32> = [vec![2u32; 30], vec![2u32; 30]].concat();
        let (data, params, latents) = flat_setup(2, 30, 1, &counts);
        let pg = PolyaGamma::new(200);
        let a = sample_baseline_loading(
            0,
            &data,
            &latents,
            &params,
            1.0,
            &pg,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let b = sample_baseline_loading(
            1,
            &data,
            &latents,
            &params,
            1.0,
            &pg,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_abs_diff_eq!(a.0, b.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.1[0], b.1[0], epsilon = 1e-12);
    }

    #[test]
    fn baseline_posterior_concentrates() {
        // p=0, constant latent baseline μ, NB counts: posterior mean of d
        // approaches log(ȳ) − μ as T grows.
        use rand_distr::{Distribution, Poisson};
        let t = 500;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let true_d = 0.7f64;
        let mu_row = 0.4;
        let r = 10.0;
        let counts: Vec<u32> = (0..t)
            .map(|_| {
                let m = (true_d + mu_row).exp();
                let lambda = crate::numeric::draw_gamma(r, m / r, &mut rng).unwrap();
                Poisson::new(lambda.max(1e-12)).unwrap().sample(&mut rng) as u32
            })
            .collect();
        let (data, mut params, mut latents) = flat_setup(1, t, 0, &counts);
        latents.blocks.get_mut(&0).unwrap().fill(mu_row);
        params.dispersions[0] = r;
        let pg = PolyaGamma::new(200);
        let mut acc = 0.0;
        let n_iter = 400;
        for it in 0..n_iter {
            let (d, _) =
                sample_baseline_loading(0, &data, &latents, &params, 1.0, &pg, &mut rng).unwrap();
            params.baselines[0] = d;
            if it >= 100 {
                acc += d;
            }
        }
        let post_mean = acc / (n_iter - 100) as f64;
        let ybar = counts.iter().map(|&y| y as f64).sum::<f64>() / t as f64;
        let mle = ybar.ln() - mu_row;
        assert!(
            (post_mean - mle).abs() < 0.05,
            "posterior mean {post_mean} vs NB-intercept MLE {mle}"
        );
    }
}
