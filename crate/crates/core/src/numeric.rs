//! Shared numeric helpers: log-space arithmetic, special functions,
//! SPD factorization with jitter, and matrix-variate random draws.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::{Error, Result};

pub use statrs::function::erf::erfc;
pub use statrs::function::gamma::{digamma, ln_gamma};

/// log(1 + exp(x)) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// log Σ exp(x_i); returns −∞ for an empty or all-−∞ input.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Trigamma ψ'(x) via recurrence shift and asymptotic series.
pub fn trigamma(x: f64) -> f64 {
    let mut x = x;
    let mut acc = 0.0;
    while x < 6.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // 1/x + 1/2x² + 1/6x³ − 1/30x⁵ + 1/42x⁷ − 1/30x⁹
    acc + inv
        + 0.5 * inv2
        + inv2 * inv * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 / 30.0)))
}

/// Standard normal log CDF, safe in the far left tail only down to erfc's
/// underflow (~ -38); callers treat −∞ as zero mass.
pub fn norm_cdf_ln(x: f64) -> f64 {
    (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln()
}

/// Poisson log-pmf with the mean supplied on log scale.
pub fn poisson_log_pmf_ln(y: u64, ln_mu: f64) -> f64 {
    y as f64 * ln_mu - ln_mu.exp() - ln_gamma(y as f64 + 1.0)
}

/// Symmetrize in place: M ← (M + M')/2.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky of an SPD matrix, retrying once with `jitter`·I added.
pub fn chol_spd(mut m: DMatrix<f64>, jitter: f64, what: &str) -> Result<Cholesky<f64, Dyn>> {
    symmetrize(&mut m);
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    for i in 0..m.nrows() {
        m[(i, i)] += jitter;
    }
    Cholesky::new(m).ok_or_else(|| {
        Error::Numerical(format!("{what}: not positive definite after jitter {jitter:.1e}"))
    })
}

/// Draw N(mean, L L') given the lower Cholesky factor.
pub fn sample_mvn<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    chol_l: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + chol_l * z
}

pub fn draw_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(shape, scale)
        .map_err(|e| Error::Domain(format!("gamma({shape}, {scale}): {e}")))?;
    Ok(g.sample(rng))
}

/// Dirichlet draw via normalized gammas; the result sums to one exactly
/// up to the final division.
pub fn draw_dirichlet<R: Rng + ?Sized>(alphas: &[f64], rng: &mut R) -> Result<DVector<f64>> {
    let mut v = DVector::zeros(alphas.len());
    for (i, &a) in alphas.iter().enumerate() {
        if a <= 0.0 {
            return Err(Error::Domain(format!("dirichlet concentration {a} <= 0")));
        }
        v[i] = draw_gamma(a, 1.0, rng)?;
    }
    let s = v.sum();
    if s <= 0.0 {
        // All gammas underflowed; fall back to the single largest coordinate.
        let i = alphas
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        v.fill(0.0);
        v[i] = 1.0;
        return Ok(v);
    }
    Ok(v / s)
}

/// Inverse-Wishart draw Q ~ IW(Ψ, ν) via the Bartlett decomposition of
/// Q⁻¹ ~ Wishart(Ψ⁻¹, ν). Requires ν > dim − 1.
pub fn draw_inverse_wishart<R: Rng + ?Sized>(
    psi: &DMatrix<f64>,
    dof: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let d = psi.nrows();
    if dof <= d as f64 - 1.0 {
        return Err(Error::Domain(format!(
            "inverse-Wishart dof {dof} <= dim - 1 = {}",
            d - 1
        )));
    }
    let chol_psi = chol_spd(psi.clone(), 1e-12, "inverse-Wishart scale")?;
    let psi_inv = chol_psi.inverse();
    let l = chol_spd(psi_inv, 1e-12, "inverse-Wishart inverse scale")?.l();
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        a[(i, i)] = draw_gamma(0.5 * (dof - i as f64), 2.0, rng)?.sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let la = l * a;
    let la_inv = la
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| Error::Numerical("singular Bartlett factor".into()))?;
    let mut q = la_inv.transpose() * la_inv;
    symmetrize(&mut q);
    Ok(q)
}

/// Matrix-normal draw B ~ MN(mean, row_cov, col_cov) given lower Cholesky
/// factors of the two covariances.
pub fn draw_matrix_normal<R: Rng + ?Sized>(
    mean: &DMatrix<f64>,
    chol_row: &DMatrix<f64>,
    chol_col: &DMatrix<f64>,
    rng: &mut R,
) -> DMatrix<f64> {
    let (m, n) = mean.shape();
    let e = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + chol_row * e * chol_col.transpose()
}

/// One univariate slice-sampling update (stepping out + shrinkage) for an
/// unnormalized log density. Exact and tuning-robust; `width` only sets
/// the initial bracket.
pub fn slice_sample_1d<R: Rng + ?Sized>(
    log_density: impl Fn(f64) -> f64,
    x0: f64,
    width: f64,
    rng: &mut R,
) -> f64 {
    let ly0 = log_density(x0);
    let slice = ly0 - rng.sample::<f64, _>(rand_distr::Exp1);
    let mut lo = x0 - width * rng.random::<f64>();
    let mut hi = lo + width;
    for _ in 0..64 {
        if log_density(lo) <= slice {
            break;
        }
        lo -= width;
    }
    for _ in 0..64 {
        if log_density(hi) <= slice {
            break;
        }
        hi += width;
    }
    loop {
        let x = lo + (hi - lo) * rng.random::<f64>();
        if log_density(x) > slice {
            return x;
        }
        if x < x0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo < 1e-14 {
            return x0;
        }
    }
}

/// Maximum-score assignment (Hungarian algorithm on the negated scores).
/// Returns `assign` with `assign[row] = col`; the matrix must be square.
pub fn assignment_max(score: &DMatrix<f64>) -> Vec<usize> {
    let n = score.nrows();
    assert_eq!(n, score.ncols(), "assignment matrix must be square");
    if n == 0 {
        return Vec::new();
    }
    // Jonker–Volgenant style shortest augmenting paths on cost = -score,
    // with 1-based sentinel row/col 0.
    let cost = |i: usize, j: usize| -score[(i - 1, j - 1)];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut match_col = vec![0usize; n + 1]; // col -> row
    for i in 1..=n {
        match_col[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = match_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[match_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if match_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            match_col[j0] = match_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if match_col[j] > 0 {
            assign[match_col[j] - 1] = j - 1;
        }
    }
    assign
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softplus_limits() {
        assert_abs_diff_eq!(softplus(0.0), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(softplus(50.0), 50.0, epsilon = 1e-12);
        assert!(softplus(-50.0) > 0.0 && softplus(-50.0) < 1e-20);
    }

    #[test]
    fn logsumexp_matches_direct() {
        let xs = [-1.0f64, 2.5, 0.3];
        let direct: f64 = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert_abs_diff_eq!(logsumexp(&xs), direct, epsilon = 1e-12);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert_eq!(
            logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn trigamma_matches_series() {
        // ψ'(x) = Σ_{k≥0} 1/(x+k)²
        for &x in &[0.3, 1.0, 2.7, 11.0] {
            let direct: f64 = (0..2_000_000).map(|k| (x + k as f64).powi(-2)).sum();
            assert_abs_diff_eq!(trigamma(x), direct, epsilon = 1e-6);
        }
    }

    #[test]
    fn inverse_wishart_mean() {
        // E[IW(Ψ, ν)] = Ψ/(ν − d − 1)
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let psi = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let dof = 8.0;
        let mut acc = DMatrix::zeros(2, 2);
        let n = 40_000;
        for _ in 0..n {
            acc += draw_inverse_wishart(&psi, dof, &mut rng).unwrap();
        }
        acc /= n as f64;
        let expect = &psi / (dof - 3.0);
        assert!((acc - expect).abs().max() < 0.02);
    }

    #[test]
    fn matrix_normal_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mean = DMatrix::zeros(2, 2);
        let row = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]);
        let col = DMatrix::from_row_slice(2, 2, &[0.8, 0.0, -0.2, 0.6]);
        let n = 200_000;
        // Check Cov(vec(B)) = (col col') ⊗ (row row') on two entries.
        let mut acc00_00 = 0.0;
        let mut acc00_10 = 0.0;
        for _ in 0..n {
            let b = draw_matrix_normal(&mean, &row, &col, &mut rng);
            acc00_00 += b[(0, 0)] * b[(0, 0)];
            acc00_10 += b[(0, 0)] * b[(1, 0)];
        }
        let rr = &row * row.transpose();
        let cc = &col * col.transpose();
        assert_abs_diff_eq!(acc00_00 / n as f64, cc[(0, 0)] * rr[(0, 0)], epsilon = 0.02);
        assert_abs_diff_eq!(acc00_10 / n as f64, cc[(0, 0)] * rr[(1, 0)], epsilon = 0.02);
    }

    #[test]
    fn assignment_recovers_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=6 {
            let score = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>());
            let got = assignment_max(&score);
            // brute force
            let mut best = f64::NEG_INFINITY;
            let mut best_perm = Vec::new();
            let mut perm: Vec<usize> = (0..n).collect();
            permute_all(&mut perm, 0, &mut |p| {
                let s: f64 = (0..n).map(|i| score[(i, p[i])]).sum();
                if s > best {
                    best = s;
                    best_perm = p.to_vec();
                }
            });
            let got_score: f64 = (0..n).map(|i| score[(i, got[i])]).sum();
            assert_abs_diff_eq!(got_score, best, epsilon = 1e-12);
        }
    }

    fn permute_all(perm: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == perm.len() {
            f(perm);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            permute_all(perm, k + 1, f);
            perm.swap(k, i);
        }
    }
}
