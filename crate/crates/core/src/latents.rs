//! Latent-trajectory update: Pólya-Gamma augmentation followed by an exact
//! joint FFBS draw of the stacked trajectories, identifiability projection,
//! signed-permutation alignment, and the Poisson-model MH correction.
//!
//! The projection and alignment act on each cluster block and are paired
//! with exact counter-transformations of the member neurons' baselines and
//! loadings, so the likelihood is untouched: row means move into d_i, the
//! factor-row rotation and any signed permutation move into c_i. The
//! population-baseline row is centered but excluded from the rotation —
//! mixing it into the factor rows admits no loading counter-transform that
//! keeps c̃_i = (1, c_i')'.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::model::{
    log_mean, nb_log_pmf_ln, CountMatrix, DynamicsSet, LatentState, ModelFlavor, StateChain,
    SubjectParams,
};
use crate::numeric::poisson_log_pmf_ln;
use crate::polya_gamma::PolyaGamma;
use crate::ssm::{backward_sample, forward_filter, GaussianSsm};
use crate::{Error, Result};

/// Pólya-Gamma augmentation of the count likelihood for the latent update.
#[derive(Debug, Clone)]
pub struct Augmentation {
    /// ω_it ~ PG(r_i + y_it, d_i + c̃_i'x̃_t − log r_i), all > 0.
    pub omega: DMatrix<f64>,
    /// κ_it = (y_it − r_i)/2 + ω_it (log r_i − d_i).
    pub kappa: DMatrix<f64>,
    /// Effective observations ŷ_it = κ_it / ω_it.
    pub y_hat: DMatrix<f64>,
}

/// Draw the PG variables and transformed responses for every (i, t).
pub fn augment_for_latents<R: Rng + ?Sized>(
    data: &CountMatrix,
    params: &SubjectParams,
    latents: &LatentState,
    pg: &PolyaGamma,
    rng: &mut R,
) -> Result<Augmentation> {
    let n = data.n();
    let t_len = data.t();
    let mut omega = DMatrix::zeros(n, t_len);
    let mut kappa = DMatrix::zeros(n, t_len);
    let mut y_hat = DMatrix::zeros(n, t_len);
    for i in 0..n {
        let block = latents
            .blocks
            .get(&params.labels[i])
            .ok_or_else(|| Error::Domain(format!("neuron {i} labels a dead cluster")))?;
        let c_tilde = params.c_tilde(i);
        let d_i = params.baselines[i];
        let r = params.dispersions[i];
        let ln_r = r.ln();
        for t in 0..t_len {
            let lin = log_mean(d_i, &c_tilde, &block.column(t).into_owned())?;
            if !lin.is_finite() {
                return Err(Error::Numerical(format!("non-finite log-mean at ({i}, {t})")));
            }
            let y = data.counts[(i, t)] as f64;
            let w = pg.draw(r + y, lin - ln_r, rng)?;
            let k = 0.5 * (y - r) + w * (ln_r - d_i);
            omega[(i, t)] = w;
            kappa[(i, t)] = k;
            y_hat[(i, t)] = k / w;
        }
    }
    Ok(Augmentation { omega, kappa, y_hat })
}

/// Assemble the Gaussian SSM whose exact draw is the latent full
/// conditional: neuron i's design row carries c̃_i at its cluster's block
/// offset, offsets are zero (d_i is folded into κ), precisions are ω.
fn latent_ssm(
    params: &SubjectParams,
    latents: &LatentState,
    chain: &StateChain,
    dynamics: &DynamicsSet,
    aug: &Augmentation,
    jitter: f64,
) -> Result<GaussianSsm> {
    let n = params.n();
    let t_len = latents.t();
    let dim = latents.dim();
    if dynamics.dim() != dim {
        return Err(Error::Shape(format!(
            "dynamics dimension {} vs stacked latents {}",
            dynamics.dim(),
            dim
        )));
    }
    if chain.xi.len() != t_len {
        return Err(Error::Shape("state sequence length off data".into()));
    }
    let rows = latents.p() + 1;
    let mut design = DMatrix::zeros(n, dim);
    for i in 0..n {
        let off = latents
            .offset(params.labels[i])
            .ok_or_else(|| Error::Domain(format!("neuron {i} labels a dead cluster")))?;
        let c_tilde = params.c_tilde(i);
        for j in 0..rows {
            design[(i, off + j)] = c_tilde[j];
        }
    }
    let transitions = chain.xi[..t_len - 1]
        .iter()
        .map(|&l| {
            dynamics
                .states
                .get(l)
                .cloned()
                .ok_or_else(|| Error::Domain(format!("no dynamics for state {l}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GaussianSsm {
        designs: vec![design],
        offsets: vec![DVector::zeros(n)],
        precisions: aug.omega.clone(),
        transitions,
        init_mean: DVector::zeros(dim),
        init_cov: DMatrix::identity(dim, dim),
        jitter,
    })
}

/// One exact joint draw of the stacked trajectories from the PG-augmented
/// full conditional, split back into cluster blocks. No projection.
pub fn draw_latents_ffbs<R: Rng + ?Sized>(
    data: &CountMatrix,
    params: &SubjectParams,
    latents: &LatentState,
    chain: &StateChain,
    dynamics: &DynamicsSet,
    pg: &PolyaGamma,
    jitter: f64,
    rng: &mut R,
) -> Result<LatentState> {
    let aug = augment_for_latents(data, params, latents, pg, rng)?;
    let model = latent_ssm(params, latents, chain, dynamics, &aug, jitter)?;
    let steps = forward_filter(&model, &aug.y_hat)?;
    let stacked = backward_sample(&steps, &model, rng)?;
    latents.unstack(&stacked)
}

/// Result of the identifiability projection of one block.
#[derive(Debug, Clone)]
pub struct ProjectedBlock {
    /// Centered block with rotated factor rows.
    pub block: DMatrix<f64>,
    /// Removed row means (length p+1); absorb into d_i as c̃_i' · means.
    pub row_means: DVector<f64>,
    /// p×p orthogonal rotation applied to the factor rows; absorb into
    /// c_i as c_i ← R c_i.
    pub rotation: DMatrix<f64>,
}

/// Project one (p+1)×T block onto the identifiability constraints: every
/// row zero-mean, factor-row Gram diagonal with descending eigenvalues.
pub fn project_identifiability(block: &DMatrix<f64>) -> Result<ProjectedBlock> {
    let rows = block.nrows();
    let t_len = block.ncols();
    if rows < 1 || t_len <= rows {
        return Err(Error::Degenerate(format!(
            "projection needs T > p+1, got block {rows}x{t_len}"
        )));
    }
    if block.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite latent block".into()));
    }
    let p = rows - 1;
    let mut centered = block.clone();
    let mut row_means = DVector::zeros(rows);
    for j in 0..rows {
        let m = centered.row(j).sum() / t_len as f64;
        row_means[j] = m;
        centered.row_mut(j).add_scalar_mut(-m);
    }
    if p == 0 {
        return Ok(ProjectedBlock {
            block: centered,
            row_means,
            rotation: DMatrix::identity(0, 0),
        });
    }
    let factors = centered.rows(1, p).into_owned();
    let gram = &factors * factors.transpose();
    let eig = nalgebra::SymmetricEigen::new(gram);
    // Descending eigenvalue order with a deterministic sign convention
    // (largest-magnitude component of each eigenvector positive).
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut rotation = DMatrix::zeros(p, p);
    for (new_row, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let mut lead = 0;
        for j in 1..p {
            if col[j].abs() > col[lead].abs() {
                lead = j;
            }
        }
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..p {
            rotation[(new_row, j)] = sign * col[j];
        }
    }
    let rotated = &rotation * factors;
    let mut out = centered;
    out.rows_mut(1, p).copy_from(&rotated);
    Ok(ProjectedBlock {
        block: out,
        row_means,
        rotation,
    })
}

/// A signed permutation of the factor rows: output row j is
/// `signs[j] · input row perm[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedPermutation {
    pub perm: Vec<usize>,
    pub signs: Vec<f64>,
}

impl SignedPermutation {
    pub fn identity(p: usize) -> Self {
        SignedPermutation {
            perm: (0..p).collect(),
            signs: vec![1.0; p],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.signs.iter().all(|&s| s > 0.0)
            && self.perm.iter().enumerate().all(|(j, &src)| j == src)
    }

    /// Dense p×p orthogonal matrix form.
    pub fn as_matrix(&self) -> DMatrix<f64> {
        let p = self.perm.len();
        let mut m = DMatrix::zeros(p, p);
        for j in 0..p {
            m[(j, self.perm[j])] = self.signs[j];
        }
        m
    }
}

/// Search all 2^p·p! signed permutations of the factor rows for the one
/// minimizing the Frobenius distance to the reference block. Row 0 is
/// excluded. Returns the transformed block and the applied transform.
pub fn align_signed_permutation(
    block: &DMatrix<f64>,
    reference: &DMatrix<f64>,
) -> (DMatrix<f64>, SignedPermutation) {
    let rows = block.nrows();
    let p = rows - 1;
    if p == 0 || block.shape() != reference.shape() {
        return (block.clone(), SignedPermutation::identity(p));
    }
    assert!(p <= 9, "factorial search unreasonable for p = {p}");
    // For target row j fed from source row s, the optimal sign is the sign
    // of the inner product; cost decomposes over rows.
    let mut cost = DMatrix::zeros(p, p);
    let mut sign = DMatrix::zeros(p, p);
    for j in 0..p {
        let ref_row = reference.row(j + 1);
        let ref_sq = ref_row.dot(&ref_row);
        for s in 0..p {
            let src_row = block.row(s + 1);
            let ip = src_row.dot(&ref_row);
            cost[(j, s)] = src_row.dot(&src_row) + ref_sq - 2.0 * ip.abs();
            sign[(j, s)] = if ip < 0.0 { -1.0 } else { 1.0 };
        }
    }
    let mut best_cost = f64::INFINITY;
    let mut best: Vec<usize> = (0..p).collect();
    let mut perm: Vec<usize> = (0..p).collect();
    permute(&mut perm, 0, &mut |candidate| {
        let c: f64 = (0..p).map(|j| cost[(j, candidate[j])]).sum();
        if c < best_cost {
            best_cost = c;
            best = candidate.to_vec();
        }
    });
    let transform = SignedPermutation {
        signs: (0..p).map(|j| sign[(j, best[j])]).collect(),
        perm: best,
    };
    let mut out = block.clone();
    for j in 0..p {
        let src = block.row(transform.perm[j] + 1) * transform.signs[j];
        out.row_mut(j + 1).copy_from(&src);
    }
    (out, transform)
}

fn permute(perm: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == perm.len() {
        visit(perm);
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permute(perm, k + 1, visit);
        perm.swap(k, i);
    }
}

/// Project and align every block in place, counter-transforming the member
/// neurons' baselines and loadings so the likelihood is unchanged. Blocks
/// with an entry in `align_refs` align to it; others are only projected.
pub fn apply_identifiability(
    latents: &mut LatentState,
    params: &mut SubjectParams,
    align_refs: &BTreeMap<usize, DMatrix<f64>>,
) -> Result<()> {
    let p = latents.p();
    let ids: Vec<usize> = latents.blocks.keys().cloned().collect();
    for id in ids {
        let projected = project_identifiability(&latents.blocks[&id])?;
        let (aligned, transform) = match align_refs.get(&id) {
            Some(reference) => align_signed_permutation(&projected.block, reference),
            None => (projected.block.clone(), SignedPermutation::identity(p)),
        };
        // d_i += c̃_i' row_means, then c_i ← M R c_i
        let combined = if p > 0 {
            transform.as_matrix() * &projected.rotation
        } else {
            DMatrix::identity(0, 0)
        };
        for i in 0..params.n() {
            if params.labels[i] == id {
                params.baselines[i] += projected.row_means[0];
                if p > 0 {
                    let c = params.loadings.row(i).transpose();
                    params.baselines[i] += c.dot(&projected.row_means.rows(1, p).into_owned());
                    let c_new = &combined * c;
                    params.loadings.row_mut(i).copy_from(&c_new.transpose());
                }
            }
        }
        latents.blocks.insert(id, aligned);
    }
    Ok(())
}

/// Metropolis-Hastings correction for the Poisson model: the NB-augmented
/// FFBS draw proposes, the Poisson/NB likelihood ratio decides.
///
/// The augmentation kernel is reversible for the NB posterior, so the
/// proposal density ratio reduces to the NB likelihood ratio evaluated at
/// the tuning dispersion.
pub fn poisson_mh_correct<R: Rng + ?Sized>(
    proposal: &LatentState,
    current: &LatentState,
    data: &CountMatrix,
    params: &SubjectParams,
    tuning_r: f64,
    rng: &mut R,
) -> Result<(LatentState, bool)> {
    if !(tuning_r > 0.0) {
        return Err(Error::Domain(format!("tuning_r = {tuning_r} not positive")));
    }
    let mut log_ratio = 0.0;
    for i in 0..data.n() {
        let c_tilde = params.c_tilde(i);
        let d_i = params.baselines[i];
        let block_new = proposal
            .blocks
            .get(&params.labels[i])
            .ok_or_else(|| Error::Domain(format!("neuron {i} labels a dead cluster")))?;
        let block_old = current
            .blocks
            .get(&params.labels[i])
            .ok_or_else(|| Error::Domain(format!("neuron {i} labels a dead cluster")))?;
        for t in 0..data.t() {
            let y = data.counts[(i, t)] as u64;
            let ln_new = log_mean(d_i, &c_tilde, &block_new.column(t).into_owned())?;
            let ln_old = log_mean(d_i, &c_tilde, &block_old.column(t).into_owned())?;
            log_ratio += poisson_log_pmf_ln(y, ln_new) - poisson_log_pmf_ln(y, ln_old)
                + nb_log_pmf_ln(y, tuning_r, ln_old)
                - nb_log_pmf_ln(y, tuning_r, ln_new);
        }
    }
    let accept = log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio;
    Ok(if accept {
        (proposal.clone(), true)
    } else {
        (current.clone(), false)
    })
}

/// Full latent step: augment, FFBS, optional Poisson MH, then projection
/// and alignment with the loading/baseline counter-transformations.
/// Returns the new latents and the MH acceptance flag (true for NB).
pub fn sample_latents<R: Rng + ?Sized>(
    data: &CountMatrix,
    params: &mut SubjectParams,
    latents: &LatentState,
    chain: &StateChain,
    dynamics: &DynamicsSet,
    flavor: ModelFlavor,
    align_refs: &BTreeMap<usize, DMatrix<f64>>,
    pg: &PolyaGamma,
    jitter: f64,
    rng: &mut R,
) -> Result<(LatentState, bool)> {
    let proposal = draw_latents_ffbs(data, params, latents, chain, dynamics, pg, jitter, rng)?;
    let (mut accepted, flag) = match flavor {
        ModelFlavor::NegBinomial => (proposal, true),
        ModelFlavor::Poisson { tuning_r } => {
            poisson_mh_correct(&proposal, latents, data, params, tuning_r, rng)?
        }
    };
    if flag {
        apply_identifiability(&mut accepted, params, align_refs)?;
    }
    Ok((accepted, flag))
}
