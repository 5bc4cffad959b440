//! Gaussian state-space machinery: forward filter and backward sampler
//! with time-varying observation precisions and state-indexed dynamics.
//!
//! All neurons observe the same stacked state within a time bin, so the
//! measurement update runs in information form: one D×D solve per bin
//! after accumulating the per-neuron precision contributions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::model::LinearDynamics;
use crate::numeric::{chol_spd, sample_mvn, symmetrize};
use crate::{Error, Result};

/// Gaussian SSM with per-time emissions ŷ_it ~ N(o_i + h_i' X̃_t, ω_it⁻¹)
/// and transitions X̃_{t+1} = b_t + A_t X̃_t + N(0, Q_t).
///
/// `designs` and `offsets` hold either one entry (shared across time) or
/// one entry per bin; `transitions` holds either one entry or T−1.
#[derive(Debug, Clone)]
pub struct GaussianSsm {
    /// n×D design matrices; row i carries neuron i's loading.
    pub designs: Vec<DMatrix<f64>>,
    /// Per-neuron additive offsets.
    pub offsets: Vec<DVector<f64>>,
    /// n×T observation precisions ω_it ≥ 0 (zero = vacuous observation).
    pub precisions: DMatrix<f64>,
    /// Dynamics applied on the step t → t+1.
    pub transitions: Vec<LinearDynamics>,
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
    /// Diagonal jitter added before each Cholesky.
    pub jitter: f64,
}

/// Filtered and one-step predictive moments at one time index.
#[derive(Debug, Clone)]
pub struct FilterStep {
    pub pred_mean: DVector<f64>,
    pub pred_cov: DMatrix<f64>,
    pub filt_mean: DVector<f64>,
    pub filt_cov: DMatrix<f64>,
}

impl GaussianSsm {
    pub fn t(&self) -> usize {
        self.precisions.ncols()
    }

    pub fn dim(&self) -> usize {
        self.init_mean.len()
    }

    fn design(&self, t: usize) -> Result<&DMatrix<f64>> {
        broadcast(&self.designs, t, self.t(), "design")
    }

    fn offset(&self, t: usize) -> Result<&DVector<f64>> {
        broadcast(&self.offsets, t, self.t(), "offset")
    }

    /// Transition used on the step t → t+1 (0-indexed t in 0..T−1).
    fn transition(&self, t: usize) -> Result<&LinearDynamics> {
        broadcast(&self.transitions, t, self.t().saturating_sub(1), "transition")
    }

    pub fn validate(&self, y_hat: &DMatrix<f64>) -> Result<()> {
        if self.t() < 1 {
            return Err(Error::Shape("ssm needs at least one time bin".into()));
        }
        if y_hat.shape() != self.precisions.shape() {
            return Err(Error::Shape(format!(
                "effective observations {:?} vs precisions {:?}",
                y_hat.shape(),
                self.precisions.shape()
            )));
        }
        let d = self.dim();
        for (t, m) in self.designs.iter().enumerate() {
            if m.ncols() != d || m.nrows() != self.precisions.nrows() {
                return Err(Error::Shape(format!("design {t} shaped {:?}", m.shape())));
            }
        }
        if self.precisions.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Domain("negative observation precision".into()));
        }
        Ok(())
    }
}

fn broadcast<'a, M>(items: &'a [M], t: usize, full: usize, what: &str) -> Result<&'a M> {
    match items.len() {
        1 => Ok(&items[0]),
        n if n == full => Ok(&items[t]),
        n => Err(Error::Shape(format!(
            "{what} series has {n} entries, expected 1 or {full}"
        ))),
    }
}

/// Forward pass: filtered moments p(X̃_t | ŷ_{1:t}) for every t, plus the
/// one-step predictive moments needed by the backward sampler.
pub fn forward_filter(model: &GaussianSsm, y_hat: &DMatrix<f64>) -> Result<Vec<FilterStep>> {
    model.validate(y_hat)?;
    let t_len = model.t();
    let n = model.precisions.nrows();
    let mut steps = Vec::with_capacity(t_len);

    let mut pred_mean = model.init_mean.clone();
    let mut pred_cov = model.init_cov.clone();

    for t in 0..t_len {
        // Information-form measurement update over all neurons in the bin.
        let chol_pred = chol_spd(pred_cov.clone(), model.jitter, &format!("predictive cov at t={t}"))
            .map_err(|e| tag_time(e, t))?;
        let mut lambda = chol_pred.inverse();
        let mut eta = &lambda * &pred_mean;
        let design = model.design(t)?;
        let offset = model.offset(t)?;
        for i in 0..n {
            let w = model.precisions[(i, t)];
            if w > 0.0 {
                let h = design.row(i).transpose();
                let resid = y_hat[(i, t)] - offset[i];
                eta.axpy(w * resid, &h, 1.0);
                lambda.ger(w, &h, &h, 1.0);
            }
        }
        symmetrize(&mut lambda);
        let chol_post = chol_spd(lambda, model.jitter, &format!("posterior precision at t={t}"))
            .map_err(|e| tag_time(e, t))?;
        let filt_mean = chol_post.solve(&eta);
        let mut filt_cov = chol_post.inverse();
        symmetrize(&mut filt_cov);

        steps.push(FilterStep {
            pred_mean: pred_mean.clone(),
            pred_cov: pred_cov.clone(),
            filt_mean: filt_mean.clone(),
            filt_cov: filt_cov.clone(),
        });

        if t + 1 < t_len {
            let dyn_t = model.transition(t)?;
            pred_mean = &dyn_t.bias + &dyn_t.transition * &filt_mean;
            pred_cov = &dyn_t.transition * &filt_cov * dyn_t.transition.transpose()
                + &dyn_t.noise_cov;
            symmetrize(&mut pred_cov);
        }
    }
    Ok(steps)
}

/// Backward pass: one exact joint draw of X̃_{1:T} | ŷ_{1:T} as a D×T matrix.
pub fn backward_sample<R: Rng + ?Sized>(
    steps: &[FilterStep],
    model: &GaussianSsm,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let t_len = steps.len();
    if t_len == 0 {
        return Err(Error::Shape("empty filter output".into()));
    }
    let d = model.dim();
    let mut draw = DMatrix::zeros(d, t_len);

    let last = &steps[t_len - 1];
    let chol = chol_spd(last.filt_cov.clone(), model.jitter, "filtered cov at t=T")?;
    draw.set_column(t_len - 1, &sample_mvn(&last.filt_mean, &chol.l(), rng));

    for t in (0..t_len - 1).rev() {
        let step = &steps[t];
        let next = &steps[t + 1];
        let dyn_t = model.transition(t)?;
        // Gain G = P_t A' (pred_cov_{t+1})⁻¹ via the predictive Cholesky.
        let chol_pred = chol_spd(next.pred_cov.clone(), model.jitter, &format!("predictive cov at t={}", t + 1))
            .map_err(|e| tag_time(e, t + 1))?;
        let ap = &dyn_t.transition * &step.filt_cov; // A P_t
        let gain = chol_pred.solve(&ap).transpose(); // P_t A' Σ⁻¹
        let x_next = draw.column(t + 1).into_owned();
        let mean = &step.filt_mean + &gain * (x_next - &next.pred_mean);
        let mut cov = &step.filt_cov - &gain * ap;
        symmetrize(&mut cov);
        let chol = chol_spd(cov, model.jitter, &format!("smoothing cov at t={t}"))
            .map_err(|e| tag_time(e, t))?;
        draw.set_column(t, &sample_mvn(&mean, &chol.l(), rng));
    }
    Ok(draw)
}

fn tag_time(e: Error, t: usize) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("t={t}: {msg}")),
        other => other,
    }
}
