//! Kalman filter and Rauch-Tung-Striebel smoother.

use nalgebra::{DMatrix, DVector};

use super::statespace::{StateSeries, StateSpaceModel};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    /// `E[x_t | y_0..y_(t-1)]`
    pub predicted_means: Vec<DVector<f64>>,
    pub predicted_covs: Vec<DMatrix<f64>>,
    /// `E[x_t | y_0..y_t]`
    pub filtered_means: Vec<DVector<f64>>,
    pub filtered_covs: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmootherOutput {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    /// `Cov(x_t, x_(t-1) | all data)`; entry 0 pairs with the pre-sample state.
    pub cross_covs: Vec<DMatrix<f64>>,
    /// Smoothed pre-sample state `x_(-1)`.
    pub initial_mean: DVector<f64>,
    pub initial_cov: DMatrix<f64>,
    pub log_likelihood: f64,
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Inverse (or pseudo-inverse) of the innovation covariance and the step's
/// log-density contribution.
fn innovation_terms(s: &DMatrix<f64>, e: &DVector<f64>, step: usize) -> Result<(DMatrix<f64>, f64)> {
    let p = s.nrows();
    if let Some(ch) = s.clone().cholesky() {
        let logdet: f64 = 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let inv = ch.inverse();
        let quad = e.dot(&(&inv * e));
        return Ok((inv, -0.5 * (p as f64 * LN_2PI + logdet + quad)));
    }
    // Degenerate directions: the innovation must vanish along them.
    let eig = s.clone().symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    let tol = 1e-13 * scale;
    let mut inv = DMatrix::zeros(p, p);
    let mut ll = 0.0;
    for k in 0..p {
        let lambda = eig.eigenvalues[k];
        let v = eig.eigenvectors.column(k);
        let proj = v.dot(e);
        if lambda > tol {
            inv += (v * v.transpose()) / lambda;
            ll += -0.5 * (LN_2PI + lambda.ln() + proj * proj / lambda);
        } else if lambda < -tol || proj.abs() > 1e-9 * (1.0 + e.norm()) {
            return Err(Error::SingularInnovation(step));
        }
    }
    Ok((inv, ll))
}

/// Run the filter from the pre-sample prior `x_(-1) ~ N(m0, P0)`.
pub fn kalman_filter(model: &StateSpaceModel, data: &StateSeries) -> Result<FilterOutput> {
    model.check()?;
    let len = data.len();
    if data.inputs.len() != len {
        return Err(Error::Dimension("inputs and outputs differ in length".into()));
    }
    let n = model.state_dim();
    let p = model.obs_dim();
    let q = DMatrix::from_diagonal(&model.process_noise);
    let r = DMatrix::from_diagonal(&model.obs_noise);
    let ft = model.transition.transpose();
    let ht = model.observation.transpose();
    let eye = DMatrix::<f64>::identity(n, n);

    let mut out = FilterOutput {
        predicted_means: Vec::with_capacity(len),
        predicted_covs: Vec::with_capacity(len),
        filtered_means: Vec::with_capacity(len),
        filtered_covs: Vec::with_capacity(len),
        log_likelihood: 0.0,
    };
    let mut mean = model.initial_mean.clone();
    let mut cov = model.initial_cov.clone();

    for t in 0..len {
        let u = &data.inputs[t];
        let y = &data.outputs[t];
        if u.len() != model.input_dim() || y.len() != p {
            return Err(Error::Dimension(format!("step {t}: series does not match model")));
        }
        let m_pred = &model.transition * &mean + &model.state_input * u + &model.state_intercept;
        let mut p_pred = &model.transition * &cov * &ft + &q;
        symmetrize(&mut p_pred);

        if p == 0 {
            mean = m_pred.clone();
            cov = p_pred.clone();
        } else {
            let y_hat = &model.observation * &m_pred + &model.obs_input * u + &model.obs_intercept;
            let e = y - y_hat;
            let mut s = &model.observation * &p_pred * &ht + &r;
            symmetrize(&mut s);
            let (s_inv, ll) = innovation_terms(&s, &e, t)?;
            out.log_likelihood += ll;
            let gain = &p_pred * &ht * s_inv;
            mean = &m_pred + &gain * e;
            // Joseph form keeps the covariance symmetric PSD.
            let a = &eye - &gain * &model.observation;
            cov = &a * &p_pred * a.transpose() + &gain * &r * gain.transpose();
            symmetrize(&mut cov);
        }
        out.predicted_means.push(m_pred);
        out.predicted_covs.push(p_pred);
        out.filtered_means.push(mean.clone());
        out.filtered_covs.push(cov.clone());
    }
    Ok(out)
}

/// `A · B^-1` for symmetric PSD `B`, with a pseudo-inverse fallback.
fn right_solve_psd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = b.clone().cholesky() {
        // (B^-1 A')' = A B^-1 by symmetry of B.
        return ch.solve(&a.transpose()).transpose();
    }
    let scale = b.amax().max(1.0);
    let pinv = b
        .clone()
        .pseudo_inverse(1e-13 * scale)
        .unwrap_or_else(|_| DMatrix::zeros(b.ncols(), b.nrows()));
    a * pinv
}

pub fn kalman_smooth(model: &StateSpaceModel, data: &StateSeries) -> Result<SmootherOutput> {
    let filt = kalman_filter(model, data)?;
    Ok(smooth_from_filter(model, filt))
}

pub(crate) fn smooth_from_filter(model: &StateSpaceModel, filt: FilterOutput) -> SmootherOutput {
    let len = filt.filtered_means.len();
    let n = model.state_dim();
    let ft = model.transition.transpose();
    if len == 0 {
        return SmootherOutput {
            means: Vec::new(),
            covs: Vec::new(),
            cross_covs: Vec::new(),
            initial_mean: model.initial_mean.clone(),
            initial_cov: model.initial_cov.clone(),
            log_likelihood: filt.log_likelihood,
        };
    }
    let mut means = filt.filtered_means.clone();
    let mut covs = filt.filtered_covs.clone();
    let mut cross = vec![DMatrix::zeros(n, n); len];

    // Backward pass over t = len-1 .. 0, smoothing x_(t-1) from x_t; the
    // last iteration smooths the pre-sample state.
    let mut init_mean = model.initial_mean.clone();
    let mut init_cov = model.initial_cov.clone();
    for t in (0..len).rev() {
        let (prev_mean, prev_cov) = if t == 0 {
            (&model.initial_mean, &model.initial_cov)
        } else {
            (&filt.filtered_means[t - 1], &filt.filtered_covs[t - 1])
        };
        let gain = right_solve_psd(&(prev_cov * &ft), &filt.predicted_covs[t]);
        let sm = prev_mean + &gain * (&means[t] - &filt.predicted_means[t]);
        let mut sc = prev_cov + &gain * (&covs[t] - &filt.predicted_covs[t]) * gain.transpose();
        symmetrize(&mut sc);
        cross[t] = &covs[t] * gain.transpose();
        if t == 0 {
            init_mean = sm;
            init_cov = sc;
        } else {
            means[t - 1] = sm;
            covs[t - 1] = sc;
        }
    }
    SmootherOutput {
        means,
        covs,
        cross_covs: cross,
        initial_mean: init_mean,
        initial_cov: init_cov,
        log_likelihood: filt.log_likelihood,
    }
}
