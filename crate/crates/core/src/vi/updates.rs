//! Closed-form coordinate updates for every factor of the mean-field posterior.
//!
//! Unobserved cells are latent variables with their own Gaussian factors, so
//! every cell of a view contributes to the Z, W and tau updates through the
//! "filled" data matrix (observed values, or posterior means elsewhere).

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{drop_row_col, spd_inverse, symmetrize};
use crate::model::{Dataset, ModelState, RowCovariance, ViewData};

/// Observed values where present, posterior means of the missing factors elsewhere.
pub(crate) fn filled(data: &ViewData, missing_mean: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = data.values.clone();
    let (xs, mask, fill) = (x.as_mut_slice(), data.mask.as_slice(), missing_mean.as_slice());
    for i in 0..xs.len() {
        if !mask[i] {
            xs[i] = fill[i];
        }
    }
    x
}

pub(crate) fn missing_count(data: &ViewData) -> usize {
    data.mask.iter().filter(|m| !**m).count()
}

pub fn update_z(state: &mut ModelState, dataset: &Dataset) -> Result<()> {
    let k = state.k_current;
    let n = state.n_samples();
    let mut precision = DMatrix::<f64>::identity(k, k);
    let mut proj = DMatrix::<f64>::zeros(n, k);
    for (view, data) in state.views.iter().zip(dataset.views()) {
        let tau = view.tau_mean();
        precision += view.w.sum_second_moment() * tau;
        let x = filled(data, &view.missing.mean);
        proj += (x * &view.w.mean) * tau;
    }
    let cov = spd_inverse(&symmetrize(precision), "q(Z) precision")?;
    state.q_z.mean = proj * &cov;
    state.q_z.cov = RowCovariance::Shared(cov);
    Ok(())
}

/// Updates q(W) of view `m`, damped by the view's learning rate at the
/// current iteration.
pub fn update_w(state: &mut ModelState, dataset: &Dataset, m: usize) -> Result<()> {
    let zz = state.q_z.sum_second_moment();
    update_w_with(state, dataset, m, &zz)
}

/// [`update_w`] with `E[Z^T Z]` supplied by the caller.
pub(crate) fn update_w_with(state: &mut ModelState, dataset: &Dataset, m: usize, zz: &DMatrix<f64>) -> Result<()> {
    let rho = state.specs[m].learning_rate.at(state.iteration);
    let view = &state.views[m];
    let tau = view.tau_mean();
    let alpha = view.alpha.mean();
    let x = filled(&dataset.views()[m], &view.missing.mean);
    // D x K: tau * X^T E[Z]
    let xz = (x.transpose() * &state.q_z.mean) * tau;
    let k = state.k_current;

    let (mean, cov) = match &view.gamma {
        None => {
            let mut prec = zz * tau;
            for j in 0..k {
                prec[(j, j)] += alpha[j];
            }
            let cov = spd_inverse(&symmetrize(prec), "q(W) precision")?;
            (&xz * &cov, RowCovariance::Shared(cov))
        }
        Some(g) => {
            let gamma = g.mean();
            let d = xz.nrows();
            let mut mean = DMatrix::<f64>::zeros(d, k);
            let mut covs = Vec::with_capacity(d);
            for (row, gd) in gamma.iter().enumerate() {
                let mut prec = zz * tau;
                for j in 0..k {
                    prec[(j, j)] += gd * alpha[j];
                }
                let cov = spd_inverse(&symmetrize(prec), "q(W) row precision")?;
                let r = xz.row(row) * &cov;
                mean.set_row(row, &r);
                covs.push(cov);
            }
            (mean, RowCovariance::PerRow(covs))
        }
    };

    let w = &mut state.views[m].w;
    if rho >= 1.0 {
        w.mean = mean;
        w.cov = cov;
    } else {
        w.mean = &w.mean * (1.0 - rho) + mean * rho;
        w.cov = match (&w.cov, cov) {
            (RowCovariance::Shared(old), RowCovariance::Shared(new)) => {
                RowCovariance::Shared(old * (1.0 - rho) + new * rho)
            }
            (RowCovariance::PerRow(old), RowCovariance::PerRow(new)) => RowCovariance::PerRow(
                old.iter().zip(new).map(|(o, n)| o * (1.0 - rho) + n * rho).collect(),
            ),
            _ => return Err(Error::Shape("W covariance layout changed between iterations".into())),
        };
    }
    Ok(())
}

pub fn update_alpha(state: &mut ModelState, m: usize) {
    let h = &state.hyper;
    let view = &mut state.views[m];
    let d = view.w.mean.nrows();
    let gamma = view.gamma_mean();
    let w2 = view.w.elementwise_second_moment();
    for k in 0..view.alpha.len() {
        let s: f64 = (0..d).map(|row| gamma[row] * w2[(row, k)]).sum();
        view.alpha.shape[k] = h.a_alpha + d as f64 / 2.0;
        view.alpha.rate[k] = h.b_alpha + 0.5 * s;
    }
}

pub fn update_gamma(state: &mut ModelState, m: usize) -> Result<()> {
    let h = state.hyper.clone();
    let view_id = state.specs[m].view_id;
    let view = &mut state.views[m];
    let alpha = view.alpha.mean();
    let w2 = view.w.elementwise_second_moment();
    let k = w2.ncols();
    let g = view.gamma.as_mut().ok_or(Error::NoFeatureSelection(view_id))?;
    for row in 0..g.len() {
        let s: f64 = (0..k).map(|j| alpha[j] * w2[(row, j)]).sum();
        g.shape[row] = h.a_gamma + k as f64 / 2.0;
        g.rate[row] = h.b_gamma + 0.5 * s;
    }
    Ok(())
}

/// `E_q[ sum_{n,d} (x_nd - z_n w_d^T)^2 ]` over every cell of view `m`,
/// written as a sum of non-negative terms.
pub(crate) fn expected_sq_residual_with(state: &ModelState, data: &ViewData, m: usize, ztz: &DMatrix<f64>) -> f64 {
    let view = &state.views[m];
    let n = state.n_samples() as f64;
    let zbar = &state.q_z.mean;
    let sigma_z = state.q_z.row_cov(0);
    let wbar = &view.w.mean;
    let x = filled(data, &view.missing.mean);
    let resid = (x - zbar * wbar.transpose()).norm_squared();
    let miss = missing_count(data) as f64 * view.missing.variance;
    let sw_total = match &view.w.cov {
        RowCovariance::Shared(c) => c * wbar.nrows() as f64,
        RowCovariance::PerRow(cs) => cs.iter().fold(DMatrix::zeros(wbar.ncols(), wbar.ncols()), |a, c| a + c),
    };
    if state.n_samples() == 0 {
        return 0.0;
    }
    let wtw = wbar.transpose() * wbar;
    let t1 = n * (sigma_z * &wtw).trace();
    let t2 = (ztz * &sw_total).trace();
    let t3 = n * (sigma_z * &sw_total).trace();
    resid + miss + t1 + t2 + t3
}

pub fn update_tau(state: &mut ModelState, dataset: &Dataset, m: usize) {
    let ztz = state.q_z.mean.transpose() * &state.q_z.mean;
    update_tau_with(state, dataset, m, &ztz);
}

/// [`update_tau`] with `E[Z]^T E[Z]` supplied by the caller.
pub(crate) fn update_tau_with(state: &mut ModelState, dataset: &Dataset, m: usize, ztz: &DMatrix<f64>) {
    let data = &dataset.views()[m];
    let cells = (data.nrows() * data.ncols()) as f64;
    let s = expected_sq_residual_with(state, data, m, ztz);
    let h = &state.hyper;
    let (a, b) = (h.a_tau + cells / 2.0, h.b_tau + 0.5 * s);
    let tau = &mut state.views[m].tau;
    tau.shape[0] = a;
    tau.rate[0] = b;
}

/// Sets each unobserved cell's factor to N(E[z_n] E[w_d]^T, 1 / E[tau]).
/// A no-op on fully observed views.
pub fn update_missing(state: &mut ModelState, dataset: &Dataset, m: usize) {
    let data = &dataset.views()[m];
    if data.is_fully_observed() {
        return;
    }
    let view = &state.views[m];
    let recon = &state.q_z.mean * view.w.mean.transpose();
    let variance = 1.0 / view.tau_mean();
    let mut mean = DMatrix::zeros(data.nrows(), data.ncols());
    for (i, obs) in data.mask.iter().enumerate() {
        if !obs {
            mean[i] = recon[i];
        }
    }
    let miss = &mut state.views[m].missing;
    miss.mean = mean;
    miss.variance = variance;
}

/// Removes every latent factor whose posterior-mean loadings are below the
/// pruning threshold in absolute value in all views. At least one factor is
/// always kept. Returns the number of factors removed.
pub fn prune_factors(state: &mut ModelState) -> usize {
    let k = state.k_current;
    let threshold = state.hyper.prune_threshold;
    let magnitude: Vec<f64> = (0..k)
        .map(|j| {
            state
                .views
                .iter()
                .flat_map(|v| v.w.mean.column(j).iter().map(|x| x.abs()).collect::<Vec<_>>())
                .fold(0.0, f64::max)
        })
        .collect();
    let mut dead: Vec<usize> = (0..k).filter(|&j| magnitude[j] < threshold).collect();
    if dead.len() == k {
        let best = (0..k)
            .max_by(|&a, &b| magnitude[a].total_cmp(&magnitude[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        dead.retain(|&j| j != best);
    }
    // Remove from the highest index down so earlier indices stay valid.
    for &j in dead.iter().rev() {
        remove_factor(state, j);
    }
    dead.len()
}

pub(crate) fn remove_factor(state: &mut ModelState, j: usize) {
    state.q_z.mean = state.q_z.mean.clone().remove_column(j);
    state.q_z.cov = shrink_cov(&state.q_z.cov, j);
    for v in &mut state.views {
        v.w.mean = v.w.mean.clone().remove_column(j);
        v.w.cov = shrink_cov(&v.w.cov, j);
        v.alpha.remove(j);
    }
    state.k_current -= 1;
}

fn shrink_cov(cov: &RowCovariance, j: usize) -> RowCovariance {
    match cov {
        RowCovariance::Shared(c) => RowCovariance::Shared(drop_row_col(c, j)),
        RowCovariance::PerRow(cs) => RowCovariance::PerRow(cs.iter().map(|c| drop_row_col(c, j)).collect()),
    }
}
