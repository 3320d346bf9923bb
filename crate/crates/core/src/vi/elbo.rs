use statrs::function::gamma::{digamma, ln_gamma};

use super::updates::{expected_sq_residual_with, missing_count};
use crate::error::{Error, Result};
use crate::linalg::spd_logdet;
use crate::model::{Dataset, GammaPosterior, GaussianPosterior, ModelState, RowCovariance};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `E_q[log Gamma(x; a, b)] + H[q]` summed over the factors of `q`.
pub(crate) fn gamma_terms(q: &GammaPosterior, a: f64, b: f64) -> f64 {
    let prior_norm = a * b.ln() - ln_gamma(a);
    q.shape
        .iter()
        .zip(&q.rate)
        .map(|(&s, &r)| {
            let e_log = digamma(s) - r.ln();
            let e = s / r;
            let log_prior = prior_norm + (a - 1.0) * e_log - b * e;
            let entropy = s - r.ln() + ln_gamma(s) + (1.0 - s) * digamma(s);
            log_prior + entropy
        })
        .sum()
}

/// Sum over rows of the Gaussian entropies.
fn gaussian_entropy(q: &GaussianPosterior) -> Result<f64> {
    let k = q.ncols() as f64;
    let rows = q.mean.nrows() as f64;
    let per_row_const = 0.5 * k * (1.0 + LN_2PI);
    Ok(match &q.cov {
        RowCovariance::Shared(c) => rows * (0.5 * spd_logdet(c, "entropy")? + per_row_const),
        RowCovariance::PerRow(cs) => {
            let mut h = 0.0;
            for c in cs {
                h += 0.5 * spd_logdet(c, "entropy")? + per_row_const;
            }
            h
        }
    })
}

/// The evidence lower bound: expected log joint under q plus the entropy of q,
/// including the Gaussian factors over unobserved cells.
pub fn compute_elbo(state: &ModelState, dataset: &Dataset) -> Result<f64> {
    let h = &state.hyper;
    let n = state.n_samples() as f64;
    let k = state.k_current as f64;
    let mut elbo = 0.0;

    // Z: standard normal prior and entropy.
    let sigma_z = state.q_z.row_cov(0);
    let z_sq = state.q_z.mean.norm_squared() + n * sigma_z.trace();
    elbo += -0.5 * z_sq - 0.5 * n * k * LN_2PI;
    if state.n_samples() > 0 {
        elbo += gaussian_entropy(&state.q_z)?;
    }

    let ztz = state.q_z.mean.transpose() * &state.q_z.mean;
    for (m, (view, data)) in state.views.iter().zip(dataset.views()).enumerate() {
        let d = view.w.mean.nrows();
        let cells = (data.nrows() * data.ncols()) as f64;
        let tau_mean = view.tau_mean();
        let tau_log = digamma(view.tau.shape[0]) - view.tau.rate[0].ln();

        // Likelihood over every cell (observed and latent).
        let sq = expected_sq_residual_with(state, data, m, &ztz);
        elbo += 0.5 * cells * (tau_log - LN_2PI) - 0.5 * tau_mean * sq;

        // Entropy of the missing-cell factors.
        let n_miss = missing_count(data) as f64;
        if n_miss > 0.0 {
            elbo += 0.5 * n_miss * (1.0 + LN_2PI + view.missing.variance.ln());
        }

        // W prior under the (row x column) ARD precisions, and q(W) entropy.
        let alpha_mean = view.alpha.mean();
        let alpha_log = view.alpha.mean_log();
        let (gamma_mean, gamma_log) = match &view.gamma {
            Some(g) => (g.mean(), g.mean_log()),
            None => (vec![1.0; d], vec![0.0; d]),
        };
        let w2 = view.w.elementwise_second_moment();
        for row in 0..d {
            for j in 0..state.k_current {
                elbo += 0.5 * (gamma_log[row] + alpha_log[j] - LN_2PI)
                    - 0.5 * gamma_mean[row] * alpha_mean[j] * w2[(row, j)];
            }
        }
        elbo += gaussian_entropy(&view.w)?;

        elbo += gamma_terms(&view.alpha, h.a_alpha, h.b_alpha);
        elbo += gamma_terms(&view.tau, h.a_tau, h.b_tau);
        if let Some(g) = &view.gamma {
            elbo += gamma_terms(g, h.a_gamma, h.b_gamma);
        }
    }

    if !elbo.is_finite() {
        return Err(Error::Numerical(format!("lower bound is not finite ({elbo})")));
    }
    Ok(elbo)
}
