//! Coordinate-ascent mean-field variational inference.
//!
//! One sweep updates q(Z), then for each view q(W), q(alpha), q(gamma) when
//! feature selection is on, q(tau) and the missing-cell factors. Dead factors
//! are pruned and the lower bound is recorded after the sweep.

mod elbo;
mod updates;

use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use elbo::compute_elbo;
pub use updates::{prune_factors, update_alpha, update_gamma, update_missing, update_tau, update_w, update_z};

use crate::error::{Error, Result};
use crate::model::{
    Dataset, GammaPosterior, GaussianPosterior, Hyperparameters, MissingPosterior, ModelState, RowCovariance,
    ViewPosterior,
};

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub hyper: Hyperparameters,
    pub track_elbo_every: usize,
    pub prune_every: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { hyper: Hyperparameters::default(), track_elbo_every: 1, prune_every: 1 }
    }
}

impl FitOptions {
    pub fn new(hyper: Hyperparameters) -> Self {
        FitOptions { hyper, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaltReason {
    ElboConverged,
    MaxIter,
}

impl HaltReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            HaltReason::ElboConverged => "elbo_converged",
            HaltReason::MaxIter => "max_iter",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub halted_on: HaltReason,
    pub iterations: usize,
    pub k_final: usize,
    pub elbo_trace: Vec<f64>,
    pub wall_time: f64,
}

/// The stopping test on the last two recorded bounds: halt when the bound
/// decreased or improved by less than `tol` relative to its magnitude.
///
/// For a positive bound this is exactly `prev > last * (1 - tol)`; using
/// `|last|` keeps the same meaning when the bound is negative.
pub fn has_converged(prev: f64, last: f64, tol: f64) -> bool {
    prev > last - tol * last.abs()
}

pub fn init_state(dataset: &Dataset, hyper: &Hyperparameters, seed: u64) -> ModelState {
    let n = dataset.n_samples();
    let k = hyper.resolve_k_init(n, dataset.total_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |scale: f64| -> f64 {
        let v: f64 = StandardNormal.sample(&mut rng);
        v * scale
    };

    // Drawn row-major so the stream does not depend on matrix storage order.
    let mut z = DMatrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            z[(i, j)] = normal(1.0);
        }
    }
    let q_z = GaussianPosterior { mean: z, cov: RowCovariance::Shared(DMatrix::identity(k, k)) };

    let views = dataset
        .specs()
        .iter()
        .map(|spec| {
            let d = spec.dim;
            let sd = 1.0 / (d as f64).sqrt();
            let mut w = DMatrix::zeros(d, k);
            for i in 0..d {
                for j in 0..k {
                    w[(i, j)] = normal(sd);
                }
            }
            let cov = if spec.feature_selection {
                RowCovariance::PerRow(vec![DMatrix::identity(k, k); d])
            } else {
                RowCovariance::Shared(DMatrix::identity(k, k))
            };
            ViewPosterior {
                w: GaussianPosterior { mean: w, cov },
                alpha: GammaPosterior::prior(k, hyper.a_alpha, hyper.b_alpha),
                tau: GammaPosterior::prior(1, hyper.a_tau, hyper.b_tau),
                gamma: spec
                    .feature_selection
                    .then(|| GammaPosterior::prior(d, hyper.a_gamma, hyper.b_gamma)),
                missing: MissingPosterior { mean: DMatrix::zeros(n, d), variance: 1.0 },
            }
        })
        .collect();

    ModelState {
        specs: dataset.specs().to_vec(),
        hyper: hyper.clone(),
        q_z,
        views,
        k_init: k,
        k_current: k,
        elbo_trace: Vec::new(),
        iteration: 0,
        seed,
        standardizer: None,
        design: None,
    }
}

/// One full coordinate sweep at iteration `state.iteration`.
pub fn sweep(state: &mut ModelState, dataset: &Dataset) -> Result<()> {
    update_z(state, dataset)?;
    let zz = state.q_z.sum_second_moment();
    let ztz = state.q_z.mean.transpose() * &state.q_z.mean;
    for m in 0..state.n_views() {
        updates::update_w_with(state, dataset, m, &zz)?;
        update_alpha(state, m);
        if state.specs[m].feature_selection {
            update_gamma(state, m)?;
        }
        updates::update_tau_with(state, dataset, m, &ztz);
        update_missing(state, dataset, m);
    }
    Ok(())
}

pub fn fit(dataset: &Dataset, options: &FitOptions) -> Result<(ModelState, FitReport)> {
    options.hyper.validate()?;
    if options.track_elbo_every == 0 || options.prune_every == 0 {
        return Err(Error::Config("track_elbo_every and prune_every must be at least 1".into()));
    }
    if dataset.n_samples() == 0 {
        return Err(Error::EmptyDataset);
    }
    let start = Instant::now();
    let hyper = &options.hyper;
    let mut state = init_state(dataset, hyper, hyper.seed);
    let mut halted_on = HaltReason::MaxIter;

    for it in 1..=hyper.max_iter {
        state.iteration = it;
        sweep(&mut state, dataset)?;
        if it % options.prune_every == 0 {
            prune_factors(&mut state);
        }
        if it % options.track_elbo_every == 0 {
            let lb = compute_elbo(&state, dataset)?;
            state.elbo_trace.push(lb);
            if let [.., prev, last] = state.elbo_trace[..] {
                if has_converged(prev, last, hyper.elbo_rel_tol) {
                    halted_on = HaltReason::ElboConverged;
                    break;
                }
            }
        }
    }

    let report = FitReport {
        halted_on,
        iterations: state.iteration,
        k_final: state.k_current,
        elbo_trace: state.elbo_trace.clone(),
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok((state, report))
}
