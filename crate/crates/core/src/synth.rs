//! Ground-truth synthetic data: forward samples of the factor model and a
//! longitudinal cohort with correlated outputs, visit-level missingness and
//! monotone dropout.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{validate_dataset, Dataset, ViewData, ViewSpec};
use crate::views::{Catalog, SubjectTable, VariableGroup};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MissingMechanism {
    None,
    /// Each cell is missing independently with this probability.
    Mcar(f64),
    /// With this probability a subject drops out at a uniformly chosen
    /// view after the first; that view and all later ones are missing.
    MonotoneDropout(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub k_true: usize,
    pub dims: Vec<usize>,
    /// Factors loading on each view.
    pub active: Vec<Vec<usize>>,
    /// Noise precision per view; infinity gives noiseless data.
    pub noise_precision: Vec<f64>,
    pub missing: MissingMechanism,
    /// Features with nonzero loadings per view; `None` means all.
    pub relevant: Vec<Option<Vec<usize>>>,
    pub seed: u64,
}

impl SynthConfig {
    /// Three views, four factors (two shared by all views, one shared by
    /// the first two, one private to the last) at signal-to-noise ratio 10.
    pub fn factor_recovery(n_subjects: usize, seed: u64) -> Self {
        let active = vec![vec![0, 1, 2], vec![0, 1, 2], vec![0, 1, 3]];
        let noise_precision = active.iter().map(|a| 10.0 / a.len() as f64).collect();
        SynthConfig {
            n_subjects,
            k_true: 4,
            dims: vec![12, 10, 8],
            active,
            noise_precision,
            missing: MissingMechanism::None,
            relevant: vec![None; 3],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth config: {m}")));
        if self.k_true == 0 {
            return bad("k_true must be at least 1".into());
        }
        let m = self.dims.len();
        if m == 0 {
            return bad("at least one view is required".into());
        }
        if self.active.len() != m || self.noise_precision.len() != m || self.relevant.len() != m {
            return bad("per-view settings must have one entry per view".into());
        }
        for (v, &d) in self.dims.iter().enumerate() {
            if d == 0 {
                return bad(format!("view {} has dimension 0", v + 1));
            }
            if self.active[v].iter().any(|&k| k >= self.k_true) {
                return bad(format!("view {} has an active factor >= k_true", v + 1));
            }
            if !(self.noise_precision[v] > 0.0) {
                return bad(format!("view {} noise precision must be positive", v + 1));
            }
            if let Some(rel) = &self.relevant[v] {
                if rel.iter().any(|&j| j >= d) {
                    return bad(format!("view {} has a relevant feature out of range", v + 1));
                }
            }
        }
        match self.missing {
            MissingMechanism::Mcar(r) | MissingMechanism::MonotoneDropout(r) if !(0.0..1.0).contains(&r) => {
                bad(format!("missing rate {r} outside [0, 1)"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub z: DMatrix<f64>,
    pub w: Vec<DMatrix<f64>>,
    /// `Z W^T` per view.
    pub noiseless: Vec<DMatrix<f64>>,
    /// Noisy data before masking.
    pub complete: Vec<DMatrix<f64>>,
    /// `true` where observed.
    pub mask: Vec<DMatrix<bool>>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Forward-samples `Z ~ N(0, I)`, sparse loadings and Gaussian noise, then
/// applies the missing mechanism. Deterministic given the seed.
pub fn generate(config: &SynthConfig) -> Result<(Dataset, GroundTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (n, k) = (config.n_subjects, config.k_true);
    let mut z = DMatrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            z[(i, j)] = gauss(&mut rng);
        }
    }
    let mut ws = Vec::new();
    for (m, &d) in config.dims.iter().enumerate() {
        let mut w = DMatrix::zeros(d, k);
        for r in 0..d {
            let relevant = config.relevant[m].as_ref().is_none_or(|rel| rel.contains(&r));
            for c in 0..k {
                let g = gauss(&mut rng);
                if relevant && config.active[m].contains(&c) {
                    w[(r, c)] = g;
                }
            }
        }
        ws.push(w);
    }
    let noiseless: Vec<DMatrix<f64>> = ws.iter().map(|w| &z * w.transpose()).collect();
    let mut complete = Vec::new();
    for (m, clean) in noiseless.iter().enumerate() {
        let sd = 1.0 / config.noise_precision[m].sqrt();
        let mut x = clean.clone();
        for i in 0..n {
            for j in 0..x.ncols() {
                let e = gauss(&mut rng);
                if sd > 0.0 {
                    x[(i, j)] += sd * e;
                }
            }
        }
        complete.push(x);
    }
    let mut mask: Vec<DMatrix<bool>> = config.dims.iter().map(|&d| DMatrix::from_element(n, d, true)).collect();
    match config.missing {
        MissingMechanism::None => {}
        MissingMechanism::Mcar(rate) => {
            for mk in mask.iter_mut() {
                for i in 0..n {
                    for j in 0..mk.ncols() {
                        mk[(i, j)] = !rng.random_bool(rate);
                    }
                }
            }
        }
        MissingMechanism::MonotoneDropout(rate) => {
            let views = config.dims.len();
            for i in 0..n {
                if views < 2 || !rng.random_bool(rate) {
                    continue;
                }
                let start = rng.random_range(1..views);
                for mk in mask.iter_mut().skip(start) {
                    for j in 0..mk.ncols() {
                        mk[(i, j)] = false;
                    }
                }
            }
        }
    }
    let specs: Vec<ViewSpec> = config.dims.iter().enumerate().map(|(m, &d)| ViewSpec::real(m + 1, d)).collect();
    let data = complete
        .iter()
        .zip(&mask)
        .map(|(x, mk)| {
            let values = DMatrix::from_fn(n, x.ncols(), |i, j| if mk[(i, j)] { x[(i, j)] } else { 0.0 });
            ViewData::new(values, mk.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = validate_dataset(specs, data)?;
    Ok((dataset, GroundTruth { z, w: ws, noiseless, complete, mask }))
}

fn stack(parts: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let k = parts.first().map_or(0, |p| p.ncols());
    if parts.iter().any(|p| p.ncols() != k) {
        return Err(Error::Shape("views have different numbers of factors".into()));
    }
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = DMatrix::zeros(rows, k);
    let mut r = 0;
    for p in parts {
        out.rows_mut(r, p.nrows()).copy_from(p);
        r += p.nrows();
    }
    Ok(out)
}

fn column_basis(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() == 0 || a.iter().all(|&v| v == 0.0) {
        return Err(Error::Data("subspace alignment of a zero matrix".into()));
    }
    let svd = a.clone().svd(true, false);
    let u = svd.u.ok_or_else(|| Error::Numerical("svd failed".into()))?;
    let smax = svd.singular_values.max();
    let cutoff = smax * f64::EPSILON * a.nrows().max(a.ncols()) as f64;
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > cutoff).collect();
    Ok(u.select_columns(&keep))
}

/// Mean cosine of the principal angles between the column spaces of the
/// two row-stacked loading matrices, in [0, 1].
pub fn subspace_alignment(learned: &[DMatrix<f64>], truth: &[DMatrix<f64>]) -> Result<f64> {
    if learned.len() != truth.len() {
        return Err(Error::Shape(format!("{} learned views vs {} true views", learned.len(), truth.len())));
    }
    if learned.iter().zip(truth).any(|(a, b)| a.nrows() != b.nrows()) {
        return Err(Error::Shape("view dimensions differ".into()));
    }
    let q1 = column_basis(&stack(learned)?)?;
    let q2 = column_basis(&stack(truth)?)?;
    let s = (q1.transpose() * q2).singular_values();
    let r = s.len();
    Ok(s.iter().map(|v| v.clamp(0.0, 1.0)).sum::<f64>() / r as f64)
}

/// Settings of the synthetic longitudinal cohort.
///
/// Each subject has a latent profile `u ~ N(0, I)`. A severity score grows
/// linearly in time at a subject-specific rate; time-dependent variables,
/// ventricle volume and ADAS13 are noisy linear functions of the profile
/// and the severity, and the diagnosis thresholds the severity.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortConfig {
    pub n_subjects: usize,
    pub n_ti: usize,
    pub n_td: usize,
    pub k_latent: usize,
    /// Noise standard deviation relative to unit-scale signals.
    pub noise: f64,
    /// Standard deviation of the severity perturbation applied before the
    /// diagnosis thresholds.
    pub dx_noise: f64,
    /// Probability of a missing cell at a visit before the last one.
    pub mcar: f64,
    /// Probability that a subject drops out before month 36.
    pub dropout: f64,
    /// Visit months; the last one is the forecast target.
    pub months: Vec<i64>,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n_subjects: 150,
            n_ti: 4,
            n_td: 8,
            k_latent: 3,
            noise: 0.3,
            dx_noise: 0.4,
            mcar: 0.2,
            dropout: 0.5,
            months: (0..=36).step_by(6).collect(),
            seed: 0,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("cohort config: {m}")));
        if self.n_subjects == 0 || self.k_latent == 0 || self.n_ti == 0 {
            return bad("n_subjects, k_latent and n_ti must be at least 1");
        }
        if !(0.0..1.0).contains(&self.mcar) || !(0.0..1.0).contains(&self.dropout) {
            return bad("rates must lie in [0, 1)");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.dx_noise >= 0.0 && self.dx_noise.is_finite()) {
            return bad("noise levels must be finite and non-negative");
        }
        if self.months.len() < 2 || self.months.windows(2).any(|w| w[0] >= w[1]) {
            return bad("months must be strictly increasing with at least two visits");
        }
        Ok(())
    }
}

pub fn cohort_catalog(n_ti: usize, n_td: usize) -> Catalog {
    let mut entries: Vec<(String, VariableGroup)> = Vec::new();
    entries.extend((1..=n_ti).map(|i| (format!("ti{i}"), VariableGroup::TI)));
    entries.extend((1..=n_td).map(|i| (format!("td{i}"), VariableGroup::TD)));
    entries.push(("Ventricles".into(), VariableGroup::V));
    entries.push(("ADAS13".into(), VariableGroup::A));
    entries.push(("DX".into(), VariableGroup::D));
    Catalog::new(entries).expect("generated catalog is valid")
}

#[derive(Debug, Clone)]
pub struct Cohort {
    /// Records as they would be collected, with missingness applied.
    pub table: SubjectTable,
    /// Every generated value, before any masking.
    pub complete: SubjectTable,
}

/// Generates the longitudinal cohort. Time-independent variables appear at
/// the first visit only. Missingness (sporadic cells and monotone dropout)
/// affects visits before the last; last-visit outputs are always recorded
/// and last-visit inputs are never emitted.
pub fn generate_cohort(config: &CohortConfig) -> Result<Cohort> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.k_latent;
    let catalog = cohort_catalog(config.n_ti, config.n_td);
    let horizon = *config.months.last().expect("validated") as f64;
    let last = *config.months.last().expect("validated");

    let mut draw = |rows: usize, cols: usize, scale: f64| -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = scale * gauss(&mut rng);
            }
        }
        m
    };
    let scale = 1.0 / (k as f64).sqrt();
    let l_ti = draw(config.n_ti, k, scale);
    let a_td = draw(config.n_td, k, scale);
    let b_td = draw(config.n_td, k, scale);
    let c_td = draw(config.n_td, 1, 1.0);
    let sev_base = draw(1, k, scale);
    let sev_rate = draw(1, k, 0.5 * scale);
    let v_extra = draw(1, k, 0.3 * scale);
    let a_extra = draw(1, k, 0.3 * scale);

    let mut table = SubjectTable::new(catalog.clone());
    let mut complete = SubjectTable::new(catalog.clone());
    let width = (config.n_subjects.max(1) as f64).log10().floor() as usize + 1;
    for s in 0..config.n_subjects {
        let id = format!("S{:0width$}", s + 1, width = width);
        let u = DMatrix::from_fn(k, 1, |_, _| gauss(&mut rng));
        let dropout_month = if rng.random_bool(config.dropout) {
            let candidates = &config.months[2..config.months.len() - 1];
            (!candidates.is_empty()).then(|| candidates[rng.random_range(0..candidates.len())])
        } else {
            None
        };
        let noise = |rng: &mut ChaCha8Rng| config.noise * gauss(rng);
        let emit = |table: &mut SubjectTable,
                        complete: &mut SubjectTable,
                        rng: &mut ChaCha8Rng,
                        month: i64,
                        var: &str,
                        value: f64|
         -> Result<()> {
            complete.insert(&id, month, var, Some(value))?;
            let is_last = month == last;
            let dropped = dropout_month.is_some_and(|d| month >= d) && !is_last;
            let sporadic = !is_last && rng.random_bool(config.mcar);
            if !dropped && !sporadic {
                table.insert(&id, month, var, Some(value))?;
            }
            Ok(())
        };
        let ti = &l_ti * &u;
        for i in 0..config.n_ti {
            let v = ti[i] + noise(&mut rng);
            emit(&mut table, &mut complete, &mut rng, config.months[0], &format!("ti{}", i + 1), v)?;
        }
        let base = (&sev_base * &u)[0];
        let rate = 1.0 + (&sev_rate * &u)[0];
        let a_u = &a_td * &u;
        let b_u = &b_td * &u;
        let v_u = (&v_extra * &u)[0];
        let a_x = (&a_extra * &u)[0];
        for &month in &config.months {
            let t = month as f64 / horizon;
            let sev = base + t * rate;
            if month != last {
                for i in 0..config.n_td {
                    let v = a_u[i] + t * (c_td[i] + b_u[i]) + noise(&mut rng);
                    emit(&mut table, &mut complete, &mut rng, month, &format!("td{}", i + 1), v)?;
                }
            }
            let vent = 40.0 + 8.0 * (sev + v_u) + 8.0 * noise(&mut rng);
            emit(&mut table, &mut complete, &mut rng, month, "Ventricles", vent)?;
            let adas = 15.0 + 8.0 * (sev + a_x) + 8.0 * noise(&mut rng);
            emit(&mut table, &mut complete, &mut rng, month, "ADAS13", adas)?;
            let noisy = sev + config.dx_noise * gauss(&mut rng);
            let dx = if noisy < 0.3 {
                0.0
            } else if noisy < 1.3 {
                1.0
            } else {
                2.0
            };
            emit(&mut table, &mut complete, &mut rng, month, "DX", dx)?;
        }
    }
    Ok(Cohort { table, complete })
}
