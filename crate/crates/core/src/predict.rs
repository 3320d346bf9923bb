//! Posterior-predictive outputs and interpretation of a fitted model:
//! predictions with variances, one-vs-all classification, feature
//! relevances, factor activity and per-subject trajectories.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{Dataset, ModelState, ViewKind};

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Predictive means, one row per requested sample.
    pub mean: DMatrix<f64>,
    pub variance: DMatrix<f64>,
}

fn check_view(state: &ModelState, m: usize) -> Result<()> {
    if m >= state.n_views() {
        return Err(Error::UnknownView(m + 1));
    }
    Ok(())
}

fn check_samples(state: &ModelState, samples: &[usize]) -> Result<()> {
    let n = state.n_samples();
    match samples.iter().find(|&&i| i >= n) {
        Some(&index) => Err(Error::SampleOutOfRange { index, n }),
        None => Ok(()),
    }
}

/// Predictive mean `E[z_n] E[W]^T` and variance (latent, loading and noise
/// terms) of view `m` for the given samples, in original units when a
/// standardizer is attached.
pub fn predict_view(state: &ModelState, samples: &[usize], m: usize) -> Result<Prediction> {
    check_view(state, m)?;
    check_samples(state, samples)?;
    let view = &state.views[m];
    let w = &view.w.mean;
    let d = w.nrows();
    let sz = state.q_z.row_cov(0);
    let noise = 1.0 / view.tau_mean();
    // w_d Sz w_d^T per feature.
    let wsw: Vec<f64> = (0..d).map(|j| (w.row(j) * sz * w.row(j).transpose())[0]).collect();
    let mut mean = DMatrix::zeros(samples.len(), d);
    let mut var = DMatrix::zeros(samples.len(), d);
    for (r, &i) in samples.iter().enumerate() {
        let z = state.q_z.mean.row(i);
        for j in 0..d {
            let sw = view.w.row_cov(j);
            mean[(r, j)] = (z * w.row(j).transpose())[0];
            let zsz = (z * sw * z.transpose())[0];
            var[(r, j)] = wsw[j] + zsz + (sz * sw).trace() + noise;
        }
    }
    if let Some(s) = &state.standardizer {
        for j in 0..d {
            let fs = s.scale_of(m, j);
            for r in 0..samples.len() {
                mean[(r, j)] = fs.invert(mean[(r, j)]);
                var[(r, j)] *= fs.scale * fs.scale;
            }
        }
    }
    Ok(Prediction { mean, variance: var })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: usize,
    pub scores: Vec<f64>,
}

/// Clips predictive means to [0, 1] and renormalizes (uniform when all are
/// zero); the label is the argmax, ties to the lowest index.
pub fn onehot_scores(means: &[f64]) -> Classification {
    let clipped: Vec<f64> = means.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let total: f64 = clipped.iter().sum();
    let scores: Vec<f64> = if total > 0.0 {
        clipped.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / means.len() as f64; means.len()]
    };
    let mut label = 0;
    for c in 1..scores.len() {
        if scores[c] > scores[label] {
            label = c;
        }
    }
    Classification { label, scores }
}

pub fn classify_onehot(state: &ModelState, samples: &[usize], m: usize) -> Result<Vec<Classification>> {
    check_view(state, m)?;
    if state.specs[m].kind != ViewKind::Indicator {
        return Err(Error::NotIndicator(m + 1));
    }
    let p = predict_view(state, samples, m)?;
    Ok((0..samples.len())
        .map(|r| onehot_scores(&p.mean.row(r).iter().copied().collect::<Vec<_>>()))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Raw,
    UnitSum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceProfile {
    pub scores: Vec<f64>,
    pub normalization: Normalization,
}

fn normalize(mut scores: Vec<f64>, normalization: Normalization) -> RelevanceProfile {
    if normalization == Normalization::UnitSum {
        let total: f64 = scores.iter().sum();
        if total > 0.0 {
            scores.iter_mut().for_each(|s| *s /= total);
        }
    }
    RelevanceProfile { scores, normalization }
}

/// Relevance of each feature of view `m` as the inverse posterior mean of
/// its row precision.
pub fn feature_relevance(state: &ModelState, m: usize, normalization: Normalization) -> Result<RelevanceProfile> {
    check_view(state, m)?;
    let g = state.views[m].gamma.as_ref().ok_or(Error::NoFeatureSelection(m + 1))?;
    Ok(normalize(g.mean().iter().map(|v| 1.0 / v).collect(), normalization))
}

/// Euclidean norm of each row of the posterior-mean loadings of view `m`.
pub fn loading_row_norms(state: &ModelState, m: usize, normalization: Normalization) -> Result<RelevanceProfile> {
    check_view(state, m)?;
    let w = &state.views[m].w.mean;
    Ok(normalize((0..w.nrows()).map(|d| w.row(d).norm()).collect(), normalization))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorActivity {
    /// Views by factors; true where the factor is used by the view.
    pub matrix: DMatrix<bool>,
    pub threshold: f64,
}

impl FactorActivity {
    pub fn is_active(&self, view: usize, factor: usize) -> bool {
        self.matrix[(view, factor)]
    }
}

pub fn factor_activity(state: &ModelState, threshold: f64) -> FactorActivity {
    let matrix = DMatrix::from_fn(state.n_views(), state.k_current, |m, k| {
        state.views[m].w.mean.column(k).iter().map(|v| v.abs()).fold(0.0, f64::max) >= threshold
    });
    FactorActivity { matrix, threshold }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Observed,
    Imputed,
}

impl Source {
    pub fn as_str(&self) -> &'static str {
        match self {
            Source::Observed => "observed",
            Source::Imputed => "imputed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    /// `None` for time-independent variables.
    pub month: Option<i64>,
    pub value: f64,
    pub source: Source,
    /// Predictive standard deviation for imputed real values.
    pub std: Option<f64>,
    /// Class scores for the diagnosis.
    pub class_scores: Option<Vec<f64>>,
}

/// A cell of the fitted design: (sample row, view, column).
type Cell = (usize, usize, usize);

/// Window cells before month 0 are padding of the earliest windows and
/// never hold data.
fn before_baseline(month: Option<i64>) -> bool {
    month.is_some_and(|m| m < 0)
}

/// Every cell of `variable` for `subject`, grouped by absolute month.
fn cells_by_month(state: &ModelState, subject: &str, variable: &str) -> Result<BTreeMap<Option<i64>, Vec<Cell>>> {
    let design = state.design.as_ref().ok_or_else(|| Error::Data("model has no longitudinal design".into()))?;
    if !design.samples.iter().any(|s| s.subject == subject) {
        return Err(Error::Data(format!("unknown subject {subject:?}")));
    }
    let mut out: BTreeMap<Option<i64>, Vec<Cell>> = BTreeMap::new();
    for (row, s) in design.samples.iter().enumerate() {
        if s.subject != subject {
            continue;
        }
        for (m, cols) in design.columns.iter().enumerate() {
            for (c, col) in cols.iter().enumerate() {
                let month = design.cell_month(row, m, c);
                if col.variable == variable && !before_baseline(month) {
                    out.entry(month).or_default().push((row, m, c));
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("unknown variable {variable:?}")));
    }
    Ok(out)
}

fn observed_value(state: &ModelState, dataset: &Dataset, (row, m, c): Cell) -> Option<f64> {
    let data = dataset.view(m);
    data.mask[(row, c)].then(|| match &state.standardizer {
        Some(s) => s.scale_of(m, c).invert(data.values[(row, c)]),
        None => data.values[(row, c)],
    })
}

/// Per-month values of one subject's variable, flagged observed or imputed.
///
/// A month counts as observed if any cell carrying it was observed. Imputed
/// months use the prediction of the cell nearest its sample's target
/// (smallest lag), ties to the earliest sample. Diagnosis points carry the
/// class index as value and the class scores.
pub fn subject_trajectory(
    state: &ModelState,
    dataset: &Dataset,
    subject: &str,
    variable: &str,
) -> Result<Vec<TrajectoryPoint>> {
    if dataset.n_samples() != state.n_samples() {
        return Err(Error::Shape("dataset does not match the fitted model".into()));
    }
    let by_month = cells_by_month(state, subject, variable)?;
    trajectory_points(state, dataset, by_month)
}

fn trajectory_points(
    state: &ModelState,
    dataset: &Dataset,
    by_month: BTreeMap<Option<i64>, Vec<Cell>>,
) -> Result<Vec<TrajectoryPoint>> {
    let design = state.design.as_ref().ok_or_else(|| Error::Data("model has no longitudinal design".into()))?;
    let mut out = Vec::new();
    for (month, cells) in by_month {
        let is_dx = cells.iter().any(|&(_, m, c)| design.columns[m][c].class.is_some());
        let offset = |&(_, m, c): &Cell| design.columns[m][c].offset.map_or(0, |o| o.abs());
        let nearest = *cells.iter().min_by_key(|cell| (offset(cell), cell.0)).expect("non-empty");

        if is_dx {
            // One-hot block of the cell's view; observed if any sample has it.
            let observed = cells.iter().find(|&&(row, m, _)| dataset.view(m).mask[(row, 0)]);
            let point = match observed {
                Some(&(row, m, _)) => {
                    let data = dataset.view(m);
                    let scores: Vec<f64> = (0..data.ncols()).map(|k| data.values[(row, k)]).collect();
                    let label = onehot_scores(&scores).label;
                    TrajectoryPoint { month, value: label as f64, source: Source::Observed, std: None, class_scores: Some(scores) }
                }
                None => {
                    let cls = classify_onehot(state, &[nearest.0], nearest.1)?.remove(0);
                    TrajectoryPoint {
                        month,
                        value: cls.label as f64,
                        source: Source::Imputed,
                        std: None,
                        class_scores: Some(cls.scores),
                    }
                }
            };
            out.push(point);
            continue;
        }

        match cells.iter().find_map(|&cell| observed_value(state, dataset, cell)) {
            Some(v) => out.push(TrajectoryPoint { month, value: v, source: Source::Observed, std: None, class_scores: None }),
            None => {
                let (row, m, c) = nearest;
                let p = predict_view(state, &[row], m)?;
                out.push(TrajectoryPoint {
                    month,
                    value: p.mean[(0, c)],
                    source: Source::Imputed,
                    std: Some(p.variance[(0, c)].sqrt()),
                    class_scores: None,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputedRecord {
    pub subject: String,
    pub month: Option<i64>,
    pub variable: String,
    pub value: f64,
    pub source: Source,
}

/// Completed long-format records for every subject and variable of the
/// fitted design from month 0 on, ordered by subject, variable (design
/// order) and month.
pub fn impute_records(state: &ModelState, dataset: &Dataset) -> Result<Vec<ImputedRecord>> {
    let design = state.design.as_ref().ok_or_else(|| Error::Data("model has no longitudinal design".into()))?;
    if dataset.n_samples() != state.n_samples() {
        return Err(Error::Shape("dataset does not match the fitted model".into()));
    }
    let mut variables: Vec<&str> = Vec::new();
    for col in design.columns.iter().flatten() {
        if !variables.contains(&col.variable.as_str()) {
            variables.push(&col.variable);
        }
    }
    let mut index: BTreeMap<(&str, usize), BTreeMap<Option<i64>, Vec<Cell>>> = BTreeMap::new();
    for (row, s) in design.samples.iter().enumerate() {
        for (m, cols) in design.columns.iter().enumerate() {
            for (c, col) in cols.iter().enumerate() {
                let month = design.cell_month(row, m, c);
                if before_baseline(month) {
                    continue;
                }
                let v = variables.iter().position(|&v| v == col.variable).expect("collected above");
                index.entry((s.subject.as_str(), v)).or_default().entry(month).or_default().push((row, m, c));
            }
        }
    }
    let mut out = Vec::new();
    for ((subject, v), by_month) in index {
        for p in trajectory_points(state, dataset, by_month)? {
            out.push(ImputedRecord {
                subject: subject.to_string(),
                month: p.month,
                variable: variables[v].to_string(),
                value: p.value,
                source: p.source,
            });
        }
    }
    Ok(out)
}
