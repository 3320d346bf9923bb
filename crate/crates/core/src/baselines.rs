//! Comparison methods: column imputers, ridge regression and one-vs-all
//! logistic regression, each selecting its penalty from an 11-point log
//! grid by cross-validation.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::cholesky;
use crate::metrics::{balanced_accuracy, mae};
use crate::model::ViewData;
use crate::standardize::{usable_scale, FeatureScale};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ImputationStrategy {
    Zero,
    Mean,
    Median,
    MostFrequent,
    Temporal,
}

impl ImputationStrategy {
    pub const ALL: [ImputationStrategy; 5] = [
        ImputationStrategy::Zero,
        ImputationStrategy::Mean,
        ImputationStrategy::Median,
        ImputationStrategy::MostFrequent,
        ImputationStrategy::Temporal,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ImputationStrategy::Zero => "zero",
            ImputationStrategy::Mean => "mean",
            ImputationStrategy::Median => "median",
            ImputationStrategy::MostFrequent => "most_frequent",
            ImputationStrategy::Temporal => "temporal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

/// Subject and anchor month of one row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowTime {
    pub subject: String,
    pub month: i64,
}

/// Variable and month offset (relative to the row's anchor) of one column.
/// Columns without an offset have no history and use the column mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnTime {
    pub variable: String,
    pub offset: Option<i64>,
}

/// Row and column timing needed by temporal imputation.
#[derive(Debug, Clone, Copy)]
pub struct TemporalMeta<'a> {
    pub train_rows: &'a [RowTime],
    pub apply_rows: &'a [RowTime],
    pub columns: &'a [ColumnTime],
}

fn observed_column(data: &ViewData, j: usize) -> Vec<f64> {
    (0..data.nrows()).filter(|&i| data.mask[(i, j)]).map(|i| data.values[(i, j)]).collect()
}

fn column_mean(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

fn column_median(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    let mut v = vals.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mode of the values; ties go to the smallest value.
fn column_mode(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    let mut v = vals.to_vec();
    v.sort_by(f64::total_cmp);
    let (mut best, mut best_count) = (v[0], 0);
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j < v.len() && v[j] == v[i] {
            j += 1;
        }
        if j - i > best_count {
            best = v[i];
            best_count = j - i;
        }
        i = j;
    }
    best
}

/// Fills every unobserved cell of `apply` using statistics of the observed
/// cells of `train`. Observed cells are returned unchanged.
pub fn impute(
    train: &ViewData,
    apply: &ViewData,
    strategy: ImputationStrategy,
    meta: Option<&TemporalMeta>,
) -> Result<DMatrix<f64>> {
    if train.ncols() != apply.ncols() {
        return Err(Error::Shape(format!("train has {} columns, apply has {}", train.ncols(), apply.ncols())));
    }
    let d = train.ncols();
    let fill: Vec<f64> = (0..d)
        .map(|j| {
            let vals = observed_column(train, j);
            match strategy {
                ImputationStrategy::Zero => 0.0,
                ImputationStrategy::Mean | ImputationStrategy::Temporal => column_mean(&vals),
                ImputationStrategy::Median => column_median(&vals),
                ImputationStrategy::MostFrequent => column_mode(&vals),
            }
        })
        .collect();

    let mut out = apply.values.clone();
    if strategy != ImputationStrategy::Temporal {
        for j in 0..d {
            for i in 0..apply.nrows() {
                if !apply.mask[(i, j)] {
                    out[(i, j)] = fill[j];
                }
            }
        }
        return Ok(out);
    }

    let meta = meta.ok_or_else(|| Error::Config("temporal imputation needs row and column timing".into()))?;
    if meta.columns.len() != d || meta.train_rows.len() != train.nrows() || meta.apply_rows.len() != apply.nrows() {
        return Err(Error::Shape("temporal metadata does not match the matrices".into()));
    }
    // Observed history per (subject, variable), keyed by absolute month.
    let mut history: HashMap<(&str, &str), BTreeMap<i64, f64>> = HashMap::new();
    for (data, rows) in [(train, meta.train_rows), (apply, meta.apply_rows)] {
        for (j, col) in meta.columns.iter().enumerate() {
            let Some(off) = col.offset else { continue };
            for (i, row) in rows.iter().enumerate() {
                if data.mask[(i, j)] {
                    history
                        .entry((row.subject.as_str(), col.variable.as_str()))
                        .or_default()
                        .entry(row.month + off)
                        .or_insert(data.values[(i, j)]);
                }
            }
        }
    }
    for (j, col) in meta.columns.iter().enumerate() {
        for (i, row) in meta.apply_rows.iter().enumerate() {
            if apply.mask[(i, j)] {
                continue;
            }
            let earlier = col.offset.and_then(|off| {
                let h = history.get(&(row.subject.as_str(), col.variable.as_str()))?;
                let prev: Vec<f64> = h.range(..row.month + off).map(|(_, v)| *v).collect();
                (!prev.is_empty()).then(|| column_mean(&prev))
            });
            out[(i, j)] = earlier.unwrap_or(fill[j]);
        }
    }
    Ok(out)
}

/// Penalties 10^e for e = -20, -17.8, ..., 2.
pub fn alpha_grid() -> Vec<f64> {
    (0..11).map(|i| 10f64.powf(-20.0 + 2.2 * i as f64)).collect()
}

/// Deterministic shuffled k-fold split; returns the held-out indices of each fold.
pub fn kfold(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || n < folds {
        return Err(Error::Data(format!("{n} samples cannot be split into {folds} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); folds];
    for (pos, i) in idx.into_iter().enumerate() {
        out[pos % folds].push(i);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

/// Stratified k-fold split: each class is shuffled and dealt round-robin.
pub fn stratified_kfold(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = labels.len();
    if folds < 2 || n < folds {
        return Err(Error::Data(format!("{n} samples cannot be split into {folds} folds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = labels.iter().max().map_or(0, |m| m + 1);
    let mut out = vec![Vec::new(); folds];
    let mut next = 0;
    for class in 0..c {
        let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            out[next % folds].push(i);
            next += 1;
        }
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

fn complement(n: usize, held: &[usize]) -> Vec<usize> {
    let mut keep = vec![true; n];
    for &i in held {
        keep[i] = false;
    }
    (0..n).filter(|&i| keep[i]).collect()
}

fn fit_scales(x: &DMatrix<f64>) -> Vec<FeatureScale> {
    let n = x.nrows() as f64;
    (0..x.ncols())
        .map(|j| {
            let col = x.column(j);
            let mean = col.sum() / n;
            let var = if x.nrows() > 1 { col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            let sd = var.sqrt();
            FeatureScale { mean, scale: usable_scale(sd, mean) }
        })
        .collect()
}

fn apply_scales(x: &DMatrix<f64>, scales: &[FeatureScale]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| scales[j].apply(x[(i, j)]))
}

fn check_xy(x: &DMatrix<f64>, n: usize) -> Result<()> {
    if x.nrows() != n {
        return Err(Error::Shape(format!("X has {} rows, target has {n}", x.nrows())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("design matrix must be complete and finite".into()));
    }
    Ok(())
}

/// Ridge solutions for many penalties from one SVD.
struct SvdRidge {
    v: DMatrix<f64>,
    s: DVector<f64>,
    uty: DVector<f64>,
    cutoff: f64,
}

impl SvdRidge {
    fn new(x: &DMatrix<f64>, y: &DVector<f64>) -> SvdRidge {
        let svd = x.clone().svd(true, true);
        let u = svd.u.expect("u requested");
        let v = svd.v_t.expect("v_t requested").transpose();
        let s = svd.singular_values;
        let smax = s.iter().cloned().fold(0.0, f64::max);
        let cutoff = smax * f64::EPSILON * x.nrows().max(x.ncols()) as f64;
        SvdRidge { uty: u.transpose() * y, v, s, cutoff }
    }

    fn solve(&self, alpha: f64) -> DVector<f64> {
        let d = DVector::from_fn(self.s.len(), |i, _| {
            let s = self.s[i];
            if s > self.cutoff {
                s / (s * s + alpha) * self.uty[i]
            } else {
                0.0
            }
        });
        &self.v * d
    }
}

/// Solves `(X^T X + alpha I) w = X^T y` directly (no intercept, no scaling).
pub fn ridge_solve(x: &DMatrix<f64>, y: &DVector<f64>, alpha: f64) -> Result<DVector<f64>> {
    check_xy(x, y.len())?;
    Ok(SvdRidge::new(x, y).solve(alpha))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    pub alpha: f64,
    /// Coefficients on the standardized features.
    pub weights: DVector<f64>,
    pub intercept: f64,
    pub scales: Vec<FeatureScale>,
    /// Mean fold MAE per grid value (empty when fit without CV).
    pub cv_mae: Vec<f64>,
}

impl RidgeModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        apply_scales(x, &self.scales) * &self.weights + DVector::from_element(x.nrows(), self.intercept)
    }
}

fn ridge_parts(x: &DMatrix<f64>, y: &DVector<f64>) -> (Vec<FeatureScale>, SvdRidge, f64) {
    let scales = fit_scales(x);
    let xs = apply_scales(x, &scales);
    let ybar = y.mean();
    let yc = y.map(|v| v - ybar);
    (scales, SvdRidge::new(&xs, &yc), ybar)
}

/// Ridge regression on standardized features with an unpenalized intercept.
pub fn ridge_fit(x: &DMatrix<f64>, y: &DVector<f64>, alpha: f64) -> Result<RidgeModel> {
    check_xy(x, y.len())?;
    let (scales, svd, ybar) = ridge_parts(x, y);
    Ok(RidgeModel { alpha, weights: svd.solve(alpha), intercept: ybar, scales, cv_mae: Vec::new() })
}

/// Selects the penalty minimizing mean fold MAE (ties to the smaller
/// penalty) and refits on all samples.
pub fn ridge_fit_cv(x: &DMatrix<f64>, y: &DVector<f64>, folds: usize, seed: u64) -> Result<RidgeModel> {
    check_xy(x, y.len())?;
    let grid = alpha_grid();
    let n = y.len();
    let split = kfold(n, folds, seed)?;
    let mut cv = vec![0.0; grid.len()];
    for held in &split {
        let train = complement(n, held);
        let xt = x.select_rows(&train);
        let yt = y.select_rows(&train);
        let (scales, svd, ybar) = ridge_parts(&xt, &yt);
        let xh = apply_scales(&x.select_rows(held), &scales);
        let yh: Vec<f64> = held.iter().map(|&i| y[i]).collect();
        for (a, &alpha) in grid.iter().enumerate() {
            let pred = (&xh * svd.solve(alpha)).add_scalar(ybar);
            cv[a] += mae(&yh, pred.as_slice())? / split.len() as f64;
        }
    }
    let mut best = 0;
    for a in 1..grid.len() {
        if cv[a] < cv[best] {
            best = a;
        }
    }
    let mut model = ridge_fit(x, y, grid[best])?;
    model.cv_mae = cv;
    Ok(model)
}

fn log1pexp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const IRLS_MAX_ITER: usize = 50;

/// L2-penalized binary logistic regression by Newton steps with backtracking.
/// `xa` carries a leading column of ones for the unpenalized intercept.
fn irls_binary(xa: &DMatrix<f64>, y: &[f64], alpha: f64, start: DVector<f64>) -> DVector<f64> {
    let p = xa.ncols();
    let objective = |beta: &DVector<f64>| -> f64 {
        let eta = xa * beta;
        let nll: f64 = eta.iter().zip(y).map(|(&e, &t)| log1pexp(e) - t * e).sum();
        nll + 0.5 * alpha * beta.rows(1, p - 1).norm_squared()
    };
    let mut beta = start;
    let mut obj = objective(&beta);
    for _ in 0..IRLS_MAX_ITER {
        let eta = xa * &beta;
        let prob: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
        let resid = DVector::from_iterator(y.len(), prob.iter().zip(y).map(|(p, t)| p - t));
        let mut grad = xa.transpose() * resid;
        let mut xw = xa.clone();
        for (i, pr) in prob.iter().enumerate() {
            let w = (pr * (1.0 - pr)).max(1e-10).sqrt();
            xw.row_mut(i).scale_mut(w);
        }
        let mut h = xw.transpose() * &xw;
        for j in 1..p {
            h[(j, j)] += alpha;
            grad[j] += alpha * beta[j];
        }
        let Ok(chol) = cholesky(&h, "logistic Hessian") else { break };
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-6 {
            let cand = &beta - &step * t;
            let c = objective(&cand);
            if c <= obj {
                let done = (obj - c) <= 1e-10 * (1.0 + obj.abs());
                beta = cand;
                obj = c;
                accepted = !done;
                break;
            }
            t *= 0.5;
        }
        if !accepted || step.amax() * t < 1e-9 {
            break;
        }
    }
    beta
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub alpha: f64,
    pub n_classes: usize,
    /// Per class: intercept followed by coefficients on the standardized features.
    pub coefficients: Vec<DVector<f64>>,
    pub scales: Vec<FeatureScale>,
    /// Mean fold balanced accuracy per grid value (empty when fit without CV).
    pub cv_balanced_accuracy: Vec<f64>,
}

fn with_intercept(xs: &DMatrix<f64>) -> DMatrix<f64> {
    xs.clone().insert_column(0, 1.0)
}

impl LogisticModel {
    /// One-vs-all probabilities, each row renormalized to sum to one.
    pub fn predict_scores(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let xa = with_intercept(&apply_scales(x, &self.scales));
        let mut s = DMatrix::zeros(x.nrows(), self.n_classes);
        for (c, beta) in self.coefficients.iter().enumerate() {
            let eta = &xa * beta;
            for i in 0..x.nrows() {
                s[(i, c)] = sigmoid(eta[i]);
            }
        }
        for i in 0..x.nrows() {
            let total: f64 = s.row(i).sum();
            if total > 0.0 {
                s.row_mut(i).scale_mut(1.0 / total);
            } else {
                s.row_mut(i).fill(1.0 / self.n_classes as f64);
            }
        }
        s
    }

    /// Argmax class per row, ties to the lowest index.
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<usize> {
        let s = self.predict_scores(x);
        (0..s.nrows())
            .map(|i| {
                let mut best = 0;
                for c in 1..s.ncols() {
                    if s[(i, c)] > s[(i, best)] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

fn check_labels(labels: &[usize]) -> Result<usize> {
    let c = labels.iter().max().map_or(0, |m| m + 1);
    let distinct = (0..c).filter(|k| labels.contains(k)).count();
    if distinct < 2 {
        return Err(Error::Data("logistic regression needs at least two classes".into()));
    }
    Ok(c)
}

/// Fits every penalty of `alphas` (largest first, warm-started) and returns
/// coefficients per penalty in the order given.
fn logistic_path(
    x: &DMatrix<f64>,
    labels: &[usize],
    n_classes: usize,
    alphas: &[f64],
) -> (Vec<FeatureScale>, Vec<Vec<DVector<f64>>>) {
    let scales = fit_scales(x);
    let xa = with_intercept(&apply_scales(x, &scales));
    let mut order: Vec<usize> = (0..alphas.len()).collect();
    order.sort_by(|&a, &b| alphas[b].total_cmp(&alphas[a]));
    let mut out = vec![Vec::new(); alphas.len()];
    for class in 0..n_classes {
        let y: Vec<f64> = labels.iter().map(|&l| (l == class) as u8 as f64).collect();
        let mut beta = DVector::zeros(xa.ncols());
        for &a in &order {
            beta = irls_binary(&xa, &y, alphas[a], beta);
            out[a].push(beta.clone());
        }
    }
    (scales, out)
}

pub fn logistic_fit(x: &DMatrix<f64>, labels: &[usize], alpha: f64) -> Result<LogisticModel> {
    check_xy(x, labels.len())?;
    let c = check_labels(labels)?;
    let (scales, mut path) = logistic_path(x, labels, c, &[alpha]);
    Ok(LogisticModel { alpha, n_classes: c, coefficients: path.remove(0), scales, cv_balanced_accuracy: Vec::new() })
}

/// Selects the penalty maximizing mean fold balanced accuracy (ties to the
/// smaller penalty) with stratified folds, then refits on all samples.
pub fn logistic_fit_cv(x: &DMatrix<f64>, labels: &[usize], folds: usize, seed: u64) -> Result<LogisticModel> {
    check_xy(x, labels.len())?;
    let c = check_labels(labels)?;
    let grid = alpha_grid();
    let n = labels.len();
    let split = stratified_kfold(labels, folds, seed)?;
    let mut cv = vec![0.0; grid.len()];
    for held in &split {
        let train = complement(n, held);
        let lt: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let lh: Vec<usize> = held.iter().map(|&i| labels[i]).collect();
        let (scales, path) = logistic_path(&x.select_rows(&train), &lt, c, &grid);
        let xh = x.select_rows(held);
        for (a, coefficients) in path.into_iter().enumerate() {
            let model = LogisticModel {
                alpha: grid[a],
                n_classes: c,
                coefficients,
                scales: scales.clone(),
                cv_balanced_accuracy: Vec::new(),
            };
            cv[a] += balanced_accuracy(&model.predict(&xh), &lh)? / split.len() as f64;
        }
    }
    let mut best = 0;
    for a in 1..grid.len() {
        if cv[a] > cv[best] {
            best = a;
        }
    }
    let mut model = logistic_fit(x, labels, grid[best])?;
    model.cv_balanced_accuracy = cv;
    Ok(model)
}
