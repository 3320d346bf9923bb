//! Domain types shared by the inference engine, prediction and persistence.

use nalgebra::DMatrix;
use statrs::function::gamma::digamma;

use crate::error::{Error, Result};
use crate::standardize::Standardizer;
use crate::views::DesignInfo;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewKind {
    Real,
    /// 0/1 one-vs-all columns, still modeled with a Gaussian likelihood.
    Indicator,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LearningRate {
    Constant(f64),
    /// rho = 1 / iteration, with iterations counted from 1.
    InverseIteration,
}

impl LearningRate {
    pub fn at(&self, iteration: usize) -> f64 {
        match *self {
            LearningRate::Constant(rho) => rho,
            LearningRate::InverseIteration => 1.0 / iteration.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewRole {
    Input,
    Output,
}

/// Static description of one data view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSpec {
    /// 1-based index, contiguous across a dataset.
    pub view_id: usize,
    pub dim: usize,
    pub kind: ViewKind,
    /// Enables the per-feature precision `gamma_d` on the rows of W.
    pub feature_selection: bool,
    pub learning_rate: LearningRate,
    pub role: ViewRole,
    pub name: String,
}

impl ViewSpec {
    pub fn real(view_id: usize, dim: usize) -> Self {
        ViewSpec {
            view_id,
            dim,
            kind: ViewKind::Real,
            feature_selection: false,
            learning_rate: LearningRate::Constant(1.0),
            role: ViewRole::Input,
            name: format!("view{view_id}"),
        }
    }

    pub fn with_kind(mut self, kind: ViewKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_feature_selection(mut self, on: bool) -> Self {
        self.feature_selection = on;
        self
    }

    pub fn with_learning_rate(mut self, lr: LearningRate) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn with_role(mut self, role: ViewRole) -> Self {
        self.role = role;
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config(format!("view {} has dim 0", self.view_id)));
        }
        if let LearningRate::Constant(rho) = self.learning_rate {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::Config(format!(
                    "view {}: learning rate {rho} outside (0, 1]",
                    self.view_id
                )));
            }
        }
        Ok(())
    }
}

/// Observations of one view; `mask` is true where a value was observed.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewData {
    pub values: DMatrix<f64>,
    pub mask: DMatrix<bool>,
}

impl ViewData {
    pub fn new(values: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        if values.shape() != mask.shape() {
            return Err(Error::Shape(format!(
                "values {:?} vs mask {:?}",
                values.shape(),
                mask.shape()
            )));
        }
        Ok(ViewData { values, mask })
    }

    pub fn fully_observed(values: DMatrix<f64>) -> Self {
        let mask = DMatrix::from_element(values.nrows(), values.ncols(), true);
        ViewData { values, mask }
    }

    /// Treats NaN cells as missing; missing cells are stored as 0.
    pub fn from_nan(values: DMatrix<f64>) -> Self {
        let mask = values.map(|v| !v.is_nan());
        let values = values.map(|v| if v.is_nan() { 0.0 } else { v });
        ViewData { values, mask }
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        self.mask[(row, col)]
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_fully_observed(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    /// Rows selected by index, in order.
    pub fn select_rows(&self, rows: &[usize]) -> ViewData {
        ViewData {
            values: self.values.select_rows(rows),
            mask: self.mask.select_rows(rows),
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> ViewData {
        ViewData {
            values: self.values.select_columns(cols),
            mask: self.mask.select_columns(cols),
        }
    }

    /// Concatenates views side by side.
    pub fn hstack(parts: &[&ViewData]) -> Result<ViewData> {
        let n = parts.first().map_or(0, |p| p.nrows());
        if parts.iter().any(|p| p.nrows() != n) {
            return Err(Error::Shape("cannot concatenate views with different row counts".into()));
        }
        let d: usize = parts.iter().map(|p| p.ncols()).sum();
        let mut values = DMatrix::zeros(n, d);
        let mut mask = DMatrix::from_element(n, d, false);
        let mut off = 0;
        for p in parts {
            values.view_mut((0, off), (n, p.ncols())).copy_from(&p.values);
            mask.view_mut((0, off), (n, p.ncols())).copy_from(&p.mask);
            off += p.ncols();
        }
        Ok(ViewData { values, mask })
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &ViewData) -> Result<ViewData> {
        if self.ncols() != other.ncols() {
            return Err(Error::Shape(format!(
                "cannot stack {} columns onto {}",
                other.ncols(),
                self.ncols()
            )));
        }
        let n = self.nrows() + other.nrows();
        let d = self.ncols();
        let values = DMatrix::from_fn(n, d, |i, j| {
            if i < self.nrows() {
                self.values[(i, j)]
            } else {
                other.values[(i - self.nrows(), j)]
            }
        });
        let mask = DMatrix::from_fn(n, d, |i, j| {
            if i < self.nrows() {
                self.mask[(i, j)]
            } else {
                other.mask[(i - self.nrows(), j)]
            }
        });
        Ok(ViewData { values, mask })
    }
}

/// A validated multi-view dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub(crate) specs: Vec<ViewSpec>,
    pub(crate) views: Vec<ViewData>,
    pub(crate) n: usize,
}

impl Dataset {
    pub fn specs(&self) -> &[ViewSpec] {
        &self.specs
    }

    pub fn views(&self) -> &[ViewData] {
        &self.views
    }

    pub fn view(&self, m: usize) -> &ViewData {
        &self.views[m]
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn total_dim(&self) -> usize {
        self.specs.iter().map(|s| s.dim).sum()
    }

    pub fn into_parts(self) -> (Vec<ViewSpec>, Vec<ViewData>) {
        (self.specs, self.views)
    }
}

pub fn validate_dataset(specs: Vec<ViewSpec>, data: Vec<ViewData>) -> Result<Dataset> {
    if specs.len() != data.len() {
        return Err(Error::Shape(format!(
            "{} view specs for {} data blocks",
            specs.len(),
            data.len()
        )));
    }
    if specs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = data[0].nrows();
    for (idx, (spec, view)) in specs.iter().zip(&data).enumerate() {
        spec.validate()?;
        if spec.view_id != idx + 1 {
            return Err(Error::Config(format!(
                "view ids must be contiguous from 1; position {} has id {}",
                idx + 1,
                spec.view_id
            )));
        }
        if view.values.shape() != view.mask.shape() {
            return Err(Error::Shape(format!("view {}: values and mask disagree", spec.view_id)));
        }
        if view.ncols() != spec.dim {
            return Err(Error::Shape(format!(
                "view {}: spec dim {} but data has {} columns",
                spec.view_id,
                spec.dim,
                view.ncols()
            )));
        }
        if view.nrows() != n {
            return Err(Error::Shape(format!(
                "view {} has {} rows, view 1 has {n}",
                spec.view_id,
                view.nrows()
            )));
        }
        for i in 0..view.nrows() {
            for j in 0..view.ncols() {
                if view.mask[(i, j)] && !view.values[(i, j)].is_finite() {
                    return Err(Error::NonFinite { view: spec.view_id, row: i, col: j });
                }
            }
        }
        if view.observed_count() == 0 {
            return Err(Error::EmptyView(spec.view_id));
        }
    }
    Ok(Dataset { specs, views: data, n })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub a_alpha: f64,
    pub b_alpha: f64,
    pub a_tau: f64,
    pub b_tau: f64,
    pub a_gamma: f64,
    pub b_gamma: f64,
    /// `None` resolves to `min(N, sum of dims, 50)`.
    pub k_init: Option<usize>,
    pub prune_threshold: f64,
    pub elbo_rel_tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            a_alpha: 1e-14,
            b_alpha: 1e-14,
            a_tau: 1e-14,
            b_tau: 1e-14,
            a_gamma: 1e-14,
            b_gamma: 1e-14,
            k_init: None,
            prune_threshold: 1e-6,
            elbo_rel_tol: 1e-6,
            max_iter: 50_000,
            seed: 0,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let pairs = [
            ("a_alpha", self.a_alpha),
            ("b_alpha", self.b_alpha),
            ("a_tau", self.a_tau),
            ("b_tau", self.b_tau),
            ("a_gamma", self.a_gamma),
            ("b_gamma", self.b_gamma),
        ];
        for (name, v) in pairs {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.k_init == Some(0) {
            return Err(Error::Config("k_init must be at least 1".into()));
        }
        if !(self.prune_threshold > 0.0) {
            return Err(Error::Config("prune_threshold must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if !(self.elbo_rel_tol >= 0.0) {
            return Err(Error::Config("elbo_rel_tol must be non-negative".into()));
        }
        Ok(())
    }

    pub fn resolve_k_init(&self, n: usize, total_dim: usize) -> usize {
        self.k_init.unwrap_or_else(|| n.min(total_dim).min(50)).max(1)
    }
}

/// Row covariance storage of a Gaussian posterior over a matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum RowCovariance {
    /// One covariance shared by every row.
    Shared(DMatrix<f64>),
    PerRow(Vec<DMatrix<f64>>),
}

/// Gaussian posterior over the rows of a matrix, rows mutually independent.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: DMatrix<f64>,
    pub cov: RowCovariance,
}

impl GaussianPosterior {
    pub fn row_cov(&self, row: usize) -> &DMatrix<f64> {
        match &self.cov {
            RowCovariance::Shared(c) => c,
            RowCovariance::PerRow(cs) => &cs[row],
        }
    }

    pub fn ncols(&self) -> usize {
        self.mean.ncols()
    }

    /// `sum_i E[r_i r_i^T]` over rows: `M^T M + sum_i Sigma_i`.
    pub fn sum_second_moment(&self) -> DMatrix<f64> {
        let mut s = self.mean.transpose() * &self.mean;
        match &self.cov {
            RowCovariance::Shared(c) => s += c * self.mean.nrows() as f64,
            RowCovariance::PerRow(cs) => {
                for c in cs {
                    s += c;
                }
            }
        }
        s
    }

    /// `E[m_{ik}^2]` for every entry.
    pub fn elementwise_second_moment(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.mean.nrows(), self.mean.ncols(), |i, k| {
            self.mean[(i, k)].powi(2) + self.row_cov(i)[(k, k)]
        })
    }

    pub fn check(&self, what: &str) -> Result<()> {
        let k = self.mean.ncols();
        let check_one = |c: &DMatrix<f64>| -> Result<()> {
            if c.shape() != (k, k) {
                return Err(Error::Shape(format!("{what}: covariance {:?} for {k} columns", c.shape())));
            }
            if (c - c.transpose()).abs().max() > 1e-12 * (1.0 + c.abs().max()) {
                return Err(Error::Numerical(format!("{what}: covariance not symmetric")));
            }
            if k > 0 && nalgebra::Cholesky::new(c.clone()).is_none() {
                return Err(Error::Numerical(format!("{what}: covariance not positive definite")));
            }
            Ok(())
        };
        match &self.cov {
            RowCovariance::Shared(c) => check_one(c),
            RowCovariance::PerRow(cs) => {
                if cs.len() != self.mean.nrows() {
                    return Err(Error::Shape(format!("{what}: {} row covariances", cs.len())));
                }
                cs.iter().try_for_each(check_one)
            }
        }
    }
}

/// Independent Gamma factors with shape/rate parameterisation.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaPosterior {
    pub shape: Vec<f64>,
    pub rate: Vec<f64>,
}

impl GammaPosterior {
    pub fn new(shape: Vec<f64>, rate: Vec<f64>) -> Result<Self> {
        if shape.len() != rate.len() {
            return Err(Error::Shape("gamma shape/rate length mismatch".into()));
        }
        let g = GammaPosterior { shape, rate };
        g.check("gamma")?;
        Ok(g)
    }

    pub fn prior(len: usize, shape: f64, rate: f64) -> Self {
        GammaPosterior { shape: vec![shape; len], rate: vec![rate; len] }
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.shape.iter().zip(&self.rate).map(|(a, b)| a / b).collect()
    }

    pub fn mean_log(&self) -> Vec<f64> {
        self.shape.iter().zip(&self.rate).map(|(a, b)| digamma(*a) - b.ln()).collect()
    }

    pub fn remove(&mut self, idx: usize) {
        self.shape.remove(idx);
        self.rate.remove(idx);
    }

    pub fn check(&self, what: &str) -> Result<()> {
        for (a, b) in self.shape.iter().zip(&self.rate) {
            if !(*a > 0.0 && *b > 0.0 && a.is_finite() && b.is_finite()) {
                return Err(Error::Numerical(format!("{what}: invalid gamma parameters ({a}, {b})")));
            }
        }
        Ok(())
    }
}

/// `(E[x], E[log x])` elementwise.
pub fn gamma_expectations(g: &GammaPosterior) -> (Vec<f64>, Vec<f64>) {
    (g.mean(), g.mean_log())
}

/// Independent Gaussian factors over the unobserved cells of a view.
///
/// `mean` is N x D; entries at observed cells are unused and held at zero.
/// Every unobserved cell shares the same variance.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingPosterior {
    pub mean: DMatrix<f64>,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPosterior {
    pub w: GaussianPosterior,
    pub alpha: GammaPosterior,
    pub tau: GammaPosterior,
    pub gamma: Option<GammaPosterior>,
    pub missing: MissingPosterior,
}

impl ViewPosterior {
    pub fn tau_mean(&self) -> f64 {
        self.tau.shape[0] / self.tau.rate[0]
    }

    /// `E[gamma_d]`, or ones when feature selection is off.
    pub fn gamma_mean(&self) -> Vec<f64> {
        match &self.gamma {
            Some(g) => g.mean(),
            None => vec![1.0; self.w.mean.nrows()],
        }
    }
}

/// All variational posteriors of a fitted (or in-progress) model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub specs: Vec<ViewSpec>,
    pub hyper: Hyperparameters,
    pub q_z: GaussianPosterior,
    pub views: Vec<ViewPosterior>,
    pub k_init: usize,
    pub k_current: usize,
    pub elbo_trace: Vec<f64>,
    pub iteration: usize,
    pub seed: u64,
    pub standardizer: Option<Standardizer>,
    pub design: Option<DesignInfo>,
}

impl ModelState {
    pub fn n_samples(&self) -> usize {
        self.q_z.mean.nrows()
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    /// Verifies every type invariant of the posterior containers.
    pub fn check_invariants(&self) -> Result<()> {
        let k = self.k_current;
        if k == 0 || k > self.k_init {
            return Err(Error::Numerical(format!("k_current {k} outside [1, {}]", self.k_init)));
        }
        if self.q_z.ncols() != k {
            return Err(Error::Shape("q_z column count".into()));
        }
        if !matches!(self.q_z.cov, RowCovariance::Shared(_)) {
            return Err(Error::Shape("q_z covariance must be shared".into()));
        }
        self.q_z.check("q_z")?;
        let n = self.n_samples();
        for (spec, v) in self.specs.iter().zip(&self.views) {
            let what = format!("view {}", spec.view_id);
            if v.w.mean.shape() != (spec.dim, k) {
                return Err(Error::Shape(format!("{what}: W shape {:?}", v.w.mean.shape())));
            }
            v.w.check(&what)?;
            if v.alpha.len() != k {
                return Err(Error::Shape(format!("{what}: alpha length")));
            }
            v.alpha.check(&what)?;
            if v.tau.len() != 1 {
                return Err(Error::Shape(format!("{what}: tau length")));
            }
            v.tau.check(&what)?;
            match (&v.gamma, spec.feature_selection) {
                (Some(g), true) => {
                    if g.len() != spec.dim {
                        return Err(Error::Shape(format!("{what}: gamma length")));
                    }
                    g.check(&what)?;
                }
                (None, false) => {}
                _ => return Err(Error::Shape(format!("{what}: gamma presence mismatch"))),
            }
            if v.missing.mean.shape() != (n, spec.dim) {
                return Err(Error::Shape(format!("{what}: missing posterior shape")));
            }
            if !(v.missing.variance > 0.0 && v.missing.variance.is_finite()) {
                return Err(Error::Numerical(format!("{what}: missing variance")));
            }
        }
        Ok(())
    }
}
