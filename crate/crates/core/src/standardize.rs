//! Per-feature z-scoring over observed entries.

use crate::model::{ViewData, ViewKind, ViewSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureScale {
    pub mean: f64,
    /// Always positive; zero-variance features get 1.
    pub scale: f64,
}

impl FeatureScale {
    pub const IDENTITY: FeatureScale = FeatureScale { mean: 0.0, scale: 1.0 };

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.scale
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.scale + self.mean
    }
}

/// Column scalings for each view; `None` for views left untouched (indicators).
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub views: Vec<Option<Vec<FeatureScale>>>,
}

impl Standardizer {
    pub fn fit(specs: &[ViewSpec], train: &[ViewData]) -> Standardizer {
        let views = specs
            .iter()
            .zip(train)
            .map(|(spec, data)| {
                if spec.kind == ViewKind::Indicator {
                    return None;
                }
                Some((0..data.ncols()).map(|j| fit_column(data, j)).collect())
            })
            .collect();
        Standardizer { views }
    }

    pub fn identity(specs: &[ViewSpec]) -> Standardizer {
        Standardizer { views: specs.iter().map(|_| None).collect() }
    }

    pub fn scale_of(&self, view: usize, col: usize) -> FeatureScale {
        match &self.views[view] {
            Some(cols) => cols[col],
            None => FeatureScale::IDENTITY,
        }
    }

    /// Transforms observed cells in place; unobserved cells are left as-is.
    pub fn apply(&self, data: &mut [ViewData]) {
        for (m, view) in data.iter_mut().enumerate() {
            if let Some(cols) = &self.views[m] {
                for (j, fs) in cols.iter().enumerate() {
                    for i in 0..view.nrows() {
                        if view.mask[(i, j)] {
                            view.values[(i, j)] = fs.apply(view.values[(i, j)]);
                        }
                    }
                }
            }
        }
    }

    pub fn invert(&self, data: &mut [ViewData]) {
        for (m, view) in data.iter_mut().enumerate() {
            if let Some(cols) = &self.views[m] {
                for (j, fs) in cols.iter().enumerate() {
                    for i in 0..view.nrows() {
                        if view.mask[(i, j)] {
                            view.values[(i, j)] = fs.invert(view.values[(i, j)]);
                        }
                    }
                }
            }
        }
    }
}

fn fit_column(data: &ViewData, j: usize) -> FeatureScale {
    let vals: Vec<f64> =
        (0..data.nrows()).filter(|&i| data.mask[(i, j)]).map(|i| data.values[(i, j)]).collect();
    if vals.is_empty() {
        return FeatureScale::IDENTITY;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let scale = if vals.len() > 1 {
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    FeatureScale { mean, scale: usable_scale(scale, mean) }
}

/// Returns `sd` unless it is zero, non-finite or at rounding level relative
/// to the mean (a constant column), in which case 1.
pub(crate) fn usable_scale(sd: f64, mean: f64) -> f64 {
    if sd.is_finite() && sd > 1e-12 * mean.abs() && sd > 0.0 {
        sd
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    #[test]
    fn two_values() {
        let data = ViewData::fully_observed(DMatrix::from_column_slice(2, 1, &[2.0, 4.0]));
        let s = Standardizer::fit(&[ViewSpec::real(1, 1)], &[data]);
        let fs = s.scale_of(0, 0);
        assert_eq!(fs.mean, 3.0);
        assert!((fs.scale - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn constant_feature_gets_unit_scale() {
        let mut data = vec![ViewData::fully_observed(DMatrix::from_element(4, 1, 7.0))];
        let specs = [ViewSpec::real(1, 1)];
        let s = Standardizer::fit(&specs, &data);
        assert_eq!(s.scale_of(0, 0), FeatureScale { mean: 7.0, scale: 1.0 });
        s.apply(&mut data);
        assert!(data[0].values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indicator_views_untouched() {
        let specs = [ViewSpec::real(1, 2).with_kind(ViewKind::Indicator)];
        let mut data = vec![ViewData::fully_observed(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]))];
        let before = data.clone();
        let s = Standardizer::fit(&specs, &data);
        s.apply(&mut data);
        assert_eq!(data, before);
    }

    proptest! {
        #[test]
        fn round_trip(vals in prop::collection::vec(-1e3f64..1e3, 12), mask in prop::collection::vec(any::<bool>(), 12)) {
            let values = DMatrix::from_row_slice(4, 3, &vals);
            let mask = DMatrix::from_row_slice(4, 3, &mask);
            let original = vec![ViewData::new(values, mask).unwrap()];
            let specs = [ViewSpec::real(1, 3)];
            let s = Standardizer::fit(&specs, &original);
            let mut data = original.clone();
            s.apply(&mut data);
            s.invert(&mut data);
            for i in 0..4 {
                for j in 0..3 {
                    if original[0].mask[(i, j)] {
                        let a = original[0].values[(i, j)];
                        prop_assert!((data[0].values[(i, j)] - a).abs() <= 1e-12 * (1.0 + a.abs()));
                    }
                }
            }
        }
    }
}
