use nalgebra::DMatrix;

use latentline::baselines::ImputationStrategy;
use latentline::bench::{run_benchmark, BenchmarkSpec, InputSubset, Method, ResultRow, Task};
use latentline::predict::{factor_activity, feature_relevance, predict_view, subject_trajectory, Normalization, Source};
use latentline::synth::{generate, generate_cohort, CohortConfig, SynthConfig};
use latentline::views::{build_windows, ColumnInfo, SubjectTable, VariableGroup, WindowLayout, WindowedData};
use latentline::vi::{compute_elbo, prune_factors};
use latentline::{fit, validate_dataset, FitOptions, Hyperparameters, ModelState, RowCovariance, ViewRole};

/// Expected log-likelihood of the observed and imputed cells, written out
/// term by term from the posterior moments.
fn data_fit(state: &ModelState, ds: &latentline::Dataset) -> f64 {
    let n = state.n_samples();
    let sz = state.q_z.row_cov(0).clone();
    let mut total = 0.0;
    for (m, view) in state.views.iter().enumerate() {
        let data = ds.view(m);
        let tau = view.tau.shape[0] / view.tau.rate[0];
        let log_tau = statrs::function::gamma::digamma(view.tau.shape[0]) - view.tau.rate[0].ln();
        let mut sq = 0.0;
        for d in 0..data.ncols() {
            let w = view.w.mean.row(d).transpose();
            let sw = match &view.w.cov {
                RowCovariance::Shared(c) => c.clone(),
                RowCovariance::PerRow(cs) => cs[d].clone(),
            };
            let ww = &w * w.transpose() + &sw;
            for i in 0..n {
                let z = state.q_z.mean.row(i).transpose();
                let zz = &z * z.transpose() + &sz;
                let (x, x2) = if data.mask[(i, d)] {
                    (data.values[(i, d)], data.values[(i, d)].powi(2))
                } else {
                    let mu = view.missing.mean[(i, d)];
                    (mu, mu * mu + view.missing.variance)
                };
                sq += x2 - 2.0 * x * z.dot(&w) + (zz.component_mul(&ww)).sum();
            }
        }
        let cells = (n * data.ncols()) as f64;
        total += 0.5 * cells * (log_tau - (2.0 * std::f64::consts::PI).ln()) - 0.5 * tau * sq;
    }
    total
}

#[test]
fn pruning_keeps_the_data_fit_and_never_lowers_the_bound() {
    for seed in 0..3 {
        let (ds, _) = generate(&SynthConfig::factor_recovery(300, seed)).unwrap();
        let hyper = Hyperparameters { k_init: Some(16), max_iter: 2000, seed, ..Default::default() };
        let opts = FitOptions { hyper, track_elbo_every: 1, prune_every: usize::MAX };
        let (mut st, _) = fit(&ds, &opts).unwrap();
        let k_before = st.k_current;
        let (elbo0, fit0) = (compute_elbo(&st, &ds).unwrap(), data_fit(&st, &ds));
        let removed = prune_factors(&mut st);
        assert!(removed > 0, "seed {seed}: nothing to prune");
        assert_eq!(st.k_current, k_before - removed);
        st.check_invariants().unwrap();
        let (elbo1, fit1) = (compute_elbo(&st, &ds).unwrap(), data_fit(&st, &ds));
        assert!((fit1 - fit0).abs() < 1e-4 * elbo0.abs(), "seed {seed}: data fit {fit0} -> {fit1}");
        assert!(elbo1 >= elbo0, "seed {seed}: bound {elbo0} -> {elbo1}");
    }
}

#[test]
fn feature_relevance_separates_relevant_rows() {
    let mut cfg = SynthConfig::factor_recovery(400, 11);
    cfg.relevant[0] = Some(vec![0, 1, 2, 3, 4, 5]);
    let (ds, _) = generate(&cfg).unwrap();
    let (mut specs, views) = ds.into_parts();
    specs[0].feature_selection = true;
    let ds = validate_dataset(specs, views).unwrap();
    let (st, _) = fit(&ds, &FitOptions::new(Hyperparameters { k_init: Some(10), ..Default::default() })).unwrap();
    let rel = feature_relevance(&st, 0, Normalization::UnitSum).unwrap();
    let weakest_relevant = rel.scores[..6].iter().copied().fold(f64::INFINITY, f64::min);
    let strongest_irrelevant = rel.scores[6..].iter().copied().fold(0.0, f64::max);
    assert!(weakest_relevant > 20.0 * strongest_irrelevant, "{:?}", rel.scores);
    assert!((rel.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn factor_activity_recovers_shared_and_private_structure() {
    let (ds, _) = generate(&SynthConfig::factor_recovery(500, 2)).unwrap();
    let hyper = Hyperparameters { k_init: Some(12), ..Default::default() };
    let (st, _) = fit(&ds, &FitOptions::new(hyper)).unwrap();
    let act = factor_activity(&st, 0.05);
    let patterns: Vec<Vec<usize>> =
        (0..st.k_current).map(|k| (0..st.n_views()).filter(|&m| act.is_active(m, k)).collect()).collect();
    // True structure: two factors in every view, one in views 1-2, one
    // private to view 3. The first three may come back rotated into each
    // other; the private factor cannot.
    assert_eq!(st.k_current, 4, "{patterns:?}");
    assert_eq!(patterns.iter().filter(|p| **p == vec![2]).count(), 1, "{patterns:?}");
    assert!(patterns.iter().all(|p| !p.is_empty()), "{patterns:?}");
    assert!(patterns.iter().filter(|p| p.contains(&0) && p.contains(&1)).count() >= 3, "{patterns:?}");
}

fn small_cohort(seed: u64) -> SubjectTable {
    generate_cohort(&CohortConfig { n_subjects: 25, seed, ..Default::default() }).unwrap().table
}

fn quick_hyper() -> Hyperparameters {
    Hyperparameters { k_init: Some(4), max_iter: 150, ..Default::default() }
}

fn fit_windows(data: &WindowedData) -> ModelState {
    let (ds, scaler) = data.fit_dataset(true).unwrap();
    let (mut st, _) = fit(&ds, &FitOptions::new(quick_hyper())).unwrap();
    st.standardizer = scaler;
    st
}

#[test]
fn test_target_values_never_reach_the_fit() {
    let table = small_cohort(4);
    let layout = WindowLayout::default();
    let mut poisoned = SubjectTable::new(table.catalog.clone());
    for (s, month, var, value) in table.records() {
        let group = table.catalog.group(var);
        let is_output = matches!(group, VariableGroup::V | VariableGroup::A | VariableGroup::D);
        let value = match value {
            Some(v) if month == layout.test_target && is_output && group != VariableGroup::D => Some(v * 1e3 + 7.0),
            Some(v) if month == layout.test_target && is_output => Some(2.0 - v),
            other => other,
        };
        poisoned.insert(s, month, table.catalog.name(var), value).unwrap();
    }
    let (a, b) = (build_windows(&table, &layout).unwrap(), build_windows(&poisoned, &layout).unwrap());
    assert_ne!(a.test, b.test, "poisoning should change the held-out outputs");
    assert_eq!(a.train, b.train);
    let (sa, sb) = (fit_windows(&a), fit_windows(&b));
    let rows: Vec<usize> = (a.n_train()..a.n_train() + a.n_test()).collect();
    for m in 0..a.specs.len() {
        assert_eq!(predict_view(&sa, &rows, m).unwrap(), predict_view(&sb, &rows, m).unwrap());
    }
}

/// Group of a task's own variable.
fn own_group(task: Task) -> VariableGroup {
    match task {
        Task::V => VariableGroup::V,
        Task::A => VariableGroup::A,
        Task::D => VariableGroup::D,
    }
}

fn visible(subset: InputSubset, task: Task, col: &ColumnInfo) -> bool {
    let md = matches!(col.group, VariableGroup::TI | VariableGroup::TD);
    match subset {
        InputSubset::TargetHistory => col.group == own_group(task),
        InputSubset::Md => md,
        InputSubset::MdTarget => md || col.group == own_group(task),
        InputSubset::All => true,
    }
}

/// Overwrites every cell a method may not see with a sentinel: excluded
/// input columns, other tasks' outputs, and the values under missing cells.
fn poison(data: &WindowedData, subset: InputSubset, task: Task) -> WindowedData {
    let mut out = data.clone();
    for (m, spec) in data.specs.iter().enumerate() {
        for part in [&mut out.train[m], &mut out.test[m]] {
            for j in 0..part.ncols() {
                let col = &data.design.columns[m][j];
                let hidden = match spec.role {
                    ViewRole::Input => !visible(subset, task, col),
                    ViewRole::Output => col.group != own_group(task),
                };
                for i in 0..part.nrows() {
                    if hidden || !part.mask[(i, j)] {
                        part.values[(i, j)] = 9.75e5;
                    }
                }
            }
        }
    }
    out
}

fn strip(rows: Vec<ResultRow>) -> Vec<(String, String, String, u64)> {
    rows.into_iter().map(|r| (r.method, r.input_subset, format!("{:.15e}", r.value), r.seed)).collect()
}

#[test]
fn benchmark_never_reads_cells_outside_the_input_subset() {
    let data = build_windows(&small_cohort(6), &WindowLayout::default()).unwrap();
    let methods = vec![
        Method::Sshiba,
        Method::Baseline(ImputationStrategy::Mean),
        Method::Baseline(ImputationStrategy::Temporal),
        Method::Baseline(ImputationStrategy::MostFrequent),
    ];
    for task in [Task::V, Task::A, Task::D] {
        for subset in [InputSubset::TargetHistory, InputSubset::Md, InputSubset::MdTarget] {
            let spec = BenchmarkSpec {
                tasks: vec![task],
                subsets: vec![subset],
                methods: methods.clone(),
                folds: 3,
                hyper: quick_hyper(),
                ..BenchmarkSpec::appendix_a(vec![1])
            };
            let clean = run_benchmark(&spec, &data).unwrap();
            assert!(clean.iter().all(|r| r.error.is_none()), "{clean:?}");
            let dirty = run_benchmark(&spec, &poison(&data, subset, task)).unwrap();
            assert_eq!(strip(clean), strip(dirty), "{task:?} {subset:?}");
        }
    }
}

#[test]
fn benchmark_is_deterministic() {
    let data = build_windows(&small_cohort(8), &WindowLayout::default()).unwrap();
    let spec = BenchmarkSpec { folds: 3, hyper: quick_hyper(), ..BenchmarkSpec::multitask(vec![0, 1]) };
    let a = run_benchmark(&spec, &data).unwrap();
    let b = run_benchmark(&spec, &data).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2 * 6 * 3);
}

#[test]
fn trajectory_reports_observed_values_verbatim() {
    let table = small_cohort(9);
    let data = build_windows(&table, &WindowLayout::default()).unwrap();
    let mut st = fit_windows(&data);
    st.design = Some(data.design.clone());
    let (ds, _) = data.fit_dataset(true).unwrap();
    let subject = table.subjects()[0].clone();
    let var = table.catalog.lookup("Ventricles").unwrap();
    let points = subject_trajectory(&st, &ds, &subject, "Ventricles").unwrap();
    assert!(!points.is_empty());
    for p in points {
        let month = p.month.unwrap();
        assert!(month >= 0);
        match p.source {
            Source::Observed => {
                let truth = table.get(&subject, month, var).unwrap();
                assert!((p.value - truth).abs() < 1e-9 * truth.abs().max(1.0), "month {month}");
            }
            Source::Imputed => assert!(p.std.unwrap() > 0.0),
        }
    }
}

#[test]
fn subject_table_csv_round_trip() {
    let table = small_cohort(10);
    let mut buf = Vec::new();
    table.write_csv(&mut buf).unwrap();
    let back = SubjectTable::read_csv(buf.as_slice(), &table.catalog, false).unwrap();
    let a: Vec<_> = table.records().map(|(s, m, v, x)| (s.to_string(), m, v, x)).collect();
    let b: Vec<_> = back.records().map(|(s, m, v, x)| (s.to_string(), m, v, x)).collect();
    assert_eq!(a, b);
}

#[test]
fn zero_filled_views_do_not_change_shapes() {
    let (ds, _) = generate(&SynthConfig::factor_recovery(50, 0)).unwrap();
    let (st, _) = fit(&ds, &FitOptions::new(Hyperparameters { k_init: Some(6), max_iter: 300, ..Default::default() })).unwrap();
    for (spec, v) in st.specs.iter().zip(&st.views) {
        assert_eq!(v.w.mean.shape(), (spec.dim, st.k_current));
        assert_eq!(v.missing.mean, DMatrix::zeros(50, spec.dim));
    }
}
