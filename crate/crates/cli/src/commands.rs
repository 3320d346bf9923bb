use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use latentline::bench::{format_report, run_benchmark, run_synthetic_benchmark, write_results_csv, BenchmarkSpec};
use latentline::persist::ModelFile;
use latentline::predict::{
    factor_activity, feature_relevance, impute_records, onehot_scores, predict_view, subject_trajectory, Normalization,
    Source,
};
use latentline::synth::{generate_cohort, CohortConfig};
use latentline::views::{build_windows, load_csv, Catalog, Diagnosis, SubjectTable, VariableGroup, WindowLayout, WindowedData};
use latentline::{
    fit as fit_model, validate_dataset, Dataset, Error, FitOptions, Hyperparameters, LearningRate, ModelState, Result,
    ViewKind, ViewRole,
};

use crate::table::render;
use crate::{BenchArgs, CohortArgs, FitArgs, ImputeArgs, PredictArgs, ReportKind, SynthArgs};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutFile {
    step: Option<i64>,
    lags: Option<Vec<i64>>,
    train_targets: Option<Vec<i64>>,
    masked_train_targets: Option<Vec<i64>>,
    test_target: Option<i64>,
    test_horizon: Option<i64>,
    lagged_outputs_in_td: Option<bool>,
}

fn load_layout(path: Option<&Path>) -> Result<WindowLayout> {
    let d = WindowLayout::default();
    let Some(path) = path else {
        return Ok(d);
    };
    let text = at(path, std::fs::read_to_string(path).map_err(Error::from))?;
    let f: LayoutFile = toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let layout = WindowLayout {
        step: f.step.unwrap_or(d.step),
        lags: f.lags.unwrap_or(d.lags),
        train_targets: f.train_targets.unwrap_or(d.train_targets),
        masked_train_targets: f.masked_train_targets.unwrap_or(d.masked_train_targets),
        test_target: f.test_target.unwrap_or(d.test_target),
        test_horizon: f.test_horizon.unwrap_or(d.test_horizon),
        lagged_outputs_in_td: f.lagged_outputs_in_td.unwrap_or(d.lagged_outputs_in_td),
    };
    layout.validate()?;
    Ok(layout)
}

/// Names the file in I/O and parse errors.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(_) | Error::Parse { .. } | Error::Duplicate { .. } | Error::Csv(_) => {
            Error::Data(format!("{}: {e}", path.display()))
        }
        other => other,
    })
}

fn load_catalog(path: Option<&Path>) -> Result<Catalog> {
    match path {
        Some(p) => at(p, Catalog::load(p)),
        None => Ok(Catalog::clinical_default()),
    }
}

fn parse_lr(raw: &str, n_views: usize) -> Result<(usize, LearningRate)> {
    let bad = || Error::Config(format!("--lr-view expects M=RHO or M=inv, got {raw:?}"));
    let (m, rate) = raw.split_once('=').ok_or_else(bad)?;
    let m: usize = m.trim().parse().map_err(|_| bad())?;
    if m == 0 || m > n_views {
        return Err(Error::UnknownView(m));
    }
    let rate = match rate.trim() {
        "inv" => LearningRate::InverseIteration,
        r => LearningRate::Constant(r.parse().map_err(|_| bad())?),
    };
    Ok((m - 1, rate))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(at(path, File::create(path).map_err(Error::from))?))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let catalog = load_catalog(a.catalog.as_deref())?;
    let layout = load_layout(a.layout.as_deref())?;
    let table = at(&a.data, load_csv(&a.data, &catalog, false))?;
    let mut data = build_windows(&table, &layout)?;
    for raw in &a.lr_view {
        let (m, rate) = parse_lr(raw, data.specs.len())?;
        data.specs[m].learning_rate = rate;
    }
    let (dataset, scaler) = data.fit_dataset(!a.no_standardize)?;
    let hyper = Hyperparameters { k_init: a.k_init, max_iter: a.max_iter, elbo_rel_tol: a.tol, seed: a.seed, ..Default::default() };
    hyper.validate()?;
    let k_init = hyper.resolve_k_init(dataset.n_samples(), dataset.total_dim());
    println!(
        "fit: tol={:e} max_iter={} seed={} k_init={k_init} samples={} (train {}, test {}) views={}",
        a.tol,
        a.max_iter,
        a.seed,
        dataset.n_samples(),
        data.n_train(),
        data.n_test(),
        dataset.n_views()
    );
    let (mut state, report) = fit_model(&dataset, &FitOptions::new(hyper))?;
    state.standardizer = scaler;
    state.design = Some(data.design);
    ModelFile { state, catalog: Some(catalog) }.save(&a.out)?;
    let final_elbo = report.elbo_trace.last().copied().unwrap_or(f64::NAN);
    println!("iterations: {}", report.iterations);
    println!("halted_on: {}", report.halted_on.as_str());
    println!("k_final: {}", report.k_final);
    println!("final_elbo: {final_elbo}");
    println!("wall_time_s: {:.3}", report.wall_time);
    println!("model: {}", a.out.display());
    Ok(())
}

/// The fitted model plus the subject table and the model's dataset rebuilt
/// from it. The model is fit transductively, so the data must produce
/// exactly the samples the model was fit on.
struct Loaded {
    state: ModelState,
    catalog: Catalog,
    table: SubjectTable,
    dataset: Dataset,
}

fn load_with_data(model: &Path, data: &Path) -> Result<Loaded> {
    let file = at(model, ModelFile::load(model))?;
    let catalog = file.catalog.ok_or_else(|| Error::Data("model file carries no variable catalog".into()))?;
    let state = file.state;
    let design = state.design.as_ref().ok_or_else(|| Error::Data("model file carries no window design".into()))?;
    let table = at(data, load_csv(data, &catalog, false))?;
    let windows = build_windows(&table, &design.layout)?;
    check_same_design(&state, &windows)?;
    let mut views = windows.semi_supervised_views()?;
    if let Some(s) = &state.standardizer {
        s.apply(&mut views);
    }
    let dataset = validate_dataset(state.specs.clone(), views)?;
    Ok(Loaded { state, catalog, table, dataset })
}

fn check_same_design(state: &ModelState, windows: &WindowedData) -> Result<()> {
    let design = state.design.as_ref().expect("checked by caller");
    let key = |s: &latentline::views::SampleInfo| (s.subject.clone(), s.target_month, s.is_test);
    let fitted: Vec<_> = design.samples.iter().map(key).collect();
    let given: Vec<_> = windows.design.samples.iter().map(key).collect();
    if fitted != given {
        let known: std::collections::HashSet<&str> = design.samples.iter().map(|s| s.subject.as_str()).collect();
        let detail = match windows.design.samples.iter().find(|s| !known.contains(s.subject.as_str())) {
            Some(s) => format!("subject {:?} was not part of the fit", s.subject),
            None => "the subjects or visits differ from the fit".to_string(),
        };
        return Err(Error::Data(format!("data does not match the fitted model: {detail}; refit including these data")));
    }
    if windows.specs.iter().zip(&state.specs).any(|(a, b)| a.dim != b.dim) || windows.specs.len() != state.specs.len() {
        return Err(Error::Data("data does not match the fitted model: view shapes differ".into()));
    }
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let l = load_with_data(&a.model, &a.data)?;
    let state = &l.state;
    let design = state.design.as_ref().expect("loaded");
    let views: Vec<usize> = if a.views.is_empty() {
        (0..state.specs.len()).filter(|&m| state.specs[m].role == ViewRole::Output).collect()
    } else {
        a.views
            .iter()
            .map(|&v| if v == 0 || v > state.specs.len() { Err(Error::UnknownView(v)) } else { Ok(v - 1) })
            .collect::<Result<_>>()?
    };
    let rows = design.test_rows();
    let mut out = csv_writer(&a.out)?;
    out.write_record(["subject_id", "view", "column", "mean", "variance", "label"])?;
    for &m in &views {
        let p = predict_view(state, &rows, m)?;
        for (r, &i) in rows.iter().enumerate() {
            let label = match state.specs[m].kind {
                ViewKind::Indicator => {
                    let means: Vec<f64> = p.mean.row(r).iter().copied().collect();
                    let c = onehot_scores(&means).label;
                    Diagnosis::from_index(c).map_or_else(|| c.to_string(), |d| d.as_str().to_string())
                }
                ViewKind::Real => String::new(),
            };
            for (j, col) in design.columns[m].iter().enumerate() {
                out.write_record([
                    design.samples[i].subject.as_str(),
                    &(m + 1).to_string(),
                    &col.label(),
                    &p.mean[(r, j)].to_string(),
                    &p.variance[(r, j)].to_string(),
                    &label,
                ])?;
            }
        }
    }
    out.flush()?;
    println!("predicted {} test samples x {} views -> {}", rows.len(), views.len(), a.out.display());
    Ok(())
}

fn format_value(catalog: &Catalog, variable: &str, value: f64) -> String {
    let is_dx = catalog.lookup(variable).is_some_and(|i| catalog.group(i) == VariableGroup::D);
    if is_dx {
        if let Some(d) = Diagnosis::from_index(value.round() as usize) {
            return d.as_str().to_string();
        }
    }
    value.to_string()
}

/// A value present in the input table, whether or not the window design
/// masked it during fitting.
fn table_value(l: &Loaded, subject: &str, month: Option<i64>, variable: &str) -> Option<f64> {
    let var = l.catalog.lookup(variable)?;
    match month {
        Some(m) => l.table.get(subject, m, var),
        None => l
            .table
            .records()
            .filter(|&(s, _, v, val)| s == subject && v == var && val.is_some())
            .min_by_key(|&(_, m, _, _)| m)
            .and_then(|(_, _, _, val)| val),
    }
}

pub fn impute(a: &ImputeArgs) -> Result<()> {
    let l = load_with_data(&a.model, &a.data)?;
    let records = impute_records(&l.state, &l.dataset)?;
    let mut out = csv_writer(&a.out)?;
    out.write_record(["subject_id", "month", "variable", "value", "source"])?;
    let mut imputed = 0;
    for r in &records {
        let (value, source) = match table_value(&l, &r.subject, r.month, &r.variable) {
            Some(v) => (v, Source::Observed),
            None => (r.value, r.source),
        };
        imputed += usize::from(source == Source::Imputed);
        let month = r.month.map(|m| m.to_string()).unwrap_or_default();
        out.write_record([&r.subject, &month, &r.variable, &format_value(&l.catalog, &r.variable, value), source.as_str()])?;
    }
    out.flush()?;
    println!("{} records ({imputed} imputed) -> {}", records.len(), a.out.display());
    Ok(())
}

fn emit(out: Option<&Path>, headers: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let headers: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    if let Some(path) = out {
        let mut w = csv_writer(path)?;
        w.write_record(&headers)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn report(kind: &ReportKind) -> Result<()> {
    match kind {
        ReportKind::Relevance { model, view, raw, out } => {
            let state = at(model, ModelFile::load(model))?.state;
            let norm = if *raw { Normalization::Raw } else { Normalization::UnitSum };
            let views: Vec<usize> = match view {
                Some(v) if *v == 0 || *v > state.specs.len() => return Err(Error::UnknownView(*v)),
                Some(v) => vec![v - 1],
                None => (0..state.specs.len()).filter(|&m| state.specs[m].feature_selection).collect(),
            };
            let mut rows = Vec::new();
            for m in views {
                let profile = feature_relevance(&state, m, norm)?;
                for (d, s) in profile.scores.iter().enumerate() {
                    let feature = match &state.design {
                        Some(design) => design.columns[m][d].label(),
                        None => format!("f{}", d + 1),
                    };
                    rows.push(vec![state.specs[m].name.clone(), (m + 1).to_string(), feature, format!("{s:.6}")]);
                }
            }
            let headers = ["view_name", "view", "feature", "relevance"];
            emit(out.as_deref(), &headers, &rows)?;
            print!("{}", render(&headers.map(String::from), &rows));
        }
        ReportKind::Factors { model, threshold, out } => {
            let state = at(model, ModelFile::load(model))?.state;
            let act = factor_activity(&state, *threshold);
            let mut csv_rows = Vec::new();
            let mut text_rows = Vec::new();
            for (m, spec) in state.specs.iter().enumerate() {
                let w = &state.views[m].w.mean;
                let mut line = vec![format!("{} {}", m + 1, spec.name)];
                for k in 0..state.k_current {
                    let peak = w.column(k).iter().map(|v| v.abs()).fold(0.0, f64::max);
                    let active = act.is_active(m, k);
                    csv_rows.push(vec![(m + 1).to_string(), spec.name.clone(), (k + 1).to_string(), active.to_string(), peak.to_string()]);
                    line.push(if active { "x".into() } else { ".".into() });
                }
                text_rows.push(line);
            }
            emit(out.as_deref(), &["view", "view_name", "factor", "active", "max_abs_loading"], &csv_rows)?;
            let mut headers = vec!["view".to_string()];
            headers.extend((1..=state.k_current).map(|k| format!("f{k}")));
            print!("{}", render(&headers, &text_rows));
        }
        ReportKind::Trajectory { model, data, subject, variables, out } => {
            let l = load_with_data(model, data)?;
            let vars: Vec<String> = if variables.is_empty() {
                [VariableGroup::V, VariableGroup::A, VariableGroup::D]
                    .iter()
                    .flat_map(|&g| l.catalog.of_group(g))
                    .map(|i| l.catalog.name(i).to_string())
                    .collect()
            } else {
                variables.clone()
            };
            let mut rows = Vec::new();
            for var in &vars {
                for p in subject_trajectory(&l.state, &l.dataset, subject, var)? {
                    let (value, source, std, scores) = match table_value(&l, subject, p.month, var) {
                        Some(v) => (v, Source::Observed, None, None),
                        None => (p.value, p.source, p.std, p.class_scores),
                    };
                    let scores = scores.map(|s| s.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(";"));
                    rows.push(vec![
                        var.clone(),
                        p.month.map(|m| m.to_string()).unwrap_or_default(),
                        format_value(&l.catalog, var, value),
                        source.as_str().to_string(),
                        std.map(|s| format!("{s:.4}")).unwrap_or_default(),
                        scores.unwrap_or_default(),
                    ]);
                }
            }
            let headers = ["variable", "month", "value", "source", "std", "class_scores"];
            emit(out.as_deref(), &headers, &rows)?;
            println!("subject {subject}");
            print!("{}", render(&headers.map(String::from), &rows));
        }
    }
    Ok(())
}

fn cohort_config(args: &CohortArgs, seed: u64) -> Result<CohortConfig> {
    let d = CohortConfig::default();
    let c = CohortConfig {
        n_subjects: args.subjects.unwrap_or(d.n_subjects),
        mcar: args.mcar.unwrap_or(d.mcar),
        dropout: args.dropout.unwrap_or(d.dropout),
        seed,
        ..d
    };
    c.validate()?;
    Ok(c)
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let config = cohort_config(&a.cohort, a.seed)?;
    let cohort = generate_cohort(&config)?;
    cohort.table.write_csv(create(&a.out)?)?;
    if let Some(p) = &a.catalog_out {
        create(p)?.write_all(cohort.table.catalog.to_text().as_bytes())?;
    }
    if let Some(p) = &a.complete_out {
        cohort.complete.write_csv(create(p)?)?;
    }
    println!(
        "{} subjects, {} records -> {}",
        config.n_subjects,
        cohort.table.len(),
        a.out.display()
    );
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let mut spec = BenchmarkSpec::by_name(&a.spec, a.seed.clone())?;
    spec.folds = a.folds;
    spec.hyper = Hyperparameters { k_init: a.k_init, max_iter: a.max_iter, elbo_rel_tol: a.tol, ..spec.hyper };
    let layout = load_layout(a.layout.as_deref())?;
    let rows = match &a.data {
        Some(path) => {
            let catalog = load_catalog(a.catalog.as_deref())?;
            let table = at(path, load_csv(path, &catalog, false))?;
            run_benchmark(&spec, &build_windows(&table, &layout)?)?
        }
        None => {
            let preset = a.synthetic.as_deref().unwrap_or("default");
            if preset != "default" {
                return Err(Error::Config(format!("unknown synthetic preset {preset:?} (expected default)")));
            }
            run_synthetic_benchmark(&spec, &cohort_config(&a.cohort, 0)?, &layout)?
        }
    };
    print!("{}", format_report(&rows));
    if let Some(p) = &a.out {
        write_results_csv(&rows, create(p)?)?;
    }
    if rows.iter().all(|r| r.error.is_some()) {
        return Err(Error::Numerical("every benchmark cell failed".into()));
    }
    Ok(())
}
