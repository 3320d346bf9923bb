//! Benchmark harness: runs the factor model and the imputer + linear
//! baselines under input-view restrictions and tabulates MAE and mAUC.
//!
//! Each cell (seed, input subset, method) is an independent job. Jobs run in
//! parallel and their rows are concatenated in job order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::baselines::{
    impute, logistic_fit_cv, ridge_fit_cv, ColumnTime, ImputationStrategy, RowTime, TemporalMeta,
};
use crate::error::{Error, Result};
use crate::metrics::{mae, mauc};
use crate::model::{Hyperparameters, ViewData, ViewKind, ViewRole, ViewSpec};
use crate::predict::predict_view;
use crate::synth::{generate_cohort, CohortConfig};
use crate::vi::{fit, FitOptions};
use crate::views::{build_windows, decode_diagnosis, ColumnInfo, DesignInfo, VariableGroup, WindowLayout, WindowedData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    /// Ventricle volume at the target month.
    V,
    /// ADAS13 at the target month.
    A,
    /// Diagnosis at the target month.
    D,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::V, Task::A, Task::D];

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::V => "V",
            Task::A => "A",
            Task::D => "D",
        }
    }

    pub fn metric(&self) -> &'static str {
        match self {
            Task::D => "mAUC",
            _ => "MAE",
        }
    }

    pub fn group(&self) -> VariableGroup {
        match self {
            Task::V => VariableGroup::V,
            Task::A => VariableGroup::A,
            Task::D => VariableGroup::D,
        }
    }

    fn is_classification(&self) -> bool {
        *self == Task::D
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Sshiba,
    /// Imputer followed by ridge (regression tasks) or logistic regression (diagnosis).
    Baseline(ImputationStrategy),
}

impl Method {
    pub fn all() -> Vec<Method> {
        std::iter::once(Method::Sshiba).chain(ImputationStrategy::ALL.map(Method::Baseline)).collect()
    }

    pub fn label(&self, task: Task) -> String {
        match self {
            Method::Sshiba => "sshiba".into(),
            Method::Baseline(s) if task.is_classification() => format!("logistic+{}", s.as_str()),
            Method::Baseline(s) => format!("ridge+{}", s.as_str()),
        }
    }
}

/// Which input columns a method may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputSubset {
    /// Lagged values of the task's own variable.
    TargetHistory,
    /// Time-independent and time-dependent variables.
    Md,
    /// Union of the two above.
    MdTarget,
    /// Every input column.
    All,
}

impl InputSubset {
    pub fn label(&self, task: Option<Task>) -> String {
        let t = task.map_or("outputs", |t| t.as_str());
        match self {
            InputSubset::TargetHistory => t.to_string(),
            InputSubset::Md => "MD".into(),
            InputSubset::MdTarget => format!("MD+{t}"),
            InputSubset::All => "all".into(),
        }
    }

    fn keeps(&self, col: &ColumnInfo, tasks: &[Task]) -> bool {
        let md = matches!(col.group, VariableGroup::TI | VariableGroup::TD);
        let own = tasks.iter().any(|t| t.group() == col.group);
        match self {
            InputSubset::TargetHistory => own,
            InputSubset::Md => md,
            InputSubset::MdTarget => md || own,
            InputSubset::All => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// One task at a time, each under the three input subsets.
    SingleTask,
    /// All tasks from one fit on every input.
    MultiTask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub protocol: Protocol,
    pub tasks: Vec<Task>,
    pub subsets: Vec<InputSubset>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub folds: usize,
    pub hyper: Hyperparameters,
    pub standardize: bool,
}

impl BenchmarkSpec {
    /// Single-task ablation: each output from its own history, from the
    /// other variables, and from both.
    pub fn appendix_a(seeds: Vec<u64>) -> Self {
        BenchmarkSpec {
            protocol: Protocol::SingleTask,
            tasks: Task::ALL.to_vec(),
            subsets: vec![InputSubset::TargetHistory, InputSubset::Md, InputSubset::MdTarget],
            methods: Method::all(),
            seeds,
            folds: 10,
            hyper: Hyperparameters::default(),
            standardize: true,
        }
    }

    /// Simultaneous prediction of the three outputs from all inputs.
    pub fn multitask(seeds: Vec<u64>) -> Self {
        BenchmarkSpec {
            protocol: Protocol::MultiTask,
            subsets: vec![InputSubset::All],
            ..Self::appendix_a(seeds)
        }
    }

    pub fn by_name(name: &str, seeds: Vec<u64>) -> Result<Self> {
        match name {
            "appendixA" => Ok(Self::appendix_a(seeds)),
            "multitask" => Ok(Self::multitask(seeds)),
            other => Err(Error::Config(format!("unknown benchmark spec {other:?} (expected appendixA or multitask)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() || self.subsets.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("benchmark needs tasks, subsets, methods and seeds".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("benchmark needs at least 2 folds".into()));
        }
        self.hyper.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub input_subset: String,
    pub task: String,
    pub metric: String,
    /// NaN when the cell failed.
    pub value: f64,
    pub seed: u64,
    pub error: Option<String>,
}

/// Restricts a window dataset to the chosen input columns (dropping input
/// views left empty) and output views. View ids are renumbered from 1.
pub fn restrict(data: &WindowedData, keep: &dyn Fn(&ColumnInfo) -> bool, outputs: &[usize]) -> Result<WindowedData> {
    let mut specs = Vec::new();
    let (mut train, mut test, mut columns) = (Vec::new(), Vec::new(), Vec::new());
    for (m, spec) in data.specs.iter().enumerate() {
        let cols: Vec<usize> = match spec.role {
            ViewRole::Input => (0..spec.dim).filter(|&j| keep(&data.design.columns[m][j])).collect(),
            ViewRole::Output if outputs.contains(&m) => (0..spec.dim).collect(),
            ViewRole::Output => Vec::new(),
        };
        if cols.is_empty() {
            continue;
        }
        let mut s: ViewSpec = spec.clone();
        s.view_id = specs.len() + 1;
        s.dim = cols.len();
        specs.push(s);
        train.push(data.train[m].select_columns(&cols));
        test.push(data.test[m].select_columns(&cols));
        columns.push(cols.iter().map(|&j| data.design.columns[m][j].clone()).collect());
    }
    if !specs.iter().any(|s| s.role == ViewRole::Input) {
        return Err(Error::Config("input subset selects no columns".into()));
    }
    Ok(WindowedData { specs, train, test, design: DesignInfo { columns, ..data.design.clone() } })
}

fn output_view(data: &WindowedData, task: Task) -> Result<usize> {
    (0..data.specs.len())
        .find(|&m| data.specs[m].role == ViewRole::Output && data.design.columns[m][0].group == task.group())
        .ok_or_else(|| Error::Config(format!("no output view for task {}", task.as_str())))
}

/// Predictions for the test samples of one task.
enum TaskPrediction {
    /// Per output column.
    Values(DMatrix<f64>),
    /// Class scores per test sample.
    Scores(DMatrix<f64>),
}

fn evaluate(data: &WindowedData, task: Task, pred: &TaskPrediction) -> Result<f64> {
    let m = output_view(data, task)?;
    let truth = &data.test[m];
    match pred {
        TaskPrediction::Values(p) => {
            let (mut t, mut q) = (Vec::new(), Vec::new());
            for j in 0..truth.ncols() {
                for i in 0..truth.nrows() {
                    if truth.mask[(i, j)] {
                        t.push(truth.values[(i, j)]);
                        q.push(p[(i, j)]);
                    }
                }
            }
            mae(&t, &q)
        }
        TaskPrediction::Scores(s) => {
            let labels = decode_diagnosis(truth);
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
            let y: Vec<usize> = rows.iter().map(|&i| labels[i].expect("filtered").index()).collect();
            mauc(&s.select_rows(&rows), &y)
        }
    }
}

fn run_sshiba(data: &WindowedData, tasks: &[Task], spec: &BenchmarkSpec, seed: u64) -> Result<Vec<TaskPrediction>> {
    let (dataset, scaler) = data.fit_dataset(spec.standardize)?;
    let hyper = Hyperparameters { seed, ..spec.hyper.clone() };
    let (mut state, _) = fit(&dataset, &FitOptions::new(hyper))?;
    state.standardizer = scaler;
    let n_train = data.n_train();
    let rows: Vec<usize> = (n_train..n_train + data.n_test()).collect();
    tasks
        .iter()
        .map(|&task| {
            let m = output_view(data, task)?;
            let mean = predict_view(&state, &rows, m)?.mean;
            // Ranking uses the unclipped predictive means: clipping to [0, 1]
            // would tie every sample predicted above 1.
            Ok(match data.specs[m].kind {
                ViewKind::Indicator => TaskPrediction::Scores(mean),
                ViewKind::Real => TaskPrediction::Values(mean),
            })
        })
        .collect()
}

fn column_times(design: &DesignInfo, views: &[usize]) -> Vec<ColumnTime> {
    views
        .iter()
        .flat_map(|&m| design.columns[m].iter())
        .map(|c| ColumnTime {
            variable: match c.class {
                Some(k) => format!("{}#{k}", c.variable),
                None => c.variable.clone(),
            },
            offset: c.offset,
        })
        .collect()
}

fn run_baseline(
    data: &WindowedData,
    tasks: &[Task],
    strategy: ImputationStrategy,
    folds: usize,
    seed: u64,
) -> Result<Vec<TaskPrediction>> {
    let inputs: Vec<usize> = (0..data.specs.len()).filter(|&m| data.specs[m].role == ViewRole::Input).collect();
    let xtr = ViewData::hstack(&inputs.iter().map(|&m| &data.train[m]).collect::<Vec<_>>())?;
    let xte = ViewData::hstack(&inputs.iter().map(|&m| &data.test[m]).collect::<Vec<_>>())?;
    let times = |rows: Vec<usize>| -> Vec<RowTime> {
        rows.into_iter()
            .map(|i| RowTime {
                subject: data.design.samples[i].subject.clone(),
                month: data.design.samples[i].target_month,
            })
            .collect()
    };
    let (train_rows, test_rows) = (times(data.design.train_rows()), times(data.design.test_rows()));
    let columns = column_times(&data.design, &inputs);
    let meta_tr = TemporalMeta { train_rows: &train_rows, apply_rows: &train_rows, columns: &columns };
    let meta_te = TemporalMeta { train_rows: &train_rows, apply_rows: &test_rows, columns: &columns };
    let ftr = impute(&xtr, &xtr, strategy, Some(&meta_tr))?;
    let fte = impute(&xtr, &xte, strategy, Some(&meta_te))?;

    tasks
        .iter()
        .map(|&task| {
            let m = output_view(data, task)?;
            let out = &data.train[m];
            if task.is_classification() {
                let labels = decode_diagnosis(out);
                let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
                let y: Vec<usize> = rows.iter().map(|&i| labels[i].expect("filtered").index()).collect();
                let model = logistic_fit_cv(&ftr.select_rows(&rows), &y, folds, seed)?;
                let mut scores = model.predict_scores(&fte);
                if scores.ncols() < 3 {
                    scores = scores.resize_horizontally(3, 0.0);
                }
                Ok(TaskPrediction::Scores(scores))
            } else {
                let mut pred = DMatrix::zeros(data.n_test(), out.ncols());
                for j in 0..out.ncols() {
                    let rows: Vec<usize> = (0..out.nrows()).filter(|&i| out.mask[(i, j)]).collect();
                    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| out.values[(i, j)]));
                    let model = ridge_fit_cv(&ftr.select_rows(&rows), &y, folds, seed)?;
                    pred.set_column(j, &model.predict(&fte));
                }
                Ok(TaskPrediction::Values(pred))
            }
        })
        .collect()
}

struct Job {
    seed: u64,
    subset: InputSubset,
    method: Method,
    tasks: Vec<Task>,
}

fn jobs(spec: &BenchmarkSpec) -> Vec<Job> {
    let mut out = Vec::new();
    for &seed in &spec.seeds {
        match spec.protocol {
            Protocol::SingleTask => {
                for &task in &spec.tasks {
                    for &subset in &spec.subsets {
                        for &method in &spec.methods {
                            out.push(Job { seed, subset, method, tasks: vec![task] });
                        }
                    }
                }
            }
            Protocol::MultiTask => {
                for &subset in &spec.subsets {
                    for &method in &spec.methods {
                        out.push(Job { seed, subset, method, tasks: spec.tasks.clone() });
                    }
                }
            }
        }
    }
    out
}

fn run_job(data: &WindowedData, spec: &BenchmarkSpec, job: &Job) -> Vec<ResultRow> {
    let subset_task = (job.tasks.len() == 1).then(|| job.tasks[0]);
    let attempt = || -> Result<(WindowedData, Vec<TaskPrediction>)> {
        let outputs: Vec<usize> = job.tasks.iter().map(|&t| output_view(data, t)).collect::<Result<_>>()?;
        let keep = |c: &ColumnInfo| job.subset.keeps(c, &job.tasks);
        let restricted = restrict(data, &keep, &outputs)?;
        let preds = match job.method {
            Method::Sshiba => run_sshiba(&restricted, &job.tasks, spec, job.seed)?,
            Method::Baseline(s) => run_baseline(&restricted, &job.tasks, s, spec.folds, job.seed)?,
        };
        Ok((restricted, preds))
    };
    let outcome = attempt();
    job.tasks
        .iter()
        .enumerate()
        .map(|(t, &task)| {
            let value = match &outcome {
                Ok((restricted, preds)) => evaluate(restricted, task, &preds[t]),
                Err(e) => Err(Error::Data(e.to_string())),
            };
            let (value, error) = match value {
                Ok(v) => (v, None),
                Err(e) => (f64::NAN, Some(e.to_string())),
            };
            ResultRow {
                method: job.method.label(task),
                input_subset: job.subset.label(subset_task),
                task: task.as_str().into(),
                metric: task.metric().into(),
                value,
                seed: job.seed,
                error,
            }
        })
        .collect()
}

/// Runs every cell of the benchmark on one window dataset. Failures are
/// recorded in the affected rows.
pub fn run_benchmark(spec: &BenchmarkSpec, data: &WindowedData) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let jobs = jobs(spec);
    let rows: Vec<Vec<ResultRow>> = jobs.par_iter().map(|job| run_job(data, spec, job)).collect();
    Ok(rows.into_iter().flatten().collect())
}

/// Generates one cohort per seed (overriding the cohort seed) and runs the
/// benchmark on each with that seed.
pub fn run_synthetic_benchmark(
    spec: &BenchmarkSpec,
    cohort: &CohortConfig,
    layout: &WindowLayout,
) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let c = generate_cohort(&CohortConfig { seed, ..cohort.clone() })?;
        let data = build_windows(&c.table, layout)?;
        rows.extend(run_benchmark(&BenchmarkSpec { seeds: vec![seed], ..spec.clone() }, &data)?);
    }
    Ok(rows)
}

pub fn write_results_csv<W: Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "input_subset", "task", "metric", "value", "seed"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for r in rows {
        let value = if r.value.is_nan() { "NaN".to_string() } else { format!("{}", r.value) };
        out.write_record([&r.method, &r.input_subset, &r.task, &r.metric, &value, &r.seed.to_string()])
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

fn push_unique<T: PartialEq + Clone>(v: &mut Vec<T>, x: &T) {
    if !v.contains(x) {
        v.push(x.clone());
    }
}

/// One block per task: rows are methods, columns are input subsets, cells
/// are the mean (and standard deviation over seeds when there are several).
pub fn format_report(rows: &[ResultRow]) -> String {
    let mut tasks = Vec::new();
    for r in rows {
        push_unique(&mut tasks, &(r.task.clone(), r.metric.clone()));
    }
    let mut out = String::new();
    for (task, metric) in &tasks {
        let block: Vec<&ResultRow> = rows.iter().filter(|r| &r.task == task).collect();
        let (mut methods, mut subsets) = (Vec::new(), Vec::new());
        let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for r in &block {
            push_unique(&mut methods, &r.method);
            push_unique(&mut subsets, &r.input_subset);
            cells.entry((r.method.clone(), r.input_subset.clone())).or_default().push(r.value);
        }
        let render = |vals: &[f64]| -> String {
            if vals.iter().any(|v| v.is_nan()) {
                return "failed".into();
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            if vals.len() < 2 {
                return format!("{mean:.4}");
            }
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            format!("{mean:.4} +- {sd:.4}")
        };
        let mut table: Vec<Vec<String>> = vec![std::iter::once("method".to_string()).chain(subsets.clone()).collect()];
        for m in &methods {
            let mut line = vec![m.clone()];
            for s in &subsets {
                line.push(cells.get(&(m.clone(), s.clone())).map_or("-".into(), |v| render(v)));
            }
            table.push(line);
        }
        let widths: Vec<usize> = (0..table[0].len()).map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let _ = writeln!(out, "Task {task} ({metric})");
        for (i, line) in table.iter().enumerate() {
            let cols: Vec<String> = line
                .iter()
                .enumerate()
                .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                .collect();
            let _ = writeln!(out, "{}", cols.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
            }
        }
        out.push('\n');
    }
    let failures: Vec<&ResultRow> = rows.iter().filter(|r| r.error.is_some()).collect();
    for r in failures {
        let _ = writeln!(
            out,
            "failed: {} / {} / {} (seed {}): {}",
            r.method,
            r.input_subset,
            r.task,
            r.seed,
            r.error.as_deref().unwrap_or("")
        );
    }
    out
}
