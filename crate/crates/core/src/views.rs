//! Long-format subject tables and their assembly into the 14-view sliding
//! window layout.
//!
//! Every subject contributes one training sample per training target month
//! and one test sample. Input views hold the time-independent block and the
//! lagged time-dependent and diagnosis blocks; output views hold diagnosis,
//! ventricle volume and ADAS13 at the target month.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{validate_dataset, Dataset, LearningRate, ViewData, ViewKind, ViewRole, ViewSpec};
use crate::standardize::Standardizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariableGroup {
    /// Time-independent.
    TI,
    /// Time-dependent.
    TD,
    /// Ventricle volume.
    V,
    /// ADAS13.
    A,
    /// Diagnosis.
    D,
}

impl VariableGroup {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.trim() {
            "TI" => VariableGroup::TI,
            "TD" => VariableGroup::TD,
            "V" => VariableGroup::V,
            "A" => VariableGroup::A,
            "D" => VariableGroup::D,
            _ => return None,
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            VariableGroup::TI => "TI",
            VariableGroup::TD => "TD",
            VariableGroup::V => "V",
            VariableGroup::A => "A",
            VariableGroup::D => "D",
        }
    }
}

/// Three-class clinical diagnosis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Diagnosis {
    NC,
    MCI,
    AD,
}

impl Diagnosis {
    pub const ALL: [Diagnosis; 3] = [Diagnosis::NC, Diagnosis::MCI, Diagnosis::AD];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "NC" | "0" => Ok(Diagnosis::NC),
            "MCI" | "1" => Ok(Diagnosis::MCI),
            "AD" | "2" => Ok(Diagnosis::AD),
            other => Err(Error::Data(format!("unknown diagnosis label {other:?}"))),
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Diagnosis::ALL.get(i).copied()
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Diagnosis::NC => "NC",
            Diagnosis::MCI => "MCI",
            Diagnosis::AD => "AD",
        }
    }
}

/// One-hot encodes diagnosis labels; a missing label masks all three columns.
pub fn encode_diagnosis(labels: &[Option<&str>]) -> Result<ViewData> {
    let n = labels.len();
    let mut values = DMatrix::zeros(n, 3);
    let mut mask = DMatrix::from_element(n, 3, false);
    for (i, label) in labels.iter().enumerate() {
        if let Some(l) = label {
            let d = Diagnosis::parse(l)?;
            values[(i, d.index())] = 1.0;
            for c in 0..3 {
                mask[(i, c)] = true;
            }
        }
    }
    ViewData::new(values, mask)
}

/// Inverse of [`encode_diagnosis`] for observed rows (argmax, ties to the lowest class).
pub fn decode_diagnosis(data: &ViewData) -> Vec<Option<Diagnosis>> {
    (0..data.nrows())
        .map(|i| {
            if !(0..3).all(|c| data.mask[(i, c)]) {
                return None;
            }
            let mut best = 0;
            for c in 1..3 {
                if data.values[(i, c)] > data.values[(i, best)] {
                    best = c;
                }
            }
            Diagnosis::from_index(best)
        })
        .collect()
}

/// Ordered variable catalog with group tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    entries: Vec<(String, VariableGroup)>,
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(entries: Vec<(String, VariableGroup)>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, (name, _)) in entries.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Data(format!("variable {name:?} listed twice in catalog")));
            }
        }
        Ok(Catalog { entries, index })
    }

    /// Parses `variable,group` lines. Blank lines, `#` comments and a
    /// `variable,group` header are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r').trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, group) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse { line: lineno + 1, msg: format!("expected `variable,group`, got {line:?}") })?;
            if lineno == 0 && name.trim() == "variable" && group.trim() == "group" {
                continue;
            }
            let group = VariableGroup::parse(group)
                .ok_or_else(|| Error::Parse { line: lineno + 1, msg: format!("unknown group {:?}", group.trim()) })?;
            entries.push((name.trim().to_string(), group));
        }
        Catalog::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Catalog::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("variable,group\n");
        for (name, g) in &self.entries {
            s.push_str(&format!("{name},{}\n", g.as_str()));
        }
        s
    }

    /// The variables of the longitudinal Alzheimer's cohort setup.
    pub fn clinical_default() -> Self {
        use VariableGroup::*;
        let vars: [(&str, VariableGroup); 33] = [
            ("Age", TI),
            ("Sex", TI),
            ("APOE4", TI),
            ("Education", TI),
            ("AngularLeft", TI),
            ("AngularRight", TI),
            ("CingulumPostBilateral", TI),
            ("TemporalLeft", TI),
            ("TemporalRight", TI),
            ("MMSE", TD),
            ("RAVLT_learning", TD),
            ("RAVLT_immediate", TD),
            ("RAVLT_perc_forgetting", TD),
            ("FAQ", TD),
            ("CerebellumGreyMatter", TD),
            ("WholeCerebellum", TD),
            ("ErodedSubcorticalWM", TD),
            ("Frontal", TD),
            ("Cingulate", TD),
            ("Parietal", TD),
            ("Temporal", TD),
            ("ABETA", TD),
            ("TAU", TD),
            ("PTAU", TD),
            ("Hippocampus", TD),
            ("WholeBrain", TD),
            ("Entorhinal", TD),
            ("Fusiform", TD),
            ("MidTemp", TD),
            ("ICV", TD),
            ("Ventricles", V),
            ("ADAS13", A),
            ("DX", D),
        ];
        Catalog::new(vars.iter().map(|(n, g)| (n.to_string(), *g)).collect()).expect("unique names")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, VariableGroup)] {
        &self.entries
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn group(&self, idx: usize) -> VariableGroup {
        self.entries[idx].1
    }

    pub fn of_group(&self, g: VariableGroup) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].1 == g).collect()
    }
}

/// Long-format longitudinal records keyed by (subject, month, variable).
///
/// Diagnosis values are stored as class indices (0 = NC, 1 = MCI, 2 = AD).
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectTable {
    pub catalog: Catalog,
    records: BTreeMap<(String, i64, usize), Option<f64>>,
}

impl SubjectTable {
    pub fn new(catalog: Catalog) -> Self {
        SubjectTable { catalog, records: BTreeMap::new() }
    }

    /// Inserts a record; returns false if the key already existed (value replaced).
    pub fn insert(&mut self, subject: &str, month: i64, variable: &str, value: Option<f64>) -> Result<bool> {
        let v = self
            .catalog
            .lookup(variable)
            .ok_or_else(|| Error::Data(format!("unknown variable {variable:?}")))?;
        Ok(self.records.insert((subject.to_string(), month, v), value).is_none())
    }

    pub fn get(&self, subject: &str, month: i64, var: usize) -> Option<f64> {
        self.records.get(&(subject.to_string(), month, var)).copied().flatten()
    }

    pub fn contains(&self, subject: &str, month: i64, var: usize) -> bool {
        self.records.contains_key(&(subject.to_string(), month, var))
    }

    pub fn subjects(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.records.keys().map(|(s, _, _)| s).collect();
        set.into_iter().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Iterates `(subject, month, variable index, value)` in key order.
    pub fn records(&self) -> impl Iterator<Item = (&str, i64, usize, Option<f64>)> {
        self.records.iter().map(|((s, m, v), val)| (s.as_str(), *m, *v, *val))
    }

    pub fn format_value(&self, var: usize, value: f64) -> String {
        if self.catalog.group(var) == VariableGroup::D {
            if let Some(d) = Diagnosis::from_index(value.round() as usize) {
                return d.as_str().to_string();
            }
        }
        format!("{value}")
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["subject_id", "month", "variable", "value"])?;
        for (s, m, v, val) in self.records() {
            let value = val.map(|x| self.format_value(v, x)).unwrap_or_default();
            wtr.write_record([s, &m.to_string(), self.catalog.name(v), &value])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, catalog: &Catalog, allow_extra: bool) -> Result<SubjectTable> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["subject_id", "month", "variable", "value"];
        if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(Error::Parse { line: 1, msg: format!("expected header {}", expected.join(",")) });
        }
        let mut table = SubjectTable::new(catalog.clone());
        let mut lines: HashMap<(String, i64, usize), usize> = HashMap::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                Error::Parse { line, msg: e.to_string() }
            })?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            if rec.len() != 4 {
                return Err(Error::Parse { line, msg: format!("expected 4 fields, got {}", rec.len()) });
            }
            let subject = rec[0].to_string();
            if subject.is_empty() {
                return Err(Error::Parse { line, msg: "empty subject_id".into() });
            }
            let month: i64 =
                rec[1].parse().map_err(|_| Error::Parse { line, msg: format!("invalid month {:?}", &rec[1]) })?;
            let Some(var) = catalog.lookup(&rec[2]) else {
                if allow_extra {
                    continue;
                }
                return Err(Error::Parse { line, msg: format!("unknown variable {:?}", &rec[2]) });
            };
            let raw = &rec[3];
            let value = if raw.is_empty() {
                None
            } else if catalog.group(var) == VariableGroup::D {
                Some(Diagnosis::parse(raw).map_err(|e| Error::Parse { line, msg: e.to_string() })?.index() as f64)
            } else {
                let v: f64 =
                    raw.parse().map_err(|_| Error::Parse { line, msg: format!("invalid value {raw:?}") })?;
                if !v.is_finite() {
                    return Err(Error::Parse { line, msg: format!("non-finite value {raw:?}") });
                }
                Some(v)
            };
            let key = (subject.clone(), month, var);
            if let Some(&first) = lines.get(&key) {
                return Err(Error::Duplicate {
                    subject,
                    month,
                    variable: catalog.name(var).to_string(),
                    first,
                    second: line,
                });
            }
            lines.insert(key.clone(), line);
            table.records.insert(key, value);
        }
        Ok(table)
    }
}

/// Parses a long-format CSV (`subject_id,month,variable,value`).
pub fn load_csv(path: impl AsRef<Path>, catalog: &Catalog, allow_extra: bool) -> Result<SubjectTable> {
    let f = std::fs::File::open(path)?;
    SubjectTable::read_csv(f, catalog, allow_extra)
}

/// Month offsets and targets of the sliding-window layout.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowLayout {
    /// Visit spacing in months.
    pub step: i64,
    /// Lag offsets relative to the target month, strictly increasing and negative.
    pub lags: Vec<i64>,
    /// Target months of the training windows, in order.
    pub train_targets: Vec<i64>,
    /// Training targets whose output views are masked.
    pub masked_train_targets: Vec<i64>,
    pub test_target: i64,
    /// Test inputs use only lags at least this many months before the target.
    pub test_horizon: i64,
    /// Put lagged V and A columns inside the lagged TD views.
    pub lagged_outputs_in_td: bool,
}

impl Default for WindowLayout {
    fn default() -> Self {
        WindowLayout {
            step: 6,
            lags: vec![-30, -24, -18, -12, -6],
            train_targets: vec![6, 12, 18, 24, 30],
            masked_train_targets: vec![30],
            test_target: 36,
            test_horizon: 12,
            lagged_outputs_in_td: true,
        }
    }
}

impl WindowLayout {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("window layout: {m}")));
        if self.step <= 0 {
            return bad("step must be positive");
        }
        if self.lags.is_empty() {
            return bad("at least one lag is required");
        }
        if self.lags.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lags must be strictly increasing");
        }
        if self.lags.iter().any(|&l| l >= 0 || l % self.step != 0) {
            return bad("lags must be negative multiples of the step");
        }
        let months = self.train_targets.iter().chain(std::iter::once(&self.test_target));
        if months.clone().any(|&t| t % self.step != 0) {
            return bad("targets must be multiples of the step");
        }
        if self.train_targets.iter().any(|&t| t >= self.test_target) {
            return bad("training targets must precede the test target");
        }
        if self.masked_train_targets.iter().any(|t| !self.train_targets.contains(t)) {
            return bad("masked targets must be training targets");
        }
        if self.test_horizon <= 0 || self.lags.iter().all(|&l| -l < self.test_horizon) {
            return bad("test horizon leaves no input lag");
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        1 + 2 * self.lags.len() + 3
    }

    /// Whether the test sample uses lag position `p`.
    pub fn test_uses_lag(&self, p: usize) -> bool {
        -self.lags[p] >= self.test_horizon
    }
}

/// Identity of one window sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleInfo {
    pub subject: String,
    pub target_month: i64,
    /// Position among the subject's windows; the test sample comes last.
    pub window: usize,
    pub is_test: bool,
}

/// Origin of one view column.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnInfo {
    pub variable: String,
    pub group: VariableGroup,
    /// Month offset relative to the sample's target; `None` for time-independent columns.
    pub offset: Option<i64>,
    /// Diagnosis class for one-vs-all indicator columns.
    pub class: Option<usize>,
}

impl ColumnInfo {
    pub fn label(&self) -> String {
        let mut s = self.variable.clone();
        if let Some(c) = self.class.and_then(Diagnosis::from_index) {
            s.push('=');
            s.push_str(c.as_str());
        }
        match self.offset {
            Some(0) => s.push_str("[t]"),
            Some(o) => s.push_str(&format!("[t{o}]")),
            None => {}
        }
        s
    }
}

/// Sample and column provenance of an assembled window dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignInfo {
    pub layout: WindowLayout,
    /// Training samples first (subject-major, window order), then test samples.
    pub samples: Vec<SampleInfo>,
    pub columns: Vec<Vec<ColumnInfo>>,
}

impl DesignInfo {
    pub fn test_rows(&self) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].is_test).collect()
    }

    pub fn train_rows(&self) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| !self.samples[i].is_test).collect()
    }

    /// Absolute month of a cell, `None` for time-independent columns.
    pub fn cell_month(&self, row: usize, view: usize, col: usize) -> Option<i64> {
        self.columns[view][col].offset.map(|o| self.samples[row].target_month + o)
    }
}

/// Output of [`build_windows`]: train and test samples with shared view specs.
#[derive(Debug, Clone)]
pub struct WindowedData {
    pub specs: Vec<ViewSpec>,
    pub train: Vec<ViewData>,
    /// Test samples with their target-month outputs filled in from the table.
    pub test: Vec<ViewData>,
    pub design: DesignInfo,
}

/// Indices of the views in the window layout.
#[derive(Debug, Clone, Copy)]
pub struct ViewIndex {
    pub n_lags: usize,
}

impl ViewIndex {
    pub fn ti(&self) -> usize {
        0
    }
    pub fn td(&self, p: usize) -> usize {
        1 + p
    }
    pub fn dx_lag(&self, p: usize) -> usize {
        1 + self.n_lags + p
    }
    pub fn out_dx(&self) -> usize {
        1 + 2 * self.n_lags
    }
    pub fn out_v(&self) -> usize {
        2 + 2 * self.n_lags
    }
    pub fn out_a(&self) -> usize {
        3 + 2 * self.n_lags
    }
    pub fn outputs(&self) -> [usize; 3] {
        [self.out_dx(), self.out_v(), self.out_a()]
    }
}

struct Groups {
    ti: Vec<usize>,
    td: Vec<usize>,
    v: Vec<usize>,
    a: Vec<usize>,
    d: usize,
}

fn catalog_groups(catalog: &Catalog, layout: &WindowLayout) -> Result<(Groups, Vec<usize>)> {
    use VariableGroup::*;
    let d = catalog.of_group(D);
    if d.len() != 1 {
        return Err(Error::Config(format!("catalog must have exactly one D variable, found {}", d.len())));
    }
    let g = Groups { ti: catalog.of_group(TI), td: catalog.of_group(TD), v: catalog.of_group(V), a: catalog.of_group(A), d: d[0] };
    if g.v.is_empty() || g.a.is_empty() {
        return Err(Error::Config("catalog must have at least one V and one A variable".into()));
    }
    if g.ti.is_empty() {
        return Err(Error::Config("catalog must have at least one TI variable".into()));
    }
    let mut lag_cols = g.td.clone();
    if layout.lagged_outputs_in_td {
        lag_cols.extend(&g.v);
        lag_cols.extend(&g.a);
    }
    if lag_cols.is_empty() {
        return Err(Error::Config("no columns for the lagged TD views".into()));
    }
    Ok((g, lag_cols))
}

fn view_specs_and_columns(catalog: &Catalog, layout: &WindowLayout) -> Result<(Vec<ViewSpec>, Vec<Vec<ColumnInfo>>)> {
    let (g, lag_cols) = catalog_groups(catalog, layout)?;
    let idx = ViewIndex { n_lags: layout.lags.len() };
    let mut specs = Vec::new();
    let mut cols = Vec::new();
    let col = |v: usize, offset: Option<i64>, class: Option<usize>| ColumnInfo {
        variable: catalog.name(v).to_string(),
        group: catalog.group(v),
        offset,
        class,
    };
    specs.push(ViewSpec::real(1, g.ti.len()).with_feature_selection(true).with_name("TI"));
    cols.push(g.ti.iter().map(|&v| col(v, None, None)).collect());
    for (p, &lag) in layout.lags.iter().enumerate() {
        specs.push(
            ViewSpec::real(idx.td(p) + 1, lag_cols.len())
                .with_feature_selection(true)
                .with_name(format!("TD[t{lag}]")),
        );
        cols.push(lag_cols.iter().map(|&v| col(v, Some(lag), None)).collect());
    }
    for (p, &lag) in layout.lags.iter().enumerate() {
        specs.push(ViewSpec::real(idx.dx_lag(p) + 1, 3).with_kind(ViewKind::Indicator).with_name(format!("D[t{lag}]")));
        cols.push((0..3).map(|c| col(g.d, Some(lag), Some(c))).collect());
    }
    specs.push(
        ViewSpec::real(idx.out_dx() + 1, 3).with_kind(ViewKind::Indicator).with_role(ViewRole::Output).with_name("D[t]"),
    );
    cols.push((0..3).map(|c| col(g.d, Some(0), Some(c))).collect());
    specs.push(ViewSpec::real(idx.out_v() + 1, g.v.len()).with_role(ViewRole::Output).with_name("V[t]"));
    cols.push(g.v.iter().map(|&v| col(v, Some(0), None)).collect());
    specs.push(ViewSpec::real(idx.out_a() + 1, g.a.len()).with_role(ViewRole::Output).with_name("A[t]"));
    cols.push(g.a.iter().map(|&v| col(v, Some(0), None)).collect());
    Ok((apply_default_learning_rates(specs), cols))
}

/// Learning rates of the longitudinal setup: 1/iteration for the lagged
/// diagnosis views and the diagnosis output, 1 for the ADAS13 output and
/// 0.9 for every other view.
pub fn apply_default_learning_rates(mut specs: Vec<ViewSpec>) -> Vec<ViewSpec> {
    let n_lags = (specs.len() - 4) / 2;
    let idx = ViewIndex { n_lags };
    for (m, spec) in specs.iter_mut().enumerate() {
        spec.learning_rate = if (idx.dx_lag(0)..=idx.out_dx()).contains(&m) {
            LearningRate::InverseIteration
        } else if m == idx.out_a() {
            LearningRate::Constant(1.0)
        } else {
            LearningRate::Constant(0.9)
        };
    }
    specs
}

pub fn build_windows(table: &SubjectTable, layout: &WindowLayout) -> Result<WindowedData> {
    layout.validate()?;
    let catalog = &table.catalog;
    let (g, lag_cols) = catalog_groups(catalog, layout)?;
    let (specs, columns) = view_specs_and_columns(catalog, layout)?;
    let idx = ViewIndex { n_lags: layout.lags.len() };

    for (s, month, var, _) in table.records() {
        if month % layout.step != 0 {
            return Err(Error::Data(format!(
                "subject {s}: month {month} of {} is not a multiple of the visit step {}",
                catalog.name(var),
                layout.step
            )));
        }
    }
    let subjects = table.subjects();
    for s in &subjects {
        let any = table.records().any(|(subj, _, _, v)| subj == s && v.is_some());
        if !any {
            return Err(Error::Data(format!("subject {s} has no observed records")));
        }
    }

    let n_train = subjects.len() * layout.train_targets.len();
    let n_test = subjects.len();
    let alloc = |n: usize| -> Vec<(DMatrix<f64>, DMatrix<bool>)> {
        specs.iter().map(|s| (DMatrix::zeros(n, s.dim), DMatrix::from_element(n, s.dim, false))).collect()
    };
    let mut train = alloc(n_train);
    let mut test = alloc(n_test);
    let mut samples = Vec::with_capacity(n_train + n_test);
    let mut test_samples = Vec::with_capacity(n_test);

    let set = |buf: &mut Vec<(DMatrix<f64>, DMatrix<bool>)>, view: usize, row: usize, col: usize, v: Option<f64>| {
        if let Some(x) = v {
            buf[view].0[(row, col)] = x;
            buf[view].1[(row, col)] = true;
        }
    };
    // Diagnosis at a month, one-hot over three columns.
    let set_dx = |buf: &mut Vec<(DMatrix<f64>, DMatrix<bool>)>, view: usize, row: usize, v: Option<f64>| {
        if let Some(x) = v {
            let c = x.round() as usize;
            for k in 0..3 {
                buf[view].0[(row, k)] = if k == c { 1.0 } else { 0.0 };
                buf[view].1[(row, k)] = true;
            }
        }
    };

    let fill_sample = |buf: &mut Vec<(DMatrix<f64>, DMatrix<bool>)>,
                       row: usize,
                       subject: &str,
                       target: i64,
                       use_lag: &dyn Fn(usize) -> bool,
                       mask_outputs: bool| {
        for (c, &v) in g.ti.iter().enumerate() {
            // Earliest observed value before the test target.
            let val = (0..layout.test_target)
                .step_by(layout.step as usize)
                .find_map(|m| table.get(subject, m, v));
            set(buf, idx.ti(), row, c, val);
        }
        for (p, &lag) in layout.lags.iter().enumerate() {
            let month = target + lag;
            if month < 0 || !use_lag(p) {
                continue;
            }
            for (c, &v) in lag_cols.iter().enumerate() {
                set(buf, idx.td(p), row, c, table.get(subject, month, v));
            }
            set_dx(buf, idx.dx_lag(p), row, table.get(subject, month, g.d));
        }
        if !mask_outputs {
            set_dx(buf, idx.out_dx(), row, table.get(subject, target, g.d));
            for (c, &v) in g.v.iter().enumerate() {
                set(buf, idx.out_v(), row, c, table.get(subject, target, v));
            }
            for (c, &v) in g.a.iter().enumerate() {
                set(buf, idx.out_a(), row, c, table.get(subject, target, v));
            }
        }
    };

    let mut row = 0;
    for (si, subject) in subjects.iter().enumerate() {
        for (w, &target) in layout.train_targets.iter().enumerate() {
            let masked = layout.masked_train_targets.contains(&target);
            fill_sample(&mut train, row, subject, target, &|_| true, masked);
            samples.push(SampleInfo { subject: subject.clone(), target_month: target, window: w, is_test: false });
            row += 1;
        }
        fill_sample(&mut test, si, subject, layout.test_target, &|p| layout.test_uses_lag(p), false);
        test_samples.push(SampleInfo {
            subject: subject.clone(),
            target_month: layout.test_target,
            window: layout.train_targets.len(),
            is_test: true,
        });
    }
    samples.extend(test_samples);

    let finish = |buf: Vec<(DMatrix<f64>, DMatrix<bool>)>| -> Result<Vec<ViewData>> {
        buf.into_iter().map(|(v, m)| ViewData::new(v, m)).collect()
    };
    Ok(WindowedData {
        specs,
        train: finish(train)?,
        test: finish(test)?,
        design: DesignInfo { layout: layout.clone(), samples, columns },
    })
}

impl WindowedData {
    pub fn view_index(&self) -> ViewIndex {
        ViewIndex { n_lags: self.design.layout.lags.len() }
    }

    pub fn n_train(&self) -> usize {
        self.train.first().map_or(0, |v| v.nrows())
    }

    pub fn n_test(&self) -> usize {
        self.test.first().map_or(0, |v| v.nrows())
    }

    /// Train samples stacked over test samples whose output views are
    /// masked, ready for semi-supervised fitting.
    pub fn semi_supervised_views(&self) -> Result<Vec<ViewData>> {
        self.specs
            .iter()
            .zip(self.train.iter().zip(&self.test))
            .map(|(spec, (tr, te))| {
                let mut te = te.clone();
                if spec.role == ViewRole::Output {
                    te.mask.fill(false);
                    te.values.fill(0.0);
                }
                tr.vstack(&te)
            })
            .collect()
    }

    /// Validated, optionally standardized, semi-supervised dataset. The
    /// standardizer is fit on the training samples only.
    pub fn fit_dataset(&self, standardize: bool) -> Result<(Dataset, Option<Standardizer>)> {
        let mut views = self.semi_supervised_views()?;
        let scaler = standardize.then(|| Standardizer::fit(&self.specs, &self.train));
        if let Some(s) = &scaler {
            s.apply(&mut views);
        }
        Ok((validate_dataset(self.specs.clone(), views)?, scaler))
    }
}
