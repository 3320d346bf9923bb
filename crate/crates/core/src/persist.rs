//! Binary model files.
//!
//! Layout: an 8-byte magic, a little-endian u32 format version, then the
//! model fields in a fixed order. Integers are u64/i64 and reals IEEE-754
//! binary64, all little-endian; matrices are `rows, cols` followed by the
//! entries in row-major order. Loading rejects trailing bytes and re-checks
//! every type invariant.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{
    GammaPosterior, GaussianPosterior, Hyperparameters, LearningRate, MissingPosterior, ModelState, RowCovariance,
    ViewKind, ViewPosterior, ViewRole, ViewSpec,
};
use crate::standardize::{FeatureScale, Standardizer};
use crate::views::{Catalog, ColumnInfo, DesignInfo, SampleInfo, VariableGroup, WindowLayout};

pub const MAGIC: &[u8; 8] = b"LTNLINE\0";
pub const VERSION: u32 = 1;

/// A fitted model together with the variable catalog it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub state: ModelState,
    pub catalog: Option<Catalog>,
}

impl ModelFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        write_state(&mut w, &self.state);
        w.option(&self.catalog, |w, c| {
            w.usize(c.len());
            for (name, group) in c.entries() {
                w.str(name);
                w.u8(group_tag(*group));
            }
        });
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a model file (magic mismatch)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported format version {version} (expected {VERSION})")));
        }
        let mut r = Reader { buf: bytes, pos: 12 };
        let state = read_state(&mut r)?;
        let catalog = r.option(|r| {
            let n = r.len()?;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                entries.push((r.str()?, read_group(r)?));
            }
            Catalog::new(entries)
        })?;
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after model"));
        }
        validate(&state)?;
        Ok(ModelFile { state, catalog })
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn bad(msg: &str) -> Error {
    Error::ModelFile(msg.to_string())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn usize(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bool(&mut self, v: bool) {
        self.u8(u8::from(v));
    }

    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }

    fn i64s(&mut self, v: &[i64]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.i64(x));
    }

    fn matrix(&mut self, m: &DMatrix<f64>) {
        self.usize(m.nrows());
        self.usize(m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }

    fn option<T>(&mut self, v: &Option<T>, body: impl FnOnce(&mut Self, &T)) {
        match v {
            Some(x) => {
                self.u8(1);
                body(self, x);
            }
            None => self.u8(0),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("integer overflow"))
    }

    /// A count of following items, bounded by the bytes left so corrupt
    /// lengths fail before allocating.
    fn len(&mut self) -> Result<usize> {
        let n = self.usize()?;
        if n > self.buf.len() - self.pos {
            return Err(bad("length field exceeds file size"));
        }
        Ok(n)
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            t => Err(bad(&format!("invalid boolean byte {t}"))),
        }
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid UTF-8 string"))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn i64s(&mut self) -> Result<Vec<i64>> {
        let n = self.len()?;
        (0..n).map(|_| self.i64()).collect()
    }

    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let count = rows.checked_mul(cols).filter(|&c| c <= (self.buf.len() - self.pos) / 8);
        let count = count.ok_or_else(|| bad("matrix size exceeds file size"))?;
        let data: Vec<f64> = (0..count).map(|_| self.f64()).collect::<Result<_>>()?;
        Ok(DMatrix::from_row_slice(rows, cols, &data))
    }

    fn option<T>(&mut self, body: impl FnOnce(&mut Self) -> Result<T>) -> Result<Option<T>> {
        match self.u8()? {
            0 => Ok(None),
            1 => body(self).map(Some),
            t => Err(bad(&format!("invalid option tag {t}"))),
        }
    }
}

fn group_tag(g: VariableGroup) -> u8 {
    match g {
        VariableGroup::TI => 0,
        VariableGroup::TD => 1,
        VariableGroup::V => 2,
        VariableGroup::A => 3,
        VariableGroup::D => 4,
    }
}

fn read_group(r: &mut Reader) -> Result<VariableGroup> {
    Ok(match r.u8()? {
        0 => VariableGroup::TI,
        1 => VariableGroup::TD,
        2 => VariableGroup::V,
        3 => VariableGroup::A,
        4 => VariableGroup::D,
        t => return Err(bad(&format!("invalid variable group tag {t}"))),
    })
}

fn write_hyper(w: &mut Writer, h: &Hyperparameters) {
    for v in [h.a_alpha, h.b_alpha, h.a_tau, h.b_tau, h.a_gamma, h.b_gamma] {
        w.f64(v);
    }
    w.option(&h.k_init, |w, &k| w.usize(k));
    w.f64(h.prune_threshold);
    w.f64(h.elbo_rel_tol);
    w.usize(h.max_iter);
    w.0.extend_from_slice(&h.seed.to_le_bytes());
}

fn read_hyper(r: &mut Reader) -> Result<Hyperparameters> {
    Ok(Hyperparameters {
        a_alpha: r.f64()?,
        b_alpha: r.f64()?,
        a_tau: r.f64()?,
        b_tau: r.f64()?,
        a_gamma: r.f64()?,
        b_gamma: r.f64()?,
        k_init: r.option(|r| r.usize())?,
        prune_threshold: r.f64()?,
        elbo_rel_tol: r.f64()?,
        max_iter: r.usize()?,
        seed: r.u64()?,
    })
}

fn write_spec(w: &mut Writer, s: &ViewSpec) {
    w.usize(s.view_id);
    w.usize(s.dim);
    w.u8(match s.kind {
        ViewKind::Real => 0,
        ViewKind::Indicator => 1,
    });
    w.bool(s.feature_selection);
    match s.learning_rate {
        LearningRate::Constant(rho) => {
            w.u8(0);
            w.f64(rho);
        }
        LearningRate::InverseIteration => w.u8(1),
    }
    w.u8(match s.role {
        ViewRole::Input => 0,
        ViewRole::Output => 1,
    });
    w.str(&s.name);
}

fn read_spec(r: &mut Reader) -> Result<ViewSpec> {
    let view_id = r.usize()?;
    let dim = r.usize()?;
    let kind = match r.u8()? {
        0 => ViewKind::Real,
        1 => ViewKind::Indicator,
        t => return Err(bad(&format!("invalid view kind tag {t}"))),
    };
    let feature_selection = r.bool()?;
    let learning_rate = match r.u8()? {
        0 => LearningRate::Constant(r.f64()?),
        1 => LearningRate::InverseIteration,
        t => return Err(bad(&format!("invalid learning rate tag {t}"))),
    };
    let role = match r.u8()? {
        0 => ViewRole::Input,
        1 => ViewRole::Output,
        t => return Err(bad(&format!("invalid view role tag {t}"))),
    };
    Ok(ViewSpec { view_id, dim, kind, feature_selection, learning_rate, role, name: r.str()? })
}

fn write_gaussian(w: &mut Writer, g: &GaussianPosterior) {
    w.matrix(&g.mean);
    match &g.cov {
        RowCovariance::Shared(c) => {
            w.u8(0);
            w.matrix(c);
        }
        RowCovariance::PerRow(cs) => {
            w.u8(1);
            w.usize(cs.len());
            cs.iter().for_each(|c| w.matrix(c));
        }
    }
}

fn read_gaussian(r: &mut Reader) -> Result<GaussianPosterior> {
    let mean = r.matrix()?;
    let cov = match r.u8()? {
        0 => RowCovariance::Shared(r.matrix()?),
        1 => {
            let n = r.len()?;
            RowCovariance::PerRow((0..n).map(|_| r.matrix()).collect::<Result<_>>()?)
        }
        t => return Err(bad(&format!("invalid covariance tag {t}"))),
    };
    Ok(GaussianPosterior { mean, cov })
}

fn write_gamma(w: &mut Writer, g: &GammaPosterior) {
    w.f64s(&g.shape);
    w.f64s(&g.rate);
}

fn read_gamma(r: &mut Reader) -> Result<GammaPosterior> {
    let shape = r.f64s()?;
    let rate = r.f64s()?;
    if shape.len() != rate.len() {
        return Err(bad("gamma shape/rate length mismatch"));
    }
    Ok(GammaPosterior { shape, rate })
}

fn write_layout(w: &mut Writer, l: &WindowLayout) {
    w.i64(l.step);
    w.i64s(&l.lags);
    w.i64s(&l.train_targets);
    w.i64s(&l.masked_train_targets);
    w.i64(l.test_target);
    w.i64(l.test_horizon);
    w.bool(l.lagged_outputs_in_td);
}

fn read_layout(r: &mut Reader) -> Result<WindowLayout> {
    Ok(WindowLayout {
        step: r.i64()?,
        lags: r.i64s()?,
        train_targets: r.i64s()?,
        masked_train_targets: r.i64s()?,
        test_target: r.i64()?,
        test_horizon: r.i64()?,
        lagged_outputs_in_td: r.bool()?,
    })
}

fn write_design(w: &mut Writer, d: &DesignInfo) {
    write_layout(w, &d.layout);
    w.usize(d.samples.len());
    for s in &d.samples {
        w.str(&s.subject);
        w.i64(s.target_month);
        w.usize(s.window);
        w.bool(s.is_test);
    }
    w.usize(d.columns.len());
    for view in &d.columns {
        w.usize(view.len());
        for c in view {
            w.str(&c.variable);
            w.u8(group_tag(c.group));
            w.option(&c.offset, |w, &o| w.i64(o));
            w.option(&c.class, |w, &k| w.usize(k));
        }
    }
}

fn read_design(r: &mut Reader) -> Result<DesignInfo> {
    let layout = read_layout(r)?;
    let n = r.len()?;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        samples.push(SampleInfo { subject: r.str()?, target_month: r.i64()?, window: r.usize()?, is_test: r.bool()? });
    }
    let views = r.len()?;
    let mut columns = Vec::with_capacity(views);
    for _ in 0..views {
        let d = r.len()?;
        let mut cols = Vec::with_capacity(d);
        for _ in 0..d {
            cols.push(ColumnInfo {
                variable: r.str()?,
                group: read_group(r)?,
                offset: r.option(|r| r.i64())?,
                class: r.option(|r| r.usize())?,
            });
        }
        columns.push(cols);
    }
    Ok(DesignInfo { layout, samples, columns })
}

fn write_state(w: &mut Writer, s: &ModelState) {
    write_hyper(w, &s.hyper);
    w.usize(s.specs.len());
    s.specs.iter().for_each(|spec| write_spec(w, spec));
    write_gaussian(w, &s.q_z);
    for v in &s.views {
        write_gaussian(w, &v.w);
        write_gamma(w, &v.alpha);
        write_gamma(w, &v.tau);
        w.option(&v.gamma, write_gamma);
        w.matrix(&v.missing.mean);
        w.f64(v.missing.variance);
    }
    w.usize(s.k_init);
    w.usize(s.k_current);
    w.f64s(&s.elbo_trace);
    w.usize(s.iteration);
    w.0.extend_from_slice(&s.seed.to_le_bytes());
    w.option(&s.standardizer, |w, st| {
        w.usize(st.views.len());
        for view in &st.views {
            w.option(view, |w, cols| {
                w.usize(cols.len());
                for fs in cols {
                    w.f64(fs.mean);
                    w.f64(fs.scale);
                }
            });
        }
    });
    w.option(&s.design, write_design);
}

fn read_state(r: &mut Reader) -> Result<ModelState> {
    let hyper = read_hyper(r)?;
    let m = r.len()?;
    let specs: Vec<ViewSpec> = (0..m).map(|_| read_spec(r)).collect::<Result<_>>()?;
    let q_z = read_gaussian(r)?;
    let mut views = Vec::with_capacity(m);
    for _ in 0..m {
        views.push(ViewPosterior {
            w: read_gaussian(r)?,
            alpha: read_gamma(r)?,
            tau: read_gamma(r)?,
            gamma: r.option(read_gamma)?,
            missing: MissingPosterior { mean: r.matrix()?, variance: r.f64()? },
        });
    }
    let k_init = r.usize()?;
    let k_current = r.usize()?;
    let elbo_trace = r.f64s()?;
    let iteration = r.usize()?;
    let seed = r.u64()?;
    let standardizer = r.option(|r| {
        let n = r.len()?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(r.option(|r| {
                let d = r.len()?;
                (0..d).map(|_| Ok(FeatureScale { mean: r.f64()?, scale: r.f64()? })).collect::<Result<Vec<_>>>()
            })?);
        }
        Ok(Standardizer { views: out })
    })?;
    let design = r.option(read_design)?;
    Ok(ModelState { specs, hyper, q_z, views, k_init, k_current, elbo_trace, iteration, seed, standardizer, design })
}

fn validate(s: &ModelState) -> Result<()> {
    let wrap = |e: Error| bad(&e.to_string());
    s.hyper.validate().map_err(wrap)?;
    if s.specs.is_empty() {
        return Err(bad("model has no views"));
    }
    for (i, spec) in s.specs.iter().enumerate() {
        spec.validate().map_err(wrap)?;
        if spec.view_id != i + 1 {
            return Err(bad("view ids must be contiguous from 1"));
        }
    }
    s.check_invariants().map_err(wrap)?;
    let n = s.n_samples();
    for (spec, v) in s.specs.iter().zip(&s.views) {
        match &v.w.cov {
            RowCovariance::Shared(c) if c.shape() == (s.k_current, s.k_current) => {}
            RowCovariance::PerRow(cs) if cs.len() == spec.dim && cs.iter().all(|c| c.shape() == (s.k_current, s.k_current)) => {}
            _ => return Err(bad(&format!("view {}: W covariance shape", spec.view_id))),
        }
        if spec.dim == 0 || v.missing.mean.nrows() != n {
            return Err(bad(&format!("view {}: sample count", spec.view_id)));
        }
    }
    if s.q_z.row_cov(0).shape() != (s.k_current, s.k_current) {
        return Err(bad("q_z covariance shape"));
    }
    if s.elbo_trace.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite value in ELBO trace"));
    }
    if let Some(st) = &s.standardizer {
        if st.views.len() != s.specs.len() {
            return Err(bad("standardizer view count"));
        }
        for (spec, view) in s.specs.iter().zip(&st.views) {
            if let Some(cols) = view {
                let ok = cols.len() == spec.dim && cols.iter().all(|f| f.mean.is_finite() && f.scale > 0.0 && f.scale.is_finite());
                if !ok {
                    return Err(bad(&format!("view {}: invalid standardizer", spec.view_id)));
                }
            }
        }
    }
    if let Some(d) = &s.design {
        d.layout.validate().map_err(wrap)?;
        if d.samples.len() != n {
            return Err(bad("design sample count"));
        }
        if d.columns.len() != s.specs.len() || d.columns.iter().zip(&s.specs).any(|(c, spec)| c.len() != spec.dim) {
            return Err(bad("design column count"));
        }
    }
    Ok(())
}
