//! Declarative experiment specs, pipeline dispatch and result files.
//!
//! A spec is a flat TOML table. Every kind has a fixed key set; unknown keys,
//! missing required keys, wrong types and out-of-range values are all
//! collected into one schema error. The spec hash is the SHA-256 of a
//! canonical rendering (sorted keys, fixed float format), so whitespace,
//! comments and key order do not change it. `out_dir` is excluded.
//!
//! Output tables are CSV with a `# spec_hash=...` first line, LF endings and
//! floats printed with 17 significant digits. Each run also writes a JSON
//! sidecar with the same hash. Wall-clock times are the only
//! non-reproducible quantity and go to a separate `timing.json`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::info;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::bbgky::{self, ClosureRule, HierarchyState, ParticleNumber};
use crate::error::{LabError, Result};
use crate::fock::{self, Displacement, FluctuationPath, FluctuationSettings, GeneratorVariant, Ladder, TruncatedFock};
use crate::lattice::{Grid, Kernel, WaveFunction, C64};
use crate::linalg;
use crate::manybody::{self, LatticeModel, ReducedDensity, SweepSettings};
use crate::scattering::{self, RadialPotential};
use crate::solvers::{self, EffectiveModel, Scheme, SolverConfig, Trajectory};

/// Required value of the `version` key.
pub const FORMAT_VERSION: &str = "mflab-1";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Fixed float format: 17 significant digits in scientific notation.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ExperimentKind {
    Hartree,
    Gp,
    Semirel,
    Scatter,
    ExactSweep,
    Bbgky,
    FockRate,
    FockAlgebra,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        ExperimentKind::Hartree,
        ExperimentKind::Gp,
        ExperimentKind::Semirel,
        ExperimentKind::Scatter,
        ExperimentKind::ExactSweep,
        ExperimentKind::Bbgky,
        ExperimentKind::FockRate,
        ExperimentKind::FockAlgebra,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Hartree => "hartree",
            ExperimentKind::Gp => "gp",
            ExperimentKind::Semirel => "semirel",
            ExperimentKind::Scatter => "scatter",
            ExperimentKind::ExactSweep => "exact-sweep",
            ExperimentKind::Bbgky => "bbgky",
            ExperimentKind::FockRate => "fock-rate",
            ExperimentKind::FockAlgebra => "fock-algebra",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn description(self) -> &'static str {
        match self {
            ExperimentKind::Hartree => "Hartree equation with a lattice pair kernel",
            ExperimentKind::Gp => "Gross-Pitaevskii equation with coupling 8 pi a0",
            ExperimentKind::Semirel => "semi-relativistic Hartree equation with blow-up monitoring",
            ExperimentKind::Scatter => "zero-energy scattering length of a square well",
            ExperimentKind::ExactSweep => "exact N-body dynamics vs Hartree, trace distance over N",
            ExperimentKind::Bbgky => "BBGKY hierarchy evolution with invariant diagnostics",
            ExperimentKind::FockRate => "coherent initial data in Fock space, trace distance over N",
            ExperimentKind::FockAlgebra => "coherent-state algebra checks and fluctuation growth",
        }
    }

    /// `(key, required)` pairs accepted by this kind.
    pub fn keys(self) -> Vec<(&'static str, bool)> {
        schema(self).iter().map(|k| (k.name, k.default.is_none() && !k.optional)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Str(String),
    Ints(Vec<i64>),
    Floats(Vec<f64>),
}

impl Value {
    fn render(&self) -> String {
        match self {
            Value::Int(i) => i.to_string(),
            Value::Float(x) => format_float(*x),
            Value::Str(s) => format!("{s:?}"),
            Value::Ints(v) => format!("[{}]", v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ")),
            Value::Floats(v) => format!("[{}]", v.iter().map(|x| format_float(*x)).collect::<Vec<_>>().join(", ")),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Ty {
    Int { min: i64, max: i64 },
    Float { min: f64, max: f64 },
    Choice(&'static [&'static str]),
    Ints { min: i64, max: i64 },
    Floats { min: f64, max: f64 },
}

struct KeySpec {
    name: &'static str,
    ty: Ty,
    default: Option<Value>,
    /// Allowed to be absent with no default.
    optional: bool,
}

fn key(name: &'static str, ty: Ty) -> KeySpec {
    KeySpec {
        name,
        ty,
        default: None,
        optional: false,
    }
}

fn opt(name: &'static str, ty: Ty) -> KeySpec {
    KeySpec {
        name,
        ty,
        default: None,
        optional: true,
    }
}

fn def(name: &'static str, ty: Ty, default: Value) -> KeySpec {
    KeySpec {
        name,
        ty,
        default: Some(default),
        optional: false,
    }
}

const KERNELS: &[&str] = &["gaussian", "linear", "coulomb", "constant"];
const INITIALS: &[&str] = &["bump", "plane-wave", "gaussian"];
const SCHEMES: &[&str] = &["strang", "fourth-order", "rk4"];
const CLOSURES: &[&str] = &["truncate", "factorize"];
const POTENTIALS: &[&str] = &["square-well"];

const SITES: Ty = Ty::Int { min: 2, max: 1 << 16 };
const POSITIVE: Ty = Ty::Float { min: 1e-12, max: 1e6 };
const COUPLING: Ty = Ty::Float { min: -1e6, max: 1e6 };
const TIMES: Ty = Ty::Floats { min: 0.0, max: 1e4 };
const STEP: Ty = Ty::Float { min: 1e-9, max: 10.0 };

fn grid_keys(out: &mut Vec<KeySpec>) {
    out.push(key("sites", SITES));
    out.push(def("length", POSITIVE, Value::Float(2.0 * PI)));
    out.push(def("initial", Ty::Choice(INITIALS), Value::Str("bump".into())));
    out.push(def("initial_mode", Ty::Int { min: -4096, max: 4096 }, Value::Int(1)));
    out.push(def("initial_width", POSITIVE, Value::Float(1.0)));
}

fn kernel_keys(out: &mut Vec<KeySpec>) {
    out.push(def("kernel", Ty::Choice(KERNELS), Value::Str("gaussian".into())));
    out.push(def("kernel_width", POSITIVE, Value::Float(1.0)));
    out.push(key("coupling", COUPLING));
    out.push(opt("alpha", POSITIVE));
}

fn schema(kind: ExperimentKind) -> Vec<KeySpec> {
    let mut keys = vec![
        key("version", Ty::Choice(&[FORMAT_VERSION])),
        key("kind", Ty::Choice(&["hartree", "gp", "semirel", "scatter", "exact-sweep", "bbgky", "fock-rate", "fock-algebra"])),
        opt("out_dir", Ty::Choice(&[])),
    ];
    let solver = |keys: &mut Vec<KeySpec>| {
        keys.push(key("dt", STEP));
        keys.push(key("times", TIMES));
        keys.push(def("scheme", Ty::Choice(SCHEMES), Value::Str("fourth-order".into())));
        keys.push(def("amplitude", POSITIVE, Value::Float(1.0)));
    };
    match kind {
        ExperimentKind::Hartree => {
            grid_keys(&mut keys);
            kernel_keys(&mut keys);
            solver(&mut keys);
        }
        ExperimentKind::Gp => {
            grid_keys(&mut keys);
            keys.push(key("a0", Ty::Float { min: 0.0, max: 1e6 }));
            solver(&mut keys);
        }
        ExperimentKind::Semirel => {
            grid_keys(&mut keys);
            keys.push(key("coupling", COUPLING));
            keys.push(opt("alpha", POSITIVE));
            keys.push(opt("blowup_threshold", POSITIVE));
            solver(&mut keys);
        }
        ExperimentKind::Scatter => {
            keys.push(def("potential", Ty::Choice(POTENTIALS), Value::Str("square-well".into())));
            keys.push(key("v0", Ty::Float { min: 0.0, max: 1e8 }));
            keys.push(def("radius", POSITIVE, Value::Float(1.0)));
            keys.push(def("r_max", POSITIVE, Value::Float(50.0)));
            keys.push(def("cells", Ty::Int { min: 16, max: 50_000_000 }, Value::Int(200_000)));
            keys.push(def("rescale", Ty::Ints { min: 1, max: 1_000_000 }, Value::Ints(vec![1])));
        }
        ExperimentKind::ExactSweep | ExperimentKind::FockRate => {
            grid_keys(&mut keys);
            kernel_keys(&mut keys);
            keys.push(key("ns", Ty::Ints { min: 1, max: 100_000 }));
            keys.push(key("times", TIMES));
            keys.push(def("hartree_dt", STEP, Value::Float(1e-3)));
        }
        ExperimentKind::Bbgky => {
            grid_keys(&mut keys);
            kernel_keys(&mut keys);
            keys.push(key("particles", Ty::Int { min: 0, max: 1_000_000 }));
            keys.push(key("depth", Ty::Int { min: 1, max: 8 }));
            keys.push(def("closure", Ty::Choice(CLOSURES), Value::Str("factorize".into())));
            keys.push(key("dt", STEP));
            keys.push(key("times", TIMES));
        }
        ExperimentKind::FockAlgebra => {
            grid_keys(&mut keys);
            kernel_keys(&mut keys);
            keys.push(key("particles", Ty::Int { min: 1, max: 10_000 }));
            keys.push(opt("n_max", Ty::Int { min: 1, max: 10_000 }));
            keys.push(def("dn_range", Ty::Ints { min: 1, max: 10_000 }, Value::Ints(vec![16, 32, 64])));
            keys.push(def("times", TIMES, Value::Floats(vec![])));
            keys.push(def("fluctuation_dt", STEP, Value::Float(1e-2)));
            keys.push(opt("fluctuation_n_max", Ty::Int { min: 1, max: 10_000 }));
        }
    }
    keys
}

fn to_value(name: &str, raw: &toml::Value, ty: Ty) -> std::result::Result<Value, String> {
    use toml::Value as T;
    let as_f64 = |v: &T| match v {
        T::Float(x) => Some(*x),
        T::Integer(i) => Some(*i as f64),
        _ => None,
    };
    let value = match (ty, raw) {
        (Ty::Int { .. }, T::Integer(i)) => Value::Int(*i),
        (Ty::Float { .. }, v) if as_f64(v).is_some() => Value::Float(as_f64(v).unwrap()),
        (Ty::Choice(_), T::String(s)) => Value::Str(s.clone()),
        (Ty::Ints { .. }, T::Array(a)) => Value::Ints(
            a.iter()
                .map(|v| v.as_integer())
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| format!("{name}: expected a list of integers"))?,
        ),
        (Ty::Floats { .. }, T::Array(a)) => Value::Floats(
            a.iter()
                .map(as_f64)
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| format!("{name}: expected a list of numbers"))?,
        ),
        (ty, v) => return Err(format!("{name}: expected {}, got {}", type_name(ty), v.type_str())),
    };
    check_range(name, &value, ty)?;
    Ok(value)
}

fn type_name(ty: Ty) -> &'static str {
    match ty {
        Ty::Int { .. } => "an integer",
        Ty::Float { .. } => "a number",
        Ty::Choice(_) => "a string",
        Ty::Ints { .. } => "a list of integers",
        Ty::Floats { .. } => "a list of numbers",
    }
}

fn check_range(name: &str, value: &Value, ty: Ty) -> std::result::Result<(), String> {
    let bad_f = |x: f64, min: f64, max: f64| !(x.is_finite() && x >= min && x <= max);
    match (ty, value) {
        (Ty::Int { min, max }, Value::Int(i)) if *i < min || *i > max => {
            Err(format!("{name}: {i} outside [{min}, {max}]"))
        }
        (Ty::Float { min, max }, Value::Float(x)) if bad_f(*x, min, max) => {
            Err(format!("{name}: {x} outside [{min}, {max}]"))
        }
        (Ty::Choice(allowed), Value::Str(s)) if !allowed.is_empty() && !allowed.contains(&s.as_str()) => {
            Err(format!("{name}: {s:?} is not one of {allowed:?}"))
        }
        (Ty::Ints { min, max }, Value::Ints(v)) => match v.iter().find(|i| **i < min || **i > max) {
            Some(i) => Err(format!("{name}: entry {i} outside [{min}, {max}]")),
            None => Ok(()),
        },
        (Ty::Floats { min, max }, Value::Floats(v)) => match v.iter().find(|x| bad_f(**x, min, max)) {
            Some(x) => Err(format!("{name}: entry {x} outside [{min}, {max}]")),
            None => Ok(()),
        },
        _ => Ok(()),
    }
}

/// A validated experiment description.
#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    kind: ExperimentKind,
    values: BTreeMap<String, Value>,
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| LabError::Schema(vec![format!("not a flat key-value file: {}", e.message())]))?;
        let mut errors = Vec::new();
        let kind = match table.get("kind") {
            None => {
                errors.push("kind: missing required key".to_string());
                None
            }
            Some(toml::Value::String(s)) => match ExperimentKind::parse(s) {
                Some(k) => Some(k),
                None => {
                    let names: Vec<_> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
                    errors.push(format!("kind: {s:?} is not one of {names:?}"));
                    None
                }
            },
            Some(v) => {
                errors.push(format!("kind: expected a string, got {}", v.type_str()));
                None
            }
        };
        let Some(kind) = kind else {
            if !table.contains_key("version") {
                errors.push("version: missing required key".to_string());
            }
            return Err(LabError::Schema(errors));
        };
        let keys = schema(kind);
        let mut values = BTreeMap::new();
        for (name, raw) in &table {
            match keys.iter().find(|k| k.name == name) {
                None => errors.push(format!("{name}: unknown key for kind {}", kind.name())),
                Some(spec) => match to_value(name, raw, spec.ty) {
                    Ok(v) => {
                        values.insert(name.clone(), v);
                    }
                    Err(e) => errors.push(e),
                },
            }
        }
        for spec in &keys {
            if table.contains_key(spec.name) {
                continue;
            }
            match &spec.default {
                Some(d) => {
                    values.insert(spec.name.to_string(), d.clone());
                }
                None if spec.optional => {}
                None => errors.push(format!("{}: missing required key", spec.name)),
            }
        }
        if !errors.is_empty() {
            return Err(LabError::Schema(errors));
        }
        let spec = ExperimentSpec { kind, values };
        spec.cross_check()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    fn cross_check(&self) -> Result<()> {
        let mut errors = Vec::new();
        if let Some(Value::Floats(t)) = self.values.get("times") {
            if t.is_empty() && self.kind != ExperimentKind::FockAlgebra {
                errors.push("times: must not be empty".to_string());
            }
            if t.windows(2).any(|w| w[1] <= w[0]) {
                errors.push("times: must be strictly increasing".to_string());
            }
        }
        if let Some(Value::Ints(ns)) = self.values.get("ns") {
            if ns.is_empty() {
                errors.push("ns: must not be empty".to_string());
            }
        }
        if self.kind == ExperimentKind::Bbgky {
            let (n, depth) = (self.int("particles"), self.int("depth"));
            if n > 0 && depth > n {
                errors.push(format!("depth: {depth} exceeds particles = {n}"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(LabError::Schema(errors))
        }
    }

    pub fn kind(&self) -> ExperimentKind {
        self.kind
    }

    /// Canonical text the hash is computed from.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.values.iter().filter(|(k, _)| k.as_str() != "out_dir") {
            let _ = writeln!(out, "{k} = {}", v.render());
        }
        out
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn out_dir(&self) -> Option<&str> {
        match self.values.get("out_dir") {
            Some(Value::Str(s)) => Some(s),
            _ => None,
        }
    }

    fn int(&self, name: &str) -> i64 {
        match self.values.get(name) {
            Some(Value::Int(i)) => *i,
            other => panic!("schema guarantees integer key {name}, found {other:?}"),
        }
    }

    fn usize(&self, name: &str) -> usize {
        self.int(name) as usize
    }

    fn float(&self, name: &str) -> f64 {
        match self.values.get(name) {
            Some(Value::Float(x)) => *x,
            other => panic!("schema guarantees float key {name}, found {other:?}"),
        }
    }

    fn opt_float(&self, name: &str) -> Option<f64> {
        self.values.get(name).map(|_| self.float(name))
    }

    fn opt_usize(&self, name: &str) -> Option<usize> {
        self.values.get(name).map(|_| self.usize(name))
    }

    fn str(&self, name: &str) -> &str {
        match self.values.get(name) {
            Some(Value::Str(s)) => s,
            other => panic!("schema guarantees string key {name}, found {other:?}"),
        }
    }

    fn floats(&self, name: &str) -> &[f64] {
        match self.values.get(name) {
            Some(Value::Floats(v)) => v,
            other => panic!("schema guarantees float list {name}, found {other:?}"),
        }
    }

    fn usizes(&self, name: &str) -> Vec<usize> {
        match self.values.get(name) {
            Some(Value::Ints(v)) => v.iter().map(|i| *i as usize).collect(),
            other => panic!("schema guarantees integer list {name}, found {other:?}"),
        }
    }

    fn grid(&self) -> Result<Grid> {
        Grid::new(self.usize("sites"), self.float("length"))
    }

    fn alpha(&self, grid: &Grid) -> f64 {
        self.opt_float("alpha").unwrap_or_else(|| EffectiveModel::default_regularization(grid))
    }

    fn kernel(&self, grid: &Grid) -> Result<Kernel> {
        let w = self.float("kernel_width");
        match self.str("kernel") {
            "gaussian" => Kernel::from_distance(grid.clone(), |d| (-0.5 * d * d / (w * w)).exp()),
            "linear" => Kernel::from_distance(grid.clone(), |d| 1.0 + d / w),
            "coulomb" => Kernel::regularized_coulomb(grid.clone(), self.alpha(grid)),
            "constant" => Kernel::constant(grid.clone(), 1.0),
            other => unreachable!("kernel {other} passed the schema"),
        }
    }

    fn initial(&self, grid: &Grid) -> WaveFunction {
        let l = grid.length();
        let g = grid.clone();
        match self.str("initial") {
            "bump" => WaveFunction::from_fn(g, |x| {
                let s = 2.0 * PI * x / l;
                C64::new(1.0 + 0.5 * s.cos(), 0.3 * (2.0 * s).sin())
            }),
            "plane-wave" => WaveFunction::plane_wave(g, self.int("initial_mode"), C64::new(1.0, 0.0)),
            "gaussian" => {
                let w = self.float("initial_width");
                WaveFunction::from_fn(g, |x| C64::new((-0.5 * ((x - 0.5 * l) / w).powi(2)).exp(), 0.0))
            }
            other => unreachable!("initial {other} passed the schema"),
        }
    }

    /// Initial datum with `||phi|| = amplitude` (solver kinds) or 1.
    fn scaled_initial(&self, grid: &Grid) -> Result<WaveFunction> {
        let phi = self.initial(grid).normalized()?;
        Ok(match self.values.get("amplitude") {
            Some(_) => phi.scaled(C64::new(self.float("amplitude"), 0.0)),
            None => phi,
        })
    }

    fn scheme(&self) -> Scheme {
        match self.str("scheme") {
            "strang" => Scheme::StrangSplit,
            "rk4" => Scheme::ExplicitRk4,
            _ => Scheme::FourthOrderSplit,
        }
    }

    fn model(&self, grid: &Grid) -> Result<EffectiveModel> {
        match self.kind {
            ExperimentKind::Gp => EffectiveModel::gross_pitaevskii(grid.clone(), self.float("a0")),
            ExperimentKind::Semirel => {
                EffectiveModel::semi_relativistic(grid.clone(), self.float("coupling"), self.alpha(grid))
            }
            _ => EffectiveModel::hartree(self.kernel(grid)?, self.float("coupling")),
        }
    }
}

/// Rectangular numeric table with named columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultTable {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Spec hash read from, or written to, the first line.
    pub spec_hash: String,
}

impl ResultTable {
    pub fn new(name: &str, columns: &[&str], spec_hash: &str) -> Self {
        ResultTable {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            spec_hash: spec_hash.to_string(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let i = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| LabError::InvalidInput(format!("no column {name:?} in table {}", self.name)))?;
        Ok(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# spec_hash={}\n{}\n", self.spec_hash, self.columns.join(","));
        for row in &self.rows {
            out.push_str(&row.iter().map(|x| format_float(*x)).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(name: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let hash = lines
            .next()
            .and_then(|l| l.strip_prefix("# spec_hash="))
            .ok_or_else(|| LabError::InvalidInput("table lacks the spec_hash line".into()))?;
        let header = lines
            .next()
            .ok_or_else(|| LabError::InvalidInput("table lacks a header".into()))?;
        let columns: Vec<String> = header.split(',').map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| LabError::InvalidInput(format!("row {}: {e}", i + 1)))?;
            if row.len() != columns.len() {
                return Err(LabError::InvalidInput(format!("row {} is not rectangular", i + 1)));
            }
            rows.push(row);
        }
        Ok(ResultTable {
            name: name.to_string(),
            columns,
            rows,
            spec_hash: hash.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// RMS residual of the log-log fit.
    pub residual: f64,
}

/// Least-squares line through `(log x, log y)`.
pub fn fit_rate(table: &ResultTable, x_col: &str, y_col: &str) -> Result<RateFit> {
    let xs = table.column(x_col)?;
    let ys = table.column(y_col)?;
    fit_log_log(&xs, &ys)
}

pub fn fit_log_log(xs: &[f64], ys: &[f64]) -> Result<RateFit> {
    if xs.len() != ys.len() {
        return Err(LabError::dim("fit columns", xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(LabError::InvalidInput(format!("rate fit needs at least 3 rows, got {}", xs.len())));
    }
    if let Some(v) = xs.iter().chain(ys).find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(LabError::InvalidInput(format!("rate fit needs positive values, found {v}")));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(LabError::Degenerate("all x values coincide".into()));
    }
    let slope = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / sxx;
    let intercept = my - slope * mx;
    let residual = (lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(RateFit {
        slope,
        intercept,
        residual,
    })
}

/// Files written by one run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub spec_hash: String,
    pub files: Vec<PathBuf>,
    pub tables: Vec<ResultTable>,
}

/// Everything a pipeline produces before it is written out.
struct Artifacts {
    tables: Vec<ResultTable>,
    /// Extra deterministic JSON written as `<name>.json`.
    json: Vec<(String, serde_json::Value)>,
    /// Wall-clock seconds, keyed by label.
    timing: Vec<(String, f64)>,
    /// Invariant failure to report after the files are written.
    violation: Option<String>,
}

impl Artifacts {
    fn new() -> Self {
        Artifacts {
            tables: Vec::new(),
            json: Vec::new(),
            timing: Vec::new(),
            violation: None,
        }
    }
}

/// Runs the spec and writes its tables, `metadata.json` and `timing.json` into `out_dir`.
pub fn run(spec: &ExperimentSpec, out_dir: &Path) -> Result<RunOutput> {
    let hash = spec.hash();
    let start = Instant::now();
    info!("running {} (spec {})", spec.kind.name(), &hash[..12]);
    let mut art = match spec.kind {
        ExperimentKind::Hartree | ExperimentKind::Gp | ExperimentKind::Semirel => run_solver(spec, &hash)?,
        ExperimentKind::Scatter => run_scatter(spec, &hash)?,
        ExperimentKind::ExactSweep => run_exact_sweep(spec, &hash)?,
        ExperimentKind::Bbgky => run_bbgky(spec, &hash)?,
        ExperimentKind::FockRate => run_fock_rate(spec, &hash)?,
        ExperimentKind::FockAlgebra => run_fock_algebra(spec, &hash)?,
    };
    art.timing.push(("total".into(), start.elapsed().as_secs_f64()));

    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let mut write = |name: &str, content: &str| -> Result<()> {
        let path = out_dir.join(name);
        fs::write(&path, content)?;
        files.push(path);
        Ok(())
    };
    for table in &art.tables {
        write(&format!("{}.csv", table.name), &table.to_csv())?;
    }
    for (name, value) in &art.json {
        let mut v = value.clone();
        v["spec_hash"] = json!(hash);
        write(&format!("{name}.json"), &(serde_json::to_string_pretty(&v).expect("JSON values") + "\n"))?;
    }
    let metadata = json!({
        "spec_hash": hash,
        "tool_version": TOOL_VERSION,
        "format_version": FORMAT_VERSION,
        "kind": spec.kind.name(),
        "tables": art.tables.iter().map(|t| json!({
            "file": format!("{}.csv", t.name),
            "columns": t.columns,
            "rows": t.rows.len(),
        })).collect::<Vec<_>>(),
        "spec": spec.canonical(),
        "invariant_violation": art.violation,
    });
    write("metadata.json", &(serde_json::to_string_pretty(&metadata).expect("JSON values") + "\n"))?;
    let timing: serde_json::Map<String, serde_json::Value> =
        art.timing.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    write(
        "timing.json",
        &(serde_json::to_string_pretty(&json!({"spec_hash": hash, "wall_time": timing})).expect("JSON values") + "\n"),
    )?;
    if let Some(v) = art.violation {
        return Err(LabError::Invariant(v));
    }
    Ok(RunOutput {
        spec_hash: hash,
        files,
        tables: art.tables,
    })
}

/// Indices of the recorded times closest to each requested time.
fn select_times(recorded: &[f64], wanted: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = wanted
        .iter()
        .map(|w| {
            (0..recorded.len())
                .min_by(|&a, &b| (recorded[a] - w).abs().total_cmp(&(recorded[b] - w).abs()))
                .expect("trajectory is non-empty")
        })
        .collect();
    idx.dedup();
    idx
}

fn run_solver(spec: &ExperimentSpec, hash: &str) -> Result<Artifacts> {
    let grid = spec.grid()?;
    let model = spec.model(&grid)?;
    let phi0 = spec.scaled_initial(&grid)?;
    let times = spec.floats("times");
    let t_end = *times.last().expect("times non-empty");
    let mut cfg = SolverConfig::new(spec.float("dt"), t_end, spec.scheme());
    if let Some(th) = spec.opt_float("blowup_threshold") {
        cfg = cfg.blowup_threshold(th);
    }
    let start = Instant::now();
    let traj = solvers::evolve(&phi0, &model, &cfg)?;
    let mut art = Artifacts::new();
    art.timing.push(("solver".into(), start.elapsed().as_secs_f64()));
    let keep = select_times(&traj.times, times);
    let mut table = ResultTable::new("trajectory", &["t", "mass", "energy", "h_half", "blowup_flag"], hash);
    for &i in &keep {
        let flagged = traj.blowup_time.is_some_and(|tb| traj.times[i] >= tb);
        table.push(vec![
            traj.times[i],
            traj.mass_series[i],
            traj.energy_series[i],
            traj.h_half_series[i],
            f64::from(u8::from(flagged)),
        ]);
    }
    let mut profile = ResultTable::new("final_state", &["x", "re", "im"], hash);
    for (x, z) in grid.positions().iter().zip(traj.last().amplitudes()) {
        profile.push(vec![*x, z.re, z.im]);
    }
    art.tables.push(table);
    art.tables.push(profile);
    art.json.push(("summary".into(), solver_summary(&traj)));
    Ok(art)
}

fn solver_summary(traj: &Trajectory) -> serde_json::Value {
    json!({
        "final_time": traj.times.last(),
        "max_mass_drift": traj.max_mass_drift(),
        "max_energy_drift": traj.max_energy_drift(),
        "h_half_sup": traj.h_half_sup(),
        "blowup_time": traj.blowup_time,
    })
}

fn run_scatter(spec: &ExperimentSpec, hash: &str) -> Result<Artifacts> {
    let pot = RadialPotential::square_well(spec.float("v0"), spec.float("radius"), spec.float("r_max"), spec.usize("cells"))?;
    let start = Instant::now();
    let res = scattering::solve_zero_energy(&pot)?;
    let a0 = scattering::scattering_length(&res)?;
    let mut art = Artifacts::new();
    let mut profile = ResultTable::new("profile", &["r", "f"], hash);
    for (r, f) in res.radii().zip(&res.f_profile) {
        profile.push(vec![r, *f]);
    }
    let mut rescale = ResultTable::new("rescaled", &["n", "a_n", "n_times_a_n"], hash);
    for n in spec.usizes("rescale") {
        let an = scattering::scaled_length(&pot, n)?;
        rescale.push(vec![n as f64, an, n as f64 * an]);
    }
    art.timing.push(("scatter".into(), start.elapsed().as_secs_f64()));
    art.tables.push(profile);
    art.tables.push(rescale);
    let value: serde_json::Value = serde_json::from_str(&res.to_json()).expect("result JSON");
    art.json.push(("scattering".into(), json!({"a0": a0, "result": value})));
    Ok(art)
}

fn run_exact_sweep(spec: &ExperimentSpec, hash: &str) -> Result<Artifacts> {
    let grid = spec.grid()?;
    let model = spec.model(&grid)?;
    let phi0 = spec.initial(&grid).normalized()?;
    let settings = SweepSettings {
        hartree_dt: spec.float("hartree_dt"),
        ..SweepSettings::default()
    };
    let mut art = Artifacts::new();
    let mut table = ResultTable::new("sweep", &["t", "N", "dimension", "trace_distance"], hash);
    for &t in spec.floats("times") {
        for row in manybody::convergence_sweep(&phi0, &model, &spec.usizes("ns"), t, &settings)? {
            table.push(vec![t, row.particles as f64, row.dimension as f64, row.trace_distance]);
            art.timing.push((format!("t={t},N={}", row.particles), row.wall_time));
        }
    }
    art.json.push(("fits".into(), fits_by_time(&table, "N", "trace_distance")));
    art.tables.push(table);
    Ok(art)
}

/// Log-log fit of `y` against `x` for each distinct `t` with at least 3 positive rows.
fn fits_by_time(table: &ResultTable, x: &str, y: &str) -> serde_json::Value {
    let ts = table.column("t").expect("t column");
    let xs = table.column(x).expect("x column");
    let ys = table.column(y).expect("y column");
    let mut distinct = ts.clone();
    distinct.dedup();
    let fits: Vec<_> = distinct
        .iter()
        .map(|&t| {
            let (px, py): (Vec<f64>, Vec<f64>) = (0..ts.len()).filter(|&i| ts[i] == t).map(|i| (xs[i], ys[i])).unzip();
            match fit_log_log(&px, &py) {
                Ok(f) => json!({"t": t, "slope": f.slope, "intercept": f.intercept, "residual": f.residual}),
                Err(e) => json!({"t": t, "error": e.to_string()}),
            }
        })
        .collect();
    json!({ "fits": fits })
}

fn run_bbgky(spec: &ExperimentSpec, hash: &str) -> Result<Artifacts> {
    let grid = spec.grid()?;
    let model = spec.model(&grid)?;
    let lattice = LatticeModel::from_effective(&model)?;
    let phi0 = spec.initial(&grid).normalized()?;
    let c0 = manybody::site_modes(&phi0);
    let particles = match spec.usize("particles") {
        0 => ParticleNumber::Infinite,
        n => ParticleNumber::Finite(n),
    };
    let rule = match spec.str("closure") {
        "truncate" => ClosureRule::TruncateZero,
        _ => ClosureRule::FactorizeTop,
    };
    let times = spec.floats("times");
    let t_end = *times.last().expect("times non-empty");
    let dt = spec.float("dt");
    let cfg = SolverConfig::new(dt, t_end, Scheme::ExplicitRk4);
    let init = HierarchyState::factorized(&c0, spec.usize("depth"), particles)?;
    let start = Instant::now();
    let traj = bbgky::evolve_hierarchy(&init, rule, &lattice, &cfg)?;
    let mut art = Artifacts::new();
    art.timing.push(("hierarchy".into(), start.elapsed().as_secs_f64()));
    let hartree = solvers::evolve(&phi0, &model, &SolverConfig::new(dt, t_end, Scheme::FourthOrderSplit))?;
    let keep = select_times(&traj.times, times);
    let mut table = ResultTable::new(
        "hierarchy",
        &["t", "trace_error", "hermiticity", "consistency", "flagged", "gamma1_vs_hartree"],
        hash,
    );
    for &i in &keep {
        let d = &traj.diagnostics[i];
        let j = select_times(&hartree.times, &[traj.times[i]])[0];
        let target = ReducedDensity::pure_product(&manybody::site_modes(&hartree.snapshots[j]), 1);
        let gamma1 = traj.states[i].density(1).expect("depth >= 1");
        table.push(vec![
            d.time,
            d.trace_error,
            d.hermiticity,
            d.consistency,
            f64::from(u8::from(d.flagged)),
            manybody::trace_distance(gamma1, &target)?,
        ]);
    }
    if traj.flagged() {
        art.violation = Some("hierarchy invariants drifted above the flag level".into());
    }
    art.tables.push(table);
    Ok(art)
}

fn run_fock_rate(spec: &ExperimentSpec, hash: &str) -> Result<Artifacts> {
    let grid = spec.grid()?;
    let model = spec.model(&grid)?;
    let phi0 = spec.initial(&grid).normalized()?;
    let settings = fock::RateSettings {
        hartree_dt: spec.float("hartree_dt"),
        ..Default::default()
    };
    let mut art = Artifacts::new();
    let mut table = ResultTable::new("rate", &["t", "N", "n_max", "dimension", "leakage", "trace_distance"], hash);
    let mut leakage = Vec::new();
    for &t in spec.floats("times") {
        for row in fock::rate_sweep(&phi0, &model, &spec.usizes("ns"), t, &settings)? {
            table.push(vec![
                t,
                row.particles as f64,
                row.n_max as f64,
                row.dimension as f64,
                row.leakage,
                row.trace_distance,
            ]);
            leakage.push(json!({"t": t, "N": row.particles, "n_max": row.n_max, "leakage": row.leakage}));
            art.timing.push((format!("t={t},N={}", row.particles), row.wall_time));
        }
    }
    let mut fits = fits_by_time(&table, "N", "trace_distance");
    fits["leakage"] = json!(leakage);
    art.json.push(("fits".into(), fits));
    art.tables.push(table);
    Ok(art)
}

fn run_fock_algebra(spec: &ExperimentSpec, hash: &str) -> Result<Artifacts> {
    let grid = spec.grid()?;
    let m = grid.num_sites();
    let phi0 = spec.initial(&grid).normalized()?;
    let c = manybody::site_modes(&phi0);
    let n = spec.usize("particles");
    let root = (n as f64).sqrt();
    let n_max = spec.opt_usize("n_max").unwrap_or_else(|| fock::cutoff_rule(n as f64));
    let space = Arc::new(TruncatedFock::new(m, n_max)?);
    let phi = Displacement::new(c.iter().map(|z| z * root).collect())?;
    let start = Instant::now();
    let coherent = fock::coherent_state(&phi, space.clone())?;
    let mut art = Artifacts::new();

    let mean = phi.norm_sqr();
    let lnf = manybody::ln_factorials(n_max);
    let mut weights = ResultTable::new("sector_weights", &["n", "weight", "poisson"], hash);
    for (k, w) in coherent.sector_weights().iter().enumerate() {
        let poisson = (-mean + k as f64 * mean.ln() - lnf[k]).exp();
        weights.push(vec![k as f64, *w, poisson]);
    }

    // eigen-relation a(f) W Omega = <f, phi> W Omega for each site mode f
    let mut eigen: f64 = 0.0;
    for p in 0..m {
        let mut f = vec![C64::new(0.0, 0.0); m];
        f[p] = C64::new(1.0, 0.0);
        let af = fock::apply_ladder(Ladder::Annihilate, &f, &coherent)?.vector;
        let ev = linalg::dot(&f, phi.orbital());
        let expected: Vec<C64> = coherent.coefficients().iter().map(|z| z * ev).collect();
        eigen = eigen.max(linalg::diff_norm(af.coefficients(), &expected));
    }
    let (shift_a, shift_c) = fock::weyl_conjugate_check(&phi, &c, space.clone())?;
    let projection = fock::sector_projection(&coherent, n)?;
    let state = projection.normalized_state(n)?;
    let product = manybody::ManyBodyState::product(state.basis().clone(), &c)?;
    let product_error = linalg::diff_norm(state.coefficients(), product.coefficients());

    let mut checks = ResultTable::new("checks", &["check", "value"], hash);
    let labels = [
        "norm_deficit",
        "number_error",
        "eigen_residual",
        "weyl_shift_annihilate",
        "weyl_shift_create",
        "projection_constant_error",
        "product_state_error",
    ];
    let values = [
        1.0 - coherent.norm_sqr(),
        (fock::number_expectation(&coherent) - mean).abs(),
        eigen,
        shift_a,
        shift_c,
        (projection.constant - fock::d_n(n)).abs() / fock::d_n(n),
        product_error,
    ];
    for (i, v) in values.iter().enumerate() {
        checks.push(vec![i as f64, *v]);
    }
    let mut dn = ResultTable::new("d_n", &["n", "d_n", "d_n_over_n_quarter"], hash);
    for k in spec.usizes("dn_range") {
        let d = fock::d_n(k);
        dn.push(vec![k as f64, d, d / (k as f64).powf(0.25)]);
    }
    art.timing.push(("algebra".into(), start.elapsed().as_secs_f64()));
    art.json.push((
        "checks".into(),
        json!(labels.iter().zip(values).map(|(l, v)| (l.to_string(), json!(v))).collect::<serde_json::Map<_, _>>()),
    ));
    art.tables.push(weights);
    art.tables.push(checks);
    art.tables.push(dn);

    let times = spec.floats("times");
    if let Some(&t_end) = times.last() {
        let grid_model = spec.model(&grid)?;
        let settings = FluctuationSettings {
            n_max: spec.opt_usize("fluctuation_n_max"),
            dt: spec.float("fluctuation_dt"),
            record_every: 1,
            ..Default::default()
        };
        let start = Instant::now();
        let traj = fock::evolve_fluctuation(
            &phi0,
            &grid_model,
            n,
            GeneratorVariant::Limit,
            FluctuationPath::Direct,
            t_end,
            &settings,
        )?;
        let growth = fock::number_growth(&traj)?;
        art.timing.push(("fluctuation".into(), start.elapsed().as_secs_f64()));
        let keep = select_times(&traj.times, times);
        let mut table = ResultTable::new("growth", &["t", "number", "parity", "leakage"], hash);
        for &i in &keep {
            table.push(vec![traj.times[i], growth.values[i], traj.states[i].parity(), traj.leakage[i]]);
        }
        art.tables.push(table);
        art.json.push((
            "growth".into(),
            json!({
                "C": growth.c,
                "D": growth.d,
                "fit_residual": growth.fit_residual,
                "norm_drift": traj.norm_drift,
                "max_leakage": traj.max_leakage(),
            }),
        ));
    }
    Ok(art)
}

/// Reads a table written by `run` and checks its hash against `spec`, if given.
pub fn load_table(path: &Path, spec: Option<&ExperimentSpec>) -> Result<ResultTable> {
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("table");
    let table = ResultTable::from_csv(name, &fs::read_to_string(path)?)?;
    if let Some(spec) = spec {
        let expected = spec.hash();
        if table.spec_hash != expected {
            return Err(LabError::Invariant(format!(
                "spec hash mismatch: table has {}, spec has {expected}",
                table.spec_hash
            )));
        }
    }
    Ok(table)
}

/// Process exit code for an error: 2 schema, 3 numerical, 4 invariant, 1 I/O.
pub fn exit_code(err: &LabError) -> i32 {
    match err {
        LabError::Schema(_) => 2,
        LabError::Invariant(_) => 4,
        LabError::Io(_) => 1,
        _ => 3,
    }
}

/// Human-readable listing of the kinds and their keys.
pub fn list_experiments() -> String {
    let mut out = String::new();
    for kind in ExperimentKind::ALL {
        let _ = writeln!(out, "{:<13} {}", kind.name(), kind.description());
        let (req, opt): (Vec<_>, Vec<_>) = kind.keys().into_iter().partition(|(_, r)| *r);
        let names = |v: Vec<(&str, bool)>| v.into_iter().map(|(k, _)| k).collect::<Vec<_>>().join(", ");
        let _ = writeln!(out, "{:<13}   required: {}", "", names(req));
        let _ = writeln!(out, "{:<13}   optional: {}", "", names(opt));
    }
    out
}
