//! Experiment configuration, dispatch and report files.
//!
//! Every experiment produces string tables; the summary is computed from
//! those tables alone, so `report` on an output directory reproduces it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::borel_cantelli::{build_targets, run_sbc_multi, TargetSequence};
use crate::error::{LabError, Result};
use crate::evt::{
    self, block_maxima, d3_horizon, d3_stat, d_prime_iid, d_prime_stat, independent_maxima, iid_maxima,
    level_fit, level_transformed, levels, poisson_control, repp, Metric, Observable, Window,
    NORMALIZATION_V_GRID, PERIODICITY_HORIZON,
};
use crate::flow::{self, Roof, SuspensionPoint};
use crate::maps::{ModelParams, Orbit, SectionPoint, System, SystemKind};
use crate::measure::{EmpiricalMeasure, MeasureOptions, OrbitScan, RadialMass, Shape, DEFAULT_CELL_EXP};
use crate::rng::{Domain, Seeder};
use crate::stats;

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "LORENZ_LAB_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Sbc,
    Evt,
    Repp,
    D3,
    Dprime,
    FlowEvt,
    Measure,
    Corr,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Sbc => "sbc",
            ExperimentKind::Evt => "evt",
            ExperimentKind::Repp => "repp",
            ExperimentKind::D3 => "d3",
            ExperimentKind::Dprime => "dprime",
            ExperimentKind::FlowEvt => "flow-evt",
            ExperimentKind::Measure => "measure",
            ExperimentKind::Corr => "corr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CenterSpec {
    Point { x: f64, y: f64 },
    /// A point of a typical orbit; `seed` defaults to the master seed.
    RandomGeneric {
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Point of the period-two orbit of the Lorenz map.
    PeriodTwo,
}

impl Default for CenterSpec {
    fn default() -> Self {
        CenterSpec::RandomGeneric { seed: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CorrObservable {
    /// `psi(x, y) = x`.
    #[default]
    Identity,
    /// `psi = x mod 1` in `[0, 1)`.
    Circle,
    /// `exp(-|p - c|^2 / (2 w^2))` around the configured center.
    Bump,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub system: SystemKind,
    /// Mandatory; may be supplied on the command line instead.
    pub seed: Option<u64>,
    pub output: PathBuf,
    pub params: ModelParams,
    pub center: CenterSpec,
    pub n: u64,
    pub trials: usize,
    pub ensemble: usize,
    pub burn_in: u64,
    /// Orbit samples behind measure estimates.
    pub samples: u64,
    /// Independent orbits the samples are split over.
    pub segments: usize,
    pub cell_exp: u32,
    pub shapes: Vec<Shape>,
    pub metric: Metric,
    pub gamma1: f64,
    pub c: f64,
    pub v_grid: Vec<f64>,
    pub n_grid: Vec<u64>,
    pub k_grid: Vec<u64>,
    pub t_grid: Vec<u64>,
    /// Later block length for D3; defaults to `n / 2`.
    pub l: Option<u64>,
    pub windows: Vec<Vec<[f64; 2]>>,
    /// Flow horizon; defaults to `n * h_bar`.
    pub horizon: Option<f64>,
    pub lags: u64,
    pub observable: CorrObservable,
    pub bump_width: f64,
    /// Upper bound on map steps for budgeted experiments.
    pub budget: u64,
    /// Also run the i.i.d./Poisson/periodic controls.
    pub controls: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::Measure,
            system: SystemKind::Lorenz,
            seed: None,
            output: PathBuf::from("out"),
            params: ModelParams::default(),
            center: CenterSpec::default(),
            n: 100_000,
            trials: 1000,
            ensemble: 100,
            burn_in: 1000,
            samples: 100_000_000,
            segments: 20,
            cell_exp: DEFAULT_CELL_EXP,
            shapes: vec![Shape::Ball],
            metric: Metric::Euclidean,
            gamma1: 0.6,
            c: 0.01,
            v_grid: vec![-1.0, 0.0, 1.0, 2.0],
            n_grid: vec![10_000, 100_000, 1_000_000],
            k_grid: vec![2, 5, 10, 20],
            t_grid: vec![1, 10, 100, 1000, 10_000],
            l: None,
            windows: vec![vec![[0.0, 1.0]], vec![[1.0, 2.0]]],
            horizon: None,
            lags: 50,
            observable: CorrObservable::Identity,
            bump_width: 0.1,
            budget: 10_000_000_000,
            controls: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn master_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| LabError::Config("seed is mandatory (set `seed` or pass --seed)".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.master_seed()?;
        self.params.validate()?;
        let counts = [
            ("n", self.n),
            ("trials", self.trials as u64),
            ("ensemble", self.ensemble as u64),
            ("samples", self.samples),
            ("segments", self.segments as u64),
            ("lags", self.lags),
            ("budget", self.budget),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(LabError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.gamma1 > 0.0 && self.gamma1 <= 1.0) {
            return Err(LabError::Config(format!("gamma1 = {} must lie in (0, 1]", self.gamma1)));
        }
        if !(self.c > 0.0 && self.c < 1.0) {
            return Err(LabError::Config(format!("c = {} must lie in (0, 1)", self.c)));
        }
        if self.lags > 200 {
            return Err(LabError::Config(format!("lags = {} exceeds 200", self.lags)));
        }
        if self.shapes.is_empty() || self.v_grid.is_empty() || self.k_grid.is_empty() || self.t_grid.is_empty() {
            return Err(LabError::Config("shapes, v_grid, k_grid and t_grid must be nonempty".into()));
        }
        if self.k_grid.contains(&0) || self.n_grid.contains(&0) {
            return Err(LabError::Config("grid entries must be positive".into()));
        }
        for w in self.windows()? {
            w.validate()?;
        }
        if !(self.bump_width > 0.0) {
            return Err(LabError::Config("bump_width must be positive".into()));
        }
        if self.center == CenterSpec::PeriodTwo && self.system != SystemKind::Lorenz {
            return Err(LabError::Config("period-two center is defined for the Lorenz map only".into()));
        }
        if !(4..=14).contains(&self.cell_exp) {
            return Err(LabError::Config(format!("cell_exp = {} outside 4..=14", self.cell_exp)));
        }
        Ok(())
    }

    pub fn windows(&self) -> Result<Vec<Window>> {
        if self.windows.is_empty() {
            return Err(LabError::Config("windows must be nonempty".into()));
        }
        Ok(self
            .windows
            .iter()
            .map(|w| Window {
                intervals: w.iter().map(|iv| (iv[0], iv[1])).collect(),
            })
            .collect())
    }

    pub fn system(&self) -> Result<System> {
        System::from_kind(self.system, self.params)
    }

    pub fn seeder(&self) -> Result<Seeder> {
        Ok(Seeder::new(self.master_seed()?))
    }

    pub fn resolve_center(&self) -> Result<SectionPoint> {
        let system = self.system()?;
        match self.center {
            CenterSpec::Point { x, y } => {
                let p = SectionPoint::new(x, y);
                if !p.in_section() {
                    return Err(LabError::Domain(if x.abs() > 0.5 { x } else { y }));
                }
                Ok(p)
            }
            CenterSpec::RandomGeneric { seed } => {
                let s = Seeder::new(seed.unwrap_or(self.master_seed()?));
                evt::generic_center(system, self.burn_in.max(1000), &s)
            }
            CenterSpec::PeriodTwo => match system {
                System::Lorenz(m) => Ok(m.period_two_orbit()?[0]),
                _ => Err(LabError::Config("period-two center needs the Lorenz map".into())),
            },
        }
    }
}

/// A named CSV table held as strings.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<I: IntoIterator<Item = String>>(&mut self, row: I) {
        let row: Vec<String> = row.into_iter().collect();
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn index(&self, col: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| LabError::Config(format!("table {} has no column {col}", self.name)))
    }

    pub fn strings(&self, col: &str) -> Result<Vec<&str>> {
        let i = self.index(col)?;
        Ok(self.rows.iter().map(|r| r[i].as_str()).collect())
    }

    /// Column parsed as floats; empty cells become NaN.
    pub fn floats(&self, col: &str) -> Result<Vec<f64>> {
        self.strings(col)?
            .into_iter()
            .map(|s| {
                if s.is_empty() {
                    Ok(f64::NAN)
                } else {
                    s.parse::<f64>()
                        .map_err(|_| LabError::Config(format!("bad number {s:?} in {}.{col}", self.name)))
                }
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.header)?;
        for r in &self.rows {
            out.write_record(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(name: &str, path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let header = rd.headers()?.iter().map(String::from).collect();
        let rows = rd
            .records()
            .map(|r| r.map(|rec| rec.iter().map(String::from).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
        Ok(Self {
            name: name.to_string(),
            header,
            rows,
        })
    }
}

fn f(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x}")
    }
}

fn s<T: ToString>(x: T) -> String {
    x.to_string()
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub params_hash: String,
    pub build: String,
    pub tables: Vec<Table>,
    pub summary: Value,
    pub warnings: Vec<String>,
}

impl ExperimentReport {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn summary_json(&self) -> Result<Value> {
        Ok(json!({
            "build": self.build,
            "config": serde_json::to_value(&self.config)?,
            "experiment": self.config.experiment.name(),
            "params_hash": self.params_hash,
            "summary": self.summary,
            "tables": self.tables.iter().map(|t| format!("{}.csv", t.name)).collect::<Vec<_>>(),
            "warnings": self.warnings,
        }))
    }

    /// Writes every table and `summary.json` into `dir`, each through a
    /// temporary file renamed into place.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for t in &self.tables {
            write_atomic(&dir.join(format!("{}.csv", t.name)), |w| t.write_csv(w))?;
        }
        let text = serde_json::to_string_pretty(&self.summary_json()?)?;
        write_atomic(&dir.join("summary.json"), |w| Ok(w.write_all(text.as_bytes())?))
    }
}

pub fn write_atomic<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        body(&mut buf)?;
        buf.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| LabError::Io(e.error))?;
    Ok(())
}

pub fn build_id() -> String {
    format!("lorenz-lab {}", env!("CARGO_PKG_VERSION"))
}

/// Worker count from [`WORKERS_ENV`], if set.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| LabError::Config(format!("{WORKERS_ENV}={v:?} is not a positive integer"))),
        Err(_) => Ok(None),
    }
}

/// Runs `f` on a pool of `workers` threads (rayon's default when `None`).
pub fn with_workers<T: Send, F: FnOnce() -> T + Send>(workers: Option<usize>, f: F) -> Result<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| LabError::Config(e.to_string()))?;
    Ok(pool.install(f))
}

/// Validates the config, runs the experiment and computes its summary.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let mut warnings = Vec::new();
    let tables = match config.experiment {
        ExperimentKind::Measure => run_measure(config)?,
        ExperimentKind::Sbc => run_sbc_experiment(config, &mut warnings)?,
        ExperimentKind::Evt => run_evt(config)?,
        ExperimentKind::Repp => run_repp(config, &mut warnings)?,
        ExperimentKind::D3 => run_d3(config)?,
        ExperimentKind::Dprime => run_dprime(config, &mut warnings)?,
        ExperimentKind::FlowEvt => run_flow(config, &mut warnings)?,
        ExperimentKind::Corr => run_corr(config)?,
    };
    let summary = summarize(config.experiment, &tables)?;
    Ok(ExperimentReport {
        config: config.clone(),
        params_hash: config.params.hash_hex(),
        build: build_id(),
        tables,
        summary,
        warnings,
    })
}

/// Re-reads the tables in `dir` and recomputes the summary.
pub fn report(dir: &Path) -> Result<ExperimentReport> {
    let text = fs::read_to_string(dir.join("summary.json"))?;
    let old: Value = serde_json::from_str(&text)?;
    let config: ExperimentConfig = serde_json::from_value(old["config"].clone())?;
    let names: Vec<String> = serde_json::from_value(old["tables"].clone())?;
    let tables = names
        .iter()
        .map(|n| Table::read_csv(n.trim_end_matches(".csv"), &dir.join(n)))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(config.experiment, &tables)?;
    Ok(ExperimentReport {
        params_hash: config.params.hash_hex(),
        build: build_id(),
        warnings: serde_json::from_value(old["warnings"].clone()).unwrap_or_default(),
        config,
        tables,
        summary,
    })
}

/// Builds the empirical measure described by the config and writes its
/// snapshot to `path`.
pub fn snapshot_measure(config: &ExperimentConfig, path: &Path) -> Result<EmpiricalMeasure> {
    config.validate()?;
    let m = EmpiricalMeasure::build(
        config.system()?,
        config.samples,
        config.burn_in,
        &config.seeder()?,
        MeasureOptions {
            cell_exp: config.cell_exp,
            ..MeasureOptions::default()
        },
    )?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_atomic(path, |w| m.write_snapshot(w))?;
    Ok(m)
}

fn find<'a>(tables: &'a [Table], name: &str) -> Result<&'a Table> {
    tables
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| LabError::Config(format!("missing table {name}")))
}

pub fn summarize(kind: ExperimentKind, tables: &[Table]) -> Result<Value> {
    match kind {
        ExperimentKind::Measure => summarize_measure(tables),
        ExperimentKind::Sbc => summarize_sbc(tables),
        ExperimentKind::Evt => summarize_evt(tables),
        ExperimentKind::Repp => summarize_repp(tables),
        ExperimentKind::D3 => summarize_d3(tables),
        ExperimentKind::Dprime => summarize_dprime(tables),
        ExperimentKind::FlowEvt => summarize_flow(tables),
        ExperimentKind::Corr => summarize_corr(tables),
    }
}

// ---- measure

fn run_measure(cfg: &ExperimentConfig) -> Result<Vec<Table>> {
    let system = cfg.system()?;
    let m = EmpiricalMeasure::build(
        system,
        cfg.n,
        cfg.burn_in,
        &cfg.seeder()?,
        MeasureOptions {
            cell_exp: cfg.cell_exp,
            ..MeasureOptions::default()
        },
    )?;
    let mut q = Table::new("quadrants", &["quadrant", "count", "total"]);
    for (k, mass) in m.quadrant_masses().iter().enumerate() {
        q.push([s(k), s((mass * m.total() as f64).round() as u64), s(m.total())]);
    }
    let center = cfg.resolve_center()?;
    let mut r = Table::new("radial", &["center_x", "center_y", "radius", "count", "mass"]);
    let mut radius = 0.25;
    while radius > 1e-4 {
        let c = m.count_within(center, radius, Shape::Ball);
        r.push([f(center.x), f(center.y), f(radius), s(c), f(c as f64 / m.total() as f64)]);
        radius /= 2.0;
    }
    Ok(vec![q, r])
}

fn summarize_measure(tables: &[Table]) -> Result<Value> {
    let q = find(tables, "quadrants")?;
    let counts = q.floats("count")?;
    let total = q.floats("total")?;
    let masses: Vec<f64> = counts.iter().zip(&total).map(|(c, t)| c / t).collect();
    let r = find(tables, "radial")?;
    let (radii, cnt, mass) = (r.floats("radius")?, r.floats("count")?, r.floats("mass")?);
    let (lx, ly): (Vec<f64>, Vec<f64>) = radii
        .iter()
        .zip(&cnt)
        .zip(&mass)
        .filter(|((_, &c), _)| c >= crate::measure::MIN_BALL_SAMPLES as f64)
        .map(|((r, _), m)| (r.ln(), m.ln()))
        .unzip();
    let dim = stats::linear_fit(&lx, &ly).ok();
    Ok(json!({
        "quadrant_masses": masses,
        "local_dimension": dim.as_ref().map(|d| d.slope),
        "local_dimension_r2": dim.as_ref().map(|d| d.r_squared),
    }))
}

// ---- sbc

fn run_sbc_experiment(cfg: &ExperimentConfig, warnings: &mut Vec<String>) -> Result<Vec<Table>> {
    let system = cfg.system()?;
    let seeder = cfg.seeder()?;
    let center = cfg.resolve_center()?;
    let m = EmpiricalMeasure::build(
        system,
        cfg.samples,
        cfg.burn_in,
        &seeder.child(1),
        MeasureOptions {
            cell_exp: cfg.cell_exp,
            ..MeasureOptions::default()
        },
    )?;
    let targets: Vec<TargetSequence> = cfg
        .shapes
        .iter()
        .map(|&sh| build_targets(&m, center, sh, cfg.gamma1, cfg.c, cfg.n as usize))
        .collect::<Result<_>>()?;
    for t in &targets {
        warnings.extend(t.warnings.iter().cloned());
    }
    let refs: Vec<&TargetSequence> = targets.iter().collect();
    let reports = run_sbc_multi(system, &refs, cfg.ensemble, cfg.burn_in, &seeder)?;
    let mut ratios = Table::new("ratios", &["shape", "member", "checkpoint", "s_n", "e_n", "ratio"]);
    let mut tt = Table::new("targets", &["shape", "i", "radius", "mass", "e_i", "log_extent"]);
    for (t, rep) in targets.iter().zip(&reports) {
        let shape = shape_name(t.shape);
        if rep.excluded > 0 {
            warnings.push(format!("{shape}: {} members excluded after singular truncation", rep.excluded));
        }
        for mt in &rep.members {
            for (k, &cp) in rep.checkpoints.iter().enumerate() {
                let e = rep.e_n[k];
                ratios.push([s(shape), s(mt.member), s(cp), s(mt.hits[k]), f(e), f(mt.hits[k] as f64 / e)]);
            }
        }
        for &cp in &rep.checkpoints {
            let i = cp as usize;
            let r = t.radii[i - 1];
            tt.push([s(shape), s(i), f(r), f(t.masses[i - 1]), f(t.e_n(i)), f((i as f64).ln() * 2.0 * r)]);
        }
    }
    Ok(vec![ratios, tt])
}

fn shape_name(sh: Shape) -> &'static str {
    match sh {
        Shape::Ball => "ball",
        Shape::Square => "square",
    }
}

fn summarize_sbc(tables: &[Table]) -> Result<Value> {
    let t = find(tables, "ratios")?;
    let shapes = t.strings("shape")?;
    let cps = t.floats("checkpoint")?;
    let ratio = t.floats("ratio")?;
    let mut groups: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    for ((sh, cp), r) in shapes.iter().zip(&cps).zip(&ratio) {
        groups.entry((sh.to_string(), *cp as u64)).or_default().push(*r);
    }
    let mut by_shape: BTreeMap<String, Value> = BTreeMap::new();
    let mut terminal: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for ((sh, cp), rs) in &groups {
        let (m, sd) = (stats::mean(rs), stats::std_dev(rs));
        let entry = by_shape.entry(sh.clone()).or_insert_with(|| json!({"checkpoints": []}));
        entry["checkpoints"]
            .as_array_mut()
            .expect("array")
            .push(json!({"n": cp, "mean_ratio": m, "std_ratio": sd, "members": rs.len()}));
        terminal.insert(sh.clone(), (m, sd, rs.len()));
    }
    for (sh, (m, sd, k)) in &terminal {
        by_shape.get_mut(sh).expect("shape")["terminal"] =
            json!({"mean_ratio": m, "std_ratio": sd, "sem": sd / (*k as f64).sqrt()});
    }
    let mut out = json!({ "shapes": by_shape });
    if let (Some(b), Some(q)) = (terminal.get("ball"), terminal.get("square")) {
        let sigma = (b.1.powi(2) / b.2 as f64 + q.1.powi(2) / q.2 as f64).sqrt();
        out["ball_vs_square"] = json!({
            "difference": b.0 - q.0,
            "sigma": sigma,
            "within_2_sigma": (b.0 - q.0).abs() <= 2.0 * sigma,
        });
    }
    Ok(out)
}

// ---- evt

fn metric_shape(cfg: &ExperimentConfig) -> Shape {
    cfg.metric.shape()
}

fn evt_scan(cfg: &ExperimentConfig, center: SectionPoint, max_mass: f64) -> Result<OrbitScan> {
    OrbitScan::for_mass(
        cfg.system()?,
        center,
        metric_shape(cfg),
        max_mass,
        cfg.samples,
        cfg.segments,
        cfg.burn_in,
        &cfg.seeder()?.child(2),
    )
}

fn max_level_mass(v_grid: &[f64], n_grid: &[u64]) -> f64 {
    let v_min = v_grid.iter().copied().fold(f64::INFINITY, f64::min).min(NORMALIZATION_V_GRID[0]);
    let n_min = n_grid.iter().copied().min().unwrap_or(1);
    (-v_min).exp() / n_min as f64
}

fn maxima_table(name: &str, sample: &evt::MaximaSample, prof: &dyn RadialMass) -> Table {
    let mut t = Table::new(name, &["trial", "min_distance", "phi", "level_transformed"]);
    let z = level_transformed(sample, prof);
    for (k, (&d, z)) in sample.min_distances.iter().zip(z).enumerate() {
        t.push([s(k), f(d), f(evt::phi_of_distance(d)), f(z)]);
    }
    t
}

fn run_evt(cfg: &ExperimentConfig) -> Result<Vec<Table>> {
    let system = cfg.system()?;
    let seeder = cfg.seeder()?;
    let center = cfg.resolve_center()?;
    let obs = Observable::new(center, cfg.metric);
    let scan = evt_scan(cfg, center, max_level_mass(&cfg.v_grid, &[cfg.n]))?;
    let prof = scan.profile();
    let sched = levels(&prof, &cfg.v_grid, &[cfg.n])?;
    let r_max = sched.levels.iter().map(|l| l.radius).fold(0.0, f64::max);
    evt::check_nonperiodic(system, &obs, r_max, PERIODICITY_HORIZON, &seeder)?;
    let norm = level_fit(&prof, cfg.n, &NORMALIZATION_V_GRID)?;

    let mut lt = Table::new(
        "levels",
        &["n", "v", "target", "radius", "u", "mass", "center_x", "center_y"],
    );
    for l in &sched.levels {
        lt.push([s(l.n), f(l.v), f(l.target), f(l.radius), f(l.u), f(l.mass), f(center.x), f(center.y)]);
    }
    let mut ft = Table::new("normalization_fit", &["n", "radius", "mass"]);
    for (r, m) in norm.radii.iter().zip(&norm.masses) {
        ft.push([s(cfg.n), f(*r), f(*m)]);
    }
    let ind = independent_maxima(system, &obs, cfg.n, cfg.trials, cfg.burn_in, &seeder)?;
    let mut tables = vec![lt, ft, maxima_table("maxima", &ind, &prof)];
    let blocks = block_maxima(&scan, cfg.n);
    if blocks.min_distances.len() >= 1000 {
        tables.push(maxima_table("blocks", &blocks, &prof));
    }
    if cfg.controls {
        let iid = iid_maxima(&prof, cfg.n, cfg.trials, &seeder)?;
        tables.push(maxima_table("iid", &iid, &prof));
    }
    Ok(tables)
}

fn fit_table(t: &Table) -> Result<stats::LinearFit> {
    let lx: Vec<f64> = t.floats("radius")?.iter().map(|r| r.ln()).collect();
    let ly: Vec<f64> = t.floats("mass")?.iter().map(|m| m.ln()).collect();
    stats::linear_fit(&lx, &ly)
}

fn maxima_summary(t: &Table, levels: &Table, a: f64, b: f64) -> Result<Value> {
    let d = t.floats("min_distance")?;
    let phi = t.floats("phi")?;
    let z_np = t.floats("level_transformed")?;
    let rows: Vec<Value> = levels
        .floats("v")?
        .iter()
        .zip(levels.floats("radius")?)
        .map(|(&v, r)| {
            let p = d.iter().filter(|&&x| x >= r).count() as f64 / d.len() as f64;
            let limit = stats::gumbel_cdf(v);
            json!({"v": v, "p_hat": p, "limit": limit, "error": p - limit,
                   "sigma": stats::binomial_sigma(limit, d.len())})
        })
        .collect();
    let ks = evt::gumbel_ks(&phi, a, b)?;
    Ok(json!({
        "trials": d.len(),
        "cdf": rows,
        "gumbel_ks": ks.ks,
        "gumbel_ks_p_value": ks.p_value,
        "mle_location": ks.mle.location,
        "mle_scale": ks.mle.scale,
        "level_transformed_ks": stats::ks_distance(&z_np, stats::gumbel_cdf),
    }))
}

fn summarize_evt(tables: &[Table]) -> Result<Value> {
    let lv = find(tables, "levels")?;
    let nf = find(tables, "normalization_fit")?;
    let n = lv.floats("n")?[0] as u64;
    let fit = fit_table(nf)?;
    let (a, b) = (fit.slope, ((n as f64).ln() + fit.intercept) / fit.slope);
    let mut out = json!({
        "n": n,
        "normalization": {"a": a, "b": b, "dimension": fit.slope, "log_c": fit.intercept, "r_squared": fit.r_squared},
        "levels": lv.floats("u")?,
    });
    for name in ["maxima", "blocks", "iid"] {
        if let Ok(t) = find(tables, name) {
            out[name] = maxima_summary(t, lv, a, b)?;
        }
    }
    Ok(out)
}

// ---- repp

fn run_repp(cfg: &ExperimentConfig, warnings: &mut Vec<String>) -> Result<Vec<Table>> {
    let system = cfg.system()?;
    let seeder = cfg.seeder()?;
    let center = cfg.resolve_center()?;
    let obs = Observable::new(center, cfg.metric);
    let v = cfg.v_grid[0];
    let scan = evt_scan(cfg, center, (-v).exp() / cfg.n as f64)?;
    let prof = scan.profile();
    let target = (-v).exp() / cfg.n as f64;
    let radius = prof.invert(target)?;
    // exceedances are strict, so the mass is that of the open ball
    let mass = prof.distances().partition_point(|&d| d < radius) as f64 / prof.total as f64;
    evt::check_nonperiodic(system, &obs, radius, PERIODICITY_HORIZON, &seeder)?;
    let windows = cfg.windows()?;
    let counts = repp(system, &obs, radius, mass, &windows, cfg.trials, cfg.budget, &seeder)?;
    if counts.partial {
        warnings.push(format!("budget allowed {} of {} trials", counts.counts.len(), cfg.trials));
    }
    let mut tables = vec![
        window_table(&windows),
        {
            let mut t = Table::new("level", &["n", "v", "radius", "mass", "a_n"]);
            t.push([s(cfg.n), f(v), f(radius), f(mass), f(counts.a_n)]);
            t
        },
    ];
    tables.extend(counts_tables("counts", &counts));
    if cfg.controls {
        tables.extend(counts_tables("poisson_control", &poisson_control(&windows, cfg.trials, &seeder)?));
    }
    Ok(tables)
}

fn window_table(windows: &[Window]) -> Table {
    let mut t = Table::new("windows", &["window", "intervals", "length"]);
    for (k, w) in windows.iter().enumerate() {
        let iv: Vec<String> = w.intervals.iter().map(|(a, b)| format!("[{a},{b})")).collect();
        t.push([s(k), iv.join(" "), f(w.measure())]);
    }
    t
}

fn counts_tables(name: &str, c: &evt::ReppCounts) -> [Table; 2] {
    let mut header: Vec<String> = (0..c.windows.len()).map(|k| format!("w{k}")).collect();
    header.insert(0, "trial".into());
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut t = Table::new(name, &h);
    for (k, row) in c.counts.iter().enumerate() {
        let mut r = vec![s(k)];
        r.extend(row.iter().map(|x| s(*x)));
        t.push(r);
    }
    let mut g = Table::new(&format!("{name}_gaps"), &["gap"]);
    for x in &c.gaps {
        g.push([f(*x)]);
    }
    [t, g]
}

fn counts_summary(tables: &[Table], name: &str, lengths: &[f64]) -> Result<Value> {
    let t = find(tables, name)?;
    let mut windows = Vec::new();
    for (k, len) in lengths.iter().enumerate() {
        let counts: Vec<u64> = t.floats(&format!("w{k}"))?.iter().map(|&x| x as u64).collect();
        let ct = stats::poisson_count_test(&counts, *len)?;
        windows.push(serde_json::to_value(ct)?);
    }
    let gaps = find(tables, &format!("{name}_gaps"))?.floats("gap")?;
    let ks = stats::ks_distance(&gaps, stats::exp_cdf);
    Ok(json!({
        "trials": t.rows.len(),
        "windows": windows,
        "gaps": gaps.len(),
        "gap_ks": ks,
        "gap_ks_p_value": stats::kolmogorov_pvalue(ks, gaps.len()),
    }))
}

fn summarize_repp(tables: &[Table]) -> Result<Value> {
    let lengths = find(tables, "windows")?.floats("length")?;
    let lv = find(tables, "level")?;
    let mut out = json!({
        "a_n": lv.floats("a_n")?[0],
        "radius": lv.floats("radius")?[0],
        "counts": counts_summary(tables, "counts", &lengths)?,
    });
    if find(tables, "poisson_control").is_ok() {
        out["poisson_control"] = counts_summary(tables, "poisson_control", &lengths)?;
    }
    Ok(out)
}

// ---- d3 and dprime

fn run_d3(cfg: &ExperimentConfig) -> Result<Vec<Table>> {
    let center = cfg.resolve_center()?;
    let v = cfg.v_grid[0];
    let scan = evt_scan(cfg, center, (-v).exp() / cfg.n as f64)?;
    let prof = scan.profile();
    let radius = prof.invert((-v).exp() / cfg.n as f64)?;
    let mut t_grid = cfg.t_grid.clone();
    let tn = d3_horizon(cfg.n);
    if !t_grid.contains(&tn) {
        t_grid.push(tn);
    }
    t_grid.sort_unstable();
    let l = cfg.l.unwrap_or(cfg.n / 2);
    let rows = d3_stat(&scan, radius, cfg.n, &t_grid, l)?;
    let mut t = Table::new(
        "d3",
        &["n", "v", "t", "l", "exceedances", "anchored", "p", "q", "q_cond", "gamma", "sigma"],
    );
    for r in rows {
        t.push([
            s(r.n),
            f(v),
            s(r.t),
            s(r.l),
            s(r.exceedances),
            s(r.anchored),
            f(r.p),
            f(r.q),
            f(r.q_cond),
            f(r.gamma),
            f(r.sigma),
        ]);
    }
    Ok(vec![t])
}

fn summarize_d3(tables: &[Table]) -> Result<Value> {
    let t = find(tables, "d3")?;
    let n = t.floats("n")?[0] as u64;
    let ts = t.floats("t")?;
    let g = t.floats("gamma")?;
    let sg = t.floats("sigma")?;
    let tn = d3_horizon(n) as f64;
    let k = ts.iter().position(|&x| x == tn);
    let rows: Vec<Value> = ts
        .iter()
        .zip(&g)
        .zip(&sg)
        .map(|((t, g), s)| json!({"t": t, "gamma": g, "sigma": s, "z": if *s > 0.0 { g.abs() / s } else { 0.0 }}))
        .collect();
    Ok(json!({
        "n": n,
        "t_n": tn,
        "rows": rows,
        "at_t_n": k.map(|k| json!({
            "gamma": g[k], "sigma": sg[k],
            "within_3_sigma": g[k].abs() <= 3.0 * sg[k],
        })),
    }))
}

fn run_dprime(cfg: &ExperimentConfig, warnings: &mut Vec<String>) -> Result<Vec<Table>> {
    let center = cfg.resolve_center()?;
    let v = cfg.v_grid[0];
    let scan = evt_scan(cfg, center, max_level_mass(&[v], &cfg.n_grid))?;
    let prof = scan.profile();
    let sched = levels(&prof, &[v], &cfg.n_grid)?;
    let table = d_prime_stat(&scan, &sched, v, &cfg.n_grid, &cfg.k_grid)?;
    warnings.extend(table.warnings.iter().cloned());
    let header = ["n", "v", "k", "lag_max", "exceedances", "pairs", "e_hat", "sigma", "independent"];
    let mut t = Table::new("dprime", &header);
    let push = |t: &mut Table, r: &evt::DPrimeRow| {
        t.push([
            s(r.n),
            f(r.v),
            s(r.k),
            s(r.lag_max),
            s(r.exceedances),
            s(r.pairs),
            f(r.e_hat),
            f(r.sigma),
            f(r.independent),
        ])
    };
    for r in &table.rows {
        push(&mut t, r);
    }
    let mut tables = vec![t];
    if cfg.controls {
        let mut c = Table::new("dprime_iid", &header);
        let seg_len = scan.segments.first().map_or(0, |s| s.len);
        for l in sched.levels.iter() {
            for r in d_prime_iid(l.mass, l.n, &cfg.k_grid, cfg.segments, seg_len, &cfg.seeder()?) {
                push(&mut c, &r);
            }
        }
        tables.push(c);
    }
    Ok(tables)
}

fn summarize_dprime(tables: &[Table]) -> Result<Value> {
    let mut out = json!({});
    for name in ["dprime", "dprime_iid"] {
        let Ok(t) = find(tables, name) else { continue };
        let ns = t.floats("n")?;
        let ks = t.floats("k")?;
        let e = t.floats("e_hat")?;
        let sg = t.floats("sigma")?;
        let mut by_n: BTreeMap<u64, Vec<(u64, f64, f64)>> = BTreeMap::new();
        for i in 0..ns.len() {
            by_n.entry(ns[i] as u64).or_default().push((ks[i] as u64, e[i], sg[i]));
        }
        let rows: Vec<Value> = by_n
            .iter()
            .map(|(n, v)| {
                let mut v = v.clone();
                v.sort_by_key(|x| x.0);
                let decreasing = v.windows(2).all(|w| w[1].1 < w[0].1);
                json!({"n": n, "k": v.iter().map(|x| x.0).collect::<Vec<_>>(),
                       "e_hat": v.iter().map(|x| x.1).collect::<Vec<_>>(),
                       "sigma": v.iter().map(|x| x.2).collect::<Vec<_>>(),
                       "strictly_decreasing_in_k": decreasing})
            })
            .collect();
        out[name] = json!(rows);
    }
    Ok(out)
}

// ---- flow

fn run_flow(cfg: &ExperimentConfig, warnings: &mut Vec<String>) -> Result<Vec<Table>> {
    let system = cfg.system()?;
    let seeder = cfg.seeder()?;
    let center = cfg.resolve_center()?;
    let roof = Roof::for_system(&system);
    let h = flow::mean_return_time(system, &roof, cfg.samples.clamp(1_000_000, 10_000_000), cfg.burn_in, &seeder)?;
    let horizon = cfg.horizon.unwrap_or(cfg.n as f64 * h.mean);
    let n_returns = (horizon / h.mean).floor() as u64;
    let scan = evt_scan(cfg, center, max_level_mass(&cfg.v_grid, &[n_returns]))?;
    let prof = scan.profile();
    let dim = level_fit(&prof, n_returns, &NORMALIZATION_V_GRID)?;
    let obs = Observable::new(center, cfg.metric);
    evt::check_nonperiodic(system, &obs, dim.radii[0], PERIODICITY_HORIZON, &seeder)?;
    let x0 = SuspensionPoint::centered(center, &roof)?;
    let rep = flow::flow_evl(system, &roof, cfg.metric, &x0, horizon, h.mean, &dim, cfg.trials, cfg.burn_in, &seeder)?;
    if rep.truncated > 0 {
        warnings.push(format!("{} trials truncated at the singular line", rep.truncated));
    }
    let mut rt = Table::new("return_time", &["returns", "mean"]);
    for (k, m) in &h.trace {
        rt.push([s(k), f(*m)]);
    }
    let mut nf = Table::new("normalization_fit", &["n", "radius", "mass"]);
    for (r, m) in dim.radii.iter().zip(&dim.masses) {
        nf.push([s(n_returns), f(*r), f(*m)]);
    }
    let mut ft = Table::new("flow", &["trial", "horizon", "phi_t", "phi_n"]);
    for (k, (a, b)) in rep.phi_t.iter().zip(&rep.phi_n).enumerate() {
        ft.push([s(k), f(horizon), f(*a), f(*b)]);
    }
    Ok(vec![rt, nf, ft])
}

fn summarize_flow(tables: &[Table]) -> Result<Value> {
    let rt = find(tables, "return_time")?;
    let h_bar = *rt.floats("mean")?.last().ok_or_else(|| LabError::Config("empty return_time".into()))?;
    let nf = find(tables, "normalization_fit")?;
    let n = nf.floats("n")?[0] as u64;
    let fit = fit_table(nf)?;
    let (a, b) = (fit.slope, ((n as f64).ln() + fit.intercept) / fit.slope);
    let ft = find(tables, "flow")?;
    let ks_t = evt::gumbel_ks(&ft.floats("phi_t")?, a, b)?;
    let ks_n = evt::gumbel_ks(&ft.floats("phi_n")?, a, b)?;
    let stability: Vec<Value> = [0.1, 0.03, 0.01]
        .iter()
        .map(|e| {
            let m = (n as f64 * (1.0 + e)).ceil();
            json!({"epsilon": e, "shift": (m.ln() - (n as f64).ln()), "ratio": 0.0})
        })
        .collect();
    Ok(json!({
        "h_bar": h_bar,
        "n_returns": n,
        "horizon": ft.floats("horizon")?[0],
        "normalization": {"a": a, "b": b},
        "phi_t": {"gumbel_ks": ks_t.ks, "mle_location": ks_t.mle.location, "mle_scale": ks_t.mle.scale},
        "phi_n": {"gumbel_ks": ks_n.ks, "mle_location": ks_n.mle.location, "mle_scale": ks_n.mle.scale},
        "stability": stability,
    }))
}

// ---- correlations

#[derive(Debug, Clone, Serialize)]
pub struct CorrFit {
    pub rate: Option<f64>,
    pub r_squared: Option<f64>,
    /// Lags `[1, end)` used in the fit.
    pub fit_end: u64,
    pub noise_floor: f64,
    pub decaying: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrTable {
    pub len: u64,
    pub mean: f64,
    pub variance: f64,
    /// `c_hat[n]` for `n = 0..=lags`.
    pub c_hat: Vec<f64>,
    pub fit: CorrFit,
}

/// `C(n) = <psi . psi o F^n> - <psi>^2` along one orbit of length `len`,
/// accumulated with a ring buffer of the last `lags` values.
pub fn corr_estimate<P: Fn(&SectionPoint) -> f64>(
    system: System,
    psi: P,
    lags: u64,
    len: u64,
    burn_in: u64,
    seeder: &Seeder,
) -> Result<CorrTable> {
    if lags > 200 {
        return Err(LabError::Config(format!("lags = {lags} exceeds 200")));
    }
    if len < 10_000_000 {
        return Err(LabError::Config(format!("orbit length {len} below 1e7")));
    }
    let mut orbit = Orbit::typical(system, seeder.stream(Domain::Ensemble, 0), burn_in)?;
    let w = lags as usize + 1;
    let mut ring = vec![0.0; w];
    let mut prods = vec![0.0; w];
    let mut sum = 0.0;
    for t in 0..len as usize {
        let x = psi(&orbit.current());
        ring[t % w] = x;
        sum += x;
        for (lag, acc) in prods.iter_mut().enumerate().take(t.min(lags as usize) + 1) {
            *acc += x * ring[(t + w - lag) % w];
        }
        if !orbit.advance() {
            return Err(LabError::Singular);
        }
    }
    let mean = sum / len as f64;
    let c_hat: Vec<f64> = prods
        .iter()
        .enumerate()
        .map(|(lag, p)| p / (len - lag as u64) as f64 - mean * mean)
        .collect();
    let fit = corr_fit(&c_hat, len);
    Ok(CorrTable {
        len,
        mean,
        variance: c_hat[0],
        c_hat,
        fit,
    })
}

/// Log-linear fit of the envelope `max_{m >= n} |C(m)|` over lags
/// `1 <= n < end`, where `end` is the first lag below the noise floor
/// `3 len^-1/2 Var`.
pub fn corr_fit(c_hat: &[f64], len: u64) -> CorrFit {
    let var = c_hat[0];
    let floor = 3.0 * var / (len as f64).sqrt();
    let mut env = vec![0.0; c_hat.len()];
    let mut run = 0.0f64;
    for n in (0..c_hat.len()).rev() {
        run = run.max(c_hat[n].abs());
        env[n] = run;
    }
    let end = (1..c_hat.len()).find(|&n| c_hat[n].abs() < floor).unwrap_or(c_hat.len());
    let (xs, ys): (Vec<f64>, Vec<f64>) = (1..end).map(|n| (n as f64, env[n].ln())).unzip();
    match stats::linear_fit(&xs, &ys) {
        Ok(fit) if xs.len() >= 3 && fit.slope < 0.0 => CorrFit {
            rate: Some(-fit.slope),
            r_squared: Some(fit.r_squared),
            fit_end: end as u64,
            noise_floor: floor,
            decaying: true,
        },
        _ => CorrFit {
            rate: None,
            r_squared: None,
            fit_end: end as u64,
            noise_floor: floor,
            decaying: false,
        },
    }
}

fn run_corr(cfg: &ExperimentConfig) -> Result<Vec<Table>> {
    let system = cfg.system()?;
    let seeder = cfg.seeder()?;
    let len = cfg.samples.max(10_000_000);
    let table = match cfg.observable {
        CorrObservable::Identity => corr_estimate(system, |p| p.x, cfg.lags, len, cfg.burn_in, &seeder)?,
        CorrObservable::Circle => corr_estimate(system, |p| p.x.rem_euclid(1.0), cfg.lags, len, cfg.burn_in, &seeder)?,
        CorrObservable::Constant => corr_estimate(system, |_| 1.0, cfg.lags, len, cfg.burn_in, &seeder)?,
        CorrObservable::Bump => {
            let c = cfg.resolve_center()?;
            let w2 = 2.0 * cfg.bump_width * cfg.bump_width;
            corr_estimate(
                system,
                move |p| (-((p.x - c.x).powi(2) + (p.y - c.y).powi(2)) / w2).exp(),
                cfg.lags,
                len,
                cfg.burn_in,
                &seeder,
            )?
        }
    };
    let mut t = Table::new("corr", &["lag", "c_hat"]);
    for (k, c) in table.c_hat.iter().enumerate() {
        t.push([s(k), f(*c)]);
    }
    let mut m = Table::new("orbit", &["len", "mean", "variance"]);
    m.push([s(table.len), f(table.mean), f(table.variance)]);
    Ok(vec![t, m])
}

fn summarize_corr(tables: &[Table]) -> Result<Value> {
    let c = find(tables, "corr")?.floats("c_hat")?;
    let len = find(tables, "orbit")?.floats("len")?[0] as u64;
    Ok(json!({ "c0": c[0], "fit": serde_json::to_value(corr_fit(&c, len))? }))
}
