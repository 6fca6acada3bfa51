//! Experiment runner behind the `kinetic` binary: executes one experiment
//! kind on a loaded configuration, persists result tables with a JSON
//! metadata sidecar, and summarizes result directories.

use crate::combinatorics::verify_cluster_expansion;
use crate::error::{Error, Result};
use crate::hierarchy::{
    dual_bbgky_solution, evolve_full, mean_value_full, mean_value_reduced, reduce_observable_all,
    FullEnsemble, ObservableSeq,
};
use crate::kinetic::{effective_profile, Kinetic, KineticOptions};
use crate::model::{build_initial_state, ConfigDocument, ExperimentConfig};
use crate::montecarlo::{trajectory_rng, Estimate, Simulator};
use crate::operators::{Direction, Dynamics};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const CLUSTER_TOL: f64 = 1e-9;
pub const HIERARCHY_TOL: f64 = 1e-10;
pub const DUALITY_TOL: f64 = 1e-6;
pub const MASS_DRIFT_TOL: f64 = 1e-9;
pub const ENDPOINT_TOL: f64 = 1e-5;
pub const Z_TOL: f64 = 3.0;
pub const SWEEP_EPS: [f64; 3] = [0.2, 0.1, 0.05];
/// Residuals at or below this level are treated as round-off.
pub const EXACT_FLOOR: f64 = 1e-12;

/// Trajectories used when the configuration leaves `run.mc_trajectories` at 0.
pub const DEFAULT_TRAJECTORIES: usize = 20_000;
const HOLDING_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    DualitySweep,
    FpTrajectory,
    ClusterVerify,
    McVsExact,
    EpsConvergence,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        Self::DualitySweep,
        Self::FpTrajectory,
        Self::ClusterVerify,
        Self::McVsExact,
        Self::EpsConvergence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::DualitySweep => "duality-sweep",
            Self::FpTrajectory => "fp-trajectory",
            Self::ClusterVerify => "cluster-verify",
            Self::McVsExact => "mc-vs-exact",
            Self::EpsConvergence => "eps-convergence",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown experiment kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::Parse(format!("unknown output format `{other}`"))),
        }
    }
}

/// Command-line overrides of configuration values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub eps: Option<f64>,
    pub order: Option<usize>,
    pub t_max: Option<f64>,
    pub dt: Option<f64>,
    pub out: Option<PathBuf>,
    pub format: Option<OutputFormat>,
}

impl Overrides {
    /// Applies the overrides to the document, so that the config hash covers them.
    pub fn apply(&self, doc: &mut ConfigDocument) {
        if let Some(v) = self.seed {
            doc.run.seed = v;
        }
        if let Some(v) = self.eps {
            doc.model.eps = v;
        }
        if let Some(v) = self.order {
            doc.run.series_order = v;
        }
        if let Some(v) = self.t_max {
            doc.run.t_max = v;
        }
        if let Some(v) = self.dt {
            doc.run.dt = v;
        }
        if let Some(v) = &self.out {
            doc.output.dir = v.to_string_lossy().into_owned();
        }
        if let Some(v) = self.format {
            doc.output.format = match v {
                OutputFormat::Csv => "csv".into(),
                OutputFormat::Json => "json".into(),
            };
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    /// Passes when `value <= tolerance`.
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }

    /// Passes when `value >= tolerance`.
    pub fn at_least(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            pass: value >= tolerance,
        }
    }
}

/// Rows of named columns; cells are JSON numbers or strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl ResultTable {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).map_err(csv_error)?;
        for row in &self.rows {
            w.write_record(row.iter().map(cell_text)).map_err(csv_error)?;
        }
        w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let records: Vec<serde_json::Map<String, Value>> = self
            .rows
            .iter()
            .map(|r| self.columns.iter().cloned().zip(r.iter().cloned()).collect())
            .collect();
        serde_json::to_vec_pretty(&records).map_err(|e| Error::Io(std::io::Error::other(e)))
    }

    pub fn from_csv(name: &str, bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let columns: Vec<String> = r.headers().map_err(csv_error)?.iter().map(String::from).collect();
        let mut table = Self {
            name: name.into(),
            columns,
            rows: Vec::new(),
        };
        for rec in r.records() {
            let rec = rec.map_err(csv_error)?;
            table.rows.push(rec.iter().map(parse_cell).collect());
        }
        Ok(table)
    }

    pub fn from_json(name: &str, bytes: &[u8]) -> Result<Self> {
        let records: Vec<serde_json::Map<String, Value>> =
            serde_json::from_slice(bytes).map_err(|e| Error::Parse(format!("{name}: {e}")))?;
        let columns: Vec<String> = records.first().map(|r| r.keys().cloned().collect()).unwrap_or_default();
        let rows = records
            .iter()
            .map(|r| columns.iter().map(|c| r.get(c).cloned().unwrap_or(Value::Null)).collect())
            .collect();
        Ok(Self {
            name: name.into(),
            columns,
            rows,
        })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

fn cell_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn parse_cell(s: &str) -> Value {
    if let Ok(i) = s.parse::<i64>() {
        return Value::from(i);
    }
    match s.parse::<f64>() {
        Ok(x) if x.is_finite() => Value::from(x),
        _ => Value::from(s),
    }
}

fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or_else(|| Value::from(x.to_string()), Value::Number)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// JSON sidecar written next to the result tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub started_at: String,
    pub finished_at: String,
    pub format: OutputFormat,
    pub tables: Vec<String>,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub tables: Vec<ResultTable>,
    pub metadata: Metadata,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.metadata.checks.iter().all(|c| c.pass)
    }
}

/// Loads `path`, applies `overrides` and returns the built configuration.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| with_path(e, path))?;
    let mut doc = ConfigDocument::parse(&text)?;
    overrides.apply(&mut doc);
    doc.build()
}

/// Runs one experiment in memory.
pub fn run_experiment(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<RunOutcome> {
    let started_at = now();
    let (tables, checks) = match kind {
        ExperimentKind::ClusterVerify => cluster_verify(cfg)?,
        ExperimentKind::DualitySweep => duality_sweep(cfg)?,
        ExperimentKind::EpsConvergence => eps_convergence(cfg)?,
        ExperimentKind::FpTrajectory => fp_trajectory(cfg)?,
        ExperimentKind::McVsExact => mc_vs_exact(cfg)?,
    };
    let format = OutputFormat::from_str(&cfg.output.format)?;
    let metadata = Metadata {
        kind,
        config_hash: cfg.document.canonical_hash(),
        seed: cfg.run.seed,
        version: env!("CARGO_PKG_VERSION").into(),
        started_at,
        finished_at: now(),
        format,
        tables: tables.iter().map(|t| table_file(&t.name, format)).collect(),
        checks,
    };
    Ok(RunOutcome { tables, metadata })
}

fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn table_file(name: &str, format: OutputFormat) -> String {
    match format {
        OutputFormat::Csv => format!("{name}.csv"),
        OutputFormat::Json => format!("{name}.json"),
    }
}

/// Name of the metadata sidecar of an experiment kind.
pub fn sidecar_file(kind: ExperimentKind) -> String {
    format!("{}.meta.json", kind.name())
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Writes all tables and the sidecar into `dir`; returns the written paths.
pub fn write_outcome(outcome: &RunOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (table, file) in outcome.tables.iter().zip(&outcome.metadata.tables) {
        let bytes = match outcome.metadata.format {
            OutputFormat::Csv => table.to_csv()?,
            OutputFormat::Json => table.to_json()?,
        };
        let path = dir.join(file);
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    let path = dir.join(sidecar_file(outcome.metadata.kind));
    let meta = serde_json::to_vec_pretty(&outcome.metadata).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    write_atomic(&path, &meta)?;
    written.push(path);
    Ok(written)
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

type Tables = (Vec<ResultTable>, Vec<Check>);

/// Observables probed by the mean-value experiments, as full sequences.
pub fn probe_observables(n_states: usize, n_max: usize) -> Vec<(&'static str, ObservableSeq)> {
    let denom = (n_states.max(2) - 1) as f64;
    let o10: Vec<f64> = (0..n_states).map(|e| 1.0 - 2.0 * e as f64 / denom).collect();
    let o01: Vec<f64> = (0..n_states).map(|e| 0.3 + 0.7 * (e % 2) as f64).collect();
    vec![
        ("tracer_indicator_0", ObservableSeq::tracer_indicator(0, n_states, n_max)),
        ("additive_mixed", ObservableSeq::additive(&o10, &o01, n_max)),
        ("env_count", ObservableSeq::additive(&vec![0.0; n_states], &vec![1.0; n_states], n_max)),
    ]
}

/// Kinetic solver for the configuration with the interaction strength set to `eps`.
pub fn kinetic_for(cfg: &ExperimentConfig, eps: f64) -> Result<Kinetic> {
    let model = cfg.model.with_eps(eps);
    let init = build_initial_state(&cfg.initial, &model, cfg.activity)?;
    let profile = effective_profile(&init, model.weights())?;
    Kinetic::new(Dynamics::new(model), profile, KineticOptions::default())
}

/// Output times `t_max * k / 8`, `k = 1..=8`.
fn sweep_times(t_max: f64) -> Vec<f64> {
    (1..=8).map(|k| t_max * k as f64 / 8.0).collect()
}

fn cluster_verify(cfg: &ExperimentConfig) -> Result<Tables> {
    let d = Dynamics::new(cfg.model.clone());
    let mut table = ResultTable::new("cluster_verify", &["t", "s", "n", "direction", "residual"]);
    let mut worst = 0.0f64;
    for t in [0.1, 0.5, 1.0] {
        for s in 0..=cfg.model.n_max.min(3) {
            for n in 0..=s {
                for (dir, name) in [(Direction::Forward, "forward"), (Direction::Dual, "dual")] {
                    let r = verify_cluster_expansion(&d, dir, t, s, n)?;
                    worst = worst.max(r);
                    table.push(vec![num(t), s.into(), n.into(), name.into(), num(r)]);
                }
            }
        }
    }
    Ok((vec![table], vec![Check::at_most("cluster_expansion_max_residual", worst, CLUSTER_TOL)]))
}

fn duality_rows(kin: &Kinetic, t: f64, order: usize, n_max: usize, table: &mut ResultTable) -> Result<f64> {
    let n = kin.dynamics().n_states();
    let mut worst = 0.0f64;
    for (id, o) in probe_observables(n, n_max) {
        let b0 = reduce_observable_all(&o)?;
        let r = kin.duality_check(&b0, t, order)?;
        worst = worst.max(r.abs_residual);
        table.push(vec![
            num(t),
            id.into(),
            num(r.lhs),
            num(r.rhs),
            num(r.abs_residual),
            num(r.rel_residual),
            order.into(),
            num(r.eps),
        ]);
    }
    Ok(worst)
}

const DUALITY_COLUMNS: [&str; 8] = ["t", "observable_id", "lhs", "rhs", "abs_residual", "rel_residual", "K", "eps"];

fn duality_sweep(cfg: &ExperimentConfig) -> Result<Tables> {
    let kin = kinetic_for(cfg, cfg.model.eps)?;
    let mut table = ResultTable::new("duality", &DUALITY_COLUMNS);
    let mut worst = 0.0f64;
    for t in sweep_times(cfg.run.t_max) {
        worst = worst.max(duality_rows(&kin, t, cfg.run.series_order, cfg.model.n_max, &mut table)?);
    }
    Ok((vec![table], vec![Check::at_most("duality_max_abs_residual", worst, DUALITY_TOL)]))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn eps_convergence(cfg: &ExperimentConfig) -> Result<Tables> {
    let order = cfg.run.series_order;
    let t = cfg.run.t_max.min(1.0);
    let cells = SWEEP_EPS
        .par_iter()
        .map(|&eps| {
            let kin = kinetic_for(cfg, eps)?;
            let mut table = ResultTable::new("eps_convergence", &DUALITY_COLUMNS);
            duality_rows(&kin, t, order, cfg.model.n_max, &mut table)?;
            Ok(table.rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = ResultTable::new("eps_convergence", &DUALITY_COLUMNS);
    cells.into_iter().flatten().for_each(|r| table.push(r));
    let mut slopes = ResultTable::new("eps_slopes", &["observable_id", "K", "slope"]);
    let mut checks = Vec::new();
    for (id, _) in probe_observables(cfg.model.n_states(), cfg.model.n_max) {
        let residuals: Vec<f64> = table
            .rows
            .iter()
            .filter(|r| r[1] == id)
            .map(|r| r[4].as_f64().unwrap_or(f64::NAN))
            .collect();
        let worst = residuals.iter().copied().fold(0.0, f64::max);
        if worst <= EXACT_FLOOR {
            // Exact at every eps: a slope through round-off means nothing.
            checks.push(Check::at_most(format!("eps_residual_{id}"), worst, DUALITY_TOL));
            continue;
        }
        let slope = loglog_slope(&SWEEP_EPS, &residuals);
        slopes.push(vec![id.into(), order.into(), num(slope)]);
        checks.push(Check::at_least(format!("eps_slope_{id}"), slope, order as f64 + 1.5));
    }
    Ok((vec![table, slopes], checks))
}

fn fp_trajectory(cfg: &ExperimentConfig) -> Result<Tables> {
    let kin = kinetic_for(cfg, cfg.model.eps)?;
    let order = cfg.run.series_order;
    let f0 = kin.profile().tracer0.clone();
    let traj = kin.integrate_fp(&f0, cfg.run.t_max, cfg.run.dt, order)?;
    let space = &cfg.model.space;
    let mut table = ResultTable::new("fp_trajectory", &["t", "species", "micro_state", "F_value", "mass_drift"]);
    let mut drift = 0.0f64;
    let mut floor = 0.0f64;
    for f in &traj {
        drift = drift.max(f.mass_drift.abs());
        for (e, v) in f.values.iter().enumerate() {
            floor = floor.min(*v);
            let s = space.entity(e);
            table.push(vec![num(f.t), s.species.into(), s.micro.into(), num(*v), num(f.mass_drift)]);
        }
    }
    let end = traj.last().expect("trajectory includes t = 0");
    let series = kin.reduced_distribution(end.t, order)?;
    let gap = end
        .values
        .iter()
        .zip(&series.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok((
        vec![table],
        vec![
            Check::at_most("fp_max_mass_drift", drift, MASS_DRIFT_TOL),
            Check::at_most("fp_negativity", (-floor).max(0.0), MASS_DRIFT_TOL),
            Check::at_most("fp_endpoint_vs_series", gap, ENDPOINT_TOL),
        ],
    ))
}

fn mc_vs_exact(cfg: &ExperimentConfig) -> Result<Tables> {
    let model = &cfg.model;
    let w = model.weights();
    let t = cfg.run.t_max.min(1.0);
    let n_traj = if cfg.run.mc_trajectories == 0 {
        DEFAULT_TRAJECTORIES
    } else {
        cfg.run.mc_trajectories
    };
    let d = Dynamics::new(model.clone());
    let init = build_initial_state(&cfg.initial, model, cfg.activity)?;
    let evolved = FullEnsemble::new(evolve_full(&d, &init.full, t, Direction::Dual)?, w)?;
    let sim = Simulator::new(model.clone(), &cfg.initial, cfg.activity)?;

    let mut hier = ResultTable::new("hierarchy", &["t", "observable_id", "mean_full", "mean_reduced", "abs_residual"]);
    let mut mc = ResultTable::new(
        "montecarlo",
        &["t", "observable_id", "n_traj", "mc_mean", "mc_stderr", "exact", "z_score"],
    );
    let mut checks = Vec::new();
    let mut worst_hier = 0.0f64;
    for (id, o) in probe_observables(model.n_states(), model.n_max) {
        let full = mean_value_full(&o, &evolved, w)?;
        let b0 = reduce_observable_all(&o)?;
        let bt = ObservableSeq::general(
            (0..=model.n_max)
                .map(|s| dual_bbgky_solution(&d, &b0, t, s))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let reduced = mean_value_reduced(&bt, &init.reduced, w)?;
        worst_hier = worst_hier.max((full - reduced).abs());
        hier.push(vec![num(t), id.into(), num(full), num(reduced), num((full - reduced).abs())]);

        let est = sim.estimate_mean(&o, t, n_traj, cfg.run.seed)?;
        let z = est.z_score(full);
        mc.push(vec![
            num(t),
            id.into(),
            n_traj.into(),
            num(est.mean),
            num(est.stderr),
            num(full),
            num(z),
        ]);
        checks.push(Check::at_most(format!("mc_z_{id}"), z, Z_TOL));
    }
    checks.insert(0, Check::at_most("hierarchy_max_abs_residual", worst_hier, HIERARCHY_TOL));
    let holding = holding_time(cfg)?;
    checks.push(Check::at_most("mc_holding_time_z", holding.z_score(1.0), Z_TOL));
    Ok((vec![hier, mc], checks))
}

/// First dwell of a lone tracer drawn from `F^0_{1+0}`, scaled by its exit
/// rate; unit-mean exponential under the exact-jump law.
pub fn holding_time(cfg: &ExperimentConfig) -> Result<Estimate> {
    let model = cfg.model.with_eps(0.0);
    let w = model.weights();
    let probs: Vec<f64> = cfg.initial.tracer0.iter().zip(w).map(|(f, w)| f * w).collect();
    let pick = rand::distr::weighted::WeightedIndex::new(&probs).map_err(|e| Error::Invalid(e.to_string()))?;
    let seed = cfg.run.seed;
    let samples: Vec<f64> = (0..HOLDING_SAMPLES as u64)
        .into_par_iter()
        .map(|id| {
            use rand::distr::Distribution;
            let mut rng = trajectory_rng(seed ^ 0x05ee_d0fd_3e11, id);
            let tracer = pick.sample(&mut rng);
            let mut cfg = crate::montecarlo::Configuration { tracer, env: vec![], t: 0.0 };
            let rate = model.rate_tracer.at(&[tracer]);
            crate::montecarlo::gillespie_step(&mut cfg, &model, &mut rng).map_or(f64::NAN, |(dwell, _, _)| dwell * rate)
        })
        .collect();
    if samples.iter().any(|v| v.is_nan()) {
        return Err(Error::Invalid("tracer has a zero exit rate".into()));
    }
    Estimate::from_samples(&samples)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Report {
    pub text: String,
    /// Columns `experiment, table, row, column, value`.
    pub long: ResultTable,
    pub all_pass: bool,
}

/// Reads every metadata sidecar in `dir` and the tables it lists.
pub fn load_results(dir: &Path) -> Result<Vec<(Metadata, Vec<ResultTable>)>> {
    let mut sidecars: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| with_path(e, dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".meta.json"))
        .collect();
    sidecars.sort();
    if sidecars.is_empty() {
        return Err(Error::Invalid(format!("no results in {}", dir.display())));
    }
    let mut out = Vec::new();
    for path in sidecars {
        let meta: Metadata = serde_json::from_slice(&fs::read(&path).map_err(|e| with_path(e, &path))?)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let mut tables = Vec::new();
        for file in &meta.tables {
            let table_path = dir.join(file);
            let bytes = fs::read(&table_path).map_err(|e| with_path(e, &table_path))?;
            let name = file.rsplit_once('.').map_or(file.as_str(), |(a, _)| a);
            tables.push(match meta.format {
                OutputFormat::Csv => ResultTable::from_csv(name, &bytes)?,
                OutputFormat::Json => ResultTable::from_json(name, &bytes)?,
            });
        }
        out.push((meta, tables));
    }
    Ok(out)
}

pub fn report(dir: &Path) -> Result<Report> {
    let results = load_results(dir)?;
    let mut text = String::new();
    let mut long = ResultTable::new("long", &["experiment", "table", "row", "column", "value"]);
    let mut all_pass = true;
    let mut checks: Vec<(String, Check)> = Vec::new();
    for (meta, tables) in &results {
        let kind = meta.kind.name();
        writeln!(text, "== {kind} (seed {}, config {})", meta.seed, &meta.config_hash[..12.min(meta.config_hash.len())]).ok();
        for c in &meta.checks {
            all_pass &= c.pass;
            let mark = if c.pass { "PASS" } else { "FAIL" };
            writeln!(text, "  {mark} {}: {:.3e} (tolerance {:.1e})", c.name, c.value, c.tolerance).ok();
            checks.push((kind.to_string(), c.clone()));
        }
        for table in tables {
            for (i, row) in table.rows.iter().enumerate() {
                for (col, v) in table.columns.iter().zip(row) {
                    long.push(vec![kind.into(), table.name.clone().into(), i.into(), col.clone().into(), v.clone()]);
                }
            }
            match table.name.as_str() {
                "duality" => per_t_summary(table, &mut text),
                "eps_convergence" => eps_summary(table, &mut text),
                _ => {}
            }
        }
    }
    // Worst residuals: upper-bound checks ranked by value relative to tolerance.
    let mut ranked: Vec<&(String, Check)> = checks.iter().filter(|(_, c)| c.name != "fp_negativity" && !c.name.starts_with("eps_slope")).collect();
    ranked.sort_by(|a, b| {
        let ra = a.1.value / a.1.tolerance;
        let rb = b.1.value / b.1.tolerance;
        rb.total_cmp(&ra)
    });
    writeln!(text, "== worst residuals").ok();
    for (kind, c) in ranked.iter().take(5) {
        writeln!(text, "  {kind}/{}: {:.3e} ({:.2}x tolerance)", c.name, c.value, c.value / c.tolerance).ok();
    }
    writeln!(text, "overall: {}", if all_pass { "PASS" } else { "FAIL" }).ok();
    Ok(Report { text, long, all_pass })
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

fn per_t_summary(table: &ResultTable, text: &mut String) {
    let (Some(ct), Some(cr)) = (table.column("t"), table.column("abs_residual")) else {
        return;
    };
    let mut per_t: Vec<(f64, f64)> = Vec::new();
    for row in &table.rows {
        let (t, r) = (f(&row[ct]), f(&row[cr]));
        match per_t.iter_mut().find(|(tt, _)| *tt == t) {
            Some(e) => e.1 = e.1.max(r),
            None => per_t.push((t, r)),
        }
    }
    writeln!(text, "  duality residual by t:").ok();
    writeln!(text, "    {:>8}  {:>12}", "t", "max |res|").ok();
    for (t, r) in per_t {
        writeln!(text, "    {t:>8.4}  {r:>12.3e}").ok();
    }
}

fn eps_summary(table: &ResultTable, text: &mut String) {
    let (Some(ce), Some(ck), Some(co), Some(cr)) = (
        table.column("eps"),
        table.column("K"),
        table.column("observable_id"),
        table.column("abs_residual"),
    ) else {
        return;
    };
    let mut ids: Vec<String> = Vec::new();
    for row in &table.rows {
        let id = cell_text(&row[co]);
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    writeln!(text, "  eps convergence:").ok();
    writeln!(text, "    {:<20} {:>6} {:>3} {:>12}", "observable", "eps", "K", "residual").ok();
    for id in ids {
        let rows: Vec<&Vec<Value>> = table.rows.iter().filter(|r| cell_text(&r[co]) == id).collect();
        for r in &rows {
            writeln!(text, "    {:<20} {:>6} {:>3} {:>12.3e}", id, f(&r[ce]), cell_text(&r[ck]), f(&r[cr])).ok();
        }
        let eps: Vec<f64> = rows.iter().map(|r| f(&r[ce])).collect();
        let res: Vec<f64> = rows.iter().map(|r| f(&r[cr])).collect();
        writeln!(text, "    {:<20} fitted slope {:.3}", id, loglog_slope(&eps, &res)).ok();
    }
}
