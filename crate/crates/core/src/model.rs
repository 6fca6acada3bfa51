//! Finite microscopic state space, interaction rates and kernels, initial
//! correlation data, and the experiment configuration file.

use crate::error::{Error, Result};
use crate::sector::{SectorFunction, SequenceKind, SequenceState};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Tolerance for the kernel normalization and tracer mass checks.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Discretized micro-state set with positive quadrature weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroGrid {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl MicroGrid {
    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::validation("grid", "model.grid", "at least one point required"));
        }
        if points.len() != weights.len() {
            return Err(Error::validation(
                "grid",
                "model.grid.weights",
                format!("{} weights for {} points", weights.len(), points.len()),
            ));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::validation(
                "grid weight positivity",
                "model.grid.weights",
                format!("weight {w} is not positive"),
            ));
        }
        Ok(Self { points, weights })
    }

    /// `n` points labelled `0..n` with unit weights.
    pub fn unit(n: usize) -> Self {
        Self {
            points: (0..n).map(|i| i as f64).collect(),
            weights: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One entity's `(species, micro-state)` pair, flattened as
/// `species * |U| + micro`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityState {
    pub species: usize,
    pub micro: usize,
}

/// `J x U` with per-entity weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    species_count: usize,
    grid: MicroGrid,
    weights: Vec<f64>,
}

impl StateSpace {
    pub fn new(species_count: usize, grid: MicroGrid) -> Result<Self> {
        if species_count == 0 {
            return Err(Error::validation("species count", "model.m", "M must be >= 1"));
        }
        let weights = (0..species_count)
            .flat_map(|_| grid.weights.iter().copied())
            .collect();
        Ok(Self {
            species_count,
            grid,
            weights,
        })
    }

    pub fn n_states(&self) -> usize {
        self.species_count * self.grid.len()
    }

    pub fn species_count(&self) -> usize {
        self.species_count
    }

    pub fn grid(&self) -> &MicroGrid {
        &self.grid
    }

    /// Weight of each flattened entity state.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn entity(&self, e: usize) -> EntityState {
        EntityState {
            species: e / self.grid.len(),
            micro: e % self.grid.len(),
        }
    }

    pub fn flat(&self, s: EntityState) -> Result<usize> {
        if s.species >= self.species_count || s.micro >= self.grid.len() {
            return Err(Error::Invalid(format!("entity state {s:?} out of range")));
        }
        Ok(s.species * self.grid.len() + s.micro)
    }
}

/// Nonnegative rate array over `arity` entity arguments (row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    arity: usize,
    n_states: usize,
    data: Vec<f64>,
}

impl RateTable {
    pub fn new(arity: usize, n_states: usize, data: Vec<f64>) -> Result<Self> {
        let expected = n_states.pow(arity as u32);
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "rate over {arity} arguments needs {expected} entries, got {}",
                data.len()
            )));
        }
        Ok(Self {
            arity,
            n_states,
            data,
        })
    }

    pub fn constant(arity: usize, n_states: usize, value: f64) -> Self {
        Self {
            arity,
            n_states,
            data: vec![value; n_states.pow(arity as u32)],
        }
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, args: &[usize]) -> f64 {
        self.data[args.iter().fold(0, |acc, &a| acc * self.n_states + a)]
    }

    pub fn check(&self, key: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::validation(
                    "rate positivity",
                    key,
                    format!("entry {i} = {v} is negative or non-finite"),
                ));
            }
        }
        Ok(())
    }
}

/// Transition kernel `A(v; args)`, stored with the target `v` fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    arity: usize,
    n_states: usize,
    data: Vec<f64>,
}

/// Outcome of a kernel normalization check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelReport {
    pub pass: bool,
    pub max_deviation: f64,
}

impl Kernel {
    pub fn new(arity: usize, n_states: usize, data: Vec<f64>) -> Result<Self> {
        let expected = n_states.pow(arity as u32 + 1);
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "kernel over {arity} arguments needs {expected} entries, got {}",
                data.len()
            )));
        }
        Ok(Self {
            arity,
            n_states,
            data,
        })
    }

    /// `A(v; .) = 1 / sum_v w(v)`.
    pub fn uniform(arity: usize, weights: &[f64]) -> Self {
        let n = weights.len();
        let total: f64 = weights.iter().sum();
        Self {
            arity,
            n_states: n,
            data: vec![1.0 / total; n.pow(arity as u32 + 1)],
        }
    }

    /// Unit mass on the last argument's state: the jumping entity copies its
    /// partner (or stays put when there is no partner).
    pub fn copy(arity: usize, weights: &[f64]) -> Self {
        let n = weights.len();
        let rows = n.pow(arity as u32);
        let mut data = vec![0.0; rows * n];
        for r in 0..rows {
            let last = r % n;
            data[r * n + last] = 1.0 / weights[last];
        }
        Self {
            arity,
            n_states: n,
            data,
        }
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row of `A(.; args)` over targets.
    #[inline]
    pub fn row(&self, args: &[usize]) -> &[f64] {
        let r = args.iter().fold(0, |acc, &a| acc * self.n_states + a);
        &self.data[r * self.n_states..(r + 1) * self.n_states]
    }

    #[inline]
    pub fn at(&self, v: usize, args: &[usize]) -> f64 {
        self.row(args)[v]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n_states)
    }
}

/// Checks `|sum_v w(v) A(v; args) - 1| <= 1e-12` for every argument tuple.
pub fn validate_kernel(kernel: &Kernel, grid_weights: &[f64]) -> Result<KernelReport> {
    if kernel.n_states() != grid_weights.len() {
        return Err(Error::Shape(format!(
            "kernel over {} states, weights for {}",
            kernel.n_states(),
            grid_weights.len()
        )));
    }
    let mut worst: f64 = 0.0;
    let mut negative = false;
    for row in kernel.rows() {
        negative |= row.iter().any(|v| *v < 0.0 || !v.is_finite());
        let mass: f64 = row.iter().zip(grid_weights).map(|(a, w)| a * w).sum();
        worst = worst.max((mass - 1.0).abs());
    }
    Ok(KernelReport {
        pass: !negative && worst <= NORMALIZATION_TOL,
        max_deviation: worst,
    })
}

/// Rates, kernels and coupling of the tracer-plus-environment jump process
/// (two-body interactions).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub space: StateSpace,
    pub eps: f64,
    pub rate_tracer: RateTable,
    pub rate_env1: RateTable,
    pub rate_env2: RateTable,
    pub rate_int: RateTable,
    pub kernel_tracer: Kernel,
    pub kernel_env1: Kernel,
    pub kernel_env2: Kernel,
    pub kernel_int: Kernel,
    pub n_max: usize,
}

impl ModelSpec {
    pub fn n_states(&self) -> usize {
        self.space.n_states()
    }

    pub fn weights(&self) -> &[f64] {
        self.space.weights()
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        Self {
            eps,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return Err(Error::validation("coupling", "model.eps", "eps must be >= 0"));
        }
        let n = self.n_states();
        for (key, rate, arity) in [
            ("model.rate_tracer", &self.rate_tracer, 1),
            ("model.rate_env1", &self.rate_env1, 1),
            ("model.rate_env2", &self.rate_env2, 2),
            ("model.rate_int", &self.rate_int, 2),
        ] {
            if rate.arity != arity || rate.n_states != n {
                return Err(Error::validation("shape", key, "rate table has the wrong shape"));
            }
            rate.check(key)?;
        }
        for (key, kernel, arity) in [
            ("model.kernel_tracer", &self.kernel_tracer, 1),
            ("model.kernel_env1", &self.kernel_env1, 1),
            ("model.kernel_env2", &self.kernel_env2, 2),
            ("model.kernel_int", &self.kernel_int, 2),
        ] {
            if kernel.arity != arity || kernel.n_states != n {
                return Err(Error::validation("shape", key, "kernel has the wrong shape"));
            }
            if kernel.data.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(Error::validation(
                    "kernel positivity",
                    key,
                    "kernel entries must be finite and nonnegative",
                ));
            }
            let report = validate_kernel(kernel, self.weights())?;
            if !report.pass {
                return Err(Error::validation(
                    "kernel normalization",
                    key,
                    format!("max deviation {:e}", report.max_deviation),
                ));
            }
        }
        Ok(())
    }

    /// All rates `a`, uniform kernels, on the given grid with one species.
    pub fn uniform(grid: MicroGrid, a: f64, eps: f64, n_max: usize) -> Result<Self> {
        let space = StateSpace::new(1, grid)?;
        let n = space.n_states();
        let w = space.weights().to_vec();
        let model = Self {
            eps,
            rate_tracer: RateTable::constant(1, n, a),
            rate_env1: RateTable::constant(1, n, a),
            rate_env2: RateTable::constant(2, n, a),
            rate_int: RateTable::constant(2, n, a),
            kernel_tracer: Kernel::uniform(1, &w),
            kernel_env1: Kernel::uniform(1, &w),
            kernel_env2: Kernel::uniform(2, &w),
            kernel_int: Kernel::uniform(2, &w),
            n_max,
            space,
        };
        model.validate()?;
        Ok(model)
    }

    /// The two-point reference model: unit weights, unit rates, uniform kernels.
    pub fn tiny(eps: f64, n_max: usize) -> Self {
        Self::uniform(MicroGrid::unit(2), 1.0, eps, n_max).expect("tiny model is valid")
    }
}

/// Initial correlation data: `D_{1+n} = z^n g_{1+n} F^0_{0+n} F^0_{1+0}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationProfile {
    /// `g_{1+0} = 1, g_{1+1}, ..., g_{1+n_max}`.
    pub g: SequenceState,
    /// `F^0_{0+n}` for `n = 0..=n_max`, each a row-major array over `n`
    /// environment slots (`n = 0` is the scalar 1).
    pub env_reduced: Vec<Vec<f64>>,
    pub tracer0: Vec<f64>,
}

impl CorrelationProfile {
    /// Product environment `F^0_{0+n} = env_one^{(x) n}` and correlations
    /// `g_{1+n} = g_fn(tracer, env...)`.
    pub fn product(
        tracer0: Vec<f64>,
        env_one: &[f64],
        n_max: usize,
        mut g_fn: impl FnMut(&[usize]) -> f64,
    ) -> Self {
        let n = tracer0.len();
        let g = SequenceState::new(
            SequenceKind::Correlation,
            (0..=n_max)
                .map(|s| {
                    if s == 0 {
                        SectorFunction::from_fn(0, n, |_| 1.0)
                    } else {
                        SectorFunction::from_fn(s, n, &mut g_fn)
                    }
                })
                .collect(),
        )
        .expect("contiguous sectors");
        let env_reduced = (0..=n_max)
            .map(|k| {
                let len = n.pow(k as u32);
                (0..len)
                    .map(|mut idx| {
                        let mut v = 1.0;
                        for _ in 0..k {
                            v *= env_one[idx % n];
                            idx /= n;
                        }
                        v
                    })
                    .collect()
            })
            .collect();
        Self {
            g,
            env_reduced,
            tracer0,
        }
    }

    /// `g = 1` everywhere.
    pub fn chaos(tracer0: Vec<f64>, env_one: &[f64], n_max: usize) -> Self {
        Self::product(tracer0, env_one, n_max, |_| 1.0)
    }

    /// Pairwise spin-like correlation `g_{1+n} = prod_i (1 + c s(u) s(u_i))`
    /// with `s = +1, -1, +1, ...` over flattened states.
    pub fn spin(tracer0: Vec<f64>, env_one: &[f64], n_max: usize, c: f64) -> Self {
        let sigma = |e: usize| if e.is_multiple_of(2) { 1.0 } else { -1.0 };
        Self::product(tracer0, env_one, n_max, |x| {
            x[1..].iter().map(|&e| 1.0 + c * sigma(x[0]) * sigma(e)).product()
        })
    }

    pub fn n_max(&self) -> usize {
        self.g.n_max()
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        let n = model.n_states();
        let w = model.weights();
        if self.tracer0.len() != n {
            return Err(Error::validation("shape", "initial.tracer0", "wrong length"));
        }
        if self.g.n_states() != n || self.g.n_max() != model.n_max {
            return Err(Error::validation(
                "shape",
                "initial.correlation",
                format!(
                    "correlation sectors must cover 0..={} over {n} states",
                    model.n_max
                ),
            ));
        }
        if self.env_reduced.len() != model.n_max + 1 {
            return Err(Error::validation(
                "shape",
                "initial.env_reduced",
                "need one environment distribution per sector",
            ));
        }
        if self.tracer0.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::validation(
                "tracer positivity",
                "initial.tracer0",
                "entries must be finite and nonnegative",
            ));
        }
        let mass: f64 = self.tracer0.iter().zip(w).map(|(f, w)| f * w).sum();
        if (mass - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::validation(
                "tracer normalization",
                "initial.tracer0",
                format!("weighted mass {mass} != 1"),
            ));
        }
        if self.g.sector(0).as_slice().iter().any(|v| *v != 1.0) {
            return Err(Error::validation(
                "correlation g_{1+0} = 1",
                "initial.correlation",
                "g_{1+0} must be identically 1",
            ));
        }
        for (k, env) in self.env_reduced.iter().enumerate() {
            if env.len() != n.pow(k as u32) || env.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::validation(
                    "environment distribution",
                    format!("initial.env_reduced[{k}]"),
                    "wrong length or negative entries",
                ));
            }
        }
        for s in 1..=self.n_max() {
            let g = self.g.sector(s);
            let env = &self.env_reduced[s];
            let block = n.pow(s as u32);
            for (idx, v) in g.as_slice().iter().enumerate() {
                let support = self.tracer0[idx / block] * env[idx % block];
                if !v.is_finite() || (support > 0.0 && *v <= 0.0) {
                    return Err(Error::validation(
                        "correlation positivity",
                        format!("initial.correlation[{s}]"),
                        format!("g entry {idx} = {v}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// `D(0)` and the reduced sequence `F^(c)(0)` derived from it.
#[derive(Debug, Clone)]
pub struct InitialState {
    pub full: SequenceState,
    pub reduced: SequenceState,
    pub partition_norm: f64,
}

/// `D^0_{1+n} = z^n g_{1+n} F^0_{0+n} F^0_{1+0}` for `n <= n_max` and the
/// exact truncated reduction `F^0_{1+s} = (I,D)^{-1} sum_n 1/n! int D^0_{1+s+n}`.
pub fn build_initial_state(
    profile: &CorrelationProfile,
    model: &ModelSpec,
    activity: f64,
) -> Result<InitialState> {
    if !(activity.is_finite() && activity > 0.0) {
        return Err(Error::Invalid(format!("activity z = {activity} must be > 0")));
    }
    profile.validate(model)?;
    let n = model.n_states();
    let mut sectors = Vec::with_capacity(model.n_max + 1);
    for s in 0..=model.n_max {
        let g = profile.g.sector(s);
        let env = &profile.env_reduced[s];
        let block = n.pow(s as u32);
        let zs = activity.powi(s as i32);
        let data = g
            .as_slice()
            .iter()
            .enumerate()
            .map(|(idx, gv)| zs * gv * env[idx % block] * profile.tracer0[idx / block])
            .collect();
        sectors.push(SectorFunction::new(s, n, data)?);
    }
    let full = SequenceState::new(SequenceKind::Distribution, sectors)?;
    let partition_norm = crate::hierarchy::partition_norm(&full, model.weights());
    let reduced = crate::hierarchy::reduce_state_all(&full, model.weights())?;
    Ok(InitialState {
        full,
        reduced,
        partition_norm,
    })
}

// ---------------------------------------------------------------------------
// Configuration file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TableSpec {
    Builtin(String),
    Flat(Vec<f64>),
    Nested(Vec<Vec<f64>>),
}

impl TableSpec {
    fn flatten(&self) -> Option<Vec<f64>> {
        match self {
            TableSpec::Builtin(_) => None,
            TableSpec::Flat(v) => Some(v.clone()),
            TableSpec::Nested(rows) => Some(rows.iter().flatten().copied().collect()),
        }
    }

    fn rate(&self, key: &str, arity: usize, n: usize) -> Result<RateTable> {
        match self {
            TableSpec::Builtin(name) => match name.strip_prefix("constant:") {
                Some(v) => {
                    let value: f64 = v.trim().parse().map_err(|_| {
                        Error::Parse(format!("`{key}`: bad constant `{v}`"))
                    })?;
                    Ok(RateTable::constant(arity, n, value))
                }
                None => Err(Error::Parse(format!(
                    "`{key}`: unknown rate built-in `{name}` (expected constant:<value>)"
                ))),
            },
            other => RateTable::new(arity, n, other.flatten().unwrap_or_default())
                .map_err(|e| Error::validation("shape", key, e.to_string())),
        }
    }

    fn kernel(&self, key: &str, arity: usize, weights: &[f64]) -> Result<Kernel> {
        match self {
            TableSpec::Builtin(name) => match name.as_str() {
                "uniform" => Ok(Kernel::uniform(arity, weights)),
                "copy" => Ok(Kernel::copy(arity, weights)),
                other => Err(Error::Parse(format!(
                    "`{key}`: unknown kernel built-in `{other}` (expected uniform or copy)"
                ))),
            },
            other => Kernel::new(arity, weights.len(), other.flatten().unwrap_or_default())
                .map_err(|e| Error::validation("shape", key, e.to_string())),
        }
    }
}

fn default_uniform() -> TableSpec {
    TableSpec::Builtin("uniform".into())
}

fn default_unit_rate() -> TableSpec {
    TableSpec::Builtin("constant:1".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub points: Vec<f64>,
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Number of species `|J|`.
    #[serde(alias = "species_count")]
    pub m: usize,
    pub grid: GridSection,
    pub eps: f64,
    pub n_max: usize,
    #[serde(default = "default_unit_rate")]
    pub rate_tracer: TableSpec,
    #[serde(default = "default_unit_rate")]
    pub rate_env1: TableSpec,
    #[serde(default = "default_unit_rate")]
    pub rate_env2: TableSpec,
    #[serde(default = "default_unit_rate")]
    pub rate_int: TableSpec,
    #[serde(default = "default_uniform")]
    pub kernel_tracer: TableSpec,
    #[serde(default = "default_uniform")]
    pub kernel_env1: TableSpec,
    #[serde(default = "default_uniform")]
    pub kernel_env2: TableSpec,
    #[serde(default = "default_uniform")]
    pub kernel_int: TableSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub tracer0: TableSpec,
    /// `F^0_{0+1}`; the environment is taken as its product unless
    /// `env_reduced` is given.
    pub env_one: Option<TableSpec>,
    /// Explicit `F^0_{0+n}`, `n = 1..=n_max`, each flattened row-major.
    pub env_reduced: Option<Vec<Vec<f64>>>,
    /// "chaos", "spin:<c>", or explicit flattened `g_{1+n}`, `n = 1..=n_max`.
    #[serde(default = "default_chaos")]
    pub correlation: CorrelationSpec,
    #[serde(default = "default_activity")]
    pub activity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CorrelationSpec {
    Builtin(String),
    Explicit(Vec<Vec<f64>>),
}

fn default_chaos() -> CorrelationSpec {
    CorrelationSpec::Builtin("chaos".into())
}

fn default_activity() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub t_max: f64,
    pub dt: f64,
    #[serde(default = "default_order")]
    pub series_order: usize,
    #[serde(default)]
    pub mc_trajectories: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_order() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: String,
    #[serde(default = "default_format")]
    pub format: String,
}

fn default_out_dir() -> String {
    "results".into()
}

fn default_format() -> String {
    "csv".into()
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
            format: default_format(),
        }
    }
}

/// The configuration document as written; kept for canonical hashing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub model: ModelSection,
    pub initial: InitialSection,
    pub run: RunSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub t_max: f64,
    pub dt: f64,
    pub series_order: usize,
    pub mc_trajectories: usize,
    pub seed: u64,
}

/// Validated experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub initial: CorrelationProfile,
    pub activity: f64,
    pub run: RunConfig,
    pub output: OutputSection,
    pub document: ConfigDocument,
}

fn tracer_table(spec: &TableSpec, key: &str, space: &StateSpace) -> Result<Vec<f64>> {
    match spec {
        TableSpec::Builtin(name) if name == "uniform" => {
            let total = space.total_weight();
            Ok(vec![1.0 / total; space.n_states()])
        }
        TableSpec::Builtin(name) => Err(Error::Parse(format!(
            "`{key}`: unknown built-in `{name}` (expected uniform or a table)"
        ))),
        other => {
            let v = other.flatten().unwrap_or_default();
            if v.len() != space.n_states() {
                return Err(Error::validation(
                    "shape",
                    key,
                    format!("expected {} entries, got {}", space.n_states(), v.len()),
                ));
            }
            Ok(v)
        }
    }
}

impl ConfigDocument {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// SHA-256 over the canonical JSON rendering of the document.
    pub fn canonical_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_string(self).expect("document serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn build(&self) -> Result<ExperimentConfig> {
        let m = &self.model;
        let weights = m.grid.weights.clone().unwrap_or_else(|| vec![1.0; m.grid.points.len()]);
        let grid = MicroGrid::new(m.grid.points.clone(), weights)?;
        let space = StateSpace::new(m.m, grid)?;
        let n = space.n_states();
        let w = space.weights().to_vec();
        let model = ModelSpec {
            eps: m.eps,
            rate_tracer: m.rate_tracer.rate("model.rate_tracer", 1, n)?,
            rate_env1: m.rate_env1.rate("model.rate_env1", 1, n)?,
            rate_env2: m.rate_env2.rate("model.rate_env2", 2, n)?,
            rate_int: m.rate_int.rate("model.rate_int", 2, n)?,
            kernel_tracer: m.kernel_tracer.kernel("model.kernel_tracer", 1, &w)?,
            kernel_env1: m.kernel_env1.kernel("model.kernel_env1", 1, &w)?,
            kernel_env2: m.kernel_env2.kernel("model.kernel_env2", 2, &w)?,
            kernel_int: m.kernel_int.kernel("model.kernel_int", 2, &w)?,
            n_max: m.n_max,
            space,
        };
        model.validate()?;

        let init = &self.initial;
        let tracer0 = tracer_table(&init.tracer0, "initial.tracer0", &model.space)?;
        let env_one = match &init.env_one {
            Some(spec) => tracer_table(spec, "initial.env_one", &model.space)?,
            None => tracer_table(&default_uniform(), "initial.env_one", &model.space)?,
        };
        let mut profile = match &init.correlation {
            CorrelationSpec::Builtin(name) if name == "chaos" => {
                CorrelationProfile::chaos(tracer0, &env_one, model.n_max)
            }
            CorrelationSpec::Builtin(name) => match name.strip_prefix("spin:") {
                Some(c) => {
                    let c: f64 = c.trim().parse().map_err(|_| {
                        Error::Parse(format!("`initial.correlation`: bad spin amplitude `{c}`"))
                    })?;
                    CorrelationProfile::spin(tracer0, &env_one, model.n_max, c)
                }
                None => {
                    return Err(Error::Parse(format!(
                        "`initial.correlation`: unknown built-in `{name}`"
                    )))
                }
            },
            CorrelationSpec::Explicit(rows) => {
                if rows.len() != model.n_max {
                    return Err(Error::validation(
                        "shape",
                        "initial.correlation",
                        format!("need {} sectors (n = 1..=n_max)", model.n_max),
                    ));
                }
                let mut sectors = vec![SectorFunction::from_fn(0, n, |_| 1.0)];
                for (k, row) in rows.iter().enumerate() {
                    sectors.push(
                        SectorFunction::new(k + 1, n, row.clone()).map_err(|e| {
                            Error::validation(
                                "shape",
                                format!("initial.correlation[{}]", k + 1),
                                e.to_string(),
                            )
                        })?,
                    );
                }
                let mut p = CorrelationProfile::chaos(tracer0, &env_one, model.n_max);
                p.g = SequenceState::new(SequenceKind::Correlation, sectors)?;
                p
            }
        };
        if let Some(env) = &init.env_reduced {
            if env.len() != model.n_max {
                return Err(Error::validation(
                    "shape",
                    "initial.env_reduced",
                    format!("need {} arrays (n = 1..=n_max)", model.n_max),
                ));
            }
            profile.env_reduced = std::iter::once(vec![1.0]).chain(env.iter().cloned()).collect();
        }
        profile.validate(&model)?;
        if !(init.activity.is_finite() && init.activity > 0.0) {
            return Err(Error::validation("activity", "initial.activity", "z must be > 0"));
        }

        let r = &self.run;
        if !(r.t_max > 0.0) {
            return Err(Error::validation("time horizon", "run.t_max", "t_max must be > 0"));
        }
        if !(r.dt > 0.0) {
            return Err(Error::validation("time step", "run.dt", "dt must be > 0"));
        }
        Ok(ExperimentConfig {
            model,
            initial: profile,
            activity: init.activity,
            run: RunConfig {
                t_max: r.t_max,
                dt: r.dt,
                series_order: r.series_order,
                mc_trajectories: r.mc_trajectories,
                seed: r.seed,
            },
            output: self.output.clone(),
            document: self.clone(),
        })
    }
}

/// Parses and validates a configuration document.
pub fn load_model(config_text: &str) -> Result<ExperimentConfig> {
    ConfigDocument::parse(config_text)?.build()
}

pub fn load_model_file(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    load_model(&text)
}

/// The two-point reference configuration.
pub const TINY_CONFIG: &str = r#"
[model]
m = 1
grid = { points = [0.0, 1.0], weights = [1.0, 1.0] }
eps = 0.0
n_max = 2
rate_tracer = "constant:1"
rate_env1 = "constant:1"
rate_env2 = "constant:1"
rate_int = "constant:1"
kernel_tracer = "uniform"
kernel_env1 = "uniform"
kernel_env2 = "uniform"
kernel_int = "uniform"

[initial]
tracer0 = [0.8, 0.2]
env_one = [0.5, 0.5]
correlation = "chaos"
activity = 0.5

[run]
t_max = 2.0
dt = 0.001
series_order = 1
mc_trajectories = 20000
seed = 42

[output]
dir = "results"
format = "csv"
"#;
