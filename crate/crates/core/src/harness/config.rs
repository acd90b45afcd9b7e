//! Experiment configuration: TOML text plus `key=value` overrides, resolved
//! into a validated [`ExperimentConfig`].
//!
//! ```toml
//! engine = "mc"
//! seed = 7
//!
//! [params]
//! lambda0 = 10.0
//! alpha = 1.0        # or tau
//! stiffness = 4.0    # chi/delta, or delta
//! chi = 0.5
//!
//! [numerics]
//! t_end = 5.0        # scaled time t_lambda
//! particles_per_cell = 2000
//!
//! [outputs]
//! snapshots = [1.0, 5.0]
//! diagnostics = ["deviation", "plateau"]
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::ks::{Perturbation, Regime};
use crate::model::{nondimensionalize, DimensionalParams, ModelParams};
use crate::record::EngineKind;

/// One problem with a configuration, located by line when possible.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.key, self.message),
            None => write!(f, "{}: {}", self.key, self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigErrors {
    /// Malformed TOML or a malformed override.
    Parse(Vec<ConfigError>),
    /// Well-formed but invalid.
    Validation(Vec<ConfigError>),
}

impl ConfigErrors {
    pub fn errors(&self) -> &[ConfigError] {
        match self {
            ConfigErrors::Parse(e) | ConfigErrors::Validation(e) => e,
        }
    }
}

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self {
            ConfigErrors::Parse(_) => "parse error",
            ConfigErrors::Validation(_) => "invalid configuration",
        };
        writeln!(f, "{kind}:")?;
        for e in self.errors() {
            writeln!(f, "  {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnostic {
    /// Deviation series and its time average.
    Deviation,
    Plateau,
    /// Local mean run lengths at `outputs.radii`.
    RunLength,
    /// Internal-state histograms at `outputs.radii`.
    Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Numerics {
    /// Number of grid cells.
    pub cells: usize,
    /// End time in `t_lambda`.
    pub t_end: f64,
    /// Time step in engine time; `None` uses the engine default.
    pub dt: Option<f64>,
    pub particles_per_cell: usize,
    /// Averaging window for the Monte Carlo density, in `t_lambda`.
    pub avg_window: f64,
    pub regime: Regime,
    pub m_cells: usize,
    pub m_half_width: Option<f64>,
    /// Initial perturbation of the continuum engines.
    pub perturbation: Perturbation,
    /// Spacing of the continuum deviation series, in `t_lambda`.
    pub output_interval: f64,
    pub stop_when_stationary: bool,
}

impl Default for Numerics {
    fn default() -> Self {
        Numerics {
            cells: 50,
            t_end: 1.0,
            dt: None,
            particles_per_cell: 2000,
            avg_window: 0.05,
            regime: Regime::Fast,
            m_cells: 200,
            m_half_width: None,
            perturbation: Perturbation::default(),
            output_interval: 0.001,
            stop_when_stationary: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    pub dir: Option<String>,
    /// Snapshot times in `t_lambda`; the final state is always written.
    pub snapshots: Vec<f64>,
    pub diagnostics: Vec<Diagnostic>,
    /// Distances from the aggregate center for run-length and histogram
    /// diagnostics.
    pub radii: Vec<f64>,
    pub bins: usize,
    /// Histogram half-range in units of `tau G`, with `G` the largest
    /// final `|d_x ln S|`.
    pub bin_range: f64,
    pub plateau_tol: f64,
}

impl Default for Outputs {
    fn default() -> Self {
        Outputs {
            dir: None,
            snapshots: vec![],
            diagnostics: vec![Diagnostic::Deviation],
            radii: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            bins: 101,
            bin_range: 1.5,
            plateau_tol: 0.02,
        }
    }
}

/// A named list of values substituted at a dotted config key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: Vec<SweepAxis>,
    #[serde(default = "default_max_points")]
    pub max_points: usize,
}

fn default_max_points() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySection {
    pub alpha: Vec<f64>,
    pub stiffness: Vec<f64>,
}

/// Fully resolved experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub engine: EngineKind,
    pub seed: u64,
    pub params: ModelParams,
    pub numerics: Numerics,
    pub outputs: Outputs,
    pub sweep: Option<SweepSection>,
    pub stability: Option<StabilitySection>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    lambda0: Option<f64>,
    tau: Option<f64>,
    alpha: Option<f64>,
    delta: Option<f64>,
    stiffness: Option<f64>,
    chi: Option<f64>,
    d_s: Option<f64>,
    length: Option<f64>,
    sigma: Option<f64>,
    sigma_s: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDimensional {
    v0: f64,
    lambda0_dim: f64,
    tau_dim: f64,
    d_s_dim: f64,
    a: f64,
    b: f64,
    rho0: f64,
    l_dim: f64,
    t0: f64,
    delta: f64,
    chi: f64,
}

impl RawDimensional {
    fn dims(&self) -> DimensionalParams {
        DimensionalParams {
            v0: self.v0,
            lambda0_dim: self.lambda0_dim,
            tau_dim: self.tau_dim,
            d_s_dim: self.d_s_dim,
            a: self.a,
            b: self.b,
            rho0: self.rho0,
            l_dim: self.l_dim,
            t0: self.t0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    engine: Option<EngineKind>,
    #[serde(default)]
    seed: u64,
    params: Option<RawParams>,
    dimensional: Option<toml::Value>,
    #[serde(default)]
    numerics: Option<toml::Value>,
    #[serde(default)]
    outputs: Option<toml::Value>,
    sweep: Option<SweepSection>,
    stability: Option<StabilitySection>,
}

/// Mutually exclusive keys: setting one removes the other.
const EXCLUSIVE: [(&str, &str); 2] = [("tau", "alpha"), ("delta", "stiffness")];

/// Parse a `key=value` override. The value is read as a TOML value, falling
/// back to a bare string.
pub fn parse_override(text: &str) -> Result<(String, Value), ConfigError> {
    let (key, value) = text.split_once('=').ok_or_else(|| ConfigError {
        line: None,
        key: text.to_string(),
        message: "override must look like key=value".into(),
    })?;
    let key = key.trim().to_string();
    let raw = value.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key, value))
}

/// Set a dotted key in a table, creating intermediate tables.
pub fn set_key(table: &mut Table, key: &str, value: Value) -> Result<(), ConfigError> {
    let err = |message: &str| ConfigError {
        line: None,
        key: key.to_string(),
        message: message.to_string(),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(err("empty key segment"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| err("not a table"))?;
    }
    let last = parts[parts.len() - 1];
    if parts.len() == 2 && parts[0] == "params" {
        for (a, b) in EXCLUSIVE {
            if last == a {
                cur.remove(b);
            } else if last == b {
                cur.remove(a);
            }
        }
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// First line declaring `key` within `[section]` (or at top level).
fn line_of(text: &str, section: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<String> = None;
    for (n, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            current = Some(t.trim_matches(|c| c == '[' || c == ']').trim().to_string());
            continue;
        }
        let name = t.split('=').next().unwrap_or("").trim();
        if name == key && current.as_deref() == section {
            return Some(n + 1);
        }
    }
    None
}

fn locate(text: &str, path: &str) -> Option<usize> {
    match path.split_once('.') {
        Some((sec, key)) => line_of(text, Some(sec), key).or_else(|| line_of(text, None, path)),
        None => line_of(text, None, path).or_else(|| {
            text.lines()
                .position(|l| l.trim().trim_matches(|c| c == '[' || c == ']') == path)
                .map(|n| n + 1)
        }),
    }
}

/// Extract the offending key from a serde message such as
/// "unknown field `foo`, expected ...".
fn key_in_message(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let end = msg[start..].find('`')? + start;
    Some(msg[start..end].to_string())
}

fn deser<T>(
    text: &str,
    section: &str,
    value: Option<Value>,
    errors: &mut Vec<ConfigError>,
) -> Option<T>
where
    T: Default + Serialize + for<'de> Deserialize<'de>,
{
    let Some(value) = value else {
        return Some(T::default());
    };
    // fill defaults field by field
    let mut base = Table::try_from(T::default_table()).unwrap_or_default();
    if let Value::Table(t) = value {
        for (k, v) in t {
            base.insert(k, v);
        }
    } else {
        errors.push(ConfigError {
            line: locate(text, section),
            key: section.to_string(),
            message: "expected a table".into(),
        });
        return None;
    }
    match T::deserialize(Value::Table(base)) {
        Ok(v) => Some(v),
        Err(e) => {
            let msg = e.to_string();
            let key = key_in_message(&msg).unwrap_or_default();
            errors.push(ConfigError {
                line: locate(text, &format!("{section}.{key}")),
                key: if key.is_empty() { section.to_string() } else { format!("{section}.{key}") },
                message: msg.trim().to_string(),
            });
            None
        }
    }
}

/// Serialized defaults, used to fill keys a section leaves out.
trait DefaultTable {
    fn default_table() -> Value;
}

impl<T: Default + Serialize> DefaultTable for T {
    fn default_table() -> Value {
        Value::try_from(T::default()).unwrap_or(Value::Table(Table::new()))
    }
}

/// Parse a configuration. `overrides` are `key=value` strings applied on top
/// of the file; `engine` (from the subcommand) must agree with the file's
/// `engine` key if both are given.
pub fn parse_config(
    text: &str,
    overrides: &[String],
    engine: Option<EngineKind>,
) -> Result<ExperimentConfig, ConfigErrors> {
    resolve(text, parse_table(text, overrides)?, engine)
}

/// The TOML table of `text` with `overrides` applied.
pub fn parse_table(text: &str, overrides: &[String]) -> Result<Table, ConfigErrors> {
    let mut table: Table = text.parse().map_err(|e: toml::de::Error| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
        ConfigErrors::Parse(vec![ConfigError {
            line,
            key: "toml".into(),
            message: e.message().to_string(),
        }])
    })?;
    let mut parse_errors = Vec::new();
    for o in overrides {
        match parse_override(o).and_then(|(k, v)| set_key(&mut table, &k, v)) {
            Ok(()) => {}
            Err(e) => parse_errors.push(e),
        }
    }
    if !parse_errors.is_empty() {
        return Err(ConfigErrors::Parse(parse_errors));
    }
    Ok(table)
}

/// Resolve an already-parsed table (used by sweeps after substituting axis
/// values).
pub fn resolve(
    text: &str,
    table: Table,
    engine: Option<EngineKind>,
) -> Result<ExperimentConfig, ConfigErrors> {
    let raw = RawConfig::deserialize(Value::Table(table)).map_err(|e| {
        let msg = e.to_string();
        let key = key_in_message(&msg).unwrap_or_default();
        ConfigErrors::Validation(vec![ConfigError {
            line: locate(text, &key),
            key,
            message: msg.trim().to_string(),
        }])
    })?;
    let mut errors = Vec::new();
    let err = |errors: &mut Vec<ConfigError>, key: &str, message: String| {
        errors.push(ConfigError {
            line: locate(text, key),
            key: key.to_string(),
            message,
        })
    };

    let engine = match (raw.engine, engine) {
        (Some(a), Some(b)) if a != b => {
            err(
                &mut errors,
                "engine",
                format!("config selects {} but the subcommand is {}", a.name(), b.name()),
            );
            a
        }
        (Some(a), _) => a,
        (None, Some(b)) => b,
        (None, None) => {
            err(&mut errors, "engine", "no engine selected".into());
            EngineKind::Mc
        }
    };

    let params = match (raw.params, raw.dimensional) {
        (Some(_), Some(_)) => {
            err(&mut errors, "dimensional", "give either [params] or [dimensional], not both".into());
            None
        }
        (None, None) => {
            err(&mut errors, "params", "missing [params] section".into());
            None
        }
        (Some(p), None) => resolve_params(text, p, &mut errors),
        (None, Some(d)) => match RawDimensional::deserialize(d) {
            Ok(d) => match nondimensionalize(&d.dims(), d.delta, d.chi) {
                Ok(p) => Some(p),
                Err(e) => {
                    err(&mut errors, "dimensional", e.to_string());
                    None
                }
            },
            Err(e) => {
                let msg = e.to_string();
                let key = key_in_message(&msg).unwrap_or_default();
                err(&mut errors, &format!("dimensional.{key}"), msg.trim().to_string());
                None
            }
        },
    };

    let numerics: Option<Numerics> = deser(text, "numerics", raw.numerics, &mut errors);
    let outputs: Option<Outputs> = deser(text, "outputs", raw.outputs, &mut errors);

    if let Some(p) = &params {
        if let Err(v) = p.validate_allow_null() {
            for v in v {
                err(&mut errors, &format!("params.{}", v.field), v.to_string());
            }
        }
    }
    if let Some(n) = &numerics {
        if n.cells < 2 {
            err(&mut errors, "numerics.cells", "at least 2 cells are required".into());
        }
        if !(n.t_end > 0.0 && n.t_end.is_finite()) {
            err(&mut errors, "numerics.t_end", "t_end must be positive".into());
        }
        if let Some(dt) = n.dt {
            if !(dt > 0.0) {
                err(&mut errors, "numerics.dt", "dt must be positive".into());
            }
        }
        if n.particles_per_cell == 0 {
            err(&mut errors, "numerics.particles_per_cell", "must be >= 1".into());
        }
        if !(n.avg_window > 0.0) {
            err(&mut errors, "numerics.avg_window", "must be positive".into());
        }
        if !(n.output_interval > 0.0) {
            err(&mut errors, "numerics.output_interval", "must be positive".into());
        }
        if n.m_cells == 0 {
            err(&mut errors, "numerics.m_cells", "must be >= 1".into());
        }
    }
    if let Some(o) = &outputs {
        if o.snapshots.iter().any(|t| !(*t >= 0.0)) {
            err(&mut errors, "outputs.snapshots", "snapshot times must be >= 0".into());
        }
        let needs_particles = o
            .diagnostics
            .iter()
            .any(|d| matches!(d, Diagnostic::RunLength | Diagnostic::Histogram));
        if needs_particles && engine == EngineKind::Ks {
            err(
                &mut errors,
                "outputs.diagnostics",
                "run_length and histogram need the mc or asymptotic engine".into(),
            );
        }
        if o.bins == 0 || !(o.bin_range > 0.0) {
            err(&mut errors, "outputs.bins", "bins and bin_range must be positive".into());
        }
        if let Some(p) = &params {
            if o.radii.iter().any(|r| !(*r >= 0.0 && *r <= 0.5 * p.length)) {
                err(&mut errors, "outputs.radii", "radii must lie in [0, L/2]".into());
            }
        }
    }
    if let Some(s) = &raw.sweep {
        let total: usize = s.axis.iter().map(|a| a.values.len()).product();
        if s.axis.is_empty() || s.axis.iter().any(|a| a.values.is_empty()) {
            err(&mut errors, "sweep", "every axis needs at least one value".into());
        }
        if s.axis.iter().any(|a| a.values.iter().any(|v| !v.is_finite())) {
            err(&mut errors, "sweep", "axis values must be finite".into());
        }
        if total > s.max_points {
            err(&mut errors, "sweep", format!("{total} points exceed max_points = {}", s.max_points));
        }
    }
    if !errors.is_empty() {
        return Err(ConfigErrors::Validation(errors));
    }
    Ok(ExperimentConfig {
        engine,
        seed: raw.seed,
        params: params.unwrap(),
        numerics: numerics.unwrap(),
        outputs: outputs.unwrap(),
        sweep: raw.sweep,
        stability: raw.stability,
    })
}

fn resolve_params(text: &str, p: RawParams, errors: &mut Vec<ConfigError>) -> Option<ModelParams> {
    let mut missing = |key: &str| {
        errors.push(ConfigError {
            line: locate(text, "params"),
            key: format!("params.{key}"),
            message: "missing".into(),
        })
    };
    let (Some(lambda0), Some(chi)) = (p.lambda0, p.chi) else {
        if p.lambda0.is_none() {
            missing("lambda0");
        }
        if p.chi.is_none() {
            missing("chi");
        }
        return None;
    };
    let tau = match (p.tau, p.alpha) {
        (Some(t), None) => t,
        (None, Some(a)) => a / lambda0,
        _ => {
            missing("tau (or alpha, exactly one)");
            return None;
        }
    };
    let delta = match (p.delta, p.stiffness) {
        (Some(d), None) => d,
        (None, Some(s)) => chi / s,
        _ => {
            missing("delta (or stiffness, exactly one)");
            return None;
        }
    };
    let mut out = ModelParams::new(lambda0, tau, delta, chi);
    out.d_s = p.d_s.unwrap_or(out.d_s);
    out.length = p.length.unwrap_or(out.length);
    out.sigma = p.sigma.unwrap_or(out.sigma);
    out.sigma_s = p.sigma_s.unwrap_or(out.sigma_s);
    Some(out)
}

impl ExperimentConfig {
    /// Canonical TOML rendering; identical configs give identical text.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Scaled time to engine time.
    pub fn engine_time(&self, t_lambda: f64) -> f64 {
        let l2 = self.params.length * self.params.length;
        match self.engine {
            EngineKind::Mc => t_lambda * self.params.lambda0 * l2,
            EngineKind::Ks | EngineKind::Asymptotic => t_lambda * l2,
        }
    }
}
