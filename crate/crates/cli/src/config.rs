//! Flat key-value experiment configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sdde_insider::paths::steps_in;
use thiserror::Error;
use toml::Value;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("unknown scenario `{0}` (expected one of: {names})", names = Scenario::NAMES.join(", "))]
    UnknownScenario(String),
    #[error("configuration has {} violation(s):\n  - {}", .0.len(), .0.join("\n  - "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    DonskerCheck,
    ForwardIntegralCheck,
    AbsdeSolve,
    Harvest,
    MaxprincipleVerify,
    Portfolio,
    ViabilitySweep,
}

impl Scenario {
    pub const ALL: [Scenario; 7] = [
        Scenario::DonskerCheck,
        Scenario::ForwardIntegralCheck,
        Scenario::AbsdeSolve,
        Scenario::Harvest,
        Scenario::MaxprincipleVerify,
        Scenario::Portfolio,
        Scenario::ViabilitySweep,
    ];
    const NAMES: [&'static str; 7] = [
        "donsker-check",
        "forward-integral-check",
        "absde-solve",
        "harvest",
        "maxprinciple-verify",
        "portfolio",
        "viability-sweep",
    ];

    pub fn name(self) -> &'static str {
        Self::NAMES[self as usize]
    }

    fn keys(self) -> &'static [Key] {
        match self {
            Scenario::DonskerCheck => DONSKER_KEYS,
            Scenario::ForwardIntegralCheck => FORWARD_KEYS,
            Scenario::AbsdeSolve => ABSDE_KEYS,
            Scenario::Harvest => HARVEST_KEYS,
            Scenario::MaxprincipleVerify => VERIFY_KEYS,
            Scenario::Portfolio => PORTFOLIO_KEYS,
            Scenario::ViabilitySweep => SWEEP_KEYS,
        }
    }
}

impl FromStr for Scenario {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::NAMES
            .iter()
            .position(|n| *n == s)
            .map(|i| Self::ALL[i])
            .ok_or_else(|| ConfigError::UnknownScenario(s.to_string()))
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Float,
    Int,
    FloatList,
    Text,
}

#[derive(Debug, Clone, Copy)]
enum Fallback {
    Required,
    Float(f64),
    Int(i64),
    List(&'static [f64]),
    Absent,
}

#[derive(Debug, Clone, Copy)]
struct Key {
    name: &'static str,
    kind: Kind,
    fallback: Fallback,
}

const fn key(name: &'static str, kind: Kind, fallback: Fallback) -> Key {
    Key { name, kind, fallback }
}

const COMMON: &[Key] = &[
    key("dt", Kind::Float, Fallback::Required),
    key("seed", Kind::Int, Fallback::Int(1)),
    key("paths", Kind::Int, Fallback::Int(10_000)),
    key("out", Kind::Text, Fallback::Absent),
    key("enforce_sigma", Kind::Float, Fallback::Absent),
];

const DONSKER_KEYS: &[Key] = &[
    key("t0", Kind::Float, Fallback::Float(1.0)),
    key("beta", Kind::Float, Fallback::Float(1.0)),
    key("z", Kind::FloatList, Fallback::List(&[-1.0, 0.0, 1.0])),
    key("times", Kind::FloatList, Fallback::List(&[0.2, 0.5, 0.8])),
];

const FORWARD_KEYS: &[Key] = &[key("horizon", Kind::Float, Fallback::Float(1.0)), key("t0", Kind::Float, Fallback::Float(1.5))];

const ABSDE_KEYS: &[Key] = &[
    key("a", Kind::Float, Fallback::Required),
    key("c", Kind::Float, Fallback::Required),
    key("d", Kind::Float, Fallback::Float(0.0)),
    key("terminal", Kind::Float, Fallback::Float(1.0)),
    key("delay", Kind::Float, Fallback::Required),
    key("horizon", Kind::Float, Fallback::Float(1.0)),
];

const HARVEST_KEYS: &[Key] = &[
    key("alpha", Kind::Float, Fallback::Required),
    key("beta_birth", Kind::Float, Fallback::Required),
    key("sigma", Kind::Float, Fallback::Float(0.1)),
    key("delay", Kind::Float, Fallback::Required),
    key("rho", Kind::Float, Fallback::Float(0.05)),
    key("gamma", Kind::Float, Fallback::Float(0.5)),
    key("theta", Kind::Float, Fallback::Float(1.0)),
    key("eta", Kind::Float, Fallback::Float(1.0)),
    key("horizon", Kind::Float, Fallback::Float(1.0)),
    key("t0", Kind::Float, Fallback::Float(2.0)),
    key("insider_beta", Kind::Float, Fallback::Float(1.0)),
];

const VERIFY_KEYS: &[Key] = &[
    key("alpha", Kind::Float, Fallback::Required),
    key("beta_birth", Kind::Float, Fallback::Required),
    key("sigma", Kind::Float, Fallback::Float(0.1)),
    key("delay", Kind::Float, Fallback::Required),
    key("rho", Kind::Float, Fallback::Float(0.05)),
    key("gamma", Kind::Float, Fallback::Float(0.5)),
    key("theta", Kind::Float, Fallback::Float(1.0)),
    key("eta", Kind::Float, Fallback::Float(1.0)),
    key("horizon", Kind::Float, Fallback::Float(1.0)),
    key("t0", Kind::Float, Fallback::Float(2.0)),
    key("insider_beta", Kind::Float, Fallback::Float(1.0)),
    key("z", Kind::Float, Fallback::Float(0.0)),
];

const PORTFOLIO_KEYS: &[Key] = &[
    key("b", Kind::Float, Fallback::Float(0.0)),
    key("sigma", Kind::Float, Fallback::Float(1.0)),
    key("delay", Kind::Float, Fallback::Float(0.25)),
    key("horizon", Kind::Float, Fallback::Float(1.0)),
    key("t0", Kind::Float, Fallback::Required),
    key("factors", Kind::FloatList, Fallback::List(&[0.8, 0.9, 1.0, 1.1, 1.2])),
];

const SWEEP_KEYS: &[Key] = &[
    key("b", Kind::Float, Fallback::Float(0.0)),
    key("sigma", Kind::Float, Fallback::Float(1.0)),
    key("delay", Kind::Float, Fallback::Float(0.25)),
    key("horizon", Kind::Float, Fallback::Float(1.0)),
    key("t0_list", Kind::FloatList, Fallback::Required),
];

/// One scenario invocation: the merged key set after defaults, file and flags.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    values: BTreeMap<String, Value>,
    unknown: Vec<String>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub paths: Option<u64>,
    pub dt: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_toml_str(scenario: Scenario, text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let table: toml::Table =
            text.parse().map_err(|e: toml::de::Error| ConfigError::Parse { path: origin.to_path_buf(), message: e.to_string() })?;
        Ok(Self::from_table(scenario, table))
    }

    pub fn load(scenario: Scenario, path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(scenario, &text, path)
    }

    pub fn from_table(scenario: Scenario, table: toml::Table) -> Self {
        let known: Vec<&Key> = COMMON.iter().chain(scenario.keys()).collect();
        let mut values = BTreeMap::new();
        let mut unknown = Vec::new();
        for (k, v) in table {
            if known.iter().any(|key| key.name == k) {
                values.insert(k, v);
            } else {
                unknown.push(k);
            }
        }
        for key in &known {
            if values.contains_key(key.name) {
                continue;
            }
            let v = match key.fallback {
                Fallback::Float(x) => Value::Float(x),
                Fallback::Int(i) => Value::Integer(i),
                Fallback::List(xs) => Value::Array(xs.iter().map(|&x| Value::Float(x)).collect()),
                Fallback::Required | Fallback::Absent => continue,
            };
            values.insert(key.name.to_string(), v);
        }
        Self { scenario, values, unknown }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(out) = &o.out {
            self.values.insert("out".into(), Value::String(out.display().to_string()));
        }
        if let Some(seed) = o.seed {
            // Stored as the bit pattern so the full u64 range survives the i64 table.
            self.values.insert("seed".into(), Value::Integer(seed as i64));
        }
        if let Some(n) = o.paths {
            self.values.insert("paths".into(), Value::Integer(n.min(i64::MAX as u64) as i64));
        }
        if let Some(dt) = o.dt {
            self.values.insert("dt".into(), Value::Float(dt));
        }
    }

    pub fn float(&self, name: &str) -> f64 {
        match self.values.get(name) {
            Some(Value::Float(x)) => *x,
            Some(Value::Integer(i)) => *i as f64,
            _ => f64::NAN,
        }
    }

    pub fn optional_float(&self, name: &str) -> Option<f64> {
        self.values.contains_key(name).then(|| self.float(name))
    }

    pub fn list(&self, name: &str) -> Vec<f64> {
        match self.values.get(name) {
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Float(x) => *x,
                    Value::Integer(i) => *i as f64,
                    _ => f64::NAN,
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        match self.values.get("seed") {
            Some(Value::Integer(i)) => *i as u64,
            _ => 1,
        }
    }

    pub fn paths(&self) -> usize {
        match self.values.get("paths") {
            Some(Value::Integer(i)) if *i > 0 => *i as usize,
            _ => 0,
        }
    }

    pub fn dt(&self) -> f64 {
        self.float("dt")
    }

    pub fn out_dir(&self) -> PathBuf {
        match self.values.get("out") {
            Some(Value::String(s)) => PathBuf::from(s),
            _ => PathBuf::from("."),
        }
    }

    /// Merged configuration as JSON, for the metadata echo.
    pub fn echo(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert("scenario".into(), self.scenario.name().into());
        for (k, v) in &self.values {
            map.insert(k.clone(), toml_to_json(v));
        }
        map.insert("seed".into(), self.seed().into());
        serde_json::Value::Object(map)
    }
}

fn toml_to_json(v: &Value) -> serde_json::Value {
    match v {
        Value::Float(x) => serde_json::Number::from_f64(*x).map(Into::into).unwrap_or(serde_json::Value::Null),
        Value::Integer(i) => (*i).into(),
        Value::String(s) => s.clone().into(),
        Value::Boolean(b) => (*b).into(),
        Value::Array(items) => items.iter().map(toml_to_json).collect(),
        other => other.to_string().into(),
    }
}

fn type_matches(kind: Kind, v: &Value) -> bool {
    let numeric = |v: &Value| matches!(v, Value::Float(_) | Value::Integer(_));
    match kind {
        Kind::Float => numeric(v),
        Kind::Int => matches!(v, Value::Integer(_)),
        Kind::FloatList => matches!(v, Value::Array(items) if items.iter().all(numeric)),
        Kind::Text => matches!(v, Value::String(_)),
    }
}

/// Every violation found in `config`; empty when it can be run.
pub fn validate_config(config: &ExperimentConfig) -> Vec<String> {
    let mut out = Vec::new();
    for k in &config.unknown {
        out.push(format!("unknown key `{k}` for scenario {}", config.scenario));
    }
    let mut typed_ok = true;
    for key in COMMON.iter().chain(config.scenario.keys()) {
        match config.values.get(key.name) {
            None if matches!(key.fallback, Fallback::Required) => {
                out.push(format!("missing required key `{}`", key.name));
                typed_ok = false;
            }
            Some(v) if !type_matches(key.kind, v) => {
                out.push(format!("key `{}` has the wrong type (expected {:?})", key.name, key.kind));
                typed_ok = false;
            }
            _ => {}
        }
    }
    if !typed_ok {
        return out;
    }
    for (name, v) in &config.values {
        let bad = match v {
            Value::Float(x) => !x.is_finite(),
            Value::Array(items) => items.iter().any(|i| matches!(i, Value::Float(x) if !x.is_finite())),
            _ => false,
        };
        if bad {
            out.push(format!("key `{name}` must be finite"));
        }
    }
    if config.paths() < 2 {
        out.push("`paths` must be at least 2".into());
    }
    let dt = config.dt();
    if !(dt > 0.0) {
        out.push(format!("`dt` must be > 0, got {dt}"));
        return out;
    }
    let mut divides = |what: &'static str, value: f64| {
        if steps_in(value, dt, what).is_err() {
            out.push(format!("dt = {dt} does not divide {what} = {value}"));
        }
    };
    let f = |k: &str| config.float(k);
    match config.scenario {
        Scenario::DonskerCheck => {
            divides("t0", f("t0"));
            for t in config.list("times") {
                divides("times entry", t);
            }
        }
        Scenario::ForwardIntegralCheck => {
            divides("horizon", f("horizon"));
            divides("t0 - horizon", f("t0") - f("horizon"));
        }
        Scenario::AbsdeSolve => {
            divides("horizon", f("horizon"));
            divides("delay", f("delay"));
        }
        Scenario::Harvest | Scenario::MaxprincipleVerify => {
            divides("horizon", f("horizon"));
            divides("delay", f("delay"));
            divides("t0 - horizon", f("t0") - f("horizon"));
        }
        Scenario::Portfolio => {
            divides("horizon", f("horizon"));
            divides("delay", f("delay"));
            divides("t0 - horizon", f("t0") - f("horizon"));
        }
        Scenario::ViabilitySweep => {
            divides("horizon", f("horizon"));
            divides("delay", f("delay"));
            for t0 in config.list("t0_list") {
                divides("t0 - horizon", t0 - f("horizon"));
            }
        }
    }
    scenario_rules(config, &mut out);
    out
}

fn scenario_rules(config: &ExperimentConfig, out: &mut Vec<String>) {
    let f = |k: &str| config.float(k);
    let mut positive = |name: &str| {
        if !(f(name) > 0.0) {
            out.push(format!("`{name}` must be > 0, got {}", f(name)));
        }
    };
    match config.scenario {
        Scenario::DonskerCheck => {
            positive("t0");
            positive("beta");
            let t0 = f("t0");
            for t in config.list("times") {
                if !(t >= 0.0 && t < t0) {
                    out.push(format!("times entry {t} must lie in [0, t0 = {t0})"));
                }
            }
            if config.list("z").is_empty() || config.list("times").is_empty() {
                out.push("`z` and `times` must be non-empty".into());
            }
        }
        Scenario::ForwardIntegralCheck => {
            positive("horizon");
            if !(f("t0") > f("horizon")) {
                out.push(format!("need t0 > horizon, got t0 = {}, horizon = {}", f("t0"), f("horizon")));
            }
        }
        Scenario::AbsdeSolve => {
            positive("horizon");
            if !(f("delay") >= 0.0) {
                out.push(format!("`delay` must be >= 0, got {}", f("delay")));
            }
        }
        Scenario::Harvest | Scenario::MaxprincipleVerify => {
            for name in ["horizon", "delay", "theta", "insider_beta"] {
                positive(name);
            }
            for name in ["alpha", "beta_birth", "rho"] {
                if !(f(name) >= 0.0) {
                    out.push(format!("`{name}` must be >= 0, got {}", f(name)));
                }
            }
            let gamma = f("gamma");
            if !(gamma > 0.0 && gamma < 1.0) {
                out.push(format!("`gamma` = {gamma} violates the utility exponent constraint gamma in (0, 1)"));
            }
            if !(f("t0") > f("horizon")) {
                out.push(format!("need t0 > horizon for the insider kernel, got t0 = {}, horizon = {}", f("t0"), f("horizon")));
            }
        }
        Scenario::Portfolio => {
            positive("horizon");
            positive("sigma");
            if !(f("delay") >= 0.0) {
                out.push(format!("`delay` must be >= 0, got {}", f("delay")));
            }
            if f("t0") == f("horizon") {
                out.push("t0 = horizon: Monte Carlo diverges; use viability-sweep, which reports the analytic value".into());
            } else if !(f("t0") > f("horizon")) {
                out.push(format!("need t0 > horizon, got t0 = {}, horizon = {}", f("t0"), f("horizon")));
            }
            if config.list("factors").is_empty() {
                out.push("`factors` must be non-empty".into());
            }
        }
        Scenario::ViabilitySweep => {
            positive("horizon");
            positive("sigma");
            if !(f("delay") >= 0.0) {
                out.push(format!("`delay` must be >= 0, got {}", f("delay")));
            }
            let t0s = config.list("t0_list");
            let horizon = f("horizon");
            if let Some(bad) = t0s.iter().find(|&&t0| !(t0 >= horizon)) {
                out.push(format!("t0_list entry {bad} precedes horizon = {horizon}"));
            }
            if t0s.iter().filter(|&&t0| t0 > horizon).count() < 2 {
                out.push("t0_list needs at least two entries with t0 > horizon".into());
            }
        }
    }
}
