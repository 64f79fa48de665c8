//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, and every key may appear at most once.
//! Vectors and lists are comma separated. Unknown keys are rejected so that typos cannot
//! silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::channel::ScenarioConfig;
use crate::error::{Error, Result};
use crate::fim::DerivativeMethod;
use crate::geometry::{Position, Region};
use crate::localizer::LocalizerConfig;

/// Which parameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepKind {
    #[serde(rename = "snr_db")]
    SnrDb,
    #[serde(rename = "q")]
    NumBases,
    #[serde(rename = "lmr_db")]
    LmrDb,
}

impl SweepKind {
    pub fn name(&self) -> &'static str {
        match self {
            SweepKind::SnrDb => "snr_db",
            SweepKind::NumBases => "q",
            SweepKind::LmrDb => "lmr_db",
        }
    }
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snr_db" | "snr" => Ok(SweepKind::SnrDb),
            "q" | "num_bases" => Ok(SweepKind::NumBases),
            "lmr_db" | "lmr" => Ok(SweepKind::LmrDb),
            other => Err(Error::Config(format!(
                "unknown sweep `{other}` (expected snr_db, q or lmr_db)"
            ))),
        }
    }
}

/// Precoder design compared in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ra-optimal")]
    RaOptimal,
    #[serde(rename = "ra-directional")]
    RaDirectional,
    #[serde(rename = "conventional")]
    Conventional,
}

impl Method {
    pub const ALL: [Method; 3] = [
        Method::RaOptimal,
        Method::RaDirectional,
        Method::Conventional,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::RaOptimal => "ra-optimal",
            Method::RaDirectional => "ra-directional",
            Method::Conventional => "conventional",
        }
    }

    /// Stable tag for deriving random streams; independent of the configured method list.
    pub fn stream_tag(&self) -> u64 {
        match self {
            Method::RaOptimal => 1,
            Method::RaDirectional => 2,
            Method::Conventional => 3,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method `{s}` (expected ra-optimal, ra-directional or conventional)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UeMode {
    /// Every trial uses `ue_position`.
    Fixed,
    /// Every trial draws the UE uniformly in the region.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub bs_position: Position,
    pub ue_position: Position,
    pub array_rows: usize,
    pub array_cols: usize,
    /// Element spacing in meters; `None` means half a wavelength.
    pub element_spacing: Option<f64>,
    pub num_bases: usize,
    pub candidate_lattice: [usize; 3],
    pub sample_lattice: [usize; 3],
    pub sweep: SweepKind,
    pub sweep_values: Vec<f64>,
    /// SNR used when the sweep is not over SNR; `None` transmits `tx_power_w` instead.
    pub snr_db: Option<f64>,
    /// LMR used when the sweep is not over LMR; infinity means no scatterers.
    pub lmr_db: f64,
    pub num_scatterers: usize,
    pub trials: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub ue_mode: UeMode,
    pub localizer: LocalizerConfig,
    /// Finite-difference step for the information gradients; `None` means `lambda / 100`,
    /// `Some(0.0)` selects the analytic chain rule.
    pub fd_step: Option<f64>,
    /// Also emit coarse and mid-stage RMSE rows.
    pub stages: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::table_defaults(),
            bs_position: Position::new(0.0, 0.0, 5.0),
            ue_position: Position::new(10.35, 1.67, 0.0),
            array_rows: 16,
            array_cols: 16,
            element_spacing: None,
            num_bases: 9,
            candidate_lattice: [2, 2, 2],
            sample_lattice: [5, 5, 3],
            sweep: SweepKind::SnrDb,
            sweep_values: vec![-10.0, 0.0, 10.0, 20.0, 30.0],
            snr_db: Some(15.0),
            lmr_db: f64::INFINITY,
            num_scatterers: 10,
            trials: 200,
            seed: 0,
            methods: Method::ALL.to_vec(),
            ue_mode: UeMode::Fixed,
            localizer: LocalizerConfig::default(),
            fd_step: None,
            stages: false,
        }
    }
}

/// Trial count used for LMR sweeps when `trials` is not given.
pub const DEFAULT_LMR_TRIALS: usize = 500;

pub const KEYS: &[&str] = &[
    "carrier_hz",
    "speed_of_light",
    "bandwidth_hz",
    "noise_psd_dbm_hz",
    "tx_power_w",
    "region_min",
    "region_max",
    "bs_position",
    "ue_position",
    "array_rows",
    "array_cols",
    "element_spacing",
    "num_bases",
    "candidate_lattice",
    "sample_lattice",
    "sweep",
    "sweep_values",
    "snr_db",
    "lmr_db",
    "num_scatterers",
    "trials",
    "seed",
    "methods",
    "ue_mode",
    "coarse_step",
    "mid_step",
    "mid_extent",
    "coarse_candidates",
    "derivative",
    "fd_step",
    "stages",
];

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    n + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!(
                    "line {}: unknown key `{key}`",
                    n + 1
                )));
            }
            if entries
                .insert(key.to_string(), (n + 1, value.to_string()))
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    n + 1
                )));
            }
        }
        let mut cfg = Self::default();
        let mut derivative: Option<String> = None;
        for (key, (line, value)) in &entries {
            let ctx = |e: Error| match e {
                Error::Config(msg) => Error::Config(format!("line {line}: `{key}`: {msg}")),
                other => other,
            };
            let v = value.as_str();
            match key.as_str() {
                "carrier_hz" => cfg.scenario.carrier_hz = real(v).map_err(ctx)?,
                "speed_of_light" => cfg.scenario.speed_of_light = real(v).map_err(ctx)?,
                "bandwidth_hz" => cfg.scenario.bandwidth_hz = real(v).map_err(ctx)?,
                "noise_psd_dbm_hz" => cfg.scenario.noise_psd_dbm_hz = real(v).map_err(ctx)?,
                "tx_power_w" => cfg.scenario.tx_power_w = real(v).map_err(ctx)?,
                "region_min" => cfg.scenario.region.min = vec3(v).map_err(ctx)?,
                "region_max" => cfg.scenario.region.max = vec3(v).map_err(ctx)?,
                "bs_position" => cfg.bs_position = vec3(v).map_err(ctx)?,
                "ue_position" => cfg.ue_position = vec3(v).map_err(ctx)?,
                "array_rows" => cfg.array_rows = integer(v).map_err(ctx)?,
                "array_cols" => cfg.array_cols = integer(v).map_err(ctx)?,
                "element_spacing" => {
                    cfg.element_spacing = if v == "auto" {
                        None
                    } else {
                        Some(real(v).map_err(ctx)?)
                    }
                }
                "num_bases" => cfg.num_bases = integer(v).map_err(ctx)?,
                "candidate_lattice" => cfg.candidate_lattice = counts3(v).map_err(ctx)?,
                "sample_lattice" => cfg.sample_lattice = counts3(v).map_err(ctx)?,
                "sweep" => cfg.sweep = v.parse().map_err(ctx)?,
                "sweep_values" => cfg.sweep_values = list(v, real).map_err(ctx)?,
                "snr_db" => {
                    cfg.snr_db = if v == "none" {
                        None
                    } else {
                        Some(real(v).map_err(ctx)?)
                    }
                }
                "lmr_db" => cfg.lmr_db = real(v).map_err(ctx)?,
                "num_scatterers" => cfg.num_scatterers = integer(v).map_err(ctx)?,
                "trials" => cfg.trials = integer(v).map_err(ctx)?,
                "seed" => {
                    cfg.seed = v
                        .parse()
                        .map_err(|_| {
                            Error::Config(format!("expected an unsigned 64-bit integer, got `{v}`"))
                        })
                        .map_err(ctx)?
                }
                "methods" => cfg.methods = list(v, |s| s.parse()).map_err(ctx)?,
                "ue_mode" => {
                    cfg.ue_mode = match v {
                        "fixed" => UeMode::Fixed,
                        "random" => UeMode::Random,
                        _ => {
                            return Err(ctx(Error::Config(format!(
                                "expected fixed or random, got `{v}`"
                            ))))
                        }
                    }
                }
                "coarse_step" => cfg.localizer.coarse_step = steps(v).map_err(ctx)?,
                "mid_step" => cfg.localizer.mid_step = steps(v).map_err(ctx)?,
                "mid_extent" => cfg.localizer.mid_extent = real(v).map_err(ctx)?,
                "coarse_candidates" => cfg.localizer.coarse_candidates = integer(v).map_err(ctx)?,
                "derivative" => derivative = Some(v.to_string()),
                "fd_step" => cfg.fd_step = Some(real(v).map_err(ctx)?),
                "stages" => {
                    cfg.stages = match v {
                        "true" => true,
                        "false" => false,
                        _ => {
                            return Err(ctx(Error::Config(format!(
                                "expected true or false, got `{v}`"
                            ))))
                        }
                    }
                }
                _ => unreachable!("key list and match arms agree"),
            }
        }
        match derivative.as_deref() {
            None | Some("finite-difference") => {}
            Some("analytic") => {
                if cfg.fd_step.is_some() {
                    return Err(Error::Config(
                        "`fd_step` conflicts with `derivative = analytic`".into(),
                    ));
                }
                cfg.fd_step = Some(0.0);
            }
            Some(other) => {
                return Err(Error::Config(format!(
                    "`derivative`: expected finite-difference or analytic, got `{other}`"
                )))
            }
        }
        if cfg.sweep == SweepKind::LmrDb && !entries.contains_key("trials") {
            cfg.trials = DEFAULT_LMR_TRIALS;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Consistency checks; every failure is a [`Error::Config`].
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.scenario
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if Region::new(self.scenario.region.min, self.scenario.region.max).is_err() {
            return bad("region_min must not exceed region_max on any axis".into());
        }
        for (name, p) in [
            ("bs_position", &self.bs_position),
            ("ue_position", &self.ue_position),
        ] {
            if !p.iter().all(|v| v.is_finite()) {
                return bad(format!("{name} must be finite"));
            }
        }
        if self.array_rows == 0 || self.array_cols == 0 {
            return bad("array_rows and array_cols must be positive".into());
        }
        if let Some(s) = self.element_spacing {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("element_spacing must be positive, got {s}"));
            }
        }
        if self.num_bases == 0 {
            return bad("num_bases must be positive".into());
        }
        if self.candidate_lattice.contains(&0) || self.sample_lattice.contains(&0) {
            return bad("lattice counts must be positive".into());
        }
        if self.sweep_values.is_empty() {
            return bad("sweep_values must not be empty".into());
        }
        for v in &self.sweep_values {
            let ok = match self.sweep {
                SweepKind::SnrDb | SweepKind::LmrDb => !v.is_nan() && *v != f64::NEG_INFINITY,
                SweepKind::NumBases => *v >= 1.0 && v.fract() == 0.0 && v.is_finite(),
            };
            if !ok {
                return bad(format!("invalid {} sweep value {v}", self.sweep.name()));
            }
        }
        if let Some(s) = self.snr_db {
            if s.is_nan() || s == f64::NEG_INFINITY {
                return bad(format!("invalid snr_db {s}"));
            }
        }
        if self.lmr_db.is_nan() || self.lmr_db == f64::NEG_INFINITY {
            return bad(format!("invalid lmr_db {}", self.lmr_db));
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return bad(format!("method {m} listed twice"));
            }
        }
        let l = &self.localizer;
        if !(l.mid_extent > 0.0 && l.mid_extent.is_finite()) || l.coarse_candidates == 0 {
            return bad("mid_extent must be positive and coarse_candidates at least 1".into());
        }
        for s in l.coarse_step.iter().chain(l.mid_step.iter()) {
            if !(*s > 0.0 && s.is_finite()) {
                return bad(format!("grid steps must be positive, got {s}"));
            }
        }
        if let Some(h) = self.fd_step {
            if !(h >= 0.0 && h.is_finite()) {
                return bad(format!("fd_step must be positive, got {h}"));
            }
        }
        Ok(())
    }

    pub fn region(&self) -> Region {
        self.scenario.region
    }

    pub fn spacing(&self) -> f64 {
        self.element_spacing
            .unwrap_or(self.scenario.wavelength() / 2.0)
    }

    pub fn derivative_method(&self) -> DerivativeMethod {
        match self.fd_step {
            None => DerivativeMethod::default_for(self.scenario.wavelength()),
            Some(0.0) => DerivativeMethod::Analytic,
            Some(step) => DerivativeMethod::FiniteDifference { step },
        }
    }

    /// Number of basis functions used by a method at one sweep value.
    pub fn bases_for(&self, method: Method, sweep_value: f64) -> usize {
        match (method, self.sweep) {
            (Method::Conventional, _) => 1,
            (_, SweepKind::NumBases) => sweep_value as usize,
            _ => self.num_bases,
        }
    }

    pub fn snr_for(&self, sweep_value: f64) -> Option<f64> {
        match self.sweep {
            SweepKind::SnrDb => Some(sweep_value),
            _ => self.snr_db,
        }
    }

    pub fn lmr_for(&self, sweep_value: f64) -> f64 {
        match self.sweep {
            SweepKind::LmrDb => sweep_value,
            _ => self.lmr_db,
        }
    }
}

fn real(v: &str) -> Result<f64> {
    match v {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
        _ => v
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::Config(format!("expected a number, got `{v}`"))),
    }
}

fn integer(v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("expected a non-negative integer, got `{v}`")))
}

fn list<T>(v: &str, item: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').map(|s| item(s.trim())).collect()
}

fn vec3(v: &str) -> Result<Vector3<f64>> {
    let items = list(v, real)?;
    if items.len() != 3 {
        return Err(Error::Config(format!(
            "expected three comma-separated numbers, got `{v}`"
        )));
    }
    Ok(Vector3::new(items[0], items[1], items[2]))
}

fn counts3(v: &str) -> Result<[usize; 3]> {
    let items = list(v, integer)?;
    match items.as_slice() {
        [n] => Ok([*n; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(Error::Config(format!(
            "expected one or three counts, got `{v}`"
        ))),
    }
}

/// A single step for all axes, or one per axis.
fn steps(v: &str) -> Result<Vector3<f64>> {
    let items = list(v, real)?;
    match items.as_slice() {
        [s] => Ok(Vector3::repeat(*s)),
        [a, b, c] => Ok(Vector3::new(*a, *b, *c)),
        _ => Err(Error::Config(format!(
            "expected one or three steps, got `{v}`"
        ))),
    }
}
