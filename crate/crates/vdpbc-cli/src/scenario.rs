//! Flat key-value scenario files with dotted sections.
//!
//! The format is a plain text file of `section.key = value` lines; `#`
//! starts a comment, blank lines are ignored. Numbers are decimal in the
//! same SI units as the summary tables (inertias in kg·m², frictions in
//! N·m·s/rad, stiffness in N·m/rad, angles in rad, times in s). Unknown
//! keys are rejected so typos cannot silently fall back to defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use vdpbc::control::{ControllerConfig, SubsystemGains};
use vdpbc::phmech::SingleJointParams;
use vdpbc::sim::{IntegratorConfig, Scheme};

/// A fully validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub model: SingleJointParams,
    pub lambda_link: f64,
    pub lambda_motor: f64,
    pub kd_link: f64,
    pub kd_motor: f64,
    pub metric_link: f64,
    pub metric_motor: f64,
    pub amplitude: f64,
    /// Angular frequency [rad/s].
    pub frequency: f64,
    pub phase: f64,
    pub offset: f64,
    pub dt: f64,
    pub t_end: f64,
    pub scheme: Scheme,
    pub record_stride: usize,
    pub initial: [f64; 4],
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Scenario {
    pub fn controller_config(&self) -> ControllerConfig {
        ControllerConfig::new(
            SubsystemGains::scalar(self.lambda_link, self.metric_link, self.kd_link),
            SubsystemGains::scalar(self.lambda_motor, self.metric_motor, self.kd_motor),
        )
    }

    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig::new(self.dt, self.t_end)
            .with_scheme(self.scheme)
            .with_stride(self.record_stride)
    }
}

const KNOWN_KEYS: &[&str] = &[
    "model.link_inertia",
    "model.rotor_inertia",
    "model.link_friction",
    "model.rotor_friction",
    "model.nominal_load",
    "model.stiffness",
    "control.lambda_link",
    "control.lambda_motor",
    "control.kd_link",
    "control.kd_motor",
    "control.metric_link",
    "control.metric_motor",
    "trajectory.amplitude",
    "trajectory.frequency",
    "trajectory.phase",
    "trajectory.offset",
    "integrator.dt",
    "integrator.t_end",
    "integrator.scheme",
    "integrator.record_stride",
    "initial.q_link",
    "initial.q_motor",
    "initial.p_link",
    "initial.p_motor",
    "output.dir",
    "seed",
];

/// Parses raw text into a key-value map, rejecting malformed lines and
/// unknown or duplicate keys.
pub fn parse_keys(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("line {}: expected `key = value`", lineno + 1));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(format!("unknown key `{key}`"));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(format!("duplicate key `{key}`"));
        }
    }
    Ok(map)
}

struct Reader {
    map: BTreeMap<String, String>,
}

impl Reader {
    fn number(&self, key: &str) -> Result<f64, String> {
        let raw = self
            .map
            .get(key)
            .ok_or_else(|| format!("missing required key `{key}`"))?;
        raw.parse::<f64>()
            .map_err(|_| format!("`{key}`: not a number: `{raw}`"))
    }

    fn number_or(&self, key: &str, default: f64) -> Result<f64, String> {
        match self.map.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse::<f64>()
                .map_err(|_| format!("`{key}`: not a number: `{raw}`")),
        }
    }

    fn positive(&self, key: &str) -> Result<f64, String> {
        let v = self.number(key)?;
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(format!("`{key}` must be positive, got {v}"))
        }
    }

    fn non_negative(&self, key: &str) -> Result<f64, String> {
        let v = self.number(key)?;
        if v >= 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(format!("`{key}` must be non-negative, got {v}"))
        }
    }
}

/// Loads and validates a scenario file.
pub fn load(path: &Path) -> Result<Scenario, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into());
    from_text(&text, name)
}

/// Parses and validates scenario text (exposed for sweeps, which patch
/// keys before re-validating).
pub fn from_text(text: &str, name: String) -> Result<Scenario, String> {
    let map = parse_keys(text)?;
    let r = Reader { map };

    let model = SingleJointParams {
        link_inertia: r.positive("model.link_inertia")?,
        rotor_inertia: r.positive("model.rotor_inertia")?,
        link_friction: r.non_negative("model.link_friction")?,
        rotor_friction: r.non_negative("model.rotor_friction")?,
        nominal_load: r.non_negative("model.nominal_load")?,
        stiffness: r.positive("model.stiffness")?,
    };
    let scenario = Scenario {
        name,
        model,
        lambda_link: r.positive("control.lambda_link")?,
        lambda_motor: r.positive("control.lambda_motor")?,
        kd_link: r.positive("control.kd_link")?,
        kd_motor: r.positive("control.kd_motor")?,
        metric_link: r.positive("control.metric_link")?,
        metric_motor: r.positive("control.metric_motor")?,
        amplitude: {
            let v = r.number("trajectory.amplitude")?;
            if !v.is_finite() {
                return Err("`trajectory.amplitude` must be finite".into());
            }
            v
        },
        frequency: r.non_negative("trajectory.frequency")?,
        phase: r.number_or("trajectory.phase", 0.0)?,
        offset: r.number_or("trajectory.offset", 0.0)?,
        dt: r.positive("integrator.dt")?,
        t_end: r.positive("integrator.t_end")?,
        scheme: match r.map.get("integrator.scheme").map(String::as_str) {
            None | Some("rk4") => Scheme::Rk4,
            Some("euler") => Scheme::Euler,
            Some(other) => {
                return Err(format!(
                    "`integrator.scheme` must be rk4 or euler, got `{other}`"
                ))
            }
        },
        record_stride: match r.map.get("integrator.record_stride") {
            None => 10,
            Some(raw) => raw
                .parse::<usize>()
                .ok()
                .filter(|v| *v > 0)
                .ok_or_else(|| {
                    format!("`integrator.record_stride` must be a positive integer, got `{raw}`")
                })?,
        },
        initial: [
            r.number_or("initial.q_link", 0.0)?,
            r.number_or("initial.q_motor", 0.0)?,
            r.number_or("initial.p_link", 0.0)?,
            r.number_or("initial.p_motor", 0.0)?,
        ],
        out_dir: PathBuf::from(
            r.map
                .get("output.dir")
                .cloned()
                .unwrap_or_else(|| "out".into()),
        ),
        seed: match r.map.get("seed") {
            None => 42,
            Some(raw) => raw
                .parse::<u64>()
                .map_err(|_| format!("`seed` must be a non-negative integer, got `{raw}`"))?,
        },
    };
    if scenario.t_end < scenario.dt {
        return Err("`integrator.t_end` must be at least `integrator.dt`".into());
    }
    Ok(scenario)
}

/// Replaces (or inserts) one `key = value` assignment in scenario text.
pub fn override_key(text: &str, key: &str, value: &str) -> String {
    let mut out = String::new();
    let mut replaced = false;
    for raw in text.lines() {
        let stripped = raw.split('#').next().unwrap_or("").trim();
        let is_target = stripped
            .split_once('=')
            .map(|(k, _)| k.trim() == key)
            .unwrap_or(false);
        if is_target {
            out.push_str(&format!("{key} = {value}\n"));
            replaced = true;
        } else {
            out.push_str(raw);
            out.push('\n');
        }
    }
    if !replaced {
        out.push_str(&format!("{key} = {value}\n"));
    }
    out
}
