//! Strict JSON scenario configuration.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::barrier::GcbfWeights;
use crate::error::{Error, Result};
use crate::filter::{ecbf_gains_from_poles, EcbfGains, InputBounds};
use crate::gp::FitOptions;
use crate::kernel::Hyperparameters;
use crate::sim::{DiskBarrier, Domain2, NoiseModel, NominalPolicy, ObstacleWorld, MAX_DT};

pub const MAX_TICKS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    ArbitrarySet,
    OnlineSynthesis,
    NoisyState,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcbfConfig {
    pub weights: GcbfWeights,
    pub tau: f64,
    pub capacity: usize,
    pub hyperparameters: Hyperparameters,
    /// Fit the hyperparameters to the initial dataset before the run.
    #[serde(default)]
    pub fit: Option<FitOptions>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GainsConfig {
    /// Pole pair of s² + k1 s + k0.
    Poles([f64; 2]),
    Coefficients(EcbfGains),
}

impl GainsConfig {
    pub fn resolve(&self) -> Result<EcbfGains> {
        match self {
            GainsConfig::Poles([p1, p2]) => ecbf_gains_from_poles(*p1, *p2),
            GainsConfig::Coefficients(g) => {
                g.validate()?;
                Ok(*g)
            }
        }
    }
}

fn default_mass() -> f64 {
    0.033
}

fn default_gravity() -> f64 {
    9.81
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    #[serde(default = "default_mass")]
    pub mass: f64,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    #[serde(default)]
    pub yaw: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            mass: default_mass(),
            gravity: default_gravity(),
            yaw: 0.0,
        }
    }
}

/// Where the initial safety samples come from. Generated sources draw from
/// the scenario's seeded generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Uniform inputs over the box, targets uniform over [y_lo, y_hi).
    Uniform { domain: Domain2, n: usize, y_lo: f64, y_hi: f64 },
    /// Noisy samples of the disk barrier D² − x² − y².
    DiskSamples {
        radius: f64,
        domain: Domain2,
        n: usize,
        noise_std: f64,
    },
    /// Samples of the configured obstacle world at the given points.
    WorldSamples { points: Vec<[f64; 2]> },
    /// CSV as written by `Dataset::write_csv`. Relative paths resolve against
    /// the config file's directory at load time.
    File { path: PathBuf },
    Inline { inputs: Vec<[f64; 2]>, targets: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialPosition {
    Fixed([f64; 3]),
    /// The grid point of largest h_gp over the box, at height z.
    Safest { domain: Domain2, resolution: usize, z: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub position: InitialPosition,
    #[serde(default)]
    pub velocity: [f64; 3],
}

/// The barrier enforced by the filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BarrierKind {
    #[default]
    Gaussian,
    /// Analytic disk, the plain-CBF baseline.
    Disk(DiskBarrier),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Evaluate the barrier at the (possibly noisy) measured position.
    #[default]
    Deterministic,
    /// Treat the measurement as N(r̲, 𝚺) and use the moment-matched barrier.
    MomentMatched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineConfig {
    /// Refit hyperparameters after this many new samples; 0 disables.
    pub refit_every: usize,
    #[serde(default)]
    pub fit: FitOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContourConfig {
    pub domain: Domain2,
    pub resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub gcbf: GcbfConfig,
    pub gains: GainsConfig,
    #[serde(default)]
    pub dynamics: DynamicsConfig,
    #[serde(default)]
    pub world: Option<ObstacleWorld>,
    #[serde(default)]
    pub noise: Option<NoiseModel>,
    pub dataset_source: DatasetSource,
    pub nominal: NominalPolicy,
    pub initial_state: InitialState,
    #[serde(default)]
    pub barrier: BarrierKind,
    #[serde(default)]
    pub filter_mode: FilterMode,
    #[serde(default)]
    pub input_bounds: Option<InputBounds>,
    /// Ingest world samples along the trajectory (requires `world`).
    #[serde(default)]
    pub online: Option<OnlineConfig>,
    #[serde(default)]
    pub contour: Option<ContourConfig>,
    pub output_dir: PathBuf,
}

impl ScenarioConfig {
    pub fn ticks(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// Every violated invariant, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut check = |field: &str, r: Result<()>| {
            if let Err(e) = r {
                v.push(format!("{field}: {e}"));
            }
        };
        if !(self.dt > 0.0 && self.dt <= MAX_DT) {
            check("dt", Err(Error::InvalidArgument(format!("{} must lie in (0, {MAX_DT}]", self.dt))));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            check("horizon", Err(Error::InvalidArgument(format!("{} must be positive", self.horizon))));
        } else if self.dt > 0.0 && self.horizon / self.dt > MAX_TICKS {
            check("horizon", Err(Error::InvalidArgument(format!("horizon/dt exceeds {MAX_TICKS} ticks"))));
        }
        check("gcbf.weights", self.gcbf.weights.validate());
        check("gcbf.hyperparameters", self.gcbf.hyperparameters.validate());
        if self.gcbf.hyperparameters.dim() != 2 {
            check(
                "gcbf.hyperparameters",
                Err(Error::InvalidArgument("the planar barrier needs two length scales".into())),
            );
        }
        if !(self.gcbf.tau >= 0.0 && self.gcbf.tau.is_finite()) {
            check("gcbf.tau", Err(Error::InvalidArgument("must be non-negative".into())));
        }
        if self.gcbf.capacity == 0 {
            check("gcbf.capacity", Err(Error::InvalidArgument("must be positive".into())));
        }
        check("gains", self.gains.resolve().map(|_| ()));
        let d = &self.dynamics;
        if !(d.mass > 0.0 && d.gravity > 0.0 && d.yaw.is_finite()) {
            check("dynamics", Err(Error::InvalidArgument("mass and gravity must be positive".into())));
        }
        if let Some(w) = &self.world {
            check("world", w.validate());
        }
        if let Some(n) = &self.noise {
            check("noise", n.validate());
        }
        match &self.dataset_source {
            DatasetSource::Uniform { domain, n, y_lo, y_hi } => {
                check("dataset_source.uniform.domain", domain.validate());
                if *n == 0 || !(y_lo < y_hi) {
                    check(
                        "dataset_source.uniform",
                        Err(Error::InvalidArgument("needs n > 0 and y_lo < y_hi".into())),
                    );
                }
            }
            DatasetSource::DiskSamples {
                radius,
                domain,
                n,
                noise_std,
            } => {
                check("dataset_source.disk_samples.domain", domain.validate());
                if *n == 0 || !(*radius > 0.0) || !(*noise_std >= 0.0) {
                    check(
                        "dataset_source.disk_samples",
                        Err(Error::InvalidArgument("needs n > 0, radius > 0, noise_std ≥ 0".into())),
                    );
                }
            }
            DatasetSource::WorldSamples { points } => {
                if self.world.is_none() {
                    check("world", Err(Error::InvalidArgument("world_samples source needs a world".into())));
                }
                if points.is_empty() {
                    check("dataset_source.world_samples", Err(Error::InvalidArgument("no points".into())));
                }
            }
            DatasetSource::File { path } => {
                if !path.is_file() {
                    check(
                        "dataset_source.file",
                        Err(Error::InvalidArgument(format!("{} does not exist", path.display()))),
                    );
                }
            }
            DatasetSource::Inline { inputs, targets } => {
                if inputs.len() != targets.len() || inputs.is_empty() {
                    check(
                        "dataset_source.inline",
                        Err(Error::InvalidArgument("inputs and targets must be non-empty and equal length".into())),
                    );
                }
            }
        }
        check("nominal", self.nominal.validate());
        match &self.initial_state.position {
            InitialPosition::Fixed(p) => {
                if p.iter().any(|v| !v.is_finite()) {
                    check("initial_state.position", Err(Error::NonFinite("position")));
                }
            }
            InitialPosition::Safest { domain, resolution, .. } => {
                check("initial_state.position.safest.domain", domain.validate());
                if *resolution < 2 {
                    check(
                        "initial_state.position.safest.resolution",
                        Err(Error::InvalidArgument("must be at least 2".into())),
                    );
                }
            }
        }
        if let BarrierKind::Disk(disk) = &self.barrier {
            if !(disk.radius > 0.0) {
                check("barrier.disk.radius", Err(Error::InvalidArgument("must be positive".into())));
            }
        }
        if let Some(fit) = &self.gcbf.fit {
            check("gcbf.fit", fit.validate());
        }
        if let Some(online) = &self.online {
            check("online.fit", online.fit.validate());
        }
        if self.online.is_some() && self.world.is_none() {
            check("online", Err(Error::InvalidArgument("online ingestion needs a world".into())));
        }
        if let Some(b) = &self.input_bounds {
            if b.lower.len() != 3 || b.upper.len() != 3 || b.lower.iter().zip(&b.upper).any(|(l, u)| !(l <= u)) {
                check("input_bounds", Err(Error::InvalidArgument("need three ordered (lower, upper) pairs".into())));
            }
        }
        if let Some(c) = &self.contour {
            check("contour.domain", c.domain.validate());
            if c.resolution < 2 {
                check("contour.resolution", Err(Error::InvalidArgument("must be at least 2".into())));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid configuration:\n  {}", v.join("\n  "))))
        }
    }
}

/// Parse with field-path diagnostics, resolve relative dataset paths against
/// `base_dir`, and validate.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<ScenarioConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            Error::Config(format!("parse error: {inner}"))
        } else {
            Error::Config(format!("parse error at `{path}`: {inner}"))
        }
    })?;
    if let DatasetSource::File { path } = &mut cfg.dataset_source {
        if path.is_relative() {
            *path = base_dir.join(&*path);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_config(path: &Path, cfg: &ScenarioConfig) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, cfg)?;
        writeln!(w)?;
        Ok(())
    })
}

/// Write through a temporary file in the same directory and rename it into
/// place, so readers never observe a truncated file.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        body(&mut buf)?;
        buf.flush()?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{
            "scenario": "custom",
            "dt": 0.01,
            "horizon": 1.0,
            "seed": 3,
            "gcbf": {
                "weights": {"mean_weight": 1.0, "variance_weight": 4.0},
                "tau": 0.0,
                "capacity": 50,
                "hyperparameters": {"length_scales": [0.2, 0.2], "signal_variance": 1.0, "noise_variance": 1e-4}
            },
            "gains": {"poles": [-2.0, -2.0]},
            "dataset_source": {"inline": {"inputs": [[0.0, 0.0], [0.1, 0.0]], "targets": [1.0, 1.0]}},
            "nominal": {"policy": "hold"},
            "initial_state": {"position": {"fixed": [0.0, 0.0, 1.0]}},
            "output_dir": "out"
        }"#
    }

    #[test]
    fn parses_minimal_config_with_defaults() {
        let c = parse_config(minimal(), Path::new(".")).unwrap();
        assert_eq!(c.dynamics, DynamicsConfig::default());
        assert_eq!(c.barrier, BarrierKind::Gaussian);
        assert_eq!(c.ticks(), 100);
        assert_eq!(c.gains.resolve().unwrap().k0, 4.0);
    }

    #[test]
    fn empty_file_is_a_parse_error() {
        let e = parse_config("", Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("parse error"), "{e}");
    }

    #[test]
    fn unknown_key_names_path() {
        let text = minimal().replace("\"tau\": 0.0", "\"tau\": 0.0, \"tua\": 1");
        let e = parse_config(&text, Path::new(".")).unwrap_err().to_string();
        assert!(e.contains("gcbf") && e.contains("tua") && e.contains("line"), "{e}");
    }

    #[test]
    fn validation_lists_every_violation() {
        let text = minimal().replace("\"dt\": 0.01", "\"dt\": 0").replace("\"capacity\": 50", "\"capacity\": 0");
        let e = parse_config(&text, Path::new(".")).unwrap_err().to_string();
        assert!(e.contains("dt:") && e.contains("gcbf.capacity"), "{e}");
    }

    #[test]
    fn missing_dataset_file_is_rejected() {
        let text = minimal().replace(
            r#"{"inline": {"inputs": [[0.0, 0.0], [0.1, 0.0]], "targets": [1.0, 1.0]}}"#,
            r#"{"file": {"path": "no/such/file.csv"}}"#,
        );
        let e = parse_config(&text, Path::new("/tmp")).unwrap_err().to_string();
        assert!(e.contains("dataset_source.file"), "{e}");
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = parse_config(minimal(), dir.path()).unwrap();
        let path = dir.path().join("c.json");
        write_config(&path, &c).unwrap();
        assert_eq!(load_config(&path).unwrap(), c);
    }
}
