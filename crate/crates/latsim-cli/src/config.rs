//! Run configuration: one TOML file with optional sections mirroring the
//! library parameter structs. Missing keys fall back to the documented
//! defaults; unknown keys are rejected with the offending name.

use std::path::{Path, PathBuf};

use latsim::atomsim::NoiseParams;
use latsim::geometry::LatticeConfig;
use latsim::sequencer::{BeamParams, ExperimentConfig, SequenceConfig};
use latsim::stabilization::{DriftState, LoopConfig, PidState, PsfParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "LATSIM_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config validation error: {0}")]
    Invalid(String),
}

fn d_seed() -> u64 {
    12345
}
fn d_shots() -> usize {
    50
}
fn d_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn d_loss() -> f64 {
    0.10
}
fn d_leakage() -> f64 {
    0.02
}
fn d_n_phases() -> usize {
    16
}

/// Analysis-stage constants: the normalization applied to raw fringes and
/// the number of probe phases per fringe.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Atom-loss fraction divided out of raw fringes.
    pub loss: f64,
    /// F = 3 leakage floor subtracted after the loss correction.
    pub leakage: f64,
    /// Probe phases per fringe.
    pub n_phases: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { loss: d_loss(), leakage: d_leakage(), n_phases: d_n_phases() }
    }
}

/// Drift-stabilization parameters: imaging model, PID loop, and drift.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilizationConfig {
    pub psf: PsfParams,
    pub pid: PidState,
    pub drift: DriftState,
    pub control: LoopConfig,
}

/// The full, self-describing run configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// RNG seed; every output is a pure function of (config, seed).
    pub seed: u64,
    /// Monte Carlo shots per (site, setting).
    pub shots: usize,
    pub output_dir: PathBuf,
    pub lattice: LatticeConfig,
    pub beams: BeamParams,
    pub noise: NoiseParams,
    pub sequence: SequenceConfig,
    pub analysis: AnalysisConfig,
    pub stabilization: StabilizationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: d_seed(),
            shots: d_shots(),
            output_dir: d_output_dir(),
            lattice: LatticeConfig::default(),
            beams: BeamParams::default(),
            noise: NoiseParams::default(),
            sequence: SequenceConfig::default(),
            analysis: AnalysisConfig::default(),
            stabilization: StabilizationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            lattice: self.lattice,
            beam: self.beams,
            noise: self.noise,
            seq: self.sequence,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.shots == 0 {
            return Err(ConfigError::Invalid("shots must be at least 1".into()));
        }
        self.lattice
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("lattice.{e}")))?;
        self.noise
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("noise.{e}")))?;
        self.experiment()
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("sequence/beams: {e}")))?;
        if !(0.0..1.0).contains(&self.analysis.loss) {
            return Err(ConfigError::Invalid(format!(
                "analysis.loss must be in [0, 1), got {}",
                self.analysis.loss
            )));
        }
        if !(0.0..1.0).contains(&self.analysis.leakage) {
            return Err(ConfigError::Invalid(format!(
                "analysis.leakage must be in [0, 1), got {}",
                self.analysis.leakage
            )));
        }
        if self.analysis.n_phases < 5 {
            return Err(ConfigError::Invalid(format!(
                "analysis.n_phases must be at least 5, got {}",
                self.analysis.n_phases
            )));
        }
        let psf = &self.stabilization.psf;
        if !(psf.sigma0_um > 0.0) || !(psf.pixel_um > 0.0) || !(psf.plane_spacing_um > 0.0) {
            return Err(ConfigError::Invalid(
                "stabilization.psf: sigma0_um, pixel_um and plane_spacing_um must be > 0".into(),
            ));
        }
        if !(self.stabilization.pid.tau > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "stabilization.pid.tau must be > 0, got {}",
                self.stabilization.pid.tau
            )));
        }
        self.stabilization
            .drift
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("stabilization.drift: {e}")))?;
        Ok(())
    }
}

/// Load and validate the config. Precedence: explicit path, then the
/// `LATSIM_CONFIG` environment variable, then built-in defaults.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig, ConfigError> {
    let env_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
    let chosen: Option<PathBuf> = path.map(Path::to_path_buf).or(env_path);
    let cfg = match chosen {
        Some(p) => {
            let text =
                std::fs::read_to_string(&p).map_err(|e| ConfigError::Io(p.clone(), e))?;
            toml::from_str::<RunConfig>(&text)
                .map_err(|e| ConfigError::Parse(e.to_string()))?
        }
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_documented_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.lattice.spacing, 4.9);
        assert_eq!(cfg.beams.waist_w0, 2.7);
        assert_eq!(cfg.beams.rayleigh_zr, 26.0);
        assert_eq!(cfg.noise.t1, 7.4);
        assert!((cfg.noise.line_phase_kick - 0.35 * std::f64::consts::PI).abs() < 1e-12);
        assert_eq!(cfg.seed, 12345);
    }

    #[test]
    fn out_of_range_fill_rejected_with_key() {
        let cfg: RunConfig =
            toml::from_str("[lattice]\ndims = [5,5,5]\nspacing = 4.9\noccupancy_fill = 1.3\n")
                .unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("occupancy_fill"), "{err}");
        assert!(err.contains("1.3"), "{err}");
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let err = toml::from_str::<RunConfig>("[lattice]\nspacingg = 4.9\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("spacingg"), "{err}");
    }
}
