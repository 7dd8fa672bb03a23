//! Run configuration: an optional TOML file whose values are overridden by
//! command-line flags. Relative paths in the file resolve against the file's
//! directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spinforge::field_solver::SolveOptions;
use spinforge::pulse::{ErrorModel, PhaseCycleConfig};
use spinforge::spin_model::THETA_NV;
use spinforge::SpinSystemSpec;

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Spin-system JSON; the reference two-defect system when absent.
    pub system: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub field_solve: FieldSolveConfig,
    pub hyperfine_fit: HyperfineFitConfig,
    pub locate: LocateConfig,
    pub sedor: SedorConfig,
    pub ghz: GhzConfig,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSolveConfig {
    pub spectrum: Option<PathBuf>,
    /// Measured NV resonance, MHz.
    pub resonance: Option<f64>,
    pub options: SolveOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    #[default]
    Axial,
    /// Fits both models and reports the comparison.
    Full,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperfineFitConfig {
    pub data: Option<PathBuf>,
    pub model: ModelChoice,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocateConfig {
    pub data: Option<PathBuf>,
    /// nm.
    pub half_width: f64,
    /// nm.
    pub resolution: f64,
    /// Map cells below this fraction of the peak are left out of the CSV.
    pub csv_threshold: f64,
}

impl Default for LocateConfig {
    fn default() -> Self {
        Self {
            data: None,
            half_width: 12.0,
            resolution: 0.25,
            csv_threshold: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SedorConfig {
    pub b0: f64,
    pub theta: f64,
    pub phi: f64,
    /// Probe window, MHz. Both ends default to 2 MHz beyond the outermost
    /// lines.
    pub probe_start: Option<f64>,
    pub probe_stop: Option<f64>,
    pub probe_step: f64,
    /// Full width at half maximum, kHz.
    pub linewidth: f64,
}

impl Default for SedorConfig {
    fn default() -> Self {
        Self {
            b0: 171.8,
            theta: THETA_NV,
            phi: 0.0,
            probe_start: None,
            probe_stop: None,
            probe_step: 0.01,
            linewidth: 200.0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GhzConfig {
    pub protocol: PhaseCycleConfig,
    pub errors: ErrorModel,
    /// JSON pulse sequence applied to the maximally mixed state in place of
    /// the built-in initialization and entangler.
    pub sequence: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    #[default]
    Hyperfine,
    Dipolar,
    Eseem,
    TwoTone,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub kind: SynthKind,
    /// Defect label in the spin system (hyperfine, dipolar).
    pub defect: String,
    pub b0: f64,
    /// Tilt from the NV axis in the φ = 0 plane, degrees (eseem).
    pub tilt: f64,
    /// Absolute σ in MHz (hyperfine), relative σ (dipolar), absolute
    /// additive σ (two-tone).
    pub noise: f64,
    /// Adds the θ sweep at φ = 90° (hyperfine).
    pub third_plane: bool,
    pub two_tone: TwoToneConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            kind: SynthKind::Hyperfine,
            defect: "X1".into(),
            b0: 171.8,
            tilt: 10.0,
            noise: 0.0,
            third_plane: false,
            two_tone: TwoToneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoToneConfig {
    pub amplitude: f64,
    pub slow_khz: f64,
    pub slow_phase: f64,
    pub depth: f64,
    pub fast_mhz: f64,
    pub fast_phase: f64,
    pub offset: f64,
    /// µs.
    pub dwell: f64,
    pub points: usize,
}

impl Default for TwoToneConfig {
    fn default() -> Self {
        Self {
            amplitude: 1.0,
            slow_khz: 30.0,
            slow_phase: 0.0,
            depth: 0.3,
            fast_mhz: 1.5,
            fast_phase: 0.0,
            offset: 0.0,
            dwell: 0.1,
            points: 2000,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut self.system);
        fix(&mut self.out);
        fix(&mut self.field_solve.spectrum);
        fix(&mut self.hyperfine_fit.data);
        fix(&mut self.locate.data);
        fix(&mut self.ghz.sequence);
    }

    pub fn system(&self) -> Result<SpinSystemSpec, CliError> {
        match &self.system {
            Some(p) => {
                require_file(p)?;
                Ok(SpinSystemSpec::load(p)?)
            }
            None => Ok(SpinSystemSpec::reference()),
        }
    }
}

/// Fails with an input error unless `path` names an existing file.
pub fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::input(format!("{}: no such file", path.display())))
    }
}

pub fn required<T: Clone>(value: &Option<T>, what: &str) -> Result<T, CliError> {
    value.clone().ok_or_else(|| CliError::input(format!("missing {what}")))
}
