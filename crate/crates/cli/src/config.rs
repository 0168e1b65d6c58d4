use std::path::{Path, PathBuf};

use funquad::estimator::FitControls;
use funquad::simulate::{Estimator, SimConfig};
use funquad::{BasisConfig, Criterion, QForm};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::CliError;

/// Affine map applied to raw observation times before smoothing, by
/// default month indices 1..12 onto [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeMap {
    pub from: [f64; 2],
    pub to: [f64; 2],
}

impl Default for TimeMap {
    fn default() -> Self {
        TimeMap {
            from: [1.0, 12.0],
            to: [0.0, 1.0],
        }
    }
}

impl TimeMap {
    pub fn apply(&self, t: f64) -> f64 {
        self.to[0] + (t - self.from[0]) * (self.to[1] - self.to[0]) / (self.from[1] - self.from[0])
    }

    pub fn invert(&self, t: f64) -> f64 {
        self.from[0] + (t - self.to[0]) * (self.from[1] - self.from[0]) / (self.to[1] - self.to[0])
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] < r[1];
        if !ok(self.from) || !ok(self.to) {
            return Err(CliError::config("time_map ranges must be finite and increasing"));
        }
        Ok(())
    }
}

/// A long-format CSV with columns `subject_id,time,value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveFile {
    pub path: PathBuf,
    #[serde(default)]
    pub variable: Option<String>,
    /// Time domain in raw units; the observed range when absent.
    #[serde(default)]
    pub domain: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub predictor: CurveFile,
    pub response: CurveFile,
    #[serde(default)]
    pub time_map: Option<TimeMap>,
    pub predictor_basis: BasisConfig,
    pub response_basis: BasisConfig,
    /// Predictor smoothing roughness; GCV-selected when absent.
    #[serde(default)]
    pub roughness: Option<f64>,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_order")]
    pub penalty_order: usize,
    pub lambda: f64,
    #[serde(default)]
    pub controls: FitControls,
    #[serde(default = "default_surface_points")]
    pub surface_points: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectConfig {
    pub predictor: CurveFile,
    pub response: CurveFile,
    #[serde(default)]
    pub time_map: Option<TimeMap>,
    pub predictor_basis: BasisConfig,
    /// Template for the response basis; `M` is replaced by each grid value.
    pub response_basis: BasisConfig,
    #[serde(default)]
    pub roughness: Option<f64>,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_order")]
    pub penalty_order: usize,
    pub m_y_grid: Vec<usize>,
    pub lambda_grid: Vec<f64>,
    pub criterion: Criterion,
    #[serde(default)]
    pub q_form: QForm,
    #[serde(default)]
    pub controls: FitControls,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    pub model: PathBuf,
    pub predictor: CurveFile,
    #[serde(default)]
    pub time_map: Option<TimeMap>,
    /// Output times in raw units; an equally spaced grid over the response
    /// domain when absent.
    #[serde(default)]
    pub times: Option<Vec<f64>>,
    #[serde(default = "default_surface_points")]
    pub grid_points: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothConfig {
    pub data: CurveFile,
    #[serde(default)]
    pub time_map: Option<TimeMap>,
    pub basis: BasisConfig,
    #[serde(default)]
    pub roughness: Option<f64>,
    #[serde(default = "default_smooth_points")]
    pub grid_points: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default)]
    pub base: SimConfig,
    #[serde(default = "default_sample_sizes")]
    pub sample_sizes: Vec<usize>,
    #[serde(default = "default_noise_levels")]
    pub noise_levels: Vec<f64>,
    #[serde(default = "Estimator::all")]
    pub estimators: Vec<Estimator>,
}

fn default_order() -> usize {
    2
}

fn default_surface_points() -> usize {
    21
}

fn default_smooth_points() -> usize {
    101
}

fn default_sample_sizes() -> Vec<usize> {
    vec![50, 100, 200]
}

fn default_noise_levels() -> Vec<f64> {
    vec![0.3, 0.6]
}

/// Parse a JSON config and resolve relative paths against its directory.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<(T, PathBuf), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let cfg = serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, dir))
}

pub fn resolve(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}
