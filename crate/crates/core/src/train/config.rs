use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{init_coarse_from_fine, TensorMesh, DEFAULT_MIN_GAP};
use crate::net::{DEFAULT_LAYER_DIMS, FEATURE_WIDTH};
use crate::optim::DEFAULT_LR;
use crate::zo::{EstimatorKind, EstimatorSpec};

/// How the coarse mesh coordinates receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshMode {
    Frozen,
    Exact,
    Coordinate,
    Gaussian,
    GaussCoord,
}

impl MeshMode {
    pub const ALL: [MeshMode; 5] =
        [MeshMode::Frozen, MeshMode::Exact, MeshMode::Coordinate, MeshMode::Gaussian, MeshMode::GaussCoord];

    pub fn estimator_kind(self) -> Option<EstimatorKind> {
        match self {
            MeshMode::Coordinate => Some(EstimatorKind::Coordinate),
            MeshMode::Gaussian => Some(EstimatorKind::Gaussian),
            MeshMode::GaussCoord => Some(EstimatorKind::GaussCoord),
            MeshMode::Frozen | MeshMode::Exact => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MeshMode::Frozen => "frozen",
            MeshMode::Exact => "exact",
            MeshMode::Coordinate => "coordinate",
            MeshMode::Gaussian => "gaussian",
            MeshMode::GaussCoord => "gauss_coord",
        }
    }
}

impl std::str::FromStr for MeshMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MeshMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown mesh mode {s:?}")))
    }
}

/// Estimator hyperparameters; the kind follows the mesh mode and the seed is
/// derived per step from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSettings {
    pub mu: f64,
    pub b: usize,
    pub d: usize,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        let spec = EstimatorSpec::default();
        Self { mu: spec.mu, b: spec.b, d: spec.d }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub fine_n: usize,
    pub coarse_n: usize,
    pub train_alphas: Vec<f64>,
    pub test_alphas: Vec<f64>,
    pub mesh_mode: MeshMode,
    pub estimator: EstimatorSettings,
    /// Scenarios per optimizer step; `None` means `min(16, |train_alphas|)`.
    pub scenario_batch: Option<usize>,
    pub epochs: usize,
    pub warm_start_epochs: usize,
    pub lr: f64,
    /// Mesh learning rate; `None` reuses `lr`.
    pub mesh_lr: Option<f64>,
    pub layer_dims: Vec<usize>,
    /// Step of the central-difference reference gradient in `exact` mode.
    pub exact_step: f64,
    pub min_gap: f64,
    pub seed: u64,
    /// Off by default so repeated runs produce byte-identical metrics.
    pub record_wall_time: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            fine_n: 33,
            coarse_n: 9,
            train_alphas: vec![0.90, 0.91, 0.92, 0.93, 0.94, 0.95],
            test_alphas: vec![0.905, 0.925, 0.945],
            mesh_mode: MeshMode::GaussCoord,
            estimator: EstimatorSettings::default(),
            scenario_batch: None,
            epochs: 200,
            warm_start_epochs: 50,
            lr: DEFAULT_LR,
            mesh_lr: None,
            layer_dims: DEFAULT_LAYER_DIMS.to_vec(),
            exact_step: crate::solver::oracle::DEFAULT_STEP,
            min_gap: DEFAULT_MIN_GAP,
            seed: 0,
            record_wall_time: false,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    /// Long schedule: 300 frozen warm-up epochs, 16 scenarios per step.
    pub fn full_schedule() -> Self {
        Self { warm_start_epochs: 300, epochs: 500, scenario_batch: Some(16), ..Self::default() }
    }

    pub fn effective_scenario_batch(&self) -> usize {
        self.scenario_batch.unwrap_or_else(|| self.train_alphas.len().min(16)).max(1)
    }

    pub fn effective_mesh_lr(&self) -> f64 {
        self.mesh_lr.unwrap_or(self.lr)
    }

    pub fn validate(&self) -> Result<()> {
        if self.coarse_n < 3 || self.fine_n < 3 {
            return Err(Error::config("mesh sizes must be at least 3 per axis"));
        }
        if self.coarse_n >= self.fine_n {
            return Err(Error::config(format!(
                "coarse_n ({}) must be smaller than fine_n ({})",
                self.coarse_n, self.fine_n
            )));
        }
        if self.train_alphas.is_empty() {
            return Err(Error::config("train_alphas must not be empty"));
        }
        for &a in self.train_alphas.iter().chain(&self.test_alphas) {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::config(format!("alpha values must be positive, got {a}")));
            }
        }
        if let Some(a) = self.test_alphas.iter().find(|a| self.train_alphas.contains(a)) {
            return Err(Error::config(format!("alpha {a} appears in both train and test sets")));
        }
        if self.warm_start_epochs > self.epochs {
            return Err(Error::config(format!(
                "warm_start_epochs ({}) exceeds epochs ({})",
                self.warm_start_epochs, self.epochs
            )));
        }
        if self.scenario_batch == Some(0) {
            return Err(Error::config("scenario_batch must be at least 1"));
        }
        for (name, v) in [("lr", self.lr), ("mesh_lr", self.effective_mesh_lr()), ("exact_step", self.exact_step)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        let est = &self.estimator;
        if !(est.mu > 0.0 && est.mu.is_finite()) || est.b < 1 || est.d < 1 {
            return Err(Error::config(format!("invalid estimator settings {est:?}")));
        }
        if self.layer_dims.first() != Some(&FEATURE_WIDTH) || self.layer_dims.last() != Some(&1) {
            return Err(Error::config(format!(
                "layer_dims must start with {FEATURE_WIDTH} and end with 1, got {:?}",
                self.layer_dims
            )));
        }
        if self.layer_dims.iter().any(|&d| d < 1) {
            return Err(Error::config("layer sizes must be at least 1"));
        }
        if !(self.min_gap > 0.0) || self.min_gap * (self.coarse_n - 1) as f64 >= 1.0 {
            return Err(Error::config(format!("min_gap {} is infeasible for coarse_n {}", self.min_gap, self.coarse_n)));
        }
        Ok(())
    }

    /// Initial coarse mesh: fine lines subsampled at a fixed stride, or
    /// uniform lines when the stride does not divide.
    pub fn initial_coarse_mesh(&self) -> Result<TensorMesh> {
        let base = match init_coarse_from_fine(self.fine_n, self.fine_n, self.coarse_n, self.coarse_n) {
            Ok(m) => m,
            Err(Error::Config(_)) => TensorMesh::uniform(self.coarse_n, self.coarse_n)?,
            Err(e) => return Err(e),
        };
        TensorMesh::with_min_gap(base.x_lines().to_vec(), base.y_lines().to_vec(), self.min_gap)
    }

    pub fn fine_mesh(&self) -> Result<TensorMesh> {
        TensorMesh::uniform(self.fine_n, self.fine_n)
    }

    /// Estimator spec for one step, with `d` clipped to the mesh dimension.
    pub fn estimator_spec(&self, kind: EstimatorKind, dim: usize, seed: u64) -> EstimatorSpec {
        EstimatorSpec {
            kind,
            mu: self.estimator.mu,
            b: self.estimator.b,
            d: self.estimator.d.min(dim).max(1),
            seed,
        }
    }
}
