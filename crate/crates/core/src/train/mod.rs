//! Joint training of the coarse mesh and the correction network.
//!
//! Each step takes exact reverse-mode gradients for the network and, once the
//! warm-up epochs are over, a mesh gradient from the configured source
//! (frozen, central-difference reference, or one of the zeroth-order
//! estimators). Both parameter sets are updated with separate Adam states.

mod config;
mod loss;
mod sweep;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::error::{Error, Result};
use crate::grid::{mesh_to_params, params_to_mesh, Field, TensorMesh};
use crate::net::{init_params, NetCheckpoint};
use crate::optim::AdamState;
use crate::solver::{MeshSolver, PoissonSolver};

pub use config::{EstimatorSettings, MeshMode, TrainConfig};
pub use loss::{
    assemble_features, batch_gradients, loss_backward, loss_forward, loss_given_coarse, mesh_grad, rmse, BatchGrads,
    GroundTruth, HybridModel, LossCache, LossForward, ScenarioCotangent,
};
pub use sweep::{
    bd_csv, bd_sweep, dynamic_csv, dynamic_sweep, scale_csv, scale_sweep, BdRun, DynamicRecord, ScaleRun,
    DEFAULT_DYNAMIC_ITERATIONS,
};

pub const METRICS_HEADER: &str = "epoch,train_loss,test_rmse,n_solver_evals,mesh_delta,wall_time_s";
pub const INCOMPLETE_MARKER: &str = "# incomplete";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_rmse: f64,
    /// Cumulative coarse-solver calls.
    pub n_solver_evals: usize,
    /// Euclidean distance of the mesh coordinates from their initial values.
    pub mesh_delta: f64,
    pub wall_time: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.test_rmse, self.n_solver_evals, self.mesh_delta, self.wall_time
        )
    }
}

pub fn metrics_csv(metrics: &[EpochMetrics], complete: bool) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&m.csv_row());
        out.push('\n');
    }
    if !complete {
        out.push_str(INCOMPLETE_MARKER);
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshLines {
    pub x_lines: Vec<f64>,
    pub y_lines: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamStates {
    pub net: AdamState,
    pub mesh: AdamState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub mesh: MeshLines,
    pub net: NetCheckpoint,
    pub adam: AdamStates,
    pub epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: Checkpoint,
    pub model: HybridModel,
    /// Minimum test RMSE over epochs.
    pub best_test_rmse: f64,
}

impl TrainOutcome {
    pub fn final_metrics(&self) -> Option<&EpochMetrics> {
        self.metrics.last()
    }
}

/// Deterministic 64-bit mixer for per-step estimator seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_STREAM: u64 = 7;

/// Epoch-by-epoch training driver over a borrowed solver.
pub struct Trainer<'s, S: MeshSolver + ?Sized> {
    config: TrainConfig,
    solver: &'s S,
    truth: GroundTruth,
    model: HybridModel,
    init_mesh_params: Vec<f64>,
    net_adam: AdamState,
    mesh_adam: AdamState,
    shuffle_rng: ChaCha8Rng,
    epoch: usize,
    global_step: u64,
    n_evals: usize,
    skipped_steps: usize,
    metrics: Vec<EpochMetrics>,
    test_cache: Option<(Vec<f64>, Vec<Field>)>,
    clock: Clock,
}

impl<'s, S: MeshSolver + ?Sized> Trainer<'s, S> {
    pub fn new(config: TrainConfig, solver: &'s S) -> Result<Self> {
        config.validate()?;
        let mesh = config.initial_coarse_mesh()?;
        let net = init_params(&config.layer_dims, config.seed)?;
        let net_adam = AdamState::new(net.param_count(), config.lr);
        let mesh_adam = AdamState::new(mesh.param_dim(), config.effective_mesh_lr());
        Self::resume(config, solver, HybridModel::new(mesh, net), AdamStates { net: net_adam, mesh: mesh_adam })
    }

    /// Starts from an existing model and optimizer state.
    pub fn resume(config: TrainConfig, solver: &'s S, model: HybridModel, adam: AdamStates) -> Result<Self> {
        config.validate()?;
        if model.net.layer_dims != config.layer_dims {
            return Err(Error::config("model layer_dims differ from the configuration"));
        }
        if model.mesh.shape() != (config.coarse_n, config.coarse_n) {
            return Err(Error::config("model mesh size differs from coarse_n"));
        }
        if adam.net.m.len() != model.net.param_count() || adam.mesh.m.len() != model.mesh.param_dim() {
            return Err(Error::config("optimizer state does not match the model"));
        }
        let mut alphas = config.train_alphas.clone();
        alphas.extend(&config.test_alphas);
        let truth = GroundTruth::build(config.fine_mesh()?, &alphas)?;
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(SHUFFLE_STREAM);
        Ok(Self {
            init_mesh_params: mesh_to_params(&model.mesh),
            solver,
            truth,
            model,
            net_adam: adam.net,
            mesh_adam: adam.mesh,
            shuffle_rng,
            epoch: 0,
            global_step: 0,
            n_evals: 0,
            skipped_steps: 0,
            metrics: Vec::new(),
            test_cache: None,
            clock: Clock::now(),
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &HybridModel {
        &self.model
    }

    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }

    pub fn metrics(&self) -> &[EpochMetrics] {
        &self.metrics
    }

    pub fn n_solver_evals(&self) -> usize {
        self.n_evals
    }

    /// Optimizer steps dropped because a gradient was non-finite.
    pub fn skipped_steps(&self) -> usize {
        self.skipped_steps
    }

    pub fn adam_states(&self) -> AdamStates {
        AdamStates { net: self.net_adam.clone(), mesh: self.mesh_adam.clone() }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Mesh mode in force for the current epoch.
    pub fn current_mode(&self) -> MeshMode {
        if self.epoch < self.config.warm_start_epochs {
            MeshMode::Frozen
        } else {
            self.config.mesh_mode
        }
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<&EpochMetrics> {
        let mode = self.current_mode();
        let mut order = self.config.train_alphas.clone();
        order.shuffle(&mut self.shuffle_rng);
        let batch = self.config.effective_scenario_batch();
        let mut loss_sum = 0.0;
        for alphas in order.chunks(batch) {
            loss_sum += self.step(alphas, mode)?.iter().sum::<f64>();
        }
        let train_loss = loss_sum / order.len() as f64;
        let test_rmse = self.test_rmse()?;
        let mesh_delta = mesh_to_params(&self.model.mesh)
            .iter()
            .zip(&self.init_mesh_params)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let wall_time = if self.config.record_wall_time { self.clock.elapsed() } else { 0.0 };
        self.metrics.push(EpochMetrics {
            epoch: self.epoch,
            train_loss,
            test_rmse,
            n_solver_evals: self.n_evals,
            mesh_delta,
            wall_time,
        });
        self.epoch += 1;
        Ok(self.metrics.last().unwrap())
    }

    /// One optimizer step on a scenario batch; returns the per-scenario losses
    /// before the update.
    pub fn step(&mut self, alphas: &[f64], mode: MeshMode) -> Result<Vec<f64>> {
        self.truth.ensure(alphas)?;
        let grads = batch_gradients(&self.model, self.solver, &self.truth, alphas)?;
        self.n_evals += alphas.len();

        let mesh_update = if mode == MeshMode::Frozen {
            None
        } else {
            let items: Vec<ScenarioCotangent> = alphas
                .iter()
                .zip(&grads.coarse)
                .zip(&grads.v_coarse)
                .map(|((&alpha, base), v)| ScenarioCotangent { alpha, base, v })
                .collect();
            let dim = self.model.mesh.param_dim();
            let kind = mode.estimator_kind().unwrap_or(crate::zo::EstimatorKind::Coordinate);
            let seed = splitmix64(self.config.seed ^ splitmix64(self.global_step));
            let spec = self.config.estimator_spec(kind, dim, seed);
            let (g, evals) = mesh_grad(self.solver, mode, &self.model.mesh, &items, &spec, self.config.exact_step)?;
            self.n_evals += evals;
            Some(g)
        };
        self.global_step += 1;

        let mut theta = self.model.net.to_flat();
        match self.net_adam.step(&mut theta, &grads.theta) {
            Ok(()) => self.model.set_net_flat(&theta)?,
            Err(Error::NonFinite(_)) => self.skipped_steps += 1,
            Err(e) => return Err(e),
        }
        if let Some(g) = mesh_update {
            let mut m = mesh_to_params(&self.model.mesh);
            match self.mesh_adam.step(&mut m, &g) {
                Ok(()) => {
                    let mesh = params_to_mesh(&self.model.mesh, &m)?;
                    self.model.set_mesh(mesh);
                }
                Err(Error::NonFinite(_)) => self.skipped_steps += 1,
                Err(e) => return Err(e),
            }
        }
        Ok(grads.losses)
    }

    /// Coarse test solutions for the current mesh, re-solved only when the
    /// mesh has moved since the last evaluation.
    fn test_coarse(&mut self) -> Result<&[Field]> {
        let params = mesh_to_params(&self.model.mesh);
        let stale = self.test_cache.as_ref().is_none_or(|(p, _)| *p != params);
        if stale {
            let mesh = &self.model.mesh;
            let solver = self.solver;
            let alphas = &self.config.test_alphas;
            let fields = crate::par::map_indices(alphas.len(), |k| {
                solver.solve(mesh, crate::grid::ScenarioParams::new(alphas[k])?).map(|r| r.field)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            self.n_evals += alphas.len();
            self.test_cache = Some((params, fields));
        }
        Ok(&self.test_cache.as_ref().unwrap().1)
    }

    /// Pooled RMSE over all test scenarios; NaN when there is no test set.
    fn test_rmse(&mut self) -> Result<f64> {
        if self.config.test_alphas.is_empty() {
            return Ok(f64::NAN);
        }
        let alphas = self.config.test_alphas.clone();
        let coarse: Vec<Field> = self.test_coarse()?.to_vec();
        let mut sq = 0.0;
        let mut n = 0usize;
        for (alpha, c) in alphas.iter().zip(coarse) {
            let fwd = loss_given_coarse(&self.model, c, &self.truth, *alpha)?;
            let count = fwd.fine.values().len();
            sq += fwd.loss * count as f64;
            n += count;
        }
        Ok((sq / n as f64).sqrt())
    }

    /// Predicted and reference fine fields for one alpha.
    pub fn predict(&mut self, alpha: f64) -> Result<(Field, Field)> {
        self.truth.ensure(&[alpha])?;
        let cached = self
            .config
            .test_alphas
            .iter()
            .position(|&a| a == alpha)
            .filter(|_| self.test_cache.as_ref().is_some_and(|(p, _)| *p == mesh_to_params(&self.model.mesh)));
        let coarse = match cached {
            Some(k) => self.test_cache.as_ref().unwrap().1[k].clone(),
            None => {
                self.n_evals += 1;
                self.solver.solve(&self.model.mesh, crate::grid::ScenarioParams::new(alpha)?)?.field
            }
        };
        let fwd = loss_given_coarse(&self.model, coarse, &self.truth, alpha)?;
        let (nx, ny) = fwd.fine.shape();
        Ok((Field::new(nx, ny, fwd.cache.predictions())?, fwd.fine))
    }

    /// Training loss at one alpha for the current model (one coarse solve).
    pub fn evaluate_loss(&mut self, alpha: f64) -> Result<f64> {
        self.truth.ensure(&[alpha])?;
        self.n_evals += 1;
        Ok(loss_forward(&self.model, self.solver, &self.truth, alpha)?.loss)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            mesh: MeshLines {
                x_lines: self.model.mesh.x_lines().to_vec(),
                y_lines: self.model.mesh.y_lines().to_vec(),
            },
            net: self.model.net.to_checkpoint(),
            adam: self.adam_states(),
            epoch: self.epoch,
        }
    }

    pub fn outcome(&self) -> TrainOutcome {
        let best_test_rmse = self.metrics.iter().map(|m| m.test_rmse).fold(f64::INFINITY, f64::min);
        TrainOutcome {
            metrics: self.metrics.clone(),
            checkpoint: self.checkpoint(),
            model: self.model.clone(),
            best_test_rmse,
        }
    }

    /// Writes `metrics.csv`, `checkpoint.json` and, for a finished run, the
    /// predicted and reference field of every test alpha.
    pub fn write_outputs(&mut self, dir: &Path, complete: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), metrics_csv(&self.metrics, complete))?;
        if !complete {
            return Ok(());
        }
        fs::write(dir.join("checkpoint.json"), serde_json::to_string_pretty(&self.checkpoint())?)?;
        for alpha in self.config.test_alphas.clone() {
            let (pred, truth) = self.predict(alpha)?;
            fs::write(dir.join(format!("pred_alpha_{alpha}.csv")), pred.to_csv())?;
            fs::write(dir.join(format!("truth_alpha_{alpha}.csv")), truth.to_csv())?;
        }
        Ok(())
    }
}

/// Trains with the built-in Poisson solver.
pub fn train_run(config: TrainConfig) -> Result<TrainOutcome> {
    train_run_with(config, &PoissonSolver)
}

/// Trains against any solver. When `out_dir` is set, outputs are written at
/// the end, or partial metrics with an incomplete marker on failure.
pub fn train_run_with<S: MeshSolver + ?Sized>(config: TrainConfig, solver: &S) -> Result<TrainOutcome> {
    let out_dir = config.out_dir.clone();
    let mut trainer = Trainer::new(config, solver)?;
    if let Some(dir) = &out_dir {
        fs::create_dir_all(dir)?;
    }
    match trainer.run() {
        Ok(()) => {
            if let Some(dir) = &out_dir {
                trainer.write_outputs(dir, true)?;
            }
            Ok(trainer.outcome())
        }
        Err(e) => {
            if let Some(dir) = &out_dir {
                let _ = trainer.write_outputs(dir, false);
            }
            Err(e)
        }
    }
}

pub(crate) fn push_csv_line(out: &mut String, prefix: &str, m: &EpochMetrics) {
    writeln!(out, "{prefix}{}", m.csv_row()).unwrap();
}

/// Rebuilds a model from a checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<HybridModel> {
    let mesh = TensorMesh::with_min_gap(ck.mesh.x_lines.clone(), ck.mesh.y_lines.clone(), ck.config.min_gap)?;
    let net = crate::net::MlpParams::from_checkpoint(&ck.net)?;
    Ok(HybridModel::new(mesh, net))
}

#[cfg(test)]
mod tests;
