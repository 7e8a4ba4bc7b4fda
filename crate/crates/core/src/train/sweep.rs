//! Experiment sweeps: coarse-mesh scale, estimator batch/subset grid, and a
//! drifting-alpha series with warm-started joint optimization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::init_params;
use crate::optim::AdamState;
use crate::solver::{MeshSolver, PoissonSolver};

use super::{push_csv_line, train_run_with, AdamStates, HybridModel, MeshMode, TrainConfig, TrainOutcome, Trainer, METRICS_HEADER};

pub const DEFAULT_DYNAMIC_ITERATIONS: usize = 50;

#[derive(Debug, Clone)]
pub struct ScaleRun {
    pub coarse_n: usize,
    pub fine_n: usize,
    pub outcome: TrainOutcome,
}

/// One training run per `(coarse_n, fine_n)`, all with the same seed, in the
/// order given.
pub fn scale_sweep(config: &TrainConfig, scales: &[(usize, usize)]) -> Result<Vec<ScaleRun>> {
    if scales.is_empty() {
        return Err(Error::config("scale sweep needs at least one scale"));
    }
    let runs = crate::par::map_indices(scales.len(), |k| {
        let (coarse_n, fine_n) = scales[k];
        let cfg = TrainConfig { coarse_n, fine_n, out_dir: None, ..config.clone() };
        train_run_with(cfg, &PoissonSolver).map(|outcome| ScaleRun { coarse_n, fine_n, outcome })
    });
    runs.into_iter().collect()
}

pub fn scale_csv(runs: &[ScaleRun]) -> String {
    let mut out = format!("coarse_n,fine_n,{METRICS_HEADER}\n");
    for r in runs {
        for m in &r.outcome.metrics {
            push_csv_line(&mut out, &format!("{},{},", r.coarse_n, r.fine_n), m);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct BdRun {
    pub b: usize,
    pub d: usize,
    pub outcome: TrainOutcome,
}

/// Gauss-coordinate training for every `(b, d)` pair.
pub fn bd_sweep(config: &TrainConfig, bs: &[usize], ds: &[usize]) -> Result<Vec<BdRun>> {
    let grid: Vec<(usize, usize)> = bs.iter().flat_map(|&b| ds.iter().map(move |&d| (b, d))).collect();
    if grid.is_empty() {
        return Err(Error::config("b/d sweep needs at least one b and one d"));
    }
    let runs = crate::par::map_indices(grid.len(), |k| {
        let (b, d) = grid[k];
        let mut cfg = TrainConfig { mesh_mode: MeshMode::GaussCoord, out_dir: None, ..config.clone() };
        cfg.estimator.b = b;
        cfg.estimator.d = d;
        train_run_with(cfg, &PoissonSolver).map(|outcome| BdRun { b, d, outcome })
    });
    runs.into_iter().collect()
}

/// Rows grouped by epoch, then by `(b, d)` in sweep order.
pub fn bd_csv(runs: &[BdRun]) -> String {
    let mut out = format!("b,d,{METRICS_HEADER}\n");
    let epochs = runs.iter().map(|r| r.outcome.metrics.len()).max().unwrap_or(0);
    for e in 0..epochs {
        for r in runs {
            if let Some(m) = r.outcome.metrics.get(e) {
                push_csv_line(&mut out, &format!("{},{},", r.b, r.d), m);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicRecord {
    pub step: usize,
    pub alpha: f64,
    /// Loss of the carried-over model before optimizing at this alpha.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss of a freshly initialised model at this alpha.
    pub cold_initial_loss: f64,
    pub n_solver_evals: usize,
}

/// For each alpha in turn, runs `iterations` joint steps on that alpha alone,
/// starting from the model and optimizer state left by the previous alpha.
/// Step `t` uses seed `config.seed + t`; warm-up epochs are not applied.
pub fn dynamic_sweep(config: &TrainConfig, alpha_series: &[f64], iterations: usize) -> Result<Vec<DynamicRecord>> {
    dynamic_sweep_with(config, alpha_series, iterations, &PoissonSolver)
}

pub fn dynamic_sweep_with<S: MeshSolver + ?Sized>(
    config: &TrainConfig,
    alpha_series: &[f64],
    iterations: usize,
    solver: &S,
) -> Result<Vec<DynamicRecord>> {
    if alpha_series.is_empty() || iterations == 0 {
        return Err(Error::config("dynamic sweep needs a non-empty alpha series and at least one iteration"));
    }
    let cold_mesh = config.initial_coarse_mesh()?;
    let cold_net = init_params(&config.layer_dims, config.seed)?;
    let mut state: Option<(HybridModel, AdamStates)> = None;
    let mut total_evals = 0;
    let mut records = Vec::with_capacity(alpha_series.len());
    for (t, &alpha) in alpha_series.iter().enumerate() {
        let cfg = TrainConfig {
            train_alphas: vec![alpha],
            test_alphas: vec![],
            epochs: iterations,
            warm_start_epochs: 0,
            scenario_batch: Some(1),
            seed: config.seed.wrapping_add(t as u64),
            out_dir: None,
            ..config.clone()
        };
        let (model, adam) = match state.take() {
            Some(s) => s,
            None => (
                HybridModel::new(cold_mesh.clone(), cold_net.clone()),
                AdamStates {
                    net: AdamState::new(cold_net.param_count(), cfg.lr),
                    mesh: AdamState::new(cold_mesh.param_dim(), cfg.effective_mesh_lr()),
                },
            ),
        };
        let mut cold = Trainer::new(TrainConfig { seed: config.seed, ..cfg.clone() }, solver)?;
        let cold_initial_loss = cold.evaluate_loss(alpha)?;
        total_evals += cold.n_solver_evals();

        let mut trainer = Trainer::resume(cfg, solver, model, adam)?;
        let initial_loss = trainer.evaluate_loss(alpha)?;
        trainer.run()?;
        let final_loss = trainer.evaluate_loss(alpha)?;
        total_evals += trainer.n_solver_evals();
        records.push(DynamicRecord {
            step: t,
            alpha,
            initial_loss,
            final_loss,
            cold_initial_loss,
            n_solver_evals: total_evals,
        });
        state = Some((trainer.model().clone(), trainer.adam_states()));
    }
    Ok(records)
}

pub fn dynamic_csv(records: &[DynamicRecord]) -> String {
    let mut out = String::from("step,alpha,initial_loss,final_loss,cold_initial_loss,n_solver_evals\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.alpha, r.initial_loss, r.final_loss, r.cold_initial_loss, r.n_solver_evals
        ));
    }
    out
}
