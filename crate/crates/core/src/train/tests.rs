use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::Array2;

use super::*;
use crate::grid::{nearest_upsample, upsample_adjoint, ScenarioParams};
use crate::net::{forward, MlpParams, UP_COLUMN};
use crate::solver::{solve_poisson, CountingSolver, SolveReport};
use crate::zo::{EstimatorKind, EstimatorSpec};

fn small_config(mode: MeshMode) -> TrainConfig {
    TrainConfig {
        fine_n: 17,
        coarse_n: 5,
        mesh_mode: mode,
        epochs: 3,
        warm_start_epochs: 0,
        lr: 1e-3,
        layer_dims: vec![4, 8, 1],
        scenario_batch: Some(2),
        ..TrainConfig::default()
    }
}

fn pass_through_net() -> MlpParams {
    let mut net = MlpParams::zeros(&[4, 1]).unwrap();
    net.weights[0][(0, UP_COLUMN)] = 1.0;
    net
}

fn truth_on(mesh: &TensorMesh, alphas: &[f64]) -> GroundTruth {
    GroundTruth::build(mesh.clone(), alphas).unwrap()
}

#[test]
fn pass_through_on_fine_mesh_has_zero_loss() {
    let fine = TensorMesh::uniform(9, 9).unwrap();
    let truth = truth_on(&fine, &[0.9]);
    let model = HybridModel::new(fine.clone(), pass_through_net());
    let fwd = loss_forward(&model, &PoissonSolver, &truth, 0.9).unwrap();
    assert_eq!(fwd.loss, 0.0);
    let (_, v) = loss_backward(&model, &fwd.cache).unwrap();
    assert!(v.values().iter().all(|&x| x == 0.0));
}

#[test]
fn zero_network_loss_is_mean_square_target() {
    let fine = TensorMesh::uniform(17, 17).unwrap();
    let truth = truth_on(&fine, &[0.92]);
    let model = HybridModel::new(TensorMesh::uniform(5, 5).unwrap(), MlpParams::zeros(&[4, 8, 1]).unwrap());
    let fwd = loss_forward(&model, &PoissonSolver, &truth, 0.92).unwrap();
    let target = truth.get(0.92).unwrap();
    let expect = target.values().iter().map(|x| x * x).sum::<f64>() / target.values().len() as f64;
    assert!(expect > 0.0);
    assert_eq!(fwd.loss, expect);
}

/// Straight-line recomputation: brute-force nearest node, scalar network.
fn recompute_loss(mesh: &TensorMesh, net: &MlpParams, alpha: f64, fine_n: usize) -> f64 {
    let coarse = solve_poisson(mesh, ScenarioParams::new(alpha).unwrap()).unwrap().field;
    let fine = TensorMesh::uniform(fine_n, fine_n).unwrap();
    let target = solve_poisson(&fine, ScenarioParams::new(alpha).unwrap()).unwrap().field;
    let mut total = 0.0;
    for j in 0..fine_n {
        for i in 0..fine_n {
            let (x, y) = fine.node(i, j);
            let mut best = (f64::INFINITY, 0.0);
            for cj in 0..mesh.ny() {
                for ci in 0..mesh.nx() {
                    let (cx, cy) = mesh.node(ci, cj);
                    let d = (x - cx).powi(2) + (y - cy).powi(2);
                    if d < best.0 {
                        best = (d, coarse.get(ci, cj));
                    }
                }
            }
            let mut a = vec![x, y, best.1, alpha];
            for l in 0..net.num_layers() {
                let (out, inp) = net.weights[l].dim();
                a = (0..out)
                    .map(|o| {
                        let z = net.biases[l][o] + (0..inp).map(|k| net.weights[l][(o, k)] * a[k]).sum::<f64>();
                        if l + 1 < net.num_layers() {
                            z.tanh()
                        } else {
                            z
                        }
                    })
                    .collect();
            }
            total += (a[0] - target.get(i, j)).powi(2);
        }
    }
    total / (fine_n * fine_n) as f64
}

fn skewed_mesh() -> TensorMesh {
    TensorMesh::new(vec![0.0, 0.2, 0.45, 0.8, 1.0], vec![0.0, 0.3, 0.5, 0.65, 1.0]).unwrap()
}

#[test]
fn loss_matches_recomputation() {
    let mesh = skewed_mesh();
    let net = init_params(&[4, 8, 8, 1], 3).unwrap();
    let truth = truth_on(&TensorMesh::uniform(17, 17).unwrap(), &[0.93]);
    let model = HybridModel::new(mesh.clone(), net.clone());
    let fwd = loss_forward(&model, &PoissonSolver, &truth, 0.93).unwrap();
    let oracle = recompute_loss(&mesh, &net, 0.93, 17);
    assert!((fwd.loss - oracle).abs() <= 1e-12 * oracle.max(1.0), "{} vs {oracle}", fwd.loss);
}

#[test]
fn pass_through_cotangent_is_mse_derivative() {
    let mesh = skewed_mesh();
    let fine = TensorMesh::uniform(17, 17).unwrap();
    let truth = truth_on(&fine, &[0.9]);
    let model = HybridModel::new(mesh.clone(), pass_through_net());
    let fwd = loss_forward(&model, &PoissonSolver, &truth, 0.9).unwrap();
    let (_, v) = loss_backward(&model, &fwd.cache).unwrap();
    let up = nearest_upsample(&mesh, &fwd.coarse, &fine).unwrap();
    let n = fine.node_count() as f64;
    let ct: Vec<f64> = up.values().iter().zip(fwd.fine.values()).map(|(u, t)| 2.0 * (u - t) / n).collect();
    let expect = upsample_adjoint(&mesh, &fine, &Field::new(17, 17, ct).unwrap()).unwrap();
    for (a, b) in v.values().iter().zip(expect.values()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn coarse_cotangent_matches_directional_difference() {
    let mesh = skewed_mesh();
    let truth = truth_on(&TensorMesh::uniform(17, 17).unwrap(), &[0.91]);
    let model = HybridModel::new(mesh.clone(), init_params(&[4, 16, 1], 5).unwrap());
    let fwd = loss_forward(&model, &PoissonSolver, &truth, 0.91).unwrap();
    let (_, v) = loss_backward(&model, &fwd.cache).unwrap();
    let delta: Vec<f64> = (0..25).map(|k| ((k * 37 % 11) as f64 - 5.0) / 5.0).collect();
    let eps = 1e-6;
    let shifted: Vec<f64> = fwd.coarse.values().iter().zip(&delta).map(|(c, d)| c + eps * d).collect();
    let moved = loss_given_coarse(&model, Field::new(5, 5, shifted).unwrap(), &truth, 0.91).unwrap();
    let fd = (moved.loss - fwd.loss) / eps;
    let analytic: f64 = v.values().iter().zip(&delta).map(|(a, b)| a * b).sum();
    assert!((fd - analytic).abs() <= 1e-4 * analytic.abs(), "{fd} vs {analytic}");
}

#[test]
fn stale_cache_is_rejected() {
    let truth = truth_on(&TensorMesh::uniform(9, 9).unwrap(), &[0.9]);
    let mut model = HybridModel::new(TensorMesh::uniform(3, 3).unwrap(), init_params(&[4, 1], 0).unwrap());
    let fwd = loss_forward(&model, &PoissonSolver, &truth, 0.9).unwrap();
    let flat = model.net.to_flat();
    model.set_net_flat(&flat).unwrap();
    assert!(matches!(loss_backward(&model, &fwd.cache), Err(Error::Usage(_))));
}

#[test]
fn rmse_examples() {
    let a = Field::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(rmse(&a, &a).unwrap(), 0.0);
    let b = Field::new(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
    assert_eq!(rmse(&b, &a).unwrap(), 2.0);
    let c = Field::new(2, 2, vec![0.3, -1.0, 2.5, 0.0]).unwrap();
    let manual = ((0.7f64.powi(2) + 9.0 + 0.25 + 16.0) / 4.0).sqrt();
    assert!((rmse(&c, &a).unwrap() - manual).abs() < 1e-12);
    assert!(rmse(&a, &Field::zeros(1, 4)).is_err());
}

/// Solver stand-in whose output is a fixed quadratic in the mesh coordinates.
struct QuadraticSolver;

impl MeshSolver for QuadraticSolver {
    fn solve(&self, mesh: &TensorMesh, scenario: ScenarioParams) -> crate::Result<SolveReport> {
        let p = mesh_to_params(mesh);
        let n = mesh.node_count();
        let values = (0..n)
            .map(|k| {
                p.iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let c = ((k + 3 * i) % 7) as f64 - 3.0;
                        c * x + 0.5 * (1.0 + ((k + i) % 3) as f64) * x * x
                    })
                    .sum::<f64>()
                    * scenario.alpha()
            })
            .collect();
        Ok(SolveReport { field: Field::new(mesh.nx(), mesh.ny(), values)?, residual_norm: 0.0, solve_time: 0.0 })
    }
}

#[test]
fn mesh_grad_modes() {
    let mesh = skewed_mesh();
    let dim = mesh.param_dim();
    let base = QuadraticSolver.solve(&mesh, ScenarioParams::new(1.0).unwrap()).unwrap().field;
    let v = Field::new(5, 5, (0..25).map(|k| (k as f64 * 0.37).sin()).collect()).unwrap();
    let items = [ScenarioCotangent { alpha: 1.0, base: &base, v: &v }];
    let spec = EstimatorSpec::new(EstimatorKind::Coordinate).with_batch(dim);

    let (g, n) = mesh_grad(&QuadraticSolver, MeshMode::Frozen, &mesh, &items, &spec, 1e-6).unwrap();
    assert_eq!((g, n), (vec![0.0; dim], 0));

    let (exact, n) = mesh_grad(&QuadraticSolver, MeshMode::Exact, &mesh, &items, &spec, 1e-6).unwrap();
    assert_eq!(n, 2 * dim);
    let (coord, n) = mesh_grad(&QuadraticSolver, MeshMode::Coordinate, &mesh, &items, &spec, 1e-6).unwrap();
    assert_eq!(n, dim);
    let scaled: Vec<f64> = exact.iter().map(|x| x / dim as f64).collect();
    let dot: f64 = coord.iter().zip(&scaled).map(|(a, b)| a * b).sum();
    let cos = dot / (coord.iter().map(|x| x * x).sum::<f64>().sqrt() * scaled.iter().map(|x| x * x).sum::<f64>().sqrt());
    assert!(cos > 0.99, "cosine {cos}");

    let wrong = EstimatorSpec::new(EstimatorKind::Gaussian);
    assert!(mesh_grad(&QuadraticSolver, MeshMode::Coordinate, &mesh, &items, &wrong, 1e-6).is_err());
}

#[test]
fn exact_mode_budget_on_small_mesh() {
    let mesh = TensorMesh::uniform(3, 3).unwrap();
    let s = ScenarioParams::new(1.0).unwrap();
    let base = solve_poisson(&mesh, s).unwrap().field;
    let v = Field::new(3, 3, vec![1.0; 9]).unwrap();
    let items = [ScenarioCotangent { alpha: 1.0, base: &base, v: &v }];
    let solver = CountingSolver::new(PoissonSolver);
    let spec = EstimatorSpec::new(EstimatorKind::Coordinate);
    let (_, n) = mesh_grad(&solver, MeshMode::Exact, &mesh, &items, &spec, 1e-6).unwrap();
    assert_eq!(n, 4);
    assert_eq!(solver.calls(), 4);
}

#[test]
fn frozen_run_keeps_mesh_and_counts_solves() {
    let cfg = small_config(MeshMode::Frozen);
    let out = train_run(cfg.clone()).unwrap();
    assert_eq!(out.model.mesh, cfg.initial_coarse_mesh().unwrap());
    assert_eq!(out.metrics.len(), 3);
    let last = out.final_metrics().unwrap();
    assert_eq!(last.n_solver_evals, 6 * 3 + 3);
    assert_eq!(last.mesh_delta, 0.0);
}

#[test]
fn full_warm_start_equals_frozen() {
    let frozen = train_run(small_config(MeshMode::Frozen)).unwrap();
    let warm = train_run(TrainConfig { warm_start_epochs: 3, ..small_config(MeshMode::Gaussian) }).unwrap();
    assert_eq!(frozen.metrics, warm.metrics);
    assert_eq!(frozen.model, warm.model);
}

#[test]
fn warm_start_never_moves_mesh() {
    let cfg = TrainConfig { warm_start_epochs: 2, epochs: 3, ..small_config(MeshMode::Coordinate) };
    let mut trainer = Trainer::new(cfg.clone(), &PoissonSolver).unwrap();
    let init = trainer.model().mesh.clone();
    trainer.run_epoch().unwrap();
    trainer.run_epoch().unwrap();
    assert_eq!(trainer.model().mesh, init);
    trainer.run_epoch().unwrap();
    assert_ne!(trainer.model().mesh, init);
}

#[test]
fn frozen_trajectory_ignores_estimator_settings() {
    let a = train_run(small_config(MeshMode::Frozen)).unwrap();
    let mut cfg = small_config(MeshMode::Frozen);
    cfg.estimator = EstimatorSettings { mu: 0.3, b: 5, d: 2 };
    let b = train_run(cfg).unwrap();
    assert_eq!(a.model.net, b.model.net);
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn runs_are_deterministic() {
    let cfg = small_config(MeshMode::GaussCoord);
    let a = train_run(cfg.clone()).unwrap();
    let b = train_run(cfg).unwrap();
    assert_eq!(metrics_csv(&a.metrics, true), metrics_csv(&b.metrics, true));
    assert_eq!(a.checkpoint, b.checkpoint);
}

#[test]
fn batch_gradient_is_mean_of_scenarios() {
    let cfg = small_config(MeshMode::Frozen);
    let truth = GroundTruth::build(cfg.fine_mesh().unwrap(), &[0.9, 0.95]).unwrap();
    let model = HybridModel::new(cfg.initial_coarse_mesh().unwrap(), init_params(&cfg.layer_dims, 1).unwrap());
    let both = batch_gradients(&model, &PoissonSolver, &truth, &[0.9, 0.95]).unwrap();
    let g1 = batch_gradients(&model, &PoissonSolver, &truth, &[0.9]).unwrap();
    let g2 = batch_gradients(&model, &PoissonSolver, &truth, &[0.95]).unwrap();
    for k in 0..both.theta.len() {
        assert_eq!(both.theta[k], (g1.theta[k] + g2.theta[k]) / 2.0);
    }
    for (v, v1) in both.v_coarse[0].values().iter().zip(g1.v_coarse[0].values()) {
        assert_eq!(*v, v1 * 0.5);
    }
}

#[test]
fn solver_calls_match_reported_budget() {
    for mode in MeshMode::ALL {
        let mut cfg = TrainConfig { warm_start_epochs: 1, ..small_config(mode) };
        cfg.estimator.b = 3;
        cfg.estimator.d = 4;
        let solver = CountingSolver::new(PoissonSolver);
        let out = train_run_with(cfg.clone(), &solver).unwrap();
        let reported = out.final_metrics().unwrap().n_solver_evals;
        assert_eq!(solver.calls(), reported, "{mode:?}");

        // base solves + per-step mesh budget + test solves whenever the mesh moved
        let dim = cfg.initial_coarse_mesh().unwrap().param_dim();
        let per_scenario = match mode {
            MeshMode::Frozen => 0,
            MeshMode::Exact => 2 * dim,
            _ => 3,
        };
        let active_epochs = cfg.epochs - cfg.warm_start_epochs;
        let test_solves = if mode == MeshMode::Frozen { 3 } else { 3 * (1 + active_epochs) };
        let expected = 6 * cfg.epochs + 6 * per_scenario * active_epochs + test_solves;
        assert_eq!(reported, expected, "{mode:?}");
    }
}

#[test]
fn epoch_metrics_are_monotone_in_evals() {
    let out = train_run(small_config(MeshMode::Exact)).unwrap();
    for w in out.metrics.windows(2) {
        assert!(w[1].n_solver_evals >= w[0].n_solver_evals);
    }
}

/// Fails every call after the first `limit`.
struct FlakySolver {
    limit: usize,
    calls: AtomicUsize,
}

impl MeshSolver for FlakySolver {
    fn solve(&self, mesh: &TensorMesh, scenario: ScenarioParams) -> crate::Result<SolveReport> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.limit {
            return Err(Error::Solver { message: "injected".into(), residual: 1.0 });
        }
        solve_poisson(mesh, scenario)
    }
}

#[test]
fn failure_flushes_partial_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { out_dir: Some(dir.path().to_path_buf()), ..small_config(MeshMode::Frozen) };
    let solver = FlakySolver { limit: 10, calls: AtomicUsize::new(0) };
    let err = train_run_with(cfg, &solver).unwrap_err();
    assert!(matches!(err, Error::Solver { .. }));
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(text.starts_with(METRICS_HEADER));
    assert_eq!(text.lines().last().unwrap(), INCOMPLETE_MARKER);
    assert_eq!(text.lines().count(), 2 + 1);
}

#[test]
fn outputs_written_for_finished_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { out_dir: Some(dir.path().to_path_buf()), epochs: 1, ..small_config(MeshMode::Frozen) };
    train_run(cfg).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
    let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(dir.path().join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ck.epoch, 1);
    let model = model_from_checkpoint(&ck).unwrap();
    assert_eq!(model.mesh.nx(), 5);
    let pred = Field::from_csv(&std::fs::read_to_string(dir.path().join("pred_alpha_0.905.csv")).unwrap()).unwrap();
    assert_eq!(pred.shape(), (17, 17));
    assert!(dir.path().join("truth_alpha_0.945.csv").exists());
}

#[test]
fn scale_sweep_single_scale_and_order() {
    let cfg = TrainConfig { epochs: 2, ..small_config(MeshMode::Coordinate) };
    let plain = train_run(cfg.clone()).unwrap();
    let one = scale_sweep(&cfg, &[(5, 17)]).unwrap();
    assert_eq!(one[0].outcome.metrics, plain.metrics);
    let many = scale_sweep(&cfg, &[(9, 17), (3, 17), (5, 17)]).unwrap();
    let order: Vec<usize> = many.iter().map(|r| r.coarse_n).collect();
    assert_eq!(order, vec![9, 3, 5]);
    let csv = scale_csv(&many);
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
}

#[test]
fn bd_sweep_grid_rows() {
    let cfg = TrainConfig { epochs: 2, fine_n: 9, coarse_n: 5, ..small_config(MeshMode::GaussCoord) };
    let runs = bd_sweep(&cfg, &[1, 2, 4, 8], &[4, 8, 16]).unwrap();
    assert_eq!(runs.len(), 12);
    let csv = bd_csv(&runs);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 24);
    assert!(rows[..12].iter().all(|r| r.split(',').nth(2) == Some("0")));
}

#[test]
fn dynamic_sweep_shapes_and_single_step() {
    let cfg = TrainConfig { fine_n: 9, coarse_n: 5, ..small_config(MeshMode::GaussCoord) };
    let series = [0.5, 0.6, 0.7, 0.8, 0.9];
    let recs = dynamic_sweep(&cfg, &series, 4).unwrap();
    assert_eq!(recs.len(), 5);
    assert!(recs.windows(2).all(|w| w[1].n_solver_evals > w[0].n_solver_evals));

    let single = dynamic_sweep(&cfg, &[0.5], 4).unwrap();
    let plain_cfg = TrainConfig {
        train_alphas: vec![0.5],
        test_alphas: vec![],
        epochs: 4,
        warm_start_epochs: 0,
        scenario_batch: Some(1),
        ..cfg.clone()
    };
    let mut plain = Trainer::new(plain_cfg, &PoissonSolver).unwrap();
    let initial = plain.evaluate_loss(0.5).unwrap();
    plain.run().unwrap();
    assert_eq!(single[0].initial_loss, initial);
    assert_eq!(single[0].initial_loss, single[0].cold_initial_loss);
    assert_eq!(single[0].final_loss, plain.evaluate_loss(0.5).unwrap());
    assert_eq!(dynamic_csv(&recs).lines().count(), 6);
}

#[test]
fn dynamic_warm_start_beats_cold_initial_loss() {
    let series = [0.5, 0.6, 0.7, 0.8, 0.9];
    let recs = dynamic_sweep(&TrainConfig::default(), &series, DEFAULT_DYNAMIC_ITERATIONS).unwrap();
    for r in &recs[1..] {
        assert!(r.initial_loss <= r.cold_initial_loss, "{r:?}");
    }
}

#[test]
fn predictions_match_cached_loss() {
    let cfg = small_config(MeshMode::Frozen);
    let mut t = Trainer::new(cfg, &PoissonSolver).unwrap();
    t.run().unwrap();
    let rmse_metric = t.metrics().last().unwrap().test_rmse;
    let mut sq = 0.0;
    for a in [0.905, 0.925, 0.945] {
        let (p, truth) = t.predict(a).unwrap();
        sq += rmse(&p, &truth).unwrap().powi(2);
    }
    assert!(((sq / 3.0).sqrt() - rmse_metric).abs() < 1e-14);
    let features = assemble_features(t.truth().fine_mesh(), &Field::zeros(17, 17), 0.9).unwrap();
    let (y, _) = forward(&t.model().net, &features).unwrap();
    assert_eq!(y.dim(), (289, 1));
    let _: Array2<f64> = y;
}
