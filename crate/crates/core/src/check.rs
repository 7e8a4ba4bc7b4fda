//! Self-contained gradient checks: network backprop, the upsampling adjoint,
//! the coarse-field cotangent, and the estimators against closed forms.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::grid::{mesh_to_params, params_to_mesh, Field, ScenarioParams, TensorMesh, UpsampleMap};
use crate::net::{backward, forward, init_params, FEATURE_WIDTH};
use crate::solver::oracle::exact_mesh_vjp;
use crate::solver::{solve_poisson, BlackBox, PoissonSolver};
use crate::train::{loss_backward, loss_forward, loss_given_coarse, GroundTruth, HybridModel};
use crate::zo::{draw_perturbations, zo_vjp, EstimatorKind, EstimatorSpec};

pub const DEFAULT_FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let norm: f64 = b.iter().map(|y| y * y).sum();
    (diff / norm.max(f64::MIN_POSITIVE)).sqrt()
}

/// Runs every check; `fd_step` is the central-difference step for the
/// network and cotangent checks.
pub fn run_suite(fd_step: f64, seed: u64) -> Result<Vec<CheckRow>> {
    Ok(vec![
        net_gradient(fd_step, seed)?,
        upsample_adjoint(seed)?,
        coarse_cotangent(fd_step, seed)?,
        linear_estimator(EstimatorKind::Coordinate, seed)?,
        linear_estimator(EstimatorKind::Gaussian, seed)?,
        linear_estimator(EstimatorKind::GaussCoord, seed)?,
        coordinate_vs_exact(seed)?,
    ])
}

pub fn render_table(rows: &[CheckRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = format!("{:width$}  {:>10}  {:>10}  result\n", "check", "error", "tolerance");
    for r in rows {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        out.push_str(&format!("{:width$}  {:>10.3e}  {:>10.1e}  {verdict}\n", r.name, r.error, r.tolerance));
    }
    out
}

fn net_gradient(h: f64, seed: u64) -> Result<CheckRow> {
    let mut params = init_params(&[FEATURE_WIDTH, 16, 16, 1], seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for b in &mut params.biases {
        b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    let x = Array2::from_shape_fn((32, FEATURE_WIDTH), |_| rng.random_range(-1.0..1.0));
    let loss = |p: &crate::net::MlpParams| -> Result<f64> {
        let (y, _) = forward(p, &x)?;
        Ok(0.5 * y.iter().map(|v| v * v).sum::<f64>())
    };
    let (y, cache) = forward(&params, &x)?;
    let (grads, _) = backward(&params, &cache, &y)?;
    let analytic = grads.to_flat();
    let flat = params.to_flat();
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for k in 0..flat.len() {
        let mut shifted = flat.clone();
        shifted[k] = flat[k] + h;
        probe.set_flat(&shifted)?;
        let up = loss(&probe)?;
        shifted[k] = flat[k] - h;
        probe.set_flat(&shifted)?;
        let down = loss(&probe)?;
        worst = worst.max(rel_err(analytic[k], (up - down) / (2.0 * h), 1e-6));
    }
    Ok(CheckRow { name: "network gradient", error: worst, tolerance: 1e-4 })
}

fn skewed_mesh(n: usize, seed: u64) -> Result<TensorMesh> {
    let t = TensorMesh::uniform(n, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp = 0.3 / (n - 1) as f64;
    let p: Vec<f64> = mesh_to_params(&t).iter().map(|v| v + rng.random_range(-amp..amp)).collect();
    params_to_mesh(&t, &p)
}

fn random_field(nx: usize, ny: usize, rng: &mut ChaCha8Rng) -> Result<Field> {
    Field::new(nx, ny, (0..nx * ny).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn upsample_adjoint(seed: u64) -> Result<CheckRow> {
    let coarse = skewed_mesh(7, seed)?;
    let fine = TensorMesh::uniform(33, 33)?;
    let map = UpsampleMap::new(&coarse, &fine);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c = random_field(7, 7, &mut rng)?;
        let f = random_field(33, 33, &mut rng)?;
        let lhs = map.apply(&c)?.dot(&f)?;
        let rhs = c.dot(&map.adjoint(&f)?)?;
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
    }
    Ok(CheckRow { name: "upsample adjoint", error: worst, tolerance: 1e-12 })
}

fn coarse_cotangent(h: f64, seed: u64) -> Result<CheckRow> {
    let alpha = 0.92;
    let truth = GroundTruth::build(TensorMesh::uniform(17, 17)?, &[alpha])?;
    let model = HybridModel::new(skewed_mesh(5, seed)?, init_params(&[FEATURE_WIDTH, 16, 1], seed)?);
    let fwd = loss_forward(&model, &PoissonSolver, &truth, alpha)?;
    let (_, v) = loss_backward(&model, &fwd.cache)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1);
    let delta = random_field(5, 5, &mut rng)?;
    let shifted = |s: f64| -> Result<f64> {
        let values = fwd.coarse.values().iter().zip(delta.values()).map(|(c, d)| c + s * d).collect();
        Ok(loss_given_coarse(&model, Field::new(5, 5, values)?, &truth, alpha)?.loss)
    };
    let fd = (shifted(h)? - shifted(-h)?) / (2.0 * h);
    let analytic = v.dot(&delta)?;
    Ok(CheckRow { name: "coarse cotangent", error: rel_err(analytic, fd, 1e-12), tolerance: 1e-4 })
}

/// On a linear map the estimators are exact functions of their directions:
/// `(1/b) Σ u_j u_jᵀ Aᵀ v`.
fn linear_estimator(kind: EstimatorKind, seed: u64) -> Result<CheckRow> {
    let (rows, dim) = (5, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11);
    let a: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
    let m0: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let apply = |m: &[f64]| -> Result<Vec<f64>> {
        Ok((0..rows).map(|r| (0..dim).map(|c| a[r * dim + c] * m[c]).sum()).collect())
    };
    let atv: Vec<f64> = (0..dim).map(|c| (0..rows).map(|r| a[r * dim + c] * v[r]).sum()).collect();
    let b = if kind == EstimatorKind::Coordinate { dim } else { 3 };
    let spec = EstimatorSpec::new(kind).with_batch(b).with_subset(4).with_seed(seed);
    let (est, _) = zo_vjp(apply, &m0, &apply(&m0)?, &v, &spec)?;
    let mut expect = vec![0.0; dim];
    for draw in draw_perturbations(&spec, dim)? {
        let proj: f64 = draw.direction.iter().zip(&atv).map(|(u, g)| u * g).sum();
        for (e, u) in expect.iter_mut().zip(&draw.direction) {
            *e += proj * u / b as f64;
        }
    }
    let error = est.iter().zip(&expect).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let name = match kind {
        EstimatorKind::Coordinate => "coordinate estimator, linear map",
        EstimatorKind::Gaussian => "gaussian estimator, linear map",
        EstimatorKind::GaussCoord => "gauss_coord estimator, linear map",
    };
    Ok(CheckRow { name, error, tolerance: 1e-9 })
}

/// Full-coverage coordinate estimate on the Poisson solver, rescaled by `D`,
/// against the central-difference mesh gradient.
fn coordinate_vs_exact(seed: u64) -> Result<CheckRow> {
    let mesh = skewed_mesh(9, seed)?;
    let scenario = ScenarioParams::new(0.93)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let v = random_field(9, 9, &mut rng)?;
    let exact = exact_mesh_vjp(&mesh, scenario, &v, crate::solver::oracle::DEFAULT_STEP)?;
    let dim = mesh.param_dim();
    let base = solve_poisson(&mesh, scenario)?.field;
    let black_box = BlackBox::new(&PoissonSolver, mesh.clone());
    let spec = EstimatorSpec::new(EstimatorKind::Coordinate).with_batch(dim).with_mu(1e-6).with_seed(seed);
    let (est, _) = zo_vjp(|m: &[f64]| black_box.evaluate(m, scenario), &mesh_to_params(&mesh), base.values(), v.values(), &spec)?;
    let scaled: Vec<f64> = est.iter().map(|g| g * dim as f64).collect();
    Ok(CheckRow { name: "coordinate estimator vs exact", error: rel_l2(&scaled, &exact), tolerance: 1e-4 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let rows = run_suite(DEFAULT_FD_STEP, 0).unwrap();
        assert_eq!(rows.len(), 7);
        for r in &rows {
            assert!(r.passed(), "{}", render_table(&rows));
        }
    }

    #[test]
    fn coarse_step_fails_network_check() {
        let row = net_gradient(1e-1, 0).unwrap();
        assert!(!row.passed(), "{row:?}");
    }
}
