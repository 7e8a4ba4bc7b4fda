//! WebAssembly bindings for the browser demo.
//!
//! Three operations are exposed: solving the Poisson problem on a graded
//! mesh, upsampling a coarse solution to a fine grid, and comparing the
//! zeroth-order mesh-gradient estimators with the finite-difference
//! reference.

use wasm_bindgen::prelude::*;

use zo_meshopt::grid::{mesh_to_params, params_to_mesh, ScenarioParams, TensorMesh, UpsampleMap};
use zo_meshopt::solver::oracle::{exact_mesh_vjp, DEFAULT_STEP};
use zo_meshopt::solver::{solve_poisson, BlackBox, PoissonSolver};
use zo_meshopt::zo::{zo_vjp, EstimatorKind, EstimatorSpec};

fn js_err(e: zo_meshopt::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Lines on `[0, 1]` pulled towards the centre for `grading > 0` and towards
/// the walls for `grading < 0`. `|grading| < 1` keeps them ordered.
pub fn graded_lines(n: usize, grading: f64) -> Vec<f64> {
    use std::f64::consts::PI;
    (0..n)
        .map(|k| {
            let t = k as f64 / (n - 1) as f64;
            t - grading * (2.0 * PI * t).sin() / (2.0 * PI)
        })
        .collect()
}

pub fn graded_mesh(n: usize, grading: f64) -> zo_meshopt::Result<TensorMesh> {
    if !(grading.abs() < 1.0) {
        return Err(zo_meshopt::Error::Config(format!("grading must lie in (-1, 1), got {grading}")));
    }
    let lines = graded_lines(n, grading);
    TensorMesh::new(lines.clone(), lines)
}

/// A field on a tensor mesh, values row-major with `x` fastest.
#[wasm_bindgen]
pub struct MeshField {
    x_lines: Vec<f64>,
    y_lines: Vec<f64>,
    values: Vec<f64>,
}

#[wasm_bindgen]
impl MeshField {
    #[wasm_bindgen(getter)]
    pub fn x_lines(&self) -> Vec<f64> {
        self.x_lines.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn y_lines(&self) -> Vec<f64> {
        self.y_lines.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }
}

impl MeshField {
    pub fn values_ref(&self) -> &[f64] {
        &self.values
    }
}

/// Solves `-Δ(α u) = 1` with zero boundary values on an `n × n` graded mesh.
#[wasm_bindgen]
pub fn solve_field(n: usize, grading: f64, alpha: f64) -> Result<MeshField, JsError> {
    let mesh = graded_mesh(n, grading).map_err(js_err)?;
    let r = solve_poisson(&mesh, ScenarioParams::new(alpha).map_err(js_err)?).map_err(js_err)?;
    Ok(MeshField { x_lines: mesh.x_lines().to_vec(), y_lines: mesh.y_lines().to_vec(), values: r.field.into_values() })
}

/// Coarse solution on the graded mesh copied to a uniform `fine_n × fine_n`
/// grid by nearest-node lookup.
#[wasm_bindgen]
pub fn upsample_field(coarse_n: usize, grading: f64, fine_n: usize, alpha: f64) -> Result<MeshField, JsError> {
    let coarse = graded_mesh(coarse_n, grading).map_err(js_err)?;
    let fine = TensorMesh::uniform(fine_n, fine_n).map_err(js_err)?;
    let r = solve_poisson(&coarse, ScenarioParams::new(alpha).map_err(js_err)?).map_err(js_err)?;
    let up = UpsampleMap::new(&coarse, &fine).apply(&r.field).map_err(js_err)?;
    Ok(MeshField { x_lines: fine.x_lines().to_vec(), y_lines: fine.y_lines().to_vec(), values: up.into_values() })
}

/// Mesh gradient of `½‖u‖²` from the reference and from each estimator.
/// Estimates are rescaled to the reference's expected magnitude
/// (`D` for coordinate, `D/d` for gauss_coord) before comparison.
#[wasm_bindgen]
pub struct GradientComparison {
    exact: Vec<f64>,
    estimates: Vec<Vec<f64>>,
    solves: Vec<usize>,
}

#[wasm_bindgen]
impl GradientComparison {
    #[wasm_bindgen(getter)]
    pub fn exact(&self) -> Vec<f64> {
        self.exact.clone()
    }

    /// Estimate for kind 0 = coordinate, 1 = gaussian, 2 = gauss_coord.
    pub fn estimate(&self, kind: usize) -> Vec<f64> {
        self.estimates.get(kind).cloned().unwrap_or_default()
    }

    pub fn solves(&self, kind: usize) -> usize {
        self.solves.get(kind).copied().unwrap_or(0)
    }

    /// Cosine similarity between an estimate and the reference.
    pub fn cosine(&self, kind: usize) -> f64 {
        let Some(e) = self.estimates.get(kind) else { return f64::NAN };
        let dot: f64 = e.iter().zip(&self.exact).map(|(a, b)| a * b).sum();
        let na: f64 = e.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = self.exact.iter().map(|b| b * b).sum::<f64>().sqrt();
        dot / (na * nb)
    }
}

#[wasm_bindgen]
pub fn compare_estimators(
    n: usize,
    grading: f64,
    alpha: f64,
    b: usize,
    d: usize,
    seed: u64,
) -> Result<GradientComparison, JsError> {
    compare(n, grading, alpha, b, d, seed).map_err(js_err)
}

pub fn compare(n: usize, grading: f64, alpha: f64, b: usize, d: usize, seed: u64) -> zo_meshopt::Result<GradientComparison> {
    let mesh = graded_mesh(n, grading)?;
    // snap onto the feasible set so perturbed solves see the same projection
    let mesh = params_to_mesh(&mesh, &mesh_to_params(&mesh))?;
    let scenario = ScenarioParams::new(alpha)?;
    let base = solve_poisson(&mesh, scenario)?.field;
    let exact = exact_mesh_vjp(&mesh, scenario, &base, DEFAULT_STEP)?;
    let dim = mesh.param_dim();
    let d = d.clamp(1, dim);
    let black_box = BlackBox::new(&PoissonSolver, mesh.clone());
    let m0 = mesh_to_params(&mesh);
    let mut estimates = Vec::new();
    let mut solves = Vec::new();
    for (kind, scale) in [
        (EstimatorKind::Coordinate, dim as f64),
        (EstimatorKind::Gaussian, 1.0),
        (EstimatorKind::GaussCoord, dim as f64 / d as f64),
    ] {
        let spec = EstimatorSpec::new(kind).with_batch(b).with_subset(d).with_seed(seed);
        let (g, n_evals) = zo_vjp(|m: &[f64]| black_box.evaluate(m, scenario), &m0, base.values(), base.values(), &spec)?;
        estimates.push(g.iter().map(|x| x * scale).collect());
        solves.push(n_evals);
    }
    Ok(GradientComparison { exact, estimates, solves })
}
