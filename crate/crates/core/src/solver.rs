//! Finite-difference solver for `-Δ(α u) = f` on a non-uniform tensor mesh
//! with homogeneous Dirichlet boundary conditions.
//!
//! Training code only sees the solver through [`MeshSolver`] and
//! [`BlackBox::evaluate`]. The central-difference reference gradient lives in
//! [`oracle`] and is not used by the estimators.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::clock::Clock;
use crate::error::{Error, Result};
use crate::grid::{params_to_mesh, Field, ScenarioParams, TensorMesh};

/// Largest accepted infinity-norm residual of the discrete system.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub field: Field,
    /// Normwise backward error of the linear solve, infinity norm.
    pub residual_norm: f64,
    pub solve_time: f64,
}

/// A forward PDE solve on a given mesh. Implementations must be callable from
/// several perturbation workers at once.
pub trait MeshSolver: Sync {
    fn solve(&self, mesh: &TensorMesh, scenario: ScenarioParams) -> Result<SolveReport>;
}

/// The unit-source Poisson problem `-Δ(α u) = 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PoissonSolver;

impl MeshSolver for PoissonSolver {
    fn solve(&self, mesh: &TensorMesh, scenario: ScenarioParams) -> Result<SolveReport> {
        solve_poisson(mesh, scenario)
    }
}

/// Wraps a solver and counts every call.
#[derive(Debug, Default)]
pub struct CountingSolver<S> {
    inner: S,
    calls: AtomicUsize,
}

impl<S: MeshSolver> CountingSolver<S> {
    pub fn new(inner: S) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<S: MeshSolver> MeshSolver for CountingSolver<S> {
    fn solve(&self, mesh: &TensorMesh, scenario: ScenarioParams) -> Result<SolveReport> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.solve(mesh, scenario)
    }
}

/// Opaque map from trainable mesh coordinates to nodal solver output.
pub struct BlackBox<'a, S: ?Sized> {
    solver: &'a S,
    template: TensorMesh,
}

impl<'a, S: MeshSolver + ?Sized> BlackBox<'a, S> {
    pub fn new(solver: &'a S, template: TensorMesh) -> Self {
        Self { solver, template }
    }

    pub fn dim(&self) -> usize {
        self.template.param_dim()
    }

    pub fn evaluate(&self, mesh_params: &[f64], scenario: ScenarioParams) -> Result<Vec<f64>> {
        let mesh = params_to_mesh(&self.template, mesh_params)?;
        let report = self.solver.solve(&mesh, scenario)?;
        Ok(report.field.into_values())
    }
}

pub fn solve_poisson(mesh: &TensorMesh, scenario: ScenarioParams) -> Result<SolveReport> {
    solve_with_source(mesh, scenario.alpha(), |_, _| 1.0)
}

/// Solves with source `2π² sin(πx) sin(πy)`, so that `α u = sin(πx) sin(πy)`
/// exactly.
pub fn solve_manufactured(mesh: &TensorMesh, scenario: ScenarioParams) -> Result<SolveReport> {
    solve_with_source(mesh, scenario.alpha(), |x, y| 2.0 * PI * PI * (PI * x).sin() * (PI * y).sin())
}

/// Closed-form solution of [`solve_manufactured`].
pub fn manufactured_exact(x: f64, y: f64, alpha: f64) -> f64 {
    (PI * x).sin() * (PI * y).sin() / alpha
}

/// Coefficients of the three-point second-derivative stencil at a node with
/// gaps `hl` (left) and `hr` (right): `(left, centre, right)`.
#[inline]
fn second_derivative_weights(hl: f64, hr: f64) -> (f64, f64, f64) {
    (2.0 / (hl * (hl + hr)), -2.0 / (hl * hr), 2.0 / (hr * (hl + hr)))
}

fn solve_with_source(mesh: &TensorMesh, alpha: f64, source: impl Fn(f64, f64) -> f64) -> Result<SolveReport> {
    let start = Clock::now();
    let nx = mesh.nx();
    let ny = mesh.ny();
    let mut field = Field::zeros_on(mesh);
    if nx < 3 || ny < 3 {
        return Ok(SolveReport { field, residual_norm: 0.0, solve_time: start.elapsed() });
    }
    let mx = nx - 2;
    let my = ny - 2;
    let x = mesh.x_lines();
    let y = mesh.y_lines();

    // Unknowns w = α u at interior nodes, ordered with i fastest.
    let mut band = BandMatrix::new(mx * my, mx);
    let mut rhs = vec![0.0; mx * my];
    for j in 1..ny - 1 {
        let (ys, yc, yn) = second_derivative_weights(y[j] - y[j - 1], y[j + 1] - y[j]);
        for i in 1..nx - 1 {
            let (xw, xc, xe) = second_derivative_weights(x[i] - x[i - 1], x[i + 1] - x[i]);
            let row = (j - 1) * mx + (i - 1);
            band.set(row, row, -(xc + yc));
            if i > 1 {
                band.set(row, row - 1, -xw);
            }
            if i < nx - 2 {
                band.set(row, row + 1, -xe);
            }
            if j > 1 {
                band.set(row, row - mx, -ys);
            }
            if j < ny - 2 {
                band.set(row, row + mx, -yn);
            }
            rhs[row] = source(x[i], y[j]);
        }
    }

    let w = band.clone().solve(&rhs)?;
    let residual_norm = band.backward_error(&w, &rhs);
    if !residual_norm.is_finite() || residual_norm > RESIDUAL_TOLERANCE {
        return Err(Error::Solver {
            message: "discrete Poisson system solved inaccurately".into(),
            residual: residual_norm,
        });
    }

    let values = field.values_mut();
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            values[j * nx + i] = w[(j - 1) * mx + (i - 1)] / alpha;
        }
    }
    Ok(SolveReport { field, residual_norm, solve_time: start.elapsed() })
}

/// Square matrix stored by diagonals within `half_width` of the main one.
/// Elimination without pivoting keeps all fill-in inside the band; the
/// assembled operator is an irreducibly diagonally dominant M-matrix, so no
/// pivoting is required.
#[derive(Debug, Clone)]
struct BandMatrix {
    n: usize,
    half_width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    fn new(n: usize, half_width: usize) -> Self {
        Self { n, half_width, data: vec![0.0; n * (2 * half_width + 1)] }
    }

    #[inline]
    fn slot(&self, row: usize, col: usize) -> usize {
        debug_assert!(col + self.half_width >= row && col <= row + self.half_width);
        row * (2 * self.half_width + 1) + (col + self.half_width - row)
    }

    #[inline]
    fn get(&self, row: usize, col: usize) -> f64 {
        self.data[self.slot(row, col)]
    }

    #[inline]
    fn set(&mut self, row: usize, col: usize, v: f64) {
        let s = self.slot(row, col);
        self.data[s] = v;
    }

    fn solve(mut self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        let p = self.half_width;
        let mut b = rhs.to_vec();
        for k in 0..n {
            let pivot = self.get(k, k);
            if pivot.abs() < f64::MIN_POSITIVE || !pivot.is_finite() {
                return Err(Error::Solver { message: format!("zero pivot at row {k}"), residual: f64::INFINITY });
            }
            let last = (k + p).min(n - 1);
            for r in k + 1..=last {
                let factor = self.get(r, k) / pivot;
                if factor == 0.0 {
                    continue;
                }
                for c in k..=last {
                    let v = self.get(r, c) - factor * self.get(k, c);
                    self.set(r, c, v);
                }
                b[r] -= factor * b[k];
            }
        }
        let mut x = vec![0.0; n];
        for k in (0..n).rev() {
            let last = (k + p).min(n - 1);
            let mut acc = b[k];
            for c in k + 1..=last {
                acc -= self.get(k, c) * x[c];
            }
            x[k] = acc / self.get(k, k);
        }
        Ok(x)
    }

    /// Normwise backward error `|Ax - b| / (|A| |x| + |b|)` in the infinity norm.
    fn backward_error(&self, x: &[f64], rhs: &[f64]) -> f64 {
        let p = self.half_width;
        let mut resid: f64 = 0.0;
        let mut a_norm: f64 = 0.0;
        for r in 0..self.n {
            let lo = r.saturating_sub(p);
            let hi = (r + p).min(self.n - 1);
            let ax: f64 = (lo..=hi).map(|c| self.get(r, c) * x[c]).sum();
            resid = resid.max((ax - rhs[r]).abs());
            a_norm = a_norm.max((lo..=hi).map(|c| self.get(r, c).abs()).sum());
        }
        let x_norm = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let b_norm = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = a_norm * x_norm + b_norm;
        if scale == 0.0 {
            resid
        } else {
            resid / scale
        }
    }
}

/// Reference mesh gradients from central differences of the solver.
pub mod oracle {
    use super::*;
    use crate::grid::mesh_to_params;

    pub const DEFAULT_STEP: f64 = 1e-6;

    /// `g_k = <v, O(M + h e_k) - O(M - h e_k)> / (2h)` for every trainable
    /// coordinate. Uses `2 D` solves.
    pub fn exact_mesh_vjp(mesh: &TensorMesh, scenario: ScenarioParams, v: &Field, h: f64) -> Result<Vec<f64>> {
        exact_mesh_vjp_with(&PoissonSolver, mesh, scenario, v, h)
    }

    pub fn exact_mesh_vjp_with<S: MeshSolver + ?Sized>(
        solver: &S,
        mesh: &TensorMesh,
        scenario: ScenarioParams,
        v: &Field,
        h: f64,
    ) -> Result<Vec<f64>> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
        }
        if v.shape() != mesh.shape() {
            return Err(Error::input(format!(
                "cotangent shape {:?} does not match mesh {:?}",
                v.shape(),
                mesh.shape()
            )));
        }
        let black_box = BlackBox::new(solver, mesh.clone());
        let m0 = mesh_to_params(mesh);
        let dot = |o: &[f64]| -> f64 { o.iter().zip(v.values()).map(|(a, b)| a * b).sum() };
        let coordinate = |k: usize| -> Result<f64> {
            let mut plus = m0.clone();
            plus[k] += h;
            let mut minus = m0.clone();
            minus[k] -= h;
            let op = black_box.evaluate(&plus, scenario)?;
            let om = black_box.evaluate(&minus, scenario)?;
            Ok((dot(&op) - dot(&om)) / (2.0 * h))
        };
        crate::par::map_indices(m0.len(), coordinate).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::*;
    use super::*;
    use crate::grid::{mesh_to_params, params_to_mesh};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn alpha(a: f64) -> ScenarioParams {
        ScenarioParams::new(a).unwrap()
    }

    fn perturbed_mesh(n: usize, seed: u64, amp: f64) -> TensorMesh {
        let t = TensorMesh::uniform(n, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = mesh_to_params(&t).iter().map(|v| v + rng.random_range(-amp..amp)).collect();
        params_to_mesh(&t, &p).unwrap()
    }

    /// Dense assembly from Kronecker sums of 1-D operators, solved by nalgebra.
    fn dense_oracle(mesh: &TensorMesh, alpha: f64) -> Vec<f64> {
        fn lap_1d(lines: &[f64]) -> DMatrix<f64> {
            let m = lines.len() - 2;
            let mut a = DMatrix::zeros(m, m);
            for r in 0..m {
                let k = r + 1;
                let hl = lines[k] - lines[k - 1];
                let hr = lines[k + 1] - lines[k];
                a[(r, r)] = 2.0 / (hl * hr);
                if r > 0 {
                    a[(r, r - 1)] = -2.0 / (hl * (hl + hr));
                }
                if r + 1 < m {
                    a[(r, r + 1)] = -2.0 / (hr * (hl + hr));
                }
            }
            a
        }
        let ax = lap_1d(mesh.x_lines());
        let ay = lap_1d(mesh.y_lines());
        let ix = DMatrix::<f64>::identity(ax.nrows(), ax.nrows());
        let iy = DMatrix::<f64>::identity(ay.nrows(), ay.nrows());
        let a = iy.kronecker(&ax) + ay.kronecker(&ix);
        let b = DVector::from_element(a.nrows(), 1.0);
        let w = a.lu().solve(&b).unwrap();
        let mut out = vec![0.0; mesh.node_count()];
        let mx = mesh.nx() - 2;
        for j in 1..mesh.ny() - 1 {
            for i in 1..mesh.nx() - 1 {
                out[mesh.index(i, j)] = w[(j - 1) * mx + (i - 1)] / alpha;
            }
        }
        out
    }

    #[test]
    fn single_unknown() {
        let m = TensorMesh::uniform(3, 3).unwrap();
        let r = solve_poisson(&m, alpha(1.0)).unwrap();
        assert!((r.field.get(1, 1) - 0.0625).abs() < 1e-15);
        let r = solve_poisson(&m, alpha(2.0)).unwrap();
        assert!((r.field.get(1, 1) - 0.03125).abs() < 1e-15);
        assert_eq!(r.field.get(0, 1), 0.0);
    }

    #[test]
    fn matches_dense_assembly() {
        let m = TensorMesh::uniform(9, 9).unwrap();
        let r = solve_poisson(&m, alpha(1.0)).unwrap();
        let oracle = dense_oracle(&m, 1.0);
        for (a, b) in r.field.values().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(r.residual_norm <= RESIDUAL_TOLERANCE);

        let m = perturbed_mesh(7, 3, 0.05);
        let r = solve_poisson(&m, alpha(0.93)).unwrap();
        let oracle = dense_oracle(&m, 0.93);
        for (a, b) in r.field.values().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn rectangular_mesh_matches_dense_assembly() {
        let m = TensorMesh::new(vec![0.0, 0.1, 0.45, 0.5, 1.0], vec![0.0, 0.3, 0.6, 0.7, 0.9, 1.0]).unwrap();
        let r = solve_poisson(&m, alpha(1.3)).unwrap();
        let oracle = dense_oracle(&m, 1.3);
        for (a, b) in r.field.values().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    fn manufactured_error(n: usize) -> f64 {
        let m = TensorMesh::uniform(n, n).unwrap();
        let r = solve_manufactured(&m, alpha(1.0)).unwrap();
        let mut err: f64 = 0.0;
        for j in 0..n {
            for i in 0..n {
                let (x, y) = m.node(i, j);
                err = err.max((r.field.get(i, j) - manufactured_exact(x, y, 1.0)).abs());
            }
        }
        err
    }

    #[test]
    fn manufactured_convergence() {
        let e33 = manufactured_error(33);
        assert!(e33 < 0.01, "error {e33}");
        let ratio = manufactured_error(17) / e33;
        assert!((3.2..=4.8).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn manufactured_alpha_linearity() {
        let m = TensorMesh::uniform(17, 17).unwrap();
        let a = solve_manufactured(&m, alpha(1.0)).unwrap();
        let b = solve_manufactured(&m, alpha(2.0)).unwrap();
        for (u1, u2) in a.field.values().iter().zip(b.field.values()) {
            assert!((u1 / 2.0 - u2).abs() <= 1e-12);
        }
    }

    #[test]
    fn scaling_positivity_and_symmetry() {
        let m = perturbed_mesh(8, 9, 0.04);
        let m = TensorMesh::new(m.x_lines().to_vec(), vec![0.0, 0.2, 0.35, 0.7, 1.0]).unwrap();
        let base = solve_poisson(&m, alpha(1.0)).unwrap().field;
        for a in [0.5, 0.9, 3.7] {
            let f = solve_poisson(&m, alpha(a)).unwrap().field;
            for (u, u1) in f.values().iter().zip(base.values()) {
                assert!((u - u1 / a).abs() <= 1e-12 * (u1 / a).abs().max(f64::MIN_POSITIVE));
            }
        }
        for j in 1..m.ny() - 1 {
            for i in 1..m.nx() - 1 {
                assert!(base.get(i, j) > 0.0);
            }
        }
        let t = solve_poisson(&m.transposed(), alpha(1.0)).unwrap().field;
        for (a, b) in t.values().iter().zip(base.transposed().values()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn vjp_shape_zero_and_linearity() {
        let m = TensorMesh::uniform(3, 3).unwrap();
        let v = Field::zeros_on(&m);
        let g = exact_mesh_vjp(&m, alpha(1.0), &v, DEFAULT_STEP).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);

        let m = perturbed_mesh(5, 1, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = Field::new(5, 5, (0..25).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let v3 = Field::new(5, 5, v.values().iter().map(|x| 3.0 * x).collect()).unwrap();
        let g = exact_mesh_vjp(&m, alpha(0.9), &v, DEFAULT_STEP).unwrap();
        let g3 = exact_mesh_vjp(&m, alpha(0.9), &v3, DEFAULT_STEP).unwrap();
        for (a, b) in g.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() <= 1e-9, "{a} {b}");
        }
    }

    #[test]
    fn vjp_agrees_with_one_sided_differences() {
        let m = perturbed_mesh(5, 4, 0.05);
        let s = alpha(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = Field::new(5, 5, (0..25).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let central = exact_mesh_vjp(&m, s, &v, DEFAULT_STEP).unwrap();
        let h = 1e-4;
        let base = solve_poisson(&m, s).unwrap().field.dot(&v).unwrap();
        let p0 = mesh_to_params(&m);
        let norm = central.iter().map(|g| g * g).sum::<f64>().sqrt();
        for (k, c) in central.iter().enumerate() {
            let mut p = p0.clone();
            p[k] += h;
            let up = solve_poisson(&params_to_mesh(&m, &p).unwrap(), s).unwrap().field.dot(&v).unwrap();
            let one_sided = (up - base) / h;
            assert!((one_sided - c).abs() <= 1e-3 * norm.max(c.abs()), "k={k}: {one_sided} vs {c}");
        }
    }

    #[test]
    fn counting_wrapper_counts_oracle_budget() {
        let m = TensorMesh::uniform(3, 3).unwrap();
        let solver = CountingSolver::new(PoissonSolver);
        let v = Field::zeros_on(&m);
        exact_mesh_vjp_with(&solver, &m, alpha(1.0), &v, DEFAULT_STEP).unwrap();
        assert_eq!(solver.calls(), 4);
    }

    #[test]
    fn black_box_projects_infeasible_params() {
        let t = TensorMesh::uniform(3, 3).unwrap();
        let bb = BlackBox::new(&PoissonSolver, t);
        let out = bb.evaluate(&[2.0, 0.5], alpha(1.0)).unwrap();
        assert_eq!(out.len(), 9);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(bb.evaluate(&[f64::INFINITY, 0.5], alpha(1.0)).is_err());
    }
}
