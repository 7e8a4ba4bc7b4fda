//! Loss of the hybrid model and its two gradient paths.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::grid::{mesh_to_params, Field, ScenarioParams, TensorMesh, UpsampleMap};
use crate::net::{backward, forward, ForwardCache, MlpParams, FEATURE_WIDTH, UP_COLUMN};
use crate::solver::oracle::exact_mesh_vjp_with;
use crate::solver::{solve_poisson, BlackBox, MeshSolver};
use crate::zo::{zo_vjp, EstimatorSpec};

use super::MeshMode;

/// Fine-mesh target fields, solved once per alpha.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    fine: TensorMesh,
    fields: BTreeMap<u64, Field>,
}

impl GroundTruth {
    pub fn new(fine: TensorMesh) -> Self {
        Self { fine, fields: BTreeMap::new() }
    }

    pub fn build(fine: TensorMesh, alphas: &[f64]) -> Result<Self> {
        let mut t = Self::new(fine);
        t.ensure(alphas)?;
        Ok(t)
    }

    pub fn fine_mesh(&self) -> &TensorMesh {
        &self.fine
    }

    pub fn ensure(&mut self, alphas: &[f64]) -> Result<()> {
        let missing: Vec<f64> = alphas.iter().copied().filter(|a| !self.fields.contains_key(&a.to_bits())).collect();
        let solved = crate::par::map_indices(missing.len(), |k| {
            solve_poisson(&self.fine, ScenarioParams::new(missing[k])?).map(|r| r.field)
        });
        for (a, f) in missing.iter().zip(solved) {
            self.fields.insert(a.to_bits(), f?);
        }
        Ok(())
    }

    pub fn get(&self, alpha: f64) -> Result<&Field> {
        self.fields
            .get(&alpha.to_bits())
            .ok_or_else(|| Error::Usage(format!("no ground truth cached for alpha {alpha}")))
    }
}

/// Trainable state: coarse mesh and correction network. The version counter
/// advances on every update so stale loss caches can be detected.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel {
    pub mesh: TensorMesh,
    pub net: MlpParams,
    version: u64,
}

impl HybridModel {
    pub fn new(mesh: TensorMesh, net: MlpParams) -> Self {
        Self { mesh, net, version: 0 }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn set_net_flat(&mut self, flat: &[f64]) -> Result<()> {
        self.net.set_flat(flat)?;
        self.version += 1;
        Ok(())
    }

    pub(crate) fn set_mesh(&mut self, mesh: TensorMesh) {
        self.mesh = mesh;
        self.version += 1;
    }
}

/// Per-node feature rows `[x, y, u_up, alpha]` on the fine mesh.
pub fn assemble_features(fine: &TensorMesh, u_up: &Field, alpha: f64) -> Result<Array2<f64>> {
    if u_up.shape() != fine.shape() {
        return Err(Error::input("upsampled field does not live on the fine mesh"));
    }
    let mut rows = Array2::zeros((fine.node_count(), FEATURE_WIDTH));
    for j in 0..fine.ny() {
        for i in 0..fine.nx() {
            let k = fine.index(i, j);
            let (x, y) = fine.node(i, j);
            rows[(k, 0)] = x;
            rows[(k, 1)] = y;
            rows[(k, UP_COLUMN)] = u_up.values()[k];
            rows[(k, 3)] = alpha;
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct LossCache {
    version: u64,
    map: UpsampleMap,
    forward: ForwardCache,
    predictions: Array2<f64>,
    target: Field,
}

impl LossCache {
    pub fn predictions(&self) -> Vec<f64> {
        self.predictions.column(0).to_vec()
    }
}

#[derive(Debug, Clone)]
pub struct LossForward {
    pub loss: f64,
    pub cache: LossCache,
    pub coarse: Field,
    pub fine: Field,
}

/// One coarse solve, upsampling, network prediction and MSE against the
/// cached fine solution.
pub fn loss_forward<S: MeshSolver + ?Sized>(
    model: &HybridModel,
    solver: &S,
    truth: &GroundTruth,
    alpha: f64,
) -> Result<LossForward> {
    let coarse = solver.solve(&model.mesh, ScenarioParams::new(alpha)?)?.field;
    loss_given_coarse(model, coarse, truth, alpha)
}

/// [`loss_forward`] with the coarse solution supplied by the caller.
pub fn loss_given_coarse(model: &HybridModel, coarse: Field, truth: &GroundTruth, alpha: f64) -> Result<LossForward> {
    let fine_mesh = truth.fine_mesh();
    let target = truth.get(alpha)?.clone();
    let map = UpsampleMap::new(&model.mesh, fine_mesh);
    let u_up = map.apply(&coarse)?;
    let features = assemble_features(fine_mesh, &u_up, alpha)?;
    let (predictions, fwd) = forward(&model.net, &features)?;
    let n = target.values().len() as f64;
    let loss = predictions
        .column(0)
        .iter()
        .zip(target.values())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n;
    Ok(LossForward {
        loss,
        cache: LossCache { version: model.version(), map, forward: fwd, predictions, target: target.clone() },
        coarse,
        fine: target,
    })
}

/// Network gradients and the coarse-field cotangent `∂L/∂O_coarse`.
pub fn loss_backward(model: &HybridModel, cache: &LossCache) -> Result<(MlpParams, Field)> {
    if cache.version != model.version() {
        return Err(Error::Usage(format!(
            "loss cache from model version {} used with version {}",
            cache.version,
            model.version()
        )));
    }
    let n = cache.target.values().len();
    let scale = 2.0 / n as f64;
    let mut cotangent = Array2::zeros((n, 1));
    for (k, (p, t)) in cache.predictions.column(0).iter().zip(cache.target.values()).enumerate() {
        cotangent[(k, 0)] = scale * (p - t);
    }
    let (theta, input_grads) = backward(&model.net, &cache.forward, &cotangent)?;
    let (fx, fy) = cache.target.shape();
    let fine_cotangent = Field::new(fx, fy, input_grads.index_axis(Axis(1), UP_COLUMN).to_vec())?;
    let v_coarse = cache.map.adjoint(&fine_cotangent)?;
    Ok((theta, v_coarse))
}

pub fn rmse(pred: &Field, truth: &Field) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::input("rmse of fields with different shapes"));
    }
    let n = pred.values().len() as f64;
    let sq: f64 = pred.values().iter().zip(truth.values()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq / n).sqrt())
}

/// Gradients of the batch-mean loss.
#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub losses: Vec<f64>,
    /// Flattened network gradient averaged over the batch.
    pub theta: Vec<f64>,
    pub coarse: Vec<Field>,
    /// Per-scenario cotangents, already divided by the batch size.
    pub v_coarse: Vec<Field>,
}

pub fn batch_gradients<S: MeshSolver + ?Sized>(
    model: &HybridModel,
    solver: &S,
    truth: &GroundTruth,
    alphas: &[f64],
) -> Result<BatchGrads> {
    if alphas.is_empty() {
        return Err(Error::input("empty scenario batch"));
    }
    let per_scenario = crate::par::map_indices(alphas.len(), |k| -> Result<_> {
        let fwd = loss_forward(model, solver, truth, alphas[k])?;
        let (theta, v) = loss_backward(model, &fwd.cache)?;
        Ok((fwd.loss, theta.to_flat(), fwd.coarse, v))
    });
    let inv = 1.0 / alphas.len() as f64;
    let mut out = BatchGrads { losses: Vec::new(), theta: vec![0.0; model.net.param_count()], coarse: Vec::new(), v_coarse: Vec::new() };
    let mut sum = vec![0.0; model.net.param_count()];
    for item in per_scenario {
        let (loss, theta, coarse, v) = item?;
        for (s, g) in sum.iter_mut().zip(&theta) {
            *s += g;
        }
        out.losses.push(loss);
        out.coarse.push(coarse);
        let (vx, vy) = v.shape();
        out.v_coarse.push(Field::new(vx, vy, v.values().iter().map(|x| x * inv).collect())?);
    }
    for (t, s) in out.theta.iter_mut().zip(sum) {
        *t = s / alphas.len() as f64;
    }
    Ok(out)
}

/// One scenario's contribution to the mesh gradient.
#[derive(Debug, Clone, Copy)]
pub struct ScenarioCotangent<'a> {
    pub alpha: f64,
    pub base: &'a Field,
    pub v: &'a Field,
}

/// Mesh gradient of the batch loss and the number of solver calls it used.
///
/// The zeroth-order modes treat the whole batch as one black box
/// `m -> (O(m, α_1), ..., O(m, α_S))` contracted with the stacked cotangents,
/// so every direction costs one solve per scenario.
pub fn mesh_grad<S: MeshSolver + ?Sized>(
    solver: &S,
    mode: MeshMode,
    mesh: &TensorMesh,
    items: &[ScenarioCotangent<'_>],
    spec: &EstimatorSpec,
    exact_step: f64,
) -> Result<(Vec<f64>, usize)> {
    let dim = mesh.param_dim();
    for it in items {
        if it.base.shape() != mesh.shape() || it.v.shape() != mesh.shape() {
            return Err(Error::input("scenario fields do not live on the coarse mesh"));
        }
    }
    match mode {
        MeshMode::Frozen => Ok((vec![0.0; dim], 0)),
        MeshMode::Exact => {
            let mut grad = vec![0.0; dim];
            for it in items {
                let g = exact_mesh_vjp_with(solver, mesh, ScenarioParams::new(it.alpha)?, it.v, exact_step)?;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            Ok((grad, 2 * dim * items.len()))
        }
        MeshMode::Coordinate | MeshMode::Gaussian | MeshMode::GaussCoord => {
            let kind = mode.estimator_kind().unwrap();
            if spec.kind != kind {
                return Err(Error::config(format!("estimator kind {:?} does not match mesh mode {}", spec.kind, mode.name())));
            }
            let scenarios: Vec<ScenarioParams> = items.iter().map(|it| ScenarioParams::new(it.alpha)).collect::<Result<_>>()?;
            let black_box = BlackBox::new(solver, mesh.clone());
            let evaluate = |m: &[f64]| -> Result<Vec<f64>> {
                let mut out = Vec::new();
                for &s in &scenarios {
                    out.extend(black_box.evaluate(m, s)?);
                }
                Ok(out)
            };
            let base: Vec<f64> = items.iter().flat_map(|it| it.base.values().iter().copied()).collect();
            let v: Vec<f64> = items.iter().flat_map(|it| it.v.values().iter().copied()).collect();
            let (grad, evals) = zo_vjp(evaluate, &mesh_to_params(mesh), &base, &v, spec)?;
            Ok((grad, evals * items.len()))
        }
    }
}
