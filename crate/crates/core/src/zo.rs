//! Zeroth-order gradient estimators in vector-Jacobian form.
//!
//! Given a black-box map `O(m)`, a base output `O(m0)` and a cotangent `v`,
//! every estimator draws `b` directions `u_j` and returns
//!
//! ```text
//! (1/b) Σ_j  <v, O(m0 + μ u_j) - O(m0)> / μ  ·  u_j
//! ```
//!
//! which is the per-output-dimension estimator contracted with `v`. The
//! directions are unit basis vectors (coordinate), dense standard normals
//! (gaussian), or standard normals masked to one random coordinate subset of
//! size `d` (gauss_coord). There is no `D / b` rescaling, so the coordinate
//! estimator is the finite-difference gradient divided by `D` in expectation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Coordinate,
    Gaussian,
    GaussCoord,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::Coordinate, EstimatorKind::Gaussian, EstimatorKind::GaussCoord];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Coordinate => "coordinate",
            EstimatorKind::Gaussian => "gaussian",
            EstimatorKind::GaussCoord => "gauss_coord",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coordinate" => Ok(EstimatorKind::Coordinate),
            "gaussian" => Ok(EstimatorKind::Gaussian),
            "gauss_coord" => Ok(EstimatorKind::GaussCoord),
            other => Err(Error::config(format!("unknown estimator kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_b")]
    pub b: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_mu() -> f64 {
    1e-3
}

fn default_b() -> usize {
    1
}

fn default_d() -> usize {
    16
}

impl EstimatorSpec {
    pub fn new(kind: EstimatorKind) -> Self {
        Self { kind, mu: default_mu(), b: default_b(), d: default_d(), seed: 0 }
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }

    pub fn with_batch(mut self, b: usize) -> Self {
        self.b = b;
        self
    }

    pub fn with_subset(mut self, d: usize) -> Self {
        self.d = d;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Checks the spec against a parameter dimension.
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.b < 1 {
            return Err(Error::config("estimator batch size b must be at least 1"));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::config(format!("perturbation size mu must be positive, got {}", self.mu)));
        }
        if self.kind == EstimatorKind::GaussCoord && (self.d < 1 || self.d > dim) {
            return Err(Error::config(format!("subset size d={} must lie in 1..={dim}", self.d)));
        }
        Ok(())
    }
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        Self::new(EstimatorKind::GaussCoord)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Coordinate(usize),
    Gaussian,
    MaskedGaussian { subset: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationDraw {
    pub direction: Vec<f64>,
    pub provenance: Provenance,
}

impl PerturbationDraw {
    pub fn coordinate(dim: usize, index: usize) -> Self {
        let mut direction = vec![0.0; dim];
        direction[index] = 1.0;
        Self { direction, provenance: Provenance::Coordinate(index) }
    }

    pub fn gaussian(direction: Vec<f64>) -> Self {
        Self { direction, provenance: Provenance::Gaussian }
    }
}

/// Materialises all `b` directions for one estimator call, in a fixed order.
///
/// Gaussian vectors come from stream 0 of the seeded generator and the
/// gauss_coord subset from stream 1, so gauss_coord with `d = D` reproduces
/// the gaussian draws exactly.
pub fn draw_perturbations(spec: &EstimatorSpec, dim: usize) -> Result<Vec<PerturbationDraw>> {
    spec.validate(dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draws = match spec.kind {
        EstimatorKind::Coordinate => {
            if dim == 0 {
                return Err(Error::config("coordinate estimator needs at least one parameter"));
            }
            let mut order: Vec<usize> = Vec::with_capacity(spec.b);
            while order.len() < spec.b {
                let mut perm: Vec<usize> = (0..dim).collect();
                perm.shuffle(&mut rng);
                order.extend(perm);
            }
            order.truncate(spec.b);
            order.into_iter().map(|k| PerturbationDraw::coordinate(dim, k)).collect()
        }
        EstimatorKind::Gaussian => (0..spec.b)
            .map(|_| PerturbationDraw::gaussian(standard_normal_vec(&mut rng, dim)))
            .collect(),
        EstimatorKind::GaussCoord => {
            let mut subset_rng = ChaCha8Rng::seed_from_u64(spec.seed);
            subset_rng.set_stream(1);
            let mut all: Vec<usize> = (0..dim).collect();
            let (chosen, _) = all.partial_shuffle(&mut subset_rng, spec.d);
            let mut subset = chosen.to_vec();
            subset.sort_unstable();
            let mut mask = vec![false; dim];
            for &k in &subset {
                mask[k] = true;
            }
            (0..spec.b)
                .map(|_| {
                    let mut g = standard_normal_vec(&mut rng, dim);
                    for (gk, keep) in g.iter_mut().zip(&mask) {
                        if !keep {
                            *gk = 0.0;
                        }
                    }
                    PerturbationDraw { direction: g, provenance: Provenance::MaskedGaussian { subset: subset.clone() } }
                })
                .collect()
        }
    };
    Ok(draws)
}

fn standard_normal_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Estimate of `vᵀ ∂O/∂m` at `m0` using `b` forward evaluations.
///
/// `base_output` must equal `evaluate(m0)`; it is supplied by the caller so
/// the base solve is shared with the loss computation. Returns the estimate
/// and the number of evaluations performed.
pub fn zo_vjp<F>(evaluate: F, m0: &[f64], base_output: &[f64], v: &[f64], spec: &EstimatorSpec) -> Result<(Vec<f64>, usize)>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let draws = draw_perturbations(spec, m0.len())?;
    zo_vjp_with_draws(evaluate, m0, base_output, v, spec.mu, &draws)
}

/// [`zo_vjp`] with explicitly supplied directions.
pub fn zo_vjp_with_draws<F>(
    evaluate: F,
    m0: &[f64],
    base_output: &[f64],
    v: &[f64],
    mu: f64,
    draws: &[PerturbationDraw],
) -> Result<(Vec<f64>, usize)>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    if draws.is_empty() {
        return Err(Error::config("estimator batch size b must be at least 1"));
    }
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::config(format!("perturbation size mu must be positive, got {mu}")));
    }
    if v.len() != base_output.len() {
        return Err(Error::input(format!(
            "cotangent length {} does not match output length {}",
            v.len(),
            base_output.len()
        )));
    }
    if let Some(bad) = draws.iter().find(|d| d.direction.len() != m0.len()) {
        return Err(Error::input(format!(
            "perturbation of length {} for {} parameters",
            bad.direction.len(),
            m0.len()
        )));
    }

    let quotients = crate::par::map_indices(draws.len(), |j| -> Result<f64> {
        let shifted: Vec<f64> = m0.iter().zip(&draws[j].direction).map(|(m, u)| m + mu * u).collect();
        let out = evaluate(&shifted)?;
        if out.len() != base_output.len() {
            return Err(Error::input(format!(
                "black box returned {} outputs, expected {}",
                out.len(),
                base_output.len()
            )));
        }
        if out.iter().any(|o| !o.is_finite()) {
            return Err(Error::NonFinite("black box returned a non-finite output".into()));
        }
        Ok(out.iter().zip(base_output).zip(v).map(|((o, o0), vk)| vk * (o - o0)).sum::<f64>() / mu)
    });

    let b = draws.len() as f64;
    let mut grad = vec![0.0; m0.len()];
    for (draw, s) in draws.iter().zip(quotients) {
        let s = s?;
        for (g, u) in grad.iter_mut().zip(&draw.direction) {
            *g += s * u;
        }
    }
    for g in &mut grad {
        *g /= b;
    }
    Ok((grad, draws.len()))
}

/// The scalar-output estimator. Evaluates `f(m0)` once, then `b` more times.
pub fn zo_grad_scalar<F>(f: F, m0: &[f64], spec: &EstimatorSpec) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let base = [f(m0)?];
    let (grad, _) = zo_vjp(|m: &[f64]| f(m).map(|y| vec![y]), m0, &base, &[1.0], spec)?;
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorStats {
    pub mean: Vec<f64>,
    /// Componentwise sample variance (divided by `trials - 1`).
    pub variance: Vec<f64>,
}

/// Empirical mean and variance of [`zo_grad_scalar`] over independent trials
/// seeded `spec.seed + trial`.
pub fn estimator_stats<F>(f: F, m0: &[f64], spec: &EstimatorSpec, trials: usize) -> Result<EstimatorStats>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if trials < 2 {
        return Err(Error::config(format!("estimator statistics need at least 2 trials, got {trials}")));
    }
    spec.validate(m0.len())?;
    let base = f(m0)?;
    let estimates = crate::par::map_indices(trials, |t| {
        let s = spec.with_seed(spec.seed.wrapping_add(t as u64));
        zo_vjp(|m: &[f64]| f(m).map(|y| vec![y]), m0, &[base], &[1.0], &s).map(|(g, _)| g)
    });
    let n = trials as f64;
    let dim = m0.len();
    let mut mean = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    let estimates: Vec<Vec<f64>> = estimates.into_iter().collect::<Result<_>>()?;
    for g in &estimates {
        for k in 0..dim {
            mean[k] += g[k];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for g in &estimates {
        for k in 0..dim {
            sq[k] += (g[k] - mean[k]).powi(2);
        }
    }
    let variance = sq.into_iter().map(|s| s / (n - 1.0)).collect();
    Ok(EstimatorStats { mean, variance })
}
