//! Tensor-product meshes on the unit square, nodal fields, and the
//! nearest-neighbour transfer between a coarse and a fine mesh.
//!
//! The trainable coordinates of a coarse mesh are its interior grid-line
//! positions: interior x-lines first, then interior y-lines. Boundary lines
//! sit at 0 and 1 and never move.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default minimum spacing between consecutive grid lines.
pub const DEFAULT_MIN_GAP: f64 = 1e-4;

/// Relative slack used when validating gaps produced by the projection.
const GAP_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMesh {
    x_lines: Vec<f64>,
    y_lines: Vec<f64>,
    min_gap: f64,
}

impl TensorMesh {
    /// Builds a mesh from explicit line positions, validating every invariant.
    pub fn new(x_lines: Vec<f64>, y_lines: Vec<f64>) -> Result<Self> {
        Self::with_min_gap(x_lines, y_lines, DEFAULT_MIN_GAP)
    }

    pub fn with_min_gap(x_lines: Vec<f64>, y_lines: Vec<f64>, min_gap: f64) -> Result<Self> {
        if !(min_gap > 0.0 && min_gap.is_finite()) {
            return Err(Error::config(format!("minimum gap must be positive, got {min_gap}")));
        }
        validate_lines("x", &x_lines, min_gap)?;
        validate_lines("y", &y_lines, min_gap)?;
        Ok(Self { x_lines, y_lines, min_gap })
    }

    /// Uniform `nx` by `ny` mesh.
    pub fn uniform(nx: usize, ny: usize) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::config(format!("uniform mesh needs at least 2 lines per axis, got {nx}x{ny}")));
        }
        Self::new(uniform_lines(nx), uniform_lines(ny))
    }

    pub fn x_lines(&self) -> &[f64] {
        &self.x_lines
    }

    pub fn y_lines(&self) -> &[f64] {
        &self.y_lines
    }

    pub fn min_gap(&self) -> f64 {
        self.min_gap
    }

    pub fn nx(&self) -> usize {
        self.x_lines.len()
    }

    pub fn ny(&self) -> usize {
        self.y_lines.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx(), self.ny())
    }

    pub fn node_count(&self) -> usize {
        self.nx() * self.ny()
    }

    /// Number of trainable coordinates.
    pub fn param_dim(&self) -> usize {
        (self.nx() - 2) + (self.ny() - 2)
    }

    /// Flat index of node `(i, j)`; storage is row-major over `(j, i)`.
    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx() + i
    }

    pub fn node(&self, i: usize, j: usize) -> (f64, f64) {
        (self.x_lines[i], self.y_lines[j])
    }

    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i + 1 == self.nx() || j + 1 == self.ny()
    }

    /// Swaps the roles of x and y.
    pub fn transposed(&self) -> Self {
        Self {
            x_lines: self.y_lines.clone(),
            y_lines: self.x_lines.clone(),
            min_gap: self.min_gap,
        }
    }
}

fn uniform_lines(n: usize) -> Vec<f64> {
    let last = (n - 1) as f64;
    (0..n).map(|k| k as f64 / last).collect()
}

fn validate_lines(axis: &str, lines: &[f64], min_gap: f64) -> Result<()> {
    if lines.len() < 2 {
        return Err(Error::input(format!("{axis}-lines need at least two entries")));
    }
    if lines.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{axis}-lines contain a non-finite position")));
    }
    if lines[0] != 0.0 || *lines.last().unwrap() != 1.0 {
        return Err(Error::input(format!("{axis}-lines must start at 0 and end at 1")));
    }
    for w in lines.windows(2) {
        if w[1] - w[0] < min_gap * (1.0 - GAP_SLACK) {
            return Err(Error::input(format!(
                "{axis}-lines {} and {} are closer than the minimum gap {min_gap}",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    alpha: f64,
}

impl ScenarioParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be positive and finite, got {alpha}")));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Nodal values on a tensor mesh, row-major over `(j, i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    values: Vec<f64>,
    nx: usize,
    ny: usize,
}

impl Field {
    pub fn new(nx: usize, ny: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != nx * ny {
            return Err(Error::input(format!(
                "field of shape {nx}x{ny} needs {} values, got {}",
                nx * ny,
                values.len()
            )));
        }
        Ok(Self { values, nx, ny })
    }

    pub fn zeros(nx: usize, ny: usize) -> Self {
        Self { values: vec![0.0; nx * ny], nx, ny }
    }

    pub fn zeros_on(mesh: &TensorMesh) -> Self {
        Self::zeros(mesh.nx(), mesh.ny())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.nx + i]
    }

    pub fn dot(&self, other: &Field) -> Result<f64> {
        self.check_shape(other.shape())?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn transposed(&self) -> Self {
        let mut out = Vec::with_capacity(self.values.len());
        for i in 0..self.nx {
            for j in 0..self.ny {
                out.push(self.get(i, j));
            }
        }
        Self { values: out, nx: self.ny, ny: self.nx }
    }

    fn check_shape(&self, shape: (usize, usize)) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::input(format!(
                "field shape {:?} does not match expected {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(())
    }

    /// CSV form: a `# nx=<nx> ny=<ny>` header, then one row per y-line.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# nx={} ny={}\n", self.nx, self.ny);
        for row in self.values.chunks(self.nx) {
            for (k, v) in row.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                write!(out, "{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::input("empty field CSV"))?;
        let (nx, ny) = parse_header(header)?;
        let mut values = Vec::with_capacity(nx * ny);
        let mut rows = 0;
        for line in lines {
            let row: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::input(format!("bad value {s:?}: {e}"))))
                .collect::<Result<_>>()?;
            if row.len() != nx {
                return Err(Error::input(format!("row {rows} has {} values, expected {nx}", row.len())));
            }
            values.extend(row);
            rows += 1;
        }
        if rows != ny {
            return Err(Error::input(format!("expected {ny} rows, found {rows}")));
        }
        Field::new(nx, ny, values)
    }
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let body = line
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| Error::input("field CSV header must start with '#'"))?;
    let mut nx = None;
    let mut ny = None;
    for tok in body.split_whitespace() {
        if let Some(v) = tok.strip_prefix("nx=") {
            nx = v.parse().ok();
        } else if let Some(v) = tok.strip_prefix("ny=") {
            ny = v.parse().ok();
        }
    }
    match (nx, ny) {
        (Some(nx), Some(ny)) => Ok((nx, ny)),
        _ => Err(Error::input(format!("malformed field CSV header {line:?}"))),
    }
}

/// Coarse mesh whose lines are the uniform fine lines taken at a fixed stride.
pub fn init_coarse_from_fine(fine_nx: usize, fine_ny: usize, coarse_nx: usize, coarse_ny: usize) -> Result<TensorMesh> {
    let x = subsample_axis("x", fine_nx, coarse_nx)?;
    let y = subsample_axis("y", fine_ny, coarse_ny)?;
    TensorMesh::new(x, y)
}

fn subsample_axis(axis: &str, fine: usize, coarse: usize) -> Result<Vec<f64>> {
    if coarse < 3 {
        return Err(Error::config(format!("coarse {axis}-count must be at least 3, got {coarse}")));
    }
    if fine < coarse || (fine - 1) % (coarse - 1) != 0 {
        return Err(Error::config(format!(
            "fine {axis}-count {fine} cannot be subsampled to {coarse} (need (fine-1) divisible by (coarse-1))"
        )));
    }
    let stride = (fine - 1) / (coarse - 1);
    let fine_lines = uniform_lines(fine);
    Ok((0..coarse).map(|k| fine_lines[k * stride]).collect())
}

/// Interior x-lines followed by interior y-lines.
pub fn mesh_to_params(mesh: &TensorMesh) -> Vec<f64> {
    let nx = mesh.nx();
    let ny = mesh.ny();
    mesh.x_lines[1..nx - 1]
        .iter()
        .chain(&mesh.y_lines[1..ny - 1])
        .copied()
        .collect()
}

/// Replaces the interior lines of `template` with `params` and projects the
/// result back onto the feasible set (sorted, gaps at least `min_gap`).
pub fn params_to_mesh(template: &TensorMesh, params: &[f64]) -> Result<TensorMesh> {
    let dx = template.nx() - 2;
    let dy = template.ny() - 2;
    if params.len() != dx + dy {
        return Err(Error::input(format!(
            "mesh has {} trainable coordinates, got {}",
            dx + dy,
            params.len()
        )));
    }
    if let Some(k) = params.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("mesh parameter {k} is {}", params[k])));
    }
    let s = template.min_gap;
    let x = project_lines(&params[..dx], s);
    let y = project_lines(&params[dx..], s);
    TensorMesh::with_min_gap(x, y, s).map_err(|e| match e {
        Error::Input(msg) => Error::config(format!("minimum gap too large for this mesh: {msg}")),
        other => other,
    })
}

fn project_lines(interior: &[f64], min_gap: f64) -> Vec<f64> {
    let mut sorted = interior.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() + 1;
    let mut lines = Vec::with_capacity(n + 1);
    lines.push(0.0);
    for (k, v) in sorted.into_iter().enumerate() {
        let idx = k + 1;
        let lower = lines[idx - 1] + min_gap;
        let upper = 1.0 - (n - idx) as f64 * min_gap;
        lines.push(v.max(lower).min(upper));
    }
    lines.push(1.0);
    lines
}

/// Nearest-node assignment from every fine node to a coarse node.
///
/// On a tensor mesh the Euclidean nearest node factors into the nearest
/// x-line and the nearest y-line; ties go to the smaller index on each axis,
/// which is the lexicographically smallest node among the tied set.
#[derive(Debug, Clone, PartialEq)]
pub struct UpsampleMap {
    coarse_shape: (usize, usize),
    fine_shape: (usize, usize),
    source: Vec<usize>,
}

impl UpsampleMap {
    pub fn new(coarse: &TensorMesh, fine: &TensorMesh) -> Self {
        let xi: Vec<usize> = fine.x_lines.iter().map(|&x| nearest_line(&coarse.x_lines, x)).collect();
        let yj: Vec<usize> = fine.y_lines.iter().map(|&y| nearest_line(&coarse.y_lines, y)).collect();
        let mut source = Vec::with_capacity(fine.node_count());
        for &j in &yj {
            for &i in &xi {
                source.push(coarse.index(i, j));
            }
        }
        Self { coarse_shape: coarse.shape(), fine_shape: fine.shape(), source }
    }

    /// Coarse flat index feeding each fine node.
    pub fn source(&self) -> &[usize] {
        &self.source
    }

    pub fn apply(&self, coarse_field: &Field) -> Result<Field> {
        coarse_field.check_shape(self.coarse_shape)?;
        let values = self.source.iter().map(|&c| coarse_field.values[c]).collect();
        Field::new(self.fine_shape.0, self.fine_shape.1, values)
    }

    pub fn adjoint(&self, fine_cotangent: &Field) -> Result<Field> {
        fine_cotangent.check_shape(self.fine_shape)?;
        let mut out = Field::zeros(self.coarse_shape.0, self.coarse_shape.1);
        for (&c, &g) in self.source.iter().zip(&fine_cotangent.values) {
            out.values[c] += g;
        }
        Ok(out)
    }
}

fn nearest_line(lines: &[f64], p: f64) -> usize {
    let mut best = 0;
    let mut best_dist = (p - lines[0]).abs();
    for (k, &l) in lines.iter().enumerate().skip(1) {
        let d = (p - l).abs();
        if d < best_dist {
            best = k;
            best_dist = d;
        }
    }
    best
}

pub fn nearest_upsample(coarse: &TensorMesh, field: &Field, fine: &TensorMesh) -> Result<Field> {
    UpsampleMap::new(coarse, fine).apply(field)
}

/// Transpose of [`nearest_upsample`]: scatter-adds fine cotangents onto the
/// coarse nodes they were copied from.
pub fn upsample_adjoint(coarse: &TensorMesh, fine: &TensorMesh, fine_cotangent: &Field) -> Result<Field> {
    UpsampleMap::new(coarse, fine).adjoint(fine_cotangent)
}
