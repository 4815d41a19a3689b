//! Finite-difference elliptic forward models on the unit square: operator
//! assembly with harmonic-mean face conductivities, direct and iterative
//! linear solvers, the sensor observation model, and adjoint gradients of the
//! data misfit with respect to the log-field.
//!
//! Two problem kinds share the machinery: recovering a log-conductivity under
//! a constant volumetric source, and recovering a log-source under unit
//! conductivity. Both impose homogeneous Dirichlet conditions on an n×n node
//! grid. Parameter fields and their gradients live on the full n² nodes
//! (boundary included — boundary conductivities enter the interior equations
//! through their shared faces), while the linear systems act on the (n−2)²
//! interior unknowns and temperatures vanish on the boundary by construction.
//! Both vector lengths therefore appear in the public API; the full-grid one
//! is the parameterization, the interior one is the solver's.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Log-fields are clipped to this symmetric bound before exponentiation so a
/// wild optimizer step cannot overflow the assembly. The bound is far outside
/// any plausible posterior, so it never binds at convergence.
pub const LOG_FIELD_CLAMP: f64 = 12.0;

/// Constant volumetric source driving the conductivity problem.
pub const CONDUCTIVITY_SOURCE: f64 = 50.0;

const SOLVER_TOL: f64 = 1e-10;

/// Which elliptic inverse problem a field parameterizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    /// −∇·(κ∇T) = f with κ = exp(x) and constant f; x is log-conductivity.
    Conductivity,
    /// −ΔT = b with b = exp(x) and unit conductivity; x is log-source.
    Source,
}

/// Uniform n×n node grid on [0,1]² with spacing h = 1/(n−1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    n: usize,
}

impl Grid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::config(format!("grid needs n >= 3, got {n}")));
        }
        Ok(Grid { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.n as f64 - 1.0)
    }

    pub fn num_nodes(&self) -> usize {
        self.n * self.n
    }

    pub fn num_interior(&self) -> usize {
        (self.n - 2) * (self.n - 2)
    }

    /// Row-major node id of grid point (ix, iy).
    pub fn node(&self, ix: usize, iy: usize) -> usize {
        iy * self.n + ix
    }

    pub fn node_coords(&self, node: usize) -> (f64, f64) {
        let (ix, iy) = (node % self.n, node / self.n);
        (ix as f64 * self.h(), iy as f64 * self.h())
    }

    pub fn is_interior_node(&self, node: usize) -> bool {
        let (ix, iy) = (node % self.n, node / self.n);
        ix >= 1 && ix <= self.n - 2 && iy >= 1 && iy <= self.n - 2
    }

    /// Interior unknown index of interior point (ix, iy).
    pub fn interior_index(&self, ix: usize, iy: usize) -> usize {
        debug_assert!(ix >= 1 && ix <= self.n - 2 && iy >= 1 && iy <= self.n - 2);
        (iy - 1) * (self.n - 2) + (ix - 1)
    }

    /// Gathers interior values from a full n² nodal vector.
    pub fn extract_interior(&self, full: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_interior());
        for iy in 1..self.n - 1 {
            out.extend_from_slice(&full[self.node(1, iy)..self.node(self.n - 1, iy)]);
        }
        out
    }

    /// Scatters interior values into a full nodal vector, zero on the boundary.
    pub fn embed_interior(&self, interior: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_nodes()];
        for iy in 1..self.n - 1 {
            let k = (iy - 1) * (self.n - 2);
            out[self.node(1, iy)..self.node(self.n - 1, iy)]
                .copy_from_slice(&interior[k..k + self.n - 2]);
        }
        out
    }
}

/// Scalar field sampled at every grid node. Depending on context the values
/// are log-conductivity, log-source, or temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    grid: Grid,
    values: Vec<f64>,
}

impl Field2D {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.num_nodes() {
            return Err(Error::data(format!(
                "field has {} values for {} grid nodes",
                values.len(),
                grid.num_nodes()
            )));
        }
        Ok(Field2D { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        Field2D {
            grid,
            values: vec![0.0; grid.num_nodes()],
        }
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Field2D {
            grid,
            values: vec![value; grid.num_nodes()],
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
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
}

/// Symmetric positive-definite operator on the interior unknowns in
/// compressed sparse row form. Five-point stencil, so at most five nonzeros
/// per row; `bandwidth` records the half-bandwidth (n−2) the direct solver
/// exploits.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    nrows: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
    bandwidth: usize,
}

impl SparseOperator {
    /// Builds an operator from raw CSR arrays. Columns must be sorted within
    /// each row; the half-bandwidth is derived from the sparsity pattern.
    pub fn from_csr(
        nrows: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_offsets.len() != nrows + 1
            || row_offsets[0] != 0
            || *row_offsets.last().unwrap() != col_indices.len()
            || col_indices.len() != values.len()
        {
            return Err(Error::data("inconsistent CSR arrays"));
        }
        let mut bandwidth = 0;
        for i in 0..nrows {
            if row_offsets[i] > row_offsets[i + 1] {
                return Err(Error::data("CSR row offsets not monotone"));
            }
            let cols = &col_indices[row_offsets[i]..row_offsets[i + 1]];
            if !cols.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::data(format!("CSR row {i} columns not sorted")));
            }
            for &j in cols {
                if j >= nrows {
                    return Err(Error::data(format!("CSR column {j} out of bounds")));
                }
                bandwidth = bandwidth.max(i.abs_diff(j));
            }
        }
        Ok(SparseOperator {
            nrows,
            row_offsets,
            col_indices,
            values,
            bandwidth,
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.nrows];
        for i in 0..self.nrows {
            let mut acc = 0.0;
            for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                acc += self.values[k] * x[self.col_indices[k]];
            }
            y[i] = acc;
        }
        y
    }

    /// Entry lookup by linear scan of the (≤5-entry) row; test support.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        for k in self.row_offsets[i]..self.row_offsets[i + 1] {
            if self.col_indices[k] == j {
                return self.values[k];
            }
        }
        0.0
    }
}

fn harmonic_mean(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Assembles the interior diffusion operator for κ = exp(x) with
/// homogeneous Dirichlet conditions. Face conductivities are harmonic means
/// of the two adjacent nodal values — the flux-conserving choice, and the
/// one that keeps the operator symmetric.
pub fn assemble_diffusion(x: &Field2D) -> Result<SparseOperator> {
    let grid = x.grid();
    let n = grid.n();
    let mut kappa = Vec::with_capacity(grid.num_nodes());
    for (node, &v) in x.values().iter().enumerate() {
        let k = v.exp();
        if !k.is_finite() {
            return Err(Error::NonFinite {
                context: "assemble_diffusion: exp(log-field)",
                node: Some(node),
            });
        }
        kappa.push(k);
    }
    let inv_h2 = 1.0 / (grid.h() * grid.h());
    let ni = grid.num_interior();
    let mut row_offsets = Vec::with_capacity(ni + 1);
    let mut col_indices = Vec::with_capacity(5 * ni);
    let mut values = Vec::with_capacity(5 * ni);
    row_offsets.push(0);
    for iy in 1..n - 1 {
        for ix in 1..n - 1 {
            let center = kappa[grid.node(ix, iy)];
            // columns pushed in ascending order: S, W, diag, E, N
            let neighbors = [
                (ix, iy - 1),
                (ix - 1, iy),
                (ix + 1, iy),
                (ix, iy + 1),
            ];
            let mut diag = 0.0;
            let mut off: [Option<(usize, f64)>; 4] = [None; 4];
            for (slot, &(jx, jy)) in neighbors.iter().enumerate() {
                let face = harmonic_mean(center, kappa[grid.node(jx, jy)]) * inv_h2;
                diag += face;
                if jx >= 1 && jx <= n - 2 && jy >= 1 && jy <= n - 2 {
                    off[slot] = Some((grid.interior_index(jx, jy), -face));
                }
            }
            for slot in 0..2 {
                if let Some((col, v)) = off[slot] {
                    col_indices.push(col);
                    values.push(v);
                }
            }
            col_indices.push(grid.interior_index(ix, iy));
            values.push(diag);
            for slot in 2..4 {
                if let Some((col, v)) = off[slot] {
                    col_indices.push(col);
                    values.push(v);
                }
            }
            row_offsets.push(col_indices.len());
        }
    }
    Ok(SparseOperator {
        nrows: ni,
        row_offsets,
        col_indices,
        values,
        bandwidth: n - 2,
    })
}

/// Unit-conductivity operator (the standard 5-point Laplacian).
pub fn unit_laplacian(grid: Grid) -> Result<SparseOperator> {
    assemble_diffusion(&Field2D::zeros(grid))
}

/// Solves A T = f to a relative residual below 1e-10. Picks a banded
/// Cholesky factorization up to 4096 unknowns and diagonally preconditioned
/// conjugate gradients beyond; the residual contract is audited either way.
pub fn solve(a: &SparseOperator, f: &[f64]) -> Result<Vec<f64>> {
    if f.len() != a.nrows {
        return Err(Error::ShapeMismatch {
            op: "solve",
            lhs: vec![a.nrows, a.nrows],
            rhs: vec![f.len()],
        });
    }
    let x = if a.nrows <= 4096 {
        banded_cholesky_solve(a, f)?
    } else {
        cg_solve(a, f)?
    };
    let fnorm = norm2(f);
    if fnorm > 0.0 {
        let r = residual_norm(a, &x, f) / fnorm;
        if !(r < SOLVER_TOL) {
            return Err(Error::SolverDiverged {
                residual: r,
                iters: 0,
            });
        }
    }
    Ok(x)
}

fn norm2(v: &[f64]) -> f64 {
    crate::tensor::dot(v, v).sqrt()
}

fn residual_norm(a: &SparseOperator, x: &[f64], f: &[f64]) -> f64 {
    let ax = a.apply(x);
    let mut s = 0.0;
    for i in 0..f.len() {
        let d = ax[i] - f[i];
        s += d * d;
    }
    s.sqrt()
}

/// Direct solve via a dense-band Cholesky factorization. The 5-point stencil
/// in row-major interior ordering has half-bandwidth n−2, so the factor fits
/// in (n−2)³ doubles — trivial at the grid sizes routed here.
fn banded_cholesky_solve(a: &SparseOperator, f: &[f64]) -> Result<Vec<f64>> {
    let nr = a.nrows;
    let w = a.bandwidth.min(nr.saturating_sub(1));
    let stride = w + 1;
    // band[i*stride + (j − i + w)] holds row i, column j for j in [i−w, i]
    let mut band = vec![0.0; nr * stride];
    for i in 0..nr {
        for k in a.row_offsets[i]..a.row_offsets[i + 1] {
            let j = a.col_indices[k];
            if j <= i {
                debug_assert!(i - j <= w);
                band[i * stride + (j + w - i)] = a.values[k];
            }
        }
    }
    for i in 0..nr {
        let j0 = i.saturating_sub(w);
        for j in j0..=i {
            let k0 = j.saturating_sub(w).max(j0);
            let (rows_j, rows_i) = band.split_at_mut(i * stride);
            let row_i = &mut rows_i[..stride];
            let s = if i == j {
                let ri = &row_i[k0 + w - i..j + w - i];
                row_i[w] - crate::tensor::dot(ri, ri)
            } else {
                let row_j = &rows_j[j * stride..(j + 1) * stride];
                row_i[j + w - i]
                    - crate::tensor::dot(
                        &row_i[k0 + w - i..j + w - i],
                        &row_j[k0 + w - j..j + w - j],
                    )
            };
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::CholeskyFailed { pivot: i, value: s });
                }
                row_i[w] = s.sqrt();
            } else {
                let djj = rows_j[j * stride + w];
                row_i[j + w - i] = s / djj;
            }
        }
    }
    // forward substitution L y = f
    let mut y = f.to_vec();
    for i in 0..nr {
        let j0 = i.saturating_sub(w);
        let mut s = y[i];
        for j in j0..i {
            s -= band[i * stride + (j + w - i)] * y[j];
        }
        y[i] = s / band[i * stride + w];
    }
    // back substitution Lᵀ x = y
    let mut x = y;
    for i in (0..nr).rev() {
        let jmax = (i + w).min(nr - 1);
        let mut s = x[i];
        for j in i + 1..=jmax {
            s -= band[j * stride + (i + w - j)] * x[j];
        }
        x[i] = s / band[i * stride + w];
    }
    Ok(x)
}

/// Conjugate gradients with Jacobi (diagonal) preconditioning for grids too
/// large for the direct path.
fn cg_solve(a: &SparseOperator, f: &[f64]) -> Result<Vec<f64>> {
    let nr = a.nrows;
    let mut inv_diag = vec![0.0; nr];
    for i in 0..nr {
        inv_diag[i] = 1.0 / a.entry(i, i);
    }
    let fnorm = norm2(f);
    if fnorm == 0.0 {
        return Ok(vec![0.0; nr]);
    }
    let mut x = vec![0.0; nr];
    let mut r = f.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, d)| ri * d).collect();
    let mut p = z.clone();
    let mut rz = crate::tensor::dot(&r, &z);
    let cap = 10 * nr;
    for iter in 0..cap {
        // tighten past the contract so the audit in solve() has margin
        if norm2(&r) / fnorm < 0.1 * SOLVER_TOL {
            return Ok(x);
        }
        let ap = a.apply(&p);
        let alpha = rz / crate::tensor::dot(&p, &ap);
        if !alpha.is_finite() {
            return Err(Error::SolverDiverged {
                residual: norm2(&r) / fnorm,
                iters: iter,
            });
        }
        crate::tensor::axpy(&mut x, alpha, &p);
        crate::tensor::axpy(&mut r, -alpha, &ap);
        for i in 0..nr {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = crate::tensor::dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..nr {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::SolverDiverged {
        residual: norm2(&r) / fnorm,
        iters: cap,
    })
}

/// Sensor set: distinct interior node ids plus the observation noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationMask {
    sensors: Vec<usize>,
    sigma: f64,
}

impl ObservationMask {
    pub fn new(grid: Grid, sensors: Vec<usize>, sigma: f64) -> Result<Self> {
        if sensors.is_empty() {
            return Err(Error::config("observation mask needs at least one sensor"));
        }
        if !(sigma > 0.0) {
            return Err(Error::config(format!("noise std must be positive, got {sigma}")));
        }
        let mut seen = std::collections::HashSet::new();
        for &s in &sensors {
            if !grid.is_interior_node(s) {
                return Err(Error::config(format!("sensor node {s} is not interior")));
            }
            if !seen.insert(s) {
                return Err(Error::config(format!("duplicate sensor node {s}")));
            }
        }
        Ok(ObservationMask { sensors, sigma })
    }

    /// Draws m sensors uniformly without replacement from the interior nodes.
    /// Sensors are kept in ascending node order so observation vectors have a
    /// canonical layout independent of the draw order.
    pub fn random(grid: Grid, m: usize, sigma: f64, rng: &mut impl Rng) -> Result<Self> {
        let n = grid.n();
        let mut pool: Vec<usize> = (1..n - 1)
            .flat_map(|iy| (1..n - 1).map(move |ix| iy * n + ix))
            .collect();
        if m > pool.len() {
            return Err(Error::config(format!(
                "requested {m} sensors but the grid has {} interior nodes",
                pool.len()
            )));
        }
        for i in 0..m {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        let mut sensors = pool[..m].to_vec();
        sensors.sort_unstable();
        ObservationMask::new(grid, sensors, sigma)
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn sensors(&self) -> &[usize] {
        &self.sensors
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Reads the field at the sensor nodes.
    pub fn observe(&self, t: &Field2D) -> Vec<f64> {
        self.sensors.iter().map(|&s| t.values()[s]).collect()
    }
}

fn clamped_exp_field(x: &Field2D) -> Vec<f64> {
    x.values()
        .iter()
        .map(|&v| v.clamp(-LOG_FIELD_CLAMP, LOG_FIELD_CLAMP).exp())
        .collect()
}

/// 1 where the clamp is inactive, 0 where it binds; gradients through the
/// clamp vanish outside the open interval, matching the autodiff convention.
fn clamp_mask(x: &Field2D) -> Vec<f64> {
    x.values()
        .iter()
        .map(|&v| {
            if v > -LOG_FIELD_CLAMP && v < LOG_FIELD_CLAMP {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

fn clamped_field(x: &Field2D) -> Field2D {
    Field2D {
        grid: x.grid(),
        values: x
            .values()
            .iter()
            .map(|&v| v.clamp(-LOG_FIELD_CLAMP, LOG_FIELD_CLAMP))
            .collect(),
    }
}

/// Solves the forward problem for the given log-field and returns the full
/// temperature field (zero on the boundary).
pub fn forward(x: &Field2D, kind: ProblemKind) -> Result<Field2D> {
    let grid = x.grid();
    let t_int = match kind {
        ProblemKind::Conductivity => {
            let a = assemble_diffusion(&clamped_field(x))?;
            let f = vec![CONDUCTIVITY_SOURCE; grid.num_interior()];
            solve(&a, &f)?
        }
        ProblemKind::Source => {
            let a = unit_laplacian(grid)?;
            let b = clamped_exp_field(x);
            solve(&a, &grid.extract_interior(&b))?
        }
    };
    Field2D::new(grid, grid.embed_interior(&t_int))
}

/// Gaussian data misfit Φ(x; y) = ‖y − M T(x)‖² / (2σ²).
pub fn misfit(x: &Field2D, y: &[f64], mask: &ObservationMask, kind: ProblemKind) -> Result<f64> {
    let t = forward(x, kind)?;
    let pred = mask.observe(&t);
    if pred.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "misfit",
            lhs: vec![pred.len()],
            rhs: vec![y.len()],
        });
    }
    let s2 = mask.sigma() * mask.sigma();
    Ok(pred
        .iter()
        .zip(y)
        .map(|(p, o)| (p - o) * (p - o))
        .sum::<f64>()
        / (2.0 * s2))
}

/// Misfit and its gradient with respect to the log-field in one pass: one
/// forward solve, one adjoint solve A λ = Mᵀ(MT − y)/σ² (A is symmetric),
/// then the chain rule through the κ- or b-dependence.
pub fn misfit_and_grad(
    x: &Field2D,
    y: &[f64],
    mask: &ObservationMask,
    kind: ProblemKind,
) -> Result<(f64, Field2D)> {
    let grid = x.grid();
    let n = grid.n();
    let s2 = mask.sigma() * mask.sigma();
    let mask01 = clamp_mask(x);

    let (a, t_int) = match kind {
        ProblemKind::Conductivity => {
            let a = assemble_diffusion(&clamped_field(x))?;
            let f = vec![CONDUCTIVITY_SOURCE; grid.num_interior()];
            let t = solve(&a, &f)?;
            (a, t)
        }
        ProblemKind::Source => {
            let a = unit_laplacian(grid)?;
            let b = clamped_exp_field(x);
            let t = solve(&a, &grid.extract_interior(&b))?;
            (a, t)
        }
    };
    let t_full = grid.embed_interior(&t_int);

    let mut phi = 0.0;
    let mut rhs = vec![0.0; grid.num_interior()];
    for (s, &node) in mask.sensors().iter().enumerate() {
        let r = t_full[node] - y[s];
        phi += r * r;
        let (ix, iy) = (node % n, node / n);
        rhs[grid.interior_index(ix, iy)] += r / s2;
    }
    phi /= 2.0 * s2;

    let lambda_int = solve(&a, &rhs)?;
    let lambda = grid.embed_interior(&lambda_int);

    let mut grad = vec![0.0; grid.num_nodes()];
    match kind {
        ProblemKind::Conductivity => {
            let kappa = clamped_exp_field(x);
            let inv_h2 = 1.0 / (grid.h() * grid.h());
            // Φ depends on each face conductivity through A alone:
            // ∂Φ/∂κ_f = −λᵀ(∂A/∂κ_f)T = −(λ_a − λ_b)(T_a − T_b)/h², with λ, T
            // zero-extended to the boundary. Faces between two boundary nodes
            // contribute nothing since both factors vanish.
            let mut face = |na: usize, nb: usize| {
                let dphi_dkf = -(lambda[na] - lambda[nb]) * (t_full[na] - t_full[nb]) * inv_h2;
                if dphi_dkf != 0.0 {
                    let (ka, kb) = (kappa[na], kappa[nb]);
                    let denom = (ka + kb) * (ka + kb);
                    grad[na] += dphi_dkf * 2.0 * kb * kb / denom;
                    grad[nb] += dphi_dkf * 2.0 * ka * ka / denom;
                }
            };
            for iy in 0..n {
                for ix in 0..n - 1 {
                    face(grid.node(ix, iy), grid.node(ix + 1, iy));
                }
            }
            for iy in 0..n - 1 {
                for ix in 0..n {
                    face(grid.node(ix, iy), grid.node(ix, iy + 1));
                }
            }
            for node in 0..grid.num_nodes() {
                grad[node] *= kappa[node] * mask01[node];
            }
        }
        ProblemKind::Source => {
            // ∂Φ/∂b_i = λ_i on the interior; b never enters boundary rows.
            let b = clamped_exp_field(x);
            for node in 0..grid.num_nodes() {
                grad[node] = lambda[node] * b[node] * mask01[node];
            }
        }
    }

    Ok((phi, Field2D::new(grid, grad)?))
}

/// Gradient of the misfit with respect to the log-field.
pub fn misfit_grad(
    x: &Field2D,
    y: &[f64],
    mask: &ObservationMask,
    kind: ProblemKind,
) -> Result<Field2D> {
    misfit_and_grad(x, y, mask, kind).map(|(_, g)| g)
}

/// Directional derivative of the forward map: returns (T, dT) where dT is
/// the tangent of the temperature field along the log-field direction dx.
/// One extra linear solve with the already-assembled operator.
pub fn forward_tangent(
    x: &Field2D,
    dx: &Field2D,
    kind: ProblemKind,
) -> Result<(Field2D, Field2D)> {
    let grid = x.grid();
    let n = grid.n();
    let mask01 = clamp_mask(x);
    match kind {
        ProblemKind::Conductivity => {
            let kappa = clamped_exp_field(x);
            let a = assemble_diffusion(&clamped_field(x))?;
            let f = vec![CONDUCTIVITY_SOURCE; grid.num_interior()];
            let t_int = solve(&a, &f)?;
            let t_full = grid.embed_interior(&t_int);
            // A dT = −(dA)T: accumulate the face-differential application.
            let dkappa: Vec<f64> = (0..grid.num_nodes())
                .map(|i| kappa[i] * dx.values()[i] * mask01[i])
                .collect();
            let inv_h2 = 1.0 / (grid.h() * grid.h());
            let mut w = vec![0.0; grid.num_nodes()];
            let mut face = |na: usize, nb: usize| {
                let (ka, kb) = (kappa[na], kappa[nb]);
                let denom = (ka + kb) * (ka + kb);
                let dkf = (2.0 * kb * kb * dkappa[na] + 2.0 * ka * ka * dkappa[nb]) / denom;
                let flux = dkf * (t_full[na] - t_full[nb]) * inv_h2;
                w[na] += flux;
                w[nb] -= flux;
            };
            for iy in 0..n {
                for ix in 0..n - 1 {
                    face(grid.node(ix, iy), grid.node(ix + 1, iy));
                }
            }
            for iy in 0..n - 1 {
                for ix in 0..n {
                    face(grid.node(ix, iy), grid.node(ix, iy + 1));
                }
            }
            let rhs: Vec<f64> = grid.extract_interior(&w).iter().map(|v| -v).collect();
            let dt_int = solve(&a, &rhs)?;
            Ok((
                Field2D::new(grid, t_full)?,
                Field2D::new(grid, grid.embed_interior(&dt_int))?,
            ))
        }
        ProblemKind::Source => {
            let a = unit_laplacian(grid)?;
            let b = clamped_exp_field(x);
            let t_int = solve(&a, &grid.extract_interior(&b))?;
            let db: Vec<f64> = (0..grid.num_nodes())
                .map(|i| b[i] * dx.values()[i] * mask01[i])
                .collect();
            let dt_int = solve(&a, &grid.extract_interior(&db))?;
            Ok((
                Field2D::new(grid, grid.embed_interior(&t_int))?,
                Field2D::new(grid, grid.embed_interior(&dt_int))?,
            ))
        }
    }
}
