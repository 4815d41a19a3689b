//! Anisotropic squared-exponential Gaussian processes in whitened
//! coordinates, and the log-posteriors of the two GP baselines.
//!
//! The kernel on the square grid separates as K = σ²·K_y ⊗ K_x, so its
//! Cholesky factor is the Kronecker product of the two 1-D factors and the
//! whitened-to-field map is a pair of 28×28 triangular matrix products
//! instead of a 784×784 one. The dense kernel path (`se_kernel_matrix` +
//! `chol_jitter`) exists alongside it and the tests pin the two together;
//! the factored path is what the samplers hit every leapfrog step.
//!
//! The hierarchical baseline samples hyperparameters through a logit
//! reparameterization onto their (uniform) prior ranges, so HMC sees an
//! unconstrained vector. The whitened (non-centered) form is used throughout;
//! no funnel reparameterization beyond that is attempted.

use rand::Rng;

use crate::linalg::{cholesky_differential, chol_jitter_ladder};
use crate::pde::{misfit_and_grad, Field2D, Grid, ObservationMask, ProblemKind};
use crate::tensor::{dot, sigmoid, Tensor};
use crate::{Error, Result};

/// Hyperparameters of the anisotropic squared-exponential kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SEHyper {
    pub mu: f64,
    pub sigma: f64,
    pub ell_x: f64,
    pub ell_y: f64,
}

impl SEHyper {
    pub fn new(mu: f64, sigma: f64, ell_x: f64, ell_y: f64) -> Result<Self> {
        if !(sigma > 0.0 && ell_x > 0.0 && ell_y > 0.0) {
            return Err(Error::config(format!(
                "SE hyperparameters need sigma, ell_x, ell_y > 0, got ({sigma}, {ell_x}, {ell_y})"
            )));
        }
        if ![mu, sigma, ell_x, ell_y].iter().all(|v| v.is_finite()) {
            return Err(Error::config("non-finite SE hyperparameter"));
        }
        Ok(SEHyper {
            mu,
            sigma,
            ell_x,
            ell_y,
        })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.mu, self.sigma, self.ell_x, self.ell_y]
    }
}

/// Standard-normal coefficients, one per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenedField {
    grid: Grid,
    xi: Vec<f64>,
}

impl WhitenedField {
    pub fn new(grid: Grid, xi: Vec<f64>) -> Result<Self> {
        if xi.len() != grid.num_nodes() {
            return Err(Error::data(format!(
                "whitened field has {} coefficients for {} nodes",
                xi.len(),
                grid.num_nodes()
            )));
        }
        Ok(WhitenedField { grid, xi })
    }

    pub fn standard_normal(grid: Grid, rng: &mut impl Rng) -> Self {
        let xi = (0..grid.num_nodes())
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        WhitenedField { grid, xi }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }
}

/// Dense kernel matrix over all n² grid nodes.
pub fn se_kernel_matrix(grid: Grid, theta: &SEHyper) -> Tensor {
    let n = grid.n();
    let nn = grid.num_nodes();
    let h = grid.h();
    let s2 = theta.sigma * theta.sigma;
    let cx = 0.5 / (theta.ell_x * theta.ell_x);
    let cy = 0.5 / (theta.ell_y * theta.ell_y);
    let mut k = vec![0.0; nn * nn];
    for p in 0..nn {
        let (px, py) = (p % n, p / n);
        for q in p..nn {
            let (qx, qy) = (q % n, q / n);
            let dx = (px as f64 - qx as f64) * h;
            let dy = (py as f64 - qy as f64) * h;
            let v = s2 * (-cx * dx * dx - cy * dy * dy).exp();
            k[p * nn + q] = v;
            k[q * nn + p] = v;
        }
    }
    Tensor::matrix(nn, nn, k).expect("kernel dimensions are consistent")
}

/// Unit-variance 1-D squared-exponential kernel on n equispaced points.
fn se_kernel_1d(n: usize, h: f64, ell: f64) -> Tensor {
    let c = 0.5 / (ell * ell);
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = (i as f64 - j as f64) * h;
            k[i * n + j] = (-c * d * d).exp();
        }
    }
    Tensor::matrix(n, n, k).expect("kernel dimensions are consistent")
}

/// Derivative of the unit 1-D kernel with respect to its length scale.
fn se_kernel_1d_dl(n: usize, h: f64, ell: f64) -> Tensor {
    let c = 0.5 / (ell * ell);
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d2 = ((i as f64 - j as f64) * h).powi(2);
            k[i * n + j] = (-c * d2).exp() * d2 / (ell * ell * ell);
        }
    }
    Tensor::matrix(n, n, k).expect("kernel dimensions are consistent")
}

/// Cholesky-factored GP on a grid, exploiting the Kronecker separability of
/// the anisotropic SE kernel on a tensor-product grid.
#[derive(Debug, Clone)]
pub struct GpFactor {
    grid: Grid,
    theta: SEHyper,
    lx: Tensor,
    ly: Tensor,
}

impl GpFactor {
    pub fn new(grid: Grid, theta: &SEHyper) -> Result<Self> {
        let n = grid.n();
        let lx = chol_jitter(&se_kernel_1d(n, grid.h(), theta.ell_x))?;
        let ly = chol_jitter(&se_kernel_1d(n, grid.h(), theta.ell_y))?;
        Ok(GpFactor {
            grid,
            theta: *theta,
            lx,
            ly,
        })
    }

    pub fn theta(&self) -> &SEHyper {
        &self.theta
    }

    /// μ·1 + σ·vec(L_y Ξ L_xᵀ) with Ξ the coefficients reshaped row-major
    /// (row index = y). Affine in ξ by construction.
    pub fn field(&self, xi: &WhitenedField) -> Result<Field2D> {
        let n = self.grid.n();
        let xi_mat = Tensor::matrix(n, n, xi.xi().to_vec())?;
        let f = self.ly.matmul(&xi_mat)?.matmul_nt(&self.lx)?;
        let values = f
            .data()
            .iter()
            .map(|v| self.theta.mu + self.theta.sigma * v)
            .collect();
        Field2D::new(self.grid, values)
    }

    /// Pulls a gradient with respect to the field values back to ξ:
    /// ∇_ξ = σ·L_yᵀ G L_x.
    pub fn xi_vjp(&self, grad_field: &[f64]) -> Result<Vec<f64>> {
        let n = self.grid.n();
        let g = Tensor::matrix(n, n, grad_field.to_vec())?;
        let back = self.ly.matmul_tn(&g)?.matmul(&self.lx)?;
        Ok(back.data().iter().map(|v| self.theta.sigma * v).collect())
    }
}

/// Cholesky with a jitter ladder: returns the factor of K + jitter·I for the
/// smallest jitter in {1e-10, 1e-8, 1e-6} that succeeds.
pub fn chol_jitter(k: &Tensor) -> Result<Tensor> {
    chol_jitter_ladder(k, &[1e-10, 1e-8, 1e-6])
}

/// Draws the log-field μ·1 + Lξ.
pub fn sample_field(theta: &SEHyper, xi: &WhitenedField) -> Result<Field2D> {
    GpFactor::new(xi.grid(), theta)?.field(xi)
}

fn squared_norm(v: &[f64]) -> f64 {
    dot(v, v)
}

/// Maps solver-level failures to −∞ so a sampler treats the proposal as
/// rejected rather than aborting the chain.
fn misfit_or_reject(
    field: &Field2D,
    y: &[f64],
    mask: &ObservationMask,
    kind: ProblemKind,
) -> Result<Option<(f64, Field2D)>> {
    match misfit_and_grad(field, y, mask, kind) {
        Ok(v) => Ok(Some(v)),
        Err(Error::SolverDiverged { .. })
        | Err(Error::CholeskyFailed { .. })
        | Err(Error::NonFinite { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// GP-Fixed log-posterior −Φ(field(ξ); y) − ‖ξ‖²/2 (up to a constant) and
/// its gradient with respect to ξ, with the factor built from the oracle
/// hyperparameters.
pub fn gp_fixed_logpost_grad(
    xi: &WhitenedField,
    y: &[f64],
    mask: &ObservationMask,
    theta_star: &SEHyper,
    kind: ProblemKind,
) -> Result<(f64, Vec<f64>)> {
    let fac = GpFactor::new(xi.grid(), theta_star)?;
    gp_fixed_logpost_grad_with(&fac, xi, y, mask, kind)
}

/// As [`gp_fixed_logpost_grad`] but reusing a prebuilt factor; the samplers
/// call this once per leapfrog step.
pub fn gp_fixed_logpost_grad_with(
    fac: &GpFactor,
    xi: &WhitenedField,
    y: &[f64],
    mask: &ObservationMask,
    kind: ProblemKind,
) -> Result<(f64, Vec<f64>)> {
    let n_xi = xi.xi().len();
    let field = fac.field(xi)?;
    let Some((phi, gfield)) = misfit_or_reject(&field, y, mask, kind)? else {
        return Ok((f64::NEG_INFINITY, vec![0.0; n_xi]));
    };
    let logp = -phi - 0.5 * squared_norm(xi.xi());
    let vjp = fac.xi_vjp(gfield.values())?;
    let grad = vjp
        .iter()
        .zip(xi.xi())
        .map(|(g, x)| -g - x)
        .collect();
    Ok((logp, grad))
}

pub fn gp_fixed_logpost(
    xi: &WhitenedField,
    y: &[f64],
    mask: &ObservationMask,
    theta_star: &SEHyper,
    kind: ProblemKind,
) -> Result<f64> {
    gp_fixed_logpost_grad(xi, y, mask, theta_star, kind).map(|(v, _)| v)
}

/// Independent uniform hyperprior ranges, one (lo, hi) pair per coordinate
/// of (μ, σ, ℓ_x, ℓ_y). A degenerate pair (lo == hi) pins that coordinate
/// and removes it from the sampled state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperRanges {
    pub mu: (f64, f64),
    pub sigma: (f64, f64),
    pub ell_x: (f64, f64),
    pub ell_y: (f64, f64),
}

impl HyperRanges {
    /// The ranges the training fields were drawn from.
    pub fn training_default() -> Self {
        HyperRanges {
            mu: (-0.5, 0.5),
            sigma: (0.2, 0.7),
            ell_x: (0.05, 0.35),
            ell_y: (0.05, 0.35),
        }
    }

    /// Pins every coordinate to the given point value.
    pub fn point(theta: &SEHyper) -> Self {
        HyperRanges {
            mu: (theta.mu, theta.mu),
            sigma: (theta.sigma, theta.sigma),
            ell_x: (theta.ell_x, theta.ell_x),
            ell_y: (theta.ell_y, theta.ell_y),
        }
    }

    pub fn bounds(&self) -> [(f64, f64); 4] {
        [self.mu, self.sigma, self.ell_x, self.ell_y]
    }

    pub fn contains(&self, theta: &SEHyper) -> bool {
        let th = theta.as_array();
        self.bounds()
            .iter()
            .zip(th.iter())
            .all(|((lo, hi), v)| v >= lo && v <= hi)
    }

    /// Indices of coordinates with lo < hi, in (μ, σ, ℓ_x, ℓ_y) order.
    pub fn free_coords(&self) -> Vec<usize> {
        self.bounds()
            .iter()
            .enumerate()
            .filter(|(_, (lo, hi))| lo < hi)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (lo, hi)) in self.bounds().iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::config(format!(
                    "hyperprior range {i} is invalid: ({lo}, {hi})"
                )));
            }
        }
        // pinned coordinates must still define a valid kernel
        SEHyper::new(self.mu.0, self.sigma.0.max(f64::MIN_POSITIVE), 1.0, 1.0)?;
        Ok(())
    }

    /// Maps unconstrained coordinates (one per free range, in order) to the
    /// full hyperparameter vector via θ_i = lo + (hi − lo)·sigmoid(t_i);
    /// pinned coordinates take their point value.
    pub fn theta_from_unconstrained(&self, t: &[f64]) -> Result<SEHyper> {
        let free = self.free_coords();
        if t.len() != free.len() {
            return Err(Error::ShapeMismatch {
                op: "theta_from_unconstrained",
                lhs: vec![t.len()],
                rhs: vec![free.len()],
            });
        }
        let bounds = self.bounds();
        let mut th: [f64; 4] = [bounds[0].0, bounds[1].0, bounds[2].0, bounds[3].0];
        for (tk, &i) in t.iter().zip(&free) {
            let (lo, hi) = bounds[i];
            th[i] = lo + (hi - lo) * sigmoid(*tk);
        }
        SEHyper::new(th[0], th[1], th[2], th[3])
    }
}

/// GP-Hier log-posterior at a raw hyperparameter point: the GP-Fixed terms
/// with the factor rebuilt from θ, plus the (flat) hyperprior which is a
/// constant inside the support and −∞ outside.
pub fn gp_hier_logpost(
    xi: &WhitenedField,
    theta: &SEHyper,
    y: &[f64],
    mask: &ObservationMask,
    kind: ProblemKind,
    ranges: &HyperRanges,
) -> Result<f64> {
    gp_hier_logpost_grad(xi, theta, y, mask, kind, ranges).map(|(v, _, _)| v)
}

/// GP-Hier log-posterior with gradients with respect to ξ and raw θ. The θ
/// gradient chains through both Cholesky factors via the Cholesky
/// differential. A factorization failure at extreme θ yields −∞ (proposal
/// rejected), not an error.
pub fn gp_hier_logpost_grad(
    xi: &WhitenedField,
    theta: &SEHyper,
    y: &[f64],
    mask: &ObservationMask,
    kind: ProblemKind,
    ranges: &HyperRanges,
) -> Result<(f64, Vec<f64>, [f64; 4])> {
    let n_xi = xi.xi().len();
    let reject = (f64::NEG_INFINITY, vec![0.0; n_xi], [0.0; 4]);
    if !ranges.contains(theta) {
        return Ok(reject);
    }
    let fac = match GpFactor::new(xi.grid(), theta) {
        Ok(f) => f,
        Err(Error::CholeskyFailed { .. }) => return Ok(reject),
        Err(e) => return Err(e),
    };
    let field = fac.field(xi)?;
    let Some((phi, gfield)) = misfit_or_reject(&field, y, mask, kind)? else {
        return Ok(reject);
    };
    let logp = -phi - 0.5 * squared_norm(xi.xi());
    let gxi: Vec<f64> = fac
        .xi_vjp(gfield.values())?
        .iter()
        .zip(xi.xi())
        .map(|(g, x)| -g - x)
        .collect();

    // θ chain: field = μ + σ·L_y Ξ L_xᵀ, so
    //   ∂field/∂μ = 1, ∂field/∂σ = (field − μ)/σ,
    //   ∂field/∂ℓ = σ·(dL_y Ξ L_xᵀ or L_y Ξ dL_xᵀ).
    let n = xi.grid().n();
    let g = gfield.values();
    let d_mu = -g.iter().sum::<f64>();
    let d_sigma = -g
        .iter()
        .zip(field.values())
        .map(|(gi, fi)| gi * (fi - theta.mu) / theta.sigma)
        .sum::<f64>();
    let xi_mat = Tensor::matrix(n, n, xi.xi().to_vec())?;
    let g_mat = Tensor::matrix(n, n, g.to_vec())?;
    let dlx = cholesky_differential(&fac.lx, &se_kernel_1d_dl(n, xi.grid().h(), theta.ell_x))?;
    let dly = cholesky_differential(&fac.ly, &se_kernel_1d_dl(n, xi.grid().h(), theta.ell_y))?;
    let df_ellx = fac.ly.matmul(&xi_mat)?.matmul_nt(&dlx)?;
    let df_elly = dly.matmul(&xi_mat)?.matmul_nt(&fac.lx)?;
    let d_ellx = -theta.sigma * dot(g_mat.data(), df_ellx.data());
    let d_elly = -theta.sigma * dot(g_mat.data(), df_elly.data());

    Ok((logp, gxi, [d_mu, d_sigma, d_ellx, d_elly]))
}

/// Sampler target for GP-Hier on the unconstrained state [ξ ‖ t]: the raw
/// log-posterior plus the logit-reparameterized hyperprior density
/// Σ log σ(t) + log(1 − σ(t)) (constants dropped), with the matching chain
/// rule dθ/dt = (hi − lo)·σ(t)(1 − σ(t)) applied to the θ gradient.
pub fn gp_hier_unconstrained_logpost_grad(
    state: &[f64],
    grid: Grid,
    y: &[f64],
    mask: &ObservationMask,
    kind: ProblemKind,
    ranges: &HyperRanges,
) -> Result<(f64, Vec<f64>)> {
    let free = ranges.free_coords();
    let n_xi = grid.num_nodes();
    if state.len() != n_xi + free.len() {
        return Err(Error::ShapeMismatch {
            op: "gp_hier_unconstrained_logpost_grad",
            lhs: vec![state.len()],
            rhs: vec![n_xi + free.len()],
        });
    }
    let (xi_part, t_part) = state.split_at(n_xi);
    let xi = WhitenedField::new(grid, xi_part.to_vec())?;
    let theta = ranges.theta_from_unconstrained(t_part)?;
    let (mut logp, gxi, gtheta) = gp_hier_logpost_grad(&xi, &theta, y, mask, kind, ranges)?;
    let mut grad = vec![0.0; state.len()];
    if !logp.is_finite() {
        return Ok((f64::NEG_INFINITY, grad));
    }
    grad[..n_xi].copy_from_slice(&gxi);
    let bounds = ranges.bounds();
    for (k, &i) in free.iter().enumerate() {
        let (lo, hi) = bounds[i];
        let s = sigmoid(t_part[k]);
        logp += s.ln() + (1.0 - s).ln();
        grad[n_xi + k] = gtheta[i] * (hi - lo) * s * (1.0 - s) + (1.0 - 2.0 * s);
    }
    Ok((logp, grad))
}
