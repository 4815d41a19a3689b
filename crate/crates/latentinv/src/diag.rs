//! Quantitative diagnostics: chain quality (ESS, acceptance), field and
//! parameter calibration, decoder-geometry metrics (subspace overlap,
//! Jacobian orthogonality, observation cross-sensitivity), and the
//! linearization checks used by `verify-theory`.
//!
//! Everything here is pure analysis over immutable data; nothing mutates
//! chains or models.

use crate::data::NormMeta;
use crate::linalg::{cholesky, chol_solve, frobenius, spectral_norm, thin_qr_q};
use crate::model::VaeModel;
use crate::pde::{forward_tangent, Field2D, Grid, ObservationMask, ProblemKind};
use crate::penalty::sample_corr;
use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

/// Rank tolerance for the thin-QR factorizations of Jacobian blocks.
const QR_TOL: f64 = 1e-12;
/// Minimum sample count for empirical 95% intervals.
pub const MIN_INTERVAL_SAMPLES: usize = 50;

// ---------------------------------------------------------------------------
// Effective sample size.

/// Biased (1/n) autocovariance of a series via FFT, full lag range.
fn autocovariance(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let m = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = (0..m)
        .map(|i| {
            if i < n {
                Complex::new(x[i] - mean, 0.0)
            } else {
                Complex::new(0.0, 0.0)
            }
        })
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(m).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(m).process(&mut buf);
    // rustfft leaves transforms unnormalized: forward+inverse scales by m.
    let scale = 1.0 / (m as f64 * n as f64);
    (0..n).map(|t| buf[t].re * scale).collect()
}

/// Effective sample size of a scalar series:
/// `n / (1 + 2 Σ ρ_t)` with the autocorrelation sum truncated at the first
/// non-positive lag, capped at `n`. A constant series has no autocorrelation
/// by convention and reports `n`.
pub fn ess(series: &[f64]) -> Result<f64> {
    let n = series.len();
    if n == 0 {
        return Err(Error::data("ess requires a non-empty series"));
    }
    if n == 1 {
        return Ok(1.0);
    }
    let gamma = autocovariance(series);
    let mean_sq = series.iter().map(|x| x * x).sum::<f64>() / n as f64;
    // Relative degeneracy threshold: a constant series leaves only rounding
    // noise in gamma[0], proportional to the squared data scale.
    if gamma[0] <= 1e-12 * mean_sq.max(f64::MIN_POSITIVE) {
        return Ok(n as f64);
    }
    let mut acc = 0.0;
    for g in gamma.iter().skip(1) {
        let rho = g / gamma[0];
        if rho <= 0.0 {
            break;
        }
        acc += rho;
    }
    Ok((n as f64 / (1.0 + 2.0 * acc)).min(n as f64))
}

/// Per-coordinate ESS over chain states (rows = draws).
pub fn ess_per_coordinate(states: &[Vec<f64>]) -> Result<Vec<f64>> {
    if states.is_empty() {
        return Err(Error::data("ess requires at least one state"));
    }
    let dim = states[0].len();
    let mut out = Vec::with_capacity(dim);
    let mut series = vec![0.0; states.len()];
    for j in 0..dim {
        for (i, s) in states.iter().enumerate() {
            if s.len() != dim {
                return Err(Error::data("ragged chain states"));
            }
            series[i] = s[j];
        }
        out.push(ess(&series)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EssSummary {
    pub per_coord: Vec<f64>,
    pub mean: f64,
    pub min: f64,
}

impl EssSummary {
    pub fn from_states(states: &[Vec<f64>]) -> Result<Self> {
        let per_coord = ess_per_coordinate(states)?;
        let mean = per_coord.iter().sum::<f64>() / per_coord.len() as f64;
        let min = per_coord.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            per_coord,
            mean,
            min,
        })
    }

    /// Mean ESS over a coordinate block.
    pub fn block_mean(&self, range: std::ops::Range<usize>) -> f64 {
        let block = &self.per_coord[range];
        block.iter().sum::<f64>() / block.len().max(1) as f64
    }
}

// ---------------------------------------------------------------------------
// Calibration metrics.

/// Linear-interpolation empirical quantile of a sorted slice.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let k = sorted.len();
    if k == 1 {
        return sorted[0];
    }
    let pos = p * (k - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FieldMetrics {
    /// RMSE of the posterior-mean field against the truth, interior nodes.
    pub rmse: f64,
    /// Fraction of interior nodes whose truth lies inside the empirical
    /// equal-tailed [2.5%, 97.5%] interval.
    pub coverage95: f64,
}

/// Field-space calibration over full-grid sample fields.
pub fn field_metrics(grid: Grid, samples: &[Vec<f64>], truth: &[f64]) -> Result<FieldMetrics> {
    if samples.len() < MIN_INTERVAL_SAMPLES {
        return Err(Error::data(format!(
            "field metrics need at least {MIN_INTERVAL_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let nn = grid.num_nodes();
    if truth.len() != nn || samples.iter().any(|s| s.len() != nn) {
        return Err(Error::data("field sample length does not match the grid"));
    }
    let truth_int = grid.extract_interior(truth);
    let interior: Vec<Vec<f64>> = samples.iter().map(|s| grid.extract_interior(s)).collect();
    let ni = truth_int.len();
    let ns = interior.len() as f64;

    let mut sq_err = 0.0;
    let mut covered = 0usize;
    let mut column = vec![0.0; interior.len()];
    for j in 0..ni {
        for (i, s) in interior.iter().enumerate() {
            column[i] = s[j];
        }
        let mean = column.iter().sum::<f64>() / ns;
        sq_err += (mean - truth_int[j]) * (mean - truth_int[j]);
        column.sort_by(f64::total_cmp);
        let lo = quantile(&column, 0.025);
        let hi = quantile(&column, 0.975);
        if lo <= truth_int[j] && truth_int[j] <= hi {
            covered += 1;
        }
    }
    Ok(FieldMetrics {
        rmse: (sq_err / ni as f64).sqrt(),
        coverage95: covered as f64 / ni as f64,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRecovery {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub true_value: f64,
    pub in_ci: bool,
}

/// De-normalize posterior draws of `u_norm` and summarize each physical
/// parameter: mean ± std and the empirical equal-tailed 95% interval.
pub fn param_recovery(
    samples_norm: &[Vec<f64>],
    meta: &NormMeta,
    truth_phys: &[f64],
    names: &[&str],
) -> Result<Vec<ParamRecovery>> {
    let d = meta.mean.len();
    if truth_phys.len() != d || names.len() != d {
        return Err(Error::data("parameter truth/name length mismatch"));
    }
    if samples_norm.len() < 2 || samples_norm.iter().any(|s| s.len() != d) {
        return Err(Error::data("parameter recovery needs >= 2 draws of u_norm"));
    }
    let n = samples_norm.len() as f64;
    let phys: Vec<Vec<f64>> = samples_norm.iter().map(|s| meta.denormalize(s)).collect();
    let mut out = Vec::with_capacity(d);
    let mut column = vec![0.0; phys.len()];
    for j in 0..d {
        for (i, row) in phys.iter().enumerate() {
            column[i] = row[j];
        }
        let mean = column.iter().sum::<f64>() / n;
        let var = column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        column.sort_by(f64::total_cmp);
        let ci_lo = quantile(&column, 0.025);
        let ci_hi = quantile(&column, 0.975);
        out.push(ParamRecovery {
            name: names[j].to_string(),
            mean,
            std: var.sqrt(),
            ci_lo,
            ci_hi,
            true_value: truth_phys[j],
            in_ci: ci_lo <= truth_phys[j] && truth_phys[j] <= ci_hi,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Decoder-geometry metrics.

/// Dense decoder Jacobian at `z` assembled column-by-column from JVPs,
/// `[n_pixels, d_z]`.
pub fn decoder_jacobian(model: &VaeModel, z: &[f64]) -> Result<Tensor> {
    let d = model.d_z();
    let p = model.n_pixels;
    let mut data = vec![0.0; p * d];
    let mut e = vec![0.0; d];
    for j in 0..d {
        e[j] = 1.0;
        let (_, dx) = model.decode_jvp(z, &e)?;
        e[j] = 0.0;
        for r in 0..p {
            data[r * d + j] = dx[r];
        }
    }
    Tensor::matrix(p, d, data)
}

fn split_cols(a: &Tensor, k: usize) -> Result<(Tensor, Tensor)> {
    let (rows, cols) = (a.rows(), a.cols());
    if k == 0 || k >= cols {
        return Err(Error::config("column split must be strictly interior"));
    }
    let mut left = vec![0.0; rows * k];
    let mut right = vec![0.0; rows * (cols - k)];
    for r in 0..rows {
        let row = &a.data()[r * cols..(r + 1) * cols];
        left[r * k..(r + 1) * k].copy_from_slice(&row[..k]);
        right[r * (cols - k)..(r + 1) * (cols - k)].copy_from_slice(&row[k..]);
    }
    Ok((
        Tensor::matrix(rows, k, left)?,
        Tensor::matrix(rows, cols - k, right)?,
    ))
}

/// Generator overlap for an explicit Jacobian split after column `d_aux`:
/// the largest singular value of `Q_auxᵀ Q_rec`, with `Q` the orthonormal
/// bases of the two column blocks (rank-deficient blocks keep their reduced
/// bases; an all-zero block yields 0).
pub fn rho_from_jacobian(jac: &Tensor, d_aux: usize) -> Result<f64> {
    let (j_aux, j_rec) = split_cols(jac, d_aux)?;
    let q_aux = thin_qr_q(&j_aux, QR_TOL)?;
    let q_rec = thin_qr_q(&j_rec, QR_TOL)?;
    if q_aux.cols() == 0 || q_rec.cols() == 0 {
        return Ok(0.0);
    }
    let cross = q_aux.matmul_tn(&q_rec)?;
    Ok(spectral_norm(&cross)?.min(1.0))
}

/// `‖J_auxᵀ J_rec‖_F / (‖J_aux‖_F ‖J_rec‖_F)` for an explicit Jacobian;
/// a vanishing block yields 0.
pub fn jortho_from_jacobian(jac: &Tensor, d_aux: usize) -> Result<f64> {
    let (j_aux, j_rec) = split_cols(jac, d_aux)?;
    let denom = frobenius(&j_aux) * frobenius(&j_rec);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(frobenius(&j_aux.matmul_tn(&j_rec)?) / denom)
}

/// Generator overlap ρ_G at each latent sample, from the decoder Jacobian.
pub fn rho_g(model: &VaeModel, zs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d_aux = model.cfg.d_aux;
    let mut out = Vec::with_capacity(zs.len());
    for z in zs {
        let jac = decoder_jacobian(model, z)?;
        out.push(rho_from_jacobian(&jac, d_aux)?);
    }
    Ok(out)
}

/// Mean over latent samples of `‖J_auxᵀ J_rec‖_F / (‖J_aux‖_F ‖J_rec‖_F)`.
pub fn jortho_norm(model: &VaeModel, zs: &[Vec<f64>]) -> Result<f64> {
    if zs.is_empty() {
        return Err(Error::data("jortho_norm needs at least one latent sample"));
    }
    let d_aux = model.cfg.d_aux;
    let mut acc = 0.0;
    for z in zs {
        let jac = decoder_jacobian(model, z)?;
        acc += jortho_from_jacobian(&jac, d_aux)?;
    }
    Ok(acc / zs.len() as f64)
}

/// Forward map Jacobian in latent coordinates, `[n_sensors, d_z]`: decoder
/// JVPs pushed through the PDE tangent solve and read at the sensors.
pub fn latent_forward_blocks(
    model: &VaeModel,
    grid: Grid,
    mask: &ObservationMask,
    kind: ProblemKind,
    z: &[f64],
) -> Result<Tensor> {
    let d = model.d_z();
    let m = mask.sensors().len();
    let x = model.decode(z)?;
    let field = Field2D::new(grid, x)?;
    let mut data = vec![0.0; m * d];
    let mut e = vec![0.0; d];
    for j in 0..d {
        e[j] = 1.0;
        let (_, dx) = model.decode_jvp(z, &e)?;
        e[j] = 0.0;
        let dfield = Field2D::new(grid, dx)?;
        let (_, dt) = forward_tangent(&field, &dfield, kind)?;
        let col = mask.observe(&dt);
        for r in 0..m {
            data[r * d + j] = col[r];
        }
    }
    Tensor::matrix(m, d, data)
}

/// `‖A_uᵀ Σ_ε⁻¹ A_rec‖₂` for iid noise `Σ_ε = noise_var · I`.
pub fn weighted_cross_norm(a: &Tensor, d_split: usize, noise_var: f64) -> Result<f64> {
    if !(noise_var.is_finite() && noise_var > 0.0) {
        return Err(Error::config("noise variance must be positive"));
    }
    let (a_u, a_rec) = split_cols(a, d_split)?;
    let cross = a_u.matmul_tn(&a_rec)?.scale(1.0 / noise_var);
    spectral_norm(&cross)
}

/// Observation-space cross-sensitivity of the decoder at `z`.
pub fn cross_sensitivity(
    model: &VaeModel,
    grid: Grid,
    mask: &ObservationMask,
    kind: ProblemKind,
    z: &[f64],
) -> Result<f64> {
    let a = latent_forward_blocks(model, grid, mask, kind, z)?;
    weighted_cross_norm(&a, model.cfg.d_aux, mask.sigma() * mask.sigma())
}

// ---------------------------------------------------------------------------
// Linearization checks.

#[derive(Debug, Clone)]
pub struct LinCovCheck {
    /// Frobenius relative error between Monte-Carlo and closed-form
    /// covariance of the linear surrogate.
    pub rel_err: f64,
    pub mc_cov: Tensor,
    pub closed_cov: Tensor,
}

/// Covariance identity of the linear surrogate
/// `x_lin = G(z̄) + J_aux (z_aux − m_u) + J_rec z_rec` with
/// `z_aux = u + τη`, `u ~ N(m_u, Σ_u)`: the closed form is
/// `J_aux (Σ_u + τ²I) J_auxᵀ + J_rec J_recᵀ`, compared against `n_mc`
/// Monte-Carlo draws.
pub fn lincov_check(
    model: &VaeModel,
    m_u: &[f64],
    sigma_u: &Tensor,
    tau: f64,
    n_mc: usize,
    seed: u64,
) -> Result<LinCovCheck> {
    let d_aux = model.cfg.d_aux;
    let d_z = model.d_z();
    let d_rec = d_z - d_aux;
    if m_u.len() != d_aux || sigma_u.shape() != [d_aux, d_aux] {
        return Err(Error::data("m_u / Sigma_u shape mismatch with the model"));
    }
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::config("tau must be non-negative"));
    }
    if n_mc < 2 {
        return Err(Error::config("lincov_check needs at least 2 draws"));
    }
    let mut zbar = vec![0.0; d_z];
    zbar[..d_aux].copy_from_slice(m_u);
    let jac = decoder_jacobian(model, &zbar)?;
    let (j_aux, j_rec) = split_cols(&jac, d_aux)?;

    // Closed form.
    let mut s = sigma_u.clone();
    for i in 0..d_aux {
        s.data_mut()[i * d_aux + i] += tau * tau;
    }
    let closed = j_aux
        .matmul(&s)?
        .matmul_nt(&j_aux)?
        .add(&j_rec.matmul_nt(&j_rec)?)?;

    // Monte-Carlo draws of the latent displacement, one big matmul.
    let l_u = if frobenius(sigma_u) == 0.0 {
        Tensor::zeros(&[d_aux, d_aux])
    } else {
        cholesky(sigma_u)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut zeta = vec![0.0; n_mc * d_z];
    for row in zeta.chunks_mut(d_z) {
        let xi: Vec<f64> = (0..d_aux)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        for i in 0..d_aux {
            let mut acc = 0.0;
            for k in 0..=i {
                acc += l_u.data()[i * d_aux + k] * xi[k];
            }
            row[i] = acc + tau * rng.sample::<f64, _>(StandardNormal);
        }
        for i in 0..d_rec {
            row[d_aux + i] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let zmat = Tensor::matrix(n_mc, d_z, zeta)?;
    let x = zmat.matmul_nt(&jac)?; // [n_mc, p]
    let means = x.col_mean();
    let p = x.cols();
    let mut xc = x;
    for r in 0..n_mc {
        for c in 0..p {
            xc.data_mut()[r * p + c] -= means.data()[c];
        }
    }
    let mc = xc.matmul_tn(&xc)?.scale(1.0 / n_mc as f64);

    let denom = frobenius(&closed);
    let rel_err = if denom == 0.0 {
        frobenius(&mc)
    } else {
        frobenius(&mc.sub(&closed)?) / denom
    };
    Ok(LinCovCheck {
        rel_err,
        mc_cov: mc,
        closed_cov: closed,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CrossCovBound {
    /// `‖Cov(x_aux, x_rec)‖₂`, evaluated in closed form.
    pub lhs: f64,
    /// `ρ · (‖S_aux‖₂ + ‖S_rec‖₂)`.
    pub rhs: f64,
    pub rho: f64,
}

/// Projected cross-covariance bound: with thin QR factors
/// `J_aux = Q_aux R_aux`, `J_rec = Q_rec R_rec`, the projected coordinates
/// satisfy `Cov(x_aux, x_rec) = S_aux C + C S_rec` with
/// `C = Q_auxᵀ Q_rec`, `S_aux = R_aux (Σ_u + τ²I) R_auxᵀ`,
/// `S_rec = R_rec R_recᵀ`, and the operator norm is bounded by
/// `ρ (‖S_aux‖₂ + ‖S_rec‖₂)` with `ρ = ‖C‖₂`.
pub fn cross_cov_bound(
    j_aux: &Tensor,
    j_rec: &Tensor,
    sigma_u: &Tensor,
    tau: f64,
) -> Result<CrossCovBound> {
    let d_aux = j_aux.cols();
    if sigma_u.shape() != [d_aux, d_aux] {
        return Err(Error::data("Sigma_u shape mismatch with J_aux"));
    }
    let q_aux = thin_qr_q(j_aux, QR_TOL)?;
    let q_rec = thin_qr_q(j_rec, QR_TOL)?;
    if q_aux.cols() == 0 || q_rec.cols() == 0 {
        return Ok(CrossCovBound {
            lhs: 0.0,
            rhs: 0.0,
            rho: 0.0,
        });
    }
    let r_aux = q_aux.matmul_tn(j_aux)?;
    let r_rec = q_rec.matmul_tn(j_rec)?;
    let mut s = sigma_u.clone();
    for i in 0..d_aux {
        s.data_mut()[i * d_aux + i] += tau * tau;
    }
    let s_aux = r_aux.matmul(&s)?.matmul_nt(&r_aux)?;
    let s_rec = r_rec.matmul_nt(&r_rec)?;
    let c = q_aux.matmul_tn(&q_rec)?;
    let cross = s_aux.matmul(&c)?.add(&c.matmul(&s_rec)?)?;
    let rho = spectral_norm(&c)?.min(1.0);
    Ok(CrossCovBound {
        lhs: spectral_norm(&cross)?,
        rhs: rho * (spectral_norm(&s_aux)? + spectral_norm(&s_rec)?),
        rho,
    })
}

/// Linearized Gaussian posterior covariance
/// `(Σ₀⁻¹ + Aᵀ Σ_ε⁻¹ A)⁻¹` with block-diagonal prior `Σ₀ = diag(Σ_u, I)`
/// and iid noise `Σ_ε = noise_var · I`.
pub fn linearized_posterior_cov(
    a: &Tensor,
    d_aux: usize,
    sigma_u: &Tensor,
    noise_var: f64,
) -> Result<Tensor> {
    let d = a.cols();
    if d_aux == 0 || d_aux >= d {
        return Err(Error::config("latent split must be strictly interior"));
    }
    if sigma_u.shape() != [d_aux, d_aux] {
        return Err(Error::data("Sigma_u shape mismatch"));
    }
    if !(noise_var.is_finite() && noise_var > 0.0) {
        return Err(Error::config("noise variance must be positive"));
    }
    // Prior precision blocks.
    let l_u = cholesky(sigma_u)?;
    let eye_aux = identity(d_aux);
    let prec_u = chol_solve(&l_u, &eye_aux)?;
    let mut lambda = a.matmul_tn(a)?.scale(1.0 / noise_var);
    for i in 0..d_aux {
        for j in 0..d_aux {
            lambda.data_mut()[i * d + j] += prec_u.data()[i * d_aux + j];
        }
    }
    for i in d_aux..d {
        lambda.data_mut()[i * d + i] += 1.0;
    }
    let l = cholesky(&lambda)?;
    chol_solve(&l, &identity(d))
}

fn identity(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

/// Frobenius norm of the `[0..split, split..]` block of a square matrix.
pub fn offblock_frobenius(m: &Tensor, split: usize) -> f64 {
    let d = m.cols();
    let mut acc = 0.0;
    for i in 0..split {
        for j in split..d {
            let v = m.data()[i * d + j];
            acc += v * v;
        }
    }
    acc.sqrt()
}

// ---------------------------------------------------------------------------
// Posterior coupling and the KL mixture bound.

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CouplingSummary {
    pub mean_abs: f64,
    pub max_abs: f64,
}

/// Mean and max of `|corr(u_i, z_rec,j)|` over pooled post-warmup states of
/// the collapsed chain (`[u ‖ z_rec]` layout).
pub fn posterior_coupling(states: &[Vec<f64>], d_aux: usize) -> Result<CouplingSummary> {
    if states.len() < 2 {
        return Err(Error::data("posterior coupling needs >= 2 draws"));
    }
    let d = states[0].len();
    if d_aux == 0 || d_aux >= d {
        return Err(Error::config("latent split must be strictly interior"));
    }
    let n = states.len();
    let mut u = vec![0.0; n * d_aux];
    let mut zr = vec![0.0; n * (d - d_aux)];
    for (i, s) in states.iter().enumerate() {
        if s.len() != d {
            return Err(Error::data("ragged chain states"));
        }
        u[i * d_aux..(i + 1) * d_aux].copy_from_slice(&s[..d_aux]);
        zr[i * (d - d_aux)..(i + 1) * (d - d_aux)].copy_from_slice(&s[d_aux..]);
    }
    let corr = sample_corr(
        &Tensor::matrix(n, d_aux, u)?,
        &Tensor::matrix(n, d - d_aux, zr)?,
    )?;
    let mut mean = 0.0;
    let mut max = 0.0_f64;
    for v in corr.data() {
        mean += v.abs();
        max = max.max(v.abs());
    }
    Ok(CouplingSummary {
        mean_abs: mean / corr.len() as f64,
        max_abs: max,
    })
}

/// Jensen-type mixture bound: for an equal-weight Gaussian mixture
/// `q(z) = (1/M) Σ N(μ_i, v_i)` and prior `N(0,1)`,
/// `KL(q ‖ p) ≤ (1/M) Σ KL(N(μ_i, v_i) ‖ p)`. The left side is evaluated by
/// trapezoid quadrature on [−12, 12] with 4001 points, the right side in
/// closed form. Errors if the bound is violated beyond 1e-6.
pub fn kl_jensen_check(components: &[(f64, f64)]) -> Result<(f64, f64)> {
    if components.is_empty() {
        return Err(Error::data("mixture must have at least one component"));
    }
    if components.iter().any(|&(m, v)| !m.is_finite() || v <= 0.0) {
        return Err(Error::data("mixture components need finite means and positive variances"));
    }
    let m = components.len() as f64;
    let rhs = components
        .iter()
        .map(|&(mu, v)| 0.5 * (v + mu * mu - 1.0 - v.ln()))
        .sum::<f64>()
        / m;

    let half = 0.5 * std::f64::consts::TAU.ln();
    let log_norm = |z: f64, mu: f64, v: f64| -0.5 * (z - mu) * (z - mu) / v - 0.5 * v.ln() - half;
    let n_pts = 4001usize;
    let (lo, hi) = (-12.0, 12.0);
    let hstep = (hi - lo) / (n_pts - 1) as f64;
    let mut lhs = 0.0;
    for i in 0..n_pts {
        let z = lo + i as f64 * hstep;
        let q: f64 = components
            .iter()
            .map(|&(mu, v)| log_norm(z, mu, v).exp())
            .sum::<f64>()
            / m;
        if q <= 0.0 {
            continue;
        }
        let logp = log_norm(z, 0.0, 1.0);
        let w = if i == 0 || i == n_pts - 1 { 0.5 } else { 1.0 };
        lhs += w * q * (q.ln() - logp) * hstep;
    }
    if lhs > rhs + 1e-6 {
        return Err(Error::data(format!(
            "mixture KL bound violated: lhs {lhs:.9} > rhs {rhs:.9}"
        )));
    }
    Ok((lhs, rhs))
}

// ---------------------------------------------------------------------------
// Aggregated report.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub problem: String,
    pub method: String,
    pub seed: u64,
    pub field_rmse: f64,
    pub coverage95: f64,
    pub params: Vec<ParamRecovery>,
    pub accept_stat: f64,
    pub ess_mean: f64,
    pub ess_min: f64,
    pub ess_u_block: f64,
    pub divergence_rate: f64,
    pub rho_g_mean: f64,
    pub rho_g_max: f64,
    pub jortho_norm: f64,
    pub cross_sensitivity: f64,
    pub coupling_mean: f64,
    pub coupling_max: f64,
    pub warning: Option<String>,
}

impl DiagnosticsReport {
    pub fn params_in_ci(&self) -> usize {
        self.params.iter().filter(|p| p.in_ci).count()
    }

    pub fn csv_header() -> &'static str {
        "problem,method,seed,field_rmse,coverage95,accept,ess_mean,ess_min,ess_u_block,\
         divergence_rate,params_in_ci,rho_g_mean,jortho_norm,cross_sensitivity,\
         coupling_mean,coupling_max"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.4},{:.4},{:.1},{:.1},{:.1},{:.4},{}/{},{:.4},{:.4},{:.6},{:.4},{:.4}",
            self.problem,
            self.method,
            self.seed,
            self.field_rmse,
            self.coverage95,
            self.accept_stat,
            self.ess_mean,
            self.ess_min,
            self.ess_u_block,
            self.divergence_rate,
            self.params_in_ci(),
            self.params.len(),
            self.rho_g_mean,
            self.jortho_norm,
            self.cross_sensitivity,
            self.coupling_mean,
            self.coupling_max
        )
    }
}
