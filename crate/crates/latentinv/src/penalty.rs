//! Coordinatewise polynomial lifts, batch correlation estimators, and the
//! two dependence penalties built on them: R0 averages absolute correlations
//! between all lifted coordinate pairs (driving it to zero decorrelates), R1
//! rewards perfect same-degree alignment of matched coordinates (zero iff
//! every matched pair has |corr| = 1).
//!
//! Every estimator uses biased 1/n moments — the n/(n−1) factor cancels in
//! correlations anyway — and comes in two flavors: an exact one for
//! diagnostics and tests, and a tape-graph one for training where |t| is
//! smoothed to √(t²+1e-12) and variance denominators carry the same ε so a
//! collapsed (constant) column contributes zero correlation instead of NaN.
//! In the exact flavor a zero-variance column is handled explicitly: its
//! correlations are 0 for R0 and its R1 contribution is 1, so encoder
//! collapse shows up as maximal misalignment rather than being dropped.

use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// ε added under correlation denominators and inside the smooth |·| in the
/// training graph.
pub const CORR_EPS: f64 = 1e-12;

fn expect_batch(v: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if v.shape().len() != 2 || v.rows() < 2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: v.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((v.rows(), v.cols()))
}

/// Degree-major coordinatewise monomial lift: column (k−1)·m + i of the
/// output holds v_i^k, k = 1..K.
pub fn poly_lift(v: &Tensor, k: usize) -> Tensor {
    let (n, m) = (v.rows(), v.cols());
    let mut out = vec![0.0; n * k * m];
    for r in 0..n {
        let row = v.row(r);
        for deg in 1..=k {
            for (i, &x) in row.iter().enumerate() {
                out[r * k * m + (deg - 1) * m + i] = x.powi(deg as i32);
            }
        }
    }
    Tensor::matrix(n, k * m, out).expect("lift dimensions are consistent")
}

/// Per-column centered values, 1/n variance, and a zero-variance flag
/// (variance at accumulation-noise level relative to the column's second
/// moment counts as zero).
struct Centered {
    data: Vec<f64>, // row-major [n, m]
    n: usize,
    m: usize,
    var: Vec<f64>,
    degenerate: Vec<bool>,
}

fn center(v: &Tensor) -> Centered {
    let (n, m) = (v.rows(), v.cols());
    let mut mean = vec![0.0; m];
    let mut raw2 = vec![0.0; m];
    for r in 0..n {
        for (j, &x) in v.row(r).iter().enumerate() {
            mean[j] += x;
            raw2[j] += x * x;
        }
    }
    for j in 0..m {
        mean[j] /= n as f64;
        raw2[j] /= n as f64;
    }
    let mut data = vec![0.0; n * m];
    let mut var = vec![0.0; m];
    for r in 0..n {
        for (j, &x) in v.row(r).iter().enumerate() {
            let c = x - mean[j];
            data[r * m + j] = c;
            var[j] += c * c;
        }
    }
    let mut degenerate = vec![false; m];
    for j in 0..m {
        var[j] /= n as f64;
        degenerate[j] = var[j] <= 1e-24 * raw2[j].max(f64::MIN_POSITIVE);
    }
    Centered {
        data,
        n,
        m,
        var,
        degenerate,
    }
}

fn column_cov(cv: &Centered, cw: &Centered, i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for r in 0..cv.n {
        s += cv.data[r * cv.m + i] * cw.data[r * cw.m + j];
    }
    s / cv.n as f64
}

/// Signed sample correlation matrix Corr(v, w) = D_v^{−1/2} Σ_vw D_w^{−1/2}
/// with entries clamped to [−1, 1]; rows/columns of zero-variance inputs
/// are zero.
pub fn sample_corr(v: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (nv, mv) = expect_batch(v, "sample_corr")?;
    let (nw, mw) = expect_batch(w, "sample_corr")?;
    if nv != nw {
        return Err(Error::ShapeMismatch {
            op: "sample_corr",
            lhs: v.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let cv = center(v);
    let cw = center(w);
    let mut out = vec![0.0; mv * mw];
    for i in 0..mv {
        if cv.degenerate[i] {
            continue;
        }
        for j in 0..mw {
            if cw.degenerate[j] {
                continue;
            }
            let c = column_cov(&cv, &cw, i, j) / (cv.var[i].sqrt() * cw.var[j].sqrt());
            out[i * mw + j] = c.clamp(-1.0, 1.0);
        }
    }
    Tensor::matrix(mv, mw, out)
}

/// |corr| via the squared form cov²/(var_v·var_w): when w = ±v the numerator
/// and denominator round identically, so the ratio is exactly 1 and matched
/// pairs drop out of R1 exactly.
fn abs_corr_sq_form(cv: &Centered, cw: &Centered, i: usize, j: usize) -> f64 {
    let cov = column_cov(cv, cw, i, j);
    ((cov * cov) / (cv.var[i] * cw.var[j])).min(1.0).sqrt()
}

/// R0: mean absolute correlation over all K²·m_v·m_w lifted coordinate
/// pairs. Zero-variance lifted columns contribute 0.
pub fn r0(v: &Tensor, w: &Tensor, k: usize) -> Result<f64> {
    expect_batch(v, "r0")?;
    expect_batch(w, "r0")?;
    let lv = center(&poly_lift(v, k));
    let lw = center(&poly_lift(w, k));
    let mut total = 0.0;
    for i in 0..lv.m {
        if lv.degenerate[i] {
            continue;
        }
        for j in 0..lw.m {
            if lw.degenerate[j] {
                continue;
            }
            total += abs_corr_sq_form(&lv, &lw, i, j);
        }
    }
    Ok(total / (lv.m * lw.m) as f64)
}

/// R1: mean over same-degree matched pairs of 1 − |corr|. Zero exactly when
/// every matched pair is perfectly (anti-)correlated; a zero-variance column
/// contributes the maximal value 1.
pub fn r1(v: &Tensor, w: &Tensor, k: usize) -> Result<f64> {
    let (_, mv) = expect_batch(v, "r1")?;
    let (_, mw) = expect_batch(w, "r1")?;
    if mv != mw {
        return Err(Error::ShapeMismatch {
            op: "r1",
            lhs: v.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let lv = center(&poly_lift(v, k));
    let lw = center(&poly_lift(w, k));
    let mut total = 0.0;
    for c in 0..lv.m {
        if lv.degenerate[c] || lw.degenerate[c] {
            total += 1.0;
        } else {
            total += 1.0 - abs_corr_sq_form(&lv, &lw, c, c);
        }
    }
    Ok(total / lv.m as f64)
}

fn column(t: &Tensor, j: usize) -> Tensor {
    let (n, m) = (t.rows(), t.cols());
    let data = (0..n).map(|r| t.data()[r * m + j]).collect();
    Tensor::matrix(n, 1, data).expect("column extraction is consistent")
}

fn columns_except(t: &Tensor, j: usize) -> Tensor {
    let (n, m) = (t.rows(), t.cols());
    let mut data = Vec::with_capacity(n * (m - 1));
    for r in 0..n {
        for c in 0..m {
            if c != j {
                data.push(t.data()[r * m + c]);
            }
        }
    }
    Tensor::matrix(n, m - 1, data).expect("column exclusion is consistent")
}

/// The three penalty aggregates of the training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyTerms {
    /// Σ_j R1(u_j, μ_aux,j): alignment of each auxiliary coordinate.
    pub align_sum: f64,
    /// Σ_j R0(u_j, μ_aux,−j): leakage of u_j into the other aux coordinates.
    pub intra_sum: f64,
    /// R0(u, μ_rec): dependence between u and the nuisance block.
    pub inter: f64,
}

/// Exact penalty aggregates (diagnostics flavor).
pub fn penalty_terms(
    u: &Tensor,
    mu_aux: &Tensor,
    mu_rec: &Tensor,
    k: usize,
) -> Result<PenaltyTerms> {
    let (_, d) = expect_batch(u, "penalty_terms")?;
    if mu_aux.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "penalty_terms",
            lhs: u.shape().to_vec(),
            rhs: mu_aux.shape().to_vec(),
        });
    }
    let mut align_sum = 0.0;
    let mut intra_sum = 0.0;
    for j in 0..d {
        let uj = column(u, j);
        align_sum += r1(&uj, &column(mu_aux, j), k)?;
        if d > 1 {
            intra_sum += r0(&uj, &columns_except(mu_aux, j), k)?;
        }
    }
    let inter = r0(u, mu_rec, k)?;
    Ok(PenaltyTerms {
        align_sum,
        intra_sum,
        inter,
    })
}

// ---- tape-graph flavor -------------------------------------------------

/// Centered batch and ε-shifted column variances as tape nodes.
fn centered_var_graph(tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)> {
    let mean = tape.col_mean(x)?;
    let neg_mean = tape.scale(mean, -1.0)?;
    let centered = tape.add_bias(x, neg_mean)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.col_mean(sq)?;
    let var_eps = tape.add_scalar(var, CORR_EPS)?;
    Ok((centered, var_eps))
}

/// Correlation matrix between two centered blocks: cov / (σ_v ⊗ σ_w).
fn corr_graph(
    tape: &mut Tape,
    cv: (NodeId, NodeId),
    cw: (NodeId, NodeId),
    n: usize,
) -> Result<NodeId> {
    let cross = tape.matmul_tn(cv.0, cw.0)?;
    let cov = tape.scale(cross, 1.0 / n as f64)?;
    let sv = tape.sqrt(cv.1)?;
    let sw = tape.sqrt(cw.1)?;
    let denom = tape.matmul_tn(sv, sw)?; // [1,mv]ᵀ[1,mw] outer product
    tape.div(cov, denom)
}

/// Smooth R0 between two batches as a tape scalar.
pub fn r0_graph(tape: &mut Tape, v: NodeId, w: NodeId, k: usize) -> Result<NodeId> {
    let n = tape.value(v).rows();
    let (mv, mw) = (tape.value(v).cols(), tape.value(w).cols());
    let mut lifts_v = Vec::with_capacity(k);
    let mut lifts_w = Vec::with_capacity(k);
    for deg in 1..=k {
        let pv = if deg == 1 { v } else { tape.powi(v, deg as i32)? };
        let pw = if deg == 1 { w } else { tape.powi(w, deg as i32)? };
        lifts_v.push(centered_var_graph(tape, pv)?);
        lifts_w.push(centered_var_graph(tape, pw)?);
    }
    let mut total: Option<NodeId> = None;
    for cv in &lifts_v {
        for cw in &lifts_w {
            let corr = corr_graph(tape, *cv, *cw, n)?;
            let a = tape.smooth_abs(corr, CORR_EPS)?;
            let s = tape.sum(a)?;
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
    }
    tape.scale(total.expect("K >= 1"), 1.0 / (k * k * mv * mw) as f64)
}

/// Smooth Σ_j R1(v_j, w_j) (matched coordinates, sum not mean) as a tape
/// scalar: d − (1/K)·Σ_k Σ_j |corr(v_j^k, w_j^k)|.
pub fn r1_matched_sum_graph(tape: &mut Tape, v: NodeId, w: NodeId, k: usize) -> Result<NodeId> {
    let d = tape.value(v).cols();
    let mut acc: Option<NodeId> = None;
    for deg in 1..=k {
        let pv = if deg == 1 { v } else { tape.powi(v, deg as i32)? };
        let pw = if deg == 1 { w } else { tape.powi(w, deg as i32)? };
        let (cv, var_v) = centered_var_graph(tape, pv)?;
        let (cw, var_w) = centered_var_graph(tape, pw)?;
        let prod = tape.mul(cv, cw)?;
        let cov = tape.col_mean(prod)?; // [1,d]
        let var_prod = tape.mul(var_v, var_w)?;
        let denom = tape.sqrt(var_prod)?;
        let corr = tape.div(cov, denom)?;
        let a = tape.smooth_abs(corr, CORR_EPS)?;
        let s = tape.sum(a)?;
        acc = Some(match acc {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    let neg = tape.scale(acc.expect("K >= 1"), -1.0 / k as f64)?;
    let d_node = tape.input(Tensor::scalar(d as f64));
    tape.add(d_node, neg)
}

/// Smooth Σ_j R0(v_j, w_{−j}) for two [n, d] batches as a tape scalar,
/// computed as the off-diagonal mass of the full lifted correlation matrices:
/// (1/(K²(d−1)))·Σ_{k,k'} Σ_{i≠j} |corr(v_i^k, w_j^{k'})|.
pub fn r0_offdiag_sum_graph(tape: &mut Tape, v: NodeId, w: NodeId, k: usize) -> Result<NodeId> {
    let n = tape.value(v).rows();
    let d = tape.value(v).cols();
    if d < 2 {
        return Ok(tape.input(Tensor::scalar(0.0)));
    }
    let mut mask = Tensor::full(&[d, d], 1.0);
    for i in 0..d {
        mask.data_mut()[i * d + i] = 0.0;
    }
    let mask = tape.input(mask);
    let mut lifts_v = Vec::with_capacity(k);
    let mut lifts_w = Vec::with_capacity(k);
    for deg in 1..=k {
        let pv = if deg == 1 { v } else { tape.powi(v, deg as i32)? };
        let pw = if deg == 1 { w } else { tape.powi(w, deg as i32)? };
        lifts_v.push(centered_var_graph(tape, pv)?);
        lifts_w.push(centered_var_graph(tape, pw)?);
    }
    let mut total: Option<NodeId> = None;
    for cv in &lifts_v {
        for cw in &lifts_w {
            let corr = corr_graph(tape, *cv, *cw, n)?;
            let a = tape.smooth_abs(corr, CORR_EPS)?;
            let masked = tape.mul(a, mask)?;
            let s = tape.sum(masked)?;
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
    }
    tape.scale(
        total.expect("K >= 1"),
        1.0 / (k * k * (d - 1)) as f64,
    )
}

/// Tape nodes for the three penalty aggregates (smooth flavor).
#[derive(Debug, Clone, Copy)]
pub struct PenaltyGraph {
    pub align_sum: NodeId,
    pub intra_sum: NodeId,
    pub inter: NodeId,
}

pub fn penalty_graph(
    tape: &mut Tape,
    u: NodeId,
    mu_aux: NodeId,
    mu_rec: NodeId,
    k: usize,
) -> Result<PenaltyGraph> {
    Ok(PenaltyGraph {
        align_sum: r1_matched_sum_graph(tape, u, mu_aux, k)?,
        intra_sum: r0_offdiag_sum_graph(tape, u, mu_aux, k)?,
        inter: r0_graph(tape, u, mu_rec, k)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lift_examples() {
        let v = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        assert_eq!(poly_lift(&v, 3).data(), &[2.0, 4.0, 8.0]);

        let v2 = Tensor::matrix(1, 2, vec![-1.0, 0.0]).unwrap();
        assert_eq!(poly_lift(&v2, 2).data(), &[-1.0, 0.0, 1.0, 0.0]);

        let v3 = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(poly_lift(&v3, 1).data(), v3.data());
    }

    #[test]
    fn batch_size_one_is_rejected() {
        let v = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(sample_corr(&v, &v).is_err());
        assert!(r0(&v, &v, 2).is_err());
    }

    #[test]
    fn r1_mismatched_width_is_rejected() {
        let v = Tensor::matrix(4, 2, vec![0.0; 8]).unwrap();
        let w = Tensor::matrix(4, 3, vec![0.0; 12]).unwrap();
        assert!(r1(&v, &w, 2).is_err());
    }

    #[test]
    fn zero_variance_column_conventions() {
        let v = Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::matrix(4, 1, vec![0.7; 4]).unwrap();
        // R0 treats the constant column as uncorrelated
        assert_eq!(r0(&v, &w, 2).unwrap(), 0.0);
        // R1 charges it the maximal misalignment
        assert_eq!(r1(&v, &w, 2).unwrap(), 1.0);
        // signed correlations are zeroed as well
        let c = sample_corr(&v, &w).unwrap();
        assert_eq!(c.data()[0], 0.0);
    }
}
