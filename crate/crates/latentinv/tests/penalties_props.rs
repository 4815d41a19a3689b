//! Behavior of the lifted-correlation penalties: exact estimator identities,
//! sampling behavior on independent data, the moment-test rationale behind
//! them, and agreement between the exact and smoothed tape-graph flavors.

mod common;

use common::{fd_grad, mean, rng, vec_rel_err};
use latentinv::penalty::{
    penalty_graph, penalty_terms, poly_lift, r0, r0_graph, r1, sample_corr,
};
use latentinv::tape::{eval_and_grad, Tape};
use latentinv::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn randn_matrix(seed: u64, n: usize, m: usize) -> Tensor {
    let mut r = rng(seed);
    let data = (0..n * m)
        .map(|_| r.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(n, m, data).unwrap()
}

#[test]
fn lift_layout_is_degree_major() {
    let v = Tensor::matrix(2, 2, vec![2.0, 3.0, 4.0, 5.0]).unwrap();
    let l = poly_lift(&v, 2);
    assert_eq!(l.shape(), &[2, 4]);
    // columns: v1, v2, v1², v2²
    assert_eq!(l.row(0), &[2.0, 3.0, 4.0, 9.0]);
    assert_eq!(l.row(1), &[4.0, 5.0, 16.0, 25.0]);
}

#[test]
fn corr_of_affine_images_is_signed_unit() {
    let v = randn_matrix(11, 512, 1);
    let up = v.map(|x| 2.0 * x + 1.0);
    let down = v.map(|x| -0.5 * x + 3.0);
    let c_up = sample_corr(&v, &up).unwrap();
    let c_down = sample_corr(&v, &down).unwrap();
    assert!((c_up.data()[0] - 1.0).abs() < 1e-12);
    assert!((c_down.data()[0] + 1.0).abs() < 1e-12);
}

#[test]
fn corr_of_independent_noise_is_small() {
    let v = randn_matrix(12, 4096, 2);
    let w = randn_matrix(13, 4096, 3);
    let c = sample_corr(&v, &w).unwrap();
    assert_eq!(c.shape(), &[2, 3]);
    for &x in c.data() {
        assert!(x.abs() < 0.1, "independent corr {x} too large");
    }
}

#[test]
fn r0_of_identical_single_coordinate_is_one() {
    let v = randn_matrix(14, 256, 1);
    assert_eq!(r0(&v, &v, 1).unwrap(), 1.0);
}

#[test]
fn r0_of_independent_batches_is_small() {
    let v = randn_matrix(15, 4096, 2);
    let w = randn_matrix(16, 4096, 3);
    let val = r0(&v, &w, 2).unwrap();
    assert!(val < 0.05, "independent R0 = {val}");
}

#[test]
fn r0_on_independent_data_decays_like_root_n() {
    // E|corr| of independent pairs scales as n^{-1/2}; the fitted log-log
    // slope over two orders of magnitude should sit near -0.5.
    let sizes = [256usize, 1024, 4096, 16384];
    let reps = 8;
    let mut seed = 170;
    let mut points = Vec::new();
    for &n in &sizes {
        let mut acc = 0.0;
        for _ in 0..reps {
            let v = randn_matrix(seed, n, 1);
            let w = randn_matrix(seed + 1, n, 1);
            seed += 2;
            acc += r0(&v, &w, 3).unwrap();
        }
        points.push(((n as f64).ln(), (acc / reps as f64).ln()));
    }
    let xm = mean(&points.iter().map(|p| p.0).collect::<Vec<_>>());
    let ym = mean(&points.iter().map(|p| p.1).collect::<Vec<_>>());
    let num: f64 = points.iter().map(|p| (p.0 - xm) * (p.1 - ym)).sum();
    let den: f64 = points.iter().map(|p| (p.0 - xm) * (p.0 - xm)).sum();
    let slope = num / den;
    assert!(
        (-0.7..=-0.3).contains(&slope),
        "decay slope {slope} not near -1/2"
    );
}

#[test]
fn r1_of_matched_signs_vanishes_exactly() {
    let v = randn_matrix(18, 333, 3);
    let neg = v.scale(-1.0);
    assert_eq!(r1(&v, &v, 3).unwrap(), 0.0);
    assert_eq!(r1(&v, &neg, 3).unwrap(), 0.0);

    // positively rescaled copies are not bit-identical but still align
    let scaled = {
        let mut t = v.clone();
        for r in 0..t.rows() {
            for (j, x) in t.row_mut(r).iter_mut().enumerate() {
                *x *= 0.3 + j as f64;
            }
        }
        t
    };
    assert!(r1(&v, &scaled, 3).unwrap() < 1e-12);
}

#[test]
fn r1_of_independent_batches_is_near_one() {
    let v = randn_matrix(19, 4096, 2);
    let w = randn_matrix(20, 4096, 2);
    let val = r1(&v, &w, 3).unwrap();
    assert!((val - 1.0).abs() < 0.05, "independent R1 = {val}");
}

#[test]
fn aligned_encoder_zeroes_alignment_penalty() {
    let u = randn_matrix(21, 4096, 4);
    let mu_rec = randn_matrix(22, 4096, 6);
    let terms = penalty_terms(&u, &u, &mu_rec, 3).unwrap();
    assert_eq!(terms.align_sum, 0.0);
    assert!(terms.intra_sum < 0.2, "intra = {}", terms.intra_sum);
    assert!(terms.inter < 0.05, "inter = {}", terms.inter);
}

#[test]
fn permuted_labels_are_penalized() {
    // each aux mean reproduces the *wrong* coordinate: alignment collapses
    // while the cross-coordinate leakage term lights up
    let u = randn_matrix(23, 4096, 4);
    let (n, d) = (u.rows(), u.cols());
    let mut rot = vec![0.0; n * d];
    for r in 0..n {
        for j in 0..d {
            rot[r * d + j] = u.data()[r * d + (j + 1) % d];
        }
    }
    let mu_aux = Tensor::matrix(n, d, rot).unwrap();
    let mu_rec = randn_matrix(24, n, 6);
    let terms = penalty_terms(&u, &mu_aux, &mu_rec, 3).unwrap();
    assert!(terms.align_sum > 3.0, "align = {}", terms.align_sum);
    assert!(
        terms.intra_sum > 0.1 && terms.intra_sum < 2.0,
        "intra = {}",
        terms.intra_sum
    );
}

#[test]
fn mixed_moment_test_detects_correlation() {
    // For jointly Gaussian (X, Y): all nine mixed central moments up to
    // degree three vanish iff X ⫫ Y. At n = 50000 the dependent case is
    // rejected at better than five standard errors while the independent
    // case stays inside three.
    let n = 50000;
    let mut r = rng(25);
    let x: Vec<f64> = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let z: Vec<f64> = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();

    let t_stats = |rho: f64| -> Vec<f64> {
        let y: Vec<f64> = x
            .iter()
            .zip(&z)
            .map(|(&xi, &zi)| rho * xi + (1.0 - rho * rho).sqrt() * zi)
            .collect();
        let mut out = Vec::new();
        for k in 1..=3i32 {
            for kp in 1..=3i32 {
                let xs: Vec<f64> = x.iter().map(|&v| v.powi(k)).collect();
                let ys: Vec<f64> = y.iter().map(|&v| v.powi(kp)).collect();
                let (mx, my) = (mean(&xs), mean(&ys));
                let prods: Vec<f64> =
                    xs.iter().zip(&ys).map(|(&a, &b)| (a - mx) * (b - my)).collect();
                let m = mean(&prods);
                let se = (common::variance(&prods) / n as f64).sqrt();
                out.push(m.abs() / se);
            }
        }
        out
    };

    let independent = t_stats(0.0);
    assert!(
        independent.iter().all(|&t| t < 3.0),
        "independent case rejected: {independent:?}"
    );
    let dependent = t_stats(0.5);
    let max_t = dependent.iter().cloned().fold(0.0, f64::max);
    assert!(max_t > 5.0, "dependent case not detected: {dependent:?}");
}

#[test]
fn pairwise_uncorrelatedness_is_not_independence() {
    // v1, v2 iid signs and w1 = v1·v2: every lifted pair is uncorrelated
    // (R0 ≈ 0) yet w1 is a deterministic function of (v1, v2) — the
    // third-order mixed moment E[v1 v2 w1] = 1 exposes it.
    let n = 8192;
    let mut r = rng(26);
    let mut v = vec![0.0; n * 2];
    let mut w = vec![0.0; n];
    let mut third = 0.0;
    for i in 0..n {
        let a: f64 = if r.random::<bool>() { 1.0 } else { -1.0 };
        let b: f64 = if r.random::<bool>() { 1.0 } else { -1.0 };
        v[i * 2] = a;
        v[i * 2 + 1] = b;
        w[i] = a * b;
        third += a * b * w[i];
    }
    let v = Tensor::matrix(n, 2, v).unwrap();
    let w = Tensor::matrix(n, 1, w).unwrap();
    let val = r0(&v, &w, 3).unwrap();
    assert!(val < 0.05, "R0 = {val}");
    assert_eq!(third / n as f64, 1.0);
}

#[test]
fn graph_matches_exact_penalties() {
    let u = randn_matrix(27, 64, 4);
    let mu_aux = randn_matrix(28, 64, 4);
    let mu_rec = randn_matrix(29, 64, 9);

    let exact = penalty_terms(&u, &mu_aux, &mu_rec, 3).unwrap();
    let mut tape = Tape::new();
    let (ui, ai, ri) = (
        tape.input(u.clone()),
        tape.input(mu_aux.clone()),
        tape.input(mu_rec.clone()),
    );
    let g = penalty_graph(&mut tape, ui, ai, ri, 3).unwrap();

    // exact align is Σ_j R1(u_j, μ_j); the graph computes the same sum
    let align_exact: f64 = (0..4)
        .map(|j| {
            let uj = column(&u, j);
            let aj = column(&mu_aux, j);
            r1(&uj, &aj, 3).unwrap()
        })
        .sum();
    assert!((tape.value(g.align_sum).item() - align_exact).abs() < 1e-5);
    assert!((tape.value(g.align_sum).item() - exact.align_sum).abs() < 1e-5);
    assert!((tape.value(g.intra_sum).item() - exact.intra_sum).abs() < 1e-5);
    assert!((tape.value(g.inter).item() - exact.inter).abs() < 1e-5);

    // and the standalone R0 graph agrees with the exact estimator
    let mut t2 = Tape::new();
    let (vi, wi) = (tape_input(&mut t2, &u), tape_input(&mut t2, &mu_rec));
    let r0_node = r0_graph(&mut t2, vi, wi, 2).unwrap();
    let r0_exact = r0(&u, &mu_rec, 2).unwrap();
    assert!((t2.value(r0_node).item() - r0_exact).abs() < 1e-5);
}

fn tape_input(tape: &mut Tape, t: &Tensor) -> latentinv::tape::NodeId {
    tape.input(t.clone())
}

fn column(t: &Tensor, j: usize) -> Tensor {
    let (n, m) = (t.rows(), t.cols());
    let data = (0..n).map(|r| t.data()[r * m + j]).collect();
    Tensor::matrix(n, 1, data).unwrap()
}

#[test]
fn graph_penalty_gradients_match_finite_differences() {
    let n = 32;
    let (d, dr, k) = (3, 4, 2);
    let u = randn_matrix(30, n, d);
    let mu_aux0 = randn_matrix(31, n, d);
    let mu_rec0 = randn_matrix(32, n, dr);

    let build = |aux: Tensor, rec: Tensor| -> (Tape, latentinv::tape::NodeId, Vec<latentinv::tape::NodeId>) {
        let mut tape = Tape::new();
        let ui = tape.input(u.clone());
        let ai = tape.param(aux);
        let ri = tape.param(rec);
        let g = penalty_graph(&mut tape, ui, ai, ri, k).unwrap();
        let s = tape.add(g.align_sum, g.intra_sum).unwrap();
        let out = tape.add(s, g.inter).unwrap();
        (tape, out, vec![ai, ri])
    };

    let (tape, out, params) = build(mu_aux0.clone(), mu_rec0.clone());
    let (_, grads) = eval_and_grad(&tape, out, &params).unwrap();
    let analytic: Vec<f64> = grads
        .iter()
        .flat_map(|g| g.data().iter().copied())
        .collect();

    let flat0: Vec<f64> = mu_aux0
        .data()
        .iter()
        .chain(mu_rec0.data())
        .copied()
        .collect();
    let split = n * d;
    let numeric = fd_grad(
        |xs: &[f64]| {
            let aux = Tensor::matrix(n, d, xs[..split].to_vec()).unwrap();
            let rec = Tensor::matrix(n, dr, xs[split..].to_vec()).unwrap();
            let (tape, out, _) = build(aux, rec);
            tape.value(out).item()
        },
        &flat0,
        1e-6,
    );
    let err = vec_rel_err(&analytic, &numeric, 1e-8);
    assert!(err < 1e-6, "penalty gradient mismatch: {err}");
}

#[test]
fn graph_stays_finite_on_constant_columns() {
    let n = 64;
    let u = randn_matrix(33, n, 3);
    let mut aux = randn_matrix(34, n, 3);
    for r in 0..n {
        aux.row_mut(r)[1] = 0.25; // collapsed encoder coordinate
    }
    let rec = randn_matrix(35, n, 4);

    let mut tape = Tape::new();
    let (ui, ai, ri) = (
        tape.input(u.clone()),
        tape.input(aux.clone()),
        tape.input(rec.clone()),
    );
    let g = penalty_graph(&mut tape, ui, ai, ri, 3).unwrap();
    for node in [g.align_sum, g.intra_sum, g.inter] {
        assert!(tape.value(node).item().is_finite());
    }

    // the exact estimator charges the collapsed coordinate full misalignment
    let terms = penalty_terms(&u, &aux, &rec, 3).unwrap();
    assert!(terms.align_sum >= 1.0);
}

// ---- randomized invariants ----------------------------------------------

fn spread_ok(t: &Tensor, k: usize) -> bool {
    // stay away from the numerically ambiguous zone between "genuinely
    // constant" and "clearly varying" lifted columns
    let l = poly_lift(t, k);
    let (n, m) = (l.rows(), l.cols());
    (0..m).all(|j| {
        let col: Vec<f64> = (0..n).map(|r| l.data()[r * m + j]).collect();
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let amp = lo.abs().max(hi.abs());
        hi - lo == 0.0 || hi - lo > 1e-6 * amp.max(1e-3)
    })
}

fn matrix_strategy(n: usize, m: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0..3.0f64, n * m)
        .prop_map(move |data| Tensor::matrix(n, m, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn penalties_stay_in_unit_interval(
        v in matrix_strategy(6, 2),
        w in matrix_strategy(6, 2),
        k in 1usize..=3,
    ) {
        let a = r0(&v, &w, k).unwrap();
        let b = r1(&v, &w, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&a), "R0 = {a}");
        prop_assert!((0.0..=1.0).contains(&b), "R1 = {b}");
    }

    #[test]
    fn penalties_ignore_positive_coordinate_rescaling(
        v in matrix_strategy(8, 2),
        w in matrix_strategy(8, 2),
        sv in prop::collection::vec(0.1..10.0f64, 2),
        sw in prop::collection::vec(0.1..10.0f64, 2),
        k in 1usize..=3,
    ) {
        prop_assume!(spread_ok(&v, k) && spread_ok(&w, k));
        let scale_cols = |t: &Tensor, s: &[f64]| {
            let mut out = t.clone();
            for r in 0..out.rows() {
                for (j, x) in out.row_mut(r).iter_mut().enumerate() {
                    *x *= s[j];
                }
            }
            out
        };
        let vs = scale_cols(&v, &sv);
        let ws = scale_cols(&w, &sw);
        prop_assert!((r0(&v, &w, k).unwrap() - r0(&vs, &ws, k).unwrap()).abs() < 1e-9);
        prop_assert!((r1(&v, &w, k).unwrap() - r1(&vs, &ws, k).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn degree_one_penalties_ignore_affine_maps(
        v in matrix_strategy(8, 2),
        w in matrix_strategy(8, 2),
        sv in prop::collection::vec(0.1..10.0f64, 2),
        shift in prop::collection::vec(-5.0..5.0f64, 2),
    ) {
        prop_assume!(spread_ok(&v, 1) && spread_ok(&w, 1));
        let affine = |t: &Tensor| {
            let mut out = t.clone();
            for r in 0..out.rows() {
                for (j, x) in out.row_mut(r).iter_mut().enumerate() {
                    *x = sv[j] * *x + shift[j];
                }
            }
            out
        };
        let va = affine(&v);
        prop_assert!((r0(&v, &w, 1).unwrap() - r0(&va, &w, 1).unwrap()).abs() < 1e-9);
        prop_assert!((r1(&v, &w, 1).unwrap() - r1(&va, &w, 1).unwrap()).abs() < 1e-9);
    }
}
