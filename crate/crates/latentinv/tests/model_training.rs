//! Encoder/decoder differentiation oracles, loss identities, the warmup
//! ramp, the jortho estimator against dense ground truth, and smoke-level
//! behavior of the training loop.

mod common;

use common::{fd_grad, rng, vec_rel_err};
use latentinv::data::{generate, standardize};
use latentinv::model::{
    alignment_correlations, auxvae_loss, auxvae_loss_and_grad, elbo, encoder_input, jortho_penalty,
    train, Batch, Mlp, VaeConfig, VaeModel,
};
use latentinv::pde::{Grid, ProblemKind};
use latentinv::tape::{eval_and_grad, Tape};
use latentinv::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

/// Small config whose gradient can be finite-differenced in full.
fn tiny_cfg() -> VaeConfig {
    VaeConfig {
        d_aux: 4,
        d_rec: 3,
        enc_hidden: vec![8, 6],
        dec_hidden: vec![6, 8],
        warmup_epochs: 5,
        seed: 31,
        ..VaeConfig::default()
    }
}

fn randn_matrix(seed: u64, n: usize, m: usize) -> Tensor {
    let mut r = rng(seed);
    let data = (0..n * m)
        .map(|_| r.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(n, m, data).unwrap()
}

fn set_params(model: &mut VaeModel, flat: &[f64]) {
    let mut off = 0;
    for p in model.enc.params_mut().chain(model.dec.params_mut()) {
        let len = p.len();
        p.data_mut().copy_from_slice(&flat[off..off + len]);
        off += len;
    }
    assert_eq!(off, flat.len());
}

fn get_params(model: &VaeModel) -> Vec<f64> {
    model
        .enc
        .params()
        .chain(model.dec.params())
        .flat_map(|p| p.data().iter().copied())
        .collect()
}

#[test]
fn encoder_is_deterministic_with_expected_shapes() {
    let model = VaeModel::new(tiny_cfg(), 16).unwrap();
    let field: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
    let a = model.encode(&field).unwrap();
    let b = model.encode(&field).unwrap();
    assert_eq!(a.mu, b.mu);
    assert_eq!(a.logvar, b.logvar);
    assert_eq!(a.mu.len(), 7);
    assert_eq!(a.logvar.len(), 7);
    assert_eq!(a.mu_aux().len(), 4);
    assert_eq!(a.mu_rec().len(), 3);
    for &lv in &a.logvar {
        assert!((-10.0..=10.0).contains(&lv));
    }
}

#[test]
fn encoder_output_gradient_matches_finite_differences() {
    // d mu[2] / d params, against central differences over every parameter
    let model = VaeModel::new(tiny_cfg(), 16).unwrap();
    let field = randn_matrix(40, 1, 16);

    let eval = |m: &VaeModel| -> (Tape, Vec<latentinv::tape::NodeId>, latentinv::tape::NodeId) {
        let mut tape = Tape::new();
        let x = tape.input(encoder_input(&field).unwrap());
        let ids = m.enc.tape_params(&mut tape);
        let h = m.enc.tape_forward(&mut tape, x, &ids).unwrap();
        let coord = tape.col_slice(h, 2, 3).unwrap();
        let out = tape.sum(coord).unwrap();
        (tape, ids, out)
    };

    let (tape, ids, out) = eval(&model);
    let (_, grads) = eval_and_grad(&tape, out, &ids).unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();

    let enc_len: usize = model.enc.num_params();
    let base: Vec<f64> = get_params(&model)[..enc_len].to_vec();
    let full = get_params(&model);
    let numeric = fd_grad(
        |xs: &[f64]| {
            let mut m = model.clone();
            let mut flat = full.clone();
            flat[..enc_len].copy_from_slice(xs);
            set_params(&mut m, &flat);
            let (tape, _, out) = eval(&m);
            tape.value(out).item()
        },
        &base,
        1e-5,
    );
    let err = vec_rel_err(&analytic, &numeric, 1e-7);
    assert!(err < 1e-5, "encoder gradient rel err {err}");
}

#[test]
fn decoder_jvp_matches_forward_differences() {
    let model = VaeModel::new(tiny_cfg(), 16).unwrap();
    let mut r = rng(41);
    let z: Vec<f64> = (0..7).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let out = model.decode(&z).unwrap();
    assert_eq!(out.len(), 16);

    for probe in 0..3 {
        let dz: Vec<f64> = (0..7).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let (_, jvp) = model.decode_jvp(&z, &dz).unwrap();
        let h = 1e-6;
        let zp: Vec<f64> = z.iter().zip(&dz).map(|(a, d)| a + h * d).collect();
        let zm: Vec<f64> = z.iter().zip(&dz).map(|(a, d)| a - h * d).collect();
        let fp = model.decode(&zp).unwrap();
        let fm = model.decode(&zm).unwrap();
        let numeric: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let err = vec_rel_err(&jvp, &numeric, 1e-8);
        assert!(err < 1e-5, "jvp probe {probe} rel err {err}");

        // finite sensitivity along every coordinate (differentiability sanity)
        assert!(jvp.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn decoder_vjp_is_adjoint_of_jvp() {
    let model = VaeModel::new(tiny_cfg(), 16).unwrap();
    let mut r = rng(42);
    let z: Vec<f64> = (0..7).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    for _ in 0..4 {
        let dz: Vec<f64> = (0..7).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let gbar: Vec<f64> = (0..16).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let (_, jvp) = model.decode_jvp(&z, &dz).unwrap();
        let vjp = model.decode_vjp(&z, &gbar).unwrap();
        let lhs: f64 = gbar.iter().zip(&jvp).map(|(a, b)| a * b).sum();
        let rhs: f64 = vjp.iter().zip(&dz).map(|(a, b)| a * b).sum();
        assert!(
            (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0),
            "adjoint identity violated: {lhs} vs {rhs}"
        );
    }
}

#[test]
fn elbo_vanishes_for_matched_prior_and_perfect_reconstruction() {
    // all-zero parameters: q = N(0, I); with τ = 1 and u = 0 the conditional
    // prior coincides, and the zero decoder reproduces a zero field
    let mut cfg = tiny_cfg();
    cfg.tau_train = 1.0;
    let mut model = VaeModel::new(cfg, 16).unwrap();
    for p in model.enc.params_mut().chain(model.dec.params_mut()) {
        p.data_mut().fill(0.0);
    }
    let x = Tensor::zeros(&[2, 16]);
    let u = Tensor::zeros(&[2, 4]);
    let noise = randn_matrix(43, 2, 7);
    let batch = Batch {
        x: &x,
        u_norm: &u,
        noise: &noise,
    };
    assert_eq!(elbo(&model, &batch).unwrap(), 0.0);
}

#[test]
fn zero_beta_reduces_elbo_to_reconstruction() {
    let mut cfg = tiny_cfg();
    cfg.beta = 0.0;
    let model = VaeModel::new(cfg, 16).unwrap();
    let x = randn_matrix(44, 3, 16);
    let u = randn_matrix(45, 3, 4);
    let noise = randn_matrix(46, 3, 7);
    let batch = Batch {
        x: &x,
        u_norm: &u,
        noise: &noise,
    };
    let parts = auxvae_loss(&model, &batch, 0).unwrap();
    assert_eq!(elbo(&model, &batch).unwrap(), -parts.recon);
    assert!(parts.kl > 0.0); // reported but unweighted
}

#[test]
fn kl_splits_across_latent_blocks() {
    let mu_q = randn_matrix(47, 3, 7);
    let lv_q = randn_matrix(48, 3, 7).scale(0.3);
    let mu_p = randn_matrix(49, 3, 7);
    let lv_p = randn_matrix(50, 3, 7).scale(0.2);

    let kl_block = |lo: usize, hi: usize| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<_> = [&mu_q, &lv_q, &mu_p, &lv_p]
            .iter()
            .map(|t| tape.input((*t).clone()))
            .collect();
        let sl: Vec<_> = ids
            .iter()
            .map(|&id| tape.col_slice(id, lo, hi).unwrap())
            .collect();
        let kl = tape.gaussian_kl_diag(sl[0], sl[1], sl[2], sl[3]).unwrap();
        tape.value(kl).item()
    };
    let joint = kl_block(0, 7);
    let split = kl_block(0, 4) + kl_block(4, 7);
    assert!((joint - split).abs() < 1e-12);
}

#[test]
fn warmup_suppresses_penalties_at_epoch_zero() {
    let model = VaeModel::new(tiny_cfg(), 16).unwrap();
    let x = randn_matrix(51, 4, 16);
    let u = randn_matrix(52, 4, 4);
    let noise = randn_matrix(53, 4, 7);
    let batch = Batch {
        x: &x,
        u_norm: &u,
        noise: &noise,
    };

    let parts0 = auxvae_loss(&model, &batch, 0).unwrap();
    assert_eq!(parts0.total, -elbo(&model, &batch).unwrap());

    // past the warmup knee the full weights apply
    let cfg = &model.cfg;
    let parts = auxvae_loss(&model, &batch, cfg.warmup_epochs + 3).unwrap();
    let assembled = parts.recon
        + cfg.beta * parts.kl
        + cfg.lambda1 * (parts.align_sum + parts.intra_sum)
        + cfg.lambda2 * parts.inter
        + cfg.lambda3 * parts.mse_aux;
    assert!((parts.total - assembled).abs() < 1e-12);

    // and halfway up the ramp, exactly half of each weight
    let half = auxvae_loss(&model, &batch, 3).unwrap();
    let ramp = 3.0 / cfg.warmup_epochs as f64;
    let assembled_half = half.recon
        + cfg.beta * half.kl
        + ramp
            * (cfg.lambda1 * (half.align_sum + half.intra_sum)
                + cfg.lambda2 * half.inter
                + cfg.lambda3 * half.mse_aux);
    assert!((half.total - assembled_half).abs() < 1e-12);
}

#[test]
fn zero_lambdas_reduce_to_conditional_elbo() {
    let mut cfg = tiny_cfg();
    cfg.lambda1 = 0.0;
    cfg.lambda2 = 0.0;
    cfg.lambda3 = 0.0;
    let model = VaeModel::new(cfg, 16).unwrap();
    let x = randn_matrix(54, 3, 16);
    let u = randn_matrix(55, 3, 4);
    let noise = randn_matrix(56, 3, 7);
    let batch = Batch {
        x: &x,
        u_norm: &u,
        noise: &noise,
    };
    let parts = auxvae_loss(&model, &batch, 999).unwrap();
    assert_eq!(parts.total, -elbo(&model, &batch).unwrap());
}

#[test]
fn loss_gradient_matches_finite_differences_on_two_samples() {
    let model = VaeModel::new(tiny_cfg(), 16).unwrap();
    let x = randn_matrix(57, 2, 16);
    let u = randn_matrix(58, 2, 4);
    let noise = randn_matrix(59, 2, 7);
    let epoch = 10; // past warmup: every term active
    let batch = Batch {
        x: &x,
        u_norm: &u,
        noise: &noise,
    };

    let (_, grads) = auxvae_loss_and_grad(&model, &batch, epoch).unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();

    let base = get_params(&model);
    let numeric = fd_grad(
        |xs: &[f64]| {
            let mut m = model.clone();
            set_params(&mut m, xs);
            auxvae_loss(
                &m,
                &Batch {
                    x: &x,
                    u_norm: &u,
                    noise: &noise,
                },
                epoch,
            )
            .unwrap()
            .total
        },
        &base,
        1e-5,
    );
    let err = vec_rel_err(&analytic, &numeric, 1e-6);
    assert!(err < 1e-4, "loss gradient rel err {err}");
}

#[test]
fn aux_anchoring_fades_monotonically_in_tau() {
    // the u-dependent part of the aux-block KL shrinks as the conditional
    // prior widens, vanishing toward the unconditional value
    let kl = |mu_p: f64, tau: f64| -> f64 {
        let mut tape = Tape::new();
        let mq = tape.input(Tensor::matrix(1, 1, vec![0.3]).unwrap());
        let lq = tape.input(Tensor::matrix(1, 1, vec![(0.8f64 * 0.8).ln()]).unwrap());
        let mp = tape.input(Tensor::matrix(1, 1, vec![mu_p]).unwrap());
        let lp = tape.input(Tensor::matrix(1, 1, vec![(tau * tau).ln()]).unwrap());
        let out = tape.gaussian_kl_diag(mq, lq, mp, lp).unwrap();
        tape.value(out).item()
    };
    let taus = [0.1, 0.5, 1.0, 2.0, 10.0, 100.0];
    let anchoring: Vec<f64> = taus.iter().map(|&t| (kl(1.2, t) - kl(0.0, t)).abs()).collect();
    for w in anchoring.windows(2) {
        assert!(w[1] < w[0], "anchoring not monotone: {anchoring:?}");
    }
    assert!(anchoring.last().unwrap() < &1e-3);
}

// ---- jortho -------------------------------------------------------------

fn manual_model(cfg: VaeConfig, n_pixels: usize, dec: Mlp) -> VaeModel {
    let mut model = VaeModel::new(cfg, n_pixels).unwrap();
    model.dec = dec;
    model
}

#[test]
fn jortho_vanishes_for_block_separable_decoder() {
    // two disjoint-input subnetworks writing disjoint output ranges
    let mut r = rng(60);
    let mut w1 = Tensor::zeros(&[8, 6]);
    let mut w2 = Tensor::zeros(&[6, 16]);
    for i in 0..4 {
        for j in 0..3 {
            w1.data_mut()[i * 6 + j] = r.sample::<f64, _>(StandardNormal);
            w1.data_mut()[(4 + i) * 6 + 3 + j] = r.sample::<f64, _>(StandardNormal);
        }
    }
    for i in 0..3 {
        for j in 0..8 {
            w2.data_mut()[i * 16 + j] = r.sample::<f64, _>(StandardNormal);
            w2.data_mut()[(3 + i) * 16 + 8 + j] = r.sample::<f64, _>(StandardNormal);
        }
    }
    let dec = Mlp::from_layers(vec![
        (w1, Tensor::zeros(&[1, 6])),
        (w2, Tensor::zeros(&[1, 16])),
    ])
    .unwrap();
    let cfg = VaeConfig {
        d_aux: 4,
        d_rec: 4,
        ..tiny_cfg()
    };
    let model = manual_model(cfg, 16, dec);
    let z = randn_matrix(61, 5, 8);
    assert_eq!(jortho_penalty(&model, &z, 8, 62).unwrap(), 0.0);
}

#[test]
fn jortho_is_zero_when_nuisance_block_is_ignored() {
    let mut r = rng(63);
    let mut w1 = Tensor::zeros(&[8, 6]);
    for i in 0..4 {
        for j in 0..6 {
            w1.data_mut()[i * 6 + j] = r.sample::<f64, _>(StandardNormal);
        }
    }
    let w2data: Vec<f64> = (0..6 * 16).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let dec = Mlp::from_layers(vec![
        (w1, Tensor::zeros(&[1, 6])),
        (Tensor::matrix(6, 16, w2data).unwrap(), Tensor::zeros(&[1, 16])),
    ])
    .unwrap();
    let cfg = VaeConfig {
        d_aux: 4,
        d_rec: 4,
        ..tiny_cfg()
    };
    let model = manual_model(cfg, 16, dec);
    let z = randn_matrix(64, 3, 8);
    assert_eq!(jortho_penalty(&model, &z, 12, 65).unwrap(), 0.0);
}

#[test]
fn jortho_matches_dense_oracle_for_linear_decoder() {
    // single affine layer: J = Wᵀ, so ‖J_auxᵀ J_rec‖_F² has a closed form
    let w = randn_matrix(66, 8, 16);
    let dec = Mlp::from_layers(vec![(w.clone(), Tensor::zeros(&[1, 16]))]).unwrap();
    let cfg = VaeConfig {
        d_aux: 4,
        d_rec: 4,
        ..tiny_cfg()
    };
    let model = manual_model(cfg, 16, dec);

    let mut exact = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            let mut m = 0.0;
            for p in 0..16 {
                m += w.data()[i * 16 + p] * w.data()[(4 + j) * 16 + p];
            }
            exact += m * m;
        }
    }

    let z = randn_matrix(67, 2, 8);
    // probes a multiple of d_rec → the estimator sums a full orthonormal
    // basis and is exact
    let est = jortho_penalty(&model, &z, 64, 68).unwrap();
    assert!(
        (est - exact).abs() < 1e-8 * exact,
        "exact-path estimate {est} vs {exact}"
    );

    // truncated probe rounds stay unbiased: average over seeds
    let mut acc = 0.0;
    let rounds = 300;
    for s in 0..rounds {
        acc += jortho_penalty(&model, &z, 2, 100 + s).unwrap();
    }
    let mc = acc / rounds as f64;
    assert!(
        (mc - exact).abs() < 0.1 * exact,
        "truncated estimate {mc} vs {exact}"
    );
}

// ---- training loop ------------------------------------------------------

#[test]
fn training_smoke_run_reduces_reconstruction_loss() {
    let grid = Grid::new(28).unwrap();
    let data = standardize(generate(grid, ProblemKind::Conductivity, 200, 901).unwrap()).unwrap();
    let cfg = VaeConfig {
        epochs: 50,
        seed: 71,
        ..VaeConfig::conductivity()
    };
    let report = train(&data, &cfg).unwrap();
    assert!(report.aborted.is_none());
    assert_eq!(report.history.len(), 50);
    for w in report.history[..10].windows(2) {
        assert!(
            w[1].recon < w[0].recon,
            "reconstruction loss not strictly decreasing: {} -> {}",
            w[0].recon,
            w[1].recon
        );
    }
    // validation alignment is tracked from the first epoch
    assert_eq!(report.history[0].val_alignment.len(), 4);
}

#[test]
fn plain_vae_trains_through_the_same_loop() {
    let grid = Grid::new(28).unwrap();
    let data = standardize(generate(grid, ProblemKind::Source, 120, 902).unwrap()).unwrap();
    let cfg = VaeConfig {
        epochs: 8,
        seed: 72,
        ..VaeConfig::source().plain()
    };
    let report = train(&data, &cfg).unwrap();
    assert!(report.aborted.is_none());
    assert_eq!(report.history.len(), 8);
    // penalties are computed for the history but carry zero weight
    let e = &report.history[7];
    assert!((e.loss - (e.recon + e.kl)).abs() < 1e-9);
}

#[test]
fn divergent_training_aborts_with_history() {
    let grid = Grid::new(28).unwrap();
    let data = standardize(generate(grid, ProblemKind::Conductivity, 60, 903).unwrap()).unwrap();
    // Adam's sign-normalized steps put the weights at ±lr after one update;
    // at this size the next forward pass overflows
    let cfg = VaeConfig {
        epochs: 4,
        lr_max: 1e160,
        lr_min: 1e160,
        seed: 73,
        ..VaeConfig::conductivity()
    };
    let report = train(&data, &cfg).unwrap();
    assert!(report.aborted.is_some(), "1e160 learning rate should diverge");
    assert!(report.history.len() < 4);
}

#[test]
fn alignment_correlations_read_the_diagonal() {
    let u = randn_matrix(74, 512, 4);
    let mut mu = u.clone();
    // flip one coordinate's sign and shrink another: |corr| unaffected
    for r in 0..mu.rows() {
        mu.row_mut(r)[1] *= -1.0;
        mu.row_mut(r)[2] *= 0.013;
    }
    let a = alignment_correlations(&u, &mu).unwrap();
    assert_eq!(a.len(), 4);
    for (j, v) in a.iter().enumerate() {
        assert!(*v > 0.999999, "coordinate {j} alignment {v}");
    }
}
