//! Aux-VAE and plain-VAE models: MLP encoder/decoder, the penalized training
//! loss with its reconstruction warmup, and the Adam training loop.
//!
//! The latent space is split into a guided block z_aux (first `d_aux`
//! coordinates, anchored to the normalized physical parameters) and a free
//! nuisance block z_rec. Under the conditional prior the aux block is
//! N(u_norm, τ²I) with a small τ, so the KL term alone already pulls the
//! encoder means toward the labels; the lifted-correlation penalties and the
//! direct MSE anchor sharpen and de-leak that alignment. A plain VAE is the
//! same machinery with the unconditional N(0, I) prior and all penalty
//! weights at zero.
//!
//! Training differentiates through a tape graph rebuilt per minibatch;
//! inference uses the hand-rolled forward/JVP/VJP paths below, which avoid
//! tape overhead in the samplers' hot loop.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, AUX_DIM};
use crate::penalty::{self, penalty_graph};
use crate::tape::{eval_and_grad, NodeId, Tape};
use crate::tensor::{silu, silu_prime, Tensor};
use crate::{Error, Result};

/// Encoder log-variances are clamped to this symmetric range before use.
pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub d_aux: usize,
    pub d_rec: usize,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    /// Prior std of the aux block around u_norm (conditional prior only).
    pub tau_train: f64,
    pub beta: f64,
    /// Weight of the alignment + leakage penalties.
    pub lambda1: f64,
    /// Weight of the aux–nuisance decorrelation penalty.
    pub lambda2: f64,
    /// Weight of the direct MSE anchor of μ_aux to u_norm.
    pub lambda3: f64,
    /// Polynomial lift degree inside the penalties.
    pub poly_degree: usize,
    pub epochs: usize,
    /// Penalty weights ramp linearly from 0 to full over this many epochs.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub seed: u64,
    /// false → unconditional N(0, I) prior (plain VAE).
    pub conditional_prior: bool,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            d_aux: AUX_DIM,
            d_rec: 48,
            enc_hidden: vec![512, 256],
            dec_hidden: vec![256, 512],
            tau_train: 0.1,
            beta: 1.0,
            lambda1: 5.0,
            lambda2: 10.0,
            lambda3: 20.0,
            poly_degree: 3,
            epochs: 1200,
            warmup_epochs: 200,
            batch_size: 256,
            lr_max: 3e-4,
            lr_min: 1e-5,
            seed: 7,
            conditional_prior: true,
        }
    }
}

impl VaeConfig {
    pub fn conductivity() -> Self {
        VaeConfig::default()
    }

    pub fn source() -> Self {
        VaeConfig {
            d_rec: 16,
            ..VaeConfig::default()
        }
    }

    /// Plain-VAE reduction: unconditional prior, no penalties.
    pub fn plain(mut self) -> Self {
        self.conditional_prior = false;
        self.lambda1 = 0.0;
        self.lambda2 = 0.0;
        self.lambda3 = 0.0;
        self
    }

    pub fn d_z(&self) -> usize {
        self.d_aux + self.d_rec
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_aux == 0 || self.d_rec == 0 {
            return Err(Error::config("both latent blocks must be nonempty"));
        }
        if !(self.tau_train > 0.0 && self.tau_train.is_finite()) {
            return Err(Error::config("tau_train must be positive and finite"));
        }
        for (name, l) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("beta", self.beta),
        ] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.poly_degree == 0 {
            return Err(Error::config("poly_degree must be at least 1"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive"));
        }
        if !(self.lr_max > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::config("learning rates must satisfy 0 < lr_min <= lr_max"));
        }
        if self.enc_hidden.is_empty() || self.dec_hidden.is_empty() {
            return Err(Error::config("hidden layer lists must be nonempty"));
        }
        Ok(())
    }
}

/// Linear ramp from 0 at epoch 0 to 1 at `warmup` (1 thereafter); a zero
/// warmup disables the ramp.
pub fn warmup_scale(epoch: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        1.0
    } else {
        (epoch as f64 / warmup as f64).min(1.0)
    }
}

/// Cosine decay from lr_max at epoch 0 to lr_min at the final epoch.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_epochs <= 1 {
        return lr_max;
    }
    let t = (epoch as f64 / (total_epochs - 1) as f64).clamp(0.0, 1.0);
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

// ---- MLP ----------------------------------------------------------------

/// Dense MLP with SiLU on every layer except the last. Weight layout is
/// [fan_in, fan_out] so a batch forward is one matmul per layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<(Tensor, Tensor)>,
}

impl Mlp {
    /// He-style uniform init in ±√(6/fan_in), zero biases.
    pub fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output dims");
        let layers = dims
            .windows(2)
            .map(|d| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let w = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                (
                    Tensor::matrix(fan_in, fan_out, w).expect("init dims consistent"),
                    Tensor::zeros(&[1, fan_out]),
                )
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").0.cols()
    }

    pub fn layers(&self) -> &[(Tensor, Tensor)] {
        &self.layers
    }

    pub fn from_layers(layers: Vec<(Tensor, Tensor)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("an MLP needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].0.cols() != pair[1].0.rows() {
                return Err(Error::ShapeMismatch {
                    op: "mlp_layers",
                    lhs: pair[0].0.shape().to_vec(),
                    rhs: pair[1].0.shape().to_vec(),
                });
            }
        }
        for (w, b) in &layers {
            if b.len() != w.cols() {
                return Err(Error::ShapeMismatch {
                    op: "mlp_bias",
                    lhs: w.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        Ok(Mlp { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (out, _) = self.forward_cached(x)?;
        Ok(out)
    }

    /// Forward pass keeping per-layer pre-activations for the VJP/JVP paths.
    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = x.clone();
        let mut preacts = Vec::with_capacity(self.layers.len().saturating_sub(1));
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let pre = h.matmul(w)?.add_bias(b)?;
            if i + 1 == self.layers.len() {
                h = pre;
            } else {
                h = pre.map(silu);
                preacts.push(pre);
            }
        }
        if !h.all_finite() {
            return Err(Error::NonFinite {
                context: "mlp_forward",
                node: None,
            });
        }
        Ok((h, preacts))
    }

    /// Gradient of ⟨gbar, output⟩ w.r.t. the *input*, given the cached
    /// pre-activations of the matching forward pass.
    pub fn input_vjp(&self, preacts: &[Tensor], gbar: &Tensor) -> Result<Tensor> {
        let mut g = gbar.clone();
        for (i, (w, _)) in self.layers.iter().enumerate().rev() {
            if i + 1 != self.layers.len() {
                let dpre = preacts[i].map(silu_prime);
                g = g.mul(&dpre)?;
            }
            g = g.matmul_nt(w)?;
        }
        Ok(g)
    }

    /// Directional derivative of the output along dx, given cached
    /// pre-activations.
    pub fn input_jvp(&self, preacts: &[Tensor], dx: &Tensor) -> Result<Tensor> {
        let mut d = dx.clone();
        for (i, (w, _)) in self.layers.iter().enumerate() {
            d = d.matmul(w)?;
            if i + 1 != self.layers.len() {
                let dpre = preacts[i].map(silu_prime);
                d = d.mul(&dpre)?;
            }
        }
        Ok(d)
    }

    /// Register every weight and bias as tape parameters (layer order).
    pub fn tape_params(&self, tape: &mut Tape) -> Vec<NodeId> {
        let mut ids = Vec::with_capacity(2 * self.layers.len());
        for (w, b) in &self.layers {
            ids.push(tape.param(w.clone()));
            ids.push(tape.param(b.clone()));
        }
        ids
    }

    /// Differentiable forward through previously registered parameter nodes.
    pub fn tape_forward(&self, tape: &mut Tape, x: NodeId, ids: &[NodeId]) -> Result<NodeId> {
        let mut h = x;
        for i in 0..self.layers.len() {
            let pre = tape.affine(h, ids[2 * i], ids[2 * i + 1])?;
            h = if i + 1 == self.layers.len() {
                pre
            } else {
                tape.silu(pre)?
            };
        }
        Ok(h)
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|(w, b)| [w, b])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b])
    }

    pub fn num_params(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }
}

// ---- model --------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    d_aux: usize,
}

impl EncoderOutput {
    pub fn mu_aux(&self) -> &[f64] {
        &self.mu[..self.d_aux]
    }

    pub fn mu_rec(&self) -> &[f64] {
        &self.mu[self.d_aux..]
    }
}

#[derive(Debug, Clone)]
pub struct VaeModel {
    pub cfg: VaeConfig,
    /// Flattened field size the networks were built for.
    pub n_pixels: usize,
    pub enc: Mlp,
    pub dec: Mlp,
}

/// Per-row mean and population std appended to the flattened field, so the
/// encoder sees global statistics alongside pixels.
pub fn encoder_input(x: &Tensor) -> Result<Tensor> {
    let (n, m) = (x.rows(), x.cols());
    if m == 0 {
        return Err(Error::data("encoder input needs at least one pixel"));
    }
    let mut out = Vec::with_capacity(n * (m + 2));
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / m as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        out.extend_from_slice(row);
        out.push(mean);
        out.push(var.sqrt());
    }
    Tensor::matrix(n, m + 2, out)
}

impl VaeModel {
    pub fn new(cfg: VaeConfig, n_pixels: usize) -> Result<Self> {
        cfg.validate()?;
        if n_pixels == 0 {
            return Err(Error::config("model needs a positive field size"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut enc_dims = vec![n_pixels + 2];
        enc_dims.extend_from_slice(&cfg.enc_hidden);
        enc_dims.push(2 * cfg.d_z());
        let mut dec_dims = vec![cfg.d_z()];
        dec_dims.extend_from_slice(&cfg.dec_hidden);
        dec_dims.push(n_pixels);
        let enc = Mlp::init(&enc_dims, &mut rng);
        let dec = Mlp::init(&dec_dims, &mut rng);
        Ok(VaeModel {
            cfg,
            n_pixels,
            enc,
            dec,
        })
    }

    pub fn d_z(&self) -> usize {
        self.cfg.d_z()
    }

    /// Encode a batch of flattened fields into (mu, clamped logvar).
    pub fn encode_batch(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.cols() != self.n_pixels {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: x.shape().to_vec(),
                rhs: vec![x.rows(), self.n_pixels],
            });
        }
        let inp = encoder_input(x)?;
        let h = self.enc.forward(&inp)?;
        let d_z = self.d_z();
        let (n, m) = (h.rows(), h.cols());
        debug_assert_eq!(m, 2 * d_z);
        let mut mu = Vec::with_capacity(n * d_z);
        let mut logvar = Vec::with_capacity(n * d_z);
        for r in 0..n {
            let row = h.row(r);
            mu.extend_from_slice(&row[..d_z]);
            logvar.extend(row[d_z..].iter().map(|&v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)));
        }
        Ok((
            Tensor::matrix(n, d_z, mu)?,
            Tensor::matrix(n, d_z, logvar)?,
        ))
    }

    pub fn encode(&self, field: &[f64]) -> Result<EncoderOutput> {
        let x = Tensor::matrix(1, field.len(), field.to_vec())?;
        let (mu, logvar) = self.encode_batch(&x)?;
        Ok(EncoderOutput {
            mu: mu.into_data(),
            logvar: logvar.into_data(),
            d_aux: self.cfg.d_aux,
        })
    }

    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.d_z() {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: z.shape().to_vec(),
                rhs: vec![z.rows(), self.d_z()],
            });
        }
        self.dec.forward(z)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        let zt = Tensor::matrix(1, z.len(), z.to_vec())?;
        Ok(self.decode_batch(&zt)?.into_data())
    }

    /// Decoder output together with its directional derivative along dz.
    pub fn decode_jvp(&self, z: &[f64], dz: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if z.len() != self.d_z() || dz.len() != self.d_z() {
            return Err(Error::ShapeMismatch {
                op: "decode_jvp",
                lhs: vec![z.len()],
                rhs: vec![self.d_z()],
            });
        }
        let zt = Tensor::matrix(1, z.len(), z.to_vec())?;
        let (out, preacts) = self.dec.forward_cached(&zt)?;
        let dz = Tensor::matrix(1, dz.len(), dz.to_vec())?;
        let dout = self.dec.input_jvp(&preacts, &dz)?;
        Ok((out.into_data(), dout.into_data()))
    }

    /// Gradient of ⟨gbar, decode(z)⟩ w.r.t. z.
    pub fn decode_vjp(&self, z: &[f64], gbar: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.d_z() || gbar.len() != self.n_pixels {
            return Err(Error::ShapeMismatch {
                op: "decode_vjp",
                lhs: vec![z.len(), gbar.len()],
                rhs: vec![self.d_z(), self.n_pixels],
            });
        }
        let zt = Tensor::matrix(1, z.len(), z.to_vec())?;
        let (_, preacts) = self.dec.forward_cached(&zt)?;
        let g = Tensor::matrix(1, gbar.len(), gbar.to_vec())?;
        Ok(self.dec.input_vjp(&preacts, &g)?.into_data())
    }

    fn all_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.enc
            .params_mut()
            .chain(self.dec.params_mut())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.enc.num_params() + self.dec.num_params()
    }
}

// ---- loss ---------------------------------------------------------------

/// One training minibatch: flattened fields, normalized labels, and the
/// reparameterization noise (pinned by tests, drawn fresh in training).
pub struct Batch<'a> {
    pub x: &'a Tensor,
    pub u_norm: &'a Tensor,
    pub noise: &'a Tensor,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub align_sum: f64,
    pub intra_sum: f64,
    pub inter: f64,
    pub mse_aux: f64,
}

struct LossGraph {
    tape: Tape,
    total: NodeId,
    parts: LossBreakdown,
    param_ids: Vec<NodeId>,
}

fn build_loss_graph(model: &VaeModel, batch: &Batch, epoch: usize) -> Result<LossGraph> {
    let cfg = &model.cfg;
    let b = batch.x.rows();
    let d_z = cfg.d_z();
    if batch.u_norm.rows() != b
        || batch.u_norm.cols() != cfg.d_aux
        || batch.noise.rows() != b
        || batch.noise.cols() != d_z
    {
        return Err(Error::ShapeMismatch {
            op: "loss_batch",
            lhs: batch.x.shape().to_vec(),
            rhs: batch.u_norm.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let x_field = tape.input(batch.x.clone());
    let enc_in = tape.input(encoder_input(batch.x)?);
    let u = tape.input(batch.u_norm.clone());
    let noise = tape.input(batch.noise.clone());

    let mut param_ids = model.enc.tape_params(&mut tape);
    let dec_ids = model.dec.tape_params(&mut tape);

    let head = model.enc.tape_forward(&mut tape, enc_in, &param_ids)?;
    let mu = tape.col_slice(head, 0, d_z)?;
    let logvar_raw = tape.col_slice(head, d_z, 2 * d_z)?;
    let logvar = tape.clamp(logvar_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)?;

    let z = tape.reparam_sample(mu, logvar, noise)?;
    let xhat = model.dec.tape_forward(&mut tape, z, &dec_ids)?;
    param_ids.extend_from_slice(&dec_ids);

    // Gaussian likelihood with unit variance: ½ Σ‖x − x̂‖², averaged over
    // the batch.
    let sq = tape.squared_error(xhat, x_field)?;
    let recon = tape.scale(sq, 0.5 / b as f64)?;

    let (prior_mu, prior_logvar) = if cfg.conditional_prior {
        let mut pm = Tensor::zeros(&[b, d_z]);
        for r in 0..b {
            pm.row_mut(r)[..cfg.d_aux].copy_from_slice(batch.u_norm.row(r));
        }
        let mut pl = Tensor::zeros(&[b, d_z]);
        let log_tau2 = 2.0 * cfg.tau_train.ln();
        for r in 0..b {
            for v in pl.row_mut(r)[..cfg.d_aux].iter_mut() {
                *v = log_tau2;
            }
        }
        (pm, pl)
    } else {
        (Tensor::zeros(&[b, d_z]), Tensor::zeros(&[b, d_z]))
    };
    let pm = tape.input(prior_mu);
    let pl = tape.input(prior_logvar);
    let kl_sum = tape.gaussian_kl_diag(mu, logvar, pm, pl)?;
    let kl = tape.scale(kl_sum, 1.0 / b as f64)?;

    let neg_elbo = {
        let bk = tape.scale(kl, cfg.beta)?;
        tape.add(recon, bk)?
    };

    let ramp = warmup_scale(epoch, cfg.warmup_epochs);
    let mu_aux = tape.col_slice(mu, 0, cfg.d_aux)?;
    let mu_rec = tape.col_slice(mu, cfg.d_aux, d_z)?;
    let pg = penalty_graph(&mut tape, u, mu_aux, mu_rec, cfg.poly_degree)?;
    let mse_aux = {
        let sq = tape.squared_error(mu_aux, u)?;
        tape.scale(sq, 1.0 / (b * cfg.d_aux) as f64)?
    };

    let mut total = neg_elbo;
    for (node, weight) in [
        (pg.align_sum, ramp * cfg.lambda1),
        (pg.intra_sum, ramp * cfg.lambda1),
        (pg.inter, ramp * cfg.lambda2),
        (mse_aux, ramp * cfg.lambda3),
    ] {
        if weight != 0.0 {
            let scaled = tape.scale(node, weight)?;
            total = tape.add(total, scaled)?;
        }
    }

    let parts = LossBreakdown {
        total: tape.value(total).item(),
        recon: tape.value(recon).item(),
        kl: tape.value(kl).item(),
        align_sum: tape.value(pg.align_sum).item(),
        intra_sum: tape.value(pg.intra_sum).item(),
        inter: tape.value(pg.inter).item(),
        mse_aux: tape.value(mse_aux).item(),
    };
    Ok(LossGraph {
        tape,
        total,
        parts,
        param_ids,
    })
}

/// Batch-mean ELBO (reconstruction log-likelihood minus β·KL).
pub fn elbo(model: &VaeModel, batch: &Batch) -> Result<f64> {
    let g = build_loss_graph_elbo_only(model, batch)?;
    Ok(-(g.0 + model.cfg.beta * g.1))
}

fn build_loss_graph_elbo_only(model: &VaeModel, batch: &Batch) -> Result<(f64, f64)> {
    let mut cfg = model.cfg.clone();
    cfg.lambda1 = 0.0;
    cfg.lambda2 = 0.0;
    cfg.lambda3 = 0.0;
    let m = VaeModel {
        cfg,
        n_pixels: model.n_pixels,
        enc: model.enc.clone(),
        dec: model.dec.clone(),
    };
    let g = build_loss_graph(&m, batch, 0)?;
    Ok((g.parts.recon, g.parts.kl))
}

/// Full penalized training loss and its gradient w.r.t. all parameters
/// (encoder layers first, then decoder).
pub fn auxvae_loss_and_grad(
    model: &VaeModel,
    batch: &Batch,
    epoch: usize,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let g = build_loss_graph(model, batch, epoch)?;
    let (_, grads) = eval_and_grad(&g.tape, g.total, &g.param_ids)?;
    Ok((g.parts, grads))
}

/// Training loss value only.
pub fn auxvae_loss(model: &VaeModel, batch: &Batch, epoch: usize) -> Result<LossBreakdown> {
    Ok(build_loss_graph(model, batch, epoch)?.parts)
}

// ---- jortho -------------------------------------------------------------

/// Monte-Carlo estimate of E_z ‖J_aux(z)ᵀ J_rec(z)‖_F² over the rows of
/// `z_batch`, using paired decoder JVPs: a full orthonormal basis of the aux
/// block against rounds of orthonormal probes in the nuisance block. Exact
/// (per z) whenever `probes` is a multiple of d_rec.
pub fn jortho_penalty(model: &VaeModel, z_batch: &Tensor, probes: usize, seed: u64) -> Result<f64> {
    let (d_aux, d_rec) = (model.cfg.d_aux, model.cfg.d_rec);
    let d_z = model.d_z();
    if z_batch.cols() != d_z || z_batch.rows() == 0 || probes == 0 {
        return Err(Error::config("jortho needs [n, d_z] latents and probes >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussian = |r: usize, c: usize| -> Result<Tensor> {
        let data = (0..r * c)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::matrix(r, c, data)
    };

    let mut acc = 0.0;
    for row in 0..z_batch.rows() {
        let z = z_batch.row(row);
        let zt = Tensor::matrix(1, d_z, z.to_vec())?;
        let (_, preacts) = model.dec.forward_cached(&zt)?;

        // full orthonormal basis of the aux block, pushed once per sample
        let vq = crate::linalg::thin_qr_q(&gaussian(d_aux, d_aux)?, 1e-12)?;
        if vq.cols() != d_aux {
            return Err(Error::data("degenerate aux probe basis"));
        }
        let mut j_aux = Vec::with_capacity(d_aux);
        for i in 0..d_aux {
            let mut dz = vec![0.0; d_z];
            for a in 0..d_aux {
                dz[a] = vq.data()[a * d_aux + i];
            }
            let d = Tensor::matrix(1, d_z, dz)?;
            j_aux.push(model.dec.input_jvp(&preacts, &d)?);
        }

        let mut remaining = probes;
        let mut rounds = 0usize;
        let mut sample_est = 0.0;
        while remaining > 0 {
            let k = remaining.min(d_rec);
            let wq = crate::linalg::thin_qr_q(&gaussian(d_rec, k)?, 1e-12)?;
            if wq.cols() != k {
                return Err(Error::data("degenerate nuisance probe basis"));
            }
            let mut round = 0.0;
            for j in 0..k {
                let mut dz = vec![0.0; d_z];
                for r in 0..d_rec {
                    dz[d_aux + r] = wq.data()[r * k + j];
                }
                let d = Tensor::matrix(1, d_z, dz)?;
                let jr = model.dec.input_jvp(&preacts, &d)?;
                for ja in &j_aux {
                    let ip = crate::tensor::dot(ja.data(), jr.data());
                    round += ip * ip;
                }
            }
            sample_est += round * d_rec as f64 / k as f64;
            rounds += 1;
            remaining -= k;
        }
        acc += sample_est / rounds as f64;
    }
    Ok(acc / z_batch.rows() as f64)
}

// ---- optimizer ----------------------------------------------------------

/// Adam with bias correction; state lives per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        Adam {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_params<'a>(params: impl Iterator<Item = &'a Tensor>) -> Self {
        Adam::new(&params.map(|p| p.shape().to_vec()).collect::<Vec<_>>())
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            for j in 0..g.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ---- training -----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub align_sum: f64,
    pub intra_sum: f64,
    pub inter: f64,
    pub mse_aux: f64,
    /// |corr(u_norm_j, μ_aux_j)| per aux coordinate on the validation split.
    pub val_alignment: Vec<f64>,
}

#[derive(Debug)]
pub struct TrainReport {
    pub model: VaeModel,
    pub history: Vec<EpochStats>,
    /// Set when the loss went non-finite; the model and history hold the
    /// state at the moment of abort.
    pub aborted: Option<String>,
}

/// Per-coordinate |corr| between label columns and aux-mean columns.
pub fn alignment_correlations(u_norm: &Tensor, mu_aux: &Tensor) -> Result<Vec<f64>> {
    let c = penalty::sample_corr(u_norm, mu_aux)?;
    let d = u_norm.cols().min(mu_aux.cols());
    Ok((0..d).map(|j| c.data()[j * mu_aux.cols() + j].abs()).collect())
}

/// Train on the dataset's 95/5 split. The dataset must carry label
/// normalization metadata (run `standardize` first).
pub fn train(dataset: &Dataset, cfg: &VaeConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.norm_meta().is_none() {
        return Err(Error::data("training requires a standardized dataset"));
    }
    let n_pixels = dataset.grid().num_nodes();
    let mut model = VaeModel::new(cfg.clone(), n_pixels)?;

    let x_all = dataset.x_matrix();
    let u_all = dataset.u_matrix_norm()?;
    let (train_range, val_range) = dataset.train_val_split();
    let train_idx: Vec<usize> = train_range.collect();
    let val_idx: Vec<usize> = val_range.collect();
    if train_idx.is_empty() {
        return Err(Error::data("empty training split"));
    }

    let take_rows = |m: &Tensor, idx: &[usize]| -> Tensor {
        let cols = m.cols();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(m.row(i));
        }
        Tensor::matrix(idx.len(), cols, out).expect("row gather consistent")
    };
    let x_train = take_rows(&x_all, &train_idx);
    let u_train = take_rows(&u_all, &train_idx);
    let x_val = take_rows(&x_all, &val_idx);
    let u_val = take_rows(&u_all, &val_idx);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let n_train = train_idx.len();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut adam = Adam::for_params(model.enc.params().chain(model.dec.params()));
    let mut history: Vec<EpochStats> = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
        // Fisher–Yates reshuffle each epoch
        for i in (1..n_train).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut acc = LossBreakdown::default();
        let mut batches = 0.0;
        let mut start = 0;
        while start < n_train {
            let end = (start + cfg.batch_size).min(n_train);
            let idx: Vec<usize> = order[start..end].to_vec();
            let xb = take_rows(&x_train, &idx);
            let ub = take_rows(&u_train, &idx);
            let noise_data: Vec<f64> = (0..idx.len() * cfg.d_z())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let noise = Tensor::matrix(idx.len(), cfg.d_z(), noise_data)?;
            let batch = Batch {
                x: &xb,
                u_norm: &ub,
                noise: &noise,
            };

            let step = auxvae_loss_and_grad(&model, &batch, epoch);
            let (parts, grads) = match step {
                Ok(v) => v,
                Err(Error::NonFinite { context, node }) => {
                    return Ok(TrainReport {
                        model,
                        history,
                        aborted: Some(format!(
                            "non-finite loss at epoch {epoch} ({context}, node {node:?})"
                        )),
                    });
                }
                Err(e) => return Err(e),
            };
            if !parts.total.is_finite() {
                return Ok(TrainReport {
                    model,
                    history,
                    aborted: Some(format!("loss diverged at epoch {epoch}")),
                });
            }

            let mut params = model.all_params_mut();
            adam.step(&mut params, &grads, lr);

            acc.total += parts.total;
            acc.recon += parts.recon;
            acc.kl += parts.kl;
            acc.align_sum += parts.align_sum;
            acc.intra_sum += parts.intra_sum;
            acc.inter += parts.inter;
            acc.mse_aux += parts.mse_aux;
            batches += 1.0;
            start = end;
        }

        let val_alignment = if val_idx.len() >= 2 {
            match model.encode_batch(&x_val) {
                Ok((mu, _)) => {
                    let mu_aux = Tensor::matrix(
                        val_idx.len(),
                        cfg.d_aux,
                        (0..val_idx.len())
                            .flat_map(|r| mu.row(r)[..cfg.d_aux].to_vec())
                            .collect(),
                    )?;
                    alignment_correlations(&u_val, &mu_aux)?
                }
                Err(Error::NonFinite { .. }) => {
                    return Ok(TrainReport {
                        model,
                        history,
                        aborted: Some(format!(
                            "non-finite encoder state after epoch {epoch}"
                        )),
                    });
                }
                Err(e) => return Err(e),
            }
        } else {
            Vec::new()
        };

        history.push(EpochStats {
            epoch,
            lr,
            loss: acc.total / batches,
            recon: acc.recon / batches,
            kl: acc.kl / batches,
            align_sum: acc.align_sum / batches,
            intra_sum: acc.intra_sum / batches,
            inter: acc.inter / batches,
            mse_aux: acc.mse_aux / batches,
            val_alignment,
        });
    }

    Ok(TrainReport {
        model,
        history,
        aborted: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_ramp_is_piecewise_linear() {
        assert_eq!(warmup_scale(0, 200), 0.0);
        assert_eq!(warmup_scale(100, 200), 0.5);
        assert_eq!(warmup_scale(200, 200), 1.0);
        assert_eq!(warmup_scale(1000, 200), 1.0);
        // constant increments below the knee
        let d0 = warmup_scale(1, 200) - warmup_scale(0, 200);
        for e in 1..200 {
            let d = warmup_scale(e + 1, 200) - warmup_scale(e, 200);
            assert!((d - d0).abs() < 1e-15);
        }
        assert_eq!(warmup_scale(5, 0), 1.0);
    }

    #[test]
    fn cosine_schedule_hits_both_endpoints() {
        assert!((cosine_lr(0, 100, 3e-4, 1e-5) - 3e-4).abs() < 1e-18);
        assert!((cosine_lr(99, 100, 3e-4, 1e-5) - 1e-5).abs() < 1e-18);
        let mid = cosine_lr(50, 101, 3e-4, 1e-5);
        assert!((mid - 0.5 * (3e-4 + 1e-5)).abs() < 1e-12);
        assert_eq!(cosine_lr(0, 1, 3e-4, 1e-5), 3e-4);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = VaeConfig::default();
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.tau_train = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.lambda2 = -1.0;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.d_rec = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn plain_reduction_zeroes_penalties() {
        let cfg = VaeConfig::source().plain();
        assert!(!cfg.conditional_prior);
        assert_eq!(cfg.lambda1, 0.0);
        assert_eq!(cfg.lambda2, 0.0);
        assert_eq!(cfg.lambda3, 0.0);
        assert_eq!(cfg.d_z(), 20);
    }
}
