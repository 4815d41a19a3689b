//! Posterior computation: log-posterior targets, MAP estimation, and
//! Hamiltonian Monte Carlo (fixed-length and no-U-turn variants).
//!
//! Samplers are generic over a [`Target`] giving the log posterior and its
//! gradient. Model-specific targets are thin adapters: the collapsed VAE
//! target works on `[u_norm ‖ z_rec]` directly (the auxiliary block of the
//! decoder input is pinned to `u_norm`), the soft target carries `u_norm` as
//! explicit state next to the full latent, and the GP targets wrap the
//! whitened-coordinate posteriors from [`crate::gp`].
//!
//! Both samplers share the same adaptation schedule: dual averaging on the
//! step size throughout warmup, with the diagonal mass matrix estimated from
//! the first half of warmup and frozen afterwards. Post-warmup draws use a
//! frozen step size and mass.

use crate::gp::{
    gp_fixed_logpost_grad_with, gp_hier_unconstrained_logpost_grad, GpFactor, HyperRanges,
    SEHyper, WhitenedField,
};
use crate::model::{cosine_lr, Adam, VaeModel};
use crate::pde::{misfit_and_grad, Field2D, Grid, ObservationMask, ProblemKind};
use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Energy error treated as a divergent transition.
pub const DIVERGENCE_ENERGY: f64 = 1000.0;
/// Clipping range for the adapted inverse-mass diagonal.
pub const MASS_FLOOR: f64 = 1e-4;
pub const MASS_CEIL: f64 = 1e2;
/// Post-warmup divergence fraction above which a chain carries a warning.
pub const DIVERGENCE_WARN_FRACTION: f64 = 0.10;

const DA_GAMMA: f64 = 0.05;
const DA_T0: f64 = 10.0;
const DA_KAPPA: f64 = 0.75;

/// Log-posterior density with gradient. Implementations return
/// `(-inf, zeros)` for states they reject (failed solves, overflowed
/// decoders); hard errors are reserved for malformed inputs.
pub trait Target {
    fn logpost_grad(&self, state: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<F> Target for F
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn logpost_grad(&self, state: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(state)
    }
}

fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

// ---------------------------------------------------------------------------
// Sampler configuration and output.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Hmc,
    Nuts,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HmcConfig {
    /// Leapfrog steps per proposal (fixed-length HMC only).
    pub leapfrog_steps: usize,
    /// Initial step size handed to dual averaging.
    pub step_size: f64,
    pub warmup: usize,
    pub samples: usize,
    /// Dual-averaging target acceptance statistic.
    pub target_accept: f64,
    /// Maximum tree depth (no-U-turn sampler only).
    pub max_depth: usize,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            leapfrog_steps: 10,
            step_size: 0.1,
            warmup: 500,
            samples: 1000,
            target_accept: 0.75,
            max_depth: 10,
            seed: 0,
        }
    }
}

impl HmcConfig {
    /// Fixed-length HMC defaults with the given trajectory length and
    /// initial step size.
    pub fn hmc(leapfrog_steps: usize, step_size: f64) -> Self {
        Self {
            leapfrog_steps,
            step_size,
            target_accept: 0.75,
            ..Self::default()
        }
    }

    /// No-U-turn defaults with the given initial step size.
    pub fn nuts(step_size: f64) -> Self {
        Self {
            leapfrog_steps: 1,
            step_size,
            target_accept: 0.8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.leapfrog_steps == 0 {
            return Err(Error::config("leapfrog_steps must be at least 1"));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::config("step_size must be positive and finite"));
        }
        if self.warmup < 2 {
            return Err(Error::config("warmup must be at least 2 iterations"));
        }
        if self.samples == 0 {
            return Err(Error::config("samples must be at least 1"));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::config("target_accept must lie in (0, 1)"));
        }
        if self.max_depth == 0 {
            return Err(Error::config("max_depth must be at least 1"));
        }
        Ok(())
    }
}

/// One chain worth of post-warmup draws plus adaptation bookkeeping.
#[derive(Debug, Clone)]
pub struct Chain {
    /// Post-warmup states, one per configured sample.
    pub states: Vec<Vec<f64>>,
    pub logposts: Vec<f64>,
    pub accepts: Vec<bool>,
    pub divergences: Vec<bool>,
    /// Frozen post-warmup step size.
    pub step_size: f64,
    /// Step size used at each warmup iteration.
    pub step_size_trace: Vec<f64>,
    /// Frozen inverse-mass diagonal (per-coordinate posterior variance
    /// estimate, clipped).
    pub mass_diag: Vec<f64>,
    /// Mean acceptance statistic over post-warmup iterations.
    pub accept_stat: f64,
    /// Set when more than [`DIVERGENCE_WARN_FRACTION`] of post-warmup
    /// transitions diverged.
    pub warning: Option<String>,
}

impl Chain {
    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// Trace of one coordinate across the post-warmup draws.
    pub fn component(&self, j: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[j]).collect()
    }

    pub fn divergence_rate(&self) -> f64 {
        if self.divergences.is_empty() {
            return 0.0;
        }
        let n = self.divergences.iter().filter(|&&d| d).count();
        n as f64 / self.divergences.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Leapfrog integration.

/// A point in phase space together with the cached target evaluation at `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub logp: f64,
    pub grad: Vec<f64>,
}

impl PhasePoint {
    /// Evaluate the target at `q` and package the result.
    pub fn from_state<T: Target + ?Sized>(target: &T, q: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        let (logp, grad) = target.logpost_grad(&q)?;
        Ok(Self { q, p, logp, grad })
    }
}

fn kinetic(p: &[f64], minv: &[f64]) -> f64 {
    p.iter().zip(minv).map(|(pi, mi)| 0.5 * mi * pi * pi).sum()
}

fn sample_momentum(rng: &mut ChaCha8Rng, minv: &[f64]) -> Vec<f64> {
    // minv is the inverse mass, so momenta have variance 1/minv.
    minv.iter().map(|&mi| randn(rng) / mi.sqrt()).collect()
}

/// `steps` leapfrog steps of size `eps` under the kinetic energy
/// `p' M^{-1} p / 2` with diagonal `M^{-1} = minv`. A negative `eps`
/// integrates backwards. Returns a phase point with `logp = -inf` as soon as
/// the target value or gradient stops being finite; `steps == 0` returns the
/// start unchanged.
pub fn leapfrog<T: Target + ?Sized>(
    target: &T,
    start: &PhasePoint,
    eps: f64,
    steps: usize,
    minv: &[f64],
) -> Result<PhasePoint> {
    let dim = start.q.len();
    let mut q = start.q.clone();
    let mut p = start.p.clone();
    let mut grad = start.grad.clone();
    let mut logp = start.logp;
    for _ in 0..steps {
        for i in 0..dim {
            p[i] += 0.5 * eps * grad[i];
        }
        for i in 0..dim {
            q[i] += eps * minv[i] * p[i];
        }
        let (lp, g) = target.logpost_grad(&q)?;
        if !lp.is_finite() || !g.iter().all(|v| v.is_finite()) {
            return Ok(PhasePoint {
                q,
                p,
                logp: f64::NEG_INFINITY,
                grad: vec![0.0; dim],
            });
        }
        logp = lp;
        grad = g;
        for i in 0..dim {
            p[i] += 0.5 * eps * grad[i];
        }
    }
    Ok(PhasePoint { q, p, logp, grad })
}

// ---------------------------------------------------------------------------
// Dual averaging (Nesterov-style step-size adaptation).

#[derive(Debug, Clone)]
struct DualAveraging {
    mu: f64,
    delta: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    m: f64,
}

impl DualAveraging {
    fn new(eps0: f64, delta: f64) -> Self {
        Self {
            mu: (10.0 * eps0).ln(),
            delta,
            log_eps: eps0.ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            m: 0.0,
        }
    }

    fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    fn averaged(&self) -> f64 {
        self.log_eps_bar.exp()
    }

    fn adapt(&mut self, alpha: f64) {
        self.m += 1.0;
        let frac = 1.0 / (self.m + DA_T0);
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.delta - alpha);
        self.log_eps = self.mu - self.m.sqrt() / DA_GAMMA * self.h_bar;
        let eta = self.m.powf(-DA_KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
    }
}

// ---------------------------------------------------------------------------
// Shared sampling loop.

struct CurState {
    q: Vec<f64>,
    logp: f64,
    grad: Vec<f64>,
}

struct Transition {
    alpha: f64,
    divergent: bool,
    accepted: bool,
}

pub fn hmc<T: Target + ?Sized>(target: &T, cfg: &HmcConfig, init: &[f64]) -> Result<Chain> {
    run_sampler(target, cfg, init, Method::Hmc)
}

pub fn nuts<T: Target + ?Sized>(target: &T, cfg: &HmcConfig, init: &[f64]) -> Result<Chain> {
    run_sampler(target, cfg, init, Method::Nuts)
}

pub fn run_chain<T: Target + ?Sized>(
    target: &T,
    method: Method,
    cfg: &HmcConfig,
    init: &[f64],
) -> Result<Chain> {
    match method {
        Method::Hmc => hmc(target, cfg, init),
        Method::Nuts => nuts(target, cfg, init),
    }
}

/// Run one chain per initial state, concurrently and independently; chain
/// `i` uses `cfg.seed + i` so results do not depend on scheduling.
pub fn run_chains<T: Target + Sync + ?Sized>(
    target: &T,
    method: Method,
    cfg: &HmcConfig,
    inits: &[Vec<f64>],
) -> Result<Vec<Chain>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = inits
            .iter()
            .enumerate()
            .map(|(i, init)| {
                let mut chain_cfg = cfg.clone();
                chain_cfg.seed = cfg.seed.wrapping_add(i as u64);
                scope.spawn(move || run_chain(target, method, &chain_cfg, init))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .map_err(|_| Error::Optim("sampler thread panicked".into()))?
            })
            .collect()
    })
}

fn run_sampler<T: Target + ?Sized>(
    target: &T,
    cfg: &HmcConfig,
    init: &[f64],
    method: Method,
) -> Result<Chain> {
    cfg.validate()?;
    let dim = init.len();
    if dim == 0 {
        return Err(Error::config("initial state must be non-empty"));
    }
    let (logp, grad) = target.logpost_grad(init)?;
    if !logp.is_finite() {
        return Err(Error::Optim(
            "initial state has non-finite log-posterior".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cur = CurState {
        q: init.to_vec(),
        logp,
        grad,
    };

    let mut minv = vec![1.0; dim];
    let mut da = DualAveraging::new(cfg.step_size, cfg.target_accept);
    let phase1 = cfg.warmup / 2;
    // Welford accumulators over the phase-1 states.
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    let mut count = 0usize;
    let mut trace = Vec::with_capacity(cfg.warmup);

    for it in 0..cfg.warmup {
        if it == phase1 {
            if count >= 2 {
                let denom = (count - 1) as f64;
                for i in 0..dim {
                    minv[i] = (m2[i] / denom).clamp(MASS_FLOOR, MASS_CEIL);
                }
            }
            let anchor = da.averaged();
            let anchor = if anchor.is_finite() && anchor > 0.0 {
                anchor
            } else {
                cfg.step_size
            };
            da = DualAveraging::new(anchor, cfg.target_accept);
        }
        let eps = da.current();
        trace.push(eps);
        let tr = transition(target, method, &mut cur, eps, &minv, cfg, &mut rng)?;
        da.adapt(tr.alpha);
        if it < phase1 {
            count += 1;
            let n = count as f64;
            for i in 0..dim {
                let d = cur.q[i] - mean[i];
                mean[i] += d / n;
                m2[i] += d * (cur.q[i] - mean[i]);
            }
        }
    }

    let eps = da.averaged();
    if !eps.is_finite() || eps <= 0.0 {
        return Err(Error::Optim(
            "step-size adaptation ended at a non-positive step size".into(),
        ));
    }

    let mut states = Vec::with_capacity(cfg.samples);
    let mut logposts = Vec::with_capacity(cfg.samples);
    let mut accepts = Vec::with_capacity(cfg.samples);
    let mut divergences = Vec::with_capacity(cfg.samples);
    let mut alpha_sum = 0.0;
    for _ in 0..cfg.samples {
        let tr = transition(target, method, &mut cur, eps, &minv, cfg, &mut rng)?;
        states.push(cur.q.clone());
        logposts.push(cur.logp);
        accepts.push(tr.accepted);
        divergences.push(tr.divergent);
        alpha_sum += tr.alpha;
    }
    let divergent = divergences.iter().filter(|&&d| d).count();
    let rate = divergent as f64 / cfg.samples as f64;
    let warning = (rate > DIVERGENCE_WARN_FRACTION).then(|| {
        format!(
            "{divergent} of {} post-warmup transitions diverged ({:.0}%); \
             posterior geometry is likely too stiff for the adapted step size",
            cfg.samples,
            100.0 * rate
        )
    });

    Ok(Chain {
        states,
        logposts,
        accepts,
        divergences,
        step_size: eps,
        step_size_trace: trace,
        mass_diag: minv,
        accept_stat: alpha_sum / cfg.samples as f64,
        warning,
    })
}

fn transition<T: Target + ?Sized>(
    target: &T,
    method: Method,
    cur: &mut CurState,
    eps: f64,
    minv: &[f64],
    cfg: &HmcConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Transition> {
    match method {
        Method::Hmc => hmc_transition(target, cur, eps, cfg.leapfrog_steps, minv, rng),
        Method::Nuts => nuts_transition(target, cur, eps, cfg.max_depth, minv, rng),
    }
}

fn hmc_transition<T: Target + ?Sized>(
    target: &T,
    cur: &mut CurState,
    eps: f64,
    steps: usize,
    minv: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Transition> {
    let p = sample_momentum(rng, minv);
    let h0 = -cur.logp + kinetic(&p, minv);
    let start = PhasePoint {
        q: cur.q.clone(),
        p,
        logp: cur.logp,
        grad: cur.grad.clone(),
    };
    let end = leapfrog(target, &start, eps, steps, minv)?;
    let dh = -end.logp + kinetic(&end.p, minv) - h0;
    let divergent = !dh.is_finite() || dh.abs() > DIVERGENCE_ENERGY;
    let alpha = if dh.is_finite() {
        (-dh).exp().min(1.0)
    } else {
        0.0
    };
    let u: f64 = rng.random();
    let accepted = u < alpha && end.logp.is_finite();
    if accepted {
        cur.q = end.q;
        cur.logp = end.logp;
        cur.grad = end.grad;
    }
    Ok(Transition {
        alpha,
        divergent,
        accepted,
    })
}

// ---------------------------------------------------------------------------
// No-U-turn transitions (multinomial variant, multiplicative doubling).

struct Proposal {
    q: Vec<f64>,
    logp: f64,
    grad: Vec<f64>,
}

struct Tree {
    minus: PhasePoint,
    plus: PhasePoint,
    prop: Proposal,
    /// log Σ exp(H0 − H) over the tree's leaves.
    log_w: f64,
    turning: bool,
    divergent: bool,
    alpha: f64,
    leaves: f64,
}

fn logsumexp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// U-turn criterion across the tree span, in the metric induced by the
/// inverse mass: (q⁺ − q⁻)·M⁻¹p turns negative at either end.
fn u_turn(minus: &PhasePoint, plus: &PhasePoint, minv: &[f64]) -> bool {
    let mut s_minus = 0.0;
    let mut s_plus = 0.0;
    for i in 0..minv.len() {
        let dq = plus.q[i] - minus.q[i];
        s_minus += dq * minv[i] * minus.p[i];
        s_plus += dq * minv[i] * plus.p[i];
    }
    s_minus < 0.0 || s_plus < 0.0
}

fn build_tree<T: Target + ?Sized>(
    target: &T,
    from: &PhasePoint,
    depth: u32,
    dir: f64,
    eps: f64,
    minv: &[f64],
    h0: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tree> {
    if depth == 0 {
        let pt = leapfrog(target, from, dir * eps, 1, minv)?;
        let dh = -pt.logp + kinetic(&pt.p, minv) - h0;
        let (log_w, alpha, divergent) = if dh.is_finite() {
            (-dh, (-dh).exp().min(1.0), dh.abs() > DIVERGENCE_ENERGY)
        } else {
            (f64::NEG_INFINITY, 0.0, true)
        };
        let prop = Proposal {
            q: pt.q.clone(),
            logp: pt.logp,
            grad: pt.grad.clone(),
        };
        return Ok(Tree {
            minus: pt.clone(),
            plus: pt,
            prop,
            log_w,
            turning: false,
            divergent,
            alpha,
            leaves: 1.0,
        });
    }

    let t1 = build_tree(target, from, depth - 1, dir, eps, minv, h0, rng)?;
    if t1.divergent || t1.turning {
        return Ok(t1);
    }
    let start2 = if dir > 0.0 {
        t1.plus.clone()
    } else {
        t1.minus.clone()
    };
    let mut t2 = build_tree(target, &start2, depth - 1, dir, eps, minv, h0, rng)?;
    let alpha = t1.alpha + t2.alpha;
    let leaves = t1.leaves + t2.leaves;
    if t2.divergent || t2.turning {
        // Flags bubble up; the caller discards the subtree, so endpoints and
        // proposal do not matter beyond carrying the statistics.
        t2.alpha = alpha;
        t2.leaves = leaves;
        return Ok(t2);
    }
    let log_w = logsumexp(t1.log_w, t2.log_w);
    let take2 = {
        let pr = (t2.log_w - log_w).exp();
        rng.random::<f64>() < pr
    };
    let prop = if take2 { t2.prop } else { t1.prop };
    let (minus, plus) = if dir > 0.0 {
        (t1.minus, t2.plus)
    } else {
        (t2.minus, t1.plus)
    };
    let turning = u_turn(&minus, &plus, minv);
    Ok(Tree {
        minus,
        plus,
        prop,
        log_w,
        turning,
        divergent: false,
        alpha,
        leaves,
    })
}

fn nuts_transition<T: Target + ?Sized>(
    target: &T,
    cur: &mut CurState,
    eps: f64,
    max_depth: usize,
    minv: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Transition> {
    let p0 = sample_momentum(rng, minv);
    let h0 = -cur.logp + kinetic(&p0, minv);
    let init = PhasePoint {
        q: cur.q.clone(),
        p: p0,
        logp: cur.logp,
        grad: cur.grad.clone(),
    };
    let mut minus = init.clone();
    let mut plus = init;
    let mut prop = Proposal {
        q: cur.q.clone(),
        logp: cur.logp,
        grad: cur.grad.clone(),
    };
    // The initial point enters the multinomial draw with weight exp(0).
    let mut log_w = 0.0;
    let mut alpha_sum = 0.0;
    let mut leaves = 0.0;
    let mut divergent = false;

    for depth in 0..max_depth {
        let dir = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let start = if dir > 0.0 { plus.clone() } else { minus.clone() };
        let sub = build_tree(target, &start, depth as u32, dir, eps, minv, h0, rng)?;
        alpha_sum += sub.alpha;
        leaves += sub.leaves;
        if sub.divergent {
            divergent = true;
            break;
        }
        if sub.turning {
            break;
        }
        // Biased progressive sampling: favour the fresh subtree.
        let move_p = (sub.log_w - log_w).exp().min(1.0);
        if rng.random::<f64>() < move_p {
            prop = sub.prop;
        }
        log_w = logsumexp(log_w, sub.log_w);
        if dir > 0.0 {
            plus = sub.plus;
        } else {
            minus = sub.minus;
        }
        if u_turn(&minus, &plus, minv) {
            break;
        }
    }

    let alpha = if leaves > 0.0 { alpha_sum / leaves } else { 0.0 };
    let accepted = prop.q != cur.q;
    cur.q = prop.q;
    cur.logp = prop.logp;
    cur.grad = prop.grad;
    Ok(Transition {
        alpha,
        divergent,
        accepted,
    })
}

// ---------------------------------------------------------------------------
// VAE posterior targets.

/// Catch failures that reject a state rather than abort the run.
macro_rules! soft_reject {
    ($expr:expr, $dim:expr) => {
        match $expr {
            Ok(v) => v,
            Err(Error::SolverDiverged { .. })
            | Err(Error::CholeskyFailed { .. })
            | Err(Error::NonFinite { .. }) => {
                return Ok((f64::NEG_INFINITY, vec![0.0; $dim]))
            }
            Err(e) => return Err(e),
        }
    };
}

/// Collapsed posterior over `[u_norm ‖ z_rec]`: the state vector is exactly
/// the decoder input, with the auxiliary block playing the role of the
/// (normalized) physical parameters.
///
/// log p(state) = −Φ(G(state); y) − ‖state‖²/2 + const.
pub struct CollapsedTarget<'a> {
    model: &'a VaeModel,
    grid: Grid,
    mask: &'a ObservationMask,
    y: Vec<f64>,
    kind: ProblemKind,
}

impl<'a> CollapsedTarget<'a> {
    pub fn new(
        model: &'a VaeModel,
        grid: Grid,
        mask: &'a ObservationMask,
        y: &[f64],
        kind: ProblemKind,
    ) -> Result<Self> {
        if model.n_pixels != grid.num_nodes() {
            return Err(Error::config(format!(
                "decoder emits {} pixels but the grid has {} nodes",
                model.n_pixels,
                grid.num_nodes()
            )));
        }
        if y.len() != mask.sensors().len() {
            return Err(Error::data(format!(
                "observation vector has {} entries for {} sensors",
                y.len(),
                mask.sensors().len()
            )));
        }
        Ok(Self {
            model,
            grid,
            mask,
            y: y.to_vec(),
            kind,
        })
    }

    pub fn dim(&self) -> usize {
        self.model.d_z()
    }

    /// Decode a state into the log-field it parameterizes.
    pub fn decode_field(&self, state: &[f64]) -> Result<Field2D> {
        Field2D::new(self.grid, self.model.decode(state)?)
    }
}

impl Target for CollapsedTarget<'_> {
    fn logpost_grad(&self, state: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d = self.dim();
        if state.len() != d {
            return Err(Error::ShapeMismatch {
                op: "collapsed_logpost",
                lhs: vec![state.len()],
                rhs: vec![d],
            });
        }
        let x = soft_reject!(self.model.decode(state), d);
        let field = Field2D::new(self.grid, x)?;
        let (phi, gfield) = soft_reject!(
            misfit_and_grad(&field, &self.y, self.mask, self.kind),
            d
        );
        let vjp = soft_reject!(self.model.decode_vjp(state, gfield.values()), d);
        let logp = -phi - 0.5 * squared_norm(state);
        let grad = vjp.iter().zip(state).map(|(g, s)| -g - s).collect();
        Ok((logp, grad))
    }
}

/// Soft-conditioning posterior over `[u_norm ‖ z_aux ‖ z_rec]`: the decoder
/// consumes `(z_aux, z_rec)` while `u_norm` is tied to `z_aux` through a
/// Gaussian anchor of width `tau`.
///
/// log p = −Φ(G(z_aux, z_rec); y) − ‖u‖²/2 − ‖z_rec‖²/2
///         − ‖z_aux − u‖²/(2τ²) + const.
pub struct SoftTarget<'a> {
    model: &'a VaeModel,
    grid: Grid,
    mask: &'a ObservationMask,
    y: Vec<f64>,
    kind: ProblemKind,
    tau: f64,
}

impl<'a> SoftTarget<'a> {
    pub fn new(
        model: &'a VaeModel,
        grid: Grid,
        mask: &'a ObservationMask,
        y: &[f64],
        kind: ProblemKind,
        tau: f64,
    ) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::config("soft-conditioning tau must be positive"));
        }
        let base = CollapsedTarget::new(model, grid, mask, y, kind)?;
        Ok(Self {
            model: base.model,
            grid: base.grid,
            mask: base.mask,
            y: base.y,
            kind: base.kind,
            tau,
        })
    }

    pub fn dim(&self) -> usize {
        self.model.cfg.d_aux + self.model.d_z()
    }
}

impl Target for SoftTarget<'_> {
    fn logpost_grad(&self, state: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d_aux = self.model.cfg.d_aux;
        let d_z = self.model.d_z();
        let d = d_aux + d_z;
        if state.len() != d {
            return Err(Error::ShapeMismatch {
                op: "soft_logpost",
                lhs: vec![state.len()],
                rhs: vec![d],
            });
        }
        let (u, z) = state.split_at(d_aux);
        let (z_aux, z_rec) = z.split_at(d_aux);
        let x = soft_reject!(self.model.decode(z), d);
        let field = Field2D::new(self.grid, x)?;
        let (phi, gfield) = soft_reject!(
            misfit_and_grad(&field, &self.y, self.mask, self.kind),
            d
        );
        let vjp = soft_reject!(self.model.decode_vjp(z, gfield.values()), d);

        let t2 = self.tau * self.tau;
        let anchor: f64 = z_aux
            .iter()
            .zip(u)
            .map(|(za, ui)| (za - ui) * (za - ui))
            .sum();
        let logp =
            -phi - 0.5 * squared_norm(u) - 0.5 * squared_norm(z_rec) - 0.5 * anchor / t2;

        let mut grad = vec![0.0; d];
        for i in 0..d_aux {
            let pull = (z_aux[i] - u[i]) / t2;
            grad[i] = -u[i] + pull;
            grad[d_aux + i] = -vjp[i] - pull;
        }
        for i in 0..d_z - d_aux {
            grad[2 * d_aux + i] = -vjp[d_aux + i] - z_rec[i];
        }
        Ok((logp, grad))
    }
}

// ---------------------------------------------------------------------------
// GP posterior targets.

/// Whitened GP-Fixed target over ξ, with the covariance factor built once.
pub fn gp_fixed_target<'a>(
    grid: Grid,
    theta: &SEHyper,
    y: &'a [f64],
    mask: &'a ObservationMask,
    kind: ProblemKind,
) -> Result<impl Fn(&[f64]) -> Result<(f64, Vec<f64>)> + 'a> {
    let fac = GpFactor::new(grid, theta)?;
    Ok(move |state: &[f64]| {
        let xi = WhitenedField::new(grid, state.to_vec())?;
        gp_fixed_logpost_grad_with(&fac, &xi, y, mask, kind)
    })
}

/// GP-Hier target over `[ξ ‖ t]` with logit-reparameterized hyperparameters.
pub fn gp_hier_target<'a>(
    grid: Grid,
    ranges: HyperRanges,
    y: &'a [f64],
    mask: &'a ObservationMask,
    kind: ProblemKind,
) -> impl Fn(&[f64]) -> Result<(f64, Vec<f64>)> + 'a {
    move |state: &[f64]| gp_hier_unconstrained_logpost_grad(state, grid, y, mask, kind, &ranges)
}

pub fn sample_gp_fixed(
    grid: Grid,
    theta: &SEHyper,
    y: &[f64],
    mask: &ObservationMask,
    kind: ProblemKind,
    method: Method,
    cfg: &HmcConfig,
    init: &[f64],
) -> Result<Chain> {
    let target = gp_fixed_target(grid, theta, y, mask, kind)?;
    run_chain(&target, method, cfg, init)
}

pub fn sample_gp_hier(
    grid: Grid,
    ranges: HyperRanges,
    y: &[f64],
    mask: &ObservationMask,
    kind: ProblemKind,
    method: Method,
    cfg: &HmcConfig,
    init: &[f64],
) -> Result<Chain> {
    let target = gp_hier_target(grid, ranges, y, mask, kind);
    run_chain(&target, method, cfg, init)
}

// ---------------------------------------------------------------------------
// MAP estimation.

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    pub steps: usize,
    pub restarts: usize,
    pub lr: f64,
    /// Gradient-norm clipping threshold.
    pub clip: f64,
    pub seed: u64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            restarts: 6,
            lr: 0.01,
            clip: 2.0,
            seed: 0,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.restarts == 0 {
            return Err(Error::config("map steps and restarts must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("map learning rate must be positive"));
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return Err(Error::config("map gradient clip must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MapResult {
    /// Best state across restarts.
    pub state: Vec<f64>,
    pub value: f64,
    /// All surviving restarts, best first; multi-chain runs initialize from
    /// the top entries.
    pub ranked: Vec<(f64, Vec<f64>)>,
}

/// Maximize the log posterior with Adam from `restarts` standard-normal
/// initializations. Each restart keeps the best finite iterate it visits; a
/// restart whose trajectory turns non-finite simply stops early. Errors only
/// when every restart fails to see a finite value.
pub fn map_estimate<T: Target + ?Sized>(
    target: &T,
    dim: usize,
    cfg: &MapConfig,
) -> Result<MapResult> {
    cfg.validate()?;
    if dim == 0 {
        return Err(Error::config("map dimension must be positive"));
    }
    let mut ranked: Vec<(f64, Vec<f64>)> = Vec::new();
    for r in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(r as u64));
        let q0: Vec<f64> = (0..dim).map(|_| randn(&mut rng)).collect();
        let mut theta = Tensor::matrix(1, dim, q0)?;
        let mut opt = Adam::new(&[vec![1, dim]]);
        let mut best: Option<(f64, Vec<f64>)> = None;
        for step in 0..=cfg.steps {
            let (logp, grad) = target.logpost_grad(theta.data())?;
            if logp.is_finite() && best.as_ref().is_none_or(|(b, _)| logp > *b) {
                best = Some((logp, theta.data().to_vec()));
            }
            if step == cfg.steps {
                break;
            }
            if !logp.is_finite() || !grad.iter().all(|g| g.is_finite()) {
                break;
            }
            let gnorm = squared_norm(&grad).sqrt();
            let scale = if gnorm > cfg.clip {
                cfg.clip / gnorm
            } else {
                1.0
            };
            // Adam minimizes, so feed the negated (clipped) ascent direction.
            let descent: Vec<f64> = grad.iter().map(|g| -scale * g).collect();
            let gt = Tensor::matrix(1, dim, descent)?;
            let lr = cosine_lr(step, cfg.steps, cfg.lr, 0.0);
            opt.step(&mut [&mut theta], &[gt], lr);
            if !theta.all_finite() {
                break;
            }
        }
        if let Some(b) = best {
            ranked.push(b);
        }
    }
    if ranked.is_empty() {
        return Err(Error::Optim(
            "every optimizer restart ended at a non-finite log-posterior".into(),
        ));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(MapResult {
        state: ranked[0].1.clone(),
        value: ranked[0].0,
        ranked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(state: &[f64]) -> Result<(f64, Vec<f64>)> {
        let logp = -0.5 * squared_norm(state);
        Ok((logp, state.iter().map(|x| -x).collect()))
    }

    #[test]
    fn config_validation_rejects_degenerate_settings() {
        assert!(HmcConfig::hmc(10, 0.1).validate().is_ok());
        assert!(HmcConfig::hmc(0, 0.1).validate().is_err());
        assert!(HmcConfig::hmc(10, 0.0).validate().is_err());
        assert!(HmcConfig {
            warmup: 1,
            ..HmcConfig::default()
        }
        .validate()
        .is_err());
        assert!(HmcConfig {
            target_accept: 1.0,
            ..HmcConfig::default()
        }
        .validate()
        .is_err());
        assert!(MapConfig {
            lr: -1.0,
            ..MapConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn dual_averaging_tracks_the_acceptance_signal() {
        let mut high = DualAveraging::new(0.1, 0.75);
        let mut low = DualAveraging::new(0.1, 0.75);
        for _ in 0..50 {
            high.adapt(1.0);
            low.adapt(0.0);
        }
        assert!(high.current() > 0.1, "persistent acceptance should grow eps");
        assert!(low.current() < 0.1, "persistent rejection should shrink eps");
        assert!(high.averaged() > low.averaged());
    }

    #[test]
    fn zero_step_leapfrog_is_the_identity() {
        let start = PhasePoint::from_state(&gaussian, vec![0.3, -1.2], vec![0.5, 0.25]).unwrap();
        let out = leapfrog(&gaussian, &start, 0.1, 0, &[1.0, 1.0]).unwrap();
        assert_eq!(out, start);
    }

    #[test]
    fn logsumexp_handles_degenerate_weights() {
        assert_eq!(logsumexp(f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
        assert!((logsumexp(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let big = logsumexp(800.0, 800.0);
        assert!((big - (800.0 + std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn sampler_rejects_non_finite_start() {
        let cfg = HmcConfig::hmc(5, 0.1);
        let err = hmc(&gaussian, &cfg, &[f64::INFINITY, 0.0]);
        assert!(err.is_err());
    }
}
