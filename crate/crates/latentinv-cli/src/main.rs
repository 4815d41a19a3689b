// temporary scratch probe; replaced by the real CLI
use latentinv::data::{source_log_field, Bump};
use latentinv::gp::{GpFactor, HyperRanges, SEHyper, WhitenedField};
use latentinv::infer::{gp_fixed_target, gp_hier_target, CollapsedTarget, Target};
use latentinv::model::{VaeConfig, VaeModel};
use latentinv::pde::{forward, misfit_and_grad, Grid, ObservationMask, ProblemKind};
use std::time::Instant;

/// Deterministic pseudo-noise; timing only cares about shapes.
fn wiggle(n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|i| scale * ((i as f64) * 0.7371).sin()).collect()
}

fn main() -> anyhow::Result<()> {
    let grid = Grid::new(28)?;
    let n = grid.n();
    let sensors_every = |step: usize, m: usize| -> Vec<usize> {
        let mut out = Vec::new();
        let mut k = 0;
        'outer: for iy in 1..n - 1 {
            for ix in 1..n - 1 {
                if k % step == 0 {
                    out.push(iy * n + ix);
                    if out.len() == m {
                        break 'outer;
                    }
                }
                k += 1;
            }
        }
        out
    };

    let theta = SEHyper::new(0.30, 0.40, 0.20, 0.15)?;
    let fac = GpFactor::new(grid, &theta)?;
    let xi = WhitenedField::new(grid, wiggle(grid.num_nodes(), 1.0))?;
    let truth = fac.field(&xi)?;
    let mask = ObservationMask::new(grid, sensors_every(19, 34), 0.50)?;
    let sol = forward(&truth, ProblemKind::Conductivity)?;
    let y: Vec<f64> = mask
        .observe(&sol)
        .iter()
        .zip(wiggle(34, 0.5))
        .map(|(v, e)| v + e)
        .collect();

    let reps = 200;
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = misfit_and_grad(&truth, &y, &mask, ProblemKind::Conductivity)?;
    }
    println!("cond misfit_and_grad: {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let bump = Bump { amp: 50.0, cx: 0.45, cy: 0.55, width: 0.08 };
    let truth_s = source_log_field(grid, &[bump]);
    let mask_s = ObservationMask::new(grid, sensors_every(3, 202), 0.01)?;
    let sol_s = forward(&truth_s, ProblemKind::Source)?;
    let ys: Vec<f64> = mask_s
        .observe(&sol_s)
        .iter()
        .zip(wiggle(202, 0.01))
        .map(|(v, e)| v + e)
        .collect();
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = misfit_and_grad(&truth_s, &ys, &mask_s, ProblemKind::Source)?;
    }
    println!("source misfit_and_grad: {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let model = VaeModel::new(VaeConfig::conductivity(), grid.num_nodes())?;
    let target = CollapsedTarget::new(&model, grid, &mask, &y, ProblemKind::Conductivity)?;
    let state = wiggle(model.d_z(), 0.3);
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = target.logpost_grad(&state)?;
    }
    println!("collapsed logpost_grad (d=52): {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let model_s = VaeModel::new(VaeConfig::source(), grid.num_nodes())?;
    let target_s = CollapsedTarget::new(&model_s, grid, &mask_s, &ys, ProblemKind::Source)?;
    let state_s = wiggle(model_s.d_z(), 0.3);
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = target_s.logpost_grad(&state_s)?;
    }
    println!("collapsed logpost_grad (d=20, source): {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let gp_target = gp_fixed_target(grid, &theta, &y, &mask, ProblemKind::Conductivity)?;
    let xi_state = wiggle(grid.num_nodes(), 1.0);
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = gp_target.logpost_grad(&xi_state)?;
    }
    println!("gp-fixed logpost_grad (d=784): {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let hier = gp_hier_target(grid, HyperRanges::training_default(), &y, &mask, ProblemKind::Conductivity);
    let mut hier_state = xi_state.clone();
    hier_state.extend_from_slice(&[0.1, -0.2, 0.3, 0.0]);
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = hier.logpost_grad(&hier_state)?;
    }
    println!("gp-hier logpost_grad (d=788): {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    Ok(())
}
