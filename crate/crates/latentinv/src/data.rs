//! Training-corpus generation for the two inverse problems, plus the
//! standardization of the auxiliary labels.
//!
//! Each sample is generated from its own RNG stream derived from (corpus
//! seed, sample index), so corpora are bit-reproducible regardless of how
//! generation is scheduled, and any prefix of a corpus equals the
//! corresponding samples of a longer one.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gp::{sample_field, SEHyper, WhitenedField};
use crate::pde::{Field2D, Grid, ProblemKind};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Number of auxiliary parameters; both problems use four.
pub const AUX_DIM: usize = 4;

/// Sampling ranges for the conductivity corpus: (μ, σ, ℓ_x, ℓ_y).
pub const CONDUCTIVITY_RANGES: [(f64, f64); AUX_DIM] =
    [(-0.5, 0.5), (0.2, 0.7), (0.05, 0.35), (0.05, 0.35)];

/// Sampling ranges for the source corpus: (A, c_x, c_y, w).
pub const SOURCE_RANGES: [(f64, f64); AUX_DIM] =
    [(20.0, 80.0), (0.2, 0.8), (0.2, 0.8), (0.04, 0.12)];

/// Additive background before taking logs of the source field, so log b is
/// finite far from every bump.
pub const SOURCE_FLOOR: f64 = 0.05;

/// Per-coordinate affine standardization fitted on a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormMeta {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormMeta {
    pub fn normalize(&self, u_phys: &[f64]) -> Vec<f64> {
        u_phys
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(u, (m, s))| (u - m) / s)
            .collect()
    }

    pub fn denormalize(&self, u_norm: &[f64]) -> Vec<f64> {
        u_norm
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(u, (m, s))| u * s + m)
            .collect()
    }
}

/// Auxiliary label of one sample in both representations.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxParams {
    pub u_phys: Vec<f64>,
    pub u_norm: Vec<f64>,
}

/// One training sample: a log-field and its generating parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub field: Field2D,
    pub u_phys: Vec<f64>,
}

/// A generated corpus. `norm_meta` is empty until [`standardize`] runs;
/// normalized labels are always derived from the stored physical ones so the
/// two can never drift apart.
#[derive(Debug, Clone)]
pub struct Dataset {
    kind: ProblemKind,
    seed: u64,
    grid: Grid,
    samples: Vec<Sample>,
    norm_meta: Option<NormMeta>,
}

impl Dataset {
    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn norm_meta(&self) -> Option<&NormMeta> {
        self.norm_meta.as_ref()
    }

    /// Reassembles a dataset from its parts (deserialization path).
    pub fn from_parts(
        kind: ProblemKind,
        seed: u64,
        grid: Grid,
        samples: Vec<Sample>,
        norm_meta: Option<NormMeta>,
    ) -> Result<Self> {
        for s in &samples {
            if s.field.grid() != grid {
                return Err(Error::data("sample grid differs from dataset grid"));
            }
            if s.u_phys.len() != AUX_DIM {
                return Err(Error::data("auxiliary label has wrong dimension"));
            }
        }
        Ok(Dataset {
            kind,
            seed,
            grid,
            samples,
            norm_meta,
        })
    }

    pub fn aux(&self, i: usize) -> Result<AuxParams> {
        let meta = self.norm_meta.as_ref().ok_or_else(|| {
            Error::data("dataset is not standardized; run standardize() first")
        })?;
        let u_phys = self.samples[i].u_phys.clone();
        let u_norm = meta.normalize(&u_phys);
        Ok(AuxParams { u_phys, u_norm })
    }

    /// All fields stacked as an [N, n²] matrix.
    pub fn x_matrix(&self) -> Tensor {
        let nn = self.grid.num_nodes();
        let mut data = Vec::with_capacity(self.samples.len() * nn);
        for s in &self.samples {
            data.extend_from_slice(s.field.values());
        }
        Tensor::matrix(self.samples.len(), nn, data).expect("sample lengths validated")
    }

    /// Normalized labels stacked as an [N, 4] matrix.
    pub fn u_matrix_norm(&self) -> Result<Tensor> {
        let meta = self.norm_meta.as_ref().ok_or_else(|| {
            Error::data("dataset is not standardized; run standardize() first")
        })?;
        let mut data = Vec::with_capacity(self.samples.len() * AUX_DIM);
        for s in &self.samples {
            data.extend(meta.normalize(&s.u_phys));
        }
        Tensor::matrix(self.samples.len(), AUX_DIM, data)
    }

    /// Deterministic 95/5 split by index: the first ⌈0.95·N⌉ samples train,
    /// the tail validates.
    pub fn train_val_split(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let n = self.samples.len();
        let cut = (n * 95).div_ceil(100);
        (0..cut, cut..n)
    }
}

/// Derives an independent per-sample seed from the corpus seed and index
/// (splitmix64 finalizer over a golden-ratio stride).
fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add((index.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw_in(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    rng.random_range(range.0..range.1)
}

/// Conductivity corpus: u = (μ, σ, ℓ_x, ℓ_y) uniform on the training ranges,
/// x = log κ drawn from the anisotropic SE GP at those hyperparameters.
pub fn gen_conductivity(grid: Grid, n_samples: usize, seed: u64) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, i as u64));
        let u: Vec<f64> = CONDUCTIVITY_RANGES
            .iter()
            .map(|&r| draw_in(&mut rng, r))
            .collect();
        let theta = SEHyper::new(u[0], u[1], u[2], u[3])?;
        let xi = WhitenedField::standard_normal(grid, &mut rng);
        samples.push(Sample {
            field: sample_field(&theta, &xi)?,
            u_phys: u,
        });
    }
    Ok(Dataset {
        kind: ProblemKind::Conductivity,
        seed,
        grid,
        samples,
        norm_meta: None,
    })
}

/// An isotropic Gaussian bump A·exp(−‖s−c‖²/(2w²)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub amp: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
}

impl Bump {
    pub fn value(&self, x: f64, y: f64) -> f64 {
        let r2 = (x - self.cx) * (x - self.cx) + (y - self.cy) * (y - self.cy);
        self.amp * (-r2 / (2.0 * self.width * self.width)).exp()
    }
}

/// log(Σ bumps + floor) sampled on the grid.
pub fn source_log_field(grid: Grid, bumps: &[Bump]) -> Field2D {
    let mut values = Vec::with_capacity(grid.num_nodes());
    for node in 0..grid.num_nodes() {
        let (x, y) = grid.node_coords(node);
        let b: f64 = bumps.iter().map(|bp| bp.value(x, y)).sum();
        values.push((b + SOURCE_FLOOR).ln());
    }
    Field2D::new(grid, values).expect("length matches grid by construction")
}

/// Source corpus: one dominant bump with u = (A, c_x, c_y, w) uniform on the
/// training ranges, plus 1–3 small residual bumps that the auxiliary label
/// does not describe; x = log(b + floor).
pub fn gen_source(grid: Grid, n_samples: usize, seed: u64) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, i as u64));
        let u: Vec<f64> = SOURCE_RANGES
            .iter()
            .map(|&r| draw_in(&mut rng, r))
            .collect();
        let mut bumps = vec![Bump {
            amp: u[0],
            cx: u[1],
            cy: u[2],
            width: u[3],
        }];
        let n_residual = rng.random_range(1..=3usize);
        for _ in 0..n_residual {
            let amp = draw_in(&mut rng, (0.02, 0.10)) * u[0];
            let width = draw_in(&mut rng, (0.03, 0.06));
            let cx = draw_in(&mut rng, (0.1, 0.9));
            let cy = draw_in(&mut rng, (0.1, 0.9));
            bumps.push(Bump {
                amp,
                cx,
                cy,
                width,
            });
        }
        samples.push(Sample {
            field: source_log_field(grid, &bumps),
            u_phys: u,
        });
    }
    Ok(Dataset {
        kind: ProblemKind::Source,
        seed,
        grid,
        samples,
        norm_meta: None,
    })
}

pub fn generate(grid: Grid, kind: ProblemKind, n_samples: usize, seed: u64) -> Result<Dataset> {
    match kind {
        ProblemKind::Conductivity => gen_conductivity(grid, n_samples, seed),
        ProblemKind::Source => gen_source(grid, n_samples, seed),
    }
}

/// Fits per-coordinate mean and (population) std of the labels and stores
/// them on the dataset. A zero-variance coordinate cannot be standardized
/// and is an error.
pub fn standardize(mut dataset: Dataset) -> Result<Dataset> {
    let n = dataset.samples.len();
    if n == 0 {
        return Err(Error::data("cannot standardize an empty dataset"));
    }
    let mut mean = vec![0.0; AUX_DIM];
    for s in &dataset.samples {
        for (m, u) in mean.iter_mut().zip(&s.u_phys) {
            *m += u;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0; AUX_DIM];
    for s in &dataset.samples {
        for (v, (u, m)) in var.iter_mut().zip(s.u_phys.iter().zip(&mean)) {
            *v += (u - m) * (u - m);
        }
    }
    let mut std = vec![0.0; AUX_DIM];
    for (j, v) in var.iter().enumerate() {
        let s = (v / n as f64).sqrt();
        // constant up to accumulation noise counts as zero variance
        let floor = 1e-12 * mean[j].abs().max(1.0);
        if s <= floor || !s.is_finite() {
            return Err(Error::data(format!(
                "auxiliary coordinate {j} has zero variance; cannot standardize"
            )));
        }
        std[j] = s;
    }
    dataset.norm_meta = Some(NormMeta { mean, std });
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_seeds_are_spread() {
        let a = sample_seed(7, 0);
        let b = sample_seed(7, 1);
        let c = sample_seed(8, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn split_is_95_5() {
        let grid = Grid::new(6).unwrap();
        let ds = gen_conductivity(grid, 100, 1).unwrap();
        let (tr, va) = ds.train_val_split();
        assert_eq!(tr, 0..95);
        assert_eq!(va, 95..100);
    }

    #[test]
    fn bump_closed_form() {
        let b = Bump {
            amp: 50.0,
            cx: 0.45,
            cy: 0.55,
            width: 0.08,
        };
        assert_eq!(b.value(0.45, 0.55), 50.0);
        let at_w = b.value(0.45 + 0.08, 0.55);
        assert!((at_w - 50.0 * (-0.5_f64).exp()).abs() < 1e-12);
    }
}
