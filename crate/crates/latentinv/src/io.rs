//! On-disk artifact formats.
//!
//! Three containers cover everything the pipeline writes:
//!
//! - **Checkpoint**: a flat named-tensor container for network weights. The
//!   file starts with a little-endian `u32` header length, then that many
//!   bytes of JSON (format tag, tensor directory, free-form metadata), then
//!   one contiguous little-endian f64 payload.
//! - **Dataset**: a JSON manifest (kind, seed, grid, count, normalization)
//!   next to a binary blob holding all fields row-major followed by all
//!   physical labels.
//! - **Chain**: a JSON sidecar with adaptation bookkeeping next to a binary
//!   blob of post-warmup states followed by their log-posteriors.
//!
//! Smaller records (observations, diagnostics, configs) are plain JSON via
//! [`save_json`] / [`load_json`]. Nothing here writes timestamps, so a rerun
//! with the same inputs is byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NormMeta, Sample};
use crate::model::{Mlp, VaeConfig, VaeModel};
use crate::pde::{Field2D, Grid, ObservationMask, ProblemKind};
use crate::tensor::Tensor;
use crate::{infer::Chain, Error, Result};

const CHECKPOINT_FORMAT: &str = "latentinv-checkpoint";
const DATASET_FORMAT: &str = "latentinv-dataset";
const CHAIN_FORMAT: &str = "latentinv-chain";
const VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Raw helpers.

fn write_f64s(w: &mut impl Write, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks_exact")))
        .collect())
}

/// Serialize any value as pretty JSON (trailing newline, no timestamps).
pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

// ---------------------------------------------------------------------------
// Checkpoints.

/// One tensor in a checkpoint container.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 units.
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    tensors: Vec<TensorInfo>,
    meta: serde_json::Value,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    tensors: &[NamedTensor],
    meta: &serde_json::Value,
) -> Result<()> {
    let mut infos = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for t in tensors {
        let len: usize = t.shape.iter().product();
        if len != t.data.len() {
            return Err(Error::data(format!(
                "tensor '{}' declares shape {:?} but holds {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        infos.push(TensorInfo {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
            len,
        });
        offset += len;
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        version: VERSION,
        tensors: infos,
        meta: meta.clone(),
    })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for t in tensors {
        write_f64s(&mut w, &t.data)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Vec<NamedTensor>, serde_json::Value)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len4) as usize];
    r.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    if header.format != CHECKPOINT_FORMAT || header.version != VERSION {
        return Err(Error::data(format!(
            "not a version-{VERSION} checkpoint: {}/{}",
            header.format, header.version
        )));
    }
    // The directory is written in payload order, so offsets are redundant but
    // validated to catch truncation or reordering.
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut cursor = 0usize;
    for info in &header.tensors {
        if info.offset != cursor || info.shape.iter().product::<usize>() != info.len {
            return Err(Error::data(format!(
                "checkpoint directory inconsistent at tensor '{}'",
                info.name
            )));
        }
        tensors.push(NamedTensor {
            name: info.name.clone(),
            shape: info.shape.clone(),
            data: read_f64s(&mut r, info.len)?,
        });
        cursor += info.len;
    }
    Ok((tensors, header.meta))
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    cfg: VaeConfig,
    n_pixels: usize,
}

fn mlp_tensors(prefix: &str, mlp: &Mlp, out: &mut Vec<NamedTensor>) {
    for (k, (w, b)) in mlp.layers().iter().enumerate() {
        out.push(NamedTensor {
            name: format!("{prefix}.w{k}"),
            shape: w.shape().to_vec(),
            data: w.data().to_vec(),
        });
        out.push(NamedTensor {
            name: format!("{prefix}.b{k}"),
            shape: b.shape().to_vec(),
            data: b.data().to_vec(),
        });
    }
}

fn mlp_from_tensors(prefix: &str, n_layers: usize, pool: &[NamedTensor]) -> Result<Mlp> {
    let find = |name: &str| -> Result<&NamedTensor> {
        pool.iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::data(format!("checkpoint is missing tensor '{name}'")))
    };
    let mut layers = Vec::with_capacity(n_layers);
    for k in 0..n_layers {
        let w = find(&format!("{prefix}.w{k}"))?;
        let b = find(&format!("{prefix}.b{k}"))?;
        if w.shape.len() != 2 || b.shape.len() != 2 {
            return Err(Error::data(format!("layer {k} of '{prefix}' is not a matrix pair")));
        }
        layers.push((
            Tensor::matrix(w.shape[0], w.shape[1], w.data.clone())?,
            Tensor::matrix(b.shape[0], b.shape[1], b.data.clone())?,
        ));
    }
    Mlp::from_layers(layers)
}

/// Write a trained model as a checkpoint: every encoder/decoder layer as a
/// named tensor, the config and field size in the metadata block.
pub fn save_model(path: impl AsRef<Path>, model: &VaeModel) -> Result<()> {
    let mut tensors = Vec::new();
    mlp_tensors("enc", &model.enc, &mut tensors);
    mlp_tensors("dec", &model.dec, &mut tensors);
    let meta = serde_json::to_value(ModelMeta {
        cfg: model.cfg.clone(),
        n_pixels: model.n_pixels,
    })?;
    save_checkpoint(path, &tensors, &meta)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<VaeModel> {
    let (tensors, meta) = load_checkpoint(path)?;
    let meta: ModelMeta = serde_json::from_value(meta)?;
    let enc = mlp_from_tensors("enc", meta.cfg.enc_hidden.len() + 1, &tensors)?;
    let dec = mlp_from_tensors("dec", meta.cfg.dec_hidden.len() + 1, &tensors)?;
    if enc.input_dim() != meta.n_pixels + 2
        || enc.output_dim() != 2 * meta.cfg.d_z()
        || dec.input_dim() != meta.cfg.d_z()
        || dec.output_dim() != meta.n_pixels
    {
        return Err(Error::data("checkpoint layer shapes disagree with its config"));
    }
    Ok(VaeModel {
        cfg: meta.cfg,
        n_pixels: meta.n_pixels,
        enc,
        dec,
    })
}

// ---------------------------------------------------------------------------
// Datasets.

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    version: u32,
    kind: ProblemKind,
    seed: u64,
    grid_n: usize,
    count: usize,
    norm_meta: Option<NormMeta>,
    /// Binary blob next to the manifest: `count·n²` field values row-major,
    /// then `count·4` physical labels, all little-endian f64.
    data_file: String,
}

fn sibling(path: &Path, name: &str) -> std::path::PathBuf {
    path.parent().unwrap_or_else(|| Path::new(".")).join(name)
}

fn bin_name(manifest_path: &Path) -> Result<String> {
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::data("dataset manifest path has no usable file name"))?;
    Ok(format!("{stem}.bin"))
}

pub fn save_dataset(manifest_path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let data_file = bin_name(manifest_path)?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.to_string(),
        version: VERSION,
        kind: ds.kind(),
        seed: ds.seed(),
        grid_n: ds.grid().n(),
        count: ds.len(),
        norm_meta: ds.norm_meta().cloned(),
        data_file: data_file.clone(),
    };
    save_json(manifest_path, &manifest)?;
    let mut w = BufWriter::new(File::create(sibling(manifest_path, &data_file))?);
    for s in ds.samples() {
        write_f64s(&mut w, s.field.values())?;
    }
    for s in ds.samples() {
        write_f64s(&mut w, &s.u_phys)?;
    }
    Ok(())
}

pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let m: DatasetManifest = load_json(manifest_path)?;
    if m.format != DATASET_FORMAT || m.version != VERSION {
        return Err(Error::data(format!(
            "not a version-{VERSION} dataset manifest: {}/{}",
            m.format, m.version
        )));
    }
    let grid = Grid::new(m.grid_n)?;
    let nn = grid.num_nodes();
    let mut r = BufReader::new(File::open(sibling(manifest_path, &m.data_file))?);
    let mut fields = Vec::with_capacity(m.count);
    for _ in 0..m.count {
        fields.push(read_f64s(&mut r, nn)?);
    }
    let mut samples = Vec::with_capacity(m.count);
    for values in fields {
        let u_phys = read_f64s(&mut r, 4)?;
        samples.push(Sample {
            field: Field2D::new(grid, values)?,
            u_phys,
        });
    }
    Dataset::from_parts(m.kind, m.seed, grid, samples, m.norm_meta)
}

// ---------------------------------------------------------------------------
// Observations.

/// Everything needed to reproduce an inversion: the sensor layout, the noisy
/// data, and the ground truth it was synthesized from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationRecord {
    pub kind: ProblemKind,
    pub grid_n: usize,
    pub sensors: Vec<usize>,
    pub sigma: f64,
    pub y: Vec<f64>,
    /// Physical hyperparameters behind the true field.
    pub truth_params: Vec<f64>,
    /// True log-field on the full grid.
    pub truth_field: Vec<f64>,
    pub seed: u64,
}

impl ObservationRecord {
    pub fn mask(&self) -> Result<ObservationMask> {
        ObservationMask::new(Grid::new(self.grid_n)?, self.sensors.clone(), self.sigma)
    }
}

// ---------------------------------------------------------------------------
// Chains.

#[derive(Serialize, Deserialize)]
struct ChainSidecar {
    format: String,
    version: u32,
    dim: usize,
    n_samples: usize,
    step_size: f64,
    accept_stat: f64,
    mass_diag: Vec<f64>,
    step_size_trace: Vec<f64>,
    accepts: Vec<bool>,
    divergences: Vec<bool>,
    warning: Option<String>,
    /// Binary blob next to the sidecar: `n_samples·dim` state values
    /// row-major, then `n_samples` log-posteriors, little-endian f64.
    data_file: String,
}

/// Write a chain as `<base>.json` + `<base>.bin`.
pub fn save_chain(base: impl AsRef<Path>, chain: &Chain) -> Result<()> {
    let base = base.as_ref();
    let json_path = base.with_extension("json");
    let bin_path = base.with_extension("bin");
    let dim = chain.dim();
    let sidecar = ChainSidecar {
        format: CHAIN_FORMAT.to_string(),
        version: VERSION,
        dim,
        n_samples: chain.states.len(),
        step_size: chain.step_size,
        accept_stat: chain.accept_stat,
        mass_diag: chain.mass_diag.clone(),
        step_size_trace: chain.step_size_trace.clone(),
        accepts: chain.accepts.clone(),
        divergences: chain.divergences.clone(),
        warning: chain.warning.clone(),
        data_file: bin_name(&bin_path)?,
    };
    save_json(&json_path, &sidecar)?;
    let mut w = BufWriter::new(File::create(&bin_path)?);
    for s in &chain.states {
        write_f64s(&mut w, s)?;
    }
    write_f64s(&mut w, &chain.logposts)?;
    Ok(())
}

pub fn load_chain(base: impl AsRef<Path>) -> Result<Chain> {
    let base = base.as_ref();
    let s: ChainSidecar = load_json(base.with_extension("json"))?;
    if s.format != CHAIN_FORMAT || s.version != VERSION {
        return Err(Error::data(format!(
            "not a version-{VERSION} chain sidecar: {}/{}",
            s.format, s.version
        )));
    }
    let mut r = BufReader::new(File::open(sibling(base, &s.data_file))?);
    let mut states = Vec::with_capacity(s.n_samples);
    for _ in 0..s.n_samples {
        states.push(read_f64s(&mut r, s.dim)?);
    }
    let logposts = read_f64s(&mut r, s.n_samples)?;
    Ok(Chain {
        states,
        logposts,
        accepts: s.accepts,
        divergences: s.divergences,
        step_size: s.step_size,
        step_size_trace: s.step_size_trace,
        mass_diag: s.mass_diag,
        accept_stat: s.accept_stat,
        warning: s.warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_conductivity;

    fn tmp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("latentinv-io-{}-{name}", std::process::id()))
    }

    #[test]
    fn checkpoints_round_trip_bitwise() {
        let tensors = vec![
            NamedTensor {
                name: "a.w0".into(),
                shape: vec![2, 3],
                data: vec![1.0, -0.5, 3e-17, f64::MIN_POSITIVE, 2.25, 1e300],
            },
            NamedTensor {
                name: "a.b0".into(),
                shape: vec![1, 3],
                data: vec![0.0, -0.0, 0.1],
            },
        ];
        let meta = serde_json::json!({"note": 7});
        let path = tmp("ckpt");
        save_checkpoint(&path, &tensors, &meta).unwrap();
        let (back, meta_back) = load_checkpoint(&path).unwrap();
        std::fs::remove_file(&path).unwrap();
        assert_eq!(back, tensors);
        assert_eq!(meta_back, meta);
        // -0.0 must survive as a distinct bit pattern.
        assert!(back[1].data[1].to_bits() == (-0.0f64).to_bits());
    }

    #[test]
    fn mismatched_shapes_are_rejected_on_save() {
        let bad = vec![NamedTensor {
            name: "x".into(),
            shape: vec![2, 2],
            data: vec![1.0; 3],
        }];
        assert!(save_checkpoint(tmp("bad"), &bad, &serde_json::Value::Null).is_err());
    }

    #[test]
    fn models_survive_a_save_load_cycle() {
        let cfg = VaeConfig {
            d_aux: 4,
            d_rec: 4,
            enc_hidden: vec![8],
            dec_hidden: vec![8],
            seed: 3,
            ..VaeConfig::default()
        };
        let model = VaeModel::new(cfg, 16).unwrap();
        let path = tmp("model");
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        std::fs::remove_file(&path).unwrap();
        assert_eq!(back.cfg, model.cfg);
        assert_eq!(back.n_pixels, model.n_pixels);
        let z = vec![0.3, -0.2, 0.1, 0.0, 0.5, -0.7, 0.2, 0.9];
        assert_eq!(back.decode(&z).unwrap(), model.decode(&z).unwrap());
        let x = vec![0.25; 16];
        let e0 = model.encode(&x).unwrap();
        let e1 = back.encode(&x).unwrap();
        assert_eq!(e0.mu, e1.mu);
        assert_eq!(e0.logvar, e1.logvar);
    }

    #[test]
    fn datasets_round_trip_with_their_normalization() {
        let grid = Grid::new(8).unwrap();
        let ds = gen_conductivity(grid, 5, 99).unwrap();
        let ds = crate::data::standardize(ds).unwrap();
        let path = tmp("dataset.json");
        save_dataset(&path, &ds).unwrap();
        let back = load_dataset(&path).unwrap();
        std::fs::remove_file(&path).unwrap();
        std::fs::remove_file(sibling(&path, &bin_name(&path).unwrap())).unwrap();
        assert_eq!(back.kind(), ds.kind());
        assert_eq!(back.seed(), ds.seed());
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.samples(), ds.samples());
        assert_eq!(
            back.norm_meta().unwrap().mean,
            ds.norm_meta().unwrap().mean
        );
    }

    #[test]
    fn chains_round_trip_bitwise() {
        let chain = Chain {
            states: vec![vec![0.1, -0.2, 0.3], vec![1.0, 2.0, -3.5]],
            logposts: vec![-1.25, -0.75],
            accepts: vec![true, false],
            divergences: vec![false, true],
            step_size: 0.0625,
            step_size_trace: vec![0.1, 0.08, 0.0625],
            mass_diag: vec![1.0, 0.5, 2.0],
            accept_stat: 0.8125,
            warning: Some("post-warmup divergence rate 0.50".into()),
        };
        let base = tmp("chain");
        save_chain(&base, &chain).unwrap();
        let back = load_chain(&base).unwrap();
        std::fs::remove_file(base.with_extension("json")).unwrap();
        std::fs::remove_file(base.with_extension("bin")).unwrap();
        assert_eq!(back.states, chain.states);
        assert_eq!(back.logposts, chain.logposts);
        assert_eq!(back.accepts, chain.accepts);
        assert_eq!(back.divergences, chain.divergences);
        assert_eq!(back.step_size, chain.step_size);
        assert_eq!(back.mass_diag, chain.mass_diag);
        assert_eq!(back.warning, chain.warning);
    }

    #[test]
    fn observation_records_rebuild_their_mask() {
        let grid = Grid::new(7).unwrap();
        let rec = ObservationRecord {
            kind: ProblemKind::Source,
            grid_n: 7,
            sensors: vec![grid.node(2, 2), grid.node(4, 3)],
            sigma: 0.01,
            y: vec![0.5, -0.25],
            truth_params: vec![50.0, 0.45, 0.55, 0.08],
            truth_field: vec![0.0; grid.num_nodes()],
            seed: 5,
        };
        let path = tmp("obs.json");
        save_json(&path, &rec).unwrap();
        let back: ObservationRecord = load_json(&path).unwrap();
        std::fs::remove_file(&path).unwrap();
        assert_eq!(back.sensors, rec.sensors);
        let mask = back.mask().unwrap();
        assert_eq!(mask.sensors(), &rec.sensors[..]);
        assert_eq!(mask.sigma(), rec.sigma);
    }
}
