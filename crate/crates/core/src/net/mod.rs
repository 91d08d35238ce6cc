//! Dense U-Net with a dose decoder and an input-reconstruction decoder that
//! share one encoder.
//!
//! Each resolution level concatenates the outputs of its convolutions
//! (dense connectivity within the level only). The encoder downsamples with
//! stride-2 convolutions; both decoders upsample with nearest-neighbour
//! interpolation followed by a 3×3 convolution and receive the encoder output
//! of the matching level as a skip connection. The training loss is the sum of
//! the dose MSE and the reconstruction MSE.

mod model;
pub mod ops;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::{Patch, Volume};
use crate::tensor_io::{TensorFile, TensorIoError};
use model::{Arch, Cache, Dropout};
pub use ops::Real;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("patch has no dose label")]
    MissingLabel,
    #[error("non-finite network output")]
    NonFinite,
    #[error("empty batch")]
    EmptyBatch,
    #[error("bad parameter store {path}: {reason}")]
    Store { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] TensorIoError),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Resolution levels; the encoder downsamples `levels - 1` times.
    pub levels: usize,
    pub base_channels: usize,
    /// Channels added by each dense convolution.
    pub growth: usize,
    pub convs_per_block: usize,
    /// CT + two prescription maps + one channel per OAR.
    pub in_channels: usize,
    pub dropout_p: f64,
    pub kernel: usize,
    pub recon_branch: bool,
    /// Spatial rank of the inputs (2 or 3).
    pub ndim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 16,
            growth: 8,
            convs_per_block: 2,
            in_channels: 6,
            dropout_p: 0.0,
            kernel: 3,
            recon_branch: true,
            ndim: 2,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetError::InvalidConfig(m));
        if self.levels < 2 {
            return bad(format!("levels must be >= 2, got {}", self.levels));
        }
        if self.base_channels < 4 {
            return bad(format!("base_channels must be >= 4, got {}", self.base_channels));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        if self.growth == 0 || self.in_channels == 0 {
            return bad("growth and in_channels must be positive".into());
        }
        if self.kernel != 3 {
            return bad(format!("kernel must be 3, got {}", self.kernel));
        }
        if !(2..=3).contains(&self.ndim) {
            return bad(format!("ndim must be 2 or 3, got {}", self.ndim));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring `dropout_p` (an
    /// inference-time setting that does not change the parameter layout).
    pub fn layout_hash(&self) -> String {
        let canon = NetConfig {
            dropout_p: 0.0,
            ..self.clone()
        };
        let json = serde_json::to_vec(&canon).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Spatial sizes must be divisible by this on every axis.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// Named parameter tensors of one network, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub config: NetConfig,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub tensors: Vec<Vec<f32>>,
}

impl Params {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    /// Parameter count of the tensors whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.tensors[i].as_slice())
    }

    /// Copies the tensors into another precision.
    pub fn cast<T: Real>(&self) -> Vec<Vec<T>> {
        self.tensors
            .iter()
            .map(|t| t.iter().map(|&v| T::from_f64(v as f64)).collect())
            .collect()
    }

    pub fn zeros_like(&self) -> Vec<Vec<f32>> {
        self.tensors.iter().map(|t| vec![0.0; t.len()]).collect()
    }

    /// Writes one `UQT1` file per tensor plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let store_err = |reason: String| NetError::Store {
            path: dir.display().to_string(),
            reason,
        };
        fs::create_dir_all(dir).map_err(|e| store_err(e.to_string()))?;
        let mut entries = Vec::with_capacity(self.len());
        for ((name, shape), data) in self.names.iter().zip(&self.shapes).zip(&self.tensors) {
            let file = format!("{name}.uqt");
            TensorFile::f32(shape.clone(), "param", data.clone()).write(&dir.join(&file))?;
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: shape.clone(),
                file,
            });
        }
        let manifest = Manifest {
            config_hash: self.config.layout_hash(),
            config: self.config.clone(),
            tensors: entries,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(dir.join("manifest.json"), json).map_err(|e| store_err(e.to_string()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let store_err = |reason: String| NetError::Store {
            path: dir.display().to_string(),
            reason,
        };
        let text =
            fs::read_to_string(dir.join("manifest.json")).map_err(|e| store_err(e.to_string()))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| store_err(e.to_string()))?;
        if manifest.config.layout_hash() != manifest.config_hash {
            return Err(store_err("config hash does not match config".into()));
        }
        let template = init(&manifest.config, 0)?;
        if template.names.len() != manifest.tensors.len() {
            return Err(store_err("tensor count does not match config".into()));
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for (entry, (name, shape)) in manifest
            .tensors
            .iter()
            .zip(template.names.iter().zip(&template.shapes))
        {
            if &entry.name != name || &entry.shape != shape {
                return Err(store_err(format!("unexpected tensor {}", entry.name)));
            }
            let (fshape, data) = TensorFile::read(&dir.join(&entry.file))?.into_f32()?;
            if &fshape != shape {
                return Err(store_err(format!("{} has shape {fshape:?}", entry.name)));
            }
            tensors.push(data);
        }
        Ok(Self {
            tensors,
            ..template
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    config: NetConfig,
    tensors: Vec<ManifestEntry>,
}

/// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
pub fn init(config: &NetConfig, seed: u64) -> Result<Params> {
    config.validate()?;
    let arch = Arch::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::with_capacity(2 * arch.convs.len());
    let mut shapes = Vec::with_capacity(2 * arch.convs.len());
    let mut tensors = Vec::with_capacity(2 * arch.convs.len());
    for c in &arch.convs {
        let std = he_std(c.fan_in());
        let normal = Normal::new(0.0f64, std).expect("positive std");
        let n = c.cout * c.fan_in();
        names.push(format!("{}.weight", c.name));
        shapes.push(c.weight_shape());
        tensors.push((0..n).map(|_| normal.sample(&mut rng) as f32).collect());
        names.push(format!("{}.bias", c.name));
        shapes.push(vec![c.cout]);
        tensors.push(vec![0.0; c.cout]);
    }
    Ok(Params {
        config: config.clone(),
        names,
        shapes,
        tensors,
    })
}

pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout at the configured rate (zero by default).
    Train,
    /// Deterministic inference.
    Eval,
    /// Stochastic inference with dropout at the configured rate.
    McDropout,
}

/// Which decoders to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heads {
    Both,
    DoseOnly,
}

/// Outputs of one forward pass plus the cache needed to differentiate it.
pub struct Trace<T: Real> {
    cache: Cache<T>,
}

impl<T: Real> Trace<T> {
    pub fn dose(&self) -> &[T] {
        &self.cache.dose.output
    }

    pub fn ct(&self) -> Option<&[T]> {
        self.cache.recon.as_ref().map(|r| r.output.as_slice())
    }

    pub fn activation_signature(&self) -> Vec<bool> {
        self.cache.activation_signature()
    }
}

pub struct ForwardOutput {
    pub dose_hat: Volume,
    pub ct_hat: Option<Volume>,
    pub trace: Trace<f32>,
}

fn padded_dims(size: &[usize]) -> ops::Dims {
    match size {
        [h, w] => [1, *h, *w],
        [d, h, w] => [*d, *h, *w],
        _ => unreachable!("patches are 2-d or 3-d"),
    }
}

fn check_input(config: &NetConfig, x: &Patch) -> Result<()> {
    if x.channels() != config.in_channels {
        return Err(NetError::ShapeMismatch(format!(
            "expected {} input channels, got {}",
            config.in_channels,
            x.channels()
        )));
    }
    if x.size.len() != config.ndim {
        return Err(NetError::ShapeMismatch(format!(
            "expected {}-d input, got {:?}",
            config.ndim, x.size
        )));
    }
    let m = config.size_multiple();
    if x.size.iter().any(|&s| s % m != 0 || s == 0) {
        return Err(NetError::ShapeMismatch(format!(
            "spatial size {:?} is not divisible by {m}",
            x.size
        )));
    }
    Ok(())
}

fn stack_inputs<T: Real>(x: &Patch) -> Vec<T> {
    x.inputs
        .iter()
        .flat_map(|v| v.data().iter().map(|&a| T::from_f64(a as f64)))
        .collect()
}

fn dropout_for(config: &NetConfig, mode: Mode, seed: u64) -> Dropout {
    match mode {
        Mode::Eval => Dropout::new(0.0, seed),
        Mode::Train | Mode::McDropout => Dropout::new(config.dropout_p, seed),
    }
}

/// Forward pass in precision `T` with explicit weights.
pub fn forward_with<T: Real>(
    config: &NetConfig,
    weights: &[Vec<T>],
    x: &Patch,
    mode: Mode,
    rng_seed: u64,
    heads: Heads,
) -> Result<Trace<T>> {
    config.validate()?;
    check_input(config, x)?;
    let arch = Arch::new(config);
    if weights.len() != 2 * arch.convs.len() {
        return Err(NetError::ShapeMismatch(format!(
            "expected {} parameter tensors, got {}",
            2 * arch.convs.len(),
            weights.len()
        )));
    }
    let mut dropout = dropout_for(config, mode, rng_seed);
    let cache = model::forward(
        &arch,
        weights,
        stack_inputs(x),
        padded_dims(&x.size),
        &mut dropout,
        heads == Heads::Both,
    );
    Ok(Trace { cache })
}

fn to_volume(data: &[f32], x: &Patch) -> Volume {
    Volume::new(x.size.clone(), data.to_vec(), x.inputs[0].spacing().to_vec())
        .expect("network outputs are finite for finite inputs")
}

pub fn forward(p: &Params, x: &Patch, mode: Mode, rng_seed: u64) -> Result<ForwardOutput> {
    forward_heads(p, x, mode, rng_seed, Heads::Both)
}

pub fn forward_heads(
    p: &Params,
    x: &Patch,
    mode: Mode,
    rng_seed: u64,
    heads: Heads,
) -> Result<ForwardOutput> {
    let trace = forward_with(&p.config, &p.tensors, x, mode, rng_seed, heads)?;
    if trace.dose().iter().any(|v| !v.is_finite()) {
        return Err(NetError::NonFinite);
    }
    Ok(ForwardOutput {
        dose_hat: to_volume(trace.dose(), x),
        ct_hat: trace.ct().map(|c| to_volume(c, x)),
        trace,
    })
}

fn mse_and_grad<T: Real>(pred: &[T], target: &[f32], scale: f64) -> (f64, Vec<T>) {
    let n = pred.len() as f64;
    let mut loss = 0.0f64;
    let g = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p.to_f64() - t as f64;
            loss += d * d;
            T::from_f64(2.0 * d / n * scale)
        })
        .collect();
    (loss / n, g)
}

/// Batch-mean dual loss and its exact gradient in precision `T`.
///
/// Sample `i` of the batch uses dropout seed `rng_seed + i`.
pub fn loss_and_grad_with<T: Real>(
    config: &NetConfig,
    weights: &[Vec<T>],
    batch: &[Patch],
    mode: Mode,
    rng_seed: u64,
) -> Result<(f64, Vec<Vec<T>>)> {
    if batch.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    let arch = Arch::new(config);
    let mut grads: Vec<Vec<T>> = weights.iter().map(|t| vec![T::ZERO; t.len()]).collect();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (i, x) in batch.iter().enumerate() {
        let dose = x.dose.as_ref().ok_or(NetError::MissingLabel)?;
        let trace = forward_with(config, weights, x, mode, rng_seed.wrapping_add(i as u64), Heads::Both)?;
        let (ld, gd) = mse_and_grad(trace.dose(), dose.data(), scale);
        let (lc, gc) = match trace.ct() {
            Some(ct) => {
                let (l, g) = mse_and_grad(ct, x.ct().data(), scale);
                (l, Some(g))
            }
            None => (0.0, None),
        };
        total += (ld + lc) * scale;
        model::backward(&arch, weights, &trace.cache, &gd, gc.as_deref(), &mut grads);
    }
    Ok((total, grads))
}

/// Batch-mean dual loss without gradients.
pub fn loss_with<T: Real>(
    config: &NetConfig,
    weights: &[Vec<T>],
    batch: &[Patch],
    mode: Mode,
    rng_seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (i, x) in batch.iter().enumerate() {
        let dose = x.dose.as_ref().ok_or(NetError::MissingLabel)?;
        let trace = forward_with(config, weights, x, mode, rng_seed.wrapping_add(i as u64), Heads::Both)?;
        let ld = mse_and_grad(trace.dose(), dose.data(), 0.0).0;
        let lc = trace.ct().map_or(0.0, |c| mse_and_grad(c, x.ct().data(), 0.0).0);
        total += (ld + lc) * scale;
    }
    Ok(total)
}

/// Training-mode dual loss and gradient for `f32` parameters.
pub fn loss_and_grad(p: &Params, batch: &[Patch], rng_seed: u64) -> Result<(f64, Vec<Vec<f32>>)> {
    loss_and_grad_with(&p.config, &p.tensors, batch, Mode::Train, rng_seed)
}

/// Parameter counts grouped by component (`enc`, `dose`, `recon`).
pub fn component_sizes(p: &Params) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (n, t) in p.names.iter().zip(&p.tensors) {
        let comp = n.split('.').next().unwrap_or_default().to_string();
        *out.entry(comp).or_insert(0) += t.len();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Mask;
    use rand::Rng;

    pub(crate) fn random_patch(config: &NetConfig, size: &[usize], seed: u64) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = size.iter().product();
        let mut vol = || {
            Volume::from_vec(size.to_vec(), (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
        };
        let inputs = (0..config.in_channels).map(|_| vol()).collect();
        let dose = vol();
        Patch::whole(inputs, Mask::ones(size), Some(dose)).unwrap()
    }

    fn tiny() -> NetConfig {
        NetConfig {
            levels: 2,
            base_channels: 4,
            growth: 2,
            convs_per_block: 1,
            in_channels: 3,
            ..NetConfig::default()
        }
    }

    #[test]
    fn he_std_and_determinism() {
        assert_eq!(he_std(8), 0.5);
        let c = NetConfig::default();
        assert_eq!(init(&c, 9).unwrap(), init(&c, 9).unwrap());
        assert_ne!(init(&c, 9).unwrap(), init(&c, 10).unwrap());
    }

    #[test]
    fn he_sample_std() {
        // A 3×3 kernel mapping 16 → 16 channels: fan_in 144, 2304 draws.
        let c = NetConfig {
            base_channels: 16,
            growth: 16,
            convs_per_block: 1,
            ..NetConfig::default()
        };
        let p = init(&c, 1).unwrap();
        let w = p.get("enc.0.dense0.weight").unwrap();
        assert_eq!(w.len(), 2304);
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let want = (2.0f64 / 144.0).sqrt();
        assert!((var.sqrt() - want).abs() < 0.1 * want, "{} vs {want}", var.sqrt());
        assert!(p.get("enc.0.dense0.bias").unwrap().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn output_shapes() {
        let c = NetConfig::default();
        let p = init(&c, 0).unwrap();
        let x = random_patch(&c, &[64, 64], 1);
        let out = forward(&p, &x, Mode::Eval, 0).unwrap();
        assert_eq!(out.dose_hat.shape(), &[64, 64]);
        assert_eq!(out.ct_hat.unwrap().shape(), &[64, 64]);
        let x = random_patch(&c, &[16, 8], 1);
        assert_eq!(forward(&p, &x, Mode::Eval, 0).unwrap().dose_hat.shape(), &[16, 8]);
    }

    #[test]
    fn three_d_shapes() {
        let c = NetConfig {
            ndim: 3,
            ..tiny()
        };
        let p = init(&c, 0).unwrap();
        assert_eq!(p.shapes[0], vec![4, 3, 3, 3, 3]);
        let x = random_patch(&c, &[4, 6, 8], 2);
        let out = forward(&p, &x, Mode::Eval, 0).unwrap();
        assert_eq!(out.dose_hat.shape(), &[4, 6, 8]);
    }

    #[test]
    fn shape_errors() {
        let c = NetConfig::default();
        let p = init(&c, 0).unwrap();
        let x = random_patch(&c, &[30, 32], 1);
        assert!(matches!(forward(&p, &x, Mode::Eval, 0), Err(NetError::ShapeMismatch(_))));
        let x = random_patch(&NetConfig { in_channels: 5, ..c }, &[32, 32], 1);
        assert!(matches!(forward(&p, &x, Mode::Eval, 0), Err(NetError::ShapeMismatch(_))));
    }

    #[test]
    fn eval_is_deterministic_and_zero_rate_dropout_is_eval() {
        let c = NetConfig::default();
        let p = init(&c, 3).unwrap();
        let x = random_patch(&c, &[32, 32], 4);
        let a = forward(&p, &x, Mode::Eval, 1).unwrap();
        let b = forward(&p, &x, Mode::Eval, 2).unwrap();
        assert_eq!(a.dose_hat, b.dose_hat);
        assert_eq!(a.ct_hat, b.ct_hat);
        let mc = forward(&p, &x, Mode::McDropout, 7).unwrap();
        assert_eq!(mc.dose_hat, a.dose_hat);
        let mut pd = p.clone();
        pd.config.dropout_p = 0.3;
        let m1 = forward(&pd, &x, Mode::McDropout, 7).unwrap();
        let m2 = forward(&pd, &x, Mode::McDropout, 8).unwrap();
        assert_ne!(m1.dose_hat, a.dose_hat);
        assert_ne!(m1.dose_hat, m2.dose_hat);
        assert_eq!(forward(&pd, &x, Mode::McDropout, 7).unwrap().dose_hat, m1.dose_hat);
    }

    #[test]
    fn inverted_dropout_keeps_mean() {
        for p in [0.1, 0.3, 0.5] {
            let mut d = Dropout::new(p, 11);
            let m: Vec<f64> = d.mask(10_000).unwrap();
            let mean = m.iter().sum::<f64>() / m.len() as f64;
            assert!((0.97..=1.03).contains(&mean), "p={p}: {mean}");
        }
        assert!(Dropout::new(0.0, 1).mask::<f32>(4).is_none());
    }

    #[test]
    fn branch_isolation() {
        let with = init(&NetConfig::default(), 0).unwrap();
        let without = init(
            &NetConfig {
                recon_branch: false,
                ..NetConfig::default()
            },
            0,
        )
        .unwrap();
        let a = component_sizes(&with);
        let b = component_sizes(&without);
        assert_eq!(a["enc"], b["enc"]);
        assert_eq!(a["dose"], b["dose"]);
        assert_eq!(a["recon"], a["dose"]);
        assert!(!b.contains_key("recon"));
    }

    #[test]
    fn ablation_loss_is_dose_only() {
        let c = NetConfig {
            recon_branch: false,
            ..tiny()
        };
        let p = init(&c, 0).unwrap();
        let x = random_patch(&c, &[8, 8], 5);
        let (loss, _) = loss_and_grad(&p, std::slice::from_ref(&x), 0).unwrap();
        let out = forward(&p, &x, Mode::Eval, 0).unwrap();
        assert!(out.ct_hat.is_none());
        let want = masked_mse_all(&out.dose_hat, x.dose.as_ref().unwrap());
        assert!((loss - want).abs() < 1e-6 * want);
    }

    fn masked_mse_all(a: &Volume, b: &Volume) -> f64 {
        crate::grid::masked_mse(a, b, &Mask::ones(a.shape())).unwrap()
    }

    #[test]
    fn loss_is_sum_of_both_terms() {
        let c = tiny();
        let p = init(&c, 2).unwrap();
        let x = random_patch(&c, &[8, 8], 6);
        let out = forward(&p, &x, Mode::Eval, 0).unwrap();
        let (l, _) = loss_and_grad(&p, std::slice::from_ref(&x), 0).unwrap();
        let dose_term = masked_mse_all(&out.dose_hat, x.dose.as_ref().unwrap());
        let ct_term = masked_mse_all(out.ct_hat.as_ref().unwrap(), x.ct());
        assert!((l - dose_term - ct_term).abs() < 1e-6 * l);
    }

    #[test]
    fn perfect_prediction_is_stationary() {
        let c = NetConfig {
            recon_branch: false,
            ..tiny()
        };
        let p = init(&c, 2).unwrap();
        let mut x = random_patch(&c, &[8, 8], 6);
        x.dose = Some(forward(&p, &x, Mode::Eval, 0).unwrap().dose_hat);
        let (l, g) = loss_and_grad(&p, std::slice::from_ref(&x), 0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn f32_and_f64_gradients_agree() {
        let c = tiny();
        let p = init(&c, 4).unwrap();
        let batch: Vec<Patch> = (0..2).map(|i| random_patch(&c, &[8, 8], 20 + i)).collect();
        let (l32, g32) = loss_and_grad(&p, &batch, 0).unwrap();
        let (l64, g64) = loss_and_grad_with(&c, &p.cast::<f64>(), &batch, Mode::Train, 0).unwrap();
        assert!((l32 - l64).abs() < 1e-5 * l64);
        let scale = g64.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in g32.iter().flatten().zip(g64.iter().flatten()) {
            assert!((*a as f64 - b).abs() < 1e-4 * scale);
        }
    }

    #[test]
    fn params_store_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = init(&tiny(), 7).unwrap();
        p.save(dir.path()).unwrap();
        let back = Params::load(dir.path()).unwrap();
        assert_eq!(
            back.tensors.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>(),
            p.tensors.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back, p);
        let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(manifest.contains(&p.config.layout_hash()));
    }

    #[test]
    fn invalid_configs() {
        for c in [
            NetConfig { levels: 1, ..NetConfig::default() },
            NetConfig { base_channels: 3, ..NetConfig::default() },
            NetConfig { dropout_p: 1.0, ..NetConfig::default() },
            NetConfig { ndim: 4, ..NetConfig::default() },
        ] {
            assert!(matches!(init(&c, 0), Err(NetError::InvalidConfig(_))));
        }
    }
}
