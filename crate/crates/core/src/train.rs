//! Adam, the patch-sampling training loop, the nested cross-validation
//! splitter and the ensemble trainer.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{self, GridError, Patch};
use crate::net::{self, Mode, NetConfig, NetError, Params};
use crate::synth::{Sample, DOSE_SCALE};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient at step {0}")]
    NonFiniteGradient(u64),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("need at least {need} samples, have {have}")]
    TooFewSamples { need: usize, have: usize },
    #[error("sample {0} has no dose label")]
    MissingLabel(String),
    #[error("sample {0} has an empty low-dose target")]
    EmptyTarget(String),
    #[error("seed {0} appears twice in the ensemble")]
    DuplicateSeed(u64),
    #[error("failed to write {path}: {reason}")]
    Write { path: String, reason: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub patch_size: Vec<usize>,
    pub patches_per_patient: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            patch_size: vec![32, 32],
            patches_per_patient: 4,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        self.validate_optimizer()
    }

    /// Checks everything except the epoch count.
    fn validate_optimizer(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if !(self.eps >= 0.0) {
            return bad("eps must be non-negative");
        }
        if self.batch_size == 0 || self.patches_per_patient == 0 {
            return bad("batch_size and patches_per_patient must be positive");
        }
        if self.patch_size.is_empty() || self.patch_size.contains(&0) {
            return bad("patch_size must be non-empty and positive");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        (n_train * self.patches_per_patient).div_ceil(self.batch_size)
    }
}

/// Adam moments, kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(p: &Params) -> Self {
        let z: Vec<Vec<f64>> = p.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            t: 0,
            m: z.clone(),
            v: z,
        }
    }
}

/// One bias-corrected Adam update applied in place.
///
/// The gradient is checked for non-finite entries before anything is touched.
pub fn adam_step(
    tensors: &mut [Vec<f32>],
    grads: &[Vec<f32>],
    s: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let t_next = s.t + 1;
    if grads.len() != tensors.len() || grads.iter().zip(tensors.iter()).any(|(g, w)| g.len() != w.len())
    {
        return Err(NetError::ShapeMismatch("gradient does not match parameters".into()).into());
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient(t_next));
    }
    s.t = t_next;
    let bc1 = 1.0 - cfg.beta1.powi(s.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(s.t as i32);
    for (((w, g), m), v) in tensors.iter_mut().zip(grads).zip(&mut s.m).zip(&mut s.v) {
        for i in 0..w.len() {
            let gi = g[i] as f64;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            if mh != 0.0 {
                w[i] = (w[i] as f64 - cfg.lr * mh / (vh.sqrt() + cfg.eps)) as f32;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvSizes {
    pub outer: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for CvSizes {
    fn default() -> Self {
        Self {
            outer: 3,
            val: 5,
            test: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub n_folds: usize,
    pub outer_holdout: Vec<String>,
    pub folds: Vec<Fold>,
}

impl CvPlan {
    /// Ids `fold` never trains on: validation, outer holdout, then test.
    pub fn held_out(&self, fold: usize) -> Vec<String> {
        let f = &self.folds[fold];
        let mut out: Vec<String> = f.val.iter().chain(&self.outer_holdout).cloned().collect();
        out.extend(f.test.iter().cloned());
        out
    }
}

/// Shuffles `ids` with `seed`, sets aside the outer holdout, then gives fold
/// `k` the `k`-th consecutive block of the remaining pool as its test set and
/// the block that follows it (cyclically) as its validation set.
pub fn make_cv_plan(ids: &[String], n_folds: usize, sizes: CvSizes, seed: u64) -> Result<CvPlan> {
    if n_folds == 0 || sizes.test == 0 {
        return Err(TrainError::InvalidConfig("n_folds and test size must be positive".into()));
    }
    let distinct: BTreeSet<&String> = ids.iter().collect();
    if distinct.len() != ids.len() {
        return Err(TrainError::InvalidConfig("sample ids are not unique".into()));
    }
    let need = (sizes.outer + n_folds * sizes.test).max(sizes.outer + sizes.val + sizes.test + 1);
    if ids.len() < need {
        return Err(TrainError::TooFewSamples {
            need,
            have: ids.len(),
        });
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pool = order.split_off(sizes.outer);
    let n = pool.len();
    let folds = (0..n_folds)
        .map(|k| {
            let t0 = k * sizes.test;
            let in_test = |i: usize| i >= t0 && i < t0 + sizes.test;
            let val_idx: Vec<usize> = (0..sizes.val).map(|j| (t0 + sizes.test + j) % n).collect();
            Fold {
                test: (t0..t0 + sizes.test).map(|i| pool[i].clone()).collect(),
                val: val_idx.iter().map(|&i| pool[i].clone()).collect(),
                train: (0..n)
                    .filter(|&i| !in_test(i) && !val_idx.contains(&i))
                    .map(|i| pool[i].clone())
                    .collect(),
            }
        })
        .collect();
    Ok(CvPlan {
        n_folds,
        outer_holdout: order,
        folds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: Params,
    pub history: Vec<EpochStats>,
}

/// Patch around the tv_low bounding-box centre, with the dose in network units.
pub fn centred_patch(s: &Sample, size: &[usize]) -> Result<Patch> {
    let (lo, hi) = s
        .tv_low
        .bounding_box()
        .ok_or_else(|| TrainError::EmptyTarget(s.id.clone()))?;
    let c: Vec<i64> = lo.iter().zip(&hi).map(|(&a, &b)| ((a + b + 1) / 2) as i64).collect();
    Ok(scale_dose(grid::extract_patch(s, &c, size)?))
}

fn scale_dose(mut p: Patch) -> Patch {
    p.dose = p
        .dose
        .map(|d| d.map(|v| (v as f64 / DOSE_SCALE) as f32).expect("finite dose"));
    p
}

/// Centre drawn uniformly inside the tv_low bounding box dilated by `size / 4`.
fn random_patch(s: &Sample, size: &[usize], rng: &mut ChaCha8Rng) -> Result<Patch> {
    let (lo, hi) = s
        .tv_low
        .bounding_box()
        .ok_or_else(|| TrainError::EmptyTarget(s.id.clone()))?;
    let shape = s.ct.shape();
    let center: Vec<i64> = (0..shape.len())
        .map(|a| {
            let m = size[a] / 4;
            let a0 = lo[a].saturating_sub(m);
            let a1 = (hi[a] + m).min(shape[a] - 1);
            rng.random_range(a0..=a1) as i64
        })
        .collect();
    let p = grid::extract_patch(s, &center, size)?;
    let axes: Vec<usize> = (0..shape.len()).filter(|_| rng.random_bool(0.5)).collect();
    Ok(scale_dose(grid::flip(&p, &axes)?))
}

/// Mean eval-mode dual loss over centred patches of `samples`.
pub fn validation_loss(p: &Params, samples: &[&Sample], size: &[usize]) -> Result<f64> {
    let batch = samples
        .iter()
        .map(|s| centred_patch(s, size))
        .collect::<Result<Vec<_>>>()?;
    Ok(net::loss_with(&p.config, &p.tensors, &batch, Mode::Eval, 0)?)
}

/// Trains one network from He initialization with seed `cfg.seed`.
///
/// `epochs == 0` returns the initial parameters with an empty history.
pub fn train_model(
    train: &[&Sample],
    val: &[&Sample],
    cfg: &TrainConfig,
    net_cfg: &NetConfig,
) -> Result<Trained> {
    cfg.validate_optimizer()?;
    if train.is_empty() {
        return Err(TrainError::TooFewSamples { need: 1, have: 0 });
    }
    if cfg.patch_size.len() != net_cfg.ndim {
        return Err(TrainError::InvalidConfig(format!(
            "patch_size {:?} does not match ndim {}",
            cfg.patch_size, net_cfg.ndim
        )));
    }
    if let Some(s) = train.iter().chain(val).find(|s| s.dose.is_none()) {
        return Err(TrainError::MissingLabel(s.id.clone()));
    }
    let mut params = net::init(net_cfg, cfg.seed)?;
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let steps = cfg.steps_per_epoch(train.len());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for _ in 0..steps {
            let batch = (0..cfg.batch_size)
                .map(|_| {
                    let s = train[rng.random_range(0..train.len())];
                    random_patch(s, &cfg.patch_size, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = net::loss_and_grad(&params, &batch, rng.random())?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss(adam.t + 1));
            }
            adam_step(&mut params.tensors, &grads, &mut adam, cfg)?;
            sum += loss;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(validation_loss(&params, val, &cfg.patch_size)?)
        };
        let train_loss = sum / steps as f64;
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:?}");
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
    }
    Ok(Trained { params, history })
}

/// Independent [`train_model`] runs, one per seed, in seed order.
///
/// Members run in parallel; each is a pure function of its seed, so the
/// result does not depend on the thread count.
pub fn train_ensemble(
    train: &[&Sample],
    val: &[&Sample],
    cfg: &TrainConfig,
    net_cfg: &NetConfig,
    seeds: &[u64],
) -> Result<Vec<Trained>> {
    if seeds.is_empty() {
        return Err(TrainError::InvalidConfig("ensemble needs at least one model".into()));
    }
    let mut seen = BTreeSet::new();
    if let Some(&d) = seeds.iter().find(|&&s| !seen.insert(s)) {
        return Err(TrainError::DuplicateSeed(d));
    }
    seeds
        .par_iter()
        .map(|&seed| {
            let c = TrainConfig {
                seed,
                ..cfg.clone()
            };
            train_model(train, val, &c, net_cfg)
        })
        .collect()
}

/// Writes `epoch,train_loss,val_loss` rows; a missing validation loss is left empty.
pub fn write_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let err = |e: csv::Error| TrainError::Write {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["epoch", "train_loss", "val_loss"]).map_err(err)?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            h.train_loss.to_string(),
            h.val_loss.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| err(e.into()))
}
