//! Per-patient uncertainty scores: body-masked reconstruction error, Monte
//! Carlo dropout and deep ensembles.
//!
//! Whole samples are predicted by tiling them with half-overlapping windows and
//! averaging overlaps uniformly. All dose-derived quantities stay in network
//! units (dose / 70).

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{self, crop_mask, crop_volume, GridError, Mask, Patch, Volume};
use crate::net::{self, Heads, Mode, NetConfig, NetError, Params};
use crate::synth::Sample;

#[derive(Debug, Error)]
pub enum UqError {
    #[error("network has no reconstruction branch")]
    NoReconBranch,
    #[error("dropout probability {0} outside [0, 1)")]
    BadDropProb(f64),
    #[error("need at least 2 passes, got {0}")]
    TooFewPasses(usize),
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("sample {0} has no dose label")]
    MissingLabel(String),
    #[error("tile {tile:?} does not fit sample shape {shape:?}")]
    BadTile { tile: Vec<usize>, shape: Vec<usize> },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, UqError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Recon,
    Mcdo(f64),
    De,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Recon => f.write_str("RECON"),
            Method::Mcdo(p) => write!(f, "MCDO({p})"),
            Method::De => f.write_str("DE"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyScore {
    pub sample_id: String,
    pub method: Method,
    pub value: f64,
    /// Voxelwise std map for the sampling methods.
    pub aux: Option<Volume>,
    /// Network forward passes spent on this score.
    pub passes: usize,
}

/// Window origins along one axis: stride `size / 2`, last window flush with the end.
pub fn tile_origins(n: usize, size: usize) -> Vec<usize> {
    if size >= n {
        return vec![0];
    }
    let step = (size / 2).max(1);
    let mut out: Vec<usize> = (0..=n - size).step_by(step).collect();
    if *out.last().unwrap() != n - size {
        out.push(n - size);
    }
    out
}

/// Window size actually used on `shape`: the requested tile clipped to the volume.
fn effective_tile(cfg: &NetConfig, shape: &[usize], tile: &[usize]) -> Result<Vec<usize>> {
    let bad = || UqError::BadTile {
        tile: tile.to_vec(),
        shape: shape.to_vec(),
    };
    if tile.len() != shape.len() {
        return Err(bad());
    }
    let t: Vec<usize> = tile.iter().zip(shape).map(|(&t, &n)| t.min(n)).collect();
    let m = cfg.size_multiple();
    if t.iter().any(|&x| x == 0 || x % m != 0) {
        return Err(bad());
    }
    Ok(t)
}

/// Cropped network inputs of every tile, in row-major tile order.
struct Tiling {
    shape: Vec<usize>,
    tiles: Vec<Patch>,
}

impl Tiling {
    fn new(cfg: &NetConfig, s: &Sample, tile: &[usize]) -> Result<Self> {
        let shape = s.ct.shape().to_vec();
        let size = effective_tile(cfg, &shape, tile)?;
        let inputs = s.input_channels();
        let per_axis: Vec<Vec<usize>> = shape
            .iter()
            .zip(&size)
            .map(|(&n, &t)| tile_origins(n, t))
            .collect();
        let counts: Vec<usize> = per_axis.iter().map(Vec::len).collect();
        let mut tiles = Vec::new();
        let mut err = None;
        grid::for_each_coord(&counts, |c| {
            if err.is_some() {
                return;
            }
            let origin: Vec<usize> = c.iter().enumerate().map(|(a, &i)| per_axis[a][i]).collect();
            let built = (|| -> std::result::Result<Patch, GridError> {
                Ok(Patch {
                    inputs: inputs
                        .iter()
                        .map(|v| crop_volume(v, &origin, &size))
                        .collect::<std::result::Result<_, _>>()?,
                    body: crop_mask(&s.body, &origin, &size)?,
                    dose: None,
                    origin: origin.clone(),
                    size: size.clone(),
                })
            })();
            match built {
                Ok(p) => tiles.push(p),
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e.into());
        }
        Ok(Self { shape, tiles })
    }

    /// Averages per-tile outputs back onto the full grid.
    fn stitch(&self, outputs: &[Vec<f32>]) -> Vec<f32> {
        let n: usize = self.shape.iter().product();
        let mut sum = vec![0.0f64; n];
        let mut cnt = vec![0u32; n];
        let st = grid::strides(&self.shape);
        for (t, out) in self.tiles.iter().zip(outputs) {
            let mut i = 0;
            grid::for_each_coord(&t.size, |c| {
                let idx: usize = c
                    .iter()
                    .zip(&t.origin)
                    .zip(&st)
                    .map(|((&ci, &o), &s)| (ci + o) * s)
                    .sum();
                sum[idx] += out[i] as f64;
                cnt[idx] += 1;
                i += 1;
            });
        }
        sum.iter().zip(&cnt).map(|(&s, &c)| (s / c as f64) as f32).collect()
    }
}

/// Full-sample prediction assembled from tiles.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub dose: Volume,
    pub ct: Option<Volume>,
    pub passes: usize,
}

/// One tiled forward pass. Tile `i` uses dropout seed `seed + i`.
fn predict_with(
    cfg: &NetConfig,
    weights: &[Vec<f32>],
    tiling: &Tiling,
    mode: Mode,
    seed: u64,
    heads: Heads,
    spacing: &[f64],
) -> Result<Prediction> {
    let mut dose = Vec::with_capacity(tiling.tiles.len());
    let mut ct = Vec::with_capacity(tiling.tiles.len());
    for (i, t) in tiling.tiles.iter().enumerate() {
        let tr = net::forward_with(cfg, weights, t, mode, seed.wrapping_add(i as u64), heads)?;
        dose.push(tr.dose().to_vec());
        if let Some(c) = tr.ct() {
            ct.push(c.to_vec());
        }
    }
    let vol = |d: Vec<f32>| {
        Volume::new(tiling.shape.clone(), d, spacing.to_vec())
            .map_err(|_| UqError::Net(NetError::NonFinite))
    };
    Ok(Prediction {
        dose: vol(tiling.stitch(&dose))?,
        ct: if ct.is_empty() {
            None
        } else {
            Some(vol(tiling.stitch(&ct))?)
        },
        passes: tiling.tiles.len(),
    })
}

/// Eval-mode prediction of the whole sample, both heads when present.
pub fn predict_full(p: &Params, s: &Sample, tile: &[usize]) -> Result<Prediction> {
    let tiling = Tiling::new(&p.config, s, tile)?;
    predict_with(&p.config, &p.tensors, &tiling, Mode::Eval, 0, Heads::Both, s.ct.spacing())
}

/// Number of tiles a sample of `shape` is split into.
pub fn tile_count(shape: &[usize], tile: &[usize]) -> usize {
    shape
        .iter()
        .zip(tile)
        .map(|(&n, &t)| tile_origins(n, t.min(n)).len())
        .product()
}

/// Body-masked dose MSE of a prediction against the sample label, in network units.
pub fn dose_mse(s: &Sample, dose_hat: &Volume) -> Result<f64> {
    let d = s
        .scaled_dose()
        .ok_or_else(|| UqError::MissingLabel(s.id.clone()))?;
    Ok(grid::masked_mse(&d, dose_hat, &s.body)?)
}

/// Reconstruction score and the dose prediction from the same single pass per tile.
pub fn recon_uncertainty(p: &Params, s: &Sample, tile: &[usize]) -> Result<(UncertaintyScore, Volume)> {
    if !p.config.recon_branch {
        return Err(UqError::NoReconBranch);
    }
    let pred = predict_full(p, s, tile)?;
    let ct_hat = pred.ct.expect("recon branch produces a CT");
    let value = grid::masked_mse(&s.ct, &ct_hat, &s.body)?;
    Ok((
        UncertaintyScore {
            sample_id: s.id.clone(),
            method: Method::Recon,
            value,
            aux: None,
            passes: pred.passes,
        },
        pred.dose,
    ))
}

/// Per-voxel population std across `maps` and its mean over `body`.
///
/// Values at each voxel are sorted before reduction so the result does not
/// depend on the order of the maps.
pub fn pass_spread(maps: &[Vec<f32>], body: &Mask, spacing: &[f64]) -> Result<(f64, Volume)> {
    let n = body.len();
    if maps.iter().any(|m| m.len() != n) {
        return Err(GridError::ShapeMismatch(vec![maps[0].len()], vec![n]).into());
    }
    let k = maps.len() as f64;
    let mut vals = vec![0.0f64; maps.len()];
    let std: Vec<f32> = (0..n)
        .map(|i| {
            for (v, m) in vals.iter_mut().zip(maps) {
                *v = m[i] as f64;
            }
            vals.sort_by(f64::total_cmp);
            let mean = vals.iter().sum::<f64>() / k;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
            var.sqrt() as f32
        })
        .collect();
    let aux = Volume::new(body.shape().to_vec(), std, spacing.to_vec())?;
    let (mut sum, mut cnt) = (0.0f64, 0usize);
    for (&s, &b) in aux.data().iter().zip(body.data()) {
        if b != 0 {
            sum += s as f64;
            cnt += 1;
        }
    }
    if cnt == 0 {
        return Err(GridError::EmptyMask.into());
    }
    Ok((sum / cnt as f64, aux))
}

/// Spread of `n_passes` dose-only forwards with unit dropout at rate `drop_p`.
///
/// Pass `j` seeds tile `i` with `seed + j * n_tiles + i`.
pub fn mcdo_uncertainty(
    p: &Params,
    s: &Sample,
    drop_p: f64,
    n_passes: usize,
    seed: u64,
    tile: &[usize],
) -> Result<UncertaintyScore> {
    if !(0.0..1.0).contains(&drop_p) {
        return Err(UqError::BadDropProb(drop_p));
    }
    if n_passes < 2 {
        return Err(UqError::TooFewPasses(n_passes));
    }
    let cfg = NetConfig {
        dropout_p: drop_p,
        ..p.config.clone()
    };
    let tiling = Tiling::new(&cfg, s, tile)?;
    let nt = tiling.tiles.len() as u64;
    let preds = (0..n_passes as u64)
        .into_par_iter()
        .map(|j| {
            predict_with(
                &cfg,
                &p.tensors,
                &tiling,
                Mode::McDropout,
                seed.wrapping_add(j * nt),
                Heads::DoseOnly,
                s.ct.spacing(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    spread_score(s, Method::Mcdo(drop_p), preds)
}

/// Spread of eval-mode dose predictions across ensemble members.
pub fn de_uncertainty(models: &[Params], s: &Sample, tile: &[usize]) -> Result<UncertaintyScore> {
    let first = models.first().ok_or(UqError::EmptyEnsemble)?;
    let tiling = Tiling::new(&first.config, s, tile)?;
    let preds = models
        .par_iter()
        .map(|m| {
            predict_with(
                &m.config,
                &m.tensors,
                &tiling,
                Mode::Eval,
                0,
                Heads::DoseOnly,
                s.ct.spacing(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    spread_score(s, Method::De, preds)
}

fn spread_score(s: &Sample, method: Method, preds: Vec<Prediction>) -> Result<UncertaintyScore> {
    let passes = preds.iter().map(|p| p.passes).sum();
    let maps: Vec<Vec<f32>> = preds.into_iter().map(|p| p.dose.into_data()).collect();
    let (value, aux) = pass_spread(&maps, &s.body, s.ct.spacing())?;
    Ok(UncertaintyScore {
        sample_id: s.id.clone(),
        method,
        value,
        aux: Some(aux),
        passes,
    })
}
