//! Synthetic phantom "patients".
//!
//! The in-distribution (ID) family has a near-round body with targets in the
//! upper-central region. The out-of-distribution (OOD) family has an elongated
//! body, extra air cavities and targets displaced to the lower body. Each
//! sample is a pure function of `(seed, family, index)`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{for_each_coord, GridError, Mask, Volume};
use crate::tensor_io::{self, TensorIoError};

pub const TV_HIGH_DOSE: f64 = 70.0;
pub const TV_LOW_DOSE: f64 = 54.25;
/// Prescriptions and dose labels are divided by this before entering the network.
pub const DOSE_SCALE: f64 = TV_HIGH_DOSE;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid dataset spec: {0}")]
    SpecInvalid(String),
    #[error("sample {0} has an empty target")]
    EmptyTarget(String),
    #[error("bad sample directory {path}: {reason}")]
    BadSample { path: String, reason: String },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] TensorIoError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Id => "ID",
            Family::Ood => "OOD",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prescriptions {
    pub tv_high: f64,
    pub tv_low: f64,
}

impl Default for Prescriptions {
    fn default() -> Self {
        Self {
            tv_high: TV_HIGH_DOSE,
            tv_low: TV_LOW_DOSE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Oar {
    pub name: String,
    pub mask: Mask,
}

/// One synthetic patient.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub family: Family,
    pub ct: Volume,
    pub body: Mask,
    pub tv_high: Mask,
    pub tv_low: Mask,
    pub oars: Vec<Oar>,
    pub prescriptions: Prescriptions,
    pub dose: Option<Volume>,
}

impl Sample {
    /// Network input channels: CT, the two prescription maps (scaled by
    /// [`DOSE_SCALE`]) and one binary channel per OAR.
    pub fn input_channels(&self) -> Vec<Volume> {
        let shape = self.ct.shape();
        let spacing = self.ct.spacing().to_vec();
        let scaled = |m: &Mask, level: f64| {
            let v = (level / DOSE_SCALE) as f32;
            Volume::new(
                shape.to_vec(),
                m.data().iter().map(|&b| b as f32 * v).collect(),
                spacing.clone(),
            )
            .expect("mask shares the CT shape")
        };
        let mut out = vec![
            self.ct.clone(),
            scaled(&self.tv_high, self.prescriptions.tv_high),
            scaled(&self.tv_low, self.prescriptions.tv_low),
        ];
        out.extend(self.oars.iter().map(|o| scaled(&o.mask, DOSE_SCALE)));
        out
    }

    /// Dose label in network units.
    pub fn scaled_dose(&self) -> Option<Volume> {
        self.dose
            .as_ref()
            .map(|d| d.map(|v| (v as f64 / DOSE_SCALE) as f32).expect("finite"))
    }

    /// Named structures used for DVH evaluation: the two targets then the OARs.
    pub fn structures(&self) -> Vec<(&str, &Mask)> {
        let mut s = vec![("tv_high", &self.tv_high), ("tv_low", &self.tv_low)];
        s.extend(self.oars.iter().map(|o| (o.name.as_str(), &o.mask)));
        s
    }
}

pub const OAR_NAMES: [&str; 3] = ["cord", "parotid_l", "parotid_r"];

/// Geometry ranges of one family, as fractions of the half-extent of each axis
/// unless noted otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyGeometry {
    /// Body semi-axis along the vertical (row) axis.
    pub body_rows: (f64, f64),
    /// Body semi-axis along the horizontal and depth axes.
    pub body_cols: (f64, f64),
    /// Vertical target-centre offset from the body centre; negative is up.
    pub target_offset: (f64, f64),
    /// Number of air cavities.
    pub cavities: (usize, usize),
    /// Cavity radius in voxels.
    pub cavity_radius: (f64, f64),
}

impl FamilyGeometry {
    pub fn in_distribution() -> Self {
        Self {
            body_rows: (0.80, 0.88),
            body_cols: (0.84, 0.92),
            target_offset: (-0.25, -0.06),
            cavities: (0, 2),
            cavity_radius: (1.5, 2.5),
        }
    }

    pub fn out_of_distribution() -> Self {
        Self {
            body_rows: (0.90, 0.96),
            body_cols: (0.60, 0.68),
            target_offset: (0.10, 0.28),
            cavities: (3, 5),
            cavity_radius: (2.5, 4.0),
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1;
        let in_unit = |r: (f64, f64)| r.0 > 0.0 && r.1 < 1.0;
        if !(ok(self.body_rows)
            && ok(self.body_cols)
            && ok(self.target_offset)
            && ok(self.cavity_radius)
            && in_unit(self.body_rows)
            && in_unit(self.body_cols)
            && self.target_offset.0 > -0.5
            && self.target_offset.1 < 0.5
            && self.cavity_radius.0 > 0.0
            && self.cavities.0 <= self.cavities.1)
        {
            return Err(SynthError::SpecInvalid(format!("{name} geometry ranges are inconsistent")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub n_id: usize,
    pub n_ood: usize,
    pub shape: Vec<usize>,
    pub spacing: Vec<f64>,
    pub seed: u64,
    /// Dose fall-off width in spacing units.
    pub sigma: f64,
    pub id_geometry: FamilyGeometry,
    pub ood_geometry: FamilyGeometry,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_id: 60,
            n_ood: 10,
            shape: vec![64, 64],
            spacing: vec![1.0, 1.0],
            seed: 42,
            sigma: 6.0,
            id_geometry: FamilyGeometry::in_distribution(),
            ood_geometry: FamilyGeometry::out_of_distribution(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_id < 12 {
            return Err(SynthError::SpecInvalid(format!(
                "n_id must be at least 12, got {}",
                self.n_id
            )));
        }
        if !(2..=3).contains(&self.shape.len()) {
            return Err(SynthError::SpecInvalid("shape must have 2 or 3 axes".into()));
        }
        if self.shape.iter().any(|&n| n < 32) {
            return Err(SynthError::SpecInvalid(format!(
                "every axis must be at least 32 voxels, got {:?}",
                self.shape
            )));
        }
        if self.spacing.len() != self.shape.len() || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(SynthError::SpecInvalid("spacing must be positive, one per axis".into()));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(SynthError::SpecInvalid("sigma must be positive".into()));
        }
        self.id_geometry.validate("ID")?;
        self.ood_geometry.validate("OOD")?;
        if ranges_overlap(self.id_geometry.target_offset, self.ood_geometry.target_offset) {
            return Err(SynthError::SpecInvalid(
                "ID and OOD target location ranges must be disjoint".into(),
            ));
        }
        Ok(())
    }
}

fn ranges_overlap(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

/// Generates `n_id` ID samples (with dose) followed by `n_ood` OOD samples (without).
pub fn generate(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let jobs: Vec<(Family, usize)> = (0..spec.n_id)
        .map(|i| (Family::Id, i))
        .chain((0..spec.n_ood).map(|i| (Family::Ood, i)))
        .collect();
    jobs.par_iter()
        .map(|&(family, index)| generate_sample(spec, family, index))
        .collect()
}

fn sample_rng(seed: u64, family: Family, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = match family {
        Family::Id => 1u64,
        Family::Ood => 2u64,
    };
    rng.set_stream((tag << 32) | index as u64);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

/// Placement of one geometric ball or ellipsoid in voxel coordinates.
#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn ball(center: [f64; 3], r: f64) -> Self {
        Self {
            center,
            semi: [r; 3],
        }
    }

    /// Normalized radius of `p`; ≤ 1 inside.
    fn rho(&self, p: [f64; 3], active: &[bool; 3]) -> f64 {
        (0..3)
            .filter(|&a| active[a])
            .map(|a| ((p[a] - self.center[a]) / self.semi[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Geometry helper mapping an N-d grid onto padded 3-d coordinates.
struct Frame {
    shape: Vec<usize>,
    /// Which of the padded (depth, row, col) axes exist.
    active: [bool; 3],
    half: [f64; 3],
}

impl Frame {
    fn new(shape: &[usize]) -> Self {
        let mut active = [true; 3];
        let mut half = [0.0; 3];
        let off = 3 - shape.len();
        for a in 0..off {
            active[a] = false;
        }
        for (i, &n) in shape.iter().enumerate() {
            half[i + off] = n as f64 / 2.0;
        }
        Self {
            shape: shape.to_vec(),
            active,
            half,
        }
    }

    fn point(&self, c: &[usize]) -> [f64; 3] {
        let off = 3 - c.len();
        let mut p = [0.0; 3];
        for (i, &ci) in c.iter().enumerate() {
            p[i + off] = ci as f64 + 0.5;
        }
        p
    }

    fn mask(&self, f: impl Fn([f64; 3]) -> bool) -> Mask {
        Mask::from_fn(&self.shape, |c| f(self.point(c))).expect("frame shape is valid")
    }
}

const BODY_INTENSITY: f64 = 0.35;
const BONE_INTENSITY: f64 = 0.85;
const AIR_INTENSITY: f64 = 0.05;
const MAX_PLACEMENT_ATTEMPTS: usize = 64;

fn generate_sample(spec: &DatasetSpec, family: Family, index: usize) -> Result<Sample> {
    let mut rng = sample_rng(spec.seed, family, index);
    let frame = Frame::new(&spec.shape);
    let geom = match family {
        Family::Id => &spec.id_geometry,
        Family::Ood => &spec.ood_geometry,
    };
    // Atypicality in [0, 1): pushes an ID patient towards the edge of its family.
    let atyp = match family {
        Family::Id => rng.random::<f64>(),
        Family::Ood => 1.0,
    };
    let id = match family {
        Family::Id => format!("id_{index:03}"),
        Family::Ood => format!("ood_{index:03}"),
    };

    let center = [frame.half[0], frame.half[1], frame.half[2]];
    let jitter = |rng: &mut ChaCha8Rng, h: f64| rng.random_range(-0.04..0.04) * h;
    let mut body_center = center;
    for a in 0..3 {
        if frame.active[a] {
            body_center[a] += jitter(&mut rng, frame.half[a]);
        }
    }
    let (rows_lo, rows_hi) = geom.body_rows;
    let (cols_lo, cols_hi) = geom.body_cols;
    let mut semi = [0.0; 3];
    let span = |r: (f64, f64), t: f64| r.0 + (r.1 - r.0) * t;
    let elong = match family {
        Family::Id => atyp,
        Family::Ood => rng.random(),
    };
    semi[1] = frame.half[1] * span((rows_lo, rows_hi), 0.5 * elong + 0.5 * rng.random::<f64>());
    semi[2] = frame.half[2] * span((cols_lo, cols_hi), 1.0 - 0.5 * elong - 0.5 * rng.random::<f64>());
    semi[0] = if frame.active[0] {
        frame.half[0] * span((cols_lo, cols_hi), rng.random())
    } else {
        1.0
    };
    let body_shape = Ellipsoid {
        center: body_center,
        semi,
    };
    let body = frame.mask(|p| body_shape.rho(p, &frame.active) <= 1.0);
    if body.count() == 0 {
        return Err(SynthError::SpecInvalid("body is empty".into()));
    }

    // Low-frequency texture.
    let waves: Vec<([f64; 3], f64)> = (0..4)
        .map(|_| {
            let mut k = [0.0; 3];
            for (a, ka) in k.iter_mut().enumerate() {
                if frame.active[a] {
                    let wavelength = rng.random_range(16.0..40.0);
                    *ka = std::f64::consts::TAU / wavelength * if rng.random() { 1.0 } else { -1.0 };
                }
            }
            (k, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let texture_amp = 0.03 + 0.05 * atyp;
    let bone_inner = rng.random_range(0.78..0.84);
    let bone_outer = bone_inner + rng.random_range(0.06..0.09);

    // Targets and OARs; resample placement until the dose field stays smooth at the body edge.
    let scale = frame.half[1] / 32.0;
    let mut best: Option<(f64, Mask, Mask, Vec<Oar>, Volume, [f64; 3], f64)> = None;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let offset_t = match family {
            Family::Id => 0.3 * rng.random::<f64>() + 0.7 * atyp,
            Family::Ood => rng.random(),
        };
        let dy = span(geom.target_offset, offset_t) * frame.half[1];
        let mut tc = body_center;
        tc[1] += dy;
        tc[2] += rng.random_range(-0.06..0.06) * frame.half[2];
        if frame.active[0] {
            tc[0] += rng.random_range(-0.06..0.06) * frame.half[0];
        }
        let r_high = rng.random_range(2.0..3.0) * scale;
        let r_low = r_high + rng.random_range(2.0..3.0) * scale;
        let hi_shape = Ellipsoid::ball(tc, r_high);
        let lo_shape = Ellipsoid::ball(tc, r_low);
        let tv_high = frame
            .mask(|p| hi_shape.rho(p, &frame.active) <= 1.0)
            .and(&body)?;
        let tv_low = frame
            .mask(|p| lo_shape.rho(p, &frame.active) <= 1.0)
            .and(&body)?
            .or(&tv_high)?;
        if tv_high.count() == 0 {
            continue;
        }
        let gap = r_low + rng.random_range(1.5..3.0) * scale;
        let oar_r = rng.random_range(2.5..3.5) * scale;
        let oar_centers = [
            {
                let mut c = tc;
                c[1] += gap + oar_r;
                c
            },
            {
                let mut c = tc;
                c[2] -= gap + oar_r;
                c
            },
            {
                let mut c = tc;
                c[2] += gap + oar_r;
                c
            },
        ];
        let oars: Vec<Oar> = OAR_NAMES
            .iter()
            .zip(oar_centers)
            .map(|(name, c)| {
                let e = Ellipsoid::ball(c, oar_r);
                Ok(Oar {
                    name: name.to_string(),
                    mask: frame.mask(|p| e.rho(p, &frame.active) <= 1.0).and(&body)?,
                })
            })
            .collect::<Result<_>>()?;
        let dose = dose_field(&body, &tv_high, &tv_low, &Prescriptions::default(), &spec.spacing, spec.sigma)?;
        let step = max_adjacent_step(&dose);
        let limit = TV_HIGH_DOSE * min_spacing(&spec.spacing) / spec.sigma;
        let better = best.as_ref().is_none_or(|b| step < b.0);
        if better {
            best = Some((step, tv_high, tv_low, oars, dose, tc, r_low));
        }
        if step <= limit {
            break;
        }
    }
    let (_, tv_high, tv_low, oars, dose, tc, r_low) =
        best.ok_or_else(|| SynthError::EmptyTarget(id.clone()))?;

    let n_cav = match family {
        Family::Id => ((atyp * (geom.cavities.1 as f64 + 1.0)).floor() as usize)
            .clamp(geom.cavities.0, geom.cavities.1),
        Family::Ood => rng.random_range(geom.cavities.0..=geom.cavities.1),
    };
    // ID cavities sit just outside tv_low, inside the dose fall-off (airway-like);
    // OOD cavities reach into the target itself.
    let cavities: Vec<Ellipsoid> = (0..n_cav)
        .map(|_| {
            let r = uniform(&mut rng, geom.cavity_radius);
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let d = match family {
                Family::Id => r_low + r + rng.random_range(0.5..2.0) * scale,
                Family::Ood => rng.random_range(0.0..r_low + r),
            };
            let mut c = tc;
            c[1] += d * ang.sin();
            c[2] += d * ang.cos();
            if frame.active[0] {
                c[0] += semi[0] * rng.random_range(-0.4..0.4);
            }
            Ellipsoid::ball(c, r)
        })
        .collect();

    let mut ct_data = Vec::with_capacity(body.len());
    let oar_bias = [0.10f64, -0.06, -0.06];
    let mut i = 0;
    for_each_coord(&spec.shape, |c| {
        let v = if body.data()[i] == 0 {
            0.0
        } else {
            let p = frame.point(c);
            let rho = body_shape.rho(p, &frame.active);
            let tex: f64 = waves
                .iter()
                .map(|(k, ph)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin())
                .sum::<f64>()
                / waves.len() as f64;
            let mut v = if (bone_inner..=bone_outer).contains(&rho) {
                BONE_INTENSITY
            } else {
                BODY_INTENSITY
            };
            for (o, b) in oars.iter().zip(oar_bias) {
                if o.mask.data()[i] != 0 {
                    v += b;
                }
            }
            v += texture_amp * tex;
            if cavities.iter().any(|e| e.rho(p, &frame.active) <= 1.0) {
                v = AIR_INTENSITY;
            }
            v.clamp(0.0, 1.0)
        };
        ct_data.push(v as f32);
        i += 1;
    });
    let ct = Volume::new(spec.shape.clone(), ct_data, spec.spacing.clone())?;

    Ok(Sample {
        id,
        family,
        ct,
        body,
        tv_high,
        tv_low,
        oars,
        prescriptions: Prescriptions::default(),
        dose: (family == Family::Id).then_some(dose),
    })
}

fn min_spacing(spacing: &[f64]) -> f64 {
    spacing.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Largest absolute difference between axis-adjacent voxels.
pub fn max_adjacent_step(v: &Volume) -> f64 {
    let shape = v.shape();
    let st = crate::grid::strides(shape);
    let d = v.data();
    let mut worst = 0.0f64;
    let mut i = 0;
    for_each_coord(shape, |c| {
        for a in 0..shape.len() {
            if c[a] + 1 < shape[a] {
                worst = worst.max((d[i] as f64 - d[i + st[a]] as f64).abs());
            }
        }
        i += 1;
    });
    worst
}

/// Squared physical distance from every voxel to the nearest voxel of `target`.
fn squared_distance_map(target: &Mask, spacing: &[f64]) -> Vec<f64> {
    let shape = target.shape();
    let mut pts: Vec<Vec<f64>> = Vec::new();
    let mut i = 0;
    for_each_coord(shape, |c| {
        if target.data()[i] != 0 {
            pts.push(c.iter().zip(spacing).map(|(&x, &s)| x as f64 * s).collect());
        }
        i += 1;
    });
    let mut out = Vec::with_capacity(target.len());
    for_each_coord(shape, |c| {
        let mut best = f64::INFINITY;
        for q in &pts {
            let d2: f64 = c
                .iter()
                .zip(spacing)
                .zip(q)
                .map(|((&x, &s), &qx)| (x as f64 * s - qx).powi(2))
                .sum();
            if d2 < best {
                best = d2;
                if best == 0.0 {
                    break;
                }
            }
        }
        out.push(best);
    });
    out
}

fn dose_field(
    body: &Mask,
    tv_high: &Mask,
    tv_low: &Mask,
    rx: &Prescriptions,
    spacing: &[f64],
    sigma: f64,
) -> Result<Volume> {
    let targets = [(tv_high, rx.tv_high), (tv_low, rx.tv_low)];
    let maps: Vec<(Vec<f64>, f64)> = targets
        .iter()
        .map(|(m, p)| (squared_distance_map(m, spacing), *p))
        .collect();
    let two_s2 = 2.0 * sigma * sigma;
    let data = (0..body.len())
        .map(|i| {
            if body.data()[i] == 0 {
                return 0.0;
            }
            maps.iter()
                .map(|(d2, p)| p * (-d2[i] / two_s2).exp())
                .fold(0.0f64, f64::max) as f32
        })
        .collect();
    Ok(Volume::new(body.shape().to_vec(), data, spacing.to_vec())?)
}

/// Dose as the largest prescription-weighted Gaussian of the distance to each
/// target, zero outside the body.
pub fn analytic_dose(s: &Sample, sigma: f64) -> Result<Volume> {
    if s.tv_high.count() == 0 || s.tv_low.count() == 0 {
        return Err(SynthError::EmptyTarget(s.id.clone()));
    }
    dose_field(&s.body, &s.tv_high, &s.tv_low, &s.prescriptions, s.ct.spacing(), sigma)
}

/// Vertical centroid offset of the high-dose target relative to the body
/// centroid, as a fraction of the half-height.
pub fn target_offset(s: &Sample) -> f64 {
    let row_axis = s.ct.ndim() - 2;
    let centroid = |m: &Mask| {
        let mut sum = 0.0;
        let mut n = 0.0;
        let mut i = 0;
        for_each_coord(m.shape(), |c| {
            if m.data()[i] != 0 {
                sum += c[row_axis] as f64;
                n += 1.0;
            }
            i += 1;
        });
        sum / n
    };
    (centroid(&s.tv_high) - centroid(&s.body)) / (s.ct.shape()[row_axis] as f64 / 2.0)
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleMeta {
    id: String,
    family: Family,
    prescriptions: Prescriptions,
    spacing: Vec<f64>,
    oars: Vec<String>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SynthError {
    SynthError::BadSample {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Writes one sample as a directory of `UQT1` tensors plus `meta.json`.
pub fn save_sample(dir: &Path, s: &Sample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    tensor_io::write_volume(&dir.join("ct.uqt"), &s.ct, "ct")?;
    tensor_io::write_mask(&dir.join("body.uqt"), &s.body, "mask")?;
    tensor_io::write_mask(&dir.join("tv_high.uqt"), &s.tv_high, "mask")?;
    tensor_io::write_mask(&dir.join("tv_low.uqt"), &s.tv_low, "mask")?;
    for o in &s.oars {
        tensor_io::write_mask(&dir.join(format!("oar_{}.uqt", o.name)), &o.mask, "mask")?;
    }
    if let Some(d) = &s.dose {
        tensor_io::write_volume(&dir.join("dose.uqt"), d, "dose")?;
    }
    let meta = SampleMeta {
        id: s.id.clone(),
        family: s.family,
        prescriptions: s.prescriptions,
        spacing: s.ct.spacing().to_vec(),
        oars: s.oars.iter().map(|o| o.name.clone()).collect(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    let path = dir.join("meta.json");
    fs::write(&path, json).map_err(|e| io_err(&path, e))
}

pub fn load_sample(dir: &Path) -> Result<Sample> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let meta: SampleMeta = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
    let ct = tensor_io::read_volume(&dir.join("ct.uqt"))?.with_spacing(meta.spacing.clone())?;
    let dose_path = dir.join("dose.uqt");
    let dose = if dose_path.exists() {
        Some(tensor_io::read_volume(&dose_path)?.with_spacing(meta.spacing.clone())?)
    } else {
        None
    };
    let oars = meta
        .oars
        .iter()
        .map(|name| {
            Ok(Oar {
                name: name.clone(),
                mask: tensor_io::read_mask(&dir.join(format!("oar_{name}.uqt")))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Sample {
        id: meta.id,
        family: meta.family,
        ct,
        body: tensor_io::read_mask(&dir.join("body.uqt"))?,
        tv_high: tensor_io::read_mask(&dir.join("tv_high.uqt"))?,
        tv_low: tensor_io::read_mask(&dir.join("tv_low.uqt"))?,
        oars,
        prescriptions: meta.prescriptions,
        dose,
    })
}

/// Writes every sample into `<dir>/<id>/`.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    samples.iter().try_for_each(|s| save_sample(&dir.join(&s.id), s))
}

/// Loads every sample directory under `dir`, ID family first, each family sorted by id.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let mut dirs: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    let mut samples = dirs.iter().map(|d| load_sample(d)).collect::<Result<Vec<_>>>()?;
    samples.sort_by(|a, b| (a.family, &a.id).cmp(&(b.family, &b.id)));
    if samples.is_empty() {
        return Err(io_err(dir, "no sample directories found"));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{extract_patch, strides};

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            n_id: 12,
            n_ood: 3,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        let spec = small_spec();
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = DatasetSpec { seed: 7, ..small_spec() };
        assert_ne!(generate(&spec).unwrap()[0].ct, generate(&other).unwrap()[0].ct);
    }

    #[test]
    fn default_dataset_sizes() {
        let samples = generate(&DatasetSpec::default()).unwrap();
        assert_eq!(samples.len(), 70);
        let with_dose = samples.iter().filter(|s| s.dose.is_some()).count();
        assert_eq!(with_dose, 60);
        assert!(samples[..60].iter().all(|s| s.family == Family::Id));
        assert!(samples[60..].iter().all(|s| s.family == Family::Ood && s.dose.is_none()));

        let spec = DatasetSpec::default();
        let limit = TV_HIGH_DOSE / spec.sigma;
        let (mut id_max, mut ood_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for s in &samples {
            assert!(s.tv_high.is_subset_of(&s.tv_low), "{}", s.id);
            assert!(s.tv_low.is_subset_of(&s.body), "{}", s.id);
            assert!(s.oars.len() >= 3);
            assert!(s.oars.iter().all(|o| o.mask.is_subset_of(&s.body) && o.mask.count() > 0));
            assert!(s.ct.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(s.prescriptions, Prescriptions::default());
            let off = target_offset(s);
            match s.family {
                Family::Id => id_max = id_max.max(off),
                Family::Ood => ood_min = ood_min.min(off),
            }
            if let Some(d) = &s.dose {
                for (i, &b) in s.body.data().iter().enumerate() {
                    if b == 0 {
                        assert_eq!(d.data()[i], 0.0);
                    }
                    if s.tv_high.data()[i] != 0 {
                        assert!(d.data()[i] as f64 >= 0.99 * TV_HIGH_DOSE);
                    }
                }
                let step = max_adjacent_step(d);
                assert!(step <= limit, "{}: step {step} > {limit}", s.id);
            }
        }
        assert!(id_max < ood_min, "ID offsets reach {id_max}, OOD start at {ood_min}");
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            DatasetSpec { n_id: 11, ..small_spec() },
            DatasetSpec { shape: vec![31, 64], ..small_spec() },
            DatasetSpec { shape: vec![64], spacing: vec![1.0], ..small_spec() },
            DatasetSpec { sigma: 0.0, ..small_spec() },
            DatasetSpec {
                ood_geometry: FamilyGeometry {
                    target_offset: (-0.1, 0.2),
                    ..FamilyGeometry::out_of_distribution()
                },
                ..small_spec()
            },
        ] {
            assert!(matches!(generate(&spec), Err(SynthError::SpecInvalid(_))));
        }
    }

    #[test]
    fn analytic_dose_examples() {
        let s = &generate(&small_spec()).unwrap()[0];
        let d = analytic_dose(s, 6.0).unwrap();
        assert_eq!(Some(&d), s.dose.as_ref());
        for i in 0..d.len() {
            if s.tv_high.data()[i] != 0 {
                assert_eq!(d.data()[i], 70.0);
            }
            if s.body.data()[i] == 0 {
                assert_eq!(d.data()[i], 0.0);
            }
        }
        // Walk down a column from the target: dose never increases while inside the body.
        let (lo, hi) = s.tv_high.bounding_box().unwrap();
        let col = (lo[1] + hi[1]) / 2;
        let mut prev = f32::INFINITY;
        for row in hi[0]..s.ct.shape()[0] {
            if !s.body.get(&[row, col]) {
                break;
            }
            let v = d.get(&[row, col]);
            assert!(v <= prev);
            prev = v;
        }
        let mut empty = s.clone();
        empty.tv_high = Mask::zeros(s.ct.shape());
        assert!(matches!(analytic_dose(&empty, 6.0), Err(SynthError::EmptyTarget(_))));
    }

    #[test]
    fn three_d_generation() {
        let spec = DatasetSpec {
            n_id: 12,
            n_ood: 1,
            shape: vec![32, 32, 32],
            spacing: vec![2.0, 1.0, 1.0],
            sigma: 3.0,
            ..DatasetSpec::default()
        };
        let samples = generate(&spec).unwrap();
        let s = &samples[0];
        assert_eq!(s.ct.shape(), &[32, 32, 32]);
        assert!(s.tv_high.is_subset_of(&s.tv_low) && s.tv_low.is_subset_of(&s.body));
        assert_eq!(s.input_channels().len(), 6);
    }

    #[test]
    fn extract_patch_crops_all_fields_identically() {
        let s = &generate(&small_spec()).unwrap()[0];
        let full = extract_patch(s, &[32, 32], &[64, 64]).unwrap();
        assert_eq!(full.origin, vec![0, 0]);
        assert_eq!(full.ct(), &s.ct);
        assert_eq!(full.dose.as_ref(), s.dose.as_ref());

        let p = extract_patch(s, &[70, -3], &[32, 16]).unwrap();
        assert_eq!(p.origin, vec![32, 0]);
        let st = strides(&[32, 16]);
        for r in 0..32 {
            for c in 0..16 {
                let i = r * st[0] + c;
                assert_eq!(p.ct().data()[i], s.ct.get(&[32 + r, c]));
                assert_eq!(p.dose.as_ref().unwrap().data()[i], s.dose.as_ref().unwrap().get(&[32 + r, c]));
                assert_eq!(p.body.data()[i] != 0, s.body.get(&[32 + r, c]));
                assert_eq!(p.inputs[2].data()[i], s.input_channels()[2].get(&[32 + r, c]));
            }
        }
        assert!(matches!(
            extract_patch(s, &[0, 0], &[65, 4]),
            Err(GridError::PatchTooLarge { .. })
        ));
    }

    #[test]
    fn disk_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate(&small_spec()).unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), samples);
    }
}
