//! Scalar fields, binary masks, patches and the masked error primitive.
//!
//! Fields are stored row-major as flat `f32` buffers with a 2-D or 3-D shape.
//! Reductions accumulate in `f64`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::Sample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("mask has no nonzero voxel")]
    EmptyMask,
    #[error("patch size {size:?} exceeds volume shape {shape:?}")]
    PatchTooLarge { size: Vec<usize>, shape: Vec<usize> },
    #[error("axis {0} is not a spatial axis")]
    BadAxis(usize),
    #[error("invalid field: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, GridError>;

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if !(2..=3).contains(&shape.len()) {
        return Err(GridError::Invalid(format!(
            "expected 2 or 3 dimensions, got {}",
            shape.len()
        )));
    }
    if shape.iter().any(|&n| n == 0) {
        return Err(GridError::Invalid(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

/// N-dimensional scalar field (CT, dose, reconstruction).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    shape: Vec<usize>,
    data: Vec<f32>,
    spacing: Vec<f64>,
}

impl Volume {
    pub fn new(shape: Vec<usize>, data: Vec<f32>, spacing: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(GridError::Invalid(format!(
                "shape {shape:?} holds {n} voxels but data has {}",
                data.len()
            )));
        }
        if spacing.len() != shape.len() || spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(GridError::Invalid(format!("bad spacing {spacing:?}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GridError::Invalid("non-finite voxel value".into()));
        }
        Ok(Self { shape, data, spacing })
    }

    /// Unit-spacing field.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let spacing = vec![1.0; shape.len()];
        Self::new(shape, data, spacing)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape.to_vec(), vec![value; n]).expect("valid shape and finite fill value")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn with_spacing(mut self, spacing: Vec<f64>) -> Result<Self> {
        if spacing.len() != self.shape.len() || spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(GridError::Invalid(format!("bad spacing {spacing:?}")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn get(&self, coord: &[usize]) -> f32 {
        self.data[flat_index(&self.shape, coord)]
    }

    /// Elementwise map; the result must stay finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
            self.spacing.clone(),
        )
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Binary structure mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(GridError::Invalid(format!(
                "shape {shape:?} holds {n} voxels but mask has {}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(GridError::Invalid("mask values must be 0 or 1".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape.to_vec(), vec![0; shape.iter().product()]).expect("valid shape")
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::new(shape.to_vec(), vec![1; shape.iter().product()]).expect("valid shape")
    }

    /// Builds a mask by evaluating `f` on every voxel coordinate.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.iter().product());
        for_each_coord(shape, |c| data.push(f(c) as u8));
        Self::new(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn get(&self, coord: &[usize]) -> bool {
        self.data[flat_index(&self.shape, coord)] != 0
    }

    /// Voxelwise `self ⊆ other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.shape != other.shape {
            return Err(GridError::ShapeMismatch(self.shape.clone(), other.shape.clone()));
        }
        Mask::new(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(a, b)| a & b).collect(),
        )
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        if self.shape != other.shape {
            return Err(GridError::ShapeMismatch(self.shape.clone(), other.shape.clone()));
        }
        Mask::new(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect(),
        )
    }

    /// Per-axis inclusive `(min, max)` of the nonzero voxels, `None` when empty.
    pub fn bounding_box(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        let nd = self.shape.len();
        let mut lo = vec![usize::MAX; nd];
        let mut hi = vec![0; nd];
        let mut any = false;
        let mut i = 0;
        for_each_coord(&self.shape, |c| {
            if self.data[i] != 0 {
                any = true;
                for a in 0..nd {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
            i += 1;
        });
        any.then_some((lo, hi))
    }
}

pub(crate) fn flat_index(shape: &[usize], coord: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), coord.len());
    coord
        .iter()
        .zip(shape)
        .fold(0, |acc, (&c, &n)| {
            debug_assert!(c < n);
            acc * n + c
        })
}

/// Calls `f` with every coordinate of `shape` in row-major order.
pub fn for_each_coord(shape: &[usize], mut f: impl FnMut(&[usize])) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let mut c = vec![0usize; shape.len()];
    for _ in 0..n {
        f(&c);
        for a in (0..shape.len()).rev() {
            c[a] += 1;
            if c[a] < shape[a] {
                break;
            }
            c[a] = 0;
        }
    }
}

/// Mean squared difference of `a` and `b` over the voxels where `m` is set.
pub fn masked_mse(a: &Volume, b: &Volume, m: &Mask) -> Result<f64> {
    if a.shape != b.shape {
        return Err(GridError::ShapeMismatch(a.shape.clone(), b.shape.clone()));
    }
    if a.shape != m.shape {
        return Err(GridError::ShapeMismatch(a.shape.clone(), m.shape.clone()));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for ((&x, &y), &w) in a.data.iter().zip(&b.data).zip(&m.data) {
        if w != 0 {
            let d = x as f64 - y as f64;
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(GridError::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// A cropped, channel-first view of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub origin: Vec<usize>,
    pub size: Vec<usize>,
    /// Network input channels (CT first).
    pub inputs: Vec<Volume>,
    pub body: Mask,
    pub dose: Option<Volume>,
}

impl Patch {
    /// Builds a patch that spans a whole field set.
    pub fn whole(inputs: Vec<Volume>, body: Mask, dose: Option<Volume>) -> Result<Self> {
        let shape = body.shape().to_vec();
        for v in inputs.iter().chain(dose.iter()) {
            if v.shape() != shape.as_slice() {
                return Err(GridError::ShapeMismatch(v.shape().to_vec(), shape));
            }
        }
        Ok(Self {
            origin: vec![0; shape.len()],
            size: shape,
            inputs,
            body,
            dose,
        })
    }

    pub fn ct(&self) -> &Volume {
        &self.inputs[0]
    }

    pub fn channels(&self) -> usize {
        self.inputs.len()
    }
}

fn crop<T: Copy>(data: &[T], shape: &[usize], origin: &[usize], size: &[usize]) -> Vec<T> {
    let st = strides(shape);
    let mut out = Vec::with_capacity(size.iter().product());
    for_each_coord(size, |c| {
        let idx: usize = c
            .iter()
            .zip(origin)
            .zip(&st)
            .map(|((&ci, &o), &s)| (ci + o) * s)
            .sum();
        out.push(data[idx]);
    });
    out
}

pub fn crop_volume(v: &Volume, origin: &[usize], size: &[usize]) -> Result<Volume> {
    check_window(v.shape(), origin, size)?;
    Volume::new(
        size.to_vec(),
        crop(v.data(), v.shape(), origin, size),
        v.spacing().to_vec(),
    )
}

pub fn crop_mask(m: &Mask, origin: &[usize], size: &[usize]) -> Result<Mask> {
    check_window(m.shape(), origin, size)?;
    Mask::new(size.to_vec(), crop(m.data(), m.shape(), origin, size))
}

fn check_window(shape: &[usize], origin: &[usize], size: &[usize]) -> Result<()> {
    if origin.len() != shape.len() || size.len() != shape.len() {
        return Err(GridError::ShapeMismatch(size.to_vec(), shape.to_vec()));
    }
    if origin
        .iter()
        .zip(size)
        .zip(shape)
        .any(|((&o, &s), &n)| o + s > n)
    {
        return Err(GridError::PatchTooLarge {
            size: size.to_vec(),
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

/// Origin of a `size` window centred on `center`, clamped inside `shape`.
pub fn clamped_origin(shape: &[usize], center: &[i64], size: &[usize]) -> Result<Vec<usize>> {
    if center.len() != shape.len() || size.len() != shape.len() {
        return Err(GridError::ShapeMismatch(size.to_vec(), shape.to_vec()));
    }
    if size.iter().zip(shape).any(|(&s, &n)| s > n || s == 0) {
        return Err(GridError::PatchTooLarge {
            size: size.to_vec(),
            shape: shape.to_vec(),
        });
    }
    Ok(center
        .iter()
        .zip(size)
        .zip(shape)
        .map(|((&c, &s), &n)| (c - (s / 2) as i64).clamp(0, (n - s) as i64) as usize)
        .collect())
}

/// Crops every input channel, the body mask and the dose of `s` to the same window.
pub fn extract_patch(s: &Sample, center: &[i64], size: &[usize]) -> Result<Patch> {
    let shape = s.ct.shape().to_vec();
    let origin = clamped_origin(&shape, center, size)?;
    let inputs = s
        .input_channels()
        .iter()
        .map(|v| crop_volume(v, &origin, size))
        .collect::<Result<Vec<_>>>()?;
    let body = crop_mask(&s.body, &origin, size)?;
    let dose = s
        .dose
        .as_ref()
        .map(|d| crop_volume(d, &origin, size))
        .transpose()?;
    Ok(Patch {
        origin,
        size: size.to_vec(),
        inputs,
        body,
        dose,
    })
}

fn flip_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    if axes.is_empty() {
        return data.to_vec();
    }
    let st = strides(shape);
    let mut flipped = vec![false; shape.len()];
    for &a in axes {
        flipped[a] = !flipped[a];
    }
    let mut out = Vec::with_capacity(data.len());
    for_each_coord(shape, |c| {
        let src: usize = (0..shape.len())
            .map(|a| {
                let ci = if flipped[a] { shape[a] - 1 - c[a] } else { c[a] };
                ci * st[a]
            })
            .sum();
        out.push(data[src]);
    });
    out
}

/// Mirrors every channel of `p` along each axis in `axes`.
///
/// Listing an axis twice cancels it.
pub fn flip(p: &Patch, axes: &[usize]) -> Result<Patch> {
    let nd = p.size.len();
    if let Some(&bad) = axes.iter().find(|&&a| a >= nd) {
        return Err(GridError::BadAxis(bad));
    }
    let fv = |v: &Volume| {
        Volume::new(
            v.shape().to_vec(),
            flip_data(v.data(), v.shape(), axes),
            v.spacing().to_vec(),
        )
    };
    Ok(Patch {
        origin: p.origin.clone(),
        size: p.size.clone(),
        inputs: p.inputs.iter().map(fv).collect::<Result<_>>()?,
        body: Mask::new(p.body.shape().to_vec(), flip_data(p.body.data(), p.body.shape(), axes))?,
        dose: p.dose.as_ref().map(fv).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(data: &[f32]) -> Volume {
        Volume::from_vec(vec![1, data.len()], data.to_vec()).unwrap()
    }

    fn mask(data: &[u8]) -> Mask {
        Mask::new(vec![1, data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn masked_mse_examples() {
        let a = vol(&[1.0, 3.0]);
        assert_eq!(masked_mse(&a, &a, &mask(&[1, 0])).unwrap(), 0.0);
        assert_eq!(masked_mse(&a, &vol(&[0.0, 1.0]), &mask(&[1, 1])).unwrap(), 2.5);
        let a = vol(&[1.0, 3.0, 9.0]);
        let b = vol(&[0.0, 1.0, 0.0]);
        assert_eq!(masked_mse(&a, &b, &mask(&[1, 1, 0])).unwrap(), 2.5);
    }

    #[test]
    fn masked_mse_errors() {
        let a = vol(&[1.0, 3.0]);
        assert_eq!(masked_mse(&a, &a, &mask(&[0, 0])), Err(GridError::EmptyMask));
        assert!(matches!(
            masked_mse(&a, &vol(&[1.0, 2.0, 3.0]), &mask(&[1, 1])),
            Err(GridError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn volume_rejects_bad_input() {
        assert!(Volume::from_vec(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Volume::from_vec(vec![1, 2], vec![0.0, f32::NAN]).is_err());
        assert!(Volume::new(vec![1, 2], vec![0.0; 2], vec![1.0, 0.0]).is_err());
        assert!(Mask::new(vec![1, 2], vec![0, 2]).is_err());
        assert!(Volume::from_vec(vec![4], vec![0.0; 4]).is_err());
    }

    #[test]
    fn clamping_rule() {
        let shape = [8, 8];
        assert_eq!(clamped_origin(&shape, &[4, 4], &[8, 8]).unwrap(), vec![0, 0]);
        assert_eq!(clamped_origin(&shape, &[0, 0], &[4, 4]).unwrap(), vec![0, 0]);
        assert_eq!(clamped_origin(&shape, &[7, 7], &[4, 4]).unwrap(), vec![4, 4]);
        assert!(matches!(
            clamped_origin(&shape, &[4, 4], &[9, 4]),
            Err(GridError::PatchTooLarge { .. })
        ));
    }

    fn ramp_patch(shape: &[usize]) -> Patch {
        let n: usize = shape.iter().product();
        let ct = Volume::from_vec(shape.to_vec(), (0..n).map(|i| i as f32).collect()).unwrap();
        let other = Volume::from_vec(shape.to_vec(), (0..n).map(|i| (i * 7 % 5) as f32).collect())
            .unwrap();
        let body = Mask::new(shape.to_vec(), (0..n).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
        Patch::whole(vec![ct, other.clone()], body, Some(other)).unwrap()
    }

    #[test]
    fn flip_examples() {
        let p = ramp_patch(&[2, 1]);
        assert_eq!(flip(&p, &[]).unwrap(), p);
        assert_eq!(flip(&p, &[0]).unwrap().ct().data(), &[1.0, 0.0]);
        let p = ramp_patch(&[4, 6]);
        assert_eq!(flip(&flip(&p, &[0]).unwrap(), &[0]).unwrap(), p);
        assert_eq!(flip(&p, &[2]), Err(GridError::BadAxis(2)));
        let p3 = ramp_patch(&[2, 3, 4]);
        let f = flip(&p3, &[0, 2]).unwrap();
        assert_eq!(f.ct().get(&[0, 0, 0]), p3.ct().get(&[1, 0, 3]));
        assert_eq!(f.body.get(&[1, 2, 0]), p3.body.get(&[0, 2, 3]));
    }

    proptest! {
        #[test]
        fn masked_mse_properties(
            vals in prop::collection::vec((-10.0f32..10.0, -10.0f32..10.0, 0u8..2, -50.0f32..50.0), 1..64)
        ) {
            let n = vals.len();
            let a = Volume::from_vec(vec![1, n], vals.iter().map(|v| v.0).collect()).unwrap();
            let b = Volume::from_vec(vec![1, n], vals.iter().map(|v| v.1).collect()).unwrap();
            let ones = Mask::ones(&[1, n]);
            let plain: f64 = vals.iter().map(|v| (v.0 as f64 - v.1 as f64).powi(2)).sum::<f64>() / n as f64;
            let full = masked_mse(&a, &b, &ones).unwrap();
            prop_assert!((full - plain).abs() <= 1e-6 * plain.max(1e-12));

            let m = Mask::new(vec![1, n], vals.iter().map(|v| v.2).collect()).unwrap();
            if m.count() > 0 {
                let ab = masked_mse(&a, &b, &m).unwrap();
                prop_assert_eq!(ab, masked_mse(&b, &a, &m).unwrap());
                let perturbed = Volume::from_vec(
                    vec![1, n],
                    vals.iter().map(|v| if v.2 == 0 { v.0 + v.3 } else { v.0 }).collect(),
                ).unwrap();
                prop_assert_eq!(ab, masked_mse(&perturbed, &b, &m).unwrap());
            }
        }

        #[test]
        fn centred_crop_commutes_with_flip(half in 2usize..6, inner in 1usize..4, axis in 0usize..2) {
            // Symmetric window: crop size and volume size share parity and the crop is centred.
            let n = 2 * half + 2 * inner;
            let shape = vec![n, n];
            let size = vec![2 * half, 2 * half];
            let p = ramp_patch(&shape);
            let origin = vec![inner, inner];
            let crop_then_flip = {
                let c = Patch {
                    origin: origin.clone(),
                    size: size.clone(),
                    inputs: p.inputs.iter().map(|v| crop_volume(v, &origin, &size).unwrap()).collect(),
                    body: crop_mask(&p.body, &origin, &size).unwrap(),
                    dose: p.dose.as_ref().map(|v| crop_volume(v, &origin, &size).unwrap()),
                };
                flip(&c, &[axis]).unwrap()
            };
            let f = flip(&p, &[axis]).unwrap();
            let flip_then_crop: Vec<f32> = crop_volume(&f.inputs[0], &origin, &size).unwrap().into_data();
            prop_assert_eq!(crop_then_flip.inputs[0].data(), flip_then_crop.as_slice());
            let body = crop_mask(&f.body, &origin, &size).unwrap();
            prop_assert_eq!(&crop_then_flip.body, &body);
        }
    }
}
