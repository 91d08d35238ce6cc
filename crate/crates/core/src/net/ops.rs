//! Convolution, upsampling and activation kernels with explicit backward passes.
//!
//! Tensors are channel-first flat buffers over padded 3-d spatial dims
//! `[depth, rows, cols]`; 2-d inputs use `depth == 1` and a kernel extent of
//! one along depth.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Sub};

/// Floating-point element type the network can run in.
pub trait Real:
    Copy
    + Send
    + Sync
    + Default
    + PartialOrd
    + Debug
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + AddAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` for an `m×k` by `k×n` product with
    /// arbitrary element strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: (&[Self], isize, isize),
                b: (&[Self], isize, isize),
                beta: Self,
                c: (&mut [Self], isize, isize),
            ) {
                assert!(a.1 >= 0 && a.2 >= 0 && b.1 >= 0 && b.2 >= 0 && c.1 >= 0 && c.2 >= 0);
                assert!(a.0.len() >= span(m, k, a.1, a.2), "gemm: A too short");
                assert!(b.0.len() >= span(k, n, b.1, b.2), "gemm: B too short");
                assert!(c.0.len() >= span(m, n, c.1, c.2), "gemm: C too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above keep every strided access inside the slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.0.as_ptr(),
                        a.1,
                        a.2,
                        b.0.as_ptr(),
                        b.1,
                        b.2,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1,
                        c.2,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

pub type Dims = [usize; 3];

pub fn numel(d: &Dims) -> usize {
    d[0] * d[1] * d[2]
}

/// Static description of one convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    /// Kernel extent along every active axis (1 or 3).
    pub k: usize,
    pub stride: usize,
    /// Spatial rank (2 or 3).
    pub ndim: usize,
}

impl ConvSpec {
    pub fn extents(&self) -> Dims {
        [if self.ndim == 3 { self.k } else { 1 }, self.k, self.k]
    }

    pub fn kernel_volume(&self) -> usize {
        numel(&self.extents())
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel_volume()
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.cout, self.cin];
        s.extend(std::iter::repeat_n(self.k, self.ndim));
        s
    }

    pub fn out_dims(&self, d: &Dims) -> Dims {
        let e = self.extents();
        let mut o = [0; 3];
        for a in 0..3 {
            let pad = (e[a] - 1) / 2;
            let s = if e[a] == 1 && d[a] == 1 { 1 } else { self.stride };
            o[a] = (d[a] + 2 * pad - e[a]) / s + 1;
        }
        o
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn axis_stride(&self, d: &Dims, a: usize) -> usize {
        if self.extents()[a] == 1 && d[a] == 1 {
            1
        } else {
            self.stride
        }
    }
}

/// Range of output positions `o` for which `o * stride + k - pad` lies in `0..n`.
fn valid_range(o_len: usize, n: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    // o * stride + k >= pad  and  o * stride + k < n + pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if n + pad > k {
        ((n + pad - k).div_ceil(stride)).min(o_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds `x` (`cin × in_dims`) into a `(cin·kvol) × out_numel` matrix.
pub fn im2col<T: Real>(spec: &ConvSpec, x: &[T], d: &Dims) -> Vec<T> {
    let e = spec.extents();
    let o = spec.out_dims(d);
    let pad = [(e[0] - 1) / 2, (e[1] - 1) / 2, (e[2] - 1) / 2];
    let st = [spec.axis_stride(d, 0), spec.axis_stride(d, 1), spec.axis_stride(d, 2)];
    let plane = d[1] * d[2];
    let mut col: Vec<T> = Vec::with_capacity(spec.cin * numel(&e) * numel(&o));
    for ci in 0..spec.cin {
        let xc = &x[ci * numel(d)..(ci + 1) * numel(d)];
        for kz in 0..e[0] {
            let (z0, z1) = valid_range(o[0], d[0], kz, pad[0], st[0]);
            for ky in 0..e[1] {
                let (y0, y1) = valid_range(o[1], d[1], ky, pad[1], st[1]);
                for kx in 0..e[2] {
                    let (x0, x1) = valid_range(o[2], d[2], kx, pad[2], st[2]);
                    for oz in 0..o[0] {
                        if oz < z0 || oz >= z1 {
                            col.resize(col.len() + o[1] * o[2], T::ZERO);
                            continue;
                        }
                        let iz = oz * st[0] + kz - pad[0];
                        for oy in 0..o[1] {
                            if oy < y0 || oy >= y1 {
                                col.resize(col.len() + o[2], T::ZERO);
                                continue;
                            }
                            let iy = oy * st[1] + ky - pad[1];
                            let src = &xc[iz * plane + iy * d[2]..][..d[2]];
                            col.resize(col.len() + x0, T::ZERO);
                            if st[2] == 1 {
                                let a = x0 + kx - pad[2];
                                col.extend_from_slice(&src[a..a + (x1 - x0)]);
                            } else {
                                col.extend((x0..x1).map(|ox| src[ox * st[2] + kx - pad[2]]));
                            }
                            col.resize(col.len() + (o[2] - x1), T::ZERO);
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters `col` back and adds it into `dx`.
pub fn col2im_add<T: Real>(spec: &ConvSpec, col: &[T], d: &Dims, dx: &mut [T]) {
    let e = spec.extents();
    let o = spec.out_dims(d);
    let p_out = numel(&o);
    let pad = [(e[0] - 1) / 2, (e[1] - 1) / 2, (e[2] - 1) / 2];
    let st = [spec.axis_stride(d, 0), spec.axis_stride(d, 1), spec.axis_stride(d, 2)];
    let plane = d[1] * d[2];
    let mut row = 0;
    for ci in 0..spec.cin {
        let xc = &mut dx[ci * numel(d)..(ci + 1) * numel(d)];
        for kz in 0..e[0] {
            let (z0, z1) = valid_range(o[0], d[0], kz, pad[0], st[0]);
            for ky in 0..e[1] {
                let (y0, y1) = valid_range(o[1], d[1], ky, pad[1], st[1]);
                for kx in 0..e[2] {
                    let (x0, x1) = valid_range(o[2], d[2], kx, pad[2], st[2]);
                    let src = &col[row * p_out..(row + 1) * p_out];
                    for oz in z0..z1 {
                        let iz = oz * st[0] + kz - pad[0];
                        for oy in y0..y1 {
                            let iy = oy * st[1] + ky - pad[1];
                            let dst = &mut xc[iz * plane + iy * d[2]..][..d[2]];
                            let srow = &src[(oz * o[1] + oy) * o[2]..][..o[2]];
                            if st[2] == 1 {
                                let a = x0 + kx - pad[2];
                                for (t, &g) in dst[a..a + (x1 - x0)].iter_mut().zip(&srow[x0..x1]) {
                                    *t += g;
                                }
                            } else {
                                for ox in x0..x1 {
                                    dst[ox * st[2] + kx - pad[2]] += srow[ox];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Forward convolution. Returns the pre-activation output and, for
/// non-pointwise layers, the unfolded input kept for the backward pass.
pub fn conv_forward<T: Real>(
    spec: &ConvSpec,
    w: &[T],
    b: &[T],
    x: &[T],
    d: &Dims,
) -> (Vec<T>, Option<Vec<T>>) {
    debug_assert_eq!(x.len(), spec.cin * numel(d));
    let o = spec.out_dims(d);
    let p = numel(&o);
    let kk = spec.fan_in();
    let mut out = vec![T::ZERO; spec.cout * p];
    for (co, chunk) in out.chunks_exact_mut(p).enumerate() {
        chunk.fill(b[co]);
    }
    let col = (!spec.is_pointwise()).then(|| im2col(spec, x, d));
    let bmat = col.as_deref().unwrap_or(x);
    T::gemm(
        spec.cout,
        kk,
        p,
        T::ONE,
        (w, kk as isize, 1),
        (bmat, p as isize, 1),
        T::ONE,
        (&mut out, p as isize, 1),
    );
    (out, col)
}

/// Backward convolution: accumulates weight and bias gradients and, when
/// `dx` is given, adds the input gradient into it.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    spec: &ConvSpec,
    w: &[T],
    x: &[T],
    col: Option<&[T]>,
    d: &Dims,
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    let o = spec.out_dims(d);
    let p = numel(&o);
    let kk = spec.fan_in();
    for (co, g) in dy.chunks_exact(p).enumerate() {
        let mut s = T::ZERO;
        for &v in g {
            s += v;
        }
        db[co] += s;
    }
    let bmat = col.unwrap_or(x);
    // dW += dY · colᵀ
    T::gemm(
        spec.cout,
        p,
        kk,
        T::ONE,
        (dy, p as isize, 1),
        (bmat, 1, p as isize),
        T::ONE,
        (dw, kk as isize, 1),
    );
    let Some(dx) = dx else { return };
    if spec.is_pointwise() {
        // dX += Wᵀ · dY
        T::gemm(
            kk,
            spec.cout,
            p,
            T::ONE,
            (w, 1, kk as isize),
            (dy, p as isize, 1),
            T::ONE,
            (dx, p as isize, 1),
        );
    } else {
        let mut dcol = vec![T::ZERO; kk * p];
        T::gemm(
            kk,
            spec.cout,
            p,
            T::ONE,
            (w, 1, kk as isize),
            (dy, p as isize, 1),
            T::ZERO,
            (&mut dcol, p as isize, 1),
        );
        col2im_add(spec, &dcol, d, dx);
    }
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::ZERO {
            *v = T::ZERO;
        }
    }
}

/// Zeroes `g` wherever the post-activation `y` is not positive.
pub fn relu_backward_inplace<T: Real>(y: &[T], g: &mut [T]) {
    for (gi, &yi) in g.iter_mut().zip(y) {
        if !(yi > T::ZERO) {
            *gi = T::ZERO;
        }
    }
}

/// Nearest-neighbour ×2 upsampling of `c` channels from `d` to `to`.
pub fn upsample_nearest<T: Real>(x: &[T], c: usize, d: &Dims, to: &Dims) -> Vec<T> {
    let f = [to[0] / d[0], to[1] / d[1], to[2] / d[2]];
    let mut out = vec![T::ZERO; c * numel(to)];
    for ch in 0..c {
        let src = &x[ch * numel(d)..(ch + 1) * numel(d)];
        let dst = &mut out[ch * numel(to)..(ch + 1) * numel(to)];
        for z in 0..to[0] {
            for y in 0..to[1] {
                let srow = &src[(z / f[0]) * d[1] * d[2] + (y / f[1]) * d[2]..][..d[2]];
                let drow = &mut dst[z * to[1] * to[2] + y * to[2]..][..to[2]];
                for (xx, v) in drow.iter_mut().enumerate() {
                    *v = srow[xx / f[2]];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest`]: sums each block of children into its parent.
pub fn upsample_nearest_backward<T: Real>(g: &[T], c: usize, d: &Dims, to: &Dims) -> Vec<T> {
    let f = [to[0] / d[0], to[1] / d[1], to[2] / d[2]];
    let mut out = vec![T::ZERO; c * numel(d)];
    for ch in 0..c {
        let src = &g[ch * numel(to)..(ch + 1) * numel(to)];
        let dst = &mut out[ch * numel(d)..(ch + 1) * numel(d)];
        for z in 0..to[0] {
            for y in 0..to[1] {
                let srow = &src[z * to[1] * to[2] + y * to[2]..][..to[2]];
                let drow = &mut dst[(z / f[0]) * d[1] * d[2] + (y / f[1]) * d[2]..][..d[2]];
                for (xx, &v) in srow.iter().enumerate() {
                    drow[xx / f[2]] += v;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(cin: usize, cout: usize, k: usize, stride: usize, ndim: usize) -> ConvSpec {
        ConvSpec {
            name: "t".into(),
            cin,
            cout,
            k,
            stride,
            ndim,
        }
    }

    /// Direct nested-loop convolution.
    fn naive_conv(s: &ConvSpec, w: &[f64], b: &[f64], x: &[f64], d: &Dims) -> Vec<f64> {
        let e = s.extents();
        let o = s.out_dims(d);
        let mut out = vec![0.0; s.cout * numel(&o)];
        for co in 0..s.cout {
            for oz in 0..o[0] {
                for oy in 0..o[1] {
                    for ox in 0..o[2] {
                        let mut acc = b[co];
                        for ci in 0..s.cin {
                            for kz in 0..e[0] {
                                for ky in 0..e[1] {
                                    for kx in 0..e[2] {
                                        let st = |a: usize| if e[a] == 1 && d[a] == 1 { 1 } else { s.stride };
                                        let iz = (oz * st(0) + kz) as isize - ((e[0] - 1) / 2) as isize;
                                        let iy = (oy * st(1) + ky) as isize - ((e[1] - 1) / 2) as isize;
                                        let ix = (ox * st(2) + kx) as isize - ((e[2] - 1) / 2) as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= d[0] || iy >= d[1] || ix >= d[2] {
                                            continue;
                                        }
                                        let wi = ((co * s.cin + ci) * e[0] + kz) * e[1] * e[2] + ky * e[2] + kx;
                                        acc += w[wi] * x[ci * numel(d) + iz * d[1] * d[2] + iy * d[2] + ix];
                                    }
                                }
                            }
                        }
                        out[co * numel(&o) + oz * o[1] * o[2] + oy * o[2] + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (s, d) in [
            (spec(3, 4, 3, 1, 2), [1, 6, 8]),
            (spec(2, 5, 3, 2, 2), [1, 8, 6]),
            (spec(4, 2, 1, 1, 2), [1, 4, 4]),
            (spec(2, 3, 3, 1, 3), [4, 4, 6]),
            (spec(2, 3, 3, 2, 3), [4, 6, 4]),
        ] {
            let w = rand_vec(&mut rng, s.cout * s.fan_in());
            let b = rand_vec(&mut rng, s.cout);
            let x = rand_vec(&mut rng, s.cin * numel(&d));
            let (y, _) = conv_forward(&s, &w, &b, &x, &d);
            let want = naive_conv(&s, &w, &b, &x, &d);
            assert_eq!(y.len(), want.len());
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dy, conv(x) - b> == <dx, x> and == <dw, w> for a linear layer.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (s, d) in [
            (spec(3, 4, 3, 1, 2), [1, 6, 8]),
            (spec(2, 5, 3, 2, 2), [1, 8, 6]),
            (spec(4, 2, 1, 1, 2), [1, 4, 4]),
            (spec(2, 3, 3, 2, 3), [4, 4, 4]),
        ] {
            let w = rand_vec(&mut rng, s.cout * s.fan_in());
            let zero_b = vec![0.0; s.cout];
            let x = rand_vec(&mut rng, s.cin * numel(&d));
            let (y, col) = conv_forward(&s, &w, &zero_b, &x, &d);
            let dy = rand_vec(&mut rng, y.len());
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; s.cout];
            let mut dx = vec![0.0; x.len()];
            conv_backward(&s, &w, &x, col.as_deref(), &d, &dy, &mut dw, &mut db, Some(&mut dx));
            let lhs: f64 = dy.iter().zip(&y).map(|(a, b)| a * b).sum();
            let via_x: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
            let via_w: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10 * lhs.abs().max(1.0));
            assert!((lhs - via_w).abs() < 1e-10 * lhs.abs().max(1.0));
            let sum_dy: f64 = dy.chunks(y.len() / s.cout).map(|c| c.iter().sum::<f64>()).sum();
            assert!((db.iter().sum::<f64>() - sum_dy).abs() < 1e-10);
        }
    }

    #[test]
    fn upsample_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (d, to) in [([1, 3, 4], [1, 6, 8]), ([2, 2, 3], [4, 4, 6])] {
            let x = rand_vec(&mut rng, 2 * numel(&d));
            let y = upsample_nearest(&x, 2, &d, &to);
            assert_eq!(y[0], x[0]);
            let g = rand_vec(&mut rng, y.len());
            let gx = upsample_nearest_backward(&g, 2, &d, &to);
            let lhs: f64 = g.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = gx.iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
