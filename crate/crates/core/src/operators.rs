//! Linear degradation operators with exact adjoints, and measurement synthesis.
//!
//! Images are flat vectors in planar layout: `index = (c * H + y) * W + x`.

use std::fmt;

use crate::error::{check_len, invalid, Result};
use crate::linalg::{axpy, Matrix};
use crate::rng::{seeded, standard_normal};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(invalid(format!(
                "image shape must be positive, got {height}x{width}x{channels}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
        })
    }

    pub fn gray(height: usize, width: usize) -> Self {
        Self::new(height, width, 1).expect("positive gray shape")
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Forward map `A` of a restoration task together with its adjoint.
pub trait LinearOperator<T: Scalar>: Send + Sync {
    fn in_shape(&self) -> ImageShape;
    fn out_shape(&self) -> ImageShape;
    /// `A x`; `x.len()` must equal `in_shape().len()`.
    fn apply(&self, x: &[T]) -> Vec<T>;
    /// `Aᵀ y`; `y.len()` must equal `out_shape().len()`.
    fn adjoint(&self, y: &[T]) -> Vec<T>;
    fn name(&self) -> String;

    /// `Aᵀ A x`
    fn normal(&self, x: &[T]) -> Vec<T> {
        self.adjoint(&self.apply(x))
    }
}

impl<T: Scalar> fmt::Debug for dyn LinearOperator<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({} -> {})", self.name(), self.in_shape(), self.out_shape())
    }
}

#[derive(Debug, Clone)]
pub struct Identity {
    shape: ImageShape,
}

impl Identity {
    pub fn new(shape: ImageShape) -> Self {
        Self { shape }
    }
}

impl<T: Scalar> LinearOperator<T> for Identity {
    fn in_shape(&self) -> ImageShape {
        self.shape
    }
    fn out_shape(&self) -> ImageShape {
        self.shape
    }
    fn apply(&self, x: &[T]) -> Vec<T> {
        x.to_vec()
    }
    fn adjoint(&self, y: &[T]) -> Vec<T> {
        y.to_vec()
    }
    fn name(&self) -> String {
        "identity".into()
    }
}

/// Box inpainting: zeroes a rectangle on every channel. A diagonal 0/1
/// projector, hence self-adjoint.
#[derive(Debug, Clone)]
pub struct BoxMask {
    shape: ImageShape,
    top: usize,
    left: usize,
    box_h: usize,
    box_w: usize,
}

impl BoxMask {
    pub fn observed(&self, y: usize, x: usize) -> bool {
        !(y >= self.top && y < self.top + self.box_h && x >= self.left && x < self.left + self.box_w)
    }

    pub fn n_observed(&self) -> usize {
        (self.shape.height * self.shape.width - self.box_h * self.box_w) * self.shape.channels
    }

    fn mask<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let s = self.shape;
        let mut out = x.to_vec();
        for c in 0..s.channels {
            for y in self.top..self.top + self.box_h {
                let row = s.index(c, y, self.left);
                out[row..row + self.box_w].fill(T::zero());
            }
        }
        out
    }
}

pub fn make_inpainting(
    shape: ImageShape,
    box_top: usize,
    box_left: usize,
    box_h: usize,
    box_w: usize,
) -> Result<BoxMask> {
    if box_top + box_h > shape.height || box_left + box_w > shape.width {
        return Err(invalid(format!(
            "box ({box_top},{box_left}) size {box_h}x{box_w} exceeds image {shape}"
        )));
    }
    Ok(BoxMask {
        shape,
        top: box_top,
        left: box_left,
        box_h,
        box_w,
    })
}

/// Box of the given size centered in the image.
pub fn make_centered_inpainting(shape: ImageShape, box_h: usize, box_w: usize) -> Result<BoxMask> {
    if box_h > shape.height || box_w > shape.width {
        return Err(invalid(format!("box {box_h}x{box_w} exceeds image {shape}")));
    }
    make_inpainting(
        shape,
        (shape.height - box_h) / 2,
        (shape.width - box_w) / 2,
        box_h,
        box_w,
    )
}

impl<T: Scalar> LinearOperator<T> for BoxMask {
    fn in_shape(&self) -> ImageShape {
        self.shape
    }
    fn out_shape(&self) -> ImageShape {
        self.shape
    }
    fn apply(&self, x: &[T]) -> Vec<T> {
        self.mask(x)
    }
    fn adjoint(&self, y: &[T]) -> Vec<T> {
        self.mask(y)
    }
    fn name(&self) -> String {
        format!(
            "inpaint[{},{} {}x{}]",
            self.top, self.left, self.box_h, self.box_w
        )
    }
}

/// Block averaging over `factor × factor` cells.
#[derive(Debug, Clone)]
pub struct Downsample {
    shape: ImageShape,
    coarse: ImageShape,
    factor: usize,
}

impl Downsample {
    pub fn factor(&self) -> usize {
        self.factor
    }
}

pub fn make_downsample(shape: ImageShape, factor: usize) -> Result<Downsample> {
    if factor == 0 || !shape.height.is_multiple_of(factor) || !shape.width.is_multiple_of(factor) {
        return Err(invalid(format!(
            "downsample factor {factor} must divide image {shape}"
        )));
    }
    Ok(Downsample {
        shape,
        coarse: ImageShape::new(shape.height / factor, shape.width / factor, shape.channels)?,
        factor,
    })
}

impl<T: Scalar> LinearOperator<T> for Downsample {
    fn in_shape(&self) -> ImageShape {
        self.shape
    }
    fn out_shape(&self) -> ImageShape {
        self.coarse
    }
    fn apply(&self, x: &[T]) -> Vec<T> {
        let f = self.factor;
        let inv = T::one() / T::of_usize(f * f);
        let mut out = vec![T::zero(); self.coarse.len()];
        let mut block = Vec::with_capacity(f * f);
        for c in 0..self.coarse.channels {
            for cy in 0..self.coarse.height {
                for cx in 0..self.coarse.width {
                    block.clear();
                    for y in cy * f..(cy + 1) * f {
                        for xx in cx * f..(cx + 1) * f {
                            block.push(x[self.shape.index(c, y, xx)]);
                        }
                    }
                    out[self.coarse.index(c, cy, cx)] = pairwise_sum(&block) * inv;
                }
            }
        }
        out
    }
    fn adjoint(&self, y: &[T]) -> Vec<T> {
        let f = self.factor;
        let inv = T::one() / T::of_usize(f * f);
        let mut out = vec![T::zero(); self.shape.len()];
        for c in 0..self.shape.channels {
            for yy in 0..self.shape.height {
                for xx in 0..self.shape.width {
                    out[self.shape.index(c, yy, xx)] = inv * y[self.coarse.index(c, yy / f, xx / f)];
                }
            }
        }
        out
    }
    fn name(&self) -> String {
        format!("downsample[{}x]", self.factor)
    }
}

// Pairwise summation keeps `A Aᵀ = I / f²` exact when f² is a power of two.
fn pairwise_sum<T: Scalar>(v: &[T]) -> T {
    match v.len() {
        0 => T::zero(),
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

/// Channel-wise 2-D convolution with circular boundary.
#[derive(Debug, Clone)]
pub struct Blur<T> {
    shape: ImageShape,
    kernel: Matrix<T>,
    label: String,
}

impl<T: Scalar> Blur<T> {
    pub fn kernel(&self) -> &Matrix<T> {
        &self.kernel
    }

    /// `out[p] = Σ_q k[q] x[p - q]`, or with `flip` the correlation
    /// `out[p] = Σ_q k[q] x[p + q]` (convolution with the rotated kernel).
    fn convolve(&self, x: &[T], flip: bool) -> Vec<T> {
        let s = self.shape;
        let (kh, kw) = (self.kernel.rows(), self.kernel.cols());
        let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
        let (h, w) = (s.height as isize, s.width as isize);
        let mut out = vec![T::zero(); s.len()];
        for c in 0..s.channels {
            let plane = &x[c * s.height * s.width..(c + 1) * s.height * s.width];
            for i in 0..kh {
                for j in 0..kw {
                    let k = self.kernel[(i, j)];
                    if k == T::zero() {
                        continue;
                    }
                    let (di, dj) = (i as isize - ch, j as isize - cw);
                    let (di, dj) = if flip { (-di, -dj) } else { (di, dj) };
                    for y in 0..s.height {
                        let sy = (y as isize - di).rem_euclid(h) as usize;
                        let src = &plane[sy * s.width..(sy + 1) * s.width];
                        let dst_start = s.index(c, y, 0);
                        let dst = &mut out[dst_start..dst_start + s.width];
                        let shift = dj.rem_euclid(w) as usize;
                        // dst[x] += k * src[(x - dj) mod W]
                        let split = s.width - shift;
                        axpy(k, &src[..split], &mut dst[shift..]);
                        axpy(k, &src[split..], &mut dst[..shift]);
                    }
                }
            }
        }
        out
    }
}

pub fn make_blur<T: Scalar>(shape: ImageShape, kernel: Matrix<T>) -> Result<Blur<T>> {
    make_named_blur(shape, kernel, "blur")
}

pub fn make_named_blur<T: Scalar>(
    shape: ImageShape,
    kernel: Matrix<T>,
    label: &str,
) -> Result<Blur<T>> {
    if kernel.rows() == 0 || kernel.cols() == 0 {
        return Err(invalid("blur kernel is empty"));
    }
    if kernel.rows() > shape.height || kernel.cols() > shape.width {
        return Err(invalid(format!(
            "kernel {}x{} larger than image {shape}",
            kernel.rows(),
            kernel.cols()
        )));
    }
    Ok(Blur {
        shape,
        label: format!("{label}[{}x{}]", kernel.rows(), kernel.cols()),
        kernel,
    })
}

impl<T: Scalar> LinearOperator<T> for Blur<T> {
    fn in_shape(&self) -> ImageShape {
        self.shape
    }
    fn out_shape(&self) -> ImageShape {
        self.shape
    }
    fn apply(&self, x: &[T]) -> Vec<T> {
        self.convolve(x, false)
    }
    fn adjoint(&self, y: &[T]) -> Vec<T> {
        self.convolve(y, true)
    }
    fn name(&self) -> String {
        self.label.clone()
    }
}

fn check_odd(size: usize) -> Result<()> {
    if size % 2 == 1 {
        Ok(())
    } else {
        Err(invalid(format!("kernel size must be odd, got {size}")))
    }
}

fn normalized<T: Scalar>(mut k: Matrix<T>) -> Result<Matrix<T>> {
    let total: T = k.as_slice().iter().copied().sum();
    if !(total > T::zero()) {
        return Err(invalid("kernel has no mass"));
    }
    let (r, c) = (k.rows(), k.cols());
    for i in 0..r {
        for j in 0..c {
            k[(i, j)] /= total;
        }
    }
    Ok(k)
}

/// Isotropic Gaussian kernel, normalized to unit sum.
pub fn gaussian_kernel<T: Scalar>(size: usize, sigma: T) -> Result<Matrix<T>> {
    check_odd(size)?;
    if !(sigma > T::zero()) {
        return Err(invalid("gaussian kernel sigma must be positive"));
    }
    let c = (size / 2) as f64;
    let s = sigma.to_f64_lossy();
    let k = Matrix::from_fn(size, size, |i, j| {
        let (dy, dx) = (i as f64 - c, j as f64 - c);
        T::of((-(dx * dx + dy * dy) / (2.0 * s * s)).exp())
    });
    normalized(k)
}

/// Line-segment motion kernel of the given length through the kernel
/// center, at `angle` radians counter-clockwise from the +x axis. The segment
/// is supersampled and each sample credits the pixel containing it, which
/// gives exact box-filter coverage for axis-aligned segments.
pub fn motion_kernel<T: Scalar>(size: usize, length: T, angle: T) -> Result<Matrix<T>> {
    check_odd(size)?;
    let len = length.to_f64_lossy();
    if !(len > 0.0) {
        return Err(invalid("motion kernel length must be positive"));
    }
    let theta = angle.to_f64_lossy();
    let c = (size / 2) as f64;
    let samples = (64.0 * len.ceil()).max(64.0) as usize;
    let ds = len / samples as f64;
    let (dx, dy) = (theta.cos(), -theta.sin());
    let mut acc = vec![0.0f64; size * size];
    for k in 0..samples {
        let s = -len / 2.0 + (k as f64 + 0.5) * ds;
        let (px, py) = (c + s * dx, c + s * dy);
        let (col, row) = ((px + 0.5).floor(), (py + 0.5).floor());
        if col >= 0.0 && row >= 0.0 && (col as usize) < size && (row as usize) < size {
            acc[row as usize * size + col as usize] += ds;
        }
    }
    normalized(Matrix::from_fn(size, size, |i, j| T::of(acc[i * size + j])))
}

/// Dense `m × n` matrix of an operator, built column by column.
pub fn materialize<T: Scalar, A: LinearOperator<T> + ?Sized>(op: &A) -> Matrix<T> {
    let n = op.in_shape().len();
    let m = op.out_shape().len();
    let mut out = Matrix::zeros(m, n);
    let mut e = vec![T::zero(); n];
    for j in 0..n {
        e[j] = T::one();
        let col = op.apply(&e);
        for i in 0..m {
            out[(i, j)] = col[i];
        }
        e[j] = T::zero();
    }
    out
}

/// `|⟨Ax, y⟩ − ⟨x, Aᵀy⟩| / (‖Ax‖ ‖y‖)`, the randomized adjoint residual.
pub fn adjoint_residual<T: Scalar, A: LinearOperator<T> + ?Sized>(op: &A, x: &[T], y: &[T]) -> T {
    use crate::linalg::{dot, norm};
    let ax = op.apply(x);
    let aty = op.adjoint(y);
    let lhs = dot(&ax, y);
    let rhs = dot(x, &aty);
    let denom = (norm(&ax) * norm(y)).max(T::min_positive_value());
    (lhs - rhs).abs() / denom
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement<T> {
    pub y: Vec<T>,
    pub sigma_y: T,
    pub operator_id: String,
    pub seed: u64,
}

/// `y = A x⋆ + σ_y ε`, with ε drawn from a generator seeded by `seed`.
pub fn measure<T: Scalar, A: LinearOperator<T> + ?Sized>(
    op: &A,
    x_star: &[T],
    sigma_y: T,
    seed: u64,
) -> Result<Measurement<T>> {
    check_len("ground truth", op.in_shape().len(), x_star.len())?;
    if !(sigma_y >= T::zero()) {
        return Err(invalid(format!("sigma_y must be nonnegative, got {sigma_y}")));
    }
    let mut y = op.apply(x_star);
    if sigma_y > T::zero() {
        let noise: Vec<T> = standard_normal(&mut seeded(seed), y.len());
        axpy(sigma_y, &noise, &mut y);
    }
    Ok(Measurement {
        y,
        sigma_y,
        operator_id: op.name(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, norm};
    use crate::rng::seeded;

    fn random(seed: u64, n: usize) -> Vec<f64> {
        standard_normal(&mut seeded(seed), n)
    }

    fn assert_adjoint<A: LinearOperator<f64>>(op: &A) {
        for k in 0..20 {
            let x = random(2 * k, op.in_shape().len());
            let y = random(2 * k + 1, op.out_shape().len());
            let r = adjoint_residual(op, &x, &y);
            assert!(r < 1e-12, "{} adjoint residual {r}", op.name());
        }
    }

    #[test]
    fn inpainting_geometry() {
        let shape = ImageShape::gray(32, 32);
        let m = make_centered_inpainting(shape, 12, 12).unwrap();
        assert_eq!(m.n_observed(), 1024 - 144);
        let ones = vec![1.0f64; 1024];
        let out = m.apply(&ones);
        assert_eq!(out.iter().filter(|v| **v == 1.0).count(), 880);
        let full = make_inpainting(shape, 0, 0, 32, 32).unwrap();
        assert!(LinearOperator::<f64>::apply(&full, &ones).iter().all(|v| *v == 0.0));
        assert!(make_inpainting(shape, 25, 0, 8, 8).is_err());
    }

    #[test]
    fn mask_is_exactly_self_adjoint() {
        let m = make_centered_inpainting(ImageShape::new(8, 8, 3).unwrap(), 3, 4).unwrap();
        let x = random(1, 192);
        let y = random(2, 192);
        assert_eq!(dot(&m.apply(&x), &y), dot(&x, &m.apply(&y)));
        assert_adjoint(&m);
    }

    #[test]
    fn downsample_examples() {
        let d = make_downsample(ImageShape::gray(2, 2), 2).unwrap();
        assert_eq!(d.apply(&[1.0, 2.0, 3.0, 4.0]), vec![2.5]);
        let d4 = make_downsample(ImageShape::gray(16, 16), 4).unwrap();
        let out = d4.apply(&vec![0.7f64; 256]);
        assert_eq!(out.len(), 16);
        assert!(out.iter().all(|v| (v - 0.7).abs() < 1e-15));
        assert!(make_downsample(ImageShape::gray(10, 10), 4).is_err());
        assert_adjoint(&make_downsample(ImageShape::new(8, 12, 2).unwrap(), 4).unwrap());
    }

    #[test]
    fn downsample_times_upsample_is_scaled_identity() {
        let d = make_downsample(ImageShape::gray(16, 16), 4).unwrap();
        let coarse = random(5, 16);
        let back = d.apply(&d.adjoint(&coarse));
        for (a, b) in back.iter().zip(&coarse) {
            assert_eq!(*a, b / 16.0);
        }
    }

    #[test]
    fn kernels_are_normalized() {
        for (size, sigma) in [(1, 1.0), (9, 1.5), (61, 3.0), (5, 0.3)] {
            let k = gaussian_kernel::<f64>(size, sigma).unwrap();
            let total: f64 = k.as_slice().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(k.max_abs_diff(&k.transpose()) < 1e-15);
        }
        assert_eq!(gaussian_kernel::<f64>(1, 2.0).unwrap().as_slice(), &[1.0]);
        assert!(gaussian_kernel::<f64>(4, 1.0).is_err());
        for angle in [0.0, 0.3, std::f64::consts::FRAC_PI_4, 2.0] {
            let k = motion_kernel::<f64>(7, 5.0, angle).unwrap();
            let total: f64 = k.as_slice().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn horizontal_motion_is_a_uniform_row() {
        let k = motion_kernel::<f64>(7, 7.0, 0.0).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let want = if i == 3 { 1.0 / 7.0 } else { 0.0 };
                assert!((k[(i, j)] - want).abs() < 1e-12, "({i},{j}) = {}", k[(i, j)]);
            }
        }
    }

    #[test]
    fn blur_properties() {
        let shape = ImageShape::new(12, 10, 2).unwrap();
        let delta = Matrix::from_fn(3, 3, |i, j| if i == 1 && j == 1 { 1.0 } else { 0.0 });
        let id = make_blur(shape, delta).unwrap();
        let x = random(9, shape.len());
        assert_eq!(id.apply(&x), x);

        let g = make_blur(shape, gaussian_kernel(9, 1.5).unwrap()).unwrap();
        let flat = g.apply(&vec![0.25; shape.len()]);
        assert!(flat.iter().all(|v: &f64| (v - 0.25).abs() < 1e-14));
        assert_adjoint(&g);
        assert_adjoint(&make_blur(shape, motion_kernel(7, 7.0, 0.785).unwrap()).unwrap());
        assert!(make_blur(shape, gaussian_kernel::<f64>(13, 1.0).unwrap()).is_err());
    }

    #[test]
    fn asymmetric_kernel_convolution_direction() {
        // Kernel with mass only right of center: out[x] = in[x - 1].
        let k = Matrix::from_fn(3, 3, |i, j| if i == 1 && j == 2 { 1.0 } else { 0.0 });
        let b = make_blur(ImageShape::gray(3, 4), k).unwrap();
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let out = b.apply(&x);
        assert_eq!(&out[0..4], &[3.0, 0.0, 1.0, 2.0]);
        assert_adjoint(&b);
    }

    #[test]
    fn blur_commutes_with_circular_shift() {
        let shape = ImageShape::gray(10, 10);
        let b = make_blur(shape, motion_kernel(5, 4.0, 0.6).unwrap()).unwrap();
        let x = random(4, 100);
        let shift = |v: &[f64]| -> Vec<f64> {
            (0..100).map(|p| {
                let (y, xx) = (p / 10, p % 10);
                v[((y + 7) % 10) * 10 + (xx + 3) % 10]
            }).collect()
        };
        let lhs = b.apply(&shift(&x));
        let rhs = shift(&b.apply(&x));
        for (a, c) in lhs.iter().zip(&rhs) {
            assert!((a - c).abs() < 1e-14);
        }
    }

    #[test]
    fn materialized_operator_matches_apply() {
        let d = make_downsample(ImageShape::gray(4, 4), 2).unwrap();
        let m = materialize::<f64, _>(&d);
        let x = random(3, 16);
        let a = m.matvec(&x);
        let b = d.apply(&x);
        assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-15));
    }

    #[test]
    fn measurement_synthesis() {
        let op = Identity::new(ImageShape::gray(4, 4));
        let x = random(1, 16);
        let clean = measure(&op, &x, 0.0, 3).unwrap();
        assert_eq!(clean.y, x);
        let a = measure(&op, &x, 0.1, 3).unwrap();
        let b = measure(&op, &x, 0.1, 3).unwrap();
        assert_eq!(a, b);
        for s in [0.05, 0.075, 0.1] {
            let m = measure(&op, &x, s, 9).unwrap();
            assert!(norm(&crate::linalg::sub(&m.y, &x)) > 0.0);
        }
        assert!(measure(&op, &x, -0.1, 0).is_err());
        assert!(measure(&op, &x[..3], 0.1, 0).is_err());
    }
}
