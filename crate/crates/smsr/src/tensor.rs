//! Dense NCHW tensor type and the primitive numeric operations the engine
//! builds on.
//!
//! Tensors are immutable values once constructed; every operation returns a
//! fresh tensor and repeated calls with identical inputs produce bit-identical
//! outputs.

use std::fmt;

use crate::error::{Error, Result};

/// Element type for tensors. The runtime uses `f32` everywhere; the `f64`
/// instantiation exists so gradient checks can run in double precision.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shape of a rank-4 NCHW tensor. Zero-sized dimensions are legal.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalar shape used for loss values.
    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Rank-4 NCHW tensor, contiguous row-major in (n, c, h, w) order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::from_vec",
                expected: format!("{} elements for shape {shape}", shape.len()),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut T {
        let i = self.index(n, c, y, x);
        &mut self.data[i]
    }

    /// Reinterpret the same contiguous data with a new shape of equal length.
    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        if shape.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: "reshape",
                expected: format!("{} elements", self.data.len()),
                got: format!("shape {shape} = {} elements", shape.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// One sample of a batch as its own (1, c, h, w) tensor.
    pub fn sample(&self, n: usize) -> Self {
        let per = self.shape.c * self.shape.h * self.shape.w;
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stack (1, c, h, w) samples back into one batch tensor.
    pub fn stack_samples(samples: &[Tensor<T>]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| {
            Error::InvalidArg("stack_samples requires at least one sample".into())
        })?;
        let s = first.shape;
        let mut data = Vec::with_capacity(samples.len() * s.len());
        for t in samples {
            if t.shape != s {
                return Err(Error::ShapeMismatch {
                    context: "stack_samples",
                    expected: s.to_string(),
                    got: t.shape.to_string(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(samples.len() * s.n, s.c, s.h, s.w),
            data,
        })
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>({})", std::any::type_name::<T>(), self.shape)
    }
}

/// Elementwise max(0, x).
pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Result shape of broadcasting `a` against `b` (each dim equal or 1).
pub fn broadcast_shape(a: Shape, b: Shape, context: &'static str) -> Result<Shape> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (
        dim(a.n, b.n),
        dim(a.c, b.c),
        dim(a.h, b.h),
        dim(a.w, b.w),
    ) {
        (Some(n), Some(c), Some(h), Some(w)) => Ok(Shape::new(n, c, h, w)),
        _ => Err(Error::ShapeMismatch {
            context,
            expected: format!("broadcast-compatible with {a}"),
            got: b.to_string(),
        }),
    }
}

/// Elementwise binary op with NumPy-style broadcasting on all four axes.
pub fn broadcast_binop<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    context: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(a.shape, b.shape, context)?;
    // Fast path: identical shapes.
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor {
            shape: out_shape,
            data,
        });
    }
    let mut out = Tensor::zeros(out_shape);
    let sa = a.shape;
    let sb = b.shape;
    let mut i = 0;
    for n in 0..out_shape.n {
        for c in 0..out_shape.c {
            for y in 0..out_shape.h {
                for x in 0..out_shape.w {
                    let va = a.at(
                        if sa.n == 1 { 0 } else { n },
                        if sa.c == 1 { 0 } else { c },
                        if sa.h == 1 { 0 } else { y },
                        if sa.w == 1 { 0 } else { x },
                    );
                    let vb = b.at(
                        if sb.n == 1 { 0 } else { n },
                        if sb.c == 1 { 0 } else { c },
                        if sb.h == 1 { 0 } else { y },
                        if sb.w == 1 { 0 } else { x },
                    );
                    out.data[i] = f(va, vb);
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binop(a, b, "add", |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binop(a, b, "sub", |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binop(a, b, "mul", |x, y| x * y)
}

/// Sum `t` down to `target` along every axis where `target` has extent 1.
/// Adjoint of broadcasting; summation runs in row-major order of `t` so the
/// result is deterministic.
pub fn reduce_to_shape<T: Scalar>(t: &Tensor<T>, target: Shape) -> Result<Tensor<T>> {
    if t.shape == target {
        return Ok(t.clone());
    }
    broadcast_shape(target, t.shape, "reduce_to_shape")?;
    let mut out = Tensor::zeros(target);
    let s = t.shape;
    let mut i = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let idx = out.index(
                        if target.n == 1 { 0 } else { n },
                        if target.c == 1 { 0 } else { c },
                        if target.h == 1 { 0 } else { y },
                        if target.w == 1 { 0 } else { x },
                    );
                    out.data[idx] += t.data[i];
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Concatenate along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArg("concat of zero tensors".into()))?;
    let s = first.shape;
    let total_c: usize = parts.iter().map(|t| t.shape.c).sum();
    for t in parts {
        if (t.shape.n, t.shape.h, t.shape.w) != (s.n, s.h, s.w) {
            return Err(Error::ShapeMismatch {
                context: "concat_channels",
                expected: format!("n={}, h={}, w={}", s.n, s.h, s.w),
                got: t.shape.to_string(),
            });
        }
    }
    let out_shape = Shape::new(s.n, total_c, s.h, s.w);
    let mut data = Vec::with_capacity(out_shape.len());
    let plane = s.h * s.w;
    for n in 0..s.n {
        for t in parts {
            let per = t.shape.c * plane;
            data.extend_from_slice(&t.data[n * per..(n + 1) * per]);
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

/// Channel slice [start, start+len).
pub fn narrow_channels<T: Scalar>(t: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = t.shape;
    if start + len > s.c {
        return Err(Error::ShapeMismatch {
            context: "narrow_channels",
            expected: format!("channel range within 0..{}", s.c),
            got: format!("{start}..{}", start + len),
        });
    }
    let plane = s.h * s.w;
    let mut data = Vec::with_capacity(s.n * len * plane);
    for n in 0..s.n {
        let base = (n * s.c + start) * plane;
        data.extend_from_slice(&t.data[base..base + len * plane]);
    }
    Ok(Tensor {
        shape: Shape::new(s.n, len, s.h, s.w),
        data,
    })
}

/// Softmax over the channel axis, computed independently per (n, y, x).
pub fn softmax_channels<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let mut max = T::neg_infinity();
                for c in 0..s.c {
                    max = max.max(t.at(n, c, y, x));
                }
                let mut denom = T::zero();
                for c in 0..s.c {
                    denom += (t.at(n, c, y, x) - max).exp();
                }
                for c in 0..s.c {
                    *out.at_mut(n, c, y, x) = (t.at(n, c, y, x) - max).exp() / denom;
                }
            }
        }
    }
    out
}

/// Sub-pixel rearrangement: (n, c, h, w) -> (n, c/r^2, h*r, w*r) where the
/// value at (n, c, y*r+dy, x*r+dx) comes from input channel c*r^2 + dy*r + dx
/// at (y, x).
pub fn pixel_shuffle<T: Scalar>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = input.shape;
    if r == 0 {
        return Err(Error::InvalidArg("pixel_shuffle upscale factor must be >= 1".into()));
    }
    if s.c % (r * r) != 0 {
        return Err(Error::ShapeMismatch {
            context: "pixel_shuffle",
            expected: format!("channels divisible by r^2 = {}", r * r),
            got: format!("c = {}", s.c),
        });
    }
    let oc = s.c / (r * r);
    let mut out = Tensor::zeros(Shape::new(s.n, oc, s.h * r, s.w * r));
    for n in 0..s.n {
        for c in 0..oc {
            for y in 0..s.h {
                for x in 0..s.w {
                    for dy in 0..r {
                        for dx in 0..r {
                            let ic = c * r * r + dy * r + dx;
                            *out.at_mut(n, c, y * r + dy, x * r + dx) = input.at(n, ic, y, x);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = input.shape;
    if r == 0 || s.h % r != 0 || s.w % r != 0 {
        return Err(Error::ShapeMismatch {
            context: "pixel_unshuffle",
            expected: format!("spatial dims divisible by r = {r}"),
            got: format!("h = {}, w = {}", s.h, s.w),
        });
    }
    let mut out = Tensor::zeros(Shape::new(s.n, s.c * r * r, s.h / r, s.w / r));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h / r {
                for x in 0..s.w / r {
                    for dy in 0..r {
                        for dx in 0..r {
                            let oc = c * r * r + dy * r + dx;
                            *out.at_mut(n, oc, y, x) = input.at(n, c, y * r + dy, x * r + dx);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour 2x upsample cropped to an exact (oh, ow) target, so odd
/// input sizes round-trip through a stride-2 downsample.
pub fn upsample_nearest2x_to<T: Scalar>(input: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let s = input.shape;
    if oh > 2 * s.h || ow > 2 * s.w {
        return Err(Error::ShapeMismatch {
            context: "upsample_nearest2x_to",
            expected: format!("target within 2x of {}x{}", s.h, s.w),
            got: format!("{oh}x{ow}"),
        });
    }
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..oh {
                for x in 0..ow {
                    *out.at_mut(n, c, y, x) = input.at(n, c, y / 2, x / 2);
                }
            }
        }
    }
    Ok(out)
}

/// Mean over every element, as a scalar tensor.
pub fn mean_all<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    if t.is_empty() {
        return Err(Error::InvalidArg("mean of an empty tensor".into()));
    }
    let mut sum = T::zero();
    for &v in &t.data {
        sum += v;
    }
    Ok(Tensor::scalar(sum / T::from_f64(t.data.len() as f64)))
}

pub fn abs<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| v.abs())
}

/// Values clamped into [lo, hi].
pub fn clamp<T: Scalar>(t: &Tensor<T>, lo: T, hi: T) -> Tensor<T> {
    t.map(|v| v.max(lo).min(hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relu_basic() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_all_negative_goes_dead() {
        let t = Tensor::full(Shape::new(1, 2, 3, 3), -0.5f32);
        let r = relu(&t);
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_idempotent() {
        let mut rng = crate::rng::seeded(7);
        let t = crate::rng::uniform_tensor::<f32>(Shape::new(2, 3, 4, 5), -1.0, 1.0, &mut rng);
        let once = relu(&t);
        assert_eq!(relu(&once), once);
    }

    #[test]
    fn relu_zero_positions_cover_nonpositive_inputs() {
        let mut rng = crate::rng::seeded(13);
        let t = crate::rng::uniform_tensor::<f32>(Shape::new(1, 2, 8, 8), -1.0, 1.0, &mut rng);
        let r = relu(&t);
        for (i, &v) in t.data().iter().enumerate() {
            if v <= 0.0 {
                assert_eq!(r.data()[i], 0.0);
            }
            assert!(r.data()[i] >= 0.0);
        }
    }

    #[test]
    fn pixel_shuffle_r1_is_identity() {
        let mut rng = crate::rng::seeded(3);
        let t = crate::rng::uniform_tensor::<f32>(Shape::new(1, 3, 4, 4), 0.0, 1.0, &mut rng);
        assert_eq!(pixel_shuffle(&t, 1).unwrap(), t);
    }

    #[test]
    fn pixel_shuffle_2x2_enumerated() {
        // 1x4x1x1 [a,b,c,d] with r=2 lays out [[a,b],[c,d]].
        let t = Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let out = pixel_shuffle(&t, 2).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pixel_shuffle_shape_arithmetic() {
        let t = Tensor::zeros(Shape::new(1, 16, 5, 7));
        let out = pixel_shuffle::<f32>(&t, 4).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 20, 28));
    }

    #[test]
    fn pixel_shuffle_rejects_bad_channels() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 3, 2, 2));
        assert!(pixel_shuffle(&t, 2).is_err());
    }

    #[test]
    fn broadcasting_channel_and_spatial() {
        let f = Tensor::from_vec(Shape::new(1, 2, 1, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let m_ch = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0f32, 0.0]).unwrap();
        let out = mul(&f, &m_ch).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 0.0, 0.0]);

        let m_spa = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0f32, 1.0]).unwrap();
        let out = mul(&f, &m_spa).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0, 0.0, 4.0]);
    }

    #[test]
    fn reduce_to_shape_sums_broadcast_axes() {
        let t = Tensor::from_vec(Shape::new(1, 2, 2, 2), (1..=8).map(|v| v as f32).collect())
            .unwrap();
        let r = reduce_to_shape(&t, Shape::new(1, 2, 1, 1)).unwrap();
        assert_eq!(r.data(), &[1.0 + 2.0 + 3.0 + 4.0, 5.0 + 6.0 + 7.0 + 8.0]);
        let r = reduce_to_shape(&t, Shape::new(1, 1, 2, 2)).unwrap();
        assert_eq!(r.data(), &[6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn concat_then_narrow_roundtrip() {
        let mut rng = crate::rng::seeded(5);
        let a = crate::rng::uniform_tensor::<f32>(Shape::new(2, 3, 2, 2), -1.0, 1.0, &mut rng);
        let b = crate::rng::uniform_tensor::<f32>(Shape::new(2, 2, 2, 2), -1.0, 1.0, &mut rng);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(2, 5, 2, 2));
        assert_eq!(narrow_channels(&cat, 0, 3).unwrap(), a);
        assert_eq!(narrow_channels(&cat, 3, 2).unwrap(), b);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::rng::seeded(11);
        let t = crate::rng::uniform_tensor::<f32>(Shape::new(2, 2, 3, 3), -4.0, 4.0, &mut rng);
        let s = softmax_channels(&t);
        for n in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    let sum: f32 = (0..2).map(|c| s.at(n, c, y, x)).sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn upsample_nearest_crops_to_odd_target() {
        let t = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let out = upsample_nearest2x_to(&t, 3, 3).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0, 3.0, 3.0, 4.0]);
    }

    proptest! {
        #[test]
        fn pixel_shuffle_unshuffle_roundtrip(
            n in 1usize..3, c in 1usize..3, h in 1usize..5, w in 1usize..5, r in 1usize..4,
            seed in 0u64..1000,
        ) {
            let shape = Shape::new(n, c * r * r, h, w);
            let mut rng = crate::rng::seeded(seed);
            let t = crate::rng::uniform_tensor::<f32>(shape, -1.0, 1.0, &mut rng);
            let shuffled = pixel_shuffle(&t, r).unwrap();
            let back = pixel_unshuffle(&shuffled, r).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
