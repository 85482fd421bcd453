//! Dense 2D cross-correlation with zero padding, lowered to an im2col column
//! matrix plus one GEMM per sample.

use crate::error::{Error, Result};
use crate::gemm::{gemm_nn, MacCounter};
use crate::tensor::{Scalar, Shape, Tensor};

/// Convolution kernel plus geometry. The kernel tensor is stored as
/// (c_out, c_in, k_h, k_w) mapped onto NCHW slots.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec<T: Scalar = f32> {
    pub kernel: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(kernel: Tensor<T>, stride: usize, padding: usize, bias: Option<Vec<T>>) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArg("conv stride must be positive".into()));
        }
        if let Some(b) = &bias {
            if b.len() != kernel.shape().n {
                return Err(Error::ShapeMismatch {
                    context: "ConvSpec bias",
                    expected: format!("{} entries", kernel.shape().n),
                    got: format!("{} entries", b.len()),
                });
            }
        }
        Ok(ConvSpec {
            kernel,
            stride,
            padding,
            bias,
        })
    }

    pub fn c_out(&self) -> usize {
        self.kernel.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.kernel.shape().c
    }

    pub fn k_h(&self) -> usize {
        self.kernel.shape().h
    }

    pub fn k_w(&self) -> usize {
        self.kernel.shape().w
    }

    /// Output spatial size for an (h, w) input: floor((d + 2p - k)/s) + 1,
    /// clamped to zero when the padded input is smaller than the kernel.
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let dim = |d: usize, k: usize| -> usize {
            let padded = d + 2 * self.padding;
            if padded < k {
                0
            } else {
                (padded - k) / self.stride + 1
            }
        };
        (dim(h, self.k_h()), dim(w, self.k_w()))
    }
}

/// Lower one sample (c, h, w) into the column matrix with rows indexed by
/// (c, ky, kx) and one column per output position, zero-filled where the
/// receptive field crosses the border.
pub fn im2col<T: Scalar>(
    sample: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k_h: usize,
    k_w: usize,
    stride: usize,
    pad: usize,
    cols: &mut Vec<T>,
) -> (usize, usize) {
    let oh = if h + 2 * pad < k_h { 0 } else { (h + 2 * pad - k_h) / stride + 1 };
    let ow = if w + 2 * pad < k_w { 0 } else { (w + 2 * pad - k_w) / stride + 1 };
    let rows = c_in * k_h * k_w;
    cols.clear();
    cols.resize(rows * oh * ow, T::zero());
    let n_cols = oh * ow;
    for c in 0..c_in {
        let plane = &sample[c * h * w..(c + 1) * h * w];
        for ky in 0..k_h {
            for kx in 0..k_w {
                let row = (c * k_h + ky) * k_w + kx;
                let out_row = &mut cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out_row[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (oh, ow)
}

/// Adjoint of [`im2col`]: scatter-add columns back into a (c, h, w) sample.
pub fn col2im_add<T: Scalar>(
    cols: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k_h: usize,
    k_w: usize,
    stride: usize,
    pad: usize,
    sample: &mut [T],
) {
    let oh = if h + 2 * pad < k_h { 0 } else { (h + 2 * pad - k_h) / stride + 1 };
    let ow = if w + 2 * pad < k_w { 0 } else { (w + 2 * pad - k_w) / stride + 1 };
    let n_cols = oh * ow;
    for c in 0..c_in {
        let plane = &mut sample[c * h * w..(c + 1) * h * w];
        for ky in 0..k_h {
            for kx in 0..k_w {
                let row = (c * k_h + ky) * k_w + kx;
                let col_row = &cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += col_row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Dense convolution via im2col + GEMM, recording multiply-adds into `counter`.
pub fn conv2d_counted<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec<T>,
    counter: &mut MacCounter,
) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.c != spec.c_in() {
        return Err(Error::ShapeMismatch {
            context: "conv2d",
            expected: format!("input channels = {} (kernel {})", spec.c_in(), spec.kernel.shape()),
            got: format!("input {s}"),
        });
    }
    let (oh, ow) = spec.out_dims(s.h, s.w);
    let mut out = Tensor::zeros(Shape::new(s.n, spec.c_out(), oh, ow));
    let rows = spec.c_in() * spec.k_h() * spec.k_w();
    let n_cols = oh * ow;
    let mut cols = Vec::new();
    let per_in = s.c * s.h * s.w;
    let per_out = spec.c_out() * n_cols;
    for n in 0..s.n {
        let sample = &input.data()[n * per_in..(n + 1) * per_in];
        im2col(
            sample,
            s.c,
            s.h,
            s.w,
            spec.k_h(),
            spec.k_w(),
            spec.stride,
            spec.padding,
            &mut cols,
        );
        let out_slice = &mut out.data_mut()[n * per_out..(n + 1) * per_out];
        if let Some(bias) = &spec.bias {
            for (co, &b) in bias.iter().enumerate() {
                out_slice[co * n_cols..(co + 1) * n_cols].fill(b);
            }
        }
        gemm_nn(spec.c_out(), rows, n_cols, spec.kernel.data(), &cols, out_slice);
        counter.add(spec.c_out(), rows, n_cols);
    }
    Ok(out)
}

/// Dense convolution, discarding the MAC count.
pub fn conv2d_dense<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    let mut counter = MacCounter::new();
    conv2d_counted(input, spec, &mut counter)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop cross-correlation used as the oracle for the
    /// im2col path. Kept deliberately independent of the GEMM machinery.
    pub fn conv2d_direct(input: &Tensor<f32>, spec: &ConvSpec<f32>) -> Tensor<f32> {
        let s = input.shape();
        let (oh, ow) = spec.out_dims(s.h, s.w);
        let mut out = Tensor::zeros(Shape::new(s.n, spec.c_out(), oh, ow));
        for n in 0..s.n {
            for co in 0..spec.c_out() {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = spec.bias.as_ref().map_or(0.0, |b| b[co]);
                        for ci in 0..spec.c_in() {
                            for ky in 0..spec.k_h() {
                                for kx in 0..spec.k_w() {
                                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                    let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                    if iy >= 0 && iy < s.h as isize && ix >= 0 && ix < s.w as isize {
                                        acc += input.at(n, ci, iy as usize, ix as usize)
                                            * spec.kernel.at(co, ci, ky, kx);
                                    }
                                }
                            }
                        }
                        *out.at_mut(n, co, oy, ox) = acc;
                    }
                }
            }
        }
        out
    }

    pub fn assert_close(a: &Tensor<f32>, b: &Tensor<f32>, tol: f32) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol, "{x} vs {y} beyond {tol}");
        }
    }

    #[test]
    fn identity_kernel_passes_through() {
        let input =
            Tensor::from_vec(Shape::new(1, 1, 3, 3), (1..=9).map(|v| v as f32).collect()).unwrap();
        let kernel = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap();
        let spec = ConvSpec::new(kernel, 1, 0, None).unwrap();
        let out = conv2d_dense(&input, &spec).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn ones_kernel_padded_counts_overlap() {
        let input = Tensor::full(Shape::new(1, 1, 2, 2), 1.0f32);
        let kernel = Tensor::full(Shape::new(1, 1, 3, 3), 1.0f32);
        let spec = ConvSpec::new(kernel, 1, 1, None).unwrap();
        let out = conv2d_dense(&input, &spec).unwrap();
        let want = conv2d_direct(&input, &spec);
        assert_close(&out, &want, 1e-6);
        // Every position overlaps all four ones.
        assert_eq!(out.data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn im2col_matches_direct_loop_on_random_input() {
        let mut rng = crate::rng::seeded(99);
        let input = crate::rng::uniform_tensor::<f32>(Shape::new(2, 4, 8, 8), -1.0, 1.0, &mut rng);
        let kernel = crate::rng::uniform_tensor::<f32>(Shape::new(6, 4, 3, 3), -1.0, 1.0, &mut rng);
        let bias: Vec<f32> = (0..6).map(|i| i as f32 * 0.1).collect();
        let spec = ConvSpec::new(kernel, 1, 1, Some(bias)).unwrap();
        let out = conv2d_dense(&input, &spec).unwrap();
        let want = conv2d_direct(&input, &spec);
        assert_close(&out, &want, 1e-5);
    }

    #[test]
    fn strided_conv_matches_direct_loop() {
        let mut rng = crate::rng::seeded(7);
        let input = crate::rng::uniform_tensor::<f32>(Shape::new(1, 3, 7, 9), -1.0, 1.0, &mut rng);
        let kernel = crate::rng::uniform_tensor::<f32>(Shape::new(2, 3, 3, 3), -1.0, 1.0, &mut rng);
        let spec = ConvSpec::new(kernel, 2, 1, None).unwrap();
        let out = conv2d_dense(&input, &spec).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 2, 4, 5));
        assert_close(&out, &conv2d_direct(&input, &spec), 1e-5);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let input = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let kernel = Tensor::<f32>::zeros(Shape::new(2, 4, 3, 3));
        let spec = ConvSpec::new(kernel, 1, 1, None).unwrap();
        let err = conv2d_dense(&input, &spec).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("4") && msg.contains("1x3x4x4"), "message: {msg}");
    }

    #[test]
    fn kernel_larger_than_input_yields_empty_output() {
        let input = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let kernel = Tensor::<f32>::zeros(Shape::new(1, 1, 5, 5));
        let spec = ConvSpec::new(kernel, 1, 0, None).unwrap();
        let out = conv2d_dense(&input, &spec).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 0, 0));
        assert!(out.is_empty());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let mut rng = crate::rng::seeded(21);
        let (c, h, w, kh, kw, stride, pad) = (2, 5, 4, 3, 3, 2, 1);
        let x = crate::rng::uniform_tensor::<f32>(Shape::new(1, c, h, w), -1.0, 1.0, &mut rng);
        let mut cols = Vec::new();
        let (oh, ow) = im2col(x.data(), c, h, w, kh, kw, stride, pad, &mut cols);
        let y = crate::rng::uniform_tensor::<f32>(
            Shape::new(1, 1, c * kh * kw, oh * ow),
            -1.0,
            1.0,
            &mut rng,
        );
        let lhs: f32 = cols.iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0f32; c * h * w];
        col2im_add(y.data(), c, h, w, kh, kw, stride, pad, &mut back);
        let rhs: f32 = x.data().iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
