//! Bicubic resampling (a = -0.5, antialiased when downscaling, clamp-to-edge
//! borders) and the BT.601 luminance transform used by the evaluation
//! protocol.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Cubic convolution kernel with a = -0.5.
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * (x * x * x - 5.0 * x * x + 8.0 * x - 4.0)
    } else {
        0.0
    }
}

struct AxisTaps {
    // Per output coordinate: first source index and normalized weights.
    start: Vec<isize>,
    weights: Vec<Vec<f64>>,
}

/// Tap positions and normalized weights for one axis. When downscaling the
/// kernel is stretched by the inverse scale so it acts as an antialias
/// filter; source indices are later clamped to the edge.
fn axis_taps(in_size: usize, out_size: usize) -> AxisTaps {
    let ratio = in_size as f64 / out_size as f64;
    let filter_scale = ratio.max(1.0);
    let support = 2.0 * filter_scale;
    let mut start = Vec::with_capacity(out_size);
    let mut weights = Vec::with_capacity(out_size);
    for o in 0..out_size {
        let center = (o as f64 + 0.5) * ratio - 0.5;
        let first = (center - support).ceil() as isize;
        let last = (center + support).floor() as isize;
        let mut ws: Vec<f64> = (first..=last)
            .map(|i| cubic_kernel((i as f64 - center) / filter_scale))
            .collect();
        let sum: f64 = ws.iter().sum();
        for w in &mut ws {
            *w /= sum;
        }
        start.push(first);
        weights.push(ws);
    }
    AxisTaps { start, weights }
}

fn resample_axis<T: Scalar>(
    data: &[T],
    lines: usize,
    in_size: usize,
    taps: &AxisTaps,
) -> Vec<T> {
    let out_size = taps.start.len();
    let mut out = Vec::with_capacity(lines * out_size);
    for line in 0..lines {
        let src = &data[line * in_size..(line + 1) * in_size];
        for o in 0..out_size {
            let first = taps.start[o];
            let mut acc = 0.0f64;
            for (j, &w) in taps.weights[o].iter().enumerate() {
                let idx = (first + j as isize).clamp(0, in_size as isize - 1) as usize;
                acc += w * src[idx].to_f64();
            }
            out.push(T::from_f64(acc));
        }
    }
    out
}

/// Resize to an exact output size. Width pass first, then height.
pub fn bicubic_resize_to<T: Scalar>(image: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.is_empty() || oh == 0 || ow == 0 {
        return Ok(Tensor::zeros(Shape::new(s.n, s.c, oh, ow)));
    }
    if oh == s.h && ow == s.w {
        return Ok(image.clone());
    }
    // Horizontal: every (n, c, y) row is an independent line.
    let hor = if ow == s.w {
        image.data().to_vec()
    } else {
        let taps = axis_taps(s.w, ow);
        resample_axis(image.data(), s.n * s.c * s.h, s.w, &taps)
    };
    if oh == s.h {
        return Tensor::from_vec(Shape::new(s.n, s.c, oh, ow), hor);
    }
    // Vertical: transpose each (h, ow) plane so columns become lines.
    let taps = axis_taps(s.h, oh);
    let planes = s.n * s.c;
    let mut transposed = vec![T::zero(); planes * ow * s.h];
    for p in 0..planes {
        let src = &hor[p * s.h * ow..(p + 1) * s.h * ow];
        let dst = &mut transposed[p * ow * s.h..(p + 1) * ow * s.h];
        for y in 0..s.h {
            for x in 0..ow {
                dst[x * s.h + y] = src[y * ow + x];
            }
        }
    }
    let ver = resample_axis(&transposed, planes * ow, s.h, &taps);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    for p in 0..planes {
        let src = &ver[p * ow * oh..(p + 1) * ow * oh];
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for x in 0..ow {
            for y in 0..oh {
                dst[y * ow + x] = src[x * oh + y];
            }
        }
    }
    Ok(out)
}

/// Resize by a positive rational factor; output dims are round(dim * scale).
pub fn bicubic_resize<T: Scalar>(image: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    if !(scale > 0.0) {
        return Err(Error::InvalidArg(format!("resize scale must be > 0, got {scale}")));
    }
    let s = image.shape();
    let oh = (s.h as f64 * scale).round() as usize;
    let ow = (s.w as f64 * scale).round() as usize;
    bicubic_resize_to(image, oh, ow)
}

/// BT.601 luminance of an RGB image with values in [0, 255]:
/// Y = 16 + (65.481 R + 128.553 G + 24.966 B) / 255, in [16, 235].
pub fn rgb_to_luminance<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.c != 3 {
        return Err(Error::ShapeMismatch {
            context: "rgb_to_luminance",
            expected: "3 channels".into(),
            got: s.to_string(),
        });
    }
    let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let r = image.at(n, 0, y, x).to_f64();
                let g = image.at(n, 1, y, x).to_f64();
                let b = image.at(n, 2, y, x).to_f64();
                let yv = 16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0;
                *out.at_mut(n, 0, y, x) = T::from_f64(yv);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_one_is_identity() {
        let mut rng = crate::rng::seeded(17);
        let img = crate::rng::uniform_tensor::<f32>(Shape::new(1, 3, 5, 7), 0.0, 255.0, &mut rng);
        let out = bicubic_resize(&img, 1.0).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn constant_image_stays_constant() {
        for &scale in &[0.5, 2.0, 3.0, 1.0 / 3.0] {
            let img = Tensor::full(Shape::new(1, 1, 9, 12), 77.5f32);
            let out = bicubic_resize(&img, scale).unwrap();
            for &v in out.data() {
                assert!((v - 77.5).abs() < 1e-4, "scale {scale}: {v}");
            }
        }
    }

    #[test]
    fn weights_form_partition_of_unity() {
        for &(in_size, out_size) in &[(4usize, 8usize), (8, 4), (10, 3), (3, 10)] {
            let taps = axis_taps(in_size, out_size);
            for ws in &taps.weights {
                let sum: f64 = ws.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    /// Independent scalar evaluation of the cubic kernel at each phase for a
    /// 1D ramp, with clamped edges — the oracle for the upscale path.
    fn ramp_upscale_oracle(input: &[f64], out_size: usize) -> Vec<f64> {
        let in_size = input.len();
        let ratio = in_size as f64 / out_size as f64;
        (0..out_size)
            .map(|o| {
                let center = (o as f64 + 0.5) * ratio - 0.5;
                let first = (center - 2.0).ceil() as isize;
                let last = (center + 2.0).floor() as isize;
                let mut num = 0.0;
                let mut den = 0.0;
                for i in first..=last {
                    let w = cubic_kernel(i as f64 - center);
                    let idx = i.clamp(0, in_size as isize - 1) as usize;
                    num += w * input[idx];
                    den += w;
                }
                num / den
            })
            .collect()
    }

    #[test]
    fn ramp_upscale_matches_scalar_oracle() {
        let ramp = vec![0.0f64, 1.0, 2.0, 3.0];
        let img = Tensor::from_vec(
            Shape::new(1, 1, 1, 4),
            ramp.iter().map(|&v| v as f32).collect(),
        )
        .unwrap();
        let out = bicubic_resize_to(&img, 1, 8).unwrap();
        let want = ramp_upscale_oracle(&ramp, 8);
        assert_eq!(out.shape(), Shape::new(1, 1, 1, 8));
        for (got, want) in out.data().iter().zip(&want) {
            assert!((*got as f64 - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn luminance_anchors() {
        let black = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![0.0f32, 0.0, 0.0]).unwrap();
        assert!((rgb_to_luminance(&black).unwrap().data()[0] - 16.0).abs() < 1e-5);

        let white = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![255.0f32, 255.0, 255.0]).unwrap();
        assert!((rgb_to_luminance(&white).unwrap().data()[0] - 235.0).abs() < 1e-3);

        let red = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![255.0f32, 0.0, 0.0]).unwrap();
        assert!((rgb_to_luminance(&red).unwrap().data()[0] - 81.481).abs() < 1e-3);
    }

    #[test]
    fn luminance_rejects_non_rgb() {
        let gray = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        assert!(rgb_to_luminance(&gray).is_err());
    }
}
