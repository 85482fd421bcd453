//! PSNR and SSIM under the super-resolution evaluation protocol: crop
//! `scale` pixels from every border, convert RGB to the BT.601 luminance
//! channel, and compute the metric there on the 0-255 range.

use crate::error::{Error, Result};
use crate::resize::rgb_to_luminance;
use crate::tensor::{Shape, Tensor};

fn crop_border(t: &Tensor<f32>, border: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    if s.h <= 2 * border || s.w <= 2 * border {
        return Err(Error::ShapeMismatch {
            context: "crop_border",
            expected: format!("image larger than 2x border {border}"),
            got: s.to_string(),
        });
    }
    let (oh, ow) = (s.h - 2 * border, s.w - 2 * border);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..oh {
                for x in 0..ow {
                    *out.at_mut(n, c, y, x) = t.at(n, c, y + border, x + border);
                }
            }
        }
    }
    Ok(out)
}

/// Border-cropped luminance plane. RGB inputs go through the BT.601
/// transform; single-channel inputs are taken as luminance directly.
fn protocol_luminance(img: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
    let cropped = crop_border(img, scale)?;
    match cropped.shape().c {
        1 => Ok(cropped),
        3 => rgb_to_luminance(&cropped),
        _ => Err(Error::ShapeMismatch {
            context: "metrics",
            expected: "1 or 3 channels".into(),
            got: cropped.shape().to_string(),
        }),
    }
}

fn check_same_shape(sr: &Tensor<f32>, hr: &Tensor<f32>) -> Result<()> {
    if sr.shape() != hr.shape() {
        return Err(Error::ShapeMismatch {
            context: "metrics",
            expected: hr.shape().to_string(),
            got: sr.shape().to_string(),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; identical images report +infinity.
pub fn psnr(sr: &Tensor<f32>, hr: &Tensor<f32>, scale: usize) -> Result<f64> {
    check_same_shape(sr, hr)?;
    let a = protocol_luminance(sr, scale)?;
    let b = protocol_luminance(hr, scale)?;
    let mut mse = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = (*x as f64) - (*y as f64);
        mse += d * d;
    }
    mse /= a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 255.0;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable valid-mode Gaussian filter over an (h, w) f64 plane.
fn gauss_valid(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let win = gaussian_window();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut hor = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, &wt) in win.iter().enumerate() {
                acc += wt * plane[y * w + x + t];
            }
            hor[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, &wt) in win.iter().enumerate() {
                acc += wt * hor[(y + t) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, oh, ow)
}

/// Structural similarity on the luminance channel: 11x11 Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 255, mean over valid
/// windows.
pub fn ssim(sr: &Tensor<f32>, hr: &Tensor<f32>, scale: usize) -> Result<f64> {
    check_same_shape(sr, hr)?;
    let a = protocol_luminance(sr, scale)?;
    let b = protocol_luminance(hr, scale)?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::ShapeMismatch {
            context: "ssim",
            expected: format!("cropped image at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
            got: format!("{}x{}", s.h, s.w),
        });
    }
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();

    let (mu_x, oh, ow) = gauss_valid(&x, s.h, s.w);
    let (mu_y, ..) = gauss_valid(&y, s.h, s.w);
    let (e_xx, ..) = gauss_valid(&xx, s.h, s.w);
    let (e_yy, ..) = gauss_valid(&yy, s.h, s.w);
    let (e_xy, ..) = gauss_valid(&xy, s.h, s.w);

    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);
    let mut total = 0.0f64;
    for i in 0..oh * ow {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = e_xx[i] - mx * mx;
        let var_y = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
    }
    Ok(total / (oh * ow) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn const_rgb(v: f32, h: usize, w: usize) -> Tensor<f32> {
        Tensor::full(Shape::new(1, 3, h, w), v)
    }

    #[test]
    fn identical_images_hit_the_sentinels() {
        let mut rng = crate::rng::seeded(12);
        let img = crate::rng::uniform_tensor::<f32>(Shape::new(1, 3, 24, 24), 0.0, 255.0, &mut rng);
        assert_eq!(psnr(&img, &img, 2).unwrap(), f64::INFINITY);
        assert!((ssim(&img, &img, 2).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_luminance_offset_16_gives_24_05_db() {
        // Single-channel planes offset by exactly 16: MSE = 256,
        // PSNR = 20 log10(255/16) = 24.0486 dB.
        let hr = Tensor::full(Shape::new(1, 1, 20, 20), 100.0f32);
        let sr = Tensor::full(Shape::new(1, 1, 20, 20), 116.0f32);
        let db = psnr(&sr, &hr, 2).unwrap();
        assert!((db - 24.0486).abs() < 0.01, "got {db}");
    }

    #[test]
    fn halving_the_error_adds_six_db() {
        let hr = Tensor::full(Shape::new(1, 1, 16, 16), 100.0f32);
        let sr16 = Tensor::full(Shape::new(1, 1, 16, 16), 116.0f32);
        let sr8 = Tensor::full(Shape::new(1, 1, 16, 16), 108.0f32);
        let gain = psnr(&sr8, &hr, 2).unwrap() - psnr(&sr16, &hr, 2).unwrap();
        assert!((gain - 6.0206).abs() < 1e-3, "gain {gain}");
    }

    #[test]
    fn inverted_image_scores_far_below_one() {
        let mut rng = crate::rng::seeded(5);
        let hr = crate::rng::uniform_tensor::<f32>(Shape::new(1, 3, 32, 32), 0.0, 255.0, &mut rng);
        let sr = hr.map(|v| 255.0 - v);
        let v = ssim(&sr, &hr, 2).unwrap();
        assert!(v < 0.5 && v >= -1.0, "got {v}");
    }

    #[test]
    fn image_smaller_than_window_errors() {
        let img = const_rgb(10.0, 12, 12); // 8x8 after crop, below the 11-tap window
        assert!(ssim(&img, &img, 2).is_err());
    }

    /// Direct per-window reference implementation.
    fn ssim_naive(a: &Tensor<f32>, b: &Tensor<f32>, scale: usize) -> f64 {
        let a = protocol_luminance(a, scale).unwrap();
        let b = protocol_luminance(b, scale).unwrap();
        let s = a.shape();
        let win = gaussian_window();
        let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
        let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);
        let mut total = 0.0;
        let mut count = 0usize;
        for wy in 0..=(s.h - SSIM_WINDOW) {
            for wx in 0..=(s.w - SSIM_WINDOW) {
                let (mut mx, mut my) = (0.0f64, 0.0f64);
                let (mut exx, mut eyy, mut exy) = (0.0f64, 0.0f64, 0.0f64);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = win[dy] * win[dx];
                        let av = a.at(0, 0, wy + dy, wx + dx) as f64;
                        let bv = b.at(0, 0, wy + dy, wx + dx) as f64;
                        mx += wgt * av;
                        my += wgt * bv;
                        exx += wgt * av * av;
                        eyy += wgt * bv * bv;
                        exy += wgt * av * bv;
                    }
                }
                let var_x = exx - mx * mx;
                let var_y = eyy - my * my;
                let cov = exy - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_sliding_window_reference() {
        let mut rng = crate::rng::seeded(33);
        let hr = crate::rng::uniform_tensor::<f32>(Shape::new(1, 3, 28, 26), 0.0, 255.0, &mut rng);
        let noise = crate::rng::uniform_tensor::<f32>(Shape::new(1, 3, 28, 26), -20.0, 20.0, &mut rng);
        let sr = crate::tensor::add(&hr, &noise).unwrap().map(|v| v.clamp(0.0, 255.0));
        let fast = ssim(&sr, &hr, 2).unwrap();
        let naive = ssim_naive(&sr, &hr, 2);
        assert!((fast - naive).abs() < 1e-6, "{fast} vs {naive}");
    }

    #[test]
    fn psnr_invariant_under_shared_dihedral_transform() {
        let mut rng = crate::rng::seeded(21);
        let hr = crate::rng::uniform_tensor::<f32>(Shape::new(1, 3, 20, 20), 0.0, 255.0, &mut rng);
        let noise = crate::rng::uniform_tensor::<f32>(Shape::new(1, 3, 20, 20), -9.0, 9.0, &mut rng);
        let sr = crate::tensor::add(&hr, &noise).unwrap();
        let base = psnr(&sr, &hr, 2).unwrap();
        for k in 0..8 {
            let t_sr = crate::dataset::dihedral(&sr, k);
            let t_hr = crate::dataset::dihedral(&hr, k);
            let v = psnr(&t_sr, &t_hr, 2).unwrap();
            assert!((v - base).abs() < 1e-9, "transform {k}: {v} vs {base}");
        }
    }
}
