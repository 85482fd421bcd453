//! PNG image input and output. Images load as NCHW tensors with values in
//! [0, 255] single precision; 3-channel RGB and 1-channel grayscale are
//! supported on both sides.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            let mut t = Tensor::zeros(Shape::new(1, 1, h as usize, w as usize));
            for (x, y, p) in g.enumerate_pixels() {
                *t.at_mut(0, 0, y as usize, x as usize) = p.0[0] as f32;
            }
            t
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            let mut t = Tensor::zeros(Shape::new(1, 3, h as usize, w as usize));
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    *t.at_mut(0, c, y as usize, x as usize) = p.0[c] as f32;
                }
            }
            t
        }
    })
}

/// Write a (1, 3, h, w) or (1, 1, h, w) tensor with values in [0, 255];
/// values are clamped and rounded to 8 bits.
pub fn save_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || (s.c != 1 && s.c != 3) {
        return Err(Error::ShapeMismatch {
            context: "save_png",
            expected: "1x1xHxW or 1x3xHxW".into(),
            got: s.to_string(),
        });
    }
    let to_u8 = |v: f32| -> u8 { v.round().clamp(0.0, 255.0) as u8 };
    let write_err = |e: image::ImageError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    if s.c == 1 {
        let mut img = GrayImage::new(s.w as u32, s.h as u32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            p.0[0] = to_u8(image.at(0, 0, y as usize, x as usize));
        }
        img.save(path).map_err(write_err)
    } else {
        let mut img = RgbImage::new(s.w as u32, s.h as u32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            for c in 0..3 {
                p.0[c] = to_u8(image.at(0, c, y as usize, x as usize));
            }
        }
        img.save(path).map_err(write_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_rgb_and_gray() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::rng::seeded(4);
        let rgb = crate::rng::uniform_tensor::<f32>(Shape::new(1, 3, 6, 5), 0.0, 255.0, &mut rng)
            .map(|v| v.round());
        let p = dir.path().join("rgb.png");
        save_png(&p, &rgb).unwrap();
        assert_eq!(load_png(&p).unwrap(), rgb);

        let gray = crate::rng::uniform_tensor::<f32>(Shape::new(1, 1, 4, 7), 0.0, 255.0, &mut rng)
            .map(|v| v.round());
        let p = dir.path().join("gray.png");
        save_png(&p, &gray).unwrap();
        assert_eq!(load_png(&p).unwrap(), gray);
    }

    #[test]
    fn missing_file_is_an_image_error() {
        let err = load_png(Path::new("/nonexistent/nope.png")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
