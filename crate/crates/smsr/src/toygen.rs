//! Procedural toy images for desk-scale training: small RGB pictures with
//! sharp edges and varied textures, generated deterministically from a seed
//! so the committed corpus can always be regenerated.

use std::path::Path;

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Shape, Tensor};

fn blank(size: usize) -> Tensor<f32> {
    Tensor::zeros(Shape::new(1, 3, size, size))
}

fn put(t: &mut Tensor<f32>, y: usize, x: usize, rgb: [f32; 3]) {
    for (c, &v) in rgb.iter().enumerate() {
        *t.at_mut(0, c, y, x) = v;
    }
}

/// One toy image by index; every index is a different pattern family.
pub fn toy_image(index: usize, size: usize) -> Tensor<f32> {
    let mut rng = crate::rng::seeded(0x70f0_0000 ^ index as u64);
    let mut img = blank(size);
    match index % 8 {
        0 => {
            // Diagonal stripes of two random colors, frequency ramps across x.
            let (a, b) = contrast_pair(&mut rng);
            for y in 0..size {
                for x in 0..size {
                    let period = 6 + x / 24;
                    let stripe = ((x + 2 * y) / period) % 2 == 0;
                    put(&mut img, y, x, if stripe { a } else { b });
                }
            }
        }
        1 => {
            // Two-scale checkerboard.
            let (a, b) = contrast_pair(&mut rng);
            for y in 0..size {
                for x in 0..size {
                    let coarse = (y / 16 + x / 16) % 2 == 0;
                    let fine = (y / 3 + x / 3) % 2 == 0;
                    let mix = if coarse { a } else { b };
                    let v = if fine { mix } else { [mix[0] * 0.4, mix[1] * 0.4, mix[2] * 0.4] };
                    put(&mut img, y, x, v);
                }
            }
        }
        2 => {
            // Concentric rings.
            let (a, b) = contrast_pair(&mut rng);
            let (cy, cx) = (size as f32 / 2.0, size as f32 / 2.0);
            for y in 0..size {
                for x in 0..size {
                    let r = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
                    let ring = (r / 7.0) as usize % 2 == 0;
                    put(&mut img, y, x, if ring { a } else { b });
                }
            }
        }
        3 => {
            // Random rectangles over a gradient background.
            for y in 0..size {
                for x in 0..size {
                    let g = 40.0 + 120.0 * (x as f32 / size as f32);
                    put(&mut img, y, x, [g, g * 0.8, 200.0 - g * 0.5]);
                }
            }
            for _ in 0..24 {
                let color = rand_color(&mut rng);
                let y0 = rng.gen_range(0..size - 8);
                let x0 = rng.gen_range(0..size - 8);
                let h = rng.gen_range(6..size / 3).min(size - y0);
                let w = rng.gen_range(6..size / 3).min(size - x0);
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        put(&mut img, y, x, color);
                    }
                }
            }
        }
        4 => {
            // Angular starburst.
            let (a, b) = contrast_pair(&mut rng);
            let (cy, cx) = (size as f32 / 2.0, size as f32 / 2.0);
            for y in 0..size {
                for x in 0..size {
                    let ang = (y as f32 - cy).atan2(x as f32 - cx);
                    let sector = ((ang + std::f32::consts::PI) / (std::f32::consts::PI / 9.0)) as usize;
                    put(&mut img, y, x, if sector % 2 == 0 { a } else { b });
                }
            }
        }
        5 => {
            // Smooth plasma with a thin dark grid on top.
            for y in 0..size {
                for x in 0..size {
                    let fy = y as f32 / size as f32;
                    let fx = x as f32 / size as f32;
                    let v = ((fx * 9.0).sin() + (fy * 7.0).cos() + ((fx + fy) * 11.0).sin()) / 3.0;
                    let g = 127.5 + 110.0 * v;
                    put(&mut img, y, x, [g, 255.0 - g, (g * 0.5 + 64.0).min(255.0)]);
                    if y % 20 == 0 || x % 20 == 0 {
                        put(&mut img, y, x, [15.0, 15.0, 15.0]);
                    }
                }
            }
        }
        6 => {
            // Polka dots on a vertical gradient.
            for y in 0..size {
                for x in 0..size {
                    let g = 230.0 - 160.0 * (y as f32 / size as f32);
                    put(&mut img, y, x, [g * 0.7, g, g * 0.9]);
                }
            }
            for _ in 0..36 {
                let color = rand_color(&mut rng);
                let cy = rng.gen_range(0..size) as i32;
                let cx = rng.gen_range(0..size) as i32;
                let r = rng.gen_range(3..12) as i32;
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dy * dy + dx * dx <= r * r {
                            let (y, x) = (cy + dy, cx + dx);
                            if y >= 0 && x >= 0 && (y as usize) < size && (x as usize) < size {
                                put(&mut img, y as usize, x as usize, color);
                            }
                        }
                    }
                }
            }
        }
        _ => {
            // Stroke field: short bright segments on a dark background.
            for y in 0..size {
                for x in 0..size {
                    put(&mut img, y, x, [24.0, 28.0, 36.0]);
                }
            }
            for _ in 0..160 {
                let color = rand_color(&mut rng);
                let mut y = rng.gen_range(0..size) as i32;
                let mut x = rng.gen_range(0..size) as i32;
                let (dy, dx) = match rng.gen_range(0..4) {
                    0 => (0, 1),
                    1 => (1, 0),
                    2 => (1, 1),
                    _ => (1, -1),
                };
                let len = rng.gen_range(6..22);
                for _ in 0..len {
                    if y >= 0 && x >= 0 && (y as usize) < size && (x as usize) < size {
                        put(&mut img, y as usize, x as usize, color);
                    }
                    y += dy;
                    x += dx;
                }
            }
        }
    }
    img
}

fn rand_color(rng: &mut crate::rng::EngineRng) -> [f32; 3] {
    [
        rng.gen_range(0.0..=255.0f32).round(),
        rng.gen_range(0.0..=255.0f32).round(),
        rng.gen_range(0.0..=255.0f32).round(),
    ]
}

/// Two colors with guaranteed luminance contrast.
fn contrast_pair(rng: &mut crate::rng::EngineRng) -> ([f32; 3], [f32; 3]) {
    let a = [
        rng.gen_range(140.0..=255.0f32).round(),
        rng.gen_range(140.0..=255.0f32).round(),
        rng.gen_range(0.0..=255.0f32).round(),
    ];
    let b = [255.0 - a[0], 255.0 - a[1], rng.gen_range(0.0..=115.0f32).round()];
    (a, b)
}

/// Write `count` toy PNGs (toy_00.png ...) of `size` x `size` into `dir`.
pub fn generate_toy_dataset(dir: &Path, count: usize, size: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| crate::error::Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for i in 0..count {
        let img = toy_image(i, size);
        crate::io::save_png(&dir.join(format!("toy_{i:02}.png")), &img)?;
    }
    Ok(())
}
