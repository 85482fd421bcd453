//! Spatial and channel mask generation, the sparsity term and its
//! regularization loss, annealing schedules, and the gradient-threshold
//! heuristic mask baseline.
//!
//! Masks come in two modes. During training they are softened through a
//! two-way Gumbel softmax so gradients flow everywhere; at inference the
//! Gumbel softmax is replaced by an argmax over the same logits, turning
//! every mask binary. Component 1 of the two-way axis is the "keep" slot:
//! a mask entry is 1 where the keep logit wins, with ties resolved to 1.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::EngineRng;
use crate::tensor::{self, Shape, Tensor};

/// Softened or binary mask mode.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum MaskMode {
    Softened,
    Binary,
}

/// Per-pixel mask over one feature plane; 1 marks "important" locations.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMask {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
    pub mode: MaskMode,
}

impl SpatialMask {
    pub fn new(h: usize, w: usize, values: Vec<f32>, mode: MaskMode) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::ShapeMismatch {
                context: "SpatialMask",
                expected: format!("{h}x{w} = {} values", h * w),
                got: format!("{}", values.len()),
            });
        }
        let mask = SpatialMask { h, w, values, mode };
        mask.validate()?;
        Ok(mask)
    }

    fn validate(&self) -> Result<()> {
        for (i, &v) in self.values.iter().enumerate() {
            // Softened entries live in (0, 1) mathematically, but saturated
            // logits round to the endpoints in single precision.
            let ok = match self.mode {
                MaskMode::Softened => (0.0..=1.0).contains(&v),
                MaskMode::Binary => v == 0.0 || v == 1.0,
            };
            if !ok {
                return Err(Error::NonBinaryMask { value: v, index: i });
            }
        }
        Ok(())
    }

    pub fn density(&self) -> f32 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f32>() / self.values.len() as f32
    }

    /// Count of important (== 1) locations; only meaningful in binary mode.
    pub fn important_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn as_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(Shape::new(1, 1, self.h, self.w), self.values.clone())
            .expect("length checked at construction")
    }
}

/// Per-channel mask; 1 marks dense (preserved) channels computed everywhere,
/// 0 marks sparse channels computed only at important locations.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMask {
    pub values: Vec<f32>,
    pub mode: MaskMode,
}

impl ChannelMask {
    pub fn new(values: Vec<f32>, mode: MaskMode) -> Result<Self> {
        let mask = ChannelMask { values, mode };
        for (i, &v) in mask.values.iter().enumerate() {
            let ok = match mode {
                MaskMode::Softened => (0.0..=1.0).contains(&v),
                MaskMode::Binary => v == 0.0 || v == 1.0,
            };
            if !ok {
                return Err(Error::NonBinaryMask { value: v, index: i });
            }
        }
        Ok(mask)
    }

    pub fn all_dense(c: usize) -> Self {
        ChannelMask {
            values: vec![1.0; c],
            mode: MaskMode::Binary,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dense_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn require_binary(&self) -> Result<()> {
        if self.mode != MaskMode::Binary {
            return Err(Error::NonBinaryMask {
                value: self.values.first().copied().unwrap_or(0.0),
                index: 0,
            });
        }
        Ok(())
    }

    /// (1, C, 1, 1) tensor for broadcasting against NCHW features.
    pub fn as_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(
            Shape::new(1, self.values.len(), 1, 1),
            self.values.clone(),
        )
        .expect("vector length equals shape")
    }
}

/// Gumbel(0, 1) noise: g = -log(-log(u)) with u clamped into
/// [1e-12, 1 - 1e-12] so the double log stays finite.
#[derive(Clone, Debug)]
pub struct GumbelNoise {
    pub tensor: Tensor<f32>,
}

impl GumbelNoise {
    pub fn sample(shape: Shape, rng: &mut EngineRng) -> Self {
        let data = (0..shape.len())
            .map(|_| {
                let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
                (-(-u.ln()).ln()) as f32
            })
            .collect();
        GumbelNoise {
            tensor: Tensor::from_vec(shape, data).expect("length matches shape"),
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        GumbelNoise {
            tensor: Tensor::zeros(shape),
        }
    }
}

/// Two-way Gumbel softmax: the keep-component (channel 1) slice of
/// softmax((logits + noise) / tau) over a 2-channel axis. The logits tensor
/// must have exactly two channels; the result drops to a single channel.
pub fn gumbel_softmax(logits: &Tensor<f32>, noise: &GumbelNoise, tau: f32) -> Result<Tensor<f32>> {
    if tau <= 0.0 {
        return Err(Error::InvalidArg(format!("temperature must be > 0, got {tau}")));
    }
    let s = logits.shape();
    if s.c != 2 {
        return Err(Error::ShapeMismatch {
            context: "gumbel_softmax",
            expected: "2-way logits (c = 2)".into(),
            got: s.to_string(),
        });
    }
    let noisy = tensor::add(logits, &noise.tensor)?;
    let scaled = noisy.map(|v| v / tau);
    let soft = tensor::softmax_channels(&scaled);
    tensor::narrow_channels(&soft, 1, 1)
}

/// Binary mask from 2-way logits: 1 where the keep logit (channel 1) is at
/// least the drop logit (channel 0); exact ties resolve to 1 (preserve).
pub fn argmax_mask(logits: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = logits.shape();
    if s.c != 2 {
        return Err(Error::ShapeMismatch {
            context: "argmax_mask",
            expected: "2-way logits (c = 2)".into(),
            got: s.to_string(),
        });
    }
    let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                *out.at_mut(n, 0, y, x) = if logits.at(n, 1, y, x) >= logits.at(n, 0, y, x) {
                    1.0
                } else {
                    0.0
                };
            }
        }
    }
    Ok(out)
}

/// Spatial mask from hourglass logits (1, 2, H, W): softened mode applies the
/// Gumbel softmax, binary mode applies argmax (noise ignored).
pub fn spatial_mask_from_logits(
    logits: &Tensor<f32>,
    noise: &GumbelNoise,
    tau: f32,
    mode: MaskMode,
) -> Result<SpatialMask> {
    let s = logits.shape();
    let m = match mode {
        MaskMode::Softened => gumbel_softmax(logits, noise, tau)?,
        MaskMode::Binary => argmax_mask(logits)?,
    };
    SpatialMask::new(s.h, s.w, m.into_data(), mode)
}

/// Channel mask from auxiliary logits stored as a (1, 2, 1, C) tensor.
pub fn channel_mask_from_logits(
    logits: &Tensor<f32>,
    noise: &GumbelNoise,
    tau: f32,
    mode: MaskMode,
) -> Result<ChannelMask> {
    let m = match mode {
        MaskMode::Softened => gumbel_softmax(logits, noise, tau)?,
        MaskMode::Binary => argmax_mask(logits)?,
    };
    ChannelMask::new(m.into_data(), mode)
}

/// Sparsity term: the ratio of activated locations in a layer's output,
///   eta = (1 / (C H W)) * sum_{c,x,y} [(1 - M_ch[c]) * M_spa[x,y] + M_ch[c]].
/// Dense channels count every location; sparse channels count only the
/// locations the spatial mask keeps.
pub fn sparsity_term(m_ch: &ChannelMask, m_spa: &SpatialMask) -> f32 {
    let c = m_ch.len();
    let hw = m_spa.values.len();
    if c == 0 || hw == 0 {
        return 0.0;
    }
    let mut sum = 0.0f64;
    for &mc in &m_ch.values {
        for &ms in &m_spa.values {
            sum += ((1.0 - mc) * ms + mc) as f64;
        }
    }
    (sum / (c as f64 * hw as f64)) as f32
}

/// Sparsity regularization loss: the mean of all K*L per-layer terms.
pub fn reg_loss(etas: &[f32]) -> f32 {
    if etas.is_empty() {
        return 0.0;
    }
    etas.iter().sum::<f32>() / etas.len() as f32
}

/// Temperature annealing: tau = max(0.4, 1 - t / t_temp).
pub fn temperature_schedule(epoch: usize, t_temp: usize) -> f32 {
    (1.0 - epoch as f32 / t_temp as f32).max(0.4)
}

/// Regularization warmup: lambda = lambda0 * min(t / t_warm, 1).
pub fn lambda_schedule(epoch: usize, lambda0: f32, t_warm: usize) -> f32 {
    lambda0 * (epoch as f32 / t_warm as f32).min(1.0)
}

/// Fixed spatial mask from image gradients: 1 where the central-difference
/// gradient magnitude of the luminance (0-255 scale) exceeds `alpha`.
/// Borders use clamped neighbours.
pub fn heuristic_spatial_mask(luminance: &Tensor<f32>, alpha: f32) -> Result<SpatialMask> {
    let s = luminance.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::ShapeMismatch {
            context: "heuristic_spatial_mask",
            expected: "single-channel 1xCxHxW with c = 1".into(),
            got: s.to_string(),
        });
    }
    let mut values = vec![0.0f32; s.h * s.w];
    for y in 0..s.h {
        for x in 0..s.w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(s.w - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(s.h - 1);
            let gx = (luminance.at(0, 0, y, xp) - luminance.at(0, 0, y, xm)) / 2.0;
            let gy = (luminance.at(0, 0, yp, x) - luminance.at(0, 0, ym, x)) / 2.0;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag > alpha {
                values[y * s.w + x] = 1.0;
            }
        }
    }
    SpatialMask::new(s.h, s.w, values, MaskMode::Binary)
}

/// Per-channel ratio of exact zeros in a feature map, the probe used to
/// inspect post-ReLU sparsity.
pub fn feature_sparsity_probe(feature: &Tensor<f32>) -> Vec<f32> {
    let s = feature.shape();
    let hw = (s.h * s.w).max(1);
    let mut out = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            let mut zeros = 0usize;
            for y in 0..s.h {
                for x in 0..s.w {
                    if feature.at(n, c, y, x) == 0.0 {
                        zeros += 1;
                    }
                }
            }
            out.push(zeros as f32 / hw as f32);
        }
    }
    out
}

/// Grayscale image (0 or 255) visualizing a spatial mask.
pub fn spatial_mask_image(mask: &SpatialMask) -> Tensor<f32> {
    Tensor::from_vec(
        Shape::new(1, 1, mask.h, mask.w),
        mask.values.iter().map(|&v| v * 255.0).collect(),
    )
    .expect("mask length matches shape")
}

/// L-row by C-column strip (0 or 255) visualizing one module's channel masks.
pub fn channel_mask_strip(masks: &[ChannelMask]) -> Result<Tensor<f32>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArg("channel_mask_strip needs at least one mask".into()))?;
    let c = first.len();
    let mut data = Vec::with_capacity(masks.len() * c);
    for m in masks {
        if m.len() != c {
            return Err(Error::ShapeMismatch {
                context: "channel_mask_strip",
                expected: format!("{c} channels"),
                got: format!("{}", m.len()),
            });
        }
        data.extend(m.values.iter().map(|&v| v * 255.0));
    }
    Tensor::from_vec(Shape::new(1, 1, masks.len(), c), data)
}
