//! The full sparse-mask super-resolution network: a two-conv head, K sparse
//! mask modules (each L masked convolutions sharing one spatial mask, plus
//! per-layer channel masks, an hourglass spatial-mask predictor and a 1x1
//! fusion), a collect stage over the concatenated module outputs, and a
//! sub-pixel tail with a bicubic global skip.

use crate::autodiff::{Tape, ValueId};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::gemm::MacCounter;
use crate::masks::{
    argmax_mask, heuristic_spatial_mask, ChannelMask, GumbelNoise, MaskMode, SpatialMask,
};
use crate::optim::ParamStore;
use crate::resize::{bicubic_resize_to, rgb_to_luminance};
use crate::rng::EngineRng;
use crate::sparse::{masked_conv_train, sparse_mask_conv_infer, split_kernel, ImportantIndexList};
use crate::tensor::{self, Shape, Tensor};

/// Slots of one convolution's parameters in the model's store.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: usize,
    pub bias: usize,
    pub stride: usize,
    pub padding: usize,
}

/// The spatial-mask predictor: stride-2 reduce, 3x3 refine, nearest 2x
/// upsample back to the input size, and a 3x3 projection to 2-way logits.
#[derive(Clone, Copy, Debug)]
pub struct HourglassParams {
    pub reduce: ConvParams,
    pub refine: ConvParams,
    pub project: ConvParams,
}

/// One sparse mask module's parameter slots.
#[derive(Clone, Debug)]
pub struct SmmWeights {
    /// L body convolutions (C -> C, 3x3).
    pub convs: Vec<ConvParams>,
    /// L channel-mask logit tensors, each stored as (1, 2, 1, C).
    pub channel_logits: Vec<usize>,
    pub hourglass: HourglassParams,
    /// 1x1 fusion of the L concatenated layer outputs back to C channels.
    pub fusion: ConvParams,
}

/// Spatial-mask source: learned hourglass logits, or a fixed
/// gradient-threshold mask computed from the input image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpatialMaskSource {
    Learned,
    GradientThreshold { alpha: f32 },
}

#[derive(Debug)]
pub struct SmsrModel {
    pub scale: usize,
    pub num_modules: usize,
    pub layers_per_module: usize,
    pub channels: usize,
    pub mask_source: SpatialMaskSource,
    pub head: [ConvParams; 2],
    pub smms: Vec<SmmWeights>,
    /// 1x1 over the K concatenated module outputs, then a 3x3 refine.
    pub collect_point: ConvParams,
    pub collect_refine: ConvParams,
    pub tail: ConvParams,
    pub store: ParamStore<f32>,
}

fn add_conv(
    store: &mut ParamStore<f32>,
    rng: &mut EngineRng,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> ConvParams {
    let fan_in = c_in * k * k;
    let weight = store.add(
        format!("{name}.weight"),
        crate::rng::he_uniform_tensor(Shape::new(c_out, c_in, k, k), fan_in, rng),
    );
    let bias = store.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, c_out, 1, 1)));
    ConvParams {
        weight,
        bias,
        stride,
        padding,
    }
}

impl SmsrModel {
    /// Fresh model with He-initialized kernels, zero biases, and channel-mask
    /// logits drawn from N(0, 1).
    pub fn new(
        scale: usize,
        num_modules: usize,
        layers_per_module: usize,
        channels: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(2..=4).contains(&scale) {
            return Err(Error::InvalidArg(format!("scale must be 2, 3 or 4, got {scale}")));
        }
        if num_modules == 0 || layers_per_module == 0 || channels < 4 {
            return Err(Error::InvalidArg(
                "model needs K >= 1, L >= 1 and C >= 4".into(),
            ));
        }
        let mut rng = crate::rng::seeded(seed);
        let mut store = ParamStore::new();
        let c = channels;
        let head = [
            add_conv(&mut store, &mut rng, "head.0", c, 3, 3, 1, 1),
            add_conv(&mut store, &mut rng, "head.1", c, c, 3, 1, 1),
        ];
        let mut smms = Vec::with_capacity(num_modules);
        for k in 0..num_modules {
            let convs = (0..layers_per_module)
                .map(|l| add_conv(&mut store, &mut rng, &format!("smm.{k}.conv.{l}"), c, c, 3, 1, 1))
                .collect();
            let channel_logits = (0..layers_per_module)
                .map(|l| {
                    store.add(
                        format!("smm.{k}.logits.{l}"),
                        crate::rng::normal_tensor(Shape::new(1, 2, 1, c), &mut rng),
                    )
                })
                .collect();
            let hourglass = HourglassParams {
                reduce: add_conv(&mut store, &mut rng, &format!("smm.{k}.hourglass.reduce"), c / 4, c, 3, 2, 1),
                refine: add_conv(&mut store, &mut rng, &format!("smm.{k}.hourglass.refine"), c / 4, c / 4, 3, 1, 1),
                project: add_conv(&mut store, &mut rng, &format!("smm.{k}.hourglass.project"), 2, c / 4, 3, 1, 1),
            };
            let fusion = add_conv(
                &mut store,
                &mut rng,
                &format!("smm.{k}.fusion"),
                c,
                layers_per_module * c,
                1,
                1,
                0,
            );
            smms.push(SmmWeights {
                convs,
                channel_logits,
                hourglass,
                fusion,
            });
        }
        let collect_point = add_conv(&mut store, &mut rng, "collect.point", c, num_modules * c, 1, 1, 0);
        let collect_refine = add_conv(&mut store, &mut rng, "collect.refine", c, c, 3, 1, 1);
        let tail = add_conv(&mut store, &mut rng, "tail", 3 * scale * scale, c, 3, 1, 1);
        Ok(SmsrModel {
            scale,
            num_modules,
            layers_per_module,
            channels,
            mask_source: SpatialMaskSource::Learned,
            head,
            smms,
            collect_point,
            collect_refine,
            tail,
            store,
        })
    }

    /// Analytic parameter count from the architecture dimensions alone;
    /// tested against brute-force enumeration of the stored tensors.
    pub fn param_count_analytic(&self) -> usize {
        let c = self.channels;
        let (k, l, s) = (self.num_modules, self.layers_per_module, self.scale);
        let conv = |co: usize, ci: usize, kk: usize| co * ci * kk * kk + co;
        let head = conv(c, 3, 3) + conv(c, c, 3);
        let hourglass = conv(c / 4, c, 3) + conv(c / 4, c / 4, 3) + conv(2, c / 4, 3);
        let smm = l * conv(c, c, 3) + l * 2 * c + hourglass + conv(c, l * c, 1);
        let collect = conv(c, k * c, 1) + conv(c, c, 3);
        let tail = conv(3 * s * s, c, 3);
        head + k * smm + collect + tail
    }

    /// Brute-force enumeration over every stored tensor.
    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    fn conv_spec(&self, p: ConvParams) -> Result<ConvSpec<f32>> {
        ConvSpec::new(
            self.store.value(p.weight).clone(),
            p.stride,
            p.padding,
            Some(self.store.value(p.bias).data().to_vec()),
        )
    }

    /// Fixed spatial masks from the input image's luminance gradients, one
    /// per sample, shared by every module.
    fn heuristic_masks(&self, lr: &Tensor<f32>, alpha: f32) -> Result<Vec<SpatialMask>> {
        let n = lr.shape().n;
        let mut masks = Vec::with_capacity(n);
        for i in 0..n {
            let sample = lr.sample(i);
            let lum = rgb_to_luminance(&sample.map(|v| v * 255.0))?;
            masks.push(heuristic_spatial_mask(&lum, alpha)?);
        }
        Ok(masks)
    }
}

/// Handles into the training tape for one forward pass.
pub struct TrainForward {
    pub tape: Tape<f32>,
    pub sr: ValueId,
    /// K*L sparsity terms, each a scalar on the tape, in (k, l) order.
    pub etas: Vec<ValueId>,
    /// K softened (or fixed binary) spatial masks, each (n, 1, H, W).
    pub spatial_masks: Vec<ValueId>,
    /// K*L softened channel masks, each (1, C, 1, 1), in (k, l) order.
    pub channel_masks: Vec<ValueId>,
}

impl TrainForward {
    /// Mean |mask - 0.5| over every softened mask entry: 0 when masks hover
    /// at 0.5, 0.5 when fully binary.
    pub fn mean_mask_deviation(&self) -> f32 {
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for &id in self.spatial_masks.iter().chain(&self.channel_masks) {
            for &v in self.tape.value(id).data() {
                sum += (v as f64 - 0.5).abs();
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            (sum / count as f64) as f32
        }
    }
}

/// Training-mode forward pass. `noise_rng` draws fresh Gumbel noise for every
/// mask; pass `None` to run noise-free (used by the equivalence tests).
pub fn forward_train(
    model: &SmsrModel,
    lr: &Tensor<f32>,
    tau: f32,
    mut noise_rng: Option<&mut EngineRng>,
) -> Result<TrainForward> {
    if tau <= 0.0 {
        return Err(Error::InvalidArg(format!("temperature must be > 0, got {tau}")));
    }
    let s = lr.shape();
    if s.c != 3 {
        return Err(Error::ShapeMismatch {
            context: "forward_train",
            expected: "RGB input (c = 3)".into(),
            got: s.to_string(),
        });
    }
    let mut tape = Tape::new();
    let store = &model.store;
    let input = tape.leaf(lr.clone());

    let conv_on_tape = |tape: &mut Tape<f32>, x: ValueId, p: ConvParams| -> Result<ValueId> {
        let w = tape.param(store, p.weight);
        let b = tape.param(store, p.bias);
        tape.conv2d(x, w, Some(b), p.stride, p.padding)
    };

    // Head.
    let h0 = conv_on_tape(&mut tape, input, model.head[0])?;
    let h0 = tape.relu(h0);
    let head_out = conv_on_tape(&mut tape, h0, model.head[1])?;

    // Fixed heuristic spatial masks are shared by every module.
    let heuristic: Option<Vec<SpatialMask>> = match model.mask_source {
        SpatialMaskSource::GradientThreshold { alpha } => {
            Some(model.heuristic_masks(lr, alpha)?)
        }
        SpatialMaskSource::Learned => None,
    };

    let ones_ch = tape.leaf(Tensor::ones(Shape::new(1, model.channels, 1, 1)));
    let mut feature = head_out;
    let mut module_outputs = Vec::with_capacity(model.num_modules);
    let mut etas = Vec::new();
    let mut spatial_ids = Vec::new();
    let mut channel_ids = Vec::new();

    for smm in &model.smms {
        let smm_input = feature;
        let fs = tape.value(smm_input).shape();

        // Spatial mask for this module.
        let m_spa = if let Some(masks) = &heuristic {
            let stacked = Tensor::stack_samples(
                &masks.iter().map(|m| m.as_tensor()).collect::<Vec<_>>(),
            )?;
            tape.leaf(stacked)
        } else {
            let d = conv_on_tape(&mut tape, smm_input, smm.hourglass.reduce)?;
            let d = tape.relu(d);
            let r = conv_on_tape(&mut tape, d, smm.hourglass.refine)?;
            let r = tape.relu(r);
            let up = tape.upsample_nearest2x_to(r, fs.h, fs.w)?;
            let logits = conv_on_tape(&mut tape, up, smm.hourglass.project)?;
            let noise_t = match noise_rng.as_deref_mut() {
                Some(rng) => GumbelNoise::sample(tape.value(logits).shape(), rng).tensor,
                None => Tensor::zeros(tape.value(logits).shape()),
            };
            let noise_id = tape.leaf(noise_t);
            let noisy = tape.add(logits, noise_id)?;
            let scaled = tape.affine(noisy, 1.0 / tau, 0.0);
            let soft = tape.softmax_channels(scaled);
            tape.narrow_channels(soft, 1, 1)?
        };
        spatial_ids.push(m_spa);

        // Channel masks for each layer of this module.
        let mut layer_channel_masks = Vec::with_capacity(model.layers_per_module);
        for &logit_slot in &smm.channel_logits {
            let logits = tape.param(store, logit_slot);
            let noise_t = match noise_rng.as_deref_mut() {
                Some(rng) => GumbelNoise::sample(tape.value(logits).shape(), rng).tensor,
                None => Tensor::zeros(tape.value(logits).shape()),
            };
            let noise_id = tape.leaf(noise_t);
            let noisy = tape.add(logits, noise_id)?;
            let scaled = tape.affine(noisy, 1.0 / tau, 0.0);
            let soft = tape.softmax_channels(scaled);
            let sliced = tape.narrow_channels(soft, 1, 1)?;
            let m_ch = tape.reshape(sliced, Shape::new(1, model.channels, 1, 1))?;
            layer_channel_masks.push(m_ch);
            channel_ids.push(m_ch);
        }

        // L masked convolutions; layer l's input mask is layer l-1's output
        // mask, all-dense at the module entry.
        let mut h = smm_input;
        let mut outputs = Vec::with_capacity(model.layers_per_module);
        for (l, conv) in smm.convs.iter().enumerate() {
            let m_in = if l == 0 { ones_ch } else { layer_channel_masks[l - 1] };
            let m_out = layer_channel_masks[l];
            let w = tape.param(store, conv.weight);
            let b = tape.param(store, conv.bias);
            let y = masked_conv_train(&mut tape, h, w, Some(b), m_in, m_out, m_spa, conv.padding)?;
            let y = tape.relu(y);
            outputs.push(y);
            h = y;

            // eta = mean over (n, c, x, y) of (1 - m_ch) * m_spa + m_ch.
            let inv = tape.one_minus(m_out);
            let sparse_part = tape.mul(inv, m_spa)?;
            let combined = tape.add(sparse_part, m_out)?;
            etas.push(tape.mean_all(combined)?);
        }

        let cat = tape.concat_channels(&outputs)?;
        let fused = conv_on_tape(&mut tape, cat, smm.fusion)?;
        feature = tape.add(fused, smm_input)?;
        module_outputs.push(feature);
    }

    // Collect over all module outputs, residual from the head.
    let cat = tape.concat_channels(&module_outputs)?;
    let point = conv_on_tape(&mut tape, cat, model.collect_point)?;
    let point = tape.relu(point);
    let refined = conv_on_tape(&mut tape, point, model.collect_refine)?;
    let body = tape.add(refined, head_out)?;

    // Tail: sub-pixel conv plus the bicubic global skip.
    let pre_shuffle = conv_on_tape(&mut tape, body, model.tail)?;
    let shuffled = tape.pixel_shuffle(pre_shuffle, model.scale)?;
    let skip = bicubic_resize_to(lr, s.h * model.scale, s.w * model.scale)?;
    let skip_id = tape.leaf(skip);
    let sr = tape.add(shuffled, skip_id)?;

    Ok(TrainForward {
        tape,
        sr,
        etas,
        spatial_masks: spatial_ids,
        channel_masks: channel_ids,
    })
}

/// Binary masks of one module for one input.
#[derive(Clone, Debug)]
pub struct SmmMasks {
    pub spatial: SpatialMask,
    pub channel: Vec<ChannelMask>,
}

/// All binary masks the network selected for one input image.
#[derive(Clone, Debug)]
pub struct NetworkMasks {
    pub per_smm: Vec<SmmMasks>,
}

impl NetworkMasks {
    /// Per-layer sparsity terms in (k, l) order.
    pub fn etas(&self) -> Vec<f32> {
        self.per_smm
            .iter()
            .flat_map(|m| {
                m.channel
                    .iter()
                    .map(|ch| crate::masks::sparsity_term(ch, &m.spatial))
            })
            .collect()
    }
}

#[derive(Debug)]
pub struct InferOutput {
    pub sr: Tensor<f32>,
    pub masks: NetworkMasks,
    pub counter: MacCounter,
}

/// Inference-mode forward pass: argmax masks, split kernels, four-branch
/// sparse convolution. Output is clamped to [0, 1]. Batches are processed
/// sample by sample (each sample owns its index lists); the returned masks
/// are those of the last sample.
pub fn forward_infer(model: &SmsrModel, lr: &Tensor<f32>) -> Result<InferOutput> {
    forward_infer_impl(model, lr, None)
}

/// Inference with externally supplied binary masks instead of the model's
/// own decisions. With learned masks the hourglass still runs (and is
/// counted) so timings match a deployed model of the same sparsity; its
/// logits are discarded in favour of the forced masks.
pub fn forward_infer_with_masks(
    model: &SmsrModel,
    lr: &Tensor<f32>,
    forced: &NetworkMasks,
) -> Result<InferOutput> {
    forward_infer_impl(model, lr, Some(forced))
}

fn forward_infer_impl(
    model: &SmsrModel,
    lr: &Tensor<f32>,
    forced: Option<&NetworkMasks>,
) -> Result<InferOutput> {
    let s = lr.shape();
    if s.c != 3 {
        return Err(Error::ShapeMismatch {
            context: "forward_infer",
            expected: "RGB input (c = 3)".into(),
            got: s.to_string(),
        });
    }
    if let Some(f) = forced {
        if f.per_smm.len() != model.num_modules {
            return Err(Error::ShapeMismatch {
                context: "forward_infer_with_masks",
                expected: format!("{} module mask sets", model.num_modules),
                got: format!("{}", f.per_smm.len()),
            });
        }
    }
    let mut counter = MacCounter::new();
    if s.n != 1 {
        let mut outs = Vec::with_capacity(s.n);
        let mut masks = None;
        for i in 0..s.n {
            let one = forward_infer_impl(model, &lr.sample(i), forced)?;
            counter.macs += one.counter.macs;
            outs.push(one.sr);
            masks = Some(one.masks);
        }
        return Ok(InferOutput {
            sr: Tensor::stack_samples(&outs)?,
            masks: masks.expect("batch is non-empty"),
            counter,
        });
    }

    let store = &model.store;
    let run_conv = |x: &Tensor<f32>, p: ConvParams, counter: &mut MacCounter| -> Result<Tensor<f32>> {
        let spec = model.conv_spec(p)?;
        crate::conv::conv2d_counted(x, &spec, counter)
    };

    let h0 = run_conv(lr, model.head[0], &mut counter)?;
    let h0 = tensor::relu(&h0);
    let head_out = run_conv(&h0, model.head[1], &mut counter)?;

    let heuristic = match model.mask_source {
        SpatialMaskSource::GradientThreshold { alpha } => {
            Some(model.heuristic_masks(lr, alpha)?.remove(0))
        }
        SpatialMaskSource::Learned => None,
    };

    let mut feature = head_out.clone();
    let mut module_outputs = Vec::with_capacity(model.num_modules);
    let mut per_smm = Vec::with_capacity(model.num_modules);

    for (k, smm) in model.smms.iter().enumerate() {
        let smm_input = feature.clone();
        let fs = smm_input.shape();

        let own_spatial = if heuristic.is_some() {
            None
        } else {
            let d = tensor::relu(&run_conv(&smm_input, smm.hourglass.reduce, &mut counter)?);
            let r = tensor::relu(&run_conv(&d, smm.hourglass.refine, &mut counter)?);
            let up = tensor::upsample_nearest2x_to(&r, fs.h, fs.w)?;
            let logits = run_conv(&up, smm.hourglass.project, &mut counter)?;
            let m = argmax_mask(&logits)?;
            Some(SpatialMask::new(fs.h, fs.w, m.into_data(), MaskMode::Binary)?)
        };
        let spatial = match (forced, &heuristic, own_spatial) {
            (Some(f), _, _) => f.per_smm[k].spatial.clone(),
            (None, Some(m), _) => m.clone(),
            (None, None, Some(own)) => own,
            (None, None, None) => unreachable!("one spatial mask source always applies"),
        };
        let idx = ImportantIndexList::compile(&spatial)?;

        let channel: Vec<ChannelMask> = match forced {
            Some(f) => f.per_smm[k].channel.clone(),
            None => smm
                .channel_logits
                .iter()
                .map(|&slot| {
                    let m = argmax_mask(store.value(slot))?;
                    ChannelMask::new(m.into_data(), MaskMode::Binary)
                })
                .collect::<Result<_>>()?,
        };

        let mut h = smm_input.clone();
        let mut outputs = Vec::with_capacity(model.layers_per_module);
        for (l, conv) in smm.convs.iter().enumerate() {
            let m_in = if l == 0 {
                ChannelMask::all_dense(model.channels)
            } else {
                channel[l - 1].clone()
            };
            let spec = model.conv_spec(*conv)?;
            let split = split_kernel(&spec, &m_in, &channel[l])?;
            let y = sparse_mask_conv_infer(&h, &split, &idx, &mut counter)?;
            let y = tensor::relu(&y);
            outputs.push(y.clone());
            h = y;
        }
        let refs: Vec<&Tensor<f32>> = outputs.iter().collect();
        let cat = tensor::concat_channels(&refs)?;
        let fused = run_conv(&cat, smm.fusion, &mut counter)?;
        feature = tensor::add(&fused, &smm_input)?;
        module_outputs.push(feature.clone());
        per_smm.push(SmmMasks { spatial, channel });
    }

    let refs: Vec<&Tensor<f32>> = module_outputs.iter().collect();
    let cat = tensor::concat_channels(&refs)?;
    let point = tensor::relu(&run_conv(&cat, model.collect_point, &mut counter)?);
    let refined = run_conv(&point, model.collect_refine, &mut counter)?;
    let body = tensor::add(&refined, &head_out)?;

    let pre_shuffle = run_conv(&body, model.tail, &mut counter)?;
    let shuffled = tensor::pixel_shuffle(&pre_shuffle, model.scale)?;
    let skip = bicubic_resize_to(lr, s.h * model.scale, s.w * model.scale)?;
    let sr = tensor::clamp(&tensor::add(&shuffled, &skip)?, 0.0, 1.0);

    Ok(InferOutput {
        sr,
        masks: NetworkMasks { per_smm },
        counter,
    })
}

/// The maskless vanilla network: every body convolution runs dense, no mask
/// generation at all. This is both the training-mode oracle for forced-dense
/// masks and the baseline side of the benchmark.
pub fn forward_dense_vanilla(
    model: &SmsrModel,
    lr: &Tensor<f32>,
    counter: &mut MacCounter,
) -> Result<Tensor<f32>> {
    let s = lr.shape();
    let run_conv = |x: &Tensor<f32>, p: ConvParams, counter: &mut MacCounter| -> Result<Tensor<f32>> {
        let spec = model.conv_spec(p)?;
        crate::conv::conv2d_counted(x, &spec, counter)
    };
    let h0 = tensor::relu(&run_conv(lr, model.head[0], counter)?);
    let head_out = run_conv(&h0, model.head[1], counter)?;
    let mut feature = head_out.clone();
    let mut module_outputs = Vec::with_capacity(model.num_modules);
    for smm in &model.smms {
        let smm_input = feature.clone();
        let mut h = smm_input.clone();
        let mut outputs = Vec::with_capacity(model.layers_per_module);
        for conv in &smm.convs {
            let y = tensor::relu(&run_conv(&h, *conv, counter)?);
            outputs.push(y.clone());
            h = y;
        }
        let refs: Vec<&Tensor<f32>> = outputs.iter().collect();
        let cat = tensor::concat_channels(&refs)?;
        let fused = run_conv(&cat, smm.fusion, counter)?;
        feature = tensor::add(&fused, &smm_input)?;
        module_outputs.push(feature.clone());
    }
    let refs: Vec<&Tensor<f32>> = module_outputs.iter().collect();
    let cat = tensor::concat_channels(&refs)?;
    let point = tensor::relu(&run_conv(&cat, model.collect_point, counter)?);
    let refined = run_conv(&point, model.collect_refine, counter)?;
    let body = tensor::add(&refined, &head_out)?;
    let pre_shuffle = run_conv(&body, model.tail, counter)?;
    let shuffled = tensor::pixel_shuffle(&pre_shuffle, model.scale)?;
    let skip = bicubic_resize_to(lr, s.h * model.scale, s.w * model.scale)?;
    tensor::add(&shuffled, &skip)
}
