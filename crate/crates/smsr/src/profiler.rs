//! Mask-driven analytic FLOP accounting, sparsity reports, and the
//! dense-versus-sparse wall-clock benchmark.
//!
//! FLOP convention: 2 FLOPs per multiply-add, the usual convention in the
//! super-resolution literature. The analytic counter mirrors the inference
//! executor GEMM for GEMM, so `FlopReport::conv_macs` equals the
//! instrumented [`MacCounter`] exactly. Non-GEMM mask work (the per-layer
//! channel argmax) is itemized separately in `mask_overhead_flops`;
//! resampling, activations and elementwise adds are not counted, on either
//! side of the comparison.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::masks::{ChannelMask, MaskMode, SpatialMask};
use crate::model::{
    forward_dense_vanilla, forward_infer, forward_infer_with_masks, NetworkMasks, SmmMasks,
    SmsrModel, SpatialMaskSource,
};
use crate::tensor::{Shape, Tensor};

/// Per-layer and aggregate sparsity of one mask assignment.
#[derive(Clone, Debug)]
pub struct SparsityReport {
    /// (module, layer, eta) in recording order.
    pub per_layer: Vec<(usize, usize, f32)>,
    /// Mean eta per module.
    pub per_module_eta: Vec<f32>,
    /// 1 - mean eta over all layers.
    pub aggregate_sparsity: f32,
    /// Important-pixel count per module.
    pub n_imp: Vec<usize>,
}

impl SparsityReport {
    pub fn from_masks(masks: &NetworkMasks) -> Self {
        let mut per_layer = Vec::new();
        let mut per_module_eta = Vec::new();
        let mut n_imp = Vec::new();
        for (k, smm) in masks.per_smm.iter().enumerate() {
            let mut sum = 0.0f32;
            for (l, ch) in smm.channel.iter().enumerate() {
                let eta = crate::masks::sparsity_term(ch, &smm.spatial);
                per_layer.push((k, l, eta));
                sum += eta;
            }
            per_module_eta.push(sum / smm.channel.len().max(1) as f32);
            n_imp.push(smm.spatial.important_count());
        }
        let mean_eta = if per_layer.is_empty() {
            1.0
        } else {
            per_layer.iter().map(|&(_, _, e)| e).sum::<f32>() / per_layer.len() as f32
        };
        SparsityReport {
            per_layer,
            per_module_eta,
            aggregate_sparsity: 1.0 - mean_eta,
            n_imp,
        }
    }

    /// CSV with one row per layer plus one aggregate row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("module,layer,eta,sparsity\n");
        for &(k, l, eta) in &self.per_layer {
            out.push_str(&format!("{k},{l},{eta},{}\n", 1.0 - eta));
        }
        out.push_str(&format!(
            "all,all,{},{}\n",
            1.0 - self.aggregate_sparsity,
            self.aggregate_sparsity
        ));
        out
    }
}

#[derive(Clone, Debug)]
pub struct LayerFlops {
    pub name: String,
    pub macs: u64,
}

/// Analytic cost report for one mask assignment at one input size.
#[derive(Clone, Debug)]
pub struct FlopReport {
    pub input_h: usize,
    pub input_w: usize,
    pub layers: Vec<LayerFlops>,
    /// GEMM multiply-adds of the masked network (matches the instrumented
    /// counter of the inference path exactly).
    pub conv_macs: u64,
    /// Non-GEMM mask work: 2 FLOPs per channel-logit entry per layer.
    pub mask_overhead_flops: u64,
    /// 2 * conv_macs + mask_overhead_flops.
    pub total_flops: u64,
    /// FLOPs of the maskless vanilla network at the same input size.
    pub dense_flops: u64,
    /// total_flops / dense_flops.
    pub ratio: f64,
}

fn conv_out_dims(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let dim = |d: usize| (d + 2 * pad - k) / stride + 1;
    (dim(h), dim(w))
}

/// Analytic FLOP count for `model` executing with `masks` on an (h, w)
/// input. The per-layer arithmetic reproduces the exact GEMM dimensions of
/// the inference executor.
pub fn count_flops(model: &SmsrModel, masks: &NetworkMasks, h: usize, w: usize) -> Result<FlopReport> {
    if masks.per_smm.len() != model.num_modules {
        return Err(Error::ShapeMismatch {
            context: "count_flops",
            expected: format!("{} module mask sets", model.num_modules),
            got: format!("{}", masks.per_smm.len()),
        });
    }
    let c = model.channels as u64;
    let hw = (h * w) as u64;
    let mut layers = Vec::new();
    let mut macs = 0u64;
    let mut push = |layers: &mut Vec<LayerFlops>, name: String, m: u64| {
        layers.push(LayerFlops { name, macs: m });
        macs += m;
    };

    push(&mut layers, "head.0".into(), c * 27 * hw);
    push(&mut layers, "head.1".into(), c * c * 9 * hw);

    let learned = matches!(model.mask_source, SpatialMaskSource::Learned);
    for (k, smm) in masks.per_smm.iter().enumerate() {
        if learned {
            let (oh, ow) = conv_out_dims(h, w, 3, 2, 1);
            let red = (c / 4) * (c * 9) * (oh * ow) as u64;
            push(&mut layers, format!("smm.{k}.hourglass.reduce"), red);
            let refine = (c / 4) * ((c / 4) * 9) * (oh * ow) as u64;
            push(&mut layers, format!("smm.{k}.hourglass.refine"), refine);
            let project = 2 * ((c / 4) * 9) * hw;
            push(&mut layers, format!("smm.{k}.hourglass.project"), project);
        }
        let n_imp = smm.spatial.important_count() as u64;
        for (l, ch_out) in smm.channel.iter().enumerate() {
            let d_in = if l == 0 {
                c
            } else {
                smm.channel[l - 1].dense_count() as u64
            };
            let s_in = c - d_in;
            let d_out = ch_out.dense_count() as u64;
            let s_out = c - d_out;
            let m = d_out * (d_in * 9) * hw
                + s_out * (d_in * 9) * n_imp
                + d_out * (s_in * 9) * n_imp
                + s_out * (s_in * 9) * n_imp;
            push(&mut layers, format!("smm.{k}.conv.{l}"), m);
        }
        let fusion = c * (model.layers_per_module as u64 * c) * hw;
        push(&mut layers, format!("smm.{k}.fusion"), fusion);
    }
    push(
        &mut layers,
        "collect.point".into(),
        c * (model.num_modules as u64 * c) * hw,
    );
    push(&mut layers, "collect.refine".into(), c * c * 9 * hw);
    let s2 = (model.scale * model.scale) as u64;
    push(&mut layers, "tail".into(), 3 * s2 * (c * 9) * hw);

    let mask_overhead_flops =
        (model.num_modules * model.layers_per_module) as u64 * 2 * c;

    // Vanilla maskless network: no hourglass, every body conv dense.
    let dense_macs = c * 27 * hw
        + c * c * 9 * hw
        + model.num_modules as u64
            * (model.layers_per_module as u64 * c * c * 9 * hw
                + c * (model.layers_per_module as u64 * c) * hw)
        + c * (model.num_modules as u64 * c) * hw
        + c * c * 9 * hw
        + 3 * s2 * (c * 9) * hw;

    let total_flops = 2 * macs + mask_overhead_flops;
    let dense_flops = 2 * dense_macs;
    Ok(FlopReport {
        input_h: h,
        input_w: w,
        layers,
        conv_macs: macs,
        mask_overhead_flops,
        total_flops,
        dense_flops,
        ratio: total_flops as f64 / dense_flops as f64,
    })
}

/// LR input size whose HR output is 720p (1280x720) at the model's scale.
pub fn input_size_for_720p(scale: usize) -> (usize, usize) {
    ((720 + scale - 1) / scale, (1280 + scale - 1) / scale)
}

impl FlopReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,macs,flops\n");
        for l in &self.layers {
            out.push_str(&format!("{},{},{}\n", l.name, l.macs, 2 * l.macs));
        }
        out.push_str(&format!("mask_overhead,,{}\n", self.mask_overhead_flops));
        out.push_str(&format!("total,{},{}\n", self.conv_macs, self.total_flops));
        out.push_str(&format!("dense_reference,,{}\n", self.dense_flops));
        out.push_str(&format!("ratio,,{:.6}\n", self.ratio));
        out
    }
}

/// Synthetic binary masks hitting an aggregate sparsity target: every layer
/// keeps the first `C/8` channels dense (at least one) and marks a scattered
/// pixel set important so that eta = 1 - sparsity.
pub fn forced_masks(
    model: &SmsrModel,
    h: usize,
    w: usize,
    target_sparsity: f32,
    seed: u64,
) -> Result<NetworkMasks> {
    if !(0.0..1.0).contains(&target_sparsity) {
        return Err(Error::InvalidArg(format!(
            "target sparsity must be in [0, 1), got {target_sparsity}"
        )));
    }
    let c = model.channels;
    let dense_c = (c / 8).max(1);
    let frac_d = dense_c as f32 / c as f32;
    let eta_target = 1.0 - target_sparsity;
    let p = ((eta_target - frac_d) / (1.0 - frac_d)).clamp(0.0, 1.0);
    let n_imp = ((p * (h * w) as f32).round() as usize).min(h * w);

    let mut rng = crate::rng::seeded(seed);
    let mut order: Vec<usize> = (0..h * w).collect();
    order.shuffle(&mut rng);
    let mut spa_values = vec![0.0f32; h * w];
    for &i in order.iter().take(n_imp) {
        spa_values[i] = 1.0;
    }
    let spatial = SpatialMask::new(h, w, spa_values, MaskMode::Binary)?;
    let ch_values: Vec<f32> = (0..c).map(|i| if i < dense_c { 1.0 } else { 0.0 }).collect();
    let channel = ChannelMask::new(ch_values, MaskMode::Binary)?;
    Ok(NetworkMasks {
        per_smm: (0..model.num_modules)
            .map(|_| SmmMasks {
                spatial: spatial.clone(),
                channel: vec![channel.clone(); model.layers_per_module],
            })
            .collect(),
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BenchMode {
    Dense,
    Sparse,
}

impl std::fmt::Display for BenchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BenchMode::Dense => write!(f, "dense"),
            BenchMode::Sparse => write!(f, "sparse"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchStats {
    pub mode: BenchMode,
    pub threads: usize,
    pub times_ms: Vec<f64>,
    pub median_ms: f64,
    pub macs: u64,
}

/// Time one execution mode of the model on a deterministic random (h, w)
/// input inside a dedicated thread pool (`threads` defaults to 1 so the
/// dense/sparse comparison isolates the arithmetic reduction). Warmup runs
/// are discarded; the median of the timed runs is reported. Both modes share
/// the same im2col/GEMM machinery.
#[allow(clippy::too_many_arguments)]
pub fn bench(
    model: &SmsrModel,
    h: usize,
    w: usize,
    mode: BenchMode,
    threads: usize,
    warmups: usize,
    timed: usize,
    forced: Option<&NetworkMasks>,
) -> Result<BenchStats> {
    let mut rng = crate::rng::seeded(7_777);
    let input = crate::rng::uniform_tensor::<f32>(Shape::new(1, 3, h, w), 0.0, 1.0, &mut rng);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArg(format!("thread pool: {e}")))?;

    let mut run = |input: &Tensor<f32>| -> Result<u64> {
        match mode {
            BenchMode::Dense => {
                let mut counter = crate::gemm::MacCounter::new();
                forward_dense_vanilla(model, input, &mut counter)?;
                Ok(counter.macs)
            }
            BenchMode::Sparse => {
                let out = match forced {
                    Some(m) => forward_infer_with_masks(model, input, m)?,
                    None => forward_infer(model, input)?,
                };
                Ok(out.counter.macs)
            }
        }
    };

    pool.install(|| -> Result<BenchStats> {
        let mut macs = 0;
        for _ in 0..warmups {
            macs = run(&input)?;
        }
        let mut times_ms = Vec::with_capacity(timed);
        for _ in 0..timed {
            let t = Instant::now();
            macs = run(&input)?;
            times_ms.push(t.elapsed().as_secs_f64() * 1e3);
        }
        let mut sorted = times_ms.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
        let median_ms = if sorted.is_empty() {
            0.0
        } else if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
        };
        Ok(BenchStats {
            mode,
            threads: threads.max(1),
            times_ms,
            median_ms,
            macs,
        })
    })
}
