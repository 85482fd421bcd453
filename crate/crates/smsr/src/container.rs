//! The model container format.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "SMSR"
//! version u16      1
//! scale   u8
//! K       u8       number of sparse mask modules
//! L       u8       layers per module
//! C       u16      channel width
//! count   u32      model tensor count
//! entry*  count times:
//!   name_len u16, name bytes (utf-8),
//!   rank u8, dims u32 * rank, data f32 * prod(dims)
//! opt     u32      optimizer tensor count (0 for plain model files)
//! entry*  opt times, same entry format
//! ```
//!
//! Round-trips are bit-exact: tensors serialize as raw little-endian f32.
//! Checkpoints reuse the format with a populated optimizer section holding
//! Adam moments, per-parameter step counts, and the trainer epoch.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{SmsrModel, SpatialMaskSource};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"SMSR";
const VERSION: u16 = 1;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor<f32>) -> std::io::Result<()> {
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&[4u8])?;
    let s = t.shape();
    for d in [s.n, s.c, s.h, s.w] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Container(format!("truncated tensor table while reading {what}")))
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor<f32>)> {
    let mut u16b = [0u8; 2];
    read_exact_or_truncated(r, &mut u16b, "name length")?;
    let name_len = u16::from_le_bytes(u16b) as usize;
    let mut name = vec![0u8; name_len];
    read_exact_or_truncated(r, &mut name, "name")?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::Container("tensor name is not valid utf-8".into()))?;
    let mut rank = [0u8; 1];
    read_exact_or_truncated(r, &mut rank, "rank")?;
    if rank[0] != 4 {
        return Err(Error::Container(format!(
            "tensor {name} has rank {} (only rank 4 is defined)",
            rank[0]
        )));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut u32b = [0u8; 4];
        read_exact_or_truncated(r, &mut u32b, "dims")?;
        *d = u32::from_le_bytes(u32b) as usize;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let mut data = vec![0f32; shape.len()];
    for v in &mut data {
        let mut f32b = [0u8; 4];
        read_exact_or_truncated(r, &mut f32b, &format!("data of {name}"))?;
        *v = f32::from_le_bytes(f32b);
    }
    Ok((name, Tensor::from_vec(shape, data)?))
}

fn write_header(w: &mut impl Write, model: &SmsrModel) -> Result<()> {
    if model.num_modules > u8::MAX as usize
        || model.layers_per_module > u8::MAX as usize
        || model.channels > u16::MAX as usize
    {
        return Err(Error::InvalidArg("model dimensions exceed container header limits".into()));
    }
    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.push(model.scale as u8);
    header.push(model.num_modules as u8);
    header.push(model.layers_per_module as u8);
    header.extend_from_slice(&(model.channels as u16).to_le_bytes());
    w.write_all(&header)
        .map_err(|e| Error::Container(format!("write failed: {e}")))
}

fn model_meta_tensors(model: &SmsrModel) -> Vec<(String, Tensor<f32>)> {
    match model.mask_source {
        SpatialMaskSource::GradientThreshold { alpha } => {
            vec![("meta.heuristic_alpha".into(), Tensor::scalar(alpha))]
        }
        SpatialMaskSource::Learned => Vec::new(),
    }
}

/// Optimizer-section tensors for a checkpoint at `epoch`.
fn optimizer_tensors(model: &SmsrModel, epoch: usize) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    for p in model.store.iter() {
        out.push((format!("adam_m.{}", p.name), p.adam_m.clone()));
        out.push((format!("adam_v.{}", p.name), p.adam_v.clone()));
        out.push((format!("step.{}", p.name), Tensor::scalar(p.step_count as f32)));
    }
    out.push(("trainer.epoch".into(), Tensor::scalar(epoch as f32)));
    out
}

fn save_with_optimizer(model: &SmsrModel, path: &Path, opt: &[(String, Tensor<f32>)]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_header(&mut w, model)?;
    let meta = model_meta_tensors(model);
    let count = model.store.len() + meta.len();
    w.write_all(&(count as u32).to_le_bytes()).map_err(io_err(path))?;
    for p in model.store.iter() {
        write_tensor(&mut w, &p.name, &p.value).map_err(io_err(path))?;
    }
    for (name, t) in &meta {
        write_tensor(&mut w, name, t).map_err(io_err(path))?;
    }
    w.write_all(&(opt.len() as u32).to_le_bytes()).map_err(io_err(path))?;
    for (name, t) in opt {
        write_tensor(&mut w, name, t).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Write a plain model file (empty optimizer section).
pub fn save_model(model: &SmsrModel, path: &Path) -> Result<()> {
    save_with_optimizer(model, path, &[])
}

/// Write a training checkpoint: model plus Adam moments, step counts, and
/// the epoch marker.
pub fn save_checkpoint(model: &SmsrModel, epoch: usize, path: &Path) -> Result<()> {
    save_with_optimizer(model, path, &optimizer_tensors(model, epoch))
}

#[derive(Debug)]
pub struct LoadedModel {
    pub model: SmsrModel,
    /// Epoch recorded in the optimizer section, if this was a checkpoint.
    pub checkpoint_epoch: Option<usize>,
}

/// Load a model or checkpoint.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Container("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Container(format!(
            "bad magic {:02x?} (expected \"SMSR\")",
            magic
        )));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)
        .map_err(|_| Error::Container("file too short for version".into()))?;
    let version = u16::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Container(format!(
            "unsupported container version {version} (expected {VERSION})"
        )));
    }
    let mut b = [0u8; 3];
    r.read_exact(&mut b)
        .map_err(|_| Error::Container("file too short for dimensions".into()))?;
    let (scale, k, l) = (b[0] as usize, b[1] as usize, b[2] as usize);
    let mut cb = [0u8; 2];
    r.read_exact(&mut cb)
        .map_err(|_| Error::Container("file too short for channel width".into()))?;
    let c = u16::from_le_bytes(cb) as usize;

    let mut count_b = [0u8; 4];
    r.read_exact(&mut count_b)
        .map_err(|_| Error::Container("file too short for tensor count".into()))?;
    let count = u32::from_le_bytes(count_b) as usize;

    let mut model = SmsrModel::new(scale, k, l, c, 0)?;
    let mut filled = vec![false; model.store.len()];
    let name_index: std::collections::HashMap<String, usize> = model
        .store
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.clone(), i))
        .collect();

    let mut heuristic_alpha = None;
    for _ in 0..count {
        let (name, tensor) = read_tensor(&mut r)?;
        if name == "meta.heuristic_alpha" {
            heuristic_alpha = Some(tensor.data()[0]);
            continue;
        }
        let &slot = name_index
            .get(&name)
            .ok_or_else(|| Error::Container(format!("unexpected tensor {name}")))?;
        if model.store.value(slot).shape() != tensor.shape() {
            return Err(Error::Container(format!(
                "tensor {name} has shape {} but the architecture expects {}",
                tensor.shape(),
                model.store.value(slot).shape()
            )));
        }
        *model.store.value_mut(slot) = tensor;
        filled[slot] = true;
    }
    if let Some(missing) = filled.iter().position(|&f| !f) {
        return Err(Error::Container(format!(
            "tensor table is missing {}",
            model.store.param(missing).name
        )));
    }
    if let Some(alpha) = heuristic_alpha {
        model.mask_source = SpatialMaskSource::GradientThreshold { alpha };
    }

    let mut opt_b = [0u8; 4];
    r.read_exact(&mut opt_b)
        .map_err(|_| Error::Container("truncated optimizer section header".into()))?;
    let opt_count = u32::from_le_bytes(opt_b) as usize;
    let mut checkpoint_epoch = None;
    for _ in 0..opt_count {
        let (name, tensor) = read_tensor(&mut r)?;
        if name == "trainer.epoch" {
            checkpoint_epoch = Some(tensor.data()[0] as usize);
        } else if let Some(rest) = name.strip_prefix("adam_m.") {
            let &slot = name_index
                .get(rest)
                .ok_or_else(|| Error::Container(format!("optimizer state for unknown tensor {rest}")))?;
            model.store.param_mut(slot).adam_m = tensor;
        } else if let Some(rest) = name.strip_prefix("adam_v.") {
            let &slot = name_index
                .get(rest)
                .ok_or_else(|| Error::Container(format!("optimizer state for unknown tensor {rest}")))?;
            model.store.param_mut(slot).adam_v = tensor;
        } else if let Some(rest) = name.strip_prefix("step.") {
            let &slot = name_index
                .get(rest)
                .ok_or_else(|| Error::Container(format!("optimizer state for unknown tensor {rest}")))?;
            model.store.param_mut(slot).step_count = tensor.data()[0] as u64;
        } else {
            return Err(Error::Container(format!("unexpected optimizer tensor {name}")));
        }
    }
    Ok(LoadedModel {
        model,
        checkpoint_epoch,
    })
}
