//! The two executions of sparse mask convolution.
//!
//! Training multiplies a vanilla dense convolution's results with the
//! softened masks so gradients reach every location. Inference splits the
//! kernel into four sub-kernels by the input/output channel masks and runs
//! three of the four branches only at the important pixels through a
//! gathered im2col. Both formulations compute the same function on binary
//! masks; the test suite pins that equivalence to 1e-4 absolute.

use crate::autodiff::{Tape, ValueId};
use crate::conv::{im2col, ConvSpec};
use crate::error::{Error, Result};
use crate::gemm::{gemm_nn, MacCounter};
use crate::masks::{ChannelMask, SpatialMask};
use crate::tensor::{Scalar, Shape, Tensor};

/// Sorted row-major list of important pixel positions compiled from a binary
/// spatial mask. Compiled once per input and shared by all layers of a
/// module.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImportantIndexList {
    pub h: usize,
    pub w: usize,
    /// (y, x) pairs in strictly increasing row-major order.
    pub positions: Vec<(usize, usize)>,
}

impl ImportantIndexList {
    pub fn compile(mask: &SpatialMask) -> Result<Self> {
        if mask.mode != crate::masks::MaskMode::Binary {
            return Err(Error::NonBinaryMask {
                value: mask.values.first().copied().unwrap_or(0.0),
                index: 0,
            });
        }
        let mut positions = Vec::new();
        for y in 0..mask.h {
            for x in 0..mask.w {
                if mask.values[y * mask.w + x] == 1.0 {
                    positions.push((y, x));
                }
            }
        }
        Ok(ImportantIndexList {
            h: mask.h,
            w: mask.w,
            positions,
        })
    }

    pub fn important_count(&self) -> usize {
        self.positions.len()
    }

    pub fn all(h: usize, w: usize) -> Self {
        let positions = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect();
        ImportantIndexList { h, w, positions }
    }
}

/// The four sub-kernels of one convolution, partitioned by the input-channel
/// mask (rows of the original kernel's input axis) and the output-channel
/// mask. Reassembling through the index lists reproduces the original kernel
/// bit-exactly.
#[derive(Clone, Debug)]
pub struct KernelSplit {
    pub dense_in: Vec<usize>,
    pub sparse_in: Vec<usize>,
    pub dense_out: Vec<usize>,
    pub sparse_out: Vec<usize>,
    /// dense-in -> dense-out, run over the full plane.
    pub w_dd: Tensor<f32>,
    /// dense-in -> sparse-out, gathered.
    pub w_ds: Tensor<f32>,
    /// sparse-in -> dense-out, gathered.
    pub w_sd: Tensor<f32>,
    /// sparse-in -> sparse-out, gathered.
    pub w_ss: Tensor<f32>,
    /// Bias entries for dense-out channels (added everywhere).
    pub bias_dense: Option<Vec<f32>>,
    /// Bias entries for sparse-out channels (added at important pixels only).
    pub bias_sparse: Option<Vec<f32>>,
    pub k_h: usize,
    pub k_w: usize,
    pub padding: usize,
}

fn gather_kernel(
    w: &Tensor<f32>,
    out_idx: &[usize],
    in_idx: &[usize],
) -> Tensor<f32> {
    let s = w.shape();
    let mut out = Tensor::zeros(Shape::new(out_idx.len(), in_idx.len(), s.h, s.w));
    for (oo, &co) in out_idx.iter().enumerate() {
        for (ii, &ci) in in_idx.iter().enumerate() {
            for ky in 0..s.h {
                for kx in 0..s.w {
                    *out.at_mut(oo, ii, ky, kx) = w.at(co, ci, ky, kx);
                }
            }
        }
    }
    out
}

fn mask_partition(mask: &ChannelMask) -> (Vec<usize>, Vec<usize>) {
    let mut dense = Vec::new();
    let mut sparse = Vec::new();
    for (i, &v) in mask.values.iter().enumerate() {
        if v == 1.0 {
            dense.push(i);
        } else {
            sparse.push(i);
        }
    }
    (dense, sparse)
}

/// Split a kernel into the four sub-kernels selected by binary input and
/// output channel masks.
pub fn split_kernel(
    spec: &ConvSpec<f32>,
    m_ch_in: &ChannelMask,
    m_ch_out: &ChannelMask,
) -> Result<KernelSplit> {
    m_ch_in.require_binary()?;
    m_ch_out.require_binary()?;
    let ws = spec.kernel.shape();
    if m_ch_in.len() != ws.c || m_ch_out.len() != ws.n {
        return Err(Error::ShapeMismatch {
            context: "split_kernel",
            expected: format!("masks of length {} (in) and {} (out)", ws.c, ws.n),
            got: format!("{} and {}", m_ch_in.len(), m_ch_out.len()),
        });
    }
    let (dense_in, sparse_in) = mask_partition(m_ch_in);
    let (dense_out, sparse_out) = mask_partition(m_ch_out);
    let pick_bias = |idx: &[usize]| -> Option<Vec<f32>> {
        spec.bias
            .as_ref()
            .map(|b| idx.iter().map(|&i| b[i]).collect())
    };
    Ok(KernelSplit {
        w_dd: gather_kernel(&spec.kernel, &dense_out, &dense_in),
        w_ds: gather_kernel(&spec.kernel, &sparse_out, &dense_in),
        w_sd: gather_kernel(&spec.kernel, &dense_out, &sparse_in),
        w_ss: gather_kernel(&spec.kernel, &sparse_out, &sparse_in),
        bias_dense: pick_bias(&dense_out),
        bias_sparse: pick_bias(&sparse_out),
        dense_in,
        sparse_in,
        dense_out,
        sparse_out,
        k_h: ws.h,
        k_w: ws.w,
        padding: spec.padding,
    })
}

impl KernelSplit {
    /// Rebuild the original kernel from the four parts (bit-exact).
    pub fn reassemble(&self) -> Tensor<f32> {
        let c_in = self.dense_in.len() + self.sparse_in.len();
        let c_out = self.dense_out.len() + self.sparse_out.len();
        let mut w = Tensor::zeros(Shape::new(c_out, c_in, self.k_h, self.k_w));
        let mut place = |part: &Tensor<f32>, out_idx: &[usize], in_idx: &[usize]| {
            for (oo, &co) in out_idx.iter().enumerate() {
                for (ii, &ci) in in_idx.iter().enumerate() {
                    for ky in 0..self.k_h {
                        for kx in 0..self.k_w {
                            *w.at_mut(co, ci, ky, kx) = part.at(oo, ii, ky, kx);
                        }
                    }
                }
            }
        };
        place(&self.w_dd, &self.dense_out, &self.dense_in);
        place(&self.w_ds, &self.sparse_out, &self.dense_in);
        place(&self.w_sd, &self.dense_out, &self.sparse_in);
        place(&self.w_ss, &self.sparse_out, &self.sparse_in);
        w
    }
}

/// Select a subset of channels from a (1, C, H, W) tensor.
fn gather_channels(f: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let s = f.shape();
    let plane = s.h * s.w;
    let mut data = Vec::with_capacity(idx.len() * plane);
    for &c in idx {
        data.extend_from_slice(&f.data()[c * plane..(c + 1) * plane]);
    }
    Tensor::from_vec(Shape::new(1, idx.len(), s.h, s.w), data).expect("gathered length")
}

/// Stride-1 convolution evaluated only at the important pixels: a gathered
/// im2col builds one column per index entry, a single GEMM produces the
/// values, and the results scatter back to their positions. Every location
/// outside the index list is exactly zero in the output.
pub fn sparse_gather_conv(
    f_part: &Tensor<f32>,
    w_part: &Tensor<f32>,
    bias: Option<&[f32]>,
    padding: usize,
    idx: &ImportantIndexList,
    counter: &mut MacCounter,
) -> Result<Tensor<f32>> {
    let s = f_part.shape();
    let ws = w_part.shape();
    if s.n != 1 {
        return Err(Error::ShapeMismatch {
            context: "sparse_gather_conv",
            expected: "single sample (n = 1)".into(),
            got: s.to_string(),
        });
    }
    if s.c != ws.c {
        return Err(Error::ShapeMismatch {
            context: "sparse_gather_conv",
            expected: format!("{} input channels", ws.c),
            got: s.to_string(),
        });
    }
    let (c_out, c_in, k_h, k_w) = (ws.n, ws.c, ws.h, ws.w);
    let n_imp = idx.important_count();
    let mut out = Tensor::zeros(Shape::new(1, c_out, idx.h, idx.w));
    if n_imp == 0 || c_out == 0 {
        return Ok(out);
    }

    // Gathered im2col: rows indexed by (c, ky, kx), one column per position.
    let rows = c_in * k_h * k_w;
    let mut cols = vec![0.0f32; rows * n_imp];
    for (j, &(oy, ox)) in idx.positions.iter().enumerate() {
        for c in 0..c_in {
            for ky in 0..k_h {
                let iy = (oy + ky) as isize - padding as isize;
                if iy < 0 || iy >= s.h as isize {
                    continue;
                }
                for kx in 0..k_w {
                    let ix = (ox + kx) as isize - padding as isize;
                    if ix < 0 || ix >= s.w as isize {
                        continue;
                    }
                    let row = (c * k_h + ky) * k_w + kx;
                    cols[row * n_imp + j] = f_part.at(0, c, iy as usize, ix as usize);
                }
            }
        }
    }
    let mut out_mat = vec![0.0f32; c_out * n_imp];
    if rows > 0 {
        gemm_nn(c_out, rows, n_imp, w_part.data(), &cols, &mut out_mat);
        counter.add(c_out, rows, n_imp);
    }
    for co in 0..c_out {
        let b = bias.map_or(0.0, |b| b[co]);
        for (j, &(oy, ox)) in idx.positions.iter().enumerate() {
            *out.at_mut(0, co, oy, ox) = out_mat[co * n_imp + j] + b;
        }
    }
    Ok(out)
}

/// Inference-mode sparse mask convolution over one sample: the dense-input
/// channels run through `w_dd` on the full plane and `w_ds` at important
/// pixels; the sparse-input channels run through `w_sd` and `w_ss` at
/// important pixels. Dense-out channels are `F_d2d + F_s2d`; sparse-out
/// channels are `F_d2s + F_s2s` and stay exactly zero elsewhere. Channels
/// re-interleave into their original order through the split's index lists.
pub fn sparse_mask_conv_infer(
    f: &Tensor<f32>,
    split: &KernelSplit,
    idx: &ImportantIndexList,
    counter: &mut MacCounter,
) -> Result<Tensor<f32>> {
    let s = f.shape();
    let c_in = split.dense_in.len() + split.sparse_in.len();
    if s.n != 1 || s.c != c_in {
        return Err(Error::ShapeMismatch {
            context: "sparse_mask_conv_infer",
            expected: format!("1x{c_in}xHxW"),
            got: s.to_string(),
        });
    }
    let c_out = split.dense_out.len() + split.sparse_out.len();
    let f_dense = gather_channels(f, &split.dense_in);
    let f_sparse = gather_channels(f, &split.sparse_in);

    // Dense-out plane: bias everywhere, then the full-plane D2D GEMM and the
    // gathered S2D contribution.
    let mut dense_planes = Tensor::zeros(Shape::new(1, split.dense_out.len(), s.h, s.w));
    if !split.dense_out.is_empty() {
        if let Some(bias) = &split.bias_dense {
            let plane = s.h * s.w;
            for (co, &b) in bias.iter().enumerate() {
                dense_planes.data_mut()[co * plane..(co + 1) * plane].fill(b);
            }
        }
        if !split.dense_in.is_empty() {
            let rows = split.dense_in.len() * split.k_h * split.k_w;
            let mut cols = Vec::new();
            let (oh, ow) = (s.h, s.w);
            im2col(
                f_dense.data(),
                split.dense_in.len(),
                s.h,
                s.w,
                split.k_h,
                split.k_w,
                1,
                split.padding,
                &mut cols,
            );
            gemm_nn(
                split.dense_out.len(),
                rows,
                oh * ow,
                split.w_dd.data(),
                &cols,
                dense_planes.data_mut(),
            );
            counter.add(split.dense_out.len(), rows, oh * ow);
        }
        if !split.sparse_in.is_empty() {
            let s2d = sparse_gather_conv(&f_sparse, &split.w_sd, None, split.padding, idx, counter)?;
            for (d, v) in dense_planes.data_mut().iter_mut().zip(s2d.data()) {
                *d += *v;
            }
        }
    }

    // Sparse-out plane: gathered D2S (carrying the bias at important pixels)
    // plus gathered S2S; zero everywhere else.
    let mut sparse_planes = Tensor::zeros(Shape::new(1, split.sparse_out.len(), s.h, s.w));
    if !split.sparse_out.is_empty() {
        let d2s = sparse_gather_conv(
            &f_dense,
            &split.w_ds,
            split.bias_sparse.as_deref(),
            split.padding,
            idx,
            counter,
        )?;
        sparse_planes = d2s;
        if !split.sparse_in.is_empty() {
            let s2s = sparse_gather_conv(&f_sparse, &split.w_ss, None, split.padding, idx, counter)?;
            for (d, v) in sparse_planes.data_mut().iter_mut().zip(s2s.data()) {
                *d += *v;
            }
        }
    }

    // Restore original channel order.
    let mut out = Tensor::zeros(Shape::new(1, c_out, s.h, s.w));
    let plane = s.h * s.w;
    for (i, &co) in split.dense_out.iter().enumerate() {
        out.data_mut()[co * plane..(co + 1) * plane]
            .copy_from_slice(&dense_planes.data()[i * plane..(i + 1) * plane]);
    }
    for (i, &co) in split.sparse_out.iter().enumerate() {
        out.data_mut()[co * plane..(co + 1) * plane]
            .copy_from_slice(&sparse_planes.data()[i * plane..(i + 1) * plane]);
    }
    Ok(out)
}

/// Training-mode masked convolution recorded on the tape (Eq. of the
/// training phase): with `c_d = conv(F * m_ch_in, W, bias)` and
/// `c_s = conv(F * (1 - m_ch_in), W)` sharing weights,
///
/// ```text
/// out = c_d * m_ch_out
///     + c_d * (1 - m_ch_out) * m_spa
///     + c_s * m_ch_out * m_spa
///     + c_s * (1 - m_ch_out) * m_spa
/// ```
///
/// The bias rides only the dense-input branch so it is applied exactly once.
/// `m_ch_in`/`m_ch_out` are (1, C, 1, 1) values on the tape, `m_spa` is
/// (n, 1, H, W); all may be softened or binary.
#[allow(clippy::too_many_arguments)]
pub fn masked_conv_train<T: Scalar>(
    tape: &mut Tape<T>,
    f: ValueId,
    w: ValueId,
    b: Option<ValueId>,
    m_ch_in: ValueId,
    m_ch_out: ValueId,
    m_spa: ValueId,
    padding: usize,
) -> Result<ValueId> {
    let keep_in = m_ch_in;
    let drop_in = tape.one_minus(m_ch_in);
    let f_dense = tape.mul(f, keep_in)?;
    let f_sparse = tape.mul(f, drop_in)?;
    let c_d = tape.conv2d(f_dense, w, b, 1, padding)?;
    let c_s = tape.conv2d(f_sparse, w, None, 1, padding)?;

    let keep_out = m_ch_out;
    let drop_out = tape.one_minus(m_ch_out);

    let t1 = tape.mul(c_d, keep_out)?;
    let t2a = tape.mul(c_d, drop_out)?;
    let t2 = tape.mul(t2a, m_spa)?;
    let t3a = tape.mul(c_s, keep_out)?;
    let t3 = tape.mul(t3a, m_spa)?;
    let t4a = tape.mul(c_s, drop_out)?;
    let t4 = tape.mul(t4a, m_spa)?;

    let s12 = tape.add(t1, t2)?;
    let s34 = tape.add(t3, t4)?;
    tape.add(s12, s34)
}
