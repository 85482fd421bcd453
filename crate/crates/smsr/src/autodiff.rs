//! Minimal reverse-mode differentiation over the engine's op set.
//!
//! A [`Tape`] records every operation of one forward pass in topological
//! order; [`Tape::backward`] walks the nodes in exact reverse recording order
//! and produces analytic adjoints for every recorded value. Parameters enter
//! the tape through [`Tape::param`], which remembers the parameter slot so
//! gradients can be accumulated back into a [`crate::optim::ParamStore`].
//!
//! The tape is generic over the element type: the runtime records `f32`
//! tapes, while the finite-difference test harness instantiates `f64`.

use crate::conv::{col2im_add, im2col, ConvSpec};
use crate::error::{Error, Result};
use crate::gemm::{gemm_nt, gemm_tn};
use crate::optim::ParamStore;
use crate::tensor::{self, Scalar, Shape, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct ValueId(usize);

#[derive(Clone, Debug)]
enum Op<T: Scalar> {
    Leaf,
    Param { slot: usize },
    Conv2d { x: ValueId, w: ValueId, b: Option<ValueId>, stride: usize, pad: usize },
    Relu { x: ValueId },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Affine { x: ValueId, mul: T, add: T },
    ConcatC { xs: Vec<ValueId> },
    NarrowC { x: ValueId, start: usize, len: usize },
    SoftmaxC { x: ValueId },
    PixelShuffle { x: ValueId, r: usize },
    UpsampleNearest2x { x: ValueId },
    Reshape { x: ValueId },
    MeanAll { x: ValueId },
    Abs { x: ValueId },
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Reverse-mode tape. Confined to one training thread; a fresh tape is
/// recorded per step.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by a backward pass, indexed by [`ValueId`].
pub struct Grads<T: Scalar> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<T>> {
        self.by_node[id.0].as_ref()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> ValueId {
        self.nodes.push(Node { op, value });
        ValueId(self.nodes.len() - 1)
    }

    /// Record a constant input (no gradient is reported for leaves).
    pub fn leaf(&mut self, value: Tensor<T>) -> ValueId {
        self.push(Op::Leaf, value)
    }

    /// Record a trainable parameter from `store`.
    pub fn param(&mut self, store: &ParamStore<T>, slot: usize) -> ValueId {
        self.push(Op::Param { slot }, store.value(slot).clone())
    }

    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let spec = ConvSpec::new(
            self.value(w).clone(),
            stride,
            pad,
            b.map(|bid| self.value(bid).data().to_vec()),
        )?;
        let out = crate::conv::conv2d_dense(self.value(x), &spec)?;
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, out))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out = tensor::relu(self.value(x));
        self.push(Op::Relu { x }, out)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add { a, b }, out))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.push(Op::Sub { a, b }, out))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul { a, b }, out))
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, x: ValueId, mul: T, add: T) -> ValueId {
        let out = self.value(x).map(|v| mul * v + add);
        self.push(Op::Affine { x, mul, add }, out)
    }

    /// 1 - x, the complement used throughout mask arithmetic.
    pub fn one_minus(&mut self, x: ValueId) -> ValueId {
        self.affine(x, -T::one(), T::one())
    }

    pub fn concat_channels(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        let tensors: Vec<&Tensor<T>> = xs.iter().map(|&id| self.value(id)).collect();
        let out = tensor::concat_channels(&tensors)?;
        Ok(self.push(Op::ConcatC { xs: xs.to_vec() }, out))
    }

    pub fn narrow_channels(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let out = tensor::narrow_channels(self.value(x), start, len)?;
        Ok(self.push(Op::NarrowC { x, start, len }, out))
    }

    pub fn softmax_channels(&mut self, x: ValueId) -> ValueId {
        let out = tensor::softmax_channels(self.value(x));
        self.push(Op::SoftmaxC { x }, out)
    }

    pub fn pixel_shuffle(&mut self, x: ValueId, r: usize) -> Result<ValueId> {
        let out = tensor::pixel_shuffle(self.value(x), r)?;
        Ok(self.push(Op::PixelShuffle { x, r }, out))
    }

    pub fn upsample_nearest2x_to(&mut self, x: ValueId, oh: usize, ow: usize) -> Result<ValueId> {
        let out = tensor::upsample_nearest2x_to(self.value(x), oh, ow)?;
        Ok(self.push(Op::UpsampleNearest2x { x }, out))
    }

    pub fn reshape(&mut self, x: ValueId, shape: Shape) -> Result<ValueId> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape { x }, out))
    }

    pub fn mean_all(&mut self, x: ValueId) -> Result<ValueId> {
        let out = tensor::mean_all(self.value(x))?;
        Ok(self.push(Op::MeanAll { x }, out))
    }

    pub fn abs(&mut self, x: ValueId) -> ValueId {
        let out = tensor::abs(self.value(x));
        self.push(Op::Abs { x }, out)
    }

    /// Reverse sweep seeded at `loss` (which must be scalar-shaped). Visits
    /// nodes in exact reverse recording order; running it twice on the same
    /// tape yields identical gradients.
    pub fn backward(&self, loss: ValueId) -> Result<Grads<T>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let loss_shape = self.value(loss).shape();
        if loss_shape != Shape::scalar() {
            return Err(Error::NonScalarLoss(loss_shape.to_string()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { by_node: grads })
    }

    /// Add the gradients of every `Param` node into the store's grad buffers.
    pub fn accumulate_param_grads(&self, grads: &Grads<T>, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param { slot } = node.op {
                if let Some(g) = &grads.by_node[i] {
                    store.add_grad(slot, g);
                }
            }
        }
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], id: ValueId, delta: Tensor<T>) {
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += *d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf | Op::Param { .. } => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    b.is_some(),
                );
                Self::accumulate(grads, *x, dx);
                Self::accumulate(grads, *w, dw);
                if let (Some(bid), Some(db)) = (b, db) {
                    Self::accumulate(grads, *bid, db);
                }
            }
            Op::Relu { x } => {
                // Subgradient 0 at exactly 0.
                let y = &self.nodes[i].value;
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                let da = tensor::reduce_to_shape(g, self.value(*a).shape())?;
                let db = tensor::reduce_to_shape(g, self.value(*b).shape())?;
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::Sub { a, b } => {
                let da = tensor::reduce_to_shape(g, self.value(*a).shape())?;
                let mut db = tensor::reduce_to_shape(g, self.value(*b).shape())?;
                for v in db.data_mut() {
                    *v = -*v;
                }
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::Mul { a, b } => {
                let ga = tensor::mul(g, self.value(*b))?;
                let da = tensor::reduce_to_shape(&ga, self.value(*a).shape())?;
                let gb = tensor::mul(g, self.value(*a))?;
                let db = tensor::reduce_to_shape(&gb, self.value(*b).shape())?;
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::Affine { x, mul, .. } => {
                let m = *mul;
                Self::accumulate(grads, *x, g.map(|v| v * m));
            }
            Op::ConcatC { xs } => {
                let mut start = 0;
                for &xid in xs {
                    let c = self.value(xid).shape().c;
                    let part = tensor::narrow_channels(g, start, c)?;
                    Self::accumulate(grads, xid, part);
                    start += c;
                }
            }
            Op::NarrowC { x, start, len } => {
                let xs = self.value(*x).shape();
                let mut dx = Tensor::zeros(xs);
                let plane = xs.h * xs.w;
                for n in 0..xs.n {
                    for c in 0..*len {
                        let dst = dx.index(n, start + c, 0, 0);
                        let src = g.index(n, c, 0, 0);
                        dx.data_mut()[dst..dst + plane]
                            .copy_from_slice(&g.data()[src..src + plane]);
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::SoftmaxC { x } => {
                // dx_c = y_c * (g_c - sum_k g_k y_k), per (n, h, w) site.
                let y = &self.nodes[i].value;
                let s = y.shape();
                let mut dx = Tensor::zeros(s);
                for n in 0..s.n {
                    for yy in 0..s.h {
                        for xx in 0..s.w {
                            let mut dot = T::zero();
                            for c in 0..s.c {
                                dot += g.at(n, c, yy, xx) * y.at(n, c, yy, xx);
                            }
                            for c in 0..s.c {
                                *dx.at_mut(n, c, yy, xx) =
                                    y.at(n, c, yy, xx) * (g.at(n, c, yy, xx) - dot);
                            }
                        }
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::PixelShuffle { x, r } => {
                let dx = tensor::pixel_unshuffle(g, *r)?;
                Self::accumulate(grads, *x, dx);
            }
            Op::UpsampleNearest2x { x } => {
                let xs = self.value(*x).shape();
                let gs = g.shape();
                let mut dx = Tensor::zeros(xs);
                for n in 0..gs.n {
                    for c in 0..gs.c {
                        for yy in 0..gs.h {
                            for xx in 0..gs.w {
                                *dx.at_mut(n, c, yy / 2, xx / 2) += g.at(n, c, yy, xx);
                            }
                        }
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => {
                let dx = g.reshape(self.value(*x).shape())?;
                Self::accumulate(grads, *x, dx);
            }
            Op::MeanAll { x } => {
                let xs = self.value(*x).shape();
                let scale = g.data()[0] / T::from_f64(xs.len() as f64);
                Self::accumulate(grads, *x, Tensor::full(xs, scale));
            }
            Op::Abs { x } => {
                // Convention: derivative 0 at exactly 0.
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v > T::zero() {
                        // keep
                    } else if v < T::zero() {
                        *d = -*d;
                    } else {
                        *d = T::zero();
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

/// Analytic adjoints of the im2col convolution: gradient w.r.t. input,
/// kernel, and (optionally) bias.
fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    pad: usize,
    has_bias: bool,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let xs = x.shape();
    let ws = w.shape();
    let gs = gout.shape();
    let (c_out, rows) = (ws.n, ws.c * ws.h * ws.w);
    let n_cols = gs.h * gs.w;

    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(ws);
    let mut db = has_bias.then(|| Tensor::zeros(Shape::new(1, c_out, 1, 1)));

    let per_in = xs.c * xs.h * xs.w;
    let per_out = c_out * n_cols;
    let mut cols = Vec::new();
    let mut dcols = vec![T::zero(); rows * n_cols];
    for n in 0..xs.n {
        let sample = &x.data()[n * per_in..(n + 1) * per_in];
        im2col(sample, xs.c, xs.h, xs.w, ws.h, ws.w, stride, pad, &mut cols);
        let g_slice = &gout.data()[n * per_out..(n + 1) * per_out];
        // dW += g . cols^T
        gemm_nt(c_out, n_cols, rows, g_slice, &cols, dw.data_mut());
        // dcols = W^T . g
        dcols.iter_mut().for_each(|v| *v = T::zero());
        gemm_tn(rows, c_out, n_cols, w.data(), g_slice, &mut dcols);
        col2im_add(
            &dcols,
            xs.c,
            xs.h,
            xs.w,
            ws.h,
            ws.w,
            stride,
            pad,
            &mut dx.data_mut()[n * per_in..(n + 1) * per_in],
        );
        if let Some(db) = &mut db {
            for co in 0..c_out {
                let mut acc = T::zero();
                for &v in &g_slice[co * n_cols..(co + 1) * n_cols] {
                    acc += v;
                }
                db.data_mut()[co] += acc;
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::ParamStore;

    #[test]
    fn mean_gradient_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = tape.mean_all(x).unwrap();
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn relu_gradient_gates_negatives_and_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-2.0, 0.0, 3.0]).unwrap(),
        );
        let r = tape.relu(x);
        let m = tape.mean_all(r).unwrap();
        let grads = tape.backward(m).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, third]);
    }

    #[test]
    fn masked_product_gradient_equals_mask() {
        let mut tape = Tape::<f64>::new();
        let mut rng = crate::rng::seeded(31);
        let xv = crate::rng::uniform_tensor::<f64>(Shape::new(1, 2, 3, 3), -1.0, 1.0, &mut rng);
        let mv = crate::rng::uniform_tensor::<f64>(Shape::new(1, 1, 3, 3), 0.0, 1.0, &mut rng);
        let x = tape.leaf(xv);
        let m = tape.leaf(mv.clone());
        let prod = tape.mul(x, m).unwrap();
        let loss = tape.mean_all(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        // d/dx mean(x * m) = m / N, broadcast over channels.
        let dx = grads.get(x).unwrap();
        let n = 18.0;
        for c in 0..2 {
            for y in 0..3 {
                for xx in 0..3 {
                    let want = mv.at(0, 0, y, xx) / n;
                    assert!((dx.at(0, c, y, xx) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn backward_on_empty_tape_errors() {
        let tape = Tape::<f64>::new();
        assert!(matches!(tape.backward(ValueId(0)), Err(Error::EmptyTape)));
    }

    #[test]
    fn backward_is_deterministic() {
        let mut tape = Tape::<f64>::new();
        let mut store = ParamStore::new();
        let mut rng = crate::rng::seeded(77);
        let w = store.add(
            "w",
            crate::rng::uniform_tensor::<f64>(Shape::new(2, 2, 3, 3), -0.5, 0.5, &mut rng),
        );
        let xv = crate::rng::uniform_tensor::<f64>(Shape::new(1, 2, 4, 4), -1.0, 1.0, &mut rng);
        let x = tape.leaf(xv);
        let wid = tape.param(&store, w);
        let y = tape.conv2d(x, wid, None, 1, 1).unwrap();
        let r = tape.relu(y);
        let loss = tape.mean_all(r).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.get(wid).unwrap(), g2.get(wid).unwrap());
        assert_eq!(g1.get(x).unwrap(), g2.get(x).unwrap());
    }
}
