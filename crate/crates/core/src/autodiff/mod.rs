//! Tape-based reverse-mode differentiation over NCHW tensors.
//!
//! Every operation appends one node to a [`Tape`] holding its output value and
//! what it needs to run backward. Because a node can only reference nodes that
//! already exist, the tape is topologically ordered by construction and a
//! single reverse sweep from the loss visits each node once.
//!
//! ```
//! use cascade_seg::autodiff::Tape;
//! use cascade_seg::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap().with_requires_grad(true);
//! let xv = tape.leaf(&x);
//! let sq = tape.mul(xv, xv).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(xv).unwrap(), &[2.0, -4.0, 1.0]);
//! ```

mod conv;
pub mod gradcheck;
mod sgd;

pub use sgd::SgdMomentum;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};
use conv::ConvGeometry;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that preserves the spatial size.
    Same,
    /// No padding.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Softmax {
        input: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Sum {
        input: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    /// Scalar function of `input` whose gradient was computed alongside the value.
    Scalar {
        input: Var,
        grad: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation.
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn nchw(shape: &[usize], what: &'static str) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(shape).map_err(|_| Error::ShapeMismatch {
        context: what,
        left: shape.to_vec(),
        right: vec![0; 4],
    })
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    /// Records a tensor as a leaf. Gradients are kept for it iff it
    /// `requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Records a constant. Unlike [`Tensor`], zero extents are allowed here
    /// (e.g. an empty channel block).
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                context: "constant data length",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn to_tensor(&self, v: Var) -> Result<Tensor<T>> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
    }

    /// Cross-correlation (no kernel flip) with stride 1.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        let [n, c, h, w] = nchw(self.shape(input), "conv2d input must be NCHW")?;
        let [f, kc, kh, kw] = nchw(self.shape(kernel), "conv2d kernel must be FCkHkW")?;
        if kc != c {
            return Err(Error::ShapeMismatch {
                context: "conv2d channel count (input vs kernel)",
                left: self.shape(input).to_vec(),
                right: self.shape(kernel).to_vec(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::ShapeMismatch {
                context: "conv2d kernel spatial dims must be odd",
                left: self.shape(input).to_vec(),
                right: self.shape(kernel).to_vec(),
            });
        }
        if self.shape(bias) != [f] {
            return Err(Error::ShapeMismatch {
                context: "conv2d bias must have one entry per filter",
                left: self.shape(kernel).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let (pad_h, pad_w) = match padding {
            Padding::Same => (kh / 2, kw / 2),
            Padding::Valid => (0, 0),
        };
        if h + 2 * pad_h < kh || w + 2 * pad_w < kw {
            return Err(Error::ShapeMismatch {
                context: "conv2d kernel larger than padded input",
                left: self.shape(input).to_vec(),
                right: self.shape(kernel).to_vec(),
            });
        }
        let geometry = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            filters: f,
            kernel_h: kh,
            kernel_w: kw,
            pad_h,
            pad_w,
            out_h: h + 2 * pad_h - kh + 1,
            out_w: w + 2 * pad_w - kw + 1,
        };
        let value = conv::forward(
            &geometry,
            n,
            self.value(input),
            self.value(kernel),
            self.value(bias),
        );
        let needs = self.node(input).needs_grad
            || self.node(kernel).needs_grad
            || self.node(bias).needs_grad;
        Ok(self.push(
            vec![n, f, geometry.out_h, geometry.out_w],
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
            needs,
        ))
    }

    pub fn max_pool_2x2(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = nchw(self.shape(input), "max_pool_2x2 input must be NCHW")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch {
                context: "max_pool_2x2 needs even spatial dims",
                left: self.shape(input).to_vec(),
                right: vec![2, 2],
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input);
        let mut value = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for idx in [best + 1, best + w, best + w + 1] {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    value.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let needs = self.node(input).needs_grad;
        Ok(self.push(
            vec![n, c, oh, ow],
            value,
            Op::MaxPool { input, argmax },
            needs,
        ))
    }

    pub fn upsample_nearest_2x(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = nchw(self.shape(input), "upsample input must be NCHW")?;
        let x = self.value(input);
        let (oh, ow) = (2 * h, 2 * w);
        let mut value = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut value[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                let row = &src[(oy / 2) * w..(oy / 2 + 1) * w];
                for (ox, d) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                    *d = row[ox / 2];
                }
            }
        }
        let needs = self.node(input).needs_grad;
        Ok(self.push(vec![n, c, oh, ow], value, Op::Upsample { input }, needs))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = nchw(self.shape(a), "concat lhs must be NCHW")?;
        let [nb, cb, hb, wb] = nchw(self.shape(b), "concat rhs must be NCHW")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::ShapeMismatch {
                context: "concat_channels needs equal N, H, W",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let (xa, xb) = (self.value(a), self.value(b));
        let (la, lb) = (ca * h * w, cb * h * w);
        let mut value = Vec::with_capacity(n * (la + lb));
        for s in 0..n {
            value.extend_from_slice(&xa[s * la..(s + 1) * la]);
            value.extend_from_slice(&xb[s * lb..(s + 1) * lb]);
        }
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(vec![n, ca + cb, h, w], value, Op::Concat { a, b }, needs))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(input),
            Activation::Sigmoid => self.sigmoid(input),
        }
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self
            .value(input)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let node = self.node(input);
        let (shape, needs) = (node.shape.clone(), node.needs_grad);
        self.push(shape, value, Op::Relu { input }, needs)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).iter().map(|&v| sigmoid(v)).collect();
        let node = self.node(input);
        let (shape, needs) = (node.shape.clone(), node.needs_grad);
        self.push(shape, value, Op::Sigmoid { input }, needs)
    }

    /// Softmax over the channel axis at every pixel.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = nchw(self.shape(input), "softmax input must be NCHW")?;
        let x = self.value(input);
        let px = h * w;
        let mut value = vec![T::zero(); x.len()];
        let mut scratch = vec![T::zero(); c];
        for s in 0..n {
            let base = s * c * px;
            for p in 0..px {
                let mut max = T::neg_infinity();
                for ch in 0..c {
                    max = max.max(x[base + ch * px + p]);
                }
                let mut total = T::zero();
                for (ch, e) in scratch.iter_mut().enumerate() {
                    *e = (x[base + ch * px + p] - max).exp();
                    total = total + *e;
                }
                for (ch, e) in scratch.iter().enumerate() {
                    value[base + ch * px + p] = *e / total;
                }
            }
        }
        let needs = self.node(input).needs_grad;
        Ok(self.push(vec![n, c, h, w], value, Op::Softmax { input }, needs))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is zero;
    /// otherwise one uniform draw per element decides whether it is zeroed.
    pub fn dropout(
        &mut self,
        input: Var,
        rate: f64,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(input).len())
            .map(|_| {
                if rng.uniform() < rate {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let value = self
            .value(input)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let node = self.node(input);
        let (shape, needs) = (node.shape.clone(), node.needs_grad);
        Ok(self.push(shape, value, Op::Dropout { input, mask }, needs))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).iter().copied().sum::<T>();
        let needs = self.node(input).needs_grad;
        self.push(vec![1], vec![total], Op::Sum { input }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                context: "elementwise mul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, Op::Mul { a, b }, needs))
    }

    /// Records a scalar `value = f(input)` with a precomputed `∂f/∂input`.
    /// This is how the loss functions attach to the tape.
    pub fn scalar_fn(&mut self, input: Var, value: T, grad: Vec<T>) -> Result<Var> {
        if grad.len() != self.value(input).len() {
            return Err(Error::ShapeMismatch {
                context: "scalar_fn gradient length",
                left: self.shape(input).to_vec(),
                right: vec![grad.len()],
            });
        }
        let needs = self.node(input).needs_grad;
        Ok(self.push(vec![1], vec![value], Op::Scalar { input, grad }, needs))
    }

    /// Propagates `∂loss/∂·` back to every leaf that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::ShapeMismatch {
                context: "backward needs a scalar loss",
                left: self.shape(loss).to_vec(),
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geometry,
                } => {
                    let n = self.shape(*input)[0];
                    let g = conv::backward(
                        geometry,
                        n,
                        self.value(*input),
                        self.value(*kernel),
                        &dy,
                        self.node(*input).needs_grad,
                        self.node(*kernel).needs_grad,
                        self.node(*bias).needs_grad,
                    );
                    if let Some(d) = g.input {
                        add_into(&mut grads, *input, d);
                    }
                    if let Some(d) = g.kernel {
                        add_into(&mut grads, *kernel, d);
                    }
                    if let Some(d) = g.bias {
                        add_into(&mut grads, *bias, d);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let mut dx = vec![T::zero(); self.value(*input).len()];
                    for (&src, &g) in argmax.iter().zip(&dy) {
                        dx[src as usize] = dx[src as usize] + g;
                    }
                    add_into(&mut grads, *input, dx);
                }
                Op::Upsample { input } => {
                    let [n, c, h, w] = nchw(self.shape(*input), "upsample")?;
                    let ow = 2 * w;
                    let mut dx = vec![T::zero(); n * c * h * w];
                    for plane in 0..n * c {
                        let src = &dy[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                        for (oy, row) in src.chunks(ow).enumerate() {
                            for (ox, &g) in row.iter().enumerate() {
                                let d = &mut dst[(oy / 2) * w + ox / 2];
                                *d = *d + g;
                            }
                        }
                    }
                    add_into(&mut grads, *input, dx);
                }
                Op::Concat { a, b } => {
                    let [n, ca, h, w] = nchw(self.shape(*a), "concat")?;
                    let cb = self.shape(*b)[1];
                    let (la, lb) = (ca * h * w, cb * h * w);
                    if self.node(*a).needs_grad {
                        let mut da = Vec::with_capacity(n * la);
                        for s in 0..n {
                            da.extend_from_slice(&dy[s * (la + lb)..s * (la + lb) + la]);
                        }
                        add_into(&mut grads, *a, da);
                    }
                    if self.node(*b).needs_grad {
                        let mut db = Vec::with_capacity(n * lb);
                        for s in 0..n {
                            db.extend_from_slice(&dy[s * (la + lb) + la..(s + 1) * (la + lb)]);
                        }
                        add_into(&mut grads, *b, db);
                    }
                }
                Op::Relu { input } => {
                    let dx = self
                        .value(*input)
                        .iter()
                        .zip(&dy)
                        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                        .collect();
                    add_into(&mut grads, *input, dx);
                }
                Op::Sigmoid { input } => {
                    let dx = node
                        .value
                        .iter()
                        .zip(&dy)
                        .map(|(&y, &g)| g * y * (T::one() - y))
                        .collect();
                    add_into(&mut grads, *input, dx);
                }
                Op::Softmax { input } => {
                    let [n, c, h, w] = nchw(&node.shape, "softmax")?;
                    let px = h * w;
                    let y = &node.value;
                    let mut dx = vec![T::zero(); y.len()];
                    for s in 0..n {
                        let base = s * c * px;
                        for p in 0..px {
                            let mut dot = T::zero();
                            for ch in 0..c {
                                let i = base + ch * px + p;
                                dot = dot + y[i] * dy[i];
                            }
                            for ch in 0..c {
                                let i = base + ch * px + p;
                                dx[i] = y[i] * (dy[i] - dot);
                            }
                        }
                    }
                    add_into(&mut grads, *input, dx);
                }
                Op::Dropout { input, mask } => {
                    let dx = dy.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                    add_into(&mut grads, *input, dx);
                }
                Op::Sum { input } => {
                    let len = self.value(*input).len();
                    add_into(&mut grads, *input, vec![dy[0]; len]);
                }
                Op::Mul { a, b } => {
                    if self.node(*a).needs_grad {
                        let da = dy
                            .iter()
                            .zip(self.value(*b))
                            .map(|(&g, &y)| g * y)
                            .collect();
                        add_into(&mut grads, *a, da);
                    }
                    if self.node(*b).needs_grad {
                        let db = dy
                            .iter()
                            .zip(self.value(*a))
                            .map(|(&g, &x)| g * x)
                            .collect();
                        add_into(&mut grads, *b, db);
                    }
                }
                Op::Scalar { input, grad } => {
                    let dx = grad.iter().map(|&g| g * dy[0]).collect();
                    add_into(&mut grads, *input, dx);
                }
            }
        }

        // Only leaf gradients survive the sweep.
        Ok(Gradients { grads })
    }
}

fn add_into<T: Real>(grads: &mut [Option<Vec<T>>], target: Var, delta: Vec<T>) {
    match &mut grads[target.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e = *e + d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `tensor.grad`.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}
