//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value. [`Tape::backward`] replays the nodes in reverse and accumulates
//! vector-Jacobian products. Nodes that do not depend on any parameter are
//! never visited during the backward pass.
//!
//! Image-like tensors use HWC layout, row-major. Operations that treat a
//! tensor as `[rows, channels]` take the last axis as the channel axis.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::rc::Rc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::render::{render_backward, render_forward, RenderParams};

/// Scalar type the tape can run on.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits the scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial weighting used by [`Tape::cos2_aggregate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    /// Product of the two per-position change norms, each divided by its
    /// spatial maximum, normalized by the total weight.
    L2Mask,
    /// Every position weighted 1/S.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    MulConst(Var, Rc<Vec<T>>),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Silu(Var),
    Sum(Var),
    MeanRows(Var),
    MatVec(Var, Var),
    Outer(Var, Var),
    Softmax(Var),
    DivBySum(Var),
    Normalize(Var, T),
    Stack(Vec<Var>),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Upsample2x(Var),
    Render(Var, Rc<RenderParams>),
    Cos2Aggregate(Var, Var, Weighting, T),
    PairwiseCos2(Var, T),
}

struct Node<T: Real> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation graph.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
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

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape), "value/shape mismatch");
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, value: Vec<T>, shape: &[usize]) -> Var {
        assert_eq!(value.len(), numel(shape), "constant shape mismatch");
        self.push(value, shape.to_vec(), Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Vec<T>, shape: &[usize]) -> Var {
        assert_eq!(value.len(), numel(shape), "param shape mismatch");
        self.push(value, shape.to_vec(), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on a tensor of {} elements", val.len());
        val[0]
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(value, shape, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, what: &str) -> Var {
        self.same_shape(a, b, what);
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(value, shape, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    /// Elementwise product with a constant tensor of the same size.
    pub fn mul_const(&mut self, a: Var, c: Rc<Vec<T>>) -> Var {
        assert_eq!(self.value(a).len(), c.len(), "mul_const size mismatch");
        let value = self.value(a).iter().zip(c.iter()).map(|(&x, &k)| x * k).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(value, shape, Op::MulConst(a, c), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// x · sigmoid(x).
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x / (T::one() + (-x).exp()), Op::Silu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.ng(a);
        self.push(vec![s], vec![1], Op::Sum(a), ng)
    }

    /// Mean over all leading axes: `[.., C]` to `[1, C]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let c = *shape.last().expect("mean_rows on a scalar");
        let rows = numel(shape) / c;
        let inv = T::one() / T::from_usize(rows).unwrap();
        let mut out = vec![T::zero(); c];
        for row in self.value(a).chunks_exact(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let ng = self.ng(a);
        self.push(out, vec![1, c], Op::MeanRows(a), ng)
    }

    /// Matrix `[R, C]` times vector `[C]`.
    pub fn matvec(&mut self, m: Var, x: Var) -> Var {
        let ms = self.shape(m);
        assert_eq!(ms.len(), 2, "matvec expects a matrix");
        let (r, c) = (ms[0], ms[1]);
        assert_eq!(self.value(x).len(), c, "matvec inner dimension");
        let mv = self.value(m);
        let xv = self.value(x);
        let out = (0..r)
            .map(|i| {
                mv[i * c..(i + 1) * c]
                    .iter()
                    .zip(xv)
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect();
        let ng = self.ng(m) || self.ng(x);
        self.push(out, vec![r], Op::MatVec(m, x), ng)
    }

    /// Outer product `[R] x [C] -> [R, C]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = (self.value(a).len(), self.value(b).len());
        let mut out = Vec::with_capacity(r * c);
        for &x in self.value(a) {
            out.extend(self.value(b).iter().map(|&y| x * y));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, vec![r, c], Op::Outer(a, b), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mx = v.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = v.iter().map(|&x| (x - mx).exp()).collect();
        let z: T = e.iter().copied().sum();
        let out = e.into_iter().map(|x| x / z).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(out, shape, Op::Softmax(a), ng)
    }

    /// x / Σx.
    pub fn div_by_sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).iter().copied().sum();
        let out = self.value(a).iter().map(|&x| x / s).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(out, shape, Op::DivBySum(a), ng)
    }

    /// Rescales a vector to the given Euclidean length.
    pub fn normalize(&mut self, a: Var, length: T) -> Var {
        let norm = self.value(a).iter().map(|&x| x * x).sum::<T>().sqrt();
        let out = self.value(a).iter().map(|&x| x * length / norm).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(out, shape, Op::Normalize(a, length), ng)
    }

    /// Stacks equally sized tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack of nothing");
        let inner = self.shape(parts[0]).to_vec();
        let mut out = Vec::with_capacity(parts.len() * numel(&inner));
        for &p in parts {
            assert_eq!(self.shape(p), inner.as_slice(), "stack shape mismatch");
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, shape, Op::Stack(parts.to_vec()), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), self.value(a).len(), "reshape size mismatch");
        let value = self.value(a).to_vec();
        let ng = self.ng(a);
        self.push(value, shape.to_vec(), Op::Reshape(a), ng)
    }

    /// 2-D convolution, HWC input, weight `[k, k, cin, cout]`, bias `[cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let is = self.shape(input);
        assert_eq!(is.len(), 3, "conv2d input must be HWC");
        let ws = self.shape(weight);
        assert_eq!(ws.len(), 4, "conv2d weight must be [k, k, cin, cout]");
        assert_eq!(ws[0], ws[1], "square kernels only");
        assert_eq!(ws[2], is[2], "conv2d channel mismatch");
        let geom = ConvGeometry {
            in_h: is[0],
            in_w: is[1],
            cin: is[2],
            cout: ws[3],
            kernel: ws[0],
            stride,
            pad,
        };
        assert_eq!(self.value(bias).len(), geom.cout, "conv2d bias size");
        let out = conv2d_forward(self.value(input), self.value(weight), self.value(bias), &geom);
        let ng = self.ng(input) || self.ng(weight) || self.ng(bias);
        self.push(
            out,
            vec![geom.out_h(), geom.out_w(), geom.cout],
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            ng,
        )
    }

    /// Nearest-neighbour 2x upsampling of an HWC tensor.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 3, "upsample2x expects HWC");
        let (h, w, c) = (s[0], s[1], s[2]);
        let v = self.value(a);
        let mut out = vec![T::zero(); 4 * h * w * c];
        for y in 0..2 * h {
            for x in 0..2 * w {
                let src = ((y / 2) * w + x / 2) * c;
                let dst = (y * 2 * w + x) * c;
                out[dst..dst + c].copy_from_slice(&v[src..src + c]);
            }
        }
        let ng = self.ng(a);
        self.push(out, vec![2 * h, 2 * w, c], Op::Upsample2x(a), ng)
    }

    /// Renders a factor vector into an `[H, W, 3]` image.
    pub fn render(&mut self, factors: Var, params: Rc<RenderParams>) -> Var {
        let f: Vec<f64> = self.value(factors).iter().map(|x| x.as_f64()).collect();
        let img = render_forward(&f, &params);
        let size = params.image_size;
        let out = img.into_iter().map(T::lit).collect();
        let ng = self.ng(factors);
        self.push(out, vec![size, size, 3], Op::Render(factors, params), ng)
    }

    /// Weighted mean of per-position squared cosine similarity between two
    /// `[.., C]` tensors. Positive, in `[0, 1]`.
    pub fn cos2_aggregate(&mut self, x: Var, y: Var, weighting: Weighting, eps: T) -> Var {
        self.same_shape(x, y, "cos2_aggregate");
        let c = *self.shape(x).last().expect("cos2_aggregate on a scalar");
        let agg = cos2_aggregate_forward(self.value(x), self.value(y), c, weighting, eps);
        let ng = self.ng(x) || self.ng(y);
        self.push(vec![agg.value], vec![1], Op::Cos2Aggregate(x, y, weighting, eps), ng)
    }

    /// Σ over ordered pairs i ≠ j of cos²(row_i, row_j) of an `[m, n]` matrix.
    pub fn pairwise_cos2(&mut self, a: Var, eps: T) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "pairwise_cos2 expects [m, n]");
        let v = pairwise_cos2_forward(self.value(a), s[0], s[1], eps);
        let ng = self.ng(a);
        self.push(vec![v], vec![1], Op::PairwiseCos2(a, eps), ng)
    }

    /// Gradients of the one-element node `root` with respect to every node
    /// that depends on a parameter.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(root) {
            return Gradients { grads };
        }
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let acc = |v: Var, grads: &mut [Option<Vec<T>>], f: &dyn Fn(usize) -> T| {
            if !self.ng(v) {
                return;
            }
            let n = self.value(v).len();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            for (i, s) in slot.iter_mut().enumerate() {
                *s += f(i);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, grads, &|i| g[i]);
                acc(*b, grads, &|i| g[i]);
            }
            Op::Sub(a, b) => {
                acc(*a, grads, &|i| g[i]);
                acc(*b, grads, &|i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, grads, &|i| g[i] * bv[i]);
                acc(*b, grads, &|i| g[i] * av[i]);
            }
            Op::Scale(a, c) => acc(*a, grads, &|i| g[i] * *c),
            Op::Offset(a) => acc(*a, grads, &|i| g[i]),
            Op::MulConst(a, c) => acc(*a, grads, &|i| g[i] * c[i]),
            Op::Tanh(a) => acc(*a, grads, &|i| g[i] * (T::one() - out[i] * out[i])),
            Op::Exp(a) => acc(*a, grads, &|i| g[i] * out[i]),
            Op::Ln(a) => {
                let av = self.value(*a);
                acc(*a, grads, &|i| g[i] / av[i])
            }
            Op::Sqrt(a) => acc(*a, grads, &|i| g[i] / (T::lit(2.0) * out[i])),
            Op::Square(a) => {
                let av = self.value(*a);
                acc(*a, grads, &|i| g[i] * T::lit(2.0) * av[i])
            }
            Op::Silu(a) => {
                let av = self.value(*a);
                acc(*a, grads, &|i| {
                    let s = T::one() / (T::one() + (-av[i]).exp());
                    g[i] * s * (T::one() + av[i] * (T::one() - s))
                })
            }
            Op::Sum(a) => acc(*a, grads, &|_| g[0]),
            Op::MeanRows(a) => {
                let c = out.len();
                let rows = self.value(*a).len() / c;
                let inv = T::one() / T::from_usize(rows).unwrap();
                acc(*a, grads, &|i| g[i % c] * inv)
            }
            Op::MatVec(m, x) => {
                let c = self.value(*x).len();
                let (mv, xv) = (self.value(*m), self.value(*x));
                acc(*m, grads, &|i| g[i / c] * xv[i % c]);
                if self.ng(*x) {
                    let mut gx = vec![T::zero(); c];
                    for (r, &gr) in g.iter().enumerate() {
                        for (j, gj) in gx.iter_mut().enumerate() {
                            *gj += gr * mv[r * c + j];
                        }
                    }
                    acc(*x, grads, &|j| gx[j]);
                }
            }
            Op::Outer(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = bv.len();
                if self.ng(*a) {
                    let ga: Vec<T> = (0..av.len())
                        .map(|r| (0..c).fold(T::zero(), |s, j| s + g[r * c + j] * bv[j]))
                        .collect();
                    acc(*a, grads, &|r| ga[r]);
                }
                if self.ng(*b) {
                    let gb: Vec<T> = (0..c)
                        .map(|j| (0..av.len()).fold(T::zero(), |s, r| s + g[r * c + j] * av[r]))
                        .collect();
                    acc(*b, grads, &|j| gb[j]);
                }
            }
            Op::Softmax(a) => {
                let dot: T = g.iter().zip(out).map(|(&gi, &yi)| gi * yi).sum();
                acc(*a, grads, &|i| out[i] * (g[i] - dot))
            }
            Op::DivBySum(a) => {
                let s: T = self.value(*a).iter().copied().sum();
                let dot: T = g.iter().zip(out).map(|(&gi, &yi)| gi * yi).sum();
                acc(*a, grads, &|i| (g[i] - dot) / s)
            }
            Op::Normalize(a, length) => {
                let av = self.value(*a);
                let norm = av.iter().map(|&x| x * x).sum::<T>().sqrt();
                // y = L x / |x|  =>  dx = (L/|x|) (g - u (u·g)), u = x/|x|
                let ug: T = av.iter().zip(g).map(|(&x, &gi)| x * gi).sum::<T>() / norm;
                acc(*a, grads, &|i| (*length / norm) * (g[i] - av[i] / norm * ug))
            }
            Op::Stack(parts) => {
                let inner = out.len() / parts.len();
                for (k, &p) in parts.iter().enumerate() {
                    acc(p, grads, &|i| g[k * inner + i]);
                }
            }
            Op::Reshape(a) => acc(*a, grads, &|i| g[i]),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                if self.ng(*input) {
                    let gi = conv2d_backward_input(g, self.value(*weight), geom);
                    acc(*input, grads, &|i| gi[i]);
                }
                if self.ng(*weight) {
                    let gw = conv2d_backward_weight(g, self.value(*input), geom);
                    acc(*weight, grads, &|i| gw[i]);
                }
                if self.ng(*bias) {
                    let mut gb = vec![T::zero(); geom.cout];
                    for px in g.chunks_exact(geom.cout) {
                        for (b, &x) in gb.iter_mut().zip(px) {
                            *b += x;
                        }
                    }
                    acc(*bias, grads, &|i| gb[i]);
                }
            }
            Op::Upsample2x(a) => {
                let s = self.shape(*a);
                let (h, w, c) = (s[0], s[1], s[2]);
                let mut ga = vec![T::zero(); h * w * c];
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        let src = ((y / 2) * w + x / 2) * c;
                        let dst = (y * 2 * w + x) * c;
                        for k in 0..c {
                            ga[src + k] += g[dst + k];
                        }
                    }
                }
                acc(*a, grads, &|i| ga[i]);
            }
            Op::Render(f, params) => {
                let fv: Vec<f64> = self.value(*f).iter().map(|x| x.as_f64()).collect();
                let gv: Vec<f64> = g.iter().map(|x| x.as_f64()).collect();
                let gf = render_backward(&fv, &params, &gv);
                acc(*f, grads, &|i| T::lit(gf[i]));
            }
            Op::Cos2Aggregate(x, y, weighting, eps) => {
                let c = *self.shape(*x).last().unwrap();
                let (gx, gy) = cos2_aggregate_backward(
                    self.value(*x),
                    self.value(*y),
                    c,
                    *weighting,
                    *eps,
                    g[0],
                );
                acc(*x, grads, &|i| gx[i]);
                acc(*y, grads, &|i| gy[i]);
            }
            Op::PairwiseCos2(a, eps) => {
                let s = self.shape(*a);
                let ga = pairwise_cos2_backward(self.value(*a), s[0], s[1], *eps, g[0]);
                acc(*a, grads, &|i| ga[i]);
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a node, if it depends on a parameter and was reached.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of a node, zeros if it was not reached.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); tape.value(v).len()])
    }
}

pub(crate) fn conv2d_forward<T: Real>(input: &[T], weight: &[T], bias: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = Vec::with_capacity(oh * ow * g.cout);
    for _ in 0..oh * ow {
        out.extend_from_slice(bias);
    }
    for oy in 0..oh {
        for ox in 0..ow {
            let o = (oy * ow + ox) * g.cout;
            let acc = &mut out[o..o + g.cout];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let ibase = (iy as usize * g.in_w + ix as usize) * g.cin;
                    let wbase = (ky * g.kernel + kx) * g.cin * g.cout;
                    for ic in 0..g.cin {
                        let xv = input[ibase + ic];
                        let wrow = &weight[wbase + ic * g.cout..wbase + (ic + 1) * g.cout];
                        for (a, &w) in acc.iter_mut().zip(wrow) {
                            *a += xv * w;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_input<T: Real>(gout: &[T], weight: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut gin = vec![T::zero(); g.in_h * g.in_w * g.cin];
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &gout[(oy * ow + ox) * g.cout..(oy * ow + ox + 1) * g.cout];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let ibase = (iy as usize * g.in_w + ix as usize) * g.cin;
                    let wbase = (ky * g.kernel + kx) * g.cin * g.cout;
                    for ic in 0..g.cin {
                        let wrow = &weight[wbase + ic * g.cout..wbase + (ic + 1) * g.cout];
                        let s = wrow.iter().zip(go).fold(T::zero(), |s, (&w, &d)| s + w * d);
                        gin[ibase + ic] += s;
                    }
                }
            }
        }
    }
    gin
}

fn conv2d_backward_weight<T: Real>(gout: &[T], input: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut gw = vec![T::zero(); g.kernel * g.kernel * g.cin * g.cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &gout[(oy * ow + ox) * g.cout..(oy * ow + ox + 1) * g.cout];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let ibase = (iy as usize * g.in_w + ix as usize) * g.cin;
                    let wbase = (ky * g.kernel + kx) * g.cin * g.cout;
                    for ic in 0..g.cin {
                        let xv = input[ibase + ic];
                        let wrow = &mut gw[wbase + ic * g.cout..wbase + (ic + 1) * g.cout];
                        for (w, &d) in wrow.iter_mut().zip(go) {
                            *w += xv * d;
                        }
                    }
                }
            }
        }
    }
    gw
}

/// Forward value of the weighted squared-cosine aggregate for one stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate<T> {
    pub value: T,
    /// No position carries weight (one or both changes vanish everywhere).
    pub degenerate: bool,
}

struct PositionStats<T> {
    a: Vec<T>,
    b: Vec<T>,
    dot: Vec<T>,
    cos2: Vec<T>,
}

fn position_stats<T: Real>(x: &[T], y: &[T], c: usize, eps: T) -> PositionStats<T> {
    let s = x.len() / c;
    let mut st = PositionStats {
        a: Vec::with_capacity(s),
        b: Vec::with_capacity(s),
        dot: Vec::with_capacity(s),
        cos2: Vec::with_capacity(s),
    };
    for (xs, ys) in x.chunks_exact(c).zip(y.chunks_exact(c)) {
        let (mut xx, mut yy, mut xy) = (T::zero(), T::zero(), T::zero());
        for (&p, &q) in xs.iter().zip(ys) {
            xx += p * p;
            yy += q * q;
            xy += p * q;
        }
        let (a, b) = (xx.sqrt(), yy.sqrt());
        let denom = xx * yy;
        let cos2 = if a > eps && b > eps { xy * xy / denom } else { T::zero() };
        st.a.push(a);
        st.b.push(b);
        st.dot.push(xy);
        st.cos2.push(cos2);
    }
    st
}

struct MaskWeights<T> {
    q: Vec<T>,
    q_total: T,
    a_max: T,
    b_max: T,
}

fn mask_weights<T: Real>(st: &PositionStats<T>, eps: T) -> MaskWeights<T> {
    let a_max = st.a.iter().copied().fold(T::zero(), T::max).max(eps);
    let b_max = st.b.iter().copied().fold(T::zero(), T::max).max(eps);
    let q: Vec<T> = st
        .a
        .iter()
        .zip(&st.b)
        .map(|(&a, &b)| (a / a_max) * (b / b_max))
        .collect();
    let q_total = q.iter().copied().sum();
    MaskWeights {
        q,
        q_total,
        a_max,
        b_max,
    }
}

pub fn cos2_aggregate_forward<T: Real>(x: &[T], y: &[T], c: usize, weighting: Weighting, eps: T) -> Aggregate<T> {
    assert_eq!(x.len(), y.len(), "cos2_aggregate size mismatch");
    let st = position_stats(x, y, c, eps);
    match weighting {
        Weighting::L2Mask => {
            let mw = mask_weights(&st, eps);
            if mw.q_total <= eps {
                return Aggregate {
                    value: T::zero(),
                    degenerate: true,
                };
            }
            let num: T = mw.q.iter().zip(&st.cos2).map(|(&q, &c2)| q * c2).sum();
            Aggregate {
                value: num / mw.q_total,
                degenerate: false,
            }
        }
        Weighting::Uniform => {
            let s = T::from_usize(st.cos2.len()).unwrap();
            let degenerate = st.a.iter().zip(&st.b).all(|(&a, &b)| a <= eps || b <= eps);
            Aggregate {
                value: st.cos2.iter().copied().sum::<T>() / s,
                degenerate,
            }
        }
    }
}

fn cos2_aggregate_backward<T: Real>(
    x: &[T],
    y: &[T],
    c: usize,
    weighting: Weighting,
    eps: T,
    g: T,
) -> (Vec<T>, Vec<T>) {
    let st = position_stats(x, y, c, eps);
    let s = st.a.len();
    let mut gx = vec![T::zero(); x.len()];
    let mut gy = vec![T::zero(); y.len()];
    // dL/dcos2_s, dL/da_s, dL/db_s
    let (w, da, db): (Vec<T>, Vec<T>, Vec<T>) = match weighting {
        Weighting::L2Mask => {
            let mw = mask_weights(&st, eps);
            if mw.q_total <= eps {
                return (gx, gy);
            }
            let value: T = mw.q.iter().zip(&st.cos2).map(|(&q, &c2)| q * c2).sum::<T>() / mw.q_total;
            // The spatial maxima cancel between q and Q, so they carry no gradient.
            let scale = mw.q_total * mw.a_max * mw.b_max;
            let w = mw.q.iter().map(|&q| q / mw.q_total).collect();
            let da = (0..s).map(|i| st.b[i] * (st.cos2[i] - value) / scale).collect();
            let db = (0..s).map(|i| st.a[i] * (st.cos2[i] - value) / scale).collect();
            (w, da, db)
        }
        Weighting::Uniform => {
            let inv = T::one() / T::from_usize(s).unwrap();
            (vec![inv; s], vec![T::zero(); s], vec![T::zero(); s])
        }
    };
    let two = T::lit(2.0);
    for i in 0..s {
        let (a, b) = (st.a[i], st.b[i]);
        let xs = &x[i * c..(i + 1) * c];
        let ys = &y[i * c..(i + 1) * c];
        let gxs = &mut gx[i * c..(i + 1) * c];
        if a > eps && b > eps {
            // cos2 = dot² / (a² b²)
            let (a2, b2) = (a * a, b * b);
            let kx = two * st.dot[i] / (a2 * b2);
            let cx = two * st.cos2[i] / a2;
            let cy = two * st.cos2[i] / b2;
            for k in 0..c {
                gxs[k] += g * w[i] * (kx * ys[k] - cx * xs[k]);
            }
            let gys = &mut gy[i * c..(i + 1) * c];
            for k in 0..c {
                gys[k] += g * w[i] * (kx * xs[k] - cy * ys[k]);
            }
        }
        let gxs = &mut gx[i * c..(i + 1) * c];
        if a > T::zero() && da[i] != T::zero() {
            for k in 0..c {
                gxs[k] += g * da[i] * xs[k] / a;
            }
        }
        if b > T::zero() && db[i] != T::zero() {
            let gys = &mut gy[i * c..(i + 1) * c];
            for k in 0..c {
                gys[k] += g * db[i] * ys[k] / b;
            }
        }
    }
    (gx, gy)
}

pub fn pairwise_cos2_forward<T: Real>(v: &[T], m: usize, n: usize, eps: T) -> T {
    let norms: Vec<T> = v.chunks_exact(n).map(|r| r.iter().map(|&x| x * x).sum()).collect();
    let mut total = T::zero();
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let d: T = (0..n).map(|k| v[i * n + k] * v[j * n + k]).sum();
            total += d * d / (norms[i] * norms[j]).max(eps);
        }
    }
    total
}

fn pairwise_cos2_backward<T: Real>(v: &[T], m: usize, n: usize, eps: T, g: T) -> Vec<T> {
    let norms: Vec<T> = v.chunks_exact(n).map(|r| r.iter().map(|&x| x * x).sum()).collect();
    let mut gv = vec![T::zero(); v.len()];
    let two = T::lit(2.0);
    // Each unordered pair appears twice in the ordered sum.
    for i in 0..m {
        for j in 0..m {
            if i == j || (norms[i] * norms[j]) <= eps {
                continue;
            }
            let d: T = (0..n).map(|k| v[i * n + k] * v[j * n + k]).sum();
            let denom = norms[i] * norms[j];
            let c2 = d * d / denom;
            for k in 0..n {
                let di = two * d / denom * v[j * n + k] - two * c2 / norms[i] * v[i * n + k];
                gv[i * n + k] += two * g * di;
            }
        }
    }
    gv
}
