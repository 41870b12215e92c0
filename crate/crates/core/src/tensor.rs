//! A small reverse-mode automatic differentiation engine over dense `f64`
//! tensors.
//!
//! Every backward rule is itself written in terms of recorded tensor ops, so
//! gradients can be differentiated again (`grad(.., create_graph = true)`).
//! The gradient-penalty term of the critic objective needs exactly that: the
//! norm of an input gradient, differentiated with respect to the critic
//! weights.
//!
//! Tensors are row-major and immutable. Images use NCHW layout.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::ops;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

struct Node {
    id: usize,
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    op: Option<Op>,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ConvMode {
    /// y = conv(x, w)
    Forward,
    /// dx from (dy, w)
    InputGrad,
    /// dw from (x, dy)
    WeightGrad,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl ConvGeom {
    fn ho(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }
    fn wo(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }
}

enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Neg(Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    Powf(Tensor, f64),
    Exp(Tensor),
    Log(Tensor),
    Tanh(Tensor),
    Sigmoid(Tensor),
    /// Elementwise product with a constant (leaky-relu slopes, dropout masks).
    MaskMul(Tensor, Rc<Vec<f64>>),
    Matmul(Tensor, Tensor),
    Transpose(Tensor),
    Conv(Tensor, Tensor, ConvMode, ConvGeom),
    Upsample2x(Tensor),
    SumPool2x(Tensor),
    Reshape(Tensor),
    BroadcastTo(Tensor),
    SumTo(Tensor),
    Concat(Vec<Tensor>, usize),
    Narrow(Tensor, usize, usize),
    /// Inverse of `Narrow`: embeds the input into zeros along `axis` at `start`.
    PadNarrow(Tensor, usize, usize),
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
                vec![a, b]
            }
            Op::Conv(a, b, _, _) => vec![a, b],
            Op::Neg(a)
            | Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Powf(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::MaskMul(a, _)
            | Op::Transpose(a)
            | Op::Upsample2x(a)
            | Op::SumPool2x(a)
            | Op::Reshape(a)
            | Op::BroadcastTo(a)
            | Op::SumTo(a)
            | Op::Narrow(a, _, _)
            | Op::PadNarrow(a, _, _) => vec![a],
            Op::Concat(ts, _) => ts.iter().collect(),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape())?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// construction
// ---------------------------------------------------------------------------

impl Tensor {
    fn make(data: Vec<f64>, shape: Vec<usize>, op: Option<Op>) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape), "data length vs shape {shape:?}");
        let requires_grad = op
            .as_ref()
            .map(|o| o.inputs().iter().any(|t| t.requires_grad()))
            .unwrap_or(false);
        // Drop the graph edge when nothing upstream is differentiable.
        let op = if requires_grad { op } else { None };
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: Rc::new(data),
            op,
            requires_grad,
        }))
    }

    /// A constant tensor (no gradient).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(data.len(), numel(shape), "data length vs shape {shape:?}");
        Tensor::make(data, shape.to_vec(), None)
    }

    /// A differentiable leaf (a parameter or an input we differentiate with respect to).
    pub fn leaf(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(data.len(), numel(shape), "data length vs shape {shape:?}");
        Tensor(Rc::new(Node {
            id: next_id(),
            shape: shape.to_vec(),
            data: Rc::new(data),
            op: None,
            requires_grad: true,
        }))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v], &[])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![0.0; numel(shape)], shape)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![1.0; numel(shape)], shape)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_vec(vec![v; numel(shape)], shape)
    }

    /// Same data, cut from the graph. Shares the buffer.
    pub fn detach(&self) -> Tensor {
        Tensor(Rc::new(Node {
            id: next_id(),
            shape: self.0.shape.clone(),
            data: Rc::clone(&self.0.data),
            op: None,
            requires_grad: false,
        }))
    }

    /// Same data as a fresh differentiable leaf.
    pub fn detach_leaf(&self) -> Tensor {
        Tensor(Rc::new(Node {
            id: next_id(),
            shape: self.0.shape.clone(),
            data: Rc::clone(&self.0.data),
            op: None,
            requires_grad: true,
        }))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// broadcasting helpers
// ---------------------------------------------------------------------------

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            panic!("shapes {a:?} and {b:?} do not broadcast");
        };
    }
    out
}

/// Strides of `inner` viewed as broadcast to `outer` (0 on broadcast axes).
fn aligned_strides(outer: &[usize], inner: &[usize]) -> Vec<usize> {
    assert!(inner.len() <= outer.len(), "cannot broadcast {inner:?} to {outer:?}");
    let off = outer.len() - inner.len();
    let base = contiguous_strides(inner);
    (0..outer.len())
        .map(|i| {
            if i < off {
                0
            } else {
                let d = inner[i - off];
                assert!(
                    d == outer[i] || d == 1,
                    "cannot broadcast {inner:?} to {outer:?}"
                );
                if d == 1 {
                    0
                } else {
                    base[i - off]
                }
            }
        })
        .collect()
}

/// Walks every element of `shape` in row-major order, tracking one offset per
/// stride vector.
fn walk<const K: usize>(shape: &[usize], strides: [&[usize]; K], mut f: impl FnMut(usize, [usize; K])) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let nd = shape.len();
    if nd == 0 {
        f(0, [0; K]);
        return;
    }
    let inner = shape[nd - 1];
    let inner_strides: [usize; K] = std::array::from_fn(|k| strides[k][nd - 1]);
    let mut idx = vec![0usize; nd];
    let mut offs = [0usize; K];
    let mut o = 0;
    while o < total {
        for j in 0..inner {
            f(o + j, std::array::from_fn(|k| offs[k] + j * inner_strides[k]));
        }
        o += inner;
        let mut d = nd - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            for k in 0..K {
                offs[k] += strides[k][d];
            }
            if idx[d] < shape[d] {
                break;
            }
            for k in 0..K {
                offs[k] -= strides[k][d] * shape[d];
            }
            idx[d] = 0;
        }
    }
}

fn binary_kernel(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> (Vec<f64>, Vec<usize>) {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return (data, a.shape().to_vec());
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    if b.numel() == 1 && a.shape() == shape.as_slice() {
        let y = b.data()[0];
        return (a.data().iter().map(|&x| f(x, y)).collect(), shape);
    }
    let sa = aligned_strides(&shape, a.shape());
    let sb = aligned_strides(&shape, b.shape());
    let mut out = vec![0.0; numel(&shape)];
    let (ad, bd) = (a.data(), b.data());
    walk(&shape, [&sa, &sb], |o, [ia, ib]| out[o] = f(ad[ia], bd[ib]));
    (out, shape)
}

// ---------------------------------------------------------------------------
// dense kernels
// ---------------------------------------------------------------------------

/// c (m×n) = a (m×k) · b (k×n) + beta·c with arbitrary strides on a and b.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    if k > 0 {
        debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: the asserted bounds above cover every index matrixmultiply reads
    // or writes for the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output columns `ox` whose input column `ox + kx - pad` lies inside the row.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx);
    let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo());
    (lo, hi.max(lo))
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo, k, pad) = (g.ho(), g.wo(), g.k, g.pad as isize);
    let hw = ho * wo;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        line.fill(0.0);
                        continue;
                    }
                    let start = iy as usize * g.w + lo + kx - g.pad;
                    line[..lo].fill(0.0);
                    line[lo..hi].copy_from_slice(&plane[start..start + hi - lo]);
                    line[hi..].fill(0.0);
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (ho, wo, k, pad) = (g.ho(), g.wo(), g.k, g.pad as isize);
    let hw = ho * wo;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_cols(g, kx);
                if lo == hi {
                    continue;
                }
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let start = iy as usize * g.w + lo + kx - g.pad;
                    let dst = &mut plane[start..start + hi - lo];
                    for (d, v) in dst.iter_mut().zip(&src[oy * wo + lo..oy * wo + hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.k == 1 && g.pad == 0
}

fn conv_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ckk = g.c_in * g.k * g.k;
    let hw_in = g.c_in * g.h * g.w;
    let hw = g.ho() * g.wo();
    let mut out = vec![0.0; g.n * g.c_out * hw];
    let mut cols = vec![0.0; if is_pointwise(g) { 0 } else { ckk * hw }];
    for n in 0..g.n {
        let xn = &x[n * hw_in..(n + 1) * hw_in];
        let src: &[f64] = if is_pointwise(g) {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        let yn = &mut out[n * g.c_out * hw..(n + 1) * g.c_out * hw];
        gemm(g.c_out, ckk, hw, w, ckk, 1, src, hw, 1, 0.0, yn);
    }
    out
}

fn conv_input_grad(dy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ckk = g.c_in * g.k * g.k;
    let hw_in = g.c_in * g.h * g.w;
    let hw = g.ho() * g.wo();
    let mut dx = vec![0.0; g.n * hw_in];
    let mut cols = vec![0.0; ckk * hw];
    for n in 0..g.n {
        let dyn_ = &dy[n * g.c_out * hw..(n + 1) * g.c_out * hw];
        let dxn = &mut dx[n * hw_in..(n + 1) * hw_in];
        if is_pointwise(g) {
            gemm(ckk, g.c_out, hw, w, 1, ckk, dyn_, hw, 1, 0.0, dxn);
        } else {
            gemm(ckk, g.c_out, hw, w, 1, ckk, dyn_, hw, 1, 0.0, &mut cols);
            col2im(&cols, g, dxn);
        }
    }
    dx
}

fn conv_weight_grad(x: &[f64], dy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ckk = g.c_in * g.k * g.k;
    let hw_in = g.c_in * g.h * g.w;
    let hw = g.ho() * g.wo();
    let mut dw = vec![0.0; g.c_out * ckk];
    let mut cols = vec![0.0; if is_pointwise(g) { 0 } else { ckk * hw }];
    for n in 0..g.n {
        let xn = &x[n * hw_in..(n + 1) * hw_in];
        let src: &[f64] = if is_pointwise(g) {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        let dyn_ = &dy[n * g.c_out * hw..(n + 1) * g.c_out * hw];
        // dw (c_out × ckk) += dy_n (c_out × hw) · cols^T (hw × ckk)
        gemm(g.c_out, hw, ckk, dyn_, hw, 1, src, 1, hw, 1.0, &mut dw);
    }
    dw
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        let (d, s) = binary_kernel(self, other, |a, b| a + b);
        Tensor::make(d, s, Some(Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let (d, s) = binary_kernel(self, other, |a, b| a - b);
        Tensor::make(d, s, Some(Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let (d, s) = binary_kernel(self, other, |a, b| a * b);
        Tensor::make(d, s, Some(Op::Mul(self.clone(), other.clone())))
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let (d, s) = binary_kernel(self, other, |a, b| a / b);
        Tensor::make(d, s, Some(Op::Div(self.clone(), other.clone())))
    }

    pub fn neg(&self) -> Tensor {
        let d = self.data().iter().map(|v| -v).collect();
        Tensor::make(d, self.shape().to_vec(), Some(Op::Neg(self.clone())))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let d = self.data().iter().map(|v| v + s).collect();
        Tensor::make(d, self.shape().to_vec(), Some(Op::AddScalar(self.clone())))
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let d = self.data().iter().map(|v| v * s).collect();
        Tensor::make(d, self.shape().to_vec(), Some(Op::MulScalar(self.clone(), s)))
    }

    pub fn powf(&self, p: f64) -> Tensor {
        let d = self.data().iter().map(|v| v.powf(p)).collect();
        Tensor::make(d, self.shape().to_vec(), Some(Op::Powf(self.clone(), p)))
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn sqrt(&self) -> Tensor {
        self.powf(0.5)
    }

    pub fn exp(&self) -> Tensor {
        let d = self.data().iter().map(|v| v.exp()).collect();
        Tensor::make(d, self.shape().to_vec(), Some(Op::Exp(self.clone())))
    }

    pub fn ln(&self) -> Tensor {
        let d = self.data().iter().map(|v| v.ln()).collect();
        Tensor::make(d, self.shape().to_vec(), Some(Op::Log(self.clone())))
    }

    pub fn tanh(&self) -> Tensor {
        let d = self.data().iter().map(|v| v.tanh()).collect();
        Tensor::make(d, self.shape().to_vec(), Some(Op::Tanh(self.clone())))
    }

    pub fn sigmoid(&self) -> Tensor {
        let d = self.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        Tensor::make(d, self.shape().to_vec(), Some(Op::Sigmoid(self.clone())))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mask_mul(&self, mask: Rc<Vec<f64>>) -> Tensor {
        assert_eq!(mask.len(), self.numel());
        let d = self.data().iter().zip(mask.iter()).map(|(v, m)| v * m).collect();
        Tensor::make(d, self.shape().to_vec(), Some(Op::MaskMul(self.clone(), mask)))
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let mask = self.data().iter().map(|&v| if v > 0.0 { 1.0 } else { slope }).collect();
        self.mask_mul(Rc::new(mask))
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    /// (n×k)·(k×m)
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert!(self.ndim() == 2 && other.ndim() == 2, "matmul needs 2-D operands");
        let (m, k) = (self.dim(0), self.dim(1));
        let (k2, n) = (other.dim(0), other.dim(1));
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", self.shape(), other.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), k, 1, other.data(), n, 1, 0.0, &mut out);
        Tensor::make(out, vec![m, n], Some(Op::Matmul(self.clone(), other.clone())))
    }

    /// 2-D transpose.
    pub fn t(&self) -> Tensor {
        assert_eq!(self.ndim(), 2);
        let (r, c) = (self.dim(0), self.dim(1));
        let src = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Tensor::make(out, vec![c, r], Some(Op::Transpose(self.clone())))
    }

    /// Stride-1 2-D convolution: x (N,Ci,H,W), w (Co,Ci,k,k), zero padding `pad`.
    pub fn conv2d(&self, w: &Tensor, pad: usize) -> Tensor {
        assert_eq!(self.ndim(), 4, "conv2d input must be NCHW");
        assert_eq!(w.ndim(), 4, "conv2d weight must be (Co,Ci,k,k)");
        assert_eq!(w.dim(2), w.dim(3), "square kernels only");
        assert_eq!(self.dim(1), w.dim(1), "conv2d channel mismatch {:?} vs {:?}", self.shape(), w.shape());
        let g = ConvGeom {
            n: self.dim(0),
            c_in: self.dim(1),
            c_out: w.dim(0),
            h: self.dim(2),
            w: self.dim(3),
            k: w.dim(2),
            pad,
        };
        assert!(g.h + 2 * pad >= g.k && g.w + 2 * pad >= g.k, "kernel larger than padded input");
        conv_op(self, w, ConvMode::Forward, g)
    }

    pub fn upsample2x(&self) -> Tensor {
        let nd = self.ndim();
        assert!(nd >= 2);
        let (h, w) = (self.dim(nd - 2), self.dim(nd - 1));
        let planes = self.numel() / (h * w);
        let src = self.data();
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    d[y * 2 * w + x] = s[(y / 2) * w + x / 2];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[nd - 2] *= 2;
        shape[nd - 1] *= 2;
        Tensor::make(out, shape, Some(Op::Upsample2x(self.clone())))
    }

    pub fn sum_pool2x(&self) -> Tensor {
        let nd = self.ndim();
        assert!(nd >= 2);
        let (h, w) = (self.dim(nd - 2), self.dim(nd - 1));
        assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let planes = self.numel() / (h * w);
        let src = self.data();
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for x in 0..wo {
                    d[y * wo + x] = s[2 * y * w + 2 * x]
                        + s[2 * y * w + 2 * x + 1]
                        + s[(2 * y + 1) * w + 2 * x]
                        + s[(2 * y + 1) * w + 2 * x + 1];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[nd - 2] = ho;
        shape[nd - 1] = wo;
        Tensor::make(out, shape, Some(Op::SumPool2x(self.clone())))
    }

    pub fn avg_pool2x(&self) -> Tensor {
        self.sum_pool2x().mul_scalar(0.25)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(numel(shape), self.numel(), "reshape {:?} -> {shape:?}", self.shape());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape: shape.to_vec(),
            data: Rc::clone(&self.0.data),
            op: if self.requires_grad() { Some(Op::Reshape(self.clone())) } else { None },
            requires_grad: self.requires_grad(),
        }))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let strides = aligned_strides(shape, self.shape());
        let src = self.data();
        let mut out = vec![0.0; numel(shape)];
        walk(shape, [&strides], |o, [i]| out[o] = src[i]);
        Tensor::make(out, shape.to_vec(), Some(Op::BroadcastTo(self.clone())))
    }

    /// Sums over broadcast axes so the result has `shape` (inverse of `broadcast_to`).
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let strides = aligned_strides(self.shape(), shape);
        let src = self.data();
        let mut out = vec![0.0; numel(shape)];
        walk(self.shape(), [&strides], |i, [o]| out[o] += src[i]);
        Tensor::make(out, shape.to_vec(), Some(Op::SumTo(self.clone())))
    }

    pub fn sum_all(&self) -> Tensor {
        self.sum_to(&[])
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sum over the listed axes, keeping them as size 1.
    pub fn sum_keepdim(&self, axes: &[usize]) -> Tensor {
        let mut shape = self.shape().to_vec();
        for &a in axes {
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    pub fn mean_keepdim(&self, axes: &[usize]) -> Tensor {
        let count: usize = axes.iter().map(|&a| self.dim(a)).product();
        self.sum_keepdim(axes).mul_scalar(1.0 / count as f64)
    }

    pub fn concat(tensors: &[Tensor], axis: usize) -> Tensor {
        assert!(!tensors.is_empty());
        let first = tensors[0].shape();
        for t in tensors {
            assert_eq!(t.ndim(), first.len());
            for d in 0..first.len() {
                if d != axis {
                    assert_eq!(t.dim(d), first[d], "concat shape mismatch");
                }
            }
        }
        let total: usize = tensors.iter().map(|t| t.dim(axis)).sum();
        let mut shape = first.to_vec();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut out = vec![0.0; numel(&shape)];
        let mut offset = 0;
        for t in tensors {
            let len = t.dim(axis);
            let src = t.data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        Tensor::make(out, shape, Some(Op::Concat(tensors.to_vec(), axis)))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let (outer, full, inner) = split_at_axis(self.shape(), axis);
        assert!(start + len <= full, "narrow out of range");
        let src = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::make(out, shape, Some(Op::Narrow(self.clone(), axis, start)))
    }

    fn pad_narrow(&self, axis: usize, start: usize, full: usize) -> Tensor {
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let src = self.data();
        let mut shape = self.shape().to_vec();
        shape[axis] = full;
        let mut out = vec![0.0; numel(&shape)];
        for o in 0..outer {
            let d = (o * full + start) * inner;
            out[d..d + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
        }
        Tensor::make(out, shape, Some(Op::PadNarrow(self.clone(), axis, start)))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&self) -> Tensor {
        let nd = self.ndim();
        let cols = self.dim(nd - 1);
        let rows = self.numel() / cols;
        let mut shift = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &self.data()[r * cols..(r + 1) * cols];
            shift.push(row.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
        let mut kshape = self.shape().to_vec();
        kshape[nd - 1] = 1;
        let shifted = self.sub(&Tensor::from_vec(shift, &kshape));
        let lse = shifted.exp().sum_to(&kshape).ln();
        shifted.sub(&lse)
    }

    pub fn softmax(&self) -> Tensor {
        self.log_softmax().exp()
    }
}

fn conv_op(a: &Tensor, b: &Tensor, mode: ConvMode, g: ConvGeom) -> Tensor {
    let (data, shape) = match mode {
        ConvMode::Forward => (conv_forward(a.data(), b.data(), &g), vec![g.n, g.c_out, g.ho(), g.wo()]),
        ConvMode::InputGrad => (conv_input_grad(a.data(), b.data(), &g), vec![g.n, g.c_in, g.h, g.w]),
        ConvMode::WeightGrad => (conv_weight_grad(a.data(), b.data(), &g), vec![g.c_out, g.c_in, g.k, g.k]),
    };
    Tensor::make(data, shape, Some(Op::Conv(a.clone(), b.clone(), mode, g)))
}

impl ops::Add for &Tensor {
    type Output = Tensor;
    fn add(self, rhs: &Tensor) -> Tensor {
        Tensor::add(self, rhs)
    }
}

impl ops::Sub for &Tensor {
    type Output = Tensor;
    fn sub(self, rhs: &Tensor) -> Tensor {
        Tensor::sub(self, rhs)
    }
}

impl ops::Mul for &Tensor {
    type Output = Tensor;
    fn mul(self, rhs: &Tensor) -> Tensor {
        Tensor::mul(self, rhs)
    }
}

impl ops::Div for &Tensor {
    type Output = Tensor;
    fn div(self, rhs: &Tensor) -> Tensor {
        Tensor::div(self, rhs)
    }
}

impl ops::Neg for &Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        Tensor::neg(self)
    }
}

// ---------------------------------------------------------------------------
// reverse mode
// ---------------------------------------------------------------------------

/// Gradients of `output` (summed over its elements) with respect to each
/// tensor in `wrt`.
///
/// With `create_graph`, the returned gradients are themselves recorded in the
/// graph and can be differentiated again. Inputs that `output` does not
/// depend on get a zero gradient.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Vec<Tensor> {
    let targets: std::collections::HashSet<usize> = wrt.iter().map(|t| t.id()).collect();

    // Post-order DFS over differentiable nodes; `needed` marks nodes with a
    // path to some target.
    let mut order: Vec<Tensor> = Vec::new();
    let mut needed: HashMap<usize, bool> = HashMap::new();
    let mut stack: Vec<(Tensor, bool)> = Vec::new();
    if output.requires_grad() {
        stack.push((output.clone(), false));
    }
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            let mut need = targets.contains(&t.id());
            if let Some(op) = &t.0.op {
                for inp in op.inputs() {
                    if needed.get(&inp.id()).copied().unwrap_or(false) {
                        need = true;
                    }
                }
            }
            needed.insert(t.id(), need);
            order.push(t);
            continue;
        }
        if needed.contains_key(&t.id()) {
            continue;
        }
        // Placeholder so the node is not expanded twice; overwritten on completion.
        needed.insert(t.id(), false);
        stack.push((t.clone(), true));
        if let Some(op) = &t.0.op {
            for inp in op.inputs() {
                if inp.requires_grad() && !needed.contains_key(&inp.id()) {
                    stack.push((inp.clone(), false));
                }
            }
        }
    }

    let mut grads: HashMap<usize, Tensor> = HashMap::new();
    if needed.get(&output.id()).copied().unwrap_or(false) {
        grads.insert(output.id(), Tensor::ones(output.shape()));
    }
    let keep = |t: &Tensor| if create_graph { t.clone() } else { t.detach() };
    for node in order.iter().rev() {
        let Some(op) = &node.0.op else { continue };
        let Some(g) = grads.remove(&node.id()) else { continue };
        if targets.contains(&node.id()) {
            grads.insert(node.id(), g.clone());
        }
        let need = |t: &Tensor| needed.get(&t.id()).copied().unwrap_or(false);
        for (inp, gi) in backward(op, node, &g, &need, &keep) {
            let gi = if create_graph { gi } else { gi.detach() };
            match grads.remove(&inp) {
                Some(acc) => {
                    grads.insert(inp, acc.add(&gi));
                }
                None => {
                    grads.insert(inp, gi);
                }
            }
        }
    }

    wrt.iter()
        .map(|t| {
            grads
                .get(&t.id())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect()
}

fn backward(
    op: &Op,
    out: &Tensor,
    g: &Tensor,
    need: &dyn Fn(&Tensor) -> bool,
    keep: &dyn Fn(&Tensor) -> Tensor,
) -> Vec<(usize, Tensor)> {
    let mut res = Vec::new();
    let mut push = |t: &Tensor, gi: Tensor| {
        debug_assert_eq!(gi.shape(), t.shape(), "gradient shape");
        res.push((t.id(), gi));
    };
    match op {
        Op::Add(a, b) => {
            if need(a) {
                push(a, g.sum_to(a.shape()));
            }
            if need(b) {
                push(b, g.sum_to(b.shape()));
            }
        }
        Op::Sub(a, b) => {
            if need(a) {
                push(a, g.sum_to(a.shape()));
            }
            if need(b) {
                push(b, g.neg().sum_to(b.shape()));
            }
        }
        Op::Mul(a, b) => {
            if need(a) {
                push(a, g.mul(&keep(b)).sum_to(a.shape()));
            }
            if need(b) {
                push(b, g.mul(&keep(a)).sum_to(b.shape()));
            }
        }
        Op::Div(a, b) => {
            let bk = keep(b);
            if need(a) {
                push(a, g.div(&bk).sum_to(a.shape()));
            }
            if need(b) {
                // d(a/b)/db = -(a/b)/b
                push(b, g.mul(&keep(out)).div(&bk).neg().sum_to(b.shape()));
            }
        }
        Op::Neg(a) => push(a, g.neg()),
        Op::AddScalar(a) => push(a, g.clone()),
        Op::MulScalar(a, s) => push(a, g.mul_scalar(*s)),
        Op::Powf(a, p) => {
            let d = keep(a).powf(p - 1.0).mul_scalar(*p);
            push(a, g.mul(&d));
        }
        Op::Exp(a) => push(a, g.mul(&keep(out))),
        Op::Log(a) => push(a, g.div(&keep(a))),
        Op::Tanh(a) => {
            let y = keep(out);
            let d = y.square().neg().add_scalar(1.0);
            push(a, g.mul(&d));
        }
        Op::Sigmoid(a) => {
            let y = keep(out);
            let d = y.mul(&y.neg().add_scalar(1.0));
            push(a, g.mul(&d));
        }
        Op::MaskMul(a, m) => push(a, g.mask_mul(Rc::clone(m))),
        Op::Matmul(a, b) => {
            if need(a) {
                push(a, g.matmul(&keep(b).t()));
            }
            if need(b) {
                push(b, keep(a).t().matmul(g));
            }
        }
        Op::Transpose(a) => push(a, g.t()),
        Op::Conv(a, b, mode, geom) => match mode {
            ConvMode::Forward => {
                if need(a) {
                    push(a, conv_op(g, &keep(b), ConvMode::InputGrad, *geom));
                }
                if need(b) {
                    push(b, conv_op(&keep(a), g, ConvMode::WeightGrad, *geom));
                }
            }
            ConvMode::InputGrad => {
                if need(a) {
                    push(a, conv_op(g, &keep(b), ConvMode::Forward, *geom));
                }
                if need(b) {
                    push(b, conv_op(g, &keep(a), ConvMode::WeightGrad, *geom));
                }
            }
            ConvMode::WeightGrad => {
                if need(a) {
                    push(a, conv_op(&keep(b), g, ConvMode::InputGrad, *geom));
                }
                if need(b) {
                    push(b, conv_op(&keep(a), g, ConvMode::Forward, *geom));
                }
            }
        },
        Op::Upsample2x(a) => push(a, g.sum_pool2x()),
        Op::SumPool2x(a) => push(a, g.upsample2x()),
        Op::Reshape(a) => push(a, g.reshape(a.shape())),
        Op::BroadcastTo(a) => push(a, g.sum_to(a.shape())),
        Op::SumTo(a) => push(a, g.broadcast_to(a.shape())),
        Op::Concat(ts, axis) => {
            let mut offset = 0;
            for t in ts {
                let len = t.dim(*axis);
                if need(t) {
                    push(t, g.narrow(*axis, offset, len));
                }
                offset += len;
            }
        }
        Op::Narrow(a, axis, start) => push(a, g.pad_narrow(*axis, *start, a.dim(*axis))),
        Op::PadNarrow(a, axis, start) => push(a, g.narrow(*axis, *start, a.dim(*axis))),
    }
    res
}
