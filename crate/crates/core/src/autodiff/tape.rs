//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward sweep simply walks it in reverse.
//! Shape errors in graph construction are programming errors and panic;
//! callers validate user-facing shapes before building a graph.

use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 'same'-padded 2-D convolution over `batch` stacked grids.
/// Rows of the input are ordered `(b, y, x)` with `x` fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn cells(&self) -> usize {
        self.batch * self.height * self.width
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    PowConst(Var, f64),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Relu(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Conv2d(Var, Var, ConvGeom),
    Sum(Var),
    Mean(Var),
    Gather(Var, Arc<Vec<Option<usize>>>),
    /// Externally evaluated function with precomputed partials, one per input.
    Map(Vec<Var>, Vec<Tensor>),
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn same_or_scalar(a: &Tensor, b: &Tensor, what: &str) {
    assert!(
        a.shape() == b.shape() || a.is_scalar() || b.is_scalar(),
        "{what}: incompatible shapes {:?} and {:?}",
        a.shape(),
        b.shape()
    );
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        Tensor {
            rows: a.rows,
            cols: a.cols,
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    } else if b.is_scalar() {
        let y = b.data[0];
        a.map(|x| f(x, y))
    } else {
        let x = a.data[0];
        b.map(|y| f(x, y))
    }
}

/// Adds `g` (shaped like the output) into the adjoint of an operand of shape
/// `shape`, summing when the operand was a broadcast scalar.
fn reduce_to(g: Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        g
    } else {
        debug_assert_eq!(shape, (1, 1));
        Tensor::scalar(g.sum())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.push_arc(op, Arc::new(value), needs_grad)
    }

    fn push_arc(&mut self, op: Op, value: Arc<Tensor>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Trainable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Fixed input; shared storage avoids copying large design matrices.
    pub fn constant(&mut self, t: impl Into<Arc<Tensor>>) -> Var {
        self.push_arc(Op::Const, t.into(), false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        same_or_scalar(x, y, "add");
        let v = zip_broadcast(x, y, |p, q| p + q);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), v, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        same_or_scalar(x, y, "sub");
        let v = zip_broadcast(x, y, |p, q| p - q);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), v, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        same_or_scalar(x, y, "mul");
        let v = zip_broadcast(x, y, |p, q| p * q);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), v, ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        same_or_scalar(x, y, "div");
        let v = zip_broadcast(x, y, |p, q| p / q);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Div(a, b), v, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        let ng = self.ng(a);
        self.push(Op::Neg(a), v, ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| k * x);
        let ng = self.ng(a);
        self.push(Op::Scale(a, k), v, ng)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(Op::Offset(a), v, ng)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        let ng = self.ng(a);
        self.push(Op::PowConst(a, p), v, ng)
    }

    /// `exp`, floored at the smallest positive normal so results stay positive.
    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp().max(f64::MIN_POSITIVE));
        let ng = self.ng(a);
        self.push(Op::Exp(a), v, ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(Op::Log(a), v, ng)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        let ng = self.ng(a);
        self.push(Op::Recip(a), v, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.ng(a);
        self.push(Op::Relu(a), v, ng)
    }

    /// Logistic function, kept strictly inside (0, 1).
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(logistic);
        let ng = self.ng(a);
        self.push(Op::Sigmoid(a), v, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), v, ng)
    }

    /// Adds the `1 × c` row `b` to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!((1, xv.cols), bv.shape(), "row bias shape");
        let mut v = xv.clone();
        for r in 0..v.rows {
            for (o, &bb) in v.data[r * v.cols..(r + 1) * v.cols].iter_mut().zip(&bv.data) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(Op::AddRowBias(x, b), v, ng)
    }

    /// 'Same' zero-padded convolution. `filter` is `(kh·kw·c_in) × c_out`
    /// with row index `(dy·kw + dx)·c_in + c`.
    pub fn conv2d(&mut self, input: Var, filter: Var, geom: ConvGeom) -> Var {
        let x = self.value(input);
        let f = self.value(filter);
        assert_eq!(x.rows, geom.cells(), "conv input rows");
        assert_eq!(f.rows, geom.kh * geom.kw * x.cols, "conv filter rows");
        let cols = im2col(x, &geom);
        let v = cols.matmul(f);
        let ng = self.ng(input) || self.ng(filter);
        self.push(Op::Conv2d(input, filter, geom), v, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(Op::Sum(a), v, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let ng = self.ng(a);
        self.push(Op::Mean(a), v, ng)
    }

    /// Row gather; `None` entries produce zero rows.
    pub fn gather(&mut self, a: Var, idx: Arc<Vec<Option<usize>>>) -> Var {
        let v = self.value(a).gather_rows(&idx);
        let ng = self.ng(a);
        self.push(Op::Gather(a, idx), v, ng)
    }

    /// Records a function evaluated outside the tape. `partials[j]` is shaped
    /// like input `j` when the output is a scalar, and like the output when
    /// the map is elementwise (an input may then be a broadcast scalar).
    pub fn map(&mut self, inputs: &[Var], value: Tensor, partials: Vec<Tensor>) -> Var {
        assert_eq!(inputs.len(), partials.len(), "one partial per input");
        for (v, p) in inputs.iter().zip(&partials) {
            let s = self.value(*v).shape();
            assert!(
                p.shape() == s || p.shape() == value.shape(),
                "map partial shape {:?} fits neither input {:?} nor output {:?}",
                p.shape(),
                s,
                value.shape()
            );
        }
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(Op::Map(inputs.to_vec(), partials), value, ng)
    }

    /// Back-propagates from the scalar `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if !self.value(out).is_scalar() {
            let (r, c) = self.value(out).shape();
            return Err(Error::Shape(format!("backward needs a scalar output, got {r}x{c}")));
        }
        let n = out.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes[..n].iter().map(|nd| nd.value.shape()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data.iter_mut().zip(&g.data) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let shape = |v: Var| self.value(v).shape();
        match op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, reduce_to(g.clone(), shape(*a)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, reduce_to(g.clone(), shape(*b)));
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, reduce_to(g.clone(), shape(*a)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, reduce_to(g.map(|x| -x), shape(*b)));
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.accumulate(grads, *a, reduce_to(zip_broadcast(g, y, |p, q| p * q), x.shape()));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, reduce_to(zip_broadcast(g, x, |p, q| p * q), y.shape()));
                }
            }
            Op::Div(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.accumulate(grads, *a, reduce_to(zip_broadcast(g, y, |p, q| p / q), x.shape()));
                }
                if self.ng(*b) {
                    // d(x/y)/dy = −out/y
                    let t = zip_broadcast(g, out, |p, o| -p * o);
                    self.accumulate(grads, *b, reduce_to(zip_broadcast(&t, y, |p, q| p / q), y.shape()));
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|x| -x)),
            Op::Scale(a, k) => self.accumulate(grads, *a, g.map(|x| k * x)),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::PowConst(a, p) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, zip_broadcast(g, x, |gg, xx| gg * p * xx.powf(p - 1.0)));
            }
            Op::Exp(a) => self.accumulate(grads, *a, zip_broadcast(g, out, |p, o| p * o)),
            Op::Log(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, zip_broadcast(g, x, |p, q| p / q));
            }
            Op::Recip(a) => self.accumulate(grads, *a, zip_broadcast(g, out, |p, o| -p * o * o)),
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, zip_broadcast(g, x, |p, q| if q > 0.0 { p } else { 0.0 }));
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, zip_broadcast(g, out, |p, o| p * o * (1.0 - o))),
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(x.rows, x.cols);
                    gemm(g, false, y, true, &mut ga, 0.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(y.rows, y.cols);
                    gemm(x, true, g, false, &mut gb, 0.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRowBias(x, b) => {
                if self.ng(*x) {
                    self.accumulate(grads, *x, g.clone());
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (acc, v) in gb.data.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Conv2d(input, filter, geom) => {
                let x = self.value(*input);
                let f = self.value(*filter);
                if self.ng(*filter) {
                    let cols = im2col(x, geom);
                    let mut gf = Tensor::zeros(f.rows, f.cols);
                    gemm(&cols, true, g, false, &mut gf, 0.0);
                    self.accumulate(grads, *filter, gf);
                }
                if self.ng(*input) {
                    let mut gcols = Tensor::zeros(x.rows, f.rows);
                    gemm(g, false, f, true, &mut gcols, 0.0);
                    self.accumulate(grads, *input, col2im(&gcols, x.cols, geom));
                }
            }
            Op::Sum(a) => {
                let (r, c) = shape(*a);
                self.accumulate(grads, *a, Tensor::filled(r, c, g.data[0]));
            }
            Op::Mean(a) => {
                let (r, c) = shape(*a);
                self.accumulate(grads, *a, Tensor::filled(r, c, g.data[0] / (r * c) as f64));
            }
            Op::Gather(a, idx) => {
                let (r, c) = shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for (o, i) in idx.iter().enumerate() {
                    if let Some(i) = *i {
                        for (acc, v) in ga.data[i * c..(i + 1) * c].iter_mut().zip(g.row(o)) {
                            *acc += v;
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Map(inputs, partials) => {
                for (v, p) in inputs.iter().zip(partials) {
                    if !self.ng(*v) {
                        continue;
                    }
                    let s = shape(*v);
                    let contrib = if out.is_scalar() {
                        let k = g.data[0];
                        p.map(|x| k * x)
                    } else {
                        reduce_to(zip_broadcast(g, p, |a, b| a * b), s)
                    };
                    self.accumulate(grads, *v, contrib);
                }
            }
        }
    }
}

/// Logistic function clamped to `[1e−12, 1 − 1e−12]`.
pub fn logistic(x: f64) -> f64 {
    let v = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    v.clamp(1e-12, 1.0 - 1e-12)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn im2col(x: &Tensor, g: &ConvGeom) -> Tensor {
    let cin = x.cols;
    let k = g.kh * g.kw * cin;
    let mut cols = Tensor::zeros(x.rows, k);
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let (h, w) = (g.height as isize, g.width as isize);
    for b in 0..g.batch {
        let base = b * g.height * g.width;
        for y in 0..h {
            for xx in 0..w {
                let r = base + (y * w + xx) as usize;
                let dst = &mut cols.data[r * k..(r + 1) * k];
                for dy in 0..g.kh as isize {
                    let sy = y + dy - ph;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for dx in 0..g.kw as isize {
                        let sx = xx + dx - pw;
                        if sx < 0 || sx >= w {
                            continue;
                        }
                        let src = base + (sy * w + sx) as usize;
                        let off = ((dy * g.kw as isize + dx) as usize) * cin;
                        dst[off..off + cin].copy_from_slice(x.row(src));
                    }
                }
            }
        }
    }
    cols
}

fn col2im(gcols: &Tensor, cin: usize, g: &ConvGeom) -> Tensor {
    let k = gcols.cols;
    let mut gx = Tensor::zeros(gcols.rows, cin);
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let (h, w) = (g.height as isize, g.width as isize);
    for b in 0..g.batch {
        let base = b * g.height * g.width;
        for y in 0..h {
            for xx in 0..w {
                let r = base + (y * w + xx) as usize;
                let src = &gcols.data[r * k..(r + 1) * k];
                for dy in 0..g.kh as isize {
                    let sy = y + dy - ph;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for dx in 0..g.kw as isize {
                        let sx = xx + dx - pw;
                        if sx < 0 || sx >= w {
                            continue;
                        }
                        let dst = base + (sy * w + sx) as usize;
                        let off = ((dy * g.kw as isize + dx) as usize) * cin;
                        for c in 0..cin {
                            gx.data[dst * cin + c] += src[off + c];
                        }
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
        let mut g = Tensor::zeros(x.rows, x.cols);
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data[i] += h;
            let mut m = x.clone();
            m.data[i] -= h;
            g.data[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn square_and_log_exp() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x);
        assert_eq!(t.backward(y).unwrap().wrt(x).item(), 6.0);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(-0.7));
        let e = t.exp(x);
        let y = t.ln(e);
        assert!((t.backward(y).unwrap().wrt(x).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(2, 1));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn dense_layer_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rnd = |r, c| Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let x = rnd(5, 3);
        let w = rnd(3, 4);
        let b = rnd(1, 4);
        let build = |w: &Tensor, b: &Tensor| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.leaf(w.clone());
            let bv = t.leaf(b.clone());
            let z = t.matmul(xv, wv);
            let z = t.add_row_bias(z, bv);
            let a = t.sigmoid(z);
            let a = t.powf(a, 3.0);
            let s = t.sum(a);
            (t, wv, bv, s)
        };
        let (t, wv, bv, s) = build(&w, &b);
        let g = t.backward(s).unwrap();
        let fw = fd_grad(&|w| { let (t, _, _, s) = build(w, &b); t.value(s).item() }, &w, 1e-6);
        let fb = fd_grad(&|b| { let (t, _, _, s) = build(&w, b); t.value(s).item() }, &b, 1e-6);
        for (a, e) in g.wrt(wv).data.iter().zip(&fw.data) {
            assert!((a - e).abs() < 1e-8);
        }
        for (a, e) in g.wrt(bv).data.iter().zip(&fb.data) {
            assert!((a - e).abs() < 1e-8);
        }
    }

    #[test]
    fn conv_delta_filter_is_identity() {
        let geom = ConvGeom { batch: 2, height: 4, width: 5, kh: 3, kw: 3 };
        let x = Tensor::new(40, 2, (0..80).map(|i| i as f64 * 0.1).collect()).unwrap();
        let mut f = Tensor::zeros(18, 2);
        // centre tap (dy=1, dx=1) → offset 4·c_in
        f.set(8, 0, 1.0);
        f.set(9, 1, 1.0);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let fv = t.leaf(f);
        let y = t.conv2d(xv, fv, geom);
        assert_eq!(t.value(y), &x);
    }

    #[test]
    fn conv_ones_filter_sums_neighbourhood() {
        let geom = ConvGeom { batch: 1, height: 5, width: 5, kh: 3, kw: 3 };
        let ramp: Vec<f64> = (0..25).map(|i| (i / 5 + i % 5) as f64).collect();
        let x = Tensor::column(ramp.clone());
        let mut t = Tape::new();
        let xv = t.constant(x);
        let fv = t.leaf(Tensor::filled(9, 1, 1.0));
        let y = t.conv2d(xv, fv, geom);
        for r in 0..5i32 {
            for c in 0..5i32 {
                let mut s = 0.0;
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (rr, cc) = (r + dr, c + dc);
                        if (0..5).contains(&rr) && (0..5).contains(&cc) {
                            s += ramp[(rr * 5 + cc) as usize];
                        }
                    }
                }
                assert_eq!(t.value(y).get((r * 5 + c) as usize, 0), s);
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let geom = ConvGeom { batch: 2, height: 3, width: 4, kh: 3, kw: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rnd = |r, c| Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let x = rnd(24, 2);
        let f = rnd(6, 3);
        let wout = rnd(24, 3);
        let build = |x: &Tensor, f: &Tensor| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let fv = t.leaf(f.clone());
            let y = t.conv2d(xv, fv, geom);
            let wv = t.constant(wout.clone());
            let z = t.mul(y, wv);
            let s = t.sum(z);
            (t, xv, fv, s)
        };
        let (t, xv, fv, s) = build(&x, &f);
        let g = t.backward(s).unwrap();
        let fx = fd_grad(&|x| { let (t, _, _, s) = build(x, &f); t.value(s).item() }, &x, 1e-6);
        let ff = fd_grad(&|f| { let (t, _, _, s) = build(&x, f); t.value(s).item() }, &f, 1e-6);
        for (a, e) in g.wrt(xv).data.iter().zip(&fx.data) {
            assert!((a - e).abs() < 1e-8);
        }
        for (a, e) in g.wrt(fv).data.iter().zip(&ff.data) {
            assert!((a - e).abs() < 1e-8);
        }
    }

    #[test]
    fn gather_and_map() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::column(vec![1.0, 2.0, 3.0]));
        let g = t.gather(x, Arc::new(vec![Some(2), None, Some(2), Some(0)]));
        let k = t.leaf(Tensor::scalar(0.5));
        // elementwise map: out = k·g², partials wrt g and broadcast k
        let gv = t.value(g).clone();
        let kv = t.value(k).item();
        let val = gv.map(|v| kv * v * v);
        let pg = gv.map(|v| 2.0 * kv * v);
        let pk = gv.map(|v| v * v);
        let m = t.map(&[g, k], val, vec![pg, pk]);
        let s = t.sum(m);
        let gr = t.backward(s).unwrap();
        assert_eq!(gr.wrt(x).data, vec![1.0, 0.0, 6.0]);
        assert_eq!(gr.wrt(k).item(), 9.0 + 9.0 + 1.0);
    }

    #[derive(Debug, Clone)]
    enum Step {
        Add(usize, usize),
        Sub(usize, usize),
        Mul(usize, usize),
        Div(usize, usize),
        Exp(usize),
        Log(usize),
        Recip(usize),
        Sigmoid(usize),
        Scale(usize, f64),
        Pow(usize),
    }

    fn step_strategy() -> impl Strategy<Value = Step> {
        prop_oneof![
            (0usize..64, 0usize..64).prop_map(|(a, b)| Step::Add(a, b)),
            (0usize..64, 0usize..64).prop_map(|(a, b)| Step::Sub(a, b)),
            (0usize..64, 0usize..64).prop_map(|(a, b)| Step::Mul(a, b)),
            (0usize..64, 0usize..64).prop_map(|(a, b)| Step::Div(a, b)),
            (0usize..64).prop_map(Step::Exp),
            (0usize..64).prop_map(Step::Log),
            (0usize..64).prop_map(Step::Recip),
            (0usize..64).prop_map(Step::Sigmoid),
            (0usize..64, -2.0f64..2.0).prop_map(|(a, k)| Step::Scale(a, k)),
            (0usize..64).prop_map(Step::Pow),
        ]
    }

    /// Builds a random expression over three inputs. Values are squashed
    /// through sigmoids before log/div/recip so every node stays well
    /// conditioned.
    fn eval_graph(steps: &[Step], x: &[f64; 3]) -> (Tape, Vec<Var>, Var) {
        let mut t = Tape::new();
        let leaves: Vec<Var> = x.iter().map(|&v| t.leaf(Tensor::scalar(v))).collect();
        let mut vars = leaves.clone();
        let safe = |t: &mut Tape, v: Var| {
            let s = t.sigmoid(v);
            t.offset(s, 0.5)
        };
        for st in steps {
            let pick = |i: usize| vars[i % vars.len()];
            let nv = match *st {
                Step::Add(a, b) => t.add(pick(a), pick(b)),
                Step::Sub(a, b) => t.sub(pick(a), pick(b)),
                Step::Mul(a, b) => {
                    let (p, q) = (safe(&mut t, pick(a)), pick(b));
                    t.mul(p, q)
                }
                Step::Div(a, b) => {
                    let q = safe(&mut t, pick(b));
                    t.div(pick(a), q)
                }
                Step::Exp(a) => {
                    let s = t.sigmoid(pick(a));
                    t.exp(s)
                }
                Step::Log(a) => {
                    let s = safe(&mut t, pick(a));
                    t.ln(s)
                }
                Step::Recip(a) => {
                    let s = safe(&mut t, pick(a));
                    t.recip(s)
                }
                Step::Sigmoid(a) => t.sigmoid(pick(a)),
                Step::Scale(a, k) => t.scale(pick(a), k),
                Step::Pow(a) => {
                    let s = safe(&mut t, pick(a));
                    t.powf(s, 2.5)
                }
            };
            vars.push(nv);
        }
        let last = *vars.last().unwrap();
        let out = t.sum(last);
        (t, leaves, out)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn random_graphs_match_finite_differences(
            steps in prop::collection::vec(step_strategy(), 1..12),
            x in prop::array::uniform3(-1.5f64..1.5),
        ) {
            let (t, leaves, out) = eval_graph(&steps, &x);
            let g = t.backward(out).unwrap();
            for k in 0..3 {
                let h = 1e-6;
                let mut xp = x;
                xp[k] += h;
                let mut xm = x;
                xm[k] -= h;
                let (tp, _, op) = eval_graph(&steps, &xp);
                let (tm, _, om) = eval_graph(&steps, &xm);
                let fd = (tp.value(op).item() - tm.value(om).item()) / (2.0 * h);
                let an = g.wrt(leaves[k]).item();
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
                prop_assert!(rel < 1e-6, "analytic {} vs fd {}", an, fd);
            }
        }
    }
}
