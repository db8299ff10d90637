//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Nodes are appended in evaluation order; [`Tape::backward`] walks them in
//! reverse. Leaves created with [`Tape::constant`] never receive gradients and
//! anything computed only from constants is skipped during the backward pass.

use alloc::boxed::Box;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::losses::{huber, huber_grad};
use crate::math::{self, gemm, Mat};

pub type Var = usize;

/// Backward rule of an operation implemented outside the tape.
pub trait CustomOp {
    /// Gradients for each input given the output gradient. `None` means zero.
    fn backward(&self, grad: &Mat, inputs: &[&Mat], output: &Mat) -> Result<Vec<Option<Mat>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    Huber(Var, f64),
    Hcat(Vec<Var>),
    Vcat(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Var, Vec<usize>),
    Mean(Var),
    Sum(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Gradients of the leaves reached by [`Tape::backward`], indexed by variable.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(rows, cols))
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(a: &Mat, b: &Mat, what: &str) -> Result<()> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(shape_err!("{what}: {}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols));
    }
    Ok(())
}

fn zip(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    Mat {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect(),
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn req(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.nodes[v].requires_grad)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v].value.data[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let r = self.req(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), r))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let value = zip(self.value(a), self.value(b), |x, y| x + y);
        let r = self.req(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), r))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let value = zip(self.value(a), self.value(b), |x, y| x - y);
        let r = self.req(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), r))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let value = zip(self.value(a), self.value(b), |x, y| x * y);
        let r = self.req(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), r))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let r = self.req(&[a]);
        self.push(value, Op::Scale(a, s), r)
    }

    /// `a + 1·b` with `b` a single row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows != 1 || bv.cols != av.cols {
            return Err(shape_err!("add_row: {}x{} + {}x{}", av.rows, av.cols, bv.rows, bv.cols));
        }
        let mut value = av.clone();
        for r in 0..value.rows {
            value.row_mut(r).iter_mut().zip(&bv.data).for_each(|(x, y)| *x += y);
        }
        let r = self.req(&[a, b]);
        Ok(self.push(value, Op::AddRow(a, b), r))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let r = self.req(&[a]);
        self.push(value, op, r)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, math::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, math::sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, math::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Elementwise Huber penalty.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        self.unary(a, move |x| huber(x, delta), Op::Huber(a, delta))
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Mat::hcat(&mats)?;
        let r = self.req(parts);
        Ok(self.push(value, Op::Hcat(parts.to_vec()), r))
    }

    pub fn vcat(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.value(p).cols).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols != cols {
                return Err(shape_err!("vcat with unequal column counts"));
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        let r = self.req(parts);
        Ok(self.push(Mat { rows, cols, data }, Op::Vcat(parts.to_vec()), r))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let m = self.value(a);
        if start > end || end > m.cols {
            return Err(Error::Index { index: end, len: m.cols });
        }
        let value = m.cols_range(start, end);
        let r = self.req(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), r))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let m = self.value(a);
        if start > end || end > m.rows {
            return Err(Error::Index { index: end, len: m.rows });
        }
        let value = Mat {
            rows: end - start,
            cols: m.cols,
            data: m.data[start * m.cols..end * m.cols].to_vec(),
        };
        let r = self.req(&[a]);
        Ok(self.push(value, Op::SliceRows(a, start), r))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let m = self.value(a);
        let mut value = Mat::zeros(idx.len(), m.cols);
        for (o, &i) in idx.iter().enumerate() {
            if i >= m.rows {
                return Err(Error::Index { index: i, len: m.rows });
            }
            value.row_mut(o).copy_from_slice(m.row(i));
        }
        let r = self.req(&[a]);
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), r))
    }

    /// Copy of `base` with rows `idx` replaced by the rows of `src` (indices must be distinct).
    pub fn scatter_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let (b, s) = (self.value(base), self.value(src));
        if s.rows != idx.len() || s.cols != b.cols {
            return Err(shape_err!("scatter {}x{} into {}x{}", s.rows, s.cols, b.rows, b.cols));
        }
        let mut value = b.clone();
        for (o, &i) in idx.iter().enumerate() {
            if i >= b.rows {
                return Err(Error::Index { index: i, len: b.rows });
            }
            value.row_mut(i).copy_from_slice(s.row(o));
        }
        let r = self.req(&[base, src]);
        Ok(self.push(value, Op::ScatterRows(base, src, idx.to_vec()), r))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = m.data.iter().sum::<f64>() / m.len().max(1) as f64;
        let r = self.req(&[a]);
        self.push(Mat::from_fn(1, 1, |_, _| v), Op::Mean(a), r)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data.iter().sum::<f64>();
        let r = self.req(&[a]);
        self.push(Mat::from_fn(1, 1, |_, _| v), Op::Sum(a), r)
    }

    /// Weighted sum of scalar variables.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let s = self.scale(v, w);
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s)?,
            });
        }
        acc.ok_or_else(|| Error::Usage("weighted_sum of no terms".into()))
    }

    /// Record an externally computed `output = f(inputs)` with backward rule `op`.
    pub fn custom(&mut self, inputs: &[Var], output: Mat, op: Box<dyn CustomOp>) -> Var {
        let r = self.req(inputs);
        self.push(output, Op::Custom(inputs.to_vec(), op), r)
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Usage("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Mat::from_fn(1, 1, |_, _| 1.0));
        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backward_node(id, &g, &mut grads)?;
        }
        Ok(Grads { grads })
    }

    fn send(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if self.nodes[v].requires_grad {
            accumulate(&mut grads[v], g);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v].requires_grad
    }

    fn backward_node(&self, id: Var, g: &Mat, grads: &mut [Option<Mat>]) -> Result<()> {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows, av.cols, bv.cols);
                if self.wants(*a) {
                    let mut da = Mat::zeros(m, k);
                    gemm(m, n, k, (&g.data, n as isize, 1), (&bv.data, 1, n as isize), &mut da.data, 0.0);
                    self.send(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Mat::zeros(k, n);
                    gemm(k, m, n, (&av.data, 1, k as isize), (&g.data, n as isize, 1), &mut db.data, 0.0);
                    self.send(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                self.send(grads, *a, zip(g, self.value(*b), |x, y| x * y));
                self.send(grads, *b, zip(g, self.value(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => self.send(grads, *a, g.map(|x| x * s)),
            Op::AddRow(a, b) => {
                self.send(grads, *a, g.clone());
                if self.wants(*b) {
                    let mut db = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        db.data.iter_mut().zip(g.row(r)).for_each(|(x, y)| *x += y);
                    }
                    self.send(grads, *b, db);
                }
            }
            Op::Tanh(a) => self.send(grads, *a, zip(g, out, |x, y| x * (1.0 - y * y))),
            Op::Relu(a) => self.send(grads, *a, zip(g, self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Sigmoid(a) => self.send(grads, *a, zip(g, out, |x, y| x * y * (1.0 - y))),
            Op::Exp(a) => self.send(grads, *a, zip(g, out, |x, y| x * y)),
            Op::Abs(a) => self.send(
                grads,
                *a,
                zip(g, self.value(*a), |x, y| {
                    if y > 0.0 {
                        x
                    } else if y < 0.0 {
                        -x
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Huber(a, d) => self.send(grads, *a, zip(g, self.value(*a), |x, y| x * huber_grad(y, *d))),
            Op::Hcat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols;
                    if self.wants(p) {
                        self.send(grads, p, g.cols_range(off, off + w));
                    }
                    off += w;
                }
            }
            Op::Vcat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    if self.wants(p) {
                        let data = g.data[off * g.cols..(off + rows) * g.cols].to_vec();
                        self.send(grads, p, Mat { rows, cols: g.cols, data });
                    }
                    off += rows;
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut da = Mat::zeros(av.rows, av.cols);
                for r in 0..g.rows {
                    da.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                self.send(grads, *a, da);
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                if self.wants(*a) {
                    let mut da = Mat::zeros(av.rows, av.cols);
                    da.data[start * av.cols..(start + g.rows) * av.cols].copy_from_slice(&g.data);
                    self.send(grads, *a, da);
                }
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                if self.wants(*a) {
                    let mut da = Mat::zeros(av.rows, av.cols);
                    for (o, &i) in idx.iter().enumerate() {
                        da.row_mut(i).iter_mut().zip(g.row(o)).for_each(|(x, y)| *x += y);
                    }
                    self.send(grads, *a, da);
                }
            }
            Op::ScatterRows(base, src, idx) => {
                if self.wants(*base) {
                    let mut db = g.clone();
                    for &i in idx {
                        db.row_mut(i).iter_mut().for_each(|x| *x = 0.0);
                    }
                    self.send(grads, *base, db);
                }
                if self.wants(*src) {
                    let mut ds = Mat::zeros(idx.len(), g.cols);
                    for (o, &i) in idx.iter().enumerate() {
                        ds.row_mut(o).copy_from_slice(g.row(i));
                    }
                    self.send(grads, *src, ds);
                }
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let s = g.data[0] / av.len().max(1) as f64;
                self.send(grads, *a, av.map(|_| s));
            }
            Op::Sum(a) => {
                let s = g.data[0];
                self.send(grads, *a, self.value(*a).map(|_| s));
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Mat> = inputs.iter().map(|&i| self.value(i)).collect();
                let gs = op.backward(g, &vals, out)?;
                if gs.len() != inputs.len() {
                    return Err(Error::Usage("custom op returned wrong number of gradients".into()));
                }
                for (&i, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        same_shape(self.value(i), &gi, "custom op gradient")?;
                        self.send(grads, i, gi);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Builds a graph exercising every primitive and returns the scalar output.
    fn graph(t: &mut Tape, a: &Mat, b: &Mat, c: &Mat) -> (Var, Var, Var, Var) {
        let av = t.leaf(a.clone());
        let bv = t.leaf(b.clone());
        let cv = t.leaf(c.clone());
        let ab = t.matmul(av, bv).unwrap();
        let th = t.tanh(ab);
        let bias = t.slice_rows(cv, 0, 1).unwrap();
        let br = t.add_row(th, bias).unwrap();
        let sg = t.sigmoid(br);
        let rl = t.relu(br);
        let m = t.mul(sg, rl).unwrap();
        let ex = t.exp(m);
        let sc = t.scale(ex, 0.3);
        let sub = t.sub(sc, th).unwrap();
        let hc = t.hcat(&[sub, th]).unwrap();
        let left = t.slice_cols(hc, 1, 4).unwrap();
        let g = t.gather_rows(left, &[2, 0, 2]).unwrap();
        let s = t.scatter_rows(left, g, &[1, 3, 4]).unwrap();
        let v = t.vcat(&[s, left]).unwrap();
        let hu = t.huber(v, 0.2);
        let ab2 = t.abs(v);
        let m1 = t.mean(hu);
        let m2 = t.sum(ab2);
        let out = t.weighted_sum(&[(m1, 2.0), (m2, 0.1)]).unwrap();
        (out, av, bv, cv)
    }

    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(5, 4, &mut rng);
        let b = rand_mat(4, 3, &mut rng);
        let c = rand_mat(2, 3, &mut rng);
        let mut t = Tape::new();
        let (out, av, bv, cv) = graph(&mut t, &a, &b, &c);
        let grads = t.backward(out).unwrap();
        let eval = |a: &Mat, b: &Mat, c: &Mat| {
            let mut t = Tape::new();
            let (o, ..) = graph(&mut t, a, b, c);
            t.scalar(o)
        };
        let h = 1e-6;
        for (which, var) in [(0, av), (1, bv), (2, cv)] {
            let analytic = grads.get_or_zeros(var, [a.rows, b.rows, c.rows][which], [a.cols, b.cols, c.cols][which]);
            for j in 0..analytic.len() {
                let mut ms = [a.clone(), b.clone(), c.clone()];
                ms[which].data[j] += h;
                let p = eval(&ms[0], &ms[1], &ms[2]);
                ms[which].data[j] -= 2.0 * h;
                let m = eval(&ms[0], &ms[1], &ms[2]);
                let fd = (p - m) / (2.0 * h);
                assert!((fd - analytic.data[j]).abs() < 1e-6, "input {which}[{j}]: {fd} vs {}", analytic.data[j]);
            }
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Mat::zeros(2, 2));
        let b = t.leaf(Mat::zeros(2, 2));
        let s = t.add(a, b).unwrap();
        let m = t.mean(s);
        let g = t.backward(m).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data, vec![0.25; 4]);
        assert!(t.backward(s).is_err());
    }
}
