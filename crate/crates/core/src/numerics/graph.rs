//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation eagerly: values are computed as
//! nodes are pushed, and [`Graph::backward`] sweeps the tape in reverse
//! from a scalar loss. Only nodes that (transitively) depend on a leaf
//! created with `requires_grad = true` take part in the sweep, so frozen
//! networks pass gradients through to their inputs without accumulating
//! any for their own weights.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::{s, Array2, Axis};

use super::metrics::ssim_with_grad;
use super::Real;
use crate::error::{contract_err, dim_err, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    SumCols(Var),
    SumAll(Var),
    MeanAll(Var),
    RowNorm(Var),
    RowNormalize(Var),
    RowCosine(Var, Var),
    Ssim(Var, Var, usize, usize),
}

struct Node<T> {
    value: Array2<T>,
    op: Op,
    requires_grad: bool,
}

/// Norm floor used by the row-wise norm/normalize/cosine nodes.
const NORM_EPS: f64 = 1e-12;

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`]; `None` for nodes outside the sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape<T>(a: &Array2<T>, b: &Array2<T>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return dim_err(format!("{what}: {:?} vs {:?}", a.dim(), b.dim()));
    }
    Ok(())
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of which side of zero every input of a non-smooth node
    /// (leaky-ReLU, ReLU, abs) lies on. Two evaluations with equal patterns
    /// sit on the same smooth piece of the computation.
    pub fn kink_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if let Op::LeakyRelu(a, _) | Op::Relu(a) | Op::Abs(a) = node.op {
                for &v in self.nodes[a.0].value.iter() {
                    (v > T::zero()).hash(&mut h);
                }
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Array2<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf holding a parameter; `trainable` decides whether it collects a gradient.
    pub fn param(&mut self, value: Array2<T>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return dim_err(format!("matmul {:?} x {:?}", av.dim(), bv.dim()));
        }
        let out = av.dot(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x + bias` with `bias` of shape `1 x cols` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.nrows() != 1 || bv.ncols() != xv.ncols() {
            return dim_err(format!("bias {:?} for input {:?}", bv.dim(), xv.dim()));
        }
        let out = xv + bv;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let out = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) * T::of(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) + T::of(s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let sl = T::of(slope);
        let out = self.value(a).mapv(|x| if x > T::zero() { x } else { x * sl });
        let rg = self.rg(a);
        self.push(out, Op::LeakyRelu(a, slope), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.tanh());
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.exp());
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.abs());
        let rg = self.rg(a);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return contract_err("concat of zero tensors");
        }
        let rows = self.value(parts[0]).nrows();
        if parts.iter().any(|&p| self.value(p).nrows() != rows) {
            return dim_err("concat_cols row counts differ");
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("checked shapes");
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return contract_err("concat of zero tensors");
        }
        let cols = self.value(parts[0]).ncols();
        if parts.iter().any(|&p| self.value(p).ncols() != cols) {
            return dim_err("concat_rows column counts differ");
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("checked shapes");
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.ncols() || len == 0 {
            return dim_err(format!("slice {start}+{len} of {} columns", av.ncols()));
        }
        let out = av.slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    /// Row `i` of the output is row `idx[i]` of `a`. Repeats are allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.nrows()) {
            return dim_err(format!("row index {bad} out of {}", av.nrows()));
        }
        if idx.is_empty() {
            return contract_err("gather of zero rows");
        }
        let out = av.select(Axis(0), idx);
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Row-major reshape preserving element order.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let av = self.value(a);
        if rows * cols != av.len() {
            return dim_err(format!("reshape {:?} to ({rows}, {cols})", av.dim()));
        }
        let flat: Vec<T> = av.iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).expect("checked length");
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Per-row sum, shape `rows x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Array2::from_elem((1, 1), av.sum() / T::of(av.len() as f64));
        let rg = self.rg(a);
        self.push(out, Op::MeanAll(a), rg)
    }

    /// Per-row Euclidean norm, shape `rows x 1`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(out, Op::RowNorm(a), rg)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let eps = T::of(NORM_EPS);
        for mut r in out.rows_mut() {
            let n = r.dot(&r).sqrt().max(eps);
            r.mapv_inplace(|x| x / n);
        }
        let rg = self.rg(a);
        self.push(out, Op::RowNormalize(a), rg)
    }

    /// Row-wise cosine similarity, shape `rows x 1`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "row_cosine")?;
        let (av, bv) = (self.value(a), self.value(b));
        let eps = T::of(NORM_EPS);
        let out = Array2::from_shape_fn((av.nrows(), 1), |(i, _)| {
            let (ra, rb) = (av.row(i), bv.row(i));
            let na = ra.dot(&ra).sqrt().max(eps);
            let nb = rb.dot(&rb).sqrt().max(eps);
            ra.dot(&rb) / (na * nb)
        });
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::RowCosine(a, b), rg))
    }

    /// Per-row SSIM between flattened `h x w` images, shape `rows x 1`.
    pub fn ssim(&mut self, a: Var, b: Var, h: usize, w: usize) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "ssim")?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != h * w {
            return dim_err(format!("ssim expects {h}x{w} rows, got {}", av.ncols()));
        }
        let mut out = Array2::zeros((av.nrows(), 1));
        for i in 0..av.nrows() {
            let x = av.row(i);
            let y = bv.row(i);
            let (v, _) = ssim_with_grad(x.as_slice().unwrap(), y.as_slice().unwrap(), h, w, false)?;
            out[[i, 0]] = v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Ssim(a, b, h, w), rg))
    }

    /// Reverse sweep from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).dim() != (1, 1) {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).dim()
            ));
        }
        let mut grads: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let acc = |grads: &mut [Option<Array2<T>>], v: Var, d: Array2<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        let want = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(*a) {
                    acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if want(*b) {
                    acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::AddBias(x, b) => {
                if want(*x) {
                    acc(grads, *x, g.clone());
                }
                if want(*b) {
                    acc(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    acc(grads, *a, g.clone());
                }
                if want(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    acc(grads, *a, g.clone());
                }
                if want(*b) {
                    acc(grads, *b, g.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    acc(grads, *a, g * self.value(*b));
                }
                if want(*b) {
                    acc(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, s) => acc(grads, *a, g * T::of(*s)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::LeakyRelu(a, slope) => {
                let sl = T::of(*slope);
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= T::zero() {
                            *d *= sl;
                        }
                    });
                acc(grads, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(out)
                    .for_each(|d, &y| *d *= T::one() - y * y);
                acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(out)
                    .for_each(|d, &y| *d *= y * (T::one() - y));
                acc(grads, *a, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= T::zero() {
                            *d = T::zero();
                        }
                    });
                acc(grads, *a, d);
            }
            Op::Exp(a) => acc(grads, *a, g * out),
            Op::Abs(a) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x == T::zero() {
                            *d = T::zero();
                        } else if x < T::zero() {
                            *d = -*d;
                        }
                    });
                acc(grads, *a, d);
            }
            Op::Square(a) => acc(grads, *a, g * self.value(*a) * T::of(2.0)),
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if want(*p) {
                        acc(grads, *p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    if want(*p) {
                        acc(grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut d = Array2::zeros(av.dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(grads, *a, d);
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let mut d = Array2::zeros(av.dim());
                for (row, &src) in idx.iter().enumerate() {
                    let mut target = d.row_mut(src);
                    target += &g.row(row);
                }
                acc(grads, *a, d);
            }
            Op::Reshape(a) => {
                let dim = self.value(*a).dim();
                let flat: Vec<T> = g.iter().copied().collect();
                acc(grads, *a, Array2::from_shape_vec(dim, flat).expect("same length"));
            }
            Op::SumCols(a) => {
                let av = self.value(*a);
                let d = Array2::from_shape_fn(av.dim(), |(i, _)| g[[i, 0]]);
                acc(grads, *a, d);
            }
            Op::SumAll(a) => {
                let d = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                acc(grads, *a, d);
            }
            Op::MeanAll(a) => {
                let av = self.value(*a);
                let d = Array2::from_elem(av.dim(), g[[0, 0]] / T::of(av.len() as f64));
                acc(grads, *a, d);
            }
            Op::RowNorm(a) => {
                let av = self.value(*a);
                let eps = T::of(NORM_EPS);
                let d = Array2::from_shape_fn(av.dim(), |(i, j)| {
                    g[[i, 0]] * av[[i, j]] / out[[i, 0]].max(eps)
                });
                acc(grads, *a, d);
            }
            Op::RowNormalize(a) => {
                let av = self.value(*a);
                let eps = T::of(NORM_EPS);
                let mut d = Array2::zeros(av.dim());
                for i in 0..av.nrows() {
                    let ra = av.row(i);
                    let n = ra.dot(&ra).sqrt().max(eps);
                    let y = out.row(i);
                    let gy = g.row(i);
                    let proj = y.dot(&gy);
                    let mut dr = d.row_mut(i);
                    dr.assign(&((&gy - &(&y * proj)) / n));
                }
                acc(grads, *a, d);
            }
            Op::RowCosine(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let eps = T::of(NORM_EPS);
                let mut da = Array2::zeros(av.dim());
                let mut db = Array2::zeros(bv.dim());
                for i in 0..av.nrows() {
                    let (ra, rb) = (av.row(i), bv.row(i));
                    let na = ra.dot(&ra).sqrt().max(eps);
                    let nb = rb.dot(&rb).sqrt().max(eps);
                    let c = out[[i, 0]];
                    let gi = g[[i, 0]];
                    da.row_mut(i)
                        .assign(&((&rb / (na * nb) - &(&ra * (c / (na * na)))) * gi));
                    db.row_mut(i)
                        .assign(&((&ra / (na * nb) - &(&rb * (c / (nb * nb)))) * gi));
                }
                if want(*a) {
                    acc(grads, *a, da);
                }
                if want(*b) {
                    acc(grads, *b, db);
                }
            }
            Op::Ssim(a, b, h, w) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Array2::zeros(av.dim());
                let mut db = Array2::zeros(bv.dim());
                for i in 0..av.nrows() {
                    let x = av.row(i);
                    let y = bv.row(i);
                    let (_, grads_xy) =
                        ssim_with_grad(x.as_slice().unwrap(), y.as_slice().unwrap(), *h, *w, true)
                            .expect("shapes validated at construction");
                    let (gx, gy) = grads_xy.expect("requested");
                    let gi = g[[i, 0]];
                    for j in 0..av.ncols() {
                        da[[i, j]] = gx[j] * gi;
                        db[[i, j]] = gy[j] * gi;
                    }
                }
                if want(*a) {
                    acc(grads, *a, da);
                }
                if want(*b) {
                    acc(grads, *b, db);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::<f64>::new();
        let v = g.param(array![[3.0]], true);
        let sq = g.square(v);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(v).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn linear_map_gradient_is_broadcast_input() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(array![[1.0, 2.0, 3.0]]);
        let w = g.param(Array2::from_elem((3, 2), 0.5), true);
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let v = g.param(array![[1.0, 2.0]], true);
        assert!(matches!(g.backward(v), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn frozen_leaf_gets_no_gradient_but_passes_through() {
        let mut g = Graph::<f64>::new();
        let x = g.param(array![[1.0, -2.0]], true);
        let w = g.param(array![[2.0], [1.0]], false);
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap(), &array![[2.0, 1.0]]);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Array2::zeros((2, 3)));
        let b = g.constant(Array2::zeros((2, 3)));
        assert!(g.matmul(a, b).is_err());
        let c = g.constant(Array2::zeros((3, 2)));
        assert!(g.add(a, c).is_err());
        assert!(g.slice_cols(a, 2, 2).is_err());
        assert!(g.gather_rows(a, &[5]).is_err());
        assert!(g.reshape(a, 4, 2).is_err());
    }
}
