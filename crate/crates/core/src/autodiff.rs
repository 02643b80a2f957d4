//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! constants (frozen weights, data) or named parameters; [`Tape::backward`]
//! walks the tape in reverse and returns gradients keyed by parameter name.
//! Only the handful of operations this crate needs are supported.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::{gelu, gelu_grad, Mat};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a + 1·b` with `b` a single row.
    AddRow(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    MulConst(Var, Mat),
    Gelu(Var),
    /// Row softmax; entries with `allowed[i * cols + j] == false` are exactly zero.
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Mat,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SumSquares(Var),
    /// Mean over rows of `-log softmax(row)[target]`.
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, String)>,
}

/// Gradients of a scalar with respect to named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Mat>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.map.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Mat> {
        self.map
            .get(name)
            .ok_or_else(|| Error::MissingGradient(format!("no gradient reached `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.map.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Mat) {
        self.map.insert(name.into(), grad);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// `self += scale * other`, adding entries missing on either side.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (k, g) in &other.map {
            match self.map.get_mut(k) {
                Some(acc) => *acc += g * scale,
                None => {
                    self.map.insert(k.clone(), g * scale);
                }
            }
        }
    }
}

fn shape(m: &Mat) -> (usize, usize) {
    (m.nrows(), m.ncols())
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

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf whose gradient is reported under `name`.
    /// Registering the same name twice sums the two gradients.
    pub fn param(&mut self, name: &str, value: &Mat) -> Var {
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.push((v, name.to_string()));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", shape(va), shape(vb))));
        }
        let out = va * vb;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(Error::Shape(format!("matmul_t {:?} x {:?}ᵀ", shape(va), shape(vb))));
        }
        let out = va * vb.transpose();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if shape(va) != shape(vb) {
            return Err(Error::Shape(format!("add {:?} + {:?}", shape(va), shape(vb))));
        }
        let out = va + vb;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(Error::Shape(format!("add_row {:?} + {:?}", shape(va), shape(vr))));
        }
        let mut out = va.clone();
        for mut r in out.row_iter_mut() {
            r += vr;
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, factor), ng)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if shape(va) != shape(vb) {
            return Err(Error::Shape(format!("hadamard {:?} * {:?}", shape(va), shape(vb))));
        }
        let out = va.component_mul(vb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Hadamard(a, b), ng))
    }

    pub fn mul_const(&mut self, a: Var, factor: Mat) -> Result<Var> {
        let va = self.value(a);
        if shape(va) != shape(&factor) {
            return Err(Error::Shape(format!("mul_const {:?} * {:?}", shape(va), shape(&factor))));
        }
        let out = va.component_mul(&factor);
        let ng = self.needs(a);
        Ok(self.push(out, Op::MulConst(a, factor), ng))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.needs(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Row-wise softmax. `allowed`, when given, is row-major over the input
    /// shape; disallowed entries get weight exactly zero. A row with nothing
    /// allowed comes out all zero.
    pub fn softmax_rows(&mut self, a: Var, allowed: Option<Vec<bool>>) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = shape(va);
        if let Some(m) = &allowed {
            if m.len() != rows * cols {
                return Err(Error::Shape(format!(
                    "softmax mask of length {} for {rows}x{cols}",
                    m.len()
                )));
            }
        }
        let ok = |i: usize, j: usize| allowed.as_ref().map_or(true, |m| m[i * cols + j]);
        let mut out = Mat::zeros(rows, cols);
        for i in 0..rows {
            let mut max = f64::NEG_INFINITY;
            for j in 0..cols {
                if ok(i, j) {
                    max = max.max(va[(i, j)]);
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..cols {
                if ok(i, j) {
                    let e = (va[(i, j)] - max).exp();
                    out[(i, j)] = e;
                    total += e;
                }
            }
            for j in 0..cols {
                out[(i, j)] /= total;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(out, Op::SoftmaxRows(a), ng))
    }

    /// Per-row layer normalization with learnable `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = shape(vx);
        for p in [gamma, beta] {
            let vp = self.value(p);
            if vp.nrows() != 1 || vp.ncols() != cols {
                return Err(Error::Shape(format!("layer_norm affine {:?} for width {cols}", shape(vp))));
            }
        }
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let mut normalized = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Mat::zeros(rows, cols);
        for i in 0..rows {
            let row = vx.row(i);
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..cols {
                let n = (vx[(i, j)] - mean) * is;
                normalized[(i, j)] = n;
                out[(i, j)] = n * vg[(0, j)] + vb[(0, j)];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, normalized, inv_std }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).ncols())
            .ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        let rows: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.ncols() != cols {
                return Err(Error::Shape(format!("concat_rows width {} vs {cols}", vp.ncols())));
            }
            out.rows_mut(at, vp.nrows()).copy_from(vp);
            at += vp.nrows();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).nrows())
            .ok_or_else(|| Error::Shape("concat_cols of nothing".into()))?;
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.nrows() != rows {
                return Err(Error::Shape(format!("concat_cols height {} vs {rows}", vp.nrows())));
            }
            out.columns_mut(at, vp.ncols()).copy_from(vp);
            at += vp.ncols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.nrows() {
            return Err(Error::Bounds { index: start + len, len: va.nrows() });
        }
        let out = va.rows(start, len).clone_owned();
        let ng = self.needs(a);
        Ok(self.push(out, Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.ncols() {
            return Err(Error::Bounds { index: start + len, len: va.ncols() });
        }
        let out = va.columns(start, len).clone_owned();
        let ng = self.needs(a);
        Ok(self.push(out, Op::SliceCols(a, start), ng))
    }

    /// `∑ a²` as a 1×1 node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let out = Mat::from_element(1, 1, self.value(a).norm_squared());
        let ng = self.needs(a);
        self.push(out, Op::SumSquares(a), ng)
    }

    /// Mean cross-entropy of each logit row against its target id.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, cols) = shape(vl);
        if rows != targets.len() || rows == 0 {
            return Err(Error::Shape(format!("cross_entropy {rows} rows, {} targets", targets.len())));
        }
        let mut probs = Mat::zeros(rows, cols);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(Error::Vocab { id: t, vocab: cols });
            }
            let row = vl.row(i);
            let max = row.max();
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - vl[(i, t)];
            for j in 0..cols {
                probs[(i, j)] = (vl[(i, j)] - max).exp() / total;
            }
        }
        let out = Mat::from_element(1, 1, loss / rows as f64);
        let ng = self.needs(logits);
        Ok(self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, ng))
    }

    /// Reverse sweep from a 1×1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if shape(self.value(loss)) != (1, 1) {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", shape(self.value(loss)))));
        }
        if !self.needs(loss) {
            return Err(Error::MissingGradient("loss does not depend on any parameter".into()));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Mat::from_element(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let send = |v: Var, d: Mat, grads: &mut Vec<Option<Mat>>| {
                if !self.needs(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        send(*a, &g * vb.transpose(), &mut grads);
                    }
                    if self.needs(*b) {
                        send(*b, va.transpose() * &g, &mut grads);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        send(*a, &g * vb, &mut grads);
                    }
                    if self.needs(*b) {
                        send(*b, g.transpose() * va, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        let summed = Mat::from_fn(1, g.ncols(), |_, j| g.column(j).sum());
                        send(*row, summed, &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::Scale(a, f) => send(*a, g * *f, &mut grads),
                Op::Hadamard(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        send(*a, g.component_mul(vb), &mut grads);
                    }
                    if self.needs(*b) {
                        send(*b, g.component_mul(va), &mut grads);
                    }
                }
                Op::MulConst(a, f) => send(*a, g.component_mul(f), &mut grads),
                Op::Gelu(a) => {
                    let d = self.value(*a).map(gelu_grad).component_mul(&g);
                    send(*a, d, &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Mat::zeros(y.nrows(), y.ncols());
                    for i in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|j| g[(i, j)] * y[(i, j)]).sum();
                        for j in 0..y.ncols() {
                            d[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
                        }
                    }
                    send(*a, d, &mut grads);
                }
                Op::LayerNorm { x, gamma, beta, normalized, inv_std } => {
                    let vg = self.value(*gamma);
                    let (rows, cols) = shape(&g);
                    if self.needs(*gamma) {
                        let dg = Mat::from_fn(1, cols, |_, j| {
                            (0..rows).map(|i| g[(i, j)] * normalized[(i, j)]).sum()
                        });
                        send(*gamma, dg, &mut grads);
                    }
                    if self.needs(*beta) {
                        let db = Mat::from_fn(1, cols, |_, j| g.column(j).sum());
                        send(*beta, db, &mut grads);
                    }
                    if self.needs(*x) {
                        let mut dx = Mat::zeros(rows, cols);
                        for i in 0..rows {
                            let dn: Vec<f64> = (0..cols).map(|j| g[(i, j)] * vg[(0, j)]).collect();
                            let mean_dn = dn.iter().sum::<f64>() / cols as f64;
                            let mean_dn_n = (0..cols).map(|j| dn[j] * normalized[(i, j)]).sum::<f64>()
                                / cols as f64;
                            for j in 0..cols {
                                dx[(i, j)] =
                                    inv_std[i] * (dn[j] - mean_dn - normalized[(i, j)] * mean_dn_n);
                            }
                        }
                        send(*x, dx, &mut grads);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        if self.needs(p) {
                            send(p, g.rows(at, n).clone_owned(), &mut grads);
                        }
                        at += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        if self.needs(p) {
                            send(p, g.columns(at, n).clone_owned(), &mut grads);
                        }
                        at += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    let va = self.value(*a);
                    let mut d = Mat::zeros(va.nrows(), va.ncols());
                    d.rows_mut(*start, g.nrows()).copy_from(&g);
                    send(*a, d, &mut grads);
                }
                Op::SliceCols(a, start) => {
                    let va = self.value(*a);
                    let mut d = Mat::zeros(va.nrows(), va.ncols());
                    d.columns_mut(*start, g.ncols()).copy_from(&g);
                    send(*a, d, &mut grads);
                }
                Op::SumSquares(a) => {
                    let d = self.value(*a) * (2.0 * g[(0, 0)]);
                    send(*a, d, &mut grads);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let scale = g[(0, 0)] / targets.len() as f64;
                    let mut d = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        d[(i, t)] -= 1.0;
                    }
                    send(*logits, d * scale, &mut grads);
                }
            }
        }

        let mut out = Gradients::default();
        for (v, name) in &self.params {
            if let Some(g) = grads.get_mut(v.0).and_then(Option::take) {
                match out.map.get_mut(name) {
                    Some(acc) => *acc += g,
                    None => {
                        out.map.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Mat {
        Mat::from_row_slice(rows, cols, data)
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let x0 = m(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let mut t = Tape::new();
        let x = t.param("x", &x0);
        let s = t.sum_squares(x);
        let l = t.scale(s, 0.5);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get("x").unwrap(), &x0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let w = t.constant(m(1, 1, &[2.0]));
        let x = t.param("x", &m(1, 1, &[3.0]));
        let y = t.matmul(x, w).unwrap();
        let l = t.sum_squares(y);
        let g = t.backward(l).unwrap();
        assert_eq!(g.len(), 1);
        assert!((g.get("x").unwrap()[(0, 0)] - 24.0).abs() < 1e-12);
    }

    #[test]
    fn detached_loss_is_an_error() {
        let mut t = Tape::new();
        let _x = t.param("x", &m(1, 1, &[1.0]));
        let c = t.constant(m(1, 1, &[1.0]));
        let l = t.sum_squares(c);
        assert!(matches!(t.backward(l), Err(Error::MissingGradient(_))));
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut t = Tape::new();
        let a = t.param("a", &m(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 5.0]));
        let s = t
            .softmax_rows(a, Some(vec![true, false, true, false, false, false]))
            .unwrap();
        let v = t.value(s);
        assert_eq!(v[(0, 1)], 0.0);
        assert!((v[(0, 0)] + v[(0, 2)] - 1.0).abs() < 1e-15);
        assert_eq!(v.row(1).iter().copied().sum::<f64>(), 0.0);
    }

    #[test]
    fn repeated_parameter_names_accumulate() {
        let mut t = Tape::new();
        let a = t.param("w", &m(1, 1, &[2.0]));
        let b = t.param("w", &m(1, 1, &[2.0]));
        let s = t.add(a, b).unwrap();
        let l = t.sum_squares(s);
        let g = t.backward(l).unwrap();
        // d/dw (2w)^2 = 8w = 16
        assert!((g.get("w").unwrap()[(0, 0)] - 16.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_vocab() {
        let mut t = Tape::new();
        let l = t.param("l", &Mat::zeros(2, 64));
        let ce = t.cross_entropy(l, &[3, 17]).unwrap();
        assert!((t.scalar(ce) - 64f64.ln()).abs() < 1e-12);
    }
}
