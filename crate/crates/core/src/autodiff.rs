//! Minimal reverse-mode automatic differentiation over dense row-major
//! matrices. A [`Tape`] records operations against a borrowed
//! [`ParamStore`]; [`Tape::backward`] returns one gradient per parameter.
//!
//! Vectors are `1 x n` matrices throughout.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape does not match data");
        Tensor { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors. Names are canonical and unique; iteration order
/// is insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Gradients indexed like the parameter store; `None` for untouched params.
pub type Grads<T> = Vec<Option<Tensor<T>>>;

/// Add `src` into `dst`, allocating where `dst` is empty.
pub fn accumulate_grads<T: Scalar>(dst: &mut Grads<T>, src: Grads<T>, weight: T) {
    if dst.len() < src.len() {
        dst.resize(src.len(), None);
    }
    for (d, s) in dst.iter_mut().zip(src) {
        let Some(s) = s else { continue };
        match d {
            Some(d) => d.data.iter_mut().zip(&s.data).for_each(|(a, b)| *a = *a + *b * weight),
            None => {
                let mut s = s;
                s.data.iter_mut().for_each(|x| *x = *x * weight);
                *d = Some(s);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(usize),
    MatMulBt(Var, Var),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    Affine(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Softplus(Var),
    GatherRows(Var, Vec<usize>),
    RowDot(Var, Var),
    SliceCols(Var, usize),
    ConcatCols(Var, Var),
    StackRows(Vec<Var>),
    MeanRows(Var),
    MaskedSoftmaxRows(Var),
    LayerNormRows(Var, Vec<T>),
    Bce(Var, Vec<T>, Vec<T>),
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
}

pub struct Tape<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        let n = &self.nodes[v.0];
        match n.op {
            Op::Param(id) => &self.params.tensors[id].data,
            _ => &n.value,
        }
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let t = &self.params.tensors[id.0];
        let v = self.push(t.rows, t.cols, Vec::new(), Op::Param(id.0));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Var {
        assert_eq!(rows * cols, data.len());
        self.push(rows, cols, data, Op::Leaf)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(rows, cols, vec![T::zero(); rows * cols])
    }

    /// `a (m x k) * b^T` with `b (n x k)`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let ((m, k), (n, kb)) = (self.shape(a), self.shape(b));
        assert_eq!(k, kb, "matmul_bt inner dimension");
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bv[j * k..(j + 1) * k]);
            }
        }
        self.push(m, n, out, Op::MatMulBt(a, b))
    }

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let ((m, k), (kb, n)) = (self.shape(a), self.shape(b));
        assert_eq!(k, kb, "matmul inner dimension");
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for l in 0..k {
                let x = av[i * k + l];
                if x == T::zero() {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &y) in orow.iter_mut().zip(&bv[l * n..(l + 1) * n]) {
                    *o = *o + x * y;
                }
            }
        }
        self.push(m, n, out, Op::MatMul(a, b))
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "elementwise shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(sa.0, sa.1, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Add a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let ((m, n), (r, c)) = (self.shape(a), self.shape(row));
        assert!(r == 1 && c == n, "add_row expects a 1 x {n} row");
        let rv = self.value(row);
        let out = self.value(a).iter().enumerate().map(|(i, &x)| x + rv[i % n]).collect();
        self.push(m, n, out, Op::AddRow(a, row))
    }

    /// Multiply every row of `a` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let ((m, n), (r, c)) = (self.shape(a), self.shape(row));
        assert!(r == 1 && c == n, "mul_row expects a 1 x {n} row");
        let rv = self.value(row);
        let out = self.value(a).iter().enumerate().map(|(i, &x)| x * rv[i % n]).collect();
        self.push(m, n, out, Op::MulRow(a, row))
    }

    /// Scale row `i` of `a` by `col[i]` where `col` is `m x 1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let ((m, n), (r, c)) = (self.shape(a), self.shape(col));
        assert!(r == m && c == 1, "mul_col expects an {m} x 1 column");
        let cv = self.value(col);
        let out = self.value(a).iter().enumerate().map(|(i, &x)| x * cv[i / n]).collect();
        self.push(m, n, out, Op::MulCol(a, col))
    }

    /// `a * s` for a `1 x 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "scale_by expects a scalar node");
        let sv = self.scalar(s);
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * sv).collect();
        self.push(m, n, out, Op::ScaleBy(a, s))
    }

    /// `a * mul + add` with constant coefficients.
    pub fn affine(&mut self, a: Var, mul: T, add: T) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * mul + add).collect();
        self.push(m, n, out, Op::Affine(a, mul))
    }

    pub fn scale(&mut self, a: Var, mul: T) -> Var {
        self.affine(a, mul, T::zero())
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(m, n, out, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, T::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, T::exp, Op::Exp(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    /// Rows of `a` at `idx`, in order (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let (m, n) = self.shape(a);
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &r in &idx {
            assert!(r < m, "gather_rows index {r} out of {m} rows");
            out.extend_from_slice(&av[r * n..(r + 1) * n]);
        }
        self.push(idx.len(), n, out, Op::GatherRows(a, idx))
    }

    /// Row-wise dot product of two `m x n` matrices, giving `m x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let ((m, n), sb) = (self.shape(a), self.shape(b));
        assert_eq!((m, n), sb, "row_dot shape mismatch");
        let (av, bv) = (self.value(a), self.value(b));
        let out = (0..m).map(|i| dot(&av[i * n..(i + 1) * n], &bv[i * n..(i + 1) * n])).collect();
        self.push(m, 1, out, Op::RowDot(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + len <= n, "slice_cols out of range");
        let av = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&av[i * n + start..i * n + start + len]);
        }
        self.push(m, len, out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let ((m, na), (mb, nb)) = (self.shape(a), self.shape(b));
        assert_eq!(m, mb, "concat_cols row mismatch");
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            out.extend_from_slice(&av[i * na..(i + 1) * na]);
            out.extend_from_slice(&bv[i * nb..(i + 1) * nb]);
        }
        self.push(m, na + nb, out, Op::ConcatCols(a, b))
    }

    /// Vertical concatenation.
    pub fn stack_rows(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty(), "stack_rows needs at least one part");
        let n = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in &parts {
            let (m, c) = self.shape(p);
            assert_eq!(c, n, "stack_rows column mismatch");
            rows += m;
            out.extend_from_slice(self.value(p));
        }
        self.push(rows, n, out, Op::StackRows(parts))
    }

    /// Column means, giving `1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let av = self.value(a);
        let inv = T::one() / T::from_usize(m).expect("row count");
        let out = (0..n).map(|j| (0..m).map(|i| av[i * n + j]).sum::<T>() * inv).collect();
        self.push(1, n, out, Op::MeanRows(a))
    }

    /// Row-wise softmax over entries where `mask` is true. Rows with no
    /// permitted entry produce zeros.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &[bool]) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(mask.len(), m * n, "mask shape mismatch");
        let av = self.value(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = i * n..(i + 1) * n;
            let max = row.clone().filter(|&k| mask[k]).map(|k| av[k]).fold(None, |acc: Option<T>, x| {
                Some(acc.map_or(x, |a| a.max(x)))
            });
            let Some(max) = max else { continue };
            let mut total = T::zero();
            for k in row.clone().filter(|&k| mask[k]) {
                let e = (av[k] - max).exp();
                out[k] = e;
                total = total + e;
            }
            for k in row {
                out[k] = out[k] / total;
            }
        }
        self.push(m, n, out, Op::MaskedSoftmaxRows(a))
    }

    /// Normalize each row to zero mean and unit variance.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let av = self.value(a);
        let eps = T::lit(1e-5);
        let nf = T::from_usize(n).expect("col count");
        let mut out = Vec::with_capacity(m * n);
        let mut stds = Vec::with_capacity(m);
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let std = (var + eps).sqrt();
            out.extend(row.iter().map(|&x| (x - mean) / std));
            stds.push(std);
        }
        self.push(m, n, out, Op::LayerNormRows(a, stds))
    }

    /// Weighted binary cross-entropy summed over entries of `p`, giving `1 x 1`.
    pub fn bce(&mut self, p: Var, targets: Vec<T>, weights: Vec<T>) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.len(), targets.len());
        assert_eq!(pv.len(), weights.len());
        let total = pv
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&p, &t), &w)| {
                let p = clamp_prob(p);
                -w * (t * p.ln() + (T::one() - t) * (T::one() - p).ln())
            })
            .sum();
        self.push(1, 1, vec![total], Op::Bce(p, targets, weights))
    }

    /// Gradients of the scalar `root` with respect to every parameter.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);
        let mut out: Grads<T> = vec![None; self.params.len()];
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let (m, n) = (node.rows, node.cols);
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out[*id] = Some(Tensor::from_vec(m, n, g)),
                Op::MatMulBt(a, b) => {
                    let k = self.shape(*a).1;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = vec![T::zero(); m * k];
                    let mut db = vec![T::zero(); n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == T::zero() {
                                continue;
                            }
                            axpy(&mut da[i * k..(i + 1) * k], gij, &bv[j * k..(j + 1) * k]);
                            axpy(&mut db[j * k..(j + 1) * k], gij, &av[i * k..(i + 1) * k]);
                        }
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMul(a, b) => {
                    let k = self.shape(*a).1;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = vec![T::zero(); m * k];
                    let mut db = vec![T::zero(); k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for l in 0..k {
                            da[i * k + l] = dot(grow, &bv[l * n..(l + 1) * n]);
                            axpy(&mut db[l * n..(l + 1) * n], av[i * k + l], grow);
                        }
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.iter().map(|&x| -x).collect());
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                    acc(&mut grads, *b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                }
                Op::AddRow(a, row) => {
                    let mut dr = vec![T::zero(); n];
                    for (i, &x) in g.iter().enumerate() {
                        dr[i % n] = dr[i % n] + x;
                    }
                    acc(&mut grads, *row, dr);
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let (av, rv) = (self.value(*a), self.value(*row));
                    let mut dr = vec![T::zero(); n];
                    let mut da = Vec::with_capacity(m * n);
                    for (i, &x) in g.iter().enumerate() {
                        dr[i % n] = dr[i % n] + x * av[i];
                        da.push(x * rv[i % n]);
                    }
                    acc(&mut grads, *row, dr);
                    acc(&mut grads, *a, da);
                }
                Op::MulCol(a, col) => {
                    let (av, cv) = (self.value(*a), self.value(*col));
                    let mut dc = vec![T::zero(); m];
                    let mut da = Vec::with_capacity(m * n);
                    for (i, &x) in g.iter().enumerate() {
                        dc[i / n] = dc[i / n] + x * av[i];
                        da.push(x * cv[i / n]);
                    }
                    acc(&mut grads, *col, dc);
                    acc(&mut grads, *a, da);
                }
                Op::ScaleBy(a, s) => {
                    let (av, sv) = (self.value(*a), self.scalar(*s));
                    let ds = dot(&g, av);
                    acc(&mut grads, *s, vec![ds]);
                    acc(&mut grads, *a, g.iter().map(|&x| x * sv).collect());
                }
                Op::Affine(a, mul) => acc(&mut grads, *a, g.iter().map(|&x| x * *mul).collect()),
                Op::Sigmoid(a) => {
                    acc(&mut grads, *a, g.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)).collect())
                }
                Op::Tanh(a) => acc(&mut grads, *a, g.iter().zip(y).map(|(&d, &t)| d * (T::one() - t * t)).collect()),
                Op::Relu(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, g.iter().zip(av).map(|(&d, &x)| if x > T::zero() { d } else { T::zero() }).collect())
                }
                Op::Exp(a) => acc(&mut grads, *a, g.iter().zip(y).map(|(&d, &e)| d * e).collect()),
                Op::Softplus(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, g.iter().zip(av).map(|(&d, &x)| d * sigmoid(x)).collect())
                }
                Op::GatherRows(a, idx) => {
                    let (ra, _) = self.shape(*a);
                    let mut da = vec![T::zero(); ra * n];
                    for (r, &src) in idx.iter().enumerate() {
                        for (d, &x) in da[src * n..(src + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *d = *d + x;
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::RowDot(a, b) => {
                    let k = self.shape(*a).1;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Vec::with_capacity(m * k);
                    let mut db = Vec::with_capacity(m * k);
                    for i in 0..m {
                        da.extend(bv[i * k..(i + 1) * k].iter().map(|&x| x * g[i]));
                        db.extend(av[i * k..(i + 1) * k].iter().map(|&x| x * g[i]));
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::SliceCols(a, start) => {
                    let na = self.shape(*a).1;
                    let mut da = vec![T::zero(); m * na];
                    for i in 0..m {
                        da[i * na + start..i * na + start + n].copy_from_slice(&g[i * n..(i + 1) * n]);
                    }
                    acc(&mut grads, *a, da);
                }
                Op::ConcatCols(a, b) => {
                    let na = self.shape(*a).1;
                    let nb = n - na;
                    let mut da = Vec::with_capacity(m * na);
                    let mut db = Vec::with_capacity(m * nb);
                    for i in 0..m {
                        da.extend_from_slice(&g[i * n..i * n + na]);
                        db.extend_from_slice(&g[i * n + na..(i + 1) * n]);
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::StackRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].rows * n;
                        acc(&mut grads, p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::MeanRows(a) => {
                    let ra = self.shape(*a).0;
                    let inv = T::one() / T::from_usize(ra).expect("row count");
                    let da = (0..ra * n).map(|i| g[i % n] * inv).collect();
                    acc(&mut grads, *a, da);
                }
                Op::MaskedSoftmaxRows(a) => {
                    let mut da = vec![T::zero(); m * n];
                    for i in 0..m {
                        let row = i * n..(i + 1) * n;
                        let s = dot(&y[row.clone()], &g[row.clone()]);
                        for k in row {
                            da[k] = y[k] * (g[k] - s);
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::LayerNormRows(a, stds) => {
                    let nf = T::from_usize(n).expect("col count");
                    let mut da = Vec::with_capacity(m * n);
                    for i in 0..m {
                        let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                        let mean_g = gr.iter().copied().sum::<T>() / nf;
                        let mean_gy = dot(gr, yr) / nf;
                        da.extend(gr.iter().zip(yr).map(|(&d, &yy)| (d - mean_g - yy * mean_gy) / stds[i]));
                    }
                    acc(&mut grads, *a, da);
                }
                Op::Bce(p, targets, weights) => {
                    let pv = self.value(*p);
                    let d = pv
                        .iter()
                        .zip(targets)
                        .zip(weights)
                        .map(|((&p, &t), &w)| {
                            let p = clamp_prob(p);
                            -g[0] * w * (t / p - (T::one() - t) / (T::one() - p))
                        })
                        .collect();
                    acc(&mut grads, *p, d);
                }
            }
        }
        out
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        slot => *slot = Some(g),
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

fn axpy<T: Scalar>(dst: &mut [T], alpha: T, x: &[T]) {
    for (d, &v) in dst.iter_mut().zip(x) {
        *d = *d + alpha * v;
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    let eps = T::epsilon();
    p.max(eps).min(T::one() - eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Compare tape gradients with central differences for a graph builder.
    fn check(store: ParamStore<f64>, build: impl Fn(&mut Tape<f64>) -> Var) {
        let tape_grads = {
            let mut tape = Tape::new(&store);
            let root = build(&mut tape);
            tape.backward(root)
        };
        let eval = |s: &ParamStore<f64>| {
            let mut tape = Tape::new(s);
            let r = build(&mut tape);
            tape.scalar(r)
        };
        let h = 1e-5;
        for p in 0..store.len() {
            for k in 0..store.get(ParamId(p)).len() {
                let mut plus = store.clone();
                plus.get_mut(ParamId(p)).data[k] += h;
                let mut minus = store.clone();
                minus.get_mut(ParamId(p)).data[k] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let analytic = tape_grads[p].as_ref().map_or(0.0, |t| t.data[k]);
                assert!(
                    (numeric - analytic).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "param {p}[{k}]: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matrix_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let a = store.insert("a", random(&mut rng, 3, 4));
        let b = store.insert("b", random(&mut rng, 2, 4));
        let c = store.insert("c", random(&mut rng, 2, 5));
        let row = store.insert("row", random(&mut rng, 1, 5));
        let col = store.insert("col", random(&mut rng, 3, 1));
        let s = store.insert("s", random(&mut rng, 1, 1));
        check(store, |t| {
            let (a, b, c, row, col, s) = (t.param(a), t.param(b), t.param(c), t.param(row), t.param(col), t.param(s));
            let x = t.matmul_bt(a, b); // 3x2
            let x = t.matmul(x, c); // 3x5
            let x = t.add_row(x, row);
            let x = t.mul_col(x, col);
            let x = t.tanh(x);
            let y = t.mul_row(x, row);
            let y = t.scale_by(y, s);
            let z = t.softplus(y);
            let z = t.layer_norm_rows(z);
            let mask: Vec<bool> = (0..15).map(|i| i % 5 <= i / 5 + 1).collect();
            let z = t.masked_softmax_rows(z, &mask);
            let w = t.exp(x);
            let w = t.mul(w, z);
            let w = t.sub(w, x);
            let m = t.mean_rows(w); // 1x5
            let m = t.sigmoid(m);
            t.bce(m, vec![1.0, 0.0, 1.0, 1.0, 0.0], vec![0.2; 5])
        });
    }

    #[test]
    fn indexing_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let emb = store.insert("emb", random(&mut rng, 4, 3));
        let w = store.insert("w", random(&mut rng, 4, 6));
        check(store, |t| {
            let (emb, w) = (t.param(emb), t.param(w));
            let g = t.gather_rows(emb, vec![2, 0, 2]);
            let left = t.slice_cols(g, 1, 2);
            let cat = t.concat_cols(g, left); // 3x5
            let r0 = t.gather_rows(w, vec![1]);
            let r1 = t.gather_rows(w, vec![3, 3]);
            let st = t.stack_rows(vec![r0, r1]); // 3x6
            let st = t.slice_cols(st, 0, 5);
            let st = t.relu(st);
            let st = t.affine(st, 0.5, 0.1);
            let d = t.row_dot(cat, st); // 3x1
            let p = t.sigmoid(d);
            t.bce(p, vec![1.0, 0.0, 1.0], vec![1.0; 3])
        });
    }

    #[test]
    fn fully_masked_rows_are_zero() {
        let store = ParamStore::<f64>::new();
        let mut t = Tape::new(&store);
        let a = t.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let s = t.masked_softmax_rows(a, &[false, false, true, true]);
        assert_eq!(&t.value(s)[..2], &[0.0, 0.0]);
        assert!((t.value(s)[2] + t.value(s)[3] - 1.0).abs() < 1e-12);
    }
}
