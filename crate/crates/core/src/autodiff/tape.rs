use super::conv::{conv1d_backward, conv1d_forward, ConvCache};
use super::lstm::{lstm_backward, lstm_forward, LstmCache, LstmParams};
use super::scalar::{gemm, Scalar};
use super::ShapeError;

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, ShapeError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(ShapeError::new("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self, ShapeError> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Some((m, n)),
            _ => None,
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// A user-supplied differentiable operation. The forward value is computed
/// by the caller; the op only supplies the vector-Jacobian product.
pub trait CustomOp<T: Scalar> {
    /// Gradient of the loss with respect to each input, given the gradient
    /// `grad` with respect to the output. `None` means no contribution.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &[T])
        -> Vec<Option<Vec<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Prelu(Var, Var),
    Conv1d(Box<ConvCache<T>>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SumAbs(Var),
    L1(Var, Vec<T>),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Swap01(Var),
    Lstm(Box<LstmCache<T>>),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], retained for leaf values.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when `v` did not influence
    /// the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); len])
    }
}

/// Records operations for reverse-mode differentiation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<(), ShapeError> {
    if a.shape != b.shape {
        return Err(ShapeError::new(op, &a.shape, &b.shape));
    }
    Ok(())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m,k] · b[n,k]ᵀ`, the usual layout for a weight matrix.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, ShapeError> {
        let (av, bv) = (self.value(a), self.value(b));
        let err = || ShapeError::new("matmul", &av.shape, &bv.shape);
        let (m, k) = av.dims2().ok_or_else(err)?;
        let (bk, n) = match (bv.dims2(), trans_b) {
            (Some((r, c)), false) => (r, c),
            (Some((r, c)), true) => (c, r),
            (None, _) => return Err(err()),
        };
        if bk != k {
            return Err(err());
        }
        let mut out = vec![T::zero(); m * n];
        gemm(false, trans_b, m, k, n, &av.data, &bv.data, T::zero(), &mut out);
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, ShapeError> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_op(
        &mut self,
        name: &'static str,
        a: Var,
        r: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, ShapeError> {
        let (av, rv) = (self.value(a), self.value(r));
        let n = rv.numel();
        if rv.shape.len() != 1 || av.shape.last() != Some(&n) {
            return Err(ShapeError::new(name, &av.shape, &rv.shape));
        }
        let data = av
            .data
            .chunks(n)
            .flat_map(|row| row.iter().zip(&rv.data).map(|(&x, &y)| f(x, y)))
            .collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        Ok(self.push(value, op, &[a, r]))
    }

    /// Adds the vector `r[n]` to every length-`n` row of `a[..., n]`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var, ShapeError> {
        self.row_op("add_row", a, r, |x, y| x + y, Op::AddRow(a, r))
    }

    /// Multiplies every length-`n` row of `a[..., n]` by `r[n]` elementwise.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var, ShapeError> {
        self.row_op("mul_row", a, r, |x, y| x * y, Op::MulRow(a, r))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|&x| f(x)).collect(),
        };
        self.push(value, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, T::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    /// Parametric ReLU with a single learnable slope `s[1]`.
    pub fn prelu(&mut self, a: Var, s: Var) -> Result<Var, ShapeError> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(ShapeError::new("prelu", &self.value(a).shape, &sv.shape));
        }
        let slope = sv.data[0];
        let v = self.map(a, |x| if x > T::zero() { x } else { slope * x }, Op::Prelu(a, s));
        // `map` only records `a` as an input; the slope matters too.
        if self.nodes[s.0].requires_grad {
            self.nodes[v.0].requires_grad = true;
        }
        Ok(v)
    }

    /// 1-D convolution of a time-major signal `x[L, Cin]` with `w[Cout, Cin, K]`
    /// and bias `b[Cout]`, zero padding on both ends. Output `[Lout, Cout]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, ShapeError> {
        let (value, cache) = conv1d_forward(
            self.value(x),
            self.value(w),
            self.value(b),
            stride,
            padding,
            (x, w, b),
        )?;
        Ok(self.push(value, Op::Conv1d(Box::new(cache)), &[x, w, b]))
    }

    fn reduce(&mut self, a: Var, v: T, op: Op<T>) -> Var {
        self.push(Tensor::scalar(v), op, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum();
        self.reduce(a, s, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s: T = av.data.iter().copied().sum();
        let m = s / T::from_f64(av.numel().max(1) as f64);
        self.reduce(a, m, Op::Mean(a))
    }

    pub fn sum_abs(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().map(|x| x.abs()).sum();
        self.reduce(a, s, Op::SumAbs(a))
    }

    /// Mean absolute difference to a constant target of the same size.
    pub fn l1_to(&mut self, a: Var, target: &[T]) -> Result<Var, ShapeError> {
        let av = self.value(a);
        if av.numel() != target.len() {
            return Err(ShapeError::new("l1", &av.shape, &[target.len()]));
        }
        let s: T = av.data.iter().zip(target).map(|(&x, &y)| (x - y).abs()).sum();
        let m = s / T::from_f64(target.len().max(1) as f64);
        Ok(self.reduce(a, m, Op::L1(a, target.to_vec())))
    }

    /// Column means of `a[m, n]`, giving `[n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, ShapeError> {
        let av = self.value(a);
        let (m, n) = av
            .dims2()
            .filter(|&(m, _)| m > 0)
            .ok_or_else(|| ShapeError::new("mean_rows", &av.shape, &[]))?;
        let mut out = vec![T::zero(); n];
        for row in av.data.chunks(n) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = T::from_f64(1.0 / m as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(
            Tensor {
                shape: vec![n],
                data: out,
            },
            Op::MeanRows(a),
            &[a],
        ))
    }

    /// Columns `start..start+len` of `a[m, n]`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, ShapeError> {
        let av = self.value(a);
        let (m, n) = av
            .dims2()
            .filter(|&(_, n)| start + len <= n)
            .ok_or_else(|| ShapeError::new("slice_cols", &av.shape, &[start, start + len]))?;
        let mut out = Vec::with_capacity(m * len);
        for row in av.data.chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.push(
            Tensor {
                shape: vec![m, len],
                data: out,
            },
            Op::SliceCols { a, start },
            &[a],
        ))
    }

    /// Joins 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, ShapeError> {
        let first = parts
            .first()
            .ok_or_else(|| ShapeError::new("concat_cols", &[], &[]))?;
        let m = self.value(*first).shape[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            match pv.dims2() {
                Some((pm, pn)) if pm == m => widths.push(pn),
                _ => return Err(ShapeError::new("concat_cols", &self.value(*first).shape, &pv.shape)),
            }
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, ShapeError> {
        let av = self.value(a);
        if shape.iter().product::<usize>() != av.numel() {
            return Err(ShapeError::new("reshape", &av.shape, shape));
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: av.data.clone(),
        };
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Swaps the two leading axes of `a[p, q, r]`, giving `[q, p, r]`.
    pub fn swap01(&mut self, a: Var) -> Result<Var, ShapeError> {
        let av = self.value(a);
        let [p, q, r] = av.shape[..] else {
            return Err(ShapeError::new("swap01", &av.shape, &[]));
        };
        let mut out = vec![T::zero(); av.numel()];
        for i in 0..p {
            for j in 0..q {
                out[(j * p + i) * r..(j * p + i + 1) * r]
                    .copy_from_slice(&av.data[(i * q + j) * r..(i * q + j + 1) * r]);
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![q, p, r],
                data: out,
            },
            Op::Swap01(a),
            &[a],
        ))
    }

    /// Runs an LSTM over `x[S, N, I]` (sequence-major, `N` independent
    /// sequences) from a zero initial state. Returns hidden states `[S, N, H]`.
    pub fn lstm(&mut self, x: Var, p: &LstmParams) -> Result<Var, ShapeError> {
        let inputs = [x, p.w_ih, p.w_hh, p.b_ih, p.b_hh];
        let (value, cache) = lstm_forward(
            self.value(x),
            self.value(p.w_ih),
            self.value(p.w_hh),
            self.value(p.b_ih),
            self.value(p.b_hh),
            *p,
            x,
        )?;
        Ok(self.push(value, Op::Lstm(Box::new(cache)), &inputs))
    }

    /// Records a value computed outside the tape together with its
    /// vector-Jacobian product.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, ShapeError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(ShapeError::new("backward", &lv.shape, &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
        if let Some(buf) = self.buf(grads, v) {
            for (k, b) in buf.iter_mut().enumerate() {
                *b += f(k);
            }
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape[0], av.shape[1]);
                let n = out.shape[1];
                if let Some(ga) = self.buf(grads, *a) {
                    // dA = G · op(B)ᵀ
                    gemm(false, !trans_b, m, n, k, g, &bv.data, T::one(), ga);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    if *trans_b {
                        gemm(true, false, n, m, k, g, &av.data, T::one(), gb);
                    } else {
                        gemm(true, false, k, m, n, &av.data, g, T::one(), gb);
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |k| g[k]);
                self.accumulate(grads, *b, |k| g[k]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |k| g[k]);
                self.accumulate(grads, *b, |k| -g[k]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                self.accumulate(grads, *a, |k| g[k] * bv[k]);
                self.accumulate(grads, *b, |k| g[k] * av[k]);
            }
            Op::AddRow(a, r) => {
                self.accumulate(grads, *a, |k| g[k]);
                if let Some(gr) = self.buf(grads, *r) {
                    let n = gr.len();
                    for row in g.chunks(n) {
                        for (o, &x) in gr.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                }
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (&self.value(*a).data, &self.value(*r).data);
                let n = rv.len();
                self.accumulate(grads, *a, |k| g[k] * rv[k % n]);
                if let Some(gr) = self.buf(grads, *r) {
                    for (grow, arow) in g.chunks(n).zip(av.chunks(n)) {
                        for ((o, &x), &y) in gr.iter_mut().zip(grow).zip(arow) {
                            *o += x * y;
                        }
                    }
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |k| g[k] * *c),
            Op::Tanh(a) => {
                let y = &out.data;
                self.accumulate(grads, *a, |k| g[k] * (T::one() - y[k] * y[k]));
            }
            Op::Sigmoid(a) => {
                let y = &out.data;
                self.accumulate(grads, *a, |k| g[k] * y[k] * (T::one() - y[k]));
            }
            Op::Relu(a) => {
                let x = &self.value(*a).data;
                self.accumulate(grads, *a, |k| if x[k] > T::zero() { g[k] } else { T::zero() });
            }
            Op::Prelu(a, s) => {
                let x = &self.value(*a).data;
                let slope = self.value(*s).data[0];
                self.accumulate(grads, *a, |k| if x[k] > T::zero() { g[k] } else { slope * g[k] });
                if let Some(gs) = self.buf(grads, *s) {
                    gs[0] += x
                        .iter()
                        .zip(g)
                        .filter(|(&xv, _)| xv <= T::zero())
                        .map(|(&xv, &gv)| xv * gv)
                        .sum();
                }
            }
            Op::Conv1d(cache) => {
                let (x, w, b) = cache.inputs;
                let (dx, dw, db) = conv1d_backward(cache, self.value(x), self.value(w), g);
                self.accumulate(grads, x, |k| dx[k]);
                self.accumulate(grads, w, |k| dw[k]);
                self.accumulate(grads, b, |k| db[k]);
            }
            Op::Sum(a) => self.accumulate(grads, *a, |_| g[0]),
            Op::Mean(a) => {
                let n = T::from_f64(self.value(*a).numel().max(1) as f64);
                self.accumulate(grads, *a, |_| g[0] / n);
            }
            Op::SumAbs(a) => {
                let x = &self.value(*a).data;
                self.accumulate(grads, *a, |k| g[0] * sign(x[k]));
            }
            Op::L1(a, target) => {
                let x = &self.value(*a).data;
                let n = T::from_f64(target.len().max(1) as f64);
                self.accumulate(grads, *a, |k| g[0] * sign(x[k] - target[k]) / n);
            }
            Op::MeanRows(a) => {
                let m = self.value(*a).shape[0];
                let n = g.len();
                let inv = T::from_f64(1.0 / m as f64);
                self.accumulate(grads, *a, |k| g[k % n] * inv);
            }
            Op::SliceCols { a, start } => {
                let n = self.value(*a).shape[1];
                let len = out.shape[1];
                if let Some(ga) = self.buf(grads, *a) {
                    for (arow, grow) in ga.chunks_mut(n).zip(g.chunks(len)) {
                        for (o, &x) in arow[*start..*start + len].iter_mut().zip(grow) {
                            *o += x;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = out.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape[1];
                    if let Some(gp) = self.buf(grads, p) {
                        for (prow, grow) in gp.chunks_mut(w).zip(g.chunks(n)) {
                            for (o, &x) in prow.iter_mut().zip(&grow[offset..offset + w]) {
                                *o += x;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |k| g[k]),
            Op::Swap01(a) => {
                let [p, q, r] = self.value(*a).shape[..] else {
                    unreachable!("checked in forward")
                };
                if let Some(ga) = self.buf(grads, *a) {
                    for i in 0..p {
                        for j in 0..q {
                            let src = &g[(j * p + i) * r..(j * p + i + 1) * r];
                            for (o, &x) in ga[(i * q + j) * r..(i * q + j + 1) * r].iter_mut().zip(src) {
                                *o += x;
                            }
                        }
                    }
                }
            }
            Op::Lstm(cache) => {
                let p = cache.params;
                let x = cache.x;
                let needs_x = self.nodes[x.0].requires_grad;
                let r = lstm_backward(
                    cache,
                    &self.value(x).data,
                    &out.data,
                    &self.value(p.w_ih).data,
                    &self.value(p.w_hh).data,
                    g,
                    needs_x,
                );
                if let Some(dx) = r.dx {
                    self.accumulate(grads, x, |k| dx[k]);
                }
                self.accumulate(grads, p.w_ih, |k| r.dw_ih[k]);
                self.accumulate(grads, p.w_hh, |k| r.dw_hh[k]);
                self.accumulate(grads, p.b_ih, |k| r.db[k]);
                self.accumulate(grads, p.b_hh, |k| r.db[k]);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let parts = op.backward(&values, out, g);
                for (&v, part) in inputs.iter().zip(parts) {
                    if let Some(d) = part {
                        self.accumulate(grads, v, |k| d[k]);
                    }
                }
            }
        }
    }
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
