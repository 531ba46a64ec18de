use super::tensor::gemm;
use super::{DiffError, GradientMap, ParamId, ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Matmul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    ScaleRows { x: Var, scale: Var },
    Affine { x: Var, scale: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Ln { x: Var, eps: f64 },
    Softmax { x: Var, temperature: f64 },
    LogSumExp(Var),
    Sum(Var),
    Dot(Var, Var),
    SqNorm(Var),
    Cosine(Var, Var),
    MeanRows(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    Clamp { x: Var, lo: f64, hi: f64 },
    Transpose(Var),
    Select { x: Var, indices: Vec<usize> },
    RepeatRows(Var),
    Reshape(Var),
    StopGrad,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Matmul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Affine { .. } => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Ln { .. } => "ln",
            Op::Softmax { .. } => "softmax",
            Op::LogSumExp(_) => "logsumexp",
            Op::Sum(_) => "sum",
            Op::Dot(..) => "dot",
            Op::SqNorm(_) => "sq_norm",
            Op::Cosine(..) => "cosine",
            Op::MeanRows(_) => "mean_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Clamp { .. } => "clamp",
            Op::Transpose(_) => "transpose",
            Op::Select { .. } => "select",
            Op::RepeatRows(_) => "repeat_rows",
            Op::Reshape(_) => "reshape",
            Op::StopGrad => "stop_grad",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Lower bound applied to norms in cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

/// Eagerly evaluated computation graph with reverse-mode gradients.
///
/// Every primitive computes its value when it is added, so building the graph
/// is the forward pass. Nodes are stored in creation order, which is a valid
/// topological order; [`Graph::backward`] walks it in exact reverse.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var, DiffError> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(DiffError::NonFinite {
                node,
                op: op.name(),
            });
        }
        let requires_grad = match &op {
            Op::Input | Op::StopGrad => false,
            Op::Param(_) => true,
            other => inputs_of(other).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(node))
    }

    fn shape_err(&self, op: &'static str, detail: String) -> DiffError {
        DiffError::Shape {
            node: self.next_id(),
            op,
            detail,
        }
    }

    /// Non-trainable leaf.
    pub fn input(&mut self, value: Tensor) -> Result<Var, DiffError> {
        self.push(Op::Input, value)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Result<Var, DiffError> {
        self.input(Tensor::scalar(value))
    }

    /// Trainable leaf bound to a store entry. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var, DiffError> {
        if let Some(v) = self.param_vars[id.0] {
            return Ok(v);
        }
        let value = self.params.get(id).clone();
        let v = self.push(Op::Param(id), value)?;
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// `a · b`, where `a` is `[m, k]` or `[k]` and `b` is `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`, where `a` is `[m, k]` or `[k]` and `b` is `[n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, DiffError> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.rank() == 0 || bv.rank() != 2 {
            return Err(self.shape_err(
                "matmul",
                format!("operands {:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k) = (av.rows(), av.cols());
        let (bk, n) = if trans_b {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        if k != bk {
            return Err(self.shape_err(
                "matmul",
                format!("inner dims {k} vs {bk} ({:?} x {:?})", av.shape(), bv.shape()),
            ));
        }
        let data = gemm(
            av.data(),
            m,
            k,
            false,
            bv.data(),
            bv.rows(),
            bv.cols(),
            trans_b,
        );
        let shape = if av.rank() == 1 { vec![n] } else { vec![m, n] };
        let out = Tensor::new(shape, data)?;
        self.push(Op::Matmul { a, b, trans_b }, out)
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, DiffError> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return Err(self.shape_err(
                name,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), out)
    }

    /// Adds a `[n]` bias to every row of `x` (`[m, n]` or `[n]`).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, DiffError> {
        let (xv, bv) = (self.val(x), self.val(bias));
        if bv.rank() != 1 || xv.rank() == 0 || xv.cols() != bv.cols() {
            return Err(self.shape_err(
                "add_row",
                format!("{:?} + row {:?}", xv.shape(), bv.shape()),
            ));
        }
        let n = bv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += *b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(Op::AddRow { x, bias }, out)
    }

    /// Multiplies row `i` of `x` (`[m, n]`) by `scale[i]` (`[m]`).
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var, DiffError> {
        let (xv, sv) = (self.val(x), self.val(scale));
        if xv.rank() != 2 || sv.rank() != 1 || sv.cols() != xv.rows() {
            return Err(self.shape_err(
                "scale_rows",
                format!("{:?} by {:?}", xv.shape(), sv.shape()),
            ));
        }
        let n = xv.cols();
        let mut data = xv.data().to_vec();
        for (row, s) in data.chunks_mut(n).zip(sv.data()) {
            for v in row.iter_mut() {
                *v *= *s;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(Op::ScaleRows { x, scale }, out)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var, DiffError> {
        let xv = self.val(x);
        let data = xv.data().iter().map(|v| scale * v + shift).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(Op::Affine { x, scale }, out)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, DiffError> {
        self.affine(x, c, 0.0)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, DiffError> {
        let xv = self.val(x);
        let data = xv.data().iter().map(|v| f(*v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(op, out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, DiffError> {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, DiffError> {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    /// `max(x, 0)`, with derivative 0 at 0.
    pub fn relu(&mut self, x: Var) -> Result<Var, DiffError> {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, DiffError> {
        self.map(x, Op::Exp(x), f64::exp)
    }

    /// `ln(x + eps)`.
    pub fn ln(&mut self, x: Var, eps: f64) -> Result<Var, DiffError> {
        self.map(x, Op::Ln { x, eps }, |v| (v + eps).ln())
    }

    /// Softmax of `x / temperature` along the last axis (row-wise for matrices).
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var, DiffError> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(DiffError::InvalidArgument(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let xv = self.val(x);
        if xv.rank() == 0 || xv.cols() == 0 {
            return Err(self.shape_err("softmax", format!("{:?}", xv.shape())));
        }
        let n = xv.cols();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(n) {
            softmax_into(row, temperature, &mut data);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(Op::Softmax { x, temperature }, out)
    }

    /// Max-shifted log-sum-exp along the last axis: `[n] -> []`, `[m, n] -> [m]`.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var, DiffError> {
        let xv = self.val(x);
        if xv.rank() == 0 || xv.cols() == 0 {
            return Err(self.shape_err("logsumexp", format!("{:?}", xv.shape())));
        }
        let data: Vec<f64> = xv.data().chunks(xv.cols()).map(logsumexp).collect();
        let out = if xv.rank() == 1 {
            Tensor::scalar(data[0])
        } else {
            Tensor::vector(data)
        };
        self.push(Op::LogSumExp(x), out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        let s = self.val(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.rank() != 1 || av.shape() != bv.shape() {
            return Err(self.shape_err("dot", format!("{:?} . {:?}", av.shape(), bv.shape())));
        }
        let s = dot(av.data(), bv.data());
        self.push(Op::Dot(a, b), Tensor::scalar(s))
    }

    pub fn sq_norm(&mut self, x: Var) -> Result<Var, DiffError> {
        let s = self.val(x).data().iter().map(|v| v * v).sum();
        self.push(Op::SqNorm(x), Tensor::scalar(s))
    }

    /// `a·b / (max(‖a‖, 1e-12) · max(‖b‖, 1e-12))` for two vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.rank() != 1 || av.shape() != bv.shape() {
            return Err(self.shape_err("cosine", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let c = cosine(av.data(), bv.data());
        self.push(Op::Cosine(a, b), Tensor::scalar(c))
    }

    /// Mean over the row axis: `[m, n] -> [n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, DiffError> {
        let xv = self.val(x);
        if xv.rank() != 2 || xv.rows() == 0 {
            return Err(self.shape_err("mean_rows", format!("{:?}", xv.shape())));
        }
        let (m, n) = (xv.rows(), xv.cols());
        let mut acc = vec![0.0; n];
        for row in xv.data().chunks(n) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += *v;
            }
        }
        let inv = 1.0 / m as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        self.push(Op::MeanRows(x), Tensor::vector(acc))
    }

    /// Concatenation along the feature (last) axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.rank() != bv.rank() || av.rank() == 0 || av.rows() != bv.rows() {
            return Err(self.shape_err(
                "concat_cols",
                format!("{:?} ++ {:?}", av.shape(), bv.shape()),
            ));
        }
        let (p, q) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for r in 0..av.rows() {
            data.extend_from_slice(&av.data()[r * p..(r + 1) * p]);
            data.extend_from_slice(&bv.data()[r * q..(r + 1) * q]);
        }
        let shape = if av.rank() == 1 {
            vec![p + q]
        } else {
            vec![av.rows(), p + q]
        };
        let out = Tensor::new(shape, data)?;
        self.push(Op::ConcatCols(a, b), out)
    }

    /// Stacks matrices (and vectors, as single rows) along the sequence axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(self.shape_err("concat_rows", "no parts".into()));
        }
        let n = self.val(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.val(p);
            if pv.rank() == 0 || pv.cols() != n {
                return Err(self.shape_err(
                    "concat_rows",
                    format!("part {:?} has width != {n}", pv.shape()),
                ));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::matrix(rows, n, data)?;
        self.push(Op::ConcatRows(parts.to_vec()), out)
    }

    /// Clamps elementwise to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, DiffError> {
        self.map(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn clamp01(&mut self, x: Var) -> Result<Var, DiffError> {
        self.clamp(x, 0.0, 1.0)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, DiffError> {
        let xv = self.val(x);
        if xv.rank() != 2 {
            return Err(self.shape_err("transpose", format!("{:?}", xv.shape())));
        }
        let (m, n) = (xv.rows(), xv.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xv.data()[i * n + j];
            }
        }
        let out = Tensor::matrix(n, m, data)?;
        self.push(Op::Transpose(x), out)
    }

    /// Gathers entries of a vector, or rows of a matrix, by index.
    pub fn select(&mut self, x: Var, indices: &[usize]) -> Result<Var, DiffError> {
        let xv = self.val(x);
        let (len, width) = match xv.rank() {
            1 => (xv.cols(), 1),
            2 => (xv.rows(), xv.cols()),
            _ => return Err(self.shape_err("select", "scalar operand".into())),
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(self.shape_err("select", format!("index {bad} out of range {len}")));
        }
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&xv.data()[i * width..(i + 1) * width]);
        }
        let shape = if xv.rank() == 1 {
            vec![indices.len()]
        } else {
            vec![indices.len(), width]
        };
        let out = Tensor::new(shape, data)?;
        self.push(
            Op::Select {
                x,
                indices: indices.to_vec(),
            },
            out,
        )
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var, DiffError> {
        let r = self.select(x, &[i])?;
        let n = self.val(r).cols();
        self.reshape(r, vec![n])
    }

    /// Element `i` of a vector as a scalar.
    pub fn element(&mut self, x: Var, i: usize) -> Result<Var, DiffError> {
        if self.val(x).rank() != 1 {
            return Err(self.shape_err("element", format!("{:?}", self.val(x).shape())));
        }
        let r = self.select(x, &[i])?;
        self.reshape(r, vec![])
    }

    /// Tiles a `[n]` vector into `[m, n]`.
    pub fn repeat_rows(&mut self, x: Var, m: usize) -> Result<Var, DiffError> {
        let xv = self.val(x);
        if xv.rank() != 1 {
            return Err(self.shape_err("repeat_rows", format!("{:?}", xv.shape())));
        }
        let n = xv.cols();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(xv.data());
        }
        let out = Tensor::matrix(m, n, data)?;
        self.push(Op::RepeatRows(x), out)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let out = match self.val(x).clone().reshaped(shape) {
            Ok(t) => t,
            Err(e) => return Err(self.shape_err("reshape", e.to_string())),
        };
        self.push(Op::Reshape(x), out)
    }

    /// Same value, no gradient flows to `x`.
    pub fn stop_grad(&mut self, x: Var) -> Result<Var, DiffError> {
        let out = self.val(x).clone();
        self.push(Op::StopGrad, out)
    }

    /// Reverse-mode gradients of the scalar `loss` w.r.t. every parameter in
    /// the bound store. Parameters that do not reach `loss` get zeros.
    pub fn backward(&self, loss: Var) -> Result<GradientMap, DiffError> {
        if self.nodes.is_empty() {
            return Err(DiffError::NotEvaluated);
        }
        if loss.0 >= self.nodes.len() {
            return Err(DiffError::UnknownNode { node: loss.0 });
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(DiffError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut out = GradientMap::zeros_like(self.params);
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param(id) = node.op {
                out.get_mut(id).add_assign(&g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut send = |v: Var, t: Tensor| accumulate(grads, v, t);
        match &node.op {
            Op::Input | Op::Param(_) | Op::StopGrad => {}
            Op::Matmul { a, b, trans_b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = y.cols();
                if self.wants(*a) {
                    // dA = G · Bᵀ (or G · B when B was used transposed)
                    let da = gemm(g.data(), m, n, false, bv.data(), bv.rows(), bv.cols(), !trans_b);
                    send(*a, Tensor::new(av.shape().to_vec(), da).unwrap());
                }
                if self.wants(*b) {
                    let db = if *trans_b {
                        gemm(g.data(), m, n, true, av.data(), m, k, false)
                    } else {
                        gemm(av.data(), m, k, true, g.data(), m, n, false)
                    };
                    send(*b, Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    send(*a, g.clone());
                }
                if self.wants(*b) {
                    send(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    send(*a, g.clone());
                }
                if self.wants(*b) {
                    send(*b, map_t(g, |v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    send(*a, zip_t(g, self.val(*b), |gv, bv| gv * bv));
                }
                if self.wants(*b) {
                    send(*b, zip_t(g, self.val(*a), |gv, av| gv * av));
                }
            }
            Op::AddRow { x, bias } => {
                if self.wants(*x) {
                    send(*x, g.clone());
                }
                if self.wants(*bias) {
                    send(*bias, Tensor::vector(column_sums(g)));
                }
            }
            Op::ScaleRows { x, scale } => {
                let (xv, sv) = (self.val(*x), self.val(*scale));
                let n = xv.cols();
                if self.wants(*x) {
                    let mut d = g.data().to_vec();
                    for (row, s) in d.chunks_mut(n).zip(sv.data()) {
                        row.iter_mut().for_each(|v| *v *= *s);
                    }
                    send(*x, Tensor::new(xv.shape().to_vec(), d).unwrap());
                }
                if self.wants(*scale) {
                    let d = g
                        .data()
                        .chunks(n)
                        .zip(xv.data().chunks(n))
                        .map(|(gr, xr)| dot(gr, xr))
                        .collect();
                    send(*scale, Tensor::vector(d));
                }
            }
            Op::Affine { x, scale } => send(*x, map_t(g, |v| scale * v)),
            Op::Sigmoid(x) => send(*x, zip_t(g, y, |gv, yv| gv * yv * (1.0 - yv))),
            Op::Tanh(x) => send(*x, zip_t(g, y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Relu(x) => send(*x, zip_t(g, y, |gv, yv| if yv > 0.0 { gv } else { 0.0 })),
            Op::Exp(x) => send(*x, zip_t(g, y, |gv, yv| gv * yv)),
            Op::Ln { x, eps } => send(*x, zip_t(g, self.val(*x), |gv, xv| gv / (xv + eps))),
            Op::Softmax { x, temperature } => {
                let n = y.cols();
                let mut d = Vec::with_capacity(y.numel());
                for (gr, yr) in g.data().chunks(n).zip(y.data().chunks(n)) {
                    let inner = dot(gr, yr);
                    d.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - inner) / temperature));
                }
                send(*x, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::LogSumExp(x) => {
                let xv = self.val(*x);
                let n = xv.cols();
                let mut d = Vec::with_capacity(xv.numel());
                for (row, gv) in xv.data().chunks(n).zip(g.data()) {
                    let before = d.len();
                    softmax_into(row, 1.0, &mut d);
                    d[before..].iter_mut().for_each(|v| *v *= *gv);
                }
                send(*x, Tensor::new(xv.shape().to_vec(), d).unwrap());
            }
            Op::Sum(x) => {
                let xv = self.val(*x);
                send(*x, Tensor::full(xv.shape(), g.item()));
            }
            Op::Dot(a, b) => {
                let gs = g.item();
                if self.wants(*a) {
                    send(*a, map_t(self.val(*b), |v| gs * v));
                }
                if self.wants(*b) {
                    send(*b, map_t(self.val(*a), |v| gs * v));
                }
            }
            Op::SqNorm(x) => {
                let gs = g.item();
                send(*x, map_t(self.val(*x), |v| 2.0 * gs * v));
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let gs = g.item();
                let (da, db) = cosine_grad(av.data(), bv.data());
                if self.wants(*a) {
                    send(*a, Tensor::vector(da.into_iter().map(|v| gs * v).collect()));
                }
                if self.wants(*b) {
                    send(*b, Tensor::vector(db.into_iter().map(|v| gs * v).collect()));
                }
            }
            Op::MeanRows(x) => {
                let xv = self.val(*x);
                let inv = 1.0 / xv.rows() as f64;
                let mut d = Vec::with_capacity(xv.numel());
                for _ in 0..xv.rows() {
                    d.extend(g.data().iter().map(|v| v * inv));
                }
                send(*x, Tensor::new(xv.shape().to_vec(), d).unwrap());
            }
            Op::ConcatCols(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (p, q) = (av.cols(), bv.cols());
                let rows = av.rows();
                let mut da = Vec::with_capacity(av.numel());
                let mut db = Vec::with_capacity(bv.numel());
                for r in 0..rows {
                    let row = &g.data()[r * (p + q)..(r + 1) * (p + q)];
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                if self.wants(*a) {
                    send(*a, Tensor::new(av.shape().to_vec(), da).unwrap());
                }
                if self.wants(*b) {
                    send(*b, Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.val(p);
                    let len = pv.numel();
                    if self.wants(p) {
                        let d = g.data()[offset..offset + len].to_vec();
                        send(p, Tensor::new(pv.shape().to_vec(), d).unwrap());
                    }
                    offset += len;
                }
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                send(
                    *x,
                    zip_t(g, self.val(*x), |gv, xv| {
                        if xv >= lo && xv <= hi {
                            gv
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Transpose(x) => {
                let (m, n) = (g.rows(), g.cols());
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[j * m + i] = g.data()[i * n + j];
                    }
                }
                send(*x, Tensor::matrix(n, m, d).unwrap());
            }
            Op::Select { x, indices } => {
                let xv = self.val(*x);
                let width = if xv.rank() == 1 { 1 } else { xv.cols() };
                let mut d = xv.same_shape_zeros();
                for (slot, &i) in indices.iter().enumerate() {
                    let src = &g.data()[slot * width..(slot + 1) * width];
                    for (t, s) in d.data_mut()[i * width..(i + 1) * width].iter_mut().zip(src) {
                        *t += *s;
                    }
                }
                send(*x, d);
            }
            Op::RepeatRows(x) => send(*x, Tensor::vector(column_sums(g))),
            Op::Reshape(x) => {
                let shape = self.val(*x).shape().to_vec();
                send(*x, g.clone().reshaped(shape).unwrap());
            }
        }
    }
}

fn inputs_of(op: &Op) -> Vec<Var> {
    match op {
        Op::Input | Op::Param(_) | Op::StopGrad => vec![],
        Op::Matmul { a, b, .. }
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Dot(a, b)
        | Op::Cosine(a, b)
        | Op::ConcatCols(a, b) => vec![*a, *b],
        Op::AddRow { x, bias } => vec![*x, *bias],
        Op::ScaleRows { x, scale } => vec![*x, *scale],
        Op::Affine { x, .. }
        | Op::Ln { x, .. }
        | Op::Softmax { x, .. }
        | Op::Clamp { x, .. }
        | Op::Select { x, .. } => vec![*x],
        Op::Sigmoid(x)
        | Op::Tanh(x)
        | Op::Relu(x)
        | Op::Exp(x)
        | Op::LogSumExp(x)
        | Op::Sum(x)
        | Op::SqNorm(x)
        | Op::MeanRows(x)
        | Op::Transpose(x)
        | Op::RepeatRows(x)
        | Op::Reshape(x) => vec![*x],
        Op::ConcatRows(parts) => parts.clone(),
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn map_t(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let d = t.data().iter().map(|v| f(*v)).collect();
    Tensor::new(t.shape().to_vec(), d).unwrap()
}

fn zip_t(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let d = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), d).unwrap()
}

fn column_sums(g: &Tensor) -> Vec<f64> {
    let n = g.cols();
    let mut acc = vec![0.0; n];
    for row in g.data().chunks(n) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += *v;
        }
    }
    acc
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a).max(COSINE_EPS) * norm(b).max(COSINE_EPS))
}

fn cosine_grad(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    let (da_, db_) = (na.max(COSINE_EPS), nb.max(COSINE_EPS));
    let ab = dot(a, b);
    let denom = da_ * db_;
    // d/da [ab / (max(|a|,e) max(|b|,e))] = b/denom - ab/(denom |a|) * a/|a| while |a| > e
    let ga = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| {
            let radial = if na > COSINE_EPS { ab / (denom * da_) * ai / na } else { 0.0 };
            bi / denom - radial
        })
        .collect();
    let gb = b
        .iter()
        .zip(a)
        .map(|(bi, ai)| {
            let radial = if nb > COSINE_EPS { ab / (denom * db_) * bi / nb } else { 0.0 };
            ai / denom - radial
        })
        .collect();
    (ga, gb)
}

/// Overflow-safe `ln Σ exp(x_i)`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Appends `softmax(row / temperature)` to `out`.
pub fn softmax_into(row: &[f64], temperature: f64, out: &mut Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut total = 0.0;
    for v in row {
        let e = ((v - max) / temperature).exp();
        total += e;
        out.push(e);
    }
    out[start..].iter_mut().for_each(|v| *v /= total);
}

pub fn softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(row.len());
    softmax_into(row, temperature, &mut out);
    out
}
