//! Reverse-mode gradient tape.
//!
//! Every operation records its output value and enough information to
//! propagate an upstream gradient to its inputs. Parameters are read by
//! reference from a [`ParamStore`]; their gradients come back from
//! [`Tape::backward`] as a [`Gradients`] table.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numcore::tensor::{gemm, Operand, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }
}

/// A user-defined differentiable operation.
///
/// The forward value is computed by the caller and handed to
/// [`Tape::custom`]; the op only has to map the output gradient back onto
/// its inputs.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Arc<Tensor>),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Custom {
        op: Box<dyn CustomOp>,
        inputs: Vec<Var>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::MulConst(..) => "mul_const",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Gelu(_) => "gelu",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(_) => "sum",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    // `None` for parameters, whose values live in the store.
    value: Option<Tensor>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to parameters and constant leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient at a constant leaf (e.g. a detached carried state).
    pub fn leaf(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    /// Adds parameter gradients into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            store.get_mut(*id).grad.add_assign(g);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .unwrap()
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn matrix_dims(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension(format!("{op}: expected a matrix, got {s:?}"))),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
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
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("forward {}", op.name())));
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant)
    }

    /// A gradient-free copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// `a · b`, or `a · bᵀ` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", av)?;
        let (br, bc) = matrix_dims("matmul", bv)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {:?} x {:?}{}",
                av.shape(),
                bv.shape(),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            Operand::new(av.data(), k, false),
            Operand::new(bv.data(), bc, trans_b),
            &mut out,
            false,
        );
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, trans_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let out = zip_map(av, bv, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if av.cols() != bv.len() {
            return Err(Error::Dimension(format!(
                "add_bias: {:?} with bias {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = av.clone();
        let c = av.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % c];
        }
        self.push(out, Op::AddBias(a, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let out = zip_map(av, bv, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Elementwise product with a fixed tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Arc<Tensor>) -> Result<Var> {
        let av = self.value(a);
        same_shape("mul_const", av, &c)?;
        let out = zip_map(av, &c, |x, y| x * y);
        self.push(out, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = map(self.value(a), |x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
        });
        self.push(out, Op::Gelu(a))
    }

    /// Row `i` of the output is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = matrix_dims("gather_rows", av)?;
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            if i >= r {
                return Err(Error::Dimension(format!(
                    "gather_rows: row {i} out of {r}"
                )));
            }
            out.extend_from_slice(av.row(i));
        }
        let t = Tensor::matrix(index.len(), c, out)?;
        self.push(t, Op::GatherRows(a, index))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in &parts {
            let (r, c) = matrix_dims("concat_cols", self.value(p))?;
            if r != rows {
                return Err(Error::Dimension("concat_cols: row counts differ".into()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in &parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, out)?;
        self.push(t, Op::ConcatCols(parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = matrix_dims("slice_cols", av)?;
        if start + len > c {
            return Err(Error::Dimension(format!(
                "slice_cols {start}+{len} beyond {c}"
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av.row(i)[start..start + len]);
        }
        let t = Tensor::matrix(r, len, out)?;
        self.push(t, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in &parts {
            let (r, c) = matrix_dims("concat_rows", self.value(p))?;
            if c != cols {
                return Err(Error::Dimension("concat_rows: widths differ".into()));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::matrix(rows, cols, out)?;
        self.push(t, Op::ConcatRows(parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = matrix_dims("slice_rows", av)?;
        if start + len > r {
            return Err(Error::Dimension(format!(
                "slice_rows {start}+{len} beyond {r}"
            )));
        }
        let t = Tensor::matrix(len, c, av.data()[start * c..(start + len) * c].to_vec())?;
        self.push(t, Op::SliceRows(a, start))
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (r, c) = matrix_dims("layer_norm", xv)?;
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != c || bv.len() != c {
            return Err(Error::Dimension("layer_norm: gain/bias width".into()));
        }
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let xhat = Tensor::matrix(r, c, xhat)?;
        let t = Tensor::matrix(r, c, out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: Vec<Var>, value: Tensor) -> Result<Var> {
        self.push(value, Op::Custom { op, inputs })
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "backward {}",
                    self.nodes[i].op.name()
                )));
            }
            let node = &self.nodes[i];
            let out_val = self.value(Var(i));
            let send = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Constant => {
                    out.leaves.insert(i, g);
                }
                Op::Param(id) => {
                    out.params.insert(*id, g);
                }
                Op::MatMul { a, b, trans_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.rows(), av.cols());
                    let n = out_val.cols();
                    let bc = bv.cols();
                    // da = g · bᵀ (or g · b when the forward used bᵀ)
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        Operand::new(g.data(), n, false),
                        Operand::new(bv.data(), bc, !*trans_b),
                        &mut da,
                        false,
                    );
                    let db = if *trans_b {
                        // db[n×k] = gᵀ · a
                        let mut db = vec![0.0; n * k];
                        gemm(
                            n,
                            m,
                            k,
                            Operand::new(g.data(), n, true),
                            Operand::new(av.data(), k, false),
                            &mut db,
                            false,
                        );
                        Tensor::matrix(n, k, db)?
                    } else {
                        let mut db = vec![0.0; k * n];
                        gemm(
                            k,
                            m,
                            n,
                            Operand::new(av.data(), k, true),
                            Operand::new(g.data(), n, false),
                            &mut db,
                            false,
                        );
                        Tensor::matrix(k, n, db)?
                    };
                    send(*a, Tensor::matrix(m, k, da)?, &mut grads);
                    send(*b, db, &mut grads);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::AddBias(a, bias) => {
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    send(*bias, Tensor::new(shape, gb)?, &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, self.value(*b), |x, y| x * y);
                    let gb = zip_map(&g, self.value(*a), |x, y| x * y);
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::MulConst(a, c) => {
                    send(*a, zip_map(&g, c, |x, y| x * y), &mut grads);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    send(*a, map(&g, |x| x * s), &mut grads);
                }
                Op::Sigmoid(a) => {
                    send(*a, zip_map(&g, out_val, |x, y| x * y * (1.0 - y)), &mut grads);
                }
                Op::Tanh(a) => {
                    send(*a, zip_map(&g, out_val, |x, y| x * (1.0 - y * y)), &mut grads);
                }
                Op::Gelu(a) => {
                    let ga = zip_map(&g, self.value(*a), |gv, x| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    });
                    send(*a, ga, &mut grads);
                }
                Op::GatherRows(a, index) => {
                    let av = self.value(*a);
                    let c = av.cols();
                    let mut ga = Tensor::zeros(av.shape());
                    for (i, &src) in index.iter().enumerate() {
                        let dst = &mut ga.data_mut()[src * c..(src + 1) * c];
                        for (d, v) in dst.iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    send(*a, ga, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let rows = g.rows();
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        send(p, Tensor::matrix(rows, w, gp)?, &mut grads);
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(av.shape());
                    let w = g.cols();
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                    }
                    send(*a, ga, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let r = self.value(p).rows();
                        let gp = g.data()[offset * c..(offset + r) * c].to_vec();
                        offset += r;
                        send(p, Tensor::matrix(r, c, gp)?, &mut grads);
                    }
                }
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let c = av.cols();
                    let mut ga = Tensor::zeros(av.shape());
                    ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    send(*a, ga, &mut grads);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain);
                    let (r, c) = (g.rows(), g.cols());
                    let mut dgain = vec![0.0; c];
                    let mut dbias = vec![0.0; c];
                    let mut dx = Vec::with_capacity(r * c);
                    for i in 0..r {
                        let gr = g.row(i);
                        let hr = xhat.row(i);
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let d = gr[j] * gv.data()[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                            dgain[j] += gr[j] * hr[j];
                            dbias[j] += gr[j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            let d = gr[j] * gv.data()[j];
                            dx.push(rstd[i] * (d - mean_d - hr[j] * mean_dh));
                        }
                    }
                    let gshape = gv.shape().to_vec();
                    let bshape = self.value(*bias).shape().to_vec();
                    send(*x, Tensor::matrix(r, c, dx)?, &mut grads);
                    send(*gain, Tensor::new(gshape, dgain)?, &mut grads);
                    send(*bias, Tensor::new(bshape, dbias)?, &mut grads);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    send(*a, Tensor::full(self.value(*a).shape(), s), &mut grads);
                }
                Op::Custom { op, inputs } => {
                    let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                    let gs = op.backward(&values, out_val, &g)?;
                    if gs.len() != inputs.len() {
                        return Err(Error::Dimension(format!(
                            "{} returned {} gradients for {} inputs",
                            op.name(),
                            gs.len(),
                            inputs.len()
                        )));
                    }
                    for ((v, gi), val) in inputs.iter().zip(gs).zip(&values) {
                        if let Some(gi) = gi {
                            if gi.shape() != val.shape() {
                                return Err(Error::Dimension(format!(
                                    "{} gradient shape mismatch",
                                    op.name()
                                )));
                            }
                            send(*v, gi, &mut grads);
                        }
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

    #[test]
    fn matmul_backward_rules() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = store.add("b", Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
        let mut tape = Tape::new(&store);
        let (va, vb) = (tape.param(a), tape.param(b));
        let c = tape.matmul(va, vb, false).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        // dL/da = 1·bᵀ, dL/db = aᵀ·1
        assert_eq!(g.param(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.param(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn detached_constant_blocks_gradient_to_parameters() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(&[1, 2], 3.0));
        let mut tape = Tape::new(&store);
        let va = tape.param(a);
        let sq = tape.mul(va, va).unwrap();
        let d = tape.detach(sq).unwrap();
        let s = tape.sum(d).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.param(a).is_none());
        assert_eq!(g.leaf(d).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::scalar(f64::MAX)).unwrap();
        let err = tape.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
