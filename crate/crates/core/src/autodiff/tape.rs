//! Operation recording and reverse-mode differentiation.
//!
//! Every builder method on [`Tape`] computes its result eagerly, appends a
//! node holding the value plus whatever the gradient rule needs, and returns a
//! [`Var`] handle. Node indices are assigned in creation order, so inputs
//! always precede the operations that consume them and a single reverse sweep
//! visits each node once.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::{check_finite, numel, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise non-linearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Gelu => kernels::gelu(x),
            Activation::Relu => x.max(0.0),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Gelu => kernels::gelu_grad(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, b: Var, n: usize },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    ScalarMul { s: Var, a: Var },
    Act { a: Var, kind: Activation },
    Log { a: Var },
    Softmax { a: Var, outer: usize, axis_len: usize, inner: usize },
    MaskedSoftmax { a: Var, cols: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, cols: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv1d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom, cols: Vec<f64> },
    GlobalAvgPool { x: Var, c: usize, l: usize },
    MeanRows { x: Var, rows: usize, cols: usize },
    Dropout { x: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64>, k: usize },
    GatherRows { table: Var, ids: Vec<usize>, cols: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var>, rows: usize },
    SliceRows { a: Var, start: usize, cols: usize },
    SliceCols { a: Var, start: usize, cols_in: usize, rows: usize },
    Sum { a: Var },
    Mean { a: Var },
    Reshape { a: Var },
    Select { a: Var, idx: Vec<usize> },
}

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Vec<f64>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf recorded with [`Tape::leaf`] or [`Tape::param`].
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    /// Parameter gradients, ordered by parameter id.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }
}

/// Recording of one forward computation.
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: RefCell<Vec<Node>>,
    param_vars: RefCell<HashMap<ParamId, Var>>,
    grad_enabled: bool,
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape<'static> {
    /// A tape without parameters, for free-standing tensors.
    pub fn new() -> Self {
        Tape {
            store: None,
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }
}

impl<'p> Tape<'p> {
    /// A tape that can read (but never modify) the parameters in `store`.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape {
            store: Some(store),
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// Like [`Tape::with_params`] but nothing is marked for differentiation.
    pub fn inference(store: &'p ParamStore) -> Self {
        Tape {
            grad_enabled: false,
            ..Self::with_params(store)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn val<'n>(&'n self, nodes: &'n [Node], v: Var) -> &'n [f64] {
        match &nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self
                .store
                .expect("param node without store")
                .get(*id)
                .data(),
        }
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        check_finite(&data, op_name(&op))?;
        debug_assert_eq!(numel(&shape), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        self.val(&nodes, v).to_vec()
    }

    /// The recorded value as a fresh tensor (no gradient attached).
    pub fn tensor(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        Tensor::new(nodes[v.0].shape.clone(), self.val(&nodes, v).to_vec())
            .expect("tape values are valid")
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        let nodes = self.nodes.borrow();
        let d = self.val(&nodes, v);
        if d.len() != 1 {
            return Err(dim_err(format!("item() on shape {:?}", nodes[v.0].shape)));
        }
        Ok(d[0])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let nodes = self.nodes.borrow();
        match nodes[v.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            s => Err(dim_err(format!("{what}: expected a matrix, got shape {s:?}"))),
        }
    }

    // ---- leaves ----------------------------------------------------------

    /// Records a copy of `t`; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Value::Owned(t.data().to_vec()),
            op: Op::Leaf,
            needs_grad: t.requires_grad() && self.grad_enabled,
        });
        Var(nodes.len() - 1)
    }

    /// Records a non-differentiable constant.
    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(dim_err(format!(
                "constant of shape {shape:?} with {} values",
                data.len()
            )));
        }
        self.push(shape, data, Op::Leaf, false)
    }

    /// References a parameter of the attached store. Repeated calls return the same handle.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.borrow().get(&id) {
            return *v;
        }
        let store = self.store.expect("Tape::param needs a ParamStore");
        let t = store.get(id);
        let var = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                shape: t.shape().to_vec(),
                value: Value::Param(id),
                op: Op::Leaf,
                needs_grad: t.requires_grad() && self.grad_enabled,
            });
            Var(nodes.len() - 1)
        };
        self.param_vars.borrow_mut().insert(id, var);
        var
    }

    // ---- linear algebra ----------------------------------------------------

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(dim_err(format!(
                "matmul: {:?} × {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.nodes.borrow();
            kernels::matmul_acc(self.val(&nodes, a), self.val(&nodes, b), &mut out, m, k, n);
        }
        let ng = self.needs(&[a, b]);
        self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, ng)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt lhs")?;
        let (n, k2) = self.dims2(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(dim_err(format!(
                "matmul_nt: {:?} × {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.nodes.borrow();
            kernels::matmul_nt_acc(self.val(&nodes, a), self.val(&nodes, b), &mut out, m, k, n);
        }
        let ng = self.needs(&[a, b]);
        self.push(vec![m, n], out, Op::MatMulNt { a, b, m, k, n }, ng)
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "transpose")?;
        let out = {
            let nodes = self.nodes.borrow();
            kernels::transpose(self.val(&nodes, a), rows, cols)
        };
        let ng = self.needs(&[a]);
        self.push(vec![cols, rows], out, Op::Transpose { a, rows, cols }, ng)
    }

    // ---- elementwise -----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        self.val(&nodes, a)
            .iter()
            .zip(self.val(&nodes, b))
            .map(|(x, y)| f(*x, *y))
            .collect()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        self.val(&nodes, a).iter().map(|x| f(*x)).collect()
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.needs(&[a, b]);
        self.push(shape, out, Op::Add { a, b }, ng)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.needs(&[a, b]);
        self.push(shape, out, Op::Sub { a, b }, ng)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.needs(&[a, b]);
        self.push(shape, out, Op::Mul { a, b }, ng)
    }

    /// Adds the vector `b` (length n) to every row of `a` (m×n).
    pub fn add_row(&self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        let nb = numel(&self.shape(b));
        if nb != n {
            return Err(dim_err(format!(
                "add_row: row width {n}, bias length {nb}"
            )));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (self.val(&nodes, a), self.val(&nodes, b));
            let mut out = av.to_vec();
            for i in 0..m {
                for (o, bj) in out[i * n..(i + 1) * n].iter_mut().zip(bv) {
                    *o += bj;
                }
            }
            out
        };
        let ng = self.needs(&[a, b]);
        self.push(self.shape(a), out, Op::AddRow { a, b, n }, ng)
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let out = self.map(a, |x| c * x);
        let ng = self.needs(&[a]);
        self.push(self.shape(a), out, Op::Scale { a, c }, ng)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let out = self.map(a, |x| x + c);
        let ng = self.needs(&[a]);
        self.push(self.shape(a), out, Op::AddScalar { a }, ng)
    }

    /// `s · a` where `s` is a one-element value on the tape.
    pub fn scalar_mul(&self, s: Var, a: Var) -> Result<Var> {
        let sv = self.item(s)?;
        let out = self.map(a, |x| sv * x);
        let ng = self.needs(&[s, a]);
        self.push(self.shape(a), out, Op::ScalarMul { s, a }, ng)
    }

    pub fn activation(&self, a: Var, kind: Activation) -> Result<Var> {
        let out = self.map(a, |x| kind.apply(x));
        let ng = self.needs(&[a]);
        self.push(self.shape(a), out, Op::Act { a, kind }, ng)
    }

    /// Natural logarithm; inputs must be strictly positive.
    pub fn log(&self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::ln);
        let ng = self.needs(&[a]);
        self.push(self.shape(a), out, Op::Log { a }, ng)
    }

    // ---- normalisation ---------------------------------------------------

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len().max(1) {
            return Err(dim_err(format!(
                "softmax axis {axis} for shape {shape:?}"
            )));
        }
        let (outer, axis_len, inner) = if shape.is_empty() {
            (1, 1, 1)
        } else {
            (
                numel(&shape[..axis]),
                shape[axis],
                numel(&shape[axis + 1..]),
            )
        };
        let out = {
            let nodes = self.nodes.borrow();
            let x = self.val(&nodes, a);
            let mut out = vec![0.0; x.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let idx = |i: usize| o * axis_len * inner + i * inner + j;
                    let mx = (0..axis_len).map(|i| x[idx(i)]).fold(f64::MIN, f64::max);
                    let mut z = 0.0;
                    for i in 0..axis_len {
                        let e = (x[idx(i)] - mx).exp();
                        out[idx(i)] = e;
                        z += e;
                    }
                    for i in 0..axis_len {
                        out[idx(i)] /= z;
                    }
                }
            }
            out
        };
        let ng = self.needs(&[a]);
        self.push(
            shape,
            out,
            Op::Softmax { a, outer, axis_len, inner },
            ng,
        )
    }

    /// Row-wise softmax of an n×m matrix restricted to entries where `mask` is
    /// non-zero. Masked entries get exactly zero weight. Every row needs at
    /// least one permitted entry.
    pub fn masked_softmax(&self, a: Var, mask: &[f64]) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "masked_softmax")?;
        if mask.len() != rows * cols {
            return Err(dim_err(format!(
                "mask of length {} for a {rows}×{cols} score matrix",
                mask.len()
            )));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let x = self.val(&nodes, a);
            let mut out = vec![0.0; x.len()];
            for i in 0..rows {
                let r = i * cols..(i + 1) * cols;
                let (xr, mr) = (&x[r.clone()], &mask[r.clone()]);
                let mx = xr
                    .iter()
                    .zip(mr)
                    .filter(|(_, m)| **m != 0.0)
                    .map(|(v, _)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if mx == f64::NEG_INFINITY {
                    return Err(Error::Contract(format!(
                        "attention row {i} has every key masked"
                    )));
                }
                let or = &mut out[r];
                let mut z = 0.0;
                for j in 0..cols {
                    if mr[j] != 0.0 {
                        or[j] = (xr[j] - mx).exp();
                        z += or[j];
                    }
                }
                or.iter_mut().for_each(|v| *v /= z);
            }
            out
        };
        let ng = self.needs(&[a]);
        self.push(vec![rows, cols], out, Op::MaskedSoftmax { a, cols }, ng)
    }

    /// Per-row layer normalisation of `x: rows×cols` with gain and bias of length `cols`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "layer_norm")?;
        if numel(&self.shape(gamma)) != cols || numel(&self.shape(beta)) != cols {
            return Err(dim_err("layer_norm: gain/bias width mismatch"));
        }
        let (out, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let (xv, g, b) = (
                self.val(&nodes, x),
                self.val(&nodes, gamma),
                self.val(&nodes, beta),
            );
            let mut out = vec![0.0; rows * cols];
            let mut xhat = vec![0.0; rows * cols];
            let mut rstd = vec![0.0; rows];
            for i in 0..rows {
                let r = &xv[i * cols..(i + 1) * cols];
                let mean = r.iter().sum::<f64>() / cols as f64;
                let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let rs = 1.0 / (var + LN_EPS).sqrt();
                rstd[i] = rs;
                for j in 0..cols {
                    let h = (r[j] - mean) * rs;
                    xhat[i * cols + j] = h;
                    out[i * cols + j] = g[j] * h + b[j];
                }
            }
            (out, xhat, rstd)
        };
        let ng = self.needs(&[x, gamma, beta]);
        self.push(
            self.shape(x),
            out,
            Op::LayerNorm { x, gamma, beta, cols, xhat, rstd },
            ng,
        )
    }

    // ---- convolution and pooling -------------------------------------------

    /// Cross-correlation of `x: c_in×L` with `kernels: c_out×c_in×k`, optional
    /// per-channel bias, giving `c_out×L'` with `L' = ⌊(L + 2·padding − k)/stride⌋ + 1`.
    pub fn conv1d(
        &self,
        x: Var,
        kernels_var: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (c_in, len) = self.dims2(x, "conv1d input")?;
        let ks = self.shape(kernels_var);
        let [c_out, kc_in, k] = ks.as_slice() else {
            return Err(dim_err(format!("conv1d kernels must be rank 3, got {ks:?}")));
        };
        let (c_out, k) = (*c_out, *k);
        if *kc_in != c_in {
            return Err(dim_err(format!(
                "conv1d: input has {c_in} channels, kernels expect {kc_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv1d stride must be positive".into()));
        }
        if k > len + 2 * padding {
            return Err(dim_err(format!(
                "conv1d: kernel of length {k} longer than padded input {}",
                len + 2 * padding
            )));
        }
        if let Some(b) = bias {
            if numel(&self.shape(b)) != c_out {
                return Err(dim_err("conv1d bias length must equal output channels"));
            }
        }
        let len_out = (len + 2 * padding - k) / stride + 1;
        let geom = ConvGeom { c_in, len, c_out, k, stride, padding, len_out };
        let (out, cols) = {
            let nodes = self.nodes.borrow();
            let cols = kernels::im2col(self.val(&nodes, x), &geom);
            let mut out = vec![0.0; c_out * len_out];
            kernels::matmul_acc(
                self.val(&nodes, kernels_var),
                &cols,
                &mut out,
                c_out,
                c_in * k,
                len_out,
            );
            if let Some(b) = bias {
                let bv = self.val(&nodes, b);
                for o in 0..c_out {
                    out[o * len_out..(o + 1) * len_out]
                        .iter_mut()
                        .for_each(|v| *v += bv[o]);
                }
            }
            (out, cols)
        };
        let mut deps = vec![x, kernels_var];
        deps.extend(bias);
        let ng = self.needs(&deps);
        self.push(
            vec![c_out, len_out],
            out,
            Op::Conv1d { x, w: kernels_var, bias, geom, cols },
            ng,
        )
    }

    /// Per-channel mean of `x: c×L`, giving a vector of length c.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let (c, l) = match shape.as_slice() {
            [c, l] => (*c, *l),
            s => return Err(dim_err(format!("global_avg_pool expects c×L, got {s:?}"))),
        };
        let out = {
            let nodes = self.nodes.borrow();
            let xv = self.val(&nodes, x);
            (0..c)
                .map(|i| xv[i * l..(i + 1) * l].iter().sum::<f64>() / l as f64)
                .collect()
        };
        let ng = self.needs(&[x]);
        self.push(vec![c], out, Op::GlobalAvgPool { x, c, l }, ng)
    }

    /// Column means of `x: rows×cols`, giving a `1×cols` row.
    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "mean_rows")?;
        let out = {
            let nodes = self.nodes.borrow();
            let xv = self.val(&nodes, x);
            let mut out = vec![0.0; cols];
            for i in 0..rows {
                for (o, v) in out.iter_mut().zip(&xv[i * cols..(i + 1) * cols]) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|v| *v /= rows as f64);
            out
        };
        let ng = self.needs(&[x]);
        self.push(vec![1, cols], out, Op::MeanRows { x, rows, cols }, ng)
    }

    /// Inverted dropout. Outside training (or with `p == 0`) this returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let n = numel(&self.shape(x));
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = {
            let nodes = self.nodes.borrow();
            self.val(&nodes, x)
                .iter()
                .zip(&mask)
                .map(|(v, m)| v * m)
                .collect()
        };
        let ng = self.needs(&[x]);
        self.push(self.shape(x), out, Op::Dropout { x, mask }, ng)
    }

    // ---- losses and reductions -------------------------------------------

    /// Mean over the batch of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (batch, k) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != batch {
            return Err(dim_err(format!(
                "cross_entropy: {batch} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index(format!(
                "target class {t} outside [0, {k})"
            )));
        }
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let x = self.val(&nodes, logits);
            let mut probs = vec![0.0; x.len()];
            let mut loss = 0.0;
            for b in 0..batch {
                let r = &x[b * k..(b + 1) * k];
                let mx = r.iter().copied().fold(f64::MIN, f64::max);
                let z: f64 = r.iter().map(|v| (v - mx).exp()).sum();
                let lse = mx + z.ln();
                loss += lse - r[targets[b]];
                for j in 0..k {
                    probs[b * k + j] = (r[j] - lse).exp();
                }
            }
            (loss / batch as f64, probs)
        };
        let ng = self.needs(&[logits]);
        self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, k },
            ng,
        )
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let ng = self.needs(&[a]);
        self.push(vec![], vec![s], Op::Sum { a }, ng)
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(&[a]);
        self.push(vec![], vec![s], Op::Mean { a }, ng)
    }

    // ---- indexing and layout ---------------------------------------------

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table, "gather_rows")?;
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!(
                "row {bad} outside table of {rows} rows"
            )));
        }
        if ids.is_empty() {
            return Err(dim_err("gather_rows with no ids"));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let t = self.val(&nodes, table);
            let mut out = Vec::with_capacity(ids.len() * cols);
            for &i in ids {
                out.extend_from_slice(&t[i * cols..(i + 1) * cols]);
            }
            out
        };
        let ng = self.needs(&[table]);
        self.push(
            vec![ids.len(), cols],
            out,
            Op::GatherRows { table, ids: ids.to_vec(), cols },
            ng,
        )
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err("concat_rows of nothing"));
        }
        let (_, cols) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(dim_err(format!(
                    "concat_rows: widths {cols} and {c}"
                )));
            }
            rows += r;
        }
        let out = {
            let nodes = self.nodes.borrow();
            parts
                .iter()
                .flat_map(|&p| self.val(&nodes, p).iter().copied())
                .collect()
        };
        let ng = self.needs(parts);
        self.push(
            vec![rows, cols],
            out,
            Op::ConcatRows { parts: parts.to_vec() },
            ng,
        )
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err("concat_cols of nothing"));
        }
        let (rows, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(dim_err(format!(
                    "concat_cols: heights {rows} and {r}"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let out = {
            let nodes = self.nodes.borrow();
            let mut out = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for (&p, &w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&self.val(&nodes, p)[i * w..(i + 1) * w]);
                }
            }
            out
        };
        let ng = self.needs(parts);
        self.push(
            vec![rows, total],
            out,
            Op::ConcatCols { parts: parts.to_vec(), rows },
            ng,
        )
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(dim_err(format!(
                "slice_rows {start}..{} of {rows} rows",
                start + len
            )));
        }
        let out = {
            let nodes = self.nodes.borrow();
            self.val(&nodes, a)[start * cols..(start + len) * cols].to_vec()
        };
        let ng = self.needs(&[a]);
        self.push(vec![len, cols], out, Op::SliceRows { a, start, cols }, ng)
    }

    /// Columns `start..start+width` of a matrix.
    pub fn slice_cols(&self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "slice_cols")?;
        if width == 0 || start + width > cols {
            return Err(dim_err(format!(
                "slice_cols {start}..{} of {cols} columns",
                start + width
            )));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let v = self.val(&nodes, a);
            let mut out = Vec::with_capacity(rows * width);
            for i in 0..rows {
                out.extend_from_slice(&v[i * cols + start..i * cols + start + width]);
            }
            out
        };
        let ng = self.needs(&[a]);
        self.push(
            vec![rows, width],
            out,
            Op::SliceCols { a, start, cols_in: cols, rows },
            ng,
        )
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let old = self.shape(a);
        if numel(&old) != numel(&shape) {
            return Err(dim_err(format!("cannot reshape {old:?} into {shape:?}")));
        }
        let out = self.value(a);
        let ng = self.needs(&[a]);
        self.push(shape, out, Op::Reshape { a }, ng)
    }

    /// Picks flat elements of `a` by index into a vector.
    pub fn select(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if let Some(bad) = idx.iter().find(|&&i| i >= v.len()) {
            return Err(Error::Index(format!(
                "select index {bad} outside {} elements",
                v.len()
            )));
        }
        if idx.is_empty() {
            return Err(dim_err("select with no indices"));
        }
        let out = idx.iter().map(|&i| v[i]).collect();
        let ng = self.needs(&[a]);
        self.push(
            vec![idx.len()],
            out,
            Op::Select { a, idx: idx.to_vec() },
            ng,
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a one-element `loss`.
    ///
    /// The tape is not consumed: calling this twice returns the same gradients,
    /// so accumulating both into a store doubles them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if loss.0 >= nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if numel(&nodes[loss.0].shape) != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let mut acc = |v: Var, delta: Vec<f64>| accumulate(&nodes, &mut grads, v, delta);
            let needs = |v: Var| nodes[v.0].needs_grad;
            let val = |v: Var| self.val(&nodes, v);
            match &node.op {
                Op::Leaf => {
                    match node.value {
                        Value::Param(id) => out.params.push((id, g)),
                        Value::Owned(_) => {
                            out.leaves.insert(i, g);
                        }
                    }
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if needs(*a) {
                        let mut da = vec![0.0; m * k];
                        kernels::matmul_nt_acc(&g, val(*b), &mut da, m, n, k);
                        acc(*a, da);
                    }
                    if needs(*b) {
                        let mut db = vec![0.0; k * n];
                        kernels::matmul_tn_acc(val(*a), &g, &mut db, k, m, n);
                        acc(*b, db);
                    }
                }
                Op::MatMulNt { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if needs(*a) {
                        let mut da = vec![0.0; m * k];
                        kernels::matmul_acc(&g, val(*b), &mut da, m, n, k);
                        acc(*a, da);
                    }
                    if needs(*b) {
                        let mut db = vec![0.0; n * k];
                        kernels::matmul_tn_acc(&g, val(*a), &mut db, n, m, k);
                        acc(*b, db);
                    }
                }
                Op::Transpose { a, rows, cols } => {
                    acc(*a, kernels::transpose(&g, *cols, *rows));
                }
                Op::Add { a, b } => {
                    if needs(*a) {
                        acc(*a, g.clone());
                    }
                    acc(*b, g);
                }
                Op::Sub { a, b } => {
                    if needs(*b) {
                        acc(*b, g.iter().map(|v| -v).collect());
                    }
                    acc(*a, g);
                }
                Op::Mul { a, b } => {
                    if needs(*a) {
                        acc(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                    }
                    if needs(*b) {
                        acc(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                    }
                }
                Op::AddRow { a, b, n } => {
                    if needs(*b) {
                        let mut db = vec![0.0; *n];
                        for row in g.chunks_exact(*n) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        acc(*b, db);
                    }
                    acc(*a, g);
                }
                Op::Scale { a, c } => acc(*a, g.iter().map(|v| c * v).collect()),
                Op::AddScalar { a } => acc(*a, g),
                Op::ScalarMul { s, a } => {
                    let av = val(*a);
                    if needs(*s) {
                        let ds = g.iter().zip(av).map(|(g, x)| g * x).sum();
                        acc(*s, vec![ds]);
                    }
                    if needs(*a) {
                        let sv = val(*s)[0];
                        acc(*a, g.iter().map(|v| sv * v).collect());
                    }
                }
                Op::Act { a, kind } => {
                    let x = val(*a);
                    let y = self.val(&nodes, Var(i));
                    let d = g
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(g, (x, y))| g * kind.derivative(*x, *y))
                        .collect();
                    acc(*a, d);
                }
                Op::Log { a } => {
                    let d = g.iter().zip(val(*a)).map(|(g, x)| g / x).collect();
                    acc(*a, d);
                }
                Op::Softmax { a, outer, axis_len, inner } => {
                    let y = self.val(&nodes, Var(i));
                    let mut d = vec![0.0; y.len()];
                    for o in 0..*outer {
                        for j in 0..*inner {
                            let idx = |t: usize| o * axis_len * inner + t * inner + j;
                            let dotp: f64 = (0..*axis_len).map(|t| g[idx(t)] * y[idx(t)]).sum();
                            for t in 0..*axis_len {
                                d[idx(t)] = y[idx(t)] * (g[idx(t)] - dotp);
                            }
                        }
                    }
                    acc(*a, d);
                }
                Op::MaskedSoftmax { a, cols } => {
                    let y = self.val(&nodes, Var(i));
                    let mut d = vec![0.0; y.len()];
                    for ((dr, yr), gr) in d
                        .chunks_exact_mut(*cols)
                        .zip(y.chunks_exact(*cols))
                        .zip(g.chunks_exact(*cols))
                    {
                        let dotp = kernels::dot(gr, yr);
                        for j in 0..*cols {
                            dr[j] = yr[j] * (gr[j] - dotp);
                        }
                    }
                    acc(*a, d);
                }
                Op::LayerNorm { x, gamma, beta, cols, xhat, rstd } => {
                    let cols = *cols;
                    if needs(*gamma) {
                        let mut dg = vec![0.0; cols];
                        for (gr, hr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                            for j in 0..cols {
                                dg[j] += gr[j] * hr[j];
                            }
                        }
                        acc(*gamma, dg);
                    }
                    if needs(*beta) {
                        let mut db = vec![0.0; cols];
                        for gr in g.chunks_exact(cols) {
                            for (d, v) in db.iter_mut().zip(gr) {
                                *d += v;
                            }
                        }
                        acc(*beta, db);
                    }
                    if needs(*x) {
                        let gam = val(*gamma);
                        let mut dx = vec![0.0; g.len()];
                        for (r, ((dr, gr), hr)) in dx
                            .chunks_exact_mut(cols)
                            .zip(g.chunks_exact(cols))
                            .zip(xhat.chunks_exact(cols))
                            .enumerate()
                        {
                            let dh: Vec<f64> = gr.iter().zip(gam).map(|(g, w)| g * w).collect();
                            let mean_dh = dh.iter().sum::<f64>() / cols as f64;
                            let mean_dhh =
                                dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                            for j in 0..cols {
                                dr[j] = rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                            }
                        }
                        acc(*x, dx);
                    }
                }
                Op::Conv1d { x, w, bias, geom, cols } => {
                    let g_ = geom;
                    let ck = g_.c_in * g_.k;
                    if needs(*w) {
                        let mut dw = vec![0.0; g_.c_out * ck];
                        kernels::matmul_nt_acc(&g, cols, &mut dw, g_.c_out, g_.len_out, ck);
                        acc(*w, dw);
                    }
                    if let Some(b) = bias {
                        if needs(*b) {
                            let db = g
                                .chunks_exact(g_.len_out)
                                .map(|r| r.iter().sum())
                                .collect();
                            acc(*b, db);
                        }
                    }
                    if needs(*x) {
                        let mut dcols = vec![0.0; ck * g_.len_out];
                        kernels::matmul_tn_acc(val(*w), &g, &mut dcols, ck, g_.c_out, g_.len_out);
                        let mut dx = vec![0.0; g_.c_in * g_.len];
                        kernels::col2im_acc(&dcols, g_, &mut dx);
                        acc(*x, dx);
                    }
                }
                Op::GlobalAvgPool { x, c, l } => {
                    let mut dx = vec![0.0; c * l];
                    for ch in 0..*c {
                        dx[ch * l..(ch + 1) * l]
                            .iter_mut()
                            .for_each(|v| *v = g[ch] / *l as f64);
                    }
                    acc(*x, dx);
                }
                Op::MeanRows { x, rows, cols } => {
                    let mut dx = Vec::with_capacity(rows * cols);
                    for _ in 0..*rows {
                        dx.extend(g.iter().map(|v| v / *rows as f64));
                    }
                    acc(*x, dx);
                }
                Op::Dropout { x, mask } => {
                    acc(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect());
                }
                Op::CrossEntropy { logits, targets, probs, k } => {
                    let batch = targets.len() as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * g[0] / batch).collect();
                    for (b, &t) in targets.iter().enumerate() {
                        d[b * k + t] -= g[0] / batch;
                    }
                    acc(*logits, d);
                }
                Op::GatherRows { table, ids, cols } => {
                    let rows = nodes[table.0].shape[0];
                    let mut dt = vec![0.0; rows * cols];
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, v) in dt[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                        {
                            *d += v;
                        }
                    }
                    acc(*table, dt);
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let n = numel(&nodes[p.0].shape);
                        if needs(p) {
                            acc(p, g[off..off + n].to_vec());
                        }
                        off += n;
                    }
                }
                Op::ConcatCols { parts, rows } => {
                    let widths: Vec<usize> = parts
                        .iter()
                        .map(|p| *nodes[p.0].shape.last().unwrap())
                        .collect();
                    let total: usize = widths.iter().sum();
                    let mut start = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        if needs(p) {
                            let mut d = Vec::with_capacity(rows * w);
                            for r in 0..*rows {
                                d.extend_from_slice(&g[r * total + start..r * total + start + w]);
                            }
                            acc(p, d);
                        }
                        start += w;
                    }
                }
                Op::SliceRows { a, start, cols } => {
                    let n = numel(&nodes[a.0].shape);
                    let mut d = vec![0.0; n];
                    d[start * cols..start * cols + g.len()].copy_from_slice(&g);
                    acc(*a, d);
                }
                Op::SliceCols { a, start, cols_in, rows } => {
                    let w = g.len() / rows;
                    let mut d = vec![0.0; rows * cols_in];
                    for r in 0..*rows {
                        d[r * cols_in + start..r * cols_in + start + w]
                            .copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    acc(*a, d);
                }
                Op::Sum { a } => {
                    let n = numel(&nodes[a.0].shape);
                    acc(*a, vec![g[0]; n]);
                }
                Op::Mean { a } => {
                    let n = numel(&nodes[a.0].shape);
                    acc(*a, vec![g[0] / n as f64; n]);
                }
                Op::Reshape { a } => acc(*a, g),
                Op::Select { a, idx } => {
                    let n = numel(&nodes[a.0].shape);
                    let mut d = vec![0.0; n];
                    for (&j, v) in idx.iter().zip(&g) {
                        d[j] += v;
                    }
                    acc(*a, d);
                }
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(&delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::MatMulNt { .. } => "matmul_nt",
        Op::Transpose { .. } => "transpose",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::AddRow { .. } => "add_row",
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::ScalarMul { .. } => "scalar_mul",
        Op::Act { .. } => "activation",
        Op::Log { .. } => "log",
        Op::Softmax { .. } => "softmax",
        Op::MaskedSoftmax { .. } => "masked_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Conv1d { .. } => "conv1d",
        Op::GlobalAvgPool { .. } => "global_avg_pool",
        Op::MeanRows { .. } => "mean_rows",
        Op::Dropout { .. } => "dropout",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::GatherRows { .. } => "gather_rows",
        Op::ConcatRows { .. } => "concat_rows",
        Op::ConcatCols { .. } => "concat_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::Reshape { .. } => "reshape",
        Op::Select { .. } => "select",
    }
}
