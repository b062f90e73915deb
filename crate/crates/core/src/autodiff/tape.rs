//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! A [`Tape`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Every operation appends a node whose inputs already exist on the tape, so
//! the node order is a topological order and the backward sweep is a single
//! reverse walk.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use crate::error::{config_err, contract_err, dim_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            other => Err(config_err!("unknown activation '{other}'")),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Convolution boundary handling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding; the kernel must fit inside the signal.
    Valid,
    /// Zero padding of `K - 1` split as `(K - 1) / 2` left, rest right.
    Same,
}

impl FromStr for Padding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(Padding::Valid),
            "same" => Ok(Padding::Same),
            other => Err(config_err!("unknown padding '{other}'")),
        }
    }
}

impl fmt::Display for Padding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Padding::Valid => "valid",
            Padding::Same => "same",
        })
    }
}

/// Output length of a 1-D convolution, or `None` when the kernel does not fit.
pub fn conv1d_output_len(
    len: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Option<usize> {
    let padded = match padding {
        Padding::Valid => len,
        Padding::Same => len + kernel - 1,
    };
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output length of a 1-D average pool, or `None` when the window does not fit.
pub fn avgpool1d_output_len(len: usize, window: usize, stride: usize) -> Option<usize> {
    if window == 0 || stride == 0 || window > len {
        return None;
    }
    Some((len - window) / stride + 1)
}

// Unpadded index range covered by pooling window `o`.
fn pool_window(
    o: usize,
    stride: usize,
    window: usize,
    pad_left: usize,
    len: usize,
) -> (usize, usize) {
    let start = o * stride;
    let a = start.saturating_sub(pad_left).min(len);
    let b = (start + window).saturating_sub(pad_left).min(len);
    (a, b)
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Linear {
        w: Var,
        x: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Activate(Var, Activation),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    PadEnd(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MeanRows(Var),
    Conv1d {
        signal: Var,
        kernels: Var,
        stride: usize,
        pad_left: usize,
    },
    AvgPool1d {
        x: Var,
        window: usize,
        stride: usize,
        pad_left: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    Dot(Var, Var),
    #[cfg(test)]
    BrokenSquare(Var),
}

struct Node {
    // `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
}

/// The computation record for one forward pass.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
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
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// `W·x + b` for `W: [m×n]`, `x: [n]`, `b: [m]`.
    pub fn linear(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let (wt, xt) = (self.value(w), self.value(x));
        if wt.rank() != 2 || xt.rank() != 1 || wt.shape()[1] != xt.len() {
            return Err(dim_err!(
                "linear: weight {:?} does not conform with input {:?}",
                wt.shape(),
                xt.shape()
            ));
        }
        let (m, n) = (wt.shape()[0], wt.shape()[1]);
        let mut out = vec![0.0; m];
        matvec(wt.data(), m, n, xt.data(), &mut out);
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.shape() != [m] {
                return Err(dim_err!(
                    "linear: bias {:?} does not match output [{m}] of weight {:?}",
                    bt.shape(),
                    wt.shape()
                ));
            }
            for (o, bv) in out.iter_mut().zip(bt.data()) {
                *o += bv;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::Linear { w, x, b }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err!("{what}: shapes {sa:?} and {sb:?} differ"));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::new(at.shape().to_vec(), data).expect("shape preserved");
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|v| f(*v)).collect();
        let out = Tensor::new(xt.shape().to_vec(), data).expect("shape preserved");
        self.push(out, op)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn activate(&mut self, x: Var, kind: Activation) -> Var {
        self.map(x, |v| kind.apply(v), Op::Activate(x, kind))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Relu)
    }

    /// Concatenates rank-1 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(contract_err!("concat of zero tensors"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 1 {
                return Err(dim_err!("concat expects vectors, got {:?}", t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec())))
    }

    /// Contiguous window `[start, start + len)` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 || start + len > t.len() {
            return Err(dim_err!(
                "slice [{start}, {}) out of bounds for {:?}",
                start + len,
                t.shape()
            ));
        }
        let data = t.data()[start..start + len].to_vec();
        Ok(self.push(Tensor::vector(data), Op::Slice { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Zero-extends a vector to length `len`.
    pub fn pad_end(&mut self, x: Var, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 || t.len() > len {
            return Err(dim_err!("cannot pad {:?} to length {len}", t.shape()));
        }
        let mut data = t.data().to_vec();
        data.resize(len, 0.0);
        Ok(self.push(Tensor::vector(data), Op::PadEnd(x)))
    }

    /// Gathers rows `ids` of a 2-D table into a `[ids.len() × cols]` tensor.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(dim_err!("gather expects a matrix, got {:?}", t.shape()));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(contract_err!("row index {i} out of range for {rows} rows"));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean over the rows of a non-empty matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] == 0 {
            return Err(dim_err!(
                "mean_rows expects a non-empty matrix, got {:?}",
                t.shape()
            ));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / rows as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(x)))
    }

    /// Multi-channel 1-D cross-correlation.
    ///
    /// `signal: [C_in × L]`, `kernels: [C_out × C_in × K]`. The kernel is not
    /// flipped; a learned kernel absorbs the difference from true convolution.
    pub fn conv1d(
        &mut self,
        signal: Var,
        kernels: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (st, kt) = (self.value(signal), self.value(kernels));
        if st.rank() != 2 || kt.rank() != 3 || kt.shape()[1] != st.shape()[0] {
            return Err(dim_err!(
                "conv1d: kernels {:?} do not conform with signal {:?}",
                kt.shape(),
                st.shape()
            ));
        }
        if stride == 0 {
            return Err(config_err!("conv1d stride must be positive"));
        }
        let (c_in, len) = (st.shape()[0], st.shape()[1]);
        let (c_out, k) = (kt.shape()[0], kt.shape()[2]);
        let out_len = conv1d_output_len(len, k, stride, padding).ok_or_else(|| {
            dim_err!(
                "conv1d: kernel of width {k} longer than padded signal of length {len} ({padding})"
            )
        })?;
        let pad_left = match padding {
            Padding::Valid => 0,
            Padding::Same => (k - 1) / 2,
        };
        let mut out = vec![0.0; c_out * out_len];
        for co in 0..c_out {
            let orow = &mut out[co * out_len..(co + 1) * out_len];
            for ci in 0..c_in {
                let irow = &st.data()[ci * len..(ci + 1) * len];
                for kk in 0..k {
                    let w = kt.data()[(co * c_in + ci) * k + kk];
                    if w == 0.0 {
                        continue;
                    }
                    let (t0, t1) = valid_range(out_len, len, stride, kk, pad_left);
                    if t0 == t1 {
                        continue;
                    }
                    if stride == 1 {
                        let off = t0 + kk - pad_left;
                        let src = &irow[off..off + (t1 - t0)];
                        for (o, s) in orow[t0..t1].iter_mut().zip(src) {
                            *o += w * s;
                        }
                    } else {
                        for t in t0..t1 {
                            orow[t] += w * irow[t * stride + kk - pad_left];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![c_out, out_len], out)?;
        Ok(self.push(
            out,
            Op::Conv1d {
                signal,
                kernels,
                stride,
                pad_left,
            },
        ))
    }

    /// Per-channel mean over windows of `[C × L]`.
    pub fn avgpool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        self.avgpool1d_padded(x, window, stride, 0, 0)
    }

    /// Average pool over a signal virtually extended with `pad_left` and
    /// `pad_right` zeros. Padding counts towards the window divisor.
    pub fn avgpool1d_padded(
        &mut self,
        x: Var,
        window: usize,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(dim_err!("avgpool1d expects [C × L], got {:?}", t.shape()));
        }
        let (c, len) = (t.shape()[0], t.shape()[1]);
        let out_len =
            avgpool1d_output_len(len + pad_left + pad_right, window, stride).ok_or_else(|| {
                dim_err!("avgpool1d: window {window} / stride {stride} invalid for length {len}")
            })?;
        let inv = 1.0 / window as f64;
        let mut out = vec![0.0; c * out_len];
        for ch in 0..c {
            let irow = &t.data()[ch * len..(ch + 1) * len];
            for (o, slot) in out[ch * out_len..(ch + 1) * out_len].iter_mut().enumerate() {
                let (a, b) = pool_window(o, stride, window, pad_left, len);
                *slot = irow[a..b].iter().sum::<f64>() * inv;
            }
        }
        let out = Tensor::new(vec![c, out_len], out)?;
        Ok(self.push(
            out,
            Op::AvgPool1d {
                x,
                window,
                stride,
                pad_left,
            },
        ))
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// `1 / (1 - rate)`. Outside training, returns `x` unchanged.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(config_err!("dropout rate {rate} outside [0, 1)"));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b)))
    }

    /// Squared error `(pred - target)^2` of a scalar prediction.
    pub fn squared_error(&mut self, pred: Var, target: f64) -> Result<Var> {
        if self.value(pred).len() != 1 {
            return Err(contract_err!("squared_error expects a scalar prediction"));
        }
        let diff = self.add_scalar(pred, -target);
        self.mul(diff, diff)
    }

    #[cfg(test)]
    pub(crate) fn broken_square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::BrokenSquare(x))
    }

    /// Propagates adjoints from the scalar `loss` back to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut grads = Gradients::zeros_like(self.params);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.add(*id, &g),
                Op::Linear { w, x, b } => {
                    let (wt, xt) = (self.value(*w), self.value(*x));
                    let (m, n) = (wt.shape()[0], wt.shape()[1]);
                    {
                        let gw = slot(&mut adj, *w, m * n);
                        for r in 0..m {
                            let gr = g[r];
                            if gr == 0.0 {
                                continue;
                            }
                            for (dst, xv) in gw[r * n..(r + 1) * n].iter_mut().zip(xt.data()) {
                                *dst += gr * xv;
                            }
                        }
                    }
                    {
                        let gx = slot(&mut adj, *x, n);
                        for (&gr, row) in g.iter().zip(wt.data().chunks_exact(n)) {
                            if gr == 0.0 {
                                continue;
                            }
                            for (dst, wv) in gx.iter_mut().zip(row) {
                                *dst += gr * wv;
                            }
                        }
                    }
                    if let Some(b) = b {
                        add_into(slot(&mut adj, *b, m), &g);
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut adj, *a, g.len()), &g);
                    add_into(slot(&mut adj, *b, g.len()), &g);
                }
                Op::Sub(a, b) => {
                    add_into(slot(&mut adj, *a, g.len()), &g);
                    for (d, v) in slot(&mut adj, *b, g.len()).iter_mut().zip(&g) {
                        *d -= v;
                    }
                }
                Op::Mul(a, b) => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    for ((d, v), bv) in slot(&mut adj, *a, g.len())
                        .iter_mut()
                        .zip(&g)
                        .zip(bt.data())
                    {
                        *d += v * bv;
                    }
                    for ((d, v), av) in slot(&mut adj, *b, g.len())
                        .iter_mut()
                        .zip(&g)
                        .zip(at.data())
                    {
                        *d += v * av;
                    }
                }
                Op::Scale(x, f) => {
                    for (d, v) in slot(&mut adj, *x, g.len()).iter_mut().zip(&g) {
                        *d += v * f;
                    }
                }
                Op::AddScalar(x) => add_into(slot(&mut adj, *x, g.len()), &g),
                Op::Activate(x, kind) => {
                    let xt = self.value(*x);
                    let yt = node.value.as_ref().expect("op nodes own values");
                    let dst = slot(&mut adj, *x, g.len());
                    for (((d, v), xv), yv) in dst.iter_mut().zip(&g).zip(xt.data()).zip(yt.data()) {
                        *d += v * kind.derivative(*xv, *yv);
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        add_into(slot(&mut adj, *p, n), &g[off..off + n]);
                        off += n;
                    }
                }
                Op::Slice { x, start } => {
                    let n = self.value(*x).len();
                    add_into(&mut slot(&mut adj, *x, n)[*start..*start + g.len()], &g);
                }
                Op::Reshape(x) => add_into(slot(&mut adj, *x, g.len()), &g),
                Op::PadEnd(x) => {
                    let n = self.value(*x).len();
                    add_into(slot(&mut adj, *x, n), &g[..n]);
                }
                Op::Gather { table, ids } => {
                    let tt = self.value(*table);
                    let cols = tt.shape()[1];
                    let dst = slot(&mut adj, *table, tt.len());
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(
                            &mut dst[id * cols..(id + 1) * cols],
                            &g[r * cols..(r + 1) * cols],
                        );
                    }
                }
                Op::MeanRows(x) => {
                    let xt = self.value(*x);
                    let (rows, cols) = (xt.shape()[0], xt.shape()[1]);
                    let inv = 1.0 / rows as f64;
                    let dst = slot(&mut adj, *x, rows * cols);
                    for r in 0..rows {
                        for (d, v) in dst[r * cols..(r + 1) * cols].iter_mut().zip(&g) {
                            *d += v * inv;
                        }
                    }
                }
                Op::Conv1d {
                    signal,
                    kernels,
                    stride,
                    pad_left,
                } => {
                    let (st, kt) = (self.value(*signal), self.value(*kernels));
                    let (c_in, len) = (st.shape()[0], st.shape()[1]);
                    let (c_out, k) = (kt.shape()[0], kt.shape()[2]);
                    let out_len = g.len() / c_out;
                    let (stride, pad_left) = (*stride, *pad_left);
                    {
                        let gk = slot(&mut adj, *kernels, kt.len());
                        for co in 0..c_out {
                            let grow = &g[co * out_len..(co + 1) * out_len];
                            for ci in 0..c_in {
                                let irow = &st.data()[ci * len..(ci + 1) * len];
                                for kk in 0..k {
                                    let (t0, t1) = valid_range(out_len, len, stride, kk, pad_left);
                                    if t0 == t1 {
                                        continue;
                                    }
                                    let acc = if stride == 1 {
                                        let off = t0 + kk - pad_left;
                                        dot_lanes(&grow[t0..t1], &irow[off..off + (t1 - t0)])
                                    } else {
                                        (t0..t1)
                                            .map(|t| grow[t] * irow[t * stride + kk - pad_left])
                                            .sum()
                                    };
                                    gk[(co * c_in + ci) * k + kk] += acc;
                                }
                            }
                        }
                    }
                    let gs = slot(&mut adj, *signal, st.len());
                    for co in 0..c_out {
                        let grow = &g[co * out_len..(co + 1) * out_len];
                        for ci in 0..c_in {
                            let drow = &mut gs[ci * len..(ci + 1) * len];
                            for kk in 0..k {
                                let w = kt.data()[(co * c_in + ci) * k + kk];
                                if w == 0.0 {
                                    continue;
                                }
                                let (t0, t1) = valid_range(out_len, len, stride, kk, pad_left);
                                if t0 == t1 {
                                    continue;
                                }
                                if stride == 1 {
                                    let off = t0 + kk - pad_left;
                                    for (d, gv) in
                                        drow[off..off + (t1 - t0)].iter_mut().zip(&grow[t0..t1])
                                    {
                                        *d += w * gv;
                                    }
                                } else {
                                    for t in t0..t1 {
                                        drow[t * stride + kk - pad_left] += w * grow[t];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::AvgPool1d {
                    x,
                    window,
                    stride,
                    pad_left,
                } => {
                    let xt = self.value(*x);
                    let (c, len) = (xt.shape()[0], xt.shape()[1]);
                    let out_len = g.len() / c;
                    let inv = 1.0 / *window as f64;
                    let dst = slot(&mut adj, *x, c * len);
                    for ch in 0..c {
                        let drow = &mut dst[ch * len..(ch + 1) * len];
                        for o in 0..out_len {
                            let gv = g[ch * out_len + o] * inv;
                            let (a, b) = pool_window(o, *stride, *window, *pad_left, len);
                            drow[a..b].iter_mut().for_each(|d| *d += gv);
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    for ((d, v), m) in slot(&mut adj, *x, g.len()).iter_mut().zip(&g).zip(mask) {
                        *d += v * m;
                    }
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    slot(&mut adj, *x, n).iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Dot(a, b) => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    for (d, bv) in slot(&mut adj, *a, at.len()).iter_mut().zip(bt.data()) {
                        *d += g[0] * bv;
                    }
                    for (d, av) in slot(&mut adj, *b, bt.len()).iter_mut().zip(at.data()) {
                        *d += g[0] * av;
                    }
                }
                #[cfg(test)]
                Op::BrokenSquare(x) => {
                    // Deliberately wrong adjoint (x instead of 2x) for negative controls.
                    let xt = self.value(*x);
                    for ((d, v), xv) in slot(&mut adj, *x, g.len())
                        .iter_mut()
                        .zip(&g)
                        .zip(xt.data())
                    {
                        *d += v * xv;
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

// Dot product over eight independent partial sums, which vectorizes.
fn dot_lanes(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    lanes.iter().sum::<f64>() + tail
}

/// Output positions `[t0, t1)` whose input index `t * stride + kk - pad_left`
/// lands inside `[0, len)`.
fn valid_range(
    out_len: usize,
    len: usize,
    stride: usize,
    kk: usize,
    pad_left: usize,
) -> (usize, usize) {
    let t0 = if pad_left > kk {
        (pad_left - kk).div_ceil(stride)
    } else {
        0
    };
    // t * stride + kk - pad_left <= len - 1
    let limit = len - 1 + pad_left;
    let t1 = if limit < kk {
        0
    } else {
        ((limit - kk) / stride + 1).min(out_len)
    };
    (t0.min(t1), t1)
}

/// Row-major `out = W·x` for `W: [m×n]`.
pub fn matvec(w: &[f64], m: usize, n: usize, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate().take(m) {
        *o = w[r * n..(r + 1) * n]
            .iter()
            .zip(x)
            .map(|(a, b)| a * b)
            .sum();
    }
}

/// Per-parameter gradients produced by one backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    values: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        let shapes = store
            .iter()
            .map(|(_, p)| p.value().shape().to_vec())
            .collect();
        Self {
            shapes,
            values: vec![None; store.len()],
        }
    }

    fn add(&mut self, id: ParamId, g: &[f64]) {
        let dst = self.values[id.0].get_or_insert_with(|| vec![0.0; g.len()]);
        add_into(dst, g);
    }

    /// Gradient for `id`; zeros when the loss does not depend on it.
    pub fn get(&self, id: ParamId) -> Tensor {
        let shape = self.shapes[id.0].clone();
        match &self.values[id.0] {
            Some(v) => Tensor::new(shape, v.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn raw(&self, id: ParamId) -> Option<&[f64]> {
        self.values[id.0].as_deref()
    }

    pub fn raw_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        let n = self.shapes[id.0].iter().product();
        self.values[id.0].get_or_insert_with(|| vec![0.0; n])
    }

    /// Adds `scale * self` into every parameter's stored gradient.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) {
        for (i, g) in self.values.iter().enumerate() {
            let Some(g) = g else { continue };
            let (_, grad) = store.get_mut(ParamId(i)).parts_mut();
            for (d, v) in grad.data_mut().iter_mut().zip(g) {
                *d += scale * v;
            }
        }
    }

    /// Elementwise sum of two gradient sets over the same store.
    pub fn merged(&self, other: &Gradients) -> Gradients {
        let mut out = self.clone();
        for (i, g) in other.values.iter().enumerate() {
            if let Some(g) = g {
                out.add(ParamId(i), g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, t)| store.add(n, t.clone()).unwrap())
            .collect();
        (store, ids)
    }

    #[test]
    fn linear_identity_and_hand_values() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let eye = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let zero = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::vector(vec![3.0, -1.0]));
        let y = tape.linear(eye, x, Some(zero)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -1.0]);

        let w = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let ones = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let y = tape.linear(w, ones, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 8.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let w = tape.constant(Tensor::zeros(&[2, 3]));
        let x = tape.constant(Tensor::zeros(&[2]));
        let err = tape.linear(w, x, None).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn activations_at_reference_points() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let z = tape.constant(Tensor::vector(vec![0.0]));
        let t = tape.tanh(z);
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(t).data(), &[0.0]);
        assert_eq!(tape.value(s).data(), &[0.5]);
        let x = tape.constant(Tensor::vector(vec![-2.0, 3.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 3.0]);
        assert!("softmax".parse::<Activation>().is_err());
        assert_eq!("relu".parse::<Activation>().unwrap(), Activation::Relu);
    }

    #[test]
    fn conv1d_examples() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let sig = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = tape.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap());
        let y = tape.conv1d(sig, k, 1, Padding::Valid).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0, 9.0]);

        let same = tape.conv1d(sig, k, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(same).data(), &[3.0, 6.0, 9.0, 7.0]);

        let short = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.conv1d(short, k, 1, Padding::Valid),
            Err(Error::Dimension(_))
        ));

        let strided = tape.conv1d(sig, k, 2, Padding::Same).unwrap();
        assert_eq!(tape.value(strided).data(), &[3.0, 9.0]);
    }

    #[test]
    fn conv1d_identity_kernel() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let data = vec![0.5, -1.0, 2.0, 7.0, 0.0];
        let sig = tape.constant(Tensor::new(vec![1, 5], data.clone()).unwrap());
        let k = tape.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        for pad in [Padding::Valid, Padding::Same] {
            let y = tape.conv1d(sig, k, 1, pad).unwrap();
            assert_eq!(tape.value(y).data(), &data[..]);
        }
    }

    #[test]
    fn avgpool_examples() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let y = tape.avgpool1d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 6.0]);
        let c = tape.constant(Tensor::new(vec![1, 3], vec![5.0; 3]).unwrap());
        let y = tape.avgpool1d(c, 3, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
        assert!(tape.avgpool1d(x, 0, 1).is_err());
        assert!(tape.avgpool1d(x, 5, 1).is_err());
    }

    #[test]
    fn padded_avgpool_keeps_length_over_stride() {
        let (mut store, ids) = store_with(&[(
            "x",
            Tensor::new(vec![2, 9], (0..18).map(|v| v as f64 * 0.1 - 0.7).collect()).unwrap(),
        )]);
        {
            let mut tape = Tape::new(&store);
            let x = tape.param(ids[0]);
            let y = tape.avgpool1d_padded(x, 4, 2, 1, 1).unwrap();
            assert_eq!(tape.value(y).shape(), &[2, 4]);
            // First window covers one pad zero and x[0..3].
            let expected = (-0.7 + -0.6 + -0.5) / 4.0;
            assert!((tape.value(y).data()[0] - expected).abs() < 1e-12);
        }
        let report = crate::autodiff::finite_diff_check(
            "avgpool1d_padded",
            &mut store,
            |tape| {
                let x = tape.param(ids[0]);
                let y = tape.avgpool1d_padded(x, 4, 2, 1, 1)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            },
            Default::default(),
        )
        .unwrap();
        assert!(report.passed, "{}", report.summary());
    }

    #[test]
    fn same_conv_with_kernel_longer_than_signal() {
        let sig = Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6]).unwrap();
        let ker = Tensor::new(
            vec![2, 2, 7],
            (0..28).map(|v| (v as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let (mut store, ids) = store_with(&[("s", sig.clone()), ("k", ker.clone())]);
        {
            let mut tape = Tape::new(&store);
            let (s, k) = (tape.param(ids[0]), tape.param(ids[1]));
            let y = tape.conv1d(s, k, 1, Padding::Same).unwrap();
            assert_eq!(tape.value(y).shape(), &[2, 3]);
            // Direct definition with pad_left = 3.
            for co in 0..2 {
                for t in 0..3 {
                    let mut want = 0.0;
                    for ci in 0..2 {
                        for kk in 0..7 {
                            let i = t as isize + kk as isize - 3;
                            if (0..3).contains(&i) {
                                want += ker.data()[(co * 2 + ci) * 7 + kk]
                                    * sig.data()[ci * 3 + i as usize];
                            }
                        }
                    }
                    assert!((tape.value(y).data()[co * 3 + t] - want).abs() < 1e-12);
                }
            }
        }
        let report = crate::autodiff::finite_diff_check(
            "conv1d_long_kernel",
            &mut store,
            |tape| {
                let (s, k) = (tape.param(ids[0]), tape.param(ids[1]));
                let y = tape.conv1d(s, k, 1, Padding::Same)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            },
            Default::default(),
        )
        .unwrap();
        assert!(report.passed, "{}", report.summary());
    }

    #[test]
    fn dropout_contract() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::filled(&[10_000], 1.0));
        assert_eq!(tape.dropout(x, 0.0, true, 1).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.9, false, 1).unwrap(), x);
        assert!(tape.dropout(x, 1.0, true, 1).is_err());
        let d = tape.dropout(x, 0.5, true, 42).unwrap();
        let mean = tape.value(d).sum() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
        let dropped = tape.value(d).data().iter().filter(|v| **v == 0.0).count();
        assert!(dropped > 4_000 && dropped < 6_000);
    }

    #[test]
    fn backward_of_sum_of_linear_gives_input_rows() {
        let (store, ids) = store_with(&[(
            "w",
            Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 0.5, 2.0]]).unwrap(),
        )]);
        let mut tape = Tape::new(&store);
        let w = tape.param(ids[0]);
        let x = tape.constant(Tensor::vector(vec![1.5, -2.0, 0.25]));
        let y = tape.linear(w, x, None).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap().get(ids[0]);
        assert_eq!(g.row(0), &[1.5, -2.0, 0.25]);
        assert_eq!(g.row(1), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn unused_and_constant_losses_give_zero_gradients() {
        let (store, ids) = store_with(&[
            ("used", Tensor::vector(vec![1.0, 2.0])),
            ("unused", Tensor::vector(vec![3.0])),
        ]);
        let mut tape = Tape::new(&store);
        let u = tape.param(ids[0]);
        let loss = tape.sum(u);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ids[1]).data(), &[0.0]);

        let mut tape = Tape::new(&store);
        let c = tape.constant(Tensor::scalar(7.0));
        let g = tape.backward(c).unwrap();
        for id in store.ids() {
            assert!(g.get(id).data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let v = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn gather_rows_receive_gradient() {
        let (store, ids) = store_with(&[(
            "table",
            Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        )]);
        let mut tape = Tape::new(&store);
        let t = tape.param(ids[0]);
        let rows = tape.gather(t, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(rows).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum(rows);
        let g = tape.backward(loss).unwrap().get(ids[0]);
        assert_eq!(g.data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(tape.gather(t, &[3]).is_err());
    }
}
