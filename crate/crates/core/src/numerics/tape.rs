//! Define-by-run reverse-mode differentiation.
//!
//! Every forward op appends a node holding its value plus whatever its
//! backward rule needs. A tape is built fresh for each forward pass and
//! discarded afterwards.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use super::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a nonnegative mask enters the attention logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// `mask > 0` scales the logit; `mask == 0` removes the pair from the softmax.
    #[default]
    Exclude,
    /// Logit multiplied by the mask everywhere, zeros included.
    Multiply,
}

impl FromStr for MaskMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exclude" => Ok(Self::Exclude),
            "multiply" => Ok(Self::Multiply),
            other => Err(format!("unknown mask mode `{other}` (expected exclude|multiply)")),
        }
    }
}

/// Seeded inverted-dropout source. A rate of zero disables it.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Self { rate, rng }
    }

    fn factors(&mut self, len: usize) -> Option<Vec<f64>> {
        if self.rate <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.rate);
        Some(
            (0..len)
                .map(|_| if self.rng.gen::<f64>() < self.rate { 0.0 } else { keep })
                .collect(),
        )
    }
}

/// Op identifiers, used for reporting and for backward-rule fault injection in tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    Scale,
    Tanh,
    Sigmoid,
    Gelu,
    Sin,
    Square,
    Softmax,
    LayerNorm,
    Reshape,
    Permute,
    Concat,
    Broadcast,
    Gather,
    Attention,
    Stcb,
    Sum,
    Mean,
    MaeLoss,
    MseLoss,
    Dropout,
}

impl OpKind {
    pub const ALL: [OpKind; 26] = [
        Self::Leaf,
        Self::MatMul,
        Self::AddBias,
        Self::Add,
        Self::Sub,
        Self::Mul,
        Self::Scale,
        Self::Tanh,
        Self::Sigmoid,
        Self::Gelu,
        Self::Sin,
        Self::Square,
        Self::Softmax,
        Self::LayerNorm,
        Self::Reshape,
        Self::Permute,
        Self::Concat,
        Self::Broadcast,
        Self::Gather,
        Self::Attention,
        Self::Stcb,
        Self::Sum,
        Self::Mean,
        Self::MaeLoss,
        Self::MseLoss,
        Self::Dropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Leaf => "leaf",
            Self::MatMul => "matmul",
            Self::AddBias => "add-bias",
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Scale => "scale",
            Self::Tanh => "tanh",
            Self::Sigmoid => "sigmoid",
            Self::Gelu => "gelu",
            Self::Sin => "sin",
            Self::Square => "square",
            Self::Softmax => "softmax",
            Self::LayerNorm => "layer-norm",
            Self::Reshape => "reshape",
            Self::Permute => "permute",
            Self::Concat => "concat",
            Self::Broadcast => "broadcast",
            Self::Gather => "gather",
            Self::Attention => "attention",
            Self::Stcb => "stcb",
            Self::Sum => "sum",
            Self::Mean => "mean",
            Self::MaeLoss => "mae-loss",
            Self::MseLoss => "mse-loss",
            Self::Dropout => "dropout",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown op `{s}`"))
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Sin(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Reshape(Var),
    Permute { x: Var, offsets: Vec<usize> },
    Concat(Vec<Var>),
    Broadcast { x: Var, offsets: Vec<usize> },
    Gather { table: Var, rows: Vec<usize> },
    Attention(Box<AttentionSaved>),
    Stcb { x: Var, tokens: usize },
    Sum(Var),
    Mean(Var),
    MaeLoss { pred: Var, target: Vec<f64> },
    MseLoss { pred: Var, target: Vec<f64> },
    Dropout { x: Var, factors: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Sin(_) => OpKind::Sin,
            Op::Square(_) => OpKind::Square,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Concat(_) => OpKind::Concat,
            Op::Broadcast { .. } => OpKind::Broadcast,
            Op::Gather { .. } => OpKind::Gather,
            Op::Attention(_) => OpKind::Attention,
            Op::Stcb { .. } => OpKind::Stcb,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::MaeLoss { .. } => OpKind::MaeLoss,
            Op::MseLoss { .. } => OpKind::MseLoss,
            Op::Dropout { .. } => OpKind::Dropout,
        }
    }
}

struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    groups: usize,
    seq: usize,
    heads: usize,
    mask: Option<Vec<f64>>,
    mode: MaskMode,
    probs: Vec<f64>,
    drop: Option<Vec<f64>>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Options for the fused multi-head attention op.
pub struct AttentionOpts<'a> {
    pub heads: usize,
    /// `seq × seq` mask shared by every group, or `None` for unmasked attention.
    pub mask: Option<&'a Tensor>,
    pub mode: MaskMode,
    pub dropout: Option<&'a mut Dropout>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the node was not reached.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }
}

fn shape_err(msg: impl Into<String>) -> NumericsError {
    NumericsError::Shape(msg.into())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes the backward rule of `kind` return a deliberately wrong gradient (x1.5).
    /// Only meant for negative-control tests of the gradient checker.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Attention probabilities saved by an attention node, laid out `[groups, heads, seq, seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention(saved) => Some(&saved.probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, NumericsError> {
        let kind = op.kind();
        if !value.is_finite() {
            return Err(NumericsError::NonFinite(format!("output of {kind}")));
        }
        let needs_grad = self.inputs_need_grad(&op);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_need_grad(&self, op: &Op) -> bool {
        let ng = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                ng(a) || ng(b)
            }
            Op::Scale(x, _)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Gelu(x)
            | Op::Sin(x)
            | Op::Square(x)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x) => ng(x),
            Op::Permute { x, .. }
            | Op::Broadcast { x, .. }
            | Op::Stcb { x, .. }
            | Op::Dropout { x, .. } => ng(x),
            Op::MaeLoss { pred, .. } | Op::MseLoss { pred, .. } => ng(pred),
            Op::LayerNorm { x, gain, bias, .. } => ng(x) || ng(gain) || ng(bias),
            Op::Concat(xs) => xs.iter().any(ng),
            Op::Gather { table, .. } => ng(table),
            Op::Attention(s) => ng(&s.q) || ng(&s.k) || ng(&s.v),
        }
    }

    /// `a[.., k] · b[k×n] → [.., n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        let k = *ash.last().unwrap();
        if bsh.len() != 2 || bsh[0] != k {
            return Err(shape_err(format!("matmul inner extents differ: {ash:?} x {bsh:?}")));
        }
        let n = bsh[1];
        let m = self.value(a).len() / k;
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let mut shape = ash.to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let c = self.value(x).last_dim();
        if self.value(b).len() != c {
            return Err(shape_err(format!(
                "bias {:?} does not match last axis of {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::AddBias(x, b))
    }

    /// `x · w (+ b)` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumericsError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, NumericsError> {
        let out = self.value(x).map(f);
        self.push(out, op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn sin(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(x, f64::sin, Op::Sin(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = super::tensor::softmax_lastdim(self.value(x))?;
        self.push(out, Op::Softmax(x))
    }

    /// Layer normalization over the last axis (biased variance, eps 1e-5), then `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let c = self.value(x).last_dim();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(shape_err(format!(
                "layer-norm affine params must have {c} entries, got {:?} and {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xs.len() / c;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(x).reshape(shape)?;
        self.push(t, Op::Reshape(x))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, NumericsError> {
        let in_shape = self.shape(x).to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err(format!("invalid permutation {perm:?} for shape {in_shape:?}")));
        }
        let in_strides = strides(&in_shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let offsets = gather_offsets(&out_shape, &src_strides);
        let src = self.value(x).data();
        let out = offsets.iter().map(|&o| src[o]).collect();
        self.push(Tensor::from_parts(out_shape, out), Op::Permute { x, offsets })
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var, NumericsError> {
        let first = self.shape(xs[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(shape_err(format!("concat shapes disagree: {first:?} vs {s:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = self.value(xs[0]).len() / widths[0];
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        self.push(Tensor::from_parts(shape, out), Op::Concat(xs.to_vec()))
    }

    /// Broadcasts `x` to `shape`; `x` must have the same rank with extents equal or 1.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let in_shape = self.shape(x).to_vec();
        if in_shape.len() != shape.len()
            || in_shape.iter().zip(shape).any(|(&a, &b)| a != b && a != 1)
        {
            return Err(shape_err(format!("cannot broadcast {in_shape:?} to {shape:?}")));
        }
        let mut st = strides(&in_shape);
        for (s, &e) in st.iter_mut().zip(&in_shape) {
            if e == 1 {
                *s = 0;
            }
        }
        let offsets = gather_offsets(shape, &st);
        let src = self.value(x).data();
        let out = offsets.iter().map(|&o| src[o]).collect();
        self.push(Tensor::from_parts(shape.to_vec(), out), Op::Broadcast { x, offsets })
    }

    /// Row lookup: `table[R×C]` indexed by `rows` gives `[rows.len() × C]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let [r, c] = self.value(table).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(NumericsError::Input(format!("row index {bad} out of range for table with {r} rows")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(
            Tensor::from_parts(vec![rows.len(), c], out),
            Op::Gather { table, rows: rows.to_vec() },
        )
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[groups, seq, width]` with `width = heads * head_dim`.
    /// Each group attends independently; heads occupy contiguous channel blocks.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        opts: AttentionOpts<'_>,
    ) -> Result<Var, NumericsError> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 || self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(shape_err(format!(
                "attention expects equal [groups, seq, width] inputs, got {:?} {:?} {:?}",
                shape,
                self.shape(k),
                self.shape(v)
            )));
        }
        let (groups, seq, width) = (shape[0], shape[1], shape[2]);
        let heads = opts.heads;
        if heads == 0 || width % heads != 0 {
            return Err(NumericsError::Config(format!("width {width} not divisible by {heads} heads")));
        }
        if let Some(m) = opts.mask {
            if m.shape() != [seq, seq] {
                return Err(shape_err(format!("mask {:?} does not match seq {seq}", m.shape())));
            }
            if m.data().iter().any(|&x| x < 0.0 || !x.is_finite()) {
                return Err(NumericsError::Input("attention mask must be finite and nonnegative".into()));
            }
        }
        let mask = opts.mask.map(|m| m.data().to_vec());
        let drop = opts.dropout.and_then(|d| d.factors(groups * heads * seq * seq));
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            [groups, seq, width, heads],
            mask.as_deref(),
            opts.mode,
            drop.as_deref(),
        );
        let saved = AttentionSaved { q, k, v, groups, seq, heads, mask, mode: opts.mode, probs, drop };
        self.push(Tensor::from_parts(shape, out), Op::Attention(Box::new(saved)))
    }

    /// Blends every token with the mean over the token axis (second to last): `(z_i + mean)/2`.
    pub fn stcb(&mut self, x: Var) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err(format!("stcb needs [.., tokens, channels], got {shape:?}")));
        }
        let out = stcb_forward(self.value(x).data(), &shape);
        let tokens = shape[shape.len() - 2];
        self.push(Tensor::from_parts(shape, out), Op::Stcb { x, tokens })
    }

    pub fn dropout(&mut self, x: Var, dropout: Option<&mut Dropout>) -> Result<Var, NumericsError> {
        let Some(factors) = dropout.and_then(|d| d.factors(self.value(x).len())) else {
            return Ok(x);
        };
        let out: Vec<f64> = self.value(x).data().iter().zip(&factors).map(|(a, f)| a * f).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Dropout { x, factors })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean absolute error against a constant target.
    pub fn mae_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var, NumericsError> {
        self.check_target(pred, target)?;
        let p = self.value(pred).data();
        let l = p.iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
        self.push(Tensor::scalar(l), Op::MaeLoss { pred, target: target.data().to_vec() })
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var, NumericsError> {
        self.check_target(pred, target)?;
        let p = self.value(pred).data();
        let l = p.iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        self.push(Tensor::scalar(l), Op::MseLoss { pred, target: target.data().to_vec() })
    }

    fn check_target(&self, pred: Var, target: &Tensor) -> Result<(), NumericsError> {
        if self.shape(pred) != target.shape() {
            return Err(shape_err(format!(
                "loss target {:?} does not match prediction {:?}",
                target.shape(),
                self.shape(pred)
            )));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`. Leaves that the loss does not reach get no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|x| *x *= 1.5);
            }
            self.backward_node(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        // Lazily allocated accumulator for an input.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !wants(v) {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let bsh = self.nodes[b.0].value.shape();
                let (k, n) = (bsh[0], bsh[1]);
                let m = g.len() / n;
                acc(*a, &mut |ga| matmul_nt_acc(g, val(*b), m, n, k, ga));
                acc(*b, &mut |gb| matmul_tn_acc(val(*a), g, m, k, n, gb));
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let c = self.nodes[b.0].value.len();
                acc(*b, &mut |gb| {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, d)| *o -= d));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |ga| {
                    for ((o, d), bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *o += d * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, d), av) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *o += d * av;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, d)| *o += d * c)),
            Op::Tanh(x) => acc(*x, &mut |gx| {
                for ((o, d), yv) in gx.iter_mut().zip(g).zip(y) {
                    *o += d * (1.0 - yv * yv);
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for ((o, d), yv) in gx.iter_mut().zip(g).zip(y) {
                    *o += d * yv * (1.0 - yv);
                }
            }),
            Op::Gelu(x) => acc(*x, &mut |gx| {
                for ((o, d), xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *o += d * gelu_grad(*xv);
                }
            }),
            Op::Sin(x) => acc(*x, &mut |gx| {
                for ((o, d), xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *o += d * xv.cos();
                }
            }),
            Op::Square(x) => acc(*x, &mut |gx| {
                for ((o, d), xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *o += 2.0 * d * xv;
                }
            }),
            Op::Softmax(x) => {
                let c = node.value.last_dim();
                acc(*x, &mut |gx| {
                    for ((o, d), yv) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s = dot(d, yv);
                        for j in 0..c {
                            o[j] += yv[j] * (d[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = node.value.last_dim();
                let gn = val(*gain);
                acc(*gain, &mut |gg| {
                    for (d, h) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += d[j] * h[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for d in g.chunks(c) {
                        add_into(gb, d);
                    }
                });
                acc(*x, &mut |gx| {
                    let cf = c as f64;
                    for (r, ((o, d), h)) in gx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = d[j] * gn[j];
                            s1 += dh;
                            s2 += dh * h[j];
                        }
                        for j in 0..c {
                            let dh = d[j] * gn[j];
                            o[j] += inv_std[r] * (dh - s1 / cf - h[j] * s2 / cf);
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Permute { x, offsets } | Op::Broadcast { x, offsets } => acc(*x, &mut |gx| {
                for (&o, d) in offsets.iter().zip(g) {
                    gx[o] += d;
                }
            }),
            Op::Concat(xs) => {
                let widths: Vec<usize> = xs.iter().map(|v| self.nodes[v.0].value.last_dim()).collect();
                let total: usize = widths.iter().sum();
                let mut start = 0;
                for (&v, &w) in xs.iter().zip(&widths) {
                    acc(v, &mut |gx| {
                        for (o, row) in gx.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(o, &row[start..start + w]);
                        }
                    });
                    start += w;
                }
            }
            Op::Gather { table, rows } => {
                let c = self.nodes[table.0].value.last_dim();
                acc(*table, &mut |gt| {
                    for (&r, d) in rows.iter().zip(g.chunks(c)) {
                        add_into(&mut gt[r * c..(r + 1) * c], d);
                    }
                });
            }
            Op::Attention(s) => {
                let width = node.value.last_dim();
                let (gq, gk, gv) = attention_backward(
                    s,
                    g,
                    val(s.q),
                    val(s.k),
                    val(s.v),
                    width,
                );
                acc(s.q, &mut |o| add_into(o, &gq));
                acc(s.k, &mut |o| add_into(o, &gk));
                acc(s.v, &mut |o| add_into(o, &gv));
            }
            Op::Stcb { x, tokens } => {
                let shape = node.value.shape();
                let c = shape[shape.len() - 1];
                let block = tokens * c;
                let inv = 1.0 / (2.0 * *tokens as f64);
                acc(*x, &mut |gx| {
                    for (o, d) in gx.chunks_mut(block).zip(g.chunks(block)) {
                        for ch in 0..c {
                            let s: f64 = (0..*tokens).map(|t| d[t * c + ch]).sum();
                            for t in 0..*tokens {
                                o[t * c + ch] += 0.5 * d[t * c + ch] + s * inv;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::MaeLoss { pred, target } => {
                let n = target.len() as f64;
                acc(*pred, &mut |gp| {
                    for ((o, p), t) in gp.iter_mut().zip(val(*pred)).zip(target) {
                        let diff: f64 = p - t;
                        let sign = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *o += g[0] * sign / n;
                    }
                });
            }
            Op::MseLoss { pred, target } => {
                let n = target.len() as f64;
                acc(*pred, &mut |gp| {
                    for ((o, p), t) in gp.iter_mut().zip(val(*pred)).zip(target) {
                        *o += g[0] * 2.0 * (p - t) / n;
                    }
                });
            }
            Op::Dropout { x, factors } => acc(*x, &mut |gx| {
                for ((o, d), f) in gx.iter_mut().zip(g).zip(factors) {
                    *o += d * f;
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

/// Source offset for each flat output position, walking `out_shape` in row-major order.
fn gather_offsets(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let len: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(len);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..len {
        offsets.push(off);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

pub(crate) fn stcb_forward(x: &[f64], shape: &[usize]) -> Vec<f64> {
    let c = shape[shape.len() - 1];
    let tokens = shape[shape.len() - 2];
    let block = tokens * c;
    let mut out = vec![0.0; x.len()];
    for (o, blk) in out.chunks_mut(block).zip(x.chunks(block)) {
        for ch in 0..c {
            let mean = (0..tokens).map(|t| blk[t * c + ch]).sum::<f64>() / tokens as f64;
            for t in 0..tokens {
                o[t * c + ch] = (blk[t * c + ch] + mean) / 2.0;
            }
        }
    }
    out
}

fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    [groups, seq, width, heads]: [usize; 4],
    mask: Option<&[f64]>,
    mode: MaskMode,
    drop: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; groups * heads * seq * seq];
    let mut out = vec![0.0; groups * seq * width];
    for g in 0..groups {
        for h in 0..heads {
            let pbase = (g * heads + h) * seq * seq;
            for i in 0..seq {
                let qi = &q[(g * seq + i) * width + h * dh..][..dh];
                let row = &mut probs[pbase + i * seq..pbase + (i + 1) * seq];
                let mut admitted = false;
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &k[(g * seq + j) * width + h * dh..][..dh];
                    let s = dot(qi, kj) * scale;
                    *r = match (mask, mode) {
                        (None, _) => {
                            admitted = true;
                            s
                        }
                        (Some(m), MaskMode::Multiply) => {
                            admitted = true;
                            s * m[i * seq + j]
                        }
                        (Some(m), MaskMode::Exclude) => {
                            let mv = m[i * seq + j];
                            if mv > 0.0 {
                                admitted = true;
                                s * mv
                            } else {
                                f64::NEG_INFINITY
                            }
                        }
                    };
                }
                if !admitted {
                    row.fill(f64::NEG_INFINITY);
                    row[i] = 0.0;
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                for r in row.iter_mut() {
                    *r /= sum;
                }
                let orow = &mut out[(g * seq + i) * width + h * dh..][..dh];
                for j in 0..seq {
                    let mut p = row[j];
                    if let Some(d) = drop {
                        p *= d[pbase + i * seq + j];
                    }
                    if p == 0.0 {
                        continue;
                    }
                    let vj = &v[(g * seq + j) * width + h * dh..][..dh];
                    for (o, vv) in orow.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    s: &AttentionSaved,
    gout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    width: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (groups, seq, heads) = (s.groups, s.seq, s.heads);
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut dp = vec![0.0; seq];
    for g in 0..groups {
        for h in 0..heads {
            let pbase = (g * heads + h) * seq * seq;
            for i in 0..seq {
                let row = &s.probs[pbase + i * seq..pbase + (i + 1) * seq];
                let doi = &gout[(g * seq + i) * width + h * dh..][..dh];
                for j in 0..seq {
                    let f = s.drop.as_ref().map_or(1.0, |d| d[pbase + i * seq + j]);
                    let vj = &v[(g * seq + j) * width + h * dh..][..dh];
                    dp[j] = dot(doi, vj) * f;
                    let w = row[j] * f;
                    if w != 0.0 {
                        let gvj = &mut gv[(g * seq + j) * width + h * dh..][..dh];
                        for (o, d) in gvj.iter_mut().zip(doi) {
                            *o += w * d;
                        }
                    }
                }
                let c = dot(row, &dp);
                let qi_off = (g * seq + i) * width + h * dh;
                for j in 0..seq {
                    let dl = row[j] * (dp[j] - c);
                    let factor = match &s.mask {
                        None => 1.0,
                        Some(m) => {
                            let mv = m[i * seq + j];
                            match s.mode {
                                MaskMode::Multiply => mv,
                                MaskMode::Exclude if mv > 0.0 => mv,
                                MaskMode::Exclude => 0.0,
                            }
                        }
                    };
                    let ds = dl * factor * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj_off = (g * seq + j) * width + h * dh;
                    for t in 0..dh {
                        gq[qi_off + t] += ds * k[kj_off + t];
                        gk[kj_off + t] += ds * q[qi_off + t];
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}
