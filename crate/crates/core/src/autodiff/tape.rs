use std::sync::atomic::{AtomicUsize, Ordering};

use super::kernels;
use super::tensor::{ParamId, ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum PoolMode {
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    LogSigmoid,
    Square,
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Min,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Gather {
        src: usize,
        indices: Vec<usize>,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Unary {
        x: usize,
        kind: UnaryKind,
    },
    Binary {
        a: usize,
        b: usize,
        kind: BinaryKind,
    },
    Affine {
        x: usize,
        scale: F,
    },
    MulConst {
        x: usize,
        weights: Vec<F>,
    },
    Sum {
        x: usize,
    },
    SeqPool {
        x: usize,
        mode: PoolMode,
        start: usize,
        len: usize,
        argmax: Vec<usize>,
    },
    Conv1d {
        x: usize,
        filters: usize,
        bias: usize,
    },
    PadFront {
        x: usize,
        rows: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<F>,
    },
    RowDot {
        a: usize,
        b: usize,
    },
    LogSoftmax {
        x: usize,
    },
    Reshape {
        x: usize,
    },
}

#[derive(Debug)]
struct Node<F> {
    shape: Vec<usize>,
    /// `None` for parameter leaves, whose values live in the [`ParamSet`].
    value: Option<Vec<F>>,
    param: Option<ParamId>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records one forward pass so that [`Tape::backward`] can replay it in
/// reverse. Parameters are read in place from the borrowed [`ParamSet`].
pub struct Tape<'p, F: Scalar> {
    id: usize,
    params: &'p ParamSet<F>,
    nodes: Vec<Node<F>>,
    param_nodes: Vec<Option<usize>>,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients<F> {
    tape: usize,
    nodes: Vec<Option<Vec<F>>>,
    params: Vec<(ParamId, Vec<F>)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss with respect to a recorded value, if it needed one.
    pub fn wrt(&self, var: Var) -> Option<&[F]> {
        if var.tape != self.tape {
            return None;
        }
        self.nodes.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[F]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.params.iter().map(|(p, g)| (*p, g.as_slice()))
    }
}

fn rows_cols(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [d] => Some((1, *d)),
        [n, d] => Some((*n, *d)),
        _ => None,
    }
}

impl<'p, F: Scalar> Tape<'p, F> {
    pub fn new(params: &'p ParamSet<F>) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet<F> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::Tape("value was recorded on a different tape".into()));
        }
        Ok(v.id)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Some(value),
            param: None,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            id: self.nodes.len() - 1,
        }
    }

    fn val(&self, id: usize) -> &[F] {
        let node = &self.nodes[id];
        match (&node.value, node.param) {
            (Some(v), _) => v,
            (None, Some(p)) => self.params.get(p).values(),
            (None, None) => unreachable!("node without value"),
        }
    }

    fn ng(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn value(&self, v: Var) -> &[F] {
        self.val(v.id)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.id].shape
    }

    /// First entry of a value; intended for scalar losses.
    pub fn scalar(&self, v: Var) -> F {
        self.val(v.id)[0]
    }

    /// Leaf bound to a parameter. Repeated calls return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(n) = self.param_nodes[id.0] {
            return Var { tape: self.id, id: n };
        }
        let t = self.params.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: None,
            param: Some(id),
            op: Op::Leaf,
            needs_grad: true,
        });
        let n = self.nodes.len() - 1;
        self.param_nodes[id.0] = Some(n);
        Var { tape: self.id, id: n }
    }

    /// Leaf holding a copy of `t`; it receives a gradient only if
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    /// Row gather `src[indices]`; backward scatter-adds into `src`.
    pub fn gather(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        let s = self.check(src)?;
        let (v, d) =
            rows_cols(&self.nodes[s].shape).ok_or_else(|| Error::shape("gather", "source must be rank 1 or 2"))?;
        if indices.is_empty() {
            return Err(Error::shape("gather", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::IndexOutOfRange { index: bad, len: v });
        }
        let sv = self.val(s);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&sv[i * d..(i + 1) * d]);
        }
        let ng = self.ng(s);
        Ok(self.push(
            vec![indices.len(), d],
            out,
            Op::Gather {
                src: s,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Row-gather from an embedding table `[V×d]`.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.check(table)?;
        if self.nodes[t].shape.len() != 2 {
            return Err(Error::shape("embedding_lookup", "table must be [V×d]"));
        }
        self.gather(table, indices)
    }

    /// `a[n×p] · b[p×q]`; a rank-1 `a` is treated as a single row and
    /// yields a rank-1 result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (n, p) =
            rows_cols(&self.nodes[ai].shape).ok_or_else(|| Error::shape("matmul", "lhs must be rank 1 or 2"))?;
        let (p2, q) = match self.nodes[bi].shape.as_slice() {
            [p2, q] => (*p2, *q),
            other => return Err(Error::shape("matmul", format!("rhs must be rank 2, got {other:?}"))),
        };
        if p != p2 {
            return Err(Error::shape("matmul", format!("inner dims {p} vs {p2}")));
        }
        let mut out = vec![F::zero(); n * q];
        kernels::matmul_acc(self.val(ai), self.val(bi), &mut out, n, p, q);
        let shape = if self.nodes[ai].shape.len() == 1 {
            vec![q]
        } else {
            vec![n, q]
        };
        let ng = self.ng(ai) || self.ng(bi);
        Ok(self.push(shape, out, Op::MatMul { a: ai, b: bi }, ng))
    }

    /// Adds `bias[q]` to every row of `x[n×q]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xi, bi) = (self.check(x)?, self.check(bias)?);
        let (_, q) =
            rows_cols(&self.nodes[xi].shape).ok_or_else(|| Error::shape("add_bias", "x must be rank 1 or 2"))?;
        let bv = self.val(bi);
        if bv.len() != q {
            return Err(Error::shape("add_bias", format!("bias {} vs width {q}", bv.len())));
        }
        let out: Vec<F> = self
            .val(xi)
            .chunks(q)
            .flat_map(|row| row.iter().zip(bv).map(|(&a, &b)| a + b))
            .collect();
        let shape = self.nodes[xi].shape.clone();
        let ng = self.ng(xi) || self.ng(bi);
        Ok(self.push(shape, out, Op::AddBias { x: xi, bias: bi }, ng))
    }

    /// `activation(x·w + b)`
    pub fn dense(&mut self, x: Var, w: Var, b: Var, activation: Activation) -> Result<Var> {
        let h = self.matmul(x, w)?;
        let h = self.add_bias(h, b)?;
        match activation {
            Activation::None => Ok(h),
            Activation::Tanh => self.tanh(h),
            Activation::Sigmoid => self.sigmoid(h),
        }
    }

    fn unary(&mut self, x: Var, kind: UnaryKind) -> Result<Var> {
        let xi = self.check(x)?;
        let f: fn(F) -> F = match kind {
            UnaryKind::Tanh => |v: F| v.tanh(),
            UnaryKind::Sigmoid => kernels::sigmoid,
            UnaryKind::Relu => |v: F| if v > F::zero() { v } else { F::zero() },
            UnaryKind::Exp => |v: F| v.exp(),
            UnaryKind::LogSigmoid => kernels::log_sigmoid,
            UnaryKind::Square => |v: F| v * v,
        };
        let out = self.val(xi).iter().map(|&v| f(v)).collect();
        let shape = self.nodes[xi].shape.clone();
        let ng = self.ng(xi);
        Ok(self.push(shape, out, Op::Unary { x: xi, kind }, ng))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    /// `max(0, x)`; the derivative at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::LogSigmoid)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Square)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        let same = sa == sb || (rows_cols(sa).is_some() && rows_cols(sa) == rows_cols(sb));
        if !same {
            return Err(Error::shape("elementwise", format!("{sa:?} vs {sb:?}")));
        }
        let f: fn(F, F) -> F = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Min => |x, y| if y < x { y } else { x },
        };
        let out = self.val(ai).iter().zip(self.val(bi)).map(|(&x, &y)| f(x, y)).collect();
        let shape = sa.clone();
        let ng = self.ng(ai) || self.ng(bi);
        Ok(self.push(shape, out, Op::Binary { a: ai, b: bi, kind }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    /// Elementwise minimum; on an exact tie the gradient goes to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Min)
    }

    /// `scale·x + shift`
    pub fn affine(&mut self, x: Var, scale: F, shift: F) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.val(xi).iter().map(|&v| scale * v + shift).collect();
        let shape = self.nodes[xi].shape.clone();
        let ng = self.ng(xi);
        Ok(self.push(shape, out, Op::Affine { x: xi, scale }, ng))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -F::one(), F::zero())
    }

    /// Elementwise product with constant weights.
    pub fn mul_const(&mut self, x: Var, weights: &[F]) -> Result<Var> {
        let xi = self.check(x)?;
        if weights.len() != self.val(xi).len() {
            return Err(Error::shape(
                "mul_const",
                format!("{} weights for {} values", weights.len(), self.val(xi).len()),
            ));
        }
        let out = self.val(xi).iter().zip(weights).map(|(&v, &w)| v * w).collect();
        let shape = self.nodes[xi].shape.clone();
        let ng = self.ng(xi);
        Ok(self.push(
            shape,
            out,
            Op::MulConst {
                x: xi,
                weights: weights.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let s = self.val(xi).iter().copied().sum();
        let ng = self.ng(xi);
        Ok(self.push(vec![1], vec![s], Op::Sum { x: xi }, ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.check(x).map(|xi| self.val(xi).len())?;
        let s = self.sum(x)?;
        self.affine(s, F::one() / F::lit(n as f64), F::zero())
    }

    /// Per-dimension max or mean over the first `mask_length` rows of
    /// `x[t×d]`. Rows past `mask_length` are padding and ignored.
    pub fn seq_pool(&mut self, x: Var, mode: PoolMode, mask_length: usize) -> Result<Var> {
        self.seq_pool_range(x, mode, 0, mask_length)
    }

    /// Like [`Tape::seq_pool`] over rows `start..start + len`.
    pub fn seq_pool_range(&mut self, x: Var, mode: PoolMode, start: usize, len: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let (t, d) = rows_cols(&self.nodes[xi].shape).ok_or_else(|| Error::shape("seq_pool", "x must be [t×d]"))?;
        if len == 0 {
            return Err(Error::InvalidArgument("seq_pool mask_length must be ≥ 1".into()));
        }
        if start + len > t {
            return Err(Error::shape(
                "seq_pool",
                format!("rows {start}..{} of {t}", start + len),
            ));
        }
        let xv = self.val(xi);
        let mut out = vec![F::zero(); d];
        let mut argmax = Vec::new();
        match mode {
            PoolMode::Max => {
                argmax = vec![start; d];
                out.copy_from_slice(&xv[start * d..(start + 1) * d]);
                for r in start + 1..start + len {
                    for (j, &v) in xv[r * d..(r + 1) * d].iter().enumerate() {
                        if v > out[j] {
                            out[j] = v;
                            argmax[j] = r;
                        }
                    }
                }
            }
            PoolMode::Mean => {
                for r in start..start + len {
                    for (o, &v) in out.iter_mut().zip(&xv[r * d..(r + 1) * d]) {
                        *o = *o + v;
                    }
                }
                let inv = F::one() / F::lit(len as f64);
                out.iter_mut().for_each(|o| *o = *o * inv);
            }
        }
        let ng = self.ng(xi);
        Ok(self.push(
            vec![d],
            out,
            Op::SeqPool {
                x: xi,
                mode,
                start,
                len,
                argmax,
            },
            ng,
        ))
    }

    /// Valid (unpadded) convolution over the time axis.
    /// `x: [t×d_in]`, `filters: [k×d_in×d_out]`, `bias: [d_out]`.
    pub fn conv1d(&mut self, x: Var, filters: Var, bias: Var) -> Result<Var> {
        let (xi, fi, bi) = (self.check(x)?, self.check(filters)?, self.check(bias)?);
        let (t, din) = rows_cols(&self.nodes[xi].shape).ok_or_else(|| Error::shape("conv1d", "x must be [t×d_in]"))?;
        let (k, fin, dout) = match self.nodes[fi].shape.as_slice() {
            [k, a, b] => (*k, *a, *b),
            other => return Err(Error::shape("conv1d", format!("filters must be rank 3, got {other:?}"))),
        };
        if fin != din {
            return Err(Error::shape("conv1d", format!("filter input {fin} vs x width {din}")));
        }
        if self.val(bi).len() != dout {
            return Err(Error::shape("conv1d", "bias length must equal d_out"));
        }
        if t < k {
            return Err(Error::shape(
                "conv1d",
                format!("sequence length {t} shorter than kernel {k}"),
            ));
        }
        let out = kernels::conv1d(self.val(xi), self.val(fi), self.val(bi), t, din, k, dout);
        let ng = self.ng(xi) || self.ng(fi) || self.ng(bi);
        Ok(self.push(
            vec![t + 1 - k, dout],
            out,
            Op::Conv1d {
                x: xi,
                filters: fi,
                bias: bi,
            },
            ng,
        ))
    }

    /// Prepends `rows` zero rows.
    pub fn pad_front(&mut self, x: Var, rows: usize) -> Result<Var> {
        let xi = self.check(x)?;
        if rows == 0 {
            return Ok(x);
        }
        let (t, d) = rows_cols(&self.nodes[xi].shape).ok_or_else(|| Error::shape("pad_front", "x must be [t×d]"))?;
        let mut out = vec![F::zero(); rows * d];
        out.extend_from_slice(self.val(xi));
        let ng = self.ng(xi);
        Ok(self.push(vec![t + rows, d], out, Op::PadFront { x: xi, rows }, ng))
    }

    /// Flattens and concatenates.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let ids = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let mut out = Vec::new();
        for &i in &ids {
            out.extend_from_slice(self.val(i));
        }
        let ng = ids.iter().any(|&i| self.ng(i));
        let n = out.len();
        Ok(self.push(vec![n], out, Op::Concat { parts: ids }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xi = self.check(x)?;
        if shape.iter().product::<usize>() != self.val(xi).len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.nodes[xi].shape),
            ));
        }
        let out = self.val(xi).to_vec();
        let ng = self.ng(xi);
        Ok(self.push(shape, out, Op::Reshape { x: xi }, ng))
    }

    /// Row-wise `x / max(‖x‖₂, 1e-12)`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let (_, d) =
            rows_cols(&self.nodes[xi].shape).ok_or_else(|| Error::shape("l2_normalize", "x must be rank 1 or 2"))?;
        let eps = F::lit(NORM_EPS);
        let mut out = Vec::with_capacity(self.val(xi).len());
        let mut norms = Vec::new();
        for row in self.val(xi).chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(eps);
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let shape = self.nodes[xi].shape.clone();
        let ng = self.ng(xi);
        Ok(self.push(shape, out, Op::L2Normalize { x: xi, norms }, ng))
    }

    /// Row-wise dot products of two `[n×d]` values, giving `[n]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let ra = rows_cols(&self.nodes[ai].shape);
        if ra.is_none() || ra != rows_cols(&self.nodes[bi].shape) {
            return Err(Error::shape(
                "row_dot",
                format!("{:?} vs {:?}", self.nodes[ai].shape, self.nodes[bi].shape),
            ));
        }
        let (n, d) = ra.unwrap();
        let (av, bv) = (self.val(ai), self.val(bi));
        let out = (0..n)
            .map(|r| {
                av[r * d..(r + 1) * d]
                    .iter()
                    .zip(&bv[r * d..(r + 1) * d])
                    .map(|(&x, &y)| x * y)
                    .sum()
            })
            .collect();
        let ng = self.ng(ai) || self.ng(bi);
        Ok(self.push(vec![n], out, Op::RowDot { a: ai, b: bi }, ng))
    }

    /// `1 − a·b` per row. Inputs are expected to be unit-norm already.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let dot = self.row_dot(a, b)?;
        self.affine(dot, -F::one(), F::one())
    }

    /// Log-softmax over all entries, computed with max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let xv = self.val(xi);
        let m = xv.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = xv.iter().map(|&v| (v - m).exp()).sum::<F>().ln() + m;
        let out = xv.iter().map(|&v| v - lse).collect();
        let shape = self.nodes[xi].shape.clone();
        let ng = self.ng(xi);
        Ok(self.push(shape, out, Op::LogSoftmax { x: xi }, ng))
    }

    /// Runs a GRU over the rows of `x[t×d_in]` starting from `h0` and
    /// returns the last hidden state `[1×d_h]`.
    ///
    /// ```text
    /// z = σ(x·W_z + h·U_z + b_z)
    /// r = σ(x·W_r + h·U_r + b_r)
    /// n = tanh(x·W_n + b_n + r ⊙ (h·U_n + b_hn))
    /// h' = (1 − z) ⊙ n + z ⊙ h
    /// ```
    pub fn gru_sequence(&mut self, x: Var, w: &GruVars, h0: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let (t, _) =
            rows_cols(&self.nodes[xi].shape).ok_or_else(|| Error::shape("gru_sequence", "x must be [t×d_in]"))?;
        let xz = self.dense(x, w.w_z, w.b_z, Activation::None)?;
        let xr = self.dense(x, w.w_r, w.b_r, Activation::None)?;
        let xn = self.dense(x, w.w_n, w.b_n, Activation::None)?;
        let mut h = h0;
        for step in 0..t {
            let xz_t = self.gather(xz, &[step])?;
            let xr_t = self.gather(xr, &[step])?;
            let xn_t = self.gather(xn, &[step])?;
            let hz = self.matmul(h, w.u_z)?;
            let z = self.add(xz_t, hz)?;
            let z = self.sigmoid(z)?;
            let hr = self.matmul(h, w.u_r)?;
            let r = self.add(xr_t, hr)?;
            let r = self.sigmoid(r)?;
            let hn = self.dense(h, w.u_n, w.b_hn, Activation::None)?;
            let rhn = self.mul(r, hn)?;
            let n = self.add(xn_t, rhn)?;
            let n = self.tanh(n)?;
            let h_minus_n = self.sub(h, n)?;
            let gated = self.mul(z, h_minus_n)?;
            h = self.add(n, gated)?;
        }
        Ok(h)
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate over
    /// fan-out; the sweep visits nodes in exact reverse record order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let li = self.check(loss)?;
        if self.val(li).len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[li].shape
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![F::one()]);
        for id in (0..=li).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].needs_grad {
                self.backprop_node(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.zip(grads[i].clone()))
            .collect();
        Ok(Gradients {
            tape: self.id,
            nodes: grads,
            params,
        })
    }

    fn backprop_node(&self, id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[id];
        let y = self.val(id);
        match &node.op {
            Op::Leaf => {}
            Op::Gather { src, indices } => {
                let d = g.len() / indices.len();
                self.acc(grads, *src, |dst| {
                    for (r, &i) in indices.iter().enumerate() {
                        for (a, &b) in dst[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *a = *a + b;
                        }
                    }
                });
            }
            Op::MatMul { a, b } => {
                let (n, p) = rows_cols(&self.nodes[*a].shape).unwrap();
                let q = self.nodes[*b].shape[1];
                let (av, bv) = (self.val(*a), self.val(*b));
                self.acc(grads, *a, |da| kernels::matmul_grad_a(g, bv, da, n, p, q));
                self.acc(grads, *b, |db| kernels::matmul_grad_b(av, g, db, n, p, q));
            }
            Op::AddBias { x, bias } => {
                let q = self.val(*bias).len();
                self.acc(grads, *x, |dx| add_into(dx, g));
                self.acc(grads, *bias, |db| {
                    for row in g.chunks(q) {
                        add_into(db, row);
                    }
                });
            }
            Op::Unary { x, kind } => {
                let xv = self.val(*x);
                let kind = *kind;
                self.acc(grads, *x, |dx| {
                    for i in 0..dx.len() {
                        let local = match kind {
                            UnaryKind::Tanh => F::one() - y[i] * y[i],
                            UnaryKind::Sigmoid => y[i] * (F::one() - y[i]),
                            UnaryKind::Relu => {
                                if xv[i] > F::zero() {
                                    F::one()
                                } else {
                                    F::zero()
                                }
                            }
                            UnaryKind::Exp => y[i],
                            UnaryKind::LogSigmoid => kernels::sigmoid(-xv[i]),
                            UnaryKind::Square => F::lit(2.0) * xv[i],
                        };
                        dx[i] = dx[i] + g[i] * local;
                    }
                });
            }
            Op::Binary { a, b, kind } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                match kind {
                    BinaryKind::Add => {
                        self.acc(grads, *a, |da| add_into(da, g));
                        self.acc(grads, *b, |db| add_into(db, g));
                    }
                    BinaryKind::Sub => {
                        self.acc(grads, *a, |da| add_into(da, g));
                        self.acc(grads, *b, |db| db.iter_mut().zip(g).for_each(|(d, &v)| *d = *d - v));
                    }
                    BinaryKind::Mul => {
                        self.acc(grads, *a, |da| {
                            for i in 0..da.len() {
                                da[i] = da[i] + g[i] * bv[i];
                            }
                        });
                        self.acc(grads, *b, |db| {
                            for i in 0..db.len() {
                                db[i] = db[i] + g[i] * av[i];
                            }
                        });
                    }
                    BinaryKind::Min => {
                        // b wins only when strictly smaller
                        self.acc(grads, *a, |da| {
                            for i in 0..da.len() {
                                if bv[i].partial_cmp(&av[i]) != Some(std::cmp::Ordering::Less) {
                                    da[i] = da[i] + g[i];
                                }
                            }
                        });
                        self.acc(grads, *b, |db| {
                            for i in 0..db.len() {
                                if bv[i] < av[i] {
                                    db[i] = db[i] + g[i];
                                }
                            }
                        });
                    }
                }
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                self.acc(grads, *x, |dx| dx.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + s * v));
            }
            Op::MulConst { x, weights } => {
                self.acc(grads, *x, |dx| {
                    for i in 0..dx.len() {
                        dx[i] = dx[i] + g[i] * weights[i];
                    }
                });
            }
            Op::Sum { x } => {
                let g0 = g[0];
                self.acc(grads, *x, |dx| dx.iter_mut().for_each(|d| *d = *d + g0));
            }
            Op::SeqPool {
                x,
                mode,
                start,
                len,
                argmax,
            } => {
                let d = g.len();
                match mode {
                    PoolMode::Max => self.acc(grads, *x, |dx| {
                        for (j, &r) in argmax.iter().enumerate() {
                            dx[r * d + j] = dx[r * d + j] + g[j];
                        }
                    }),
                    PoolMode::Mean => {
                        let inv = F::one() / F::lit(*len as f64);
                        self.acc(grads, *x, |dx| {
                            for r in *start..*start + *len {
                                for j in 0..d {
                                    dx[r * d + j] = dx[r * d + j] + g[j] * inv;
                                }
                            }
                        });
                    }
                }
            }
            Op::Conv1d { x, filters, bias } => {
                let (t, din) = rows_cols(&self.nodes[*x].shape).unwrap();
                let fs = &self.nodes[*filters].shape;
                let (k, dout) = (fs[0], fs[2]);
                let (xv, wv) = (self.val(*x), self.val(*filters));
                let mut dx = self.ng(*x).then(|| vec![F::zero(); xv.len()]);
                let mut dw = self.ng(*filters).then(|| vec![F::zero(); wv.len()]);
                let mut db = self.ng(*bias).then(|| vec![F::zero(); dout]);
                kernels::conv1d_backward(
                    xv,
                    wv,
                    g,
                    t,
                    din,
                    k,
                    dout,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(v) = dx {
                    self.acc(grads, *x, |d| add_into(d, &v));
                }
                if let Some(v) = dw {
                    self.acc(grads, *filters, |d| add_into(d, &v));
                }
                if let Some(v) = db {
                    self.acc(grads, *bias, |d| add_into(d, &v));
                }
            }
            Op::PadFront { x, rows } => {
                let d = g.len() / node.shape[0];
                let skip = rows * d;
                self.acc(grads, *x, |dx| add_into(dx, &g[skip..]));
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.val(p).len();
                    self.acc(grads, p, |dp| add_into(dp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Reshape { x } => self.acc(grads, *x, |dx| add_into(dx, g)),
            Op::L2Normalize { x, norms } => {
                let d = g.len() / norms.len();
                let eps = F::lit(NORM_EPS);
                self.acc(grads, *x, |dx| {
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        if n > eps {
                            let proj: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for j in 0..d {
                                dx[r * d + j] = dx[r * d + j] + (gr[j] - yr[j] * proj) / n;
                            }
                        } else {
                            for j in 0..d {
                                dx[r * d + j] = dx[r * d + j] + gr[j] / n;
                            }
                        }
                    }
                });
            }
            Op::RowDot { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let d = av.len() / g.len();
                self.acc(grads, *a, |da| {
                    for (r, &gr) in g.iter().enumerate() {
                        for j in 0..d {
                            da[r * d + j] = da[r * d + j] + gr * bv[r * d + j];
                        }
                    }
                });
                self.acc(grads, *b, |db| {
                    for (r, &gr) in g.iter().enumerate() {
                        for j in 0..d {
                            db[r * d + j] = db[r * d + j] + gr * av[r * d + j];
                        }
                    }
                });
            }
            Op::LogSoftmax { x } => {
                let total: F = g.iter().copied().sum();
                self.acc(grads, *x, |dx| {
                    for i in 0..dx.len() {
                        dx[i] = dx[i] + g[i] - y[i].exp() * total;
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<F>>], target: usize, f: impl FnOnce(&mut [F])) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let n = self.val(target).len();
        let buf = grads[target].get_or_insert_with(|| vec![F::zero(); n]);
        f(buf);
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}

/// Denominator floor for [`Tape::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// GRU weights as recorded leaves; shapes `[d_in×d_h]` for `w_*`,
/// `[d_h×d_h]` for `u_*`, `[d_h]` for biases.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_n: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_n: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_n: Var,
    pub b_hn: Var,
}
