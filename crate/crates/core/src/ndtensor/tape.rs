use rand::Rng;

use super::{numel, Result, TensorError};
use crate::real::Real;
use crate::rng::RngStream;

/// Handle to a node on a [`Tape`]. Valid only for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Primitive op record. Parents always precede children on the tape, so the
/// node index order is already a topological order for the backward walk.
enum OpKind<R> {
    Leaf,
    Matmul(TensorId, TensorId),
    Add(TensorId, TensorId),
    AddBias(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, R),
    Relu(TensorId),
    RowGather(TensorId, Vec<usize>),
    PadRows { x: TensorId, before: usize },
    Conv1d {
        x: TensorId,
        kernel: TensorId,
        bias: TensorId,
    },
    MaxOverTime {
        x: TensorId,
        argmax: Vec<usize>,
    },
    MaxPoolRows {
        x: TensorId,
        argmax: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
        probs: Vec<R>,
    },
    Dropout {
        x: TensorId,
        mask: Vec<R>,
    },
    SumAll(TensorId),
    Reshape(TensorId),
    ConcatRows(Vec<TensorId>),
    StackRows(Vec<TensorId>),
}

struct Node<R> {
    shape: Vec<usize>,
    value: Vec<R>,
    requires_grad: bool,
    op: OpKind<R>,
}

/// Binding of a tape node back to a named parameter, recorded when the
/// parameter is leased onto the tape.
struct Binding {
    node: TensorId,
    name: String,
    /// For row leases: source row index per leased row.
    rows: Option<Vec<usize>>,
}

/// Gradients of one scalar w.r.t. every grad-requiring node of a tape.
pub struct Gradients<R> {
    grads: Vec<Option<Vec<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, id: TensorId) -> Option<&[R]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Append-only op record supporting a single reverse pass.
pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
    bindings: Vec<Binding>,
    consumed: bool,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[R] {
        &self.nodes[id.0].value
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> Result<R> {
        let n = &self.nodes[id.0];
        if numel(&n.shape) != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: n.shape.clone(),
            });
        }
        Ok(n.value[0])
    }

    fn push(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        value: Vec<R>,
        requires_grad: bool,
        kind: OpKind<R>,
    ) -> Result<TensorId> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if value.len() != numel(&shape) {
            return Err(TensorError::DataShape {
                len: value.len(),
                shape,
            });
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op: kind,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn rank2(&self, op: &'static str, id: TensorId) -> Result<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(TensorError::RankMismatch {
                op,
                expected: 2,
                shape: s.clone(),
            });
        }
        Ok((s[0], s[1]))
    }

    fn rank1(&self, op: &'static str, id: TensorId) -> Result<usize> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 1 {
            return Err(TensorError::RankMismatch {
                op,
                expected: 1,
                shape: s.clone(),
            });
        }
        Ok(s[0])
    }

    /// New input node. Gradients flow into it only when `requires_grad`.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<R>, requires_grad: bool) -> Result<TensorId> {
        self.push("leaf", shape.to_vec(), data, requires_grad, OpKind::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<R>) -> Result<TensorId> {
        self.leaf(shape, data, false)
    }

    /// Lease a whole named parameter onto the tape. Gradients harvested by
    /// [`Tape::accumulate_param_grads`] flow back under the same name.
    pub fn param(&mut self, params: &super::Params<R>, name: &str) -> Result<TensorId> {
        let p = params.get(name)?;
        let id = self.leaf(&p.shape, p.data.clone(), true)?;
        self.bindings.push(Binding {
            node: id,
            name: name.to_string(),
            rows: None,
        });
        Ok(id)
    }

    /// Lease selected rows of a rank-2 parameter (an embedding gather).
    /// Repeated row indices accumulate their gradients on the shared row.
    pub fn param_rows(
        &mut self,
        params: &super::Params<R>,
        name: &str,
        rows: &[usize],
    ) -> Result<TensorId> {
        let p = params.get(name)?;
        if p.shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "param_rows",
                expected: 2,
                shape: p.shape.clone(),
            });
        }
        let (n, d) = (p.shape[0], p.shape[1]);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "param_rows",
                    index: r,
                    len: n,
                });
            }
            data.extend_from_slice(&p.data[r * d..(r + 1) * d]);
        }
        let id = self.leaf(&[rows.len(), d], data, true)?;
        self.bindings.push(Binding {
            node: id,
            name: name.to_string(),
            rows: Some(rows.to_vec()),
        });
        Ok(id)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.rank2("matmul", a)?;
        let (kb, n) = self.rank2("matmul", b)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            for p in 0..ka {
                let x = av[i * ka + p];
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + x * brow[j];
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push("matmul", vec![m, n], out, rg, OpKind::Matmul(a, b))
    }

    /// Elementwise sum. Either side may be a single-element tensor, which
    /// broadcasts over the other.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_pointwise("add", a, b, |x, y| x + y, OpKind::Add(a, b))
    }

    /// Elementwise product with the same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_pointwise("mul", a, b, |x, y| x * y, OpKind::Mul(a, b))
    }

    fn binary_pointwise(
        &mut self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(R, R) -> R,
        kind: OpKind<R>,
    ) -> Result<TensorId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (out, shape): (Vec<R>, Vec<usize>) = if sa == sb {
            (av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(), sa.clone())
        } else if bv.len() == 1 {
            (av.iter().map(|&x| f(x, bv[0])).collect(), sa.clone())
        } else if av.len() == 1 {
            (bv.iter().map(|&y| f(av[0], y)).collect(), sb.clone())
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        };
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(op, shape, out, rg, kind)
    }

    /// Add a rank-1 bias `[n]` to every row of `[m,n]`.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.rank2("add_bias", x)?;
        let bn = self.rank1("add_bias", bias)?;
        if bn != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(xv[i * n + j] + bv[j]);
            }
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[bias.0].requires_grad;
        self.push("add_bias", vec![m, n], out, rg, OpKind::AddBias(x, bias))
    }

    pub fn scale(&mut self, x: TensorId, c: R) -> Result<TensorId> {
        let v: Vec<R> = self.nodes[x.0].value.iter().map(|&a| a * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push("scale", shape, v, rg, OpKind::Scale(x, c))
    }

    /// `max(0, x)`. The subgradient at exactly zero is taken as zero.
    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let v: Vec<R> = self.nodes[x.0]
            .value
            .iter()
            .map(|&a| if a > R::zero() { a } else { R::zero() })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push("relu", shape, v, rg, OpKind::Relu(x))
    }

    /// Select rows of a rank-2 tensor by index; indices may repeat.
    /// Backward scatter-adds into the source rows.
    pub fn row_gather(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (n, d) = self.rank2("row_gather", x)?;
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "row_gather",
                    index: i,
                    len: n,
                });
            }
            out.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            "row_gather",
            vec![indices.len(), d],
            out,
            rg,
            OpKind::RowGather(x, indices.to_vec()),
        )
    }

    /// Zero-pad a rank-2 tensor with `before` rows above and `after` below.
    pub fn pad_rows(&mut self, x: TensorId, before: usize, after: usize) -> Result<TensorId> {
        let (n, d) = self.rank2("pad_rows", x)?;
        let mut out = vec![R::zero(); (before + n + after) * d];
        out[before * d..(before + n) * d].copy_from_slice(&self.nodes[x.0].value);
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            "pad_rows",
            vec![before + n + after, d],
            out,
            rg,
            OpKind::PadRows { x, before },
        )
    }

    /// Valid 1-d convolution over rows:
    /// `out[i][j] = sum_{t<l, c<d} x[i+t][c] * kernel[t][c][j] + bias[j]`
    /// for x `[n,d]`, kernel `[l,d,s]`, bias `[s]`, out `[n-l+1, s]`.
    ///
    /// Accumulation order is fixed (t outer, c inner, bias last) so results
    /// are reproducible bit for bit across runs and call sites.
    pub fn conv1d_valid(&mut self, x: TensorId, kernel: TensorId, bias: TensorId) -> Result<TensorId> {
        let (n, d) = self.rank2("conv1d_valid", x)?;
        let ks = &self.nodes[kernel.0].shape;
        if ks.len() != 3 {
            return Err(TensorError::RankMismatch {
                op: "conv1d_valid",
                expected: 3,
                shape: ks.clone(),
            });
        }
        let (l, kd, s) = (ks[0], ks[1], ks[2]);
        if kd != d {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_valid",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: ks.clone(),
            });
        }
        let bs = self.rank1("conv1d_valid", bias)?;
        if bs != s {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_valid",
                lhs: ks.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        if l == 0 || n < l {
            return Err(TensorError::TooShort {
                op: "conv1d_valid",
                n,
                l,
            });
        }
        let m = n - l + 1;
        let xv = &self.nodes[x.0].value;
        let kv = &self.nodes[kernel.0].value;
        let bv = &self.nodes[bias.0].value;
        let mut out = vec![R::zero(); m * s];
        for i in 0..m {
            let orow = &mut out[i * s..(i + 1) * s];
            for t in 0..l {
                for c in 0..d {
                    let xval = xv[(i + t) * d + c];
                    let krow = &kv[(t * d + c) * s..(t * d + c + 1) * s];
                    for j in 0..s {
                        orow[j] = orow[j] + xval * krow[j];
                    }
                }
            }
            for j in 0..s {
                orow[j] = orow[j] + bv[j];
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[kernel.0].requires_grad
            || self.nodes[bias.0].requires_grad;
        self.push(
            "conv1d_valid",
            vec![m, s],
            out,
            rg,
            OpKind::Conv1d { x, kernel, bias },
        )
    }

    /// Column-wise max over rows: `[m,s] -> [s]` (or `[m] -> []`).
    /// Ties resolve to the first maximal row, which alone receives gradient.
    pub fn max_over_time(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, s, out_shape): (usize, usize, Vec<usize>) = match self.nodes[x.0].shape.as_slice() {
            [m] => (*m, 1, vec![]),
            [m, s] => (*m, *s, vec![*s]),
            other => {
                return Err(TensorError::RankMismatch {
                    op: "max_over_time",
                    expected: 2,
                    shape: other.to_vec(),
                })
            }
        };
        if m == 0 {
            return Err(TensorError::EmptyInput { op: "max_over_time" });
        }
        let xv = &self.nodes[x.0].value;
        let mut out = vec![R::zero(); s];
        let mut argmax = vec![0usize; s];
        for j in 0..s {
            let mut best = xv[j];
            let mut at = 0usize;
            for i in 1..m {
                let v = xv[i * s + j];
                if v > best {
                    best = v;
                    at = i;
                }
            }
            out[j] = best;
            argmax[j] = at;
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            "max_over_time",
            out_shape,
            out,
            rg,
            OpKind::MaxOverTime { x, argmax },
        )
    }

    /// Row-window max pooling: windows of `size` rows advanced by `stride`.
    /// A short final window is kept; an input shorter than one window yields
    /// a single window over whatever rows exist. Ties resolve to the first
    /// maximal row per window and column.
    pub fn max_pool_rows(&mut self, x: TensorId, size: usize, stride: usize) -> Result<TensorId> {
        let (n, s) = self.rank2("max_pool_rows", x)?;
        if n == 0 || size == 0 || stride == 0 {
            return Err(TensorError::EmptyInput { op: "max_pool_rows" });
        }
        let windows = if n <= size { 1 } else { (n - size + stride - 1) / stride + 1 };
        let xv = &self.nodes[x.0].value;
        let mut out = vec![R::zero(); windows * s];
        let mut argmax = vec![0usize; windows * s];
        for w in 0..windows {
            let lo = w * stride;
            let hi = (lo + size).min(n);
            for j in 0..s {
                let mut best = xv[lo * s + j];
                let mut at = lo;
                for i in lo + 1..hi {
                    let v = xv[i * s + j];
                    if v > best {
                        best = v;
                        at = i;
                    }
                }
                out[w * s + j] = best;
                argmax[w * s + j] = at;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            "max_pool_rows",
            vec![windows, s],
            out,
            rg,
            OpKind::MaxPoolRows { x, argmax },
        )
    }

    /// Mean cross-entropy of softmaxed logits `[b,c]` against integer labels.
    /// Logits are max-shifted per row before exponentiation.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let (b, c) = self.rank2("softmax_cross_entropy", logits)?;
        if b == 0 || c == 0 {
            return Err(TensorError::EmptyInput {
                op: "softmax_cross_entropy",
            });
        }
        if labels.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: vec![b, c],
                rhs: vec![labels.len()],
            });
        }
        let xv = &self.nodes[logits.0].value;
        let mut probs = vec![R::zero(); b * c];
        let mut loss = R::zero();
        for (i, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(TensorError::LabelOutOfRange { label, classes: c });
            }
            let row = &xv[i * c..(i + 1) * c];
            let mut mx = row[0];
            for &v in &row[1..] {
                if v > mx {
                    mx = v;
                }
            }
            let mut z = R::zero();
            for j in 0..c {
                let e = (row[j] - mx).exp();
                probs[i * c + j] = e;
                z = z + e;
            }
            for j in 0..c {
                probs[i * c + j] = probs[i * c + j] / z;
            }
            // log-space form: ln p[label] can underflow to ln(0) for
            // finite logits, ln z never leaves [0, ln c]
            loss = loss + z.ln() - (row[label] - mx);
        }
        loss = loss / R::from_f64(b as f64);
        let rg = self.nodes[logits.0].requires_grad;
        self.push(
            "softmax_cross_entropy",
            vec![],
            vec![loss],
            rg,
            OpKind::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Inverted dropout: keeps each element with probability `1-rate` and
    /// scales kept elements by `1/(1-rate)`. Identity when not training or
    /// when `rate` is zero.
    pub fn dropout(
        &mut self,
        x: TensorId,
        rate: f64,
        training: bool,
        rng: &mut RngStream,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::DropoutRate { rate });
        }
        if !training || rate == 0.0 {
            let shape = self.nodes[x.0].shape.clone();
            let value = self.nodes[x.0].value.clone();
            let rg = self.nodes[x.0].requires_grad;
            let mask = vec![R::one(); value.len()];
            return self.push("dropout", shape, value, rg, OpKind::Dropout { x, mask });
        }
        let keep_scale = R::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<R> = (0..self.nodes[x.0].value.len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    R::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let value: Vec<R> = self.nodes[x.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push("dropout", shape, value, rg, OpKind::Dropout { x, mask })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let total = self.nodes[x.0].value.iter().fold(R::zero(), |a, &b| a + b);
        let rg = self.nodes[x.0].requires_grad;
        self.push("sum_all", vec![], vec![total], rg, OpKind::SumAll(x))
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != self.nodes[x.0].value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.nodes[x.0].value.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push("reshape", shape.to_vec(), value, rg, OpKind::Reshape(x))
    }

    /// Concatenate rank-1 tensors end to end into one rank-1 tensor.
    pub fn concat(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat" });
        }
        let mut value = Vec::new();
        let mut rg = false;
        for &p in parts {
            self.rank1("concat", p)?;
            value.extend_from_slice(&self.nodes[p.0].value);
            rg |= self.nodes[p.0].requires_grad;
        }
        let n = value.len();
        self.push(
            "concat",
            vec![n],
            value,
            rg,
            OpKind::ConcatRows(parts.to_vec()),
        )
    }

    /// Stack equal-length rank-1 tensors as the rows of a rank-2 tensor.
    pub fn stack_rows(&mut self, rows: &[TensorId]) -> Result<TensorId> {
        if rows.is_empty() {
            return Err(TensorError::EmptyInput { op: "stack_rows" });
        }
        let d = self.rank1("stack_rows", rows[0])?;
        let mut value = Vec::with_capacity(rows.len() * d);
        let mut rg = false;
        for &r in rows {
            let rd = self.rank1("stack_rows", r)?;
            if rd != d {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![d],
                    rhs: vec![rd],
                });
            }
            value.extend_from_slice(&self.nodes[r.0].value);
            rg |= self.nodes[r.0].requires_grad;
        }
        self.push(
            "stack_rows",
            vec![rows.len(), d],
            value,
            rg,
            OpKind::StackRows(rows.to_vec()),
        )
    }

    /// Reverse pass from a scalar loss. Consumes the tape for further ops;
    /// values remain readable. Gradients are returned for every node that
    /// requires grad and lies on a path to the loss.
    pub fn backward(&mut self, loss: TensorId) -> Result<Gradients<R>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![R::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let dout = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &dout, &mut grads);
            grads[idx] = Some(dout);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, dout: &[R], grads: &mut [Option<Vec<R>>]) {
        // Adds this node's contribution to each grad-requiring parent. The
        // helper hands back the parent's accumulator, creating it on first
        // touch; parents that do not require grad get no buffer.
        fn buf<'g, R: Real>(
            nodes: &[Node<R>],
            grads: &'g mut [Option<Vec<R>>],
            id: TensorId,
        ) -> Option<&'g mut Vec<R>> {
            if !nodes[id.0].requires_grad {
                return None;
            }
            let n = nodes[id.0].value.len();
            Some(grads[id.0].get_or_insert_with(|| vec![R::zero(); n]))
        }
        let nodes = &self.nodes;
        match &nodes[idx].op {
            OpKind::Leaf => {}
            OpKind::Matmul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(ga) = buf(nodes, grads, *a) {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = R::zero();
                            for j in 0..n {
                                acc = acc + dout[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] = ga[i * k + p] + acc;
                        }
                    }
                }
                if let Some(gb) = buf(nodes, grads, *b) {
                    for p in 0..k {
                        for i in 0..m {
                            let x = av[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] = gb[p * n + j] + x * dout[i * n + j];
                            }
                        }
                    }
                }
            }
            OpKind::Add(a, b) => {
                for &side in &[*a, *b] {
                    if let Some(g) = buf(nodes, grads, side) {
                        if g.len() == dout.len() {
                            for i in 0..g.len() {
                                g[i] = g[i] + dout[i];
                            }
                        } else {
                            // this side was the broadcast single element
                            let mut acc = R::zero();
                            for &d in dout {
                                acc = acc + d;
                            }
                            g[0] = g[0] + acc;
                        }
                    }
                }
            }
            OpKind::Mul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(ga) = buf(nodes, grads, *a) {
                    if ga.len() == dout.len() {
                        for i in 0..ga.len() {
                            let y = if bv.len() == 1 { bv[0] } else { bv[i] };
                            ga[i] = ga[i] + dout[i] * y;
                        }
                    } else {
                        let mut acc = R::zero();
                        for i in 0..dout.len() {
                            acc = acc + dout[i] * bv[i];
                        }
                        ga[0] = ga[0] + acc;
                    }
                }
                if let Some(gb) = buf(nodes, grads, *b) {
                    if gb.len() == dout.len() {
                        for i in 0..gb.len() {
                            let x = if av.len() == 1 { av[0] } else { av[i] };
                            gb[i] = gb[i] + dout[i] * x;
                        }
                    } else {
                        let mut acc = R::zero();
                        for i in 0..dout.len() {
                            acc = acc + dout[i] * av[i];
                        }
                        gb[0] = gb[0] + acc;
                    }
                }
            }
            OpKind::AddBias(x, bias) => {
                let (m, n) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                if let Some(gx) = buf(nodes, grads, *x) {
                    for i in 0..m * n {
                        gx[i] = gx[i] + dout[i];
                    }
                }
                if let Some(gb) = buf(nodes, grads, *bias) {
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] = gb[j] + dout[i * n + j];
                        }
                    }
                }
            }
            OpKind::Scale(x, c) => {
                let c = *c;
                if let Some(gx) = buf(nodes, grads, *x) {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + dout[i] * c;
                    }
                }
            }
            OpKind::Relu(x) => {
                let xv = &nodes[x.0].value;
                if let Some(gx) = buf(nodes, grads, *x) {
                    for i in 0..gx.len() {
                        if xv[i] > R::zero() {
                            gx[i] = gx[i] + dout[i];
                        }
                    }
                }
            }
            OpKind::RowGather(x, indices) => {
                let d = nodes[x.0].shape[1];
                if let Some(gx) = buf(nodes, grads, *x) {
                    for (r, &src) in indices.iter().enumerate() {
                        for j in 0..d {
                            gx[src * d + j] = gx[src * d + j] + dout[r * d + j];
                        }
                    }
                }
            }
            OpKind::PadRows { x, before } => {
                let (n, d) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let before = *before;
                if let Some(gx) = buf(nodes, grads, *x) {
                    for i in 0..n * d {
                        gx[i] = gx[i] + dout[before * d + i];
                    }
                }
            }
            OpKind::Conv1d { x, kernel, bias } => {
                let (n, d) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let (l, s) = (nodes[kernel.0].shape[0], nodes[kernel.0].shape[2]);
                let m = n - l + 1;
                let xv = &nodes[x.0].value;
                let kv = &nodes[kernel.0].value;
                if let Some(gx) = buf(nodes, grads, *x) {
                    for i in 0..m {
                        for t in 0..l {
                            for c in 0..d {
                                let mut acc = R::zero();
                                let krow = &kv[(t * d + c) * s..(t * d + c + 1) * s];
                                for j in 0..s {
                                    acc = acc + krow[j] * dout[i * s + j];
                                }
                                gx[(i + t) * d + c] = gx[(i + t) * d + c] + acc;
                            }
                        }
                    }
                }
                if let Some(gk) = buf(nodes, grads, *kernel) {
                    for i in 0..m {
                        for t in 0..l {
                            for c in 0..d {
                                let xval = xv[(i + t) * d + c];
                                let grow = &mut gk[(t * d + c) * s..(t * d + c + 1) * s];
                                for j in 0..s {
                                    grow[j] = grow[j] + xval * dout[i * s + j];
                                }
                            }
                        }
                    }
                }
                if let Some(gb) = buf(nodes, grads, *bias) {
                    for i in 0..m {
                        for j in 0..s {
                            gb[j] = gb[j] + dout[i * s + j];
                        }
                    }
                }
            }
            OpKind::MaxOverTime { x, argmax } => {
                let s = argmax.len();
                if let Some(gx) = buf(nodes, grads, *x) {
                    for (j, &at) in argmax.iter().enumerate() {
                        gx[at * s + j] = gx[at * s + j] + dout[j];
                    }
                }
            }
            OpKind::MaxPoolRows { x, argmax } => {
                let s = nodes[x.0].shape[1];
                if let Some(gx) = buf(nodes, grads, *x) {
                    for (o, &at) in argmax.iter().enumerate() {
                        let j = o % s;
                        gx[at * s + j] = gx[at * s + j] + dout[o];
                    }
                }
            }
            OpKind::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = nodes[logits.0].shape[1];
                let b = labels.len();
                let scale = dout[0] / R::from_f64(b as f64);
                if let Some(gl) = buf(nodes, grads, *logits) {
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let indicator = if j == label { R::one() } else { R::zero() };
                            gl[i * c + j] = gl[i * c + j] + (probs[i * c + j] - indicator) * scale;
                        }
                    }
                }
            }
            OpKind::Dropout { x, mask } => {
                if let Some(gx) = buf(nodes, grads, *x) {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + dout[i] * mask[i];
                    }
                }
            }
            OpKind::SumAll(x) => {
                if let Some(gx) = buf(nodes, grads, *x) {
                    for g in gx.iter_mut() {
                        *g = *g + dout[0];
                    }
                }
            }
            OpKind::Reshape(x) => {
                if let Some(gx) = buf(nodes, grads, *x) {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + dout[i];
                    }
                }
            }
            OpKind::ConcatRows(parts) | OpKind::StackRows(parts) => {
                let mut off = 0usize;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    if let Some(gp) = buf(nodes, grads, p) {
                        for i in 0..n {
                            gp[i] = gp[i] + dout[off + i];
                        }
                    }
                    off += n;
                }
            }
        }
    }

    /// Fold leased-parameter gradients from a backward pass into per-name
    /// buffers, accumulating across bindings and repeated rows.
    pub fn collect_param_grads(
        &self,
        grads: &Gradients<R>,
    ) -> indexmap::IndexMap<String, (Vec<usize>, Vec<R>)> {
        let mut out: indexmap::IndexMap<String, (Vec<usize>, Vec<R>)> = indexmap::IndexMap::new();
        for binding in &self.bindings {
            let g = match grads.get(binding.node) {
                Some(g) => g,
                None => continue,
            };
            match &binding.rows {
                None => {
                    let shape = self.nodes[binding.node.0].shape.clone();
                    let entry = out
                        .entry(binding.name.clone())
                        .or_insert_with(|| (shape, vec![R::zero(); g.len()]));
                    for (dst, &src) in entry.1.iter_mut().zip(g) {
                        *dst = *dst + src;
                    }
                }
                Some(rows) => {
                    let d = self.nodes[binding.node.0].shape[1];
                    let n = rows.iter().copied().max().map_or(0, |m| m + 1);
                    let entry = out
                        .entry(binding.name.clone())
                        .or_insert_with(|| (vec![n, d], vec![R::zero(); n * d]));
                    if entry.1.len() < n * d {
                        entry.1.resize(n * d, R::zero());
                        entry.0 = vec![n, d];
                    }
                    for (r, &src_row) in rows.iter().enumerate() {
                        for j in 0..d {
                            entry.1[src_row * d + j] = entry.1[src_row * d + j] + g[r * d + j];
                        }
                    }
                }
            }
        }
        out
    }

    /// Harvest backward results into the parameter store's grad buffers.
    /// Full-shape grads are written at parameter size even when a row lease
    /// touched only a prefix of the rows.
    pub fn accumulate_param_grads(
        &self,
        grads: &Gradients<R>,
        params: &mut super::Params<R>,
    ) -> Result<()> {
        for binding in &self.bindings {
            let g = match grads.get(binding.node) {
                Some(g) => g,
                None => continue,
            };
            let p = params.get_mut(&binding.name)?;
            let d = if p.shape.len() == 2 { p.shape[1] } else { 0 };
            let grad = p.grad_mut();
            match &binding.rows {
                None => {
                    for (dst, &src) in grad.iter_mut().zip(g) {
                        *dst = *dst + src;
                    }
                }
                Some(rows) => {
                    for (r, &src_row) in rows.iter().enumerate() {
                        for j in 0..d {
                            grad[src_row * d + j] = grad[src_row * d + j] + g[r * d + j];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
