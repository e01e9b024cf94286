use super::{shape_err, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    GatherRows { table: Var, rows: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Gelu(Var),
    Tanh(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        norms: Vec<T>,
        eps: T,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<T>,
        scale: T,
    },
    Im2Col(Var, ConvGeometry),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
///
/// Every input of every node was produced earlier on the same tape, so the
/// node list is already a topological order.
#[derive(Debug)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` when `v` is not
    /// connected to the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but returns zeros for unreachable values.
    pub fn dense(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        let shape = tape.value(v).shape().to_vec();
        match self.get(v) {
            Some(g) => Tensor::from_vec(shape, g.to_vec()).expect("gradient matches value"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    let nb: usize = b.iter().product();
    nb == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b)
}

fn acc<T: Scalar>(slot: &mut Option<Vec<T>>, n: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); n])
}

/// For each flat index of the permuted output, the flat index it reads.
fn permute_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = in_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..numel {
        map.push(src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::lit(3.0) * k * x * x);
    (y, dy)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcastable(sa, sb) {
            return Err(shape_err(name, format!("{sa:?} vs {sb:?}")));
        }
        let shape = sa.to_vec();
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(da.len());
        for chunk in da.chunks_exact(db.len()) {
            out.extend(chunk.iter().zip(db).map(|(&x, &y)| f(x, y)));
        }
        let rg = self.rg(&[a, b]);
        self.push(name, Tensor { shape, data: out }, op, rg)
    }

    /// Elementwise sum; `b` may broadcast when its shape is a suffix of
    /// `a`'s or it holds a single element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, TensorError> {
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().map(|&x| x * c).collect(),
        };
        let rg = self.rg(&[a]);
        self.push("scale", value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var, TensorError> {
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().map(|&x| x + c).collect(),
        };
        let rg = self.rg(&[a]);
        self.push("add_scalar", value, Op::AddScalar(a), rg)
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.data(a), k, 1, self.data(b), n, 1, T::zero(), &mut out, n, 1);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg)
    }

    /// Batched product over identical leading dimensions:
    /// `[..., m, k] · [..., k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let r = sa.len();
        if r < 3 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let groups: usize = sa[..r - 2].iter().product();
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let mut out = vec![T::zero(); groups * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for g in 0..groups {
            T::gemm(
                m,
                k,
                n,
                &da[g * m * k..(g + 1) * m * k],
                k,
                1,
                &db[g * k * n..(g + 1) * k * n],
                n,
                1,
                T::zero(),
                &mut out[g * m * n..(g + 1) * m * n],
                n,
                1,
            );
        }
        let rg = self.rg(&[a, b]);
        self.push("bmm", Tensor { shape, data: out }, Op::BatchMatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        if self.shape(a).len() != 2 {
            return Err(shape_err("transpose", format!("{:?} is not a matrix", self.shape(a))));
        }
        self.permute(a, &[1, 0])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} for {sa:?}")));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let src = self.data(a);
        let data = permute_map(sa, perm).into_iter().map(|i| src[i]).collect();
        let rg = self.rg(&[a]);
        self.push("permute", Tensor { shape, data }, Op::Permute(a, perm.to_vec()), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[a]);
        self.push("reshape", value, Op::Reshape(a), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(shape_err("concat", format!("{s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                data.extend_from_slice(&self.data(v)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        self.push("concat", Tensor { shape, data }, Op::Concat(inputs.to_vec(), axis), rg)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || len == 0 || start + len > sa[axis] {
            return Err(shape_err("slice", format!("[{start}..{}] on axis {axis} of {sa:?}", start + len)));
        }
        let (outer, full, inner) = split_axis(&sa, axis);
        let src = self.data(a);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let rg = self.rg(&[a]);
        self.push("slice", Tensor { shape, data }, Op::Slice { src: a, axis, start }, rg)
    }

    /// Selects rows (slices along axis 0) of `table`; used both for embedding
    /// lookup and for picking hidden states at given positions.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let st = self.shape(table).to_vec();
        if st.is_empty() {
            return Err(shape_err("gather_rows", "rank-0 table"));
        }
        if rows.is_empty() {
            return Err(shape_err("gather_rows", "no rows requested"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= st[0]) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                detail: format!("row {bad} out of range for {} rows", st[0]),
            });
        }
        let width: usize = st[1..].iter().product();
        let src = self.data(table);
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        let mut shape = st;
        shape[0] = rows.len();
        let rg = self.rg(&[table]);
        self.push(
            "gather_rows",
            Tensor { shape, data },
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.data(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let d = self.data(a);
        let s = d.iter().copied().sum::<T>() / T::from_usize(d.len()).unwrap();
        let rg = self.rg(&[a]);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), rg)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(shape_err("reduce_axis", format!("axis {axis} for {sa:?}")));
        }
        let (outer, len, inner) = split_axis(&sa, axis);
        let src = self.data(a);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &x) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += x;
                }
            }
        }
        if mean {
            let n = T::from_usize(len).unwrap();
            data.iter_mut().for_each(|x| *x /= n);
        }
        let mut shape = sa;
        shape.remove(axis);
        let rg = self.rg(&[a]);
        let op = if mean { Op::MeanAxis(a, axis) } else { Op::SumAxis(a, axis) };
        self.push("reduce_axis", Tensor { shape, data }, op, rg)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis(a, axis, true)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().map(|&x| gelu_parts(x).0).collect(),
        };
        let rg = self.rg(&[a]);
        self.push("gelu", value, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().map(|&x| x.tanh()).collect(),
        };
        let rg = self.rg(&[a]);
        self.push("tanh", value, Op::Tanh(a), rg)
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, log: bool) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(shape_err("softmax", format!("axis {axis} for {sa:?}")));
        }
        let (outer, len, inner) = split_axis(&sa, axis);
        let src = self.data(a);
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut max = T::neg_infinity();
                for l in 0..len {
                    max = max.max(src[at(l)]);
                }
                let mut total = T::zero();
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    data[at(l)] = e;
                    total += e;
                }
                if log {
                    let lse = total.ln();
                    for l in 0..len {
                        data[at(l)] = src[at(l)] - max - lse;
                    }
                } else {
                    for l in 0..len {
                        data[at(l)] /= total;
                    }
                }
            }
        }
        let rg = self.rg(&[a]);
        let op = if log { Op::LogSoftmax(a, axis) } else { Op::Softmax(a, axis) };
        self.push("softmax", Tensor { shape: sa, data }, op, rg)
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.softmax_impl(a, axis, true)
    }

    /// Normalizes over the last dimension then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| shape_err("layer_norm", "rank-0 input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("gain {:?} / bias {:?} for width {d}", self.shape(gain), self.shape(bias)),
            ));
        }
        let (src, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let rows = src.len() / d;
        let n = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            "layer_norm",
            Tensor { shape: sx, data: out },
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            rg,
        )
    }

    /// Scales every slice along `axis` to unit Euclidean norm. Slices with
    /// norm below `eps` are divided by `eps` instead.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: T) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(shape_err("l2_normalize", format!("axis {axis} for {sx:?}")));
        }
        let (outer, len, inner) = split_axis(&sx, axis);
        let src = self.data(x);
        let mut norms = vec![T::zero(); outer * inner];
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let nrm = (0..len).map(|l| src[at(l)] * src[at(l)]).sum::<T>().sqrt();
                norms[o * inner + i] = nrm;
                let denom = nrm.max(eps);
                for l in 0..len {
                    data[at(l)] = src[at(l)] / denom;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            "l2_normalize",
            Tensor { shape: sx, data },
            Op::L2Normalize { x, axis, norms, eps },
            rg,
        )
    }

    /// `−log softmax(logits)[target]` over rows whose target is not
    /// `ignore`, reduced by mean or sum.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
        reduction: Reduction,
    ) -> Result<Var, TensorError> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {sl:?} with {} targets", targets.len()),
            ));
        }
        let (rows, classes) = (sl[0], sl[1]);
        let active: Vec<bool> = targets.iter().map(|&t| Some(t) != ignore).collect();
        if let Some(&bad) = targets
            .iter()
            .zip(&active)
            .find(|(&t, &a)| a && t >= classes)
            .map(|(t, _)| t)
        {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                detail: format!("target {bad} outside {classes} classes"),
            });
        }
        let count = active.iter().filter(|&&a| a).count();
        if count == 0 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                detail: "every target is ignored".into(),
            });
        }
        let src = self.data(logits);
        let mut probs = vec![T::zero(); src.len()];
        let mut total = T::zero();
        for r in 0..rows {
            if !active[r] {
                continue;
            }
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            total += max + z.ln() - row[targets[r]];
        }
        let scale = match reduction {
            Reduction::Mean => T::one() / T::from_usize(count).unwrap(),
            Reduction::Sum => T::one(),
        };
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(total * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                scale,
            },
            rg,
        )
    }

    /// Unfolds `[B, H, W, C]` into `[B·Ho·Wo, k·k·C]` patches (zero padded),
    /// column order `(ky, kx, c)`.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || kernel == 0 || stride == 0 {
            return Err(shape_err("im2col", format!("{sx:?} kernel {kernel} stride {stride}")));
        }
        let (batch, height, width, channels) = (sx[0], sx[1], sx[2], sx[3]);
        if height + 2 * pad < kernel || width + 2 * pad < kernel {
            return Err(shape_err("im2col", format!("kernel {kernel} larger than padded input {sx:?}")));
        }
        let out_h = (height + 2 * pad - kernel) / stride + 1;
        let out_w = (width + 2 * pad - kernel) / stride + 1;
        let geom = ConvGeometry {
            batch,
            height,
            width,
            channels,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        };
        let cols = kernel * kernel * channels;
        let src = self.data(x);
        let mut data = vec![T::zero(); batch * out_h * out_w * cols];
        im2col_walk(&geom, |dst, s| data[dst] = src[s]);
        let rg = self.rg(&[x]);
        self.push(
            "im2col",
            Tensor {
                shape: vec![batch * out_h * out_w, cols],
                data,
            },
            Op::Im2Col(x, geom),
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`. The tape is left intact, so calling
    /// this twice yields identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (before, after) = grads.split_at_mut(i);
            let Some(g) = after[0].as_deref() else { continue };
            self.backprop(node, g, before);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, before: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if self.nodes[v.0].requires_grad {
            Some(acc(&mut before[v.0], self.nodes[v.0].value.numel()))
        } else {
            None
        }
    }

    fn backprop(&self, node: &Node<T>, g: &[T], before: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if let Some(ga) = self.slot(before, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.slot(before, *b) {
                    let nb = gb.len();
                    for chunk in g.chunks_exact(nb) {
                        gb.iter_mut().zip(chunk).for_each(|(x, &y)| *x += sign * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let nb = db.len();
                if let Some(ga) = self.slot(before, *a) {
                    for (gc, oc) in ga.chunks_exact_mut(nb).zip(g.chunks_exact(nb)) {
                        for j in 0..nb {
                            gc[j] += oc[j] * db[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(before, *b) {
                    for (ac, oc) in da.chunks_exact(nb).zip(g.chunks_exact(nb)) {
                        for j in 0..nb {
                            gb[j] += oc[j] * ac[j];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(before, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += *c * y);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.slot(before, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(before, *a) {
                    // dA += dC · Bᵀ
                    T::gemm(m, n, k, g, n, 1, db, 1, n, T::one(), ga, k, 1);
                }
                if let Some(gb) = self.slot(before, *b) {
                    // dB += Aᵀ · dC
                    T::gemm(k, m, n, da, 1, k, g, n, 1, T::one(), gb, n, 1);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let r = sa.len();
                let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
                let groups: usize = sa[..r - 2].iter().product();
                let (da, db) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(before, *a) {
                    for q in 0..groups {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[q * m * n..(q + 1) * m * n],
                            n,
                            1,
                            &db[q * k * n..(q + 1) * k * n],
                            1,
                            n,
                            T::one(),
                            &mut ga[q * m * k..(q + 1) * m * k],
                            k,
                            1,
                        );
                    }
                }
                if let Some(gb) = self.slot(before, *b) {
                    for q in 0..groups {
                        T::gemm(
                            k,
                            m,
                            n,
                            &da[q * m * k..(q + 1) * m * k],
                            1,
                            k,
                            &g[q * m * n..(q + 1) * m * n],
                            n,
                            1,
                            T::one(),
                            &mut gb[q * k * n..(q + 1) * k * n],
                            n,
                            1,
                        );
                    }
                }
            }
            Op::Permute(a, perm) => {
                let map = permute_map(self.shape(*a), perm);
                if let Some(ga) = self.slot(before, *a) {
                    for (o, &src) in map.iter().enumerate() {
                        ga[src] += g[o];
                    }
                }
            }
            Op::Concat(inputs, axis) => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if let Some(gv) = self.slot(before, v) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            gv[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, &y)| *x += y);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let (outer, full, inner) = split_axis(self.shape(*src), *axis);
                let len = node.value.shape()[*axis];
                if let Some(gs) = self.slot(before, *src) {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        gs[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::GatherRows { table, rows } => {
                let width: usize = self.shape(*table)[1..].iter().product();
                if let Some(gt) = self.slot(before, *table) {
                    for (j, &r) in rows.iter().enumerate() {
                        gt[r * width..(r + 1) * width]
                            .iter_mut()
                            .zip(&g[j * width..(j + 1) * width])
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = self.value(*a).numel();
                let v = if matches!(node.op, Op::Mean(_)) {
                    g[0] / T::from_usize(n).unwrap()
                } else {
                    g[0]
                };
                if let Some(ga) = self.slot(before, *a) {
                    ga.iter_mut().for_each(|x| *x += v);
                }
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                let scale = if matches!(node.op, Op::MeanAxis(..)) {
                    T::one() / T::from_usize(len).unwrap()
                } else {
                    T::one()
                };
                if let Some(ga) = self.slot(before, *a) {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                            dst.iter_mut()
                                .zip(&g[o * inner..(o + 1) * inner])
                                .for_each(|(x, &y)| *x += y * scale);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let da = self.data(*a);
                if let Some(ga) = self.slot(before, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * gelu_parts(da[i]).1;
                    }
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(ga) = self.slot(before, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * (T::one() - y[i] * y[i]);
                    }
                }
            }
            Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                let y = node.value.data();
                if let Some(ga) = self.slot(before, *a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            if log {
                                let total: T = (0..len).map(|l| g[at(l)]).sum();
                                for l in 0..len {
                                    ga[at(l)] += g[at(l)] - y[at(l)].exp() * total;
                                }
                            } else {
                                let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                                for l in 0..len {
                                    ga[at(l)] += y[at(l)] * (g[at(l)] - dot);
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let rows = xhat.len() / d;
                let gn = self.data(*gain);
                if let Some(gx) = self.slot(before, *x) {
                    let n = T::from_usize(d).unwrap();
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gn[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= n;
                        mean_dh_h /= n;
                        for j in 0..d {
                            let dh = gr[j] * gn[j];
                            gx[r * d + j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                if let Some(gg) = self.slot(before, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(before, *bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::L2Normalize { x, axis, norms, eps } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let y = node.value.data();
                if let Some(gx) = self.slot(before, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let nrm = norms[o * inner + i];
                            if nrm >= *eps {
                                let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                                for l in 0..len {
                                    gx[at(l)] += (g[at(l)] - y[at(l)] * dot) / nrm;
                                }
                            } else {
                                for l in 0..len {
                                    gx[at(l)] += g[at(l)] / *eps;
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                scale,
            } => {
                let classes = self.shape(*logits)[1];
                let coef = g[0] * *scale;
                if let Some(gl) = self.slot(before, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        let row = &mut gl[r * classes..(r + 1) * classes];
                        for (c, x) in row.iter_mut().enumerate() {
                            *x += coef * probs[r * classes + c];
                        }
                        row[t] -= coef;
                    }
                }
            }
            Op::Im2Col(x, geom) => {
                if let Some(gx) = self.slot(before, *x) {
                    im2col_walk(geom, |dst, s| gx[s] += g[dst]);
                }
            }
        }
    }
}

/// Visits every (patch-matrix index, input index) pair of a padded
/// convolution unfold. Padded positions are skipped.
fn im2col_walk(geom: &ConvGeometry, mut visit: impl FnMut(usize, usize)) {
    let ConvGeometry {
        batch,
        height,
        width,
        channels,
        kernel,
        stride,
        pad,
        out_h,
        out_w,
    } = *geom;
    let cols = kernel * kernel * channels;
    for b in 0..batch {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let row = ((b * out_h + oy) * out_w + ox) * cols;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= width as isize {
                            continue;
                        }
                        let src = ((b * height + iy as usize) * width + ix as usize) * channels;
                        let dst = row + (ky * kernel + kx) * channels;
                        for c in 0..channels {
                            visit(dst + c, src + c);
                        }
                    }
                }
            }
        }
    }
}
