use super::{numel, Real, Tensor};
use crate::error::{invalid, shape_err, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Add(usize, usize),
    AddBias(usize, usize),
    Scale(usize, T),
    Mul(usize, usize),
    MulAlong {
        x: usize,
        v: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Reshape(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu { x: usize, dy: Vec<T> },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Concat {
        xs: Vec<usize>,
        outer: usize,
        sizes: Vec<usize>,
        inner: usize,
    },
    Narrow {
        x: usize,
        outer: usize,
        n: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Gather {
        x: usize,
        outer: usize,
        n: usize,
        idx: Vec<usize>,
        inner: usize,
    },
    Sum(usize),
    Mean(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SoftCrossEntropy {
        logits: usize,
        target: Vec<T>,
        probs: Vec<T>,
    },
    Mse(usize, usize),
    Kl {
        q: usize,
        p: Vec<T>,
        row_weights: Vec<T>,
        eps: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// A tape of operations. Nodes are appended in execution order, which is a
/// topological order, and `backward` walks them in exact reverse.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let rank = out_shape.len();
    // Trailing axes that stay in place are copied as contiguous blocks.
    let mut fixed = 0;
    while fixed < rank && perm[rank - 1 - fixed] == rank - 1 - fixed {
        fixed += 1;
    }
    if fixed == rank {
        return (data.to_vec(), out_shape);
    }
    let block: usize = shape[rank - fixed..].iter().product();
    let outer_rank = rank - fixed;
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm[..outer_rank].iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; outer_rank];
    let mut off = 0usize;
    for _ in 0..data.len() / block.max(1) {
        out.extend_from_slice(&data[off..off + block]);
        for d in (0..outer_rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn softmax_rows<T: Real>(x: &[T], cols: usize, out: &mut [T]) {
    for (row, o) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - max).exp();
            sum = sum + *oi;
        }
        let inv = T::one() / sum;
        o.iter_mut().for_each(|v| *v = *v * inv);
    }
}

struct GeluConsts<T> {
    c: T,
    a: T,
    a3: T,
    half: T,
    two: T,
}

impl<T: Real> GeluConsts<T> {
    fn new() -> Self {
        Self {
            c: T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
            a: T::from_f64_lossy(0.044715),
            a3: T::from_f64_lossy(3.0 * 0.044715),
            half: T::from_f64_lossy(0.5),
            two: T::from_f64_lossy(2.0),
        }
    }

    /// Tanh-approximated GELU and its derivative.
    #[inline]
    fn eval(&self, x: T) -> (T, T) {
        let x2 = x * x;
        let u = self.c * x * (T::one() + self.a * x2);
        // tanh(u) = 1 - 2 / (exp(2u) + 1); saturates cleanly for large |u|.
        let t = T::one() - self.two / ((self.two * u).exp() + T::one());
        let y = self.half * x * (T::one() + t);
        let dy = self.half * (T::one() + t) + self.half * x * (T::one() - t * t) * self.c * (T::one() + self.a3 * x2);
        (y, dy)
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. `requires_grad` leaves receive gradients on `backward`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

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
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`, if any
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    // ----- linear algebra -------------------------------------------------

    /// `a · b`. With a rank-2 `b`, all leading axes of `a` are flattened into
    /// rows. With rank ≥ 3, leading axes must agree and the product is
    /// batched over them.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true)
    }

    fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("operands need rank >= 2, got {sa:?} and {sb:?}")));
        }
        let k = sa[sa.len() - 1];
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!("inner extents differ: {sa:?} x {sb:?}{}", if trans_b { "ᵀ" } else { "" }),
            ));
        }
        let shared_b = sb.len() == 2;
        let (batch, m, out_shape) = if shared_b {
            let m = numel(&sa[..sa.len() - 1]);
            let mut os = sa[..sa.len() - 1].to_vec();
            os.push(n);
            (1, m, os)
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(shape_err("matmul", format!("batch axes differ: {sa:?} vs {sb:?}")));
            }
            let batch = numel(&sa[..sa.len() - 2]);
            let m = sa[sa.len() - 2];
            let mut os = sa[..sa.len() - 1].to_vec();
            os.push(n);
            (batch, m, os)
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.nodes[a.0].value.data();
            let bv = self.nodes[b.0].value.data();
            let bs = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            for bi in 0..batch {
                let boff = if shared_b { 0 } else { bi * k * n };
                T::gemm(
                    m,
                    k,
                    n,
                    &av[bi * m * k..(bi + 1) * m * k],
                    (k as isize, 1),
                    &bv[boff..boff + k * n],
                    bs,
                    T::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    (n as isize, 1),
                );
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            &[a.0, b.0],
        ))
    }

    // ----- elementwise ------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| *x + *y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    /// Adds a rank-1 `bias` along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sb.len() != 1 || sx.last() != sb.first() {
            return Err(shape_err("add_bias", format!("bias {sb:?} does not match last axis of {sx:?}")));
        }
        let n = sb[0];
        let bv = self.nodes[bias.0].value.data();
        let data = self.nodes[x.0]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| *v + bv[i % n])
            .collect();
        let value = Tensor::new(sx, data)?;
        Ok(self.push(value, Op::AddBias(x.0, bias.0), &[x.0, bias.0]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let data = self.nodes[x.0].value.data().iter().map(|v| *v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(x.0, c), &[x.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| *x * *y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    /// Multiplies every slice of `x` along `axis` by the matching entry of
    /// the rank-1 `v`. This is how gate variables enter the graph.
    pub fn mul_along(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sv = self.shape(v).to_vec();
        if axis >= sx.len() || sv.len() != 1 || sv[0] != sx[axis] {
            return Err(shape_err("mul_along", format!("gate {sv:?} vs axis {axis} of {sx:?}")));
        }
        let (outer, n, inner) = split_axis(&sx, axis);
        let vv = self.nodes[v.0].value.data();
        let xv = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(xv.len());
        for o in 0..outer {
            for (j, &g) in vv.iter().enumerate() {
                let base = (o * n + j) * inner;
                data.extend(xv[base..base + inner].iter().map(|e| *e * g));
            }
        }
        let value = Tensor::new(sx, data)?;
        Ok(self.push(value, Op::MulAlong { x: x.0, v: v.0, outer, n, inner }, &[x.0, v.0]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let k = GeluConsts::new();
        let xv = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(xv.len());
        let mut dy = Vec::with_capacity(xv.len());
        for v in xv {
            let (y, d) = k.eval(*v);
            data.push(y);
            dy.push(d);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu { x: x.0, dy }, &[x.0])
    }

    // ----- layout -----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x.0), &[x.0]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} is not a permutation of axes of {sx:?}")));
        }
        let (data, shape) = permute_data(self.nodes[x.0].value.data(), &sx, perm);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Permute { x: x.0, perm: perm.to_vec() }, &[x.0]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {s0:?}")));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for x in xs {
            let s = self.shape(*x);
            if s.len() != s0.len() || s.iter().enumerate().any(|(d, e)| d != axis && *e != s0[d]) {
                return Err(shape_err("concat", format!("{s:?} incompatible with {s0:?} on axis {axis}")));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (x, &sz) in xs.iter().zip(&sizes) {
                let xv = self.nodes[x.0].value.data();
                data.extend_from_slice(&xv[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        Ok(self.push(value, Op::Concat { xs: ids.clone(), outer, sizes, inner }, &ids))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start + len > sx[axis] || len == 0 {
            return Err(shape_err("narrow", format!("[{start}, {}) on axis {axis} of {sx:?}", start + len)));
        }
        let (outer, n, inner) = split_axis(&sx, axis);
        let xv = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&xv[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Narrow { x: x.0, outer, n, start, len, inner }, &[x.0]))
    }

    /// Selects the slices `idx` along `axis`, in the given order.
    pub fn gather(&mut self, x: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || idx.is_empty() || idx.iter().any(|&i| i >= sx[axis]) {
            return Err(shape_err("gather", format!("indices out of range for axis {axis} of {sx:?}")));
        }
        let (outer, n, inner) = split_axis(&sx, axis);
        let xv = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in idx {
                data.extend_from_slice(&xv[(o * n + i) * inner..(o * n + i + 1) * inner]);
            }
        }
        let mut shape = sx;
        shape[axis] = idx.len();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Gather { x: x.0, outer, n, idx: idx.to_vec(), inner },
            &[x.0],
        ))
    }

    /// Row lookup into a `(vocab, width)` table. Output shape `(ids, width)`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(shape_err("embedding", format!("table must be rank 2, got {st:?}")));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= st[0]) {
            return Err(shape_err("embedding", format!("id {bad} out of range for {} rows", st[0])));
        }
        let w = st[1];
        let tv = self.nodes[table.0].value.data();
        let mut data = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            data.extend_from_slice(&tv[i * w..(i + 1) * w]);
        }
        let value = Tensor::new(vec![ids.len(), w], data)?;
        Ok(self.push(value, Op::Embedding { table: table.0, ids: ids.to_vec() }, &[table.0]))
    }

    // ----- normalisation ----------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().ok_or_else(|| shape_err("softmax", "scalar input has no axis"))?;
        if cols == 0 {
            return Err(shape_err("softmax", "softmax over an empty axis"));
        }
        let mut out = vec![T::zero(); numel(&sx)];
        softmax_rows(self.nodes[x.0].value.data(), cols, &mut out);
        let value = Tensor::new(sx, out)?;
        Ok(self.push(value, Op::Softmax(x.0), &[x.0]))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("affine {:?}/{:?} vs width {d}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).unwrap();
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (*v - mean) * r;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let value = Tensor::new(sx, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd },
            &[x.0, gamma.0, beta.0],
        ))
    }

    // ----- reductions and losses -------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.data();
        let s = v.iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(x.0), &[x.0])
    }

    fn rows_cols(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(shape_err(op, format!("expected non-empty (batch, classes), got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.rows_cols("cross_entropy", logits)?;
        if labels.len() != rows {
            return Err(shape_err("cross_entropy", format!("{} labels for {rows} rows", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(invalid(format!("label {bad} out of range for {cols} classes")));
        }
        let mut probs = vec![T::zero(); rows * cols];
        let lv = self.nodes[logits.0].value.data();
        softmax_rows(lv, cols, &mut probs);
        let mut total = T::zero();
        for (r, &l) in labels.iter().enumerate() {
            let row = &lv[r * cols..(r + 1) * cols];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|v| (*v - max).exp()).sum::<T>().ln() + max;
            total = total + (lse - row[l]);
        }
        let value = Tensor::scalar(total / T::from_usize(rows).unwrap());
        Ok(self.push(
            value,
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs },
            &[logits.0],
        ))
    }

    /// Mean over rows of `-Σ target · log softmax(logits)`; `target` is a
    /// constant distribution and receives no gradient.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let (rows, cols) = self.rows_cols("soft_cross_entropy", logits)?;
        if target.shape() != [rows, cols] {
            return Err(shape_err("soft_cross_entropy", format!("target {:?} vs logits ({rows}, {cols})", target.shape())));
        }
        let lv = self.nodes[logits.0].value.data();
        let mut probs = vec![T::zero(); rows * cols];
        softmax_rows(lv, cols, &mut probs);
        let mut total = T::zero();
        for r in 0..rows {
            let row = &lv[r * cols..(r + 1) * cols];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|v| (*v - max).exp()).sum::<T>().ln() + max;
            for c in 0..cols {
                let t = target.data()[r * cols + c];
                if t != T::zero() {
                    total = total - t * (row[c] - lse);
                }
            }
        }
        let value = Tensor::scalar(total / T::from_usize(rows).unwrap());
        Ok(self.push(
            value,
            Op::SoftCrossEntropy { logits: logits.0, target: target.data().to_vec(), probs },
            &[logits.0],
        ))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let s: T = av.iter().zip(bv).map(|(x, y)| (*x - *y) * (*x - *y)).sum();
        let value = Tensor::scalar(s / T::from_usize(av.len().max(1)).unwrap());
        Ok(self.push(value, Op::Mse(a.0, b.0), &[a.0, b.0]))
    }

    /// `Σ_r w_r Σ_c p (log p − log max(q, eps))` with rows over the last
    /// axis. `p` is a constant; `row_weights` defaults to uniform `1/rows`.
    pub fn kl_div(&mut self, p: &Tensor<T>, q: Var, row_weights: Option<&[T]>, eps: f64) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if p.shape() != sq.as_slice() {
            return Err(shape_err("kl_div", format!("{:?} vs {:?}", p.shape(), sq)));
        }
        let cols = *sq.last().ok_or_else(|| shape_err("kl_div", "scalar input"))?;
        if cols == 0 {
            return Err(shape_err("kl_div", "empty distribution axis"));
        }
        let rows = p.numel() / cols;
        let tol = 1e-5;
        let qv = self.nodes[q.0].value.data();
        for (name, data) in [("target", p.data()), ("prediction", qv)] {
            for (r, row) in data.chunks(cols).enumerate() {
                let s = row.iter().copied().sum::<T>().to_f64().unwrap_or(f64::NAN);
                if !((s - 1.0).abs() <= tol) || row.iter().any(|v| *v < T::zero()) {
                    return Err(invalid(format!("{name} row {r} is not a distribution (sums to {s})")));
                }
            }
        }
        let weights: Vec<T> = match row_weights {
            Some(w) if w.len() == rows => w.to_vec(),
            Some(w) => return Err(shape_err("kl_div", format!("{} row weights for {rows} rows", w.len()))),
            None => vec![T::one() / T::from_usize(rows).unwrap(); rows],
        };
        let epsv = T::from_f64_lossy(eps);
        let mut total = T::zero();
        for r in 0..rows {
            let w = weights[r];
            if w == T::zero() {
                continue;
            }
            let mut acc = T::zero();
            for c in 0..cols {
                let pi = p.data()[r * cols + c];
                if pi > T::zero() {
                    acc = acc + pi * (pi.ln() - qv[r * cols + c].max(epsv).ln());
                }
            }
            total = total + w * acc;
        }
        let value = Tensor::scalar(total);
        Ok(self.push(
            value,
            Op::Kl { q: q.0, p: p.data().to_vec(), row_weights: weights, eps: epsv },
            &[q.0],
        ))
    }

    // ----- backward ---------------------------------------------------------

    fn accumulate(&mut self, id: usize, contrib: &[T]) {
        let node = &mut self.nodes[id];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => add_into(g, contrib),
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    fn accumulate_with(&mut self, id: usize, f: impl FnOnce(&mut [T])) {
        let node = &mut self.nodes[id];
        if !node.requires_grad {
            return;
        }
        let n = node.value.numel();
        let g = node.grad.get_or_insert_with(|| vec![T::zero(); n]);
        f(g);
    }

    /// Reverse-mode sweep from a scalar `loss`. Clears previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn backward_op(&mut self, i: usize, op: &Op<T>, g: &[T]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b, batch, m, k, n, shared_b } => {
                if self.nodes[a].requires_grad {
                    let bv = self.nodes[b].value.data();
                    let mut da = vec![T::zero(); batch * m * k];
                    // dA = dC · op(B)ᵀ
                    let bt = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for bi in 0..batch {
                        let boff = if shared_b { 0 } else { bi * k * n };
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            &bv[boff..boff + k * n],
                            bt,
                            T::zero(),
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            (k as isize, 1),
                        );
                    }
                    self.accumulate(a, &da);
                }
                if self.nodes[b].requires_grad {
                    let av = self.nodes[a].value.data();
                    let mut db = vec![T::zero(); if shared_b { k * n } else { batch * k * n }];
                    for bi in 0..batch {
                        let boff = if shared_b { 0 } else { bi * k * n };
                        let beta = if shared_b && bi > 0 { T::one() } else { T::zero() };
                        let abuf = &av[bi * m * k..(bi + 1) * m * k];
                        let gbuf = &g[bi * m * n..(bi + 1) * m * n];
                        if trans_b {
                            // dB (n×k) = dCᵀ · A
                            T::gemm(n, m, k, gbuf, (1, n as isize), abuf, (k as isize, 1), beta, &mut db[boff..boff + k * n], (k as isize, 1));
                        } else {
                            // dB (k×n) = Aᵀ · dC
                            T::gemm(k, m, n, abuf, (1, k as isize), gbuf, (n as isize, 1), beta, &mut db[boff..boff + k * n], (n as isize, 1));
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::AddBias(x, b) => {
                self.accumulate(x, g);
                let n = self.nodes[b].value.numel();
                self.accumulate_with(b, |db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Scale(x, c) => {
                let d: Vec<T> = g.iter().map(|v| *v * c).collect();
                self.accumulate(x, &d);
            }
            Op::Mul(a, b) => {
                if self.nodes[a].requires_grad {
                    let d: Vec<T> = g.iter().zip(self.nodes[b].value.data()).map(|(g, y)| *g * *y).collect();
                    self.accumulate(a, &d);
                }
                if self.nodes[b].requires_grad {
                    let d: Vec<T> = g.iter().zip(self.nodes[a].value.data()).map(|(g, x)| *g * *x).collect();
                    self.accumulate(b, &d);
                }
            }
            Op::MulAlong { x, v, outer, n, inner } => {
                if self.nodes[x].requires_grad {
                    let vv = self.nodes[v].value.data();
                    let mut d = Vec::with_capacity(g.len());
                    for o in 0..outer {
                        for (j, &gate) in vv.iter().enumerate() {
                            let base = (o * n + j) * inner;
                            d.extend(g[base..base + inner].iter().map(|e| *e * gate));
                        }
                    }
                    self.accumulate(x, &d);
                }
                if self.nodes[v].requires_grad {
                    let xv = self.nodes[x].value.data();
                    let mut d = vec![T::zero(); n];
                    for o in 0..outer {
                        for (j, dj) in d.iter_mut().enumerate() {
                            let base = (o * n + j) * inner;
                            let s: T = g[base..base + inner].iter().zip(&xv[base..base + inner]).map(|(a, b)| *a * *b).sum();
                            *dj = *dj + s;
                        }
                    }
                    self.accumulate(v, &d);
                }
            }
            Op::Permute { x, ref perm } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let mut inv = vec![0; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                let (d, _) = permute_data(g, &out_shape, &inv);
                self.accumulate(x, &d);
            }
            Op::Reshape(x) => self.accumulate(x, g),
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let cols = *self.nodes[i].value.shape().last().unwrap();
                let mut d = Vec::with_capacity(g.len());
                for (yr, gr) in y.chunks(cols).zip(g.chunks(cols)) {
                    let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    d.extend(yr.iter().zip(gr).map(|(y, g)| *y * (*g - dot)));
                }
                self.accumulate(x, &d);
            }
            Op::LayerNorm { x, gamma, beta, ref xhat, ref rstd } => {
                let d = self.nodes[gamma].value.numel();
                let dn = T::from_usize(d).unwrap();
                if self.nodes[gamma].requires_grad || self.nodes[beta].requires_grad {
                    let mut dg = vec![T::zero(); d];
                    let mut dbeta = vec![T::zero(); d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + gr[j] * hr[j];
                            dbeta[j] = dbeta[j] + gr[j];
                        }
                    }
                    self.accumulate(gamma, &dg);
                    self.accumulate(beta, &dbeta);
                }
                if self.nodes[x].requires_grad {
                    let gv = self.nodes[gamma].value.data();
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gr, hr), r) in g.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                        let dh: Vec<T> = gr.iter().zip(gv).map(|(a, b)| *a * *b).collect();
                        let m1 = dh.iter().copied().sum::<T>() / dn;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| *a * *b).sum::<T>() / dn;
                        dx.extend(dh.iter().zip(hr).map(|(a, h)| *r * (*a - m1 - *h * m2)));
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::Gelu { x, ref dy } => {
                let d: Vec<T> = dy.iter().zip(g).map(|(a, b)| *a * *b).collect();
                self.accumulate(x, &d);
            }
            Op::Embedding { table, ref ids } => {
                let w = self.nodes[table].value.shape()[1];
                self.accumulate_with(table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * w..(id + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::Concat { ref xs, outer, ref sizes, inner } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&x, &sz) in xs.iter().zip(sizes) {
                    let mut d = Vec::with_capacity(outer * sz * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + sz * inner]);
                    }
                    self.accumulate(x, &d);
                    offset += sz;
                }
            }
            Op::Narrow { x, outer, n, start, len, inner } => {
                self.accumulate_with(x, |dx| {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        add_into(&mut dx[dst..dst + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Gather { x, outer, n, ref idx, inner } => {
                let k = idx.len();
                self.accumulate_with(x, |dx| {
                    for o in 0..outer {
                        for (p, &src) in idx.iter().enumerate() {
                            let dst = (o * n + src) * inner;
                            let from = (o * k + p) * inner;
                            add_into(&mut dx[dst..dst + inner], &g[from..from + inner]);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let n = self.nodes[x].value.numel();
                self.accumulate(x, &vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x].value.numel();
                let v = g[0] / T::from_usize(n).unwrap();
                self.accumulate(x, &vec![v; n]);
            }
            Op::CrossEntropy { logits, ref labels, ref probs } => {
                let rows = labels.len();
                let cols = probs.len() / rows;
                let s = g[0] / T::from_usize(rows).unwrap();
                let mut d: Vec<T> = probs.iter().map(|p| *p * s).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * cols + l] = d[r * cols + l] - s;
                }
                self.accumulate(logits, &d);
            }
            Op::SoftCrossEntropy { logits, ref target, ref probs } => {
                let cols = *self.nodes[logits].value.shape().last().unwrap();
                let rows = probs.len() / cols;
                let s = g[0] / T::from_usize(rows).unwrap();
                let mut d = Vec::with_capacity(probs.len());
                for (pr, tr) in probs.chunks(cols).zip(target.chunks(cols)) {
                    let tsum: T = tr.iter().copied().sum();
                    d.extend(pr.iter().zip(tr).map(|(p, t)| (*p * tsum - *t) * s));
                }
                self.accumulate(logits, &d);
            }
            Op::Mse(a, b) => {
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                let s = g[0] * T::from_f64_lossy(2.0) / T::from_usize(av.len().max(1)).unwrap();
                let da: Vec<T> = av.iter().zip(bv).map(|(x, y)| (*x - *y) * s).collect();
                if self.nodes[b].requires_grad {
                    let db: Vec<T> = da.iter().map(|v| -*v).collect();
                    self.accumulate(b, &db);
                }
                self.accumulate(a, &da);
            }
            Op::Kl { q, ref p, ref row_weights, eps } => {
                let qv = self.nodes[q].value.data();
                let cols = p.len() / row_weights.len();
                let mut d = vec![T::zero(); p.len()];
                for (r, w) in row_weights.iter().enumerate() {
                    for c in 0..cols {
                        let idx = r * cols + c;
                        if p[idx] > T::zero() && qv[idx] > eps {
                            d[idx] = -g[0] * *w * p[idx] / qv[idx];
                        }
                    }
                }
                self.accumulate(q, &d);
            }
        }
    }
}
