use super::{AutodiffError, Real, Result, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv1d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    MaxPool1d { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var },
    Dense { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Add { x: Var, y: Var },
    Affine { x: Var, scale: T },
    MulConst { x: Var, c: Vec<T> },
    Concat { x: Var, y: Var, outer: usize, cx: usize, cy: usize },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Max { x: Var, index: usize },
    Euclidean { x: Var, y: Var },
    GatherCols { x: Var, idx: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    GroupMeanRows { x: Var, groups: Vec<Vec<usize>> },
    WeightedSum { terms: Vec<(Var, T)> },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Tape of recorded operations.
///
/// Reductions (`sum`, `mean`, norms, pooling averages) accumulate in `f64`.
#[derive(Debug, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let rows = shape[0];
    (rows, shape[1..].iter().product())
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

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient of a leaf that requires grad.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are valid")
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a copy of `t`; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// 1-D convolution. `x: [B, Cin, L]`, `w: [Cout, Cin, K]`, `b: [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[1] || bs != [ws[0]] || stride == 0 {
            return Err(mismatch("conv1d", format!("x {xs:?}, w {ws:?}, b {bs:?}, stride {stride}")));
        }
        let (bn, cin, l) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if l + 2 * pad < k {
            return Err(mismatch("conv1d", format!("kernel {k} longer than padded input {l}+2*{pad}")));
        }
        let lout = (l + 2 * pad - k) / stride + 1;
        let ck = cin * k;
        let mut out = vec![T::zero(); bn * cout * lout];
        let mut col = vec![T::zero(); ck * lout];
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        for s in 0..bn {
            im2col(&xv[s * cin * l..(s + 1) * cin * l], cin, l, k, stride, pad, lout, &mut col);
            let o = &mut out[s * cout * lout..(s + 1) * cout * lout];
            for (co, row) in o.chunks_mut(lout).enumerate() {
                row.iter_mut().for_each(|v| *v = bv[co]);
            }
            T::gemm(cout, ck, lout, T::one(), (wv, ck, 1), (&col, lout, 1), T::one(), (o, lout, 1));
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(vec![bn, cout, lout], out, Op::Conv1d { x, w, b, stride, pad }, rg))
    }

    /// Max pooling over the last axis of `[B, C, L]`; ties go to the first index.
    pub fn maxpool1d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || k == 0 || stride == 0 || xs[2] < k {
            return Err(mismatch("maxpool1d", format!("x {xs:?}, k {k}, stride {stride}")));
        }
        let (bn, c, l) = (xs[0], xs[1], xs[2]);
        let lout = (l - k) / stride + 1;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(bn * c * lout);
        let mut argmax = Vec::with_capacity(bn * c * lout);
        for row in 0..bn * c {
            for t in 0..lout {
                let start = row * l + t * stride;
                let mut best = start;
                for i in start + 1..start + k {
                    if xv[i] > xv[best] {
                        best = i;
                    }
                }
                out.push(xv[best]);
                argmax.push(best);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![bn, c, lout], out, Op::MaxPool1d { x, argmax }, rg))
    }

    /// Mean over the last axis: `[B, C, L] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(mismatch("global_avg_pool", format!("x {xs:?}")));
        }
        let l = xs[2];
        let out = self
            .value(x)
            .chunks(l)
            .map(|r| T::of(r.iter().map(|v| v.as_f64()).sum::<f64>() / l as f64))
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![xs[0], xs[1]], out, Op::GlobalAvgPool { x }, rg))
    }

    /// Fully connected layer. `x: [B, In]`, `w: [Out, In]`, `b: [Out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(mismatch("dense", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (bn, din, dout) = (xs[0], xs[1], ws[0]);
        let bv = self.value(b);
        let mut out: Vec<T> = (0..bn).flat_map(|_| bv.iter().copied()).collect();
        T::gemm(bn, din, dout, T::one(), (self.value(x), din, 1), (self.value(w), 1, din), T::one(), (&mut out, dout, 1));
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(vec![bn, dout], out, Op::Dense { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(&[x]));
        self.push(shape, out, Op::Relu { x }, rg)
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        if self.shape(x) != self.shape(y) {
            return Err(mismatch("add", format!("{:?} vs {:?}", self.shape(x), self.shape(y))));
        }
        let out = self.value(x).iter().zip(self.value(y)).map(|(&a, &b)| a + b).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(&[x, y]));
        Ok(self.push(shape, out, Op::Add { x, y }, rg))
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).iter().map(|&v| scale * v + shift).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(&[x]));
        self.push(shape, out, Op::Affine { x, scale }, rg)
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(mismatch("mul_const", format!("x {:?}, constant of {}", self.shape(x), c.len())));
        }
        let out = self.value(x).iter().zip(&c).map(|(&a, &b)| a * b).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(&[x]));
        Ok(self.push(shape, out, Op::MulConst { x, c }, rg))
    }

    /// Concatenation along `axis`; every other dimension must agree.
    pub fn concat(&mut self, x: Var, y: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ys = self.shape(y).to_vec();
        let compatible = xs.len() == ys.len()
            && axis < xs.len()
            && xs.iter().zip(&ys).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(mismatch("concat", format!("{xs:?} vs {ys:?} on axis {axis}")));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let (cx, cy) = (xs[axis] * inner, ys[axis] * inner);
        let (xv, yv) = (self.value(x), self.value(y));
        let mut out = Vec::with_capacity(xv.len() + yv.len());
        for o in 0..outer {
            out.extend_from_slice(&xv[o * cx..(o + 1) * cx]);
            out.extend_from_slice(&yv[o * cy..(o + 1) * cy]);
        }
        let mut shape = xs;
        shape[axis] += ys[axis];
        let rg = self.rg(&[x, y]);
        Ok(self.push(shape, out, Op::Concat { x, y, outer, cx, cy }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        let mut out = Vec::with_capacity(self.value(x).len());
        for r in self.value(x).chunks(d) {
            let m = r.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let e: Vec<f64> = r.iter().map(|&v| (v - m).as_f64().exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| T::of(v / s)));
        }
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::Softmax { x }, rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        let mut out = Vec::with_capacity(self.value(x).len());
        for r in self.value(x).chunks(d) {
            let m = r.iter().fold(T::neg_infinity(), |a, &b| a.max(b)).as_f64();
            let lse = m + r.iter().map(|&v| (v.as_f64() - m).exp()).sum::<f64>().ln();
            out.extend(r.iter().map(|&v| T::of(v.as_f64() - lse)));
        }
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::LogSoftmax { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v.as_f64()).sum::<f64>();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![T::of(s)], Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.iter().map(|v| v.as_f64()).sum::<f64>() / xv.len() as f64;
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![T::of(s)], Op::Mean { x }, rg)
    }

    /// Maximum over all elements; the gradient goes to the first maximal entry.
    pub fn max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut index = 0;
        for (i, v) in xv.iter().enumerate() {
            if *v > xv[index] {
                index = i;
            }
        }
        let v = xv[index];
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![v], Op::Max { x, index }, rg)
    }

    /// Row-wise Euclidean distance between two `[B, D]` (or `[B]`) tensors.
    pub fn euclidean(&mut self, x: Var, y: Var) -> Result<Var> {
        if self.shape(x) != self.shape(y) {
            return Err(mismatch("euclidean", format!("{:?} vs {:?}", self.shape(x), self.shape(y))));
        }
        let (rows, d) = rows_cols(self.shape(x));
        let (xv, yv) = (self.value(x), self.value(y));
        let out = (0..rows)
            .map(|r| {
                let s: f64 = (0..d)
                    .map(|j| {
                        let diff = xv[r * d + j].as_f64() - yv[r * d + j].as_f64();
                        diff * diff
                    })
                    .sum();
                T::of(s.sqrt())
            })
            .collect();
        let rg = self.rg(&[x, y]);
        Ok(self.push(vec![rows], out, Op::Euclidean { x, y }, rg))
    }

    /// Picks `x[i, idx[i]]` from a `[B, C]` tensor.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || idx.len() != xs[0] || idx.iter().any(|&i| i >= xs[1]) {
            return Err(mismatch("gather_cols", format!("x {xs:?}, {} indices", idx.len())));
        }
        let xv = self.value(x);
        let out = idx.iter().enumerate().map(|(r, &c)| xv[r * xs[1] + c]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![xs[0]], out, Op::GatherCols { x, idx: idx.to_vec() }, rg))
    }

    /// Stacks rows `x[idx[0]], x[idx[1]], ...` of a `[N, D]` tensor.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (rows, d) = rows_cols(&xs);
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(mismatch("gather_rows", format!("x {xs:?}, indices {idx:?}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        let mut shape = xs;
        shape[0] = idx.len();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// One output row per group: the mean of the listed rows of `x`.
    pub fn group_mean_rows(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (rows, d) = rows_cols(&xs);
        if groups.is_empty() || groups.iter().any(|g| g.is_empty() || g.iter().any(|&i| i >= rows)) {
            return Err(mismatch("group_mean_rows", format!("x {xs:?}, groups must be non-empty and in range")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(groups.len() * d);
        for g in &groups {
            for j in 0..d {
                let s: f64 = g.iter().map(|&i| xv[i * d + j].as_f64()).sum();
                out.push(T::of(s / g.len() as f64));
            }
        }
        let mut shape = xs;
        shape[0] = groups.len();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::GroupMeanRows { x, groups }, rg))
    }

    /// `sum_i c_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        if let Some((v, _)) = terms.iter().find(|(v, _)| self.value(*v).len() != 1) {
            return Err(mismatch("weighted_sum", format!("term has shape {:?}", self.shape(*v))));
        }
        let s: f64 = terms.iter().map(|(v, c)| c.as_f64() * self.scalar(*v).as_f64()).sum();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(vec![1], vec![T::of(s)], Op::WeightedSum { terms: terms.to_vec() }, rg))
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a = *a + *v),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backprop(i, &g, &mut adj);
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, stride, pad } => {
                let xs = self.shape(*x);
                let (bn, cin, l) = (xs[0], xs[1], xs[2]);
                let ws = self.shape(*w);
                let (cout, k) = (ws[0], ws[2]);
                let lout = node.shape[2];
                let ck = cin * k;
                let (xv, wv) = (self.value(*x), self.value(*w));
                let mut col = vec![T::zero(); ck * lout];
                let mut dcol = vec![T::zero(); ck * lout];
                let need_w = self.needs(*w);
                let need_x = self.needs(*x);
                let mut dw = vec![T::zero(); cout * ck];
                let mut dx = vec![T::zero(); if need_x { xv.len() } else { 0 }];
                for s in 0..bn {
                    let gs = &g[s * cout * lout..(s + 1) * cout * lout];
                    if need_w {
                        im2col(&xv[s * cin * l..(s + 1) * cin * l], cin, l, k, *stride, *pad, lout, &mut col);
                        T::gemm(cout, lout, ck, T::one(), (gs, lout, 1), (&col, 1, lout), T::one(), (&mut dw, ck, 1));
                    }
                    if need_x {
                        T::gemm(ck, cout, lout, T::one(), (wv, 1, ck), (gs, lout, 1), T::zero(), (&mut dcol, lout, 1));
                        col2im_add(&dcol, cin, l, k, *stride, *pad, lout, &mut dx[s * cin * l..(s + 1) * cin * l]);
                    }
                }
                if need_w {
                    add_into(adj, *w, &dw);
                }
                if need_x {
                    add_into(adj, *x, &dx);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0f64; cout];
                    for (r, row) in g.chunks(lout).enumerate() {
                        db[r % cout] += row.iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let db: Vec<T> = db.into_iter().map(T::of).collect();
                    add_into(adj, *b, &db);
                }
            }
            Op::MaxPool1d { x, argmax } => {
                if self.needs(*x) {
                    let buf = slot(adj, *x, self.value(*x).len());
                    for (gi, &src) in g.iter().zip(argmax) {
                        buf[src] = buf[src] + *gi;
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.needs(*x) {
                    let l = self.shape(*x)[2];
                    let inv = T::of(1.0 / l as f64);
                    let buf = slot(adj, *x, self.value(*x).len());
                    for (r, gi) in g.iter().enumerate() {
                        buf[r * l..(r + 1) * l].iter_mut().for_each(|v| *v = *v + *gi * inv);
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let (bn, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[0];
                if self.needs(*x) {
                    let buf = slot(adj, *x, bn * din);
                    T::gemm(bn, dout, din, T::one(), (g, dout, 1), (self.value(*w), din, 1), T::one(), (buf, din, 1));
                }
                if self.needs(*w) {
                    let buf = slot(adj, *w, dout * din);
                    T::gemm(dout, bn, din, T::one(), (g, 1, dout), (self.value(*x), din, 1), T::one(), (buf, din, 1));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0f64; dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v.as_f64());
                    }
                    let db: Vec<T> = db.into_iter().map(T::of).collect();
                    add_into(adj, *b, &db);
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let buf = slot(adj, *x, xv.len());
                    for ((a, gi), xi) in buf.iter_mut().zip(g).zip(xv) {
                        if *xi > T::zero() {
                            *a = *a + *gi;
                        }
                    }
                }
            }
            Op::Add { x, y } => {
                for v in [x, y] {
                    if self.needs(*v) {
                        add_into(adj, *v, g);
                    }
                }
            }
            Op::Affine { x, scale } => {
                if self.needs(*x) {
                    let buf = slot(adj, *x, g.len());
                    buf.iter_mut().zip(g).for_each(|(a, gi)| *a = *a + *gi * *scale);
                }
            }
            Op::MulConst { x, c } => {
                if self.needs(*x) {
                    let buf = slot(adj, *x, g.len());
                    for ((a, gi), ci) in buf.iter_mut().zip(g).zip(c) {
                        *a = *a + *gi * *ci;
                    }
                }
            }
            Op::Concat { x, y, outer, cx, cy } => {
                let (cx, cy) = (*cx, *cy);
                if self.needs(*x) {
                    let buf = slot(adj, *x, outer * cx);
                    for o in 0..*outer {
                        let src = &g[o * (cx + cy)..o * (cx + cy) + cx];
                        buf[o * cx..(o + 1) * cx].iter_mut().zip(src).for_each(|(a, v)| *a = *a + *v);
                    }
                }
                if self.needs(*y) {
                    let buf = slot(adj, *y, outer * cy);
                    for o in 0..*outer {
                        let src = &g[o * (cx + cy) + cx..(o + 1) * (cx + cy)];
                        buf[o * cy..(o + 1) * cy].iter_mut().zip(src).for_each(|(a, v)| *a = *a + *v);
                    }
                }
            }
            Op::Softmax { x } => {
                if self.needs(*x) {
                    let d = *node.shape.last().expect("shape");
                    let buf = slot(adj, *x, g.len());
                    for ((yr, gr), br) in node.value.chunks(d).zip(g.chunks(d)).zip(buf.chunks_mut(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        for j in 0..d {
                            br[j] = br[j] + T::of(yr[j].as_f64() * (gr[j].as_f64() - dot));
                        }
                    }
                }
            }
            Op::LogSoftmax { x } => {
                if self.needs(*x) {
                    let d = *node.shape.last().expect("shape");
                    let buf = slot(adj, *x, g.len());
                    for ((yr, gr), br) in node.value.chunks(d).zip(g.chunks(d)).zip(buf.chunks_mut(d)) {
                        let gs: f64 = gr.iter().map(|v| v.as_f64()).sum();
                        for j in 0..d {
                            br[j] = br[j] + T::of(gr[j].as_f64() - yr[j].as_f64().exp() * gs);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let buf = slot(adj, *x, self.value(*x).len());
                    buf.iter_mut().for_each(|a| *a = *a + g[0]);
                }
            }
            Op::Mean { x } => {
                if self.needs(*x) {
                    let n = self.value(*x).len();
                    let gi = T::of(g[0].as_f64() / n as f64);
                    let buf = slot(adj, *x, n);
                    buf.iter_mut().for_each(|a| *a = *a + gi);
                }
            }
            Op::Max { x, index } => {
                if self.needs(*x) {
                    let buf = slot(adj, *x, self.value(*x).len());
                    buf[*index] = buf[*index] + g[0];
                }
            }
            Op::Euclidean { x, y } => {
                let (rows, d) = rows_cols(self.shape(*x));
                let (xv, yv) = (self.value(*x), self.value(*y));
                let mut dx = vec![T::zero(); rows * d];
                for r in 0..rows {
                    let n = node.value[r].as_f64();
                    if n == 0.0 {
                        continue;
                    }
                    let f = g[r].as_f64() / n;
                    for j in 0..d {
                        let k = r * d + j;
                        dx[k] = T::of(f * (xv[k].as_f64() - yv[k].as_f64()));
                    }
                }
                if self.needs(*x) {
                    add_into(adj, *x, &dx);
                }
                if self.needs(*y) {
                    let buf = slot(adj, *y, rows * d);
                    buf.iter_mut().zip(&dx).for_each(|(a, v)| *a = *a - *v);
                }
            }
            Op::GatherCols { x, idx } => {
                if self.needs(*x) {
                    let c = self.shape(*x)[1];
                    let buf = slot(adj, *x, self.value(*x).len());
                    for (r, (&col, gi)) in idx.iter().zip(g).enumerate() {
                        buf[r * c + col] = buf[r * c + col] + *gi;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if self.needs(*x) {
                    let (_, d) = rows_cols(self.shape(*x));
                    let buf = slot(adj, *x, self.value(*x).len());
                    for (o, &src) in idx.iter().enumerate() {
                        for j in 0..d {
                            buf[src * d + j] = buf[src * d + j] + g[o * d + j];
                        }
                    }
                }
            }
            Op::GroupMeanRows { x, groups } => {
                if self.needs(*x) {
                    let (_, d) = rows_cols(self.shape(*x));
                    let buf = slot(adj, *x, self.value(*x).len());
                    for (o, grp) in groups.iter().enumerate() {
                        let inv = T::of(1.0 / grp.len() as f64);
                        for &src in grp {
                            for j in 0..d {
                                buf[src * d + j] = buf[src * d + j] + g[o * d + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::WeightedSum { terms } => {
                for (v, c) in terms {
                    if self.needs(*v) {
                        add_into(adj, *v, &[g[0] * *c]);
                    }
                }
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn slot<T: Real>(adj: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    adj[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(adj: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    let buf = slot(adj, v, g.len());
    buf.iter_mut().zip(g).for_each(|(a, b)| *a = *a + *b);
}

/// Unfolds one sample `[Cin, L]` into `[Cin*K, Lout]` with zero padding.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], cin: usize, l: usize, k: usize, stride: usize, pad: usize, lout: usize, col: &mut [T]) {
    for c in 0..cin {
        for j in 0..k {
            let row = &mut col[(c * k + j) * lout..(c * k + j + 1) * lout];
            for (t, v) in row.iter_mut().enumerate() {
                let pos = (t * stride + j) as isize - pad as isize;
                *v = if pos >= 0 && (pos as usize) < l { x[c * l + pos as usize] } else { T::zero() };
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Real>(dcol: &[T], cin: usize, l: usize, k: usize, stride: usize, pad: usize, lout: usize, dx: &mut [T]) {
    for c in 0..cin {
        for j in 0..k {
            let row = &dcol[(c * k + j) * lout..(c * k + j + 1) * lout];
            for (t, v) in row.iter().enumerate() {
                let pos = (t * stride + j) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < l {
                    dx[c * l + pos as usize] = dx[c * l + pos as usize] + *v;
                }
            }
        }
    }
}
