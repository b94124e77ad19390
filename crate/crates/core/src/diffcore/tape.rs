use super::matrix::{gemm, Matrix, Real};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Rsqrt(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    ColMean(Var),
    ReduceMean(Var),
    SegmentMax(Var, Vec<usize>),
    SegmentMean(Var, Vec<usize>, Vec<usize>),
    SpMM(Var, Vec<(usize, usize, T)>),
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse scan.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}×{k} by {k2}×{n}")));
        }
        let mut out = Matrix::zeros(m, n);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            out.data_mut(),
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Matrix<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, format!("{sa:?} vs {sb:?}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Matrix::from_vec(sa.0, sa.1, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "subtract", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Matrix<T>> {
        let (n, c) = self.shape(a);
        let sr = self.shape(row);
        if sr != (1, c) {
            return Err(shape_err(name, format!("row {sr:?} against {n}×{c}")));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_exact_mut(c.max(1)) {
            for (v, &b) in chunk.iter_mut().zip(r) {
                *v = f(*v, b);
            }
        }
        Ok(out)
    }

    /// `a + row` with the `1×c` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "add_row", |x, b| x + b)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// `a ⊙ row` with the `1×c` row broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "mul_row", |x, b| x * b)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Matrix<T> {
        let v = self.value(a);
        Matrix::from_vec(v.rows(), v.cols(), v.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.map(a, |x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.map(a, |x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    /// Element-wise `x^(-1/2)`; fails on non-positive input.
    pub fn rsqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= T::zero()) {
            return Err(Error::Numeric("rsqrt of a non-positive value".into()));
        }
        let out = self.map(a, |x| x.sqrt().recip());
        let rg = self.rg(a);
        Ok(self.push(out, Op::Rsqrt(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
        let n = self.shape(first).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != n {
                return Err(shape_err("concat_cols", format!("row counts {n} and {r}")));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Matrix::from_vec(n, total, out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Output row `r` is input row `index[r]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (n, c) = self.shape(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidInput(format!(
                "gather_rows: index {bad} out of range for {n} rows"
            )));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(src.row(i));
        }
        let out = Matrix::from_vec(index.len(), c, out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows(a, index.to_vec()), rg))
    }

    /// Rows `start..start + len` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.shape(a);
        if start + len > n {
            return Err(shape_err(
                "slice_rows",
                format!("rows {start}..{} of {n}", start + len),
            ));
        }
        let out = Matrix::from_vec(len, c, self.value(a).data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    /// Per-column mean, `n×c → 1×c`.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.shape(a);
        if n == 0 {
            return Err(shape_err("col_mean", "zero rows".into()));
        }
        let mut acc = vec![T::zero(); c];
        for i in 0..n {
            for (s, &v) in acc.iter_mut().zip(self.value(a).row(i)) {
                *s += v;
            }
        }
        let inv = T::from_f64(1.0 / n as f64);
        acc.iter_mut().for_each(|s| *s *= inv);
        let rg = self.rg(a);
        Ok(self.push(Matrix::from_vec(1, c, acc)?, Op::ColMean(a), rg))
    }

    /// Mean over all entries, returned as `1×1`.
    pub fn reduce_mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.data().is_empty() {
            return Err(shape_err("reduce_mean", "empty input".into()));
        }
        let s: T = v.data().iter().copied().sum();
        let mean = s / T::from_f64(v.data().len() as f64);
        let rg = self.rg(a);
        Ok(self.push(Matrix::filled(1, 1, mean), Op::ReduceMean(a), rg))
    }

    fn check_segments(&self, name: &str, a: Var, segment_of: &[usize], m: usize) -> Result<Vec<usize>> {
        let n = self.shape(a).0;
        if segment_of.len() != n {
            return Err(shape_err(
                name,
                format!("{} segment ids for {n} rows", segment_of.len()),
            ));
        }
        let mut counts = vec![0usize; m];
        for &s in segment_of {
            if s >= m {
                return Err(Error::InvalidInput(format!(
                    "{name}: segment {s} out of range for {m}"
                )));
            }
            counts[s] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidInput(format!("{name}: segment {empty} is empty")));
        }
        Ok(counts)
    }

    /// Per-segment, per-column maximum, `n×c → m×c`. Gradient flows only to
    /// the first (lowest-index) row attaining each maximum.
    pub fn segment_max(&mut self, a: Var, segment_of: &[usize], m: usize) -> Result<Var> {
        self.check_segments("segment_max", a, segment_of, m)?;
        let c = self.shape(a).1;
        let src = self.value(a);
        let mut out = vec![T::neg_infinity(); m * c];
        let mut argmax = vec![usize::MAX; m * c];
        for (i, &s) in segment_of.iter().enumerate() {
            let row = src.row(i);
            let o = &mut out[s * c..(s + 1) * c];
            let am = &mut argmax[s * c..(s + 1) * c];
            for j in 0..c {
                if am[j] == usize::MAX || row[j] > o[j] {
                    o[j] = row[j];
                    am[j] = i;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Matrix::from_vec(m, c, out)?, Op::SegmentMax(a, argmax), rg))
    }

    /// Per-segment arithmetic mean, `n×c → m×c`. Empty segments are an error.
    pub fn segment_mean(&mut self, a: Var, segment_of: &[usize], m: usize) -> Result<Var> {
        let counts = self.check_segments("segment_mean", a, segment_of, m)?;
        let c = self.shape(a).1;
        let src = self.value(a);
        let mut out = vec![T::zero(); m * c];
        for (i, &s) in segment_of.iter().enumerate() {
            for (o, &v) in out[s * c..(s + 1) * c].iter_mut().zip(src.row(i)) {
                *o += v;
            }
        }
        for (s, &cnt) in counts.iter().enumerate() {
            let count = T::from_f64(cnt as f64);
            out[s * c..(s + 1) * c].iter_mut().for_each(|v| *v = *v / count);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Matrix::from_vec(m, c, out)?,
            Op::SegmentMean(a, segment_of.to_vec(), counts),
            rg,
        ))
    }

    /// Sparse-weighted row aggregation: `out[r] = Σ w · a[s]` over the
    /// `(r, s, w)` triples, producing `m` rows.
    pub fn spmm(&mut self, a: Var, entries: Vec<(usize, usize, T)>, m: usize) -> Result<Var> {
        let (n, c) = self.shape(a);
        let mut out = vec![T::zero(); m * c];
        let src = self.value(a);
        for &(r, s, w) in &entries {
            if r >= m || s >= n {
                return Err(Error::InvalidInput(format!(
                    "spmm: entry ({r},{s}) out of range for {m}×{n}"
                )));
            }
            for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(src.row(s)) {
                *o += w * v;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Matrix::from_vec(m, c, out)?, Op::SpMM(a, entries), rg))
    }

    /// Reverse sweep from `output`, seeding its gradient with ones.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = self.value(output);
        grads[output.0] = Some(vec![T::one(); seed.data().len()]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (n, c) = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let ga = slot(grads, *a, m * k);
                    gemm(m, c, k, g, false, bv, true, ga, true);
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let gb = slot(grads, *b, k * c);
                    gemm(k, m, c, av, true, g, false, gb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        axpy(slot(grads, v, g.len()), g, T::one());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    axpy(slot(grads, *a, g.len()), g, T::one());
                }
                if self.rg(*b) {
                    axpy(slot(grads, *b, g.len()), g, -T::one());
                }
            }
            Op::AddRow(a, r) => {
                if self.rg(*a) {
                    axpy(slot(grads, *a, g.len()), g, T::one());
                }
                if self.rg(*r) {
                    let gr = slot(grads, *r, c);
                    for row in g.chunks_exact(c) {
                        axpy(gr, row, T::one());
                    }
                }
            }
            Op::MulRow(a, r) => {
                let rv = self.value(*r).data();
                if self.rg(*a) {
                    let ga = slot(grads, *a, g.len());
                    for (gi, gsrc) in ga.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for ((o, &gv), &s) in gi.iter_mut().zip(gsrc).zip(rv) {
                            *o += gv * s;
                        }
                    }
                }
                if self.rg(*r) {
                    let av = self.value(*a).data();
                    let gr = slot(grads, *r, c);
                    for (arow, grow) in av.chunks_exact(c).zip(g.chunks_exact(c)) {
                        for ((o, &x), &gv) in gr.iter_mut().zip(arow).zip(grow) {
                            *o += x * gv;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.rg(*a) {
                    axpy(slot(grads, *a, g.len()), g, *s);
                }
            }
            Op::AddScalar(a) => {
                if self.rg(*a) {
                    axpy(slot(grads, *a, g.len()), g, T::one());
                }
            }
            Op::Square(a) => {
                let av = self.value(*a).data();
                let two = T::from_f64(2.0);
                let ga = slot(grads, *a, g.len());
                for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(av) {
                    *o += two * x * gv;
                }
            }
            Op::Rsqrt(a) => {
                let y = node.value.data();
                let half = T::from_f64(-0.5);
                let ga = slot(grads, *a, g.len());
                for ((o, &gv), &yv) in ga.iter_mut().zip(g).zip(y) {
                    *o += half * yv * yv * yv * gv;
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let ga = slot(grads, *a, g.len());
                for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(av) {
                    if x > T::zero() {
                        *o += gv;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if self.rg(p) {
                        let gp = slot(grads, p, n * pc);
                        for i in 0..n {
                            let src = &g[i * c + offset..i * c + offset + pc];
                            axpy(&mut gp[i * pc..(i + 1) * pc], src, T::one());
                        }
                    }
                    offset += pc;
                }
            }
            Op::GatherRows(a, index) => {
                let rows = self.shape(*a).0;
                let ga = slot(grads, *a, rows * c);
                for (r, &i) in index.iter().enumerate() {
                    axpy(&mut ga[i * c..(i + 1) * c], &g[r * c..(r + 1) * c], T::one());
                }
            }
            Op::SliceRows(a, start) => {
                let rows = self.shape(*a).0;
                let ga = slot(grads, *a, rows * c);
                axpy(&mut ga[start * c..(start + n) * c], g, T::one());
            }
            Op::ColMean(a) => {
                let rows = self.shape(*a).0;
                let inv = T::from_f64(1.0 / rows as f64);
                let ga = slot(grads, *a, rows * c);
                for row in ga.chunks_exact_mut(c) {
                    axpy(row, g, inv);
                }
            }
            Op::ReduceMean(a) => {
                let len = self.value(*a).data().len();
                let inv = g[0] / T::from_f64(len as f64);
                let ga = slot(grads, *a, len);
                ga.iter_mut().for_each(|o| *o += inv);
            }
            Op::SegmentMax(a, argmax) => {
                let rows = self.shape(*a).0;
                let ga = slot(grads, *a, rows * c);
                for (cell, &i) in argmax.iter().enumerate() {
                    ga[i * c + cell % c] += g[cell];
                }
            }
            Op::SegmentMean(a, segment_of, counts) => {
                let rows = self.shape(*a).0;
                let ga = slot(grads, *a, rows * c);
                for (i, &s) in segment_of.iter().enumerate() {
                    let inv = T::from_f64(1.0 / counts[s] as f64);
                    axpy(&mut ga[i * c..(i + 1) * c], &g[s * c..(s + 1) * c], inv);
                }
            }
            Op::SpMM(a, entries) => {
                let rows = self.shape(*a).0;
                let ga = slot(grads, *a, rows * c);
                for &(r, s, w) in entries {
                    axpy(&mut ga[s * c..(s + 1) * c], &g[r * c..(r + 1) * c], w);
                }
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], alpha: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Gradients of every trainable leaf reached by a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Raw gradient for `v`, or `None` when it was unreachable.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zero-filled when unreachable.
    pub fn get_or_zeros(&self, v: Var, tape: &Tape<T>) -> Matrix<T> {
        let (r, c) = tape.shape(v);
        match self.get(v) {
            Some(g) => Matrix::from_vec(r, c, g.to_vec()).expect("grad shape"),
            None => Matrix::zeros(r, c),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn relu_values_and_subgradient() {
        let mut t = Tape::new();
        let x = t.param(m(1, 3, &[-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let g = t.backward(y);
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let i = t.constant(Matrix::identity(2));
        let a = t.param(m(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let y = t.matmul(i, a).unwrap();
        assert_eq!(t.value(y), t.value(a));
        assert!(t.matmul(a, a).is_err());
    }

    #[test]
    fn mean_square_gradient_is_two_a_over_n() {
        let mut t = Tape::new();
        let a = t.param(m(1, 2, &[1.0, 2.0]));
        let s = t.square(a);
        let l = t.reduce_mean(s).unwrap();
        let g = t.backward(l);
        assert_eq!(g.get(a).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn segment_max_basics() {
        let mut t = Tape::new();
        let x = t.param(m(2, 1, &[1.0, 3.0]));
        let y = t.segment_max(x, &[0, 0], 1).unwrap();
        assert_eq!(t.value(y).data(), &[3.0]);
        let g = t.backward(y);
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0]);

        // singleton segments permute rows
        let x = t.param(m(3, 2, &[1., 2., 3., 4., 5., 6.]));
        let y = t.segment_max(x, &[2, 0, 1], 3).unwrap();
        assert_eq!(t.value(y).data(), &[3., 4., 5., 6., 1., 2.]);
    }

    #[test]
    fn segment_max_tie_routes_to_first_row() {
        let mut t = Tape::new();
        let x = t.param(m(3, 1, &[2.0, 2.0, 1.0]));
        let y = t.segment_max(x, &[0, 0, 0], 1).unwrap();
        let g = t.backward(y);
        assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn segment_errors() {
        let mut t = Tape::<f64>::new();
        let x = t.param(m(2, 1, &[1.0, 3.0]));
        assert!(t.segment_max(x, &[0, 2], 2).is_err());
        assert!(t.segment_max(x, &[0, 0], 2).is_err());
        assert!(t.segment_mean(x, &[0], 1).is_err());
        assert!(t.gather_rows(x, &[2]).is_err());
    }

    #[test]
    fn segment_mean_basics() {
        let mut t = Tape::new();
        let x = t.param(m(2, 1, &[0.0, 4.0]));
        let y = t.segment_mean(x, &[0, 0], 1).unwrap();
        assert_eq!(t.value(y).data(), &[2.0]);
        let g = t.backward(y);
        assert_eq!(g.get(x).unwrap(), &[0.5, 0.5]);

        let x = t.param(m(2, 2, &[1.5, -1.0, 1.5, -1.0]));
        let y = t.segment_mean(x, &[0, 0], 1).unwrap();
        assert_eq!(t.value(y).data(), &[1.5, -1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(m(1, 2, &[1.0, 2.0]));
        let p = t.param(m(1, 2, &[3.0, 4.0]));
        let s = t.add(c, p).unwrap();
        let l = t.reduce_mean(s).unwrap();
        let g = t.backward(l);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn backward_is_bit_identical_across_runs() {
        let run = || {
            let mut t = Tape::new();
            let a = t.param(m(3, 2, &[0.3, -1.2, 0.7, 2.2, -0.4, 0.9]));
            let w = t.param(m(2, 2, &[0.5, -0.25, 1.5, 0.75]));
            let h = t.matmul(a, w).unwrap();
            let r = t.relu(h);
            let s = t.segment_max(r, &[0, 1, 0], 2).unwrap();
            let q = t.square(s);
            let l = t.reduce_mean(q).unwrap();
            let g = t.backward(l);
            (g.get(a).unwrap().to_vec(), g.get(w).unwrap().to_vec())
        };
        let (a1, w1) = run();
        let (a2, w2) = run();
        assert_eq!(
            a1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            a2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(w1, w2);
    }
}
