//! Neural building blocks: Linear, MLP, BatchNorm, EdgeConv and GCNConv.
//!
//! Parameters live in a [`ParamSet`] of named `f64` matrices. A forward pass
//! binds them onto a tape (in whatever precision the tape uses) and layers
//! refer to their tensors by [`ParamId`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Matrix, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::meshgraph::Edge;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of named trainable matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Matrix<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix<f64>] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    /// Places every parameter on `tape`, as gradient-receiving leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|m| {
                let v = m.cast::<T>();
                if trainable {
                    tape.param(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect()
    }
}

/// Deterministic parameter initializer.
///
/// Weights are drawn from `U(−s, s)` with `s = √(2/fan_in)`; biases and
/// BatchNorm shifts start at zero, BatchNorm scales at one.
#[derive(Debug, Clone)]
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn weight(&mut self, fan_in: usize, fan_out: usize) -> Matrix<f64> {
        let s = (2.0 / fan_in.max(1) as f64).sqrt();
        Matrix::from_fn(fan_in, fan_out, |_, _| self.rng.gen_range(-s..s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), init.weight(in_dim, out_dim));
        let bias = bias.then(|| params.add(format!("{name}.bias"), Matrix::zeros(1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let width = tape.shape(x).1;
        if width != self.in_dim {
            return Err(Error::Shape(format!(
                "linear expects width {}, got {width}",
                self.in_dim
            )));
        }
        let y = tape.matmul(x, p[self.weight.0])?;
        match self.bias {
            Some(b) => tape.add_row(y, p[b.0]),
            None => Ok(y),
        }
    }
}

/// Affine layers with ReLU between them and no activation after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        params: &mut ParamSet,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = in_dim;
        for (i, &h) in hidden.iter().chain(std::iter::once(&out_dim)).enumerate() {
            layers.push(Linear::new(params, init, &format!("{name}.{i}"), width, h, true));
            width = h;
        }
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty mlp").out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Linear::num_params).sum()
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h);
            }
            h = layer.forward(tape, p, h)?;
        }
        Ok(h)
    }
}

/// Batch statistics from a train-mode BatchNorm pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), Matrix::filled(1, channels, 1.0));
        let beta = params.add(format!("{name}.beta"), Matrix::zeros(1, channels));
        Self {
            name: name.to_string(),
            gamma,
            beta,
            channels,
            eps: BN_EPSILON,
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    fn check<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let (n, c) = tape.shape(x);
        if c != self.channels {
            return Err(Error::Shape(format!(
                "{}: {} channels, input has {c}",
                self.name, self.channels
            )));
        }
        if n == 0 {
            return Err(Error::InvalidInput(format!("{}: empty batch", self.name)));
        }
        Ok(())
    }

    /// Normalizes by the batch mean and population variance.
    pub fn forward_train<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
    ) -> Result<(Var, BatchStats)> {
        self.check(tape, x)?;
        let mean = tape.col_mean(x)?;
        let neg_mean = tape.scale(mean, -T::one());
        let centered = tape.add_row(x, neg_mean)?;
        let sq = tape.square(centered);
        let var = tape.col_mean(sq)?;
        let shifted = tape.add_scalar(var, T::from_f64(self.eps));
        let inv_std = tape.rsqrt(shifted)?;
        let normed = tape.mul_row(centered, inv_std)?;
        let scaled = tape.mul_row(normed, p[self.gamma.0])?;
        let y = tape.add_row(scaled, p[self.beta.0])?;
        let stats = BatchStats {
            mean: tape.value(mean).data().iter().map(|v| v.as_f64()).collect(),
            var: tape.value(var).data().iter().map(|v| v.as_f64()).collect(),
        };
        Ok((y, stats))
    }

    /// Normalizes by stored running statistics.
    pub fn forward_eval<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        running: &RunningStats,
    ) -> Result<Var> {
        self.check(tape, x)?;
        if running.mean.len() != self.channels || running.var.len() != self.channels {
            return Err(Error::Shape(format!("{}: running stats width", self.name)));
        }
        let shift = Matrix::from_vec(
            1,
            self.channels,
            running.mean.iter().map(|&m| T::from_f64(-m)).collect(),
        )?;
        let scale = Matrix::from_vec(
            1,
            self.channels,
            running
                .var
                .iter()
                .map(|&v| T::from_f64(1.0 / (v + self.eps).sqrt()))
                .collect(),
        )?;
        let shift = tape.constant(shift);
        let scale = tape.constant(scale);
        let centered = tape.add_row(x, shift)?;
        let normed = tape.mul_row(centered, scale)?;
        let scaled = tape.mul_row(normed, p[self.gamma.0])?;
        tape.add_row(scaled, p[self.beta.0])
    }
}

/// Neighbourhood structure of one graph level, prepared for convolution.
///
/// Edge `(i, j)` makes `j` a neighbour of `i`. EdgeConv messages are sorted by
/// destination; isolated nodes receive a single self-message.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGraph {
    pub num_nodes: usize,
    pub msg_dst: Vec<usize>,
    pub msg_src: Vec<usize>,
    /// GCN aggregation weights `(i, j, 1/√(d̂ᵢ d̂ⱼ))`, self-loops included.
    pub gcn_weights: Vec<(usize, usize, f64)>,
}

impl ConvGraph {
    pub fn new(num_nodes: usize, edges: &[Edge]) -> Result<Self> {
        let mut pairs: Vec<Edge> = Vec::with_capacity(edges.len());
        for &(i, j) in edges {
            if i >= num_nodes || j >= num_nodes {
                return Err(Error::InvalidInput(format!(
                    "edge ({i},{j}) out of range for {num_nodes} nodes"
                )));
            }
            if i != j {
                pairs.push((i, j));
            }
        }
        pairs.sort_unstable();
        pairs.dedup();

        let mut degree = vec![0usize; num_nodes];
        for &(i, _) in &pairs {
            degree[i] += 1;
        }
        let d_hat: Vec<f64> = degree.iter().map(|&d| d as f64 + 1.0).collect();
        let mut gcn_weights = Vec::with_capacity(pairs.len() + num_nodes);
        let mut msg_dst = Vec::with_capacity(pairs.len() + num_nodes);
        let mut msg_src = Vec::with_capacity(pairs.len() + num_nodes);
        let mut p = 0;
        for i in 0..num_nodes {
            gcn_weights.push((i, i, 1.0 / d_hat[i]));
            if degree[i] == 0 {
                msg_dst.push(i);
                msg_src.push(i);
            }
            while p < pairs.len() && pairs[p].0 == i {
                let j = pairs[p].1;
                gcn_weights.push((i, j, 1.0 / (d_hat[i] * d_hat[j]).sqrt()));
                msg_dst.push(i);
                msg_src.push(j);
                p += 1;
            }
        }
        Ok(Self {
            num_nodes,
            msg_dst,
            msg_src,
            gcn_weights,
        })
    }
}

/// `xᵢ' = max_{j∈N(i)} h(xᵢ ‖ xⱼ − xᵢ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeConv {
    pub mlp: Mlp,
    pub in_dim: usize,
}

impl EdgeConv {
    pub fn new(
        params: &mut ParamSet,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
    ) -> Self {
        Self {
            mlp: Mlp::new(params, init, &format!("{name}.mlp"), 2 * in_dim, hidden, out_dim),
            in_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.mlp.num_params()
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        graph: &ConvGraph,
    ) -> Result<Var> {
        let (n, f) = tape.shape(x);
        if f != self.in_dim {
            return Err(Error::Shape(format!(
                "edgeconv expects width {}, got {f}",
                self.in_dim
            )));
        }
        if n != graph.num_nodes {
            return Err(Error::Shape(format!(
                "edgeconv: {n} feature rows for a {}-node graph",
                graph.num_nodes
            )));
        }
        // First affine layer on W = [W_self; W_diff]:
        //   W_selfᵀxᵢ + W_diffᵀ(xⱼ − xᵢ) = (W_self − W_diff)ᵀxᵢ + W_diffᵀxⱼ,
        // evaluated per node and gathered per message.
        let first = &self.mlp.layers[0];
        let w = p[first.weight.0];
        let w_self = tape.slice_rows(w, 0, f)?;
        let w_diff = tape.slice_rows(w, f, f)?;
        let w_center = tape.sub(w_self, w_diff)?;
        let center = tape.matmul(x, w_center)?;
        let neighbor = tape.matmul(x, w_diff)?;
        let at_dst = tape.gather_rows(center, &graph.msg_dst)?;
        let at_src = tape.gather_rows(neighbor, &graph.msg_src)?;
        let mut h = tape.add(at_dst, at_src)?;
        if let Some(b) = first.bias {
            h = tape.add_row(h, p[b.0])?;
        }
        for layer in &self.mlp.layers[1..] {
            h = tape.relu(h);
            h = layer.forward(tape, p, h)?;
        }
        tape.segment_max(h, &graph.msg_dst, n)
    }
}

/// `xᵢ' = Θᵀ Σ_{j∈N(i)∪{i}} xⱼ / √(d̂ᵢ d̂ⱼ)` with `d̂ = degree + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnConv {
    pub theta: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl GcnConv {
    pub fn new(params: &mut ParamSet, init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let theta = params.add(format!("{name}.theta"), init.weight(in_dim, out_dim));
        Self {
            theta,
            in_dim,
            out_dim,
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        graph: &ConvGraph,
    ) -> Result<Var> {
        let (n, f) = tape.shape(x);
        if f != self.in_dim {
            return Err(Error::Shape(format!(
                "gcnconv expects width {}, got {f}",
                self.in_dim
            )));
        }
        if n != graph.num_nodes {
            return Err(Error::Shape(format!(
                "gcnconv: {n} feature rows for a {}-node graph",
                graph.num_nodes
            )));
        }
        let weights = graph
            .gcn_weights
            .iter()
            .map(|&(i, j, w)| (i, j, T::from_f64(w)))
            .collect();
        let agg = tape.spmm(x, weights, n)?;
        tape.matmul(agg, p[self.theta.0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Conv {
    Edge(EdgeConv),
    Gcn(GcnConv),
}

impl Conv {
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        graph: &ConvGraph,
    ) -> Result<Var> {
        match self {
            Conv::Edge(c) => c.forward(tape, p, x, graph),
            Conv::Gcn(c) => c.forward(tape, p, x, graph),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Conv::Edge(c) => c.num_params(),
            Conv::Gcn(c) => c.num_params(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let mut ps = ParamSet::new();
        let mut init = Init::new(1);
        let mlp = Mlp::new(&mut ps, &mut init, "m", 3, &[4, 4], 2);
        for v in ps.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut t = Tape::<f64>::new();
        let p = ps.bind(&mut t, false);
        let x = t.constant(mat(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let y = mlp.forward(&mut t, &p, x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn single_layer_mlp_is_affine() {
        let mut ps = ParamSet::new();
        let mut init = Init::new(2);
        let mlp = Mlp::new(&mut ps, &mut init, "m", 2, &[], 2);
        *ps.get_mut(mlp.layers[0].bias.unwrap()) = mat(1, 2, &[0.5, -1.0]);
        let w = ps.get(mlp.layers[0].weight).clone();
        let mut t = Tape::<f64>::new();
        let p = ps.bind(&mut t, false);
        let xm = mat(1, 2, &[2.0, 3.0]);
        let x = t.constant(xm.clone());
        let y = mlp.forward(&mut t, &p, x).unwrap();
        let expect = xm.matmul(&w).unwrap();
        assert_eq!(t.value(y).get(0, 0), expect.get(0, 0) + 0.5);
        assert_eq!(t.value(y).get(0, 1), expect.get(0, 1) - 1.0);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut ps = ParamSet::new();
        let mut init = Init::new(2);
        let mlp = Mlp::new(&mut ps, &mut init, "m", 2, &[3], 1);
        let mut t = Tape::<f64>::new();
        let p = ps.bind(&mut t, false);
        let x = t.constant(Matrix::zeros(4, 3));
        assert!(mlp.forward(&mut t, &p, x).is_err());
    }

    fn linear_edgeconv(a: f64, b: f64) -> (ParamSet, EdgeConv) {
        let mut ps = ParamSet::new();
        let mut init = Init::new(0);
        let ec = EdgeConv::new(&mut ps, &mut init, "ec", 1, &[], 1);
        *ps.get_mut(ec.mlp.layers[0].weight) = mat(2, 1, &[a, b]);
        (ps, ec)
    }

    #[test]
    fn edgeconv_hand_evaluation() {
        // h([a, b]) = a + 2b
        let (ps, ec) = linear_edgeconv(1.0, 2.0);
        let g = ConvGraph::new(2, &[(0, 1), (1, 0)]).unwrap();
        let mut t = Tape::<f64>::new();
        let p = ps.bind(&mut t, false);
        let x = t.constant(mat(2, 1, &[1.0, 3.0]));
        let y = ec.forward(&mut t, &p, x, &g).unwrap();
        assert_eq!(t.value(y).data(), &[5.0, -1.0]);
    }

    #[test]
    fn edgeconv_isolated_node_gets_self_message() {
        let (ps, ec) = linear_edgeconv(1.5, 2.0);
        let g = ConvGraph::new(1, &[]).unwrap();
        let mut t = Tape::<f64>::new();
        let p = ps.bind(&mut t, false);
        let x = t.constant(mat(1, 1, &[4.0]));
        let y = ec.forward(&mut t, &p, x, &g).unwrap();
        assert_eq!(t.value(y).data(), &[6.0]);
    }

    #[test]
    fn edgeconv_edge_order_and_duplicates_do_not_matter() {
        let mut ps = ParamSet::new();
        let mut init = Init::new(9);
        let ec = EdgeConv::new(&mut ps, &mut init, "ec", 3, &[5, 4], 2);
        let x = Matrix::from_fn(4, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.7);
        let edges = vec![(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2), (0, 3), (3, 0)];
        let mut permuted = edges.clone();
        permuted.reverse();
        permuted.swap(1, 5);
        let mut duplicated = edges.clone();
        duplicated.extend_from_slice(&edges[..3]);
        let run = |e: &[Edge]| {
            let g = ConvGraph::new(4, e).unwrap();
            let mut t = Tape::<f64>::new();
            let p = ps.bind(&mut t, false);
            let xv = t.constant(x.clone());
            let y = ec.forward(&mut t, &p, xv, &g).unwrap();
            t.value(y).clone()
        };
        let base = run(&edges);
        assert_eq!(base, run(&permuted));
        assert_eq!(base, run(&duplicated));
    }

    #[test]
    fn gcn_isolated_node() {
        let mut ps = ParamSet::new();
        let mut init = Init::new(4);
        let gc = GcnConv::new(&mut ps, &mut init, "g", 2, 3);
        let theta = ps.get(gc.theta).clone();
        let g = ConvGraph::new(1, &[]).unwrap();
        let mut t = Tape::<f64>::new();
        let p = ps.bind(&mut t, false);
        let xm = mat(1, 2, &[0.3, -2.0]);
        let x = t.constant(xm.clone());
        let y = gc.forward(&mut t, &p, x, &g).unwrap();
        assert_eq!(t.value(y), &xm.matmul(&theta).unwrap());
    }

    #[test]
    fn gcn_pair_with_equal_features() {
        let mut ps = ParamSet::new();
        let mut init = Init::new(4);
        let gc = GcnConv::new(&mut ps, &mut init, "g", 2, 3);
        let theta = ps.get(gc.theta).clone();
        let g = ConvGraph::new(2, &[(0, 1), (1, 0)]).unwrap();
        let mut t = Tape::<f64>::new();
        let p = ps.bind(&mut t, false);
        let x = t.constant(mat(2, 2, &[0.75, 1.25, 0.75, 1.25]));
        let y = gc.forward(&mut t, &p, x, &g).unwrap();
        let expect = mat(1, 2, &[0.75, 1.25]).matmul(&theta).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((t.value(y).get(i, j) - expect.get(0, j)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn batchnorm_constant_channel_is_zero() {
        let mut ps = ParamSet::new();
        let bn = BatchNorm::new(&mut ps, "bn", 1);
        let mut t = Tape::<f64>::new();
        let p = ps.bind(&mut t, true);
        let x = t.constant(mat(3, 1, &[2.0, 2.0, 2.0]));
        let (y, stats) = bn.forward_train(&mut t, &p, x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![0.0]);
    }

    #[test]
    fn batchnorm_two_values() {
        let mut ps = ParamSet::new();
        let bn = BatchNorm::new(&mut ps, "bn", 1);
        let mut t = Tape::<f64>::new();
        let p = ps.bind(&mut t, true);
        let x = t.constant(mat(2, 1, &[-1.0, 1.0]));
        let (y, _) = bn.forward_train(&mut t, &p, x).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((t.value(y).get(0, 0) + expect).abs() < 1e-15);
        assert!((t.value(y).get(1, 0) - expect).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_eval_identity_stats() {
        let mut ps = ParamSet::new();
        let bn = BatchNorm::new(&mut ps, "bn", 2);
        *ps.get_mut(bn.gamma) = mat(1, 2, &[2.0, 1.0]);
        *ps.get_mut(bn.beta) = mat(1, 2, &[0.0, -1.0]);
        let mut t = Tape::<f64>::new();
        let p = ps.bind(&mut t, false);
        let x = t.constant(mat(1, 2, &[3.0, 4.0]));
        let y = bn
            .forward_eval(&mut t, &p, x, &RunningStats::new(2))
            .unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((t.value(y).get(0, 0) - 6.0 * s).abs() < 1e-12);
        assert!((t.value(y).get(0, 1) - (4.0 * s - 1.0)).abs() < 1e-12);
        assert!(bn.forward_eval(&mut t, &p, x, &RunningStats::new(3)).is_err());
        let empty = t.constant(Matrix::zeros(0, 2));
        assert!(bn.forward_train(&mut t, &p, empty).is_err());
    }

    #[test]
    fn running_stats_momentum() {
        let mut r = RunningStats::new(1);
        r.update(
            &BatchStats {
                mean: vec![10.0],
                var: vec![3.0],
            },
            BN_MOMENTUM,
        );
        assert!((r.mean[0] - 1.0).abs() < 1e-15);
        assert!((r.var[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let build = || {
            let mut ps = ParamSet::new();
            let mut init = Init::new(42);
            let _ = Mlp::new(&mut ps, &mut init, "m", 5, &[7], 3);
            ps
        };
        let a = build();
        assert_eq!(a, build());
        for (name, v) in a.iter() {
            if name.ends_with(".bias") {
                assert!(v.data().iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn init_variance_matches_uniform_law() {
        let mut init = Init::new(7);
        let w = init.weight(128, 80);
        let n = w.data().len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let expect = 2.0 / (3.0 * 128.0);
        assert!((var / expect - 1.0).abs() < 0.2, "{var} vs {expect}");
    }
}
