//! TAG U-Net and plain-GNN assembly, parameter counting and checkpoints.
//!
//! U-Net data flow for depth `D`:
//!
//! ```text
//! inputs ─ lift ─┬ enc0 ─ pool ─ enc1 ─ pool ─ … ─ bottleneck
//!                │  │skip0         │skip1              │
//!                │  └──────────────┼────────── dec0 ◄─ unpool ◄ dec1 ◄ …
//!                                                  │
//!                                              output MLP
//! ```
//!
//! Every conv sees its level's coordinates concatenated to its input and is
//! followed by ReLU and BatchNorm.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Matrix, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::hierarchy::{
    build_hierarchy, default_cluster_size, pool_mean_var, unpool_copy_var, ClusterAssignment, Hierarchy,
    HierarchyCache, DEFAULT_KNN,
};
use crate::jsonfmt;
use crate::layers::{
    BatchNorm, BatchStats, Conv, ConvGraph, EdgeConv, GcnConv, Init, Linear, Mlp, Mode, ParamSet, RunningStats,
};
use crate::meshgraph::MeshGraph;
use crate::training::TrainConfig;

pub const CKPT_VERSION: &str = "1.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "tag-unet")]
    TagUnet,
    #[serde(rename = "plain-gnn")]
    PlainGnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvKind {
    #[serde(rename = "edgeconv")]
    EdgeConv,
    #[serde(rename = "gcnconv")]
    GcnConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub conv: ConvKind,
    pub depth: usize,
    pub dim: usize,
    pub feature_names: Vec<String>,
    /// Width after the input lift; defaults to the level-0 conv width.
    #[serde(default)]
    pub lift_width: Option<usize>,
    /// Hidden layer sizes of each EdgeConv MLP.
    pub conv_hidden: Vec<usize>,
    /// Output channels per encoder level, bottleneck last (`depth + 1`).
    pub encoder_channels: Vec<usize>,
    /// Output channels per decoder level, finest first (`depth`).
    pub decoder_channels: Vec<usize>,
    pub output_hidden: Vec<usize>,
    pub cluster_size: usize,
    pub knn_k: usize,
}

impl ModelConfig {
    /// Same conv MLP and channel count at every level.
    pub fn uniform(
        kind: ModelKind,
        conv: ConvKind,
        dim: usize,
        depth: usize,
        conv_hidden: &[usize],
        channels: usize,
        output_hidden: &[usize],
        feature_names: &[&str],
    ) -> Self {
        Self {
            kind,
            conv,
            depth,
            dim,
            feature_names: feature_names.iter().map(|s| s.to_string()).collect(),
            lift_width: None,
            conv_hidden: conv_hidden.to_vec(),
            encoder_channels: vec![channels; depth + 1],
            decoder_channels: vec![channels; depth],
            output_hidden: output_hidden.to_vec(),
            cluster_size: default_cluster_size(dim),
            knn_k: DEFAULT_KNN,
        }
    }

    /// 2-D stress model: depth 3, EdgeConv MLP (128, 128) → 64, output MLP
    /// (128, 128, 128), clusters of 4.
    pub fn reference_2d() -> Self {
        Self::uniform(
            ModelKind::TagUnet,
            ConvKind::EdgeConv,
            2,
            3,
            &[128, 128],
            64,
            &[128, 128, 128],
            &["sdf"],
        )
    }

    /// 3-D displacement model: depth 3, EdgeConv MLP (128, 128) → 128, output
    /// MLP (256, 256, 256), clusters of 8.
    pub fn reference_3d() -> Self {
        Self::uniform(
            ModelKind::TagUnet,
            ConvKind::EdgeConv,
            3,
            3,
            &[128, 128],
            128,
            &[256, 256, 256],
            &[],
        )
    }

    /// The four depth-3 size-study configurations for the 3-D problem.
    pub fn size_study() -> [Self; 4] {
        let row = |hidden: &[usize], ch: usize, out: &[usize]| {
            Self::uniform(ModelKind::TagUnet, ConvKind::EdgeConv, 3, 3, hidden, ch, out, &[])
        };
        [
            row(&[32, 32], 16, &[64, 64, 64]),
            row(&[32, 32], 32, &[128, 256, 128]),
            row(&[64, 64], 128, &[256, 256, 128]),
            row(&[128, 128], 128, &[256, 256, 256]),
        ]
    }

    pub fn input_width(&self) -> usize {
        self.dim + self.feature_names.len()
    }

    pub fn lift(&self) -> usize {
        self.lift_width.unwrap_or(self.encoder_channels[0])
    }

    /// Conv output widths of the plain GNN: encoder, bottleneck, decoder.
    fn plain_widths(&self) -> Vec<usize> {
        let mut w = self.encoder_channels.clone();
        w.extend(self.decoder_channels.iter().rev());
        w
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.dim != 2 && self.dim != 3 {
            return err(format!("dim must be 2 or 3, got {}", self.dim));
        }
        if self.depth == 0 {
            return err("depth must be ≥ 1".into());
        }
        if self.encoder_channels.len() != self.depth + 1 {
            return err(format!(
                "encoder_channels needs {} entries (depth + bottleneck), got {}",
                self.depth + 1,
                self.encoder_channels.len()
            ));
        }
        if self.decoder_channels.len() != self.depth {
            return err(format!(
                "decoder_channels needs {} entries, got {}",
                self.depth,
                self.decoder_channels.len()
            ));
        }
        for (l, (&d, &e)) in self.decoder_channels.iter().zip(&self.encoder_channels).enumerate() {
            if d != e {
                return err(format!(
                    "decoder layer dec{l} has width {d} but must mirror encoder layer enc{l} width {e}"
                ));
            }
        }
        let all = self
            .encoder_channels
            .iter()
            .chain(&self.conv_hidden)
            .chain(&self.output_hidden)
            .chain(self.lift_width.as_ref());
        if all.into_iter().any(|&w| w == 0) {
            return err("layer widths must be positive".into());
        }
        if self.cluster_size < 2 {
            return err("cluster_size must be ≥ 2".into());
        }
        if self.knn_k == 0 {
            return err("knn_k must be ≥ 1".into());
        }
        Ok(())
    }
}

fn mlp_count(input: usize, hidden: &[usize], out: usize) -> usize {
    let mut total = 0;
    let mut w = input;
    for &h in hidden.iter().chain(std::iter::once(&out)) {
        total += w * h + h;
        w = h;
    }
    total
}

/// Exact number of trainable scalars (weights, biases, BatchNorm γ and β).
pub fn count_params(config: &ModelConfig) -> usize {
    let conv = |input: usize, out: usize| -> usize {
        let c = match config.conv {
            ConvKind::EdgeConv => mlp_count(2 * input, &config.conv_hidden, out),
            ConvKind::GcnConv => input * out,
        };
        c + 2 * out
    };
    let d = config.dim;
    let lift = config.lift();
    let mut total = config.input_width() * lift + lift;
    match config.kind {
        ModelKind::TagUnet => {
            let enc = &config.encoder_channels;
            let dec = &config.decoder_channels;
            let mut w = lift;
            for &c in enc {
                total += conv(w + d, c);
                w = c;
            }
            for l in (0..config.depth).rev() {
                total += conv(w + enc[l] + d, dec[l]);
                w = dec[l];
            }
            total + mlp_count(w, &config.output_hidden, 1)
        }
        ModelKind::PlainGnn => {
            let mut w = lift;
            for c in config.plain_widths() {
                total += conv(w + d, c);
                w = c;
            }
            total + mlp_count(w, &config.output_hidden, 1)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    conv: Conv,
    bn: BatchNorm,
}

impl Block {
    fn new(
        params: &mut ParamSet,
        init: &mut Init,
        config: &ModelConfig,
        name: &str,
        input: usize,
        out: usize,
    ) -> Self {
        let conv = match config.conv {
            ConvKind::EdgeConv => Conv::Edge(EdgeConv::new(
                params,
                init,
                &format!("{name}.conv"),
                input,
                &config.conv_hidden,
                out,
            )),
            ConvKind::GcnConv => Conv::Gcn(GcnConv::new(params, init, &format!("{name}.conv"), input, out)),
        };
        let bn = BatchNorm::new(params, &format!("{name}.bn"), out);
        Self { conv, bn }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Architecture {
    lift: Linear,
    encoder: Vec<Block>,
    bottleneck: Option<Block>,
    /// Indexed by level, applied coarsest first.
    decoder: Vec<Block>,
    output: Mlp,
}

impl Architecture {
    fn build(config: &ModelConfig, init: &mut Init) -> (Self, ParamSet) {
        let mut params = ParamSet::new();
        let d = config.dim;
        let lift_w = config.lift();
        let lift = Linear::new(&mut params, init, "lift", config.input_width(), lift_w, true);
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        let mut bottleneck = None;
        let mut w = lift_w;
        match config.kind {
            ModelKind::TagUnet => {
                let enc = &config.encoder_channels;
                for (l, &c) in enc.iter().take(config.depth).enumerate() {
                    encoder.push(Block::new(&mut params, init, config, &format!("enc{l}"), w + d, c));
                    w = c;
                }
                let c = enc[config.depth];
                bottleneck = Some(Block::new(&mut params, init, config, "bottleneck", w + d, c));
                w = c;
                let mut dec: Vec<Option<Block>> = vec![None; config.depth];
                for l in (0..config.depth).rev() {
                    let c = config.decoder_channels[l];
                    dec[l] = Some(Block::new(
                        &mut params,
                        init,
                        config,
                        &format!("dec{l}"),
                        w + enc[l] + d,
                        c,
                    ));
                    w = c;
                }
                decoder = dec.into_iter().map(|b| b.expect("every level built")).collect();
            }
            ModelKind::PlainGnn => {
                for (k, c) in config.plain_widths().into_iter().enumerate() {
                    encoder.push(Block::new(&mut params, init, config, &format!("conv{k}"), w + d, c));
                    w = c;
                }
            }
        }
        let output = Mlp::new(&mut params, init, "out", w, &config.output_hidden, 1);
        (
            Self {
                lift,
                encoder,
                bottleneck,
                decoder,
                output,
            },
            params,
        )
    }

    fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.encoder.iter().chain(self.bottleneck.iter()).chain(self.decoder.iter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for TargetNorm {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl TargetNorm {
    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// One level of a prepared input: node coordinates and conv neighbourhoods.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelInput {
    pub coords: Matrix<f64>,
    pub graph: ConvGraph,
}

/// A graph (or batch of graphs) with its hierarchy, ready for forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedGraph {
    pub name: String,
    /// `n × (dim + features)`: coordinates then named features.
    pub inputs: Matrix<f64>,
    /// Level 0 is the input graph; U-Net inputs carry `depth + 1` levels.
    pub levels: Vec<LevelInput>,
    /// `assignments[l]` maps level `l` onto level `l + 1`.
    pub assignments: Vec<ClusterAssignment>,
    pub target: Option<Vec<f64>>,
    /// Node count of each constituent graph.
    pub graph_sizes: Vec<usize>,
}

impl PreparedGraph {
    pub fn num_nodes(&self) -> usize {
        self.inputs.rows()
    }

    /// Builds model inputs for `graph`. U-Net configs need a hierarchy;
    /// early-stopped hierarchies are padded with identity levels.
    pub fn new(graph: &MeshGraph, hierarchy: Option<&Hierarchy>, config: &ModelConfig) -> Result<Self> {
        if graph.dim != config.dim {
            return Err(Error::InvalidInput(format!(
                "{}: graph dim {} does not match model dim {}",
                graph.name, graph.dim, config.dim
            )));
        }
        let n = graph.num_nodes();
        let mut features = Vec::with_capacity(config.feature_names.len());
        for name in &config.feature_names {
            let f = graph.features.get(name).ok_or_else(|| {
                Error::InvalidInput(format!("{}: missing input feature {name:?}", graph.name))
            })?;
            features.push(f);
        }
        let width = config.input_width();
        let mut inputs = Vec::with_capacity(n * width);
        for i in 0..n {
            inputs.extend_from_slice(graph.coord(i));
            inputs.extend(features.iter().map(|f| f[i]));
        }
        let inputs = Matrix::from_vec(n, width, inputs)?;
        let mut levels = vec![LevelInput {
            coords: Matrix::from_vec(n, graph.dim, graph.coords.clone())?,
            graph: ConvGraph::new(n, &graph.edges)?,
        }];
        let mut assignments = Vec::new();
        if config.kind == ModelKind::TagUnet {
            let h = hierarchy.ok_or_else(|| {
                Error::InvalidInput(format!("{}: U-Net forward needs a hierarchy", graph.name))
            })?;
            if h.levels.first().map(|l| l.assignment.num_nodes()) != Some(n) {
                return Err(Error::InvalidInput(format!(
                    "{}: hierarchy does not match the graph's {n} nodes",
                    graph.name
                )));
            }
            if h.depth < config.depth {
                log::debug!(
                    "{}: hierarchy depth {} padded to {}",
                    graph.name,
                    h.depth,
                    config.depth
                );
            }
            let h = h.padded(config.depth);
            for level in &h.levels {
                let m = level.assignment.num_clusters;
                levels.push(LevelInput {
                    coords: Matrix::from_vec(m, graph.dim, level.coarse_coords.clone())?,
                    graph: ConvGraph::new(m, &level.coarse_edges)?,
                });
                assignments.push(level.assignment.clone());
            }
        }
        Ok(Self {
            name: graph.name.clone(),
            inputs,
            levels,
            assignments,
            target: graph.target.as_ref().map(|t| t.values.clone()),
            graph_sizes: vec![n],
        })
    }

    /// Block-diagonal union of prepared graphs, level by level.
    pub fn union(parts: &[&PreparedGraph]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        let num_levels = first.levels.len();
        let width = first.inputs.cols();
        if parts
            .iter()
            .any(|p| p.levels.len() != num_levels || p.inputs.cols() != width)
        {
            return Err(Error::InvalidInput("batch members have different structure".into()));
        }
        let dim = first.levels[0].coords.cols();
        let total: usize = parts.iter().map(|p| p.num_nodes()).sum();
        let mut inputs = Vec::with_capacity(total * width);
        for p in parts {
            inputs.extend_from_slice(p.inputs.data());
        }
        let mut levels = Vec::with_capacity(num_levels);
        for l in 0..num_levels {
            let mut coords = Vec::new();
            let graphs: Vec<&ConvGraph> = parts.iter().map(|p| &p.levels[l].graph).collect();
            for p in parts {
                coords.extend_from_slice(p.levels[l].coords.data());
            }
            let rows = coords.len() / dim;
            levels.push(LevelInput {
                coords: Matrix::from_vec(rows, dim, coords)?,
                graph: union_conv_graphs(&graphs),
            });
        }
        let mut assignments = Vec::with_capacity(first.assignments.len());
        for l in 0..first.assignments.len() {
            let mut cluster_of = Vec::new();
            let mut offset = 0;
            for p in parts {
                let a = &p.assignments[l];
                cluster_of.extend(a.cluster_of.iter().map(|&k| k + offset));
                offset += a.num_clusters;
            }
            assignments.push(ClusterAssignment {
                cluster_of,
                num_clusters: offset,
                cluster_size_limit: first.assignments[l].cluster_size_limit,
            });
        }
        let target = if parts.iter().all(|p| p.target.is_some()) {
            Some(parts.iter().flat_map(|p| p.target.clone().unwrap_or_default()).collect())
        } else {
            None
        };
        Ok(Self {
            name: parts.iter().map(|p| p.name.as_str()).collect::<Vec<_>>().join("+"),
            inputs: Matrix::from_vec(total, width, inputs)?,
            levels,
            assignments,
            target,
            graph_sizes: parts.iter().flat_map(|p| p.graph_sizes.iter().copied()).collect(),
        })
    }
}

/// Prepares `graph` for `config`, building (or loading from `cache`) the
/// hierarchy when the model needs one.
pub fn prepare(graph: &MeshGraph, config: &ModelConfig, cache: Option<&HierarchyCache>) -> Result<PreparedGraph> {
    let h = match config.kind {
        ModelKind::PlainGnn => None,
        ModelKind::TagUnet => Some(match cache {
            Some(cache) => cache.get_or_build(graph, config.depth, config.cluster_size, config.knn_k)?,
            None => build_hierarchy(graph, config.depth, config.cluster_size, config.knn_k)?,
        }),
    };
    PreparedGraph::new(graph, h.as_ref(), config)
}

fn union_conv_graphs(graphs: &[&ConvGraph]) -> ConvGraph {
    let mut out = ConvGraph {
        num_nodes: 0,
        msg_dst: Vec::new(),
        msg_src: Vec::new(),
        gcn_weights: Vec::new(),
    };
    for g in graphs {
        let o = out.num_nodes;
        out.msg_dst.extend(g.msg_dst.iter().map(|&i| i + o));
        out.msg_src.extend(g.msg_src.iter().map(|&i| i + o));
        out.gcn_weights
            .extend(g.gcn_weights.iter().map(|&(i, j, w)| (i + o, j + o, w)));
        out.num_nodes += g.num_nodes;
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace decoder skip inputs with zeros (diagnostic probe).
    pub zero_skips: bool,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `n × 1` predictions in normalized target units.
    pub prediction: Var,
    /// Train-mode batch statistics per BatchNorm layer, in layer order.
    pub bn_stats: Vec<(String, BatchStats)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub running: BTreeMap<String, RunningStats>,
    pub target_norm: TargetNorm,
    pub train_config: Option<TrainConfig>,
    arch: Architecture,
}

/// Instantiates every parameter deterministically from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut init = Init::new(seed);
    let (arch, params) = Architecture::build(config, &mut init);
    let running = arch
        .blocks()
        .map(|b| (b.bn.name.clone(), RunningStats::new(b.bn.channels)))
        .collect();
    Ok(Model {
        config: config.clone(),
        params,
        running,
        target_norm: TargetNorm::default(),
        train_config: None,
        arch,
    })
}

impl Model {
    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Checks that `graph` can be fed to this model.
    pub fn check_graph(&self, graph: &MeshGraph) -> Result<()> {
        if graph.dim != self.config.dim {
            return Err(Error::InvalidInput(format!(
                "{}: graph dim {} does not match model dim {}",
                graph.name, graph.dim, self.config.dim
            )));
        }
        for f in &self.config.feature_names {
            if !graph.features.contains_key(f) {
                return Err(Error::InvalidInput(format!("{}: missing feature {f:?}", graph.name)));
            }
        }
        Ok(())
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        input: &PreparedGraph,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        self.forward_with(tape, p, input, mode, ForwardOptions::default())
    }

    pub fn forward_with<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        input: &PreparedGraph,
        mode: Mode,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let depth = self.config.depth;
        let needed = match self.config.kind {
            ModelKind::TagUnet => depth + 1,
            ModelKind::PlainGnn => 1,
        };
        if input.levels.len() < needed || input.assignments.len() + 1 < needed {
            return Err(Error::InvalidInput(format!(
                "{}: input has {} levels, model needs {needed}",
                input.name,
                input.levels.len()
            )));
        }
        if input.inputs.cols() != self.config.input_width() {
            return Err(Error::Shape(format!(
                "{}: input width {} but model expects {}",
                input.name,
                input.inputs.cols(),
                self.config.input_width()
            )));
        }

        let mut stats = Vec::new();
        let coords: Vec<Var> = input.levels[..needed]
            .iter()
            .map(|l| tape.constant(l.coords.cast()))
            .collect();
        let x = tape.constant(input.inputs.cast());
        let mut h = self.arch.lift.forward(tape, p, x)?;

        let mut block = |tape: &mut Tape<T>, b: &Block, feats: Var, level: usize| -> Result<Var> {
            let x = tape.concat_cols(&[feats, coords[level]])?;
            let y = b.conv.forward(tape, p, x, &input.levels[level].graph)?;
            let y = tape.relu(y);
            match mode {
                Mode::Train => {
                    let (y, s) = b.bn.forward_train(tape, p, y)?;
                    stats.push((b.bn.name.clone(), s));
                    Ok(y)
                }
                Mode::Eval => {
                    let running = self.running.get(&b.bn.name).ok_or_else(|| {
                        Error::Config(format!("missing running stats for {}", b.bn.name))
                    })?;
                    b.bn.forward_eval(tape, p, y, running)
                }
            }
        };

        match self.config.kind {
            ModelKind::PlainGnn => {
                for b in &self.arch.encoder {
                    h = block(tape, b, h, 0)?;
                }
            }
            ModelKind::TagUnet => {
                let mut skips = Vec::with_capacity(depth);
                for (l, b) in self.arch.encoder.iter().enumerate() {
                    h = block(tape, b, h, l)?;
                    skips.push(h);
                    h = pool_mean_var(tape, h, &input.assignments[l])?;
                }
                let bottleneck = self.arch.bottleneck.as_ref().expect("u-net has a bottleneck");
                h = block(tape, bottleneck, h, depth)?;
                for l in (0..depth).rev() {
                    let up = unpool_copy_var(tape, h, &input.assignments[l])?;
                    let skip = if opts.zero_skips {
                        let (r, c) = tape.shape(skips[l]);
                        tape.constant(Matrix::zeros(r, c))
                    } else {
                        skips[l]
                    };
                    let merged = tape.concat_cols(&[up, skip])?;
                    h = block(tape, &self.arch.decoder[l], merged, l)?;
                }
            }
        }
        let prediction = self.arch.output.forward(tape, p, h)?;
        Ok(ForwardOutput {
            prediction,
            bn_stats: stats,
        })
    }

    /// Eval-mode predictions in target units.
    pub fn predict<T: Real>(&self, input: &PreparedGraph) -> Result<Vec<f64>> {
        self.predict_with::<T>(input, ForwardOptions::default())
    }

    pub fn predict_with<T: Real>(&self, input: &PreparedGraph, opts: ForwardOptions) -> Result<Vec<f64>> {
        let mut tape = Tape::<T>::new();
        let p = self.params.bind(&mut tape, false);
        let out = self.forward_with(&mut tape, &p, input, Mode::Eval, opts)?;
        let values = tape.value(out.prediction);
        let preds: Vec<f64> = values
            .data()
            .iter()
            .map(|v| self.target_norm.denormalize(v.as_f64()))
            .collect();
        if preds.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{}: non-finite prediction", input.name)));
        }
        Ok(preds)
    }

    pub fn apply_bn_stats(&mut self, stats: &[(String, BatchStats)], momentum: f64) {
        for (name, s) in stats {
            if let Some(r) = self.running.get_mut(name) {
                r.update(s, momentum);
            }
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        jsonfmt::write_bytes(path, &self.to_checkpoint_bytes()?)
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let file = CheckpointFile {
            ckpt_version: CKPT_VERSION.to_string(),
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(n, m)| (n.to_string(), m.data().to_vec()))
                .collect(),
            running_stats: self.running.clone(),
            target_norm: self.target_norm,
            train_config: self.train_config.clone(),
        };
        jsonfmt::to_vec_17(&file)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Model> {
        let file: CheckpointFile = serde_json::from_slice(bytes)?;
        if file.ckpt_version != CKPT_VERSION {
            return Err(Error::Version {
                found: file.ckpt_version,
                expected: CKPT_VERSION.to_string(),
            });
        }
        let mut model = build_model(&file.config, 0)?;
        let mut params = file.params;
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for (idx, name) in names.iter().enumerate() {
            let flat = params
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter {name:?}")))?;
            let target = &mut model.params.values_mut()[idx];
            if flat.len() != target.data().len() {
                return Err(Error::Format(format!(
                    "parameter {name:?} has {} values, config implies {}",
                    flat.len(),
                    target.data().len()
                )));
            }
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("parameter {name:?} has non-finite values")));
            }
            target.data_mut().copy_from_slice(&flat);
        }
        if let Some(extra) = params.keys().next() {
            return Err(Error::Format(format!("checkpoint has unknown parameter {extra:?}")));
        }
        for (name, stats) in &model.running {
            let loaded = file
                .running_stats
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing running stats {name:?}")))?;
            if loaded.mean.len() != stats.mean.len() || loaded.var.len() != stats.var.len() {
                return Err(Error::Format(format!("running stats {name:?} have the wrong width")));
            }
            if loaded.var.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Format(format!("running variance {name:?} is negative")));
            }
        }
        if file.running_stats.len() != model.running.len() {
            return Err(Error::Format("checkpoint has unknown running stats".into()));
        }
        if !(file.target_norm.std > 0.0) || !file.target_norm.mean.is_finite() {
            return Err(Error::Format("invalid target normalization".into()));
        }
        model.running = file.running_stats;
        model.target_norm = file.target_norm;
        model.train_config = file.train_config;
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    ckpt_version: String,
    config: ModelConfig,
    params: BTreeMap<String, Vec<f64>>,
    running_stats: BTreeMap<String, RunningStats>,
    target_norm: TargetNorm,
    #[serde(default)]
    train_config: Option<TrainConfig>,
}
