//! Deterministic synthetic datasets: unit squares with circular holes (2-D)
//! and unit cubes with spherical voids (3-D), with analytic SDF features and
//! closed-form target fields.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::knn_edges;
use crate::meshgraph::{save_graph, symmetrize, DatasetManifest, Edge, ManifestEntry, MeshGraph, Split, Target, MGF_VERSION};

const MAX_ATTEMPTS: u64 = 5;
const HOLE_TRIES: usize = 1000;
const JITTER: f64 = 0.4;
/// Gap kept between holes and between holes and the domain boundary.
const HOLE_MARGIN: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldParams {
    pub decay: f64,
    pub amplitude: f64,
    /// Spatial frequency of the sinusoidal modulation, in periods per unit.
    pub frequency: f64,
}

impl Default for FieldParams {
    fn default() -> Self {
        Self {
            decay: 4.0,
            amplitude: 0.5,
            frequency: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dim: usize,
    pub n_shapes: usize,
    /// Inclusive range of requested nodes per shape.
    pub nodes: [usize; 2],
    pub holes: [usize; 2],
    pub radius: [f64; 2],
    /// Neighbours per node for edge construction; 6 in 2-D and 8 in 3-D if unset.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub field: FieldParams,
    pub seed: u64,
    pub train_fraction: f64,
}

impl SynthSpec {
    pub fn default_2d(n_shapes: usize, nodes: usize, seed: u64) -> Self {
        Self {
            dim: 2,
            n_shapes,
            nodes: [nodes, nodes],
            holes: [1, 4],
            radius: [0.05, 0.15],
            k: None,
            field: FieldParams::default(),
            seed,
            train_fraction: 0.8,
        }
    }

    pub fn default_3d(n_shapes: usize, nodes: usize, seed: u64) -> Self {
        Self {
            dim: 3,
            holes: [1, 3],
            radius: [0.08, 0.18],
            ..Self::default_2d(n_shapes, nodes, seed)
        }
    }

    pub fn knn(&self) -> usize {
        self.k.unwrap_or(if self.dim == 2 { 6 } else { 8 })
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("synth spec: {m}")));
        if self.dim != 2 && self.dim != 3 {
            return err("dim must be 2 or 3");
        }
        if self.n_shapes == 0 {
            return err("n_shapes must be positive");
        }
        if self.nodes[0] < 2 || self.nodes[0] > self.nodes[1] {
            return err("node range must be ordered and at least 2");
        }
        if self.holes[0] > self.holes[1] {
            return err("hole range must be ordered");
        }
        if !(self.radius[0] > 0.0 && self.radius[0] <= self.radius[1] && self.radius[1] < 0.5 - HOLE_MARGIN) {
            return err("radius range must be ordered and inside (0, 0.48)");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return err("train_fraction must lie in (0, 1)");
        }
        if self.knn() == 0 {
            return err("k must be positive");
        }
        Ok(())
    }

    pub fn num_train(&self) -> usize {
        ((self.train_fraction * self.n_shapes as f64).ceil() as usize).min(self.n_shapes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hole {
    pub center: Vec<f64>,
    pub radius: f64,
}

/// Signed distance to the nearest boundary (domain wall or hole surface);
/// non-negative for every retained point.
pub fn sdf(p: &[f64], holes: &[Hole]) -> f64 {
    let wall = p.iter().map(|&x| x.min(1.0 - x)).fold(f64::INFINITY, f64::min);
    holes.iter().fold(wall, |acc, h| {
        let d = p
            .iter()
            .zip(&h.center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        acc.min(d - h.radius)
    })
}

/// 2-D: `exp(−a·sdf)·(1 + b·sin(2πfx)·sin(2πfy))`; 3-D multiplies by `z`.
pub fn target_value(p: &[f64], sdf: f64, field: &FieldParams) -> f64 {
    let w = 2.0 * PI * field.frequency;
    let base = (-field.decay * sdf).exp() * (1.0 + field.amplitude * (w * p[0]).sin() * (w * p[1]).sin());
    if p.len() == 3 {
        p[2] * base
    } else {
        base
    }
}

fn shape_name(index: usize) -> String {
    format!("shape_{index:05}")
}

fn sample_holes(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Hole>> {
    let count = rng.gen_range(spec.holes[0]..=spec.holes[1]);
    let mut holes: Vec<Hole> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..HOLE_TRIES {
            let r = rng.gen_range(spec.radius[0]..=spec.radius[1]);
            let lo = r + HOLE_MARGIN;
            let center: Vec<f64> = (0..spec.dim).map(|_| rng.gen_range(lo..=1.0 - lo)).collect();
            let clear = holes.iter().all(|h| {
                let d2: f64 = h.center.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() > h.radius + r + HOLE_MARGIN
            });
            if clear {
                holes.push(Hole { center, radius: r });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "cannot place {count} non-overlapping holes with radii in {:?}",
                spec.radius
            )));
        }
    }
    Ok(holes)
}

fn jittered_grid(counts: &[usize], holes: &[Hole], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dim = counts.len();
    let total: usize = counts.iter().product();
    let mut out = Vec::with_capacity(total * dim);
    let mut p = vec![0.0; dim];
    for cell in 0..total {
        let mut rest = cell;
        for (x, &g) in p.iter_mut().zip(counts) {
            let h = 1.0 / g as f64;
            let i = rest % g;
            rest /= g;
            *x = (i as f64 + 0.5) * h + rng.gen_range(-JITTER..=JITTER) * h;
        }
        if sdf(&p, holes) > 0.0 {
            out.extend_from_slice(&p);
        }
    }
    out
}

/// Per-axis grid counts around `g`, each axis at most one step finer than the
/// previous so the total grows in small increments.
fn grid_candidates(dim: usize, g: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for base in g.saturating_sub(1).max(2)..=g + 1 {
        for extra in 0..dim {
            let mut c = vec![base; dim];
            c.iter_mut().take(extra).for_each(|v| *v += 1);
            out.push(c);
        }
    }
    out
}

fn is_connected(n: usize, edges: &[Edge]) -> bool {
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut parent: Vec<usize> = (0..n).collect();
    let mut components = n;
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            components -= 1;
        }
    }
    components <= 1
}

fn attempt_shape(spec: &SynthSpec, index: usize, attempt: u64) -> Result<Option<MeshGraph>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 * MAX_ATTEMPTS + attempt);
    let n = rng.gen_range(spec.nodes[0]..=spec.nodes[1]);
    let holes = sample_holes(spec, &mut rng)?;
    let unit_ball = if spec.dim == 2 { PI } else { 4.0 / 3.0 * PI };
    let removed: f64 = holes.iter().map(|h| unit_ball * h.radius.powi(spec.dim as i32)).sum();
    let free = 1.0 - removed;
    if free <= 0.05 {
        return Err(Error::Config("holes cover the domain".into()));
    }
    let estimate = ((n as f64 / free).powf(1.0 / spec.dim as f64)).round().max(2.0) as usize;

    // Pick the grid whose retained count lands closest to n; each candidate
    // draws from the same stream position.
    let mut best: Option<Vec<f64>> = None;
    for counts in grid_candidates(spec.dim, estimate) {
        let pts = jittered_grid(&counts, &holes, &mut rng.clone());
        let count = pts.len() / spec.dim;
        let better = best
            .as_ref()
            .is_none_or(|b| count.abs_diff(n) < (b.len() / spec.dim).abs_diff(n));
        if better {
            best = Some(pts);
        }
    }
    let coords = best.expect("at least one grid candidate");
    let count = coords.len() / spec.dim;
    if count < 2 || (count as f64 - n as f64).abs() > 0.1 * n as f64 {
        log::debug!("shape {index} attempt {attempt}: {count} nodes for {n} requested");
        return Ok(None);
    }

    let edges = symmetrize(knn_edges(&coords, spec.dim, spec.knn())?);
    if !is_connected(count, &edges) {
        log::debug!("shape {index} attempt {attempt}: disconnected graph");
        return Ok(None);
    }
    let mut sdf_values = Vec::with_capacity(count);
    let mut target = Vec::with_capacity(count);
    for p in coords.chunks(spec.dim) {
        let s = sdf(p, &holes);
        sdf_values.push(s);
        target.push(target_value(p, s, &spec.field));
    }
    Ok(Some(MeshGraph {
        name: shape_name(index),
        dim: spec.dim,
        coords,
        edges,
        features: BTreeMap::from([("sdf".to_string(), sdf_values)]),
        target: Some(Target {
            name: target_name(spec.dim).to_string(),
            values: target,
        }),
    }))
}

fn target_name(dim: usize) -> &'static str {
    if dim == 2 {
        "stress"
    } else {
        "displacement_z"
    }
}

/// Generates shape `index`; regenerates from a derived stream when the count
/// misses the ±10% band or the graph is disconnected.
pub fn gen_shape(spec: &SynthSpec, index: usize) -> Result<MeshGraph> {
    spec.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        if let Some(g) = attempt_shape(spec, index, attempt)? {
            g.ensure_valid()?;
            return Ok(g);
        }
    }
    Err(Error::Config(format!(
        "shape {index}: no connected graph within ±10% of the requested size after {MAX_ATTEMPTS} attempts"
    )))
}

/// Writes every shape under `out_dir/shapes/` plus `out_dir/manifest.json`.
pub fn gen_dataset(spec: &SynthSpec, out_dir: &Path, jobs: usize) -> Result<DatasetManifest> {
    spec.validate()?;
    let build = |i: usize| -> Result<ManifestEntry> {
        let g = gen_shape(spec, i)?;
        let rel = format!("shapes/{}.json", g.name);
        save_graph(&g, &out_dir.join(&rel))?;
        Ok(ManifestEntry {
            name: g.name.clone(),
            path: rel,
            split: if i < spec.num_train() { Split::Train } else { Split::Test },
            num_nodes: g.num_nodes(),
            num_edges: g.edges.len(),
        })
    };
    let entries: Vec<Result<ManifestEntry>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| (0..spec.n_shapes).into_par_iter().map(build).collect())
    } else {
        (0..spec.n_shapes).map(build).collect()
    };
    let manifest = DatasetManifest {
        mgf_version: MGF_VERSION.to_string(),
        dim: spec.dim,
        feature_names: vec!["sdf".to_string()],
        target_name: target_name(spec.dim).to_string(),
        target_units: None,
        entries: entries.into_iter().collect::<Result<_>>()?,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
