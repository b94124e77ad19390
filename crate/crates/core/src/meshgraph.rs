//! Graph/mesh data model, the MGF on-disk format, element-to-edge conversion,
//! validation and disjoint-union batching.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonfmt;

pub const MGF_VERSION: &str = "1.0";

/// Directed edge `(from, to)`. Graphs store both directions of every link.
pub type Edge = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub name: String,
    pub values: Vec<f64>,
}

/// A mesh or spatial graph with per-node features and an optional target field.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshGraph {
    pub name: String,
    pub dim: usize,
    /// Row-major `n × dim` coordinates.
    pub coords: Vec<f64>,
    pub edges: Vec<Edge>,
    pub features: BTreeMap<String, Vec<f64>>,
    pub target: Option<Target>,
}

impl MeshGraph {
    pub fn num_nodes(&self) -> usize {
        self.coords.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn coord(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn target_values(&self) -> Option<&[f64]> {
        self.target.as_ref().map(|t| t.values.as_slice())
    }

    /// Checks every structural invariant and reports each violation found.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.dim != 2 && self.dim != 3 {
            out.push(Violation::new(
                ViolationKind::Dimension,
                format!("dim must be 2 or 3, got {}", self.dim),
            ));
            return out;
        }
        if !self.coords.len().is_multiple_of(self.dim) {
            out.push(Violation::new(
                ViolationKind::Length,
                format!(
                    "coords length {} is not a multiple of dim {}",
                    self.coords.len(),
                    self.dim
                ),
            ));
            return out;
        }
        let n = self.num_nodes();
        if let Some(i) = self.coords.iter().position(|v| !v.is_finite()) {
            out.push(Violation::new(
                ViolationKind::NonFinite,
                format!("coords: non-finite value at node {}", i / self.dim),
            ));
        }

        let mut seen: HashSet<Edge> = HashSet::with_capacity(self.edges.len());
        let mut in_range = true;
        for (k, &(i, j)) in self.edges.iter().enumerate() {
            if i >= n || j >= n {
                in_range = false;
                out.push(Violation::new(
                    ViolationKind::EdgeOutOfRange,
                    format!("edge {k} ({i},{j}) out of range for {n} nodes"),
                ));
                continue;
            }
            if i == j {
                out.push(Violation::new(
                    ViolationKind::SelfLoop,
                    format!("edge {k} is a self-loop at node {i}"),
                ));
            }
            if !seen.insert((i, j)) {
                out.push(Violation::new(
                    ViolationKind::DuplicateEdge,
                    format!("edge {k} ({i},{j}) is a duplicate"),
                ));
            }
        }
        if in_range {
            for (k, &(i, j)) in self.edges.iter().enumerate() {
                if !seen.contains(&(j, i)) {
                    out.push(Violation::new(
                        ViolationKind::Asymmetric,
                        format!("edge {k} ({i},{j}) has no reverse ({j},{i})"),
                    ));
                }
            }
        }

        for (name, values) in &self.features {
            check_field(&mut out, &format!("feature {name:?}"), values, n);
        }
        if let Some(t) = &self.target {
            check_field(&mut out, &format!("target {:?}", t.name), &t.values, n);
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidGraph {
                name: self.name.clone(),
                violations: violations.into_iter().map(|v| v.to_string()).collect(),
            })
        }
    }
}

fn check_field(out: &mut Vec<Violation>, what: &str, values: &[f64], n: usize) {
    if values.len() != n {
        out.push(Violation::new(
            ViolationKind::Length,
            format!("{what} has {} entries, expected {n}", values.len()),
        ));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        out.push(Violation::new(
            ViolationKind::NonFinite,
            format!("{what}: non-finite value at node {i}"),
        ));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Dimension,
    Length,
    NonFinite,
    EdgeOutOfRange,
    SelfLoop,
    DuplicateEdge,
    Asymmetric,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

impl Violation {
    fn new(kind: ViolationKind, message: String) -> Self {
        Self { kind, message }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Triangle,
    Hexahedron,
}

impl ElementKind {
    pub fn arity(self) -> usize {
        match self {
            ElementKind::Triangle => 3,
            ElementKind::Hexahedron => 8,
        }
    }

    /// Local corner pairs forming the element's edges. Hexahedron corners 0-3
    /// are the bottom face and 4-7 the top face, both counterclockwise.
    fn local_edges(self) -> &'static [(usize, usize)] {
        match self {
            ElementKind::Triangle => &[(0, 1), (1, 2), (2, 0)],
            ElementKind::Hexahedron => &[
                (0, 1),
                (1, 2),
                (2, 3),
                (3, 0),
                (4, 5),
                (5, 6),
                (6, 7),
                (7, 4),
                (0, 4),
                (1, 5),
                (2, 6),
                (3, 7),
            ],
        }
    }
}

/// Converts element connectivity into a sorted, deduplicated, symmetric
/// directed edge list.
pub fn edges_from_elements<E: AsRef<[usize]>>(elements: &[E], kind: ElementKind) -> Result<Vec<Edge>> {
    let mut edges = Vec::with_capacity(elements.len() * kind.local_edges().len() * 2);
    for (e, element) in elements.iter().enumerate() {
        let nodes = element.as_ref();
        if nodes.len() != kind.arity() {
            return Err(Error::InvalidInput(format!(
                "element {e} has {} nodes, a {kind:?} needs {}",
                nodes.len(),
                kind.arity()
            )));
        }
        for a in 0..nodes.len() {
            if nodes[a + 1..].contains(&nodes[a]) {
                return Err(Error::InvalidInput(format!(
                    "element {e} repeats node {}",
                    nodes[a]
                )));
            }
        }
        for &(a, b) in kind.local_edges() {
            edges.push((nodes[a], nodes[b]));
            edges.push((nodes[b], nodes[a]));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    Ok(edges)
}

/// Sort, deduplicate and symmetrize an edge list, dropping self-loops.
pub fn symmetrize(edges: impl IntoIterator<Item = Edge>) -> Vec<Edge> {
    let mut out: Vec<Edge> = edges
        .into_iter()
        .filter(|&(i, j)| i != j)
        .flat_map(|(i, j)| [(i, j), (j, i)])
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct MgfFile {
    mgf_version: String,
    name: String,
    dim: usize,
    num_nodes: usize,
    coords: Vec<f64>,
    edges: Vec<[usize; 2]>,
    features: BTreeMap<String, Vec<f64>>,
    target: Option<Target>,
}

pub fn save_graph(graph: &MeshGraph, path: &Path) -> Result<()> {
    jsonfmt::write_bytes(path, &graph_to_bytes(graph)?)
}

/// MGF encoding of a graph, as written by [`save_graph`].
pub fn graph_to_bytes(graph: &MeshGraph) -> Result<Vec<u8>> {
    let file = MgfFile {
        mgf_version: MGF_VERSION.to_string(),
        name: graph.name.clone(),
        dim: graph.dim,
        num_nodes: graph.num_nodes(),
        coords: graph.coords.clone(),
        edges: graph.edges.iter().map(|&(i, j)| [i, j]).collect(),
        features: graph.features.clone(),
        target: graph.target.clone(),
    };
    jsonfmt::to_vec_17(&file)
}

pub fn load_graph(path: &Path) -> Result<MeshGraph> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    graph_from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn graph_from_bytes(bytes: &[u8]) -> Result<MeshGraph> {
    let file: MgfFile = serde_json::from_slice(bytes)?;
    if file.mgf_version != MGF_VERSION {
        return Err(Error::Version {
            found: file.mgf_version,
            expected: MGF_VERSION.to_string(),
        });
    }
    if file.coords.len() != file.num_nodes * file.dim {
        return Err(Error::Format(format!(
            "\"coords\" has {} values, expected num_nodes·dim = {}",
            file.coords.len(),
            file.num_nodes * file.dim
        )));
    }
    let graph = MeshGraph {
        name: file.name,
        dim: file.dim,
        coords: file.coords,
        edges: file.edges.into_iter().map(|[i, j]| (i, j)).collect(),
        features: file.features,
        target: file.target,
    };
    graph.ensure_valid()?;
    Ok(graph)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!(
                "unknown split {other:?} (expected train or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub path: String,
    pub split: Split,
    pub num_nodes: usize,
    pub num_edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub mgf_version: String,
    pub dim: usize,
    pub feature_names: Vec<String>,
    pub target_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_units: Option<String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory that entry paths are relative to; set on load.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut manifest: DatasetManifest = jsonfmt::read_json(path)?;
        if manifest.mgf_version != MGF_VERSION {
            return Err(Error::Version {
                found: manifest.mgf_version,
                expected: MGF_VERSION.to_string(),
            });
        }
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonfmt::write_json_pretty(path, self)
    }

    pub fn entry_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Loads one entry and checks it against the manifest's counts and schema.
    pub fn load_entry(&self, entry: &ManifestEntry) -> Result<MeshGraph> {
        let graph = load_graph(&self.entry_path(entry))?;
        if graph.num_nodes() != entry.num_nodes || graph.edges.len() != entry.num_edges {
            return Err(Error::Format(format!(
                "{}: manifest lists {} nodes / {} edges, file has {} / {}",
                entry.name,
                entry.num_nodes,
                entry.num_edges,
                graph.num_nodes(),
                graph.edges.len()
            )));
        }
        if graph.dim != self.dim {
            return Err(Error::Format(format!(
                "{}: dim {} differs from manifest dim {}",
                entry.name, graph.dim, self.dim
            )));
        }
        for f in &self.feature_names {
            if !graph.features.contains_key(f) {
                return Err(Error::Format(format!("{}: missing feature {f:?}", entry.name)));
            }
        }
        Ok(graph)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<MeshGraph>> {
        self.entries(split).map(|e| self.load_entry(e)).collect()
    }

    /// Verifies that every entry exists and matches its listed counts.
    pub fn check(&self) -> Result<()> {
        let mut names = HashSet::new();
        for e in &self.entries {
            if !names.insert(e.name.as_str()) {
                return Err(Error::Format(format!("duplicate manifest entry {:?}", e.name)));
            }
            self.load_entry(e)?;
        }
        Ok(())
    }
}

/// Several graphs merged into one block-diagonal graph.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchedGraph {
    pub graph: MeshGraph,
    pub graph_id: Vec<usize>,
    /// First node index of each constituent graph.
    pub offsets: Vec<usize>,
}

impl BatchedGraph {
    pub fn num_graphs(&self) -> usize {
        self.offsets.len()
    }

    pub fn node_range(&self, k: usize) -> std::ops::Range<usize> {
        let start = self.offsets[k];
        let end = self
            .offsets
            .get(k + 1)
            .copied()
            .unwrap_or_else(|| self.graph.num_nodes());
        start..end
    }

    /// Recovers constituent `k` with its edges re-offset to start at zero.
    pub fn slice(&self, k: usize, name: &str) -> MeshGraph {
        let range = self.node_range(k);
        let dim = self.graph.dim;
        let g = &self.graph;
        MeshGraph {
            name: name.to_string(),
            dim,
            coords: g.coords[range.start * dim..range.end * dim].to_vec(),
            edges: g
                .edges
                .iter()
                .filter(|&&(i, _)| range.contains(&i))
                .map(|&(i, j)| (i - range.start, j - range.start))
                .collect(),
            features: g
                .features
                .iter()
                .map(|(n, v)| (n.clone(), v[range.clone()].to_vec()))
                .collect(),
            target: g.target.as_ref().map(|t| Target {
                name: t.name.clone(),
                values: t.values[range.clone()].to_vec(),
            }),
        }
    }
}

/// Concatenates graphs in input order, offsetting node indices.
pub fn disjoint_union(graphs: &[&MeshGraph]) -> Result<BatchedGraph> {
    let first = graphs
        .first()
        .ok_or_else(|| Error::InvalidInput("disjoint_union of zero graphs".into()))?;
    let dim = first.dim;
    let names: Vec<&String> = first.features.keys().collect();
    let target_name = first.target.as_ref().map(|t| t.name.clone());
    for g in &graphs[1..] {
        if g.dim != dim {
            return Err(Error::InvalidInput(format!(
                "cannot batch dim {} graph {:?} with dim {dim}",
                g.dim, g.name
            )));
        }
        if g.features.keys().collect::<Vec<_>>() != names {
            return Err(Error::InvalidInput(format!(
                "graph {:?} has a different feature schema",
                g.name
            )));
        }
        if g.target.as_ref().map(|t| t.name.clone()) != target_name {
            return Err(Error::InvalidInput(format!(
                "graph {:?} differs in target presence or name",
                g.name
            )));
        }
    }

    let total: usize = graphs.iter().map(|g| g.num_nodes()).sum();
    let mut coords = Vec::with_capacity(total * dim);
    let mut edges = Vec::with_capacity(graphs.iter().map(|g| g.edges.len()).sum());
    let mut features: BTreeMap<String, Vec<f64>> = names
        .iter()
        .map(|n| ((*n).clone(), Vec::with_capacity(total)))
        .collect();
    let mut target = target_name.map(|name| Target {
        name,
        values: Vec::with_capacity(total),
    });
    let mut graph_id = Vec::with_capacity(total);
    let mut offsets = Vec::with_capacity(graphs.len());
    let mut offset = 0;
    for (k, g) in graphs.iter().enumerate() {
        offsets.push(offset);
        coords.extend_from_slice(&g.coords);
        edges.extend(g.edges.iter().map(|&(i, j)| (i + offset, j + offset)));
        for (n, v) in &g.features {
            features.get_mut(n).expect("schema checked").extend_from_slice(v);
        }
        if let (Some(t), Some(src)) = (target.as_mut(), g.target.as_ref()) {
            t.values.extend_from_slice(&src.values);
        }
        graph_id.extend(std::iter::repeat_n(k, g.num_nodes()));
        offset += g.num_nodes();
    }
    let name = graphs
        .iter()
        .map(|g| g.name.as_str())
        .collect::<Vec<_>>()
        .join("+");
    Ok(BatchedGraph {
        graph: MeshGraph {
            name,
            dim,
            coords,
            edges,
            features,
            target,
        },
        graph_id,
        offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn triangle_graph() -> MeshGraph {
        MeshGraph {
            name: "tri".into(),
            dim: 2,
            coords: vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
            edges: edges_from_elements(&[[0, 1, 2]], ElementKind::Triangle).unwrap(),
            features: BTreeMap::from([("sdf".to_string(), vec![0.0, 0.1, 0.2])]),
            target: Some(Target {
                name: "stress".into(),
                values: vec![1.0, 2.0, 3.0],
            }),
        }
    }

    #[test]
    fn one_triangle_gives_six_edges() {
        let e = edges_from_elements(&[[0, 1, 2]], ElementKind::Triangle).unwrap();
        assert_eq!(e, vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]);
    }

    #[test]
    fn shared_triangle_edge_deduplicated() {
        let e = edges_from_elements(&[[0, 1, 2], [1, 2, 3]], ElementKind::Triangle).unwrap();
        // undirected: 01 02 12 13 23
        assert_eq!(e.len(), 10);
    }

    #[test]
    fn hexahedron_has_twelve_edges() {
        let e = edges_from_elements(&[[0, 1, 2, 3, 4, 5, 6, 7]], ElementKind::Hexahedron).unwrap();
        assert_eq!(e.len(), 24);
        // vertical edges i-(i+4), no face diagonals
        for i in 0..4 {
            assert!(e.contains(&(i, i + 4)));
        }
        assert!(!e.contains(&(0, 2)));
        assert!(!e.contains(&(0, 6)));
    }

    #[test]
    fn element_errors() {
        assert!(edges_from_elements(&[vec![0, 1]], ElementKind::Triangle).is_err());
        assert!(edges_from_elements(&[vec![0, 1, 1]], ElementKind::Triangle).is_err());
        assert!(edges_from_elements(&[vec![0, 1, 2]], ElementKind::Hexahedron).is_err());
    }

    #[test]
    fn validate_cases() {
        let g = triangle_graph();
        assert!(g.validate().is_empty());

        let mut bad = g.clone();
        bad.edges = vec![(0, 5), (5, 0)];
        let v = bad.validate();
        assert_eq!(v.len(), 2);
        assert!(v.iter().all(|v| v.kind == ViolationKind::EdgeOutOfRange));

        let mut bad = g.clone();
        bad.edges = vec![(0, 5)];
        let v = bad.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::EdgeOutOfRange);

        let mut asym = g.clone();
        asym.edges = vec![(0, 1)];
        let v = asym.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::Asymmetric);

        let mut dup = g.clone();
        dup.edges.push((0, 1));
        assert_eq!(dup.validate()[0].kind, ViolationKind::DuplicateEdge);

        let mut self_loop = g.clone();
        self_loop.edges.push((1, 1));
        assert_eq!(self_loop.validate()[0].kind, ViolationKind::SelfLoop);

        let mut short = g.clone();
        short.features.insert("sdf".into(), vec![1.0]);
        assert_eq!(short.validate()[0].kind, ViolationKind::Length);

        let mut nan = g;
        nan.target.as_mut().unwrap().values[2] = f64::NAN;
        assert_eq!(nan.validate()[0].kind, ViolationKind::NonFinite);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.json");
        let mut g = triangle_graph();
        g.coords[3] = 0.1 + 0.2;
        save_graph(&g, &path).unwrap();
        let back = load_graph(&path).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.features["sdf"].len(), 3);
    }

    #[test]
    fn missing_coords_names_key() {
        let text = r#"{"mgf_version":"1.0","name":"x","dim":2,"num_nodes":1,"edges":[],"features":{},"target":null}"#;
        let err = graph_from_bytes(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("coords"), "{err}");
    }

    #[test]
    fn version_and_invariant_errors_on_load() {
        let text = r#"{"mgf_version":"2.0","name":"x","dim":2,"num_nodes":1,"coords":[0,0],"edges":[],"features":{},"target":null}"#;
        assert!(matches!(
            graph_from_bytes(text.as_bytes()),
            Err(Error::Version { .. })
        ));
        let text = r#"{"mgf_version":"1.0","name":"x","dim":2,"num_nodes":2,"coords":[0,0,1,1],"edges":[[0,1]],"features":{},"target":null}"#;
        assert!(matches!(
            graph_from_bytes(text.as_bytes()),
            Err(Error::InvalidGraph { .. })
        ));
    }

    #[test]
    fn union_offsets_edges() {
        let a = triangle_graph();
        let mut b = triangle_graph();
        b.name = "pair".into();
        b.coords.truncate(4);
        b.edges = vec![(0, 1), (1, 0)];
        b.features.get_mut("sdf").unwrap().truncate(2);
        b.target.as_mut().unwrap().values.truncate(2);
        let u = disjoint_union(&[&a, &b]).unwrap();
        assert_eq!(u.graph.num_nodes(), 5);
        assert!(u.graph.edges.contains(&(3, 4)));
        assert_eq!(u.graph_id, vec![0, 0, 0, 1, 1]);
        assert!(u.graph.validate().is_empty());
        assert_eq!(u.slice(1, "pair"), b);
        assert_eq!(u.slice(0, "tri"), a);
    }

    #[test]
    fn union_single_is_identity() {
        let a = triangle_graph();
        let u = disjoint_union(&[&a]).unwrap();
        assert_eq!(u.graph_id, vec![0; 3]);
        assert_eq!(u.graph.coords, a.coords);
        assert_eq!(u.graph.edges, a.edges);
    }

    #[test]
    fn union_of_copies() {
        let a = triangle_graph();
        let u = disjoint_union(&[&a, &a, &a, &a]).unwrap();
        assert_eq!(u.graph.num_nodes(), 12);
        for k in 0..4 {
            assert_eq!(u.slice(k, "tri"), a);
        }
    }

    #[test]
    fn union_rejects_mixed_schema() {
        let a = triangle_graph();
        let mut b = triangle_graph();
        b.features.clear();
        assert!(disjoint_union(&[&a, &b]).is_err());
        let mut c = triangle_graph();
        c.dim = 3;
        assert!(disjoint_union(&[&a, &c]).is_err());
        let mut d = triangle_graph();
        d.target = None;
        assert!(disjoint_union(&[&a, &d]).is_err());
    }
}
