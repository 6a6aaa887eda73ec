//! Client road-network graph and the propagation operators built from it.
//!
//! Edge-list files are UTF-8 CSV:
//!
//! ```text
//! # nodes=3
//! src,dst,weight
//! 0,1,1.0
//! 1,2,0.5
//! ```

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

/// Weighted directed graph over `n_nodes` clients with dense ids `0..n_nodes`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorGraph {
    n_nodes: usize,
    edges: Vec<Edge>,
    symmetrized: bool,
}

impl SensorGraph {
    /// Validates and builds a graph. Edges are stored sorted by `(src, dst)`.
    pub fn new(n_nodes: usize, edges: Vec<Edge>, symmetrize: bool) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::Validation(
                "graph must have at least one node".into(),
            ));
        }
        let mut by_pair: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for e in &edges {
            if e.src >= n_nodes || e.dst >= n_nodes {
                return Err(Error::Validation(format!(
                    "edge ({},{}) references a node id >= {n_nodes}",
                    e.src, e.dst
                )));
            }
            if !e.weight.is_finite() || e.weight < 0.0 {
                return Err(Error::Validation(format!(
                    "edge ({},{}) has invalid weight {}",
                    e.src, e.dst, e.weight
                )));
            }
            if e.src == e.dst {
                return Err(Error::Validation(format!(
                    "self-loop on node {} (self-loops are added by the propagation operator)",
                    e.src
                )));
            }
            if by_pair.insert((e.src, e.dst), e.weight).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate edge ({},{})",
                    e.src, e.dst
                )));
            }
        }
        if symmetrize {
            let forward: Vec<((usize, usize), f64)> =
                by_pair.iter().map(|(&k, &w)| (k, w)).collect();
            for ((s, d), w) in forward {
                let entry = by_pair.entry((d, s)).or_insert(w);
                *entry = entry.max(w);
            }
        }
        let edges = by_pair
            .into_iter()
            .map(|((src, dst), weight)| Edge { src, dst, weight })
            .collect();
        Ok(Self {
            n_nodes,
            edges,
            symmetrized: symmetrize,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn is_symmetrized(&self) -> bool {
        self.symmetrized
    }

    /// Dense row-major adjacency `A` (without self-loops).
    pub fn adjacency(&self) -> Vec<f64> {
        let n = self.n_nodes;
        let mut a = vec![0.0; n * n];
        for e in &self.edges {
            a[e.src * n + e.dst] = e.weight;
        }
        a
    }

    /// True iff the undirected version of the graph has a single component.
    pub fn is_connected(&self) -> bool {
        let n = self.n_nodes;
        let mut neighbours = vec![Vec::new(); n];
        for e in &self.edges {
            neighbours[e.src].push(e.dst);
            neighbours[e.dst].push(e.src);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut visited = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &neighbours[u] {
                if !seen[v] {
                    seen[v] = true;
                    visited += 1;
                    queue.push_back(v);
                }
            }
        }
        visited == n
    }

    /// Undirected ring `0-1-...-(n-1)-0` with unit weights.
    pub fn ring(n: usize) -> Result<Self> {
        let mut edges = Vec::new();
        match n {
            0 | 1 => {}
            2 => edges.push(unit(0, 1)),
            _ => edges.extend((0..n).map(|i| unit(i, (i + 1) % n))),
        }
        Self::new(n, edges, true)
    }

    /// Undirected path `0-1-...-(n-1)` with unit weights.
    pub fn path(n: usize) -> Result<Self> {
        Self::new(n, (1..n).map(|i| unit(i - 1, i)).collect(), true)
    }

    /// Complete graph with unit weights.
    pub fn complete(n: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                edges.push(unit(i, j));
            }
        }
        Self::new(n, edges, true)
    }

    /// 4-neighbour grid of `rows x cols` nodes, row-major ids.
    pub fn grid(rows: usize, cols: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let id = r * cols + c;
                if c + 1 < cols {
                    edges.push(unit(id, id + 1));
                }
                if r + 1 < rows {
                    edges.push(unit(id, id + cols));
                }
            }
        }
        Self::new(rows * cols, edges, true)
    }

    /// Undirected Erdős–Rényi graph: each unordered pair is connected with probability `p`.
    pub fn erdos_renyi(n: usize, p: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("edge probability {p} outside [0,1]")));
        }
        let mut rng = seeded_rng(seed);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < p {
                    edges.push(unit(i, j));
                }
            }
        }
        Self::new(n, edges, true)
    }

    /// Serializes to the edge-list CSV format.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# nodes={}\nsrc,dst,weight\n", self.n_nodes);
        for e in &self.edges {
            let _ = writeln!(out, "{},{},{}", e.src, e.dst, e.weight);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn unit(src: usize, dst: usize) -> Edge {
    Edge {
        src,
        dst,
        weight: 1.0,
    }
}

/// Reads an edge-list file. See [`parse_graph`].
pub fn load_graph(
    path: &Path,
    symmetrize: bool,
    binarize_threshold: Option<f64>,
) -> Result<SensorGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_graph(
        &text,
        &path.display().to_string(),
        symmetrize,
        binarize_threshold,
    )
}

/// Parses edge-list text. With `binarize_threshold`, weights `>= threshold` become 1 and
/// the rest are dropped; binarization happens before symmetrization.
pub fn parse_graph(
    text: &str,
    origin: &str,
    symmetrize: bool,
    binarize_threshold: Option<f64>,
) -> Result<SensorGraph> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let (first, body) = text.split_once('\n').unwrap_or((text, ""));
    let n_nodes =
        parse_nodes_header(first).ok_or_else(|| parse_err(1, "expected `# nodes=N`".into()))?;

    let mut records = csv_records(body, origin);
    let (no, header) = records
        .next()
        .transpose()?
        .ok_or_else(|| parse_err(2, "missing `src,dst,weight` header".into()))?;
    if header.iter().collect::<Vec<_>>() != ["src", "dst", "weight"] {
        return Err(parse_err(
            no,
            format!(
                "expected header `src,dst,weight`, got `{}`",
                header.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }

    let mut edges = Vec::new();
    for rec in records {
        let (no, fields) = rec?;
        if fields.len() != 3 {
            return Err(parse_err(
                no,
                format!("expected 3 fields, found {}", fields.len()),
            ));
        }
        let src: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(no, format!("bad src `{}`", &fields[0])))?;
        let dst: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(no, format!("bad dst `{}`", &fields[1])))?;
        let weight: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(no, format!("bad weight `{}`", &fields[2])))?;
        if weight < 0.0 {
            return Err(Error::Validation(format!(
                "line {no}: negative weight {weight}"
            )));
        }
        match binarize_threshold {
            Some(t) if weight >= t => edges.push(Edge {
                src,
                dst,
                weight: 1.0,
            }),
            Some(_) => {}
            None => edges.push(Edge { src, dst, weight }),
        }
    }
    SensorGraph::new(n_nodes, edges, symmetrize)
}

/// Parses the `# nodes=N` metadata line (extra `key=value` pairs are ignored).
pub(crate) fn parse_nodes_header(line: &str) -> Option<usize> {
    metadata_value(line, "nodes")?.parse().ok()
}

/// Trimmed CSV records of the text after the metadata line, with 1-based file line numbers.
/// Blank lines are skipped.
pub(crate) fn csv_records<'a>(
    body: &'a str,
    origin: &'a str,
) -> impl Iterator<Item = Result<(usize, csv::StringRecord)>> + 'a {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes())
        .into_records()
        .map(move |rec| {
            let rec = rec.map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: e.position().map_or(0, |p| p.line() as usize + 1),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize + 1);
            Ok((line, rec))
        })
}

pub(crate) fn metadata_value<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let rest = line.trim().strip_prefix('#')?;
    rest.split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OperatorKind {
    /// `D̃⁻¹ Ã`
    RowNormalized,
    /// `D̃^{-1/2} Ã D̃^{-1/2}`
    SymNormalized,
}

/// Dense `N x N` propagation operator, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationMatrix {
    kind: OperatorKind,
    n_nodes: usize,
    data: Vec<f64>,
}

impl PropagationMatrix {
    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_nodes + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_nodes..(i + 1) * self.n_nodes]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Self-loop augmented adjacency `Ã = A + I` and its degrees `D̃_ii = Σ_j Ã_ij`.
pub fn augmented_adjacency(g: &SensorGraph) -> (Vec<f64>, Vec<f64>) {
    let n = g.n_nodes();
    let mut a = g.adjacency();
    for i in 0..n {
        a[i * n + i] += 1.0;
    }
    let degree = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
    (a, degree)
}

pub fn build_operator(g: &SensorGraph, kind: OperatorKind) -> PropagationMatrix {
    let n = g.n_nodes();
    let (a, degree) = augmented_adjacency(g);
    let mut data = vec![0.0; n * n];
    match kind {
        OperatorKind::RowNormalized => {
            for i in 0..n {
                for j in 0..n {
                    data[i * n + j] = a[i * n + j] / degree[i];
                }
            }
        }
        OperatorKind::SymNormalized => {
            let root: Vec<f64> = degree.iter().map(|d| d.sqrt()).collect();
            for i in 0..n {
                for j in 0..n {
                    data[i * n + j] = a[i * n + j] / (root[i] * root[j]);
                }
            }
        }
    }
    PropagationMatrix {
        kind,
        n_nodes: n,
        data,
    }
}
