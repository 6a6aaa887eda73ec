//! Server-side aggregation over the client parameter matrix `X` (`N x P`, one row per
//! client).
//!
//! * FedAvg: every client receives the uniform mean row.
//! * GraphFedAvg: `X ← D̃⁻¹ Ã X`, applied `hops` times.
//! * MPFedAvg: `X ← α D̃^{-1/2} Ã D̃^{-1/2} X + (1 - α) X`, applied `hops` times.
//!
//! All arithmetic is `f64` and every output element is summed over source clients in
//! ascending index order, so results do not depend on scheduling.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_operator, OperatorKind, PropagationMatrix, SensorGraph};
use crate::model::{GruArch, GruSeq2Seq};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Canonical flattening order of a model's tensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub arch: GruArch,
    pub entries: Vec<LayoutEntry>,
    pub total_len: usize,
}

impl ParamLayout {
    pub fn for_arch(arch: GruArch) -> Self {
        let template = GruSeq2Seq::zeros(arch);
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, t) in template.named_tensors() {
            entries.push(LayoutEntry {
                name,
                shape: t.shape.clone(),
                offset,
            });
            offset += t.len();
        }
        Self {
            arch,
            entries,
            total_len: offset,
        }
    }
}

/// Row-major serialization of every tensor in layout order.
pub fn flatten(model: &GruSeq2Seq, layout: &ParamLayout) -> Result<Vec<f64>> {
    let tensors = model.named_tensors();
    if tensors.len() != layout.entries.len() {
        return Err(Error::Layout(format!(
            "model has {} tensors, layout expects {}",
            tensors.len(),
            layout.entries.len()
        )));
    }
    let mut row = Vec::with_capacity(layout.total_len);
    for ((name, t), entry) in tensors.into_iter().zip(&layout.entries) {
        if name != entry.name || t.shape != entry.shape {
            return Err(Error::Layout(format!(
                "tensor `{name}` has shape {:?}, layout expects `{}` with shape {:?}",
                t.shape, entry.name, entry.shape
            )));
        }
        row.extend_from_slice(&t.data);
    }
    Ok(row)
}

pub fn unflatten(row: &[f64], layout: &ParamLayout) -> Result<GruSeq2Seq> {
    let mut model = GruSeq2Seq::zeros(layout.arch);
    load_row(&mut model, row, layout)?;
    Ok(model)
}

/// Overwrites `model`'s parameters from `row`.
pub fn load_row(model: &mut GruSeq2Seq, row: &[f64], layout: &ParamLayout) -> Result<()> {
    if row.len() != layout.total_len {
        return Err(Error::Layout(format!(
            "row has {} values, layout expects {}",
            row.len(),
            layout.total_len
        )));
    }
    if model.arch != layout.arch {
        return Err(Error::Layout(
            "model architecture differs from layout".into(),
        ));
    }
    for ((name, t), entry) in model.named_tensors_mut().into_iter().zip(&layout.entries) {
        if name != entry.name || t.shape != entry.shape {
            return Err(Error::Layout(format!(
                "tensor `{name}` does not match layout entry `{}`",
                entry.name
            )));
        }
        t.data
            .copy_from_slice(&row[entry.offset..entry.offset + entry.len()]);
    }
    Ok(())
}

/// `N x P` client parameter matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMatrix {
    n_clients: usize,
    param_dim: usize,
    values: Vec<f64>,
}

impl ParamMatrix {
    pub fn new(n_clients: usize, param_dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_clients * param_dim {
            return Err(Error::Shape(format!(
                "{n_clients}x{param_dim} matrix given {} values",
                values.len()
            )));
        }
        Ok(Self {
            n_clients,
            param_dim,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let param_dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != param_dim) {
            return Err(Error::Shape(format!(
                "row {bad} has length {}, expected {param_dim}",
                rows[bad].len()
            )));
        }
        Self::new(rows.len(), param_dim, rows.concat())
    }

    pub fn from_models(models: &[&GruSeq2Seq], layout: &ParamLayout) -> Result<Self> {
        let rows = models
            .iter()
            .map(|m| flatten(m, layout))
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(&rows)
    }

    pub fn n_clients(&self) -> usize {
        self.n_clients
    }

    pub fn param_dim(&self) -> usize {
        self.param_dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.param_dim..(i + 1) * self.param_dim]
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.param_dim + k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Column-wise mean.
    pub fn column_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.param_dim];
        for i in 0..self.n_clients {
            for (m, v) in mean.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.n_clients as f64);
        mean
    }

    fn check_finite(&self, stage: &str) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::TrainingDiverged(format!(
                "{stage}: non-finite parameter at client {} offset {}",
                i / self.param_dim.max(1),
                i % self.param_dim.max(1)
            ))),
            None => Ok(()),
        }
    }

    /// `client_id,offset,value` dump.
    pub fn to_debug_csv(&self) -> String {
        let mut out = String::from("client_id,offset,value\n");
        for i in 0..self.n_clients {
            for (k, v) in self.row(i).iter().enumerate() {
                let _ = writeln!(out, "{i},{k},{v}");
            }
        }
        out
    }
}

/// Uniform mean of all rows, broadcast to every client.
pub fn fedavg(x: &ParamMatrix) -> Result<ParamMatrix> {
    if x.n_clients == 0 {
        return Err(Error::EmptyInput("fedavg over zero clients"));
    }
    x.check_finite("fedavg input")?;
    let w = 1.0 / x.n_clients as f64;
    let mut mean = vec![0.0; x.param_dim];
    for i in 0..x.n_clients {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += w * v;
        }
    }
    let values = mean.repeat(x.n_clients);
    let out = ParamMatrix { values, ..*x };
    out.check_finite("fedavg output")?;
    Ok(out)
}

/// `Y = P X`, summing over source clients in ascending order.
fn propagate(p: &PropagationMatrix, x: &ParamMatrix) -> ParamMatrix {
    let n = x.n_clients;
    let mut values = vec![0.0; n * x.param_dim];
    for i in 0..n {
        let out = &mut values[i * x.param_dim..(i + 1) * x.param_dim];
        for (j, &w) in p.row(i).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(x.row(j)) {
                *o += w * v;
            }
        }
    }
    ParamMatrix { values, ..*x }
}

fn check_operator(p: &PropagationMatrix, x: &ParamMatrix, kind: OperatorKind) -> Result<()> {
    if p.kind() != kind {
        return Err(Error::Config(format!(
            "expected a {kind:?} operator, got {:?}",
            p.kind()
        )));
    }
    if p.n_nodes() != x.n_clients {
        return Err(Error::Shape(format!(
            "operator is {}x{} but there are {} clients",
            p.n_nodes(),
            p.n_nodes(),
            x.n_clients
        )));
    }
    Ok(())
}

/// Graph neighbourhood-aware averaging: `hops` applications of `D̃⁻¹ Ã`.
pub fn graph_fedavg(
    x: &ParamMatrix,
    p_row: &PropagationMatrix,
    hops: usize,
) -> Result<ParamMatrix> {
    check_operator(p_row, x, OperatorKind::RowNormalized)?;
    x.check_finite("graph_fedavg input")?;
    let mut cur = x.clone();
    for _ in 0..hops {
        cur = propagate(p_row, &cur);
    }
    cur.check_finite("graph_fedavg output")?;
    Ok(cur)
}

/// Message-passing averaging: `hops` applications of `X ← α S X + (1 - α) X` with
/// `S = D̃^{-1/2} Ã D̃^{-1/2}`.
pub fn mp_fedavg(
    x: &ParamMatrix,
    p_sym: &PropagationMatrix,
    alpha: f64,
    hops: usize,
) -> Result<ParamMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    check_operator(p_sym, x, OperatorKind::SymNormalized)?;
    x.check_finite("mp_fedavg input")?;
    if alpha == 0.0 {
        return Ok(x.clone());
    }
    let mut cur = x.clone();
    for _ in 0..hops {
        let mixed = propagate(p_sym, &cur);
        for (c, m) in cur.values.iter_mut().zip(&mixed.values) {
            *c = alpha * m + (1.0 - alpha) * *c;
        }
    }
    cur.check_finite("mp_fedavg output")?;
    Ok(cur)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    FedAvg,
    GraphFedAvg,
    MpFedAvg,
}

impl std::fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AggregatorKind::FedAvg => "fedavg",
            AggregatorKind::GraphFedAvg => "graphfedavg",
            AggregatorKind::MpFedAvg => "mpfedavg",
        })
    }
}

impl std::str::FromStr for AggregatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fedavg" => Ok(AggregatorKind::FedAvg),
            "graphfedavg" => Ok(AggregatorKind::GraphFedAvg),
            // also published under the name LPFedAvg
            "mpfedavg" | "lpfedavg" => Ok(AggregatorKind::MpFedAvg),
            other => Err(Error::Config(format!("unknown aggregator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    pub kind: AggregatorKind,
    /// Propagation steps per aggregation; ignored by FedAvg.
    pub hops: usize,
    /// Neighbour weight; MPFedAvg only.
    pub alpha: f64,
}

fn default_hops() -> usize {
    1
}

fn default_alpha() -> f64 {
    0.8
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self::fedavg()
    }
}

impl AggregatorConfig {
    pub fn fedavg() -> Self {
        Self {
            kind: AggregatorKind::FedAvg,
            hops: default_hops(),
            alpha: default_alpha(),
        }
    }

    pub fn graph_fedavg(hops: usize) -> Self {
        Self {
            kind: AggregatorKind::GraphFedAvg,
            hops,
            alpha: default_alpha(),
        }
    }

    pub fn mp_fedavg(alpha: f64, hops: usize) -> Self {
        Self {
            kind: AggregatorKind::MpFedAvg,
            hops,
            alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "aggregator.alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Short label such as `graphfedavg(L=1)`.
    pub fn label(&self) -> String {
        match self.kind {
            AggregatorKind::FedAvg => "fedavg".into(),
            AggregatorKind::GraphFedAvg => format!("graphfedavg(L={})", self.hops),
            AggregatorKind::MpFedAvg => format!("mpfedavg(a={},L={})", self.alpha, self.hops),
        }
    }
}

/// An aggregator bound to a graph, with its operator precomputed.
#[derive(Debug, Clone)]
pub struct Aggregator {
    config: AggregatorConfig,
    operator: Option<PropagationMatrix>,
}

impl Aggregator {
    pub fn new(config: AggregatorConfig, graph: Option<&SensorGraph>) -> Result<Self> {
        config.validate()?;
        let kind = match config.kind {
            AggregatorKind::FedAvg => None,
            AggregatorKind::GraphFedAvg => Some(OperatorKind::RowNormalized),
            AggregatorKind::MpFedAvg => Some(OperatorKind::SymNormalized),
        };
        let operator = match (kind, graph) {
            (None, _) => None,
            (Some(k), Some(g)) => Some(build_operator(g, k)),
            (Some(_), None) => {
                return Err(Error::Config(format!("{} requires a graph", config.kind)))
            }
        };
        Ok(Self { config, operator })
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.config
    }

    pub fn apply(&self, x: &ParamMatrix) -> Result<ParamMatrix> {
        match (self.config.kind, &self.operator) {
            (AggregatorKind::FedAvg, _) => fedavg(x),
            (AggregatorKind::GraphFedAvg, Some(p)) => graph_fedavg(x, p, self.config.hops),
            (AggregatorKind::MpFedAvg, Some(p)) => {
                mp_fedavg(x, p, self.config.alpha, self.config.hops)
            }
            _ => Err(Error::Internal("graph aggregator without operator".into())),
        }
    }
}
