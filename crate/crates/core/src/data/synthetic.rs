//! Desk-scale stand-in for the loop-detector datasets.
//!
//! Each node's series is
//! `level_i + amp_i * sin(2π t / 288 + phase_i) + SPATIAL_SCALE * c_i(t) + noise`,
//! where `c(t)` is a temporally persistent AR(1) field diffused over the graph and the
//! per-node traits `level`, `amp`, `phase` are themselves graph-smoothed, so neighbouring
//! sensors behave alike and distant ones differ.

use rand::Rng;
use rand_distr::StandardNormal;

use super::TrafficDataset;
use crate::error::{Error, Result};
use crate::graph::{build_operator, OperatorKind, PropagationMatrix, SensorGraph};
use crate::rng::{derive_seed, seeded_rng, SimRng};

/// Steps per day at 5-minute resolution.
const DAY_STEPS: f64 = 288.0;
const DIFFUSION_HOPS: usize = 3;
const AR_COEFF: f64 = 0.95;
const BASE_LEVEL: f64 = 60.0;
const LEVEL_SPREAD: f64 = 8.0;
const BASE_AMPLITUDE: f64 = 8.0;
const AMPLITUDE_SPREAD: f64 = 3.0;
const PHASE_SPREAD: f64 = 0.8;
const SPATIAL_SCALE: f64 = 4.0;
const NOISE_STD: f64 = 0.5;

fn diffuse(op: &PropagationMatrix, v: &[f64], hops: usize) -> Vec<f64> {
    let n = op.n_nodes();
    let mut cur = v.to_vec();
    for _ in 0..hops {
        cur = (0..n)
            .map(|i| op.row(i).iter().zip(&cur).map(|(p, x)| p * x).sum())
            .collect();
    }
    cur
}

/// Rescales to zero mean and unit standard deviation across nodes (all zeros if constant).
fn standardize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std > 1e-12 {
        v.iter().map(|x| (x - mean) / std).collect()
    } else {
        vec![0.0; v.len()]
    }
}

fn normal_vec(rng: &mut SimRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn generate_synthetic(
    n_nodes: usize,
    n_steps: usize,
    graph: &SensorGraph,
    seed: u64,
    missing_rate: f64,
) -> Result<TrafficDataset> {
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(Error::Config(format!(
            "missing rate {missing_rate} outside [0, 1)"
        )));
    }
    if graph.n_nodes() != n_nodes {
        return Err(Error::Config(format!(
            "graph has {} nodes but {n_nodes} were requested",
            graph.n_nodes()
        )));
    }
    let op = build_operator(graph, OperatorKind::RowNormalized);
    let mut rng = seeded_rng(derive_seed(seed, 0));

    let trait_field =
        |rng: &mut SimRng| standardize(&diffuse(&op, &normal_vec(rng, n_nodes), DIFFUSION_HOPS));
    let level: Vec<f64> = trait_field(&mut rng)
        .iter()
        .map(|z| BASE_LEVEL + LEVEL_SPREAD * z)
        .collect();
    let amp: Vec<f64> = trait_field(&mut rng)
        .iter()
        .map(|z| (BASE_AMPLITUDE + AMPLITUDE_SPREAD * z).max(1.0))
        .collect();
    let phase: Vec<f64> = trait_field(&mut rng)
        .iter()
        .map(|z| PHASE_SPREAD * z)
        .collect();

    let innovation_scale = (1.0 - AR_COEFF * AR_COEFF).sqrt();
    let mut latent = normal_vec(&mut rng, n_nodes);
    let mut values = vec![0.0; n_nodes * n_steps];
    for t in 0..n_steps {
        if t > 0 {
            for a in latent.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *a = AR_COEFF * *a + innovation_scale * e;
            }
        }
        let spatial = diffuse(&op, &latent, DIFFUSION_HOPS);
        let angle = 2.0 * std::f64::consts::PI * t as f64 / DAY_STEPS;
        for i in 0..n_nodes {
            let noise: f64 = rng.sample(StandardNormal);
            values[i * n_steps + t] = level[i]
                + amp[i] * (angle + phase[i]).sin()
                + SPATIAL_SCALE * spatial[i]
                + NOISE_STD * noise;
        }
    }

    let mut mask_rng = seeded_rng(derive_seed(seed, 1));
    let mask: Vec<bool> = (0..n_nodes * n_steps)
        .map(|_| mask_rng.random::<f64>() >= missing_rate)
        .collect();
    for (v, &m) in values.iter_mut().zip(&mask) {
        if !m {
            *v = 0.0;
        }
    }
    TrafficDataset::new(n_nodes, n_steps, values, mask, 5)
}
