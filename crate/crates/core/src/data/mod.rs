//! Per-node traffic series, chronological splits, normalization and sliding windows.

mod csv;
mod synthetic;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use self::csv::{load_dataset, parse_dataset};
pub use self::synthetic::generate_synthetic;

/// Speed readings for `n_nodes` sensors over `n_steps` timesteps, node-major.
/// Entries with `mask == false` are missing; their stored value is meaningless.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficDataset {
    n_nodes: usize,
    n_steps: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    interval_min: u32,
}

impl TrafficDataset {
    pub fn new(
        n_nodes: usize,
        n_steps: usize,
        values: Vec<f64>,
        mask: Vec<bool>,
        interval_min: u32,
    ) -> Result<Self> {
        if n_nodes == 0 || n_steps == 0 {
            return Err(Error::Validation(
                "dataset needs at least one node and one step".into(),
            ));
        }
        if values.len() != n_nodes * n_steps || mask.len() != values.len() {
            return Err(Error::Shape(format!(
                "dataset {n_nodes}x{n_steps} given {} values and {} mask entries",
                values.len(),
                mask.len()
            )));
        }
        if let Some(i) = (0..values.len()).find(|&i| mask[i] && !values[i].is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite observed value at node {} step {}",
                i / n_steps,
                i % n_steps
            )));
        }
        Ok(Self {
            n_nodes,
            n_steps,
            values,
            mask,
            interval_min,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn interval_min(&self) -> u32 {
        self.interval_min
    }

    pub fn series(&self, node: usize) -> &[f64] {
        &self.values[node * self.n_steps..(node + 1) * self.n_steps]
    }

    pub fn series_mask(&self, node: usize) -> &[bool] {
        &self.mask[node * self.n_steps..(node + 1) * self.n_steps]
    }

    pub fn value(&self, node: usize, t: usize) -> Option<f64> {
        let i = node * self.n_steps + t;
        self.mask[i].then_some(self.values[i])
    }

    /// Overwrites every missing entry's stored value. Only useful for tests that check
    /// missing values are never read.
    pub fn poison_missing(&mut self, value: f64) {
        for (v, &m) in self.values.iter_mut().zip(&self.mask) {
            if !m {
                *v = value;
            }
        }
    }

    pub fn observed_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

/// Z-score statistics shared by all nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Mean and population standard deviation of observed entries in `range`, over all nodes.
pub fn norm_stats(ds: &TrafficDataset, range: Range<usize>) -> Result<NormStats> {
    let observed = || {
        (0..ds.n_nodes()).flat_map(|n| {
            let r = range.clone();
            ds.series(n)[r.clone()]
                .iter()
                .zip(&ds.series_mask(n)[r])
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
        })
    };
    let (sum, count) = observed().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        return Err(Error::Validation(
            "no observed values in the training range".into(),
        ));
    }
    let mean = sum / count as f64;
    let var = observed().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(Error::Validation(
            "training values are constant (std = 0)".into(),
        ));
    }
    Ok(NormStats { mean, std })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|f| !(*f > 0.0)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum to 1, got {}/{}/{}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

/// How split boundaries are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitConvention {
    /// Timesteps are partitioned into disjoint ranges; windows never cross a boundary.
    #[default]
    Timesteps,
    /// Window start positions are partitioned; consecutive ranges overlap by
    /// `window_len - 1` steps. Reproduces the published METR-LA/PEMS-BAY sequence counts.
    Windows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    /// Statistics of the train range only.
    pub norm: NormStats,
}

impl SplitRanges {
    pub fn range(&self, name: SplitName) -> Range<usize> {
        match name {
            SplitName::Train => self.train.clone(),
            SplitName::Val => self.val.clone(),
            SplitName::Test => self.test.clone(),
        }
    }
}

pub fn chronological_split(
    ds: &TrafficDataset,
    fracs: SplitFractions,
    window_len: usize,
    convention: SplitConvention,
) -> Result<SplitRanges> {
    fracs.validate()?;
    let n = ds.n_steps();
    let (train, val, test) = match convention {
        SplitConvention::Timesteps => {
            let train_end = (n as f64 * fracs.train).round() as usize;
            let val_end = ((n as f64 * (fracs.train + fracs.val)).round() as usize).min(n);
            (0..train_end, train_end..val_end, val_end..n)
        }
        SplitConvention::Windows => {
            let n_windows = (n + 1).saturating_sub(window_len);
            let n_train = (n_windows as f64 * fracs.train).round() as usize;
            let n_test = (n_windows as f64 * fracs.test).round() as usize;
            let n_val = n_windows.saturating_sub(n_train + n_test);
            let tail = window_len.saturating_sub(1);
            (
                0..n_train + tail,
                n_train..n_train + n_val + tail,
                n_train + n_val..n,
            )
        }
    };
    for (name, r) in [("train", &train), ("val", &val), ("test", &test)] {
        if r.end < r.start || r.len() < window_len {
            return Err(Error::Config(format!(
                "{name} split has {} steps, fewer than the window length {window_len}",
                r.end.saturating_sub(r.start)
            )));
        }
    }
    let norm = norm_stats(ds, train.clone())?;
    Ok(SplitRanges {
        train,
        val,
        test,
        norm,
    })
}

/// Number of windows of length `horizon_in + horizon_out` in a range of `len` steps.
pub fn window_count(len: usize, horizon_in: usize, horizon_out: usize, stride: usize) -> usize {
    let w = horizon_in + horizon_out;
    if len < w || stride == 0 {
        0
    } else {
        (len - w) / stride + 1
    }
}

/// One forecasting example for a single node, in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub node: usize,
    /// First timestep of the window.
    pub start: usize,
    /// `horizon_in x input_dim`, imputed, no missing values.
    pub input: Vec<f64>,
    /// `horizon_out x input_dim`; entries with a false mask are 0.
    pub target: Vec<f64>,
    pub target_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSplit {
    pub name: SplitName,
    pub horizon_in: usize,
    pub horizon_out: usize,
    pub input_dim: usize,
    pub sequences: Vec<Sequence>,
}

impl WindowedSplit {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Concatenates splits in order (used for centralized training).
    pub fn concat(parts: &[WindowedSplit]) -> Result<WindowedSplit> {
        let first = parts
            .first()
            .ok_or(Error::EmptyInput("no splits to concatenate"))?;
        let mut sequences = Vec::new();
        for p in parts {
            if (p.horizon_in, p.horizon_out, p.input_dim)
                != (first.horizon_in, first.horizon_out, first.input_dim)
            {
                return Err(Error::Shape(
                    "cannot concatenate splits with different window shapes".into(),
                ));
            }
            sequences.extend(p.sequences.iter().cloned());
        }
        Ok(WindowedSplit {
            sequences,
            ..first.clone_empty()
        })
    }

    fn clone_empty(&self) -> WindowedSplit {
        WindowedSplit {
            name: self.name,
            horizon_in: self.horizon_in,
            horizon_out: self.horizon_out,
            input_dim: self.input_dim,
            sequences: Vec::new(),
        }
    }
}

/// Sliding windows over `range` for one node. Inputs are z-scored with `norm`; missing
/// input entries take the last observed value in the window, or the train mean before the
/// first observation. Targets are never imputed; their missingness goes to `target_mask`.
pub fn make_node_windows(
    ds: &TrafficDataset,
    node: usize,
    range: Range<usize>,
    norm: NormStats,
    horizon_in: usize,
    horizon_out: usize,
    stride: usize,
    name: SplitName,
) -> Result<WindowedSplit> {
    let w = horizon_in + horizon_out;
    if range.end > ds.n_steps() || range.len() < w {
        return Err(Error::Config(format!(
            "range {range:?} cannot hold a window of {w} steps in a series of {}",
            ds.n_steps()
        )));
    }
    if stride == 0 {
        return Err(Error::Config("window stride must be >= 1".into()));
    }
    let values = ds.series(node);
    let mask = ds.series_mask(node);
    let mut sequences =
        Vec::with_capacity(window_count(range.len(), horizon_in, horizon_out, stride));
    let mut start = range.start;
    while start + w <= range.end {
        let mut input = Vec::with_capacity(horizon_in);
        let mut last = 0.0;
        for t in start..start + horizon_in {
            if mask[t] {
                last = norm.normalize(values[t]);
            }
            input.push(last);
        }
        let mut target = Vec::with_capacity(horizon_out);
        let mut target_mask = Vec::with_capacity(horizon_out);
        for t in start + horizon_in..start + w {
            target.push(if mask[t] {
                norm.normalize(values[t])
            } else {
                0.0
            });
            target_mask.push(mask[t]);
        }
        sequences.push(Sequence {
            node,
            start,
            input,
            target,
            target_mask,
        });
        start += stride;
    }
    Ok(WindowedSplit {
        name,
        horizon_in,
        horizon_out,
        input_dim: 1,
        sequences,
    })
}

/// Windows for every node, node-major.
pub fn make_windows(
    ds: &TrafficDataset,
    range: Range<usize>,
    norm: NormStats,
    horizon_in: usize,
    horizon_out: usize,
    stride: usize,
    name: SplitName,
) -> Result<WindowedSplit> {
    let parts = (0..ds.n_nodes())
        .map(|n| {
            make_node_windows(
                ds,
                n,
                range.clone(),
                norm,
                horizon_in,
                horizon_out,
                stride,
                name,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    WindowedSplit::concat(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn ramp(n_nodes: usize, n_steps: usize) -> TrafficDataset {
        let values = (0..n_nodes * n_steps)
            .map(|i| (i % n_steps) as f64 + 10.0 * (i / n_steps) as f64)
            .collect();
        TrafficDataset::new(n_nodes, n_steps, values, vec![true; n_nodes * n_steps], 5).unwrap()
    }

    #[test]
    fn split_ranges_100_steps() {
        let s = chronological_split(
            &ramp(2, 100),
            SplitFractions::default(),
            10,
            SplitConvention::Timesteps,
        )
        .unwrap();
        assert_eq!((s.train, s.val, s.test), (0..70, 70..80, 80..100));
    }

    #[test]
    fn short_split_is_config_error() {
        let err = chronological_split(
            &ramp(1, 100),
            SplitFractions::default(),
            24,
            SplitConvention::Timesteps,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn published_sequence_counts_with_window_convention() {
        // METR-LA: 34,272 five-minute steps; PEMS-BAY: 52,116.
        for (steps, want) in [
            (34_272, (23_974, 3_425, 6_850)),
            (52_116, (36_465, 5_209, 10_419)),
        ] {
            let ds = ramp(1, steps);
            let s =
                chronological_split(&ds, SplitFractions::default(), 24, SplitConvention::Windows)
                    .unwrap();
            let count = |r: Range<usize>| window_count(r.len(), 12, 12, 1);
            assert_eq!((count(s.train), count(s.val), count(s.test)), want);
        }
    }

    #[test]
    fn bad_fractions_rejected() {
        let f = SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.2,
        };
        assert!(f.validate().is_err());
        let f = SplitFractions {
            train: 0.9,
            val: 0.0,
            test: 0.1,
        };
        assert!(f.validate().is_err());
    }

    #[test]
    fn train_stats_match_two_pass_oracle() {
        let mut rng = seeded_rng(17);
        let (n, t) = (3, 400);
        let values: Vec<f64> = (0..n * t).map(|_| rng.random_range(20.0..70.0)).collect();
        let mask: Vec<bool> = (0..n * t).map(|_| rng.random::<f64>() > 0.2).collect();
        let ds = TrafficDataset::new(n, t, values.clone(), mask.clone(), 5).unwrap();
        let s = chronological_split(
            &ds,
            SplitFractions::default(),
            24,
            SplitConvention::Timesteps,
        )
        .unwrap();
        let mut picked = Vec::new();
        for node in 0..n {
            for step in s.train.clone() {
                if mask[node * t + step] {
                    picked.push(values[node * t + step]);
                }
            }
        }
        let mean = picked.iter().sum::<f64>() / picked.len() as f64;
        let var = picked.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / picked.len() as f64;
        assert!((s.norm.mean - mean).abs() < 1e-9);
        assert!((s.norm.std - var.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn constant_series_rejected() {
        let ds = TrafficDataset::new(1, 50, vec![3.0; 50], vec![true; 50], 5).unwrap();
        assert!(matches!(norm_stats(&ds, 0..50), Err(Error::Validation(_))));
    }

    #[test]
    fn window_counts() {
        let ds = ramp(2, 60);
        let norm = NormStats {
            mean: 0.0,
            std: 1.0,
        };
        let w = make_windows(&ds, 0..24, norm, 12, 12, 1, SplitName::Train).unwrap();
        assert_eq!(w.len(), 2);
        let w = make_windows(&ds, 0..25, norm, 12, 12, 1, SplitName::Train).unwrap();
        assert_eq!(w.len(), 4);
    }

    #[test]
    fn window_formula_matches_enumeration() {
        let mut rng = seeded_rng(50);
        for _ in 0..50 {
            let len = rng.random_range(24..120);
            let stride = rng.random_range(1..7);
            let offset = rng.random_range(0..10);
            let ds = ramp(1, offset + len);
            let norm = NormStats {
                mean: 0.0,
                std: 1.0,
            };
            let got = make_node_windows(
                &ds,
                0,
                offset..offset + len,
                norm,
                12,
                12,
                stride,
                SplitName::Val,
            )
            .unwrap();
            let mut brute = 0;
            for s in offset..offset + len {
                if (s - offset) % stride == 0 && s + 24 <= offset + len {
                    brute += 1;
                }
            }
            assert_eq!(got.len(), brute);
            assert_eq!(window_count(len, 12, 12, stride), brute);
        }
    }

    #[test]
    fn imputation_and_target_mask() {
        let values = vec![10.0, 0.0, 30.0, 0.0, 50.0, 0.0];
        let mask = vec![false, false, true, false, true, false];
        let ds = TrafficDataset::new(1, 6, values, mask, 5).unwrap();
        let norm = NormStats {
            mean: 20.0,
            std: 10.0,
        };
        let w = make_node_windows(&ds, 0, 0..6, norm, 4, 2, 1, SplitName::Test).unwrap();
        let s = &w.sequences[0];
        // head-missing → train mean (0 after normalization); then carry forward
        assert_eq!(s.input, vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(s.target, vec![3.0, 0.0]);
        assert_eq!(s.target_mask, vec![true, false]);
    }

    #[test]
    fn windows_ignore_missing_values() {
        let mut rng = seeded_rng(8);
        let values: Vec<f64> = (0..2 * 160).map(|_| rng.random_range(30.0..60.0)).collect();
        let mask: Vec<bool> = (0..2 * 160).map(|_| rng.random::<f64>() > 0.3).collect();
        let clean = TrafficDataset::new(2, 160, values, mask, 5).unwrap();
        let mut poisoned = clean.clone();
        poisoned.poison_missing(1e9);
        let split = |ds: &TrafficDataset| {
            let s = chronological_split(
                ds,
                SplitFractions::default(),
                12,
                SplitConvention::Timesteps,
            )
            .unwrap();
            let w = make_windows(ds, s.test.clone(), s.norm, 6, 6, 1, SplitName::Test).unwrap();
            (s, w)
        };
        assert_eq!(split(&clean), split(&poisoned));
    }

    #[test]
    fn denormalize_fixed_points() {
        let n = NormStats {
            mean: 55.0,
            std: 7.5,
        };
        assert_eq!(n.denormalize(0.0), 55.0);
        assert_eq!(n.denormalize(1.0), 62.5);
    }

    proptest! {
        #[test]
        fn normalization_round_trip(v in -1e3f64..1e3, mean in -100f64..100.0, std in 0.01f64..50.0) {
            let n = NormStats { mean, std };
            prop_assert!((n.denormalize(n.normalize(v)) - v).abs() < 1e-12 * v.abs().max(1.0));
        }

        #[test]
        fn splits_are_disjoint_and_ordered(steps in 240usize..2000) {
            let ds = ramp(1, steps);
            let s = chronological_split(&ds, SplitFractions::default(), 24, SplitConvention::Timesteps).unwrap();
            prop_assert_eq!(s.train.start, 0);
            prop_assert_eq!(s.train.end, s.val.start);
            prop_assert_eq!(s.val.end, s.test.start);
            prop_assert_eq!(s.test.end, steps);
        }
    }
}
