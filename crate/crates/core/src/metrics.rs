//! Masked forecasting metrics in original units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Targets with `|y|` at or below this are left out of MAPE (but not MAE/RMSE).
pub const MAPE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    /// Percent.
    pub mape: f64,
    pub rmse: f64,
    /// Observed target entries.
    pub n_evaluated: usize,
    /// Entries that also passed the MAPE floor.
    pub n_mape: usize,
}

impl MetricReport {
    /// False when no target entry was observed; the metric fields are then NaN.
    pub fn is_defined(&self) -> bool {
        self.n_evaluated > 0
    }

    fn undefined() -> Self {
        Self {
            mae: f64::NAN,
            mape: f64::NAN,
            rmse: f64::NAN,
            n_evaluated: 0,
            n_mape: 0,
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Accum {
    abs: f64,
    sq: f64,
    pct: f64,
    n: usize,
    n_pct: usize,
}

impl Accum {
    fn add(&mut self, p: f64, y: f64) {
        let e = p - y;
        self.abs += e.abs();
        self.sq += e * e;
        self.n += 1;
        if y.abs() > MAPE_FLOOR {
            self.pct += (e / y).abs();
            self.n_pct += 1;
        }
    }

    fn report(&self) -> MetricReport {
        if self.n == 0 {
            return MetricReport::undefined();
        }
        let n = self.n as f64;
        let mape = if self.n_pct > 0 {
            100.0 * self.pct / self.n_pct as f64
        } else {
            f64::NAN
        };
        MetricReport {
            mae: self.abs / n,
            mape,
            rmse: (self.sq / n).sqrt(),
            n_evaluated: self.n,
            n_mape: self.n_pct,
        }
    }
}

fn check(preds: &[f64], targets: &[f64], mask: &[bool]) -> Result<()> {
    if preds.len() != targets.len() || targets.len() != mask.len() {
        return Err(Error::Shape(format!(
            "metric inputs differ in length: {} / {} / {}",
            preds.len(),
            targets.len(),
            mask.len()
        )));
    }
    Ok(())
}

/// MAE, MAPE and RMSE over the entries where `mask` is true.
pub fn evaluate(preds: &[f64], targets: &[f64], mask: &[bool]) -> Result<MetricReport> {
    check(preds, targets, mask)?;
    let mut acc = Accum::default();
    for ((&p, &y), &m) in preds.iter().zip(targets).zip(mask) {
        if m {
            acc.add(p, y);
        }
    }
    Ok(acc.report())
}

/// One report per forecast step; inputs are laid out `n_seq x horizon x features`.
pub fn evaluate_per_horizon(
    preds: &[f64],
    targets: &[f64],
    mask: &[bool],
    horizon: usize,
    features: usize,
) -> Result<Vec<MetricReport>> {
    check(preds, targets, mask)?;
    let stride = horizon * features;
    if stride == 0 || preds.len() % stride != 0 {
        return Err(Error::Shape(format!(
            "{} values do not divide into horizon {horizon}",
            preds.len()
        )));
    }
    let mut acc = vec![Accum::default(); horizon];
    for i in 0..preds.len() {
        if mask[i] {
            acc[(i % stride) / features].add(preds[i], targets[i]);
        }
    }
    Ok(acc.iter().map(Accum::report).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn perfect_predictions() {
        let r = evaluate(&[1.0, 5.0], &[1.0, 5.0], &[true, true]).unwrap();
        assert_eq!((r.mae, r.mape, r.rmse), (0.0, 0.0, 0.0));
    }

    #[test]
    fn hand_computed_example() {
        let r = evaluate(&[2.0, 4.0], &[1.0, 2.0], &[true, true]).unwrap();
        assert_eq!(r.mae, 1.5);
        assert!((r.rmse - 2.5f64.sqrt()).abs() < 1e-15);
        assert!((r.rmse - 1.5811).abs() < 1e-4);
        assert_eq!(r.mape, 100.0);
    }

    #[test]
    fn empty_mask_is_undefined() {
        let r = evaluate(&[1.0], &[2.0], &[false]).unwrap();
        assert!(!r.is_defined());
        assert!(r.mae.is_nan());
    }

    #[test]
    fn mape_floor_excludes_zero_targets() {
        let r = evaluate(&[1.0, 3.0], &[0.0, 2.0], &[true, true]).unwrap();
        assert_eq!(r.n_evaluated, 2);
        assert_eq!(r.n_mape, 1);
        assert_eq!(r.mape, 50.0);
        assert_eq!(r.mae, 1.0);
    }

    #[test]
    fn matches_naive_loop_oracle() {
        let mut rng = seeded_rng(9);
        let n = 500;
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(10.0..70.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(10.0..70.0)).collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= 0.3).collect();
        let (mut a, mut s, mut pc, mut c) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            if mask[i] {
                a += (p[i] - y[i]).abs();
                s += (p[i] - y[i]).powi(2);
                pc += ((p[i] - y[i]) / y[i]).abs();
                c += 1.0;
            }
        }
        let r = evaluate(&p, &y, &mask).unwrap();
        assert!((r.mae - a / c).abs() < 1e-12);
        assert!((r.rmse - (s / c).sqrt()).abs() < 1e-12);
        assert!((r.mape - 100.0 * pc / c).abs() < 1e-12);
    }

    #[test]
    fn per_horizon_partitions_entries() {
        // 2 sequences x 3 steps x 1 feature
        let p = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let per = evaluate_per_horizon(&p, &y, &[true; 6], 3, 1).unwrap();
        assert_eq!(per.iter().map(|r| r.n_evaluated).sum::<usize>(), 6);
        assert_eq!(per[0].mae, (0.0 + 3.0) / 2.0);
        assert_eq!(per[2].mae, (2.0 + 5.0) / 2.0);
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(
            evaluate(&[1.0], &[1.0, 2.0], &[true]),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(vals in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0, any::<bool>()), 1..60)) {
            let p: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let y: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let m: Vec<bool> = vals.iter().map(|v| v.2).collect();
            let r = evaluate(&p, &y, &m).unwrap();
            if r.is_defined() {
                prop_assert!(r.rmse >= r.mae - 1e-12);
                prop_assert!(r.mae >= 0.0);
            }
        }

        #[test]
        fn masked_positions_are_ignored(vals in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0, any::<bool>()), 1..60), poison in -1e9f64..1e9) {
            let p: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let y: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let m: Vec<bool> = vals.iter().map(|v| v.2).collect();
            let y2: Vec<f64> = y.iter().zip(&m).map(|(v, k)| if *k { *v } else { poison }).collect();
            let p2: Vec<f64> = p.iter().zip(&m).map(|(v, k)| if *k { *v } else { -poison }).collect();
            let a = evaluate(&p, &y, &m).unwrap();
            let b = evaluate(&p2, &y2, &m).unwrap();
            prop_assert!(a.mae.to_bits() == b.mae.to_bits() && a.rmse.to_bits() == b.rmse.to_bits());
        }
    }
}
