//! Portable series CSV:
//!
//! ```text
//! # nodes=2 interval_min=5
//! t,node_0,node_1
//! 0,61.5,58.0
//! 1,,57.5
//! ```
//!
//! An empty field is a missing reading.

use std::fmt::Write as _;
use std::path::Path;

use super::TrafficDataset;
use crate::error::{Error, Result};
use crate::graph::{csv_records, metadata_value};

pub fn load_dataset(path: &Path, expected_interval: Option<u32>) -> Result<TrafficDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, &path.display().to_string(), expected_interval)
}

pub fn parse_dataset(
    text: &str,
    origin: &str,
    expected_interval: Option<u32>,
) -> Result<TrafficDataset> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    if text.is_empty() {
        return Err(err(1, "empty file".into()));
    }
    let (meta, body) = text.split_once('\n').unwrap_or((text, ""));
    let n_nodes: usize = metadata_value(meta, "nodes")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| err(1, "expected `# nodes=N interval_min=M`".into()))?;
    let interval: u32 = metadata_value(meta, "interval_min")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| err(1, "missing interval_min".into()))?;
    if let Some(want) = expected_interval {
        if want != interval {
            return Err(Error::Config(format!(
                "{origin}: interval is {interval} min, expected {want}"
            )));
        }
    }

    let mut records = csv_records(body, origin);
    let (no, header) = records
        .next()
        .transpose()?
        .ok_or_else(|| err(2, "missing column header".into()))?;
    if header.len() != n_nodes + 1 || &header[0] != "t" {
        return Err(err(
            no,
            format!(
                "header must be `t` plus {n_nodes} node columns, found {} columns",
                header.len()
            ),
        ));
    }

    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    for rec in records {
        let (no, fields) = rec?;
        if fields.len() != n_nodes + 1 {
            return Err(err(
                no,
                format!("expected {} fields, found {}", n_nodes + 1, fields.len()),
            ));
        }
        let mut row = Vec::with_capacity(n_nodes);
        for (c, f) in fields.iter().skip(1).enumerate() {
            if f.is_empty() {
                row.push(None);
            } else {
                let v: f64 = f
                    .parse()
                    .map_err(|_| err(no, format!("column {}: non-numeric `{f}`", c + 1)))?;
                if !v.is_finite() {
                    return Err(err(no, format!("column {}: non-finite `{f}`", c + 1)));
                }
                row.push(Some(v));
            }
        }
        rows.push(row);
    }

    let n_steps = rows.len();
    let mut values = vec![0.0; n_nodes * n_steps];
    let mut mask = vec![false; n_nodes * n_steps];
    for (t, row) in rows.iter().enumerate() {
        for (node, v) in row.iter().enumerate() {
            if let Some(v) = v {
                values[node * n_steps + t] = *v;
                mask[node * n_steps + t] = true;
            }
        }
    }
    TrafficDataset::new(n_nodes, n_steps, values, mask, interval)
}

impl TrafficDataset {
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# nodes={} interval_min={}\nt",
            self.n_nodes(),
            self.interval_min()
        );
        for n in 0..self.n_nodes() {
            let _ = write!(out, ",node_{n}");
        }
        out.push('\n');
        for t in 0..self.n_steps() {
            let _ = write!(out, "{t}");
            for n in 0..self.n_nodes() {
                match self.value(n, t) {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_field_is_missing() {
        let text = "# nodes=1 interval_min=5\nt,node_0\n0,60.0\n1,\n2,59.0\n";
        let ds = parse_dataset(text, "t", Some(5)).unwrap();
        assert_eq!(ds.n_steps(), 3);
        assert_eq!(ds.series_mask(0), &[true, false, true]);
        assert_eq!(ds.value(0, 2), Some(59.0));
    }

    #[test]
    fn ragged_and_non_numeric_rows() {
        let ragged = "# nodes=2 interval_min=5\nt,node_0,node_1\n0,1,2\n1,3\n";
        assert!(matches!(
            parse_dataset(ragged, "t", None),
            Err(Error::Parse { line: 4, .. })
        ));
        let bad = "# nodes=1 interval_min=5\nt,node_0\n0,abc\n";
        assert!(matches!(
            parse_dataset(bad, "t", None),
            Err(Error::Parse { line: 3, .. })
        ));
        let header = "# nodes=2 interval_min=5\nt,node_0\n0,1\n";
        assert!(matches!(
            parse_dataset(header, "t", None),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn interval_mismatch() {
        let text = "# nodes=1 interval_min=15\nt,node_0\n0,1\n";
        assert!(matches!(
            parse_dataset(text, "t", Some(5)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let ds = TrafficDataset::new(
            2,
            3,
            vec![1.5, 0.0, 2.25, 61.0, 1e-3, -4.0],
            vec![true, false, true, true, true, true],
            5,
        )
        .unwrap();
        let back = parse_dataset(&ds.to_csv(), "t", None).unwrap();
        assert_eq!(ds, back);
    }
}
