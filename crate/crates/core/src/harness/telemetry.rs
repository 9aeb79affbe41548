//! Per-step telemetry rows and their CSV encoding.
//!
//! Columns are fixed and ordered as [`COLUMNS`]. Integer columns are written
//! as integers; every other value uses 17 significant digits in scientific
//! notation. No field ever needs quoting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Positions with at least this multiple of the mean entropy are counted as
/// high-entropy tokens.
pub const HIGH_ENTROPY_FACTOR: f64 = 2.0;

pub const COLUMNS: [&str; 14] = [
    "step",
    "entropy_exact",
    "entropy_sampled",
    "reward_mean",
    "reward_std",
    "r_std",
    "gate_open_frac",
    "self_info_pos",
    "kl_ref",
    "prob_numeric",
    "prob_other",
    "positive_rollouts",
    "high_entropy_count",
    "eval_score",
];

/// One training step. Entropy, KL, flags and evaluation describe the policy
/// after the step's update; reward, gate and probability columns describe the
/// step's rollouts. `prob_numeric` and `prob_other` are 0 when
/// `positive_rollouts` is 0 (or the class was never sampled).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub entropy_exact: f64,
    pub entropy_sampled: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub r_std: f64,
    pub gate_open_frac: f64,
    pub self_info_pos: f64,
    pub kl_ref: f64,
    pub prob_numeric: f64,
    pub prob_other: f64,
    pub positive_rollouts: usize,
    pub high_entropy_count: usize,
    pub eval_score: f64,
}

impl StepRecord {
    fn floats(&self) -> [f64; 11] {
        [
            self.entropy_exact,
            self.entropy_sampled,
            self.reward_mean,
            self.reward_std,
            self.r_std,
            self.gate_open_frac,
            self.self_info_pos,
            self.kl_ref,
            self.prob_numeric,
            self.prob_other,
            self.eval_score,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.floats().iter().all(|v| v.is_finite())
    }

    pub fn csv_row(&self) -> String {
        let f = |v: f64| format!("{v:.16e}");
        [
            self.step.to_string(),
            f(self.entropy_exact),
            f(self.entropy_sampled),
            f(self.reward_mean),
            f(self.reward_std),
            f(self.r_std),
            f(self.gate_open_frac),
            f(self.self_info_pos),
            f(self.kl_ref),
            f(self.prob_numeric),
            f(self.prob_other),
            self.positive_rollouts.to_string(),
            self.high_entropy_count.to_string(),
            f(self.eval_score),
        ]
        .join(",")
    }
}

pub fn header() -> String {
    COLUMNS.join(",")
}

pub fn to_csv(records: &[StepRecord]) -> String {
    let mut out = header();
    out.push('\n');
    for r in records {
        writeln!(out, "{}", r.csv_row()).expect("writing to a String");
    }
    out
}

/// Column-oriented view of a telemetry CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub data: BTreeMap<String, Vec<f64>>,
    pub rows: usize,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| LabError::MissingColumn("step".into()))?;
        let columns: Vec<String> = header.split(',').map(|c| c.trim().to_string()).collect();
        let mut data: BTreeMap<String, Vec<f64>> = columns.iter().map(|c| (c.clone(), Vec::new())).collect();
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != columns.len() {
                return Err(LabError::InvalidArgument(format!(
                    "row {} has {} fields, header has {}",
                    i + 1,
                    fields.len(),
                    columns.len()
                )));
            }
            for (c, v) in columns.iter().zip(fields) {
                let x: f64 = v
                    .trim()
                    .parse()
                    .map_err(|_| LabError::InvalidArgument(format!("row {}: `{v}` in column {c} is not a number", i + 1)))?;
                data.get_mut(c).expect("column registered").push(x);
            }
            rows += 1;
        }
        Ok(Self { columns, data, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.data
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| LabError::MissingColumn(name.to_string()))
    }

    pub fn require(&self, names: &[&str]) -> Result<()> {
        names.iter().try_for_each(|n| self.column(n).map(|_| ()))
    }
}

/// Mean of the last `fraction` of `values` (at least one element); `None` for
/// an empty slice.
pub fn final_window_mean(values: &[f64], fraction: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let k = ((values.len() as f64 * fraction).round() as usize).clamp(1, values.len());
    let tail = &values[values.len() - k..];
    Some(tail.iter().sum::<f64>() / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: usize) -> StepRecord {
        StepRecord {
            step,
            entropy_exact: 0.1 * step as f64,
            entropy_sampled: 1.0 / 3.0,
            reward_mean: 1.5,
            reward_std: 0.25,
            r_std: 0.7,
            gate_open_frac: 1.0,
            self_info_pos: 0.4,
            kl_ref: 1e-9,
            prob_numeric: 0.3,
            prob_other: 0.9,
            positive_rollouts: 12,
            high_entropy_count: 3,
            eval_score: 0.75,
        }
    }

    #[test]
    fn header_only_for_no_steps() {
        assert_eq!(to_csv(&[]), format!("{}\n", COLUMNS.join(",")));
        let t = Table::parse(&to_csv(&[])).unwrap();
        assert_eq!(t.rows, 0);
    }

    #[test]
    fn csv_values_parse_back_exactly() {
        let recs = vec![record(1), record(2)];
        let t = Table::parse(&to_csv(&recs)).unwrap();
        assert_eq!(t.columns, COLUMNS);
        assert_eq!(t.column("entropy_sampled").unwrap()[0], 1.0 / 3.0);
        assert_eq!(t.column("entropy_exact").unwrap()[1], 0.2);
        assert_eq!(t.column("positive_rollouts").unwrap(), &[12.0, 12.0]);
        assert!(matches!(t.column("nope"), Err(LabError::MissingColumn(c)) if c == "nope"));
    }

    #[test]
    fn seventeen_significant_digits() {
        let row = record(1).csv_row();
        let field = row.split(',').nth(2).unwrap();
        assert_eq!(field, "3.3333333333333331e-1");
    }

    #[test]
    fn final_window() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(final_window_mean(&v, 0.1), Some(19.5));
        assert_eq!(final_window_mean(&v[..3], 0.1), Some(3.0));
        assert_eq!(final_window_mean(&[], 0.1), None);
    }
}
