//! Flat text snapshots: a `policy v1 Q L V` header, then one line of `V`
//! space-separated logits per (query, position) in row-major order.
//!
//! Logits are written with Rust's shortest round-trip float formatting, so
//! parsing a snapshot reproduces every logit bit for bit.

use std::fmt::Write as _;

use super::FactoredPolicy;
use crate::error::{LabError, Result};

const MAGIC: &str = "policy v1";

impl FactoredPolicy {
    pub fn to_snapshot(&self) -> String {
        let (q, l, v) = self.shape();
        let mut out = format!("{MAGIC} {q} {l} {v}\n");
        for row in self.all_logits().chunks(v) {
            let mut first = true;
            for x in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                write!(out, "{x:?}").expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| LabError::Snapshot("empty snapshot".into()))?;
        let dims = header
            .strip_prefix(MAGIC)
            .ok_or_else(|| LabError::Snapshot(format!("bad header `{header}`")))?;
        let dims: Vec<usize> = dims
            .split_whitespace()
            .map(|d| d.parse().map_err(|_| LabError::Snapshot(format!("bad dimension `{d}`"))))
            .collect::<Result<_>>()?;
        let [q, l, v] = dims[..] else {
            return Err(LabError::Snapshot(format!("expected 3 dimensions in `{header}`")));
        };
        let mut logits = Vec::with_capacity(q * l * v);
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let before = logits.len();
            for tok in line.split_whitespace() {
                let x: f64 = tok
                    .parse()
                    .map_err(|_| LabError::Snapshot(format!("line {}: bad logit `{tok}`", i + 2)))?;
                logits.push(x);
            }
            if logits.len() - before != v {
                return Err(LabError::Snapshot(format!("line {}: expected {v} logits", i + 2)));
            }
            rows += 1;
        }
        if rows != q * l {
            return Err(LabError::Snapshot(format!("expected {} rows, found {rows}", q * l)));
        }
        FactoredPolicy::from_logits(q, l, v, logits)
    }
}
