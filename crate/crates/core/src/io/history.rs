//! Optimization history CSV: fixed header, one row per iteration, full
//! precision (17 significant digits).

use std::path::Path;

use crate::error::{Error, Result};
use crate::shape::OptimizationRecord;

pub const HEADER: &str = "iter,J,beta,c_out,dp,a_geo,min_quality,step,grad_norm";

pub fn history_csv(history: &[OptimizationRecord]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            r.iteration, r.j, r.beta, r.c_out, r.dp, r.a_geo, r.min_quality, r.step, r.grad_norm
        ));
    }
    out
}

pub fn write_history(path: &Path, history: &[OptimizationRecord]) -> Result<()> {
    super::write_atomic(path, &history_csv(history))
}

/// Parses a file produced by [`write_history`]; used by tests and tooling.
pub fn parse_history(text: &str) -> Result<Vec<OptimizationRecord>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != HEADER {
        return Err(Error::Parse {
            path: "history".into(),
            line: 1,
            message: format!("unexpected header `{header}`"),
        });
    }
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(Error::Parse {
                path: "history".into(),
                line: k + 2,
                message: format!("expected 9 columns, got {}", cols.len()),
            });
        }
        let f = |i: usize| -> Result<f64> {
            cols[i].parse().map_err(|_| Error::Parse {
                path: "history".into(),
                line: k + 2,
                message: format!("bad number `{}`", cols[i]),
            })
        };
        out.push(OptimizationRecord {
            iteration: cols[0].parse().map_err(|_| Error::Parse {
                path: "history".into(),
                line: k + 2,
                message: "bad iteration index".into(),
            })?,
            j: f(1)?,
            beta: f(2)?,
            c_out: f(3)?,
            dp: f(4)?,
            a_geo: f(5)?,
            min_quality: f(6)?,
            step: f(7)?,
            grad_norm: f(8)?,
        });
    }
    Ok(out)
}
