//! File formats: MSH 2.2 ASCII meshes (in/out), legacy VTK ASCII fields
//! (out), the optimization history CSV, and the metrics JSON. All writers
//! go through a temp-file + rename so aborted runs never leave truncated
//! artifacts.

pub mod history;
pub mod msh;
pub mod vtk;

use crate::error::{Error, Result};
use crate::metrics::CaseMetrics;
use std::path::Path;

/// Writes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "out".to_string());
    let tmp = dir.join(format!(".{stem}.tmp"));
    std::fs::write(&tmp, contents).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Metrics JSON with keys matching the CaseMetrics field names, full
/// precision.
pub fn metrics_json(m: &CaseMetrics) -> String {
    format!(
        "{{\n  \"beta\": {:.16e},\n  \"c_out\": {:.16e},\n  \"vdot\": {:.16e},\n  \"a_geo\": {:.16e},\n  \"dp\": {:.16e},\n  \"j\": {:.16e}\n}}\n",
        m.beta, m.c_out, m.vdot, m.a_geo, m.dp, m.j
    )
}

pub fn write_metrics(path: &Path, m: &CaseMetrics) -> Result<()> {
    write_atomic(path, &metrics_json(m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_json_has_field_name_keys() {
        let m = CaseMetrics {
            beta: 1.54e-2,
            c_out: 45.38,
            vdot: 1.0,
            a_geo: 2.0,
            dp: 7.65,
            j: 1.54e-2,
        };
        let s = metrics_json(&m);
        for key in [
            "\"beta\"",
            "\"c_out\"",
            "\"vdot\"",
            "\"a_geo\"",
            "\"dp\"",
            "\"j\"",
        ] {
            assert!(s.contains(key), "missing {key}");
        }
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = std::env::temp_dir().join("packopt_atomic_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("x.txt");
        write_atomic(&path, "one").unwrap();
        write_atomic(&path, "two").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "two");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
