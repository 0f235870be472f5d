//! Uniform JSON run reports for the command-line harness.
//!
//! Every command writes one of these next to its artifacts. Everything
//! except the wall-clock and memory fields is a pure function of the config
//! and seeds, so reports from identical runs differ only in those two
//! fields.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    /// Which command produced this report.
    pub command: String,
    /// Scalar precision the run used (`"f32"` or `"f64"`).
    pub precision: String,
    pub seeds: Vec<u64>,
    /// Snapshot of the effective config, defaults filled in.
    pub config: serde_json::Value,
    /// Named numeric results, sorted by name.
    pub metrics: BTreeMap<String, f64>,
    /// Not reproducible; excluded from all pass/fail decisions.
    pub wall_seconds: f64,
    /// Peak heap use as counted by the process allocator, in bytes.
    pub peak_memory_bytes: u64,
    /// Files the run wrote, relative to the output directory.
    pub artifacts: Vec<String>,
    pub pass: bool,
}

impl RunReport {
    pub fn new(command: &str, precision: &str, seeds: Vec<u64>, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            precision: precision.to_string(),
            seeds,
            config,
            metrics: BTreeMap::new(),
            wall_seconds: 0.0,
            peak_memory_bytes: 0,
            artifacts: Vec::new(),
            pass: false,
        }
    }

    pub fn metric(&mut self, name: &str, value: f64) -> &mut Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    pub fn artifact(&mut self, path: &str) -> &mut Self {
        self.artifacts.push(path.to_string());
        self
    }

    /// Pretty-printed JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports are plain data");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_json())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reports_round_trip_through_json() {
        let mut r = RunReport::new("verify", "f64", vec![7], serde_json::json!({"group": "c4"}));
        r.metric("max_deviation", 0.0).metric("cases", 12.0);
        r.artifact("verify_report.json");
        r.pass = true;
        let back: RunReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back.command, "verify");
        assert_eq!(back.metrics["cases"], 12.0);
        assert_eq!(back.artifacts, vec!["verify_report.json"]);
        assert!(back.pass);
    }

    #[test]
    fn metrics_serialize_in_name_order() {
        let mut r = RunReport::new("bench", "f32", vec![], serde_json::json!({}));
        r.metric("zeta", 1.0).metric("alpha", 2.0);
        let json = r.to_json();
        assert!(json.find("alpha").unwrap() < json.find("zeta").unwrap());
    }
}
