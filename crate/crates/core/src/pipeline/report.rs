use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub name: String,
    /// Relative to the run's output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StageReport {
    pub name: String,
    pub artifacts: Vec<ArtifactRecord>,
    pub metrics: BTreeMap<String, f64>,
}

impl StageReport {
    pub fn new(name: &str) -> Self {
        StageReport {
            name: name.to_string(),
            ..Default::default()
        }
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }
}

/// Everything a run produced, minus wall-clock timings (kept in a separate
/// file so reports of identical runs are byte-identical).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PipelineReport {
    pub config: BTreeMap<String, String>,
    pub stages: Vec<StageReport>,
    pub summary: BTreeMap<String, f64>,
}

impl PipelineReport {
    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Human-readable form: config echo, one table per stage, summary.
    pub fn to_text(&self) -> String {
        let mut out = String::from("[config]\n");
        for (k, v) in &self.config {
            writeln!(out, "{k} = {v}").unwrap();
        }
        for stage in &self.stages {
            writeln!(out, "\n[stage {}]", stage.name).unwrap();
            for (k, v) in &stage.metrics {
                writeln!(out, "  {k:<28} {}", fmt_metric(*v)).unwrap();
            }
            for a in &stage.artifacts {
                writeln!(out, "  artifact {:<18} {}  {}", a.name, &a.sha256[..16], a.path).unwrap();
            }
        }
        out.push_str("\n[summary]\n");
        for (k, v) in &self.summary {
            writeln!(out, "{k:<30} {}", fmt_metric(*v)).unwrap();
        }
        out
    }
}

fn fmt_metric(v: f64) -> String {
    if v.is_finite() && v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.6}")
    }
}
