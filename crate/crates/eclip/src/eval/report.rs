//! JSON evaluation reports. Schema is shared by every task so downstream
//! tooling can diff runs: a task name, item counts, named scalar metrics,
//! and an echo of the configuration used.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::MetricsAtK;
use super::EvalError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub num_queries: usize,
    pub num_gallery: usize,
    /// Named scalar metrics; keys embed K where relevant ("recall@5").
    pub metrics: BTreeMap<String, f64>,
    /// Echo of run settings (checkpoint path, negative mode, match rule...).
    pub settings: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn new(task: &str, num_queries: usize, num_gallery: usize) -> Self {
        EvalReport {
            task: task.to_string(),
            num_queries,
            num_gallery,
            metrics: BTreeMap::new(),
            settings: BTreeMap::new(),
        }
    }

    pub fn metric(&mut self, name: &str, value: f64) -> &mut Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    pub fn setting(&mut self, name: &str, value: &str) -> &mut Self {
        self.settings.insert(name.to_string(), value.to_string());
        self
    }

    /// Recall / mAP / mAR rows under a prefix ("i2t" -> "i2t_recall@5").
    pub fn ranking_metrics(&mut self, prefix: &str, rows: &[MetricsAtK]) -> &mut Self {
        for row in rows {
            self.metric(&format!("{prefix}recall@{}", row.k), row.recall);
            self.metric(&format!("{prefix}map@{}", row.k), row.map);
            self.metric(&format!("{prefix}mar@{}", row.k), row.mar);
        }
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let mut file = std::fs::File::create(path)
            .map_err(|e| EvalError::Input(format!("cannot write report {path:?}: {e}")))?;
        file.write_all(self.to_json().as_bytes())
            .and_then(|_| file.write_all(b"\n"))
            .map_err(|e| EvalError::Input(format!("cannot write report {path:?}: {e}")))
    }
}
