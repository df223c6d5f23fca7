//! Run manifests: written atomically at run start (temp file + rename),
//! finalized with the end timestamp on completion. Every artifact of a run
//! lives under its run directory.

use cappo_core::config::TrainingConfig;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub struct Manifest {
    pub run_id: String,
    pub mode: String,
    pub dataset: String,
    pub dataset_hash: String,
    pub config: TrainingConfig,
    pub started_unix: u64,
    pub ended_unix: Option<u64>,
    pub outputs: Vec<String>,
}

impl Manifest {
    fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("cappo-run v1\n");
        out.push_str(&format!("run_id {}\n", self.run_id));
        out.push_str(&format!("mode {}\n", self.mode));
        out.push_str(&format!("dataset {}\n", self.dataset));
        out.push_str(&format!("dataset_hash {}\n", self.dataset_hash));
        out.push_str(&format!("config_hash {}\n", self.config.content_hash()));
        out.push_str(&format!("started_unix {}\n", self.started_unix));
        match self.ended_unix {
            Some(t) => out.push_str(&format!("ended_unix {t}\n")),
            None => out.push_str("ended_unix pending\n"),
        }
        for o in &self.outputs {
            out.push_str(&format!("output {o}\n"));
        }
        out.push_str("--- config ---\n");
        out.push_str(&self.config.to_canonical_string());
        out
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let tmp = dir.join("manifest.txt.tmp");
        let final_path = dir.join("manifest.txt");
        std::fs::write(&tmp, self.render())?;
        std::fs::rename(&tmp, &final_path)
    }
}
