//! Run reports: deterministic JSON, per-session CSV and a text table.
//!
//! Wall-clock times live in [`Timing`], written to a separate file, so two
//! runs with the same configuration give byte-identical report JSON.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::RunConfig;
use crate::metrics::AccuracyMatrix;
use crate::p2l::PromptPool;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRow {
    pub session: usize,
    pub classes: usize,
    pub samples: usize,
    pub map: f64,
    pub cf1: f64,
    pub of1: f64,
    /// mAP over each task's classes, tasks `1..=session`.
    pub task_maps: Vec<f64>,
    pub trainable_params: usize,
    /// Learned classes without a positive in this session's test images.
    pub skipped_classes: Vec<usize>,
}

/// Hashes of the parameters that must not change in a continual stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeRecord {
    pub stage: usize,
    pub before: String,
    pub after: String,
}

impl FreezeRecord {
    pub fn holds(&self) -> bool {
        self.before == self.after
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: RunConfig,
    pub dataset_spec_hash: String,
    pub dataset_content_hash: String,
    pub backbone_hash: Option<String>,
    pub model_hash: String,
    pub map_rule: String,
    pub sessions: Vec<SessionRow>,
    /// Final-session AP per class; `None` for classes without positives.
    pub final_class_ap: Vec<(usize, Option<f64>)>,
    pub last_map: f64,
    pub avg_map: f64,
    pub final_cf1: f64,
    pub final_of1: f64,
    pub forgetting: f64,
    pub accuracy_matrix: AccuracyMatrix,
    pub trainable_params: Vec<usize>,
    pub freeze_parity: Vec<FreezeRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub pretrain_seconds: Option<f64>,
    pub stage_seconds: Vec<f64>,
    pub total_seconds: f64,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_csv(&self) -> String {
        let tasks = self.sessions.iter().map(|s| s.task_maps.len()).max().unwrap_or(0);
        let mut out = String::from("session,classes,samples,map,cf1,of1,trainable_params");
        for t in 1..=tasks {
            let _ = write!(out, ",task{t}_map");
        }
        out.push('\n');
        for s in &self.sessions {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{}",
                s.session, s.classes, s.samples, s.map, s.cf1, s.of1, s.trainable_params
            );
            for t in 0..tasks {
                match s.task_maps.get(t) {
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

    /// Aligned text rendering with mAP values in percent.
    pub fn render_table(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "method {}  protocol B{}-C{}  seed {}",
            c.method, c.base, c.increment, c.seed
        );
        let _ = writeln!(
            out,
            "{:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>9}  per-task mAP",
            "session", "classes", "samples", "mAP", "CF1", "OF1", "trainable"
        );
        for s in &self.sessions {
            let tasks: Vec<String> = s.task_maps.iter().map(|v| format!("{:.1}", 100.0 * v)).collect();
            let _ = writeln!(
                out,
                "{:>7} {:>7} {:>7} {:>7.1} {:>7.1} {:>7.1} {:>9}  {}",
                s.session,
                s.classes,
                s.samples,
                100.0 * s.map,
                100.0 * s.cf1,
                100.0 * s.of1,
                s.trainable_params,
                tasks.join(" ")
            );
        }
        let _ = writeln!(
            out,
            "last mAP {:.2}  avg mAP {:.2}  CF1 {:.2}  OF1 {:.2}  forgetting {:.2}",
            100.0 * self.last_map,
            100.0 * self.avg_map,
            100.0 * self.final_cf1,
            100.0 * self.final_of1,
            100.0 * self.forgetting
        );
        let parity = self.freeze_parity.iter().all(FreezeRecord::holds);
        let _ = writeln!(out, "freeze parity {}", if parity { "held" } else { "broken" });
        out
    }

    pub fn write_all(&self, timing: &Timing, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("report.json", self.to_json()),
            ("sessions.csv", self.to_csv()),
            ("timing.json", serde_json::to_string_pretty(timing)? + "\n"),
        ];
        for (name, body) in files {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// One row per class: `class_id,stage_added,v1,...,vd`.
pub fn prompts_csv(pool: &PromptPool) -> String {
    let mut out = String::from("class_id,stage_added");
    for i in 0..pool.dim() {
        let _ = write!(out, ",v{i}");
    }
    out.push('\n');
    for p in pool.entries() {
        let _ = write!(out, "{},{}", p.class_id, p.stage_added);
        for v in p.vector.data() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}
