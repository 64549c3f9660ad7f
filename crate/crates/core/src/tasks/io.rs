use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Family, MetricMode, MetricSpec, TaskExample, TaskKind, TaskSpec, Vocab};

#[derive(Serialize, Deserialize)]
struct Line {
    clean: Vec<u32>,
    corrupted: Vec<u32>,
    positive: Vec<u32>,
    negative: Vec<u32>,
}

/// One task in a manifest. `path` is relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub family: Family,
    pub metric: MetricMode,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<TaskKind>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub vocab: Vocab,
    pub tasks: Vec<ManifestEntry>,
}

/// Writes one JSON object per example.
pub fn save_task(task: &TaskSpec, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for ex in &task.examples {
        let line = Line {
            clean: ex.clean.clone(),
            corrupted: ex.corrupted.clone(),
            positive: ex.metric.positive.clone(),
            negative: ex.metric.negative.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Reads and validates a JSONL task file. Errors name the 1-based line.
pub fn load_task(path: &Path, entry: &ManifestEntry, vocab: &Vocab) -> Result<TaskSpec> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::TaskLine { line: line_no, message };
        let parsed: Line = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if parsed.clean.len() != parsed.corrupted.len() {
            return Err(err(format!(
                "clean has {} tokens but corrupted has {}",
                parsed.clean.len(),
                parsed.corrupted.len()
            )));
        }
        let example = TaskExample {
            clean: parsed.clean,
            corrupted: parsed.corrupted,
            metric: MetricSpec { mode: entry.metric, positive: parsed.positive, negative: parsed.negative },
        };
        example.validate(vocab.len()).map_err(|e| err(e.to_string()))?;
        examples.push(example);
    }
    let task = TaskSpec {
        id: entry.id.clone(),
        family: entry.family,
        kind: entry.kind,
        examples,
        vocab: vocab.clone(),
    };
    task.validate()?;
    Ok(task)
}

/// Writes every task as `<dir>/<id>.jsonl` plus `<dir>/tasks.json`.
pub fn save_manifest(tasks: &[TaskSpec], dir: &Path) -> Result<PathBuf> {
    let vocab = tasks
        .first()
        .map(|t| t.vocab.clone())
        .ok_or_else(|| Error::Task("no tasks to save".into()))?;
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for task in tasks {
        if task.vocab != vocab {
            return Err(Error::Task("tasks in one manifest must share a vocabulary".into()));
        }
        let file = PathBuf::from(format!("{}.jsonl", task.id));
        save_task(task, &dir.join(&file))?;
        entries.push(ManifestEntry {
            id: task.id.clone(),
            family: task.family,
            metric: task.metric_mode(),
            path: file,
            kind: task.kind,
        });
    }
    let manifest = TaskManifest { vocab, tasks: entries };
    let path = dir.join("tasks.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

pub fn load_manifest(path: &Path) -> Result<Vec<TaskSpec>> {
    let manifest: TaskManifest = serde_json::from_slice(&fs::read(path)?)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    manifest
        .tasks
        .iter()
        .map(|entry| load_task(&base.join(&entry.path), entry, &manifest.vocab))
        .collect()
}
