//! Tasks: paired clean/corrupted inputs plus a metric.

mod eval;
mod generate;
mod io;
mod metric;
mod vocab;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use eval::{eval_accuracy, eval_metric, example_metric, InputChoice};
pub use generate::{generate_task, TaskKind};
pub use io::{load_manifest, load_task, save_manifest, save_task, ManifestEntry, TaskManifest};
pub use metric::{MetricMode, MetricSpec};
pub use vocab::{ToyVocab, Vocab};

/// Default number of examples per task.
pub const DEFAULT_TASK_SIZE: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Formal,
    Functional,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Formal => "formal",
            Family::Functional => "functional",
        }
    }
}

/// One clean/corrupted pair. The metric is always scored at the final
/// position with the clean example's token sets, for both inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskExample {
    pub clean: Vec<u32>,
    pub corrupted: Vec<u32>,
    pub metric: MetricSpec,
}

impl TaskExample {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.clean.len() != self.corrupted.len() {
            return Err(Error::Task(format!(
                "clean and corrupted lengths differ ({} vs {})",
                self.clean.len(),
                self.corrupted.len()
            )));
        }
        if self.clean.is_empty() {
            return Err(Error::Task("empty example".into()));
        }
        if let Some(&token) = self.clean.iter().chain(&self.corrupted).find(|&&t| t as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange { token, vocab_size });
        }
        self.metric.validate(vocab_size)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub id: String,
    pub family: Family,
    /// Generator that produced the task, when known. Lets training target
    /// corrupted inputs as well as clean ones.
    pub kind: Option<TaskKind>,
    pub examples: Vec<TaskExample>,
    pub vocab: Vocab,
}

/// Input sequence with the set of tokens that answer it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingItem {
    pub tokens: Vec<u32>,
    pub answers: Vec<u32>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.examples.is_empty() {
            return Err(Error::Task(format!("task {} has no examples", self.id)));
        }
        for ex in &self.examples {
            ex.validate(self.vocab.len())?;
        }
        Ok(())
    }

    pub fn metric_mode(&self) -> MetricMode {
        self.examples.first().map_or(MetricMode::LogitDiff, |e| e.metric.mode)
    }

    /// Training pairs. With a known generator both clean and corrupted inputs
    /// are used and targeted at the generator's answer set; otherwise clean
    /// inputs are targeted at their positive set.
    pub fn training_items(&self) -> Vec<TrainingItem> {
        let mut items = Vec::with_capacity(2 * self.examples.len());
        for ex in &self.examples {
            match self.kind {
                Some(kind) => {
                    for tokens in [&ex.clean, &ex.corrupted] {
                        if let Some(answers) = kind.ideal_answers(tokens) {
                            items.push(TrainingItem { tokens: tokens.clone(), answers });
                        }
                    }
                }
                None => items.push(TrainingItem { tokens: ex.clean.clone(), answers: ex.metric.positive.clone() }),
            }
        }
        items
    }
}

