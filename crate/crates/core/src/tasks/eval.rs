use crate::error::Result;
use crate::model::Transformer;
use crate::scalar::Scalar;

use super::{TaskExample, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputChoice {
    Clean,
    Corrupted,
}

/// Metric of one example, scored with the clean example's token sets.
pub fn example_metric<S: Scalar>(model: &Transformer<S>, ex: &TaskExample, input: InputChoice) -> Result<f64> {
    let tokens = match input {
        InputChoice::Clean => &ex.clean,
        InputChoice::Corrupted => &ex.corrupted,
    };
    let logits = model.logits(tokens)?;
    Ok(ex.metric.value(logits.row(logits.rows() - 1)).as_f64())
}

/// Mean metric over the task's examples: `m` on clean inputs, `m_null` on
/// corrupted ones. Examples are summed in order.
pub fn eval_metric<S: Scalar>(model: &Transformer<S>, task: &TaskSpec, input: InputChoice) -> Result<f64> {
    let mut total = 0.0;
    for ex in &task.examples {
        total += example_metric(model, ex, input)?;
    }
    Ok(total / task.examples.len() as f64)
}

/// Fraction of examples whose positive set receives more probability than
/// the negative set on the clean input.
pub fn eval_accuracy<S: Scalar>(model: &Transformer<S>, task: &TaskSpec) -> Result<f64> {
    let mut correct = 0usize;
    for ex in &task.examples {
        let logits = model.logits(&ex.clean)?;
        if ex.metric.is_correct(logits.row(logits.rows() - 1)) {
            correct += 1;
        }
    }
    Ok(correct as f64 / task.examples.len() as f64)
}
