//! Overlap metrics between circuits and task-by-task similarity matrices.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::circuit::{Circuit, Granularity, Member};
use crate::circuits::{cross_task_faithfulness, PreparedTask};
use crate::error::{Error, Result};
use crate::graph::ComputationalGraph;
use crate::model::Transformer;
use crate::scalar::Scalar;
use crate::tasks::Family;

fn same_granularity(c1: &Circuit, c2: &Circuit) -> Result<()> {
    if c1.granularity != c2.granularity {
        return Err(Error::GranularityMismatch {
            expected: c1.granularity.to_string(),
            found: c2.granularity.to_string(),
        });
    }
    Ok(())
}

fn intersection_size(a: &Circuit, b: &Circuit) -> usize {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    small.members.keys().filter(|m| large.members.contains_key(m)).count()
}

/// `|C1 ∩ C2| / |C1 ∪ C2|`. Two empty circuits are identical and score 1.
pub fn iou(c1: &Circuit, c2: &Circuit) -> Result<f64> {
    same_granularity(c1, c2)?;
    let inter = intersection_size(c1, c2);
    let union = c1.len() + c2.len() - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `|C1 ∩ C2| / |C2|`: the share of `c2` that `c1` covers.
pub fn recall(c1: &Circuit, c2: &Circuit) -> Result<f64> {
    same_granularity(c1, c2)?;
    if c2.is_empty() {
        return Err(Error::EmptyCircuit);
    }
    Ok(intersection_size(c1, c2) as f64 / c2.len() as f64)
}

/// Set IoU over raw member sets.
pub fn set_iou(a: &BTreeSet<Member>, b: &BTreeSet<Member>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMetric {
    Iou,
    Recall,
    CrossFaithfulness,
}

impl SimilarityMetric {
    pub const ALL: [SimilarityMetric; 3] =
        [SimilarityMetric::Iou, SimilarityMetric::Recall, SimilarityMetric::CrossFaithfulness];

    pub fn as_str(self) -> &'static str {
        match self {
            SimilarityMetric::Iou => "iou",
            SimilarityMetric::Recall => "recall",
            SimilarityMetric::CrossFaithfulness => "cross-faithfulness",
        }
    }
}

impl fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SimilarityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown similarity metric {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLabel {
    pub id: String,
    pub family: Family,
}

impl TaskLabel {
    pub fn new(id: impl Into<String>, family: Family) -> Self {
        Self { id: id.into(), family }
    }

    fn header(&self) -> String {
        format!("{}:{}", self.family.as_str(), self.id)
    }
}

/// Square task-by-task grid.
///
/// For IoU the grid is symmetric. For the directional metrics row `i`
/// describes task `i` as the reference: `values[i][j]` is the recall of
/// circuit `i` by circuit `j`, or the faithfulness of circuit `j` on task
/// `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub tasks: Vec<TaskLabel>,
    pub values: Vec<Vec<f64>>,
    pub metric: SimilarityMetric,
    pub granularity: Granularity,
}

/// Medians over ordered task pairs `i != j`, grouped by family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixSummary {
    pub median_within_formal: Option<f64>,
    pub median_within_functional: Option<f64>,
    pub median_cross_family: Option<f64>,
    pub median_all: Option<f64>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

fn check_circuits(circuits: &[Circuit]) -> Result<Granularity> {
    let first = circuits.first().ok_or_else(|| Error::Matrix("no circuits".into()))?;
    for c in circuits {
        same_granularity(first, c)?;
    }
    Ok(first.granularity)
}

impl SimilarityMatrix {
    pub fn new(
        tasks: Vec<TaskLabel>,
        values: Vec<Vec<f64>>,
        metric: SimilarityMetric,
        granularity: Granularity,
    ) -> Result<Self> {
        let k = tasks.len();
        if k == 0 {
            return Err(Error::Matrix("empty matrix".into()));
        }
        if values.len() != k || values.iter().any(|r| r.len() != k) {
            return Err(Error::Matrix(format!("expected a {k}x{k} grid")));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Matrix("non-finite entry".into()));
        }
        Ok(Self { tasks, values, metric, granularity })
    }

    pub fn size(&self) -> usize {
        self.tasks.len()
    }

    pub fn iou(tasks: Vec<TaskLabel>, circuits: &[Circuit]) -> Result<Self> {
        let g = check_circuits(circuits)?;
        let k = circuits.len();
        let mut values = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in i..k {
                let v = iou(&circuits[i], &circuits[j])?;
                values[i][j] = v;
                values[j][i] = v;
            }
        }
        Self::new(tasks, values, SimilarityMetric::Iou, g)
    }

    pub fn recall(tasks: Vec<TaskLabel>, circuits: &[Circuit]) -> Result<Self> {
        let g = check_circuits(circuits)?;
        let values = circuits
            .iter()
            .map(|ci| circuits.iter().map(|cj| recall(cj, ci)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Self::new(tasks, values, SimilarityMetric::Recall, g)
    }

    pub fn cross_faithfulness<S: Scalar>(
        tasks: Vec<TaskLabel>,
        circuits: &[Circuit],
        model: &Transformer<S>,
        graph: &ComputationalGraph,
        prepared: &[PreparedTask<S>],
    ) -> Result<Self> {
        let g = check_circuits(circuits)?;
        if prepared.len() != circuits.len() {
            return Err(Error::Matrix("one prepared task per circuit is required".into()));
        }
        let values = prepared
            .iter()
            .map(|t| circuits.iter().map(|c| cross_task_faithfulness(model, graph, c, t)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Self::new(tasks, values, SimilarityMetric::CrossFaithfulness, g)
    }

    /// Element-wise mean of matrices over the same tasks and metric.
    pub fn mean(matrices: &[SimilarityMatrix]) -> Result<Self> {
        let first = matrices.first().ok_or_else(|| Error::Matrix("nothing to average".into()))?;
        let k = first.size();
        let mut values = vec![vec![0.0; k]; k];
        for m in matrices {
            if m.tasks != first.tasks || m.metric != first.metric || m.granularity != first.granularity {
                return Err(Error::Matrix("matrices disagree on tasks, metric or granularity".into()));
            }
            for (row, src) in values.iter_mut().zip(&m.values) {
                row.iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
        let n = matrices.len() as f64;
        values.iter_mut().flatten().for_each(|v| *v /= n);
        Self::new(first.tasks.clone(), values, first.metric, first.granularity)
    }

    /// Values over ordered pairs `i != j`, optionally filtered by families.
    pub fn off_diagonal(&self, keep: impl Fn(Family, Family) -> bool) -> Vec<f64> {
        let mut out = Vec::new();
        for (i, a) in self.tasks.iter().enumerate() {
            for (j, b) in self.tasks.iter().enumerate() {
                if i != j && keep(a.family, b.family) {
                    out.push(self.values[i][j]);
                }
            }
        }
        out
    }

    pub fn summary(&self) -> MatrixSummary {
        MatrixSummary {
            median_within_formal: median(&mut self
                .off_diagonal(|a, b| a == Family::Formal && b == Family::Formal)),
            median_within_functional: median(&mut self
                .off_diagonal(|a, b| a == Family::Functional && b == Family::Functional)),
            median_cross_family: median(&mut self.off_diagonal(|a, b| a != b)),
            median_all: median(&mut self.off_diagonal(|_, _| true)),
        }
    }

    pub fn index_of(&self, task_id: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.id == task_id)
    }

    /// CSV with family-prefixed task ids as header row and column. Values are
    /// written in shortest round-trip form so a reloaded matrix is exact.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task");
        for t in &self.tasks {
            out.push(',');
            out.push_str(&t.header());
        }
        out.push('\n');
        for (t, row) in self.tasks.iter().zip(&self.values) {
            out.push_str(&t.header());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, metric: SimilarityMetric, granularity: Granularity) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Matrix("empty CSV".into()))?;
        let tasks = header
            .split(',')
            .skip(1)
            .map(parse_header)
            .collect::<Result<Vec<_>>>()?;
        let mut values = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut cells = line.split(',');
            let label = parse_header(cells.next().unwrap_or_default())?;
            if tasks.get(i) != Some(&label) {
                return Err(Error::Matrix(format!("row {} label {} does not match the header", i + 1, label.id)));
            }
            let row = cells
                .map(|c| c.trim().parse::<f64>().map_err(|e| Error::Matrix(format!("row {}: {e}", i + 1))))
                .collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        Self::new(tasks, values, metric, granularity)
    }
}

fn parse_header(cell: &str) -> Result<TaskLabel> {
    let (family, id) = cell
        .trim()
        .split_once(':')
        .ok_or_else(|| Error::Matrix(format!("header {cell:?} lacks a family prefix")))?;
    let family = match family {
        "formal" => Family::Formal,
        "functional" => Family::Functional,
        _ => return Err(Error::Matrix(format!("unknown family {family:?}"))),
    };
    Ok(TaskLabel::new(id, family))
}
