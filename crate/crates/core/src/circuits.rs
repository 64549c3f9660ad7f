//! Circuit interventions, normalized faithfulness, and minimal-circuit search.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attribution::{check_compatible, edge_mask_of, ScoreTable};
use crate::circuit::{all_members, prune, Circuit, Granularity, Member, Provenance};
use crate::error::{Error, Result};
use crate::graph::ComputationalGraph;
use crate::model::{ActivationCache, EdgeMask, Patch, PatchedRun, Transformer};
use crate::scalar::Scalar;
use crate::tasks::{MetricSpec, TaskSpec};

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_THRESHOLD: f64 = 0.85;

/// A circuit lowered to the model's patching masks.
#[derive(Clone, Debug)]
pub enum Intervention {
    Edges(EdgeMask),
    Nodes(Vec<bool>),
    Neurons(Vec<Vec<bool>>),
}

impl Intervention {
    pub fn new<S: Scalar>(model: &Transformer<S>, graph: &ComputationalGraph, circuit: &Circuit) -> Result<Self> {
        check_compatible(&model.config, graph)?;
        circuit.validate(graph)?;
        let n = graph.producers().len();
        let idx = |node| graph.node_index(node).expect("validated member");
        Ok(match circuit.granularity {
            Granularity::Edge => {
                let edges = circuit.members.keys().filter_map(|m| match m {
                    Member::Edge(e) => Some(e),
                    _ => None,
                });
                Intervention::Edges(edge_mask_of(graph, &model.config, edges))
            }
            Granularity::Node => {
                let mut keep = vec![false; n];
                for m in circuit.members.keys() {
                    if let Member::Node(node) = m {
                        keep[idx(node)] = true;
                    }
                }
                Intervention::Nodes(keep)
            }
            Granularity::Neuron => {
                let mut keep = vec![vec![false; graph.d_model()]; n];
                for m in circuit.members.keys() {
                    if let Member::Neuron { node, dim } = m {
                        keep[idx(node)][*dim] = true;
                    }
                }
                Intervention::Neurons(keep)
            }
        })
    }

    pub fn patch<'a, S>(&'a self, corrupted: &'a ActivationCache<S>) -> Patch<'a, S> {
        match self {
            Intervention::Edges(mask) => Patch::Edges { mask, corrupted },
            Intervention::Nodes(keep) => Patch::Nodes { keep, corrupted },
            Intervention::Neurons(keep) => Patch::Neurons { keep, corrupted },
        }
    }
}

/// Runs `clean_tokens` with every out-of-circuit member replaced by its
/// value in `corrupted`.
pub fn apply_circuit<S: Scalar>(
    model: &Transformer<S>,
    graph: &ComputationalGraph,
    circuit: &Circuit,
    clean_tokens: &[u32],
    corrupted: &ActivationCache<S>,
) -> Result<PatchedRun<S>> {
    let iv = Intervention::new(model, graph, circuit)?;
    model.forward_patched(clean_tokens, &iv.patch(corrupted))
}

#[derive(Clone, Debug)]
struct PreparedExample<S> {
    clean: Vec<u32>,
    corrupted: ActivationCache<S>,
    metric: MetricSpec,
}

/// A task with its corrupted activations cached and its endpoint metrics
/// `m` and `m_null` computed once.
#[derive(Clone, Debug)]
pub struct PreparedTask<S> {
    task_id: String,
    examples: Vec<PreparedExample<S>>,
    affine: (f64, f64),
    m: f64,
    m_null: f64,
}

impl<S: Scalar> PreparedTask<S> {
    pub fn new(model: &Transformer<S>, task: &TaskSpec) -> Result<Self> {
        if task.examples.is_empty() {
            return Err(Error::Task(format!("task {} has no examples", task.id)));
        }
        let mut examples = Vec::with_capacity(task.examples.len());
        for ex in &task.examples {
            ex.metric.check_vocab(model.config.vocab_size)?;
            let corrupted = model.forward_with_cache(&ex.corrupted)?;
            if corrupted.positions() != ex.clean.len() {
                return Err(Error::ShapeMismatch);
            }
            examples.push(PreparedExample { clean: ex.clean.clone(), corrupted, metric: ex.metric.clone() });
        }
        let mut p = Self { task_id: task.id.clone(), examples, affine: (0.0, 1.0), m: 0.0, m_null: 0.0 };
        p.refresh(model)?;
        Ok(p)
    }

    /// Scores every metric value as `a + b * value`.
    pub fn with_affine(mut self, model: &Transformer<S>, a: f64, b: f64) -> Result<Self> {
        self.affine = (a, b);
        self.refresh(model)?;
        Ok(self)
    }

    fn refresh(&mut self, model: &Transformer<S>) -> Result<()> {
        let (mut m, mut m_null) = (0.0, 0.0);
        for ex in &self.examples {
            m += self.score(ex, model.logits(&ex.clean)?.row(ex.clean.len() - 1));
            m_null += self.score(ex, ex.corrupted.final_logits());
        }
        let n = self.examples.len() as f64;
        self.m = m / n;
        self.m_null = m_null / n;
        Ok(())
    }

    fn score(&self, ex: &PreparedExample<S>, logits: &[S]) -> f64 {
        self.affine.0 + self.affine.1 * ex.metric.value(logits).as_f64()
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn m_null(&self) -> f64 {
        self.m_null
    }

    /// Mean metric under an intervention.
    pub fn intervened_metric(&self, model: &Transformer<S>, iv: &Intervention) -> Result<f64> {
        let mut total = 0.0;
        for ex in &self.examples {
            let run = model.forward_patched(&ex.clean, &iv.patch(&ex.corrupted))?;
            total += self.score(ex, run.final_logits());
        }
        Ok(total / self.examples.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub task: String,
    pub m: f64,
    pub m_null: f64,
    pub m_circuit: f64,
    #[serde(rename = "F")]
    pub f: f64,
    pub n_members: usize,
    pub fraction_of_graph: f64,
}

/// `(m_C - m_null) / (m - m_null)` with separation floor `epsilon`.
pub fn normalized_faithfulness(m: f64, m_null: f64, m_circuit: f64, epsilon: f64) -> Result<f64> {
    let separation = (m - m_null).abs();
    if !(separation > epsilon) {
        return Err(Error::DegenerateTask { separation, epsilon });
    }
    Ok((m_circuit - m_null) / (m - m_null))
}

pub fn faithfulness<S: Scalar>(
    model: &Transformer<S>,
    graph: &ComputationalGraph,
    circuit: &Circuit,
    task: &PreparedTask<S>,
) -> Result<FaithfulnessReport> {
    let iv = Intervention::new(model, graph, circuit)?;
    let m_circuit = task.intervened_metric(model, &iv)?;
    let f = normalized_faithfulness(task.m, task.m_null, m_circuit, DEFAULT_EPSILON)?;
    let total = all_members(graph, circuit.granularity).len();
    Ok(FaithfulnessReport {
        task: task.task_id.clone(),
        m: task.m,
        m_null: task.m_null,
        m_circuit,
        f,
        n_members: circuit.len(),
        fraction_of_graph: circuit.len() as f64 / total as f64,
    })
}

/// Faithfulness of `circuit` (found on some task) on another task.
pub fn cross_task_faithfulness<S: Scalar>(
    model: &Transformer<S>,
    graph: &ComputationalGraph,
    circuit: &Circuit,
    task: &PreparedTask<S>,
) -> Result<f64> {
    Ok(faithfulness(model, graph, circuit, task)?.f)
}

/// Members ordered by descending `|score|`, ties in member order.
pub fn ranked_members(scores: &ScoreTable) -> Vec<(Member, f64)> {
    let mut ranked = scores.scores.clone();
    ranked.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then_with(|| a.0.cmp(&b.0)));
    ranked
}

pub fn select_top_n(scores: &ScoreTable, n: usize, provenance: Provenance) -> Result<Circuit> {
    if n > scores.len() {
        return Err(Error::InvalidSearch(format!("n = {n} exceeds the {} scored members", scores.len())));
    }
    Circuit::from_members(scores.granularity, ranked_members(scores).into_iter().take(n), provenance)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchParams {
    pub threshold: f64,
    /// Growth factor of the coarse sweep, `n = 1, f, f^2, ...`.
    pub coarse_factor: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, coarse_factor: 2 }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidSearch(format!("threshold {} is outside (0, 1]", self.threshold)));
        }
        if self.coarse_factor < 2 {
            return Err(Error::InvalidSearch("coarse factor must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub n: usize,
    pub f: f64,
    /// Distinct sizes evaluated.
    pub evaluations: usize,
}

/// Smallest `n` in `0..=total` with `f(n) >= threshold`.
///
/// A coarse geometric sweep brackets the first passing size, bisection
/// narrows the bracket, and a downward scan over every smaller size catches
/// passing sizes that an uneven profile hides from the bracket.
pub fn search_min_n(
    total: usize,
    params: &SearchParams,
    mut f: impl FnMut(usize) -> Result<f64>,
) -> Result<SearchOutcome> {
    params.validate()?;
    let tau = params.threshold;
    let mut memo: BTreeMap<usize, f64> = BTreeMap::new();
    let mut eval = |n: usize, memo: &mut BTreeMap<usize, f64>| -> Result<f64> {
        if let Some(&v) = memo.get(&n) {
            return Ok(v);
        }
        let v = f(n)?;
        memo.insert(n, v);
        Ok(v)
    };

    let full = eval(total, &mut memo)?;
    if full < tau {
        return Err(Error::ThresholdUnreachable { threshold: tau, full });
    }
    let (mut lo, mut hi) = (0usize, total);
    let mut n = 1usize;
    while n < total {
        if eval(n, &mut memo)? >= tau {
            hi = n;
            break;
        }
        lo = n;
        n = n.saturating_mul(params.coarse_factor);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if eval(mid, &mut memo)? >= tau {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut best = hi;
    for n in (0..hi).rev() {
        if eval(n, &mut memo)? >= tau {
            best = n;
        }
    }
    Ok(SearchOutcome { n: best, f: memo[&best], evaluations: memo.len() })
}

/// Result of a minimal-circuit search.
#[derive(Clone, Debug, PartialEq)]
pub struct MinimalCircuit {
    /// Size of the top-n circuit that reached the threshold, before pruning.
    pub n: usize,
    pub circuit: Circuit,
    pub report: FaithfulnessReport,
}

/// Smallest top-n circuit with faithfulness at least `params.threshold`.
/// Edge circuits are pruned before they are reported.
pub fn find_minimal_circuit<S: Scalar>(
    model: &Transformer<S>,
    graph: &ComputationalGraph,
    task: &PreparedTask<S>,
    scores: &ScoreTable,
    params: &SearchParams,
    provenance: Provenance,
) -> Result<MinimalCircuit> {
    scores.check_graph(graph)?;
    let ranked = ranked_members(scores);
    let build = |n: usize| Circuit::from_members(scores.granularity, ranked[..n].iter().copied(), provenance.clone());
    let outcome = search_min_n(ranked.len(), params, |n| {
        let iv = Intervention::new(model, graph, &build(n)?)?;
        normalized_faithfulness(task.m, task.m_null, task.intervened_metric(model, &iv)?, DEFAULT_EPSILON)
    })?;
    let mut circuit = build(outcome.n)?;
    circuit.provenance.threshold = Some(params.threshold);
    if circuit.granularity == Granularity::Edge {
        circuit = prune(&circuit)?;
    }
    let report = faithfulness(model, graph, &circuit, task)?;
    Ok(MinimalCircuit { n: outcome.n, circuit, report })
}
