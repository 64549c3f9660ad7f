//! Member scores: first-order estimates (EAP, EAP-IG) and exact patching.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::circuit::{all_members, Granularity, Member};
use crate::error::{Error, Result};
use crate::graph::{ComputationalGraph, NodeId};
use crate::model::{ActivationCache, EdgeMask, MetricGradients, ModelConfig, Patch, Transformer};
use crate::scalar::Scalar;
use crate::tasks::{TaskExample, TaskSpec};
use crate::tensor::Mat;

pub const DEFAULT_IG_STEPS: usize = 5;
pub const DEFAULT_EXACT_LIMIT: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Eap,
    EapIg { steps: usize },
    Exact,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Eap => "eap",
            Method::EapIg { .. } => "eap-ig",
            Method::Exact => "exact",
        }
    }

    pub fn steps(&self) -> Option<usize> {
        match *self {
            Method::EapIg { steps } => Some(steps),
            _ => None,
        }
    }

    pub fn from_name(name: &str, steps: Option<usize>) -> Result<Self> {
        match name {
            "eap" => Ok(Method::Eap),
            "eap-ig" => Ok(Method::EapIg { steps: steps.unwrap_or(DEFAULT_IG_STEPS) }),
            "exact" => Ok(Method::Exact),
            _ => Err(Error::Config(format!("unknown method {name:?}"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.steps() {
            Some(s) => write!(f, "{}({s})", self.name()),
            None => f.write_str(self.name()),
        }
    }
}

/// Signed score for every member of a graph at one granularity, in member
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub granularity: Granularity,
    pub method: Method,
    pub n_examples: usize,
    pub scores: Vec<(Member, f64)>,
}

#[derive(Serialize, Deserialize)]
struct ScoreRecord {
    #[serde(flatten)]
    member: Member,
    value: f64,
}

#[derive(Serialize, Deserialize)]
struct ScoreDocument {
    granularity: Granularity,
    method: String,
    steps: Option<usize>,
    n_examples: usize,
    scores: Vec<ScoreRecord>,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, member: &Member) -> Option<f64> {
        self.scores.binary_search_by(|(m, _)| m.cmp(member)).ok().map(|i| self.scores[i].1)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.scores.iter().map(|&(_, v)| v)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ScoreDocument {
            granularity: self.granularity,
            method: self.method.name().to_string(),
            steps: self.method.steps(),
            n_examples: self.n_examples,
            scores: self.scores.iter().map(|&(member, value)| ScoreRecord { member, value }).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ScoreDocument = serde_json::from_str(text)?;
        let method = Method::from_name(&doc.method, doc.steps)?;
        let mut scores = Vec::with_capacity(doc.scores.len());
        for r in doc.scores {
            if r.member.granularity() != doc.granularity {
                return Err(Error::GranularityMismatch {
                    expected: doc.granularity.to_string(),
                    found: r.member.granularity().to_string(),
                });
            }
            if !r.value.is_finite() {
                return Err(Error::InvalidMember(format!("{}: non-finite score", r.member)));
            }
            scores.push((r.member, r.value));
        }
        scores.sort_by(|a, b| a.0.cmp(&b.0));
        if scores.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidMember("duplicate member in score table".into()));
        }
        Ok(Self { granularity: doc.granularity, method, n_examples: doc.n_examples, scores })
    }

    /// Checks that the table covers exactly the members of `graph`.
    pub fn check_graph(&self, graph: &ComputationalGraph) -> Result<()> {
        let expected = all_members(graph, self.granularity);
        if expected.len() != self.scores.len() || expected.iter().zip(&self.scores).any(|(a, (b, _))| a != b) {
            return Err(Error::InvalidMember("score table does not cover the host graph".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_compatible(config: &ModelConfig, graph: &ComputationalGraph) -> Result<()> {
    if graph.n_layers() != config.n_layers || graph.n_heads() != config.n_heads || graph.d_model() != config.d_model {
        return Err(Error::InvalidConfig("graph shape does not match the model".into()));
    }
    Ok(())
}

fn node_idx(graph: &ComputationalGraph, node: &NodeId) -> usize {
    graph.node_index(node).expect("member of the graph")
}

/// First-order scores of one example: `(z'_u - z_u) · gradient`, summed over
/// positions, for every member of `graph` at `granularity`.
pub fn attribute_example<S: Scalar>(
    graph: &ComputationalGraph,
    granularity: Granularity,
    clean: &[Mat<S>],
    corrupted: &[Mat<S>],
    grads: &MetricGradients<S>,
) -> Vec<f64> {
    let deltas: Vec<Mat<S>> = clean.iter().zip(corrupted).map(|(z, zc)| Mat::difference(zc, z)).collect();
    match granularity {
        Granularity::Edge => graph
            .edges()
            .iter()
            .map(|e| {
                let (u, v) = (node_idx(graph, &e.src), node_idx(graph, &e.dst));
                let delta = &deltas[u];
                match e.channel.model_index(&e.dst) {
                    Some(c) => delta.dot(&grads.inputs[v][c]),
                    None => grads.inputs[v].iter().map(|g| delta.dot(g)).sum::<S>(),
                }
                .as_f64()
            })
            .collect(),
        Granularity::Node => (0..graph.producers().len()).map(|u| deltas[u].dot(&grads.outputs[u]).as_f64()).collect(),
        Granularity::Neuron => {
            let d = graph.d_model();
            let mut out = Vec::with_capacity(graph.producers().len() * d);
            for u in 0..graph.producers().len() {
                let (delta, g) = (&deltas[u], &grads.outputs[u]);
                let mut acc = vec![S::zero(); d];
                for p in 0..delta.rows() {
                    for ((a, &x), &y) in acc.iter_mut().zip(delta.row(p)).zip(g.row(p)) {
                        *a += x * y;
                    }
                }
                out.extend(acc.into_iter().map(|a| a.as_f64()));
            }
            out
        }
    }
}

fn assemble(graph: &ComputationalGraph, granularity: Granularity, method: Method, totals: Vec<f64>, n: usize) -> ScoreTable {
    let members = all_members(graph, granularity);
    debug_assert_eq!(members.len(), totals.len());
    let scores = members.into_iter().zip(totals).map(|(m, t)| (m, t / n as f64)).collect();
    ScoreTable { granularity, method, n_examples: n, scores }
}

fn check_task(task: &TaskSpec) -> Result<()> {
    if task.examples.is_empty() {
        return Err(Error::Task(format!("task {} has no examples", task.id)));
    }
    Ok(())
}

/// Integrated gradients along the input-embedding path from the corrupted
/// to the clean embedding, `k = 1..=steps`.
fn integrated_gradients<S: Scalar>(
    model: &Transformer<S>,
    ex: &TaskExample,
    clean: &ActivationCache<S>,
    corrupted: &ActivationCache<S>,
    steps: usize,
) -> Result<MetricGradients<S>> {
    let (e, e0) = (clean.output(0), corrupted.output(0));
    let span = Mat::difference(e, e0);
    let mut total: Option<MetricGradients<S>> = None;
    for k in 1..=steps {
        let g = if k == steps {
            model.metric_gradients(&ex.clean, &ex.metric)?.2
        } else {
            let mut point = e0.clone();
            point.add_scaled(&span, S::lit(k as f64 / steps as f64));
            model.metric_gradients_from_embedding(&ex.clean, &point, &ex.metric)?.1
        };
        match total.as_mut() {
            Some(t) => t.accumulate(&g),
            None => total = Some(g),
        }
    }
    let mut total = total.expect("steps >= 1");
    if steps > 1 {
        total.scale(S::one() / S::lit(steps as f64));
    }
    Ok(total)
}

fn score_first_order<S: Scalar>(
    model: &Transformer<S>,
    graph: &ComputationalGraph,
    task: &TaskSpec,
    granularity: Granularity,
    method: Method,
) -> Result<ScoreTable> {
    check_compatible(&model.config, graph)?;
    check_task(task)?;
    let mut totals = vec![0.0; all_members(graph, granularity).len()];
    for ex in &task.examples {
        let corrupted = model.forward_with_cache(&ex.corrupted)?;
        let (clean, _, eap_grads) = model.metric_gradients(&ex.clean, &ex.metric)?;
        if clean.positions() != corrupted.positions() {
            return Err(Error::ShapeMismatch);
        }
        let grads = match method {
            Method::EapIg { steps } if steps > 1 => integrated_gradients(model, ex, &clean, &corrupted, steps)?,
            _ => eap_grads,
        };
        let s = attribute_example(graph, granularity, clean.outputs(), corrupted.outputs(), &grads);
        totals.iter_mut().zip(s).for_each(|(t, x)| *t += x);
    }
    Ok(assemble(graph, granularity, method, totals, task.examples.len()))
}

/// Edge attribution patching: one gradient pass per example.
pub fn score_eap<S: Scalar>(
    model: &Transformer<S>,
    graph: &ComputationalGraph,
    task: &TaskSpec,
    granularity: Granularity,
) -> Result<ScoreTable> {
    score_first_order(model, graph, task, granularity, Method::Eap)
}

/// EAP with gradients averaged over `steps` input interpolations.
pub fn score_eap_ig<S: Scalar>(
    model: &Transformer<S>,
    graph: &ComputationalGraph,
    task: &TaskSpec,
    granularity: Granularity,
    steps: usize,
) -> Result<ScoreTable> {
    if steps == 0 {
        return Err(Error::ZeroSteps);
    }
    score_first_order(model, graph, task, granularity, Method::EapIg { steps })
}

/// How exact edge effects are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExactRoute {
    /// Add `z'_u - z_u` to the target's channel input and propagate.
    #[default]
    Delta,
    /// Full edge-patching run with every edge but one in the circuit.
    Rerun,
}

/// Exact indirect effect of every member, `m(member corrupted) - m`,
/// averaged over examples. The sign matches the first-order estimates.
pub fn score_exact<S: Scalar>(
    model: &Transformer<S>,
    graph: &ComputationalGraph,
    task: &TaskSpec,
    granularity: Granularity,
) -> Result<ScoreTable> {
    score_exact_with(model, graph, task, granularity, DEFAULT_EXACT_LIMIT, ExactRoute::Delta)
}

pub fn score_exact_with<S: Scalar>(
    model: &Transformer<S>,
    graph: &ComputationalGraph,
    task: &TaskSpec,
    granularity: Granularity,
    limit: usize,
    route: ExactRoute,
) -> Result<ScoreTable> {
    check_compatible(&model.config, graph)?;
    check_task(task)?;
    let members = all_members(graph, granularity);
    if members.len() > limit {
        return Err(Error::TooManyMembers { members: members.len(), limit });
    }
    let mut totals = vec![0.0; members.len()];
    for ex in &task.examples {
        let clean = model.forward_with_cache(&ex.clean)?;
        let corrupted = model.forward_with_cache(&ex.corrupted)?;
        if clean.positions() != corrupted.positions() {
            return Err(Error::ShapeMismatch);
        }
        let base = ex.metric.value(clean.final_logits());
        let s = exact_example(model, graph, &members, ex, &clean, &corrupted, route)?;
        totals.iter_mut().zip(s).for_each(|(t, m)| *t += (m - base).as_f64());
    }
    Ok(assemble(graph, granularity, Method::Exact, totals, task.examples.len()))
}

/// Metric with each member corrupted alone.
fn exact_example<S: Scalar>(
    model: &Transformer<S>,
    graph: &ComputationalGraph,
    members: &[Member],
    ex: &TaskExample,
    clean: &ActivationCache<S>,
    corrupted: &ActivationCache<S>,
    route: ExactRoute,
) -> Result<Vec<S>> {
    let n_prod = graph.producers().len();
    let full_mask = match route {
        ExactRoute::Rerun => Some(edge_mask_of(graph, &model.config, graph.edges().iter())),
        ExactRoute::Delta => None,
    };
    let mut keep_nodes = vec![true; n_prod];
    let mut keep_neurons = vec![vec![true; graph.d_model()]; n_prod];
    let mut out = Vec::with_capacity(members.len());
    for member in members {
        let run = match *member {
            Member::Edge(e) => {
                let (u, v) = (node_idx(graph, &e.src), node_idx(graph, &e.dst));
                let channel = e.channel.model_index(&e.dst);
                match &full_mask {
                    None => {
                        let offset = Mat::difference(corrupted.output(u), clean.output(u));
                        let patch = match channel {
                            Some(c) => Patch::ChannelOffset { node: v, channel: c, offset: &offset },
                            None => Patch::InputOffset { node: v, offset: &offset },
                        };
                        model.forward_patched(&ex.clean, &patch)?
                    }
                    Some(full) => {
                        let mut mask = full.clone();
                        let channels: Vec<usize> = match channel {
                            Some(c) => vec![c],
                            None => vec![0, 1, 2],
                        };
                        for c in channels {
                            mask.remove(v, c, u);
                        }
                        model.forward_patched(&ex.clean, &Patch::Edges { mask: &mask, corrupted })?
                    }
                }
            }
            Member::Node(n) => {
                let u = node_idx(graph, &n);
                keep_nodes[u] = false;
                let run = model.forward_patched(&ex.clean, &Patch::Nodes { keep: &keep_nodes, corrupted });
                keep_nodes[u] = true;
                run?
            }
            Member::Neuron { node, dim } => {
                let u = node_idx(graph, &node);
                keep_neurons[u][dim] = false;
                let run = model.forward_patched(&ex.clean, &Patch::Neurons { keep: &keep_neurons, corrupted });
                keep_neurons[u][dim] = true;
                run?
            }
        };
        out.push(ex.metric.value(run.final_logits()));
    }
    Ok(out)
}

/// Model-level mask for a set of graph edges. A unified edge into a head
/// covers all three of its input channels.
pub(crate) fn edge_mask_of<'a>(
    graph: &ComputationalGraph,
    config: &ModelConfig,
    edges: impl Iterator<Item = &'a crate::graph::EdgeId>,
) -> EdgeMask {
    let mut mask = EdgeMask::empty(config);
    for e in edges {
        let (u, v) = (node_idx(graph, &e.src), node_idx(graph, &e.dst));
        match e.channel.model_index(&e.dst) {
            Some(c) => mask.insert(v, c, u),
            None => (0..3).for_each(|c| mask.insert(v, c, u)),
        }
    }
    mask
}
