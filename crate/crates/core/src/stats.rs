//! Overlap significance, random-circuit baselines and structural profiles.

use std::collections::BTreeSet;

use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::circuit::{prune, Circuit, Granularity, Member, Provenance};
use crate::compare::{iou, median, set_iou, TaskLabel};
use crate::error::{Error, Result};
use crate::graph::{ComputationalGraph, EdgeId, NodeKind};
use crate::rng::{derive_seed, seeded};

pub const LOGNORMAL_MU: f64 = 0.0;
pub const LOGNORMAL_SIGMA: f64 = 1.0;
pub const DEFAULT_REPLICATES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailMode {
    Point,
    Tail,
}

fn binomial(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step.
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

fn ln_factorials(n: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    out.push(0.0);
    let mut acc = 0.0;
    for i in 1..=n {
        acc += (i as f64).ln();
        out.push(acc);
    }
    out
}

/// Probability of an overlap of `k` between a uniformly random `n1`-subset
/// and a fixed `n2`-subset of `population` items (`mode = Point`), or of an
/// overlap of at least `k` (`mode = Tail`).
pub fn hypergeom(population: u64, n1: u64, n2: u64, k: u64, mode: TailMode) -> Result<f64> {
    if n1 > population || n2 > population {
        return Err(Error::Counts(format!("circuit sizes {n1}, {n2} exceed population {population}")));
    }
    if k > n1.min(n2) {
        return Err(Error::Counts(format!("overlap {k} exceeds the smaller circuit ({})", n1.min(n2))));
    }
    let hi = match mode {
        TailMode::Point => k,
        TailMode::Tail => n1.min(n2),
    };
    // Overlaps below n1 + n2 - population are impossible.
    let lo = k.max((n1 + n2).saturating_sub(population));
    if lo > hi {
        return Ok(0.0);
    }
    if let Some(p) = exact_sum(population, n1, n2, lo, hi) {
        return Ok(p);
    }
    let lf = ln_factorials(population);
    let ln_c = |n: u64, r: u64| lf[n as usize] - lf[r as usize] - lf[(n - r) as usize];
    let denom = ln_c(population, n1);
    let terms: Vec<f64> = (lo..=hi).map(|j| ln_c(n2, j) + ln_c(population - n2, n1 - j) - denom).collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let p = max.exp() * terms.iter().map(|t| (t - max).exp()).sum::<f64>();
    Ok(p.clamp(0.0, 1.0))
}

fn exact_sum(population: u64, n1: u64, n2: u64, lo: u64, hi: u64) -> Option<f64> {
    let denom = binomial(population, n1)?;
    let mut num: u128 = 0;
    for j in lo..=hi {
        let t = binomial(n2, j)?.checked_mul(binomial(population - n2, n1 - j)?)?;
        num = num.checked_add(t)?;
    }
    Some(num as f64 / denom as f64)
}

fn edges_of(circuit: &Circuit) -> Result<Vec<EdgeId>> {
    if circuit.granularity != Granularity::Edge {
        return Err(Error::GranularityMismatch {
            expected: Granularity::Edge.to_string(),
            found: circuit.granularity.to_string(),
        });
    }
    Ok(circuit
        .members
        .keys()
        .filter_map(|m| match m {
            Member::Edge(e) => Some(*e),
            _ => None,
        })
        .collect())
}

/// Random edge circuit: log-normal scores, top `target_size` by score, then
/// pruned.
pub fn dummy_circuit(graph: &ComputationalGraph, target_size: usize, seed: u64) -> Result<Circuit> {
    let edges = graph.edges();
    if target_size > edges.len() {
        return Err(Error::InvalidSearch(format!("target size {target_size} exceeds {} edges", edges.len())));
    }
    let dist = LogNormal::new(LOGNORMAL_MU, LOGNORMAL_SIGMA).expect("valid log-normal parameters");
    let mut rng = seeded(seed);
    let mut scored: Vec<(Member, f64)> = edges.iter().map(|&e| (Member::Edge(e), dist.sample(&mut rng))).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(target_size);
    let mut provenance = Provenance::new("dummy", "lognormal");
    provenance.channel_mode = graph.channel_mode();
    prune(&Circuit::from_members(Granularity::Edge, scored, provenance)?)
}

/// A real circuit entering the baseline, with the top-n size it came from.
#[derive(Clone, Debug)]
pub struct BaselineInput {
    pub label: TaskLabel,
    pub circuit: Circuit,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairBaseline {
    pub a: String,
    pub b: String,
    pub iou: f64,
    pub intersection: usize,
    pub hypergeom_point: f64,
    pub hypergeom_tail: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBaseline {
    pub task: String,
    pub target_size: usize,
    pub mean_dummy_iou: Option<f64>,
    pub dummy_ious: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub population: usize,
    pub lognormal_mu: f64,
    pub lognormal_sigma: f64,
    pub tail: String,
    pub pairs: Vec<PairBaseline>,
    pub tasks: Vec<TaskBaseline>,
}

pub fn baseline_report(
    real: &[BaselineInput],
    graph: &ComputationalGraph,
    replicates: usize,
    seed: u64,
) -> Result<BaselineReport> {
    let population = graph.edges().len();
    let mut pairs = Vec::new();
    for (i, a) in real.iter().enumerate() {
        edges_of(&a.circuit)?;
        for b in &real[i + 1..] {
            let inter = a.circuit.member_set().intersection(&b.circuit.member_set()).count();
            let (n1, n2) = (a.circuit.len() as u64, b.circuit.len() as u64);
            pairs.push(PairBaseline {
                a: a.label.id.clone(),
                b: b.label.id.clone(),
                iou: iou(&a.circuit, &b.circuit)?,
                intersection: inter,
                hypergeom_point: hypergeom(population as u64, n1, n2, inter as u64, TailMode::Point)?,
                hypergeom_tail: hypergeom(population as u64, n1, n2, inter as u64, TailMode::Tail)?,
            });
        }
    }
    let mut tasks = Vec::with_capacity(real.len());
    for (t, input) in real.iter().enumerate() {
        let mut ious = Vec::with_capacity(replicates);
        for r in 0..replicates {
            let dummy = dummy_circuit(graph, input.n, derive_seed(seed, t as u64, r as u64))?;
            ious.push(iou(&dummy, &input.circuit)?);
        }
        let mean = (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64);
        tasks.push(TaskBaseline {
            task: input.label.id.clone(),
            target_size: input.n,
            mean_dummy_iou: mean,
            dummy_ious: ious,
            replicates,
            seed,
        });
    }
    Ok(BaselineReport {
        population,
        lognormal_mu: LOGNORMAL_MU,
        lognormal_sigma: LOGNORMAL_SIGMA,
        tail: "upper".into(),
        pairs,
        tasks,
    })
}

/// Counts of intersection edges by normalized layer of one endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerHistogram {
    /// `layer / n_layers` for layers `0..=n_layers`.
    pub bins: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExclusionSize {
    pub task: String,
    pub before: usize,
    pub after: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub tasks: Vec<TaskLabel>,
    pub intersection: Vec<EdgeId>,
    /// `[source kind][target kind]` over input, attention, mlp, logits.
    pub edge_types: [[usize; 4]; 4],
    pub source_layers: LayerHistogram,
    pub target_layers: LayerHistogram,
    pub sizes: Vec<ExclusionSize>,
    pub iou_before: Vec<Vec<f64>>,
    pub iou_after: Vec<Vec<f64>>,
    pub median_iou_before: Option<f64>,
    pub median_iou_after: Option<f64>,
}

impl StructureReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn normalized_layer(depth: usize, n_layers: usize) -> f64 {
    if n_layers == 0 {
        if depth == 0 {
            0.0
        } else {
            1.0
        }
    } else {
        depth as f64 / n_layers as f64
    }
}

fn iou_grid(sets: &[BTreeSet<Member>]) -> (Vec<Vec<f64>>, Option<f64>) {
    let k = sets.len();
    let mut grid = vec![vec![1.0; k]; k];
    let mut off = Vec::new();
    for i in 0..k {
        for j in 0..k {
            if i != j {
                grid[i][j] = set_iou(&sets[i], &sets[j]);
                off.push(grid[i][j]);
            }
        }
    }
    (grid, median(&mut off))
}

/// Intersection of all circuits, its composition by node kind and layer,
/// and the overlap left once the intersection is removed from every circuit.
pub fn intersect_and_profile(
    tasks: &[TaskLabel],
    circuits: &[Circuit],
    graph: &ComputationalGraph,
) -> Result<StructureReport> {
    if circuits.len() < 2 || tasks.len() != circuits.len() {
        return Err(Error::Matrix("need at least two labelled circuits".into()));
    }
    for c in circuits {
        edges_of(c)?;
    }
    let sets: Vec<BTreeSet<Member>> = circuits.iter().map(Circuit::member_set).collect();
    let mut common = sets[0].clone();
    for s in &sets[1..] {
        common = common.intersection(s).copied().collect();
    }
    let intersection: Vec<EdgeId> = common
        .iter()
        .filter_map(|m| match m {
            Member::Edge(e) => Some(*e),
            _ => None,
        })
        .collect();

    let l = graph.n_layers();
    let mut edge_types = [[0usize; 4]; 4];
    let mut src_counts = vec![0usize; l + 1];
    let mut dst_counts = vec![0usize; l + 1];
    for e in &intersection {
        edge_types[e.src.kind().index()][e.dst.kind().index()] += 1;
        src_counts[e.src.depth(l)] += 1;
        dst_counts[e.dst.depth(l)] += 1;
    }
    let bins: Vec<f64> = (0..=l).map(|d| normalized_layer(d, l)).collect();

    let reduced: Vec<BTreeSet<Member>> = sets.iter().map(|s| s.difference(&common).copied().collect()).collect();
    let sizes = tasks
        .iter()
        .zip(sets.iter().zip(&reduced))
        .map(|(t, (a, b))| ExclusionSize { task: t.id.clone(), before: a.len(), after: b.len() })
        .collect();
    let (iou_before, median_iou_before) = iou_grid(&sets);
    let (iou_after, median_iou_after) = iou_grid(&reduced);
    Ok(StructureReport {
        tasks: tasks.to_vec(),
        intersection,
        edge_types,
        source_layers: LayerHistogram { bins: bins.clone(), counts: src_counts },
        target_layers: LayerHistogram { bins, counts: dst_counts },
        sizes,
        iou_before,
        iou_after,
        median_iou_before,
        median_iou_after,
    })
}

/// Kind labels in grid order.
pub fn kind_labels() -> [&'static str; 4] {
    NodeKind::ALL.map(|k| match k {
        NodeKind::Input => "input",
        NodeKind::Attention => "attention",
        NodeKind::Mlp => "mlp",
        NodeKind::Logits => "logits",
    })
}
