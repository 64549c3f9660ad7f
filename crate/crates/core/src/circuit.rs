//! Circuits: scored subsets of a graph's edges, nodes, or neurons.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Channel, ChannelMode, ComputationalGraph, EdgeId, NodeId};

pub const CIRCUIT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Edge,
    Node,
    Neuron,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Edge => "edge",
            Granularity::Node => "node",
            Granularity::Neuron => "neuron",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edge" => Ok(Granularity::Edge),
            "node" => Ok(Granularity::Node),
            "neuron" => Ok(Granularity::Neuron),
            _ => Err(Error::Config(format!("unknown granularity {s:?}"))),
        }
    }
}

/// Unit of a circuit. A neuron is one output dimension of a node that writes
/// to the residual stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Member {
    Edge(EdgeId),
    Node(NodeId),
    Neuron { node: NodeId, dim: usize },
}

impl Member {
    pub fn granularity(&self) -> Granularity {
        match self {
            Member::Edge(_) => Granularity::Edge,
            Member::Node(_) => Granularity::Node,
            Member::Neuron { .. } => Granularity::Neuron,
        }
    }
}

impl fmt::Display for Member {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Member::Edge(e) => write!(f, "{e}"),
            Member::Node(n) => write!(f, "{n}"),
            Member::Neuron { node, dim } => write!(f, "{node}[{dim}]"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MemberKey {
    Edge { src: NodeId, dst: NodeId, channel: Channel },
    Neuron { node: NodeId, dim: usize },
    Node { node: NodeId },
}

impl Serialize for Member {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let key = match *self {
            Member::Edge(e) => MemberKey::Edge { src: e.src, dst: e.dst, channel: e.channel },
            Member::Node(node) => MemberKey::Node { node },
            Member::Neuron { node, dim } => MemberKey::Neuron { node, dim },
        };
        key.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Member {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        Ok(match MemberKey::deserialize(deserializer)? {
            MemberKey::Edge { src, dst, channel } => Member::Edge(EdgeId::new(src, dst, channel)),
            MemberKey::Node { node } => Member::Node(node),
            MemberKey::Neuron { node, dim } => Member::Neuron { node, dim },
        })
    }
}

/// Every member of `graph` at `granularity`, in member order.
pub fn all_members(graph: &ComputationalGraph, granularity: Granularity) -> Vec<Member> {
    match granularity {
        Granularity::Edge => graph.edges().iter().copied().map(Member::Edge).collect(),
        Granularity::Node => graph.producers().iter().copied().map(Member::Node).collect(),
        Granularity::Neuron => graph
            .producers()
            .iter()
            .flat_map(|&node| (0..graph.d_model()).map(move |dim| Member::Neuron { node, dim }))
            .collect(),
    }
}

/// Checks that `member` exists in `graph` at the graph's channel mode.
pub fn check_member(graph: &ComputationalGraph, member: &Member) -> Result<()> {
    let ok = match member {
        Member::Edge(e) => graph.contains_edge(e),
        Member::Node(n) => graph.contains_node(n) && *n != NodeId::Logits,
        Member::Neuron { node, dim } => graph.contains_node(node) && *node != NodeId::Logits && *dim < graph.d_model(),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidMember(format!("{member} is not part of the host graph")))
    }
}

/// Where a circuit came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub task_id: String,
    pub method: String,
    pub threshold: Option<f64>,
    pub model_config_hash: String,
    pub channel_mode: ChannelMode,
}

impl Provenance {
    pub fn new(task_id: impl Into<String>, method: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            method: method.into(),
            threshold: None,
            model_config_hash: String::new(),
            channel_mode: ChannelMode::Split,
        }
    }
}

/// `C = (V_C, E_C)` at one granularity, with the signed score of each member.
#[derive(Clone, Debug, PartialEq)]
pub struct Circuit {
    pub granularity: Granularity,
    pub members: BTreeMap<Member, f64>,
    pub provenance: Provenance,
}

impl Circuit {
    pub fn empty(granularity: Granularity, provenance: Provenance) -> Self {
        Self { granularity, members: BTreeMap::new(), provenance }
    }

    /// The whole graph at `granularity`, all scores zero.
    pub fn full(graph: &ComputationalGraph, granularity: Granularity, provenance: Provenance) -> Self {
        let members = all_members(graph, granularity).into_iter().map(|m| (m, 0.0)).collect();
        Self { granularity, members, provenance }
    }

    pub fn from_members(
        granularity: Granularity,
        members: impl IntoIterator<Item = (Member, f64)>,
        provenance: Provenance,
    ) -> Result<Self> {
        let members: BTreeMap<Member, f64> = members.into_iter().collect();
        if let Some(m) = members.keys().find(|m| m.granularity() != granularity) {
            return Err(Error::GranularityMismatch {
                expected: granularity.to_string(),
                found: m.granularity().to_string(),
            });
        }
        if members.values().any(|s| !s.is_finite()) {
            return Err(Error::InvalidMember("non-finite score".into()));
        }
        Ok(Self { granularity, members, provenance })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, member: &Member) -> bool {
        self.members.contains_key(member)
    }

    pub fn member_set(&self) -> BTreeSet<Member> {
        self.members.keys().copied().collect()
    }

    pub fn validate(&self, graph: &ComputationalGraph) -> Result<()> {
        for m in self.members.keys() {
            if m.granularity() != self.granularity {
                return Err(Error::GranularityMismatch {
                    expected: self.granularity.to_string(),
                    found: m.granularity().to_string(),
                });
            }
            check_member(graph, m)?;
        }
        Ok(())
    }

    /// Nodes touched by the circuit's members.
    pub fn nodes(&self) -> BTreeSet<NodeId> {
        let mut out = BTreeSet::new();
        for m in self.members.keys() {
            match m {
                Member::Edge(e) => {
                    out.insert(e.src);
                    out.insert(e.dst);
                }
                Member::Node(n) | Member::Neuron { node: n, .. } => {
                    out.insert(*n);
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&CircuitDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CircuitDocument = serde_json::from_str(text)?;
        doc.into_circuit()
    }
}

/// Removes edges that do not lie on an input-to-logits path inside the
/// circuit. Such edges cannot change the logits under edge patching: a
/// source unreachable from the input only ever sees corrupted inputs, and a
/// target that cannot reach the logits only feeds corrupted readers.
pub fn prune(circuit: &Circuit) -> Result<Circuit> {
    if circuit.granularity != Granularity::Edge {
        return Err(Error::GranularityMismatch {
            expected: Granularity::Edge.to_string(),
            found: circuit.granularity.to_string(),
        });
    }
    let edges: Vec<EdgeId> = circuit
        .members
        .keys()
        .filter_map(|m| match m {
            Member::Edge(e) => Some(*e),
            _ => None,
        })
        .collect();

    // Edges are ordered by target, so one forward sweep settles reachability
    // from the input and one backward sweep settles reachability of the logits.
    let mut from_input: BTreeSet<NodeId> = BTreeSet::from([NodeId::Input]);
    let mut by_src = edges.clone();
    by_src.sort_by_key(|e| (e.src, e.dst, e.channel));
    for e in &by_src {
        if from_input.contains(&e.src) {
            from_input.insert(e.dst);
        }
    }
    let mut to_logits: BTreeSet<NodeId> = BTreeSet::from([NodeId::Logits]);
    for e in edges.iter().rev() {
        if to_logits.contains(&e.dst) {
            to_logits.insert(e.src);
        }
    }
    let kept = circuit
        .members
        .iter()
        .filter(|(m, _)| match m {
            Member::Edge(e) => from_input.contains(&e.src) && to_logits.contains(&e.dst),
            _ => false,
        })
        .map(|(m, s)| (*m, *s));
    Ok(Circuit { granularity: Granularity::Edge, members: kept.collect(), provenance: circuit.provenance.clone() })
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MemberRecord {
    Edge { src: NodeId, dst: NodeId, channel: Channel, score: f64 },
    Neuron { node: NodeId, dim: usize, score: f64 },
    Node { node: NodeId, score: f64 },
}

#[derive(Serialize, Deserialize)]
struct CircuitDocument {
    version: u32,
    granularity: Granularity,
    model_config_hash: String,
    task_id: String,
    method: String,
    threshold: Option<f64>,
    #[serde(default)]
    channel_mode: ChannelMode,
    members: Vec<MemberRecord>,
}

impl From<&Circuit> for CircuitDocument {
    fn from(c: &Circuit) -> Self {
        let members = c
            .members
            .iter()
            .map(|(m, &score)| match *m {
                Member::Edge(e) => MemberRecord::Edge { src: e.src, dst: e.dst, channel: e.channel, score },
                Member::Node(node) => MemberRecord::Node { node, score },
                Member::Neuron { node, dim } => MemberRecord::Neuron { node, dim, score },
            })
            .collect();
        CircuitDocument {
            version: CIRCUIT_SCHEMA_VERSION,
            granularity: c.granularity,
            model_config_hash: c.provenance.model_config_hash.clone(),
            task_id: c.provenance.task_id.clone(),
            method: c.provenance.method.clone(),
            threshold: c.provenance.threshold,
            channel_mode: c.provenance.channel_mode,
            members,
        }
    }
}

impl CircuitDocument {
    fn into_circuit(self) -> Result<Circuit> {
        if self.version != CIRCUIT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion { found: self.version, expected: CIRCUIT_SCHEMA_VERSION });
        }
        let mut members = BTreeMap::new();
        for record in self.members {
            let (member, score) = match record {
                MemberRecord::Edge { src, dst, channel, score } => {
                    let e = EdgeId::new(src, dst, channel);
                    e.check(Some(self.channel_mode))?;
                    (Member::Edge(e), score)
                }
                MemberRecord::Node { node, score } => {
                    if node == NodeId::Logits {
                        return Err(Error::InvalidMember("the logits node has no output".into()));
                    }
                    (Member::Node(node), score)
                }
                MemberRecord::Neuron { node, dim, score } => {
                    if node == NodeId::Logits {
                        return Err(Error::InvalidMember("the logits node has no output".into()));
                    }
                    (Member::Neuron { node, dim }, score)
                }
            };
            if members.insert(member, score).is_some() {
                return Err(Error::CircuitFormat(format!("duplicate member {member}")));
            }
        }
        let provenance = Provenance {
            task_id: self.task_id,
            method: self.method,
            threshold: self.threshold,
            model_config_hash: self.model_config_hash,
            channel_mode: self.channel_mode,
        };
        Circuit::from_members(self.granularity, members, provenance)
    }
}
