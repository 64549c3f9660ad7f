//! Computational graph of a transformer: input, attention heads, MLPs and
//! logits as nodes; every direct residual-stream path as an edge.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeId {
    Input,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
    Logits,
}

impl NodeId {
    fn key(&self) -> (u8, usize, u8, usize) {
        match *self {
            NodeId::Input => (0, 0, 0, 0),
            NodeId::Head { layer, head } => (1, layer, 0, head),
            NodeId::Mlp { layer } => (1, layer, 1, 0),
            NodeId::Logits => (2, 0, 0, 0),
        }
    }

    pub fn kind(&self) -> NodeKind {
        match self {
            NodeId::Input => NodeKind::Input,
            NodeId::Head { .. } => NodeKind::Attention,
            NodeId::Mlp { .. } => NodeKind::Mlp,
            NodeId::Logits => NodeKind::Logits,
        }
    }

    /// Whether a direct edge `self → other` exists: `self` comes strictly
    /// earlier in the node order and the two are not heads of one layer.
    pub fn precedes(&self, other: &NodeId) -> bool {
        if let (NodeId::Head { layer: a, .. }, NodeId::Head { layer: b, .. }) = (self, other) {
            if a == b {
                return false;
            }
        }
        self < other
    }

    /// Layer position used for depth profiles: `0` for the input node,
    /// `layer` for heads and MLPs, `n_layers` for the logits.
    pub fn depth(&self, n_layers: usize) -> usize {
        match *self {
            NodeId::Input => 0,
            NodeId::Head { layer, .. } | NodeId::Mlp { layer } => layer,
            NodeId::Logits => n_layers,
        }
    }
}

impl Ord for NodeId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

impl PartialOrd for NodeId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Input => f.write_str("input"),
            NodeId::Head { layer, head } => write!(f, "a{layer}.h{head}"),
            NodeId::Mlp { layer } => write!(f, "m{layer}"),
            NodeId::Logits => f.write_str("logits"),
        }
    }
}

impl FromStr for NodeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::CircuitFormat(format!("unknown node {s:?}"));
        match s {
            "input" => Ok(NodeId::Input),
            "logits" => Ok(NodeId::Logits),
            _ => {
                if let Some(rest) = s.strip_prefix('a') {
                    let (l, h) = rest.split_once(".h").ok_or_else(bad)?;
                    Ok(NodeId::Head { layer: l.parse().map_err(|_| bad())?, head: h.parse().map_err(|_| bad())? })
                } else if let Some(rest) = s.strip_prefix('m') {
                    Ok(NodeId::Mlp { layer: rest.parse().map_err(|_| bad())? })
                } else {
                    Err(bad())
                }
            }
        }
    }
}

impl Serialize for NodeId {
    fn serialize<Se: Serializer>(&self, s: Se) -> std::result::Result<Se::Ok, Se::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Input,
    Attention,
    Mlp,
    Logits,
}

impl NodeKind {
    pub const ALL: [NodeKind; 4] = [NodeKind::Input, NodeKind::Attention, NodeKind::Mlp, NodeKind::Logits];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Which input of the target an edge feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Q,
    K,
    V,
    Direct,
}

impl Channel {
    /// Model-side channel index; `None` for an undivided head input.
    pub fn model_index(self, target: &NodeId) -> Option<usize> {
        match (self, target) {
            (Channel::Q, _) => Some(0),
            (Channel::K, _) => Some(1),
            (Channel::V, _) => Some(2),
            (Channel::Direct, NodeId::Head { .. }) => None,
            (Channel::Direct, _) => Some(0),
        }
    }
}

/// Whether edges into heads are split into query/key/value inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    #[default]
    Split,
    Unified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeId {
    pub src: NodeId,
    pub dst: NodeId,
    pub channel: Channel,
}

impl EdgeId {
    pub fn new(src: NodeId, dst: NodeId, channel: Channel) -> Self {
        Self { src, dst, channel }
    }

    /// Structural validity independent of model size.
    pub fn check(&self, mode: Option<ChannelMode>) -> Result<()> {
        if !self.src.precedes(&self.dst) {
            return Err(Error::InvalidMember(format!("{self}: source does not precede target")));
        }
        let head_target = matches!(self.dst, NodeId::Head { .. });
        let ok = match (self.channel, head_target, mode) {
            (Channel::Direct, false, _) => true,
            (Channel::Direct, true, Some(ChannelMode::Unified) | None) => true,
            (Channel::Q | Channel::K | Channel::V, true, Some(ChannelMode::Split) | None) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidMember(format!("{self}: channel not admissible for target")))
        }
    }
}

impl Ord for EdgeId {
    /// Target first, then source, then channel: the order edges are listed
    /// in a graph.
    fn cmp(&self, other: &Self) -> Ordering {
        (self.dst, self.src, self.channel).cmp(&(other.dst, other.src, other.channel))
    }
}

impl PartialOrd for EdgeId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.channel {
            Channel::Direct => write!(f, "{}->{}", self.src, self.dst),
            c => write!(f, "{}->{}<{}>", self.src, self.dst, format!("{c:?}").to_lowercase()),
        }
    }
}

/// `G = (V, E)` for one architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComputationalGraph {
    n_layers: usize,
    n_heads: usize,
    d_model: usize,
    channel_mode: ChannelMode,
    nodes: Vec<NodeId>,
    edges: Vec<EdgeId>,
}

impl ComputationalGraph {
    pub fn new(config: &ModelConfig, channel_mode: ChannelMode) -> Result<Self> {
        config.validate()?;
        Ok(Self::with_shape(config.n_layers, config.n_heads, config.d_model, channel_mode))
    }

    pub fn with_shape(n_layers: usize, n_heads: usize, d_model: usize, channel_mode: ChannelMode) -> Self {
        let mut nodes = vec![NodeId::Input];
        for layer in 0..n_layers {
            nodes.extend((0..n_heads).map(|head| NodeId::Head { layer, head }));
            nodes.push(NodeId::Mlp { layer });
        }
        nodes.push(NodeId::Logits);

        let mut edges = Vec::new();
        for dst in &nodes {
            let channels: &[Channel] = match (dst, channel_mode) {
                (NodeId::Head { .. }, ChannelMode::Split) => &[Channel::Q, Channel::K, Channel::V],
                _ => &[Channel::Direct],
            };
            for src in nodes.iter().filter(|s| s.precedes(dst)) {
                for &channel in channels {
                    edges.push(EdgeId::new(*src, *dst, channel));
                }
            }
        }
        debug_assert!(edges.windows(2).all(|w| w[0] < w[1]));
        Self { n_layers, n_heads, d_model, channel_mode, nodes, edges }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn channel_mode(&self) -> ChannelMode {
        self.channel_mode
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn edges(&self) -> &[EdgeId] {
        &self.edges
    }

    /// Nodes that write to the residual stream (all but the logits).
    pub fn producers(&self) -> &[NodeId] {
        &self.nodes[..self.nodes.len() - 1]
    }

    /// Position of a node in [`ComputationalGraph::nodes`], which is also
    /// its index on the model side.
    pub fn node_index(&self, node: &NodeId) -> Option<usize> {
        let a = self.n_heads + 1;
        match *node {
            NodeId::Input => Some(0),
            NodeId::Head { layer, head } if layer < self.n_layers && head < self.n_heads => Some(1 + layer * a + head),
            NodeId::Mlp { layer } if layer < self.n_layers => Some(1 + layer * a + self.n_heads),
            NodeId::Logits => Some(self.nodes.len() - 1),
            _ => None,
        }
    }

    pub fn contains_node(&self, node: &NodeId) -> bool {
        self.node_index(node).is_some()
    }

    pub fn edge_index(&self, edge: &EdgeId) -> Option<usize> {
        self.edges.binary_search(edge).ok()
    }

    pub fn contains_edge(&self, edge: &EdgeId) -> bool {
        self.edge_index(edge).is_some()
    }
}

pub fn build_graph(config: &ModelConfig, channel_mode: ChannelMode) -> Result<ComputationalGraph> {
    ComputationalGraph::new(config, channel_mode)
}
