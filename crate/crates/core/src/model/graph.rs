//! Decomposed-residual-stream view of the transformer.
//!
//! Topological order: `input < a0.* < m0 < a1.* < m1 < ... < logits`. A head
//! reads every earlier node through three channels (q, k, v); heads of the
//! same layer never feed each other.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{ModelConfig, ModelError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeId {
    Input,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
    Logits,
}

impl NodeId {
    fn order_key(&self) -> (u8, usize, usize) {
        match *self {
            NodeId::Input => (0, 0, 0),
            NodeId::Head { layer, head } => (1, layer, head),
            NodeId::Mlp { layer } => (1, layer, usize::MAX),
            NodeId::Logits => (2, 0, 0),
        }
    }

    pub fn is_head(&self) -> bool {
        matches!(self, NodeId::Head { .. })
    }

    /// Whether `self` may feed `dst` directly.
    pub fn precedes(&self, dst: &NodeId) -> bool {
        match (*self, *dst) {
            (NodeId::Logits, _) | (_, NodeId::Input) => false,
            (NodeId::Input, _) => true,
            (_, NodeId::Logits) => true,
            (NodeId::Head { layer: a, .. }, NodeId::Head { layer: b, .. }) => a < b,
            (NodeId::Head { layer: a, .. }, NodeId::Mlp { layer: b }) => a <= b,
            (NodeId::Mlp { layer: a }, NodeId::Head { layer: b, .. }) => a < b,
            (NodeId::Mlp { layer: a }, NodeId::Mlp { layer: b }) => a < b,
        }
    }
}

impl Ord for NodeId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.order_key().cmp(&other.order_key())
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
            NodeId::Input => write!(f, "input"),
            NodeId::Head { layer, head } => write!(f, "a{layer}.h{head}"),
            NodeId::Mlp { layer } => write!(f, "m{layer}"),
            NodeId::Logits => write!(f, "logits"),
        }
    }
}

impl FromStr for NodeId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || ModelError::ParseNode(s.to_string());
        let num = |t: &str| -> Result<usize> {
            if t.is_empty() || (t.len() > 1 && t.starts_with('0')) || !t.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            t.parse().map_err(|_| bad())
        };
        match s {
            "input" => Ok(NodeId::Input),
            "logits" => Ok(NodeId::Logits),
            _ => {
                if let Some(rest) = s.strip_prefix('a') {
                    let (l, h) = rest.split_once(".h").ok_or_else(bad)?;
                    Ok(NodeId::Head { layer: num(l)?, head: num(h)? })
                } else if let Some(rest) = s.strip_prefix('m') {
                    Ok(NodeId::Mlp { layer: num(rest)? })
                } else {
                    Err(bad())
                }
            }
        }
    }
}

/// Which projection of a head an edge feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Q,
    K,
    V,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Q, Channel::K, Channel::V];

    fn letter(self) -> char {
        match self {
            Channel::Q => 'q',
            Channel::K => 'k',
            Channel::V => 'v',
        }
    }
}

/// A destination read point: a node plus, for heads, the projection channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InputSlot {
    pub node: NodeId,
    pub channel: Option<Channel>,
}

impl fmt::Display for InputSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.channel {
            Some(c) => write!(f, "{}<{}>", self.node, c.letter()),
            None => write!(f, "{}", self.node),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EdgeId {
    pub src: NodeId,
    pub dst: NodeId,
    pub channel: Option<Channel>,
}

impl EdgeId {
    pub fn new(src: NodeId, dst: NodeId, channel: Option<Channel>) -> Result<Self> {
        let e = Self { src, dst, channel };
        if !src.precedes(&dst) || dst.is_head() != channel.is_some() {
            return Err(ModelError::ParseEdge(e.to_string()));
        }
        Ok(e)
    }

    pub fn slot(&self) -> InputSlot {
        InputSlot { node: self.dst, channel: self.channel }
    }
}

impl Ord for EdgeId {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.dst, self.channel, self.src).cmp(&(other.dst, other.channel, other.src))
    }
}

impl PartialOrd for EdgeId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.src, self.slot())
    }
}

impl FromStr for EdgeId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || ModelError::ParseEdge(s.to_string());
        let (src, rest) = s.split_once("->").ok_or_else(bad)?;
        let (dst, channel) = match rest.strip_suffix('>') {
            Some(inner) => {
                let (d, c) = inner.split_once('<').ok_or_else(bad)?;
                let c = match c {
                    "q" => Channel::Q,
                    "k" => Channel::K,
                    "v" => Channel::V,
                    _ => return Err(bad()),
                };
                (d, Some(c))
            }
            None => (rest, None),
        };
        let src: NodeId = src.parse().map_err(|_| bad())?;
        let dst: NodeId = dst.parse().map_err(|_| bad())?;
        EdgeId::new(src, dst, channel).map_err(|_| bad())
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(NodeId);
string_serde!(EdgeId);

/// Nodes and edges of a model in canonical order.
#[derive(Clone, Debug)]
pub struct ComputationGraph {
    config: ModelConfig,
    nodes: Vec<NodeId>,
    edges: Vec<EdgeId>,
    index: HashMap<EdgeId, usize>,
    slots: Vec<(InputSlot, std::ops::Range<usize>)>,
}

impl ComputationGraph {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut nodes = vec![NodeId::Input];
        for layer in 0..config.n_layers {
            nodes.extend((0..config.n_heads).map(|head| NodeId::Head { layer, head }));
            nodes.push(NodeId::Mlp { layer });
        }
        nodes.push(NodeId::Logits);

        let mut edges = Vec::new();
        let mut slots = Vec::new();
        for &dst in &nodes[1..] {
            let channels: Vec<Option<Channel>> =
                if dst.is_head() { Channel::ALL.iter().copied().map(Some).collect() } else { vec![None] };
            for channel in channels {
                let start = edges.len();
                for &src in nodes.iter().filter(|s| s.precedes(&dst)) {
                    edges.push(EdgeId { src, dst, channel });
                }
                slots.push((InputSlot { node: dst, channel }, start..edges.len()));
            }
        }
        let index = edges.iter().enumerate().map(|(i, e)| (*e, i)).collect();
        Ok(Self { config: config.clone(), nodes, edges, index, slots })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn edges(&self) -> &[EdgeId] {
        &self.edges
    }

    pub fn edge_index(&self, e: &EdgeId) -> Option<usize> {
        self.index.get(e).copied()
    }

    pub fn contains(&self, e: &EdgeId) -> bool {
        self.index.contains_key(e)
    }

    /// Every destination read point with the range of its incoming edges.
    pub fn slots(&self) -> &[(InputSlot, std::ops::Range<usize>)] {
        &self.slots
    }

    /// Sources feeding `dst`, in topological order.
    pub fn sources(&self, dst: &NodeId) -> Vec<NodeId> {
        self.nodes.iter().copied().filter(|s| s.precedes(dst)).collect()
    }

    /// Predicted edge count from the closed-form sum over destinations.
    pub fn expected_edge_count(config: &ModelConfig) -> usize {
        let (l, h) = (config.n_layers, config.n_heads);
        let per_layer = |layer: usize| {
            let before = 1 + layer * (h + 1);
            3 * h * before + before + h
        };
        (0..l).map(per_layer).sum::<usize>() + 1 + l * (h + 1)
    }
}
