//! Neutral computation-graph interchange format (`.tligraph.json`).
//!
//! Exporters map framework-specific op names onto [`OpTag`] before writing;
//! anything they cannot classify becomes `opaque`. Loading validates the
//! document and caches a deterministic topological order.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("graph contains a cycle through nodes {0:?}")]
    Cycle(Vec<String>),
    #[error("dangling reference: {0}")]
    DanglingRef(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpTag {
    Conv,
    Linear,
    BatchNorm,
    LayerNorm,
    Activation,
    Add,
    Mul,
    Concat,
    Pool,
    Reshape,
    Input,
    Output,
    Opaque,
}

impl OpTag {
    pub const ALL: [OpTag; 13] = [
        OpTag::Conv,
        OpTag::Linear,
        OpTag::BatchNorm,
        OpTag::LayerNorm,
        OpTag::Activation,
        OpTag::Add,
        OpTag::Mul,
        OpTag::Concat,
        OpTag::Pool,
        OpTag::Reshape,
        OpTag::Input,
        OpTag::Output,
        OpTag::Opaque,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpTag::Conv => "conv",
            OpTag::Linear => "linear",
            OpTag::BatchNorm => "batchnorm",
            OpTag::LayerNorm => "layernorm",
            OpTag::Activation => "activation",
            OpTag::Add => "add",
            OpTag::Mul => "mul",
            OpTag::Concat => "concat",
            OpTag::Pool => "pool",
            OpTag::Reshape => "reshape",
            OpTag::Input => "input",
            OpTag::Output => "output",
            OpTag::Opaque => "opaque",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }

    /// Merge ops close a submodule.
    pub fn is_merge(self) -> bool {
        matches!(self, OpTag::Add | OpTag::Mul | OpTag::Concat)
    }

    pub fn is_norm(self) -> bool {
        matches!(self, OpTag::BatchNorm | OpTag::LayerNorm)
    }
}

impl fmt::Display for OpTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Operation kind of a node. `activation` is set iff `tag` is [`OpTag::Activation`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OpKind {
    pub tag: OpTag,
    pub activation: Option<String>,
}

impl OpKind {
    pub fn new(tag: OpTag) -> Self {
        Self {
            tag,
            activation: None,
        }
    }

    pub fn activation(name: impl Into<String>) -> Self {
        Self {
            tag: OpTag::Activation,
            activation: Some(name.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    Scale,
    Shift,
    RunningStat,
}

impl ParamRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Scale => "scale",
            ParamRole::Shift => "shift",
            ParamRole::RunningStat => "running_stat",
        }
    }

    /// Roles that only normalization layers carry.
    pub fn is_norm_role(self) -> bool {
        matches!(
            self,
            ParamRole::Scale | ParamRole::Shift | ParamRole::RunningStat
        )
    }
}

/// Informational node attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Ints(Vec<i64>),
    Number(f64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRef {
    pub name: String,
    pub role: ParamRole,
    /// Declared tensor shape. Optional; a companion tensor store is authoritative.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub kind: OpKind,
    pub inputs: Vec<String>,
    pub params: Vec<ParamRef>,
    pub attrs: BTreeMap<String, AttrValue>,
}

/// Where a parameter lives in the graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    /// Index into [`GraphDoc::nodes`].
    pub node: usize,
    pub role: ParamRole,
    /// Position within the owning node's parameter list.
    pub slot: usize,
}

/// A validated, acyclic computation graph. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDoc {
    name: String,
    nodes: Vec<Node>,
    outputs: Vec<String>,
    id_index: HashMap<String, usize>,
    param_index: BTreeMap<String, ParamEntry>,
    topo: Vec<usize>,
}

// Wire structs. Kept separate so that validation is the only way to obtain a GraphDoc.
#[derive(Serialize, Deserialize)]
struct WireGraph {
    name: String,
    nodes: Vec<WireNode>,
    outputs: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct WireNode {
    id: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation: Option<String>,
    inputs: Vec<String>,
    #[serde(default)]
    params: Vec<ParamRef>,
    #[serde(default)]
    attrs: BTreeMap<String, AttrValue>,
}

impl GraphDoc {
    /// Validates `nodes` and builds the graph.
    pub fn new(
        name: impl Into<String>,
        nodes: Vec<Node>,
        outputs: Vec<String>,
    ) -> Result<Self, GraphError> {
        let mut id_index = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if node.id.is_empty() {
                return Err(GraphError::Schema(format!("node #{i}: empty `id`")));
            }
            if id_index.insert(node.id.clone(), i).is_some() {
                return Err(GraphError::Schema(format!("duplicate node id `{}`", node.id)));
            }
            let is_act = node.kind.tag == OpTag::Activation;
            match (&node.kind.activation, is_act) {
                (None, true) => {
                    return Err(GraphError::Schema(format!(
                        "node `{}`: field `activation` is required for kind \"activation\"",
                        node.id
                    )))
                }
                (Some(_), false) => {
                    return Err(GraphError::Schema(format!(
                        "node `{}`: field `activation` is only allowed on kind \"activation\"",
                        node.id
                    )))
                }
                _ => {}
            }
        }
        if !nodes.iter().any(|n| n.kind.tag == OpTag::Input) {
            return Err(GraphError::Schema("graph has no input node".into()));
        }
        if outputs.is_empty() {
            return Err(GraphError::Schema("field `outputs` is empty".into()));
        }

        let mut param_index = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate() {
            for input in &node.inputs {
                if input == &node.id {
                    return Err(GraphError::Cycle(vec![node.id.clone()]));
                }
                if !id_index.contains_key(input) {
                    return Err(GraphError::DanglingRef(format!(
                        "node `{}` has input `{input}` which does not exist",
                        node.id
                    )));
                }
            }
            for (slot, p) in node.params.iter().enumerate() {
                if p.name.is_empty() {
                    return Err(GraphError::Schema(format!(
                        "node `{}`: parameter with empty `name`",
                        node.id
                    )));
                }
                if let Some(shape) = &p.shape {
                    if shape.is_empty() || shape.contains(&0) {
                        return Err(GraphError::Schema(format!(
                            "parameter `{}`: `shape` must be non-empty with positive dims",
                            p.name
                        )));
                    }
                }
                let entry = ParamEntry {
                    node: i,
                    role: p.role,
                    slot,
                };
                if param_index.insert(p.name.clone(), entry).is_some() {
                    return Err(GraphError::Schema(format!(
                        "parameter `{}` is declared more than once",
                        p.name
                    )));
                }
            }
        }
        for out in &outputs {
            if !id_index.contains_key(out) {
                return Err(GraphError::DanglingRef(format!(
                    "output `{out}` does not exist"
                )));
            }
        }

        let topo = kahn(&nodes, &id_index)?;
        Ok(Self {
            name: name.into(),
            nodes,
            outputs,
            id_index,
            param_index,
            topo,
        })
    }

    /// Parses and validates an interchange JSON document.
    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let wire: WireGraph =
            serde_json::from_str(text).map_err(|e| GraphError::Schema(e.to_string()))?;
        let mut nodes = Vec::with_capacity(wire.nodes.len());
        for wn in wire.nodes {
            let tag = OpTag::parse(&wn.kind).ok_or_else(|| {
                GraphError::Schema(format!(
                    "node `{}`: field `kind` has unknown value \"{}\"",
                    wn.id, wn.kind
                ))
            })?;
            nodes.push(Node {
                id: wn.id,
                kind: OpKind {
                    tag,
                    activation: wn.activation,
                },
                inputs: wn.inputs,
                params: wn.params,
                attrs: wn.attrs,
            });
        }
        Self::new(wire.name, nodes, wire.outputs)
    }

    pub fn to_json(&self) -> String {
        let wire = WireGraph {
            name: self.name.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| WireNode {
                    id: n.id.clone(),
                    kind: n.kind.tag.as_str().to_string(),
                    activation: n.kind.activation.clone(),
                    inputs: n.inputs.clone(),
                    params: n.params.clone(),
                    attrs: n.attrs.clone(),
                })
                .collect(),
            outputs: self.outputs.clone(),
        };
        serde_json::to_string_pretty(&wire).expect("graph serialization is infallible")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn outputs(&self) -> &[String] {
        &self.outputs
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.id_index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.id_index.get(id).copied()
    }

    /// Parameter name → owner, role and slot; ordered by name.
    pub fn param_index(&self) -> &BTreeMap<String, ParamEntry> {
        &self.param_index
    }

    pub fn param_count(&self) -> usize {
        self.param_index.len()
    }

    /// Node indices in topological order; ties broken by ascending node id.
    pub fn topo_indices(&self) -> &[usize] {
        &self.topo
    }

    pub fn topo_order(&self) -> Vec<&str> {
        self.topo.iter().map(|&i| self.nodes[i].id.as_str()).collect()
    }

    pub(crate) fn input_indices(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.nodes[node].inputs.iter().map(|id| self.id_index[id])
    }
}

fn kahn(nodes: &[Node], id_index: &HashMap<String, usize>) -> Result<Vec<usize>, GraphError> {
    let mut indegree = vec![0usize; nodes.len()];
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (i, node) in nodes.iter().enumerate() {
        for input in &node.inputs {
            let src = id_index[input];
            indegree[i] += 1;
            consumers[src].push(i);
        }
    }
    let mut ready: BinaryHeap<Reverse<(&str, usize)>> = nodes
        .iter()
        .enumerate()
        .filter(|(i, _)| indegree[*i] == 0)
        .map(|(i, n)| Reverse((n.id.as_str(), i)))
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(Reverse((_, i))) = ready.pop() {
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(Reverse((nodes[c].id.as_str(), c)));
            }
        }
    }
    if order.len() != nodes.len() {
        let mut stuck: Vec<String> = nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| indegree[*i] > 0)
            .map(|(_, n)| n.id.clone())
            .collect();
        stuck.sort();
        return Err(GraphError::Cycle(stuck));
    }
    Ok(order)
}
