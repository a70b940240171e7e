//! Small hand-built architectures and graph edits.
//!
//! Used by the test suites and by `tli fixtures`, which writes the toy zoo to
//! disk. Every parameter carries a declared shape, so the graphs can be
//! scored without a tensor store.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{GraphDoc, Node, OpKind, OpTag, ParamRef, ParamRole};
use crate::store::TensorMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GraphBuilder {
    name: String,
    nodes: Vec<Node>,
    outputs: Vec<String>,
}

impl GraphBuilder {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            nodes: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn node(&mut self, id: &str, kind: OpKind, inputs: &[&str], params: Vec<ParamRef>) -> &mut Self {
        self.nodes.push(Node {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            params,
            attrs: BTreeMap::new(),
        });
        self
    }

    pub fn input(&mut self, id: &str) -> &mut Self {
        self.node(id, OpKind::new(OpTag::Input), &[], vec![])
    }

    pub fn conv(&mut self, id: &str, input: &str, weight: &[usize], bias: bool) -> &mut Self {
        let params = weight_bias(id, weight, bias);
        self.node(id, OpKind::new(OpTag::Conv), &[input], params)
    }

    pub fn linear(&mut self, id: &str, input: &str, weight: &[usize], bias: bool) -> &mut Self {
        let params = weight_bias(id, weight, bias);
        self.node(id, OpKind::new(OpTag::Linear), &[input], params)
    }

    /// Scale, shift, running mean and running variance, in that slot order.
    pub fn batchnorm(&mut self, id: &str, input: &str, channels: usize) -> &mut Self {
        let params = vec![
            param(&format!("{id}.weight"), ParamRole::Scale, &[channels]),
            param(&format!("{id}.bias"), ParamRole::Shift, &[channels]),
            param(&format!("{id}.running_mean"), ParamRole::RunningStat, &[channels]),
            param(&format!("{id}.running_var"), ParamRole::RunningStat, &[channels]),
        ];
        self.node(id, OpKind::new(OpTag::BatchNorm), &[input], params)
    }

    pub fn layernorm(&mut self, id: &str, input: &str, dim: usize) -> &mut Self {
        let params = vec![
            param(&format!("{id}.weight"), ParamRole::Scale, &[dim]),
            param(&format!("{id}.bias"), ParamRole::Shift, &[dim]),
        ];
        self.node(id, OpKind::new(OpTag::LayerNorm), &[input], params)
    }

    pub fn act(&mut self, id: &str, input: &str, label: &str) -> &mut Self {
        self.node(id, OpKind::activation(label), &[input], vec![])
    }

    pub fn pool(&mut self, id: &str, input: &str) -> &mut Self {
        self.node(id, OpKind::new(OpTag::Pool), &[input], vec![])
    }

    pub fn reshape(&mut self, id: &str, input: &str) -> &mut Self {
        self.node(id, OpKind::new(OpTag::Reshape), &[input], vec![])
    }

    pub fn opaque(&mut self, id: &str, inputs: &[&str]) -> &mut Self {
        self.node(id, OpKind::new(OpTag::Opaque), inputs, vec![])
    }

    pub fn merge(&mut self, id: &str, tag: OpTag, inputs: &[&str]) -> &mut Self {
        assert!(tag.is_merge(), "{tag} is not a merge op");
        self.node(id, OpKind::new(tag), inputs, vec![])
    }

    pub fn output(&mut self, id: &str, inputs: &[&str]) -> &mut Self {
        self.node(id, OpKind::new(OpTag::Output), inputs, vec![]);
        self.outputs.push(id.into());
        self
    }

    pub fn build(&self) -> GraphDoc {
        GraphDoc::new(self.name.clone(), self.nodes.clone(), self.outputs.clone())
            .expect("builder produced an invalid graph")
    }
}

pub fn param(name: &str, role: ParamRole, shape: &[usize]) -> ParamRef {
    ParamRef {
        name: name.into(),
        role,
        shape: Some(shape.to_vec()),
    }
}

fn weight_bias(id: &str, weight: &[usize], bias: bool) -> Vec<ParamRef> {
    let mut params = vec![param(&format!("{id}.weight"), ParamRole::Weight, weight)];
    if bias {
        params.push(param(&format!("{id}.bias"), ParamRole::Bias, &[weight[0]]));
    }
    params
}

/// conv → relu → conv → relu → pool → linear.
pub fn chain() -> GraphDoc {
    let mut b = GraphBuilder::new("chain");
    b.input("in")
        .conv("conv1", "in", &[8, 3, 3, 3], true)
        .act("act1", "conv1", "relu")
        .conv("conv2", "act1", &[16, 8, 3, 3], true)
        .act("act2", "conv2", "relu")
        .pool("pool", "act2")
        .linear("fc", "pool", &[10, 16], true)
        .output("out", &["fc"]);
    b.build()
}

/// Stem with batch norm, one residual block with a projection shortcut, then
/// pool and a linear head. Every parameterless layer precedes a parameter in
/// its submodule.
pub fn residual() -> GraphDoc {
    let mut b = GraphBuilder::new("residual");
    b.input("in")
        .conv("stem", "in", &[16, 3, 3, 3], false)
        .batchnorm("stem_bn", "stem", 16)
        .act("stem_act", "stem_bn", "relu")
        .conv("conv_a", "stem_act", &[16, 16, 3, 3], false)
        .act("act_a", "conv_a", "relu")
        .conv("conv_b", "act_a", &[16, 16, 3, 3], true)
        .conv("conv_sc", "stem_act", &[16, 16, 1, 1], false)
        .merge("add", OpTag::Add, &["conv_b", "conv_sc"])
        .pool("pool", "add")
        .linear("fc", "pool", &[10, 16], true)
        .output("out", &["fc"]);
    b.build()
}

/// Inception-style block: three branches joined by a concat.
pub fn concat_branches() -> GraphDoc {
    let mut b = GraphBuilder::new("concat");
    b.input("in")
        .conv("stem", "in", &[8, 3, 3, 3], true)
        .conv("b1", "stem", &[4, 8, 1, 1], false)
        .conv("b2", "stem", &[4, 8, 3, 3], false)
        .act("b2_act", "b2", "silu")
        .pool("b3_pool", "stem")
        .conv("b3", "b3_pool", &[4, 8, 1, 1], false)
        .merge("cat", OpTag::Concat, &["b1", "b2_act", "b3"])
        .conv("head", "cat", &[16, 12, 1, 1], true)
        .output("out", &["head"]);
    b.build()
}

/// Batch norm and layer norm layers.
pub fn norm_net() -> GraphDoc {
    let mut b = GraphBuilder::new("norm");
    b.input("in")
        .conv("conv1", "in", &[8, 3, 3, 3], false)
        .batchnorm("bn1", "conv1", 8)
        .act("act1", "bn1", "relu")
        .conv("conv2", "act1", &[8, 8, 3, 3], false)
        .batchnorm("bn2", "conv2", 8)
        .act("act2", "bn2", "relu")
        .reshape("flat", "act2")
        .layernorm("ln", "flat", 8)
        .linear("fc", "ln", &[10, 8], true)
        .output("out", &["fc"]);
    b.build()
}

/// Ops the exporter could not classify, plus a sigmoid gate merged by `mul`.
pub fn opaque_net() -> GraphDoc {
    let mut b = GraphBuilder::new("opaque");
    b.input("in")
        .conv("conv", "in", &[8, 3, 3, 3], true)
        .node(
            "mystery",
            OpKind::new(OpTag::Opaque),
            &["conv"],
            vec![param("mystery.weight", ParamRole::Weight, &[8])],
        )
        .act("gate", "conv", "sigmoid")
        .merge("mul", OpTag::Mul, &["mystery", "gate"])
        .opaque("blob", &["mul"])
        .linear("fc", "blob", &[10, 8], true)
        .output("out", &["fc"]);
    b.build()
}

/// The five toy architectures.
pub fn toy_zoo() -> Vec<GraphDoc> {
    vec![chain(), residual(), concat_branches(), norm_net(), opaque_net()]
}

/// Parameter shapes declared in `g`. Parameters without one are skipped.
pub fn declared_shapes(g: &GraphDoc) -> BTreeMap<String, Vec<usize>> {
    g.nodes()
        .iter()
        .flat_map(|n| &n.params)
        .filter_map(|p| p.shape.clone().map(|s| (p.name.clone(), s)))
        .collect()
}

/// Uniform values in `[-1, 1)` for every declared parameter shape.
pub fn random_store(g: &GraphDoc, seed: u64) -> TensorMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    declared_shapes(g)
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            (name, Tensor::new(shape, data).unwrap())
        })
        .collect()
}

/// Prefixes every node id and parameter name. A shared prefix preserves id
/// order, so the result is a structural twin of `g`.
pub fn renamed(g: &GraphDoc, prefix: &str, name: &str) -> GraphDoc {
    let nodes = g
        .nodes()
        .iter()
        .map(|n| Node {
            id: format!("{prefix}{}", n.id),
            kind: n.kind.clone(),
            inputs: n.inputs.iter().map(|i| format!("{prefix}{i}")).collect(),
            params: n
                .params
                .iter()
                .map(|p| ParamRef {
                    name: format!("{prefix}{}", p.name),
                    ..p.clone()
                })
                .collect(),
            attrs: n.attrs.clone(),
        })
        .collect();
    let outputs = g.outputs().iter().map(|o| format!("{prefix}{o}")).collect();
    GraphDoc::new(name, nodes, outputs).expect("renaming keeps a graph valid")
}

/// Applies the same renaming as [`renamed`] to a tensor store.
pub fn renamed_store(store: &TensorMap, prefix: &str) -> TensorMap {
    store
        .iter()
        .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
        .collect()
}

/// Removes a single-input node, wiring its consumers to its input.
///
/// Returns `None` for nodes that cannot be bypassed this way (inputs,
/// outputs, merges, multi-input nodes) or when the result is invalid.
pub fn without_node(g: &GraphDoc, id: &str) -> Option<GraphDoc> {
    let victim = g.node(id)?;
    if matches!(victim.kind.tag, OpTag::Input | OpTag::Output)
        || victim.kind.tag.is_merge()
        || victim.inputs.len() != 1
    {
        return None;
    }
    let replacement = victim.inputs[0].clone();
    let swap = |s: &String| if s == id { replacement.clone() } else { s.clone() };
    let nodes = g
        .nodes()
        .iter()
        .filter(|n| n.id != id)
        .map(|n| Node {
            inputs: n.inputs.iter().map(swap).collect(),
            ..n.clone()
        })
        .collect();
    let outputs = g.outputs().iter().map(swap).collect();
    GraphDoc::new(g.name(), nodes, outputs).ok()
}

/// Changes the label of one activation node.
pub fn with_activation(g: &GraphDoc, id: &str, label: &str) -> Option<GraphDoc> {
    if g.node(id)?.kind.tag != OpTag::Activation {
        return None;
    }
    let nodes = g
        .nodes()
        .iter()
        .map(|n| {
            if n.id == id {
                Node {
                    kind: OpKind::activation(label),
                    ..n.clone()
                }
            } else {
                n.clone()
            }
        })
        .collect();
    GraphDoc::new(g.name(), nodes, g.outputs().to_vec()).ok()
}

/// Keeps only the tensors `g` references.
pub fn restrict_store(store: &TensorMap, g: &GraphDoc) -> TensorMap {
    store
        .iter()
        .filter(|(k, _)| g.param_index().contains_key(*k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

/// Random valid graph with between 1 and `max_params` parameters.
///
/// Built from chains and branch-and-merge blocks with random op kinds and
/// shapes, occasional identity shortcuts, and occasional multi-input opaque
/// nodes. Node ids are random, so topological tie-breaking is exercised.
pub fn random_graph<R: Rng>(rng: &mut R, max_params: usize) -> GraphDoc {
    assert!(max_params >= 1);
    let mut gen = RandomGraph {
        b: GraphBuilder::new("random"),
        used: std::collections::HashSet::new(),
        params: 0,
        max_params,
    };
    let input = gen.fresh_id(rng);
    gen.b.input(&input);
    let mut cur = input.clone();
    let blocks = rng.gen_range(1..=4);
    for _ in 0..blocks {
        if rng.gen_bool(0.5) {
            for _ in 0..rng.gen_range(1..=3) {
                cur = gen.layer(rng, &cur);
            }
        } else {
            let mut ends = Vec::new();
            for _ in 0..rng.gen_range(2..=3) {
                let mut end = cur.clone();
                for _ in 0..rng.gen_range(0..=2) {
                    end = gen.layer(rng, &end);
                }
                ends.push(end);
            }
            let tag = [OpTag::Add, OpTag::Mul, OpTag::Concat][rng.gen_range(0..3)];
            let id = gen.fresh_id(rng);
            let refs: Vec<&str> = ends.iter().map(String::as_str).collect();
            gen.b.merge(&id, tag, &refs);
            cur = id;
        }
        if rng.gen_bool(0.15) {
            let id = gen.fresh_id(rng);
            gen.b.opaque(&id, &[&cur, &input]);
            cur = id;
        }
    }
    if gen.params == 0 {
        let id = gen.fresh_id(rng);
        let shape = random_shape(rng, 2);
        gen.b.linear(&id, &cur, &shape, false);
        cur = id;
    }
    let out = gen.fresh_id(rng);
    gen.b.output(&out, &[&cur]);
    gen.b.build()
}

struct RandomGraph {
    b: GraphBuilder,
    used: std::collections::HashSet<String>,
    params: usize,
    max_params: usize,
}

impl RandomGraph {
    fn fresh_id<R: Rng>(&mut self, rng: &mut R) -> String {
        loop {
            let id: String = (0..4).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
            if self.used.insert(id.clone()) {
                return id;
            }
        }
    }

    fn layer<R: Rng>(&mut self, rng: &mut R, input: &str) -> String {
        let id = self.fresh_id(rng);
        let room = self.max_params - self.params;
        match rng.gen_range(0..8) {
            0 if room >= 1 => {
                let bias = room >= 2 && rng.gen_bool(0.5);
                let shape = random_shape(rng, 4);
                self.b.conv(&id, input, &shape, bias);
                self.params += 1 + bias as usize;
            }
            1 if room >= 1 => {
                let bias = room >= 2 && rng.gen_bool(0.5);
                let shape = random_shape(rng, 2);
                self.b.linear(&id, input, &shape, bias);
                self.params += 1 + bias as usize;
            }
            2 if room >= 4 => {
                self.b.batchnorm(&id, input, rng.gen_range(1..=8));
                self.params += 4;
            }
            3 if room >= 2 => {
                self.b.layernorm(&id, input, rng.gen_range(1..=8));
                self.params += 2;
            }
            4 if room >= 1 => {
                let rank = rng.gen_range(1..=3);
                let shape = random_shape(rng, rank);
                self.b.node(
                    &id,
                    OpKind::new(OpTag::Opaque),
                    &[input],
                    vec![param(&format!("{id}.weight"), ParamRole::Weight, &shape)],
                );
                self.params += 1;
            }
            5 => {
                self.b.pool(&id, input);
            }
            6 => {
                self.b.reshape(&id, input);
            }
            _ => {
                let label = ["relu", "silu", "sigmoid", "gelu"][rng.gen_range(0..4)];
                self.b.act(&id, input, label);
            }
        }
        id
    }
}

fn random_shape<R: Rng>(rng: &mut R, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=6)).collect()
}

/// Random tensor of the given rank with dims in `1..=max_dim` and values in `[-1, 1)`.
pub fn random_tensor<R: Rng>(rng: &mut R, rank: usize, max_dim: usize) -> Tensor<f32> {
    let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=max_dim)).collect();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zoo_is_valid_and_shaped() {
        for g in toy_zoo() {
            assert_eq!(declared_shapes(&g).len(), g.param_count(), "{}", g.name());
            let store = random_store(&g, 7);
            assert_eq!(store.len(), g.param_count());
            assert!(store.values().all(|t| t.is_finite()));
        }
    }

    #[test]
    fn random_store_is_seeded() {
        let g = residual();
        assert_eq!(random_store(&g, 3), random_store(&g, 3));
        assert_ne!(random_store(&g, 3), random_store(&g, 4));
    }

    #[test]
    fn random_graphs_respect_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let g = random_graph(&mut rng, 10);
            assert!((1..=10).contains(&g.param_count()));
            assert_eq!(declared_shapes(&g).len(), g.param_count());
        }
    }

    #[test]
    fn node_removal() {
        let g = residual();
        let h = without_node(&g, "act_a").unwrap();
        assert_eq!(h.node("conv_b").unwrap().inputs, vec!["conv_a"]);
        assert!(without_node(&g, "add").is_none());
        assert!(without_node(&g, "in").is_none());
        let h = without_node(&g, "fc").unwrap();
        assert_eq!(h.outputs(), &["out".to_string()]);
        assert_eq!(h.node("out").unwrap().inputs, vec!["pool"]);
    }
}
