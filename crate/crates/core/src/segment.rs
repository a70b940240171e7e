//! Submodule clustering and execution-path extraction.
//!
//! Nodes are walked in topological order (Input nodes excluded). A submodule
//! closes right after each merge node (`add`, `mul`, `concat`), which belongs
//! to it; whatever remains closes at the end with boundary `output`.
//!
//! A parameter's execution path is the sequence of op tags from its
//! submodule's entry to the owning node. Because submodules are contiguous
//! ranges of the topological order, every route between two members stays
//! inside the submodule, so the path is the set of in-submodule ancestors of
//! the owner (owner included) in topological order. For a linear branch that
//! is exactly the backward walk reversed; when a non-merge node joins several
//! in-submodule inputs the extra inputs are folded into the sequence in
//! topological order and the path is flagged `linearized`.

use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use crate::graph::{GraphDoc, OpTag, ParamRole};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Submodule {
    /// 0 is nearest the input.
    pub index_from_head: usize,
    /// Member node ids in topological order.
    pub node_ids: Vec<String>,
    /// Tag of the merge op closing the submodule, or `output` for the last one.
    pub boundary_kind: OpTag,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionPath {
    pub param_name: String,
    pub op_sequence: Vec<OpTag>,
    /// Multiset of activation labels along `op_sequence`.
    pub activations: BTreeMap<String, usize>,
    pub depth: usize,
    pub branch_index: usize,
    pub branch_count: usize,
    pub submodule_index: usize,
    /// `submodule_index / max(1, submodule_count - 1)`, in `[0, 1]`.
    pub submodule_pos: f64,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    /// Position of the parameter in its owning node's parameter list.
    pub slot: usize,
    pub owner: String,
    /// Set when a nested fan-in had to be folded into the sequence.
    pub linearized: bool,
}

impl ExecutionPath {
    pub fn elems(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn segment(g: &GraphDoc) -> Vec<Submodule> {
    let mut subs = Vec::new();
    let mut current = Vec::new();
    for &i in g.topo_indices() {
        let node = &g.nodes()[i];
        if node.kind.tag == OpTag::Input {
            continue;
        }
        current.push(node.id.clone());
        if node.kind.tag.is_merge() {
            subs.push(Submodule {
                index_from_head: subs.len(),
                node_ids: std::mem::take(&mut current),
                boundary_kind: node.kind.tag,
            });
        }
    }
    if !current.is_empty() {
        subs.push(Submodule {
            index_from_head: subs.len(),
            node_ids: current,
            boundary_kind: OpTag::Output,
        });
    }
    subs
}

/// One path per parameter, ordered by parameter name.
///
/// `shapes` must contain every parameter of `g`; `subs` must come from
/// [`segment`] on the same graph.
pub fn extract_paths(
    g: &GraphDoc,
    subs: &[Submodule],
    shapes: &BTreeMap<String, Vec<usize>>,
) -> Vec<ExecutionPath> {
    let n = g.nodes().len();
    let mut topo_pos = vec![0usize; n];
    for (pos, &i) in g.topo_indices().iter().enumerate() {
        topo_pos[i] = pos;
    }
    let mut sub_of = vec![usize::MAX; n];
    for s in subs {
        for id in &s.node_ids {
            sub_of[g.node_index(id).expect("submodule from this graph")] = s.index_from_head;
        }
    }

    let denom = subs.len().saturating_sub(1).max(1) as f64;
    let branches: Vec<(Vec<usize>, usize)> = subs
        .iter()
        .map(|s| branch_assignment(g, s, &sub_of, &topo_pos))
        .collect();

    let mut paths = Vec::with_capacity(g.param_count());
    for (name, entry) in g.param_index() {
        let owner = entry.node;
        let k = sub_of[owner];
        // Parameters on Input nodes sit outside every submodule; treat them as
        // a one-op path at the head.
        let (members, linearized) = if k == usize::MAX {
            (vec![owner], false)
        } else {
            ancestors_within(g, owner, k, &sub_of, &topo_pos)
        };
        let op_sequence: Vec<OpTag> = members.iter().map(|&i| g.nodes()[i].kind.tag).collect();
        let mut activations = BTreeMap::new();
        for &i in &members {
            if let Some(label) = &g.nodes()[i].kind.activation {
                *activations.entry(label.clone()).or_insert(0) += 1;
            }
        }
        let (branch_index, branch_count) = if k == usize::MAX {
            (0, 1)
        } else {
            let (assign, count) = &branches[k];
            let local = subs[k]
                .node_ids
                .iter()
                .position(|id| id == &g.nodes()[owner].id)
                .expect("owner is a member");
            (assign[local], *count)
        };
        let submodule_index = if k == usize::MAX { 0 } else { k };
        paths.push(ExecutionPath {
            param_name: name.clone(),
            depth: op_sequence.len(),
            op_sequence,
            activations,
            branch_index,
            branch_count,
            submodule_index,
            submodule_pos: submodule_index as f64 / denom,
            shape: shapes
                .get(name)
                .unwrap_or_else(|| panic!("no shape supplied for parameter `{name}`"))
                .clone(),
            role: entry.role,
            slot: entry.slot,
            owner: g.nodes()[owner].id.clone(),
            linearized,
        });
    }
    paths
}

/// In-submodule ancestors of `node` (inclusive) in topological order, and
/// whether any of them joins more than one in-submodule input.
fn ancestors_within(
    g: &GraphDoc,
    node: usize,
    sub: usize,
    sub_of: &[usize],
    topo_pos: &[usize],
) -> (Vec<usize>, bool) {
    let mut seen = HashSet::from([node]);
    let mut stack = vec![node];
    let mut fan_in = false;
    while let Some(cur) = stack.pop() {
        let mut local_inputs = 0;
        let mut distinct = HashSet::new();
        for inp in g.input_indices(cur) {
            if sub_of[inp] != sub || !distinct.insert(inp) {
                continue;
            }
            local_inputs += 1;
            if seen.insert(inp) {
                stack.push(inp);
            }
        }
        if local_inputs > 1 {
            fan_in = true;
        }
    }
    let mut members: Vec<usize> = seen.into_iter().collect();
    members.sort_by_key(|&i| topo_pos[i]);
    (members, fan_in)
}

/// Branch ordinal for every member of `s` (indexed like `s.node_ids`), plus
/// the branch count.
///
/// Branches are the distinct inputs of the closing merge node, ordered by
/// topological position; an input from outside the submodule (an identity
/// shortcut) still counts as a branch. A member belongs to the lowest-ordinal
/// branch it feeds. Members feeding no branch, and the merge node itself, get
/// ordinal 0. A submodule closed by `output` has a single branch.
fn branch_assignment(
    g: &GraphDoc,
    s: &Submodule,
    sub_of: &[usize],
    topo_pos: &[usize],
) -> (Vec<usize>, usize) {
    let mut assign = vec![0usize; s.node_ids.len()];
    if !s.boundary_kind.is_merge() {
        return (assign, 1);
    }
    let merge = g
        .node_index(s.node_ids.last().expect("submodules are non-empty"))
        .unwrap();
    let mut roots: Vec<usize> = g.input_indices(merge).collect();
    roots.sort_by_key(|&i| topo_pos[i]);
    roots.dedup();
    let count = roots.len().max(1);

    let local: BTreeMap<usize, usize> = s
        .node_ids
        .iter()
        .enumerate()
        .map(|(li, id)| (g.node_index(id).unwrap(), li))
        .collect();
    let mut marked = vec![false; s.node_ids.len()];
    for (ordinal, &root) in roots.iter().enumerate() {
        if sub_of[root] != s.index_from_head {
            continue;
        }
        let mut stack = vec![root];
        while let Some(cur) = stack.pop() {
            let li = local[&cur];
            if marked[li] {
                continue;
            }
            marked[li] = true;
            assign[li] = ordinal;
            stack.extend(g.input_indices(cur).filter(|i| local.contains_key(i)));
        }
    }
    (assign, count)
}
