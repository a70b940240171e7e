//! End-to-end transfer: match, apply the norm policy, inject, mix.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::graph::{GraphDoc, ParamRole};
use crate::inject::{combo_injection, softmax_mix, softmax_weights, InjectError, InjectionConfig};
use crate::matching::{match_paths, MatchError, MatchReport, ScoreWeights};
use crate::segment::{extract_paths, segment, ExecutionPath, Submodule};
use crate::store::TensorMap;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransferError {
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Inject(#[from] InjectError),
    #[error("{0} model has no tensor store")]
    MissingStore(&'static str),
    #[error("parameter `{0}` has no tensor in the store")]
    MissingTensor(String),
    #[error("parameter `{0}` has no shape: provide a tensor store or declare `shape` in the graph")]
    MissingShape(String),
    #[error("parameter `{param}`: graph declares shape {declared:?} but the store holds {stored:?}")]
    Shape {
        param: String,
        declared: Vec<usize>,
        stored: Vec<usize>,
    },
    #[error("teacher library is empty")]
    NoTeachers,
}

/// Which normalization-layer parameters are transferred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPolicy {
    #[default]
    TransferAll,
    /// Keep every scale, shift and running statistic of norm layers.
    SkipNormParams,
    /// Keep running statistics only; scale and shift are transferred.
    SkipRunningStats,
}

impl NormPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            NormPolicy::TransferAll => "transfer_all",
            NormPolicy::SkipNormParams => "skip_norm_params",
            NormPolicy::SkipRunningStats => "skip_running_stats",
        }
    }

    fn excludes(self, path: &ExecutionPath, owner_is_norm: bool) -> bool {
        match self {
            NormPolicy::TransferAll => false,
            NormPolicy::SkipNormParams => owner_is_norm || path.role.is_norm_role(),
            NormPolicy::SkipRunningStats => path.role == ParamRole::RunningStat,
        }
    }
}

impl fmt::Display for NormPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "transfer_all" => Ok(NormPolicy::TransferAll),
            "skip_norm_params" => Ok(NormPolicy::SkipNormParams),
            "skip_running_stats" => Ok(NormPolicy::SkipRunningStats),
            other => Err(format!(
                "unknown norm policy \"{other}\" (expected transfer_all, skip_norm_params or skip_running_stats)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct TransferConfig {
    pub injection: InjectionConfig,
    pub min_score: f64,
    pub norm_policy: NormPolicy,
    pub score_weights: ScoreWeights,
}

/// A graph paired with resolved parameter shapes and, optionally, its weights.
#[derive(Debug, Clone)]
pub struct Model {
    graph: GraphDoc,
    store: Option<TensorMap>,
    submodules: Vec<Submodule>,
    paths: Vec<ExecutionPath>,
}

impl Model {
    /// Shapes come from the store when present, otherwise from the shapes
    /// declared in the graph. When both exist they must agree.
    pub fn new(graph: GraphDoc, store: Option<TensorMap>) -> Result<Self, TransferError> {
        let mut shapes = BTreeMap::new();
        for (name, entry) in graph.param_index() {
            let declared = graph.nodes()[entry.node].params[entry.slot].shape.clone();
            let shape = match (&store, declared) {
                (Some(store), declared) => {
                    let stored = store
                        .get(name)
                        .ok_or_else(|| TransferError::MissingTensor(name.clone()))?
                        .shape()
                        .to_vec();
                    if let Some(declared) = declared {
                        if declared != stored {
                            return Err(TransferError::Shape {
                                param: name.clone(),
                                declared,
                                stored,
                            });
                        }
                    }
                    stored
                }
                (None, Some(declared)) => declared,
                (None, None) => return Err(TransferError::MissingShape(name.clone())),
            };
            shapes.insert(name.clone(), shape);
        }
        let submodules = segment(&graph);
        let paths = extract_paths(&graph, &submodules, &shapes);
        Ok(Self {
            graph,
            store,
            submodules,
            paths,
        })
    }

    pub fn graph(&self) -> &GraphDoc {
        &self.graph
    }

    pub fn store(&self) -> Option<&TensorMap> {
        self.store.as_ref()
    }

    pub fn submodules(&self) -> &[Submodule] {
        &self.submodules
    }

    /// Execution paths, ordered by parameter name.
    pub fn paths(&self) -> &[ExecutionPath] {
        &self.paths
    }
}

/// What happened to one student parameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Decision {
    Injected { sources: Vec<MixSource> },
    KeptByNormPolicy,
    KeptUnmatched,
    /// Candidates existed but none shared the student's parameter role.
    KeptRoleMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixSource {
    pub teacher: String,
    pub score: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferReport {
    pub config: TransferConfig,
    #[serde(flatten)]
    pub matching: MatchReport,
    pub decisions: BTreeMap<String, Decision>,
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub store: TensorMap,
    pub report: TransferReport,
}

pub fn match_models(
    student: &Model,
    teacher: &Model,
    cfg: &TransferConfig,
) -> Result<MatchReport, TransferError> {
    Ok(match_paths(
        student.paths(),
        teacher.paths(),
        cfg.injection.k,
        cfg.min_score,
        &cfg.score_weights,
    )?)
}

/// Writes teacher values into a copy of the student store.
///
/// Parameters excluded by the norm policy, or without a same-role candidate,
/// keep their incoming values. Tensors in the student store that the graph
/// does not reference are carried over unchanged.
pub fn transfer(
    student: &Model,
    teacher: &Model,
    cfg: &TransferConfig,
) -> Result<TransferOutcome, TransferError> {
    cfg.injection.validate()?;
    let student_store = student.store().ok_or(TransferError::MissingStore("student"))?;
    let teacher_store = teacher.store().ok_or(TransferError::MissingStore("teacher"))?;
    let report = match_models(student, teacher, cfg)?;

    let teacher_roles: BTreeMap<&str, ParamRole> = teacher
        .paths()
        .iter()
        .map(|p| (p.param_name.as_str(), p.role))
        .collect();

    let results: Vec<(String, Decision, Option<Tensor<f32>>)> = student
        .paths()
        .par_iter()
        .map(|p| {
            let owner_is_norm = student
                .graph()
                .node(&p.owner)
                .is_some_and(|n| n.kind.tag.is_norm());
            if cfg.norm_policy.excludes(p, owner_is_norm) {
                return Ok((p.param_name.clone(), Decision::KeptByNormPolicy, None));
            }
            let candidates = &report.per_param[&p.param_name];
            if candidates.is_empty() {
                return Ok((p.param_name.clone(), Decision::KeptUnmatched, None));
            }
            let usable: Vec<_> = candidates
                .iter()
                .filter(|c| teacher_roles[c.teacher.as_str()] == p.role)
                .collect();
            if usable.is_empty() {
                return Ok((p.param_name.clone(), Decision::KeptRoleMismatch, None));
            }
            let mut injected = Vec::with_capacity(usable.len());
            for c in &usable {
                let src = teacher_store
                    .get(&c.teacher)
                    .ok_or_else(|| TransferError::MissingTensor(c.teacher.clone()))?;
                let t = inject_aligned(src, &p.shape, cfg.injection.lambda)?;
                injected.push((t, c.score.total));
            }
            let mixed = softmax_mix(&injected, cfg.injection.temperature)?;
            let scores: Vec<f64> = usable.iter().map(|c| c.score.total).collect();
            let weights = softmax_weights(&scores, cfg.injection.temperature)?;
            let sources = usable
                .iter()
                .zip(weights)
                .map(|(c, weight)| MixSource {
                    teacher: c.teacher.clone(),
                    score: c.score.total,
                    weight,
                })
                .collect();
            Ok((p.param_name.clone(), Decision::Injected { sources }, Some(mixed)))
        })
        .collect::<Result<_, TransferError>>()?;

    let mut store = student_store.clone();
    let mut decisions = BTreeMap::new();
    for (name, decision, tensor) in results {
        if let Some(t) = tensor {
            let slot = store
                .get_mut(&name)
                .ok_or_else(|| TransferError::MissingTensor(name.clone()))?;
            if slot.shape() != t.shape() {
                return Err(TransferError::Shape {
                    param: name,
                    declared: slot.shape().to_vec(),
                    stored: t.shape().to_vec(),
                });
            }
            *slot = t;
        }
        decisions.insert(name, decision);
    }
    Ok(TransferOutcome {
        store,
        report: TransferReport {
            config: *cfg,
            matching: report,
            decisions,
        },
    })
}

/// Injects `src` into `target`, padding the lower-rank side with leading
/// singleton dimensions first.
fn inject_aligned(src: &Tensor<f32>, target: &[usize], lambda: f64) -> Result<Tensor<f32>, InjectError> {
    use std::cmp::Ordering::*;
    match src.rank().cmp(&target.len()) {
        Equal => combo_injection(src, target, lambda),
        Less => {
            let mut shape = vec![1; target.len() - src.rank()];
            shape.extend_from_slice(src.shape());
            let lifted = src.clone().reshape(shape)?;
            combo_injection(&lifted, target, lambda)
        }
        Greater => {
            let mut padded = vec![1; src.rank() - target.len()];
            padded.extend_from_slice(target);
            let out = combo_injection(src, &padded, lambda)?;
            Ok(out.reshape(target.to_vec())?)
        }
    }
}

/// Index and score of the teacher with the highest aggregate score; the
/// lowest index wins ties.
pub fn select_best_teacher(
    student: &Model,
    teachers: &[Model],
    cfg: &TransferConfig,
) -> Result<(usize, f64), TransferError> {
    if teachers.is_empty() {
        return Err(TransferError::NoTeachers);
    }
    let scores: Vec<f64> = teachers
        .par_iter()
        .map(|t| match_models(student, t, cfg).map(|r| r.tli_score))
        .collect::<Result<_, _>>()?;
    let mut best = (0, scores[0]);
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best)
}
