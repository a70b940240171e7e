//! Path scoring and top-K teacher selection.
//!
//! Five component similarities, each in `[0, 1]`:
//!
//! | component     | definition                                                           |
//! |---------------|----------------------------------------------------------------------|
//! | `seq`         | `1 - lev(ops_s, ops_t) / max(depth_s, depth_t)`                      |
//! | `activations` | multiset Jaccard of activation labels, 1 when both are empty         |
//! | `position`    | `1 - abs(pos_s - pos_t)`                                             |
//! | `branch`      | 1 for the same (index, count); 0.5 if normalized indices are within 0.25; else 0 |
//! | `shape`       | 0 across roles; geometric mean of per-dim min/max ratios, halved across ranks |
//!
//! The total is the weighted sum, computed as `1 - Σ w_c (1 - c)` so that a
//! path scored against itself gives exactly `1.0`.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::segment::ExecutionPath;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("{0} model has no parameters")]
    EmptyModel(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreWeights {
    pub seq: f64,
    pub activations: f64,
    pub position: f64,
    pub branch: f64,
    pub shape: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            seq: 0.35,
            activations: 0.15,
            position: 0.20,
            branch: 0.10,
            shape: 0.20,
        }
    }
}

impl ScoreWeights {
    pub fn validate(&self) -> Result<(), MatchError> {
        let w = [
            self.seq,
            self.activations,
            self.position,
            self.branch,
            self.shape,
        ];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MatchError::InvalidArgument(
                "score weights must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MatchError::InvalidArgument(format!(
                "score weights sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Components {
    pub seq: f64,
    pub activations: f64,
    pub position: f64,
    pub branch: f64,
    pub shape: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathScore {
    pub total: f64,
    pub components: Components,
}

pub fn score_pair(s: &ExecutionPath, t: &ExecutionPath) -> PathScore {
    score_pair_with(s, t, &ScoreWeights::default())
}

pub fn score_pair_with(s: &ExecutionPath, t: &ExecutionPath, w: &ScoreWeights) -> PathScore {
    let c = Components {
        seq: seq_similarity(s, t),
        activations: multiset_jaccard(&s.activations, &t.activations),
        position: 1.0 - (s.submodule_pos - t.submodule_pos).abs(),
        branch: branch_similarity(s, t),
        shape: shape_similarity(s, t),
    };
    let deficit = w.seq * (1.0 - c.seq)
        + w.activations * (1.0 - c.activations)
        + w.position * (1.0 - c.position)
        + w.branch * (1.0 - c.branch)
        + w.shape * (1.0 - c.shape);
    PathScore {
        total: (1.0 - deficit).clamp(0.0, 1.0),
        components: c,
    }
}

fn seq_similarity(s: &ExecutionPath, t: &ExecutionPath) -> f64 {
    let longest = s.op_sequence.len().max(t.op_sequence.len());
    if longest == 0 {
        return 1.0;
    }
    let d = strsim::generic_levenshtein(&s.op_sequence, &t.op_sequence);
    1.0 - d as f64 / longest as f64
}

fn multiset_jaccard(a: &BTreeMap<String, usize>, b: &BTreeMap<String, usize>) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (label, &ca) in a {
        let cb = b.get(label).copied().unwrap_or(0);
        inter += ca.min(cb);
        union += ca.max(cb);
    }
    for (label, &cb) in b {
        if !a.contains_key(label) {
            union += cb;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn branch_similarity(s: &ExecutionPath, t: &ExecutionPath) -> f64 {
    if s.branch_count == t.branch_count && s.branch_index == t.branch_index {
        return 1.0;
    }
    let ns = s.branch_index as f64 / s.branch_count as f64;
    let nt = t.branch_index as f64 / t.branch_count as f64;
    if (ns - nt).abs() <= 0.25 {
        0.5
    } else {
        0.0
    }
}

fn shape_similarity(s: &ExecutionPath, t: &ExecutionPath) -> f64 {
    if s.role != t.role {
        return 0.0;
    }
    let ratio = trailing_shape_ratio(&s.shape, &t.shape);
    if s.shape.len() == t.shape.len() {
        ratio
    } else {
        0.5 * ratio
    }
}

/// Geometric mean of `min/max` over trailing-aligned dimensions.
fn trailing_shape_ratio(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return if a.len() == b.len() { 1.0 } else { 0.0 };
    }
    let product: f64 = a
        .iter()
        .rev()
        .zip(b.iter().rev())
        .map(|(&x, &y)| x.min(y) as f64 / x.max(y) as f64)
        .product();
    if product == 1.0 {
        1.0
    } else {
        product.powf(1.0 / n as f64)
    }
}

/// A ranked teacher candidate for one student parameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub teacher: String,
    pub score: PathScore,
    /// Whether the teacher parameter sits in the same slot of its node.
    pub same_slot: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchReport {
    pub k: usize,
    pub min_score: f64,
    /// Student parameter → up to `k` candidates, best first.
    pub per_param: BTreeMap<String, Vec<Candidate>>,
    pub tli_score: f64,
    /// Student parameters without a candidate at or above `min_score`.
    pub unmatched: Vec<String>,
    /// Parameters (student, then teacher) whose paths folded a nested fan-in.
    pub linearized_student: Vec<String>,
    pub linearized_teacher: Vec<String>,
}

impl MatchReport {
    pub fn best(&self, student_param: &str) -> Option<&Candidate> {
        self.per_param.get(student_param).and_then(|c| c.first())
    }
}

/// Candidate order: total descending, same-slot first, teacher name ascending.
///
/// The slot key separates parameters a node holds in interchangeable roles
/// (running mean and variance share role and shape).
pub fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total
        .total_cmp(&a.score.total)
        .then_with(|| b.same_slot.cmp(&a.same_slot))
        .then_with(|| a.teacher.cmp(&b.teacher))
}

/// Scores all student × teacher pairs and keeps the top `k` per student
/// parameter with `total >= min_score`.
///
/// The aggregate score weights each student parameter's best total by its
/// element count; unmatched parameters contribute 0.
pub fn match_paths(
    student: &[ExecutionPath],
    teacher: &[ExecutionPath],
    k: usize,
    min_score: f64,
    weights: &ScoreWeights,
) -> Result<MatchReport, MatchError> {
    if student.is_empty() {
        return Err(MatchError::EmptyModel("student"));
    }
    if teacher.is_empty() {
        return Err(MatchError::EmptyModel("teacher"));
    }
    if k == 0 {
        return Err(MatchError::InvalidArgument("k must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&min_score) {
        return Err(MatchError::InvalidArgument(format!(
            "min_score {min_score} outside [0, 1]"
        )));
    }
    weights.validate()?;

    let ranked: Vec<Vec<Candidate>> = student
        .par_iter()
        .map(|s| {
            let mut cands: Vec<Candidate> = teacher
                .iter()
                .map(|t| Candidate {
                    teacher: t.param_name.clone(),
                    score: score_pair_with(s, t, weights),
                    same_slot: s.slot == t.slot,
                })
                .filter(|c| c.score.total >= min_score)
                .collect();
            cands.sort_by(rank_order);
            cands.truncate(k);
            cands
        })
        .collect();

    let mut per_param = BTreeMap::new();
    let mut unmatched = Vec::new();
    let mut weighted = 0.0;
    let mut mass = 0.0;
    for (s, cands) in student.iter().zip(ranked) {
        let elems = s.elems() as f64;
        mass += elems;
        match cands.first() {
            Some(best) => weighted += elems * best.score.total,
            None => unmatched.push(s.param_name.clone()),
        }
        per_param.insert(s.param_name.clone(), cands);
    }
    unmatched.sort();

    let linearized = |paths: &[ExecutionPath]| {
        let mut v: Vec<String> = paths
            .iter()
            .filter(|p| p.linearized)
            .map(|p| p.param_name.clone())
            .collect();
        v.sort();
        v
    };
    Ok(MatchReport {
        k,
        min_score,
        per_param,
        tli_score: (weighted / mass).clamp(0.0, 1.0),
        unmatched,
        linearized_student: linearized(student),
        linearized_teacher: linearized(teacher),
    })
}
