//! Data-free parameter transfer between neural networks of different shapes.
//!
//! The pipeline has two phases. Matching segments each computation graph at
//! merge operations, extracts an execution path for every parameter tensor and
//! scores student/teacher path pairs. Injection reshapes the chosen teacher
//! tensors into student shapes with a center-crop/resize blend and mixes the
//! top candidates with a softmax over their match scores.
//!
//! ```text
//! GraphDoc ──segment──▶ Submodules ──extract_paths──▶ ExecutionPaths
//!                                                       │
//!                       student × teacher ──match──▶ MatchReport
//!                                                       │
//! TensorStore ──combo_injection + softmax_mix──▶ new student TensorStore
//! ```

pub mod fixtures;
pub mod graph;
pub mod inject;
pub mod matching;
pub mod scalar;
pub mod segment;
pub mod store;
pub mod tensor;
pub mod transfer;

pub use graph::{AttrValue, GraphDoc, GraphError, Node, OpKind, OpTag, ParamRole};
pub use inject::{
    center_crop, combo_injection, resize, softmax_mix, softmax_weights, InjectError,
    InjectionConfig,
};
pub use matching::{
    match_paths, score_pair, Candidate, MatchError, MatchReport, PathScore, ScoreWeights,
};
pub use scalar::Scalar;
pub use segment::{extract_paths, segment, ExecutionPath, Submodule};
pub use store::{read_store, write_store, StoreError, TensorMap};
pub use tensor::{Tensor, TensorError};
pub use transfer::{
    match_models, select_best_teacher, transfer, Decision, Model, NormPolicy, TransferConfig,
    TransferError, TransferOutcome, TransferReport,
};

/// Single-precision tensor, the dtype of the on-disk container.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor.
pub type Tensor64 = Tensor<f64>;
