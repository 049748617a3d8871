use alloc::boxed::Box;
use alloc::string::String;

use crate::manifolds::SpaceKind;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Everything that can go wrong in the library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("point is not on the {kind} model space: {detail}")]
    Domain { kind: SpaceKind, detail: String },

    #[error("component {index}: {source}")]
    Component {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("node {node}: {source}")]
    Node {
        node: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("curvature {curvature} has the wrong sign for the {kind} model space")]
    CurvatureSign { kind: SpaceKind, curvature: f64 },

    #[error("signature parse error at position {position}: unexpected character {found:?}")]
    Parse { position: usize, found: char },

    #[error("invalid signature: {0}")]
    Signature(String),

    #[error("tape: {0}")]
    Graph(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("row {row} has {finite} finite logits, cannot sample k = {k}")]
    Sampling { row: usize, finite: usize, k: usize },

    #[error("function is not finite near the evaluation point (coordinate {coordinate})")]
    Evaluation { coordinate: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("run {run}: {source}")]
    Run {
        run: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn in_component(self, index: usize) -> Self {
        Error::Component {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_node(self, node: usize) -> Self {
        Error::Node {
            node,
            source: Box::new(self),
        }
    }
}
