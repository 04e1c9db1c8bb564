use alloc::string::String;

pub type Result<T, E = DapError> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DapError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sample generation failed: {0}")]
    Generation(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("unknown class id {class_id} (have {num_classes} classes)")]
    UnknownClass { class_id: usize, num_classes: usize },

    #[error("template bank has no entries for class {0}")]
    EmptyBank(usize),

    #[error("token sequence of length {len} exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,

    #[error("relevance extraction requires an attention trace: {0}")]
    Instrumentation(&'static str),

    #[error("degenerate foreground/background partition: background is empty")]
    EmptyBackground,

    #[error("{context}: value {value} outside [0, 1]")]
    Range { context: &'static str, value: f64 },

    #[error("non-finite value in loss component `{0}`")]
    NonFinite(&'static str),

    #[error("contrastive batch needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),

    #[error("mask must contain both foreground and background pixels")]
    MaskCoverage,

    #[error("no foreground patches in the evaluated set")]
    NoForegroundPatches,

    #[error("training diverged at epoch {epoch}, step {step}: {component} is not finite")]
    Diverged {
        epoch: usize,
        step: usize,
        component: &'static str,
    },
}
