use thiserror::Error;

use crate::harness::AngleReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("slot `{name}` ({abbrev}) is already registered")]
    DuplicateSlot { name: String, abbrev: char },
    #[error("invalid slot name `{0}`")]
    InvalidName(String),
    #[error("invalid slot abbreviation `{0}`")]
    InvalidAbbrev(char),
    #[error("unknown slot `{0}`")]
    UnknownSlot(String),
    #[error("unknown slot abbreviation `{0}`")]
    UnknownAbbrev(char),
    #[error("malformed angle spec `{0}`")]
    MalformedAngle(String),
    #[error("slot `{0}` appears both as source and target")]
    OverlappingSlots(String),
    #[error("angle has no target slots")]
    EmptyTargets,
    #[error("angle weight must be positive, got {0}")]
    InvalidWeight(f64),

    #[error("value embeds the slot marker `{0}`")]
    MarkerCollision(String),
    #[error("empty value")]
    EmptyValue,
    #[error("instance `{id}` has no value for source slot `{slot}`")]
    MissingSourceSlot { id: String, slot: String },
    #[error("instance `{id}` has no value for target slot `{slot}`")]
    MissingTargetSlot { id: String, slot: String },

    #[error("no angle applies to any instance of dataset `{0}`")]
    NoApplicableAngle(String),
    #[error("dataset `{0}` has no angles configured")]
    NoAngles(String),
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),

    #[error("no gold answers supplied")]
    EmptyGolds,
    #[error("malformed multiple-choice options: `{0}`")]
    MalformedOptions(String),

    #[error("invalid decode options: {0}")]
    InvalidDecodeOptions(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("toy model has no memorized pairs")]
    EmptyModel,
    #[error("conflicting outputs memorized for input `{0}`")]
    ConflictingPairs(String),
    #[error("forced output is empty")]
    EmptyForcedOutput,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("record `{id}`: answer key `{key}` does not name a choice")]
    BadAnswerKey { id: String, key: String },
    #[error("record `{0}` has no gold answers")]
    NoGoldAnswers(String),
    #[error("duplicate instance id `{0}`")]
    DuplicateId(String),
    #[error("sentence corpus is empty")]
    EmptyCorpus,
    #[error("k = {k} is smaller than the number of options ({options})")]
    KTooSmall { k: usize, options: usize },
    #[error("no explanation sentences supplied")]
    EmptyExplanation,

    #[error("candidate `{0}` is listed more than once")]
    DuplicateCandidates(String),
    #[error("no candidates supplied")]
    NoCandidates,
    #[error("score must lie in [0, 1], got {0}")]
    ScoreOutOfRange(f64),
    #[error("evaluation interrupted: {source}")]
    EvalInterrupted {
        partial: Box<AngleReport>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures originating in a model backend.
    pub fn is_backend(&self) -> bool {
        match self {
            Error::BackendUnavailable(_) => true,
            Error::EvalInterrupted { source, .. } => source.is_backend(),
            _ => false,
        }
    }
}
