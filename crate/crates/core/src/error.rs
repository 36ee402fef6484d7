//! Error type shared across the crate.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while loading data, fitting, or running
/// studies. Variants carry enough context to identify the offending
/// trajectory, column, or subsystem.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Trajectories in one dataset must share a common length `T`.
    #[error("trajectory {id} has length {len}, expected {expected}")]
    RaggedTrajectories { id: String, len: usize, expected: usize },

    /// State vectors must all have the dataset's dimension.
    #[error("state dimension {found} does not match dataset dimension {expected} ({context})")]
    DimensionMismatch { expected: usize, found: usize, context: String },

    /// Actions must lie in `0..k_a`.
    #[error("action {action} out of range for {k_a} actions (trajectory {id}, step {t})")]
    ActionOutOfRange { action: usize, k_a: usize, id: String, t: usize },

    /// At least one trajectory with at least one transition is required.
    #[error("dataset contains no transitions")]
    EmptyDataset,

    /// CSV input is missing a required column.
    #[error("missing column `{0}` in CSV header")]
    MissingColumn(String),

    /// Within-trajectory decision times must be `0, 1, 2, ...`.
    #[error("trajectory {id} has time {found} at position {pos}, expected {expected}")]
    NonContiguousTime { id: String, pos: usize, found: usize, expected: usize },

    /// Each `s'` must equal the next row's `s` within a trajectory.
    #[error("trajectory {id}: state at time {t} does not continue from the previous transition")]
    AdjacencyViolation { id: String, t: usize },

    /// Policies must return finite probabilities that sum to one.
    #[error("policy `{label}` returned an invalid distribution at {context}")]
    InvalidPolicyOutput { label: String, context: String },

    /// Bandwidth selection needs at least two distinct states.
    #[error("cannot pick a bandwidth: all {0} states are identical")]
    DegenerateStates(usize),

    /// The reference point must not be orthogonal to the data under the kernel.
    #[error("reference point is kernel-orthogonal to every training point")]
    AnchorDegenerate,

    /// A linear system that should be positive definite was not.
    #[error("singular linear system: {0}")]
    SingularSystem(String),

    /// NaN or infinity encountered where finite values are required.
    #[error("non-finite values in {0}")]
    NonFiniteInput(String),

    /// Rewards must be finite.
    #[error("non-finite reward at trajectory {id}, step {t}")]
    NonFiniteReward { id: String, t: usize },

    /// Inference requires fits that share training data and kernel.
    #[error("fits were produced from different data or kernels: {0}")]
    MismatchedFits(String),

    /// Index arguments (e.g. contrast pairs) must address existing fits.
    #[error("index {index} out of range for {len} {what}")]
    IndexOutOfRange { index: usize, len: usize, what: String },

    /// Split-sample tuning needs at least two trajectories.
    #[error("need at least {need} trajectories, found {found}")]
    TooFewTrajectories { need: usize, found: usize },

    /// The validation half of a tuning split came out empty.
    #[error("validation split is empty")]
    EmptyValidation,

    /// Finite-MDP oracle computations require an irreducible chain.
    #[error("markov chain under the target policy is not irreducible: {0}")]
    NotIrreducible(String),

    /// Stationary distribution solve failed to produce a probability vector.
    #[error("no valid stationary distribution: {0}")]
    NoStationaryDistribution(String),

    /// Underlying I/O failure while reading or writing files.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed CSV content.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// Malformed numeric field in a CSV cell.
    #[error("could not parse `{value}` as {target} (row {row}, column `{column}`)")]
    ParseField { value: String, target: &'static str, row: usize, column: String },

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Configuration contents that fail semantic validation.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
