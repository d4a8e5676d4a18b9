use std::fmt;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("function is not deterministic: two evaluations at the same point differ")]
    NonDeterministic,
    #[error("training-mode normalization needs at least 2 samples per statistic, got {0}")]
    BatchTooSmall(usize),
    #[error("modality {0} is absent from the batch but the separate branch is active")]
    ModalityAbsent(Modality),
    #[error("class {class} has no {modality} features")]
    MissingModality { class: u32, modality: Modality },
    #[error("degenerate features: row {0} of the Gram matrix has zero norm")]
    DegenerateFeatures(usize),
    #[error("architecture: {0}")]
    Architecture(String),
    #[error("config: {0}")]
    Config(String),
    #[error("split: {0}")]
    Split(String),
    #[error("sampler: {0}")]
    Sampler(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Imaging modality of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    /// Visible-spectrum (modality A of the synthetic generator).
    Vis,
    /// Infrared (modality B of the synthetic generator).
    Ir,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::Vis => Modality::Ir,
            Modality::Ir => Modality::Vis,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Vis => "vis",
            Modality::Ir => "ir",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vis" | "a" | "A" => Ok(Modality::Vis),
            "ir" | "b" | "B" => Ok(Modality::Ir),
            other => Err(Error::InvalidArgument(format!("unknown modality '{other}'"))),
        }
    }
}
