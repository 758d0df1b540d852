use std::fmt;

/// Crate-wide error type. Variants map onto the CLI exit codes, so every
/// failure surfaced to a user carries enough structure to pick one.
#[derive(Debug)]
pub enum Error {
    /// Shape or argument mismatch inside the autodiff graph. Names the
    /// offending op and the expected/actual shapes.
    Shape { op: &'static str, detail: String },
    /// Invalid configuration (unknown key, bad value, infeasible settings).
    Config(String),
    /// Filesystem failure wrapping the underlying I/O error.
    Io { path: String, source: std::io::Error },
    /// Malformed input file with a 1-based line number where known.
    Parse { path: String, line: usize, msg: String },
    /// Symbol outside the vocabulary, or misuse of a reserved token.
    Vocab(String),
    /// Entity dictionary violation (reserved symbols, bad indices).
    Dict(String),
    /// Training failure, e.g. a non-finite loss.
    Train(String),
    /// No valid CTC alignment exists for the given frame/label lengths.
    NoValidAlignment { frames: usize, min_frames: usize },
    /// Decoding failure, e.g. a missing dictionary in copy mode.
    Decode(String),
    /// Scoring failure, e.g. reference/hypothesis id mismatch.
    Eval(String),
    /// Corrupt or incompatible checkpoint.
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), line, msg: msg.into() }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in `{op}`: {detail}"),
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::Io { path, source } => write!(f, "i/o error on `{path}`: {source}"),
            Error::Parse { path, line, msg } => {
                write!(f, "parse error in `{path}` line {line}: {msg}")
            }
            Error::Vocab(msg) => write!(f, "vocabulary error: {msg}"),
            Error::Dict(msg) => write!(f, "dictionary error: {msg}"),
            Error::Train(msg) => write!(f, "training error: {msg}"),
            Error::NoValidAlignment { frames, min_frames } => write!(
                f,
                "no valid alignment: {frames} frames but the label sequence needs at least {min_frames}"
            ),
            Error::Decode(msg) => write!(f, "decode error: {msg}"),
            Error::Eval(msg) => write!(f, "eval error: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
