use std::fmt;

/// Every failure surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse error classes, stable across releases; the CLI reports these.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Dimension,
    Numeric,
    Contract,
    Config,
    Data,
    Checkpoint,
    Io,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Dimension => "dimension",
            Category::Numeric => "numeric",
            Category::Contract => "contract",
            Category::Config => "config",
            Category::Data => "data",
            Category::Checkpoint => "checkpoint",
            Category::Io => "io",
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 2,
            Category::Data => 3,
            Category::Checkpoint => 4,
            Category::Numeric => 5,
            Category::Dimension => 6,
            Category::Contract => 7,
            Category::Io => 8,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Shape { .. } => Category::Dimension,
            Error::Numeric { .. } => Category::Numeric,
            Error::Contract(_) => Category::Contract,
            Error::Config(_) => Category::Config,
            Error::Data(_) => Category::Data,
            Error::Checkpoint(_) => Category::Checkpoint,
            Error::Io(_) => Category::Io,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric { op, detail: detail.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
