use core::fmt;

/// Errors raised by the core operators.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not conform.
    Shape {
        op: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    /// A softmax row had every entry masked out.
    EmptySupport,
    /// An argument violated its precondition.
    InvalidArgument(&'static str),
    /// A NaN or infinity showed up where finite values are required.
    NonFinite(&'static str),
    /// The operation needs at least one prior step.
    EmptyState,
    /// Mutually incompatible configuration options.
    Config(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, expected, found } => write!(
                f,
                "{op}: shape mismatch, expected {}x{}, found {}x{}",
                expected.0, expected.1, found.0, found.1
            ),
            Error::EmptySupport => f.write_str("softmax over an empty (fully masked) row"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::EmptyState => f.write_str("no values have been pushed yet"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
