use std::fmt;

/// Error category, printed as `error[<category>]` and mapped to the exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    /// A verification check failed.
    Check,
    Io,
    Config,
    /// Malformed model or data file.
    Format,
    /// Training diverged, sampling aborted, or another numerical failure.
    Numeric,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Check => 1,
            Category::Io => 2,
            Category::Config => 3,
            Category::Format => 4,
            Category::Numeric => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Check => "check",
            Category::Io => "io",
            Category::Config => "config",
            Category::Format => "format",
            Category::Numeric => "numeric",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Category::Config, message)
    }

    pub fn format(message: impl Into<String>) -> Self {
        Self::new(Category::Format, message)
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Self::new(Category::Io, format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // one line, so the category prefix stays machine-parsable
        write!(f, "error[{}]: {}", self.category.name(), self.message.replace('\n', " "))
    }
}

impl std::error::Error for CliError {}

impl From<trinet::Error> for CliError {
    fn from(e: trinet::Error) -> Self {
        use trinet::Error as E;
        let category = match &e {
            E::Io { .. } => Category::Io,
            E::Parse { .. } => Category::Format,
            E::Config(_) | E::InvalidDimensions(_) | E::ShapeMismatch(_) => Category::Config,
            E::NonFinite(_)
            | E::Diverged(_)
            | E::NotInvertible { .. }
            | E::ToleranceNotReached { .. }
            | E::SamplingAborted { .. }
            | E::Cholesky { .. } => Category::Numeric,
        };
        Self::new(category, e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let codes: Vec<i32> = [
            Category::Check,
            Category::Io,
            Category::Config,
            Category::Format,
            Category::Numeric,
        ]
        .iter()
        .map(|c| c.exit_code())
        .collect();
        assert_eq!(codes, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn display_is_single_line() {
        let e = CliError::config("bad\nvalue");
        assert_eq!(e.to_string(), "error[config]: bad value");
        let io: CliError = trinet::Error::Io {
            path: "x".into(),
            source: std::io::Error::other("gone"),
        }
        .into();
        assert_eq!(io.category, Category::Io);
    }
}
