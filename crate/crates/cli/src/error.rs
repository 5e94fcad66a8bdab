use std::fmt;
use std::path::Path;

/// Failure of a command: a stable kind plus a one-line message.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new("usage", message)
    }

    pub fn internal(message: impl fmt::Display) -> Self {
        Self::new("internal", message.to_string())
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::new("io", format!("{}: {err}", path.display()))
    }

    /// Exit status: 2 for usage problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.kind == "usage" {
            2
        } else {
            1
        }
    }
}

impl From<psae::Error> for CliError {
    fn from(e: psae::Error) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // keep it on one line whatever the source message looks like
        let msg: Vec<&str> = self.message.split_whitespace().collect();
        write!(f, "error: {}: {}", self.kind, msg.join(" "))
    }
}
