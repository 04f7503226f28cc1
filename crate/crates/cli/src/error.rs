use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, message: String },
    #[error(transparent)]
    Core(#[from] dualmargin::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn config(line: Option<usize>, message: String) -> Self {
        CliError::Config { line, message }
    }

    /// 2 config, 3 numerical failure, 4 failed check, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use dualmargin::Error as E;
        match self {
            CliError::Config { .. } => 2,
            CliError::Core(E::InvalidArgument(_) | E::Infeasible(_) | E::Parse { .. }) => 2,
            CliError::Core(E::NonFinite { .. } | E::Diverged { .. }) => 3,
            CliError::Check(_) => 4,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Core(_) => "core",
            CliError::Io(_) => "io",
            CliError::Check(_) => "check",
        }
    }

    pub fn to_json(&self) -> String {
        let line = match self {
            CliError::Config { line, .. } => *line,
            _ => None,
        };
        json!({
            "error": self.kind(),
            "message": self.to_string(),
            "line": line,
            "exit_code": self.exit_code(),
        })
        .to_string()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}
