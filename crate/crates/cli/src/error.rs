use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unreadable or invalid configuration, missing inputs.
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] smorm_core::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn is_config(&self) -> bool {
        use smorm_core::Error as E;
        match self {
            Self::Config(_) => true,
            Self::Core(e) => matches!(
                e,
                E::InvalidConfig(_)
                    | E::SchemaMismatch(_)
                    | E::Parse { .. }
                    | E::MissingGating
                    | E::MissingMultiHead
                    | E::MissingEnsembleMembers { .. }
                    | E::InvalidN(_)
            ),
            Self::Runtime(_) => false,
        }
    }

    /// `2` for configuration errors, `3` for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.is_config() {
            2
        } else {
            3
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        let kind = if self.is_config() {
            "config"
        } else {
            "runtime"
        };
        serde_json::json!({ "error": kind, "code": self.exit_code(), "message": self.to_string() })
            .to_string()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(e.into())
    }
}
