use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("{0}")]
    Failed(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Failed(_) | CliError::Io(_) => 1,
        })
    }
}

impl From<prefdiff::Error> for CliError {
    fn from(e: prefdiff::Error) -> Self {
        use prefdiff::Error as E;
        match e {
            E::Config(m) => CliError::Config(m),
            E::Missing(m) => CliError::Missing(m),
            E::Numerical(m) => CliError::Numerical(m),
            E::Contract(m) => CliError::Failed(format!("contract violation: {m}")),
            E::Io(e) => CliError::Io(e.to_string()),
            E::Json(e) => CliError::Io(format!("malformed JSON: {e}")),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_documented_exit_codes() {
        let cases = [
            (prefdiff::Error::Config("x".into()), 2),
            (prefdiff::Error::Missing("x".into()), 3),
            (prefdiff::Error::Numerical("x".into()), 4),
            (prefdiff::Error::Contract("x".into()), 1),
        ];
        for (e, expected) in cases {
            assert_eq!(CliError::from(e).exit_code(), ExitCode::from(expected));
        }
    }
}
