use mgcp::MgcpError;

/// Process exit codes.
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_OPTIMIZATION: u8 = 4;
pub const EXIT_IO: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("optimization error: {0}")]
    Optimization(String),
    #[error("output error: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Optimization(_) => EXIT_OPTIMIZATION,
            CliError::Output(_) => EXIT_IO,
        }
    }
}

impl From<MgcpError> for CliError {
    fn from(e: MgcpError) -> Self {
        let msg = e.to_string();
        match e {
            MgcpError::Config { .. } | MgcpError::Domain(_) => CliError::Config(msg),
            MgcpError::OptimizationFailed { .. } => CliError::Optimization(msg),
            MgcpError::DimensionMismatch { .. }
            | MgcpError::InvalidData(_)
            | MgcpError::IndefiniteCovariance { .. }
            | MgcpError::Bandwidth(_)
            | MgcpError::Combination(_) => CliError::Data(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_errors_map_to_exit_codes() {
        let code = |e: MgcpError| CliError::from(e).exit_code();
        assert_eq!(code(MgcpError::config("gamma", "must be non-negative")), EXIT_CONFIG);
        assert_eq!(code(MgcpError::Domain("shared_features is empty".into())), EXIT_CONFIG);
        assert_eq!(code(MgcpError::InvalidData("NaN".into())), EXIT_DATA);
        let failed = MgcpError::OptimizationFailed {
            restarts: 5,
            messages: vec!["restart 0: indefinite".into()],
        };
        assert_eq!(code(failed), EXIT_OPTIMIZATION);
        assert_eq!(CliError::Output("disk full".into()).exit_code(), EXIT_IO);
    }
}
