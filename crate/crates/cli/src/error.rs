use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing config key `{0}`")]
    MissingKey(String),

    #[error("config: {0}")]
    Config(String),

    #[error("numerical failure for patient {patient}: {reason}")]
    Numerical { patient: String, reason: String },

    #[error("gradient check failed: max relative error {0:e}")]
    GradientCheck(f64),

    #[error(transparent)]
    Model(lti_mogp::Error),
}

impl From<lti_mogp::Error> for CliError {
    fn from(e: lti_mogp::Error) -> Self {
        match e {
            lti_mogp::Error::Optimization { patient, reason } => CliError::Numerical { patient, reason },
            other => CliError::Model(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingKey(_) => 2,
            CliError::Numerical { .. } => 3,
            _ => 1,
        }
    }
}
