use thiserror::Error;

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] densesort_core::Error),

    #[error("a clustering job is already running for project {0}")]
    Busy(String),

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error("missing or wrong bearer token")]
    Unauthorized,
}

impl ServiceError {
    pub fn not_found(kind: &'static str, id: impl ToString) -> Self {
        ServiceError::Core(densesort_core::Error::NotFound { kind, id: id.to_string() })
    }
}
