use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),

    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

fn is_input(e: &ellip_lrt::Error) -> bool {
    use ellip_lrt::Error as E;
    match e {
        E::Config(_) | E::Parameter(_) | E::Dimension(_) => true,
        E::Stage { source, .. } => is_input(source),
        _ => false,
    }
}

impl From<ellip_lrt::Error> for CliError {
    fn from(e: ellip_lrt::Error) -> Self {
        if is_input(&e) {
            CliError::Input(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}
