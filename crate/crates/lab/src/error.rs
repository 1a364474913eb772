use std::path::{Path, PathBuf};

use addlab_core::models::ModelError;
use addlab_core::taskgen::TaskGenError;
use addlab_core::train::TrainError;
use addlab_core::vocab::VocabError;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{} already exists; pass --force to overwrite", .0.display())]
    Exists(PathBuf),
    #[error("missing {}", .0.display())]
    Missing(PathBuf),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    TaskGen(#[from] TaskGenError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> LabError + '_ {
        move |source| LabError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, message: impl std::fmt::Display) -> LabError {
        LabError::Format { path: path.to_path_buf(), message: message.to_string() }
    }
}
