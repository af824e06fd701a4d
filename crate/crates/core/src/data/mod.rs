//! Containers and file formats shared by the rest of the crate.

pub mod io;
pub mod manifest;
pub mod matrix;

pub use io::{load_matrix, load_matrix_auto, save_matrix, save_matrix_auto, MatrixFormat};
pub use manifest::{
    load_dataset, validate_manifest, DatasetManifest, GroupsEntry, ModelEntry, NamedLogits,
    ValidatedDataset,
};
pub use matrix::{EmbeddingMatrix, GroupVector, LabelVector, LinearHead, LogitMatrix};
