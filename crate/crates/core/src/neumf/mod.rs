//! Neural matrix factorization of the pixel matrix into a low-rank
//! reconstruction and a learned sparse remainder.

pub mod adam;
pub mod checkpoint;
pub mod loss;
pub mod mlp;
pub mod model;
pub mod smoothing;
pub mod train;

pub use checkpoint::{load_model, save_model};
pub use loss::{loss_reconstruction, loss_sparse, Entry};
pub use model::{init_mfi, init_random, EmbeddingTables, NeuMFModel, Table};
pub use smoothing::loss_gaussian_smoothing;
pub use train::{
    deploy_partial, extract_sparse_signal, reconstruct, train, DeployMode, LossRow, LossTrace,
    PartialDiagnostics, Schedule, TrainConfig,
};
