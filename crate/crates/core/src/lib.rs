//! Lie group sparse coding on commutative (torus) transformation groups.
//!
//! Images are modeled as `I = W R(s) Wᵀ Φ α + ε`, with `W` orthonormal,
//! `R(s)` block-diagonal 2×2 rotations, `Φ` a unit-norm dictionary and `α`
//! a nonnegative sparse code. Inference of `s` is exact on a quadrature grid.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod linalg;
pub mod manifold;
pub mod model;
pub mod posterior;
pub mod torus;
pub mod trainer;

pub use checkpoint::{
    load_checkpoint, load_dataset, save_checkpoint, save_dataset, Checkpoint, StoredModel,
};
pub use config::{parse_config, GradientMode, TrainConfig};
pub use data::{
    banded_templates, load_idx_images, load_idx_labels, make_synthetic, normalize_batch,
    warp_rot_scale, warp_translate, write_idx_images, Dataset, TransformKind, TransformSpec,
};
pub use error::{LscError, Result};
pub use eval::{
    export_grid, latent_traversal, reconstruct, reconstruct_baseline, snr, Reconstruction,
    Reconstructor,
};
pub use inference::{
    alpha_gradient, fista_step_size, infer_alpha, neg_log_posterior, prox_exponential, FistaState,
    Inferred, LscInference, PlainInference, SparseCode,
};
pub use manifold::{phi_update, retract, tangent_project, SecondMoment, StiefelAdam};
pub use model::{init_model, ModelParams, SparseCodingModel};
pub use posterior::{
    expected_rotation, log_likelihood, map_s, posterior_grid, posterior_grid_for,
    posterior_natural_params, PosteriorGrid, Quadrature, TorusPrior,
};
pub use torus::{apply_transform, BlockRotation, FrequencyTable, TorusOperator, TorusPoint};
pub use trainer::{
    batch_gradients, phi_gradient, train, train_baseline, w_gradient, BaselineState,
    BatchGradients, TrainRecord, Trainer,
};
