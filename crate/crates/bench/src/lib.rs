//! Shared fixtures for the benchmarks.

use lsc_core::data::TransformSpec;
use lsc_core::{banded_templates, init_model, make_synthetic, Dataset, ModelParams, TrainConfig};

/// 16×16 cyclic-shift setting with `K = 3`, `n = 1`, `L = 8`.
pub fn desk_config() -> TrainConfig {
    TrainConfig {
        image_dim: Some(256),
        atoms: 3,
        torus_dim: 1,
        blocks: 8,
        grid_size: 50,
        lambda: 0.1,
        lr_phi: 0.01,
        ..TrainConfig::default()
    }
}

/// A 2-torus model at `D = 28²` with `L` blocks.
pub fn plane_config(blocks: usize) -> TrainConfig {
    TrainConfig {
        image_dim: Some(784),
        torus_dim: 2,
        blocks,
        lambda: 0.1,
        ..TrainConfig::default()
    }
}

pub fn model(cfg: &TrainConfig) -> ModelParams {
    init_model(cfg, 0).expect("valid config")
}

/// Normalized shifted templates of side `side`.
pub fn images(side: usize, per_template: usize) -> Dataset {
    let templates = banded_templates(side, 3).expect("valid side");
    make_synthetic(
        &templates,
        &TransformSpec::cyclic_shift_1d(side, per_template),
        0,
    )
    .and_then(|d| d.normalized())
    .expect("synthetic data")
}
