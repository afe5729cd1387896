//! MAP inference of the sparse code `α` by FISTA.
//!
//! The smooth part is `−ln P(I | α)`; the exponential prior on `α ≥ 0`
//! contributes `λ‖α‖₁` on the nonnegative orthant and is handled by its
//! proximal map. The transformation posterior is recomputed at every
//! momentum point.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::config::{GradientMode, TrainConfig};
use crate::error::{check_len, LscError, Result};
use crate::linalg::{all_finite, spectral_norm_psd};
use crate::model::{ModelParams, SparseCodingModel};
use crate::posterior::{
    expected_rotation, log_likelihood_with, posterior_grid, update_natural_params, PosteriorGrid,
    Quadrature,
};
use crate::torus::BlockRotation;

/// Safety factor on the Lipschitz estimate `‖ΦᵀWWᵀΦ‖/σ²`.
pub const LIPSCHITZ_FACTOR: f64 = 1.5;

/// Nonnegative sparse code.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode(Vec<f64>);

impl SparseCode {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(LscError::invalid(
                "sparse code entries must be finite and >= 0",
            ));
        }
        Ok(SparseCode(values))
    }

    pub fn zeros(k: usize) -> Self {
        SparseCode(vec![0.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn l1(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// `max(x − threshold, 0)` componentwise.
pub fn prox_exponential(x: &[f64], threshold: f64) -> Result<SparseCode> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(LscError::invalid(format!(
            "threshold must be nonnegative, got {threshold}"
        )));
    }
    Ok(SparseCode(prox_in(x, threshold)))
}

fn prox_in(x: &[f64], threshold: f64) -> Vec<f64> {
    x.iter().map(|&v| (v - threshold).max(0.0)).collect()
}

/// Bookkeeping for accelerated proximal gradient.
#[derive(Debug, Clone)]
pub struct FistaState {
    alpha: Vec<f64>,
    y: Vec<f64>,
    t: f64,
    step: f64,
}

impl FistaState {
    pub fn new(alpha: Vec<f64>, step: f64) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(LscError::invalid(format!(
                "step must be positive, got {step}"
            )));
        }
        Ok(FistaState {
            y: alpha.clone(),
            alpha,
            t: 1.0,
            step,
        })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Point at which the next gradient is evaluated.
    pub fn momentum_point(&self) -> &[f64] {
        &self.y
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// One proximal step from the momentum point. `ascent` is the gradient of
    /// the log-likelihood at `y`; `threshold` is `step · λ`.
    pub fn advance(&mut self, ascent: &[f64], threshold: f64) {
        let moved: Vec<f64> = self
            .y
            .iter()
            .zip(ascent)
            .map(|(y, g)| y + self.step * g)
            .collect();
        let next = prox_in(&moved, threshold);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * self.t * self.t).sqrt());
        let beta = (self.t - 1.0) / t_next;
        self.y = next
            .iter()
            .zip(&self.alpha)
            .map(|(n, a)| n + beta * (n - a))
            .collect();
        self.alpha = next;
        self.t = t_next;
    }
}

fn run_fista(
    start: Vec<f64>,
    step: f64,
    lambda: f64,
    iters: usize,
    mut ascent_at: impl FnMut(&[f64]) -> Vec<f64>,
) -> Result<Vec<f64>> {
    let mut state = FistaState::new(start, step)?;
    let threshold = step * lambda;
    for iteration in 1..=iters {
        let g = ascent_at(state.momentum_point());
        if !all_finite(&g) {
            return Err(LscError::NonFinite {
                context: "sparse inference gradient",
                iteration,
            });
        }
        state.advance(&g, threshold);
        if !all_finite(state.momentum_point()) {
            return Err(LscError::NonFinite {
                context: "sparse inference iterate",
                iteration,
            });
        }
    }
    Ok(state.alpha)
}

fn step_from_gram(gram: &DMatrix<f64>, sigma2: f64) -> Result<f64> {
    let norm = spectral_norm_psd(gram) / sigma2;
    if !norm.is_finite() || norm <= 0.0 {
        return Err(LscError::invalid(
            "dictionary has no component in the model subspace; step size undefined",
        ));
    }
    Ok(1.0 / (LIPSCHITZ_FACTOR * norm))
}

/// `1 / (1.5 ‖(1/σ²) ΦᵀWWᵀΦ‖₂)`.
pub fn fista_step_size(model: &ModelParams) -> Result<f64> {
    let a = model.coeff_dictionary();
    step_from_gram(&a.tr_mul(&a), model.sigma2)
}

/// Ascent gradient of the smooth term in representation coordinates, with
/// `A = WᵀΦ` and `v = WᵀI`:
/// exact `Aᵀ(R̄ᵀv − Aα)/σ²`, approximate `AᵀR̄ᵀ(v − R̄Aα)/σ²`.
fn coeff_gradient(
    a: &DMatrix<f64>,
    v: &[f64],
    alpha: &[f64],
    rbar: &BlockRotation,
    mode: GradientMode,
    sigma2: f64,
) -> Vec<f64> {
    let u = a * DVector::from_column_slice(alpha);
    let r = residual_coeffs(v, u.as_slice(), rbar, mode);
    let g = a.tr_mul(&DVector::from_vec(r)) / sigma2;
    g.as_slice().to_vec()
}

/// Back-rotated residual in representation coordinates; for `u = Aα`:
/// exact `R̄ᵀv − u`, approximate `R̄ᵀ(v − R̄u)`.
pub(crate) fn residual_coeffs(
    v: &[f64],
    u: &[f64],
    rbar: &BlockRotation,
    mode: GradientMode,
) -> Vec<f64> {
    match mode {
        GradientMode::Exact => rbar
            .apply_transpose(v)
            .iter()
            .zip(u)
            .map(|(a, b)| a - b)
            .collect(),
        GradientMode::Approximate => {
            let ru = rbar.apply(u);
            let diff: Vec<f64> = v.iter().zip(&ru).map(|(a, b)| a - b).collect();
            rbar.apply_transpose(&diff)
        }
    }
}

/// Gradient of `ln P(I | α)` (without the prior term) given `R̄`.
pub fn alpha_gradient(
    image: &[f64],
    alpha: &[f64],
    model: &ModelParams,
    rbar: &BlockRotation,
    mode: GradientMode,
) -> Result<Vec<f64>> {
    check_len("sparse code", model.atoms(), alpha.len())?;
    check_len("expected rotation blocks", model.blocks(), rbar.blocks())?;
    let v = model.op.analyze(image)?;
    Ok(coeff_gradient(
        &model.coeff_dictionary(),
        &v,
        alpha,
        rbar,
        mode,
        model.sigma2,
    ))
}

/// Result of inferring one image.
#[derive(Debug, Clone)]
pub struct Inferred {
    pub alpha: SparseCode,
    /// Posterior over `s` at `alpha`.
    pub grid: PosteriorGrid,
    pub rbar: BlockRotation,
    /// `WᵀI`.
    pub coeffs: Vec<f64>,
}

/// Per-model inference context; everything that does not depend on the image
/// is computed once.
#[derive(Debug, Clone)]
pub struct LscInference<'m> {
    model: &'m ModelParams,
    quad: Arc<Quadrature>,
    a: DMatrix<f64>,
    eta: Vec<f64>,
    step: f64,
    iters: usize,
    alpha0: f64,
    mode: GradientMode,
}

impl<'m> LscInference<'m> {
    pub fn new(model: &'m ModelParams, cfg: &TrainConfig) -> Result<Self> {
        Self::with_grid(model, cfg, cfg.grid_size)
    }

    pub fn with_grid(model: &'m ModelParams, cfg: &TrainConfig, grid_size: usize) -> Result<Self> {
        let quad = Arc::new(Quadrature::new(model.freq(), grid_size)?);
        Self::with_quadrature(model, cfg, quad)
    }

    pub fn with_quadrature(
        model: &'m ModelParams,
        cfg: &TrainConfig,
        quad: Arc<Quadrature>,
    ) -> Result<Self> {
        if cfg.fista_iters == 0 {
            return Err(LscError::invalid("T must be at least 1"));
        }
        let a = model.coeff_dictionary();
        let step = step_from_gram(&a.tr_mul(&a), model.sigma2)?;
        Ok(LscInference {
            model,
            quad,
            a,
            eta: model.prior.natural_params(),
            step,
            iters: cfg.fista_iters,
            alpha0: cfg.alpha0,
            mode: cfg.grad_mode,
        })
    }

    pub fn model(&self) -> &ModelParams {
        self.model
    }

    pub fn quadrature(&self) -> &Arc<Quadrature> {
        &self.quad
    }

    /// `WᵀΦ`.
    pub fn coeff_dictionary(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn mode(&self) -> GradientMode {
        self.mode
    }

    /// Posterior over `s` for code `alpha` given image coefficients `v`.
    pub fn posterior(&self, v: &[f64], alpha: &[f64]) -> Result<PosteriorGrid> {
        let u = &self.a * DVector::from_column_slice(alpha);
        let eta_hat = update_natural_params(&self.eta, u.as_slice(), v, self.model.sigma2);
        posterior_grid(&eta_hat, &self.quad)
    }

    pub fn infer(&self, image: &[f64]) -> Result<Inferred> {
        let v = self.model.op.analyze(image)?;
        let start = vec![self.alpha0; self.model.atoms()];
        let mut failure = None;
        let alpha = run_fista(
            start,
            self.step,
            self.model.lambda,
            self.iters,
            |y| match self.posterior(&v, y) {
                Ok(grid) => {
                    let rbar = expected_rotation(&grid);
                    coeff_gradient(&self.a, &v, y, &rbar, self.mode, self.model.sigma2)
                }
                Err(e) => {
                    failure = Some(e);
                    vec![f64::NAN; y.len()]
                }
            },
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let alpha = alpha?;
        let grid = self.posterior(&v, &alpha)?;
        let rbar = expected_rotation(&grid);
        Ok(Inferred {
            alpha: SparseCode(alpha),
            grid,
            rbar,
            coeffs: v,
        })
    }
}

/// Infers `α̂` for one image and returns it with the posterior over `s` at `α̂`.
pub fn infer_alpha(
    image: &[f64],
    model: &ModelParams,
    cfg: &TrainConfig,
) -> Result<(SparseCode, PosteriorGrid)> {
    let out = LscInference::new(model, cfg)?.infer(image)?;
    Ok((out.alpha, out.grid))
}

/// `−ln P(I | α) + λ‖α‖₁`, the negative log-posterior up to a constant.
pub fn neg_log_posterior(
    image: &[f64],
    alpha: &[f64],
    model: &ModelParams,
    quad: &Arc<Quadrature>,
) -> Result<f64> {
    let ll = log_likelihood_with(image, alpha, model, quad)?;
    Ok(-ll + model.lambda * alpha.iter().sum::<f64>())
}

/// FISTA for plain sparse coding, `‖I − Φα‖²/(2σ²) + λ‖α‖₁` over `α ≥ 0`.
#[derive(Debug, Clone)]
pub struct PlainInference<'m> {
    model: &'m SparseCodingModel,
    gram: DMatrix<f64>,
    step: f64,
    iters: usize,
    alpha0: f64,
}

impl<'m> PlainInference<'m> {
    pub fn new(model: &'m SparseCodingModel, cfg: &TrainConfig) -> Result<Self> {
        if cfg.fista_iters == 0 {
            return Err(LscError::invalid("T must be at least 1"));
        }
        let gram = model.phi.tr_mul(&model.phi);
        let step = step_from_gram(&gram, model.sigma2)?;
        Ok(PlainInference {
            model,
            gram,
            step,
            iters: cfg.fista_iters,
            alpha0: cfg.alpha0,
        })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn infer(&self, image: &[f64]) -> Result<SparseCode> {
        check_len("image", self.model.dim(), image.len())?;
        let b = self.model.phi.tr_mul(&DVector::from_column_slice(image));
        let s2 = self.model.sigma2;
        let start = vec![self.alpha0; self.model.phi.ncols()];
        let alpha = run_fista(start, self.step, self.model.lambda, self.iters, |y| {
            let g = (&b - &self.gram * DVector::from_column_slice(y)) / s2;
            g.as_slice().to_vec()
        })?;
        Ok(SparseCode(alpha))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posterior::{posterior_grid_for, TorusPrior};
    use crate::torus::{FrequencyTable, TorusOperator};

    fn identity_model(dim: usize, atoms: usize, sigma2: f64, lambda: f64) -> ModelParams {
        let blocks = dim / 2;
        let freq = FrequencyTable::from_entries(1, blocks, vec![0; blocks]).unwrap();
        let op = TorusOperator::new(DMatrix::identity(dim, dim), freq).unwrap();
        let phi = DMatrix::identity(dim, atoms);
        ModelParams::new(op, phi, sigma2, lambda, TorusPrior::uniform(blocks)).unwrap()
    }

    #[test]
    fn prox_examples() {
        assert_eq!(
            prox_exponential(&[0.5, -0.2], 0.0).unwrap().as_slice(),
            &[0.5, 0.0]
        );
        let out = prox_exponential(&[0.5, -0.2], 0.1).unwrap();
        assert!((out.as_slice()[0] - 0.4).abs() < 1e-15);
        assert_eq!(out.as_slice()[1], 0.0);
        assert_eq!(
            prox_exponential(&[0.3, 0.7], 0.7).unwrap().as_slice(),
            &[0.0, 0.0]
        );
        assert!(prox_exponential(&[1.0], -0.1).is_err());
    }

    #[test]
    fn step_for_orthonormal_dictionary() {
        let model = identity_model(4, 2, 1.0, 0.0);
        assert!((fista_step_size(&model).unwrap() - 1.0 / 1.5).abs() < 1e-12);
        let half = identity_model(4, 2, 0.5, 0.0);
        assert!((fista_step_size(&half).unwrap() - 0.5 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn step_rejects_dictionary_outside_subspace() {
        let freq = FrequencyTable::from_entries(1, 1, vec![1]).unwrap();
        let op = TorusOperator::new(DMatrix::identity(4, 2), freq).unwrap();
        let phi = DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 1.0, 0.0]);
        let model = ModelParams::new(op, phi, 0.01, 1.0, TorusPrior::uniform(1)).unwrap();
        assert!(fista_step_size(&model).is_err());
    }

    #[test]
    fn gradient_vanishes_outside_subspace() {
        let freq = FrequencyTable::from_entries(1, 1, vec![1]).unwrap();
        let op = TorusOperator::new(DMatrix::identity(4, 2), freq.clone()).unwrap();
        let phi = DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 1.0, 0.0]);
        let model = ModelParams::new(op, phi, 0.01, 1.0, TorusPrior::uniform(1)).unwrap();
        let image = [0.0, 0.0, 0.3, 0.4];
        let grid = posterior_grid_for(&[0.0, 0.0], &freq, 20).unwrap();
        let rbar = expected_rotation(&grid);
        for mode in [GradientMode::Exact, GradientMode::Approximate] {
            let g = alpha_gradient(&image, &[0.7], &model, &rbar, mode).unwrap();
            assert_eq!(g, vec![0.0]);
        }
    }

    #[test]
    fn degenerate_transform_reduces_to_plain_gradient() {
        let model = identity_model(6, 3, 0.01, 1.0);
        let image = [0.3, -0.1, 0.5, 0.2, 0.0, 0.4];
        let alpha = [0.2, 0.0, 0.6];
        let rbar = BlockRotation::identity(3);
        let expected: Vec<f64> = (0..3).map(|k| (image[k] - alpha[k]) / 0.01).collect();
        for mode in [GradientMode::Exact, GradientMode::Approximate] {
            let g = alpha_gradient(&image, &alpha, &model, &rbar, mode).unwrap();
            for (a, b) in g.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn approximate_gradient_matches_image_space_formula() {
        // Φᵀ T̄ᵀ (I − T̄ Φ α) / σ² evaluated with dense matrices.
        let freq = FrequencyTable::build(1, 3, 1, 3).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        let w = crate::model::random_stiefel(&mut rng, 10, 6).unwrap();
        let phi = crate::model::random_dictionary(&mut rng, 10, 4).unwrap();
        let op = TorusOperator::new(w.clone(), freq.clone()).unwrap();
        let model = ModelParams::new(op, phi.clone(), 0.05, 1.0, TorusPrior::uniform(3)).unwrap();
        let rbar = BlockRotation::from_pairs(vec![[0.9, 0.1], [0.2, -0.5], [0.0, 0.3]]);
        let tbar = &w * rbar.to_dense() * w.transpose();
        let image: Vec<f64> = (0..10).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.1).collect();
        let alpha = [0.3, 0.0, 0.8, 0.1];
        let x = &phi * DVector::from_column_slice(&alpha);
        let eps = DVector::from_column_slice(&image) - &tbar * x;
        let dense = phi.transpose() * tbar.transpose() * eps / 0.05;
        let g = alpha_gradient(&image, &alpha, &model, &rbar, GradientMode::Approximate).unwrap();
        for (a, b) in g.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn fista_state_momentum() {
        let mut st = FistaState::new(vec![1.0, 1.0], 0.5).unwrap();
        st.advance(&[2.0, -4.0], 0.0);
        assert_eq!(st.alpha(), &[2.0, 0.0]);
        assert!((st.t() - 0.5 * (1.0 + 5f64.sqrt())).abs() < 1e-15);
        assert_eq!(st.momentum_point(), &[2.0, 0.0]);
        assert!(FistaState::new(vec![0.0], 0.0).is_err());
    }

    #[test]
    fn large_lambda_kills_code() {
        let model = identity_model(4, 2, 0.01, 1e6);
        let cfg = TrainConfig {
            fista_iters: 10,
            grid_size: 8,
            ..TrainConfig::default()
        };
        let (alpha, _) = infer_alpha(&[0.5, 0.5, 0.5, 0.5], &model, &cfg).unwrap();
        assert_eq!(alpha.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn inference_is_deterministic() {
        let freq = FrequencyTable::build(1, 3, 1, 3).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
        let w = crate::model::random_stiefel(&mut rng, 8, 6).unwrap();
        let phi = crate::model::random_dictionary(&mut rng, 8, 3).unwrap();
        let op = TorusOperator::new(w, freq).unwrap();
        let model = ModelParams::new(op, phi, 0.01, 1.0, TorusPrior::uniform(3)).unwrap();
        let image: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let cfg = TrainConfig::default();
        let a = infer_alpha(&image, &model, &cfg).unwrap().0;
        let b = infer_alpha(&image, &model, &cfg).unwrap().0;
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn plain_inference_shrinks() {
        let model = SparseCodingModel {
            phi: DMatrix::identity(4, 2),
            sigma2: 0.01,
            lambda: 10.0,
        };
        let cfg = TrainConfig {
            fista_iters: 60,
            ..TrainConfig::default()
        };
        let alpha = PlainInference::new(&model, &cfg)
            .unwrap()
            .infer(&[0.8, 0.05, 0.3, 0.0])
            .unwrap();
        assert!((alpha.as_slice()[0] - 0.7).abs() < 1e-9);
        assert_eq!(alpha.as_slice()[1], 0.0);
    }
}
