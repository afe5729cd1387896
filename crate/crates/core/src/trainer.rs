//! Learning `Φ` and `W` from image batches, and the plain sparse coding
//! baseline.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{GradientMode, TrainConfig};
use crate::data::{epoch_order, Dataset};
use crate::error::{check_len, LscError, Result};
use crate::inference::{residual_coeffs, LscInference, PlainInference};
use crate::linalg::all_finite;
use crate::manifold::{phi_update, StiefelAdam};
use crate::model::{normalize_columns, random_dictionary, ModelParams, SparseCodingModel};
use crate::posterior::{expected_rotation, PosteriorGrid, Quadrature};
use crate::torus::BlockRotation;

/// Length of the baseline's `ᾱ²` history, in batches.
pub const BASELINE_HISTORY: usize = 300;
/// Regularizer added to `ᾱ_k²` in the baseline dictionary step.
pub const BASELINE_EPS: f64 = 1e-3;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub batch: usize,
    /// Mean `‖I − T̄Φα̂‖²` over the batch.
    pub residual: f64,
    /// Mean `‖α̂‖₁` over the batch.
    pub l1: f64,
    /// Wall time since training started.
    pub seconds: f64,
}

impl fmt::Display for TrainRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{:.6e}\t{:.6e}\t{:.3}",
            self.epoch, self.batch, self.residual, self.l1, self.seconds
        )
    }
}

/// Per-image quantities from which the batch gradients are assembled.
/// With `u = WᵀΦα`: `p = R̄u`; `c` is the back-rotated residual
/// ([`residual_coeffs`]); `second` is `E[Ru uᵀRᵀ]` in exact mode.
struct ImageTerms {
    alpha: Vec<f64>,
    p: Vec<f64>,
    c: Vec<f64>,
    second: Option<DMatrix<f64>>,
    residual: f64,
}

fn image_terms(
    a: &DMatrix<f64>,
    image: &[f64],
    v: &[f64],
    alpha: &[f64],
    grid: Option<&PosteriorGrid>,
    rbar: &BlockRotation,
    mode: GradientMode,
) -> ImageTerms {
    let u = a * DVector::from_column_slice(alpha);
    let u = u.as_slice();
    let p = rbar.apply(u);
    let c = residual_coeffs(v, u, rbar, mode);
    let second = match (mode, grid) {
        (GradientMode::Exact, Some(g)) => Some(g.rotated_second_moment(u)),
        _ => None,
    };
    let image_sq: f64 = image.iter().map(|x| x * x).sum();
    let vp: f64 = v.iter().zip(&p).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|x| x * x).sum();
    ImageTerms {
        alpha: alpha.to_vec(),
        p,
        c,
        second,
        residual: (image_sq - 2.0 * vp + pp).max(0.0),
    }
}

/// Batch-mean ascent gradients with respect to `Φ` and `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub phi: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub residual: f64,
    pub l1: f64,
}

/// Sums the per-image terms in batch order:
/// `G_W = (Σ I pᵀ − W Σ M + Φ Σ α cᵀ) / (Bσ²)` with `M = ppᵀ` (approximate)
/// or `E[Ru uᵀRᵀ]` (exact), and `G_Φ = W Σ c αᵀ / (Bσ²)`.
fn assemble(model: &ModelParams, images: &[&[f64]], terms: &[ImageTerms]) -> BatchGradients {
    let b = terms.len();
    let two_l = 2 * model.blocks();
    let k = model.atoms();
    let d = model.dim();
    let p = DMatrix::from_fn(two_l, b, |i, j| terms[j].p[i]);
    let c = DMatrix::from_fn(two_l, b, |i, j| terms[j].c[i]);
    let al = DMatrix::from_fn(k, b, |i, j| terms[j].alpha[i]);
    let x = DMatrix::from_fn(d, b, |i, j| images[j][i]);
    let second = if terms.iter().all(|t| t.second.is_some()) && b > 0 {
        let mut acc = DMatrix::zeros(two_l, two_l);
        for t in terms {
            acc += t.second.as_ref().expect("checked above");
        }
        acc
    } else {
        &p * p.transpose()
    };
    let scale = 1.0 / (b as f64 * model.sigma2);
    let w = model.w();
    let gw = (x * p.transpose() - w * second + &model.phi * (&al * c.transpose())) * scale;
    let gphi = w * (c * al.transpose()) * scale;
    BatchGradients {
        phi: gphi,
        w: gw,
        residual: terms.iter().map(|t| t.residual).sum::<f64>() / b as f64,
        l1: terms
            .iter()
            .map(|t| t.alpha.iter().sum::<f64>())
            .sum::<f64>()
            / b as f64,
    }
}

fn single_image_terms(
    image: &[f64],
    alpha: &[f64],
    model: &ModelParams,
    grid: Option<&PosteriorGrid>,
    rbar: &BlockRotation,
    mode: GradientMode,
) -> Result<ImageTerms> {
    check_len("sparse code", model.atoms(), alpha.len())?;
    check_len("expected rotation blocks", model.blocks(), rbar.blocks())?;
    let v = model.op.analyze(image)?;
    Ok(image_terms(
        &model.coeff_dictionary(),
        image,
        &v,
        alpha,
        grid,
        rbar,
        mode,
    ))
}

/// Ascent gradient of `ln P(I | α̂)` with respect to `Φ` for one image.
pub fn phi_gradient(
    image: &[f64],
    alpha: &[f64],
    model: &ModelParams,
    rbar: &BlockRotation,
    mode: GradientMode,
) -> Result<DMatrix<f64>> {
    let t = single_image_terms(image, alpha, model, None, rbar, mode)?;
    Ok(assemble(model, &[image], &[t]).phi)
}

/// Ascent gradient with respect to `W` (ambient, before tangent projection)
/// for one image. The exact mode takes the second moment over `grid`.
pub fn w_gradient(
    image: &[f64],
    alpha: &[f64],
    model: &ModelParams,
    grid: &PosteriorGrid,
    mode: GradientMode,
) -> Result<DMatrix<f64>> {
    let rbar = expected_rotation(grid);
    let t = single_image_terms(image, alpha, model, Some(grid), &rbar, mode)?;
    Ok(assemble(model, &[image], &[t]).w)
}

/// Infers every image of the batch (in parallel) and reduces the gradients
/// serially in batch order.
pub fn batch_gradients(inf: &LscInference<'_>, images: &[&[f64]]) -> Result<BatchGradients> {
    if images.is_empty() {
        return Err(LscError::Empty("batch"));
    }
    let model = inf.model();
    let mode = inf.mode();
    let terms = images
        .par_iter()
        .map(|image| {
            let out = inf.infer(image)?;
            Ok(image_terms(
                inf.coeff_dictionary(),
                image,
                &out.coeffs,
                out.alpha.as_slice(),
                Some(&out.grid),
                &out.rbar,
                mode,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(model, images, &terms))
}

/// Owns the model and the optimizer state for one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: ModelParams,
    cfg: TrainConfig,
    adam: StiefelAdam,
    quad: Arc<Quadrature>,
    steps: usize,
    start: Instant,
}

impl Trainer {
    pub fn new(model: ModelParams, cfg: &TrainConfig) -> Result<Self> {
        let (rows, cols) = model.w().shape();
        let adam = StiefelAdam::new(rows, cols, cfg.lr_w)?;
        Self::with_optimizer(model, cfg, adam)
    }

    /// Uses the given optimizer state for `W` instead of a fresh default one.
    pub fn with_optimizer(
        model: ModelParams,
        cfg: &TrainConfig,
        adam: StiefelAdam,
    ) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        if adam.first_moment().shape() != model.w().shape() {
            return Err(LscError::invalid("optimizer state does not match W"));
        }
        let quad = Arc::new(Quadrature::new(model.freq(), cfg.grid_size)?);
        Ok(Trainer {
            model,
            cfg: cfg.clone(),
            adam,
            quad,
            steps: 0,
            start: Instant::now(),
        })
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn into_model(self) -> ModelParams {
        self.model
    }

    pub fn optimizer(&self) -> &StiefelAdam {
        &self.adam
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One update from a batch of unit-norm images. `Φ` and `W` gradients are
    /// both taken at the current parameters.
    pub fn step(&mut self, images: &[&[f64]], epoch: usize, batch: usize) -> Result<TrainRecord> {
        let index = self.steps;
        let grads = {
            let inf =
                LscInference::with_quadrature(&self.model, &self.cfg, Arc::clone(&self.quad))?;
            batch_gradients(&inf, images)?
        };
        if !all_finite(grads.w.as_slice()) || !all_finite(grads.phi.as_slice()) {
            return Err(LscError::NonFinite {
                context: "batch gradient",
                iteration: index,
            });
        }
        let w = self.adam.step(self.model.w(), &grads.w)?;
        let phi = phi_update(&self.model.phi, &grads.phi, self.cfg.lr_phi)?;
        if !all_finite(w.as_slice()) || !all_finite(phi.as_slice()) {
            return Err(LscError::NonFinite {
                context: "parameters after batch",
                iteration: index,
            });
        }
        self.model.op.set_basis(w);
        self.model.phi = phi;
        self.model.validate()?;
        self.steps += 1;
        Ok(TrainRecord {
            epoch,
            batch,
            residual: grads.residual,
            l1: grads.l1,
            seconds: self.start.elapsed().as_secs_f64(),
        })
    }

    /// One pass over `data` (already normalized) in the seeded epoch order.
    pub fn run_epoch(&mut self, data: &Dataset, epoch: usize) -> Result<Vec<TrainRecord>> {
        let order = epoch_order(data.len(), self.cfg.seed, epoch);
        let mut log = Vec::new();
        for (batch, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let images: Vec<&[f64]> = idx.iter().map(|&i| data.images[i].as_slice()).collect();
            log.push(self.step(&images, epoch, batch)?);
        }
        Ok(log)
    }
}

fn check_training_data(data: &Dataset, dim: usize) -> Result<Dataset> {
    if data.is_empty() {
        return Err(LscError::Empty("training data"));
    }
    data.validate()?;
    if data.dim() != dim {
        return Err(LscError::DimensionMismatch {
            what: "image dimension",
            expected: dim,
            got: data.dim(),
        });
    }
    data.normalized()
}

/// Runs `cfg.epochs` epochs of LSC training on the unit-normalized images.
pub fn train(
    model: ModelParams,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<TrainRecord>)> {
    let data = check_training_data(data, model.dim())?;
    let mut trainer = Trainer::new(model, cfg)?;
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        log.extend(trainer.run_epoch(&data, epoch)?);
    }
    Ok((trainer.into_model(), log))
}

/// Sparse coding baseline with the per-atom rescaled dictionary step.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineState {
    pub model: SparseCodingModel,
    history: VecDeque<Vec<f64>>,
    eps_reg: f64,
}

impl BaselineState {
    pub fn new(model: SparseCodingModel) -> Result<Self> {
        model.validate()?;
        Ok(BaselineState {
            model,
            history: VecDeque::with_capacity(BASELINE_HISTORY),
            eps_reg: BASELINE_EPS,
        })
    }

    /// Random nonnegative unit-norm dictionary from `seed`.
    pub fn init(cfg: &TrainConfig, dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(SparseCodingModel {
            phi: random_dictionary(&mut rng, dim, cfg.atoms)?,
            sigma2: cfg.sigma2,
            lambda: cfg.lambda,
        })
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// `ᾱ_k²` averaged over the stored batches.
    pub fn alpha_sq_mean(&self) -> Vec<f64> {
        let k = self.model.phi.ncols();
        let mut mean = vec![0.0; k];
        for h in &self.history {
            for (m, v) in mean.iter_mut().zip(h) {
                *m += v;
            }
        }
        let n = self.history.len().max(1) as f64;
        mean.iter().map(|m| m / n).collect()
    }

    /// One dictionary update; the current batch enters the history before the
    /// divisor is formed.
    pub fn step(
        &mut self,
        images: &[&[f64]],
        cfg: &TrainConfig,
        epoch: usize,
        batch: usize,
    ) -> Result<(TrainRecord, DMatrix<f64>)> {
        if images.is_empty() {
            return Err(LscError::Empty("batch"));
        }
        let inf = PlainInference::new(&self.model, cfg)?;
        let alphas = images
            .par_iter()
            .map(|im| inf.infer(im).map(|a| a.into_vec()))
            .collect::<Result<Vec<_>>>()?;
        let b = images.len();
        let (d, k) = self.model.phi.shape();
        let al = DMatrix::from_fn(k, b, |i, j| alphas[j][i]);
        let x = DMatrix::from_fn(d, b, |i, j| images[j][i]);
        let resid = x - &self.model.phi * &al;
        let grad = &resid * al.transpose() / (b as f64 * self.model.sigma2);
        let sq: Vec<f64> = (0..k)
            .map(|i| al.row(i).iter().map(|v| v * v).sum::<f64>() / b as f64)
            .collect();
        if self.history.len() == BASELINE_HISTORY {
            self.history.pop_front();
        }
        self.history.push_back(sq);
        let mut delta = grad * cfg.lr_phi;
        for (kk, m) in self.alpha_sq_mean().into_iter().enumerate() {
            delta.column_mut(kk).scale_mut(1.0 / (m + self.eps_reg));
        }
        if !all_finite(delta.as_slice()) {
            return Err(LscError::NonFinite {
                context: "baseline dictionary step",
                iteration: batch,
            });
        }
        self.model.phi = normalize_columns(&self.model.phi + &delta)?;
        let record = TrainRecord {
            epoch,
            batch,
            residual: resid.column_iter().map(|c| c.norm_squared()).sum::<f64>() / b as f64,
            l1: al.sum() / b as f64,
            seconds: 0.0,
        };
        Ok((record, delta))
    }
}

/// Trains the baseline for `cfg.epochs` epochs with the same batching as
/// [`train`].
pub fn train_baseline(
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(BaselineState, Vec<TrainRecord>)> {
    let data = check_training_data(data, data.dim())?;
    let mut state = BaselineState::init(cfg, data.dim(), cfg.seed)?;
    let start = Instant::now();
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<&[f64]> = idx.iter().map(|&i| data.images[i].as_slice()).collect();
            let (mut rec, _) = state.step(&images, cfg, epoch, batch)?;
            rec.seconds = start.elapsed().as_secs_f64();
            log.push(rec);
        }
    }
    Ok((state, log))
}
