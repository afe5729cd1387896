use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::TrainConfig;
use crate::error::{LscError, Result};
use crate::linalg::qr_positive;
use crate::posterior::TorusPrior;
use crate::torus::{FrequencyTable, TorusOperator};

/// Tolerance on dictionary column norms.
pub const ATOM_NORM_TOL: f64 = 1e-10;

/// Learnable state of a Lie group sparse coding model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub op: TorusOperator,
    /// `D × K` dictionary with unit-norm columns.
    pub phi: DMatrix<f64>,
    pub sigma2: f64,
    pub lambda: f64,
    pub prior: TorusPrior,
}

impl ModelParams {
    pub fn new(
        op: TorusOperator,
        phi: DMatrix<f64>,
        sigma2: f64,
        lambda: f64,
        prior: TorusPrior,
    ) -> Result<Self> {
        let model = ModelParams {
            op,
            phi,
            sigma2,
            lambda,
            prior,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.op.validate()?;
        if self.phi.nrows() != self.op.dim() {
            return Err(LscError::DimensionMismatch {
                what: "dictionary rows (D)",
                expected: self.op.dim(),
                got: self.phi.nrows(),
            });
        }
        check_atoms(&self.phi)?;
        check_noise(self.sigma2, self.lambda)?;
        if self.prior.blocks() != self.op.blocks() {
            return Err(LscError::DimensionMismatch {
                what: "prior blocks",
                expected: self.op.blocks(),
                got: self.prior.blocks(),
            });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    pub fn atoms(&self) -> usize {
        self.phi.ncols()
    }

    pub fn blocks(&self) -> usize {
        self.op.blocks()
    }

    pub fn w(&self) -> &DMatrix<f64> {
        self.op.basis()
    }

    pub fn freq(&self) -> &FrequencyTable {
        self.op.freq()
    }

    /// Dictionary expressed in the representation basis, `WᵀΦ` (`2L × K`).
    pub fn coeff_dictionary(&self) -> DMatrix<f64> {
        self.w().tr_mul(&self.phi)
    }
}

/// Plain sparse coding model (identity transform), used as the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCodingModel {
    pub phi: DMatrix<f64>,
    pub sigma2: f64,
    pub lambda: f64,
}

impl SparseCodingModel {
    pub fn validate(&self) -> Result<()> {
        check_atoms(&self.phi)?;
        check_noise(self.sigma2, self.lambda)
    }

    pub fn dim(&self) -> usize {
        self.phi.nrows()
    }
}

fn check_atoms(phi: &DMatrix<f64>) -> Result<()> {
    if phi.ncols() == 0 {
        return Err(LscError::InvariantViolation(
            "dictionary has no atoms".into(),
        ));
    }
    for (k, col) in phi.column_iter().enumerate() {
        let norm = col.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > ATOM_NORM_TOL {
            return Err(LscError::InvariantViolation(format!(
                "dictionary column {k} has norm {norm}, expected 1"
            )));
        }
    }
    Ok(())
}

fn check_noise(sigma2: f64, lambda: f64) -> Result<()> {
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(LscError::InvariantViolation(format!(
            "sigma2 = {sigma2} must be positive"
        )));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(LscError::InvariantViolation(format!(
            "lambda = {lambda} must be nonnegative"
        )));
    }
    Ok(())
}

pub fn normalize_columns(mut m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    for (k, mut col) in m.column_iter_mut().enumerate() {
        let norm = col.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(LscError::DegenerateAtom(k));
        }
        col /= norm;
    }
    Ok(m)
}

/// Dictionary of normalized nonnegative uniform noise.
pub fn random_dictionary(rng: &mut ChaCha8Rng, dim: usize, atoms: usize) -> Result<DMatrix<f64>> {
    let data: Vec<f64> = (0..dim * atoms).map(|_| rng.random::<f64>()).collect();
    normalize_columns(DMatrix::from_column_slice(dim, atoms, &data))
}

/// Random orthonormal `rows × cols` matrix: QR of a standard-normal draw.
pub fn random_stiefel(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    qr_positive(&DMatrix::from_column_slice(rows, cols, &data))
}

pub fn prior_from_config(cfg: &TrainConfig, freq: &FrequencyTable) -> Result<TorusPrior> {
    let kappa = freq
        .entries()
        .map(|w| {
            if w.iter().all(|&x| x == 0) {
                0.0
            } else {
                cfg.prior_kappa
            }
        })
        .collect();
    TorusPrior::new(kappa, vec![cfg.prior_mu; freq.len()])
}

/// Initial parameters: random orthonormal `W`, nonnegative random unit-norm
/// atoms and the prior configured in `cfg` (uniform by default).
pub fn init_model(cfg: &TrainConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let dim = cfg
        .image_dim
        .ok_or_else(|| LscError::invalid("image dimension D is not set"))?;
    if dim % 2 != 0 || 2 * cfg.blocks > dim {
        return Err(LscError::invalid(format!(
            "D = {dim} must be even and at least 2L = {}",
            2 * cfg.blocks
        )));
    }
    let freq = FrequencyTable::for_model(
        cfg.torus_dim,
        cfg.blocks,
        cfg.multiplicity,
        cfg.include_zero_freq,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_stiefel(&mut rng, dim, 2 * cfg.blocks)?;
    let phi = random_dictionary(&mut rng, dim, cfg.atoms)?;
    let prior = prior_from_config(cfg, &freq)?;
    ModelParams::new(
        TorusOperator::new(w, freq)?,
        phi,
        cfg.sigma2,
        cfg.lambda,
        prior,
    )
}
