//! Parameter updates: Riemannian Adam on the Stiefel manifold for `W`,
//! projected ascent with column renormalization for `Φ`.

use nalgebra::DMatrix;

use crate::error::{LscError, Result};
use crate::linalg::{all_finite, qr_positive};
use crate::model::normalize_columns;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

fn check_shape(what: &'static str, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LscError::InvalidArgument(format!(
            "{what}: shape {:?} does not match {:?}",
            b.shape(),
            a.shape()
        )));
    }
    Ok(())
}

/// `G − W sym(WᵀG)`.
pub fn tangent_project(w: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_shape("tangent vector", w, g)?;
    let wtg = w.tr_mul(g);
    let sym = (&wtg + wtg.transpose()) * 0.5;
    Ok(g - w * sym)
}

/// QR retraction of `W + X` with positive diagonal in `R`.
pub fn retract(w: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_shape("retraction step", w, x)?;
    qr_positive(&(w + x))
}

/// How Adam's second moment is pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SecondMoment {
    /// One scalar `‖g‖²_F` shared by the whole matrix, so the step has
    /// Frobenius norm close to the learning rate.
    #[default]
    PerMatrix,
    /// Elementwise `g²`, as in Euclidean Adam.
    PerEntry,
}

/// Riemannian Adam state for one Stiefel-valued parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelAdam {
    step_count: u64,
    m1: DMatrix<f64>,
    m2: DMatrix<f64>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    moment: SecondMoment,
}

impl StiefelAdam {
    pub fn new(rows: usize, cols: usize, lr: f64) -> Result<Self> {
        Self::with_moment(rows, cols, lr, SecondMoment::default())
    }

    pub fn with_moment(rows: usize, cols: usize, lr: f64, moment: SecondMoment) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(LscError::invalid(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        Ok(StiefelAdam {
            step_count: 0,
            m1: DMatrix::zeros(rows, cols),
            m2: DMatrix::zeros(rows, cols),
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            moment,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &DMatrix<f64> {
        &self.m1
    }

    pub fn second_moment(&self) -> &DMatrix<f64> {
        &self.m2
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn moment(&self) -> SecondMoment {
        self.moment
    }

    /// One ascent step along the ambient gradient `g`; returns the new point.
    pub fn step(&mut self, w: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_shape("adam buffers", &self.m1, w)?;
        check_shape("gradient", w, g)?;
        if !all_finite(g.as_slice()) {
            return Err(LscError::NonFinite {
                context: "stiefel gradient",
                iteration: self.step_count as usize + 1,
            });
        }
        let grad = tangent_project(w, g)?;
        self.step_count += 1;
        let t = self.step_count as i32;
        self.m1 = &self.m1 * self.beta1 + &grad * (1.0 - self.beta1);
        match self.moment {
            SecondMoment::PerMatrix => {
                let sq = grad.norm_squared();
                self.m2
                    .apply(|v| *v = self.beta2 * *v + (1.0 - self.beta2) * sq);
            }
            SecondMoment::PerEntry => {
                self.m2.zip_apply(&grad, |v, g| {
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g
                });
            }
        }
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut dir = &self.m1 / bc1;
        dir.zip_apply(&self.m2, |d, v| *d /= (v / bc2).sqrt() + self.eps);
        let next = retract(w, &(dir * self.lr))?;
        self.m1 = tangent_project(&next, &self.m1)?;
        Ok(next)
    }
}

/// `Φ + lr·G` with every column renormalized to unit length.
pub fn phi_update(phi: &DMatrix<f64>, g: &DMatrix<f64>, lr: f64) -> Result<DMatrix<f64>> {
    check_shape("dictionary gradient", phi, g)?;
    if !all_finite(g.as_slice()) {
        return Err(LscError::NonFinite {
            context: "dictionary gradient",
            iteration: 0,
        });
    }
    normalize_columns(phi + g * lr)
}
