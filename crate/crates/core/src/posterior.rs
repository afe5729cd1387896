//! Posterior over the transformation variable `s`.
//!
//! The prior `P(s) ∝ exp(ηᵀ t(s))`, with sufficient statistics
//! `t(s) = [cos ω_lᵀs, sin ω_lᵀs]_l`, is conjugate to the Gaussian likelihood:
//! the posterior given an image and a code is the same family with natural
//! parameter `η̂`. Normalizers and expectations are computed by uniform
//! quadrature on the periodic grid `s_j = 2πj/N`, which is spectrally
//! accurate for these integrands.

use std::f64::consts::TAU;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{check_len, LscError, Result};
use crate::model::ModelParams;
use crate::torus::{BlockRotation, FrequencyTable, TorusPoint};

/// Upper bound on `Nⁿ`.
pub const MAX_GRID_POINTS: usize = 10_000_000;

/// Conjugate prior over `s`, one von Mises–like factor per block.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusPrior {
    kappa: Vec<f64>,
    mu: Vec<f64>,
}

impl TorusPrior {
    pub fn new(kappa: Vec<f64>, mu: Vec<f64>) -> Result<Self> {
        check_len("prior phases", kappa.len(), mu.len())?;
        if kappa.iter().any(|k| !(k.is_finite() && *k >= 0.0)) {
            return Err(LscError::invalid(
                "prior concentrations must be finite and >= 0",
            ));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(LscError::invalid("prior phases must be finite"));
        }
        let mu = mu.into_iter().map(|m| m.rem_euclid(TAU)).collect();
        Ok(TorusPrior { kappa, mu })
    }

    pub fn uniform(blocks: usize) -> Self {
        TorusPrior {
            kappa: vec![0.0; blocks],
            mu: vec![0.0; blocks],
        }
    }

    pub fn is_uniform(&self) -> bool {
        self.kappa.iter().all(|&k| k == 0.0)
    }

    pub fn blocks(&self) -> usize {
        self.kappa.len()
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    /// `η = [κ_l cos μ_l, κ_l sin μ_l]_l`.
    pub fn natural_params(&self) -> Vec<f64> {
        self.kappa
            .iter()
            .zip(&self.mu)
            .flat_map(|(&k, &m)| {
                let (s, c) = m.sin_cos();
                [k * c, k * s]
            })
            .collect()
    }
}

pub fn natural_params(prior: &TorusPrior) -> Vec<f64> {
    prior.natural_params()
}

/// Uniform quadrature grid on 𝕋ⁿ with the sufficient statistics tabulated at
/// every node.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature {
    n: usize,
    size: usize,
    blocks: usize,
    /// `points × L`, point-major.
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Quadrature {
    pub fn new(freq: &FrequencyTable, size: usize) -> Result<Self> {
        if size < 2 {
            return Err(LscError::invalid("quadrature needs N >= 2"));
        }
        let n = freq.dim();
        let points = (size as u128).pow(n as u32);
        if points > MAX_GRID_POINTS as u128 {
            return Err(LscError::GridTooLarge {
                points,
                limit: MAX_GRID_POINTS,
            });
        }
        let points = points as usize;
        let blocks = freq.len();
        let mut cos = Vec::with_capacity(points * blocks);
        let mut sin = Vec::with_capacity(points * blocks);
        let mut index = vec![0i64; n];
        for j in 0..points {
            decompose(j, size, &mut index);
            for w in freq.entries() {
                // ω·j is an integer, so reduce it exactly before scaling.
                let k: i64 = w.iter().zip(&index).map(|(&a, &b)| a as i64 * b).sum();
                let theta = TAU * (k.rem_euclid(size as i64) as f64) / size as f64;
                let (s, c) = theta.sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Ok(Quadrature {
            n,
            size,
            blocks,
            cos,
            sin,
        })
    }

    pub fn points(&self) -> usize {
        self.cos.len().checked_div(self.blocks).unwrap_or(0)
    }

    /// Samples per dimension `N`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    /// Grid coordinate of flat index `j` (last dimension varies fastest).
    pub fn point(&self, j: usize) -> TorusPoint {
        let mut index = vec![0i64; self.n];
        decompose(j, self.size, &mut index);
        TorusPoint::new(
            index
                .iter()
                .map(|&i| TAU * i as f64 / self.size as f64)
                .collect(),
        )
    }

    /// Log of the volume element `(2π/N)ⁿ`.
    pub fn log_cell(&self) -> f64 {
        self.n as f64 * (TAU / self.size as f64).ln()
    }

    #[inline]
    fn row(&self, j: usize) -> (&[f64], &[f64]) {
        let r = j * self.blocks..(j + 1) * self.blocks;
        (&self.cos[r.clone()], &self.sin[r])
    }

    /// `ηᵀ t(s_j)`.
    #[inline]
    pub fn energy(&self, eta: &[f64], j: usize) -> f64 {
        let (c, s) = self.row(j);
        let mut e = 0.0;
        for l in 0..self.blocks {
            e += eta[2 * l] * c[l] + eta[2 * l + 1] * s[l];
        }
        e
    }

    /// `R(s_j)` at a grid node.
    pub fn rotation(&self, j: usize) -> BlockRotation {
        let (c, s) = self.row(j);
        BlockRotation::from_pairs(c.iter().zip(s).map(|(&c, &s)| [c, s]).collect())
    }

    /// `ln Z(η)` by quadrature with a max shift.
    pub fn log_normalizer(&self, eta: &[f64]) -> f64 {
        let energies: Vec<f64> = (0..self.points()).map(|j| self.energy(eta, j)).collect();
        let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = energies.iter().map(|e| (e - max).exp()).sum();
        self.log_cell() + max + sum.ln()
    }
}

fn decompose(mut j: usize, size: usize, out: &mut [i64]) {
    for slot in out.iter_mut().rev() {
        *slot = (j % size) as i64;
        j /= size;
    }
}

/// Grid-discretized posterior `P(s | I, α) ∝ exp(η̂ᵀ t(s))`.
#[derive(Debug, Clone)]
pub struct PosteriorGrid {
    quad: Arc<Quadrature>,
    eta_hat: Vec<f64>,
    weights: Vec<f64>,
    log_z: f64,
}

impl PosteriorGrid {
    pub fn quadrature(&self) -> &Quadrature {
        &self.quad
    }

    pub fn eta_hat(&self) -> &[f64] {
        &self.eta_hat
    }

    /// Normalized weights, summing to one.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `ln Z(η̂)` under the grid quadrature.
    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    /// A posterior concentrated on grid node `j`, for tests of degenerate cases.
    pub fn point_mass(quad: Arc<Quadrature>, j: usize) -> Self {
        let mut weights = vec![0.0; quad.points()];
        weights[j] = 1.0;
        PosteriorGrid {
            eta_hat: vec![0.0; 2 * quad.blocks()],
            log_z: f64::NEG_INFINITY,
            quad,
            weights,
        }
    }

    /// `E[R(s) u (R(s) u)ᵀ]` over the grid.
    pub fn rotated_second_moment(&self, u: &[f64]) -> DMatrix<f64> {
        let dim = u.len();
        let mut acc = DMatrix::zeros(dim, dim);
        for (j, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let ru = nalgebra::DVector::from_vec(self.quad.rotation(j).apply(u));
            acc.ger(w, &ru, &ru, 1.0);
        }
        acc
    }
}

/// `η̂ = η + (1/σ²)[u_1 v_1 + u_2 v_2, u_1 v_2 − u_2 v_1]_l` for `u = WᵀΦα`
/// and `v = WᵀI`.
pub fn update_natural_params(eta: &[f64], u: &[f64], v: &[f64], sigma2: f64) -> Vec<f64> {
    let mut out = eta.to_vec();
    for l in 0..eta.len() / 2 {
        let (u1, u2) = (u[2 * l], u[2 * l + 1]);
        let (v1, v2) = (v[2 * l], v[2 * l + 1]);
        out[2 * l] += (u1 * v1 + u2 * v2) / sigma2;
        out[2 * l + 1] += (u1 * v2 - u2 * v1) / sigma2;
    }
    out
}

pub fn posterior_natural_params(
    image: &[f64],
    alpha: &[f64],
    model: &ModelParams,
) -> Result<Vec<f64>> {
    check_len("sparse code", model.atoms(), alpha.len())?;
    let v = model.op.analyze(image)?;
    let u = code_coefficients(model, alpha);
    Ok(update_natural_params(
        &model.prior.natural_params(),
        &u,
        &v,
        model.sigma2,
    ))
}

/// `WᵀΦα`.
pub(crate) fn code_coefficients(model: &ModelParams, alpha: &[f64]) -> Vec<f64> {
    let x = &model.phi * nalgebra::DVector::from_column_slice(alpha);
    model.w().tr_mul(&x).as_slice().to_vec()
}

/// Evaluates the posterior on the grid.
pub fn posterior_grid(eta_hat: &[f64], quad: &Arc<Quadrature>) -> Result<PosteriorGrid> {
    check_len("natural parameter", 2 * quad.blocks(), eta_hat.len())?;
    let points = quad.points();
    let mut weights: Vec<f64> = (0..points).map(|j| quad.energy(eta_hat, j)).collect();
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for w in weights.iter_mut() {
        *w = (*w - max).exp();
        sum += *w;
    }
    let inv = 1.0 / sum;
    for w in weights.iter_mut() {
        *w *= inv;
    }
    Ok(PosteriorGrid {
        quad: Arc::clone(quad),
        eta_hat: eta_hat.to_vec(),
        weights,
        log_z: quad.log_cell() + max + sum.ln(),
    })
}

/// Builds a quadrature for `(freq, size)` and evaluates the posterior on it.
pub fn posterior_grid_for(
    eta_hat: &[f64],
    freq: &FrequencyTable,
    size: usize,
) -> Result<PosteriorGrid> {
    posterior_grid(eta_hat, &Arc::new(Quadrature::new(freq, size)?))
}

/// `R̄ = E[R(s)]`, blockwise.
pub fn expected_rotation(grid: &PosteriorGrid) -> BlockRotation {
    let quad = grid.quadrature();
    let blocks = quad.blocks();
    let mut pairs = vec![[0.0, 0.0]; blocks];
    for (j, &w) in grid.weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let (c, s) = quad.row(j);
        for l in 0..blocks {
            pairs[l][0] += w * c[l];
            pairs[l][1] += w * s[l];
        }
    }
    BlockRotation::from_pairs(pairs)
}

/// Grid node of maximal posterior weight; the lowest flat index wins ties.
pub fn map_s(grid: &PosteriorGrid) -> TorusPoint {
    let mut best = 0;
    for (j, &w) in grid.weights.iter().enumerate() {
        if w > grid.weights[best] {
            best = j;
        }
    }
    grid.quadrature().point(best)
}

/// Closed-form `ln P(I | α)`:
/// `−(‖WᵀΦα‖² + ‖I‖²)/(2σ²) − (D/2) ln(2πσ²) + ln Z(η̂) − ln Z(η)`.
pub fn log_likelihood(
    image: &[f64],
    alpha: &[f64],
    model: &ModelParams,
    grid_size: usize,
) -> Result<f64> {
    let quad = Arc::new(Quadrature::new(model.freq(), grid_size)?);
    log_likelihood_with(image, alpha, model, &quad)
}

pub fn log_likelihood_with(
    image: &[f64],
    alpha: &[f64],
    model: &ModelParams,
    quad: &Arc<Quadrature>,
) -> Result<f64> {
    check_len("sparse code", model.atoms(), alpha.len())?;
    let v = model.op.analyze(image)?;
    let u = code_coefficients(model, alpha);
    let eta = model.prior.natural_params();
    let eta_hat = update_natural_params(&eta, &u, &v, model.sigma2);
    let log_z_hat = posterior_grid(&eta_hat, quad)?.log_z();
    let image_sq: f64 = image.iter().map(|x| x * x).sum();
    Ok(gaussian_part(model, &u, image_sq) + log_z_hat - quad.log_normalizer(&eta))
}

fn gaussian_part(model: &ModelParams, u: &[f64], image_sq: f64) -> f64 {
    let u_sq: f64 = u.iter().map(|x| x * x).sum();
    let s2 = model.sigma2;
    -(u_sq + image_sq) / (2.0 * s2) - 0.5 * model.dim() as f64 * (TAU * s2).ln()
}
