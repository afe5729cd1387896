//! Training hyperparameters and the flat `key = value` config format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{LscError, Result};

/// Which gradient of the smooth log-likelihood term is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMode {
    /// Expectation of the full per-`s` gradient under the posterior.
    Exact,
    /// `T̄` and `ε̄̂` treated as independent; the default for training.
    #[default]
    Approximate,
}

impl FromStr for GradientMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(GradientMode::Exact),
            "approximate" | "approx" => Ok(GradientMode::Approximate),
            other => Err(format!("unknown gradient mode `{other}`")),
        }
    }
}

impl fmt::Display for GradientMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradientMode::Exact => "exact",
            GradientMode::Approximate => "approximate",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Batch size.
    pub batch_size: usize,
    /// FISTA iterations per image.
    pub fista_iters: usize,
    /// Quadrature points per torus dimension.
    pub grid_size: usize,
    pub epochs: usize,
    pub lr_phi: f64,
    pub lr_w: f64,
    pub alpha0: f64,
    pub sigma2: f64,
    pub lambda: f64,
    pub seed: u64,
    pub grad_mode: GradientMode,
    /// Torus dimension `n`.
    pub torus_dim: usize,
    /// Number of rotation blocks `L`.
    pub blocks: usize,
    /// Dictionary size `K`.
    pub atoms: usize,
    /// Frequency multiplicity `m`.
    pub multiplicity: usize,
    /// Image dimension `D`; `None` means "take it from the data".
    pub image_dim: Option<usize>,
    pub include_zero_freq: bool,
    /// Prior concentration applied to every block with nonzero frequency.
    pub prior_kappa: f64,
    /// Prior phase offset shared by those blocks.
    pub prior_mu: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            fista_iters: 20,
            grid_size: 50,
            epochs: 20,
            lr_phi: 0.05,
            lr_w: 0.3,
            alpha0: 0.01,
            sigma2: 0.01,
            lambda: 10.0,
            seed: 0,
            grad_mode: GradientMode::Approximate,
            torus_dim: 2,
            blocks: 128,
            atoms: 10,
            multiplicity: 1,
            image_dim: None,
            include_zero_freq: true,
            prior_kappa: 0.0,
            prior_mu: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("B", self.batch_size),
            ("T", self.fista_iters),
            ("epochs", self.epochs),
            ("n", self.torus_dim),
            ("L", self.blocks),
            ("K", self.atoms),
            ("m", self.multiplicity),
        ];
        for (key, value) in positive {
            if value == 0 {
                return Err(LscError::invalid(format!("{key} must be positive")));
            }
        }
        if self.grid_size < 2 {
            return Err(LscError::invalid("N must be at least 2"));
        }
        let positive_real = [
            ("sigma2", self.sigma2),
            ("lr_phi", self.lr_phi),
            ("lr_w", self.lr_w),
            ("alpha0", self.alpha0),
        ];
        for (key, value) in positive_real {
            if !(value.is_finite() && value > 0.0) {
                return Err(LscError::invalid(format!("{key} must be positive")));
            }
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(LscError::invalid("lambda must be nonnegative"));
        }
        if !(self.prior_kappa.is_finite() && self.prior_kappa >= 0.0) {
            return Err(LscError::invalid("kappa must be nonnegative"));
        }
        if let Some(d) = self.image_dim {
            if d == 0 || d % 2 != 0 || 2 * self.blocks > d {
                return Err(LscError::invalid(format!(
                    "D = {d} must be even and at least 2L = {}",
                    2 * self.blocks
                )));
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Missing keys keep
    /// their defaults, unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| LscError::Config {
                line: line_no,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|message| LscError::Config {
                    line: line_no,
                    message,
                })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("cannot parse `{value}` for key `{key}`"))
        }
        match key {
            "B" => self.batch_size = num(key, value)?,
            "T" => self.fista_iters = num(key, value)?,
            "N" => self.grid_size = num(key, value)?,
            "K" => self.atoms = num(key, value)?,
            "L" => self.blocks = num(key, value)?,
            "n" => self.torus_dim = num(key, value)?,
            "m" => self.multiplicity = num(key, value)?,
            "D" => self.image_dim = Some(num(key, value)?),
            "epochs" => self.epochs = num(key, value)?,
            "sigma2" => self.sigma2 = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "lr_phi" => self.lr_phi = num(key, value)?,
            "lr_w" => self.lr_w = num(key, value)?,
            "alpha0" => self.alpha0 = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "grad_mode" => self.grad_mode = value.parse()?,
            "include_zero_freq" => self.include_zero_freq = num(key, value)?,
            "kappa" => self.prior_kappa = num(key, value)?,
            "mu" => self.prior_mu = num(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    TrainConfig::parse(&text)
}
