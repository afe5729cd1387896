//! Reconstruction quality, latent traversals and PGM image grids.

use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::error::{LscError, Result};
use crate::inference::{LscInference, PlainInference, SparseCode};
use crate::model::{ModelParams, SparseCodingModel};
use crate::posterior::map_s;
use crate::torus::TorusPoint;

/// Quadrature size used when scoring reconstructions.
pub const EVAL_GRID_SIZE: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub alpha_hat: SparseCode,
    pub s_hat: TorusPoint,
    /// `T(ŝ) Φ α̂`.
    pub image_hat: Vec<f64>,
}

/// Reconstructs images with a fixed model; inference context built once.
#[derive(Debug, Clone)]
pub struct Reconstructor<'m> {
    inf: LscInference<'m>,
}

impl<'m> Reconstructor<'m> {
    pub fn new(model: &'m ModelParams, cfg: &TrainConfig) -> Result<Self> {
        Self::with_grid(model, cfg, EVAL_GRID_SIZE)
    }

    pub fn with_grid(model: &'m ModelParams, cfg: &TrainConfig, grid_size: usize) -> Result<Self> {
        Ok(Reconstructor {
            inf: LscInference::with_grid(model, cfg, grid_size)?,
        })
    }

    pub fn reconstruct(&self, image: &[f64]) -> Result<Reconstruction> {
        let model = self.inf.model();
        let out = self.inf.infer(image)?;
        let s_hat = map_s(&out.grid);
        let code = &model.phi * DVector::from_column_slice(out.alpha.as_slice());
        let image_hat = model.op.apply(&s_hat, code.as_slice())?;
        Ok(Reconstruction {
            alpha_hat: out.alpha,
            s_hat,
            image_hat,
        })
    }

    pub fn reconstruct_all(&self, images: &[Vec<f64>]) -> Result<Vec<Reconstruction>> {
        images.par_iter().map(|im| self.reconstruct(im)).collect()
    }
}

/// `α̂` by inference on an `N = 100` grid, `ŝ` its MAP node, `Î = T(ŝ)Φα̂`.
pub fn reconstruct(
    image: &[f64],
    model: &ModelParams,
    cfg: &TrainConfig,
) -> Result<Reconstruction> {
    Reconstructor::new(model, cfg)?.reconstruct(image)
}

/// `Φα̂` for every image under the plain sparse coding model.
pub fn reconstruct_baseline(
    images: &[Vec<f64>],
    model: &SparseCodingModel,
    cfg: &TrainConfig,
) -> Result<Vec<Vec<f64>>> {
    let inf = PlainInference::new(model, cfg)?;
    images
        .par_iter()
        .map(|im| {
            let alpha = inf.infer(im)?;
            Ok((&model.phi * DVector::from_column_slice(alpha.as_slice()))
                .as_slice()
                .to_vec())
        })
        .collect()
}

/// Pooled power ratio `Σ‖I‖² / Σ‖I − Î‖²`; infinite when every residual is
/// exactly zero.
pub fn snr(images: &[Vec<f64>], estimates: &[Vec<f64>]) -> Result<f64> {
    if images.is_empty() {
        return Err(LscError::Empty("evaluation set"));
    }
    if images.len() != estimates.len() {
        return Err(LscError::DimensionMismatch {
            what: "reconstruction count",
            expected: images.len(),
            got: estimates.len(),
        });
    }
    let mut signal = 0.0;
    let mut noise = 0.0;
    for (im, est) in images.iter().zip(estimates) {
        if im.len() != est.len() {
            return Err(LscError::DimensionMismatch {
                what: "reconstruction length",
                expected: im.len(),
                got: est.len(),
            });
        }
        for (a, b) in im.iter().zip(est) {
            signal += a * a;
            noise += (a - b) * (a - b);
        }
    }
    Ok(if noise == 0.0 {
        f64::INFINITY
    } else {
        signal / noise
    })
}

pub fn snr_of(images: &[Vec<f64>], recons: &[Reconstruction]) -> Result<f64> {
    let est: Vec<Vec<f64>> = recons.iter().map(|r| r.image_hat.clone()).collect();
    snr(images, &est)
}

/// `T(s) I` with `s` zero except coordinate `dim` (0-based), which takes
/// `steps` evenly spaced values from `s_from` to `s_to`. Row-major: one row
/// per image, one column per step.
pub fn latent_traversal(
    model: &ModelParams,
    images: &[Vec<f64>],
    dim: usize,
    s_from: f64,
    s_to: f64,
    steps: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = model.freq().dim();
    if dim >= n {
        return Err(LscError::invalid(format!(
            "traversal dimension {dim} out of range for a {n}-torus"
        )));
    }
    if steps < 2 {
        return Err(LscError::invalid("a traversal needs at least 2 steps"));
    }
    let mut out = Vec::with_capacity(images.len() * steps);
    for im in images {
        for j in 0..steps {
            let mut s = vec![0.0; n];
            s[dim] = s_from + (s_to - s_from) * j as f64 / (steps - 1) as f64;
            out.push(model.op.apply(&TorusPoint::new(s), im)?);
        }
    }
    Ok(out)
}

/// Binary PGM of `images` (each `width × height`, row-major) tiled `cols` per
/// row with 1-pixel zero separators; intensities min-max scaled over the
/// whole grid.
pub fn encode_grid(
    images: &[Vec<f64>],
    width: usize,
    height: usize,
    cols: usize,
) -> Result<Vec<u8>> {
    if images.is_empty() {
        return Err(LscError::Empty("image grid"));
    }
    if cols == 0 {
        return Err(LscError::invalid("grid needs at least one column"));
    }
    if let Some(bad) = images.iter().find(|im| im.len() != width * height) {
        return Err(LscError::DimensionMismatch {
            what: "grid image size",
            expected: width * height,
            got: bad.len(),
        });
    }
    let cols = cols.min(images.len());
    let rows = images.len().div_ceil(cols);
    let gw = cols * width + cols - 1;
    let gh = rows * height + rows - 1;
    let (lo, hi) = images
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let mut pixels = vec![0u8; gw * gh];
    for (idx, im) in images.iter().enumerate() {
        let (r0, c0) = ((idx / cols) * (height + 1), (idx % cols) * (width + 1));
        for y in 0..height {
            for x in 0..width {
                let v = im[y * width + x];
                let q = if range > 0.0 {
                    ((v - lo) / range * 255.0).round() as u8
                } else {
                    0
                };
                pixels[(r0 + y) * gw + c0 + x] = q;
            }
        }
    }
    let mut out = format!("P5 {gw} {gh} 255\n").into_bytes();
    out.extend(pixels);
    Ok(out)
}

/// Square images of side `side`; see [`encode_grid`].
pub fn export_grid(
    images: &[Vec<f64>],
    side: usize,
    cols: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, encode_grid(images, side, side, cols)?)?;
    Ok(())
}

/// Parses a binary PGM with maxval 255; returns `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(LscError::Truncated {
                offset: pos,
                needed: pos + 1,
            });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(LscError::invalid("not an 8-bit binary PGM"));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| LscError::invalid(format!("bad PGM dimension `{s}`")))
    };
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    if bytes.len() < pos + w * h {
        return Err(LscError::Truncated {
            offset: bytes.len(),
            needed: pos + w * h,
        });
    }
    Ok((w, h, bytes[pos..pos + w * h].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posterior::TorusPrior;
    use crate::torus::{FrequencyTable, TorusOperator};
    use nalgebra::DMatrix;
    use std::f64::consts::{PI, TAU};

    #[test]
    fn snr_sentinels() {
        let imgs = vec![vec![0.6, 0.8], vec![1.0, 0.0]];
        assert_eq!(snr(&imgs, &imgs).unwrap(), f64::INFINITY);
        assert_eq!(snr(&imgs, &[vec![0.0; 2], vec![0.0; 2]]).unwrap(), 1.0);
        assert!(matches!(snr(&[], &[]), Err(LscError::Empty(_))));
        let est = vec![vec![0.5, 0.7], vec![0.9, 0.2]];
        let scaled = |v: &[Vec<f64>]| -> Vec<Vec<f64>> {
            v.iter()
                .map(|x| x.iter().map(|y| 3.0 * y).collect())
                .collect()
        };
        let a = snr(&imgs, &est).unwrap();
        let b = snr(&scaled(&imgs), &scaled(&est)).unwrap();
        assert!((a - b).abs() < 1e-12 * a);
    }

    fn identity_model(d: usize, lambda: f64) -> ModelParams {
        let blocks = d / 2;
        let freq = FrequencyTable::from_entries(1, blocks, vec![0; blocks]).unwrap();
        let op = TorusOperator::new(DMatrix::identity(d, d), freq).unwrap();
        ModelParams::new(
            op,
            DMatrix::identity(d, 2),
            0.01,
            lambda,
            TorusPrior::uniform(blocks),
        )
        .unwrap()
    }

    #[test]
    fn atom_image_shrinks_by_lambda() {
        let model = identity_model(4, 10.0);
        let cfg = TrainConfig {
            fista_iters: 200,
            ..TrainConfig::default()
        };
        let rec = reconstruct(&[1.0, 0.0, 0.0, 0.0], &model, &cfg).unwrap();
        // α̂ = 1 − λσ² on the active atom.
        assert!((rec.alpha_hat.as_slice()[0] - 0.9).abs() < 1e-6);
        assert!((rec.image_hat[0] - 0.9).abs() < 1e-6);
        let resid: f64 = rec
            .image_hat
            .iter()
            .zip([1.0, 0.0, 0.0, 0.0])
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        assert!(resid.sqrt() <= 10.0 * 0.01 + 1e-6);
    }

    #[test]
    fn orthogonal_image_reconstructs_to_zero() {
        let freq = FrequencyTable::from_entries(1, 1, vec![1]).unwrap();
        let op = TorusOperator::new(DMatrix::identity(4, 2), freq).unwrap();
        let phi = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 0.0, 0.0]);
        let model = ModelParams::new(op, phi, 0.01, 1.0, TorusPrior::uniform(1)).unwrap();
        let rec = reconstruct(&[0.0, 0.0, 0.6, 0.8], &model, &TrainConfig::default()).unwrap();
        assert_eq!(rec.alpha_hat.as_slice(), &[0.0]);
        assert!(rec.image_hat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn traversal_at_zero_projects() {
        let freq = FrequencyTable::build(1, 1, 1, 1).unwrap();
        let op = TorusOperator::new(DMatrix::identity(4, 2), freq).unwrap();
        let model = ModelParams::new(
            op,
            DMatrix::identity(4, 1),
            0.01,
            1.0,
            TorusPrior::uniform(1),
        )
        .unwrap();
        let grid = latent_traversal(&model, &[vec![1.0, 2.0, 3.0, 4.0]], 0, 0.0, 0.0, 3).unwrap();
        assert_eq!(grid.len(), 3);
        for col in grid {
            assert_eq!(col, vec![1.0, 2.0, 0.0, 0.0]);
        }
        assert!(latent_traversal(&model, &[vec![0.0; 4]], 0, 0.0, 1.0, 1).is_err());
        assert!(latent_traversal(&model, &[vec![0.0; 4]], 1, 0.0, 1.0, 2).is_err());
    }

    #[test]
    fn traversal_rolls_and_is_periodic() {
        let op = TorusOperator::fourier(8, &[1, 2, 3]).unwrap();
        let model = ModelParams::new(
            op,
            DMatrix::identity(8, 1),
            0.01,
            1.0,
            TorusPrior::uniform(3),
        )
        .unwrap();
        let x: Vec<f64> = (0..8)
            .map(|t| (TAU * t as f64 / 8.0).sin() + 0.3 * (PI * t as f64 / 2.0).cos())
            .collect();
        let grid =
            latent_traversal(&model, std::slice::from_ref(&x), 0, 0.0, TAU * 7.0 / 8.0, 8).unwrap();
        for (j, col) in grid.iter().enumerate() {
            for t in 0..8 {
                assert!((col[t] - x[(t + 8 - j) % 8]).abs() < 1e-10);
            }
        }
        let wrap = latent_traversal(&model, &[x], 0, -PI, PI, 2).unwrap();
        for (a, b) in wrap[0].iter().zip(&wrap[1]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pgm_single_image() {
        let bytes = encode_grid(&[vec![0.0, 1.0, 0.5, 0.25]], 2, 2, 1).unwrap();
        assert!(bytes.starts_with(b"P5 2 2 255\n"));
        assert_eq!(&bytes[11..], &[0, 255, 128, 64]);
    }

    #[test]
    fn pgm_tiling_dimensions_and_round_trip() {
        let side = 3;
        let images: Vec<Vec<f64>> = (0..10)
            .map(|i| (0..9).map(|p| ((i * 9 + p) % 17) as f64).collect())
            .collect();
        let bytes = encode_grid(&images, side, side, 5).unwrap();
        let (w, h, px) = parse_pgm(&bytes).unwrap();
        assert_eq!((w, h), (5 * side + 4, 2 * side + 1));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.pgm");
        export_grid(&images, side, 5, &path).unwrap();
        let again = parse_pgm(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(again.2, px);
        let img7 = &images[7];
        let (r0, c0) = (side + 1, 2 * (side + 1));
        for y in 0..side {
            for x in 0..side {
                let q = (img7[y * side + x] / 16.0 * 255.0).round() as u8;
                assert_eq!(px[(r0 + y) * w + c0 + x], q);
            }
        }
        assert!(px[side * w..side * w + w].iter().all(|&v| v == 0));
    }
}
