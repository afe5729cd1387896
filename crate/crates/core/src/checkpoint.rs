//! Binary container for models and datasets.
//!
//! Layout, all little-endian:
//!
//! ```text
//! header   "LSC1" | version u16 | flags u16 | D K L n m N (u32 each)
//! model    ω (L·n i32) | W (D·2L f64, column-major) | Φ (D·K f64) | κ (L f64) | μ (L f64) | σ² | λ
//! baseline Φ (D·K f64) | σ² | λ
//! dataset  count u32 | images (count·D f64)
//! meta     width u32 | values (count·width f64)
//! ```
//!
//! Sections appear in that order when their flag is set. The payload length
//! is fully determined by the header and section counts.

use std::path::Path;

use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::error::{LscError, Result};
use crate::model::{ModelParams, SparseCodingModel};
use crate::posterior::TorusPrior;
use crate::torus::{FrequencyTable, TorusOperator};

pub const MAGIC: &[u8; 4] = b"LSC1";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;

pub const FLAG_MODEL: u16 = 1;
pub const FLAG_DATASET: u16 = 1 << 1;
pub const FLAG_META: u16 = 1 << 2;
/// The model section holds a plain sparse coding dictionary.
pub const FLAG_IDENTITY: u16 = 1 << 3;
const KNOWN_FLAGS: u16 = FLAG_MODEL | FLAG_DATASET | FLAG_META | FLAG_IDENTITY;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredModel {
    Lsc(ModelParams),
    Baseline(SparseCodingModel),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub model: Option<StoredModel>,
    /// Quadrature size per torus dimension used in training.
    pub grid_size: usize,
    pub dataset: Option<Dataset>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| LscError::invalid(format!("{v} does not fit the u32 header field")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn f64s<'a>(&mut self, vals: impl IntoIterator<Item = &'a f64>) {
        for v in vals {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(LscError::Truncated {
                offset: self.bytes.len(),
                needed: self.pos + n,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn i32s(&mut self, n: usize) -> Result<Vec<i32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(self.f64s(1)?[0])
    }
}

impl Checkpoint {
    pub fn with_model(model: ModelParams, grid_size: usize) -> Self {
        Checkpoint {
            model: Some(StoredModel::Lsc(model)),
            grid_size,
            dataset: None,
        }
    }

    pub fn with_baseline(model: SparseCodingModel) -> Self {
        Checkpoint {
            model: Some(StoredModel::Baseline(model)),
            grid_size: 0,
            dataset: None,
        }
    }

    pub fn with_dataset(dataset: Dataset) -> Self {
        Checkpoint {
            model: None,
            grid_size: 0,
            dataset: Some(dataset),
        }
    }

    fn dim(&self) -> Result<usize> {
        let from_model = match &self.model {
            Some(StoredModel::Lsc(m)) => Some(m.dim()),
            Some(StoredModel::Baseline(m)) => Some(m.dim()),
            None => None,
        };
        let from_data = self.dataset.as_ref().map(Dataset::dim);
        match (from_model, from_data) {
            (Some(a), Some(b)) if a != b => Err(LscError::DimensionMismatch {
                what: "dataset dimension",
                expected: a,
                got: b,
            }),
            (Some(a), _) => Ok(a),
            (None, Some(b)) => Ok(b),
            (None, None) => Err(LscError::Empty("checkpoint")),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let d = self.dim()?;
        let mut flags = 0;
        let (k, l, n, m) = match &self.model {
            Some(StoredModel::Lsc(p)) => {
                p.validate()?;
                flags |= FLAG_MODEL;
                (
                    p.atoms(),
                    p.blocks(),
                    p.freq().dim(),
                    p.freq().multiplicity(),
                )
            }
            Some(StoredModel::Baseline(p)) => {
                p.validate()?;
                flags |= FLAG_MODEL | FLAG_IDENTITY;
                (p.phi.ncols(), 0, 0, 0)
            }
            None => (0, 0, 0, 0),
        };
        if let Some(data) = &self.dataset {
            data.validate()?;
            flags |= FLAG_DATASET;
            if data.meta_dim() > 0 {
                flags |= FLAG_META;
            }
        }
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u16(FORMAT_VERSION);
        w.u16(flags);
        for v in [d, k, l, n, m, self.grid_size] {
            w.u32(v)?;
        }
        match &self.model {
            Some(StoredModel::Lsc(p)) => {
                for v in p.freq().raw() {
                    w.0.extend_from_slice(&v.to_le_bytes());
                }
                w.f64s(p.w().as_slice());
                w.f64s(p.phi.as_slice());
                w.f64s(p.prior.kappa());
                w.f64s(p.prior.mu());
                w.f64s(&[p.sigma2, p.lambda]);
            }
            Some(StoredModel::Baseline(p)) => {
                w.f64s(p.phi.as_slice());
                w.f64s(&[p.sigma2, p.lambda]);
            }
            None => {}
        }
        if let Some(data) = &self.dataset {
            w.u32(data.len())?;
            for im in &data.images {
                w.f64s(im);
            }
            if flags & FLAG_META != 0 {
                w.u32(data.meta_dim())?;
                for m in &data.meta {
                    w.f64s(m);
                }
            }
        }
        Ok(w.0)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(LscError::BadMagic);
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(LscError::VersionMismatch {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let flags = r.u16()?;
        if flags & !KNOWN_FLAGS != 0 {
            return Err(LscError::InvariantViolation(format!(
                "unknown flags {flags:#06x}"
            )));
        }
        let [d, k, l, n, m, grid_size] =
            [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let model = if flags & FLAG_MODEL == 0 {
            None
        } else if flags & FLAG_IDENTITY != 0 {
            let phi = DMatrix::from_vec(d, k, r.f64s(d * k)?);
            let (sigma2, lambda) = (r.f64()?, r.f64()?);
            let model = SparseCodingModel {
                phi,
                sigma2,
                lambda,
            };
            model.validate()?;
            Some(StoredModel::Baseline(model))
        } else {
            let freq = FrequencyTable::from_entries(n, m, r.i32s(l * n)?)?;
            let w = DMatrix::from_vec(d, 2 * l, r.f64s(d * 2 * l)?);
            let phi = DMatrix::from_vec(d, k, r.f64s(d * k)?);
            let kappa = r.f64s(l)?;
            let mu = r.f64s(l)?;
            let (sigma2, lambda) = (r.f64()?, r.f64()?);
            let op = TorusOperator::new(w, freq)?;
            let prior = TorusPrior::new(kappa, mu)?;
            Some(StoredModel::Lsc(ModelParams::new(
                op, phi, sigma2, lambda, prior,
            )?))
        };
        let dataset = if flags & FLAG_DATASET == 0 {
            None
        } else {
            let side = (d as f64).sqrt().round() as usize;
            if side * side != d {
                return Err(LscError::InvariantViolation(format!(
                    "dataset dimension {d} is not a square"
                )));
            }
            let count = r.u32()?;
            let images = (0..count).map(|_| r.f64s(d)).collect::<Result<Vec<_>>>()?;
            let meta = if flags & FLAG_META != 0 {
                let width = r.u32()?;
                (0..count)
                    .map(|_| r.f64s(width))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            Some(Dataset::new(images, side, meta)?)
        };
        if r.pos != bytes.len() {
            return Err(LscError::InvariantViolation(format!(
                "{} trailing bytes after payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            model,
            grid_size,
            dataset,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

pub fn save_checkpoint(
    model: &ModelParams,
    grid_size: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    Checkpoint::with_model(model.clone(), grid_size).save(path)
}

/// Loads an LSC model; files holding only data or a baseline are rejected.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    match Checkpoint::load(path)?.model {
        Some(StoredModel::Lsc(m)) => Ok(m),
        Some(StoredModel::Baseline(_)) => Err(LscError::invalid(
            "checkpoint holds a baseline dictionary, not an LSC model",
        )),
        None => Err(LscError::invalid("checkpoint holds no model")),
    }
}

pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::with_dataset(data.clone()).save(path)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Checkpoint::load(path)?
        .dataset
        .ok_or_else(|| LscError::invalid("file holds no dataset section"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::model::init_model;

    fn model() -> ModelParams {
        let cfg = TrainConfig {
            image_dim: Some(16),
            blocks: 3,
            atoms: 2,
            torus_dim: 2,
            prior_kappa: 0.5,
            prior_mu: 1.0,
            ..TrainConfig::default()
        };
        init_model(&cfg, 9).unwrap()
    }

    #[test]
    fn model_round_trip_is_bitwise() {
        let ckpt = Checkpoint::with_model(model(), 50);
        let bytes = ckpt.encode().unwrap();
        assert_eq!(&bytes[..4], b"LSC1");
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.encode().unwrap(), bytes);
        let expected = HEADER_LEN + 3 * 2 * 4 + 8 * (16 * 6 + 16 * 2 + 3 + 3 + 2);
        assert_eq!(bytes.len(), expected);
    }

    #[test]
    fn dataset_and_baseline_round_trip() {
        let data = Dataset::new(
            vec![vec![0.5; 4], vec![0.25; 4]],
            2,
            vec![vec![1.0], vec![-2.0]],
        )
        .unwrap();
        let ckpt = Checkpoint::with_dataset(data);
        assert_eq!(Checkpoint::decode(&ckpt.encode().unwrap()).unwrap(), ckpt);
        let base = Checkpoint::with_baseline(SparseCodingModel {
            phi: DMatrix::identity(4, 2),
            sigma2: 0.01,
            lambda: 10.0,
        });
        assert_eq!(Checkpoint::decode(&base.encode().unwrap()).unwrap(), base);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = Checkpoint::with_model(model(), 50).encode().unwrap();
        bytes[0] ^= 0xff;
        let err = Checkpoint::decode(&bytes).unwrap_err();
        assert!(matches!(err, LscError::BadMagic));
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = Checkpoint::with_model(model(), 50).encode().unwrap();
        bytes[4] = 2;
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(LscError::VersionMismatch {
                found: 2,
                supported: 1
            })
        ));
    }

    #[test]
    fn scaled_w_column_is_rejected() {
        let m = model();
        let mut bytes = Checkpoint::with_model(m.clone(), 50).encode().unwrap();
        let start = HEADER_LEN + 3 * 2 * 4;
        for i in 0..16 {
            let off = start + 8 * i;
            let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) * 1.1;
            bytes[off..off + 8].copy_from_slice(&v.to_le_bytes());
        }
        let err = Checkpoint::decode(&bytes).unwrap_err();
        assert!(matches!(err, LscError::InvariantViolation(_)));
        assert!(err.to_string().contains("orthonormality violated"), "{err}");
    }

    #[test]
    fn length_must_match_header() {
        let bytes = Checkpoint::with_model(model(), 50).encode().unwrap();
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 1]),
            Err(LscError::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            Checkpoint::decode(&long),
            Err(LscError::InvariantViolation(_))
        ));
    }

    #[test]
    fn file_helpers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lsc");
        let m = model();
        save_checkpoint(&m, 50, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), m);
        assert!(load_dataset(&path).is_err());
    }
}
