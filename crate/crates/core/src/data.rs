//! Datasets: IDX ingestion, warps, synthetic transformed sets and batching.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{LscError, Result};

pub const IDX3_MAGIC: u32 = 0x0000_0803;
pub const IDX1_MAGIC: u32 = 0x0000_0801;

/// Square images stored row-major, plus optional ground-truth parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Vec<f64>>,
    pub side: usize,
    /// One parameter vector per image, or empty.
    pub meta: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(images: Vec<Vec<f64>>, side: usize, meta: Vec<Vec<f64>>) -> Result<Self> {
        let data = Dataset { images, side, meta };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.side * self.side;
        if let Some(bad) = self.images.iter().position(|im| im.len() != dim) {
            return Err(LscError::DimensionMismatch {
                what: "image length (side²)",
                expected: dim,
                got: self.images[bad].len(),
            });
        }
        if !self.meta.is_empty() && self.meta.len() != self.images.len() {
            return Err(LscError::DimensionMismatch {
                what: "meta records",
                expected: self.images.len(),
                got: self.meta.len(),
            });
        }
        if let Some(first) = self.meta.first() {
            if self.meta.iter().any(|m| m.len() != first.len()) {
                return Err(LscError::invalid("meta records have differing lengths"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `D = side²`.
    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    pub fn meta_dim(&self) -> usize {
        self.meta.first().map_or(0, Vec::len)
    }

    /// Every image scaled to unit L2 norm.
    pub fn normalized(&self) -> Result<Dataset> {
        Ok(Dataset {
            images: normalize_batch(&self.images)?,
            side: self.side,
            meta: self.meta.clone(),
        })
    }

    /// Images `range` (with their meta) as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            images: self.images[range.clone()].to_vec(),
            side: self.side,
            meta: if self.meta.is_empty() {
                Vec::new()
            } else {
                self.meta[range].to_vec()
            },
        }
    }

    /// Images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            side: self.side,
            meta: if self.meta.is_empty() {
                Vec::new()
            } else {
                indices.iter().map(|&i| self.meta[i].clone()).collect()
            },
        }
    }
}

/// Divides every image by its L2 norm.
pub fn normalize_batch(images: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .enumerate()
        .map(|(i, im)| {
            let norm = im.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || norm < 1e-12 {
                return Err(LscError::ZeroImage(i));
            }
            Ok(im.iter().map(|v| v / norm).collect())
        })
        .collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
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

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32_be()?;
        if found != expected {
            return Err(LscError::IdxMagic { found, expected });
        }
        Ok(())
    }
}

/// Parses an IDX3 unsigned-byte image file; pixels are scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(IDX3_MAGIC)?;
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    if rows != cols {
        return Err(LscError::invalid(format!(
            "only square images are supported, got {rows}×{cols}"
        )));
    }
    let dim = rows * cols;
    let payload = r.take(count * dim)?;
    let images = payload
        .chunks_exact(dim.max(1))
        .take(count)
        .map(|px| px.iter().map(|&b| b as f64 / 255.0).collect())
        .collect();
    Dataset::new(images, rows, Vec::new())
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_idx_images(&std::fs::read(path)?)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(IDX1_MAGIC)?;
    let count = r.u32_be()? as usize;
    Ok(r.take(count)?.to_vec())
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    parse_idx_labels(&std::fs::read(path)?)
}

/// IDX3 encoding of `data`; values are clamped to `[0, 1]` and rounded to bytes.
pub fn encode_idx_images(data: &Dataset) -> Vec<u8> {
    let side = data.side as u32;
    let mut out = Vec::with_capacity(16 + data.len() * data.dim());
    for word in [IDX3_MAGIC, data.len() as u32, side, side] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    for im in &data.images {
        out.extend(im.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    out
}

pub fn write_idx_images(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    std::fs::write(path, encode_idx_images(data))?;
    Ok(())
}

/// Bilinear sample at `(x, y) = (column, row)`; outside pixels read as zero
/// unless `cyclic`, in which case coordinates wrap.
pub fn sample_bilinear(img: &[f64], side: usize, x: f64, y: f64, cyclic: bool) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let s = side as i64;
    let px = |xi: i64, yi: i64| -> f64 {
        if cyclic {
            img[(yi.rem_euclid(s) * s + xi.rem_euclid(s)) as usize]
        } else if xi < 0 || yi < 0 || xi >= s || yi >= s {
            0.0
        } else {
            img[(yi * s + xi) as usize]
        }
    };
    let (xi, yi) = (x0 as i64, y0 as i64);
    let mut acc = 0.0;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let w = wx * wy;
            if w != 0.0 {
                acc += w * px(xi + dx, yi + dy);
            }
        }
    }
    acc
}

/// Shifts the image content by `dx` columns and `dy` rows.
pub fn warp_translate(img: &[f64], side: usize, dx: f64, dy: f64, cyclic: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            out.push(sample_bilinear(
                img,
                side,
                col as f64 - dx,
                row as f64 - dy,
                cyclic,
            ));
        }
    }
    out
}

/// Rotation by `theta` (counterclockwise in `(column, row)` coordinates) and
/// scaling by `scale` about the image center, zero fill.
pub fn warp_rot_scale(img: &[f64], side: usize, theta: f64, scale: f64) -> Vec<f64> {
    let c = (side as f64 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    let mut out = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            let px = col as f64 - c;
            let py = row as f64 - c;
            let qx = (cos * px + sin * py) / scale + c;
            let qy = (-sin * px + cos * py) / scale + c;
            out.push(sample_bilinear(img, side, qx, qy, false));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    /// Parameters `(dx, dy)` in pixels.
    Translate2d,
    /// Parameters `(theta, scale)` in radians and a factor.
    RotScale,
}

impl std::str::FromStr for TransformKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "translate2d" => Ok(TransformKind::Translate2d),
            "rotscale" => Ok(TransformKind::RotScale),
            other => Err(format!("unknown transform kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformSpec {
    pub kind: TransformKind,
    /// Closed interval per parameter.
    pub ranges: Vec<(f64, f64)>,
    pub count_per_template: usize,
    /// Wrap translations around the image border instead of zero filling.
    pub cyclic: bool,
}

impl TransformSpec {
    /// Translations uniform in `[−7, 7]²` pixels.
    pub fn translate2d(count_per_template: usize) -> Self {
        TransformSpec {
            kind: TransformKind::Translate2d,
            ranges: vec![(-7.0, 7.0), (-7.0, 7.0)],
            count_per_template,
            cyclic: false,
        }
    }

    /// Rotations in `[−75°, 75°]` and scales in `[0.5, 1]`.
    pub fn rotscale(count_per_template: usize) -> Self {
        let a = 75.0 * PI / 180.0;
        TransformSpec {
            kind: TransformKind::RotScale,
            ranges: vec![(-a, a), (0.5, 1.0)],
            count_per_template,
            cyclic: false,
        }
    }

    /// Cyclic horizontal translations over the whole period.
    pub fn cyclic_shift_1d(side: usize, count_per_template: usize) -> Self {
        TransformSpec {
            kind: TransformKind::Translate2d,
            ranges: vec![(0.0, side as f64), (0.0, 0.0)],
            count_per_template,
            cyclic: true,
        }
    }

    pub fn validate(&self, side: usize) -> Result<()> {
        if self.ranges.len() != 2 {
            return Err(LscError::invalid(
                "transform spec needs two parameter ranges",
            ));
        }
        if self
            .ranges
            .iter()
            .any(|(lo, hi)| !lo.is_finite() || !hi.is_finite() || lo > hi)
        {
            return Err(LscError::invalid(
                "transform ranges must be finite with lo <= hi",
            ));
        }
        match self.kind {
            TransformKind::Translate2d if !self.cyclic => {
                let limit = side as f64;
                if self
                    .ranges
                    .iter()
                    .any(|(lo, hi)| lo.abs() >= limit || hi.abs() >= limit)
                {
                    return Err(LscError::invalid(
                        "translations must be smaller than the image",
                    ));
                }
            }
            TransformKind::RotScale => {
                let (lo, hi) = self.ranges[1];
                if !(lo > 0.0 && hi <= 2.0) {
                    return Err(LscError::invalid("scales must lie in (0, 2]"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn warp(&self, img: &[f64], side: usize, params: &[f64]) -> Vec<f64> {
        match self.kind {
            TransformKind::Translate2d => {
                warp_translate(img, side, params[0], params[1], self.cyclic)
            }
            TransformKind::RotScale => warp_rot_scale(img, side, params[0], params[1]),
        }
    }
}

/// Generator for sample `index` of template `template`, independent of all
/// other samples.
pub fn sample_rng(seed: u64, template: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((template as u64) << 32) | index as u64);
    rng
}

/// Applies `count_per_template` random transforms to every template; images
/// are ordered template-major and meta holds the drawn parameters.
pub fn make_synthetic(templates: &Dataset, spec: &TransformSpec, seed: u64) -> Result<Dataset> {
    if templates.is_empty() {
        return Err(LscError::Empty("templates"));
    }
    templates.validate()?;
    spec.validate(templates.side)?;
    let per = spec.count_per_template;
    let side = templates.side;
    let (images, meta): (Vec<_>, Vec<_>) = (0..templates.len() * per)
        .into_par_iter()
        .map(|flat| {
            let (t, i) = (flat / per, flat % per);
            let mut rng = sample_rng(seed, t, i);
            let params: Vec<f64> = spec
                .ranges
                .iter()
                .map(|&(lo, hi)| {
                    if lo == hi {
                        lo
                    } else {
                        rng.random_range(lo..=hi)
                    }
                })
                .collect();
            (spec.warp(&templates.images[t], side, &params), params)
        })
        .unzip();
    Dataset::new(images, side, meta)
}

/// Permutation of `0..len` for one epoch.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_e90c);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Procedural templates `g(row) · h_t(col)`: all share one vertical profile
/// and differ in a sum of periodic Gaussian bumps along the columns. Values
/// lie in `[0, 1]`.
pub fn banded_templates(side: usize, count: usize) -> Result<Dataset> {
    if side < 4 || count == 0 {
        return Err(LscError::invalid(
            "banded templates need side >= 4 and count >= 1",
        ));
    }
    const BUMPS: [&[(f64, f64)]; 3] = [
        &[(0.25, 1.0)],
        &[(0.2, 1.0), (0.55, 0.6)],
        &[(0.1, 0.5), (0.4, 1.0), (0.75, 0.8)],
    ];
    let s = side as f64;
    let width = s / 16.0;
    let centre = (s - 1.0) / 2.0;
    let g: Vec<f64> = (0..side)
        .map(|r| (-((r as f64 - centre) / (s / 5.0)).powi(2) / 2.0).exp())
        .collect();
    let images = (0..count)
        .map(|t| {
            let offset = (t / BUMPS.len()) as f64 * 0.13;
            let h: Vec<f64> = (0..side)
                .map(|c| {
                    BUMPS[t % BUMPS.len()]
                        .iter()
                        .map(|&(pos, amp)| {
                            let p = (pos + offset) * s;
                            (-1..=1)
                                .map(|k| {
                                    let d = c as f64 - p + k as f64 * s;
                                    amp * (-(d / width).powi(2) / 2.0).exp()
                                })
                                .sum::<f64>()
                        })
                        .sum()
                })
                .collect();
            let peak =
                h.iter().cloned().fold(0.0, f64::max) * g.iter().cloned().fold(0.0, f64::max);
            let mut im = Vec::with_capacity(side * side);
            for gr in &g {
                im.extend(h.iter().map(|hc| gr * hc / peak));
            }
            im
        })
        .collect();
    Dataset::new(images, side, Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_hand_assembled() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend([0, 255, 128, 64]);
        let data = parse_idx_images(&bytes).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data.side, 2);
        assert_eq!(data.images[0], vec![0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        assert!((data.images[0][2] - 0.50196).abs() < 1e-5);
        assert!((data.images[0][3] - 0.25098).abs() < 1e-5);
    }

    #[test]
    fn idx_wrong_magic() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, 2];
        let err = parse_idx_images(&bytes).unwrap_err();
        assert!(err.to_string().contains("unexpected magic"), "{err}");
    }

    #[test]
    fn idx_truncated() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend([1, 2, 3, 4]);
        match parse_idx_images(&bytes) {
            Err(LscError::Truncated { offset, needed }) => {
                assert_eq!(offset, 20);
                assert_eq!(needed, 24);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn idx_round_trip_and_labels() {
        let data = Dataset::new(vec![vec![0.0, 0.2, 0.4, 1.0]; 3], 2, Vec::new()).unwrap();
        let parsed = parse_idx_images(&encode_idx_images(&data)).unwrap();
        for (a, b) in parsed
            .images
            .iter()
            .flatten()
            .zip(data.images.iter().flatten())
        {
            assert!((a - b).abs() <= 0.5 / 255.0);
        }
        let labels = [0, 0, 8, 1, 0, 0, 0, 3, 7, 2, 9];
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![7, 2, 9]);
    }

    fn ramp(side: usize) -> Vec<f64> {
        (0..side * side)
            .map(|i| ((i * 37) % 11) as f64 / 10.0)
            .collect()
    }

    #[test]
    fn warps_identity() {
        let img = ramp(7);
        assert_eq!(warp_translate(&img, 7, 0.0, 0.0, false), img);
        assert_eq!(warp_translate(&img, 7, 0.0, 0.0, true), img);
        assert_eq!(warp_rot_scale(&img, 7, 0.0, 1.0), img);
    }

    #[test]
    fn integer_translation_is_index_shift() {
        let side = 6;
        let img = ramp(side);
        let out = warp_translate(&img, side, 3.0, 0.0, false);
        for r in 0..side {
            for c in 0..side {
                let expect = if c >= 3 { img[r * side + c - 3] } else { 0.0 };
                assert_eq!(out[r * side + c], expect);
            }
        }
        let wrapped = warp_translate(&img, side, -2.0, 1.0, true);
        for r in 0..side {
            for c in 0..side {
                let src = ((r + side - 1) % side) * side + (c + 2) % side;
                assert_eq!(wrapped[r * side + c], img[src]);
            }
        }
    }

    #[test]
    fn half_pixel_translation_averages() {
        let side = 5;
        let img = ramp(side);
        let out = warp_translate(&img, side, 0.5, 0.0, false);
        for r in 0..side {
            for c in 1..side {
                let mean = 0.5 * (img[r * side + c] + img[r * side + c - 1]);
                assert!((out[r * side + c] - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn quarter_turn_moves_pixel() {
        let side = 9;
        let c = 4;
        for r in 1..4 {
            let mut img = vec![0.0; side * side];
            img[c * side + c + r] = 1.0; // (x, y) = (c + r, c)
            let out = warp_rot_scale(&img, side, PI / 2.0, 1.0);
            assert!((out[(c + r) * side + c] - 1.0).abs() < 1e-6); // (c, c + r)
        }
    }

    #[test]
    fn half_scale_halves_distance() {
        let side = 17;
        let c = 8;
        let mut img = vec![0.0; side * side];
        img[c * side + c + 6] = 1.0;
        let out = warp_rot_scale(&img, side, 0.0, 0.5);
        let best = (0..out.len())
            .max_by(|&a, &b| out[a].total_cmp(&out[b]))
            .unwrap();
        let (row, col) = (best / side, best % side);
        assert_eq!(row, c);
        let dist = col as f64 - c as f64;
        assert!((dist - 3.0).abs() <= 0.5);
    }

    #[test]
    fn warps_stay_in_range() {
        let img = ramp(8);
        let max = img.iter().cloned().fold(0.0, f64::max);
        for out in [
            warp_translate(&img, 8, 1.3, -2.7, false),
            warp_translate(&img, 8, 5.5, 0.25, true),
            warp_rot_scale(&img, 8, 0.7, 0.6),
        ] {
            assert!(out.iter().all(|&v| (0.0..=max + 1e-15).contains(&v)));
        }
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let templates = banded_templates(16, 3).unwrap();
        let spec = TransformSpec::translate2d(20);
        let a = make_synthetic(&templates, &spec, 4).unwrap();
        let b = make_synthetic(&templates, &spec, 4).unwrap();
        assert_eq!(a.len(), 60);
        assert_eq!(a, b);
        for m in &a.meta {
            assert!(m.iter().all(|v| (-7.0..=7.0).contains(v)));
        }
        let rs = make_synthetic(&templates, &TransformSpec::rotscale(10), 4).unwrap();
        for m in &rs.meta {
            assert!(m[0].abs() <= 75.0 * PI / 180.0 && (0.5..=1.0).contains(&m[1]));
        }
    }

    #[test]
    fn collapsed_ranges_give_templates() {
        let templates = banded_templates(10, 2).unwrap();
        let spec = TransformSpec {
            kind: TransformKind::RotScale,
            ranges: vec![(0.0, 0.0), (1.0, 1.0)],
            count_per_template: 3,
            cyclic: false,
        };
        let data = make_synthetic(&templates, &spec, 0).unwrap();
        for (i, im) in data.images.iter().enumerate() {
            assert_eq!(im, &templates.images[i / 3]);
        }
    }

    #[test]
    fn normalization() {
        let out = normalize_batch(&[vec![0.0, 2.0], vec![0.6, 0.8]]).unwrap();
        assert_eq!(out[0], vec![0.0, 1.0]);
        assert_eq!(out[1], vec![0.6, 0.8]);
        assert!(matches!(
            normalize_batch(&[vec![1.0, 0.0], vec![0.0, 0.0]]),
            Err(LscError::ZeroImage(1))
        ));
    }

    #[test]
    fn epoch_order_is_seeded_permutation() {
        let a = epoch_order(50, 3, 1);
        assert_eq!(a, epoch_order(50, 3, 1));
        assert_ne!(a, epoch_order(50, 3, 2));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn banded_templates_are_distinct() {
        let t = banded_templates(16, 4).unwrap();
        assert_eq!(t.len(), 4);
        for i in 0..4 {
            let max = t.images[i].iter().cloned().fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert_ne!(t.images[i], t.images[j]);
            }
        }
    }
}
