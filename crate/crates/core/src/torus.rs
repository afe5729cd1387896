//! The torus group 𝕋ⁿ and its orthogonal representation `T(s) = W R(s) Wᵀ`.
//!
//! `R(s)` is block diagonal with one 2×2 rotation per integer frequency vector
//! `ω_l`, rotating by the phase `ω_lᵀ s`. It is always applied blockwise.

use std::cmp::Ordering;
use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, LscError, Result};
use crate::linalg::orthonormality_error;

/// Tolerance on `‖WᵀW − I‖_max` accepted for a representation basis.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Ordered integer weight vectors `ω_l ∈ ℤⁿ`, one per rotation block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyTable {
    n: usize,
    multiplicity: usize,
    /// `L × n`, entry-major.
    entries: Vec<i32>,
}

fn norm_sq(v: &[i32]) -> i64 {
    v.iter().map(|&x| (x as i64) * (x as i64)).sum()
}

fn canonical_order(a: &[i32], b: &[i32]) -> Ordering {
    norm_sq(a).cmp(&norm_sq(b)).then_with(|| a.cmp(b))
}

fn is_canonical(v: &[i32]) -> bool {
    v.iter().find(|&&x| x != 0).is_none_or(|&x| x > 0)
}

/// All canonical vectors with `‖ω‖∞ ≤ bound`, in canonical order.
fn enumerate_canonical(n: usize, bound: u32, include_zero: bool) -> Vec<Vec<i32>> {
    let b = bound as i32;
    let side = (2 * b + 1) as usize;
    let total = side.checked_pow(n as u32).unwrap_or(usize::MAX);
    let mut out = Vec::new();
    let mut digits = vec![0usize; n];
    for _ in 0..total {
        let v: Vec<i32> = digits.iter().map(|&d| d as i32 - b).collect();
        let zero = v.iter().all(|&x| x == 0);
        if is_canonical(&v) && (include_zero || !zero) {
            out.push(v);
        }
        for d in digits.iter_mut().rev() {
            *d += 1;
            if *d < side {
                break;
            }
            *d = 0;
        }
    }
    out.sort_by(|a, b| canonical_order(a, b));
    out
}

impl FrequencyTable {
    /// Enumerates canonical frequencies (zero included) within `max_norm`,
    /// repeats each `m` times and keeps the first `l`.
    pub fn build(n: usize, l: usize, m: usize, max_norm: u32) -> Result<Self> {
        Self::build_with(n, l, m, max_norm, true)
    }

    pub fn build_with(
        n: usize,
        l: usize,
        m: usize,
        max_norm: u32,
        include_zero: bool,
    ) -> Result<Self> {
        if n == 0 || l == 0 || m == 0 {
            return Err(LscError::invalid("n, L and m must all be positive"));
        }
        let needed = l.div_ceil(m);
        let canonical = enumerate_canonical(n, max_norm, include_zero);
        if canonical.len() < needed {
            let mut required = max_norm + 1;
            while enumerate_canonical(n, required, include_zero).len() < needed {
                required += 1;
            }
            return Err(LscError::InsufficientBound {
                max_norm,
                available: canonical.len(),
                needed,
                required,
            });
        }
        let entries: Vec<i32> = canonical
            .iter()
            .flat_map(|v| std::iter::repeat_n(v, m))
            .take(l)
            .flatten()
            .copied()
            .collect();
        Ok(FrequencyTable {
            n,
            multiplicity: m,
            entries,
        })
    }

    /// Smallest enumeration bound whose selection matches the unbounded one:
    /// every vector outside the bound has Euclidean norm above the last pick.
    pub fn for_model(n: usize, l: usize, m: usize, include_zero: bool) -> Result<Self> {
        let mut bound = 1u32;
        loop {
            match Self::build_with(n, l, m, bound, include_zero) {
                Ok(table) => {
                    let last = norm_sq(table.entry(table.len() - 1));
                    let outside = (bound as i64 + 1).pow(2);
                    if last < outside {
                        return Ok(table);
                    }
                    bound += 1;
                }
                Err(LscError::InsufficientBound { required, .. }) => bound = required,
                Err(e) => return Err(e),
            }
        }
    }

    /// Wraps an explicit table, checking every structural invariant.
    pub fn from_entries(n: usize, multiplicity: usize, entries: Vec<i32>) -> Result<Self> {
        let table = FrequencyTable {
            n,
            multiplicity,
            entries,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.multiplicity == 0 {
            return Err(LscError::InvariantViolation(
                "frequency table: n and m must be positive".into(),
            ));
        }
        if self.entries.is_empty() || !self.entries.len().is_multiple_of(self.n) {
            return Err(LscError::InvariantViolation(format!(
                "frequency table: {} components is not a positive multiple of n = {}",
                self.entries.len(),
                self.n
            )));
        }
        let mut run = 0usize;
        for l in 0..self.len() {
            let cur = self.entry(l);
            if !is_canonical(cur) {
                return Err(LscError::InvariantViolation(format!(
                    "frequency table: entry {l} {cur:?} is not in canonical sign"
                )));
            }
            if l == 0 {
                run = 1;
                continue;
            }
            let prev = self.entry(l - 1);
            match canonical_order(prev, cur) {
                Ordering::Greater => {
                    return Err(LscError::InvariantViolation(format!(
                        "frequency table: entry {l} {cur:?} is out of order"
                    )))
                }
                Ordering::Equal => {
                    run += 1;
                    if run > self.multiplicity {
                        return Err(LscError::InvariantViolation(format!(
                            "frequency table: {cur:?} repeated more than m = {} times",
                            self.multiplicity
                        )));
                    }
                }
                Ordering::Less => run = 1,
            }
        }
        Ok(())
    }

    /// Torus dimension `n`.
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of blocks `L`.
    pub fn len(&self) -> usize {
        self.entries.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn multiplicity(&self) -> usize {
        self.multiplicity
    }

    pub fn entry(&self, l: usize) -> &[i32] {
        &self.entries[l * self.n..(l + 1) * self.n]
    }

    pub fn entries(&self) -> impl Iterator<Item = &[i32]> {
        self.entries.chunks_exact(self.n)
    }

    pub fn raw(&self) -> &[i32] {
        &self.entries
    }

    /// Phase `ω_lᵀ s`.
    #[inline]
    pub fn phase(&self, l: usize, s: &[f64]) -> f64 {
        self.entry(l)
            .iter()
            .zip(s)
            .map(|(&w, &x)| w as f64 * x)
            .sum()
    }
}

/// A point of 𝕋ⁿ, each angle reduced into `[0, 2π)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusPoint(Vec<f64>);

impl TorusPoint {
    pub fn new(angles: Vec<f64>) -> Self {
        TorusPoint(angles.into_iter().map(reduce_angle).collect())
    }

    pub fn zero(n: usize) -> Self {
        TorusPoint(vec![0.0; n])
    }

    pub fn angles(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

fn reduce_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Per-block `(cos θ_l, sin θ_l)` pairs of a block rotation.
///
/// Holds either an exact rotation `R(s)` or a posterior average `R̄`, which has
/// the same block structure but need not be orthogonal.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRotation {
    pairs: Vec<[f64; 2]>,
}

impl BlockRotation {
    pub fn identity(blocks: usize) -> Self {
        BlockRotation {
            pairs: vec![[1.0, 0.0]; blocks],
        }
    }

    pub fn at(freq: &FrequencyTable, s: &TorusPoint) -> Self {
        let angles = s.angles();
        BlockRotation {
            pairs: (0..freq.len())
                .map(|l| {
                    let (sin, cos) = freq.phase(l, angles).sin_cos();
                    [cos, sin]
                })
                .collect(),
        }
    }

    pub fn from_pairs(pairs: Vec<[f64; 2]>) -> Self {
        BlockRotation { pairs }
    }

    pub fn pairs(&self) -> &[[f64; 2]] {
        &self.pairs
    }

    pub fn blocks(&self) -> usize {
        self.pairs.len()
    }

    /// `R y`.
    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        for (l, &[c, s]) in self.pairs.iter().enumerate() {
            let (a, b) = (y[2 * l], y[2 * l + 1]);
            out[2 * l] = c * a - s * b;
            out[2 * l + 1] = s * a + c * b;
        }
        out
    }

    /// `Rᵀ y`.
    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        for (l, &[c, s]) in self.pairs.iter().enumerate() {
            let (a, b) = (y[2 * l], y[2 * l + 1]);
            out[2 * l] = c * a + s * b;
            out[2 * l + 1] = -s * a + c * b;
        }
        out
    }

    /// Dense `2L × 2L` form, for tests and diagnostics only.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = 2 * self.pairs.len();
        let mut m = DMatrix::zeros(n, n);
        for (l, &[c, s]) in self.pairs.iter().enumerate() {
            m[(2 * l, 2 * l)] = c;
            m[(2 * l, 2 * l + 1)] = -s;
            m[(2 * l + 1, 2 * l)] = s;
            m[(2 * l + 1, 2 * l + 1)] = c;
        }
        m
    }
}

/// Applies `R(s)` to a coefficient vector of length `2L`.
pub fn rotate_coeffs(freq: &FrequencyTable, s: &TorusPoint, y: &[f64]) -> Result<Vec<f64>> {
    check_len("coefficient vector", 2 * freq.len(), y.len())?;
    check_len("torus point", freq.dim(), s.dim())?;
    Ok(BlockRotation::at(freq, s).apply(y))
}

/// The representation `T(s) = W R(s) Wᵀ` for a basis `W` with orthonormal
/// columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusOperator {
    w: DMatrix<f64>,
    freq: FrequencyTable,
}

impl TorusOperator {
    pub fn new(w: DMatrix<f64>, freq: FrequencyTable) -> Result<Self> {
        let op = TorusOperator { w, freq };
        op.validate()?;
        Ok(op)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, cols) = self.w.shape();
        if cols != 2 * self.freq.len() {
            return Err(LscError::DimensionMismatch {
                what: "W columns (2L)",
                expected: 2 * self.freq.len(),
                got: cols,
            });
        }
        if d % 2 != 0 || cols > d {
            return Err(LscError::InvariantViolation(format!(
                "W is {d}x{cols}; need D even and 2L <= D"
            )));
        }
        let err = orthonormality_error(&self.w);
        if !err.is_finite() || err > ORTHONORMAL_TOL {
            return Err(LscError::InvariantViolation(format!(
                "orthonormality violated: max |WᵀW - I| = {err:.3e}"
            )));
        }
        Ok(())
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn freq(&self) -> &FrequencyTable {
        &self.freq
    }

    /// Image dimension `D`.
    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn blocks(&self) -> usize {
        self.freq.len()
    }

    pub(crate) fn set_basis(&mut self, w: DMatrix<f64>) {
        debug_assert_eq!(w.shape(), self.w.shape());
        self.w = w;
    }

    /// `Wᵀ x`.
    pub fn analyze(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("image", self.dim(), x.len())?;
        Ok(self
            .w
            .tr_mul(&DVector::from_column_slice(x))
            .as_slice()
            .to_vec())
    }

    /// `W c`.
    pub fn synthesize(&self, c: &[f64]) -> Result<Vec<f64>> {
        check_len("coefficient vector", 2 * self.blocks(), c.len())?;
        Ok((&self.w * DVector::from_column_slice(c))
            .as_slice()
            .to_vec())
    }

    /// `T(s) x = W R(s) Wᵀ x`.
    pub fn apply(&self, s: &TorusPoint, x: &[f64]) -> Result<Vec<f64>> {
        check_len("torus point", self.freq.dim(), s.dim())?;
        let coeffs = self.analyze(x)?;
        self.synthesize(&BlockRotation::at(&self.freq, s).apply(&coeffs))
    }

    /// `W Wᵀ x`, the orthogonal projection onto the span of `W`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let coeffs = self.analyze(x)?;
        self.synthesize(&coeffs)
    }
}

impl TorusOperator {
    /// Circular Fourier basis on `d` samples: block `l` spans
    /// `√(2/d)·(cos, sin)(2π k_l t / d)` and rotates with frequency `k_l`, so
    /// `T(2πj/d)` shifts band-limited signals by `j` samples.
    pub fn fourier(d: usize, harmonics: &[u32]) -> Result<Self> {
        if harmonics.is_empty() {
            return Err(LscError::invalid("at least one harmonic is required"));
        }
        if let Some(&k) = harmonics.iter().find(|&&k| k == 0 || 2 * k as usize >= d) {
            return Err(LscError::invalid(format!(
                "harmonic {k} must lie strictly between 0 and d/2 = {}",
                d as f64 / 2.0
            )));
        }
        let scale = (2.0 / d as f64).sqrt();
        let w = DMatrix::from_fn(d, 2 * harmonics.len(), |t, c| {
            let phase = TAU * harmonics[c / 2] as f64 * t as f64 / d as f64;
            scale * if c % 2 == 0 { phase.cos() } else { phase.sin() }
        });
        let entries = harmonics.iter().map(|&k| k as i32).collect();
        TorusOperator::new(w, FrequencyTable::from_entries(1, 1, entries)?)
    }
}

/// Convenience wrapper matching [`TorusOperator::apply`].
pub fn apply_transform(op: &TorusOperator, s: &TorusPoint, x: &[f64]) -> Result<Vec<f64>> {
    op.apply(s, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn table_one_dimensional() {
        let t = FrequencyTable::build(1, 3, 1, 4).unwrap();
        assert_eq!(t.raw(), &[0, 1, 2]);
    }

    #[test]
    fn table_two_dimensional() {
        let t = FrequencyTable::build(2, 5, 1, 2).unwrap();
        let got: Vec<&[i32]> = t.entries().collect();
        assert_eq!(got, vec![&[0, 0][..], &[0, 1], &[1, 0], &[1, -1], &[1, 1]]);
    }

    #[test]
    fn table_multiplicity() {
        let t = FrequencyTable::build(1, 4, 2, 3).unwrap();
        assert_eq!(t.raw(), &[0, 0, 1, 1]);
    }

    #[test]
    fn table_without_zero() {
        let t = FrequencyTable::build_with(1, 3, 1, 5, false).unwrap();
        assert_eq!(t.raw(), &[1, 2, 3]);
    }

    #[test]
    fn table_insufficient_bound_names_requirement() {
        match FrequencyTable::build(1, 6, 1, 2) {
            Err(LscError::InsufficientBound {
                available,
                needed,
                required,
                ..
            }) => {
                assert_eq!((available, needed, required), (3, 6, 5));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn auto_bound_matches_generous_bound() {
        for (n, l, m) in [(1, 8, 1), (2, 128, 1), (2, 40, 2), (3, 30, 1)] {
            let auto = FrequencyTable::for_model(n, l, m, true).unwrap();
            let wide = FrequencyTable::build(n, l, m, 12).unwrap();
            assert_eq!(auto, wide, "n={n} l={l} m={m}");
        }
    }

    #[test]
    fn from_entries_rejects_sign_pairs_and_disorder() {
        assert!(FrequencyTable::from_entries(1, 1, vec![0, 1, -1]).is_err());
        assert!(FrequencyTable::from_entries(1, 1, vec![0, 2, 1]).is_err());
        assert!(FrequencyTable::from_entries(1, 1, vec![0, 1, 1]).is_err());
        assert!(FrequencyTable::from_entries(1, 2, vec![0, 1, 1]).is_ok());
    }

    #[test]
    fn torus_point_reduces() {
        let p = TorusPoint::new(vec![-FRAC_PI_2, 5.0 * PI]);
        assert!((p.angles()[0] - 1.5 * PI).abs() < 1e-15);
        assert!((p.angles()[1] - PI).abs() < 1e-14);
    }

    #[test]
    fn rotate_identity_at_zero() {
        let t = FrequencyTable::build(2, 6, 1, 3).unwrap();
        let y: Vec<f64> = (0..12).map(|i| i as f64 - 3.3).collect();
        assert_eq!(rotate_coeffs(&t, &TorusPoint::zero(2), &y).unwrap(), y);
    }

    #[test]
    fn rotate_quarter_turn() {
        let t = FrequencyTable::from_entries(1, 1, vec![1]).unwrap();
        let out = rotate_coeffs(&t, &TorusPoint::new(vec![FRAC_PI_2]), &[1.0, 0.0]).unwrap();
        assert!(out[0].abs() < 1e-15 && (out[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rotate_rejects_length() {
        let t = FrequencyTable::build(1, 2, 1, 2).unwrap();
        assert!(rotate_coeffs(&t, &TorusPoint::zero(1), &[1.0; 3]).is_err());
    }

    #[test]
    fn transpose_inverts_rotation() {
        let t = FrequencyTable::build(2, 5, 1, 2).unwrap();
        let r = BlockRotation::at(&t, &TorusPoint::new(vec![0.3, 2.1]));
        let y: Vec<f64> = (0..10).map(|i| (i as f64).cos()).collect();
        let back = r.apply_transpose(&r.apply(&y));
        for (a, b) in back.iter().zip(&y) {
            assert!((a - b).abs() < 1e-14);
        }
        let dense = r.to_dense();
        let ry = &dense * DVector::from_vec(y.clone());
        for (a, b) in ry.iter().zip(r.apply(&y)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn operator_rejects_bad_basis() {
        let t = FrequencyTable::build(1, 2, 1, 2).unwrap();
        let mut w = DMatrix::<f64>::identity(6, 4);
        assert!(TorusOperator::new(w.clone(), t.clone()).is_ok());
        w[(0, 0)] = 1.1;
        assert!(TorusOperator::new(w, t.clone()).is_err());
        assert!(TorusOperator::new(DMatrix::identity(5, 4), t.clone()).is_err());
        assert!(TorusOperator::new(DMatrix::identity(6, 2), t).is_err());
    }

    #[test]
    fn square_identity_basis_zero_angle() {
        let t = FrequencyTable::build(1, 3, 1, 3).unwrap();
        let op = TorusOperator::new(DMatrix::identity(6, 6), t).unwrap();
        let x = [0.1, -2.0, 3.0, 0.5, 0.0, 7.0];
        assert_eq!(op.apply(&TorusPoint::zero(1), &x).unwrap(), x.to_vec());
    }

    #[test]
    fn narrow_basis_zero_angle_projects() {
        let t = FrequencyTable::build(1, 1, 1, 1).unwrap();
        let op = TorusOperator::new(DMatrix::identity(4, 2), t).unwrap();
        let out = op
            .apply(&TorusPoint::zero(1), &[1.0, 2.0, 3.0, 4.0])
            .unwrap();
        assert_eq!(out, vec![1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn fourier_basis_shifts_band_limited_signals() {
        let op = TorusOperator::fourier(8, &[1, 2, 3]).unwrap();
        let x: Vec<f64> = (0..8)
            .map(|t| {
                let p = TAU * t as f64 / 8.0;
                0.7 * p.cos() - 0.2 * (2.0 * p).sin() + 0.4 * (3.0 * p + 0.3).cos()
            })
            .collect();
        for j in 0..8 {
            let out = op
                .apply(&TorusPoint::new(vec![TAU * j as f64 / 8.0]), &x)
                .unwrap();
            for t in 0..8 {
                assert!((out[t] - x[(t + 8 - j) % 8]).abs() < 1e-10);
            }
        }
        assert!(TorusOperator::fourier(8, &[4]).is_err());
        assert!(TorusOperator::fourier(8, &[0, 1]).is_err());
    }

    fn table_strategy() -> impl Strategy<Value = (usize, usize, usize)> {
        (1usize..=3, 1usize..=40, 1usize..=3)
    }

    proptest! {
        #[test]
        fn built_tables_satisfy_invariants((n, l, m) in table_strategy()) {
            let t = FrequencyTable::for_model(n, l, m, true).unwrap();
            prop_assert_eq!(t.len(), l);
            prop_assert!(t.validate().is_ok());
            for (i, a) in t.entries().enumerate() {
                for b in t.entries().skip(i + 1) {
                    let neg: Vec<i32> = b.iter().map(|x| -x).collect();
                    prop_assert!(a != neg.as_slice() || a.iter().all(|&x| x == 0));
                }
            }
        }

        #[test]
        fn homomorphism(a in prop::collection::vec(-10.0f64..10.0, 2),
                        b in prop::collection::vec(-10.0f64..10.0, 2),
                        y in prop::collection::vec(-1.0f64..1.0, 16)) {
            let t = FrequencyTable::for_model(2, 8, 1, true).unwrap();
            let s1 = TorusPoint::new(a.clone());
            let s2 = TorusPoint::new(b.clone());
            let s12 = TorusPoint::new(vec![a[0] + b[0], a[1] + b[1]]);
            let lhs = rotate_coeffs(&t, &s1, &rotate_coeffs(&t, &s2, &y).unwrap()).unwrap();
            let rhs = rotate_coeffs(&t, &s12, &y).unwrap();
            for (x, z) in lhs.iter().zip(&rhs) {
                prop_assert!((x - z).abs() < 1e-12);
            }
        }
    }
}
