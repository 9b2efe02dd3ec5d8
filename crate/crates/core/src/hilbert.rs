//! Finite-dimensional internal space: spin-j states and basis changes.
//!
//! Spinors quantized along a direction `n = (θ, φ)` are built from the
//! z-basis with the z–y–z Euler rotation `R(φ, θ, 0)` in the Condon–Shortley
//! convention, so the z-basis components of `χ_σ(n)` are
//! `e^{-i m φ} d^j_{mσ}(θ)`. Quantum numbers are half-integers stored as
//! twice their value.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const NORM_TOL: f64 = 1e-12;

/// A half-integer, stored as twice its value. Serialized as text: "1/2", "-1", "0".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct HalfInt(i32);

impl HalfInt {
    pub const ZERO: HalfInt = HalfInt(0);
    pub const HALF: HalfInt = HalfInt(1);
    pub const MINUS_HALF: HalfInt = HalfInt(-1);
    pub const ONE: HalfInt = HalfInt(2);
    pub const MINUS_ONE: HalfInt = HalfInt(-2);

    pub const fn from_twice(twice: i32) -> Self {
        HalfInt(twice)
    }

    pub const fn twice(self) -> i32 {
        self.0
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 2.0
    }

    pub fn from_f64(x: f64) -> Result<Self> {
        let twice = (2.0 * x).round();
        if !x.is_finite() || (2.0 * x - twice).abs() > 1e-9 || twice.abs() > 1e6 {
            return Err(Error::domain(format!("{x} is not a half-integer")));
        }
        Ok(HalfInt(twice as i32))
    }

    /// +1 for positive projections, -1 for negative ones, 0 for zero.
    pub fn sign(self) -> i32 {
        self.0.signum()
    }
}

impl fmt::Display for HalfInt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 % 2 == 0 {
            write!(f, "{}", self.0 / 2)
        } else {
            write!(f, "{}/2", self.0)
        }
    }
}

impl FromStr for HalfInt {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::domain(format!("cannot parse {s:?} as a half-integer"));
        if let Some(num) = s.strip_suffix("/2") {
            let twice: i32 = num.trim().trim_start_matches('+').parse().map_err(|_| bad())?;
            return Ok(HalfInt(twice));
        }
        let x: f64 = s.parse().map_err(|_| bad())?;
        HalfInt::from_f64(x)
    }
}

impl From<HalfInt> for String {
    fn from(h: HalfInt) -> String {
        h.to_string()
    }
}

impl TryFrom<String> for HalfInt {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Spin> for HalfInt {
    fn from(s: Spin) -> HalfInt {
        s.j()
    }
}

impl TryFrom<HalfInt> for Spin {
    type Error = Error;

    fn try_from(j: HalfInt) -> Result<Self> {
        Spin::from_half_int(j)
    }
}

/// Spin quantum number j ≥ 0, stored as 2j.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "HalfInt", try_from = "HalfInt")]
pub struct Spin(u32);

impl Spin {
    pub const HALF: Spin = Spin(1);
    pub const ONE: Spin = Spin(2);
    pub const THREE_HALVES: Spin = Spin(3);

    pub const fn from_twice(twice: u32) -> Self {
        Spin(twice)
    }

    pub fn from_half_int(j: HalfInt) -> Result<Self> {
        if j.twice() < 0 {
            return Err(Error::domain(format!("spin must be non-negative, got {j}")));
        }
        Ok(Spin(j.twice() as u32))
    }

    pub const fn twice(self) -> u32 {
        self.0
    }

    pub fn j(self) -> HalfInt {
        HalfInt(self.0 as i32)
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 2.0
    }

    /// Dimension 2j+1 of the internal space.
    pub fn dim(self) -> usize {
        self.0 as usize + 1
    }

    /// Projections in storage order: j, j-1, …, -j.
    pub fn projections(self) -> impl Iterator<Item = HalfInt> + Clone {
        let tj = self.0 as i32;
        (0..=self.0 as i32).map(move |i| HalfInt(tj - 2 * i))
    }

    pub fn projection(self, index: usize) -> HalfInt {
        HalfInt(self.0 as i32 - 2 * index as i32)
    }

    /// Storage index of projection σ (index 0 is σ = j).
    pub fn index_of(self, sigma: HalfInt) -> Result<usize> {
        let tj = self.0 as i32;
        let ts = sigma.twice();
        if ts.abs() > tj || (tj - ts) % 2 != 0 {
            return Err(Error::domain(format!(
                "projection {sigma} is not valid for j = {}",
                self.j()
            )));
        }
        Ok(((tj - ts) / 2) as usize)
    }
}

impl fmt::Display for Spin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.j().fmt(f)
    }
}

/// A quantization axis on the unit sphere.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    theta: f64,
    phi: f64,
}

impl Direction {
    /// Polar angle θ ∈ [0, π]; the azimuth is wrapped into [0, 2π).
    pub fn new(theta: f64, phi: f64) -> Result<Self> {
        if !theta.is_finite() || !phi.is_finite() {
            return Err(Error::domain("direction angles must be finite"));
        }
        if !(-1e-12..=std::f64::consts::PI + 1e-12).contains(&theta) {
            return Err(Error::domain(format!("polar angle {theta} outside [0, π]")));
        }
        let theta = theta.clamp(0.0, std::f64::consts::PI);
        let mut phi = phi.rem_euclid(std::f64::consts::TAU);
        if phi >= std::f64::consts::TAU {
            phi = 0.0;
        }
        Ok(Direction { theta, phi })
    }

    pub fn z() -> Self {
        Direction { theta: 0.0, phi: 0.0 }
    }

    pub fn x() -> Self {
        Direction { theta: std::f64::consts::FRAC_PI_2, phi: 0.0 }
    }

    pub fn y() -> Self {
        Direction { theta: std::f64::consts::FRAC_PI_2, phi: std::f64::consts::FRAC_PI_2 }
    }

    /// Axis tilted from z towards x by `theta` (azimuth 0).
    pub fn polar(theta: f64) -> Result<Self> {
        Direction::new(theta, 0.0)
    }

    /// Axis at `angle` from +z, measured towards +x, anywhere in the x–z plane.
    pub fn in_xz_plane(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Direction::from_vector([s, 0.0, c]).expect("unit vector")
    }

    pub fn from_vector(v: [f64; 3]) -> Result<Self> {
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::domain("direction vector must be non-zero and finite"));
        }
        let theta = (v[2] / norm).clamp(-1.0, 1.0).acos();
        let phi = if v[0] == 0.0 && v[1] == 0.0 { 0.0 } else { v[1].atan2(v[0]) };
        Direction::new(theta, phi)
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn unit_vector(&self) -> [f64; 3] {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        [st * cp, st * sp, ct]
    }

    pub fn dot(&self, other: &Direction) -> f64 {
        let a = self.unit_vector();
        let b = other.unit_vector();
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }

    pub fn angle_to(&self, other: &Direction) -> f64 {
        self.dot(other).clamp(-1.0, 1.0).acos()
    }

    /// True when both name the same physical axis (same unit vector).
    pub fn same_axis(&self, other: &Direction) -> bool {
        let a = self.unit_vector();
        let b = other.unit_vector();
        (0..3).all(|i| (a[i] - b[i]).abs() < 1e-12)
    }
}

fn factorial(n: i32) -> f64 {
    (2..=n).fold(1.0, |acc, k| acc * f64::from(k))
}

/// d^j_{m'm}(β) from twice-valued quantum numbers, assumed valid.
fn small_d(tj: i32, tmp: i32, tm: i32, beta: f64) -> f64 {
    // j±m etc. are integers because the parities match.
    let jpmp = (tj + tmp) / 2;
    let jmmp = (tj - tmp) / 2;
    let jpm = (tj + tm) / 2;
    let jmm = (tj - tm) / 2;
    let mpmm = (tmp - tm) / 2;
    let prefactor =
        (factorial(jpmp) * factorial(jmmp) * factorial(jpm) * factorial(jmm)).sqrt();
    let (s, c) = (beta / 2.0).sin_cos();
    let k_min = 0.max(-mpmm);
    let k_max = jpm.min(jmmp);
    let mut sum = 0.0;
    for k in k_min..=k_max {
        let sign = if (k + mpmm) % 2 == 0 { 1.0 } else { -1.0 };
        let denom = factorial(jpm - k) * factorial(k) * factorial(jmmp - k) * factorial(k + mpmm);
        let cp = jpm + jmmp - 2 * k; // 2j + m - m' - 2k
        let sp = mpmm + 2 * k;
        sum += sign * c.powi(cp) * s.powi(sp) / denom;
    }
    prefactor * sum
}

/// Wigner small-d element d^j_{σ'σ}(β) = ⟨j σ'| exp(-iβJ_y) |j σ⟩.
pub fn wigner_small_d(j: Spin, sigma_prime: HalfInt, sigma: HalfInt, beta: f64) -> Result<f64> {
    j.index_of(sigma_prime)?;
    j.index_of(sigma)?;
    if !beta.is_finite() {
        return Err(Error::domain("rotation angle must be finite"));
    }
    Ok(small_d(j.twice() as i32, sigma_prime.twice(), sigma.twice(), beta))
}

/// Full d^j(β) in storage order (rows σ', columns σ, both j..-j).
pub fn wigner_d_matrix(j: Spin, beta: f64) -> DMatrix<f64> {
    let tj = j.twice() as i32;
    DMatrix::from_fn(j.dim(), j.dim(), |r, c| {
        small_d(tj, j.projection(r).twice(), j.projection(c).twice(), beta)
    })
}

/// z-basis components of the spinors quantized along `axis`: column σ holds χ_σ(axis).
fn frame(j: Spin, axis: &Direction) -> DMatrix<Complex64> {
    let d = wigner_d_matrix(j, axis.theta);
    DMatrix::from_fn(j.dim(), j.dim(), |r, c| {
        let m = j.projection(r).value();
        Complex64::from_polar(1.0, -m * axis.phi) * d[(r, c)]
    })
}

/// Unitary change of basis for a spin-j space.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationMatrix {
    spin: Spin,
    entries: DMatrix<Complex64>,
}

impl RotationMatrix {
    pub fn identity(spin: Spin) -> Self {
        RotationMatrix { spin, entries: DMatrix::identity(spin.dim(), spin.dim()) }
    }

    pub fn spin(&self) -> Spin {
        self.spin
    }

    pub fn entries(&self) -> &DMatrix<Complex64> {
        &self.entries
    }

    /// ⟨χ_σ'(to)|χ_σ(from)⟩ by storage index.
    pub fn entry(&self, row: usize, col: usize) -> Complex64 {
        self.entries[(row, col)]
    }

    pub fn apply(&self, amplitudes: &[Complex64]) -> Vec<Complex64> {
        (0..self.spin.dim())
            .map(|r| (0..self.spin.dim()).map(|c| self.entries[(r, c)] * amplitudes[c]).sum())
            .collect()
    }

    pub fn adjoint(&self) -> Self {
        RotationMatrix { spin: self.spin, entries: self.entries.adjoint() }
    }

    /// `self · rhs`: first apply `rhs`, then `self`.
    pub fn compose(&self, rhs: &RotationMatrix) -> Self {
        RotationMatrix { spin: self.spin, entries: &self.entries * &rhs.entries }
    }

    /// max |(M†M - I)_{ab}|.
    pub fn unitarity_defect(&self) -> f64 {
        let product = self.entries.adjoint() * &self.entries;
        let n = self.spin.dim();
        let mut worst: f64 = 0.0;
        for r in 0..n {
            for c in 0..n {
                let target = if r == c { 1.0 } else { 0.0 };
                worst = worst.max((product[(r, c)] - target).norm());
            }
        }
        worst
    }
}

/// Matrix re-expressing amplitudes quantized along `from` in the basis quantized along `to`.
pub fn rotation_between(j: Spin, from: &Direction, to: &Direction) -> RotationMatrix {
    RotationMatrix { spin: j, entries: frame(j, to).adjoint() * frame(j, from) }
}

/// A normalized pure state of the internal space, expressed along `axis`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpinState {
    spin: Spin,
    axis: Direction,
    amplitudes: Vec<Complex64>,
}

impl SpinState {
    pub fn new(spin: Spin, axis: Direction, amplitudes: Vec<Complex64>) -> Result<Self> {
        if amplitudes.len() != spin.dim() {
            return Err(Error::domain(format!(
                "spin {spin} needs {} amplitudes, got {}",
                spin.dim(),
                amplitudes.len()
            )));
        }
        let norm: f64 = amplitudes.iter().map(|a| a.norm_sqr()).sum();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::domain(format!("spin state norm {norm} differs from 1")));
        }
        Ok(SpinState { spin, axis, amplitudes })
    }

    /// Rescales `amplitudes` to unit norm.
    pub fn normalized(spin: Spin, axis: Direction, mut amplitudes: Vec<Complex64>) -> Result<Self> {
        let norm: f64 = amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::domain("cannot normalize a zero spin state"));
        }
        amplitudes.iter_mut().for_each(|a| *a /= norm);
        SpinState::new(spin, axis, amplitudes)
    }

    /// The eigenstate χ_σ(axis).
    pub fn basis(spin: Spin, axis: Direction, sigma: HalfInt) -> Result<Self> {
        let idx = spin.index_of(sigma)?;
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); spin.dim()];
        amplitudes[idx] = Complex64::new(1.0, 0.0);
        Ok(SpinState { spin, axis, amplitudes })
    }

    pub fn spin(&self) -> Spin {
        self.spin
    }

    pub fn axis(&self) -> Direction {
        self.axis
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn amplitude(&self, sigma: HalfInt) -> Result<Complex64> {
        Ok(self.amplitudes[self.spin.index_of(sigma)?])
    }

    /// The same state with amplitudes along `axis`.
    pub fn rebased(&self, axis: &Direction) -> SpinState {
        let m = rotation_between(self.spin, &self.axis, axis);
        SpinState { spin: self.spin, axis: *axis, amplitudes: m.apply(&self.amplitudes) }
    }

    /// c_σ = ⟨χ_σ(target)|state⟩.
    pub fn overlap_amplitude(&self, target: &Direction, sigma: HalfInt) -> Result<Complex64> {
        let idx = self.spin.index_of(sigma)?;
        Ok(self.rebased(target).amplitudes[idx])
    }

    /// |c_σ|² along `target`, in storage order.
    pub fn populations_along(&self, target: &Direction) -> Vec<f64> {
        self.rebased(target).amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }
}

/// c_σ = ⟨χ_σ(target)|state⟩.
pub fn overlap_amplitude(state: &SpinState, target: &Direction, sigma: HalfInt) -> Result<Complex64> {
    state.overlap_amplitude(target, sigma)
}

/// |⟨χ_ρ(n)|χ_σ(k)⟩|².
pub fn transition_probability(
    rho: HalfInt,
    n: &Direction,
    sigma: HalfInt,
    k: &Direction,
    j: Spin,
) -> Result<f64> {
    let row = j.index_of(rho)?;
    let col = j.index_of(sigma)?;
    Ok(rotation_between(j, k, n).entry(row, col).norm_sqr())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    /// Spin-y generator in storage order.
    fn spin_y(j: Spin) -> DMatrix<Complex64> {
        let jv = j.value();
        let n = j.dim();
        let mut jp = DMatrix::<Complex64>::zeros(n, n);
        for c in 0..n {
            let m = j.projection(c).value();
            if c > 0 {
                // J+|m⟩ lands on m+1, one row up.
                jp[(c - 1, c)] = Complex64::new((jv * (jv + 1.0) - m * (m + 1.0)).sqrt(), 0.0);
            }
        }
        let jm = jp.adjoint();
        (jp - jm) / Complex64::new(0.0, 2.0)
    }

    fn expm(a: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        let norm = a.iter().map(|x| x.norm()).fold(0.0, f64::max).max(1e-300);
        let squarings = (norm.log2().ceil() as i32 + 4).max(0);
        let scaled = a / Complex64::new(2f64.powi(squarings), 0.0);
        let n = a.nrows();
        let mut result = DMatrix::<Complex64>::identity(n, n);
        let mut term = DMatrix::<Complex64>::identity(n, n);
        for k in 1..30 {
            term = &term * &scaled / Complex64::new(k as f64, 0.0);
            result += &term;
        }
        for _ in 0..squarings {
            result = &result * &result;
        }
        result
    }

    pub(crate) fn random_direction(rng: &mut impl Rng) -> Direction {
        let cos_theta: f64 = rng.random_range(-1.0..=1.0);
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        Direction::new(cos_theta.acos(), phi).unwrap()
    }

    #[test]
    fn small_d_examples() {
        let d = |s, b| wigner_small_d(Spin::HALF, HalfInt::HALF, HalfInt::HALF, b).unwrap() * s;
        assert_eq!(d(1.0, 0.0), 1.0);
        assert_abs_diff_eq!(d(1.0, FRAC_PI_2), 0.7071067812, epsilon = 1e-10);
        let d00 = wigner_small_d(Spin::ONE, HalfInt::ZERO, HalfInt::ZERO, FRAC_PI_2).unwrap();
        assert_abs_diff_eq!(d00, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn small_d_rejects_bad_quantum_numbers() {
        assert!(wigner_small_d(Spin::HALF, HalfInt::ONE, HalfInt::HALF, 0.3).is_err());
        assert!(wigner_small_d(Spin::ONE, HalfInt::HALF, HalfInt::ZERO, 0.3).is_err());
        assert!(wigner_small_d(Spin::ONE, HalfInt::from_twice(-4), HalfInt::ZERO, 0.3).is_err());
    }

    #[test]
    fn small_d_matches_generator_exponential() {
        let mut rng = crate::rng::seeded_rng(11);
        for tj in 0..=6u32 {
            let j = Spin::from_twice(tj);
            let jy = spin_y(j);
            for _ in 0..25 {
                let beta: f64 = rng.random_range(-PI..PI);
                let oracle = expm(&(jy.clone() * Complex64::new(0.0, -beta)));
                let formula = wigner_d_matrix(j, beta);
                for r in 0..j.dim() {
                    for c in 0..j.dim() {
                        let want = oracle[(r, c)];
                        assert!(want.im.abs() < 1e-10);
                        assert!(
                            (formula[(r, c)] - want.re).abs() < 1e-10,
                            "j={j} β={beta} ({r},{c}): {} vs {}",
                            formula[(r, c)],
                            want.re
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn spinor_is_eigenvector_of_projected_spin() {
        // n·J χ_σ(n) = σ χ_σ(n), with J built from ladder operators.
        let mut rng = crate::rng::seeded_rng(5);
        for tj in 1..=3u32 {
            let j = Spin::from_twice(tj);
            let n = j.dim();
            let jy = spin_y(j);
            let mut jp = DMatrix::<Complex64>::zeros(n, n);
            let jv = j.value();
            for c in 1..n {
                let m = j.projection(c).value();
                jp[(c - 1, c)] = Complex64::new((jv * (jv + 1.0) - m * (m + 1.0)).sqrt(), 0.0);
            }
            let jx = (&jp + jp.adjoint()) / Complex64::new(2.0, 0.0);
            let jz = DMatrix::from_fn(n, n, |r, c| {
                if r == c { Complex64::new(j.projection(r).value(), 0.0) } else { Complex64::new(0.0, 0.0) }
            });
            for _ in 0..10 {
                let axis = random_direction(&mut rng);
                let u = axis.unit_vector();
                let nj = &jx * Complex64::new(u[0], 0.0)
                    + &jy * Complex64::new(u[1], 0.0)
                    + &jz * Complex64::new(u[2], 0.0);
                let f = frame(j, &axis);
                for c in 0..n {
                    let col = f.column(c).into_owned();
                    let lhs = &nj * &col;
                    let sigma = j.projection(c).value();
                    for r in 0..n {
                        assert!((lhs[r] - col[r] * sigma).norm() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn rotation_examples() {
        let id = rotation_between(Spin::HALF, &Direction::z(), &Direction::z());
        assert!(id.entries().iter().zip(RotationMatrix::identity(Spin::HALF).entries().iter())
            .all(|(a, b)| (a - b).norm() < 1e-15));
        let zx = rotation_between(Spin::HALF, &Direction::z(), &Direction::x());
        for e in zx.entries().iter() {
            assert_abs_diff_eq!(e.norm(), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        }
    }

    #[test]
    fn rotations_are_unitary_and_compose() {
        let mut rng = crate::rng::seeded_rng(1);
        for spin in [Spin::HALF, Spin::ONE, Spin::THREE_HALVES] {
            for _ in 0..100 {
                let a = random_direction(&mut rng);
                let b = random_direction(&mut rng);
                let c = random_direction(&mut rng);
                let ab = rotation_between(spin, &a, &b);
                assert!(ab.unitarity_defect() < 1e-12);
                let ac = rotation_between(spin, &a, &c);
                let via_b = rotation_between(spin, &b, &c).compose(&ab);
                for (x, y) in ac.entries().iter().zip(via_b.entries().iter()) {
                    assert!((x - y).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn overlap_examples() {
        let up = SpinState::basis(Spin::HALF, Direction::z(), HalfInt::HALF).unwrap();
        let c = overlap_amplitude(&up, &Direction::z(), HalfInt::HALF).unwrap();
        assert_abs_diff_eq!(c.re, 1.0, epsilon = 1e-15);
        let c = overlap_amplitude(&up, &Direction::z(), HalfInt::MINUS_HALF).unwrap();
        assert_eq!(c.norm(), 0.0);
        let c = overlap_amplitude(&up, &Direction::polar(FRAC_PI_2).unwrap(), HalfInt::HALF).unwrap();
        assert_abs_diff_eq!(c.norm_sqr(), 0.5, epsilon = 1e-12);
        assert!(overlap_amplitude(&up, &Direction::z(), HalfInt::ONE).is_err());
    }

    #[test]
    fn transition_probability_examples() {
        let p = transition_probability(HalfInt::HALF, &Direction::z(), HalfInt::HALF, &Direction::z(), Spin::HALF)
            .unwrap();
        assert_eq!(p, 1.0);
        for theta in [0.1, FRAC_PI_4, 1.0, 2.5, PI] {
            let k = Direction::polar(theta).unwrap();
            let p = transition_probability(HalfInt::HALF, &Direction::z(), HalfInt::HALF, &k, Spin::HALF)
                .unwrap();
            let d = wigner_small_d(Spin::HALF, HalfInt::HALF, HalfInt::HALF, theta).unwrap();
            assert_abs_diff_eq!(p, d * d, epsilon = 1e-12);
            assert_abs_diff_eq!(p, (theta / 2.0).cos().powi(2), epsilon = 1e-12);
        }
        assert!(transition_probability(HalfInt::ONE, &Direction::z(), HalfInt::HALF, &Direction::x(), Spin::HALF)
            .is_err());
    }

    #[test]
    fn transition_probabilities_are_complete() {
        let mut rng = crate::rng::seeded_rng(2);
        for spin in [Spin::HALF, Spin::ONE] {
            for _ in 0..50 {
                let n = random_direction(&mut rng);
                let k = random_direction(&mut rng);
                let rho = spin.projection(rng.random_range(0..spin.dim()));
                let total: f64 = spin
                    .projections()
                    .map(|s| transition_probability(rho, &n, s, &k, spin).unwrap())
                    .sum();
                assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn probabilities_invariant_under_global_rotation() {
        use nalgebra::{Rotation3, Unit, Vector3};
        let mut rng = crate::rng::seeded_rng(3);
        for spin in [Spin::HALF, Spin::ONE, Spin::THREE_HALVES] {
            for _ in 0..30 {
                let n = random_direction(&mut rng);
                let k = random_direction(&mut rng);
                let axis = random_direction(&mut rng).unit_vector();
                let rot = Rotation3::from_axis_angle(
                    &Unit::new_normalize(Vector3::new(axis[0], axis[1], axis[2])),
                    rng.random_range(0.0..std::f64::consts::TAU),
                );
                let turn = |d: &Direction| {
                    let v = rot * Vector3::from(d.unit_vector());
                    Direction::from_vector([v.x, v.y, v.z]).unwrap()
                };
                let (n2, k2) = (turn(&n), turn(&k));
                for rho in spin.projections() {
                    for sigma in spin.projections() {
                        let before = transition_probability(rho, &n, sigma, &k, spin).unwrap();
                        let after = transition_probability(rho, &n2, sigma, &k2, spin).unwrap();
                        assert!((before - after).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn half_int_parsing_and_display() {
        assert_eq!("1/2".parse::<HalfInt>().unwrap(), HalfInt::HALF);
        assert_eq!("-3/2".parse::<HalfInt>().unwrap(), HalfInt::from_twice(-3));
        assert_eq!("-0.5".parse::<HalfInt>().unwrap(), HalfInt::MINUS_HALF);
        assert_eq!("1".parse::<HalfInt>().unwrap(), HalfInt::ONE);
        assert!("0.3".parse::<HalfInt>().is_err());
        assert_eq!(HalfInt::from_twice(-3).to_string(), "-3/2");
        assert_eq!(HalfInt::MINUS_ONE.to_string(), "-1");
    }

    #[test]
    fn in_plane_directions() {
        let d = Direction::in_xz_plane(3.0 * FRAC_PI_4 + PI);
        let u = d.unit_vector();
        assert_abs_diff_eq!(u[0], -(3.0 * FRAC_PI_4).sin(), epsilon = 1e-12);
        assert_abs_diff_eq!(u[2], -(3.0 * FRAC_PI_4).cos(), epsilon = 1e-12);
        assert_abs_diff_eq!(Direction::z().angle_to(&Direction::x()), FRAC_PI_2, epsilon = 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn overlaps_complete(
                tj in 1u32..=3,
                re in proptest::collection::vec(-1.0f64..1.0, 4),
                im in proptest::collection::vec(-1.0f64..1.0, 4),
                theta in 0.0f64..std::f64::consts::PI,
                phi in 0.0f64..std::f64::consts::TAU,
                theta2 in 0.0f64..std::f64::consts::PI,
                phi2 in 0.0f64..std::f64::consts::TAU,
            ) {
                let spin = Spin::from_twice(tj);
                let amps: Vec<Complex64> = (0..spin.dim()).map(|i| Complex64::new(re[i], im[i])).collect();
                prop_assume!(amps.iter().map(|a| a.norm_sqr()).sum::<f64>() > 1e-3);
                let state = SpinState::normalized(spin, Direction::new(theta, phi).unwrap(), amps).unwrap();
                let target = Direction::new(theta2, phi2).unwrap();
                let total: f64 = spin.projections()
                    .map(|s| state.overlap_amplitude(&target, s).unwrap().norm_sqr())
                    .sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                let back = state.rebased(&target).rebased(&state.axis());
                for (a, b) in back.amplitudes().iter().zip(state.amplitudes()) {
                    prop_assert!((a - b).norm() < 1e-12);
                }
            }
        }
    }
}
