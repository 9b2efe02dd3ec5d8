//! Correlated fragment pairs on ℍ₁⊗ℍ₂.
//!
//! A pair state is a (2j+1)×(2j+1) amplitude matrix `A[σ₁][σ₂]` with rows
//! quantized along fragment 1's axis and columns along fragment 2's.
//! Re-expressing it along new axes is `M₁ A M₂ᵀ`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;
use serde::Serialize;

use crate::hilbert::{rotation_between, Direction, HalfInt, Spin, SpinState};
use crate::rng::stream_rng;
use crate::sterngerlach::{branch_wave, max_pairwise_overlap, Apparatus, Beam, Traversal, SEPARATION_THRESHOLD};
use crate::{Error, Result};

const NORM_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct PairState {
    spin: Spin,
    axes: (Direction, Direction),
    amplitudes: DMatrix<Complex64>,
}

impl PairState {
    pub fn new(spin: Spin, axes: (Direction, Direction), amplitudes: DMatrix<Complex64>) -> Result<Self> {
        let d = spin.dim();
        if amplitudes.nrows() != d || amplitudes.ncols() != d {
            return Err(Error::domain(format!("spin {spin} pair needs a {d}×{d} amplitude matrix")));
        }
        let norm = amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::domain(format!("pair state norm {norm} differs from 1")));
        }
        Ok(PairState { spin, axes, amplitudes })
    }

    /// Uncorrelated χ₁ ⊗ χ₂.
    pub fn product(chi1: &SpinState, chi2: &SpinState) -> Result<Self> {
        if chi1.spin() != chi2.spin() {
            return Err(Error::domain("both fragments must carry the same spin"));
        }
        let d = chi1.spin().dim();
        let a = DMatrix::from_fn(d, d, |r, c| chi1.amplitudes()[r] * chi2.amplitudes()[c]);
        PairState::new(chi1.spin(), (chi1.axis(), chi2.axis()), a)
    }

    pub fn spin(&self) -> Spin {
        self.spin
    }

    pub fn axes(&self) -> (Direction, Direction) {
        self.axes
    }

    pub fn amplitudes(&self) -> &DMatrix<Complex64> {
        &self.amplitudes
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Amplitudes along `n1` for fragment 1 and `n2` for fragment 2.
    pub fn rebased(&self, n1: &Direction, n2: &Direction) -> PairState {
        let m1 = rotation_between(self.spin, &self.axes.0, n1);
        let m2 = rotation_between(self.spin, &self.axes.1, n2);
        let amplitudes = m1.entries() * &self.amplitudes * m2.entries().transpose();
        PairState { spin: self.spin, axes: (*n1, *n2), amplitudes }
    }
}

/// (|+−⟩ − |−+⟩)/√2 along z for both fragments.
pub fn singlet_pair() -> PairState {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut a = DMatrix::zeros(2, 2);
    a[(0, 1)] = Complex64::new(h, 0.0);
    a[(1, 0)] = Complex64::new(-h, 0.0);
    PairState { spin: Spin::HALF, axes: (Direction::z(), Direction::z()), amplitudes: a }
}

/// P(σ₁, σ₂) for outcomes along (n₁, n₂); `probabilities[r][c]` in storage order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JointTable {
    pub spin: Spin,
    pub n1: Direction,
    pub n2: Direction,
    pub probabilities: Vec<Vec<f64>>,
}

impl JointTable {
    pub fn probability(&self, sigma1: HalfInt, sigma2: HalfInt) -> Result<f64> {
        Ok(self.probabilities[self.spin.index_of(sigma1)?][self.spin.index_of(sigma2)?])
    }

    pub fn marginal1(&self) -> Vec<f64> {
        self.probabilities.iter().map(|row| row.iter().sum()).collect()
    }

    pub fn marginal2(&self) -> Vec<f64> {
        let d = self.probabilities.len();
        (0..d).map(|c| self.probabilities.iter().map(|row| row[c]).sum()).collect()
    }

    pub fn total(&self) -> f64 {
        self.probabilities.iter().flatten().sum()
    }
}

pub fn joint_table(pair: &PairState, n1: &Direction, n2: &Direction) -> JointTable {
    let a = pair.rebased(n1, n2).amplitudes;
    let d = pair.spin.dim();
    let probabilities = (0..d).map(|r| (0..d).map(|c| a[(r, c)].norm_sqr()).collect()).collect();
    JointTable { spin: pair.spin, n1: *n1, n2: *n2, probabilities }
}

fn require_half(pair: &PairState) -> Result<()> {
    if pair.spin != Spin::HALF {
        return Err(Error::Unsupported(format!("correlations are defined for spin 1/2 fragments, not {}", pair.spin)));
    }
    Ok(())
}

/// Σ sign(σ₁) sign(σ₂) P(σ₁, σ₂), with sign(+1/2) = +1.
pub fn correlation(pair: &PairState, n1: &Direction, n2: &Direction) -> Result<f64> {
    require_half(pair)?;
    let p = joint_table(pair, n1, n2).probabilities;
    Ok(p[0][0] + p[1][1] - p[0][1] - p[1][0])
}

/// Analyzer directions: `a`, `a′` for fragment 1 and `b`, `b′` for fragment 2.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChshSettings {
    pub a: Direction,
    pub a_prime: Direction,
    pub b: Direction,
    pub b_prime: Direction,
}

impl ChshSettings {
    /// Four settings in the x–z plane, angles from +z in radians.
    pub fn in_plane(a: f64, a_prime: f64, b: f64, b_prime: f64) -> Self {
        ChshSettings {
            a: Direction::in_xz_plane(a),
            a_prime: Direction::in_xz_plane(a_prime),
            b: Direction::in_xz_plane(b),
            b_prime: Direction::in_xz_plane(b_prime),
        }
    }

    /// a = 90°, a′ = 0°, b = 45°, b′ = 135°: maximal violation for the singlet.
    pub fn optimal() -> Self {
        use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
        ChshSettings::in_plane(FRAC_PI_2, 0.0, FRAC_PI_4, 3.0 * FRAC_PI_4)
    }

    /// The pairs (a,b), (a,b′), (a′,b), (a′,b′).
    pub fn pairs(&self) -> [(Direction, Direction); 4] {
        [(self.a, self.b), (self.a, self.b_prime), (self.a_prime, self.b), (self.a_prime, self.b_prime)]
    }
}

fn chsh_combination(e: &[f64; 4]) -> f64 {
    (e[0] + e[1] + e[2] - e[3]).abs()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChshResult {
    pub settings: ChshSettings,
    /// E(a,b), E(a,b′), E(a′,b), E(a′,b′).
    pub correlations: [f64; 4],
    pub s: f64,
    /// Per-correlation standard errors, when sampled.
    pub standard_errors: Option<[f64; 4]>,
    pub s_standard_error: Option<f64>,
    pub violation: bool,
}

pub fn chsh(pair: &PairState, settings: &ChshSettings) -> Result<ChshResult> {
    let mut correlations = [0.0; 4];
    for (e, (n1, n2)) in correlations.iter_mut().zip(settings.pairs()) {
        *e = correlation(pair, &n1, &n2)?;
    }
    let s = chsh_combination(&correlations);
    Ok(ChshResult { settings: *settings, correlations, s, standard_errors: None, s_standard_error: None, violation: s > 2.0 })
}

/// One sampled pair: the setting index and the branch each fragment took.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Trial {
    pub setting: u8,
    pub fragment1: HalfInt,
    pub fragment2: HalfInt,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampledChsh {
    pub result: ChshResult,
    /// Outcome counts per setting, `[setting][r][c]` in storage order.
    pub counts: Vec<Vec<Vec<u64>>>,
    #[serde(skip)]
    pub trials: Vec<Trial>,
}

/// Draws `count` pairs per setting from the joint tables; setting k uses
/// stream k of `seed`. Standard errors are √((1 − E²)/count).
pub fn sampled_chsh(pair: &PairState, settings: &ChshSettings, count: usize, seed: u64) -> Result<SampledChsh> {
    require_half(pair)?;
    if count < 1000 {
        return Err(Error::domain(format!("sampled CHSH needs at least 1000 pairs per setting, got {count}")));
    }
    let pairs = settings.pairs();
    let per_setting = (0..4usize)
        .into_par_iter()
        .map(|k| {
            let (n1, n2) = pairs[k];
            let table = joint_table(pair, &n1, &n2);
            let flat: Vec<f64> = table.probabilities.iter().flatten().copied().collect();
            let dist = WeightedIndex::new(&flat).map_err(|e| Error::contract(format!("invalid joint table: {e}")))?;
            let mut rng = stream_rng(seed, k as u64);
            let mut counts = vec![vec![0u64; 2]; 2];
            let trials: Vec<Trial> = (0..count)
                .map(|_| {
                    let cell = dist.sample(&mut rng);
                    let (r, c) = (cell / 2, cell % 2);
                    counts[r][c] += 1;
                    Trial { setting: k as u8, fragment1: Spin::HALF.projection(r), fragment2: Spin::HALF.projection(c) }
                })
                .collect();
            Ok((counts, trials))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = count as f64;
    let mut correlations = [0.0; 4];
    let mut errors = [0.0; 4];
    let mut counts = Vec::with_capacity(4);
    let mut trials = Vec::with_capacity(4 * count);
    for (k, (c, t)) in per_setting.into_iter().enumerate() {
        let e = (c[0][0] as f64 + c[1][1] as f64 - c[0][1] as f64 - c[1][0] as f64) / n;
        correlations[k] = e;
        errors[k] = ((1.0 - e * e) / n).sqrt();
        counts.push(c);
        trials.extend(t);
    }
    let s = chsh_combination(&correlations);
    let s_err = errors.iter().map(|e| e * e).sum::<f64>().sqrt();
    Ok(SampledChsh {
        result: ChshResult {
            settings: *settings,
            correlations,
            s,
            standard_errors: Some(errors),
            s_standard_error: Some(s_err),
            violation: s > 2.0,
        },
        counts,
        trials,
    })
}

/// The spatial side of a pair: fragment 1 flies towards -q through an
/// apparatus along n₁, fragment 2 towards +q through one along n₂.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FragmentRun {
    pub table: JointTable,
    /// Mean position of each fragment-1 branch, storage order.
    pub fragment1_positions: Vec<f64>,
    pub fragment2_positions: Vec<f64>,
    pub fragment1_overlap: f64,
    pub fragment2_overlap: f64,
    pub separated: bool,
    /// Largest |‖ψ‖² − 1| over the branch waves of both fragments.
    pub norm_drift: f64,
}

/// Evolves each fragment's spatial branches in its own apparatus. The
/// Hamiltonian is a sum of one-fragment terms diagonal in σ₁ and σ₂, so
/// the joint branch (σ₁, σ₂) has spatial part ψ₁σ₁(q₁)ψ₂σ₂(q₂) and weight P(σ₁, σ₂).
pub fn opposed_fragments(
    pair: &PairState,
    n1: &Direction,
    n2: &Direction,
    beam: &Beam,
    apparatus: &Apparatus,
    traversal: &Traversal,
) -> Result<FragmentRun> {
    let spin = pair.spin;
    let table = joint_table(pair, n1, n2);
    let left_beam = beam.mirrored()?.packet()?;
    let right_beam = beam.packet()?;
    let left_app = apparatus.mirrored().oriented(*n1);
    let right_app = apparatus.oriented(*n2);
    let run = |packet, app: &Apparatus| -> Result<Vec<_>> {
        spin.projections().map(|s| branch_wave(packet, app, spin, s, traversal)).collect()
    };
    let left = run(&left_beam, &left_app)?;
    let right = run(&right_beam, &right_app)?;
    let fragment1_overlap = max_pairwise_overlap(&left);
    let fragment2_overlap = max_pairwise_overlap(&right);
    Ok(FragmentRun {
        table,
        fragment1_positions: left.iter().map(|w| w.mean_position()).collect(),
        fragment2_positions: right.iter().map(|w| w.mean_position()).collect(),
        fragment1_overlap,
        fragment2_overlap,
        separated: fragment1_overlap < SEPARATION_THRESHOLD && fragment2_overlap < SEPARATION_THRESHOLD,
        norm_drift: left.iter().chain(&right).map(|w| (w.norm() - 1.0).abs()).fold(0.0, f64::max),
    })
}
