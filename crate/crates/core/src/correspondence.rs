//! Checks of the classical limit.
//!
//! A wavefunction is split into action and log-amplitude, `Ψ = exp(iS/ħ + U)`,
//! the local WKB validity ratio is evaluated from the complex phase
//! `Θ = -iħ ln Ψ`, and trajectory-ensemble densities are compared with the
//! exact `|Ψ|²` in L1 over a sweep of ħ values.

use std::io::Write;
use std::ops::Range;
use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classical::{bin_density, propagate_ensemble, sample_ensemble, DensityField, MomentumSampling, PotentialField};
use crate::quantum::{density, gaussian_packet, GridSpec, GridWaveFunction, SplitOperator, PHASE_WRAP_LIMIT};
use crate::{Error, Result};

/// Nodes with |Ψ| below this fraction of max|Ψ| are outside the support.
pub const AMPLITUDE_FLOOR: f64 = 1e-8;
/// Second differences of ln Ψ (in grid units) below this count as zero curvature.
pub const CURVATURE_GUARD: f64 = 1e-12;
pub const DEFAULT_KAPPA: f64 = 10.0;
/// Minimum share of the norm the connected support must hold.
const SUPPORT_SHARE: f64 = 0.99;

/// `S = ħ·arg Ψ` (unwrapped) and `U = ln|Ψ|` on the connected support; NaN elsewhere.
#[derive(Clone, Debug)]
pub struct PhaseDecomposition {
    grid: GridSpec,
    hbar: f64,
    action: Vec<f64>,
    log_amplitude: Vec<f64>,
    support: Range<usize>,
    floor: f64,
}

impl PhaseDecomposition {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    pub fn action(&self) -> &[f64] {
        &self.action
    }

    pub fn log_amplitude(&self) -> &[f64] {
        &self.log_amplitude
    }

    /// Node indices of the supported region.
    pub fn support(&self) -> Range<usize> {
        self.support.clone()
    }

    pub fn amplitude_floor(&self) -> f64 {
        self.floor
    }

    /// `exp(iS/ħ + U)` on the support, zero elsewhere.
    pub fn reconstruct(&self) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.grid.points()];
        for i in self.support.clone() {
            out[i] = Complex64::from_polar(self.log_amplitude[i].exp(), self.action[i] / self.hbar);
        }
        out
    }

    /// Largest |reconstruction − Ψ| over the support.
    pub fn reconstruction_residual(&self, psi: &GridWaveFunction) -> f64 {
        let rebuilt = self.reconstruct();
        self.support.clone().map(|i| (rebuilt[i] - psi.amplitudes()[i]).norm()).fold(0.0, f64::max)
    }
}

/// Phase increment arg(b·a*) between neighbouring nodes.
fn phase_step(a: Complex64, b: Complex64) -> f64 {
    (b * a.conj()).arg()
}

pub fn decompose_phase(psi: &GridWaveFunction) -> Result<PhaseDecomposition> {
    let amps = psi.amplitudes();
    let n = amps.len();
    let (peak, max_abs) = amps
        .iter()
        .map(|a| a.norm())
        .enumerate()
        .fold((0, 0.0), |best, (i, a)| if a > best.1 { (i, a) } else { best });
    if !(max_abs > 0.0) {
        return Err(Error::domain("cannot decompose a wavefunction that vanishes everywhere"));
    }
    let floor = AMPLITUDE_FLOOR * max_abs;
    let mut lo = peak;
    while lo > 0 && amps[lo - 1].norm() > floor {
        lo -= 1;
    }
    let mut hi = peak + 1;
    while hi < n && amps[hi].norm() > floor {
        hi += 1;
    }
    let total: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
    let inside: f64 = amps[lo..hi].iter().map(|a| a.norm_sqr()).sum();
    if inside < SUPPORT_SHARE * total {
        let grid = psi.grid();
        let mut nodes = Vec::new();
        if lo > 0 {
            nodes.push(grid.coordinate(lo - 1));
        }
        if hi < n {
            nodes.push(grid.coordinate(hi));
        }
        return Err(Error::Decomposition { nodes });
    }
    let mut theta = vec![f64::NAN; n];
    theta[peak] = amps[peak].arg();
    for i in peak + 1..hi {
        theta[i] = theta[i - 1] + phase_step(amps[i - 1], amps[i]);
    }
    for i in (lo..peak).rev() {
        theta[i] = theta[i + 1] - phase_step(amps[i], amps[i + 1]);
    }
    let hbar = psi.hbar();
    let action = theta.iter().map(|t| hbar * t).collect();
    let log_amplitude = (0..n).map(|i| if (lo..hi).contains(&i) { amps[i].norm().ln() } else { f64::NAN }).collect();
    Ok(PhaseDecomposition { grid: *psi.grid(), hbar, action, log_amplitude, support: lo..hi, floor })
}

/// Local ratio `r = |Θ'|²/|Θ''|` and the mask `r > κħ`.
///
/// `r` is NaN where the five-point stencil leaves the support and +∞ where the
/// curvature guard applies.
#[derive(Clone, Debug)]
pub struct ValidityField {
    grid: GridSpec,
    hbar: f64,
    kappa: f64,
    ratio: Vec<f64>,
    mask: Vec<bool>,
    valid_fraction: f64,
}

impl ValidityField {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn ratio(&self) -> &[f64] {
        &self.ratio
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Share of the norm sitting on nodes where the mask holds.
    pub fn valid_fraction(&self) -> f64 {
        self.valid_fraction
    }
}

pub fn validity_field(psi: &GridWaveFunction) -> Result<ValidityField> {
    validity_field_with(psi, DEFAULT_KAPPA)
}

pub fn validity_field_with(psi: &GridWaveFunction, kappa: f64) -> Result<ValidityField> {
    if !(kappa > 0.0) {
        return Err(Error::domain(format!("validity threshold κ must be positive, got {kappa}")));
    }
    let parts = decompose_phase(psi)?;
    let amps = psi.amplitudes();
    let n = amps.len();
    let hbar = psi.hbar();
    let u = parts.log_amplitude();
    let support = parts.support();
    let mut ratio = vec![f64::NAN; n];
    let mut mask = vec![false; n];
    if support.len() >= 5 {
        for i in support.start + 2..support.end - 2 {
            // l_k = ln Ψ(q_i + kΔq) − ln Ψ(q_i), phases summed from neighbour steps
            let d_p1 = phase_step(amps[i], amps[i + 1]);
            let d_p2 = d_p1 + phase_step(amps[i + 1], amps[i + 2]);
            let d_m1 = -phase_step(amps[i - 1], amps[i]);
            let d_m2 = d_m1 - phase_step(amps[i - 2], amps[i - 1]);
            let l = |du: f64, dt: f64| Complex64::new(du, dt);
            let (lp1, lp2) = (l(u[i + 1] - u[i], d_p1), l(u[i + 2] - u[i], d_p2));
            let (lm1, lm2) = (l(u[i - 1] - u[i], d_m1), l(u[i - 2] - u[i], d_m2));
            let first = (8.0 * (lp1 - lm1) - (lp2 - lm2)) / 12.0;
            let second = (16.0 * (lp1 + lm1) - (lp2 + lm2)) / 12.0;
            ratio[i] = if second.norm() < CURVATURE_GUARD {
                f64::INFINITY
            } else {
                // Θ' = -iħ L', Θ'' = -iħ L''; the grid spacing cancels
                hbar * first.norm_sqr() / second.norm()
            };
            mask[i] = ratio[i] > kappa * hbar;
        }
    }
    let total: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
    let valid: f64 = amps.iter().zip(&mask).filter(|(_, m)| **m).map(|(a, _)| a.norm_sqr()).sum();
    Ok(ValidityField { grid: *psi.grid(), hbar, kappa, ratio, mask, valid_fraction: valid / total })
}

/// L1 distance `Σ|w − ρ|·ΔV` between densities on the same grid.
pub fn compare(w: &DensityField, rho: &DensityField) -> Result<f64> {
    if w.axes() != rho.axes() {
        return Err(Error::contract("densities live on different grids"));
    }
    Ok(w.values().iter().zip(rho.values()).map(|(a, b)| (a - b).abs()).sum::<f64>() * w.cell_volume())
}

/// Potentials available to sweep scenarios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PotentialSpec {
    Free,
    Harmonic { stiffness: f64 },
    /// k q²/2 + λ q⁴
    Anharmonic { stiffness: f64, quartic: f64 },
}

impl PotentialSpec {
    /// The field on a domain three grid-lengths wide, centred on the grid.
    pub fn build(&self, grid: &GridSpec) -> Result<PotentialField> {
        let (lo, hi) = (grid.lower() - grid.length(), grid.upper() + grid.length());
        match *self {
            PotentialSpec::Free => PotentialField::free(lo, hi),
            PotentialSpec::Harmonic { stiffness } => PotentialField::harmonic(lo, hi, stiffness),
            PotentialSpec::Anharmonic { stiffness, quartic } => PotentialField::anharmonic(lo, hi, stiffness, quartic),
        }
    }
}

fn default_coarsen() -> usize {
    1
}

fn default_snapshots() -> usize {
    1
}

fn default_kappa() -> f64 {
    DEFAULT_KAPPA
}

/// A Gaussian packet in a one-dimensional potential, propagated both ways.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepScenario {
    pub potential: PotentialSpec,
    pub mass: f64,
    pub center: f64,
    pub momentum: f64,
    pub width: f64,
    pub grid: GridSpec,
    /// Comparison grid = `grid` coarsened by this factor.
    #[serde(default = "default_coarsen")]
    pub coarsen: usize,
    pub final_time: f64,
    /// Comparison times are `k·final_time/snapshots`, k = 1..=snapshots.
    #[serde(default = "default_snapshots")]
    pub snapshots: usize,
    /// Upper bound on the quantum step; lowered per ħ to respect the phase-wrap guard.
    pub quantum_dt: f64,
    pub classical_dt: f64,
    pub members: usize,
    pub sampling: MomentumSampling,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
}

impl SweepScenario {
    pub fn comparison_grid(&self) -> Result<GridSpec> {
        self.grid.coarsened(self.coarsen)
    }

    pub fn initial_state(&self, hbar: f64) -> Result<GridWaveFunction> {
        gaussian_packet(&self.grid, self.center, self.momentum, self.width, hbar, self.mass)
    }

    /// Quantum step actually used at `hbar`: `quantum_dt`, reduced until
    /// max|V|·dt/ħ stays below 90% of the phase-wrap limit and a whole
    /// number of steps fits each snapshot interval.
    pub fn quantum_step(&self, hbar: f64) -> Result<(usize, f64)> {
        let v = self.potential.build(&self.grid)?;
        let vmax = v.max_abs_on(&self.grid);
        let interval = self.interval()?;
        let mut dt = self.quantum_dt;
        if vmax > 0.0 {
            dt = dt.min(0.9 * PHASE_WRAP_LIMIT * hbar / vmax);
        }
        if !(dt > 0.0) {
            return Err(Error::domain(format!("quantum step must be positive, got {}", self.quantum_dt)));
        }
        let steps = (interval / dt).ceil().max(1.0) as usize;
        Ok((steps, interval / steps as f64))
    }

    fn interval(&self) -> Result<f64> {
        if !(self.final_time > 0.0) || self.snapshots == 0 {
            return Err(Error::domain("final time and snapshot count must be positive"));
        }
        Ok(self.final_time / self.snapshots as f64)
    }

    pub fn times(&self) -> Result<Vec<f64>> {
        let interval = self.interval()?;
        Ok((1..=self.snapshots).map(|k| k as f64 * interval).collect())
    }
}

/// Exact wavefunctions at every comparison time.
pub fn exact_states(scenario: &SweepScenario, hbar: f64) -> Result<Vec<GridWaveFunction>> {
    let v = scenario.potential.build(&scenario.grid)?;
    let (steps, dt) = scenario.quantum_step(hbar)?;
    let solver = SplitOperator::new(&scenario.grid, hbar, scenario.mass, &v, dt)?;
    let mut psi = scenario.initial_state(hbar)?;
    let mut out = Vec::with_capacity(scenario.snapshots);
    for _ in 0..scenario.snapshots {
        psi = solver.evolve(&psi, steps)?;
        out.push(psi.clone());
    }
    Ok(out)
}

/// Binned ensemble densities on the comparison grid at every comparison time.
pub fn classical_densities(scenario: &SweepScenario, hbar: f64, seed: u64) -> Result<Vec<DensityField>> {
    let v = scenario.potential.build(&scenario.grid)?;
    let psi = scenario.initial_state(hbar)?;
    let ensemble = sample_ensemble(&psi, scenario.members, seed, scenario.sampling)?.latest_only();
    let steps_per = (scenario.interval()? / scenario.classical_dt).round().max(1.0) as usize;
    let ensemble =
        propagate_ensemble(ensemble, &v, scenario.classical_dt, scenario.final_time, steps_per)?;
    let axes = [scenario.comparison_grid()?];
    ensemble.times()[1..].iter().map(|&t| bin_density(&ensemble, t, &axes)).collect()
}

/// `(t, L1)` between ensemble and exact densities at every comparison time.
pub fn l1_history(scenario: &SweepScenario, hbar: f64, seed: u64) -> Result<Vec<(f64, f64)>> {
    let exact = exact_states(scenario, hbar)?;
    let classical = classical_densities(scenario, hbar, seed)?;
    if classical.len() != exact.len() {
        return Err(Error::contract("classical step does not divide the snapshot interval"));
    }
    exact
        .iter()
        .zip(&classical)
        .map(|(psi, w)| {
            let rho = density(psi).coarsen(scenario.coarsen)?;
            let w = DensityField::new(rho.axes().to_vec(), w.values().to_vec(), psi.time())?;
            Ok((psi.time(), compare(&w, &rho)?))
        })
        .collect()
}

/// L1 between two independently seeded ensemble densities at the final time,
/// divided by √2: the typical distance of one ensemble from its own mean.
pub fn sampling_noise_floor(scenario: &SweepScenario, hbar: f64, seeds: (u64, u64)) -> Result<f64> {
    let a = classical_densities(scenario, hbar, seeds.0)?;
    let b = classical_densities(scenario, hbar, seeds.1)?;
    Ok(compare(a.last().expect("one snapshot"), b.last().expect("one snapshot"))? / 2f64.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub hbar: f64,
    /// L1 at the final time; NaN when the row failed.
    pub l1_distance: f64,
    pub validity_fraction: f64,
    pub wall_time_seconds: f64,
    /// Why the row is suspect: a failed stage, or validity below 99%.
    pub flag: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn l1_column(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.l1_distance).collect()
    }

    pub fn validity_column(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.validity_fraction).collect()
    }

    /// `hbar,l1_distance,validity_fraction,wall_time_seconds`. Timings are
    /// machine-dependent, so the column is left empty unless asked for.
    pub fn write_csv<W: Write>(&self, mut w: W, timings: bool) -> Result<()> {
        writeln!(w, "hbar,l1_distance,validity_fraction,wall_time_seconds")?;
        for row in &self.rows {
            let time = if timings { format!("{}", row.wall_time_seconds) } else { String::new() };
            writeln!(w, "{},{},{},{}", row.hbar, row.l1_distance, row.validity_fraction, time)?;
        }
        Ok(())
    }
}

/// Runs the scenario at every ħ (descending). All rows draw from the same
/// sampling stream, so row-to-row differences are not masked by independent
/// sampling noise. A failing row is flagged and the sweep continues.
pub fn hbar_sweep(scenario: &SweepScenario, hbars: &[f64], seed: u64) -> Result<SweepReport> {
    if hbars.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::contract("ħ values must be strictly descending"));
    }
    if hbars.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
        return Err(Error::domain("ħ values must be positive"));
    }
    let rows = hbars.par_iter().map(|&hbar| sweep_row(scenario, hbar, seed)).collect();
    Ok(SweepReport { rows })
}

fn sweep_row(scenario: &SweepScenario, hbar: f64, seed: u64) -> SweepRow {
    let start = Instant::now();
    let mut flag = None;
    let exact = exact_states(scenario, hbar);
    let validity_fraction = match exact.as_ref().map(|s| validity_field_with(s.last().expect("one snapshot"), scenario.kappa)) {
        Ok(Ok(v)) => {
            if v.valid_fraction() < SUPPORT_SHARE {
                flag = Some(format!("WKB-valid on {:.1}% of the norm", 100.0 * v.valid_fraction()));
            }
            v.valid_fraction()
        }
        Ok(Err(e)) => {
            flag = Some(e.to_string());
            f64::NAN
        }
        Err(e) => {
            flag = Some(e.to_string());
            f64::NAN
        }
    };
    let l1_distance = match l1_history(scenario, hbar, seed) {
        Ok(history) => history.last().map_or(f64::NAN, |(_, d)| *d),
        Err(e) => {
            flag = Some(e.to_string());
            f64::NAN
        }
    };
    SweepRow { hbar, l1_distance, validity_fraction, wall_time_seconds: start.elapsed().as_secs_f64(), flag }
}
