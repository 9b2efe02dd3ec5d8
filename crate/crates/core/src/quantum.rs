//! Exact grid-based Schrödinger evolution.
//!
//! Wavefunctions live on periodic, power-of-two grids and are advanced with
//! second-order Strang splitting: half a kinetic step in momentum space, a
//! full potential phase in position space, and another half kinetic step.
//! Consecutive half steps are fused when evolving many steps at once.

use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::classical::{DensityField, PotentialField};
use crate::hilbert::{rotation_between, Direction, HalfInt, Spin, SpinState};
use crate::{Error, Result};

const NORM_TOL: f64 = 1e-10;
/// Largest potential phase per step, max|V|·dt/ħ.
pub const PHASE_WRAP_LIMIT: f64 = 0.5;

/// A uniform periodic grid on one axis. Nodes sit at `lower + i·Δq`, `i < points`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid")]
pub struct GridSpec {
    lower: f64,
    upper: f64,
    points: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    lower: f64,
    upper: f64,
    points: usize,
}

impl TryFrom<RawGrid> for GridSpec {
    type Error = Error;

    fn try_from(raw: RawGrid) -> Result<Self> {
        GridSpec::new(raw.lower, raw.upper, raw.points)
    }
}

impl GridSpec {
    pub fn new(lower: f64, upper: f64, points: usize) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && upper > lower) {
            return Err(Error::Construction(format!("grid bounds [{lower}, {upper}] are not increasing")));
        }
        if points < 64 || !points.is_power_of_two() {
            return Err(Error::Construction(format!(
                "grid point count {points} must be a power of two and at least 64"
            )));
        }
        Ok(GridSpec { lower, upper, points })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn spacing(&self) -> f64 {
        self.length() / self.points as f64
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        self.lower + i as f64 * self.spacing()
    }

    pub fn coordinates(&self) -> Vec<f64> {
        (0..self.points).map(|i| self.coordinate(i)).collect()
    }

    /// Angular wavenumbers in FFT order.
    pub fn wavenumbers(&self) -> Vec<f64> {
        let n = self.points as i64;
        let dk = std::f64::consts::TAU / self.length();
        (0..n).map(|i| dk * (if i < n / 2 { i } else { i - n }) as f64).collect()
    }

    /// Index of the cell `[q_i - Δq/2, q_i + Δq/2)` containing `q`.
    pub fn cell_of(&self, q: f64) -> Option<usize> {
        let x = (q - self.lower) / self.spacing() + 0.5;
        if x >= 0.0 && x < self.points as f64 {
            Some(x as usize)
        } else {
            None
        }
    }

    /// Grid whose cells are unions of `factor` consecutive cells of this one.
    pub fn coarsened(&self, factor: usize) -> Result<GridSpec> {
        if factor == 0 || self.points % factor != 0 {
            return Err(Error::contract(format!("cannot coarsen {} points by {factor}", self.points)));
        }
        let shift = (factor as f64 - 1.0) * self.spacing() / 2.0;
        GridSpec::new(self.lower + shift, self.upper + shift, self.points / factor)
    }
}

/// Forward/inverse transform pair for one grid size.
#[derive(Clone)]
struct Spectral {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl Spectral {
    fn new(points: usize) -> Self {
        let mut planner = FftPlanner::new();
        Spectral {
            forward: planner.plan_fft_forward(points),
            inverse: planner.plan_fft_inverse(points),
            scale: 1.0 / points as f64,
        }
    }

    fn scratch(&self) -> Vec<Complex64> {
        let len = self
            .forward
            .get_inplace_scratch_len()
            .max(self.inverse.get_inplace_scratch_len());
        vec![Complex64::new(0.0, 0.0); len]
    }

    fn forward(&self, buf: &mut [Complex64], scratch: &mut [Complex64]) {
        self.forward.process_with_scratch(buf, scratch);
    }

    fn inverse(&self, buf: &mut [Complex64], scratch: &mut [Complex64]) {
        self.inverse.process_with_scratch(buf, scratch);
        buf.iter_mut().for_each(|x| *x *= self.scale);
    }
}

/// Spectral derivative ∂ψ/∂q on a periodic grid.
pub fn spectral_derivative(grid: &GridSpec, values: &[Complex64]) -> Vec<Complex64> {
    let spectral = Spectral::new(grid.points);
    let mut scratch = spectral.scratch();
    let mut buf = values.to_vec();
    spectral.forward(&mut buf, &mut scratch);
    for (b, k) in buf.iter_mut().zip(grid.wavenumbers()) {
        *b *= Complex64::new(0.0, k);
    }
    spectral.inverse(&mut buf, &mut scratch);
    buf
}

fn norm_of(grid: &GridSpec, amplitudes: &[Complex64]) -> f64 {
    amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>() * grid.spacing()
}

/// Ψ(q, t) on a grid, with its own ħ and mass.
#[derive(Clone, Debug, PartialEq)]
pub struct GridWaveFunction {
    grid: GridSpec,
    hbar: f64,
    mass: f64,
    amplitudes: Vec<Complex64>,
    time: f64,
}

impl GridWaveFunction {
    pub fn from_amplitudes(
        grid: GridSpec,
        hbar: f64,
        mass: f64,
        amplitudes: Vec<Complex64>,
        time: f64,
    ) -> Result<Self> {
        Self::check_parameters(&grid, hbar, mass, amplitudes.len())?;
        let norm = norm_of(&grid, &amplitudes);
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::Construction(format!("wavefunction norm {norm} differs from 1")));
        }
        Ok(GridWaveFunction { grid, hbar, mass, amplitudes, time })
    }

    /// Rescales `amplitudes` to unit norm.
    pub fn normalized(
        grid: GridSpec,
        hbar: f64,
        mass: f64,
        mut amplitudes: Vec<Complex64>,
        time: f64,
    ) -> Result<Self> {
        Self::check_parameters(&grid, hbar, mass, amplitudes.len())?;
        let norm = norm_of(&grid, &amplitudes);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::domain("cannot normalize a wavefunction with zero norm"));
        }
        let scale = norm.sqrt().recip();
        amplitudes.iter_mut().for_each(|a| *a *= scale);
        Ok(GridWaveFunction { grid, hbar, mass, amplitudes, time })
    }

    fn check_parameters(grid: &GridSpec, hbar: f64, mass: f64, len: usize) -> Result<()> {
        if !(hbar > 0.0 && hbar.is_finite()) {
            return Err(Error::Construction(format!("ħ must be positive, got {hbar}")));
        }
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::Construction(format!("mass must be positive, got {mass}")));
        }
        if len != grid.points {
            return Err(Error::Construction(format!(
                "{len} amplitudes for a grid of {} points",
                grid.points
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<Complex64> {
        self.amplitudes
    }

    pub fn norm(&self) -> f64 {
        norm_of(&self.grid, &self.amplitudes)
    }

    /// ⟨self|other⟩ = Σ conj(ψ_i) φ_i Δq.
    pub fn inner(&self, other: &GridWaveFunction) -> Complex64 {
        self.amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum::<Complex64>()
            * self.grid.spacing()
    }

    /// Multiplies every amplitude by a unit-modulus phase factor.
    pub fn with_global_phase(&self, alpha: f64) -> GridWaveFunction {
        let phase = Complex64::from_polar(1.0, alpha);
        let mut out = self.clone();
        out.amplitudes.iter_mut().for_each(|a| *a *= phase);
        out
    }

    pub fn mean_position(&self) -> f64 {
        let dx = self.grid.spacing();
        self.amplitudes
            .iter()
            .enumerate()
            .map(|(i, a)| a.norm_sqr() * self.grid.coordinate(i))
            .sum::<f64>()
            * dx
            / self.norm()
    }

    pub fn position_variance(&self) -> f64 {
        let mean = self.mean_position();
        let dx = self.grid.spacing();
        self.amplitudes
            .iter()
            .enumerate()
            .map(|(i, a)| a.norm_sqr() * (self.grid.coordinate(i) - mean).powi(2))
            .sum::<f64>()
            * dx
            / self.norm()
    }

    /// ⟨p⟩ evaluated in momentum space.
    pub fn mean_momentum(&self) -> f64 {
        let spectral = Spectral::new(self.grid.points);
        let mut scratch = spectral.scratch();
        let mut buf = self.amplitudes.clone();
        spectral.forward(&mut buf, &mut scratch);
        let k = self.grid.wavenumbers();
        let (num, den) = buf
            .iter()
            .zip(&k)
            .fold((0.0, 0.0), |(n, d), (b, k)| (n + b.norm_sqr() * k, d + b.norm_sqr()));
        self.hbar * num / den
    }

    /// Local momentum ħ·∂(arg Ψ)/∂q at every node, from the spectral derivative.
    pub fn phase_gradient_momentum(&self) -> Vec<f64> {
        let derivative = spectral_derivative(&self.grid, &self.amplitudes);
        let floor = 1e-300;
        self.amplitudes
            .iter()
            .zip(&derivative)
            .map(|(a, d)| {
                let rho = a.norm_sqr();
                if rho > floor {
                    self.hbar * (a.conj() * d).im / rho
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// CSV with columns `q,re,im`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "q,re,im")?;
        for (i, a) in self.amplitudes.iter().enumerate() {
            writeln!(w, "{:e},{:e},{:e}", self.grid.coordinate(i), a.re, a.im)?;
        }
        Ok(())
    }

    /// Binary snapshot: little-endian f64 header `lower, upper, points, ħ, m, t`,
    /// then interleaved `re, im` for every node.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        let header = [
            self.grid.lower,
            self.grid.upper,
            self.grid.points as f64,
            self.hbar,
            self.mass,
            self.time,
        ];
        for x in header {
            w.write_all(&x.to_le_bytes())?;
        }
        for a in &self.amplitudes {
            w.write_all(&a.re.to_le_bytes())?;
            w.write_all(&a.im.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let mut next = || -> Result<f64> {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            Ok(f64::from_le_bytes(buf))
        };
        let lower = next()?;
        let upper = next()?;
        let points = next()?;
        if !(points >= 1.0 && points.fract() == 0.0 && points <= (1u64 << 40) as f64) {
            return Err(Error::Construction(format!("snapshot has invalid point count {points}")));
        }
        let grid = GridSpec::new(lower, upper, points as usize)?;
        let hbar = next()?;
        let mass = next()?;
        let time = next()?;
        let mut amplitudes = Vec::with_capacity(grid.points);
        for _ in 0..grid.points {
            let re = next()?;
            let im = next()?;
            amplitudes.push(Complex64::new(re, im));
        }
        GridWaveFunction::from_amplitudes(grid, hbar, mass, amplitudes, time)
    }
}

/// Normalized Gaussian `exp(-(q-q0)²/(4σ²) + i p0 (q-q0)/ħ)`; |Ψ|² has variance σ².
pub fn gaussian_packet(
    grid: &GridSpec,
    center: f64,
    momentum: f64,
    width: f64,
    hbar: f64,
    mass: f64,
) -> Result<GridWaveFunction> {
    if !(width > 0.0) {
        return Err(Error::Construction(format!("packet width must be positive, got {width}")));
    }
    if width < 4.0 * grid.spacing() {
        return Err(Error::Construction(format!(
            "resolution rule: width {width} is below 4Δq = {}",
            4.0 * grid.spacing()
        )));
    }
    if center - 5.0 * width < grid.lower || center + 5.0 * width > grid.upper - grid.spacing() {
        return Err(Error::Construction(format!(
            "margin rule: packet at {center} with width {width} is within 5σ of the grid edge"
        )));
    }
    let amplitudes = grid
        .coordinates()
        .into_iter()
        .map(|q| {
            let x = q - center;
            Complex64::from_polar((-x * x / (4.0 * width * width)).exp(), momentum * x / hbar)
        })
        .collect();
    GridWaveFunction::normalized(*grid, hbar, mass, amplitudes, 0.0)
}

/// Strang split-operator propagator for fixed grid, ħ, m, V and dt.
#[derive(Clone)]
pub struct SplitOperator {
    grid: GridSpec,
    hbar: f64,
    mass: f64,
    dt: f64,
    half_kinetic: Vec<Complex64>,
    full_kinetic: Vec<Complex64>,
    potential_phase: Vec<Complex64>,
    spectral: Spectral,
}

impl SplitOperator {
    pub fn new(grid: &GridSpec, hbar: f64, mass: f64, potential: &PotentialField, dt: f64) -> Result<Self> {
        if potential.dim() != 1 {
            return Err(Error::contract("the grid solver is one-dimensional"));
        }
        let values: Vec<f64> = grid.coordinates().iter().map(|&q| potential.value(&[q])).collect();
        Self::from_values(grid, hbar, mass, &values, dt)
    }

    /// Propagator for potential values sampled at the grid nodes.
    pub fn from_values(grid: &GridSpec, hbar: f64, mass: f64, potential: &[f64], dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::contract(format!("time step must be positive, got {dt}")));
        }
        if potential.len() != grid.points {
            return Err(Error::contract("potential sample count does not match the grid"));
        }
        let vmax = potential.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let phase = vmax * dt / hbar;
        if !(phase < PHASE_WRAP_LIMIT) {
            return Err(Error::StepSize { phase, limit: PHASE_WRAP_LIMIT });
        }
        let k = grid.wavenumbers();
        let kinetic = |tau: f64| -> Vec<Complex64> {
            k.iter()
                .map(|k| Complex64::from_polar(1.0, -hbar * k * k * tau / (2.0 * mass)))
                .collect()
        };
        Ok(SplitOperator {
            grid: *grid,
            hbar,
            mass,
            dt,
            half_kinetic: kinetic(dt / 2.0),
            full_kinetic: kinetic(dt),
            potential_phase: potential.iter().map(|v| Complex64::from_polar(1.0, -v * dt / hbar)).collect(),
            spectral: Spectral::new(grid.points),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advances raw amplitudes by `steps` Strang steps.
    pub fn evolve_amplitudes(&self, amplitudes: &mut [Complex64], steps: usize) {
        if steps == 0 {
            return;
        }
        let mut scratch = self.spectral.scratch();
        let mul = |buf: &mut [Complex64], factors: &[Complex64]| {
            buf.iter_mut().zip(factors).for_each(|(b, f)| *b *= f);
        };
        self.spectral.forward(amplitudes, &mut scratch);
        mul(amplitudes, &self.half_kinetic);
        for s in 0..steps {
            self.spectral.inverse(amplitudes, &mut scratch);
            mul(amplitudes, &self.potential_phase);
            self.spectral.forward(amplitudes, &mut scratch);
            if s + 1 == steps {
                mul(amplitudes, &self.half_kinetic);
            } else {
                mul(amplitudes, &self.full_kinetic);
            }
        }
        self.spectral.inverse(amplitudes, &mut scratch);
    }

    pub fn evolve(&self, psi: &GridWaveFunction, steps: usize) -> Result<GridWaveFunction> {
        if psi.grid != self.grid || psi.hbar != self.hbar || psi.mass != self.mass {
            return Err(Error::contract("wavefunction grid, ħ or mass differs from the propagator's"));
        }
        let mut out = psi.clone();
        self.evolve_amplitudes(&mut out.amplitudes, steps);
        out.time += steps as f64 * self.dt;
        Ok(out)
    }

    pub fn step(&self, psi: &GridWaveFunction) -> Result<GridWaveFunction> {
        self.evolve(psi, 1)
    }
}

/// One Strang step of Ψ under V.
pub fn step_split_operator(psi: &GridWaveFunction, potential: &PotentialField, dt: f64) -> Result<GridWaveFunction> {
    SplitOperator::new(&psi.grid, psi.hbar, psi.mass, potential, dt)?.step(psi)
}

/// Pointwise |Ψ|².
pub fn density(psi: &GridWaveFunction) -> DensityField {
    let values = psi.amplitudes.iter().map(|a| a.norm_sqr()).collect();
    DensityField::new(vec![psi.grid], values, psi.time).expect("densities are non-negative")
}

/// Ψ(q) = Σ_σ ψ_σ(q) χ_σ(axis); components are not individually normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct SpinorWaveFunction {
    spin: Spin,
    axis: Direction,
    grid: GridSpec,
    hbar: f64,
    mass: f64,
    time: f64,
    components: Vec<Vec<Complex64>>,
}

impl SpinorWaveFunction {
    pub fn new(
        spin: Spin,
        axis: Direction,
        grid: GridSpec,
        hbar: f64,
        mass: f64,
        time: f64,
        components: Vec<Vec<Complex64>>,
    ) -> Result<Self> {
        if components.len() != spin.dim() {
            return Err(Error::Construction(format!(
                "spin {spin} needs {} components, got {}",
                spin.dim(),
                components.len()
            )));
        }
        for c in &components {
            GridWaveFunction::check_parameters(&grid, hbar, mass, c.len())?;
        }
        let total: f64 = components.iter().map(|c| norm_of(&grid, c)).sum();
        if (total - 1.0).abs() > NORM_TOL {
            return Err(Error::Construction(format!("spinor norm {total} differs from 1")));
        }
        Ok(SpinorWaveFunction { spin, axis, grid, hbar, mass, time, components })
    }

    /// ψ(q) χ with χ's own quantization axis.
    pub fn product(psi: &GridWaveFunction, chi: &SpinState) -> Self {
        let components = chi
            .amplitudes()
            .iter()
            .map(|c| psi.amplitudes.iter().map(|a| a * c).collect())
            .collect();
        SpinorWaveFunction {
            spin: chi.spin(),
            axis: chi.axis(),
            grid: psi.grid,
            hbar: psi.hbar,
            mass: psi.mass,
            time: psi.time,
            components,
        }
    }

    pub fn spin(&self) -> Spin {
        self.spin
    }

    pub fn axis(&self) -> Direction {
        self.axis
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn components(&self) -> &[Vec<Complex64>] {
        &self.components
    }

    pub fn component(&self, sigma: HalfInt) -> Result<&[Complex64]> {
        Ok(&self.components[self.spin.index_of(sigma)?])
    }

    /// ∫|ψ_σ|² dq in storage order.
    pub fn component_norms(&self) -> Vec<f64> {
        self.components.iter().map(|c| norm_of(&self.grid, c)).collect()
    }

    pub fn total_norm(&self) -> f64 {
        self.component_norms().iter().sum()
    }

    /// Spin-traced density Σ_σ |ψ_σ(q)|².
    pub fn total_density(&self) -> DensityField {
        let values = (0..self.grid.points)
            .map(|i| self.components.iter().map(|c| c[i].norm_sqr()).sum())
            .collect();
        DensityField::new(vec![self.grid], values, self.time).expect("densities are non-negative")
    }

    /// Component σ rescaled to unit norm.
    pub fn branch(&self, sigma: HalfInt) -> Result<GridWaveFunction> {
        let comp = self.component(sigma)?.to_vec();
        if norm_of(&self.grid, &comp) == 0.0 {
            return Err(Error::EmptyBranch { sigma: sigma.to_string() });
        }
        GridWaveFunction::normalized(self.grid, self.hbar, self.mass, comp, self.time)
    }
}

/// A spin-dependent potential that is diagonal along `axis`: one scalar
/// potential per projection σ, in storage order j..-j.
#[derive(Clone)]
pub struct SpinPotential {
    spin: Spin,
    axis: Direction,
    eigen: Vec<PotentialField>,
}

impl SpinPotential {
    pub fn new(spin: Spin, axis: Direction, eigen: Vec<PotentialField>) -> Result<Self> {
        if eigen.len() != spin.dim() {
            return Err(Error::Construction(format!(
                "spin {spin} needs {} eigenvalue potentials, got {}",
                spin.dim(),
                eigen.len()
            )));
        }
        Ok(SpinPotential { spin, axis, eigen })
    }

    pub fn zero(spin: Spin, axis: Direction, lower: f64, upper: f64) -> Result<Self> {
        let free = PotentialField::free(lower, upper)?;
        SpinPotential::new(spin, axis, vec![free; spin.dim()])
    }

    pub fn spin(&self) -> Spin {
        self.spin
    }

    pub fn axis(&self) -> Direction {
        self.axis
    }

    pub fn eigen_potential(&self, sigma: HalfInt) -> Result<&PotentialField> {
        Ok(&self.eigen[self.spin.index_of(sigma)?])
    }
}

/// Per-component split operators for V0 + H_ext.
#[derive(Clone)]
pub struct SpinorPropagator {
    spin: Spin,
    axis: Direction,
    dt: f64,
    components: Vec<SplitOperator>,
}

impl SpinorPropagator {
    pub fn new(
        grid: &GridSpec,
        hbar: f64,
        mass: f64,
        background: &PotentialField,
        h_ext: &SpinPotential,
        dt: f64,
    ) -> Result<Self> {
        let q = grid.coordinates();
        let v0: Vec<f64> = q.iter().map(|&x| background.value(&[x])).collect();
        let components = h_ext
            .eigen
            .iter()
            .map(|v| {
                let values: Vec<f64> = q.iter().zip(&v0).map(|(&x, b)| b + v.value(&[x])).collect();
                SplitOperator::from_values(grid, hbar, mass, &values, dt)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SpinorPropagator { spin: h_ext.spin, axis: h_ext.axis, dt, components })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn evolve(&self, psi: &SpinorWaveFunction, steps: usize) -> Result<SpinorWaveFunction> {
        if psi.spin != self.spin {
            return Err(Error::contract("spinor and spin potential have different j"));
        }
        if !psi.axis.same_axis(&self.axis) {
            return Err(Error::contract(
                "spin potential is not diagonal in the spinor's basis; rebase the spinor to the potential's axis first",
            ));
        }
        let mut out = psi.clone();
        for (comp, op) in out.components.iter_mut().zip(&self.components) {
            if op.grid != psi.grid || op.hbar != psi.hbar || op.mass != psi.mass {
                return Err(Error::contract("spinor grid, ħ or mass differs from the propagator's"));
            }
            op.evolve_amplitudes(comp, steps);
        }
        out.time += steps as f64 * self.dt;
        Ok(out)
    }
}

/// One Strang step of a spinor under V0 plus a diagonal spin potential.
pub fn step_spinor(
    psi: &SpinorWaveFunction,
    background: &PotentialField,
    h_ext: &SpinPotential,
    dt: f64,
) -> Result<SpinorWaveFunction> {
    SpinorPropagator::new(&psi.grid, psi.hbar, psi.mass, background, h_ext, dt)?.evolve(psi, 1)
}

/// Re-expresses every grid point's internal amplitudes along `new_axis`.
pub fn rebase_spinor(psi: &SpinorWaveFunction, new_axis: &Direction) -> SpinorWaveFunction {
    let m = rotation_between(psi.spin, &psi.axis, new_axis);
    let n = psi.spin.dim();
    let mut components = vec![vec![Complex64::new(0.0, 0.0); psi.grid.points]; n];
    for i in 0..psi.grid.points {
        for (r, out) in components.iter_mut().enumerate() {
            out[i] = (0..n).map(|c| m.entry(r, c) * psi.components[c][i]).sum();
        }
    }
    SpinorWaveFunction { axis: *new_axis, components, ..psi.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::transition_probability;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn grid() -> GridSpec {
        GridSpec::new(-20.0, 20.0, 512).unwrap()
    }

    #[test]
    fn grid_rules() {
        assert!(GridSpec::new(0.0, 1.0, 100).is_err());
        assert!(GridSpec::new(0.0, 1.0, 32).is_err());
        assert!(GridSpec::new(1.0, 0.0, 64).is_err());
        let g = GridSpec::new(-1.0, 1.0, 64).unwrap();
        assert_eq!(g.cell_of(-1.0), Some(0));
        assert_eq!(g.cell_of(-1.0 - 0.6 * g.spacing()), None);
        assert_eq!(g.cell_of(1.0 - 0.6 * g.spacing()), Some(63));
        assert_eq!(g.cell_of(1.0 - 0.4 * g.spacing()), None);
        let c = GridSpec::new(-1.0, 1.0, 256).unwrap().coarsened(4).unwrap();
        assert_eq!(c.points(), 64);
        assert_abs_diff_eq!(c.spacing(), 4.0 * 2.0 / 256.0, epsilon = 1e-15);
    }

    #[test]
    fn gaussian_packet_construction() {
        let g = grid();
        let center = 269;
        let psi = gaussian_packet(&g, g.coordinate(center), 0.0, 1.5, 1.0, 1.0).unwrap();
        assert!((psi.norm() - 1.0).abs() < 1e-12);
        assert!(psi.amplitudes().iter().all(|a| a.im == 0.0));
        for s in 1..100 {
            assert_abs_diff_eq!(psi.amplitudes()[center + s].re, psi.amplitudes()[center - s].re, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(psi.position_variance(), 1.5 * 1.5, epsilon = 1e-10);
        assert!(gaussian_packet(&g, 0.0, 0.0, 0.2, 1.0, 1.0).is_err());
        assert!(gaussian_packet(&g, 17.0, 0.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn random_packets_are_normalized_with_exact_mean_momentum() {
        let g = grid();
        let mut rng = crate::rng::seeded_rng(9);
        for _ in 0..20 {
            let width = rng.random_range(0.4..2.0);
            let center = rng.random_range(-5.0..5.0);
            let hbar = rng.random_range(0.5..2.0);
            let p0 = rng.random_range(-3.0..3.0) * hbar;
            let psi = gaussian_packet(&g, center, p0, width, hbar, 1.0).unwrap();
            assert!((psi.norm() - 1.0).abs() < 1e-12);
            assert!((psi.mean_momentum() - p0).abs() < 1e-8);
        }
    }

    #[test]
    fn free_packet_spreads_analytically() {
        let g = GridSpec::new(-40.0, 40.0, 1024).unwrap();
        let (sigma, hbar, mass) = (1.0, 1.0, 1.0);
        let psi = gaussian_packet(&g, -5.0, 1.0, sigma, hbar, mass).unwrap();
        let free = PotentialField::free(g.lower(), g.upper()).unwrap();
        let op = SplitOperator::new(&g, hbar, mass, &free, 0.01).unwrap();
        let out = op.evolve(&psi, 400).unwrap();
        let t = out.time();
        let want = sigma * (1.0 + (hbar * t / (2.0 * mass * sigma * sigma)).powi(2)).sqrt();
        assert!((out.position_variance().sqrt() - want).abs() < 1e-6);
        // Galilean shift
        assert!((out.mean_position() - (-5.0 + t)).abs() < 1e-6);
    }

    #[test]
    fn harmonic_packet_refocuses_after_a_period() {
        let g = GridSpec::new(-12.0, 12.0, 256).unwrap();
        let v = PotentialField::harmonic(g.lower(), g.upper(), 1.0).unwrap();
        let psi = gaussian_packet(&g, 2.0, 0.5, std::f64::consts::FRAC_1_SQRT_2, 1.0, 1.0).unwrap();
        let steps = 6284;
        let dt = std::f64::consts::TAU / steps as f64;
        let op = SplitOperator::new(&g, 1.0, 1.0, &v, dt).unwrap();
        let out = op.evolve(&psi, steps).unwrap();
        assert!(psi.inner(&out).norm() > 1.0 - 1e-6);
    }

    #[test]
    fn fused_evolution_matches_single_steps() {
        let g = GridSpec::new(-12.0, 12.0, 128).unwrap();
        let v = PotentialField::anharmonic(g.lower(), g.upper(), 1.0, 0.01).unwrap();
        let psi = gaussian_packet(&g, 1.0, 0.3, 0.8, 1.0, 1.0).unwrap();
        let op = SplitOperator::new(&g, 1.0, 1.0, &v, 0.001).unwrap();
        let mut stepped = psi.clone();
        for _ in 0..25 {
            stepped = step_split_operator(&stepped, &v, 0.001).unwrap();
        }
        let fused = op.evolve(&psi, 25).unwrap();
        for (a, b) in stepped.amplitudes().iter().zip(fused.amplitudes()) {
            assert!((a - b).norm() < 1e-12);
        }
        assert_abs_diff_eq!(stepped.time(), fused.time(), epsilon = 1e-14);
    }

    #[test]
    fn phase_wrap_guard() {
        let g = grid();
        let v = PotentialField::harmonic(g.lower(), g.upper(), 1.0).unwrap();
        let psi = gaussian_packet(&g, 0.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        // max V = 200 on this grid
        assert!(matches!(step_split_operator(&psi, &v, 0.01), Err(Error::StepSize { .. })));
        assert!(step_split_operator(&psi, &v, 0.002).is_ok());
    }

    #[test]
    fn density_properties() {
        let g = grid();
        let psi = gaussian_packet(&g, 0.5, 1.2, 1.3, 0.7, 1.0).unwrap();
        let rho = density(&psi);
        assert_abs_diff_eq!(rho.integral(), 1.0, epsilon = 1e-10);
        let rotated = density(&psi.with_global_phase(0.731));
        for (a, b) in rho.values().iter().zip(rotated.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        // Gaussian shape with variance σ²
        for (i, v) in rho.values().iter().enumerate() {
            let x = g.coordinate(i) - 0.5;
            let want = (-x * x / (2.0 * 1.3 * 1.3)).exp() / (std::f64::consts::TAU * 1.3 * 1.3).sqrt();
            assert_abs_diff_eq!(*v, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let psi = gaussian_packet(&grid(), 0.5, 1.2, 1.3, 0.7, 2.0).unwrap();
        let mut buf = Vec::new();
        psi.write_snapshot(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 * (6 + 2 * 512));
        let back = GridWaveFunction::read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(back, psi);
        let mut csv = Vec::new();
        psi.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("q,re,im\n"));
        assert_eq!(text.lines().count(), 513);
    }

    fn linear_field(spin: Spin, axis: Direction, g: &GridSpec, strength: f64) -> SpinPotential {
        let eigen = spin
            .projections()
            .map(|s| {
                let f = -s.value() * strength;
                PotentialField::one_dim(g.lower(), g.upper(), move |q| f * q, move |_| f).unwrap()
            })
            .collect();
        SpinPotential::new(spin, axis, eigen).unwrap()
    }

    #[test]
    fn spinor_without_field_evolves_components_identically() {
        let g = grid();
        let psi = gaussian_packet(&g, 0.0, 0.5, 1.0, 1.0, 1.0).unwrap();
        let chi = SpinState::basis(Spin::HALF, Direction::z(), HalfInt::HALF)
            .unwrap()
            .rebased(&Direction::polar(1.0).unwrap());
        let spinor = SpinorWaveFunction::product(&psi, &chi);
        let free = PotentialField::free(g.lower(), g.upper()).unwrap();
        let h = SpinPotential::zero(Spin::HALF, chi.axis(), g.lower(), g.upper()).unwrap();
        let op = SpinorPropagator::new(&g, 1.0, 1.0, &free, &h, 0.01).unwrap();
        let out = op.evolve(&spinor, 200).unwrap();
        let norms0 = spinor.component_norms();
        let norms1 = out.component_norms();
        for (a, b) in norms0.iter().zip(&norms1) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let c = chi.amplitudes();
        for i in 0..g.points() {
            // ψ_+/c_+ == ψ_-/c_- pointwise
            let a = out.components()[0][i] / c[0];
            let b = out.components()[1][i] / c[1];
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn linear_field_gives_opposite_forces() {
        let g = grid();
        let psi = gaussian_packet(&g, 0.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        let axis = Direction::z();
        let chi = SpinState::basis(Spin::HALF, Direction::x(), HalfInt::HALF).unwrap().rebased(&axis);
        let spinor = SpinorWaveFunction::product(&psi, &chi);
        let strength = 0.1;
        let h = linear_field(Spin::HALF, axis, &g, strength);
        let free = PotentialField::free(g.lower(), g.upper()).unwrap();
        let dt = 0.01;
        let op = SpinorPropagator::new(&g, 1.0, 1.0, &free, &h, dt).unwrap();
        let mut state = spinor.clone();
        let norms0 = state.component_norms();
        for block in 1..=5 {
            state = op.evolve(&state, 100).unwrap();
            let p_up = state.branch(HalfInt::HALF).unwrap().mean_momentum();
            let p_down = state.branch(HalfInt::MINUS_HALF).unwrap().mean_momentum();
            let t = block as f64 * 100.0 * dt;
            // ⟨p⟩_σ = σ g t exactly for a linear potential
            assert_abs_diff_eq!(p_up - p_down, strength * t, epsilon = 1e-8);
            for (a, b) in norms0.iter().zip(state.component_norms()) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn spinor_step_requires_matching_basis() {
        let g = grid();
        let psi = gaussian_packet(&g, 0.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        let chi = SpinState::basis(Spin::HALF, Direction::z(), HalfInt::HALF).unwrap();
        let spinor = SpinorWaveFunction::product(&psi, &chi);
        let h = linear_field(Spin::HALF, Direction::x(), &g, 0.1);
        let free = PotentialField::free(g.lower(), g.upper()).unwrap();
        let err = step_spinor(&spinor, &free, &h, 0.01).unwrap_err();
        assert!(matches!(err, Error::Contract(ref m) if m.contains("rebase")));
        let rebased = rebase_spinor(&spinor, &Direction::x());
        assert!(step_spinor(&rebased, &free, &h, 0.01).is_ok());
    }

    #[test]
    fn rebase_examples() {
        let g = GridSpec::new(-10.0, 10.0, 128).unwrap();
        let psi = gaussian_packet(&g, 0.0, 0.4, 1.0, 1.0, 1.0).unwrap();
        let mut rng = crate::rng::seeded_rng(21);
        for spin in [Spin::HALF, Spin::ONE, Spin::THREE_HALVES] {
            for _ in 0..5 {
                let m = crate::hilbert::tests::random_direction(&mut rng);
                let n = crate::hilbert::tests::random_direction(&mut rng);
                let mu = spin.projection(rng.random_range(0..spin.dim()));
                let chi = SpinState::basis(spin, m, mu).unwrap();
                let spinor = SpinorWaveFunction::product(&psi, &chi);
                let same = rebase_spinor(&spinor, &m);
                for (a, b) in same.components().iter().flatten().zip(spinor.components().iter().flatten()) {
                    assert!((a - b).norm() < 1e-12);
                }
                let rebased = rebase_spinor(&spinor, &n);
                assert_abs_diff_eq!(rebased.total_norm(), 1.0, epsilon = 1e-12);
                for (sigma, norm) in spin.projections().zip(rebased.component_norms()) {
                    let p = transition_probability(mu, &m, sigma, &n, spin).unwrap();
                    assert_abs_diff_eq!(norm, p, epsilon = 1e-10);
                }
                let back = rebase_spinor(&rebased, &m);
                for (a, b) in back.components().iter().flatten().zip(spinor.components().iter().flatten()) {
                    assert!((a - b).norm() < 1e-10);
                }
            }
        }
    }
}
