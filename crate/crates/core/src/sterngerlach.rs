//! Stern–Gerlach apparatus: a spin-dependent field region along one spatial
//! axis, diagonal along the apparatus orientation `n`.
//!
//! Each projection σ sees `V_σ(q) = -σ·g·env(q)`, where `env` is 1 on a
//! plateau inside `[q_a, q_b]` and rises and falls with cos² ramps. A beam
//! incident with enough kinetic energy splits into branches that are
//! transmitted with different delays or reflected, depending on σ.
//!
//! Branch labels are only available through [`SeparatedBranches`], which can
//! only be obtained from a [`BranchSet`] whose pairwise overlaps are below
//! [`SEPARATION_THRESHOLD`].

use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classical::{bin_density, propagate_ensemble, DensityField, PotentialField, TrajectoryEnsemble};
use crate::hilbert::{rotation_between, Direction, HalfInt, Spin, SpinState};
use crate::quantum::{gaussian_packet, rebase_spinor, GridSpec, GridWaveFunction, SpinPotential, SpinorPropagator, SpinorWaveFunction};
use crate::rng::{derive_seed, seeded_rng};
use crate::{Error, Result};

/// Branches count as separated once every pairwise ∫|ψ_σ||ψ_σ'| dq
/// (unit-normalized branches) is below this.
pub const SEPARATION_THRESHOLD: f64 = 1e-4;
/// Norm inside the field region above which the beam counts as present.
const PRESENCE: f64 = 1e-6;
/// Branches with a smaller population are treated as empty.
const EMPTY: f64 = 1e-24;
/// The field-free domain extends this far beyond the region on both sides.
const FIELD_FREE_MARGIN: f64 = 100.0;

/// Field region `[q_a, q_b]` with orientation `n` and strength `g`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Apparatus {
    orientation: Direction,
    region: (f64, f64),
    ramp: f64,
    gradient: f64,
}

impl Apparatus {
    pub fn new(orientation: Direction, region: (f64, f64), ramp: f64, gradient: f64) -> Result<Self> {
        let (a, b) = region;
        if !(a.is_finite() && b.is_finite() && b > a) {
            return Err(Error::domain(format!("field region [{a}, {b}] is not an interval")));
        }
        if !(ramp > 0.0 && 2.0 * ramp <= b - a) {
            return Err(Error::domain(format!("ramp width {ramp} must be positive and fit twice in the region")));
        }
        if !gradient.is_finite() {
            return Err(Error::domain("field strength must be finite"));
        }
        Ok(Apparatus { orientation, region, ramp, gradient })
    }

    pub fn orientation(&self) -> Direction {
        self.orientation
    }

    pub fn region(&self) -> (f64, f64) {
        self.region
    }

    pub fn ramp(&self) -> f64 {
        self.ramp
    }

    pub fn gradient(&self) -> f64 {
        self.gradient
    }

    /// Same geometry and strength, different orientation.
    pub fn oriented(&self, orientation: Direction) -> Self {
        Apparatus { orientation, ..self.clone() }
    }

    /// Mirror image under q → -q.
    pub fn mirrored(&self) -> Self {
        Apparatus { region: (-self.region.1, -self.region.0), ..self.clone() }
    }

    /// Ramp coordinate in [0, 1] and which side of the plateau it is on.
    fn ramp_position(&self, q: f64) -> Option<(f64, f64)> {
        let (a, b) = self.region;
        if q <= a || q >= b {
            None
        } else if q < a + self.ramp {
            Some(((q - a) / self.ramp, 1.0))
        } else if q > b - self.ramp {
            Some(((b - q) / self.ramp, -1.0))
        } else {
            Some((1.0, 0.0))
        }
    }

    pub fn envelope(&self, q: f64) -> f64 {
        match self.ramp_position(q) {
            None => 0.0,
            Some((x, _)) => (0.5 * PI * x).sin().powi(2),
        }
    }

    pub fn envelope_slope(&self, q: f64) -> f64 {
        match self.ramp_position(q) {
            Some((x, side)) if side != 0.0 => side * PI / (2.0 * self.ramp) * (PI * x).sin(),
            _ => 0.0,
        }
    }

    pub fn envelope_curvature(&self, q: f64) -> f64 {
        match self.ramp_position(q) {
            Some((x, side)) if side != 0.0 => PI * PI / (2.0 * self.ramp * self.ramp) * (PI * x).cos(),
            _ => 0.0,
        }
    }

    pub fn contains(&self, q: f64) -> bool {
        q > self.region.0 && q < self.region.1
    }
}

/// `V_σ(q) = -σ g env(q)` on a domain reaching well past the region.
pub fn build_sg_potential(app: &Apparatus, spin: Spin, sigma: HalfInt) -> Result<PotentialField> {
    spin.index_of(sigma)?;
    let strength = sigma.value() * app.gradient;
    let (a, b) = app.region;
    let (v, dv, d2v) = (app.clone(), app.clone(), app.clone());
    PotentialField::one_dim_with_curvature(
        a - FIELD_FREE_MARGIN,
        b + FIELD_FREE_MARGIN,
        move |q| -strength * v.envelope(q),
        move |q| -strength * dv.envelope_slope(q),
        move |q| -strength * d2v.envelope_curvature(q),
    )
}

pub fn spin_potential(app: &Apparatus, spin: Spin) -> Result<SpinPotential> {
    let eigen = spin.projections().map(|s| build_sg_potential(app, spin, s)).collect::<Result<Vec<_>>>()?;
    SpinPotential::new(spin, app.orientation, eigen)
}

/// Spatial packet of an incident beam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Beam {
    pub grid: GridSpec,
    pub hbar: f64,
    pub mass: f64,
    pub center: f64,
    pub momentum: f64,
    pub width: f64,
}

impl Beam {
    pub fn packet(&self) -> Result<GridWaveFunction> {
        gaussian_packet(&self.grid, self.center, self.momentum, self.width, self.hbar, self.mass)
    }

    /// Mirror image under q → -q (opposite direction of flight).
    pub fn mirrored(&self) -> Result<Beam> {
        let grid = GridSpec::new(-self.grid.upper(), -self.grid.lower(), self.grid.points())?;
        Ok(Beam { grid, center: -self.center, momentum: -self.momentum, ..self.clone() })
    }
}

fn default_check_every() -> usize {
    10
}

/// Time stepping of one traversal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Traversal {
    pub dt: f64,
    pub duration: f64,
    /// Steps between checkpoints (norms, overlaps, residuals).
    #[serde(default = "default_check_every")]
    pub check_every: usize,
}

impl Traversal {
    fn plan(&self) -> Result<(usize, usize)> {
        if !(self.dt > 0.0 && self.duration >= self.dt) {
            return Err(Error::domain(format!("traversal needs 0 < dt ≤ duration, got dt = {}, T = {}", self.dt, self.duration)));
        }
        let steps = (self.duration / self.dt).round() as usize;
        let every = self.check_every.clamp(1, steps);
        Ok((steps, every))
    }
}

/// One branch σ of a beam after traversal.
#[derive(Clone, Debug)]
pub struct Branch {
    sigma: HalfInt,
    fraction: f64,
    wave: Option<GridWaveFunction>,
    ensemble: Option<TrajectoryEnsemble>,
    density: Option<DensityField>,
}

impl Branch {
    pub fn sigma(&self) -> HalfInt {
        self.sigma
    }

    /// |c_σ|².
    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_none()
    }

    /// Unit-normalized ψ_σ (exact pipeline).
    pub fn wave(&self) -> Option<&GridWaveFunction> {
        self.wave.as_ref()
    }

    /// Propagated members (semiclassical pipeline).
    pub fn ensemble(&self) -> Option<&TrajectoryEnsemble> {
        self.ensemble.as_ref()
    }

    /// w_σ, integrating to one.
    pub fn density(&self) -> Option<&DensityField> {
        self.density.as_ref()
    }
}

/// Branches along one apparatus orientation at one time.
#[derive(Clone, Debug)]
pub struct BranchSet {
    spin: Spin,
    axis: Direction,
    time: f64,
    branches: Vec<Branch>,
    max_overlap: f64,
}

impl BranchSet {
    fn assemble(spin: Spin, axis: Direction, time: f64, branches: Vec<Branch>) -> Self {
        let densities: Vec<&DensityField> = branches.iter().filter_map(|b| b.density.as_ref()).collect();
        let mut max_overlap: f64 = 0.0;
        for (i, a) in densities.iter().enumerate() {
            for b in &densities[i + 1..] {
                max_overlap = max_overlap.max(density_overlap(a, b));
            }
        }
        BranchSet { spin, axis, time, branches, max_overlap }
    }

    pub fn spin(&self) -> Spin {
        self.spin
    }

    pub fn axis(&self) -> Direction {
        self.axis
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Branches in storage order σ = j..-j.
    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn branch(&self, sigma: HalfInt) -> Result<&Branch> {
        Ok(&self.branches[self.spin.index_of(sigma)?])
    }

    pub fn fractions(&self) -> Vec<f64> {
        self.branches.iter().map(|b| b.fraction).collect()
    }

    /// Largest ∫√(w_σ w_σ') dq over pairs of non-empty branches.
    pub fn max_overlap(&self) -> f64 {
        self.max_overlap
    }

    pub fn is_separated(&self) -> bool {
        self.max_overlap < SEPARATION_THRESHOLD
    }

    /// Σ_σ |c_σ|² w_σ.
    pub fn mixture_density(&self) -> Result<DensityField> {
        let mut total: Option<DensityField> = None;
        for b in &self.branches {
            if let Some(w) = &b.density {
                let part = w.scaled(b.fraction)?;
                total = Some(match total {
                    Some(t) => t.add(&part)?,
                    None => part,
                });
            }
        }
        total.ok_or_else(|| Error::contract("branch set has no populated branch"))
    }

    /// Labelled view; refused until the branches are separated.
    pub fn separated(&self) -> Result<SeparatedBranches<'_>> {
        if self.is_separated() {
            Ok(SeparatedBranches { set: self })
        } else {
            Err(Error::contract(format!(
                "branches still overlap (max overlap {:.3e} ≥ {SEPARATION_THRESHOLD:e}); outcomes cannot be assigned yet",
                self.max_overlap
            )))
        }
    }
}

/// ∫√(w_a w_b) dq; equals ∫|ψ_a||ψ_b| dq for w = |ψ|².
fn density_overlap(a: &DensityField, b: &DensityField) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x * y).sqrt()).sum::<f64>() * a.cell_volume()
}

/// A [`BranchSet`] known to be separated. Specimen labels can only be drawn from here.
#[derive(Clone, Copy, Debug)]
pub struct SeparatedBranches<'a> {
    set: &'a BranchSet,
}

impl<'a> SeparatedBranches<'a> {
    pub fn branch_set(&self) -> &'a BranchSet {
        self.set
    }

    /// Assigns each of `count` specimens a branch σ with probability |c_σ|².
    pub fn sample_specimens(&self, count: usize, seed: u64, stage: usize) -> Result<SpecimenSample> {
        let ids: Vec<u64> = (0..count as u64).collect();
        self.label(&ids, seed, stage)
    }

    /// Labels the given specimen ids, in order, from one stream.
    pub fn label(&self, ids: &[u64], seed: u64, stage: usize) -> Result<SpecimenSample> {
        let fractions = self.set.fractions();
        let weights = WeightedIndex::new(&fractions).map_err(|e| Error::contract(format!("invalid fractions: {e}")))?;
        let mut rng = seeded_rng(seed);
        let spin = self.set.spin;
        let mut counts = vec![0usize; fractions.len()];
        let records: Vec<SpecimenRecord> = ids
            .iter()
            .map(|&id| {
                let idx = weights.sample(&mut rng);
                counts[idx] += 1;
                SpecimenRecord { id, stage, sigma: spin.projection(idx), seed }
            })
            .collect();
        let n = ids.len().max(1) as f64;
        let empirical: Vec<f64> = counts.iter().map(|c| *c as f64 / n).collect();
        let flagged = fractions
            .iter()
            .zip(&empirical)
            .enumerate()
            .filter(|(_, (p, e))| (*e - *p).abs() > 4.0 * (*p * (1.0 - *p) / n).sqrt() + f64::EPSILON)
            .map(|(i, _)| spin.projection(i))
            .collect();
        Ok(SpecimenSample { records, expected: fractions, empirical, flagged })
    }
}

/// One specimen's outcome at one apparatus. Only produced by [`SeparatedBranches`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SpecimenRecord {
    id: u64,
    stage: usize,
    sigma: HalfInt,
    seed: u64,
}

impl SpecimenRecord {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn sigma(&self) -> HalfInt {
        self.sigma
    }

    /// Seed of the stream the label was drawn from.
    pub fn seed(&self) -> u64 {
        self.seed
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpecimenSample {
    pub records: Vec<SpecimenRecord>,
    /// |c_σ|² in storage order.
    pub expected: Vec<f64>,
    pub empirical: Vec<f64>,
    /// Projections whose empirical fraction is more than 4 binomial standard errors off.
    pub flagged: Vec<HalfInt>,
}

/// Specimen labels for a branch set; refused before separation.
pub fn sample_specimens(branches: &BranchSet, count: usize, seed: u64) -> Result<SpecimenSample> {
    branches.separated()?.sample_specimens(count, seed, 0)
}

/// Norms, overlaps and residuals at one instant of an exact traversal.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Checkpoint {
    pub time: f64,
    /// ∫|Ψ_σ|² dq in storage order.
    pub component_norms: Vec<f64>,
    /// Norm inside the field region.
    pub region_norm: f64,
    /// Largest pairwise overlap of unit-normalized branches.
    pub max_overlap: f64,
    /// Σ_{σ≠σ'} ∫|Ψ_σ||Ψ_σ'| dq.
    pub cross_residual: f64,
    /// Σ_μ ∫ ||Φ_μ|² − Σ_σ |M_μσ|²|Ψ_σ|²| dq, with Φ the state re-expressed
    /// along the incident axis and M the change of basis: the L1 gap between
    /// the coherent state's spin-resolved density and the branch mixture's.
    pub mixture_residual: f64,
}

/// Result of [`run_apparatus_exact`].
#[derive(Clone, Debug)]
pub struct ExactTraversal {
    pub branches: BranchSet,
    /// Final state, quantized along the apparatus.
    pub state: SpinorWaveFunction,
    pub checkpoints: Vec<Checkpoint>,
    /// First checkpoint with beam inside the region.
    pub entry_time: Option<f64>,
    /// First checkpoint after the beam has left the region for good.
    pub exit_time: Option<f64>,
    /// First checkpoint at which the branches are separated.
    pub separation_time: Option<f64>,
}

impl ExactTraversal {
    /// Largest deviation of any component norm from its initial value.
    pub fn max_norm_drift(&self) -> f64 {
        let first = &self.checkpoints[0].component_norms;
        self.checkpoints
            .iter()
            .flat_map(|c| c.component_norms.iter().zip(first).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }

    /// Largest cross-term residual seen before separation (the whole run if never separated).
    pub fn pre_separation_cross_residual(&self) -> f64 {
        let until = self.separation_time.unwrap_or(f64::INFINITY);
        self.checkpoints.iter().filter(|c| c.time < until).map(|c| c.cross_residual).fold(0.0, f64::max)
    }

    /// Largest mixture residual at or after separation; None if never separated.
    pub fn post_separation_mixture_residual(&self) -> Option<f64> {
        let from = self.separation_time?;
        Some(self.checkpoints.iter().filter(|c| c.time >= from).map(|c| c.mixture_residual).fold(0.0, f64::max))
    }
}

fn checkpoint(state: &SpinorWaveFunction, app: &Apparatus, to_incident: &[Vec<f64>], incident_axis: &Direction) -> Checkpoint {
    let grid = state.grid();
    let dx = grid.spacing();
    let norms = state.component_norms();
    let comps = state.components();
    let n = comps.len();
    let mut max_overlap: f64 = 0.0;
    let mut cross = 0.0;
    for a in 0..n {
        for b in a + 1..n {
            let raw: f64 = comps[a].iter().zip(&comps[b]).map(|(x, y)| x.norm() * y.norm()).sum::<f64>() * dx;
            cross += 2.0 * raw;
            if norms[a] > EMPTY && norms[b] > EMPTY {
                max_overlap = max_overlap.max(raw / (norms[a] * norms[b]).sqrt());
            }
        }
    }
    let region_norm: f64 = (0..grid.points())
        .filter(|&i| app.contains(grid.coordinate(i)))
        .map(|i| comps.iter().map(|c| c[i].norm_sqr()).sum::<f64>())
        .sum::<f64>()
        * dx;
    let coherent = rebase_spinor(state, incident_axis);
    let mut mixture = 0.0;
    for (mu, phi) in coherent.components().iter().enumerate() {
        for i in 0..grid.points() {
            let incoherent: f64 = (0..n).map(|s| to_incident[mu][s] * comps[s][i].norm_sqr()).sum();
            mixture += (phi[i].norm_sqr() - incoherent).abs();
        }
    }
    Checkpoint {
        time: state.time(),
        component_norms: norms,
        region_norm,
        max_overlap,
        cross_residual: cross,
        mixture_residual: mixture * dx,
    }
}

fn exact_branches(state: &SpinorWaveFunction) -> Result<BranchSet> {
    let spin = state.spin();
    let branches = spin
        .projections()
        .zip(state.component_norms())
        .map(|(sigma, fraction)| {
            let wave = if fraction > EMPTY { Some(state.branch(sigma)?) } else { None };
            let density = wave.as_ref().map(crate::quantum::density);
            Ok(Branch { sigma, fraction, wave, ensemble: None, density })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BranchSet::assemble(spin, state.axis(), state.time(), branches))
}

/// Rebases `psi_in` onto the apparatus axis and evolves every component
/// under its `V_σ` (plus `background`), recording a checkpoint every
/// `traversal.check_every` steps.
pub fn run_apparatus_exact(
    psi_in: &SpinorWaveFunction,
    app: &Apparatus,
    background: Option<&PotentialField>,
    traversal: &Traversal,
) -> Result<ExactTraversal> {
    let (steps, every) = traversal.plan()?;
    let spin = psi_in.spin();
    let incident_axis = psi_in.axis();
    let h_ext = spin_potential(app, spin)?;
    let free;
    let background = match background {
        Some(v) => v,
        None => {
            let (a, b) = app.region;
            free = PotentialField::free(a - FIELD_FREE_MARGIN, b + FIELD_FREE_MARGIN)?;
            &free
        }
    };
    let propagator = SpinorPropagator::new(psi_in.grid(), psi_in.hbar(), psi_in.mass(), background, &h_ext, traversal.dt)?;
    let m = rotation_between(spin, &app.orientation, &incident_axis);
    let to_incident: Vec<Vec<f64>> =
        (0..spin.dim()).map(|mu| (0..spin.dim()).map(|s| m.entry(mu, s).norm_sqr()).collect()).collect();
    let mut state = rebase_spinor(psi_in, &app.orientation);
    let mut checkpoints = vec![checkpoint(&state, app, &to_incident, &incident_axis)];
    let mut done = 0;
    while done < steps {
        let chunk = every.min(steps - done);
        state = propagator.evolve(&state, chunk)?;
        done += chunk;
        checkpoints.push(checkpoint(&state, app, &to_incident, &incident_axis));
    }
    let entry_time = checkpoints.iter().find(|c| c.region_norm > PRESENCE).map(|c| c.time);
    let last_inside = checkpoints.iter().rposition(|c| c.region_norm > PRESENCE);
    let exit_time = match last_inside {
        Some(i) if i + 1 < checkpoints.len() => Some(checkpoints[i + 1].time),
        _ => None,
    };
    let separation_time = checkpoints.iter().find(|c| c.max_overlap < SEPARATION_THRESHOLD).map(|c| c.time);
    let branches = exact_branches(&state)?;
    Ok(ExactTraversal { branches, state, checkpoints, entry_time, exit_time, separation_time })
}

/// Copies of `ensemble_in`, one per populated σ, propagated under `V_σ`
/// (plus `background`) and binned on `axes` at the end of the traversal.
pub fn run_apparatus_semiclassical(
    ensemble_in: &TrajectoryEnsemble,
    chi_in: &SpinState,
    app: &Apparatus,
    background: Option<&PotentialField>,
    traversal: &Traversal,
    axes: &[GridSpec],
) -> Result<BranchSet> {
    let (steps, every) = traversal.plan()?;
    let spin = chi_in.spin();
    let fractions = chi_in.populations_along(&app.orientation);
    let projections: Vec<HalfInt> = spin.projections().collect();
    let branches = projections
        .par_iter()
        .zip(fractions.par_iter())
        .map(|(&sigma, &fraction)| {
            if fraction <= EMPTY {
                return Ok(Branch { sigma, fraction, wave: None, ensemble: None, density: None });
            }
            let mut v = build_sg_potential(app, spin, sigma)?;
            if let Some(bg) = background {
                v = v.plus(bg)?;
            }
            let ens = propagate_ensemble(ensemble_in.clone().latest_only(), &v, traversal.dt, steps as f64 * traversal.dt, every)?;
            let density = bin_density(&ens, ens.final_time(), axes)?;
            let total = density.integral();
            let density = if total > 0.0 { density.scaled(1.0 / total)? } else { density };
            Ok(Branch { sigma, fraction, wave: None, ensemble: Some(ens), density: Some(density) })
        })
        .collect::<Result<Vec<_>>>()?;
    let time = ensemble_in.final_time() + steps as f64 * traversal.dt;
    Ok(BranchSet::assemble(spin, app.orientation, time, branches))
}

/// What survives a filter.
#[derive(Clone, Debug)]
pub enum FilteredBeam {
    Wave(GridWaveFunction),
    Ensemble(TrajectoryEnsemble),
}

#[derive(Clone, Debug)]
pub struct Filtered {
    pub beam: FilteredBeam,
    /// χ_ρ(n).
    pub internal: SpinState,
    /// Σ_{σ≠ρ} |c_σ|².
    pub discarded: f64,
}

impl Filtered {
    /// ψ_ρ ⊗ χ_ρ(n), for a beam from the exact pipeline.
    pub fn spinor(&self) -> Result<SpinorWaveFunction> {
        match &self.beam {
            FilteredBeam::Wave(psi) => Ok(SpinorWaveFunction::product(psi, &self.internal)),
            FilteredBeam::Ensemble(_) => Err(Error::contract("a filtered ensemble has no wavefunction")),
        }
    }
}

/// Keeps branch ρ and discards the rest. Refused for unseparated branches.
pub fn filter(branches: &BranchSet, rho: HalfInt) -> Result<Filtered> {
    let separated = branches.separated()?;
    let set = separated.branch_set();
    let kept = set.branch(rho)?;
    let beam = match (&kept.wave, &kept.ensemble) {
        (Some(w), _) => FilteredBeam::Wave(w.clone()),
        (None, Some(e)) => FilteredBeam::Ensemble(e.clone()),
        (None, None) => return Err(Error::EmptyBranch { sigma: rho.to_string() }),
    };
    let discarded = set.branches.iter().filter(|b| b.sigma != rho).map(|b| b.fraction).sum();
    Ok(Filtered { beam, internal: SpinState::basis(set.spin, set.axis, rho)?, discarded })
}

/// Which branches a cascade stage passes on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Keep {
    Sigma(HalfInt),
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub apparatus: Apparatus,
    pub keep: Keep,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub axis: Direction,
    /// |c_σ|² for the beam entering this stage, in storage order.
    pub fractions: Vec<f64>,
    pub kept: Keep,
    /// Share of the incident population reaching this stage.
    pub survival_in: f64,
    pub entry_time: Option<f64>,
    pub exit_time: Option<f64>,
    pub separation_time: Option<f64>,
    pub max_norm_drift: f64,
    pub pre_separation_cross_residual: f64,
    pub post_separation_mixture_residual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CascadeReport {
    pub spin: Spin,
    pub stages: Vec<StageReport>,
    /// Share of the incident population in each branch of the last stage.
    pub final_fractions: Vec<f64>,
}

fn check_stages(keeps: impl Iterator<Item = Keep>) -> Result<usize> {
    let keeps: Vec<Keep> = keeps.collect();
    if keeps.is_empty() {
        return Err(Error::contract("a cascade needs at least one apparatus"));
    }
    if keeps[..keeps.len() - 1].iter().any(|k| *k == Keep::All) {
        return Err(Error::contract("every stage but the last must keep a single branch"));
    }
    Ok(keeps.len())
}

/// Fractions from internal-state algebra alone: the product of transition
/// probabilities along the kept path times the last stage's distribution.
pub fn cascade_analytic(chi_in: &SpinState, stages: &[(Direction, Keep)]) -> Result<CascadeReport> {
    check_stages(stages.iter().map(|s| s.1))?;
    let spin = chi_in.spin();
    let mut chi = chi_in.clone();
    let mut survival = 1.0;
    let mut reports = Vec::with_capacity(stages.len());
    let mut final_fractions = Vec::new();
    for (axis, keep) in stages {
        let fractions = chi.populations_along(axis);
        reports.push(StageReport {
            axis: *axis,
            fractions: fractions.clone(),
            kept: *keep,
            survival_in: survival,
            entry_time: None,
            exit_time: None,
            separation_time: None,
            max_norm_drift: 0.0,
            pre_separation_cross_residual: 0.0,
            post_separation_mixture_residual: None,
        });
        final_fractions = fractions.iter().map(|f| survival * f).collect();
        if let Keep::Sigma(rho) = keep {
            let p = fractions[spin.index_of(*rho)?];
            if p <= EMPTY {
                return Err(Error::EmptyBranch { sigma: rho.to_string() });
            }
            survival *= p;
            chi = SpinState::basis(spin, *axis, *rho)?;
        }
    }
    Ok(CascadeReport { spin, stages: reports, final_fractions })
}

/// Runs each stage with the exact solver. The beam passed on is the kept
/// internal state χ_ρ(n) on a freshly prepared spatial packet, as if the
/// surviving branch were guided into the next apparatus.
pub fn cascade_exact(beam: &Beam, chi_in: &SpinState, stages: &[Stage], traversal: &Traversal) -> Result<CascadeReport> {
    Ok(run_cascade(beam, chi_in, stages, traversal, None)?.0)
}

/// Specimens flowing through a cascade.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeSample {
    pub records: Vec<SpecimenRecord>,
    pub count: usize,
    /// Share of all specimens ending in each branch of the last stage.
    pub empirical: Vec<f64>,
    /// 4-binomial-standard-error check of `empirical` against the exact fractions.
    pub flagged: Vec<HalfInt>,
}

/// [`cascade_exact`] plus `count` specimens labelled stage by stage; only
/// specimens labelled ρ at a stage continue. Stage `s` draws from stream
/// `derive_seed(seed, s)`.
pub fn cascade_sampled(
    beam: &Beam,
    chi_in: &SpinState,
    stages: &[Stage],
    traversal: &Traversal,
    count: usize,
    seed: u64,
) -> Result<(CascadeReport, CascadeSample)> {
    let (report, sample) = run_cascade(beam, chi_in, stages, traversal, Some((count, seed)))?;
    Ok((report, sample.expect("sampling was requested")))
}

fn run_cascade(
    beam: &Beam,
    chi_in: &SpinState,
    stages: &[Stage],
    traversal: &Traversal,
    sampling: Option<(usize, u64)>,
) -> Result<(CascadeReport, Option<CascadeSample>)> {
    check_stages(stages.iter().map(|s| s.keep))?;
    let spin = chi_in.spin();
    let packet = beam.packet()?;
    let mut chi = chi_in.clone();
    let mut survival = 1.0;
    let mut reports = Vec::with_capacity(stages.len());
    let mut final_fractions = Vec::new();
    let mut alive: Vec<u64> = sampling.map(|(n, _)| (0..n as u64).collect()).unwrap_or_default();
    let mut records = Vec::new();
    let mut final_counts = vec![0usize; spin.dim()];
    for (s, stage) in stages.iter().enumerate() {
        let psi = SpinorWaveFunction::product(&packet, &chi);
        let run = run_apparatus_exact(&psi, &stage.apparatus, None, traversal)?;
        let fractions = run.branches.fractions();
        reports.push(StageReport {
            axis: stage.apparatus.orientation,
            fractions: fractions.clone(),
            kept: stage.keep,
            survival_in: survival,
            entry_time: run.entry_time,
            exit_time: run.exit_time,
            separation_time: run.separation_time,
            max_norm_drift: run.max_norm_drift(),
            pre_separation_cross_residual: run.pre_separation_cross_residual(),
            post_separation_mixture_residual: run.post_separation_mixture_residual(),
        });
        final_fractions = fractions.iter().map(|f| survival * f).collect();
        if let Some((_, seed)) = sampling {
            let labelled = run.branches.separated()?.label(&alive, derive_seed(seed, s as u64), s)?;
            let keep = stage.keep;
            alive = labelled
                .records
                .iter()
                .filter(|r| matches!(keep, Keep::Sigma(rho) if r.sigma == rho))
                .map(|r| r.id)
                .collect();
            if s + 1 == stages.len() {
                for r in &labelled.records {
                    final_counts[spin.index_of(r.sigma)?] += 1;
                }
            }
            records.extend(labelled.records);
        }
        if let Keep::Sigma(rho) = stage.keep {
            let kept = filter(&run.branches, rho)?;
            survival *= fractions[spin.index_of(rho)?];
            chi = kept.internal;
        }
    }
    let sample = sampling.map(|(count, _)| {
        let n = count.max(1) as f64;
        let empirical: Vec<f64> = final_counts.iter().map(|c| *c as f64 / n).collect();
        let flagged = final_fractions
            .iter()
            .zip(&empirical)
            .enumerate()
            .filter(|(_, (p, e))| (*e - *p).abs() > 4.0 * (*p * (1.0 - *p) / n).sqrt() + f64::EPSILON)
            .map(|(i, _)| spin.projection(i))
            .collect();
        CascadeSample { records, count, empirical, flagged }
    });
    Ok((CascadeReport { spin, stages: reports, final_fractions }, sample))
}

/// Evolves a single spatial packet under `V_σ` alone: the σ branch shape
/// independent of the internal state it came from.
pub fn branch_wave(packet: &GridWaveFunction, app: &Apparatus, spin: Spin, sigma: HalfInt, traversal: &Traversal) -> Result<GridWaveFunction> {
    let (steps, _) = traversal.plan()?;
    let v = build_sg_potential(app, spin, sigma)?;
    let op = crate::quantum::SplitOperator::new(packet.grid(), packet.hbar(), packet.mass(), &v, traversal.dt)?;
    op.evolve(packet, steps)
}

/// Largest ∫|ψ_a||ψ_b| dq over pairs of unit-normalized waves.
pub fn max_pairwise_overlap(waves: &[GridWaveFunction]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, a) in waves.iter().enumerate() {
        for b in &waves[i + 1..] {
            let o: f64 = a.amplitudes().iter().zip(b.amplitudes()).map(|(x, y)| x.norm() * y.norm()).sum::<f64>()
                * a.grid().spacing();
            worst = worst.max(o);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{transition_probability, wigner_small_d};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, FRAC_PI_4, FRAC_PI_6};

    const PLUS: HalfInt = HalfInt::HALF;
    const MINUS: HalfInt = HalfInt::MINUS_HALF;

    fn app(axis: Direction) -> Apparatus {
        Apparatus::new(axis, (-2.5, 2.5), 2.0, 4.0).unwrap()
    }

    fn beam() -> Beam {
        Beam { grid: GridSpec::new(-12.0, 12.0, 2048).unwrap(), hbar: 0.02, mass: 1.0, center: -4.0, momentum: 1.0, width: 0.25 }
    }

    fn traversal() -> Traversal {
        Traversal { dt: 0.002, duration: 8.0, check_every: 50 }
    }

    #[test]
    fn envelope_is_smooth_and_confined() {
        let a = app(Direction::z());
        for q in [-2.5, 2.5] {
            for eps in [0.0, 1e-13] {
                assert!(a.envelope(q + eps).abs() < 1e-12 && a.envelope(q - eps).abs() < 1e-12);
                assert!(a.envelope_slope(q + eps).abs() < 1e-12 && a.envelope_slope(q - eps).abs() < 1e-12);
            }
        }
        // plateau joins: value 1, slope 0
        for q in [-0.5, 0.5] {
            assert_abs_diff_eq!(a.envelope(q), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(a.envelope(3.0 * q), 0.5, epsilon = 1e-12);
            assert!(a.envelope_slope(q).abs() < 1e-12);
        }
        assert!(Apparatus::new(Direction::z(), (0.0, 1.0), 0.6, 1.0).is_err());
    }

    #[test]
    fn branch_potentials_are_antisymmetric_in_sigma() {
        let a = app(Direction::x());
        let plus = build_sg_potential(&a, Spin::HALF, PLUS).unwrap();
        let minus = build_sg_potential(&a, Spin::HALF, MINUS).unwrap();
        let zero = build_sg_potential(&a, Spin::ONE, HalfInt::ZERO).unwrap();
        for i in 0..400 {
            let q = -3.0 + 6.0 * i as f64 / 400.0;
            assert_eq!(plus.value(&[q]), -minus.value(&[q]));
            assert_eq!(zero.value(&[q]), 0.0);
        }
        assert!(build_sg_potential(&a, Spin::HALF, HalfInt::ONE).is_err());
    }

    #[test]
    fn aligned_beam_has_a_single_branch() {
        let chi = SpinState::basis(Spin::HALF, Direction::z(), PLUS).unwrap();
        let psi = SpinorWaveFunction::product(&beam().packet().unwrap(), &chi);
        let run = run_apparatus_exact(&psi, &app(Direction::z()), None, &traversal()).unwrap();
        assert_abs_diff_eq!(run.branches.fractions()[0], 1.0, epsilon = 1e-10);
        assert!(run.branches.branches()[1].is_empty());
        assert!(run.branches.is_separated());
        assert_eq!(run.separation_time, Some(0.0));
        let filtered = filter(&run.branches, PLUS).unwrap();
        assert!(filtered.discarded < 1e-20);
        assert!(matches!(filter(&run.branches, MINUS), Err(Error::EmptyBranch { .. })));
    }

    #[test]
    fn perpendicular_apparatus_splits_evenly_and_separates() {
        let chi = SpinState::basis(Spin::HALF, Direction::z(), PLUS).unwrap();
        let psi = SpinorWaveFunction::product(&beam().packet().unwrap(), &chi);
        let run = run_apparatus_exact(&psi, &app(Direction::x()), None, &traversal()).unwrap();
        for c in &run.checkpoints {
            assert_abs_diff_eq!(c.component_norms[0], 0.5, epsilon = 1e-10);
            assert_abs_diff_eq!(c.component_norms[1], 0.5, epsilon = 1e-10);
        }
        assert!(run.max_norm_drift() < 1e-10);
        let (t1, t2, ts) = (run.entry_time.unwrap(), run.exit_time.unwrap(), run.separation_time.unwrap());
        assert!(t1 > 0.0 && t1 < t2 && ts > t1 && ts <= 8.0, "t1 {t1} t2 {t2} ts {ts}");
        assert!(run.branches.is_separated());
        // reflected − branch, transmitted + branch
        let plus = run.branches.branch(PLUS).unwrap().wave().unwrap();
        let minus = run.branches.branch(MINUS).unwrap().wave().unwrap();
        assert!(plus.mean_position() > 2.5 && minus.mean_position() < -2.5);
        // before: full interference; after: the mixture describes the state
        assert!(run.pre_separation_cross_residual() > 0.9);
        assert!(run.post_separation_mixture_residual().unwrap() < 10.0 * SEPARATION_THRESHOLD);
        let filtered = filter(&run.branches, PLUS).unwrap();
        assert_abs_diff_eq!(filtered.discarded, 0.5, epsilon = 1e-10);
        assert_eq!(filtered.internal, SpinState::basis(Spin::HALF, Direction::x(), PLUS).unwrap());
    }

    #[test]
    fn unseparated_branches_refuse_labels_and_filters() {
        let chi = SpinState::basis(Spin::HALF, Direction::z(), PLUS).unwrap();
        let psi = SpinorWaveFunction::product(&beam().packet().unwrap(), &chi);
        let short = Traversal { dt: 0.002, duration: 0.4, check_every: 25 };
        let run = run_apparatus_exact(&psi, &app(Direction::x()), None, &short).unwrap();
        assert!(!run.branches.is_separated());
        assert!(matches!(run.branches.separated(), Err(Error::Contract(_))));
        assert!(matches!(sample_specimens(&run.branches, 10, 1), Err(Error::Contract(_))));
        assert!(matches!(filter(&run.branches, PLUS), Err(Error::Contract(_))));
        assert!(run.post_separation_mixture_residual().is_none());
    }

    #[test]
    fn spin_one_fractions_follow_small_d() {
        let m = Direction::new(0.4, 1.0).unwrap();
        let n = Direction::new(1.9, 4.0).unwrap();
        let chi = SpinState::basis(Spin::ONE, m, HalfInt::ONE).unwrap();
        let psi = SpinorWaveFunction::product(&beam().packet().unwrap(), &chi);
        let short = Traversal { dt: 0.002, duration: 1.0, check_every: 50 };
        let run = run_apparatus_exact(&psi, &app(n), None, &short).unwrap();
        let beta = m.angle_to(&n);
        let mut sum = 0.0;
        for (i, sigma) in Spin::ONE.projections().enumerate() {
            let d = wigner_small_d(Spin::ONE, sigma, HalfInt::ONE, beta).unwrap();
            assert_abs_diff_eq!(run.branches.fractions()[i], d * d, epsilon = 1e-10);
            sum += run.branches.fractions()[i];
        }
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn analytic_cascades() {
        let up = SpinState::basis(Spin::HALF, Direction::z(), PLUS).unwrap();
        for theta in [0.0, FRAC_PI_6, FRAC_PI_4, FRAC_PI_3, FRAC_PI_2, std::f64::consts::PI] {
            let n = Direction::polar(theta).unwrap();
            let r = cascade_analytic(&up, &[(Direction::z(), Keep::Sigma(PLUS)), (n, Keep::All)]).unwrap();
            assert_abs_diff_eq!(r.final_fractions[0], (theta / 2.0).cos().powi(2), epsilon = 1e-12);
        }
        // z, x, z keeping + each time
        let r = cascade_analytic(
            &up,
            &[(Direction::z(), Keep::Sigma(PLUS)), (Direction::x(), Keep::Sigma(PLUS)), (Direction::z(), Keep::All)],
        )
        .unwrap();
        let p_zx = transition_probability(PLUS, &Direction::x(), PLUS, &Direction::z(), Spin::HALF).unwrap();
        let p_xz = transition_probability(PLUS, &Direction::z(), PLUS, &Direction::x(), Spin::HALF).unwrap();
        assert_abs_diff_eq!(r.final_fractions[0], p_zx * p_xz, epsilon = 1e-12);
        assert_abs_diff_eq!(r.final_fractions[0], 0.25, epsilon = 1e-12);
        // same axis twice is idempotent
        let r = cascade_analytic(&up, &[(Direction::x(), Keep::Sigma(MINUS)), (Direction::x(), Keep::All)]).unwrap();
        assert_abs_diff_eq!(r.stages[1].fractions[1], 1.0, epsilon = 1e-12);
        assert!(cascade_analytic(&up, &[(Direction::x(), Keep::All), (Direction::z(), Keep::All)]).is_err());
    }

    #[test]
    fn specimen_sampling() {
        let chi = SpinState::basis(Spin::HALF, Direction::z(), PLUS).unwrap();
        let psi = SpinorWaveFunction::product(&beam().packet().unwrap(), &chi);
        let run = run_apparatus_exact(&psi, &app(Direction::x()), None, &traversal()).unwrap();
        let a = sample_specimens(&run.branches, 100_000, 11).unwrap();
        let b = sample_specimens(&run.branches, 100_000, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.flagged.is_empty());
        assert!((a.empirical[0] - 0.5).abs() < 4.0 * (0.25f64 / 1e5).sqrt());
        assert!(a.records.iter().all(|r| r.stage() == 0 && r.seed() == 11));
        let aligned = run_apparatus_exact(&psi, &app(Direction::z()), None, &Traversal { duration: 0.2, ..traversal() }).unwrap();
        let all_up = sample_specimens(&aligned.branches, 1000, 3).unwrap();
        assert!(all_up.records.iter().all(|r| r.sigma() == PLUS));
    }

    #[test]
    fn exact_cascade_matches_the_product_rule() {
        let up = SpinState::basis(Spin::HALF, Direction::z(), PLUS).unwrap();
        let n = Direction::polar(FRAC_PI_3).unwrap();
        let stages = [
            Stage { apparatus: app(Direction::z()), keep: Keep::Sigma(PLUS) },
            Stage { apparatus: app(n), keep: Keep::All },
        ];
        let (report, sample) = cascade_sampled(&beam(), &up, &stages, &traversal(), 20_000, 5).unwrap();
        assert_abs_diff_eq!(report.final_fractions[0], (FRAC_PI_3 / 2.0).cos().powi(2), epsilon = 1e-10);
        assert!(sample.flagged.is_empty());
        assert_eq!(sample.records.iter().filter(|r| r.stage() == 1).count(), 20_000);
        for st in &report.stages {
            assert!(st.max_norm_drift < 1e-10);
        }
    }
}
