//! Classical transport of the WKB population.
//!
//! Trajectories are the characteristics of the Hamilton–Jacobi equation and
//! are integrated with kick–drift–kick leapfrog. Alongside each trajectory
//! the tangent map is integrated with the same scheme, which yields the
//! Jacobian `J = |det ∂q(t)/∂q(0)|` along the initial Lagrangian manifold.
//! Densities are obtained by binning member weights, so a member's share of
//! the population stays constant along its path and the local density falls
//! as 1/J.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::quantum::{GridSpec, GridWaveFunction};
use crate::{Error, Result};

type ScalarFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type VectorFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// Weight sums must match 1 within this at ensemble construction.
const WEIGHT_TOL: f64 = 1e-12;
/// |det ∂q/∂q0| below this counts as a caustic.
const CAUSTIC_FLOOR: f64 = 1e-10;

/// V(q) with its gradient and, optionally, its Hessian on a box domain.
#[derive(Clone)]
pub struct PotentialField {
    dim: usize,
    bounds: Vec<(f64, f64)>,
    value: Arc<ScalarFn>,
    gradient: Arc<VectorFn>,
    hessian: Option<Arc<VectorFn>>,
}

impl std::fmt::Debug for PotentialField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PotentialField")
            .field("dim", &self.dim)
            .field("bounds", &self.bounds)
            .field("analytic_hessian", &self.hessian.is_some())
            .finish()
    }
}

impl PotentialField {
    /// Builds a field and checks the gradient against central differences of V.
    pub fn new(
        bounds: Vec<(f64, f64)>,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        if bounds.is_empty() || bounds.iter().any(|(a, b)| !(a.is_finite() && b.is_finite() && b > a)) {
            return Err(Error::Construction("potential domain bounds must be finite and increasing".into()));
        }
        let field = PotentialField {
            dim: bounds.len(),
            bounds,
            value: Arc::new(value),
            gradient: Arc::new(gradient),
            hessian: None,
        };
        field.self_test()?;
        Ok(field)
    }

    /// Attaches an analytic Hessian, filled row-major into a d×d slice.
    pub fn with_hessian(mut self, hessian: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.hessian = Some(Arc::new(hessian));
        self
    }

    pub fn one_dim(
        lower: f64,
        upper: f64,
        value: impl Fn(f64) -> f64 + Send + Sync + 'static,
        derivative: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        PotentialField::new(vec![(lower, upper)], move |q| value(q[0]), move |q, g| g[0] = derivative(q[0]))
    }

    pub fn one_dim_with_curvature(
        lower: f64,
        upper: f64,
        value: impl Fn(f64) -> f64 + Send + Sync + 'static,
        derivative: impl Fn(f64) -> f64 + Send + Sync + 'static,
        curvature: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        Ok(PotentialField::one_dim(lower, upper, value, derivative)?
            .with_hessian(move |q, h| h[0] = curvature(q[0])))
    }

    pub fn free(lower: f64, upper: f64) -> Result<Self> {
        PotentialField::one_dim_with_curvature(lower, upper, |_| 0.0, |_| 0.0, |_| 0.0)
    }

    /// V = k q²/2.
    pub fn harmonic(lower: f64, upper: f64, stiffness: f64) -> Result<Self> {
        PotentialField::anharmonic(lower, upper, stiffness, 0.0)
    }

    /// V = k q²/2 + λ q⁴.
    pub fn anharmonic(lower: f64, upper: f64, stiffness: f64, quartic: f64) -> Result<Self> {
        PotentialField::one_dim_with_curvature(
            lower,
            upper,
            move |q| 0.5 * stiffness * q * q + quartic * q.powi(4),
            move |q| stiffness * q + 4.0 * quartic * q.powi(3),
            move |q| stiffness + 12.0 * quartic * q * q,
        )
    }

    /// Pointwise sum on the intersection of both domains.
    pub fn plus(&self, other: &PotentialField) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::contract("cannot add potentials of different dimension"));
        }
        let bounds = self
            .bounds
            .iter()
            .zip(&other.bounds)
            .map(|(a, b)| (a.0.max(b.0), a.1.min(b.1)))
            .collect();
        let (va, vb) = (self.value.clone(), other.value.clone());
        let (ga, gb) = (self.gradient.clone(), other.gradient.clone());
        let dim = self.dim;
        let mut sum = PotentialField::new(
            bounds,
            move |q| va(q) + vb(q),
            move |q, g| {
                let mut tmp = vec![0.0; dim];
                ga(q, g);
                gb(q, &mut tmp);
                g.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            },
        )?;
        if let (Some(ha), Some(hb)) = (self.hessian.clone(), other.hessian.clone()) {
            sum = sum.with_hessian(move |q, h| {
                let mut tmp = vec![0.0; dim * dim];
                ha(q, h);
                hb(q, &mut tmp);
                h.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            });
        }
        Ok(sum)
    }

    fn self_test(&self) -> Result<()> {
        let mut rng = crate::rng::seeded_rng(0x5eed);
        let mut q = vec![0.0; self.dim];
        let mut g = vec![0.0; self.dim];
        for _ in 0..16 {
            for (x, (a, b)) in q.iter_mut().zip(&self.bounds) {
                *x = rng.random_range(*a..*b);
            }
            self.gradient(&q, &mut g);
            for i in 0..self.dim {
                let h = 1e-6 * q[i].abs().max(1.0);
                let mut probe = q.clone();
                probe[i] = q[i] + h;
                let up = self.value(&probe);
                probe[i] = q[i] - h;
                let down = self.value(&probe);
                let fd = (up - down) / (2.0 * h);
                if !((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0)) {
                    return Err(Error::Construction(format!(
                        "gradient component {i} at {q:?} is {} but finite differences give {fd}",
                        g[i]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn value(&self, q: &[f64]) -> f64 {
        (self.value)(q)
    }

    pub fn gradient(&self, q: &[f64], out: &mut [f64]) {
        (self.gradient)(q, out)
    }

    /// Row-major Hessian; central differences of the gradient when none was supplied.
    pub fn hessian(&self, q: &[f64], out: &mut [f64]) {
        if let Some(h) = &self.hessian {
            return h(q, out);
        }
        let d = self.dim;
        let mut probe = q.to_vec();
        let mut up = vec![0.0; d];
        let mut down = vec![0.0; d];
        for j in 0..d {
            let h = 1e-5 * (self.bounds[j].1 - self.bounds[j].0);
            probe[j] = q[j] + h;
            self.gradient(&probe, &mut up);
            probe[j] = q[j] - h;
            self.gradient(&probe, &mut down);
            probe[j] = q[j];
            for i in 0..d {
                out[i * d + j] = (up[i] - down[i]) / (2.0 * h);
            }
        }
    }

    pub fn contains(&self, q: &[f64]) -> bool {
        q.iter().zip(&self.bounds).all(|(x, (a, b))| x >= a && x <= b)
    }

    /// max |V| over the nodes of a one-dimensional grid.
    pub fn max_abs_on(&self, grid: &GridSpec) -> f64 {
        grid.coordinates().iter().map(|&q| self.value(&[q]).abs()).fold(0.0, f64::max)
    }
}

/// Splits `[0, duration]` into whole steps no longer than `dt`.
fn step_plan(dt: f64, duration: f64) -> Result<(usize, f64)> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::contract(format!("time step must be positive, got {dt}")));
    }
    if !(duration >= dt * (1.0 - 1e-12)) || !duration.is_finite() {
        return Err(Error::contract(format!("duration {duration} is shorter than the step {dt}")));
    }
    let steps = (duration / dt - 1e-9).ceil().max(1.0) as usize;
    Ok((steps, duration / steps as f64))
}

/// Per-step workspace for one member.
struct Stepper<'a> {
    potential: &'a PotentialField,
    mass: f64,
    dt: f64,
    force: Vec<f64>,
    hess: Vec<f64>,
    tmp: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(potential: &'a PotentialField, mass: f64, dt: f64, q: &[f64]) -> Self {
        let d = potential.dim;
        let mut force = vec![0.0; d];
        potential.gradient(q, &mut force);
        Stepper { potential, mass, dt, force, hess: vec![0.0; d * d], tmp: vec![0.0; d] }
    }

    /// Kick–drift–kick. `tangents` holds column pairs (δq, δp), each d long,
    /// advanced with the linearization of the same map.
    fn step(&mut self, q: &mut [f64], p: &mut [f64], tangents: &mut [f64]) {
        let d = q.len();
        let half = 0.5 * self.dt;
        let columns = tangents.len() / (2 * d);
        if columns > 0 {
            self.potential.hessian(q, &mut self.hess);
            for c in 0..columns {
                let (dq, dp) = tangents[2 * d * c..2 * d * (c + 1)].split_at_mut(d);
                kick_tangent(&self.hess, dq, dp, half, &mut self.tmp);
            }
        }
        for i in 0..d {
            p[i] -= half * self.force[i];
            q[i] += self.dt * p[i] / self.mass;
        }
        for c in 0..columns {
            let (dq, dp) = tangents[2 * d * c..2 * d * (c + 1)].split_at_mut(d);
            for i in 0..d {
                dq[i] += self.dt * dp[i] / self.mass;
            }
        }
        self.potential.gradient(q, &mut self.force);
        for i in 0..d {
            p[i] -= half * self.force[i];
        }
        if columns > 0 {
            self.potential.hessian(q, &mut self.hess);
            for c in 0..columns {
                let (dq, dp) = tangents[2 * d * c..2 * d * (c + 1)].split_at_mut(d);
                kick_tangent(&self.hess, dq, dp, half, &mut self.tmp);
            }
        }
    }
}

fn kick_tangent(hess: &[f64], dq: &[f64], dp: &mut [f64], half: f64, tmp: &mut [f64]) {
    let d = dq.len();
    for i in 0..d {
        tmp[i] = (0..d).map(|j| hess[i * d + j] * dq[j]).sum();
    }
    for i in 0..d {
        dp[i] -= half * tmp[i];
    }
}

fn determinant(m: &[f64], d: usize) -> f64 {
    match d {
        1 => m[0],
        2 => m[0] * m[3] - m[1] * m[2],
        _ => nalgebra::DMatrix::from_row_slice(d, d, m).determinant(),
    }
}

/// One kick–drift–kick step of (q, p) together with its 2d×2d tangent map
/// (row-major, rows (q', p'), columns (q, p)).
pub fn leapfrog_step(
    potential: &PotentialField,
    mass: f64,
    dt: f64,
    q: &mut [f64],
    p: &mut [f64],
) -> Vec<f64> {
    let d = q.len();
    let mut tangents = identity_tangents(d);
    Stepper::new(potential, mass, dt, q).step(q, p, &mut tangents);
    tangents_to_monodromy(&tangents, d)
}

fn identity_tangents(d: usize) -> Vec<f64> {
    let mut t = vec![0.0; 4 * d * d];
    for c in 0..2 * d {
        t[2 * d * c + c] = 1.0;
    }
    t
}

fn tangents_to_monodromy(tangents: &[f64], d: usize) -> Vec<f64> {
    let n = 2 * d;
    let mut m = vec![0.0; n * n];
    for c in 0..n {
        for r in 0..n {
            m[r * n + c] = tangents[n * c + r];
        }
    }
    m
}

/// A sampled classical path with a shared time axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    dim: usize,
    mass: f64,
    times: Vec<f64>,
    positions: Vec<f64>,
    momenta: Vec<f64>,
    monodromy: Vec<f64>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn momentum(&self, i: usize) -> &[f64] {
        &self.momenta[i * self.dim..(i + 1) * self.dim]
    }

    pub fn final_position(&self) -> &[f64] {
        self.position(self.len() - 1)
    }

    pub fn final_momentum(&self) -> &[f64] {
        self.momentum(self.len() - 1)
    }

    /// ∂(q, p)(T)/∂(q, p)(0), row-major 2d×2d.
    pub fn monodromy(&self) -> &[f64] {
        &self.monodromy
    }

    pub fn energy(&self, i: usize, potential: &PotentialField) -> f64 {
        let kinetic: f64 = self.momentum(i).iter().map(|p| p * p).sum::<f64>() / (2.0 * self.mass);
        kinetic + potential.value(self.position(i))
    }
}

/// Integrates Hamilton's equations from (q0, p0) over `duration` with leapfrog.
pub fn integrate_trajectory(
    q0: &[f64],
    p0: &[f64],
    mass: f64,
    potential: &PotentialField,
    dt: f64,
    duration: f64,
) -> Result<Trajectory> {
    let d = potential.dim;
    if q0.len() != d || p0.len() != d {
        return Err(Error::contract("initial conditions do not match the potential's dimension"));
    }
    if !(mass > 0.0) {
        return Err(Error::contract(format!("mass must be positive, got {mass}")));
    }
    if !potential.contains(q0) {
        return Err(Error::Escape { time: 0.0 });
    }
    let (steps, h) = step_plan(dt, duration)?;
    let mut q = q0.to_vec();
    let mut p = p0.to_vec();
    let mut tangents = identity_tangents(d);
    let mut times = Vec::with_capacity(steps + 1);
    let mut positions = Vec::with_capacity((steps + 1) * d);
    let mut momenta = Vec::with_capacity((steps + 1) * d);
    times.push(0.0);
    positions.extend_from_slice(&q);
    momenta.extend_from_slice(&p);
    let mut stepper = Stepper::new(potential, mass, h, &q);
    for s in 1..=steps {
        stepper.step(&mut q, &mut p, &mut tangents);
        let t = s as f64 * h;
        if !potential.contains(&q) {
            return Err(Error::Escape { time: t });
        }
        times.push(t);
        positions.extend_from_slice(&q);
        momenta.extend_from_slice(&p);
    }
    Ok(Trajectory { dim: d, mass, times, positions, momenta, monodromy: tangents_to_monodromy(&tangents, d) })
}

/// Compensated sum.
fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Initial phase-space data for an ensemble.
#[derive(Clone, Debug)]
pub struct PhasePoints {
    pub dim: usize,
    pub mass: f64,
    /// count × d
    pub positions: Vec<f64>,
    /// count × d
    pub momenta: Vec<f64>,
    pub weights: Vec<f64>,
    /// ∂p0/∂q0 of the initial Lagrangian manifold, count × d × d; zeros when `None`.
    pub slopes: Option<Vec<f64>>,
    /// Density the member was drawn from, at its starting point.
    pub source_density: Option<Vec<f64>>,
    pub time: f64,
}

/// Weighted trajectories recorded at shared snapshot times.
///
/// Storage is snapshot-major: `positions[s]` holds every member's position at
/// `times[s]`. Members that leave the potential's domain are frozen and
/// flagged rather than removed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryEnsemble {
    dim: usize,
    mass: f64,
    weights: Vec<f64>,
    times: Vec<f64>,
    positions: Vec<Vec<f64>>,
    momenta: Vec<Vec<f64>>,
    jacobians: Vec<Vec<f64>>,
    tangents: Vec<f64>,
    escape_times: Vec<Option<f64>>,
    caustic_times: Vec<Option<f64>>,
    source_density: Vec<f64>,
}

impl TrajectoryEnsemble {
    pub fn new(points: PhasePoints) -> Result<Self> {
        let PhasePoints { dim, mass, positions, momenta, weights, slopes, source_density, time } = points;
        let count = weights.len();
        if count == 0 {
            return Err(Error::contract("an ensemble needs at least one member"));
        }
        if dim == 0 || positions.len() != count * dim || momenta.len() != count * dim {
            return Err(Error::contract("phase-point arrays do not match count × dim"));
        }
        if !(mass > 0.0) {
            return Err(Error::contract(format!("mass must be positive, got {mass}")));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::contract("member weights must be non-negative"));
        }
        let total = neumaier_sum(weights.iter().copied());
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::contract(format!("member weights sum to {total}, not 1")));
        }
        let slopes = slopes.unwrap_or_else(|| vec![0.0; count * dim * dim]);
        if slopes.len() != count * dim * dim {
            return Err(Error::contract("slope array does not match count × d × d"));
        }
        let source_density = source_density.unwrap_or_else(|| vec![f64::NAN; count]);
        if source_density.len() != count {
            return Err(Error::contract("source density array does not match count"));
        }
        // Tangent columns start at (δq, δp) = (e_c, ∂p0/∂q0 · e_c).
        let mut tangents = vec![0.0; count * 2 * dim * dim];
        for m in 0..count {
            let t = &mut tangents[m * 2 * dim * dim..(m + 1) * 2 * dim * dim];
            for c in 0..dim {
                t[2 * dim * c + c] = 1.0;
                for r in 0..dim {
                    t[2 * dim * c + dim + r] = slopes[m * dim * dim + r * dim + c];
                }
            }
        }
        Ok(TrajectoryEnsemble {
            dim,
            mass,
            weights,
            times: vec![time],
            positions: vec![positions],
            momenta: vec![momenta],
            jacobians: vec![vec![1.0; count]],
            tangents,
            escape_times: vec![None; count],
            caustic_times: vec![None; count],
            source_density,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("at least one snapshot")
    }

    pub fn positions(&self, snapshot: usize) -> &[f64] {
        &self.positions[snapshot]
    }

    pub fn momenta(&self, snapshot: usize) -> &[f64] {
        &self.momenta[snapshot]
    }

    /// |det ∂q(t)/∂q(0)| per member at a snapshot.
    pub fn jacobians(&self, snapshot: usize) -> &[f64] {
        &self.jacobians[snapshot]
    }

    pub fn escape_times(&self) -> &[Option<f64>] {
        &self.escape_times
    }

    pub fn caustic_times(&self) -> &[Option<f64>] {
        &self.caustic_times
    }

    pub fn escaped_count(&self) -> usize {
        self.escape_times.iter().filter(|e| e.is_some()).count()
    }

    pub fn source_density(&self) -> &[f64] {
        &self.source_density
    }

    /// Snapshot index recorded at time `t`.
    pub fn snapshot_at(&self, t: f64) -> Result<usize> {
        let tol = 1e-9 * t.abs().max(1.0);
        self.times.iter().position(|s| (s - t).abs() <= tol).ok_or_else(|| {
            Error::contract(format!("time {t} is not a recorded snapshot (recorded: {:?})", self.times))
        })
    }

    /// The recorded path of member `i`.
    pub fn trajectory(&self, i: usize) -> Trajectory {
        let d = self.dim;
        Trajectory {
            dim: d,
            mass: self.mass,
            times: self.times.clone(),
            positions: self.positions.iter().flat_map(|s| s[i * d..(i + 1) * d].to_vec()).collect(),
            momenta: self.momenta.iter().flat_map(|s| s[i * d..(i + 1) * d].to_vec()).collect(),
            monodromy: Vec::new(),
        }
    }

    /// Density carried by each member at a snapshot: its source density over J.
    pub fn van_vleck_density(&self, snapshot: usize) -> Vec<f64> {
        self.source_density.iter().zip(&self.jacobians[snapshot]).map(|(rho, j)| rho / j).collect()
    }

    /// Keeps only the latest snapshot.
    pub fn latest_only(mut self) -> Self {
        let keep = self.times.len() - 1;
        self.times = vec![self.times[keep]];
        self.positions = vec![self.positions.swap_remove(keep)];
        self.momenta = vec![self.momenta.swap_remove(keep)];
        self.jacobians = vec![self.jacobians.swap_remove(keep)];
        self
    }

    /// Fresh ensemble starting from the final state with momenta reversed.
    pub fn time_reversed(&self) -> Result<Self> {
        let last = self.times.len() - 1;
        let d = self.dim;
        let count = self.len();
        let mut slopes = vec![0.0; count * d * d];
        for m in 0..count {
            let t = &self.tangents[m * 2 * d * d..(m + 1) * 2 * d * d];
            // -P Q^{-1} is the reversed manifold's slope; only defined away from caustics.
            if d == 1 && t[0] != 0.0 {
                slopes[m] = -t[1] / t[0];
            }
        }
        TrajectoryEnsemble::new(PhasePoints {
            dim: d,
            mass: self.mass,
            positions: self.positions[last].clone(),
            momenta: self.momenta[last].iter().map(|p| -p).collect(),
            weights: self.weights.clone(),
            slopes: Some(slopes),
            source_density: None,
            time: 0.0,
        })
    }

    /// Flat binary table, all little-endian f64:
    /// `d, count, n_times, mass`, then `times`, `weights`, escape times
    /// (NaN when the member stayed inside), then per snapshot
    /// `positions (count·d)`, `momenta (count·d)`, `jacobians (count)`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let mut put = |x: f64| w.write_all(&x.to_le_bytes());
        put(self.dim as f64)?;
        put(self.len() as f64)?;
        put(self.times.len() as f64)?;
        put(self.mass)?;
        for &t in &self.times {
            put(t)?;
        }
        for &x in &self.weights {
            put(x)?;
        }
        for e in &self.escape_times {
            put(e.unwrap_or(f64::NAN))?;
        }
        for s in 0..self.times.len() {
            for &x in self.positions[s].iter().chain(&self.momenta[s]).chain(&self.jacobians[s]) {
                put(x)?;
            }
        }
        Ok(())
    }

    /// Reads the table written by [`TrajectoryEnsemble::write_binary`]. Tangent state is not
    /// stored, so the result can be binned but not propagated further.
    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut next = || -> Result<f64> {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            Ok(f64::from_le_bytes(buf))
        };
        let as_count = |x: f64| -> Result<usize> {
            if x >= 0.0 && x.fract() == 0.0 && x < 1e12 {
                Ok(x as usize)
            } else {
                Err(Error::Construction(format!("invalid count {x} in ensemble table")))
            }
        };
        let dim = as_count(next()?)?;
        let count = as_count(next()?)?;
        let n_times = as_count(next()?)?;
        let mass = next()?;
        if dim == 0 || count == 0 || n_times == 0 {
            return Err(Error::Construction("empty ensemble table".into()));
        }
        let mut read_vec = |n: usize| -> Result<Vec<f64>> { (0..n).map(|_| next()).collect() };
        let times = read_vec(n_times)?;
        let weights = read_vec(count)?;
        let escape_times = read_vec(count)?.into_iter().map(|e| (!e.is_nan()).then_some(e)).collect();
        let mut positions = Vec::with_capacity(n_times);
        let mut momenta = Vec::with_capacity(n_times);
        let mut jacobians = Vec::with_capacity(n_times);
        for _ in 0..n_times {
            positions.push(read_vec(count * dim)?);
            momenta.push(read_vec(count * dim)?);
            jacobians.push(read_vec(count)?);
        }
        Ok(TrajectoryEnsemble {
            dim,
            mass,
            weights,
            times,
            positions,
            momenta,
            jacobians,
            tangents: vec![f64::NAN; count * 2 * dim * dim],
            escape_times,
            caustic_times: vec![None; count],
            source_density: vec![f64::NAN; count],
        })
    }
}

/// Per-member mutable state during propagation.
struct MemberRun<'a> {
    q: Vec<f64>,
    p: Vec<f64>,
    tangents: &'a mut [f64],
    escape: &'a mut Option<f64>,
    caustic: &'a mut Option<f64>,
}

/// Propagates every member under `potential`, appending a snapshot every
/// `record_every` steps and at the end. Weights are untouched.
pub fn propagate_ensemble(
    mut ensemble: TrajectoryEnsemble,
    potential: &PotentialField,
    dt: f64,
    duration: f64,
    record_every: usize,
) -> Result<TrajectoryEnsemble> {
    let d = ensemble.dim;
    if potential.dim != d {
        return Err(Error::contract("potential and ensemble dimensions differ"));
    }
    let (steps, h) = step_plan(dt, duration)?;
    let record_every = record_every.max(1).min(steps);
    let record_steps: Vec<usize> = (1..=steps).filter(|s| s % record_every == 0 || *s == steps).collect();
    let t0 = ensemble.final_time();
    let last = ensemble.times.len() - 1;
    let count = ensemble.len();
    let n_rec = record_steps.len();
    let mass = ensemble.mass;
    // Per member, per record: q (d), p (d), J.
    let stride = n_rec * (2 * d + 1);
    let mut records = vec![0.0; count * stride];
    let start_q = &ensemble.positions[last];
    let start_p = &ensemble.momenta[last];
    let tangent_len = 2 * d * d;
    ensemble
        .tangents
        .par_chunks_mut(tangent_len)
        .zip(ensemble.escape_times.par_iter_mut())
        .zip(ensemble.caustic_times.par_iter_mut())
        .zip(records.par_chunks_mut(stride))
        .enumerate()
        .for_each(|(m, (((tangents, escape), caustic), out))| {
            let run = MemberRun {
                q: start_q[m * d..(m + 1) * d].to_vec(),
                p: start_p[m * d..(m + 1) * d].to_vec(),
                tangents,
                escape,
                caustic,
            };
            advance_member(run, potential, mass, h, t0, &record_steps, out);
        });
    for (r, &s) in record_steps.iter().enumerate() {
        let mut qs = Vec::with_capacity(count * d);
        let mut ps = Vec::with_capacity(count * d);
        let mut js = Vec::with_capacity(count);
        for m in 0..count {
            let rec = &records[m * stride + r * (2 * d + 1)..m * stride + (r + 1) * (2 * d + 1)];
            qs.extend_from_slice(&rec[..d]);
            ps.extend_from_slice(&rec[d..2 * d]);
            js.push(rec[2 * d]);
        }
        ensemble.times.push(t0 + s as f64 * h);
        ensemble.positions.push(qs);
        ensemble.momenta.push(ps);
        ensemble.jacobians.push(js);
    }
    Ok(ensemble)
}

fn advance_member(
    mut run: MemberRun<'_>,
    potential: &PotentialField,
    mass: f64,
    h: f64,
    t0: f64,
    record_steps: &[usize],
    out: &mut [f64],
) {
    let d = run.q.len();
    let mut q_block = vec![0.0; d * d];
    let extract_q = |tangents: &[f64], block: &mut [f64]| {
        for c in 0..d {
            for r in 0..d {
                block[r * d + c] = tangents[2 * d * c + r];
            }
        }
    };
    extract_q(run.tangents, &mut q_block);
    let mut prev_det = determinant(&q_block, d);
    let mut stepper = Stepper::new(potential, mass, h, &run.q);
    let mut next_record = 0;
    let final_step = *record_steps.last().unwrap_or(&0);
    let rec_len = 2 * d + 1;
    for s in 1..=final_step {
        if run.escape.is_none() {
            stepper.step(&mut run.q, &mut run.p, run.tangents);
            let t = t0 + s as f64 * h;
            extract_q(run.tangents, &mut q_block);
            let det = determinant(&q_block, d);
            if run.caustic.is_none() && (det.abs() < CAUSTIC_FLOOR || det.signum() != prev_det.signum()) {
                *run.caustic = Some(t);
            }
            prev_det = det;
            if !potential.contains(&run.q) {
                *run.escape = Some(t);
            }
        }
        if record_steps[next_record] == s {
            let rec = &mut out[next_record * rec_len..(next_record + 1) * rec_len];
            rec[..d].copy_from_slice(&run.q);
            rec[d..2 * d].copy_from_slice(&run.p);
            rec[2 * d] = prev_det.abs();
            next_record += 1;
        }
    }
}

/// w(q, t) on a grid: mass per cell divided by cell volume.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityField {
    axes: Vec<GridSpec>,
    values: Vec<f64>,
    time: f64,
}

impl DensityField {
    /// Row-major values over `axes` (last axis fastest).
    pub fn new(axes: Vec<GridSpec>, values: Vec<f64>, time: f64) -> Result<Self> {
        let cells: usize = axes.iter().map(|a| a.points()).product();
        if axes.is_empty() || values.len() != cells {
            return Err(Error::contract("density values do not match the grid"));
        }
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::contract("densities must be non-negative"));
        }
        Ok(DensityField { axes, values, time })
    }

    pub fn axes(&self) -> &[GridSpec] {
        &self.axes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(|a| a.spacing()).product()
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_volume()
    }

    /// Same grid, every value multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<DensityField> {
        DensityField::new(self.axes.clone(), self.values.iter().map(|v| v * factor).collect(), self.time)
    }

    /// Pointwise sum over identical grids.
    pub fn add(&self, other: &DensityField) -> Result<DensityField> {
        if self.axes != other.axes {
            return Err(Error::contract("cannot add densities on different grids"));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        DensityField::new(self.axes.clone(), values, self.time)
    }

    /// Cell-averages over blocks of `factor` cells per axis, conserving the integral.
    pub fn coarsen(&self, factor: usize) -> Result<DensityField> {
        let axes = self.axes.iter().map(|a| a.coarsened(factor)).collect::<Result<Vec<_>>>()?;
        let fine: Vec<usize> = self.axes.iter().map(|a| a.points()).collect();
        let coarse: Vec<usize> = axes.iter().map(|a| a.points()).collect();
        let mut values = vec![0.0; coarse.iter().product()];
        let mut idx = vec![0usize; fine.len()];
        for v in &self.values {
            let mut flat = 0;
            for (k, i) in idx.iter().enumerate() {
                flat = flat * coarse[k] + i / factor;
            }
            values[flat] += v;
            for k in (0..idx.len()).rev() {
                idx[k] += 1;
                if idx[k] < fine[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        let scale = (factor as f64).powi(fine.len() as i32);
        values.iter_mut().for_each(|v| *v /= scale);
        DensityField::new(axes, values, self.time)
    }

    /// CSV with one column per axis (cell centers) and a final `value` column.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.axes.len()).map(|k| format!("q{k}")).chain(["value".into()]).collect();
        writeln!(w, "{}", header.join(","))?;
        let sizes: Vec<usize> = self.axes.iter().map(|a| a.points()).collect();
        let mut idx = vec![0usize; sizes.len()];
        for v in &self.values {
            let coords: Vec<String> =
                idx.iter().zip(&self.axes).map(|(i, a)| format!("{:e}", a.coordinate(*i))).collect();
            writeln!(w, "{},{:e}", coords.join(","), v)?;
            for k in (0..idx.len()).rev() {
                idx[k] += 1;
                if idx[k] < sizes[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Ok(())
    }
}

/// Bins the weights of members still inside the domain at time `t`.
pub fn bin_density(ensemble: &TrajectoryEnsemble, t: f64, axes: &[GridSpec]) -> Result<DensityField> {
    if axes.len() != ensemble.dim {
        return Err(Error::contract("binning grid dimension differs from the ensemble's"));
    }
    let s = ensemble.snapshot_at(t)?;
    let d = ensemble.dim;
    let sizes: Vec<usize> = axes.iter().map(|a| a.points()).collect();
    let mut mass = vec![0.0; sizes.iter().product()];
    let mut outside = 0.0;
    let positions = &ensemble.positions[s];
    for m in 0..ensemble.len() {
        if ensemble.escape_times[m].is_some_and(|e| e <= ensemble.times[s]) {
            continue;
        }
        let w = ensemble.weights[m];
        let mut flat = 0;
        let mut inside = true;
        for k in 0..d {
            match axes[k].cell_of(positions[m * d + k]) {
                Some(i) => flat = flat * sizes[k] + i,
                None => {
                    inside = false;
                    break;
                }
            }
        }
        if inside {
            mass[flat] += w;
        } else {
            outside += w;
        }
    }
    if outside > 0.0 {
        return Err(Error::Coverage { out_of_range_mass: outside });
    }
    let volume: f64 = axes.iter().map(|a| a.spacing()).product();
    mass.iter_mut().for_each(|v| *v /= volume);
    DensityField::new(axes.to_vec(), mass, ensemble.times[s])
}

/// How members' momenta are drawn given their sampled positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentumSampling {
    /// p = ħ ∂(arg Ψ)/∂q at the member's position.
    PhaseGradient,
    /// Phase gradient plus a Gaussian spread of ħ/(2σ_q), σ_q the width of |Ψ|².
    /// For Gaussian packets (chirped or not) this samples the Wigner function exactly.
    GaussianWigner,
}

fn interpolate(grid: &GridSpec, values: &[f64], q: f64) -> f64 {
    let x = (q - grid.lower()) / grid.spacing();
    let i = x.floor();
    let frac = x - i;
    let n = grid.points() as isize;
    let at = |k: isize| values[k.rem_euclid(n) as usize];
    at(i as isize) * (1.0 - frac) + at(i as isize + 1) * frac
}

/// Ensemble with positions drawn from |Ψ|² and momenta from the phase gradient.
pub fn sample_ensemble_from_wavefunction(psi: &GridWaveFunction, count: usize, seed: u64) -> Result<TrajectoryEnsemble> {
    sample_ensemble(psi, count, seed, MomentumSampling::PhaseGradient)
}

/// Positions by inverse-CDF sampling of |Ψ|² (piecewise constant over cells),
/// momenta per `sampling`; equal weights 1/count.
pub fn sample_ensemble(
    psi: &GridWaveFunction,
    count: usize,
    seed: u64,
    sampling: MomentumSampling,
) -> Result<TrajectoryEnsemble> {
    if count == 0 {
        return Err(Error::domain("sample count must be positive"));
    }
    let norm = psi.norm();
    if !(norm > 0.0) {
        return Err(Error::domain("cannot sample from a wavefunction with zero norm"));
    }
    match crate::correspondence::validity_field(psi) {
        Ok(field) if field.valid_fraction() < 0.99 => log::warn!(
            "sampling an ensemble from a wavefunction that is WKB-valid on only {:.1}% of its norm",
            100.0 * field.valid_fraction()
        ),
        Err(e) => log::warn!("WKB validity could not be assessed before sampling: {e}"),
        _ => {}
    }
    let grid = *psi.grid();
    let dx = grid.spacing();
    let rho: Vec<f64> = psi.amplitudes().iter().map(|a| a.norm_sqr() / norm).collect();
    let mut cdf = Vec::with_capacity(rho.len());
    let mut acc = 0.0;
    for r in &rho {
        acc += r * dx;
        cdf.push(acc);
    }
    let total = acc;
    let momentum = psi.phase_gradient_momentum();
    let slope: Vec<f64> = (0..grid.points())
        .map(|i| {
            let n = grid.points();
            (momentum[(i + 1) % n] - momentum[(i + n - 1) % n]) / (2.0 * dx)
        })
        .collect();
    let spread = match sampling {
        MomentumSampling::PhaseGradient => 0.0,
        MomentumSampling::GaussianWigner => psi.hbar() / (2.0 * psi.position_variance().sqrt()),
    };
    let mut rng = crate::rng::seeded_rng(seed);
    let mut positions = Vec::with_capacity(count);
    let mut momenta = Vec::with_capacity(count);
    let mut slopes = Vec::with_capacity(count);
    let mut source = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = rng.random::<f64>() * total;
        let cell = cdf.partition_point(|c| *c <= u).min(grid.points() - 1);
        let offset: f64 = rng.random();
        let q = grid.coordinate(cell) + (offset - 0.5) * dx;
        let mut p = interpolate(&grid, &momentum, q);
        if spread > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            p += spread * z;
        }
        positions.push(q);
        momenta.push(p);
        slopes.push(interpolate(&grid, &slope, q));
        source.push(interpolate(&grid, &rho, q));
    }
    TrajectoryEnsemble::new(PhasePoints {
        dim: 1,
        mass: psi.mass(),
        positions,
        momenta,
        weights: vec![1.0 / count as f64; count],
        slopes: Some(slopes),
        source_density: Some(source),
        time: psi.time(),
    })
}
