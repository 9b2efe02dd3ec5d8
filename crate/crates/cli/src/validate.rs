//! Static checks on a parsed scenario. Everything `run` would refuse as a
//! precondition is caught here, so a clean report means the run can start.

use std::fmt;

use num_complex::Complex64;
use qclimit::classical::PotentialField;
use qclimit::hilbert::{Direction, Spin, SpinState};
use qclimit::quantum::{GridSpec, PHASE_WRAP_LIMIT};
use qclimit::sterngerlach::{Apparatus, Beam, Keep, Traversal};

use crate::spec::{CascadeSpec, EprSpec, Geometry, InternalSpec, Scenario, ScenarioFile, SgRunSpec, SweepSpec, SCHEMA_VERSION};

/// Packets must fit inside this many widths of their grid or field-free zone.
const WIDTHS: f64 = 6.0;
/// A packet must span at least this many grid cells.
const CELLS_PER_WIDTH: f64 = 4.0;
const MIN_TRIALS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub rule: &'static str,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.field.as_str() {
            "" => write!(f, "[{}] {}", self.rule, self.message),
            field => write!(f, "[{}] {field}: {}", self.rule, self.message),
        }
    }
}

#[derive(Default)]
struct Report(Vec<Violation>);

impl Report {
    fn push(&mut self, rule: &'static str, field: impl Into<String>, message: impl Into<String>) {
        self.0.push(Violation { rule, field: field.into(), message: message.into() });
    }

    fn require(&mut self, ok: bool, rule: &'static str, field: &str, message: impl FnOnce() -> String) {
        if !ok {
            self.push(rule, field, message());
        }
    }
}

pub fn check(file: &ScenarioFile) -> Vec<Violation> {
    let mut r = Report::default();
    r.require(file.schema_version == SCHEMA_VERSION, "schema", "schema_version", || {
        format!("unsupported version {}, expected {SCHEMA_VERSION}", file.schema_version)
    });
    match &file.scenario {
        Scenario::CorrespondenceSweep(s) => sweep(&mut r, s),
        Scenario::SgRun(s) => sg_run(&mut r, s),
        Scenario::Cascade(s) => cascade(&mut r, s),
        Scenario::EprChsh(s) => epr(&mut r, s),
    }
    r.0
}

pub fn internal_state(spec: &InternalSpec) -> Result<SpinState, String> {
    let spin = spec.spin;
    match (spec.sigma, &spec.amplitudes) {
        (Some(sigma), None) => SpinState::basis(spin, spec.axis.0, sigma).map_err(|e| e.to_string()),
        (None, Some(a)) => {
            let amps = a.iter().map(|z| Complex64::new(z[0], z[1])).collect();
            SpinState::normalized(spin, spec.axis.0, amps).map_err(|e| e.to_string())
        }
        _ => Err("give exactly one of `sigma` and `amplitudes`".into()),
    }
}

pub fn apparatus(g: &Geometry, axis: Direction) -> Result<Apparatus, String> {
    Apparatus::new(axis, (g.region[0], g.region[1]), g.ramp, g.gradient).map_err(|e| e.to_string())
}

fn positive(r: &mut Report, field: &str, x: f64) {
    r.require(x > 0.0 && x.is_finite(), "domain", field, || format!("must be positive and finite, got {x}"));
}

/// Packet of width σ centred at q₀ with momentum p₀ on `grid`.
fn packet(r: &mut Report, field: &str, grid: &GridSpec, center: f64, momentum: f64, width: f64, hbar: f64) {
    let dq = grid.spacing();
    r.require(width >= CELLS_PER_WIDTH * dq, "resolution", &format!("{field}.width"), || {
        format!("packet width {width} is below {CELLS_PER_WIDTH}Δq = {}", CELLS_PER_WIDTH * dq)
    });
    // momentum content up to |p₀| + 4·ħ/(2σ) must stay below the grid's Nyquist momentum
    let p_top = momentum.abs() + 2.0 * hbar / width;
    let nyquist = std::f64::consts::PI * hbar / dq;
    r.require(p_top < nyquist, "resolution", &format!("{field}.momentum"), || {
        format!("momentum content up to {p_top:.4} exceeds the grid limit πħ/Δq = {nyquist:.4}")
    });
    r.require(
        center - WIDTHS * width >= grid.lower() && center + WIDTHS * width <= grid.upper(),
        "margin",
        &format!("{field}.center"),
        || format!("packet ±{WIDTHS}σ around {center} leaves the grid [{}, {}]", grid.lower(), grid.upper()),
    );
}

fn beam(r: &mut Report, field: &str, b: &Beam) {
    positive(r, &format!("{field}.hbar"), b.hbar);
    positive(r, &format!("{field}.mass"), b.mass);
    positive(r, &format!("{field}.width"), b.width);
    if b.hbar > 0.0 && b.width > 0.0 {
        packet(r, field, &b.grid, b.center, b.momentum, b.width, b.hbar);
    }
}

fn traversal(r: &mut Report, field: &str, t: &Traversal) {
    r.require(t.dt > 0.0 && t.duration >= t.dt, "domain", &format!("{field}.dt"), || {
        format!("need 0 < dt ≤ duration, got dt = {}, duration = {}", t.dt, t.duration)
    });
}

/// Field geometry for a beam: the region sits inside the grid with room to
/// spare, the beam starts outside it, and one step stays under the phase-wrap limit.
fn geometry(r: &mut Report, field: &str, g: &Geometry, b: &Beam, t: &Traversal, spin: Option<Spin>) {
    if let Err(e) = apparatus(g, Direction::z()) {
        r.push("domain", field, e);
        return;
    }
    let [qa, qb] = g.region;
    let room = WIDTHS * b.width;
    r.require(qa - room >= b.grid.lower() && qb + room <= b.grid.upper(), "margin", &format!("{field}.region"), || {
        format!("field region [{qa}, {qb}] needs {room} of field-free grid on each side")
    });
    let (lo, hi) = (b.center - room, b.center + room);
    r.require(hi <= qa || lo >= qb, "margin", &format!("{field}.region"), || {
        format!("the incident packet [{lo}, {hi}] starts inside the field region")
    });
    if let Some(spin) = spin {
        if b.hbar > 0.0 {
            let vmax = spin.value() * g.gradient.abs();
            let phase = vmax * t.dt / b.hbar;
            r.require(phase < PHASE_WRAP_LIMIT, "phase-wrap", &format!("{field}.gradient"), || {
                format!("max|V|·dt/ħ = {phase:.3} must stay below {PHASE_WRAP_LIMIT}")
            });
        }
    }
}

fn state(r: &mut Report, field: &str, s: &InternalSpec) -> Option<Spin> {
    match internal_state(s) {
        Ok(chi) => Some(chi.spin()),
        Err(e) => {
            r.push("domain", field, e);
            None
        }
    }
}

fn sweep(r: &mut Report, s: &SweepSpec) {
    r.require(!s.hbars.is_empty(), "domain", "scenario.hbars", || "at least one ħ is needed".into());
    for (k, h) in s.hbars.iter().enumerate() {
        positive(r, &format!("scenario.hbars[{k}]"), *h);
    }
    r.require(s.hbars.windows(2).all(|w| w[1] < w[0]), "domain", "scenario.hbars", || "ħ values must be strictly descending".into());
    let c = &s.setup;
    let f = "scenario.setup";
    positive(r, &format!("{f}.mass"), c.mass);
    positive(r, &format!("{f}.width"), c.width);
    positive(r, &format!("{f}.final_time"), c.final_time);
    positive(r, &format!("{f}.quantum_dt"), c.quantum_dt);
    positive(r, &format!("{f}.classical_dt"), c.classical_dt);
    positive(r, &format!("{f}.kappa"), c.kappa);
    r.require(c.members > 0, "domain", &format!("{f}.members"), || "need at least one member".into());
    r.require(c.snapshots > 0, "domain", &format!("{f}.snapshots"), || "need at least one snapshot".into());
    if let Err(e) = c.comparison_grid() {
        r.push("resolution", format!("{f}.coarsen"), e.to_string());
    }
    if c.width > 0.0 {
        for h in s.hbars.iter().filter(|h| **h > 0.0) {
            packet(r, f, &c.grid, c.center, c.momentum, c.width, *h);
        }
    }
    if let Err(e) = c.potential.build(&c.grid) {
        r.push("domain", format!("{f}.potential"), e.to_string());
    }
    if c.final_time > 0.0 && c.snapshots > 0 && c.classical_dt > 0.0 {
        let per = c.final_time / c.snapshots as f64 / c.classical_dt;
        r.require((per - per.round()).abs() < 1e-9 * per.max(1.0) && per.round() >= 1.0, "step", &format!("{f}.classical_dt"), || {
            format!("classical step must divide the snapshot interval {}", c.final_time / c.snapshots as f64)
        });
    }
    // the quantum step is lowered automatically, so only a grossly oversized potential is refused
    if let Ok(v) = c.potential.build(&c.grid) {
        phase_floor(r, &format!("{f}.quantum_dt"), &v, &c.grid, s.hbars.last().copied().unwrap_or(1.0), c.final_time);
    }
}

/// Refuses sweeps whose automatic step reduction would need more than 10⁷ steps.
fn phase_floor(r: &mut Report, field: &str, v: &PotentialField, grid: &GridSpec, hbar: f64, t: f64) {
    let vmax = v.max_abs_on(grid);
    if vmax > 0.0 && hbar > 0.0 {
        let steps = t * vmax / (0.9 * PHASE_WRAP_LIMIT * hbar);
        r.require(steps <= 1e7, "phase-wrap", field, || {
            format!("respecting max|V|·dt/ħ < {PHASE_WRAP_LIMIT} would take {steps:.3e} steps at ħ = {hbar}")
        });
    }
}

fn sg_run(r: &mut Report, s: &SgRunSpec) {
    beam(r, "scenario.beam", &s.beam);
    traversal(r, "scenario.traversal", &s.traversal);
    let spin = state(r, "scenario.state", &s.state);
    geometry(r, "scenario.apparatus", &s.apparatus.geometry(), &s.beam, &s.traversal, spin);
    if let Some(sc) = &s.semiclassical {
        r.require(sc.members > 0, "domain", "scenario.semiclassical.members", || "need at least one member".into());
        if let Err(e) = s.beam.grid.coarsened(sc.coarsen) {
            r.push("resolution", "scenario.semiclassical.coarsen", e.to_string());
        }
    }
}

fn cascade(r: &mut Report, s: &CascadeSpec) {
    beam(r, "scenario.beam", &s.beam);
    traversal(r, "scenario.traversal", &s.traversal);
    let spin = state(r, "scenario.state", &s.state);
    geometry(r, "scenario.apparatus", &s.apparatus, &s.beam, &s.traversal, spin);
    r.require(!s.stages.is_empty(), "domain", "scenario.stages", || "a cascade needs at least one stage".into());
    for (k, st) in s.stages.iter().enumerate() {
        let field = format!("scenario.stages[{k}].keep");
        match st.keep.0 {
            Keep::All => r.require(k + 1 == s.stages.len(), "domain", &field, || "only the last stage may keep all branches".into()),
            Keep::Sigma(h) => {
                if let Some(spin) = spin {
                    r.require(spin.index_of(h).is_ok(), "domain", &field, || format!("{h} is not a projection of spin {spin}"));
                }
            }
        }
    }
}

fn epr(r: &mut Report, s: &EprSpec) {
    r.require(s.trials == 0 || s.trials >= MIN_TRIALS, "domain", "scenario.trials", || {
        format!("sampling needs at least {MIN_TRIALS} pairs per setting, got {}", s.trials)
    });
    if let Some(f) = &s.fragments {
        beam(r, "scenario.fragments.beam", &f.beam);
        traversal(r, "scenario.fragments.traversal", &f.traversal);
        geometry(r, "scenario.fragments.apparatus", &f.apparatus, &f.beam, &f.traversal, Some(Spin::HALF));
        match f.beam.mirrored() {
            Ok(m) => {
                let g = Geometry { region: [-f.apparatus.region[1], -f.apparatus.region[0]], ..f.apparatus };
                let mut mirror = Report::default();
                geometry(&mut mirror, "scenario.fragments.apparatus", &g, &m, &f.traversal, None);
                r.0.extend(mirror.0.into_iter().map(|v| Violation { message: format!("fragment 1: {}", v.message), ..v }));
            }
            Err(e) => r.push("domain", "scenario.fragments.beam.grid", e.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::parse;

    fn sg(dt: f64, width: f64) -> String {
        format!(
            r#"{{"schema_version": 1, "seed": 1, "scenario": {{
                "kind": "sg-run",
                "beam": {{"grid": {{"lower": -12, "upper": 12, "points": 2048}}, "hbar": 0.02, "mass": 1,
                          "center": -4, "momentum": 1, "width": {width}}},
                "state": {{"spin": "1/2", "axis": {{"theta_deg": 0}}, "sigma": "1/2"}},
                "apparatus": {{"orientation": {{"theta_deg": 90}}, "region": [-2.5, 2.5], "ramp": 2, "gradient": 4}},
                "traversal": {{"dt": {dt}, "duration": 8}}
            }}}}"#
        )
    }

    #[test]
    fn clean_spec_has_no_violations() {
        assert_eq!(check(&parse(&sg(0.002, 0.25)).unwrap()), vec![]);
    }

    #[test]
    fn every_violation_is_listed() {
        let v = check(&parse(&sg(0.01, 0.04)).unwrap());
        let rules: Vec<&str> = v.iter().map(|v| v.rule).collect();
        assert!(rules.contains(&"resolution"), "{v:?}");
        assert!(rules.contains(&"phase-wrap"), "{v:?}");
    }

    #[test]
    fn beam_inside_the_field_breaks_the_margin_rule() {
        let v = check(&parse(&sg(0.002, 0.25).replace("\"center\": -4", "\"center\": -1")).unwrap());
        assert!(v.iter().any(|v| v.rule == "margin"), "{v:?}");
    }
}
