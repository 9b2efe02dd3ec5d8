//! Scenario execution and output files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use qclimit::classical::{sample_ensemble, DensityField};
use qclimit::correspondence::{compare, hbar_sweep, SweepRow};
use qclimit::epr::{chsh, opposed_fragments, sampled_chsh, singlet_pair, ChshResult, ChshSettings, FragmentRun};
use qclimit::hilbert::{Direction, HalfInt, Spin};
use qclimit::quantum::{density, GridWaveFunction, SpinorWaveFunction};
use qclimit::rng::derive_seed;
use qclimit::sterngerlach::{
    cascade_analytic, cascade_exact, cascade_sampled, run_apparatus_exact, run_apparatus_semiclassical, Apparatus, CascadeReport,
    Checkpoint, SpecimenRecord, Stage,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::spec::{CascadeSpec, EprSpec, Scenario, ScenarioFile, SgRunSpec, SweepSpec};
use crate::validate::{apparatus, internal_state};

/// Why a run stopped; each kind has its own exit status.
#[derive(Debug)]
pub enum Failure {
    Schema(String),
    Numerical(String),
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Schema(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Schema(m) => write!(f, "schema error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical error: {m}"),
            Failure::Io(m) => write!(f, "I/O error: {m}"),
        }
    }
}

impl From<qclimit::Error> for Failure {
    fn from(e: qclimit::Error) -> Self {
        match e {
            qclimit::Error::Io(e) => Failure::Io(e.to_string()),
            e => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

pub struct Options {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub timings: bool,
}

struct Outputs {
    dir: PathBuf,
}

impl Outputs {
    fn create(&self, name: &str) -> Result<BufWriter<File>, Failure> {
        let path = self.dir.join(name);
        File::create(&path).map(BufWriter::new).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), Failure> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| Failure::Io(e.to_string()))?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

/// Runs a validated scenario and returns the one-line summary.
pub fn run(file: &ScenarioFile, opts: &Options) -> Result<String, Failure> {
    let seed = opts.seed.unwrap_or(file.seed);
    let dir = opts.out_dir.clone().or_else(|| file.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    let out = Outputs { dir };
    match &file.scenario {
        Scenario::CorrespondenceSweep(s) => sweep(s, seed, opts.timings, &out),
        Scenario::SgRun(s) => sg_run(s, seed, &out),
        Scenario::Cascade(s) => cascade(s, seed, &out),
        Scenario::EprChsh(s) => epr(s, seed, &out),
    }
}

fn schema(e: String) -> Failure {
    Failure::Schema(e)
}

fn list(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

#[derive(Serialize)]
struct SweepRowOut<'a> {
    hbar: f64,
    l1_distance: f64,
    validity_fraction: f64,
    wall_time_seconds: Option<f64>,
    flag: &'a Option<String>,
}

fn sweep(s: &SweepSpec, seed: u64, timings: bool, out: &Outputs) -> Result<String, Failure> {
    let report = hbar_sweep(&s.setup, &s.hbars, seed)?;
    let mut w = out.create("sweep.csv")?;
    report.write_csv(&mut w, timings)?;
    w.flush()?;
    let rows: Vec<SweepRowOut> = report
        .rows
        .iter()
        .map(|r: &SweepRow| SweepRowOut {
            hbar: r.hbar,
            l1_distance: r.l1_distance,
            validity_fraction: r.validity_fraction,
            wall_time_seconds: timings.then_some(r.wall_time_seconds),
            flag: &r.flag,
        })
        .collect();
    out.json("sweep.json", &serde_json::json!({ "seed": seed, "rows": rows }))?;
    let flagged = report.rows.iter().filter(|r| r.flag.is_some()).count();
    Ok(format!(
        "L1 = {} validity = {} over ħ = {:?} ({flagged} flagged)",
        list(&report.l1_column()),
        list(&report.validity_column()),
        s.hbars
    ))
}

#[derive(Serialize)]
struct BranchOut {
    sigma: HalfInt,
    fraction: f64,
    born_fraction: f64,
    mean_position: Option<f64>,
    mean_momentum: Option<f64>,
}

#[derive(Serialize)]
struct SpecimensOut<'a> {
    count: usize,
    seed: u64,
    expected: &'a [f64],
    empirical: &'a [f64],
    flagged: &'a [HalfInt],
}

#[derive(Serialize)]
struct SemiclassicalBranchOut {
    sigma: HalfInt,
    fraction: f64,
    /// L1 between the binned ensemble and the exact branch density, both unit-normalized.
    l1_vs_exact: Option<f64>,
}

#[derive(Serialize)]
struct SemiclassicalOut {
    members: usize,
    seed: u64,
    branches: Vec<SemiclassicalBranchOut>,
}

#[derive(Serialize)]
struct SgRunOut<'a> {
    seed: u64,
    spin: Spin,
    incident_axis: Direction,
    apparatus: &'a Apparatus,
    final_time: f64,
    branches: Vec<BranchOut>,
    entry_time: Option<f64>,
    exit_time: Option<f64>,
    separation_time: Option<f64>,
    max_norm_drift: f64,
    pre_separation_cross_residual: f64,
    post_separation_mixture_residual: Option<f64>,
    specimens: Option<SpecimensOut<'a>>,
    semiclassical: Option<SemiclassicalOut>,
    checkpoints: &'a [Checkpoint],
}

fn write_specimens(out: &Outputs, records: &[SpecimenRecord]) -> Result<(), Failure> {
    let mut w = out.create("specimens.csv")?;
    writeln!(w, "id,stage,sigma,seed")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.id(), r.stage(), r.sigma(), r.seed())?;
    }
    w.flush()?;
    Ok(())
}

fn write_spinor_density(out: &Outputs, state: &SpinorWaveFunction) -> Result<(), Failure> {
    let mut w = out.create("density.csv")?;
    write!(w, "q,total")?;
    for sigma in state.spin().projections() {
        write!(w, ",sigma={sigma}")?;
    }
    writeln!(w)?;
    let total = state.total_density();
    for (i, t) in total.values().iter().enumerate() {
        write!(w, "{},{}", state.grid().coordinate(i), t)?;
        for c in state.components() {
            write!(w, ",{}", c[i].norm_sqr())?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn write_branch_densities(out: &Outputs, name: &str, sigmas: &[HalfInt], fields: &[Option<&DensityField>]) -> Result<(), Failure> {
    let Some(grid) = fields.iter().flatten().next().map(|f| f.axes()[0]) else { return Ok(()) };
    let mut w = out.create(name)?;
    write!(w, "q")?;
    for s in sigmas {
        write!(w, ",sigma={s}")?;
    }
    writeln!(w)?;
    for i in 0..grid.points() {
        write!(w, "{}", grid.coordinate(i))?;
        for f in fields {
            match f {
                Some(f) => write!(w, ",{}", f.values()[i])?,
                None => write!(w, ",0")?,
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn sg_run(s: &SgRunSpec, seed: u64, out: &Outputs) -> Result<String, Failure> {
    let chi = internal_state(&s.state).map_err(schema)?;
    let app = apparatus(&s.apparatus.geometry(), s.apparatus.orientation.0).map_err(schema)?;
    let packet = s.beam.packet()?;
    let psi = SpinorWaveFunction::product(&packet, &chi);
    let run = run_apparatus_exact(&psi, &app, None, &s.traversal)?;
    let born = chi.populations_along(&app.orientation());
    let branches: Vec<BranchOut> = run
        .branches
        .branches()
        .iter()
        .zip(&born)
        .map(|(b, p)| BranchOut {
            sigma: b.sigma(),
            fraction: b.fraction(),
            born_fraction: *p,
            mean_position: b.wave().map(GridWaveFunction::mean_position),
            mean_momentum: b.wave().map(GridWaveFunction::mean_momentum),
        })
        .collect();

    let specimen_seed = derive_seed(seed, 0);
    let sample = if s.specimens > 0 {
        Some(run.branches.separated()?.sample_specimens(s.specimens, specimen_seed, 0)?)
    } else {
        None
    };

    let semiclassical = match &s.semiclassical {
        None => None,
        Some(sc) => {
            let ens_seed = derive_seed(seed, 1);
            let ensemble = sample_ensemble(&packet, sc.members, ens_seed, sc.sampling)?;
            let axes = [s.beam.grid.coarsened(sc.coarsen)?];
            let set = run_apparatus_semiclassical(&ensemble, &chi, &app, None, &s.traversal, &axes)?;
            let mut rows = Vec::new();
            for (b, exact) in set.branches().iter().zip(run.branches.branches()) {
                let l1 = match (b.density(), exact.wave()) {
                    (Some(w), Some(psi)) => {
                        let rho = density(psi).coarsen(sc.coarsen)?;
                        let w = DensityField::new(rho.axes().to_vec(), w.values().to_vec(), rho.time())?;
                        Some(compare(&w, &rho)?)
                    }
                    _ => None,
                };
                rows.push(SemiclassicalBranchOut { sigma: b.sigma(), fraction: b.fraction(), l1_vs_exact: l1 });
            }
            let sigmas: Vec<HalfInt> = set.branches().iter().map(|b| b.sigma()).collect();
            let fields: Vec<Option<&DensityField>> = set.branches().iter().map(|b| b.density()).collect();
            write_branch_densities(out, "semiclassical.csv", &sigmas, &fields)?;
            Some(SemiclassicalOut { members: sc.members, seed: ens_seed, branches: rows })
        }
    };

    write_spinor_density(out, &run.state)?;
    if let Some(sample) = &sample {
        write_specimens(out, &sample.records)?;
    }
    let fractions = run.branches.fractions();
    out.json(
        "branches.json",
        &SgRunOut {
            seed,
            spin: chi.spin(),
            incident_axis: chi.axis(),
            apparatus: &app,
            final_time: run.branches.time(),
            branches,
            entry_time: run.entry_time,
            exit_time: run.exit_time,
            separation_time: run.separation_time,
            max_norm_drift: run.max_norm_drift(),
            pre_separation_cross_residual: run.pre_separation_cross_residual(),
            post_separation_mixture_residual: run.post_separation_mixture_residual(),
            specimens: sample.as_ref().map(|s| SpecimensOut {
                count: s.records.len(),
                seed: specimen_seed,
                expected: &s.expected,
                empirical: &s.empirical,
                flagged: &s.flagged,
            }),
            semiclassical,
            checkpoints: &run.checkpoints,
        },
    )?;
    let separated = match run.separation_time {
        Some(t) => format!("separated at t = {t}"),
        None => "not separated".to_string(),
    };
    Ok(format!("fractions = {} (Born {}), {separated}", list(&fractions), list(&born)))
}

#[derive(Serialize)]
struct CascadeSampleOut<'a> {
    count: usize,
    empirical: &'a [f64],
    flagged: &'a [HalfInt],
}

#[derive(Serialize)]
struct CascadeOut<'a> {
    seed: u64,
    analytic: &'a CascadeReport,
    exact: &'a CascadeReport,
    sample: Option<CascadeSampleOut<'a>>,
}

fn cascade(s: &CascadeSpec, seed: u64, out: &Outputs) -> Result<String, Failure> {
    let chi = internal_state(&s.state).map_err(schema)?;
    let stages = s
        .stages
        .iter()
        .map(|st| Ok(Stage { apparatus: apparatus(&s.apparatus, st.axis.0)?, keep: st.keep.0 }))
        .collect::<Result<Vec<_>, String>>()
        .map_err(schema)?;
    let plan: Vec<(Direction, _)> = s.stages.iter().map(|st| (st.axis.0, st.keep.0)).collect();
    let analytic = cascade_analytic(&chi, &plan)?;
    let (exact, sample) = if s.specimens > 0 {
        let (r, sample) = cascade_sampled(&s.beam, &chi, &stages, &s.traversal, s.specimens, seed)?;
        (r, Some(sample))
    } else {
        (cascade_exact(&s.beam, &chi, &stages, &s.traversal)?, None)
    };
    if let Some(sample) = &sample {
        write_specimens(out, &sample.records)?;
    }
    out.json(
        "cascade.json",
        &CascadeOut {
            seed,
            analytic: &analytic,
            exact: &exact,
            sample: sample.as_ref().map(|s| CascadeSampleOut { count: s.count, empirical: &s.empirical, flagged: &s.flagged }),
        },
    )?;
    let mut line = format!("final fractions = {} (analytic {})", list(&exact.final_fractions), list(&analytic.final_fractions));
    if let Some(sample) = &sample {
        line.push_str(&format!(", sampled {} over {} specimens", list(&sample.empirical), sample.count));
    }
    Ok(line)
}

#[derive(Serialize)]
struct SettingsOut {
    a: Direction,
    a_prime: Direction,
    b: Direction,
    b_prime: Direction,
}

#[derive(Serialize)]
struct SampledOut<'a> {
    trials_per_setting: usize,
    result: &'a ChshResult,
    counts: &'a [Vec<Vec<u64>>],
}

#[derive(Serialize)]
struct ChshOut<'a> {
    seed: u64,
    pair: &'static str,
    settings: SettingsOut,
    analytic: &'a ChshResult,
    sampled: Option<SampledOut<'a>>,
    fragments: Option<Vec<FragmentRun>>,
}

fn epr(s: &EprSpec, seed: u64, out: &Outputs) -> Result<String, Failure> {
    let pair = singlet_pair();
    let st = &s.settings;
    let settings = ChshSettings { a: st.a.0, a_prime: st.a_prime.0, b: st.b.0, b_prime: st.b_prime.0 };
    let analytic = chsh(&pair, &settings)?;
    let sampled = if s.trials > 0 { Some(sampled_chsh(&pair, &settings, s.trials, seed)?) } else { None };
    let fragments = match &s.fragments {
        None => None,
        Some(f) => {
            let app = apparatus(&f.apparatus, Direction::z()).map_err(schema)?;
            let runs = settings
                .pairs()
                .par_iter()
                .map(|(n1, n2)| opposed_fragments(&pair, n1, n2, &f.beam, &app, &f.traversal))
                .collect::<Result<Vec<_>, _>>()?;
            Some(runs)
        }
    };
    out.json(
        "chsh.json",
        &ChshOut {
            seed,
            pair: "singlet",
            settings: SettingsOut { a: settings.a, a_prime: settings.a_prime, b: settings.b, b_prime: settings.b_prime },
            analytic: &analytic,
            sampled: sampled.as_ref().map(|r| SampledOut { trials_per_setting: s.trials, result: &r.result, counts: &r.counts }),
            fragments,
        },
    )?;
    let mut line = format!("S = {:.6}", analytic.s);
    if let Some(r) = &sampled {
        line.push_str(&format!(
            " (sampled {:.6} ± {:.6} over {} pairs per setting)",
            r.result.s,
            r.result.s_standard_error.unwrap_or(f64::NAN),
            s.trials
        ));
    }
    Ok(line)
}
