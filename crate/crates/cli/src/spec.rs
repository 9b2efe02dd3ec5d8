//! Scenario files: JSON with a schema version, a master seed and one
//! tagged scenario body.

use std::path::PathBuf;

use qclimit::correspondence::SweepScenario;
use qclimit::hilbert::{Direction, HalfInt, Spin};
use qclimit::sterngerlach::{Beam, Traversal};
use serde::Deserialize;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct ScenarioFile {
    pub schema_version: u32,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub scenario: Scenario,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    schema_version: u32,
    seed: u64,
    /// Where outputs go unless `--out-dir` is given; relative to the working directory.
    #[serde(default)]
    out_dir: Option<PathBuf>,
    scenario: serde_json::Map<String, serde_json::Value>,
}

/// The body of a scenario, selected by its `kind` field.
#[derive(Clone, Debug)]
pub enum Scenario {
    CorrespondenceSweep(SweepSpec),
    SgRun(SgRunSpec),
    Cascade(CascadeSpec),
    EprChsh(EprSpec),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Strictly descending.
    pub hbars: Vec<f64>,
    pub setup: SweepScenario,
}

/// Axis given by polar and azimuthal angles in degrees.
#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Angles {
    pub theta_deg: f64,
    #[serde(default)]
    pub phi_deg: f64,
}

impl TryFrom<Angles> for Axis {
    type Error = String;

    fn try_from(a: Angles) -> Result<Self, String> {
        Direction::new(a.theta_deg.to_radians(), a.phi_deg.to_radians()).map(Axis).map_err(|e| e.to_string())
    }
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(try_from = "Angles")]
pub struct Axis(pub Direction);

/// Internal state along `axis`: either the basis state `sigma` or explicit
/// `[re, im]` amplitudes in storage order (σ = j first).
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InternalSpec {
    pub spin: Spin,
    pub axis: Axis,
    #[serde(default)]
    pub sigma: Option<HalfInt>,
    #[serde(default)]
    pub amplitudes: Option<Vec<[f64; 2]>>,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub region: [f64; 2],
    pub ramp: f64,
    pub gradient: f64,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApparatusSpec {
    pub orientation: Axis,
    pub region: [f64; 2],
    pub ramp: f64,
    pub gradient: f64,
}

impl ApparatusSpec {
    pub fn geometry(&self) -> Geometry {
        Geometry { region: self.region, ramp: self.ramp, gradient: self.gradient }
    }
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemiclassicalSpec {
    pub members: usize,
    pub sampling: qclimit::classical::MomentumSampling,
    /// Density bins = beam grid coarsened by this factor.
    #[serde(default = "one")]
    pub coarsen: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgRunSpec {
    pub beam: Beam,
    pub state: InternalSpec,
    pub apparatus: ApparatusSpec,
    pub traversal: Traversal,
    /// Specimens labelled after separation; 0 skips labelling.
    #[serde(default)]
    pub specimens: usize,
    #[serde(default)]
    pub semiclassical: Option<SemiclassicalSpec>,
}

/// `"all"` or a projection such as `"1/2"`.
#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(try_from = "String")]
pub struct KeepSpec(pub qclimit::sterngerlach::Keep);

impl TryFrom<String> for KeepSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        use qclimit::sterngerlach::Keep;
        if s == "all" {
            return Ok(KeepSpec(Keep::All));
        }
        s.parse::<HalfInt>().map(|h| KeepSpec(Keep::Sigma(h))).map_err(|e| format!("expected \"all\" or a projection: {e}"))
    }
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub axis: Axis,
    pub keep: KeepSpec,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeSpec {
    pub beam: Beam,
    pub state: InternalSpec,
    /// Shared by every stage; each stage supplies its own axis.
    pub apparatus: Geometry,
    pub stages: Vec<StageSpec>,
    pub traversal: Traversal,
    #[serde(default)]
    pub specimens: usize,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingsSpec {
    pub a: Axis,
    pub a_prime: Axis,
    pub b: Axis,
    pub b_prime: Axis,
}

/// Spatial flight of the two fragments through their analyzers.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FragmentSpec {
    /// Fragment 2's beam; fragment 1 flies in its mirror image.
    pub beam: Beam,
    pub apparatus: Geometry,
    pub traversal: Traversal,
}

/// Singlet pair analyzed at four settings.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EprSpec {
    pub settings: SettingsSpec,
    /// Sampled pairs per setting; 0 keeps the analytic result only.
    #[serde(default)]
    pub trials: usize,
    #[serde(default)]
    pub fragments: Option<FragmentSpec>,
}

fn located<'de, T, D>(prefix: &str, de: D) -> Result<T, String>
where
    T: Deserialize<'de>,
    D: serde::Deserializer<'de, Error = serde_json::Error>,
{
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        match (prefix, path.as_str()) {
            ("", ".") => e.inner().to_string(),
            (p, ".") => format!("{p}: {}", e.inner()),
            ("", q) => format!("{q}: {}", e.inner()),
            (p, q) => format!("{p}.{q}: {}", e.inner()),
        }
    })
}

/// Parses a scenario file, naming the offending field on failure.
pub fn parse(text: &str) -> Result<ScenarioFile, String> {
    let raw: RawFile = located("", &mut serde_json::Deserializer::from_str(text))?;
    let mut body = raw.scenario;
    let kind = match body.remove("kind") {
        Some(serde_json::Value::String(k)) => k,
        Some(other) => return Err(format!("scenario.kind: expected a string, got {other}")),
        None => return Err("scenario: missing field `kind`".into()),
    };
    let body = serde_json::Value::Object(body);
    let scenario = match kind.as_str() {
        "correspondence-sweep" => Scenario::CorrespondenceSweep(located("scenario", body)?),
        "sg-run" => Scenario::SgRun(located("scenario", body)?),
        "cascade" => Scenario::Cascade(located("scenario", body)?),
        "epr-chsh" => Scenario::EprChsh(located("scenario", body)?),
        other => {
            return Err(format!(
                "scenario.kind: unknown kind {other:?}, expected correspondence-sweep, sg-run, cascade or epr-chsh"
            ))
        }
    };
    Ok(ScenarioFile { schema_version: raw.schema_version, seed: raw.seed, out_dir: raw.out_dir, scenario })
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPR: &str = r#"{
        "schema_version": 1,
        "seed": 7,
        "scenario": {
            "kind": "epr-chsh",
            "settings": {
                "a": {"theta_deg": 90}, "a_prime": {"theta_deg": 0},
                "b": {"theta_deg": 45}, "b_prime": {"theta_deg": 135}
            },
            "trials": 1000
        }
    }"#;

    #[test]
    fn parses_a_tagged_scenario() {
        let f = parse(EPR).unwrap();
        let Scenario::EprChsh(e) = f.scenario else { panic!("wrong kind") };
        assert!((e.settings.b.0.theta() - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
    }

    #[test]
    fn errors_name_the_field() {
        let bad = EPR.replace("\"trials\": 1000", "\"trials\": -3");
        assert!(parse(&bad).unwrap_err().starts_with("scenario.trials"));
        let bad = EPR.replace("\"trials\"", "\"trails\"");
        assert!(parse(&bad).unwrap_err().contains("trails"));
        let bad = EPR.replace("{\"theta_deg\": 45}", "{\"theta_deg\": 245}");
        assert!(parse(&bad).unwrap_err().starts_with("scenario.settings.b"));
        let bad = EPR.replace("epr-chsh", "epr");
        assert!(parse(&bad).unwrap_err().starts_with("scenario.kind"));
        let bad = EPR.replace("\"seed\": 7", "\"seed\": \"x\"");
        assert!(parse(&bad).unwrap_err().starts_with("seed"));
    }

    #[test]
    fn keeps() {
        assert!(KeepSpec::try_from("all".to_string()).is_ok());
        assert!(KeepSpec::try_from("up".to_string()).is_err());
    }
}
