//! Run configuration: loading, file references, dot-path overrides and
//! strict validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use tbdefect::hamiltonian::HoppingModel;
use tbdefect::lattice::{DefectSpec, ReferenceCrystal};
use tbdefect::limits::DisplacementPolicy;
use tbdefect::sitegreen::Method;
use tbdefect::thermo::{Beta, Ensemble};

use crate::CliError;

/// Blocks that may be given inline or as a path to a JSON file, relative to
/// the configuration file.
const FILE_BLOCKS: [&str; 3] = ["crystal", "model", "defect"];

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub crystal: ReferenceCrystal,
    pub model: HoppingModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defect: Option<DefectSpec>,
    pub command: Command,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_output() -> PathBuf {
    PathBuf::from("tb-defect-out")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "default_force")]
    pub force: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
}

fn default_force() -> f64 {
    1e-11
}

fn default_max_iterations() -> usize {
    2000
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            force: default_force(),
            max_iterations: default_max_iterations(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Bands(BandsCmd),
    Relax(RelaxCmd),
    SiteEnergies(SiteEnergiesCmd),
    Locality(LocalityCmd),
    SweepBeta(SweepBetaCmd),
    SweepRadius(SweepRadiusCmd),
    CeLimit(CeLimitCmd),
    Pollution(PollutionCmd),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Bands(_) => "bands",
            Command::Relax(_) => "relax",
            Command::SiteEnergies(_) => "site-energies",
            Command::Locality(_) => "locality",
            Command::SweepBeta(_) => "sweep-beta",
            Command::SweepRadius(_) => "sweep-radius",
            Command::CeLimit(_) => "ce-limit",
            Command::Pollution(_) => "pollution",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandsCmd {
    #[serde(default = "default_nk")]
    pub n_k: usize,
}

fn default_nk() -> usize {
    256
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxCmd {
    /// Torus size in reference cells along each lattice vector.
    pub cells: Vec<i64>,
    pub ensemble: Ensemble,
    /// Amplitude of a seeded uniform random starting displacement.
    #[serde(default)]
    pub perturbation: f64,
    /// Also report the stability constant (one Hessian per site).
    #[serde(default)]
    pub stability: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteEnergiesCmd {
    pub cells: Vec<i64>,
    pub mu: f64,
    pub beta: Beta,
    #[serde(default = "default_method")]
    pub method: Method,
    /// Evaluate at the relaxed grand-canonical geometry instead of `u = 0`.
    #[serde(default)]
    pub relaxed: bool,
}

fn default_method() -> Method {
    Method::Eigen
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalityCmd {
    pub cells: Vec<i64>,
    #[serde(default)]
    pub site: usize,
    /// `[Re z, Im z]`.
    pub z: [f64; 2],
}

/// Ensemble of a temperature sweep; the temperature comes from the grid.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SweepEnsemble {
    Canonical { electrons: f64 },
    GrandCanonical { mu: f64 },
}

impl SweepEnsemble {
    pub fn at(&self, beta: Beta) -> Ensemble {
        match *self {
            SweepEnsemble::Canonical { electrons } => Ensemble::Canonical { electrons, beta },
            SweepEnsemble::GrandCanonical { mu } => Ensemble::GrandCanonical { mu, beta },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBetaCmd {
    pub cells: Vec<i64>,
    pub ensemble: SweepEnsemble,
    pub betas: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRadiusCmd {
    /// Cells per lattice direction, one torus per entry.
    pub cells: Vec<i64>,
    pub mu: f64,
    #[serde(default = "infinite")]
    pub beta: Beta,
    pub delta: f64,
}

fn infinite() -> Beta {
    Beta::Infinite
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CeLimitCmd {
    pub cells: Vec<i64>,
    pub reference_cells: i64,
    pub mu: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PollutionCmd {
    pub cells: Vec<i64>,
    pub mu: f64,
    pub delta: f64,
    pub policy: DisplacementPolicy,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Reads the configuration file and replaces file references by their
/// contents.
pub fn load(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let mut doc: Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    if let Value::Object(map) = &mut doc {
        for key in FILE_BLOCKS {
            if let Some(Value::String(rel)) = map.get(key) {
                let file = base.join(rel);
                let text = std::fs::read_to_string(&file)
                    .map_err(|e| invalid(format!("{key}: {}: {e}", file.display())))?;
                let block = serde_json::from_str(&text)
                    .map_err(|e| invalid(format!("{key}: {}: {e}", file.display())))?;
                map.insert(key.to_string(), block);
            }
        }
    }
    Ok(doc)
}

/// Applies `key.path=value`. The value is parsed as JSON when possible and
/// taken as a string otherwise; missing objects along the path are created.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| invalid(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(invalid(format!("override path `{path}` has an empty segment")));
    }
    let mut node = doc;
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| invalid(format!("override `{path}`: `{key}` indexes an array")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| invalid(format!("override `{path}`: index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                let parent = keys[..i].join(".");
                return Err(invalid(format!("override `{path}`: `{parent}` is not an object")));
            }
        };
    }
    unreachable!("non-empty path")
}

/// Strict deserialisation; errors name the offending path.
pub fn parse(doc: Value) -> Result<RunConfig, CliError> {
    let config: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            invalid(e.into_inner().to_string())
        } else {
            invalid(format!("{path}: {}", e.into_inner()))
        }
    })?;
    if config.threads == Some(0) {
        return Err(invalid("threads: must be positive"));
    }
    if config.tolerances.force.is_nan() || config.tolerances.force <= 0.0 {
        return Err(invalid("tolerances.force: must be positive"));
    }
    Ok(config)
}
