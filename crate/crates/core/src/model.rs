//! # Model files, certificates and traces
//!
//! Models are TOML documents:
//!
//! ```toml
//! [meta]
//! name = "two tanks"
//! version = "1"
//!
//! [variables]
//! names = ["x1", "x2", "u1"]
//!
//! [subsystem.1]
//! states = ["x1"]
//! dynamics = ["-x1 + u1"]
//! controls = ["u1"]              # optional; substituted by `feedback`
//! feedback = ["-0.5*x1"]
//! output_vars = ["x1"]
//! output_map = ["x1"]
//! initial_set = ["0.25 - x1^2"]
//! safe_region = ["1 - x1^2"]
//! gain_a = 1.0                   # optional
//!
//! [subsystem.2.input_bounds.1]   # bound on the signal from subsystem 1
//! vars = ["x1"]
//! bound = ["1 - x1^2"]
//!
//! [subsystem.1.exogenous.w]      # externally driven signal
//! vars = ["w"]
//! bound = ["1 - w^2"]
//! set = ["0.25 - w^2"]
//!
//! [edges]
//! list = ["1 -> 2"]
//!
//! [config]                       # optional, see [`ConfigFile`]
//! algorithm = "auto"
//! ```
//!
//! Unknown keys are rejected and every error carries a line and column.
//! Certificates (`.cert`) and traces (`.trace`) are TOML as well, with
//! deterministic key order, a format version and the SHA-256 of the model
//! they belong to. Files are written atomically.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use toml::Spanned;

use crate::contracts::{
    validate_interconnection, Certificate, Contract, EdgeEvidence, EdgeSource, FailureReason, InputPort, InputSource,
    Interconnection, PremiseCheck, Shift, Subsystem, SubsystemId, TraceRecord, Verdict,
};
use crate::negotiation::NegotiationConfig;
use crate::poly::{Monomial, Polynomial, PolynomialVector, VarId, VarTable};
use crate::sos::{GramCertificate, SosEvidence};

/// Current certificate format version.
pub const CERTIFICATE_VERSION: u32 = 1;
/// Current trace format version.
pub const TRACE_VERSION: u32 = 1;

/// Errors reading or writing models, certificates and traces.
#[derive(Debug, Error)]
pub enum ModelError {
    /// File could not be read or written.
    #[error("{path}")]
    Io {
        /// Path involved.
        path: String,
        /// Underlying error.
        source: std::io::Error,
    },
    /// Located syntax or semantic error.
    #[error("line {line}, column {column}: {message}")]
    At {
        /// 1-based line.
        line: usize,
        /// 1-based column.
        column: usize,
        /// Description.
        message: String,
    },
    /// Structural problem without a single location.
    #[error("invalid model: {0}")]
    Invalid(String),
    /// Malformed certificate or trace.
    #[error("malformed certificate: {0}")]
    Certificate(String),
    /// Invalid example request.
    #[error("{0}")]
    Example(String),
}

/// Converts a byte offset into a 1-based `(line, column)`.
pub fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

fn at(text: &str, offset: usize, message: impl Into<String>) -> ModelError {
    let (line, column) = line_column(text, offset);
    ModelError::At { line, column, message: message.into() }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Writes `contents` to `path` via a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), ModelError> {
    let io = |source| ModelError::Io { path: path.display().to_string(), source };
    let mut tmp: PathBuf = path.to_path_buf();
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    tmp.set_file_name(name);
    fs::write(&tmp, contents).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

// ---------------------------------------------------------------------------
// Configuration section
// ---------------------------------------------------------------------------

/// `[config]` section: every field is optional and overrides the default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    /// `auto`, `acyclic`, `homogeneous` or `general`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<String>,
    /// Strict margin ε.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Default class-K gain.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain_a: Option<f64>,
    /// Barrier degree.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_degree: Option<u32>,
    /// Multiplier degree.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_degree: Option<u32>,
    /// Bisection tolerance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bisection_tol: Option<f64>,
    /// Upper end of the δ bracket.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_max: Option<f64>,
    /// Upper end of the ζ bracket.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeta_max: Option<f64>,
    /// Input multipliers over states and inputs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wide_multipliers: Option<bool>,
    /// Localize the barrier condition to the working safe region.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub localize: Option<bool>,
    /// Impose `h(centre) = 1`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalize: Option<bool>,
    /// Iteration cap for cyclic procedures.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    /// Tighten only parents of failed edges.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selective_tightening: Option<bool>,
    /// Samples per condition in checks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_count: Option<usize>,
    /// Sampling seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// PSD tolerance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psd_tol: Option<f64>,
    /// Duality-gap tolerance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_tol: Option<f64>,
    /// Feasibility tolerance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feas_tol: Option<f64>,
    /// SDP iteration cap.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_sdp_iterations: Option<usize>,
    /// Identity residual tolerance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual_tol: Option<f64>,
    /// Simulator local error tolerance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim_tol: Option<f64>,
}

/// Default simulator tolerance.
pub const DEFAULT_SIM_TOL: f64 = 1e-8;

impl ConfigFile {
    /// Applies the present fields on top of `cfg` / `sim_tol`.
    pub fn apply(&self, cfg: &mut NegotiationConfig, sim_tol: &mut f64) -> Result<(), String> {
        let s = &mut cfg.synthesis;
        if let Some(a) = &self.algorithm {
            cfg.algorithm = a.parse()?;
        }
        macro_rules! set {
            ($src:ident => $($dst:tt)+) => {
                if let Some(v) = self.$src {
                    $($dst)+ = v;
                }
            };
        }
        set!(epsilon => s.epsilon);
        set!(gain_a => s.gain_a);
        set!(bisection_tol => s.bisection_tol);
        set!(localize => s.localize);
        set!(normalize => s.normalize);
        set!(psd_tol => s.sos.solver.psd_tol);
        set!(gap_tol => s.sos.solver.gap_tol);
        set!(feas_tol => s.sos.solver.feas_tol);
        set!(max_sdp_iterations => s.sos.solver.max_iterations);
        set!(residual_tol => s.sos.residual_tol);
        set!(max_iterations => cfg.max_iterations);
        set!(selective_tightening => cfg.selective_tightening);
        set!(sample_count => cfg.sample_count);
        set!(seed => cfg.seed);
        set!(sim_tol => *sim_tol);
        if self.h_degree.is_some() {
            s.h_degree = self.h_degree;
        }
        if self.sigma_degree.is_some() {
            s.sigma_degree = self.sigma_degree;
        }
        if self.delta_max.is_some() {
            s.delta_max = self.delta_max;
        }
        if self.zeta_max.is_some() {
            s.zeta_max = self.zeta_max;
        }
        if self.wide_multipliers.is_some() {
            s.wide_multipliers = self.wide_multipliers;
        }
        if !(*sim_tol > 0.0) {
            return Err(format!("sim_tol must be positive, got {sim_tol}"));
        }
        s.validate()
    }

    /// Fully populated section describing `cfg` (as embedded in certificates).
    pub fn effective(cfg: &NegotiationConfig, sim_tol: f64) -> ConfigFile {
        let s = &cfg.synthesis;
        ConfigFile {
            algorithm: Some(cfg.algorithm.to_string()),
            epsilon: Some(s.epsilon),
            gain_a: Some(s.gain_a),
            h_degree: s.h_degree,
            sigma_degree: s.sigma_degree,
            bisection_tol: Some(s.bisection_tol),
            delta_max: s.delta_max,
            zeta_max: s.zeta_max,
            wide_multipliers: s.wide_multipliers,
            localize: Some(s.localize),
            normalize: Some(s.normalize),
            max_iterations: Some(cfg.max_iterations),
            selective_tightening: Some(cfg.selective_tightening),
            sample_count: Some(cfg.sample_count),
            seed: Some(cfg.seed),
            psd_tol: Some(s.sos.solver.psd_tol),
            gap_tol: Some(s.sos.solver.gap_tol),
            feas_tol: Some(s.sos.solver.feas_tol),
            max_sdp_iterations: Some(s.sos.solver.max_iterations),
            residual_tol: Some(s.sos.residual_tol),
            sim_tol: Some(sim_tol),
        }
    }

    /// Parses a standalone configuration file (same keys as `[config]`).
    pub fn parse(text: &str) -> Result<ConfigFile, ModelError> {
        toml::from_str(text).map_err(|e| toml_error(text, &e))
    }
}

fn toml_error(text: &str, e: &toml::de::Error) -> ModelError {
    let offset = e.span().map_or(0, |s| s.start);
    at(text, offset, e.message().to_string())
}

// ---------------------------------------------------------------------------
// Model parsing
// ---------------------------------------------------------------------------

type Text = Spanned<String>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    meta: Option<MetaFile>,
    variables: VariablesFile,
    subsystem: BTreeMap<String, SubsystemFile>,
    edges: Option<EdgesFile>,
    config: Option<ConfigFile>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaFile {
    name: Option<String>,
    version: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VariablesFile {
    names: Vec<Text>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubsystemFile {
    states: Vec<Text>,
    dynamics: Vec<Text>,
    #[serde(default)]
    controls: Vec<Text>,
    #[serde(default)]
    feedback: Vec<Text>,
    output_vars: Vec<Text>,
    output_map: Vec<Text>,
    initial_set: Vec<Text>,
    safe_region: Vec<Text>,
    gain_a: Option<f64>,
    #[serde(default)]
    input_bounds: BTreeMap<String, PortFile>,
    #[serde(default)]
    exogenous: BTreeMap<String, ExogenousFile>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PortFile {
    vars: Vec<Text>,
    bound: Vec<Text>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExogenousFile {
    vars: Vec<Text>,
    bound: Vec<Text>,
    set: Vec<Text>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgesFile {
    list: Vec<Text>,
}

/// A parsed model.
#[derive(Debug, Clone)]
pub struct Model {
    /// `[meta] name`.
    pub name: String,
    /// `[meta] version`.
    pub version: Option<String>,
    /// The interconnection.
    pub interconnection: Interconnection,
    /// Negotiation settings (defaults overridden by `[config]`).
    pub config: NegotiationConfig,
    /// Simulator tolerance.
    pub sim_tol: f64,
    /// SHA-256 of the model text.
    pub sha256: String,
}

struct Ctx<'a> {
    text: &'a str,
    vars: VarTable,
}

impl Ctx<'_> {
    fn var(&self, t: &Text) -> Result<VarId, ModelError> {
        self.vars
            .get(t.get_ref())
            .ok_or_else(|| at(self.text, t.span().start, format!("undeclared variable `{}`", t.get_ref())))
    }

    fn vars(&self, ts: &[Text]) -> Result<Vec<VarId>, ModelError> {
        ts.iter().map(|t| self.var(t)).collect()
    }

    fn poly(&self, t: &Text) -> Result<Polynomial, ModelError> {
        let mut table = self.vars.clone();
        let p = Polynomial::parse(t.get_ref(), &mut table)
            .map_err(|e| at(self.text, t.span().start, format!("bad polynomial \"{}\": {e}", t.get_ref())))?;
        if table.len() > self.vars.len() {
            let name = table.name(self.vars.len());
            return Err(at(self.text, t.span().start, format!("undeclared variable `{name}`")));
        }
        Ok(p)
    }

    fn polys(&self, ts: &[Text]) -> Result<Vec<Polynomial>, ModelError> {
        ts.iter().map(|t| self.poly(t)).collect()
    }

    fn nonempty(&self, ts: &[Text], what: &str, key: &str) -> Result<PolynomialVector, ModelError> {
        if ts.is_empty() {
            return Err(self.key_error(key, format!("{what} must list at least one polynomial")));
        }
        Ok(PolynomialVector::new(self.polys(ts)?))
    }

    /// Error located at the first occurrence of a table header.
    fn key_error(&self, header: &str, message: String) -> ModelError {
        match self.text.find(header) {
            Some(off) => at(self.text, off, message),
            None => ModelError::Invalid(message),
        }
    }
}

/// Parses a model document.
pub fn parse_model(text: &str) -> Result<Model, ModelError> {
    let file: ModelFile = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
    let mut ctx = Ctx { text, vars: VarTable::new() };
    for n in &file.variables.names {
        let name = n.get_ref();
        let valid = name.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
            && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
        if !valid {
            return Err(at(text, n.span().start, format!("invalid variable name `{name}`")));
        }
        if ctx.vars.get(name).is_some() {
            return Err(at(text, n.span().start, format!("variable `{name}` declared twice")));
        }
        ctx.vars.intern(name);
    }

    let mut subsystems = BTreeMap::new();
    for (key, s) in &file.subsystem {
        let header = format!("[subsystem.{key}");
        let id: SubsystemId = key
            .parse()
            .map_err(|_| ctx.key_error(&header, format!("subsystem id `{key}` is not a non-negative integer")))?;
        let states = ctx.vars(&s.states)?;
        let mut dynamics = ctx.polys(&s.dynamics)?;
        if s.controls.len() != s.feedback.len() {
            return Err(ctx.key_error(&header, format!("subsystem {id}: controls and feedback lengths differ")));
        }
        if !s.controls.is_empty() {
            let controls = ctx.vars(&s.controls)?;
            let laws = ctx.polys(&s.feedback)?;
            let subst: BTreeMap<VarId, Polynomial> = controls.into_iter().zip(laws).collect();
            dynamics = dynamics.iter().map(|f| f.compose_partial(&subst)).collect();
        }
        let mut inputs = Vec::new();
        for (pkey, port) in &s.input_bounds {
            let parent: SubsystemId = pkey.parse().map_err(|_| {
                ctx.key_error(
                    &format!("{header}.input_bounds.{pkey}"),
                    format!("parent id `{pkey}` is not a non-negative integer"),
                )
            })?;
            let ph = format!("[subsystem.{key}.input_bounds.{pkey}]");
            inputs.push(InputPort {
                source: InputSource::Subsystem(parent),
                vars: ctx.vars(&port.vars)?,
                bound: ctx.nonempty(&port.bound, "bound", &ph)?,
            });
        }
        inputs.sort_by_key(|p| match p.source {
            InputSource::Subsystem(j) => j,
            InputSource::Exogenous { .. } => SubsystemId::MAX,
        });
        for (name, exo) in &s.exogenous {
            let eh = format!("[subsystem.{key}.exogenous.{name}]");
            inputs.push(InputPort {
                source: InputSource::Exogenous { name: name.clone(), set: ctx.nonempty(&exo.set, "set", &eh)? },
                vars: ctx.vars(&exo.vars)?,
                bound: ctx.nonempty(&exo.bound, "bound", &eh)?,
            });
        }
        let sub = Subsystem {
            id,
            states,
            dynamics,
            output_vars: ctx.vars(&s.output_vars)?,
            output_map: PolynomialVector::new(ctx.polys(&s.output_map)?),
            initial_set: ctx.nonempty(&s.initial_set, "initial_set", &header)?,
            safe_region: ctx.nonempty(&s.safe_region, "safe_region", &header)?,
            inputs,
            gain_a: s.gain_a,
        };
        if subsystems.insert(id, sub).is_some() {
            return Err(ctx.key_error(&header, format!("subsystem {id} declared twice")));
        }
    }

    let mut edges = std::collections::BTreeSet::new();
    for e in file.edges.as_ref().map(|e| e.list.as_slice()).unwrap_or(&[]) {
        let parsed =
            e.get_ref().split_once("->").and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
        match parsed {
            Some(edge) => {
                edges.insert(edge);
            }
            None => {
                return Err(at(
                    text,
                    e.span().start,
                    format!("edge \"{}\" is not of the form \"parent -> child\"", e.get_ref()),
                ))
            }
        }
    }

    let interconnection = Interconnection { vars: ctx.vars, subsystems, edges };
    let problems = validate_interconnection(&interconnection);
    if !problems.is_empty() {
        let text: Vec<String> = problems.iter().map(ToString::to_string).collect();
        return Err(ModelError::Invalid(text.join("; ")));
    }
    let mut config = NegotiationConfig::default();
    let mut sim_tol = DEFAULT_SIM_TOL;
    if let Some(c) = &file.config {
        c.apply(&mut config, &mut sim_tol).map_err(|m| ctx_config_error(text, m))?;
    }
    Ok(Model {
        name: file.meta.as_ref().and_then(|m| m.name.clone()).unwrap_or_else(|| "model".into()),
        version: file.meta.and_then(|m| m.version),
        interconnection,
        config,
        sim_tol,
        sha256: sha256_hex(text.as_bytes()),
    })
}

fn ctx_config_error(text: &str, message: String) -> ModelError {
    match text.find("[config]") {
        Some(off) => at(text, off, message),
        None => ModelError::Invalid(message),
    }
}

/// Reads and parses a model file.
pub fn load_model(path: &Path) -> Result<Model, ModelError> {
    let text =
        fs::read_to_string(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    parse_model(&text)
}

// ---------------------------------------------------------------------------
// Certificates
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CertFile {
    certificate_version: u32,
    model_sha256: String,
    verdict: String,
    algorithm: String,
    iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reason: Option<ReasonFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    premise: Option<PremiseFile>,
    config: ConfigFile,
    #[serde(default)]
    contract: Vec<ContractFile>,
    #[serde(default)]
    edge: Vec<EdgeFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReasonFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node: Option<SubsystemId>,
    program: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    endpoint: Option<f64>,
    detail: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PremiseFile {
    holds: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    level: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContractFile {
    subsystem: SubsystemId,
    delta: f64,
    zeta: f64,
    zeta_working: f64,
    gain_a: f64,
    barrier: String,
    shift: BTreeMap<String, f64>,
    evidence: EvidenceFile,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeFile {
    kind: String,
    parent: String,
    child: SubsystemId,
    delta: f64,
    shift: BTreeMap<String, f64>,
    evidence: EvidenceFile,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvidenceFile {
    polys: BTreeMap<String, String>,
    scalars: BTreeMap<String, f64>,
    #[serde(default)]
    gram: Vec<GramFile>,
}

/// Gram matrix with its monomial basis; entries row-major.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GramFile {
    label: String,
    basis: Vec<String>,
    entries: Vec<f64>,
}

fn shift_to_file(shift: &Shift, vars: &VarTable) -> BTreeMap<String, f64> {
    shift.iter().map(|(&v, &c)| (vars.name(v), c)).collect()
}

fn evidence_to_file(e: &SosEvidence, vars: &VarTable) -> EvidenceFile {
    EvidenceFile {
        polys: e.polys.iter().map(|(k, p)| (k.clone(), p.to_text(vars))).collect(),
        scalars: e.scalars.clone(),
        gram: e
            .grams
            .iter()
            .map(|(k, g)| {
                let n = g.basis.len();
                let mut entries = Vec::with_capacity(n * n);
                for i in 0..n {
                    for j in 0..n {
                        entries.push(g.matrix[(i, j)]);
                    }
                }
                GramFile {
                    label: k.clone(),
                    basis: g.basis.iter().map(|m| if m.is_one() { "1".into() } else { m.to_text(vars) }).collect(),
                    entries,
                }
            })
            .collect(),
    }
}

/// Serializes a certificate (without its trace) for the model with hash
/// `model_sha256`, embedding the effective configuration.
pub fn certificate_to_text(
    cert: &Certificate,
    sys: &Interconnection,
    model_sha256: &str,
    config: &ConfigFile,
) -> String {
    let vars = &sys.vars;
    let file = CertFile {
        certificate_version: CERTIFICATE_VERSION,
        model_sha256: model_sha256.to_string(),
        verdict: match cert.verdict {
            Verdict::True => "true".into(),
            Verdict::False => "false".into(),
        },
        algorithm: cert.algorithm.clone(),
        iterations: cert.iterations,
        reason: cert.reason.as_ref().map(|r| ReasonFile {
            node: r.node,
            program: r.program.clone(),
            endpoint: r.endpoint,
            detail: r.detail.clone(),
        }),
        premise: cert.premise.as_ref().map(|p| PremiseFile { holds: p.holds, level: p.level }),
        config: config.clone(),
        contract: cert
            .contracts
            .values()
            .map(|c| ContractFile {
                subsystem: c.subsystem,
                delta: c.delta,
                zeta: c.zeta,
                zeta_working: c.zeta_working,
                gain_a: c.gain_a,
                barrier: c.barrier.to_text(vars),
                shift: shift_to_file(&c.shift, vars),
                evidence: evidence_to_file(&c.evidence, vars),
            })
            .collect(),
        edge: cert
            .edges
            .iter()
            .map(|e| {
                let (kind, parent) = match &e.source {
                    EdgeSource::Subsystem(p) => ("subsystem", p.to_string()),
                    EdgeSource::Exogenous(n) => ("exogenous", n.clone()),
                };
                EdgeFile {
                    kind: kind.into(),
                    parent,
                    child: e.child,
                    delta: e.delta,
                    shift: shift_to_file(&e.shift, vars),
                    evidence: evidence_to_file(&e.evidence, vars),
                }
            })
            .collect(),
    };
    toml::to_string(&file).expect("certificate is serializable")
}

/// A certificate read back from text.
#[derive(Debug, Clone)]
pub struct LoadedCertificate {
    /// The certificate (with an empty trace).
    pub certificate: Certificate,
    /// Hash of the model it was produced for.
    pub model_sha256: String,
    /// Embedded configuration.
    pub config: ConfigFile,
}

fn cert_err(m: impl Into<String>) -> ModelError {
    ModelError::Certificate(m.into())
}

fn parse_poly_known(text: &str, vars: &VarTable) -> Result<Polynomial, ModelError> {
    let mut table = vars.clone();
    let p = Polynomial::parse(text, &mut table).map_err(|e| cert_err(format!("polynomial \"{text}\": {e}")))?;
    if table.len() > vars.len() {
        return Err(cert_err(format!("polynomial \"{text}\" uses unknown variable `{}`", table.name(vars.len()))));
    }
    Ok(p)
}

fn parse_monomial(text: &str, vars: &VarTable) -> Result<Monomial, ModelError> {
    let p = parse_poly_known(text, vars)?;
    match p.terms().collect::<Vec<_>>().as_slice() {
        [(m, c)] if *c == 1.0 => Ok((*m).clone()),
        _ => Err(cert_err(format!("\"{text}\" is not a monomial"))),
    }
}

fn shift_from_file(shift: &BTreeMap<String, f64>, vars: &VarTable) -> Result<Shift, ModelError> {
    shift
        .iter()
        .map(|(k, &c)| vars.get(k).map(|v| (v, c)).ok_or_else(|| cert_err(format!("unknown variable `{k}` in shift"))))
        .collect()
}

fn evidence_from_file(e: &EvidenceFile, vars: &VarTable) -> Result<SosEvidence, ModelError> {
    let mut polys = BTreeMap::new();
    for (k, t) in &e.polys {
        polys.insert(k.clone(), parse_poly_known(t, vars)?);
    }
    let mut grams = BTreeMap::new();
    for g in &e.gram {
        let basis: Vec<Monomial> = g.basis.iter().map(|m| parse_monomial(m, vars)).collect::<Result<_, _>>()?;
        let n = basis.len();
        if g.entries.len() != n * n {
            return Err(cert_err(format!("gram `{}` has {} entries for a basis of {n}", g.label, g.entries.len())));
        }
        grams.insert(g.label.clone(), GramCertificate { basis, matrix: DMatrix::from_row_slice(n, n, &g.entries) });
    }
    Ok(SosEvidence { polys, scalars: e.scalars.clone(), grams })
}

/// Parses certificate text against the model's variable table.
pub fn certificate_from_text(text: &str, sys: &Interconnection) -> Result<LoadedCertificate, ModelError> {
    let file: CertFile = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
    if file.certificate_version != CERTIFICATE_VERSION {
        return Err(cert_err(format!(
            "unsupported certificate_version {} (expected {CERTIFICATE_VERSION})",
            file.certificate_version
        )));
    }
    let vars = &sys.vars;
    let verdict = match file.verdict.as_str() {
        "true" => Verdict::True,
        "false" => Verdict::False,
        v => return Err(cert_err(format!("unknown verdict `{v}`"))),
    };
    let mut contracts = BTreeMap::new();
    for c in &file.contract {
        let contract = Contract {
            subsystem: c.subsystem,
            delta: c.delta,
            zeta: c.zeta,
            zeta_working: c.zeta_working,
            gain_a: c.gain_a,
            barrier: parse_poly_known(&c.barrier, vars)?,
            shift: shift_from_file(&c.shift, vars)?,
            evidence: evidence_from_file(&c.evidence, vars)?,
        };
        if contracts.insert(c.subsystem, contract).is_some() {
            return Err(cert_err(format!("two contracts for subsystem {}", c.subsystem)));
        }
    }
    let mut edges = Vec::new();
    for e in &file.edge {
        let source = match e.kind.as_str() {
            "subsystem" => {
                EdgeSource::Subsystem(e.parent.parse().map_err(|_| cert_err(format!("bad parent `{}`", e.parent)))?)
            }
            "exogenous" => EdgeSource::Exogenous(e.parent.clone()),
            k => return Err(cert_err(format!("unknown edge kind `{k}`"))),
        };
        edges.push(EdgeEvidence {
            source,
            child: e.child,
            delta: e.delta,
            shift: shift_from_file(&e.shift, vars)?,
            evidence: evidence_from_file(&e.evidence, vars)?,
        });
    }
    Ok(LoadedCertificate {
        certificate: Certificate {
            verdict,
            algorithm: file.algorithm,
            iterations: file.iterations,
            contracts,
            edges,
            reason: file.reason.map(|r| FailureReason {
                node: r.node,
                program: r.program,
                endpoint: r.endpoint,
                detail: r.detail,
            }),
            premise: file.premise.map(|p| PremiseCheck { level: p.level, holds: p.holds }),
            trace: Vec::new(),
        },
        model_sha256: file.model_sha256,
        config: file.config,
    })
}

// ---------------------------------------------------------------------------
// Traces
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceFile {
    trace_version: u32,
    model_sha256: String,
    #[serde(default)]
    record: Vec<RecordFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordFile {
    step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node: Option<SubsystemId>,
    operation: String,
    status: String,
    results: BTreeMap<String, f64>,
}

/// Serializes a negotiation trace.
pub fn trace_to_text(trace: &[TraceRecord], model_sha256: &str) -> String {
    let file = TraceFile {
        trace_version: TRACE_VERSION,
        model_sha256: model_sha256.to_string(),
        record: trace
            .iter()
            .map(|r| RecordFile {
                step: r.step,
                node: r.node,
                operation: r.operation.clone(),
                status: r.status.clone(),
                results: r.results.clone(),
            })
            .collect(),
    };
    toml::to_string(&file).expect("trace is serializable")
}

/// Parses a negotiation trace.
pub fn trace_from_text(text: &str) -> Result<Vec<TraceRecord>, ModelError> {
    let file: TraceFile = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
    if file.trace_version != TRACE_VERSION {
        return Err(cert_err(format!("unsupported trace_version {}", file.trace_version)));
    }
    Ok(file
        .record
        .into_iter()
        .map(|r| TraceRecord {
            step: r.step,
            node: r.node,
            operation: r.operation,
            results: r.results,
            status: r.status,
        })
        .collect())
}

/// One-line human summary of a trace record.
pub fn trace_line(r: &TraceRecord) -> String {
    let node = r.node.map(|n| format!("subsystem {n}")).unwrap_or_else(|| "system".into());
    let results: Vec<String> = r.results.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("[{:>3}] {node}: {} {} {}", r.step, r.operation, results.join(" "), r.status)
}

// ---------------------------------------------------------------------------
// Built-in examples
// ---------------------------------------------------------------------------

fn quote_list(items: &[String]) -> String {
    let q: Vec<String> = items.iter().map(|s| format!("\"{s}\"")).collect();
    format!("[{}]", q.join(", "))
}

/// Vehicle platoon: an exogenous leader `v0` followed by `n` vehicles with
/// spacing `d_i` and velocity deviation `v_i`; vehicle `i` reads `v_{i−1}`.
pub fn platooning_model(n: u32) -> Result<String, ModelError> {
    if n < 1 {
        return Err(ModelError::Example("platooning needs at least one follower vehicle (--n ≥ 1)".into()));
    }
    let ell = |i: u32, level: u32| format!("-100*d{i}^2 - 60*d{i}*v{i} - 50*v{i}^2 + 600*d{i} + 180*v{i} - {level}");
    let mut names = vec!["v0".to_string()];
    for i in 1..=n {
        names.extend([format!("d{i}"), format!("v{i}"), format!("u{i}")]);
    }
    let mut s = String::new();
    let _ = writeln!(s, "[meta]\nname = \"platooning\"\nversion = \"1\"\n");
    let _ = writeln!(s, "[variables]\nnames = {}\n", quote_list(&names));
    for i in 1..=n {
        let p = i - 1;
        let _ = writeln!(s, "[subsystem.{i}]");
        let _ = writeln!(s, "states = [\"d{i}\", \"v{i}\"]");
        let _ = writeln!(s, "dynamics = [\"v{i} - v{p}\", \"-(v{i} - v{p})^3 + u{i}\"]");
        let _ = writeln!(s, "controls = [\"u{i}\"]");
        let _ = writeln!(s, "feedback = [\"-(v{i} - v{p}) - (d{i} - 3) - (d{i} - 3)^3\"]");
        let _ = writeln!(s, "output_vars = [\"v{i}\"]\noutput_map = [\"v{i}\"]");
        let _ = writeln!(s, "initial_set = [\"{}\"]", ell(i, 899));
        let _ = writeln!(s, "safe_region = [\"{}\"]\n", ell(i, 800));
        if i == 1 {
            let _ = writeln!(
                s,
                "[subsystem.1.exogenous.leader]\nvars = [\"v0\"]\nbound = [\"2.439 - v0^2\"]\nset = [\"-v0^2\"]\n"
            );
        } else {
            let _ = writeln!(s, "[subsystem.{i}.input_bounds.{p}]\nvars = [\"v{p}\"]\nbound = [\"2.439 - v{p}^2\"]\n");
        }
    }
    let edges: Vec<String> = (2..=n).map(|i| format!("{} -> {i}", i - 1)).collect();
    let _ = writeln!(s, "[edges]\nlist = {}\n", quote_list(&edges));
    let _ = writeln!(s, "[config]\ngain_a = 1.4");
    Ok(s)
}

/// Ring of `n` rooms with temperatures `x_i`, heated under a consensus
/// feedback; room `i` reads both neighbours.
pub fn rooms_model(n: u32) -> Result<String, ModelError> {
    if n < 3 {
        return Err(ModelError::Example("the rooms ring needs at least three rooms (--n ≥ 3)".into()));
    }
    let (te, th, alpha, beta, gamma) = (-1.0, 50.0, 0.05, 0.008, 0.004);
    let prev = |i: u32| if i == 1 { n } else { i - 1 };
    let next = |i: u32| if i == n { 1 } else { i + 1 };
    let mut names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    names.extend((1..=n).map(|i| format!("u{i}")));
    let mut s = String::new();
    let _ = writeln!(s, "[meta]\nname = \"rooms\"\nversion = \"1\"\n");
    let _ = writeln!(s, "[variables]\nnames = {}\n", quote_list(&names));
    for i in 1..=n {
        let (a, b) = (prev(i), next(i));
        let _ = writeln!(s, "[subsystem.{i}]");
        let _ = writeln!(s, "states = [\"x{i}\"]");
        let _ = writeln!(
            s,
            "dynamics = [\"{alpha}*(x{b} + x{a} - 2*x{i}) + {beta}*({te} - x{i}) + {gamma}*({th} - x{i})*u{i}\"]"
        );
        let _ = writeln!(s, "controls = [\"u{i}\"]");
        let _ = writeln!(s, "feedback = [\"0.05*(x{b} + x{a} - 2*x{i}) + 0.05*(25 - x{i})\"]");
        let _ = writeln!(s, "output_vars = [\"x{i}\"]\noutput_map = [\"x{i}\"]");
        let _ = writeln!(s, "initial_set = [\"-x{i}^2 + 50*x{i} - 624\"]");
        let _ = writeln!(s, "safe_region = [\"-x{i}^2 + 50*x{i} - 600\"]\n");
        let mut ports = [a, b];
        ports.sort_unstable();
        for j in ports {
            let _ = writeln!(
                s,
                "[subsystem.{i}.input_bounds.{j}]\nvars = [\"x{j}\"]\nbound = [\"-x{j}^2 + 50*x{j} - 600\"]\n"
            );
        }
    }
    let mut edges = Vec::new();
    for i in 1..=n {
        edges.push(format!("{} -> {i}", prev(i)));
        edges.push(format!("{} -> {i}", next(i)));
    }
    let _ = writeln!(s, "[edges]\nlist = {}", quote_list(&edges));
    Ok(s)
}

/// Names of the built-in examples.
pub const EXAMPLES: [&str; 2] = ["platooning", "rooms"];

/// Model text of a built-in example.
pub fn example_model(name: &str, n: u32) -> Result<String, ModelError> {
    match name {
        "platooning" => platooning_model(n),
        "rooms" => rooms_model(n),
        other => Err(ModelError::Example(format!("unknown example `{other}` (expected platooning or rooms)"))),
    }
}

/// Variable lookup helper for callers holding names.
pub fn var_ids(sys: &Interconnection, names: &[&str]) -> Option<Vec<VarId>> {
    names.iter().map(|n| sys.vars.get(n)).collect()
}

/// Maps `VarId`s to names (used in CSV headers).
pub fn var_names(sys: &Interconnection, ids: &[VarId]) -> Vec<String> {
    ids.iter().map(|&v| sys.vars.name(v)).collect()
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
