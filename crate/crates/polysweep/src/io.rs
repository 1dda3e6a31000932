//! File formats: scenario JSON, trajectory CSV, control CSV and the JSON
//! artifacts written by the command-line tool.
//!
//! Every parser takes text and returns an error for any malformed input; none
//! of them panics.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::calculus::{AbsAffineDrift, DriftOracle, Kink, RobotDrift};
use crate::certify::{ConditionEntry, ConditionReport, DualCertificate};
use crate::discrete_ocp::Solution;
use crate::dynamics::{ControlSet, DiscreteTrajectory, DriftSign, Mesh, Scenario, TerminalCost};
use crate::error::{Error, Result};
use crate::polyhedra::Polyhedron;
use crate::robot::{build_robot_scenario, case_control, Convention, RobotParams};

/// A control value.
pub type Control = DVector<f64>;

/// Largest accepted mesh power.
pub const MAX_MESH_POWER: u32 = 24;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    version: Option<u32>,
    preset: Option<RawPreset>,
    polyhedron: Option<RawPolyhedron>,
    drift: Option<RawDrift>,
    drift_sign: Option<RawSign>,
    control_set: Option<RawControlSet>,
    x0: Option<Vec<f64>>,
    #[serde(rename = "T")]
    horizon: Option<f64>,
    mesh_power: Option<u32>,
    cost: Option<RawCost>,
    controls: Option<RawControls>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPreset {
    kind: String,
    case: u8,
    #[serde(default)]
    convention: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolyhedron {
    dim: usize,
    #[serde(default)]
    generators: Vec<Vec<f64>>,
    #[serde(default)]
    offsets: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawDrift {
    Robot {
        speeds: Vec<f64>,
        angles_deg: Vec<f64>,
    },
    AbsAffine {
        state_matrix: Vec<Vec<f64>>,
        control_matrix: Vec<Vec<f64>>,
        offset: Vec<f64>,
        #[serde(default)]
        kinks: Vec<RawKink>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKink {
    direction: Vec<f64>,
    state_weights: Vec<f64>,
    control_weights: Vec<f64>,
    #[serde(default)]
    shift: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawSign {
    Theory,
    Example,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawControlSet {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Segment { from: Vec<f64>, to: Vec<f64> },
    Finite { points: Vec<Vec<f64>> },
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawCost {
    HalfNormSq { target: Vec<f64> },
    Linear { weights: Vec<f64> },
    L1 { target: Vec<f64> },
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawControls {
    Constant(Vec<f64>),
    Spec(String),
}

/// Where the controls of a run come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlSpec {
    Constant(DVector<f64>),
    /// Path of a control CSV file.
    Path(String),
}

/// The robot preset a scenario was expanded from.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotPreset {
    pub params: RobotParams,
    pub case: u8,
}

/// A parsed and validated scenario file.
#[derive(Debug, Clone)]
pub struct ScenarioFile {
    pub scenario: Scenario,
    pub mesh_power: Option<u32>,
    pub controls: Option<ControlSpec>,
    pub robot: Option<RobotPreset>,
}

fn schema(msg: impl Into<String>) -> Error {
    Error::Schema(msg.into())
}

/// Rewrites constructor errors as schema errors naming the field; feasibility
/// errors pass through unchanged.
fn at_field(field: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Infeasible { .. } => e,
        other => schema(format!("`{field}`: {other}")),
    }
}

fn vector(v: &[f64], field: &str) -> Result<DVector<f64>> {
    if let Some(k) = v.iter().position(|x| !x.is_finite()) {
        return Err(schema(format!("`{field}[{k}]` is not finite")));
    }
    Ok(DVector::from_column_slice(v))
}

fn matrix(rows: &[Vec<f64>], cols: Option<usize>, field: &str) -> Result<DMatrix<f64>> {
    let ncols = match (rows.first(), cols) {
        (Some(r), _) => r.len(),
        (None, Some(c)) => c,
        (None, None) => return Err(schema(format!("`{field}` must have at least one row"))),
    };
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(schema(format!("`{field}[{i}]` has {} entries, expected {ncols}", r.len())));
        }
        vector(r, field)?;
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn json_error(e: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let path = e.path().to_string();
    let inner = e.into_inner();
    schema(format!(
        "line {} column {} at `{}`: {}",
        inner.line(),
        inner.column(),
        path,
        inner
    ))
}

fn from_json<'de, T: Deserialize<'de>>(text: &'de str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(&mut de).map_err(json_error)?;
    de.end().map_err(|e| schema(format!("line {} column {}: {e}", e.line(), e.column())))?;
    Ok(value)
}

fn parse_controls_field(raw: RawControls) -> Result<ControlSpec> {
    match raw {
        RawControls::Constant(v) => Ok(ControlSpec::Constant(vector(&v, "controls")?)),
        RawControls::Spec(s) => parse_control_spec(&s),
    }
}

/// Parses and validates a scenario file.
///
/// Schema problems (syntax, unknown fields, dimension mismatches) give
/// [`Error::Schema`]; an initial state outside `C` gives [`Error::Infeasible`].
pub fn parse_scenario_json(text: &str) -> Result<ScenarioFile> {
    let raw: RawScenario = from_json(text)?;
    if let Some(v) = raw.version {
        if v != 1 {
            return Err(schema(format!("`version`: unsupported version {v}")));
        }
    }
    if let Some(m) = raw.mesh_power {
        if m > MAX_MESH_POWER {
            return Err(schema(format!("`mesh_power`: {m} exceeds {MAX_MESH_POWER}")));
        }
    }
    let controls = raw.controls.map(parse_controls_field).transpose()?;

    if let Some(preset) = raw.preset {
        let model_fields = [
            raw.polyhedron.is_some(),
            raw.drift.is_some(),
            raw.drift_sign.is_some(),
            raw.control_set.is_some(),
            raw.x0.is_some(),
            raw.horizon.is_some(),
            raw.cost.is_some(),
        ];
        if model_fields.iter().any(|&b| b) {
            return Err(schema("`preset` cannot be combined with explicit model blocks"));
        }
        if preset.kind != "robot" {
            return Err(schema(format!("`preset.kind`: unknown preset `{}`", preset.kind)));
        }
        let convention = match preset.convention.as_deref() {
            None => Convention::Consistent,
            Some(s) => Convention::parse(s).ok_or_else(|| schema(format!("`preset.convention`: unknown convention `{s}`")))?,
        };
        let case = preset.case;
        let default_u = case_control(case).map_err(at_field("preset.case"))?;
        let params = RobotParams::with_convention(convention);
        let scenario = build_robot_scenario(&params).map_err(at_field("preset"))?;
        return Ok(ScenarioFile {
            scenario,
            mesh_power: raw.mesh_power,
            controls: Some(controls.unwrap_or(ControlSpec::Constant(default_u))),
            robot: Some(RobotPreset { params, case }),
        });
    }

    let missing = |name: &str| schema(format!("missing field `{name}`"));
    let rp = raw.polyhedron.ok_or_else(|| missing("polyhedron"))?;
    let rd = raw.drift.ok_or_else(|| missing("drift"))?;
    let ru = raw.control_set.ok_or_else(|| missing("control_set"))?;
    let rx = raw.x0.ok_or_else(|| missing("x0"))?;
    let horizon = raw.horizon.ok_or_else(|| missing("T"))?;
    let rc = raw.cost.ok_or_else(|| missing("cost"))?;

    if rp.dim == 0 {
        return Err(schema("`polyhedron.dim` must be positive"));
    }
    let mut generators = Vec::with_capacity(rp.generators.len());
    for (j, g) in rp.generators.iter().enumerate() {
        if g.len() != rp.dim {
            return Err(schema(format!(
                "`polyhedron.generators[{j}]` has {} entries, expected {}",
                g.len(),
                rp.dim
            )));
        }
        generators.push(vector(g, "polyhedron.generators")?);
    }
    let offsets = vector(&rp.offsets, "polyhedron.offsets")?;
    let polyhedron = Polyhedron::new(rp.dim, generators, offsets.iter().copied().collect()).map_err(at_field("polyhedron"))?;

    let drift: Arc<dyn DriftOracle> = match rd {
        RawDrift::Robot { speeds, angles_deg } => Arc::new(
            RobotDrift::new(
                vector(&speeds, "drift.speeds")?.iter().copied().collect(),
                vector(&angles_deg, "drift.angles_deg")?.iter().copied().collect(),
            )
            .map_err(at_field("drift"))?,
        ),
        RawDrift::AbsAffine {
            state_matrix,
            control_matrix,
            offset,
            kinks,
        } => {
            let a = matrix(&state_matrix, None, "drift.state_matrix")?;
            let b = matrix(&control_matrix, None, "drift.control_matrix")?;
            let c = vector(&offset, "drift.offset")?;
            let kinks = kinks
                .iter()
                .map(|k| {
                    if !k.shift.is_finite() {
                        return Err(schema("`drift.kinks.shift` is not finite"));
                    }
                    Ok(Kink {
                        direction: vector(&k.direction, "drift.kinks.direction")?,
                        state_weights: vector(&k.state_weights, "drift.kinks.state_weights")?,
                        control_weights: vector(&k.control_weights, "drift.kinks.control_weights")?,
                        shift: k.shift,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Arc::new(AbsAffineDrift::new(a, b, c, kinks).map_err(at_field("drift"))?)
        }
    };
    let drift_sign = match raw.drift_sign {
        None | Some(RawSign::Theory) => DriftSign::Theory,
        Some(RawSign::Example) => DriftSign::Example,
    };
    let control_set = match ru {
        RawControlSet::Box { lower, upper } => ControlSet::Box {
            lower: vector(&lower, "control_set.lower")?,
            upper: vector(&upper, "control_set.upper")?,
        },
        RawControlSet::Segment { from, to } => ControlSet::Segment {
            from: vector(&from, "control_set.from")?,
            to: vector(&to, "control_set.to")?,
        },
        RawControlSet::Finite { points } => ControlSet::Finite(
            points
                .iter()
                .map(|p| vector(p, "control_set.points"))
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    let cost = match rc {
        RawCost::HalfNormSq { target } => TerminalCost::HalfNormSq {
            target: vector(&target, "cost.target")?,
        },
        RawCost::Linear { weights } => TerminalCost::Linear {
            weights: vector(&weights, "cost.weights")?,
        },
        RawCost::L1 { target } => TerminalCost::L1 {
            target: vector(&target, "cost.target")?,
        },
    };
    let x0 = vector(&rx, "x0")?;
    if !horizon.is_finite() {
        return Err(schema("`T` is not finite"));
    }
    let scenario = Scenario::new(polyhedron, drift, drift_sign, control_set, x0, horizon, cost).map_err(at_field("scenario"))?;
    if let Some(ControlSpec::Constant(u)) = &controls {
        if u.len() != scenario.control_dim() {
            return Err(schema(format!(
                "`controls` has {} entries, expected {}",
                u.len(),
                scenario.control_dim()
            )));
        }
    }
    Ok(ScenarioFile {
        scenario,
        mesh_power: raw.mesh_power,
        controls,
        robot: None,
    })
}

/// `u=a,b,...` gives a constant control; anything else is a CSV path.
pub fn parse_control_spec(text: &str) -> Result<ControlSpec> {
    let t = text.trim();
    if let Some(rest) = t.strip_prefix("u=") {
        let values = rest
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| schema(format!("control value `{}` is not a finite number", s.trim())))
            })
            .collect::<Result<Vec<f64>>>()?;
        return Ok(ControlSpec::Constant(DVector::from_vec(values)));
    }
    if t.is_empty() {
        return Err(schema("empty control specification"));
    }
    Ok(ControlSpec::Path(t.to_string()))
}

/// One control per line, comma separated; a non-numeric first line is a header.
pub fn parse_controls_csv(text: &str) -> Result<Vec<DVector<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    let mut width = None;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| schema(format!("control CSV: {e}")))?;
        let parsed: Option<Vec<f64>> = rec.iter().map(|f| f.parse::<f64>().ok()).collect();
        let Some(values) = parsed else {
            if line == 0 {
                continue;
            }
            return Err(schema(format!("control CSV line {}: non-numeric entry", line + 1)));
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(schema(format!("control CSV line {}: non-finite entry", line + 1)));
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(schema(format!("control CSV line {}: expected {w} entries", line + 1)))
            }
            _ => {}
        }
        rows.push(DVector::from_vec(values));
    }
    if rows.is_empty() {
        return Err(schema("control CSV has no rows"));
    }
    Ok(rows)
}

/// Spreads `rows` over `steps` mesh cells: one row is constant, otherwise the
/// row count must divide `steps` (piecewise-constant blocks).
pub fn expand_controls(rows: &[DVector<f64>], steps: usize, dim: usize) -> Result<Vec<DVector<f64>>> {
    if rows.is_empty() || steps == 0 || !steps.is_multiple_of(rows.len()) {
        return Err(schema(format!("{} control rows do not divide {steps} steps", rows.len())));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(schema(format!("control has {} entries, expected {dim}", r.len())));
    }
    Ok(crate::discrete_ocp::expand_pieces(rows, steps))
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Trajectory CSV with columns `t, x1.., u1.., eta1.., res` (one `eta` column
/// per constraint of `poly`). The last row leaves control, multiplier and
/// residual fields empty.
pub fn write_trajectory_csv(traj: &DiscreteTrajectory, poly: &Polyhedron) -> Result<String> {
    let n = poly.dim();
    let d = traj.controls.first().map_or(0, |u| u.len());
    let s = poly.count();
    if traj.states.iter().any(|x| x.len() != n) || (traj.has_multipliers() && traj.eta.iter().any(|e| e.len() != s)) {
        return Err(Error::Invalid("trajectory does not match the polyhedron".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|k| format!("x{k}")));
    header.extend((1..=d).map(|k| format!("u{k}")));
    header.extend((1..=s).map(|k| format!("eta{k}")));
    header.push("res".into());
    let io = |e: csv::Error| Error::Invalid(format!("CSV write failed: {e}"));
    w.write_record(&header).map_err(io)?;
    let with_eta = traj.has_multipliers();
    for i in 0..=traj.mesh.steps {
        let mut row = vec![num(traj.mesh.node(i))];
        row.extend(traj.states[i].iter().map(|&v| num(v)));
        if i < traj.mesh.steps {
            row.extend(traj.controls[i].iter().map(|&v| num(v)));
            if with_eta {
                row.extend(traj.eta[i].iter().map(|&v| num(v)));
                row.push(num(traj.residuals[i]));
            } else {
                row.extend(std::iter::repeat_n(String::new(), s + 1));
            }
        } else {
            row.extend(std::iter::repeat_n(String::new(), d + s + 1));
        }
        w.write_record(&row).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("CSV write failed: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
}

fn column_block(header: &[String], start: usize, prefix: &str) -> usize {
    let mut k = 0;
    while start + k < header.len() && header[start + k] == format!("{prefix}{}", k + 1) {
        k += 1;
    }
    k
}

/// Parses a trajectory CSV. Without multipliers (empty `eta` and `res` fields)
/// the trajectory carries none. When `poly` is given the multiplier count must
/// match and the largest normal-cone element is recomputed.
pub fn parse_trajectory_csv(text: &str, poly: Option<&Polyhedron>) -> Result<DiscreteTrajectory> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| schema(format!("trajectory CSV header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.first().map(String::as_str) != Some("t") {
        return Err(schema("trajectory CSV must start with column `t`"));
    }
    let n = column_block(&header, 1, "x");
    let d = column_block(&header, 1 + n, "u");
    let s = column_block(&header, 1 + n + d, "eta");
    if n == 0 || d == 0 || header.len() != 2 + n + d + s || header.last().map(String::as_str) != Some("res") {
        return Err(schema("trajectory CSV header must be t,x1..xn,u1..ud,eta1..eta_s,res"));
    }
    if let Some(p) = poly {
        if p.dim() != n {
            return Err(schema(format!("trajectory has {n} state columns, polyhedron dimension is {}", p.dim())));
        }
        if p.count() != s {
            return Err(schema(format!("trajectory has {s} multiplier columns, polyhedron has {} constraints", p.count())));
        }
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut controls = Vec::new();
    let mut eta = Vec::new();
    let mut residuals = Vec::new();
    let mut rows: Vec<Vec<String>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| schema(format!("trajectory CSV row {}: {e}", i + 2)))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    if rows.len() < 2 {
        return Err(schema("trajectory CSV needs at least two rows"));
    }
    let last = rows.len() - 1;
    let with_eta = !rows[0][1 + n + d + s].is_empty();
    let field = |row: usize, col: usize, v: &str| -> Result<f64> {
        v.parse::<f64>()
            .map_err(|_| schema(format!("trajectory CSV row {} column `{}`: `{v}` is not a number", row + 2, header[col])))
    };
    for (i, row) in rows.iter().enumerate() {
        let parse_range = |from: usize, len: usize| -> Result<DVector<f64>> {
            let vals = (from..from + len).map(|c| field(i, c, &row[c])).collect::<Result<Vec<f64>>>()?;
            Ok(DVector::from_vec(vals))
        };
        times.push(field(i, 0, &row[0])?);
        let x = parse_range(1, n)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(schema(format!("trajectory CSV row {}: non-finite state", i + 2)));
        }
        states.push(x);
        let tail = &row[1 + n..];
        if i == last {
            if tail.iter().any(|f| !f.is_empty()) {
                return Err(schema("the last trajectory row must leave u, eta and res empty"));
            }
            continue;
        }
        controls.push(parse_range(1 + n, d)?);
        if with_eta {
            eta.push(parse_range(1 + n + d, s)?);
            residuals.push(field(i, 1 + n + d + s, &row[1 + n + d + s])?);
        } else if row[1 + n + d..].iter().any(|f| !f.is_empty()) {
            return Err(schema(format!("trajectory CSV row {}: multipliers given only on some rows", i + 2)));
        }
    }
    let horizon = times[last];
    let mesh = Mesh::new(last, horizon).map_err(|e| schema(format!("trajectory time grid: {e}")))?;
    for (i, &t) in times.iter().enumerate() {
        if !((t - mesh.node(i)).abs() <= 1e-9 * horizon.abs().max(1.0)) {
            return Err(schema(format!("trajectory CSV row {}: time {t} is off the uniform grid", i + 2)));
        }
    }
    let max_normal_norm = match poly {
        Some(p) if with_eta => eta.iter().map(|e| p.combine(e).norm()).fold(0.0, f64::max),
        _ => 0.0,
    };
    Ok(DiscreteTrajectory {
        mesh,
        states,
        controls,
        eta,
        residuals,
        max_normal_norm,
    })
}

// Adding +0.0 maps -0.0 to 0.0.
fn row(x: &DVector<f64>) -> Value {
    Value::Array(x.iter().map(|&v| json!(v + 0.0)).collect())
}

fn rows(v: &[DVector<f64>]) -> Value {
    Value::Array(v.iter().map(row).collect())
}

pub fn solution_to_json(sol: &Solution) -> Value {
    json!({
        "controls": rows(&sol.controls),
        "cost": sol.cost,
        "evaluations": sol.evaluations,
        "mesh_power": sol.trajectory.mesh.power(),
        "trace": sol.trace,
    })
}

/// Fields of a solution file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionFile {
    pub controls: Vec<Vec<f64>>,
    pub cost: f64,
    pub evaluations: u64,
    pub mesh_power: Option<u32>,
    #[serde(default)]
    pub trace: Vec<f64>,
}

pub fn parse_solution_json(text: &str) -> Result<SolutionFile> {
    let sol: SolutionFile = from_json(text)?;
    if let Some(w) = sol.controls.first().map(Vec::len) {
        if sol.controls.iter().any(|c| c.len() != w) {
            return Err(schema("`controls` rows have different lengths"));
        }
    }
    Ok(sol)
}

pub fn certificate_to_json(cert: &DualCertificate) -> Value {
    json!({
        "lambda": cert.lambda,
        "p": rows(&cert.p),
        "q": rows(&cert.q),
        "gamma": rows(&cert.gamma),
        "psi": rows(&cert.psi),
        "eta_T": row(&cert.eta_t),
        "theta_y": rows(&cert.theta_y),
        "theta_u": rows(&cert.theta_u),
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCertificate {
    lambda: f64,
    p: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    gamma: Vec<Vec<f64>>,
    psi: Vec<Vec<f64>>,
    #[serde(rename = "eta_T")]
    eta_t: Vec<f64>,
    theta_y: Option<Vec<Vec<f64>>>,
    theta_u: Option<Vec<Vec<f64>>>,
}

/// Parses a certificate; missing auxiliary vectors default to zero. Shapes are
/// checked for internal consistency only.
pub fn parse_certificate_json(text: &str) -> Result<DualCertificate> {
    let raw: RawCertificate = from_json(text)?;
    let vecs = |v: &[Vec<f64>], field: &str| -> Result<Vec<DVector<f64>>> { v.iter().map(|r| vector(r, field)).collect() };
    let steps = raw.gamma.len();
    let n = raw.p.first().map_or(0, Vec::len);
    let d = raw.psi.first().map_or(0, Vec::len);
    let s = raw.eta_t.len();
    let cert = DualCertificate {
        lambda: raw.lambda,
        p: vecs(&raw.p, "p")?,
        q: vecs(&raw.q, "q")?,
        gamma: vecs(&raw.gamma, "gamma")?,
        psi: vecs(&raw.psi, "psi")?,
        eta_t: vector(&raw.eta_t, "eta_T")?,
        theta_y: match &raw.theta_y {
            Some(t) => vecs(t, "theta_y")?,
            None => vec![DVector::zeros(n); steps],
        },
        theta_u: match &raw.theta_u {
            Some(t) => vecs(t, "theta_u")?,
            None => vec![DVector::zeros(d); steps],
        },
    };
    cert.check_shape(steps, n, d, s).map_err(|e| schema(e.to_string()))?;
    Ok(cert)
}

fn entry_json(e: &ConditionEntry) -> Value {
    json!({
        "status": e.status.as_str(),
        "residual": e.residual,
        "witnesses": e.witnesses,
    })
}

/// `{"conditions": {...}, "informational": {...}, "passed": bool}`.
pub fn report_to_json(report: &ConditionReport) -> Value {
    let conditions: Map<String, Value> = report
        .conditions
        .iter()
        .map(|(k, e)| (k.as_str().to_string(), entry_json(e)))
        .collect();
    let informational: Map<String, Value> = report
        .informational
        .iter()
        .map(|(k, e)| (k.clone(), entry_json(e)))
        .collect();
    json!({
        "conditions": conditions,
        "informational": informational,
        "passed": report.passed(),
    })
}

pub fn trajectory_csv_round_trip_ok(traj: &DiscreteTrajectory, poly: &Polyhedron) -> Result<bool> {
    let text = write_trajectory_csv(traj, poly)?;
    Ok(&parse_trajectory_csv(&text, Some(poly))? == traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::simulate;

    const SLIDE: &str = r#"{
        "version": 1,
        "polyhedron": {"dim": 2, "generators": [[0, 1]], "offsets": [1]},
        "drift": {"kind": "abs_affine", "state_matrix": [[0, 0], [0, 0]],
                  "control_matrix": [[1, 0], [0, 1]], "offset": [0, 0]},
        "drift_sign": "example",
        "control_set": {"kind": "box", "lower": [-1, -1], "upper": [1, 1]},
        "x0": [0, 0], "T": 2, "mesh_power": 6,
        "cost": {"kind": "half_norm_sq", "target": [3, 3]},
        "controls": "u=1,1"
    }"#;

    #[test]
    fn explicit_scenario() {
        let f = parse_scenario_json(SLIDE).unwrap();
        assert_eq!(f.mesh_power, Some(6));
        assert_eq!(f.controls, Some(ControlSpec::Constant(DVector::from_vec(vec![1.0, 1.0]))));
        assert_eq!(f.scenario.state_dim(), 2);
    }

    #[test]
    fn preset_matches_builder() {
        let f = parse_scenario_json(r#"{"preset": {"kind": "robot", "case": 1, "convention": "consistent"}}"#).unwrap();
        let built = build_robot_scenario(&RobotParams::default()).unwrap();
        assert_eq!(f.scenario.polyhedron, built.polyhedron);
        assert_eq!(f.scenario.x0, built.x0);
        assert_eq!(f.scenario.control_set, built.control_set);
        assert_eq!(f.scenario.cost, built.cost);
        assert_eq!(f.scenario.drift_sign, built.drift_sign);
    }

    #[test]
    fn schema_and_feasibility_errors() {
        let bad_dim = SLIDE.replace("[[0, 1]]", "[[0, 1, 2]]");
        assert!(matches!(parse_scenario_json(&bad_dim), Err(Error::Schema(_))));
        let outside = SLIDE.replace("\"x0\": [0, 0]", "\"x0\": [0, 5]");
        match parse_scenario_json(&outside) {
            Err(Error::Infeasible { index, .. }) => assert_eq!(index, 0),
            other => panic!("{other:?}"),
        }
        let unknown = SLIDE.replace("\"version\": 1,", "\"version\": 1, \"colour\": 3,");
        let msg = parse_scenario_json(&unknown).unwrap_err().to_string();
        assert!(msg.contains("line"), "{msg}");
        assert!(parse_scenario_json("{").is_err());
        assert!(parse_scenario_json("[]").is_err());
    }

    #[test]
    fn trajectory_round_trip_is_exact() {
        let f = parse_scenario_json(SLIDE).unwrap();
        let mesh = Mesh::power_of_two(5, 2.0).unwrap();
        let us: Vec<_> = (0..32).map(|i| DVector::from_vec(vec![1.0, (i as f64 / 31.0) - 0.3])).collect();
        let traj = simulate(&f.scenario, &us, mesh).unwrap();
        assert!(trajectory_csv_round_trip_ok(&traj, &f.scenario.polyhedron).unwrap());
        let mut bare = traj.clone();
        bare.eta.clear();
        bare.residuals.clear();
        bare.max_normal_norm = 0.0;
        let text = write_trajectory_csv(&bare, &f.scenario.polyhedron).unwrap();
        assert_eq!(parse_trajectory_csv(&text, Some(&f.scenario.polyhedron)).unwrap(), bare);
    }

    #[test]
    fn control_specs() {
        assert_eq!(
            parse_control_spec("u=3,1.5").unwrap(),
            ControlSpec::Constant(DVector::from_vec(vec![3.0, 1.5]))
        );
        assert_eq!(parse_control_spec("ctl.csv").unwrap(), ControlSpec::Path("ctl.csv".into()));
        assert!(parse_control_spec("u=3,x").is_err());
        let rows = parse_controls_csv("u1,u2\n1,2\n3,4\n").unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(expand_controls(&rows, 4, 2).unwrap()[1], rows[0]);
        assert!(expand_controls(&rows, 3, 2).is_err());
        assert!(parse_controls_csv("1,2\n3\n").is_err());
    }

    #[test]
    fn certificate_round_trip() {
        let mut cert = DualCertificate::zeros(3, 2, 1, 1);
        cert.lambda = 1.0;
        cert.p[1][0] = 0.1 + 0.2;
        cert.gamma[2][0] = -1e-300;
        let text = certificate_to_json(&cert).to_string();
        assert_eq!(parse_certificate_json(&text).unwrap(), cert);
        assert!(parse_certificate_json(r#"{"lambda":1,"p":[[0]],"q":[],"gamma":[],"psi":[],"eta_T":[]}"#).is_err());
    }
}
