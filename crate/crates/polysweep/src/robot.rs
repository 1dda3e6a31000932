//! Two disk-shaped robots moving along a common heading.
//!
//! Robot `k` has center `x^k in R^2` and speed `s_k |u_k|` along the angle
//! `theta`. The robots may not come closer than `2R` in the sum norm; once
//! they touch they move together. The default data put robot 2 ahead of
//! robot 1 on the heading, so robot 1 catches up when it is faster.
//!
//! Two constraint encodings are available. [`Convention::Consistent`] uses the
//! generator `a = (-1,-1,1,1)` with offset `2R`, which becomes active at contact
//! and carries a nonnegative multiplier. [`Convention::PaperLiteral`] keeps the
//! literal data `x* = (1,1,-1,-1)`, `c = -12`, which is never active along
//! the motion and pairs with a negative multiplier.

use std::sync::Arc;

use nalgebra::DVector;

use crate::calculus::RobotDrift;
use crate::certify::DualCertificate;
use crate::dynamics::{ControlSet, DiscreteTrajectory, DriftSign, Mesh, Scenario, TerminalCost};
use crate::error::{Error, Result};
use crate::polyhedra::Polyhedron;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Convention {
    #[default]
    Consistent,
    PaperLiteral,
}

impl Convention {
    pub fn as_str(self) -> &'static str {
        match self {
            Convention::Consistent => "consistent",
            Convention::PaperLiteral => "paper_literal",
        }
    }

    /// Accepts `consistent`, `paper_literal` and `paper-literal`.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "consistent" => Some(Convention::Consistent),
            "paper_literal" | "paper-literal" => Some(Convention::PaperLiteral),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotParams {
    pub centers: [[f64; 2]; 2],
    pub radius: f64,
    pub speeds: [f64; 2],
    pub angle_deg: f64,
    pub horizon: f64,
    pub convention: Convention,
}

impl Default for RobotParams {
    fn default() -> Self {
        RobotParams {
            centers: [[-30.0, -30.0], [-20.0, -20.0]],
            radius: 12.0,
            speeds: [3.0, 1.0],
            angle_deg: 225.0,
            horizon: 6.0,
            convention: Convention::Consistent,
        }
    }
}

/// Offset of the literal constraint.
const LITERAL_OFFSET: f64 = -12.0;

impl RobotParams {
    pub fn with_convention(convention: Convention) -> Self {
        RobotParams {
            convention,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.centers.iter().flatten().all(|v| v.is_finite())
            && self.angle_deg.is_finite()
            && self.horizon.is_finite();
        if !finite {
            return Err(Error::Invalid("robot parameters must be finite".into()));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Invalid("robot radius must be positive".into()));
        }
        if !(self.speeds[0] > 0.0 && self.speeds[1] > 0.0) {
            return Err(Error::Invalid("robot speeds must be positive".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Invalid("horizon must be positive".into()));
        }
        Ok(())
    }

    fn heading(&self) -> (f64, f64) {
        let t = self.angle_deg.to_radians();
        (t.cos(), t.sin())
    }

    pub fn x0(&self) -> DVector<f64> {
        DVector::from_column_slice(&[self.centers[0][0], self.centers[0][1], self.centers[1][0], self.centers[1][1]])
    }

    /// Constraint generator and offset for the chosen convention.
    pub fn constraint(&self) -> (DVector<f64>, f64) {
        match self.convention {
            Convention::Consistent => (DVector::from_column_slice(&[-1.0, -1.0, 1.0, 1.0]), 2.0 * self.radius),
            Convention::PaperLiteral => (DVector::from_column_slice(&[1.0, 1.0, -1.0, -1.0]), LITERAL_OFFSET),
        }
    }

    /// Effective speeds `s_k |u_k|`.
    fn rates(&self, u: &DVector<f64>) -> (f64, f64) {
        (self.speeds[0] * u[0].abs(), self.speeds[1] * u[1].abs())
    }

    fn drift_at(&self, u: &DVector<f64>) -> DVector<f64> {
        let (c, s) = self.heading();
        let (r1, r2) = self.rates(u);
        DVector::from_column_slice(&[r1 * c, r1 * s, r2 * c, r2 * s])
    }
}

/// Endpoints of the control segment `{(2t, t) : t in [-2, 1.5]}`.
pub fn control_segment() -> (DVector<f64>, DVector<f64>) {
    (DVector::from_column_slice(&[-4.0, -2.0]), DVector::from_column_slice(&[3.0, 1.5]))
}

/// The two controls compared in the case study.
pub fn case_control(case: u8) -> Result<DVector<f64>> {
    match case {
        1 => Ok(DVector::from_column_slice(&[3.0, 1.5])),
        2 => Ok(DVector::from_column_slice(&[-4.0, -2.0])),
        _ => Err(Error::Invalid(format!("unknown robot case {case}"))),
    }
}

pub fn build_robot_scenario(params: &RobotParams) -> Result<Scenario> {
    params.validate()?;
    let (a, c) = params.constraint();
    let drift = RobotDrift::new(params.speeds.to_vec(), vec![params.angle_deg; 2])?;
    let (from, to) = control_segment();
    Scenario::new(
        Polyhedron::new(4, vec![a], vec![c])?,
        Arc::new(drift),
        DriftSign::Example,
        ControlSet::Segment { from, to },
        params.x0(),
        params.horizon,
        TerminalCost::HalfNormSq {
            target: DVector::zeros(4),
        },
    )
}

/// First `t` in `(0, T]` with `|D_1(t)| + |D_2(t)| = 2R`, where `D(t)` is the
/// relative position of robot 2 with respect to robot 1 under free motion.
pub fn contact_time(params: &RobotParams, u: &DVector<f64>) -> Option<f64> {
    let (c, s) = params.heading();
    let (r1, r2) = params.rates(u);
    let rel = r2 - r1;
    if rel == 0.0 {
        return None;
    }
    let a = [
        params.centers[1][0] - params.centers[0][0],
        params.centers[1][1] - params.centers[0][1],
    ];
    let b = [rel * c, rel * s];
    let f = |t: f64| (a[0] + t * b[0]).abs() + (a[1] + t * b[1]).abs() - 2.0 * params.radius;
    let mut cuts = vec![0.0];
    for k in 0..2 {
        if b[k] != 0.0 {
            let t = -a[k] / b[k];
            if t > 0.0 && t < params.horizon {
                cuts.push(t);
            }
        }
    }
    cuts.push(params.horizon);
    cuts.sort_by(f64::total_cmp);
    if f(0.0) == 0.0 {
        return Some(0.0);
    }
    for w in cuts.windows(2) {
        let (fa, fb) = (f(w[0]), f(w[1]));
        if fa == 0.0 && w[0] > 0.0 {
            return Some(w[0]);
        }
        if fa * fb < 0.0 || fb == 0.0 {
            // f is affine on the piece.
            return Some(w[0] + (w[1] - w[0]) * fa / (fa - fb));
        }
    }
    None
}

/// Multiplier of the active constraint after contact.
///
/// Literal form: `(s_1|u_1| - s_2|u_2|) cos(theta) / 2` when the effective
/// speeds differ and `cos(theta) = sin(theta)`, else 0. Consistent form: the
/// multiplier of generator `a` that keeps `<a, x>` constant, clamped at 0.
pub fn eta_closed_form(params: &RobotParams, u: &DVector<f64>) -> f64 {
    let (c, s) = params.heading();
    let (r1, r2) = params.rates(u);
    match params.convention {
        Convention::PaperLiteral => {
            if r1 != r2 && (c - s).abs() <= 1e-12 {
                0.5 * (r1 - r2) * c
            } else {
                0.0
            }
        }
        Convention::Consistent => ((r2 - r1) * (c + s) / 4.0).max(0.0),
    }
}

/// Velocity after contact: the drift minus the reaction along `a`.
fn joint_velocity(params: &RobotParams, u: &DVector<f64>) -> DVector<f64> {
    let consistent = RobotParams {
        convention: Convention::Consistent,
        ..params.clone()
    };
    let (a, _) = consistent.constraint();
    params.drift_at(u) - a * eta_closed_form(&consistent, u)
}

/// Closed-form state at time `t` (piecewise linear in `t`).
pub fn analytic_state(params: &RobotParams, u: &DVector<f64>, t: f64) -> DVector<f64> {
    let x0 = params.x0();
    let g = params.drift_at(u);
    match contact_time(params, u) {
        Some(t1) if t > t1 => &x0 + &g * t1 + joint_velocity(params, u) * (t - t1),
        _ => x0 + g * t,
    }
}

/// Analytic states on `mesh` under the constant control `u`, with per-step
/// multipliers fitted by signed least squares on the constraint generator.
pub fn analytic_trajectory(params: &RobotParams, u: &DVector<f64>, mesh: Mesh) -> DiscreteTrajectory {
    let (xs, _) = params.constraint();
    let h = mesh.step();
    let states: Vec<DVector<f64>> = (0..=mesh.steps).map(|i| analytic_state(params, u, mesh.node(i))).collect();
    let g = params.drift_at(u);
    let mut eta = Vec::with_capacity(mesh.steps);
    let mut residuals = Vec::with_capacity(mesh.steps);
    let mut max_normal_norm = 0.0f64;
    for i in 0..mesh.steps {
        // x' = g - eta x*  =>  eta x* = g - (x_{i+1} - x_i)/h
        let v = &g - (&states[i + 1] - &states[i]) / h;
        let e = xs.dot(&v) / xs.norm_squared();
        residuals.push((&v - &xs * e).norm());
        max_normal_norm = max_normal_norm.max((&xs * e).norm());
        eta.push(DVector::from_element(1, e));
    }
    DiscreteTrajectory {
        mesh,
        states,
        controls: vec![u.clone(); mesh.steps],
        eta,
        residuals,
        max_normal_norm,
    }
}

/// Literal data of a case together with the certificate built from them.
#[derive(Debug, Clone)]
pub struct PaperCase {
    pub control: DVector<f64>,
    pub contact_time: Option<f64>,
    /// Multiplier in the literal convention.
    pub eta: f64,
    pub endpoint: DVector<f64>,
    pub cost: f64,
    /// Only the first case comes with dual data.
    pub certificate: Option<DualCertificate>,
    pub trajectory: DiscreteTrajectory,
}

/// Case data in the literal convention on `mesh`.
///
/// For case 1 the certificate has `lambda = 1`, `psi = ubar`,
/// `q = (-1,-1,-sqrt 2,-sqrt 2)`, constant `p = -x(T) - eta x*` and atoms on the
/// cells after contact whose total is the least-squares coefficient of
/// `p - q` on `x*`.
pub fn paper_certificate(case: u8, mesh: Mesh) -> Result<PaperCase> {
    let params = RobotParams::with_convention(Convention::PaperLiteral);
    if (mesh.horizon - params.horizon).abs() > 1e-12 {
        return Err(Error::Invalid("mesh horizon must equal the robot horizon".into()));
    }
    let u = case_control(case)?;
    let t1 = contact_time(&params, &u);
    let eta = eta_closed_form(&params, &u);
    let endpoint = analytic_state(&params, &u, params.horizon);
    let cost = 0.5 * endpoint.norm_squared();
    let trajectory = analytic_trajectory(&params, &u, mesh);
    let certificate = if case == 1 {
        let (xs, _) = params.constraint();
        let steps = mesh.steps;
        let p = -&endpoint - &xs * eta;
        let r2 = std::f64::consts::SQRT_2;
        let q = DVector::from_column_slice(&[-1.0, -1.0, -r2, -r2]);
        let mut cert = DualCertificate::zeros(steps, 4, 2, 1);
        cert.lambda = 1.0;
        cert.p = vec![p.clone(); steps + 1];
        cert.q = vec![q.clone(); steps + 1];
        cert.psi = vec![u.clone(); steps];
        cert.eta_t = DVector::from_element(1, eta);
        let total = xs.dot(&(&p - &q)) / xs.norm_squared();
        let start = t1.unwrap_or(params.horizon);
        let span = params.horizon - start;
        if span > 0.0 {
            for i in 0..steps {
                let a = mesh.node(i).max(start);
                let b = mesh.node(i + 1);
                if b > a {
                    cert.gamma[i] = DVector::from_element(1, total * (b - a) / span);
                }
            }
        }
        Some(cert)
    } else {
        None
    };
    Ok(PaperCase {
        control: u,
        contact_time: t1,
        eta,
        endpoint,
        cost,
        certificate,
        trajectory,
    })
}
