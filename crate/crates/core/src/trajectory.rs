//! Trajectory generation and the per-point compensation sweep.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::assembly::{
    assembly_deflection, command_from_targets, compliance_forward, AssemblyError, AssemblyOptions, AssemblyState,
    ParallelManipulator,
};
use crate::chain::{ChainElement, ChainState, JointType};
use crate::compensator::{compensate_point_seeded, CompensationError, PointSeed, SchemeConfig};
use crate::config::{ConfigError, RunConfig};
use crate::load::MillingLoad;
use crate::se3::{apply_twist, transport_wrench, Pose, Wrench};

#[derive(Clone, Debug, PartialEq)]
pub struct CircleSpec {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub normal: Vector3<f64>,
    pub points: usize,
    /// Constant platform orientation along the circle.
    pub orientation: Vector3<f64>,
    pub start_angle: f64,
}

impl CircleSpec {
    pub fn new(center: Vector3<f64>, radius: f64, points: usize) -> Self {
        Self {
            center,
            radius,
            normal: Vector3::z(),
            points,
            orientation: Vector3::zeros(),
            start_angle: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(ConfigError::BadConfig(format!("circle radius must be positive, got {}", self.radius)));
        }
        if self.points < 2 {
            return Err(ConfigError::BadConfig(format!("circle needs at least 2 points, got {}", self.points)));
        }
        if (self.normal.norm() - 1.0).abs() > 1e-12 {
            return Err(ConfigError::BadConfig("circle normal must be a unit vector".into()));
        }
        Pose::new(self.center, self.orientation).map_err(|e| ConfigError::BadConfig(format!("circle orientation: {e}")))?;
        Ok(())
    }

    /// In-plane axes `(u, v)` with `u x v = normal`.
    pub fn plane_axes(&self) -> (Vector3<f64>, Vector3<f64>) {
        plane_axes(&self.normal)
    }
}

fn plane_axes(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let mut k = 0;
    for i in 1..3 {
        if n[i].abs() < n[k].abs() {
            k = i;
        }
    }
    let e = Vector3::ith(k, 1.0);
    let u = (e - n * n.dot(&e)).normalize();
    (u, n.cross(&u))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Trajectory {
    Circle(CircleSpec),
    /// Explicit poses; point `k` of `n` gets `phi = 2 pi k / n`.
    Polyline(Vec<Pose>),
}

/// Uniformly spaced platform poses on the circle, starting at
/// `start_angle`.
pub fn gen_circle(spec: &CircleSpec) -> Result<Vec<(f64, Pose)>, ConfigError> {
    spec.validate()?;
    let (u, v) = spec.plane_axes();
    (0..spec.points)
        .map(|k| {
            let phi = spec.start_angle + TAU * k as f64 / spec.points as f64;
            let p = spec.center + (u * phi.cos() + v * phi.sin()) * spec.radius;
            Pose::new(p, spec.orientation)
                .map(|pose| (phi, pose))
                .map_err(|e| ConfigError::BadConfig(e.to_string()))
        })
        .collect()
}

pub fn polyline(poses: &[Pose]) -> Result<Vec<(f64, Pose)>, ConfigError> {
    if poses.len() < 2 {
        return Err(ConfigError::BadConfig("polyline needs at least 2 poses".into()));
    }
    let n = poses.len() as f64;
    Ok(poses.iter().enumerate().map(|(k, p)| (TAU * k as f64 / n, *p)).collect())
}

pub fn trajectory_points(t: &Trajectory) -> Result<Vec<(f64, Pose)>, ConfigError> {
    match t {
        Trajectory::Circle(c) => gen_circle(c),
        Trajectory::Polyline(p) => polyline(p),
    }
}

/// Cutting wrench about the platform origin at `target`: forces in the
/// trajectory plane frame, tool axis carried by the platform orientation.
pub fn point_wrench(load: &MillingLoad, phi: f64, normal: &Vector3<f64>, target: &Pose) -> Wrench {
    let (u, v) = plane_axes(normal);
    let frame = Matrix3::from_columns(&[u, v, *normal]);
    let force = frame * load.force(phi);
    let tip = -(target.rotation_matrix() * load.tool_axis()) * load.tool_length();
    transport_wrench(&Wrench::from_force(force), &tip, &Vector3::zeros())
}

#[derive(Clone, Debug, PartialEq)]
pub enum RowStatus {
    Converged,
    /// The iteration stopped above tolerance.
    NotConverged,
    Failed(String),
}

impl RowStatus {
    pub fn label(&self) -> String {
        match self {
            RowStatus::Converged => "converged".into(),
            RowStatus::NotConverged => "not_converged".into(),
            RowStatus::Failed(m) => format!("failed: {m}"),
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, RowStatus::Converged)
    }
}

/// One trajectory point. Poses that could not be computed are `None`.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub phi: f64,
    pub target: Pose,
    /// Unloaded pose with chain errors only.
    pub eps_shifted: Option<Pose>,
    /// Loaded pose of the error-free manipulator.
    pub load_shifted: Option<Pose>,
    /// Loaded pose with chain errors, uncompensated commands.
    pub uncompensated_loaded: Option<Pose>,
    pub adjusted_target: Option<Pose>,
    pub delta_rho: Vec<f64>,
    pub tau: Vec<f64>,
    /// Position distance between the uncompensated loaded pose and the target, m.
    pub uncompensated_error: f64,
    pub residual: f64,
    pub iterations: usize,
    pub status: RowStatus,
}

#[derive(Clone, Debug)]
pub struct SweepSettings {
    pub scheme: SchemeConfig,
    pub workers: usize,
}

/// Joint type of every actuator, per chain, for labelling flattened row
/// vectors.
pub fn actuator_layout(manip: &ParallelManipulator) -> Vec<Vec<JointType>> {
    manip
        .chains()
        .iter()
        .map(|c| {
            c.elements()
                .iter()
                .filter_map(|e| match e {
                    ChainElement::Actuated { axis, .. } => Some(axis.joint),
                    _ => None,
                })
                .collect()
        })
        .collect()
}

/// Runs the configured sweep with `workers` threads. Rows come back in
/// trajectory order and do not depend on the worker count.
pub fn run_sweep(cfg: &RunConfig, workers: usize) -> Result<Vec<SweepRow>, ConfigError> {
    let points = trajectory_points(&cfg.trajectory)?;
    let normal = match &cfg.trajectory {
        Trajectory::Circle(c) => c.normal,
        Trajectory::Polyline(_) => Vector3::z(),
    };
    let settings = SweepSettings {
        scheme: cfg.scheme,
        workers,
    };
    Ok(sweep(&cfg.manipulator, &cfg.load, &normal, &points, &settings))
}

pub fn sweep(
    manip: &ParallelManipulator,
    load: &MillingLoad,
    normal: &Vector3<f64>,
    points: &[(f64, Pose)],
    settings: &SweepSettings,
) -> Vec<SweepRow> {
    // sequential warm-start pass: rigid inverse kinematics along the path
    let opts = AssemblyOptions::default();
    let mut seeds = Vec::with_capacity(points.len());
    let mut seed = manip.home_states();
    for (_, t) in points {
        let m = manip.m();
        match command_from_targets(manip, &vec![*t; m], &seed, &opts.chain) {
            Ok(states) => {
                seed = states.clone();
                seeds.push(Some(states));
            }
            Err(_) => seeds.push(None),
        }
    }

    let work = |(k, (phi, t)): (usize, &(f64, Pose))| -> SweepRow {
        let f = point_wrench(load, *phi, normal, t);
        match &seeds[k] {
            Some(s) => sweep_point(manip, *phi, t, &f, s, &settings.scheme),
            None => failed_row(*phi, t, "inverse kinematics failed at the target".into()),
        }
    };

    let workers = settings.workers.max(1);
    if workers == 1 {
        return points.iter().enumerate().map(work).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| points.par_iter().enumerate().map(work).collect()),
        Err(e) => {
            log::warn!("cannot start {workers} workers ({e}); running sequentially");
            points.iter().enumerate().map(work).collect()
        }
    }
}

fn failed_row(phi: f64, target: &Pose, msg: String) -> SweepRow {
    SweepRow {
        phi,
        target: *target,
        eps_shifted: None,
        load_shifted: None,
        uncompensated_loaded: None,
        adjusted_target: None,
        delta_rho: Vec::new(),
        tau: Vec::new(),
        uncompensated_error: f64::NAN,
        residual: f64::NAN,
        iterations: 0,
        status: RowStatus::Failed(msg),
    }
}

fn sweep_point(
    manip: &ParallelManipulator,
    phi: f64,
    t: &Pose,
    f: &Wrench,
    states: &[ChainState],
    scheme: &SchemeConfig,
) -> SweepRow {
    let opts = AssemblyOptions::default();
    let rho: Vec<_> = states.iter().map(|s| s.rho.clone()).collect();
    let mut row = failed_row(phi, t, String::new());
    let mut problems: Vec<String> = Vec::new();

    let uncompensated = || -> Result<(Pose, Pose, Pose), AssemblyError> {
        let guess = if manip.is_perfect() {
            *t
        } else {
            apply_twist(t, &assembly_deflection(manip, t)?)?
        };
        let seed = AssemblyState::unloaded(guess, states.to_vec());
        let (eps, eps_state) = compliance_forward(manip, &rho, &Wrench::zero(), &seed, &opts)?;
        let perfect = manip.perfect();
        let (load, _) = compliance_forward(&perfect, &rho, f, &AssemblyState::unloaded(*t, states.to_vec()), &opts)?;
        let (both, _) = compliance_forward(manip, &rho, f, &eps_state, &opts)?;
        Ok((eps, load, both))
    };
    match uncompensated() {
        Ok((eps, load, both)) => {
            row.eps_shifted = Some(eps);
            row.load_shifted = Some(load);
            row.uncompensated_loaded = Some(both);
            row.uncompensated_error = (both.position() - t.position()).norm();
        }
        Err(e) => problems.push(format!("uncompensated equilibrium: {e}")),
    }

    let seed = PointSeed {
        chain_states: states.to_vec(),
    };
    match compensate_point_seeded(manip, t, f, scheme, &seed) {
        Ok(r) => {
            row.adjusted_target = Some(r.adjusted_target);
            row.delta_rho = r.delta_rho.iter().flat_map(|v| v.iter().copied()).collect();
            row.tau = r.tau.iter().flat_map(|v| v.iter().copied()).collect();
            row.residual = r.residual;
            row.iterations = r.iterations;
            row.status = if r.converged { RowStatus::Converged } else { RowStatus::NotConverged };
        }
        Err(e) => {
            if let CompensationError::AtStage { source, .. } = &e {
                if let CompensationError::NoConvergence { iterations, residual } = source.as_ref() {
                    row.iterations = *iterations;
                    row.residual = *residual;
                }
            }
            problems.push(format!("compensation: {e}"));
        }
    }
    if !problems.is_empty() {
        row.status = RowStatus::Failed(problems.join("; "));
    }
    row
}
