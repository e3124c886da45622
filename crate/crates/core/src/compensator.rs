//! Off-line adjustment of the commanded platform pose so that the loaded
//! manipulator lands on the desired one.

use std::fmt;

use nalgebra::{DVector, Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{
    aggregate_stiffness, assembly_deflection, command_from_targets, compliance_forward, wrench_at,
    AssemblyError, AssemblyOptions, AssemblyState, ParallelManipulator, StiffnessMode,
};
use crate::chain::{actuator_forces, ChainEquilibrium, ChainState};
use crate::se3::{apply_twist, pose_delta, Pose, StiffnessMatrix, Twist, Wrench};

const FD_STEP: f64 = 1e-7;
const MAX_CONDITION: f64 = 1e12;
const DIVERGENCE_RUN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Newton iteration on the adjusted target with a finite-difference
    /// derivative of the holding wrench.
    Newton,
    /// Relaxed iteration with the unloaded Cartesian stiffness fixed at the
    /// desired pose.
    FixedMatrix,
    /// Relaxed iteration on the pose error of the loaded equilibrium.
    MatrixFree,
    /// Single linear correction `t0 - K^-1 F`.
    LinearOneShot,
}

impl Scheme {
    pub fn label(&self) -> &'static str {
        match self {
            Scheme::Newton => "newton",
            Scheme::FixedMatrix => "fixed",
            Scheme::MatrixFree => "free",
            Scheme::LinearOneShot => "linear",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "newton" => Ok(Scheme::Newton),
            "fixed" | "fixed_matrix" => Ok(Scheme::FixedMatrix),
            "free" | "matrix_free" => Ok(Scheme::MatrixFree),
            "linear" | "linear_one_shot" => Ok(Scheme::LinearOneShot),
            other => Err(format!("unknown scheme '{other}' (expected newton, fixed, free or linear)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub alpha: f64,
    /// Tolerance on the loaded pose error, m (rotations times the
    /// characteristic length).
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::MatrixFree,
            alpha: 0.5,
            tol: 1e-9,
            max_iter: 50,
        }
    }
}

impl SchemeConfig {
    pub fn new(scheme: Scheme, alpha: f64, tol: f64, max_iter: usize) -> Result<Self, CompensationError> {
        let cfg = Self { scheme, alpha, tol, max_iter };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CompensationError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(CompensationError::InvalidConfig(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.tol > 0.0) {
            return Err(CompensationError::InvalidConfig(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(CompensationError::InvalidConfig("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Assembly deflection and per-chain corrections.
    Corrections,
    /// Iteration for the adjusted target.
    Scheme,
    /// Actuator coordinates at the corrected targets.
    InverseKinematics,
    /// Actuator loads at the loaded equilibrium.
    ActuatorForces,
    /// Loaded equilibrium at the adjusted target.
    Verification,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Corrections => "corrections",
            Stage::Scheme => "scheme",
            Stage::InverseKinematics => "inverse kinematics",
            Stage::ActuatorForces => "actuator forces",
            Stage::Verification => "verification",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompensationError {
    #[error("invalid scheme configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("iteration diverges at alpha {alpha} (residual {residual:e} after {iterations} iterations); reduce alpha")]
    Divergence { iterations: usize, residual: f64, alpha: f64 },
    #[error("singular tangent of the holding wrench (condition {condition:e})")]
    SingularKtp { condition: f64 },
    #[error("singular Cartesian stiffness (condition {condition:e})")]
    SingularKC { condition: f64 },
    #[error("{stage}: {source}")]
    AtStage { stage: Stage, source: Box<CompensationError> },
}

impl From<crate::se3::Se3Error> for CompensationError {
    fn from(e: crate::se3::Se3Error) -> Self {
        CompensationError::Assembly(AssemblyError::Se3(e))
    }
}

impl CompensationError {
    /// The error without its pipeline stage.
    pub fn root(&self) -> &CompensationError {
        match self {
            CompensationError::AtStage { source, .. } => source.root(),
            e => e,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CompensationResult {
    pub adjusted_target: Pose,
    /// Per-chain target corrections `dt0 + dt_eps - eps_i`.
    pub per_chain_targets: Vec<Twist>,
    pub rho: Vec<DVector<f64>>,
    /// `rho` minus the rigid inverse kinematics at the desired pose.
    pub delta_rho: Vec<DVector<f64>>,
    pub tau: Vec<DVector<f64>>,
    pub residual: f64,
    pub iterations: usize,
    pub scheme_used: Scheme,
    /// Residual within tolerance; always set for the one-shot scheme, which
    /// is not driven to tolerance.
    pub converged: bool,
    /// Residual at every evaluated iterate, starting from the desired pose.
    pub residual_history: Vec<f64>,
    /// Loaded equilibrium at the adjusted target.
    pub loaded: AssemblyState,
}

/// Warm-start data for one pose.
#[derive(Clone, Debug)]
pub struct PointSeed {
    pub chain_states: Vec<ChainState>,
}

impl PointSeed {
    pub fn home(manip: &ParallelManipulator) -> Self {
        Self { chain_states: manip.home_states() }
    }
}

/// Per-chain corrections `dt0 + dt_eps - eps_i` from a known deflection.
pub fn chain_corrections(delta_t0: &Twist, deflection: &Twist, errors: &[Twist]) -> Vec<Twist> {
    errors.iter().map(|e| *delta_t0 + *deflection - *e).collect()
}

/// Per-chain corrections with the assembly deflection evaluated at `at`.
pub fn per_chain_targets(
    manip: &ParallelManipulator,
    delta_t0: &Twist,
    at: &Pose,
) -> Result<Vec<Twist>, CompensationError> {
    let deflection = if manip.is_perfect() {
        Twist::zero()
    } else {
        assembly_deflection(manip, at)?
    };
    Ok(chain_corrections(delta_t0, &deflection, &manip.chain_errors_at(at)?))
}

type Staged<T> = Result<T, (Stage, CompensationError)>;

fn at<E: Into<CompensationError>>(stage: Stage) -> impl Fn(E) -> (Stage, CompensationError) {
    move |e| (stage, e.into())
}

/// State of one compensation problem: desired pose, load, corrections and
/// warm starts.
struct Problem<'a> {
    manip: &'a ParallelManipulator,
    t0: Pose,
    f: Wrench,
    offsets: Vec<Twist>,
    opts: AssemblyOptions,
    ik_seed: Vec<ChainState>,
    hold_seed: AssemblyState,
    loaded_seed: AssemblyState,
}

struct Evaluation {
    states: Vec<ChainState>,
    loaded: AssemblyState,
    pose: Pose,
}

impl<'a> Problem<'a> {
    fn new(manip: &'a ParallelManipulator, t0: &Pose, f: &Wrench, seed: &PointSeed) -> Staged<Self> {
        let offsets = per_chain_targets(manip, &Twist::zero(), t0).map_err(at(Stage::Corrections))?;
        Ok(Self {
            manip,
            t0: *t0,
            f: *f,
            offsets,
            opts: AssemblyOptions::default(),
            ik_seed: seed.chain_states.clone(),
            hold_seed: AssemblyState::unloaded(*t0, seed.chain_states.clone()),
            loaded_seed: AssemblyState::unloaded(*t0, seed.chain_states.clone()),
        })
    }

    fn lc(&self) -> f64 {
        self.opts.chain.char_length
    }

    fn chain_targets(&self, s: &Pose) -> Result<Vec<Pose>, CompensationError> {
        let d = pose_delta(&self.t0, s)?;
        self.offsets
            .iter()
            .map(|c| apply_twist(&self.t0, &(d + *c)).map_err(CompensationError::from))
            .collect()
    }

    fn command(&self, s: &Pose) -> Result<Vec<ChainState>, CompensationError> {
        let targets = self.chain_targets(s)?;
        Ok(command_from_targets(self.manip, &targets, &self.ik_seed, &self.opts.chain)?)
    }

    fn rho(states: &[ChainState]) -> Vec<DVector<f64>> {
        states.iter().map(|s| s.rho.clone()).collect()
    }

    /// Wrench holding the platform at `t0` with actuators commanded to `s`.
    fn hold(&self, s: &Pose) -> Result<(Wrench, AssemblyState), CompensationError> {
        let states = self.command(s)?;
        Ok(wrench_at(self.manip, &Self::rho(&states), &self.t0, &self.hold_seed, &self.opts)?)
    }

    /// Loaded equilibrium with actuators commanded to `s`.
    fn deflect(&self, s: &Pose) -> Result<Evaluation, CompensationError> {
        let states = self.command(s)?;
        let rho = Self::rho(&states);
        let mut seed = self.loaded_seed.clone();
        for (c, st) in seed.chain_states.iter_mut().zip(&states) {
            c.rho = st.rho.clone();
        }
        let (pose, loaded) = compliance_forward(self.manip, &rho, &self.f, &seed, &self.opts)?;
        Ok(Evaluation { states, loaded, pose })
    }

    fn remember(&mut self, e: &Evaluation) {
        self.ik_seed = e.states.clone();
        self.loaded_seed = e.loaded.clone();
    }

    fn residual_of(&self, e: &Evaluation) -> Result<(f64, Twist), CompensationError> {
        let err = pose_delta(&e.pose, &self.t0)?;
        Ok((err.scaled_norm(self.lc()), err))
    }

    fn fd_tangent(&self, s: &Pose) -> Result<StiffnessMatrix, CompensationError> {
        let mut k = Matrix6::zeros();
        for c in 0..6 {
            let mut v = Vector6::zeros();
            v[c] = FD_STEP;
            let d = Twist::from_vector(&v);
            let (wp, _) = self.hold(&apply_twist(s, &d)?)?;
            let (wm, _) = self.hold(&apply_twist(s, &(-d))?)?;
            k.set_column(c, &((wp - wm).to_vector() / (2.0 * FD_STEP)));
        }
        Ok(StiffnessMatrix(k))
    }

    fn finish(&self, s: Pose, eval: Evaluation, cfg: &SchemeConfig, iterations: usize, history: Vec<f64>) -> Staged<CompensationResult> {
        let residual = *history.last().unwrap_or(&f64::NAN);
        let nominal = command_from_targets(self.manip, &vec![self.t0; self.manip.m()], &eval.states, &self.opts.chain)
            .map_err(at(Stage::InverseKinematics))?;
        let rho = Self::rho(&eval.states);
        let delta_rho = rho.iter().zip(&nominal).map(|(r, n)| r - &n.rho).collect();
        let tau = self
            .manip
            .actual_chains()
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let eq = ChainEquilibrium {
                    state: eval.loaded.chain_states[i].clone(),
                    tip_pose: eval.pose,
                    reaction: eval.loaded.chain_reactions[i],
                    converged: true,
                    iterations: 0,
                    residual: 0.0,
                };
                actuator_forces(c, &eq)
            })
            .collect();
        let d = pose_delta(&self.t0, &s).map_err(at(Stage::Verification))?;
        Ok(CompensationResult {
            adjusted_target: s,
            per_chain_targets: self.offsets.iter().map(|c| d + *c).collect(),
            rho,
            delta_rho,
            tau,
            residual,
            iterations,
            scheme_used: cfg.scheme,
            converged: cfg.scheme == Scheme::LinearOneShot || residual <= cfg.tol,
            residual_history: history,
            loaded: eval.loaded,
        })
    }
}

fn aggregate_kc(problem: &Problem) -> Staged<StiffnessMatrix> {
    let k = aggregate_stiffness(problem.manip, &problem.t0, StiffnessMode::Linear, &problem.opts)
        .map_err(at(Stage::Scheme))?;
    let condition = k.condition_number();
    if !(condition <= MAX_CONDITION) {
        return Err((Stage::Scheme, CompensationError::SingularKC { condition }));
    }
    Ok(k)
}

fn run(manip: &ParallelManipulator, t0: &Pose, f: &Wrench, cfg: &SchemeConfig, seed: &PointSeed) -> Staged<CompensationResult> {
    cfg.validate().map_err(at(Stage::Scheme))?;
    let mut p = Problem::new(manip, t0, f, seed)?;
    let scheme_err = at::<CompensationError>(Stage::Scheme);

    if cfg.scheme == Scheme::LinearOneShot {
        let k = aggregate_kc(&p)?;
        let d = k
            .solve(f)
            .ok_or((Stage::Scheme, CompensationError::SingularKC { condition: f64::INFINITY }))?;
        let s = apply_twist(t0, &(-d)).map_err(at(Stage::Scheme))?;
        let eval = p.deflect(&s).map_err(at(Stage::Verification))?;
        let (r0, _) = initial_residual(&mut p)?;
        let (r, _) = p.residual_of(&eval).map_err(at(Stage::Verification))?;
        return p.finish(s, eval, cfg, 1, vec![r0, r]);
    }

    let kc = if cfg.scheme == Scheme::FixedMatrix { Some(aggregate_kc(&p)?) } else { None };
    let mut alpha = cfg.alpha;
    let mut halved = false;
    let mut rising = 0;
    let mut s = *t0;
    let mut eval = p.deflect(&s).map_err(&scheme_err)?;
    p.remember(&eval);
    let (mut r, mut err) = p.residual_of(&eval).map_err(&scheme_err)?;
    let mut history = vec![r];
    let mut iterations = 0;

    while r > cfg.tol {
        if iterations >= cfg.max_iter {
            return Err((Stage::Scheme, CompensationError::NoConvergence { iterations, residual: r }));
        }
        let step = match cfg.scheme {
            Scheme::MatrixFree => err * alpha,
            Scheme::FixedMatrix => {
                let (w, hold) = p.hold(&s).map_err(&scheme_err)?;
                p.hold_seed = hold;
                let k = kc.as_ref().expect("computed above");
                let d = k
                    .solve(&(*f - w))
                    .ok_or((Stage::Scheme, CompensationError::SingularKC { condition: f64::INFINITY }))?;
                -(d * alpha)
            }
            Scheme::Newton => {
                let (w, hold) = p.hold(&s).map_err(&scheme_err)?;
                p.hold_seed = hold;
                let ktp = p.fd_tangent(&s).map_err(&scheme_err)?;
                let condition = ktp.condition_number();
                if !(condition <= MAX_CONDITION) {
                    return Err((Stage::Scheme, CompensationError::SingularKtp { condition }));
                }
                ktp.0
                    .lu()
                    .solve(&(*f - w).to_vector())
                    .map(|v| Twist::from_vector(&v))
                    .ok_or((Stage::Scheme, CompensationError::SingularKtp { condition: f64::INFINITY }))?
            }
            Scheme::LinearOneShot => unreachable!("handled above"),
        };
        s = apply_twist(&s, &step).map_err(at(Stage::Scheme))?;
        eval = p.deflect(&s).map_err(&scheme_err)?;
        p.remember(&eval);
        iterations += 1;
        let previous = r;
        (r, err) = p.residual_of(&eval).map_err(&scheme_err)?;
        history.push(r);
        log::trace!("{} iteration {iterations}: residual {r:e}", cfg.scheme);

        if r > previous {
            rising += 1;
            if rising >= DIVERGENCE_RUN {
                if halved || cfg.scheme == Scheme::Newton {
                    return Err((Stage::Scheme, CompensationError::Divergence { iterations, residual: r, alpha }));
                }
                alpha *= 0.5;
                halved = true;
                rising = 0;
                log::warn!("residual grew {DIVERGENCE_RUN} times in a row; alpha reduced to {alpha}");
            }
        } else {
            rising = 0;
        }
    }
    p.finish(s, eval, cfg, iterations, history)
}

fn initial_residual(p: &mut Problem) -> Staged<(f64, Twist)> {
    let t0 = p.t0;
    let eval = p.deflect(&t0).map_err(at(Stage::Verification))?;
    p.residual_of(&eval).map_err(at(Stage::Verification))
}

fn unstaged(r: Staged<CompensationResult>) -> Result<CompensationResult, CompensationError> {
    r.map_err(|(_, e)| e)
}

fn with_scheme(cfg: &SchemeConfig, scheme: Scheme) -> SchemeConfig {
    SchemeConfig { scheme, ..*cfg }
}

pub fn newton_scheme(manip: &ParallelManipulator, t0: &Pose, f: &Wrench, cfg: &SchemeConfig) -> Result<CompensationResult, CompensationError> {
    unstaged(run(manip, t0, f, &with_scheme(cfg, Scheme::Newton), &PointSeed::home(manip)))
}

pub fn fixed_matrix_scheme(manip: &ParallelManipulator, t0: &Pose, f: &Wrench, cfg: &SchemeConfig) -> Result<CompensationResult, CompensationError> {
    unstaged(run(manip, t0, f, &with_scheme(cfg, Scheme::FixedMatrix), &PointSeed::home(manip)))
}

pub fn matrix_free_scheme(manip: &ParallelManipulator, t0: &Pose, f: &Wrench, cfg: &SchemeConfig) -> Result<CompensationResult, CompensationError> {
    unstaged(run(manip, t0, f, &with_scheme(cfg, Scheme::MatrixFree), &PointSeed::home(manip)))
}

pub fn linear_one_shot(manip: &ParallelManipulator, t0: &Pose, f: &Wrench) -> Result<CompensationResult, CompensationError> {
    let cfg = SchemeConfig { scheme: Scheme::LinearOneShot, ..SchemeConfig::default() };
    unstaged(run(manip, t0, f, &cfg, &PointSeed::home(manip)))
}

/// Full procedure for one pose: corrections, scheme, inverse kinematics,
/// actuator loads and verification. Errors carry the failing stage.
pub fn compensate_point(manip: &ParallelManipulator, t0: &Pose, f: &Wrench, cfg: &SchemeConfig) -> Result<CompensationResult, CompensationError> {
    compensate_point_seeded(manip, t0, f, cfg, &PointSeed::home(manip))
}

pub fn compensate_point_seeded(
    manip: &ParallelManipulator,
    t0: &Pose,
    f: &Wrench,
    cfg: &SchemeConfig,
    seed: &PointSeed,
) -> Result<CompensationResult, CompensationError> {
    run(manip, t0, f, cfg, seed).map_err(|(stage, e)| CompensationError::AtStage { stage, source: Box::new(e) })
}
