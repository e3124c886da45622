//! Parallel manipulators built from elastic chains sharing one rigid platform.

use nalgebra::{DVector, Matrix6, Vector6};
use thiserror::Error;

use crate::chain::{
    cartesian_stiffness_linear, equilibrium_given_tip_seeded, forward_geometry, inverse_kinematics,
    tangent_stiffness, ChainEquilibrium, ChainError, ChainModel, ChainState, SolverOptions,
};
use crate::se3::{apply_twist, pose_delta, Pose, Se3Error, StiffnessMatrix, Twist, Wrench};

const MAX_AGGREGATE_CONDITION: f64 = 1e12;
const FD_STEP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssemblyError {
    #[error("invalid assembly: {0}")]
    InvalidAssembly(String),
    #[error("chain {chain}: {source}")]
    Chain { chain: usize, source: ChainError },
    #[error("platform equilibrium not reached after {iterations} iterations (force residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("assembly lost stability at load fraction {load_fraction}")]
    StabilityLoss { load_fraction: f64 },
    #[error("aggregate stiffness is singular (condition {condition:e})")]
    SingularAggregate { condition: f64 },
    #[error(transparent)]
    Se3(#[from] Se3Error),
}

fn tag(chain: usize) -> impl Fn(ChainError) -> AssemblyError {
    move |source| AssemblyError::Chain { chain, source }
}

/// Solver settings for platform-level problems.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssemblyOptions {
    pub chain: SolverOptions,
    /// Tolerance on `|sum of reactions - applied wrench|`, N and N m.
    pub force_tol: f64,
    pub max_iter: usize,
    pub continuation_steps: usize,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        Self {
            chain: SolverOptions::default(),
            force_tol: 1e-9,
            max_iter: 50,
            continuation_steps: 4,
        }
    }
}

/// `m` chains whose tips are rigidly joined at a common platform frame.
///
/// `chains` are the nominal models used by the controller. Chain `i` as
/// built carries the base error `chain_errors[i]`: at the nominal actuator
/// coordinates of any pose its free tip sits at that pose shifted by the
/// error twist, which is taken about the platform home position.
#[derive(Clone, Debug)]
pub struct ParallelManipulator {
    chains: Vec<ChainModel>,
    actual: Vec<ChainModel>,
    chain_errors: Vec<Twist>,
    platform_frame: Pose,
}

impl ParallelManipulator {
    /// Nominal seeds are all-zero joint states; each chain must place its
    /// tip on `platform_frame` there.
    pub fn new(chains: Vec<ChainModel>, platform_frame: Pose) -> Result<Self, AssemblyError> {
        if chains.len() < 2 {
            return Err(AssemblyError::InvalidAssembly(format!(
                "a parallel manipulator needs at least 2 chains, got {}",
                chains.len()
            )));
        }
        for (i, c) in chains.iter().enumerate() {
            let tip = forward_geometry(c, &ChainState::zeros(c)).map_err(tag(i))?;
            let d = pose_delta(&platform_frame, &tip).map_err(|_| {
                AssemblyError::InvalidAssembly(format!("chain {i} home tip is far from the platform frame"))
            })?;
            if d.to_vector().norm() > 1e-9 {
                return Err(AssemblyError::InvalidAssembly(format!(
                    "chain {i} home tip misses the platform frame by {:e}",
                    d.to_vector().norm()
                )));
            }
        }
        let m = chains.len();
        Ok(Self {
            actual: chains.clone(),
            chains,
            chain_errors: vec![Twist::zero(); m],
            platform_frame,
        })
    }

    pub fn with_chain_errors(mut self, errors: Vec<Twist>) -> Result<Self, AssemblyError> {
        if errors.len() != self.chains.len() {
            return Err(AssemblyError::InvalidAssembly(format!(
                "{} chain errors for {} chains",
                errors.len(),
                self.chains.len()
            )));
        }
        let home = self.platform_frame;
        self.actual = Vec::with_capacity(errors.len());
        for (c, e) in self.chains.iter().zip(&errors) {
            let shifted = apply_twist(&home, e)?;
            // mount M with M * home = shifted
            let mount = shifted.compose(&home.inverse());
            self.actual.push(if e.is_zero() { c.clone() } else { c.with_base_transform(&mount) });
        }
        self.chain_errors = errors;
        Ok(self)
    }

    /// Errors equivalent to rotating the mounting of every chain's first
    /// actuated joint by `angle` about that joint's axis, measured at home.
    pub fn with_actuator_mounting_errors(self, angle: f64) -> Result<Self, AssemblyError> {
        let mut errors = Vec::with_capacity(self.chains.len());
        for (i, c) in self.chains.iter().enumerate() {
            let perturbed = c.with_actuator_mounting_error(angle);
            let tip = forward_geometry(&perturbed, &ChainState::zeros(&perturbed)).map_err(tag(i))?;
            errors.push(pose_delta(&self.platform_frame, &tip)?);
        }
        self.with_chain_errors(errors)
    }

    /// A copy with all chain errors removed.
    pub fn perfect(&self) -> Self {
        Self {
            actual: self.chains.clone(),
            chains: self.chains.clone(),
            chain_errors: vec![Twist::zero(); self.chains.len()],
            platform_frame: self.platform_frame,
        }
    }

    pub fn chains(&self) -> &[ChainModel] {
        &self.chains
    }

    /// Chain models including their errors.
    pub fn actual_chains(&self) -> &[ChainModel] {
        &self.actual
    }

    pub fn chain_errors(&self) -> &[Twist] {
        &self.chain_errors
    }

    /// End-point shift of every actual chain relative to its nominal chain
    /// at platform pose `at`; equals [`Self::chain_errors`] at home.
    pub fn chain_errors_at(&self, at: &Pose) -> Result<Vec<Twist>, AssemblyError> {
        let home = self.platform_frame;
        self.chain_errors
            .iter()
            .map(|e| {
                if e.is_zero() {
                    return Ok(Twist::zero());
                }
                let mount = apply_twist(&home, e)?.compose(&home.inverse());
                Ok(pose_delta(at, &mount.compose(at))?)
            })
            .collect()
    }

    pub fn platform_frame(&self) -> &Pose {
        &self.platform_frame
    }

    pub fn m(&self) -> usize {
        self.chains.len()
    }

    pub fn is_perfect(&self) -> bool {
        self.chain_errors.iter().all(Twist::is_zero)
    }

    pub fn home_states(&self) -> Vec<ChainState> {
        self.chains.iter().map(ChainState::zeros).collect()
    }
}

/// Platform pose with the per-chain equilibria holding it there.
#[derive(Clone, Debug)]
pub struct AssemblyState {
    pub platform_pose: Pose,
    pub chain_states: Vec<ChainState>,
    pub chain_reactions: Vec<Wrench>,
}

impl AssemblyState {
    /// Starting guess at `pose` with the given joint states and no load.
    pub fn unloaded(platform_pose: Pose, chain_states: Vec<ChainState>) -> Self {
        let m = chain_states.len();
        Self {
            platform_pose,
            chain_states,
            chain_reactions: vec![Wrench::zero(); m],
        }
    }

    pub fn net_wrench(&self) -> Wrench {
        self.chain_reactions.iter().copied().sum()
    }

    fn equilibria(&self) -> Vec<ChainEquilibrium> {
        self.chain_states
            .iter()
            .zip(&self.chain_reactions)
            .map(|(s, w)| ChainEquilibrium {
                state: s.clone(),
                tip_pose: self.platform_pose,
                reaction: *w,
                converged: true,
                iterations: 0,
                residual: 0.0,
            })
            .collect()
    }
}

/// Rigid-chain inverse kinematics of the nominal chains at `t0`.
pub fn command_from_target(manip: &ParallelManipulator, t0: &Pose) -> Result<Vec<DVector<f64>>, AssemblyError> {
    let targets = vec![*t0; manip.m()];
    let states = command_from_targets(manip, &targets, &manip.home_states(), &SolverOptions::default())?;
    Ok(states.into_iter().map(|s| s.rho).collect())
}

/// Per-chain inverse kinematics of the nominal chains at individual targets.
pub fn command_from_targets(
    manip: &ParallelManipulator,
    targets: &[Pose],
    seeds: &[ChainState],
    opts: &SolverOptions,
) -> Result<Vec<ChainState>, AssemblyError> {
    manip
        .chains
        .iter()
        .zip(targets)
        .zip(seeds)
        .enumerate()
        .map(|(i, ((c, t), s))| inverse_kinematics(c, t, s, opts).map_err(tag(i)))
        .collect()
}

/// External wrench needed to hold the platform at `t` with the actuators
/// locked at `rho`; the sum of the chain reactions.
pub fn wrench_at(
    manip: &ParallelManipulator,
    rho: &[DVector<f64>],
    t: &Pose,
    seed: &AssemblyState,
    opts: &AssemblyOptions,
) -> Result<(Wrench, AssemblyState), AssemblyError> {
    let eqs = chain_equilibria(manip, rho, t, seed, opts)?;
    let state = AssemblyState {
        platform_pose: *t,
        chain_reactions: eqs.iter().map(|e| e.reaction).collect(),
        chain_states: eqs.into_iter().map(|e| e.state).collect(),
    };
    Ok((state.net_wrench(), state))
}

fn chain_equilibria(
    manip: &ParallelManipulator,
    rho: &[DVector<f64>],
    t: &Pose,
    seed: &AssemblyState,
    opts: &AssemblyOptions,
) -> Result<Vec<ChainEquilibrium>, AssemblyError> {
    if rho.len() != manip.m() || seed.chain_states.len() != manip.m() {
        return Err(AssemblyError::InvalidAssembly(format!(
            "expected {} chains, got {} actuator vectors and {} seeds",
            manip.m(),
            rho.len(),
            seed.chain_states.len()
        )));
    }
    manip
        .actual
        .iter()
        .enumerate()
        .map(|(i, c)| {
            equilibrium_given_tip_seeded(c, &rho[i], t, &seed.chain_states[i], &seed.chain_reactions[i], &opts.chain)
                .map_err(tag(i))
        })
        .collect()
}

fn tangent_sum(manip: &ParallelManipulator, eqs: &[ChainEquilibrium], opts: &AssemblyOptions) -> Result<StiffnessMatrix, AssemblyError> {
    manip
        .actual
        .iter()
        .zip(eqs)
        .enumerate()
        .map(|(i, (c, e))| tangent_stiffness(c, e, &opts.chain).map_err(tag(i)))
        .sum()
}

/// Platform equilibrium under the external wrench `f`, starting from `seed`.
pub fn compliance_forward(
    manip: &ParallelManipulator,
    rho: &[DVector<f64>],
    f: &Wrench,
    seed: &AssemblyState,
    opts: &AssemblyOptions,
) -> Result<(Pose, AssemblyState), AssemblyError> {
    let (w0, start) = wrench_at(manip, rho, &seed.platform_pose, seed, opts)?;
    match newton_platform(manip, rho, f, &start, w0, opts) {
        Ok(s) => return Ok((s.platform_pose, s)),
        Err(e @ AssemblyError::StabilityLoss { .. }) => return Err(e),
        Err(e) => log::debug!("direct platform solve failed ({e}); continuing the load"),
    }

    // homotopy from the wrench already balanced at the seed
    let mut state = start;
    let mut lambda = 0.0;
    let mut increment = 1.0 / opts.continuation_steps.max(1) as f64;
    while lambda < 1.0 {
        let next = (lambda + increment).min(1.0);
        let target = w0 * (1.0 - next) + *f * next;
        let current = state.net_wrench();
        match newton_platform(manip, rho, &target, &state, current, opts) {
            Ok(s) => {
                state = s;
                lambda = next;
            }
            Err(AssemblyError::StabilityLoss { .. }) => {
                return Err(AssemblyError::StabilityLoss { load_fraction: next })
            }
            Err(e) => {
                increment *= 0.5;
                if increment < 1.0 / 4096.0 {
                    return Err(e);
                }
            }
        }
    }
    Ok((state.platform_pose, state))
}

fn newton_platform(
    manip: &ParallelManipulator,
    rho: &[DVector<f64>],
    f: &Wrench,
    start: &AssemblyState,
    w_start: Wrench,
    opts: &AssemblyOptions,
) -> Result<AssemblyState, AssemblyError> {
    let mut state = start.clone();
    let mut r = *f - w_start;
    let mut norm = r.norm();
    for it in 0..opts.max_iter {
        if norm <= opts.force_tol {
            return Ok(state);
        }
        let k = tangent_sum(manip, &state.equilibria(), opts)?;
        if !k.symmetric_part().is_positive_definite() {
            return Err(AssemblyError::StabilityLoss { load_fraction: 1.0 });
        }
        let d = k
            .solve(&r)
            .ok_or(AssemblyError::SingularAggregate { condition: f64::INFINITY })?;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let t = apply_twist(&state.platform_pose, &(d * alpha))?;
            if let Ok((w, s)) = wrench_at(manip, rho, &t, &state, opts) {
                let n = (*f - w).norm();
                if n < norm {
                    state = s;
                    r = *f - w;
                    norm = n;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(AssemblyError::NoConvergence { iterations: it + 1, residual: norm });
        }
    }
    if norm <= opts.force_tol {
        return Ok(state);
    }
    Err(AssemblyError::NoConvergence { iterations: opts.max_iter, residual: norm })
}

/// Stiffness-weighted mean of the chain errors:
/// `(sum K_i)^-1 sum K_i eps_i`.
pub fn weighted_deflection(stiffness: &[StiffnessMatrix], errors: &[Twist]) -> Result<Twist, AssemblyError> {
    let total: StiffnessMatrix = stiffness.iter().copied().sum();
    let condition = total.condition_number();
    if !(condition <= MAX_AGGREGATE_CONDITION) {
        return Err(AssemblyError::SingularAggregate { condition });
    }
    let rhs: Vector6<f64> = stiffness
        .iter()
        .zip(errors)
        .map(|(k, e)| k.matrix() * e.to_vector())
        .sum();
    let x = total
        .0
        .lu()
        .solve(&rhs)
        .ok_or(AssemblyError::SingularAggregate { condition: f64::INFINITY })?;
    Ok(Twist::from_vector(&x))
}

/// Platform deflection caused by assembling the erroneous chains at `at`,
/// from the unloaded linear chain stiffness matrices there.
pub fn assembly_deflection(manip: &ParallelManipulator, at: &Pose) -> Result<Twist, AssemblyError> {
    let ks = linear_chain_stiffness(manip, at)?;
    weighted_deflection(&ks, &manip.chain_errors_at(at)?)
}

fn linear_chain_stiffness(manip: &ParallelManipulator, at: &Pose) -> Result<Vec<StiffnessMatrix>, AssemblyError> {
    let states = command_from_targets(manip, &vec![*at; manip.m()], &manip.home_states(), &SolverOptions::default())?;
    manip
        .chains
        .iter()
        .zip(&states)
        .enumerate()
        .map(|(i, (c, s))| cartesian_stiffness_linear(c, s).map_err(tag(i)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StiffnessMode {
    /// Sum of the unloaded closed-form chain stiffness matrices.
    Linear,
    /// Finite differences of [`wrench_at`] around the equilibrium under the
    /// given wrench, actuators commanded to `at`.
    Nonlinear(Wrench),
}

/// Aggregate Cartesian stiffness of the platform at `at`.
pub fn aggregate_stiffness(
    manip: &ParallelManipulator,
    at: &Pose,
    mode: StiffnessMode,
    opts: &AssemblyOptions,
) -> Result<StiffnessMatrix, AssemblyError> {
    match mode {
        StiffnessMode::Linear => Ok(linear_chain_stiffness(manip, at)?.into_iter().sum()),
        StiffnessMode::Nonlinear(load) => {
            let states = command_from_targets(manip, &vec![*at; manip.m()], &manip.home_states(), &opts.chain)?;
            let rho: Vec<_> = states.iter().map(|s| s.rho.clone()).collect();
            let guess = if manip.is_perfect() {
                *at
            } else {
                apply_twist(at, &assembly_deflection(manip, at)?)?
            };
            let seed = AssemblyState::unloaded(guess, states);
            let (_, loaded) = compliance_forward(manip, &rho, &load, &seed, opts)?;
            let mut k = Matrix6::zeros();
            for c in 0..6 {
                let mut v = Vector6::zeros();
                v[c] = FD_STEP;
                let d = Twist::from_vector(&v);
                let plus = apply_twist(&loaded.platform_pose, &d)?;
                let minus = apply_twist(&loaded.platform_pose, &(-d))?;
                let (wp, _) = wrench_at(manip, &rho, &plus, &loaded, opts)?;
                let (wm, _) = wrench_at(manip, &rho, &minus, &loaded, opts)?;
                k.set_column(c, &((wp - wm).to_vector() / (2.0 * FD_STEP)));
            }
            Ok(StiffnessMatrix(k))
        }
    }
}
