use nalgebra::{DMatrix, DVector, Matrix6, Vector6};

use super::ik::scaled_error;
use super::kinematics::{evaluate, Kinematics};
use super::{ChainEquilibrium, ChainError, ChainModel, ChainState, SolverOptions, VarClass};
use crate::se3::{apply_twist, Pose, StiffnessMatrix, Twist, Wrench};

/// Condition estimates above this mark the Newton matrix as singular.
const MAX_CONDITION: f64 = 1e14;
const FD_STEP: f64 = 1e-7;

struct TipSystem {
    matrix: DMatrix<f64>,
    residual: DVector<f64>,
}

/// Stacked residual and Newton matrix for a chain held at `tip`. Unknowns
/// are `(q, theta, W / k)`; rows are `(pose error, spring balance / k,
/// passive balance / k)` with `k` the chain stiffness scale.
fn tip_system(
    chain: &ChainModel,
    kin: &Kinematics,
    state: &ChainState,
    tip: &nalgebra::Isometry3<f64>,
    w: &Wrench,
    lc: f64,
) -> TipSystem {
    let (nq, nt) = (chain.n_q(), chain.n_theta());
    let n = 6 + nq + nt;
    let k = chain.stiffness_scale();
    let jq = kin.jacobian(VarClass::Q, nq);
    let jt = kin.jacobian(VarClass::Theta, nt);
    let q_cls = (VarClass::Q, nq);
    let t_cls = (VarClass::Theta, nt);

    let mut a = DMatrix::zeros(n, n);
    let mut r = DVector::zeros(n);

    let e = scaled_error(tip, &kin.tip, lc);
    r.rows_mut(0, 6).copy_from(&e);
    let mut pose_block = DMatrix::zeros(6, nq + nt);
    pose_block.columns_mut(0, nq).copy_from(&jq);
    pose_block.columns_mut(nq, nt).copy_from(&jt);
    for row in 3..6 {
        pose_block.row_mut(row).scale_mut(lc);
    }
    a.view_mut((0, 0), (6, nq + nt)).copy_from(&pose_block);

    let wv = w.to_vector();
    let spring = chain.k_theta() * &state.theta - jt.transpose() * wv;
    r.rows_mut(6, nt).copy_from(&(spring / k));
    let h_tq = kin.load_hessian(w, t_cls, q_cls);
    let h_tt = kin.load_hessian(w, t_cls, t_cls);
    a.view_mut((6, 0), (nt, nq)).copy_from(&(-h_tq / k));
    a.view_mut((6, nq), (nt, nt)).copy_from(&((chain.k_theta() - h_tt) / k));
    a.view_mut((6, nq + nt), (nt, 6)).copy_from(&(-jt.transpose()));

    if nq > 0 {
        let passive = jq.transpose() * wv;
        r.rows_mut(6 + nt, nq).copy_from(&(passive / k));
        let h_qq = kin.load_hessian(w, q_cls, q_cls);
        let h_qt = kin.load_hessian(w, q_cls, t_cls);
        a.view_mut((6 + nt, 0), (nq, nq)).copy_from(&(h_qq / k));
        a.view_mut((6 + nt, nq), (nq, nt)).copy_from(&(h_qt / k));
        a.view_mut((6 + nt, nq + nt), (nq, 6)).copy_from(&jq.transpose());
    }
    TipSystem { matrix: a, residual: r }
}

fn factor(a: DMatrix<f64>) -> Result<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, ChainError> {
    let lu = a.lu();
    let u = lu.u();
    let d = u.diagonal().map(f64::abs);
    let (max, min) = (d.max(), d.min());
    let condition = if min == 0.0 { f64::INFINITY } else { max / min };
    if !(condition <= MAX_CONDITION) {
        return Err(ChainError::SingularSystem { condition });
    }
    Ok(lu)
}

/// Equilibrium of the chain with actuators at `rho` and its tip held at
/// `tip`. The returned reaction is the wrench the holder applies to the tip.
pub fn equilibrium_given_tip(
    chain: &ChainModel,
    rho: &DVector<f64>,
    tip: &Pose,
    seed: &ChainState,
    opts: &SolverOptions,
) -> Result<ChainEquilibrium, ChainError> {
    equilibrium_given_tip_seeded(chain, rho, tip, seed, &Wrench::zero(), opts)
}

/// As [`equilibrium_given_tip`], warm-started from a previous reaction.
pub fn equilibrium_given_tip_seeded(
    chain: &ChainModel,
    rho: &DVector<f64>,
    tip: &Pose,
    seed: &ChainState,
    seed_reaction: &Wrench,
    opts: &SolverOptions,
) -> Result<ChainEquilibrium, ChainError> {
    let mut state = seed.clone().with_rho(rho.clone());
    chain.check_state(&state)?;
    let (nq, nt) = (chain.n_q(), chain.n_theta());
    let k = chain.stiffness_scale();
    let lc = opts.char_length;
    let target = tip.to_isometry();
    let mut w = *seed_reaction;

    let mut kin = evaluate(chain, &state);
    let mut sys = tip_system(chain, &kin, &state, &target, &w, lc);
    let mut norm = sys.residual.norm();

    let trial_at = |state: &ChainState, w: &Wrench, step: &DVector<f64>, alpha: f64| {
        let mut trial = state.clone();
        for i in 0..nq {
            trial.q[i] += alpha * step[i];
        }
        for i in 0..nt {
            trial.theta[i] += alpha * step[nq + i];
        }
        let dw = Wrench::from_vector(&Vector6::from_iterator(
            step.rows(nq + nt, 6).iter().map(|x| x * k * alpha),
        ));
        let w_trial = *w + dw;
        let kin_trial = evaluate(chain, &trial);
        let sys_trial = tip_system(chain, &kin_trial, &trial, &target, &w_trial, lc);
        (trial, w_trial, kin_trial, sys_trial)
    };

    for it in 0..opts.max_iter {
        if norm <= opts.tol {
            if it > 0 {
                // one more full step takes the reaction to machine precision
                if let Ok(lu) = factor(sys.matrix.clone()) {
                    if let Some(step) = lu.solve(&(-&sys.residual)) {
                        let (trial, w_trial, kin_trial, sys_trial) = trial_at(&state, &w, &step, 1.0);
                        let n_trial = sys_trial.residual.norm();
                        if n_trial <= norm {
                            state = trial;
                            w = w_trial;
                            kin = kin_trial;
                            norm = n_trial;
                        }
                    }
                }
            }
            return Ok(ChainEquilibrium {
                state,
                tip_pose: kin.tip_pose(),
                reaction: w,
                converged: true,
                iterations: it,
                residual: norm,
            });
        }
        let lu = factor(sys.matrix.clone())?;
        let step = lu
            .solve(&(-&sys.residual))
            .ok_or(ChainError::SingularSystem { condition: f64::INFINITY })?;

        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let (trial, w_trial, kin_trial, sys_trial) = trial_at(&state, &w, &step, alpha);
            let n_trial = sys_trial.residual.norm();
            if n_trial < norm {
                state = trial;
                w = w_trial;
                kin = kin_trial;
                sys = sys_trial;
                norm = n_trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(ChainError::NoConvergence {
                iterations: it + 1,
                residual: norm,
            });
        }
    }
    if norm <= opts.tol {
        return Ok(ChainEquilibrium {
            state,
            tip_pose: kin.tip_pose(),
            reaction: w,
            converged: true,
            iterations: opts.max_iter,
            residual: norm,
        });
    }
    Err(ChainError::NoConvergence {
        iterations: opts.max_iter,
        residual: norm,
    })
}

/// Residual and Newton matrix of the chain under a fixed tip wrench.
/// Unknowns `(q, theta)`; rows `(passive balance, spring balance) / k`.
fn wrench_system(
    chain: &ChainModel,
    kin: &Kinematics,
    state: &ChainState,
    w: &Wrench,
) -> (DMatrix<f64>, DVector<f64>) {
    let (nq, nt) = (chain.n_q(), chain.n_theta());
    let k = chain.stiffness_scale();
    let q_cls = (VarClass::Q, nq);
    let t_cls = (VarClass::Theta, nt);
    let wv = w.to_vector();
    let mut a = DMatrix::zeros(nq + nt, nq + nt);
    let mut r = DVector::zeros(nq + nt);
    if nq > 0 {
        let jq = kin.jacobian(VarClass::Q, nq);
        r.rows_mut(0, nq).copy_from(&(jq.transpose() * wv / k));
        a.view_mut((0, 0), (nq, nq)).copy_from(&(kin.load_hessian(w, q_cls, q_cls) / k));
        a.view_mut((0, nq), (nq, nt)).copy_from(&(kin.load_hessian(w, q_cls, t_cls) / k));
        a.view_mut((nq, 0), (nt, nq)).copy_from(&(-kin.load_hessian(w, t_cls, q_cls) / k));
    }
    let jt = kin.jacobian(VarClass::Theta, nt);
    let spring = chain.k_theta() * &state.theta - jt.transpose() * wv;
    r.rows_mut(nq, nt).copy_from(&(spring / k));
    a.view_mut((nq, nq), (nt, nt))
        .copy_from(&((chain.k_theta() - kin.load_hessian(w, t_cls, t_cls)) / k));
    (a, r)
}

fn solve_wrench_step(
    chain: &ChainModel,
    state: &ChainState,
    w: &Wrench,
    load_fraction: f64,
    opts: &SolverOptions,
) -> Result<(ChainState, usize, f64), ChainError> {
    let (nq, nt) = (chain.n_q(), chain.n_theta());
    let mut state = state.clone();
    let kin = evaluate(chain, &state);
    let (mut a, mut r) = wrench_system(chain, &kin, &state, w);
    let mut norm = r.norm();
    for it in 0..opts.max_iter {
        if nq == 0 {
            let sym = (&a + a.transpose()) * 0.5;
            if sym.cholesky().is_none() {
                return Err(ChainError::BucklingDetected { load_fraction });
            }
        }
        if norm <= opts.tol {
            return Ok((state, it, norm));
        }
        let lu = factor(a.clone())?;
        let step = lu
            .solve(&(-&r))
            .ok_or(ChainError::SingularSystem { condition: f64::INFINITY })?;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let mut trial = state.clone();
            for i in 0..nq {
                trial.q[i] += alpha * step[i];
            }
            for i in 0..nt {
                trial.theta[i] += alpha * step[nq + i];
            }
            let kin_t = evaluate(chain, &trial);
            let (a_t, r_t) = wrench_system(chain, &kin_t, &trial, w);
            if r_t.norm() < norm {
                state = trial;
                a = a_t;
                norm = r_t.norm();
                r = r_t;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(ChainError::NoConvergence {
                iterations: it + 1,
                residual: norm,
            });
        }
    }
    if norm <= opts.tol {
        return Ok((state, opts.max_iter, norm));
    }
    Err(ChainError::NoConvergence {
        iterations: opts.max_iter,
        residual: norm,
    })
}

/// Equilibrium of the chain with actuators at `rho` and wrench `w` applied
/// at the tip, reached by load continuation from the unloaded state.
pub fn equilibrium_given_wrench(
    chain: &ChainModel,
    rho: &DVector<f64>,
    w: &Wrench,
    seed: &ChainState,
    opts: &SolverOptions,
) -> Result<ChainEquilibrium, ChainError> {
    let mut state = seed.clone().with_rho(rho.clone()).unloaded();
    chain.check_state(&state)?;
    let mut fraction = 0.0;
    let mut increment = 1.0 / opts.continuation_steps.max(1) as f64;
    let mut iterations = 0;
    let mut residual = 0.0;

    if w.is_zero() {
        let (s, it, res) = solve_wrench_step(chain, &state, w, 1.0, opts)?;
        state = s;
        iterations = it;
        residual = res;
        fraction = 1.0;
    }
    while fraction < 1.0 {
        let next = (fraction + increment).min(1.0);
        match solve_wrench_step(chain, &state, &(*w * next), next, opts) {
            Ok((s, it, res)) => {
                state = s;
                iterations += it;
                residual = res;
                fraction = next;
            }
            Err(e @ ChainError::BucklingDetected { .. }) => return Err(e),
            Err(e) => {
                increment *= 0.5;
                if increment < 1.0 / 4096.0 {
                    return Err(e);
                }
            }
        }
    }
    let tip_pose = evaluate(chain, &state).tip_pose();
    Ok(ChainEquilibrium {
        state,
        tip_pose,
        reaction: *w,
        converged: true,
        iterations,
        residual,
    })
}

/// Chain Cartesian stiffness `dW/dt` at an equilibrium, by central finite
/// differences of [`equilibrium_given_tip`]. Returns the symmetric part.
pub fn cartesian_stiffness(
    chain: &ChainModel,
    eq: &ChainEquilibrium,
    opts: &SolverOptions,
) -> Result<StiffnessMatrix, ChainError> {
    let mut k = Matrix6::zeros();
    for c in 0..6 {
        let mut v = Vector6::zeros();
        v[c] = FD_STEP;
        let d = Twist::from_vector(&v);
        let plus = apply_twist(&eq.tip_pose, &d)?;
        let minus = apply_twist(&eq.tip_pose, &(-d))?;
        let wp = equilibrium_given_tip_seeded(chain, &eq.state.rho, &plus, &eq.state, &eq.reaction, opts)?;
        let wm = equilibrium_given_tip_seeded(chain, &eq.state.rho, &minus, &eq.state, &eq.reaction, opts)?;
        k.set_column(c, &((wp.reaction - wm.reaction).to_vector() / (2.0 * FD_STEP)));
    }
    let raw = StiffnessMatrix(k);
    log::debug!("finite-difference chain stiffness asymmetry {:e}", raw.asymmetry());
    Ok(raw.symmetric_part())
}

/// Closed-form linear chain stiffness at `state`, ignoring load-dependent
/// terms: the top-left block of `[[J_t K^-1 J_t^T, J_q], [J_q^T, 0]]^-1`.
pub fn cartesian_stiffness_linear(
    chain: &ChainModel,
    state: &ChainState,
) -> Result<StiffnessMatrix, ChainError> {
    chain.check_state(state)?;
    let kin = evaluate(chain, state);
    let nq = chain.n_q();
    let jt = kin.jacobian(VarClass::Theta, chain.n_theta());
    let jq = kin.jacobian(VarClass::Q, nq);
    let k_inv = chain
        .k_theta()
        .clone()
        .cholesky()
        .ok_or_else(|| ChainError::InvalidModel("elastic stiffness not SPD".into()))?
        .inverse();
    let compliance = &jt * k_inv * jt.transpose();
    let scale = compliance.amax().max(f64::MIN_POSITIVE);
    let mut m = DMatrix::zeros(6 + nq, 6 + nq);
    m.view_mut((0, 0), (6, 6)).copy_from(&(compliance / scale));
    m.view_mut((0, 6), (6, nq)).copy_from(&jq);
    m.view_mut((6, 0), (nq, 6)).copy_from(&jq.transpose());
    let lu = factor(m)?;
    let mut rhs = DMatrix::zeros(6 + nq, 6);
    rhs.view_mut((0, 0), (6, 6)).fill_with_identity();
    let x = lu
        .solve(&rhs)
        .ok_or(ChainError::SingularSystem { condition: f64::INFINITY })?;
    let block: Matrix6<f64> = x.fixed_view::<6, 6>(0, 0).into_owned() / scale;
    Ok(StiffnessMatrix(block))
}

/// Exact tangent stiffness `dW/dt` at an equilibrium from the implicit
/// function theorem on the tip system, including load-dependent terms.
pub fn tangent_stiffness(
    chain: &ChainModel,
    eq: &ChainEquilibrium,
    opts: &SolverOptions,
) -> Result<StiffnessMatrix, ChainError> {
    let kin = evaluate(chain, &eq.state);
    let lc = opts.char_length;
    let sys = tip_system(chain, &kin, &eq.state, &eq.tip_pose.to_isometry(), &eq.reaction, lc);
    let n = sys.matrix.nrows();
    let lu = factor(sys.matrix)?;
    let mut rhs = DMatrix::zeros(n, 6);
    for c in 0..6 {
        rhs[(c, c)] = if c < 3 { 1.0 } else { lc };
    }
    let x = lu
        .solve(&rhs)
        .ok_or(ChainError::SingularSystem { condition: f64::INFINITY })?;
    let (nq, nt) = (chain.n_q(), chain.n_theta());
    let block: Matrix6<f64> = x.fixed_view::<6, 6>(nq + nt, 0).into_owned() * chain.stiffness_scale();
    Ok(StiffnessMatrix(block))
}

/// Generalized actuator loads `J_rho^T W` balancing the reaction.
pub fn actuator_forces(chain: &ChainModel, eq: &ChainEquilibrium) -> DVector<f64> {
    let kin = evaluate(chain, &eq.state);
    kin.jacobian(VarClass::Rho, chain.n_rho()).transpose() * eq.reaction.to_vector()
}
