use nalgebra::{DMatrix, DVector, Isometry3, Vector6};

use super::kinematics::evaluate;
use super::{ChainError, ChainModel, ChainState, SolverOptions, VarClass};
use crate::se3::Pose;

/// `(dp, dphi)` from `target` to `current`, rotation scaled by `lc`, with no
/// branch restriction.
pub(crate) fn scaled_error(target: &Isometry3<f64>, current: &Isometry3<f64>, lc: f64) -> Vector6<f64> {
    let dp = current.translation.vector - target.translation.vector;
    let dphi = (current.rotation * target.rotation.inverse()).scaled_axis() * lc;
    Vector6::new(dp.x, dp.y, dp.z, dphi.x, dphi.y, dphi.z)
}

fn scale_rotation_rows(j: &mut DMatrix<f64>, lc: f64) {
    for r in 3..6 {
        j.row_mut(r).scale_mut(lc);
    }
}

/// Actuated and passive coordinates placing the rigid (`theta = 0`) chain at
/// `target`. Targets outside the chain's reachable directions are matched in
/// the least-squares sense: convergence means the residual has no component
/// the chain can still correct.
pub fn inverse_kinematics(
    chain: &ChainModel,
    target: &Pose,
    seed: &ChainState,
    opts: &SolverOptions,
) -> Result<ChainState, ChainError> {
    chain.check_state(seed)?;
    let lc = opts.char_length;
    let target = target.to_isometry();
    let (n_rho, n_q) = (chain.n_rho(), chain.n_q());
    let n = n_rho + n_q;
    let mut state = seed.clone().unloaded();

    let residual_of = |s: &ChainState| scaled_error(&target, &evaluate(chain, s).tip, lc);
    let mut r = residual_of(&state);

    for it in 0..opts.max_iter {
        let kin = evaluate(chain, &state);
        let mut j = DMatrix::zeros(6, n);
        j.columns_mut(0, n_rho).copy_from(&kin.jacobian(VarClass::Rho, n_rho));
        j.columns_mut(n_rho, n_q).copy_from(&kin.jacobian(VarClass::Q, n_q));
        scale_rotation_rows(&mut j, lc);

        let svd = j.clone().svd(true, true);
        let (u, v_t) = (svd.u.as_ref().unwrap(), svd.v_t.as_ref().unwrap());
        let s_max = svd.singular_values.max();
        let ut_r = u.transpose() * DVector::from_column_slice(r.as_slice());
        let mut projected = 0.0;
        let mut coeffs = DVector::zeros(ut_r.len());
        for (i, &s) in svd.singular_values.iter().enumerate() {
            if s > 1e-10 * s_max {
                projected += ut_r[i] * ut_r[i];
                coeffs[i] = ut_r[i] / s;
            }
        }
        let projected = projected.sqrt();
        let step = -(v_t.transpose() * coeffs);
        if projected <= opts.tol {
            if it > 0 {
                let trial = shifted(&state, &step, 1.0, n_rho, n_q);
                let r_trial = residual_of(&trial);
                if r_trial.norm() <= r.norm() {
                    state = trial;
                }
            }
            check_strokes(chain, &state, it)?;
            return Ok(state);
        }

        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-6 {
            let trial = shifted(&state, &step, alpha, n_rho, n_q);
            let r_trial = residual_of(&trial);
            if r_trial.norm() < r.norm() {
                state = trial;
                r = r_trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            let gradient = j.transpose() * DVector::from_column_slice(r.as_slice());
            if gradient.norm() < 1e-14 {
                return Err(ChainError::SingularConfiguration { residual: r.norm() });
            }
            return Err(ChainError::NoConvergence {
                iterations: it + 1,
                residual: projected,
            });
        }
    }
    Err(ChainError::NoConvergence {
        iterations: opts.max_iter,
        residual: r.norm(),
    })
}

fn shifted(state: &ChainState, step: &DVector<f64>, alpha: f64, n_rho: usize, n_q: usize) -> ChainState {
    let mut trial = state.clone();
    for i in 0..n_rho {
        trial.rho[i] += alpha * step[i];
    }
    for i in 0..n_q {
        trial.q[i] += alpha * step[n_rho + i];
    }
    trial
}

fn check_strokes(chain: &ChainModel, state: &ChainState, iterations: usize) -> Result<(), ChainError> {
    for (i, stroke) in chain.strokes().iter().enumerate() {
        if let Some((lo, hi)) = stroke {
            let v = state.rho[i];
            if v < lo - 1e-12 || v > hi + 1e-12 {
                log::debug!("actuator {i} at {v} outside stroke [{lo}, {hi}]");
                let excess = if v < *lo { lo - v } else { v - hi };
                return Err(ChainError::NoConvergence {
                    iterations,
                    residual: excess,
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{forward_geometry, ChainElement, ElasticJoint, JointAxis};
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;

    fn gantry(stroke: Option<(f64, f64)>) -> ChainModel {
        ChainModel::new(
            vec![
                ChainElement::Rigid(Pose::from_translation(-0.5, 0.0, 0.0)),
                ChainElement::Actuated { axis: JointAxis::prismatic(Vector3::x()), stroke },
                ChainElement::Actuated { axis: JointAxis::prismatic(Vector3::y()), stroke },
                ChainElement::Actuated { axis: JointAxis::prismatic(Vector3::z()), stroke },
                ChainElement::Elastic(ElasticJoint::six_dof([1e6; 3], [1e4; 3]).unwrap()),
            ],
            Pose::from_translation(0.5, 0.0, 0.0),
        )
        .unwrap()
    }

    fn arm() -> ChainModel {
        ChainModel::new(
            vec![
                ChainElement::Actuated { axis: JointAxis::revolute(Vector3::z()), stroke: None },
                ChainElement::Rigid(Pose::from_translation(0.0, 0.0, 0.2)),
                ChainElement::Actuated { axis: JointAxis::revolute(Vector3::y()), stroke: None },
                ChainElement::Rigid(Pose::from_translation(0.3, 0.0, 0.0)),
                ChainElement::Actuated { axis: JointAxis::revolute(Vector3::y()), stroke: None },
                ChainElement::Rigid(Pose::from_translation(0.25, 0.0, 0.0)),
                ChainElement::Passive(JointAxis::revolute(Vector3::x())),
                ChainElement::Elastic(ElasticJoint::six_dof([1e6; 3], [1e4; 3]).unwrap()),
            ],
            Pose::from_translation(0.05, 0.0, 0.0),
        )
        .unwrap()
    }

    #[test]
    fn decoupled_prismatic_axes() {
        let chain = gantry(None);
        let seed = ChainState::zeros(&chain).with_rho(DVector::from_column_slice(&[0.1, -0.2, 0.05]));
        let p0 = forward_geometry(&chain, &seed).unwrap();
        let target = Pose::from_position(p0.position() + Vector3::new(0.01, 0.02, 0.03));
        let s = inverse_kinematics(&chain, &target, &seed, &SolverOptions::default()).unwrap();
        assert_abs_diff_eq!(s.rho, &seed.rho + DVector::from_column_slice(&[0.01, 0.02, 0.03]), epsilon = 1e-12);
        assert!(s.theta.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn uncontrollable_rotation_is_ignored() {
        let chain = gantry(None);
        let seed = ChainState::zeros(&chain);
        let target = Pose::new(Vector3::new(0.01, 0.0, 0.0), Vector3::new(0.0, 0.0, 0.1)).unwrap();
        let s = inverse_kinematics(&chain, &target, &seed, &SolverOptions::default()).unwrap();
        assert_abs_diff_eq!(s.rho[0], 0.01, epsilon = 1e-12);
    }

    #[test]
    fn round_trip_recovers_joint_coordinates() {
        let chain = arm();
        let mut s0 = ChainState::zeros(&chain);
        s0.rho = DVector::from_column_slice(&[0.3, -0.4, 0.9]);
        s0.q[0] = 0.2;
        let target = forward_geometry(&chain, &s0).unwrap();
        let mut seed = s0.clone();
        seed.rho.add_scalar_mut(0.05);
        seed.q[0] -= 0.05;
        let s = inverse_kinematics(&chain, &target, &seed, &SolverOptions::default()).unwrap();
        let p = forward_geometry(&chain, &s).unwrap();
        assert!((p.position() - target.position()).norm() < 1e-9);
        assert_abs_diff_eq!(s.rho, s0.rho, epsilon = 1e-9);
        assert_abs_diff_eq!(s.q, s0.q, epsilon = 1e-9);
    }

    #[test]
    fn target_beyond_stroke_fails() {
        let chain = gantry(Some((-0.1, 0.1)));
        let target = Pose::from_translation(0.3, 0.0, 0.0);
        let r = inverse_kinematics(&chain, &target, &ChainState::zeros(&chain), &SolverOptions::default());
        assert!(matches!(r, Err(ChainError::NoConvergence { .. })));
    }
}
