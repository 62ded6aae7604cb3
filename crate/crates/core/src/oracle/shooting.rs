//! Single-shooting solver for the coupled state/co-state boundary value
//! problem: integrate xdot = f + g u, lambdadot = -grad q - J^T lambda with
//! the smooth quadratic-cost control law, and Newton-iterate the initial
//! co-state until the terminal condition lambda(t_f) = grad Phi(x(t_f))
//! holds.

use super::{readout_quadratic, CostKind, HamiltonianSpec, OracleError};
use crate::linalg::{self, matvec, norm2, transpose};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub struct ShootingResult<S> {
    /// Grid times t_k = k dt.
    pub times: Vec<S>,
    pub x: Vec<Vec<S>>,
    pub lambda: Vec<Vec<S>>,
    pub u: Vec<Vec<S>>,
    /// || lambda(t_f) - grad Phi(x(t_f)) ||.
    pub terminal_defect: S,
    pub converged: bool,
    pub newton_iters: usize,
}

fn control<S: Real>(spec: &HamiltonianSpec<S>, x: &[S], lambda: &[S]) -> Vec<S> {
    let sigma = spec.switching(x, lambda);
    readout_quadratic(&sigma, &spec.control_weight, &spec.u_min, &spec.u_max)
}

/// Time derivative of the stacked (x, lambda) system under the
/// Hamiltonian-minimizing control.
fn deriv<S: Real>(spec: &HamiltonianSpec<S>, x: &[S], lambda: &[S]) -> (Vec<S>, Vec<S>) {
    let u = control(spec, x, lambda);
    let mut xdot = (spec.drift)(x);
    let gu = matvec(&(spec.influence)(x), &u);
    for i in 0..xdot.len() {
        xdot[i] += gu[i];
    }
    let jac = spec.closed_jac(x, &u);
    let jt_l = matvec(&transpose(&jac), lambda);
    let gq = spec.grad_state_cost(x);
    let ldot = (0..x.len()).map(|i| -gq[i] - jt_l[i]).collect();
    (xdot, ldot)
}

struct Integration<S> {
    x: Vec<Vec<S>>,
    lambda: Vec<Vec<S>>,
    u: Vec<Vec<S>>,
    defect_vec: Vec<S>,
}

fn integrate<S: Real>(
    spec: &HamiltonianSpec<S>,
    x0: &[S],
    lambda0: &[S],
    steps: usize,
    dt: S,
) -> Result<Integration<S>, OracleError> {
    let n = x0.len();
    let mut xs = Vec::with_capacity(steps + 1);
    let mut ls = Vec::with_capacity(steps + 1);
    let mut us = Vec::with_capacity(steps + 1);
    let mut x = x0.to_vec();
    let mut l = lambda0.to_vec();
    let half = dt * S::lit(0.5);
    let sixth = dt / S::lit(6.0);
    let two = S::lit(2.0);
    for k in 0..=steps {
        us.push(control(spec, &x, &l));
        xs.push(x.clone());
        ls.push(l.clone());
        if k == steps {
            break;
        }
        let (kx1, kl1) = deriv(spec, &x, &l);
        let x2: Vec<S> = (0..n).map(|i| x[i] + half * kx1[i]).collect();
        let l2: Vec<S> = (0..n).map(|i| l[i] + half * kl1[i]).collect();
        let (kx2, kl2) = deriv(spec, &x2, &l2);
        let x3: Vec<S> = (0..n).map(|i| x[i] + half * kx2[i]).collect();
        let l3: Vec<S> = (0..n).map(|i| l[i] + half * kl2[i]).collect();
        let (kx3, kl3) = deriv(spec, &x3, &l3);
        let x4: Vec<S> = (0..n).map(|i| x[i] + dt * kx3[i]).collect();
        let l4: Vec<S> = (0..n).map(|i| l[i] + dt * kl3[i]).collect();
        let (kx4, kl4) = deriv(spec, &x4, &l4);
        for i in 0..n {
            x[i] += sixth * (kx1[i] + two * kx2[i] + two * kx3[i] + kx4[i]);
            l[i] += sixth * (kl1[i] + two * kl2[i] + two * kl3[i] + kl4[i]);
        }
        if x.iter().chain(l.iter()).any(|v| !v.is_finite()) {
            return Err(OracleError::Diverged { t: (dt * S::lit((k + 1) as f64)).to_f64_lossy() });
        }
    }
    let gphi = spec.grad_terminal_cost(xs.last().unwrap());
    let defect_vec: Vec<S> = (0..n).map(|i| ls[steps][i] - gphi[i]).collect();
    Ok(Integration { x: xs, lambda: ls, u: us, defect_vec })
}

/// Single shooting with a finite-difference Newton iteration on the initial
/// co-state; at most 50 Newton steps with step halving. Non-convergence is
/// reported through `converged = false` on the best iterate found.
pub fn shoot_tpbvp<S: Real>(
    spec: &HamiltonianSpec<S>,
    x0: &[S],
    t_f: S,
    dt: S,
    lambda0_init: &[S],
) -> Result<ShootingResult<S>, OracleError> {
    if spec.cost_kind != CostKind::Quadratic {
        return Err(OracleError::NotQuadratic);
    }
    if spec.d_x > 4 {
        return Err(OracleError::Dim(format!(
            "single shooting supports d_x <= 4, got {}",
            spec.d_x
        )));
    }
    let steps_f = (t_f / dt).to_f64_lossy();
    let steps = steps_f.round() as usize;
    if steps == 0 || (steps_f - steps as f64).abs() > 1e-9 {
        return Err(OracleError::DtMismatch {
            t_f: t_f.to_f64_lossy(),
            dt: dt.to_f64_lossy(),
        });
    }
    let n = spec.d_x;
    let tol = S::lit(1e-8);

    let mut lambda0 = lambda0_init.to_vec();
    let mut best = integrate(spec, x0, &lambda0, steps, dt)?;
    let mut best_defect = norm2(&best.defect_vec);
    let mut newton_iters = 0;

    for _ in 0..50 {
        if best_defect < tol {
            break;
        }
        newton_iters += 1;
        // forward-difference Jacobian of the defect in lambda0
        let mut jac = Tensor::zeros(&[n, n]);
        for j in 0..n {
            let h = S::lit(1e-6) * lambda0[j].abs().max(S::one());
            let mut lp = lambda0.clone();
            lp[j] += h;
            let pert = integrate(spec, x0, &lp, steps, dt)?;
            for i in 0..n {
                jac.set(i, j, (pert.defect_vec[i] - best.defect_vec[i]) / h);
            }
        }
        let neg_f: Vec<S> = best.defect_vec.iter().map(|&v| -v).collect();
        let delta = linalg::solve(&jac, &neg_f)?;
        // step halving until the defect decreases
        let mut improved = false;
        let mut alpha = S::one();
        for _ in 0..12 {
            let cand: Vec<S> = (0..n).map(|i| lambda0[i] + alpha * delta[i]).collect();
            let trial = integrate(spec, x0, &cand, steps, dt)?;
            let d = norm2(&trial.defect_vec);
            if d < best_defect {
                lambda0 = cand;
                best = trial;
                best_defect = d;
                improved = true;
                break;
            }
            alpha = alpha * S::lit(0.5);
        }
        if !improved {
            break;
        }
    }

    let times = (0..=steps).map(|k| dt * S::lit(k as f64)).collect();
    Ok(ShootingResult {
        times,
        x: best.x,
        lambda: best.lambda,
        u: best.u,
        terminal_defect: best_defect,
        converged: best_defect < tol,
        newton_iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{hamiltonian, riccati_ode, solve_care};

    fn di_lqr() -> HamiltonianSpec<f64> {
        HamiltonianSpec::lqr(
            Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 0.0]),
            Tensor::matrix(2, 1, vec![0.0, 1.0]),
            Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.1]),
            Tensor::matrix(1, 1, vec![0.1]),
            Tensor::zeros(&[2, 2]),
        )
    }

    #[test]
    fn trivial_extremal_is_zero() {
        // Phi = 0, Q = 0, q = 0 -> lambda = 0, u = 0 along the trajectory
        let spec = HamiltonianSpec::lqr(
            Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 0.0]),
            Tensor::matrix(2, 1, vec![0.0, 1.0]),
            Tensor::zeros(&[2, 2]),
            Tensor::matrix(1, 1, vec![0.1]),
            Tensor::zeros(&[2, 2]),
        );
        let res = shoot_tpbvp(&spec, &[1.0, -0.5], 2.0, 0.01, &[0.0, 0.0]).unwrap();
        assert!(res.converged);
        assert_eq!(res.newton_iters, 0);
        for (l, u) in res.lambda.iter().zip(&res.u) {
            assert!(l.iter().all(|v: &f64| v.abs() < 1e-14));
            assert!(u.iter().all(|v: &f64| v.abs() < 1e-14));
        }
    }

    #[test]
    fn lqr_shooting_matches_riccati_closed_loop() {
        let spec = di_lqr();
        let x0 = [1.0, 0.0];
        let (t_f, dt) = (5.0, 0.01);
        let res = shoot_tpbvp(&spec, &x0, t_f, dt, &[0.0, 0.0]).unwrap();
        assert!(res.converged, "defect {}", res.terminal_defect);
        assert!(res.terminal_defect < 1e-8);

        // Riccati-ODE closed loop at half-step resolution for RK4 stages
        let a = Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 0.0]);
        let b = Tensor::matrix(2, 1, vec![0.0, 1.0]);
        let q = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.1]);
        let r = Tensor::matrix(1, 1, vec![0.1]);
        let p_half = riccati_ode(&a, &b, &q, &r, &Tensor::zeros(&[2, 2]), t_f, dt / 2.0).unwrap();
        let steps = (t_f / dt) as usize;
        let gain = |half_idx: usize| -> Tensor<f64> {
            // K(t) = R^{-1} B^T P(t); scalar R here
            let p = &p_half[half_idx];
            let bt_p = linalg::matmul(&transpose(&b), p);
            linalg::scale(&bt_p, 1.0 / 0.1)
        };
        let mut x = x0.to_vec();
        let mut traj = vec![x.clone()];
        for k in 0..steps {
            let f = |x: &[f64], half_idx: usize| -> Vec<f64> {
                let kmat = gain(half_idx);
                let u = -(kmat.at(0, 0) * x[0] + kmat.at(0, 1) * x[1]);
                vec![x[1], u]
            };
            let h = dt;
            let i0 = 2 * k;
            let k1 = f(&x, i0);
            let x2: Vec<f64> = (0..2).map(|i| x[i] + 0.5 * h * k1[i]).collect();
            let k2 = f(&x2, i0 + 1);
            let x3: Vec<f64> = (0..2).map(|i| x[i] + 0.5 * h * k2[i]).collect();
            let k3 = f(&x3, i0 + 1);
            let x4: Vec<f64> = (0..2).map(|i| x[i] + h * k3[i]).collect();
            let k4 = f(&x4, i0 + 2);
            for i in 0..2 {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            traj.push(x.clone());
        }
        let sup_x: f64 = traj
            .iter()
            .map(|p| p.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .fold(0.0, f64::max);
        let mut sup_err = 0.0f64;
        for (xs, xr) in res.x.iter().zip(&traj) {
            for i in 0..2 {
                sup_err = sup_err.max((xs[i] - xr[i]).abs());
            }
        }
        let rel = sup_err / sup_x;
        assert!(rel < 1e-4, "relative sup-norm error {rel}");
    }

    #[test]
    fn warm_start_converges_immediately() {
        let spec = di_lqr();
        let x0 = [0.8, -0.3];
        let (t_f, dt) = (5.0, 0.01);
        let a = Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 0.0]);
        let b = Tensor::matrix(2, 1, vec![0.0, 1.0]);
        let q = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.1]);
        let r = Tensor::matrix(1, 1, vec![0.1]);
        let grid = riccati_ode(&a, &b, &q, &r, &Tensor::zeros(&[2, 2]), t_f, dt).unwrap();
        let lambda0 = matvec(&linalg::scale(&grid[0], 2.0), &x0);
        let res = shoot_tpbvp(&spec, &x0, t_f, dt, &lambda0).unwrap();
        assert!(res.converged);
        assert!(res.newton_iters <= 2, "took {} Newton iterations", res.newton_iters);
    }

    #[test]
    fn hamiltonian_constant_along_extremal() {
        let spec = di_lqr();
        let res = shoot_tpbvp(&spec, &[1.0, 0.0], 5.0, 0.01, &[0.0, 0.0]).unwrap();
        let h0 = hamiltonian(&spec, &res.x[0], &res.lambda[0], &res.u[0]);
        let mut drift = 0.0f64;
        for k in 0..res.x.len() {
            let h = hamiltonian(&spec, &res.x[k], &res.lambda[k], &res.u[k]);
            drift = drift.max((h - h0).abs());
        }
        assert!(drift < 1e-4 * h0.abs().max(1.0), "Hamiltonian drift {drift}");
    }

    #[test]
    fn shooting_verifies_costate_is_riccati_gradient() {
        // lambda(0) found by shooting equals 2 P(0) x0 from the Riccati ODE
        let spec = di_lqr();
        let x0 = [1.0, 0.0];
        let (t_f, dt) = (5.0, 0.01);
        let res = shoot_tpbvp(&spec, &x0, t_f, dt, &[0.0, 0.0]).unwrap();
        let a = Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 0.0]);
        let b = Tensor::matrix(2, 1, vec![0.0, 1.0]);
        let q = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.1]);
        let r = Tensor::matrix(1, 1, vec![0.1]);
        let grid = riccati_ode(&a, &b, &q, &r, &Tensor::zeros(&[2, 2]), t_f, dt).unwrap();
        let expect = matvec(&linalg::scale(&grid[0], 2.0), &x0);
        for i in 0..2 {
            assert!(
                (res.lambda[0][i] - expect[i]).abs() < 1e-4,
                "{} vs {}",
                res.lambda[0][i],
                expect[i]
            );
        }
        // and the infinite-horizon gain is close at long horizons
        let care = solve_care(&a, &b, &q, &r).unwrap();
        let lam_inf = lqr_costate_like(&care.p, &x0);
        // finite-horizon co-state differs from infinite-horizon, but mildly
        assert!((res.lambda[0][0] - lam_inf[0]).abs() < 0.2);
    }

    fn lqr_costate_like(p: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
        matvec(&linalg::scale(p, 2.0), x)
    }

    #[test]
    fn rejects_non_quadratic() {
        let spec = di_lqr().with_cost_kind(CostKind::Fuel);
        assert!(matches!(
            shoot_tpbvp(&spec, &[1.0, 0.0], 1.0, 0.01, &[0.0, 0.0]),
            Err(OracleError::NotQuadratic)
        ));
    }
}
