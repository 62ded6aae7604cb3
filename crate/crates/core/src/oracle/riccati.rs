//! Continuous algebraic Riccati equation via Kleinman-Newton iteration, the
//! finite-horizon Riccati matrix ODE, and the LQR value-gradient co-state.

use super::OracleError;
use crate::linalg::{
    self, add, cholesky, frobenius_norm, inverse, matmul, matvec, scale, solve_lyapunov,
    solve_mat, sub, transpose,
};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Solved infinite-horizon LQR value matrix with its feedback gain.
pub struct RiccatiSolution<S> {
    /// Symmetric positive semidefinite value matrix: V(x) = x^T P x.
    pub p: Tensor<S>,
    /// Feedback gain K = R^{-1} B^T P (control law u = -K x).
    pub k: Tensor<S>,
    /// Frobenius norm of A^T P + P A - P B R^{-1} B^T P + Q.
    pub residual: S,
    pub iterations: usize,
}

/// A is Hurwitz iff A^T P + P A = -I has a symmetric positive definite
/// solution.
pub fn is_hurwitz<S: Real>(a: &Tensor<S>) -> bool {
    let n = a.rows();
    let c = scale(&Tensor::eye(n), -S::one());
    match solve_lyapunov(a, &c) {
        Ok(p) => {
            let sym = scale(&add(&p, &transpose(&p)), S::lit(0.5));
            cholesky(&sym).is_ok()
        }
        Err(_) => false,
    }
}

fn care_residual<S: Real>(
    a: &Tensor<S>,
    q: &Tensor<S>,
    brb: &Tensor<S>,
    p: &Tensor<S>,
) -> Tensor<S> {
    // A^T P + P A - P (B R^{-1} B^T) P + Q
    let at_p = matmul(&transpose(a), p);
    let pa = matmul(p, a);
    let pbrbp = matmul(&matmul(p, brb), p);
    sub(&add(&add(&at_p, &pa), q), &pbrbp)
}

/// Initial stabilizing gain: if A is already Hurwitz use K = 0, otherwise
/// Bass's construction — shift by beta > max Re eig(A) (crude infinity-norm
/// offset), solve (A + beta I) Z + Z (A + beta I)^T = 2 B B^T and take
/// K0 = B^T Z^{-1}.
fn stabilizing_gain<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, OracleError> {
    let n = a.rows();
    let d_u = b.cols();
    if is_hurwitz(a) {
        return Ok(Tensor::zeros(&[d_u, n]));
    }
    let mut row_sum_max = S::zero();
    for i in 0..n {
        let s: S = (0..n).map(|j| a.at(i, j).abs()).sum();
        row_sum_max = row_sum_max.max(s);
    }
    let beta = row_sum_max + S::one();
    let mut shifted = a.clone();
    for i in 0..n {
        shifted.set(i, i, shifted.at(i, i) + beta);
    }
    let bbt2 = scale(&matmul(b, &transpose(b)), S::lit(2.0));
    // M Z + Z M^T = C is A'^T Z + Z A' = C with A' = M^T
    let z = solve_lyapunov(&transpose(&shifted), &bbt2)
        .map_err(|_| OracleError::NoStabilizingStart)?;
    let zi_b = solve_mat(&z, b).map_err(|_| OracleError::NoStabilizingStart)?;
    let k0 = transpose(&zi_b);
    let a_cl = sub(a, &matmul(b, &k0));
    if !is_hurwitz(&a_cl) {
        return Err(OracleError::NoStabilizingStart);
    }
    Ok(k0)
}

/// Solve A^T P + P A - P B R^{-1} B^T P + Q = 0 by Kleinman-Newton: from a
/// stabilizing K0, repeatedly solve the closed-loop Lyapunov equation
/// (A - B K)^T P + P (A - B K) = -(Q + K^T R K) and update K = R^{-1} B^T P
/// until ||dP||_F < 1e-12 or 100 iterations.
pub fn solve_care<S: Real>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    q: &Tensor<S>,
    r: &Tensor<S>,
) -> Result<RiccatiSolution<S>, OracleError> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n || q.shape() != [n, n] || r.rows() != r.cols() {
        return Err(OracleError::Dim(format!(
            "A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    if n > 6 {
        return Err(OracleError::Dim(format!("desk-scale solver supports n <= 6, got {n}")));
    }
    let r_inv = inverse(r)?;
    let brb = matmul(&matmul(b, &r_inv), &transpose(b));

    let mut k = stabilizing_gain(a, b)?;
    let mut p_prev: Option<Tensor<S>> = None;
    let mut iterations = 0;
    for it in 0..100 {
        iterations = it + 1;
        let a_cl = sub(a, &matmul(b, &k));
        let ktrk = matmul(&matmul(&transpose(&k), r), &k);
        let rhs = scale(&add(q, &ktrk), -S::one());
        let p = solve_lyapunov(&a_cl, &rhs)?;
        let p = scale(&add(&p, &transpose(&p)), S::lit(0.5));
        k = matmul(&matmul(&r_inv, &transpose(b)), &p);
        if let Some(prev) = &p_prev {
            if frobenius_norm(&sub(&p, prev)) < S::lit(1e-12) {
                p_prev = Some(p);
                break;
            }
        }
        p_prev = Some(p);
    }
    let p = p_prev.expect("at least one iteration");
    let residual = frobenius_norm(&care_residual(a, q, &brb, &p));
    let tolerance = 1e-8;
    if residual.to_f64_lossy() > tolerance {
        return Err(OracleError::ResidualTooLarge {
            residual: residual.to_f64_lossy(),
            tolerance,
        });
    }
    Ok(RiccatiSolution { p, k, residual, iterations })
}

/// Integrate the finite-horizon Riccati equation
/// -Pdot = A^T P + P A - P B R^{-1} B^T P + Q backward from P(t_f) = P_f
/// with RK4; returns P at every grid time t_k = k dt, k = 0..=t_f/dt.
pub fn riccati_ode<S: Real>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    q: &Tensor<S>,
    r: &Tensor<S>,
    p_f: &Tensor<S>,
    t_f: S,
    dt: S,
) -> Result<Vec<Tensor<S>>, OracleError> {
    let steps_f = (t_f / dt).to_f64_lossy();
    let steps = steps_f.round() as usize;
    if steps == 0 || (steps_f - steps as f64).abs() > 1e-9 {
        return Err(OracleError::DtMismatch {
            t_f: t_f.to_f64_lossy(),
            dt: dt.to_f64_lossy(),
        });
    }
    let r_inv = inverse(r)?;
    let brb = matmul(&matmul(b, &r_inv), &transpose(b));
    // In time-to-go tau = t_f - t the equation runs forward:
    // dP/dtau = A^T P + P A - P B R^{-1} B^T P + Q, P(tau = 0) = P_f.
    let deriv = |p: &Tensor<S>| care_residual(a, q, &brb, p);
    let mut grid = vec![Tensor::zeros(&[a.rows(), a.rows()]); steps + 1];
    let mut p = p_f.clone();
    grid[steps] = p.clone();
    let half = dt * S::lit(0.5);
    let sixth = dt / S::lit(6.0);
    for k in 0..steps {
        let k1 = deriv(&p);
        let k2 = deriv(&add(&p, &scale(&k1, half)));
        let k3 = deriv(&add(&p, &scale(&k2, half)));
        let k4 = deriv(&add(&p, &scale(&k3, dt)));
        let incr = add(&add(&k1, &scale(&add(&k2, &k3), S::lit(2.0))), &k4);
        p = add(&p, &scale(&incr, sixth));
        if !p.all_finite() {
            return Err(OracleError::Diverged {
                t: (t_f - dt * S::lit((k + 1) as f64)).to_f64_lossy(),
            });
        }
        // tau = (k+1) dt corresponds to t = t_f - tau
        grid[steps - (k + 1)] = p.clone();
    }
    Ok(grid)
}

/// LQR co-state lambda = grad_x (x^T P x) = 2 P x.
pub fn lqr_costate<S: Real>(sol: &RiccatiSolution<S>, x: &[S]) -> Vec<S> {
    matvec(&scale(&sol.p, S::lit(2.0)), x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m1(v: f64) -> Tensor<f64> {
        Tensor::matrix(1, 1, vec![v])
    }

    #[test]
    fn scalar_care_unit() {
        // A=0, B=1, Q=1, R=1: -P^2 + 1 = 0, positive root P = 1
        let sol = solve_care(&m1(0.0), &m1(1.0), &m1(1.0), &m1(1.0)).unwrap();
        assert!((sol.p.at(0, 0) - 1.0).abs() < 1e-10);
        assert!((sol.k.at(0, 0) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn scalar_care_r4() {
        // A=0, B=1, Q=1, R=4: -P^2/4 + 1 = 0, positive root P = 2
        let sol = solve_care(&m1(0.0), &m1(1.0), &m1(1.0), &m1(4.0)).unwrap();
        assert!((sol.p.at(0, 0) - 2.0).abs() < 1e-10);
    }

    fn di() -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        (
            Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 0.0]),
            Tensor::matrix(2, 1, vec![0.0, 1.0]),
            Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.1]),
            m1(0.1),
        )
    }

    #[test]
    fn double_integrator_care() {
        let (a, b, q, r) = di();
        let sol = solve_care(&a, &b, &q, &r).unwrap();
        assert!(sol.residual < 1e-8, "residual {}", sol.residual);
        // symmetry
        let asym = frobenius_norm(&sub(&sol.p, &transpose(&sol.p)));
        assert!(asym < 1e-10);
        // positive semidefinite (here in fact definite)
        assert!(cholesky(&sol.p).is_ok());
        // closed loop Hurwitz; for 2x2 check trace < 0 and det > 0 directly
        let acl = sub(&a, &matmul(&b, &sol.k));
        let tr = acl.at(0, 0) + acl.at(1, 1);
        let det = acl.at(0, 0) * acl.at(1, 1) - acl.at(0, 1) * acl.at(1, 0);
        assert!(tr < 0.0 && det > 0.0, "trace {tr}, det {det}");
        assert!(is_hurwitz(&acl));
    }

    #[test]
    fn hurwitz_test_agrees_with_eigen_structure() {
        assert!(is_hurwitz(&Tensor::matrix(2, 2, vec![-1.0, 0.5, 0.0, -2.0])));
        assert!(!is_hurwitz(&Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 0.0])));
        assert!(!is_hurwitz(&Tensor::matrix(1, 1, vec![0.3])));
    }

    #[test]
    fn care_on_unstable_system() {
        // scalar unstable A = 1: P solves 2P - P^2 + 1 = 0 -> P = 1 + sqrt(2)
        let sol = solve_care(&m1(1.0), &m1(1.0), &m1(1.0), &m1(1.0)).unwrap();
        assert!((sol.p.at(0, 0) - (1.0 + 2.0f64.sqrt())).abs() < 1e-9);
    }

    #[test]
    fn riccati_ode_zero_solution() {
        let (a, b, _q, r) = di();
        let zero = Tensor::zeros(&[2, 2]);
        let grid = riccati_ode(&a, &b, &zero, &r, &zero, 2.0, 0.01).unwrap();
        assert_eq!(grid.len(), 201);
        for p in grid {
            assert!(frobenius_norm(&p) == 0.0);
        }
    }

    #[test]
    fn riccati_ode_scalar_tanh() {
        // A=0, B=1, Q=1, R=1, P_f=0: P(time-to-go tau) = tanh(tau)
        let grid = riccati_ode(&m1(0.0), &m1(1.0), &m1(1.0), &m1(1.0), &m1(0.0), 5.0, 0.002)
            .unwrap();
        let p0 = grid[0].at(0, 0);
        assert!((p0 - 5.0f64.tanh()).abs() < 1e-8, "{p0}");
        // interior point: t = 2.0 -> tau = 3.0
        let idx = (2.0 / 0.002) as usize;
        assert!((grid[idx].at(0, 0) - 3.0f64.tanh()).abs() < 1e-8);
    }

    #[test]
    fn riccati_ode_steady_state_matches_care() {
        let (a, b, q, r) = di();
        let zero = Tensor::zeros(&[2, 2]);
        let grid = riccati_ode(&a, &b, &q, &r, &zero, 30.0, 0.005).unwrap();
        let sol = solve_care(&a, &b, &q, &r).unwrap();
        let err = frobenius_norm(&sub(&grid[0], &sol.p));
        assert!(err < 1e-6, "steady-state gap {err}");
    }

    #[test]
    fn riccati_ode_rejects_bad_grid() {
        let (a, b, q, r) = di();
        let zero = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            riccati_ode(&a, &b, &q, &r, &zero, 1.0, 0.3),
            Err(OracleError::DtMismatch { .. })
        ));
    }

    #[test]
    fn costate_is_value_gradient() {
        let (a, b, q, r) = di();
        let sol = solve_care(&a, &b, &q, &r).unwrap();
        assert_eq!(lqr_costate(&sol, &[0.0, 0.0]), vec![0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let lam = lqr_costate(&sol, &x);
            // finite differences of V(x) = x^T P x
            let v = |x: &[f64]| {
                let px = matvec(&sol.p, x);
                linalg::dot(x, &px)
            };
            let h = 1e-6;
            for i in 0..2 {
                let mut xp = x.to_vec();
                xp[i] += h;
                let mut xm = x.to_vec();
                xm[i] -= h;
                let fd = (v(&xp) - v(&xm)) / (2.0 * h);
                assert!((lam[i] - fd).abs() < 1e-8, "{} vs {fd}", lam[i]);
            }
        }
    }

    #[test]
    fn scalar_costate() {
        let sol = RiccatiSolution {
            p: m1(1.0),
            k: m1(1.0),
            residual: 0.0,
            iterations: 1,
        };
        assert!((lqr_costate(&sol, &[3.0])[0] - 6.0).abs() < 1e-15);
    }

    #[test]
    fn care_f32_smoke() {
        let a = Tensor::<f32>::matrix(1, 1, vec![0.0]);
        let b = Tensor::<f32>::matrix(1, 1, vec![1.0]);
        let q = Tensor::<f32>::matrix(1, 1, vec![1.0]);
        let r = Tensor::<f32>::matrix(1, 1, vec![1.0]);
        // f32 cannot hit the f64 residual gate reliably; check the iteration
        // converges near 1 even if the strict residual check trips.
        match solve_care(&a, &b, &q, &r) {
            Ok(sol) => assert!((sol.p.at(0, 0) - 1.0).abs() < 1e-4),
            Err(OracleError::ResidualTooLarge { residual, .. }) => {
                assert!(residual < 1e-4)
            }
            Err(e) => panic!("{e}"),
        }
    }
}
