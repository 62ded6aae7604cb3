//! Ground-truth optimal-control machinery: Hamiltonian evaluation, readout
//! laws with a brute-force grid oracle, Riccati solvers and a shooting
//! two-point boundary-value solver.
//!
//! All operations are pure given their inputs and safe to call from any
//! number of workers.

mod riccati;
mod shooting;

pub use riccati::{is_hurwitz, lqr_costate, riccati_ode, solve_care, RiccatiSolution};
pub use shooting::{shoot_tpbvp, ShootingResult};

use crate::envs::EnvSpec;
use crate::linalg;
use crate::scalar::Real;
use crate::tensor::Tensor;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("no stabilizing initial gain found (pair may not be stabilizable)")]
    NoStabilizingStart,
    #[error("Riccati residual {residual:e} exceeds tolerance {tolerance:e}")]
    ResidualTooLarge { residual: f64, tolerance: f64 },
    #[error("integration diverged at t = {t}")]
    Diverged { t: f64 },
    #[error("dt must divide the horizon (t_f = {t_f}, dt = {dt})")]
    DtMismatch { t_f: f64, dt: f64 },
    #[error("dimension error: {0}")]
    Dim(String),
    #[error("{0}")]
    Linalg(#[from] linalg::LinalgError),
    #[error("operation requires the quadratic cost kind")]
    NotQuadratic,
}

/// Running control-cost family of the Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    /// c(u) = u^T R u — smooth optimal control.
    Quadratic,
    /// c(u) = 0 — bang-bang optimal control.
    StateOnly,
    /// c(u) = ||u||_1 — bang-off-bang optimal control with a coast deadzone.
    Fuel,
}

type VecFn<S> = Arc<dyn Fn(&[S]) -> Vec<S> + Send + Sync>;
type MatFn<S> = Arc<dyn Fn(&[S]) -> Tensor<S> + Send + Sync>;
type ScalarFn<S> = Arc<dyn Fn(&[S]) -> S + Send + Sync>;
type JacFn<S> = Arc<dyn Fn(&[S], &[S]) -> Tensor<S> + Send + Sync>;

/// Analytic problem description for the oracle suite:
/// H(x, lambda, u) = q(x) + c(u) + lambda^T (f(x) + g(x) u).
pub struct HamiltonianSpec<S> {
    pub d_x: usize,
    pub d_u: usize,
    pub drift: VecFn<S>,
    pub influence: MatFn<S>,
    pub state_cost: ScalarFn<S>,
    /// grad q; central finite differences when absent.
    pub state_cost_grad: Option<VecFn<S>>,
    pub terminal_cost: ScalarFn<S>,
    /// grad Phi; central finite differences when absent.
    pub terminal_cost_grad: Option<VecFn<S>>,
    pub control_weight: Tensor<S>,
    /// Jacobian of the closed drift x -> f(x) + g(x) u at fixed u, with
    /// J[i][j] = d xdot_i / d x_j; central finite differences when absent.
    pub closed_jacobian: Option<JacFn<S>>,
    pub u_min: Vec<S>,
    pub u_max: Vec<S>,
    pub cost_kind: CostKind,
}

impl<S: Real> HamiltonianSpec<S> {
    /// Linear-quadratic problem: f = A x, g = B, q = x^T Q x,
    /// Phi = x^T P_f x, unbounded controls.
    pub fn lqr(a: Tensor<S>, b: Tensor<S>, q: Tensor<S>, r: Tensor<S>, p_f: Tensor<S>) -> Self {
        let d_x = a.rows();
        let d_u = b.cols();
        let a2 = a.clone();
        let q2 = q.clone();
        let pf2 = p_f.clone();
        HamiltonianSpec {
            d_x,
            d_u,
            drift: Arc::new(move |x: &[S]| linalg::matvec(&a, x)),
            influence: Arc::new(move |_x: &[S]| b.clone()),
            state_cost: Arc::new(move |x: &[S]| {
                let qx = linalg::matvec(&q, x);
                linalg::dot(x, &qx)
            }),
            state_cost_grad: Some(Arc::new(move |x: &[S]| {
                linalg::matvec(&linalg::scale(&q2, S::lit(2.0)), x)
            })),
            terminal_cost: Arc::new(move |x: &[S]| {
                let px = linalg::matvec(&p_f, x);
                linalg::dot(x, &px)
            }),
            terminal_cost_grad: Some(Arc::new(move |x: &[S]| {
                linalg::matvec(&linalg::scale(&pf2, S::lit(2.0)), x)
            })),
            control_weight: r,
            closed_jacobian: Some(Arc::new(move |_x: &[S], _u: &[S]| a2.clone())),
            u_min: vec![S::neg_infinity(); d_u],
            u_max: vec![S::infinity(); d_u],
            cost_kind: CostKind::Quadratic,
        }
    }

    /// Oracle view of a built-in environment (quadratic control cost,
    /// finite-difference state gradients).
    pub fn from_env(env: &EnvSpec<S>) -> Self {
        HamiltonianSpec {
            d_x: env.d_x,
            d_u: env.d_u,
            drift: env.drift.clone(),
            influence: env.influence.clone(),
            state_cost: env.state_cost.clone(),
            state_cost_grad: None,
            terminal_cost: env.terminal_cost.clone(),
            terminal_cost_grad: None,
            control_weight: env.control_weight.clone(),
            closed_jacobian: None,
            u_min: env.u_min.clone(),
            u_max: env.u_max.clone(),
            cost_kind: CostKind::Quadratic,
        }
    }

    pub fn with_bounds(mut self, u_min: Vec<S>, u_max: Vec<S>) -> Self {
        self.u_min = u_min;
        self.u_max = u_max;
        self
    }

    pub fn with_cost_kind(mut self, kind: CostKind) -> Self {
        self.cost_kind = kind;
        self
    }

    pub fn control_cost(&self, u: &[S]) -> S {
        match self.cost_kind {
            CostKind::Quadratic => {
                let ru = linalg::matvec(&self.control_weight, u);
                linalg::dot(u, &ru)
            }
            CostKind::StateOnly => S::zero(),
            CostKind::Fuel => u.iter().map(|v| v.abs()).sum(),
        }
    }

    pub fn grad_state_cost(&self, x: &[S]) -> Vec<S> {
        match &self.state_cost_grad {
            Some(g) => g(x),
            None => central_grad(&*self.state_cost, x),
        }
    }

    pub fn grad_terminal_cost(&self, x: &[S]) -> Vec<S> {
        match &self.terminal_cost_grad {
            Some(g) => g(x),
            None => central_grad(&*self.terminal_cost, x),
        }
    }

    /// J[i][j] = d (f + g u)_i / d x_j at fixed u.
    pub fn closed_jac(&self, x: &[S], u: &[S]) -> Tensor<S> {
        if let Some(j) = &self.closed_jacobian {
            return j(x, u);
        }
        let f = |x: &[S]| -> Vec<S> {
            let mut dx = (self.drift)(x);
            let gu = linalg::matvec(&(self.influence)(x), u);
            for i in 0..dx.len() {
                dx[i] += gu[i];
            }
            dx
        };
        let h = S::lit(1e-6);
        let n = self.d_x;
        let mut jac = Tensor::zeros(&[n, n]);
        for j in 0..n {
            let mut xp = x.to_vec();
            xp[j] += h;
            let mut xm = x.to_vec();
            xm[j] -= h;
            let (fp, fm) = (f(&xp), f(&xm));
            for i in 0..n {
                jac.set(i, j, (fp[i] - fm[i]) / (S::lit(2.0) * h));
            }
        }
        jac
    }

    /// Switching function sigma = -1/2 g(x)^T lambda. With this scaling the
    /// quadratic minimizer is exactly u = R^{-1} sigma.
    pub fn switching(&self, x: &[S], lambda: &[S]) -> Vec<S> {
        let g = (self.influence)(x);
        let gt_l = linalg::matvec(&linalg::transpose(&g), lambda);
        gt_l.iter().map(|&v| v * S::lit(-0.5)).collect()
    }

    /// Fuel switching function sigma = -g(x)^T lambda. The L1 control cost
    /// makes the coast deadzone |sigma| < 1 exact under this scaling.
    pub fn fuel_switching(&self, x: &[S], lambda: &[S]) -> Vec<S> {
        let g = (self.influence)(x);
        let gt_l = linalg::matvec(&linalg::transpose(&g), lambda);
        gt_l.iter().map(|&v| -v).collect()
    }
}

fn central_grad<S: Real>(f: &(dyn Fn(&[S]) -> S + Send + Sync), x: &[S]) -> Vec<S> {
    let h = S::lit(1e-6);
    (0..x.len())
        .map(|i| {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            (f(&xp) - f(&xm)) / (S::lit(2.0) * h)
        })
        .collect()
}

/// Control-Hamiltonian H = q(x) + c(u) + lambda^T (f(x) + g(x) u).
pub fn hamiltonian<S: Real>(spec: &HamiltonianSpec<S>, x: &[S], lambda: &[S], u: &[S]) -> S {
    let mut xdot = (spec.drift)(x);
    let gu = linalg::matvec(&(spec.influence)(x), u);
    for i in 0..xdot.len() {
        xdot[i] += gu[i];
    }
    (spec.state_cost)(x) + spec.control_cost(u) + linalg::dot(lambda, &xdot)
}

fn clip<S: Real>(u: Vec<S>, u_min: &[S], u_max: &[S]) -> Vec<S> {
    u.into_iter()
        .enumerate()
        .map(|(i, v)| {
            let mut out = v;
            if u_min[i].is_finite() {
                out = out.max(u_min[i]);
            }
            if u_max[i].is_finite() {
                out = out.min(u_max[i]);
            }
            out
        })
        .collect()
}

/// Smooth quadratic-cost readout u = R^{-1} sigma, clipped to finite bounds.
pub fn readout_quadratic<S: Real>(
    sigma: &[S],
    r: &Tensor<S>,
    u_min: &[S],
    u_max: &[S],
) -> Vec<S> {
    let u = linalg::solve(r, sigma).expect("control weight R must be invertible");
    clip(u, u_min, u_max)
}

/// Bang-bang readout: u_i = sign(sigma_i) u_max_i when |sigma_i| > 0, else 0.
pub fn readout_bang_bang<S: Real>(sigma: &[S], u_max: &[S]) -> Vec<S> {
    sigma
        .iter()
        .zip(u_max)
        .map(|(&s, &m)| {
            if s > S::zero() {
                m
            } else if s < S::zero() {
                -m
            } else {
                S::zero()
            }
        })
        .collect()
}

/// Bang-off-bang readout with unit deadzone: u_i = sign(sigma_i) u_max_i
/// when |sigma_i| > 1, else 0 (coast).
pub fn readout_bang_off_bang<S: Real>(sigma: &[S], u_max: &[S]) -> Vec<S> {
    sigma
        .iter()
        .zip(u_max)
        .map(|(&s, &m)| {
            if s > S::one() {
                m
            } else if s < -S::one() {
                -m
            } else {
                S::zero()
            }
        })
        .collect()
}

/// Exhaustive Hamiltonian minimization over a uniform lattice on
/// [u_min, u_max], grid_n points per dimension; ties broken by the
/// lexicographically smallest control. Supports d_u <= 2.
pub fn grid_minimize<S: Real>(
    spec: &HamiltonianSpec<S>,
    x: &[S],
    lambda: &[S],
    grid_n: usize,
) -> Vec<S> {
    assert!(spec.d_u <= 2, "grid oracle supports d_u <= 2");
    assert!(grid_n >= 3, "grid_n must be at least 3");
    let axis = |d: usize| -> Vec<S> {
        let (lo, hi) = (spec.u_min[d], spec.u_max[d]);
        let step = (hi - lo) / S::lit((grid_n - 1) as f64);
        (0..grid_n).map(|k| lo + step * S::lit(k as f64)).collect()
    };
    let mut best: Option<(S, Vec<S>)> = None;
    let mut consider = |u: Vec<S>, spec: &HamiltonianSpec<S>| {
        let h = hamiltonian(spec, x, lambda, &u);
        match &best {
            Some((hb, _)) if h >= *hb => {}
            _ => best = Some((h, u)),
        }
    };
    if spec.d_u == 1 {
        for u0 in axis(0) {
            consider(vec![u0], spec);
        }
    } else {
        let (a0, a1) = (axis(0), axis(1));
        for &u0 in &a0 {
            for &u1 in &a1 {
                consider(vec![u0, u1], spec);
            }
        }
    }
    best.expect("non-empty lattice").1
}

/// Closed-form minimizer of the ensemble-averaged quadratic Hamiltonian:
/// u = -(1 / 2m) R^{-1} G^T sum_i lambda_i, clipped to finite bounds.
pub fn mean_hamiltonian_minimize<S: Real>(
    lambdas: &[Vec<S>],
    g: &Tensor<S>,
    r: &Tensor<S>,
    u_min: &[S],
    u_max: &[S],
) -> Vec<S> {
    assert!(!lambdas.is_empty(), "ensemble must be non-empty");
    let d_x = g.rows();
    let mut sum = vec![S::zero(); d_x];
    for l in lambdas {
        for i in 0..d_x {
            sum[i] += l[i];
        }
    }
    let gt_sum = linalg::matvec(&linalg::transpose(g), &sum);
    let m = S::lit(lambdas.len() as f64);
    let sigma: Vec<S> = gt_sum.iter().map(|&v| -v / (S::lit(2.0) * m)).collect();
    let u = linalg::solve(r, &sigma).expect("control weight R must be invertible");
    clip(u, u_min, u_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn di_spec() -> HamiltonianSpec<f64> {
        let a = Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 0.0]);
        let b = Tensor::matrix(2, 1, vec![0.0, 1.0]);
        let q = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.1]);
        let r = Tensor::matrix(1, 1, vec![0.1]);
        HamiltonianSpec::lqr(a, b, q, r, Tensor::zeros(&[2, 2]))
    }

    #[test]
    fn hamiltonian_at_zero_costate_zero_control() {
        let spec = di_spec();
        let x = [1.5, -0.5];
        let h = hamiltonian(&spec, &x, &[0.0, 0.0], &[0.0]);
        assert!((h - (spec.state_cost)(&x)).abs() < 1e-15);
    }

    #[test]
    fn hamiltonian_direct_substitution() {
        let spec = di_spec();
        let h = hamiltonian(&spec, &[1.0, 0.0], &[0.0, 0.0], &[1.0]);
        assert!((h - 1.1).abs() < 1e-15);
    }

    #[test]
    fn fuel_kind_at_zero_control() {
        let spec = di_spec().with_cost_kind(CostKind::Fuel);
        let x = [0.4, 1.2];
        let lam = [0.3, -0.7];
        let h = hamiltonian(&spec, &x, &lam, &[0.0]);
        let f = (spec.drift)(&x);
        let expect = (spec.state_cost)(&x) + lam[0] * f[0] + lam[1] * f[1];
        assert!((h - expect).abs() < 1e-15);
    }

    #[test]
    fn quadratic_readout_diagonal_solve() {
        let r = Tensor::matrix(2, 2, vec![0.5, 0.0, 0.0, 0.5]);
        let inf = [f64::NEG_INFINITY, f64::NEG_INFINITY];
        let sup = [f64::INFINITY, f64::INFINITY];
        let u = readout_quadratic(&[1.0, -2.0], &r, &inf, &sup);
        assert!((u[0] - 2.0).abs() < 1e-12 && (u[1] + 4.0).abs() < 1e-12);
        let u0 = readout_quadratic(&[0.0, 0.0], &r, &inf, &sup);
        assert_eq!(u0, vec![0.0, 0.0]);
    }

    #[test]
    fn bang_bang_sign_law() {
        assert_eq!(readout_bang_bang(&[0.3, -7.0], &[1.0, 1.0]), vec![1.0, -1.0]);
        assert_eq!(readout_bang_bang(&[0.0], &[1.0]), vec![0.0]);
    }

    #[test]
    fn bang_off_bang_deadzone() {
        assert_eq!(readout_bang_off_bang(&[0.5], &[1.0]), vec![0.0]);
        assert_eq!(readout_bang_off_bang(&[-3.0], &[2.0]), vec![-2.0]);
    }

    #[test]
    fn grid_convex_minimum_near_zero() {
        let spec = di_spec().with_bounds(vec![-2.0], vec![2.0]);
        // lambda = 0: H convex in u with minimum at 0; 101-point grid contains 0
        let u = grid_minimize(&spec, &[1.0, 1.0], &[0.0, 0.0], 101);
        assert_eq!(u, vec![0.0]);
    }

    #[test]
    fn grid_linear_boundary_minimum() {
        // state-only cost, positive H slope in u -> boundary minimum at -1
        let spec = di_spec()
            .with_bounds(vec![-1.0], vec![1.0])
            .with_cost_kind(CostKind::StateOnly);
        // slope of H in u is (g^T lambda)_0 = lambda_1 > 0
        let u = grid_minimize(&spec, &[0.0, 0.0], &[0.0, 2.0], 3);
        assert_eq!(u, vec![-1.0]);
    }

    /// Cross-oracle agreement: each readout law vs the exhaustive grid
    /// argmin, 100 random draws per law, diagonal R.
    #[test]
    fn readouts_match_grid_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let grid_n = 101;
        for _ in 0..100 {
            let r_diag = rng.gen_range(0.2..1.5);
            let umax = rng.gen_range(0.5..2.0);
            let spec = di_spec();
            let mut spec = HamiltonianSpec {
                control_weight: Tensor::matrix(1, 1, vec![r_diag]),
                ..spec
            }
            .with_bounds(vec![-umax], vec![umax]);
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let lam = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let cell = 2.0 * umax / (grid_n - 1) as f64;

            // quadratic
            spec.cost_kind = CostKind::Quadratic;
            let sigma = spec.switching(&x, &lam);
            let u = readout_quadratic(&sigma, &spec.control_weight, &spec.u_min, &spec.u_max);
            let ug = grid_minimize(&spec, &x, &lam, grid_n);
            assert!((u[0] - ug[0]).abs() <= cell, "quadratic {} vs {}", u[0], ug[0]);

            // bang-bang
            spec.cost_kind = CostKind::StateOnly;
            let u = readout_bang_bang(&sigma, &spec.u_max);
            let ug = grid_minimize(&spec, &x, &lam, grid_n);
            assert!((u[0] - ug[0]).abs() <= cell, "bang-bang {} vs {}", u[0], ug[0]);

            // bang-off-bang (fuel): unit deadzone needs the -g^T lambda scaling
            spec.cost_kind = CostKind::Fuel;
            let sf = spec.fuel_switching(&x, &lam);
            let u = readout_bang_off_bang(&sf, &spec.u_max);
            let ug = grid_minimize(&spec, &x, &lam, grid_n);
            assert!((u[0] - ug[0]).abs() <= cell, "bang-off-bang {} vs {}", u[0], ug[0]);
            if sf[0].abs() < 1.0 {
                assert_eq!(u[0], 0.0, "deadzone must coast exactly");
            }
        }
    }

    /// H(x, lambda, readout) never exceeds H at any lattice point.
    #[test]
    fn readouts_are_hamiltonian_minimizers() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..100 {
            let umax = rng.gen_range(0.5..2.0);
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let lam = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            for kind in [CostKind::Quadratic, CostKind::StateOnly, CostKind::Fuel] {
                let spec = di_spec().with_bounds(vec![-umax], vec![umax]).with_cost_kind(kind);
                let u = match kind {
                    CostKind::Quadratic => {
                        let s = spec.switching(&x, &lam);
                        readout_quadratic(&s, &spec.control_weight, &spec.u_min, &spec.u_max)
                    }
                    CostKind::StateOnly => {
                        let s = spec.switching(&x, &lam);
                        readout_bang_bang(&s, &spec.u_max)
                    }
                    CostKind::Fuel => {
                        let s = spec.fuel_switching(&x, &lam);
                        readout_bang_off_bang(&s, &spec.u_max)
                    }
                };
                let h_law = hamiltonian(&spec, &x, &lam, &u);
                let n = 51;
                for k in 0..n {
                    let ug = -umax + 2.0 * umax * k as f64 / (n - 1) as f64;
                    let h_g = hamiltonian(&spec, &x, &lam, &[ug]);
                    assert!(h_law <= h_g + 1e-12, "{kind:?}: H(law) {h_law} > H({ug}) {h_g}");
                }
            }
        }
    }

    #[test]
    fn mean_hamiltonian_singleton_matches_quadratic_readout() {
        let spec = di_spec();
        let g = (spec.influence)(&[0.0, 0.0]);
        let lam = vec![0.7, -1.3];
        let u_ens = mean_hamiltonian_minimize(
            &[lam.clone()],
            &g,
            &spec.control_weight,
            &spec.u_min,
            &spec.u_max,
        );
        let sigma = spec.switching(&[0.0, 0.0], &lam);
        let u_single =
            readout_quadratic(&sigma, &spec.control_weight, &spec.u_min, &spec.u_max);
        assert!((u_ens[0] - u_single[0]).abs() < 1e-14);
    }

    #[test]
    fn mean_hamiltonian_symmetric_cancellation() {
        let spec = di_spec();
        let g = (spec.influence)(&[0.0, 0.0]);
        let lam = vec![0.7, -1.3];
        let neg: Vec<f64> = lam.iter().map(|v| -v).collect();
        let u = mean_hamiltonian_minimize(
            &[lam, neg],
            &g,
            &spec.control_weight,
            &spec.u_min,
            &spec.u_max,
        );
        assert_eq!(u, vec![0.0]);
    }

    #[test]
    fn mean_hamiltonian_matches_averaged_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let grid_n = 201;
        for _ in 0..20 {
            let umax = 2.0;
            let spec = di_spec().with_bounds(vec![-umax], vec![umax]);
            let x = [0.0, 0.0];
            let lambdas: Vec<Vec<f64>> = (0..5)
                .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect();
            let g = (spec.influence)(&x);
            let u = mean_hamiltonian_minimize(
                &lambdas,
                &g,
                &spec.control_weight,
                &spec.u_min,
                &spec.u_max,
            );
            // brute-force minimum of the explicitly averaged Hamiltonian
            let cell = 2.0 * umax / (grid_n - 1) as f64;
            let mut best = (f64::INFINITY, 0.0);
            for k in 0..grid_n {
                let ug = -umax + 2.0 * umax * k as f64 / (grid_n - 1) as f64;
                let mean_h: f64 = lambdas
                    .iter()
                    .map(|l| hamiltonian(&spec, &x, l, &[ug]))
                    .sum::<f64>()
                    / lambdas.len() as f64;
                if mean_h < best.0 {
                    best = (mean_h, ug);
                }
            }
            assert!((u[0] - best.1).abs() <= cell, "{} vs {}", u[0], best.1);
        }
    }

    #[test]
    fn finite_difference_gradients_fall_back() {
        let env = crate::envs::pendulum_swingup::<f64>();
        let spec = HamiltonianSpec::from_env(&env);
        let x = [0.7, -0.4];
        let g = spec.grad_state_cost(&x);
        // q = 1 + cos(th) + 0.01 thdot^2
        assert!((g[0] - (-x[0].sin())).abs() < 1e-6);
        assert!((g[1] - 0.02 * x[1]).abs() < 1e-6);
        let jac = spec.closed_jac(&x, &[0.3]);
        // d thetadotdot / d theta = -9.81 cos(theta)
        assert!((jac.at(1, 0) - (-9.81 * x[0].cos())).abs() < 1e-4);
        assert!((jac.at(0, 1) - 1.0).abs() < 1e-8);
    }
}
