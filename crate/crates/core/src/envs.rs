//! Desk-scale continuous-time control-affine environments.
//!
//! Dynamics are xdot = f(x) + g(x) u integrated with classical RK4, the
//! observation is y = phi(x) + v with per-channel Gaussian sensor noise, and
//! the running reward is the negative cost integrand times dt (terminal cost
//! subtracted on the last step). Partial observability comes from a
//! full-vector Bernoulli mask applied by the trainer pipeline.

use crate::linalg;
use crate::rng;
use crate::scalar::Real;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step called after the episode finished (t = {t})")]
    EpisodeOver { t: usize },
    #[error("unknown environment '{0}'")]
    UnknownEnv(String),
}

type VecFn<S> = Arc<dyn Fn(&[S]) -> Vec<S> + Send + Sync>;
type MatFn<S> = Arc<dyn Fn(&[S]) -> Tensor<S> + Send + Sync>;
type ScalarFn<S> = Arc<dyn Fn(&[S]) -> S + Send + Sync>;
type InitFn<S> = Arc<dyn Fn(&mut ChaCha8Rng) -> Vec<S> + Send + Sync>;

/// Control-affine continuous-time system description.
pub struct EnvSpec<S> {
    pub name: String,
    pub d_x: usize,
    pub d_u: usize,
    pub d_y: usize,
    /// Integration step in seconds.
    pub dt: S,
    pub episode_len: usize,
    pub u_min: Vec<S>,
    pub u_max: Vec<S>,
    /// Drift f(x).
    pub drift: VecFn<S>,
    /// Control influence g(x), a d_x x d_u matrix.
    pub influence: MatFn<S>,
    /// State cost q(x) >= 0.
    pub state_cost: ScalarFn<S>,
    /// Control weight R (symmetric positive definite).
    pub control_weight: Tensor<S>,
    /// Terminal cost Phi(x).
    pub terminal_cost: ScalarFn<S>,
    /// Observation map phi(x).
    pub obs_map: VecFn<S>,
    /// Per-channel observation noise standard deviations.
    pub noise_std: Vec<S>,
    /// Initial state distribution.
    pub init: InitFn<S>,
}

impl<S: Real> EnvSpec<S> {
    /// Check the structural invariants (R SPD, dt > 0, bounds ordered).
    pub fn validate(&self) -> Result<(), String> {
        if self.dt <= S::zero() {
            return Err("dt must be positive".into());
        }
        if self.u_min.len() != self.d_u || self.u_max.len() != self.d_u {
            return Err("control bounds must have d_u entries".into());
        }
        for i in 0..self.d_u {
            if !(self.u_min[i] < self.u_max[i]) {
                return Err(format!("u_min[{i}] must be < u_max[{i}]"));
            }
        }
        let r = &self.control_weight;
        if r.shape() != [self.d_u, self.d_u] {
            return Err("control weight R must be d_u x d_u".into());
        }
        let rt = linalg::transpose(r);
        if linalg::frobenius_norm(&linalg::sub(r, &rt)).to_f64_lossy() > 1e-12 {
            return Err("control weight R must be symmetric".into());
        }
        if linalg::cholesky(r).is_err() {
            return Err("control weight R must be positive definite".into());
        }
        if self.noise_std.len() != self.d_y || self.noise_std.iter().any(|s| *s < S::zero()) {
            return Err("noise_std must be d_y non-negative entries".into());
        }
        Ok(())
    }

    /// Replace the observation noise levels (used by low-noise experiment
    /// configurations).
    pub fn with_noise_std(mut self, sigma: S) -> Self {
        self.noise_std = vec![sigma; self.d_y];
        self
    }

    pub fn clip_action(&self, u: &[S]) -> Vec<S> {
        u.iter()
            .enumerate()
            .map(|(i, &v)| v.max(self.u_min[i]).min(self.u_max[i]))
            .collect()
    }
}

/// Integrated state plus its seeded noise stream.
pub struct EnvState<S> {
    pub x: Vec<S>,
    pub t: usize,
    pub rng: ChaCha8Rng,
}

impl<S: Real> EnvState<S> {
    /// Fresh state drawn from the spec's initial distribution; the rng
    /// stream is derived from (seed, "env", index) and persists across
    /// episode resets so trajectories stay reproducible.
    pub fn new(spec: &EnvSpec<S>, seed: u64, index: u64) -> Self {
        let mut rng = rng::stream(seed, "env", index);
        let x = (spec.init)(&mut rng);
        EnvState { x, t: 0, rng }
    }

    /// Start a new episode, reusing the existing rng stream.
    pub fn reset(&mut self, spec: &EnvSpec<S>) {
        self.x = (spec.init)(&mut self.rng);
        self.t = 0;
    }
}

pub struct StepResult<S> {
    pub reward: S,
    pub done: bool,
    /// True when integration produced a non-finite state; the episode is
    /// terminated at this step.
    pub diverged: bool,
}

/// Classical 4th-order Runge-Kutta step of xdot = f(x) + g(x) u with the
/// control held constant over the step.
pub fn rk4_step<S: Real>(spec: &EnvSpec<S>, x: &[S], u: &[S]) -> Vec<S> {
    let deriv = |x: &[S]| -> Vec<S> {
        let mut dx = (spec.drift)(x);
        let g = (spec.influence)(x);
        let gu = linalg::matvec(&g, u);
        for i in 0..dx.len() {
            dx[i] += gu[i];
        }
        dx
    };
    let dt = spec.dt;
    let half = dt * S::lit(0.5);
    let k1 = deriv(x);
    let x2: Vec<S> = x.iter().zip(&k1).map(|(&xi, &k)| xi + half * k).collect();
    let k2 = deriv(&x2);
    let x3: Vec<S> = x.iter().zip(&k2).map(|(&xi, &k)| xi + half * k).collect();
    let k3 = deriv(&x3);
    let x4: Vec<S> = x.iter().zip(&k3).map(|(&xi, &k)| xi + dt * k).collect();
    let k4 = deriv(&x4);
    let sixth = dt / S::lit(6.0);
    let two = S::lit(2.0);
    x.iter()
        .enumerate()
        .map(|(i, &xi)| xi + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]))
        .collect()
}

/// Advance one step: clips the action to bounds, integrates, and returns the
/// running reward -(q(x) + u^T R u) dt, minus the terminal cost on the last
/// step. Rejects stepping a finished episode.
pub fn step<S: Real>(
    spec: &EnvSpec<S>,
    state: &mut EnvState<S>,
    u: &[S],
) -> Result<StepResult<S>, EnvError> {
    if state.t >= spec.episode_len {
        return Err(EnvError::EpisodeOver { t: state.t });
    }
    let u = spec.clip_action(u);
    let ru = linalg::matvec(&spec.control_weight, &u);
    let control_cost = linalg::dot(&u, &ru);
    let reward = -((spec.state_cost)(&state.x) + control_cost) * spec.dt;

    let x_next = rk4_step(spec, &state.x, &u);
    if x_next.iter().any(|v| !v.is_finite()) {
        state.t = spec.episode_len;
        return Ok(StepResult { reward, done: true, diverged: true });
    }
    state.x = x_next;
    state.t += 1;
    let done = state.t == spec.episode_len;
    let reward = if done { reward - (spec.terminal_cost)(&state.x) } else { reward };
    Ok(StepResult { reward, done, diverged: false })
}

/// Noisy observation y = phi(x) + v, v ~ N(0, diag(noise_std^2)) drawn from
/// the state's rng stream.
pub fn observe<S: Real>(spec: &EnvSpec<S>, state: &mut EnvState<S>) -> Vec<S> {
    let mut y = (spec.obs_map)(&state.x);
    for (yi, &sd) in y.iter_mut().zip(&spec.noise_std) {
        if sd > S::zero() {
            let v: f64 = state.rng.sample(rand_distr::StandardNormal);
            *yi += sd * S::lit(v);
        }
    }
    y
}

/// Full-vector sensor dropout: one Bernoulli(1-p) draw per call gates the
/// entire vector. Returns the masked vector and the mask bit (true = kept).
pub fn apply_mask<S: Real>(y: &[S], p: f64, rng: &mut ChaCha8Rng) -> (Vec<S>, bool) {
    let masked = rng.gen::<f64>() < p;
    if masked {
        (vec![S::zero(); y.len()], false)
    } else {
        (y.to_vec(), true)
    }
}

// ── builtin environments ─────────────────────────────────────────────

/// Double integrator: A = [[0,1],[0,0]], B = (0,1)^T, Q = diag(1, 0.1),
/// R = 0.1, zero terminal cost, identity observation.
pub fn double_integrator<S: Real>() -> EnvSpec<S> {
    let spec = EnvSpec {
        name: "double_integrator".into(),
        d_x: 2,
        d_u: 1,
        d_y: 2,
        dt: S::lit(0.02),
        episode_len: 500,
        u_min: vec![S::lit(-2.0)],
        u_max: vec![S::lit(2.0)],
        drift: Arc::new(|x: &[S]| vec![x[1], S::zero()]),
        influence: Arc::new(|_x: &[S]| Tensor::matrix(2, 1, vec![S::zero(), S::one()])),
        state_cost: Arc::new(|x: &[S]| x[0] * x[0] + S::lit(0.1) * x[1] * x[1]),
        control_weight: Tensor::matrix(1, 1, vec![S::lit(0.1)]),
        terminal_cost: Arc::new(|_x: &[S]| S::zero()),
        obs_map: Arc::new(|x: &[S]| x.to_vec()),
        noise_std: vec![S::lit(0.01); 2],
        init: Arc::new(|rng: &mut ChaCha8Rng| {
            (0..2).map(|_| S::lit(rng.gen_range(-1.0..1.0))).collect()
        }),
    };
    debug_assert!(spec.validate().is_ok());
    spec
}

/// Pendulum swing-up: theta measured from the hanging position (theta = pi
/// is upright), m = l = 1, g = 9.81. The state cost is the spec's
/// (1 - cos(angle-from-upright)) + 0.01 thetadot^2 shaping, written here in
/// hanging coordinates as (1 + cos theta) + 0.01 thetadot^2.
pub fn pendulum_swingup<S: Real>() -> EnvSpec<S> {
    let g_over_l = S::lit(9.81);
    let spec = EnvSpec {
        name: "pendulum_swingup".into(),
        d_x: 2,
        d_u: 1,
        d_y: 3,
        dt: S::lit(0.02),
        episode_len: 400,
        u_min: vec![S::lit(-2.0)],
        u_max: vec![S::lit(2.0)],
        drift: Arc::new(move |x: &[S]| vec![x[1], -g_over_l * x[0].sin()]),
        influence: Arc::new(|_x: &[S]| Tensor::matrix(2, 1, vec![S::zero(), S::one()])),
        state_cost: Arc::new(|x: &[S]| {
            S::one() + x[0].cos() + S::lit(0.01) * x[1] * x[1]
        }),
        control_weight: Tensor::matrix(1, 1, vec![S::lit(0.01)]),
        terminal_cost: Arc::new(|_x: &[S]| S::zero()),
        obs_map: Arc::new(|x: &[S]| vec![x[0].cos(), x[0].sin(), x[1]]),
        noise_std: vec![S::lit(0.01); 3],
        init: Arc::new(|rng: &mut ChaCha8Rng| {
            (0..2).map(|_| S::lit(rng.gen_range(-0.05..0.05))).collect()
        }),
    };
    debug_assert!(spec.validate().is_ok());
    spec
}

/// Cart-pole swing-up: cart mass 1, point-mass pole 0.1 at length 0.5,
/// force on the cart, theta measured from hanging. State (p, pdot, theta,
/// thetadot); shaping analogous to the pendulum plus a cart-position term.
pub fn cartpole_swingup<S: Real>() -> EnvSpec<S> {
    let m_c = 1.0;
    let m_p = 0.1;
    let l = 0.5;
    let grav = 9.81;
    let spec = EnvSpec {
        name: "cartpole_swingup".into(),
        d_x: 4,
        d_u: 1,
        d_y: 5,
        dt: S::lit(0.02),
        episode_len: 500,
        u_min: vec![S::lit(-10.0)],
        u_max: vec![S::lit(10.0)],
        drift: Arc::new(move |x: &[S]| {
            let (pdot, th, thdot) = (x[1], x[2], x[3]);
            let (sin, cos) = (th.sin(), th.cos());
            let mp = S::lit(m_p);
            let ll = S::lit(l);
            let g = S::lit(grav);
            let denom = S::lit(m_c) + mp * sin * sin;
            // force-free part; the force enters through g(x)
            let pddot = mp * sin * (ll * thdot * thdot + g * cos) / denom;
            let thddot =
                (-(S::lit(m_c) + mp) * g * sin - cos * (mp * ll * thdot * thdot * sin))
                    / (ll * denom);
            vec![pdot, pddot, thdot, thddot]
        }),
        influence: Arc::new(move |x: &[S]| {
            let th = x[2];
            let (sin, cos) = (th.sin(), th.cos());
            let denom = S::lit(m_c) + S::lit(m_p) * sin * sin;
            Tensor::matrix(
                4,
                1,
                vec![
                    S::zero(),
                    S::one() / denom,
                    S::zero(),
                    -cos / (S::lit(l) * denom),
                ],
            )
        }),
        state_cost: Arc::new(|x: &[S]| {
            S::one() + x[2].cos()
                + S::lit(0.01) * x[3] * x[3]
                + S::lit(0.05) * x[0] * x[0]
                + S::lit(0.01) * x[1] * x[1]
        }),
        control_weight: Tensor::matrix(1, 1, vec![S::lit(0.01)]),
        terminal_cost: Arc::new(|_x: &[S]| S::zero()),
        obs_map: Arc::new(|x: &[S]| vec![x[0], x[1], x[2].cos(), x[2].sin(), x[3]]),
        noise_std: vec![S::lit(0.01); 5],
        init: Arc::new(|rng: &mut ChaCha8Rng| {
            (0..4).map(|_| S::lit(rng.gen_range(-0.05..0.05))).collect()
        }),
    };
    debug_assert!(spec.validate().is_ok());
    spec
}

/// Environment lookup by the CLI/config name string.
pub fn by_name<S: Real>(name: &str) -> Result<EnvSpec<S>, EnvError> {
    match name {
        "double_integrator" => Ok(double_integrator()),
        "pendulum_swingup" => Ok(pendulum_swingup()),
        "cartpole_swingup" => Ok(cartpole_swingup()),
        other => Err(EnvError::UnknownEnv(other.to_string())),
    }
}
