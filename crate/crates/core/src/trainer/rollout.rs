//! Vectorized rollout collection with the normalize / clip / mask pipeline.
//!
//! Observations are prepared one step ahead (the pending observation), so a
//! chunk boundary can bootstrap the critic on the next state without drawing
//! extra noise or mask samples. Hidden states carry across chunk boundaries
//! within an episode; gradients never do (the chunk-start hidden is stored
//! as a detached constant).

use crate::envs::{self, EnvSpec, EnvState};
use crate::policy::{self, PolicyParams};
use crate::rng;
use crate::scalar::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trainer::stats::{ReturnScaler, RunningStats};
use crate::trainer::TrainError;
use rand_chacha::ChaCha8Rng;

/// Time-major [T][B] rollout storage.
pub struct RolloutBuffer<S> {
    pub t_len: usize,
    pub num_envs: usize,
    pub y_raw: Vec<Vec<Vec<S>>>,
    /// Normalized, clipped, pre-mask observation.
    pub y_norm: Vec<Vec<Vec<S>>>,
    /// Mask bit per step (true = observation kept).
    pub mask: Vec<Vec<bool>>,
    /// Policy input: masked normalized observation.
    pub y_tilde: Vec<Vec<Vec<S>>>,
    pub y_enc: Vec<Vec<Vec<S>>>,
    /// Hidden state entering the step.
    pub h_pre: Vec<Vec<Vec<S>>>,
    /// Hidden state after the cell update (the critic/actor input).
    pub h_post: Vec<Vec<Vec<S>>>,
    pub u_raw: Vec<Vec<Vec<S>>>,
    pub logp_old: Vec<Vec<S>>,
    pub reward_raw: Vec<Vec<S>>,
    pub reward_scaled: Vec<Vec<S>>,
    pub value: Vec<Vec<S>>,
    pub done: Vec<Vec<bool>>,
    /// Hidden state at the chunk boundary, detached.
    pub h_chunk_start: Vec<Vec<S>>,
    /// Critic value at the post-chunk state, zeroed where the chunk ended an
    /// episode.
    pub bootstrap_value: Vec<S>,
    pub advantage: Option<Vec<Vec<S>>>,
    pub return_target: Option<Vec<Vec<S>>>,
}

impl<S: Real> RolloutBuffer<S> {
    fn with_dims(t_len: usize, num_envs: usize) -> Self {
        RolloutBuffer {
            t_len,
            num_envs,
            y_raw: vec![vec![Vec::new(); num_envs]; t_len],
            y_norm: vec![vec![Vec::new(); num_envs]; t_len],
            mask: vec![vec![true; num_envs]; t_len],
            y_tilde: vec![vec![Vec::new(); num_envs]; t_len],
            y_enc: vec![vec![Vec::new(); num_envs]; t_len],
            h_pre: vec![vec![Vec::new(); num_envs]; t_len],
            h_post: vec![vec![Vec::new(); num_envs]; t_len],
            u_raw: vec![vec![Vec::new(); num_envs]; t_len],
            logp_old: vec![vec![S::zero(); num_envs]; t_len],
            reward_raw: vec![vec![S::zero(); num_envs]; t_len],
            reward_scaled: vec![vec![S::zero(); num_envs]; t_len],
            value: vec![vec![S::zero(); num_envs]; t_len],
            done: vec![vec![false; num_envs]; t_len],
            h_chunk_start: vec![Vec::new(); num_envs],
            bootstrap_value: vec![S::zero(); num_envs],
            advantage: None,
            return_target: None,
        }
    }

    pub fn mask_rate(&self) -> f64 {
        let total = (self.t_len * self.num_envs) as f64;
        let masked = self
            .mask
            .iter()
            .flat_map(|row| row.iter())
            .filter(|&&kept| !kept)
            .count() as f64;
        masked / total
    }
}

/// Observation prepared for the next policy step.
#[derive(Clone)]
pub struct PendingObs<S> {
    pub y_raw: Vec<S>,
    pub y_norm: Vec<S>,
    pub y_tilde: Vec<S>,
    pub kept: bool,
}

/// Everything that persists across rollout chunks.
pub struct RolloutState<S> {
    pub envs: Vec<EnvState<S>>,
    pub hidden: Vec<Vec<S>>,
    pub pending: Vec<PendingObs<S>>,
    pub mask_rngs: Vec<ChaCha8Rng>,
    pub action_rngs: Vec<ChaCha8Rng>,
    episode_acc: Vec<S>,
    pub completed_returns: Vec<S>,
}

/// Run the observe -> update stats -> normalize/clip -> mask pipeline once.
/// Statistics always update from the raw pre-mask observation; the config
/// switch only moves where the mask applies.
pub fn prepare_obs<S: Real>(
    spec: &EnvSpec<S>,
    env: &mut EnvState<S>,
    stats: &mut RunningStats<S>,
    mask_rng: &mut ChaCha8Rng,
    mask_p: f64,
    mask_before_norm: bool,
) -> PendingObs<S> {
    let y_raw = envs::observe(spec, env);
    stats.update(&y_raw);
    let y_norm = stats.normalize(&y_raw);
    if mask_before_norm {
        let (masked_raw, kept) = envs::apply_mask(&y_raw, mask_p, mask_rng);
        let y_tilde = stats.normalize(&masked_raw);
        PendingObs { y_raw, y_norm, y_tilde, kept }
    } else {
        let (y_tilde, kept) = envs::apply_mask(&y_norm, mask_p, mask_rng);
        PendingObs { y_raw, y_norm, y_tilde, kept }
    }
}

impl<S: Real> RolloutState<S> {
    pub fn new(
        spec: &EnvSpec<S>,
        stats: &mut RunningStats<S>,
        num_envs: usize,
        d_h: usize,
        seed: u64,
        mask_p: f64,
        mask_before_norm: bool,
    ) -> Self {
        let mut envs_v = Vec::with_capacity(num_envs);
        let mut mask_rngs = Vec::with_capacity(num_envs);
        let mut action_rngs = Vec::with_capacity(num_envs);
        let mut pending = Vec::with_capacity(num_envs);
        for i in 0..num_envs {
            let mut env = EnvState::new(spec, seed, i as u64);
            let mut mask_rng = rng::stream(seed, "mask", i as u64);
            pending.push(prepare_obs(
                spec,
                &mut env,
                stats,
                &mut mask_rng,
                mask_p,
                mask_before_norm,
            ));
            envs_v.push(env);
            mask_rngs.push(mask_rng);
            action_rngs.push(rng::stream(seed, "action", i as u64));
        }
        RolloutState {
            envs: envs_v,
            hidden: vec![vec![S::zero(); d_h]; num_envs],
            pending,
            mask_rngs,
            action_rngs,
            episode_acc: vec![S::zero(); num_envs],
            completed_returns: Vec::new(),
        }
    }

    /// Raw-reward returns of episodes finished since the last drain.
    pub fn drain_completed(&mut self) -> Vec<S> {
        std::mem::take(&mut self.completed_returns)
    }
}

/// Collect T steps from every environment. One tape per timestep carries the
/// policy forward for the whole batch; values recorded here are bitwise
/// reproduced when the update re-runs the recurrent forward pass.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollout<S: Real>(
    spec: &EnvSpec<S>,
    params: &PolicyParams<S>,
    stats: &mut RunningStats<S>,
    scaler: &mut ReturnScaler<S>,
    state: &mut RolloutState<S>,
    t_len: usize,
    mask_p: f64,
    mask_before_norm: bool,
) -> Result<RolloutBuffer<S>, TrainError> {
    let num_envs = state.envs.len();
    let d_h = params.d_h;
    let mut buf = RolloutBuffer::with_dims(t_len, num_envs);
    for (b, h) in state.hidden.iter().enumerate() {
        buf.h_chunk_start[b] = h.clone();
    }

    for t in 0..t_len {
        let mut tape = Tape::new();
        let pn = params.record(&mut tape);
        for b in 0..num_envs {
            let pend = state.pending[b].clone();
            let h_pre = state.hidden[b].clone();

            let y_node = tape.input(Tensor::vector(pend.y_tilde.clone()));
            let h_node = tape.input(Tensor::vector(h_pre.clone()));
            let y_enc = policy::encode(&mut tape, &pn, y_node)?;
            let h_post = policy::cell_step(&mut tape, &pn, y_enc, h_node)?;
            let mu = policy::actor_mean(&mut tape, &pn, h_post)?;
            let v = policy::critic_value(&mut tape, &pn, y_enc, h_post)?;

            let mu_val = tape.value(mu).data().to_vec();
            let u_raw = params.sample_action(&mu_val, &mut state.action_rngs[b]);
            let logp = policy::log_prob(&mut tape, &pn, mu, &Tensor::vector(u_raw.clone()))?;

            let step = envs::step(spec, &mut state.envs[b], &u_raw)?;
            let done = step.done;
            let r_scaled = scaler.scale(b, step.reward, done);
            state.episode_acc[b] += step.reward;

            buf.y_raw[t][b] = pend.y_raw;
            buf.y_norm[t][b] = pend.y_norm;
            buf.mask[t][b] = pend.kept;
            buf.y_tilde[t][b] = pend.y_tilde;
            buf.y_enc[t][b] = tape.value(y_enc).data().to_vec();
            buf.h_pre[t][b] = h_pre;
            buf.h_post[t][b] = tape.value(h_post).data().to_vec();
            buf.u_raw[t][b] = u_raw;
            buf.logp_old[t][b] = tape.value(logp).item();
            buf.reward_raw[t][b] = step.reward;
            buf.reward_scaled[t][b] = r_scaled;
            buf.value[t][b] = tape.value(v).item();
            buf.done[t][b] = done;

            if done {
                state.completed_returns.push(state.episode_acc[b]);
                state.episode_acc[b] = S::zero();
                state.envs[b].reset(spec);
                state.hidden[b] = vec![S::zero(); d_h];
            } else {
                state.hidden[b] = tape.value(h_post).data().to_vec();
            }
            state.pending[b] = prepare_obs(
                spec,
                &mut state.envs[b],
                stats,
                &mut state.mask_rngs[b],
                mask_p,
                mask_before_norm,
            );
        }
    }

    // bootstrap values at the post-chunk states
    let mut tape = Tape::new();
    let pn = params.record(&mut tape);
    for b in 0..num_envs {
        if buf.done[t_len - 1][b] {
            buf.bootstrap_value[b] = S::zero();
            continue;
        }
        let y_node = tape.input(Tensor::vector(state.pending[b].y_tilde.clone()));
        let h_node = tape.input(Tensor::vector(state.hidden[b].clone()));
        let y_enc = policy::encode(&mut tape, &pn, y_node)?;
        let h_post = policy::cell_step(&mut tape, &pn, y_enc, h_node)?;
        let v = policy::critic_value(&mut tape, &pn, y_enc, h_post)?;
        buf.bootstrap_value[b] = tape.value(v).item();
    }
    Ok(buf)
}
