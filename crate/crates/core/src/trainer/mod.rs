//! End-to-end PPO with the co-state alignment term: vectorized rollout
//! collection with normalization and sensor masking, GAE, HJB co-state
//! target extraction, the four-term clipped objective, Adam with global-norm
//! clipping and linear learning-rate annealing.

mod adam;
mod gae;
mod rollout;
mod stats;
mod update;

pub use adam::{clip_global_norm, global_norm, AdamState};
pub use gae::compute_gae;
pub use rollout::{collect_rollout, prepare_obs, PendingObs, RolloutBuffer, RolloutState};
pub use stats::{ReturnScaler, RunningStats};
pub use update::{
    cosine_distance_node, costate_loss, costate_targets, ppo_update, UpdateMetrics,
};

use crate::envs::{self, EnvSpec};
use crate::policy::{Arch, PolicyParams};
use crate::rng;
use crate::scalar::Real;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("environment error: {0}")]
    Env(#[from] envs::EnvError),
    #[error("autodiff error: {0}")]
    Tape(#[from] crate::tape::TapeError),
    #[error("non-finite {term} loss")]
    NonFinite { term: &'static str },
    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: u64,
        #[source]
        source: Box<TrainError>,
    },
}

/// Flat training configuration (the JSON config file schema).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub env: String,
    pub arch: String,
    pub num_envs: usize,
    pub unroll_len: usize,
    pub total_steps: u64,
    pub lr: f64,
    pub adam_eps: f64,
    pub max_grad_norm: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub costate_coef: f64,
    pub ppo_epochs: usize,
    pub num_minibatches: usize,
    pub mask_p_train: f64,
    pub mask_before_norm: bool,
    pub hidden_dim: usize,
    pub seed: u64,
    pub eval_episodes: usize,
    pub checkpoint_every: usize,
    /// Override of the environment's observation-noise level.
    pub obs_noise_std: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            env: "pendulum_swingup".into(),
            arch: "gru".into(),
            num_envs: 32,
            unroll_len: 64,
            total_steps: 2_000_000,
            lr: 2.5e-4,
            adam_eps: 1e-5,
            max_grad_norm: 0.5,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            costate_coef: 0.05,
            ppo_epochs: 4,
            num_minibatches: 4,
            mask_p_train: 0.5,
            mask_before_norm: false,
            hidden_dim: 64,
            seed: 0,
            eval_episodes: 100,
            checkpoint_every: 0,
            obs_noise_std: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        if self.env.is_empty() {
            return fail("env must be set".into());
        }
        envs::by_name::<f64>(&self.env).map_err(|e| TrainError::Config(e.to_string()))?;
        if Arch::parse(&self.arch).is_none() {
            return fail(format!("arch must be 'gru' or 'ctrnn', got '{}'", self.arch));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail(format!("gamma must be in (0, 1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return fail(format!("gae_lambda must be in [0, 1], got {}", self.gae_lambda));
        }
        if self.clip_eps <= 0.0 {
            return fail(format!("clip_eps must be positive, got {}", self.clip_eps));
        }
        if self.num_envs == 0 || self.unroll_len == 0 {
            return fail("num_envs and unroll_len must be positive".into());
        }
        if self.num_minibatches == 0 || self.num_envs % self.num_minibatches != 0 {
            return fail(format!(
                "num_minibatches ({}) must divide num_envs ({})",
                self.num_minibatches, self.num_envs
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_p_train) {
            return fail(format!("mask_p_train must be in [0, 1], got {}", self.mask_p_train));
        }
        if self.hidden_dim == 0 {
            return fail("hidden_dim must be positive".into());
        }
        if self.total_steps < (self.num_envs * self.unroll_len) as u64 {
            return fail("total_steps must cover at least one iteration".into());
        }
        if self.ppo_epochs == 0 {
            return fail("ppo_epochs must be positive".into());
        }
        Ok(())
    }

    pub fn arch_enum(&self) -> Arch {
        Arch::parse(&self.arch).expect("validated arch")
    }

    fn hyper(&self) -> TrainHyper {
        TrainHyper {
            clip_eps: self.clip_eps,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
            costate_coef: self.costate_coef,
            ppo_epochs: self.ppo_epochs,
            num_minibatches: self.num_minibatches,
            max_grad_norm: self.max_grad_norm,
            adam_eps: self.adam_eps,
        }
    }
}

/// The numeric slice of the config consumed by the update step.
pub struct TrainHyper {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub costate_coef: f64,
    pub ppo_epochs: usize,
    pub num_minibatches: usize,
    pub max_grad_norm: f64,
    pub adam_eps: f64,
}

/// One metrics-CSV row.
#[derive(Debug, Clone)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub env_steps: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub loss_actor: f64,
    pub loss_critic: f64,
    pub loss_entropy: f64,
    pub loss_costate: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub mask_rate: f64,
}

pub struct Trainer<S> {
    pub cfg: TrainConfig,
    pub spec: EnvSpec<S>,
    pub params: PolicyParams<S>,
    pub stats: RunningStats<S>,
    pub scaler: ReturnScaler<S>,
    adam: AdamState<S>,
    rollout: RolloutState<S>,
    update_rng: ChaCha8Rng,
    pub iteration: u64,
    pub env_steps: u64,
    last_mean_return: f64,
    last_std_return: f64,
    /// Ratio-identity diagnostic from the most recent update.
    pub last_first_pass_ratio_dev: f64,
}

impl<S: Real> Trainer<S> {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut spec = envs::by_name::<S>(&cfg.env)?;
        if let Some(sigma) = cfg.obs_noise_std {
            spec = spec.with_noise_std(S::lit(sigma));
        }
        let params =
            PolicyParams::init(cfg.seed, spec.d_y, cfg.hidden_dim, spec.d_u, cfg.arch_enum());
        let adam = AdamState::new(
            &params.named().iter().map(|(_, t)| t.len()).collect::<Vec<_>>(),
        );
        let mut stats = RunningStats::new(spec.d_y);
        let scaler = ReturnScaler::new(cfg.num_envs, S::lit(cfg.gamma));
        let rollout = RolloutState::new(
            &spec,
            &mut stats,
            cfg.num_envs,
            cfg.hidden_dim,
            cfg.seed,
            cfg.mask_p_train,
            cfg.mask_before_norm,
        );
        let update_rng = rng::stream(cfg.seed, "update", 0);
        Ok(Trainer {
            cfg,
            spec,
            params,
            stats,
            scaler,
            adam,
            rollout,
            update_rng,
            iteration: 0,
            env_steps: 0,
            last_mean_return: 0.0,
            last_std_return: 0.0,
            last_first_pass_ratio_dev: 0.0,
        })
    }

    pub fn steps_per_iteration(&self) -> u64 {
        (self.cfg.num_envs * self.cfg.unroll_len) as u64
    }

    /// Stream positions of every rng family: (role, index, word position).
    pub fn rng_heads(&self) -> Vec<(String, u64, u128)> {
        let mut out = Vec::new();
        for (i, env) in self.rollout.envs.iter().enumerate() {
            out.push(("env".to_string(), i as u64, env.rng.get_word_pos()));
        }
        for (i, r) in self.rollout.mask_rngs.iter().enumerate() {
            out.push(("mask".to_string(), i as u64, r.get_word_pos()));
        }
        for (i, r) in self.rollout.action_rngs.iter().enumerate() {
            out.push(("action".to_string(), i as u64, r.get_word_pos()));
        }
        out.push(("update".to_string(), 0, self.update_rng.get_word_pos()));
        out
    }

    pub fn is_done(&self) -> bool {
        self.env_steps >= self.cfg.total_steps
    }

    pub fn current_lr(&self) -> f64 {
        let frac = 1.0 - self.env_steps as f64 / self.cfg.total_steps as f64;
        self.cfg.lr * frac.max(0.0)
    }

    /// Collect one rollout chunk, compute advantages and co-state targets,
    /// run the PPO update, and emit the metrics row.
    pub fn run_iteration(&mut self) -> Result<IterationMetrics, TrainError> {
        let lr = self.current_lr();
        let inner = self.run_iteration_inner(lr);
        inner.map_err(|e| TrainError::AtIteration {
            iteration: self.iteration + 1,
            source: Box::new(e),
        })
    }

    fn run_iteration_inner(&mut self, lr: f64) -> Result<IterationMetrics, TrainError> {
        let mut buffer = collect_rollout(
            &self.spec,
            &self.params,
            &mut self.stats,
            &mut self.scaler,
            &mut self.rollout,
            self.cfg.unroll_len,
            self.cfg.mask_p_train,
            self.cfg.mask_before_norm,
        )?;
        let (adv, ret) = compute_gae(
            &buffer.reward_scaled,
            &buffer.value,
            &buffer.done,
            &buffer.bootstrap_value,
            S::lit(self.cfg.gamma),
            S::lit(self.cfg.gae_lambda),
        );
        buffer.advantage = Some(adv);
        buffer.return_target = Some(ret);

        let targets = costate_targets(&self.params, &buffer.y_enc, &buffer.h_post)?;
        let um = ppo_update(
            &mut self.params,
            &mut self.adam,
            &buffer,
            &targets,
            &self.cfg.hyper(),
            lr,
            &mut self.update_rng,
        )?;
        self.last_first_pass_ratio_dev = um.first_pass_max_ratio_dev;

        self.iteration += 1;
        self.env_steps += self.steps_per_iteration();

        let completed = self.rollout.drain_completed();
        if !completed.is_empty() {
            let n = completed.len() as f64;
            let mean = completed.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
            let var = completed
                .iter()
                .map(|v| {
                    let d = v.to_f64_lossy() - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            self.last_mean_return = mean;
            self.last_std_return = var.sqrt();
        }

        Ok(IterationMetrics {
            iteration: self.iteration,
            env_steps: self.env_steps,
            mean_return: self.last_mean_return,
            std_return: self.last_std_return,
            loss_actor: um.loss_actor,
            loss_critic: um.loss_critic,
            loss_entropy: um.loss_entropy,
            loss_costate: um.loss_costate,
            grad_norm: um.grad_norm,
            lr,
            mask_rate: buffer.mask_rate(),
        })
    }
}
