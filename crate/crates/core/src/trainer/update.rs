//! Co-state target extraction and the clipped-surrogate PPO update.
//!
//! The update re-runs the recurrent forward pass per minibatch on a fresh
//! tape, starting from the detached chunk-boundary hidden states, so BPTT is
//! truncated exactly at chunk boundaries and episode resets. Clip/min/max
//! branch structure is decided on plain values and only the active branch is
//! recorded, which reproduces the standard subgradient convention.

use crate::policy::{self, ParamNodes, PolicyParams};
use crate::scalar::Real;
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;
use crate::trainer::adam::{clip_global_norm, AdamState};
use crate::trainer::rollout::RolloutBuffer;
use crate::trainer::{TrainError, TrainHyper};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Co-state targets lambda_hat[t][b] = grad of V(y_enc, h_post) with respect
/// to the encoded observation, detached from the graph. One reverse sweep
/// serves the whole batch: per-sample critic values are summed and each
/// encoded-observation input receives exactly its own value's gradient.
pub fn costate_targets<S: Real>(
    params: &PolicyParams<S>,
    y_enc: &[Vec<Vec<S>>],
    h_post: &[Vec<Vec<S>>],
) -> Result<Vec<Vec<Vec<S>>>, TapeError> {
    let t_len = y_enc.len();
    let num_envs = if t_len > 0 { y_enc[0].len() } else { 0 };
    let mut tape = Tape::new();
    let pn = params.record(&mut tape);
    let mut enc_ids = vec![vec![0usize; num_envs]; t_len];
    let mut total: Option<NodeId> = None;
    for t in 0..t_len {
        for b in 0..num_envs {
            let e = tape.input(Tensor::vector(y_enc[t][b].clone()));
            let h = tape.input(Tensor::vector(h_post[t][b].clone()));
            let h = tape.stop_gradient(h)?;
            let v = policy::critic_value(&mut tape, &pn, e, h)?;
            enc_ids[t][b] = e;
            total = Some(match total {
                None => v,
                Some(acc) => tape.add(acc, v)?,
            });
        }
    }
    let Some(total) = total else {
        return Ok(Vec::new());
    };
    tape.backward(total)?;
    Ok((0..t_len)
        .map(|t| {
            (0..num_envs)
                .map(|b| tape.adjoint(enc_ids[t][b]).data().to_vec())
                .collect()
        })
        .collect())
}

/// Cosine distance 1 - (a.b) / ((||a|| + eps)(||b|| + eps)) on the tape.
pub fn cosine_distance_node<S: Real>(
    tape: &mut Tape<S>,
    a: NodeId,
    b: NodeId,
    eps: S,
) -> Result<NodeId, TapeError> {
    let num = tape.dot(a, b)?;
    let na = tape.l2norm(a)?;
    let na = tape.add_const(na, eps)?;
    let nb = tape.l2norm(b)?;
    let nb = tape.add_const(nb, eps)?;
    let den = tape.mul(na, nb)?;
    // 1/x = exp(-ln x); the denominator is strictly positive
    let ld = tape.log(den)?;
    let nld = tape.scale(ld, -S::one())?;
    let inv = tape.exp(nld)?;
    let cos = tape.mul(num, inv)?;
    let neg = tape.scale(cos, -S::one())?;
    tape.add_const(neg, S::one())
}

/// Plain-value mean cosine distance between hidden states and co-state
/// targets over a [T][B] batch (the logged co-state loss).
pub fn costate_loss<S: Real>(h: &[Vec<Vec<S>>], lambda: &[Vec<Vec<S>>]) -> S {
    let eps = S::lit(1e-8);
    let mut acc = S::zero();
    let mut n = 0usize;
    for (hr, lr) in h.iter().zip(lambda) {
        for (hv, lv) in hr.iter().zip(lr) {
            let dot = crate::linalg::dot(hv, lv);
            let na = crate::linalg::norm2(hv) + eps;
            let nb = crate::linalg::norm2(lv) + eps;
            acc += S::one() - dot / (na * nb);
            n += 1;
        }
    }
    if n == 0 {
        S::zero()
    } else {
        acc / S::lit(n as f64)
    }
}

pub struct UpdateMetrics {
    pub loss_actor: f64,
    pub loss_critic: f64,
    pub loss_entropy: f64,
    pub loss_costate: f64,
    pub grad_norm: f64,
    /// max |rho - 1| over the first minibatch pass of the first epoch,
    /// before any parameter change.
    pub first_pass_max_ratio_dev: f64,
}

struct SampleRef {
    t: usize,
    b: usize,
}

/// Assemble the four-term loss for one minibatch on a fresh tape and return
/// (loss node ids, per-term values, first-pass ratio deviation).
#[allow(clippy::type_complexity)]
fn minibatch_loss<S: Real>(
    tape: &mut Tape<S>,
    pn: &ParamNodes,
    buffer: &RolloutBuffer<S>,
    targets: &[Vec<Vec<S>>],
    env_group: &[usize],
    hyper: &TrainHyper,
) -> Result<(NodeId, [NodeId; 4], f64), TapeError> {
    let t_len = buffer.t_len;
    let eps_clip = S::lit(hyper.clip_eps);
    let adv = buffer.advantage.as_ref().expect("advantages computed");
    let ret = buffer.return_target.as_ref().expect("returns computed");

    // minibatch-level advantage normalization
    let samples: Vec<SampleRef> = env_group
        .iter()
        .flat_map(|&b| (0..t_len).map(move |t| SampleRef { t, b }))
        .collect();
    let n = samples.len();
    let n_s = S::lit(n as f64);
    let mean_adv = samples.iter().map(|s| adv[s.t][s.b]).sum::<S>() / n_s;
    let var_adv = samples
        .iter()
        .map(|s| {
            let d = adv[s.t][s.b] - mean_adv;
            d * d
        })
        .sum::<S>()
        / n_s;
    let std_adv = var_adv.sqrt();

    let mut actor_acc: Option<NodeId> = None;
    let mut critic_acc: Option<NodeId> = None;
    let mut costate_acc: Option<NodeId> = None;
    let mut max_ratio_dev = 0.0f64;

    for &b in env_group {
        let mut h = tape.input(Tensor::vector(buffer.h_chunk_start[b].clone()));
        for t in 0..t_len {
            if t > 0 {
                if buffer.done[t - 1][b] {
                    h = tape.input(Tensor::zeros(&[buffer.h_chunk_start[b].len()]));
                }
            }
            let y = tape.input(Tensor::vector(buffer.y_tilde[t][b].clone()));
            let y_enc = policy::encode(tape, pn, y)?;
            let h_post = policy::cell_step(tape, pn, y_enc, h)?;
            h = h_post;

            let mu = policy::actor_mean(tape, pn, h_post)?;
            let logp_new =
                policy::log_prob(tape, pn, mu, &Tensor::vector(buffer.u_raw[t][b].clone()))?;
            let v_new = policy::critic_value(tape, pn, y_enc, h_post)?;

            // clipped surrogate: choose the active min branch on plain values
            let a_norm = (adv[t][b] - mean_adv) / (std_adv + S::lit(1e-8));
            let logp_old = buffer.logp_old[t][b];
            let ratio_node = {
                let old = tape.constant(Tensor::scalar(logp_old));
                let diff = tape.sub(logp_new, old)?;
                tape.exp(diff)?
            };
            let rho = tape.value(ratio_node).item();
            max_ratio_dev = max_ratio_dev.max((rho.to_f64_lossy() - 1.0).abs());
            let rho_clip = rho.max(S::one() - eps_clip).min(S::one() + eps_clip);
            let unclipped_val = rho * a_norm;
            let clipped_val = rho_clip * a_norm;
            let actor_term = if unclipped_val <= clipped_val {
                tape.scale(ratio_node, a_norm)?
            } else {
                tape.constant(Tensor::scalar(clipped_val))
            };
            actor_acc = Some(match actor_acc {
                None => actor_term,
                Some(acc) => tape.add(acc, actor_term)?,
            });

            // clipped value loss: max((V - ret)^2, (V_old + clip(V - V_old))
            // - ret)^2), again with the branch picked on plain values
            let ret_c = tape.constant(Tensor::scalar(ret[t][b]));
            let dv = tape.sub(v_new, ret_c)?;
            let sq_unclipped = tape.mul(dv, dv)?;
            let v_val = tape.value(v_new).item();
            let v_old = buffer.value[t][b];
            let delta_v = v_val - v_old;
            let critic_term = if delta_v.abs() <= eps_clip {
                sq_unclipped
            } else {
                let clipped_dev = if delta_v > S::zero() { eps_clip } else { -eps_clip };
                let cv = v_old + clipped_dev - ret[t][b];
                let clipped_sq = cv * cv;
                if clipped_sq > tape.value(sq_unclipped).item() {
                    tape.constant(Tensor::scalar(clipped_sq))
                } else {
                    sq_unclipped
                }
            };
            critic_acc = Some(match critic_acc {
                None => critic_term,
                Some(acc) => tape.add(acc, critic_term)?,
            });

            // co-state alignment of the hidden state with the detached target
            let target = tape.constant(Tensor::vector(targets[t][b].clone()));
            let cd = cosine_distance_node(tape, h_post, target, S::lit(1e-8))?;
            costate_acc = Some(match costate_acc {
                None => cd,
                Some(acc) => tape.add(acc, cd)?,
            });
        }
    }

    let inv_n = S::one() / n_s;
    let loss_actor = tape.scale(actor_acc.expect("non-empty minibatch"), -inv_n)?;
    let loss_critic = tape.scale(critic_acc.unwrap(), inv_n)?;
    let loss_costate = tape.scale(costate_acc.unwrap(), inv_n)?;
    let loss_entropy = policy::entropy(tape, pn)?;

    let c1 = tape.scale(loss_critic, S::lit(hyper.value_coef))?;
    let c2 = tape.scale(loss_entropy, S::lit(-hyper.entropy_coef))?;
    let c3 = tape.scale(loss_costate, S::lit(hyper.costate_coef))?;
    let total = tape.add(loss_actor, c1)?;
    let total = tape.add(total, c2)?;
    let total = tape.add(total, c3)?;
    Ok((
        total,
        [loss_actor, loss_critic, loss_entropy, loss_costate],
        max_ratio_dev,
    ))
}

/// K epochs of minibatched PPO over the rollout. Environments are split into
/// `num_minibatches` groups of full-length sequential segments; the group
/// assignment is reshuffled (seeded) every epoch.
pub fn ppo_update<S: Real>(
    params: &mut PolicyParams<S>,
    adam: &mut AdamState<S>,
    buffer: &RolloutBuffer<S>,
    targets: &[Vec<Vec<S>>],
    hyper: &TrainHyper,
    lr: f64,
    shuffle_rng: &mut ChaCha8Rng,
) -> Result<UpdateMetrics, TrainError> {
    let num_envs = buffer.num_envs;
    let group_size = num_envs / hyper.num_minibatches;
    let mut metrics = UpdateMetrics {
        loss_actor: 0.0,
        loss_critic: 0.0,
        loss_entropy: 0.0,
        loss_costate: 0.0,
        grad_norm: 0.0,
        first_pass_max_ratio_dev: 0.0,
    };
    let mut updates = 0usize;
    let term_names = ["actor", "critic", "entropy", "costate"];

    for epoch in 0..hyper.ppo_epochs {
        let mut order: Vec<usize> = (0..num_envs).collect();
        for i in (1..num_envs).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for mb in 0..hyper.num_minibatches {
            let group = &order[mb * group_size..(mb + 1) * group_size];
            let mut tape = Tape::new();
            let pn = params.record(&mut tape);
            let (total, terms, ratio_dev) =
                minibatch_loss(&mut tape, &pn, buffer, targets, group, hyper)?;
            if epoch == 0 && mb == 0 {
                metrics.first_pass_max_ratio_dev = ratio_dev;
            }
            let term_vals: Vec<f64> =
                terms.iter().map(|&id| tape.value(id).item().to_f64_lossy()).collect();
            for (val, name) in term_vals.iter().zip(term_names) {
                if !val.is_finite() {
                    return Err(TrainError::NonFinite { term: name });
                }
            }
            tape.backward(total).map_err(TrainError::Tape)?;
            let mut grads: Vec<Vec<S>> = pn
                .ordered()
                .iter()
                .map(|&id| tape.adjoint(id).data().to_vec())
                .collect();
            let pre_norm = clip_global_norm(&mut grads, S::lit(hyper.max_grad_norm));
            let deltas = adam.step(&grads, S::lit(lr), S::lit(hyper.adam_eps));
            for ((_, tensor), delta) in params.named_mut().into_iter().zip(&deltas) {
                for (p, d) in tensor.data_mut().iter_mut().zip(delta) {
                    *p += *d;
                }
            }
            metrics.loss_actor += term_vals[0];
            metrics.loss_critic += term_vals[1];
            metrics.loss_entropy += term_vals[2];
            metrics.loss_costate += term_vals[3];
            metrics.grad_norm += pre_norm.to_f64_lossy();
            updates += 1;
        }
    }
    let inv = 1.0 / updates as f64;
    metrics.loss_actor *= inv;
    metrics.loss_critic *= inv;
    metrics.loss_entropy *= inv;
    metrics.loss_costate *= inv;
    metrics.grad_norm *= inv;
    Ok(metrics)
}
