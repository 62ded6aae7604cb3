//! Generalized advantage estimation, computed backwards through time.

use crate::scalar::Real;

/// delta_t = r_t + gamma V_{t+1} (1 - done_t) - V_t,
/// A_t = delta_t + gamma lambda (1 - done_t) A_{t+1},
/// return_t = A_t + V_t. Arrays are time-major [T][B]; `bootstrap` supplies
/// V_{T} per environment.
pub fn compute_gae<S: Real>(
    rewards: &[Vec<S>],
    values: &[Vec<S>],
    dones: &[Vec<bool>],
    bootstrap: &[S],
    gamma: S,
    lambda: S,
) -> (Vec<Vec<S>>, Vec<Vec<S>>) {
    let t_len = rewards.len();
    let b = bootstrap.len();
    let mut adv = vec![vec![S::zero(); b]; t_len];
    let mut ret = vec![vec![S::zero(); b]; t_len];
    for env in 0..b {
        let mut acc = S::zero();
        for t in (0..t_len).rev() {
            let not_done =
                if dones[t][env] { S::zero() } else { S::one() };
            let v_next = if t + 1 == t_len { bootstrap[env] } else { values[t + 1][env] };
            let delta = rewards[t][env] + gamma * v_next * not_done - values[t][env];
            acc = delta + gamma * lambda * not_done * acc;
            adv[t][env] = acc;
            ret[t][env] = acc + values[t][env];
        }
    }
    (adv, ret)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Explicit double sum A_t = sum_k (gamma lambda)^k delta_{t+k} with
    /// episode cut-offs, the brute-force mirror of the recursion.
    pub fn gae_double_sum(
        rewards: &[Vec<f64>],
        values: &[Vec<f64>],
        dones: &[Vec<bool>],
        bootstrap: &[f64],
        gamma: f64,
        lambda: f64,
    ) -> Vec<Vec<f64>> {
        let t_len = rewards.len();
        let b = bootstrap.len();
        let delta = |t: usize, e: usize| -> f64 {
            let not_done = if dones[t][e] { 0.0 } else { 1.0 };
            let v_next = if t + 1 == t_len { bootstrap[e] } else { values[t + 1][e] };
            rewards[t][e] + gamma * v_next * not_done - values[t][e]
        };
        let mut adv = vec![vec![0.0; b]; t_len];
        for e in 0..b {
            for t in 0..t_len {
                let mut acc = 0.0;
                let mut weight = 1.0;
                for k in t..t_len {
                    acc += weight * delta(k, e);
                    if dones[k][e] {
                        break;
                    }
                    weight *= gamma * lambda;
                }
                adv[t][e] = acc;
            }
        }
        adv
    }

    #[test]
    fn single_step_recursion() {
        let adv = compute_gae(
            &[vec![2.0f64]],
            &[vec![0.5]],
            &[vec![false]],
            &[1.0],
            0.9,
            0.8,
        );
        // A_0 = r_0 + gamma V_boot - V_0
        assert!((adv.0[0][0] - (2.0 + 0.9 - 0.5)).abs() < 1e-15);
        assert!((adv.1[0][0] - (adv.0[0][0] + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_is_td0() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t_len = 8;
        let rewards: Vec<Vec<f64>> =
            (0..t_len).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        let values: Vec<Vec<f64>> =
            (0..t_len).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        let dones: Vec<Vec<bool>> = (0..t_len).map(|t| vec![t == 4]).collect();
        let boot = [0.3];
        let (adv, _) = compute_gae(&rewards, &values, &dones, &boot, 0.99, 0.0);
        for t in 0..t_len {
            let not_done = if dones[t][0] { 0.0 } else { 1.0 };
            let v_next = if t + 1 == t_len { boot[0] } else { values[t + 1][0] };
            let delta = rewards[t][0] + 0.99 * v_next * not_done - values[t][0];
            assert!((adv[t][0] - delta).abs() < 1e-15);
        }
    }

    #[test]
    fn recursion_equals_double_sum_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let t_len = rng.gen_range(1..=16);
            let b = rng.gen_range(1..=3);
            let rewards: Vec<Vec<f64>> = (0..t_len)
                .map(|_| (0..b).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let values: Vec<Vec<f64>> = (0..t_len)
                .map(|_| (0..b).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let dones: Vec<Vec<bool>> = (0..t_len)
                .map(|_| (0..b).map(|_| rng.gen_bool(0.15)).collect())
                .collect();
            let boot: Vec<f64> = (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let gamma = rng.gen_range(0.9..0.999);
            let lambda = rng.gen_range(0.0..1.0);
            let (adv, ret) = compute_gae(&rewards, &values, &dones, &boot, gamma, lambda);
            let brute = gae_double_sum(&rewards, &values, &dones, &boot, gamma, lambda);
            for t in 0..t_len {
                for e in 0..b {
                    assert!(
                        (adv[t][e] - brute[t][e]).abs() < 1e-12,
                        "t={t} e={e}: {} vs {}",
                        adv[t][e],
                        brute[t][e]
                    );
                    assert!((ret[t][e] - (adv[t][e] + values[t][e])).abs() < 1e-12);
                }
            }
        }
    }
}
