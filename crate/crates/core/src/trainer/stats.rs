//! Streaming observation statistics and the discounted-return reward scaler.

use crate::scalar::Real;

/// Welford-style running mean/variance per observation channel.
#[derive(Clone, Debug)]
pub struct RunningStats<S> {
    pub count: u64,
    pub mean: Vec<S>,
    m2: Vec<S>,
}

impl<S: Real> RunningStats<S> {
    pub fn new(dim: usize) -> Self {
        RunningStats { count: 0, mean: vec![S::zero(); dim], m2: vec![S::zero(); dim] }
    }

    pub fn update(&mut self, y: &[S]) {
        self.count += 1;
        let n = S::lit(self.count as f64);
        for i in 0..self.mean.len() {
            let delta = y[i] - self.mean[i];
            self.mean[i] += delta / n;
            let delta2 = y[i] - self.mean[i];
            self.m2[i] += delta * delta2;
        }
    }

    /// Population variance (zero until the first update).
    pub fn var(&self) -> Vec<S> {
        if self.count == 0 {
            return vec![S::zero(); self.mean.len()];
        }
        let n = S::lit(self.count as f64);
        self.m2.iter().map(|&m| m / n).collect()
    }

    /// (y - mean) / sqrt(var + 1e-8), clipped to [-10, 10].
    pub fn normalize(&self, y: &[S]) -> Vec<S> {
        let var = self.var();
        let ten = S::lit(10.0);
        y.iter()
            .enumerate()
            .map(|(i, &v)| {
                let z = (v - self.mean[i]) / (var[i] + S::lit(1e-8)).sqrt();
                z.max(-ten).min(ten)
            })
            .collect()
    }

    pub fn snapshot(&self) -> (u64, Vec<f64>, Vec<f64>) {
        (
            self.count,
            self.mean.iter().map(|v| v.to_f64_lossy()).collect(),
            self.m2.iter().map(|v| v.to_f64_lossy()).collect(),
        )
    }

    pub fn restore(count: u64, mean: Vec<f64>, m2: Vec<f64>) -> Self {
        RunningStats {
            count,
            mean: mean.into_iter().map(S::lit).collect(),
            m2: m2.into_iter().map(S::lit).collect(),
        }
    }

    /// d normalize_i / d y_i: 1 / sqrt(var_i + 1e-8) on the unclipped branch.
    pub fn normalize_jacobian_diag(&self) -> Vec<S> {
        self.var()
            .iter()
            .map(|&v| S::one() / (v + S::lit(1e-8)).sqrt())
            .collect()
    }
}

/// Scales raw rewards by the standard deviation of the per-environment
/// running discounted return; scaled values are clipped to [-10, 10].
#[derive(Clone, Debug)]
pub struct ReturnScaler<S> {
    returns: Vec<S>,
    count: u64,
    mean: S,
    m2: S,
    gamma: S,
}

impl<S: Real> ReturnScaler<S> {
    pub fn new(num_envs: usize, gamma: S) -> Self {
        ReturnScaler {
            returns: vec![S::zero(); num_envs],
            count: 0,
            mean: S::zero(),
            m2: S::zero(),
            gamma,
        }
    }

    fn var(&self) -> S {
        if self.count == 0 {
            S::zero()
        } else {
            self.m2 / S::lit(self.count as f64)
        }
    }

    /// Advance env `i`'s running return with `r_raw`, fold it into the
    /// variance accumulator, and return the clipped scaled reward. The
    /// running return resets to zero at episode boundaries.
    pub fn scale(&mut self, env: usize, r_raw: S, done: bool) -> S {
        self.returns[env] = self.gamma * self.returns[env] + r_raw;
        self.count += 1;
        let n = S::lit(self.count as f64);
        let delta = self.returns[env] - self.mean;
        self.mean += delta / n;
        self.m2 += delta * (self.returns[env] - self.mean);
        let scaled = r_raw / (self.var() + S::lit(1e-8)).sqrt();
        let ten = S::lit(10.0);
        let scaled = scaled.max(-ten).min(ten);
        if done {
            self.returns[env] = S::zero();
        }
        scaled
    }

    pub fn snapshot(&self) -> (Vec<f64>, u64, f64, f64) {
        (
            self.returns.iter().map(|v| v.to_f64_lossy()).collect(),
            self.count,
            self.mean.to_f64_lossy(),
            self.m2.to_f64_lossy(),
        )
    }

    pub fn restore(returns: Vec<f64>, count: u64, mean: f64, m2: f64, gamma: S) -> Self {
        ReturnScaler {
            returns: returns.into_iter().map(S::lit).collect(),
            count,
            mean: S::lit(mean),
            m2: S::lit(m2),
            gamma,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_centers_and_clips() {
        let mut st = RunningStats::<f64>::new(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            st.update(&[rng.gen_range(-1.0..1.0)]);
        }
        let m = st.mean[0];
        assert_eq!(st.normalize(&[m])[0], 0.0);
        let far = m + 100.0 * st.var()[0].sqrt();
        assert_eq!(st.normalize(&[far])[0], 10.0);
    }

    #[test]
    fn constant_stream_converges_to_zero() {
        let mut st = RunningStats::<f64>::new(2);
        for _ in 0..1000 {
            st.update(&[3.7, -1.2]);
        }
        let z = st.normalize(&[3.7, -1.2]);
        assert!(z.iter().all(|v| v.abs() < 1e-6), "{z:?}");
        assert!(st.var().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_rewards_scale_to_zero() {
        let mut sc = ReturnScaler::<f64>::new(2, 0.99);
        for k in 0..100 {
            assert_eq!(sc.scale(k % 2, 0.0, false), 0.0);
        }
    }

    #[test]
    fn iid_rewards_scale_to_unit_std() {
        // gamma = 0 makes the running return equal the reward itself
        let mut sc = ReturnScaler::<f64>::new(1, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = 3.0;
        let mut scaled = Vec::new();
        for _ in 0..10_000 {
            let r = 1.0 + s * rng.sample::<f64, _>(rand_distr::StandardNormal);
            scaled.push(sc.scale(0, r, false));
        }
        let tail = &scaled[1000..];
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        let var =
            tail.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / tail.len() as f64;
        let std = var.sqrt();
        assert!((std - 1.0).abs() < 0.1, "std {std}");
    }

    #[test]
    fn scaled_rewards_clipped() {
        let mut sc = ReturnScaler::<f64>::new(1, 0.99);
        for _ in 0..50 {
            let s = sc.scale(0, 1e9, false);
            assert!(s <= 10.0 && s >= -10.0);
        }
    }

    #[test]
    fn reset_on_done() {
        let mut sc = ReturnScaler::<f64>::new(1, 0.5);
        sc.scale(0, 4.0, false);
        sc.scale(0, 4.0, true);
        // after done the running return restarts from zero
        sc.scale(0, 1.0, false);
        let (returns, ..) = sc.snapshot();
        assert_eq!(returns[0], 1.0);
    }
}
