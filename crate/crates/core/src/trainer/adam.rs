//! Adam with bias correction, plus global-norm gradient clipping.

use crate::scalar::Real;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;

pub struct AdamState<S> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: u64,
}

impl<S: Real> AdamState<S> {
    pub fn new(param_sizes: &[usize]) -> Self {
        AdamState {
            m: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One Adam step; returns the per-parameter deltas to add.
    pub fn step(&mut self, grads: &[Vec<S>], lr: S, eps: S) -> Vec<Vec<S>> {
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1 = S::lit(BETA1);
        let b2 = S::lit(BETA2);
        let bc1 = S::one() - S::lit(BETA1.powi(self.t as i32));
        let bc2 = S::one() - S::lit(BETA2.powi(self.t as i32));
        let mut deltas = Vec::with_capacity(grads.len());
        for (slot, g) in grads.iter().enumerate() {
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let mut delta = vec![S::zero(); g.len()];
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (S::one() - b1) * g[i];
                v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                delta[i] = -lr * m_hat / (v_hat.sqrt() + eps);
            }
            deltas.push(delta);
        }
        deltas
    }
}

pub fn global_norm<S: Real>(grads: &[Vec<S>]) -> S {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| x * x)
        .sum::<S>()
        .sqrt()
}

/// Scale all gradients so the global norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_global_norm<S: Real>(grads: &mut [Vec<S>], max_norm: S) -> S {
    let norm = global_norm(grads);
    if norm > max_norm && norm > S::zero() {
        let f = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= f;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut adam = AdamState::<f64>::new(&[3]);
        let d = adam.step(&[vec![0.0; 3]], 1e-3, 1e-5);
        assert!(d[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn first_step_closed_form() {
        // after one step: m_hat = g, v_hat = g^2, delta = -lr g / (|g| + eps)
        let g = vec![0.3, -2.0, 1e-4];
        let (lr, eps) = (2.5e-4, 1e-5);
        let mut adam = AdamState::<f64>::new(&[3]);
        let d = adam.step(&[g.clone()], lr, eps);
        for i in 0..3 {
            let expect = -lr * g[i] / (g[i].abs() + eps);
            assert!((d[0][i] - expect).abs() < 1e-15, "{} vs {expect}", d[0][i]);
        }
    }

    #[test]
    fn second_step_matches_reference() {
        // hand-rolled two-step reference
        let g1 = vec![1.0];
        let g2 = vec![-0.5];
        let (lr, eps) = (1e-3, 1e-8);
        let mut adam = AdamState::<f64>::new(&[1]);
        adam.step(&[g1.clone()], lr, eps);
        let d2 = adam.step(&[g2.clone()], lr, eps);

        let m1 = 0.1 * g1[0];
        let v1 = 0.001 * g1[0] * g1[0];
        let m2 = 0.9 * m1 + 0.1 * g2[0];
        let v2 = 0.999 * v1 + 0.001 * g2[0] * g2[0];
        let m_hat = m2 / (1.0 - 0.9f64.powi(2));
        let v_hat = v2 / (1.0 - 0.999f64.powi(2));
        let expect = -lr * m_hat / (v_hat.sqrt() + eps);
        assert!((d2[0][0] - expect).abs() < 1e-15);
    }

    #[test]
    fn clip_caps_global_norm() {
        let mut grads: Vec<Vec<f64>> = vec![vec![6.0, 8.0]]; // norm 10
        let pre = clip_global_norm(&mut grads, 0.5);
        assert!((pre - 10.0).abs() < 1e-12);
        let post = global_norm(&grads);
        assert!((post - 0.5).abs() < 1e-12);
        // direction preserved
        assert!((grads[0][0] / grads[0][1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut grads: Vec<Vec<f64>> = vec![vec![0.1, 0.2]];
        let before = grads.clone();
        clip_global_norm(&mut grads, 0.5);
        assert_eq!(grads, before);
    }
}
