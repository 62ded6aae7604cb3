//! Recurrent actor-critic: shared tanh observation encoder, a GRU or leaky
//! (continuous-time) recurrent core, a linear actor readout with a
//! state-independent Gaussian exploration scale, and a one-hidden-layer
//! critic over the concatenated encoded observation and hidden state.
//!
//! Every forward pass is recorded on a [`Tape`] so the same code path serves
//! rollout collection, the PPO update and co-state target extraction; values
//! are therefore bitwise identical between collection and re-forwarding.

use crate::linalg;
use crate::rng;
use crate::scalar::Real;
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Gru,
    CtRnn,
}

impl Arch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::Gru => "gru",
            Arch::CtRnn => "ctrnn",
        }
    }

    pub fn parse(s: &str) -> Option<Arch> {
        match s {
            "gru" => Some(Arch::Gru),
            "ctrnn" => Some(Arch::CtRnn),
            _ => None,
        }
    }
}

#[derive(Clone)]
pub struct GruWeights<S> {
    pub w_z: Tensor<S>,
    pub u_z: Tensor<S>,
    pub b_z: Tensor<S>,
    pub w_r: Tensor<S>,
    pub u_r: Tensor<S>,
    pub b_r: Tensor<S>,
    pub w_n: Tensor<S>,
    pub u_n: Tensor<S>,
    pub b_n: Tensor<S>,
}

#[derive(Clone)]
pub struct CtRnnWeights<S> {
    pub w_in: Tensor<S>,
    pub w_rec: Tensor<S>,
    /// Scalar leak parameter, alpha = sigmoid(log_alpha), shared across units.
    pub log_alpha: Tensor<S>,
}

#[derive(Clone)]
pub enum CellWeights<S> {
    Gru(GruWeights<S>),
    CtRnn(CtRnnWeights<S>),
}

/// All learnable parameters. The encoder width equals the hidden width: the
/// co-state targets live in encoded-observation space and are paired with
/// the hidden state by the cosine loss, which requires matching dimensions.
#[derive(Clone)]
pub struct PolicyParams<S> {
    pub d_y: usize,
    pub d_h: usize,
    pub d_u: usize,
    pub w_enc: Tensor<S>,
    pub b_enc: Tensor<S>,
    pub cell: CellWeights<S>,
    pub w_out: Tensor<S>,
    pub b_out: Tensor<S>,
    pub log_std: Tensor<S>,
    pub w_c1: Tensor<S>,
    pub b_c1: Tensor<S>,
    pub w_c2: Tensor<S>,
    pub b_c2: Tensor<S>,
}

/// Random matrix with orthonormal rows (wide) or columns (tall), scaled.
fn orthogonal<S: Real>(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let tall = rows >= cols;
    let (m, n) = if tall { (rows, cols) } else { (cols, rows) };
    let data: Vec<S> = (0..m * n)
        .map(|_| S::lit(rng.sample::<f64, _>(rand_distr::StandardNormal)))
        .collect();
    let g = Tensor::matrix(m, n, data);
    let (mut q, r) = linalg::qr_thin(&g);
    // sign-fix columns so the factorization is unique
    for j in 0..n {
        if r.at(j, j) < S::zero() {
            for i in 0..m {
                q.set(i, j, -q.at(i, j));
            }
        }
    }
    let q = linalg::scale(&q, S::lit(scale));
    if tall {
        q
    } else {
        linalg::transpose(&q)
    }
}

impl<S: Real> PolicyParams<S> {
    /// Orthogonal initialization: scale 1.0 everywhere except the actor
    /// readout (0.01); all biases, log_std and log_alpha start at zero.
    pub fn init(seed: u64, d_y: usize, d_h: usize, d_u: usize, arch: Arch) -> Self {
        assert!(d_h >= 1);
        let mut rng = rng::stream(seed, "init", 0);
        let w_enc = orthogonal(d_h, d_y, 1.0, &mut rng);
        let cell = match arch {
            Arch::Gru => CellWeights::Gru(GruWeights {
                w_z: orthogonal(d_h, d_h, 1.0, &mut rng),
                u_z: orthogonal(d_h, d_h, 1.0, &mut rng),
                b_z: Tensor::zeros(&[d_h]),
                w_r: orthogonal(d_h, d_h, 1.0, &mut rng),
                u_r: orthogonal(d_h, d_h, 1.0, &mut rng),
                b_r: Tensor::zeros(&[d_h]),
                w_n: orthogonal(d_h, d_h, 1.0, &mut rng),
                u_n: orthogonal(d_h, d_h, 1.0, &mut rng),
                b_n: Tensor::zeros(&[d_h]),
            }),
            Arch::CtRnn => CellWeights::CtRnn(CtRnnWeights {
                w_in: orthogonal(d_h, d_h, 1.0, &mut rng),
                w_rec: orthogonal(d_h, d_h, 1.0, &mut rng),
                log_alpha: Tensor::vector(vec![S::zero()]),
            }),
        };
        PolicyParams {
            d_y,
            d_h,
            d_u,
            w_enc,
            b_enc: Tensor::zeros(&[d_h]),
            cell,
            w_out: orthogonal(d_u, d_h, 0.01, &mut rng),
            b_out: Tensor::zeros(&[d_u]),
            log_std: Tensor::zeros(&[d_u]),
            w_c1: orthogonal(d_h, 2 * d_h, 1.0, &mut rng),
            b_c1: Tensor::zeros(&[d_h]),
            w_c2: {
                let row = orthogonal::<S>(1, d_h, 1.0, &mut rng);
                Tensor::vector(row.data().to_vec())
            },
            b_c2: Tensor::scalar(S::zero()),
        }
    }

    pub fn arch(&self) -> Arch {
        match self.cell {
            CellWeights::Gru(_) => Arch::Gru,
            CellWeights::CtRnn(_) => Arch::CtRnn,
        }
    }

    /// Named views of every parameter tensor, in the fixed order used by the
    /// optimizer, the tape recording and the checkpoint format.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<S>)> {
        let mut out: Vec<(&'static str, &Tensor<S>)> =
            vec![("w_enc", &self.w_enc), ("b_enc", &self.b_enc)];
        match &self.cell {
            CellWeights::Gru(g) => {
                out.extend([
                    ("gru.w_z", &g.w_z),
                    ("gru.u_z", &g.u_z),
                    ("gru.b_z", &g.b_z),
                    ("gru.w_r", &g.w_r),
                    ("gru.u_r", &g.u_r),
                    ("gru.b_r", &g.b_r),
                    ("gru.w_n", &g.w_n),
                    ("gru.u_n", &g.u_n),
                    ("gru.b_n", &g.b_n),
                ]);
            }
            CellWeights::CtRnn(c) => {
                out.extend([
                    ("ctrnn.w_in", &c.w_in),
                    ("ctrnn.w_rec", &c.w_rec),
                    ("ctrnn.log_alpha", &c.log_alpha),
                ]);
            }
        }
        out.extend([
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
            ("log_std", &self.log_std),
            ("w_c1", &self.w_c1),
            ("b_c1", &self.b_c1),
            ("w_c2", &self.w_c2),
            ("b_c2", &self.b_c2),
        ]);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        let mut out: Vec<(&'static str, &mut Tensor<S>)> =
            vec![("w_enc", &mut self.w_enc), ("b_enc", &mut self.b_enc)];
        match &mut self.cell {
            CellWeights::Gru(g) => {
                out.extend([
                    ("gru.w_z", &mut g.w_z),
                    ("gru.u_z", &mut g.u_z),
                    ("gru.b_z", &mut g.b_z),
                    ("gru.w_r", &mut g.w_r),
                    ("gru.u_r", &mut g.u_r),
                    ("gru.b_r", &mut g.b_r),
                    ("gru.w_n", &mut g.w_n),
                    ("gru.u_n", &mut g.u_n),
                    ("gru.b_n", &mut g.b_n),
                ]);
            }
            CellWeights::CtRnn(c) => {
                out.extend([
                    ("ctrnn.w_in", &mut c.w_in),
                    ("ctrnn.w_rec", &mut c.w_rec),
                    ("ctrnn.log_alpha", &mut c.log_alpha),
                ]);
            }
        }
        out.extend([
            ("w_out", &mut self.w_out),
            ("b_out", &mut self.b_out),
            ("log_std", &mut self.log_std),
            ("w_c1", &mut self.w_c1),
            ("b_c1", &mut self.b_c1),
            ("w_c2", &mut self.w_c2),
            ("b_c2", &mut self.b_c2),
        ]);
        out
    }

    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Record every parameter as an input node (fixed order).
    pub fn record(&self, tape: &mut Tape<S>) -> ParamNodes {
        let ids: Vec<NodeId> =
            self.named().iter().map(|(_, t)| tape.input((*t).clone())).collect();
        ParamNodes::from_ordered(self.arch(), &ids)
    }

    /// Per-dimension exploration scale exp(log_std).
    pub fn std(&self) -> Vec<S> {
        self.log_std.data().iter().map(|&v| v.exp()).collect()
    }

    /// Draw u ~ N(mu, diag(std^2)). The unclipped sample is returned; the
    /// environment receives the clipped value.
    pub fn sample_action(&self, mu: &[S], rng: &mut ChaCha8Rng) -> Vec<S> {
        let std = self.std();
        mu.iter()
            .zip(&std)
            .map(|(&m, &s)| m + s * S::lit(rng.sample::<f64, _>(rand_distr::StandardNormal)))
            .collect()
    }
}

/// Tape node ids of the recorded parameters, in the `named()` order.
pub struct ParamNodes {
    pub arch: Arch,
    ids: Vec<NodeId>,
}

impl ParamNodes {
    fn from_ordered(arch: Arch, ids: &[NodeId]) -> Self {
        ParamNodes { arch, ids: ids.to_vec() }
    }

    pub fn ordered(&self) -> &[NodeId] {
        &self.ids
    }

    fn base(&self) -> usize {
        // slots after w_enc, b_enc and the cell block
        match self.arch {
            Arch::Gru => 2 + 9,
            Arch::CtRnn => 2 + 3,
        }
    }

    pub fn w_enc(&self) -> NodeId {
        self.ids[0]
    }
    pub fn b_enc(&self) -> NodeId {
        self.ids[1]
    }
    pub fn w_out(&self) -> NodeId {
        self.ids[self.base()]
    }
    pub fn b_out(&self) -> NodeId {
        self.ids[self.base() + 1]
    }
    pub fn log_std(&self) -> NodeId {
        self.ids[self.base() + 2]
    }
    pub fn w_c1(&self) -> NodeId {
        self.ids[self.base() + 3]
    }
    pub fn b_c1(&self) -> NodeId {
        self.ids[self.base() + 4]
    }
    pub fn w_c2(&self) -> NodeId {
        self.ids[self.base() + 5]
    }
    pub fn b_c2(&self) -> NodeId {
        self.ids[self.base() + 6]
    }
    /// Ids of the critic-only parameters (w_c1, b_c1, w_c2, b_c2).
    pub fn critic_ids(&self) -> Vec<NodeId> {
        (3..7).map(|k| self.ids[self.base() + k]).collect()
    }
}

/// Encoded observation: tanh(W_enc y + b_enc). `y` is expected to be
/// normalized, clipped and masked by the trainer pipeline already.
pub fn encode<S: Real>(
    tape: &mut Tape<S>,
    p: &ParamNodes,
    y: NodeId,
) -> Result<NodeId, TapeError> {
    let wy = tape.matvec(p.w_enc(), y)?;
    let pre = tape.add(wy, p.b_enc())?;
    tape.tanh(pre)
}

fn gru_step<S: Real>(
    tape: &mut Tape<S>,
    p: &ParamNodes,
    y_enc: NodeId,
    h: NodeId,
) -> Result<NodeId, TapeError> {
    let (w_z, u_z, b_z) = (p.ids[2], p.ids[3], p.ids[4]);
    let (w_r, u_r, b_r) = (p.ids[5], p.ids[6], p.ids[7]);
    let (w_n, u_n, b_n) = (p.ids[8], p.ids[9], p.ids[10]);
    let gate = |tape: &mut Tape<S>, w: NodeId, u: NodeId, b: NodeId, x: NodeId, hh: NodeId| {
        let wx = tape.matvec(w, x)?;
        let uh = tape.matvec(u, hh)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    };
    let z_pre = gate(tape, w_z, u_z, b_z, y_enc, h)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, w_r, u_r, b_r, y_enc, h)?;
    let r = tape.sigmoid(r_pre)?;
    let rh = tape.mul(r, h)?;
    let n_pre = gate(tape, w_n, u_n, b_n, y_enc, rh)?;
    let n = tape.tanh(n_pre)?;
    // h' = (1 - z) h + z n
    let zh = tape.mul(z, h)?;
    let zn = tape.mul(z, n)?;
    let keep = tape.sub(h, zh)?;
    tape.add(keep, zn)
}

fn ctrnn_step<S: Real>(
    tape: &mut Tape<S>,
    p: &ParamNodes,
    y_enc: NodeId,
    h: NodeId,
) -> Result<NodeId, TapeError> {
    let (w_in, w_rec, log_alpha) = (p.ids[2], p.ids[3], p.ids[4]);
    let d_h = tape.value(h).len();
    let wx = tape.matvec(w_in, y_enc)?;
    let wh = tape.matvec(w_rec, h)?;
    let pre = tape.add(wx, wh)?;
    let cand = tape.tanh(pre)?;
    // broadcast the scalar leak alpha = sigmoid(log_alpha) across units
    let alpha1 = tape.sigmoid(log_alpha)?;
    let alpha = tape.concat(&vec![alpha1; d_h])?;
    let ah = tape.mul(alpha, h)?;
    let keep = tape.sub(h, ah)?;
    let ac = tape.mul(alpha, cand)?;
    tape.add(keep, ac)
}

/// One recurrent update h' = cell(y_enc, h).
pub fn cell_step<S: Real>(
    tape: &mut Tape<S>,
    p: &ParamNodes,
    y_enc: NodeId,
    h: NodeId,
) -> Result<NodeId, TapeError> {
    match p.arch {
        Arch::Gru => gru_step(tape, p, y_enc, h),
        Arch::CtRnn => ctrnn_step(tape, p, y_enc, h),
    }
}

/// Linear, unbounded actor mean mu = W_out h + b_out.
pub fn actor_mean<S: Real>(
    tape: &mut Tape<S>,
    p: &ParamNodes,
    h: NodeId,
) -> Result<NodeId, TapeError> {
    let wh = tape.matvec(p.w_out(), h)?;
    tape.add(wh, p.b_out())
}

/// Critic V = w_c2 . tanh(W_c1 [y_enc; h] + b_c1) + b_c2 (scalar node).
pub fn critic_value<S: Real>(
    tape: &mut Tape<S>,
    p: &ParamNodes,
    y_enc: NodeId,
    h: NodeId,
) -> Result<NodeId, TapeError> {
    let cat = tape.concat(&[y_enc, h])?;
    let pre = tape.matvec(p.w_c1(), cat)?;
    let pre = tape.add(pre, p.b_c1())?;
    let hid = tape.tanh(pre)?;
    let v = tape.dot(p.w_c2(), hid)?;
    tape.add(v, p.b_c2())
}

/// Diagonal-Gaussian log density of the (unclipped) action u_raw under mean
/// mu and std exp(log_std), as a scalar node differentiable in mu/log_std.
pub fn log_prob<S: Real>(
    tape: &mut Tape<S>,
    p: &ParamNodes,
    mu: NodeId,
    u_raw: &Tensor<S>,
) -> Result<NodeId, TapeError> {
    let d_u = u_raw.len();
    let u = tape.constant(u_raw.clone());
    let diff = tape.sub(u, mu)?;
    let sq = tape.mul(diff, diff)?;
    let inv_var = {
        let m2 = tape.scale(p.log_std(), S::lit(-2.0))?;
        tape.exp(m2)?
    };
    let weighted = tape.mul(sq, inv_var)?;
    let s = tape.sum(weighted)?;
    let quad = tape.scale(s, S::lit(-0.5))?;
    let sls = tape.sum(p.log_std())?;
    let nls = tape.scale(sls, S::lit(-1.0))?;
    let partial = tape.add(quad, nls)?;
    tape.add_const(partial, S::lit(-0.5 * LN_2PI * d_u as f64))
}

/// Entropy of the diagonal Gaussian: sum_i (0.5 ln(2 pi e) + log_std_i),
/// state-independent.
pub fn entropy<S: Real>(tape: &mut Tape<S>, p: &ParamNodes) -> Result<NodeId, TapeError> {
    let d_u = tape.value(p.log_std()).len();
    let s = tape.sum(p.log_std())?;
    tape.add_const(s, S::lit(0.5 * (LN_2PI + 1.0) * d_u as f64))
}
