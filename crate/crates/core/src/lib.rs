//! Recurrent reinforcement learning with Pontryagin co-state alignment.
//!
//! The crate bundles four layers:
//!
//! * [`tape`] — reverse-mode autodiff over dense tensors, enough to
//!   differentiate a recurrent actor-critic objective through time;
//! * [`envs`] — desk-scale control-affine continuous-time environments with
//!   observation noise and full-vector Bernoulli sensor dropout;
//! * [`oracle`] — ground-truth optimal control machinery (Riccati solvers,
//!   a shooting two-point boundary-value solver, Hamiltonian-minimizing
//!   readout laws and brute-force grid oracles);
//! * [`policy`] / [`trainer`] — the recurrent actor-critic and the PPO loop
//!   with the co-state cosine alignment loss.
//!
//! All numeric kernels are generic over [`scalar::Real`] (f32 or f64); the
//! type aliases below pin the f64 instantiation used by the CLI and the
//! acceptance suite.

pub mod checkpoint;
pub mod envs;
pub mod linalg;
pub mod oracle;
pub mod policy;
pub mod trainer;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use scalar::Real;

/// Default f64 instantiations.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = tape::Tape<f64>;
pub type EnvSpec64 = envs::EnvSpec<f64>;
pub type EnvState64 = envs::EnvState<f64>;
pub type HamiltonianSpec64 = oracle::HamiltonianSpec<f64>;
pub type PolicyParams64 = policy::PolicyParams<f64>;
pub type RolloutBuffer64 = trainer::RolloutBuffer<f64>;
