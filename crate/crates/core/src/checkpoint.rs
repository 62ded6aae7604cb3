//! Versioned JSON checkpoints: named flat parameter arrays with shapes,
//! rng counters and running-statistics snapshots. Arrays serialize as
//! decimal 64-bit reals whose shortest representation round-trips bitwise,
//! so save -> load -> save is byte-identical.

use crate::policy::{Arch, CellWeights, CtRnnWeights, GruWeights, PolicyParams};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::trainer::{ReturnScaler, RunningStats, TrainConfig, Trainer};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported checkpoint format_version {0}")]
    Version(u32),
    #[error("checkpoint is missing parameter '{0}'")]
    MissingParam(String),
    #[error("parameter '{name}' has shape {got:?}, expected {want:?}")]
    ShapeMismatch { name: String, got: Vec<usize>, want: Vec<usize> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dims {
    pub d_y: usize,
    pub d_h: usize,
    pub d_u: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObsStatsSnapshot {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReturnScalerSnapshot {
    pub returns: Vec<f64>,
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

/// Stream heads of the trainer's rng families, recorded as (seed, word
/// position) counters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngCounter {
    pub role: String,
    pub index: u64,
    pub word_pos: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub arch: String,
    pub env: String,
    pub dims: Dims,
    pub iteration: u64,
    pub env_steps: u64,
    pub params: Vec<NamedArray>,
    pub obs_stats: ObsStatsSnapshot,
    pub return_scaler: ReturnScalerSnapshot,
    pub rng_counters: Vec<RngCounter>,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn from_trainer<S: Real>(tr: &Trainer<S>) -> Self {
        let params = tr
            .params
            .named()
            .into_iter()
            .map(|(name, t)| NamedArray {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.to_f64_lossy()).collect(),
            })
            .collect();
        let (count, mean, m2) = tr.stats.snapshot();
        let (returns, rcount, rmean, rm2) = tr.scaler.snapshot();
        Checkpoint {
            format_version: FORMAT_VERSION,
            arch: tr.cfg.arch.clone(),
            env: tr.cfg.env.clone(),
            dims: Dims { d_y: tr.spec.d_y, d_h: tr.cfg.hidden_dim, d_u: tr.spec.d_u },
            iteration: tr.iteration,
            env_steps: tr.env_steps,
            params,
            obs_stats: ObsStatsSnapshot { count, mean, m2 },
            return_scaler: ReturnScalerSnapshot {
                returns,
                count: rcount,
                mean: rmean,
                m2: rm2,
            },
            rng_counters: tr
                .rng_heads()
                .into_iter()
                .map(|(role, index, pos)| RngCounter {
                    role,
                    index,
                    word_pos: pos.to_string(),
                })
                .collect(),
            config: tr.cfg.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(ck.format_version));
        }
        Ok(ck)
    }

    fn take(&self, name: &str, want: &[usize]) -> Result<Tensor<f64>, CheckpointError> {
        let arr = self
            .params
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| CheckpointError::MissingParam(name.to_string()))?;
        if arr.shape != want {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                got: arr.shape.clone(),
                want: want.to_vec(),
            });
        }
        Ok(Tensor::new(arr.shape.clone(), arr.data.clone()))
    }

    /// Rebuild the policy parameters (f64 values cast into S).
    pub fn params<S: Real>(&self) -> Result<PolicyParams<S>, CheckpointError> {
        let (d_y, d_h, d_u) = (self.dims.d_y, self.dims.d_h, self.dims.d_u);
        let arch = Arch::parse(&self.arch)
            .ok_or_else(|| CheckpointError::MissingParam(format!("arch '{}'", self.arch)))?;
        let cell = match arch {
            Arch::Gru => CellWeights::Gru(GruWeights {
                w_z: self.take("gru.w_z", &[d_h, d_h])?.cast(),
                u_z: self.take("gru.u_z", &[d_h, d_h])?.cast(),
                b_z: self.take("gru.b_z", &[d_h])?.cast(),
                w_r: self.take("gru.w_r", &[d_h, d_h])?.cast(),
                u_r: self.take("gru.u_r", &[d_h, d_h])?.cast(),
                b_r: self.take("gru.b_r", &[d_h])?.cast(),
                w_n: self.take("gru.w_n", &[d_h, d_h])?.cast(),
                u_n: self.take("gru.u_n", &[d_h, d_h])?.cast(),
                b_n: self.take("gru.b_n", &[d_h])?.cast(),
            }),
            Arch::CtRnn => CellWeights::CtRnn(CtRnnWeights {
                w_in: self.take("ctrnn.w_in", &[d_h, d_h])?.cast(),
                w_rec: self.take("ctrnn.w_rec", &[d_h, d_h])?.cast(),
                log_alpha: self.take("ctrnn.log_alpha", &[1])?.cast(),
            }),
        };
        Ok(PolicyParams {
            d_y,
            d_h,
            d_u,
            w_enc: self.take("w_enc", &[d_h, d_y])?.cast(),
            b_enc: self.take("b_enc", &[d_h])?.cast(),
            cell,
            w_out: self.take("w_out", &[d_u, d_h])?.cast(),
            b_out: self.take("b_out", &[d_u])?.cast(),
            log_std: self.take("log_std", &[d_u])?.cast(),
            w_c1: self.take("w_c1", &[d_h, 2 * d_h])?.cast(),
            b_c1: self.take("b_c1", &[d_h])?.cast(),
            w_c2: self.take("w_c2", &[d_h])?.cast(),
            b_c2: self.take("b_c2", &[])?.cast(),
        })
    }

    pub fn obs_stats<S: Real>(&self) -> RunningStats<S> {
        RunningStats::restore(
            self.obs_stats.count,
            self.obs_stats.mean.clone(),
            self.obs_stats.m2.clone(),
        )
    }

    pub fn return_scaler<S: Real>(&self) -> ReturnScaler<S> {
        ReturnScaler::restore(
            self.return_scaler.returns.clone(),
            self.return_scaler.count,
            self.return_scaler.mean,
            self.return_scaler.m2,
            S::lit(self.config.gamma),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn trained_checkpoint() -> Checkpoint {
        let cfg = TrainConfig {
            env: "double_integrator".into(),
            num_envs: 2,
            unroll_len: 4,
            total_steps: 16,
            hidden_dim: 4,
            num_minibatches: 1,
            seed: 3,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::<f64>::new(cfg).unwrap();
        tr.run_iteration().unwrap();
        Checkpoint::from_trainer(&tr)
    }

    #[test]
    fn save_load_save_byte_identical() {
        let ck = trained_checkpoint();
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn params_roundtrip_bitwise() {
        let ck = trained_checkpoint();
        let restored = ck.params::<f64>().unwrap();
        for ((n1, t1), arr) in restored.named().iter().zip(&ck.params) {
            assert_eq!(*n1, arr.name);
            for (a, b) in t1.data().iter().zip(&arr.data) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn shape_mismatch_detected() {
        let mut ck = trained_checkpoint();
        ck.params[0].shape = vec![1, 1];
        ck.params[0].data = vec![0.0];
        assert!(matches!(
            ck.params::<f64>(),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn version_gate() {
        let ck = trained_checkpoint();
        let dir = tempdir().unwrap();
        let p = dir.path().join("v.json");
        let mut v: serde_json::Value = serde_json::from_str(&ck.to_json()).unwrap();
        v["format_version"] = serde_json::json!(99);
        std::fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(CheckpointError::Version(99))));
    }
}
