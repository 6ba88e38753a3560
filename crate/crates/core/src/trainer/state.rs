//! Mutable training state, the optimizer and the checkpoint layout.

use std::path::Path;

use crate::error::{Error, Result};
use crate::interact::{init_attention, FeatureQueue};
use crate::losses::LossBreakdown;
use crate::params::ParamSet;
use crate::router::init_router;
use crate::segnet::{init_params, read_checkpoint, write_checkpoint};
use crate::synthdata::Case;
use crate::tensor::{SeededRng, Tape, Tensor};

use super::batch::{sample_batch, BatchNeeds};
use super::config::{OptimizerConfig, TrainConfig};
use super::objective::{objective, Frozen, LossMode};

const PARAM: &str = "param/";
const MOMENTUM: &str = "momentum/";

/// Seed-stream ids; step `t` draws from `STEP_STREAM + t`.
const ROUTER_STREAM: u64 = 2;
const ATTENTION_STREAM: u64 = 3;
const QUEUE_L_STREAM: u64 = 4;
const QUEUE_U_STREAM: u64 = 5;
pub const STEP_STREAM: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamSet,
    /// Momentum buffer per parameter, same names.
    pub momentum: ParamSet,
    pub queue_l: FeatureQueue,
    pub queue_u: FeatureQueue,
    /// Number of completed steps.
    pub iteration: usize,
    pub seed: u64,
}

/// All trainable parameters for `cfg`, seeded by `seed`.
pub fn init_model(cfg: &TrainConfig, seed: u64) -> Result<ParamSet> {
    let mut params = init_params(&cfg.network, seed)?;
    let c = cfg.network.bottleneck_channels;
    init_router(&mut params, c, cfg.router.hidden(c), &mut SeededRng::stream(seed, ROUTER_STREAM));
    init_attention(&mut params, cfg.token_len()?, cfg.bci.d_proj, &mut SeededRng::stream(seed, ATTENTION_STREAM));
    Ok(params)
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_model(cfg, cfg.seed)?;
        let mut momentum = ParamSet::new();
        for (name, p) in params.iter() {
            momentum.insert(name.clone(), Tensor::zeros(p.shape().to_vec()));
        }
        let (cap, l) = (cfg.bci.queue_capacity, cfg.token_len()?);
        Ok(TrainState {
            params,
            momentum,
            queue_l: FeatureQueue::random(cap, l, &mut SeededRng::stream(cfg.seed, QUEUE_L_STREAM))?,
            queue_u: FeatureQueue::random(cap, l, &mut SeededRng::stream(cfg.seed, QUEUE_U_STREAM))?,
            iteration: 0,
            seed: cfg.seed,
        })
    }

    /// Flattens the state into one named-tensor container.
    pub fn to_tensors(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, t) in self.params.iter() {
            out.insert(format!("{PARAM}{n}"), t.clone());
        }
        for (n, t) in self.momentum.iter() {
            out.insert(format!("{MOMENTUM}{n}"), t.clone());
        }
        for (name, q) in [("queue_l", &self.queue_l), ("queue_u", &self.queue_u)] {
            out.insert(format!("{name}/storage"), q.storage());
            out.insert(format!("{name}/cursor"), Tensor::scalar(q.write_cursor() as f64));
            out.insert(format!("{name}/fill"), Tensor::scalar(q.fill_count() as f64));
        }
        out.insert("state/iteration", Tensor::scalar(self.iteration as f64));
        let (hi, lo) = ((self.seed >> 32) as f64, (self.seed & 0xffff_ffff) as f64);
        out.insert("state/seed", Tensor::from_vec(vec![hi, lo]));
        out
    }

    pub fn from_tensors(t: &ParamSet) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut momentum = ParamSet::new();
        for (n, v) in t.iter() {
            if let Some(name) = n.strip_prefix(PARAM) {
                params.insert(name, v.clone());
            } else if let Some(name) = n.strip_prefix(MOMENTUM) {
                momentum.insert(name, v.clone());
            }
        }
        if params.names().ne(momentum.names()) {
            return Err(Error::Format("checkpoint parameters and momentum buffers disagree".into()));
        }
        let count = |key: &str| -> Result<usize> {
            let v = t.get(key).map_err(|_| Error::Format(format!("checkpoint lacks {key:?}")))?.item()?;
            if !(v >= 0.0 && v.fract() == 0.0) {
                return Err(Error::Format(format!("checkpoint {key:?} = {v} is not a count")));
            }
            Ok(v as usize)
        };
        let queue = |name: &str| -> Result<FeatureQueue> {
            let storage = t
                .get(&format!("{name}/storage"))
                .map_err(|_| Error::Format(format!("checkpoint lacks {name}")))?;
            FeatureQueue::from_parts(storage.clone(), count(&format!("{name}/cursor"))?, count(&format!("{name}/fill"))?)
        };
        let seed = t.get("state/seed").map_err(|_| Error::Format("checkpoint lacks state/seed".into()))?;
        if seed.numel() != 2 {
            return Err(Error::Format("state/seed must hold two halves".into()));
        }
        let seed = ((seed.data()[0] as u64) << 32) | seed.data()[1] as u64;
        Ok(TrainState {
            params,
            momentum,
            queue_l: queue("queue_l")?,
            queue_u: queue("queue_u")?,
            iteration: count("state/iteration")?,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&read_checkpoint(path)?)
    }

    /// Checks the state against `cfg`'s parameter layout.
    pub fn check_compatible(&self, cfg: &TrainConfig) -> Result<()> {
        let fresh = init_model(cfg, 0)?;
        let same = fresh.len() == self.params.len()
            && fresh.iter().all(|(n, t)| self.params.get(n).map(|p| p.shape() == t.shape()).unwrap_or(false));
        if !same {
            return Err(Error::Config("checkpoint parameters do not match the configured network".into()));
        }
        if self.seed != cfg.seed {
            return Err(Error::Config(format!("checkpoint seed {} vs config seed {}", self.seed, cfg.seed)));
        }
        let (cap, l) = (cfg.bci.queue_capacity, cfg.token_len()?);
        for q in [&self.queue_l, &self.queue_u] {
            if q.capacity() != cap || q.entry_len() != l {
                return Err(Error::Config("checkpoint queues do not match the configured capacity".into()));
            }
        }
        Ok(())
    }
}

/// `lr·(1 − (t − 1)/t_max)^power` for the 1-based step `t`, so the first
/// step uses the initial rate and the last one stays positive.
pub fn learning_rate(o: &OptimizerConfig, t: usize, t_max: usize) -> f64 {
    let frac = (t.saturating_sub(1)) as f64 / t_max as f64;
    o.lr * (1.0 - frac).max(0.0).powf(o.poly_power)
}

/// SGD with momentum and coupled weight decay: `v ← μv + g + λθ`, `θ ← θ − ηv`.
/// Parameters absent from `grads` are left untouched.
pub fn sgd_update(params: &mut ParamSet, momentum: &mut ParamSet, grads: &ParamSet, o: &OptimizerConfig, lr: f64) -> Result<()> {
    for (name, g) in grads.iter() {
        let theta = params.get_mut(name).ok_or_else(|| Error::InvalidArgument(format!("no parameter {name:?}")))?;
        let v = momentum.get_mut(name).ok_or_else(|| Error::InvalidArgument(format!("no momentum {name:?}")))?;
        if theta.shape() != g.shape() || v.shape() != g.shape() {
            return Err(Error::shape("sgd_update", format!("{name}: gradient {:?} vs {:?}", g.shape(), theta.shape())));
        }
        for ((th, vi), &gi) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = o.momentum * *vi + gi + o.weight_decay * *th;
            *th -= lr * *vi;
        }
    }
    Ok(())
}

/// Runs step `state.iteration + 1`: sample views, forward, backward, update,
/// then refresh the memories.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, labeled: &[Case], unlabeled: &[Case]) -> Result<LossBreakdown> {
    let t = state.iteration + 1;
    let mode = LossMode::from_toggles(cfg.toggles);
    let mut rng = SeededRng::stream(state.seed, STEP_STREAM + t as u64);
    let needs = BatchNeeds { strong: mode.needs_strong(), unlabeled: mode.needs_unlabeled() };
    let batch = sample_batch(labeled, unlabeled, (cfg.batch.labeled, cfg.batch.unlabeled), &cfg.augment, needs, &mut rng)?;

    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape, true);
    let mut frozen = Frozen::recording();
    let fwd = objective(
        &mut tape,
        &bound,
        cfg,
        &batch,
        (&state.queue_l, &state.queue_u),
        t,
        &mut frozen,
        &mut rng,
        true,
    )?;
    if !fwd.breakdown.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss at step {t}: {:?}", fwd.breakdown)));
    }
    let g = tape.backward(fwd.total)?;
    let mut grads = ParamSet::new();
    for (name, &var) in bound.iter() {
        if let Some(gr) = g.get(var) {
            if !gr.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for {name} at step {t}")));
            }
            grads.insert(name.clone(), gr.clone());
        }
    }
    let lr = learning_rate(&cfg.optimizer, t, cfg.t_max);
    sgd_update(&mut state.params, &mut state.momentum, &grads, &cfg.optimizer, lr)?;
    if let Some(m) = &fwd.memory {
        m.apply(&mut state.queue_l, &mut state.queue_u)?;
    }
    state.iteration = t;
    Ok(fwd.breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_endpoints() {
        let o = OptimizerConfig::default();
        assert_eq!(learning_rate(&o, 1, 100), 0.01);
        let last = learning_rate(&o, 100, 100);
        assert!((last - 0.01 * 0.01f64.powf(0.9)).abs() < 1e-15);
        assert!(learning_rate(&o, 50, 100) < learning_rate(&o, 49, 100));
    }

    #[test]
    fn sgd_matches_hand_computation() {
        let o = OptimizerConfig { lr: 0.1, momentum: 0.5, weight_decay: 0.1, poly_power: 1.0 };
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(vec![1.0]));
        p.insert("frozen", Tensor::from_vec(vec![3.0]));
        let mut m = ParamSet::new();
        m.insert("w", Tensor::from_vec(vec![0.2]));
        m.insert("frozen", Tensor::from_vec(vec![0.0]));
        let mut g = ParamSet::new();
        g.insert("w", Tensor::from_vec(vec![2.0]));
        sgd_update(&mut p, &mut m, &g, &o, 0.1).unwrap();
        // v = 0.5·0.2 + 2 + 0.1·1 = 2.2; θ = 1 − 0.22.
        assert!((m.get("w").unwrap().data()[0] - 2.2).abs() < 1e-15);
        assert!((p.get("w").unwrap().data()[0] - 0.78).abs() < 1e-15);
        assert_eq!(p.get("frozen").unwrap().data()[0], 3.0);
    }

    #[test]
    fn state_round_trips_through_tensors() {
        let mut cfg = TrainConfig::default();
        cfg.seed = (7u64 << 40) + 12345;
        cfg.bci.queue_capacity = 16;
        let mut s = TrainState::init(&cfg).unwrap();
        s.iteration = 17;
        s.queue_l.push(&vec![1.0; s.queue_l.entry_len()]).unwrap();
        let back = TrainState::from_tensors(&s.to_tensors()).unwrap();
        assert_eq!(back, s);
        back.check_compatible(&cfg).unwrap();
        cfg.seed += 1;
        assert!(back.check_compatible(&cfg).is_err());
    }
}
