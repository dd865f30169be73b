//! Single-demonstration imitation: the cosine-threshold reward, an MLP
//! policy over state codes, PPO, and success/distance evaluation.

mod ppo;

pub use ppo::{
    collect_rollout, gae_advantages, normalize, ppo_loss, ppo_update, train_policy, PpoConfig,
    PpoLoss, Rollout, UpdateStats,
};

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Branch, DualAe, ModelError};
use crate::sim::{
    expert_action, render_fpv, step, with_target, Action, EnvConfig, SimError, Trajectory,
    WorldState,
};
use crate::tensor::{cosine, Checkpoint, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ImitationError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("numerical failure in PPO update {update}: {detail}")]
    NonFinite { update: usize, detail: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("policy checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ImitationError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Cosine threshold ξ_r.
    pub reward_threshold: f64,
    /// Encoder applied to the demonstration: FPV for first-person
    /// imitation, TPV for third-person imitation.
    pub demo_branch: Branch,
    /// TPV stream of the demonstration used in third-person mode.
    pub demo_view: usize,
    /// Use `−‖h^F − h^E‖₂` instead of the thresholded reward.
    pub continuous: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            reward_threshold: 0.8,
            demo_branch: Branch::Tpv,
            demo_view: 0,
            continuous: false,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reward_threshold > -1.0 - 1e-12 && self.reward_threshold < 1.0) {
            return Err(ImitationError::Config(
                "reward_threshold must lie in [-1, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// The demonstration, reduced to its state codes and task.
#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub h: Vec<Vec<f64>>,
    /// Goal cell of the demonstrated episode.
    pub target: (i32, i32),
}

impl Demo {
    pub fn encode(model: &DualAe, traj: &Trajectory, cfg: &RewardConfig) -> Result<Self> {
        let frames = match cfg.demo_branch {
            Branch::Fpv => &traj.fpv,
            Branch::Tpv => traj.tpv.get(cfg.demo_view).ok_or_else(|| {
                ImitationError::Config(format!("demo view {} of {}", cfg.demo_view, traj.n_views()))
            })?,
        };
        let refs: Vec<_> = frames.iter().collect();
        let h = model
            .encode_frames(&refs, cfg.demo_branch)?
            .into_iter()
            .map(|l| l.h)
            .collect();
        let last = traj
            .states
            .last()
            .ok_or_else(|| ImitationError::Config("empty demonstration".into()))?;
        Ok(Demo {
            h,
            target: (last.target_x as i32, last.target_y as i32),
        })
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
}

/// Reward for an agent code at step `t`. Past the end of the demo the
/// reward is 0.
pub fn reward_from_codes(agent_h: &[f64], demo: &Demo, t: usize, cfg: &RewardConfig) -> f64 {
    let Some(e) = demo.h.get(t) else {
        return 0.0;
    };
    if cfg.continuous {
        return -crate::tensor::l2_distance(agent_h, e);
    }
    match cosine(agent_h, e) {
        Ok(c) if c >= cfg.reward_threshold => 1.0,
        Ok(_) => 0.0,
        Err(_) => {
            log::warn!("zero-norm state code at step {t}; reward 0");
            0.0
        }
    }
}

/// `R_t` for one agent FPV frame.
pub fn imitation_reward(
    model: &DualAe,
    agent_fpv: &crate::sim::Frame,
    demo: &Demo,
    t: usize,
    cfg: &RewardConfig,
) -> Result<f64> {
    let h = model.encode(agent_fpv, Branch::Fpv)?.h;
    Ok(reward_from_codes(&h, demo, t, cfg))
}

/// Memoized FPV state codes. Only `h` is kept, so `v` can never reach the
/// policy.
pub struct StateEncoder<'a> {
    model: &'a DualAe,
    resolution: usize,
    cache: HashMap<(i32, i32, u8, i32, i32), Vec<f64>>,
}

impl<'a> StateEncoder<'a> {
    pub fn new(model: &'a DualAe, resolution: usize) -> Self {
        StateEncoder {
            model,
            resolution,
            cache: HashMap::new(),
        }
    }

    pub fn dim_h(&self) -> usize {
        self.model.arch.dim_h
    }

    pub fn h(&mut self, s: &WorldState) -> Result<&[f64]> {
        let key = s.key();
        if !self.cache.contains_key(&key) {
            let h = self
                .model
                .encode(&render_fpv(s, self.resolution), Branch::Fpv)?
                .h;
            self.cache.insert(key, h);
        }
        Ok(&self.cache[&key])
    }

    pub fn cached(&self) -> usize {
        self.cache.len()
    }
}

/// MLP policy `dim_h → dim_h → dim_h → 6` (tanh) with a separate value MLP
/// of the same trunk shape. Inputs are standardized with fixed statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub dim_h: usize,
    pub params: ParamStore,
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
}

const POLICY_LAYERS: [&str; 3] = ["l0", "l1", "out"];

impl PolicyNet {
    pub fn new(dim_h: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for head in ["pi", "vf"] {
            for (i, layer) in POLICY_LAYERS.iter().enumerate() {
                let out = match (i, head) {
                    (2, "pi") => Action::COUNT,
                    (2, _) => 1,
                    _ => dim_h,
                };
                let gain = if i == 2 && head == "pi" { 0.1 } else { 1.0 };
                params.push_uniform(
                    format!("{head}.{layer}.w"),
                    &[dim_h, out],
                    dim_h,
                    gain * 3f64.sqrt(),
                    &mut rng,
                );
                params.push(format!("{head}.{layer}.b"), Tensor::zeros(&[out]));
            }
        }
        PolicyNet {
            dim_h,
            params,
            obs_mean: vec![0.0; dim_h],
            obs_std: vec![1.0; dim_h],
        }
    }

    /// Fix the input standardization from sample codes.
    pub fn set_normalization(&mut self, samples: &[Vec<f64>]) {
        if samples.is_empty() {
            return;
        }
        let n = samples.len() as f64;
        for k in 0..self.dim_h {
            let m = samples.iter().map(|s| s[k]).sum::<f64>() / n;
            let v = samples.iter().map(|s| (s[k] - m).powi(2)).sum::<f64>() / n;
            self.obs_mean[k] = m;
            self.obs_std[k] = v.sqrt().max(1e-3);
        }
    }

    fn normalize(&self, h: &[f64]) -> Vec<f64> {
        h.iter()
            .zip(&self.obs_mean)
            .zip(&self.obs_std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    fn mlp(&self, tape: &Tape, vars: &[Var], head: usize, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..3 {
            let w = vars[head * 6 + 2 * i];
            let b = vars[head * 6 + 2 * i + 1];
            h = tape.add_bias(tape.matmul(h, w)?, b)?;
            if i < 2 {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// `(log-probs [N, 6], values [N])` for raw codes `[N, dim_h]`.
    pub fn forward(&self, tape: &Tape, vars: &[Var], obs: &[Vec<f64>]) -> Result<(Var, Var)> {
        if let Some(bad) = obs.iter().find(|o| o.len() != self.dim_h) {
            return Err(TensorError::ShapeMismatch {
                op: "policy",
                lhs: vec![bad.len()],
                rhs: vec![self.dim_h],
            }
            .into());
        }
        let rows: Vec<Vec<f64>> = obs.iter().map(|o| self.normalize(o)).collect();
        let x = tape.constant(Tensor::from_rows(&rows)?);
        let logits = self.mlp(tape, vars, 0, x)?;
        let logp = tape.log_softmax(logits)?;
        let v = self.mlp(tape, vars, 1, x)?;
        let v = tape.reshape(v, &[obs.len()])?;
        Ok((logp, v))
    }

    /// Action log-probabilities and value of one code.
    pub fn evaluate(&self, h: &[f64]) -> Result<(Vec<f64>, f64)> {
        let tape = Tape::new();
        let vars = self.params.attach_frozen(&tape);
        let (logp, v) = self.forward(&tape, &vars, &[h.to_vec()])?;
        let logp = tape.value(logp).data().to_vec();
        let v = tape.value(v).data()[0];
        Ok((logp, v))
    }

    /// Indices of the policy trunk and head (not the value MLP).
    pub fn policy_param_indices(&self) -> std::ops::Range<usize> {
        0..6
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            meta: serde_json::json!({
                "kind": "policy",
                "dim_h": self.dim_h,
                "obs_mean": self.obs_mean,
                "obs_std": self.obs_std,
                "extra": extra,
            }),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |m: &str| ImitationError::Checkpoint(m.to_string());
        if ck.meta["kind"] != "policy" {
            return Err(bad("not a policy checkpoint"));
        }
        let dim_h = ck.meta["dim_h"]
            .as_u64()
            .ok_or_else(|| bad("missing dim_h"))? as usize;
        let vec = |k: &str| -> Result<Vec<f64>> {
            serde_json::from_value(ck.meta[k].clone()).map_err(|e| bad(&format!("{k}: {e}")))
        };
        let mut p = PolicyNet::new(dim_h, 0);
        p.obs_mean = vec("obs_mean")?;
        p.obs_std = vec("obs_std")?;
        if p.obs_mean.len() != dim_h || p.obs_std.len() != dim_h {
            return Err(bad("normalization length"));
        }
        if p.params.names() != ck.params.names() {
            return Err(bad("parameter names differ"));
        }
        for (dst, src) in p.params.tensors_mut().iter_mut().zip(ck.params.tensors()) {
            if dst.shape() != src.shape() {
                return Err(bad("parameter shapes differ"));
            }
            *dst = src.clone();
        }
        Ok(p)
    }
}

/// Draw from a categorical given log-probabilities.
pub fn sample_action<R: Rng>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    logp.len() - 1
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Episode start for imitating a demonstration of reaching `target`.
pub fn episode_start(env: &EnvConfig, target: (i32, i32)) -> WorldState {
    with_target(env, target)
}

/// Who chooses actions during evaluation.
pub enum Actor<'a> {
    /// Greedy actions of a trained policy.
    Policy(&'a PolicyNet),
    Random,
    Expert,
    /// Never moves.
    Idle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub success: bool,
    /// `(initial distance − minimum distance) / initial distance`.
    pub reward: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyEval {
    pub episodes: Vec<EpisodeResult>,
    pub success_rate: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
}

impl PolicyEval {
    pub fn summary_line(&self) -> String {
        format!(
            "success_rate={} reward_mean={} reward_std={}",
            self.success_rate, self.reward_mean, self.reward_std
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("episode,success,normalized_reward\n");
        for (i, e) in self.episodes.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{}", u8::from(e.success), e.reward);
        }
        s
    }
}

/// Run `episodes` episodes toward `target`. Success means reaching the
/// target or a 4-neighbour of it within the horizon.
pub fn eval_policy(
    env: &EnvConfig,
    actor: &Actor,
    encoder: &mut StateEncoder,
    target: (i32, i32),
    episodes: usize,
    seed: u64,
) -> Result<PolicyEval> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut s = episode_start(env, target);
        let d0 = s.distance_to_target() as f64;
        let mut best = d0;
        let mut success = s.near_target();
        while !success && !s.finished() {
            let a = match actor {
                Actor::Policy(p) => Action::from_id(argmax(&p.evaluate(encoder.h(&s)?)?.0)),
                Actor::Random => Action::from_id(rng.gen_range(0..Action::COUNT)),
                Actor::Expert => Some(expert_action(&s)),
                Actor::Idle => None,
            };
            s = match a {
                Some(a) => step(&s, a)?,
                None => WorldState {
                    step_count: s.step_count + 1,
                    ..s
                },
            };
            best = best.min(s.distance_to_target() as f64);
            success = s.near_target();
        }
        results.push(EpisodeResult {
            success,
            reward: if d0 > 0.0 { (d0 - best) / d0 } else { 1.0 },
            steps: s.step_count,
        });
    }
    let n = results.len().max(1) as f64;
    let success_rate = results.iter().filter(|r| r.success).count() as f64 / n;
    let reward_mean = results.iter().map(|r| r.reward).sum::<f64>() / n;
    let reward_std = (results
        .iter()
        .map(|r| (r.reward - reward_mean).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(PolicyEval {
        episodes: results,
        success_rate,
        reward_mean,
        reward_std,
    })
}
