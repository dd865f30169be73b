//! Rollouts, generalized advantage estimation and clipped PPO updates.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    episode_start, reward_from_codes, sample_action, Demo, ImitationError, PolicyNet, Result,
    RewardConfig, StateEncoder,
};
use crate::sim::{step, Action, EnvConfig, Heading, WorldState};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub total_steps: usize,
    pub rollout_steps: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            total_steps: 50_000,
            rollout_steps: 512,
            epochs: 4,
            minibatch: 64,
            lr: 3e-4,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ImitationError::Config(m.to_string()));
        if self.rollout_steps == 0 || self.epochs == 0 || self.minibatch == 0 {
            return bad("rollout_steps, epochs and minibatch must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0)
            || !(self.gae_lambda > 0.0 && self.gae_lambda <= 1.0)
        {
            return bad("gamma and gae_lambda must lie in (0, 1]");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return bad("loss coefficients must be non-negative");
        }
        Ok(())
    }
}

/// One batch of on-policy experience.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Rollout {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub logp: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    /// The transition ended its episode.
    pub dones: Vec<bool>,
    /// Value estimate of the state after the last transition.
    pub last_value: f64,
    pub episodes: usize,
    pub successes: usize,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// Step the environment `n` times under the stochastic policy. The reward
/// of a transition compares the next state's code with demo frame
/// `step_count`. Episodes end on success or at the horizon.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollout(
    env: &EnvConfig,
    policy: &PolicyNet,
    encoder: &mut StateEncoder,
    demo: &Demo,
    reward_cfg: &RewardConfig,
    n: usize,
    state: &mut WorldState,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout> {
    let mut r = Rollout::default();
    for _ in 0..n {
        let h = encoder.h(state)?.to_vec();
        let (logp, v) = policy.evaluate(&h)?;
        let a = sample_action(&logp, rng);
        let next = step(
            state,
            Action::from_id(a).expect("sampled from the action set"),
        )?;
        let reward = reward_from_codes(encoder.h(&next)?, demo, next.step_count, reward_cfg);
        let done = next.near_target() || next.finished();
        r.obs.push(h);
        r.actions.push(a);
        r.logp.push(logp[a]);
        r.values.push(v);
        r.rewards.push(reward);
        r.dones.push(done);
        if done {
            r.episodes += 1;
            r.successes += usize::from(next.near_target());
            *state = episode_start(env, demo.target);
        } else {
            *state = next;
        }
    }
    r.last_value = policy.evaluate(encoder.h(state)?)?.1;
    Ok(r)
}

/// GAE(γ, λ) advantages and value targets. No bootstrapping across
/// episode ends.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let (next_v, live) = if dones[t] {
            (0.0, 0.0)
        } else if t + 1 < n {
            (values[t + 1], 1.0)
        } else {
            (last_value, 1.0)
        };
        let delta = rewards[t] + gamma * next_v - values[t];
        acc = delta + gamma * lambda * live * acc;
        adv[t] = acc;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Zero mean, unit variance. Constant inputs are only centred.
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    for x in xs.iter_mut() {
        *x = if sd > 1e-8 { (*x - m) / sd } else { *x - m };
    }
}

/// Loss graph of one minibatch plus its diagnostics.
pub struct PpoLoss {
    pub total: Var,
    pub surrogate: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Clipped surrogate `−E[min(r·A, clip(r)·A)]` plus weighted value error
/// minus weighted entropy.
#[allow(clippy::too_many_arguments)]
pub fn ppo_loss(
    tape: &Tape,
    vars: &[Var],
    policy: &PolicyNet,
    obs: &[Vec<f64>],
    actions: &[usize],
    old_logp: &[f64],
    advantages: &[f64],
    returns: &[f64],
    cfg: &PpoConfig,
) -> Result<PpoLoss> {
    let (logp_all, values) = policy.forward(tape, vars, obs)?;
    let logp = tape.pick(logp_all, actions)?;
    let old = tape.constant(Tensor::vector(old_logp));
    let ratio = tape.exp(tape.sub(logp, old)?)?;
    let adv = tape.constant(Tensor::vector(advantages));
    let unclipped = tape.mul(ratio, adv)?;
    let clipped = tape.mul(tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?, adv)?;
    let surrogate = tape.neg(tape.mean(tape.minimum(unclipped, clipped)?)?)?;

    let ret = tape.constant(Tensor::vector(returns));
    let value = tape.mean(tape.square(tape.sub(values, ret)?)?)?;

    let p = tape.exp(logp_all)?;
    let ent_rows = tape.neg(tape.sum_last(tape.mul(p, logp_all)?)?)?;
    let entropy = tape.mean(ent_rows)?;

    let total = tape.add(
        tape.add(surrogate, tape.scale(value, cfg.value_coef)?)?,
        tape.scale(entropy, -cfg.entropy_coef)?,
    )?;

    let (approx_kl, clip_fraction) = {
        let lp = tape.value(logp);
        let r = tape.value(ratio);
        let n = old_logp.len().max(1) as f64;
        let kl = old_logp
            .iter()
            .zip(lp.data())
            .map(|(o, l)| o - l)
            .sum::<f64>()
            / n;
        let cf = r
            .data()
            .iter()
            .filter(|x| (*x - 1.0).abs() > cfg.clip)
            .count() as f64
            / n;
        (kl, cf)
    };
    Ok(PpoLoss {
        total,
        surrogate: tape.item(surrogate),
        value: tape.item(value),
        entropy: tape.item(entropy),
        approx_kl,
        clip_fraction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UpdateStats {
    pub update: usize,
    pub env_steps: usize,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub mean_reward: f64,
    pub episodes: usize,
    pub success_rate: f64,
}

impl UpdateStats {
    pub const CSV_HEADER: &'static str =
        "update,env_steps,surrogate,value_loss,entropy,approx_kl,clip_fraction,mean_reward,episodes,success_rate";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.update,
            self.env_steps,
            self.surrogate,
            self.value_loss,
            self.entropy,
            self.approx_kl,
            self.clip_fraction,
            self.mean_reward,
            self.episodes,
            self.success_rate
        )
    }
}

fn non_finite(e: ImitationError, update: usize) -> ImitationError {
    match e {
        ImitationError::Tensor(TensorError::NonFinite { op }) => ImitationError::NonFinite {
            update,
            detail: format!("non-finite value in {op}"),
        },
        e => e,
    }
}

/// Several epochs of minibatch PPO over one rollout. Aborts on a
/// non-finite loss or gradient.
pub fn ppo_update(
    policy: &mut PolicyNet,
    adam: &mut Adam,
    rollout: &Rollout,
    cfg: &PpoConfig,
    update: usize,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    let (mut adv, returns) = gae_advantages(
        &rollout.rewards,
        &rollout.values,
        &rollout.dones,
        rollout.last_value,
        cfg.gamma,
        cfg.gae_lambda,
    );
    normalize(&mut adv);
    let n = rollout.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut sums = [0.0; 5];
    let mut batches = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch) {
            let pick = |xs: &[f64]| chunk.iter().map(|&i| xs[i]).collect::<Vec<_>>();
            let obs: Vec<Vec<f64>> = chunk.iter().map(|&i| rollout.obs[i].clone()).collect();
            let actions: Vec<usize> = chunk.iter().map(|&i| rollout.actions[i]).collect();
            let tape = Tape::new();
            let vars = policy.params.attach(&tape);
            let loss = ppo_loss(
                &tape,
                &vars,
                policy,
                &obs,
                &actions,
                &pick(&rollout.logp),
                &pick(&adv),
                &pick(&returns),
                cfg,
            )
            .map_err(|e| non_finite(e, update))?;
            let total = tape.item(loss.total);
            if !total.is_finite() {
                return Err(ImitationError::NonFinite {
                    update,
                    detail: format!("loss {total}"),
                });
            }
            tape.backward(loss.total)
                .map_err(|e| non_finite(e.into(), update))?;
            let grads: Vec<Tensor> = vars.iter().map(|v| tape.grad_or_zeros(*v)).collect();
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(ImitationError::NonFinite {
                    update,
                    detail: "gradient".into(),
                });
            }
            adam.step(policy.params.tensors_mut(), &grads)
                .map_err(|e| non_finite(e.into(), update))?;
            for (s, x) in sums.iter_mut().zip([
                loss.surrogate,
                loss.value,
                loss.entropy,
                loss.approx_kl,
                loss.clip_fraction,
            ]) {
                *s += x;
            }
            batches += 1;
        }
    }
    let b = batches.max(1) as f64;
    Ok(UpdateStats {
        update,
        env_steps: 0,
        surrogate: sums[0] / b,
        value_loss: sums[1] / b,
        entropy: sums[2] / b,
        approx_kl: sums[3] / b,
        clip_fraction: sums[4] / b,
        mean_reward: rollout.rewards.iter().sum::<f64>() / n.max(1) as f64,
        episodes: rollout.episodes,
        success_rate: if rollout.episodes > 0 {
            rollout.successes as f64 / rollout.episodes as f64
        } else {
            0.0
        },
    })
}

/// Train a fresh policy to imitate `demo` with the frozen `encoder`.
/// Input statistics come from the codes of every agent pose for the demo's
/// target.
pub fn train_policy(
    env: &EnvConfig,
    encoder: &mut StateEncoder,
    demo: &Demo,
    reward_cfg: &RewardConfig,
    cfg: &PpoConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(PolicyNet, Vec<UpdateStats>)> {
    cfg.validate()?;
    reward_cfg.validate()?;
    if demo.is_empty() {
        return Err(ImitationError::Config("empty demonstration".into()));
    }
    let mut policy = PolicyNet::new(encoder.dim_h(), cfg.seed);
    let start = episode_start(env, demo.target);
    let mut codes = Vec::new();
    for y in 0..start.grid_size {
        for x in 0..start.grid_size {
            for heading in Heading::ALL {
                let s = WorldState {
                    agent: (x, y),
                    heading,
                    ..start
                };
                codes.push(encoder.h(&s)?.to_vec());
            }
        }
    }
    policy.set_normalization(&codes);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7070_6f00);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), policy.params.tensors());
    let mut state = start;
    let mut stats = Vec::new();
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{}", UpdateStats::CSV_HEADER)?;
    }
    let mut env_steps = 0;
    let mut update = 0;
    while env_steps < cfg.total_steps {
        let n = cfg.rollout_steps.min(cfg.total_steps - env_steps);
        let rollout = collect_rollout(
            env, &policy, encoder, demo, reward_cfg, n, &mut state, &mut rng,
        )?;
        env_steps += n;
        let mut s = ppo_update(&mut policy, &mut adam, &rollout, cfg, update, &mut rng)?;
        s.env_steps = env_steps;
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", s.csv_row())?;
        }
        log::info!(
            "update {update} steps {env_steps} reward {:.3} success {:.2}",
            s.mean_reward,
            s.success_rate
        );
        stats.push(s);
        update += 1;
    }
    Ok((policy, stats))
}
