//! PPO training: rollout collection through the expansion environment,
//! one-step (or GAE) advantages, the clipped surrogate objective, and the
//! full-agent gradient check used by the CLI.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{greedy_action, sample_action, AgentParams};
use crate::city::City;
use crate::env::{Env, EnvConfig};
use crate::graph::{node_features, FeatureMatrix, HeteroGraph};
use crate::mix_seed;
use crate::nn::{AdamState, Tape, TensorId};
use crate::{Error, Result};

/// PPO hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub gamma: f64,
    /// 0 gives one-step TD advantages; 1 gives Monte-Carlo returns.
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub clip_epsilon: f64,
    pub epochs_per_batch: usize,
    pub episodes_per_iteration: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.0,
            entropy_coef: 0.01,
            value_coef: 0.5,
            clip_epsilon: 0.2,
            epochs_per_batch: 4,
            episodes_per_iteration: 8,
            iterations: 50,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return Err(Error::Config("loss coefficients must be >= 0".into()));
        }
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::Config("clip_epsilon must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("gae_lambda must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Everything needed to re-run the policy on a visited state during the
/// update epochs.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub features: FeatureMatrix,
    pub stations: Vec<usize>,
    pub mask: Vec<bool>,
    pub budget_frac: f64,
    pub lines_frac: f64,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
}

/// One complete episode.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub initial_cod: f64,
    pub final_cod: f64,
    pub initial_ie: f64,
    pub final_ie: f64,
    pub spend: f64,
}

impl Trajectory {
    pub fn reward_sum(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn state_inputs(env: &Env<'_>, graph: &HeteroGraph) -> (FeatureMatrix, Vec<usize>, f64, f64) {
    let features = node_features(env.city(), graph, env.state());
    let stations: Vec<usize> = env.state().stations().into_iter().collect();
    let cfg = env.config();
    let budget_frac = env.state().budget_remaining / cfg.budget;
    let lines_frac = if cfg.max_new_lines > 0 {
        env.state().new_lines_remaining as f64 / cfg.max_new_lines as f64
    } else {
        0.0
    };
    (features, stations, budget_frac, lines_frac)
}

/// Runs one episode with the current policy. `episode_seed` drives action
/// sampling only; the initial network comes from `env_seed`.
pub fn collect_episode(
    city: &City,
    graph: &HeteroGraph,
    env_cfg: &EnvConfig,
    env_seed: u64,
    params: &AgentParams,
    episode_seed: u64,
) -> Result<Trajectory> {
    run_episode(city, graph, env_cfg, env_seed, params, Some(episode_seed))
}

/// Deterministic argmax rollout used for evaluation.
pub fn greedy_rollout(
    city: &City,
    graph: &HeteroGraph,
    env_cfg: &EnvConfig,
    env_seed: u64,
    params: &AgentParams,
) -> Result<Trajectory> {
    run_episode(city, graph, env_cfg, env_seed, params, None)
}

fn run_episode(
    city: &City,
    graph: &HeteroGraph,
    env_cfg: &EnvConfig,
    env_seed: u64,
    params: &AgentParams,
    sample_seed: Option<u64>,
) -> Result<Trajectory> {
    let mut env = Env::reset(city, env_cfg, env_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed.unwrap_or(0));
    let mut steps = Vec::new();
    loop {
        let mask = env.action_mask();
        if mask.is_empty() {
            break;
        }
        let (features, stations, budget_frac, lines_frac) = state_inputs(&env, graph);
        let mut tape = Tape::new(params.len());
        let pids = params.register(&mut tape)?;
        let emb = params.encode(&mut tape, &pids, &features, graph)?;
        let lp = params.score_actions(&mut tape, &pids, emb, &stations, &mask.mask)?;
        let v = params.value_head(&mut tape, &pids, emb, budget_frac, lines_frac)?;
        let value = tape.value(v).item()?;
        let (action, log_prob, _entropy) = if sample_seed.is_some() {
            sample_action(tape.value(lp), &mut rng)?
        } else {
            greedy_action(tape.value(lp))?
        };
        let out = env.step(action)?;
        steps.push(StepRecord {
            features,
            stations,
            mask: mask.mask,
            budget_frac,
            lines_frac,
            action,
            log_prob,
            value,
            reward: out.reward,
            done: out.done,
        });
        if out.done {
            break;
        }
    }
    Ok(Trajectory {
        steps,
        initial_cod: env.initial_cod(),
        final_cod: env.cod(),
        initial_ie: env.initial_ie(),
        final_ie: env.ie(),
        spend: env.spend(),
    })
}

/// Serial collection of one iteration's batch; episode seeds are derived
/// from `(ppo.seed, iteration, episode)` so any scheduling of the episodes
/// reproduces the same batch.
pub fn collect_rollouts(
    city: &City,
    graph: &HeteroGraph,
    env_cfg: &EnvConfig,
    env_seed: u64,
    params: &AgentParams,
    ppo: &PpoConfig,
    iteration: usize,
) -> Result<Vec<Trajectory>> {
    let mut batch = Vec::with_capacity(ppo.episodes_per_iteration);
    for episode in 0..ppo.episodes_per_iteration {
        let seed = mix_seed(ppo.seed, iteration as u64, episode as u64);
        batch.push(collect_episode(city, graph, env_cfg, env_seed, params, seed)?);
    }
    Ok(batch)
}

/// Raw per-episode advantages and returns:
/// `delta_t = r_t + gamma * V(s_{t+1}) * (1 - done) - V(s_t)` and
/// `A_t = delta_t + gamma * lambda * (1 - done) * A_{t+1}`,
/// `R_t = A_t + V(s_t)`.
pub fn compute_advantages(traj: &Trajectory, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = traj.steps.len();
    let mut advantages = alloc::vec![0.0; n];
    let mut returns = alloc::vec![0.0; n];
    let mut carry = 0.0;
    for t in (0..n).rev() {
        let s = &traj.steps[t];
        let not_done = if s.done { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { traj.steps[t + 1].value } else { 0.0 };
        let delta = s.reward + gamma * next_value * not_done - s.value;
        carry = delta + gamma * lambda * not_done * carry;
        advantages[t] = carry;
        returns[t] = carry + s.value;
    }
    (advantages, returns)
}

/// In-place batch normalization to zero mean, unit variance (eps 1e-8).
pub fn normalize_advantages(advs: &mut [f64]) {
    if advs.is_empty() {
        return;
    }
    let n = advs.len() as f64;
    let mean = advs.iter().sum::<f64>() / n;
    let var = advs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    for a in advs.iter_mut() {
        *a = (*a - mean) / (std + 1e-8);
    }
}

/// The differentiable per-step loss: clipped surrogate + value MSE +
/// entropy bonus. Returns the scalar loss node and the raw term values.
pub fn step_loss(
    tape: &mut Tape,
    params: &AgentParams,
    pids: &[TensorId],
    graph: &HeteroGraph,
    record: &StepRecord,
    advantage: f64,
    ret: f64,
    ppo: &PpoConfig,
) -> Result<(TensorId, LossTerms)> {
    let emb = params.encode(tape, pids, &record.features, graph)?;
    let lp = params.score_actions(tape, pids, emb, &record.stations, &record.mask)?;
    let v = params.value_head(tape, pids, emb, record.budget_frac, record.lines_frac)?;

    let logp_a = tape.pick(lp, 0, record.action)?;
    let old = tape.constant_scalar(record.log_prob)?;
    let diff = tape.sub(logp_a, old)?;
    let ratio = tape.exp(diff)?;
    let surr1 = tape.scale(ratio, advantage)?;
    let clipped = tape.clamp(ratio, 1.0 - ppo.clip_epsilon, 1.0 + ppo.clip_epsilon)?;
    let surr2 = tape.scale(clipped, advantage)?;
    let objective = tape.min_elem(surr1, surr2)?;

    let ret_c = tape.constant_scalar(ret)?;
    let vdiff = tape.sub(v, ret_c)?;
    let vmse = tape.mul(vdiff, vdiff)?;

    let p = tape.exp(lp)?;
    let plogp = tape.mul(p, lp)?;
    let ent_sum = tape.sum_all(plogp)?;
    let entropy = tape.scale(ent_sum, -1.0)?;

    let neg_obj = tape.scale(objective, -1.0)?;
    let v_term = tape.scale(vmse, ppo.value_coef)?;
    let e_term = tape.scale(entropy, -ppo.entropy_coef)?;
    let pv = tape.add(neg_obj, v_term)?;
    let loss = tape.add(pv, e_term)?;

    let terms = LossTerms {
        policy_loss: -tape.value(objective).item()?,
        value_loss: tape.value(vmse).item()?,
        entropy: tape.value(entropy).item()?,
        ratio: tape.value(ratio).item()?,
    };
    Ok((loss, terms))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub ratio: f64,
}

/// Metrics of one optimizer pass over a batch (last epoch's means).
#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateMetrics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub steps: usize,
    pub epochs: usize,
}

/// PPO update: for each epoch, accumulate gradients of the mean step loss
/// over the whole batch (full-batch, fixed order) and take one Adam step.
pub fn ppo_update(
    batch: &[Trajectory],
    graph: &HeteroGraph,
    params: &mut AgentParams,
    adam: &mut AdamState,
    ppo: &PpoConfig,
) -> Result<UpdateMetrics> {
    ppo.validate()?;
    let mut records: Vec<(&StepRecord, f64, f64)> = Vec::new();
    let mut advantages: Vec<f64> = Vec::new();
    let mut returns: Vec<f64> = Vec::new();
    for traj in batch {
        let (a, r) = compute_advantages(traj, ppo.gamma, ppo.gae_lambda);
        advantages.extend(a);
        returns.extend(r);
    }
    normalize_advantages(&mut advantages);
    let mut idx = 0;
    for traj in batch {
        for step in &traj.steps {
            records.push((step, advantages[idx], returns[idx]));
            idx += 1;
        }
    }
    let n = records.len();
    if n == 0 {
        return Ok(UpdateMetrics::default());
    }

    let mut metrics = UpdateMetrics {
        steps: n,
        epochs: ppo.epochs_per_batch,
        ..UpdateMetrics::default()
    };
    for _epoch in 0..ppo.epochs_per_batch {
        let mut grad_acc: Vec<crate::nn::Tensor> = params
            .tensors()
            .iter()
            .map(|t| crate::nn::Tensor::zeros(t.rows(), t.cols()))
            .collect();
        let mut policy_sum = 0.0;
        let mut value_sum = 0.0;
        let mut entropy_sum = 0.0;
        for (record, adv, ret) in &records {
            let mut tape = Tape::new(params.len());
            let pids = params.register(&mut tape)?;
            let (loss, terms) = step_loss(&mut tape, params, &pids, graph, record, *adv, *ret, ppo)?;
            let scaled = tape.scale(loss, 1.0 / n as f64)?;
            let grads = tape.backward(scaled)?;
            for (acc, g) in grad_acc.iter_mut().zip(&grads) {
                if g.data().is_empty() {
                    continue;
                }
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            policy_sum += terms.policy_loss;
            value_sum += terms.value_loss;
            entropy_sum += terms.entropy;
        }
        for g in &grad_acc {
            if !g.is_finite() {
                return Err(Error::Numeric(
                    "non-finite gradient; aborting this iteration".into(),
                ));
            }
        }
        adam.apply(params.tensors_mut(), &grad_acc)?;
        metrics.policy_loss = policy_sum / n as f64;
        metrics.value_loss = value_sum / n as f64;
        metrics.entropy = entropy_sum / n as f64;
    }
    Ok(metrics)
}

/// Per-iteration summary written to the metrics log.
#[derive(Debug, Clone, Copy)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub episodes: usize,
    pub steps: usize,
    pub mean_cod: f64,
    pub mean_ie: f64,
    pub mean_reward_sum: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// Batch-level episode statistics.
pub fn batch_stats(batch: &[Trajectory]) -> (f64, f64, f64, usize) {
    if batch.is_empty() {
        return (0.0, 0.0, 0.0, 0);
    }
    let n = batch.len() as f64;
    let cod = batch.iter().map(|t| t.final_cod).sum::<f64>() / n;
    let ie = batch.iter().map(|t| t.final_ie).sum::<f64>() / n;
    let rs = batch.iter().map(|t| t.reward_sum()).sum::<f64>() / n;
    let steps = batch.iter().map(|t| t.len()).sum();
    (cod, ie, rs, steps)
}

/// Serial collect + update convenience used by tests and the CLI's
/// deterministic path.
pub fn train_iteration(
    city: &City,
    graph: &HeteroGraph,
    env_cfg: &EnvConfig,
    env_seed: u64,
    params: &mut AgentParams,
    adam: &mut AdamState,
    ppo: &PpoConfig,
    iteration: usize,
) -> Result<IterationMetrics> {
    let batch = collect_rollouts(city, graph, env_cfg, env_seed, params, ppo, iteration)?;
    update_iteration(&batch, graph, params, adam, ppo, iteration)
}

/// The update half of an iteration, reusable with externally collected
/// batches (e.g. parallel collection in the CLI).
pub fn update_iteration(
    batch: &[Trajectory],
    graph: &HeteroGraph,
    params: &mut AgentParams,
    adam: &mut AdamState,
    ppo: &PpoConfig,
    iteration: usize,
) -> Result<IterationMetrics> {
    let (mean_cod, mean_ie, mean_reward_sum, steps) = batch_stats(batch);
    let update = ppo_update(batch, graph, params, adam, ppo)?;
    Ok(IterationMetrics {
        iteration,
        episodes: batch.len(),
        steps,
        mean_cod,
        mean_ie,
        mean_reward_sum,
        policy_loss: update.policy_loss,
        value_loss: update.value_loss,
        entropy: update.entropy,
    })
}

/// Report of the full-agent gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub params_checked: usize,
}

/// Central-finite-difference check of the composite step loss against the
/// tape gradients, over every parameter entry. `h` is the half step.
pub fn gradient_check(
    city: &City,
    graph: &HeteroGraph,
    env_cfg: &EnvConfig,
    params: &AgentParams,
    env_seed: u64,
    h: f64,
) -> Result<GradCheckReport> {
    let env = Env::reset(city, env_cfg, env_seed)?;
    let mask = env.action_mask();
    if mask.is_empty() {
        return Err(Error::InvalidState(
            "gradient check needs at least one feasible action".into(),
        ));
    }
    let (features, stations, budget_frac, lines_frac) = {
        let features = node_features(city, graph, env.state());
        let stations: Vec<usize> = env.state().stations().into_iter().collect();
        let cfg = env.config();
        let bf = env.state().budget_remaining / cfg.budget;
        let lf = if cfg.max_new_lines > 0 {
            env.state().new_lines_remaining as f64 / cfg.max_new_lines as f64
        } else {
            0.0
        };
        (features, stations, bf, lf)
    };
    let action = *mask.resolved.keys().next().unwrap();
    let record = StepRecord {
        features,
        stations,
        mask: mask.mask.clone(),
        budget_frac,
        lines_frac,
        action,
        log_prob: -1.25, // fixed old log-prob so the ratio path is active
        value: 0.0,
        reward: 0.0,
        done: false,
    };
    let ppo = PpoConfig::default();
    let advantage = 0.7;
    let ret = 0.4;

    let eval = |p: &AgentParams| -> Result<f64> {
        let mut tape = Tape::new(p.len());
        let pids = p.register(&mut tape)?;
        let (loss, _) = step_loss(&mut tape, p, &pids, graph, &record, advantage, ret, &ppo)?;
        tape.value(loss).item()
    };

    let mut tape = Tape::new(params.len());
    let pids = params.register(&mut tape)?;
    let (loss, _) = step_loss(&mut tape, params, &pids, graph, &record, advantage, ret, &ppo)?;
    let analytic = tape.backward(loss)?;

    let names = params.names();
    let mut work = params.clone();
    let mut max_rel = 0.0;
    let mut worst_param = String::from("none");
    let mut worst_index = 0;
    let mut checked = 0usize;
    for slot in 0..params.len() {
        for i in 0..params.tensors()[slot].data().len() {
            let orig = params.tensors()[slot].data()[i];
            work.tensors_mut()[slot].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.tensors_mut()[slot].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.tensors_mut()[slot].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[slot].data()[i];
            let abs = (an - fd).abs();
            let rel = if abs <= 1e-8 {
                0.0
            } else {
                abs / an.abs().max(fd.abs())
            };
            if rel > max_rel {
                max_rel = rel;
                worst_param = names[slot].clone();
                worst_index = i;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_param,
        worst_index,
        params_checked: checked,
    })
}
