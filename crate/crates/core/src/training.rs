//! Losses, optimizer and the two-phase trainer.
//!
//! Behaviour cloning minimizes `-log π(a*) + λ((s* - ŝ)² + (p* - p̂)²)` per
//! step against the shortest-path oracle. PPO then finetunes with the clipped
//! surrogate on generalized advantage estimates of the progress reward, a
//! value regression term and the same auxiliary loss.
//!
//! Every loss is built on a per-episode tape: the graph is rebuilt from the
//! recorded observations and the recurrent policy is unrolled over the whole
//! episode, so gradients flow through time as well as through the mixer.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Tape, Var};
use crate::error::{Result, TsgmError};
use crate::gridsim::{
    evaluate, observation_rng, observe, oracle_action_with_field, oracle_action_within, step_env, Episode, Metrics, Suite, World, CELL_SIZE,
    SUCCESS_RADIUS,
};
use crate::model::{RecordedStep, StepTape, TsgmAgent, TsgmModel};
use crate::params::{ParamId, ParamStore};
use crate::policy::{Action, SampleMode};
use crate::tensor::Matrix;

pub const GOAL_REWARD: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the auxiliary progress / goal losses.
    pub lambda: f64,
    pub clip_epsilon: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub bc_learning_rate: f64,
    pub ppo_learning_rate: f64,
    /// Multiplier on both learning rates for the mixer's parameters. Its
    /// messages feed every attention key, so at the full rate they drift faster
    /// than the policy can track and behaviour cloning underfits.
    pub mixer_lr_scale: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub bc_epochs: usize,
    pub ppo_epochs: usize,
    /// Episodes per optimizer step.
    pub batch_episodes: usize,
    /// Probability of a random (non-stop) behaviour action while collecting demonstrations.
    pub behavior_epsilon: f64,
    /// Geodesic distance (m) at which demonstrations stop. Zero walks the
    /// demonstration onto the goal cell, which makes the stop label depend on
    /// the goal view rather than on elapsed time.
    pub demo_stop_radius: f64,
    /// Step cap for demonstration and rollout episodes.
    pub rollout_max_steps: usize,
    /// Rollouts collected per PPO epoch.
    pub ppo_rollouts: usize,
    /// Optimization passes over each PPO rollout batch.
    pub ppo_update_passes: usize,
    /// Evaluate on the validation suite every this many epochs (0: only after the last epoch of each phase).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            clip_epsilon: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            value_coef: 0.5,
            bc_learning_rate: 3e-3,
            ppo_learning_rate: 1e-4,
            mixer_lr_scale: 0.3,
            grad_clip: 5.0,
            bc_epochs: 60,
            ppo_epochs: 4,
            batch_episodes: 4,
            behavior_epsilon: 0.2,
            demo_stop_radius: 0.0,
            rollout_max_steps: 120,
            ppo_rollouts: 16,
            ppo_update_passes: 2,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| if ok { Ok(()) } else { Err(TsgmError::validation(field, msg)) };
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "train.lambda", "must be a finite value >= 0")?;
        check(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0, "train.clip_epsilon", "must lie in (0, 1)")?;
        check(self.gamma > 0.0 && self.gamma <= 1.0, "train.gamma", "must lie in (0, 1]")?;
        check((0.0..=1.0).contains(&self.gae_lambda), "train.gae_lambda", "must lie in [0, 1]")?;
        check(self.value_coef >= 0.0 && self.value_coef.is_finite(), "train.value_coef", "must be >= 0")?;
        check(self.bc_learning_rate > 0.0 && self.bc_learning_rate.is_finite(), "train.bc_learning_rate", "must be > 0")?;
        check(self.ppo_learning_rate > 0.0 && self.ppo_learning_rate.is_finite(), "train.ppo_learning_rate", "must be > 0")?;
        check(self.mixer_lr_scale > 0.0 && self.mixer_lr_scale.is_finite(), "train.mixer_lr_scale", "must be > 0")?;
        check(self.grad_clip >= 0.0 && self.grad_clip.is_finite(), "train.grad_clip", "must be >= 0")?;
        check(self.batch_episodes > 0, "train.batch_episodes", "must be >= 1")?;
        check((0.0..=1.0).contains(&self.behavior_epsilon), "train.behavior_epsilon", "must lie in [0, 1]")?;
        check(
            (0.0..=SUCCESS_RADIUS).contains(&self.demo_stop_radius),
            "train.demo_stop_radius",
            "must lie in [0, 1]",
        )?;
        check(self.rollout_max_steps > 0, "train.rollout_max_steps", "must be >= 1")?;
        check(self.ppo_rollouts > 0, "train.ppo_rollouts", "must be >= 1")?;
        check(self.ppo_update_passes > 0, "train.ppo_update_passes", "must be >= 1")?;
        Ok(())
    }
}

/// `(prev - cur) + 10` when the agent stopped within reach of the goal.
pub fn compute_reward(prev_geodesic: f64, cur_geodesic: f64, reached_goal: bool) -> f64 {
    (prev_geodesic - cur_geodesic) + if reached_goal { GOAL_REWARD } else { 0.0 }
}

/// `clamp(1 - dt / d0, 0, 1)`; a zero-length episode counts as complete.
pub fn progress_target(d0: f64, dt: f64) -> f64 {
    if d0 <= 0.0 {
        return 1.0;
    }
    (1.0 - dt / d0).clamp(0.0, 1.0)
}

/// Goal-sensor target: 1 within the success radius.
pub fn goal_target(dt: f64) -> f64 {
    if dt <= SUCCESS_RADIUS {
        1.0
    } else {
        0.0
    }
}

/// Generalized advantage estimates and value targets for one episode.
/// `bootstrap` is the value after the last step (0 for a terminal stop).
pub fn gae(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(TsgmError::invalid("rewards and values differ in length"));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// One supervised step with its predictions, for loss evaluation outside a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct BcSample {
    pub logits: [f64; 4],
    pub oracle: Action,
    pub progress_hat: f64,
    pub goal_hat: f64,
    pub progress: f64,
    pub goal: f64,
}

fn log_prob(logits: &[f64; 4], a: Action) -> f64 {
    logits[a.index()] - log_sum_exp(logits)
}

/// Mean over steps of `-log softmax(logits)[a*] + λ((s* - ŝ)² + (p* - p̂)²)`.
pub fn bc_loss(batch: &[BcSample], lambda: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(TsgmError::invalid("behaviour-cloning loss of an empty batch"));
    }
    let total: f64 = batch
        .iter()
        .map(|s| -log_prob(&s.logits, s.oracle) + lambda * ((s.goal - s.goal_hat).powi(2) + (s.progress - s.progress_hat).powi(2)))
        .sum();
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoSample {
    pub logits: [f64; 4],
    pub action: Action,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub value: f64,
    pub target_return: f64,
    pub progress_hat: f64,
    pub goal_hat: f64,
    pub progress: f64,
    pub goal: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoLoss {
    /// `-mean(min(r A, clip(r, 1-ε, 1+ε) A))`.
    pub surrogate: f64,
    /// `mean((V - R)²)`.
    pub value: f64,
    pub aux: f64,
    pub total: f64,
}

/// Clipped-surrogate PPO loss with value and auxiliary terms.
pub fn ppo_loss(batch: &[PpoSample], config: &TrainConfig) -> Result<PpoLoss> {
    if batch.is_empty() {
        return Err(TsgmError::invalid("ppo loss of an empty batch"));
    }
    let n = batch.len() as f64;
    let eps = config.clip_epsilon;
    let (mut surrogate, mut value, mut aux) = (0.0, 0.0, 0.0);
    for s in batch {
        let ratio = (log_prob(&s.logits, s.action) - s.old_log_prob).exp();
        surrogate -= (ratio * s.advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * s.advantage);
        value += (s.value - s.target_return).powi(2);
        aux += (s.goal - s.goal_hat).powi(2) + (s.progress - s.progress_hat).powi(2);
    }
    let (surrogate, value, aux) = (surrogate / n, value / n, aux / n);
    Ok(PpoLoss {
        surrogate,
        value,
        aux,
        total: surrogate + config.value_coef * value + config.lambda * aux,
    })
}

/// Central differences `(f(w + ε) - f(w - ε)) / 2ε` for every scalar of `store`.
pub fn finite_diff_grad(loss_fn: impl FnMut(&ParamStore) -> f64, store: &ParamStore, epsilon: f64) -> Vec<Matrix> {
    let entries: Vec<(ParamId, usize)> = store.ids().flat_map(|id| (0..store.get(id).len()).map(move |i| (id, i))).collect();
    let mut out = store.zeros_like();
    for ((id, i), g) in entries.iter().zip(finite_diff_entries(loss_fn, store, epsilon, &entries)) {
        out[id.0].data_mut()[*i] = g;
    }
    out
}

/// Central differences for selected `(tensor, flat index)` entries.
pub fn finite_diff_entries(
    mut loss_fn: impl FnMut(&ParamStore) -> f64,
    store: &ParamStore,
    epsilon: f64,
    entries: &[(ParamId, usize)],
) -> Vec<f64> {
    let mut work = store.clone();
    entries
        .iter()
        .map(|&(id, i)| {
            let w = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = w + epsilon;
            let up = loss_fn(&work);
            work.get_mut(id).data_mut()[i] = w - epsilon;
            let down = loss_fn(&work);
            work.get_mut(id).data_mut()[i] = w;
            (up - down) / (2.0 * epsilon)
        })
        .collect()
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    /// Per-tensor multiplier on `lr`.
    scales: Vec<f64>,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            scales: vec![1.0; store.len()],
            m: store.zeros_like(),
            v: store.zeros_like(),
        }
    }

    /// Multiplies the step size of every tensor whose name starts with `prefix`.
    pub fn scale_group(mut self, store: &ParamStore, prefix: &str, scale: f64) -> Self {
        for (k, (name, _)) in store.iter().enumerate() {
            if name.starts_with(prefix) {
                self.scales[k] *= scale;
            }
        }
        self
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let (m, v, g) = (self.m[k].data_mut(), self.v[k].data_mut(), grads[k].data());
            let w = store.get_mut(id).data_mut();
            let lr = self.lr * self.scales[k];
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// A recorded episode with supervision and (for rollouts) PPO statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: usize,
    pub goal: Vec<f64>,
    pub steps: Vec<RecordedStep>,
    pub oracle: Vec<Action>,
    pub progress: Vec<f64>,
    pub goal_flag: Vec<f64>,
    #[serde(default)]
    pub old_log_probs: Vec<f64>,
    #[serde(default)]
    pub values: Vec<f64>,
    #[serde(default)]
    pub rewards: Vec<f64>,
}

impl Trajectory {
    fn new(episode: &Episode) -> Self {
        Trajectory {
            episode_id: episode.id,
            goal: episode.goal_feature.clone(),
            steps: Vec::new(),
            oracle: Vec::new(),
            progress: Vec::new(),
            goal_flag: Vec::new(),
            old_log_probs: Vec::new(),
            values: Vec::new(),
            rewards: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Keeps the first `len` steps.
    pub fn truncate(&mut self, len: usize) {
        self.steps.truncate(len);
        self.oracle.truncate(len);
        self.progress.truncate(len);
        self.goal_flag.truncate(len);
        self.old_log_probs.truncate(len);
        self.values.truncate(len);
        self.rewards.truncate(len);
    }
}

const EXPLORE: [Action; 3] = [Action::Forward, Action::TurnLeft, Action::TurnRight];

/// Demonstration with oracle labels. The executed action follows the oracle,
/// except that with probability `epsilon` a random movement is taken instead,
/// so the data also covers states just off the shortest path.
pub fn collect_demonstration(world: &World, episode: &Episode, config: &TrainConfig, seed: u64) -> Result<Trajectory> {
    let (epsilon, max_steps) = (config.behavior_epsilon, config.rollout_max_steps);
    let field = world.distance_field(episode.goal.cell());
    let dist = |pose: &crate::gridsim::Pose| field[pose.y * world.width() + pose.x] as f64 * CELL_SIZE;
    let mut obs_rng = observation_rng(seed, episode);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ crate::gridsim::episode_salt(episode.id) ^ 0xBEAF);
    let mut traj = Trajectory::new(episode);
    let mut pose = episode.start;
    for _ in 0..max_steps {
        let obs = observe(world, &pose, &mut obs_rng)?;
        let label = oracle_action_within(world, &field, &pose, config.demo_stop_radius)?;
        let action = if rng.random_bool(epsilon) { EXPLORE[rng.random_range(0..3)] } else { label };
        let dt = dist(&pose);
        traj.steps.push(RecordedStep {
            image: obs.image,
            detections: obs.detections,
            action,
        });
        traj.oracle.push(label);
        traj.progress.push(progress_target(episode.geodesic, dt));
        traj.goal_flag.push(goal_target(dt));
        if action == Action::Stop {
            break;
        }
        pose = step_env(world, &pose, action);
    }
    Ok(traj)
}

/// One demonstration per episode of `suite`.
pub fn collect_bc_dataset(suite: &Suite, config: &TrainConfig, seed: u64) -> Result<Vec<Trajectory>> {
    suite
        .episodes
        .par_iter()
        .map(|ep| collect_demonstration(suite.world_of(ep)?, ep, config, seed))
        .collect()
}

/// On-policy rollout with a stochastic agent, recording log-probabilities,
/// values and shaped rewards.
pub fn collect_rollout(model: &std::sync::Arc<TsgmModel>, world: &World, episode: &Episode, max_steps: usize, seed: u64) -> Result<Trajectory> {
    let field = world.distance_field(episode.goal.cell());
    let dist = |pose: &crate::gridsim::Pose| field[pose.y * world.width() + pose.x] as f64 * CELL_SIZE;
    let mut agent = TsgmAgent::new(std::sync::Arc::clone(model), SampleMode::Stochastic, seed);
    agent.start(&episode.goal_feature, episode.id);
    let mut obs_rng = observation_rng(seed, episode);
    let mut traj = Trajectory::new(episode);
    let mut pose = episode.start;
    for _ in 0..max_steps {
        let obs = observe(world, &pose, &mut obs_rng)?;
        let d = agent.decide(&obs.image, &obs.detections)?;
        let dt = dist(&pose);
        traj.oracle.push(oracle_action_with_field(world, &field, &pose)?);
        traj.progress.push(progress_target(episode.geodesic, dt));
        traj.goal_flag.push(goal_target(dt));
        traj.old_log_probs.push(log_prob(&d.logits, d.action));
        traj.values.push(d.value);
        traj.steps.push(RecordedStep {
            image: obs.image,
            detections: obs.detections,
            action: d.action,
        });
        if d.action == Action::Stop {
            traj.rewards.push(compute_reward(dt, dt, dt <= SUCCESS_RADIUS));
            break;
        }
        pose = step_env(world, &pose, d.action);
        traj.rewards.push(compute_reward(dt, dist(&pose), false));
    }
    Ok(traj)
}

fn squared_error(tape: &mut Tape, pred: Var, target: f64) -> Var {
    let diff = tape.affine(pred, 1.0, -target);
    tape.mul(diff, diff)
}

fn aux_loss_t(tape: &mut Tape, st: &StepTape, progress: f64, goal: f64) -> Var {
    let a = squared_error(tape, st.progress, progress);
    let b = squared_error(tape, st.goal, goal);
    tape.add(a, b)
}

fn action_log_prob_t(tape: &mut Tape, logits: Var, action: Action) -> Var {
    let lp = tape.log_softmax_rows(logits);
    tape.pick(lp, 0, action.index())
}

fn sum_vars(tape: &mut Tape, vars: Vec<Var>) -> Result<Var> {
    let mut it = vars.into_iter();
    let first = it.next().ok_or_else(|| TsgmError::invalid("empty trajectory"))?;
    Ok(it.fold(first, |acc, v| tape.add(acc, v)))
}

/// Sum over the episode of the per-step behaviour-cloning loss.
pub(crate) fn bc_episode_loss_t(model: &TsgmModel, tape: &mut Tape, p: &crate::params::BoundParams, traj: &Trajectory, lambda: f64) -> Result<Var> {
    let steps = model.episode_t(tape, p, &traj.steps, &traj.goal, model.config.ablation)?;
    let mut terms = Vec::with_capacity(steps.len());
    for (t, st) in steps.iter().enumerate() {
        let lp = action_log_prob_t(tape, st.logits, traj.oracle[t]);
        let aux = aux_loss_t(tape, st, traj.progress[t], traj.goal_flag[t]);
        terms.push(tape.affine(aux, lambda, 0.0));
        terms.push(tape.scale(lp, -1.0));
    }
    sum_vars(tape, terms)
}

/// Sum over the episode of the per-step PPO loss, given advantages and returns.
pub(crate) fn ppo_episode_loss_t(
    model: &TsgmModel,
    tape: &mut Tape,
    p: &crate::params::BoundParams,
    traj: &Trajectory,
    advantages: &[f64],
    returns: &[f64],
    config: &TrainConfig,
) -> Result<Var> {
    let steps = model.episode_t(tape, p, &traj.steps, &traj.goal, model.config.ablation)?;
    let eps = config.clip_epsilon;
    let mut terms = Vec::with_capacity(3 * steps.len());
    for (t, st) in steps.iter().enumerate() {
        let lp = action_log_prob_t(tape, st.logits, traj.steps[t].action);
        let log_ratio = tape.affine(lp, 1.0, -traj.old_log_probs[t]);
        let ratio = tape.exp(log_ratio);
        let clipped = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
        let a = tape.scale(ratio, advantages[t]);
        let b = tape.scale(clipped, advantages[t]);
        let surr = tape.minimum(a, b);
        terms.push(tape.scale(surr, -1.0));
        let v = squared_error(tape, st.value, returns[t]);
        terms.push(tape.scale(v, config.value_coef));
        let aux = aux_loss_t(tape, st, traj.progress[t], traj.goal_flag[t]);
        terms.push(tape.scale(aux, config.lambda));
    }
    sum_vars(tape, terms)
}

/// `(summed loss, steps, gradients)` of one trajectory.
fn trajectory_gradients(model: &TsgmModel, traj: &Trajectory, loss: &LossKind<'_>) -> Result<(f64, usize, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let out = match loss {
        LossKind::Bc { lambda } => bc_episode_loss_t(model, &mut tape, &p, traj, *lambda)?,
        LossKind::Ppo { config, advantages, returns } => ppo_episode_loss_t(model, &mut tape, &p, traj, advantages, returns, config)?,
    };
    let grads = tape.backward(out);
    let mut acc = model.store.zeros_like();
    p.accumulate(&grads, &mut acc);
    Ok((tape.scalar(out), traj.len(), acc))
}

/// Summed behaviour-cloning loss of one trajectory and its reverse-mode gradient.
pub fn bc_trajectory_gradients(model: &TsgmModel, traj: &Trajectory, lambda: f64) -> Result<(f64, Vec<Matrix>)> {
    let (loss, _, grads) = trajectory_gradients(model, traj, &LossKind::Bc { lambda })?;
    Ok((loss, grads))
}

/// Summed PPO loss (surrogate, value, auxiliary) of one trajectory and its gradient.
pub fn ppo_trajectory_gradients(
    model: &TsgmModel,
    traj: &Trajectory,
    advantages: &[f64],
    returns: &[f64],
    config: &TrainConfig,
) -> Result<(f64, Vec<Matrix>)> {
    if advantages.len() != traj.len() || returns.len() != traj.len() {
        return Err(TsgmError::invalid("advantages and returns must match the trajectory length"));
    }
    let (loss, _, grads) = trajectory_gradients(model, traj, &LossKind::Ppo { config, advantages, returns })?;
    Ok((loss, grads))
}

enum LossKind<'a> {
    Bc { lambda: f64 },
    Ppo { config: &'a TrainConfig, advantages: &'a [f64], returns: &'a [f64] },
}

/// Mean per-step behaviour-cloning loss of a dataset (no update).
pub fn bc_dataset_loss(model: &TsgmModel, data: &[Trajectory], lambda: f64) -> Result<f64> {
    let parts = data
        .par_iter()
        .map(|traj| {
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape);
            let out = bc_episode_loss_t(model, &mut tape, &p, traj, lambda)?;
            Ok((tape.scalar(out), traj.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (sum, n) = parts.iter().fold((0.0, 0), |(s, n), (l, k)| (s + l, n + k));
    if n == 0 {
        return Err(TsgmError::invalid("behaviour-cloning loss of an empty dataset"));
    }
    Ok(sum / n as f64)
}

/// Mean-per-step loss and gradient over a batch; gradients are summed in
/// trajectory order so results do not depend on the thread count.
fn batch_step(model: &mut TsgmModel, adam: &mut Adam, batch: &[(&Trajectory, LossKind<'_>)], grad_clip: f64) -> Result<f64>
where
    for<'a> LossKind<'a>: Sync,
{
    let parts = batch
        .par_iter()
        .map(|(traj, kind)| trajectory_gradients(model, traj, kind))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = model.store.zeros_like();
    let (mut loss, mut steps) = (0.0, 0);
    for (l, n, g) in &parts {
        loss += l;
        steps += n;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.add_assign(gi);
        }
    }
    if steps == 0 {
        return Ok(0.0);
    }
    let scale = 1.0 / steps as f64;
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|x| *x *= scale);
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TsgmError::Numerical("non-finite gradient".into()));
    }
    clip_grad_norm(&mut grads, grad_clip);
    adam.step(&mut model.store, &grads);
    Ok(loss / steps as f64)
}

/// One pass over `data` in shuffled minibatches. Returns the step-weighted
/// mean of the minibatch losses seen during the pass.
pub fn bc_epoch(model: &mut TsgmModel, adam: &mut Adam, data: &[Trajectory], config: &TrainConfig, rng: &mut impl Rng) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let (mut total, mut steps) = (0.0, 0usize);
    for chunk in order.chunks(config.batch_episodes) {
        let batch: Vec<_> = chunk.iter().map(|&i| (&data[i], LossKind::Bc { lambda: config.lambda })).collect();
        let n: usize = chunk.iter().map(|&i| data[i].len()).sum();
        total += batch_step(model, adam, &batch, config.grad_clip)? * n as f64;
        steps += n;
    }
    Ok(if steps == 0 { 0.0 } else { total / steps as f64 })
}

/// Collects `config.ppo_rollouts` rollouts on episodes drawn from `suite` and
/// runs the clipped-surrogate updates. Returns the mean per-step loss.
pub fn ppo_epoch(model: &mut TsgmModel, adam: &mut Adam, suite: &Suite, config: &TrainConfig, rng: &mut impl Rng) -> Result<f64> {
    if suite.episodes.is_empty() {
        return Err(TsgmError::invalid("ppo needs at least one training episode"));
    }
    let shared = std::sync::Arc::new(model.clone());
    let picks: Vec<(usize, u64)> = (0..config.ppo_rollouts)
        .map(|_| (rng.random_range(0..suite.episodes.len()), rng.random()))
        .collect();
    let rollouts = picks
        .par_iter()
        .map(|&(i, seed)| {
            let ep = &suite.episodes[i];
            collect_rollout(&shared, suite.world_of(ep)?, ep, config.rollout_max_steps, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let estimates = rollouts
        .iter()
        .map(|r| gae(&r.rewards, &r.values, 0.0, config.gamma, config.gae_lambda))
        .collect::<Result<Vec<_>>>()?;

    let (mut total, mut steps) = (0.0, 0usize);
    for _ in 0..config.ppo_update_passes {
        let mut order: Vec<usize> = (0..rollouts.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_episodes) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    (
                        &rollouts[i],
                        LossKind::Ppo {
                            config,
                            advantages: &estimates[i].0,
                            returns: &estimates[i].1,
                        },
                    )
                })
                .collect();
            let n: usize = chunk.iter().map(|&i| rollouts[i].len()).sum();
            total += batch_step(model, adam, &batch, config.grad_clip)? * n as f64;
            steps += n;
        }
    }
    Ok(if steps == 0 { 0.0 } else { total / steps as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Bc,
    Ppo,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Init => "init",
            Phase::Bc => "bc",
            Phase::Ppo => "ppo",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Global epoch counter across phases; 0 is the initial model.
    pub epoch: usize,
    pub phase: Phase,
    pub loss: Option<f64>,
    pub eval: Option<Metrics>,
}

/// Evaluation settings used by the trainer between epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub max_steps: usize,
    pub seed: u64,
    pub mode: SampleMode,
}

pub fn evaluate_model(model: &TsgmModel, suite: &Suite, settings: &EvalSettings) -> Result<Metrics> {
    let agent = TsgmAgent::new(std::sync::Arc::new(model.clone()), settings.mode, settings.seed);
    Ok(evaluate(&agent, suite, settings.max_steps, settings.seed, false)?.metrics)
}

/// Behaviour cloning followed by PPO finetuning. `on_epoch` sees the model
/// after every epoch (including the initial one) and may write checkpoints.
pub fn train(
    model: &mut TsgmModel,
    train_suite: &Suite,
    val_suite: &Suite,
    config: &TrainConfig,
    eval: &EvalSettings,
    seed: u64,
    mut on_epoch: impl FnMut(&TsgmModel, &EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7EA1);
    let mut records = Vec::new();
    let mut emit = |model: &TsgmModel, rec: EpochRecord, records: &mut Vec<EpochRecord>| -> Result<()> {
        on_epoch(model, &rec)?;
        records.push(rec);
        Ok(())
    };
    let wants_eval = |k: usize, last: usize| (config.eval_every > 0 && k.is_multiple_of(config.eval_every)) || k == last;

    emit(
        model,
        EpochRecord {
            epoch: 0,
            phase: Phase::Init,
            loss: None,
            eval: None,
        },
        &mut records,
    )?;

    let mut epoch = 0;
    if config.bc_epochs > 0 {
        let data = collect_bc_dataset(train_suite, config, seed)?;
        let mut adam = Adam::new(&model.store, config.bc_learning_rate).scale_group(&model.store, "mixer.", config.mixer_lr_scale);
        for k in 1..=config.bc_epochs {
            let loss = bc_epoch(model, &mut adam, &data, config, &mut rng)?;
            epoch += 1;
            let metrics = if wants_eval(k, config.bc_epochs) {
                Some(evaluate_model(model, val_suite, eval)?)
            } else {
                None
            };
            emit(
                model,
                EpochRecord {
                    epoch,
                    phase: Phase::Bc,
                    loss: Some(loss),
                    eval: metrics,
                },
                &mut records,
            )?;
        }
    }
    if config.ppo_epochs > 0 {
        let mut adam = Adam::new(&model.store, config.ppo_learning_rate).scale_group(&model.store, "mixer.", config.mixer_lr_scale);
        for k in 1..=config.ppo_epochs {
            let loss = ppo_epoch(model, &mut adam, train_suite, config, &mut rng)?;
            epoch += 1;
            let metrics = if wants_eval(k, config.ppo_epochs) {
                Some(evaluate_model(model, val_suite, eval)?)
            } else {
                None
            };
            emit(
                model,
                EpochRecord {
                    epoch,
                    phase: Phase::Ppo,
                    loss: Some(loss),
                    eval: metrics,
                },
                &mut records,
            )?;
        }
    }
    Ok(records)
}
