//! Recurrent deterministic policy gradient agent with demonstration replay and
//! Q-filtered behavior cloning.
//!
//! The critic is trained on bootstrapped one-step targets
//! `y_t = r_t + gamma * Q'(h'_{t+1}, mu'(h'_{t+1}))` (with `y_T = r_T`) computed by
//! the target networks unrolled over the same episode. The actor follows the
//! mixed gradient `lambda1 * g_J + lambda2 * g_BC`, where `g_J` descends
//! `-mean Q(h, mu(h))` and `g_BC` descends the behavior-cloning loss.

mod networks;
mod training;

pub use networks::{
    episode_inputs, step_input, ActorNet, ActorTape, CriticNet, CriticTape, HeadCache, NetShape,
};
pub use training::{resume, train, Ablation, TrainLog, TrainOutcome, CHECKPOINT_FILE, REPLAY_FILE};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    read_u32, read_u64, AdamConfig, CellCache, CellKind, Gradients, NnError, ParamStore,
};
use crate::replay::{Episode, PrioritizedBuffer, ReplayError};
use crate::simulator::{Decision, DecisionContext, Policy, SimError};

const CHECKPOINT_MAGIC: &[u8; 8] = b"QTLABCKP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite observation")]
    NonFiniteObservation,
    #[error("observation has {found} values, network expects {expected}")]
    ObservationDim { expected: usize, found: usize },
    #[error("training diverged at step {step}: {stats}")]
    Diverged { step: u64, stats: String },
    #[error("pretraining requires demonstration episodes")]
    NoDemos,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BcForm {
    /// Squared distance to the expert one-hot, gated by the Q-filter.
    QfilterMse,
    /// `-max(0, Q(h, expert) - Q(h, mu(h)))`, differentiated through `mu`.
    NegatedAdvantage,
}

/// Source of expert labels on demonstration episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoLabels {
    /// Every step labeled with the demonstrator's own action.
    Demonstrator,
    /// Intra-day hindsight expert, as for agent episodes.
    Hindsight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplorationKind {
    /// Resample the action vector from a Dirichlet centred on the actor output.
    Dirichlet,
    /// Add Gaussian noise to the actor logits.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplorationConfig {
    pub kind: ExplorationKind,
    /// Dirichlet concentration at the start and end of training (higher is less noisy).
    pub concentration_start: f64,
    pub concentration_end: f64,
    pub logit_sigma_start: f64,
    pub logit_sigma_end: f64,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            kind: ExplorationKind::Dirichlet,
            concentration_start: 4.0,
            concentration_end: 40.0,
            logit_sigma_start: 1.0,
            logit_sigma_end: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    /// Minimum share of demonstration episodes in each online batch.
    pub demo_fraction: f64,
    pub seed: u64,
    pub cell: CellKind,
    pub hidden_dim: usize,
    pub critic_head_dim: usize,
    /// Global-norm gradient clip per network; 0 disables.
    pub grad_clip: f64,
    pub bc_form: BcForm,
    pub demo_labels: DemoLabels,
    /// Apply the Q-filter during pretraining as well as online.
    pub pretrain_qfilter: bool,
    /// Environment rollouts (one trading day each) in the online phase.
    pub rollouts: usize,
    pub updates_per_rollout: usize,
    /// Checkpoint every this many rollouts; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub exploration: ExplorationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            lr_actor: 1e-4,
            lr_critic: 1e-3,
            lambda1: 1.0,
            lambda2: 0.5,
            batch_size: 16,
            pretrain_steps: 2000,
            demo_fraction: 0.25,
            seed: 0,
            cell: CellKind::Gru,
            hidden_dim: 32,
            critic_head_dim: 32,
            grad_clip: 1.0,
            bc_form: BcForm::QfilterMse,
            demo_labels: DemoLabels::Demonstrator,
            pretrain_qfilter: false,
            rollouts: 200,
            updates_per_rollout: 2,
            checkpoint_every: 50,
            exploration: ExplorationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be >= 0");
        }
        if !(self.lr_actor > 0.0 && self.lr_critic > 0.0) {
            return bad("learning rates must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.demo_fraction) {
            return bad("demo_fraction must lie in [0, 1]");
        }
        if self.hidden_dim == 0 || self.critic_head_dim == 0 {
            return bad("network dimensions must be >= 1");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Online,
}

/// `(episode id, mean |TD residual|, mean |dQ/da|)` used to refresh a priority.
pub type PriorityTerms = (u64, f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub step: u64,
    pub phase: Phase,
    pub critic_loss: f64,
    pub actor_obj: f64,
    pub bc_loss: f64,
    /// Fraction of labeled steps that passed the Q-filter.
    pub bc_active: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
    pub mean_td_error: f64,
    pub demos_in_batch: usize,
    pub sampled_ids: Vec<u64>,
}

/// Per-episode tensors reused across the passes of one update.
struct Prepared<'a> {
    episode: &'a Episode,
    weight: f64,
    inputs: Vec<Vec<f64>>,
    actions: Vec<[f64; 2]>,
}

impl<'a> Prepared<'a> {
    fn new(episode: &'a Episode, weight: f64) -> Self {
        let obs: Vec<&[f64]> = episode
            .steps
            .iter()
            .map(|s| s.observation.as_slice())
            .collect();
        let actions: Vec<[f64; 2]> = episode.steps.iter().map(|s| s.action).collect();
        Self {
            episode,
            weight,
            inputs: episode_inputs(&obs, &actions),
            actions,
        }
    }

    fn len(&self) -> usize {
        self.actions.len()
    }
}

/// Actor-side gradients for one batch, kept separate so they can be mixed.
#[derive(Debug, Clone)]
pub struct ActorGradients {
    /// Gradient of `-mean Q(h, mu(h))`.
    pub policy: Gradients,
    /// Gradient of the behavior-cloning loss.
    pub bc: Gradients,
    pub actor_obj: f64,
    pub bc_loss: f64,
    pub labeled_steps: usize,
    pub active_steps: usize,
}

pub fn one_hot(sign: i8) -> [f64; 2] {
    if sign >= 0 {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    }
}

/// Executed sign for a probability vector; ties go long.
pub fn greedy_sign(probs: [f64; 2]) -> i8 {
    if probs[0] >= probs[1] {
        1
    } else {
        -1
    }
}

#[derive(Debug, Clone)]
pub struct Agent {
    shape: NetShape,
    config: TrainConfig,
    actor: ActorNet,
    critic: CriticNet,
    actor_params: ParamStore,
    critic_params: ParamStore,
    target_actor: ParamStore,
    target_critic: ParamStore,
    rng: ChaCha8Rng,
    step: u64,
}

impl Agent {
    pub fn new(obs_dim: usize, config: TrainConfig) -> Result<Self, AgentError> {
        config.validate()?;
        let shape = NetShape {
            obs_dim,
            cell: config.cell,
            hidden_dim: config.hidden_dim,
            critic_head_dim: config.critic_head_dim,
        };
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (actor, actor_params) = ActorNet::build(&shape, &mut init_rng)?;
        let (critic, critic_params) = CriticNet::build(&shape, &mut init_rng)?;
        Ok(Self {
            shape,
            actor,
            critic,
            target_actor: actor_params.clone(),
            target_critic: critic_params.clone(),
            actor_params,
            critic_params,
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9E37_79B9)),
            config,
            step: 0,
        })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: TrainConfig) -> Result<(), AgentError> {
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn actor_net(&self) -> &ActorNet {
        &self.actor
    }

    pub fn critic_net(&self) -> &CriticNet {
        &self.critic
    }

    pub fn actor_params(&self) -> &ParamStore {
        &self.actor_params
    }

    pub fn actor_params_mut(&mut self) -> &mut ParamStore {
        &mut self.actor_params
    }

    pub fn critic_params(&self) -> &ParamStore {
        &self.critic_params
    }

    pub fn critic_params_mut(&mut self) -> &mut ParamStore {
        &mut self.critic_params
    }

    pub fn target_actor_params(&self) -> &ParamStore {
        &self.target_actor
    }

    pub fn target_critic_params(&self) -> &ParamStore {
        &self.target_critic
    }

    /// Copies the online networks into the targets.
    pub fn sync_targets(&mut self) -> Result<(), AgentError> {
        self.target_actor.copy_values_from(&self.actor_params)?;
        self.target_critic.copy_values_from(&self.critic_params)?;
        Ok(())
    }

    pub fn soft_update_targets(&mut self) -> Result<(), AgentError> {
        self.target_actor
            .soft_update(&self.actor_params, self.config.tau)?;
        self.target_critic
            .soft_update(&self.critic_params, self.config.tau)?;
        Ok(())
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// One recurrent step of the online actor. Returns the probabilities, the
    /// executed sign and the next history state.
    pub fn act(
        &self,
        state: &[f64],
        observation: &[f64],
        prev_action: [f64; 2],
    ) -> Result<([f64; 2], i8, Vec<f64>), AgentError> {
        if observation.len() != self.shape.obs_dim {
            return Err(AgentError::ObservationDim {
                expected: self.shape.obs_dim,
                found: observation.len(),
            });
        }
        if observation.iter().any(|x| !x.is_finite()) {
            return Err(AgentError::NonFiniteObservation);
        }
        let input = step_input(observation, prev_action);
        let (probs, next) = self.actor.step(self.actor_params.params(), state, &input)?;
        Ok((probs, greedy_sign(probs), next))
    }

    pub fn initial_state(&self) -> Vec<f64> {
        self.actor.zero_state()
    }

    fn check_episode(&self, episode: &Episode) -> Result<(), AgentError> {
        let found = episode.observation_dim();
        if found != self.shape.obs_dim {
            return Err(AgentError::ObservationDim {
                expected: self.shape.obs_dim,
                found,
            });
        }
        Ok(())
    }

    /// Bootstrapped targets from the target networks, one vector per episode.
    pub fn critic_targets(&self, episodes: &[&Episode]) -> Result<Vec<Vec<f64>>, AgentError> {
        episodes
            .iter()
            .map(|ep| {
                self.check_episode(ep)?;
                let prepared = Prepared::new(ep, 1.0);
                self.targets_for(&prepared)
            })
            .collect()
    }

    fn targets_for(&self, ep: &Prepared<'_>) -> Result<Vec<f64>, AgentError> {
        let n = ep.len();
        let rewards: Vec<f64> = ep.episode.steps.iter().map(|s| s.reward).collect();
        if self.config.gamma == 0.0 {
            return Ok(rewards);
        }
        let ta = self.target_actor.params();
        let tc = self.target_critic.params();
        let target_actions = self.actor.forward(ta, &ep.inputs)?.probs;
        let cells = self.critic.recurrent(tc, &ep.inputs)?;
        let hd = self.shape.hidden_dim;
        Ok((0..n)
            .map(|t| {
                if t + 1 == n {
                    rewards[t]
                } else {
                    let next = self
                        .critic
                        .head(tc, cells[t + 1].hidden(hd), target_actions[t + 1]);
                    rewards[t] + self.config.gamma * next.q
                }
            })
            .collect())
    }

    /// Critic recurrent outputs for each prepared episode under the online critic.
    fn critic_cells(&self, batch: &[Prepared<'_>]) -> Result<Vec<Vec<CellCache>>, AgentError> {
        let p = self.critic_params.params();
        batch
            .iter()
            .map(|ep| {
                self.critic
                    .recurrent(p, &ep.inputs)
                    .map_err(AgentError::from)
            })
            .collect()
    }

    /// Separate policy-gradient and behavior-cloning gradients for the actor.
    /// `use_qfilter=false` applies cloning at every labeled step.
    fn actor_gradients_prepared(
        &self,
        batch: &[Prepared<'_>],
        critic_cells: &[Vec<CellCache>],
        use_qfilter: bool,
    ) -> Result<ActorGradients, AgentError> {
        let ap = self.actor_params.params();
        let cp = self.critic_params.params();
        let hd = self.shape.hidden_dim;
        let b = batch.len() as f64;
        let mut policy = Gradients::zeros_like(ap);
        let mut bc = Gradients::zeros_like(ap);
        let mut actor_obj = 0.0;
        let mut bc_loss = 0.0;
        let mut labeled_steps = 0;
        let mut active_steps = 0;

        for (ep, cells) in batch.iter().zip(critic_cells) {
            let tape = self.actor.forward(ap, &ep.inputs)?;
            let n = ep.len();
            let scale = ep.weight / (b * n as f64);
            let mut d_policy = vec![[0.0; 2]; n];
            let mut d_bc = vec![[0.0; 2]; n];
            let mut any_bc = false;
            for t in 0..n {
                let h = cells[t].hidden(hd);
                let mu = tape.probs[t];
                let head = self.critic.head(cp, h, mu);
                let dq_da = self.critic.action_gradient(cp, &head);
                actor_obj += scale * head.q;
                d_policy[t] = [-scale * dq_da[0], -scale * dq_da[1]];

                let Some(label) = ep.episode.steps[t].expert else {
                    continue;
                };
                labeled_steps += 1;
                let target = one_hot(label);
                let expert_q = self.critic.head(cp, h, target).q;
                let advantage = expert_q - head.q;
                let gate = !use_qfilter || advantage > 0.0;
                if !gate {
                    continue;
                }
                active_steps += 1;
                any_bc = true;
                match self.config.bc_form {
                    BcForm::QfilterMse => {
                        let diff = [mu[0] - target[0], mu[1] - target[1]];
                        bc_loss += scale * (diff[0] * diff[0] + diff[1] * diff[1]);
                        d_bc[t] = [2.0 * scale * diff[0], 2.0 * scale * diff[1]];
                    }
                    BcForm::NegatedAdvantage => {
                        bc_loss -= scale * advantage.max(0.0);
                        if advantage > 0.0 {
                            d_bc[t] = [scale * dq_da[0], scale * dq_da[1]];
                        }
                    }
                }
            }
            self.actor.backward(ap, &mut policy, &tape, &d_policy)?;
            if any_bc {
                self.actor.backward(ap, &mut bc, &tape, &d_bc)?;
            }
        }
        Ok(ActorGradients {
            policy,
            bc,
            actor_obj,
            bc_loss,
            labeled_steps,
            active_steps,
        })
    }

    /// Actor gradients for `(episode, importance weight)` pairs under the current critic.
    pub fn actor_gradients(
        &self,
        batch: &[(&Episode, f64)],
        use_qfilter: bool,
    ) -> Result<ActorGradients, AgentError> {
        for (ep, _) in batch {
            self.check_episode(ep)?;
        }
        let prepared: Vec<Prepared<'_>> = batch.iter().map(|&(e, w)| Prepared::new(e, w)).collect();
        let cells = self.critic_cells(&prepared)?;
        self.actor_gradients_prepared(&prepared, &cells, use_qfilter)
    }

    /// `lambda1 * g_J + lambda2 * g_BC`. The cloning term is skipped entirely when
    /// it is inactive, so the result is then bitwise the policy-only gradient.
    pub fn mix_actor_gradients(&self, grads: &ActorGradients) -> Gradients {
        let mut mixed = grads.policy.clone();
        mixed.scale(self.config.lambda1);
        if self.config.lambda2 != 0.0 && grads.active_steps > 0 {
            mixed.add_scaled(&grads.bc, self.config.lambda2);
        }
        mixed
    }

    /// One update from a sampled batch: critic, actor, targets, priorities.
    pub fn train_step(
        &mut self,
        buffer: &mut PrioritizedBuffer,
        phase: Phase,
    ) -> Result<TrainStats, AgentError> {
        let batch_size = self.config.batch_size;
        let samples: Vec<(Episode, f64)> = {
            let draws = match phase {
                Phase::Pretrain => buffer.sample_demos(batch_size, &mut self.rng)?,
                Phase::Online => {
                    let min_demos = (self.config.demo_fraction * batch_size as f64).ceil() as usize;
                    buffer.sample_with_demo_floor(batch_size, min_demos, &mut self.rng)?
                }
            };
            draws
                .into_iter()
                .map(|s| (s.episode.clone(), s.weight))
                .collect()
        };
        let batch: Vec<(&Episode, f64)> = samples.iter().map(|(e, w)| (e, *w)).collect();
        let use_qfilter = phase == Phase::Online || self.config.pretrain_qfilter;
        let (stats, priorities) = self.update(&batch, phase, use_qfilter)?;
        for (id, td, grad) in priorities {
            // an id may repeat within a batch; the last update wins
            buffer.update_priority(id, td, grad)?;
        }
        Ok(stats)
    }

    /// The update itself on an explicit batch. Returns stats and, per sampled
    /// episode, `(id, mean |TD residual|, mean |dQ/da|)` for the priority.
    pub fn update(
        &mut self,
        batch: &[(&Episode, f64)],
        phase: Phase,
        use_qfilter: bool,
    ) -> Result<(TrainStats, Vec<PriorityTerms>), AgentError> {
        for (ep, _) in batch {
            self.check_episode(ep)?;
        }
        let prepared: Vec<Prepared<'_>> = batch.iter().map(|&(e, w)| Prepared::new(e, w)).collect();
        let b = prepared.len() as f64;
        let targets: Vec<Vec<f64>> = prepared
            .iter()
            .map(|ep| self.targets_for(ep))
            .collect::<Result<_, _>>()?;

        // critic
        let mut critic_grads = Gradients::zeros_like(self.critic_params.params());
        let mut critic_loss = 0.0;
        let mut td_total = 0.0;
        let mut td_count = 0usize;
        let mut priorities = Vec::with_capacity(prepared.len());
        {
            let cp = self.critic_params.params();
            for (ep, y) in prepared.iter().zip(&targets) {
                let tape = self.critic.forward(cp, &ep.inputs, &ep.actions)?;
                let n = ep.len() as f64;
                let scale = ep.weight / (b * n);
                let mut dq = Vec::with_capacity(ep.len());
                let mut abs_td = 0.0;
                let mut grad_mag = 0.0;
                for (head, &yt) in tape.heads.iter().zip(y) {
                    let resid = head.q - yt;
                    critic_loss += scale * resid * resid;
                    dq.push(2.0 * scale * resid);
                    abs_td += resid.abs();
                    let da = self.critic.action_gradient(cp, head);
                    grad_mag += (da[0] * da[0] + da[1] * da[1]).sqrt();
                }
                td_total += abs_td;
                td_count += ep.len();
                priorities.push((ep.episode.id, abs_td / n, grad_mag / n));
                self.critic.backward(cp, &mut critic_grads, &tape, &dq)?;
            }
        }
        let critic_grad_norm = critic_grads.clip_norm(self.config.grad_clip);
        if !critic_loss.is_finite() || !critic_grad_norm.is_finite() {
            return Err(self.diverged(critic_loss, f64::NAN, f64::NAN));
        }
        self.critic_params.set_grads(critic_grads)?;
        self.critic_params
            .adam_step(&AdamConfig::with_lr(self.config.lr_critic))?;

        // actor, against the updated critic
        let cells = self.critic_cells(&prepared)?;
        let grads = self.actor_gradients_prepared(&prepared, &cells, use_qfilter)?;
        let mut mixed = self.mix_actor_gradients(&grads);
        let actor_grad_norm = mixed.clip_norm(self.config.grad_clip);
        if !grads.actor_obj.is_finite()
            || !grads.bc_loss.is_finite()
            || !actor_grad_norm.is_finite()
        {
            return Err(self.diverged(critic_loss, grads.actor_obj, grads.bc_loss));
        }
        self.actor_params.set_grads(mixed)?;
        self.actor_params
            .adam_step(&AdamConfig::with_lr(self.config.lr_actor))?;

        self.soft_update_targets()?;
        self.step += 1;

        let stats = TrainStats {
            step: self.step,
            phase,
            critic_loss,
            actor_obj: grads.actor_obj,
            bc_loss: grads.bc_loss,
            bc_active: if grads.labeled_steps == 0 {
                0.0
            } else {
                grads.active_steps as f64 / grads.labeled_steps as f64
            },
            actor_grad_norm,
            critic_grad_norm,
            mean_td_error: td_total / td_count.max(1) as f64,
            demos_in_batch: batch.iter().filter(|(e, _)| e.is_demo).count(),
            sampled_ids: batch.iter().map(|(e, _)| e.id).collect(),
        };
        Ok((stats, priorities))
    }

    fn diverged(&self, critic_loss: f64, actor_obj: f64, bc_loss: f64) -> AgentError {
        AgentError::Diverged {
            step: self.step,
            stats: format!(
                "critic_loss={critic_loss} actor_obj={actor_obj} bc_loss={bc_loss} critic_params_finite={} actor_params_finite={}",
                self.critic_params.check_finite().is_ok(),
                self.actor_params.check_finite().is_ok()
            ),
        }
    }

    /// Runs `steps` updates sampling demonstrations only.
    pub fn pretrain(
        &mut self,
        buffer: &mut PrioritizedBuffer,
        steps: usize,
    ) -> Result<Vec<TrainStats>, AgentError> {
        if steps == 0 {
            return Ok(Vec::new());
        }
        if buffer.demo_count() == 0 {
            return Err(AgentError::NoDemos);
        }
        (0..steps)
            .map(|_| self.train_step(buffer, Phase::Pretrain))
            .collect()
    }

    /// Teacher-forced greedy actions of the online actor over an episode.
    pub fn greedy_actions(&self, episode: &Episode) -> Result<Vec<i8>, AgentError> {
        self.check_episode(episode)?;
        let prepared = Prepared::new(episode, 1.0);
        let tape = self
            .actor
            .forward(self.actor_params.params(), &prepared.inputs)?;
        Ok(tape.probs.into_iter().map(greedy_sign).collect())
    }

    /// Share of steps whose teacher-forced greedy action matches the recorded sign.
    pub fn agreement(&self, episodes: &[Episode]) -> Result<f64, AgentError> {
        let mut hits = 0usize;
        let mut total = 0usize;
        for ep in episodes {
            let actions = self.greedy_actions(ep)?;
            hits += actions
                .iter()
                .zip(&ep.steps)
                .filter(|(a, s)| **a == s.sign)
                .count();
            total += ep.len();
        }
        Ok(if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        })
    }

    /// Greedy policy for backtests.
    pub fn greedy_policy(&self) -> ActorPolicy<'_> {
        ActorPolicy::new(self, None)
    }

    /// Binary checkpoint: magic, version, JSON header (shape, config, step), then
    /// the actor, critic, target actor and target critic parameter stores.
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<(), AgentError> {
        let header = serde_json::to_vec(&CheckpointHeader {
            shape: self.shape,
            config: self.config.clone(),
            step: self.step,
        })
        .map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for store in [
            &self.actor_params,
            &self.critic_params,
            &self.target_actor,
            &self.target_critic,
        ] {
            store.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self, AgentError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(AgentError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(AgentError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let len = read_u64(r)? as usize;
        if len > 1 << 24 {
            return Err(AgentError::Checkpoint("header too large".into()));
        }
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        let mut agent = Agent::new(header.shape.obs_dim, header.config)?;
        agent.actor_params = ParamStore::read_from(r)?;
        agent.critic_params = ParamStore::read_from(r)?;
        agent.target_actor = ParamStore::read_from(r)?;
        agent.target_critic = ParamStore::read_from(r)?;
        let fresh = Agent::new(header.shape.obs_dim, agent.config.clone())?;
        for (loaded, expected) in [
            (&agent.actor_params, &fresh.actor_params),
            (&agent.critic_params, &fresh.critic_params),
            (&agent.target_actor, &fresh.actor_params),
            (&agent.target_critic, &fresh.critic_params),
        ] {
            let same = loaded.tensors().len() == expected.tensors().len()
                && loaded
                    .tensors()
                    .iter()
                    .zip(expected.tensors())
                    .all(|(a, b)| a.name == b.name && a.shape == b.shape);
            if !same {
                return Err(AgentError::Checkpoint(
                    "tensor table does not match the network shape".into(),
                ));
            }
        }
        agent.step = header.step;
        agent.rng = ChaCha8Rng::seed_from_u64(
            agent
                .config
                .seed
                .wrapping_add(0x9E37_79B9)
                .wrapping_add(header.step),
        );
        Ok(agent)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AgentError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AgentError> {
        Self::read_checkpoint(&mut BufReader::new(File::open(path)?))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    shape: NetShape,
    config: TrainConfig,
    step: u64,
}

/// Exploration noise applied to actor outputs during rollouts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Noise {
    Dirichlet { concentration: f64 },
    Gaussian { sigma: f64 },
}

impl Noise {
    /// Noise level for training progress `frac` in [0, 1], interpolated geometrically.
    pub fn scheduled(cfg: &ExplorationConfig, frac: f64) -> Self {
        let frac = frac.clamp(0.0, 1.0);
        let interp = |a: f64, b: f64| {
            if a > 0.0 && b > 0.0 {
                a * (b / a).powf(frac)
            } else {
                a + (b - a) * frac
            }
        };
        match cfg.kind {
            ExplorationKind::Dirichlet => Noise::Dirichlet {
                concentration: interp(cfg.concentration_start, cfg.concentration_end),
            },
            ExplorationKind::Gaussian => Noise::Gaussian {
                sigma: interp(cfg.logit_sigma_start, cfg.logit_sigma_end),
            },
        }
    }

    pub fn perturb(&self, probs: [f64; 2], rng: &mut impl Rng) -> [f64; 2] {
        match *self {
            Noise::Dirichlet { concentration } => {
                // two-component Dirichlet is a Beta on the long probability
                let a = concentration * probs[0] + 1e-3;
                let b = concentration * probs[1] + 1e-3;
                match Beta::new(a, b) {
                    Ok(beta) => {
                        let p: f64 = beta.sample(rng);
                        [p, 1.0 - p]
                    }
                    Err(_) => probs,
                }
            }
            Noise::Gaussian { sigma } => {
                let z0: f64 = StandardNormal.sample(rng);
                let z1: f64 = StandardNormal.sample(rng);
                let l0 = probs[0].max(1e-12).ln() + sigma * z0;
                let l1 = probs[1].max(1e-12).ln() + sigma * z1;
                crate::nn::softmax2([l0, l1])
            }
        }
    }
}

/// Drives the online actor inside the simulator, optionally with exploration noise.
pub struct ActorPolicy<'a> {
    agent: &'a Agent,
    state: Vec<f64>,
    prev_action: [f64; 2],
    noise: Option<(Noise, &'a mut ChaCha8Rng)>,
    error: Option<AgentError>,
}

impl<'a> ActorPolicy<'a> {
    pub fn new(agent: &'a Agent, noise: Option<(Noise, &'a mut ChaCha8Rng)>) -> Self {
        Self {
            agent,
            state: agent.initial_state(),
            prev_action: [0.0; 2],
            noise,
            error: None,
        }
    }

    /// First error raised by the actor during a run, if any.
    pub fn take_error(&mut self) -> Option<AgentError> {
        self.error.take()
    }
}

impl Policy for ActorPolicy<'_> {
    fn begin_episode(&mut self) {
        self.state = self.agent.initial_state();
        self.prev_action = [0.0; 2];
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Decision {
        let obs = ctx.observation.to_vec();
        let probs = match self.agent.act(&self.state, &obs, self.prev_action) {
            Ok((probs, _, next)) => {
                self.state = next;
                probs
            }
            Err(e) => {
                self.error.get_or_insert(e);
                [0.5, 0.5]
            }
        };
        let probs = match &mut self.noise {
            Some((noise, rng)) => noise.perturb(probs, &mut **rng),
            None => probs,
        };
        self.prev_action = probs;
        Decision::from_probs(probs)
    }
}
