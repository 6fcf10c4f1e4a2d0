use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActorPolicy, Agent, AgentError, DemoLabels, Noise, Phase, TrainConfig, TrainStats};
use crate::indicators::DualThrustParams;
use crate::market_data::PriceSeries;
use crate::replay::{BufferConfig, Episode, PrioritizedBuffer};
use crate::simulator::{first_start_bar, label_with_hindsight, run_policy_from, SimConfig};

/// Which components of the full method are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// No demonstrations, no behavior cloning.
    Rdpg,
    /// Demonstrations in the buffer, no behavior cloning.
    RdpgDb,
    /// Behavior cloning on hindsight labels, no demonstrations.
    RdpgBc,
    /// Demonstrations and behavior cloning.
    Qtnet,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Rdpg,
        Ablation::RdpgDb,
        Ablation::RdpgBc,
        Ablation::Qtnet,
    ];

    pub fn uses_demos(self) -> bool {
        matches!(self, Ablation::RdpgDb | Ablation::Qtnet)
    }

    pub fn uses_bc(self) -> bool {
        matches!(self, Ablation::RdpgBc | Ablation::Qtnet)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Rdpg => "rdpg",
            Ablation::RdpgDb => "rdpg-db",
            Ablation::RdpgBc => "rdpg-bc",
            Ablation::Qtnet => "qtnet",
        }
    }

    /// Row label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Rdpg => "RDPG",
            Ablation::RdpgDb => "RDPG-DB",
            Ablation::RdpgBc => "RDPG-BC",
            Ablation::Qtnet => "QTNet",
        }
    }

    /// Checks that the cloning weight agrees with the mode.
    pub fn check(self, config: &TrainConfig) -> Result<(), AgentError> {
        if self.uses_bc() && config.lambda2 <= 0.0 {
            return Err(AgentError::InvalidConfig(format!(
                "ablation {} requires lambda2 > 0",
                self.as_str()
            )));
        }
        if !self.uses_bc() && config.lambda2 != 0.0 {
            return Err(AgentError::InvalidConfig(format!(
                "ablation {} requires lambda2 = 0",
                self.as_str()
            )));
        }
        Ok(())
    }

    /// `config` with lambda2 forced to zero for modes without cloning.
    pub fn apply(self, mut config: TrainConfig) -> TrainConfig {
        if !self.uses_bc() {
            config.lambda2 = 0.0;
        }
        config
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                format!("unknown ablation mode '{s}' (expected rdpg, rdpg-db, rdpg-bc or qtnet)")
            })
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    #[serde(flatten)]
    pub stats: TrainStats,
    /// Exploration level: Dirichlet concentration or logit sigma; 0 in pretraining.
    pub noise_level: f64,
    pub is_exponent: f64,
    pub buffer_len: usize,
    /// Profit of the most recent rollout, in account currency.
    pub rollout_profit: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub agent: Agent,
    pub buffer: PrioritizedBuffer,
    pub log: Vec<TrainLog>,
}

fn noise_level(noise: &Noise) -> f64 {
    match *noise {
        Noise::Dirichlet { concentration } => concentration,
        Noise::Gaussian { sigma } => sigma,
    }
}

/// Pretrains on demonstrations (when the mode uses them) and then alternates
/// exploratory one-day rollouts on `series` with replay updates.
///
/// `demos` are ignored for modes without demonstrations. When a checkpoint
/// directory is given the agent and buffer are written there every
/// `checkpoint_every` rollouts and at the end.
#[allow(clippy::too_many_arguments)]
pub fn train(
    series: &PriceSeries,
    sim: &SimConfig,
    dt: &DualThrustParams,
    config: TrainConfig,
    buffer_config: BufferConfig,
    ablation: Ablation,
    demos: Vec<Episode>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, AgentError> {
    sim.validate()?;
    ablation.check(&config)?;
    let mut agent = Agent::new(sim.observation_dim(), config)?;
    let config = agent.config().clone();
    let mut buffer = PrioritizedBuffer::new(buffer_config.clone())?;
    let mut log = Vec::new();

    if ablation.uses_demos() {
        if demos.is_empty() {
            return Err(AgentError::InvalidConfig(format!(
                "ablation {} requires demonstration episodes",
                ablation
            )));
        }
        for mut ep in demos {
            ep.is_demo = true;
            if config.demo_labels == DemoLabels::Hindsight {
                label_with_hindsight(series, sim.bars_per_day, &mut ep);
            }
            buffer.add(ep)?;
        }
        for _ in 0..config.pretrain_steps {
            let stats = agent.train_step(&mut buffer, Phase::Pretrain)?;
            log.push(TrainLog {
                stats,
                noise_level: 0.0,
                is_exponent: buffer.is_exponent(),
                buffer_len: buffer.len(),
                rollout_profit: 0.0,
            });
        }
    }

    online_phase(
        series,
        sim,
        dt,
        &mut agent,
        &mut buffer,
        &mut log,
        checkpoint_dir,
    )?;
    Ok(TrainOutcome { agent, buffer, log })
}

/// Continues online training of a checkpointed agent with its saved buffer.
/// Runs `agent.config().rollouts` further rollouts; step counts continue from
/// the checkpoint and the rollout generator is reseeded from the step.
pub fn resume(
    series: &PriceSeries,
    sim: &SimConfig,
    dt: &DualThrustParams,
    mut agent: Agent,
    mut buffer: PrioritizedBuffer,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, AgentError> {
    sim.validate()?;
    if agent.shape().obs_dim != sim.observation_dim() {
        return Err(AgentError::ObservationDim {
            expected: agent.shape().obs_dim,
            found: sim.observation_dim(),
        });
    }
    let mut log = Vec::new();
    online_phase(
        series,
        sim,
        dt,
        &mut agent,
        &mut buffer,
        &mut log,
        checkpoint_dir,
    )?;
    Ok(TrainOutcome { agent, buffer, log })
}

fn online_phase(
    series: &PriceSeries,
    sim: &SimConfig,
    dt: &DualThrustParams,
    agent: &mut Agent,
    buffer: &mut PrioritizedBuffer,
    log: &mut Vec<TrainLog>,
    checkpoint_dir: Option<&Path>,
) -> Result<(), AgentError> {
    let config = agent.config().clone();
    let buffer_config = buffer.config().clone();
    let nd = sim.bars_per_day;
    let first_day = first_start_bar(dt, sim) / nd;
    let last_day = series.len() / nd;
    if first_day >= last_day && config.rollouts > 0 {
        return Err(AgentError::Sim(
            crate::simulator::SimError::InsufficientData {
                required: (first_day + 1) * nd,
                available: series.len(),
            },
        ));
    }
    let mut rollout_rng = ChaCha8Rng::seed_from_u64(
        config
            .seed
            .wrapping_add(0x5EED)
            .wrapping_add(agent.step_count()),
    );
    let phi0 = buffer_config.is_exponent;
    let phi1 = buffer_config.is_exponent_final;

    for r in 0..config.rollouts {
        let frac = if config.rollouts > 1 {
            r as f64 / (config.rollouts - 1) as f64
        } else {
            1.0
        };
        let noise = Noise::scheduled(&config.exploration, frac);
        let day = rollout_rng.random_range(first_day..last_day);
        let mut episode = {
            let mut policy = ActorPolicy::new(agent, Some((noise, &mut rollout_rng)));
            let run = run_policy_from(series, &mut policy, sim, dt, day * nd, 1)?;
            if let Some(e) = policy.take_error() {
                return Err(e);
            }
            run.episodes
                .into_iter()
                .next()
                .ok_or_else(|| AgentError::InvalidConfig("rollout produced no episode".into()))?
        };
        label_with_hindsight(series, nd, &mut episode);
        let profit = episode.total_profit();
        buffer.add(episode)?;
        buffer.set_is_exponent(phi0 + (phi1 - phi0) * frac);

        for _ in 0..config.updates_per_rollout {
            let stats = agent.train_step(buffer, Phase::Online)?;
            log.push(TrainLog {
                stats,
                noise_level: noise_level(&noise),
                is_exponent: buffer.is_exponent(),
                buffer_len: buffer.len(),
                rollout_profit: profit,
            });
        }
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && (r + 1) % config.checkpoint_every == 0 {
                save_state(agent, buffer, dir)?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_state(agent, buffer, dir)?;
    }
    Ok(())
}

/// File names used for periodic checkpoints inside a checkpoint directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPLAY_FILE: &str = "replay.json";

fn save_state(agent: &Agent, buffer: &PrioritizedBuffer, dir: &Path) -> Result<(), AgentError> {
    agent.save(dir.join(CHECKPOINT_FILE))?;
    buffer.save(dir.join(REPLAY_FILE))?;
    Ok(())
}
