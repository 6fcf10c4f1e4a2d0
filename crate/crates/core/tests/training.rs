mod common;

use common::fixtures::{sine_dt, sine_sim, sine_split};
use qtlab::agent::{Agent, TrainConfig};
use qtlab::indicators::generate_demonstrations;
use qtlab::replay::{BufferConfig, PrioritizedBuffer};

fn one_day_agent(cfg: TrainConfig) -> (Agent, PrioritizedBuffer) {
    let (train, _) = sine_split();
    let sim = sine_sim();
    let demos = generate_demonstrations(&train, &sine_dt(), &sim).unwrap();
    let mut buffer = PrioritizedBuffer::new(BufferConfig::default()).unwrap();
    buffer.add(demos[0].clone()).unwrap();
    (Agent::new(sim.observation_dim(), cfg).unwrap(), buffer)
}

#[test]
fn critic_loss_falls_on_a_fixed_episode() {
    let cfg = TrainConfig {
        hidden_dim: 16,
        critic_head_dim: 16,
        batch_size: 4,
        seed: 2,
        ..Default::default()
    };
    let (mut agent, mut buffer) = one_day_agent(cfg);
    let stats = agent.pretrain(&mut buffer, 200).unwrap();
    let head: f64 = stats[..10].iter().map(|s| s.critic_loss).sum::<f64>() / 10.0;
    let tail: f64 = stats[190..].iter().map(|s| s.critic_loss).sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "critic loss {head} -> {tail}");
}

#[test]
fn targets_track_online_networks() {
    let cfg = TrainConfig {
        hidden_dim: 4,
        critic_head_dim: 4,
        tau: 1.0,
        seed: 5,
        ..Default::default()
    };
    let (mut agent, mut buffer) = one_day_agent(cfg);
    agent.pretrain(&mut buffer, 3).unwrap();
    // with tau = 1 the targets copy the online weights after every update
    assert_eq!(
        agent.actor_params().flat_values(),
        agent.target_actor_params().flat_values()
    );
    assert_eq!(
        agent.critic_params().flat_values(),
        agent.target_critic_params().flat_values()
    );
}
