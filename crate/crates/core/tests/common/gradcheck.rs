//! Central finite-difference oracle for the actor and critic gradients.

use qtlab::agent::{episode_inputs, ActorNet, Agent, BcForm, CriticNet, NetShape, TrainConfig};
use qtlab::nn::{CellKind, Gradients, ParamStore};
use qtlab::replay::{Episode, Step};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor so that gradients indistinguishable from zero compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradConfig {
    pub seed: u64,
    pub cell: CellKind,
    pub obs_dim: usize,
    pub hidden: usize,
    pub head: usize,
    pub seq: usize,
}

impl GradConfig {
    /// Random small configuration; the cell kind alternates with the seed.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            seed,
            cell: if seed.is_multiple_of(2) {
                CellKind::Gru
            } else {
                CellKind::Lstm
            },
            obs_dim: rng.random_range(1..=5),
            hidden: rng.random_range(1..=8),
            head: rng.random_range(1..=6),
            seq: rng.random_range(1..=12),
        }
    }

    fn shape(&self) -> NetShape {
        NetShape {
            obs_dim: self.obs_dim,
            cell: self.cell,
            hidden_dim: self.hidden,
            critic_head_dim: self.head,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

impl GradReport {
    fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares `analytic` with central differences of `f` over every parameter in `store`.
fn compare(
    store: &mut ParamStore,
    analytic: &Gradients,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> GradReport {
    let mut report = GradReport::default();
    let names: Vec<String> = store.tensors().iter().map(|t| t.name.clone()).collect();
    for name in names {
        let id = store.find(&name).unwrap();
        for k in 0..store.value(id).len() {
            let orig = store.value(id)[k];
            store.value_mut(id)[k] = orig + EPS;
            let up = f(store);
            store.value_mut(id)[k] = orig - EPS;
            let down = f(store);
            store.value_mut(id)[k] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let a = analytic.get(id)[k];
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
        }
    }
    report
}

fn random_episode(cfg: &GradConfig, rng: &mut ChaCha8Rng) -> Episode {
    let steps = (0..cfg.seq)
        .map(|t| {
            let p: f64 = rng.random_range(0.05..0.95);
            Step {
                bar_index: t,
                observation: (0..cfg.obs_dim)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
                action: [p, 1.0 - p],
                sign: if p >= 0.5 { 1 } else { -1 },
                reward: rng.random_range(-1.0..1.0),
                profit: 0.0,
                expert: match rng.random_range(0..3) {
                    0 => None,
                    1 => Some(1),
                    _ => Some(-1),
                },
            }
        })
        .collect();
    Episode::new(steps, true)
}

fn inputs_of(ep: &Episode) -> (Vec<Vec<f64>>, Vec<[f64; 2]>) {
    let obs: Vec<&[f64]> = ep.steps.iter().map(|s| s.observation.as_slice()).collect();
    let actions: Vec<[f64; 2]> = ep.steps.iter().map(|s| s.action).collect();
    (episode_inputs(&obs, &actions), actions)
}

/// Actor network alone: objective `sum_t c_t . probs_t`.
pub fn check_actor(cfg: &GradConfig) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA);
    let (net, mut store): (ActorNet, ParamStore) = ActorNet::build(&cfg.shape(), &mut rng).unwrap();
    randomize_biases(&mut store, &mut rng);
    let ep = random_episode(cfg, &mut rng);
    let (inputs, _) = inputs_of(&ep);
    let coef: Vec<[f64; 2]> = (0..cfg.seq)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let objective = |s: &ParamStore| {
        let tape = net.forward(s.params(), &inputs).unwrap();
        tape.probs
            .iter()
            .zip(&coef)
            .map(|(p, c)| p[0] * c[0] + p[1] * c[1])
            .sum::<f64>()
    };
    let tape = net.forward(store.params(), &inputs).unwrap();
    let mut g = Gradients::zeros_like(store.params());
    net.backward(store.params(), &mut g, &tape, &coef).unwrap();
    compare(&mut store, &g, objective)
}

/// Critic network alone: squared TD loss against fixed targets, plus dQ/da.
pub fn check_critic(cfg: &GradConfig) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC);
    let (net, mut store): (CriticNet, ParamStore) =
        CriticNet::build(&cfg.shape(), &mut rng).unwrap();
    randomize_biases(&mut store, &mut rng);
    let ep = random_episode(cfg, &mut rng);
    let (inputs, actions) = inputs_of(&ep);
    let targets: Vec<f64> = (0..cfg.seq).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |s: &ParamStore, acts: &[[f64; 2]]| {
        let tape = net.forward(s.params(), &inputs, acts).unwrap();
        tape.q_values()
            .iter()
            .zip(&targets)
            .map(|(q, y)| (q - y).powi(2))
            .sum::<f64>()
    };
    let tape = net.forward(store.params(), &inputs, &actions).unwrap();
    let dq: Vec<f64> = tape
        .q_values()
        .iter()
        .zip(&targets)
        .map(|(q, y)| 2.0 * (q - y))
        .collect();
    let mut g = Gradients::zeros_like(store.params());
    let d_actions = net.backward(store.params(), &mut g, &tape, &dq).unwrap();
    let mut report = compare(&mut store, &g, |s| loss(s, &actions));

    // action gradients, through the head only (inputs hold the previous actions fixed)
    for t in 0..cfg.seq {
        for k in 0..2 {
            let mut up = actions.clone();
            up[t][k] += EPS;
            let mut down = actions.clone();
            down[t][k] -= EPS;
            let numeric = (loss(&store, &up) - loss(&store, &down)) / (2.0 * EPS);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err(d_actions[t][k], numeric));
        }
        let head = &tape.heads[t];
        let da = net.action_gradient(store.params(), head);
        for k in 0..2 {
            report.max_rel_err = report
                .max_rel_err
                .max(rel_err(da[k] * dq[t], d_actions[t][k]));
        }
    }
    report
}

/// Full actor objective `-lambda1 * J + lambda2 * L_BC` through the critic,
/// with cloning applied at every labeled step.
pub fn check_agent_objective(cfg: &GradConfig, bc_form: BcForm) -> GradReport {
    let train = TrainConfig {
        cell: cfg.cell,
        hidden_dim: cfg.hidden,
        critic_head_dim: cfg.head,
        lambda1: 0.8,
        lambda2: 0.6,
        bc_form,
        seed: cfg.seed,
        ..Default::default()
    };
    let mut agent = Agent::new(cfg.obs_dim, train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xF);
    randomize_biases(agent.critic_params_mut(), &mut rng);
    let eps = [random_episode(cfg, &mut rng), random_episode(cfg, &mut rng)];
    let weights = [1.0, rng.random_range(0.2..1.0)];
    let batch: Vec<(&Episode, f64)> = eps.iter().zip(weights).collect();

    let grads = agent.actor_gradients(&batch, false).unwrap();
    let analytic = agent.mix_actor_gradients(&grads);
    let mut store = agent.actor_params().clone();
    let objective = |s: &ParamStore| {
        let mut probe = agent.clone();
        *probe.actor_params_mut() = s.clone();
        let g = probe.actor_gradients(&batch, false).unwrap();
        -0.8 * g.actor_obj + 0.6 * g.bc_loss
    };
    compare(&mut store, &analytic, objective)
}

/// Non-zero biases so that no unit sits at a symmetric point.
fn randomize_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store
        .tensors()
        .iter()
        .filter(|t| t.name.ends_with("bias"))
        .map(|t| t.name.clone())
        .collect();
    for name in names {
        let id = store.find(&name).unwrap();
        for v in store.value_mut(id) {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}

/// All checks on `n` random configurations.
pub fn run_suite(n: u64) -> (GradReport, Vec<(GradConfig, GradReport)>) {
    let mut total = GradReport::default();
    let mut per = Vec::new();
    for seed in 0..n {
        let cfg = GradConfig::random(seed);
        let mut r = check_actor(&cfg);
        r.merge(check_critic(&cfg));
        let form = if seed % 3 == 0 {
            BcForm::NegatedAdvantage
        } else {
            BcForm::QfilterMse
        };
        r.merge(check_agent_objective(&cfg, form));
        total.merge(r);
        per.push((cfg, r));
    }
    (total, per)
}
