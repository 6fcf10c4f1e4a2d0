//! Goodness-of-fit of buffer sampling against P(i) = p_i / sum_j p_j.

use qtlab::replay::{BufferConfig, Episode, PrioritizedBuffer, Step};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub const DRAWS: usize = 100_000;
pub const FREQ_TOL: f64 = 0.01;
pub const MIN_P_VALUE: f64 = 0.001;

#[derive(Debug, Clone, Copy)]
pub struct FitReport {
    pub episodes: usize,
    pub max_abs_dev: f64,
    pub chi2: f64,
    pub p_value: f64,
}

impl FitReport {
    pub fn passes(&self) -> bool {
        self.max_abs_dev <= FREQ_TOL && self.p_value > MIN_P_VALUE
    }
}

pub fn one_step_episode(is_demo: bool) -> Episode {
    Episode::new(
        vec![Step {
            bar_index: 0,
            observation: vec![0.0],
            action: [0.5, 0.5],
            sign: 1,
            reward: 0.0,
            profit: 0.0,
            expert: None,
        }],
        is_demo,
    )
}

/// Buffer of 1..=64 episodes with random priorities and demo flags.
pub fn random_buffer(rng: &mut ChaCha8Rng) -> PrioritizedBuffer {
    let n = rng.random_range(1..=64);
    let mut buffer = PrioritizedBuffer::new(BufferConfig {
        capacity: 64,
        ..Default::default()
    })
    .unwrap();
    for _ in 0..n {
        let id = buffer.add(one_step_episode(rng.random_bool(0.3))).unwrap();
        buffer
            .update_priority(id, rng.random_range(0.0..5.0), rng.random_range(0.0..1.0))
            .unwrap();
    }
    buffer
}

/// Draws `DRAWS` episodes and compares counts with the expected frequencies.
pub fn fit(buffer: &PrioritizedBuffer, seed: u64) -> FitReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = buffer.episodes();
    let total: f64 = eps.iter().map(|e| e.priority).sum();
    let expected: Vec<f64> = eps.iter().map(|e| e.priority / total).collect();
    let mut counts = vec![0usize; eps.len()];
    for s in buffer.sample(DRAWS, &mut rng).unwrap() {
        let i = eps.iter().position(|e| e.id == s.episode.id).unwrap();
        counts[i] += 1;
    }
    let n = DRAWS as f64;
    let mut max_abs_dev = 0.0f64;
    let mut chi2 = 0.0;
    for (c, p) in counts.iter().zip(&expected) {
        let freq = *c as f64 / n;
        max_abs_dev = max_abs_dev.max((freq - p).abs());
        chi2 += (*c as f64 - n * p).powi(2) / (n * p);
    }
    let p_value = if eps.len() > 1 {
        1.0 - ChiSquared::new((eps.len() - 1) as f64).unwrap().cdf(chi2)
    } else {
        1.0
    };
    FitReport {
        episodes: eps.len(),
        max_abs_dev,
        chi2,
        p_value,
    }
}
