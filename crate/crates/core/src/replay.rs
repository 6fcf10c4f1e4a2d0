//! Episode replay with proportional prioritization, demonstration bonuses and
//! importance-sampling weights.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BUFFER_FORMAT: &str = "qtlab-replay";
pub const BUFFER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("buffer is empty")]
    Empty,
    #[error("no demonstration episodes in buffer")]
    NoDemos,
    #[error("capacity {0} exhausted by protected demonstrations")]
    CapacityExhausted(usize),
    #[error("unknown episode id {0}")]
    UnknownId(u64),
    #[error("invalid episode: {0}")]
    InvalidEpisode(String),
    #[error("invalid buffer config: {0}")]
    InvalidConfig(String),
    #[error("unsupported buffer file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt buffer file: {0}")]
    Corrupt(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One decision step inside an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub bar_index: usize,
    pub observation: Vec<f64>,
    /// Probability vector over (long, short) that produced the decision.
    pub action: [f64; 2],
    /// Executed position sign, +1 or -1.
    pub sign: i8,
    pub reward: f64,
    /// Account profit r_t in currency.
    pub profit: f64,
    /// Expert label for behavior cloning, if one exists at this step.
    #[serde(default)]
    pub expert: Option<i8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: u64,
    pub is_demo: bool,
    pub priority: f64,
    pub steps: Vec<Step>,
}

impl Episode {
    pub fn new(steps: Vec<Step>, is_demo: bool) -> Self {
        Self {
            id: 0,
            is_demo,
            priority: 0.0,
            steps,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn observation_dim(&self) -> usize {
        self.steps.first().map_or(0, |s| s.observation.len())
    }

    pub fn total_profit(&self) -> f64 {
        self.steps.iter().map(|s| s.profit).sum()
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        let dim = match self.steps.first() {
            Some(s) => s.observation.len(),
            None => return Err(ReplayError::InvalidEpisode("no steps".into())),
        };
        for (t, s) in self.steps.iter().enumerate() {
            if s.observation.len() != dim {
                return Err(ReplayError::InvalidEpisode(format!(
                    "step {t} has observation dim {} (expected {dim})",
                    s.observation.len()
                )));
            }
            if s.sign != 1 && s.sign != -1 {
                return Err(ReplayError::InvalidEpisode(format!(
                    "step {t} has sign {}",
                    s.sign
                )));
            }
            if let Some(e) = s.expert {
                if e != 1 && e != -1 {
                    return Err(ReplayError::InvalidEpisode(format!(
                        "step {t} has expert label {e}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BufferConfig {
    /// Maximum number of stored episodes.
    pub capacity: usize,
    /// Priority bonus for demonstration episodes (epsilon_D).
    pub demo_bonus: f64,
    /// Lower bound on every priority (epsilon_p).
    pub priority_floor: f64,
    /// Weight of the action-gradient term in the priority (lambda_0).
    pub actor_grad_weight: f64,
    /// Initial importance-sampling exponent (phi), annealed to `is_exponent_final`.
    pub is_exponent: f64,
    pub is_exponent_final: f64,
    pub demo_protected: bool,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            capacity: 1000,
            demo_bonus: 0.1,
            priority_floor: 1e-3,
            actor_grad_weight: 1.0,
            is_exponent: 0.6,
            is_exponent_final: 1.0,
            demo_protected: true,
        }
    }
}

impl BufferConfig {
    pub fn validate(&self) -> Result<(), ReplayError> {
        let bad = |m: &str| Err(ReplayError::InvalidConfig(m.to_string()));
        if self.capacity < 1 {
            return bad("capacity must be >= 1");
        }
        if !(self.demo_bonus >= 0.0) {
            return bad("demo_bonus must be >= 0");
        }
        if !(self.priority_floor > 0.0) {
            return bad("priority_floor must be > 0");
        }
        if !(self.actor_grad_weight >= 0.0) {
            return bad("actor_grad_weight must be >= 0");
        }
        for phi in [self.is_exponent, self.is_exponent_final] {
            if !(0.0..=1.0).contains(&phi) {
                return bad("importance-sampling exponent must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

/// One draw from the buffer.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub episode: &'a Episode,
    pub probability: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BufferFile {
    format: String,
    version: u32,
    config: BufferConfig,
    next_id: u64,
    episodes: Vec<Episode>,
}

#[derive(Debug, Clone)]
pub struct PrioritizedBuffer {
    config: BufferConfig,
    episodes: Vec<Episode>,
    next_id: u64,
    is_exponent: f64,
}

impl PrioritizedBuffer {
    pub fn new(config: BufferConfig) -> Result<Self, ReplayError> {
        config.validate()?;
        Ok(Self {
            is_exponent: config.is_exponent,
            config,
            episodes: Vec::new(),
            next_id: 0,
        })
    }

    pub fn config(&self) -> &BufferConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn demo_count(&self) -> usize {
        self.episodes.iter().filter(|e| e.is_demo).count()
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn get(&self, id: u64) -> Option<&Episode> {
        self.episodes.iter().find(|e| e.id == id)
    }

    pub fn is_exponent(&self) -> f64 {
        self.is_exponent
    }

    pub fn set_is_exponent(&mut self, phi: f64) {
        self.is_exponent = phi.clamp(0.0, 1.0);
    }

    fn max_priority(&self) -> f64 {
        self.episodes
            .iter()
            .map(|e| e.priority)
            .fold(None, |m: Option<f64>, p| Some(m.map_or(p, |m| m.max(p))))
            .unwrap_or(1.0)
    }

    /// Stores the episode at the current maximum priority, evicting the
    /// lowest-priority evictable episode when over capacity.
    pub fn add(&mut self, mut episode: Episode) -> Result<u64, ReplayError> {
        episode.validate()?;
        let id = self.next_id;
        episode.id = id;
        episode.priority = self.max_priority().max(self.config.priority_floor);
        if self.episodes.len() >= self.config.capacity {
            let victim = self
                .episodes
                .iter()
                .enumerate()
                .filter(|(_, e)| !(self.config.demo_protected && e.is_demo))
                .min_by(|a, b| a.1.priority.total_cmp(&b.1.priority))
                .map(|(i, _)| i);
            match victim {
                Some(i) => {
                    self.episodes.remove(i);
                }
                None => return Err(ReplayError::CapacityExhausted(self.config.capacity)),
            }
        }
        self.next_id += 1;
        self.episodes.push(episode);
        Ok(id)
    }

    pub fn total_priority(&self) -> f64 {
        self.episodes.iter().map(|e| e.priority).sum()
    }

    /// P(i) for every stored episode, in storage order.
    pub fn probabilities(&self) -> Vec<f64> {
        let total = self.total_priority();
        self.episodes.iter().map(|e| e.priority / total).collect()
    }

    fn cumulative(&self, filter: impl Fn(&Episode) -> bool) -> (Vec<usize>, Vec<f64>) {
        let mut indices = Vec::new();
        let mut cum = Vec::new();
        let mut acc = 0.0;
        for (i, e) in self.episodes.iter().enumerate() {
            if filter(e) {
                acc += e.priority;
                indices.push(i);
                cum.push(acc);
            }
        }
        (indices, cum)
    }

    fn draw(rng: &mut impl Rng, indices: &[usize], cum: &[f64]) -> usize {
        let total = *cum.last().expect("non-empty cumulative table");
        let u = rng.random::<f64>() * total;
        let k = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
        indices[k]
    }

    fn weight(&self, probability: f64) -> f64 {
        let n = self.episodes.len() as f64;
        (1.0 / n) * (1.0 / probability).powf(self.is_exponent)
    }

    fn finish<'a>(&'a self, picks: Vec<usize>) -> Vec<Sample<'a>> {
        let total = self.total_priority();
        let mut samples: Vec<Sample<'a>> = picks
            .into_iter()
            .map(|i| {
                let episode = &self.episodes[i];
                let probability = episode.priority / total;
                Sample {
                    episode,
                    probability,
                    weight: self.weight(probability),
                }
            })
            .collect();
        let max_w = samples.iter().map(|s| s.weight).fold(0.0, f64::max);
        if max_w > 0.0 {
            for s in &mut samples {
                s.weight /= max_w;
            }
        }
        samples
    }

    /// Draws `batch_size` episodes with replacement, P(i) = p_i / sum_j p_j.
    pub fn sample(
        &self,
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<Sample<'_>>, ReplayError> {
        self.sample_with_demo_floor(batch_size, 0, rng)
    }

    /// Like [`sample`](Self::sample), but the first `min_demos` draws come from the
    /// demonstration subset (proportional to priority within it). Weights still use
    /// the global P(i).
    pub fn sample_with_demo_floor(
        &self,
        batch_size: usize,
        min_demos: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<Sample<'_>>, ReplayError> {
        if self.episodes.is_empty() {
            return Err(ReplayError::Empty);
        }
        let (all_idx, all_cum) = self.cumulative(|_| true);
        let (demo_idx, demo_cum) = self.cumulative(|e| e.is_demo);
        let min_demos = if demo_idx.is_empty() {
            0
        } else {
            min_demos.min(batch_size)
        };
        let mut picks = Vec::with_capacity(batch_size);
        for k in 0..batch_size {
            if k < min_demos {
                picks.push(Self::draw(rng, &demo_idx, &demo_cum));
            } else {
                picks.push(Self::draw(rng, &all_idx, &all_cum));
            }
        }
        Ok(self.finish(picks))
    }

    /// Draws only demonstration episodes.
    pub fn sample_demos(
        &self,
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<Sample<'_>>, ReplayError> {
        let (demo_idx, demo_cum) = self.cumulative(|e| e.is_demo);
        if demo_idx.is_empty() {
            return Err(ReplayError::NoDemos);
        }
        let picks = (0..batch_size)
            .map(|_| Self::draw(rng, &demo_idx, &demo_cum))
            .collect();
        Ok(self.finish(picks))
    }

    /// Priority from the episode's mean TD residual and mean action-gradient norm.
    pub fn priority_value(&self, td_term: f64, grad_term: f64, is_demo: bool) -> f64 {
        let bonus = if is_demo { self.config.demo_bonus } else { 0.0 };
        // smallest terms first keeps hand-checkable sums like 0.5 + 0.2 + 0.1 correctly rounded
        let mut terms = [
            td_term.abs(),
            self.config.actor_grad_weight * grad_term.abs(),
            bonus,
        ];
        terms.sort_by(f64::total_cmp);
        let p = terms[0] + terms[1] + terms[2];
        if p.is_finite() {
            p.max(self.config.priority_floor)
        } else {
            self.config.priority_floor
        }
    }

    pub fn update_priority(
        &mut self,
        id: u64,
        td_term: f64,
        grad_term: f64,
    ) -> Result<f64, ReplayError> {
        let idx = self
            .episodes
            .iter()
            .position(|e| e.id == id)
            .ok_or(ReplayError::UnknownId(id))?;
        let p = self.priority_value(td_term, grad_term, self.episodes[idx].is_demo);
        self.episodes[idx].priority = p;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ReplayError> {
        let file = BufferFile {
            format: BUFFER_FORMAT.to_string(),
            version: BUFFER_VERSION,
            config: self.config.clone(),
            next_id: self.next_id,
            episodes: self.episodes.clone(),
        };
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &file).map_err(|e| ReplayError::Corrupt(e.to_string()))?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReplayError> {
        let reader = BufReader::new(File::open(path)?);
        let value: serde_json::Value =
            serde_json::from_reader(reader).map_err(|e| ReplayError::Corrupt(e.to_string()))?;
        if value.get("format").and_then(|f| f.as_str()) != Some(BUFFER_FORMAT) {
            return Err(ReplayError::Corrupt("missing format tag".into()));
        }
        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| ReplayError::Corrupt("missing version".into()))?
            as u32;
        if version != BUFFER_VERSION {
            return Err(ReplayError::Version {
                found: version,
                expected: BUFFER_VERSION,
            });
        }
        let file: BufferFile =
            serde_json::from_value(value).map_err(|e| ReplayError::Corrupt(e.to_string()))?;
        file.config.validate()?;
        for e in &file.episodes {
            e.validate()?;
        }
        Ok(Self {
            is_exponent: file.config.is_exponent,
            config: file.config,
            episodes: file.episodes,
            next_id: file.next_id,
        })
    }
}
