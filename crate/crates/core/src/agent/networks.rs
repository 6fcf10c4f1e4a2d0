use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    softmax2, CellCache, CellKind, Dense, Gradients, NnError, ParamStore, Params, RecurrentCell,
    RecurrentCellSpec,
};

/// Network sizes shared by actor and critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub obs_dim: usize,
    pub cell: CellKind,
    pub hidden_dim: usize,
    pub critic_head_dim: usize,
}

impl NetShape {
    /// Recurrent input: observation followed by the previous action vector.
    pub fn input_dim(&self) -> usize {
        self.obs_dim + 2
    }
}

/// Recurrent input at one step.
pub fn step_input(observation: &[f64], prev_action: [f64; 2]) -> Vec<f64> {
    let mut x = Vec::with_capacity(observation.len() + 2);
    x.extend_from_slice(observation);
    x.extend_from_slice(&prev_action);
    x
}

/// Recurrent inputs for a whole episode; the first step sees a zero previous action.
pub fn episode_inputs(observations: &[&[f64]], actions: &[[f64; 2]]) -> Vec<Vec<f64>> {
    observations
        .iter()
        .enumerate()
        .map(|(t, obs)| {
            let prev = if t == 0 { [0.0; 2] } else { actions[t - 1] };
            step_input(obs, prev)
        })
        .collect()
}

/// Recurrent cell over (observation, previous action) followed by a 2-way softmax
/// over (long, short).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorNet {
    pub cell: RecurrentCell,
    pub head: Dense,
}

#[derive(Debug, Clone)]
pub struct ActorTape {
    pub cells: Vec<CellCache>,
    pub probs: Vec<[f64; 2]>,
}

impl ActorNet {
    pub fn build(shape: &NetShape, rng: &mut impl Rng) -> Result<(Self, ParamStore), NnError> {
        let mut store = ParamStore::new();
        let spec = RecurrentCellSpec {
            kind: shape.cell,
            input_dim: shape.input_dim(),
            hidden_dim: shape.hidden_dim,
        };
        let cell = RecurrentCell::new(&mut store, "actor.cell", spec, rng)?;
        let head = Dense::new(&mut store, "actor.head", shape.hidden_dim, 2, rng);
        Ok((Self { cell, head }, store))
    }

    pub fn zero_state(&self) -> Vec<f64> {
        self.cell.zero_state()
    }

    fn probs(&self, p: &Params, hidden: &[f64]) -> [f64; 2] {
        let logits = self.head.forward(p, hidden);
        softmax2([logits[0], logits[1]])
    }

    /// One online step; returns the action probabilities and the next state.
    pub fn step(
        &self,
        p: &Params,
        state: &[f64],
        input: &[f64],
    ) -> Result<([f64; 2], Vec<f64>), NnError> {
        let cache = self.cell.forward(p, state, input)?;
        let probs = self.probs(p, cache.hidden(self.cell.hidden_dim()));
        Ok((probs, cache.state))
    }

    pub fn forward(&self, p: &Params, inputs: &[Vec<f64>]) -> Result<ActorTape, NnError> {
        let cells = self.cell.forward_sequence(p, inputs)?;
        let hd = self.cell.hidden_dim();
        let probs = cells.iter().map(|c| self.probs(p, c.hidden(hd))).collect();
        Ok(ActorTape { cells, probs })
    }

    /// Accumulates parameter gradients given dL/d(probs) at every step.
    pub fn backward(
        &self,
        p: &Params,
        g: &mut Gradients,
        tape: &ActorTape,
        d_probs: &[[f64; 2]],
    ) -> Result<(), NnError> {
        if d_probs.len() != tape.probs.len() {
            return Err(NnError::TapeLength {
                tape: tape.probs.len(),
                upstream: d_probs.len(),
            });
        }
        let hd = self.cell.hidden_dim();
        let mut d_hidden = Vec::with_capacity(tape.cells.len());
        for ((cache, probs), dp) in tape.cells.iter().zip(&tape.probs).zip(d_probs) {
            if dp[0] == 0.0 && dp[1] == 0.0 {
                d_hidden.push(vec![0.0; hd]);
                continue;
            }
            let dot = dp[0] * probs[0] + dp[1] * probs[1];
            let d_logits = [probs[0] * (dp[0] - dot), probs[1] * (dp[1] - dot)];
            d_hidden.push(self.head.backward(p, g, cache.hidden(hd), &d_logits));
        }
        self.cell.backward_sequence(p, g, &tape.cells, &d_hidden)?;
        Ok(())
    }
}

/// Recurrent cell over (observation, previous action) producing `h_t`, then a
/// tanh layer on `h_t` concatenated with the action vector, then a scalar Q.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticNet {
    pub cell: RecurrentCell,
    pub hidden: Dense,
    pub out: Dense,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Vec<f64>,
    activation: Vec<f64>,
    pub q: f64,
}

#[derive(Debug, Clone)]
pub struct CriticTape {
    pub cells: Vec<CellCache>,
    pub heads: Vec<HeadCache>,
}

impl CriticTape {
    pub fn q_values(&self) -> Vec<f64> {
        self.heads.iter().map(|h| h.q).collect()
    }
}

impl CriticNet {
    pub fn build(shape: &NetShape, rng: &mut impl Rng) -> Result<(Self, ParamStore), NnError> {
        let mut store = ParamStore::new();
        let spec = RecurrentCellSpec {
            kind: shape.cell,
            input_dim: shape.input_dim(),
            hidden_dim: shape.hidden_dim,
        };
        let cell = RecurrentCell::new(&mut store, "critic.cell", spec, rng)?;
        let hidden = Dense::new(
            &mut store,
            "critic.fc",
            shape.hidden_dim + 2,
            shape.critic_head_dim,
            rng,
        );
        let out = Dense::new(&mut store, "critic.out", shape.critic_head_dim, 1, rng);
        Ok((Self { cell, hidden, out }, store))
    }

    /// Q(h, a) for an already computed recurrent output `h`.
    pub fn head(&self, p: &Params, hidden: &[f64], action: [f64; 2]) -> HeadCache {
        let mut input = Vec::with_capacity(hidden.len() + 2);
        input.extend_from_slice(hidden);
        input.extend_from_slice(&action);
        let activation: Vec<f64> = self
            .hidden
            .forward(p, &input)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let q = self.out.forward(p, &activation)[0];
        HeadCache {
            input,
            activation,
            q,
        }
    }

    /// Backward through the head; returns (dL/dh, dL/da).
    pub fn head_backward(
        &self,
        p: &Params,
        g: &mut Gradients,
        cache: &HeadCache,
        dq: f64,
    ) -> (Vec<f64>, [f64; 2]) {
        let d_act = self.out.backward(p, g, &cache.activation, &[dq]);
        let d_pre: Vec<f64> = d_act
            .iter()
            .zip(&cache.activation)
            .map(|(d, a)| d * (1.0 - a * a))
            .collect();
        let d_in = self.hidden.backward(p, g, &cache.input, &d_pre);
        let hd = d_in.len() - 2;
        (d_in[..hd].to_vec(), [d_in[hd], d_in[hd + 1]])
    }

    /// dQ/da at (h, a), leaving parameter gradients untouched.
    pub fn action_gradient(&self, p: &Params, cache: &HeadCache) -> [f64; 2] {
        // d_in = W_fc^T (diag(1 - act^2) W_out^T)
        let w_out = p.get(self.out.weight);
        let w_fc = p.get(self.hidden.weight);
        let in_dim = self.hidden.in_dim;
        let mut da = [0.0; 2];
        for (k, a) in cache.activation.iter().enumerate() {
            let d = w_out[k] * (1.0 - a * a);
            da[0] += w_fc[k * in_dim + in_dim - 2] * d;
            da[1] += w_fc[k * in_dim + in_dim - 1] * d;
        }
        da
    }

    pub fn recurrent(&self, p: &Params, inputs: &[Vec<f64>]) -> Result<Vec<CellCache>, NnError> {
        self.cell.forward_sequence(p, inputs)
    }

    pub fn forward(
        &self,
        p: &Params,
        inputs: &[Vec<f64>],
        actions: &[[f64; 2]],
    ) -> Result<CriticTape, NnError> {
        if inputs.len() != actions.len() {
            return Err(NnError::Shape(format!(
                "{} inputs but {} actions",
                inputs.len(),
                actions.len()
            )));
        }
        let cells = self.recurrent(p, inputs)?;
        let hd = self.cell.hidden_dim();
        let heads = cells
            .iter()
            .zip(actions)
            .map(|(c, &a)| self.head(p, c.hidden(hd), a))
            .collect();
        Ok(CriticTape { cells, heads })
    }

    /// BPTT given dL/dQ at every step; returns dL/da per step.
    pub fn backward(
        &self,
        p: &Params,
        g: &mut Gradients,
        tape: &CriticTape,
        dq: &[f64],
    ) -> Result<Vec<[f64; 2]>, NnError> {
        if dq.len() != tape.heads.len() {
            return Err(NnError::TapeLength {
                tape: tape.heads.len(),
                upstream: dq.len(),
            });
        }
        let mut d_hidden = Vec::with_capacity(dq.len());
        let mut d_actions = Vec::with_capacity(dq.len());
        for (head, &d) in tape.heads.iter().zip(dq) {
            let (dh, da) = self.head_backward(p, g, head, d);
            d_hidden.push(dh);
            d_actions.push(da);
        }
        self.cell.backward_sequence(p, g, &tape.cells, &d_hidden)?;
        Ok(d_actions)
    }
}
