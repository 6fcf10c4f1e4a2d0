//! Small dense and recurrent layers with hand-written backpropagation through time.
//!
//! Parameters live in a [`ParamStore`]: named row-major `f64` tensors, a parallel
//! gradient buffer and Adam moment state. Layers only hold [`ParamId`]s, so a
//! network description can be shared between an online store and its target copy.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const STORE_MAGIC: &[u8; 4] = b"QTPS";
const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),
    #[error("non-finite parameter in tensor {0}")]
    NonFiniteParam(String),
    #[error("tape has {tape} steps but {upstream} upstream gradients were given")]
    TapeLength { tape: usize, upstream: usize },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Parameter values, indexable by [`ParamId`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }
}

/// Gradient buffer with the same layout as a [`Params`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    bufs: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &Params) -> Self {
        Self {
            bufs: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.bufs[id.0]
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.bufs
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.fill(0.0);
        }
    }

    pub fn norm(&self) -> f64 {
        self.bufs
            .iter()
            .flat_map(|b| b.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for b in &mut self.bufs {
            for g in b.iter_mut() {
                *g *= c;
            }
        }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &Gradients, c: f64) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if max_norm > 0.0 && n > max_norm {
            self.scale(max_norm / n);
        }
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Named tensors with gradients and Adam state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Params,
    grads: Gradients,
    adam_m: Vec<Vec<f64>>,
    adam_v: Vec<Vec<f64>>,
    adam_step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        let len = data.len();
        self.params.tensors.push(Tensor {
            name: name.to_string(),
            shape,
            data,
        });
        self.grads.bufs.push(vec![0.0; len]);
        self.adam_m.push(vec![0.0; len]);
        self.adam_v.push(vec![0.0; len]);
        ParamId(self.params.tensors.len() - 1)
    }

    /// Weight matrix `rows x cols`, uniform in ±1/sqrt(cols).
    pub fn add_weight(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (cols as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.push(name, vec![rows, cols], data)
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        let len = shape.iter().product();
        self.push(name, shape, vec![0.0; len])
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn grads(&self) -> &Gradients {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut Gradients {
        &mut self.grads
    }

    /// Values for reading alongside the gradient buffer for writing.
    pub fn split_mut(&mut self) -> (&Params, &mut Gradients) {
        (&self.params, &mut self.grads)
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        self.params.get(id)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params.tensors[id.0].data
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.params.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params
            .tensors
            .iter()
            .position(|t| t.name == name)
            .map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.tensors.iter().map(Tensor::len).sum()
    }

    pub fn adam_steps(&self) -> u64 {
        self.adam_step
    }

    pub fn zero_grad(&mut self) {
        self.grads.zero();
    }

    pub fn set_grads(&mut self, grads: Gradients) -> Result<(), NnError> {
        if grads.bufs.len() != self.grads.bufs.len()
            || grads
                .bufs
                .iter()
                .zip(&self.grads.bufs)
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(NnError::Shape(
                "gradient layout differs from parameters".into(),
            ));
        }
        self.grads = grads;
        Ok(())
    }

    /// Flattened copy of all parameter values, in tensor order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .tensors
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    /// Applies one Adam update from the current gradient buffer.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), NnError> {
        for (t, g) in self.params.tensors.iter().zip(&self.grads.bufs) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(NnError::NonFiniteGradient(t.name.clone()));
            }
        }
        self.adam_step += 1;
        let step = self.adam_step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(step);
        let bc2 = 1.0 - cfg.beta2.powi(step);
        for k in 0..self.params.tensors.len() {
            let data = &mut self.params.tensors[k].data;
            let g = &self.grads.bufs[k];
            let m = &mut self.adam_m[k];
            let v = &mut self.adam_v[k];
            for j in 0..data.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            debug_assert!(
                data.iter().all(|x| x.is_finite()),
                "non-finite parameter in {}",
                self.params.tensors[k].name
            );
        }
        Ok(())
    }

    /// `self <- tau * online + (1 - tau) * self`, elementwise.
    pub fn soft_update(&mut self, online: &ParamStore, tau: f64) -> Result<(), NnError> {
        self.check_layout(online)?;
        for (t, o) in self.params.tensors.iter_mut().zip(&online.params.tensors) {
            for (x, y) in t.data.iter_mut().zip(&o.data) {
                *x = tau * y + (1.0 - tau) * *x;
            }
        }
        Ok(())
    }

    /// Copies values (not optimizer state) from `other`.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<(), NnError> {
        self.soft_update(other, 1.0)
    }

    fn check_layout(&self, other: &ParamStore) -> Result<(), NnError> {
        let a = &self.params.tensors;
        let b = &other.params.tensors;
        if a.len() != b.len() {
            return Err(NnError::Shape(format!(
                "{} tensors vs {}",
                a.len(),
                b.len()
            )));
        }
        for (x, y) in a.iter().zip(b) {
            if x.name != y.name || x.shape != y.shape {
                return Err(NnError::Shape(format!(
                    "{} {:?} vs {} {:?}",
                    x.name, x.shape, y.name, y.shape
                )));
            }
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<(), NnError> {
        for t in &self.params.tensors {
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(NnError::NonFiniteParam(t.name.clone()));
            }
        }
        Ok(())
    }

    /// Binary layout (little endian): magic `QTPS`, u32 version, u32 tensor count;
    /// per tensor a u32-length-prefixed UTF-8 name, u32 rank, u64 dims and the
    /// row-major f64 values; then the u64 Adam step and the first and second
    /// moment buffers in tensor order.
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), NnError> {
        w.write_all(STORE_MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.tensors.len() as u32).to_le_bytes())?;
        for t in &self.params.tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            write_f64s(w, &t.data)?;
        }
        w.write_all(&self.adam_step.to_le_bytes())?;
        for m in &self.adam_m {
            write_f64s(w, m)?;
        }
        for v in &self.adam_v {
            write_f64s(w, v)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, NnError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != STORE_MAGIC {
            return Err(NnError::Corrupt("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != STORE_VERSION {
            return Err(NnError::Version(version));
        }
        let count = read_u32(r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            if name_len > 1 << 16 {
                return Err(NnError::Corrupt("tensor name too long".into()));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| NnError::Corrupt("tensor name not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(NnError::Corrupt("tensor rank too large".into()));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r)? as usize);
            }
            let len: usize = shape.iter().product();
            if len > 1 << 28 {
                return Err(NnError::Corrupt("tensor too large".into()));
            }
            let data = read_f64s(r, len)?;
            store.push(&name, shape, data);
        }
        store.adam_step = read_u64(r)?;
        for k in 0..count {
            let len = store.adam_m[k].len();
            store.adam_m[k] = read_f64s(r, len)?;
        }
        for k in 0..count {
            let len = store.adam_v[k].len();
            store.adam_v[k] = read_f64s(r, len)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> io::Result<()> {
    for x in xs {
        w.write_all(&x.to_bits().to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64, NnError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, len: usize) -> Result<Vec<f64>, NnError> {
    (0..len).map(|_| read_u64(r).map(f64::from_bits)).collect()
}

fn truncated(e: io::Error) -> NnError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        NnError::Corrupt("truncated file".into())
    } else {
        NnError::Io(e)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let a = (logits[0] - m).exp();
    let b = (logits[1] - m).exp();
    [a / (a + b), b / (a + b)]
}

/// `out += W x` with `W` row-major `rows x cols`.
fn matvec_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out[r] += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += W^T y`.
fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let yr = y[r];
        if yr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * yr;
        }
    }
}

/// `G += y x^T`.
fn outer_acc(g: &mut [f64], rows: usize, cols: usize, y: &[f64], x: &[f64]) {
    for r in 0..rows {
        let yr = y[r];
        if yr == 0.0 {
            continue;
        }
        let row = &mut g[r * cols..(r + 1) * cols];
        for (o, b) in row.iter_mut().zip(x) {
            *o += yr * b;
        }
    }
}

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: store.add_weight(&format!("{name}.weight"), out_dim, in_dim, rng),
            bias: store.add_zeros(&format!("{name}.bias"), vec![out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, p: &Params, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut y = p.get(self.bias).to_vec();
        matvec_acc(p.get(self.weight), self.out_dim, self.in_dim, x, &mut y);
        y
    }

    /// Accumulates parameter gradients and returns dL/dx.
    pub fn backward(&self, p: &Params, g: &mut Gradients, x: &[f64], dy: &[f64]) -> Vec<f64> {
        outer_acc(g.get_mut(self.weight), self.out_dim, self.in_dim, dy, x);
        for (b, d) in g.get_mut(self.bias).iter_mut().zip(dy) {
            *b += d;
        }
        let mut dx = vec![0.0; self.in_dim];
        matvec_t_acc(p.get(self.weight), self.out_dim, self.in_dim, dy, &mut dx);
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentCellSpec {
    pub kind: CellKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl RecurrentCellSpec {
    /// Length of the carried state: `h` for GRU, `h` then `c` for LSTM.
    pub fn state_dim(&self) -> usize {
        match self.kind {
            CellKind::Gru => self.hidden_dim,
            CellKind::Lstm => 2 * self.hidden_dim,
        }
    }

    fn gates(&self) -> usize {
        match self.kind {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }
}

/// GRU (gates r, z, n) or LSTM (gates i, f, g, o) with stacked gate weights.
///
/// GRU: `n = tanh(Wx_n x + Wh_n (r*h) + b_n)`, `h' = (1-z)*h + z*n`.
/// LSTM: `c' = f*c + i*g`, `h' = o*tanh(c')`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecurrentCell {
    pub spec: RecurrentCellSpec,
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
}

/// Activations cached by one cell step.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCache {
    pub x: Vec<f64>,
    pub state_prev: Vec<f64>,
    /// Post-activation gate values, gate-major.
    pub gates: Vec<f64>,
    /// GRU: `r*h`. LSTM: `tanh(c')`.
    pub aux: Vec<f64>,
    pub state: Vec<f64>,
}

impl CellCache {
    pub fn hidden(&self, hidden_dim: usize) -> &[f64] {
        &self.state[..hidden_dim]
    }
}

impl RecurrentCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: RecurrentCellSpec,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        if spec.input_dim == 0 || spec.hidden_dim == 0 {
            return Err(NnError::Shape("cell dimensions must be >= 1".into()));
        }
        let rows = spec.gates() * spec.hidden_dim;
        Ok(Self {
            spec,
            w_input: store.add_weight(&format!("{name}.w_input"), rows, spec.input_dim, rng),
            w_hidden: store.add_weight(&format!("{name}.w_hidden"), rows, spec.hidden_dim, rng),
            bias: store.add_zeros(&format!("{name}.bias"), vec![rows]),
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.spec.hidden_dim
    }

    pub fn zero_state(&self) -> Vec<f64> {
        vec![0.0; self.spec.state_dim()]
    }

    pub fn forward(&self, p: &Params, state_prev: &[f64], x: &[f64]) -> Result<CellCache, NnError> {
        if x.len() != self.spec.input_dim || state_prev.len() != self.spec.state_dim() {
            return Err(NnError::Shape(format!(
                "cell expects input {} / state {}, got {} / {}",
                self.spec.input_dim,
                self.spec.state_dim(),
                x.len(),
                state_prev.len()
            )));
        }
        Ok(match self.spec.kind {
            CellKind::Gru => self.gru_forward(p, state_prev, x),
            CellKind::Lstm => self.lstm_forward(p, state_prev, x),
        })
    }

    fn gru_forward(&self, p: &Params, h: &[f64], x: &[f64]) -> CellCache {
        let hd = self.spec.hidden_dim;
        let id = self.spec.input_dim;
        let wx = p.get(self.w_input);
        let wh = p.get(self.w_hidden);
        let mut pre = p.get(self.bias).to_vec();
        matvec_acc(wx, 3 * hd, id, x, &mut pre);
        // r and z see h directly; n sees r*h
        matvec_acc(&wh[..2 * hd * hd], 2 * hd, hd, h, &mut pre[..2 * hd]);
        let mut gates = vec![0.0; 3 * hd];
        for j in 0..2 * hd {
            gates[j] = sigmoid(pre[j]);
        }
        let rh: Vec<f64> = (0..hd).map(|j| gates[j] * h[j]).collect();
        matvec_acc(&wh[2 * hd * hd..], hd, hd, &rh, &mut pre[2 * hd..]);
        for j in 0..hd {
            gates[2 * hd + j] = pre[2 * hd + j].tanh();
        }
        let state = (0..hd)
            .map(|j| {
                let z = gates[hd + j];
                (1.0 - z) * h[j] + z * gates[2 * hd + j]
            })
            .collect();
        CellCache {
            x: x.to_vec(),
            state_prev: h.to_vec(),
            gates,
            aux: rh,
            state,
        }
    }

    fn lstm_forward(&self, p: &Params, state_prev: &[f64], x: &[f64]) -> CellCache {
        let hd = self.spec.hidden_dim;
        let (h, c) = state_prev.split_at(hd);
        let mut pre = p.get(self.bias).to_vec();
        matvec_acc(
            p.get(self.w_input),
            4 * hd,
            self.spec.input_dim,
            x,
            &mut pre,
        );
        matvec_acc(p.get(self.w_hidden), 4 * hd, hd, h, &mut pre);
        let mut gates = vec![0.0; 4 * hd];
        for j in 0..hd {
            gates[j] = sigmoid(pre[j]);
            gates[hd + j] = sigmoid(pre[hd + j]);
            gates[2 * hd + j] = pre[2 * hd + j].tanh();
            gates[3 * hd + j] = sigmoid(pre[3 * hd + j]);
        }
        let mut state = vec![0.0; 2 * hd];
        let mut tanh_c = vec![0.0; hd];
        for j in 0..hd {
            let c_new = gates[hd + j] * c[j] + gates[j] * gates[2 * hd + j];
            tanh_c[j] = c_new.tanh();
            state[hd + j] = c_new;
            state[j] = gates[3 * hd + j] * tanh_c[j];
        }
        CellCache {
            x: x.to_vec(),
            state_prev: state_prev.to_vec(),
            gates,
            aux: tanh_c,
            state,
        }
    }

    /// Backward through one step. `d_state` is dL/d(state) for this step's output
    /// state; returns (dL/d(state_prev), dL/dx).
    pub fn backward(
        &self,
        p: &Params,
        g: &mut Gradients,
        cache: &CellCache,
        d_state: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        match self.spec.kind {
            CellKind::Gru => self.gru_backward(p, g, cache, d_state),
            CellKind::Lstm => self.lstm_backward(p, g, cache, d_state),
        }
    }

    fn gru_backward(
        &self,
        p: &Params,
        g: &mut Gradients,
        c: &CellCache,
        dh_out: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let hd = self.spec.hidden_dim;
        let id = self.spec.input_dim;
        let wx = p.get(self.w_input);
        let wh = p.get(self.w_hidden);
        let h = &c.state_prev;
        let (r, rest) = c.gates.split_at(hd);
        let (z, n) = rest.split_at(hd);

        let mut dh = vec![0.0; hd];
        let mut da = vec![0.0; 3 * hd];
        for j in 0..hd {
            let d = dh_out[j];
            dh[j] += d * (1.0 - z[j]);
            let dz = d * (n[j] - h[j]);
            let dn = d * z[j];
            da[hd + j] = dz * z[j] * (1.0 - z[j]);
            da[2 * hd + j] = dn * (1.0 - n[j] * n[j]);
        }
        // through the candidate's recurrent term W_hn (r*h)
        let mut d_rh = vec![0.0; hd];
        matvec_t_acc(&wh[2 * hd * hd..], hd, hd, &da[2 * hd..], &mut d_rh);
        for j in 0..hd {
            dh[j] += d_rh[j] * r[j];
            let dr = d_rh[j] * h[j];
            da[j] = dr * r[j] * (1.0 - r[j]);
        }
        matvec_t_acc(&wh[..2 * hd * hd], 2 * hd, hd, &da[..2 * hd], &mut dh);
        let mut dx = vec![0.0; id];
        matvec_t_acc(wx, 3 * hd, id, &da, &mut dx);

        outer_acc(g.get_mut(self.w_input), 3 * hd, id, &da, &c.x);
        let gwh = g.get_mut(self.w_hidden);
        outer_acc(&mut gwh[..2 * hd * hd], 2 * hd, hd, &da[..2 * hd], h);
        outer_acc(&mut gwh[2 * hd * hd..], hd, hd, &da[2 * hd..], &c.aux);
        for (b, d) in g.get_mut(self.bias).iter_mut().zip(&da) {
            *b += d;
        }
        (dh, dx)
    }

    fn lstm_backward(
        &self,
        p: &Params,
        g: &mut Gradients,
        cache: &CellCache,
        d_state: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let hd = self.spec.hidden_dim;
        let id = self.spec.input_dim;
        let (h_prev, c_prev) = cache.state_prev.split_at(hd);
        let gt = &cache.gates;
        let (dh_out, dc_out) = d_state.split_at(hd);

        let mut da = vec![0.0; 4 * hd];
        let mut d_state_prev = vec![0.0; 2 * hd];
        for j in 0..hd {
            let (i, f, gg, o) = (gt[j], gt[hd + j], gt[2 * hd + j], gt[3 * hd + j]);
            let tc = cache.aux[j];
            let d_o = dh_out[j] * tc;
            let dc = dc_out[j] + dh_out[j] * o * (1.0 - tc * tc);
            da[j] = dc * gg * i * (1.0 - i);
            da[hd + j] = dc * c_prev[j] * f * (1.0 - f);
            da[2 * hd + j] = dc * i * (1.0 - gg * gg);
            da[3 * hd + j] = d_o * o * (1.0 - o);
            d_state_prev[hd + j] = dc * f;
        }
        matvec_t_acc(
            p.get(self.w_hidden),
            4 * hd,
            hd,
            &da,
            &mut d_state_prev[..hd],
        );
        let mut dx = vec![0.0; id];
        matvec_t_acc(p.get(self.w_input), 4 * hd, id, &da, &mut dx);

        outer_acc(g.get_mut(self.w_input), 4 * hd, id, &da, &cache.x);
        outer_acc(g.get_mut(self.w_hidden), 4 * hd, hd, &da, h_prev);
        for (b, d) in g.get_mut(self.bias).iter_mut().zip(&da) {
            *b += d;
        }
        (d_state_prev, dx)
    }

    /// Unrolls from the zero state over `inputs`.
    pub fn forward_sequence(
        &self,
        p: &Params,
        inputs: &[Vec<f64>],
    ) -> Result<Vec<CellCache>, NnError> {
        let mut tape = Vec::with_capacity(inputs.len());
        let mut state = self.zero_state();
        for x in inputs {
            let cache = self.forward(p, &state, x)?;
            state.clone_from(&cache.state);
            tape.push(cache);
        }
        Ok(tape)
    }

    /// Backpropagation through time. `d_hidden[t]` is dL/dh_t from everything
    /// that reads the hidden output at step t. Returns dL/dx_t per step.
    pub fn backward_sequence(
        &self,
        p: &Params,
        g: &mut Gradients,
        tape: &[CellCache],
        d_hidden: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>, NnError> {
        if tape.len() != d_hidden.len() {
            return Err(NnError::TapeLength {
                tape: tape.len(),
                upstream: d_hidden.len(),
            });
        }
        let hd = self.spec.hidden_dim;
        let mut carry = vec![0.0; self.spec.state_dim()];
        let mut dxs = vec![Vec::new(); tape.len()];
        for t in (0..tape.len()).rev() {
            if d_hidden[t].len() != hd {
                return Err(NnError::Shape(format!(
                    "upstream gradient at step {t} has wrong length"
                )));
            }
            let mut d_state = carry;
            for j in 0..hd {
                d_state[j] += d_hidden[t][j];
            }
            let (d_prev, dx) = self.backward(p, g, &tape[t], &d_state);
            carry = d_prev;
            dxs[t] = dx;
        }
        Ok(dxs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_store_cell(
        kind: CellKind,
        input_dim: usize,
        hidden_dim: usize,
    ) -> (ParamStore, RecurrentCell) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = RecurrentCell::new(
            &mut store,
            "cell",
            RecurrentCellSpec {
                kind,
                input_dim,
                hidden_dim,
            },
            &mut rng,
        )
        .unwrap();
        for k in 0..store.tensors().len() {
            store.value_mut(ParamId(k)).fill(0.0);
        }
        (store, cell)
    }

    #[test]
    fn zero_gru_is_fixed_point() {
        let (store, cell) = zero_store_cell(CellKind::Gru, 3, 4);
        let c = cell
            .forward(store.params(), &[0.0; 4], &[1.0, -2.0, 3.0])
            .unwrap();
        assert_eq!(c.state, vec![0.0; 4]);
    }

    #[test]
    fn scalar_gru_by_hand() {
        let (mut store, cell) = zero_store_cell(CellKind::Gru, 1, 1);
        // gates r, z, n: wx = [0.5, -0.3, 0.8], wh = [0.2, 0.4, -0.6], b = [0.1, 0.0, -0.2]
        store
            .value_mut(cell.w_input)
            .copy_from_slice(&[0.5, -0.3, 0.8]);
        store
            .value_mut(cell.w_hidden)
            .copy_from_slice(&[0.2, 0.4, -0.6]);
        store
            .value_mut(cell.bias)
            .copy_from_slice(&[0.1, 0.0, -0.2]);
        let (x, h) = (2.0_f64, 0.5_f64);
        let r = 1.0 / (1.0 + (-(0.5 * x + 0.2 * h + 0.1)).exp());
        let z = 1.0 / (1.0 + (-(-0.3 * x + 0.4 * h)).exp());
        let n = (0.8 * x - 0.6 * r * h - 0.2).tanh();
        let expected = (1.0 - z) * h + z * n;
        let c = cell.forward(store.params(), &[h], &[x]).unwrap();
        assert!((c.state[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn saturated_forget_gate_carries_cell_state() {
        let (mut store, cell) = zero_store_cell(CellKind::Lstm, 2, 3);
        // forget bias +50, input gate and candidate inert, output gate at sigmoid(0)
        let bias = store.value_mut(cell.bias);
        bias[3..6].fill(50.0);
        let c_prev = [0.7, -0.2, 0.4];
        let state_prev = [0.1, 0.2, 0.3, c_prev[0], c_prev[1], c_prev[2]];
        let c = cell
            .forward(store.params(), &state_prev, &[5.0, -5.0])
            .unwrap();
        for (j, cp) in c_prev.iter().enumerate() {
            assert!((c.state[3 + j] - cp).abs() < 1e-15);
            assert!((c.state[j] - 0.5 * cp.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let (store, cell) = zero_store_cell(CellKind::Gru, 3, 4);
        assert!(matches!(
            cell.forward(store.params(), &[0.0; 4], &[1.0]),
            Err(NnError::Shape(_))
        ));
        assert!(matches!(
            cell.backward_sequence(
                store.params(),
                &mut Gradients::zeros_like(store.params()),
                &[],
                &[vec![0.0; 4]]
            ),
            Err(NnError::TapeLength { .. })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [CellKind::Gru, CellKind::Lstm] {
            let mut store = ParamStore::new();
            let cell = RecurrentCell::new(
                &mut store,
                "c",
                RecurrentCellSpec {
                    kind,
                    input_dim: 2,
                    hidden_dim: 3,
                },
                &mut rng,
            )
            .unwrap();
            let xs: Vec<Vec<f64>> = (0..5).map(|t| vec![t as f64 * 0.1, 1.0]).collect();
            let tape = cell.forward_sequence(store.params(), &xs).unwrap();
            let (p, g) = store.split_mut();
            cell.backward_sequence(p, g, &tape, &vec![vec![0.0; 3]; 5])
                .unwrap();
            assert_eq!(store.grads().norm(), 0.0);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        Dense::new(&mut store, "d", 3, 2, &mut rng);
        let before = store.flat_values();
        store.adam_step(&AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(store.flat_values(), before);
        assert_eq!(store.adam_steps(), 1);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut store = ParamStore::new();
        let id = store.add_zeros("w", vec![1]);
        store.grads_mut().get_mut(id)[0] = 1.0;
        store.adam_step(&AdamConfig::with_lr(0.1)).unwrap();
        assert!((store.value(id)[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut store = ParamStore::new();
        let id = store.add_zeros("layer.w", vec![2]);
        store.grads_mut().get_mut(id)[1] = f64::NAN;
        match store.adam_step(&AdamConfig::default()) {
            Err(NnError::NonFiniteGradient(name)) => assert_eq!(name, "layer.w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn soft_update_cases() {
        let mut target = ParamStore::new();
        let t = target.add_zeros("w", vec![2]);
        let mut online = ParamStore::new();
        let o = online.add_zeros("w", vec![2]);
        online.value_mut(o).fill(2.0);

        let mut a = target.clone();
        a.soft_update(&online, 0.0).unwrap();
        assert_eq!(a.value(t), &[0.0, 0.0]);
        let mut b = target.clone();
        b.soft_update(&online, 0.5).unwrap();
        assert_eq!(b.value(t), &[1.0, 1.0]);
        let mut c = target.clone();
        c.soft_update(&online, 1.0).unwrap();
        assert_eq!(c.value(t), online.value(o));

        let mut other = ParamStore::new();
        other.add_zeros("w", vec![3]);
        assert!(matches!(
            target.soft_update(&other, 0.5),
            Err(NnError::Shape(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cell = RecurrentCell::new(
            &mut store,
            "cell",
            RecurrentCellSpec {
                kind: CellKind::Lstm,
                input_dim: 3,
                hidden_dim: 2,
            },
            &mut rng,
        )
        .unwrap();
        store.grads_mut().get_mut(cell.bias).fill(0.3);
        store.adam_step(&AdamConfig::default()).unwrap();
        let mut bytes = Vec::new();
        store.write_to(&mut bytes).unwrap();
        let mut loaded = ParamStore::read_from(&mut bytes.as_slice()).unwrap();
        loaded.zero_grad();
        store.zero_grad();
        assert_eq!(loaded, store);

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            ParamStore::read_from(&mut bad.as_slice()),
            Err(NnError::Version(9))
        ));
        assert!(matches!(
            ParamStore::read_from(&mut &bytes[..bytes.len() - 3]),
            Err(NnError::Corrupt(_))
        ));
    }

    #[test]
    fn softmax_is_probability_vector() {
        let p = softmax2([1000.0, -1000.0]);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        assert_eq!(softmax2([0.3, 0.3]), [0.5, 0.5]);
    }
}
