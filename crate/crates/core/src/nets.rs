//! Parameterized function families: multilayer perceptrons, a gated
//! recurrent cell for encoding irregular sequences, a named parameter store
//! with Adam state, Glorot-uniform initialization, and a self-describing
//! binary checkpoint container.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{DiffError, Gradients, Shape, Tape, Tensor};
use crate::util;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("width mismatch: expected input of width {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{0}` already registered")]
    DuplicateParam(String),
    #[error("gradient map missing key `{0}`")]
    MissingGradient(String),
    #[error("gradient map has unknown key `{0}`")]
    UnexpectedGradient(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Fully connected net with tanh hidden activations and a linear output
/// layer. `widths` runs input, hidden..., output.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MlpSpec {
    widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Result<Self, NetError> {
        if hidden.is_empty() {
            return Err(NetError::InvalidSpec("at least one hidden layer".into()));
        }
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        if widths.iter().any(|&w| w == 0) {
            return Err(NetError::InvalidSpec("all widths must be >= 1".into()));
        }
        Ok(MlpSpec { widths })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.widths.windows(2).map(|w| (w[0], w[1]))
    }
}

/// Gated recurrent cell dimensions. The input carries the observation
/// vector plus a presence mask and the time gap since the previous
/// observation.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GruSpec {
    pub input_width: usize,
    pub hidden_width: usize,
}

impl GruSpec {
    pub fn new(input_width: usize, hidden_width: usize) -> Result<Self, NetError> {
        if input_width == 0 || hidden_width == 0 {
            return Err(NetError::InvalidSpec("GRU widths must be >= 1".into()));
        }
        Ok(GruSpec {
            input_width,
            hidden_width,
        })
    }
}

#[derive(Clone, Debug)]
struct Param {
    shape: Shape,
    values: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named parameter tensors with per-parameter Adam moments and a shared
/// step counter. Name order is fixed (sorted) so every traversal is
/// deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

/// Tape handles for every parameter of a store, valid for one tape.
pub struct BoundParams {
    tensors: BTreeMap<String, Tensor>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Tensor, NetError> {
        self.tensors
            .get(name)
            .copied()
            .ok_or_else(|| NetError::UnknownParam(name.to_string()))
    }
}

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Vec<f64>>;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, shape: Shape, values: Vec<f64>) -> Result<(), NetError> {
        if values.len() != shape.len() {
            return Err(NetError::InvalidSpec(format!(
                "parameter `{name}`: {} values for shape {shape}",
                values.len()
            )));
        }
        if self.params.contains_key(name) {
            return Err(NetError::DuplicateParam(name.to_string()));
        }
        let n = values.len();
        self.params.insert(
            name.to_string(),
            Param {
                shape,
                values,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(|p| p.values.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn shape(&self, name: &str) -> Result<Shape, NetError> {
        self.params
            .get(name)
            .map(|p| p.shape)
            .ok_or_else(|| NetError::UnknownParam(name.to_string()))
    }

    pub fn values(&self, name: &str) -> Result<&[f64], NetError> {
        self.params
            .get(name)
            .map(|p| p.values.as_slice())
            .ok_or_else(|| NetError::UnknownParam(name.to_string()))
    }

    pub fn values_mut(&mut self, name: &str) -> Result<&mut [f64], NetError> {
        self.params
            .get_mut(name)
            .map(|p| p.values.as_mut_slice())
            .ok_or_else(|| NetError::UnknownParam(name.to_string()))
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut tensors = BTreeMap::new();
        for (name, p) in &self.params {
            let t = tape
                .leaf(&p.values, p.shape)
                .expect("stored parameter always shape-consistent");
            tensors.insert(name.clone(), t);
        }
        BoundParams { tensors }
    }

    /// Collects per-parameter gradients after a backward pass.
    pub fn extract_grads(&self, grads: &Gradients, bound: &BoundParams) -> GradMap {
        let mut out = GradMap::new();
        for (name, tensor) in &bound.tensors {
            out.insert(name.clone(), grads.get(*tensor).to_vec());
        }
        out
    }

    /// One Adam update with bias correction. The gradient map must carry
    /// exactly the store's parameter names.
    pub fn adam_step(&mut self, grads: &GradMap, cfg: &AdamConfig) -> Result<(), NetError> {
        for key in grads.keys() {
            if !self.params.contains_key(key) {
                return Err(NetError::UnexpectedGradient(key.clone()));
            }
        }
        for name in self.params.keys() {
            if !grads.contains_key(name) {
                return Err(NetError::MissingGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in self.params.iter_mut() {
            let g = &grads[name];
            for i in 0..p.values.len() {
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g[i];
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                p.values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .values()
            .all(|p| p.values.iter().all(|v| v.is_finite()))
    }
}

fn glorot_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Registers MLP weights `{prefix}.w{i}` / biases `{prefix}.b{i}`. Weights
/// are Glorot-uniform, biases zero.
pub fn init_mlp(
    store: &mut ParamStore,
    prefix: &str,
    spec: &MlpSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(), NetError> {
    for (i, (fan_in, fan_out)) in spec.layers().enumerate() {
        store.insert(
            &format!("{prefix}.w{i}"),
            Shape::Matrix(fan_out, fan_in),
            glorot_uniform(rng, fan_in, fan_out, fan_in * fan_out),
        )?;
        store.insert(
            &format!("{prefix}.b{i}"),
            Shape::Vector(fan_out),
            vec![0.0; fan_out],
        )?;
    }
    Ok(())
}

const GRU_GATES: [&str; 3] = ["r", "z", "n"];

/// Registers GRU matrices `{prefix}.w_{gate}` (input), `{prefix}.u_{gate}`
/// (recurrent) and zero biases `{prefix}.b_{gate}` for gates r, z, n.
pub fn init_gru(
    store: &mut ParamStore,
    prefix: &str,
    spec: &GruSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(), NetError> {
    let (inw, h) = (spec.input_width, spec.hidden_width);
    for gate in GRU_GATES {
        store.insert(
            &format!("{prefix}.w_{gate}"),
            Shape::Matrix(h, inw),
            glorot_uniform(rng, inw, h, inw * h),
        )?;
        store.insert(
            &format!("{prefix}.u_{gate}"),
            Shape::Matrix(h, h),
            glorot_uniform(rng, h, h, h * h),
        )?;
        store.insert(&format!("{prefix}.b_{gate}"), Shape::Vector(h), vec![0.0; h])?;
    }
    Ok(())
}

/// A named architecture piece for [`init_params`].
pub enum SpecEntry<'a> {
    Mlp(&'a MlpSpec),
    Gru(&'a GruSpec),
}

/// Builds a store for a list of (prefix, spec) pairs, reproducible from the
/// seed. Draw order follows the list order.
pub fn init_params(specs: &[(&str, SpecEntry)], seed: u64) -> Result<ParamStore, NetError> {
    let mut store = ParamStore::new();
    let mut rng = util::rng_from(seed, &[util::salt::INIT]);
    for (prefix, entry) in specs {
        match entry {
            SpecEntry::Mlp(spec) => init_mlp(&mut store, prefix, spec, &mut rng)?,
            SpecEntry::Gru(spec) => init_gru(&mut store, prefix, spec, &mut rng)?,
        }
    }
    Ok(store)
}

/// Affine layer: `W x + b`.
fn affine(
    tape: &mut Tape,
    bound: &BoundParams,
    w: &str,
    b: &str,
    x: Tensor,
) -> Result<Tensor, NetError> {
    let wt = bound.get(w)?;
    let bt = bound.get(b)?;
    let wx = tape.matmul(wt, x)?;
    Ok(tape.add(wx, bt)?)
}

/// Forward pass of an MLP: tanh on hidden layers, identity output.
pub fn mlp_forward(
    tape: &mut Tape,
    spec: &MlpSpec,
    bound: &BoundParams,
    prefix: &str,
    x: Tensor,
) -> Result<Tensor, NetError> {
    if x.len() != spec.input_width() {
        return Err(NetError::WidthMismatch {
            expected: spec.input_width(),
            got: x.len(),
        });
    }
    let n_layers = spec.widths.len() - 1;
    let mut h = x;
    for i in 0..n_layers {
        h = affine(tape, bound, &format!("{prefix}.w{i}"), &format!("{prefix}.b{i}"), h)?;
        if i + 1 < n_layers {
            h = tape.tanh(h);
        }
    }
    Ok(h)
}

/// One gated-recurrent update:
///
/// ```text
/// r = sigmoid(W_r x + U_r h + b_r)
/// z = sigmoid(W_z x + U_z h + b_z)
/// n = tanh(W_n x + U_n (r*h) + b_n)
/// h' = (1 - z)*n + z*h
/// ```
pub fn gru_step(
    tape: &mut Tape,
    spec: &GruSpec,
    bound: &BoundParams,
    prefix: &str,
    x: Tensor,
    h_prev: Tensor,
) -> Result<Tensor, NetError> {
    if x.len() != spec.input_width {
        return Err(NetError::WidthMismatch {
            expected: spec.input_width,
            got: x.len(),
        });
    }
    if h_prev.len() != spec.hidden_width {
        return Err(NetError::WidthMismatch {
            expected: spec.hidden_width,
            got: h_prev.len(),
        });
    }

    let gate = |tape: &mut Tape, g: &str, state: Tensor| -> Result<Tensor, NetError> {
        let wx = {
            let w = bound.get(&format!("{prefix}.w_{g}"))?;
            tape.matmul(w, x)?
        };
        let uh = {
            let u = bound.get(&format!("{prefix}.u_{g}"))?;
            tape.matmul(u, state)?
        };
        let s = tape.add(wx, uh)?;
        let b = bound.get(&format!("{prefix}.b_{g}"))?;
        Ok(tape.add(s, b)?)
    };

    let r_pre = gate(tape, "r", h_prev)?;
    let r = tape.sigmoid_t(r_pre);
    let z_pre = gate(tape, "z", h_prev)?;
    let z = tape.sigmoid_t(z_pre);
    let rh = tape.mul(r, h_prev)?;
    let n_pre = gate(tape, "n", rh)?;
    let n = tape.tanh(n_pre);

    let ones = tape.vector(&vec![1.0; spec.hidden_width]);
    let one_minus_z = tape.sub(ones, z)?;
    let a = tape.mul(one_minus_z, n)?;
    let b = tape.mul(z, h_prev)?;
    Ok(tape.add(a, b)?)
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("invalid header json: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Net(#[from] NetError),
}

const CKPT_MAGIC: &[u8; 8] = b"CFODECKP";
const CKPT_VERSION: u32 = 1;

/// Writes a checkpoint: magic, version, a JSON header with all
/// hyperparameters, then each named parameter as a length-prefixed sequence
/// of little-endian f64 words. Round-trips are bit-exact.
pub fn save_checkpoint(
    path: &Path,
    header: &serde_json::Value,
    store: &ParamStore,
) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let header_text = util::to_json_string(header)?;
    buf.extend_from_slice(&(header_text.len() as u64).to_le_bytes());
    buf.extend_from_slice(header_text.as_bytes());
    buf.extend_from_slice(&(store.params.len() as u64).to_le_bytes());
    for (name, p) in &store.params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        match p.shape {
            Shape::Vector(n) => {
                buf.push(1);
                buf.extend_from_slice(&(n as u64).to_le_bytes());
            }
            Shape::Matrix(r, c) => {
                buf.push(2);
                buf.extend_from_slice(&(r as u64).to_le_bytes());
                buf.extend_from_slice(&(c as u64).to_le_bytes());
            }
        }
        buf.extend_from_slice(&(p.values.len() as u64).to_le_bytes());
        for v in &p.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
}

/// Reads a checkpoint. Adam moments are not persisted; a loaded store starts
/// with fresh optimizer state.
pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, ParamStore), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let mut cur = Cursor { buf: &bytes, pos: 0 };
    if cur.take(8)? != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32()?;
    if version != CKPT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let header_len = cur.u64()? as usize;
    let header: serde_json::Value = serde_json::from_slice(cur.take(header_len)?)?;
    let n_params = cur.u64()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n_params {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("non-utf8 parameter name".into()))?;
        let shape = match cur.u8()? {
            1 => Shape::Vector(cur.u64()? as usize),
            2 => {
                let r = cur.u64()? as usize;
                let c = cur.u64()? as usize;
                Shape::Matrix(r, c)
            }
            tag => return Err(CheckpointError::Corrupt(format!("bad shape tag {tag}"))),
        };
        let len = cur.u64()? as usize;
        if len != shape.len() {
            return Err(CheckpointError::Corrupt(format!(
                "parameter `{name}`: {len} values for shape {shape}"
            )));
        }
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        store.insert(&name, shape, values)?;
    }
    if cur.pos != bytes.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok((header, store))
}
