//! Parameters, layers, the AdamW optimizer, weight clipping and the binary
//! checkpoint format.

use std::io::{Read, Write};
use std::ops::Index;

use rand::Rng as _;

use crate::autodiff::{Tape, Var, LEAKY_RELU_SLOPE};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Plain parameter storage: shape plus row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    /// `[rows, cols]` view used on the tape; rank-1 tensors become rows.
    fn matrix_shape(&self) -> [usize; 2] {
        match self.shape.as_slice() {
            [] => [1, 1],
            [n] => [1, *n],
            [r, c] => [*r, *c],
            more => [more[0], more[1..].iter().product()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named collection of parameters owned by one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    /// Puts every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let [r, c] = p.value.matrix_shape();
                let data = p.value.data.clone();
                if trainable {
                    tape.param(r, c, data)
                } else {
                    tape.constant(r, c, data)
                }
                .expect("tensor shape is validated on construction")
            })
            .collect();
        Bound { vars }
    }

    /// FNV-1a over names and the bit patterns of every entry.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        for p in &self.params {
            h.write(p.name.as_bytes());
            for d in &p.value.shape {
                h.write(&(*d as u64).to_le_bytes());
            }
            for v in &p.value.data {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.0
    }

    /// Overwrites values from `named`, which must cover every parameter with
    /// the same shape. Extra entries are ignored.
    pub fn load_from(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        for p in &mut self.params {
            let Some((_, t)) = named.iter().find(|(n, _)| *n == p.name) else {
                return Err(Error::Checkpoint(format!("missing parameter `{}`", p.name)));
            };
            if t.shape != p.value.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?} in the checkpoint, model expects {:?}",
                    p.name, t.shape, p.value.shape
                )));
            }
            p.value.data.clone_from(&t.data);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.data.iter().all(|v| v.is_finite()))
    }
}

struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

/// Tape handles for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Gradients in store order, read after [`Tape::backward`].
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|v| {
                let g = tape.grad(*v);
                if g.is_empty() {
                    vec![0.0; tape.value(*v).len()]
                } else {
                    g.to_vec()
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Softplus,
}

impl Activation {
    pub fn leaky() -> Self {
        Activation::LeakyRelu(LEAKY_RELU_SLOPE)
    }

    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu(s) => tape.leaky_relu(x, s),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Softplus => tape.softplus(x),
        }
    }
}

/// `[−1/√fan_in, 1/√fan_in]` uniform draws.
fn uniform_init(rng: &mut Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Fully connected layer `activation(x·Wᵀ + b)` with `W: out×in`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        let w = uniform_init(rng, out_dim * in_dim, in_dim);
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::new(vec![out_dim, in_dim], w).expect("sized above"),
        );
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::new(vec![out_dim], vec![0.0; out_dim]).expect("sized above"),
        );
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape[1] != self.in_dim {
            return Err(Error::shape("dense", &shape, &[self.out_dim, self.in_dim]));
        }
        let h = tape.matmul_bt(x, bound[self.weight])?;
        let h = tape.add_row(h, bound[self.bias])?;
        Ok(self.activation.apply(tape, h))
    }
}

/// Inverted dropout configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    rate: f64,
    pub training: bool,
}

impl DropoutSpec {
    pub fn new(rate: f64, training: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self { rate, training })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn with_training(self, training: bool) -> Self {
        Self { training, ..self }
    }
}

/// Training mode zeroes each unit with probability `rate` and scales the
/// survivors by `1/(1 − rate)`; eval mode is the identity.
pub fn dropout_forward(tape: &mut Tape, spec: DropoutSpec, x: Var, rng: &mut Rng) -> Var {
    if !spec.training || spec.rate == 0.0 {
        return x;
    }
    let [r, c] = tape.shape(x);
    let keep = 1.0 - spec.rate;
    let mask: Vec<f64> = (0..r * c)
        .map(|_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let m = tape.constant(r, c, mask).expect("mask sized to x");
    tape.mul(x, m).expect("mask sized to x")
}

/// LSTM cell with gate blocks stacked in the order input, forget, candidate,
/// output: `W_ih: 4h×in`, `W_hh: 4h×h`, `b: 4h`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let w_ih = uniform_init(rng, 4 * hidden * input, input);
        let w_hh = uniform_init(rng, 4 * hidden * hidden, hidden);
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        Self::from_parts(store, name, input, hidden, w_ih, w_hh, b).expect("sized above")
    }

    /// Cell with explicit parameters.
    pub fn from_parts(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        w_ih: Vec<f64>,
        w_hh: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let w_ih = store.add(format!("{name}.w_ih"), Tensor::new(vec![4 * hidden, input], w_ih)?);
        let w_hh = store.add(format!("{name}.w_hh"), Tensor::new(vec![4 * hidden, hidden], w_hh)?);
        let bias = store.add(format!("{name}.bias"), Tensor::new(vec![4 * hidden], bias)?);
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        })
    }

    /// One step; `x: m×in`, `h_prev`, `c_prev: m×hidden`. Returns `(h, c)`.
    pub fn step(&self, tape: &mut Tape, bound: &Bound, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let h = self.hidden;
        let [m, d] = tape.shape(x);
        if d != self.input {
            return Err(Error::shape("lstm input", &[m, d], &[m, self.input]));
        }
        for s in [tape.shape(h_prev), tape.shape(c_prev)] {
            if s != [m, h] {
                return Err(Error::shape("lstm state", &s, &[m, h]));
            }
        }
        let gx = tape.matmul_bt(x, bound[self.w_ih])?;
        let gh = tape.matmul_bt(h_prev, bound[self.w_hh])?;
        let gates = tape.add(gx, gh)?;
        let gates = tape.add_row(gates, bound[self.bias])?;
        let i = tape.slice_cols(gates, 0, h)?;
        let f = tape.slice_cols(gates, h, 2 * h)?;
        let g = tape.slice_cols(gates, 2 * h, 3 * h)?;
        let o = tape.slice_cols(gates, 3 * h, 4 * h)?;
        let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .params()
            .iter()
            .map(|p| vec![0.0; p.value.data.len()])
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)` with bias-corrected moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::shape("adamw", &[store.len()], &[grads.len()]));
        }
        for (p, g) in store.params().iter().zip(grads) {
            if g.len() != p.value.data.len() {
                return Err(Error::shape("adamw", &p.value.shape, &[g.len()]));
            }
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Optimizer {
                    param: p.name.clone(),
                    index,
                });
            }
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in store
            .params_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, gi), mi), vi) in p.value.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Clamps every entry of every parameter into `[−c, c]`.
pub fn clip_weights(store: &mut ParamStore, c: f64) -> Result<()> {
    if !(c > 0.0) {
        return Err(Error::contract(format!("clip bound must be positive, got {c}")));
    }
    for p in store.params_mut() {
        p.value.data.iter_mut().for_each(|v| *v = v.clamp(-c, c));
    }
    Ok(())
}

const MAGIC: &[u8; 4] = b"MDM1";
const VERSION: u32 = 1;

/// Writes named tensors in the `MDM1` checkpoint layout.
pub fn write_checkpoint<'a, W: Write>(
    mut w: W,
    params: impl IntoIterator<Item = &'a Param>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for p in params {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.value.shape.len() as u32).to_le_bytes())?;
        for d in &p.value.shape {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in &p.value.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads every named tensor from an `MDM1` checkpoint.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, expected MDM1".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = cur
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        out.push((name, Tensor { shape, data }));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
