//! Neural building blocks: parameter storage, initialization, dense and
//! embedding layers, LSTMs, the shared convolution stack, and the
//! interaction attention unit.
//!
//! Parameters live in a [`ParameterStore`]; layers hold [`ParamId`] handles
//! and materialize tape leaves through a per-pass [`Session`]. A frozen
//! session skips the tape entirely and is what inference uses.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{backward, concat, Gradients, Tape, Tensor};

// ---------------------------------------------------------------------------
// parameter store

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }

    pub fn from_index(i: usize) -> ParamId {
        ParamId(i)
    }
}

pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// L2 penalty coefficient; 0 disables the term.
    pub l2: f64,
}

/// Named collection of trainable arrays; registration order is fixed and
/// drives deterministic iteration everywhere (updates, serialization).
#[derive(Default)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<f64>, l2: f64) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(Error::Dimension(format!(
                "parameter {name}: {} values for shape {:?}",
                values.len(),
                shape
            )));
        }
        let id = self.entries.len();
        self.entries.push(ParamEntry { name: name.to_string(), shape: shape.to_vec(), values, l2 });
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.entries[id.0].values
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total number of scalar parameters.
    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// Snapshot of all values, aligned with registration order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.values.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) -> Result<()> {
        if snapshot.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "snapshot has {} arrays, store has {}",
                snapshot.len(),
                self.entries.len()
            )));
        }
        for (e, s) in self.entries.iter_mut().zip(snapshot.iter()) {
            if e.values.len() != s.len() {
                return Err(Error::Contract(format!("snapshot length mismatch for {}", e.name)));
            }
            e.values.copy_from_slice(s);
        }
        Ok(())
    }

    /// Binary container: magic "BIPED1", u64 entry count, then per entry
    /// name (u32 length + UTF-8), rank (u32), extents (u32 each), and values
    /// as little-endian f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(b"BIPED1");
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
        f.write_all(&out).map_err(|e| Error::io_at(path, e))?;
        Ok(())
    }

    /// Load values into an existing store; names and shapes must match the
    /// registered parameters exactly.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let loaded = read_container(path)?;
        if loaded.len() != self.entries.len() {
            return Err(Error::Input(format!(
                "{} holds {} arrays, model expects {}",
                path.display(),
                loaded.len(),
                self.entries.len()
            )));
        }
        for ((name, shape, values), e) in loaded.into_iter().zip(self.entries.iter_mut()) {
            if name != e.name || shape != e.shape {
                return Err(Error::Input(format!(
                    "parameter mismatch: file has {name} {shape:?}, model expects {} {:?}",
                    e.name, e.shape
                )));
            }
            e.values = values;
        }
        Ok(())
    }
}

/// Raw entries of a parameter container, in file order.
pub fn read_container(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io_at(path, e))?
        .read_to_end(&mut buf)
        .map_err(|e| Error::io_at(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::Parse(format!(
                "{}: truncated at byte {} (wanted {} more of {})",
                path.display(),
                *pos,
                n,
                buf.len()
            )));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 6)? != b"BIPED1" {
        return Err(Error::Parse(format!("{}: bad magic, expected BIPED1", path.display())));
    }
    let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, nlen)?.to_vec())
            .map_err(|_| Error::Parse(format!("{}: non-UTF8 parameter name", path.display())))?;
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, shape, values));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// initialization

/// Uniform(-r, r) with r = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_out: usize, fan_in: usize) -> Vec<f64> {
    let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| rng.gen_range(-r..r)).collect()
}

/// Orthogonal square matrix via Gram-Schmidt on a Gaussian draw.
pub fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = rows[i].iter().zip(rows[j].iter()).map(|(a, b)| a * b).sum();
            for k in 0..n {
                rows[i][k] -= dot * rows[j][k];
            }
        }
        let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        // a degenerate draw is astronomically unlikely; fall back to a basis vector
        if norm < 1e-12 {
            rows[i].iter_mut().for_each(|v| *v = 0.0);
            rows[i][i % n] = 1.0;
        } else {
            for v in rows[i].iter_mut() {
                *v /= norm;
            }
        }
    }
    rows.into_iter().flatten().collect()
}

// ---------------------------------------------------------------------------
// session

/// One forward pass over a store: either recording on a fresh tape
/// (training) or tape-free (frozen inference). Parameter leaves and their
/// transposes are cached so repeated uses share a node.
pub struct Session<'s> {
    store: &'s ParameterStore,
    tape: Option<Tape>,
    leaves: RefCell<Vec<Option<Tensor>>>,
    transposed: RefCell<Vec<Option<Tensor>>>,
}

impl<'s> Session<'s> {
    pub fn training(store: &'s ParameterStore) -> Self {
        Session {
            store,
            tape: Some(Tape::new()),
            leaves: RefCell::new(vec![None; store.len()]),
            transposed: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn frozen(store: &'s ParameterStore) -> Self {
        Session {
            store,
            tape: None,
            leaves: RefCell::new(vec![None; store.len()]),
            transposed: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn is_training(&self) -> bool {
        self.tape.is_some()
    }

    pub fn param(&self, id: ParamId) -> Tensor {
        let mut leaves = self.leaves.borrow_mut();
        if let Some(t) = &leaves[id.index()] {
            return t.clone();
        }
        let e = self.store.entry(id);
        let t = match &self.tape {
            Some(tape) => tape.leaf(e.values.clone(), &e.shape).expect("registered shape is valid"),
            None => Tensor::from_vec(&e.shape, e.values.clone()).expect("registered shape is valid"),
        };
        leaves[id.index()] = Some(t.clone());
        t
    }

    /// Cached transpose of a 2-d parameter.
    pub fn param_t(&self, id: ParamId) -> Result<Tensor> {
        {
            let cached = self.transposed.borrow();
            if let Some(t) = &cached[id.index()] {
                return Ok(t.clone());
            }
        }
        let t = self.param(id).transpose()?;
        self.transposed.borrow_mut()[id.index()] = Some(t.clone());
        Ok(t)
    }

    /// Run the reverse pass and collect per-parameter gradients aligned with
    /// store order (zero for parameters the loss never touched).
    pub fn parameter_gradients(&self, loss: &Tensor) -> Result<Vec<Vec<f64>>> {
        let grads: Gradients = backward(loss)?;
        let leaves = self.leaves.borrow();
        let mut out = Vec::with_capacity(self.store.len());
        for (id, e) in self.store.iter() {
            let g = leaves[id.index()]
                .as_ref()
                .and_then(|t| grads.get(t))
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; e.values.len()]);
            out.push(g);
        }
        Ok(out)
    }

    /// Sum of l2 * sum(w^2) over penalized parameters, as a graph node so the
    /// penalty contributes gradients.
    pub fn l2_penalty(&self) -> Result<Tensor> {
        let mut total = Tensor::scalar(0.0);
        for (id, e) in self.store.iter() {
            if e.l2 > 0.0 {
                let w = self.param(id);
                let sq = w.mul(&w)?.sum_all().mul_scalar(e.l2);
                total = total.add(&sq)?;
            }
        }
        Ok(total)
    }
}

// ---------------------------------------------------------------------------
// activations

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Sigmoid,
    Tanh,
    Softsign,
    Relu,
}

impl Activation {
    pub fn apply(&self, t: &Tensor) -> Tensor {
        match self {
            Activation::Linear => t.clone(),
            Activation::Sigmoid => t.sigmoid(),
            Activation::Tanh => t.tanh(),
            Activation::Softsign => t.softsign(),
            Activation::Relu => t.relu(),
        }
    }
}

// ---------------------------------------------------------------------------
// dense

/// Affine map with optional activation; weight is [out, in].
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let weight = store.add(
            &format!("{name}.weight"),
            &[out_dim, in_dim],
            xavier_uniform(rng, out_dim, in_dim),
            0.0,
        )?;
        let bias = store.add(&format!("{name}.bias"), &[out_dim], vec![0.0; out_dim], 0.0)?;
        Ok(DenseLayer { weight, bias, activation, in_dim, out_dim })
    }

    /// x: [batch, in] -> [batch, out]
    pub fn forward(&self, sess: &Session, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_dim {
            return Err(Error::Dimension(format!(
                "dense expects [batch, {}], got {:?}",
                self.in_dim,
                x.shape()
            )));
        }
        let wt = sess.param_t(self.weight)?;
        let y = x.matmul(&wt)?.add(&sess.param(self.bias))?;
        Ok(self.activation.apply(&y))
    }
}

// ---------------------------------------------------------------------------
// embedding

/// Lookup table for categorical inputs.
pub struct EmbeddingTable {
    pub table: ParamId,
    pub num_classes: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        num_classes: usize,
        dim: usize,
    ) -> Result<Self> {
        let table = store.add(
            &format!("{name}.table"),
            &[num_classes, dim],
            xavier_uniform(rng, num_classes, dim),
            0.0,
        )?;
        Ok(EmbeddingTable { table, num_classes, dim })
    }

    pub fn forward(&self, sess: &Session, ids: &[usize]) -> Result<Tensor> {
        for &i in ids {
            if i >= self.num_classes {
                return Err(Error::Input(format!(
                    "class id {i} out of range ({} classes)",
                    self.num_classes
                )));
            }
        }
        sess.param(self.table).gather_rows(ids)
    }
}

// ---------------------------------------------------------------------------
// lstm

/// Single-layer LSTM with externally supplied state.
///
/// Gates use sigmoid; the candidate and output activation is the layer's
/// `cell_activation` (softsign everywhere except trajectory decoding and
/// category encoders, which use tanh).
pub struct LstmLayer {
    pub w: [ParamId; 4], // input weights, gate order i, f, o, g; each [hid, in]
    pub u: [ParamId; 4], // recurrent weights, [hid, hid]
    pub b: [ParamId; 4], // biases, [hid]
    pub cell_activation: Activation,
    pub in_dim: usize,
    pub hidden: usize,
}

pub const LSTM_L2: f64 = 1e-4;

impl LstmLayer {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        cell_activation: Activation,
    ) -> Result<Self> {
        let gate_names = ["i", "f", "o", "g"];
        let mut w = Vec::with_capacity(4);
        let mut u = Vec::with_capacity(4);
        let mut b = Vec::with_capacity(4);
        for gn in gate_names {
            w.push(store.add(
                &format!("{name}.w_{gn}"),
                &[hidden, in_dim],
                xavier_uniform(rng, hidden, in_dim),
                LSTM_L2,
            )?);
        }
        for gn in gate_names {
            u.push(store.add(
                &format!("{name}.u_{gn}"),
                &[hidden, hidden],
                orthogonal(rng, hidden),
                LSTM_L2,
            )?);
        }
        for gn in gate_names {
            b.push(store.add(&format!("{name}.b_{gn}"), &[hidden], vec![0.0; hidden], 0.0)?);
        }
        Ok(LstmLayer {
            w: [w[0], w[1], w[2], w[3]],
            u: [u[0], u[1], u[2], u[3]],
            b: [b[0], b[1], b[2], b[3]],
            cell_activation,
            in_dim,
            hidden,
        })
    }

    fn gate(&self, sess: &Session, which: usize, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let wx = x.matmul(&sess.param_t(self.w[which])?)?;
        let uh = h.matmul(&sess.param_t(self.u[which])?)?;
        wx.add(&uh)?.add(&sess.param(self.b[which]))
    }

    /// One step: x [batch, in], h/c [batch, hidden] -> (h', c').
    pub fn step(&self, sess: &Session, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_dim {
            return Err(Error::Dimension(format!(
                "lstm step expects x [batch, {}], got {:?}",
                self.in_dim,
                x.shape()
            )));
        }
        if h.shape() != [x.shape()[0], self.hidden] || c.shape() != h.shape() {
            return Err(Error::Dimension(format!(
                "lstm state shapes {:?}/{:?} do not match [batch, {}]",
                h.shape(),
                c.shape(),
                self.hidden
            )));
        }
        let i = self.gate(sess, 0, x, h)?.sigmoid();
        let f = self.gate(sess, 1, x, h)?.sigmoid();
        let o = self.gate(sess, 2, x, h)?.sigmoid();
        let g = self.cell_activation.apply(&self.gate(sess, 3, x, h)?);
        let c_next = f.mul(c)?.add(&i.mul(&g)?)?;
        let h_next = o.mul(&self.cell_activation.apply(&c_next))?;
        Ok((h_next, c_next))
    }

    /// Run over a step-major sequence from zero state; returns all hidden
    /// states (last entry is the final one).
    pub fn forward_all(&self, sess: &Session, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        if xs.is_empty() {
            return Err(Error::Contract("lstm forward over empty sequence".to_string()));
        }
        let batch = xs[0].shape()[0];
        let mut h = Tensor::zeros(&[batch, self.hidden]);
        let mut c = Tensor::zeros(&[batch, self.hidden]);
        let mut out = Vec::with_capacity(xs.len());
        for x in xs {
            let (hn, cn) = self.step(sess, x, &h, &c)?;
            h = hn;
            c = cn;
            out.push(h.clone());
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// convolution stack

struct ConvSpec {
    out_channels: usize,
    kernel: usize,
    stride: usize,
}

const CONV_STACK: [ConvSpec; 3] = [
    ConvSpec { out_channels: 8, kernel: 5, stride: 2 },
    ConvSpec { out_channels: 16, kernel: 5, stride: 2 },
    ConvSpec { out_channels: 32, kernel: 3, stride: 2 },
];

/// Feature width produced by [`ConvStack::encode_frames`].
pub const CONV_FEAT: usize = 32;

/// Smallest raster extent the three-layer stack accepts.
pub const CONV_MIN_EXTENT: usize = 21;

/// Three shared 2-d convolution layers with ReLU and a global average pool.
/// One parameter set serves every category.
pub struct ConvStack {
    kernels: [ParamId; 3],
    biases: [ParamId; 3],
    pub map_h: usize,
    pub map_w: usize,
}

impl ConvStack {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        map_h: usize,
        map_w: usize,
    ) -> Result<Self> {
        if map_h < CONV_MIN_EXTENT || map_w < CONV_MIN_EXTENT {
            return Err(Error::Config(format!(
                "category maps {map_h}x{map_w} are smaller than the stack minimum {CONV_MIN_EXTENT}"
            )));
        }
        let mut kernels = Vec::with_capacity(3);
        let mut biases = Vec::with_capacity(3);
        let mut c_in = 1usize;
        for (li, spec) in CONV_STACK.iter().enumerate() {
            let fan_in = c_in * spec.kernel * spec.kernel;
            let shape = [spec.out_channels, c_in, spec.kernel, spec.kernel];
            kernels.push(store.add(
                &format!("{name}.conv{li}.kernel"),
                &shape,
                xavier_uniform(rng, spec.out_channels, fan_in),
                0.0,
            )?);
            biases.push(store.add(
                &format!("{name}.conv{li}.bias"),
                &[spec.out_channels],
                vec![0.0; spec.out_channels],
                0.0,
            )?);
            c_in = spec.out_channels;
        }
        Ok(ConvStack {
            kernels: [kernels[0], kernels[1], kernels[2]],
            biases: [biases[0], biases[1], biases[2]],
            map_h,
            map_w,
        })
    }

    /// Encode one frame [1, H, W] to a [1, CONV_FEAT] row.
    pub fn encode_frame(&self, sess: &Session, frame: &Tensor) -> Result<Tensor> {
        if frame.shape() != [1, self.map_h, self.map_w] {
            return Err(Error::Dimension(format!(
                "expected raster [1, {}, {}], got {:?}",
                self.map_h,
                self.map_w,
                frame.shape()
            )));
        }
        let mut x = frame.clone();
        for li in 0..3 {
            x = x
                .conv2d(&sess.param(self.kernels[li]), &sess.param(self.biases[li]), CONV_STACK[li].stride)?
                .relu();
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        // global average pool over the spatial extents
        let pooled = x.reshape(&[c, h * w])?.mean_axis(1)?;
        pooled.reshape(&[1, CONV_FEAT])
    }

    /// Encode a per-frame mask sequence to [m, CONV_FEAT].
    pub fn encode_frames(&self, sess: &Session, frames: &[Tensor]) -> Result<Tensor> {
        if frames.is_empty() {
            return Err(Error::Contract("conv encoding of an empty sequence".to_string()));
        }
        let rows: Vec<Tensor> =
            frames.iter().map(|f| self.encode_frame(sess, f)).collect::<Result<_>>()?;
        concat(&rows, 0)
    }
}

// ---------------------------------------------------------------------------
// interaction attention unit

/// Dot-product attention of the last timestep over all timesteps, followed
/// by a tanh projection of [context ++ last].
pub struct AttentionUnit {
    pub w_a: ParamId, // [f, f]
    pub w_c: ParamId, // [q, 2f]
    pub feat: usize,
    pub out_dim: usize,
}

impl AttentionUnit {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        feat: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let w_a = store.add(&format!("{name}.w_a"), &[feat, feat], xavier_uniform(rng, feat, feat), 0.0)?;
        let w_c = store.add(
            &format!("{name}.w_c"),
            &[out_dim, 2 * feat],
            xavier_uniform(rng, out_dim, 2 * feat),
            0.0,
        )?;
        Ok(AttentionUnit { w_a, w_c, feat, out_dim })
    }

    /// steps: m tensors of [batch, feat]; returns [batch, out_dim].
    pub fn forward(&self, sess: &Session, steps: &[Tensor]) -> Result<Tensor> {
        let (out, _) = self.forward_with_weights(sess, steps)?;
        Ok(out)
    }

    /// Same as [`forward`] but also returns the attention weights
    /// [batch, m] for inspection.
    pub fn forward_with_weights(&self, sess: &Session, steps: &[Tensor]) -> Result<(Tensor, Tensor)> {
        if steps.is_empty() {
            return Err(Error::Contract("attention over an empty sequence".to_string()));
        }
        let last = steps.last().unwrap();
        if last.shape().len() != 2 || last.shape()[1] != self.feat {
            return Err(Error::Dimension(format!(
                "attention expects [batch, {}], got {:?}",
                self.feat,
                last.shape()
            )));
        }
        let batch = last.shape()[0];
        // score_i = (last * W_a) . step_i, per batch row
        let query = last.matmul(&sess.param(self.w_a))?;
        let mut scores = Vec::with_capacity(steps.len());
        for s in steps {
            let dot = query.mul(s)?.sum_axis(1)?.reshape(&[batch, 1])?;
            scores.push(dot);
        }
        let weights = concat(&scores, 1)?.softmax(1)?;
        let mut context = Tensor::zeros(&[batch, self.feat]);
        for (i, s) in steps.iter().enumerate() {
            let a = weights.slice(1, i, 1)?;
            context = context.add(&a.mul(s)?)?;
        }
        let joined = concat(&[context, last.clone()], 1)?;
        let out = joined.matmul(&sess.param_t(self.w_c)?)?.tanh();
        Ok((out, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_many;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn lstm_zero_parameters_zero_state() {
        let mut store = ParameterStore::new();
        let mut r = rng(0);
        let lstm = LstmLayer::new(&mut store, &mut r, "t", 3, 4, Activation::Softsign).unwrap();
        for (_, e) in store.iter() {
            assert!(e.values.len() > 0);
        }
        for i in 0..store.len() {
            store.values_mut(ParamId(i)).iter_mut().for_each(|v| *v = 0.0);
        }
        let sess = Session::frozen(&store);
        let x = Tensor::from_vec(&[1, 3], vec![0.3, -0.5, 0.9]).unwrap();
        let h = Tensor::zeros(&[1, 4]);
        let c = Tensor::zeros(&[1, 4]);
        let (h2, c2) = lstm.step(&sess, &x, &h, &c).unwrap();
        assert!(h2.data().iter().all(|&v| v == 0.0));
        assert!(c2.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_step_shapes() {
        let mut store = ParameterStore::new();
        let mut r = rng(1);
        let lstm = LstmLayer::new(&mut store, &mut r, "t", 5, 7, Activation::Softsign).unwrap();
        let sess = Session::frozen(&store);
        let x = Tensor::zeros(&[3, 5]);
        let h = Tensor::zeros(&[3, 7]);
        let c = Tensor::zeros(&[3, 7]);
        let (h2, c2) = lstm.step(&sess, &x, &h, &c).unwrap();
        assert_eq!(h2.shape(), &[3, 7]);
        assert_eq!(c2.shape(), &[3, 7]);
        let bad = Tensor::zeros(&[3, 4]);
        assert!(lstm.step(&sess, &bad, &h, &c).is_err());
    }

    #[test]
    fn lstm_forward_base_case_matches_single_step() {
        let mut store = ParameterStore::new();
        let mut r = rng(2);
        let lstm = LstmLayer::new(&mut store, &mut r, "t", 3, 4, Activation::Softsign).unwrap();
        let sess = Session::frozen(&store);
        let x = Tensor::from_vec(&[2, 3], vec![0.1, 0.2, 0.3, -0.1, -0.2, -0.3]).unwrap();
        let all = lstm.forward_all(&sess, &[x.clone()]).unwrap();
        assert_eq!(all.len(), 1);
        let h = Tensor::zeros(&[2, 4]);
        let c = Tensor::zeros(&[2, 4]);
        let (h1, _) = lstm.step(&sess, &x, &h, &c).unwrap();
        assert_eq!(all[0].data(), h1.data());
    }

    #[test]
    fn lstm_empty_sequence_is_a_contract_error() {
        let mut store = ParameterStore::new();
        let mut r = rng(3);
        let lstm = LstmLayer::new(&mut store, &mut r, "t", 3, 4, Activation::Softsign).unwrap();
        let sess = Session::frozen(&store);
        assert!(matches!(lstm.forward_all(&sess, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn lstm_constant_input_cell_state_tracks_oracle() {
        // zero weights, b_g set so the candidate is a positive constant:
        // c_{t+1} = 0.5 c_t + 0.5 act(1), monotone and bounded.
        let mut store = ParameterStore::new();
        let mut r = rng(4);
        let lstm = LstmLayer::new(&mut store, &mut r, "t", 1, 2, Activation::Softsign).unwrap();
        for i in 0..store.len() {
            store.values_mut(ParamId(i)).iter_mut().for_each(|v| *v = 0.0);
        }
        store.values_mut(lstm.b[3]).iter_mut().for_each(|v| *v = 1.0);
        let sess = Session::frozen(&store);
        let x = Tensor::from_vec(&[1, 1], vec![0.7]).unwrap();
        let xs = vec![x; 6];
        // independent scalar recursion
        let g = 0.5_f64; // softsign(1)
        let mut expect = 0.0_f64;
        let mut prev = -1.0_f64;
        let mut h = Tensor::zeros(&[1, 2]);
        let mut c = Tensor::zeros(&[1, 2]);
        for x in &xs {
            let (hn, cn) = lstm.step(&sess, x, &h, &c).unwrap();
            h = hn;
            c = cn;
            expect = 0.5 * expect + 0.5 * g;
            for &cv in c.data() {
                assert!((cv - expect).abs() < 1e-12);
                assert!(cv > prev, "cell magnitude should grow monotonically");
                assert!(cv < 1.0, "bounded by the activation range");
            }
            for &hv in h.data() {
                assert!(hv.abs() < 1.0);
            }
            prev = expect;
        }
    }

    #[test]
    fn lstm_step_passes_grad_check() {
        let mut store = ParameterStore::new();
        let mut r = rng(5);
        let _lstm = LstmLayer::new(&mut store, &mut r, "t", 2, 3, Activation::Softsign).unwrap();
        // check gradient w.r.t. every parameter of the layer plus the input
        let mut inputs: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
        for (_, e) in store.iter() {
            inputs.push((e.values.clone(), e.shape.clone()));
        }
        inputs.push((vec![0.4, -0.6], vec![1, 2]));
        let err = grad_check_many(
            |tape, xs| {
                // rebuild the layer graph from raw leaves: order matches store
                let mut probe = ParameterStore::new();
                let mut rr = rng(5);
                let l2 = LstmLayer::new(&mut probe, &mut rr, "t", 2, 3, Activation::Softsign).unwrap();
                let _ = tape;
                let sess = SessionFromLeaves { leaves: xs[..12].to_vec() };
                let x = &xs[12];
                let h = Tensor::zeros(&[1, 3]);
                let c = Tensor::zeros(&[1, 3]);
                let (hn, cn) = sess.lstm_step(&l2, x, &h, &c)?;
                hn.logcosh_elem().sum_all().add(&cn.mul(&cn)?.sum_all())
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "lstm step rel err {err}");
    }

    // minimal stand-in that routes parameter lookups to pre-made leaves,
    // so grad_check can perturb layer weights directly
    struct SessionFromLeaves {
        leaves: Vec<Tensor>,
    }

    impl SessionFromLeaves {
        fn lstm_step(
            &self,
            l: &LstmLayer,
            x: &Tensor,
            h: &Tensor,
            c: &Tensor,
        ) -> Result<(Tensor, Tensor)> {
            let gate = |which: usize| -> Result<Tensor> {
                let wx = x.matmul(&self.leaves[l.w[which].index()].transpose()?)?;
                let uh = h.matmul(&self.leaves[l.u[which].index()].transpose()?)?;
                wx.add(&uh)?.add(&self.leaves[l.b[which].index()])
            };
            let i = gate(0)?.sigmoid();
            let f = gate(1)?.sigmoid();
            let o = gate(2)?.sigmoid();
            let g = l.cell_activation.apply(&gate(3)?);
            let cn = f.mul(c)?.add(&i.mul(&g)?)?;
            let hn = o.mul(&l.cell_activation.apply(&cn))?;
            Ok((hn, cn))
        }
    }

    #[test]
    fn conv_stack_zero_maps_zero_features() {
        let mut store = ParameterStore::new();
        let mut r = rng(6);
        let stack = ConvStack::new(&mut store, &mut r, "cim", 24, 32).unwrap();
        // zero biases are the default; zero input stays zero through ReLU
        let sess = Session::frozen(&store);
        let frame = Tensor::zeros(&[1, 24, 32]);
        let feat = stack.encode_frame(&sess, &frame).unwrap();
        assert!(feat.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_stack_is_stateless_across_frames() {
        let mut store = ParameterStore::new();
        let mut r = rng(7);
        let stack = ConvStack::new(&mut store, &mut r, "cim", 24, 32).unwrap();
        let sess = Session::frozen(&store);
        let mut v = vec![0.0; 24 * 32];
        v[100] = 1.0;
        v[500] = 1.0;
        let f = Tensor::from_vec(&[1, 24, 32], v).unwrap();
        let rows = stack.encode_frames(&sess, &[f.clone(), f]).unwrap();
        assert_eq!(rows.shape(), &[2, CONV_FEAT]);
        let (a, b) = rows.data().split_at(CONV_FEAT);
        assert_eq!(a, b);
    }

    #[test]
    fn conv_stack_parameter_count_independent_of_categories() {
        let mut store = ParameterStore::new();
        let mut r = rng(8);
        let _stack = ConvStack::new(&mut store, &mut r, "cim", 24, 32).unwrap();
        let count = store.total_params();
        // encoding any number of categories reuses the same parameters
        assert_eq!(store.len(), 6); // 3 kernels + 3 biases
        assert!(count > 0);
    }

    #[test]
    fn attention_identical_rows_uniform_weights() {
        let mut store = ParameterStore::new();
        let mut r = rng(9);
        let att = AttentionUnit::new(&mut store, &mut r, "iau", 4, 3).unwrap();
        let sess = Session::frozen(&store);
        let row = Tensor::from_vec(&[1, 4], vec![0.3, -0.2, 0.5, 0.1]).unwrap();
        let steps = vec![row.clone(), row.clone(), row.clone()];
        let (out, weights) = att.forward_with_weights(&sess, &steps).unwrap();
        for &w in weights.data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(out.data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn attention_orthonormal_rows_score_last_only() {
        let mut store = ParameterStore::new();
        let mut r = rng(10);
        let att = AttentionUnit::new(&mut store, &mut r, "iau", 3, 2).unwrap();
        // W_a = identity
        let wa = store.values_mut(att.w_a);
        wa.copy_from_slice(&[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let sess = Session::frozen(&store);
        let e1 = Tensor::from_vec(&[1, 3], vec![1., 0., 0.]).unwrap();
        let e2 = Tensor::from_vec(&[1, 3], vec![0., 1., 0.]).unwrap();
        let e3 = Tensor::from_vec(&[1, 3], vec![0., 0., 1.]).unwrap();
        let (_, weights) = att.forward_with_weights(&sess, &[e1, e2, e3]).unwrap();
        // scores are [0, 0, 1]
        let z = 2.0 + 1.0f64.exp();
        let expect = [1.0 / z, 1.0 / z, 1.0f64.exp() / z];
        for (w, e) in weights.data().iter().zip(expect.iter()) {
            assert!((w - e).abs() < 1e-12, "{w} vs {e}");
        }
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let mut store = ParameterStore::new();
        let mut r = rng(11);
        let att = AttentionUnit::new(&mut store, &mut r, "iau", 5, 4).unwrap();
        let sess = Session::frozen(&store);
        let mut rr = rng(12);
        let steps: Vec<Tensor> = (0..6)
            .map(|_| {
                let v: Vec<f64> = (0..10).map(|_| rr.gen_range(-2.0..2.0)).collect();
                Tensor::from_vec(&[2, 5], v).unwrap()
            })
            .collect();
        let (_, weights) = att.forward_with_weights(&sess, &steps).unwrap();
        for b in 0..2 {
            let s: f64 = weights.data()[b * 6..(b + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(weights.data()[b * 6..(b + 1) * 6].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn dense_and_attention_pass_grad_check() {
        let mut store = ParameterStore::new();
        let mut r = rng(13);
        let dense = DenseLayer::new(&mut store, &mut r, "d", 3, 2, Activation::Tanh).unwrap();
        let w = store.entry(dense.weight).values.clone();
        let b = store.entry(dense.bias).values.clone();
        let err = grad_check_many(
            |_, xs| {
                let wt = xs[0].transpose()?;
                let y = xs[2].matmul(&wt)?.add(&xs[1])?.tanh();
                Ok(y.logcosh_elem().sum_all())
            },
            &[(w, vec![2, 3]), (b, vec![2]), (vec![0.2, -0.4, 0.6], vec![1, 3])],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "dense rel err {err}");
    }

    #[test]
    fn parameter_container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.biped");
        let mut store = ParameterStore::new();
        let mut r = rng(14);
        let _d = DenseLayer::new(&mut store, &mut r, "d", 4, 3, Activation::Linear).unwrap();
        let _l = LstmLayer::new(&mut store, &mut r, "l", 4, 5, Activation::Softsign).unwrap();
        store.save(&path).unwrap();

        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[..6], b"BIPED1");

        let mut store2 = ParameterStore::new();
        let mut r2 = rng(999); // different init, then overwritten by load
        let _d2 = DenseLayer::new(&mut store2, &mut r2, "d", 4, 3, Activation::Linear).unwrap();
        let _l2 = LstmLayer::new(&mut store2, &mut r2, "l", 4, 5, Activation::Softsign).unwrap();
        store2.load_into(&path).unwrap();
        for ((_, a), (_, b)) in store.iter().zip(store2.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn truncated_container_reports_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.biped");
        let mut store = ParameterStore::new();
        let mut r = rng(15);
        let _d = DenseLayer::new(&mut store, &mut r, "d", 4, 3, Activation::Linear).unwrap();
        store.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let err = read_container(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn orthogonal_init_is_orthogonal() {
        let mut r = rng(16);
        let n = 8;
        let q = orthogonal(&mut r, n);
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| q[i * n + k] * q[j * n + k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10, "row {i}.{j} dot {dot}");
            }
        }
    }
}
