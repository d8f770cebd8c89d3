//! Trainable layers over the tape.
//!
//! Parameters live in a per-stack [`ParamStore`] that outlives any single
//! tape; a [`Binding`] loads them onto a tape once per forward pass and maps
//! gradients back after `backward`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};

/// Index of a parameter inside its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

/// Flat, ordered parameter registry for one trainable component.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) -> ParamId {
        assert_eq!(data.len(), rows * cols, "param data length");
        self.params.push(Param {
            name: name.to_string(),
            data,
            rows,
            cols,
        });
        ParamId(self.params.len() - 1)
    }

    /// Xavier-uniform matrix.
    pub fn add_xavier(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, rows, cols, data)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, rows, cols, vec![0.0; rows * cols])
    }

    pub fn add_full(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.add(name, rows, cols, vec![value; rows * cols])
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// FNV-1a checksum of the exact parameter bytes, for freeze contracts.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in &self.params {
            for v in &p.data {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Per-tape mapping from parameters to tape leaves.
pub struct Binding {
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl Binding {
    /// `trainable` controls whether gradients are tracked for this store.
    pub fn new(store: &ParamStore, trainable: bool) -> Self {
        Self {
            vars: vec![None; store.params.len()],
            trainable,
        }
    }

    /// Loads a parameter onto the tape (at most once per binding).
    pub fn var(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = &store.params[id.0];
        let v = if self.trainable {
            tape.leaf(p.data.clone(), p.rows, p.cols)
        } else {
            tape.constant(p.data.clone(), p.rows, p.cols)
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Collects gradients in store order after `tape.backward`.
    ///
    /// Parameters never touched this pass (or without gradient flow) yield
    /// zero vectors so optimizer state stays aligned.
    pub fn gradients(&self, tape: &Tape, store: &ParamStore) -> Vec<Vec<f64>> {
        store
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| match self.vars[i] {
                Some(v) => tape
                    .grad(v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.data.len()]),
                None => vec![0.0; p.data.len()],
            })
            .collect()
    }
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add_xavier(&format!("{name}.w"), d_in, d_out, rng);
        let b = store.add_zeros(&format!("{name}.b"), 1, d_out);
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, store: &ParamStore, x: Var) -> Var {
        let w = bind.var(tape, store, self.w);
        let b = bind.var(tape, store, self.b);
        let y = tape.matmul(x, w);
        tape.add_row_broadcast(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add_full(&format!("{name}.gamma"), 1, d, 1.0);
        let beta = store.add_zeros(&format!("{name}.beta"), 1, d);
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, store: &ParamStore, x: Var) -> Var {
        let g = bind.var(tape, store, self.gamma);
        let b = bind.var(tape, store, self.beta);
        tape.layer_norm(x, g, b, 1e-6)
    }
}

/// Multi-head self-attention weights.
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bq: ParamId,
    pub bk: ParamId,
    pub bv: ParamId,
    pub bo: ParamId,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert_eq!(d % heads, 0, "heads must divide model width");
        Self {
            wq: store.add_xavier(&format!("{name}.wq"), d, d, rng),
            wk: store.add_xavier(&format!("{name}.wk"), d, d, rng),
            wv: store.add_xavier(&format!("{name}.wv"), d, d, rng),
            wo: store.add_xavier(&format!("{name}.wo"), d, d, rng),
            bq: store.add_zeros(&format!("{name}.bq"), 1, d),
            bk: store.add_zeros(&format!("{name}.bk"), 1, d),
            bv: store.add_zeros(&format!("{name}.bv"), 1, d),
            bo: store.add_zeros(&format!("{name}.bo"), 1, d),
            heads,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        store: &ParamStore,
        x: Var,
        seqs: usize,
        len: usize,
    ) -> Var {
        let wq = bind.var(tape, store, self.wq);
        let wk = bind.var(tape, store, self.wk);
        let wv = bind.var(tape, store, self.wv);
        let wo = bind.var(tape, store, self.wo);
        let bq = bind.var(tape, store, self.bq);
        let bk = bind.var(tape, store, self.bk);
        let bv = bind.var(tape, store, self.bv);
        let bo = bind.var(tape, store, self.bo);
        tape.mha(x, wq, wk, wv, wo, bq, bk, bv, bo, self.heads, seqs, len)
    }
}

/// Post-norm Transformer block: attention and feed-forward sublayers, each
/// with residual connection, dropout, and layer normalization.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub attn: Attention,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            attn: Attention::new(store, &format!("{name}.attn"), d, heads, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ff1: Linear::new(store, &format!("{name}.ff1"), d, d_ff, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), d_ff, d, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        store: &ParamStore,
        x: Var,
        seqs: usize,
        len: usize,
        dropout: &mut Dropout,
    ) -> Var {
        let a = self.attn.forward(tape, bind, store, x, seqs, len);
        let a = dropout.apply(tape, a);
        let x = tape.add(x, a);
        let x = self.ln1.forward(tape, bind, store, x);

        let h = self.ff1.forward(tape, bind, store, x);
        let h = tape.relu(h);
        let h = self.ff2.forward(tape, bind, store, h);
        let h = dropout.apply(tape, h);
        let x = tape.add(x, h);
        self.ln2.forward(tape, bind, store, x)
    }
}

/// Stack of Transformer blocks with an optional output projection when the
/// input and output widths differ.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayer>,
    pub proj: Option<Linear>,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        n_layers: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| TransformerLayer::new(store, &format!("{name}.layer{i}"), d_in, heads, d_ff, rng))
            .collect();
        let proj = if d_in != d_out {
            Some(Linear::new(store, &format!("{name}.proj"), d_in, d_out, rng))
        } else {
            None
        };
        Self { layers, proj }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        store: &ParamStore,
        mut x: Var,
        seqs: usize,
        len: usize,
        dropout: &mut Dropout,
    ) -> Var {
        for layer in &self.layers {
            x = layer.forward(tape, bind, store, x, seqs, len, dropout);
        }
        if let Some(p) = &self.proj {
            x = p.forward(tape, bind, store, x);
        }
        x
    }
}

/// Two fully connected layers with a ReLU between them (the autoencoder
/// compressor / decompressor shape).
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), d_in, d_hidden, rng),
            l2: Linear::new(store, &format!("{name}.l2"), d_hidden, d_out, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, store: &ParamStore, x: Var) -> Var {
        let h = self.l1.forward(tape, bind, store, x);
        let h = tape.relu(h);
        self.l2.forward(tape, bind, store, h)
    }
}

/// Kernel-3 convolution layer (optionally in transposed-tap layout).
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub flip: bool,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        flip: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = (6.0 / (3 * c_in + c_out) as f64).sqrt();
        let data = (0..c_out * 3 * c_in).map(|_| rng.gen_range(-bound..bound)).collect();
        let w = store.add(&format!("{name}.w"), c_out, 3 * c_in, data);
        let b = store.add_zeros(&format!("{name}.b"), 1, c_out);
        Self { w, b, flip }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        store: &ParamStore,
        x: Var,
        seqs: usize,
        len: usize,
    ) -> Var {
        let w = bind.var(tape, store, self.w);
        let b = bind.var(tape, store, self.b);
        tape.conv1d(x, w, b, seqs, len, self.flip)
    }
}

/// Learned (inverse) generalized divisive normalization.
#[derive(Debug, Clone)]
pub struct Gdn {
    pub beta_r: ParamId,
    pub gamma_r: ParamId,
    pub inverse: bool,
}

impl Gdn {
    /// Initialized near identity: `beta = 1`, `gamma = 0.01`.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, inverse: bool) -> Self {
        let beta_r = store.add_full(&format!("{name}.beta_r"), 1, channels, 1.0);
        let gamma_r = store.add_full(&format!("{name}.gamma_r"), channels, channels, 0.1);
        Self {
            beta_r,
            gamma_r,
            inverse,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, store: &ParamStore, x: Var) -> Var {
        let b = bind.var(tape, store, self.beta_r);
        let g = bind.var(tape, store, self.gamma_r);
        tape.gdn(x, b, g, self.inverse)
    }
}

/// Dropout mask source; inactive when the probability is zero or no RNG is
/// attached (evaluation mode).
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn inactive() -> Dropout<'static> {
        Dropout { p: 0.0, rng: None }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        let rng = match (self.p > 0.0, self.rng.as_deref_mut()) {
            (true, Some(rng)) => rng,
            _ => return x,
        };
        let (r, c) = tape.shape(x);
        let keep = 1.0 - self.p;
        let mask: Vec<f64> = (0..r * c)
            .map(|_| {
                if rng.gen_range(0.0..1.0) < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        tape.dropout(x, &mask)
    }
}
