//! Parameter storage and the Transformer building blocks shared by the
//! encoder, the frame embedder and the decoder.

use std::ops::Index;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive mask value for disallowed attention pairs. Finite, so the tape's
/// finiteness check holds, and large enough that `exp` underflows to 0.
pub const MASKED: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    frozen: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name);
        self.values.push(value);
        self.frozen.push(false);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on the tape; frozen ones become constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .values
            .iter()
            .zip(&self.frozen)
            .map(|(v, &frozen)| {
                if frozen {
                    tape.constant(v.clone())
                } else {
                    tape.param(v.clone())
                }
            })
            .collect();
        Bound(vars)
    }

    /// SHA-256 over names, shapes and little-endian payloads.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Tape handles for every parameter of a [`ParamStore`], indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Registers parameters with a shared name prefix and RNG.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<'a, R: Rng> Init<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Self { store, rng }
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::ones(shape))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        self.store.add(name, t)
    }

    /// `U(-1/√fan_in, 1/√fan_in)`.
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, self.rng);
        self.store.add(name, t)
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.add(name, value)
    }
}

/// `y = x Wᵀ + b` with `W` stored as `out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = init.fan_in(&format!("{name}.weight"), &[out_dim, in_dim], in_dim);
        let bias = bias.then(|| init.zeros(&format!("{name}.bias"), &[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul_nt(x, p[self.weight])?;
        match self.bias {
            Some(b) => tape.add_row(y, p[b]),
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, dim: usize) -> Self {
        Self {
            gain: init.ones(&format!("{name}.gain"), &[dim]),
            bias: init.zeros(&format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gain], p[self.bias], LAYER_NORM_EPS)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(init, &format!("{name}.up"), dim, hidden, true),
            down: Linear::new(init, &format!("{name}.down"), hidden, dim, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, p, h)
    }
}

/// Output of an attention call: the projected result and one row-stochastic
/// weight matrix per head (`n_query × n_key`), still on the tape.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "width {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(init, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(init, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(init, &format!("{name}.v"), dim, dim, true),
            o: Linear::new(init, &format!("{name}.o"), dim, dim, true),
            heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.q.out_dim
    }

    /// Scaled dot-product attention. `mask`, when given, is an additive
    /// `n_query × n_key` table of `0` (allowed) and [`MASKED`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        query: Var,
        key: Var,
        value: Var,
        mask: Option<Var>,
    ) -> Result<AttentionOutput> {
        let nq = tape.shape(query)[0];
        let nk = tape.shape(key)[0];
        if tape.shape(value)[0] != nk {
            return Err(TensorError::Shape {
                op: "attention",
                lhs: tape.shape(key).to_vec(),
                rhs: tape.shape(value).to_vec(),
            });
        }
        if let Some(m) = mask {
            if tape.shape(m) != [nq, nk] {
                return Err(TensorError::Shape {
                    op: "attention mask",
                    lhs: vec![nq, nk],
                    rhs: tape.shape(m).to_vec(),
                });
            }
        }
        let q = self.q.forward(tape, p, query)?;
        let k = self.k.forward(tape, p, key)?;
        let v = self.v.forward(tape, p, value)?;
        let dh = self.dim() / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut head_outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                let cols = (h * dh, (h + 1) * dh);
                (
                    tape.slice_cols(q, cols.0, cols.1)?,
                    tape.slice_cols(k, cols.0, cols.1)?,
                    tape.slice_cols(v, cols.0, cols.1)?,
                )
            };
            let scores = tape.matmul_nt(qh, kh)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let attn = tape.softmax(scores, 1)?;
            head_outs.push(tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let merged = if self.heads == 1 {
            head_outs[0]
        } else {
            tape.concat_cols(&head_outs)?
        };
        let out = self.o.forward(tape, p, merged)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Additive mask allowing `i → j` iff `allowed(i, j)`.
pub fn attention_mask(n_query: usize, n_key: usize, allowed: impl Fn(usize, usize) -> bool) -> Tensor {
    Tensor::from_fn(&[n_query, n_key], |idx| {
        if allowed(idx / n_key, idx % n_key) {
            0.0
        } else {
            MASKED
        }
    })
}
