//! Label-query decoder, per-class readout and training objective.
//!
//! Each layer updates the `K` class queries with self-attention over the
//! queries, cross-attention into the video memory and a feed-forward block,
//! all pre-norm with residual connections. Class `k` is read out from its own
//! final query row only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncodedVideo;
use crate::error::{Error, Result};
use crate::layers::{Bound, FeedForward, Init, LayerNorm, MultiHeadAttention, ParamId};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// Exactly one class per video; softmax over classes.
    SingleLabel,
    /// Any subset of classes; independent sigmoid per class.
    MultiLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_hidden: usize,
    pub task: TaskMode,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("decoder width {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::Config("decoder ffn_hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerOutput {
    pub queries: Var,
    pub self_attention: Var,
    pub cross_attention: Var,
    /// One `K × (T+1)` weight matrix per head.
    pub cross_weights: Vec<Var>,
}

impl DecoderLayer {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, cfg: &DecoderConfig) -> Self {
        let d = cfg.dim;
        Self {
            norm_self: LayerNorm::new(init, &format!("{name}.norm_self"), d),
            self_attn: MultiHeadAttention::new(init, &format!("{name}.self_attn"), d, cfg.heads),
            norm_cross: LayerNorm::new(init, &format!("{name}.norm_cross"), d),
            cross_attn: MultiHeadAttention::new(init, &format!("{name}.cross_attn"), d, cfg.heads),
            norm_ffn: LayerNorm::new(init, &format!("{name}.norm_ffn"), d),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), d, cfg.ffn_hidden),
        }
    }

    /// One update of the queries. `blind` replaces the memory values by
    /// zeros, severing every path from the video through cross-attention.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        queries: Var,
        memory: &EncodedVideo,
        query_pos: Var,
        blind: bool,
    ) -> Result<DecoderLayerOutput> {
        if tape.shape(queries) != tape.shape(query_pos) {
            return Err(crate::tensor::TensorError::Shape {
                op: "decoder_layer",
                lhs: tape.shape(queries).to_vec(),
                rhs: tape.shape(query_pos).to_vec(),
            }
            .into());
        }
        // Self-attention: position-encoded queries and keys, raw values.
        let h = self.norm_self.forward(tape, p, queries)?;
        let qk = tape.add(h, query_pos)?;
        let sa = self.self_attn.forward(tape, p, qk, qk, h, None)?;
        let q1 = tape.add(queries, sa.out)?;

        // Cross-attention: position-encoded queries and memory keys, raw memory values.
        let h = self.norm_cross.forward(tape, p, q1)?;
        let q = tape.add(h, query_pos)?;
        let keys = tape.add(memory.memory, memory.mem_pos)?;
        let values = if blind {
            tape.constant(Tensor::zeros(tape.shape(memory.memory)))
        } else {
            memory.memory
        };
        let ca = self.cross_attn.forward(tape, p, q, keys, values, None)?;
        let q2 = tape.add(q1, ca.out)?;

        let h = self.norm_ffn.forward(tape, p, q2)?;
        let f = self.ffn.forward(tape, p, h)?;
        let q3 = tape.add(q2, f)?;
        Ok(DecoderLayerOutput {
            queries: q3,
            self_attention: sa.out,
            cross_attention: ca.out,
            cross_weights: ca.weights,
        })
    }
}

/// Intermediate query states and cross-attention maps of one decode.
#[derive(Clone, Debug)]
pub struct DecoderTrace {
    /// `Q_0, Q_1, …, Q_L`.
    pub states: Vec<Var>,
    /// Per layer, per head: `K × (T+1)` cross-attention weights.
    pub cross_attention: Vec<Vec<Tensor>>,
    /// Layer-normalized `Q_L`, the input to the readout.
    pub output: Var,
}

impl DecoderTrace {
    /// Per layer: head-averaged `K × (T+1)` cross-attention.
    pub fn head_averaged(&self) -> Vec<Tensor> {
        self.cross_attention
            .iter()
            .map(|heads| {
                let mut acc = heads[0].clone();
                for h in &heads[1..] {
                    for (a, b) in acc.data_mut().iter_mut().zip(h.data()) {
                        *a += b;
                    }
                }
                acc.scale(1.0 / heads.len() as f64)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    /// `K×D` learnable query position table.
    pub query_pos: ParamId,
}

impl Decoder {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, cfg: &DecoderConfig, classes: usize) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|l| DecoderLayer::new(init, &format!("decoder.layer{l}"), cfg))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            final_norm: LayerNorm::new(init, "decoder.final_norm", cfg.dim),
            query_pos: init.normal("decoder.query_pos", &[classes, cfg.dim], 0.02),
        })
    }

    /// Applies all layers to `Q_0`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        q0: Var,
        memory: &EncodedVideo,
        query_pos: Var,
        blind: bool,
    ) -> Result<DecoderTrace> {
        let mut states = vec![q0];
        let mut cross = Vec::with_capacity(self.layers.len());
        let mut q = q0;
        for layer in &self.layers {
            let out = layer.forward(tape, p, q, memory, query_pos, blind)?;
            cross.push(out.cross_weights.iter().map(|w| tape.value(*w).clone()).collect());
            q = out.queries;
            states.push(q);
        }
        let output = self.final_norm.forward(tape, p, q)?;
        Ok(DecoderTrace {
            states,
            cross_attention: cross,
            output,
        })
    }
}

/// Per-class linear readout: `logit_k = W_k · Q_L[k] + b_k`.
#[derive(Clone, Debug)]
pub struct ClassificationHead {
    pub w: ParamId,
    pub b: ParamId,
}

impl ClassificationHead {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, classes: usize, dim: usize) -> Self {
        Self {
            w: init.fan_in("head.W", &[classes, dim], dim),
            b: init.zeros("head.b", &[classes]),
        }
    }
}

/// Diagonal readout logits (length `K`) from final queries and head rows.
pub fn class_logits(tape: &mut Tape, q_final: Var, w: Var, b: Var) -> Result<Var> {
    let prod = tape.mul(q_final, w)?;
    let dots = tape.sum_last(prod);
    Ok(tape.add(dots, b)?)
}

/// Class probabilities: softmax for single-label, per-class sigmoid otherwise.
pub fn classify(tape: &mut Tape, q_final: Var, w: Var, b: Var, task: TaskMode) -> Result<Var> {
    let logits = class_logits(tape, q_final, w, b)?;
    Ok(match task {
        TaskMode::SingleLabel => tape.softmax(logits, 0)?,
        TaskMode::MultiLabel => tape.sigmoid(logits),
    })
}

/// Mean training loss from `B×K` logits against multi-hot targets.
pub fn loss(tape: &mut Tape, logits: Var, targets: &Tensor, task: TaskMode) -> Result<Var> {
    match task {
        TaskMode::MultiLabel => {
            if targets.data().iter().any(|&y| y != 0.0 && y != 1.0) {
                return Err(Error::Contract("targets must be 0/1".into()));
            }
            Ok(tape.bce_with_logits(logits, targets)?)
        }
        TaskMode::SingleLabel => {
            let k = targets.last_dim();
            let mut idx = Vec::with_capacity(targets.outer());
            for (r, row) in targets.data().chunks(k).enumerate() {
                let pos: Vec<usize> = row.iter().enumerate().filter(|(_, &y)| y == 1.0).map(|(i, _)| i).collect();
                if pos.len() != 1 || row.iter().any(|&y| y != 0.0 && y != 1.0) {
                    return Err(Error::Contract(format!(
                        "single-label loss needs exactly one positive per row; row {r} has {}",
                        pos.len()
                    )));
                }
                idx.push(pos[0]);
            }
            Ok(tape.softmax_cross_entropy(logits, &idx)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(layers: usize, heads: usize) -> DecoderConfig {
        DecoderConfig {
            layers,
            heads,
            dim: 8,
            ffn_hidden: 12,
            task: TaskMode::MultiLabel,
        }
    }

    fn build(c: &DecoderConfig, k: usize, seed: u64) -> (ParamStore, Decoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut Init::new(&mut store, &mut rng), c, k).unwrap();
        (store, dec)
    }

    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in store.tensors_mut() {
            let shape = t.shape().to_vec();
            *t = Tensor::uniform(&shape, -0.8, 0.8, &mut rng);
        }
    }

    struct Inputs {
        q: Tensor,
        mem: Tensor,
        mem_pos: Tensor,
        pos: Tensor,
    }

    fn inputs(k: usize, t: usize, d: usize, seed: u64) -> Inputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Inputs {
            q: Tensor::uniform(&[k, d], -1.0, 1.0, &mut rng),
            mem: Tensor::uniform(&[t + 1, d], -1.0, 1.0, &mut rng),
            mem_pos: Tensor::uniform(&[t + 1, d], -1.0, 1.0, &mut rng),
            pos: Tensor::uniform(&[k, d], -1.0, 1.0, &mut rng),
        }
    }

    #[test]
    fn identical_memory_rows_collapse_cross_attention_to_value_projection() {
        let (mut store, dec) = build(&cfg(1, 2), 3, 1);
        randomize(&mut store, 2);
        let m: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let mem = Tensor::from_fn(&[5, 8], |i| m[i % 8]);
        let x = inputs(3, 4, 8, 3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let memory = EncodedVideo {
            memory: tape.constant(mem),
            mem_pos: tape.constant(x.mem_pos),
        };
        let (q, pos) = (tape.constant(x.q), tape.constant(x.pos));
        let out = dec.layers[0].forward(&mut tape, &p, q, &memory, pos, false).unwrap();

        let ca = &dec.layers[0].cross_attn;
        let lin = |id_w: ParamId, id_b: Option<ParamId>, v: &[f64]| -> Vec<f64> {
            let w = store.get(id_w);
            let b = id_b.map(|b| store.get(b).data().to_vec()).unwrap_or(vec![0.0; 8]);
            (0..8).map(|o| (0..8).map(|i| w.get(&[o, i]) * v[i]).sum::<f64>() + b[o]).collect()
        };
        let expect = lin(ca.o.weight, ca.o.bias, &lin(ca.v.weight, ca.v.bias, &m));
        let got = tape.value(out.cross_attention);
        for r in 0..3 {
            for d in 0..8 {
                assert!((got.get(&[r, d]) - expect[d]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn decoder_preserves_query_shape() {
        for (layers, heads) in [(1, 1), (2, 2), (3, 4)] {
            let (store, dec) = build(&cfg(layers, heads), 5, 4);
            let x = inputs(5, 3, 8, 5);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let memory = EncodedVideo {
                memory: tape.constant(x.mem),
                mem_pos: tape.constant(x.mem_pos),
            };
            let (q, pos) = (tape.constant(x.q), tape.constant(x.pos));
            let trace = dec.decode(&mut tape, &p, q, &memory, pos, false).unwrap();
            assert_eq!(trace.states.len(), layers + 1);
            for s in &trace.states {
                assert_eq!(tape.shape(*s), &[5, 8]);
            }
            for layer in &trace.cross_attention {
                assert_eq!(layer.len(), heads);
                for w in layer {
                    assert_eq!(w.shape(), &[5, 4]);
                    for r in 0..5 {
                        assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    }
                }
            }
        }
    }

    /// Single-head decoder layer computed from its defining equations.
    fn layer_oracle(store: &ParamStore, x: &Inputs) -> Tensor {
        let g = |n: &str| store.get(store.find(&format!("decoder.layer0.{n}")).unwrap()).clone();
        let add = |a: &Tensor, b: &Tensor| Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect()).unwrap();
        let ln = |x: &Tensor, n: &str| {
            let (gain, bias) = (g(&format!("{n}.gain")), g(&format!("{n}.bias")));
            let d = x.shape()[1];
            Tensor::from_fn(x.shape(), |i| {
                let row = x.row(i / d);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                (row[i % d] - mean) / (var + 1e-5).sqrt() * gain.data()[i % d] + bias.data()[i % d]
            })
        };
        let lin = |x: &Tensor, n: &str| {
            let (w, b) = (g(&format!("{n}.weight")), g(&format!("{n}.bias")));
            let (rows, out) = (x.shape()[0], w.shape()[0]);
            Tensor::from_fn(&[rows, out], |i| {
                let (r, o) = (i / out, i % out);
                (0..w.shape()[1]).map(|c| w.get(&[o, c]) * x.get(&[r, c])).sum::<f64>() + b.data()[o]
            })
        };
        let attend = |q_in: &Tensor, k_in: &Tensor, v_in: &Tensor, n: &str| {
            let q = lin(q_in, &format!("{n}.q"));
            let k = lin(k_in, &format!("{n}.k"));
            let v = lin(v_in, &format!("{n}.v"));
            let d = q.shape()[1];
            let (nq, nk) = (q.shape()[0], k.shape()[0]);
            let mixed = Tensor::from_fn(&[nq, d], |i| {
                let (r, c) = (i / d, i % d);
                let s: Vec<f64> = (0..nk)
                    .map(|j| (0..d).map(|e| q.get(&[r, e]) * k.get(&[j, e])).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let z: f64 = s.iter().map(|v| v.exp()).sum();
                (0..nk).map(|j| s[j].exp() / z * v.get(&[j, c])).sum()
            });
            lin(&mixed, &format!("{n}.o"))
        };
        // Eq. 4
        let h = ln(&x.q, "norm_self");
        let qt = add(&h, &x.pos);
        let q1 = add(&x.q, &attend(&qt, &qt, &h, "self_attn"));
        // Eq. 5
        let h = ln(&q1, "norm_cross");
        let ft = add(&x.mem, &x.mem_pos);
        let q2 = add(&q1, &attend(&add(&h, &x.pos), &ft, &x.mem, "cross_attn"));
        // Eq. 6
        let h = ln(&q2, "norm_ffn");
        let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        let up = lin(&h, "ffn.up").map(gelu);
        add(&q2, &lin(&up, "ffn.down"))
    }

    fn run_layer(store: &ParamStore, dec: &Decoder, x: &Inputs, layers: usize) -> Tensor {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let memory = EncodedVideo {
            memory: tape.constant(x.mem.clone()),
            mem_pos: tape.constant(x.mem_pos.clone()),
        };
        let (mut q, pos) = (tape.constant(x.q.clone()), tape.constant(x.pos.clone()));
        for l in 0..layers {
            q = dec.layers[l].forward(&mut tape, &p, q, &memory, pos, false).unwrap().queries;
        }
        tape.value(q).clone()
    }

    #[test]
    fn single_head_layer_matches_longhand_equations() {
        let (mut store, dec) = build(&cfg(1, 1), 2, 6);
        randomize(&mut store, 7);
        let x = inputs(2, 3, 8, 8);
        let got = run_layer(&store, &dec, &x, 1);
        assert!(got.max_abs_diff(&layer_oracle(&store, &x)) < 1e-10);
    }

    #[test]
    fn decode_composes_layers() {
        for layers in [1, 2] {
            let (mut store, dec) = build(&cfg(layers, 2), 3, 9);
            randomize(&mut store, 10);
            let x = inputs(3, 2, 8, 11);
            let chained = run_layer(&store, &dec, &x, layers);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let memory = EncodedVideo {
                memory: tape.constant(x.mem.clone()),
                mem_pos: tape.constant(x.mem_pos.clone()),
            };
            let (q, pos) = (tape.constant(x.q.clone()), tape.constant(x.pos.clone()));
            let trace = dec.decode(&mut tape, &p, q, &memory, pos, false).unwrap();
            assert!(tape.value(*trace.states.last().unwrap()).max_abs_diff(&chained) < 1e-12);
        }
    }

    #[test]
    fn blind_decoder_ignores_memory() {
        let (mut store, dec) = build(&cfg(2, 2), 3, 12);
        randomize(&mut store, 13);
        let x = inputs(3, 4, 8, 14);
        let y = inputs(3, 4, 8, 15);
        let run = |mem: &Tensor| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let memory = EncodedVideo {
                memory: tape.constant(mem.clone()),
                mem_pos: tape.constant(x.mem_pos.clone()),
            };
            let (q, pos) = (tape.constant(x.q.clone()), tape.constant(x.pos.clone()));
            let trace = dec.decode(&mut tape, &p, q, &memory, pos, true).unwrap();
            tape.value(trace.output).clone()
        };
        assert!(run(&x.mem).max_abs_diff(&run(&y.mem)) < 1e-12);
    }

    #[test]
    fn zero_head_gives_half_probabilities() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::uniform(&[4, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0)));
        let w = tape.constant(Tensor::zeros(&[4, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let p = classify(&mut tape, q, w, b, TaskMode::MultiLabel).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 0.5));
        let p = classify(&mut tape, q, w, b, TaskMode::SingleLabel).unwrap();
        assert!((tape.value(p).data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn readout_uses_each_class_row_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let (qt, wt, bt) = (
            Tensor::uniform(&[5, 6], -1.0, 1.0, &mut rng),
            Tensor::uniform(&[5, 6], -1.0, 1.0, &mut rng),
            Tensor::uniform(&[5], -1.0, 1.0, &mut rng),
        );
        let mut tape = Tape::new();
        let (q, w, b) = (tape.constant(qt.clone()), tape.constant(wt.clone()), tape.constant(bt.clone()));
        let logits = class_logits(&mut tape, q, w, b).unwrap();
        let probs = classify(&mut tape, q, w, b, TaskMode::SingleLabel).unwrap();
        let expect: Vec<f64> = (0..5)
            .map(|k| qt.row(k).iter().zip(wt.row(k)).map(|(a, b)| a * b).sum::<f64>() + bt.data()[k])
            .collect();
        for k in 0..5 {
            assert!((tape.value(logits).data()[k] - expect[k]).abs() < 1e-12);
        }
        let z: f64 = expect.iter().map(|v| v.exp()).sum();
        for k in 0..5 {
            assert!((tape.value(probs).data()[k] - expect[k].exp() / z).abs() < 1e-12);
        }
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn loss_value(logits: Tensor, y: &Tensor, task: TaskMode) -> Result<f64> {
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let out = loss(&mut tape, l, y, task)?;
        Ok(tape.value(out).item())
    }

    #[test]
    fn bce_of_coin_flip_is_ln2() {
        let v = loss_value(Tensor::from_rows(&[vec![logit(0.5)]]).unwrap(), &Tensor::ones(&[1, 1]), TaskMode::MultiLabel).unwrap();
        assert!((v - 0.693_147_180_559_945_3).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_as_prediction_approaches_truth() {
        let y = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let mut last = f64::INFINITY;
        for p in [0.3, 0.5, 0.8, 0.95, 0.999, 0.999_999] {
            let v = loss_value(Tensor::from_rows(&[vec![logit(p), logit(1.0 - p)]]).unwrap(), &y, TaskMode::MultiLabel).unwrap();
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-5);
    }

    #[test]
    fn bce_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = Tensor::uniform(&[4, 3], 0.05, 0.95, &mut rng);
        let y = Tensor::from_fn(&[4, 3], |i| ((i * 5 + 1) % 3 == 0) as u8 as f64);
        let direct: f64 = p
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / 12.0;
        let v = loss_value(p.map(logit), &y, TaskMode::MultiLabel).unwrap();
        assert!((v - direct).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_negative_log_probability() {
        let probs = Tensor::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]]).unwrap();
        let y = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let v = loss_value(probs.map(f64::ln), &y, TaskMode::SingleLabel).unwrap();
        let direct = -(0.5f64.ln() + 0.3f64.ln()) / 2.0;
        assert!((v - direct).abs() < 1e-12);
    }

    #[test]
    fn single_label_rejects_multi_hot_targets() {
        let y = Tensor::from_rows(&[vec![1.0, 1.0, 0.0]]).unwrap();
        let err = loss_value(Tensor::zeros(&[1, 3]), &y, TaskMode::SingleLabel).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
