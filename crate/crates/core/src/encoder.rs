//! Spatio-temporal video encoder.
//!
//! Frames are cut into `N = HW/P²` patches, linearly embedded with a learnable
//! position table, passed through `L_v` pre-norm Transformer layers (joint or
//! divided space-time attention) and pooled per frame into the decoder memory
//! `[global, v_1, …, v_T]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{attention_mask, Bound, FeedForward, Init, LayerNorm, MultiHeadAttention, ParamId};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Joint,
    Divided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Encoder width D′.
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub attention: AttentionMode,
    /// Memory width D.
    pub out_dim: usize,
    pub ffn_hidden: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return fail(format!(
                "frame {}×{} is not divisible into {}-pixel patches",
                self.height, self.width, self.patch
            ));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!("encoder width {} not divisible by {} heads", self.hidden, self.heads));
        }
        if self.frames == 0 || self.layers == 0 || self.out_dim == 0 || self.ffn_hidden == 0 {
            return fail("encoder frames, layers, out_dim and ffn_hidden must be positive".into());
        }
        Ok(())
    }

    /// Patches per frame.
    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// Tokens including the global token.
    pub fn num_tokens(&self) -> usize {
        self.frames * self.num_patches() + 1
    }
}

/// Decoder memory: row 0 is the projected global token, rows 1..=T the
/// per-frame representations.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVideo {
    pub memory: Var,
    pub mem_pos: Var,
}

/// Cuts a `T×3×H×W` video into a `T×N×3P²` patch tensor. Patch `p` of a frame
/// is the row-major flattening of its `3×P×P` block; patches are ordered
/// row-major over the patch grid.
pub fn patchify(video: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (t, h, w, ps) = (cfg.frames, cfg.height, cfg.width, cfg.patch);
    if video.shape() != [t, 3, h, w] {
        return Err(Error::Config(format!(
            "video shape {:?} does not match configured {:?}",
            video.shape(),
            [t, 3, h, w]
        )));
    }
    let (gw, n, len) = (w / ps, cfg.num_patches(), cfg.patch_len());
    let src = video.data();
    let mut out = vec![0.0; t * n * len];
    for f in 0..t {
        for p in 0..n {
            let (py, px) = (p / gw, p % gw);
            let dst = &mut out[(f * n + p) * len..(f * n + p + 1) * len];
            let mut i = 0;
            for c in 0..3 {
                for y in 0..ps {
                    let row = ((f * 3 + c) * h + py * ps + y) * w + px * ps;
                    dst[i..i + ps].copy_from_slice(&src[row..row + ps]);
                    i += ps;
                }
            }
        }
    }
    Ok(Tensor::new(vec![t, n, len], out)?)
}

/// `z⁰ = [g + e_0 ; W_emb x_(p,t) + e_(p,t)]`, patches in (t-major, p-minor) order.
pub fn embed_patches(tape: &mut Tape, patches: Var, w_emb: Var, e_pos: Var, global: Var) -> Result<Var> {
    let shape = tape.shape(patches).to_vec();
    let flat = match shape.as_slice() {
        [t, n, len] => tape.reshape(patches, &[t * n, *len])?,
        [_, _] => patches,
        _ => {
            return Err(Error::Config(format!("patch tensor must be T×N×3P², got {shape:?}")));
        }
    };
    let x = tape.matmul_nt(flat, w_emb)?;
    let width = tape.shape(global).iter().product::<usize>();
    let g = tape.reshape(global, &[1, width])?;
    let seq = tape.concat_rows(&[g, x])?;
    Ok(tape.add(seq, e_pos)?)
}

#[derive(Clone, Debug)]
struct AttentionBlock {
    norm: LayerNorm,
    attn: MultiHeadAttention,
    mask: Option<Tensor>,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    /// One block in joint mode; temporal then spatial in divided mode.
    blocks: Vec<AttentionBlock>,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub cfg: EncoderConfig,
    pub w_emb: ParamId,
    pub e_pos: ParamId,
    pub global_token: ParamId,
    pub w_out: ParamId,
    pub mem_pos: ParamId,
    layers: Vec<EncoderLayer>,
}

/// Everything the encoder computes for one video.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub tokens: Var,
    pub encoded: Var,
    pub video: EncodedVideo,
    /// Head-averaged attention of each attention sublayer, in execution order.
    pub attention: Vec<Tensor>,
}

/// Divided-attention masks over tokens `[global, (t=0,p=0), (0,1), …]`.
/// Patch tokens attend within their group plus the global token, which in
/// turn attends to every token.
pub fn divided_masks(frames: usize, patches: usize) -> (Tensor, Tensor) {
    let n = frames * patches + 1;
    let coord = |i: usize| ((i - 1) / patches, (i - 1) % patches);
    let temporal = attention_mask(n, n, |i, j| i == 0 || j == 0 || coord(i).1 == coord(j).1);
    let spatial = attention_mask(n, n, |i, j| i == 0 || j == 0 || coord(i).0 == coord(j).0);
    (temporal, spatial)
}

impl VideoEncoder {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let w_emb = init.fan_in("encoder.W_emb", &[d, cfg.patch_len()], cfg.patch_len());
        let e_pos = init.normal("encoder.e_pos", &[cfg.num_tokens(), d], 0.02);
        let global_token = init.normal("encoder.global_token", &[d], 0.02);
        let masks = divided_masks(cfg.frames, cfg.num_patches());
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = format!("encoder.layer{l}");
            let blocks = match cfg.attention {
                AttentionMode::Joint => vec![AttentionBlock {
                    norm: LayerNorm::new(init, &format!("{name}.norm_attn"), d),
                    attn: MultiHeadAttention::new(init, &format!("{name}.attn"), d, cfg.heads),
                    mask: None,
                }],
                AttentionMode::Divided => vec![
                    AttentionBlock {
                        norm: LayerNorm::new(init, &format!("{name}.norm_time"), d),
                        attn: MultiHeadAttention::new(init, &format!("{name}.attn_time"), d, cfg.heads),
                        mask: Some(masks.0.clone()),
                    },
                    AttentionBlock {
                        norm: LayerNorm::new(init, &format!("{name}.norm_space"), d),
                        attn: MultiHeadAttention::new(init, &format!("{name}.attn_space"), d, cfg.heads),
                        mask: Some(masks.1.clone()),
                    },
                ],
            };
            layers.push(EncoderLayer {
                blocks,
                norm_ffn: LayerNorm::new(init, &format!("{name}.norm_ffn"), d),
                ffn: FeedForward::new(init, &format!("{name}.ffn"), d, cfg.ffn_hidden),
            });
        }
        let w_out = init.fan_in("encoder.W_out", &[cfg.out_dim, d], d);
        let mem_pos = init.normal("encoder.mem_pos", &[cfg.frames + 1, cfg.out_dim], 0.02);
        Ok(Self {
            cfg: cfg.clone(),
            w_emb,
            e_pos,
            global_token,
            w_out,
            mem_pos,
            layers,
        })
    }

    /// Every parameter owned by one encoder layer.
    pub fn layer_params(&self, layer: usize) -> Vec<ParamId> {
        let l = &self.layers[layer];
        let mut out = Vec::new();
        for b in &l.blocks {
            out.extend([b.norm.gain, b.norm.bias]);
            for lin in [&b.attn.q, &b.attn.k, &b.attn.v, &b.attn.o] {
                out.extend(lin.params());
            }
        }
        out.extend([l.norm_ffn.gain, l.norm_ffn.bias]);
        out.extend(l.ffn.up.params());
        out.extend(l.ffn.down.params());
        out
    }

    /// The `L_v` Transformer layers.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, tokens: Var, retain: bool) -> Result<(Var, Vec<Tensor>)> {
        let mut x = tokens;
        let mut maps = Vec::new();
        for layer in &self.layers {
            for block in &layer.blocks {
                let h = block.norm.forward(tape, p, x)?;
                let mask = block.mask.as_ref().map(|m| tape.constant(m.clone()));
                let a = block.attn.forward(tape, p, h, h, h, mask)?;
                x = tape.add(x, a.out)?;
                if retain {
                    maps.push(head_mean(tape, &a.weights));
                }
            }
            let h = layer.norm_ffn.forward(tape, p, x)?;
            let f = layer.ffn.forward(tape, p, h)?;
            x = tape.add(x, f)?;
        }
        Ok((x, maps))
    }

    /// Per-frame patch mean followed by `W_out`; the global token is carried
    /// through the same projection as memory row 0.
    pub fn pool_project(&self, tape: &mut Tape, p: &Bound, encoded: Var) -> Result<EncodedVideo> {
        let n = self.cfg.num_patches();
        let mut groups = vec![vec![0]];
        groups.extend((0..self.cfg.frames).map(|t| (1 + t * n..1 + (t + 1) * n).collect()));
        let pooled = tape.group_mean_rows(encoded, groups)?;
        let memory = tape.matmul_nt(pooled, p[self.w_out])?;
        Ok(EncodedVideo {
            memory,
            mem_pos: p[self.mem_pos],
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, video: &Tensor, retain: bool) -> Result<EncoderOutput> {
        let patches = tape.constant(patchify(video, &self.cfg)?);
        let tokens = embed_patches(tape, patches, p[self.w_emb], p[self.e_pos], p[self.global_token])?;
        let (encoded, attention) = self.encode(tape, p, tokens, retain)?;
        let video = self.pool_project(tape, p, encoded)?;
        Ok(EncoderOutput {
            tokens,
            encoded,
            video,
            attention,
        })
    }
}

pub(crate) fn head_mean(tape: &Tape, weights: &[Var]) -> Tensor {
    let mut acc = tape.value(weights[0]).clone();
    for w in &weights[1..] {
        for (a, b) in acc.data_mut().iter_mut().zip(tape.value(*w).data()) {
            *a += b;
        }
    }
    acc.scale(1.0 / weights.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ParamStore;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(mode: AttentionMode) -> EncoderConfig {
        EncoderConfig {
            frames: 2,
            height: 8,
            width: 8,
            patch: 4,
            hidden: 8,
            layers: 2,
            heads: 2,
            attention: mode,
            out_dim: 6,
            ffn_hidden: 12,
        }
    }

    fn build(c: &EncoderConfig, seed: u64) -> (ParamStore, VideoEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = VideoEncoder::new(&mut Init::new(&mut store, &mut rng), c).unwrap();
        (store, enc)
    }

    #[test]
    fn patch_count_and_length() {
        let c = EncoderConfig {
            frames: 1,
            height: 16,
            width: 16,
            patch: 8,
            ..cfg(AttentionMode::Joint)
        };
        let video = Tensor::zeros(&[1, 3, 16, 16]);
        let p = patchify(&video, &c).unwrap();
        assert_eq!(p.shape(), &[1, 4, 192]);
        assert_eq!(c.num_patches(), 16 * 16 / 64);
    }

    #[test]
    fn constant_video_gives_identical_patches() {
        let c = cfg(AttentionMode::Joint);
        let p = patchify(&Tensor::full(&[2, 3, 8, 8], 0.3), &c).unwrap();
        let first = p.row(0).to_vec();
        for r in 0..8 {
            assert_eq!(p.row(r), first.as_slice());
        }
    }

    #[test]
    fn patches_reassemble_to_original_pixels() {
        let c = cfg(AttentionMode::Joint);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let video = Tensor::uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng);
        let p = patchify(&video, &c).unwrap();
        let mut rebuilt = Tensor::zeros(&[2, 3, 8, 8]);
        for t in 0..2 {
            for patch in 0..4 {
                let (py, px) = (patch / 2, patch % 2);
                for ch in 0..3 {
                    for y in 0..4 {
                        for x in 0..4 {
                            let v = p.get(&[t, patch, ch * 16 + y * 4 + x]);
                            rebuilt.set(&[t, ch, py * 4 + y, px * 4 + x], v);
                        }
                    }
                }
            }
        }
        assert_eq!(rebuilt, video);
    }

    #[test]
    fn indivisible_frame_is_a_config_error() {
        let c = EncoderConfig {
            height: 10,
            ..cfg(AttentionMode::Joint)
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = EncoderConfig {
            heads: 3,
            ..cfg(AttentionMode::Joint)
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn embedding_of_zero_patches_is_position_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let patches = tape.constant(Tensor::zeros(&[2, 4, 48]));
        let w = tape.constant(Tensor::uniform(&[8, 48], -1.0, 1.0, &mut rng));
        let e_pos_t = Tensor::uniform(&[9, 8], -1.0, 1.0, &mut rng);
        let e_pos = tape.constant(e_pos_t.clone());
        let g = tape.constant(Tensor::zeros(&[8]));
        let z = embed_patches(&mut tape, patches, w, e_pos, g).unwrap();
        assert_eq!(tape.value(z), &e_pos_t);
    }

    #[test]
    fn embedding_with_zero_weights_keeps_only_global_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let patches = tape.constant(Tensor::uniform(&[2, 4, 48], 0.0, 1.0, &mut rng));
        let w = tape.constant(Tensor::zeros(&[8, 48]));
        let e_pos = tape.constant(Tensor::zeros(&[9, 8]));
        let g_t = Tensor::uniform(&[8], -1.0, 1.0, &mut rng);
        let g = tape.constant(g_t.clone());
        let z = embed_patches(&mut tape, patches, w, e_pos, g).unwrap();
        let z = tape.value(z);
        assert_eq!(z.row(0), g_t.data());
        assert!(z.data()[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_rows_follow_time_major_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let patches_t = Tensor::uniform(&[2, 4, 48], 0.0, 1.0, &mut rng);
        let w_t = Tensor::uniform(&[8, 48], -1.0, 1.0, &mut rng);
        let e_t = Tensor::uniform(&[9, 8], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let (patches, w, e_pos) = (
            tape.constant(patches_t.clone()),
            tape.constant(w_t.clone()),
            tape.constant(e_t.clone()),
        );
        let g = tape.constant(Tensor::zeros(&[8]));
        let z = embed_patches(&mut tape, patches, w, e_pos, g).unwrap();
        let z = tape.value(z);
        for t in 0..2 {
            for p in 0..4 {
                let row = 1 + t * 4 + p;
                for d in 0..8 {
                    let expect: f64 = (0..48)
                        .map(|k| w_t.get(&[d, k]) * patches_t.get(&[t, p, k]))
                        .sum::<f64>()
                        + e_t.get(&[row, d]);
                    assert!((z.get(&[row, d]) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_weights_make_layers_the_identity() {
        for mode in [AttentionMode::Joint, AttentionMode::Divided] {
            let c = cfg(mode);
            let (mut store, enc) = build(&c, 5);
            for l in 0..c.layers {
                for id in enc.layer_params(l) {
                    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let x = Tensor::uniform(&[c.num_tokens(), c.hidden], -1.0, 1.0, &mut rng);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let (y, _) = enc.encode(&mut tape, &p, xv, false).unwrap();
            assert_eq!(tape.value(y), &x, "{mode:?}");
        }
    }

    #[test]
    fn encode_preserves_shape_in_both_modes() {
        for mode in [AttentionMode::Joint, AttentionMode::Divided] {
            let c = cfg(mode);
            let (store, enc) = build(&c, 7);
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let video = Tensor::uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let out = enc.forward(&mut tape, &p, &video, true).unwrap();
            assert_eq!(tape.shape(out.encoded), tape.shape(out.tokens));
            assert_eq!(tape.shape(out.video.memory), &[3, 6]);
            let per_layer = if mode == AttentionMode::Joint { 1 } else { 2 };
            assert_eq!(out.attention.len(), per_layer * c.layers);
        }
    }

    /// One pre-norm joint layer with one head, written out longhand.
    fn layer_oracle(x: &Tensor, store: &ParamStore, prefix: &str) -> Tensor {
        let g = |n: &str| store.get(store.find(&format!("{prefix}.{n}")).unwrap()).clone();
        let ln = |x: &Tensor, gain: &Tensor, bias: &Tensor| {
            let d = x.shape()[1];
            let mut out = x.clone();
            for r in 0..x.shape()[0] {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                for c in 0..d {
                    out.set(&[r, c], (row[c] - mean) / (var + 1e-5).sqrt() * gain.data()[c] + bias.data()[c]);
                }
            }
            out
        };
        let lin = |x: &Tensor, name: &str| {
            let w = g(&format!("{name}.weight"));
            let b = g(&format!("{name}.bias"));
            let mut y = x.matmul(&w.transpose().unwrap()).unwrap();
            let d = y.shape()[1];
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                *v += b.data()[i % d];
            }
            y
        };
        let n = x.shape()[0];
        let h = ln(x, &g("norm_attn.gain"), &g("norm_attn.bias"));
        let (q, k, v) = (lin(&h, "attn.q"), lin(&h, "attn.k"), lin(&h, "attn.v"));
        let d = q.shape()[1];
        let mut mixed = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|c| q.get(&[i, c]) * k.get(&[j, c])).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            for c in 0..d {
                mixed.set(&[i, c], (0..n).map(|j| (s[j] - m).exp() / z * v.get(&[j, c])).sum());
            }
        }
        let a = lin(&mixed, "attn.o");
        let x1 = Tensor::new(x.shape().to_vec(), x.data().iter().zip(a.data()).map(|(p, q)| p + q).collect()).unwrap();
        let h2 = ln(&x1, &g("norm_ffn.gain"), &g("norm_ffn.bias"));
        let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        let up = lin(&h2, "ffn.up").map(gelu);
        let f = lin(&up, "ffn.down");
        Tensor::new(x.shape().to_vec(), x1.data().iter().zip(f.data()).map(|(p, q)| p + q).collect()).unwrap()
    }

    #[test]
    fn one_joint_layer_matches_longhand_oracle() {
        let c = EncoderConfig {
            frames: 1,
            height: 4,
            width: 8,
            patch: 4,
            hidden: 4,
            layers: 1,
            heads: 1,
            attention: AttentionMode::Joint,
            out_dim: 4,
            ffn_hidden: 6,
        };
        assert_eq!(c.num_tokens(), 3);
        let (mut store, enc) = build(&c, 10);
        // Non-trivial norms and biases so every term is exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for id in enc.layer_params(0) {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
        }
        let x = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let (y, _) = enc.encode(&mut tape, &p, xv, false).unwrap();
        let expect = layer_oracle(&x, &store, "encoder.layer0");
        assert!(tape.value(y).max_abs_diff(&expect) < 1e-10);
    }

    #[test]
    fn pooling_identical_patch_tokens_projects_them() {
        let c = cfg(AttentionMode::Joint);
        let (store, enc) = build(&c, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let u = Tensor::uniform(&[8], -1.0, 1.0, &mut rng);
        let enc_t = Tensor::from_fn(&[9, 8], |i| u.data()[i % 8]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let ev = tape.constant(enc_t);
        let mem = enc.pool_project(&mut tape, &p, ev).unwrap();
        let w_out = store.get(enc.w_out);
        let expect = w_out.matmul(&u.reshape(&[8, 1]).unwrap()).unwrap();
        for r in 0..3 {
            for d in 0..6 {
                assert!((tape.value(mem.memory).get(&[r, d]) - expect.data()[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_projection_gives_zero_memory() {
        let c = cfg(AttentionMode::Divided);
        let (mut store, enc) = build(&c, 14);
        store.get_mut(enc.w_out).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let video = Tensor::full(&[2, 3, 8, 8], 0.5);
        let out = enc.forward(&mut tape, &p, &video, false).unwrap();
        assert!(tape.value(out.video.memory).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooling_matches_mean_then_matmul_oracle() {
        let c = cfg(AttentionMode::Joint);
        let (store, enc) = build(&c, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let z = Tensor::uniform(&[9, 8], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let zv = tape.constant(z.clone());
        let mem = enc.pool_project(&mut tape, &p, zv).unwrap();
        let w_out = store.get(enc.w_out);
        let mut pooled = Tensor::zeros(&[3, 8]);
        for d in 0..8 {
            pooled.set(&[0, d], z.get(&[0, d]));
            for t in 0..2 {
                let mean = (0..4).map(|p| z.get(&[1 + t * 4 + p, d])).sum::<f64>() / 4.0;
                pooled.set(&[1 + t, d], mean);
            }
        }
        let expect = pooled.matmul(&w_out.transpose().unwrap()).unwrap();
        assert!(tape.value(mem.memory).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn divided_mode_is_equivariant_to_spatial_permutation() {
        let c = cfg(AttentionMode::Divided);
        let (store, enc) = build(&c, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let n = c.num_patches();
        let perm = [2usize, 0, 3, 1];
        let x = Tensor::uniform(&[c.num_tokens(), c.hidden], -1.0, 1.0, &mut rng);
        let remap = |i: usize| if i == 0 { 0 } else { 1 + ((i - 1) / n) * n + perm[(i - 1) % n] };
        let mut xp = x.clone();
        for i in 0..c.num_tokens() {
            let src = x.row(remap(i)).to_vec();
            xp.data_mut()[i * c.hidden..(i + 1) * c.hidden].copy_from_slice(&src);
        }
        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let v = tape.constant(input.clone());
            let (y, _) = enc.encode(&mut tape, &p, v, false).unwrap();
            let mem = enc.pool_project(&mut tape, &p, y).unwrap();
            (tape.value(y).clone(), tape.value(mem.memory).clone())
        };
        let (y, m) = run(&x);
        let (yp, mp) = run(&xp);
        for i in 0..c.num_tokens() {
            for d in 0..c.hidden {
                assert!((yp.get(&[i, d]) - y.get(&[remap(i), d])).abs() < 1e-12);
            }
        }
        assert!(m.max_abs_diff(&mp) < 1e-12);
    }

    #[test]
    fn gradients_reach_every_encoder_parameter() {
        for mode in [AttentionMode::Joint, AttentionMode::Divided] {
            let c = EncoderConfig {
                layers: 1,
                ..cfg(mode)
            };
            let (store, enc) = build(&c, 19);
            let mut rng = ChaCha8Rng::seed_from_u64(20);
            let video = Tensor::uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng);
            let target = Tensor::uniform(&[3, 6], -1.0, 1.0, &mut rng);
            let f = |tape: &mut Tape, vars: &[Var]| {
                let p = Bound::from_vars(vars.to_vec());
                let out = enc.forward(tape, &p, &video, false)?;
                let tv = tape.constant(target.clone());
                let m = tape.add(out.video.memory, out.video.mem_pos)?;
                let prod = tape.mul(m, tv)?;
                let s = tape.sum(prod);
                Result::Ok(tape.mul(s, s)?)
            };
            let report = grad_check(f, store.tensors(), 1e-5, 1e-4).unwrap();
            assert!(report.passed(), "{mode:?}: {:?}", report.failures.first());

            let mut tape = Tape::new();
            let vars: Vec<Var> = store.tensors().iter().map(|t| tape.param(t.clone())).collect();
            let loss = f(&mut tape, &vars).unwrap();
            let grads = tape.backward(loss).unwrap();
            for (id, v) in store.ids().zip(&vars) {
                let g = grads.get(*v).unwrap_or_else(|| panic!("no gradient for {}", store.name(id)));
                assert!(g.data().iter().any(|&x| x != 0.0), "zero gradient for {}", store.name(id));
            }
        }
    }
}
