//! Multi-modal label queries.
//!
//! Each class owns a learnable query row, optionally initialized from a text
//! embedding of its name. A per-video embedding, pooled from independent
//! frame features, is appended to every class row and projected back to the
//! decoder width: `Q_0 = W_que [Q_l, Q_v]`.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{patchify, EncoderConfig};
use crate::error::{Error, Result};
use crate::layers::{attention_mask, Bound, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParamId};
use crate::tensor::{Tape, Tensor, Var};

/// Separator between attribute tokens in compositional class names.
pub const TOKEN_SEPARATOR: char = '+';

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    /// Each full name seeds an opaque random unit vector.
    Hashed,
    /// Normalized sum of the hashed vectors of the `+`-separated tokens.
    Compositional,
}

/// Deterministic stand-in for a pretrained text tower.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEmbedder {
    pub mode: TextMode,
    pub dim: usize,
    pub seed: u64,
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

impl TextEmbedder {
    fn hashed(&self, text: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(text.as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        normalize(&mut v);
        v
    }

    /// Unit-norm embedding of one class name.
    pub fn embed(&self, name: &str) -> Vec<f64> {
        match self.mode {
            TextMode::Hashed => self.hashed(name),
            TextMode::Compositional => {
                let mut acc = vec![0.0; self.dim];
                for token in name.split(TOKEN_SEPARATOR).map(str::trim).filter(|t| !t.is_empty()) {
                    for (a, b) in acc.iter_mut().zip(self.hashed(token)) {
                        *a += b;
                    }
                }
                normalize(&mut acc);
                acc
            }
        }
    }
}

/// `K×D` matrix of text embeddings, one row per class name.
pub fn text_embed(names: &[String], embedder: &TextEmbedder) -> Result<Tensor> {
    if names.is_empty() {
        return Err(Error::Config("class vocabulary is empty".into()));
    }
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::Config(format!("duplicate class name {n:?}")));
        }
    }
    let rows: Vec<Vec<f64>> = names.iter().map(|n| embedder.embed(n)).collect();
    Ok(Tensor::from_rows(&rows)?)
}

/// Reads a class vocabulary: one name per line, blank lines ignored.
pub fn read_vocabulary(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    // Reuses the duplicate/empty checks.
    text_embed(
        &names,
        &TextEmbedder {
            mode: TextMode::Hashed,
            dim: 1,
            seed: 0,
        },
    )?;
    Ok(names)
}

/// Trainable per-class queries, rows aligned with `class_names`.
#[derive(Clone, Debug)]
pub struct LabelQuerySet {
    pub q_l: ParamId,
    pub class_names: Vec<String>,
}

impl LabelQuerySet {
    /// Text-initialized when `embedder` is given, otherwise random rows of
    /// comparable (unit) norm.
    pub fn new<R: Rng>(init: &mut Init<'_, R>, class_names: &[String], dim: usize, embedder: Option<&TextEmbedder>) -> Result<Self> {
        let table = match embedder {
            Some(e) => {
                if e.dim != dim {
                    return Err(Error::Config(format!("text embedder width {} differs from query width {dim}", e.dim)));
                }
                text_embed(class_names, e)?
            }
            None => {
                text_embed(
                    class_names,
                    &TextEmbedder {
                        mode: TextMode::Hashed,
                        dim: 1,
                        seed: 0,
                    },
                )?;
                Tensor::randn(&[class_names.len(), dim], 1.0 / (dim as f64).sqrt(), init.rng)
            }
        };
        Ok(Self {
            q_l: init.tensor("query.Q_l", table),
            class_names: class_names.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEmbedderConfig {
    pub patch: usize,
    /// Output width D″.
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub trainable: bool,
}

/// Small image encoder applied to each frame independently: patch projection,
/// one pre-norm Transformer layer, mean over patches.
#[derive(Clone, Debug)]
pub struct FrameEmbedder {
    pub cfg: FrameEmbedderConfig,
    patch_cfg: EncoderConfig,
    pub proj: Linear,
    pub pos: ParamId,
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
    /// Block-diagonal: patches only see patches of the same frame.
    mask: Tensor,
}

impl FrameEmbedder {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, cfg: &FrameEmbedderConfig, frames: usize, height: usize, width: usize) -> Result<Self> {
        if cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
            return Err(Error::Config(format!("frame embedder width {} not divisible by {} heads", cfg.dim, cfg.heads)));
        }
        let patch_cfg = EncoderConfig {
            frames,
            height,
            width,
            patch: cfg.patch,
            hidden: cfg.dim,
            layers: 1,
            heads: cfg.heads,
            attention: crate::encoder::AttentionMode::Joint,
            out_dim: cfg.dim,
            ffn_hidden: cfg.ffn_hidden,
        };
        patch_cfg.validate()?;
        let n = patch_cfg.num_patches();
        let first = init.store.len();
        let proj = Linear::new(init, "frame_embed.proj", patch_cfg.patch_len(), cfg.dim, true);
        let pos = init.normal("frame_embed.pos", &[n, cfg.dim], 0.02);
        let norm_attn = LayerNorm::new(init, "frame_embed.norm_attn", cfg.dim);
        let attn = MultiHeadAttention::new(init, "frame_embed.attn", cfg.dim, cfg.heads);
        let norm_ffn = LayerNorm::new(init, "frame_embed.norm_ffn", cfg.dim);
        let ffn = FeedForward::new(init, "frame_embed.ffn", cfg.dim, cfg.ffn_hidden);
        if !cfg.trainable {
            let ids: Vec<ParamId> = init.store.ids().skip(first).collect();
            for id in ids {
                init.store.set_frozen(id, true);
            }
        }
        let mask = attention_mask(frames * n, frames * n, |i, j| i / n == j / n);
        Ok(Self {
            cfg: cfg.clone(),
            patch_cfg,
            proj,
            pos,
            norm_attn,
            attn,
            norm_ffn,
            ffn,
            mask,
        })
    }

    /// `T×D″` frame features; no information crosses frames.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, video: &Tensor) -> Result<Var> {
        let (t, n) = (self.patch_cfg.frames, self.patch_cfg.num_patches());
        let patches = patchify(video, &self.patch_cfg)?;
        let patches = tape.constant(patches.reshape(&[t * n, self.patch_cfg.patch_len()])?);
        let x = self.proj.forward(tape, p, patches)?;
        let pos = tape.gather_rows(p[self.pos], (0..t * n).map(|i| i % n).collect())?;
        let x = tape.add(x, pos)?;
        let h = self.norm_attn.forward(tape, p, x)?;
        let mask = tape.constant(self.mask.clone());
        let a = self.attn.forward(tape, p, h, h, h, Some(mask))?;
        let x = tape.add(x, a.out)?;
        let h = self.norm_ffn.forward(tape, p, x)?;
        let f = self.ffn.forward(tape, p, h)?;
        let x = tape.add(x, f)?;
        Ok(tape.group_mean_rows(x, (0..t).map(|f| (f * n..(f + 1) * n).collect()).collect())?)
    }
}

/// `Q_v`: mean of the frame features, as a `1×D″` row.
pub fn video_embed(tape: &mut Tape, frame_feats: Var) -> Result<Var> {
    let rows = tape.shape(frame_feats)[0];
    if rows == 0 {
        return Err(Error::Config("video embedding needs at least one frame".into()));
    }
    Ok(tape.group_mean_rows(frame_feats, vec![(0..rows).collect()])?)
}

/// `Q_0[k] = W_que · concat(Q_l[k], Q_v)`.
pub fn fuse(tape: &mut Tape, q_l: Var, q_v: Var, w_que: Var) -> Result<Var> {
    let k = tape.shape(q_l)[0];
    let qv_rows = tape.reshape(q_v, &[1, tape.value(q_v).numel()])?;
    let tiled = tape.gather_rows(qv_rows, vec![0; k])?;
    let joined = tape.concat_cols(&[q_l, tiled])?;
    Ok(tape.matmul_nt(joined, w_que)?)
}

/// The query path without video cues: `Q_l` unchanged.
pub fn unimodal_queries(q_l: Var) -> Var {
    q_l
}

/// `W_que` at initialization: `[I_D | 0]` plus small noise, so fused queries
/// start out equal to the label queries.
pub fn init_w_que<R: Rng>(init: &mut Init<'_, R>, dim: usize, video_dim: usize) -> ParamId {
    let mut w = Tensor::randn(&[dim, dim + video_dim], 0.02, init.rng);
    for i in 0..dim {
        let v = w.get(&[i, i]);
        w.set(&[i, i], v + 1.0);
    }
    init.tensor("query.W_que", w)
}
