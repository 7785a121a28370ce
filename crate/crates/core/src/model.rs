//! The full recognizer: video encoder, (multi-modal) label queries, query
//! decoder and per-class readout.
//!
//! Class tables (`Q_l`, query positions, head rows) cover the whole
//! vocabulary; every forward pass selects the classes it scores, which is how
//! zero-shot evaluation reaches classes never seen in training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{class_logits, loss, ClassificationHead, Decoder, DecoderConfig, DecoderTrace, TaskMode};
use crate::encoder::{EncoderConfig, EncoderOutput, VideoEncoder};
use crate::error::{Error, Result};
use crate::layers::{Bound, Init, ParamId, ParamStore};
use crate::query::{fuse, init_w_que, unimodal_queries, video_embed, FrameEmbedder, FrameEmbedderConfig, LabelQuerySet, TextEmbedder, TextMode};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    pub mode: TextMode,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub frame_embedder: FrameEmbedderConfig,
    pub decoder: DecoderConfig,
    pub text: TextConfig,
    /// Fuse a per-video embedding into the label queries.
    pub mmq: bool,
    /// Initialize `Q_l` from text embeddings of the class names.
    pub text_init: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.out_dim != self.decoder.dim {
            return Err(Error::Config(format!(
                "encoder out_dim {} differs from decoder width {}",
                self.encoder.out_dim, self.decoder.dim
            )));
        }
        Ok(())
    }

    pub fn text_embedder(&self) -> TextEmbedder {
        TextEmbedder {
            mode: self.text.mode,
            dim: self.decoder.dim,
            seed: self.text.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Keep encoder attention maps (decoder maps are always kept).
    pub retain_attention: bool,
    /// Cut every path from the video into the queries and cross-attention
    /// values.
    pub blind: bool,
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// Length `|classes|`.
    pub logits: Var,
    pub encoder: EncoderOutput,
    /// `Q_v` when multi-modal queries are enabled.
    pub video_embedding: Option<Var>,
    pub queries: Var,
    pub trace: DecoderTrace,
}

/// Independent init streams so toggling one module leaves the others' weights
/// unchanged.
const STREAM_ENCODER: u64 = 1;
const STREAM_LABELS: u64 = 2;
const STREAM_FRAMES: u64 = 3;
const STREAM_FUSION: u64 = 4;
const STREAM_DECODER: u64 = 5;
const STREAM_HEAD: u64 = 6;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug)]
pub struct Msqnet {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub encoder: VideoEncoder,
    pub labels: LabelQuerySet,
    pub frame_embedder: Option<FrameEmbedder>,
    pub w_que: Option<ParamId>,
    pub decoder: Decoder,
    pub head: ClassificationHead,
}

impl Msqnet {
    pub fn new(cfg: &ModelConfig, class_names: &[String], seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let (d, k) = (cfg.decoder.dim, class_names.len());
        let e = &cfg.encoder;

        let encoder = VideoEncoder::new(&mut Init::new(&mut params, &mut stream(seed, STREAM_ENCODER)), e)?;
        let embedder = cfg.text_embedder();
        let labels = LabelQuerySet::new(
            &mut Init::new(&mut params, &mut stream(seed, STREAM_LABELS)),
            class_names,
            d,
            cfg.text_init.then_some(&embedder),
        )?;
        let (frame_embedder, w_que) = if cfg.mmq {
            let fe = FrameEmbedder::new(
                &mut Init::new(&mut params, &mut stream(seed, STREAM_FRAMES)),
                &cfg.frame_embedder,
                e.frames,
                e.height,
                e.width,
            )?;
            let w = init_w_que(&mut Init::new(&mut params, &mut stream(seed, STREAM_FUSION)), d, cfg.frame_embedder.dim);
            (Some(fe), Some(w))
        } else {
            (None, None)
        };
        let decoder = Decoder::new(&mut Init::new(&mut params, &mut stream(seed, STREAM_DECODER)), &cfg.decoder, k)?;
        let head = ClassificationHead::new(&mut Init::new(&mut params, &mut stream(seed, STREAM_HEAD)), k, d);
        Ok(Self {
            cfg: cfg.clone(),
            params,
            encoder,
            labels,
            frame_embedder,
            w_que,
            decoder,
            head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.labels.class_names
    }

    pub fn all_classes(&self) -> Vec<usize> {
        (0..self.num_classes()).collect()
    }

    pub fn task(&self) -> TaskMode {
        self.cfg.decoder.task
    }

    fn check_classes(&self, classes: &[usize]) -> Result<()> {
        if classes.is_empty() {
            return Err(Error::Config("no classes selected".into()));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= self.num_classes()) {
            return Err(Error::UnknownClass(format!("class index {bad} outside vocabulary of {}", self.num_classes())));
        }
        Ok(())
    }

    /// Scores the selected `classes` of one `T×3×H×W` video.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, video: &Tensor, classes: &[usize], opts: ForwardOptions) -> Result<Forward> {
        self.check_classes(classes)?;
        let encoder = self.encoder.forward(tape, p, video, opts.retain_attention)?;
        let q_l = tape.gather_rows(p[self.labels.q_l], classes.to_vec())?;
        let (queries, video_embedding) = match (&self.frame_embedder, self.w_que) {
            (Some(fe), Some(w)) => {
                let q_v = if opts.blind {
                    tape.constant(Tensor::zeros(&[1, fe.cfg.dim]))
                } else {
                    let feats = fe.forward(tape, p, video)?;
                    video_embed(tape, feats)?
                };
                (fuse(tape, q_l, q_v, p[w])?, Some(q_v))
            }
            _ => (unimodal_queries(q_l), None),
        };
        let pos = tape.gather_rows(p[self.decoder.query_pos], classes.to_vec())?;
        let trace = self.decoder.decode(tape, p, queries, &encoder.video, pos, opts.blind)?;
        let w = tape.gather_rows(p[self.head.w], classes.to_vec())?;
        let b = tape.reshape(p[self.head.b], &[self.num_classes(), 1])?;
        let b = tape.gather_rows(b, classes.to_vec())?;
        let b = tape.reshape(b, &[classes.len()])?;
        let logits = class_logits(tape, trace.output, w, b)?;
        Ok(Forward {
            logits,
            encoder,
            video_embedding,
            queries,
            trace,
        })
    }

    /// Stacked `B×|classes|` logits of a batch.
    pub fn batch_logits(&self, tape: &mut Tape, p: &Bound, videos: &[&Tensor], classes: &[usize], opts: ForwardOptions) -> Result<Var> {
        if videos.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut rows = Vec::with_capacity(videos.len());
        for v in videos {
            let f = self.forward(tape, p, v, classes, opts)?;
            rows.push(tape.reshape(f.logits, &[1, classes.len()])?);
        }
        Ok(tape.concat_rows(&rows)?)
    }

    /// Mean loss of a batch; `targets` is `B×|classes|`.
    pub fn batch_loss(&self, tape: &mut Tape, p: &Bound, videos: &[&Tensor], targets: &Tensor, classes: &[usize], opts: ForwardOptions) -> Result<Var> {
        let logits = self.batch_logits(tape, p, videos, classes, opts)?;
        if targets.shape() != tape.shape(logits) {
            return Err(Error::Contract(format!(
                "targets {:?} do not match logits {:?}",
                targets.shape(),
                tape.shape(logits)
            )));
        }
        loss(tape, logits, targets, self.task())
    }

    /// Logits without recording gradients of interest.
    pub fn predict(&self, video: &Tensor, classes: &[usize], opts: ForwardOptions) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.bind_constants(&mut tape);
        let f = self.forward(&mut tape, &p, video, classes, opts)?;
        Ok(tape.value(f.logits).data().to_vec())
    }

    /// Parameters as tape constants, for inference.
    pub fn bind_constants(&self, tape: &mut Tape) -> Bound {
        Bound::from_vars(self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect())
    }

    /// Prepares never-trained class rows for scoring: head weights, bias and
    /// query positions of `targets` are set to the mean over `sources`. Label
    /// queries keep their (text) initialization.
    pub fn impute_class_rows(&mut self, sources: &[usize], targets: &[usize]) -> Result<()> {
        self.check_classes(sources)?;
        self.check_classes(targets)?;
        for id in [self.head.w, self.head.b, self.decoder.query_pos] {
            let t = self.params.get_mut(id);
            let d = t.last_dim();
            let d = if t.ndim() == 1 { 1 } else { d };
            let data = t.data_mut();
            let mut mean = vec![0.0; d];
            for &s in sources {
                for (m, v) in mean.iter_mut().zip(&data[s * d..(s + 1) * d]) {
                    *m += v / sources.len() as f64;
                }
            }
            for &c in targets {
                data[c * d..(c + 1) * d].copy_from_slice(&mean);
            }
        }
        Ok(())
    }
}

/// Small configuration used by tests and the gradient check.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            frames: 4,
            height: 16,
            width: 16,
            patch: 8,
            hidden: 16,
            layers: 2,
            heads: 2,
            attention: crate::encoder::AttentionMode::Divided,
            out_dim: 16,
            ffn_hidden: 32,
        },
        frame_embedder: FrameEmbedderConfig {
            patch: 8,
            dim: 8,
            heads: 2,
            ffn_hidden: 16,
            trainable: true,
        },
        decoder: DecoderConfig {
            layers: 2,
            heads: 2,
            dim: 16,
            ffn_hidden: 32,
            task: TaskMode::MultiLabel,
        },
        text: TextConfig {
            mode: TextMode::Hashed,
            seed: 0,
        },
        mmq: true,
        text_init: true,
    }
}
