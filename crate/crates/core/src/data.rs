//! Synthetic multi-label "moving pattern" videos and class split protocols.
//!
//! A class name is one primitive (`"blink"`) or a `+`-joined pair of a shape
//! primitive and a colour primitive (`"grow+color-shift-b"`). Shape
//! primitives decide which pixels are lit in each frame (moving gratings, a
//! pulsing square, a flashing checkerboard, a circling quadrant), colour
//! primitives decide the per-channel intensity of those pixels over time.
//! Every class is rendered additively onto a noisy background.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::query::TOKEN_SEPARATOR;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    TranslateLeft,
    TranslateRight,
    TranslateUp,
    TranslateDown,
    Grow,
    Shrink,
    Blink,
    RotateQuadrant,
    ColorShiftR,
    ColorShiftG,
    ColorShiftB,
    Oscillate,
}

impl Primitive {
    pub const ALL: [Primitive; 12] = [
        Primitive::TranslateLeft,
        Primitive::TranslateRight,
        Primitive::TranslateUp,
        Primitive::TranslateDown,
        Primitive::Grow,
        Primitive::Shrink,
        Primitive::Blink,
        Primitive::RotateQuadrant,
        Primitive::ColorShiftR,
        Primitive::ColorShiftG,
        Primitive::ColorShiftB,
        Primitive::Oscillate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::TranslateLeft => "translate-left",
            Primitive::TranslateRight => "translate-right",
            Primitive::TranslateUp => "translate-up",
            Primitive::TranslateDown => "translate-down",
            Primitive::Grow => "grow",
            Primitive::Shrink => "shrink",
            Primitive::Blink => "blink",
            Primitive::RotateQuadrant => "rotate-quadrant",
            Primitive::ColorShiftR => "color-shift-r",
            Primitive::ColorShiftG => "color-shift-g",
            Primitive::ColorShiftB => "color-shift-b",
            Primitive::Oscillate => "oscillate",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    fn channel(self) -> Option<usize> {
        match self {
            Primitive::ColorShiftR => Some(0),
            Primitive::ColorShiftG => Some(1),
            Primitive::ColorShiftB => Some(2),
            _ => None,
        }
    }
}

/// A vocabulary entry: an optional shape primitive and an optional colour
/// primitive (at least one present).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionClass {
    pub name: String,
    shape: Option<Primitive>,
    color: Option<Primitive>,
}

impl ActionClass {
    pub fn parse(name: &str) -> Result<Self> {
        let mut shape = None;
        let mut color = None;
        for token in name.split(TOKEN_SEPARATOR) {
            let p = Primitive::from_name(token).ok_or_else(|| Error::UnknownClass(name.to_string()))?;
            let slot = if p.channel().is_some() { &mut color } else { &mut shape };
            if slot.replace(p).is_some() {
                return Err(Error::UnknownClass(format!("{name}: at most one shape and one colour token")));
            }
        }
        Ok(Self {
            name: name.to_string(),
            shape,
            color,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub classes: Vec<ActionClass>,
}

impl Vocabulary {
    pub fn new(names: &[String]) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut classes = Vec::with_capacity(names.len());
        for n in names {
            if !seen.insert(n.as_str()) {
                return Err(Error::Config(format!("duplicate class name {n:?}")));
            }
            classes.push(ActionClass::parse(n)?);
        }
        if classes.is_empty() {
            return Err(Error::Config("empty vocabulary".into()));
        }
        Ok(Self { classes })
    }

    /// The first `k` single primitives.
    pub fn primitives(k: usize) -> Result<Self> {
        if k > Primitive::ALL.len() {
            return Err(Error::Config(format!("only {} primitives exist", Primitive::ALL.len())));
        }
        Self::new(&Primitive::ALL[..k].iter().map(|p| p.name().to_string()).collect::<Vec<_>>())
    }

    /// Shape × colour product classes, e.g. `"grow+color-shift-r"`.
    pub fn compositional(shapes: &[Primitive], colors: &[Primitive]) -> Result<Self> {
        let mut names = Vec::new();
        for s in shapes {
            for c in colors {
                names.push(format!("{}{TOKEN_SEPARATOR}{}", s.name(), c.name()));
            }
        }
        Self::new(&names)
    }

    /// The twelve classes {translate-left, translate-right, grow, shrink} ×
    /// {color-shift-r, -g, -b}.
    pub fn compositional_default() -> Self {
        use Primitive::*;
        Self::compositional(&[TranslateLeft, TranslateRight, Grow, Shrink], &[ColorShiftR, ColorShiftG, ColorShiftB]).expect("valid names")
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }
}

/// Restricts a pattern to `width` frames out of every `period`, at a random
/// phase per class, so short clips can miss it entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pulse {
    pub period: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub background: f64,
    pub noise_std: f64,
    /// Peak added intensity of a pattern.
    pub amplitude: f64,
    /// Relative weights of label-set sizes 1, 2 and 3.
    pub label_sizes: [f64; 3],
    /// Each class instance starts at a random phase in `0..phase_jitter`.
    pub phase_jitter: usize,
    pub pulse: Option<Pulse>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 16,
            width: 16,
            background: 0.1,
            noise_std: 0.05,
            amplitude: 0.3,
            label_sizes: [1.0, 1.0, 1.0],
            phase_jitter: 4,
            pulse: None,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height < 2 || self.width < 2 {
            return Err(Error::Config(format!("degenerate video geometry {}×{}×{}", self.frames, self.height, self.width)));
        }
        if self.label_sizes.iter().any(|w| !(*w >= 0.0)) || self.label_sizes.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("label_sizes must be non-negative with a positive sum".into()));
        }
        if self.phase_jitter == 0 {
            return Err(Error::Config("phase_jitter must be at least 1".into()));
        }
        if let Some(p) = self.pulse {
            if p.width == 0 || p.width > p.period {
                return Err(Error::Config(format!("pulse width {} must be in 1..={}", p.width, p.period)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    /// `T×3×H×W` in `[0, 1]`.
    pub pixels: Tensor,
    /// Multi-hot over the owning dataset's class columns.
    pub labels: Vec<f64>,
    pub seed: u64,
}

fn name_stream(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

const LABEL_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Spatial period, in pixels, of the moving gratings. Motion advances one
/// pixel per frame, so translations repeat every `STRIPE` frames.
pub const STRIPE: usize = 8;

/// Square wave with `STRIPE`-pixel period and 50% duty cycle.
fn stripe(u: i64) -> bool {
    u.rem_euclid(STRIPE as i64) < STRIPE as i64 / 2
}

const TRIANGLE: [i64; 8] = [0, 1, 2, 3, 4, 3, 2, 1];

/// Where a shape primitive (or, with no shape, the whole frame) is lit at
/// frame `t`, as a row-major `H×W` mask. `phase` shifts the pattern in time.
fn shape_mask(shape: Option<Primitive>, t: usize, h: usize, w: usize, phase: usize) -> Vec<bool> {
    let tp = t + phase;
    let (ti, ph) = (t as i64, phase as i64);
    let (cy, cx) = ((h / 2) as i64, (w / 2) as i64);
    let lit = |y: i64, x: i64| -> bool {
        use Primitive::*;
        match shape {
            Some(TranslateLeft) => stripe(x + ph + ti),
            Some(TranslateRight) => stripe(x + ph - ti),
            Some(TranslateUp) => stripe(y + ph + ti),
            Some(TranslateDown) => stripe(y + ph - ti),
            Some(Oscillate) => stripe(x - TRIANGLE[tp % 8]),
            Some(Grow) | Some(Shrink) => {
                let step = (tp % 8) as i64;
                let half = if shape == Some(Grow) { step } else { 7 - step };
                (-half..half).contains(&(y - cy)) && (-half..half).contains(&(x - cx))
            }
            Some(Blink) => tp % 2 == 0 && (y.div_euclid(4) + x.div_euclid(4)) % 2 == 0,
            Some(RotateQuadrant) => {
                let (qy, qx) = [(0, 0), (0, 1), (1, 1), (1, 0)][(tp / 2) % 4];
                (y >= cy) as i64 == qy && (x >= cx) as i64 == qx
            }
            Some(ColorShiftR) | Some(ColorShiftG) | Some(ColorShiftB) | None => true,
        }
    };
    (0..h as i64).flat_map(|y| (0..w as i64).map(move |x| (y, x))).map(|(y, x)| lit(y, x)).collect()
}

/// Per-channel intensity of a colour primitive (or plain white) at frame `t`:
/// a sawtooth between half and full amplitude with an 8-frame period.
fn color_at(color: Option<Primitive>, t: usize, phase: usize, amplitude: f64) -> [f64; 3] {
    match color.and_then(Primitive::channel) {
        Some(c) => {
            let mut rgb = [0.0; 3];
            rgb[c] = amplitude * (0.5 + 0.5 * ((t + phase) % 8) as f64 / 7.0);
            rgb
        }
        None => [amplitude; 3],
    }
}

/// Renders `classes` (vocabulary indices) for video `seed`.
fn render(vocab: &Vocabulary, classes: &[usize], seed: u64, cfg: &DataConfig) -> Tensor {
    let (t_n, h, w) = (cfg.frames, cfg.height, cfg.width);
    let plane = h * w;
    let mut noise_rng = rng_for(seed, NOISE_STREAM);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");
    let mut px: Vec<f64> = (0..t_n * 3 * plane)
        .map(|_| cfg.background + if cfg.noise_std > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 })
        .collect();
    // Fixed summation order so pixels depend on the label set only.
    let mut classes = classes.to_vec();
    classes.sort_unstable();
    for k in classes {
        let class = &vocab.classes[k];
        let mut rng = rng_for(seed, name_stream(&class.name));
        let phase = rng.gen_range(0..cfg.phase_jitter);
        let pulse_phase = rng.gen_range(0..cfg.pulse.map_or(1, |p| p.period));
        for t in 0..t_n {
            if let Some(p) = cfg.pulse {
                if (t + pulse_phase) % p.period >= p.width {
                    continue;
                }
            }
            let mask = shape_mask(class.shape, t, h, w, phase);
            let rgb = color_at(class.color, t, phase, cfg.amplitude);
            for (c, &a) in rgb.iter().enumerate() {
                let base = (t * 3 + c) * plane;
                for (i, &on) in mask.iter().enumerate() {
                    if on {
                        px[base + i] += a;
                    }
                }
            }
        }
    }
    px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(vec![t_n, 3, h, w], px).expect("consistent shape")
}

/// One video showing exactly the named classes; labels are multi-hot over
/// the whole vocabulary.
pub fn generate_video(vocab: &Vocabulary, label_set: &[&str], seed: u64, cfg: &DataConfig) -> Result<SyntheticVideo> {
    cfg.validate()?;
    if label_set.is_empty() || label_set.len() > 3 {
        return Err(Error::Contract(format!("a video shows 1 to 3 classes, got {}", label_set.len())));
    }
    let mut idx = Vec::with_capacity(label_set.len());
    for name in label_set {
        let i = vocab.index(name)?;
        if idx.contains(&i) {
            return Err(Error::Contract(format!("class {name} listed twice")));
        }
        idx.push(i);
    }
    let mut labels = vec![0.0; vocab.len()];
    idx.iter().for_each(|&i| labels[i] = 1.0);
    Ok(SyntheticVideo {
        pixels: render(vocab, &idx, seed, cfg),
        labels,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Supervised,
    ZeroShot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub seen_fraction: f64,
    pub split_seed: u64,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

impl SplitSpec {
    pub fn supervised(k: usize) -> Self {
        Self {
            mode: SplitMode::Supervised,
            seen_fraction: 1.0,
            split_seed: 0,
            seen: (0..k).collect(),
            unseen: Vec::new(),
        }
    }
}

/// `n_splits` distinct seeded seen/unseen partitions of `0..k`.
pub fn make_zero_shot_splits(k: usize, seen_fraction: f64, n_splits: usize, master_seed: u64) -> Result<Vec<SplitSpec>> {
    if k < 4 {
        return Err(Error::Config(format!("zero-shot splits need at least 4 classes, got {k}")));
    }
    if !(seen_fraction > 0.0 && seen_fraction < 1.0) || n_splits == 0 {
        return Err(Error::Config(format!("invalid split request: fraction {seen_fraction}, {n_splits} splits")));
    }
    let n_seen = (seen_fraction * k as f64).round() as usize;
    if n_seen == 0 || n_seen == k {
        return Err(Error::Config(format!("degenerate split: {n_seen} of {k} classes seen")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let mut splits: Vec<SplitSpec> = Vec::with_capacity(n_splits);
    let mut attempts = 0;
    while splits.len() < n_splits {
        attempts += 1;
        if attempts > 1000 * n_splits {
            return Err(Error::Config(format!("cannot draw {n_splits} distinct splits of {k} classes")));
        }
        let split_seed = rng.gen();
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
        let mut seen = order[..n_seen].to_vec();
        let mut unseen = order[n_seen..].to_vec();
        seen.sort_unstable();
        unseen.sort_unstable();
        if splits.iter().any(|s| s.seen == seen) {
            continue;
        }
        splits.push(SplitSpec {
            mode: SplitMode::ZeroShot,
            seen_fraction,
            split_seed,
            seen,
            unseen,
        });
    }
    Ok(splits)
}

/// Videos whose labels are multi-hot over `classes` (vocabulary indices).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub classes: Vec<usize>,
    pub videos: Vec<SyntheticVideo>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// `n×|classes|` label matrix of the selected videos.
    pub fn targets(&self, indices: &[usize]) -> Tensor {
        let k = self.classes.len();
        let mut data = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            data.extend_from_slice(&self.videos[i].labels);
        }
        Tensor::new(vec![indices.len(), k], data).expect("consistent labels")
    }

    /// Vocabulary indices of the classes present in any video.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .videos
            .iter()
            .flat_map(|v| v.labels.iter().enumerate().filter(|(_, &y)| y == 1.0).map(|(i, _)| self.classes[i]))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Seeds of train and eval videos live in disjoint ranges.
pub fn video_seed(data_seed: u64, eval: bool, index: usize) -> u64 {
    (data_seed << 41) | ((eval as u64) << 40) | index as u64
}

fn sample_set(classes: &[usize], vocab: &Vocabulary, seed: u64, cfg: &DataConfig) -> Result<SyntheticVideo> {
    let mut rng = rng_for(seed, LABEL_STREAM);
    let sizes = WeightedIndex::new(cfg.label_sizes).map_err(|e| Error::Config(format!("label_sizes: {e}")))?;
    let n = (sizes.sample(&mut rng) + 1).min(classes.len());
    let cols: Vec<usize> = rand::seq::index::sample(&mut rng, classes.len(), n).into_vec();
    let picked: Vec<usize> = cols.iter().map(|&c| classes[c]).collect();
    let mut labels = vec![0.0; classes.len()];
    cols.iter().for_each(|&c| labels[c] = 1.0);
    Ok(SyntheticVideo {
        pixels: render(vocab, &picked, seed, cfg),
        labels,
        seed,
    })
}

/// Train and eval sets for `split`. In zero-shot mode training videos only
/// contain seen classes and eval videos only unseen ones, each labelled over
/// its own class list.
pub fn build_dataset(
    vocab: &Vocabulary,
    split: &SplitSpec,
    n_train: usize,
    n_eval: usize,
    cfg: &DataConfig,
    data_seed: u64,
) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let all: HashSet<usize> = split.seen.iter().chain(&split.unseen).copied().collect();
    if all.len() != vocab.len() || split.seen.iter().any(|c| split.unseen.contains(c)) || all.iter().any(|&c| c >= vocab.len()) {
        return Err(Error::Config("split must partition the vocabulary".into()));
    }
    let (train_cols, eval_cols) = match split.mode {
        SplitMode::Supervised => {
            let all: Vec<usize> = (0..vocab.len()).collect();
            (all.clone(), all)
        }
        SplitMode::ZeroShot => {
            if split.unseen.len() < 2 {
                return Err(Error::Config(format!("zero-shot evaluation needs at least 2 unseen classes, got {}", split.unseen.len())));
            }
            (split.seen.clone(), split.unseen.clone())
        }
    };
    let make = |cols: Vec<usize>, n: usize, eval: bool| -> Result<Dataset> {
        let videos = (0..n)
            .map(|i| sample_set(&cols, vocab, video_seed(data_seed, eval, i), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            class_names: cols.iter().map(|&c| vocab.classes[c].name.clone()).collect(),
            classes: cols,
            videos,
        })
    };
    Ok((make(train_cols, n_train, false)?, make(eval_cols, n_eval, true)?))
}

const MANIFEST: &str = "manifest.txt";

/// Writes one tensor file per video plus `manifest.txt`.
pub fn export_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# msqnet dataset v1\n");
    writeln!(manifest, "# classes={}", ds.class_names.join(";")).expect("string write");
    writeln!(manifest, "# class_ids={}", ds.classes.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";")).expect("string write");
    for (i, v) in ds.videos.iter().enumerate() {
        let file = format!("video_{i:05}.msqk");
        checkpoint::save(dir.join(&file), &[("pixels", &v.pixels)])?;
        let bits: String = v.labels.iter().map(|&y| if y == 1.0 { '1' } else { '0' }).collect();
        writeln!(manifest, "{file},{},{bits}", v.seed).expect("string write");
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn import_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |line: usize, msg: &str| Error::Config(format!("{}:{}: {msg}", path.display(), line + 1));
    let mut class_names = None;
    let mut classes = None;
    let mut videos = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if let Some(rest) = line.strip_prefix("# classes=") {
            class_names = Some(rest.split(';').map(str::to_string).collect::<Vec<_>>());
        } else if let Some(rest) = line.strip_prefix("# class_ids=") {
            classes = Some(rest.split(';').map(|s| s.parse::<usize>().map_err(|_| bad(n, "bad class id"))).collect::<Result<Vec<_>>>()?);
        } else if line.starts_with('#') || line.trim().is_empty() {
            continue;
        } else {
            let fields: Vec<&str> = line.split(',').collect();
            let [file, seed, bits] = fields[..] else {
                return Err(bad(n, "expected file,seed,labels"));
            };
            let seed = seed.parse().map_err(|_| bad(n, "bad seed"))?;
            let labels = bits
                .chars()
                .map(|c| match c {
                    '0' => Ok(0.0),
                    '1' => Ok(1.0),
                    _ => Err(bad(n, "labels must be a 0/1 string")),
                })
                .collect::<Result<Vec<f64>>>()?;
            let mut tensors = checkpoint::load(dir.join(file))?;
            if tensors.len() != 1 || tensors[0].0 != "pixels" {
                return Err(bad(n, "video file must hold exactly one tensor named pixels"));
            }
            videos.push(SyntheticVideo {
                pixels: tensors.remove(0).1,
                labels,
                seed,
            });
        }
    }
    let class_names = class_names.ok_or_else(|| bad(0, "missing classes header"))?;
    let classes = classes.ok_or_else(|| bad(0, "missing class_ids header"))?;
    if classes.len() != class_names.len() || videos.iter().any(|v| v.labels.len() != classes.len()) {
        return Err(bad(0, "label width does not match class list"));
    }
    Ok(Dataset {
        class_names,
        classes,
        videos,
    })
}
