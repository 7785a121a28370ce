//! Command-line pipelines plus the attention-rollout and embedding exports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::data::{Dataset, SplitSpec};
use crate::decoder::DecoderTrace;
use crate::error::{Error, Result};
use crate::harness::{
    ablation_suite, evaluate, mean_std, model_grad_check, reference_experiment, run_supervised, run_zero_shot, zero_shot_experiment, Experiment,
    ZeroShotVariant,
};
use crate::metrics::format_report;
use crate::model::{tiny_config, ForwardOptions, Msqnet};
use crate::tensor::Tensor;

/// Min-max normalized relevance maps for each class.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutMap {
    /// Per class, heat over the `T+1` memory rows (global token first).
    pub memory: Vec<Vec<f64>>,
    /// Per class, per frame, heat over the patch grid in row-major order.
    pub spatial: Option<Vec<Vec<Vec<f64>>>>,
    /// Patch grid as (rows, columns).
    pub grid: (usize, usize),
}

/// Head-averaged encoder attention of every attention sublayer, in order.
#[derive(Clone, Copy, Debug)]
pub struct EncoderAttention<'a> {
    pub maps: &'a [Tensor],
    pub frames: usize,
    pub grid: (usize, usize),
}

/// Min-max scaling to `[0, 1]`; a constant map becomes all ones.
pub fn normalize_map(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// `∏_l rownorm(0.5·A_l + 0.5·I)`, later layers on the left.
pub fn encoder_rollout(maps: &[Tensor]) -> Result<Tensor> {
    let Some(first) = maps.first() else {
        return Err(Error::Contract("no encoder attention maps; rerun with attention retention enabled".into()));
    };
    let n = first.shape()[0];
    let mut acc = Tensor::identity(n);
    for a in maps {
        if a.shape() != [n, n] {
            return Err(Error::Contract(format!("encoder attention of shape {:?}, expected {n}×{n}", a.shape())));
        }
        let mut mixed = a.scale(0.5);
        for i in 0..n {
            let row = &mut mixed.data_mut()[i * n..(i + 1) * n];
            row[i] += 0.5;
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        acc = mixed.matmul(&acc)?;
    }
    Ok(acc)
}

/// Averages the head-averaged cross-attention rows over decoder layers and,
/// given encoder maps, spreads each class's frame heat onto input patches
/// through the encoder rollout.
pub fn attention_rollout(trace: &DecoderTrace, encoder: Option<EncoderAttention<'_>>) -> Result<RolloutMap> {
    if trace.cross_attention.is_empty() || trace.cross_attention.iter().any(|h| h.is_empty()) {
        return Err(Error::Contract("decoder trace holds no attention maps; rerun with attention retention enabled".into()));
    }
    let layers = trace.head_averaged();
    let (k, m) = (layers[0].shape()[0], layers[0].shape()[1]);
    let raw: Vec<Vec<f64>> = (0..k)
        .map(|c| (0..m).map(|j| layers.iter().map(|a| a.get(&[c, j])).sum::<f64>() / layers.len() as f64).collect())
        .collect();

    let mut grid = (0, 0);
    let spatial = match encoder {
        None => None,
        Some(enc) => {
            grid = enc.grid;
            let n = enc.grid.0 * enc.grid.1;
            if enc.frames + 1 != m {
                return Err(Error::Contract(format!("encoder has {} frames but decoder memory has {m} rows", enc.frames)));
            }
            let r = encoder_rollout(enc.maps)?;
            let tokens = r.shape()[0];
            if tokens != enc.frames * n + 1 {
                return Err(Error::Contract(format!("encoder rollout over {tokens} tokens, expected {}", enc.frames * n + 1)));
            }
            // Mean rollout row of the tokens pooled into each memory row.
            let mut group_rows = vec![r.row(0).to_vec()];
            for t in 0..enc.frames {
                let mut mean = vec![0.0; tokens];
                for i in 1 + t * n..1 + (t + 1) * n {
                    for (acc, v) in mean.iter_mut().zip(r.row(i)) {
                        *acc += v / n as f64;
                    }
                }
                group_rows.push(mean);
            }
            let maps = raw
                .iter()
                .map(|heat| {
                    let mut relevance = vec![0.0; tokens];
                    for (h, row) in heat.iter().zip(&group_rows) {
                        for (acc, v) in relevance.iter_mut().zip(row) {
                            *acc += h * v;
                        }
                    }
                    (0..enc.frames).map(|t| normalize_map(&relevance[1 + t * n..1 + (t + 1) * n])).collect()
                })
                .collect();
            Some(maps)
        }
    };
    Ok(RolloutMap {
        memory: raw.iter().map(|h| normalize_map(h)).collect(),
        spatial,
        grid,
    })
}

/// Binary PGM (`P5`, maxval 255) of `values` in `[0, 1]`, row-major.
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    out
}

/// Parses a binary PGM written by [`encode_pgm`] into (width, height, pixels).
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Contract(format!("malformed PGM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("header ends early"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
    if pixels.len() != w * h {
        return Err(bad(&format!("{} pixel bytes for {w}×{h}", pixels.len())));
    }
    Ok((w, h, pixels.to_vec()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes a `1×(T+1)` memory strip per class and, when present, one patch-grid
/// image per class and frame, plus `index.txt`. Returns the image paths.
pub fn export_heatmap(map: &RolloutMap, class_names: &[String], dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut index = String::from("# msqnet heatmap index v1\nfile,class,name,frame,height,width\n");
    let mut written = Vec::new();
    let mut emit = |file: String, k: usize, frame: String, h: usize, w: usize, values: &[f64]| -> Result<()> {
        let path = dir.join(&file);
        write_file(&path, encode_pgm(w, h, values))?;
        writeln!(index, "{file},{k},{},{frame},{h},{w}", class_names.get(k).map_or("?", String::as_str)).expect("string write");
        written.push(path);
        Ok(())
    };
    for (k, heat) in map.memory.iter().enumerate() {
        emit(format!("class{k:02}_memory.pgm"), k, "memory".into(), 1, heat.len(), heat)?;
        if let Some(spatial) = &map.spatial {
            for (t, frame) in spatial[k].iter().enumerate() {
                emit(format!("class{k:02}_frame{t:02}.pgm"), k, t.to_string(), map.grid.0, map.grid.1, frame)?;
            }
        }
    }
    write_file(&dir.join("index.txt"), index)?;
    Ok(written)
}

/// One embedding row: `kind` is `video` (mean memory row, before the decoder)
/// or `query` (final decoder state of one positive class).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub kind: &'static str,
    pub video_id: usize,
    pub class: Option<String>,
    pub labels: Vec<f64>,
    pub values: Vec<f64>,
}

pub fn embedding_rows(model: &Msqnet, ds: &Dataset) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::new();
    for (i, video) in ds.videos.iter().enumerate() {
        let mut tape = crate::tensor::Tape::new();
        let p = model.bind_constants(&mut tape);
        let fwd = model.forward(&mut tape, &p, &video.pixels, &ds.classes, ForwardOptions::default())?;
        let memory = tape.value(fwd.encoder.video.memory);
        let (m, d) = (memory.shape()[0], memory.shape()[1]);
        let pooled = (0..d).map(|j| (0..m).map(|r| memory.get(&[r, j])).sum::<f64>() / m as f64).collect();
        rows.push(EmbeddingRow {
            kind: "video",
            video_id: i,
            class: None,
            labels: video.labels.clone(),
            values: pooled,
        });
        let out = tape.value(fwd.trace.output);
        for (k, _) in video.labels.iter().enumerate().filter(|(_, &y)| y == 1.0) {
            rows.push(EmbeddingRow {
                kind: "query",
                video_id: i,
                class: Some(ds.class_names[k].clone()),
                labels: video.labels.clone(),
                values: out.row(k).to_vec(),
            });
        }
    }
    Ok(rows)
}

pub fn embeddings_csv(rows: &[EmbeddingRow]) -> String {
    let d = rows.first().map_or(0, |r| r.values.len());
    let mut out = String::from("# msqnet embeddings v1\nkind,video_id,class,labels");
    for j in 0..d {
        write!(out, ",x{j}").expect("string write");
    }
    out.push('\n');
    for r in rows {
        let bits: String = r.labels.iter().map(|&y| if y == 1.0 { '1' } else { '0' }).collect();
        write!(out, "{},{},{},{bits}", r.kind, r.video_id, r.class.as_deref().unwrap_or("-")).expect("string write");
        for v in &r.values {
            write!(out, ",{v:e}").expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Writes the pre-decoder video embeddings and post-decoder positive-class
/// query states of every video in `ds` as CSV.
pub fn export_embeddings(model: &Msqnet, ds: &Dataset, path: &Path) -> Result<()> {
    write_file(path, embeddings_csv(&embedding_rows(model, ds)?))
}

#[derive(Debug, Parser)]
#[command(name = "msqnet", about = "Multi-label video action recognition with multi-modal label queries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment JSON; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on all classes and save a checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the evaluation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Seen/unseen class splits with a permutation null.
    Zeroshot {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.75)]
        seen: f64,
        #[arg(long, default_value_t = 10)]
        splits: usize,
        #[arg(long, default_value_t = 200)]
        null: usize,
        /// Comma-separated subset of vanilla, text_init, full.
        #[arg(long, default_value = "full")]
        variants: String,
    },
    /// MMQ × text-init factorial and frame-count sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Attention-rollout heatmaps for one evaluation video.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        video: usize,
    },
    /// Video and query embeddings of the evaluation split as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::UnknownClass(_) => EXIT_CONFIG,
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_FAILURE,
    }
}

/// Reads a strict experiment JSON.
pub fn load_experiment(path: &Path) -> Result<Experiment> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let exp: Experiment = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(exp)
}

fn resolve(common: &Common, default: impl FnOnce() -> Experiment) -> Result<Experiment> {
    let mut exp = match &common.config {
        Some(path) => load_experiment(path)?,
        None => default(),
    };
    if let Some(seed) = common.seed {
        exp.seed = seed;
    }
    exp.validate()?;
    create_dir(&common.out)?;
    Ok(exp)
}

/// The gradient-check configuration as an experiment.
pub fn tiny_experiment(seed: u64) -> Experiment {
    let model = tiny_config();
    let mut exp = reference_experiment(seed);
    exp.data.frames = model.encoder.frames;
    exp.model = model;
    exp.classes.truncate(4);
    exp
}

fn model_from(exp: &Experiment, ckpt: Option<&Path>) -> Result<Msqnet> {
    let mut model = exp.build_model()?;
    if let Some(path) = ckpt {
        checkpoint::load_params(path, &mut model.params)?;
    }
    Ok(model)
}

fn eval_set(exp: &Experiment) -> Result<Dataset> {
    Ok(exp.datasets(&SplitSpec::supervised(exp.classes.len()))?.1)
}

fn parse_variants(list: &str) -> Result<Vec<ZeroShotVariant>> {
    list.split(',')
        .map(|name| {
            ZeroShotVariant::ALL
                .into_iter()
                .find(|v| v.name() == name.trim())
                .ok_or_else(|| Error::Config(format!("unknown zero-shot variant {name:?}")))
        })
        .collect()
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Train(common) => {
            let exp = resolve(&common, || reference_experiment(0))?;
            let outcome = run_supervised(&exp)?;
            checkpoint::save_params(common.out.join("checkpoint.msqk"), &outcome.model.params)?;
            write_file(&common.out.join("config.json"), serde_json::to_string_pretty(&exp).expect("serializable"))?;
            let log = outcome.record.to_log();
            write_file(&common.out.join("train_log.txt"), &log)?;
            if let Some(ev) = &outcome.record.final_eval {
                let report = format_report(&ev.metrics());
                write_file(&common.out.join("metrics.txt"), &report)?;
                print!("{report}");
            }
            println!("checksum,{}", outcome.record.checksum);
        }
        Command::Eval { common, checkpoint } => {
            let exp = resolve(&common, || reference_experiment(0))?;
            let model = model_from(&exp, Some(&checkpoint))?;
            let ev = evaluate(&model, &eval_set(&exp)?, exp.train.threshold, ForwardOptions::default())?;
            let report = format_report(&ev.metrics());
            write_file(&common.out.join("metrics.txt"), &report)?;
            print!("{report}");
        }
        Command::Zeroshot { common, seen, splits, null, variants } => {
            let exp = resolve(&common, || zero_shot_experiment(0))?;
            let variants = parse_variants(&variants)?;
            let results = run_zero_shot(&exp, seen, splits, &variants, null)?;
            for r in &results {
                write_file(&common.out.join(format!("zeroshot_split{:02}_{}.txt", r.split, r.variant.name())), r.to_text())?;
            }
            let mut summary = String::from("variant,splits,mean_map,std_map,beats_null\n");
            for v in variants {
                let maps: Vec<f64> = results.iter().filter(|r| r.variant == v).map(|r| r.map).collect();
                let wins = results.iter().filter(|r| r.variant == v && r.beats_null()).count();
                let (mean, std) = mean_std(&maps);
                writeln!(summary, "{},{},{mean:.6},{std:.6},{wins}", v.name(), maps.len()).expect("string write");
                println!("{}: unseen mAP {mean:.4} ± {std:.4}, beats null in {wins}/{}", v.name(), maps.len());
            }
            write_file(&common.out.join("zeroshot_summary.txt"), summary)?;
        }
        Command::Ablate { common, seeds } => {
            let exp = resolve(&common, || reference_experiment(0))?;
            let seeds: Vec<u64> = (0..seeds).map(|i| exp.seed + i).collect();
            let report = ablation_suite(&exp, &seeds)?;
            let text = report.to_text();
            write_file(&common.out.join("ablation.txt"), &text)?;
            print!("{text}");
        }
        Command::Rollout { common, checkpoint, video } => {
            let exp = resolve(&common, || reference_experiment(0))?;
            let model = model_from(&exp, checkpoint.as_deref())?;
            let ds = eval_set(&exp)?;
            let clip = ds
                .videos
                .get(video)
                .ok_or_else(|| Error::Config(format!("video {video} out of range; evaluation split has {}", ds.len())))?;
            let mut tape = crate::tensor::Tape::new();
            let p = model.bind_constants(&mut tape);
            let opts = ForwardOptions { retain_attention: true, ..Default::default() };
            let fwd = model.forward(&mut tape, &p, &clip.pixels, &ds.classes, opts)?;
            let e = &exp.model.encoder;
            let grid = (e.height / e.patch, e.width / e.patch);
            let enc = EncoderAttention { maps: &fwd.encoder.attention, frames: e.frames, grid };
            let map = attention_rollout(&fwd.trace, Some(enc))?;
            let written = export_heatmap(&map, &ds.class_names, &common.out.join("heatmaps"))?;
            println!("wrote {} heatmaps to {}", written.len(), common.out.join("heatmaps").display());
        }
        Command::ExportEmbeddings { common, checkpoint } => {
            let exp = resolve(&common, || reference_experiment(0))?;
            let model = model_from(&exp, checkpoint.as_deref())?;
            let path = common.out.join("embeddings.csv");
            export_embeddings(&model, &eval_set(&exp)?, &path)?;
            println!("wrote {}", path.display());
        }
        Command::Gradcheck { common, step, tolerance } => {
            let exp = resolve(&common, || tiny_experiment(0))?;
            let start = std::time::Instant::now();
            let report = model_grad_check(&exp.model, exp.classes.len(), exp.seed, step, tolerance)?;
            let text = format_report(&[
                ("coordinates", report.coordinates as f64),
                ("max_rel_error", report.max_rel_error),
                ("max_abs_error", report.max_abs_error),
                ("seconds", start.elapsed().as_secs_f64()),
            ]);
            write_file(&common.out.join("gradcheck.txt"), &text)?;
            print!("{text}");
            if report.max_rel_error > tolerance {
                eprintln!("gradient check failed: max relative error {:e} > {tolerance:e}", report.max_rel_error);
                return Ok(EXIT_NUMERICAL);
            }
        }
    }
    Ok(0)
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderTrace;
    use crate::tensor::Tape;

    fn trace(layers: Vec<Vec<Tensor>>) -> DecoderTrace {
        let output = Tape::new().constant(Tensor::scalar(0.0));
        DecoderTrace {
            states: Vec::new(),
            cross_attention: layers,
            output,
        }
    }

    #[test]
    fn single_layer_rollout_is_that_layer() {
        let a = Tensor::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.6, 0.4, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.4, 0.3, 0.3], vec![0.2, 0.2, 0.6]]).unwrap();
        let map = attention_rollout(&trace(vec![vec![a, b]]), None).unwrap();
        // Head average: [0.3, 0.3, 0.4] and [0.4, 0.3, 0.3].
        assert!((map.memory[0][2] - 1.0).abs() < 1e-12 && map.memory[0][0].abs() < 1e-12 && map.memory[0][1].abs() < 1e-12);
        assert!((map.memory[1][0] - 1.0).abs() < 1e-12 && map.memory[1][1].abs() < 1e-12);
    }

    #[test]
    fn two_layer_rollout_averages_rows() {
        let l1 = Tensor::from_rows(&[vec![0.1, 0.2, 0.7]]).unwrap();
        let l2 = Tensor::from_rows(&[vec![0.5, 0.4, 0.1]]).unwrap();
        let map = attention_rollout(&trace(vec![vec![l1], vec![l2]]), None).unwrap();
        // Average [0.3, 0.3, 0.4] normalizes to [0, 0, 1].
        assert_eq!(map.memory[0].len(), 3);
        assert!(map.memory[0][0].abs() < 1e-12 && map.memory[0][1].abs() < 1e-12);
        assert!((map.memory[0][2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_maps_ask_for_retention() {
        let err = attention_rollout(&trace(vec![]), None).unwrap_err();
        assert!(err.to_string().contains("retention"), "{err}");
        assert!(encoder_rollout(&[]).unwrap_err().to_string().contains("retention"));
    }

    #[test]
    fn identity_attention_rolls_out_to_identity() {
        let eye = Tensor::identity(5);
        assert_eq!(encoder_rollout(&[eye.clone(), eye.clone(), eye.clone()]).unwrap(), eye);
    }

    #[test]
    fn encoder_rollout_matches_manual_product() {
        let a = Tensor::from_rows(&[vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.25, 0.75]]).unwrap();
        // 0.5A+0.5I = [[.75,.25],[.5,.5]]; 0.5B+0.5I = [[.5,.5],[.125,.875]].
        let expect = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.125, 0.875]])
            .unwrap()
            .matmul(&Tensor::from_rows(&[vec![0.75, 0.25], vec![0.5, 0.5]]).unwrap())
            .unwrap();
        let got = encoder_rollout(&[a, b]).unwrap();
        assert!(got.data().iter().zip(expect.data()).all(|(x, y)| (x - y).abs() < 1e-15));
        for i in 0..2 {
            assert!((got.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_maps_follow_frame_heat() {
        // Two frames of a 1×2 grid, identity encoder: frame heat goes straight
        // to that frame's patches, which are then normalized per frame.
        let dec = Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        let maps = vec![Tensor::identity(5)];
        let enc = EncoderAttention { maps: &maps, frames: 2, grid: (1, 2) };
        let map = attention_rollout(&trace(vec![vec![dec]]), Some(enc)).unwrap();
        let spatial = map.spatial.unwrap();
        assert_eq!(spatial[0], vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(map.memory[0], vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn constant_map_normalizes_to_ones() {
        assert_eq!(normalize_map(&[0.25; 4]), vec![1.0; 4]);
        assert_eq!(normalize_map(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn pgm_pixels_and_round_trip() {
        let bytes = encode_pgm(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(decode_pgm(&bytes).unwrap(), (2, 2, vec![255, 0, 0, 0]));
        let heat = [0.0, 0.1, 0.5, 0.999, 1.0, 0.3333];
        let (w, h, px) = decode_pgm(&encode_pgm(3, 2, &heat)).unwrap();
        assert_eq!((w, h), (3, 2));
        let expect: Vec<u8> = heat.iter().map(|v| (255.0 * v).round() as u8).collect();
        assert_eq!(px, expect);
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn heatmap_export_writes_index() {
        let map = RolloutMap {
            memory: vec![vec![1.0, 0.0, 0.5]],
            spatial: Some(vec![vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0; 4]]]),
            grid: (2, 2),
        };
        let dir = tempfile::tempdir().unwrap();
        let files = export_heatmap(&map, &["blink".to_string()], dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let (_, _, px) = decode_pgm(&fs::read(dir.path().join("class00_frame00.pgm")).unwrap()).unwrap();
        assert_eq!(px, vec![255, 0, 0, 0]);
        let index = fs::read_to_string(dir.path().join("index.txt")).unwrap();
        assert_eq!(index.lines().count(), 5);
        assert!(index.contains("class00_memory.pgm,0,blink,memory,1,3"));
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Numerical("x".into())), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::Eval("x".into())), EXIT_FAILURE);
        assert_eq!(run(["msqnet", "bogus"]), EXIT_CONFIG);
        assert_eq!(run(["msqnet", "--help"]), 0);
    }
}
