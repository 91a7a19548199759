//! Entry points behind the `tpd` subcommands.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::json;

use crate::adversarial::{train_pose, Discriminator, MetricsRecord, TrainError, TrainState};
use crate::autodiff::{Adam, Precision, Tensor};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{Config, ConfigError};
use crate::distill::{dsds_step, Optimizer, Sample, TriPlaneScene};
use crate::corpus::{eval_views, make_corpus, read_corpus, write_corpus, EVAL_ELEVATION, EVAL_VIEW_NAMES};
use crate::generator::{GenerateError, Generator};
use crate::metrics::{prompt_mix_eval, MetricError, MixReport};
use crate::render::{CameraPose, Decoder, TriPlane};
use crate::rng::RngState;
use crate::train::{evaluate, vocabulary, EvalReport, Lab};

#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl CommandError {
    /// 2 for configuration and usage, 3 for numeric aborts, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) | CommandError::Usage(_) => 2,
            CommandError::Numeric(_) => 3,
            CommandError::Checkpoint(_) | CommandError::Io { .. } => 4,
        }
    }
}

impl From<TrainError> for CommandError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NoData => CommandError::Usage(e.to_string()),
            e => CommandError::Numeric(e.to_string()),
        }
    }
}

impl From<GenerateError> for CommandError {
    fn from(e: GenerateError) -> Self {
        CommandError::Usage(e.to_string())
    }
}

impl From<MetricError> for CommandError {
    fn from(e: MetricError) -> Self {
        CommandError::Usage(e.to_string())
    }
}

fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CommandError {
    let context = context.into();
    move |source| CommandError::Io { context, source }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CommandError> {
    fs::write(path, bytes).map_err(io(path.display().to_string()))
}

fn write_png(path: &Path, img: &crate::image_io::Image) -> Result<(), CommandError> {
    let bytes = img.encode_png().map_err(io(path.display().to_string()))?;
    write_file(path, &bytes)
}

fn ensure_dir(dir: &Path) -> Result<(), CommandError> {
    fs::create_dir_all(dir).map_err(io(dir.display().to_string()))
}

/// Latent for a user-facing seed.
pub fn latent(gen: &Generator, seed: u64) -> Vec<f64> {
    gen.sample_z(&mut crate::rng::stream(seed, 7))
}

/// Generator, discriminator and training state captured in one file.
pub fn snapshot(config: &Config, gen: &Generator, disc: &Discriminator, state: &TrainState) -> Checkpoint {
    let mut ck = Checkpoint::new(config.to_text(), state.step as u64);
    ck.push_store("gen", &gen.store);
    ck.push_store("disc", &disc.store);
    ck.rngs.push(("train".into(), RngState::capture(&state.rng)));
    ck
}

/// A checkpoint's config and generator.
pub fn load_generator(path: &Path, precision: Precision) -> Result<(Config, Generator), CommandError> {
    let ck = Checkpoint::load(path)?;
    let config = Config::parse(&ck.config)?;
    let store = ck.store("gen", precision);
    let gen = Generator::with_store(config.generator_config(), vocabulary(&config), store)
        .map_err(|m| CommandError::Checkpoint(CheckpointError::Malformed(m)))?;
    Ok((config, gen))
}

fn restore(ck: &Checkpoint, lab: &Lab, gen: &mut Generator, disc: &mut Discriminator) -> Result<(), CommandError> {
    let bad = |m: String| CommandError::Checkpoint(CheckpointError::Malformed(m));
    *gen = Generator::with_store(lab.config.generator_config(), lab.vocab.clone(), ck.store("gen", Precision::F32)).map_err(bad)?;
    let d = ck.store("disc", Precision::F32);
    if d.len() != disc.store.len() || d.iter().zip(disc.store.iter()).any(|(a, b)| a.1 != b.1 || a.2.shape() != b.2.shape()) {
        return Err(bad("discriminator does not match the config".into()));
    }
    disc.store = d;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_checkpoint: PathBuf,
    pub teacher_calls: u64,
    pub last: Option<MetricsRecord>,
}

/// Trains per `config`, optionally starting from the networks in `init`.
/// Writes `metrics.jsonl`, `step_N.tpd` every `checkpoint_every` steps and
/// `final.tpd`.
pub fn cmd_train(config: &Config, out_dir: &Path, init: Option<&Path>) -> Result<TrainSummary, CommandError> {
    ensure_dir(out_dir)?;
    let lab = Lab::new(config)?;
    let mut gen = lab.new_generator();
    let mut disc = lab.new_discriminator();
    if let Some(p) = init {
        restore(&Checkpoint::load(p)?, &lab, &mut gen, &mut disc)?;
    }
    let mut state = lab.new_state();
    let total = config.stage1_steps + config.stage2_steps;
    let log_path = out_dir.join("metrics.jsonl");
    let mut log = fs::File::create(&log_path).map_err(io(log_path.display().to_string()))?;
    let mut last = None;
    let every = if config.checkpoint_every == 0 { total.max(1) } else { config.checkpoint_every };
    while state.step < total {
        let until = (state.step + every).min(total);
        let records = lab.train_until(&mut gen, &mut disc, &mut state, until)?;
        for r in &records {
            let line = serde_json::to_string(r).expect("records serialize");
            writeln!(log, "{line}").map_err(io(log_path.display().to_string()))?;
        }
        last = records.last().cloned().or(last);
        if state.step < total {
            snapshot(config, &gen, &disc, &state).save(&out_dir.join(format!("step_{}.tpd", state.step)))?;
        }
    }
    let final_checkpoint = out_dir.join("final.tpd");
    snapshot(config, &gen, &disc, &state).save(&final_checkpoint)?;
    Ok(TrainSummary {
        steps: state.step,
        final_checkpoint,
        teacher_calls: lab.teacher.calls(),
        last,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Views {
    Single,
    Orbit,
    Msc,
}

impl std::str::FromStr for Views {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "single" => Ok(Views::Single),
            "orbit" => Ok(Views::Orbit),
            "msc" => Ok(Views::Msc),
            _ => Err(format!("unknown view set `{s}`")),
        }
    }
}

/// Azimuths of the orbit view set.
pub const ORBIT_AZIMUTHS: [f64; 9] = [-60.0, -45.0, -30.0, -15.0, 0.0, 15.0, 30.0, 45.0, 60.0];

#[derive(Clone, Debug)]
pub struct GenerateOutput {
    pub files: Vec<PathBuf>,
    pub elapsed: Duration,
    pub checksum_before: u64,
    pub checksum_after: u64,
}

/// Renders `prompt` with a single forward pass of `gen`.
pub fn generate_views(
    gen: &Generator,
    config: &Config,
    prompt: &str,
    seed: u64,
    views: Views,
    out_dir: &Path,
) -> Result<GenerateOutput, CommandError> {
    if prompt.trim().is_empty() {
        return Err(CommandError::Usage("prompt is empty".into()));
    }
    ensure_dir(out_dir)?;
    let checksum_before = gen.store.checksum();
    let size = config.eval_res;
    let poses: Vec<(String, CameraPose)> = match views {
        Views::Single => vec![("image.png".into(), eval_views(size)[0])],
        Views::Msc => EVAL_VIEW_NAMES
            .iter()
            .zip(eval_views(size))
            .map(|(n, p)| (format!("{n}.png"), p))
            .collect(),
        Views::Orbit => ORBIT_AZIMUTHS
            .iter()
            .enumerate()
            .map(|(k, &az)| (format!("orbit_{k:02}.png"), CameraPose::orbit(az, EVAL_ELEVATION, size)))
            .collect(),
    };
    let z = latent(gen, seed);
    let start = Instant::now();
    let images = poses
        .iter()
        .map(|(_, p)| gen.generate(&z, prompt, p, config.eval_samples))
        .collect::<Result<Vec<_>, _>>()?;
    let elapsed = start.elapsed();
    let mut files = Vec::new();
    for ((name, _), img) in poses.iter().zip(&images) {
        let path = out_dir.join(name);
        write_png(&path, img)?;
        files.push(path);
    }
    Ok(GenerateOutput {
        files,
        elapsed,
        checksum_before,
        checksum_after: gen.store.checksum(),
    })
}

pub fn cmd_generate(checkpoint: &Path, prompt: &str, seed: u64, views: Views, out_dir: &Path) -> Result<GenerateOutput, CommandError> {
    let (config, gen) = load_generator(checkpoint, Precision::F32)?;
    generate_views(&gen, &config, prompt, seed, views, out_dir)
}

/// Writes `n` scenes rendered at `size` as a corpus directory.
pub fn cmd_corpus(slots: usize, n: usize, seed: u64, size: usize, out_dir: &Path) -> Result<(), CommandError> {
    if n == 0 || !(1..=5).contains(&slots) || size < 4 {
        return Err(CommandError::Usage("need n ≥ 1, 1 ≤ slots ≤ 5 and size ≥ 4".into()));
    }
    let items = make_corpus(&crate::text::Vocabulary::with_slot_count(slots), n, seed, size);
    write_corpus(&items, out_dir).map_err(io(out_dir.display().to_string()))
}

/// Metrics of a checkpoint against a corpus directory; writes JSON to `out`.
pub fn cmd_evaluate(checkpoint: &Path, corpus_dir: &Path, out: &Path, limit: usize) -> Result<EvalReport, CommandError> {
    let (config, gen) = load_generator(checkpoint, Precision::F32)?;
    let manifest = corpus_dir.join("manifest.jsonl");
    if !manifest.is_file() {
        return Err(CommandError::Usage(format!("no corpus manifest at {}", manifest.display())));
    }
    let corpus = read_corpus(&gen.vocab, corpus_dir).map_err(|e| CommandError::Usage(format!("corpus: {e}")))?;
    if corpus.is_empty() {
        return Err(CommandError::Usage("corpus is empty".into()));
    }
    if corpus[0].image.width < 64 {
        return Err(CommandError::Usage("corpus images must be at least 64 pixels wide".into()));
    }
    let lab = Lab::new(&config)?;
    let report = evaluate(&lab, &gen, &corpus, limit)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(out, text.as_bytes())?;
    Ok(report)
}

/// Cumulative prompt mixing at a fixed latent; writes `step_k.png` and
/// `report.json`.
pub fn cmd_mix(checkpoint: &Path, base: &str, additions: &[String], seed: u64, out_dir: &Path) -> Result<MixReport, CommandError> {
    let (config, gen) = load_generator(checkpoint, Precision::F32)?;
    mix_with(&gen, &config, base, additions, seed, out_dir)
}

pub fn mix_with(
    gen: &Generator,
    config: &Config,
    base: &str,
    additions: &[String],
    seed: u64,
    out_dir: &Path,
) -> Result<MixReport, CommandError> {
    ensure_dir(out_dir)?;
    let probe = crate::metrics::Probe::new(&gen.vocab, config.eval_res);
    let z = latent(gen, seed);
    let pose = eval_views(config.eval_res)[0];
    let (report, images) = prompt_mix_eval(gen, &probe, base, additions, &z, &pose, config.eval_samples)?;
    for (k, img) in images.iter().enumerate() {
        write_png(&out_dir.join(format!("step_{k}.png")), img)?;
    }
    let text = serde_json::to_string_pretty(&json!({"monotone": report.monotone(), "steps": report.steps}))
        .expect("report serializes");
    write_file(&out_dir.join("report.json"), text.as_bytes())?;
    Ok(report)
}

/// Frames along the straight line between the style latents of two seeds.
pub fn cmd_interpolate(
    checkpoint: &Path,
    prompt: &str,
    z1_seed: u64,
    z2_seed: u64,
    steps: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, CommandError> {
    if steps < 2 {
        return Err(CommandError::Usage("interpolation needs at least 2 steps".into()));
    }
    let (config, gen) = load_generator(checkpoint, Precision::F32)?;
    ensure_dir(out_dir)?;
    let w1 = gen.style_latent(&latent(&gen, z1_seed))?;
    let w2 = gen.style_latent(&latent(&gen, z2_seed))?;
    let pose = eval_views(config.eval_res)[0];
    let mut files = Vec::new();
    for k in 0..steps {
        let a = k as f64 / (steps - 1) as f64;
        let w: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| (1.0 - a) * x + a * y).collect();
        let img = gen.generate_from_w(&w, prompt, &pose, config.eval_samples)?;
        let path = out_dir.join(format!("frame_{k:03}.png"));
        write_png(&path, &img)?;
        files.push(path);
    }
    Ok(files)
}

/// Wall time of feed-forward generation against per-prompt optimization.
#[derive(Clone, Debug, Serialize)]
pub struct SpeedContrast {
    pub prompt: String,
    pub iterations: usize,
    pub optimize_seconds: f64,
    pub generate_seconds: f64,
    /// `generate_seconds / optimize_seconds`.
    pub ratio: f64,
}

/// Times `iterations` distillation steps of a standalone tri-plane for one
/// prompt against one generator forward pass, both at the training
/// resolution and sample count.
pub fn speed_contrast(lab: &Lab, gen: &Generator, prompt: &str, iterations: usize) -> Result<SpeedContrast, CommandError> {
    if prompt.trim().is_empty() {
        return Err(CommandError::Usage("prompt is empty".into()));
    }
    let config = &lab.config;
    let attrs = lab.vocab.parse(prompt);
    let mut rng = crate::rng::stream(config.seed, 8);
    let c = config.channels;
    let planes = [0, 1, 2].map(|_| Tensor::randn(&[config.plane_res, config.plane_res, c], 0.5, &mut rng));
    let init = TriPlane::new(planes, Decoder::random(c, config.decoder_hidden, &mut rng)).expect("square planes");
    let mut scene = TriPlaneScene::new(&init, config.render_samples);
    let res = config.train_res;
    let draw = |r: &mut crate::rng::Rng| Sample {
        z: Vec::new(),
        prompt: prompt.to_string(),
        attrs: Some(attrs.clone()),
        pose: train_pose(res, r),
    };
    let mut opt = Optimizer::Adam(Adam::new(config.lr_g));
    let opts = config.train_schedule().sds;
    let (mut sample_rng, mut noise_rng) = (crate::rng::stream(config.seed, 9), crate::rng::stream(config.seed, 10));
    let start = Instant::now();
    for _ in 0..iterations {
        dsds_step(&mut scene, &draw, 1, &lab.teacher, opts, &lab.codec, &mut opt, &mut sample_rng, &mut noise_rng, Precision::F32)
            .map_err(|e| CommandError::Numeric(e.to_string()))?;
    }
    let optimize_seconds = start.elapsed().as_secs_f64();
    let z = latent(gen, 0);
    let pose = eval_views(res)[0];
    let reps = 5;
    let start = Instant::now();
    for _ in 0..reps {
        gen.generate(&z, prompt, &pose, config.render_samples)?;
    }
    let generate_seconds = start.elapsed().as_secs_f64() / reps as f64;
    Ok(SpeedContrast {
        prompt: prompt.to_string(),
        iterations,
        optimize_seconds,
        generate_seconds,
        ratio: generate_seconds / optimize_seconds,
    })
}
