//! Commands behind the `histodiff` binary: corpus generation, training,
//! sampling and evaluation, each leaving a run manifest next to its outputs.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 numerical abort, 4 I/O
//! or format error.

pub mod manifest;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use histodiff_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use histodiff_core::codec::ImagePatch;
use histodiff_core::corpus::{parse_caption, read_dataset, write_dataset, CaptionBuckets, Corpus};
use histodiff_core::diffusion::{DEFAULT_GUIDANCE, DEFAULT_SAMPLE_STEPS};
use histodiff_core::metrics::{
    embed_all, fid, matched_pairs, mean, mse, ncc, plip_i, plip_t_mean, psnr_from_mse, silhouette, ssim,
    EmbeddingProvider, MetricReport, ParamSpace, PixelStat,
};
use histodiff_core::trainer::{parse_config, run_two_stage, train_stage, TrainData, TrainPlan};
use histodiff_core::Error;

use manifest::{dir_digests, file_sha256, path_sha256, RunManifest, RUN_MANIFEST_FILE};

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const PROMPTS_FILE: &str = "prompts.tsv";
pub const SYNTH_DATASET: &str = "synth";

#[derive(Debug, Parser)]
#[command(name = "histodiff", version, about = "Text-conditioned latent diffusion on synthetic tissue patches")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic captioned corpus.
    GenCorpus(GenCorpusArgs),
    /// Train from a key=value config.
    Train(TrainArgs),
    /// Sample images from a checkpoint.
    Sample(SampleArgs),
    /// Compare a synthetic image set against a real corpus.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub categories: usize,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize)]
#[command(group(clap::ArgGroup::new("prompt_source").required(true).args(["prompt", "prompts"])))]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A single prompt.
    #[arg(long)]
    pub prompt: Option<String>,
    /// File with one prompt per line.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Images per prompt.
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long, default_value_t = DEFAULT_SAMPLE_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = DEFAULT_GUIDANCE)]
    pub guidance: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    Pixelstat,
    Paramspace,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub real: PathBuf,
    /// A sample directory (PNGs plus prompts.tsv) or a corpus directory.
    #[arg(long)]
    pub synth: PathBuf,
    #[arg(long, value_enum)]
    pub provider: Provider,
    /// Report path; the CSV and JSON reports share its stem.
    #[arg(long)]
    pub out: PathBuf,
    /// Fail unless text-image agreement can be computed.
    #[arg(long)]
    pub plip_t: bool,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Shape(_) | Error::Range(_) | Error::InvalidArgument(_) | Error::Config(_) => CliError::Usage(msg),
            Error::Degenerate(_) | Error::NonFinite { .. } => CliError::Numerical(msg),
            Error::Checksum(_)
            | Error::Version { .. }
            | Error::Format(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::PngDecode(_)
            | Error::PngEncode(_) => CliError::Io(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> CliResult<RunManifest> {
    match command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Evaluate(a) => evaluate(a),
    }
}

fn config_json<T: Serialize>(args: &T) -> serde_json::Value {
    serde_json::to_value(args).expect("arguments serialize")
}

fn inputs_of(paths: &[&Path]) -> CliResult<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), path_sha256(p).map_err(io_at(p))?)))
        .collect()
}

fn finish(
    manifest_path: &Path,
    command: &str,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    outputs: &[&Path],
    started: Instant,
) -> CliResult<RunManifest> {
    let mut artifacts = BTreeMap::new();
    for out in outputs {
        if out.is_dir() {
            for (rel, digest) in dir_digests(out).map_err(io_at(out))? {
                artifacts.insert(format!("{}/{rel}", out.display()), digest);
            }
        } else {
            artifacts.insert(out.display().to_string(), file_sha256(out).map_err(io_at(out))?);
        }
    }
    let m = RunManifest {
        command: command.into(),
        config,
        seed,
        inputs,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        artifacts,
    };
    m.write(manifest_path).map_err(io_at(manifest_path))?;
    Ok(m)
}

pub fn gen_corpus(a: &GenCorpusArgs) -> CliResult<RunManifest> {
    let started = Instant::now();
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let corpus = Corpus::generate(a.n, a.categories, a.seed)?;
    write_dataset(&corpus, &a.out)?;
    finish(
        &a.out.join(RUN_MANIFEST_FILE),
        "gen-corpus",
        config_json(a),
        Some(a.seed),
        BTreeMap::new(),
        &[&a.out],
        started,
    )
}

pub fn train(a: &TrainArgs) -> CliResult<RunManifest> {
    let started = Instant::now();
    let text = fs::read_to_string(&a.config).map_err(io_at(&a.config))?;
    let plan = parse_config(&text)?;
    let corpus = read_dataset(&a.data)?;
    let data = TrainData::from_corpus(&corpus)?;
    let init = a.resume.as_deref().map(load_checkpoint).transpose()?;
    fs::create_dir_all(&a.out).map_err(io_at(&a.out))?;
    let log_path = a.out.join(TRAIN_LOG_FILE);
    let mut log_file = std::io::BufWriter::new(fs::File::create(&log_path).map_err(io_at(&log_path))?);
    let mut log = |r: &histodiff_core::trainer::LogRecord| -> histodiff_core::Result<()> {
        log_file.write_all(r.to_json_line().as_bytes())?;
        Ok(())
    };
    let (result, seed, echo) = match &plan {
        TrainPlan::Single(cfg) => {
            let init = match init {
                Some(c) => c,
                None => Checkpoint::initial(cfg, &data.categories)?,
            };
            (train_stage(cfg, &data, init, &mut log), cfg.seed, serde_json::json!({ "stage": cfg }))
        }
        TrainPlan::TwoStage { pretrain, finetune } => (
            run_two_stage(pretrain, finetune, &data, init, &mut log),
            pretrain.seed,
            serde_json::json!({ "pretrain": pretrain, "finetune": finetune }),
        ),
    };
    log_file.flush().map_err(io_at(&log_path))?;
    drop(log_file);
    let ckpt = result?;
    save_checkpoint(&ckpt, &a.out)?;
    let mut inputs = vec![a.config.as_path(), a.data.as_path()];
    if let Some(r) = &a.resume {
        inputs.push(r);
    }
    let config = serde_json::json!({ "args": config_json(a), "train": echo });
    finish(&a.out.join(RUN_MANIFEST_FILE), "train", config, Some(seed), inputs_of(&inputs)?, &[&a.out], started)
}

/// Prompt list for a sample run: each source prompt repeated `n` times.
pub fn expand_prompts(a: &SampleArgs) -> CliResult<Vec<String>> {
    let base: Vec<String> = match (&a.prompt, &a.prompts) {
        (Some(p), None) => vec![p.clone()],
        (None, Some(f)) => fs::read_to_string(f)
            .map_err(io_at(f))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        _ => return Err(CliError::Usage("give exactly one of --prompt or --prompts".into())),
    };
    if base.is_empty() || a.n == 0 {
        return Err(CliError::Usage("nothing to sample: need at least one prompt and --n >= 1".into()));
    }
    if base.iter().any(|p| p.contains(['\t', '\n'])) {
        return Err(CliError::Usage("prompts may not contain tabs or newlines".into()));
    }
    Ok(base.iter().flat_map(|p| std::iter::repeat(p.clone()).take(a.n)).collect())
}

pub fn image_file_name(i: usize) -> String {
    format!("{i:06}.png")
}

pub fn sample(a: &SampleArgs) -> CliResult<RunManifest> {
    let started = Instant::now();
    let prompts = expand_prompts(a)?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let mut warned = std::collections::BTreeSet::new();
    for p in &prompts {
        if parse_caption(p, &ckpt.categories).is_err() && warned.insert(p.clone()) {
            eprintln!("warning: prompt {p:?} is outside the caption grammar");
        }
    }
    let images = ckpt.generate(&prompts, a.steps, a.guidance, a.seed)?;
    fs::create_dir_all(&a.out).map_err(io_at(&a.out))?;
    let mut tsv = String::from("file\tprompt\n");
    for (i, (img, p)) in images.iter().zip(&prompts).enumerate() {
        let name = image_file_name(i);
        img.save_png(&a.out.join(&name))?;
        tsv.push_str(&format!("{name}\t{p}\n"));
    }
    let tsv_path = a.out.join(PROMPTS_FILE);
    manifest::write_atomic(&tsv_path, tsv.as_bytes()).map_err(io_at(&tsv_path))?;
    finish(
        &a.out.join(RUN_MANIFEST_FILE),
        "sample",
        config_json(a),
        Some(a.seed),
        inputs_of(&[&a.ckpt])?,
        &[&a.out],
        started,
    )
}

/// Images with their prompts, read from a sample directory or a corpus.
pub fn read_image_set(dir: &Path) -> CliResult<(Vec<ImagePatch>, Vec<String>)> {
    if dir.join(histodiff_core::corpus::META_FILE).exists() {
        let c = read_dataset(dir)?;
        return Ok(c.samples.into_iter().map(|s| (s.image, s.caption)).unzip());
    }
    let tsv_path = dir.join(PROMPTS_FILE);
    let tsv = fs::read_to_string(&tsv_path).map_err(io_at(&tsv_path))?;
    let mut lines = tsv.lines();
    if lines.next() != Some("file\tprompt") {
        return Err(CliError::Io(format!("{}: missing header", tsv_path.display())));
    }
    let mut images = Vec::new();
    let mut prompts = Vec::new();
    for (n, line) in lines.enumerate() {
        let (file, prompt) = line
            .split_once('\t')
            .ok_or_else(|| CliError::Io(format!("{}: line {} is malformed", tsv_path.display(), n + 2)))?;
        images.push(ImagePatch::load_png(&dir.join(file))?);
        prompts.push(prompt.to_string());
    }
    Ok((images, prompts))
}

fn provider_for(p: Provider, categories: &[String]) -> CliResult<Box<dyn EmbeddingProvider>> {
    Ok(match p {
        Provider::Pixelstat => Box::new(PixelStat),
        Provider::Paramspace => Box::new(ParamSpace::new(categories.to_vec())?),
    })
}

/// Cosine agreement; a zero embedding agrees with nothing.
fn agreement(a: &[f64], b: &[f64]) -> CliResult<f64> {
    match plip_i(a, b) {
        Err(Error::Degenerate(_)) => Ok(0.0),
        other => Ok(other?),
    }
}

/// Metrics of a synthetic set against a real corpus under one provider.
/// Paired metrics use matched-prompt pairs.
pub fn evaluate_sets(
    provider: &dyn EmbeddingProvider,
    categories: &[String],
    real: &[ImagePatch],
    real_captions: &[String],
    synth: &[ImagePatch],
    synth_prompts: &[String],
    require_text: bool,
) -> CliResult<MetricReport> {
    let d = SYNTH_DATASET;
    let mut report = MetricReport::new(provider.name());
    let real_emb = embed_all(provider, real)?;
    let synth_emb = embed_all(provider, synth)?;
    report.push("count", d, synth.len() as f64);
    report.push("fid", d, fid(provider, real, synth)?);

    let parse = |caps: &[String]| -> Vec<Option<CaptionBuckets>> {
        caps.iter().map(|c| parse_caption(c, categories).ok()).collect()
    };
    let real_b = parse(real_captions);
    let synth_b = parse(synth_prompts);
    let real_idx: Vec<usize> = (0..real.len()).filter(|&i| real_b[i].is_some()).collect();
    let synth_idx: Vec<usize> = (0..synth.len()).filter(|&i| synth_b[i].is_some()).collect();
    let pairs: Vec<(usize, usize)> = matched_pairs(
        &real_idx.iter().map(|&i| real_b[i].unwrap()).collect::<Vec<_>>(),
        &synth_idx.iter().map(|&i| synth_b[i].unwrap()).collect::<Vec<_>>(),
    )
    .into_iter()
    .map(|(r, s)| (real_idx[r], synth_idx[s]))
    .collect();
    report.push("pairs", d, pairs.len() as f64);
    if !pairs.is_empty() {
        let agree = pairs
            .iter()
            .map(|&(r, s)| agreement(&real_emb[r], &synth_emb[s]))
            .collect::<CliResult<Vec<_>>>()?;
        report.push("plip_i", d, mean(&agree)?);
        let mut q: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for &(r, s) in &pairs {
            q.entry("ssim").or_default().push(ssim(&real[r], &synth[s])?);
            q.entry("mse").or_default().push(mse(&real[r], &synth[s])?);
            match ncc(&real[r], &synth[s]) {
                Ok(v) => q.entry("ncc").or_default().push(v),
                Err(Error::Degenerate(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        for name in ["ssim", "mse", "ncc"] {
            if let Some(v) = q.get(name) {
                report.push(name, d, mean(v)?);
            }
        }
        // PSNR of the mean squared error, so one identical pair does not
        // make the whole set infinite
        report.push("psnr", d, psnr_from_mse(mean(&q["mse"])?));
    }
    if provider.supports_text() {
        report.push("plip_t", d, plip_t_mean(provider, synth_prompts, synth)?);
    } else if require_text {
        return Err(CliError::Usage(format!(
            "provider {} has no text embedding; text-image agreement needs paramspace",
            provider.name()
        )));
    }
    let labelled: Vec<usize> = (0..synth.len()).filter(|&i| synth_b[i].is_some()).collect();
    let labels: Vec<usize> = labelled.iter().map(|&i| synth_b[i].unwrap().category).collect();
    let distinct: std::collections::BTreeSet<_> = labels.iter().collect();
    if distinct.len() >= 2 {
        let pts: Vec<Vec<f64>> = labelled.iter().map(|&i| synth_emb[i].clone()).collect();
        report.push("silhouette", d, silhouette(&pts, &labels)?);
    }
    Ok(report)
}

/// CSV and JSON report paths sharing the stem of `out`.
pub fn report_paths(out: &Path) -> (PathBuf, PathBuf) {
    let stem = match out.extension().and_then(|e| e.to_str()) {
        Some("csv") | Some("json") => out.with_extension(""),
        _ => out.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".csv"), with(".json"))
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<RunManifest> {
    let started = Instant::now();
    let real = read_dataset(&a.real)?;
    let (synth, prompts) = read_image_set(&a.synth)?;
    if synth.len() < 2 {
        return Err(CliError::Usage("synthetic set needs at least 2 images".into()));
    }
    let provider = provider_for(a.provider, &real.categories)?;
    let real_images: Vec<ImagePatch> = real.samples.iter().map(|s| s.image.clone()).collect();
    let real_captions: Vec<String> = real.samples.iter().map(|s| s.caption.clone()).collect();
    let report = evaluate_sets(
        provider.as_ref(),
        &real.categories,
        &real_images,
        &real_captions,
        &synth,
        &prompts,
        a.plip_t,
    )?;
    let (csv, json) = report_paths(&a.out);
    if let Some(parent) = csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_at(parent))?;
    }
    manifest::write_atomic(&csv, report.to_csv().as_bytes()).map_err(io_at(&csv))?;
    manifest::write_atomic(&json, report.to_json()?.as_bytes()).map_err(io_at(&json))?;
    let mut mpath = csv.with_extension("").into_os_string();
    mpath.push(".manifest.json");
    finish(
        Path::new(&mpath),
        "evaluate",
        config_json(a),
        None,
        inputs_of(&[&a.real, &a.synth])?,
        &[&csv, &json],
        started,
    )
}
