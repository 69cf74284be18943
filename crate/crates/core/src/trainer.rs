//! Two-stage training: denoising loss plus relational alignment terms,
//! optimizer updates, flat key=value configs and JSON-lines loss logs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{estimate_typicality_stats, support_score, typicality_weights, TypicalityStats};
use crate::checkpoint::{AdamState, Checkpoint, ScheduleParams};
use crate::codec::encode;
use crate::conditioning::{
    apply_caption_dropout, category_tokens, encode_text, text_forward, tokenize, CategoryFeatures, TextConfig,
    TokenBatch, Vocabulary, DEFAULT_CAPTION_DROPOUT, DEFAULT_MAX_TOKENS, DEFAULT_TEXT_WIDTH,
};
use crate::corpus::Corpus;
use crate::denoiser::{unet_forward, ModelConfig, UNetConfig};
use crate::diffusion::{
    forward_sample, LatentBatch, LatentGrid, NoiseSchedule, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_STEPS,
};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::{ParamStore, Tensor};

pub const DEFAULT_BATCH: usize = 32;
pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_LAMBDA: f64 = 0.1;
const TYPICALITY_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

macro_rules! word_enum {
    ($t:ty, $($v:ident => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok(Self::$v),)+
                    _ => Err(format!("expected one of: {}", [$($s),+].join(", "))),
                }
            }
        }
    };
}
word_enum!(Stage, Pretrain => "pretrain", Finetune => "finetune");
word_enum!(OptimizerKind, Sgd => "sgd", Adam => "adam");

/// Architecture widths that are not fixed by the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub width: usize,
    pub mid_width: usize,
    pub groups: usize,
    pub time_dim: usize,
    pub time_hidden: usize,
    pub key_dim: usize,
    pub text_width: usize,
    pub max_tokens: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        let u = UNetConfig::default();
        Self {
            width: u.width,
            mid_width: u.mid_width,
            groups: u.groups,
            time_dim: u.time_dim,
            time_hidden: u.time_hidden,
            key_dim: u.key_dim,
            text_width: DEFAULT_TEXT_WIDTH,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch: usize,
    pub steps: u64,
    pub lr: f64,
    pub lambda_corr: f64,
    pub lambda_cate: f64,
    pub caption_dropout: f64,
    pub seed: u64,
    pub schedule: ScheduleParams,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub log_every: u64,
    pub dataset: Option<String>,
    pub model: ModelDims,
}

pub const REQUIRED_KEYS: [&str; 5] = ["stage", "batch", "steps", "lr", "seed"];

pub const CONFIG_KEYS: [&str; 26] = [
    "stage",
    "batch",
    "steps",
    "lr",
    "lambda_corr",
    "lambda_cate",
    "caption_dropout",
    "seed",
    "schedule_steps",
    "beta_min",
    "beta_max",
    "optimizer",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "grad_clip",
    "log_every",
    "dataset",
    "width",
    "mid_width",
    "groups",
    "time_dim",
    "time_hidden",
    "key_dim",
    "text_width",
    "max_tokens",
];

fn parse_value<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|e| Error::Config(format!("invalid value `{v}` for key `{key}`: {e}"))),
    }
}

impl TrainConfig {
    pub fn new(stage: Stage, batch: usize, steps: u64, lr: f64, seed: u64) -> Self {
        Self {
            stage,
            batch,
            steps,
            lr,
            lambda_corr: DEFAULT_LAMBDA,
            lambda_cate: DEFAULT_LAMBDA,
            caption_dropout: DEFAULT_CAPTION_DROPOUT,
            seed,
            schedule: ScheduleParams::default(),
            optimizer: OptimizerKind::Sgd,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 0.0,
            log_every: 1,
            dataset: None,
            model: ModelDims::default(),
        }
    }

    /// Builds a config from parsed key=value pairs, rejecting unknown keys
    /// and naming the first missing required key.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(k) = map.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        if let Some(k) = REQUIRED_KEYS.iter().find(|k| !map.contains_key(**k)) {
            return Err(Error::Config(format!("missing required key `{k}`")));
        }
        let mut c = Self::new(
            parse_value(map, "stage")?.unwrap(),
            parse_value(map, "batch")?.unwrap(),
            parse_value(map, "steps")?.unwrap(),
            parse_value(map, "lr")?.unwrap(),
            parse_value(map, "seed")?.unwrap(),
        );
        macro_rules! set {
            ($field:expr, $key:literal) => {
                if let Some(v) = parse_value(map, $key)? {
                    $field = v;
                }
            };
        }
        set!(c.lambda_corr, "lambda_corr");
        set!(c.lambda_cate, "lambda_cate");
        set!(c.caption_dropout, "caption_dropout");
        set!(c.schedule.steps, "schedule_steps");
        set!(c.schedule.beta_min, "beta_min");
        set!(c.schedule.beta_max, "beta_max");
        set!(c.optimizer, "optimizer");
        set!(c.adam_beta1, "adam_beta1");
        set!(c.adam_beta2, "adam_beta2");
        set!(c.adam_eps, "adam_eps");
        set!(c.grad_clip, "grad_clip");
        set!(c.log_every, "log_every");
        set!(c.model.width, "width");
        set!(c.model.mid_width, "mid_width");
        set!(c.model.groups, "groups");
        set!(c.model.time_dim, "time_dim");
        set!(c.model.time_hidden, "time_hidden");
        set!(c.model.key_dim, "key_dim");
        set!(c.model.text_width, "text_width");
        set!(c.model.max_tokens, "max_tokens");
        c.dataset = map.get("dataset").cloned();
        c.validate()?;
        Ok(c)
    }

    /// Flat key=value rendering; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut lines = vec![
            format!("stage={}", self.stage),
            format!("batch={}", self.batch),
            format!("steps={}", self.steps),
            format!("lr={}", self.lr),
            format!("lambda_corr={}", self.lambda_corr),
            format!("lambda_cate={}", self.lambda_cate),
            format!("caption_dropout={}", self.caption_dropout),
            format!("seed={}", self.seed),
            format!("schedule_steps={}", self.schedule.steps),
            format!("beta_min={}", self.schedule.beta_min),
            format!("beta_max={}", self.schedule.beta_max),
            format!("optimizer={}", self.optimizer),
            format!("adam_beta1={}", self.adam_beta1),
            format!("adam_beta2={}", self.adam_beta2),
            format!("adam_eps={}", self.adam_eps),
            format!("grad_clip={}", self.grad_clip),
            format!("log_every={}", self.log_every),
        ];
        if let Some(d) = &self.dataset {
            lines.push(format!("dataset={d}"));
        }
        lines.extend([
            format!("width={}", m.width),
            format!("mid_width={}", m.mid_width),
            format!("groups={}", m.groups),
            format!("time_dim={}", m.time_dim),
            format!("time_hidden={}", m.time_hidden),
            format!("key_dim={}", m.key_dim),
            format!("text_width={}", m.text_width),
            format!("max_tokens={}", m.max_tokens),
        ]);
        lines.join("\n") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch < 2 {
            return bad(format!("batch must be at least 2, got {}", self.batch));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (k, v) in [("lambda_corr", self.lambda_corr), ("lambda_cate", self.lambda_cate)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.caption_dropout) {
            return bad(format!("caption_dropout must lie in [0, 1], got {}", self.caption_dropout));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam parameters out of range".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad(format!("grad_clip must be non-negative, got {}", self.grad_clip));
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1".into());
        }
        self.schedule.build().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            text: TextConfig { vocab_size, width: m.text_width, max_tokens: m.max_tokens },
            unet: UNetConfig {
                width: m.width,
                mid_width: m.mid_width,
                groups: m.groups,
                time_dim: m.time_dim,
                time_hidden: m.time_hidden,
                key_dim: m.key_dim,
                ..UNetConfig::default()
            },
        }
    }
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, beta_min: DEFAULT_BETA_MIN, beta_max: DEFAULT_BETA_MAX }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainPlan {
    Single(TrainConfig),
    TwoStage { pretrain: TrainConfig, finetune: TrainConfig },
}

/// Parses `key=value` lines (`#` starts a comment). Keys prefixed with
/// `pretrain.` or `finetune.` select a two-stage plan; unprefixed keys are
/// shared by both stages and the stage is implied by the prefix.
pub fn parse_config(text: &str) -> Result<TrainPlan> {
    let mut shared = BTreeMap::new();
    let mut staged: [BTreeMap<String, String>; 2] = Default::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key=value", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim().to_string());
        let (map, key) = if let Some(k) = k.strip_prefix("pretrain.") {
            (&mut staged[0], k)
        } else if let Some(k) = k.strip_prefix("finetune.") {
            (&mut staged[1], k)
        } else {
            (&mut shared, k)
        };
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if map.insert(key.to_string(), v).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    if staged.iter().all(BTreeMap::is_empty) {
        return Ok(TrainPlan::Single(TrainConfig::from_map(&shared)?));
    }
    if shared.contains_key("stage") || staged.iter().any(|m| m.contains_key("stage")) {
        return Err(Error::Config("`stage` is implied by the stage prefixes of a two-stage config".into()));
    }
    let mut configs = Vec::new();
    for (stage, specific) in [Stage::Pretrain, Stage::Finetune].into_iter().zip(staged) {
        let mut map = shared.clone();
        map.extend(specific);
        map.insert("stage".into(), stage.to_string());
        configs.push(TrainConfig::from_map(&map)?);
    }
    let finetune = configs.pop().unwrap();
    let pretrain = configs.pop().unwrap();
    if pretrain.model != finetune.model {
        return Err(Error::Config("pretrain and finetune stages disagree on model dimensions".into()));
    }
    Ok(TrainPlan::TwoStage { pretrain, finetune })
}

/// Encoded training corpus.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub categories: Vec<String>,
    pub latents: Vec<LatentGrid<f32>>,
    pub captions: Vec<String>,
    pub labels: Vec<usize>,
}

impl TrainData {
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        Ok(Self {
            categories: corpus.categories.clone(),
            latents: corpus.samples.iter().map(|s| encode(&s.image)).collect::<Result<_>>()?,
            captions: corpus.samples.iter().map(|s| s.caption.clone()).collect(),
            labels: corpus.samples.iter().map(|s| s.category_id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

/// Everything one optimization step consumes.
#[derive(Clone, Debug)]
pub struct StepInputs<T> {
    pub z0: LatentBatch<T>,
    pub t: Vec<usize>,
    pub noise: LatentBatch<T>,
    /// Captions as written; the alignment terms read these.
    pub tokens: TokenBatch,
    /// Captions after dropout; cross-attention reads these.
    pub cross_tokens: TokenBatch,
    pub labels: Option<Vec<usize>>,
}

/// Vocabulary, category names and corpus typicality statistics.
#[derive(Clone, Copy, Debug)]
pub struct AlignmentContext<'a> {
    pub vocab: &'a Vocabulary,
    pub categories: &'a [String],
    pub typicality: Option<&'a TypicalityStats>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_diff: f64,
    pub l_corr: f64,
    pub l_cate: f64,
}

/// Coefficients of the three terms in the optimized objective. `cate` is
/// `None` when the category term is not evaluated at all.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub diff: f64,
    pub corr: f64,
    pub cate: Option<f64>,
}

impl LossWeights {
    /// Pretrain never evaluates the category term.
    pub fn for_stage(cfg: &TrainConfig) -> Self {
        let cate = match cfg.stage {
            Stage::Pretrain => None,
            Stage::Finetune => Some(cfg.lambda_cate),
        };
        Self { diff: 1.0, corr: cfg.lambda_corr, cate }
    }

    pub fn total(&self, terms: &LossTerms) -> f64 {
        self.diff * terms.l_diff + self.corr * terms.l_corr + self.cate.unwrap_or(0.0) * terms.l_cate
    }
}

/// Per-sample support scores `cos(category feature, caption feature)`.
pub fn support_scores<T: Real>(
    category: &[T],
    text: &[T],
    batch: usize,
    width: usize,
) -> Result<Vec<f64>> {
    (0..batch)
        .map(|i| Ok(support_score(&category[i * width..(i + 1) * width], &text[i * width..(i + 1) * width])?.as_f64()))
        .collect()
}

/// Loss terms and parameter gradients of `w.diff L_diff + w.corr L_corr
/// (+ w.cate L_cate)`. Terms with a zero coefficient are reported but
/// contribute no gradient.
pub fn step_loss<T: Real>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    s: &NoiseSchedule,
    w: &LossWeights,
    ctx: &AlignmentContext<'_>,
    inp: &StepInputs<T>,
) -> Result<(LossTerms, ParamStore<T>)> {
    let b = inp.z0.len();
    if b < 2 || inp.t.len() != b || inp.noise.len() != b || inp.tokens.batch() != b || inp.cross_tokens.batch() != b {
        return Err(shape_err("step inputs disagree in batch size or batch is below 2"));
    }
    let z_t = inp
        .z0
        .items()
        .iter()
        .zip(inp.noise.items())
        .zip(&inp.t)
        .map(|((z, e), &t)| forward_sample(s, z, t, e))
        .collect::<Result<Vec<_>>>()?;
    let z_t = LatentBatch::new(z_t)?.to_tensor();

    let mut g = Graph::new(params);
    let z = g.input(z_t.clone());
    let cross = text_forward(&mut g, &cfg.text, &inp.cross_tokens)?;
    let eps = unet_forward(&mut g, cfg, z, &inp.t, cross.sequence, cross.pooled)?;
    let l_diff = g.mse(eps, &inp.noise.to_tensor());

    // clean-latent estimate, spatially pooled
    let mut scale = Vec::with_capacity(b);
    let mut offset = z_t;
    let per = offset.len() / b;
    for (i, &t) in inp.t.iter().enumerate() {
        let ab = s.alpha_bar(t)?;
        scale.push(T::lit(-(1.0 - ab).sqrt() / ab.sqrt()));
        let inv = T::lit(1.0 / ab.sqrt());
        for v in &mut offset.data_mut()[i * per..(i + 1) * per] {
            *v = *v * inv;
        }
    }
    let x0 = g.affine_per_sample(eps, &scale, &offset);
    let zf = g.spatial_mean(x0);
    let mz = g.cosine_matrix(zf)?;

    let text = if inp.tokens == inp.cross_tokens { cross } else { text_forward(&mut g, &cfg.text, &inp.tokens)? };
    let mt = g.cosine_matrix(text.pooled)?;
    let l_corr = g.mat_sq_diff(mz, mt, None);

    let mut terms: Vec<(Var, T)> = Vec::new();
    for (v, c) in [(l_diff, w.diff), (l_corr, w.corr)] {
        if c != 0.0 {
            terms.push((v, T::lit(c)));
        }
    }
    let mut l_cate_value = 0.0;
    if let Some(c) = w.cate {
        let labels = inp
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("category term needs category labels".into()))?;
        if labels.len() != b {
            return Err(shape_err("one category label per sample required"));
        }
        let stats = ctx
            .typicality
            .ok_or_else(|| Error::InvalidArgument("category term needs typicality statistics".into()))?;
        let cat_tokens = category_tokens(labels, ctx.categories, ctx.vocab, cfg.text.max_tokens)?;
        let cat = text_forward(&mut g, &cfg.text, &cat_tokens)?;
        let mc = g.cosine_matrix(cat.pooled)?;
        let scores = support_scores(g.value(cat.pooled).data(), g.value(text.pooled).data(), b, cfg.text.width)?;
        let weights = typicality_weights(&scores, stats)?;
        let weights = Tensor::new(vec![b, b], weights.into_iter().map(T::lit).collect())?;
        let l_cate = g.mat_sq_diff(mz, mc, Some(&weights));
        l_cate_value = g.value(l_cate).item().as_f64();
        if c != 0.0 {
            terms.push((l_cate, T::lit(c)));
        }
    }
    let terms_out = LossTerms {
        l_diff: g.value(l_diff).item().as_f64(),
        l_corr: g.value(l_corr).item().as_f64(),
        l_cate: l_cate_value,
    };
    let grads = if terms.is_empty() {
        params.zeros_like()
    } else {
        let total = g.lin_comb(&terms);
        g.backward(total).params
    };
    Ok((terms_out, grads))
}

/// Corpus-level typicality statistics of the support scores under the given
/// parameters.
pub fn estimate_typicality(ckpt: &Checkpoint, data: &TrainData) -> Result<TypicalityStats> {
    let cfg = &ckpt.model.config.text;
    let features = CategoryFeatures::new(&ckpt.model.params, cfg, &ckpt.vocab, &ckpt.categories)?;
    let mut scores = Vec::with_capacity(data.len());
    for (caps, labels) in data.captions.chunks(TYPICALITY_CHUNK).zip(data.labels.chunks(TYPICALITY_CHUNK)) {
        let tokens = TokenBatch::from_captions(caps, &ckpt.vocab, cfg.max_tokens)?;
        let enc = encode_text(&ckpt.model.params, cfg, &tokens)?;
        for (i, &k) in labels.iter().enumerate() {
            let row = &enc.pooled().data()[i * cfg.width..(i + 1) * cfg.width];
            scores.push(support_score(features.get(k)?, row)?.as_f64());
        }
    }
    estimate_typicality_stats(scores)
}

/// One JSON-lines log record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub l_diff: f64,
    pub l_corr: f64,
    pub l_cate: f64,
    pub total: f64,
}

impl LogRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes") + "\n"
    }
}

/// Per-step random stream: ChaCha8 keyed by the seed, stream selected by the
/// global step number, so a resumed run draws what an uninterrupted run would.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Draws sample indices, timesteps, noise and caption dropout for one step.
pub fn draw_step(
    cfg: &TrainConfig,
    data: &TrainData,
    tokens: &[Vec<usize>],
    step: u64,
) -> Result<StepInputs<f32>> {
    let mut rng = step_rng(cfg.seed, step);
    let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..data.len())).collect();
    let t: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(1..=cfg.schedule.steps)).collect();
    let (c, h, w) = data.latents[0].shape();
    let noise = (0..cfg.batch).map(|_| LatentGrid::random(c, h, w, &mut rng)).collect();
    let rows = TokenBatch::new(idx.iter().map(|&i| tokens[i].clone()).collect())?;
    let (cross, _) = apply_caption_dropout(&rows, cfg.caption_dropout, &mut rng)?;
    Ok(StepInputs {
        z0: LatentBatch::new(idx.iter().map(|&i| data.latents[i].clone()).collect())?,
        t,
        noise: LatentBatch::new(noise)?,
        tokens: rows,
        cross_tokens: cross,
        labels: Some(idx.iter().map(|&i| data.labels[i]).collect()),
    })
}

fn apply_update(cfg: &TrainConfig, params: &mut ParamStore<f32>, grads: &ParamStore<f32>, adam: &mut Option<AdamState>) {
    let mut coef = 1.0;
    if cfg.grad_clip > 0.0 {
        let norm = grads.tensors().iter().flat_map(|t| t.data()).map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            coef = cfg.grad_clip / norm;
        }
    }
    match adam {
        None => {
            for id in 0..params.len() {
                let g = grads.get(id).data();
                for (p, &gi) in params.get_mut(id).data_mut().iter_mut().zip(g) {
                    *p = (*p as f64 - cfg.lr * coef * gi as f64) as f32;
                }
            }
        }
        Some(st) => {
            st.t += 1;
            let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
            let c1 = 1.0 - b1.powi(st.t as i32);
            let c2 = 1.0 - b2.powi(st.t as i32);
            for id in 0..params.len() {
                let g = grads.get(id).data();
                let m = st.m.get_mut(id).data_mut();
                let v = st.v.get_mut(id).data_mut();
                for (k, p) in params.get_mut(id).data_mut().iter_mut().enumerate() {
                    let gi = coef * g[k] as f64;
                    let mk = b1 * m[k] as f64 + (1.0 - b1) * gi;
                    let vk = b2 * v[k] as f64 + (1.0 - b2) * gi * gi;
                    m[k] = mk as f32;
                    v[k] = vk as f32;
                    *p = (*p as f64 - cfg.lr * (mk / c1) / ((vk / c2).sqrt() + cfg.adam_eps)) as f32;
                }
            }
        }
    }
}

/// Runs `cfg.steps` updates starting from `init`. The step counter continues
/// from the checkpoint; optimizer moments carry over only within a stage.
/// Finetuning estimates typicality statistics first unless the checkpoint
/// already holds them.
pub fn train_stage(
    cfg: &TrainConfig,
    data: &TrainData,
    init: Checkpoint,
    log: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    if data.categories != init.categories {
        return Err(Error::InvalidArgument("corpus categories differ from the checkpoint's".into()));
    }
    let expected = cfg.model_config(init.vocab.len());
    if expected != init.model.config {
        return Err(Error::InvalidArgument(format!(
            "architecture mismatch: config describes {expected:?}, checkpoint holds {:?}",
            init.model.config
        )));
    }
    let mut ckpt = init;
    let schedule = cfg.schedule.build()?;
    let max_tokens = ckpt.model.config.text.max_tokens;
    let tokens: Vec<Vec<usize>> = data.captions.iter().map(|c| tokenize(c, &ckpt.vocab, max_tokens)).collect();
    if cfg.stage == Stage::Finetune && ckpt.typicality.is_none() {
        ckpt.typicality = Some(estimate_typicality(&ckpt, data)?);
    }
    let same_stage = ckpt.stage == Some(cfg.stage);
    let mut adam = match cfg.optimizer {
        OptimizerKind::Sgd => None,
        OptimizerKind::Adam => match ckpt.optimizer.take() {
            Some(st) if same_stage && st.m.same_layout(&ckpt.model.params) => Some(st),
            _ => Some(AdamState::new(&ckpt.model.params)),
        },
    };
    let weights = LossWeights::for_stage(cfg);
    let model_cfg = ckpt.model.config;
    for k in 0..cfg.steps {
        let step = ckpt.step + k + 1;
        let inp = draw_step(cfg, data, &tokens, step)?;
        let ctx = AlignmentContext {
            vocab: &ckpt.vocab,
            categories: &ckpt.categories,
            typicality: ckpt.typicality.as_ref(),
        };
        let (terms, grads) = step_loss(&model_cfg, &ckpt.model.params, &schedule, &weights, &ctx, &inp)
            .map_err(|e| match e {
                Error::Degenerate(d) => Error::NonFinite { step, detail: d },
                other => other,
            })?;
        let total = weights.total(&terms);
        let breakdown = || {
            format!("l_diff={} l_corr={} l_cate={} total={total}", terms.l_diff, terms.l_corr, terms.l_cate)
        };
        if !total.is_finite() {
            return Err(Error::NonFinite { step, detail: breakdown() });
        }
        if grads.tensors().iter().any(|t| !t.all_finite()) {
            return Err(Error::NonFinite { step, detail: format!("non-finite gradient; {}", breakdown()) });
        }
        apply_update(cfg, &mut ckpt.model.params, &grads, &mut adam);
        if step % cfg.log_every == 0 || k + 1 == cfg.steps {
            log(&LogRecord { step, l_diff: terms.l_diff, l_corr: terms.l_corr, l_cate: terms.l_cate, total })?;
        }
    }
    ckpt.step += cfg.steps;
    ckpt.stage = Some(cfg.stage);
    ckpt.optimizer = adam;
    ckpt.schedule = cfg.schedule;
    ckpt.config = Some(cfg.clone());
    Ok(ckpt)
}

/// Pretrain from `init` (fresh parameters when `None`), re-estimate the
/// typicality statistics under the pretrained parameters, then finetune.
pub fn run_two_stage(
    pretrain: &TrainConfig,
    finetune: &TrainConfig,
    data: &TrainData,
    init: Option<Checkpoint>,
    log: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<Checkpoint> {
    if pretrain.stage != Stage::Pretrain || finetune.stage != Stage::Finetune {
        return Err(Error::Config("two-stage run needs a pretrain then a finetune config".into()));
    }
    if pretrain.model != finetune.model {
        return Err(Error::InvalidArgument("architecture mismatch between stages".into()));
    }
    let init = match init {
        Some(c) => c,
        None => Checkpoint::initial(pretrain, &data.categories)?,
    };
    let mut stage1 = train_stage(pretrain, data, init, log)?;
    stage1.typicality = Some(estimate_typicality(&stage1, data)?);
    train_stage(finetune, data, stage1, log)
}
