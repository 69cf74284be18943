//! Versioned checkpoint directory: `manifest.json` plus a blob of
//! little-endian f32 arrays, each with its own CRC-32.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::TypicalityStats;
use crate::codec::{decode, ImagePatch, LATENT_RANGE};
use crate::conditioning::{TokenBatch, Vocabulary};
use crate::denoiser::{init_params, Model, ModelConfig};
use crate::diffusion::{build_schedule, sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};
use crate::trainer::{Stage, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "arrays.bin";
pub const GENERATE_CHUNK: usize = 64;

const PARAM_PREFIX: &str = "param/";
const ADAM_M_PREFIX: &str = "adam.m/";
const ADAM_V_PREFIX: &str = "adam.v/";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

/// First and second moment estimates, laid out like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        Self { t: 0, m: params.zeros_like(), v: params.zeros_like() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab: Vocabulary,
    pub categories: Vec<String>,
    pub schedule: ScheduleParams,
    pub step: u64,
    pub stage: Option<Stage>,
    pub typicality: Option<TypicalityStats>,
    pub optimizer: Option<AdamState>,
    pub config: Option<TrainConfig>,
}

impl Checkpoint {
    /// Untrained parameters initialized from `cfg.seed`.
    pub fn initial(cfg: &TrainConfig, categories: &[String]) -> Result<Self> {
        let vocab = Vocabulary::for_categories(categories)?;
        let config = cfg.model_config(vocab.len());
        Ok(Self {
            model: Model::new(config, cfg.seed)?,
            vocab,
            categories: categories.to_vec(),
            schedule: cfg.schedule,
            step: 0,
            stage: None,
            typicality: None,
            optimizer: None,
            config: None,
        })
    }

    /// Decoded samples for `prompts` with classifier-free guidance, in
    /// batches of [`GENERATE_CHUNK`]; batch `c` samples with the `c`-th word
    /// of a ChaCha8 stream seeded by `seed`. Clean-latent estimates are
    /// clipped to the codec's range.
    pub fn generate(&self, prompts: &[String], steps: usize, guidance: f64, seed: u64) -> Result<Vec<ImagePatch>> {
        let schedule = self.schedule.build()?;
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(GENERATE_CHUNK) {
            let tokens = TokenBatch::from_captions(chunk, &self.vocab, self.model.config.text.max_tokens)?;
            let cond = self.model.encode(&tokens)?;
            let z = sample(&self.model, &schedule, &cond, steps, guidance, Some(LATENT_RANGE), seeds.next_u64())?;
            for item in z.items() {
                out.push(decode(item)?);
            }
        }
        Ok(out)
    }
}

impl PartialEq for Model<f32> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    /// Byte offset into the blob.
    pub offset: u64,
    pub shape: Vec<usize>,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    step: u64,
    stage: Option<Stage>,
    model: ModelConfig,
    schedule: ScheduleParams,
    vocab: Vec<String>,
    categories: Vec<String>,
    typicality: Option<TypicalityStats>,
    adam_t: Option<u64>,
    config: Option<TrainConfig>,
    blob_bytes: u64,
    arrays: Vec<ArrayEntry>,
}

fn push_array(blob: &mut Vec<u8>, arrays: &mut Vec<ArrayEntry>, name: String, t: &Tensor<f32>) {
    let offset = blob.len() as u64;
    let start = blob.len();
    for v in t.data() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    arrays.push(ArrayEntry { name, offset, shape: t.shape().to_vec(), crc32: crc32fast::hash(&blob[start..]) });
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes `dir/manifest.json` and `dir/arrays.bin`; the manifest is written
/// last so a partially written checkpoint has none.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut arrays = Vec::new();
    for (name, t) in ckpt.model.params.iter() {
        push_array(&mut blob, &mut arrays, format!("{PARAM_PREFIX}{name}"), t);
    }
    if let Some(adam) = &ckpt.optimizer {
        for (name, t) in adam.m.iter() {
            push_array(&mut blob, &mut arrays, format!("{ADAM_M_PREFIX}{name}"), t);
        }
        for (name, t) in adam.v.iter() {
            push_array(&mut blob, &mut arrays, format!("{ADAM_V_PREFIX}{name}"), t);
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        step: ckpt.step,
        stage: ckpt.stage,
        model: ckpt.model.config,
        schedule: ckpt.schedule,
        vocab: ckpt.vocab.tokens().to_vec(),
        categories: ckpt.categories.clone(),
        typicality: ckpt.typicality,
        adam_t: ckpt.optimizer.as_ref().map(|a| a.t),
        config: ckpt.config.clone(),
        blob_bytes: blob.len() as u64,
        arrays,
    };
    write_atomic(&dir.join(BLOB_FILE), &blob)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
}

/// Fills a store with the same names and shapes as `layout` from the blob.
fn read_store(
    layout: &ParamStore<f32>,
    prefix: &str,
    entries: &std::collections::BTreeMap<&str, &ArrayEntry>,
    blob: &[u8],
    used: &mut BTreeSet<String>,
) -> Result<ParamStore<f32>> {
    let mut out = ParamStore::new();
    for (name, t) in layout.iter() {
        let key = format!("{prefix}{name}");
        let e = entries.get(key.as_str()).ok_or_else(|| Error::Format(format!("checkpoint lacks array {key}")))?;
        if e.shape != t.shape() {
            return Err(Error::Format(format!("array {key} has shape {:?}, model expects {:?}", e.shape, t.shape())));
        }
        let len = t.len() * 4;
        let start = usize::try_from(e.offset).map_err(|_| Error::Format(format!("offset of {key} overflows")))?;
        let bytes = start
            .checked_add(len)
            .and_then(|end| blob.get(start..end))
            .ok_or_else(|| Error::Format(format!("array {key} extends past the blob")))?;
        if crc32fast::hash(bytes) != e.crc32 {
            return Err(Error::Checksum(key));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.insert(name, Tensor::new(t.shape().to_vec(), data)?)?;
        used.insert(key);
    }
    Ok(out)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("manifest has no version".into()))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(Error::Version { found: version as u32, expected: CHECKPOINT_VERSION });
    }
    let m: Manifest = serde_json::from_value(raw)?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    if blob.len() as u64 != m.blob_bytes {
        return Err(Error::Checksum(format!("{BLOB_FILE} is {} bytes, manifest says {}", blob.len(), m.blob_bytes)));
    }
    let mut entries = std::collections::BTreeMap::new();
    for e in &m.arrays {
        if entries.insert(e.name.as_str(), e).is_some() {
            return Err(Error::Format(format!("array {} listed twice", e.name)));
        }
    }
    let vocab = Vocabulary::from_tokens(m.vocab)?;
    if vocab.len() != m.model.text.vocab_size {
        return Err(Error::Format("vocabulary size disagrees with the model".into()));
    }
    let layout = init_params::<f32>(&m.model, 0)?;
    let mut used = BTreeSet::new();
    let params = read_store(&layout, PARAM_PREFIX, &entries, &blob, &mut used)?;
    let optimizer = match m.adam_t {
        None => None,
        Some(t) => Some(AdamState {
            t,
            m: read_store(&layout, ADAM_M_PREFIX, &entries, &blob, &mut used)?,
            v: read_store(&layout, ADAM_V_PREFIX, &entries, &blob, &mut used)?,
        }),
    };
    if let Some(extra) = entries.keys().find(|k| !used.contains(**k)) {
        return Err(Error::Format(format!("checkpoint holds unknown array {extra}")));
    }
    Ok(Checkpoint {
        model: Model { config: m.model, params },
        vocab,
        categories: m.categories,
        schedule: m.schedule,
        step: m.step,
        stage: m.stage,
        typicality: m.typicality,
        optimizer,
        config: m.config,
    })
}
