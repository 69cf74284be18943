//! Procedural tissue-like patches with templated, invertible captions.
//!
//! Each sample is drawn from a [`TissueSpec`]: a category (encoded visually by
//! nucleus hue), a count bucket, a radius bucket and a background texture
//! seed. Sample `i` of a corpus uses a ChaCha8 generator seeded with the
//! master seed on stream `i`, so samples can be generated in any order.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{ImagePatch, IMAGE_SIZE};
use crate::conditioning::words;
use crate::error::{Error, Result};

pub const CATEGORY_NAMES: [&str; 8] =
    ["carcinoma", "sarcoma", "lymphoma", "melanoma", "glioma", "myeloma", "blastoma", "adenoma"];
pub const DEFAULT_CATEGORIES: usize = 4;

/// Nucleus stain colour per category.
pub const PALETTE: [[f32; 3]; 8] = [
    [0.32, 0.18, 0.58],
    [0.62, 0.10, 0.38],
    [0.12, 0.36, 0.52],
    [0.50, 0.30, 0.08],
    [0.16, 0.46, 0.22],
    [0.20, 0.20, 0.20],
    [0.58, 0.46, 0.10],
    [0.10, 0.10, 0.70],
];
pub const BACKGROUND: [f32; 3] = [0.92, 0.82, 0.88];
pub const TEXTURE_AMPLITUDE: f32 = 0.04;
const TEXTURE_GRID: usize = 6;
const COLOR_JITTER: f32 = 0.03;

pub const FEW_RANGE: (usize, usize) = (3, 6);
pub const MANY_RANGE: (usize, usize) = (12, 20);
pub const SMALL_RADIUS: f32 = 1.2;
pub const LARGE_RADIUS: f32 = 1.8;
/// Minimum gap between nucleus rims, in pixels.
pub const RIM_GAP: f32 = 1.0;

/// Detector settings.
pub const MIN_COMPONENT_AREA: usize = 2;
pub const LARGE_AREA_THRESHOLD: f64 = 7.0;
const MIN_COVERAGE: f32 = 0.5;
const MAX_RESIDUAL: f32 = 0.25;

pub const DATASET_VERSION: u32 = 1;
pub const SHARD_SIZE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CountBucket {
    Few,
    Many,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RadiusBucket {
    Small,
    Large,
}

impl CountBucket {
    pub const ALL: [CountBucket; 2] = [CountBucket::Few, CountBucket::Many];

    pub fn range(self) -> (usize, usize) {
        match self {
            CountBucket::Few => FEW_RANGE,
            CountBucket::Many => MANY_RANGE,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            CountBucket::Few => "few",
            CountBucket::Many => "many",
        }
    }
}

impl RadiusBucket {
    pub const ALL: [RadiusBucket; 2] = [RadiusBucket::Small, RadiusBucket::Large];

    pub fn radius(self) -> f32 {
        match self {
            RadiusBucket::Small => SMALL_RADIUS,
            RadiusBucket::Large => LARGE_RADIUS,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            RadiusBucket::Small => "small",
            RadiusBucket::Large => "large",
        }
    }
}

impl fmt::Display for CountBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl fmt::Display for RadiusBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl FromStr for CountBucket {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "few" => Ok(CountBucket::Few),
            "many" => Ok(CountBucket::Many),
            _ => Err(Error::Format(format!("unknown count bucket {s:?}"))),
        }
    }
}

impl FromStr for RadiusBucket {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(RadiusBucket::Small),
            "large" => Ok(RadiusBucket::Large),
            _ => Err(Error::Format(format!("unknown radius bucket {s:?}"))),
        }
    }
}

/// Names of the first `k` categories.
pub fn category_names(k: usize) -> Result<Vec<String>> {
    if !(2..=CATEGORY_NAMES.len()).contains(&k) {
        return Err(Error::InvalidArgument(format!(
            "category count must be in 2..={}, got {k}",
            CATEGORY_NAMES.len()
        )));
    }
    Ok(CATEGORY_NAMES[..k].iter().map(|s| s.to_string()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TissueSpec {
    pub category: usize,
    pub count_bucket: CountBucket,
    pub nucleus_count: usize,
    pub radius_bucket: RadiusBucket,
    /// Always equal to `category`.
    pub stain_hue: usize,
    pub texture_seed: u64,
}

impl TissueSpec {
    pub fn validate(&self, categories: usize) -> Result<()> {
        let (lo, hi) = self.count_bucket.range();
        if self.category >= categories || self.category >= PALETTE.len() {
            return Err(Error::Range(format!("unknown category {}", self.category)));
        }
        if self.stain_hue != self.category {
            return Err(Error::Range("stain hue does not match category".into()));
        }
        if !(lo..=hi).contains(&self.nucleus_count) {
            return Err(Error::Range(format!(
                "{} nuclei outside the {} bucket",
                self.nucleus_count, self.count_bucket
            )));
        }
        Ok(())
    }

    pub fn buckets(&self) -> CaptionBuckets {
        CaptionBuckets { category: self.category, count: self.count_bucket, radius: self.radius_bucket }
    }
}

/// The fields a caption determines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CaptionBuckets {
    pub category: usize,
    pub count: CountBucket,
    pub radius: RadiusBucket,
}

impl CaptionBuckets {
    /// Every combination for `k` categories, category-major.
    pub fn grid(k: usize) -> Vec<CaptionBuckets> {
        let mut out = Vec::new();
        for category in 0..k {
            for count in CountBucket::ALL {
                for radius in RadiusBucket::ALL {
                    out.push(CaptionBuckets { category, count, radius });
                }
            }
        }
        out
    }
}

/// Uniform draw over the legal buckets of `category`.
pub fn sample_spec<R: Rng + ?Sized>(rng: &mut R, category: usize, categories: usize) -> Result<TissueSpec> {
    if category >= categories || categories > PALETTE.len() {
        return Err(Error::Range(format!("unknown category {category}")));
    }
    let count_bucket = if rng.gen::<bool>() { CountBucket::Many } else { CountBucket::Few };
    let (lo, hi) = count_bucket.range();
    let nucleus_count = rng.gen_range(lo..=hi);
    let radius_bucket = if rng.gen::<bool>() { RadiusBucket::Large } else { RadiusBucket::Small };
    Ok(TissueSpec {
        category,
        count_bucket,
        nucleus_count,
        radius_bucket,
        stain_hue: category,
        texture_seed: rng.gen(),
    })
}

pub fn caption(buckets: &CaptionBuckets, categories: &[String]) -> Result<String> {
    let name = categories
        .get(buckets.category)
        .ok_or_else(|| Error::Range(format!("unknown category {}", buckets.category)))?;
    Ok(format!("a {name} patch with {} {} nuclei", buckets.count, buckets.radius))
}

/// Exact inverse of [`caption`]; words are compared case-insensitively.
pub fn parse_caption(text: &str, categories: &[String]) -> Result<CaptionBuckets> {
    let w = words(text);
    let bad = || Error::Format(format!("caption {text:?} does not follow the template"));
    if w.len() != 7 || w[0] != "a" || w[2] != "patch" || w[3] != "with" || w[6] != "nuclei" {
        return Err(bad());
    }
    let category = categories.iter().position(|c| *c == w[1]).ok_or_else(bad)?;
    let count = w[4].parse().map_err(|_| bad())?;
    let radius = w[5].parse().map_err(|_| bad())?;
    Ok(CaptionBuckets { category, count, radius })
}

/// Drawing options; the defaults are used for every corpus image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub texture_amplitude: f32,
    pub color_jitter: f32,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { texture_amplitude: TEXTURE_AMPLITUDE, color_jitter: COLOR_JITTER }
    }
}

/// Bilinear value noise in `[-1, 1]` on a coarse grid.
fn texture(seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = TEXTURE_GRID;
    let knots: Vec<f32> = (0..g * g).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    let step = (IMAGE_SIZE as f32) / (g - 1) as f32;
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let fy = (y as f32 + 0.5) / step;
            let fx = (x as f32 + 0.5) / step;
            let (iy, ix) = ((fy as usize).min(g - 2), (fx as usize).min(g - 2));
            let (ty, tx) = (fy - iy as f32, fx - ix as f32);
            let k = |a: usize, b: usize| knots[a * g + b];
            let top = k(iy, ix) * (1.0 - tx) + k(iy, ix + 1) * tx;
            let bot = k(iy + 1, ix) * (1.0 - tx) + k(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Non-overlapping nucleus centres with at least [`RIM_GAP`] between rims.
/// A failed packing restarts from scratch on the same generator.
fn place_nuclei<R: Rng + ?Sized>(rng: &mut R, count: usize, radius: f32) -> Vec<(f32, f32)> {
    let lo = radius + 0.5;
    let hi = IMAGE_SIZE as f32 - radius - 0.5;
    let min_dist = 2.0 * radius + RIM_GAP;
    'restart: loop {
        let mut centres: Vec<(f32, f32)> = Vec::with_capacity(count);
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..500 {
                let c = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
                if centres.iter().all(|p| ((p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sqrt() >= min_dist) {
                    centres.push(c);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        return centres;
    }
}

/// Draws `spec.nucleus_count` anti-aliased disks over the textured
/// background. Placement and colour jitter come from `rng`; the texture from
/// `spec.texture_seed`. The result is quantized to 8 bits.
pub fn render<R: Rng + ?Sized>(spec: &TissueSpec, rng: &mut R) -> ImagePatch {
    render_with(spec, rng, &RenderOptions::default())
}

pub fn render_with<R: Rng + ?Sized>(spec: &TissueSpec, rng: &mut R, opts: &RenderOptions) -> ImagePatch {
    let n = IMAGE_SIZE;
    let tex = texture(spec.texture_seed);
    let mut data = Vec::with_capacity(n * n * 3);
    for t in &tex {
        for c in BACKGROUND {
            data.push(c + opts.texture_amplitude * t);
        }
    }
    let r = spec.radius_bucket.radius();
    let centres = place_nuclei(rng, spec.nucleus_count, r);
    let base = PALETTE[spec.stain_hue];
    for (cy, cx) in centres {
        let col: Vec<f32> = base
            .iter()
            .map(|&c| (c + rng.gen_range(-1.0..=1.0) * opts.color_jitter).clamp(0.0, 1.0))
            .collect();
        let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
        let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
        let y1 = ((cy + r + 1.0).ceil() as usize).min(n);
        let x1 = ((cx + r + 1.0).ceil() as usize).min(n);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = ((y as f32 + 0.5 - cy).powi(2) + (x as f32 + 0.5 - cx).powi(2)).sqrt();
                let a = (r - d + 0.5).clamp(0.0, 1.0);
                if a > 0.0 {
                    let i = (y * n + x) * 3;
                    for c in 0..3 {
                        data[i + c] = data[i + c] * (1.0 - a) + col[c] * a;
                    }
                }
            }
        }
    }
    ImagePatch::from_clamped(n, n, data).expect("rendered values are finite").quantized()
}

/// One connected nucleus region.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub area: usize,
    pub category: usize,
}

/// Detector output.
#[derive(Clone, Debug, PartialEq)]
pub struct NucleusReport {
    pub components: Vec<Component>,
}

impl NucleusReport {
    pub fn count(&self) -> usize {
        self.components.len()
    }

    pub fn mean_area(&self) -> Option<f64> {
        if self.components.is_empty() {
            return None;
        }
        Some(self.components.iter().map(|c| c.area as f64).sum::<f64>() / self.components.len() as f64)
    }

    pub fn radius_bucket(&self) -> Option<RadiusBucket> {
        self.mean_area()
            .map(|a| if a > LARGE_AREA_THRESHOLD { RadiusBucket::Large } else { RadiusBucket::Small })
    }

    /// Most frequent component category, ties to the lower index.
    pub fn category(&self) -> Option<usize> {
        let mut votes = BTreeMap::new();
        for c in &self.components {
            *votes.entry(c.category).or_insert(0usize) += 1;
        }
        let best = votes.values().copied().max()?;
        votes.into_iter().find(|&(_, v)| v == best).map(|(k, _)| k)
    }
}

/// Per-pixel stain coverage and best-matching palette entry among the first
/// `categories`, or `None` for background.
fn classify_pixel(p: [f32; 3], categories: usize) -> Option<usize> {
    let mut best: Option<(f32, usize, f32)> = None;
    for (k, pal) in PALETTE.iter().take(categories).enumerate() {
        let d: Vec<f32> = (0..3).map(|c| pal[c] - BACKGROUND[c]).collect();
        let v: Vec<f32> = (0..3).map(|c| p[c] - BACKGROUND[c]).collect();
        let dd: f32 = d.iter().map(|x| x * x).sum();
        let a = v.iter().zip(&d).map(|(x, y)| x * y).sum::<f32>() / dd;
        let res = v.iter().zip(&d).map(|(x, y)| (x - a * y).powi(2)).sum::<f32>().sqrt();
        if best.map_or(true, |(r, _, _)| res < r) {
            best = Some((res, k, a));
        }
    }
    let (res, k, a) = best?;
    (a >= MIN_COVERAGE && res <= MAX_RESIDUAL).then_some(k)
}

/// Stain-coverage threshold, 4-connected components of at least
/// [`MIN_COMPONENT_AREA`] pixels, each labelled with its majority palette
/// entry.
pub fn analyze_nuclei(image: &ImagePatch, categories: usize) -> NucleusReport {
    let (h, w) = (image.height(), image.width());
    let labels: Vec<Option<usize>> = (0..h * w).map(|i| classify_pixel(image.pixel(i / w, i % w), categories)).collect();
    let mut seen = vec![false; h * w];
    let mut components = Vec::new();
    for start in 0..h * w {
        if seen[start] || labels[start].is_none() {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut votes = vec![0usize; PALETTE.len()];
        let mut area = 0;
        while let Some(i) = stack.pop() {
            area += 1;
            votes[labels[i].unwrap()] += 1;
            let (y, x) = (i / w, i % w);
            let mut nb = Vec::with_capacity(4);
            if y > 0 {
                nb.push(i - w);
            }
            if y + 1 < h {
                nb.push(i + w);
            }
            if x > 0 {
                nb.push(i - 1);
            }
            if x + 1 < w {
                nb.push(i + 1);
            }
            for j in nb {
                if !seen[j] && labels[j].is_some() {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if area >= MIN_COMPONENT_AREA {
            let best = *votes.iter().max().unwrap();
            let category = votes.iter().position(|&v| v == best).unwrap();
            components.push(Component { area, category });
        }
    }
    NucleusReport { components }
}

/// Number of detected nuclei, matching against every palette entry.
pub fn detect_nuclei(image: &ImagePatch) -> usize {
    analyze_nuclei(image, PALETTE.len()).count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub id: usize,
    pub image: ImagePatch,
    pub caption: String,
    pub category_id: usize,
    pub spec: TissueSpec,
}

/// Generator for the sample at `id`.
pub fn sample_rng(master_seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(id as u64);
    rng
}

pub fn generate_sample(master_seed: u64, id: usize, categories: &[String]) -> Result<SyntheticSample> {
    let mut rng = sample_rng(master_seed, id);
    let category = rng.gen_range(0..categories.len());
    let spec = sample_spec(&mut rng, category, categories.len())?;
    let image = render(&spec, &mut rng);
    Ok(SyntheticSample { id, image, caption: caption(&spec.buckets(), categories)?, category_id: category, spec })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub categories: Vec<String>,
    pub master_seed: u64,
    pub samples: Vec<SyntheticSample>,
}

impl Corpus {
    pub fn generate(count: usize, categories: usize, master_seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidArgument("corpus needs at least one sample".into()));
        }
        let categories = category_names(categories)?;
        let samples = (0..count)
            .map(|i| generate_sample(master_seed, i, &categories))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { categories, master_seed, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub first: usize,
    pub count: usize,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub count: usize,
    pub categories: Vec<String>,
    pub master_seed: u64,
    pub captions_crc32: u32,
    pub shards: Vec<ShardInfo>,
}

pub const META_FILE: &str = "meta.json";

const TSV_HEADER: &str =
    "id\tcategory_id\tcaption\tcount_bucket\tnucleus_count\tradius_bucket\tstain_hue\ttexture_seed";

pub fn image_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("images").join(format!("{id:06}.png"))
}

fn png_bytes(image: &ImagePatch) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    image.write_png(&mut buf)?;
    Ok(buf)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Writes `meta.json`, `captions.tsv` and `images/<id>.png`. Shards group
/// [`SHARD_SIZE`] consecutive ids; a shard checksum covers the PNG bytes of
/// its images in id order.
pub fn write_dataset(corpus: &Corpus, dir: &Path) -> Result<DatasetMeta> {
    fs::create_dir_all(dir.join("images"))?;
    let mut tsv = String::from(TSV_HEADER);
    tsv.push('\n');
    let mut shards = Vec::new();
    for (si, chunk) in corpus.samples.chunks(SHARD_SIZE).enumerate() {
        let mut hasher = crc32fast::Hasher::new();
        for (j, s) in chunk.iter().enumerate() {
            let id = si * SHARD_SIZE + j;
            if s.id != id {
                return Err(Error::Format(format!("sample ids must be consecutive from 0, found {} at {id}", s.id)));
            }
            let bytes = png_bytes(&s.image)?;
            hasher.update(&bytes);
            write_file(&image_path(dir, id), &bytes)?;
            tsv.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                id,
                s.category_id,
                s.caption,
                s.spec.count_bucket,
                s.spec.nucleus_count,
                s.spec.radius_bucket,
                s.spec.stain_hue,
                s.spec.texture_seed
            ));
        }
        shards.push(ShardInfo { first: si * SHARD_SIZE, count: chunk.len(), crc32: hasher.finalize() });
    }
    write_file(&dir.join("captions.tsv"), tsv.as_bytes())?;
    let meta = DatasetMeta {
        version: DATASET_VERSION,
        count: corpus.samples.len(),
        categories: corpus.categories.clone(),
        master_seed: corpus.master_seed,
        captions_crc32: crc32fast::hash(tsv.as_bytes()),
        shards,
    };
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    write_file(&dir.join(META_FILE), json.as_bytes())?;
    Ok(meta)
}

fn parse_field<T: FromStr>(field: &str, what: &str, line: usize) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Format(format!("captions.tsv line {line}: bad {what} {field:?}")))
}

/// Reads and verifies a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Corpus> {
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(dir.join(META_FILE))?)?;
    if meta.version != DATASET_VERSION {
        return Err(Error::Version { found: meta.version, expected: DATASET_VERSION });
    }
    let tsv = fs::read(dir.join("captions.tsv"))?;
    if crc32fast::hash(&tsv) != meta.captions_crc32 {
        return Err(Error::Checksum("captions.tsv does not match meta.json".into()));
    }
    let present = fs::read_dir(dir.join("images"))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
        .count();
    if present != meta.count {
        return Err(Error::Format(format!("meta.json lists {} images, found {present}", meta.count)));
    }
    let tsv = String::from_utf8(tsv).map_err(|_| Error::Format("captions.tsv is not UTF-8".into()))?;
    let mut lines = tsv.lines();
    if lines.next() != Some(TSV_HEADER) {
        return Err(Error::Format("captions.tsv header is missing or wrong".into()));
    }
    let mut samples = Vec::with_capacity(meta.count);
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(Error::Format(format!("captions.tsv line {}: expected 8 fields", n + 2)));
        }
        let id: usize = parse_field(f[0], "id", n + 2)?;
        if id != n {
            return Err(Error::Format(format!("captions.tsv line {}: id {id} out of order", n + 2)));
        }
        let spec = TissueSpec {
            category: parse_field(f[1], "category", n + 2)?,
            count_bucket: f[3].parse()?,
            nucleus_count: parse_field(f[4], "nucleus count", n + 2)?,
            radius_bucket: f[5].parse()?,
            stain_hue: parse_field(f[6], "stain hue", n + 2)?,
            texture_seed: parse_field(f[7], "texture seed", n + 2)?,
        };
        spec.validate(meta.categories.len())?;
        let buckets = parse_caption(f[2], &meta.categories)?;
        if buckets != spec.buckets() {
            return Err(Error::Format(format!("captions.tsv line {}: caption disagrees with spec", n + 2)));
        }
        samples.push((id, spec, f[2].to_string()));
    }
    if samples.len() != meta.count {
        return Err(Error::Format(format!("meta.json lists {} samples, captions.tsv has {}", meta.count, samples.len())));
    }
    let mut out = Vec::with_capacity(meta.count);
    for shard in &meta.shards {
        let mut hasher = crc32fast::Hasher::new();
        let mut files = Vec::with_capacity(shard.count);
        for id in shard.first..shard.first + shard.count {
            let bytes = fs::read(image_path(dir, id))?;
            hasher.update(&bytes);
            files.push(bytes);
        }
        if hasher.finalize() != shard.crc32 {
            return Err(Error::Checksum(format!("shard starting at {} failed its checksum", shard.first)));
        }
        for (id, bytes) in (shard.first..).zip(files) {
            let (_, spec, cap) = samples.get(id).ok_or_else(|| Error::Format(format!("shard lists missing id {id}")))?;
            let image = ImagePatch::read_png(&bytes[..])?;
            out.push(SyntheticSample { id, image, caption: cap.clone(), category_id: spec.category, spec: *spec });
        }
    }
    if out.len() != meta.count {
        return Err(Error::Format("shards do not cover every sample".into()));
    }
    Ok(Corpus { categories: meta.categories, master_seed: meta.master_seed, samples: out })
}
