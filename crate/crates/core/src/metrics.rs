//! Evaluation metrics: distribution distance, embedding agreement, cluster
//! separation, retrieval, classification, caption overlap and image quality.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::codec::ImagePatch;
use crate::conditioning::words;
use crate::corpus::{analyze_nuclei, parse_caption, CaptionBuckets, CountBucket, RadiusBucket};
use crate::error::{shape_err, Error, Result};

/// SSIM stabilizers for a dynamic range of 1.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Luminance weights used by NCC and the pixel-stat embedder.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_GAMMA: f64 = 0.5;
pub const METEOR_BETA: f64 = 3.0;
/// Longest reference for which the chunk count is minimised exactly.
const METEOR_EXACT_LIMIT: usize = 20;

/// A deterministic map from images (and possibly text) into a shared
/// vector space.
pub trait EmbeddingProvider {
    fn name(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn embed_image(&self, image: &ImagePatch) -> Result<Vec<f64>>;

    fn supports_text(&self) -> bool {
        false
    }

    fn embed_text(&self, _text: &str) -> Result<Vec<f64>> {
        Err(Error::InvalidArgument(format!("provider {} has no text embedding", self.name())))
    }
}

/// 8x8 grid of block-mean luminance followed by 16-bin histograms of each
/// colour channel (fractions of pixels). Width 112.
#[derive(Clone, Copy, Debug, Default)]
pub struct PixelStat;

pub const PIXEL_GRID: usize = 8;
pub const PIXEL_BINS: usize = 16;

impl EmbeddingProvider for PixelStat {
    fn name(&self) -> &'static str {
        "pixelstat"
    }

    fn dim(&self) -> usize {
        PIXEL_GRID * PIXEL_GRID + 3 * PIXEL_BINS
    }

    fn embed_image(&self, image: &ImagePatch) -> Result<Vec<f64>> {
        let (h, w) = (image.height(), image.width());
        if h % PIXEL_GRID != 0 || w % PIXEL_GRID != 0 {
            return Err(shape_err(format!("image {h}x{w} does not tile into an {PIXEL_GRID}x{PIXEL_GRID} grid")));
        }
        let (bh, bw) = (h / PIXEL_GRID, w / PIXEL_GRID);
        let mut out = vec![0.0; self.dim()];
        for y in 0..h {
            for x in 0..w {
                let p = image.pixel(y, x);
                let l: f64 = (0..3).map(|c| LUMA[c] * p[c] as f64).sum();
                out[(y / bh) * PIXEL_GRID + x / bw] += l / (bh * bw) as f64;
                for c in 0..3 {
                    let bin = ((p[c] as f64 * PIXEL_BINS as f64) as usize).min(PIXEL_BINS - 1);
                    out[PIXEL_GRID * PIXEL_GRID + c * PIXEL_BINS + bin] += 1.0 / (h * w) as f64;
                }
            }
        }
        Ok(out)
    }
}

/// Maps images (through the nucleus detector) and captions (through the
/// caption parser) onto the same bucket vector: a centred, unit-norm
/// category indicator, then count and radius coordinates in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct ParamSpace {
    categories: Vec<String>,
}

/// Detected counts map to `clamp((n - COUNT_CENTER) / COUNT_SCALE, -1, 1)`.
pub const COUNT_CENTER: f64 = 9.0;
pub const COUNT_SCALE: f64 = 3.0;

impl ParamSpace {
    pub fn new(categories: Vec<String>) -> Result<Self> {
        if categories.len() < 2 {
            return Err(Error::InvalidArgument("parameter space needs at least 2 categories".into()));
        }
        Ok(Self { categories })
    }

    fn category_block(&self, category: Option<usize>) -> Vec<f64> {
        let k = self.categories.len();
        let Some(c) = category else { return vec![0.0; k] };
        let scale = 1.0 / ((k as f64 - 1.0) / k as f64).sqrt();
        (0..k).map(|i| ((i == c) as u8 as f64 - 1.0 / k as f64) * scale).collect()
    }

    pub fn embed_buckets(&self, b: &CaptionBuckets) -> Vec<f64> {
        let mut v = self.category_block(Some(b.category));
        v.push(match b.count {
            CountBucket::Few => -1.0,
            CountBucket::Many => 1.0,
        });
        v.push(match b.radius {
            RadiusBucket::Small => -1.0,
            RadiusBucket::Large => 1.0,
        });
        v
    }
}

impl EmbeddingProvider for ParamSpace {
    fn name(&self) -> &'static str {
        "paramspace"
    }

    fn dim(&self) -> usize {
        self.categories.len() + 2
    }

    fn embed_image(&self, image: &ImagePatch) -> Result<Vec<f64>> {
        let rep = analyze_nuclei(image, self.categories.len());
        let mut v = self.category_block(rep.category());
        v.push(((rep.count() as f64 - COUNT_CENTER) / COUNT_SCALE).clamp(-1.0, 1.0));
        v.push(match rep.radius_bucket() {
            None => 0.0,
            Some(RadiusBucket::Small) => -1.0,
            Some(RadiusBucket::Large) => 1.0,
        });
        Ok(v)
    }

    fn supports_text(&self) -> bool {
        true
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.embed_buckets(&parse_caption(text, &self.categories)?))
    }
}

/// `a . b / sqrt(|a|^2 |b|^2)`; exactly 1 for identical vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err("cosine operands differ in length"));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Image-image embedding agreement.
pub fn plip_i(f_real: &[f64], f_synth: &[f64]) -> Result<f64> {
    cosine(f_real, f_synth)
}

/// Text-image embedding agreement.
pub fn plip_t(text: &[f64], f_synth: &[f64]) -> Result<f64> {
    cosine(text, f_synth)
}

/// Mean and `1/(n-1)` covariance of a set of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

pub fn gaussian_stats(rows: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 embeddings, got {n}")));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(shape_err("embeddings must share a positive width"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Range("non-finite embedding".into()));
    }
    let mut mean = DVector::zeros(d);
    for r in rows {
        for j in 0..d {
            mean[j] += r[j];
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let s: f64 = rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum();
            let v = s / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(GaussianStats { mean, cov, n })
}

/// Square root of a symmetric positive semi-definite matrix. Eigenvalues
/// within roundoff of zero (or below it) are clamped to zero; their square
/// roots would otherwise inflate rounding noise to about 1e-8.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let floor = top * (m.nrows() as f64) * 16.0 * f64::EPSILON;
    let roots = eig.eigenvalues.map(|v| if v > floor { v.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_r - mu_s|^2 + tr(S_r + S_s - 2 (S_r^1/2 S_s S_r^1/2)^1/2)`, clamped
/// at zero.
pub fn frechet_distance(r: &GaussianStats, s: &GaussianStats) -> Result<f64> {
    let d = r.mean.len();
    if s.mean.len() != d || r.cov.shape() != (d, d) || s.cov.shape() != (d, d) {
        return Err(shape_err("Gaussian statistics differ in dimension"));
    }
    let finite = |g: &GaussianStats| g.mean.iter().chain(g.cov.iter()).all(|v| v.is_finite());
    if !finite(r) || !finite(s) {
        return Err(Error::Range("non-finite Gaussian statistics".into()));
    }
    let mean_term: f64 = r.mean.iter().zip(s.mean.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    if r.cov == s.cov {
        // tr(S + S - 2 S) vanishes identically
        return Ok(mean_term);
    }
    let rh = sqrt_psd(&r.cov);
    let inner = &rh * &s.cov * &rh;
    let cross = sqrt_psd(&inner).trace();
    Ok((mean_term + r.cov.trace() + s.cov.trace() - 2.0 * cross).max(0.0))
}

/// Mean silhouette coefficient under Euclidean distance. Points in
/// singleton clusters, and points with `a = b = 0`, score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let n = points.len();
    if n < 2 {
        return Err(Error::InvalidArgument("silhouette needs at least 2 points".into()));
    }
    if labels.len() != n {
        return Err(shape_err("one label per point required"));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(shape_err("points must share a width"));
    }
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *sizes.entry(l).or_insert(0) += 1;
    }
    if sizes.len() < 2 {
        return Err(Error::InvalidArgument("silhouette needs at least 2 clusters".into()));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for i in 0..n {
        if sizes[&labels[i]] == 1 {
            continue;
        }
        let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
        for j in 0..n {
            if j != i {
                *sums.entry(labels[j]).or_insert(0.0) += dist(&points[i], &points[j]);
            }
        }
        let a = sums[&labels[i]] / (sizes[&labels[i]] - 1) as f64;
        let b = sums
            .iter()
            .filter(|(&l, _)| l != labels[i])
            .map(|(l, &s)| s / sizes[l] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Fraction of queries whose true gallery item ranks in the top `k` by
/// cosine similarity; equal similarities rank by ascending gallery index.
pub fn recall_at_k(queries: &[Vec<f64>], gallery: &[Vec<f64>], truth: &[usize], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if gallery.is_empty() || queries.is_empty() {
        return Err(Error::InvalidArgument("recall needs queries and a gallery".into()));
    }
    if truth.len() != queries.len() {
        return Err(shape_err("one ground-truth index per query required"));
    }
    let mut hits = 0;
    for (q, &gt) in queries.iter().zip(truth) {
        if gt >= gallery.len() {
            return Err(Error::Range(format!("ground-truth index {gt} outside the gallery")));
        }
        let sims = gallery.iter().map(|g| cosine(q, g)).collect::<Result<Vec<_>>>()?;
        let target = sims[gt];
        let ahead = sims.iter().enumerate().filter(|&(j, &s)| s > target || (s == target && j < gt)).count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

fn check_labels(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(shape_err("prediction and label counts differ"));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_labels(pred, truth)?;
    Ok(pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64)
}

/// F1 of one class; 0 when the class is never predicted nor present.
pub fn class_f1(pred: &[usize], truth: &[usize], class: usize) -> Result<f64> {
    check_labels(pred, truth)?;
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == class, t == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fnn) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Binary F1 of class 1 when every label is 0 or 1; otherwise the macro
/// average over classes `0..=max label`.
pub fn f1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_labels(pred, truth)?;
    let classes = pred.iter().chain(truth).copied().max().unwrap() + 1;
    if classes <= 2 {
        return class_f1(pred, truth, 1);
    }
    macro_f1(pred, truth, classes)
}

pub fn macro_f1(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    check_labels(pred, truth)?;
    if classes == 0 {
        return Err(Error::InvalidArgument("need at least one class".into()));
    }
    let mut sum = 0.0;
    for c in 0..classes {
        sum += class_f1(pred, truth, c)?;
    }
    Ok(sum / classes as f64)
}

/// Minimum chunk count over maximum one-to-one exact matchings, searched
/// exhaustively with memoisation. Returns `(matches, chunks)`.
fn exact_alignment(cand: &[String], refs: &[String]) -> (usize, usize) {
    fn go(
        i: usize,
        used: u64,
        prev: Option<usize>,
        cand: &[String],
        refs: &[String],
        memo: &mut HashMap<(usize, u64, Option<usize>), (usize, usize)>,
    ) -> (usize, usize) {
        if i == cand.len() {
            return (0, 0);
        }
        if let Some(&r) = memo.get(&(i, used, prev)) {
            return r;
        }
        // skip candidate i
        let mut best = go(i + 1, used, None, cand, refs, memo);
        for j in 0..refs.len() {
            if used & (1 << j) == 0 && refs[j] == cand[i] {
                let (m, c) = go(i + 1, used | (1 << j), Some(j), cand, refs, memo);
                let new_chunk = if prev.is_some_and(|p| p + 1 == j) { 0 } else { 1 };
                let option = (m + 1, c + new_chunk);
                if option.0 > best.0 || (option.0 == best.0 && option.1 < best.1) {
                    best = option;
                }
            }
        }
        memo.insert((i, used, prev), best);
        best
    }
    go(0, 0, None, cand, refs, &mut HashMap::new())
}

/// Left-to-right greedy matching to the first unused equal reference word.
fn greedy_alignment(cand: &[String], refs: &[String]) -> (usize, usize) {
    let mut used = vec![false; refs.len()];
    let (mut m, mut chunks) = (0, 0);
    let mut prev: Option<usize> = None;
    for w in cand {
        let next = prev.map(|p| p + 1).filter(|&j| j < refs.len() && !used[j] && refs[j] == *w);
        let j = next.or_else(|| (0..refs.len()).find(|&j| !used[j] && refs[j] == *w));
        match j {
            Some(j) => {
                used[j] = true;
                m += 1;
                if prev.map_or(true, |p| p + 1 != j) {
                    chunks += 1;
                }
                prev = Some(j);
            }
            None => prev = None,
        }
    }
    (m, chunks)
}

/// Unigram METEOR with exact matching: `F = PR / (alpha P + (1 - alpha) R)`
/// (the harmonic mean weighting recall 9:1), fragmentation penalty
/// `gamma (chunks / m)^beta`.
pub fn meteor_lite(candidate: &str, reference: &str) -> f64 {
    let cand = words(candidate);
    let refs = words(reference);
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let (m, chunks) = if refs.len() <= METEOR_EXACT_LIMIT && cand.len() <= 64 {
        exact_alignment(&cand, &refs)
    } else {
        greedy_alignment(&cand, &refs)
    };
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / refs.len() as f64;
    let f = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
    f * (1.0 - penalty)
}

fn check_pair(x: &ImagePatch, y: &ImagePatch) -> Result<()> {
    if x.height() != y.height() || x.width() != y.width() {
        return Err(shape_err(format!(
            "image sizes differ: {}x{} vs {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

/// Single-window SSIM over all pixels and channels.
pub fn ssim(x: &ImagePatch, y: &ImagePatch) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.data().len() as f64;
    let mx = x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let my = y.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.data().iter().zip(y.data()) {
        let (da, db) = (a as f64 - mx, b as f64 - my);
        vx += da * da;
        vy += db * db;
        cxy += da * db;
    }
    let (vx, vy, cxy) = (vx / n, vy / n, cxy / n);
    Ok(((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)))
}

pub fn mse(x: &ImagePatch, y: &ImagePatch) -> Result<f64> {
    check_pair(x, y)?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(s / x.data().len() as f64)
}

/// `10 log10(1 / mse)`, `+inf` for identical images.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (1.0 / mse).log10()
}

pub fn psnr(x: &ImagePatch, y: &ImagePatch) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

fn luminance(x: &ImagePatch) -> Vec<f64> {
    x.data()
        .chunks(3)
        .map(|p| (0..3).map(|c| LUMA[c] * p[c] as f64).sum())
        .collect()
}

/// Normalized cross-correlation of mean-centred luminance. Constant images
/// have no defined correlation and are rejected.
pub fn ncc(x: &ImagePatch, y: &ImagePatch) -> Result<f64> {
    check_pair(x, y)?;
    let (a, b) = (luminance(x), luminance(y));
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&u, &v) in a.iter().zip(&b) {
        let (du, dv) = (u - ma, v - mb);
        sab += du * dv;
        saa += du * du;
        sbb += dv * dv;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("NCC of a constant image".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Synthetic image `synth[i]` pairs with the real image carrying the same
/// caption buckets; the k-th synthetic image of a caption takes the k-th real
/// one (cyclically). Synthetic images without a matching real caption are
/// left unpaired. Returns `(real index, synth index)` pairs in synth order.
pub fn matched_pairs(real_captions: &[CaptionBuckets], synth_captions: &[CaptionBuckets]) -> Vec<(usize, usize)> {
    let mut by_caption: BTreeMap<CaptionBuckets, Vec<usize>> = BTreeMap::new();
    for (i, c) in real_captions.iter().enumerate() {
        by_caption.entry(*c).or_default().push(i);
    }
    let mut seen: BTreeMap<CaptionBuckets, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for (s, c) in synth_captions.iter().enumerate() {
        if let Some(reals) = by_caption.get(c) {
            let k = seen.entry(*c).or_insert(0);
            out.push((reals[*k % reals.len()], s));
            *k += 1;
        }
    }
    out
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("mean of no values".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn embed_all<P: EmbeddingProvider + ?Sized>(provider: &P, images: &[ImagePatch]) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|i| provider.embed_image(i)).collect()
}

/// Fréchet distance between the embedding distributions of two image sets.
pub fn fid<P: EmbeddingProvider + ?Sized>(provider: &P, real: &[ImagePatch], synth: &[ImagePatch]) -> Result<f64> {
    let r = gaussian_stats(&embed_all(provider, real)?)?;
    let s = gaussian_stats(&embed_all(provider, synth)?)?;
    frechet_distance(&r, &s)
}

/// Mean text-image agreement of images against their prompts.
pub fn plip_t_mean<P: EmbeddingProvider + ?Sized>(provider: &P, prompts: &[String], images: &[ImagePatch]) -> Result<f64> {
    if prompts.len() != images.len() {
        return Err(shape_err("one prompt per image required"));
    }
    let mut scores = Vec::with_capacity(images.len());
    for (p, img) in prompts.iter().zip(images) {
        let t = provider.embed_text(p)?;
        let f = provider.embed_image(img)?;
        // an image with no detectable content has no direction; it agrees with nothing
        scores.push(match plip_t(&t, &f) {
            Err(Error::Degenerate(_)) => 0.0,
            other => other?,
        });
    }
    mean(&scores)
}

/// One row of a metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric: String,
    pub dataset: String,
    pub value: f64,
}

/// Metrics in insertion order, emitted as CSV (`metric,dataset,value`) and as
/// JSON `{provider, metrics: {dataset: {metric: value}}}` with keys
/// sorted. Non-finite values are written as `inf`, `-inf` or `nan`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub provider: String,
    pub values: Vec<MetricValue>,
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

impl MetricReport {
    pub fn new(provider: &str) -> Self {
        Self { provider: provider.to_string(), values: Vec::new() }
    }

    pub fn push(&mut self, metric: &str, dataset: &str, value: f64) {
        self.values.push(MetricValue { metric: metric.into(), dataset: dataset.into(), value });
    }

    pub fn get(&self, metric: &str, dataset: &str) -> Option<f64> {
        self.values.iter().find(|v| v.metric == metric && v.dataset == dataset).map(|v| v.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,dataset,value\n");
        for v in &self.values {
            s.push_str(&format!("{},{},{}\n", v.metric, v.dataset, format_value(v.value)));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        let mut metrics: BTreeMap<&str, BTreeMap<&str, serde_json::Value>> = BTreeMap::new();
        for v in &self.values {
            let value = if v.value.is_finite() {
                serde_json::Value::from(v.value)
            } else {
                serde_json::Value::from(format_value(v.value))
            };
            metrics.entry(&v.dataset).or_default().insert(&v.metric, value);
        }
        let doc = serde_json::json!({
            "provider": self.provider,
            "metrics": metrics,
        });
        let mut s = serde_json::to_string_pretty(&doc)?;
        s.push('\n');
        Ok(s)
    }
}
