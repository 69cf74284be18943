//! Relational alignment losses between visual and text feature geometry.
//!
//! Both losses compare batch-level cosine similarity matrices: the semantic
//! consistency loss pulls the image similarity structure toward the caption
//! similarity structure, and the category guidance loss pulls it toward the
//! category similarity structure, weighted per pair by how typical the two
//! captions are of their categories.

use crate::diffusion::{LatentBatch, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::real::Real;

/// Rows with a norm at or below this are treated as collapsed features.
pub const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix<T> {
    size: usize,
    values: Vec<T>,
}

impl<T: Real> SimilarityMatrix<T> {
    pub fn from_values(size: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != size * size {
            return Err(shape_err(format!("{size}x{size} matrix needs {} values", size * size)));
        }
        Ok(Self { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.size + j]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }
}

/// Pairwise cosine similarity `M_ij = x_i . x_j / (|x_i| |x_j|)` of the rows of
/// a row-major `[rows, cols]` matrix.
pub fn cosine_matrix<T: Real>(x: &[T], rows: usize, cols: usize) -> Result<SimilarityMatrix<T>> {
    if x.len() != rows * cols {
        return Err(shape_err(format!("expected {rows}x{cols} features, got {}", x.len())));
    }
    let units = unit_rows(x, rows, cols)?;
    let mut values = vec![T::zero(); rows * rows];
    for i in 0..rows {
        values[i * rows + i] = T::one();
        for j in (i + 1)..rows {
            let dot = dot(&units.0[i * cols..(i + 1) * cols], &units.0[j * cols..(j + 1) * cols]);
            let c = dot.max(-T::one()).min(T::one());
            values[i * rows + j] = c;
            values[j * rows + i] = c;
        }
    }
    Ok(SimilarityMatrix { size: rows, values })
}

/// Gradient of `cosine_matrix` given upstream `d_m`.
pub fn cosine_matrix_backward<T: Real>(x: &[T], _m: &[T], d_m: &[T], rows: usize, cols: usize) -> Vec<T> {
    let (units, norms) = unit_rows(x, rows, cols).expect("forward pass validated norms");
    let mut dx = vec![T::zero(); rows * cols];
    for i in 0..rows {
        // dU_i = sum_j (dM_ij + dM_ji) u_j
        let mut du = vec![T::zero(); cols];
        for j in 0..rows {
            let w = d_m[i * rows + j] + d_m[j * rows + i];
            if w == T::zero() {
                continue;
            }
            for (d, &u) in du.iter_mut().zip(&units[j * cols..(j + 1) * cols]) {
                *d = *d + w * u;
            }
        }
        let ui = &units[i * cols..(i + 1) * cols];
        let proj = dot(&du, ui);
        for (k, d) in dx[i * cols..(i + 1) * cols].iter_mut().enumerate() {
            *d = (du[k] - proj * ui[k]) / norms[i];
        }
    }
    dx
}

fn unit_rows<T: Real>(x: &[T], rows: usize, cols: usize) -> Result<(Vec<T>, Vec<T>)> {
    let mut units = x.to_vec();
    let mut norms = Vec::with_capacity(rows);
    for (i, row) in units.chunks_mut(cols).enumerate() {
        let n = dot(row, row).sqrt();
        if !(n.as_f64() > MIN_ROW_NORM) {
            return Err(Error::Degenerate(format!("feature row {i} has norm {}", n.as_f64())));
        }
        for v in row.iter_mut() {
            *v = *v / n;
        }
        norms.push(n);
    }
    Ok((units, norms))
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn weighted_sq_diff<T: Real>(a: &[T], b: &[T], w: Option<&[T]>, size: usize) -> T {
    let mut s = T::zero();
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s = s + w.map_or(T::one(), |w| w[i]) * d * d;
    }
    s / T::lit((size * size) as f64)
}

pub(crate) fn weighted_sq_diff_grad<T: Real>(a: &[T], b: &[T], w: Option<&[T]>, size: usize, upstream: T) -> Vec<T> {
    let c = upstream * T::lit(2.0) / T::lit((size * size) as f64);
    (0..a.len())
        .map(|i| c * w.map_or(T::one(), |w| w[i]) * (a[i] - b[i]))
        .collect()
}

/// Semantic consistency loss: mean squared difference between the visual and
/// text similarity matrices.
pub fn corr_loss<T: Real>(mz: &SimilarityMatrix<T>, mt: &SimilarityMatrix<T>) -> Result<T> {
    if mz.size != mt.size {
        return Err(shape_err(format!("similarity sizes {} vs {}", mz.size, mt.size)));
    }
    Ok(weighted_sq_diff(&mz.values, &mt.values, None, mz.size))
}

/// Category guidance loss: typicality-weighted mean squared difference between
/// the visual and category similarity matrices.
pub fn cate_loss<T: Real>(mz: &SimilarityMatrix<T>, mc: &SimilarityMatrix<T>, weights: &[T]) -> Result<T> {
    if mz.size != mc.size || weights.len() != mz.size * mz.size {
        return Err(shape_err("category loss operands disagree in size"));
    }
    if weights.iter().any(|&w| !(w >= T::zero() && w <= T::one())) {
        return Err(Error::Range("typicality weights must lie in [0, 1]".into()));
    }
    Ok(weighted_sq_diff(&mz.values, &mc.values, Some(weights), mz.size))
}

/// Cosine between a category feature and a caption feature.
pub fn support_score<T: Real>(category: &[T], text: &[T]) -> Result<T> {
    if category.len() != text.len() {
        return Err(shape_err("support score vectors differ in length"));
    }
    let nc = dot(category, category).sqrt();
    let nt = dot(text, text).sqrt();
    if !(nc.as_f64() > MIN_ROW_NORM && nt.as_f64() > MIN_ROW_NORM) {
        return Err(Error::Degenerate("zero vector in support score".into()));
    }
    Ok((dot(category, text) / (nc * nt)).max(-T::one()).min(T::one()))
}

/// Corpus-level statistics of the pair typicality score `A_ij = s_i + s_j`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TypicalityStats {
    pub mu: f64,
    pub sigma: f64,
    pub sample_count: u64,
}

/// Sigmoid of the standardized pair score.
pub fn typicality_weight(pair_score: f64, stats: &TypicalityStats) -> Result<f64> {
    if !(stats.sigma > 0.0) || !stats.sigma.is_finite() {
        return Err(Error::InvalidArgument("typicality stats are not estimated".into()));
    }
    Ok(1.0 / (1.0 + (-(pair_score - stats.mu) / stats.sigma).exp()))
}

/// Pairwise weight matrix `W_ij` from per-sample support scores.
pub fn typicality_weights(scores: &[f64], stats: &TypicalityStats) -> Result<Vec<f64>> {
    let b = scores.len();
    let mut w = Vec::with_capacity(b * b);
    for &si in scores {
        for &sj in scores {
            w.push(typicality_weight(si + sj, stats)?);
        }
    }
    Ok(w)
}

/// Streaming mean/variance of per-sample support scores. Partial accumulators
/// can be merged, so the pass may be split across workers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TypicalityAccumulator {
    count: u64,
    mean: f64,
    m2: f64,
}

impl TypicalityAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, score: f64) {
        self.count += 1;
        let delta = score - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (score - self.mean);
    }

    pub fn merge(&mut self, other: &TypicalityAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Pair statistics from the per-sample ones: `mu = 2 mu_s`,
    /// `sigma = sqrt(2) sigma_s` (population standard deviation).
    pub fn finish(&self) -> Result<TypicalityStats> {
        if self.count < 2 {
            return Err(Error::InvalidArgument(format!(
                "typicality needs at least 2 samples, got {}",
                self.count
            )));
        }
        let var = self.m2 / self.count as f64;
        // all-identical scores leave only rounding residue in m2
        if !(var > 1e-24 * self.mean.abs().max(1.0)) {
            return Err(Error::Degenerate("all support scores are identical".into()));
        }
        Ok(TypicalityStats {
            mu: 2.0 * self.mean,
            sigma: std::f64::consts::SQRT_2 * var.sqrt(),
            sample_count: self.count,
        })
    }
}

pub fn estimate_typicality_stats(scores: impl IntoIterator<Item = f64>) -> Result<TypicalityStats> {
    let mut acc = TypicalityAccumulator::new();
    for s in scores {
        if !s.is_finite() {
            return Err(Error::Range("non-finite support score".into()));
        }
        acc.push(s);
    }
    acc.finish()
}

/// Channel-pooled estimate of the clean latent,
/// `(z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)` averaged over space.
/// Returns a row-major `[B, channels]` matrix.
pub fn visual_features<T: Real>(
    z_t: &LatentBatch<T>,
    t: &[usize],
    eps_pred: &LatentBatch<T>,
    s: &NoiseSchedule,
) -> Result<Vec<T>> {
    if z_t.len() != t.len() || z_t.len() != eps_pred.len() {
        return Err(shape_err("visual feature batch sizes disagree"));
    }
    let mut out = Vec::new();
    for ((z, e), &ti) in z_t.items().iter().zip(eps_pred.items()).zip(t) {
        if z.shape() != e.shape() {
            return Err(shape_err("latent and noise prediction shapes differ"));
        }
        let ab = s.alpha_bar(ti)?;
        let inv = T::lit(1.0 / ab.sqrt());
        let ns = T::lit((1.0 - ab).sqrt());
        let hw = z.height() * z.width();
        for c in 0..z.channels() {
            let zs = &z.values()[c * hw..(c + 1) * hw];
            let es = &e.values()[c * hw..(c + 1) * hw];
            let sum = zs.iter().zip(es).fold(T::zero(), |acc, (&a, &b)| acc + (a - ns * b) * inv);
            out.push(sum / T::lit(hw as f64));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, forward_sample, LatentGrid};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sim(size: usize, v: &[f64]) -> SimilarityMatrix<f64> {
        SimilarityMatrix::from_values(size, v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_matrix_examples() {
        let m = cosine_matrix(&[1.0f64, 2.0, 1.0, 2.0, 1.0, 2.0], 3, 2).unwrap();
        assert!(m.values().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let m = cosine_matrix(&[1.0, 0.0, 0.0, 1.0], 2, 2).unwrap();
        assert_eq!(m.values(), &[1.0, 0.0, 0.0, 1.0]);
        let m = cosine_matrix(&[1.0, 0.0, 1.0, 1.0], 2, 2).unwrap();
        assert!((m.get(0, 1) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(cosine_matrix(&[0.0, 0.0, 1.0, 1.0], 2, 2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn corr_loss_examples() {
        let m = sim(2, &[1.0, 0.3, 0.3, 1.0]);
        assert_eq!(corr_loss(&m, &m).unwrap(), 0.0);
        assert_eq!(corr_loss(&sim(1, &[1.0]), &sim(1, &[1.0])).unwrap(), 0.0);
        let n = sim(2, &[1.0, 0.8, 0.8, 1.0]);
        assert!((corr_loss(&m, &n).unwrap() - 0.125).abs() < 1e-12);
        assert!(corr_loss(&m, &sim(1, &[1.0])).is_err());
    }

    #[test]
    fn cate_loss_examples() {
        let mz = sim(2, &[1.0, 0.0, 0.0, 1.0]);
        let mc = sim(2, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(cate_loss(&mz, &mc, &[0.0; 4]).unwrap(), 0.0);
        assert_eq!(cate_loss(&mz, &mz, &[0.7; 4]).unwrap(), 0.0);
        let w = [0.9, 0.5, 0.5, 0.9];
        assert!((cate_loss(&mz, &mc, &w).unwrap() - 0.25).abs() < 1e-12);
        assert!(cate_loss(&mz, &mc, &[1.5; 4]).is_err());
    }

    #[test]
    fn support_and_weight_examples() {
        assert!((support_score(&[1.0f64, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(support_score(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert_eq!(support_score(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(support_score(&[0.0, 0.0], &[1.0, 0.0]).is_err());

        let stats = TypicalityStats { mu: 0.4, sigma: 0.3, sample_count: 10 };
        assert_eq!(typicality_weight(0.4, &stats).unwrap(), 0.5);
        assert!((typicality_weight(0.7, &stats).unwrap() - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((typicality_weight(0.7, &stats).unwrap() - 0.73106).abs() < 1e-5);
        assert!(typicality_weight(1e6, &stats).unwrap() > 0.999_999);
        let bad = TypicalityStats { sigma: 0.0, ..stats };
        assert!(typicality_weight(0.1, &bad).is_err());
    }

    #[test]
    fn typicality_estimation() {
        assert!(matches!(estimate_typicality_stats([0.3; 5]), Err(Error::Degenerate(_))));
        assert!(estimate_typicality_stats([0.3]).is_err());
        let s = estimate_typicality_stats([0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((s.mu - 1.0).abs() < 1e-15);
        assert!((s.sigma - std::f64::consts::SQRT_2 * 0.5).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..500).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let forward = estimate_typicality_stats(xs.iter().copied()).unwrap();
        let backward = estimate_typicality_stats(xs.iter().rev().copied()).unwrap();
        let mut a = TypicalityAccumulator::new();
        let mut b = TypicalityAccumulator::new();
        xs[..123].iter().for_each(|&x| a.push(x));
        xs[123..].iter().for_each(|&x| b.push(x));
        b.merge(&a);
        let merged = b.finish().unwrap();
        for other in [backward, merged] {
            assert!((forward.mu - other.mu).abs() < 1e-9);
            assert!((forward.sigma - other.sigma).abs() < 1e-9);
        }
    }

    #[test]
    fn visual_features_recover_clean_latent() {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z0 = LatentGrid::<f64>::random(3, 4, 4, &mut rng);
        let eps = LatentGrid::<f64>::random(3, 4, 4, &mut rng);
        let zt = forward_sample(&s, &z0, 400, &eps).unwrap();
        let f = visual_features(
            &LatentBatch::new(vec![zt]).unwrap(),
            &[400],
            &LatentBatch::new(vec![eps]).unwrap(),
            &s,
        )
        .unwrap();
        for c in 0..3 {
            let direct: f64 = z0.values()[c * 16..(c + 1) * 16].iter().sum::<f64>() / 16.0;
            assert!((f[c] - direct).abs() < 1e-12);
        }

        // constant latent, zero noise prediction at a step where abar is known
        let s2 = build_schedule(2, 0.1, 0.2).unwrap();
        let z = LatentGrid::new(2, 2, 2, vec![0.68f64.sqrt() * 3.0; 8]).unwrap();
        let zero = LatentGrid::<f64>::zeros(2, 2, 2);
        let f = visual_features(
            &LatentBatch::new(vec![z]).unwrap(),
            &[2],
            &LatentBatch::new(vec![zero]).unwrap(),
            &s2,
        )
        .unwrap();
        assert!(f.iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn visual_features_match_scalar_recomputation() {
        let s = build_schedule(50, 1e-3, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zs: Vec<_> = (0..3).map(|_| LatentGrid::<f64>::random(2, 3, 3, &mut rng)).collect();
        let es: Vec<_> = (0..3).map(|_| LatentGrid::<f64>::random(2, 3, 3, &mut rng)).collect();
        let ts = [1usize, 25, 50];
        let f = visual_features(
            &LatentBatch::new(zs.clone()).unwrap(),
            &ts,
            &LatentBatch::new(es.clone()).unwrap(),
            &s,
        )
        .unwrap();
        for b in 0..3 {
            let ab: f64 = (1..=ts[b]).map(|k| 1.0 - (1e-3 + k as f64 / 50.0 * (0.05 - 1e-3))).product();
            for c in 0..2 {
                let mut acc = 0.0;
                for p in 0..9 {
                    let z = zs[b].values()[c * 9 + p];
                    let e = es[b].values()[c * 9 + p];
                    acc += (z - (1.0 - ab).sqrt() * e) / ab.sqrt();
                }
                assert!((f[b * 2 + c] - acc / 9.0).abs() < 1e-10);
            }
        }
    }

    fn random_features(seed: u64, b: usize, d: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (b, d) = (8, 16);
        let z = random_features(1, b, d);
        let t = random_features(2, b, d);
        let c = random_features(3, b, d);
        let w: Vec<f64> = random_features(4, b, b).iter().map(|v| 0.5 + 0.5 * v).collect();
        let loss = |z: &[f64]| {
            let mz = cosine_matrix(z, b, d).unwrap();
            let mt = cosine_matrix(&t, b, d).unwrap();
            let mc = cosine_matrix(&c, b, d).unwrap();
            (corr_loss(&mz, &mt).unwrap(), cate_loss(&mz, &mc, &w).unwrap())
        };
        let mz = cosine_matrix(&z, b, d).unwrap();
        let mt = cosine_matrix(&t, b, d).unwrap();
        let mc = cosine_matrix(&c, b, d).unwrap();
        let dm_corr = weighted_sq_diff_grad(mz.values(), mt.values(), None, b, 1.0);
        let dm_cate = weighted_sq_diff_grad(mz.values(), mc.values(), Some(&w), b, 1.0);
        let g_corr = cosine_matrix_backward(&z, mz.values(), &dm_corr, b, d);
        let g_cate = cosine_matrix_backward(&z, mz.values(), &dm_cate, b, d);
        let h = 1e-5;
        for k in 0..z.len() {
            let mut zp = z.clone();
            zp[k] += h;
            let mut zm = z.clone();
            zm[k] -= h;
            let (cp, kp) = loss(&zp);
            let (cm, km) = loss(&zm);
            for (fd, an) in [((cp - cm) / (2.0 * h), g_corr[k]), ((kp - km) / (2.0 * h), g_cate[k])] {
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel <= 1e-4 || (fd - an).abs() < 1e-10, "k={k} fd={fd} an={an}");
            }
        }
    }

    proptest! {
        #[test]
        fn cosine_matrix_is_scale_invariant_and_symmetric(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 2..6),
            scales in prop::collection::vec(0.01f64..100.0, 6),
        ) {
            prop_assume!(rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
            let b = rows.len();
            let flat: Vec<f64> = rows.concat();
            let scaled: Vec<f64> = rows.iter().enumerate()
                .flat_map(|(i, r)| r.iter().map(|v| v * scales[i]).collect::<Vec<_>>())
                .collect();
            let m = cosine_matrix(&flat, b, 4).unwrap();
            let ms = cosine_matrix(&scaled, b, 4).unwrap();
            for i in 0..b {
                prop_assert!((m.get(i, i) - 1.0).abs() <= 1e-9);
                for j in 0..b {
                    prop_assert!((m.get(i, j) - m.get(j, i)).abs() <= 1e-9);
                    prop_assert!((m.get(i, j) - ms.get(i, j)).abs() <= 1e-9);
                    prop_assert!(m.get(i, j).abs() <= 1.0);
                }
            }
        }

        #[test]
        fn losses_are_bounded_and_symmetric(
            a in prop::collection::vec(-1.0f64..1.0, 9),
            c in prop::collection::vec(-1.0f64..1.0, 9),
            w in prop::collection::vec(0.0f64..1.0, 9),
        ) {
            let ma = sim(3, &a);
            let mc = sim(3, &c);
            let l1 = corr_loss(&ma, &mc).unwrap();
            let l2 = corr_loss(&mc, &ma).unwrap();
            prop_assert!((l1 - l2).abs() < 1e-15);
            prop_assert!((0.0..=4.0).contains(&l1));
            let lk = cate_loss(&ma, &mc, &w).unwrap();
            prop_assert!((0.0..=4.0).contains(&lk));
            let tr = |v: &[f64]| (0..9).map(|k| v[(k % 3) * 3 + k / 3]).collect::<Vec<_>>();
            let lt = cate_loss(&sim(3, &tr(&a)), &sim(3, &tr(&c)), &tr(&w)).unwrap();
            prop_assert!((lk - lt).abs() < 1e-15);
        }

        #[test]
        fn typicality_weight_is_monotone(a in -3.0f64..3.0, delta in 1e-6f64..2.0) {
            let stats = TypicalityStats { mu: 0.2, sigma: 0.5, sample_count: 2 };
            prop_assert!(typicality_weight(a + delta, &stats).unwrap() > typicality_weight(a, &stats).unwrap());
        }
    }
}
