use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use histodiff_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use histodiff_core::conditioning::{apply_caption_dropout, tokenize, TokenBatch, Vocabulary, NULL_ID, UNK_ID};
use histodiff_core::corpus::{
    caption, category_names, detect_nuclei, generate_sample, parse_caption, CaptionBuckets, CountBucket, RadiusBucket,
};
use histodiff_core::denoiser::{cross_attention, timestep_embedding};
use histodiff_core::diffusion::{cfg_combine, LatentGrid};
use histodiff_core::metrics::{frechet_distance, gaussian_stats, meteor_lite, recall_at_k};
use histodiff_core::trainer::{ModelDims, Stage, TrainConfig};

fn grid(seed: u64) -> LatentGrid<f64> {
    LatentGrid::random(2, 3, 3, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn guidance_endpoints_are_exact(a in 0u64..1000, b in 0u64..1000) {
        let (c, u) = (grid(a), grid(b + 1000));
        prop_assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c.clone());
        prop_assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
    }

    #[test]
    fn attention_rows_are_convex_combinations(seed in 0u64..1000, n in 1usize..5, m in 1usize..6, dk in 1usize..5) {
        let q: Vec<f64> = rows(seed, n, dk).concat();
        let k: Vec<f64> = rows(seed + 1, m, dk).concat();
        let v = rows(seed + 2, m, 3);
        let out = cross_attention(&q, &k, &v.concat(), n, m, dk, 3).unwrap();
        for i in 0..n {
            for j in 0..3 {
                let lo = v.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
                let hi = v.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out[i * 3 + j] >= lo - 1e-12 && out[i * 3 + j] <= hi + 1e-12);
                if m == 1 {
                    prop_assert!((out[i * 3 + j] - v[0][j]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn timestep_embedding_is_bounded(t in 0usize..=1000, half in 1usize..32) {
        let e = timestep_embedding(t as f64, 2 * half).unwrap();
        prop_assert_eq!(e.len(), 2 * half);
        prop_assert!(e.iter().all(|v| v.abs() <= 1.0));
        prop_assert_eq!(e, timestep_embedding(t as f64, 2 * half).unwrap());
    }

    #[test]
    fn tokenize_is_total(text in "[a-zA-Z ,.]{0,60}", len in 1usize..20) {
        let v = Vocabulary::for_categories(&category_names(4).unwrap()).unwrap();
        let ids = tokenize(&text, &v, len);
        prop_assert_eq!(ids.len(), len);
        prop_assert!(ids.iter().all(|&i| i < v.len()));
        // padding only at the end
        if let Some(first) = ids.iter().position(|&i| i == NULL_ID) {
            prop_assert!(ids[first..].iter().all(|&i| i == NULL_ID));
        }
        prop_assert_eq!(tokenize(&text.to_uppercase(), &v, len), ids.clone());
        let _ = UNK_ID;
    }

    #[test]
    fn dropout_endpoints(seed in 0u64..1000, b in 1usize..8) {
        let t = TokenBatch::new((0..b).map(|i| vec![2 + i % 5, 3, 4]).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (same, dropped) = apply_caption_dropout(&t, 0.0, &mut rng).unwrap();
        prop_assert_eq!(same, t.clone());
        prop_assert!(dropped.iter().all(|d| !d));
        let (nulls, dropped) = apply_caption_dropout(&t, 1.0, &mut rng).unwrap();
        prop_assert!(nulls.ids().iter().all(|&i| i == NULL_ID));
        prop_assert!(dropped.iter().all(|&d| d));
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(seed in 0u64..1000, n in 3usize..20, d in 1usize..6) {
        let r = gaussian_stats(&rows(seed, n, d)).unwrap();
        let s = gaussian_stats(&rows(seed + 7, n + 2, d)).unwrap();
        let (a, b) = (frechet_distance(&r, &s).unwrap(), frechet_distance(&s, &r).unwrap());
        prop_assert!(a >= 0.0 && (a - b).abs() <= 1e-8 * a.max(1.0), "{} vs {}", a, b);
        prop_assert!(frechet_distance(&r, &r).unwrap() <= 1e-8);
        for i in 0..d {
            for j in 0..d {
                prop_assert!((r.cov[(i, j)] - r.cov[(j, i)]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn recall_is_monotone_in_k(seed in 0u64..1000, n in 1usize..15) {
        let g = rows(seed, n, 4);
        let q = rows(seed + 3, n, 4);
        let truth: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % n).collect();
        let mut prev = 0.0;
        for k in 1..=n + 1 {
            let r = recall_at_k(&q, &g, &truth, k).unwrap();
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn meteor_ignores_case(c in "[a-cA-C ]{0,16}", r in "[a-cA-C ]{0,16}") {
        let m = meteor_lite(&c, &r);
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert_eq!(m, meteor_lite(&c.to_lowercase(), &r.to_uppercase()));
    }

    #[test]
    fn captions_round_trip(k in 2usize..=8, cat in 0usize..8, many: bool, large: bool) {
        let names = category_names(k).unwrap();
        let b = CaptionBuckets {
            category: cat % k,
            count: if many { CountBucket::Many } else { CountBucket::Few },
            radius: if large { RadiusBucket::Large } else { RadiusBucket::Small },
        };
        prop_assert_eq!(parse_caption(&caption(&b, &names).unwrap(), &names).unwrap(), b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn nucleus_count_survives_quarter_turns(master in 0u64..1000, id in 0usize..1000) {
        let s = generate_sample(master, id, &category_names(4).unwrap()).unwrap();
        let n = detect_nuclei(&s.image);
        let mut img = s.image.clone();
        for _ in 0..4 {
            img = img.rotate90();
            prop_assert_eq!(detect_nuclei(&img), n);
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_generation() {
    let mut cfg = TrainConfig::new(Stage::Pretrain, 4, 0, 1e-3, 9);
    cfg.model = ModelDims {
        width: 8,
        mid_width: 16,
        groups: 4,
        time_dim: 8,
        time_hidden: 16,
        key_dim: 8,
        text_width: 16,
        max_tokens: 10,
    };
    let names = category_names(4).unwrap();
    let ckpt = Checkpoint::initial(&cfg, &names).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&ckpt, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back, ckpt);
    let prompts = vec![names[0].clone(), "a sarcoma patch with many large nuclei".to_string()];
    let a = ckpt.generate(&prompts, 5, 7.5, 3).unwrap();
    let b = back.generate(&prompts, 5, 7.5, 3).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, ckpt.generate(&prompts, 5, 7.5, 4).unwrap());
}
