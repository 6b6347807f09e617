//! Independent re-implementations checked against the library.

use promptclip_core::datagen::{
    dedup_decision, mask_stats, pixel_bbox, qc_required_elements, sample_training_prompt, synthetic::synthetic_benchmark,
    KeywordRegistry, PromptSampler,
};
use promptclip_core::encoders::{tokenize, EncoderConfig};
use promptclip_core::mask::Mask;
use promptclip_core::objective::{nce_loss_from_logits, similarity_logits, LogitScale};
use promptclip_core::prompt::{FourierPositionCodec, PromptKind, SpatialPrompt};
use promptclip_core::{rng_from_seed, Matrix};
use rand::Rng;

/// Eq. 2 written out with explicit sums and exponentials.
fn brute_force_loss(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut i2t = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for k in 0..n {
            denom += (m.get(i, k)).exp();
        }
        i2t -= (m.get(i, i).exp() / denom).ln();
    }
    let mut t2i = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for k in 0..n {
            denom += (m.get(k, i)).exp();
        }
        t2i -= (m.get(i, i).exp() / denom).ln();
    }
    0.5 * (i2t / n as f64 + t2i / n as f64)
}

#[test]
fn loss_matches_brute_force() {
    let mut rng = rng_from_seed(1);
    for n in [2, 4, 6] {
        for _ in 0..5 {
            let m = Matrix::randn(n, n, 3.0, &mut rng);
            let l = nce_loss_from_logits(&m).unwrap();
            assert!((l - brute_force_loss(&m)).abs() < 1e-10, "N={n}");
            assert!(l >= 0.0);
        }
        let uniform = Matrix::filled(n, n, 0.37);
        assert!((nce_loss_from_logits(&uniform).unwrap() - (n as f64).ln()).abs() <= 1e-12);
    }
}

#[test]
fn loss_permutation_and_transpose() {
    let mut rng = rng_from_seed(2);
    let m = Matrix::randn(5, 5, 2.0, &mut rng);
    let perm = [3, 0, 4, 1, 2];
    let mut p = Matrix::zeros(5, 5);
    for i in 0..5 {
        for j in 0..5 {
            p.set(i, j, m.get(perm[i], perm[j]));
        }
    }
    let a = nce_loss_from_logits(&m).unwrap();
    assert!((a - nce_loss_from_logits(&p).unwrap()).abs() < 1e-9);
    let i2t = promptclip_core::objective::loss_image_to_text(&m).unwrap();
    let t2i_t = promptclip_core::objective::loss_text_to_image(&m.transpose()).unwrap();
    assert_eq!(i2t, t2i_t);
}

#[test]
fn similarity_matches_double_loop() {
    let mut rng = rng_from_seed(3);
    let unit = |m: Matrix| promptclip_core::objective::normalize_rows(&m).unwrap();
    let a = unit(Matrix::randn(4, 6, 1.0, &mut rng));
    let b = unit(Matrix::randn(4, 6, 1.0, &mut rng));
    let s = similarity_logits(&a, &b, &LogitScale::new(0.7)).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let mut d = 0.0;
            for k in 0..6 {
                d += a.get(i, k) * b.get(j, k);
            }
            assert!((s.logits.get(i, j) - 0.7f64.exp() * d).abs() < 1e-12);
        }
    }
}

#[test]
fn tokenizer_matches_standalone_hash() {
    let cfg = EncoderConfig::default();
    let fnv = |w: &str| {
        let mut h: u64 = 14695981039346656037;
        for b in w.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(1099511628211);
        }
        h
    };
    let t = tokenize("left kidney mass", &cfg).unwrap();
    let expect: Vec<u32> = ["left", "kidney", "mass"].iter().map(|w| (1 + fnv(w) % 4095) as u32).collect();
    assert_eq!(t.valid_ids(), expect.as_slice());
}

#[test]
fn fourier_codec_matches_formula() {
    let codec = FourierPositionCodec::new(16, 2.0, &mut rng_from_seed(4));
    let g = &codec.frequencies;
    let (x, y) = (0.31, 0.77);
    let pe = codec.encode(x, y);
    for j in 0..8 {
        let a = 2.0 * std::f64::consts::PI * (g.get(0, j) * x + g.get(1, j) * y);
        assert!((pe[j] - a.sin()).abs() < 1e-12);
        assert!((pe[8 + j] - a.cos()).abs() < 1e-12);
    }
}

#[test]
fn fourier_codec_separates_random_points() {
    let codec = FourierPositionCodec::new(128, 2.0, &mut rng_from_seed(5));
    let mut rng = rng_from_seed(6);
    let pts: Vec<(f64, f64)> = (0..100).map(|_| (rng.random(), rng.random())).collect();
    let enc: Vec<Vec<f64>> = pts.iter().map(|&(x, y)| codec.encode(x, y)).collect();
    let mut min = f64::INFINITY;
    for i in 0..enc.len() {
        for j in i + 1..enc.len() {
            let d: f64 = enc[i].iter().zip(&enc[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            min = min.min(d.sqrt());
        }
    }
    assert!(min > 0.0);
}

#[test]
fn sampler_frequencies() {
    let mask = Mask::from_fn(64, 64, |x, y| (10..30).contains(&x) && (20..44).contains(&y));
    let mut rng = rng_from_seed(2025);
    let mut counts = [0usize; 5];
    for _ in 0..10_000 {
        let p = sample_training_prompt(&mask, &mut rng).unwrap();
        let idx = PromptKind::ALL.iter().position(|k| *k == p.kind()).unwrap();
        counts[idx] += 1;
    }
    for (kind, expected) in PromptSampler::default().expected_frequencies() {
        let idx = PromptKind::ALL.iter().position(|k| *k == kind).unwrap();
        let got = counts[idx] as f64 / 10_000.0;
        assert!((got - expected).abs() <= 0.02, "{kind:?}: {got} vs {expected}");
    }
}

#[test]
fn sampled_points_lie_in_mask() {
    let mask = Mask::from_fn(32, 32, |x, y| (x + y) % 3 == 0 && x > 5);
    let sampler = PromptSampler { none_prob: 0.0, kind_probs: [1.0, 0.0, 0.0, 0.0], ..Default::default() };
    let mut rng = rng_from_seed(8);
    for _ in 0..1000 {
        match sampler.sample(&mask, &mut rng).unwrap() {
            SpatialPrompt::Points(pts) => {
                assert!((1..=3).contains(&pts.len()));
                assert!(pts.iter().all(|p| mask.contains_normalized(p.x, p.y)));
            }
            other => panic!("unexpected prompt {other:?}"),
        }
    }
}

#[test]
fn dedup_max_similarity_matches_exhaustive_loop() {
    let mut rng = rng_from_seed(9);
    let corpus: Vec<Vec<f64>> = (0..50).map(|_| Matrix::randn(1, 16, 1.0, &mut rng).into_vec()).collect();
    let cand = Matrix::randn(1, 16, 1.0, &mut rng).into_vec();
    let d = dedup_decision(&cand, &corpus).unwrap();
    let mut best = -1.0f64;
    for v in &corpus {
        let dot: f64 = cand.iter().zip(v).map(|(a, b)| a * b).sum();
        let na: f64 = cand.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        best = best.max(dot / (na * nb));
    }
    assert!((d.max_similarity - best).abs() < 1e-6);
    assert_eq!(d.accepted, best <= 0.9);
}

#[test]
fn mask_bbox_matches_scan() {
    let mut rng = rng_from_seed(10);
    for _ in 0..20 {
        let (cx, cy, r) = (rng.random_range(5..27) as i64, rng.random_range(5..27) as i64, rng.random_range(2..6) as i64);
        let mask = Mask::from_fn(32, 32, |x, y| {
            let (dx, dy) = (x as i64 - cx, y as i64 - cy);
            dx * dx + 2 * dy * dy <= r * r || (x as i64 == cx + r + 1 && y as i64 == cy)
        });
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..32 {
            for x in 0..32 {
                if mask.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        assert_eq!(pixel_bbox(&mask), Some((x0, y0, x1, y1)));
        let s = mask_stats(&mask).unwrap();
        assert_eq!(s.bbox, [x0 as f64 / 32.0, y0 as f64 / 32.0, (x1 + 1) as f64 / 32.0, (y1 + 1) as f64 / 32.0]);
        assert!(s.bbox[0] <= s.centroid[0] && s.centroid[0] <= s.bbox[2]);
        assert!(s.bbox[1] <= s.centroid[1] && s.centroid[1] <= s.bbox[3]);
        assert!(s.elongation >= 1.0);
    }
}

/// Second implementation of the required-element rule: substring search on
/// space-padded lowercase text with punctuation blanked out.
fn scanner(caption: &str, reg: &KeywordRegistry) -> (bool, bool) {
    let cleaned: String = caption
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' { c } else { ' ' })
        .collect();
    let padded = format!(" {} ", cleaned.split_whitespace().collect::<Vec<_>>().join(" "));
    let has = |list: &[String]| list.iter().any(|k| padded.contains(&format!(" {k} ")));
    (has(&reg.modalities), has(&reg.categories) || has(&reg.locations))
}

#[test]
fn qc_agrees_with_keyword_scanner() {
    let reg = KeywordRegistry::default();
    let words = [
        "the", "CT", "image", "of", "liver", "upper-left", "region", "a", "nice", "picture", "MRI", "kidney,", "shows",
        "x-ray", "blob", "left", "mass.", "computed", "tomography", "scan",
    ];
    let mut rng = rng_from_seed(11);
    for _ in 0..100 {
        let n = rng.random_range(1..9);
        let caption: Vec<&str> = (0..n).map(|_| words[rng.random_range(0..words.len())]).collect();
        let caption = caption.join(" ");
        let report = qc_required_elements(&caption, &reg);
        let (m, c) = scanner(&caption, &reg);
        assert_eq!(report.passed, m && c, "{caption}");
    }
}

#[test]
fn synthetic_record_count_matches_scan() {
    let imgs = synthetic_benchmark(10, 32, 3);
    let total: usize = imgs.iter().map(|i| i.masks.iter().filter(|m| m.count() > 0).count()).sum();
    assert_eq!(total, 20);
}
