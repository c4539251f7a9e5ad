mod common;

use common::cases::{blobs, synthetic_cache};

use std::collections::HashMap;
use std::time::Instant;

use common::tasks::Task;
use crossalign::analysis::tsne::{joint_probabilities, perplexity_search, tsne, TsneConfig};
use crossalign::analysis::{embedding_analysis, emit_figure, nearest_centroid_purity};
use crossalign::data::SynthConfig;
use crossalign::descriptions::PromptKind;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Perplexity of the Gaussian row for bandwidth `sigma`, from the definition.
fn perplexity_at(d: &[f64], sigma: f64) -> f64 {
    let w: Vec<f64> = d.iter().map(|&x| (-x / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = w.iter().sum();
    let h: f64 = w.iter().map(|&x| x / z).filter(|&p| p > 0.0).map(|p| -p * p.log2()).sum();
    h.exp2()
}

/// Plain bisection on σ over a wide bracket.
fn bisect_sigma(d: &[f64], target: f64) -> f64 {
    let (mut lo, mut hi) = (1e-3f64, 1e3f64);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if perplexity_at(d, mid) > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (lo * hi).sqrt()
}

#[test]
fn two_scale_rows_match_the_bisection_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut d: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..1.5)).collect();
    d.extend((0..14).map(|_| rng.random_range(20.0..40.0)));
    let row = perplexity_search(&d, 5.0).unwrap();
    let near: f64 = row.probs[..6].iter().sum();
    assert!(near > 1.0 - near);
    let sigma = bisect_sigma(&d, 5.0);
    assert!((row.sigma - sigma).abs() < 1e-4, "{} vs {sigma}", row.sigma);
}

proptest! {
    #[test]
    fn rows_normalize_and_reach_the_target(d in prop::collection::vec(0.01f64..50.0, 5..40), frac in 0.1f64..0.9) {
        let target = 1.0 + frac * (d.len() as f64 - 1.0);
        let row = perplexity_search(&d, target).unwrap();
        prop_assert!((row.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((row.perplexity.log2() - target.log2()).abs() < 1e-5);
    }

    #[test]
    fn joint_affinities_are_symmetric(seed in any::<u64>(), n in 6usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-5.0..5.0)).collect();
        let p = joint_probabilities(&x, n, 4, 4.0).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((p[i * n + j] - p[j * n + i]).abs() <= 1e-12);
            }
        }
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
    }
}

#[test]
fn tsne_recovers_three_blobs() {
    let start = Instant::now();
    let (x, labels) = blobs(5);
    let cfg = TsneConfig { perplexity: 10.0, seed: 3, ..Default::default() };
    let out = tsne(&x, 60, 16, &cfg).unwrap();
    let purity = nearest_centroid_purity(&out.points(), &labels);
    assert!(purity >= 0.95, "purity {purity}");
    assert!(out.kl_final < out.kl_initial);
    assert_eq!(tsne(&x, 60, 16, &cfg).unwrap().y.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
               out.y.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn synthetic_cache_clusters_after_embedding() {
    let (cache, labels) = synthetic_cache(12, 30);
    let report = embedding_analysis(&cache, &labels, 10, 25, &TsneConfig::default()).unwrap();
    assert_eq!(report.ids.len(), 250);
    assert_eq!(report.labels.iter().collect::<std::collections::BTreeSet<_>>().len(), 10);
    assert!(report.purity > 0.9, "purity {}", report.purity);
    assert!(report.silhouette.unwrap() > 0.0);
    assert!(report.tsne.kl_final < report.tsne.kl_initial);
}

#[test]
fn one_row_per_class_has_no_silhouette() {
    let (cache, labels) = synthetic_cache(12, 3);
    let cfg = TsneConfig { perplexity: 3.0, iterations: 300, ..Default::default() };
    let report = embedding_analysis(&cache, &labels, 12, 1, &cfg).unwrap();
    assert_eq!(report.silhouette, None);
    assert!(report.summary().contains("silhouette=n/a"));
}

#[test]
fn analysis_is_deterministic_and_figures_repeat() {
    let (cache, labels) = synthetic_cache(4, 10);
    let cfg = TsneConfig { perplexity: 8.0, iterations: 300, ..Default::default() };
    let a = embedding_analysis(&cache, &labels, 3, 10, &cfg).unwrap();
    let b = embedding_analysis(&cache, &labels, 3, 10, &cfg).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let (p, q) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
    emit_figure(&a.points(), &a.labels, &p).unwrap();
    emit_figure(&b.points(), &b.labels, &q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    let svg = String::from_utf8(std::fs::read(&p).unwrap()).unwrap();
    let fills: std::collections::BTreeSet<&str> = svg.match_indices("fill=\"#").map(|(i, _)| &svg[i + 6..i + 13]).collect();
    // background plus one per class
    assert_eq!(fills.len(), 4);
    assert!(emit_figure(&a.points(), &a.labels, dir.path().join("missing/x.svg")).is_err());
}

#[test]
fn default_sampling_is_rejected_on_a_small_cache_with_counts() {
    assert_eq!((crossalign::analysis::DEFAULT_CLASSES, crossalign::analysis::DEFAULT_PER_CLASS), (50, 250));
    let task = Task::new(&SynthConfig { per_class: 30, ..Default::default() });
    let cache = task.cache(PromptKind::Long, 16, 0.3);
    let labels: HashMap<String, usize> = task.data.label_pairs().collect();
    let err = embedding_analysis(&cache, &labels, 50, 250, &TsneConfig::default()).unwrap_err();
    assert!(err.to_string().contains("0 of 10"), "{err}");
}
