use std::collections::{BTreeMap, BTreeSet};

use canopy_fewshot::augment::{augment_pixels, expand_tiles, AugmentOp, AugmentationSpec};
use canopy_fewshot::classify::{classify_avg, classify_knn, evaluate, Method, Prediction, SimilarityRecord};
use canopy_fewshot::dataset::{cap_candidates, normalize_tile, DatasetManifest, Role, Tile};
use canopy_fewshot::explain::{correctness, xai_metrics, ExplanationRecord, SelectedSupport};
use canopy_fewshot::fewshot::{build_fold_plan, ArmResult, FoldMetrics, FoldOutcome};
use canopy_fewshot::pairs::{build_pair_dataset, enumerate_dissimilar_pairs, enumerate_similar_pairs};
use image::{Rgb, RgbImage};
use proptest::prelude::*;

fn image(w: u32, h: u32, salt: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 + salt) as u8, (y * 13 + salt) as u8, ((x ^ y) + salt) as u8]))
}

fn manifest(sizes: &[usize], role: Role) -> DatasetManifest {
    let entries = sizes.iter().enumerate().flat_map(|(c, &n)| {
        (0..n).map(move |i| {
            let tile = Tile::new(format!("c{c}_{i:02}"), image(8, 8, (c * 31 + i) as u32), Some(format!("k{c}")), 6.0);
            (tile, role)
        })
    });
    DatasetManifest::new(entries).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalization_is_idempotent(w in 1u32..60, h in 1u32..60, gsd in 2.0f64..12.0, size in 8u32..40) {
        let tile = Tile::new("t", image(w, h, 3), None, gsd);
        let once = normalize_tile(&tile, 6.0, size).unwrap();
        let twice = normalize_tile(&once, 6.0, size).unwrap();
        prop_assert_eq!(once.pixels, twice.pixels);
    }

    #[test]
    fn padding_keeps_content(w in 1u32..32, h in 1u32..32, extra_w in 0u32..16, extra_h in 0u32..16) {
        let src = image(w, h, 9);
        let size = w.max(h) + extra_w.max(extra_h);
        let out = normalize_tile(&Tile::new("t", src.clone(), None, 6.0), 6.0, size).unwrap();
        let (left, top) = ((size - w) / 2, (size - h) / 2);
        for y in 0..h {
            for x in 0..w {
                prop_assert_eq!(out.pixels.get_pixel(x + left, y + top), src.get_pixel(x, y));
            }
        }
    }

    #[test]
    fn capping_is_pure(sizes in prop::collection::vec(1usize..20, 1..5), cap in 1usize..15, seed in any::<u64>()) {
        let m = manifest(&sizes, Role::BaseTrain);
        let a = cap_candidates(&m, cap, seed).unwrap();
        let b = cap_candidates(&m, cap, seed).unwrap();
        prop_assert_eq!(a.fingerprint(), b.fingerprint());
        for (class, ids) in a.class_roster(Role::BaseTrain) {
            let available = m.class_roster(Role::BaseTrain)[&class].len();
            prop_assert_eq!(ids.len(), available.min(cap));
        }
    }

    #[test]
    fn pair_enumeration_matches_brute_force(sizes in prop::collection::vec(1usize..8, 2..5), seed in any::<u64>()) {
        let m = manifest(&sizes, Role::BaseTrain);
        let tiles = m.tiles();
        let (mut same, mut cross) = (0, 0);
        for i in 0..tiles.len() {
            for j in i + 1..tiles.len() {
                if tiles[i].label == tiles[j].label { same += 1 } else { cross += 1 }
            }
        }
        let n = tiles.len();
        prop_assert_eq!(same + cross, n * (n - 1) / 2);
        prop_assert_eq!(enumerate_similar_pairs(&m).len(), same);
        prop_assert_eq!(enumerate_dissimilar_pairs(&m).unwrap().len(), cross);

        let per_side = same.min(cross).max(1).min(same).min(cross);
        if per_side > 0 {
            let d = build_pair_dataset(&m, per_side, seed).unwrap();
            prop_assert_eq!(d.counts.similar, d.counts.dissimilar);
        }
    }

    #[test]
    fn augmented_tiles_keep_labels(n in 1usize..4, variants in 0usize..7, seed in any::<u64>()) {
        let m = manifest(&[n, n], Role::BaseTrain);
        let originals: Vec<&Tile> = m.tiles().iter().collect();
        for t in expand_tiles(&originals, variants, seed).unwrap() {
            let source = originals.iter().find(|o| t.id.starts_with(o.id.as_str())).unwrap();
            prop_assert_eq!(&t.label, &source.label);
        }
    }

    #[test]
    fn flips_are_involutions(w in 1u32..24, h in 1u32..24, salt in 0u32..200) {
        let img = image(w, h, salt);
        for op in [AugmentOp::Hflip, AugmentOp::Vflip] {
            let spec = AugmentationSpec::new(op);
            let back = augment_pixels(&augment_pixels(&img, &spec).unwrap(), &spec).unwrap();
            prop_assert_eq!(&back, &img);
        }
    }

    #[test]
    fn folds_never_leak(sizes in prop::collection::vec(4usize..12, 1..5), k in 1usize..4, n_folds in 1usize..5, seed in any::<u64>()) {
        let m = manifest(&sizes, Role::Fewshot);
        if let Ok(plan) = build_fold_plan(&m, k, n_folds, seed) {
            for fold in &plan.folds {
                let support: BTreeSet<&str> = fold.support.ids().collect();
                prop_assert!(fold.test.iter().all(|t| !support.contains(t.as_str())));
                prop_assert_eq!(support.len() + fold.test.len(), m.len());
            }
        }
    }

    #[test]
    fn fold_means_match_a_direct_pass(f1s in prop::collection::vec(0.0f64..1.0, 1..8)) {
        let folds: Vec<FoldOutcome> = f1s
            .iter()
            .enumerate()
            .map(|(i, &f1)| FoldOutcome { fold: i, n_test: 5, metrics: FoldMetrics { f1, accuracy: 1.0 - f1, ..FoldMetrics::default() } })
            .collect();
        let arm = ArmResult::from_folds(folds);
        let mean = f1s.iter().sum::<f64>() / f1s.len() as f64;
        let var = f1s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / f1s.len() as f64;
        prop_assert!((arm.mean.f1 - mean).abs() < 1e-12);
        prop_assert!((arm.mean.accuracy - (1.0 - mean)).abs() < 1e-12);
        prop_assert!((arm.std.f1 - var.sqrt()).abs() < 1e-9);
    }
}

// Classification -------------------------------------------------------------

/// Scores on a 1/64 grid so uniform affine maps with dyadic coefficients
/// stay exact.
fn score_table() -> impl Strategy<Value = Vec<SimilarityRecord>> {
    (2usize..6, 1usize..4).prop_flat_map(|(classes, per_class)| {
        prop::collection::vec(0u32..=64, classes * per_class).prop_map(move |grid| {
            grid.iter()
                .enumerate()
                .map(|(i, &g)| SimilarityRecord {
                    query_id: "q".into(),
                    support_id: format!("c{}_s{}", i / per_class, i % per_class),
                    support_class: format!("c{}", i / per_class),
                    score: g as f64 / 64.0,
                })
                .collect()
        })
    })
}

fn mapped(records: &[SimilarityRecord], f: impl Fn(f64) -> f64) -> Vec<SimilarityRecord> {
    records.iter().map(|r| SimilarityRecord { score: f(r.score), ..r.clone() }).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn knn_depends_only_on_ranks(records in score_table(), k_pick in 0usize..100) {
        let k = 1 + k_pick % records.len();
        let base = classify_knn(&records, k).unwrap().predicted_class;
        for f in [|x: f64| x.powi(3) + 2.0 * x, |x: f64| (3.0 * x).exp(), |x: f64| x.sqrt()] {
            prop_assert_eq!(&classify_knn(&mapped(&records, f), k).unwrap().predicted_class, &base);
        }
    }

    #[test]
    fn avg_is_affine_invariant(records in score_table(), scale in 0i32..4, shift in -8i32..8) {
        let a = 2f64.powi(scale - 1);
        let b = shift as f64 / 8.0;
        let base = classify_avg(&records).unwrap().predicted_class;
        prop_assert_eq!(classify_avg(&mapped(&records, |x| a * x + b)).unwrap().predicted_class, base);
    }

    #[test]
    fn one_support_per_class_rules_agree(records in score_table()) {
        let mut seen = BTreeSet::new();
        let one: Vec<SimilarityRecord> = records.into_iter().filter(|r| seen.insert(r.support_class.clone())).collect();
        prop_assert_eq!(classify_avg(&one).unwrap().predicted_class, classify_knn(&one, 1).unwrap().predicted_class);
    }

    #[test]
    fn evaluate_matches_a_confusion_oracle(pairs in prop::collection::vec((0usize..6, 0usize..6), 1..100)) {
        let predictions: Vec<Prediction> = pairs
            .iter()
            .enumerate()
            .map(|(i, (t, p))| Prediction {
                query_id: format!("q{i}"),
                predicted_class: format!("c{p}"),
                true_class: Some(format!("c{t}")),
                method: Method::Avg,
                knn_k: None,
                class_aggregates: BTreeMap::new(),
            })
            .collect();
        let report = evaluate(&predictions).unwrap();
        let labels: BTreeSet<usize> = pairs.iter().flat_map(|&(t, p)| [t, p]).collect();
        let mut f1_sum = 0.0;
        for &c in &labels {
            let tp = pairs.iter().filter(|&&(t, p)| t == c && p == c).count() as f64;
            let predicted = pairs.iter().filter(|&&(_, p)| p == c).count() as f64;
            let actual = pairs.iter().filter(|&&(t, _)| t == c).count() as f64;
            let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let recall = if actual > 0.0 { tp / actual } else { 0.0 };
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            let got = report.per_class[&format!("c{c}")];
            prop_assert!((got.precision - precision).abs() < 1e-12);
            prop_assert!((got.recall - recall).abs() < 1e-12);
            prop_assert!((got.f1 - f1).abs() < 1e-12);
            prop_assert_eq!(got.support, actual as usize);
            f1_sum += f1;
        }
        prop_assert!((report.macro_avg.f1 - f1_sum / labels.len() as f64).abs() < 1e-12);
        let correct = pairs.iter().filter(|(t, p)| t == p).count() as f64;
        prop_assert!((report.weighted_accuracy - correct / pairs.len() as f64).abs() < 1e-12);
        let total: usize = report.confusion.iter().flatten().sum();
        prop_assert_eq!(total, pairs.len());
    }
}

// Explanation metrics ---------------------------------------------------------

fn explanations() -> impl Strategy<Value = Vec<ExplanationRecord>> {
    (1usize..5).prop_flat_map(|k| {
        prop::collection::vec((prop::collection::vec((0usize..8, 0usize..3), k), 0usize..3, 0usize..3), 1..30).prop_map(
            |rows| {
                rows.into_iter()
                    .enumerate()
                    .map(|(q, (sel, pred, truth))| ExplanationRecord {
                        query_id: format!("q{q}"),
                        selected: sel
                            .into_iter()
                            .map(|(s, c)| SelectedSupport { support_id: format!("s{s}"), support_class: format!("c{c}"), score: 0.5 })
                            .collect(),
                        predicted_class: format!("c{pred}"),
                        true_class: Some(format!("c{truth}")),
                    })
                    .collect()
            },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_stay_in_the_unit_interval(expls in explanations(), cty in prop::collection::vec(0.0f64..=1.0, 30)) {
        let report = xai_metrics(&expls, Some(&cty[..expls.len()]), 8).unwrap();
        prop_assert!((0.0..=1.0).contains(&report.c_cor));
        prop_assert!((0.0..=1.0).contains(&report.c_cty.unwrap()));
    }

    #[test]
    fn correctness_ignores_list_order(expls in explanations(), rotate in 0usize..30) {
        let mut shuffled = expls.clone();
        let n = shuffled.len();
        shuffled.rotate_left(rotate % n);
        shuffled.reverse();
        prop_assert!((correctness(&expls).unwrap() - correctness(&shuffled).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn perfect_explanations_score_one(expls in explanations()) {
        let perfect: Vec<ExplanationRecord> = expls
            .into_iter()
            .map(|mut e| {
                e.true_class = Some(e.predicted_class.clone());
                for s in &mut e.selected {
                    s.support_class = e.predicted_class.clone();
                }
                e
            })
            .collect();
        prop_assert_eq!(correctness(&perfect).unwrap(), 1.0);
    }
}
