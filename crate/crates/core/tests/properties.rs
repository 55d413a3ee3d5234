use std::collections::HashSet;
use std::path::Path;

use kcm_retrieval::cbirnet::{fuse_features, FusionConfig};
use kcm_retrieval::ccnet::{compute_cam, compute_kcm, ClassScores, FeatureMap, Kcm, Map2d};
use kcm_retrieval::composition_data::{generate_split, Split, NUM_CLASSES};
use kcm_retrieval::evaluation::{evaluate_vectors, build_anchor_groups, score_anchor};
use kcm_retrieval::retrieval::{EntryMeta, Fingerprint, IndexEntry, RetrievalIndex};
use kcm_retrieval::shot_miner::{
    build_triplets, filter_shots, group_shots, select_frame_indices, split_by_film, ShotRecord, ShotType,
};
use kcm_retrieval::trainer::{cosine_embedding_loss, cosine_embedding_loss_grad, Target};
use proptest::prelude::*;

fn shot_type() -> impl Strategy<Value = ShotType> {
    prop_oneof![
        Just(ShotType::ExtremeLong),
        Just(ShotType::Long),
        Just(ShotType::Medium),
        Just(ShotType::CloseUp),
        Just(ShotType::Intertitle),
        Just(ShotType::NotAvailable),
    ]
}

fn records() -> impl Strategy<Value = Vec<ShotRecord>> {
    prop::collection::vec((0u8..4, 0u64..200, 0u64..120, shot_type()), 1..12).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (film, start, len, t))| ShotRecord {
                film_id: format!("film{film}"),
                shot_id: format!("shot{i}"),
                start_frame: start,
                end_frame: start + len,
                shot_type: t,
                overscan: None,
            })
            .collect()
    })
}

fn vec_pair(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-3.0f64..3.0, n), prop::collection::vec(-3.0f64..3.0, n))
        .prop_filter("nonzero", |(a, b)| a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3))
}

fn feature_map(c: usize, h: usize, w: usize) -> impl Strategy<Value = FeatureMap> {
    prop::collection::vec(-5.0f64..5.0, c * h * w).prop_map(move |v| FeatureMap::new(c, h, w, v, "p").unwrap())
}

fn kcm(h: usize, w: usize) -> impl Strategy<Value = Kcm> {
    prop::collection::vec(0.0f64..=1.0, h * w).prop_map(move |v| Kcm::new(h, w, v, "p").unwrap())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn selected_frames_are_capped_and_increasing(recs in records()) {
        for r in &recs {
            let idx = select_frame_indices(r);
            prop_assert!(!idx.is_empty() && idx.len() <= 7);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(idx.iter().all(|i| (r.start_frame..=r.end_frame).contains(i)));
        }
    }

    #[test]
    fn filter_is_idempotent(recs in records()) {
        let once = filter_shots(&recs);
        prop_assert_eq!(filter_shots(&once), once.clone());
        prop_assert!(once.iter().all(|r| r.shot_type.is_usable()));
    }

    #[test]
    fn triplets_satisfy_invariants(recs in records(), seed in any::<u64>()) {
        let groups = group_shots(&filter_shots(&recs), Path::new("p"));
        if let Ok(m) = build_triplets(&groups, seed) {
            for t in &m.triplets {
                prop_assert!(t.check().is_ok());
            }
        } else {
            prop_assert!(groups.len() < 2);
        }
    }

    #[test]
    fn film_split_is_disjoint(recs in records(), frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let groups = group_shots(&recs, Path::new("p"));
        let (train, test) = split_by_film(&groups, frac, seed).unwrap();
        let a: HashSet<_> = train.iter().map(|g| g.film_id.clone()).collect();
        let b: HashSet<_> = test.iter().map(|g| g.film_id.clone()).collect();
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(train.len() + test.len(), groups.len());
    }

    #[test]
    fn loss_is_scale_invariant_and_bounded(
        (a, b) in vec_pair(6),
        alpha in 0.01f64..50.0,
        beta in 0.01f64..50.0,
        margin in 0.0f64..1.0,
    ) {
        let sa: Vec<f64> = a.iter().map(|v| v * alpha).collect();
        let sb: Vec<f64> = b.iter().map(|v| v * beta).collect();
        for t in [Target::Similar, Target::Dissimilar] {
            let l = cosine_embedding_loss(&a, &b, t, margin).unwrap();
            prop_assert!((0.0..=2.0).contains(&l));
            prop_assert!((cosine_embedding_loss(&sa, &sb, t, margin).unwrap() - l).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences((a, b) in vec_pair(8)) {
        for t in [Target::Similar, Target::Dissimilar] {
            let (_, ga, gb) = cosine_embedding_loss_grad(&a, &b, t, 0.0).unwrap();
            let cos = 1.0 - cosine_embedding_loss(&a, &b, Target::Similar, 0.0).unwrap();
            if t == Target::Dissimilar && cos.abs() < 1e-3 {
                continue;
            }
            for (x, g, other, first) in [(&a, &ga, &b, true), (&b, &gb, &a, false)] {
                for i in 0..8 {
                    let h = 1e-6;
                    let (mut up, mut down) = (x.clone(), x.clone());
                    up[i] += h;
                    down[i] -= h;
                    let f = |v: &Vec<f64>| if first {
                        cosine_embedding_loss(v, other, t, 0.0).unwrap()
                    } else {
                        cosine_embedding_loss(other, v, t, 0.0).unwrap()
                    };
                    let fd = (f(&up) - f(&down)) / (2.0 * h);
                    prop_assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()).max(1e-2), "{} vs {}", fd, g[i]);
                }
            }
        }
    }

    #[test]
    fn kcm_is_normalized_and_shift_invariant(
        cams in prop::collection::vec(prop::collection::vec(-4.0f64..4.0, 12), NUM_CLASSES),
        logits in prop::collection::vec(-6.0f64..6.0, NUM_CLASSES),
        shift in -100.0f64..100.0,
    ) {
        let maps: Vec<Map2d> = cams.into_iter().map(|v| Map2d { height: 3, width: 4, values: v }).collect();
        let k = compute_kcm(&maps, &ClassScores::from_logits(logits.clone())).unwrap();
        let max = k.values.iter().copied().fold(f64::MIN, f64::max);
        let min = k.values.iter().copied().fold(f64::MAX, f64::min);
        prop_assert!(k.values.iter().all(|v| *v == 0.5) || (min == 0.0 && max == 1.0));
        let shifted = compute_kcm(&maps, &ClassScores::from_logits(logits.iter().map(|l| l + shift).collect())).unwrap();
        for (x, y) in k.values.iter().zip(&shifted.values) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn cam_is_linear_in_weights(
        feat in feature_map(3, 2, 2),
        w1 in prop::collection::vec(-2.0f64..2.0, 3),
        w2 in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
        let weights = vec![w1, w2, sum];
        let (a, b, ab) = (
            compute_cam(&feat, &weights, 0).unwrap(),
            compute_cam(&feat, &weights, 1).unwrap(),
            compute_cam(&feat, &weights, 2).unwrap(),
        );
        for i in 0..4 {
            prop_assert!(close(ab.values[i], a.values[i] + b.values[i], 1e-5));
            let naive: f64 = (0..3).map(|c| weights[0][c] * feat.plane(c)[i]).sum();
            prop_assert!(close(a.values[i], naive, 1e-12));
        }
    }

    #[test]
    fn fusion_is_linear_in_features(
        f1 in feature_map(2, 3, 3),
        f2 in feature_map(2, 3, 3),
        mask in kcm(3, 3),
        l in 0.0f64..=1.0,
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let cfg = FusionConfig::new(l).unwrap();
        let mix: Vec<f64> = f1.values.iter().zip(&f2.values).map(|(x, y)| a * x + b * y).collect();
        let mixed = fuse_features(&FeatureMap::new(2, 3, 3, mix, "p").unwrap(), &mask, &cfg).unwrap();
        let (g1, g2) = (fuse_features(&f1, &mask, &cfg).unwrap(), fuse_features(&f2, &mask, &cfg).unwrap());
        for i in 0..mixed.values.len() {
            prop_assert!(close(mixed.values[i], a * g1.values[i] + b * g2.values[i], 1e-5));
        }
    }

    #[test]
    fn fusion_approaches_mask_monotonically(feat in feature_map(2, 2, 3), mask in kcm(2, 3), l1 in 0.0f64..=1.0, l2 in 0.0f64..=1.0) {
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let lo_f = fuse_features(&feat, &mask, &FusionConfig::new(lo).unwrap()).unwrap();
        let hi_f = fuse_features(&feat, &mask, &FusionConfig::new(hi).unwrap()).unwrap();
        for i in 0..feat.values.len() {
            let target = feat.values[i] * mask.values[i % 6];
            prop_assert!((hi_f.values[i] - target).abs() <= (lo_f.values[i] - target).abs() + 1e-12);
        }
    }

    #[test]
    fn score_is_rank_invariant(s in prop::collection::vec(-1.0f64..1.0, 4), scale in 0.1f64..10.0, offset in -5.0f64..5.0) {
        let base = score_anchor([s[0], s[1]], [s[2], s[3]]);
        let f = |x: f64| (scale * x + offset).exp();
        prop_assert_eq!(score_anchor([f(s[0]), f(s[1])], [f(s[2]), f(s[3])]), base);
        prop_assert!(base <= 4);
    }

    #[test]
    fn ranking_survives_query_scaling(
        vectors in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 2..12),
        query in prop::collection::vec(-1.0f32..1.0, 4),
        scale in 0.01f32..100.0,
        k in 1usize..15,
    ) {
        prop_assume!(query.iter().any(|v| v.abs() > 1e-3));
        prop_assume!(vectors.iter().all(|v| v.iter().any(|x| x.abs() > 1e-3)));
        let entries = vectors.into_iter().enumerate().map(|(i, v)| IndexEntry {
            meta: EntryMeta { source_id: format!("e{i:02}"), film_id: "f".into(), shot_id: "s".into(), frame_index: i as u64, path: None, crop: None },
            vector: v,
        }).collect::<Vec<_>>();
        let n = entries.len();
        let idx = RetrievalIndex::new(entries, Fingerprint { checkpoint_sha256: "p".into(), l_kcm: 0.5, dim: 4 }).unwrap();
        let hits = idx.query_vector(&query, k).unwrap();
        prop_assert_eq!(hits.len(), k.min(n));
        prop_assert!(hits.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        let scaled: Vec<f32> = query.iter().map(|v| v * scale).collect();
        let again = idx.query_vector(&scaled, k).unwrap();
        let ids = |h: &[kcm_retrieval::retrieval::SearchHit]| h.iter().map(|x| x.source_id.clone()).collect::<Vec<_>>();
        let (a, b) = (ids(&hits), ids(&again));
        // Scaling can perturb cosines in the last f32 bit, which only matters for near ties.
        let near_ties = hits.windows(2).any(|w| (w[0].similarity - w[1].similarity).abs() < 1e-6);
        prop_assert!(a == b || near_ties);
    }

    #[test]
    fn eval_report_is_bounded(seed in any::<u64>(), dims in prop::collection::vec(-1.0f32..1.0, 3 * 18)) {
        let recs: Vec<ShotRecord> = (0..3).map(|i| ShotRecord {
            film_id: "f".into(), shot_id: format!("s{i}"), start_frame: 0, end_frame: 29,
            shot_type: ShotType::Medium, overscan: None,
        }).collect();
        let groups = group_shots(&recs, Path::new("p"));
        prop_assume!(dims.chunks(3).all(|c| c.iter().any(|v| v.abs() > 1e-3)));
        let vectors = groups.iter().flat_map(|g| &g.frames).zip(dims.chunks(3))
            .map(|(f, v)| (f.source_id(), v.to_vec())).collect();
        let anchors = build_anchor_groups(&groups, seed).unwrap();
        let r = evaluate_vectors(&anchors, &vectors, seed, 0.0).unwrap();
        prop_assert!((0.0..=4.0).contains(&r.score));
        prop_assert!((-1.0..=1.0).contains(&r.avg_pos_similarity));
        prop_assert!((-1.0..=1.0).contains(&r.avg_neg_similarity));
        prop_assert_eq!(r, evaluate_vectors(&anchors, &vectors, seed, 0.0).unwrap());
    }
}

#[test]
fn synthetic_splits_are_disjoint_and_balanced() {
    let train = generate_split(3, 1, Split::Train).unwrap();
    let test = generate_split(2, 2, Split::Test).unwrap();
    let ids: HashSet<_> = train.iter().map(|s| s.image.source_id().to_string()).collect();
    assert!(test.iter().all(|s| !ids.contains(s.image.source_id())));
    let mut counts = [0; NUM_CLASSES];
    for s in &train {
        counts[s.label.primary().index()] += 1;
    }
    assert_eq!(counts, [3; NUM_CLASSES]);
}
