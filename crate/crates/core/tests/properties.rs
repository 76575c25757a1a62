//! Property tests across module boundaries.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rmot_core::attack::{pgd_attack, pgd_physical, AttackConfig, AttackKind, Perturbation};
use rmot_core::geometry::BBox;
use rmot_core::metrics::{
    evaluate, read_ground_truth, read_predictions, referent_ground_truth, write_predictions, AttackWindow, FrameRecord,
    GtBox, TrackEntry,
};
use rmot_core::model::{ModelConfig, RmotModel};
use rmot_core::scenegen::{export_scene, gen_query, gen_scene, SceneParams};
use rmot_core::trainer::{brute_force_assignment, hungarian};

fn cost_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(r, c)| prop::collection::vec(prop::collection::vec(0u8..12, c), r))
        .prop_map(|m| m.into_iter().map(|row| row.into_iter().map(|x| x as f64 * 0.25).collect()).collect())
}

/// Ground truth of up to three tracks and noisy predictions with random IDs.
fn tracking_case() -> impl Strategy<Value = (Vec<Vec<GtBox>>, Vec<FrameRecord>)> {
    (1usize..=3, 2usize..=8).prop_flat_map(|(n, len)| {
        let entry = (any::<bool>(), 1u64..6, -0.04f64..0.04);
        prop::collection::vec(prop::collection::vec(entry, n), len).prop_map(move |frames| {
            let mut gt = Vec::new();
            let mut pred = Vec::new();
            for (t, row) in frames.into_iter().enumerate() {
                let mut g = Vec::new();
                let mut p = Vec::new();
                for (k, (keep, id, jitter)) in row.into_iter().enumerate() {
                    let cx = 0.15 + 0.3 * k as f64 + 0.01 * t as f64;
                    g.push(GtBox { id: k as u32, bbox: BBox::new(cx, 0.5, 0.1, 0.1) });
                    if keep {
                        p.push(TrackEntry { track_id: id, bbox: BBox::new(cx + jitter, 0.5, 0.1, 0.1), score: 0.8 });
                    }
                }
                gt.push(g);
                pred.push(p);
            }
            (gt, pred)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hungarian_is_optimal(cost in cost_matrix()) {
        let a = hungarian(&cost).unwrap();
        let b = brute_force_assignment(&cost);
        prop_assert!((a.total_cost - b.total_cost).abs() < 1e-9);
        prop_assert_eq!(a.pairs.len(), cost.len().min(cost[0].len()));
    }

    #[test]
    fn metrics_ignore_track_id_names((gt, pred) in tracking_case(), shift in 1u64..1000) {
        let map: BTreeMap<u64, u64> = (1..6).map(|i| (i, (i * 7919 + shift) % 100_003)).collect();
        let renamed: Vec<FrameRecord> = pred
            .iter()
            .map(|f| f.iter().map(|e| TrackEntry { track_id: map[&e.track_id], ..*e }).collect())
            .collect();
        let w = AttackWindow { start: 1, end: 2, horizon: 2 };
        prop_assert_eq!(evaluate(&gt, &pred, Some(w)), evaluate(&gt, &renamed, Some(w)));
    }

    #[test]
    fn metrics_stay_in_range((gt, pred) in tracking_case()) {
        let r = evaluate(&gt, &pred, Some(AttackWindow { start: 1, end: 2, horizon: 3 }));
        for v in [r.hota, r.assa, r.deta, r.idf1, r.idp, r.idr] {
            prop_assert!((0.0..=100.0 + 1e-9).contains(&v), "{r:?}");
        }
        prop_assert!(r.idsw >= 0.0);
        if let Some(im) = r.idsw_im {
            prop_assert!((0.0..=100.0).contains(&im));
        }
    }
}

#[test]
fn exported_ground_truth_reads_back_as_referents() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..5 {
        let scene = gen_scene(seed, &SceneParams::default()).unwrap();
        let query = gen_query(&scene, seed).unwrap();
        let sub = dir.path().join(format!("s{seed}"));
        export_scene(&scene, &query, &sub).unwrap();
        let (gt, rows) = read_ground_truth(&sub.join("gt.txt")).unwrap();
        assert_eq!(gt, referent_ground_truth(&scene, &query));
        assert_eq!(rows.len(), scene.length * scene.objects.len());
        assert_eq!(std::fs::read_dir(&sub).unwrap().count(), scene.length + 2);
    }
}

#[test]
fn predictions_round_trip() {
    let model = RmotModel::new(ModelConfig::default(), 3).unwrap();
    let scene = gen_scene(4, &SceneParams::default()).unwrap();
    let query = gen_query(&scene, 4).unwrap();
    let record = model.track_sequence(&scene.frames, &query.tokens, 0.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pred.txt");
    write_predictions(&path, &record).unwrap();
    assert_eq!(read_predictions(&path, scene.length).unwrap(), record);
}

/// Short attacks on an untrained model: every attacked frame stays inside
/// the feasible set and the trace is monotone in its running best.
#[test]
fn attacks_stay_feasible() {
    let model = RmotModel::new(ModelConfig::default(), 11).unwrap();
    let scene = gen_scene(9, &SceneParams::default()).unwrap();
    let query = gen_query(&scene, 9).unwrap();
    let cfg = AttackConfig { iters: 4, horizon: 2, ..Default::default() };
    let outcomes = [
        pgd_attack(&model, &scene, &query, &cfg).unwrap(),
        pgd_physical(&model, &scene, &query, AttackKind::Aai, &cfg).unwrap(),
        pgd_physical(&model, &scene, &query, AttackKind::Eai, &cfg).unwrap(),
    ];
    for o in &outcomes {
        let p: &Perturbation = &o.perturbation;
        assert_eq!(o.trace.len(), cfg.iters + 1);
        assert!(o.best_iteration <= cfg.iters);
        let best = o.trace.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(o.trace[o.best_iteration], best);
        let frames = p.apply(&scene.frames).unwrap();
        for (t, f) in frames.iter().enumerate() {
            assert!(f.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            if !p.window().contains(&t) {
                assert_eq!(f, &scene.frames[t]);
            }
        }
        match p.kind {
            AttackKind::Pixel => assert!(p.params.iter().all(|d| d.max_abs() <= cfg.epsilon + 1e-12)),
            AttackKind::Aai => assert!(p.params.iter().all(|b| (0.0..=cfg.blur_max).contains(&b.data()[0]))),
            AttackKind::Eai => assert!(p.params.iter().all(|d| d.max_abs() <= cfg.eai_amplitude + 1e-12)),
            AttackKind::None => unreachable!(),
        }
    }
    assert!(pgd_physical(&model, &scene, &query, AttackKind::Pixel, &cfg).is_err());
}
