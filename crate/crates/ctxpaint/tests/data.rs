use std::collections::HashSet;

use ctxpaint::config::RunConfig;
use ctxpaint::data::{
    assign_split, draw_training_sample, filter_cooccurrence, make_toy_dataset, DrawOptions,
    Manifest, MaskKind, MaskPolicy, PairRecord, Split, ToyDataConfig, ViewTransform, MANIFEST_FILE,
};
use ctxpaint_core::rng::{derive_seed, seeded_rng};
use ctxpaint_core::{Seed, TaskKind};
use rand::Rng;

fn toy(n: usize, seed: u64) -> (tempfile::TempDir, Manifest) {
    let dir = tempfile::tempdir().unwrap();
    let m = make_toy_dataset(dir.path(), n, Seed(seed), &ToyDataConfig::default()).unwrap();
    (dir, m)
}

#[test]
fn ref_inpaint_mixture_converges_to_its_weights() {
    let (_dir, m) = toy(12, 3);
    let policy = MaskPolicy::for_task(TaskKind::RefInpaint);
    let opts = DrawOptions::for_side(32);
    let draws = 2000;
    let mut matching = 0;
    for i in 0..draws {
        let s = draw_training_sample(
            &m,
            TaskKind::RefInpaint,
            &policy,
            &opts,
            derive_seed(Seed(11), "mix", i),
        )
        .unwrap();
        if s.mask_kind == MaskKind::Matching {
            matching += 1;
        }
        assert!(s.stitched.mask.split().unwrap().0.is_empty());
    }
    let frac = matching as f64 / draws as f64;
    assert!((frac - 0.25).abs() <= 0.03, "matching share {frac}");
}

#[test]
fn local_sr_patches_stay_in_the_scaled_range() {
    let (_dir, m) = toy(6, 4);
    let opts = DrawOptions::for_side(32);
    let policy = MaskPolicy::for_task(TaskKind::LocalSr);
    let mut seen = HashSet::new();
    for i in 0..300 {
        let s = draw_training_sample(&m, TaskKind::LocalSr, &policy, &opts, Seed(i)).unwrap();
        let side = s.patch_side.unwrap();
        assert!(
            (opts.patch_side.0..=opts.patch_side.1).contains(&side),
            "side {side}"
        );
        seen.insert(side);
        let (_, right) = s.stitched.mask.split().unwrap();
        assert_eq!(right.count(), 32 * 32);
    }
    assert_eq!(seen.len(), opts.patch_side.1 - opts.patch_side.0 + 1);
}

#[test]
fn toy_matches_are_exact_correspondences() {
    let (_dir, m) = toy(8, 5);
    for rec in &m.records {
        let pose = rec.pose.unwrap();
        let side = rec.scene.as_ref().unwrap().side;
        let (rv, tv) = (
            ViewTransform::new(&pose.reference, side),
            ViewTransform::new(&pose.target, side),
        );
        let set = m.matches(rec.match_path.as_ref().unwrap()).unwrap();
        let inliers: Vec<_> = set.matches.iter().filter(|x| x.confidence >= 0.8).collect();
        assert!(!inliers.is_empty());
        for x in inliers {
            let t = tv.to_view(rv.to_world([x.ref_point.0, x.ref_point.1]));
            assert!((t[0] - x.tar_point.0).abs() < 1e-9 && (t[1] - x.tar_point.1).abs() < 1e-9);
        }
    }
}

fn record(id: usize, cooc: Option<f64>) -> PairRecord {
    PairRecord {
        id: format!("r{id}"),
        ref_path: "a.png".into(),
        tar_path: "b.png".into(),
        cooccurrence: cooc,
        match_path: None,
        pose: None,
        object_mask_path: None,
        tar_object_mask_path: None,
        split: Split::Train,
        views: Vec::new(),
        scene: None,
    }
}

#[test]
fn cooccurrence_filter_agrees_with_brute_force() {
    let mut rng = seeded_rng(Seed(9), "filter");
    let records: Vec<_> = (0..10_000)
        .map(|i| {
            let c = match rng.random_range(0..10) {
                0 => None,
                1 => Some(0.4),
                2 => Some(0.7),
                _ => Some(rng.random_range(0.0..=1.0)),
            };
            record(i, c)
        })
        .collect();
    let (kept, stats) = filter_cooccurrence(&records, 0.4, 0.7);
    let naive: Vec<&PairRecord> = records
        .iter()
        .filter(|r| matches!(r.cooccurrence, Some(c) if c >= 0.4 && c <= 0.7))
        .collect();
    assert_eq!(kept.len(), naive.len());
    assert!(kept.iter().zip(&naive).all(|(a, b)| a == *b));
    assert_eq!(
        stats.missing,
        records.iter().filter(|r| r.cooccurrence.is_none()).count()
    );
    assert_eq!(
        stats.kept + stats.out_of_range + stats.missing,
        records.len()
    );
}

#[test]
fn splits_are_pure_and_disjoint() {
    let (dir, m) = toy(24, 6);
    let train = m.split(Split::Train);
    let val = m.split(Split::Val);
    assert_eq!(train.records.len() + val.records.len(), m.records.len());
    let t: HashSet<_> = train.records.iter().map(|r| r.id.clone()).collect();
    assert!(val.records.iter().all(|r| !t.contains(&r.id)));
    for r in &m.records {
        assert_eq!(
            r.split,
            assign_split(&r.id, Seed(6), ToyDataConfig::default().val_fraction)
        );
    }
    let reloaded = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    let ids: Vec<_> = reloaded.records.iter().map(|r| &r.id).collect();
    let original: Vec<_> = m.records.iter().map(|r| &r.id).collect();
    assert_eq!(ids, original);
}

#[test]
fn run_config_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new(TaskKind::Nvs);
    cfg.hyper.steps = 17;
    cfg.data.cooccurrence = Some((0.4, 0.7));
    let path = dir.path().join("config.json");
    cfg.save(&path).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
}

#[test]
fn malformed_records_report_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    for f in ["a.png", "b.png"] {
        std::fs::write(dir.path().join(f), b"").unwrap();
    }
    let good = serde_json::to_string(&record(0, Some(0.5))).unwrap();
    std::fs::write(&path, format!("{good}\n{{\"id\": 3}}\n")).unwrap();
    let err = Manifest::load(&path).unwrap_err();
    assert!(err.is_input_error());
    assert!(err.to_string().contains(":2"), "{err}");
}
