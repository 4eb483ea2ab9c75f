mod common;

use common::rng;
use proptest::prelude::*;
use pvo::geometry::CartesianGridSpec;
use pvo::head::SemanticGrid;
use pvo::metrics::*;
use rand::Rng;

fn spec() -> CartesianGridSpec {
    CartesianGridSpec::new([-2.0, 2.0], [-2.0, 2.0], [0.0, 1.0], [4, 4, 2]).unwrap()
}

fn grid(labels: Vec<u16>, k: usize) -> SemanticGrid {
    SemanticGrid::new(spec(), k, labels).unwrap()
}

fn random_grid(seed: u64, k: usize) -> SemanticGrid {
    let mut g = rng(seed);
    grid((0..32).map(|_| g.random_range(0..k as u16)).collect(), k)
}

#[test]
fn identical_grids_fill_the_diagonal() {
    let a = random_grid(1, 4);
    let mut t = ConfusionTable::new(4);
    t.accumulate(&a, &a).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                assert_eq!(t.get(i, j), 0);
            }
        }
    }
    assert_eq!(t.total(), 32);
}

#[test]
fn disjoint_single_class_grids_fill_one_cell() {
    let mut t = ConfusionTable::new(3);
    t.accumulate(&grid(vec![2; 32], 3), &grid(vec![1; 32], 3)).unwrap();
    assert_eq!(t.get(1, 2), 32);
    assert_eq!(t.total(), 32);
}

#[test]
fn random_grids_match_loop() {
    let (p, q) = (random_grid(2, 5), random_grid(3, 5));
    let mut t = ConfusionTable::new(5);
    t.accumulate(&p, &q).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            let n = (0..32).filter(|v| q.labels[*v] == i as u16 && p.labels[*v] == j as u16).count();
            assert_eq!(t.get(i, j), n as u64);
        }
    }
}

#[test]
fn mismatched_grids_are_data_errors() {
    let mut t = ConfusionTable::new(3);
    let other = SemanticGrid::free(CartesianGridSpec::new([-2.0, 2.0], [-2.0, 2.0], [0.0, 1.0], [4, 4, 1]).unwrap(), 3);
    assert!(matches!(t.accumulate(&grid(vec![0; 32], 3), &other), Err(pvo::Error::Data(_))));
    assert!(matches!(t.accumulate(&grid(vec![0; 32], 4), &grid(vec![0; 32], 4)), Err(pvo::Error::Data(_))));
}

#[test]
fn geometric_iou_examples() {
    let mut truth = vec![0u16; 32];
    truth[..8].iter_mut().for_each(|l| *l = 1);
    let mut t = ConfusionTable::new(3);
    t.accumulate(&grid(truth.clone(), 3), &grid(truth.clone(), 3)).unwrap();
    assert_eq!(geometric_iou(&t), 1.0);

    let mut t = ConfusionTable::new(3);
    t.accumulate(&grid(vec![0; 32], 3), &grid(truth.clone(), 3)).unwrap();
    assert_eq!(geometric_iou(&t), 0.0);

    let mut pred = truth.clone();
    pred[8..16].iter_mut().for_each(|l| *l = 2);
    let mut t = ConfusionTable::new(3);
    t.accumulate(&grid(pred, 3), &grid(truth, 3)).unwrap();
    assert_eq!(geometric_iou(&t), 0.5);

    let mut t = ConfusionTable::new(3);
    t.accumulate(&grid(vec![0; 32], 3), &grid(vec![0; 32], 3)).unwrap();
    assert_eq!(geometric_iou(&t), 1.0);
}

#[test]
fn mean_iou_examples() {
    let g = random_grid(4, 4);
    let mut t = ConfusionTable::new(4);
    t.accumulate(&g, &g).unwrap();
    let m = mean_iou(&t);
    assert_eq!(m.miou, 1.0);
    assert!(m.per_class[1..].iter().flatten().all(|v| *v == 1.0));

    // class 1 predicted as class 2 everywhere
    let mut t = ConfusionTable::new(3);
    t.accumulate(&grid(vec![2; 32], 3), &grid(vec![1; 32], 3)).unwrap();
    let m = mean_iou(&t);
    assert_eq!(m.per_class, vec![None, Some(0.0), Some(0.0)]);
    assert_eq!(m.miou, 0.0);

    // hand-computed table (truth rows): free, a, b, c (c absent)
    let mut t = ConfusionTable::new(4);
    for (tr, pr, n) in [(0, 0, 10), (0, 1, 2), (1, 1, 6), (1, 2, 2), (2, 2, 3), (2, 0, 1)] {
        t.add(tr, pr, n);
    }
    let m = mean_iou(&t);
    // a: 6 / (8 + 8 - 6) = 0.6 ; b: 3 / (4 + 5 - 3) = 0.5
    assert_eq!(m.per_class, vec![None, Some(0.6), Some(0.5), None]);
    assert!((m.miou - 0.55).abs() < 1e-15);
    // occupied: tp = 6+2+3 = 11, fp = 2, fn = 1
    assert!((geometric_iou(&t) - 11.0 / 14.0).abs() < 1e-15);
}

#[test]
fn banded_metrics() {
    let g = random_grid(5, 4);
    let bands = range_stratified_miou(&g, &g, 3).unwrap();
    assert!(bands.iter().all(|b| b.miou == 1.0 && b.iou == 1.0));
    // Many bands over a 4×4 grid: some bands hold no voxel centers and are left out.
    let bands = range_stratified_miou(&g, &g, 20).unwrap();
    assert!(bands.len() < 20);
    assert_eq!(bands.iter().map(|b| b.voxels).sum::<u64>(), 32);

    let (p, q) = (random_grid(6, 4), random_grid(7, 4));
    let got = range_stratified_miou(&p, &q, 2).unwrap();
    let (vb, _) = voxel_bands(&pvo::geometry::GridSpec::Cartesian(spec()), 2).unwrap();
    for b in &got {
        let mask: Vec<bool> = vb.iter().map(|x| *x == b.band).collect();
        let mut t = ConfusionTable::new(4);
        t.accumulate_masked(&p, &q, &mask).unwrap();
        assert_eq!(b.miou, mean_iou(&t).miou);
        assert_eq!(b.iou, geometric_iou(&t));
    }
}

#[test]
fn report_serializes() {
    let (p, q) = (random_grid(8, 3), random_grid(9, 3));
    let mut t = ConfusionTable::new(3);
    t.accumulate(&p, &q).unwrap();
    let r = MetricReport::new(&t, &["free", "road", "car"], range_stratified_miou(&p, &q, 2).unwrap());
    let j = serde_json::to_value(&r).unwrap();
    assert!(j["per_class"]["road"].is_number());
    assert!(j["per_class"].get("free").is_none());
    assert!(r.bands_csv().starts_with("band,r_lo,r_hi,voxels,iou,miou\n"));
    assert!(confusion_csv(&t, &["free", "road", "car"]).starts_with("truth\\pred,free,road,car\n"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_are_fractions(a in any::<u64>(), b in any::<u64>()) {
        let mut t = ConfusionTable::new(5);
        t.accumulate(&random_grid(a, 5), &random_grid(b, 5)).unwrap();
        let g = geometric_iou(&t);
        prop_assert!((0.0..=1.0).contains(&g));
        let m = mean_iou(&t);
        prop_assert!(m.per_class.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn shard_merge_equals_joint_accumulation(a in any::<u64>(), b in any::<u64>(), c in any::<u64>(), d in any::<u64>()) {
        let (p1, t1, p2, t2) = (random_grid(a, 4), random_grid(b, 4), random_grid(c, 4), random_grid(d, 4));
        let mut joint = ConfusionTable::new(4);
        joint.accumulate(&p1, &t1).unwrap();
        joint.accumulate(&p2, &t2).unwrap();
        let mut s1 = ConfusionTable::new(4);
        s1.accumulate(&p1, &t1).unwrap();
        let mut s2 = ConfusionTable::new(4);
        s2.accumulate(&p2, &t2).unwrap();
        s2.merge(&s1).unwrap();
        prop_assert_eq!(&s2, &joint);
    }

    #[test]
    fn relabeling_permutes_per_class_scores(a in any::<u64>(), b in any::<u64>()) {
        // swap classes 1 and 3 in both grids
        let perm = [0u16, 3, 2, 1];
        let (p, q) = (random_grid(a, 4), random_grid(b, 4));
        let relabel = |g: &SemanticGrid| grid(g.labels.iter().map(|l| perm[*l as usize]).collect(), 4);
        let mut t = ConfusionTable::new(4);
        t.accumulate(&p, &q).unwrap();
        let mut u = ConfusionTable::new(4);
        u.accumulate(&relabel(&p), &relabel(&q)).unwrap();
        let (m, n) = (mean_iou(&t), mean_iou(&u));
        prop_assert_eq!(geometric_iou(&t), geometric_iou(&u));
        prop_assert!((m.miou - n.miou).abs() < 1e-12);
        for c in 0..4 {
            prop_assert_eq!(m.per_class[c], n.per_class[perm[c] as usize]);
        }
    }
}
