use adljepa_core::bev::{bev_cell_of_point, occupancy_of_cloud, BevOccupancy, GridSpec};
use adljepa_core::data::{generate_scene, PointCloud, SceneConfig};
use adljepa_core::masking::*;
use proptest::prelude::*;

#[path = "support/oracles.rs"]
mod oracles;
use oracles::target;

fn occupancy_with(non_empty: usize, empty: usize) -> BevOccupancy {
    let mut cells = vec![true; non_empty];
    cells.extend(vec![false; empty]);
    BevOccupancy::new(1, non_empty + empty, cells).unwrap()
}

#[test]
fn ten_and_ninety_at_half() {
    let plan = sample_mask(&occupancy_with(10, 90), MaskOptions::default(), 3).unwrap();
    assert_eq!(plan.q.len(), 5);
    assert_eq!(plan.p.len(), 45);
    assert_eq!(plan.k.len(), 5);
    assert_eq!(plan.u.len(), 45);
}

#[test]
fn default_ratio_is_half() {
    assert_eq!(MaskOptions::default().ratio, 0.5);
    assert!(MaskOptions::default().mask_empty_cells);
}

#[test]
fn empty_cells_untouched_when_disabled() {
    let opts = MaskOptions {
        ratio: 0.5,
        mask_empty_cells: false,
    };
    let plan = sample_mask(&occupancy_with(10, 90), opts, 1).unwrap();
    assert_eq!(plan.q.len(), 5);
    assert!(plan.p.is_empty());
}

#[test]
fn same_seed_same_mask() {
    let occ = occupancy_with(13, 51);
    let a = sample_mask(&occ, MaskOptions::default(), 99).unwrap();
    let b = sample_mask(&occ, MaskOptions::default(), 99).unwrap();
    assert_eq!(a, b);
    let c = sample_mask(&occ, MaskOptions::default(), 100).unwrap();
    assert_ne!(a.masked, c.masked);
}

#[test]
fn mask_frequency_is_unbiased() {
    let occ = occupancy_with(12, 20);
    let trials = 10_000;
    let mut hits = vec![0usize; occ.len()];
    for seed in 0..trials {
        let plan = sample_mask(&occ, MaskOptions::default(), scene_mask_seed(5, seed, 0)).unwrap();
        for (h, &m) in hits.iter_mut().zip(&plan.masked) {
            *h += m as usize;
        }
    }
    for (i, &h) in hits.iter().enumerate().take(12) {
        let f = h as f64 / trials as f64;
        assert!((f - 0.5).abs() < 0.02, "cell {i}: frequency {f}");
    }
}

#[test]
fn partition_extremes() {
    let spec = GridSpec::default();
    let (cloud, _) = generate_scene(1, &SceneConfig::default()).unwrap();
    let occ = occupancy_of_cloud(&cloud, &spec).unwrap();

    let none = BevMaskPlan::unmasked(occ.clone());
    let (xc, xt) = partition_points(&cloud, &none, &spec).unwrap();
    assert_eq!(xc.points, cloud.points);
    assert!(xt.is_empty());

    let all = BevMaskPlan::from_flags(occ.clone(), occ.cells.clone()).unwrap();
    let (xc, xt) = partition_points(&cloud, &all, &spec).unwrap();
    assert!(xc.is_empty());
    assert_eq!(xt.points, cloud.points);
}

#[test]
fn partition_rejects_point_in_empty_cell() {
    let spec = GridSpec::default();
    let (cloud, _) = generate_scene(1, &SceneConfig::default()).unwrap();
    let plan = BevMaskPlan::unmasked(BevOccupancy::empty(8, 8));
    assert!(partition_points(&cloud, &plan, &spec).is_err());
}

fn check_membership(cloud: &PointCloud, plan: &BevMaskPlan, spec: &GridSpec) {
    let (xc, xt) = partition_points(cloud, plan, spec).unwrap();
    assert_eq!(xc.len() + xt.len(), cloud.len());
    let w = plan.occupancy.w;
    for p in &xt.points {
        let (h, c) = bev_cell_of_point(p, spec).unwrap();
        assert!(plan.q.contains(&(h * w + c)));
    }
    for p in &xc.points {
        let (h, c) = bev_cell_of_point(p, spec).unwrap();
        assert!(!plan.masked[h * w + c]);
        assert!(plan.k.contains(&(h * w + c)));
    }
}

#[test]
fn partition_membership_on_scenes() {
    let spec = GridSpec::default();
    for seed in 0..10 {
        let (cloud, _) = generate_scene(seed, &SceneConfig::default()).unwrap();
        let occ = occupancy_of_cloud(&cloud, &spec).unwrap();
        let plan = sample_mask(&occ, MaskOptions::default(), seed).unwrap();
        check_membership(&cloud, &plan, &spec);
    }
}

#[test]
fn ratio_out_of_bounds_rejected() {
    let occ = occupancy_with(4, 4);
    for r in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
        let opts = MaskOptions {
            ratio: r,
            mask_empty_cells: true,
        };
        assert!(sample_mask(&occ, opts, 0).is_err());
    }
}

proptest! {
    #[test]
    fn counts_hit_rounded_targets(cells in prop::collection::vec(any::<bool>(), 1..128), quarters in 1usize..4, seed in any::<u64>()) {
        let n = cells.len();
        let occ = BevOccupancy::new(1, n, cells).unwrap();
        let ne = occ.count_occupied();
        let opts = MaskOptions { ratio: quarters as f64 / 4.0, mask_empty_cells: true };
        let plan = sample_mask(&occ, opts, seed).unwrap();
        prop_assert_eq!(plan.q.len(), target(ne, quarters, true));
        prop_assert_eq!(plan.p.len(), target(n - ne, quarters, false));
        prop_assert_eq!(plan.k.len() + plan.q.len() + plan.p.len() + plan.u.len(), n);
        for &i in plan.q.iter().chain(&plan.k) {
            prop_assert!(occ.cells[i]);
        }
        for &i in plan.p.iter().chain(&plan.u) {
            prop_assert!(!occ.cells[i]);
        }
    }
}
