use adljepa_autodiff::{Tape, Tensor};
use adljepa_core::bev::BevOccupancy;
use adljepa_core::masking::{sample_mask, BevMaskPlan, MaskOptions};
use adljepa_core::model::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "support/oracles.rs"]
mod oracles;
use oracles::*;

#[test]
fn jepa_loss_matches_loop_oracle() {
    assert!(jepa_max_error(50) < 1e-12);
}

#[test]
fn variance_hinge_matches_loop_oracle() {
    assert!(hinge_max_error(50) < 1e-12);
}

#[test]
fn variance_reg_matches_loop_oracle() {
    assert!(reg_max_error(50) < 1e-12);
}

fn plan_all(hw: usize, occupied: bool, masked: bool) -> BevMaskPlan {
    let occ = BevOccupancy::new(1, hw, vec![occupied; hw]).unwrap();
    BevMaskPlan::from_flags(occ, vec![masked; hw]).unwrap()
}

#[test]
fn jepa_examples() {
    let hw = 4;
    let plans = vec![plan_all(hw, true, true), plan_all(hw, false, true)];
    let inst = |t_axis: usize| {
        let mut a = vec![0.0; 2 * hw * 3];
        let mut t = vec![0.0; 2 * hw * 3];
        for r in 0..2 * hw {
            a[r * 3] = 1.0;
            t[r * 3 + t_axis] = 1.0;
        }
        Instance { b: 2, hw, e: 3, a, t, plans: plans.clone() }
    };
    let (mut tape, a, t) = on_tape(&inst(0));
    let same = jepa_loss(&mut tape, a, t, &plans, 0.25, 0.75).unwrap();
    assert_eq!(val(&tape, same.total), 0.0);
    let (mut tape, a, t) = on_tape(&inst(1));
    let orth = jepa_loss(&mut tape, a, t, &plans, 0.25, 0.75).unwrap();
    assert!((val(&tape, orth.total) - 1.0).abs() < 1e-15);
    assert_eq!((orth.empty_count, orth.non_empty_count), (hw, hw));

    // No masked cells at all: both terms contribute zero.
    let none = vec![plan_all(hw, true, false), plan_all(hw, false, false)];
    let (mut tape, a, t) = on_tape(&inst(1));
    let j = jepa_loss(&mut tape, a, t, &none, 0.25, 0.75).unwrap();
    assert_eq!(val(&tape, j.total), 0.0);
}

#[test]
fn hinge_examples() {
    let g = 1.0 / 16.0;
    let mut tape = Tape::new();
    let constant = tape.constant(Tensor::from_fn(&[20, 8], |i| (i % 8) as f64));
    let h = variance_hinge(&mut tape, constant, g, EPS).unwrap();
    assert!((val(&tape, h.value) - g).abs() < 2e-4);

    let wide = tape.constant(Tensor::from_fn(&[10, 3], |i| if (i / 3) % 2 == 0 { 1.0 } else { -1.0 }));
    let h = variance_hinge(&mut tape, wide, g, EPS).unwrap();
    assert_eq!(val(&tape, h.value), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let normal = rand_distr::StandardNormal;
    let y = tape.constant(Tensor::from_fn(&[1000, 8], |_| rng.sample::<f64, _>(normal)));
    let h = variance_hinge(&mut tape, y, g, EPS).unwrap();
    assert!(val(&tape, h.value) < 1e-6);

    let empty = tape.constant(Tensor::zeros(&[0, 8]));
    let h = variance_hinge(&mut tape, empty, g, EPS).unwrap();
    assert!(h.degenerate);
    assert_eq!(val(&tape, h.value), 0.0);
}

#[test]
fn scene_constant_embeddings_are_penalized_per_scene() {
    let g = 0.25;
    let hw = 8;
    // Half the cells of each scene are visible, half masked, all occupied.
    let occ = BevOccupancy::new(1, hw, vec![true; hw]).unwrap();
    let plan = BevMaskPlan::from_flags(occ, (0..hw).map(|i| i % 2 == 0).collect()).unwrap();
    let mut a = vec![0.0; 2 * hw * 4];
    for r in 0..2 * hw {
        a[r * 4 + if r < hw { 0 } else { 1 }] = 1.0;
    }
    let inst = Instance { b: 2, hw, e: 4, a: a.clone(), t: a, plans: vec![plan.clone(), plan] };
    let opts = |pooling| RegOptions { beta1: 1.0, beta2: 1.0, gamma: g, eps: EPS, pooling, sum_over_batch: false };
    let (mut tape, z, s) = on_tape(&inst);
    let per = variance_reg_loss(&mut tape, z, s, &inst.plans, opts(RegPooling::PerScene)).unwrap();
    assert!((val(&tape, per.total) - 2.0 * g).abs() < 1e-3);
    let pooled = variance_reg_loss(&mut tape, z, s, &inst.plans, opts(RegPooling::BatchPooled)).unwrap();
    // Two of four columns now carry std 0.5 ≥ γ; the other two stay constant.
    assert!((val(&tape, pooled.total) - g).abs() < 1e-3);
}

#[test]
fn iid_spread_embeddings_escape_the_hinge() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (hw, e) = (40, 6);
    let occ = BevOccupancy::new(1, hw, vec![true; hw]).unwrap();
    let plan = sample_mask(&occ, MaskOptions::default(), 2).unwrap();
    let a: Vec<f64> = (0..3 * hw * e).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let inst = Instance { b: 3, hw, e, t: a.clone(), a, plans: vec![plan; 3] };
    let opts = RegOptions { beta1: 1.0, beta2: 1.0, gamma: 0.25, eps: EPS, pooling: RegPooling::PerScene, sum_over_batch: false };
    let (mut tape, z, s) = on_tape(&inst);
    let per = variance_reg_loss(&mut tape, z, s, &inst.plans, opts).unwrap();
    assert_eq!(val(&tape, per.total), 0.0);
}

#[test]
fn total_loss_examples() {
    let mut tape = Tape::new();
    let j = tape.constant(Tensor::scalar(0.5));
    let r = tape.constant(Tensor::scalar(0.02));
    let t = total_loss(&mut tape, j, r, 1.0, 10.0).unwrap();
    assert!((val(&tape, t) - 0.7).abs() < 1e-15);
    let zero = tape.constant(Tensor::scalar(0.0));
    for l in [0.0, 1.0, 10.0] {
        let t = total_loss(&mut tape, j, zero, 1.0, l).unwrap();
        assert_eq!(val(&tape, t), 0.5);
    }
    let nan = tape.constant(Tensor::scalar(f64::NAN));
    assert!(total_loss(&mut tape, j, nan, 1.0, 1.0).is_err());
    assert!(total_loss(&mut tape, nan, r, 1.0, 1.0).is_err());
}

#[test]
fn spread_of_unit_rows_never_exceeds_inverse_sqrt_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let e = rng.gen_range(1..20);
        let m = rng.gen_range(2..60);
        let mut rows = Vec::new();
        for _ in 0..m {
            let r: Vec<f64> = (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            rows.extend(r.iter().map(|v| v / n));
        }
        assert!(embedding_spread(&rows, e).unwrap() <= 1.0 / (e as f64).sqrt() + 1e-12);
    }
    assert!(embedding_spread(&[], 4).is_none());
}
