use adljepa_autodiff::gradcheck::{check, Tolerance};
use adljepa_autodiff::{Tape, Tensor, EPS_NORM};
use adljepa_core::bev::{occupancy_of_cloud, voxelize, BevOccupancy, GridSpec, VoxelFeatures};
use adljepa_core::data::{generate_scene, SceneConfig};
use adljepa_core::gradsuite::{pipeline_case, tiny_train_config};
use adljepa_core::masking::BevMaskPlan;
use adljepa_core::model::*;
use adljepa_core::trainer::objective;

fn tiny_model(seed: u64) -> ModelState {
    ModelState::init(tiny_train_config().model, seed, 0.996).unwrap()
}

/// 32×32×8 voxels give a 4×4 BEV plane.
fn small_config() -> ModelConfig {
    ModelConfig {
        grid: GridSpec::new([32, 32, 8], Default::default(), 8).unwrap(),
        encoder_channels: [4, 4, 4],
        ..Default::default()
    }
}

fn scene(seed: u64, spec: &GridSpec) -> (VoxelFeatures, BevOccupancy) {
    let (cloud, _) = generate_scene(seed, &SceneConfig::default()).unwrap();
    (voxelize(&cloud, spec).unwrap(), occupancy_of_cloud(&cloud, spec).unwrap())
}

fn rows(t: &Tensor) -> Vec<&[f64]> {
    let e = *t.shape().last().unwrap();
    t.data().chunks(e).collect()
}

fn norm(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn normalized(t: &Tensor) -> Vec<f64> {
    let n = norm(t.data()).max(EPS_NORM);
    t.data().iter().map(|v| v / n).collect()
}

fn encode(state: &ModelState, input: Tensor) -> Tensor {
    let mut tape = Tape::new();
    let p = ParamVars::record(&mut tape, state, false);
    let x = tape.constant(input);
    let z = encode_bev(&mut tape, &p.context, x).unwrap();
    tape.value(z).clone()
}

#[test]
fn encoder_shapes() {
    let m = ModelState::init(small_config(), 0, 0.996).unwrap();
    let z = encode(&m, Tensor::zeros(&[2, 4, 32, 32, 8]));
    assert_eq!(z.shape(), &[2, 4, 4, 4]);
    assert_eq!(m.embed_dim(), 4);
    let mut t = Tape::new();
    let bad = t.constant(Tensor::zeros(&[1, 3, 8, 8, 8]));
    assert!(encode_bev(&mut t, &[], bad).is_err());
}

#[test]
fn zero_input_depends_only_on_biases() {
    let mut m = ModelState::init(small_config(), 5, 0.996).unwrap();
    let z = encode(&m, Tensor::zeros(&[1, 4, 32, 32, 8]));
    let r = rows(&z);
    // Stride-2 windows only overhang the leading edge, so cells off the
    // first row and column see no padding at any stage.
    for h in 1..4 {
        for w in 1..4 {
            assert_eq!(r[h * 4 + w], r[5]);
        }
    }
    assert!(r[0].iter().zip(r[5]).any(|(a, b)| a != b));
    for l in &mut m.context.layers {
        l.bias.data_mut().iter_mut().for_each(|b| *b = 0.0);
    }
    let z = encode(&m, Tensor::zeros(&[1, 4, 32, 32, 8]));
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_outputs_match_singletons() {
    let cfg = small_config();
    let m = ModelState::init(cfg.clone(), 2, 0.996).unwrap();
    let (a, _) = scene(11, &cfg.grid);
    let (b, _) = scene(12, &cfg.grid);
    let both = encode(&m, stack_features(&[&a, &b]).unwrap());
    let sa = encode(&m, stack_features(&[&a]).unwrap());
    let sb = encode(&m, stack_features(&[&b]).unwrap());
    let half = both.numel() / 2;
    for (x, y) in both.data()[..half].iter().zip(sa.data()) {
        assert!((x - y).abs() < 1e-12);
    }
    for (x, y) in both.data()[half..].iter().zip(sb.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn golden_embedding_checksum() {
    let cfg = small_config();
    let m = ModelState::init(cfg.clone(), 42, 0.996).unwrap();
    let (f, _) = scene(42, &cfg.grid);
    let z = encode(&m, stack_features(&[&f]).unwrap());
    let sum: f64 = z.data().iter().sum();
    let weighted: f64 = z.data().iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v).sum();
    assert!((sum - GOLDEN_SUM).abs() < 1e-9, "sum {sum:.15e}");
    assert!((weighted - GOLDEN_WEIGHTED).abs() < 1e-9 * GOLDEN_WEIGHTED.abs().max(1.0), "weighted {weighted:.15e}");
}

// Snapshot taken from the first build of this encoder.
const GOLDEN_SUM: f64 = 1.900968710691100;
const GOLDEN_WEIGHTED: f64 = 64.65171836901072;

fn tokens_only(cfg: &ModelConfig, plan: BevMaskPlan, state: &ModelState) -> (Tensor, Tensor) {
    let (h, w, _) = cfg.grid.bev_dims();
    let e = cfg.embed_dim();
    let mut tape = Tape::new();
    let p = ParamVars::record(&mut tape, state, true);
    let z = tape.constant(Tensor::from_fn(&[1, h, w, e], |i| (i as f64 * 0.37).sin()));
    let s = tape.constant(Tensor::from_fn(&[1, h, w, e], |i| (i as f64 * 0.11).cos()));
    let (zc, st) = apply_tokens(&mut tape, z, s, &[plan], &p, cfg).unwrap();
    (tape.value(zc).clone(), tape.value(st).clone())
}

#[test]
fn all_empty_unmasked_scene_is_the_empty_token() {
    let cfg = small_config();
    let m = ModelState::init(cfg.clone(), 1, 0.996).unwrap();
    let plan = BevMaskPlan::unmasked(BevOccupancy::empty(4, 4));
    let (zc, st) = tokens_only(&cfg, plan, &m);
    let want = normalized(&m.tokens.empty);
    for t in [&zc, &st] {
        for r in rows(t) {
            for (a, b) in r.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn one_masked_cell_is_the_mask_token() {
    let cfg = small_config();
    let m = ModelState::init(cfg.clone(), 1, 0.996).unwrap();
    let occ = BevOccupancy::new(4, 4, vec![true; 16]).unwrap();
    let mut flags = vec![false; 16];
    flags[6] = true;
    let (zc, st) = tokens_only(&cfg, BevMaskPlan::from_flags(occ, flags).unwrap(), &m);
    let want = normalized(&m.tokens.mask);
    for (i, r) in rows(&zc).into_iter().enumerate() {
        let same = r.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12);
        assert_eq!(same, i == 6, "cell {i}");
    }
    for t in [&zc, &st] {
        for r in rows(t) {
            assert!((norm(r) - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn masked_empty_target_cells_follow_the_rule() {
    let mut cfg = small_config();
    let m = ModelState::init(cfg.clone(), 1, 0.996).unwrap();
    let mut cells = vec![true; 16];
    cells[3] = false;
    cells[4] = false;
    let occ = BevOccupancy::new(4, 4, cells).unwrap();
    let mut flags = vec![false; 16];
    flags[3] = true;
    let plan = BevMaskPlan::from_flags(occ, flags).unwrap();
    let token = normalized(&m.tokens.empty);
    let is_token = |r: &[f64]| r.iter().zip(&token).all(|(a, b)| (a - b).abs() < 1e-12);
    for (rule, masked_empty_is_token) in [(TargetEmptyRule::AllEmpty, true), (TargetEmptyRule::UnmaskedOnly, false)] {
        cfg.target_empty_rule = rule;
        let (_, st) = tokens_only(&cfg, plan.clone(), &m);
        let r = rows(&st);
        assert!(is_token(r[4]));
        assert_eq!(is_token(r[3]), masked_empty_is_token);
        assert!(!is_token(r[0]));
    }
}

#[test]
fn predictor_shape_and_norm() {
    let m = tiny_model(3);
    let mut tape = Tape::new();
    let p = ParamVars::record(&mut tape, &m, false);
    let x = tape.constant(Tensor::from_fn(&[2, 2, 2, 8], |i| (i as f64).sin()));
    let y = predict(&mut tape, &p.predictor, x).unwrap();
    assert_eq!(tape.shape(y), &[2, 2, 2, 8]);
    for r in rows(tape.value(y)) {
        assert!((norm(r) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn predictor_gradient_matches_finite_differences() {
    let m = tiny_model(9);
    let params: Vec<Tensor> = m
        .predictor
        .layers
        .iter()
        .flat_map(|l| [l.weight.clone(), l.bias.clone()])
        .collect();
    let input = Tensor::from_fn(&[1, 2, 2, 8], |i| (1.3 * i as f64).cos());
    let probe = Tensor::from_fn(&[1, 2, 2, 8], |i| (0.7 * i as f64).sin());
    let report = check(&params, 1e-6, Tolerance::PER_OP, |t, v| {
        let layers: Vec<_> = v.chunks(2).map(|c| (c[0], c[1])).collect();
        let x = t.constant(input.clone());
        let y = predict(t, &layers, x).map_err(|e| adljepa_autodiff::AutodiffError::Usage(e.to_string()))?;
        let w = t.constant(probe.clone());
        let p = t.mul(y, w)?;
        t.sum(p)
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

fn default_loss_tape(case: &adljepa_core::gradsuite::PipelineCase) -> (Tape, ForwardVars, f64) {
    let mut tape = Tape::new();
    let fw = forward(
        &mut tape,
        &case.state,
        case.context_input.clone(),
        case.target_input.clone(),
        &case.plans,
        true,
    )
    .unwrap();
    let obj = objective(&mut tape, &fw, &case.plans, &case.config).unwrap();
    let v = tape.value(obj.total).item().unwrap();
    tape.backward(obj.total).unwrap();
    (tape, fw, v)
}

#[test]
fn target_branch_gets_no_gradient() {
    let case = pipeline_case(tiny_train_config(), 4).unwrap();
    let (tape, fw, _) = default_loss_tape(&case);
    for &(w, b) in &fw.params.target {
        for v in [w, b] {
            assert!(!tape.requires_grad(v));
            assert!(tape.grad(v).map_or(true, |g| g.data().iter().all(|&x| x == 0.0)));
        }
    }
    assert!(tape.grad(fw.params.target_empty).map_or(true, |g| g.data().iter().all(|&x| x == 0.0)));
}

#[test]
fn tokens_receive_gradient() {
    let case = pipeline_case(tiny_train_config(), 4).unwrap();
    let (tape, fw, _) = default_loss_tape(&case);
    for tok in [fw.params.empty, fw.params.mask] {
        let g = tape.grad(tok).expect("token gradient");
        assert!(g.data().iter().any(|&x| x != 0.0));
    }
}

#[test]
fn duplicating_a_scene_keeps_cosine_terms() {
    let cfg = tiny_train_config();
    let case = pipeline_case(cfg.clone(), 6).unwrap();
    let terms = |ctx: Tensor, tgt: Tensor, plans: &[BevMaskPlan]| {
        let mut tape = Tape::new();
        let fw = forward(&mut tape, &case.state, ctx, tgt, plans, false).unwrap();
        let j = jepa_loss(&mut tape, fw.s_hat_c, fw.s_hat_t, plans, cfg.alpha0, cfg.alpha1).unwrap();
        (tape.value(j.empty).item().unwrap(), tape.value(j.non_empty).item().unwrap())
    };
    let first = |t: &Tensor| {
        let per = t.numel() / t.shape()[0];
        let mut shape = t.shape().to_vec();
        shape[0] = 1;
        Tensor::new(shape, t.data()[..per].to_vec()).unwrap()
    };
    let twice = |t: &Tensor| {
        let mut shape = t.shape().to_vec();
        shape[0] = 2;
        Tensor::new(shape, [t.data(), t.data()].concat()).unwrap()
    };
    let (c1, t1) = (first(&case.context_input), first(&case.target_input));
    let p1 = vec![case.plans[0].clone()];
    let p2 = vec![case.plans[0].clone(), case.plans[0].clone()];
    let (e1, n1) = terms(c1.clone(), t1.clone(), &p1);
    let (e2, n2) = terms(twice(&c1), twice(&t1), &p2);
    assert!((e1 - e2).abs() < 1e-12 && (n1 - n2).abs() < 1e-12);
}

#[test]
fn loss_values_are_bounded() {
    let cfg = tiny_train_config();
    for seed in 0..5 {
        let case = pipeline_case(cfg.clone(), seed).unwrap();
        let mut tape = Tape::new();
        let fw = forward(
            &mut tape,
            &case.state,
            case.context_input.clone(),
            case.target_input.clone(),
            &case.plans,
            false,
        )
        .unwrap();
        let obj = objective(&mut tape, &fw, &case.plans, &cfg).unwrap();
        let j = tape.value(obj.jepa.total).item().unwrap();
        assert!((0.0..=2.0).contains(&j));
        let reg = obj.reg.unwrap();
        let g = cfg.gamma();
        for v in [reg.context, reg.prediction] {
            let x = tape.value(v).item().unwrap();
            assert!((0.0..=g + 1e-12).contains(&x));
        }
    }
}

#[test]
fn ema_over_a_full_schedule() {
    let mut m = tiny_model(1);
    let other = tiny_model(2);
    let total = 10;
    for step in 0..=total {
        let eta = ema_momentum(step, total, 0.996, EmaSchedule::Linear);
        if step == 0 {
            assert_eq!(eta, 0.996);
        }
        ema_update(&mut m.target, &other.context, eta).unwrap();
    }
    assert_eq!(ema_momentum(total, total, 0.996, EmaSchedule::Linear), 1.0);
    // Oracle: repeated convex combination of the two fixed parameter sets.
    let mut keep = 1.0;
    for step in 0..=total {
        keep *= ema_momentum(step, total, 0.996, EmaSchedule::Linear);
    }
    let init = tiny_model(1);
    for (l, (a, b)) in m.target.layers.iter().zip(init.context.layers.iter().zip(&other.context.layers)) {
        for ((x, y0), y1) in l.weight.data().iter().zip(a.weight.data()).zip(b.weight.data()) {
            assert!((x - (keep * y0 + (1.0 - keep) * y1)).abs() < 1e-12);
        }
    }
}
