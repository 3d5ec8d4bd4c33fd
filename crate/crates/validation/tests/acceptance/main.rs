//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::{BTreeSet, HashMap};
use std::time::{Duration, Instant};

use adljepa_autodiff::gradcheck::Tolerance;
use adljepa_cli::commands::{checkpoint_name, cmd_pretrain, LOG_FILE};
use adljepa_cli::run_config::RunConfig;
use adljepa_core::bev::{bev_cell_of_point, occupancy_of_cloud, BevOccupancy, GridSpec};
use adljepa_core::data::{Point, PointCloud, SceneRange};
use adljepa_core::diagnostics::jacobi_svd;
use adljepa_core::gradsuite::run_suite;
use adljepa_core::masking::{partition_points, sample_mask, MaskOptions};
use adljepa_core::trainer::LossBreakdown;
use adljepa_validation::{describe, evaluate, experiment_config, train, Evaluation, Run, Variant, SEEDS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "../../../core/tests/support/oracles.rs"]
mod oracles;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(name: &str, o: &Outcome, failures: &mut Vec<String>) {
    println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    if !o.pass {
        failures.push(name.to_string());
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let reports = run_suite(20, 0).expect("gradient suite runs");
    let elapsed = start.elapsed();
    let failed: Vec<&str> = reports.iter().filter(|(_, r)| !r.passed()).map(|(n, _)| n.as_str()).collect();
    let op_worst = reports
        .iter()
        .filter(|(n, _)| n.starts_with("op "))
        .map(|(_, r)| r.max_rel_err)
        .fold(0.0, f64::max);
    let pipe_worst = reports
        .iter()
        .filter(|(n, _)| n.starts_with("pipeline"))
        .map(|(_, r)| r.max_rel_err)
        .fold(0.0, f64::max);
    Outcome {
        pass: failed.is_empty() && elapsed < Duration::from_secs(120),
        detail: format!(
            "{} checks, worst rel err {op_worst:.2e} per-op (tol {:.0e}), {pipe_worst:.2e} end-to-end (tol {:.0e}), {:.1}s of 120s{}",
            reports.len(),
            Tolerance::PER_OP.rel,
            Tolerance::END_TO_END.rel,
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    }
}

fn loss_oracles() -> Outcome {
    let j = oracles::jepa_max_error(50);
    let h = oracles::hinge_max_error(50);
    let r = oracles::reg_max_error(50);
    Outcome {
        pass: j < 1e-12 && h < 1e-12 && r < 1e-12,
        detail: format!("max |taped - loop| over 50 instances: jepa {j:.1e}, hinge {h:.1e}, reg {r:.1e} (tol 1e-12)"),
    }
}

/// A cloud with 1 to 4 points inside every occupied cell of `occ`.
fn cloud_on(occ: &BevOccupancy, spec: &GridSpec, rng: &mut impl Rng) -> PointCloud {
    let size = spec.voxel_size();
    let span = [size[0] * spec.downsample as f64, size[1] * spec.downsample as f64];
    let r = spec.range;
    let mut pts = Vec::new();
    for h in 0..occ.h {
        for w in 0..occ.w {
            if !occ.is_occupied(h, w) {
                continue;
            }
            for _ in 0..rng.gen_range(1..5) {
                let x = r.min[0] + span[0] * (h as f64 + rng.gen_range(0.01..0.99));
                let y = r.min[1] + span[1] * (w as f64 + rng.gen_range(0.01..0.99));
                let z = rng.gen_range(r.min[2] + 0.01..r.max[2] - 0.01);
                pts.push(Point::new(x, y, z, rng.gen()));
            }
        }
    }
    PointCloud::new("acceptance", pts)
}

fn masking_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut count_errors = 0;
    let mut partition_errors = 0;
    let mut points = 0usize;
    for i in 0..1000u64 {
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let density: f64 = rng.gen_range(0.0..=1.0);
        let cells: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(density)).collect();
        let occ = BevOccupancy::new(h, w, cells).unwrap();
        let spec = GridSpec::new([2 * h, 2 * w, 4], SceneRange::default(), 2).unwrap();
        let cloud = cloud_on(&occ, &spec, &mut rng);
        points += cloud.len();
        if occupancy_of_cloud(&cloud, &spec).unwrap() != occ {
            partition_errors += 1;
            continue;
        }
        let ne = occ.count_occupied();
        for quarters in 1..=3 {
            let opts = MaskOptions {
                ratio: quarters as f64 / 4.0,
                mask_empty_cells: true,
            };
            let plan = sample_mask(&occ, opts, i * 7 + quarters as u64).unwrap();
            if plan.q.len() != oracles::target(ne, quarters, true)
                || plan.p.len() != oracles::target(h * w - ne, quarters, false)
            {
                count_errors += 1;
            }
            let (xc, xt) = partition_points(&cloud, &plan, &spec).unwrap();
            let q: BTreeSet<usize> = plan.q.iter().copied().collect();
            let k: BTreeSet<usize> = plan.k.iter().copied().collect();
            let cell = |p: &Point| {
                let (a, b) = bev_cell_of_point(p, &spec).unwrap();
                a * w + b
            };
            let key = |p: &Point| p.coords().map(f64::to_bits);
            let mut seen: Vec<_> = xc.points.iter().chain(&xt.points).map(key).collect();
            let mut all: Vec<_> = cloud.points.iter().map(key).collect();
            seen.sort();
            all.sort();
            let sound = seen == all
                && xt.points.iter().all(|p| q.contains(&cell(p)))
                && xc.points.iter().all(|p| k.contains(&cell(p)));
            if !sound {
                partition_errors += 1;
            }
        }
    }
    Outcome {
        pass: count_errors == 0 && partition_errors == 0,
        detail: format!(
            "1000 maps x ratios 0.25/0.5/0.75: {count_errors} count mismatches, {partition_errors} unsound partitions ({points} points)"
        ),
    }
}

type Runs = HashMap<(Variant, u64), (Run, Evaluation)>;

fn experiments(dir: &std::path::Path) -> Runs {
    let mut out = HashMap::new();
    for &seed in &SEEDS {
        for v in Variant::ALL {
            let cfg = experiment_config(v, seed).expect("experiment config");
            if seed == SEEDS[0] && v == Variant::Default {
                eprintln!("experiment profile: {}", describe(&cfg));
            }
            let log = dir.join(format!("{}_{seed}.jsonl", v.label()));
            let run = train(v, cfg, &log).expect("training run");
            let ev = evaluate(&run).expect("evaluation");
            eprintln!(
                "  {} seed {seed}: {:.0}s, context spread {:.4} (pooled {:.4}), erank {:.2}, occupancy AUC {:.3}, probe {:.3} vs init {:.3}",
                v.label(),
                run.elapsed.as_secs_f64(),
                run.tail_context_spread(),
                run.tail_pooled_spread(),
                ev.spectrum.effective_rank,
                ev.occupancy_auc,
                ev.probe.auc,
                ev.probe_init.auc
            );
            out.insert((v, seed), (run, ev));
        }
    }
    out
}

fn each<T>(runs: &Runs, v: Variant, f: impl Fn(&Run, &Evaluation) -> T) -> Vec<T> {
    SEEDS.iter().map(|s| {
        let (r, e) = &runs[&(v, *s)];
        f(r, e)
    }).collect()
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/")
}

fn gamma(runs: &Runs) -> f64 {
    runs[&(Variant::Default, SEEDS[0])].0.config.train.gamma()
}

fn collapse(runs: &Runs) -> Outcome {
    let g = gamma(runs);
    let noreg = each(runs, Variant::NoRegFrozen, |r, _| r.tail_context_spread());
    let def = each(runs, Variant::Default, |r, _| r.tail_context_spread());
    let secs: f64 = [Variant::NoRegFrozen, Variant::Default]
        .iter()
        .flat_map(|&v| each(runs, v, |r, _| r.elapsed.as_secs_f64()))
        .sum();
    let pass = noreg.iter().all(|&x| x < g / 4.0) && def.iter().all(|&x| x >= 0.9 * g) && secs < 1800.0;
    Outcome {
        pass,
        detail: format!(
            "var_context_context_voxels over the last 50 of 1000 steps: no-reg {} (need < {:.4}), default {} (need >= {:.4}); {:.0}s of 1800s",
            fmt(&noreg),
            g / 4.0,
            fmt(&def),
            0.9 * g,
            secs
        ),
    }
}

fn per_input(runs: &Runs) -> Outcome {
    let g = gamma(runs);
    let e = runs[&(Variant::Default, SEEDS[0])].1.spectrum.dim;
    let shows = |r: &Run| r.tail_context_spread() < g / 4.0 && r.tail_pooled_spread() > g;
    let pooled_hits = each(runs, Variant::BatchPooled, |r, _| shows(r)).iter().filter(|&&b| b).count();
    let default_hits = each(runs, Variant::Default, |r, _| shows(r)).iter().filter(|&&b| b).count();
    let max_pooled = [Variant::BatchPooled, Variant::Default]
        .iter()
        .flat_map(|&v| each(runs, v, |r, _| r.pooled.iter().copied().fold(0.0, f64::max)))
        .fold(0.0, f64::max);
    Outcome {
        pass: pooled_hits >= 2 && default_hits == 0,
        detail: format!(
            "batch-pooled per-scene {} / pooled {}, default per-scene {} / pooled {}; pooled variant hits {pooled_hits}/3 (need >= 2), default hits {default_hits}/3 (need 0). \
             Largest pooled spread seen {max_pooled:.4}; for unit-norm rows of width {e} the mean per-dimension std is at most 1/sqrt({e}) = {g:.4} = gamma, so 'pooled > gamma' cannot occur",
            fmt(&each(runs, Variant::BatchPooled, |r, _| r.tail_context_spread())),
            fmt(&each(runs, Variant::BatchPooled, |r, _| r.tail_pooled_spread())),
            fmt(&each(runs, Variant::Default, |r, _| r.tail_context_spread())),
            fmt(&each(runs, Variant::Default, |r, _| r.tail_pooled_spread())),
        ),
    }
}

fn probe(runs: &Runs) -> Outcome {
    let gains = each(runs, Variant::Default, |_, e| e.probe.auc - e.probe_init.auc);
    let trained = each(runs, Variant::Default, |_, e| e.probe.auc);
    let init = each(runs, Variant::Default, |_, e| e.probe_init.auc);
    Outcome {
        pass: gains.iter().all(|&g| g >= 0.05),
        detail: format!(
            "probe AUC pretrained {} vs random init {}, gains {} (need >= 0.05 each)",
            fmt(&trained),
            fmt(&init),
            fmt(&gains)
        ),
    }
}

fn svd(runs: &Runs) -> Outcome {
    let ratios: Vec<f64> = SEEDS
        .iter()
        .map(|s| runs[&(Variant::Default, *s)].1.spectrum.effective_rank / runs[&(Variant::NoRegFrozen, *s)].1.spectrum.effective_rank)
        .collect();
    let mut worst: f64 = 0.0;
    let mut matrices = 0;
    for ((_, _), (_, ev)) in runs.iter() {
        let (m, e) = (ev.row_count, ev.spectrum.dim);
        let (ours, _) = jacobi_svd(&ev.rows, m, e).unwrap();
        let oracle = nalgebra::DMatrix::from_row_slice(m, e, &ev.rows).singular_values();
        let mut theirs: Vec<f64> = oracle.iter().copied().collect();
        theirs.sort_by(|a, b| b.total_cmp(a));
        worst = ours.iter().zip(&theirs).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        // the centered and scaled matrix behind the reported spectrum
        let mean: Vec<f64> = (0..e).map(|j| (0..m).map(|i| ev.rows[i * e + j]).sum::<f64>() / m as f64).collect();
        let centered: Vec<f64> = (0..m * e).map(|k| (ev.rows[k] - mean[k % e]) / (m as f64).sqrt()).collect();
        let mut theirs: Vec<f64> = nalgebra::DMatrix::from_row_slice(m, e, &centered).singular_values().iter().copied().collect();
        theirs.sort_by(|a, b| b.total_cmp(a));
        worst = ev.spectrum.singular_values.iter().zip(&theirs).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        matrices += 1;
    }
    let erank_ok = ratios.iter().all(|&r| r >= 2.0);
    Outcome {
        pass: erank_ok && worst <= 1e-8,
        detail: format!(
            "effective rank default {} vs no-reg {}, ratios {} (need >= 2); Jacobi vs nalgebra on {matrices} embedding matrices: max |diff| {worst:.1e} (tol 1e-8)",
            fmt(&each(runs, Variant::Default, |_, e| e.spectrum.effective_rank)),
            fmt(&each(runs, Variant::NoRegFrozen, |_, e| e.spectrum.effective_rank)),
            fmt(&ratios)
        ),
    }
}

fn occupancy(runs: &Runs) -> Outcome {
    let aucs = each(runs, Variant::Default, |_, e| e.occupancy_auc);
    Outcome {
        pass: aucs.iter().all(|&a| a >= 0.8),
        detail: format!("masked-cell similarity to the empty token, empty vs non-empty AUC {} (need >= 0.8)", fmt(&aucs)),
    }
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.apply_profile("tiny").unwrap();
    cfg.scenes = 32;
    cfg.train.max_steps = Some(40);
    cfg.checkpoint_every = 10;
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    cmd_pretrain(&cfg, &a, false, None, |_| {}).unwrap();
    cmd_pretrain(&cfg, &b, false, None, |_| {}).unwrap();
    let log_a = std::fs::read_to_string(a.join(LOG_FILE)).unwrap();
    let rerun_same = log_a == std::fs::read_to_string(b.join(LOG_FILE)).unwrap();
    cmd_pretrain(&cfg, &c, false, Some(&a.join(checkpoint_name(20))), |_| {}).unwrap();
    let log_c = std::fs::read_to_string(c.join(LOG_FILE)).unwrap();
    let tail_a: Vec<&str> = log_a.lines().skip(20).collect();
    let resumed_same = tail_a == log_c.lines().collect::<Vec<_>>() && !tail_a.is_empty();
    let final_same = std::fs::read(a.join("final.adlj")).unwrap() == std::fs::read(c.join("final.adlj")).unwrap();
    Outcome {
        pass: rerun_same && resumed_same && final_same,
        detail: format!(
            "40-step tiny run: rerun log identical {rerun_same}; resume at step 20 reproduces steps 20..39 {resumed_same}, final checkpoint identical {final_same}"
        ),
    }
}

fn log_contract(runs: &Runs) -> Outcome {
    let want: BTreeSet<&str> = LossBreakdown::FIELDS.into_iter().collect();
    let mut records = 0;
    let mut bad = Vec::new();
    let mut worst: f64 = 0.0;
    for ((v, s), (run, _)) in runs {
        let cfg = &run.config.train;
        let lines: Vec<&str> = run.log_text.lines().collect();
        if lines.len() as u64 != cfg.max_steps.unwrap_or(0) {
            bad.push(format!("{} seed {s}: {} records", v.label(), lines.len()));
        }
        for (i, line) in lines.iter().enumerate() {
            let obj: serde_json::Map<String, serde_json::Value> = serde_json::from_str(line).unwrap();
            let fields: BTreeSet<&str> = obj.keys().map(String::as_str).filter(|k| *k != "step" && *k != "epoch").collect();
            let finite = want.iter().all(|k| obj.get(*k).and_then(|x| x.as_f64()).is_some_and(f64::is_finite));
            if fields != want || !finite || obj["step"].as_u64() != Some(i as u64) || obj.len() != 14 {
                bad.push(format!("{} seed {s} step {i}", v.label()));
                continue;
            }
            let x = |k: &str| obj[k].as_f64().unwrap();
            let pre = cfg.lambda_jepa * x("loss_jepa") + cfg.lambda_reg * x("loss_reg");
            worst = worst.max((x("loss_pretrain") - pre).abs());
            records += 1;
        }
    }
    Outcome {
        pass: bad.is_empty() && worst <= 1e-12,
        detail: format!(
            "{records} records from {} runs carry the 12 fields plus step and epoch; max |loss_pretrain - recombined| {worst:.1e} (tol 1e-12){}",
            runs.len(),
            if bad.is_empty() { String::new() } else { format!("; bad: {}", bad.join(", ")) }
        ),
    }
}

fn main() {
    let start = Instant::now();
    let mut failures = Vec::new();
    report("gradient suite", &gradient_suite(), &mut failures);
    report("loss oracles", &loss_oracles(), &mut failures);
    report("masking exactness", &masking_exactness(), &mut failures);
    let dir = tempfile::tempdir().unwrap();
    eprintln!("training {} runs", SEEDS.len() * Variant::ALL.len());
    let runs = experiments(dir.path());
    report("collapse prevention", &collapse(&runs), &mut failures);
    report("per-input regularization", &per_input(&runs), &mut failures);
    report("representation quality probe", &probe(&runs), &mut failures);
    report("svd analysis", &svd(&runs), &mut failures);
    report("occupancy estimation", &occupancy(&runs), &mut failures);
    report("reproducibility and persistence", &reproducibility(), &mut failures);
    report("log contract", &log_contract(&runs), &mut failures);
    println!(
        "acceptance: {} of 10 criteria passed in {:.0}s",
        10 - failures.len(),
        start.elapsed().as_secs_f64()
    );
    if !failures.is_empty() {
        println!("failed: {}", failures.join(", "));
        std::process::exit(1);
    }
}
