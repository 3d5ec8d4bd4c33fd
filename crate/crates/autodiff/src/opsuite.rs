//! Seeded finite-difference cases covering every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gradcheck::{check, GradCheckReport, Tolerance};
use crate::{Result, Tape, Tensor, Var, EPS_NORM};

/// Central-difference step.
pub const H: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Entries kept away from zero so relu kinks stay outside the stencil.
fn random_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn dims(rng: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

/// Scalarizes through a fixed random weighting so every output element matters.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = random(tape.shape(y), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn elementwise(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = dims(&mut rng, 2, 1, 4);
    let a = random(&shape, &mut rng);
    let b = random(&shape, &mut rng);
    check(&[a, b], H, Tolerance::PER_OP, |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[1])?;
        let m = t.mul(d, v[1])?;
        let k = t.scale(m, -1.7)?;
        let q = t.square(k)?;
        let q = t.add_scalar(q, 0.3)?;
        weighted_sum(t, q, seed)
    })
}

fn relu_sqrt(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let shape = dims(&mut rng, 3, 1, 3);
    let a = random_off_zero(&shape, &mut rng);
    check(&[a], H, Tolerance::PER_OP, |t, v| {
        let y = t.relu(v[0])?;
        let sq = t.square(v[0])?;
        let pos = t.add_scalar(sq, 0.5)?;
        let s = t.sqrt(pos)?;
        let z = t.add(y, s)?;
        weighted_sum(t, z, seed)
    })
}

fn reductions(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
    let m = rng.gen_range(1..6);
    let e = rng.gen_range(1..5);
    let a = random(&[m, e], &mut rng);
    check(&[a], H, Tolerance::PER_OP, |t, v| {
        let mu = t.mean_rows(v[0])?;
        let c = t.sub_row(v[0], mu)?;
        let sq = t.square(c)?;
        let s = weighted_sum(t, sq, seed)?;
        let mu2 = t.mean(v[0])?;
        let total = t.sum(v[0])?;
        let x = t.mul(mu2, total)?;
        t.add(s, x)
    })
}

fn linear(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
    let (n, din, dout) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
    let x = random(&[n, din], &mut rng);
    let w = random(&[dout, din], &mut rng);
    let b = random(&[dout], &mut rng);
    check(&[x, w, b], H, Tolerance::PER_OP, |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        weighted_sum(t, y, seed)
    })
}

fn conv3d(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
    let b = rng.gen_range(1..3);
    let (cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..3));
    let sp = dims(&mut rng, 3, 2, 4);
    let stride = rng.gen_range(1..3);
    let x = random(&[b, cin, sp[0], sp[1], sp[2]], &mut rng);
    let w = random(&[cout, cin, 3, 3, 3], &mut rng);
    let bias = random(&[cout], &mut rng);
    check(&[x, w, bias], H, Tolerance::PER_OP, |t, v| {
        let y = t.conv3d(v[0], v[1], stride, 1)?;
        let y = t.channel_bias(y, v[2])?;
        weighted_sum(t, y, seed)
    })
}

fn conv2d(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
    let b = rng.gen_range(1..3);
    let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let sp = dims(&mut rng, 2, 2, 5);
    let stride = rng.gen_range(1..3);
    let x = random(&[b, cin, sp[0], sp[1]], &mut rng);
    let w = random(&[cout, cin, 3, 3], &mut rng);
    let bias = random(&[cout], &mut rng);
    check(&[x, w, bias], H, Tolerance::PER_OP, |t, v| {
        let y = t.conv2d(v[0], v[1], stride, 1)?;
        let y = t.channel_bias(y, v[2])?;
        weighted_sum(t, y, seed)
    })
}

fn permute_reshape_gather(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
    let shape = dims(&mut rng, 4, 1, 3);
    let a = random(&shape, &mut rng);
    let tok = random(&[shape[1]], &mut rng);
    let rows = shape[0] * shape[2] * shape[3];
    let picks: Vec<(usize, usize)> = (0..rows + 2)
        .map(|_| {
            if rng.gen_bool(0.3) {
                (1, 0)
            } else {
                (0, rng.gen_range(0..rows))
            }
        })
        .collect();
    check(&[a, tok], H, Tolerance::PER_OP, |t, v| {
        let p = t.permute(v[0], &[0, 2, 3, 1])?;
        let e = t.shape(p)[3];
        let flat = t.reshape(p, &[rows, e])?;
        let g = t.gather_rows(&[flat, v[1]], &picks)?;
        weighted_sum(t, g, seed)
    })
}

fn normalize_cosine(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
    let rows = rng.gen_range(1..5);
    let e = rng.gen_range(1..6);
    let a = random(&[rows, e], &mut rng);
    let b = random(&[rows, e], &mut rng);
    check(&[a, b], H, Tolerance::PER_OP, |t, v| {
        let na = t.l2_normalize(v[0], EPS_NORM)?;
        let c = t.cosine_similarity(na, v[1], EPS_NORM)?;
        let s1 = weighted_sum(t, c, seed)?;
        let s2 = weighted_sum(t, na, seed + 1)?;
        t.add(s1, s2)
    })
}

fn bce(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
    let n = rng.gen_range(1..8);
    let x = random(&[n, 3], &mut rng);
    let w = random(&[1, 3], &mut rng);
    let b = random(&[1], &mut rng);
    let targets: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    check(&[x, w, b], H, Tolerance::PER_OP, |t, v| {
        let z = t.linear(v[0], v[1], v[2])?;
        let z = t.reshape(z, &[n])?;
        t.bce_with_logits(z, &targets)
    })
}

type Case = fn(u64) -> Result<GradCheckReport>;

pub const CASES: [(&str, Case); 9] = [
    ("elementwise", elementwise),
    ("relu/sqrt", relu_sqrt),
    ("reductions", reductions),
    ("linear", linear),
    ("conv3d", conv3d),
    ("conv2d", conv2d),
    ("permute/reshape/gather", permute_reshape_gather),
    ("normalize/cosine", normalize_cosine),
    ("bce_with_logits", bce),
];

/// Runs every case for `trials` seeds; one merged report per case.
pub fn run(trials: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    CASES
        .iter()
        .map(|&(name, case)| {
            let mut merged = GradCheckReport::default();
            for seed in 0..trials {
                merged.merge(case(seed)?);
            }
            Ok((name, merged))
        })
        .collect()
}
