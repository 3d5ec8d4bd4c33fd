//! Scalar-loop reference implementations shared by the loss and masking
//! tests and the acceptance suite.
#![allow(dead_code)]

use adljepa_autodiff::{Tape, Tensor, Var};
use adljepa_core::bev::BevOccupancy;
use adljepa_core::masking::{sample_mask, BevMaskPlan, MaskOptions};
use adljepa_core::model::{jepa_loss, variance_hinge, variance_reg_loss, RegOptions, RegPooling};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-8;

pub struct Instance {
    pub b: usize,
    pub hw: usize,
    pub e: usize,
    pub a: Vec<f64>,
    pub t: Vec<f64>,
    pub plans: Vec<BevMaskPlan>,
}

impl Instance {
    pub fn shape(&self) -> [usize; 4] {
        [self.b, 1, self.hw, self.e]
    }

    pub fn row<'a>(&self, data: &'a [f64], b: usize, i: usize) -> &'a [f64] {
        let at = (b * self.hw + i) * self.e;
        &data[at..at + self.e]
    }
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.gen_range(1..5);
    let hw = rng.gen_range(1..13);
    let e = rng.gen_range(1..7);
    // Mixed scales keep some hinge columns active and others slack.
    let scale: f64 = rng.gen_range(0.02..1.5);
    let n = b * hw * e;
    let a = (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
    let t = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let plans = (0..b)
        .map(|i| {
            let cells = (0..hw).map(|_| rng.gen_bool(0.6)).collect();
            let occ = BevOccupancy::new(1, hw, cells).unwrap();
            sample_mask(&occ, MaskOptions::default(), seed * 31 + i as u64).unwrap()
        })
        .collect();
    Instance { b, hw, e, a, t, plans }
}

pub fn cos(x: &[f64], y: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nx = 0.0;
    let mut ny = 0.0;
    for k in 0..x.len() {
        dot += x[k] * y[k];
        nx += x[k] * x[k];
        ny += y[k] * y[k];
    }
    dot / (nx.sqrt().max(1e-12) * ny.sqrt().max(1e-12))
}

pub fn jepa_oracle(inst: &Instance, a0: f64, a1: f64) -> (f64, f64, f64) {
    let (mut se, mut ne, mut sn, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for b in 0..inst.b {
        for &i in &inst.plans[b].p {
            se += 1.0 - cos(inst.row(&inst.a, b, i), inst.row(&inst.t, b, i));
            ne += 1;
        }
        for &i in &inst.plans[b].q {
            sn += 1.0 - cos(inst.row(&inst.a, b, i), inst.row(&inst.t, b, i));
            nn += 1;
        }
    }
    let le = if ne == 0 { 0.0 } else { se / ne as f64 };
    let ln = if nn == 0 { 0.0 } else { sn / nn as f64 };
    (a0 * le + a1 * ln, le, ln)
}

pub fn hinge_oracle(rows: &[&[f64]], gamma: f64) -> f64 {
    let m = rows.len();
    if m == 0 {
        return 0.0;
    }
    let e = rows[0].len();
    let mut total = 0.0;
    for j in 0..e {
        let mut mean = 0.0;
        for r in rows {
            mean += r[j];
        }
        mean /= m as f64;
        let mut var = 0.0;
        for r in rows {
            var += (r[j] - mean) * (r[j] - mean);
        }
        var /= m as f64;
        let h = gamma - (var + EPS).sqrt();
        if h > 0.0 {
            total += h;
        }
    }
    total / e as f64
}

pub fn reg_oracle(inst: &Instance, opts: RegOptions) -> f64 {
    let rows = |data: &[f64], b: usize, idx: &[usize]| -> Vec<Vec<f64>> {
        idx.iter().map(|&i| inst.row(data, b, i).to_vec()).collect()
    };
    let h = |r: &[Vec<f64>]| hinge_oracle(&r.iter().map(|v| v.as_slice()).collect::<Vec<_>>(), opts.gamma);
    let (ctx, pred) = match opts.pooling {
        RegPooling::PerScene => {
            let mut c = 0.0;
            let mut p = 0.0;
            for b in 0..inst.b {
                c += h(&rows(&inst.a, b, &inst.plans[b].k));
                p += h(&rows(&inst.t, b, &inst.plans[b].q));
            }
            if opts.sum_over_batch {
                (c, p)
            } else {
                (c / inst.b as f64, p / inst.b as f64)
            }
        }
        RegPooling::BatchPooled => {
            let mut k = Vec::new();
            let mut q = Vec::new();
            for b in 0..inst.b {
                k.extend(rows(&inst.a, b, &inst.plans[b].k));
                q.extend(rows(&inst.t, b, &inst.plans[b].q));
            }
            (h(&k), h(&q))
        }
    };
    opts.beta1 * ctx + opts.beta2 * pred
}

pub fn on_tape(inst: &Instance) -> (Tape, Var, Var) {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(inst.shape().to_vec(), inst.a.clone()).unwrap());
    let t = tape.constant(Tensor::new(inst.shape().to_vec(), inst.t.clone()).unwrap());
    (tape, a, t)
}

pub fn val(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item().unwrap()
}

/// Integer form of the per-class target for ratio `quarters / 4`.
pub fn target(n: usize, quarters: usize, non_empty: bool) -> usize {
    let num = n * quarters;
    let (q, rem) = (num / 4, num % 4);
    match (2 * rem).cmp(&4) {
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal if non_empty => q + 1,
        _ => q,
    }
}


/// Largest deviation of the taped cosine loss and its two class terms from
/// the loop oracle over `n` random instances.
pub fn jepa_max_error(n: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..n {
        let inst = instance(seed);
        let (mut tape, a, t) = on_tape(&inst);
        let j = jepa_loss(&mut tape, a, t, &inst.plans, 0.25, 0.75).unwrap();
        let (total, le, ln) = jepa_oracle(&inst, 0.25, 0.75);
        worst = worst
            .max((val(&tape, j.total) - total).abs())
            .max((val(&tape, j.empty) - le).abs())
            .max((val(&tape, j.non_empty) - ln).abs());
    }
    worst
}

pub fn hinge_max_error(n: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let m = rng.gen_range(1..40);
        let c = rng.gen_range(1..9);
        let scale: f64 = rng.gen_range(0.01..0.5);
        let gamma = rng.gen_range(0.05..0.4);
        let data: Vec<f64> = (0..m * c).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::new(vec![m, c], data.clone()).unwrap());
        let h = variance_hinge(&mut tape, y, gamma, EPS).unwrap();
        let rows: Vec<&[f64]> = data.chunks(c).collect();
        worst = worst.max((val(&tape, h.value) - hinge_oracle(&rows, gamma)).abs());
    }
    worst
}

/// Per-scene mean, per-scene sum and batch-pooled variants on each instance.
pub fn reg_max_error(n: u64) -> f64 {
    let variants = [
        (RegPooling::PerScene, false),
        (RegPooling::PerScene, true),
        (RegPooling::BatchPooled, false),
    ];
    let mut worst: f64 = 0.0;
    for seed in 0..n {
        let inst = instance(1000 + seed);
        for (pooling, sum_over_batch) in variants {
            let opts = RegOptions {
                beta1: 1.0,
                beta2: 0.7,
                gamma: 0.3,
                eps: EPS,
                pooling,
                sum_over_batch,
            };
            let (mut tape, a, t) = on_tape(&inst);
            let r = variance_reg_loss(&mut tape, a, t, &inst.plans, opts).unwrap();
            worst = worst.max((val(&tape, r.total) - reg_oracle(&inst, opts)).abs());
        }
    }
    worst
}
