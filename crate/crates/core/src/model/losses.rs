use std::fmt;
use std::str::FromStr;

use adljepa_autodiff::{Tape, Tensor, Var, EPS_NORM};

use crate::masking::BevMaskPlan;
use crate::{CoreError, Result};

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Flattened `[B·H·W, E]` view plus cells per scene.
fn flat(tape: &mut Tape, x: Var) -> Result<(Var, usize)> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(CoreError::Shape(format!("expected [B, H, W, E], got {s:?}")));
    }
    Ok((tape.reshape(x, &[s[0] * s[1] * s[2], s[3]])?, s[1] * s[2]))
}

fn check_plans(plans: &[BevMaskPlan], batch: usize, hw: usize) -> Result<()> {
    if plans.len() != batch || plans.iter().any(|p| p.cells() != hw) {
        return Err(CoreError::Shape(format!(
            "{} plans for a batch of {batch} with {hw} cells each",
            plans.len()
        )));
    }
    Ok(())
}

/// `1 − mean cos` over the picked rows, or 0 with no rows.
fn cosine_term(tape: &mut Tape, a: Var, b: Var, rows: &[(usize, usize)]) -> Result<Var> {
    if rows.is_empty() {
        return Ok(zero(tape));
    }
    let ra = tape.gather_rows(&[a], rows)?;
    let rb = tape.gather_rows(&[b], rows)?;
    let cos = tape.cosine_similarity(ra, rb, EPS_NORM)?;
    let m = tape.mean(cos)?;
    let neg = tape.scale(m, -1.0)?;
    Ok(tape.add_scalar(neg, 1.0)?)
}

#[derive(Debug, Clone, Copy)]
pub struct JepaTerms {
    pub total: Var,
    /// Mean `1 − cos` over masked empty cells of the whole batch.
    pub empty: Var,
    /// Mean `1 − cos` over masked non-empty cells of the whole batch.
    pub non_empty: Var,
    pub empty_count: usize,
    pub non_empty_count: usize,
}

/// Cosine prediction loss; each mean is pooled over the whole batch.
pub fn jepa_loss(
    tape: &mut Tape,
    s_hat_c: Var,
    s_hat_t: Var,
    plans: &[BevMaskPlan],
    alpha0: f64,
    alpha1: f64,
) -> Result<JepaTerms> {
    let batch = tape.shape(s_hat_c)[0];
    let (c, hw) = flat(tape, s_hat_c)?;
    let (t, _) = flat(tape, s_hat_t)?;
    if tape.shape(c) != tape.shape(t) {
        return Err(CoreError::Shape("prediction and target shapes differ".into()));
    }
    check_plans(plans, batch, hw)?;
    let rows = |sel: fn(&BevMaskPlan) -> &Vec<usize>| -> Vec<(usize, usize)> {
        plans
            .iter()
            .enumerate()
            .flat_map(|(b, p)| sel(p).iter().map(move |&i| (0, b * hw + i)))
            .collect()
    };
    let p_rows = rows(|p| &p.p);
    let q_rows = rows(|p| &p.q);
    let empty = cosine_term(tape, c, t, &p_rows)?;
    let non_empty = cosine_term(tape, c, t, &q_rows)?;
    let we = tape.scale(empty, alpha0)?;
    let wn = tape.scale(non_empty, alpha1)?;
    let total = tape.add(we, wn)?;
    Ok(JepaTerms {
        total,
        empty,
        non_empty,
        empty_count: p_rows.len(),
        non_empty_count: q_rows.len(),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct HingeOutput {
    pub value: Var,
    /// Set when the input had no rows; the value is then 0.
    pub degenerate: bool,
}

/// Mean over columns of `max(0, γ − sqrt(Var + ε))`, population variance.
pub fn variance_hinge(tape: &mut Tape, y: Var, gamma: f64, eps: f64) -> Result<HingeOutput> {
    let s = tape.shape(y).to_vec();
    if s.len() != 2 || s[1] == 0 {
        return Err(CoreError::Shape(format!("variance hinge needs [M, C], got {s:?}")));
    }
    if s[0] == 0 {
        return Ok(HingeOutput {
            value: zero(tape),
            degenerate: true,
        });
    }
    let mu = tape.mean_rows(y)?;
    let centered = tape.sub_row(y, mu)?;
    let sq = tape.square(centered)?;
    let var = tape.mean_rows(sq)?;
    let var = tape.add_scalar(var, eps)?;
    let std = tape.sqrt(var)?;
    let neg = tape.scale(std, -1.0)?;
    let gap = tape.add_scalar(neg, gamma)?;
    let hinge = tape.relu(gap)?;
    Ok(HingeOutput {
        value: tape.mean(hinge)?,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegPooling {
    /// One hinge per scene, averaged (or summed) over the batch.
    PerScene,
    /// A single hinge over rows pooled from the whole batch.
    BatchPooled,
}

impl FromStr for RegPooling {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_scene" => Ok(Self::PerScene),
            "batch_pooled" => Ok(Self::BatchPooled),
            o => Err(CoreError::Config(format!("reg_pooling: unknown value '{o}'"))),
        }
    }
}

impl fmt::Display for RegPooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerScene => "per_scene",
            Self::BatchPooled => "batch_pooled",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegOptions {
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
    pub eps: f64,
    pub pooling: RegPooling,
    /// Sum per-scene terms instead of averaging them.
    pub sum_over_batch: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct RegTerms {
    pub total: Var,
    /// Hinge on context embeddings of unmasked non-empty cells.
    pub context: Var,
    /// Hinge on predictions at masked non-empty cells.
    pub prediction: Var,
}

fn add_all(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = zero(tape);
    for &t in terms {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

pub fn variance_reg_loss(
    tape: &mut Tape,
    z_hat_c: Var,
    s_hat_c: Var,
    plans: &[BevMaskPlan],
    opts: RegOptions,
) -> Result<RegTerms> {
    let batch = tape.shape(z_hat_c)[0];
    let (z, hw) = flat(tape, z_hat_c)?;
    let (s, _) = flat(tape, s_hat_c)?;
    check_plans(plans, batch, hw)?;
    let rows_of = |b: usize, idx: &[usize]| -> Vec<(usize, usize)> { idx.iter().map(|&i| (0, b * hw + i)).collect() };
    let (context, prediction) = match opts.pooling {
        RegPooling::PerScene => {
            let mut ctx = Vec::with_capacity(batch);
            let mut pred = Vec::with_capacity(batch);
            for (b, plan) in plans.iter().enumerate() {
                let yk = tape.gather_rows(&[z], &rows_of(b, &plan.k))?;
                ctx.push(variance_hinge(tape, yk, opts.gamma, opts.eps)?.value);
                let yq = tape.gather_rows(&[s], &rows_of(b, &plan.q))?;
                pred.push(variance_hinge(tape, yq, opts.gamma, opts.eps)?.value);
            }
            let ctx = add_all(tape, &ctx)?;
            let pred = add_all(tape, &pred)?;
            if opts.sum_over_batch {
                (ctx, pred)
            } else {
                let k = 1.0 / batch as f64;
                (tape.scale(ctx, k)?, tape.scale(pred, k)?)
            }
        }
        RegPooling::BatchPooled => {
            let all_k: Vec<_> = plans.iter().enumerate().flat_map(|(b, p)| rows_of(b, &p.k)).collect();
            let all_q: Vec<_> = plans.iter().enumerate().flat_map(|(b, p)| rows_of(b, &p.q)).collect();
            let yk = tape.gather_rows(&[z], &all_k)?;
            let yq = tape.gather_rows(&[s], &all_q)?;
            (
                variance_hinge(tape, yk, opts.gamma, opts.eps)?.value,
                variance_hinge(tape, yq, opts.gamma, opts.eps)?.value,
            )
        }
    };
    let wc = tape.scale(context, opts.beta1)?;
    let wp = tape.scale(prediction, opts.beta2)?;
    let total = tape.add(wc, wp)?;
    Ok(RegTerms {
        total,
        context,
        prediction,
    })
}

/// `λ_jepa·jepa + λ_reg·reg`; non-finite components are an error.
pub fn total_loss(tape: &mut Tape, jepa: Var, reg: Var, lambda_jepa: f64, lambda_reg: f64) -> Result<Var> {
    for (name, v) in [("jepa", jepa), ("reg", reg)] {
        if !tape.value(v).is_finite() {
            return Err(CoreError::Contract(format!("non-finite {name} loss component")));
        }
    }
    let a = tape.scale(jepa, lambda_jepa)?;
    let b = tape.scale(reg, lambda_reg)?;
    Ok(tape.add(a, b)?)
}

/// Mean over columns of the population standard deviation of `rows`, a
/// row-major `[M, e]` block. `None` without rows.
pub fn embedding_spread(rows: &[f64], e: usize) -> Option<f64> {
    let m = rows.len() / e.max(1);
    if m == 0 || e == 0 {
        return None;
    }
    let mut mean = vec![0.0; e];
    for r in rows.chunks(e) {
        for (a, x) in mean.iter_mut().zip(r) {
            *a += x;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let mut var = vec![0.0; e];
    for r in rows.chunks(e) {
        for ((v, x), mu) in var.iter_mut().zip(r).zip(&mean) {
            *v += (x - mu) * (x - mu);
        }
    }
    Some(var.iter().map(|v| (v / m as f64).sqrt()).sum::<f64>() / e as f64)
}
