use adljepa_autodiff::{Adam, AdamConfig, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::occupancy::roc_auc;
use crate::bev::{bev_cell_of_point, GridSpec};
use crate::data::{PointCloud, SceneAnnotation};
use crate::rng::{keyed_rng, Stream};
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub auc: f64,
    pub accuracy: f64,
    pub train_examples: usize,
    pub test_examples: usize,
}

/// Per-cell object presence: a cell is positive when one of its points lies
/// inside an annotated box.
pub fn cell_object_labels(cloud: &PointCloud, ann: &SceneAnnotation, spec: &GridSpec) -> Result<Vec<bool>> {
    let (_, w, _) = spec.bev_dims();
    let mut labels = vec![false; spec.bev_cells()];
    for p in &cloud.points {
        if ann.boxes.iter().any(|b| b.contains(p)) {
            let (ch, cw) = bev_cell_of_point(p, spec)?;
            labels[ch * w + cw] = true;
        }
    }
    Ok(labels)
}

/// Logistic regression on frozen `[N, e]` features, trained by full-batch
/// Adam on standardized inputs, scored on a held-out set.
pub fn linear_probe(
    train_x: &[f64],
    train_y: &[bool],
    test_x: &[f64],
    test_y: &[bool],
    e: usize,
    cfg: ProbeConfig,
) -> Result<ProbeResult> {
    let (n, nt) = (train_y.len(), test_y.len());
    if e == 0 || train_x.len() != n * e || test_x.len() != nt * e {
        return Err(CoreError::Shape("probe features do not match labels".into()));
    }
    if !train_y.iter().any(|&y| y) || train_y.iter().all(|&y| y) {
        return Err(CoreError::Degenerate("probe training labels are single-class".into()));
    }
    let mut mean = vec![0.0; e];
    for r in train_x.chunks(e) {
        mean.iter_mut().zip(r).for_each(|(a, x)| *a += x / n as f64);
    }
    let mut std = vec![0.0; e];
    for r in train_x.chunks(e) {
        std.iter_mut().zip(r).zip(&mean).for_each(|((s, x), m)| *s += (x - m) * (x - m) / n as f64);
    }
    let std: Vec<f64> = std.iter().map(|v| v.sqrt().max(1e-8)).collect();
    let standardize = |x: &[f64]| -> Vec<f64> {
        x.chunks(e)
            .flat_map(|r| r.iter().zip(&mean).zip(&std).map(|((x, m), s)| (x - m) / s).collect::<Vec<_>>())
            .collect()
    };
    let xs = Tensor::new(vec![n, e], standardize(train_x))?;
    let targets: Vec<f64> = train_y.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();

    let mut rng = keyed_rng(Stream::Probe, &[cfg.seed]);
    let bound = 1.0 / (e as f64).sqrt();
    let mut w = Tensor::from_fn(&[1, e], |_| rng.gen_range(-bound..bound));
    let mut b = Tensor::zeros(&[1]);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
        [&w, &b],
    );
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let x = tape.constant(xs.clone());
        let wv = tape.param(w.clone());
        let bv = tape.param(b.clone());
        let z = tape.linear(x, wv, bv)?;
        let loss = tape.bce_with_logits(z, &targets)?;
        tape.backward(loss)?;
        let grads = [tape.grad(wv).cloned().expect("param grad"), tape.grad(bv).cloned().expect("param grad")];
        adam.step(&mut [&mut w, &mut b], &grads, &["probe.weight", "probe.bias"])?;
    }

    let xt = standardize(test_x);
    let logits: Vec<f64> = xt
        .chunks(e)
        .map(|r| r.iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>() + b.data()[0])
        .collect();
    let auc = roc_auc(&logits, test_y)?;
    let correct = logits.iter().zip(test_y).filter(|(z, &y)| (**z > 0.0) == y).count();
    Ok(ProbeResult {
        auc,
        accuracy: correct as f64 / nt as f64,
        train_examples: n,
        test_examples: nt,
    })
}
