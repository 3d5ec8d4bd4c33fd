use adljepa_autodiff::{Tape, Tensor, Var, EPS_NORM};

use super::{ConvLayer, ModelConfig, ModelState, TargetEmptyRule};
use crate::bev::{VoxelFeatures, FEATURE_CHANNELS};
use crate::masking::BevMaskPlan;
use crate::{CoreError, Result};

/// Model tensors recorded on a tape. The target encoder and the target-side
/// copy of the empty token are always constants.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub context: Vec<(Var, Var)>,
    pub target: Vec<(Var, Var)>,
    pub predictor: Vec<(Var, Var)>,
    pub empty: Var,
    pub mask: Var,
    pub target_empty: Var,
}

fn record_layers(tape: &mut Tape, layers: &[ConvLayer], trainable: bool) -> Vec<(Var, Var)> {
    layers
        .iter()
        .map(|l| {
            (
                tape.leaf(l.weight.clone(), trainable),
                tape.leaf(l.bias.clone(), trainable),
            )
        })
        .collect()
}

impl ParamVars {
    pub fn record(tape: &mut Tape, state: &ModelState, trainable: bool) -> Self {
        Self {
            context: record_layers(tape, &state.context.layers, trainable),
            target: record_layers(tape, &state.target.layers, false),
            predictor: record_layers(tape, &state.predictor.layers, trainable),
            empty: tape.leaf(state.tokens.empty.clone(), trainable),
            mask: tape.leaf(state.tokens.mask.clone(), trainable),
            target_empty: tape.constant(state.tokens.empty.clone()),
        }
    }

    /// Builds handles around caller-recorded trainable leaves, given in
    /// [`ModelState::trainable`] order. Target tensors come from `state`.
    pub fn from_trainable(tape: &mut Tape, state: &ModelState, vars: &[Var]) -> Result<Self> {
        let nc = state.context.layers.len();
        let np = state.predictor.layers.len();
        if vars.len() != 2 * (nc + np) + 2 {
            return Err(CoreError::Shape(format!(
                "{} trainable handles for a model with {} tensors",
                vars.len(),
                2 * (nc + np) + 2
            )));
        }
        let pairs = |r: std::ops::Range<usize>| r.map(|i| (vars[2 * i], vars[2 * i + 1])).collect();
        Ok(Self {
            context: pairs(0..nc),
            target: record_layers(tape, &state.target.layers, false),
            predictor: pairs(nc..nc + np),
            empty: vars[2 * (nc + np)],
            mask: vars[2 * (nc + np) + 1],
            target_empty: tape.constant(state.tokens.empty.clone()),
        })
    }

    /// Trainable handles in [`ModelState::trainable`] order.
    pub fn trainable(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(w, b) in self.context.iter().chain(&self.predictor) {
            out.push(w);
            out.push(b);
        }
        out.push(self.empty);
        out.push(self.mask);
        out
    }
}

/// Stacks per-scene `[4, X, Y, Z]` features into `[B, 4, X, Y, Z]`.
pub fn stack_features(features: &[&VoxelFeatures]) -> Result<Tensor> {
    let Some(first) = features.first() else {
        return Err(CoreError::Contract("empty batch".into()));
    };
    let shape = first.tensor.shape().to_vec();
    let mut data = Vec::with_capacity(first.tensor.numel() * features.len());
    for f in features {
        if f.tensor.shape() != shape {
            return Err(CoreError::Shape(format!(
                "batch mixes feature shapes {:?} and {:?}",
                shape,
                f.tensor.shape()
            )));
        }
        data.extend_from_slice(f.tensor.data());
    }
    let mut full = vec![features.len()];
    full.extend(shape);
    Ok(Tensor::new(full, data)?)
}

/// Encoder forward then reshape `[B, C, H, W, D]` → `[B, H, W, D·C]` with
/// embedding index `e = d·C + c`.
pub fn encode_bev(tape: &mut Tape, layers: &[(Var, Var)], input: Var) -> Result<Var> {
    let shape = tape.shape(input).to_vec();
    if shape.len() != 5 || shape[1] != FEATURE_CHANNELS {
        return Err(CoreError::Shape(format!("encoder input must be [B, 4, X, Y, Z], got {shape:?}")));
    }
    let mut x = input;
    for (i, &(w, b)) in layers.iter().enumerate() {
        x = tape.conv3d(x, w, 2, 1)?;
        x = tape.channel_bias(x, b)?;
        if i + 1 < layers.len() {
            x = tape.relu(x)?;
        }
    }
    let s = tape.shape(x).to_vec();
    let (bsz, c, h, w, d) = (s[0], s[1], s[2], s[3], s[4]);
    let x = tape.permute(x, &[0, 2, 3, 4, 1])?;
    Ok(tape.reshape(x, &[bsz, h, w, d * c])?)
}

/// Token replacement followed by per-cell L2 normalization of both branches.
pub fn apply_tokens(
    tape: &mut Tape,
    z_c: Var,
    s_t: Var,
    plans: &[BevMaskPlan],
    params: &ParamVars,
    config: &ModelConfig,
) -> Result<(Var, Var)> {
    let shape = tape.shape(z_c).to_vec();
    if tape.shape(s_t) != shape.as_slice() || shape.len() != 4 {
        return Err(CoreError::Shape(format!(
            "token inputs {:?} and {:?} must match as [B, H, W, E]",
            shape,
            tape.shape(s_t)
        )));
    }
    let (bsz, hw, e) = (shape[0], shape[1] * shape[2], shape[3]);
    if plans.len() != bsz || plans.iter().any(|p| p.cells() != hw) {
        return Err(CoreError::Shape(format!(
            "{} plans for a batch of {bsz} with {hw} cells each",
            plans.len()
        )));
    }
    let (src_row, src_empty, src_mask) = (0, 1, 2);
    let mut pick_c = Vec::with_capacity(bsz * hw);
    let mut pick_t = Vec::with_capacity(bsz * hw);
    for (b, plan) in plans.iter().enumerate() {
        for i in 0..hw {
            let row = (src_row, b * hw + i);
            let occupied = plan.occupancy.cells[i];
            let masked = plan.masked[i];
            pick_c.push(match (occupied, masked) {
                (_, true) if config.use_mask_token => (src_mask, 0),
                (false, false) if config.use_empty_token => (src_empty, 0),
                _ => row,
            });
            let empty_rule = match config.target_empty_rule {
                TargetEmptyRule::UnmaskedOnly => !masked,
                TargetEmptyRule::AllEmpty => true,
            };
            pick_t.push(if !occupied && empty_rule && config.use_empty_token {
                (src_empty, 0)
            } else {
                row
            });
        }
    }
    let zf = tape.reshape(z_c, &[bsz * hw, e])?;
    let sf = tape.reshape(s_t, &[bsz * hw, e])?;
    let zc = tape.gather_rows(&[zf, params.empty, params.mask], &pick_c)?;
    let st = tape.gather_rows(&[sf, params.target_empty], &pick_t)?;
    let zc = tape.l2_normalize(zc, EPS_NORM)?;
    let st = tape.l2_normalize(st, EPS_NORM)?;
    Ok((tape.reshape(zc, &shape)?, tape.reshape(st, &shape)?))
}

/// Conv2d stack over the BEV plane, ReLU between layers, unit-norm output.
pub fn predict(tape: &mut Tape, layers: &[(Var, Var)], z_hat: Var) -> Result<Var> {
    if tape.shape(z_hat).len() != 4 {
        return Err(CoreError::Shape(format!(
            "predictor input must be [B, H, W, E], got {:?}",
            tape.shape(z_hat)
        )));
    }
    let mut x = tape.permute(z_hat, &[0, 3, 1, 2])?;
    for (i, &(w, b)) in layers.iter().enumerate() {
        x = tape.conv2d(x, w, 1, 1)?;
        x = tape.channel_bias(x, b)?;
        if i + 1 < layers.len() {
            x = tape.relu(x)?;
        }
    }
    let x = tape.permute(x, &[0, 2, 3, 1])?;
    Ok(tape.l2_normalize(x, EPS_NORM)?)
}

#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub params: ParamVars,
    pub z_c: Var,
    pub s_t: Var,
    pub z_hat_c: Var,
    pub s_hat_t: Var,
    pub s_hat_c: Var,
}

/// Full two-branch forward pass over a batch.
pub fn forward(
    tape: &mut Tape,
    state: &ModelState,
    context_input: Tensor,
    target_input: Tensor,
    plans: &[BevMaskPlan],
    trainable: bool,
) -> Result<ForwardVars> {
    let params = ParamVars::record(tape, state, trainable);
    forward_with(tape, state, params, context_input, target_input, plans)
}

/// As [`forward`] with parameters already on the tape.
pub fn forward_with(
    tape: &mut Tape,
    state: &ModelState,
    params: ParamVars,
    context_input: Tensor,
    target_input: Tensor,
    plans: &[BevMaskPlan],
) -> Result<ForwardVars> {
    let xc = tape.constant(context_input);
    let xt = tape.constant(target_input);
    let z_c = encode_bev(tape, &params.context, xc)?;
    let s_t = encode_bev(tape, &params.target, xt)?;
    let (z_hat_c, s_hat_t) = apply_tokens(tape, z_c, s_t, plans, &params, &state.config)?;
    let s_hat_c = predict(tape, &params.predictor, z_hat_c)?;
    Ok(ForwardVars {
        params,
        z_c,
        s_t,
        z_hat_c,
        s_hat_t,
        s_hat_c,
    })
}
