//! Training losses: grid detection loss, Charbonnier restoration loss, the
//! parameter-space gradient-norm penalty, and their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{LrodError, Result};
use crate::model::STRIDE;
use crate::rng::stream;
use crate::scene::BoxLabel;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub lambda_p: f64,
    pub charbonnier_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 10.0,
            lambda_p: 0.01,
            charbonnier_eps: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.lambda_p < 0.0 || self.charbonnier_eps <= 0.0 {
            return Err(LrodError::Parameter(format!(
                "loss weights need lambda >= 0, lambda_p >= 0, eps > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Cell-level targets for the grid head.
pub struct GridTargets {
    /// [1, gh, gw] objectness in {0,1}.
    pub objectness: Tensor,
    /// [1, gh, gw] positive-cell mask, identical support to objectness.
    pub positive: Tensor,
    /// [C, gh, gw] one-hot class at positive cells.
    pub class_onehot: Tensor,
    /// [4, gh, gw]: center fractions in (0,1), then log-size relative to the
    /// stride anchor.
    pub boxes: Tensor,
    pub n_pos: usize,
}

/// Assign each object to the cell containing its center. The first object in
/// the list claims a contested cell; later objects mapped there are dropped,
/// which keeps assignment deterministic.
pub fn encode_targets(
    targets: &[BoxLabel],
    img_h: usize,
    img_w: usize,
    num_classes: usize,
) -> Result<GridTargets> {
    let (gh, gw) = (img_h / STRIDE, img_w / STRIDE);
    let mut objectness = Tensor::zeros(&[1, gh, gw]);
    let mut class_onehot = Tensor::zeros(&[num_classes, gh, gw]);
    let mut boxes = Tensor::zeros(&[4, gh, gw]);
    let mut n_pos = 0;
    for b in targets {
        if b.x_min >= b.x_max || b.y_min >= b.y_max || b.x_max > img_w || b.y_max > img_h {
            return Err(LrodError::Parameter(format!(
                "target box {b:?} outside {img_w}x{img_h} image"
            )));
        }
        if b.class_id >= num_classes {
            return Err(LrodError::Parameter(format!(
                "target class {} outside 0..{num_classes}",
                b.class_id
            )));
        }
        let cx = (b.x_min + b.x_max) as f64 / 2.0;
        let cy = (b.y_min + b.y_max) as f64 / 2.0;
        let gx = ((cx / STRIDE as f64) as usize).min(gw - 1);
        let gy = ((cy / STRIDE as f64) as usize).min(gh - 1);
        let idx = gy * gw + gx;
        if objectness.data()[idx] != 0.0 {
            continue;
        }
        objectness.data_mut()[idx] = 1.0;
        class_onehot.data_mut()[b.class_id * gh * gw + idx] = 1.0;
        let anchor = STRIDE as f64;
        boxes.data_mut()[idx] = cx / anchor - gx as f64;
        boxes.data_mut()[gh * gw + idx] = cy / anchor - gy as f64;
        boxes.data_mut()[2 * gh * gw + idx] = ((b.x_max - b.x_min) as f64 / anchor).ln();
        boxes.data_mut()[3 * gh * gw + idx] = ((b.y_max - b.y_min) as f64 / anchor).ln();
        n_pos += 1;
    }
    Ok(GridTargets {
        positive: objectness.clone(),
        objectness,
        class_onehot,
        boxes,
        n_pos,
    })
}

fn abs_node(tape: &mut Tape, z: VarId) -> Result<VarId> {
    let p = tape.relu(z)?;
    let nz = tape.neg(z)?;
    let n = tape.relu(nz)?;
    tape.add(p, n)
}

/// Elementwise logit BCE, stable form max(z,0) - z*y + ln(1 + e^{-|z|}).
fn bce_with_logits(tape: &mut Tape, z: VarId, y: VarId) -> Result<VarId> {
    let pos = tape.relu(z)?;
    let zy = tape.mul(z, y)?;
    let a = tape.sub(pos, zy)?;
    let absz = abs_node(tape, z)?;
    let nabs = tape.neg(absz)?;
    let e = tape.exp(nabs)?;
    let one = tape.constant(Tensor::full(tape.shape(e), 1.0))?;
    let oe = tape.add(one, e)?;
    let l = tape.log(oe)?;
    tape.add(a, l)
}

/// Elementwise smooth L1 with the quadratic/linear switch frozen from the
/// forward value, so gradients are the usual almost-everywhere ones.
fn smooth_l1(tape: &mut Tape, d: VarId) -> Result<VarId> {
    let mask = tape.value(d).map(|v| if v.abs() < 1.0 { 1.0 } else { 0.0 });
    let m = tape.constant(mask.clone())?;
    let minv = tape.constant(mask.map(|v| 1.0 - v))?;
    let sq = tape.mul(d, d)?;
    let quad = tape.scale(sq, 0.5)?;
    let absd = abs_node(tape, d)?;
    let half = tape.constant(Tensor::full(tape.shape(d), 0.5))?;
    let lin = tape.sub(absd, half)?;
    let a = tape.mul(m, quad)?;
    let b = tape.mul(minv, lin)?;
    tape.add(a, b)
}

/// Objectness BCE over all cells, class cross-entropy and smooth-L1 box
/// regression over positive cells, each term mean-normalized.
pub fn detection_loss(
    tape: &mut Tape,
    det: VarId,
    targets: &[BoxLabel],
    img_h: usize,
    img_w: usize,
    num_classes: usize,
) -> Result<VarId> {
    let shape = tape.shape(det).to_vec();
    let expect = [1 + num_classes + 4, img_h / STRIDE, img_w / STRIDE];
    if shape != expect {
        return Err(LrodError::shape("detection_loss", &shape, &expect));
    }
    let enc = encode_targets(targets, img_h, img_w, num_classes)?;

    let obj = tape.slice(det, 0, 0, 1)?;
    let obj_t = tape.constant(enc.objectness.clone())?;
    let bce = bce_with_logits(tape, obj, obj_t)?;
    let mut total = tape.mean_all(bce)?;

    if enc.n_pos > 0 {
        let pos = tape.constant(enc.positive.clone())?;
        let inv_pos = 1.0 / enc.n_pos as f64;

        let cls = tape.slice(det, 0, 1, num_classes)?;
        let sm = tape.softmax(cls, 0)?;
        let lsm = tape.log(sm)?;
        let onehot = tape.constant(enc.class_onehot.clone())?;
        let picked = tape.mul(onehot, lsm)?;
        let ce_map = tape.sum_axis(picked, 0)?;
        let pos_b = tape.broadcast(pos, tape.shape(ce_map).to_vec().as_slice())?;
        let ce_masked = tape.mul(ce_map, pos_b)?;
        let ce_sum = tape.sum_all(ce_masked)?;
        let ce = tape.scale(ce_sum, -inv_pos)?;
        total = tape.add(total, ce)?;

        let raw = tape.slice(det, 0, 1 + num_classes, 4)?;
        let dxy_raw = tape.slice(raw, 0, 0, 2)?;
        let dxy = tape.sigmoid(dxy_raw)?;
        let dwh = tape.slice(raw, 0, 2, 2)?;
        let pred = tape.concat(&[dxy, dwh], 0)?;
        let box_t = tape.constant(enc.boxes.clone())?;
        let d = tape.sub(pred, box_t)?;
        let sl1 = smooth_l1(tape, d)?;
        let pos4 = tape.broadcast(pos, tape.shape(sl1).to_vec().as_slice())?;
        let masked = tape.mul(sl1, pos4)?;
        let s = tape.sum_all(masked)?;
        let reg = tape.scale(s, inv_pos / 4.0)?;
        total = tape.add(total, reg)?;
    }
    Ok(total)
}

/// Mean over pixels of sqrt(diff^2 + eps^2), computed as
/// eps + mean(sqrt(diff^2 + eps^2) - eps) so the zero-residual value is eps
/// exactly (sqrt of a rounded square returns the root exactly in IEEE-754).
pub fn charbonnier_loss(tape: &mut Tape, restored: VarId, clean: VarId, eps: f64) -> Result<VarId> {
    if eps <= 0.0 {
        return Err(LrodError::Parameter(format!("charbonnier eps must be > 0, got {eps}")));
    }
    if tape.shape(restored) != tape.shape(clean) {
        return Err(LrodError::shape(
            "charbonnier_loss",
            tape.shape(restored),
            tape.shape(clean),
        ));
    }
    let d = tape.sub(restored, clean)?;
    let sq = tape.mul(d, d)?;
    let e2 = tape.constant(Tensor::full(tape.shape(sq), eps * eps))?;
    let s = tape.add(sq, e2)?;
    let r = tape.sqrt(s)?;
    let eps_map = tape.constant(Tensor::full(tape.shape(r), eps))?;
    let excess = tape.sub(r, eps_map)?;
    let m = tape.mean_all(excess)?;
    let eps_s = tape.constant(Tensor::scalar(eps))?;
    tape.add(m, eps_s)
}

/// Hutchinson estimate of the Frobenius norm of the parameter Jacobian of a
/// vector output: sqrt((1/k) sum_i ||grad_theta <f, v_i>||^2) with Rademacher
/// probes. The gradient is taken on the tape, so the estimate itself stays
/// differentiable with respect to theta. `range` restricts the norm to a flat
/// sub-range of theta (the detection-path parameters).
pub fn param_grad_norm_penalty(
    tape: &mut Tape,
    output: VarId,
    theta: VarId,
    range: Option<(usize, usize)>,
    k: usize,
    seed: u64,
) -> Result<VarId> {
    if k < 1 {
        return Err(LrodError::Parameter(format!("penalty needs k >= 1 probes, got {k}")));
    }
    let out_len = tape.value(output).len();
    let flat = tape.reshape(output, &[out_len])?;
    let mut acc: Option<VarId> = None;
    for i in 0..k {
        let mut rng = stream(seed, "hutchinson", i as u64);
        let probe: Vec<f64> = (0..out_len)
            .map(|_| if rand::Rng::gen::<bool>(&mut rng) { 1.0 } else { -1.0 })
            .collect();
        let v = tape.constant(Tensor::new(vec![out_len], probe)?)?;
        let s = tape.dot(flat, v)?;
        let one = tape.constant(Tensor::scalar(1.0))?;
        let g = tape.vjp_node(s, &[theta], one)?[0];
        let g = match range {
            Some((start, len)) => tape.slice(g, 0, start, len)?,
            None => g,
        };
        let n2 = tape.sq_norm(g)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, n2)?,
            None => n2,
        });
    }
    let mean = tape.scale(acc.unwrap(), 1.0 / k as f64)?;
    tape.sqrt(mean)
}

/// L_det + lambda * L_res + lambda_p * penalty. Zero-weight terms are skipped
/// so the degenerate cases reduce bitwise.
pub fn total_loss(
    tape: &mut Tape,
    l_det: VarId,
    l_res: Option<VarId>,
    penalty: Option<VarId>,
    weights: &LossWeights,
) -> Result<VarId> {
    weights.validate()?;
    let mut total = l_det;
    if let Some(r) = l_res {
        if weights.lambda != 0.0 {
            let t = tape.scale(r, weights.lambda)?;
            total = tape.add(total, t)?;
        }
    }
    if let Some(p) = penalty {
        if weights.lambda_p != 0.0 {
            let t = tape.scale(p, weights.lambda_p)?;
            total = tape.add(total, t)?;
        }
    }
    Ok(total)
}
