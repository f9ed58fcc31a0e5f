//! Deterministic SGD training in four modes (plain detector, two-stage
//! cascade, shared-backbone joint training, ablations) plus mAP@50 evaluation.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{apply_tensor, online_degradation, DegradationMode};
use crate::error::{LrodError, Result};
use crate::loss::{charbonnier_loss, detection_loss, param_grad_norm_penalty, LossWeights};
use crate::model::{
    decode_boxes, detector_forward, detector_layout, init_params, restorer_forward,
    restorer_layout, shared_forward, shared_layout, DetBox, ModelConfig, ParamLayout,
};
use crate::rng::stream;
use crate::scene::{BoxLabel, SceneRecord};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Baseline,
    Cascade,
    Lrod,
    AblationResOnly,
    AblationPenOnly,
}

impl TrainMode {
    pub fn tag(&self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Cascade => "cascade",
            TrainMode::Lrod => "lrod",
            TrainMode::AblationResOnly => "ablation-res-only",
            TrainMode::AblationPenOnly => "ablation-pen-only",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline" => Ok(TrainMode::Baseline),
            "cascade" => Ok(TrainMode::Cascade),
            "lrod" => Ok(TrainMode::Lrod),
            "ablation-res-only" => Ok(TrainMode::AblationResOnly),
            "ablation-pen-only" => Ok(TrainMode::AblationPenOnly),
            other => Err(format!("unknown train mode {other:?}")),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub degradation: DegradationMode,
    /// Steps between parameter snapshots for audits and landscapes.
    pub audit_every: usize,
    pub model: ModelConfig,
    /// Hutchinson probes per penalty evaluation during training.
    pub penalty_probes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Lrod,
            seed: 0,
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.05,
            weight_decay: 5e-4,
            weights: LossWeights::default(),
            degradation: DegradationMode::Haze,
            audit_every: 50,
            model: ModelConfig::default(),
            penalty_probes: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(LrodError::Parameter(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.audit_every < 1 || self.batch_size < 1 || self.epochs < 1 {
            return Err(LrodError::Parameter(
                "epochs, batch size and audit interval must be >= 1".into(),
            ));
        }
        self.weights.validate()
    }

    /// Effective loss weights after applying the ablation switches.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        match self.mode {
            TrainMode::AblationResOnly => w.lambda_p = 0.0,
            TrainMode::AblationPenOnly => w.lambda = 0.0,
            _ => {}
        }
        w
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_det: f64,
    pub l_res: f64,
    pub penalty: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    /// (step, params) snapshots at the audit interval, including step 0.
    pub checkpoints: Vec<(usize, Tensor)>,
    pub layout: ParamLayout,
    pub params: Tensor,
    /// Stage-1 restorer of the cascade, absent elsewhere.
    pub restorer: Option<(ParamLayout, Tensor)>,
    /// Stage-1 Charbonnier curve of the cascade.
    pub stage1_steps: Vec<StepRecord>,
    /// Set if optimization was aborted; the trace up to that point stands.
    pub diverged: Option<(usize, String)>,
}

/// theta <- theta - lr * (grad + decay * theta).
pub fn sgd_step(theta: &mut Tensor, grad: &Tensor, lr: f64, decay: f64) -> Result<()> {
    if theta.shape() != grad.shape() {
        return Err(LrodError::shape("sgd_step", theta.shape(), grad.shape()));
    }
    if !grad.is_finite() {
        return Err(LrodError::NonFinite { op: "sgd_step".into() });
    }
    for (t, g) in theta.data_mut().iter_mut().zip(grad.data()) {
        *t -= lr * (g + decay * *t);
    }
    Ok(())
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, "shuffle", epoch as u64);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

struct SampleGrad {
    grad: Tensor,
    l_det: f64,
    l_res: f64,
    penalty: f64,
}

/// Gradient and loss components for one sample in a joint (shared-backbone)
/// or plain detector step.
#[allow(clippy::too_many_arguments)]
fn joint_sample_grad(
    cfg: &TrainConfig,
    layout: &ParamLayout,
    theta: &Tensor,
    degraded: &Tensor,
    clean: &Tensor,
    boxes: &[BoxLabel],
    with_restore: bool,
    penalty_seed: Option<u64>,
) -> Result<SampleGrad> {
    let (h, w) = (degraded.shape()[1], degraded.shape()[2]);
    let weights = cfg.effective_weights();
    let mut tape = Tape::new();
    let x = tape.constant(degraded.clone())?;
    let t = tape.input(theta.clone())?;

    let (det, l_res_node) = if with_restore && weights.lambda != 0.0 {
        let (det, restored) = shared_forward(&mut tape, x, t, layout)?;
        let c = tape.constant(clean.clone())?;
        let lr_node = charbonnier_loss(&mut tape, restored, c, weights.charbonnier_eps)?;
        (det, Some(lr_node))
    } else if with_restore {
        // shared layout, restoration branch unused at lambda = 0
        let det = detector_forward(&mut tape, x, t, layout)?;
        (det, None)
    } else {
        let det = detector_forward(&mut tape, x, t, layout)?;
        (det, None)
    };

    let l_det = detection_loss(&mut tape, det, boxes, h, w, cfg.model.num_classes)?;
    let mut total = l_det;
    if let Some(lr_node) = l_res_node {
        let scaled = tape.scale(lr_node, weights.lambda)?;
        total = tape.add(total, scaled)?;
    }
    let mut penalty_val = 0.0;
    if let Some(pseed) = penalty_seed {
        if weights.lambda_p != 0.0 {
            let range = if with_restore {
                Some(layout.prefix_range(&["backbone.", "detect."])?)
            } else {
                None
            };
            let pen = param_grad_norm_penalty(&mut tape, det, t, range, cfg.penalty_probes, pseed)?;
            penalty_val = tape.value(pen).item();
            let scaled = tape.scale(pen, weights.lambda_p)?;
            total = tape.add(total, scaled)?;
        }
    }
    let l_det_val = tape.value(l_det).item();
    let l_res_val = l_res_node.map(|n| tape.value(n).item()).unwrap_or(0.0);
    let g = tape.vjp(total, &[t], &Tensor::scalar(1.0))?[0];
    Ok(SampleGrad {
        grad: tape.value(g).clone(),
        l_det: l_det_val,
        l_res: l_res_val,
        penalty: penalty_val,
    })
}

fn check_divergence(step: usize, term: &str, value: f64) -> Result<()> {
    if !value.is_finite() || value.abs() > DIVERGENCE_LIMIT {
        return Err(LrodError::Diverged {
            step,
            term: term.to_string(),
            value,
        });
    }
    Ok(())
}

struct LoopOutput {
    steps: Vec<StepRecord>,
    checkpoints: Vec<(usize, Tensor)>,
    diverged: Option<(usize, String)>,
}

/// Shared epoch/batch loop; `sample_grad` produces the per-sample gradient.
fn run_loop<F>(
    cfg: &TrainConfig,
    scenes: &[SceneRecord],
    theta: &mut Tensor,
    degradation_tag_offset: u64,
    mut sample_grad: F,
) -> Result<LoopOutput>
where
    F: FnMut(&mut Tensor, usize, &Tensor, &SceneRecord, bool, usize) -> Result<SampleGrad>,
{
    let mut steps = Vec::new();
    let mut checkpoints = vec![(0usize, theta.clone())];
    let mut step = 0usize;
    let mut batch_counter = 0usize;
    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(scenes.len(), cfg.seed, epoch);
        for batch in order.chunks(cfg.batch_size) {
            let rotating = batch_counter % batch.len();
            let mut acc = Tensor::zeros(theta.shape());
            let mut rec = StepRecord {
                step,
                l_det: 0.0,
                l_res: 0.0,
                penalty: 0.0,
                total: 0.0,
            };
            for (pos, &si) in batch.iter().enumerate() {
                let scene = &scenes[si];
                let d = online_degradation(
                    cfg.seed.wrapping_add(degradation_tag_offset),
                    epoch,
                    si,
                    cfg.degradation,
                );
                let degraded = apply_tensor(&scene.image, &scene.depth, &d)?;
                let sg = match sample_grad(theta, step, &degraded, scene, pos == rotating, si) {
                    Ok(sg) => sg,
                    // numeric blowups end the run but keep the trace
                    Err(e @ (LrodError::NonFinite { .. } | LrodError::Diverged { .. })) => {
                        steps.push(rec);
                        return Ok(LoopOutput {
                            steps,
                            checkpoints,
                            diverged: Some((step, e.to_string())),
                        });
                    }
                    Err(e) => return Err(e),
                };
                for (a, g) in acc.data_mut().iter_mut().zip(sg.grad.data()) {
                    *a += g;
                }
                rec.l_det += sg.l_det / batch.len() as f64;
                rec.l_res += sg.l_res / batch.len() as f64;
                rec.penalty += sg.penalty;
            }
            let w = cfg.effective_weights();
            // penalty enters once per batch; detection/restoration average
            let mut grad = acc;
            let inv = 1.0 / batch.len() as f64;
            // the rotating sample's gradient already contains the penalty
            // term unscaled by the batch; rescale the rest uniformly
            for g in grad.data_mut() {
                *g *= inv;
            }
            rec.total = rec.l_det + w.lambda * rec.l_res + w.lambda_p * rec.penalty;
            if let Err(e) = check_divergence(step, "total", rec.total) {
                steps.push(rec);
                return Ok(LoopOutput {
                    steps,
                    checkpoints,
                    diverged: Some((step, e.to_string())),
                });
            }
            match sgd_step(theta, &grad, cfg.learning_rate, cfg.weight_decay) {
                Ok(()) => {}
                Err(e) => {
                    steps.push(rec);
                    return Ok(LoopOutput {
                        steps,
                        checkpoints,
                        diverged: Some((step, e.to_string())),
                    });
                }
            }
            steps.push(rec);
            step += 1;
            batch_counter += 1;
            if step % cfg.audit_every == 0 {
                checkpoints.push((step, theta.clone()));
            }
        }
    }
    if checkpoints.last().map(|(s, _)| *s) != Some(step) {
        checkpoints.push((step, theta.clone()));
    }
    Ok(LoopOutput {
        steps,
        checkpoints,
        diverged: None,
    })
}

pub fn train(cfg: &TrainConfig, scenes: &[SceneRecord]) -> Result<TrainTrace> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(LrodError::Parameter("training needs at least one scene".into()));
    }
    match cfg.mode {
        TrainMode::Baseline => train_joint(cfg, scenes, false),
        TrainMode::Lrod | TrainMode::AblationResOnly | TrainMode::AblationPenOnly => {
            train_joint(cfg, scenes, true)
        }
        TrainMode::Cascade => train_cascade(cfg, scenes),
    }
}

fn train_joint(cfg: &TrainConfig, scenes: &[SceneRecord], shared: bool) -> Result<TrainTrace> {
    let layout = if shared {
        shared_layout(&cfg.model)
    } else {
        detector_layout(&cfg.model)
    };
    let mut theta = init_params(&layout, cfg.seed);
    let weights = cfg.effective_weights();
    let use_penalty = weights.lambda_p != 0.0 && shared;
    let seed = cfg.seed;
    let out = run_loop(cfg, scenes, &mut theta, 0, |theta, step, degraded, scene, is_rotating, _si| {
        let pseed = if use_penalty && is_rotating {
            Some(stream(seed, "penalty", step as u64).gen())
        } else {
            None
        };
        joint_sample_grad(cfg, &layout, theta, degraded, &scene.image, &scene.boxes, shared, pseed)
    })?;
    Ok(TrainTrace {
        steps: out.steps,
        checkpoints: out.checkpoints,
        layout,
        params: theta,
        restorer: None,
        stage1_steps: Vec::new(),
        diverged: out.diverged,
    })
}

fn train_cascade(cfg: &TrainConfig, scenes: &[SceneRecord]) -> Result<TrainTrace> {
    // stage 1: standalone restorer on (degraded, clean) pairs
    let r_layout = restorer_layout(&cfg.model);
    let mut r_theta = init_params(&r_layout, cfg.seed.wrapping_add(1));
    let eps = cfg.weights.charbonnier_eps;
    let stage1 = run_loop(cfg, scenes, &mut r_theta, 0, |theta, _step, degraded, scene, _rot, _si| {
        let mut tape = Tape::new();
        let x = tape.constant(degraded.clone())?;
        let t = tape.input(theta.clone())?;
        let restored = restorer_forward(&mut tape, x, t, &r_layout)?;
        let c = tape.constant(scene.image.clone())?;
        let l = charbonnier_loss(&mut tape, restored, c, eps)?;
        let val = tape.value(l).item();
        let g = tape.vjp(l, &[t], &Tensor::scalar(1.0))?[0];
        Ok(SampleGrad {
            grad: tape.value(g).clone(),
            l_det: 0.0,
            l_res: val,
            penalty: 0.0,
        })
    })?;
    if let Some(d) = stage1.diverged {
        return Ok(TrainTrace {
            steps: Vec::new(),
            checkpoints: stage1.checkpoints,
            layout: r_layout.clone(),
            params: r_theta.clone(),
            restorer: Some((r_layout, r_theta)),
            stage1_steps: stage1.steps,
            diverged: Some(d),
        });
    }

    // stage 2: detector on frozen restorer outputs
    let d_layout = detector_layout(&cfg.model);
    let mut d_theta = init_params(&d_layout, cfg.seed);
    let frozen = r_theta.clone();
    let rl = r_layout.clone();
    let num_classes = cfg.model.num_classes;
    let stage2 = run_loop(cfg, scenes, &mut d_theta, 0, |theta, _step, degraded, scene, _rot, _si| {
        let (h, w) = (degraded.shape()[1], degraded.shape()[2]);
        let mut tape = Tape::new();
        let x = tape.constant(degraded.clone())?;
        let rt = tape.constant(frozen.clone())?;
        let restored = restorer_forward(&mut tape, x, rt, &rl)?;
        let restored_const = tape.constant(tape.value(restored).clone())?;
        let t = tape.input(theta.clone())?;
        let det = detector_forward(&mut tape, restored_const, t, &d_layout)?;
        let l = detection_loss(&mut tape, det, &scene.boxes, h, w, num_classes)?;
        let val = tape.value(l).item();
        let g = tape.vjp(l, &[t], &Tensor::scalar(1.0))?[0];
        Ok(SampleGrad {
            grad: tape.value(g).clone(),
            l_det: val,
            l_res: 0.0,
            penalty: 0.0,
        })
    })?;
    Ok(TrainTrace {
        steps: stage2.steps,
        checkpoints: stage2.checkpoints,
        layout: d_layout,
        params: d_theta,
        restorer: Some((r_layout, r_theta)),
        stage1_steps: stage1.steps,
        diverged: stage2.diverged,
    })
}

pub fn write_loss_csv(steps: &[StepRecord], weights: &LossWeights, path: &Path) -> Result<()> {
    let mut f = File::create(path).map_err(|e| LrodError::io(path, e))?;
    writeln!(f, "step,L_det,L_res,penalty,total,lambda,lambda_p").map_err(|e| LrodError::io(path, e))?;
    for s in steps {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            s.step, s.l_det, s.l_res, s.penalty, s.total, weights.lambda, weights.lambda_p
        )
        .map_err(|e| LrodError::io(path, e))?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub map50: f64,
    pub per_class: Vec<f64>,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

fn iou(a: &DetBox, b: &DetBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let area_a = (a.x_max - a.x_min) * (a.y_max - a.y_min);
    let area_b = (b.x_max - b.x_min) * (b.y_max - b.y_min);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn label_to_box(b: &BoxLabel) -> DetBox {
    DetBox {
        class_id: b.class_id,
        score: 1.0,
        x_min: b.x_min as f64,
        y_min: b.y_min as f64,
        x_max: b.x_max as f64,
        y_max: b.y_max as f64,
    }
}

/// Greedy class-agnostic non-maximum suppression.
pub fn nms(mut boxes: Vec<DetBox>, iou_threshold: f64) -> Vec<DetBox> {
    boxes.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.x_min.partial_cmp(&b.x_min).unwrap())
            .then(a.y_min.partial_cmp(&b.y_min).unwrap())
    });
    let mut kept: Vec<DetBox> = Vec::new();
    for b in boxes {
        if kept.iter().all(|k| iou(k, &b) < iou_threshold) {
            kept.push(b);
        }
    }
    kept
}

/// mAP@50 from already-decoded per-sample predictions. Classes without any
/// ground truth are excluded from the mean.
pub fn map50_from_boxes(
    preds: &[Vec<DetBox>],
    gts: &[Vec<BoxLabel>],
    num_classes: usize,
) -> Result<EvalReport> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(LrodError::Parameter(format!(
            "need matching non-empty prediction/target lists, got {} vs {}",
            preds.len(),
            gts.len()
        )));
    }
    let mut per_class = vec![0.0; num_classes];
    let mut present = vec![false; num_classes];
    for cls in 0..num_classes {
        let n_gt: usize = gts
            .iter()
            .map(|g| g.iter().filter(|b| b.class_id == cls).count())
            .sum();
        if n_gt == 0 {
            continue;
        }
        present[cls] = true;
        // all predictions of this class, sorted by descending score
        let mut flat: Vec<(usize, DetBox)> = Vec::new();
        for (si, ps) in preds.iter().enumerate() {
            for p in ps.iter().filter(|p| p.class_id == cls) {
                flat.push((si, *p));
            }
        }
        flat.sort_by(|a, b| {
            b.1.score
                .partial_cmp(&a.1.score)
                .unwrap()
                .then(a.0.cmp(&b.0))
                .then(a.1.x_min.partial_cmp(&b.1.x_min).unwrap())
        });
        let mut matched: Vec<Vec<bool>> = gts
            .iter()
            .map(|g| vec![false; g.len()])
            .collect();
        let mut tp = Vec::with_capacity(flat.len());
        for (si, p) in &flat {
            let mut best = None;
            let mut best_iou = 0.5;
            for (gi, g) in gts[*si].iter().enumerate() {
                if g.class_id != cls || matched[*si][gi] {
                    continue;
                }
                let v = iou(p, &label_to_box(g));
                if v >= best_iou {
                    best_iou = v;
                    best = Some(gi);
                }
            }
            if let Some(gi) = best {
                matched[*si][gi] = true;
                tp.push(true);
            } else {
                tp.push(false);
            }
        }
        // all-point interpolated average precision
        let mut precisions = Vec::with_capacity(tp.len());
        let mut recalls = Vec::with_capacity(tp.len());
        let mut hits = 0usize;
        for (i, &is_tp) in tp.iter().enumerate() {
            if is_tp {
                hits += 1;
            }
            precisions.push(hits as f64 / (i + 1) as f64);
            recalls.push(hits as f64 / n_gt as f64);
        }
        for i in (0..precisions.len().saturating_sub(1)).rev() {
            if precisions[i] < precisions[i + 1] {
                precisions[i] = precisions[i + 1];
            }
        }
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        for (p, r) in precisions.iter().zip(&recalls) {
            if *r > prev_r {
                ap += (*r - prev_r) * *p;
                prev_r = *r;
            }
        }
        per_class[cls] = ap;
    }
    let used: Vec<f64> = per_class
        .iter()
        .zip(&present)
        .filter(|(_, p)| **p)
        .map(|(v, _)| *v)
        .collect();
    if used.is_empty() {
        return Err(LrodError::Parameter("no ground-truth objects in evaluation set".into()));
    }
    Ok(EvalReport {
        map50: used.iter().sum::<f64>() / used.len() as f64,
        per_class,
        score_threshold: f64::NAN,
        nms_iou: f64::NAN,
    })
}

/// Decode, suppress and score a detector over an evaluation set.
/// `samples` pairs each (already degraded) image with its annotations.
pub fn eval_map50<F>(
    detect: &F,
    samples: &[(Tensor, Vec<BoxLabel>)],
    num_classes: usize,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<EvalReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if samples.is_empty() {
        return Err(LrodError::Parameter("evaluation needs at least one sample".into()));
    }
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for (img, boxes) in samples {
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let det = detect(img)?;
        let decoded = decode_boxes(&det, num_classes, h, w, score_threshold);
        preds.push(nms(decoded, nms_iou));
        gts.push(boxes.clone());
    }
    let mut report = map50_from_boxes(&preds, &gts, num_classes)?;
    report.score_threshold = score_threshold;
    report.nms_iou = nms_iou;
    Ok(report)
}
