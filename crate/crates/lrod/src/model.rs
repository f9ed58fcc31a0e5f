//! Toy detection/restoration networks: a four-stage strided backbone, a
//! single-scale anchor-free grid head, and a restoration head fusing the first
//! three backbone stages. Parameters live in one flat vector addressed through
//! a named segment layout, so whole-model gradients are a single pullback.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LrodError, Result};
use crate::rng::stream;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Detection grid stride in pixels; also the anchor side length.
pub const STRIDE: usize = 8;
pub const LEAKY_SLOPE: f64 = 0.1;

pub const MODE_TAGS: [&str; 6] = [
    "baseline",
    "cascade-restorer",
    "cascade-detector",
    "lrod",
    "ablation-res-only",
    "ablation-pen-only",
];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Four stage widths; stages 1..3 stride 2, stage 4 stride 1.
    pub stage_channels: [usize; 4],
    pub num_classes: usize,
    pub detect_mid: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: [8, 16, 32, 32],
            num_classes: 3,
            detect_mid: 32,
        }
    }
}

impl ModelConfig {
    pub fn detect_out_channels(&self) -> usize {
        1 + self.num_classes + 4
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ParamLayout {
    pub segments: Vec<Segment>,
    pub total: usize,
}

impl ParamLayout {
    fn build(shapes: Vec<(String, Vec<usize>)>) -> Self {
        let mut segments = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (name, shape) in shapes {
            let len: usize = shape.iter().product();
            segments.push(Segment {
                name,
                shape,
                offset,
            });
            offset += len;
        }
        ParamLayout {
            segments,
            total: offset,
        }
    }

    pub fn find(&self, name: &str) -> Result<&Segment> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| LrodError::Structural(format!("no parameter segment named {name:?}")))
    }

    /// Contiguous flat range covered by segments whose name starts with any
    /// given prefix. Segments must be adjacent in the layout.
    pub fn prefix_range(&self, prefixes: &[&str]) -> Result<(usize, usize)> {
        let mut start = None;
        let mut end = None;
        for s in &self.segments {
            let hit = prefixes.iter().any(|p| s.name.starts_with(p));
            let len: usize = s.shape.iter().product();
            if hit {
                if start.is_none() {
                    start = Some(s.offset);
                } else if end != Some(s.offset) {
                    return Err(LrodError::Structural(format!(
                        "segments for {prefixes:?} are not contiguous"
                    )));
                }
                end = Some(s.offset + len);
            }
        }
        match (start, end) {
            (Some(a), Some(b)) => Ok((a, b - a)),
            _ => Err(LrodError::Structural(format!(
                "no segments match prefixes {prefixes:?}"
            ))),
        }
    }
}

fn conv_shapes(prefix: &str, cout: usize, cin: usize, k: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.w"), vec![cout, cin, k, k]),
        (format!("{prefix}.b"), vec![cout, 1, 1]),
    ]
}

fn backbone_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let c = cfg.stage_channels;
    let mut v = Vec::new();
    v.extend(conv_shapes("backbone.s1", c[0], 3, 3));
    v.extend(conv_shapes("backbone.s2", c[1], c[0], 3));
    v.extend(conv_shapes("backbone.s3", c[2], c[1], 3));
    v.extend(conv_shapes("backbone.s4", c[3], c[2], 3));
    v
}

fn detect_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut v = Vec::new();
    v.extend(conv_shapes("detect.c1", cfg.detect_mid, cfg.stage_channels[3], 3));
    v.extend(conv_shapes("detect.c2", cfg.detect_out_channels(), cfg.detect_mid, 1));
    v
}

fn restore_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let c = cfg.stage_channels;
    let mut v = Vec::new();
    v.extend(conv_shapes("restore.f2", c[1], c[2] + c[1], 3));
    v.extend(conv_shapes("restore.f1", c[0], c[1] + c[0], 3));
    v.extend(conv_shapes("restore.out", 3, c[0], 3));
    v
}

/// Detector layout: backbone then detection head.
pub fn detector_layout(cfg: &ModelConfig) -> ParamLayout {
    let mut v = backbone_shapes(cfg);
    v.extend(detect_shapes(cfg));
    ParamLayout::build(v)
}

/// Restorer layout: backbone then restoration head.
pub fn restorer_layout(cfg: &ModelConfig) -> ParamLayout {
    let mut v = backbone_shapes(cfg);
    v.extend(restore_shapes(cfg));
    ParamLayout::build(v)
}

/// Shared layout: backbone, detection head, restoration head, in that order,
/// so the penalty range (backbone + detector) is a contiguous prefix.
pub fn shared_layout(cfg: &ModelConfig) -> ParamLayout {
    let mut v = backbone_shapes(cfg);
    v.extend(detect_shapes(cfg));
    v.extend(restore_shapes(cfg));
    ParamLayout::build(v)
}

fn randn(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

/// He-style init: weights N(0, 2/fan_in), biases zero. Seeded per segment.
pub fn init_params(layout: &ParamLayout, seed: u64) -> Tensor {
    let mut flat = Tensor::zeros(&[layout.total]);
    for (idx, seg) in layout.segments.iter().enumerate() {
        let len: usize = seg.shape.iter().product();
        if seg.name.ends_with(".w") {
            let fan_in: usize = seg.shape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let mut rng = stream(seed, "init", idx as u64);
            for i in 0..len {
                flat.data_mut()[seg.offset + i] = std * randn(&mut rng);
            }
        }
    }
    flat
}

/// Pull one named segment out of the flat parameter node.
pub fn param(tape: &mut Tape, flat: VarId, layout: &ParamLayout, name: &str) -> Result<VarId> {
    let seg = layout.find(name)?.clone();
    let len: usize = seg.shape.iter().product();
    let s = tape.slice(flat, 0, seg.offset, len)?;
    tape.reshape(s, &seg.shape)
}

fn conv_block(
    tape: &mut Tape,
    x: VarId,
    flat: VarId,
    layout: &ParamLayout,
    prefix: &str,
    stride: usize,
    pad: usize,
    activate: bool,
) -> Result<VarId> {
    let w = param(tape, flat, layout, &format!("{prefix}.w"))?;
    let b = param(tape, flat, layout, &format!("{prefix}.b"))?;
    let y = tape.conv2d(x, w, stride, pad)?;
    let y = tape.add(y, b)?;
    if activate {
        tape.leaky_relu(y, LEAKY_SLOPE)
    } else {
        Ok(y)
    }
}

/// Four feature maps: F1 (/2), F2 (/4), F3 (/8), F4 (/8).
pub fn backbone_forward(
    tape: &mut Tape,
    x: VarId,
    flat: VarId,
    layout: &ParamLayout,
) -> Result<(VarId, VarId, VarId, VarId)> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[0] != 3 || shape[1] % 8 != 0 || shape[2] % 8 != 0 {
        return Err(LrodError::shape("backbone_forward", &shape, &[3, 8, 8]));
    }
    let f1 = conv_block(tape, x, flat, layout, "backbone.s1", 2, 1, true)?;
    let f2 = conv_block(tape, f1, flat, layout, "backbone.s2", 2, 1, true)?;
    let f3 = conv_block(tape, f2, flat, layout, "backbone.s3", 2, 1, true)?;
    let f4 = conv_block(tape, f3, flat, layout, "backbone.s4", 1, 1, true)?;
    Ok((f1, f2, f3, f4))
}

/// Raw grid logits, channels [objectness, classes.., dx, dy, log-w, log-h].
pub fn detect_forward(tape: &mut Tape, f4: VarId, flat: VarId, layout: &ParamLayout) -> Result<VarId> {
    let h = conv_block(tape, f4, flat, layout, "detect.c1", 1, 1, true)?;
    conv_block(tape, h, flat, layout, "detect.c2", 1, 0, false)
}

/// Restored image in (0,1), same spatial size as the backbone input.
pub fn restore_forward(
    tape: &mut Tape,
    f1: VarId,
    f2: VarId,
    f3: VarId,
    flat: VarId,
    layout: &ParamLayout,
) -> Result<VarId> {
    let u3 = tape.upsample2(f3)?;
    if tape.shape(u3)[1..] != tape.shape(f2)[1..] {
        return Err(LrodError::shape("restore_forward", tape.shape(u3), tape.shape(f2)));
    }
    let cat2 = tape.concat(&[u3, f2], 0)?;
    let m2 = conv_block(tape, cat2, flat, layout, "restore.f2", 1, 1, true)?;
    let u2 = tape.upsample2(m2)?;
    let cat1 = tape.concat(&[u2, f1], 0)?;
    let m1 = conv_block(tape, cat1, flat, layout, "restore.f1", 1, 1, true)?;
    let u1 = tape.upsample2(m1)?;
    let out = conv_block(tape, u1, flat, layout, "restore.out", 1, 1, false)?;
    tape.sigmoid(out)
}

/// Backbone + detection head on one parameter vector.
pub fn detector_forward(tape: &mut Tape, x: VarId, flat: VarId, layout: &ParamLayout) -> Result<VarId> {
    let (_, _, _, f4) = backbone_forward(tape, x, flat, layout)?;
    detect_forward(tape, f4, flat, layout)
}

/// Backbone + restoration head on one parameter vector.
pub fn restorer_forward(tape: &mut Tape, x: VarId, flat: VarId, layout: &ParamLayout) -> Result<VarId> {
    let (f1, f2, f3, _) = backbone_forward(tape, x, flat, layout)?;
    restore_forward(tape, f1, f2, f3, flat, layout)
}

/// One backbone call feeding both heads; the shared-parameter configuration.
pub fn shared_forward(
    tape: &mut Tape,
    x: VarId,
    flat: VarId,
    layout: &ParamLayout,
) -> Result<(VarId, VarId)> {
    let (f1, f2, f3, f4) = backbone_forward(tape, x, flat, layout)?;
    let det = detect_forward(tape, f4, flat, layout)?;
    let restored = restore_forward(tape, f1, f2, f3, flat, layout)?;
    Ok((det, restored))
}

/// Separate restorer feeding a separate detector; gradients flow end to end.
pub fn cascade_forward(
    tape: &mut Tape,
    x: VarId,
    restorer_flat: VarId,
    restorer_layout: &ParamLayout,
    detector_flat: VarId,
    detector_layout_: &ParamLayout,
) -> Result<(VarId, VarId)> {
    let restored = restorer_forward(tape, x, restorer_flat, restorer_layout)?;
    let det = detector_forward(tape, restored, detector_flat, detector_layout_)?;
    Ok((det, restored))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetBox {
    pub class_id: usize,
    pub score: f64,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Decode raw grid logits into scored boxes clamped to image bounds.
/// Center = (cell + sigmoid(dx,dy)) * stride; size = anchor * exp(log-wh)
/// with an anchor equal to the stride.
pub fn decode_boxes(
    det: &Tensor,
    num_classes: usize,
    img_h: usize,
    img_w: usize,
    score_threshold: f64,
) -> Vec<DetBox> {
    let (gh, gw) = (det.shape()[1], det.shape()[2]);
    let cell = |c: usize, y: usize, x: usize| det.data()[c * gh * gw + y * gw + x];
    let anchor = STRIDE as f64;
    let mut out = Vec::new();
    for y in 0..gh {
        for x in 0..gw {
            let obj = sigmoid(cell(0, y, x));
            // stable softmax over class logits
            let logits: Vec<f64> = (0..num_classes).map(|c| cell(1 + c, y, x)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let (best, best_p) = exps
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, e)| (i, e / z))
                .unwrap();
            let score = obj * best_p;
            if score < score_threshold {
                continue;
            }
            let c = 1 + num_classes;
            let cx = (x as f64 + sigmoid(cell(c, y, x))) * STRIDE as f64;
            let cy = (y as f64 + sigmoid(cell(c + 1, y, x))) * STRIDE as f64;
            let w = anchor * cell(c + 2, y, x).exp();
            let h = anchor * cell(c + 3, y, x).exp();
            out.push(DetBox {
                class_id: best,
                score,
                x_min: (cx - w / 2.0).clamp(0.0, img_w as f64),
                y_min: (cy - h / 2.0).clamp(0.0, img_h as f64),
                x_max: (cx + w / 2.0).clamp(0.0, img_w as f64),
                y_max: (cy + h / 2.0).clamp(0.0, img_h as f64),
            });
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub mode: String,
    pub layout: ParamLayout,
}

/// Checkpoint file: one JSON header line, then the flat vector in `.tns` form.
pub fn save_checkpoint(path: &Path, mode: &str, layout: &ParamLayout, flat: &Tensor) -> Result<()> {
    if !MODE_TAGS.contains(&mode) {
        return Err(LrodError::Parameter(format!("unknown checkpoint mode {mode:?}")));
    }
    if flat.len() != layout.total {
        return Err(LrodError::Structural(format!(
            "flat vector length {} does not match layout total {}",
            flat.len(),
            layout.total
        )));
    }
    let header = CheckpointHeader {
        mode: mode.to_string(),
        layout: layout.clone(),
    };
    let f = File::create(path).map_err(|e| LrodError::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(&mut w, &header).map_err(|e| LrodError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    w.write_all(b"\n").map_err(|e| LrodError::io(path, e))?;
    flat.write_tns(&mut w).map_err(|e| LrodError::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Tensor)> {
    let f = File::open(path).map_err(|e| LrodError::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| LrodError::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&line).map_err(|e| LrodError::Format {
        path: path.display().to_string(),
        reason: format!("header: {e}"),
    })?;
    let flat = Tensor::read_tns(&mut r).map_err(|reason| LrodError::Format {
        path: path.display().to_string(),
        reason,
    })?;
    if flat.len() != header.layout.total {
        return Err(LrodError::Format {
            path: path.display().to_string(),
            reason: format!(
                "vector length {} does not match layout total {}",
                flat.len(),
                header.layout.total
            ),
        });
    }
    Ok((header, flat))
}
