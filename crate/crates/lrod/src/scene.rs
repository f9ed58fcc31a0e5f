//! Procedural toy scenes: filled shapes over a low-frequency noise background,
//! with analytic depth and tight bounding-box annotations. Shape identity
//! carries the class signal (circle / square / triangle).

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LrodError, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 3;
/// Background depth; every object sits strictly nearer than this.
pub const BACKGROUND_DEPTH: f64 = 1.0;
/// Minimum visible pixel count for an annotated object.
pub const MIN_OBJECT_PIXELS: usize = 16;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            num_classes: NUM_CLASSES,
            objects_min: 1,
            objects_max: 4,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if !(32..=128).contains(&v) || v % 8 != 0 {
                return Err(LrodError::Parameter(format!(
                    "scene {name} must be a multiple of 8 in 32..=128, got {v}"
                )));
            }
        }
        if self.num_classes == 0 || self.num_classes > NUM_CLASSES {
            return Err(LrodError::Parameter(format!(
                "num_classes must be in 1..={NUM_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.objects_min < 1 || self.objects_max > 4 || self.objects_min > self.objects_max {
            return Err(LrodError::Parameter(format!(
                "objects range must satisfy 1 <= min <= max <= 4, got {}..={}",
                self.objects_min, self.objects_max
            )));
        }
        Ok(())
    }
}

/// Box in pixel coordinates, min-inclusive and max-exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxLabel {
    pub class_id: usize,
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// [3, H, W] in [0,1].
    pub image: Tensor,
    /// [H, W] in [0,1], far = 1. Object pixels are strictly below 1.
    pub depth: Tensor,
    /// Ordered near to far; depth increases with list position.
    pub annotations: Vec<BoxLabel>,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PlacedObject {
    class_id: usize,
    shape: Shape,
    cx: f64,
    cy: f64,
    size: f64,
    color: [f64; 3],
    depth: f64,
}

impl PlacedObject {
    /// Pixel-center containment test.
    fn covers(&self, x: usize, y: usize) -> bool {
        let px = x as f64 + 0.5;
        let py = y as f64 + 0.5;
        let dx = px - self.cx;
        let dy = py - self.cy;
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= self.size * self.size,
            Shape::Square => dx.abs() <= self.size && dy.abs() <= self.size,
            Shape::Triangle => {
                // upward triangle with apex (cx, cy-size), base y = cy+size
                if dy < -self.size || dy > self.size {
                    return false;
                }
                let half_width = (dy + self.size) / 2.0;
                dx.abs() <= half_width
            }
        }
    }

    #[cfg(test)]
    fn depth_value(&self) -> f64 {
        self.depth
    }
}

fn shape_for_class(class_id: usize) -> Shape {
    match class_id {
        0 => Shape::Circle,
        1 => Shape::Square,
        _ => Shape::Triangle,
    }
}

/// Low-frequency background: a coarse random grid bilinearly upsampled.
fn background(rng: &mut impl Rng, h: usize, w: usize) -> Tensor {
    let gh = h / 8 + 1;
    let gw = w / 8 + 1;
    let grid: Vec<f64> = (0..3 * gh * gw).map(|_| rng.gen_range(0.1..0.45)).collect();
    let mut img = Tensor::zeros(&[3, h, w]);
    let data = img.data_mut();
    for c in 0..3 {
        for y in 0..h {
            let fy = y as f64 / 8.0;
            let y0 = fy.floor() as usize;
            let ty = fy - y0 as f64;
            for x in 0..w {
                let fx = x as f64 / 8.0;
                let x0 = fx.floor() as usize;
                let tx = fx - x0 as f64;
                let g = |yy: usize, xx: usize| grid[c * gh * gw + yy.min(gh - 1) * gw + xx.min(gw - 1)];
                let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
                let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
                data[c * h * w + y * w + x] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    img
}

fn place_objects(rng: &mut impl Rng, config: &SceneConfig) -> Vec<PlacedObject> {
    let n = rng.gen_range(config.objects_min..=config.objects_max);
    let max_size = (config.height.min(config.width) as f64 / 4.0).max(5.0);
    let mut objects = Vec::with_capacity(n);
    for i in 0..n {
        let class_id = rng.gen_range(0..config.num_classes);
        let size = rng.gen_range(4.0..max_size);
        // keep the full extent inside image bounds
        let cx = rng.gen_range(size + 1.0..config.width as f64 - size - 1.0);
        let cy = rng.gen_range(size + 1.0..config.height as f64 - size - 1.0);
        let color = [
            rng.gen_range(0.55..1.0),
            rng.gen_range(0.55..1.0),
            rng.gen_range(0.55..1.0),
        ];
        // evenly spaced layers, index 0 nearest
        let depth = 0.15 + 0.6 * i as f64 / n as f64;
        objects.push(PlacedObject {
            class_id,
            shape: shape_for_class(class_id),
            cx,
            cy,
            size,
            color,
            depth,
        });
    }
    objects
}

pub(crate) fn gen_scene_internal(
    seed: u64,
    config: &SceneConfig,
) -> Result<(Scene, Vec<PlacedObject>)> {
    config.validate()?;
    let mut rng = stream(seed, "scene", 0);
    let (h, w) = (config.height, config.width);

    // Retry whole placements until every object keeps enough visible pixels.
    for _attempt in 0..100 {
        let objects = place_objects(&mut rng, config);
        // owner[i] = nearest covering object, if any
        let mut owner: Vec<Option<usize>> = vec![None; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut best: Option<usize> = None;
                for (i, o) in objects.iter().enumerate() {
                    if o.covers(x, y) && best.map_or(true, |b| o.depth < objects[b].depth) {
                        best = Some(i);
                    }
                }
                owner[y * w + x] = best;
            }
        }

        let mut boxes = Vec::with_capacity(objects.len());
        let mut ok = true;
        for (i, o) in objects.iter().enumerate() {
            let mut count = 0usize;
            let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
            for y in 0..h {
                for x in 0..w {
                    if owner[y * w + x] == Some(i) {
                        count += 1;
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x + 1);
                        y1 = y1.max(y + 1);
                    }
                }
            }
            if count < MIN_OBJECT_PIXELS {
                ok = false;
                break;
            }
            boxes.push(BoxLabel {
                class_id: o.class_id,
                x_min: x0,
                y_min: y0,
                x_max: x1,
                y_max: y1,
            });
        }
        if !ok {
            continue;
        }

        let mut image = background(&mut rng, h, w);
        let mut depth = Tensor::full(&[h, w], BACKGROUND_DEPTH);
        for y in 0..h {
            for x in 0..w {
                if let Some(i) = owner[y * w + x] {
                    let o = &objects[i];
                    for c in 0..3 {
                        image.data_mut()[c * h * w + y * w + x] = o.color[c];
                    }
                    depth.data_mut()[y * w + x] = o.depth;
                }
            }
        }
        return Ok((
            Scene {
                image,
                depth,
                annotations: boxes,
            },
            objects,
        ));
    }
    Err(LrodError::Generation {
        seed,
        reason: "no placement with enough visible pixels after 100 attempts".into(),
    })
}

pub fn gen_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    gen_scene_internal(seed, config).map(|(s, _)| s)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(rename = "image-path")]
    pub image_path: String,
    #[serde(rename = "depth-path")]
    pub depth_path: String,
    /// [class, x_min, y_min, x_max, y_max] per object.
    pub boxes: Vec<[usize; 5]>,
}

pub struct SplitResult {
    pub manifest_path: PathBuf,
    pub manifest_sha256: String,
    pub entries: Vec<ManifestEntry>,
}

fn write_png(image: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (image.data()[c * h * w + y * w + x] * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    buf.save(path)
        .map_err(|e| LrodError::Format {
            path: path.display().to_string(),
            reason: format!("png encode: {e}"),
        })
}

/// Generate `n` scenes with seeds `seed_base..seed_base+n` and write PNG +
/// `.tns` pairs plus a JSON-lines manifest under `out_dir`. Callers keep
/// train/val seed ranges disjoint by offsetting `seed_base`.
pub fn build_split(
    seed_base: u64,
    n: usize,
    config: &SceneConfig,
    out_dir: &Path,
    split_name: &str,
) -> Result<SplitResult> {
    if n < 1 {
        return Err(LrodError::Parameter(format!("split size must be >= 1, got {n}")));
    }
    config.validate()?;
    let split_dir = out_dir.join(split_name);
    fs::create_dir_all(&split_dir).map_err(|e| LrodError::io(&split_dir, e))?;

    let mut entries = Vec::with_capacity(n);
    let mut manifest = String::new();
    for i in 0..n {
        let seed = seed_base + i as u64;
        let scene = gen_scene(seed, config)?;
        let id = format!("{split_name}-{seed:08}");
        let png = split_dir.join(format!("{id}.png"));
        let img_tns = split_dir.join(format!("{id}.tns"));
        let depth_tns = split_dir.join(format!("{id}.depth.tns"));
        write_png(&scene.image, &png)?;
        scene.image.save_tns(&img_tns)?;
        scene.depth.save_tns(&depth_tns)?;
        let entry = ManifestEntry {
            id,
            image_path: img_tns
                .strip_prefix(out_dir)
                .unwrap_or(&img_tns)
                .display()
                .to_string(),
            depth_path: depth_tns
                .strip_prefix(out_dir)
                .unwrap_or(&depth_tns)
                .display()
                .to_string(),
            boxes: scene
                .annotations
                .iter()
                .map(|b| [b.class_id, b.x_min, b.y_min, b.x_max, b.y_max])
                .collect(),
        };
        manifest.push_str(&serde_json::to_string(&entry).expect("manifest entry serializes"));
        manifest.push('\n');
        entries.push(entry);
    }
    let manifest_path = out_dir.join(format!("{split_name}.jsonl"));
    fs::write(&manifest_path, &manifest).map_err(|e| LrodError::io(&manifest_path, e))?;
    let sha = format!("{:x}", Sha256::digest(manifest.as_bytes()));
    Ok(SplitResult {
        manifest_path,
        manifest_sha256: sha,
        entries,
    })
}

/// A scene loaded back from disk for training or evaluation.
#[derive(Clone, Debug)]
pub struct SceneRecord {
    pub id: String,
    pub image: Tensor,
    pub depth: Tensor,
    pub boxes: Vec<BoxLabel>,
}

pub fn load_split(manifest_path: &Path) -> Result<Vec<SceneRecord>> {
    let text = fs::read_to_string(manifest_path).map_err(|e| LrodError::io(manifest_path, e))?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| LrodError::Format {
                path: manifest_path.display().to_string(),
                reason: format!("line {}: {e}", lineno + 1),
            })?;
        let image = Tensor::load_tns(root.join(&entry.image_path))?;
        let depth = Tensor::load_tns(root.join(&entry.depth_path))?;
        records.push(SceneRecord {
            id: entry.id,
            image,
            depth,
            boxes: entry
                .boxes
                .iter()
                .map(|b| BoxLabel {
                    class_id: b[0],
                    x_min: b[1],
                    y_min: b[2],
                    x_max: b[3],
                    y_max: b[4],
                })
                .collect(),
        });
    }
    Ok(records)
}
