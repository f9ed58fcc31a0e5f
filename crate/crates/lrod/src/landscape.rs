//! Filter-normalized 2-D loss-landscape scans and trajectory projection.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LrodError, Result};
use crate::model::ParamLayout;
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// values[i][j] = loss at (alphas[i], betas[j]); +inf marks non-finite.
    pub values: Vec<Vec<f64>>,
    pub direction_seeds: (u64, u64),
    pub center_loss: f64,
}

/// Gaussian draws for both directions with the second orthogonalized against
/// the first. No normalization yet; exposed so orthogonality is testable.
pub fn sample_raw_directions(dim: usize, seed: u64) -> (Tensor, Tensor) {
    let gauss = |tag: &str| {
        let mut rng = stream(seed, tag, 0);
        let mut t = Tensor::zeros(&[dim]);
        for v in t.data_mut() {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            *v = (-2.0 * u1.ln()).sqrt() * u2.cos();
        }
        t
    };
    let delta = gauss("landscape-delta");
    let mut eta = gauss("landscape-eta");
    let coef = eta.dot(&delta) / delta.dot(&delta);
    for (e, d) in eta.data_mut().iter_mut().zip(delta.data()) {
        *e -= coef * d;
    }
    (delta, eta)
}

/// Filters for normalization: one per output channel of a 4-dim weight, one
/// per channel of a bias, whole segment otherwise.
fn filter_ranges(layout: &ParamLayout) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    for seg in &layout.segments {
        let len: usize = seg.shape.iter().product();
        let per = if seg.shape.len() >= 2 {
            len / seg.shape[0]
        } else {
            len
        };
        let count = len / per;
        for c in 0..count {
            out.push((format!("{}[{c}]", seg.name), seg.offset + c * per, per));
        }
    }
    out
}

/// Rescale every filter of `dir` to the norm of the matching filter of theta.
/// Zero-norm filters of theta zero the direction there and are reported.
fn filter_normalize(dir: &mut Tensor, theta: &Tensor, layout: &ParamLayout) -> Vec<String> {
    let mut flagged = Vec::new();
    for (name, off, len) in filter_ranges(layout) {
        let tn: f64 = theta.data()[off..off + len].iter().map(|v| v * v).sum::<f64>().sqrt();
        let dn: f64 = dir.data()[off..off + len].iter().map(|v| v * v).sum::<f64>().sqrt();
        if tn == 0.0 || dn == 0.0 {
            for v in &mut dir.data_mut()[off..off + len] {
                *v = 0.0;
            }
            if tn == 0.0 {
                flagged.push(name);
            }
            continue;
        }
        let s = tn / dn;
        for v in &mut dir.data_mut()[off..off + len] {
            *v *= s;
        }
    }
    flagged
}

/// Two filter-normalized scan directions. Returns (delta, eta, flagged
/// zero-norm filter names).
pub fn sample_directions(
    theta: &Tensor,
    layout: &ParamLayout,
    seed: u64,
) -> Result<(Tensor, Tensor, Vec<String>)> {
    if theta.len() != layout.total {
        return Err(LrodError::Structural(format!(
            "theta length {} does not match layout total {}",
            theta.len(),
            layout.total
        )));
    }
    let (mut delta, mut eta) = sample_raw_directions(theta.len(), seed);
    let mut flagged = filter_normalize(&mut delta, theta, layout);
    let f2 = filter_normalize(&mut eta, theta, layout);
    for name in f2 {
        if !flagged.contains(&name) {
            flagged.push(name);
        }
    }
    Ok((delta, eta, flagged))
}

/// Symmetric coordinates when the range is centered on zero, so that
/// coords[i] == -coords[n-1-i] exactly.
fn coords(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let c = (n - 1) / 2;
    if lo == -hi {
        let step = hi / c as f64;
        (0..n).map(|i| (i as f64 - c as f64) * step).collect()
    } else {
        let step = (hi - lo) / (n - 1) as f64;
        (0..n).map(|i| lo + i as f64 * step).collect()
    }
}

/// Evaluate the loss over the grid theta + alpha*delta + beta*eta. The center
/// cell evaluates theta itself, bit for bit. Non-finite losses are stored as
/// +inf and the scan continues.
pub fn scan<F>(
    loss_fn: &F,
    theta: &Tensor,
    delta: &Tensor,
    eta: &Tensor,
    alpha_range: (f64, f64),
    beta_range: (f64, f64),
    n: usize,
    direction_seeds: (u64, u64),
) -> Result<LandscapeGrid>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if n < 3 || n % 2 == 0 {
        return Err(LrodError::Parameter(format!("grid size must be odd and >= 3, got {n}")));
    }
    let alphas = coords(alpha_range.0, alpha_range.1, n);
    let betas = coords(beta_range.0, beta_range.1, n);
    let mut values = vec![vec![0.0; n]; n];
    let mut center_loss = f64::NAN;
    for (i, &a) in alphas.iter().enumerate() {
        for (j, &b) in betas.iter().enumerate() {
            let point = if a == 0.0 && b == 0.0 {
                theta.clone()
            } else {
                let mut p = theta.clone();
                for ((pv, dv), ev) in p.data_mut().iter_mut().zip(delta.data()).zip(eta.data()) {
                    *pv += a * dv + b * ev;
                }
                p
            };
            let v = match loss_fn(&point) {
                Ok(v) if v.is_finite() => v,
                Ok(_) => f64::INFINITY,
                Err(LrodError::NonFinite { .. }) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            values[i][j] = v;
            if a == 0.0 && b == 0.0 {
                center_loss = v;
            }
        }
    }
    Ok(LandscapeGrid {
        alphas,
        betas,
        values,
        direction_seeds,
        center_loss,
    })
}

/// Least-squares coordinates of each checkpoint relative to the last one.
pub fn project_trajectory(
    checkpoints: &[Tensor],
    delta: &Tensor,
    eta: &Tensor,
) -> Result<Vec<(f64, f64)>> {
    if checkpoints.len() < 2 {
        return Err(LrodError::Parameter("trajectory needs at least two checkpoints".into()));
    }
    let dd = delta.dot(delta);
    let de = delta.dot(eta);
    let ee = eta.dot(eta);
    let det = dd * ee - de * de;
    if det.abs() <= 1e-12 * dd * ee {
        return Err(LrodError::Structural(
            "scan directions are linearly dependent; projection is singular".into(),
        ));
    }
    let last = checkpoints.last().unwrap();
    let mut out = Vec::with_capacity(checkpoints.len());
    for ck in checkpoints {
        let d = ck.added(&last.scaled(-1.0))?;
        let bd = d.dot(delta);
        let be = d.dot(eta);
        let alpha = (bd * ee - be * de) / det;
        let beta = (be * dd - bd * de) / det;
        out.push((alpha, beta));
    }
    Ok(out)
}

/// Mean absolute discrete Laplacian over interior cells with finite stencils.
pub fn roughness(grid: &LandscapeGrid) -> f64 {
    let n = grid.values.len();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let v = grid.values[i][j];
            let st = [
                grid.values[i - 1][j],
                grid.values[i + 1][j],
                grid.values[i][j - 1],
                grid.values[i][j + 1],
            ];
            if v.is_finite() && st.iter().all(|x| x.is_finite()) {
                sum += (st.iter().sum::<f64>() - 4.0 * v).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

pub fn write_grid_csv(grid: &LandscapeGrid, path: &Path) -> Result<()> {
    let mut f = File::create(path).map_err(|e| LrodError::io(path, e))?;
    for row in &grid.values {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", line.join(",")).map_err(|e| LrodError::io(path, e))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct GridMeta<'a> {
    alphas: &'a [f64],
    betas: &'a [f64],
    direction_seeds: (u64, u64),
    center_loss: f64,
    roughness: f64,
}

pub fn write_grid_meta_json(grid: &LandscapeGrid, path: &Path) -> Result<()> {
    let meta = GridMeta {
        alphas: &grid.alphas,
        betas: &grid.betas,
        direction_seeds: grid.direction_seeds,
        center_loss: grid.center_loss,
        roughness: roughness(grid),
    };
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(path, text).map_err(|e| LrodError::io(path, e))
}

pub fn write_trajectory_csv(points: &[(f64, f64)], steps: &[usize], path: &Path) -> Result<()> {
    let mut f = File::create(path).map_err(|e| LrodError::io(path, e))?;
    writeln!(f, "step,alpha,beta").map_err(|e| LrodError::io(path, e))?;
    for (s, (a, b)) in steps.iter().zip(points) {
        writeln!(f, "{s},{a},{b}").map_err(|e| LrodError::io(path, e))?;
    }
    Ok(())
}
