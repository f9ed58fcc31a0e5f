//! Input-space Lipschitz measurement by power iteration on the Jacobian,
//! dataset sweeps with box-plot statistics, feature-shift fractions, and the
//! training-dynamics inequality audit.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LrodError, Result};
use crate::rng::stream;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PowerIterConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for PowerIterConfig {
    fn default() -> Self {
        PowerIterConfig {
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SpectralEstimate {
    pub sigma: f64,
    pub iters: usize,
    pub converged: bool,
    /// Left singular vector estimate (output space), unit norm.
    pub u: Tensor,
    /// Right singular vector estimate (input space), unit norm.
    pub v: Tensor,
    /// Rayleigh estimates per iteration, non-decreasing up to roundoff.
    pub history: Vec<f64>,
}

/// Largest singular value of the input Jacobian of `f` at `x` by alternating
/// forward and reverse products: u <- Jv / |Jv|, v <- J^T u / |J^T u|.
/// A zero Jacobian returns sigma 0 with the converged flag set.
pub fn input_spectral_norm<F>(f: &F, x: &Tensor, cfg: &PowerIterConfig) -> Result<SpectralEstimate>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId>,
{
    let mut rng = stream(cfg.seed, "power-iter", 0);
    let mut v = Tensor::zeros(x.shape());
    for e in v.data_mut() {
        *e = rng.gen_range(-1.0..1.0);
    }
    let n = v.norm();
    if n == 0.0 {
        v.data_mut()[0] = 1.0;
    } else {
        v = v.scaled(1.0 / n);
    }

    let mut sigma = 0.0;
    let mut history = Vec::new();
    for iter in 1..=cfg.max_iters {
        let mut tape = Tape::new();
        let xn = tape.input(x.clone())?;
        let y = f(&mut tape, xn)?;
        let ju = tape.jvp(y, xn, &v)?;
        let jun = ju.norm();
        if jun == 0.0 {
            return Ok(SpectralEstimate {
                sigma: 0.0,
                iters: iter,
                converged: true,
                u: Tensor::zeros(tape.shape(y)),
                v,
                history,
            });
        }
        let u = ju.scaled(1.0 / jun);
        let jt = tape.vjp(y, &[xn], &u)?[0];
        let jtv = tape.value(jt).clone();
        let new_sigma = jtv.norm();
        if new_sigma == 0.0 {
            return Ok(SpectralEstimate {
                sigma: 0.0,
                iters: iter,
                converged: true,
                u,
                v,
                history,
            });
        }
        v = jtv.scaled(1.0 / new_sigma);
        history.push(new_sigma);
        let rel = (new_sigma - sigma).abs() / new_sigma.max(1e-300);
        sigma = new_sigma;
        if iter > 1 && rel < cfg.tol {
            return Ok(SpectralEstimate {
                sigma,
                iters: iter,
                converged: true,
                u,
                v,
                history,
            });
        }
        if iter == cfg.max_iters {
            return Ok(SpectralEstimate {
                sigma,
                iters: iter,
                converged: false,
                u,
                v,
                history,
            });
        }
    }
    unreachable!("loop always returns")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub per_sample: Vec<(String, f64)>,
    pub sup: f64,
    /// (q1, median, q3) by linear interpolation.
    pub quartiles: (f64, f64, f64),
    /// (min, max).
    pub whiskers: (f64, f64),
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Per-sample spectral norms with box-plot statistics. The power-iteration
/// start vector is seeded from the sample id, so results are independent of
/// sample order.
pub fn dataset_sweep<F>(
    f: &F,
    samples: &[(String, Tensor)],
    cfg: &PowerIterConfig,
) -> Result<LipschitzReport>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId>,
{
    if samples.is_empty() {
        return Err(LrodError::Parameter("dataset_sweep needs at least one sample".into()));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut iterations = Vec::with_capacity(samples.len());
    let mut converged = Vec::with_capacity(samples.len());
    for (id, x) in samples {
        let sample_cfg = PowerIterConfig {
            seed: stream(cfg.seed, id, 0).gen(),
            ..*cfg
        };
        let est = input_spectral_norm(f, x, &sample_cfg)?;
        per_sample.push((id.clone(), est.sigma));
        iterations.push(est.iters);
        converged.push(est.converged);
    }
    let mut sorted: Vec<f64> = per_sample.iter().map(|(_, s)| *s).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(LipschitzReport {
        sup: *sorted.last().unwrap(),
        quartiles: (
            quantile(&sorted, 0.25),
            quantile(&sorted, 0.5),
            quantile(&sorted, 0.75),
        ),
        whiskers: (sorted[0], *sorted.last().unwrap()),
        per_sample,
        iterations,
        converged,
    })
}

pub fn write_report_csv(report: &LipschitzReport, path: &Path) -> Result<()> {
    let mut f = File::create(path).map_err(|e| LrodError::io(path, e))?;
    writeln!(f, "id,sigma,iters,converged").map_err(|e| LrodError::io(path, e))?;
    for (i, (id, sigma)) in report.per_sample.iter().enumerate() {
        writeln!(
            f,
            "{id},{sigma},{},{}",
            report.iterations[i],
            if report.converged[i] { 1 } else { 0 }
        )
        .map_err(|e| LrodError::io(path, e))?;
    }
    Ok(())
}

pub fn write_report_json(report: &LipschitzReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, text).map_err(|e| LrodError::io(path, e))
}

/// Fraction of feature channels whose mean absolute activation moves by more
/// than `threshold` relative to its base scale between `x` and `x + dx`.
/// `features` returns the stage feature maps, each [C, H, W].
pub fn feature_shift_fraction<F>(features: &F, x: &Tensor, dx: &Tensor, threshold: f64) -> Result<f64>
where
    F: Fn(&mut Tape, VarId) -> Result<Vec<VarId>>,
{
    if x.shape() != dx.shape() {
        return Err(LrodError::shape("feature_shift_fraction", x.shape(), dx.shape()));
    }
    let eval = |img: Tensor| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xn = tape.constant(img)?;
        let maps = features(&mut tape, xn)?;
        let mut means = Vec::new();
        for m in maps {
            let t = tape.value(m);
            let (c, hw) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
            for ch in 0..c {
                let s: f64 = t.data()[ch * hw..(ch + 1) * hw].iter().map(|v| v.abs()).sum();
                means.push(s / hw as f64);
            }
        }
        Ok(means)
    };
    let base = eval(x.clone())?;
    let shifted = eval(x.added(dx)?)?;
    let moved = base
        .iter()
        .zip(&shifted)
        .filter(|(a, b)| (*b - *a).abs() > threshold * a.abs().max(1e-12))
        .count();
    Ok(moved as f64 / base.len() as f64)
}

/// One audited checkpoint: training step index and the full parameter vector.
#[derive(Clone, Debug)]
pub struct AuditPoint {
    pub t: usize,
    pub theta: Tensor,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AuditStep {
    pub t: usize,
    pub lip: f64,
    pub gamma: f64,
    pub xi: f64,
    pub dlipdt: f64,
    pub residual: f64,
    pub a1: bool,
    pub a2: bool,
    /// Set when the next checkpoint is not one stride away; derivative and
    /// residual are NaN in that case rather than interpolated.
    pub gap: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Remark1Trace {
    pub steps: Vec<AuditStep>,
    pub lambda: f64,
    pub mu: f64,
}

/// Inequality audit over a checkpoint sequence. For each step the descent
/// prediction is d lip / dt = -lambda * gamma + xi, where
/// gamma = <grad_b lip, grad_b L_res> and xi = -<grad_b lip, grad_b L_det>;
/// the residual is the forward-difference derivative minus that prediction
/// and shrinks linearly with the step size mu on smooth stretches.
pub fn remark1_audit<L, D, R>(
    points: &[AuditPoint],
    stride: usize,
    mu: f64,
    lambda: f64,
    lip_and_grad: L,
    det_grad: D,
    res_grad: R,
) -> Result<Remark1Trace>
where
    L: Fn(&Tensor) -> Result<(f64, Tensor)>,
    D: Fn(&Tensor) -> Result<Tensor>,
    R: Fn(&Tensor) -> Result<Tensor>,
{
    if points.len() < 2 {
        return Err(LrodError::Parameter("audit needs at least two checkpoints".into()));
    }
    let mut evals: Vec<(f64, f64, f64, bool, bool)> = Vec::with_capacity(points.len());
    for p in points {
        let (lip, glip) = lip_and_grad(&p.theta)?;
        let gd = det_grad(&p.theta)?;
        let gr = res_grad(&p.theta)?;
        let gamma = glip.dot(&gr);
        let xi = -glip.dot(&gd);
        let a1 = gr.norm() < gd.norm();
        let a2 = gamma > 0.0;
        evals.push((lip, gamma, xi, a1, a2));
    }
    let mut steps = Vec::with_capacity(points.len() - 1);
    for i in 0..points.len() - 1 {
        let (lip, gamma, xi, a1, a2) = evals[i];
        let dt = points[i + 1].t - points[i].t;
        let gap = dt != stride;
        let (dlipdt, residual) = if gap {
            (f64::NAN, f64::NAN)
        } else {
            let d = (evals[i + 1].0 - lip) / (mu * stride as f64);
            (d, d - (-lambda * gamma + xi))
        };
        steps.push(AuditStep {
            t: points[i].t,
            lip,
            gamma,
            xi,
            dlipdt,
            residual,
            a1,
            a2,
            gap,
        });
    }
    Ok(Remark1Trace { steps, lambda, mu })
}

pub fn write_audit_csv(trace: &Remark1Trace, path: &Path) -> Result<()> {
    let mut f = File::create(path).map_err(|e| LrodError::io(path, e))?;
    writeln!(f, "t,lip,gamma,xi,dlipdt,residual,a1,a2").map_err(|e| LrodError::io(path, e))?;
    for s in &trace.steps {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            s.t,
            s.lip,
            s.gamma,
            s.xi,
            s.dlipdt,
            s.residual,
            if s.a1 { 1 } else { 0 },
            if s.a2 { 1 } else { 0 }
        )
        .map_err(|e| LrodError::io(path, e))?;
    }
    Ok(())
}

/// Gradient of the converged Rayleigh quotient u^T J v with respect to the
/// parameters, holding u and v fixed. Differentiating through the frozen
/// singular vectors gives the exact gradient of sigma at simple singular
/// values without third-order differentiation.
pub fn spectral_norm_param_grad<F>(
    build: &F,
    theta: &Tensor,
    x: &Tensor,
    u: &Tensor,
    v: &Tensor,
) -> Result<Tensor>
where
    F: Fn(&mut Tape, VarId, VarId) -> Result<VarId>,
{
    let mut tape = Tape::new();
    let tn = tape.input(theta.clone())?;
    let xn = tape.input(x.clone())?;
    let y = build(&mut tape, xn, tn)?;
    let vc = tape.constant(v.clone())?;
    let jv = tape.jvp_node(y, xn, vc)?;
    let ylen = tape.value(y).len();
    let jv_flat = tape.reshape(jv, &[ylen])?;
    let uc = tape.constant(u.reshaped(vec![ylen])?)?;
    let s = tape.dot(jv_flat, uc)?;
    let g = tape.vjp(s, &[tn], &Tensor::scalar(1.0))?[0];
    Ok(tape.value(g).clone())
}
