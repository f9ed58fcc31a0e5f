//! Analytic image degradations: atmospheric scattering (haze) and gamma
//! correction (low light). Used online during training and offline when
//! building validation splits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LrodError, Result};
use crate::rng::stream;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Scattering coefficient range sampled during training.
pub const BETA_RANGE: (f64, f64) = (0.5, 1.5);
/// Airlight per-channel sampling range. Bright airlight is the standard haze
/// assumption and keeps degraded images in gamut.
pub const AIRLIGHT_RANGE: (f64, f64) = (0.7, 1.0);
/// Gamma exponent range sampled during training.
pub const GAMMA_RANGE: (f64, f64) = (1.5, 5.0);

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct HazeParams {
    pub beta: f64,
    pub airlight: [f64; 3],
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct DarkParams {
    pub gamma: f64,
}

/// One sampled degradation with its parameters, as logged in manifests.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Degradation {
    Haze(HazeParams),
    Dark(DarkParams),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationMode {
    Haze,
    Dark,
}

impl std::str::FromStr for DegradationMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "haze" => Ok(DegradationMode::Haze),
            "dark" => Ok(DegradationMode::Dark),
            other => Err(format!("unknown degradation mode {other:?}")),
        }
    }
}

impl HazeParams {
    pub fn sample(rng: &mut impl Rng) -> Self {
        HazeParams {
            beta: rng.gen_range(BETA_RANGE.0..=BETA_RANGE.1),
            airlight: [
                rng.gen_range(AIRLIGHT_RANGE.0..=AIRLIGHT_RANGE.1),
                rng.gen_range(AIRLIGHT_RANGE.0..=AIRLIGHT_RANGE.1),
                rng.gen_range(AIRLIGHT_RANGE.0..=AIRLIGHT_RANGE.1),
            ],
        }
    }
}

impl DarkParams {
    pub fn sample(rng: &mut impl Rng) -> Self {
        DarkParams {
            gamma: rng.gen_range(GAMMA_RANGE.0..=GAMMA_RANGE.1),
        }
    }
}

/// Sample degradation parameters from a seeded stream.
pub fn sample_degradation(seed: u64, mode: DegradationMode) -> Degradation {
    let mut rng = stream(seed, "degrade", 0);
    match mode {
        DegradationMode::Haze => Degradation::Haze(HazeParams::sample(&mut rng)),
        DegradationMode::Dark => Degradation::Dark(DarkParams::sample(&mut rng)),
    }
}

/// Degradation parameters for a specific training sample: a deterministic
/// function of (base seed, epoch, sample index), so runs replay exactly.
pub fn online_degradation(
    base_seed: u64,
    epoch: usize,
    sample_index: usize,
    mode: DegradationMode,
) -> Degradation {
    let idx = (epoch as u64) << 32 | sample_index as u64;
    let mut rng = stream(base_seed, "degrade-online", idx);
    match mode {
        DegradationMode::Haze => Degradation::Haze(HazeParams::sample(&mut rng)),
        DegradationMode::Dark => Degradation::Dark(DarkParams::sample(&mut rng)),
    }
}

/// Degradation parameters for an evaluation sample, keyed by the sample index
/// alone so every verb that reads the validation split sees the same
/// corruption.
pub fn val_degradation(base_seed: u64, sample_index: usize, mode: DegradationMode) -> Degradation {
    let mut rng = stream(base_seed, "degrade-val", sample_index as u64);
    match mode {
        DegradationMode::Haze => Degradation::Haze(HazeParams::sample(&mut rng)),
        DegradationMode::Dark => Degradation::Dark(DarkParams::sample(&mut rng)),
    }
}

fn check_haze_shapes(clean: &[usize], depth: &[usize]) -> Result<()> {
    if clean.len() != 3 || clean[0] != 3 || depth.len() != 2 || clean[1..] != depth[..] {
        return Err(LrodError::shape("apply_haze", clean, depth));
    }
    Ok(())
}

/// Atmospheric scattering on the tape: `I = J·t + A·(1 − t)`, `t = exp(−β·d)`.
/// Differentiable with respect to the clean image; depth and airlight enter as
/// constants. For inputs in [0,1] the output is a convex combination of the
/// clean pixel and the airlight, so it stays in [0,1] without clamping.
pub fn apply_haze(tape: &mut Tape, clean: VarId, depth: &Tensor, p: &HazeParams) -> Result<VarId> {
    if p.beta <= 0.0 {
        return Err(LrodError::Parameter(format!(
            "haze beta must be > 0, got {}",
            p.beta
        )));
    }
    check_haze_shapes(tape.shape(clean), depth.shape())?;
    let t = depth.map(|d| (-p.beta * d).exp());
    let tn = tape.constant(t.clone())?;
    let shape = tape.shape(clean).to_vec();
    let t3 = tape.broadcast(tn, &shape)?;
    let attenuated = tape.mul(clean, t3)?;
    let a = tape.constant(Tensor::new(vec![3, 1, 1], p.airlight.to_vec())?)?;
    let ones = tape.constant(Tensor::full(depth.shape(), 1.0))?;
    let one_minus_t = {
        let tn2 = tape.constant(t)?;
        tape.sub(ones, tn2)?
    };
    let omt3 = tape.broadcast(one_minus_t, &shape)?;
    let glow = tape.mul(a, omt3)?;
    tape.add(attenuated, glow)
}

/// Plain-tensor haze, clamped to [0,1]. Used by the data pipeline.
pub fn apply_haze_tensor(clean: &Tensor, depth: &Tensor, p: &HazeParams) -> Result<Tensor> {
    if p.beta <= 0.0 {
        return Err(LrodError::Parameter(format!(
            "haze beta must be > 0, got {}",
            p.beta
        )));
    }
    check_haze_shapes(clean.shape(), depth.shape())?;
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let mut out = Tensor::zeros(clean.shape());
    let od = out.data_mut();
    for c in 0..3 {
        let a = p.airlight[c];
        for i in 0..h * w {
            let t = (-p.beta * depth.data()[i]).exp();
            od[c * h * w + i] = (clean.data()[c * h * w + i] * t + a * (1.0 - t)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Gamma correction on the tape: `out = clean^γ` elementwise.
pub fn apply_gamma(tape: &mut Tape, clean: VarId, p: &DarkParams) -> Result<VarId> {
    if tape.value(clean).data().iter().any(|&v| v < 0.0) {
        return Err(LrodError::Parameter(
            "apply_gamma: negative input outside domain".into(),
        ));
    }
    tape.pow_const(clean, p.gamma)
}

/// Plain-tensor gamma correction.
pub fn apply_gamma_tensor(clean: &Tensor, p: &DarkParams) -> Result<Tensor> {
    if clean.data().iter().any(|&v| v < 0.0) {
        return Err(LrodError::Parameter(
            "apply_gamma: negative input outside domain".into(),
        ));
    }
    Ok(clean.map(|v| v.powf(p.gamma)))
}

/// Apply a sampled degradation to a (clean, depth) pair without a tape.
pub fn apply_tensor(clean: &Tensor, depth: &Tensor, d: &Degradation) -> Result<Tensor> {
    match d {
        Degradation::Haze(p) => apply_haze_tensor(clean, depth, p),
        Degradation::Dark(p) => apply_gamma_tensor(clean, p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;

    fn test_scene(h: usize, w: usize) -> (Tensor, Tensor) {
        let mut img = Tensor::zeros(&[3, h, w]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 31 % 17) as f64) / 17.0;
        }
        let mut depth = Tensor::zeros(&[h, w]);
        for (i, v) in depth.data_mut().iter_mut().enumerate() {
            *v = ((i * 13 % 23) as f64) / 23.0;
        }
        (img, depth)
    }

    #[test]
    fn haze_beta_near_zero_is_identity() {
        let (img, depth) = test_scene(4, 5);
        let p = HazeParams {
            beta: 1e-300,
            airlight: [1.0; 3],
        };
        let out = apply_haze_tensor(&img, &depth, &p).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn haze_forced_pixel_value() {
        // depth 1, beta = ln 2, airlight 1: pixel 0.5 -> 0.5*0.5 + 1.0*0.5 = 0.75
        let img = Tensor::full(&[3, 1, 1], 0.5);
        let depth = Tensor::full(&[1, 1], 1.0);
        let p = HazeParams {
            beta: std::f64::consts::LN_2,
            airlight: [1.0; 3],
        };
        let out = apply_haze_tensor(&img, &depth, &p).unwrap();
        for &v in out.data() {
            assert!((v - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn haze_matches_scalar_loop_oracle() {
        let (img, depth) = test_scene(6, 7);
        let p = HazeParams {
            beta: 1.0,
            airlight: [0.8, 0.9, 0.75],
        };
        let mut tape = Tape::new();
        let x = tape.input(img.clone()).unwrap();
        let y = apply_haze(&mut tape, x, &depth, &p).unwrap();
        let out = tape.value(y);
        for c in 0..3 {
            for i in 0..42 {
                let t = (-p.beta * depth.data()[i]).exp();
                let expect = img.data()[c * 42 + i] * t + p.airlight[c] * (1.0 - t);
                assert!((out.data()[c * 42 + i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn haze_saturates_to_airlight() {
        let (img, mut depth) = test_scene(4, 4);
        for v in depth.data_mut() {
            *v = 0.5 + 0.5 * *v;
        }
        let p = HazeParams {
            beta: 50.0,
            airlight: [0.85, 0.8, 0.95],
        };
        let out = apply_haze_tensor(&img, &depth, &p).unwrap();
        for c in 0..3 {
            for i in 0..16 {
                assert!((out.data()[c * 16 + i] - p.airlight[c]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn haze_is_one_lipschitz_in_sup_norm() {
        let (img, depth) = test_scene(5, 5);
        let p = HazeParams {
            beta: 0.9,
            airlight: [0.8; 3],
        };
        let base = apply_haze_tensor(&img, &depth, &p).unwrap();
        let mut rng = stream(11, "lip-test", 0);
        for _ in 0..20 {
            let mut pert = img.clone();
            let mut sup = 0.0f64;
            for v in pert.data_mut() {
                let d: f64 = rng.gen_range(-0.01..0.01);
                let e = (*v + d).clamp(0.0, 1.0) - *v;
                *v += e;
                sup = sup.max(e.abs());
            }
            let out = apply_haze_tensor(&pert, &depth, &p).unwrap();
            let diff = out
                .data()
                .iter()
                .zip(base.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(diff <= sup + 1e-12);
        }
    }

    #[test]
    fn haze_rejects_bad_params_and_shapes() {
        let (img, depth) = test_scene(4, 4);
        let bad = HazeParams {
            beta: 0.0,
            airlight: [1.0; 3],
        };
        assert!(apply_haze_tensor(&img, &depth, &bad).is_err());
        let p = HazeParams {
            beta: 1.0,
            airlight: [1.0; 3],
        };
        let misaligned = Tensor::zeros(&[5, 4]);
        assert!(apply_haze_tensor(&img, &misaligned, &p).is_err());
    }

    #[test]
    fn gamma_identity_and_forced_values() {
        let (img, _) = test_scene(3, 3);
        let id = apply_gamma_tensor(&img, &DarkParams { gamma: 1.0 }).unwrap();
        assert_eq!(id, img);
        let quarter = Tensor::full(&[3, 1, 1], 0.25);
        let out = apply_gamma_tensor(&quarter, &DarkParams { gamma: 2.0 }).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.0625).abs() < 1e-15));
        let gray = Tensor::full(&[3, 2, 2], 0.5);
        let out = apply_gamma_tensor(&gray, &DarkParams { gamma: 5.0 }).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.03125).abs() < 1e-15));
    }

    #[test]
    fn gamma_rejects_negative_input() {
        let img = Tensor::new(vec![3, 1, 1], vec![0.5, -0.1, 0.2]).unwrap();
        assert!(apply_gamma_tensor(&img, &DarkParams { gamma: 2.0 }).is_err());
    }

    #[test]
    fn degradations_pass_gradient_checks() {
        let (img, depth) = test_scene(4, 4);
        let p = HazeParams {
            beta: 1.2,
            airlight: [0.8, 0.9, 0.7],
        };
        let err = grad_check(
            |t, x| {
                let hazy = apply_haze(t, x, &depth, &p)?;
                let sq = t.mul(hazy, hazy)?;
                t.sum_all(sq)
            },
            &img,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "haze gradient error {err}");

        let mut img01 = img.clone();
        for v in img01.data_mut() {
            *v = 0.1 + 0.8 * *v;
        }
        let err = grad_check(
            |t, x| {
                let dark = apply_gamma(t, x, &DarkParams { gamma: 2.5 })?;
                t.sum_all(dark)
            },
            &img01,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "gamma gradient error {err}");
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let a = sample_degradation(42, DegradationMode::Haze);
        let b = sample_degradation(42, DegradationMode::Haze);
        assert_eq!(a, b);

        let mut betas = Vec::new();
        let mut gammas = Vec::new();
        for i in 0..10_000 {
            match sample_degradation(i, DegradationMode::Haze) {
                Degradation::Haze(p) => {
                    betas.push(p.beta);
                    for a in p.airlight {
                        assert!((AIRLIGHT_RANGE.0..=AIRLIGHT_RANGE.1).contains(&a));
                    }
                }
                _ => unreachable!(),
            }
            match sample_degradation(i, DegradationMode::Dark) {
                Degradation::Dark(p) => gammas.push(p.gamma),
                _ => unreachable!(),
            }
        }
        let bmin = betas.iter().cloned().fold(f64::INFINITY, f64::min);
        let bmax = betas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(bmin >= BETA_RANGE.0 && bmax <= BETA_RANGE.1);
        let gmean: f64 = gammas.iter().sum::<f64>() / gammas.len() as f64;
        let expect = (GAMMA_RANGE.0 + GAMMA_RANGE.1) / 2.0;
        assert!((gmean - expect).abs() / expect < 0.03, "gamma mean {gmean}");
    }
}
