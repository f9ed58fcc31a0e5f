//! A fixed tiny two-layer network whose parameter Jacobian is cheap to
//! materialize in full. Serves as the ground-truth fixture when validating
//! the stochastic gradient-norm estimator.

use crate::error::Result;
use crate::model::LEAKY_SLOPE;
use crate::rng::stream;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub const IN_DIM: usize = 8;
pub const HIDDEN: usize = 10;
pub const OUT_DIM: usize = 32;

/// Total parameter count: two weight matrices plus biases.
pub fn param_count() -> usize {
    HIDDEN * IN_DIM + HIDDEN + OUT_DIM * HIDDEN + OUT_DIM
}

/// Fixed deterministic input vector.
pub fn probe_input() -> Tensor {
    let data: Vec<f64> = (0..IN_DIM).map(|i| 0.25 * (i as f64 + 1.0).sin()).collect();
    Tensor::new(vec![IN_DIM, 1], data).expect("static shape")
}

/// Gaussian parameter draw for a given seed.
pub fn init(seed: u64) -> Tensor {
    let mut rng = stream(seed, "refnet-init", 0);
    let mut flat = Tensor::zeros(&[param_count()]);
    for v in flat.data_mut() {
        let u1: f64 = rand::Rng::gen_range(&mut rng, f64::EPSILON..1.0);
        let u2: f64 = rand::Rng::gen_range(&mut rng, 0.0..std::f64::consts::TAU);
        *v = 0.3 * (-2.0 * u1.ln()).sqrt() * u2.cos();
    }
    flat
}

/// Forward pass W2 · leaky(W1 x + b1) + b2 from the flat parameter node.
pub fn forward(tape: &mut Tape, theta: VarId, x: &Tensor) -> Result<VarId> {
    let mut off = 0;
    let mut seg = |tape: &mut Tape, rows: usize, cols: usize| -> Result<VarId> {
        let len = rows * cols;
        let s = tape.slice(theta, 0, off, len)?;
        off += len;
        tape.reshape(s, &[rows, cols])
    };
    let w1 = seg(tape, HIDDEN, IN_DIM)?;
    let b1 = seg(tape, HIDDEN, 1)?;
    let w2 = seg(tape, OUT_DIM, HIDDEN)?;
    let b2 = seg(tape, OUT_DIM, 1)?;
    let xv = tape.constant(x.clone())?;
    let h = tape.matmul(w1, xv)?;
    let h = tape.add(h, b1)?;
    let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
    let o = tape.matmul(w2, h)?;
    tape.add(o, b2)
}

/// Exact Frobenius norm of the parameter Jacobian via one pullback per output.
pub fn exact_frobenius(flat: &Tensor, x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let theta = tape.input(flat.clone())?;
    let f = forward(&mut tape, theta, x)?;
    let out_shape = tape.shape(f).to_vec();
    let out_len: usize = out_shape.iter().product();
    let mut fro2 = 0.0;
    for j in 0..out_len {
        let mut e = Tensor::zeros(&out_shape);
        e.data_mut()[j] = 1.0;
        let row = tape.vjp(f, &[theta], &e)?[0];
        fro2 += tape.value(row).data().iter().map(|v| v * v).sum::<f64>();
    }
    Ok(fro2.sqrt())
}
