//! Dense reference routines. Deliberately simple and independent of the tape
//! machinery so they can serve as oracles for iterative estimates.

use crate::error::{LrodError, Result};
use crate::tensor::Tensor;

/// Largest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
pub fn sym_eig_max(a: &Tensor) -> Result<f64> {
    let shape = a.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(LrodError::shape("sym_eig_max", shape, &[shape[0], shape[0]]));
    }
    let n = shape[0];
    let mut m: Vec<f64> = a.data().to_vec();
    let idx = |i: usize, j: usize| i * n + j;
    let scale: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[idx(p, q)] * m[idx(p, q)];
            }
        }
        if off.sqrt() < 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[idx(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[idx(p, p)];
                let aqq = m[idx(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[idx(k, p)];
                    let akq = m[idx(k, q)];
                    m[idx(k, p)] = c * akp - s * akq;
                    m[idx(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[idx(p, k)];
                    let aqk = m[idx(q, k)];
                    m[idx(p, k)] = c * apk - s * aqk;
                    m[idx(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    Ok((0..n).map(|i| m[idx(i, i)]).fold(f64::NEG_INFINITY, f64::max))
}

/// Largest singular value of an arbitrary matrix via the Gram matrix.
pub fn svd_max(w: &Tensor) -> Result<f64> {
    let shape = w.shape();
    if shape.len() != 2 {
        return Err(LrodError::shape("svd_max", shape, &[0, 0]));
    }
    let (r, c) = (shape[0], shape[1]);
    // form the smaller Gram matrix
    let n = r.min(c);
    let mut g = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            if r <= c {
                for k in 0..c {
                    s += w.data()[i * c + k] * w.data()[j * c + k];
                }
            } else {
                for k in 0..r {
                    s += w.data()[k * c + i] * w.data()[k * c + j];
                }
            }
            g.data_mut()[i * n + j] = s;
        }
    }
    Ok(sym_eig_max(&g)?.max(0.0).sqrt())
}
