//! Raw numeric kernels over plain tensors. The tape calls into these; they do
//! not know about the graph.

use crate::error::{LrodError, Result};
use crate::tensor::Tensor;

pub fn conv2d_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Validate the conv configuration supported by this crate: square kernels up
/// to 7, stride 1 or 2, zero padding smaller than the kernel.
pub fn check_conv_config(k: usize, stride: usize, pad: usize) -> Result<()> {
    if !(1..=7).contains(&k) {
        return Err(LrodError::Parameter(format!("conv kernel {k} outside 1..=7")));
    }
    if stride != 1 && stride != 2 {
        return Err(LrodError::Parameter(format!("conv stride {stride} not in {{1,2}}")));
    }
    if pad >= k {
        return Err(LrodError::Parameter(format!("conv pad {pad} >= kernel {k}")));
    }
    Ok(())
}

/// Direct convolution: x [Cin,H,W] * w [Cout,Cin,k,k] -> [Cout,Ho,Wo].
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 3 || ws.len() != 4 || ws[2] != ws[3] || xs[0] != ws[1] {
        return Err(LrodError::shape("conv2d", xs, ws));
    }
    let (cin, h, wd) = (xs[0], xs[1], xs[2]);
    let (cout, k) = (ws[0], ws[2]);
    check_conv_config(k, stride, pad)?;
    if h + 2 * pad < k || wd + 2 * pad < k {
        return Err(LrodError::shape("conv2d", xs, ws));
    }
    let ho = conv2d_out_dim(h, k, stride, pad);
    let wo = conv2d_out_dim(wd, k, stride, pad);
    let mut out = vec![0.0; cout * ho * wo];
    let xd = x.data();
    let wdat = w.data();
    for co in 0..cout {
        for oy in 0..ho {
            let iy0 = oy * stride;
            for ox in 0..wo {
                let ix0 = ox * stride;
                let mut acc = 0.0;
                for ci in 0..cin {
                    let xbase = ci * h * wd;
                    let wbase = (co * cin + ci) * k * k;
                    for ky in 0..k {
                        let iy = iy0 + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let row = xbase + (iy - pad) * wd;
                        let wrow = wbase + ky * k;
                        for kx in 0..k {
                            let ix = ix0 + kx;
                            if ix < pad || ix >= wd + pad {
                                continue;
                            }
                            acc += xd[row + (ix - pad)] * wdat[wrow + kx];
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::new(vec![cout, ho, wo], out)
}

/// Adjoint of conv2d with respect to its input: scatter g [Cout,Ho,Wo] through
/// w [Cout,Cin,k,k] into an [Cin,H,W] gradient.
pub fn conv2d_grad_input(
    g: &Tensor,
    w: &Tensor,
    x_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (gs, ws) = (g.shape(), w.shape());
    if gs.len() != 3 || ws.len() != 4 || gs[0] != ws[0] || x_shape.len() != 3 {
        return Err(LrodError::shape("conv2d_grad_input", gs, ws));
    }
    let (cin, h, wd) = (x_shape[0], x_shape[1], x_shape[2]);
    let (cout, k) = (ws[0], ws[2]);
    let (ho, wo) = (gs[1], gs[2]);
    if cin != ws[1]
        || ho != conv2d_out_dim(h, k, stride, pad)
        || wo != conv2d_out_dim(wd, k, stride, pad)
    {
        return Err(LrodError::shape("conv2d_grad_input", gs, x_shape));
    }
    let mut out = vec![0.0; cin * h * wd];
    let gd = g.data();
    let wdat = w.data();
    for co in 0..cout {
        for oy in 0..ho {
            let iy0 = oy * stride;
            for ox in 0..wo {
                let ix0 = ox * stride;
                let gv = gd[(co * ho + oy) * wo + ox];
                if gv == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    let xbase = ci * h * wd;
                    let wbase = (co * cin + ci) * k * k;
                    for ky in 0..k {
                        let iy = iy0 + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let row = xbase + (iy - pad) * wd;
                        let wrow = wbase + ky * k;
                        for kx in 0..k {
                            let ix = ix0 + kx;
                            if ix < pad || ix >= wd + pad {
                                continue;
                            }
                            out[row + (ix - pad)] += gv * wdat[wrow + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), out)
}

/// Adjoint of conv2d with respect to its kernel.
pub fn conv2d_grad_kernel(
    g: &Tensor,
    x: &Tensor,
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (gs, xs) = (g.shape(), x.shape());
    if gs.len() != 3 || xs.len() != 3 || w_shape.len() != 4 {
        return Err(LrodError::shape("conv2d_grad_kernel", gs, xs));
    }
    let (cin, h, wd) = (xs[0], xs[1], xs[2]);
    let (cout, k) = (w_shape[0], w_shape[2]);
    let (ho, wo) = (gs[1], gs[2]);
    if gs[0] != cout
        || w_shape[1] != cin
        || ho != conv2d_out_dim(h, k, stride, pad)
        || wo != conv2d_out_dim(wd, k, stride, pad)
    {
        return Err(LrodError::shape("conv2d_grad_kernel", gs, w_shape));
    }
    let mut out = vec![0.0; cout * cin * k * k];
    let gd = g.data();
    let xd = x.data();
    for co in 0..cout {
        for oy in 0..ho {
            let iy0 = oy * stride;
            for ox in 0..wo {
                let ix0 = ox * stride;
                let gv = gd[(co * ho + oy) * wo + ox];
                if gv == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    let xbase = ci * h * wd;
                    let wbase = (co * cin + ci) * k * k;
                    for ky in 0..k {
                        let iy = iy0 + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let row = xbase + (iy - pad) * wd;
                        let wrow = wbase + ky * k;
                        for kx in 0..k {
                            let ix = ix0 + kx;
                            if ix < pad || ix >= wd + pad {
                                continue;
                            }
                            out[wrow + kx] += gv * xd[row + (ix - pad)];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(w_shape.to_vec(), out)
}

/// Matrix product [m,k] x [k,n] -> [m,n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(LrodError::shape("matmul", sa, sb));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = p * n;
            let orow = i * n;
            for j in 0..n {
                out[orow + j] += av * bd[brow + j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let s = a.shape();
    if s.len() != 2 {
        return Err(LrodError::shape("transpose", s, s));
    }
    let (m, n) = (s[0], s[1]);
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// True when `from` can broadcast to `to` by trailing-dimension alignment:
/// `from` is aligned to the trailing axes of `to`, each matching dim equal or 1.
pub fn broadcastable(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let off = to.len() - from.len();
    from.iter()
        .enumerate()
        .all(|(i, &d)| d == to[off + i] || d == 1)
}

pub fn broadcast(x: &Tensor, to: &[usize]) -> Result<Tensor> {
    if !broadcastable(x.shape(), to) {
        return Err(LrodError::shape("broadcast", x.shape(), to));
    }
    let mut out = Tensor::zeros(to);
    let from = x.shape().to_vec();
    let off = to.len() - from.len();
    let n: usize = to.iter().product();
    let xd = x.data();
    let od = out.data_mut();
    // strides of x mapped into to-space (0 where broadcast)
    let mut strides = vec![0usize; to.len()];
    {
        let mut acc = 1usize;
        for i in (0..from.len()).rev() {
            strides[off + i] = if from[i] == 1 { 0 } else { acc };
            acc *= from[i];
        }
    }
    let mut idx = vec![0usize; to.len()];
    for flat in 0..n {
        let mut xi = 0usize;
        for (d, &s) in idx.iter().zip(strides.iter()) {
            xi += d * s;
        }
        od[flat] = xd[xi];
        for ax in (0..to.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < to[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(out)
}

/// Adjoint of `broadcast`: reduce `x` down to `to` by summing the expanded axes.
pub fn sum_to(x: &Tensor, to: &[usize]) -> Result<Tensor> {
    if !broadcastable(to, x.shape()) {
        return Err(LrodError::shape("sum_to", x.shape(), to));
    }
    let from = x.shape().to_vec();
    let off = from.len() - to.len();
    let mut out = Tensor::zeros(to);
    let od = out.data_mut();
    let xd = x.data();
    let mut strides = vec![0usize; from.len()];
    {
        let mut acc = 1usize;
        for i in (0..to.len()).rev() {
            strides[off + i] = if to[i] == 1 { 0 } else { acc };
            acc *= to[i];
        }
    }
    let mut idx = vec![0usize; from.len()];
    for flat in 0..xd.len() {
        let mut oi = 0usize;
        for (d, &s) in idx.iter().zip(strides.iter()) {
            oi += d * s;
        }
        od[oi] += xd[flat];
        for ax in (0..from.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < from[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(out)
}

pub fn sum_axis_keepdim(x: &Tensor, axis: usize) -> Result<Tensor> {
    let s = x.shape();
    if axis >= s.len() {
        return Err(LrodError::Parameter(format!(
            "sum_axis: axis {axis} out of range for shape {s:?}"
        )));
    }
    let mut to = s.to_vec();
    to[axis] = 1;
    sum_to(x, &to)
}

/// Per-window argmax indices of 2x2 stride-2 pooling over [C,H,W].
pub fn pool_argmax(x: &Tensor) -> Result<Vec<usize>> {
    let s = x.shape();
    if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
        return Err(LrodError::shape("max_pool2x2", s, s));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let xd = x.data();
    let mut idx = Vec::with_capacity(c * (h / 2) * (w / 2));
    for ci in 0..c {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let base = ci * h * w + 2 * oy * w + 2 * ox;
                let cands = [base, base + 1, base + w, base + w + 1];
                let best = cands
                    .iter()
                    .copied()
                    .max_by(|&a, &b| xd[a].partial_cmp(&xd[b]).unwrap_or(std::cmp::Ordering::Equal))
                    .unwrap();
                idx.push(best);
            }
        }
    }
    Ok(idx)
}

/// Gather `v` at the pooling argmax positions of the source activation.
pub fn pool_select(v: &Tensor, argmax: &[usize]) -> Result<Tensor> {
    let s = v.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let out: Vec<f64> = argmax.iter().map(|&i| v.data()[i]).collect();
    Tensor::new(vec![c, h / 2, w / 2], out)
}

/// Scatter pooled values `g` back to the argmax positions, zeros elsewhere.
pub fn pool_scatter(g: &Tensor, argmax: &[usize], full_shape: &[usize]) -> Result<Tensor> {
    let mut out = Tensor::zeros(full_shape);
    let od = out.data_mut();
    for (gi, &i) in argmax.iter().enumerate() {
        od[i] += g.data()[gi];
    }
    Ok(out)
}

/// Nearest-neighbour x2 upsample of [C,H,W].
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(LrodError::shape("upsample2", s, s));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    let od = out.data_mut();
    let xd = x.data();
    for ci in 0..c {
        for y in 0..h {
            for xw in 0..w {
                let v = xd[ci * h * w + y * w + xw];
                let base = ci * 4 * h * w + 2 * y * 2 * w + 2 * xw;
                od[base] = v;
                od[base + 1] = v;
                od[base + 2 * w] = v;
                od[base + 2 * w + 1] = v;
            }
        }
    }
    Ok(out)
}

/// Adjoint of `upsample2`: sum each 2x2 block.
pub fn downsample_sum2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
        return Err(LrodError::shape("downsample_sum2", s, s));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(&[c, h / 2, w / 2]);
    let od = out.data_mut();
    let xd = x.data();
    for ci in 0..c {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let base = ci * h * w + 2 * oy * w + 2 * ox;
                od[ci * (h / 2) * (w / 2) + oy * (w / 2) + ox] =
                    xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1];
            }
        }
    }
    Ok(out)
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(LrodError::Parameter("concat of zero tensors".into()));
    }
    let first = parts[0].shape();
    if axis >= first.len() {
        return Err(LrodError::Parameter(format!(
            "concat axis {axis} out of range for shape {first:?}"
        )));
    }
    let mut total = 0usize;
    for p in parts {
        let s = p.shape();
        if s.len() != first.len()
            || s.iter()
                .enumerate()
                .any(|(i, &d)| i != axis && d != first[i])
        {
            return Err(LrodError::shape("concat", first, s));
        }
        total += s[axis];
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    let (outer, _, inner) = split_at_axis(&shape, axis);
    let mut out = Tensor::zeros(&shape);
    let od = out.data_mut();
    for o in 0..outer {
        let mut dst = o * total * inner;
        for p in parts {
            let m = p.shape()[axis];
            let src = o * m * inner;
            od[dst..dst + m * inner].copy_from_slice(&p.data()[src..src + m * inner]);
            dst += m * inner;
        }
    }
    Ok(out)
}

pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let s = x.shape();
    if axis >= s.len() || start + len > s[axis] {
        return Err(LrodError::Parameter(format!(
            "slice [{start}, {start}+{len}) on axis {axis} out of range for shape {s:?}"
        )));
    }
    let (outer, mid, inner) = split_at_axis(s, axis);
    let mut shape = s.to_vec();
    shape[axis] = len;
    let mut out = Tensor::zeros(&shape);
    let od = out.data_mut();
    let xd = x.data();
    for o in 0..outer {
        let src = (o * mid + start) * inner;
        od[o * len * inner..(o + 1) * len * inner].copy_from_slice(&xd[src..src + len * inner]);
    }
    Ok(out)
}

/// Adjoint of `slice`: place `g` into a zero tensor of the original shape.
pub fn pad_slice(g: &Tensor, axis: usize, start: usize, full_shape: &[usize]) -> Result<Tensor> {
    let gs = g.shape();
    let len = gs[axis];
    let (outer, mid, inner) = split_at_axis(full_shape, axis);
    let mut out = Tensor::zeros(full_shape);
    let od = out.data_mut();
    let gd = g.data();
    for o in 0..outer {
        let dst = (o * mid + start) * inner;
        od[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
    }
    Ok(out)
}
