//! Append-only computation tape with reverse-mode differentiation.
//!
//! Every operation records a node holding its inputs and its computed value.
//! The backward pass does not mutate anything: it appends new nodes that
//! compute the adjoints, with every VJP rule expressed in the same primitive
//! set. A gradient is therefore itself a differentiable graph, which is what
//! makes double backprop (gradient-norm penalties, Hessian-vector products)
//! work without any special casing.
//!
//! A tape is confined to one thread. Independent tapes never share state.

use crate::error::{LrodError, Result};
use crate::kernels as k;
use crate::tensor::Tensor;

/// Handle to a node on a tape.
pub type VarId = usize;

// some payload fields exist only for Debug diagnostics; shapes live on nodes
#[allow(dead_code)]
#[derive(Clone, Debug)]
enum Op {
    Input,
    Const,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    Neg(VarId),
    ScaleConst(VarId, f64),
    Broadcast(VarId),
    SumTo(VarId),
    MatMul(VarId, VarId),
    Transpose(VarId),
    Conv2d {
        x: VarId,
        w: VarId,
        stride: usize,
        pad: usize,
    },
    ConvGradInput {
        g: VarId,
        w: VarId,
        stride: usize,
        pad: usize,
    },
    ConvGradKernel {
        g: VarId,
        x: VarId,
        stride: usize,
        pad: usize,
    },
    LeakyRelu(VarId, f64),
    Sigmoid(VarId),
    Exp(VarId),
    Log(VarId),
    Sqrt(VarId),
    PowConst(VarId, f64),
    SumAll(VarId),
    SumAxis(VarId, usize),
    PoolSelect {
        v: VarId,
        argmax: std::rc::Rc<Vec<usize>>,
        full_shape: Vec<usize>,
    },
    PoolScatter {
        g: VarId,
        argmax: std::rc::Rc<Vec<usize>>,
    },
    Upsample2(VarId),
    DownsampleSum2(VarId),
    Concat(Vec<VarId>, usize),
    Slice {
        x: VarId,
        axis: usize,
        start: usize,
        len: usize,
    },
    PadSlice {
        g: VarId,
        axis: usize,
        start: usize,
        full_shape: Vec<usize>,
    },
    Reshape(VarId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::ScaleConst(..) => "scale",
            Op::Broadcast(..) => "broadcast",
            Op::SumTo(..) => "sum_to",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvGradInput { .. } => "conv2d_grad_input",
            Op::ConvGradKernel { .. } => "conv2d_grad_kernel",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::PowConst(..) => "pow",
            Op::SumAll(..) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::PoolSelect { .. } => "max_pool2x2",
            Op::PoolScatter { .. } => "max_pool2x2_grad",
            Op::Upsample2(..) => "upsample2",
            Op::DownsampleSum2(..) => "downsample_sum2",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::PadSlice { .. } => "pad_slice",
            Op::Reshape(..) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<VarId> {
        match self {
            Op::Input | Op::Const => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::ScaleConst(a, _)
            | Op::Broadcast(a)
            | Op::SumTo(a)
            | Op::Transpose(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::PowConst(a, _)
            | Op::SumAll(a)
            | Op::SumAxis(a, _)
            | Op::Upsample2(a)
            | Op::DownsampleSum2(a)
            | Op::Reshape(a)
            | Op::Slice { x: a, .. }
            | Op::PadSlice { g: a, .. }
            | Op::PoolSelect { v: a, .. }
            | Op::PoolScatter { g: a, .. } => vec![*a],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::ConvGradInput { g, w, .. } => vec![*g, *w],
            Op::ConvGradKernel { g, x, .. } => vec![*g, *x],
            Op::Concat(parts, _) => parts.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only differentiable computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id].needs_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<VarId> {
        if !value.is_finite() {
            return Err(LrodError::NonFinite {
                op: op.name().to_string(),
            });
        }
        let needs_grad = match op {
            Op::Input => true,
            Op::Const => false,
            _ => op.inputs().iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> Result<VarId> {
        self.push(Op::Input, value)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<VarId> {
        self.push(Op::Const, value)
    }

    pub fn scalar(&mut self, v: f64) -> Result<VarId> {
        self.constant(Tensor::scalar(v))
    }

    // ---- elementwise binaries with trailing-dimension broadcasting ----

    fn align(&mut self, op_name: &str, a: VarId, b: VarId) -> Result<(VarId, VarId)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            Ok((a, b))
        } else if k::broadcastable(&sa, &sb) {
            let ba = self.broadcast(a, &sb)?;
            Ok((ba, b))
        } else if k::broadcastable(&sb, &sa) {
            let bb = self.broadcast(b, &sa)?;
            Ok((a, bb))
        } else {
            Err(LrodError::shape(op_name, &sa, &sb))
        }
    }

    fn map2(&self, a: VarId, b: VarId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).unwrap()
    }

    fn map1(&self, a: VarId, f: impl Fn(f64) -> f64) -> Tensor {
        self.nodes[a].value.map(f)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (a, b) = self.align("add", a, b)?;
        let v = self.map2(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (a, b) = self.align("sub", a, b)?;
        let v = self.map2(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (a, b) = self.align("mul", a, b)?;
        let v = self.map2(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (a, b) = self.align("div", a, b)?;
        let v = self.map2(a, b, |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    pub fn neg(&mut self, a: VarId) -> Result<VarId> {
        let v = self.map1(a, |x| -x);
        self.push(Op::Neg(a), v)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let v = self.map1(a, |x| x * c);
        self.push(Op::ScaleConst(a, c), v)
    }

    pub fn broadcast(&mut self, a: VarId, to: &[usize]) -> Result<VarId> {
        let v = k::broadcast(&self.nodes[a].value, to)?;
        self.push(Op::Broadcast(a), v)
    }

    pub fn sum_to(&mut self, a: VarId, to: &[usize]) -> Result<VarId> {
        let v = k::sum_to(&self.nodes[a].value, to)?;
        self.push(Op::SumTo(a), v)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = k::matmul(&self.nodes[a].value, &self.nodes[b].value)?;
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let v = k::transpose(&self.nodes[a].value)?;
        self.push(Op::Transpose(a), v)
    }

    pub fn conv2d(&mut self, x: VarId, w: VarId, stride: usize, pad: usize) -> Result<VarId> {
        let v = k::conv2d(&self.nodes[x].value, &self.nodes[w].value, stride, pad)?;
        self.push(Op::Conv2d { x, w, stride, pad }, v)
    }

    fn conv_grad_input(
        &mut self,
        g: VarId,
        w: VarId,
        x_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<VarId> {
        let v = k::conv2d_grad_input(
            &self.nodes[g].value,
            &self.nodes[w].value,
            x_shape,
            stride,
            pad,
        )?;
        self.push(Op::ConvGradInput { g, w, stride, pad }, v)
    }

    fn conv_grad_kernel(
        &mut self,
        g: VarId,
        x: VarId,
        w_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<VarId> {
        let v = k::conv2d_grad_kernel(
            &self.nodes[g].value,
            &self.nodes[x].value,
            w_shape,
            stride,
            pad,
        )?;
        self.push(Op::ConvGradKernel { g, x, stride, pad }, v)
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: f64) -> Result<VarId> {
        let v = self.map1(a, |x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), v)
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        let v = self.map1(a, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.push(Op::Sigmoid(a), v)
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId> {
        let v = self.map1(a, f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: VarId) -> Result<VarId> {
        let v = self.map1(a, f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn sqrt(&mut self, a: VarId) -> Result<VarId> {
        let v = self.map1(a, f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn pow_const(&mut self, a: VarId, p: f64) -> Result<VarId> {
        let v = self.map1(a, |x| x.powf(p));
        self.push(Op::PowConst(a, p), v)
    }

    pub fn sum_all(&mut self, a: VarId) -> Result<VarId> {
        let v = Tensor::scalar(self.nodes[a].value.data().iter().sum());
        self.push(Op::SumAll(a), v)
    }

    pub fn mean_all(&mut self, a: VarId) -> Result<VarId> {
        let n = self.nodes[a].value.len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let v = k::sum_axis_keepdim(&self.nodes[a].value, axis)?;
        self.push(Op::SumAxis(a, axis), v)
    }

    pub fn max_pool2x2(&mut self, a: VarId) -> Result<VarId> {
        let argmax = std::rc::Rc::new(k::pool_argmax(&self.nodes[a].value)?);
        let v = k::pool_select(&self.nodes[a].value, &argmax)?;
        let full_shape = self.shape(a).to_vec();
        self.push(
            Op::PoolSelect {
                v: a,
                argmax,
                full_shape,
            },
            v,
        )
    }

    pub fn upsample2(&mut self, a: VarId) -> Result<VarId> {
        let v = k::upsample2(&self.nodes[a].value)?;
        self.push(Op::Upsample2(a), v)
    }

    pub fn downsample_sum2(&mut self, a: VarId) -> Result<VarId> {
        let v = k::downsample_sum2(&self.nodes[a].value)?;
        self.push(Op::DownsampleSum2(a), v)
    }

    pub fn concat(&mut self, parts: &[VarId], axis: usize) -> Result<VarId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| &self.nodes[p].value).collect();
        let v = k::concat(&tensors, axis)?;
        self.push(Op::Concat(parts.to_vec(), axis), v)
    }

    pub fn slice(&mut self, a: VarId, axis: usize, start: usize, len: usize) -> Result<VarId> {
        let v = k::slice(&self.nodes[a].value, axis, start, len)?;
        self.push(
            Op::Slice {
                x: a,
                axis,
                start,
                len,
            },
            v,
        )
    }

    fn pad_slice(
        &mut self,
        g: VarId,
        axis: usize,
        start: usize,
        full_shape: Vec<usize>,
    ) -> Result<VarId> {
        let v = k::pad_slice(&self.nodes[g].value, axis, start, &full_shape)?;
        self.push(
            Op::PadSlice {
                g,
                axis,
                start,
                full_shape,
            },
            v,
        )
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId> {
        let v = self.nodes[a].value.reshaped(shape.to_vec())?;
        self.push(Op::Reshape(a), v)
    }

    /// Softmax over `axis`, composed from primitives. The row max is detached
    /// as a constant shift, which leaves the derivative exact.
    pub fn softmax(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let shifted = {
            let val = &self.nodes[a].value;
            let mut mx = k::sum_axis_keepdim(val, axis)?; // shape template
            let s = val.shape().to_vec();
            let (outer, mid, inner) = {
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                (outer, s[axis], inner)
            };
            let md = mx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = f64::NEG_INFINITY;
                    for m in 0..mid {
                        best = best.max(val.data()[(o * mid + m) * inner + i]);
                    }
                    md[o * inner + i] = best;
                }
            }
            let c = self.constant(mx)?;
            self.sub(a, c)?
        };
        let e = self.exp(shifted)?;
        let s = self.sum_axis(e, axis)?;
        self.div(e, s)
    }

    /// Sum of elementwise product, as a scalar node.
    pub fn dot(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let m = self.mul(a, b)?;
        self.sum_all(m)
    }

    /// Squared 2-norm of a node.
    pub fn sq_norm(&mut self, a: VarId) -> Result<VarId> {
        self.dot(a, a)
    }

    // ---- differentiation ----

    /// Nodes reachable upward from `from` (its ancestors, including itself).
    fn ancestors(&self, from: VarId) -> Vec<bool> {
        let mut seen = vec![false; from + 1];
        let mut stack = vec![from];
        while let Some(id) = stack.pop() {
            if seen[id] {
                continue;
            }
            seen[id] = true;
            for i in self.nodes[id].op.inputs() {
                if !seen[i] {
                    stack.push(i);
                }
            }
        }
        seen
    }

    /// Vector-Jacobian product with the cotangent supplied as a graph node, so
    /// the result stays differentiable (double backprop).
    pub fn vjp_node(&mut self, output: VarId, wrt: &[VarId], cotangent: VarId) -> Result<Vec<VarId>> {
        if self.shape(output) != self.shape(cotangent) {
            return Err(LrodError::shape(
                "vjp",
                self.shape(output),
                self.shape(cotangent),
            ));
        }
        let anc = self.ancestors(output);
        for &w in wrt {
            if w > output || !anc[w] {
                return Err(LrodError::Structural(format!(
                    "vjp target {w} is not an ancestor of output {output}"
                )));
            }
            if matches!(self.nodes[w].op, Op::Const) {
                return Err(LrodError::Structural(format!(
                    "vjp target {w} is a constant"
                )));
            }
        }
        // nodes whose subtree contains one of the targets
        let mut needs = vec![false; output + 1];
        for &w in wrt {
            needs[w] = true;
        }
        for id in 0..=output {
            if !needs[id] {
                needs[id] = self.nodes[id].op.inputs().iter().any(|&i| needs[i]);
            }
        }

        let mut adjoint: Vec<Option<VarId>> = vec![None; output + 1];
        adjoint[output] = Some(cotangent);
        for id in (0..=output).rev() {
            let g = match adjoint[id] {
                Some(g) if needs[id] => g,
                _ => continue,
            };
            let contributions = self.backward_rule(id, g)?;
            for (input, contrib) in contributions {
                if !needs[input] {
                    continue;
                }
                adjoint[input] = Some(match adjoint[input] {
                    Some(existing) => self.add(existing, contrib)?,
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|&w| match adjoint[w] {
                Some(g) => Ok(g),
                None => {
                    let z = Tensor::zeros(self.shape(w));
                    self.constant(z)
                }
            })
            .collect()
    }

    /// Vector-Jacobian product `uᵀJ` with a plain tensor cotangent.
    pub fn vjp(&mut self, output: VarId, wrt: &[VarId], cotangent: &Tensor) -> Result<Vec<VarId>> {
        let c = self.constant(cotangent.clone())?;
        self.vjp_node(output, wrt, c)
    }

    /// Per-op adjoint contributions, each built from differentiable primitives.
    fn backward_rule(&mut self, id: VarId, g: VarId) -> Result<Vec<(VarId, VarId)>> {
        let op = self.nodes[id].op.clone();
        Ok(match op {
            Op::Input | Op::Const => vec![],
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => {
                let nb = self.neg(g)?;
                vec![(a, g), (b, nb)]
            }
            Op::Mul(a, b) => {
                let da = self.mul(g, b)?;
                let db = self.mul(g, a)?;
                vec![(a, da), (b, db)]
            }
            Op::Div(a, b) => {
                let da = self.div(g, b)?;
                let ga = self.mul(g, a)?;
                let bb = self.mul(b, b)?;
                let q = self.div(ga, bb)?;
                let db = self.neg(q)?;
                vec![(a, da), (b, db)]
            }
            Op::Neg(a) => {
                let da = self.neg(g)?;
                vec![(a, da)]
            }
            Op::ScaleConst(a, c) => {
                let da = self.scale(g, c)?;
                vec![(a, da)]
            }
            Op::Broadcast(a) => {
                let to = self.shape(a).to_vec();
                let da = self.sum_to(g, &to)?;
                vec![(a, da)]
            }
            Op::SumTo(a) => {
                let to = self.shape(a).to_vec();
                let da = self.broadcast(g, &to)?;
                vec![(a, da)]
            }
            Op::MatMul(a, b) => {
                let bt = self.transpose(b)?;
                let da = self.matmul(g, bt)?;
                let at = self.transpose(a)?;
                let db = self.matmul(at, g)?;
                vec![(a, da), (b, db)]
            }
            Op::Transpose(a) => {
                let da = self.transpose(g)?;
                vec![(a, da)]
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xs = self.shape(x).to_vec();
                let ws = self.shape(w).to_vec();
                let dx = self.conv_grad_input(g, w, &xs, stride, pad)?;
                let dw = self.conv_grad_kernel(g, x, &ws, stride, pad)?;
                vec![(x, dx), (w, dw)]
            }
            Op::ConvGradInput {
                g: g0,
                w,
                stride,
                pad,
            } => {
                // z = A_wᵀ g0 ; <u,z> differentiates to conv(u,w) wrt g0 and
                // conv_grad_kernel(g0, u) wrt w.
                let dg0 = self.conv2d(g, w, stride, pad)?;
                let ws = self.shape(w).to_vec();
                let dw = self.conv_grad_kernel(g0, g, &ws, stride, pad)?;
                vec![(g0, dg0), (w, dw)]
            }
            Op::ConvGradKernel {
                g: g0,
                x,
                stride,
                pad,
            } => {
                let dg0 = self.conv2d(x, g, stride, pad)?;
                let xs = self.shape(x).to_vec();
                let dx = self.conv_grad_input(g0, g, &xs, stride, pad)?;
                vec![(g0, dg0), (x, dx)]
            }
            Op::LeakyRelu(a, slope) => {
                let mask = self.nodes[a]
                    .value
                    .map(|x| if x > 0.0 { 1.0 } else { slope });
                let m = self.constant(mask)?;
                let da = self.mul(g, m)?;
                vec![(a, da)]
            }
            Op::Sigmoid(a) => {
                // g * y * (1 - y), with y the sigmoid output node itself
                let ones = self.constant(Tensor::full(self.shape(id), 1.0))?;
                let one_minus = self.sub(ones, id)?;
                let yy = self.mul(id, one_minus)?;
                let da = self.mul(g, yy)?;
                vec![(a, da)]
            }
            Op::Exp(a) => {
                let da = self.mul(g, id)?;
                vec![(a, da)]
            }
            Op::Log(a) => {
                let da = self.div(g, a)?;
                vec![(a, da)]
            }
            Op::Sqrt(a) => {
                let h = self.scale(g, 0.5)?;
                let da = self.div(h, id)?;
                vec![(a, da)]
            }
            Op::PowConst(a, p) => {
                let xp = self.pow_const(a, p - 1.0)?;
                let s = self.scale(xp, p)?;
                let da = self.mul(g, s)?;
                vec![(a, da)]
            }
            Op::SumAll(a) => {
                let to = self.shape(a).to_vec();
                let da = self.broadcast(g, &to)?;
                vec![(a, da)]
            }
            Op::SumAxis(a, _) => {
                let to = self.shape(a).to_vec();
                let da = self.broadcast(g, &to)?;
                vec![(a, da)]
            }
            Op::PoolSelect { v, argmax, .. } => {
                let full = self.shape(v).to_vec();
                let val = k::pool_scatter(&self.nodes[g].value, &argmax, &full)?;
                let da = self.push(Op::PoolScatter { g, argmax }, val)?;
                vec![(v, da)]
            }
            Op::PoolScatter { g: g0, argmax } => {
                let full_shape = self.shape(id).to_vec();
                let val = k::pool_select(&self.nodes[g].value, &argmax)?;
                let dg0 = self.push(
                    Op::PoolSelect {
                        v: g,
                        argmax,
                        full_shape,
                    },
                    val,
                )?;
                vec![(g0, dg0)]
            }
            Op::Upsample2(a) => {
                let da = self.downsample_sum2(g)?;
                vec![(a, da)]
            }
            Op::DownsampleSum2(a) => {
                let da = self.upsample2(g)?;
                vec![(a, da)]
            }
            Op::Concat(parts, axis) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(p)[axis];
                    let dp = self.slice(g, axis, offset, len)?;
                    out.push((p, dp));
                    offset += len;
                }
                out
            }
            Op::Slice {
                x, axis, start, ..
            } => {
                let full = self.shape(x).to_vec();
                let dx = self.pad_slice(g, axis, start, full)?;
                vec![(x, dx)]
            }
            Op::PadSlice {
                g: g0, axis, start, ..
            } => {
                let len = self.shape(g0)[axis];
                let dg0 = self.slice(g, axis, start, len)?;
                vec![(g0, dg0)]
            }
            Op::Reshape(a) => {
                let to = self.shape(a).to_vec();
                let da = self.reshape(g, &to)?;
                vec![(a, da)]
            }
        })
    }

    /// Jacobian-vector product `Jv` realized as VJP-of-VJP, returned as a node
    /// so it can be differentiated further.
    pub fn jvp_node(&mut self, output: VarId, wrt: VarId, tangent: VarId) -> Result<VarId> {
        if self.shape(wrt) != self.shape(tangent) {
            return Err(LrodError::shape("jvp", self.shape(wrt), self.shape(tangent)));
        }
        // probe cotangent u; g = Jᵀu is linear in u, so d<g,v>/du = Jv
        let probe = self.input(Tensor::zeros(self.shape(output)))?;
        let g = self.vjp_node(output, &[wrt], probe)?[0];
        let s = self.dot(g, tangent)?;
        let one = self.constant(Tensor::scalar(1.0))?;
        Ok(self.vjp_node(s, &[probe], one)?[0])
    }

    /// Jacobian-vector product with a plain tensor tangent.
    pub fn jvp(&mut self, output: VarId, wrt: VarId, tangent: &Tensor) -> Result<Tensor> {
        let t = self.constant(tangent.clone())?;
        let jv = self.jvp_node(output, wrt, t)?;
        Ok(self.value(jv).clone())
    }
}

/// Compare the reverse-mode gradient of a scalar function against central
/// finite differences. Returns the max relative error, with the magnitude
/// scaled as |g - fd| / (1 + max(|g|, |fd|)).
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId>,
{
    if eps <= 0.0 {
        return Err(LrodError::Parameter("grad_check eps must be > 0".into()));
    }
    let grad = {
        let mut tape = Tape::new();
        let x = tape.input(point.clone())?;
        let y = f(&mut tape, x)?;
        if tape.value(y).len() != 1 {
            return Err(LrodError::Parameter(
                "grad_check expects a scalar-valued function".into(),
            ));
        }
        let cot = Tensor::full(tape.shape(y), 1.0);
        match tape.vjp(y, &[x], &cot) {
            Ok(g) => tape.value(g[0]).clone(),
            // function ignores its input entirely: gradient is exactly zero
            Err(LrodError::Structural(_)) => Tensor::zeros(point.shape()),
            Err(e) => return Err(e),
        }
    };
    let eval = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.input(p.clone())?;
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };
    let mut max_err: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let g = grad.data()[i];
        let err = (g - fd).abs() / (1.0 + g.abs().max(fd.abs()));
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
