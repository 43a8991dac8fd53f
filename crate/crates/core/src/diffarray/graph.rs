//! Define-by-run reverse-mode tape.
//!
//! A [`Graph`] lives for one forward/backward pass. Every op appends a node
//! holding its output value and enough bookkeeping to produce the
//! vector-Jacobian product of its inputs. Nodes that neither depend on a
//! trainable leaf nor on a tracked variable are marked constant and skipped
//! during the backward sweep.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom, ResizeMode};
use super::params::{Binding, GradMap};
use super::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// An op with a hand-written adjoint, evaluated outside the tape.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input; entries whose `needs` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
    Silu,
    Softplus,
    Abs,
    Square,
    Sqrt,
    Sin,
    Cos,
    Scale(f64),
    AddScalar(f64),
}

enum Op {
    Constant,
    Variable,
    Param(String),
    Binary(BinaryKind, usize, usize),
    Unary(UnaryKind, usize),
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Resize {
        x: usize,
        mode: ResizeMode,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        x: usize,
        indices: Vec<usize>,
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    SumAxis {
        x: usize,
        axis: usize,
    },
    Custom {
        inputs: Vec<usize>,
        op: Rc<dyn CustomOp>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    param_grads: RefCell<BTreeMap<String, Tensor>>,
    var_grads: RefCell<HashMap<usize, Tensor>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_rc(Rc::new(value), op, requires_grad)
    }

    fn push_rc(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    // ---- leaves -------------------------------------------------------

    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A leaf whose gradient is collected by [`Graph::grad`].
    pub fn variable(&self, value: Tensor) -> Var {
        self.push(value, Op::Variable, true)
    }

    /// Binds a named parameter. Frozen bindings produce constants.
    pub fn param(&self, binding: &Binding<'_>, name: &str) -> Result<Var> {
        let t = binding
            .store()
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        Ok(if binding.trainable() {
            self.push(t.clone(), Op::Param(name.to_string()), true)
        } else {
            self.push(t.clone(), Op::Constant, false)
        })
    }

    /// Same value, cut from the tape.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.push_rc(value, Op::Constant, false)
    }

    // ---- element-wise -------------------------------------------------

    fn binary(&self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (name, f): (&'static str, fn(f64, f64) -> f64) = match kind {
            BinaryKind::Add => ("add", |x, y| x + y),
            BinaryKind::Sub => ("sub", |x, y| x - y),
            BinaryKind::Mul => ("mul", |x, y| x * y),
            BinaryKind::Div => ("div", |x, y| x / y),
        };
        let out = kernels::broadcast_binary(name, &va, &vb, f)?;
        Ok(self.push(out, Op::Binary(kind, a.0, b.0), self.needs(&[a.0, b.0])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&self, kind: UnaryKind, x: Var) -> Var {
        let v = self.value(x);
        let out = v.map(|a| match kind {
            UnaryKind::Neg => -a,
            UnaryKind::Exp => a.exp(),
            UnaryKind::Log => a.ln(),
            UnaryKind::Sigmoid => sigmoid(a),
            UnaryKind::Tanh => a.tanh(),
            UnaryKind::Relu => a.max(0.0),
            UnaryKind::Silu => a * sigmoid(a),
            UnaryKind::Softplus => softplus(a),
            UnaryKind::Abs => a.abs(),
            UnaryKind::Square => a * a,
            UnaryKind::Sqrt => a.sqrt(),
            UnaryKind::Sin => a.sin(),
            UnaryKind::Cos => a.cos(),
            UnaryKind::Scale(k) => a * k,
            UnaryKind::AddScalar(k) => a + k,
        });
        self.push(out, Op::Unary(kind, x.0), self.needs(&[x.0]))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn exp(&self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn log(&self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }
    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn tanh(&self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }
    pub fn relu(&self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn silu(&self, x: Var) -> Var {
        self.unary(UnaryKind::Silu, x)
    }
    pub fn softplus(&self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x)
    }
    pub fn abs(&self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x)
    }
    pub fn square(&self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }
    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }
    pub fn sin(&self, x: Var) -> Var {
        self.unary(UnaryKind::Sin, x)
    }
    pub fn cos(&self, x: Var) -> Var {
        self.unary(UnaryKind::Cos, x)
    }
    pub fn scale(&self, x: Var, k: f64) -> Var {
        self.unary(UnaryKind::Scale(k), x)
    }
    pub fn add_scalar(&self, x: Var, k: f64) -> Var {
        self.unary(UnaryKind::AddScalar(k), x)
    }

    // ---- linear algebra -----------------------------------------------

    /// [m, k] × [k, n]
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, va.data(), (k as isize, 1), vb.data(), (n as isize, 1), 0.0, &mut out, (n as isize, 1));
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a.0, b.0), self.needs(&[a.0, b.0])))
    }

    /// x: [N, C, H, W], w: [Co, C, k, k], bias: [Co]
    pub fn conv2d(&self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::shape("conv2d", sx, sw));
        }
        let (Some(out_h), Some(out_w)) = (
            kernels::conv_out(sx[2], sw[2], stride, pad),
            kernels::conv_out(sx[3], sw[3], stride, pad),
        ) else {
            return Err(Error::shape("conv2d", sx, sw));
        };
        let vb = bias.map(|b| self.value(b));
        if let Some(vb) = &vb {
            if vb.shape() != [sw[0]] {
                return Err(Error::shape("conv2d bias", vb.shape(), &sw[..1]));
            }
        }
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            out_h,
            out_w,
        };
        let out = kernels::conv2d(&vx, &vw, vb.as_deref(), &geom);
        let mut deps = vec![x.0, w.0];
        deps.extend(bias.map(|b| b.0));
        Ok(self.push(
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: bias.map(|b| b.0),
                geom,
            },
            self.needs(&deps),
        ))
    }

    /// x: [N, Ci, H, W], w: [Ci, Co, k, k]; output side (H-1)·stride - 2·pad + k.
    pub fn conv_transpose2d(&self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || stride == 0 {
            return Err(Error::shape("conv_transpose2d", sx, sw));
        }
        let span = |n: usize, k: usize| ((n - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0);
        let (Some(height), Some(width)) = (span(sx[2], sw[2]), span(sx[3], sw[3])) else {
            return Err(Error::shape("conv_transpose2d", sx, sw));
        };
        let vb = bias.map(|b| self.value(b));
        if let Some(vb) = &vb {
            if vb.shape() != [sw[1]] {
                return Err(Error::shape("conv_transpose2d bias", vb.shape(), &sw[1..2]));
            }
        }
        let geom = ConvGeom {
            channels: sw[1],
            height,
            width,
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            out_h: sx[2],
            out_w: sx[3],
        };
        if kernels::conv_out(height, sw[2], stride, pad) != Some(sx[2])
            || kernels::conv_out(width, sw[3], stride, pad) != Some(sx[3])
        {
            return Err(Error::shape("conv_transpose2d", sx, sw));
        }
        let out = kernels::conv_transpose2d(&vx, &vw, vb.as_deref(), &geom);
        let mut deps = vec![x.0, w.0];
        deps.extend(bias.map(|b| b.0));
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                x: x.0,
                w: w.0,
                b: bias.map(|b| b.0),
                geom,
            },
            self.needs(&deps),
        ))
    }

    /// Resizes the spatial axes of [N, C, H, W] with half-pixel centers.
    pub fn resize(&self, x: Var, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize", vx.shape(), &[out_h, out_w]));
        }
        let out = kernels::resize(&vx, out_h, out_w, mode);
        Ok(self.push(out, Op::Resize { x: x.0, mode }, self.needs(&[x.0])))
    }

    // ---- structural ---------------------------------------------------

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = xs.iter().map(|&v| self.value(v)).collect();
        let first = vals.first().ok_or_else(|| Error::invalid("concat", "no operands"))?;
        if axis >= first.ndim() {
            return Err(Error::invalid("concat", format!("axis {axis} for shape {:?}", first.shape())));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for v in &vals {
            let s = v.shape();
            if s.len() != first.ndim()
                || s.iter().zip(first.shape()).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", first.shape(), s));
            }
            shape[axis] += s[axis];
        }
        let (outer, _, inner) = kernels::axis_blocks(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in &vals {
                let block = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let rg = self.needs(&ids);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { inputs: ids, axis }, rg))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::invalid("slice", format!("{start}..{end} on axis {axis} of {s:?}")));
        }
        let (outer, ext, inner) = kernels::axis_blocks(s, axis);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&vx.data()[(o * ext + start) * inner..(o * ext + end) * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = end - start;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { x: x.0, axis, start }, self.needs(&[x.0])))
    }

    /// Gathers rows along axis 0.
    pub fn index_select(&self, x: Var, indices: &[usize]) -> Result<Var> {
        let out = self.value(x).select_rows(indices)?;
        Ok(self.push(
            out,
            Op::IndexSelect {
                x: x.0,
                indices: indices.to_vec(),
            },
            self.needs(&[x.0]),
        ))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x.0), self.needs(&[x.0])))
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let mut seen = vec![false; vx.ndim()];
        if perm.len() != vx.ndim() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} for shape {:?}", vx.shape())));
        }
        let out = kernels::permute(&vx, perm);
        Ok(self.push(out, Op::Permute(x.0, perm.to_vec()), self.needs(&[x.0])))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Var {
        let vx = self.value(x);
        let k = *vx.shape().last().unwrap_or(&1);
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(Tensor::from_parts(vx.shape().to_vec(), out), Op::Softmax(x.0), self.needs(&[x.0]))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), self.needs(&[x.0]))
    }

    pub fn mean(&self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::Mean(x.0), self.needs(&[x.0]))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.ndim() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} of {:?}", vx.shape())));
        }
        let (outer, ext, inner) = kernels::axis_blocks(vx.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &vx.data()[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = 1;
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis { x: x.0, axis }, self.needs(&[x.0])))
    }

    /// Records an externally evaluated op.
    pub fn custom(&self, op: Rc<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Var {
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = self.needs(&ids);
        self.push(output, Op::Custom { inputs: ids, op }, rg)
    }

    // ---- backward -----------------------------------------------------

    /// Accumulates d(loss)/d(leaf) into the graph's gradient slots.
    /// Repeated calls add to the existing slots until [`Graph::zero_grad`].
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite { what: "loss".into() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Variable => accumulate_map(&mut self.var_grads.borrow_mut(), i, g),
                Op::Param(name) => {
                    let mut pg = self.param_grads.borrow_mut();
                    match pg.get_mut(name) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            pg.insert(name.clone(), g);
                        }
                    }
                }
                op => {
                    for (input, gi) in vjp(&nodes, i, op, &g)? {
                        if !nodes[input].requires_grad {
                            continue;
                        }
                        match &mut grads[input] {
                            Some(acc) => acc.add_assign(&gi),
                            slot => *slot = Some(gi),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient collected for a [`Graph::variable`] leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.var_grads.borrow().get(&v.0).cloned()
    }

    /// Gradients collected for trainable parameters, keyed by name.
    pub fn param_grads(&self) -> GradMap {
        GradMap::from_map(self.param_grads.borrow().clone())
    }

    pub fn zero_grad(&self) {
        self.param_grads.borrow_mut().clear();
        self.var_grads.borrow_mut().clear();
    }
}

fn accumulate_map(map: &mut HashMap<usize, Tensor>, key: usize, g: Tensor) {
    match map.get_mut(&key) {
        Some(acc) => acc.add_assign(&g),
        None => {
            map.insert(key, g);
        }
    }
}

/// Vector-Jacobian product of node `i` for its inputs that need gradients.
fn vjp(nodes: &[Node], i: usize, op: &Op, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |id: usize| &*nodes[id].value;
    let need = |id: usize| nodes[id].requires_grad;
    let out = &*nodes[i].value;
    let mut res = Vec::new();
    match *op {
        Op::Binary(kind, a, b) => {
            let (va, vb) = (val(a), val(b));
            let (ad, bd) = (va.data(), vb.data());
            // Map output position back to operand offsets through the same broadcast walk.
            let offsets = |shape: &[usize], other: &[usize]| {
                let mut offs = vec![(0usize, 0usize); g.len()];
                kernels::for_each_broadcast(g.shape(), shape, other, |o, ia, ib| offs[o] = (ia, ib));
                offs
            };
            let offs = offsets(va.shape(), vb.shape());
            if need(a) {
                let ga = match kind {
                    BinaryKind::Add | BinaryKind::Sub => kernels::reduce_to(g, va.shape(), |_, _| 1.0),
                    BinaryKind::Mul => kernels::reduce_to(g, va.shape(), |o, _| bd[offs[o].1]),
                    BinaryKind::Div => kernels::reduce_to(g, va.shape(), |o, _| 1.0 / bd[offs[o].1]),
                };
                res.push((a, ga));
            }
            if need(b) {
                let gb = match kind {
                    BinaryKind::Add => kernels::reduce_to(g, vb.shape(), |_, _| 1.0),
                    BinaryKind::Sub => kernels::reduce_to(g, vb.shape(), |_, _| -1.0),
                    BinaryKind::Mul => kernels::reduce_to(g, vb.shape(), |o, _| ad[offs[o].0]),
                    BinaryKind::Div => kernels::reduce_to(g, vb.shape(), |o, ib| {
                        -ad[offs[o].0] / (bd[ib] * bd[ib])
                    }),
                };
                res.push((b, gb));
            }
        }
        Op::Unary(kind, x) => {
            let vx = val(x);
            let d: Vec<f64> = vx
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&a, &y), &gv)| {
                    gv * match kind {
                        UnaryKind::Neg => -1.0,
                        UnaryKind::Exp => y,
                        UnaryKind::Log => 1.0 / a,
                        UnaryKind::Sigmoid => y * (1.0 - y),
                        UnaryKind::Tanh => 1.0 - y * y,
                        UnaryKind::Relu => {
                            if a > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Silu => {
                            let s = sigmoid(a);
                            s * (1.0 + a * (1.0 - s))
                        }
                        UnaryKind::Softplus => sigmoid(a),
                        UnaryKind::Abs => a.signum() * if a == 0.0 { 0.0 } else { 1.0 },
                        UnaryKind::Square => 2.0 * a,
                        UnaryKind::Sqrt => 0.5 / y,
                        UnaryKind::Sin => a.cos(),
                        UnaryKind::Cos => -a.sin(),
                        UnaryKind::Scale(k) => k,
                        UnaryKind::AddScalar(_) => 1.0,
                    }
                })
                .collect();
            res.push((x, Tensor::from_parts(vx.shape().to_vec(), d)));
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val(a), val(b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            if need(a) {
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, g.data(), (n as isize, 1), vb.data(), (1, n as isize), 0.0, &mut ga, (k as isize, 1));
                res.push((a, Tensor::from_parts(vec![m, k], ga)));
            }
            if need(b) {
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, va.data(), (1, k as isize), g.data(), (n as isize, 1), 0.0, &mut gb, (n as isize, 1));
                res.push((b, Tensor::from_parts(vec![k, n], gb)));
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let nb = b.is_some_and(need);
            let grads = kernels::conv2d_backward(val(x), val(w), g, &geom, (need(x), need(w), nb));
            res.extend(grads.x.map(|t| (x, t)));
            res.extend(grads.w.map(|t| (w, t)));
            if let (Some(b), Some(t)) = (b, grads.b) {
                res.push((b, t));
            }
        }
        Op::ConvTranspose2d { x, w, b, geom } => {
            let nb = b.is_some_and(need);
            let grads = kernels::conv_transpose2d_backward(val(x), val(w), g, &geom, (need(x), need(w), nb));
            res.extend(grads.x.map(|t| (x, t)));
            res.extend(grads.w.map(|t| (w, t)));
            if let (Some(b), Some(t)) = (b, grads.b) {
                res.push((b, t));
            }
        }
        Op::Resize { x, mode } => {
            res.push((x, kernels::resize_backward(g, val(x).shape(), mode)));
        }
        Op::Concat { ref inputs, axis } => {
            let (outer, ext, inner) = kernels::axis_blocks(g.shape(), axis);
            let mut offset = 0;
            for &id in inputs {
                let s = val(id).shape();
                let e = s[axis];
                if need(id) {
                    let mut d = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        d.extend_from_slice(&g.data()[(o * ext + offset) * inner..(o * ext + offset + e) * inner]);
                    }
                    res.push((id, Tensor::from_parts(s.to_vec(), d)));
                }
                offset += e;
            }
        }
        Op::Slice { x, axis, start } => {
            let s = val(x).shape();
            let (outer, ext, inner) = kernels::axis_blocks(s, axis);
            let e = g.shape()[axis];
            let mut d = vec![0.0; numel(s)];
            for o in 0..outer {
                d[(o * ext + start) * inner..(o * ext + start + e) * inner]
                    .copy_from_slice(&g.data()[o * e * inner..(o + 1) * e * inner]);
            }
            res.push((x, Tensor::from_parts(s.to_vec(), d)));
        }
        Op::IndexSelect { x, ref indices } => {
            let s = val(x).shape();
            let inner = numel(&s[1..]);
            let mut d = vec![0.0; numel(s)];
            for (r, &i) in indices.iter().enumerate() {
                for (acc, gv) in d[i * inner..(i + 1) * inner].iter_mut().zip(&g.data()[r * inner..(r + 1) * inner]) {
                    *acc += gv;
                }
            }
            res.push((x, Tensor::from_parts(s.to_vec(), d)));
        }
        Op::Reshape(x) => {
            res.push((x, Tensor::from_parts(val(x).shape().to_vec(), g.data().to_vec())));
        }
        Op::Permute(x, ref perm) => {
            res.push((x, kernels::permute(g, &kernels::inverse_perm(perm))));
        }
        Op::Softmax(x) => {
            let k = *out.shape().last().unwrap_or(&1);
            let mut d = vec![0.0; out.len()];
            for ((dr, yr), gr) in d.chunks_mut(k).zip(out.data().chunks(k)).zip(g.data().chunks(k)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum();
                for ((dv, y), gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *dv = y * (gv - dot);
                }
            }
            res.push((x, Tensor::from_parts(out.shape().to_vec(), d)));
        }
        Op::Sum(x) => res.push((x, Tensor::full(val(x).shape(), g.data()[0]))),
        Op::Mean(x) => {
            let vx = val(x);
            res.push((x, Tensor::full(vx.shape(), g.data()[0] / vx.len() as f64)));
        }
        Op::SumAxis { x, axis } => {
            let s = val(x).shape();
            let (outer, ext, inner) = kernels::axis_blocks(s, axis);
            let mut d = vec![0.0; numel(s)];
            for o in 0..outer {
                for e in 0..ext {
                    d[(o * ext + e) * inner..(o * ext + e + 1) * inner]
                        .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            res.push((x, Tensor::from_parts(s.to_vec(), d)));
        }
        Op::Custom { ref inputs, ref op } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&id| val(id)).collect();
            let needs: Vec<bool> = inputs.iter().map(|&id| need(id)).collect();
            let grads = op.backward(&ins, out, g, &needs)?;
            for ((&id, gi), &n) in inputs.iter().zip(grads).zip(&needs) {
                if let (true, Some(gi)) = (n, gi) {
                    if gi.shape() != val(id).shape() {
                        return Err(Error::shape(op.name(), gi.shape(), val(id).shape()));
                    }
                    res.push((id, gi));
                }
            }
        }
        Op::Constant | Op::Variable | Op::Param(_) => {}
    }
    Ok(res)
}
