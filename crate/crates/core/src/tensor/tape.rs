use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    MaxPool { input: Var, argmax: Vec<usize> },
    Upsample { input: Var },
    Relu { input: Var },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: f64 },
    Sum { input: Var },
    Softmax2 { input: Var },
    CrossEntropy { probs: Var, target: Vec<u8> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so every input precedes the
/// operation that consumes it and a reverse sweep is a valid topological
/// order for backpropagation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to the tape's `requires_grad` leaves.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub(crate) const CE_CLAMP: f64 = 1e-12;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Its `requires_grad` flag decides whether backward
    /// reports a gradient for it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = value.requires_grad();
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    /// Hash of every piecewise choice the recorded graph made: the sign of
    /// each ReLU input and the winner of each max-pool window. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        const PRIME: u64 = 0x0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| h = (h ^ v).wrapping_mul(PRIME);
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for &x in self.nodes[input.0].value.data() {
                        mix((x > T::zero()) as u64);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.iter().for_each(|&a| mix(a as u64)),
                _ => {}
            }
        }
        h
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4("conv2d")?;
        let (cout, wcin, k, k2) = self.value(weight).dims4("conv2d")?;
        if wcin != cin {
            return Err(Error::dim("conv2d", format!("input has {cin} channels, weight expects {wcin}")));
        }
        if k != k2 || !(k == 1 || k == 3) {
            return Err(Error::dim("conv2d", format!("unsupported kernel {k}×{k2}")));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::dim("conv2d", format!("bias shape {:?}, expected [{cout}]", self.value(bias).shape())));
        }
        if stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::dim("conv2d", "kernel does not fit the padded input"));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad: padding,
            ho: (h + 2 * padding - k) / stride + 1,
            wo: (w + 2 * padding - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![n, cout, geom.ho, geom.wo], out)?;
        let g = self.grad_any(&[input, weight, bias]);
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom }, g))
    }

    pub fn max_pool2x2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("max_pool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("max_pool2x2", format!("spatial dims {h}×{w} must be even")));
        }
        let (out, argmax) = kernels::max_pool_forward((n, c, h, w), self.value(input).data());
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        let g = self.grad_any(&[input]);
        Ok(self.push(value, Op::MaxPool { input, argmax }, g))
    }

    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("upsample2x")?;
        let out = kernels::upsample_forward((n, c, h, w), self.value(input).data());
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        let g = self.grad_any(&[input]);
        Ok(self.push(value, Op::Upsample { input }, g))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() }).with_grad(false);
        let g = self.grad_any(&[input]);
        self.push(value, Op::Relu { input }, g)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4("concat_channels")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat_channels")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::dim(
                "concat_channels",
                format!("N,H,W disagree: {:?} vs {:?}", (na, ha, wa), (nb, hb, wb)),
            ));
        }
        let (pa, pb) = (ca * ha * wa, cb * hb * wb);
        let mut out = Vec::with_capacity(na * (pa + pb));
        for s in 0..na {
            out.extend_from_slice(&self.value(a).data()[s * pa..(s + 1) * pa]);
            out.extend_from_slice(&self.value(b).data()[s * pb..(s + 1) * pb]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        let g = self.grad_any(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b }, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let g = self.grad_any(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let g = self.grad_any(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, g))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let f = T::from_f64_lossy(factor);
        let value = self.value(input).map(|v| v * f).with_grad(false);
        let g = self.grad_any(&[input]);
        self.push(value, Op::Scale { input, factor }, g)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum();
        let g = self.grad_any(&[input]);
        self.push(Tensor::scalar(total), Op::Sum { input }, g)
    }

    pub fn softmax2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("softmax2")?;
        if c != 2 {
            return Err(Error::dim("softmax2", format!("expected 2 channels, got {c}")));
        }
        let out = kernels::softmax2_forward(n, h * w, self.value(input).data());
        let value = Tensor::new(vec![n, 2, h, w], out)?;
        let g = self.grad_any(&[input]);
        Ok(self.push(value, Op::Softmax2 { input }, g))
    }

    /// Pixel-averaged two-class cross-entropy of `probs` (N×2×H×W) against
    /// `target` (N·H·W labels in {0,1}). Probabilities are clamped at 1e-12
    /// before the log.
    pub fn cross_entropy(&mut self, probs: Var, target: &[u8]) -> Result<Var> {
        let (n, c, h, w) = self.value(probs).dims4("ce_loss")?;
        if c != 2 {
            return Err(Error::dim("ce_loss", format!("expected 2 channels, got {c}")));
        }
        let hw = h * w;
        if target.len() != n * hw {
            return Err(Error::dim("ce_loss", format!("target has {} labels, probs {}", target.len(), n * hw)));
        }
        let clamp = T::from_f64_lossy(CE_CLAMP);
        let p = self.value(probs).data();
        let mut total = T::zero();
        for s in 0..n {
            for i in 0..hw {
                let y = target[s * hw + i] as usize;
                total = total + p[(s * 2 + y) * hw + i].max(clamp).ln();
            }
        }
        let k = T::from_usize(n * hw).unwrap_or_else(T::one);
        let loss = if n * hw == 0 { T::zero() } else { -total / k };
        let g = self.grad_any(&[probs]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { probs, target: target.to_vec() }, g))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns one gradient per `requires_grad` leaf the loss depends on;
    /// leaves the loss never touches are absent.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (var, contrib) in self.local_grads(node, &g) {
                match &mut grads[var.0] {
                    Some(acc) => kernels::axpy(T::one(), &contrib, acc),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let mut out = HashMap::new();
        for (idx, slot) in grads.into_iter().enumerate() {
            let node = &self.nodes[idx];
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.value.requires_grad(), slot) {
                out.insert(Var(idx), Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { grads: out })
    }

    /// Gradient contributions of one node to those inputs that need them.
    fn local_grads(&self, node: &Node<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let grads = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    needs(input),
                );
                if let Some(gi) = grads.input {
                    out.push((*input, gi));
                }
                if needs(weight) {
                    out.push((*weight, grads.weight));
                }
                if needs(bias) {
                    out.push((*bias, grads.bias));
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut gi = vec![T::zero(); self.value(*input).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    gi[src] = gi[src] + gv;
                }
                out.push((*input, gi));
            }
            Op::Upsample { input } => {
                let (n, c, h, w) = self.value(*input).dims4("upsample2x").expect("recorded as 4-D");
                out.push((*input, kernels::upsample_backward((n, c, h, w), g)));
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let gi = x.iter().zip(g).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect();
                out.push((*input, gi));
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4("concat_channels").expect("recorded as 4-D");
                let cb = self.value(*b).shape()[1];
                let (pa, pb) = (ca * h * w, cb * h * w);
                if needs(a) {
                    let mut ga = Vec::with_capacity(n * pa);
                    for s in 0..n {
                        ga.extend_from_slice(&g[s * (pa + pb)..s * (pa + pb) + pa]);
                    }
                    out.push((*a, ga));
                }
                if needs(b) {
                    let mut gb = Vec::with_capacity(n * pb);
                    for s in 0..n {
                        gb.extend_from_slice(&g[s * (pa + pb) + pa..(s + 1) * (pa + pb)]);
                    }
                    out.push((*b, gb));
                }
            }
            Op::Add { a, b } => {
                if needs(a) {
                    out.push((*a, g.to_vec()));
                }
                if needs(b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Mul { a, b } => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if needs(a) {
                    out.push((*a, g.iter().zip(xb).map(|(&gv, &v)| gv * v).collect()));
                }
                if needs(b) {
                    out.push((*b, g.iter().zip(xa).map(|(&gv, &v)| gv * v).collect()));
                }
            }
            Op::Scale { input, factor } => {
                let f = T::from_f64_lossy(*factor);
                out.push((*input, g.iter().map(|&gv| gv * f).collect()));
            }
            Op::Sum { input } => {
                out.push((*input, vec![g[0]; self.value(*input).numel()]));
            }
            Op::Softmax2 { input } => {
                let (n, _, h, w) = node.value.dims4("softmax2").expect("recorded as 4-D");
                out.push((*input, kernels::softmax2_backward(n, h * w, node.value.data(), g)));
            }
            Op::CrossEntropy { probs, target } => {
                let (n, _, h, w) = self.value(*probs).dims4("ce_loss").expect("recorded as 4-D");
                let hw = h * w;
                let p = self.value(*probs).data();
                let clamp = T::from_f64_lossy(CE_CLAMP);
                let scale = -g[0] / T::from_usize((n * hw).max(1)).unwrap_or_else(T::one);
                let mut gp = vec![T::zero(); p.len()];
                for s in 0..n {
                    for i in 0..hw {
                        let j = (s * 2 + target[s * hw + i] as usize) * hw + i;
                        if p[j] > clamp {
                            gp[j] = scale / p[j];
                        }
                    }
                }
                out.push((*probs, gp));
            }
        }
        out
    }
}
