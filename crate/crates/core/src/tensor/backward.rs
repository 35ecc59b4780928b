use std::collections::{HashMap, HashSet};

use super::ops::matmul_dims;
use super::{Node, Op, Tensor, GATHER_ZERO};
use crate::error::{contract, Result};

type GradMap = HashMap<*const Node, Vec<f64>>;

/// Gradient slot for `t`, or `None` when `t` is not tracked.
fn slot<'a>(grads: &'a mut GradMap, t: &Tensor) -> Option<&'a mut Vec<f64>> {
    if !t.requires_grad() {
        return None;
    }
    Some(
        grads
            .entry(t.node_ptr())
            .or_insert_with(|| vec![0.0; t.numel()]),
    )
}

/// Post-order over tracked nodes reachable from `root` (parents before
/// children).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<*const Node> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.node_ptr());
    while let Some((t, next)) = stack.pop() {
        let inputs = t.node().op().inputs();
        if let Some(child) = inputs.get(next) {
            let child = (*child).clone();
            stack.push((t, next + 1));
            if child.requires_grad() && visited.insert(child.node_ptr()) {
                stack.push((child, 0));
            }
        } else {
            order.push(t);
        }
    }
    order
}

impl Tensor {
    /// Reverse-mode sweep from a one-element tensor. Leaf tensors with
    /// `requires_grad` accumulate `d self / d leaf` into their gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(contract(format!(
                "backward needs a one-element loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(contract(
                "backward: loss does not depend on any tracked tensor",
            ));
        }
        let order = topo_order(self);
        let mut grads: GradMap = HashMap::new();
        grads.insert(self.node_ptr(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.node_ptr()) else {
                continue;
            };
            let node = t.node();
            match node.op() {
                Op::Leaf => t.accumulate_grad(&g),
                op => propagate(node, op, &g, &mut grads),
            }
        }
        Ok(())
    }
}

fn propagate(node: &Node, op: &Op, g: &[f64], grads: &mut GradMap) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let dims = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
            let (n, k, p) = (dims.n, dims.k, dims.p);
            if let Some(ga) = slot(grads, a) {
                // dA = dC · Bᵀ
                for bi in 0..dims.batch {
                    let gc = &g[bi * n * p..][..n * p];
                    let bm = &b.data()[bi * dims.b_stride..][..k * p];
                    let ga = &mut ga[bi * dims.a_stride..][..n * k];
                    for i in 0..n {
                        let grow = &gc[i * p..(i + 1) * p];
                        for kk in 0..k {
                            let brow = &bm[kk * p..(kk + 1) * p];
                            ga[i * k + kk] +=
                                grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
            }
            if let Some(gb) = slot(grads, b) {
                // dB = Aᵀ · dC
                for bi in 0..dims.batch {
                    let gc = &g[bi * n * p..][..n * p];
                    let am = &a.data()[bi * dims.a_stride..][..n * k];
                    let gb = &mut gb[bi * dims.b_stride..][..k * p];
                    for i in 0..n {
                        let grow = &gc[i * p..(i + 1) * p];
                        for kk in 0..k {
                            let aik = am[i * k + kk];
                            let brow = &mut gb[kk * p..(kk + 1) * p];
                            for (o, &x) in brow.iter_mut().zip(grow) {
                                *o += aik * x;
                            }
                        }
                    }
                }
            }
        }
        Op::AddBroadcast(a, b) => {
            if let Some(ga) = slot(grads, a) {
                add_into(ga, g);
            }
            if let Some(gb) = slot(grads, b) {
                let nb = gb.len();
                for (i, &x) in g.iter().enumerate() {
                    gb[i % nb] += x;
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(grads, a) {
                add_into(ga, g);
            }
            if let Some(gb) = slot(grads, b) {
                gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x);
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = slot(grads, a) {
                for ((o, x), bv) in ga.iter_mut().zip(g).zip(b.data()) {
                    *o += x * bv;
                }
            }
            if let Some(gb) = slot(grads, b) {
                for ((o, x), av) in gb.iter_mut().zip(g).zip(a.data()) {
                    *o += x * av;
                }
            }
        }
        Op::Scale(a, k) => {
            if let Some(ga) = slot(grads, a) {
                ga.iter_mut().zip(g).for_each(|(o, x)| *o += k * x);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = slot(grads, a) {
                add_into(ga, g);
            }
        }
        Op::Square(a) => {
            if let Some(ga) = slot(grads, a) {
                for ((o, x), av) in ga.iter_mut().zip(g).zip(a.data()) {
                    *o += 2.0 * av * x;
                }
            }
        }
        Op::Sqrt(a) => {
            if let Some(ga) = slot(grads, a) {
                for ((o, x), y) in ga.iter_mut().zip(g).zip(node.data()) {
                    *o += x * 0.5 / y;
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = slot(grads, a) {
                for ((o, x), y) in ga.iter_mut().zip(g).zip(node.data()) {
                    *o += x * (1.0 - y * y);
                }
            }
        }
        Op::Gelu(a) => {
            if let Some(ga) = slot(grads, a) {
                let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
                for ((o, x), &v) in ga.iter_mut().zip(g).zip(a.data()) {
                    let cdf = 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
                    let pdf = inv_sqrt_2pi * (-0.5 * v * v).exp();
                    *o += x * (cdf + v * pdf);
                }
            }
        }
        Op::Softmax(a) => {
            if let Some(ga) = slot(grads, a) {
                let d = *node.shape().last().unwrap();
                for ((go, gy), y) in ga.chunks_mut(d).zip(g.chunks(d)).zip(node.data().chunks(d)) {
                    let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        go[j] += y[j] * (gy[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = *node.shape().last().unwrap();
            if let Some(gg) = slot(grads, gamma) {
                for (gy, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gy[j] * xh[j];
                    }
                }
            }
            if let Some(gbeta) = slot(grads, beta) {
                for gy in g.chunks(d) {
                    add_into(gbeta, gy);
                }
            }
            if let Some(gx) = slot(grads, x) {
                let gam = gamma.data();
                let inv_d = 1.0 / d as f64;
                for (r, ((gxr, gy), xh)) in gx
                    .chunks_mut(d)
                    .zip(g.chunks(d))
                    .zip(xhat.chunks(d))
                    .enumerate()
                {
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = gy[j] * gam[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                    }
                    for j in 0..d {
                        let dxh = gy[j] * gam[j];
                        gxr[j] += rstd[r] * (dxh - inv_d * sum_dxh - xh[j] * inv_d * sum_dxh_xh);
                    }
                }
            }
        }
        Op::Gather { src, index } => {
            if let Some(gs) = slot(grads, src) {
                for (&i, &x) in index.iter().zip(g) {
                    if i != GATHER_ZERO {
                        gs[i] += x;
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let shape = node.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let row = shape[*axis] * inner;
            let mut offset = 0;
            for p in parts {
                let block = p.shape()[*axis] * inner;
                if let Some(gp) = slot(grads, p) {
                    for o in 0..outer {
                        let src = &g[o * row + offset..][..block];
                        add_into(&mut gp[o * block..(o + 1) * block], src);
                    }
                }
                offset += block;
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(grads, a) {
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, x)| *o += x);
}
