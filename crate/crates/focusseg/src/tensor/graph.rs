//! Reverse traversal of the recorded computation graph.
//!
//! The graph is the DAG of tensor handles reachable from a root through op
//! records. It is acyclic by construction (ops only reference already-built
//! tensors). `backward_pass` visits each node exactly once in reverse
//! topological order and accumulates gradients additively across fan-out.

use std::collections::{HashMap, HashSet};

use super::{
    broadcast_strides, for_each_broadcast, op_inputs, BinaryKind, Op, Tensor, UnaryKind,
};
use crate::error::{Error, Result};

/// Gradients keyed by tensor id. Only nodes on a path from a `requires_grad`
/// leaf to the root appear.
pub type GradMap = HashMap<u64, Vec<f64>>;

/// Topological order (inputs before outputs) of the subgraph that needs
/// gradients, rooted at `root`.
pub fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    if !root.needs_grad() {
        return order;
    }
    // Iterative post-order DFS; parents of a node are its op inputs.
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        let children: Vec<Tensor> = match node.op() {
            Some(op) => op_inputs(op)
                .into_iter()
                .filter(|t| t.needs_grad())
                .cloned()
                .collect(),
            None => Vec::new(),
        };
        stack.push((node, true));
        for child in children {
            if !visited.contains(&child.id()) {
                stack.push((child, false));
            }
        }
    }
    order
}

pub(super) fn accumulate(map: &mut GradMap, tensor: &Tensor, contribution: Vec<f64>) {
    debug_assert_eq!(contribution.len(), tensor.numel());
    match map.get_mut(&tensor.id()) {
        Some(buf) => {
            for (b, c) in buf.iter_mut().zip(&contribution) {
                *b += c;
            }
        }
        None => {
            map.insert(tensor.id(), contribution);
        }
    }
}

/// Computes the gradient of a scalar `loss` with respect to every node that
/// needs one. Does not touch tensor grad cells; see [`Tensor::backward`].
pub fn backward_pass(loss: &Tensor) -> Result<GradMap> {
    if loss.numel() != 1 {
        return Err(Error::contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let mut grads: GradMap = HashMap::new();
    if !loss.needs_grad() {
        return Ok(grads);
    }
    grads.insert(loss.id(), vec![1.0]);
    let order = topo_order(loss);
    for node in order.iter().rev() {
        let Some(grad) = grads.get(&node.id()).cloned() else {
            continue;
        };
        let Some(op) = node.op() else { continue };
        propagate(op, node, &grad, &mut grads);
    }
    Ok(grads)
}

fn propagate(op: &Op, node: &Tensor, grad: &[f64], grads: &mut GradMap) {
    match op {
        Op::Binary { kind, lhs, rhs } => {
            backward_binary(*kind, lhs, rhs, node, grad, grads);
        }
        Op::Unary { kind, input } => {
            let gi = backward_unary(*kind, input, node, grad);
            accumulate(grads, input, gi);
        }
        Op::SumAll { input } => {
            if input.needs_grad() {
                accumulate(grads, input, vec![grad[0]; input.numel()]);
            }
        }
        Op::SumSpatial { input } => {
            if input.needs_grad() {
                let (c, h, w) = input.dims3().expect("recorded op shape");
                let mut gi = vec![0.0; c * h * w];
                for ch in 0..c {
                    gi[ch * h * w..(ch + 1) * h * w].fill(grad[ch]);
                }
                accumulate(grads, input, gi);
            }
        }
        Op::GlobalAvgPool { input } => {
            if input.needs_grad() {
                let (c, h, w) = input.dims3().expect("recorded op shape");
                let inv = 1.0 / (h * w) as f64;
                let mut gi = vec![0.0; c * h * w];
                for ch in 0..c {
                    gi[ch * h * w..(ch + 1) * h * w].fill(grad[ch] * inv);
                }
                accumulate(grads, input, gi);
            }
        }
        Op::Conv2d(rec) => super::conv::backward(rec, node, grad, grads),
        Op::BilinearUpsample { input, factor } => {
            if input.needs_grad() {
                accumulate(grads, input, backward_upsample(input, *factor, grad));
            }
        }
        Op::LogSoftmax { input } => {
            if input.needs_grad() {
                let (c, h, w) = input.dims3().expect("recorded op shape");
                let hw = h * w;
                let out = node.data();
                let mut gi = vec![0.0; c * hw];
                for p in 0..hw {
                    let gsum: f64 = (0..c).map(|ch| grad[ch * hw + p]).sum();
                    for ch in 0..c {
                        gi[ch * hw + p] =
                            grad[ch * hw + p] - out[ch * hw + p].exp() * gsum;
                    }
                }
                accumulate(grads, input, gi);
            }
        }
        Op::ConcatChannels { inputs } => {
            let mut offset = 0;
            for input in inputs {
                let n = input.numel();
                if input.needs_grad() {
                    accumulate(grads, input, grad[offset..offset + n].to_vec());
                }
                offset += n;
            }
        }
        Op::SteMask { features, scores, mask } => {
            let (c, h, w) = features.dims3().expect("recorded op shape");
            let hw = h * w;
            if features.needs_grad() {
                let mut gf = vec![0.0; c * hw];
                for ch in 0..c {
                    for p in 0..hw {
                        gf[ch * hw + p] = grad[ch * hw + p] * mask[p];
                    }
                }
                accumulate(grads, features, gf);
            }
            if scores.needs_grad() {
                // Straight-through: d(mask)/d(scores) treated as identity.
                let fd = features.data();
                let mut gs = vec![0.0; hw];
                for ch in 0..c {
                    for p in 0..hw {
                        gs[p] += grad[ch * hw + p] * fd[ch * hw + p];
                    }
                }
                accumulate(grads, scores, gs);
            }
        }
    }
}

fn backward_binary(
    kind: BinaryKind,
    lhs: &Tensor,
    rhs: &Tensor,
    node: &Tensor,
    grad: &[f64],
    grads: &mut GradMap,
) {
    let out_shape = node.shape();
    let lstr = broadcast_strides(lhs.shape(), out_shape);
    let rstr = broadcast_strides(rhs.shape(), out_shape);
    let (ld, rd) = (lhs.data(), rhs.data());
    let mut gl = if lhs.needs_grad() { Some(vec![0.0; lhs.numel()]) } else { None };
    let mut gr = if rhs.needs_grad() { Some(vec![0.0; rhs.numel()]) } else { None };
    for_each_broadcast(out_shape, &lstr, &rstr, |o, li, ri| {
        let g = grad[o];
        match kind {
            BinaryKind::Add => {
                if let Some(b) = gl.as_mut() {
                    b[li] += g;
                }
                if let Some(b) = gr.as_mut() {
                    b[ri] += g;
                }
            }
            BinaryKind::Sub => {
                if let Some(b) = gl.as_mut() {
                    b[li] += g;
                }
                if let Some(b) = gr.as_mut() {
                    b[ri] -= g;
                }
            }
            BinaryKind::Mul => {
                if let Some(b) = gl.as_mut() {
                    b[li] += g * rd[ri];
                }
                if let Some(b) = gr.as_mut() {
                    b[ri] += g * ld[li];
                }
            }
            BinaryKind::Div => {
                let denom = rd[ri];
                if let Some(b) = gl.as_mut() {
                    b[li] += g / denom;
                }
                if let Some(b) = gr.as_mut() {
                    b[ri] -= g * ld[li] / (denom * denom);
                }
            }
        }
    });
    if let Some(b) = gl {
        accumulate(grads, lhs, b);
    }
    if let Some(b) = gr {
        accumulate(grads, rhs, b);
    }
}

fn backward_unary(kind: UnaryKind, input: &Tensor, node: &Tensor, grad: &[f64]) -> Vec<f64> {
    let x = input.data();
    let y = node.data();
    grad.iter()
        .enumerate()
        .map(|(i, &g)| match kind {
            UnaryKind::Sigmoid => g * y[i] * (1.0 - y[i]),
            UnaryKind::Relu => {
                if x[i] > 0.0 {
                    g
                } else {
                    0.0
                }
            }
            UnaryKind::Exp => g * y[i],
            UnaryKind::Log => g / x[i],
            UnaryKind::Scale(c) => g * c,
            UnaryKind::Clamp(lo, hi) => {
                if x[i] >= lo && x[i] <= hi {
                    g
                } else {
                    0.0
                }
            }
        })
        .collect()
}

fn backward_upsample(input: &Tensor, factor: usize, grad: &[f64]) -> Vec<f64> {
    let (c, h, w) = input.dims3().expect("recorded op shape");
    if factor == 1 {
        return grad.to_vec();
    }
    let (oh, ow) = (h * factor, w * factor);
    let ytaps = super::upsample_taps(h, factor);
    let xtaps = super::upsample_taps(w, factor);
    let mut gi = vec![0.0; c * h * w];
    for ch in 0..c {
        let gp = &grad[ch * oh * ow..(ch + 1) * oh * ow];
        let out = &mut gi[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ytaps.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in xtaps.iter().enumerate() {
                let g = gp[oy * ow + ox];
                out[y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                out[y0 * w + x1] += g * (1.0 - wy) * wx;
                out[y1 * w + x0] += g * wy * (1.0 - wx);
                out[y1 * w + x1] += g * wy * wx;
            }
        }
    }
    gi
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topo_visits_each_node_once() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.mul(&x).unwrap();
        let z = y.add(&y).unwrap().sum_all();
        let order = topo_order(&z);
        let mut seen = HashSet::new();
        for t in &order {
            assert!(seen.insert(t.id()), "node visited twice");
        }
        // x, y, y+y, sum — constants excluded.
        assert_eq!(order.len(), 4);
    }

    #[test]
    fn constant_subgraphs_are_skipped() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let c = Tensor::from_vec(&[2], vec![5.0, 5.0]).unwrap();
        let loss = x.mul(&c).unwrap().sum_all();
        let grads = backward_pass(&loss).unwrap();
        assert!(grads.contains_key(&x.id()));
        assert!(!grads.contains_key(&c.id()));
    }

    #[test]
    fn div_gradients() {
        let a = Tensor::param(&[1], vec![3.0]).unwrap();
        let b = Tensor::param(&[1], vec![2.0]).unwrap();
        a.div(&b).unwrap().sum_all().backward().unwrap();
        assert!((a.grad().unwrap()[0] - 0.5).abs() < 1e-15);
        assert!((b.grad().unwrap()[0] + 0.75).abs() < 1e-15);
    }
}
