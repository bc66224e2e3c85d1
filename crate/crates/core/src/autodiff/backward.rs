use super::{ConvGeom, Node, Op};

/// Gradient buffer of node `id`, allocated on demand; `None` when the node
/// does not need a gradient.
fn slot<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

/// Pushes `g` (the gradient of node `id`) onto the node's inputs.
pub(super) fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf { .. } => {}
        &Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if let Some(da) = slot(grads, nodes, a) {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, b) {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let a_ip = av[i * k + p];
                        for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *d += a_ip * gv;
                        }
                    }
                }
            }
        }
        &Op::Add(a, b) => {
            for (input, sign) in [(a, 1.0), (b, 1.0)] {
                if let Some(d) = slot(grads, nodes, input) {
                    d.iter_mut().zip(g).for_each(|(d, gv)| *d += sign * gv);
                }
            }
        }
        &Op::Sub(a, b) => {
            for (input, sign) in [(a, 1.0), (b, -1.0)] {
                if let Some(d) = slot(grads, nodes, input) {
                    d.iter_mut().zip(g).for_each(|(d, gv)| *d += sign * gv);
                }
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if let Some(d) = slot(grads, nodes, a) {
                for ((d, gv), y) in d.iter_mut().zip(g).zip(bv) {
                    *d += gv * y;
                }
            }
            if let Some(d) = slot(grads, nodes, b) {
                for ((d, gv), x) in d.iter_mut().zip(g).zip(av) {
                    *d += gv * x;
                }
            }
        }
        &Op::Scale { x, factor } => {
            if let Some(d) = slot(grads, nodes, x) {
                d.iter_mut().zip(g).for_each(|(d, gv)| *d += factor * gv);
            }
        }
        &Op::Shift(x) | &Op::Reshape(x) => {
            if let Some(d) = slot(grads, nodes, x) {
                d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
            }
        }
        &Op::Sigmoid(x) => {
            let y = &node.value;
            if let Some(d) = slot(grads, nodes, x) {
                for ((d, gv), y) in d.iter_mut().zip(g).zip(y) {
                    *d += gv * y * (1.0 - y);
                }
            }
        }
        &Op::Tanh(x) => {
            let y = &node.value;
            if let Some(d) = slot(grads, nodes, x) {
                for ((d, gv), y) in d.iter_mut().zip(g).zip(y) {
                    *d += gv * (1.0 - y * y);
                }
            }
        }
        &Op::Relu(x) => {
            let xv = &nodes[x].value;
            if let Some(d) = slot(grads, nodes, x) {
                for ((d, gv), xv) in d.iter_mut().zip(g).zip(xv) {
                    if *xv > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        &Op::Sum {
            x,
            outer,
            len,
            inner,
        }
        | &Op::Mean {
            x,
            outer,
            len,
            inner,
        } => {
            let factor = if matches!(node.op, Op::Mean { .. }) {
                1.0 / len as f64
            } else {
                1.0
            };
            if let Some(d) = slot(grads, nodes, x) {
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += factor * s);
                    }
                }
            }
        }
        Op::Max { x, argmax } => {
            if let Some(d) = slot(grads, nodes, *x) {
                for (&i, gv) in argmax.iter().zip(g) {
                    d[i] += gv;
                }
            }
        }
        Op::Gather { x, map } => {
            if let Some(d) = slot(grads, nodes, *x) {
                for (&i, gv) in map.iter().zip(g) {
                    d[i] += gv;
                }
            }
        }
        Op::Concat {
            inputs,
            outer,
            lens,
            inner,
        } => {
            let total: usize = lens.iter().sum();
            let mut offset = 0;
            for (&input, &len) in inputs.iter().zip(lens) {
                if let Some(d) = slot(grads, nodes, input) {
                    for o in 0..*outer {
                        let src =
                            &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut d[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                offset += len;
            }
        }
        &Op::Softmax(x) => {
            let y = &node.value;
            let k = *node.shape.last().unwrap();
            if let Some(d) = slot(grads, nodes, x) {
                for ((dd, gg), yy) in d.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                    let dot: f64 = gg.iter().zip(yy).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in dd.iter_mut().zip(gg).zip(yy) {
                        *d += yv * (gv - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, inv_std } => {
            let y = &node.value;
            let k = *node.shape.last().unwrap();
            if let Some(d) = slot(grads, nodes, *x) {
                for (((dd, gg), yy), inv) in d
                    .chunks_mut(k)
                    .zip(g.chunks(k))
                    .zip(y.chunks(k))
                    .zip(inv_std)
                {
                    let mean_g = gg.iter().sum::<f64>() / k as f64;
                    let mean_gy = gg.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / k as f64;
                    for ((d, gv), yv) in dd.iter_mut().zip(gg).zip(yy) {
                        *d += inv * (gv - mean_g - yv * mean_gy);
                    }
                }
            }
        }
        &Op::Conv1d { x, w, geom } => conv_backward(nodes, x, w, geom, g, grads),
    }
}

fn conv_backward(
    nodes: &[Node],
    x: usize,
    w: usize,
    c: ConvGeom,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let (xv, wv) = (&nodes[x].value, &nodes[w].value);
    if let Some(dx) = slot(grads, nodes, x) {
        for t in 0..c.steps {
            for b in 0..c.batch {
                let gout = &g[(t * c.batch + b) * c.c_out..(t * c.batch + b + 1) * c.c_out];
                for j in 0..c.taps {
                    let Some(src_t) = t.checked_sub(j * c.dilation) else {
                        break;
                    };
                    let base = (src_t * c.batch + b) * c.c_in;
                    for ci in 0..c.c_in {
                        let wrow =
                            &wv[(j * c.c_in + ci) * c.c_out..(j * c.c_in + ci + 1) * c.c_out];
                        dx[base + ci] += gout.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
    if let Some(dw) = slot(grads, nodes, w) {
        for t in 0..c.steps {
            for b in 0..c.batch {
                let gout = &g[(t * c.batch + b) * c.c_out..(t * c.batch + b + 1) * c.c_out];
                for j in 0..c.taps {
                    let Some(src_t) = t.checked_sub(j * c.dilation) else {
                        break;
                    };
                    let base = (src_t * c.batch + b) * c.c_in;
                    for ci in 0..c.c_in {
                        let xin = xv[base + ci];
                        let drow =
                            &mut dw[(j * c.c_in + ci) * c.c_out..(j * c.c_in + ci + 1) * c.c_out];
                        drow.iter_mut().zip(gout).for_each(|(d, gv)| *d += xin * gv);
                    }
                }
            }
        }
    }
}
