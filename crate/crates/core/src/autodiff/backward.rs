//! Backward rules, one arm per operator.

use super::graph::{BinaryKind, Graph, Op, UnaryKind, Var};
use super::kernels;
use super::ops::{gelu_grad, permute_data, split_axis};
use crate::error::Result;

type Grads = [Option<Vec<f64>>];

impl Graph {
    pub(crate) fn propagate(&self, idx: usize, g: &[f64], grads: &mut Grads) -> Result<()> {
        let node = &self.nodes[idx];
        let tag = node.op.tag();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => self.binary_backward(*kind, *a, *b, node.value.shape(), g, grads, tag)?,
            Op::Scale { a, factor } => {
                let c = g.iter().map(|v| v * factor).collect();
                self.accumulate(grads, *a, tag, c)?;
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                self.accumulate(grads, *a, tag, g.to_vec())?;
            }
            Op::Unary { kind, a } => {
                let x = self.value(*a).data();
                let c = match kind {
                    UnaryKind::Exp => g.iter().zip(out).map(|(g, y)| g * y).collect(),
                    UnaryKind::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                    UnaryKind::Sigmoid => g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    UnaryKind::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    UnaryKind::Gelu => g.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect(),
                };
                self.accumulate(grads, *a, tag, c)?;
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_bt_acc(g, self.value(*b).data(), &mut ga, m, k, n);
                    self.accumulate(grads, *a, tag, ga)?;
                }
                if self.needs_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_at_acc(self.value(*a).data(), g, &mut gb, m, k, n);
                    self.accumulate(grads, *b, tag, gb)?;
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs_grad(*a) {
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &vb[i * k * n..(i + 1) * k * n];
                        let out_i = &mut ga[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // b is [n, k]: ga = g * b
                            kernels::matmul_acc(gi, bi, out_i, m, n, k);
                        } else {
                            kernels::matmul_bt_acc(gi, bi, out_i, m, k, n);
                        }
                    }
                    self.accumulate(grads, *a, tag, ga)?;
                }
                if self.needs_grad(*b) {
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let out_i = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // gb[n, k] = g^T * a
                            kernels::matmul_at_acc(gi, ai, out_i, m, n, k);
                        } else {
                            kernels::matmul_at_acc(ai, gi, out_i, m, k, n);
                        }
                    }
                    self.accumulate(grads, *b, tag, gb)?;
                }
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let c = permute_data(g, node.value.shape(), &inv);
                self.accumulate(grads, *a, tag, c)?;
            }
            Op::Im2Col { a, window } => {
                let mut c = vec![0.0; self.value(*a).numel()];
                kernels::col2im_acc(g, window, &mut c);
                self.accumulate(grads, *a, tag, c)?;
            }
            Op::GridSample { input, grid, dims } => {
                let mut gi = self.needs_grad(*input).then(|| vec![0.0; self.value(*input).numel()]);
                let mut gg = self.needs_grad(*grid).then(|| vec![0.0; self.value(*grid).numel()]);
                kernels::grid_sample_backward(
                    self.value(*input).data(),
                    self.value(*grid).data(),
                    g,
                    dims,
                    gi.as_deref_mut(),
                    gg.as_deref_mut(),
                );
                if let Some(gi) = gi {
                    self.accumulate(grads, *input, tag, gi)?;
                }
                if let Some(gg) = gg {
                    self.accumulate(grads, *grid, tag, gg)?;
                }
            }
            Op::AvgPool { a, window } => {
                let mut c = vec![0.0; self.value(*a).numel()];
                kernels::avg_pool_backward(g, window, &mut c);
                self.accumulate(grads, *a, tag, c)?;
            }
            Op::GlobalAvgPool { a } => {
                let s = self.shape(*a);
                let (n, hw, ch) = (s[0], s[1] * s[2], s[3]);
                let inv = 1.0 / hw as f64;
                let mut c = vec![0.0; n * hw * ch];
                for b in 0..n {
                    let src = &g[b * ch..(b + 1) * ch];
                    for px in 0..hw {
                        let dst = (b * hw + px) * ch;
                        kernels::axpy(inv, src, &mut c[dst..dst + ch]);
                    }
                }
                self.accumulate(grads, *a, tag, c)?;
            }
            Op::Upsample { a } => {
                let s = self.shape(*a);
                let os = node.value.shape();
                let mut c = vec![0.0; self.value(*a).numel()];
                kernels::upsample_backward(g, s[0], s[1], s[2], s[3], os[1], os[2], &mut c);
                self.accumulate(grads, *a, tag, c)?;
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut c = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dotp: f64 = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                        for j in 0..len {
                            c[at(j)] = out[at(j)] * (g[at(j)] - dotp);
                        }
                    }
                }
                self.accumulate(grads, *a, tag, c)?;
            }
            Op::LogSoftmax { a, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut c = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let gs: f64 = (0..len).map(|j| g[at(j)]).sum();
                        for j in 0..len {
                            c[at(j)] = g[at(j)] - out[at(j)].exp() * gs;
                        }
                    }
                }
                self.accumulate(grads, *a, tag, c)?;
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma).data();
                let ch = gv.len();
                let rows = xhat.len() / ch;
                if self.needs_grad(*a) {
                    let mut c = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let sl = r * ch..(r + 1) * ch;
                        let (gr, xr) = (&g[sl.clone()], &xhat[sl.clone()]);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..ch {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xr[j];
                        }
                        mean_d /= ch as f64;
                        mean_dx /= ch as f64;
                        for j in 0..ch {
                            let d = gr[j] * gv[j];
                            c[r * ch + j] = rstd[r] * (d - mean_d - xr[j] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *a, tag, c)?;
                }
                if self.needs_grad(*gamma) || self.needs_grad(*beta) {
                    let mut gg = vec![0.0; ch];
                    let mut gb = vec![0.0; ch];
                    for r in 0..rows {
                        for j in 0..ch {
                            gg[j] += g[r * ch + j] * xhat[r * ch + j];
                            gb[j] += g[r * ch + j];
                        }
                    }
                    self.accumulate(grads, *gamma, tag, gg)?;
                    self.accumulate(grads, *beta, tag, gb)?;
                }
            }
            Op::Nll { a, labels, count } => {
                let k = *self.shape(*a).last().expect("non-empty");
                let mut c = vec![0.0; self.value(*a).numel()];
                if *count > 0 {
                    let w = -g[0] / *count as f64;
                    for (r, &y) in labels.iter().enumerate() {
                        if y != super::ops::IGNORE_LABEL {
                            c[r * k + y as usize] = w;
                        }
                    }
                }
                self.accumulate(grads, *a, tag, c)?;
            }
            Op::KlDiv { log_q, log_p, mask, count } => {
                let ch = *self.shape(*log_q).last().expect("non-empty");
                let (lq, lp) = (self.value(*log_q).data(), self.value(*log_p).data());
                let scale = if *count == 0 { 0.0 } else { g[0] / *count as f64 };
                let rows = || mask.iter().enumerate().filter(|(_, m)| **m).map(|(r, _)| r);
                if self.needs_grad(*log_q) {
                    let mut c = vec![0.0; lq.len()];
                    for r in rows() {
                        for j in r * ch..(r + 1) * ch {
                            c[j] = -lp[j].exp() * scale;
                        }
                    }
                    self.accumulate(grads, *log_q, tag, c)?;
                }
                if self.needs_grad(*log_p) {
                    let mut c = vec![0.0; lp.len()];
                    for r in rows() {
                        for j in r * ch..(r + 1) * ch {
                            c[j] = lp[j].exp() * (lp[j] - lq[j] + 1.0) * scale;
                        }
                    }
                    self.accumulate(grads, *log_p, tag, c)?;
                }
            }
            Op::Sum { a } => {
                let c = vec![g[0]; self.value(*a).numel()];
                self.accumulate(grads, *a, tag, c)?;
            }
            Op::Clamp { a, lo, hi } => {
                let x = self.value(*a).data();
                let ch = lo.len();
                let c = g
                    .iter()
                    .zip(x)
                    .enumerate()
                    .map(|(i, (g, &x))| if x > lo[i % ch] && x < hi[i % ch] { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, tag, c)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn binary_backward(
        &self,
        kind: BinaryKind,
        a: Var,
        b: Var,
        out_shape: &[usize],
        g: &[f64],
        grads: &mut Grads,
        tag: &'static str,
    ) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (va, vb) = (ta.data(), tb.data());
        let (need_a, need_b) = (self.needs_grad(a), self.needs_grad(b));
        let mut ga = need_a.then(|| vec![0.0; va.len()]);
        let mut gb = need_b.then(|| vec![0.0; vb.len()]);
        let sa = kernels::broadcast_strides(ta.shape(), out_shape);
        let sb = kernels::broadcast_strides(tb.shape(), out_shape);
        kernels::for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
            let go = g[o];
            let (da, db) = match kind {
                BinaryKind::Add => (go, go),
                BinaryKind::Sub => (go, -go),
                BinaryKind::Mul => (go * vb[ib], go * va[ia]),
                BinaryKind::Div => (go / vb[ib], -go * va[ia] / (vb[ib] * vb[ib])),
            };
            if let Some(ga) = ga.as_mut() {
                ga[ia] += da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[ib] += db;
            }
        });
        if let Some(ga) = ga {
            self.accumulate(grads, a, tag, ga)?;
        }
        if let Some(gb) = gb {
            self.accumulate(grads, b, tag, gb)?;
        }
        Ok(())
    }
}
