//! Forward definitions of the primitive operators.
//!
//! Feature maps are NHWC. Every operator validates shapes up front and
//! records what its backward rule needs.

use super::graph::{BinaryKind, Graph, Op, UnaryKind, Var};
use super::kernels::{self, SampleDims, Window};
use super::tensor::{strides, Tensor};
use crate::error::{Error, Result};

/// Label value skipped by the loss operators.
pub const IGNORE_LABEL: u8 = 255;

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits a shape around `axis` into (outer, axis, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn nhwc(g: &Graph, v: Var, op: &'static str) -> Result<[usize; 4]> {
    let s = g.shape(v);
    match s {
        [n, h, w, c] => Ok([*n, *h, *w, *c]),
        _ => Err(Error::invalid(op, format!("expected an NHWC tensor, got shape {s:?}"))),
    }
}

impl Graph {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let tag = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let out_shape = kernels::broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(tag, &sa, &sb))?;
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
            BinaryKind::Div => |x: f64, y: f64| x / y,
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let n: usize = out_shape.iter().product();
            let mut out = vec![0.0; n];
            let st_a = kernels::broadcast_strides(&sa, &out_shape);
            let st_b = kernels::broadcast_strides(&sb, &out_shape);
            kernels::for_each_broadcast(&out_shape, &st_a, &st_b, |o, ia, ib| {
                out[o] = f(va[ia], vb[ib]);
            });
            out
        };
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Binary { kind, a, b }))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale { a, factor })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar { a })
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Relu => |x| x.max(0.0),
            UnaryKind::Gelu => gelu,
        };
        let v = self.value(a).map(f);
        self.push(v, Op::Unary { kind, a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Gelu, a)
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b }))
    }

    /// `[b, m, k] x [b, k, n] -> [b, m, n]`, or `[b, m, k] x [b, n, k]^T` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (bs, m, k, n) = match (sa, sb, trans_b) {
            ([b1, m, k], [b2, k2, n], false) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            ([b1, m, k], [b2, n, k2], true) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return Err(Error::shape("batch_matmul", sa, sb)),
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            let ai = &va[i * m * k..(i + 1) * m * k];
            let bi = &vb[i * k * n..(i + 1) * k * n];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                for r in 0..m {
                    for c in 0..n {
                        oi[r * n + c] = kernels::dot(&ai[r * k..(r + 1) * k], &bi[c * k..(c + 1) * k]);
                    }
                }
            } else {
                kernels::matmul_acc(ai, bi, oi, m, k, n);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![bs, m, n], out),
            Op::BatchMatMul { a, b, trans_b },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape { a }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of {s:?}")));
        }
        let data = permute_data(self.value(a).data(), &s, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Sliding-window unfold of an NHWC map into `[n, oh, ow, kh*kw*c]`.
    pub fn im2col(&mut self, a: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let [n, h, w, c] = nhwc(self, a, "im2col")?;
        if kernel == 0 || stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::invalid(
                "im2col",
                format!("kernel {kernel}, stride {stride}, pad {pad} do not fit a {h}x{w} map"),
            ));
        }
        let window = Window {
            n,
            h,
            w,
            c,
            kh: kernel,
            kw: kernel,
            stride,
            pad,
        };
        let data = kernels::im2col(self.value(a).data(), &window);
        let shape = vec![n, window.out_h(), window.out_w(), window.col_len()];
        Ok(self.push(Tensor::from_parts(shape, data), Op::Im2Col { a, window }))
    }

    /// Bilinear gather with zero padding.
    ///
    /// `input` is `[n, h, w, c]`; `grid` is `[n, p, groups, 2]` of absolute
    /// (row, col) positions. Returns `[n, p, c]`, where each channel group is
    /// read at its own position.
    pub fn grid_sample(&mut self, input: Var, grid: Var) -> Result<Var> {
        let [n, h, w, c] = nhwc(self, input, "grid_sample")?;
        let gs = self.shape(grid).to_vec();
        let (p, groups) = match gs.as_slice() {
            [gn, p, groups, 2] if *gn == n && *groups > 0 && c % *groups == 0 => (*p, *groups),
            _ => return Err(Error::shape("grid_sample", &[n, h, w, c], &gs)),
        };
        let dims = SampleDims {
            n,
            h,
            w,
            c,
            p,
            groups,
        };
        let data = kernels::grid_sample(self.value(input).data(), self.value(grid).data(), &dims);
        Ok(self.push(
            Tensor::from_parts(vec![n, p, c], data),
            Op::GridSample { input, grid, dims },
        ))
    }

    /// Average pooling; padded cells count toward the divisor.
    pub fn avg_pool(&mut self, a: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let [n, h, w, c] = nhwc(self, a, "avg_pool")?;
        if kernel == 0 || stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::invalid("avg_pool", "window does not fit the map"));
        }
        let window = Window {
            n,
            h,
            w,
            c,
            kh: kernel,
            kw: kernel,
            stride,
            pad,
        };
        let data = kernels::avg_pool(self.value(a).data(), &window);
        let shape = vec![n, window.out_h(), window.out_w(), c];
        Ok(self.push(Tensor::from_parts(shape, data), Op::AvgPool { a, window }))
    }

    /// `[n, h, w, c] -> [n, 1, 1, c]`
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let [n, h, w, c] = nhwc(self, a, "global_avg_pool")?;
        let x = self.value(a).data();
        let mut out = vec![0.0; n * c];
        let inv = 1.0 / (h * w) as f64;
        for b in 0..n {
            let dst = &mut out[b * c..(b + 1) * c];
            for px in 0..h * w {
                let src = (b * h * w + px) * c;
                kernels::axpy(inv, &x[src..src + c], dst);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, 1, 1, c], out), Op::GlobalAvgPool { a }))
    }

    /// Bilinear resize (half-pixel centers, edge clamped).
    pub fn upsample_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, h, w, c] = nhwc(self, a, "upsample_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("upsample_bilinear", "empty output size"));
        }
        if (out_h, out_w) == (h, w) {
            return Ok(a);
        }
        let data = kernels::upsample(self.value(a).data(), n, h, w, c, out_h, out_w);
        Ok(self.push(Tensor::from_parts(vec![n, out_h, out_w, c], data), Op::Upsample { a }))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let data = softmax_data(self.value(a).data(), &s, axis, false);
        Ok(self.push(Tensor::from_parts(s, data), Op::Softmax { a, axis }))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::invalid("log_softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let data = softmax_data(self.value(a).data(), &s, axis, true);
        Ok(self.push(Tensor::from_parts(s, data), Op::LogSoftmax { a, axis }))
    }

    /// Normalizes over the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let c = *s.last().expect("non-empty shape");
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", &s, self.shape(gamma)));
        }
        let x = self.value(a).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = x.len() / c;
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean negative log-likelihood over rows of `[.., k]` log-probabilities,
    /// skipping rows labelled [`IGNORE_LABEL`]. Zero when every row is ignored.
    pub fn nll(&mut self, log_probs: Var, labels: &[u8]) -> Result<Var> {
        let s = self.shape(log_probs).to_vec();
        let k = *s.last().expect("non-empty shape");
        let rows = self.value(log_probs).numel() / k;
        if labels.len() != rows {
            return Err(Error::shape("nll", &s, &[labels.len()]));
        }
        let lp = self.value(log_probs).data();
        let mut total = 0.0;
        let mut count = 0;
        for (r, &y) in labels.iter().enumerate() {
            if y == IGNORE_LABEL {
                continue;
            }
            if y as usize >= k {
                return Err(Error::invalid("nll", format!("label {y} out of range for {k} classes")));
            }
            total -= lp[r * k + y as usize];
            count += 1;
        }
        let value = if count == 0 {
            log::warn!("nll: every pixel is ignored, loss defined as 0");
            0.0
        } else {
            total / count as f64
        };
        Ok(self.push(
            Tensor::scalar(value),
            Op::Nll {
                a: log_probs,
                labels: labels.to_vec(),
                count,
            },
        ))
    }

    /// Cross-entropy of logits along the last axis against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let axis = self.shape(logits).len() - 1;
        let lp = self.log_softmax(logits, axis)?;
        self.nll(lp, labels)
    }

    /// `mean over unmasked rows of sum_c exp(log_p) * (log_p - log_q)`,
    /// i.e. KL(p || q) with both distributions in log space. Rows are taken
    /// along the last axis.
    pub fn kl_div(&mut self, log_q: Var, log_p: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(log_q).to_vec();
        if self.shape(log_p) != s.as_slice() {
            return Err(Error::shape("kl_div", &s, self.shape(log_p)));
        }
        let c = *s.last().expect("non-empty shape");
        let rows = self.value(log_q).numel() / c;
        if mask.len() != rows {
            return Err(Error::shape("kl_div", &s, &[mask.len()]));
        }
        let (lq, lp) = (self.value(log_q).data(), self.value(log_p).data());
        let mut total = 0.0;
        let mut count = 0;
        for r in (0..rows).filter(|&r| mask[r]) {
            for j in r * c..(r + 1) * c {
                total += lp[j].exp() * (lp[j] - lq[j]);
            }
            count += 1;
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Tensor::scalar(value),
            Op::KlDiv {
                log_q,
                log_p,
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Clamps each element into `[lo[j], hi[j]]` where `j` indexes the last axis.
    pub fn clamp_last_dim(&mut self, a: Var, lo: &[f64], hi: &[f64]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let c = *s.last().expect("non-empty shape");
        if lo.len() != c || hi.len() != c {
            return Err(Error::shape("clamp", &s, &[lo.len()]));
        }
        let x = self.value(a).data();
        let data = x
            .iter()
            .enumerate()
            .map(|(i, &v)| v.max(lo[i % c]).min(hi[i % c]))
            .collect();
        Ok(self.push(
            Tensor::from_parts(s, data),
            Op::Clamp {
                a,
                lo: lo.to_vec(),
                hi: hi.to_vec(),
            },
        ))
    }
}

pub(crate) fn permute_data(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // stride in the input of each output axis
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zero = vec![0; out_shape.len()];
    let mut out = vec![0.0; x.len()];
    kernels::for_each_broadcast(&out_shape, &src_strides, &zero, |o, i, _| out[o] = x[i]);
    out
}

pub(crate) fn softmax_data(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|j| (x[at(j)] - max).exp()).sum();
            if log {
                let lz = z.ln() + max;
                for j in 0..len {
                    out[at(j)] = x[at(j)] - lz;
                }
            } else {
                for j in 0..len {
                    out[at(j)] = (x[at(j)] - max).exp() / z;
                }
            }
        }
    }
    out
}
