//! Raw numeric kernels shared by forward and backward passes.
//!
//! Everything here works on flat row-major slices; shape validation happens
//! in the graph layer before any kernel is called.

/// `out[m, n] += a[m, k] * b[k, n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m, k] += g[m, n] * b[k, n]` (gradient of a matmul w.r.t. its left operand).
pub fn matmul_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (kk, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            *o += dot(g_row, b_row);
        }
    }
}

/// `out[k, n] += a[m, k] * g[m, n]` (gradient of a matmul w.r.t. its right operand).
pub fn matmul_at_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators keep the loop vectorizable without reassociation flags
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Geometry of a sliding window over an NHWC map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn col_len(&self) -> usize {
        self.kh * self.kw * self.c
    }
}

/// Unfolds windows into `[n, oh, ow, kh*kw*c]` columns, taps ordered (ky, kx, c).
pub fn im2col(x: &[f64], g: &Window) -> Vec<f64> {
    let (oh, ow, cl) = (g.out_h(), g.out_w(), g.col_len());
    let mut out = vec![0.0; g.n * oh * ow * cl];
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ((n * oh + oy) * ow + ox) * cl;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let dst = base + (ky * g.kw + kx) * g.c;
                        out[dst..dst + g.c].copy_from_slice(&x[src..src + g.c]);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`].
pub fn col2im_acc(cols: &[f64], g: &Window, out: &mut [f64]) {
    let (oh, ow, cl) = (g.out_h(), g.out_w(), g.col_len());
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ((n * oh + oy) * ow + ox) * cl;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let src = base + (ky * g.kw + kx) * g.c;
                        for c in 0..g.c {
                            out[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear corner lookup with zero padding outside the map.
#[derive(Clone, Copy, Debug)]
pub struct Bilinear {
    pub y0: isize,
    pub x0: isize,
    pub fy: f64,
    pub fx: f64,
}

impl Bilinear {
    #[inline]
    pub fn new(y: f64, x: f64) -> Self {
        let y0 = y.floor();
        let x0 = x.floor();
        Self {
            y0: y0 as isize,
            x0: x0 as isize,
            fy: y - y0,
            fx: x - x0,
        }
    }

    /// The four corners as (row, col, weight) with out-of-range corners removed.
    #[inline]
    pub fn corners(&self, h: usize, w: usize) -> [Option<(usize, usize, f64)>; 4] {
        let cand = [
            (self.y0, self.x0, (1.0 - self.fy) * (1.0 - self.fx)),
            (self.y0, self.x0 + 1, (1.0 - self.fy) * self.fx),
            (self.y0 + 1, self.x0, self.fy * (1.0 - self.fx)),
            (self.y0 + 1, self.x0 + 1, self.fy * self.fx),
        ];
        cand.map(|(y, x, wt)| {
            (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w)
                .then_some((y as usize, x as usize, wt))
        })
    }
}

/// Dimensions of a grouped bilinear gather.
///
/// `input` is `[n, h, w, c]`, `grid` is `[n, p, groups, 2]` holding absolute
/// (row, col) positions with pixel centers on integers, output is `[n, p, c]`.
/// Group `g` covers channels `g*c/groups .. (g+1)*c/groups`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleDims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub p: usize,
    pub groups: usize,
}

pub fn grid_sample(input: &[f64], grid: &[f64], d: &SampleDims) -> Vec<f64> {
    let cg = d.c / d.groups;
    let mut out = vec![0.0; d.n * d.p * d.c];
    for n in 0..d.n {
        let img = &input[n * d.h * d.w * d.c..(n + 1) * d.h * d.w * d.c];
        for p in 0..d.p {
            let out_base = (n * d.p + p) * d.c;
            for g in 0..d.groups {
                let gi = ((n * d.p + p) * d.groups + g) * 2;
                let b = Bilinear::new(grid[gi], grid[gi + 1]);
                let ch0 = g * cg;
                let dst = &mut out[out_base + ch0..out_base + ch0 + cg];
                for (y, x, wt) in b.corners(d.h, d.w).into_iter().flatten() {
                    if wt == 0.0 {
                        continue;
                    }
                    let src = (y * d.w + x) * d.c + ch0;
                    axpy(wt, &img[src..src + cg], dst);
                }
            }
        }
    }
    out
}

/// Backward of [`grid_sample`]; accumulates into whichever gradient buffers are present.
pub fn grid_sample_backward(
    input: &[f64],
    grid: &[f64],
    gout: &[f64],
    d: &SampleDims,
    mut ginput: Option<&mut [f64]>,
    mut ggrid: Option<&mut [f64]>,
) {
    let cg = d.c / d.groups;
    let plane = d.h * d.w * d.c;
    for n in 0..d.n {
        for p in 0..d.p {
            let out_base = (n * d.p + p) * d.c;
            for g in 0..d.groups {
                let gi = ((n * d.p + p) * d.groups + g) * 2;
                let b = Bilinear::new(grid[gi], grid[gi + 1]);
                let ch0 = g * cg;
                let go = &gout[out_base + ch0..out_base + ch0 + cg];
                let corners = b.corners(d.h, d.w);
                if let Some(gin) = ginput.as_deref_mut() {
                    for (y, x, wt) in corners.into_iter().flatten() {
                        if wt == 0.0 {
                            continue;
                        }
                        let dst = n * plane + (y * d.w + x) * d.c + ch0;
                        axpy(wt, go, &mut gin[dst..dst + cg]);
                    }
                }
                if let Some(gg) = ggrid.as_deref_mut() {
                    // corner values dotted with the upstream gradient
                    let mut v = [0.0f64; 4];
                    for (slot, corner) in corners.iter().enumerate() {
                        if let Some((y, x, _)) = corner {
                            let src = n * plane + (y * d.w + x) * d.c + ch0;
                            v[slot] = dot(go, &input[src..src + cg]);
                        }
                    }
                    let (fy, fx) = (b.fy, b.fx);
                    gg[gi] += (1.0 - fx) * (v[2] - v[0]) + fx * (v[3] - v[1]);
                    gg[gi + 1] += (1.0 - fy) * (v[1] - v[0]) + fy * (v[3] - v[2]);
                }
            }
        }
    }
}

/// Source index pair and weight for align-corners=false bilinear resizing.
pub fn resize_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let lam = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, lam)
        })
        .collect()
}

pub fn upsample(x: &[f64], n: usize, h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut out = vec![0.0; n * oh * ow * c];
    for b in 0..n {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let dst = ((b * oh + oy) * ow + ox) * c;
                let taps = [
                    (y0, x0, (1.0 - ly) * (1.0 - lx)),
                    (y0, x1, (1.0 - ly) * lx),
                    (y1, x0, ly * (1.0 - lx)),
                    (y1, x1, ly * lx),
                ];
                for (y, xx, wt) in taps {
                    if wt == 0.0 {
                        continue;
                    }
                    let src = ((b * h + y) * w + xx) * c;
                    let (src_s, dst_s) = (&x[src..src + c], &mut out[dst..dst + c]);
                    axpy(wt, src_s, dst_s);
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn upsample_backward(
    g: &[f64],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    for b in 0..n {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let src = ((b * oh + oy) * ow + ox) * c;
                let taps = [
                    (y0, x0, (1.0 - ly) * (1.0 - lx)),
                    (y0, x1, (1.0 - ly) * lx),
                    (y1, x0, ly * (1.0 - lx)),
                    (y1, x1, ly * lx),
                ];
                for (y, xx, wt) in taps {
                    if wt == 0.0 {
                        continue;
                    }
                    let dst = ((b * h + y) * w + xx) * c;
                    axpy(wt, &g[src..src + c], &mut out[dst..dst + c]);
                }
            }
        }
    }
}

/// Average pooling counting padded cells in the divisor.
pub fn avg_pool(x: &[f64], g: &Window) -> Vec<f64> {
    // pooling is im2col followed by a tap mean, but done in place to avoid the column buffer
    let (oh, ow) = (g.out_h(), g.out_w());
    let inv = 1.0 / (g.kh * g.kw) as f64;
    let mut out = vec![0.0; g.n * oh * ow * g.c];
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = ((n * oh + oy) * ow + ox) * g.c;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let (s, d) = (&x[src..src + g.c], &mut out[dst..dst + g.c]);
                        axpy(inv, s, d);
                    }
                }
            }
        }
    }
    out
}

pub fn avg_pool_backward(gout: &[f64], g: &Window, out: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let inv = 1.0 / (g.kh * g.kw) as f64;
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((n * oh + oy) * ow + ox) * g.c;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        axpy(inv, &gout[src..src + g.c], &mut out[dst..dst + g.c]);
                    }
                }
            }
        }
    }
}

/// Output shape of numpy-style broadcasting, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (zero along broadcast axes).
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let own = super::tensor::strides(shape);
    (0..rank)
        .map(|i| {
            if i + shape.len() < rank {
                0
            } else {
                let j = i + shape.len() - rank;
                if shape[j] == 1 && out[i] != 1 {
                    0
                } else {
                    own[j]
                }
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast output.
pub fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut o = 0;
    for _ in 0..outer {
        let mut oa = 0;
        let mut ob = 0;
        for d in 0..rank - 1 {
            oa += idx[d] * sa[d];
            ob += idx[d] * sb[d];
        }
        for j in 0..inner {
            f(o, oa + j * ia, ob + j * ib);
            o += 1;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}
