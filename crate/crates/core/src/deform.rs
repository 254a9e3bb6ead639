//! Deformable operators: deformable patch embedding (DPE), the
//! deformable MLP mixer (DMLP), the pooling mixer (PX) and the
//! squeeze-excite channel mixer (CX).
//!
//! All maps are NHWC. Offsets are `(dy, dx)` pairs in input-pixel units and
//! are clamped to `[-H/r, H/r] x [-W/r, W/r]`, where `H, W` are the extents
//! of the map being sampled.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{Conv2d, Linear};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Offset restriction factor `r`; `None` leaves offsets unbounded.
pub type Restriction = Option<u32>;

pub const DEFAULT_R: Restriction = Some(4);

/// Continuous displacements stored `[h, w, groups, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    pub height: usize,
    pub width: usize,
    /// Kernel taps for DPE, channels for DMLP.
    pub groups: usize,
    pub data: Vec<f64>,
    /// `(row, col)` bound; infinite when unrestricted.
    pub bounds: (f64, f64),
}

impl OffsetField {
    pub fn new(height: usize, width: usize, groups: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * groups * 2 {
            return Err(Error::shape("offset_field", &[height, width, groups, 2], &[data.len()]));
        }
        Ok(Self {
            height,
            width,
            groups,
            data,
            bounds: (f64::INFINITY, f64::INFINITY),
        })
    }

    /// `(dy, dx)` at a location and group.
    pub fn get(&self, y: usize, x: usize, group: usize) -> (f64, f64) {
        let i = ((y * self.width + x) * self.groups + group) * 2;
        (self.data[i], self.data[i + 1])
    }

    pub fn within_bounds(&self) -> bool {
        self.data
            .chunks_exact(2)
            .all(|p| p[0].abs() <= self.bounds.0 && p[1].abs() <= self.bounds.1)
    }
}

/// The `(row, col)` bound `(H/r, W/r)`.
pub fn offset_bounds(h: usize, w: usize, r: Restriction) -> Result<(f64, f64)> {
    match r {
        Some(0) => Err(Error::invalid("clamp_offsets", "restriction factor r must be positive")),
        Some(r) => Ok((h as f64 / r as f64, w as f64 / r as f64)),
        None => Ok((f64::INFINITY, f64::INFINITY)),
    }
}

/// Componentwise clamp of rows to `±H/r` and columns to `±W/r`.
pub fn clamp_offsets(raw: &OffsetField, h: usize, w: usize, r: Restriction) -> Result<OffsetField> {
    if h == 0 || w == 0 {
        return Err(Error::invalid("clamp_offsets", "H and W must be positive"));
    }
    let (bh, bw) = offset_bounds(h, w, r)?;
    let data = raw
        .data
        .chunks_exact(2)
        .flat_map(|p| [p[0].clamp(-bh, bh), p[1].clamp(-bw, bw)])
        .collect();
    Ok(OffsetField {
        data,
        bounds: (bh, bw),
        ..raw.clone()
    })
}

/// The `s*s` integer lattice offsets of a patch relative to its center,
/// row-major, each component in `[floor(-s/2), floor(s/2)]`.
pub fn fixed_offsets(s: usize) -> Vec<(i64, i64)> {
    let half = (s / 2) as i64;
    let mut out = Vec::with_capacity(s * s);
    for ky in 0..s as i64 {
        for kx in 0..s as i64 {
            out.push((ky - half, kx - half));
        }
    }
    out
}

/// How many offset pairs the DPE predictor emits per output location.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetGranularity {
    /// One pair per kernel tap (`2*s*s` channels).
    #[default]
    PerTap,
    /// One pair shared by all taps (`2` channels).
    PerLocation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchEmbedConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub r: Restriction,
    pub deformable: bool,
    #[serde(default)]
    pub granularity: OffsetGranularity,
}

impl PatchEmbedConfig {
    /// Deformable embedding; non-overlapping when `s == stride`, otherwise padded by `s/2`.
    pub fn new(patch_size: usize, stride: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            patch_size,
            stride,
            pad: if patch_size == stride { 0 } else { patch_size / 2 },
            in_channels,
            out_channels,
            r: DEFAULT_R,
            deformable: true,
            granularity: OffsetGranularity::PerTap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.patch_size > 0
            && self.stride > 0
            && self.patch_size >= self.stride
            && self.in_channels > 0
            && self.out_channels > 0
            && self.r != Some(0);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("patch_embed", format!("invalid config {self:?}")))
        }
    }

    pub fn out_extent(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.patch_size) / self.stride + 1
    }

    fn taps(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// Patch embedding whose taps may be displaced by learned offsets.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub cfg: PatchEmbedConfig,
    /// Offset predictor `g`, zero-initialized so training starts from the fixed lattice.
    pub offset: Option<Conv2d>,
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, name: &str, cfg: PatchEmbedConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let offset = cfg.deformable.then(|| {
            let out = match cfg.granularity {
                OffsetGranularity::PerTap => 2 * cfg.taps(),
                OffsetGranularity::PerLocation => 2,
            };
            Conv2d {
                proj: Linear::zeroed(store, &format!("{name}.offset"), cfg.taps() * cfg.in_channels, out),
                kernel: cfg.patch_size,
                stride: cfg.stride,
                pad: cfg.pad,
            }
        });
        let proj = Linear::new(store, &format!("{name}.proj"), cfg.taps() * cfg.in_channels, cfg.out_channels, rng);
        Ok(Self { cfg, offset, proj })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.forward_with_offsets(g, store, x)?.0)
    }

    /// Tokens `[n, ho, wo, c_out]` and, for the deformable variant, the
    /// clamped offsets `[n, ho, wo, groups, 2]`.
    pub fn forward_with_offsets(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Option<Var>)> {
        let shape = g.shape(x).to_vec();
        let c = &self.cfg;
        let [n, h, w, cin] = match shape.as_slice() {
            &[n, h, w, cin] if cin == c.in_channels => [n, h, w, cin],
            _ => return Err(Error::shape("dpe_forward", &shape, &[0, 0, 0, c.in_channels])),
        };
        if h % c.stride != 0 || w % c.stride != 0 {
            return Err(Error::invalid(
                "dpe_forward",
                format!("{h}x{w} input is not divisible by stride {}", c.stride),
            ));
        }
        let Some(pred) = &self.offset else {
            let cols = g.im2col(x, c.patch_size, c.stride, c.pad)?;
            return Ok((self.proj.forward(g, store, cols)?, None));
        };
        let (ho, wo) = (c.out_extent(h), c.out_extent(w));
        let groups = match c.granularity {
            OffsetGranularity::PerTap => c.taps(),
            OffsetGranularity::PerLocation => 1,
        };
        let raw = pred.forward(g, store, x)?;
        let raw = g.reshape(raw, &[n, ho, wo, groups, 2])?;
        if g.value(raw).data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure {
                op: "dpe_offsets".into(),
            });
        }
        let (bh, bw) = offset_bounds(h, w, c.r)?;
        let offsets = g.clamp_last_dim(raw, &[-bh, -bw], &[bh, bw])?;
        let base = g.constant(dpe_lattice(c, ho, wo));
        let grid = g.add(base, offsets)?;
        let grid = g.reshape(grid, &[n, ho * wo * c.taps(), 1, 2])?;
        let taps = g.grid_sample(x, grid)?;
        let cols = g.reshape(taps, &[n, ho, wo, c.taps() * cin])?;
        Ok((self.proj.forward(g, store, cols)?, Some(offsets)))
    }
}

/// Absolute tap positions of the undeformed patches, `[1, ho, wo, s*s, 2]`.
pub fn dpe_lattice(c: &PatchEmbedConfig, ho: usize, wo: usize) -> Tensor {
    let s = c.patch_size;
    let mut data = Vec::with_capacity(ho * wo * s * s * 2);
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..s {
                for kx in 0..s {
                    data.push((oy * c.stride + ky) as f64 - c.pad as f64);
                    data.push((ox * c.stride + kx) as f64 - c.pad as f64);
                }
            }
        }
    }
    Tensor::new(vec![1, ho, wo, s * s, 2], data).expect("lattice shape")
}

/// Gathers each channel at its own displaced location:
/// `out[n, y, x, c] = input[n, y + dy, x + dx, c]` bilinearly, zero outside.
///
/// `offsets` is `[n, h, w, c, 2]`.
pub fn dmlp_gather(g: &mut Graph, x: Var, offsets: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let [n, h, w, c] = match s.as_slice() {
        &[n, h, w, c] => [n, h, w, c],
        _ => return Err(Error::shape("dmlp_mix", &s, &[0, 0, 0, 0])),
    };
    if g.shape(offsets) != [n, h, w, c, 2] {
        return Err(Error::shape("dmlp_mix", &s, g.shape(offsets)));
    }
    let mut lattice = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for xx in 0..w {
            lattice.push(y as f64);
            lattice.push(xx as f64);
        }
    }
    let base = g.constant(Tensor::new(vec![1, h, w, 1, 2], lattice)?);
    let grid = g.add(base, offsets)?;
    let grid = g.reshape(grid, &[n, h * w, c, 2])?;
    let gathered = g.grid_sample(x, grid)?;
    g.reshape(gathered, &[n, h, w, c])
}

/// Deformable MLP: per-channel offsets from a 1x1 predictor, a per-channel
/// bilinear gather, then a fully connected map over channels.
#[derive(Clone, Debug)]
pub struct Dmlp {
    pub offset: Linear,
    pub fc: Linear,
    pub r: Restriction,
}

impl Dmlp {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, r: Restriction, rng: &mut impl Rng) -> Result<Self> {
        offset_bounds(1, 1, r)?;
        Ok(Self {
            offset: Linear::zeroed(store, &format!("{name}.offset"), channels, 2 * channels),
            fc: Linear::new(store, &format!("{name}.fc"), channels, channels, rng),
            r,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.forward_with_offsets(g, store, x)?.0)
    }

    pub fn forward_with_offsets(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        let [n, h, w, c] = match s.as_slice() {
            &[n, h, w, c] if c == self.fc.in_dim => [n, h, w, c],
            _ => return Err(Error::shape("dmlp_mix", &s, &[0, 0, 0, self.fc.in_dim])),
        };
        let raw = self.offset.forward(g, store, x)?;
        let raw = g.reshape(raw, &[n, h, w, c, 2])?;
        if g.value(raw).data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure {
                op: "dmlp_offsets".into(),
            });
        }
        let (bh, bw) = offset_bounds(h, w, self.r)?;
        let offsets = g.clamp_last_dim(raw, &[-bh, -bw], &[bh, bw])?;
        let mixed = dmlp_mix(g, store, x, offsets, &self.fc)?;
        Ok((mixed, offsets))
    }
}

/// The DMLP mixing step with explicit offsets `[n, h, w, c, 2]`.
pub fn dmlp_mix(g: &mut Graph, store: &ParamStore, x: Var, offsets: Var, fc: &Linear) -> Result<Var> {
    let c = *g.shape(x).last().expect("non-empty shape");
    if c != fc.in_dim {
        return Err(Error::shape("dmlp_mix", g.shape(x), &[fc.in_dim, fc.out_dim]));
    }
    let gathered = dmlp_gather(g, x, offsets)?;
    fc.forward(g, store, gathered)
}

/// 3x3 average pool, stride 1, zero padding 1 counted in the divisor.
pub fn pool_mixer_px(g: &mut Graph, x: Var) -> Result<Var> {
    g.avg_pool(x, 3, 1, 1)
}

pub const CX_REDUCTION: usize = 4;

/// Squeeze-excite gate: GAP, linear `C -> C/4`, ReLU, linear `C/4 -> C`, sigmoid, rescale.
#[derive(Clone, Debug)]
pub struct ChannelMixer {
    pub squeeze: Linear,
    pub excite: Linear,
}

impl ChannelMixer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let hidden = (channels / CX_REDUCTION).max(1);
        Self {
            squeeze: Linear::new(store, &format!("{name}.squeeze"), channels, hidden, rng),
            excite: Linear::new(store, &format!("{name}.excite"), hidden, channels, rng),
        }
    }

    /// The `[n, 1, 1, c]` gate in `(0, 1)`.
    pub fn gate(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let c = *g.shape(x).last().expect("non-empty shape");
        if c != self.squeeze.in_dim {
            return Err(Error::shape("channel_mixer_cx", g.shape(x), &[self.squeeze.in_dim]));
        }
        let pooled = g.global_avg_pool(x)?;
        let hidden = self.squeeze.forward(g, store, pooled)?;
        let hidden = g.relu(hidden);
        let logits = self.excite.forward(g, store, hidden)?;
        Ok(g.sigmoid(logits))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gate = self.gate(g, store, x)?;
        g.mul(x, gate)
    }
}

/// Offset field of one image in a batched `[n, h, w, groups, 2]` tensor.
pub fn offsets_of(t: &Tensor, image: usize, bounds: (f64, f64)) -> Result<OffsetField> {
    let s = t.shape();
    let &[n, h, w, groups, 2] = s else {
        return Err(Error::shape("offset_field", s, &[0, 0, 0, 0, 2]));
    };
    if image >= n {
        return Err(Error::invalid("offset_field", format!("image {image} of {n}")));
    }
    let len = h * w * groups * 2;
    let mut field = OffsetField::new(h, w, groups, t.data()[image * len..(image + 1) * len].to_vec())?;
    field.bounds = bounds;
    Ok(field)
}

/// Appends CSV rows `stage,y,x,dy,dx` for a DPE offset field.
///
/// Each tap yields one row: `(y, x)` is its undeformed position and
/// `(dy, dx)` its learned displacement, both scaled to image pixels by
/// `input_stride`, the stride of the map the embedding samples.
pub fn write_offset_csv(
    out: &mut String,
    stage: usize,
    field: &OffsetField,
    cfg: &PatchEmbedConfig,
    input_stride: usize,
) {
    let s = cfg.patch_size;
    let scale = input_stride as f64;
    for oy in 0..field.height {
        for ox in 0..field.width {
            for tap in 0..s * s {
                let group = if field.groups == 1 { 0 } else { tap };
                let (dy, dx) = field.get(oy, ox, group);
                let y = ((oy * cfg.stride + tap / s) as f64 - cfg.pad as f64) * scale;
                let x = ((ox * cfg.stride + tap % s) as f64 - cfg.pad as f64) * scale;
                let _ = writeln!(out, "{stage},{y},{x},{},{}", dy * scale, dx * scale);
            }
        }
    }
}

pub const OFFSET_CSV_HEADER: &str = "stage,y,x,dy,dx";

#[cfg(test)]
mod tests;
