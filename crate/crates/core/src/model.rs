//! Four-stage transformer encoder with (deformable) patch embeddings and the
//! two deformable-MLP decoders.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{Conv2d, LayerNorm, Linear};
use crate::autodiff::{checkpoint, Graph, ParamStore, Tensor, Var};
use crate::deform::{
    offsets_of, offset_bounds, pool_mixer_px, ChannelMixer, Dmlp, OffsetField, OffsetGranularity, PatchEmbed,
    PatchEmbedConfig, Restriction, DEFAULT_R,
};
use crate::error::{Error, Result};

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    V1,
    V2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchEmbedKind {
    Standard,
    Deformable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Tiny,
    Small,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            _ => Err(Error::invalid("preset", format!("unknown preset `{s}`"))),
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stage_depths: [usize; 4],
    pub stage_channels: [usize; 4],
    pub heads: [usize; 4],
    pub sr_ratios: [usize; 4],
    pub mlp_ratio: usize,
    /// Patch size of the first (stride 4) embedding.
    pub stem_patch: usize,
    /// `C_emb`.
    pub embed_dim: usize,
    pub num_classes: usize,
    pub decoder: DecoderKind,
    pub patch_embed: PatchEmbedKind,
    pub r: Restriction,
    #[serde(default)]
    pub offset_granularity: OffsetGranularity,
    /// One CX instance per decoder stage, used by both parallel branches.
    #[serde(default = "yes")]
    pub share_cx: bool,
    /// Replace DMLP with a plain channel MLP (the vanilla-MLP baseline).
    #[serde(default)]
    pub vanilla_mlp: bool,
}

impl ModelConfig {
    pub fn preset(p: Preset, num_classes: usize) -> Self {
        let base = Self {
            stage_depths: [2, 2, 2, 2],
            stage_channels: [64, 128, 320, 512],
            heads: [1, 2, 5, 8],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratio: 4,
            stem_patch: 7,
            embed_dim: 128,
            num_classes,
            decoder: DecoderKind::V2,
            patch_embed: PatchEmbedKind::Deformable,
            r: DEFAULT_R,
            offset_granularity: OffsetGranularity::PerTap,
            share_cx: true,
            vanilla_mlp: false,
        };
        match p {
            Preset::Toy => Self {
                stage_depths: [1, 1, 1, 1],
                stage_channels: [16, 32, 64, 128],
                heads: [1, 2, 4, 8],
                stem_patch: 4,
                embed_dim: 32,
                ..base
            },
            Preset::Tiny => base,
            Preset::Small => Self {
                stage_depths: [3, 4, 6, 3],
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("model_config", msg));
        if self.embed_dim == 0 {
            return bad("C_emb must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.stem_patch < STRIDES[0] {
            return bad(format!("stem patch {} is smaller than stride 4", self.stem_patch));
        }
        if self.r == Some(0) {
            return bad("r must be positive".into());
        }
        for l in 0..4 {
            let c = self.stage_channels[l];
            if c == 0 || self.heads[l] == 0 || c % self.heads[l] != 0 {
                return bad(format!("stage {} channels {c} not divisible by {} heads", l + 1, self.heads[l]));
            }
            if self.sr_ratios[l] == 0 || (STRIDES[3] / STRIDES[l]) % self.sr_ratios[l] != 0 {
                return bad(format!("stage {} reduction ratio {} must divide {}", l + 1, self.sr_ratios[l], STRIDES[3] / STRIDES[l]));
            }
        }
        Ok(())
    }

    fn embed_config(&self, l: usize) -> PatchEmbedConfig {
        let cin = if l == 0 { 3 } else { self.stage_channels[l - 1] };
        let (s, stride) = if l == 0 { (self.stem_patch, 4) } else { (3, 2) };
        PatchEmbedConfig {
            deformable: self.patch_embed == PatchEmbedKind::Deformable,
            r: self.r,
            granularity: self.offset_granularity,
            ..PatchEmbedConfig::new(s, stride, cin, self.stage_channels[l])
        }
    }

    fn decoder_embed_config(&self, l: usize) -> PatchEmbedConfig {
        PatchEmbedConfig {
            deformable: self.patch_embed == PatchEmbedKind::Deformable,
            r: self.r,
            granularity: self.offset_granularity,
            ..PatchEmbedConfig::new(3, 1, self.stage_channels[l], self.embed_dim)
        }
    }
}

/// Checks that both extents are multiples of 32.
pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    let m = STRIDES[3];
    if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
        let pad = |v: usize| (m - v % m) % m;
        return Err(Error::invalid(
            "encode",
            format!(
                "input {h}x{w} must be divisible by {m}; pad by {} rows and {} columns",
                pad(h),
                pad(w)
            ),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct Attention {
    heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    reduce: Option<(Conv2d, LayerNorm)>,
}

impl Attention {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let [n, h, w, c] = shape4(g, x, "attention")?;
        let (heads, d) = (self.heads, c / self.heads);
        let split = |g: &mut Graph, t: Var, len: usize| -> Result<Var> {
            let t = g.reshape(t, &[n, len, heads, d])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            g.reshape(t, &[n * heads, len, d])
        };
        let q = self.q.forward(g, store, x)?;
        let q = split(g, q, h * w)?;
        let src = match &self.reduce {
            Some((conv, norm)) => {
                let r = conv.forward(g, store, x)?;
                norm.forward(g, store, r)?
            }
            None => x,
        };
        let [_, sh, sw, _] = shape4(g, src, "attention")?;
        let k = self.k.forward(g, store, src)?;
        let k = split(g, k, sh * sw)?;
        let v = self.v.forward(g, store, src)?;
        let v = split(g, v, sh * sw)?;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax(scores, 2)?;
        let out = g.batch_matmul(attn, v, false)?;
        let out = g.reshape(out, &[n, heads, h * w, d])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[n, h, w, c])?;
        self.proj.forward(g, store, out)
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, c: usize, heads: usize, sr: usize, ratio: usize, rng: &mut ChaCha8Rng) -> Self {
        let reduce = (sr > 1).then(|| {
            (
                Conv2d::new(store, &format!("{name}.attn.sr"), c, c, sr, sr, 0, rng),
                LayerNorm::new(store, &format!("{name}.attn.sr_norm"), c),
            )
        });
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c),
            attn: Attention {
                heads,
                q: Linear::new(store, &format!("{name}.attn.q"), c, c, rng),
                k: Linear::new(store, &format!("{name}.attn.k"), c, c, rng),
                v: Linear::new(store, &format!("{name}.attn.v"), c, c, rng),
                proj: Linear::new(store, &format!("{name}.attn.proj"), c, c, rng),
                reduce,
            },
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c),
            fc1: Linear::new(store, &format!("{name}.ffn.fc1"), c, c * ratio, rng),
            fc2: Linear::new(store, &format!("{name}.ffn.fc2"), c * ratio, c, rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.norm1.forward(g, store, x)?;
        let y = self.attn.forward(g, store, y)?;
        let x = g.add(x, y)?;
        let y = self.norm2.forward(g, store, x)?;
        let y = self.fc1.forward(g, store, y)?;
        let y = g.gelu(y);
        let y = self.fc2.forward(g, store, y)?;
        g.add(x, y)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    embed: PatchEmbed,
    embed_norm: LayerNorm,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

/// The four stage features `f1..f4` at strides 4, 8, 16, 32.
#[derive(Clone, Copy, Debug)]
pub struct Pyramid {
    pub features: [Var; 4],
}

#[derive(Clone, Debug)]
enum Spatial {
    Deformable(Dmlp),
    Vanilla(Linear),
}

/// Token mixing block of one decoder stage.
#[derive(Clone, Debug)]
enum Mixer {
    V1 { dmlp: Spatial, mlp: Linear },
    V2 { dmlp: Spatial, cx_a: ChannelMixer, cx_b: Option<ChannelMixer> },
}

#[derive(Clone, Debug)]
struct DecoderStage {
    embed: PatchEmbed,
    mixer: Mixer,
}

/// Test hooks for the v2 block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeHooks {
    /// Use the identity in place of PX.
    pub px_identity: bool,
    /// Force every CX gate to 1.
    pub cx_unit_gate: bool,
}

/// Decoder outputs.
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    /// Input-sized logits `[n, h, w, k]`.
    pub logits: Var,
    /// Logits at `H/4 x W/4` before the final upsample.
    pub logits_quarter: Var,
    /// Sum of the per-stage `C_emb` embeddings at `H/4 x W/4`.
    pub fused: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    stages: Vec<Stage>,
    decoder: Vec<DecoderStage>,
    head_norm: LayerNorm,
    pub(crate) head: Linear,
}

fn shape4(g: &Graph, v: Var, op: &'static str) -> Result<[usize; 4]> {
    match *g.shape(v) {
        [n, h, w, c] => Ok([n, h, w, c]),
        ref s => Err(Error::shape(op, s, &[0, 0, 0, 0])),
    }
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut stages = Vec::new();
        for l in 0..4 {
            let name = format!("enc.s{}", l + 1);
            let c = cfg.stage_channels[l];
            let embed = PatchEmbed::new(&mut store, &format!("{name}.embed"), cfg.embed_config(l), &mut rng)?;
            let embed_norm = LayerNorm::new(&mut store, &format!("{name}.embed_norm"), c);
            let blocks = (0..cfg.stage_depths[l])
                .map(|b| {
                    Block::new(
                        &mut store,
                        &format!("{name}.block{b}"),
                        c,
                        cfg.heads[l],
                        cfg.sr_ratios[l],
                        cfg.mlp_ratio,
                        &mut rng,
                    )
                })
                .collect();
            let norm = LayerNorm::new(&mut store, &format!("{name}.norm"), c);
            stages.push(Stage {
                embed,
                embed_norm,
                blocks,
                norm,
            });
        }
        let e = cfg.embed_dim;
        let mut decoder = Vec::new();
        for l in 0..4 {
            let name = format!("dec.s{}", l + 1);
            let embed = PatchEmbed::new(&mut store, &format!("{name}.embed"), cfg.decoder_embed_config(l), &mut rng)?;
            let dmlp = if cfg.vanilla_mlp {
                Spatial::Vanilla(Linear::new(&mut store, &format!("{name}.vmlp"), e, e, &mut rng))
            } else {
                Spatial::Deformable(Dmlp::new(&mut store, &format!("{name}.dmlp"), e, cfg.r, &mut rng)?)
            };
            let mixer = match cfg.decoder {
                DecoderKind::V1 => Mixer::V1 {
                    dmlp,
                    mlp: Linear::new(&mut store, &format!("{name}.mlp"), e, e, &mut rng),
                },
                DecoderKind::V2 => {
                    let (a, b) = if cfg.share_cx { ("cx", None) } else { ("cx_a", Some("cx_b")) };
                    let cx_a = ChannelMixer::new(&mut store, &format!("{name}.{a}"), e, &mut rng);
                    let cx_b = b.map(|b| ChannelMixer::new(&mut store, &format!("{name}.{b}"), e, &mut rng));
                    Mixer::V2 { dmlp, cx_a, cx_b }
                }
            };
            decoder.push(DecoderStage { embed, mixer });
        }
        let head_norm = LayerNorm::new(&mut store, "dec.head_norm", e);
        let head = Linear::new(&mut store, "dec.head", e, cfg.num_classes, &mut rng);
        Ok(Self {
            cfg,
            store,
            stages,
            decoder,
            head_norm,
            head,
        })
    }

    /// Number of scalar parameters in the decoder (everything after the encoder).
    pub fn decoder_param_count(&self) -> usize {
        self.store.numel_with_prefix("dec.")
    }

    pub fn encode(&self, g: &mut Graph, image: Var) -> Result<Pyramid> {
        Ok(self.encode_with_offsets(g, image)?.0)
    }

    /// Encoder pass that also returns each stage's embedding offsets, when deformable.
    pub fn encode_with_offsets(&self, g: &mut Graph, image: Var) -> Result<(Pyramid, [Option<Var>; 4])> {
        let [_, h, w, c] = shape4(g, image, "encode")?;
        if c != 3 {
            return Err(Error::shape("encode", g.shape(image), &[0, h, w, 3]));
        }
        check_input_size(h, w)?;
        let store = &self.store;
        let mut x = image;
        let mut feats = Vec::with_capacity(4);
        let mut offsets = [None; 4];
        for (l, st) in self.stages.iter().enumerate() {
            let (t, off) = st.embed.forward_with_offsets(g, store, x)?;
            offsets[l] = off;
            let mut t = st.embed_norm.forward(g, store, t)?;
            for b in &st.blocks {
                t = b.forward(g, store, t)?;
            }
            x = st.norm.forward(g, store, t)?;
            feats.push(x);
        }
        Ok((
            Pyramid {
                features: [feats[0], feats[1], feats[2], feats[3]],
            },
            offsets,
        ))
    }

    pub fn decode(&self, g: &mut Graph, pyramid: &Pyramid, out_h: usize, out_w: usize) -> Result<Decoded> {
        self.decode_with_hooks(g, pyramid, out_h, out_w, DecodeHooks::default())
    }

    pub fn decode_with_hooks(
        &self,
        g: &mut Graph,
        pyramid: &Pyramid,
        out_h: usize,
        out_w: usize,
        hooks: DecodeHooks,
    ) -> Result<Decoded> {
        let store = &self.store;
        let (qh, qw) = (out_h / STRIDES[0], out_w / STRIDES[0]);
        let mut fused = None;
        for (l, st) in self.decoder.iter().enumerate() {
            let f = pyramid.features[l];
            let [_, fh, fw, fc] = shape4(g, f, "decode")?;
            if (fh, fw, fc) != (out_h / STRIDES[l], out_w / STRIDES[l], self.cfg.stage_channels[l]) {
                return Err(Error::invalid(
                    "decode",
                    format!(
                        "stage {} feature is {fh}x{fw}x{fc}, expected {}x{}x{}",
                        l + 1,
                        out_h / STRIDES[l],
                        out_w / STRIDES[l],
                        self.cfg.stage_channels[l]
                    ),
                ));
            }
            let z = st.embed.forward(g, store, f)?;
            let z = self.mix(g, &st.mixer, z, hooks)?;
            let z = g.upsample_bilinear(z, qh, qw)?;
            fused = Some(match fused {
                None => z,
                Some(acc) => g.add(acc, z)?,
            });
        }
        let fused = fused.expect("four stages");
        let normed = self.head_norm.forward(g, store, fused)?;
        let logits_quarter = self.head.forward(g, store, normed)?;
        let logits = g.upsample_bilinear(logits_quarter, out_h, out_w)?;
        Ok(Decoded {
            logits,
            logits_quarter,
            fused,
        })
    }

    fn dmlp(&self, g: &mut Graph, spatial: &Spatial, z: Var) -> Result<Var> {
        match spatial {
            Spatial::Deformable(d) => d.forward(g, &self.store, z),
            Spatial::Vanilla(fc) => fc.forward(g, &self.store, z),
        }
    }

    fn mix(&self, g: &mut Graph, mixer: &Mixer, z: Var, hooks: DecodeHooks) -> Result<Var> {
        let store = &self.store;
        match mixer {
            Mixer::V1 { dmlp, mlp } => {
                let d = self.dmlp(g, dmlp, z)?;
                let z = g.add(d, z)?;
                let m = mlp.forward(g, store, z)?;
                g.add(m, z)
            }
            Mixer::V2 { dmlp, cx_a, cx_b } => {
                let cx_b = cx_b.as_ref().unwrap_or(cx_a);
                let channel = |g: &mut Graph, cx: &ChannelMixer, z: Var| {
                    if hooks.cx_unit_gate {
                        Ok(z)
                    } else {
                        cx.forward(g, store, z)
                    }
                };
                let p = if hooks.px_identity { z } else { pool_mixer_px(g, z)? };
                let c = channel(g, cx_a, z)?;
                let z = g.add(p, c)?;
                let d = self.dmlp(g, dmlp, z)?;
                let c = channel(g, cx_b, z)?;
                g.add(d, c)
            }
        }
    }

    /// Encoder and decoder in one pass over an `[n, h, w, 3]` image batch.
    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<Decoded> {
        let [_, h, w, _] = shape4(g, image, "forward")?;
        let pyr = self.encode(g, image)?;
        self.decode(g, &pyr, h, w)
    }

    /// Per-pixel class distribution `[n, h, w, k]` and argmax labels.
    pub fn segment(&self, image: &Tensor) -> Result<(Tensor, Vec<u8>)> {
        let mut g = Graph::inference();
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, x)?;
        let axis = g.shape(out.logits).len() - 1;
        let p = g.softmax(out.logits, axis)?;
        let probs = g.value(p).clone();
        let labels = argmax_rows(probs.data(), self.cfg.num_classes);
        Ok((probs, labels))
    }

    /// Clamped encoder embedding offsets for one image, with the
    /// embedding geometry and the stride of the map each stage samples.
    pub fn encoder_offsets(&self, image: &Tensor) -> Result<Vec<(usize, OffsetField, PatchEmbedConfig, usize)>> {
        let mut g = Graph::inference();
        let x = g.constant(image.clone());
        let (pyr, offsets) = self.encode_with_offsets(&mut g, x)?;
        let mut out = Vec::new();
        for l in 0..4 {
            let Some(off) = offsets[l] else { continue };
            let input_stride = if l == 0 { 1 } else { STRIDES[l - 1] };
            let src = if l == 0 { x } else { pyr.features[l - 1] };
            let [_, sh, sw, _] = shape4(&g, src, "encoder_offsets")?;
            let bounds = offset_bounds(sh, sw, self.cfg.r)?;
            out.push((l + 1, offsets_of(g.value(off), 0, bounds)?, self.stages[l].embed.cfg, input_stride));
        }
        Ok(out)
    }

    /// Writes the parameters to `path` and the config to `path` with a `.json` extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        checkpoint::save(&self.store, path)?;
        let cfg_path = config_path(path);
        let json = serde_json::to_string_pretty(&self.cfg)?;
        std::fs::write(&cfg_path, json).map_err(|e| Error::io(&cfg_path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cfg_path = config_path(path);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        let mut model = Self::new(cfg, 0)?;
        let stored = checkpoint::load(path)?;
        model.store.copy_from(&stored)?;
        Ok(model)
    }
}

pub fn config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

/// Row-wise argmax over the last axis; ties go to the lowest index.
pub fn argmax_rows(values: &[f64], k: usize) -> Vec<u8> {
    values
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}
