//! Procedural multi-domain benchmark and image/label/manifest I/O.
//!
//! Scenes are a ground plane under a sky with building boxes, posts and
//! vehicle ellipsoids. Each pixel's color and label come from the same ray
//! hit, so silhouettes and label boundaries coincide exactly.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::geometry::erp_pixel_angles;

pub const CLASS_NAMES: [&str; 5] = ["ground", "sky", "building", "post", "vehicle"];
pub const GROUND: u8 = 0;
pub const SKY: u8 = 1;
pub const BUILDING: u8 = 2;
pub const POST: u8 = 3;
pub const VEHICLE: u8 = 4;

/// Eye height above the ground plane, in meters.
pub const CAMERA_HEIGHT: f64 = 1.3;

/// Interleaved 8-bit RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// One class index per pixel, [`IGNORE_LABEL`] for unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    /// Keeps columns `start..start + len`.
    pub fn crop_columns(&self, start: usize, len: usize) -> LabelMap {
        let data = (0..self.height)
            .flat_map(|y| self.data[y * self.width + start..y * self.width + start + len].iter().copied())
            .collect();
        LabelMap {
            width: len,
            height: self.height,
            data,
        }
    }
}

impl Image {
    pub fn crop_columns(&self, start: usize, len: usize) -> Image {
        let data = (0..self.height)
            .flat_map(|y| {
                let row = y * self.width;
                self.data[(row + start) * 3..(row + start + len) * 3].iter().copied()
            })
            .collect();
        Image {
            width: len,
            height: self.height,
            data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureMode {
    FlatSynthetic,
    NoisyRealistic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum CameraModel {
    /// Horizontal field of view in degrees, heading and pitch in radians.
    Pinhole { hfov_deg: f64, yaw: f64, pitch: f64 },
    Equirectangular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub texture: TextureMode,
    pub camera: CameraModel,
    pub buildings: (usize, usize),
    pub posts: (usize, usize),
    pub vehicles: (usize, usize),
    /// Per-domain color cast applied to every surface.
    #[serde(default)]
    pub tint: [f64; 3],
}

impl SceneSpec {
    pub fn new(seed: u64, width: usize, height: usize, texture: TextureMode, camera: CameraModel) -> Self {
        Self {
            seed,
            width,
            height,
            texture,
            camera,
            buildings: (3, 6),
            posts: (3, 5),
            vehicles: (2, 4),
            tint: [0.0; 3],
        }
    }
}

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: V3) -> V3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Unit direction for longitude (to the right of forward) and latitude.
/// World axes: x right, y up, z forward.
pub fn direction(lon: f64, lat: f64) -> V3 {
    [lat.cos() * lon.sin(), lat.sin(), lat.cos() * lon.cos()]
}

#[derive(Clone, Debug, PartialEq)]
pub enum Solid {
    /// Axis-aligned box between two corners.
    Box { min: V3, max: V3 },
    /// Vertical cylinder standing on the ground.
    Post { x: f64, z: f64, radius: f64, height: f64 },
    /// Axis-aligned ellipsoid.
    Ellipsoid { center: V3, radii: V3 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Object {
    pub solid: Solid,
    pub class: u8,
    pub color: V3,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scene {
    pub objects: Vec<Object>,
    /// Whether the ground plane is present.
    pub ground: bool,
    /// Shift of the ground texture lattice, in meters.
    pub ground_offset: [f64; 2],
}

struct Hit {
    t: f64,
    texture_offset: [f64; 2],
    normal: V3,
    class: u8,
    color: V3,
}

fn hit_solid(s: &Solid, o: V3, d: V3) -> Option<(f64, V3)> {
    const EPS: f64 = 1e-9;
    match *s {
        Solid::Box { min, max } => {
            let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
            let mut axis = 0;
            let mut sign = -1.0;
            for a in 0..3 {
                if d[a].abs() < EPS {
                    if o[a] < min[a] || o[a] > max[a] {
                        return None;
                    }
                    continue;
                }
                let (mut ta, mut tb) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                let mut s_a = -1.0;
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                    s_a = 1.0;
                }
                if ta > t0 {
                    t0 = ta;
                    axis = a;
                    sign = s_a;
                }
                t1 = t1.min(tb);
                if t0 > t1 {
                    return None;
                }
            }
            let mut n = [0.0; 3];
            n[axis] = sign;
            (t0 > EPS).then_some((t0, n))
        }
        Solid::Post { x, z, radius, height } => {
            let (px, pz) = (o[0] - x, o[2] - z);
            let a = d[0] * d[0] + d[2] * d[2];
            if a < EPS {
                return None;
            }
            let b = px * d[0] + pz * d[2];
            let c = px * px + pz * pz - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / a;
            let y = o[1] + t * d[1];
            (t > EPS && (0.0..=height).contains(&y)).then(|| (t, normalize([px + t * d[0], 0.0, pz + t * d[2]])))
        }
        Solid::Ellipsoid { center, radii } => {
            let q = [(o[0] - center[0]) / radii[0], (o[1] - center[1]) / radii[1], (o[2] - center[2]) / radii[2]];
            let e = [d[0] / radii[0], d[1] / radii[1], d[2] / radii[2]];
            let (a, b, c) = (dot(e, e), dot(q, e), dot(q, q) - 1.0);
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / a;
            if t <= EPS {
                return None;
            }
            let p = [q[0] + t * e[0], q[1] + t * e[1], q[2] + t * e[2]];
            Some((t, normalize([p[0] / radii[0], p[1] / radii[1], p[2] / radii[2]])))
        }
    }
}

impl Scene {
    fn trace(&self, d: V3) -> Hit {
        let o = [0.0, CAMERA_HEIGHT, 0.0];
        let mut best = Hit {
            t: f64::INFINITY,
            texture_offset: [0.0; 2],
            normal: [0.0, -1.0, 0.0],
            class: SKY,
            color: [0.0; 3],
        };
        if self.ground && d[1] < 0.0 {
            best = Hit {
                t: CAMERA_HEIGHT / -d[1],
                texture_offset: self.ground_offset,
                normal: [0.0, 1.0, 0.0],
                class: GROUND,
                color: [0.42, 0.40, 0.36],
            };
        }
        for obj in &self.objects {
            if let Some((t, normal)) = hit_solid(&obj.solid, o, d) {
                if t < best.t {
                    best = Hit {
                        t,
                        texture_offset: [0.0; 2],
                        normal,
                        class: obj.class,
                        color: obj.color,
                    };
                }
            }
        }
        best
    }
}

/// Deterministic lattice noise in `[0, 1)`.
fn hash3(x: i64, y: i64, z: i64) -> f64 {
    let mut h = (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (z as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    h ^= h >> 31;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 29;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn surface_color(hit: &Hit, d: V3, mode: TextureMode) -> V3 {
    let p = [d[0] * hit.t, CAMERA_HEIGHT + d[1] * hit.t, d[2] * hit.t];
    let base = hit.color;
    match hit.class {
        SKY => {
            let up = d[1].max(0.0);
            match mode {
                TextureMode::FlatSynthetic => [0.55, 0.75, 0.95],
                TextureMode::NoisyRealistic => [0.55 - 0.25 * up, 0.70 - 0.15 * up, 0.92],
            }
        }
        _ if mode == TextureMode::FlatSynthetic => base,
        GROUND => {
            let [ox, oz] = hit.texture_offset;
            let cell = hash3(((p[0] + ox) * 1.5).floor() as i64, 0, ((p[2] + oz) * 1.5).floor() as i64);
            let k = 0.85 + 0.3 * cell;
            [base[0] * k, base[1] * k, base[2] * k]
        }
        BUILDING => {
            // window grid on facades
            let along = if hit.normal[0].abs() > 0.5 { p[2] } else { p[0] };
            let window = (along * 1.2).rem_euclid(1.0) < 0.45 && (p[1] * 1.0).rem_euclid(1.0) < 0.5 && p[1] > 0.8;
            let shade = 0.75 + 0.25 * hit.normal[0].abs() + 0.1 * hit.normal[1];
            let k = if window { 0.55 } else { 1.0 } * shade;
            [base[0] * k, base[1] * k, base[2] * k]
        }
        VEHICLE => {
            let stripe = (p[1] * 6.0).rem_euclid(1.0) < 0.5;
            let k = if stripe { 1.0 } else { 0.6 };
            let light = 0.7 + 0.3 * hit.normal[1].max(0.0);
            [base[0] * k * light, base[1] * k * light, base[2] * k * light]
        }
        _ => {
            let band = (p[1] * 2.0).rem_euclid(1.0) < 0.2;
            let k = if band { 0.6 } else { 1.0 };
            [base[0] * k, base[1] * k, base[2] * k]
        }
    }
}

/// Ray directions for every pixel center, row-major.
fn camera_rays(camera: &CameraModel, width: usize, height: usize) -> Vec<V3> {
    let mut rays = Vec::with_capacity(width * height);
    match *camera {
        CameraModel::Equirectangular => {
            for r in 0..height {
                for c in 0..width {
                    let (lon, lat) = erp_pixel_angles(height, width, r, c);
                    rays.push(direction(lon, lat));
                }
            }
        }
        CameraModel::Pinhole { hfov_deg, yaw, pitch } => {
            let f = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
            let fwd = direction(yaw, pitch);
            let right = [yaw.cos(), 0.0, -yaw.sin()];
            let up = [
                fwd[1] * right[2] - fwd[2] * right[1],
                fwd[2] * right[0] - fwd[0] * right[2],
                fwd[0] * right[1] - fwd[1] * right[0],
            ];
            let up = if up[1] < 0.0 { [-up[0], -up[1], -up[2]] } else { up };
            for r in 0..height {
                for c in 0..width {
                    let u = (c as f64 + 0.5 - width as f64 / 2.0) / f;
                    let v = -(r as f64 + 0.5 - height as f64 / 2.0) / f;
                    rays.push(normalize([
                        fwd[0] + u * right[0] + v * up[0],
                        fwd[1] + u * right[1] + v * up[1],
                        fwd[2] + u * right[2] + v * up[2],
                    ]));
                }
            }
        }
    }
    rays
}

/// Renders a scene; `noise` supplies per-pixel sensor noise for the realistic mode.
pub fn render(scene: &Scene, spec: &SceneSpec, noise: &mut impl Rng) -> (Image, LabelMap) {
    let rays = camera_rays(&spec.camera, spec.width, spec.height);
    let normal = Normal::new(0.0, 0.04).expect("valid std");
    let mut image = Vec::with_capacity(rays.len() * 3);
    let mut labels = Vec::with_capacity(rays.len());
    for d in rays {
        let hit = scene.trace(d);
        let col = surface_color(&hit, d, spec.texture);
        for ch in 0..3 {
            let mut v = col[ch] + spec.tint[ch];
            if spec.texture == TextureMode::NoisyRealistic {
                v += normal.sample(noise);
            }
            image.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        labels.push(hit.class);
    }
    (
        Image {
            width: spec.width,
            height: spec.height,
            data: image,
        },
        LabelMap {
            width: spec.width,
            height: spec.height,
            data: labels,
        },
    )
}

const BUILDING_COLORS: [V3; 4] = [[0.62, 0.45, 0.35], [0.55, 0.55, 0.58], [0.70, 0.62, 0.48], [0.48, 0.40, 0.45]];
const VEHICLE_COLORS: [V3; 3] = [[0.75, 0.15, 0.12], [0.12, 0.25, 0.70], [0.85, 0.80, 0.15]];

/// Random scene layout for `seed`.
pub fn build_scene(spec: &SceneSpec) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut objects = Vec::new();
    let count = |rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)| rng.gen_range(lo..=hi.max(lo));
    let polar = |rng: &mut ChaCha8Rng, r0: f64, r1: f64| {
        let a = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let r = rng.gen_range(r0..r1);
        (r * a.sin(), r * a.cos())
    };
    for _ in 0..count(&mut rng, spec.buildings) {
        let (x, z) = polar(&mut rng, 9.0, 16.0);
        let (hx, hz) = (rng.gen_range(2.0..4.5), rng.gen_range(2.0..4.5));
        let height = rng.gen_range(5.0..12.0);
        objects.push(Object {
            solid: Solid::Box {
                min: [x - hx, 0.0, z - hz],
                max: [x + hx, height, z + hz],
            },
            class: BUILDING,
            color: BUILDING_COLORS[rng.gen_range(0..BUILDING_COLORS.len())],
        });
    }
    for _ in 0..count(&mut rng, spec.posts) {
        let (x, z) = polar(&mut rng, 2.5, 6.0);
        objects.push(Object {
            solid: Solid::Post {
                x,
                z,
                radius: rng.gen_range(0.3..0.5),
                height: rng.gen_range(3.5..5.0),
            },
            class: POST,
            color: [0.25, 0.25, 0.22],
        });
    }
    for _ in 0..count(&mut rng, spec.vehicles) {
        let (x, z) = polar(&mut rng, 3.5, 6.5);
        let radii = [rng.gen_range(1.2..1.8), rng.gen_range(0.8..1.0), rng.gen_range(1.2..1.8)];
        objects.push(Object {
            solid: Solid::Ellipsoid {
                center: [x, radii[1], z],
                radii,
            },
            class: VEHICLE,
            color: VEHICLE_COLORS[rng.gen_range(0..VEHICLE_COLORS.len())],
        });
    }
    Scene {
        objects,
        ground: true,
        ground_offset: [rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0)],
    }
}

/// Random layout rendered through `spec.camera`.
pub fn gen_scene(spec: &SceneSpec) -> (Image, LabelMap) {
    let scene = build_scene(spec);
    let mut noise = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xA5A5_5A5A_0F0F_F0F0);
    render(&scene, spec, &mut noise)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    SourcePinhole,
    SourceSynthetic,
    TargetPanoramic,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::SourcePinhole, Domain::SourceSynthetic, Domain::TargetPanoramic];

    pub fn name(self) -> &'static str {
        match self {
            Domain::SourcePinhole => "source-pinhole",
            Domain::SourceSynthetic => "source-synthetic",
            Domain::TargetPanoramic => "target-panoramic",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: String,
    pub label: String,
    pub domain: Domain,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub samples: Vec<SampleRecord>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn filter(&self, domain: Option<Domain>, split: Option<Split>) -> Vec<&SampleRecord> {
        self.samples
            .iter()
            .filter(|s| domain.map_or(true, |d| s.domain == d) && split.map_or(true, |sp| s.split == sp))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub train_per_domain: usize,
    pub val_per_domain: usize,
    pub width: usize,
    pub height: usize,
    pub pinhole_hfov_deg: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_per_domain: 8,
            val_per_domain: 4,
            width: 128,
            height: 64,
            pinhole_hfov_deg: 90.0,
        }
    }
}

/// Seed of item `index` derived from a root seed.
pub fn split_seed(root: u64, index: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(root);
    r.set_stream(index + 1);
    r.gen()
}

/// Scene spec for one domain; the three domains share scene layouts through `scene_seed`.
pub fn domain_spec(domain: Domain, scene_seed: u64, cfg: &BenchmarkConfig) -> SceneSpec {
    let (texture, camera, tint) = match domain {
        Domain::SourcePinhole => {
            let mut view = ChaCha8Rng::seed_from_u64(scene_seed ^ 0x1234);
            let yaw = view.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let pitch = view.gen_range(-0.3..0.1);
            (
                TextureMode::NoisyRealistic,
                CameraModel::Pinhole {
                    hfov_deg: cfg.pinhole_hfov_deg,
                    yaw,
                    pitch,
                },
                [0.0; 3],
            )
        }
        Domain::SourceSynthetic => (TextureMode::FlatSynthetic, CameraModel::Equirectangular, [0.0; 3]),
        Domain::TargetPanoramic => (TextureMode::NoisyRealistic, CameraModel::Equirectangular, [0.04, 0.02, -0.03]),
    };
    SceneSpec {
        tint,
        ..SceneSpec::new(scene_seed, cfg.width, cfg.height, texture, camera)
    }
}

/// Generates every domain's train and val splits under `root` and writes
/// `manifest.json` plus one manifest per domain (`<domain>.json`).
pub fn gen_benchmark(root: impl AsRef<Path>, cfg: &BenchmarkConfig) -> Result<Manifest> {
    let root = root.as_ref();
    let mut samples = Vec::new();
    for domain in Domain::ALL {
        for (split, count, offset) in [
            (Split::Train, cfg.train_per_domain, 0),
            (Split::Val, cfg.val_per_domain, cfg.train_per_domain),
        ] {
            let split_name = match split {
                Split::Train => "train",
                Split::Val => "val",
                Split::Test => "test",
            };
            let dir = root.join(domain.name()).join(split_name);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for i in 0..count {
                let seed = split_seed(cfg.seed, (offset + i) as u64);
                let (img, lbl) = gen_scene(&domain_spec(domain, seed, cfg));
                let rel_img = format!("{}/{split_name}/{i:03}.ppm", domain.name());
                let rel_lbl = format!("{}/{split_name}/{i:03}.pgm", domain.name());
                save_image(root.join(&rel_img), &img)?;
                save_labels(root.join(&rel_lbl), &lbl)?;
                samples.push(SampleRecord {
                    image: rel_img,
                    label: rel_lbl,
                    domain,
                    split,
                });
            }
        }
    }
    let manifest = Manifest {
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        samples,
    };
    manifest.save(root.join("manifest.json"))?;
    for domain in Domain::ALL {
        let m = Manifest {
            classes: manifest.classes.clone(),
            samples: manifest.samples.iter().filter(|s| s.domain == domain).cloned().collect(),
        };
        m.save(root.join(format!("{}.json", domain.name())))?;
    }
    Ok(manifest)
}

/// A decoded sample with its paths resolved against the manifest directory.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    pub labels: LabelMap,
    pub domain: Domain,
    pub split: Split,
}

/// Loads the samples of a manifest matching `split` (all when `None`).
pub fn load_samples(manifest_path: impl AsRef<Path>, split: Option<Split>) -> Result<Vec<Sample>> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::load(manifest_path)?;
    let base: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest
        .filter(None, split)
        .into_iter()
        .map(|rec| {
            let image = load_image(base.join(&rec.image))?;
            let labels = load_labels(base.join(&rec.label))?;
            if (image.width, image.height) != (labels.width, labels.height) {
                return Err(Error::invalid(
                    "load_samples",
                    format!("{} and {} differ in size", rec.image, rec.label),
                ));
            }
            Ok(Sample {
                image,
                labels,
                domain: rec.domain,
                split: rec.split,
            })
        })
        .collect()
}

pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Stacks same-sized images into a normalized `[n, h, w, 3]` tensor.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("images_to_tensor", "no images"))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * w * h * 3);
    for img in images {
        if (img.width, img.height) != (w, h) {
            return Err(Error::shape("images_to_tensor", &[h, w], &[img.height, img.width]));
        }
        data.extend(img.data.iter().map(|&v| (v as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD));
    }
    Tensor::new(vec![images.len(), h, w, 3], data)
}

// ---- PPM / PGM ----

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected a decimal number"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Format {
                offset: start,
                msg: "number out of range".into(),
            })
    }
}

/// Parses a binary netpbm file with the given magic and channel count.
fn decode_pnm(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = HeaderReader { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(r.err(format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    r.pos = 2;
    let width = r.number()?;
    let height = r.number()?;
    let maxval = r.number()?;
    if maxval != 255 {
        return Err(r.err(format!("only maxval 255 is supported, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(r.err("empty image"));
    }
    if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
        return Err(r.err("expected a single whitespace byte before the raster"));
    }
    r.pos += 1;
    let need = width * height * channels;
    let body = &bytes[r.pos..];
    if body.len() < need {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: format!("raster truncated: {} of {need} bytes", body.len()),
        });
    }
    Ok((width, height, body[..need].to_vec()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (width, height, data) = decode_pnm(bytes, b"P6", 3)?;
    Ok(Image { width, height, data })
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    out.extend_from_slice(&labels.data);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let (width, height, data) = decode_pnm(bytes, b"P5", 1)?;
    Ok(LabelMap { width, height, data })
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    decode_ppm(&read(path)?).map_err(|e| with_path(e, path))
}

pub fn save_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    write(path.as_ref(), &encode_ppm(img))
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    decode_pgm(&read(path)?).map_err(|e| with_path(e, path))
}

pub fn save_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    write(path.as_ref(), &encode_pgm(labels))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    }
}

/// Fraction of labelled pixels per class.
pub fn class_histogram(maps: &[&LabelMap], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    let mut total = 0usize;
    for m in maps {
        for &l in &m.data {
            if l != IGNORE_LABEL && (l as usize) < num_classes {
                counts[l as usize] += 1;
                total += 1;
            }
        }
    }
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

#[cfg(test)]
mod tests;
