//! Panoramic projection geometry.
//!
//! Angles are radians throughout. ERP pixels use pixel-center sampling:
//! column `c` sits at longitude `-pi + (c + 0.5) * 2pi / W` and row `r` at
//! latitude `pi/2 - (r + 0.5) * pi / H`. Longitude 0 (the forward heading)
//! is the horizontal image center and grows to the right.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use crate::error::{Error, Result};

/// Horizontal half-FoV of each cubemap face; faces overlap by half a degree on each side.
pub const FACE_HALF_FOV: f64 = 45.5 * PI / 180.0;

/// Rows this close to either pole always sample the up or down face.
pub const POLAR_GUARD_ROWS: usize = 2;

/// Reference frame of the equirectangular mapping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionSpec {
    /// Reference longitude.
    pub theta0: f64,
    /// Reference latitude.
    pub phi1: f64,
    pub erp_width: usize,
    pub erp_height: usize,
    pub face_size: usize,
}

impl ProjectionSpec {
    /// Full-sphere frame centered at `(0, 0)`.
    pub fn new(erp_height: usize, face_size: usize) -> Self {
        Self {
            theta0: 0.0,
            phi1: 0.0,
            erp_width: 2 * erp_height,
            erp_height,
            face_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.erp_height < 4 * POLAR_GUARD_ROWS || self.face_size < 2 {
            return Err(Error::invalid(
                "projection",
                format!(
                    "ERP height must be >= {} and face size >= 2, got {} and {}",
                    4 * POLAR_GUARD_ROWS,
                    self.erp_height,
                    self.face_size
                ),
            ));
        }
        if self.erp_width != 2 * self.erp_height {
            return Err(Error::invalid(
                "projection",
                format!("ERP must be 2:1, got {}x{}", self.erp_width, self.erp_height),
            ));
        }
        Ok(())
    }

    /// Longitude and latitude at the center of an ERP pixel.
    pub fn pixel_angles(&self, row: usize, col: usize) -> (f64, f64) {
        erp_pixel_angles(self.erp_height, self.erp_width, row, col)
    }
}

pub fn erp_pixel_angles(height: usize, width: usize, row: usize, col: usize) -> (f64, f64) {
    let lon = -PI + (col as f64 + 0.5) * 2.0 * PI / width as f64;
    let lat = FRAC_PI_2 - (row as f64 + 0.5) * PI / height as f64;
    (lon, lat)
}

/// Continuous ERP pixel coordinates (row, col) of a direction.
pub fn erp_pixel_coords(height: usize, width: usize, lon: f64, lat: f64) -> (f64, f64) {
    let col = (lon + PI) * width as f64 / (2.0 * PI) - 0.5;
    let row = (FRAC_PI_2 - lat) * height as f64 / PI - 0.5;
    (row, col)
}

/// Planar coordinates of the equirectangular projection:
/// `x = (theta - theta0) * cos(phi1)`, `y = phi - phi1`.
pub fn erp_project(theta: f64, phi: f64, spec: &ProjectionSpec) -> (f64, f64) {
    ((theta - spec.theta0) * spec.phi1.cos(), phi - spec.phi1)
}

/// Jacobian determinant of [`erp_project`] with respect to `(theta, phi)`.
pub fn erp_jacobian(spec: &ProjectionSpec) -> f64 {
    // dx/dtheta = cos(phi1), dx/dphi = 0, dy/dtheta = 0, dy/dphi = 1
    spec.phi1.cos()
}

/// Area distortion `cos(phi) / |J|` of the plain mapping `x = theta, y = phi` (|J| = 1).
pub fn area_distortion(phi: f64) -> f64 {
    let jac = erp_jacobian(&ProjectionSpec {
        theta0: 0.0,
        phi1: 0.0,
        erp_width: 2,
        erp_height: 1,
        face_size: 2,
    });
    phi.cos() / jac.abs()
}

/// Area distortion at every ERP row center.
pub fn area_distortion_rows(height: usize) -> Vec<f64> {
    (0..height)
        .map(|r| area_distortion(erp_pixel_angles(height, 2 * height, r, 0).1))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Face {
    Front,
    Right,
    Back,
    Left,
    Up,
    Down,
}

impl Face {
    pub const ALL: [Face; 6] = [Face::Front, Face::Right, Face::Back, Face::Left, Face::Up, Face::Down];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Face::Front => "front",
            Face::Right => "right",
            Face::Back => "back",
            Face::Left => "left",
            Face::Up => "up",
            Face::Down => "down",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Face::Front => "F",
            Face::Right => "R",
            Face::Back => "B",
            Face::Left => "L",
            Face::Up => "U",
            Face::Down => "D",
        }
    }
}

/// Longitude in the cubemap formulas, where the front face (i = 1) sits at pi/2.
fn cube_lon(lon: f64) -> f64 {
    lon + FRAC_PI_2
}

/// Extent, in face pixels, of the 90 degree core of a face rendered at [`FACE_HALF_FOV`].
pub fn core_extent(face_size: usize) -> f64 {
    face_size as f64 * FRAC_PI_4.tan() / FACE_HALF_FOV.tan()
}

/// Face-centered coordinates for a horizontal face `i` in 1..=4:
/// `x = (W/2) tan(phi - i pi/2)`, `y = -(H tan(theta)) / (2 cos(phi - i pi/2))`,
/// with `W = H` the core extent.
pub fn horizontal_face_coords(i: usize, lon: f64, lat: f64, extent: f64) -> (f64, f64) {
    let d = cube_lon(lon) - i as f64 * FRAC_PI_2;
    let x = extent / 2.0 * d.tan();
    let y = -(extent * lat.tan()) / (2.0 * d.cos());
    (x, y)
}

/// Face-centered coordinates for the up (j = 0) or down (j = 1) face:
/// `x = (W/2) cot(theta) sin(phi)`, `y = (H/2) cot(theta) cos(phi + j pi)`.
pub fn polar_face_coords(j: usize, lon: f64, lat: f64, extent: f64) -> (f64, f64) {
    let phi = cube_lon(lon);
    let cot = 1.0 / lat.tan();
    let x = extent / 2.0 * cot * phi.sin();
    let y = extent / 2.0 * cot * (phi + j as f64 * PI).cos();
    (x, y)
}

/// Direction (lon, lat) seen through the center of a face pixel.
pub fn face_pixel_angles(face: Face, row: usize, col: usize, face_size: usize) -> (f64, f64) {
    let half = core_extent(face_size) / 2.0;
    let u = (col as f64 + 0.5 - face_size as f64 / 2.0) / half;
    let v = (row as f64 + 0.5 - face_size as f64 / 2.0) / half;
    match face {
        Face::Up => {
            let rho = u.hypot(v);
            (u.atan2(v) - FRAC_PI_2, 1.0f64.atan2(rho))
        }
        Face::Down => {
            let rho = u.hypot(v);
            ((-u).atan2(v) - FRAC_PI_2, -(1.0f64.atan2(rho)))
        }
        _ => {
            let i = face.index() + 1;
            let d = u.atan();
            let lon = wrap_lon(i as f64 * FRAC_PI_2 + d - FRAC_PI_2);
            (lon, (-v * d.cos()).atan())
        }
    }
}

/// Wraps a longitude into `[-pi, pi)`.
pub fn wrap_lon(lon: f64) -> f64 {
    (lon + PI).rem_euclid(2.0 * PI) - PI
}

/// Per-ERP-pixel source face and continuous (row, col) face coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ResampleLut {
    pub erp_width: usize,
    pub erp_height: usize,
    pub face_size: usize,
    pub face: Vec<Face>,
    /// `(row, col)` in face pixel units, pixel centers on integers.
    pub coords: Vec<(f64, f64)>,
}

/// Builds the cubemap-to-ERP lookup table.
///
/// Faces are tried in F, R, B, L, U, D order and the first whose core
/// square contains the point wins. Rows within [`POLAR_GUARD_ROWS`] of a
/// pole go straight to U or D.
pub fn cubemap_to_erp_lut(spec: &ProjectionSpec) -> Result<ResampleLut> {
    spec.validate()?;
    let (h, w, s) = (spec.erp_height, spec.erp_width, spec.face_size);
    let extent = core_extent(s);
    let half = extent / 2.0;
    let origin = s as f64 / 2.0 - 0.5;
    let inside = |x: f64, y: f64| x.abs() <= half && y.abs() <= half;
    let mut face = Vec::with_capacity(h * w);
    let mut coords = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (lon, lat) = spec.pixel_angles(r, c);
            let polar = if r < POLAR_GUARD_ROWS {
                Some(Face::Up)
            } else if r + POLAR_GUARD_ROWS >= h {
                Some(Face::Down)
            } else {
                None
            };
            let mut chosen = None;
            if polar.is_none() {
                for (k, f) in Face::ALL[..4].iter().enumerate() {
                    let d = cube_lon(lon) - (k + 1) as f64 * FRAC_PI_2;
                    if d.cos() <= 0.0 {
                        continue;
                    }
                    let (x, y) = horizontal_face_coords(k + 1, lon, lat, extent);
                    if inside(x, y) {
                        chosen = Some((*f, x, y));
                        break;
                    }
                }
            }
            let (f, x, y) = match chosen {
                Some(hit) => hit,
                None => {
                    let f = polar.unwrap_or(if lat > 0.0 { Face::Up } else { Face::Down });
                    let j = usize::from(f == Face::Down);
                    let (x, y) = polar_face_coords(j, lon, lat, extent);
                    (f, x, y)
                }
            };
            face.push(f);
            coords.push((y + origin, x + origin));
        }
    }
    Ok(ResampleLut {
        erp_width: w,
        erp_height: h,
        face_size: s,
        face,
        coords,
    })
}

/// Floating-point HWC raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut r = Self::new(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    r.data[(y * width + x) * channels + c] = f(y, x, c);
                }
            }
        }
        r
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Bilinear sample with edge clamping; `wrap_x` makes columns periodic.
    pub fn sample(&self, row: f64, col: f64, c: usize, wrap_x: bool) -> f64 {
        let (h, w) = (self.height as isize, self.width as isize);
        let ry = row.clamp(0.0, (h - 1) as f64);
        let y0 = ry.floor() as isize;
        let fy = ry - y0 as f64;
        let y1 = (y0 + 1).min(h - 1);
        let (x0, x1, fx) = if wrap_x {
            let x0 = col.floor();
            let fx = col - x0;
            let x0 = x0 as isize;
            (x0.rem_euclid(w), (x0 + 1).rem_euclid(w), fx)
        } else {
            let rx = col.clamp(0.0, (w - 1) as f64);
            let x0 = rx.floor() as isize;
            (x0, (x0 + 1).min(w - 1), rx - x0 as f64)
        };
        let at = |y: isize, x: isize| self.get(y as usize, x as usize, c);
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Six faces in F, R, B, L, U, D order.
#[derive(Clone, Debug, Default)]
pub struct Cubemap {
    pub faces: [Option<Raster>; 6],
}

impl Cubemap {
    pub fn face(&self, f: Face) -> Result<&Raster> {
        self.faces[f.index()].as_ref().ok_or(Error::MissingFace(f.name()))
    }
}

/// Resamples a cubemap into an ERP raster through `lut`.
pub fn resample(cube: &Cubemap, lut: &ResampleLut) -> Result<Raster> {
    let mut channels = None;
    for f in Face::ALL {
        let face = cube.face(f)?;
        if face.height != lut.face_size || face.width != lut.face_size {
            return Err(Error::invalid(
                "resample",
                format!(
                    "face {} is {}x{}, lut expects {}",
                    f.name(),
                    face.height,
                    face.width,
                    lut.face_size
                ),
            ));
        }
        match channels {
            None => channels = Some(face.channels),
            Some(c) if c != face.channels => {
                return Err(Error::invalid("resample", "faces disagree on channel count"))
            }
            _ => {}
        }
    }
    let ch = channels.expect("six faces");
    let mut out = Raster::new(lut.erp_height, lut.erp_width, ch);
    for (i, (&f, &(row, col))) in lut.face.iter().zip(&lut.coords).enumerate() {
        let face = cube.face(f)?;
        for c in 0..ch {
            out.data[i * ch + c] = face.sample(row, col, c, false);
        }
    }
    Ok(out)
}

/// Renders cubemap faces of `face_size` by sampling an ERP raster (columns wrap).
pub fn erp_to_cubemap(erp: &Raster, face_size: usize) -> Cubemap {
    let mut cube = Cubemap::default();
    for f in Face::ALL {
        let face = Raster::from_fn(face_size, face_size, erp.channels, |r, c, ch| {
            let (lon, lat) = face_pixel_angles(f, r, c, face_size);
            let (row, col) = erp_pixel_coords(erp.height, erp.width, lon, lat);
            erp.sample(row, col, ch, true)
        });
        cube.faces[f.index()] = Some(face);
    }
    cube
}

/// Column range `(start, len)` of the horizontally centered band covering
/// `fov_degrees` out of `source_fov_degrees`.
pub fn fov_band(width: usize, source_fov_degrees: f64, fov_degrees: f64) -> Result<(usize, usize)> {
    if !(fov_degrees > 0.0) || fov_degrees > source_fov_degrees {
        return Err(Error::invalid(
            "fov_crop",
            format!("fov must lie in (0, {source_fov_degrees}], got {fov_degrees}"),
        ));
    }
    let len = ((width as f64 * fov_degrees / source_fov_degrees).round() as usize).clamp(1, width);
    Ok(((width - len) / 2, len))
}

/// Keeps the horizontally centered band covering `fov_degrees` of a 360 degree panorama.
pub fn fov_crop(erp: &Raster, fov_degrees: f64) -> Result<Raster> {
    fov_crop_from(erp, 360.0, fov_degrees)
}

/// As [`fov_crop`] for an input that itself spans `source_fov_degrees`.
pub fn fov_crop_from(img: &Raster, source_fov_degrees: f64, fov_degrees: f64) -> Result<Raster> {
    let (start, len) = fov_band(img.width, source_fov_degrees, fov_degrees)?;
    Ok(Raster::from_fn(img.height, len, img.channels, |y, x, c| img.get(y, start + x, c)))
}
