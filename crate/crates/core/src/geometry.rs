//! Object transforms that produce in-context guidance: translation of a
//! source mask, mesh rotation rendered by an orthographic depth-buffered
//! rasterizer, and uniform scaling.
//!
//! Rendering a rotated mesh at target resolution `T`:
//!
//! 1. rotate vertices about the centroid (Euler Z-Y-X, degrees);
//! 2. project orthographically onto a `3T x 3T` canvas, fitted so the
//!    bounding sphere spans `2T` (no rotation can clip);
//! 3. rasterize with a less-than depth test and per-vertex color;
//! 4. crop to the covered bounding box;
//! 5. rescale uniformly so the longer side is `0.7 T`;
//! 6. center on a `T x T` canvas.
//!
//! The mask repeats the same steps with white vertices on black and is
//! thresholded at 128.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{resize, BBox, Raster, Rgb8, BLACK, MASK_THRESHOLD, WHITE};

/// Fraction of the target resolution the rendered object may occupy.
pub const SAFETY_FACTOR: f64 = 0.7;
/// Working canvas size as a multiple of the target resolution.
pub const CANVAS_FACTOR: usize = 3;
pub const MIN_RESOLUTION: usize = 8;

const DEFAULT_VERTEX_COLOR: [f64; 3] = [0.6, 0.6, 0.6];

type Vec3 = [f64; 3];
type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    colors: Option<Vec<Vec3>>,
    faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, colors: Option<Vec<Vec3>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if faces.is_empty() {
            return Err(Error::domain("mesh has no faces"));
        }
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::domain(format!(
                "face {f:?} references a vertex beyond {}",
                vertices.len()
            )));
        }
        if vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::domain("vertex coordinates must be finite"));
        }
        if let Some(c) = &colors {
            if c.len() != vertices.len() {
                return Err(Error::shape("one color per vertex required"));
            }
            if c.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::domain("vertex colors must lie in [0, 1]"));
            }
        }
        Ok(Self { vertices, colors, faces })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn colors(&self) -> Option<&[Vec3]> {
        self.colors.as_deref()
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.vertices.len() as f64;
        let mut c = [0.0; 3];
        for v in &self.vertices {
            for k in 0..3 {
                c[k] += v[k];
            }
        }
        c.map(|s| s / n)
    }

    /// The mesh rotated about its centroid.
    pub fn rotated(&self, rotation: &Rotation) -> Mesh {
        let m = rotation.matrix();
        let c = self.centroid();
        let vertices = self
            .vertices
            .iter()
            .map(|v| {
                let r = mat_vec(&m, [v[0] - c[0], v[1] - c[1], v[2] - c[2]]);
                [r[0] + c[0], r[1] + c[1], r[2] + c[2]]
            })
            .collect();
        Mesh { vertices, colors: self.colors.clone(), faces: self.faces.clone() }
    }

    /// Same geometry with every vertex set to `color`.
    pub fn with_uniform_color(&self, color: Vec3) -> Mesh {
        Mesh {
            vertices: self.vertices.clone(),
            colors: Some(vec![color; self.vertices.len()]),
            faces: self.faces.clone(),
        }
    }

    fn color(&self, i: usize) -> Vec3 {
        self.colors.as_ref().map_or(DEFAULT_VERTEX_COLOR, |c| c[i])
    }
}

/// Parses `v x y z [r g b]` and `f i j k` lines (1-based indices). Blank
/// lines and `#` comments are skipped; anything else is an error.
pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut colors: Vec<Vec3> = Vec::new();
    let mut faces = Vec::new();
    let mut colored: Option<bool> = None;
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let err = |message: String| Error::Parse { line, message };
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut tokens = trimmed.split_whitespace();
        let tag = tokens.next().unwrap_or_default();
        let rest: Vec<&str> = tokens.collect();
        match tag {
            "v" => {
                let nums = rest
                    .iter()
                    .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number {t:?}"))))
                    .collect::<Result<Vec<f64>>>()?;
                if nums.len() != 3 && nums.len() != 6 {
                    return Err(err(format!("vertex needs 3 or 6 numbers, got {}", nums.len())));
                }
                if nums.iter().any(|v| !v.is_finite()) {
                    return Err(err("non-finite vertex value".into()));
                }
                let has_color = nums.len() == 6;
                match colored {
                    None => colored = Some(has_color),
                    Some(c) if c != has_color => {
                        return Err(err("vertices must all carry colors or none".into()));
                    }
                    _ => {}
                }
                vertices.push([nums[0], nums[1], nums[2]]);
                if has_color {
                    let c = [nums[3], nums[4], nums[5]];
                    if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                        return Err(err("vertex color outside [0, 1]".into()));
                    }
                    colors.push(c);
                }
            }
            "f" => {
                if rest.len() != 3 {
                    return Err(err(format!("face needs 3 indices, got {}", rest.len())));
                }
                let mut f = [0usize; 3];
                for (slot, t) in f.iter_mut().zip(&rest) {
                    let i: usize = t.parse().map_err(|_| err(format!("bad index {t:?}")))?;
                    if i == 0 || i > vertices.len() {
                        return Err(err(format!(
                            "index {i} outside 1..={} (vertices so far)",
                            vertices.len()
                        )));
                    }
                    *slot = i - 1;
                }
                faces.push(f);
            }
            other => return Err(err(format!("unsupported statement {other:?}"))),
        }
    }
    if faces.is_empty() {
        return Err(Error::Parse { line: text.lines().count(), message: "no faces".into() });
    }
    let colors = if colored == Some(true) { Some(colors) } else { None };
    Mesh::new(vertices, colors, faces)
}

/// Euler angles in degrees, normalized to `(-180, 180]`. The matrix is
/// `Rz(yaw) * Ry(pitch) * Rx(roll)`; the view axis is `z` (smaller is nearer), so
/// yaw turns the object within the image plane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "RotationDesc")]
pub struct Rotation {
    yaw: f64,
    pitch: f64,
    roll: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RotationDesc {
    #[serde(default)]
    yaw: f64,
    #[serde(default)]
    pitch: f64,
    #[serde(default)]
    roll: f64,
}

impl TryFrom<RotationDesc> for Rotation {
    type Error = Error;

    fn try_from(d: RotationDesc) -> Result<Self> {
        Rotation::new(d.yaw, d.pitch, d.roll)
    }
}

fn normalize_degrees(a: f64) -> f64 {
    let mut a = a % 360.0;
    if a <= -180.0 {
        a += 360.0;
    } else if a > 180.0 {
        a -= 360.0;
    }
    a
}

impl Rotation {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Result<Self> {
        if ![yaw, pitch, roll].iter().all(|a| a.is_finite()) {
            return Err(Error::domain("rotation angles must be finite"));
        }
        Ok(Self { yaw: normalize_degrees(yaw), pitch: normalize_degrees(pitch), roll: normalize_degrees(roll) })
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn roll(&self) -> f64 {
        self.roll
    }

    pub fn is_identity(&self) -> bool {
        self.yaw == 0.0 && self.pitch == 0.0 && self.roll == 0.0
    }

    pub fn matrix(&self) -> Mat3 {
        let (sz, cz) = self.yaw.to_radians().sin_cos();
        let (sy, cy) = self.pitch.to_radians().sin_cos();
        let (sx, cx) = self.roll.to_radians().sin_cos();
        [
            [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
            [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
            [-sy, cy * sx, cy * cx],
        ]
    }

    pub fn from_matrix(m: &Mat3) -> Self {
        let sy = (-m[2][0]).clamp(-1.0, 1.0);
        let pitch = sy.asin();
        let (yaw, roll) = if sy.abs() < 1.0 - 1e-12 {
            (m[1][0].atan2(m[0][0]), m[2][1].atan2(m[2][2]))
        } else {
            ((-m[0][1]).atan2(m[1][1]), 0.0)
        };
        Rotation::new(yaw.to_degrees(), pitch.to_degrees(), roll.to_degrees())
            .expect("angles from a rotation matrix are finite")
    }

    /// `self` followed by `then`.
    pub fn then(&self, then: &Rotation) -> Rotation {
        Rotation::from_matrix(&mat_mul(&then.matrix(), &self.matrix()))
    }
}

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    [0, 1, 2].map(|r| [0, 1, 2].map(|c| (0..3).map(|k| a[r][k] * b[k][c]).sum()))
}

#[derive(Clone, Copy)]
struct ScreenVertex {
    x: f64,
    y: f64,
    z: f64,
    color: Vec3,
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Top-left fill rule for a positively oriented triangle in y-down screen
/// space: top edges run in +x, left edges run in -y.
fn owns_edge(a: (f64, f64), b: (f64, f64)) -> bool {
    let dx = b.0 - a.0;
    let dy = b.1 - a.1;
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

/// Color and depth buffers for the working canvas.
pub struct Canvas {
    size: usize,
    color: Vec<Rgb8>,
    depth: Vec<f64>,
    covered: Vec<bool>,
}

impl Canvas {
    pub fn new(size: usize, background: Rgb8) -> Self {
        Self {
            size,
            color: vec![background; size * size],
            depth: vec![f64::INFINITY; size * size],
            covered: vec![false; size * size],
        }
    }

    pub fn covered(&self, x: usize, y: usize) -> bool {
        self.covered[y * self.size + x]
    }

    pub fn color(&self, x: usize, y: usize) -> Rgb8 {
        self.color[y * self.size + x]
    }

    pub fn depth(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.size + x]
    }

    /// Rasterizes one triangle given screen coordinates (y down), depth and
    /// color per vertex. Nearer means smaller depth.
    fn fill_triangle(&mut self, mut v: [ScreenVertex; 3]) {
        let p = |s: &ScreenVertex| (s.x, s.y);
        let mut area = edge(p(&v[0]), p(&v[1]), p(&v[2]));
        if area == 0.0 || !area.is_finite() {
            return;
        }
        if area < 0.0 {
            v.swap(1, 2);
            area = -area;
        }
        let (p0, p1, p2) = (p(&v[0]), p(&v[1]), p(&v[2]));
        let min_x = p0.0.min(p1.0).min(p2.0).floor().max(0.0) as usize;
        let min_y = p0.1.min(p1.1).min(p2.1).floor().max(0.0) as usize;
        let max_x = (p0.0.max(p1.0).max(p2.0).ceil() as usize).min(self.size);
        let max_y = (p0.1.max(p1.1).max(p2.1).ceil() as usize).min(self.size);
        let edges = [(p1, p2), (p2, p0), (p0, p1)];
        let owned = edges.map(|(a, b)| owns_edge(a, b));
        for y in min_y..max_y {
            for x in min_x..max_x {
                let c = (x as f64 + 0.5, y as f64 + 0.5);
                let w = edges.map(|(a, b)| edge(a, b, c));
                let inside = (0..3).all(|k| w[k] > 0.0 || (w[k] == 0.0 && owned[k]));
                if !inside {
                    continue;
                }
                let b = w.map(|wk| wk / area);
                let z = b[0] * v[0].z + b[1] * v[1].z + b[2] * v[2].z;
                let idx = y * self.size + x;
                if z < self.depth[idx] {
                    self.depth[idx] = z;
                    self.covered[idx] = true;
                    self.color[idx] = [0, 1, 2].map(|k| {
                        let c = b[0] * v[0].color[k] + b[1] * v[1].color[k] + b[2] * v[2].color[k];
                        (c * 255.0).round().clamp(0.0, 255.0) as u8
                    });
                }
            }
        }
    }

    pub fn bbox(&self) -> Option<BBox> {
        crate::raster::bbox_of(self.size, self.size, |x, y| self.covered(x, y))
    }

    fn to_raster(&self) -> Raster {
        Raster::from_parts(self.size, self.size, self.color.clone(), self.covered.clone())
            .expect("canvas buffers are square")
    }
}

/// Steps 1-3: rotate about the centroid and rasterize orthographically
/// onto a `3T x 3T` canvas.
pub fn rasterize_canvas(mesh: &Mesh, rotation: &Rotation, t: usize, background: Rgb8) -> Result<Canvas> {
    let size = CANVAS_FACTOR * t;
    let c = mesh.centroid();
    let m = rotation.matrix();
    let rotated: Vec<Vec3> = mesh
        .vertices()
        .iter()
        .map(|v| mat_vec(&m, [v[0] - c[0], v[1] - c[1], v[2] - c[2]]))
        .collect();
    let radius = rotated
        .iter()
        .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
        .fold(0.0, f64::max);
    if radius <= 0.0 {
        return Err(Error::DegenerateRender("all vertices coincide".into()));
    }
    let k = t as f64 / radius;
    let half = size as f64 / 2.0;
    let screen: Vec<ScreenVertex> = rotated
        .iter()
        .enumerate()
        .map(|(i, v)| ScreenVertex { x: half + k * v[0], y: half - k * v[1], z: v[2], color: mesh.color(i) })
        .collect();
    let mut canvas = Canvas::new(size, background);
    for f in mesh.faces() {
        canvas.fill_triangle(f.map(|i| screen[i]));
    }
    Ok(canvas)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Filter {
    Bilinear,
    Nearest,
}

/// Steps 4-6 for one pass: crop, uniform safety rescale, centering.
fn fit_to_target(covered: &Raster, t: usize, filter: Filter, background: Rgb8) -> Result<Raster> {
    let b = covered
        .bbox()
        .ok_or_else(|| Error::DegenerateRender("mesh covers no pixel centers".into()))?;
    let crop = covered.crop(b)?;
    let scaled = safety_rescale(&crop, t, filter)?;
    Ok(center_on_canvas(&scaled, t, background))
}

fn safety_rescale(crop: &Raster, t: usize, filter: Filter) -> Result<Raster> {
    let s = SAFETY_FACTOR * t as f64 / crop.width().max(crop.height()) as f64;
    let nw = ((crop.width() as f64 * s).round() as usize).max(1);
    let nh = ((crop.height() as f64 * s).round() as usize).max(1);
    let mut out = resize(crop, nw, nh)?;
    if filter == Filter::Nearest {
        // the mask channel is already nearest; copy it into the image
        let mask = out.mask().to_vec();
        for y in 0..nh {
            for x in 0..nw {
                let on = mask[y * nw + x];
                out.set_pixel(x, y, if on { WHITE } else { BLACK });
            }
        }
    }
    Ok(out)
}

fn center_on_canvas(r: &Raster, t: usize, background: Rgb8) -> Raster {
    let mut out = Raster::new(t, t, background).expect("target resolution is positive");
    let ox = (t - r.width()) / 2;
    let oy = (t - r.height()) / 2;
    for y in 0..r.height() {
        for x in 0..r.width() {
            out.set_pixel(ox + x, oy + y, r.pixel(x, y));
            out.set_mask(ox + x, oy + y, r.is_set(x, y));
        }
    }
    out
}

/// Renders `mesh` under `rotation` into a `t x t` appearance reference:
/// object colors on white, mask from a white-on-black silhouette pass.
pub fn render_rotated(mesh: &Mesh, rotation: &Rotation, t: usize) -> Result<Raster> {
    if t < MIN_RESOLUTION {
        return Err(Error::domain(format!("target resolution {t} below {MIN_RESOLUTION}")));
    }
    let appearance = rasterize_canvas(mesh, rotation, t, WHITE)?;
    let image = fit_to_target(&appearance.to_raster(), t, Filter::Bilinear, WHITE)?;

    let silhouette = rasterize_canvas(&mesh.with_uniform_color([1.0, 1.0, 1.0]), rotation, t, BLACK)?;
    let mask_image = fit_to_target(&silhouette.to_raster(), t, Filter::Nearest, BLACK)?;

    let mask = mask_image.pixels().iter().map(|p| p[0] >= MASK_THRESHOLD).collect();
    let mut out = Raster::from_parts(t, t, image.pixels().to_vec(), mask)?;
    out.clear_unmasked(WHITE);
    Ok(out)
}

/// Appearance reference from a raster object: crop to the mask, safety
/// rescale, center on white.
pub fn reference_from_raster(source: &Raster, t: usize) -> Result<Raster> {
    if t < MIN_RESOLUTION {
        return Err(Error::domain(format!("target resolution {t} below {MIN_RESOLUTION}")));
    }
    let mut out = fit_to_target(source, t, Filter::Bilinear, WHITE)?;
    out.clear_unmasked(WHITE);
    Ok(out)
}

/// Moves image and mask by `(dx, dy)` pixels. Vacated pixels become white
/// and unset; pixels leaving the frame are dropped.
pub fn translate_mask(raster: &Raster, offset: (i64, i64)) -> Raster {
    let (w, h) = raster.dims();
    let mut out = Raster::new(w, h, WHITE).expect("source raster is nonempty");
    for y in 0..h {
        for x in 0..w {
            if !raster.is_set(x, y) {
                continue;
            }
            let nx = x as i64 + offset.0;
            let ny = y as i64 + offset.1;
            if (0..w as i64).contains(&nx) && (0..h as i64).contains(&ny) {
                out.set_pixel(nx as usize, ny as usize, raster.pixel(x, y));
                out.set_mask(nx as usize, ny as usize, true);
            }
        }
    }
    out
}

/// Scales image and mask by `s` about the mask's bounding-box center on the
/// same canvas. Bilinear for the image, nearest for the mask.
pub fn scale_object(raster: &Raster, s: f64) -> Result<Raster> {
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::domain(format!("scale factor {s} must be positive")));
    }
    let Some(b) = raster.bbox() else {
        return Ok(raster.clone());
    };
    if s == 1.0 {
        return Ok(raster.clone());
    }
    let (cx, cy) = b.center();
    let (w, h) = raster.dims();
    let mut out = Raster::new(w, h, WHITE)?;
    for y in 0..h {
        let sy = cy + (y as f64 + 0.5 - cy) / s;
        if sy < 0.0 || sy >= h as f64 {
            continue;
        }
        for x in 0..w {
            let sx = cx + (x as f64 + 0.5 - cx) / s;
            if sx < 0.0 || sx >= w as f64 {
                continue;
            }
            if raster.is_set(sx as usize, sy as usize) {
                out.set_mask(x, y, true);
                out.set_pixel(x, y, crate::raster::sample_bilinear(raster, sx - 0.5, sy - 0.5));
            }
        }
    }
    Ok(out)
}

fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Composites the masked object over `scene` so the object's bounding-box
/// center lands on `target_center`. The result's mask is the scene mask
/// united with the placed object.
pub fn place_at(object: &Raster, scene: &Raster, target_center: (f64, f64)) -> Result<Raster> {
    let (sw, sh) = scene.dims();
    let (tx, ty) = target_center;
    if !(tx.is_finite() && ty.is_finite()) || tx < 0.0 || ty < 0.0 || tx > sw as f64 || ty > sh as f64 {
        return Err(Error::domain(format!(
            "target center ({tx}, {ty}) outside the {sw}x{sh} scene"
        )));
    }
    let mut out = scene.clone();
    let Some(b) = object.bbox() else {
        return Ok(out);
    };
    let (cx, cy) = b.center();
    let dx = round_half_up(tx - cx);
    let dy = round_half_up(ty - cy);
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            if !object.is_set(x, y) {
                continue;
            }
            let nx = x as i64 + dx;
            let ny = y as i64 + dy;
            if (0..sw as i64).contains(&nx) && (0..sh as i64).contains(&ny) {
                out.set_pixel(nx as usize, ny as usize, object.pixel(x, y));
                out.set_mask(nx as usize, ny as usize, true);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Translate,
    Rotate,
    Scale,
    Composite,
}

fn default_scale() -> f64 {
    1.0
}

fn default_resolution() -> usize {
    128
}

/// Parameters for [`apply_transform`]. Offsets and centers are in scene
/// pixels, angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSpec {
    pub kind: TransformKind,
    #[serde(default)]
    pub offset: (i64, i64),
    #[serde(default)]
    pub rotation: Rotation,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_resolution")]
    pub target_resolution: usize,
    /// Where the object is placed in the scene. Defaults to the source
    /// object's center for raster input and the scene center for meshes.
    #[serde(default)]
    pub target_center: Option<(f64, f64)>,
}

impl TransformSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::domain(format!("scale {} must be positive", self.scale)));
        }
        if self.target_resolution < MIN_RESOLUTION {
            return Err(Error::domain(format!(
                "target resolution {} below {MIN_RESOLUTION}",
                self.target_resolution
            )));
        }
        Ok(())
    }

    fn rotates(&self) -> bool {
        matches!(self.kind, TransformKind::Rotate | TransformKind::Composite)
    }

    fn scales(&self) -> bool {
        matches!(self.kind, TransformKind::Scale | TransformKind::Composite)
    }

    fn translates(&self) -> bool {
        matches!(self.kind, TransformKind::Translate | TransformKind::Composite)
    }
}

/// The object to transform: a mesh, or an object image with its source
/// mask in scene coordinates.
#[derive(Debug, Clone)]
pub enum ObjectSource {
    Mesh(Mesh),
    Raster(Raster),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformOutput {
    /// Transformed object on white, `T x T`.
    pub reference: Raster,
    /// Where the object must appear, in scene coordinates.
    pub target_mask: Raster,
    /// Center the object was placed at, when placement applies.
    pub resolved_center: Option<(f64, f64)>,
}

/// Runs rotate, then scale, then translate (each only if `spec.kind`
/// includes it) and returns the appearance reference and target mask.
pub fn apply_transform(source: &ObjectSource, spec: &TransformSpec, scene: &Raster) -> Result<TransformOutput> {
    spec.validate()?;
    let t = spec.target_resolution;
    let (sw, sh) = scene.dims();
    let rotation = if spec.rotates() { spec.rotation } else { Rotation::identity() };

    let mut reference = match source {
        ObjectSource::Mesh(mesh) => render_rotated(mesh, &rotation, t)?,
        ObjectSource::Raster(r) => {
            r.same_dims(scene)?;
            if !rotation.is_identity() {
                return Err(Error::domain("rotation needs a mesh source"));
            }
            reference_from_raster(r, t)?
        }
    };
    if spec.scales() {
        reference = scale_object(&reference, spec.scale)?;
    }

    let offset = if spec.translates() { spec.offset } else { (0, 0) };
    let blank = Raster::new(sw, sh, BLACK)?;
    let (placed, resolved_center) = match source {
        ObjectSource::Raster(r) if spec.kind == TransformKind::Translate && spec.target_center.is_none() => {
            (translate_mask(r, offset), None)
        }
        ObjectSource::Raster(r) => {
            let b = r
                .bbox()
                .ok_or_else(|| Error::DegenerateRender("source mask is empty".into()))?;
            let object = if spec.scales() { scale_object(r, spec.scale)? } else { r.clone() };
            let c = spec.target_center.unwrap_or(b.center());
            let c = (c.0 + offset.0 as f64, c.1 + offset.1 as f64);
            (place_at(&object, &blank, c)?, Some(c))
        }
        ObjectSource::Mesh(_) => {
            let c = spec.target_center.unwrap_or((sw as f64 / 2.0, sh as f64 / 2.0));
            let c = (c.0 + offset.0 as f64, c.1 + offset.1 as f64);
            (place_at(&reference, &blank, c)?, Some(c))
        }
    };
    let target_mask = Raster::from_mask(sw, sh, placed.mask().to_vec())?;
    Ok(TransformOutput { reference, target_mask, resolved_center })
}
