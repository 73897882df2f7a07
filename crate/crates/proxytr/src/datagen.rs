//! Synthetic (partial, complete) pair generation.
//!
//! Two procedures produce partials from a complete cloud: viewpoint cropping
//! (remove the n points farthest from a viewpoint, then resample) and noised
//! depth back-projection (render a depth image, perturb depths, lift valid
//! pixels back to 3D). Complete clouds come from a procedural primitive
//! sampler so experiments need no external assets.
//!
//! Every sample derives its own RNG stream from (master seed, sample index),
//! so parallel and serial generation agree bit for bit.

use crate::error::{Error, Result};
use crate::geometry::{dist2, fps, Point, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Deterministic per-sample RNG stream.
pub fn sample_rng(master_seed: u64, sample_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(sample_index);
    rng
}

// ---- procedural primitives -------------------------------------------------

/// Primitive surface shapes for desk-scale datasets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Primitive {
    Sphere { radius: f64 },
    Box { extents: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 in (0,1] avoids ln(0).
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniform surface samples of the primitive, before normalization.
pub fn sample_surface(prim: Primitive, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Point>> {
    if count < 8 {
        return Err(Error::Domain(format!("primitive sample count {count} < 8")));
    }
    match prim {
        Primitive::Sphere { radius } => {
            if radius <= 0.0 {
                return Err(Error::Domain(format!("sphere radius {radius} must be positive")));
            }
            let mut pts = Vec::with_capacity(count);
            for _ in 0..count {
                let mut v = [gaussian(rng), gaussian(rng), gaussian(rng)];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                for c in v.iter_mut() {
                    *c = *c / n * radius;
                }
                pts.push(v);
            }
            Ok(pts)
        }
        Primitive::Box { extents } => {
            if extents.iter().any(|&e| e <= 0.0) {
                return Err(Error::Domain(format!("box extents {extents:?} must be positive")));
            }
            let [ex, ey, ez] = extents;
            // Face areas, paired by axis: +x/-x, +y/-y, +z/-z.
            let areas = [ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey];
            let total: f64 = areas.iter().sum();
            let mut pts = Vec::with_capacity(count);
            for _ in 0..count {
                let mut pick = rng.gen::<f64>() * total;
                let mut face = 0;
                for (i, &a) in areas.iter().enumerate() {
                    if pick < a || i == 5 {
                        face = i;
                        break;
                    }
                    pick -= a;
                }
                let u = rng.gen::<f64>() - 0.5;
                let v = rng.gen::<f64>() - 0.5;
                let p = match face {
                    0 => [ex / 2.0, u * ey, v * ez],
                    1 => [-ex / 2.0, u * ey, v * ez],
                    2 => [u * ex, ey / 2.0, v * ez],
                    3 => [u * ex, -ey / 2.0, v * ez],
                    4 => [u * ex, v * ey, ez / 2.0],
                    _ => [u * ex, v * ey, -ez / 2.0],
                };
                pts.push(p);
            }
            Ok(pts)
        }
        Primitive::Cylinder { radius, height } => {
            if radius <= 0.0 || height <= 0.0 {
                return Err(Error::Domain(format!(
                    "cylinder radius {radius} / height {height} must be positive"
                )));
            }
            let side = 2.0 * std::f64::consts::PI * radius * height;
            let caps = 2.0 * std::f64::consts::PI * radius * radius;
            let total = side + caps;
            let mut pts = Vec::with_capacity(count);
            for _ in 0..count {
                let pick = rng.gen::<f64>() * total;
                let theta = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
                if pick < side {
                    let z = (rng.gen::<f64>() - 0.5) * height;
                    pts.push([radius * theta.cos(), radius * theta.sin(), z]);
                } else {
                    let r = radius * rng.gen::<f64>().sqrt();
                    let z = if rng.gen::<bool>() { height / 2.0 } else { -height / 2.0 };
                    pts.push([r * theta.cos(), r * theta.sin(), z]);
                }
            }
            Ok(pts)
        }
    }
}

/// Uniform surface samples scaled to max norm 1. Primitives are
/// origin-centered by construction, so only the scale changes; sphere
/// samples land exactly on the unit sphere.
pub fn make_primitive(prim: Primitive, count: usize, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let pts = sample_surface(prim, count, rng)?;
    let max_norm = pts
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0f64, f64::max);
    if max_norm <= 0.0 {
        return Err(Error::DegenerateInput("primitive collapsed to the origin".into()));
    }
    let scaled = pts
        .into_iter()
        .map(|p| [p[0] / max_norm, p[1] / max_norm, p[2] / max_norm])
        .collect();
    PointCloud::new(scaled)
}

/// Draw one of the three primitive kinds with random parameters.
pub fn random_primitive(rng: &mut ChaCha8Rng) -> Primitive {
    match rng.gen_range(0..3u32) {
        0 => Primitive::Sphere { radius: rng.gen_range(0.5..1.5) },
        1 => Primitive::Box {
            extents: [
                rng.gen_range(0.4..1.6),
                rng.gen_range(0.4..1.6),
                rng.gen_range(0.4..1.6),
            ],
        },
        _ => Primitive::Cylinder {
            radius: rng.gen_range(0.3..1.0),
            height: rng.gen_range(0.5..2.0),
        },
    }
}

// ---- resampling -------------------------------------------------------------

/// Resample a cloud to exactly `target` points: farthest-point downsample when
/// too many, replicate random existing points when too few.
pub fn resample(cloud: &PointCloud, target: usize, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    if target == 0 {
        return Err(Error::Domain("resample target must be positive".into()));
    }
    if cloud.len() == target {
        return Ok(cloud.clone());
    }
    if cloud.len() > target {
        let idx = fps(cloud, target, 0)?;
        return cloud.select(&idx);
    }
    let mut pts = cloud.points().to_vec();
    while pts.len() < target {
        pts.push(cloud.get(rng.gen_range(0..cloud.len())));
    }
    PointCloud::new(pts)
}

// ---- dataset samples ---------------------------------------------------------

/// Incompleteness levels. Fractions of the complete cloud removed:
/// 25% (simple), 50% (moderate), 75% (hard); `Random` draws uniformly
/// from [25%, 75%] per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Simple,
    Moderate,
    Hard,
    Random,
}

impl Difficulty {
    pub fn n_removed(self, complete_len: usize, rng: &mut ChaCha8Rng) -> usize {
        let quarter = complete_len / 4;
        match self {
            Difficulty::Simple => quarter,
            Difficulty::Moderate => 2 * quarter,
            Difficulty::Hard => 3 * quarter,
            Difficulty::Random => rng.gen_range(quarter..=3 * quarter),
        }
    }

    pub fn parse(s: &str) -> Result<Difficulty> {
        match s {
            "simple" => Ok(Difficulty::Simple),
            "moderate" => Ok(Difficulty::Moderate),
            "hard" => Ok(Difficulty::Hard),
            "random" => Ok(Difficulty::Random),
            _ => Err(Error::Config(format!("unknown difficulty {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Simple => "simple",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
            Difficulty::Random => "random",
        }
    }
}

/// One (partial, complete) training or evaluation pair.
#[derive(Clone, Debug)]
pub struct DatasetSample {
    pub partial: PointCloud,
    pub complete: PointCloud,
    /// Unit vector toward the crop viewpoint / camera eye.
    pub viewpoint: Point,
    pub n_removed: usize,
    pub difficulty: Difficulty,
}

/// Distance of the crop viewpoint from the object center, in normalized units.
pub const VIEWPOINT_RADIUS: f64 = 2.0;

/// Random unit vector (uniform on the sphere).
pub fn random_viewpoint(rng: &mut ChaCha8Rng) -> Point {
    let mut v = [gaussian(rng), gaussian(rng), gaussian(rng)];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
    for c in v.iter_mut() {
        *c /= n;
    }
    v
}

/// The 8 fixed evaluation viewpoints: unit vectors toward cube vertices.
pub fn fixed_viewpoints() -> Vec<Point> {
    let s = 1.0 / 3.0f64.sqrt();
    let mut out = Vec::with_capacity(8);
    for &x in &[-1.0, 1.0] {
        for &y in &[-1.0, 1.0] {
            for &z in &[-1.0, 1.0] {
                out.push([x * s, y * s, z * s]);
            }
        }
    }
    out
}

/// Rank of each point by distance to the viewpoint, farthest first, distance
/// ties broken by index.
fn farthest_ranking(complete: &PointCloud, vp_position: &Point) -> Vec<usize> {
    let mut order: Vec<usize> = (0..complete.len()).collect();
    let d: Vec<f64> = complete.iter().map(|p| dist2(p, vp_position)).collect();
    order.sort_by(|&a, &b| d[b].partial_cmp(&d[a]).unwrap().then(a.cmp(&b)));
    order
}

/// Crop a partial view: remove the `n` points farthest from the viewpoint
/// (placed at [`VIEWPOINT_RADIUS`] along the unit `viewpoint` direction),
/// then resample the remainder to `input_size` points.
pub fn crop_partial(
    complete: &PointCloud,
    viewpoint: Point,
    n: usize,
    input_size: usize,
    difficulty: Difficulty,
    rng: &mut ChaCha8Rng,
) -> Result<DatasetSample> {
    if n == 0 || n >= complete.len() {
        return Err(Error::Domain(format!(
            "crop n = {n} out of range 1..{}",
            complete.len()
        )));
    }
    let norm = (viewpoint[0] * viewpoint[0] + viewpoint[1] * viewpoint[1] + viewpoint[2] * viewpoint[2]).sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!("viewpoint must be unit-norm, got |v| = {norm}")));
    }
    let vp_position = [
        viewpoint[0] * VIEWPOINT_RADIUS,
        viewpoint[1] * VIEWPOINT_RADIUS,
        viewpoint[2] * VIEWPOINT_RADIUS,
    ];
    let ranking = farthest_ranking(complete, &vp_position);
    let mut keep: Vec<usize> = ranking[n..].to_vec();
    keep.sort_unstable(); // original order, so kept ∪ removed == complete as multisets
    let remainder = complete.select(&keep)?;
    let partial = resample(&remainder, input_size, rng)?;
    Ok(DatasetSample {
        partial,
        complete: complete.clone(),
        viewpoint,
        n_removed: n,
        difficulty,
    })
}

/// Indices that [`crop_partial`] removes, farthest first. Exposed for tests.
pub fn crop_removed_indices(complete: &PointCloud, viewpoint: Point, n: usize) -> Vec<usize> {
    let vp_position = [
        viewpoint[0] * VIEWPOINT_RADIUS,
        viewpoint[1] * VIEWPOINT_RADIUS,
        viewpoint[2] * VIEWPOINT_RADIUS,
    ];
    farthest_ranking(complete, &vp_position)[..n].to_vec()
}

// ---- depth rendering and back-projection -------------------------------------

/// Pinhole camera looking at a target point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub eye: Point,
    pub target: Point,
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
}

/// Default rendering resolution and focal length for dataset synthesis.
pub const DEPTH_RESOLUTION: usize = 200;
pub const DEPTH_FOCAL: f64 = 200.0;
/// Minimum valid pixels for a usable back-projected sample.
pub const MIN_VALID_PIXELS: usize = 16;

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if self.eye == self.target {
            return Err(Error::Domain("camera eye must differ from target".into()));
        }
        if self.width == 0 || self.height == 0 || self.focal <= 0.0 {
            return Err(Error::Domain(format!(
                "camera needs positive extents and focal, got {}x{} f={}",
                self.width, self.height, self.focal
            )));
        }
        Ok(())
    }

    /// Camera looking at the origin from `VIEWPOINT_RADIUS * direction`,
    /// using the default synthesis resolution.
    pub fn looking_at_origin(direction: Point) -> CameraModel {
        CameraModel {
            eye: [
                direction[0] * VIEWPOINT_RADIUS,
                direction[1] * VIEWPOINT_RADIUS,
                direction[2] * VIEWPOINT_RADIUS,
            ],
            target: [0.0, 0.0, 0.0],
            width: DEPTH_RESOLUTION,
            height: DEPTH_RESOLUTION,
            focal: DEPTH_FOCAL,
        }
    }

    /// Orthonormal (right, up, forward) basis.
    fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let mut fwd = [
            self.target[0] - self.eye[0],
            self.target[1] - self.eye[1],
            self.target[2] - self.eye[2],
        ];
        let n = (fwd[0] * fwd[0] + fwd[1] * fwd[1] + fwd[2] * fwd[2]).sqrt();
        for c in fwd.iter_mut() {
            *c /= n;
        }
        let hint = if fwd[1].abs() > 0.999 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let mut right = [
            fwd[1] * hint[2] - fwd[2] * hint[1],
            fwd[2] * hint[0] - fwd[0] * hint[2],
            fwd[0] * hint[1] - fwd[1] * hint[0],
        ];
        let rn = (right[0] * right[0] + right[1] * right[1] + right[2] * right[2]).sqrt();
        for c in right.iter_mut() {
            *c /= rn;
        }
        let up = [
            right[1] * fwd[2] - right[2] * fwd[1],
            right[2] * fwd[0] - right[0] * fwd[2],
            right[0] * fwd[1] - right[1] * fwd[0],
        ];
        (right, up, fwd)
    }
}

/// Z-buffered point-splat depth image. Depth is camera-space z; pixels no
/// point hit are invalid.
#[derive(Clone, Debug)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    /// Row-major; `f64::INFINITY` marks invalid pixels.
    pub depths: Vec<f64>,
    /// Index of the cloud point that won each valid pixel.
    pub winners: Vec<Option<usize>>,
}

impl DepthImage {
    pub fn valid_count(&self) -> usize {
        self.depths.iter().filter(|d| d.is_finite()).count()
    }

    pub fn depth_range(&self) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &d in &self.depths {
            if d.is_finite() {
                lo = lo.min(d);
                hi = hi.max(d);
            }
        }
        if lo.is_finite() {
            Some((lo, hi))
        } else {
            None
        }
    }
}

/// Render a depth image by splatting each point to one pixel, keeping the
/// minimum depth per pixel.
pub fn render_depth(cloud: &PointCloud, camera: &CameraModel) -> Result<DepthImage> {
    camera.validate()?;
    let (right, up, fwd) = camera.basis();
    let (w, h) = (camera.width, camera.height);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut depths = vec![f64::INFINITY; w * h];
    let mut winners = vec![None; w * h];
    let mut any_in_front = false;
    for (i, p) in cloud.iter().enumerate() {
        let d = [p[0] - camera.eye[0], p[1] - camera.eye[1], p[2] - camera.eye[2]];
        let z = d[0] * fwd[0] + d[1] * fwd[1] + d[2] * fwd[2];
        if z <= 1e-9 {
            continue;
        }
        any_in_front = true;
        let x = d[0] * right[0] + d[1] * right[1] + d[2] * right[2];
        let y = d[0] * up[0] + d[1] * up[1] + d[2] * up[2];
        let u = camera.focal * x / z + cx;
        let v = camera.focal * y / z + cy;
        if u < 0.0 || v < 0.0 {
            continue;
        }
        let (ix, iy) = (u.floor() as usize, v.floor() as usize);
        if ix >= w || iy >= h {
            continue;
        }
        let at = iy * w + ix;
        if z < depths[at] {
            depths[at] = z;
            winners[at] = Some(i);
        }
    }
    if !any_in_front {
        return Err(Error::DegenerateInput("all points behind the camera".into()));
    }
    Ok(DepthImage {
        width: w,
        height: h,
        depths,
        winners,
    })
}

/// Lift every valid pixel back to 3D through its pixel center.
pub fn backproject(depth: &DepthImage, camera: &CameraModel) -> Vec<Point> {
    let (right, up, fwd) = camera.basis();
    let (cx, cy) = (camera.width as f64 / 2.0, camera.height as f64 / 2.0);
    let mut pts = Vec::with_capacity(depth.valid_count());
    for iy in 0..depth.height {
        for ix in 0..depth.width {
            let z = depth.depths[iy * depth.width + ix];
            if !z.is_finite() {
                continue;
            }
            let x = (ix as f64 + 0.5 - cx) / camera.focal * z;
            let y = (iy as f64 + 0.5 - cy) / camera.focal * z;
            pts.push([
                camera.eye[0] + right[0] * x + up[0] * y + fwd[0] * z,
                camera.eye[1] + right[1] * x + up[1] * y + fwd[1] * z,
                camera.eye[2] + right[2] * x + up[2] * y + fwd[2] * z,
            ]);
        }
    }
    pts
}

/// Render, perturb depths by per-pixel uniform noise scaled to the valid
/// depth range, back-project, and resample to `input_size`.
pub fn noised_backproject(
    complete: &PointCloud,
    camera: &CameraModel,
    noise_frac: f64,
    input_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DatasetSample> {
    if noise_frac < 0.0 {
        return Err(Error::Domain(format!("noise_frac must be >= 0, got {noise_frac}")));
    }
    let mut depth = render_depth(complete, camera)?;
    let valid = depth.valid_count();
    if valid < MIN_VALID_PIXELS {
        return Err(Error::DegenerateInput(format!(
            "only {valid} valid pixels, need at least {MIN_VALID_PIXELS}"
        )));
    }
    let (lo, hi) = depth.depth_range().expect("valid pixels exist");
    let amplitude = noise_frac * (hi - lo);
    if amplitude > 0.0 {
        for d in depth.depths.iter_mut() {
            if d.is_finite() {
                *d += rng.gen_range(-amplitude..=amplitude);
            }
        }
    }
    let lifted = PointCloud::new(backproject(&depth, camera))?;
    let partial = resample(&lifted, input_size, rng)?;
    let mut viewpoint = camera.eye;
    let n = (viewpoint[0] * viewpoint[0] + viewpoint[1] * viewpoint[1] + viewpoint[2] * viewpoint[2])
        .sqrt()
        .max(1e-12);
    for c in viewpoint.iter_mut() {
        *c /= n;
    }
    Ok(DatasetSample {
        partial,
        complete: complete.clone(),
        viewpoint,
        n_removed: complete.len().saturating_sub(valid),
        difficulty: Difficulty::Random,
    })
}

/// Default depth-noise amplitude as a fraction of the valid depth range.
pub const DEFAULT_NOISE_FRAC: f64 = 0.02;

// ---- dataset directory layout -------------------------------------------------

/// Per-view manifest record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestView {
    pub view: usize,
    pub viewpoint: [f64; 3],
    pub n_removed: usize,
    pub difficulty: Difficulty,
}

/// Per-object manifest record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub views: Vec<ManifestView>,
}

/// Dataset manifest written next to the split directories.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: String,
    pub seed: u64,
    pub input_size: usize,
    pub complete_size: usize,
    pub split: String,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Manifest> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("manifest: {e}"),
        })
    }

    pub fn read(path: &std::path::Path) -> Result<Manifest> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json + "\n")?;
        Ok(())
    }
}
