//! Synthetic training data: virtual depth cameras around a mesh, ray-cast
//! depth maps, back-projection to partial scans, and half-space cropping
//! for the visibility sweep.

pub mod shapes;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{cross, dot, norm, sample_mesh_uniform, sub, Point3, PointCloud, TriangleMesh};

/// Depth value stored for pixels whose ray hits nothing.
pub const NO_HIT: f64 = 0.0;

/// Pinhole intrinsics. The principal point is the image center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Intrinsics {
            width: 160,
            height: 120,
            focal: 150.0,
        }
    }
}

fn normalize(v: Point3) -> Option<Point3> {
    let n = norm(&v);
    (n > 1e-12).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

/// A camera looking at a target point. The camera frame is x = right,
/// y = down (image rows), z = forward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub position: Point3,
    pub look_at: Point3,
    pub intrinsics: Intrinsics,
    right: Point3,
    down: Point3,
    forward: Point3,
}

impl CameraPose {
    /// Builds the view frame. When `up_hint` is parallel to the viewing
    /// direction another world axis is used instead.
    pub fn new(position: Point3, look_at: Point3, up_hint: Point3, intrinsics: Intrinsics) -> Result<Self> {
        if intrinsics.width == 0 || intrinsics.height == 0 || !(intrinsics.focal > 0.0) {
            return Err(Error::InvalidArgument(format!("bad intrinsics {intrinsics:?}")));
        }
        let forward = normalize(sub(&look_at, &position))
            .ok_or_else(|| Error::InvalidArgument("camera position equals look-at point".into()))?;
        let right = [up_hint, [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]
            .iter()
            .filter_map(|up| {
                let r = cross(&forward, up);
                (norm(&r) > 1e-6).then_some(r)
            })
            .next()
            .and_then(normalize)
            .unwrap();
        let down = cross(&forward, &right);
        Ok(CameraPose {
            position,
            look_at,
            intrinsics,
            right,
            down,
            forward,
        })
    }

    /// Rows are the camera axes (right, down, forward) in world coordinates.
    pub fn rotation(&self) -> [Point3; 3] {
        [self.right, self.down, self.forward]
    }

    pub fn world_to_camera(&self, p: &Point3) -> Point3 {
        let d = sub(p, &self.position);
        [dot(&d, &self.right), dot(&d, &self.down), dot(&d, &self.forward)]
    }

    pub fn camera_to_world(&self, c: &Point3) -> Point3 {
        let mut out = self.position;
        for k in 0..3 {
            out[k] += c[0] * self.right[k] + c[1] * self.down[k] + c[2] * self.forward[k];
        }
        out
    }

    /// Camera-frame ray through the center of pixel `(u, v)`, scaled so its
    /// z component is 1; the ray parameter is then the depth.
    pub fn pixel_ray(&self, u: usize, v: usize) -> Point3 {
        let k = &self.intrinsics;
        [
            (u as f64 + 0.5 - k.width as f64 / 2.0) / k.focal,
            (v as f64 + 0.5 - k.height as f64 / 2.0) / k.focal,
            1.0,
        ]
    }

    /// Continuous pixel coordinates and depth of a world point, or `None`
    /// for points at or behind the camera plane.
    pub fn project(&self, p: &Point3) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        if c[2] <= 1e-12 {
            return None;
        }
        let k = &self.intrinsics;
        Some((
            k.focal * c[0] / c[2] + k.width as f64 / 2.0 - 0.5,
            k.focal * c[1] / c[2] + k.height as f64 / 2.0 - 0.5,
            c[2],
        ))
    }
}

/// Row-major depth buffer; [`NO_HIT`] marks empty pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    pub fn hit_count(&self) -> usize {
        self.data.iter().filter(|&&d| d != NO_HIT).count()
    }
}

/// Ray parameter of the hit between the ray `t * dir` from the origin and a
/// triangle, if any (two-sided).
fn ray_triangle(dir: &Point3, tri: &[Point3; 3]) -> Option<f64> {
    let e1 = sub(&tri[1], &tri[0]);
    let e2 = sub(&tri[2], &tri[0]);
    let p = cross(dir, &e2);
    let det = dot(&e1, &p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = [-tri[0][0], -tri[0][1], -tri[0][2]];
    let u = dot(&s, &p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = cross(&s, &e1);
    let v = dot(dir, &q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = dot(&e2, &q) * inv;
    (t > 1e-9).then_some(t)
}

/// Ray-casts the mesh into a depth image (nearest hit per pixel center).
pub fn render_depth(mesh: &TriangleMesh, cam: &CameraPose) -> DepthImage {
    let k = cam.intrinsics;
    let (lo, hi) = mesh.bounds();
    if (0..3).all(|a| cam.position[a] >= lo[a] && cam.position[a] <= hi[a]) {
        log::warn!("camera at {:?} lies inside the mesh bounding box", cam.position);
    }
    let mut depth = vec![f64::INFINITY; k.width * k.height];
    for i in 0..mesh.triangles().len() {
        let world = mesh.triangle(i);
        let tri = world.map(|p| cam.world_to_camera(&p));
        if tri.iter().all(|p| p[2] <= 1e-9) {
            continue;
        }
        let (mut u0, mut u1, mut v0, mut v1) = (0, k.width - 1, 0, k.height - 1);
        if tri.iter().all(|p| p[2] > 1e-9) {
            let us = tri.map(|p| k.focal * p[0] / p[2] + k.width as f64 / 2.0 - 0.5);
            let vs = tri.map(|p| k.focal * p[1] / p[2] + k.height as f64 / 2.0 - 0.5);
            let umin = us.iter().copied().fold(f64::INFINITY, f64::min).floor();
            let umax = us.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil();
            let vmin = vs.iter().copied().fold(f64::INFINITY, f64::min).floor();
            let vmax = vs.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil();
            if umax < 0.0 || vmax < 0.0 || umin > (k.width - 1) as f64 || vmin > (k.height - 1) as f64 {
                continue;
            }
            u0 = umin.max(0.0) as usize;
            u1 = (umax as usize).min(k.width - 1);
            v0 = vmin.max(0.0) as usize;
            v1 = (vmax as usize).min(k.height - 1);
        }
        for v in v0..=v1 {
            for u in u0..=u1 {
                if let Some(t) = ray_triangle(&cam.pixel_ray(u, v), &tri) {
                    let d = &mut depth[v * k.width + u];
                    if t < *d {
                        *d = t;
                    }
                }
            }
        }
    }
    for d in &mut depth {
        if d.is_infinite() {
            *d = NO_HIT;
        }
    }
    DepthImage {
        width: k.width,
        height: k.height,
        data: depth,
    }
}

/// One world-space point per hit pixel, in row-major pixel order.
pub fn backproject(depth: &DepthImage, cam: &CameraPose) -> Result<PointCloud> {
    let mut points = Vec::with_capacity(depth.hit_count());
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.get(u, v);
            if d == NO_HIT {
                continue;
            }
            let r = cam.pixel_ray(u, v);
            points.push(cam.camera_to_world(&[r[0] * d, r[1] * d, d]));
        }
    }
    if points.is_empty() {
        return Err(Error::Empty("depth image has no hits"));
    }
    Ok(PointCloud::new(points))
}

/// Uniformly distributed unit vector.
pub fn random_direction(rng: &mut impl Rng) -> Point3 {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let s = (1.0 - z * z).max(0.0).sqrt();
    [s * phi.cos(), s * phi.sin(), z]
}

/// Settings for [`make_pair_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatagenConfig {
    pub n_gt: usize,
    pub n_views: usize,
    pub intrinsics: Intrinsics,
    /// View-sphere radius as a multiple of the mesh bounding-box diagonal.
    pub radius_factor: f64,
    /// Redraws allowed per view when a camera sees nothing.
    pub max_retries: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            n_gt: 16_384,
            n_views: 8,
            intrinsics: Intrinsics::default(),
            radius_factor: 2.0,
            max_retries: 10,
        }
    }
}

/// A complete ground-truth cloud with its partial scans.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanPair {
    pub complete: PointCloud,
    pub partials: Vec<PointCloud>,
    pub cameras: Vec<CameraPose>,
}

/// Camera on the view sphere around the mesh, looking at its center with
/// z as the up hint.
pub fn camera_on_sphere(mesh: &TriangleMesh, dir: Point3, cfg: &DatagenConfig) -> Result<CameraPose> {
    let c = mesh.centroid();
    let rho = cfg.radius_factor * mesh.bbox_diagonal();
    let pos = [c[0] + rho * dir[0], c[1] + rho * dir[1], c[2] + rho * dir[2]];
    CameraPose::new(pos, c, [0.0, 0.0, 1.0], cfg.intrinsics)
}

/// [`make_pair_with`] using default camera settings.
pub fn make_pair(mesh: &TriangleMesh, n_gt: usize, n_views: usize, seed: u64) -> Result<ScanPair> {
    let cfg = DatagenConfig {
        n_gt,
        n_views,
        ..DatagenConfig::default()
    };
    make_pair_with(mesh, &cfg, seed)
}

/// Samples the complete cloud and renders `n_views` partial scans from
/// seeded random viewpoints. A view with no hits is redrawn.
pub fn make_pair_with(mesh: &TriangleMesh, cfg: &DatagenConfig, seed: u64) -> Result<ScanPair> {
    let complete = sample_mesh_uniform(mesh, cfg.n_gt, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ca3e_a5a5_0f0f);
    let mut partials = Vec::with_capacity(cfg.n_views);
    let mut cameras = Vec::with_capacity(cfg.n_views);
    for view in 0..cfg.n_views {
        let mut attempt = 0;
        loop {
            let cam = camera_on_sphere(mesh, random_direction(&mut rng), cfg)?;
            match backproject(&render_depth(mesh, &cam), &cam) {
                Ok(pc) => {
                    partials.push(pc);
                    cameras.push(cam);
                    break;
                }
                Err(_) if attempt < cfg.max_retries => attempt += 1,
                Err(_) => {
                    return Err(Error::Degenerate(format!(
                        "view {view} saw nothing after {} retries",
                        cfg.max_retries
                    )))
                }
            }
        }
    }
    Ok(ScanPair {
        complete,
        partials,
        cameras,
    })
}

/// Number of points kept by [`crop_to_visible_ratio`].
pub fn visible_count(n: usize, ratio: f64) -> usize {
    // the small slack absorbs products like 0.6 * 10 = 6.000000000000001
    (((ratio * n as f64) - 1e-9).ceil().max(1.0) as usize).min(n)
}

/// Half-space occlusion: keeps the `ceil(ratio * n)` points with the largest
/// projection onto a seeded random direction, in their original order.
pub fn crop_to_visible_ratio(complete: &PointCloud, ratio: f64, seed: u64) -> Result<PointCloud> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("visible ratio {ratio} outside (0, 1]")));
    }
    if complete.is_empty() {
        return Err(Error::Empty("crop of an empty cloud"));
    }
    let dir = random_direction(&mut ChaCha8Rng::seed_from_u64(seed));
    let keep = visible_count(complete.len(), ratio);
    let mut order: Vec<usize> = (0..complete.len()).collect();
    let proj: Vec<f64> = complete.points.iter().map(|p| dot(p, &dir)).collect();
    order.sort_by(|&a, &b| proj[b].total_cmp(&proj[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(complete.select(&kept))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn facing_camera(dist: f64) -> CameraPose {
        CameraPose::new([0.0, 0.0, dist], [0.0; 3], [0.0, 1.0, 0.0], Intrinsics::default()).unwrap()
    }

    #[test]
    fn view_frame_is_orthonormal_and_right_handed() {
        let cam = camera_on_sphere(&shapes::quad(1.0, 0.0).unwrap(), [0.3, -0.5, 0.81], &DatagenConfig::default()).unwrap();
        let [r, d, f] = cam.rotation();
        for (a, b) in [(r, d), (r, f), (d, f)] {
            assert!(dot(&a, &b).abs() < 1e-12);
        }
        for a in [r, d, f] {
            assert!((norm(&a) - 1.0).abs() < 1e-12);
        }
        let x = cross(&r, &d);
        assert!((0..3).all(|k| (x[k] - f[k]).abs() < 1e-12));
        // straight down the up hint still works
        CameraPose::new([0.0, 0.0, 5.0], [0.0; 3], [0.0, 0.0, 1.0], Intrinsics::default()).unwrap();
    }

    #[test]
    fn quad_center_depth() {
        let cam = facing_camera(2.0);
        let img = render_depth(&shapes::quad(0.5, 0.0).unwrap(), &cam);
        assert!((img.get(80, 60) - 2.0).abs() < 1e-9);
        // corner pixels look past the quad
        assert_eq!(img.get(0, 0), NO_HIT);
    }

    #[test]
    fn sphere_min_depth() {
        let mesh = shapes::uv_sphere([0.0; 3], 1.0, 32, 64).unwrap();
        let cam = facing_camera(4.0);
        let img = render_depth(&mesh, &cam);
        let min = img.data.iter().copied().filter(|&d| d != NO_HIT).fold(f64::INFINITY, f64::min);
        assert!((min - 3.0).abs() / 3.0 < 0.01, "{min}");
    }

    #[test]
    fn backprojected_quad_is_planar_and_counts_hits() {
        let cam = CameraPose::new([0.7, -0.4, 2.5], [0.0; 3], [0.0, 0.0, 1.0], Intrinsics::default()).unwrap();
        let img = render_depth(&shapes::quad(0.5, 0.0).unwrap(), &cam);
        let pc = backproject(&img, &cam).unwrap();
        assert_eq!(pc.len(), img.hit_count());
        assert!(pc.points.iter().all(|p| p[2].abs() < 1e-6));
        let empty = DepthImage {
            width: 2,
            height: 2,
            data: vec![NO_HIT; 4],
        };
        assert!(backproject(&empty, &cam).is_err());
    }

    #[test]
    fn pixel_round_trip() {
        let cam = CameraPose::new([1.0, 2.0, 3.0], [0.0, 0.5, 0.0], [0.0, 0.0, 1.0], Intrinsics::default()).unwrap();
        let img = DepthImage {
            width: 160,
            height: 120,
            data: (0..160 * 120).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect(),
        };
        let pc = backproject(&img, &cam).unwrap();
        for (i, p) in pc.points.iter().enumerate() {
            let (u, v, d) = cam.project(p).unwrap();
            assert!((u - (i % 160) as f64).abs() < 1e-6);
            assert!((v - (i / 160) as f64).abs() < 1e-6);
            assert!((d - img.data[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn convex_partial_lies_on_surface() {
        let mesh = shapes::uv_sphere([0.2, -0.1, 0.3], 0.8, 12, 24).unwrap();
        let pair = make_pair(&mesh, 512, 3, 9).unwrap();
        for pc in &pair.partials {
            assert!(pc.points.iter().all(|p| mesh.distance_to_surface(p) < 1e-6));
        }
    }

    #[test]
    fn make_pair_is_deterministic() {
        let mesh = shapes::vehicle(&shapes::VehicleParams::default()).unwrap();
        let a = make_pair(&mesh, 2048, 8, 42).unwrap();
        let b = make_pair(&mesh, 2048, 8, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.complete.len(), 2048);
        assert_eq!(a.partials.len(), 8);
        assert_ne!(a, make_pair(&mesh, 2048, 8, 43).unwrap());
    }

    #[test]
    fn crop_examples() {
        let pc = PointCloud::new((0..100).map(|i| [i as f64, (i * 7 % 13) as f64, 0.0]).collect());
        assert_eq!(crop_to_visible_ratio(&pc, 1.0, 3).unwrap(), pc);
        assert_eq!(crop_to_visible_ratio(&pc, 0.25, 3).unwrap().len(), 25);
        assert_eq!(visible_count(16_384, 0.25), 4096);
        assert_eq!(visible_count(10, 0.6), 6);
        assert!(crop_to_visible_ratio(&pc, 0.0, 3).is_err());
        assert!(crop_to_visible_ratio(&pc, 1.5, 3).is_err());
    }

    #[test]
    fn crop_keeps_top_quantile() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pc = PointCloud::new((0..500).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect());
        let kept = crop_to_visible_ratio(&pc, 0.4, 77).unwrap();
        let dir = random_direction(&mut ChaCha8Rng::seed_from_u64(77));
        let mut proj: Vec<f64> = pc.points.iter().map(|p| dot(p, &dir)).collect();
        proj.sort_by(|a, b| b.total_cmp(a));
        let threshold = proj[kept.len() - 1];
        assert_eq!(kept.len(), 200);
        assert!(kept.points.iter().all(|p| dot(p, &dir) >= threshold));
    }
}
