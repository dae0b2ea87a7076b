//! Point-set primitives: clouds, triangle meshes, nearest-neighbour search,
//! farthest point sampling, and bounding-box normalization.

mod kdtree;

pub use kdtree::{SpatialIndex, DEFAULT_LEAF_SIZE};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Point3 = [f64; 3];

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[inline]
pub(crate) fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn cross(a: &Point3, b: &Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub(crate) fn dot(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn norm(a: &Point3) -> f64 {
    dot(a, a).sqrt()
}

/// Where a point came from when clouds are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointTag {
    FromInput,
    Generated,
}

/// An ordered list of 3D points with optional per-point provenance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub tags: Option<Vec<PointTag>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        PointCloud { points, tags: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.points.len() as f64;
        Some([c[0] / n, c[1] / n, c[2] / n])
    }

    /// Axis-aligned bounds as `(min, max)`.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let first = *self.points.first()?;
        let (mut lo, mut hi) = (first, first);
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Some((lo, hi))
    }

    /// The cloud as an `n x 3` constant tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = self.points.iter().flat_map(|p| p.iter().copied()).collect();
        Tensor::constant(&[self.points.len(), 3], data)
    }

    /// Reads an `n x 3` tensor back into a cloud.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 || t.shape()[1] != 3 {
            return Err(Error::Shape {
                op: "PointCloud::from_tensor",
                detail: format!("expected n x 3, got {:?}", t.shape()),
            });
        }
        Ok(PointCloud::new(
            t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        ))
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            tags: self.tags.as_ref().map(|t| idx.iter().map(|&i| t[i]).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// A triangle mesh with cached triangle areas.
#[derive(Clone, Debug)]
pub struct TriangleMesh {
    vertices: Vec<Point3>,
    triangles: Vec<[usize; 3]>,
    areas: Vec<f64>,
}

impl TriangleMesh {
    /// Validates indices and drops triangles whose area is below `1e-12` of
    /// the total surface area.
    pub fn new(vertices: Vec<Point3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::InvalidArgument(format!(
                "triangle {t:?} indexes past {} vertices",
                vertices.len()
            )));
        }
        if vertices.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidArgument("non-finite mesh vertex".into()));
        }
        let area = |t: &[usize; 3]| {
            let (a, b, c) = (&vertices[t[0]], &vertices[t[1]], &vertices[t[2]]);
            0.5 * norm(&cross(&sub(b, a), &sub(c, a)))
        };
        let total: f64 = triangles.iter().map(area).sum();
        let mut kept = Vec::with_capacity(triangles.len());
        let mut areas = Vec::with_capacity(triangles.len());
        for t in triangles {
            let a = area(&t);
            if a > 1e-12 * total && a > 0.0 {
                kept.push(t);
                areas.push(a);
            }
        }
        if kept.is_empty() {
            return Err(Error::Empty("mesh has no non-degenerate triangles"));
        }
        Ok(TriangleMesh {
            vertices,
            triangles: kept,
            areas,
        })
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    pub fn triangle(&self, i: usize) -> [Point3; 3] {
        let t = self.triangles[i];
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    pub fn bounds(&self) -> (Point3, Point3) {
        let pc = PointCloud::new(self.vertices.clone());
        pc.bounds().expect("mesh has vertices")
    }

    pub fn centroid(&self) -> Point3 {
        let (lo, hi) = self.bounds();
        [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0]
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        norm(&sub(&hi, &lo))
    }

    /// Unsigned distance from `p` to the closest point of the surface.
    pub fn distance_to_surface(&self, p: &Point3) -> f64 {
        (0..self.triangles.len())
            .map(|i| {
                let [a, b, c] = self.triangle(i);
                dist2(p, &closest_point_on_triangle(p, &a, &b, &c))
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }
}

/// Closest point on triangle `abc` to `p` (Voronoi-region walk).
pub fn closest_point_on_triangle(p: &Point3, a: &Point3, b: &Point3, c: &Point3) -> Point3 {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let lerp = |o: &Point3, d: &Point3, t: f64| [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
    let d1 = dot(&ab, &ap);
    let d2 = dot(&ac, &ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = sub(p, b);
    let d3 = dot(&ab, &bp);
    let d4 = dot(&ac, &bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return lerp(a, &ab, d1 / (d1 - d3));
    }
    let cp = sub(p, c);
    let d5 = dot(&ab, &cp);
    let d6 = dot(&ac, &cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return lerp(a, &ac, d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let bc = sub(c, b);
        return lerp(b, &bc, (d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [
        a[0] + ab[0] * v + ac[0] * w,
        a[1] + ab[1] * v + ac[1] * w,
        a[2] + ab[2] * v + ac[2] * w,
    ]
}

/// Samples `n` points uniformly over the mesh surface: triangles are picked
/// with probability proportional to area, then a uniform barycentric point
/// is drawn inside. Deterministic for a given seed.
pub fn sample_mesh_uniform(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointCloud> {
    let mut cumulative = Vec::with_capacity(mesh.areas.len());
    let mut acc = 0.0;
    for a in &mesh.areas {
        acc += a;
        cumulative.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen::<f64>() * acc;
        let t = cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1);
        let [a, b, c] = mesh.triangle(t);
        let s = rng.gen::<f64>().sqrt();
        let r2: f64 = rng.gen();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
        points.push([
            wa * a[0] + wb * b[0] + wc * c[0],
            wa * a[1] + wb * b[1] + wc * c[1],
            wa * a[2] + wb * b[2] + wc * c[2],
        ]);
    }
    Ok(PointCloud::new(points))
}

/// Greedy max-min subset selection. The first pick is the point farthest
/// from the centroid; each following pick maximizes the distance to the
/// points already chosen. Ties go to the lowest index. Returns indices in
/// selection order.
pub fn farthest_point_indices(points: &[Point3], m: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m > n {
        return Err(Error::InvalidArgument(format!("cannot sample {m} of {n} points")));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let centroid = PointCloud::new(points.to_vec()).centroid().unwrap();
    let mut first = 0;
    let mut far = -1.0;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, &centroid);
        if d > far {
            far = d;
            first = i;
        }
    }
    let mut selected = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut current = first;
    for _ in 0..m {
        selected.push(current);
        taken[current] = true;
        let c = points[current];
        let mut next = usize::MAX;
        let mut best = -1.0;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = dist2(&points[i], &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best {
                best = min_d[i];
                next = i;
            }
        }
        current = next;
    }
    Ok(selected)
}

/// Farthest point sampling of `m` points; tags are carried along.
pub fn farthest_point_sample(pc: &PointCloud, m: usize) -> Result<PointCloud> {
    let idx = farthest_point_indices(&pc.points, m)?;
    Ok(pc.select(&idx))
}

/// A uniform-scale similarity: `p -> (p - center) * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub center: Point3,
    pub scale: f64,
}

impl Similarity {
    pub fn apply(&self, p: &Point3) -> Point3 {
        [
            (p[0] - self.center[0]) * self.scale,
            (p[1] - self.center[1]) * self.scale,
            (p[2] - self.center[2]) * self.scale,
        ]
    }

    pub fn invert(&self, p: &Point3) -> Point3 {
        [
            p[0] / self.scale + self.center[0],
            p[1] / self.scale + self.center[1],
            p[2] / self.scale + self.center[2],
        ]
    }

    pub fn apply_cloud(&self, pc: &PointCloud) -> PointCloud {
        PointCloud {
            points: pc.points.iter().map(|p| self.apply(p)).collect(),
            tags: pc.tags.clone(),
        }
    }

    pub fn invert_cloud(&self, pc: &PointCloud) -> PointCloud {
        PointCloud {
            points: pc.points.iter().map(|p| self.invert(p)).collect(),
            tags: pc.tags.clone(),
        }
    }
}

/// The similarity that centers `reference` on its centroid and scales its
/// longest axis-aligned bounding-box side to one unit.
pub fn unit_box_transform(reference: &PointCloud) -> Result<Similarity> {
    let (lo, hi) = reference
        .bounds()
        .ok_or(Error::Empty("normalization reference"))?;
    let side = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    if side <= 0.0 || !side.is_finite() {
        return Err(Error::Degenerate("reference cloud has zero extent".into()));
    }
    Ok(Similarity {
        center: reference.centroid().unwrap(),
        scale: 1.0 / side,
    })
}

/// Applies [`unit_box_transform`] of `reference` to `pc`.
pub fn normalize_to_unit_box(pc: &PointCloud, reference: &PointCloud) -> Result<(PointCloud, Similarity)> {
    let t = unit_box_transform(reference)?;
    Ok((t.apply_cloud(pc), t))
}
