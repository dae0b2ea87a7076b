//! Procedural meshes: test primitives and box-and-wheel vehicle bodies.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{Point3, TriangleMesh};

/// Square of side `2 * half` in the plane `z = z0`, centered on the z axis.
pub fn quad(half: f64, z0: f64) -> Result<TriangleMesh> {
    TriangleMesh::new(
        vec![
            [-half, -half, z0],
            [half, -half, z0],
            [half, half, z0],
            [-half, half, z0],
        ],
        vec![[0, 1, 2], [0, 2, 3]],
    )
}

/// Latitude/longitude sphere.
pub fn uv_sphere(center: Point3, radius: f64, stacks: usize, slices: usize) -> Result<TriangleMesh> {
    let stacks = stacks.max(2);
    let slices = slices.max(3);
    let mut vertices = vec![[center[0], center[1], center[2] + radius]];
    for i in 1..stacks {
        let theta = PI * i as f64 / stacks as f64;
        for j in 0..slices {
            let phi = 2.0 * PI * j as f64 / slices as f64;
            vertices.push([
                center[0] + radius * theta.sin() * phi.cos(),
                center[1] + radius * theta.sin() * phi.sin(),
                center[2] + radius * theta.cos(),
            ]);
        }
    }
    let south = vertices.len();
    vertices.push([center[0], center[1], center[2] - radius]);
    let ring = |i: usize, j: usize| 1 + (i - 1) * slices + j % slices;
    let mut triangles = Vec::new();
    for j in 0..slices {
        triangles.push([0, ring(1, j), ring(1, j + 1)]);
        triangles.push([south, ring(stacks - 1, j + 1), ring(stacks - 1, j)]);
    }
    for i in 1..stacks - 1 {
        for j in 0..slices {
            triangles.push([ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)]);
            triangles.push([ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)]);
        }
    }
    TriangleMesh::new(vertices, triangles)
}

#[derive(Default)]
struct MeshBuilder {
    vertices: Vec<Point3>,
    triangles: Vec<[usize; 3]>,
}

impl MeshBuilder {
    fn quad(&mut self, a: Point3, b: Point3, c: Point3, d: Point3) {
        let k = self.vertices.len();
        self.vertices.extend([a, b, c, d]);
        self.triangles.push([k, k + 1, k + 2]);
        self.triangles.push([k, k + 2, k + 3]);
    }

    /// Axis-aligned box; `bottom = false` leaves the floor open.
    fn cuboid(&mut self, lo: Point3, hi: Point3, bottom: bool) {
        let [x0, y0, z0] = lo;
        let [x1, y1, z1] = hi;
        self.quad([x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1]);
        if bottom {
            self.quad([x0, y0, z0], [x0, y1, z0], [x1, y1, z0], [x1, y0, z0]);
        }
        self.quad([x0, y0, z0], [x1, y0, z0], [x1, y0, z1], [x0, y0, z1]);
        self.quad([x0, y1, z0], [x0, y1, z1], [x1, y1, z1], [x1, y1, z0]);
        self.quad([x0, y0, z0], [x0, y0, z1], [x0, y1, z1], [x0, y1, z0]);
        self.quad([x1, y0, z0], [x1, y1, z0], [x1, y1, z1], [x1, y0, z1]);
    }

    /// Closed prism with a regular `sides`-gon cross-section in the xz
    /// plane, extruded along y from `y0` to `y1`.
    fn wheel(&mut self, cx: f64, cz: f64, radius: f64, y0: f64, y1: f64, sides: usize) {
        let rim = |k: usize, y: f64| {
            let a = 2.0 * PI * k as f64 / sides as f64;
            [cx + radius * a.cos(), y, cz + radius * a.sin()]
        };
        let c0 = self.vertices.len();
        self.vertices.push([cx, y0, cz]);
        self.vertices.push([cx, y1, cz]);
        for k in 0..sides {
            self.quad(rim(k, y0), rim(k + 1, y0), rim(k + 1, y1), rim(k, y1));
            let s = self.vertices.len();
            self.vertices.extend([rim(k, y0), rim(k + 1, y0), rim(k, y1), rim(k + 1, y1)]);
            self.triangles.push([c0, s + 1, s]);
            self.triangles.push([c0 + 1, s + 2, s + 3]);
        }
    }

    fn build(self) -> Result<TriangleMesh> {
        TriangleMesh::new(self.vertices, self.triangles)
    }
}

/// Proportions of a synthetic vehicle, in meters. The body runs along x,
/// its width along y, and z is up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VehicleParams {
    pub length: f64,
    pub width: f64,
    pub body_height: f64,
    pub ground_clearance: f64,
    pub cabin_length: f64,
    pub cabin_height: f64,
    /// Cabin start along x as a fraction of the free body length.
    pub cabin_offset: f64,
    pub wheel_radius: f64,
    pub wheel_width: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            length: 4.5,
            width: 1.8,
            body_height: 0.7,
            ground_clearance: 0.25,
            cabin_length: 2.4,
            cabin_height: 0.6,
            cabin_offset: 0.55,
            wheel_radius: 0.33,
            wheel_width: 0.22,
        }
    }
}

impl VehicleParams {
    /// Draws proportions spanning hatchbacks, sedans, SUVs and vans.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let length = rng.gen_range(3.6..5.4);
        let van = rng.gen_bool(0.25);
        VehicleParams {
            length,
            width: rng.gen_range(1.6..2.0),
            body_height: rng.gen_range(0.55..0.95),
            ground_clearance: rng.gen_range(0.18..0.35),
            cabin_length: if van {
                length * rng.gen_range(0.75..0.9)
            } else {
                length * rng.gen_range(0.4..0.6)
            },
            cabin_height: rng.gen_range(0.45..if van { 1.1 } else { 0.7 }),
            cabin_offset: rng.gen_range(0.3..0.7),
            wheel_radius: rng.gen_range(0.28..0.4),
            wheel_width: rng.gen_range(0.18..0.28),
        }
    }
}

/// Body box, a narrower cabin box on top, and four octagonal wheels
/// flush against the body sides. The mesh is centered on the origin in x
/// and y and rests on `z = 0`.
pub fn vehicle(p: &VehicleParams) -> Result<TriangleMesh> {
    let mut b = MeshBuilder::default();
    let hl = p.length / 2.0;
    let hw = p.width / 2.0;
    let z0 = p.ground_clearance;
    let z1 = z0 + p.body_height;
    b.cuboid([-hl, -hw, z0], [hl, hw, z1], true);
    let inset = 0.08 * p.width;
    let cabin_x0 = -hl + (p.length - p.cabin_length) * p.cabin_offset;
    b.cuboid(
        [cabin_x0, -hw + inset, z1],
        [cabin_x0 + p.cabin_length, hw - inset, z1 + p.cabin_height],
        false,
    );
    let axle_x = hl - 1.3 * p.wheel_radius;
    for &x in &[-axle_x, axle_x] {
        b.wheel(x, p.wheel_radius, p.wheel_radius, -hw - p.wheel_width, -hw, 8);
        b.wheel(x, p.wheel_radius, p.wheel_radius, hw, hw + p.wheel_width, 8);
    }
    b.build()
}
