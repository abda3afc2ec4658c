//! Ray/triangle-mesh intersection with per-block bounding-box culling.

use crate::types::Vec3;

/// Faces are culled in consecutive blocks of this many triangles.
const BLOCK: usize = 64;
/// Bounding boxes are padded so that rounding never culls a grazing hit.
const BOX_PAD: f64 = 1e-9;
/// Intersections closer than this to the ray origin are ignored.
const MIN_DISTANCE: f64 = 1e-9;

/// A triangle mesh frozen at one animation frame.
#[derive(Debug, Clone)]
pub struct PosedMesh<'a> {
    vertices: &'a [Vec3],
    faces: &'a [[u32; 3]],
    bounds: Aabb,
    blocks: Vec<Aabb>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub point: Vec3,
    pub distance: f64,
    pub mesh: usize,
    pub triangle: usize,
    /// Barycentric weights of the second and third triangle vertex.
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vec3,
    max: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    fn padded(mut self) -> Self {
        self.min -= Vec3::repeat(BOX_PAD);
        self.max += Vec3::repeat(BOX_PAD);
        self
    }

    /// Slab test: does the ray enter the box before `limit`?
    fn hit_before(&self, origin: &Vec3, inv_dir: &Vec3, limit: f64) -> bool {
        let mut lo: f64 = 0.0;
        let mut hi = limit;
        for a in 0..3 {
            let t1 = (self.min[a] - origin[a]) * inv_dir[a];
            let t2 = (self.max[a] - origin[a]) * inv_dir[a];
            let (near, far) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            // NaN arises for a zero direction component with the origin on a slab face
            if near.is_nan() || far.is_nan() {
                continue;
            }
            lo = lo.max(near);
            hi = hi.min(far);
            if lo > hi {
                return false;
            }
        }
        true
    }
}

impl<'a> PosedMesh<'a> {
    /// Face indices must be valid for `vertices`; this is checked by the
    /// owning mesh types.
    pub fn new(vertices: &'a [Vec3], faces: &'a [[u32; 3]]) -> Self {
        let mut bounds = Aabb::empty();
        let blocks = faces
            .chunks(BLOCK)
            .map(|chunk| {
                let mut b = Aabb::empty();
                for f in chunk {
                    for &v in f {
                        b.grow(&vertices[v as usize]);
                    }
                }
                bounds.grow(&b.min);
                bounds.grow(&b.max);
                b.padded()
            })
            .collect();
        Self {
            vertices,
            faces,
            bounds: bounds.padded(),
            blocks,
        }
    }

    pub fn vertices(&self) -> &[Vec3] {
        self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        self.faces
    }

    fn triangle(&self, t: usize) -> [Vec3; 3] {
        let f = self.faces[t];
        [
            self.vertices[f[0] as usize],
            self.vertices[f[1] as usize],
            self.vertices[f[2] as usize],
        ]
    }

    /// Evaluates barycentric coordinates on triangle `t`.
    pub fn surface_point(&self, t: usize, u: f64, v: f64) -> Vec3 {
        let [a, b, c] = self.triangle(t);
        a * (1.0 - u - v) + b * u + c * v
    }
}

/// Möller–Trumbore intersection. Returns `(distance, u, v)`; edges and
/// vertices count as inside.
pub fn intersect_triangle(origin: &Vec3, dir: &Vec3, tri: &[Vec3; 3]) -> Option<(f64, f64, f64)> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-15 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > MIN_DISTANCE).then_some((t, u, v))
}

fn better(candidate: f64, best: &Option<Hit>) -> bool {
    best.as_ref().is_none_or(|h| candidate < h.distance)
}

/// Nearest intersection over all meshes within `max_range`. Equal distances
/// resolve to the lowest mesh index, then the lowest triangle index.
pub fn raycast(meshes: &[PosedMesh], origin: &Vec3, dir: &Vec3, max_range: f64) -> Option<Hit> {
    let inv_dir = dir.map(|c| 1.0 / c);
    let mut best: Option<Hit> = None;
    for (mi, mesh) in meshes.iter().enumerate() {
        let limit = best.as_ref().map_or(max_range, |h| h.distance);
        if !mesh.bounds.hit_before(origin, &inv_dir, limit) {
            continue;
        }
        for (bi, block) in mesh.blocks.iter().enumerate() {
            let limit = best.as_ref().map_or(max_range, |h| h.distance);
            if !block.hit_before(origin, &inv_dir, limit) {
                continue;
            }
            let start = bi * BLOCK;
            let end = (start + BLOCK).min(mesh.faces.len());
            for t in start..end {
                if let Some((d, u, v)) = intersect_triangle(origin, dir, &mesh.triangle(t)) {
                    if d <= max_range && better(d, &best) {
                        best = Some(Hit {
                            point: origin + dir * d,
                            distance: d,
                            mesh: mi,
                            triangle: t,
                            u,
                            v,
                        });
                    }
                }
            }
        }
    }
    best
}

/// Exhaustive intersection against every triangle; reference for [`raycast`].
pub fn raycast_brute_force(meshes: &[PosedMesh], origin: &Vec3, dir: &Vec3, max_range: f64) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (mi, mesh) in meshes.iter().enumerate() {
        for t in 0..mesh.faces.len() {
            if let Some((d, u, v)) = intersect_triangle(origin, dir, &mesh.triangle(t)) {
                if d <= max_range && better(d, &best) {
                    best = Some(Hit {
                        point: origin + dir * d,
                        distance: d,
                        mesh: mi,
                        triangle: t,
                        u,
                        v,
                    });
                }
            }
        }
    }
    best
}
