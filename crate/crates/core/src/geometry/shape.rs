use std::path::Path;
use std::sync::Arc;

use super::{Aabb, Point3, Pose, Ray, Vec3};
use crate::error::{Error, Result};

const MIN_TRIANGLE_AREA: f64 = 1e-12;

/// Indexed triangle mesh in a local frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Point3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let mesh = Self {
            vertices,
            triangles,
        };
        mesh.check().map_err(Error::Schema)?;
        Ok(mesh)
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.triangles.is_empty() {
            return Err("mesh has no triangles".into());
        }
        if !self.vertices.iter().all(|v| v.coords.iter().all(|c| c.is_finite())) {
            return Err("mesh has non-finite vertices".into());
        }
        for (i, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&v| v as usize >= self.vertices.len()) {
                return Err(format!("triangle {i} references a missing vertex"));
            }
            let [a, b, c] = tri.map(|v| self.vertices[v as usize]);
            let area = 0.5 * (b - a).cross(&(c - a)).norm();
            if !(area > MIN_TRIANGLE_AREA) {
                return Err(format!("triangle {i} is degenerate (area {area:.3e})"));
            }
        }
        Ok(())
    }

    /// Parses the `v` / `f` subset of Wavefront OBJ. Faces with more than
    /// three vertices are fan-triangulated.
    pub fn from_obj_str(text: &str) -> std::result::Result<Self, String> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .take(3)
                        .map(|s| s.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| format!("line {}: {e}", lineno + 1))?;
                    if c.len() != 3 {
                        return Err(format!("line {}: vertex needs 3 coordinates", lineno + 1));
                    }
                    vertices.push(Point3::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let idx: Vec<u32> = it
                        .map(|s| {
                            // "7", "7/1", "7//3"
                            let head = s.split('/').next().unwrap_or(s);
                            head.parse::<i64>()
                                .map_err(|e| format!("line {}: {e}", lineno + 1))
                                .and_then(|i| {
                                    let n = vertices.len() as i64;
                                    let resolved = if i < 0 { n + i } else { i - 1 };
                                    if resolved < 0 || resolved >= n {
                                        Err(format!("line {}: face index {i} out of range", lineno + 1))
                                    } else {
                                        Ok(resolved as u32)
                                    }
                                })
                        })
                        .collect::<std::result::Result<_, _>>()?;
                    if idx.len() < 3 {
                        return Err(format!("line {}: face needs at least 3 vertices", lineno + 1));
                    }
                    for k in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        let mesh = Self {
            vertices,
            triangles,
        };
        mesh.check()?;
        Ok(mesh)
    }

    pub fn load_obj(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_obj_str(&text).map_err(|m| Error::parse(path, m))
    }

    /// Largest horizontal distance of any vertex from the local z axis.
    pub fn horizontal_radius(&self) -> f64 {
        self.vertices
            .iter()
            .map(|v| v.x.hypot(v.y))
            .fold(0.0, f64::max)
    }
}

/// Local-frame geometry of a [`super::Primitive`].
#[derive(Clone, Debug)]
pub enum Shape {
    Mesh(Arc<TriMesh>),
    /// Box centered at the local origin.
    Box { half_extents: Vec3 },
    /// Cylinder around local +z, centered at the origin, spanning `[-half_height, half_height]`.
    Cylinder { radius: f64, half_height: f64 },
    /// Rectangle in the local z = 0 plane, visible from both sides.
    Ground { half_x: f64, half_y: f64 },
}

impl Shape {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        match self {
            Shape::Mesh(m) => m.check(),
            Shape::Box { half_extents } if half_extents.iter().all(|&c| pos(c)) => Ok(()),
            Shape::Cylinder {
                radius,
                half_height,
            } if pos(*radius) && pos(*half_height) => Ok(()),
            Shape::Ground { half_x, half_y } if pos(*half_x) && pos(*half_y) => Ok(()),
            _ => Err("shape dimensions must be positive and finite".into()),
        }
    }

    pub fn world_bounds(&self, pose: &Pose) -> Aabb {
        match self {
            Shape::Mesh(m) => Aabb::from_points(
                m.vertices.iter().map(|v| pose.apply_point(v).coords).collect::<Vec<_>>().iter(),
            ),
            _ => {
                let h = self.local_half_extents();
                let corners: Vec<Vec3> = (0..8)
                    .map(|k| {
                        let s = Vec3::new(
                            if k & 1 == 0 { -h.x } else { h.x },
                            if k & 2 == 0 { -h.y } else { h.y },
                            if k & 4 == 0 { -h.z } else { h.z },
                        );
                        pose.apply_point(&Point3::from(s)).coords
                    })
                    .collect();
                Aabb::from_points(corners.iter())
            }
        }
    }

    fn local_half_extents(&self) -> Vec3 {
        match self {
            Shape::Mesh(_) => unreachable!("meshes are bounded through their vertices"),
            Shape::Box { half_extents } => *half_extents,
            Shape::Cylinder {
                radius,
                half_height,
            } => Vec3::new(*radius, *radius, *half_height),
            Shape::Ground { half_x, half_y } => Vec3::new(*half_x, *half_y, 0.0),
        }
    }

    pub(crate) fn intersect(&self, pose: &Pose, ray: &Ray, t_min: f64, t_max: f64) -> Option<f64> {
        match self {
            Shape::Mesh(m) => {
                let mut best: Option<f64> = None;
                for i in 0..m.triangles.len() {
                    let tri = world_triangle(pose, m, i);
                    if let Some(t) = tri.intersect(ray, t_min, t_max) {
                        if best.is_none_or(|b| t < b) {
                            best = Some(t);
                        }
                    }
                }
                best
            }
            _ => SolidElement::new(self, pose).intersect(ray, t_min, t_max),
        }
    }
}

/// World-space triangle with precomputed edges.
#[derive(Clone, Copy, Debug)]
pub(crate) struct WorldTriangle {
    pub a: Vec3,
    pub e1: Vec3,
    pub e2: Vec3,
}

pub(crate) fn world_triangle(pose: &Pose, mesh: &TriMesh, i: usize) -> WorldTriangle {
    let [a, b, c] = mesh.triangles[i].map(|v| pose.apply_point(&mesh.vertices[v as usize]).coords);
    WorldTriangle {
        a,
        e1: b - a,
        e2: c - a,
    }
}

impl WorldTriangle {
    pub fn bounds(&self) -> Aabb {
        Aabb::from_points([self.a, self.a + self.e1, self.a + self.e2].iter())
    }

    /// Two-sided Möller–Trumbore.
    #[inline]
    pub fn intersect(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<f64> {
        let d = ray.dir.as_ref();
        let p = d.cross(&self.e2);
        let det = self.e1.dot(&p);
        if det.abs() < 1e-300 {
            return None;
        }
        let inv = 1.0 / det;
        let s = ray.origin.coords - self.a;
        let u = s.dot(&p) * inv;
        if !(0.0..=1.0).contains(&u) {
            return None;
        }
        let q = s.cross(&self.e1);
        let v = d.dot(&q) * inv;
        if v < 0.0 || u + v > 1.0 {
            return None;
        }
        let t = self.e2.dot(&q) * inv;
        (t >= t_min && t <= t_max).then_some(t)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum SolidKind {
    Box(Vec3),
    Cylinder { radius: f64, half_height: f64 },
    Ground { half_x: f64, half_y: f64 },
}

/// Analytic solid evaluated in its local frame.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SolidElement {
    pub kind: SolidKind,
    pub pose: Pose,
}

impl SolidElement {
    pub fn new(shape: &Shape, pose: &Pose) -> Self {
        let kind = match shape {
            Shape::Box { half_extents } => SolidKind::Box(*half_extents),
            Shape::Cylinder {
                radius,
                half_height,
            } => SolidKind::Cylinder {
                radius: *radius,
                half_height: *half_height,
            },
            Shape::Ground { half_x, half_y } => SolidKind::Ground {
                half_x: *half_x,
                half_y: *half_y,
            },
            Shape::Mesh(_) => unreachable!("meshes are split into triangles"),
        };
        Self { kind, pose: *pose }
    }

    #[inline]
    pub fn intersect(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<f64> {
        let inv_rot = self.pose.rotation.inverse();
        let o = inv_rot * (ray.origin.coords - self.pose.translation);
        let d = inv_rot * ray.dir.as_ref();
        match self.kind {
            SolidKind::Box(h) => box_hit(&o, &d, &h, t_min, t_max),
            SolidKind::Cylinder {
                radius,
                half_height,
            } => cylinder_hit(&o, &d, radius, half_height, t_min, t_max),
            SolidKind::Ground { half_x, half_y } => {
                if d.z == 0.0 {
                    return None;
                }
                let t = -o.z / d.z;
                if !(t >= t_min && t <= t_max) {
                    return None;
                }
                let x = o.x + t * d.x;
                let y = o.y + t * d.y;
                (x.abs() <= half_x && y.abs() <= half_y).then_some(t)
            }
        }
    }
}

/// Surface hit on a solid box: the entry point, or the exit point when the
/// origin is inside.
fn box_hit(o: &Vec3, d: &Vec3, h: &Vec3, t_min: f64, t_max: f64) -> Option<f64> {
    let mut near = f64::NEG_INFINITY;
    let mut far = f64::INFINITY;
    for i in 0..3 {
        if d[i] == 0.0 {
            if o[i].abs() > h[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[i];
        let t1 = (-h[i] - o[i]) * inv;
        let t2 = (h[i] - o[i]) * inv;
        near = near.max(t1.min(t2));
        far = far.min(t1.max(t2));
    }
    if near > far {
        return None;
    }
    [near, far].into_iter().find(|&t| t >= t_min && t <= t_max)
}

fn cylinder_hit(o: &Vec3, d: &Vec3, r: f64, hh: f64, t_min: f64, t_max: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t >= t_min && t <= t_max && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    let a = d.x * d.x + d.y * d.y;
    if a > 0.0 {
        let b = o.x * d.x + o.y * d.y;
        let c = o.x * o.x + o.y * o.y - r * r;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            // numerically stable root pair
            let qv = -(b + b.signum() * sq);
            let (r1, r2) = if qv != 0.0 { (qv / a, c / qv) } else { (0.0, 0.0) };
            for t in [r1, r2] {
                if (o.z + t * d.z).abs() <= hh {
                    consider(t);
                }
            }
        }
    }
    if d.z != 0.0 {
        for cap in [-hh, hh] {
            let t = (cap - o.z) / d.z;
            let x = o.x + t * d.x;
            let y = o.y + t * d.y;
            if x * x + y * y <= r * r {
                consider(t);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ray(o: [f64; 3], d: [f64; 3]) -> Ray {
        Ray::new(Point3::new(o[0], o[1], o[2]), Vec3::new(d[0], d[1], d[2])).unwrap()
    }

    #[test]
    fn unit_box_ahead() {
        let s = Shape::Box {
            half_extents: Vec3::repeat(0.5),
        };
        let p = Pose::from_yaw(0.0, Vec3::new(5.0, 0.0, 0.0));
        let t = s.intersect(&p, &ray([0.0; 3], [1.0, 0.0, 0.0]), 1e-4, 100.0);
        assert_eq!(t, Some(4.5));
    }

    #[test]
    fn box_from_inside_hits_exit_face() {
        let s = Shape::Box {
            half_extents: Vec3::repeat(1.0),
        };
        let t = s.intersect(&Pose::identity(), &ray([0.0; 3], [0.0, 1.0, 0.0]), 1e-4, 10.0);
        assert_eq!(t, Some(1.0));
    }

    #[test]
    fn cylinder_side_and_cap() {
        let s = Shape::Cylinder {
            radius: 0.5,
            half_height: 2.0,
        };
        let p = Pose::from_yaw(0.3, Vec3::new(10.0, 0.0, 0.0));
        let side = s.intersect(&p, &ray([0.0; 3], [1.0, 0.0, 0.0]), 1e-4, 100.0).unwrap();
        assert!((side - 9.5).abs() < 1e-12);
        let cap = s.intersect(&p, &ray([10.0, 0.0, 5.0], [0.0, 0.0, -1.0]), 1e-4, 100.0).unwrap();
        assert!((cap - 3.0).abs() < 1e-12);
        assert!(s.intersect(&p, &ray([10.0, 0.6, 5.0], [0.0, 0.0, -1.0]), 1e-4, 100.0).is_none());
    }

    #[test]
    fn ground_patch_bounds() {
        let s = Shape::Ground {
            half_x: 1.0,
            half_y: 1.0,
        };
        let p = Pose::identity();
        assert_eq!(s.intersect(&p, &ray([0.5, 0.5, 2.0], [0.0, 0.0, -1.0]), 1e-4, 10.0), Some(2.0));
        assert!(s.intersect(&p, &ray([1.5, 0.5, 2.0], [0.0, 0.0, -1.0]), 1e-4, 10.0).is_none());
        assert!(s.intersect(&p, &ray([0.0, 0.0, 2.0], [1.0, 0.0, 0.0]), 1e-4, 10.0).is_none());
    }

    #[test]
    fn obj_parsing_fans_quads() {
        let m = TriMesh::from_obj_str("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]);
        assert!((m.horizontal_radius() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn degenerate_triangle_rejected() {
        let err = TriMesh::from_obj_str("v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n").unwrap_err();
        assert!(err.contains("degenerate"));
    }

    #[test]
    fn obj_index_out_of_range() {
        assert!(TriMesh::from_obj_str("v 0 0 0\nf 1 2 3\n").is_err());
    }
}
