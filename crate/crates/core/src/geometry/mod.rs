//! Geometric primitives, ray casting and the bounding volume hierarchy.
//!
//! Frame convention: right-handed, +x forward, +y left, +z up, meters.

mod bvh;
mod shape;

use std::sync::Arc;

use nalgebra::{Matrix3, Rotation3, Unit};

use crate::error::{Error, Result};

pub use bvh::Bvh;
pub use shape::{Shape, TriMesh};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Point3 = nalgebra::Point3<f64>;

/// Default near clip for casting, keeps rays from re-hitting their origin surface.
pub const DEFAULT_T_MIN: f64 = 1e-4;

/// Half-line with a unit direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Point3,
    pub dir: Unit<Vec3>,
}

impl Ray {
    pub fn new(origin: Point3, dir: Vec3) -> Result<Self> {
        if !origin.coords.iter().all(|c| c.is_finite()) || !dir.iter().all(|c| c.is_finite()) {
            return Err(Error::Schema("ray has non-finite components".into()));
        }
        Unit::try_new(dir, 1e-300)
            .map(|dir| Self { origin, dir })
            .ok_or_else(|| Error::Schema("ray direction has zero length".into()))
    }

    #[inline]
    pub fn at(&self, t: f64) -> Point3 {
        self.origin + self.dir.into_inner() * t
    }
}

/// Rigid transform: `world = rotation * local + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Rotation3<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Rotation about +z followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        Self::new(Rotation3::from_axis_angle(&Vec3::z_axis(), yaw), translation)
    }

    /// Builds a pose from a raw 3x3 matrix, rejecting anything that is not a proper rotation.
    pub fn from_matrix(m: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        if !(ortho <= 1e-6) || !((m.determinant() - 1.0).abs() <= 1e-6) {
            return Err(Error::Schema(format!(
                "rotation is not orthonormal with det +1 (orthogonality error {ortho:.3e}, det {:.6})",
                m.determinant()
            )));
        }
        Ok(Self::new(Rotation3::from_matrix_unchecked(m), translation))
    }

    #[inline]
    pub fn apply_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    #[inline]
    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation.inverse();
        Pose::new(r, -(r * self.translation))
    }

    /// 3x4 row-major `[R | t]`.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let m = self.rotation.matrix();
        let t = &self.translation;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            t.x,
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            t.y,
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
            t.z,
        ]
    }

    pub fn from_row_major_3x4(v: &[f64; 12]) -> Result<Self> {
        let m = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Self::from_matrix(m, Vec3::new(v[3], v[7], v[11]))
    }
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Self {
        let mut b = Self::empty();
        for p in points {
            b.grow_point(p);
        }
        b
    }

    pub fn grow_point(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&o.min),
            max: self.max.sup(&o.max),
        }
    }

    pub fn padded(&self, pad: f64) -> Aabb {
        let p = |v: &Vec3, s: f64| v.map(|c| c + s * (pad + 1e-12 * c.abs()));
        Aabb {
            min: p(&self.min, -1.0),
            max: p(&self.max, 1.0),
        }
    }

    pub fn centroid(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn contains_point(&self, p: &Point3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_box(&self, o: &Aabb, slack: f64) -> bool {
        (0..3).all(|i| o.min[i] >= self.min[i] - slack && o.max[i] <= self.max[i] + slack)
    }

    /// Slab test; returns the entry parameter when the box overlaps `[t_min, t_max]`.
    #[inline]
    pub(crate) fn hit(&self, origin: &Vec3, inv_dir: &Vec3, t_min: f64, t_max: f64) -> Option<f64> {
        let mut lo = t_min;
        let mut hi = t_max;
        for i in 0..3 {
            let t1 = (self.min[i] - origin[i]) * inv_dir[i];
            let t2 = (self.max[i] - origin[i]) * inv_dir[i];
            // f64::min/max drop NaN (0 * inf), which keeps the slab permissive.
            lo = lo.max(t1.min(t2));
            hi = hi.min(t1.max(t2));
        }
        (lo <= hi).then_some(lo)
    }
}

/// One labeled solid in the scene.
#[derive(Clone, Debug)]
pub struct Primitive {
    pub shape: Shape,
    pub pose: Pose,
    pub semantic_label: u16,
    /// 0 marks background (non-instance) geometry.
    pub instance_id: u16,
}

impl Primitive {
    pub fn new(shape: Shape, pose: Pose, semantic_label: u16, instance_id: u16) -> Self {
        Self {
            shape,
            pose,
            semantic_label,
            instance_id,
        }
    }

    pub fn mesh(mesh: Arc<TriMesh>, pose: Pose, semantic_label: u16, instance_id: u16) -> Self {
        Self::new(Shape::Mesh(mesh), pose, semantic_label, instance_id)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let m = self.pose.rotation.matrix();
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        if !(ortho <= 1e-6 && (m.determinant() - 1.0).abs() <= 1e-6) {
            return Err("pose rotation is not orthonormal with det +1".into());
        }
        if !self.pose.translation.iter().all(|c| c.is_finite()) {
            return Err("pose translation is not finite".into());
        }
        self.shape.validate()
    }

    pub fn world_bounds(&self) -> Aabb {
        self.shape.world_bounds(&self.pose)
    }

    /// Exhaustive nearest-hit test against this primitive alone.
    pub fn intersect(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<f64> {
        self.shape.intersect(&self.pose, ray, t_min, t_max)
    }

    /// Number of ray-testable elements (triangles for meshes, one otherwise).
    pub fn element_count(&self) -> usize {
        match &self.shape {
            Shape::Mesh(m) => m.triangles.len(),
            _ => 1,
        }
    }

    pub fn transformed(&self, pose: &Pose) -> Primitive {
        Primitive {
            pose: pose.compose(&self.pose),
            ..self.clone()
        }
    }
}

/// Closest intersection returned by [`Bvh::intersect`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub primitive: usize,
    pub semantic_label: u16,
    pub instance_id: u16,
}

/// Nearest hit by exhaustive per-primitive testing; ties go to the lower index.
pub fn intersect_linear(primitives: &[Primitive], ray: &Ray, t_min: f64, t_max: f64) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, p) in primitives.iter().enumerate() {
        if let Some(t) = p.intersect(ray, t_min, t_max) {
            if best.is_none_or(|b| t < b.t) {
                best = Some(Hit {
                    t,
                    primitive: i,
                    semantic_label: p.semantic_label,
                    instance_id: p.instance_id,
                });
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_roundtrip_through_3x4() {
        let p = Pose::from_yaw(0.7, Vec3::new(1.0, -2.0, 3.5));
        let q = Pose::from_row_major_3x4(&p.to_row_major_3x4()).unwrap();
        assert!((p.rotation.matrix() - q.rotation.matrix()).abs().max() < 1e-15);
        assert_eq!(p.translation, q.translation);
    }

    #[test]
    fn reflection_is_rejected() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(Pose::from_matrix(m, Vec3::zeros()).is_err());
    }

    #[test]
    fn compose_then_inverse_is_identity() {
        let a = Pose::from_yaw(1.1, Vec3::new(4.0, 5.0, 6.0));
        let id = a.compose(&a.inverse());
        assert!((id.rotation.matrix() - Matrix3::identity()).abs().max() < 1e-12);
        assert!(id.translation.norm() < 1e-12);
    }

    #[test]
    fn zero_direction_ray_rejected() {
        assert!(Ray::new(Point3::origin(), Vec3::zeros()).is_err());
    }
}
