use super::shape::{world_triangle, SolidElement, WorldTriangle};
use super::{Aabb, Hit, Point3, Primitive, Ray, Shape, Vec3};
use crate::error::{Error, Result};

const MAX_LEAF: usize = 4;
const BOUNDS_PAD: f64 = 1e-9;

#[derive(Clone, Copy, Debug)]
enum Geom {
    Triangle(WorldTriangle),
    Solid(SolidElement),
}

#[derive(Clone, Copy, Debug)]
struct Element {
    primitive: u32,
    geom: Geom,
}

impl Element {
    #[inline]
    fn intersect(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<f64> {
        match &self.geom {
            Geom::Triangle(tri) => tri.intersect(ray, t_min, t_max),
            Geom::Solid(s) => s.intersect(ray, t_min, t_max),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Node {
    bounds: Aabb,
    /// Leaf: first element. Interior: index of the left child (right = left + 1).
    start: u32,
    /// Element count; 0 marks an interior node.
    count: u32,
}

/// Bounding volume hierarchy over the ray-testable elements of a scene.
///
/// Meshes are split into one element per triangle; analytic shapes are one
/// element each. Built with a median split on the longest axis of the
/// centroid bounds, so construction is deterministic in the input order.
#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<Node>,
    elements: Vec<Element>,
    labels: Vec<(u16, u16)>,
    primitive_bounds: Vec<Aabb>,
}

impl Bvh {
    pub fn build(primitives: &[Primitive]) -> Result<Self> {
        if primitives.is_empty() {
            return Err(Error::EmptyScene);
        }
        let mut elements = Vec::new();
        let mut bounds = Vec::new();
        for (i, p) in primitives.iter().enumerate() {
            p.validate()
                .map_err(|reason| Error::InvalidPrimitive { index: i, reason })?;
            match &p.shape {
                Shape::Mesh(m) => {
                    for k in 0..m.triangles.len() {
                        let tri = world_triangle(&p.pose, m, k);
                        bounds.push(tri.bounds().padded(BOUNDS_PAD));
                        elements.push(Element {
                            primitive: i as u32,
                            geom: Geom::Triangle(tri),
                        });
                    }
                }
                shape => {
                    bounds.push(p.world_bounds().padded(BOUNDS_PAD));
                    elements.push(Element {
                        primitive: i as u32,
                        geom: Geom::Solid(SolidElement::new(shape, &p.pose)),
                    });
                }
            }
        }

        let centroids: Vec<Vec3> = bounds.iter().map(Aabb::centroid).collect();
        let mut order: Vec<u32> = (0..elements.len() as u32).collect();
        let mut nodes = vec![Node {
            bounds: Aabb::empty(),
            start: 0,
            count: 0,
        }];
        build_node(&mut nodes, 0, &mut order, 0, &bounds, &centroids);

        let elements = order.iter().map(|&i| elements[i as usize]).collect();
        Ok(Self {
            nodes,
            elements,
            labels: primitives
                .iter()
                .map(|p| (p.semantic_label, p.instance_id))
                .collect(),
            primitive_bounds: primitives.iter().map(|p| p.world_bounds()).collect(),
        })
    }

    pub fn primitive_count(&self) -> usize {
        self.labels.len()
    }

    pub fn element_count(&self) -> usize {
        self.elements.len()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn bounds(&self) -> Aabb {
        self.nodes[0].bounds
    }

    /// Nearest hit with `t` in `[t_min, t_max]`. Equal `t` resolves to the
    /// lower primitive index (then the lower element within that primitive).
    pub fn intersect(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<Hit> {
        let origin = ray.origin.coords;
        let inv_dir = ray.dir.map(|c| 1.0 / c);
        // (t, element index in construction order)
        let mut best: Option<(f64, u32, usize)> = None;
        let mut limit = t_max;
        let mut stack = [0u32; 64];
        let mut sp = 0usize;
        self.nodes[0].bounds.hit(&origin, &inv_dir, t_min, limit)?;
        stack[sp] = 0;
        sp += 1;
        while sp > 0 {
            sp -= 1;
            let node = &self.nodes[stack[sp] as usize];
            if node.count > 0 {
                let first = node.start as usize;
                for (k, e) in self.elements[first..first + node.count as usize].iter().enumerate() {
                    if let Some(t) = e.intersect(ray, t_min, limit) {
                        let key = (t, e.primitive, first + k);
                        let better = match best {
                            None => true,
                            Some(b) => {
                                key.0 < b.0 || (key.0 == b.0 && (key.1, key.2) < (b.1, b.2))
                            }
                        };
                        if better {
                            best = Some(key);
                            limit = t;
                        }
                    }
                }
                continue;
            }
            let l = node.start;
            let r = l + 1;
            let tl = self.nodes[l as usize].bounds.hit(&origin, &inv_dir, t_min, limit);
            let tr = self.nodes[r as usize].bounds.hit(&origin, &inv_dir, t_min, limit);
            // Push the farther child first so the nearer one is visited next.
            match (tl, tr) {
                (Some(a), Some(b)) => {
                    let (near, far) = if a <= b { (l, r) } else { (r, l) };
                    stack[sp] = far;
                    stack[sp + 1] = near;
                    sp += 2;
                }
                (Some(_), None) => {
                    stack[sp] = l;
                    sp += 1;
                }
                (None, Some(_)) => {
                    stack[sp] = r;
                    sp += 1;
                }
                (None, None) => {}
            }
        }
        best.map(|(t, prim, _)| {
            let (semantic_label, instance_id) = self.labels[prim as usize];
            Hit {
                t,
                primitive: prim as usize,
                semantic_label,
                instance_id,
            }
        })
    }

    /// Indices of primitives whose bounds contain `p`, ascending.
    pub fn query_point(&self, p: &Point3) -> Vec<usize> {
        let mut found = Vec::new();
        let mut stack = vec![0u32];
        while let Some(i) = stack.pop() {
            let node = &self.nodes[i as usize];
            if !node.bounds.contains_point(p) {
                continue;
            }
            if node.count > 0 {
                let first = node.start as usize;
                for e in &self.elements[first..first + node.count as usize] {
                    let prim = e.primitive as usize;
                    if self.primitive_bounds[prim].padded(BOUNDS_PAD).contains_point(p) {
                        found.push(prim);
                    }
                }
            } else {
                stack.push(node.start);
                stack.push(node.start + 1);
            }
        }
        found.sort_unstable();
        found.dedup();
        found
    }

    /// Structural check: child boxes nest in their parents and every element
    /// sits in exactly one leaf.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let mut seen = vec![0u32; self.elements.len()];
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            let node = &self.nodes[i];
            if node.count > 0 {
                let first = node.start as usize;
                for k in first..first + node.count as usize {
                    seen[k] += 1;
                    let eb = element_bounds(&self.elements[k]);
                    if !node.bounds.contains_box(&eb, 1e-9) {
                        return Err(format!("element {k} escapes leaf {i}"));
                    }
                }
            } else {
                for c in [node.start as usize, node.start as usize + 1] {
                    if !node.bounds.contains_box(&self.nodes[c].bounds, 1e-9) {
                        return Err(format!("child {c} escapes parent {i}"));
                    }
                    stack.push(c);
                }
            }
        }
        match seen.iter().position(|&c| c != 1) {
            Some(k) => Err(format!("element {k} appears in {} leaves", seen[k])),
            None => Ok(()),
        }
    }
}

fn element_bounds(e: &Element) -> Aabb {
    match &e.geom {
        Geom::Triangle(t) => t.bounds(),
        Geom::Solid(s) => {
            let shape = match s.kind {
                super::shape::SolidKind::Box(h) => Shape::Box { half_extents: h },
                super::shape::SolidKind::Cylinder {
                    radius,
                    half_height,
                } => Shape::Cylinder {
                    radius,
                    half_height,
                },
                super::shape::SolidKind::Ground { half_x, half_y } => Shape::Ground { half_x, half_y },
            };
            shape.world_bounds(&s.pose)
        }
    }
}

fn build_node(
    nodes: &mut Vec<Node>,
    index: usize,
    order: &mut [u32],
    start: usize,
    bounds: &[Aabb],
    centroids: &[Vec3],
) {
    let node_bounds = order
        .iter()
        .fold(Aabb::empty(), |acc, &i| acc.union(&bounds[i as usize]));
    let mut cb = Aabb::empty();
    for &i in order.iter() {
        cb.grow_point(&centroids[i as usize]);
    }
    let ext = cb.extent();
    let axis = ext.imax();
    if order.len() <= MAX_LEAF || !(ext[axis] > 0.0) {
        nodes[index] = Node {
            bounds: node_bounds,
            start: start as u32,
            count: order.len() as u32,
        };
        return;
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        centroids[a as usize][axis]
            .total_cmp(&centroids[b as usize][axis])
            .then(a.cmp(&b))
    });
    let left = nodes.len();
    nodes.push(Node {
        bounds: Aabb::empty(),
        start: 0,
        count: 0,
    });
    nodes.push(Node {
        bounds: Aabb::empty(),
        start: 0,
        count: 0,
    });
    nodes[index] = Node {
        bounds: node_bounds,
        start: left as u32,
        count: 0,
    };
    let (lo, hi) = order.split_at_mut(mid);
    build_node(nodes, left, lo, start, bounds, centroids);
    build_node(nodes, left + 1, hi, start + mid, bounds, centroids);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{intersect_linear, Pose, TriMesh};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn unit_box_at(c: Vec3) -> Primitive {
        Primitive::new(
            Shape::Box {
                half_extents: Vec3::repeat(0.5),
            },
            Pose::from_yaw(0.0, c),
            1,
            0,
        )
    }

    #[test]
    fn empty_scene_is_an_error() {
        assert!(matches!(Bvh::build(&[]), Err(Error::EmptyScene)));
    }

    #[test]
    fn single_triangle_single_leaf() {
        let mesh = TriMesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 2.0, 1.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let bvh = Bvh::build(&[Primitive::mesh(Arc::new(mesh), Pose::identity(), 3, 0)]).unwrap();
        assert_eq!(bvh.node_count(), 1);
        let b = bvh.bounds();
        let tight = Aabb {
            min: Vec3::new(0.0, 0.0, 0.0),
            max: Vec3::new(1.0, 2.0, 1.0),
        };
        assert!(b.contains_box(&tight, 0.0));
        assert!(tight.contains_box(&b, 2e-9));
    }

    #[test]
    fn eight_boxes_found_by_point_query() {
        let mut prims = Vec::new();
        for k in 0..8 {
            let c = Vec3::new(
                (k & 1) as f64 * 10.0,
                ((k >> 1) & 1) as f64 * 10.0,
                ((k >> 2) & 1) as f64 * 10.0,
            );
            prims.push(unit_box_at(c));
        }
        let bvh = Bvh::build(&prims).unwrap();
        bvh.check_invariants().unwrap();
        for (i, p) in prims.iter().enumerate() {
            assert_eq!(bvh.query_point(&Point3::from(p.pose.translation)), vec![i]);
        }
        assert!(bvh.query_point(&Point3::new(5.0, 5.0, 5.0)).is_empty());
    }

    #[test]
    fn box_hit_and_miss() {
        let bvh = Bvh::build(&[unit_box_at(Vec3::new(5.0, 0.0, 0.0))]).unwrap();
        let hit = bvh
            .intersect(
                &Ray::new(Point3::origin(), Vec3::x()).unwrap(),
                1e-4,
                100.0,
            )
            .unwrap();
        assert_eq!(hit.t, 4.5);
        assert!(bvh
            .intersect(&Ray::new(Point3::origin(), -Vec3::x()).unwrap(), 1e-4, 100.0)
            .is_none());
    }

    #[test]
    fn coincident_surfaces_resolve_to_lower_index() {
        let mut a = unit_box_at(Vec3::new(5.0, 0.0, 0.0));
        a.semantic_label = 7;
        let mut b = unit_box_at(Vec3::new(5.0, 0.0, 0.0));
        b.semantic_label = 9;
        let bvh = Bvh::build(&[b.clone(), a.clone()]).unwrap();
        let ray = Ray::new(Point3::origin(), Vec3::x()).unwrap();
        assert_eq!(bvh.intersect(&ray, 1e-4, 100.0).unwrap().primitive, 0);
        assert_eq!(intersect_linear(&[b, a], &ray, 1e-4, 100.0).unwrap().primitive, 0);
    }

    #[test]
    fn mixed_shapes_match_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut prims = Vec::new();
        for i in 0..200 {
            let c = Vec3::new(
                rng.random_range(-20.0..20.0),
                rng.random_range(-20.0..20.0),
                rng.random_range(-5.0..5.0),
            );
            let pose = Pose::from_yaw(rng.random_range(0.0..std::f64::consts::TAU), c);
            let shape = match i % 3 {
                0 => Shape::Box {
                    half_extents: Vec3::new(
                        rng.random_range(0.1..2.0),
                        rng.random_range(0.1..2.0),
                        rng.random_range(0.1..2.0),
                    ),
                },
                1 => Shape::Cylinder {
                    radius: rng.random_range(0.1..1.5),
                    half_height: rng.random_range(0.1..3.0),
                },
                _ => Shape::Ground {
                    half_x: rng.random_range(0.5..3.0),
                    half_y: rng.random_range(0.5..3.0),
                },
            };
            prims.push(Primitive::new(shape, pose, i as u16, i as u16));
        }
        let bvh = Bvh::build(&prims).unwrap();
        bvh.check_invariants().unwrap();
        for _ in 0..500 {
            let o = Point3::new(
                rng.random_range(-25.0..25.0),
                rng.random_range(-25.0..25.0),
                rng.random_range(-6.0..6.0),
            );
            let d = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let ray = Ray::new(o, d).unwrap();
            assert_eq!(bvh.intersect(&ray, 1e-4, 200.0), intersect_linear(&prims, &ray, 1e-4, 200.0));
        }
    }
}
