//! Declarative scenes, count-exact instance placement and sensor trajectories.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Bvh, Point3, Pose, Primitive, Ray, Shape, TriMesh, Vec3, DEFAULT_T_MIN};
use crate::labelmap::LabelMap;
use crate::rng::{derive_key, tag};
use crate::sensor::SensorConfig;

/// Requested instance count per class name.
pub type ClassTargets = BTreeMap<String, usize>;

/// Candidate draws per instance before placement gives up.
pub const PLACEMENT_RETRIES: usize = 1000;

/// Farthest viewpoint that can satisfy an instance's sightline.
pub const SIGHT_RANGE: f64 = 40.0;
/// Horizontal gap a sightline keeps from other footprints.
const SIGHT_MARGIN: f64 = 0.1;
/// Height above the instance base that sightlines aim at.
const SIGHT_AIM: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct InstanceTemplate {
    pub mesh: Arc<TriMesh>,
    pub footprint_radius: f64,
}

#[derive(Clone, Debug)]
pub struct InstanceClass {
    /// Raw semantic label written for every point on instances of this class.
    pub label: u16,
    pub templates: Vec<InstanceTemplate>,
}

impl InstanceClass {
    fn max_radius(&self) -> f64 {
        self.templates
            .iter()
            .map(|t| t.footprint_radius)
            .fold(0.0, f64::max)
    }
}

/// Simple polygon on the ground plane where instance centers may be drawn.
#[derive(Clone, Debug)]
pub struct PlacementRegion {
    pub polygon: Vec<[f64; 2]>,
    /// Ground height of placed instances.
    pub z: f64,
    pub classes: Vec<String>,
}

impl PlacementRegion {
    pub fn area(&self) -> f64 {
        let n = self.polygon.len();
        let twice: f64 = (0..n)
            .map(|i| {
                let [x0, y0] = self.polygon[i];
                let [x1, y1] = self.polygon[(i + 1) % n];
                x0 * y1 - x1 * y0
            })
            .sum();
        0.5 * twice.abs()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        // even-odd crossing test
        let n = self.polygon.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let [xi, yi] = self.polygon[i];
            let [xj, yj] = self.polygon[j];
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    fn bbox(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.polygon {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    fn allows(&self, class: &str) -> bool {
        self.classes.iter().any(|c| c == class)
    }
}

/// Piecewise-linear timed path; the sensor faces along the direction of travel.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// (time in seconds, position)
    pub waypoints: Vec<(f64, Vec3)>,
}

impl Trajectory {
    pub fn validate(&self) -> Result<()> {
        if self.waypoints.is_empty() {
            return Err(Error::Schema("trajectory needs at least one waypoint".into()));
        }
        if self.waypoints.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::Schema("trajectory times must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        match (self.waypoints.first(), self.waypoints.last()) {
            (Some(a), Some(b)) => b.0 - a.0,
            _ => 0.0,
        }
    }

    pub fn pose_at(&self, t: f64) -> Pose {
        let w = &self.waypoints;
        if w.len() == 1 {
            return Pose::from_yaw(0.0, w[0].1);
        }
        let seg = w
            .windows(2)
            .position(|s| t < s[1].0)
            .unwrap_or(w.len() - 2);
        let (t0, p0) = w[seg];
        let (t1, p1) = w[seg + 1];
        let f = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        let d = p1 - p0;
        let yaw = if d.x == 0.0 && d.y == 0.0 { 0.0 } else { d.y.atan2(d.x) };
        Pose::from_yaw(yaw, p0 + d * f)
    }

    /// `n` poses at times `t0 + k * duration / n`.
    pub fn tick_poses(&self, n: usize) -> Result<Vec<Pose>> {
        self.validate()?;
        let t0 = self.waypoints[0].0;
        let dt = self.duration() / n as f64;
        Ok((0..n).map(|k| self.pose_at(t0 + dt * k as f64)).collect())
    }

    fn distance_2d(&self, x: f64, y: f64) -> f64 {
        let [qx, qy] = self.nearest_point_2d(x, y);
        (qx - x).hypot(qy - y)
    }

    /// Closest point of the ground-projected path to `(x, y)`.
    pub fn nearest_point_2d(&self, x: f64, y: f64) -> [f64; 2] {
        let w = &self.waypoints;
        if w.len() == 1 {
            return [w[0].1.x, w[0].1.y];
        }
        let mut best = [f64::NAN; 2];
        let mut best_d = f64::INFINITY;
        for s in w.windows(2) {
            let (a, b) = (s[0].1, s[1].1);
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            let len2 = dx * dx + dy * dy;
            let f = if len2 > 0.0 {
                (((x - a.x) * dx + (y - a.y) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = [a.x + f * dx, a.y + f * dy];
            let d = (q[0] - x).hypot(q[1] - y);
            if d < best_d {
                best_d = d;
                best = q;
            }
        }
        best
    }
}

/// Labeled world description.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub name: String,
    pub rng_seed: u64,
    /// Name of the raw taxonomy the labels belong to.
    pub taxonomy: String,
    pub extents: Aabb,
    pub statics: Vec<Primitive>,
    pub placement_regions: Vec<PlacementRegion>,
    pub instance_classes: BTreeMap<String, InstanceClass>,
    pub trajectory: Trajectory,
    /// Minimum horizontal gap between a placed footprint and the trajectory.
    pub trajectory_clearance: Option<f64>,
    /// Every instance keeps an unobstructed line to at least one viewpoint
    /// within [`SIGHT_RANGE`].
    pub require_sightline: bool,
    pub sensor: SensorConfig,
}

/// One placed object.
#[derive(Clone, Debug, PartialEq)]
pub struct InstancePlacement {
    pub class: String,
    pub template: usize,
    pub yaw: f64,
    pub position: Vec3,
    pub footprint_radius: f64,
    pub instance_id: u16,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.statics.iter().enumerate() {
            p.validate()
                .map_err(|reason| Error::InvalidPrimitive { index: i, reason })?;
        }
        for (name, class) in &self.instance_classes {
            if class.templates.is_empty() {
                return Err(Error::Schema(format!("class '{name}' has no templates")));
            }
            if let Some(t) = class.templates.iter().find(|t| !(t.footprint_radius > 0.0)) {
                return Err(Error::Schema(format!(
                    "class '{name}' has a template with footprint radius {}",
                    t.footprint_radius
                )));
            }
        }
        for (i, r) in self.placement_regions.iter().enumerate() {
            if r.polygon.len() < 3 || !(r.area() > 0.0) {
                return Err(Error::Schema(format!("region {i} is not a proper polygon")));
            }
            let inside = r.polygon.iter().all(|&[x, y]| {
                x >= self.extents.min.x
                    && x <= self.extents.max.x
                    && y >= self.extents.min.y
                    && y <= self.extents.max.y
            });
            if !inside {
                return Err(Error::Schema(format!("region {i} leaves the scene extents")));
            }
        }
        self.trajectory.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base).map_err(|e| match e {
            Error::Schema(m) => Error::parse(path, m),
            other => other,
        })
    }

    /// Parses a scene document; mesh paths resolve against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let file: SceneFile = toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        file.into_spec(base)
    }
}

/// Draws instance poses so that each class receives exactly its target count.
///
/// Classes are processed largest footprint first (ties by name). Each instance
/// gets up to [`PLACEMENT_RETRIES`] candidate draws (template, area-weighted
/// region, uniform point, uniform yaw); a candidate is accepted when its
/// footprint disk clears every accepted disk and, if configured, the
/// trajectory. Instance ids run from 1 in placement order.
///
/// With `require_sightline`, a candidate also needs a clear line to one of
/// `viewpoints` (statics and accepted footprints both block), and may not
/// take away the last clear line of an accepted instance. `viewpoints` is
/// ignored otherwise.
pub fn place_instances(
    spec: &SceneSpec,
    targets: &ClassTargets,
    viewpoints: &[Point3],
) -> Result<Vec<InstancePlacement>> {
    let mut order: Vec<(&str, &InstanceClass, usize)> = Vec::new();
    for (name, &count) in targets {
        if count == 0 {
            continue;
        }
        let class = spec
            .instance_classes
            .get(name)
            .ok_or_else(|| Error::Schema(format!("no templates for class '{name}'")))?;
        if class.templates.is_empty() {
            return Err(Error::Schema(format!("no templates for class '{name}'")));
        }
        if !spec.placement_regions.iter().any(|r| r.allows(name)) {
            return Err(Error::Schema(format!("no placement region allows class '{name}'")));
        }
        order.push((name, class, count));
    }
    let total: usize = order.iter().map(|o| o.2).sum();
    if total > u16::MAX as usize {
        return Err(Error::Schema(format!(
            "{total} instances exceed the 16-bit instance id space"
        )));
    }
    order.sort_by(|a, b| b.1.max_radius().total_cmp(&a.1.max_radius()).then(a.0.cmp(b.0)));

    let max_r = order.iter().map(|o| o.1.max_radius()).fold(0.0, f64::max);
    let mut grid = DiskGrid::new(max_r.max(1e-3));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_key(&[tag("placement"), spec.rng_seed]));
    let mut out = Vec::with_capacity(total);
    let statics = match spec.require_sightline {
        true => match Bvh::build(&spec.statics) {
            Ok(b) => Some(b),
            Err(Error::EmptyScene) => None,
            Err(e) => return Err(e),
        },
        false => None,
    };
    // viewpoints each accepted instance can still be seen from
    let mut clear_views: Vec<Vec<usize>> = Vec::new();

    for (name, class, count) in order {
        let regions: Vec<&PlacementRegion> = spec
            .placement_regions
            .iter()
            .filter(|r| r.allows(name))
            .collect();
        let weights: Vec<f64> = regions.iter().map(|r| r.area()).collect();
        let weight_sum: f64 = weights.iter().sum();
        for placed in 0..count {
            let mut accepted = None;
            for _ in 0..PLACEMENT_RETRIES {
                let template = rng.random_range(0..class.templates.len());
                let radius = class.templates[template].footprint_radius;
                let region = pick_weighted(&regions, &weights, weight_sum, rng.random::<f64>());
                let Some((x, y)) = sample_in_polygon(region, &mut rng) else {
                    continue;
                };
                let yaw = rng.random_range(0.0..std::f64::consts::TAU);
                if grid.overlaps(x, y, radius) {
                    continue;
                }
                if let Some(clear) = spec.trajectory_clearance {
                    if spec.trajectory.distance_2d(x, y) < radius + clear {
                        continue;
                    }
                }
                let mut views = Vec::new();
                let mut cut = Vec::new();
                if spec.require_sightline {
                    let base = Point3::new(x, y, region.z);
                    views = visible_from(base, radius, viewpoints, &grid, statics.as_ref());
                    if views.is_empty() {
                        continue;
                    }
                    match cut_sightlines([x, y], radius, viewpoints, &grid, &out, &clear_views) {
                        Some(c) => cut = c,
                        None => continue,
                    }
                }
                accepted = Some((template, radius, x, y, region.z, yaw, views, cut));
                break;
            }
            let Some((template, radius, x, y, z, yaw, views, cut)) = accepted else {
                return Err(Error::InfeasiblePlacement {
                    class: name.to_string(),
                    placed,
                    target: count,
                });
            };
            grid.insert(x, y, radius, out.len());
            for (j, remaining) in cut {
                clear_views[j] = remaining;
            }
            clear_views.push(views);
            out.push(InstancePlacement {
                class: name.to_string(),
                template,
                yaw,
                position: Vec3::new(x, y, z),
                footprint_radius: radius,
                instance_id: (out.len() + 1) as u16,
            });
        }
    }
    Ok(out)
}

fn pick_weighted<'a>(
    regions: &[&'a PlacementRegion],
    weights: &[f64],
    sum: f64,
    u: f64,
) -> &'a PlacementRegion {
    let mut acc = 0.0;
    let target = u * sum;
    for (r, w) in regions.iter().zip(weights) {
        acc += w;
        if target < acc {
            return r;
        }
    }
    regions[regions.len() - 1]
}

/// Viewpoints within range whose line to `base` misses statics and every
/// accepted footprint.
fn visible_from(
    base: Point3,
    radius: f64,
    viewpoints: &[Point3],
    grid: &DiskGrid,
    statics: Option<&Bvh>,
) -> Vec<usize> {
    let c = [base.x, base.y];
    let aim = base + Vec3::new(0.0, 0.0, SIGHT_AIM);
    let mut out = Vec::new();
    for (k, v) in viewpoints.iter().enumerate() {
        let d2 = (v.x - c[0]).hypot(v.y - c[1]);
        if d2 > SIGHT_RANGE || d2 <= radius {
            continue;
        }
        let vp = [v.x, v.y];
        let mid = [(vp[0] + c[0]) / 2.0, (vp[1] + c[1]) / 2.0];
        let blocked = grid
            .near(mid[0], mid[1], d2 / 2.0 + grid.max_r + SIGHT_MARGIN)
            .any(|(ox, oy, or, _)| segment_distance([ox, oy], vp, c) < or + SIGHT_MARGIN);
        if blocked {
            continue;
        }
        if let Some(bvh) = statics {
            let to = aim - v;
            let len = to.norm();
            let hit = Ray::new(*v, to)
                .ok()
                .and_then(|ray| bvh.intersect(&ray, DEFAULT_T_MIN, len * (1.0 - radius / d2)));
            if hit.is_some() {
                continue;
            }
        }
        out.push(k);
    }
    out
}

/// Clear-view lists of accepted instances after a disk at `c` is added, for
/// the instances it affects. `None` when some instance would lose its last
/// clear line.
fn cut_sightlines(
    c: [f64; 2],
    radius: f64,
    viewpoints: &[Point3],
    grid: &DiskGrid,
    placed: &[InstancePlacement],
    clear_views: &[Vec<usize>],
) -> Option<Vec<(usize, Vec<usize>)>> {
    let mut cut = Vec::new();
    for (_, _, _, j) in grid.near(c[0], c[1], SIGHT_RANGE + grid.max_r) {
        let pj = &placed[j].position;
        let views = &clear_views[j];
        let remaining: Vec<usize> = views
            .iter()
            .copied()
            .filter(|&k| {
                let v = &viewpoints[k];
                segment_distance(c, [v.x, v.y], [pj.x, pj.y]) >= radius + SIGHT_MARGIN
            })
            .collect();
        if remaining.is_empty() {
            return None;
        }
        if remaining.len() < views.len() {
            cut.push((j, remaining));
        }
    }
    Some(cut)
}

/// Distance from `p` to the segment `a`-`b`.
fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let f = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (a[0] + f * dx - p[0]).hypot(a[1] + f * dy - p[1])
}

fn sample_in_polygon(region: &PlacementRegion, rng: &mut ChaCha8Rng) -> Option<(f64, f64)> {
    let (lo, hi) = region.bbox();
    for _ in 0..64 {
        let x = lo[0] + (hi[0] - lo[0]) * rng.random::<f64>();
        let y = lo[1] + (hi[1] - lo[1]) * rng.random::<f64>();
        if region.contains(x, y) {
            return Some((x, y));
        }
    }
    None
}

/// Uniform hash grid of accepted footprint disks, tagged with their index.
struct DiskGrid {
    cell: f64,
    max_r: f64,
    cells: HashMap<(i64, i64), Vec<(f64, f64, f64, usize)>>,
}

impl DiskGrid {
    /// `max_r` bounds every radius that will be inserted.
    fn new(max_r: f64) -> Self {
        Self {
            cell: 2.0 * max_r,
            max_r,
            cells: HashMap::new(),
        }
    }

    fn key(&self, x: f64, y: f64) -> (i64, i64) {
        ((x / self.cell).floor() as i64, (y / self.cell).floor() as i64)
    }

    fn overlaps(&self, x: f64, y: f64, r: f64) -> bool {
        self.near(x, y, r + self.max_r)
            .any(|(ox, oy, or, _)| (ox - x).hypot(oy - y) < r + or)
    }

    /// Disks whose center may lie within `reach` of `(x, y)`, in insertion
    /// order per cell.
    fn near(&self, x: f64, y: f64, reach: f64) -> impl Iterator<Item = (f64, f64, f64, usize)> + '_ {
        let (cx, cy) = self.key(x, y);
        let span = (reach / self.cell).ceil() as i64;
        (-span..=span)
            .flat_map(move |dx| (-span..=span).map(move |dy| (cx + dx, cy + dy)))
            .filter_map(|k| self.cells.get(&k))
            .flatten()
            .copied()
    }

    fn insert(&mut self, x: f64, y: f64, r: f64, index: usize) {
        let k = self.key(x, y);
        self.cells.entry(k).or_default().push((x, y, r, index));
    }
}

/// Statics followed by one posed template mesh per placement.
pub fn realize_scene(spec: &SceneSpec, placements: &[InstancePlacement]) -> Result<Vec<Primitive>> {
    let mut prims = spec.statics.clone();
    prims.reserve(placements.len());
    for p in placements {
        let class = spec
            .instance_classes
            .get(&p.class)
            .ok_or_else(|| Error::Schema(format!("unknown instance class '{}'", p.class)))?;
        let template = class.templates.get(p.template).ok_or_else(|| {
            Error::Schema(format!("class '{}' has no template {}", p.class, p.template))
        })?;
        prims.push(Primitive::mesh(
            template.mesh.clone(),
            Pose::from_yaw(p.yaw, p.position),
            class.label,
            p.instance_id,
        ));
    }
    Ok(prims)
}

// ---- file format -------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    name: String,
    rng_seed: u64,
    #[serde(default = "default_taxonomy")]
    taxonomy: String,
    #[serde(default)]
    trajectory_clearance: Option<f64>,
    #[serde(default)]
    require_sightline: bool,
    extents: ExtentsFile,
    #[serde(default)]
    sensor: SensorConfig,
    trajectory: TrajectoryFile,
    #[serde(default)]
    statics: Vec<StaticFile>,
    #[serde(default)]
    regions: Vec<RegionFile>,
    #[serde(default)]
    classes: BTreeMap<String, ClassFile>,
}

fn default_taxonomy() -> String {
    "carla-0.9.15".into()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtentsFile {
    min: [f64; 3],
    max: [f64; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryFile {
    /// `[t, x, y, z]` rows
    waypoints: Vec<[f64; 4]>,
}

#[derive(Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase", deny_unknown_fields)]
enum StaticFile {
    Box {
        label: String,
        center: [f64; 3],
        size: [f64; 3],
        #[serde(default)]
        yaw_deg: f64,
    },
    Cylinder {
        label: String,
        center: [f64; 3],
        radius: f64,
        height: f64,
    },
    Ground {
        label: String,
        center: [f64; 3],
        size: [f64; 2],
        #[serde(default)]
        yaw_deg: f64,
    },
    Mesh {
        label: String,
        path: PathBuf,
        center: [f64; 3],
        #[serde(default)]
        yaw_deg: f64,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionFile {
    polygon: Vec<[f64; 2]>,
    #[serde(default)]
    z: f64,
    classes: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassFile {
    label: String,
    templates: Vec<TemplateFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    mesh: PathBuf,
    footprint_radius: f64,
}

impl SceneFile {
    fn into_spec(self, base: &Path) -> Result<SceneSpec> {
        let taxonomy = LabelMap::builtin(&self.taxonomy)
            .ok_or_else(|| Error::Schema(format!("unknown taxonomy '{}'", self.taxonomy)))?
            .source;
        let label = |name: &str| {
            taxonomy
                .id_of(name)
                .ok_or_else(|| Error::Schema(format!("label '{name}' is not in {}", taxonomy.name)))
        };
        let v = |a: [f64; 3]| Vec3::new(a[0], a[1], a[2]);
        let mut meshes: HashMap<PathBuf, Arc<TriMesh>> = HashMap::new();
        let mut load_mesh = |rel: &Path| -> Result<Arc<TriMesh>> {
            let path = base.join(rel);
            if let Some(m) = meshes.get(&path) {
                return Ok(m.clone());
            }
            let m = Arc::new(TriMesh::load_obj(&path)?);
            meshes.insert(path, m.clone());
            Ok(m)
        };

        let mut statics = Vec::with_capacity(self.statics.len());
        for s in &self.statics {
            let prim = match s {
                StaticFile::Box {
                    label: l,
                    center,
                    size,
                    yaw_deg,
                } => Primitive::new(
                    Shape::Box {
                        half_extents: v(*size) * 0.5,
                    },
                    Pose::from_yaw(yaw_deg.to_radians(), v(*center)),
                    label(l)?,
                    0,
                ),
                StaticFile::Cylinder {
                    label: l,
                    center,
                    radius,
                    height,
                } => Primitive::new(
                    Shape::Cylinder {
                        radius: *radius,
                        half_height: height * 0.5,
                    },
                    Pose::from_yaw(0.0, v(*center)),
                    label(l)?,
                    0,
                ),
                StaticFile::Ground {
                    label: l,
                    center,
                    size,
                    yaw_deg,
                } => Primitive::new(
                    Shape::Ground {
                        half_x: size[0] * 0.5,
                        half_y: size[1] * 0.5,
                    },
                    Pose::from_yaw(yaw_deg.to_radians(), v(*center)),
                    label(l)?,
                    0,
                ),
                StaticFile::Mesh {
                    label: l,
                    path,
                    center,
                    yaw_deg,
                } => Primitive::mesh(
                    load_mesh(path)?,
                    Pose::from_yaw(yaw_deg.to_radians(), v(*center)),
                    label(l)?,
                    0,
                ),
            };
            statics.push(prim);
        }

        let mut instance_classes = BTreeMap::new();
        for (name, c) in &self.classes {
            let templates = c
                .templates
                .iter()
                .map(|t| {
                    Ok(InstanceTemplate {
                        mesh: load_mesh(&t.mesh)?,
                        footprint_radius: t.footprint_radius,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            instance_classes.insert(
                name.clone(),
                InstanceClass {
                    label: label(&c.label)?,
                    templates,
                },
            );
        }

        let spec = SceneSpec {
            name: self.name,
            rng_seed: self.rng_seed,
            taxonomy: self.taxonomy,
            extents: Aabb {
                min: v(self.extents.min),
                max: v(self.extents.max),
            },
            statics,
            placement_regions: self
                .regions
                .into_iter()
                .map(|r| PlacementRegion {
                    polygon: r.polygon,
                    z: r.z,
                    classes: r.classes,
                })
                .collect(),
            instance_classes,
            trajectory: Trajectory {
                waypoints: self
                    .trajectory
                    .waypoints
                    .iter()
                    .map(|w| (w[0], Vec3::new(w[1], w[2], w[3])))
                    .collect(),
            },
            trajectory_clearance: self.trajectory_clearance,
            require_sightline: self.require_sightline,
            sensor: self.sensor,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl InstancePlacement {
    pub fn center(&self) -> Point3 {
        Point3::from(self.position)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube_mesh() -> Arc<TriMesh> {
        let text = "v -0.5 -0.5 0\nv 0.5 -0.5 0\nv 0.5 0.5 0\nv -0.5 0.5 0\n\
                    v -0.5 -0.5 1\nv 0.5 -0.5 1\nv 0.5 0.5 1\nv -0.5 0.5 1\n\
                    f 1 2 3 4\nf 5 6 7 8\nf 1 2 6 5\nf 2 3 7 6\nf 3 4 8 7\nf 4 1 5 8\n";
        Arc::new(TriMesh::from_obj_str(text).unwrap())
    }

    pub(crate) fn open_field(size: f64) -> SceneSpec {
        let classes: BTreeMap<String, InstanceClass> = [
            ("person", 12u16, 0.4),
            ("bicycle", 19, 1.0),
            ("motorcycle", 18, 1.2),
            ("rider", 13, 1.0),
            ("truck", 15, 4.3),
            ("car", 14, 2.5),
        ]
        .into_iter()
        .map(|(n, l, r)| {
            (
                n.to_string(),
                InstanceClass {
                    label: l,
                    templates: vec![InstanceTemplate {
                        mesh: cube_mesh(),
                        footprint_radius: r,
                    }],
                },
            )
        })
        .collect();
        let h = size / 2.0;
        SceneSpec {
            name: "field".into(),
            rng_seed: 3,
            taxonomy: "carla-0.9.15".into(),
            extents: Aabb {
                min: Vec3::new(-h, -h, -1.0),
                max: Vec3::new(h, h, 50.0),
            },
            statics: vec![Primitive::new(
                Shape::Ground { half_x: h, half_y: h },
                Pose::identity(),
                10,
                0,
            )],
            placement_regions: vec![PlacementRegion {
                polygon: vec![[-h, -h], [h, -h], [h, h], [-h, h]],
                z: 0.0,
                classes: classes.keys().cloned().collect(),
            }],
            instance_classes: classes,
            trajectory: Trajectory {
                waypoints: vec![(0.0, Vec3::new(-h, 0.0, 1.7)), (10.0, Vec3::new(h, 0.0, 1.7))],
            },
            trajectory_clearance: Some(1.0),
            require_sightline: false,
            sensor: SensorConfig::default(),
        }
    }

    fn setting1() -> ClassTargets {
        [
            ("person", 198),
            ("bicycle", 64),
            ("motorcycle", 117),
            ("rider", 180),
            ("truck", 153),
            ("car", 287),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    #[test]
    fn zero_target_places_nothing() {
        let spec = open_field(100.0);
        let t: ClassTargets = [("person".to_string(), 0)].into_iter().collect();
        assert!(place_instances(&spec, &t, &[]).unwrap().is_empty());
    }

    #[test]
    fn setting1_counts_exact_and_disjoint() {
        let spec = open_field(400.0);
        let placed = place_instances(&spec, &setting1(), &[]).unwrap();
        for (class, n) in setting1() {
            assert_eq!(placed.iter().filter(|p| p.class == class).count(), n, "{class}");
        }
        for (i, a) in placed.iter().enumerate() {
            assert!(spec.trajectory.distance_2d(a.position.x, a.position.y) >= a.footprint_radius + 1.0);
            for b in &placed[i + 1..] {
                let d = (a.position.x - b.position.x).hypot(a.position.y - b.position.y);
                assert!(d >= a.footprint_radius + b.footprint_radius);
            }
        }
        let mut ids: Vec<u16> = placed.iter().map(|p| p.instance_id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), placed.len());
        assert!(ids[0] >= 1);
    }

    #[test]
    fn placement_is_seed_deterministic() {
        let spec = open_field(300.0);
        let a = place_instances(&spec, &setting1(), &[]).unwrap();
        let b = place_instances(&spec, &setting1(), &[]).unwrap();
        assert_eq!(a, b);
        let mut other = spec.clone();
        other.rng_seed = 4;
        assert_ne!(a, place_instances(&other, &setting1(), &[]).unwrap());
    }

    #[test]
    fn overfull_region_is_infeasible() {
        let spec = open_field(20.0);
        let t: ClassTargets = [("truck".to_string(), 50)].into_iter().collect();
        match place_instances(&spec, &t, &[]) {
            Err(Error::InfeasiblePlacement { class, target, .. }) => {
                assert_eq!(class, "truck");
                assert_eq!(target, 50);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn class_without_templates_rejected() {
        let spec = open_field(100.0);
        let t: ClassTargets = [("bus".to_string(), 1)].into_iter().collect();
        assert!(matches!(place_instances(&spec, &t, &[]), Err(Error::Schema(_))));
    }

    #[test]
    fn realize_counts() {
        let spec = open_field(200.0);
        assert_eq!(realize_scene(&spec, &[]).unwrap().len(), spec.statics.len());
        let t: ClassTargets = [("car".to_string(), 1)].into_iter().collect();
        let placed = place_instances(&spec, &t, &[]).unwrap();
        let prims = realize_scene(&spec, &placed).unwrap();
        assert_eq!(prims.len(), spec.statics.len() + 1);
        let elements: usize = prims.iter().map(Primitive::element_count).sum();
        assert_eq!(elements, spec.statics.len() + cube_mesh().triangles.len());

        let mut bad = placed.clone();
        bad[0].class = "zeppelin".into();
        assert!(matches!(realize_scene(&spec, &bad), Err(Error::Schema(_))));
    }

    #[test]
    fn realized_instance_sets_match_targets() {
        let spec = open_field(400.0);
        let placed = place_instances(&spec, &setting1(), &[]).unwrap();
        let prims = realize_scene(&spec, &placed).unwrap();
        for (class, n) in setting1() {
            let label = spec.instance_classes[&class].label;
            let mut ids: Vec<u16> = prims
                .iter()
                .filter(|p| p.semantic_label == label && p.instance_id != 0)
                .map(|p| p.instance_id)
                .collect();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), n, "{class}");
        }
    }

    #[test]
    fn trajectory_ticks_and_heading() {
        let tr = Trajectory {
            waypoints: vec![
                (0.0, Vec3::new(0.0, 0.0, 1.0)),
                (10.0, Vec3::new(10.0, 0.0, 1.0)),
                (20.0, Vec3::new(10.0, 10.0, 1.0)),
            ],
        };
        let poses = tr.tick_poses(4).unwrap();
        assert_eq!(poses.len(), 4);
        assert!((poses[1].translation - Vec3::new(5.0, 0.0, 1.0)).norm() < 1e-12);
        assert!((poses[3].translation - Vec3::new(10.0, 5.0, 1.0)).norm() < 1e-12);
        let heading = poses[3].rotation * Vec3::x();
        assert!((heading - Vec3::y()).norm() < 1e-12);
    }

    #[test]
    fn polygon_queries() {
        let r = PlacementRegion {
            polygon: vec![[0.0, 0.0], [4.0, 0.0], [4.0, 2.0], [0.0, 2.0]],
            z: 0.0,
            classes: vec![],
        };
        assert_eq!(r.area(), 8.0);
        assert!(r.contains(1.0, 1.0));
        assert!(!r.contains(5.0, 1.0));
    }
}
