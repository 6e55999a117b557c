//! Spinning multi-channel LiDAR simulation.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Bvh, Point3, Pose, Ray, Vec3, DEFAULT_T_MIN};
use crate::rng::{tag, CounterRng};
use crate::scene::{place_instances, realize_scene, ClassTargets, InstancePlacement, SceneSpec};

/// Sensor model parameters. Defaults follow the common 64-beam spinning unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub n_channels: u32,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub azimuth_step_deg: f64,
    pub range_min: f64,
    pub range_max: f64,
    pub range_noise_sigma: f64,
    pub ray_drop_prob: f64,
    pub rng_seed: u64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            n_channels: 64,
            elevation_min_deg: -24.9,
            elevation_max_deg: 2.0,
            azimuth_step_deg: 0.18,
            range_min: 1.0,
            range_max: 120.0,
            range_noise_sigma: 0.0,
            ray_drop_prob: 0.0,
            rng_seed: 0,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Schema(format!("sensor: {m}")));
        if self.n_channels == 0 {
            return fail("n_channels must be at least 1");
        }
        if !(self.azimuth_step_deg > 0.0) {
            return fail("azimuth_step_deg must be positive");
        }
        let steps = 360.0 / self.azimuth_step_deg;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return fail("azimuth_step_deg must divide 360");
        }
        if !(0.0..1.0).contains(&self.ray_drop_prob) {
            return fail("ray_drop_prob must lie in [0, 1)");
        }
        if !(self.range_min >= 0.0 && self.range_min < self.range_max && self.range_max.is_finite()) {
            return fail("need 0 <= range_min < range_max < inf");
        }
        if !(self.range_noise_sigma >= 0.0 && self.range_noise_sigma.is_finite()) {
            return fail("range_noise_sigma must be non-negative");
        }
        if !(self.elevation_min_deg <= self.elevation_max_deg)
            || self.elevation_min_deg < -90.0
            || self.elevation_max_deg > 90.0
        {
            return fail("elevation bounds must satisfy -90 <= min <= max <= 90");
        }
        Ok(())
    }

    pub fn n_azimuth(&self) -> u32 {
        (360.0 / self.azimuth_step_deg).round() as u32
    }

    /// Rays cast per revolution.
    pub fn ray_budget(&self) -> usize {
        self.n_channels as usize * self.n_azimuth() as usize
    }

    /// Channel elevations in degrees, from the top beam down, evenly spaced.
    pub fn elevations_deg(&self) -> Vec<f64> {
        let n = self.n_channels as usize;
        if n == 1 {
            return vec![self.elevation_max_deg];
        }
        let step = (self.elevation_max_deg - self.elevation_min_deg) / (n - 1) as f64;
        (0..n)
            .map(|k| self.elevation_max_deg - step * k as f64)
            .collect()
    }

    /// Unit beam direction in the sensor frame.
    pub fn beam_direction(&self, channel: u32, azimuth: u32) -> Vec3 {
        let e = self.elevations_deg()[channel as usize].to_radians();
        let a = (azimuth as f64 * self.azimuth_step_deg).to_radians();
        Vec3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin())
    }
}

/// One revolution of labeled returns, in the sensor frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scan {
    pub points: Vec<[f32; 3]>,
    pub semantic_labels: Vec<u16>,
    pub instance_ids: Vec<u16>,
}

impl Scan {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn check_lengths(&self) -> Result<()> {
        if self.points.len() != self.semantic_labels.len() || self.points.len() != self.instance_ids.len() {
            return Err(Error::Shape(format!(
                "scan arrays differ in length: {} points, {} labels, {} instance ids",
                self.points.len(),
                self.semantic_labels.len(),
                self.instance_ids.len()
            )));
        }
        Ok(())
    }

    pub fn push(&mut self, p: [f32; 3], semantic: u16, instance: u16) {
        self.points.push(p);
        self.semantic_labels.push(semantic);
        self.instance_ids.push(instance);
    }

    /// Keeps the points at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Scan {
        Scan {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            semantic_labels: indices.iter().map(|&i| self.semantic_labels[i]).collect(),
            instance_ids: indices.iter().map(|&i| self.instance_ids[i]).collect(),
        }
    }
}

/// Casts one full revolution from `pose`.
///
/// Per-ray randomness is keyed on (rng_seed, scan_index, channel, azimuth),
/// so the result does not depend on evaluation order.
pub fn simulate_scan(bvh: Option<&Bvh>, pose: &Pose, cfg: &SensorConfig, scan_index: u64) -> Scan {
    let mut scan = Scan::default();
    let Some(bvh) = bvh else {
        return scan;
    };
    let n_az = cfg.n_azimuth();
    let elev: Vec<(f64, f64)> = cfg
        .elevations_deg()
        .iter()
        .map(|e| {
            let r = e.to_radians();
            (r.cos(), r.sin())
        })
        .collect();
    let azim: Vec<(f64, f64)> = (0..n_az)
        .map(|j| {
            let r = (j as f64 * cfg.azimuth_step_deg).to_radians();
            (r.cos(), r.sin())
        })
        .collect();
    let origin = Point3::from(pose.translation);
    let stochastic = cfg.ray_drop_prob > 0.0 || cfg.range_noise_sigma > 0.0;
    let ray_tag = tag("ray");
    scan.points.reserve(cfg.ray_budget());
    for (ch, &(ce, se)) in elev.iter().enumerate() {
        for (az, &(ca, sa)) in azim.iter().enumerate() {
            let local = Vec3::new(ce * ca, ce * sa, se);
            let ray = Ray {
                origin,
                dir: nalgebra::Unit::new_unchecked(pose.rotation * local),
            };
            let Some(hit) = bvh.intersect(&ray, DEFAULT_T_MIN, cfg.range_max) else {
                continue;
            };
            let mut range = hit.t;
            if stochastic {
                let mut rng = CounterRng::new(&[ray_tag, cfg.rng_seed, scan_index, ch as u64, az as u64]);
                if rng.unit() < cfg.ray_drop_prob {
                    continue;
                }
                if cfg.range_noise_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    range += cfg.range_noise_sigma * z;
                }
            }
            if range < cfg.range_min || range > cfg.range_max {
                continue;
            }
            let p = local * range;
            scan.push([p.x as f32, p.y as f32, p.z as f32], hit.semantic_label, hit.instance_id);
        }
    }
    scan
}

/// A realized scene plus sensor poses; scans are produced on demand.
pub struct SequenceSimulator {
    pub placements: Vec<InstancePlacement>,
    pub poses: Vec<Pose>,
    pub config: SensorConfig,
    bvh: Option<Bvh>,
}

impl SequenceSimulator {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn bvh(&self) -> Option<&Bvh> {
        self.bvh.as_ref()
    }

    pub fn scan(&self, index: usize) -> Scan {
        simulate_scan(self.bvh.as_ref(), &self.poses[index], &self.config, index as u64)
    }

    /// Lazily simulated scans in index order.
    pub fn iter(&self) -> impl Iterator<Item = Scan> + '_ {
        (0..self.len()).map(move |k| self.scan(k))
    }

    pub fn par_iter(&self) -> impl IndexedParallelIterator<Item = Scan> + '_ {
        (0..self.len()).into_par_iter().map(move |k| self.scan(k))
    }
}

/// Places instances, builds the acceleration structure and samples `n_scans`
/// evenly timed poses along the trajectory.
pub fn simulate_sequence(
    spec: &SceneSpec,
    targets: &ClassTargets,
    cfg: &SensorConfig,
    n_scans: usize,
) -> Result<SequenceSimulator> {
    if n_scans == 0 {
        return Err(Error::Schema("n_scans must be at least 1".into()));
    }
    cfg.validate()?;
    let poses = spec.trajectory.tick_poses(n_scans)?;
    let viewpoints: Vec<Point3> = poses.iter().map(|p| Point3::from(p.translation)).collect();
    let placements = place_instances(spec, targets, &viewpoints)?;
    let primitives = realize_scene(spec, &placements)?;
    let bvh = match Bvh::build(&primitives) {
        Ok(b) => Some(b),
        Err(Error::EmptyScene) => None,
        Err(e) => return Err(e),
    };
    Ok(SequenceSimulator {
        placements,
        poses,
        config: cfg.clone(),
        bvh,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{intersect_linear, Primitive, Shape};

    fn ground(z: f64) -> Vec<Primitive> {
        vec![Primitive::new(
            Shape::Ground {
                half_x: 1e6,
                half_y: 1e6,
            },
            Pose::from_yaw(0.0, Vec3::new(0.0, 0.0, z)),
            1,
            0,
        )]
    }

    #[test]
    fn defaults_are_valid() {
        let cfg = SensorConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_azimuth(), 2000);
        assert_eq!(cfg.ray_budget(), 128_000);
        let e = cfg.elevations_deg();
        assert_eq!(e[0], 2.0);
        assert!((e[63] + 24.9).abs() < 1e-12);
    }

    #[test]
    fn bad_azimuth_step_rejected() {
        let cfg = SensorConfig {
            azimuth_step_deg: 0.17,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_scene_gives_empty_scan() {
        let s = simulate_scan(None, &Pose::identity(), &SensorConfig::default(), 0);
        assert!(s.is_empty());
    }

    #[test]
    fn ground_plane_matches_closed_form() {
        let height = 2.0;
        let cfg = SensorConfig::default();
        let bvh = Bvh::build(&ground(0.0)).unwrap();
        let pose = Pose::from_yaw(0.0, Vec3::new(0.0, 0.0, height));
        let scan = simulate_scan(Some(&bvh), &pose, &cfg, 0);

        // Independent per-channel oracle: a beam at elevation e < 0 meets the
        // plane at range h / sin(-e).
        let mut per_channel = vec![0usize; 64];
        for p in &scan.points {
            let e = (p[2] as f64 / (p[0] as f64).hypot(p[1] as f64).hypot(p[2] as f64)).asin().to_degrees();
            let ch = cfg
                .elevations_deg()
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - e).abs().total_cmp(&(b.1 - e).abs()))
                .unwrap()
                .0;
            per_channel[ch] += 1;
        }
        for (ch, e) in cfg.elevations_deg().iter().enumerate() {
            let expected = if *e < 0.0 {
                let r = height / (-e.to_radians()).sin();
                if (cfg.range_min..=cfg.range_max).contains(&r) {
                    2000
                } else {
                    0
                }
            } else {
                0
            };
            assert_eq!(per_channel[ch], expected, "channel {ch} at {e} deg");
        }
    }

    #[test]
    fn label_fidelity_and_range_bound() {
        let mut prims = ground(0.0);
        prims.push(Primitive::new(
            Shape::Box {
                half_extents: Vec3::new(1.0, 1.0, 1.0),
            },
            Pose::from_yaw(0.3, Vec3::new(6.0, 1.0, 1.0)),
            14,
            3,
        ));
        let cfg = SensorConfig {
            n_channels: 16,
            azimuth_step_deg: 1.0,
            ..Default::default()
        };
        let bvh = Bvh::build(&prims).unwrap();
        let pose = Pose::from_yaw(0.2, Vec3::new(0.0, 0.0, 1.7));
        let scan = simulate_scan(Some(&bvh), &pose, &cfg, 4);
        assert!(scan.instance_ids.contains(&3));
        assert!(scan.len() <= cfg.ray_budget());
        for (i, p) in scan.points.iter().enumerate() {
            let v = Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64);
            let r = v.norm();
            assert!(r >= cfg.range_min - 1e-4 && r <= cfg.range_max + 1e-4);
            let ray = Ray::new(Point3::from(pose.translation), pose.rotation * v).unwrap();
            let hit = intersect_linear(&prims, &ray, DEFAULT_T_MIN, cfg.range_max).unwrap();
            assert_eq!((hit.semantic_label, hit.instance_id), (scan.semantic_labels[i], scan.instance_ids[i]));
        }
    }

    #[test]
    fn noise_and_drop_are_deterministic_per_scan_index() {
        let cfg = SensorConfig {
            n_channels: 8,
            azimuth_step_deg: 2.0,
            range_noise_sigma: 0.05,
            ray_drop_prob: 0.3,
            rng_seed: 11,
            ..Default::default()
        };
        let bvh = Bvh::build(&ground(0.0)).unwrap();
        let pose = Pose::from_yaw(0.0, Vec3::new(0.0, 0.0, 2.0));
        let a = simulate_scan(Some(&bvh), &pose, &cfg, 5);
        let b = simulate_scan(Some(&bvh), &pose, &cfg, 5);
        let c = simulate_scan(Some(&bvh), &pose, &cfg, 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let full = SensorConfig {
            range_noise_sigma: 0.0,
            ray_drop_prob: 0.0,
            ..cfg.clone()
        };
        let kept = a.len() as f64 / simulate_scan(Some(&bvh), &pose, &full, 5).len() as f64;
        assert!((kept - 0.7).abs() < 0.1, "kept fraction {kept}");
    }
}
