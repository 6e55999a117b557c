//! Point dropout and coordinate jitter baselines.

use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset::{Dataset, Sequence};
use crate::error::{Error, Result};
use crate::rng::{derive_key, tag};
use crate::sensor::Scan;

pub const DEFAULT_KEEP: f64 = 0.8;
pub const DEFAULT_SIGMA: f64 = 0.01;
pub const DEFAULT_CLIP: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentOp {
    Dropout { keep: f64 },
    Jitter { sigma: f64, clip: f64 },
}

impl AugmentOp {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AugmentOp::Dropout { keep } => {
                if !(keep > 0.0 && keep <= 1.0) {
                    return Err(Error::Schema(format!("keep fraction must lie in (0, 1], got {keep}")));
                }
            }
            AugmentOp::Jitter { sigma, clip } => {
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::Schema(format!("sigma must be finite and >= 0, got {sigma}")));
                }
                if !(clip > 0.0 && clip.is_finite()) {
                    return Err(Error::Schema(format!("clip must be finite and > 0, got {clip}")));
                }
            }
        }
        Ok(())
    }

    fn name(&self) -> &'static str {
        match self {
            AugmentOp::Dropout { .. } => "dropout",
            AugmentOp::Jitter { .. } => "jitter",
        }
    }

    pub fn apply(&self, scan: &Scan, seed: u64) -> Result<Scan> {
        match *self {
            AugmentOp::Dropout { keep } => random_dropout(scan, keep, seed),
            AugmentOp::Jitter { sigma, clip } => jitter(scan, sigma, clip, seed),
        }
    }
}

/// Keeps `round(keep * N)` points drawn without replacement, in their
/// original order.
pub fn random_dropout(scan: &Scan, keep: f64, seed: u64) -> Result<Scan> {
    AugmentOp::Dropout { keep }.validate()?;
    let n = scan.len();
    let k = ((keep * n as f64).round() as usize).min(n);
    if k == n {
        return Ok(scan.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(scan.select(&picked))
}

/// Adds independent zero-mean Gaussian noise to every coordinate, redrawing
/// any sample outside `[-clip, clip]`.
pub fn jitter(scan: &Scan, sigma: f64, clip: f64, seed: u64) -> Result<Scan> {
    AugmentOp::Jitter { sigma, clip }.validate()?;
    if sigma == 0.0 {
        return Ok(scan.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Schema(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = scan.clone();
    for p in &mut out.points {
        for c in p.iter_mut() {
            let d = loop {
                let d: f64 = normal.sample(&mut rng);
                if d.abs() <= clip {
                    break d;
                }
            };
            *c = (*c as f64 + d) as f32;
        }
    }
    Ok(out)
}

/// Applies `op` to every scan of the dataset at `input`, writing the same
/// layout (poses and meta copied) under `output`. Each scan gets its own
/// seed derived from `seed`, the sequence name and the scan index.
pub fn augment_dataset(input: &Path, output: &Path, op: AugmentOp, seed: u64) -> Result<usize> {
    op.validate()?;
    let ds = Dataset::open(input)?;
    let mut outs = Vec::with_capacity(ds.sequences.len());
    for seq in &ds.sequences {
        let dst = Sequence::create(&output.join(seq.name()))?;
        for f in [seq.poses_path(), seq.meta_path()] {
            if f.exists() {
                let to = dst.root.join(f.file_name().unwrap_or_default());
                std::fs::copy(&f, &to).map_err(|e| Error::io(&to, e))?;
            }
        }
        outs.push(dst);
    }
    ds.scan_refs().into_par_iter().try_for_each(|(s, k)| {
        let src = &ds.sequences[s];
        let scan = src.read(k)?;
        let key = derive_key(&[tag(op.name()), seed, tag(&src.name()), k as u64]);
        let aug = op.apply(&scan, key)?;
        let dst = &outs[s];
        crate::dataset::write_scan(&aug, &dst.bin_path(k), &dst.label_path(k))
    })?;
    Ok(ds.scan_count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_scan(n: usize, seed: u64) -> Scan {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Scan::default();
        for _ in 0..n {
            let p = [
                rng.random_range(-80.0..80.0),
                rng.random_range(-80.0..80.0),
                rng.random_range(-3.0..5.0),
            ];
            s.push(p, rng.random_range(0..30), rng.random_range(0..50));
        }
        s
    }

    #[test]
    fn dropout_counts() {
        let s = random_scan(10, 1);
        let d = random_dropout(&s, 0.8, 7).unwrap();
        assert_eq!(d.len(), 8);
        assert_eq!(random_dropout(&s, 1.0, 7).unwrap(), s);
        assert_eq!(random_dropout(&s, 0.25, 7).unwrap().len(), 3);
        assert!(random_dropout(&Scan::default(), 0.5, 7).unwrap().is_empty());
    }

    #[test]
    fn dropout_keeps_rows_together() {
        let s = random_scan(500, 2);
        let d = random_dropout(&s, 0.6, 3).unwrap();
        for i in 0..d.len() {
            let j = s.points.iter().position(|p| *p == d.points[i]).unwrap();
            assert_eq!(s.semantic_labels[j], d.semantic_labels[i]);
            assert_eq!(s.instance_ids[j], d.instance_ids[i]);
        }
    }

    #[test]
    fn bad_parameters() {
        let s = random_scan(4, 0);
        assert!(random_dropout(&s, 0.0, 0).is_err());
        assert!(random_dropout(&s, 1.5, 0).is_err());
        assert!(jitter(&s, -0.1, 0.05, 0).is_err());
        assert!(jitter(&s, 0.01, 0.0, 0).is_err());
    }

    #[test]
    fn jitter_identity_and_labels() {
        let s = random_scan(100, 4);
        assert_eq!(jitter(&s, 0.0, 0.05, 1).unwrap(), s);
        let j = jitter(&s, 0.01, 0.05, 1).unwrap();
        assert_eq!(j.semantic_labels, s.semantic_labels);
        assert_eq!(j.instance_ids, s.instance_ids);
        assert_ne!(j.points, s.points);
    }
}
