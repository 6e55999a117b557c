//! Scene spec + targets -> one sequence on disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{Meta, Sequence, FORMAT_NAME};
use crate::error::{Error, Result};
use crate::scene::{ClassTargets, SceneSpec};
use crate::sensor::simulate_sequence;

#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub scans: usize,
    /// Replaces both the placement seed and the sensor seed.
    pub seed: Option<u64>,
    pub sequence: String,
    /// Drop the scene's sightline requirement; audits may then miss
    /// instances that no ray reaches.
    pub allow_hidden: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            scans: 100,
            seed: None,
            sequence: "00".to_string(),
            allow_hidden: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GenerateSummary {
    pub sequence: PathBuf,
    pub scans: usize,
    pub points: u64,
    pub min_points: usize,
    pub max_points: usize,
    pub instances: BTreeMap<String, usize>,
    pub rng_seed: u64,
}

/// Writes `opts.scans` scans, their poses and a meta file to
/// `out/<opts.sequence>`. The sequence directory must not hold any files
/// yet.
pub fn generate(spec: &SceneSpec, targets: &ClassTargets, opts: &GenerateOptions, out: &Path) -> Result<GenerateSummary> {
    let mut spec = spec.clone();
    if let Some(seed) = opts.seed {
        spec.rng_seed = seed;
        spec.sensor.rng_seed = seed;
    }
    if opts.allow_hidden {
        spec.require_sightline = false;
    }
    let root = out.join(&opts.sequence);
    if root.exists() && has_files(&root)? {
        return Err(Error::Schema(format!(
            "{} already holds files; refusing to overwrite",
            root.display()
        )));
    }
    let sim = simulate_sequence(&spec, targets, &spec.sensor, opts.scans)?;
    let seq = Sequence::create(&root)?;
    let counts: Vec<usize> = (0..sim.len())
        .into_par_iter()
        .map(|k| -> Result<usize> {
            let scan = sim.scan(k);
            crate::dataset::write_scan(&scan, &seq.bin_path(k), &seq.label_path(k))?;
            Ok(scan.len())
        })
        .collect::<Result<_>>()?;
    seq.write_poses(&sim.poses)?;
    seq.write_meta(&Meta {
        format: FORMAT_NAME.to_string(),
        taxonomy: spec.taxonomy.clone(),
        scene: spec.name.clone(),
        rng_seed: spec.rng_seed,
        n_scans: opts.scans,
        sensor: spec.sensor.clone(),
    })?;
    let mut instances = BTreeMap::new();
    for p in &sim.placements {
        *instances.entry(p.class.clone()).or_insert(0) += 1;
    }
    Ok(GenerateSummary {
        sequence: root,
        scans: counts.len(),
        points: counts.iter().map(|&c| c as u64).sum(),
        min_points: counts.iter().copied().min().unwrap_or(0),
        max_points: counts.iter().copied().max().unwrap_or(0),
        instances,
        rng_seed: spec.rng_seed,
    })
}

fn has_files(dir: &Path) -> Result<bool> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() || (path.is_dir() && has_files(&path)?) {
            return Ok(true);
        }
    }
    Ok(false)
}
