//! Sequence-structured scan datasets: `<root>/<seq>/velodyne/%06d.bin`,
//! `<root>/<seq>/labels/%06d.label`, `poses.txt` and `meta.toml`.
//!
//! Point files hold little-endian `f32` quadruples `(x, y, z, 0.0)`. Label
//! files hold one little-endian `u32` per point: instance id in the high 16
//! bits, semantic id in the low 16.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::labelmap::{LabelMap, IGNORE, NUM_UNIFIED};
use crate::sensor::{Scan, SensorConfig};

/// Name recorded in `meta.toml` for the on-disk encoding above.
pub const FORMAT_NAME: &str = "kitti-bin-label";

const POINT_BYTES: usize = 16;
const LABEL_BYTES: usize = 4;

pub fn encode_points(scan: &Scan) -> Vec<u8> {
    let mut out = Vec::with_capacity(scan.len() * POINT_BYTES);
    for p in &scan.points {
        for v in [p[0], p[1], p[2], 0.0f32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn encode_labels(scan: &Scan) -> Vec<u8> {
    let mut out = Vec::with_capacity(scan.len() * LABEL_BYTES);
    for (&s, &i) in scan.semantic_labels.iter().zip(&scan.instance_ids) {
        let word = ((i as u32) << 16) | s as u32;
        out.extend_from_slice(&word.to_le_bytes());
    }
    out
}

/// Inverse of [`encode_points`] and [`encode_labels`]. The names are only
/// used in error messages.
pub fn decode_scan(points: &[u8], labels: &[u8], bin_name: &Path, label_name: &Path) -> Result<Scan> {
    if !points.len().is_multiple_of(POINT_BYTES) {
        return Err(Error::Format(format!(
            "{} has {} bytes, not a multiple of {POINT_BYTES} (paired with {})",
            bin_name.display(),
            points.len(),
            label_name.display()
        )));
    }
    if !labels.len().is_multiple_of(LABEL_BYTES) || labels.len() / LABEL_BYTES != points.len() / POINT_BYTES {
        return Err(Error::Format(format!(
            "{} holds {} points but {} holds {} bytes of labels",
            bin_name.display(),
            points.len() / POINT_BYTES,
            label_name.display(),
            labels.len()
        )));
    }
    let n = points.len() / POINT_BYTES;
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let mut scan = Scan {
        points: Vec::with_capacity(n),
        semantic_labels: Vec::with_capacity(n),
        instance_ids: Vec::with_capacity(n),
    };
    for (p, l) in points.chunks_exact(POINT_BYTES).zip(labels.chunks_exact(LABEL_BYTES)) {
        let word = u32::from_le_bytes([l[0], l[1], l[2], l[3]]);
        scan.push([f(&p[0..4]), f(&p[4..8]), f(&p[8..12])], word as u16, (word >> 16) as u16);
    }
    Ok(scan)
}

pub fn write_scan(scan: &Scan, bin: &Path, label: &Path) -> Result<()> {
    scan.check_lengths()?;
    fs::write(bin, encode_points(scan)).map_err(|e| Error::io(bin, e))?;
    fs::write(label, encode_labels(scan)).map_err(|e| Error::io(label, e))?;
    Ok(())
}

pub fn read_scan(bin: &Path, label: &Path) -> Result<Scan> {
    let points = fs::read(bin).map_err(|e| Error::io(bin, e))?;
    let labels = fs::read(label).map_err(|e| Error::io(label, e))?;
    decode_scan(&points, &labels, bin, label)
}

/// Contents of a sequence's `meta.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub format: String,
    /// Raw taxonomy of the semantic ids in the label files.
    pub taxonomy: String,
    pub scene: String,
    pub rng_seed: u64,
    pub n_scans: usize,
    pub sensor: SensorConfig,
}

/// One sequence directory.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub root: PathBuf,
    len: usize,
}

impl Sequence {
    /// Creates the directory skeleton; existing scan files are left alone.
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["velodyne", "labels"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(Sequence {
            root: root.to_path_buf(),
            len: 0,
        })
    }

    /// Opens an existing sequence and checks that point and label files form
    /// the same contiguous index range from 0.
    pub fn open(root: &Path) -> Result<Self> {
        let bins = scan_indices(&root.join("velodyne"), "bin")?;
        let labels = scan_indices(&root.join("labels"), "label")?;
        if bins != labels {
            return Err(Error::Format(format!(
                "{}: velodyne has {} scans but labels has {}",
                root.display(),
                bins.len(),
                labels.len()
            )));
        }
        if let Some((pos, &idx)) = bins.iter().enumerate().find(|&(pos, &idx)| pos as u64 != idx) {
            return Err(Error::Format(format!(
                "{}: scan indices are not contiguous from 0 (expected {pos}, found {idx})",
                root.display()
            )));
        }
        Ok(Sequence {
            root: root.to_path_buf(),
            len: bins.len(),
        })
    }

    pub fn name(&self) -> String {
        self.root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bin_path(&self, index: usize) -> PathBuf {
        self.root.join("velodyne").join(format!("{index:06}.bin"))
    }

    pub fn label_path(&self, index: usize) -> PathBuf {
        self.root.join("labels").join(format!("{index:06}.label"))
    }

    pub fn poses_path(&self) -> PathBuf {
        self.root.join("poses.txt")
    }

    pub fn meta_path(&self) -> PathBuf {
        self.root.join("meta.toml")
    }

    pub fn read(&self, index: usize) -> Result<Scan> {
        read_scan(&self.bin_path(index), &self.label_path(index))
    }

    pub fn write(&mut self, index: usize, scan: &Scan) -> Result<()> {
        write_scan(scan, &self.bin_path(index), &self.label_path(index))?;
        self.len = self.len.max(index + 1);
        Ok(())
    }

    pub fn write_poses(&self, poses: &[Pose]) -> Result<()> {
        let mut text = String::new();
        for p in poses {
            let row: Vec<String> = p.to_row_major_3x4().iter().map(|v| format!("{v:e}")).collect();
            text.push_str(&row.join(" "));
            text.push('\n');
        }
        let path = self.poses_path();
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read_poses(&self) -> Result<Vec<Pose>> {
        let path = self.poses_path();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut poses = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(&path, format!("line {}: {e}", n + 1)))?;
            let arr: [f64; 12] = vals.try_into().map_err(|v: Vec<f64>| {
                Error::parse(&path, format!("line {}: expected 12 values, got {}", n + 1, v.len()))
            })?;
            poses.push(
                Pose::from_row_major_3x4(&arr)
                    .map_err(|e| Error::parse(&path, format!("line {}: {e}", n + 1)))?,
            );
        }
        Ok(poses)
    }

    pub fn write_meta(&self, meta: &Meta) -> Result<()> {
        let path = self.meta_path();
        let text = toml::to_string(meta).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read_meta(&self) -> Result<Meta> {
        let path = self.meta_path();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(&path, e.message()))
    }
}

/// Sorted numeric stems of `*.ext` files in `dir`.
fn scan_indices(dir: &Path, ext: &str) -> Result<Vec<u64>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let idx = stem
            .parse()
            .ok()
            .filter(|_| stem.bytes().all(|b| b.is_ascii_digit()))
            .ok_or_else(|| Error::Format(format!("{}: not a scan index", path.display())))?;
        out.push(idx);
    }
    out.sort_unstable();
    Ok(out)
}

/// All sequences under a dataset root, in name order. A directory counts as
/// a sequence when it has a `velodyne` subdirectory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let mut dirs = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(root, e))?.path();
            if path.join("velodyne").is_dir() {
                dirs.push(path);
            }
        }
        dirs.sort();
        let sequences = dirs.iter().map(|d| Sequence::open(d)).collect::<Result<_>>()?;
        Ok(Dataset {
            root: root.to_path_buf(),
            sequences,
        })
    }

    pub fn scan_count(&self) -> usize {
        self.sequences.iter().map(Sequence::len).sum()
    }

    /// `(sequence position, scan index)` for every scan.
    pub fn scan_refs(&self) -> Vec<(usize, usize)> {
        self.sequences
            .iter()
            .enumerate()
            .flat_map(|(s, seq)| (0..seq.len()).map(move |k| (s, k)))
            .collect()
    }
}

/// Taxonomy name recorded for datasets whose labels are unified ids.
pub const UNIFIED_TAXONOMY: &str = "unified16";

/// Rewrites every label file of `input` into unified ids under `output`,
/// keeping instance ids and points. Poses are copied and the meta taxonomy
/// becomes [`UNIFIED_TAXONOMY`].
pub fn map_dataset(input: &Path, output: &Path, lm: &LabelMap) -> Result<usize> {
    let ds = Dataset::open(input)?;
    let mut outs = Vec::with_capacity(ds.sequences.len());
    for seq in &ds.sequences {
        let dst = Sequence::create(&output.join(seq.name()))?;
        if seq.poses_path().exists() {
            let to = dst.poses_path();
            fs::copy(seq.poses_path(), &to).map_err(|e| Error::io(&to, e))?;
        }
        if seq.meta_path().exists() {
            let mut meta = seq.read_meta()?;
            meta.taxonomy = UNIFIED_TAXONOMY.to_string();
            dst.write_meta(&meta)?;
        }
        outs.push(dst);
    }
    ds.scan_refs().into_par_iter().try_for_each(|(s, k)| {
        let mut scan = ds.sequences[s].read(k)?;
        let mapped = lm.map_labels(&scan.semantic_labels)?;
        scan.semantic_labels = mapped.into_iter().map(u16::from).collect();
        write_scan(&scan, &outs[s].bin_path(k), &outs[s].label_path(k))
    })?;
    Ok(ds.scan_count())
}

/// Per unified class tallies over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stats {
    pub scans: usize,
    pub points: [u64; NUM_UNIFIED],
    pub ignored_points: u64,
    /// Distinct `(sequence, class, instance id)` triples with a nonzero id.
    pub instances: [u64; NUM_UNIFIED],
}

#[derive(Default)]
struct Tally {
    scans: usize,
    points: [u64; NUM_UNIFIED],
    ignored: u64,
    instances: BTreeSet<(usize, u8, u16)>,
}

impl Tally {
    fn merge(mut self, other: Tally) -> Tally {
        self.scans += other.scans;
        for (a, b) in self.points.iter_mut().zip(other.points) {
            *a += b;
        }
        self.ignored += other.ignored;
        self.instances.extend(other.instances);
        self
    }
}

/// Maps every scan through `lm` and tallies points and distinct instances per
/// unified class. Scans are read in parallel.
pub fn stats(dataset: &Dataset, lm: &LabelMap) -> Result<Stats> {
    let tally = dataset
        .scan_refs()
        .into_par_iter()
        .map(|(s, k)| -> Result<Tally> {
            let scan = dataset.sequences[s].read(k)?;
            let mapped = lm.map_labels(&scan.semantic_labels)?;
            let mut t = Tally {
                scans: 1,
                ..Tally::default()
            };
            for (&c, &inst) in mapped.iter().zip(&scan.instance_ids) {
                if c == IGNORE {
                    t.ignored += 1;
                    continue;
                }
                t.points[c as usize] += 1;
                if inst != 0 {
                    t.instances.insert((s, c, inst));
                }
            }
            Ok(t)
        })
        .try_reduce(Tally::default, |a, b| Ok(a.merge(b)))?;
    let mut instances = [0u64; NUM_UNIFIED];
    for &(_, c, _) in &tally.instances {
        instances[c as usize] += 1;
    }
    Ok(Stats {
        scans: tally.scans,
        points: tally.points,
        ignored_points: tally.ignored,
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_point() -> Scan {
        let mut s = Scan::default();
        s.push([1.0, 2.0, 3.0], 5, 9);
        s
    }

    #[test]
    fn one_point_encoding() {
        let s = one_point();
        let bin = encode_points(&s);
        assert_eq!(bin.len(), 16);
        assert_eq!(&bin[0..4], &1.0f32.to_le_bytes());
        assert_eq!(&bin[12..16], &[0, 0, 0, 0]);
        assert_eq!(encode_labels(&s), 0x0009_0005u32.to_le_bytes());
    }

    #[test]
    fn truncated_bin_names_both_files() {
        let s = one_point();
        let bin = encode_points(&s);
        let err = decode_scan(&bin[..15], &encode_labels(&s), Path::new("a.bin"), Path::new("a.label"))
            .unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Format(_)));
        assert!(msg.contains("a.bin") && msg.contains("a.label"), "{msg}");
    }

    #[test]
    fn label_count_mismatch() {
        let s = one_point();
        let err = decode_scan(&encode_points(&s), &[0; 8], Path::new("x.bin"), Path::new("x.label"));
        assert!(matches!(err, Err(Error::Format(_))));
    }

    #[test]
    fn empty_scan_round_trip() {
        let s = Scan::default();
        assert!(encode_points(&s).is_empty());
        let back = decode_scan(&[], &[], Path::new("e.bin"), Path::new("e.label")).unwrap();
        assert!(back.is_empty());
    }
}
