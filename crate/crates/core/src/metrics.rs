//! Confusion matrices, per-class IoU and mIoU.

use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::labelmap::{LabelMap, IGNORE, NUM_UNIFIED, UNIFIED_SHORT_NAMES};

/// Rows are ground truth, columns prediction. Points whose ground truth is
/// ignored are skipped; points with valid ground truth but an ignored
/// prediction land in `missed` and count as false negatives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    missed: Vec<u64>,
}

/// How classes with no ground truth and no predictions enter the mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ZeroUnion {
    #[default]
    Exclude,
    CountAsZero,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IouReport {
    /// `None` for a zero-union class under [`ZeroUnion::Exclude`].
    pub per_class: Vec<Option<f64>>,
    /// `None` when the matrix is empty.
    pub miou: Option<f64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            missed: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn missed(&self, gt: usize) -> u64 {
        self.missed[gt]
    }

    /// Evaluated points: every pair with valid ground truth.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.missed.iter().sum::<u64>()
    }

    /// Builds a matrix from explicit counts, `rows[gt][pred]`.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        let mut cm = Self::new(c);
        for (g, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::Shape(format!("row {g} has {} entries, expected {c}", row.len())));
            }
            cm.counts[g * c..(g + 1) * c].copy_from_slice(row);
        }
        Ok(cm)
    }

    pub fn accumulate(&mut self, gt: &[u8], pred: &[u8]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} ground-truth labels vs {} predictions",
                gt.len(),
                pred.len()
            )));
        }
        let c = self.classes;
        let check = |v: u8, what: &str| {
            if v != IGNORE && v as usize >= c {
                Err(Error::Schema(format!("{what} id {v} outside 0..{c}")))
            } else {
                Ok(())
            }
        };
        for (&g, &p) in gt.iter().zip(pred) {
            check(g, "ground-truth")?;
            check(p, "prediction")?;
            if g == IGNORE {
                continue;
            }
            if p == IGNORE {
                self.missed[g as usize] += 1;
            } else {
                self.counts[g as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!(
                "cannot merge {0}x{0} with {1}x{1}",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.missed.iter_mut().zip(&other.missed) {
            *a += b;
        }
        Ok(())
    }

    pub fn iou(&self, policy: ZeroUnion) -> IouReport {
        let c = self.classes;
        let mut per_class = Vec::with_capacity(c);
        for k in 0..c {
            let tp = self.get(k, k);
            let row: u64 = (0..c).map(|p| self.get(k, p)).sum::<u64>() + self.missed[k];
            let col: u64 = (0..c).map(|g| self.get(g, k)).sum();
            let union = row + col - tp;
            per_class.push(match (union, policy) {
                (0, ZeroUnion::Exclude) => None,
                (0, ZeroUnion::CountAsZero) => Some(0.0),
                _ => Some(tp as f64 / union as f64),
            });
        }
        let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if self.total() == 0 || scored.is_empty() {
            None
        } else {
            Some(scored.iter().sum::<f64>() / scored.len() as f64)
        };
        IouReport { per_class, miou }
    }
}

impl IouReport {
    pub fn miou_percent(&self) -> Option<f64> {
        self.miou.map(|m| 100.0 * m)
    }
}

impl fmt::Display for IouReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
        let names = UNIFIED_SHORT_NAMES.iter().map(|s| s.to_string());
        let headers: Vec<String> = if self.per_class.len() == NUM_UNIFIED {
            names.collect()
        } else {
            (0..self.per_class.len()).map(|k| k.to_string()).collect()
        };
        let cells: Vec<String> = self.per_class.iter().map(|&v| pct(v)).collect();
        let width = |k: usize| headers[k].len().max(cells[k].len());
        let mut head = String::new();
        let mut body = String::new();
        for k in 0..headers.len() {
            head.push_str(&format!("{:>w$} ", headers[k], w = width(k)));
            body.push_str(&format!("{:>w$} ", cells[k], w = width(k)));
        }
        writeln!(f, "{head}mIoU")?;
        write!(f, "{body}{:>4}", pct(self.miou))
    }
}

/// Confusion matrix over two datasets with the same sequences and scan
/// lengths. Ground truth goes through `gt_map`, predictions through
/// `pred_map`.
pub fn evaluate(gt: &Dataset, pred: &Dataset, gt_map: &LabelMap, pred_map: &LabelMap) -> Result<ConfusionMatrix> {
    let names = |d: &Dataset| d.sequences.iter().map(|s| (s.name(), s.len())).collect::<Vec<_>>();
    if names(gt) != names(pred) {
        return Err(Error::Shape(format!(
            "ground truth has sequences {:?} but predictions have {:?}",
            names(gt),
            names(pred)
        )));
    }
    gt.scan_refs()
        .into_par_iter()
        .map(|(s, k)| -> Result<ConfusionMatrix> {
            let g = gt.sequences[s].read(k)?;
            let p = pred.sequences[s].read(k)?;
            let mut cm = ConfusionMatrix::new(NUM_UNIFIED);
            cm.accumulate(&gt_map.map_labels(&g.semantic_labels)?, &pred_map.map_labels(&p.semantic_labels)?)
                .map_err(|e| match e {
                    Error::Shape(m) => Error::Shape(format!("{} scan {k}: {m}", gt.sequences[s].name())),
                    e => e,
                })?;
            Ok(cm)
        })
        .try_reduce(
            || ConfusionMatrix::new(NUM_UNIFIED),
            |mut a, b| {
                a.merge(&b)?;
                Ok(a)
            },
        )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_matrix() {
        let cm = ConfusionMatrix::from_rows(&[vec![5, 1, 0], vec![2, 7, 1], vec![0, 0, 4]]).unwrap();
        let r = cm.iou(ZeroUnion::Exclude);
        let want = [5.0 / 8.0, 7.0 / 11.0, 4.0 / 5.0];
        for (got, w) in r.per_class.iter().zip(want) {
            assert_eq!(got.unwrap(), w);
        }
        assert_eq!(r.miou.unwrap(), (5.0 / 8.0 + 7.0 / 11.0 + 4.0 / 5.0) / 3.0);
    }

    #[test]
    fn ignore_semantics() {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&[255, 0], &[3, 0]).unwrap();
        assert_eq!(cm.total(), 1);
        assert_eq!(cm.get(0, 0), 1);
        cm.accumulate(&[1], &[255]).unwrap();
        assert_eq!(cm.missed(1), 1);
        assert_eq!(cm.iou(ZeroUnion::Exclude).per_class[1], Some(0.0));
    }

    #[test]
    fn errors() {
        let mut cm = ConfusionMatrix::new(3);
        assert!(matches!(cm.accumulate(&[0, 1], &[0]), Err(Error::Shape(_))));
        assert!(matches!(cm.accumulate(&[3], &[0]), Err(Error::Schema(_))));
        assert!(matches!(cm.accumulate(&[0], &[7]), Err(Error::Schema(_))));
        assert!(matches!(cm.merge(&ConfusionMatrix::new(4)), Err(Error::Shape(_))));
    }

    #[test]
    fn empty_and_policies() {
        let cm = ConfusionMatrix::new(3);
        assert_eq!(cm.iou(ZeroUnion::Exclude).miou, None);
        assert_eq!(cm.iou(ZeroUnion::CountAsZero).miou, None);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1], &[0, 1]).unwrap();
        assert_eq!(cm.iou(ZeroUnion::Exclude).miou, Some(1.0));
        assert_eq!(cm.iou(ZeroUnion::Exclude).miou_percent(), Some(100.0));
        let zero = cm.iou(ZeroUnion::CountAsZero);
        assert_eq!(zero.per_class[2], Some(0.0));
        assert_eq!(zero.miou, Some(2.0 / 3.0));
    }

    #[test]
    fn disjoint_class_scores_zero() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0, 1], &[1, 1, 1]).unwrap();
        assert_eq!(cm.iou(ZeroUnion::Exclude).per_class[0], Some(0.0));
    }
}
