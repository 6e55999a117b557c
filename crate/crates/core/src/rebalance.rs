//! Per-class instance-count plans and dataset audits against them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{self, Dataset};
use crate::error::{Error, Result};
use crate::labelmap::{LabelMap, UNIFIED_CLASSES, UNIFIED_SHORT_NAMES};

/// Instance count per unified class name.
pub type ClassCounts = BTreeMap<String, usize>;

pub const DEFAULT_RARE: [&str; 5] = ["person", "bicycle", "motorcycle", "rider", "truck"];

const TABLE_CLASSES: [&str; 6] = ["car", "person", "bicycle", "motorcycle", "rider", "truck"];

fn counts(values: [usize; 6]) -> ClassCounts {
    TABLE_CLASSES.iter().map(|c| c.to_string()).zip(values).collect()
}

/// Instances in the real benchmark's training split.
pub fn baseline_counts() -> ClassCounts {
    counts([1950, 139, 128, 57, 60, 28])
}

pub fn setting1_additions() -> ClassCounts {
    counts([287, 198, 64, 117, 180, 153])
}

pub fn setting2_additions() -> ClassCounts {
    counts([436, 222, 164, 178, 342, 40])
}

/// Full unified class name for a full or abbreviated name.
pub fn canonical_class(name: &str) -> Option<&'static str> {
    UNIFIED_CLASSES
        .iter()
        .zip(UNIFIED_SHORT_NAMES)
        .find(|(full, short)| **full == name || *short == name)
        .map(|(full, _)| *full)
}

fn canonicalize(counts: &ClassCounts, what: &str) -> Result<ClassCounts> {
    let mut out = ClassCounts::new();
    for (name, &n) in counts {
        let c = canonical_class(name)
            .ok_or_else(|| Error::Schema(format!("{what}: unknown class '{name}'")))?;
        if out.insert(c.to_string(), n).is_some() {
            return Err(Error::Schema(format!("{what}: class '{c}' given twice")));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RebalancePlan {
    pub baseline: ClassCounts,
    pub additions: ClassCounts,
    /// `baseline + additions` per class.
    pub resulting: ClassCounts,
    pub rare_classes: BTreeSet<String>,
}

impl RebalancePlan {
    fn rare_sum(&self, counts: &ClassCounts) -> usize {
        self.rare_classes.iter().filter_map(|c| counts.get(c)).sum()
    }

    pub fn rare_total_before(&self) -> usize {
        self.rare_sum(&self.baseline)
    }

    pub fn rare_total_after(&self) -> usize {
        self.rare_sum(&self.resulting)
    }

    pub fn rare_added(&self) -> usize {
        self.rare_sum(&self.additions)
    }

    /// Plan file: `[baseline]` and `[additions]` tables of counts plus an
    /// optional `rare` list.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let f: PlanFile = toml::from_str(text).map_err(|e| Error::Schema(e.message().to_string()))?;
        let rare = match f.rare {
            Some(r) => r,
            None => DEFAULT_RARE.iter().map(|s| s.to_string()).collect(),
        };
        plan(&f.baseline, &f.additions, &rare)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Schema(m) => Error::parse(path, m),
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> String {
        let f = PlanFile {
            baseline: self.baseline.clone(),
            additions: self.additions.clone(),
            rare: Some(self.rare_classes.iter().cloned().collect()),
        };
        toml::to_string(&f).expect("plan serializes")
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    rare: Option<Vec<String>>,
    #[serde(default)]
    baseline: ClassCounts,
    #[serde(default)]
    additions: ClassCounts,
}

/// Adds `additions` to `baseline` class by class; classes missing from
/// either side count as zero.
pub fn plan(baseline: &ClassCounts, additions: &ClassCounts, rare: &[String]) -> Result<RebalancePlan> {
    let baseline = canonicalize(baseline, "baseline")?;
    let additions = canonicalize(additions, "additions")?;
    let mut rare_classes = BTreeSet::new();
    for r in rare {
        let c = canonical_class(r).ok_or_else(|| Error::Schema(format!("rare: unknown class '{r}'")))?;
        rare_classes.insert(c.to_string());
    }
    let mut resulting = baseline.clone();
    for (c, &n) in &additions {
        *resulting.entry(c.clone()).or_insert(0) += n;
    }
    let mut baseline = baseline;
    let mut additions = additions;
    for c in resulting.keys() {
        baseline.entry(c.clone()).or_insert(0);
        additions.entry(c.clone()).or_insert(0);
    }
    Ok(RebalancePlan {
        baseline,
        additions,
        resulting,
        rare_classes,
    })
}

/// Flat `class = count` table.
pub fn counts_from_toml_str(text: &str) -> Result<ClassCounts> {
    let raw: ClassCounts = toml::from_str(text).map_err(|e| Error::Schema(e.message().to_string()))?;
    canonicalize(&raw, "counts")
}

pub fn load_counts(path: &Path) -> Result<ClassCounts> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    counts_from_toml_str(&text).map_err(|e| match e {
        Error::Schema(m) => Error::parse(path, m),
        e => e,
    })
}

/// Generation targets from either a flat counts file or a plan file (its
/// additions).
pub fn load_targets(path: &Path) -> Result<ClassCounts> {
    load_section(path, |p| p.additions)
}

/// Baseline counts from either a flat counts file or a plan file.
pub fn load_baseline(path: &Path) -> Result<ClassCounts> {
    load_section(path, |p| p.baseline)
}

fn load_section(path: &Path, pick: fn(RebalancePlan) -> ClassCounts) -> Result<ClassCounts> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| Error::parse(path, e.message()))?;
    let result = if table.contains_key("additions") || table.contains_key("baseline") {
        RebalancePlan::from_toml_str(&text).map(pick)
    } else {
        counts_from_toml_str(&text)
    };
    result.map_err(|e| match e {
        Error::Schema(m) => Error::parse(path, m),
        e => e,
    })
}

impl fmt::Display for RebalancePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>9} {:>9} {:>10}  rare", "class", "baseline", "addition", "resulting")?;
        for (c, &r) in &self.resulting {
            let mark = if self.rare_classes.contains(c) { "*" } else { "" };
            writeln!(f, "{c:<14} {:>9} {:>9} {r:>10}  {mark}", self.baseline[c], self.additions[c])?;
        }
        write!(
            f,
            "rare total: {} -> {} (+{})",
            self.rare_total_before(),
            self.rare_total_after(),
            self.rare_added()
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditRow {
    pub class: String,
    pub baseline: usize,
    pub addition: usize,
    pub resulting: usize,
    pub realized: usize,
}

impl AuditRow {
    pub fn matches(&self) -> bool {
        self.realized == self.addition
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub scans: usize,
    pub rows: Vec<AuditRow>,
}

impl AuditReport {
    pub fn mismatches(&self) -> Vec<&AuditRow> {
        self.rows.iter().filter(|r| !r.matches()).collect()
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<14} {:>9} {:>9} {:>10} {:>9}",
            "class", "baseline", "addition", "resulting", "realized"
        )?;
        for r in &self.rows {
            let flag = if r.matches() { "" } else { "  MISMATCH" };
            writeln!(
                f,
                "{:<14} {:>9} {:>9} {:>10} {:>9}{flag}",
                r.class, r.baseline, r.addition, r.resulting, r.realized
            )?;
        }
        write!(f, "{} scans, {} mismatches", self.scans, self.mismatches().len())
    }
}

/// Counts distinct instance ids per unified class across every sequence and
/// compares them with the planned additions. Each sequence is mapped with the
/// shipped label map for the taxonomy named in its meta file.
pub fn audit(root: &Path, plan: &RebalancePlan) -> Result<AuditReport> {
    let ds = Dataset::open(root)?;
    let mut realized: ClassCounts = ClassCounts::new();
    let mut scans = 0;
    for seq in &ds.sequences {
        let meta = seq.read_meta()?;
        let lm = LabelMap::builtin(&meta.taxonomy).ok_or_else(|| {
            Error::Schema(format!(
                "{}: no shipped label map for taxonomy '{}'",
                seq.meta_path().display(),
                meta.taxonomy
            ))
        })?;
        let single = Dataset {
            root: ds.root.clone(),
            sequences: vec![seq.clone()],
        };
        let st = dataset::stats(&single, &lm)?;
        scans += st.scans;
        for (c, &n) in UNIFIED_CLASSES.iter().zip(&st.instances) {
            if n > 0 {
                *realized.entry(c.to_string()).or_insert(0) += n as usize;
            }
        }
    }
    let classes: BTreeSet<&String> = plan.resulting.keys().chain(realized.keys()).collect();
    let rows = classes
        .into_iter()
        .map(|c| AuditRow {
            class: c.clone(),
            baseline: plan.baseline.get(c).copied().unwrap_or(0),
            addition: plan.additions.get(c).copied().unwrap_or(0),
            resulting: plan.resulting.get(c).copied().unwrap_or(0),
            realized: realized.get(c).copied().unwrap_or(0),
        })
        .collect();
    Ok(AuditReport { scans, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rare() -> Vec<String> {
        DEFAULT_RARE.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn rare_totals() {
        let b = baseline_counts();
        assert_eq!(plan(&b, &ClassCounts::new(), &rare()).unwrap().rare_total_after(), 412);
        let p1 = plan(&b, &setting1_additions(), &rare()).unwrap();
        assert_eq!((p1.rare_total_before(), p1.rare_total_after()), (412, 1124));
        assert_eq!(plan(&b, &setting2_additions(), &rare()).unwrap().rare_total_after(), 1358);
    }

    #[test]
    fn resulting_is_sum() {
        let p = plan(&baseline_counts(), &setting1_additions(), &rare()).unwrap();
        for (c, &r) in &p.resulting {
            assert_eq!(r - p.baseline[c], p.additions[c]);
        }
        assert_eq!(p.resulting["car"], 1950 + 287);
    }

    #[test]
    fn short_names_and_unknown_classes() {
        let a: ClassCounts = [("bi.cle".to_string(), 3)].into();
        assert_eq!(plan(&ClassCounts::new(), &a, &[]).unwrap().additions["bicycle"], 3);
        let bad: ClassCounts = [("unicorn".to_string(), 1)].into();
        assert!(matches!(plan(&ClassCounts::new(), &bad, &[]), Err(Error::Schema(_))));
    }

    #[test]
    fn shipped_plans_match_presets() {
        let s1 = RebalancePlan::from_toml_str(include_str!("../../../data/plans/setting1.toml")).unwrap();
        let s2 = RebalancePlan::from_toml_str(include_str!("../../../data/plans/setting2.toml")).unwrap();
        assert_eq!(s1, plan(&baseline_counts(), &setting1_additions(), &rare()).unwrap());
        assert_eq!(s2, plan(&baseline_counts(), &setting2_additions(), &rare()).unwrap());
        let b = counts_from_toml_str(include_str!("../../../data/plans/baseline.toml")).unwrap();
        assert_eq!(b, baseline_counts());
    }

    #[test]
    fn plan_file_round_trip() {
        let p = plan(&baseline_counts(), &setting2_additions(), &rare()).unwrap();
        assert_eq!(RebalancePlan::from_toml_str(&p.to_toml_string()).unwrap(), p);
    }
}
