//! Raw taxonomies and their mapping onto the 16 unified classes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unified class names; the position is the unified id.
pub const UNIFIED_CLASSES: [&str; 16] = [
    "car",
    "road",
    "building",
    "person",
    "bicycle",
    "motorcycle",
    "rider",
    "truck",
    "sidewalk",
    "fence",
    "vegetation",
    "terrain",
    "pole",
    "traffic-sign",
    "other-ground",
    "other-vehicle",
];

/// Column headers used in result tables.
pub const UNIFIED_SHORT_NAMES: [&str; 16] = [
    "car",
    "road",
    "build.",
    "person",
    "bi.cle",
    "mt.cle",
    "rider",
    "truck",
    "sidew.",
    "fence",
    "veget.",
    "terra.",
    "pole",
    "traffic-sign",
    "oth-g.",
    "oth-v.",
];

pub const NUM_UNIFIED: usize = UNIFIED_CLASSES.len();
pub const IGNORE: u8 = 255;

/// Source sets merged into one unified class for real-world data.
pub const REAL_MERGES: [(&[&str], &str); 3] = [
    (&["bicyclist", "motorcyclist"], "rider"),
    (&["parking", "other-ground"], "other-ground"),
    (&["vegetation", "trunk"], "vegetation"),
];

pub fn unified_id(name: &str) -> Option<u8> {
    UNIFIED_CLASSES.iter().position(|&c| c == name).map(|i| i as u8)
}

pub fn unified_name(id: u8) -> Option<&'static str> {
    UNIFIED_CLASSES.get(id as usize).copied()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaxonomyKind {
    Synthetic,
    Real,
    Unified,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    pub name: String,
    pub kind: TaxonomyKind,
    pub entries: BTreeMap<u16, String>,
}

impl Taxonomy {
    pub fn id_of(&self, name: &str) -> Option<u16> {
        self.entries
            .iter()
            .find_map(|(&id, n)| (n == name).then_some(id))
    }

    pub fn name_of(&self, id: u16) -> Option<&str> {
        self.entries.get(&id).map(String::as_str)
    }
}

/// Disposition table from raw ids to unified ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub source: Taxonomy,
    pub rules: BTreeMap<u16, u8>,
    pub ignore: BTreeSet<u16>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Violation {
    /// Raw id with neither a rule nor an ignore entry.
    Missing { id: u16 },
    /// Raw id listed both as a rule and as ignored.
    Conflict { id: u16 },
    /// Rule or ignore entry for an id the taxonomy does not define.
    UnknownId { id: u16 },
    /// Unified target outside 0..16.
    BadTarget { id: u16, target: u8 },
    /// A required merge source is absent or routed elsewhere.
    Merge {
        source: String,
        expected: String,
        found: Option<String>,
    },
    /// Synthetic taxonomies reserve id 0 for unlabeled points.
    Unlabeled,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Missing { id } => write!(f, "totality: raw id {id} has no disposition"),
            Violation::Conflict { id } => {
                write!(f, "disjointness: raw id {id} is both mapped and ignored")
            }
            Violation::UnknownId { id } => write!(f, "raw id {id} is not in the taxonomy"),
            Violation::BadTarget { id, target } => {
                write!(f, "raw id {id} maps to out-of-range unified id {target}")
            }
            Violation::Merge {
                source,
                expected,
                found,
            } => write!(
                f,
                "merge: '{source}' must map to '{expected}', found {}",
                found.as_deref().unwrap_or("nothing")
            ),
            Violation::Unlabeled => write!(f, "synthetic taxonomy must name id 0 'unlabeled'"),
        }
    }
}

#[derive(Deserialize, Serialize)]
struct MapFile {
    #[serde(default)]
    ignore: Vec<u16>,
    taxonomy: TaxonomyFile,
    #[serde(default)]
    rules: BTreeMap<String, String>,
}

#[derive(Deserialize, Serialize)]
struct TaxonomyFile {
    name: String,
    kind: TaxonomyKind,
    entries: BTreeMap<String, String>,
}

fn parse_id(s: &str) -> std::result::Result<u16, String> {
    s.trim()
        .parse::<u16>()
        .map_err(|_| format!("'{s}' is not a 16-bit label id"))
}

impl LabelMap {
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        let file: MapFile = toml::from_str(text).map_err(|e| e.to_string())?;
        let entries = file
            .taxonomy
            .entries
            .iter()
            .map(|(k, v)| Ok((parse_id(k)?, v.clone())))
            .collect::<std::result::Result<BTreeMap<_, _>, String>>()?;
        let rules = file
            .rules
            .iter()
            .map(|(k, v)| {
                let target = unified_id(v).ok_or_else(|| format!("unknown unified class '{v}'"))?;
                Ok((parse_id(k)?, target))
            })
            .collect::<std::result::Result<BTreeMap<_, _>, String>>()?;
        Ok(Self {
            source: Taxonomy {
                name: file.taxonomy.name,
                kind: file.taxonomy.kind,
                entries,
            },
            rules,
            ignore: file.ignore.into_iter().collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|m| Error::parse(path, m))
    }

    pub fn to_toml_string(&self) -> String {
        let file = MapFile {
            ignore: self.ignore.iter().copied().collect(),
            taxonomy: TaxonomyFile {
                name: self.source.name.clone(),
                kind: self.source.kind,
                entries: self
                    .source
                    .entries
                    .iter()
                    .map(|(k, v)| (k.to_string(), v.clone()))
                    .collect(),
            },
            rules: self
                .rules
                .iter()
                .map(|(k, &v)| (k.to_string(), unified_name(v).unwrap_or("?").to_string()))
                .collect(),
        };
        toml::to_string(&file).expect("label map serializes")
    }

    /// Shipped map for a taxonomy name, if one exists.
    pub fn builtin(taxonomy: &str) -> Option<Self> {
        let text = match taxonomy {
            "carla-0.9.15" => include_str!("../../../data/maps/carla.toml"),
            "semantic-kitti" => include_str!("../../../data/maps/semantic-kitti.toml"),
            "unified16" => include_str!("../../../data/maps/unified16.toml"),
            _ => return None,
        };
        Some(Self::from_toml_str(text).expect("shipped label maps parse"))
    }

    pub fn synthetic() -> Self {
        Self::builtin("carla-0.9.15").unwrap()
    }

    pub fn real() -> Self {
        Self::builtin("semantic-kitti").unwrap()
    }

    pub fn identity() -> Self {
        Self::builtin("unified16").unwrap()
    }

    /// Unified id for one raw id; rules win over ignore entries.
    #[inline]
    pub fn map_one(&self, raw: u16) -> Result<u8> {
        if let Some(&u) = self.rules.get(&raw) {
            Ok(u)
        } else if self.ignore.contains(&raw) {
            Ok(IGNORE)
        } else {
            Err(Error::UnmappedLabel(raw as u32))
        }
    }

    pub fn map_labels(&self, labels: &[u16]) -> Result<Vec<u8>> {
        let table = self.lookup_table();
        labels
            .iter()
            .map(|&l| match table[l as usize] {
                LOOKUP_UNKNOWN => Err(Error::UnmappedLabel(l as u32)),
                u => Ok(u as u8),
            })
            .collect()
    }

    fn lookup_table(&self) -> Vec<u16> {
        let mut t = vec![LOOKUP_UNKNOWN; 1 << 16];
        for &i in &self.ignore {
            t[i as usize] = IGNORE as u16;
        }
        for (&i, &u) in &self.rules {
            t[i as usize] = u as u16;
        }
        t
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        let mut v = Vec::new();
        for &id in self.source.entries.keys() {
            let mapped = self.rules.contains_key(&id);
            let ignored = self.ignore.contains(&id);
            if mapped && ignored {
                v.push(Violation::Conflict { id });
            } else if !mapped && !ignored {
                v.push(Violation::Missing { id });
            }
        }
        for &id in self.rules.keys().chain(self.ignore.iter()) {
            if !self.source.entries.contains_key(&id) {
                v.push(Violation::UnknownId { id });
            }
        }
        for (&id, &target) in &self.rules {
            if target as usize >= NUM_UNIFIED {
                v.push(Violation::BadTarget { id, target });
            }
        }
        match self.source.kind {
            TaxonomyKind::Real => {
                for (sources, target) in REAL_MERGES {
                    for &s in sources {
                        let found = self
                            .source
                            .id_of(s)
                            .and_then(|id| self.rules.get(&id))
                            .and_then(|&u| unified_name(u));
                        if found != Some(target) {
                            v.push(Violation::Merge {
                                source: s.to_string(),
                                expected: target.to_string(),
                                found: found.map(str::to_string),
                            });
                        }
                    }
                }
            }
            TaxonomyKind::Synthetic => {
                if self.source.name_of(0) != Some("unlabeled") {
                    v.push(Violation::Unlabeled);
                }
            }
            TaxonomyKind::Unified => {}
        }
        v.sort_by_key(|x| format!("{x:?}"));
        v.dedup();
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }
}

const LOOKUP_UNKNOWN: u16 = u16::MAX;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_maps_validate() {
        for name in ["carla-0.9.15", "semantic-kitti", "unified16"] {
            let lm = LabelMap::builtin(name).unwrap();
            assert_eq!(lm.validate(), Ok(()), "{name}");
        }
    }

    #[test]
    fn synthetic_taxonomy_has_29_labels() {
        let lm = LabelMap::synthetic();
        assert_eq!(lm.source.entries.len(), 29);
        assert_eq!(lm.source.name_of(0), Some("unlabeled"));
    }

    #[test]
    fn riders_merge() {
        let lm = LabelMap::real();
        let ids: Vec<u16> = ["bicyclist", "motorcyclist"]
            .iter()
            .map(|n| lm.source.id_of(n).unwrap())
            .collect();
        let rider = unified_id("rider").unwrap();
        assert_eq!(lm.map_labels(&ids).unwrap(), vec![rider, rider]);
    }

    #[test]
    fn sky_water_trains_ignored() {
        let lm = LabelMap::synthetic();
        let ids: Vec<u16> = ["sky", "water", "train"]
            .iter()
            .map(|n| lm.source.id_of(n).unwrap())
            .collect();
        assert_eq!(lm.map_labels(&ids).unwrap(), vec![IGNORE; 3]);
    }

    #[test]
    fn empty_input() {
        assert!(LabelMap::real().map_labels(&[]).unwrap().is_empty());
    }

    #[test]
    fn unknown_id_named_in_error() {
        match LabelMap::real().map_labels(&[10, 12345]) {
            Err(Error::UnmappedLabel(12345)) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conflict_detected() {
        let mut lm = LabelMap::real();
        lm.ignore.insert(10);
        assert_eq!(lm.validate(), Err(vec![Violation::Conflict { id: 10 }]));
    }

    #[test]
    fn missing_detected() {
        let mut lm = LabelMap::real();
        lm.ignore.remove(&99);
        assert_eq!(lm.validate(), Err(vec![Violation::Missing { id: 99 }]));
    }

    #[test]
    fn broken_merge_detected() {
        let mut lm = LabelMap::real();
        lm.rules.insert(71, unified_id("terrain").unwrap());
        let err = lm.validate().unwrap_err();
        assert_eq!(err.len(), 1);
        assert!(matches!(&err[0], Violation::Merge { source, .. } if source == "trunk"));
    }

    #[test]
    fn identity_is_idempotent() {
        let id = LabelMap::identity();
        let lm = LabelMap::real();
        let raw: Vec<u16> = lm.source.entries.keys().copied().collect();
        let once = lm.map_labels(&raw).unwrap();
        let wide: Vec<u16> = once.iter().map(|&u| u as u16).collect();
        assert_eq!(id.map_labels(&wide).unwrap(), once);
    }

    #[test]
    fn toml_roundtrip() {
        let lm = LabelMap::real();
        assert_eq!(LabelMap::from_toml_str(&lm.to_toml_string()).unwrap(), lm);
    }

    #[test]
    fn unified_list_is_fixed() {
        assert_eq!(NUM_UNIFIED, 16);
        assert_eq!(unified_id("car"), Some(0));
        assert_eq!(unified_id("other-vehicle"), Some(15));
    }
}
