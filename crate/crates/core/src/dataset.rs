//! Annotation manifests and class-distribution statistics.
//!
//! A manifest is a JSONL file with one [`AnnotationRecord`] per line. The first
//! line may instead be a header object `{"taxonomy": [...], "seed": N}` that
//! declares class labels which do not (yet) occur in any record.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Capture condition of an annotated object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    #[serde(alias = "normal")]
    Normal,
    #[serde(alias = "night")]
    Night,
    #[serde(alias = "weather")]
    Weather,
    #[serde(alias = "rotated")]
    Rotated,
    #[serde(alias = "mixed")]
    Mixed,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::Normal,
        Condition::Night,
        Condition::Weather,
        Condition::Rotated,
        Condition::Mixed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Normal => "Normal",
            Condition::Night => "Night",
            Condition::Weather => "Weather",
            Condition::Rotated => "Rotated",
            Condition::Mixed => "Mixed",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown condition '{s}'")))
    }
}

/// Axis-aligned box in pixel units, `(x1, y1)` top-left and `(x2, y2)` bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Finite coordinates with strictly positive extent.
    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }
}

/// One labeled object instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub class_label: String,
    pub bbox: BBox,
    pub condition: Condition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    /// `(width, height)` in pixels.
    pub image_size: (u32, u32),
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| {
            Err(Error::InvalidRecord {
                sample_id: self.sample_id.clone(),
                line: None,
                message,
            })
        };
        if self.class_label.is_empty() {
            return fail("class_label is empty".into());
        }
        let (w, h) = self.image_size;
        if w == 0 || h == 0 {
            return fail(format!("image_size must be positive, got ({w}, {h})"));
        }
        let b = self.bbox;
        if !b.is_valid() {
            return fail(format!(
                "bbox requires x1 < x2 and y1 < y2, got ({}, {}, {}, {})",
                b.x1, b.y1, b.x2, b.y2
            ));
        }
        if !b.within(w as f64, h as f64) {
            return fail(format!(
                "bbox ({}, {}, {}, {}) lies outside the {w}x{h} image",
                b.x1, b.y1, b.x2, b.y2
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    taxonomy: BTreeSet<String>,
    #[serde(default)]
    seed: u64,
}

/// The annotated corpus. Record order is the canonical iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<AnnotationRecord>,
    pub taxonomy: BTreeSet<String>,
    pub seed: u64,
}

impl DatasetManifest {
    /// Builds a manifest, validating every record and adding its label to the taxonomy.
    pub fn new(records: Vec<AnnotationRecord>, seed: u64) -> Result<Self> {
        let mut taxonomy = BTreeSet::new();
        for r in &records {
            r.validate()?;
            taxonomy.insert(r.class_label.clone());
        }
        Ok(DatasetManifest {
            records,
            taxonomy,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.class_label.clone()).or_insert(0) += 1;
        }
        counts
    }

    /// Indices of the records carrying `class`, in manifest order.
    pub fn indices_of(&self, class: &str) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.class_label == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Records whose label starts with a dotted prefix, e.g. `"vehicle"` matches `"vehicle.bicycle"`.
    pub fn with_label_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a AnnotationRecord> {
        self.records.iter().filter(move |r| {
            r.class_label == prefix
                || (r.class_label.starts_with(prefix)
                    && r.class_label[prefix.len()..].starts_with('.'))
        })
    }

    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        DatasetManifest {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            taxonomy: self.taxonomy.clone(),
            seed: self.seed,
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = ManifestHeader {
            taxonomy: self.taxonomy.clone(),
            seed: self.seed,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
        }
        Ok(())
    }
}

/// Reads a JSONL manifest. Blank lines are skipped; line numbers in errors are 1-based.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(BufReader::new(file), path)
}

pub fn parse_manifest<R: BufRead>(reader: R, path: &Path) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(trimmed).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
        let is_header = value.get("taxonomy").is_some() && value.get("sample_id").is_none();
        if is_header {
            if !manifest.records.is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: "taxonomy header must precede all records".into(),
                });
            }
            let header: ManifestHeader =
                serde_json::from_value(value).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: e.to_string(),
                })?;
            manifest.taxonomy.extend(header.taxonomy);
            manifest.seed = header.seed;
            continue;
        }
        let record: AnnotationRecord =
            serde_json::from_value(value).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
        record.validate().map_err(|e| match e {
            Error::InvalidRecord {
                sample_id, message, ..
            } => Error::InvalidRecord {
                sample_id,
                line: Some(line_no),
                message,
            },
            other => other,
        })?;
        manifest.taxonomy.insert(record.class_label.clone());
        manifest.records.push(record);
    }
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    manifest.write_jsonl(&mut out)?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Per-class counts and percentages, with a per-condition breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub counts: BTreeMap<String, usize>,
    pub percentages: BTreeMap<String, f64>,
    pub per_condition: BTreeMap<Condition, BTreeMap<String, usize>>,
    pub total: usize,
}

impl ClassDistribution {
    /// Distribution from bare counts, with no condition information.
    pub fn from_counts(counts: BTreeMap<String, usize>) -> Result<Self> {
        let total: usize = counts.values().sum();
        if total == 0 {
            return Err(Error::Empty("distribution over zero instances".into()));
        }
        let percentages = percentages_of(&counts, total);
        Ok(ClassDistribution {
            counts,
            percentages,
            per_condition: BTreeMap::new(),
            total,
        })
    }

    pub fn count(&self, class: &str) -> usize {
        self.counts.get(class).copied().unwrap_or(0)
    }

    pub fn percentage(&self, class: &str) -> Option<f64> {
        self.percentages.get(class).copied()
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.counts.keys().map(String::as_str)
    }

    /// Count of `class` under `condition`, zero when unobserved.
    pub fn condition_count(&self, class: &str, condition: Condition) -> usize {
        self.per_condition
            .get(&condition)
            .and_then(|m| m.get(class))
            .copied()
            .unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,count,percentage");
        for c in Condition::ALL {
            out.push(',');
            out.push_str(c.as_str());
        }
        out.push('\n');
        for (class, count) in &self.counts {
            out.push_str(&format!("{class},{count},{:.2}", self.percentages[class]));
            for c in Condition::ALL {
                out.push_str(&format!(",{}", self.condition_count(class, c)));
            }
            out.push('\n');
        }
        out
    }
}

fn percentages_of(counts: &BTreeMap<String, usize>, total: usize) -> BTreeMap<String, f64> {
    counts
        .iter()
        .map(|(k, &v)| (k.clone(), 100.0 * v as f64 / total as f64))
        .collect()
}

pub fn compute_distribution(manifest: &DatasetManifest) -> Result<ClassDistribution> {
    if manifest.is_empty() {
        return Err(Error::Empty(
            "manifest has no records; percentages are undefined".into(),
        ));
    }
    let mut counts = BTreeMap::new();
    let mut per_condition: BTreeMap<Condition, BTreeMap<String, usize>> = BTreeMap::new();
    for r in &manifest.records {
        *counts.entry(r.class_label.clone()).or_insert(0) += 1;
        *per_condition
            .entry(r.condition)
            .or_default()
            .entry(r.class_label.clone())
            .or_insert(0) += 1;
    }
    let total = manifest.len();
    let percentages = percentages_of(&counts, total);
    Ok(ClassDistribution {
        counts,
        percentages,
        per_condition,
        total,
    })
}

/// Share (in percent) of `class`'s instances captured under each observed condition.
pub fn condition_breakdown(
    dist: &ClassDistribution,
    class: &str,
) -> Result<BTreeMap<Condition, f64>> {
    let total = dist.count(class);
    if total == 0 {
        return Err(Error::UnknownClass(class.to_string()));
    }
    let observed: usize = dist
        .per_condition
        .values()
        .filter_map(|m| m.get(class))
        .sum();
    if observed == 0 {
        return Err(Error::Empty(format!(
            "no condition information recorded for '{class}'"
        )));
    }
    Ok(dist
        .per_condition
        .iter()
        .filter_map(|(cond, m)| {
            m.get(class)
                .map(|&n| (*cond, 100.0 * n as f64 / observed as f64))
        })
        .collect())
}

/// Train/validation/test record indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded split stratified by class: each class is shuffled independently and cut
/// at the rounded train/val fractions, the remainder going to test. Output indices
/// are sorted so they follow manifest order.
pub fn stratified_split(
    manifest: &DatasetManifest,
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<Split> {
    if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fractions train={train_frac} val={val_frac} leave no test share"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for class in manifest.class_counts().keys() {
        let mut idx = manifest.indices_of(class);
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = ((n as f64) * train_frac).round() as usize;
        let n_val = (((n as f64) * val_frac).round() as usize).min(n - n_train.min(n));
        let n_train = n_train.min(n);
        split.train.extend_from_slice(&idx[..n_train]);
        split.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        split.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}
