use super::{DatasetSplit, EmbeddingRecord, SplitName};
use crate::error::{Error, Result};

/// Raw CrisisMMD category name → class index, for one task.
///
/// Lookups are case-insensitive and treat `_` and spaces alike, so both the
/// annotation-file spelling (`injured_or_dead_people`) and the prose spelling
/// (`injured or dead people`) resolve.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub task_id: u8,
    pub class_names: Vec<String>,
    entries: Vec<(String, usize)>,
}

fn normalize(raw: &str) -> String {
    raw.trim()
        .to_lowercase()
        .replace(['_', '-'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

impl LabelMap {
    pub fn for_task(task_id: u8) -> Result<Self> {
        let (classes, raw): (&[&str], &[(&str, usize)]) = match task_id {
            1 => (
                &["informative", "not informative"],
                &[("informative", 0), ("not informative", 1)],
            ),
            // Affected individuals absorbs injured/dead and missing/found people;
            // the remaining non-actionable categories collapse into "others".
            2 => (
                &[
                    "infrastructure damage",
                    "vehicle damage",
                    "rescue efforts",
                    "affected individuals",
                    "others",
                ],
                &[
                    ("infrastructure and utility damage", 0),
                    ("vehicle damage", 1),
                    ("rescue volunteering or donation effort", 2),
                    ("affected individuals", 3),
                    ("injured or dead people", 3),
                    ("missing or found people", 3),
                    ("other relevant information", 4),
                    ("not humanitarian", 4),
                ],
            ),
            3 => (
                &["severe damage", "mild damage", "little or no damage"],
                &[("severe damage", 0), ("mild damage", 1), ("little or no damage", 2)],
            ),
            other => return Err(Error::InvalidConfig(format!("no label map for task {other}"))),
        };
        Ok(Self {
            task_id,
            class_names: classes.iter().map(|s| s.to_string()).collect(),
            entries: raw.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn lookup(&self, raw: &str) -> Result<usize> {
        let key = normalize(raw);
        self.entries
            .iter()
            .find(|(k, _)| *k == key)
            .map(|&(_, v)| v)
            .ok_or_else(|| Error::UnknownCategory {
                task: self.task_id,
                category: raw.to_string(),
            })
    }

    /// Every raw category this map accepts, in table order.
    pub fn raw_categories(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }
}

/// A record whose label is still a raw category name.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub id: String,
    pub f_i: Vec<f64>,
    pub f_t: Vec<f64>,
    pub category: String,
}

pub fn apply_label_map(
    rows: Vec<RawRecord>,
    map: &LabelMap,
    split_name: SplitName,
    dim_image: usize,
    dim_text: usize,
) -> Result<DatasetSplit> {
    let records = rows
        .into_iter()
        .map(|r| {
            Ok(EmbeddingRecord {
                label: map.lookup(&r.category)?,
                id: r.id,
                f_i: r.f_i,
                f_t: r.f_t,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let split = DatasetSplit {
        records,
        num_classes: map.num_classes(),
        class_names: map.class_names.clone(),
        task_id: map.task_id,
        split_name,
        dim_image,
        dim_text,
    };
    split.validate()?;
    Ok(split)
}
