//! Embedding datasets: in-memory records, the `MMEB` file format, CrisisMMD
//! label maps and split bookkeeping, and synthetic generators.

mod counts;
mod labels;
mod mmeb;
mod synthetic;

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use counts::{validate_counts, CountDelta, CountReport, SplitSummary, Table1Row, TABLE1};
pub use labels::{apply_label_map, LabelMap, RawRecord};
pub use mmeb::{decode_split, encode_split, read_split, read_split_header, write_split, MAGIC, VERSION};
pub use synthetic::{gen_synthetic, SplitSizes, SyntheticKind, CONCEPT_STD};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// One sample: frozen image and text embeddings plus a class index.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub f_i: Vec<f64>,
    pub f_t: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Validation, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SplitName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown split `{s}`")))
    }
}

/// Records of one split sharing a label space and embedding widths.
///
/// `task_id` is 1–3 for the CrisisMMD tasks and 0 for synthetic data.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub records: Vec<EmbeddingRecord>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub task_id: u8,
    pub split_name: SplitName,
    pub dim_image: usize,
    pub dim_text: usize,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn summary(&self) -> SplitSummary {
        SplitSummary {
            task_id: self.task_id,
            split_name: self.split_name,
            n: self.records.len() as u64,
        }
    }

    /// Per-class record counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    /// Checks the split invariants: known task id, shared dims, labels in
    /// range, finite values, non-empty unique ids.
    pub fn validate(&self) -> Result<()> {
        if self.task_id > 3 {
            return Err(Error::InvalidConfig(format!("task id {} not in 0..=3", self.task_id)));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::InvalidConfig(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        let mut ids = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if r.id.is_empty() || !ids.insert(r.id.as_str()) {
                return Err(Error::InvalidConfig(format!("empty or duplicate record id `{}`", r.id)));
            }
            if r.f_i.len() != self.dim_image || r.f_t.len() != self.dim_text {
                return Err(Error::Dimension(format!(
                    "record `{}` has widths {}/{}, split declares {}/{}",
                    r.id,
                    r.f_i.len(),
                    r.f_t.len(),
                    self.dim_image,
                    self.dim_text
                )));
            }
            if r.label >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    label: r.label,
                    num_classes: self.num_classes,
                });
            }
            if !r.f_i.iter().chain(&r.f_t).all(|v| v.is_finite()) {
                return Err(Error::InvalidConfig(format!("record `{}` has non-finite values", r.id)));
            }
        }
        Ok(())
    }
}

/// Stacks records into `[B, D_I]` and `[B, D_T]` tensors plus labels.
pub fn stack_batch(records: &[&EmbeddingRecord]) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let first = records
        .first()
        .ok_or_else(|| Error::EmptySplit("cannot stack an empty batch".into()))?;
    let (di, dt) = (first.f_i.len(), first.f_t.len());
    let mut image = Vec::with_capacity(records.len() * di);
    let mut text = Vec::with_capacity(records.len() * dt);
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        if r.f_i.len() != di || r.f_t.len() != dt {
            return Err(Error::Dimension(format!("record `{}` has inconsistent widths", r.id)));
        }
        image.extend_from_slice(&r.f_i);
        text.extend_from_slice(&r.f_t);
        labels.push(r.label);
    }
    Ok((
        Tensor::new(&[records.len(), di], image)?,
        Tensor::new(&[records.len(), dt], text)?,
        labels,
    ))
}

/// A train/validation/test triple loaded from one directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub validation: DatasetSplit,
    pub test: DatasetSplit,
    /// Source file and its stored CRC32, per split in train/validation/test order.
    pub sources: Vec<(SplitName, PathBuf, u32)>,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &DatasetSplit {
        match name {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }
}

/// Loads every `.mmeb` file in `dir`, assigning each to a split by the
/// `split_name` stored in its header.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mmeb"))
        .collect();
    entries.sort();
    let mut slots: [Option<(DatasetSplit, PathBuf, u32)>; 3] = [None, None, None];
    for path in entries {
        let bytes = std::fs::read(&path)?;
        let split = decode_split(&bytes)?;
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let slot = &mut slots[split.split_name as usize];
        if slot.is_some() {
            return Err(Error::InvalidConfig(format!(
                "{} holds more than one `{}` split",
                dir.display(),
                split.split_name
            )));
        }
        *slot = Some((split, path, crc));
    }
    let mut sources = Vec::new();
    let mut take = |name: SplitName| -> Result<DatasetSplit> {
        let (split, path, crc) = slots[name as usize]
            .take()
            .ok_or_else(|| Error::InvalidConfig(format!("{} has no `{name}` split", dir.display())))?;
        sources.push((name, path, crc));
        Ok(split)
    };
    let train = take(SplitName::Train)?;
    let validation = take(SplitName::Validation)?;
    let test = take(SplitName::Test)?;
    for other in [&validation, &test] {
        if other.dim_image != train.dim_image
            || other.dim_text != train.dim_text
            || other.num_classes != train.num_classes
        {
            return Err(Error::Dimension(format!(
                "`{}` split disagrees with `train` on widths or label space",
                other.split_name
            )));
        }
    }
    Ok(Dataset {
        train,
        validation,
        test,
        sources,
    })
}
