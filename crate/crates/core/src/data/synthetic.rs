use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, EmbeddingRecord, SplitName};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Label is the sign of a fixed linear functional of the image embedding.
    Separable,
    /// Label is the XOR of one sign per modality; each modality alone is
    /// independent of the label.
    Xor,
    /// Labels independent of both embeddings.
    Noise,
}

impl SyntheticKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticKind::Separable => "separable",
            SyntheticKind::Xor => "xor",
            SyntheticKind::Noise => "noise",
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(SyntheticKind::Separable),
            "xor" => Ok(SyntheticKind::Xor),
            "noise" => Ok(SyntheticKind::Noise),
            other => Err(Error::InvalidConfig(format!(
                "unknown synthetic kind `{other}` (expected separable, xor or noise)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn new(train: usize, validation: usize, test: usize) -> Self {
        Self {
            train,
            validation,
            test,
        }
    }

    fn get(&self, split: SplitName) -> usize {
        match split {
            SplitName::Train => self.train,
            SplitName::Validation => self.validation,
            SplitName::Test => self.test,
        }
    }
}

/// Standard deviation of embeddings along the label-defining direction.
/// Every other direction has unit variance.
pub const CONCEPT_STD: f64 = 8.0;

/// Zero-mean Gaussian vector with covariance `I + (CONCEPT_STD² - 1) c cᵀ`,
/// rounded to `f32` so in-memory splits equal what an `MMEB` round trip
/// returns.
fn gaussian(rng: &mut ChaCha8Rng, concept: &[f64]) -> Vec<f64> {
    let g: Vec<f64> = (0..concept.len()).map(|_| rng.sample(StandardNormal)).collect();
    let along = (CONCEPT_STD - 1.0) * dot(&g, concept);
    g.iter()
        .zip(concept)
        .map(|(x, c)| (x + along * c) as f32 as f64)
        .collect()
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Seeded train/validation/test splits of a two-class synthetic task.
///
/// The label-defining directions `u` (image) and `v` (text) are drawn once
/// from `seed` and shared by all three splits. Embeddings are Gaussian with
/// standard deviation [`CONCEPT_STD`] along those directions.
pub fn gen_synthetic(
    kind: SyntheticKind,
    sizes: SplitSizes,
    dim_image: usize,
    dim_text: usize,
    seed: u64,
) -> Result<[DatasetSplit; 3]> {
    if dim_image == 0 || dim_text == 0 {
        return Err(Error::InvalidConfig("embedding widths must be positive".into()));
    }
    if sizes.train == 0 || sizes.validation == 0 || sizes.test == 0 {
        return Err(Error::InvalidConfig("every split needs at least one record".into()));
    }
    let mut concept_rng = ChaCha8Rng::seed_from_u64(seed);
    let u = unit(&mut concept_rng, dim_image);
    let v = unit(&mut concept_rng, dim_text);

    let make = |split: SplitName, stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let records = (0..sizes.get(split))
            .map(|i| {
                let f_i = gaussian(&mut rng, &u);
                let f_t = gaussian(&mut rng, &v);
                let label = match kind {
                    SyntheticKind::Separable => usize::from(dot(&f_i, &u) > 0.0),
                    SyntheticKind::Xor => usize::from((dot(&f_i, &u) > 0.0) ^ (dot(&f_t, &v) > 0.0)),
                    SyntheticKind::Noise => rng.gen_range(0..2),
                };
                EmbeddingRecord {
                    id: format!("{split}-{i:06}"),
                    f_i,
                    f_t,
                    label,
                }
            })
            .collect();
        DatasetSplit {
            records,
            num_classes: 2,
            class_names: vec!["class_0".into(), "class_1".into()],
            task_id: 0,
            split_name: split,
            dim_image,
            dim_text,
        }
    };
    Ok([
        make(SplitName::Train, 1),
        make(SplitName::Validation, 2),
        make(SplitName::Test, 3),
    ])
}
